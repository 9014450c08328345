//! Tokenization, vocabulary, and sequence encoders.
//!
//! The trainable encoder is deliberately small: each token row is the sum
//! of a token embedding and a position embedding, followed by dropout.
//! The encoder seam is pluggable — precomputed contextual embeddings can
//! be injected from a file instead (see [`PrecomputedEncoder`]), in which
//! case the matching stack trains on frozen inputs.

use std::collections::{BTreeMap, HashMap};

use crate::error::{CtmError, Result};
use crate::graph::{Graph, Var};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

/// Reserved vocabulary entries, in id order.
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
/// Dialogue turn separator used when flattening multi-turn passages.
pub const SEP_TOKEN: &str = "<sep>";
pub const RESERVED_TOKENS: [&str; 3] = [PAD_TOKEN, UNK_TOKEN, SEP_TOKEN];

/// Lowercase, split on whitespace, and peel leading/trailing ASCII
/// punctuation into separate tokens. Interior punctuation (as in
/// "don't") is kept. Non-empty input never yields an empty list: a lone
/// unknown token is emitted if nothing survives.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.to_lowercase().split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let mut a = 0;
        let mut b = chars.len();
        while a < b && chars[a].is_ascii_punctuation() {
            a += 1;
        }
        while b > a && chars[b - 1].is_ascii_punctuation() {
            b -= 1;
        }
        for &c in &chars[..a] {
            out.push(c.to_string());
        }
        if a < b {
            out.push(chars[a..b].iter().collect());
        }
        for &c in &chars[b..] {
            out.push(c.to_string());
        }
    }
    if out.is_empty() && !text.is_empty() {
        out.push(UNK_TOKEN.to_string());
    }
    out
}

/// Token-to-id map with reserved padding/unknown/separator entries.
///
/// Construction is deterministic: tokens are ranked by descending corpus
/// frequency with lexicographic tie-breaks.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from a token corpus, keeping at most `cap` entries in total
    /// (reserved entries included).
    pub fn build<'a, I>(docs: I, cap: usize) -> Vocab
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for doc in docs {
            for tok in doc {
                if !RESERVED_TOKENS.contains(&tok.as_str()) {
                    *freq.entry(tok).or_insert(0) += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let room = cap.saturating_sub(tokens.len());
        tokens.extend(ranked.into_iter().take(room).map(|(t, _)| t.to_string()));
        Vocab::from_tokens(tokens)
    }

    /// Rebuild from a serialized token list (reserved entries included).
    pub fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of a token; unknown tokens map to the reserved unknown id.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(1)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Shape and regularization settings of the trainable toy encoder. The
/// embedding tables themselves live in the model's parameter set.
#[derive(Debug, Clone, Copy)]
pub struct ToyEncoder {
    pub hidden_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl ToyEncoder {
    /// Seeded initial tables: token embeddings `[vocab × l]` and position
    /// embeddings `[max_len × l]`, uniform in `[-0.1, 0.1)`.
    pub fn init_tables<T: Real>(&self, vocab_len: usize, rng: &mut RngState) -> (Tensor<T>, Tensor<T>) {
        let tok = Tensor::uniform(vec![vocab_len, self.hidden_dim], -0.1, 0.1, rng);
        let pos = Tensor::uniform(vec![self.max_len, self.hidden_dim], -0.1, 0.1, rng);
        (tok, pos)
    }
}

/// Encode a token-id sequence: row i is `token_table[id_i] + pos_table[i]`,
/// then dropout. Sequences longer than the position table are truncated;
/// empty sequences are a contract error.
pub fn encode_ids<T: Real>(
    g: &Graph<T>,
    token_table: Var,
    position_table: Var,
    ids: &[usize],
    dropout: f64,
    rng: &mut RngState,
    training: bool,
) -> Result<Var> {
    if ids.is_empty() {
        return Err(CtmError::contract(
            "encode: empty token sequence".to_string(),
        ));
    }
    let max_len = g.shape(position_table)[0];
    let ids = if ids.len() > max_len {
        &ids[..max_len]
    } else {
        ids
    };
    let tok = g.gather_rows(token_table, ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = g.gather_rows(position_table, &positions)?;
    let h = g.add(tok, pos)?;
    g.dropout(h, dropout, rng, training)
}

/// Frozen, externally produced embeddings keyed by `(example id, field)`,
/// where field is `p`, `q`, or `a<i>`.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedEncoder {
    entries: BTreeMap<String, Tensor<f32>>,
    hidden_dim: usize,
}

impl PrecomputedEncoder {
    pub fn new(hidden_dim: usize) -> Self {
        PrecomputedEncoder {
            entries: BTreeMap::new(),
            hidden_dim,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn key(example_id: &str, field: &str) -> String {
        format!("{example_id}/{field}")
    }

    pub fn insert(&mut self, example_id: &str, field: &str, matrix: Tensor<f32>) -> Result<()> {
        if matrix.rank() != 2 || matrix.cols() != self.hidden_dim {
            return Err(CtmError::dim(format!(
                "precomputed embedding for {example_id}/{field} has shape {:?}, expected [*, {}]",
                matrix.shape(),
                self.hidden_dim
            )));
        }
        self.entries.insert(Self::key(example_id, field), matrix);
        Ok(())
    }

    pub fn get(&self, example_id: &str, field: &str) -> Result<&Tensor<f32>> {
        self.entries
            .get(&Self::key(example_id, field))
            .ok_or_else(|| {
                CtmError::contract(format!(
                    "no precomputed embedding for {example_id}/{field}"
                ))
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn from_records(records: Vec<(String, Tensor<f32>)>, hidden_dim: usize) -> Result<Self> {
        let mut enc = PrecomputedEncoder::new(hidden_dim);
        for (key, matrix) in records {
            let (ex, field) = key.rsplit_once('/').ok_or_else(|| {
                CtmError::contract(format!("embedding record key {key:?} lacks a field suffix"))
            })?;
            enc.insert(ex, field, matrix)?;
        }
        Ok(enc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_splits_punctuation_but_keeps_interior() {
        assert_eq!(tokenize("Hello, world"), vec!["hello", ",", "world"]);
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("don't stop."), vec!["don't", "stop", "."]);
        assert_eq!(tokenize("(hi!)"), vec!["(", "hi", "!", ")"]);
        assert_eq!(tokenize("..."), vec![".", ".", "."]);
        // non-empty input that tokenizes to nothing yields the unknown token
        assert_eq!(tokenize("\u{00a0}"), vec![UNK_TOKEN.to_string()]);
    }

    #[test]
    fn vocab_orders_by_frequency_then_lexicographic() {
        let docs: Vec<Vec<String>> = vec![
            tokenize("b b b a a c"),
            tokenize("a c d"),
        ];
        let refs: Vec<&[String]> = docs.iter().map(|d| d.as_slice()).collect();
        let v = Vocab::build(refs.iter().copied(), 100);
        // reserved first, then a (3) and b (3) tie broken lexicographically,
        // then c (2), d (1)
        assert_eq!(v.tokens()[..3], RESERVED_TOKENS.map(String::from));
        assert_eq!(v.id("a"), 3);
        assert_eq!(v.id("b"), 4);
        assert_eq!(v.id("c"), 5);
        assert_eq!(v.id("d"), 6);
        assert_eq!(v.id("zzz"), 1);
    }

    #[test]
    fn vocab_cap_limits_size() {
        let docs: Vec<Vec<String>> = vec![tokenize("a b c d e f g h")];
        let refs: Vec<&[String]> = docs.iter().map(|d| d.as_slice()).collect();
        let v = Vocab::build(refs.iter().copied(), 5);
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), 3);
        assert_eq!(v.id("b"), 4);
        assert_eq!(v.id("c"), 1); // over the cap, unknown
    }

    #[test]
    fn encode_shapes_truncation_and_determinism() {
        let g = Graph::<f64>::new();
        let enc = ToyEncoder {
            hidden_dim: 3,
            max_len: 4,
            dropout: 0.0,
        };
        let mut rng = RngState::new(1);
        let (tok, pos) = enc.init_tables::<f64>(10, &mut rng);
        let tok = g.leaf(tok, false).unwrap();
        let pos = g.leaf(pos, false).unwrap();

        let mut r = RngState::new(2);
        let h = encode_ids(&g, tok, pos, &[1, 2, 3], 0.0, &mut r, false).unwrap();
        assert_eq!(g.shape(h), vec![3, 3]);

        // longer than max_len: truncated, not an error
        let h_long = encode_ids(&g, tok, pos, &[1, 2, 3, 4, 5, 6], 0.0, &mut r, false).unwrap();
        assert_eq!(g.shape(h_long), vec![4, 3]);

        // inference is deterministic
        let h2 = encode_ids(&g, tok, pos, &[1, 2, 3], 0.0, &mut r, false).unwrap();
        assert_eq!(g.value(h), g.value(h2));

        assert!(encode_ids(&g, tok, pos, &[], 0.0, &mut r, false).is_err());
    }

    #[test]
    fn zero_tables_give_zero_encoding() {
        let g = Graph::<f64>::new();
        let tok = g.leaf(Tensor::zeros(vec![6, 2]), false).unwrap();
        let pos = g.leaf(Tensor::zeros(vec![8, 2]), false).unwrap();
        let mut r = RngState::new(3);
        let h = encode_ids(&g, tok, pos, &[0, 5, 2], 0.0, &mut r, false).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_table_rows_read_back_token_embeddings() {
        // one-hot-style table with identity rows and zero positions: row i
        // of the encoding equals the table row of token i
        let g = Graph::<f64>::new();
        let eye = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let tok = g.leaf(eye.clone(), false).unwrap();
        let pos = g.leaf(Tensor::zeros(vec![5, 3]), false).unwrap();
        let mut r = RngState::new(4);
        let h = encode_ids(&g, tok, pos, &[2, 0], 0.0, &mut r, false).unwrap();
        let v = g.value(h);
        assert_eq!(v.row(0), eye.row(2));
        assert_eq!(v.row(1), eye.row(0));
    }

    #[test]
    fn gradient_reaches_exactly_the_used_rows() {
        let g = Graph::<f64>::new();
        let mut rng = RngState::new(5);
        let tok = g
            .leaf(Tensor::uniform(vec![7, 2], -0.1, 0.1, &mut rng), true)
            .unwrap();
        let pos = g.leaf(Tensor::zeros(vec![4, 2]), false).unwrap();
        let mut r = RngState::new(6);
        let h = encode_ids(&g, tok, pos, &[1, 4], 0.0, &mut r, true).unwrap();
        let loss = g.sum(h).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(tok).unwrap();
        for row in 0..7 {
            let nonzero = grad.row(row).iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, row == 1 || row == 4, "row {row}");
        }
    }

    #[test]
    fn swapping_tokens_swaps_rows_when_positions_are_zero() {
        let g = Graph::<f64>::new();
        let mut rng = RngState::new(8);
        let table = Tensor::<f64>::uniform(vec![9, 4], -1.0, 1.0, &mut rng);
        let tok = g.leaf(table, false).unwrap();
        let pos = g.leaf(Tensor::zeros(vec![6, 4]), false).unwrap();
        let mut r = RngState::new(9);
        let a = g.value(encode_ids(&g, tok, pos, &[3, 7, 5], 0.0, &mut r, false).unwrap());
        let b = g.value(encode_ids(&g, tok, pos, &[5, 7, 3], 0.0, &mut r, false).unwrap());
        assert_eq!(a.row(0), b.row(2));
        assert_eq!(a.row(1), b.row(1));
        assert_eq!(a.row(2), b.row(0));
    }

    #[test]
    fn precomputed_encoder_checks_dims_and_keys() {
        let mut enc = PrecomputedEncoder::new(3);
        let m = Tensor::from_rows(&[vec![1.0f32, 2.0, 3.0]]).unwrap();
        enc.insert("ex1", "p", m.clone()).unwrap();
        assert_eq!(enc.get("ex1", "p").unwrap(), &m);
        assert!(enc.get("ex1", "q").is_err());
        let bad = Tensor::from_rows(&[vec![1.0f32, 2.0]]).unwrap();
        assert!(enc.insert("ex1", "q", bad).is_err());
    }
}
