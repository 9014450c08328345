//! Dataset parsing, sliding-window splitting, question tagging, and
//! synthetic corpus generation.
//!
//! RACE files carry `{article, questions[], options[][], answers[], id}`
//! with letter answers; DREAM files carry
//! `[[turns...], [{question, choice, answer}...], id]` entries with the
//! answer given as the exact choice text. Parsing is total: a file either
//! yields examples satisfying every invariant or a structured parse error.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::encoder::{tokenize, SEP_TOKEN};
use crate::error::{CtmError, Result};
use crate::rng::RngState;

/// One multiple-choice question instance.
#[derive(Debug, Clone, PartialEq)]
pub struct McqaExample {
    pub id: String,
    pub passage: Vec<String>,
    pub question: Vec<String>,
    pub options: Vec<Vec<String>>,
    pub gold: usize,
}

impl McqaExample {
    /// Enforce the structural invariants; `expected_options` pins the
    /// option count for format-specific parsing.
    pub fn validate(&self, expected_options: Option<usize>) -> Result<()> {
        if self.options.len() < 2 {
            return Err(CtmError::contract(format!(
                "{}: need at least 2 options, got {}",
                self.id,
                self.options.len()
            )));
        }
        if let Some(n) = expected_options {
            if self.options.len() != n {
                return Err(CtmError::contract(format!(
                    "{}: expected {n} options, got {}",
                    self.id,
                    self.options.len()
                )));
            }
        }
        if self.gold >= self.options.len() {
            return Err(CtmError::contract(format!(
                "{}: gold index {} out of range",
                self.id, self.gold
            )));
        }
        if self.options.iter().any(|o| o.is_empty()) || self.passage.is_empty() {
            return Err(CtmError::contract(format!(
                "{}: empty passage or option",
                self.id
            )));
        }
        Ok(())
    }
}

/// Sub-passage produced by the sliding window, carrying its parent's
/// question and options.
#[derive(Debug, Clone)]
pub struct WindowedExample {
    pub parent_id: String,
    pub window: usize,
    pub passage: Vec<String>,
    pub question: Vec<String>,
    pub options: Vec<Vec<String>>,
    pub gold: usize,
}

impl WindowedExample {
    /// Stable identity of this window, used for RNG stream derivation and
    /// precomputed-embedding lookup.
    pub fn instance_id(&self) -> String {
        format!("{}#w{}", self.parent_id, self.window)
    }
}

/// Supported dataset formats. `Synth` is RACE-shaped JSON without the
/// four-option constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Race,
    Dream,
    Synth,
}

impl std::str::FromStr for DataFormat {
    type Err = CtmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "race" => Ok(DataFormat::Race),
            "dream" => Ok(DataFormat::Dream),
            "synth" => Ok(DataFormat::Synth),
            other => Err(CtmError::config(format!(
                "unknown data format {other:?} (expected race|dream|synth)"
            ))),
        }
    }
}

#[derive(Deserialize)]
struct RaceRecord {
    article: String,
    questions: Vec<String>,
    options: Vec<Vec<String>>,
    answers: Vec<String>,
    id: String,
}

fn parse_race_value(
    value: serde_json::Value,
    file: &str,
    strict_four: bool,
) -> Result<Vec<McqaExample>> {
    let records: Vec<RaceRecord> = if value.is_array() {
        serde_json::from_value(value)
            .map_err(|e| CtmError::parse(file, format!("bad record array: {e}")))?
    } else {
        vec![serde_json::from_value(value)
            .map_err(|e| CtmError::parse(file, format!("bad record: {e}")))?]
    };

    let mut out = Vec::new();
    for record in records {
        let n = record.questions.len();
        if record.options.len() != n || record.answers.len() != n {
            return Err(CtmError::parse(
                file,
                format!(
                    "record {}: {} questions but {} option sets and {} answers",
                    record.id,
                    n,
                    record.options.len(),
                    record.answers.len()
                ),
            ));
        }
        let passage = tokenize(&record.article);
        for qi in 0..n {
            let letter = record.answers[qi].trim();
            let gold = match letter.as_bytes() {
                [c @ b'A'..=b'Z'] => (c - b'A') as usize,
                _ => {
                    return Err(CtmError::parse(
                        file,
                        format!("question {qi}: bad answer letter {letter:?}"),
                    ))
                }
            };
            let options: Vec<Vec<String>> =
                record.options[qi].iter().map(|o| tokenize(o)).collect();
            if strict_four && options.len() != 4 {
                return Err(CtmError::parse(
                    file,
                    format!("question {qi}: expected 4 options, got {}", options.len()),
                ));
            }
            if gold >= options.len() {
                return Err(CtmError::parse(
                    file,
                    format!(
                        "question {qi}: answer {letter} out of range for {} options",
                        options.len()
                    ),
                ));
            }
            let example = McqaExample {
                id: format!("{}#q{qi}", record.id),
                passage: passage.clone(),
                question: tokenize(&record.questions[qi]),
                options,
                gold,
            };
            example
                .validate(strict_four.then_some(4))
                .map_err(|e| CtmError::parse(file, format!("question {qi}: {e}")))?;
            out.push(example);
        }
    }
    Ok(out)
}

/// Parse one RACE-format file (a single record or an array of records).
pub fn parse_race_file(path: &Path) -> Result<Vec<McqaExample>> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CtmError::parse(&file, format!("bad JSON: {e}")))?;
    parse_race_value(value, &file, true)
}

/// Parse one synthetic-corpus file: RACE-shaped, any option count >= 2.
pub fn parse_synth_file(path: &Path) -> Result<Vec<McqaExample>> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CtmError::parse(&file, format!("bad JSON: {e}")))?;
    parse_race_value(value, &file, false)
}

#[derive(Deserialize)]
struct DreamQuestion {
    question: String,
    choice: Vec<String>,
    answer: String,
}

/// Parse one DREAM-format file. Dialogue turns are joined with the
/// reserved separator token.
pub fn parse_dream_file(path: &Path) -> Result<Vec<McqaExample>> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let entries: Vec<(Vec<String>, Vec<DreamQuestion>, String)> = serde_json::from_str(&text)
        .map_err(|e| CtmError::parse(&file, format!("bad JSON: {e}")))?;

    let mut out = Vec::new();
    for (turns, questions, id) in entries {
        let mut passage: Vec<String> = Vec::new();
        for (i, turn) in turns.iter().enumerate() {
            if i > 0 {
                passage.push(SEP_TOKEN.to_string());
            }
            passage.extend(tokenize(turn));
        }
        for (qi, q) in questions.iter().enumerate() {
            if q.choice.len() != 3 {
                return Err(CtmError::parse(
                    &file,
                    format!("{id} question {qi}: expected 3 choices, got {}", q.choice.len()),
                ));
            }
            let matches: Vec<usize> = q
                .choice
                .iter()
                .enumerate()
                .filter(|(_, c)| c.as_str() == q.answer)
                .map(|(i, _)| i)
                .collect();
            let gold = match matches.as_slice() {
                [one] => *one,
                [] => {
                    return Err(CtmError::parse(
                        &file,
                        format!("{id} question {qi}: answer not among choices"),
                    ))
                }
                _ => {
                    return Err(CtmError::parse(
                        &file,
                        format!("{id} question {qi}: ambiguous answer matches duplicate choices"),
                    ))
                }
            };
            let example = McqaExample {
                id: format!("{id}#q{qi}"),
                passage: passage.clone(),
                question: tokenize(&q.question),
                options: q.choice.iter().map(|c| tokenize(c)).collect(),
                gold,
            };
            example
                .validate(Some(3))
                .map_err(|e| CtmError::parse(&file, format!("question {qi}: {e}")))?;
            out.push(example);
        }
    }
    Ok(out)
}

/// Recursively collect dataset files (`.json`/`.txt`), sorted by path for
/// deterministic ordering.
fn collect_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if matches!(
                path.extension().and_then(|e| e.to_str()),
                Some("json") | Some("txt")
            ) {
                files.push(path);
            }
        }
    }
    files.sort();
    Ok(files)
}

/// Load a dataset from a file or directory in the given format.
pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Vec<McqaExample>> {
    let parse_one = |p: &Path| match format {
        DataFormat::Race => parse_race_file(p),
        DataFormat::Dream => parse_dream_file(p),
        DataFormat::Synth => parse_synth_file(p),
    };
    if path.is_dir() {
        let mut out = Vec::new();
        for file in collect_files(path)? {
            out.extend(parse_one(&file)?);
        }
        Ok(out)
    } else {
        parse_one(path)
    }
}

/// Window start offsets covering a passage of `len` tokens: `0, stride,
/// 2*stride, ...` with the final window end-aligned so the last token is
/// covered. Passages that fit yield exactly one window.
pub fn sliding_window(len: usize, max_len: usize, stride: usize) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(CtmError::config("window max_len must be >= 1".to_string()));
    }
    if stride == 0 || stride > max_len {
        return Err(CtmError::config(format!(
            "window stride must be in [1, max_len={max_len}], got {stride}"
        )));
    }
    if len <= max_len {
        return Ok(vec![0]);
    }
    let mut starts = Vec::new();
    let mut s = 0;
    while s + max_len < len {
        starts.push(s);
        s += stride;
    }
    starts.push(len - max_len);
    Ok(starts)
}

/// Split every over-length passage into windows; short passages pass
/// through as their single window.
pub fn windowize(
    examples: &[McqaExample],
    max_len: usize,
    stride: usize,
) -> Result<Vec<WindowedExample>> {
    let mut out = Vec::new();
    for ex in examples {
        let starts = sliding_window(ex.passage.len(), max_len, stride)?;
        for (w, &start) in starts.iter().enumerate() {
            let end = usize::min(start + max_len, ex.passage.len());
            out.push(WindowedExample {
                parent_id: ex.id.clone(),
                window: w,
                passage: ex.passage[start..end].to_vec(),
                question: ex.question.clone(),
                options: ex.options.clone(),
                gold: ex.gold,
            });
        }
    }
    Ok(out)
}

/// Heuristic question-type tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuestionTag {
    What,
    Which,
    Cloze,
    Other,
}

impl std::fmt::Display for QuestionTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QuestionTag::What => "what",
            QuestionTag::Which => "which",
            QuestionTag::Cloze => "cloze",
            QuestionTag::Other => "other",
        })
    }
}

const INTERROGATIVES: [&str; 9] = [
    "what", "which", "who", "whom", "whose", "when", "where", "why", "how",
];

/// Tag a question: a run of underscores marks a cloze blank; otherwise the
/// first interrogative token decides between what/which/other.
pub fn tag_question(tokens: &[String]) -> QuestionTag {
    if tokens
        .iter()
        .any(|t| !t.is_empty() && t.chars().all(|c| c == '_'))
    {
        return QuestionTag::Cloze;
    }
    for t in tokens {
        if INTERROGATIVES.contains(&t.as_str()) {
            return match t.as_str() {
                "what" => QuestionTag::What,
                "which" => QuestionTag::Which,
                _ => QuestionTag::Other,
            };
        }
    }
    QuestionTag::Other
}

/// Parameters of the synthetic keyword-matching corpus.
#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub questions: usize,
    pub options: usize,
    /// Total distinct word types (keywords + fillers).
    pub vocab_words: usize,
    pub seed: u64,
}

/// Generate a keyword corpus: each passage hides one keyword sentence, the
/// correct option contains that keyword, and distractors draw exclusively
/// from the filler (non-keyword) vocabulary.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<McqaExample>> {
    if spec.options < 2 {
        return Err(CtmError::config(format!(
            "synth needs at least 2 options, got {}",
            spec.options
        )));
    }
    let keyword_count = usize::max(2, spec.vocab_words / 4);
    let filler_count = spec.vocab_words.saturating_sub(keyword_count);
    // each distractor needs 2 distinct fillers; demand enough slack that
    // distinct option lists are always found
    if filler_count < 4 * spec.options {
        return Err(CtmError::config(format!(
            "synth vocab of {} words leaves only {filler_count} fillers for {} options",
            spec.vocab_words, spec.options
        )));
    }
    let keywords: Vec<String> = (0..keyword_count).map(|i| format!("key{i}")).collect();
    let fillers: Vec<String> = (0..filler_count).map(|i| format!("word{i}")).collect();

    let question_template: Vec<String> =
        tokenize("what word is hidden in the passage ?");

    let mut out = Vec::with_capacity(spec.questions);
    for qi in 0..spec.questions {
        let mut rng = RngState::stream(spec.seed, &[0x5e17, qi as u64]);
        let keyword = rng.choose(&keywords).clone();

        let sentences = 3;
        let key_sentence = rng.below(sentences);
        let mut passage = Vec::new();
        for s in 0..sentences {
            let words = 4 + rng.below(3);
            let key_pos = rng.below(words);
            for w in 0..words {
                if s == key_sentence && w == key_pos {
                    passage.push(keyword.clone());
                } else {
                    passage.push(rng.choose(&fillers).clone());
                }
            }
            passage.push(".".to_string());
        }

        // Distractors are built from fillers that DO occur in the passage:
        // surface overlap with the passage favors the wrong answers, so the
        // keyword is the only reliable signal. The correct option's filler
        // comes from outside the passage for the same reason.
        let passage_fillers: Vec<String> = {
            let mut seen = HashSet::new();
            passage
                .iter()
                .filter(|t| *t != &keyword && **t != *"." && seen.insert((*t).clone()))
                .cloned()
                .collect()
        };
        let outside_fillers: Vec<String> = fillers
            .iter()
            .filter(|f| !passage.contains(*f))
            .cloned()
            .collect();

        let distractor_pool = if passage_fillers.len() >= 4 {
            &passage_fillers
        } else {
            &fillers
        };
        let gold = rng.below(spec.options);
        let mut options = Vec::with_capacity(spec.options);
        let mut seen: HashSet<Vec<String>> = HashSet::new();
        for oi in 0..spec.options {
            if oi == gold {
                let filler = if outside_fillers.is_empty() {
                    rng.choose(&fillers).clone()
                } else {
                    rng.choose(&outside_fillers).clone()
                };
                let mut opt = vec![keyword.clone(), filler];
                if rng.below(2) == 1 {
                    opt.swap(0, 1);
                }
                seen.insert(opt.clone());
                options.push(opt);
            } else {
                loop {
                    let a = rng.choose(distractor_pool).clone();
                    let b = rng.choose(distractor_pool).clone();
                    if a == b {
                        continue;
                    }
                    let opt = vec![a, b];
                    if seen.insert(opt.clone()) {
                        options.push(opt);
                        break;
                    }
                }
            }
        }

        let example = McqaExample {
            id: format!("synth{qi:05}"),
            passage,
            question: question_template.clone(),
            options,
            gold,
        };
        example.validate(Some(spec.options))?;
        out.push(example);
    }
    Ok(out)
}

/// Serialize examples as RACE-shaped JSON (an array of one-question
/// records), the uniform on-disk form for synthetic corpora.
pub fn to_race_json(examples: &[McqaExample]) -> serde_json::Value {
    let records: Vec<serde_json::Value> = examples
        .iter()
        .map(|ex| {
            serde_json::json!({
                "article": ex.passage.join(" "),
                "questions": [ex.question.join(" ")],
                "options": [ex.options.iter().map(|o| o.join(" ")).collect::<Vec<_>>()],
                "answers": [((b'A' + ex.gold as u8) as char).to_string()],
                "id": ex.id,
            })
        })
        .collect();
    serde_json::Value::Array(records)
}

/// Deterministic shuffled split into train and eval portions.
pub fn split_dataset(
    examples: &[McqaExample],
    train_fraction: f64,
    seed: u64,
) -> (Vec<McqaExample>, Vec<McqaExample>) {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = RngState::stream(seed, &[0x5911_u64]);
    rng.shuffle(&mut order);
    let cut = ((examples.len() as f64) * train_fraction).round() as usize;
    let train = order[..cut].iter().map(|&i| examples[i].clone()).collect();
    let eval = order[cut..].iter().map(|&i| examples[i].clone()).collect();
    (train, eval)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sliding_window_enumeration_case() {
        // frozen from enumerating starts by hand: 10 tokens, window 4,
        // stride 2 covers [0,4) [2,6) [4,8) [6,10)
        assert_eq!(sliding_window(10, 4, 2).unwrap(), vec![0, 2, 4, 6]);
        assert_eq!(sliding_window(3, 4, 2).unwrap(), vec![0]);
        assert_eq!(sliding_window(4, 4, 4).unwrap(), vec![0]);
        assert_eq!(sliding_window(10, 4, 4).unwrap(), vec![0, 4, 6]);
        assert!(sliding_window(10, 0, 1).is_err());
        assert!(sliding_window(10, 4, 0).is_err());
        assert!(sliding_window(10, 4, 5).is_err());
    }

    #[test]
    fn sliding_window_coverage_and_overlap_invariants() {
        let mut rng = RngState::new(42);
        for _ in 0..500 {
            let len = 1 + rng.below(300);
            let max_len = 1 + rng.below(80);
            let stride = 1 + rng.below(max_len);
            let starts = sliding_window(len, max_len, stride).unwrap();
            let mut covered = vec![false; len];
            for &s in &starts {
                for c in covered.iter_mut().skip(s).take(max_len) {
                    *c = true;
                }
            }
            assert!(covered.iter().all(|&c| c), "len {len} max {max_len} stride {stride}");
            for pair in starts.windows(2) {
                let gap = pair[1] - pair[0];
                let overlap = max_len.saturating_sub(gap);
                let is_last = pair[1] == *starts.last().unwrap();
                if !is_last {
                    assert_eq!(overlap, max_len - stride);
                }
            }
        }
    }

    #[test]
    fn windowize_preserves_question_and_covers_passage() {
        let ex = McqaExample {
            id: "x".to_string(),
            passage: (0..11).map(|i| format!("t{i}")).collect(),
            question: vec!["what".to_string(), "?".to_string()],
            options: vec![vec!["a".into()], vec!["b".into()]],
            gold: 1,
        };
        let windows = windowize(&[ex.clone()], 5, 3).unwrap();
        assert_eq!(windows.len(), 3);
        assert!(windows.iter().all(|w| w.passage.len() <= 5));
        assert!(windows.iter().all(|w| w.question == ex.question));
        assert_eq!(windows[0].instance_id(), "x#w0");
        // union covers the parent passage
        let mut seen = HashSet::new();
        for w in &windows {
            for t in &w.passage {
                seen.insert(t.clone());
            }
        }
        assert_eq!(seen.len(), 11);
    }

    #[test]
    fn tag_question_rules() {
        let cloze = tokenize("according to the passage , when we become adults , _____ ?");
        assert_eq!(tag_question(&cloze), QuestionTag::Cloze);
        assert_eq!(
            tag_question(&tokenize("what does the author imply ?")),
            QuestionTag::What
        );
        assert_eq!(
            tag_question(&tokenize("which of the following is true ?")),
            QuestionTag::Which
        );
        assert_eq!(
            tag_question(&tokenize("how many books ?")),
            QuestionTag::Other
        );
        assert_eq!(
            tag_question(&tokenize("the author says what ?")),
            QuestionTag::What
        );
        assert_eq!(tag_question(&tokenize("pick one .")), QuestionTag::Other);
    }

    #[test]
    fn synth_is_deterministic_and_keyword_clean() {
        let spec = SynthSpec {
            questions: 32,
            options: 4,
            vocab_words: 64,
            seed: 7,
        };
        let a = synth_dataset(&spec).unwrap();
        let b = synth_dataset(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 32);

        for ex in &a {
            let passage_keywords: HashSet<&String> = ex
                .passage
                .iter()
                .filter(|t| t.starts_with("key"))
                .collect();
            assert_eq!(passage_keywords.len(), 1);
            // correct option shares the passage keyword, no distractor
            // contains any keyword at all
            for (i, opt) in ex.options.iter().enumerate() {
                let has_kw = opt.iter().any(|t| passage_keywords.contains(t));
                let any_kw = opt.iter().any(|t| t.starts_with("key"));
                if i == ex.gold {
                    assert!(has_kw, "{}: gold lacks keyword", ex.id);
                } else {
                    assert!(!any_kw, "{}: distractor has keyword", ex.id);
                }
            }
        }
    }

    #[test]
    fn synth_gold_distribution_is_roughly_uniform() {
        let spec = SynthSpec {
            questions: 1000,
            options: 4,
            vocab_words: 64,
            seed: 11,
        };
        let data = synth_dataset(&spec).unwrap();
        let mut counts = [0usize; 4];
        for ex in &data {
            counts[ex.gold] += 1;
        }
        for &c in &counts {
            let frac = c as f64 / 1000.0;
            assert!((frac - 0.25).abs() < 0.05, "counts {counts:?}");
        }
    }

    #[test]
    fn synth_rejects_too_small_vocab() {
        let spec = SynthSpec {
            questions: 4,
            options: 4,
            vocab_words: 12,
            seed: 1,
        };
        assert!(matches!(synth_dataset(&spec), Err(CtmError::Config(_))));
    }

    #[test]
    fn synth_round_trips_through_race_json() {
        let spec = SynthSpec {
            questions: 6,
            options: 3,
            vocab_words: 64,
            seed: 3,
        };
        let data = synth_dataset(&spec).unwrap();
        let json = to_race_json(&data);
        let dir = std::env::temp_dir().join("ctm_synth_roundtrip_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("synth.json");
        fs::write(&path, serde_json::to_string_pretty(&json).unwrap()).unwrap();
        let back = load_dataset(&path, DataFormat::Synth).unwrap();
        assert_eq!(back.len(), 6);
        for (orig, parsed) in data.iter().zip(back.iter()) {
            assert_eq!(parsed.gold, orig.gold);
            assert_eq!(parsed.passage, orig.passage);
            assert_eq!(parsed.options, orig.options);
        }
        // three-option records are rejected under strict RACE parsing
        assert!(load_dataset(&path, DataFormat::Race).is_err());
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn split_dataset_is_deterministic_and_partitioning() {
        let spec = SynthSpec {
            questions: 10,
            options: 4,
            vocab_words: 64,
            seed: 5,
        };
        let data = synth_dataset(&spec).unwrap();
        let (tr1, ev1) = split_dataset(&data, 0.8, 9);
        let (tr2, ev2) = split_dataset(&data, 0.8, 9);
        assert_eq!(tr1, tr2);
        assert_eq!(ev1, ev2);
        assert_eq!(tr1.len(), 8);
        assert_eq!(ev1.len(), 2);
        let ids: HashSet<&String> = tr1.iter().chain(ev1.iter()).map(|e| &e.id).collect();
        assert_eq!(ids.len(), 10);
    }
}
