//! Context-guided triple matching and the pairwise matching baselines.
//!
//! One matching branch designates an entity of the (passage, question,
//! answer) triple as the background context and fuses the other two under
//! its guidance:
//!
//! 1. align each partner to the context through bilinear attention,
//! 2. cross-attend the two aligned partners against each other, mixing
//!    context rows as values,
//! 3. project through a ReLU feature layer and max-pool over rows.
//!
//! Running all three branches and concatenating their outputs yields the
//! candidate representation scored by the selection head. The pairwise
//! baselines (gated dual matching, co-matching, joint-encoding matching)
//! exist as controlled comparators under the same encoder.

use crate::error::{CtmError, Result};
use crate::graph::{Graph, Var};
use crate::rng::RngState;
use crate::tensor::Real;

/// Which entity of the triple acts as the background context for a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum BranchId {
    /// Answer-guided passage-question matching.
    #[serde(rename = "a")]
    Answer,
    /// Question-guided answer-passage matching.
    #[serde(rename = "q")]
    Question,
    /// Passage-guided answer-question matching.
    #[serde(rename = "p")]
    Passage,
}

impl BranchId {
    pub const ALL: [BranchId; 3] = [BranchId::Answer, BranchId::Question, BranchId::Passage];

    pub fn short(&self) -> &'static str {
        match self {
            BranchId::Answer => "a",
            BranchId::Question => "q",
            BranchId::Passage => "p",
        }
    }

    pub fn from_short(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(BranchId::Answer),
            "q" => Ok(BranchId::Question),
            "p" => Ok(BranchId::Passage),
            other => Err(CtmError::config(format!("unknown branch name {other:?}"))),
        }
    }
}

impl std::fmt::Display for BranchId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short())
    }
}

/// Trainable weights of one matching branch: the context-alignment
/// bilinear form, the cross-pair bilinear form, and the output feature
/// projection. All are `[l × l]`.
#[derive(Debug, Clone, Copy)]
pub struct BranchWeights {
    pub ctx_align: Var,
    pub pair_attn: Var,
    pub feature: Var,
}

/// Per-branch weights for the full triple matcher. Slots for disabled
/// branches are `None`; with weight sharing all slots hold the same vars.
#[derive(Debug, Clone, Copy, Default)]
pub struct TripleWeights {
    pub answer: Option<BranchWeights>,
    pub question: Option<BranchWeights>,
    pub passage: Option<BranchWeights>,
}

impl TripleWeights {
    pub fn branch(&self, id: BranchId) -> Option<BranchWeights> {
        match id {
            BranchId::Answer => self.answer,
            BranchId::Question => self.question,
            BranchId::Passage => self.passage,
        }
    }
}

/// Encoded entity matrices for one (passage, question, candidate) triple.
#[derive(Debug, Clone, Copy)]
pub struct EncodedTriple {
    pub passage: Var,
    pub question: Var,
    pub answer: Var,
}

/// Bilinear attention of every context row over the rows of `x`:
/// `G = softmax(ctx · W · xᵀ)` (rows are distributions over x positions)
/// and `E = G · x` (context-aligned mixtures of x rows).
pub fn context_attend<T: Real>(
    g: &Graph<T>,
    ctx: Var,
    x: Var,
    w: Var,
) -> Result<(Var, Var)> {
    let logits = g.matmul(g.matmul(ctx, w)?, g.transpose(x)?)?;
    let attn = g.softmax_rows(logits)?;
    let mixed = g.matmul(attn, x)?;
    Ok((attn, mixed))
}

/// Generic attention with separate key and value matrices:
/// `softmax(query · W · keyᵀ) · value`. The nested reformulation of the
/// branch pipeline is built from this primitive alone.
pub fn attend_kv<T: Real>(
    g: &Graph<T>,
    value: Var,
    query: Var,
    key: Var,
    w: Var,
) -> Result<Var> {
    let logits = g.matmul(g.matmul(query, w)?, g.transpose(key)?)?;
    g.matmul(g.softmax_rows(logits)?, value)
}

/// Intermediate products of one branch, exposed for the equivalence and
/// oracle tests.
#[derive(Debug, Clone, Copy)]
pub struct BranchTrace {
    /// First partner aligned to the context.
    pub aligned_u: Var,
    /// Second partner aligned to the context.
    pub aligned_v: Var,
    /// Context rows mixed under u-to-v cross attention.
    pub fused_uv: Var,
    /// Context rows mixed under v-to-u cross attention.
    pub fused_vu: Var,
    /// `2×l` stack of the pooled feature vectors.
    pub output: Var,
}

/// One context-guided matching branch. `ctx` is the designated context;
/// `u` and `v` are the other two entity matrices.
pub fn branch_trace<T: Real>(
    g: &Graph<T>,
    ctx: Var,
    u: Var,
    v: Var,
    w: &BranchWeights,
    dropout: f64,
    rng: &mut RngState,
    training: bool,
) -> Result<BranchTrace> {
    let (_, aligned_u) = context_attend(g, ctx, u, w.ctx_align)?;
    let (_, aligned_v) = context_attend(g, ctx, v, w.ctx_align)?;
    let aligned_u = g.dropout(aligned_u, dropout, rng, training)?;
    let aligned_v = g.dropout(aligned_v, dropout, rng, training)?;

    let cross_uv = g.softmax_rows(g.matmul(g.matmul(aligned_u, w.pair_attn)?, g.transpose(aligned_v)?)?)?;
    let cross_vu = g.softmax_rows(g.matmul(g.matmul(aligned_v, w.pair_attn)?, g.transpose(aligned_u)?)?)?;
    let fused_uv = g.matmul(cross_uv, ctx)?;
    let fused_vu = g.matmul(cross_vu, ctx)?;

    let feat_uv = g.dropout(g.relu(g.matmul(fused_uv, w.feature)?)?, dropout, rng, training)?;
    let feat_vu = g.dropout(g.relu(g.matmul(fused_vu, w.feature)?)?, dropout, rng, training)?;

    let pooled_uv = g.max_pool_rows(feat_uv)?;
    let pooled_vu = g.max_pool_rows(feat_vu)?;
    let l = g.shape(pooled_uv)[0];
    let output = g.reshape(g.concat_vec(&[pooled_uv, pooled_vu])?, &[2, l])?;

    Ok(BranchTrace {
        aligned_u,
        aligned_v,
        fused_uv,
        fused_vu,
        output,
    })
}

/// Branch output only: a `2×l` matrix, independent of sequence lengths.
pub fn branch<T: Real>(
    g: &Graph<T>,
    ctx: Var,
    u: Var,
    v: Var,
    w: &BranchWeights,
    dropout: f64,
    rng: &mut RngState,
    training: bool,
) -> Result<Var> {
    Ok(branch_trace(g, ctx, u, v, w, dropout, rng, training)?.output)
}

/// Output of the full triple matcher for one candidate.
#[derive(Debug, Clone)]
pub struct MatchOutput {
    pub answer_guided: Option<Var>,
    pub question_guided: Option<Var>,
    pub passage_guided: Option<Var>,
    /// Row-major flattening of the enabled branch outputs, in a/q/p order.
    pub combined: Var,
}

/// Run the enabled branches for one encoded triple and concatenate their
/// flattened outputs. Branch roles: answer-guided fuses passage (u slot)
/// and question (v slot); question-guided fuses answer and passage;
/// passage-guided fuses answer and question.
pub fn match_triple<T: Real>(
    g: &Graph<T>,
    enc: &EncodedTriple,
    weights: &TripleWeights,
    dropout: f64,
    rng: &mut RngState,
    training: bool,
) -> Result<MatchOutput> {
    let mut parts = Vec::new();
    let mut out = MatchOutput {
        answer_guided: None,
        question_guided: None,
        passage_guided: None,
        combined: enc.answer, // placeholder, overwritten below
    };
    if let Some(w) = &weights.answer {
        let m = branch(g, enc.answer, enc.passage, enc.question, w, dropout, rng, training)?;
        out.answer_guided = Some(m);
        parts.push(g.flatten(m)?);
    }
    if let Some(w) = &weights.question {
        let m = branch(g, enc.question, enc.answer, enc.passage, w, dropout, rng, training)?;
        out.question_guided = Some(m);
        parts.push(g.flatten(m)?);
    }
    if let Some(w) = &weights.passage {
        let m = branch(g, enc.passage, enc.answer, enc.question, w, dropout, rng, training)?;
        out.passage_guided = Some(m);
        parts.push(g.flatten(m)?);
    }
    if parts.is_empty() {
        return Err(CtmError::config(
            "match_triple: no branches enabled".to_string(),
        ));
    }
    out.combined = g.concat_vec(&parts)?;
    Ok(out)
}

/// The two-layer nested-attention reformulation of the answer-guided
/// branch, used as an algebraic oracle for the pipeline's fused
/// intermediates. Built exclusively from [`attend_kv`]:
/// first align question and passage to the answer, then cross-attend the
/// aligned pair with answer rows as values. Returns the passage-question
/// and question-passage fusions.
pub fn nested_attention_form<T: Real>(
    g: &Graph<T>,
    enc: &EncodedTriple,
    w: &BranchWeights,
) -> Result<(Var, Var)> {
    let question_to_answer = attend_kv(g, enc.question, enc.answer, enc.question, w.ctx_align)?;
    let passage_to_answer = attend_kv(g, enc.passage, enc.answer, enc.passage, w.ctx_align)?;
    let fused_pq = attend_kv(
        g,
        enc.answer,
        passage_to_answer,
        question_to_answer,
        w.pair_attn,
    )?;
    let fused_qp = attend_kv(
        g,
        enc.answer,
        question_to_answer,
        passage_to_answer,
        w.pair_attn,
    )?;
    Ok((fused_pq, fused_qp))
}

// ── Pairwise baselines ──────────────────────────────────────────────────

/// Weights of the gated dual-matching baseline.
#[derive(Debug, Clone, Copy)]
pub struct DualMatchWeights {
    pub attn: Var,
    /// Gate projection `[2l × l]`.
    pub gate: Var,
    /// Gate bias `[1 × l]`.
    pub gate_bias: Var,
}

/// Weights of the co-matching and joint-encoding baselines.
#[derive(Debug, Clone, Copy)]
pub struct SimMatchWeights {
    pub attn: Var,
    /// Similarity projection `[2l × l]`.
    pub sim: Var,
}

/// Elementwise matching similarity `[u ⊙ v; |u − v|]` projected back to
/// `l` columns.
fn sim_fuse<T: Real>(g: &Graph<T>, u: Var, v: Var, proj: Var) -> Result<Var> {
    let prod = g.mul(u, v)?;
    let diff = g.abs(g.sub(u, v)?)?;
    g.matmul(g.concat_cols(prod, diff)?, proj)
}

/// Attention-pool `x` under `query` guidance to a single `1×l` row.
fn attend_pool<T: Real>(g: &Graph<T>, value_key: Var, query: Var, w: Var) -> Result<Var> {
    let mixed = attend_kv(g, value_key, query, value_key, w)?;
    let pooled = g.max_pool_rows(mixed)?;
    let l = g.shape(pooled)[0];
    g.reshape(pooled, &[1, l])
}

/// Sigmoid-gated fusion of two `1×l` rows: `g ⊙ u + (1-g) ⊙ v` with
/// `g = σ([u; v] · W + b)`.
fn gate_fuse<T: Real>(g: &Graph<T>, u: Var, v: Var, w: &DualMatchWeights) -> Result<Var> {
    let joint = g.concat_cols(u, v)?;
    let gate = g.sigmoid(g.add(g.matmul(joint, w.gate)?, w.gate_bias)?)?;
    let ones = g.constant(crate::tensor::Tensor::filled(g.shape(gate), T::one()))?;
    let inv = g.sub(ones, gate)?;
    g.add(g.mul(gate, u)?, g.mul(inv, v)?)
}

/// Gated dual matching: the three attended pairs (question-answer,
/// question-passage, answer-passage) pooled to rows and fused pairwise by
/// a sigmoid reset gate. Output length `3l`.
pub fn dcmn_dual_match<T: Real>(
    g: &Graph<T>,
    enc: &EncodedTriple,
    w: &DualMatchWeights,
) -> Result<Var> {
    let qa = attend_pool(g, enc.answer, enc.question, w.attn)?;
    let qp = attend_pool(g, enc.passage, enc.question, w.attn)?;
    let ap = attend_pool(g, enc.passage, enc.answer, w.attn)?;
    let fused = [
        gate_fuse(g, qa, ap, w)?,
        gate_fuse(g, qp, ap, w)?,
        gate_fuse(g, qa, qp, w)?,
    ];
    let flat: Vec<Var> = fused
        .iter()
        .map(|&m| g.flatten(m))
        .collect::<Result<_>>()?;
    g.concat_vec(&flat)
}

/// Co-matching: align question and answer to each passage position,
/// similarity-fuse each with the passage, concatenate along features, and
/// pool. Output length `2l`.
pub fn co_match<T: Real>(g: &Graph<T>, enc: &EncodedTriple, w: &SimMatchWeights) -> Result<Var> {
    let q_by_p = attend_kv(g, enc.question, enc.passage, enc.question, w.attn)?;
    let a_by_p = attend_kv(g, enc.answer, enc.passage, enc.answer, w.attn)?;
    let s_q = sim_fuse(g, q_by_p, enc.passage, w.sim)?;
    let s_a = sim_fuse(g, a_by_p, enc.passage, w.sim)?;
    g.max_pool_rows(g.concat_cols(s_q, s_a)?)
}

/// Joint-encoding matching: stack question and answer rows, attend them to
/// the passage, similarity-fuse with the joint encoding, and pool. Output
/// length `l`.
pub fn cnn_match<T: Real>(g: &Graph<T>, enc: &EncodedTriple, w: &SimMatchWeights) -> Result<Var> {
    let joint = g.concat_rows(enc.question, enc.answer)?;
    let p_by_joint = attend_kv(g, enc.passage, joint, enc.passage, w.attn)?;
    let s = sim_fuse(g, joint, p_by_joint, w.sim)?;
    g.max_pool_rows(s)
}
