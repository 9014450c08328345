//! Answer-selection loss, contrastive regularization, and the training
//! strategies that combine them.
//!
//! Selection: each candidate representation is scored by a dot product
//! with a learnable head vector, and the gold candidate's negative
//! log-softmax is the loss.
//!
//! Contrastive: the anchor is the gold candidate's representation, the
//! positive is the same candidate recomputed under a second dropout draw,
//! and the distractor candidates of the same question are the negatives.
//! Scores are cosine similarities over a temperature, combined in
//! stabilized log-sum-exp form. The anchor is excluded from its own
//! denominator.

use crate::error::{CtmError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Real;

/// One question's candidate representations plus its gold index.
#[derive(Debug, Clone)]
pub struct QuestionBatch {
    pub candidates: Vec<Var>,
    pub gold: usize,
}

/// Views for one contrastive term: anchor and positive are two dropout
/// draws of the gold candidate; negatives are the distractors.
#[derive(Debug, Clone)]
pub struct ContrastiveViews {
    pub anchor: Var,
    pub positive: Var,
    pub negatives: Vec<Var>,
    pub tau: f64,
}

/// Dot-product scores of candidate representations against the head.
pub fn score_candidates<T: Real>(g: &Graph<T>, candidates: &[Var], head: Var) -> Result<Vec<Var>> {
    candidates.iter().map(|&c| g.dot(c, head)).collect()
}

/// Negative log-softmax of the gold candidate's score.
pub fn selection_loss<T: Real>(g: &Graph<T>, batch: &QuestionBatch, head: Var) -> Result<Var> {
    if batch.candidates.len() < 2 {
        return Err(CtmError::contract(format!(
            "selection_loss: need at least 2 candidates, got {}",
            batch.candidates.len()
        )));
    }
    if batch.gold >= batch.candidates.len() {
        return Err(CtmError::contract(format!(
            "selection_loss: gold index {} out of range for {} candidates",
            batch.gold,
            batch.candidates.len()
        )));
    }
    let scores = score_candidates(g, &batch.candidates, head)?;
    let score_vec = g.concat_vec(&scores)?;
    let lse = g.log_sum_exp(score_vec)?;
    let gold = g.pick(score_vec, batch.gold)?;
    g.sub(lse, gold)
}

/// InfoNCE-style contrastive loss over cosine similarities.
///
/// With no negatives the ratio is 1 and the loss is exactly zero.
pub fn contrastive_loss<T: Real>(g: &Graph<T>, views: &ContrastiveViews) -> Result<Var> {
    if views.tau <= 0.0 {
        return Err(CtmError::config(format!(
            "contrastive temperature must be positive, got {}",
            views.tau
        )));
    }
    let inv_tau = T::from_f64(1.0 / views.tau);
    let mut scores = Vec::with_capacity(1 + views.negatives.len());
    scores.push(g.scale(g.cosine(views.anchor, views.positive)?, inv_tau)?);
    for &neg in &views.negatives {
        scores.push(g.scale(g.cosine(views.anchor, neg)?, inv_tau)?);
    }
    let score_vec = g.concat_vec(&scores)?;
    let lse = g.log_sum_exp(score_vec)?;
    let positive = g.pick(score_vec, 0)?;
    g.sub(lse, positive)
}

/// Combined objective: selection plus `lambda` times the contrastive term.
pub fn joint_loss<T: Real>(g: &Graph<T>, tm: Var, cr: Var, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(CtmError::config(format!(
            "lambda_cr must be non-negative, got {lambda}"
        )));
    }
    g.add(tm, g.scale(cr, T::from_f64(lambda))?)
}

/// Training strategies for combining the two losses over steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Every step optimizes selection + lambda * contrastive.
    Joint,
    /// A contrastive-only warmup phase, then selection-only.
    Pretrain,
    /// Selection for `n_t - 1` consecutive steps, then contrastive once.
    Alternate,
}

impl std::str::FromStr for Strategy {
    type Err = CtmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Strategy::Joint),
            "pretrain" => Ok(Strategy::Pretrain),
            "alternate" => Ok(Strategy::Alternate),
            other => Err(CtmError::config(format!(
                "unknown strategy {other:?} (expected joint|pretrain|alternate)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Joint => "joint",
            Strategy::Pretrain => "pretrain",
            Strategy::Alternate => "alternate",
        })
    }
}

/// Which loss a given optimizer step applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepLoss {
    Joint,
    TmOnly,
    CrOnly,
}

impl std::fmt::Display for StepLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StepLoss::Joint => "joint",
            StepLoss::TmOnly => "tm",
            StepLoss::CrOnly => "cr",
        })
    }
}

/// Resolve the loss kind for optimizer step `step` (0-based).
pub fn strategy_schedule(
    strategy: Strategy,
    step: usize,
    n_t: usize,
    pretrain_steps: usize,
) -> Result<StepLoss> {
    match strategy {
        Strategy::Joint => Ok(StepLoss::Joint),
        Strategy::Pretrain => Ok(if step < pretrain_steps {
            StepLoss::CrOnly
        } else {
            StepLoss::TmOnly
        }),
        Strategy::Alternate => {
            if n_t < 2 {
                return Err(CtmError::config(format!(
                    "alternate strategy requires n_t >= 2, got {n_t}"
                )));
            }
            Ok(if step % n_t == n_t - 1 {
                StepLoss::CrOnly
            } else {
                StepLoss::TmOnly
            })
        }
    }
}

/// Scalar selection loss from raw scores, used by evaluation metrics.
/// Numerically stabilized the same way as the graph op.
pub fn selection_loss_value(scores: &[f64], gold: usize) -> f64 {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    lse - scores[gold]
}
