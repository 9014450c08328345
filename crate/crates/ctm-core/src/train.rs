//! Training loop, evaluation, ablation and sweep runners, and the
//! full-objective gradient check.
//!
//! Determinism contract: given (seed, config, dataset), parameter
//! trajectories, checkpoints, and metrics (wall-clock aside) are
//! bit-identical across runs on one platform. Everything that consumes
//! randomness draws from streams derived from the seed and stable
//! indices; iteration orders are fixed by construction.

use std::collections::HashMap;
use std::time::Instant;

use crate::data::{windowize, McqaExample, WindowedExample};
use crate::encoder::Vocab;
use crate::error::{CtmError, Result};
use crate::gradcheck::{finite_diff_check, GradCheckReport};
use crate::graph::Graph;
use crate::matching::BranchId;
use crate::metrics::{EpochMetrics, Metrics};
use crate::model::{CtmConfig, CtmModel, MatcherKind};
use crate::objectives::{selection_loss_value, strategy_schedule, StepLoss};
use crate::params::{collect_grads, ParamSet};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

// ── Adam optimizer ──────────────────────────────────────────────────────

/// First/second moment buffers plus the bias-correction step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub step: usize,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        AdamState {
            step: 0,
            m: (0..params.len())
                .map(|i| Tensor::zeros(params.tensor(i).shape().to_vec()))
                .collect(),
            v: (0..params.len())
                .map(|i| Tensor::zeros(params.tensor(i).shape().to_vec()))
                .collect(),
        }
    }
}

/// One Adam update with bias correction. Deterministic; no internal
/// randomness.
pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(CtmError::contract(format!(
            "adam_step: {} grads / {} moments for {} params",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for i in 0..params.len() {
        if grads[i].shape() != params.tensor(i).shape() {
            return Err(CtmError::contract(format!(
                "adam_step: gradient shape {:?} does not match parameter {:?} {:?}",
                grads[i].shape(),
                params.name(i),
                params.tensor(i).shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
    let one = T::one();
    let corr1 = T::from_f64(1.0 - beta1.powf(t));
    let corr2 = T::from_f64(1.0 - beta2.powf(t));
    let lr_t = T::from_f64(lr);
    let eps_t = T::from_f64(eps);

    for i in 0..params.len() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.tensor_mut(i).data_mut();
        for c in 0..g.len() {
            m[c] = b1 * m[c] + (one - b1) * g[c];
            v[c] = b2 * v[c] + (one - b2) * g[c] * g[c];
            let m_hat = m[c] / corr1;
            let v_hat = v[c] / corr2;
            p[c] = p[c] - lr_t * m_hat / (v_hat.sqrt() + eps_t);
        }
    }
    Ok(())
}

/// Scale all gradients down if their global L2 norm exceeds `max_norm`.
/// Returns the pre-clip norm. `max_norm == 0` disables clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm_sq: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum();
    let norm = norm_sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

// ── Training ────────────────────────────────────────────────────────────

/// Per-optimizer-step record of what was applied.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub kind: StepLoss,
    pub loss: f64,
}

/// Everything a training run produces besides the mutated model.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Metrics,
    pub steps: Vec<StepRecord>,
}

const SHUFFLE_STREAM: u64 = 0x5805;

/// Train in place over windowed instances. Each epoch shuffles the
/// instance order deterministically, batches whole questions, applies the
/// scheduled loss, clips, and steps Adam. Per-epoch rows carry mean
/// selection/contrastive losses over the epoch's questions plus train-set
/// accuracy from a full inference pass.
pub fn train(model: &mut CtmModel<f32>, instances: &[WindowedExample]) -> Result<TrainOutcome> {
    if instances.is_empty() {
        return Err(CtmError::contract("train: empty dataset".to_string()));
    }
    model.config.validate()?;
    let config = model.config.clone();
    let mut adam = AdamState::new(&model.params);
    let mut metrics = Metrics::default();
    let mut steps = Vec::new();
    let mut global_step = 0usize;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..instances.len()).collect();
        let mut shuffle_rng = RngState::stream(config.seed, &[SHUFFLE_STREAM, epoch as u64]);
        shuffle_rng.shuffle(&mut order);

        let mut tm_sum = 0.0f64;
        let mut tm_count = 0usize;
        let mut cr_sum = 0.0f64;
        let mut cr_count = 0usize;

        for batch in order.chunks(config.batch_size) {
            let kind = strategy_schedule(
                config.strategy,
                global_step,
                config.n_t,
                config.pretrain_steps,
            )?;
            let g = Graph::new();
            let binding = model.bind(&g, true)?;
            let mut losses = Vec::with_capacity(batch.len());
            for &idx in batch {
                let out = model
                    .question_loss(&g, &binding, &instances[idx], epoch, idx, kind, true)
                    .map_err(|e| {
                        CtmError::numeric(format!(
                            "epoch {epoch} step {global_step} instance {idx}: {e}"
                        ))
                    })?;
                if let Some(tm) = out.tm {
                    tm_sum += g.scalar_value(tm).as_f64();
                    tm_count += 1;
                }
                if let Some(cr) = out.cr {
                    cr_sum += g.scalar_value(cr).as_f64();
                    cr_count += 1;
                }
                losses.push(out.total);
            }
            let batch_loss = g.mean_of(&losses)?;
            let loss_value = g.scalar_value(batch_loss).as_f64();
            if !loss_value.is_finite() {
                return Err(CtmError::numeric(format!(
                    "training diverged: non-finite loss at epoch {epoch} step {global_step}"
                )));
            }
            g.backward(batch_loss)?;
            let mut grads = collect_grads(&g, &model.params, &binding.vars)?;
            clip_global_norm(&mut grads, config.grad_clip);
            adam_step(
                &mut model.params,
                &grads,
                &mut adam,
                config.learning_rate,
                0.9,
                0.999,
                1e-8,
            )?;

            // effective kind after the lambda=0 degeneracy resolution
            let effective = if kind == StepLoss::Joint && config.lambda_cr == 0.0 {
                StepLoss::TmOnly
            } else {
                kind
            };
            steps.push(StepRecord {
                step: global_step,
                kind: effective,
                loss: loss_value,
            });
            global_step += 1;
        }

        let accuracy = evaluate(model, instances, "train")
            .map_err(|e| match e {
                CtmError::Numeric(m) => {
                    CtmError::numeric(format!("epoch {epoch} evaluation: {m}"))
                }
                other => other,
            })?
            .rows[0]
            .accuracy;
        metrics.push(EpochMetrics {
            epoch,
            split: "train".to_string(),
            loss_tm: if tm_count > 0 { tm_sum / tm_count as f64 } else { 0.0 },
            loss_cr: if cr_count > 0 { cr_sum / cr_count as f64 } else { 0.0 },
            accuracy,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome { metrics, steps })
}

// ── Evaluation ──────────────────────────────────────────────────────────

/// Inference over windowed instances: per parent question, candidate
/// scores are max-pooled over windows, the argmax (lowest index on ties)
/// is the prediction, and accuracy counts parent questions. The reported
/// loss is the mean selection loss of the pooled scores.
pub fn evaluate(
    model: &CtmModel<f32>,
    instances: &[WindowedExample],
    split: &str,
) -> Result<Metrics> {
    if instances.is_empty() {
        return Err(CtmError::contract("evaluate: empty dataset".to_string()));
    }
    let started = Instant::now();
    // pooled scores per parent, in first-encounter order
    let mut parent_order: Vec<String> = Vec::new();
    let mut pooled: HashMap<String, (Vec<f64>, usize)> = HashMap::new();
    for inst in instances {
        let scores = model.score_instance(inst)?;
        match pooled.get_mut(&inst.parent_id) {
            Some((acc, gold)) => {
                if acc.len() != scores.len() || *gold != inst.gold {
                    return Err(CtmError::contract(format!(
                        "evaluate: windows of {} disagree on candidates",
                        inst.parent_id
                    )));
                }
                for (a, s) in acc.iter_mut().zip(scores.iter()) {
                    *a = a.max(*s);
                }
            }
            None => {
                parent_order.push(inst.parent_id.clone());
                pooled.insert(inst.parent_id.clone(), (scores, inst.gold));
            }
        }
    }

    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    for parent in &parent_order {
        let (scores, gold) = &pooled[parent];
        let mut best = 0usize;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        if best == *gold {
            correct += 1;
        }
        loss_sum += selection_loss_value(scores, *gold);
    }

    let mut metrics = Metrics::default();
    metrics.push(EpochMetrics {
        epoch: 0,
        split: split.to_string(),
        loss_tm: loss_sum / parent_order.len() as f64,
        loss_cr: 0.0,
        accuracy: correct as f64 / parent_order.len() as f64,
        seconds: started.elapsed().as_secs_f64(),
    });
    Ok(metrics)
}

/// Check that a checkpoint's config is compatible with an explicitly
/// requested one, naming every mismatched field.
pub fn check_config_compatible(checkpoint: &CtmConfig, requested: &CtmConfig) -> Result<()> {
    let mut mismatches = Vec::new();
    if checkpoint.hidden_dim != requested.hidden_dim {
        mismatches.push("hidden_dim");
    }
    if checkpoint.branches != requested.branches {
        mismatches.push("branches");
    }
    if checkpoint.matcher != requested.matcher {
        mismatches.push("matcher");
    }
    if checkpoint.max_len != requested.max_len {
        mismatches.push("max_len");
    }
    if checkpoint.share_branch_weights != requested.share_branch_weights {
        mismatches.push("share_branch_weights");
    }
    if mismatches.is_empty() {
        Ok(())
    } else {
        Err(CtmError::config(format!(
            "checkpoint config incompatible with requested config; mismatched fields: {}",
            mismatches.join(", ")
        )))
    }
}

// ── Whole-run helpers ───────────────────────────────────────────────────

/// Build the vocabulary from a training corpus.
pub fn build_vocab(examples: &[McqaExample], cap: usize) -> Vocab {
    let docs: Vec<&[String]> = examples
        .iter()
        .flat_map(|e| {
            std::iter::once(e.passage.as_slice())
                .chain(std::iter::once(e.question.as_slice()))
                .chain(e.options.iter().map(|o| o.as_slice()))
        })
        .collect();
    Vocab::build(docs, cap)
}

/// Train a fresh model on a corpus and evaluate it on a held-out one.
/// Returns the trained model, its training outcome, and eval accuracy.
pub fn train_and_evaluate(
    config: &CtmConfig,
    train_set: &[McqaExample],
    eval_set: &[McqaExample],
) -> Result<(CtmModel<f32>, TrainOutcome, f64)> {
    let vocab = build_vocab(train_set, config.vocab_cap);
    let mut model = CtmModel::<f32>::new(config.clone(), vocab)?;
    let train_windows = windowize(train_set, config.max_len, config.stride)?;
    let outcome = train(&mut model, &train_windows)?;
    let eval_windows = windowize(eval_set, config.max_len, config.stride)?;
    let accuracy = evaluate(&model, &eval_windows, "eval")?.rows[0].accuracy;
    Ok((model, outcome, accuracy))
}

/// One ablation arm: a branch subset of the triple matcher, or a named
/// pairwise baseline.
#[derive(Debug, Clone, PartialEq)]
pub enum AblationSet {
    Branches(Vec<BranchId>),
    Baseline(MatcherKind),
}

impl AblationSet {
    /// Parse `a`, `aq`, `aqp`, ... or `dcmn` / `co` / `cnn`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dcmn" => return Ok(AblationSet::Baseline(MatcherKind::Dcmn)),
            "co" => return Ok(AblationSet::Baseline(MatcherKind::Co)),
            "cnn" => return Ok(AblationSet::Baseline(MatcherKind::Cnn)),
            _ => {}
        }
        let mut branches = Vec::new();
        for c in s.chars() {
            branches.push(BranchId::from_short(&c.to_string())?);
        }
        if branches.is_empty() {
            return Err(CtmError::config("empty ablation set".to_string()));
        }
        Ok(AblationSet::Branches(branches))
    }

    pub fn label(&self) -> String {
        match self {
            AblationSet::Branches(b) => b.iter().map(|id| id.short()).collect(),
            AblationSet::Baseline(m) => m.to_string(),
        }
    }

    /// Specialize a base config for this arm.
    pub fn apply(&self, base: &CtmConfig) -> CtmConfig {
        let mut config = base.clone();
        match self {
            AblationSet::Branches(b) => {
                config.matcher = MatcherKind::Ctm;
                config.branches = b.clone();
            }
            AblationSet::Baseline(m) => {
                config.matcher = *m;
            }
        }
        config
    }
}

/// Train and evaluate every ablation arm under an identical seed and
/// budget. Returns `(label, eval accuracy)` rows.
pub fn ablate(
    base: &CtmConfig,
    train_set: &[McqaExample],
    eval_set: &[McqaExample],
    sets: &[AblationSet],
) -> Result<Vec<(String, f64)>> {
    let mut rows = Vec::with_capacity(sets.len());
    for set in sets {
        let config = set.apply(base);
        config.validate()?;
        let (_, _, accuracy) = train_and_evaluate(&config, train_set, eval_set)?;
        rows.push((set.label(), accuracy));
    }
    Ok(rows)
}

/// Train and evaluate at each contrastive weight. Returns
/// `(lambda=<v>, eval accuracy)` rows.
pub fn sweep_lambda(
    base: &CtmConfig,
    train_set: &[McqaExample],
    eval_set: &[McqaExample],
    values: &[f64],
) -> Result<Vec<(String, f64)>> {
    let mut rows = Vec::with_capacity(values.len());
    for &lambda in values {
        if lambda < 0.0 {
            return Err(CtmError::config(format!(
                "lambda_cr must be non-negative, got {lambda}"
            )));
        }
        let mut config = base.clone();
        config.lambda_cr = lambda;
        let (_, _, accuracy) = train_and_evaluate(&config, train_set, eval_set)?;
        rows.push((format!("lambda={lambda}"), accuracy));
    }
    Ok(rows)
}

// ── Full-objective gradient check ───────────────────────────────────────

/// Build the tiny double-precision instance the gradient check runs on:
/// hidden dim <= 6, sequence lengths <= 5, three candidates.
fn gradcheck_instance(seed: u64) -> (CtmConfig, WindowedExample, Vec<McqaExample>) {
    let words = [
        "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "iota", "kappa",
    ];
    let mut rng = RngState::stream(seed, &[0x6bad]);
    let mut sample = |n: usize| -> Vec<String> {
        (0..n).map(|_| rng.choose(&words[..]).to_string()).collect()
    };
    let example = McqaExample {
        id: "gradcheck".to_string(),
        passage: sample(5),
        question: sample(4),
        options: vec![sample(2), sample(3), sample(2)],
        gold: 1,
    };
    let config = CtmConfig {
        hidden_dim: 5,
        max_len: 8,
        stride: 4,
        vocab_cap: 32,
        dropout: 0.1,
        lambda_cr: 0.5,
        seed,
        ..CtmConfig::default()
    };
    let windowed = WindowedExample {
        parent_id: example.id.clone(),
        window: 0,
        passage: example.passage.clone(),
        question: example.question.clone(),
        options: example.options.clone(),
        gold: example.gold,
    };
    (config, windowed, vec![example])
}

/// Gradient-check the full joint objective (selection + contrastive, with
/// active dropout whose masks are frozen by stream derivation) on a tiny
/// random instance. Every parameter tensor is probed coordinate by
/// coordinate.
pub fn gradcheck_objective(seed: u64) -> Result<GradCheckReport> {
    let (config, instance, corpus) = gradcheck_instance(seed);
    let vocab = build_vocab(&corpus, config.vocab_cap);
    let mut model = CtmModel::<f64>::new(config, vocab)?;
    // The training-time init (+-0.1) leaves some gradients near the
    // finite-difference cancellation floor. Probing at a larger parameter
    // scale keeps every coordinate well above the noise while exercising
    // the same backward rules.
    for i in 0..model.params.len() {
        for v in model.params.tensor_mut(i).data_mut() {
            *v *= 6.0;
        }
    }
    gradcheck_model(&model, &instance)
}

/// Gradient-check an arbitrary double-precision model on one instance.
pub fn gradcheck_model(model: &CtmModel<f64>, instance: &WindowedExample) -> Result<GradCheckReport> {
    let loss_of = |params: &ParamSet<f64>| -> Result<f64> {
        let probe = CtmModel {
            config: model.config.clone(),
            vocab: model.vocab.clone(),
            params: params.clone(),
            encoder: model.encoder.clone(),
        };
        let g = Graph::new();
        let binding = probe.bind(&g, false)?;
        let out = probe.question_loss(&g, &binding, instance, 0, 0, StepLoss::Joint, true)?;
        Ok(g.scalar_value(out.total))
    };

    let g = Graph::new();
    let binding = model.bind(&g, true)?;
    let out = model.question_loss(&g, &binding, instance, 0, 0, StepLoss::Joint, true)?;
    g.backward(out.total)?;
    let grads = collect_grads(&g, &model.params, &binding.vars)?;
    finite_diff_check(loss_of, &model.params, &grads, 1e-5)
}
