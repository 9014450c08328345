//! Model configuration, parameter construction, and forward passes.
//!
//! A model is a configuration, a vocabulary, and a named parameter set.
//! Each forward pass binds the parameters into a fresh graph, encodes the
//! entities of every candidate triple, runs the configured matcher, and
//! scores candidates with the selection head.

use serde::{Deserialize, Serialize};

use crate::data::WindowedExample;
use crate::encoder::{encode_ids, PrecomputedEncoder, ToyEncoder, Vocab};
use crate::error::{CtmError, Result};
use crate::graph::{Graph, Var};
use crate::matching::{
    cnn_match, co_match, dcmn_dual_match, match_triple, BranchId, BranchWeights,
    DualMatchWeights, EncodedTriple, SimMatchWeights, TripleWeights,
};
use crate::objectives::{
    contrastive_loss, joint_loss, selection_loss, ContrastiveViews, QuestionBatch, StepLoss,
    Strategy,
};
use crate::params::ParamSet;
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

/// Which candidate matcher scores the triples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatcherKind {
    /// Context-guided triple matching (the full model).
    Ctm,
    /// Gated dual-matching baseline.
    Dcmn,
    /// Co-matching baseline.
    Co,
    /// Joint-encoding matching baseline.
    Cnn,
}

impl std::str::FromStr for MatcherKind {
    type Err = CtmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctm" => Ok(MatcherKind::Ctm),
            "dcmn" => Ok(MatcherKind::Dcmn),
            "co" => Ok(MatcherKind::Co),
            "cnn" => Ok(MatcherKind::Cnn),
            other => Err(CtmError::config(format!("unknown matcher {other:?}"))),
        }
    }
}

impl std::fmt::Display for MatcherKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MatcherKind::Ctm => "ctm",
            MatcherKind::Dcmn => "dcmn",
            MatcherKind::Co => "co",
            MatcherKind::Cnn => "cnn",
        })
    }
}

/// All hyperparameters. Serialized as flat JSON; unspecified fields take
/// the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CtmConfig {
    /// Hidden dimension of encoder rows and matcher weights.
    pub hidden_dim: usize,
    pub dropout: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Weight of the contrastive regularizer in the joint loss.
    pub lambda_cr: f64,
    pub learning_rate: f64,
    /// Questions per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    /// Maximum passage window length in tokens.
    pub max_len: usize,
    /// Sliding-window stride; defaults to half the window.
    pub stride: usize,
    pub strategy: Strategy,
    /// Alternate-strategy period: selection for `n_t - 1` steps, then one
    /// contrastive step.
    pub n_t: usize,
    /// Contrastive warmup steps for the pretrain strategy.
    pub pretrain_steps: usize,
    pub share_branch_weights: bool,
    /// Enabled matching branches (subset of a/q/p, in that order).
    pub branches: Vec<BranchId>,
    pub matcher: MatcherKind,
    /// Maximum vocabulary size, reserved tokens included.
    pub vocab_cap: usize,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for CtmConfig {
    fn default() -> Self {
        CtmConfig {
            hidden_dim: 32,
            dropout: 0.1,
            tau: 0.07,
            lambda_cr: 0.5,
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 3,
            max_len: 360,
            stride: 180,
            strategy: Strategy::Joint,
            n_t: 2,
            pretrain_steps: 0,
            share_branch_weights: false,
            branches: BranchId::ALL.to_vec(),
            matcher: MatcherKind::Ctm,
            vocab_cap: 4096,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl CtmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.batch_size == 0 || self.max_len == 0 || self.vocab_cap < 4
        {
            return Err(CtmError::config(
                "hidden_dim, batch_size, max_len must be positive and vocab_cap >= 4".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CtmError::config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.tau <= 0.0 {
            return Err(CtmError::config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.lambda_cr < 0.0 {
            return Err(CtmError::config(format!(
                "lambda_cr must be non-negative, got {}",
                self.lambda_cr
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(CtmError::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.grad_clip < 0.0 {
            return Err(CtmError::config(format!(
                "grad_clip must be non-negative, got {}",
                self.grad_clip
            )));
        }
        if self.stride == 0 || self.stride > self.max_len {
            return Err(CtmError::config(format!(
                "stride must be in [1, max_len={}], got {}",
                self.max_len, self.stride
            )));
        }
        if self.strategy == Strategy::Alternate && self.n_t < 2 {
            return Err(CtmError::config(format!(
                "alternate strategy requires n_t >= 2, got {}",
                self.n_t
            )));
        }
        if self.matcher == MatcherKind::Ctm {
            if self.branches.is_empty() {
                return Err(CtmError::config("at least one branch must be enabled".to_string()));
            }
            let mut sorted = self.branches.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != self.branches.len() {
                return Err(CtmError::config("duplicate branch names".to_string()));
            }
        }
        Ok(())
    }

    pub fn has_branch(&self, id: BranchId) -> bool {
        self.branches.contains(&id)
    }

    /// Length of the combined candidate representation.
    pub fn head_dim(&self) -> usize {
        let l = self.hidden_dim;
        match self.matcher {
            MatcherKind::Ctm => 2 * l * self.branches.len(),
            MatcherKind::Dcmn => 3 * l,
            MatcherKind::Co => 2 * l,
            MatcherKind::Cnn => l,
        }
    }

    pub fn toy_encoder(&self) -> ToyEncoder {
        ToyEncoder {
            hidden_dim: self.hidden_dim,
            max_len: self.max_len,
            dropout: self.dropout,
        }
    }

    /// Whether any training step of this configuration computes the
    /// contrastive term. With `lambda_cr == 0` under the joint strategy
    /// the model degrades to pure selection training.
    pub fn uses_contrastive(&self) -> bool {
        match self.strategy {
            Strategy::Joint => self.lambda_cr > 0.0,
            Strategy::Pretrain => self.pretrain_steps > 0,
            Strategy::Alternate => true,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: CtmConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sequence encoders the model can plug in.
#[derive(Debug, Clone)]
pub enum EncoderChoice {
    /// Trainable token + position embedding tables.
    Toy,
    /// Frozen embeddings loaded from a file, keyed by instance and field.
    Precomputed(PrecomputedEncoder),
}

/// A complete model: configuration, vocabulary, named parameters, and the
/// encoder plug.
#[derive(Debug, Clone)]
pub struct CtmModel<T: Real> {
    pub config: CtmConfig,
    pub vocab: Vocab,
    pub params: ParamSet<T>,
    pub encoder: EncoderChoice,
}

const INIT_STREAM: u64 = 0x1217;

impl<T: Real> CtmModel<T> {
    /// Fresh model with seeded uniform initialization.
    pub fn new(config: CtmConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::stream(config.seed, &[INIT_STREAM]);
        let mut params = ParamSet::new();

        let enc = config.toy_encoder();
        let (tok, pos) = enc.init_tables::<T>(vocab.len(), &mut rng);
        params.push("encoder.token_embedding", tok);
        params.push("encoder.position_embedding", pos);

        let l = config.hidden_dim;
        let unif = |shape: Vec<usize>, rng: &mut RngState| {
            Tensor::<T>::uniform(shape, -0.1, 0.1, rng)
        };
        match config.matcher {
            MatcherKind::Ctm => {
                if config.share_branch_weights {
                    params.push("match.shared.ctx_align", unif(vec![l, l], &mut rng));
                    params.push("match.shared.pair_attn", unif(vec![l, l], &mut rng));
                    params.push("match.shared.feature", unif(vec![l, l], &mut rng));
                } else {
                    for id in BranchId::ALL {
                        if config.has_branch(id) {
                            let b = id.short();
                            params.push(format!("match.{b}.ctx_align"), unif(vec![l, l], &mut rng));
                            params.push(format!("match.{b}.pair_attn"), unif(vec![l, l], &mut rng));
                            params.push(format!("match.{b}.feature"), unif(vec![l, l], &mut rng));
                        }
                    }
                }
            }
            MatcherKind::Dcmn => {
                params.push("match.dcmn.attn", unif(vec![l, l], &mut rng));
                params.push("match.dcmn.gate", unif(vec![2 * l, l], &mut rng));
                params.push("match.dcmn.gate_bias", Tensor::zeros(vec![1, l]));
            }
            MatcherKind::Co => {
                params.push("match.co.attn", unif(vec![l, l], &mut rng));
                params.push("match.co.sim", unif(vec![2 * l, l], &mut rng));
            }
            MatcherKind::Cnn => {
                params.push("match.cnn.attn", unif(vec![l, l], &mut rng));
                params.push("match.cnn.sim", unif(vec![2 * l, l], &mut rng));
            }
        }
        params.push(
            "head.weight",
            Tensor::<T>::uniform(vec![config.head_dim()], -0.1, 0.1, &mut rng),
        );

        Ok(CtmModel {
            config,
            vocab,
            params,
            encoder: EncoderChoice::Toy,
        })
    }

    /// Reassemble a model from checkpoint parts, validating that every
    /// expected parameter is present with the right shape.
    pub fn from_parts(config: CtmConfig, vocab: Vocab, params: ParamSet<T>) -> Result<Self> {
        let reference = CtmModel::<T>::new(config.clone(), vocab.clone())?;
        if reference.params.len() != params.len() {
            return Err(CtmError::config(format!(
                "checkpoint has {} tensors, config implies {}",
                params.len(),
                reference.params.len()
            )));
        }
        for i in 0..params.len() {
            if params.name(i) != reference.params.name(i)
                || params.tensor(i).shape() != reference.params.tensor(i).shape()
            {
                return Err(CtmError::config(format!(
                    "checkpoint tensor {} ({:?} {:?}) does not match config expectation ({:?} {:?})",
                    i,
                    params.name(i),
                    params.tensor(i).shape(),
                    reference.params.name(i),
                    reference.params.tensor(i).shape()
                )));
            }
        }
        Ok(CtmModel {
            config,
            vocab,
            params,
            encoder: EncoderChoice::Toy,
        })
    }

    /// Precision conversion (used to lift f32 models into f64 for
    /// gradient checks).
    pub fn convert<U: Real>(&self) -> CtmModel<U> {
        CtmModel {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.convert(),
            encoder: self.encoder.clone(),
        }
    }

    /// Bind all parameters into a graph, returning the aligned vars.
    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> Result<ModelBinding> {
        Ok(ModelBinding {
            vars: self.params.bind(g, trainable)?,
        })
    }

    fn var(&self, binding: &ModelBinding, name: &str) -> Result<Var> {
        self.params
            .index_of(name)
            .map(|i| binding.vars[i])
            .ok_or_else(|| CtmError::contract(format!("unknown parameter {name:?}")))
    }

    fn branch_weights(&self, binding: &ModelBinding, id: BranchId) -> Result<BranchWeights> {
        let prefix = if self.config.share_branch_weights {
            "match.shared".to_string()
        } else {
            format!("match.{}", id.short())
        };
        Ok(BranchWeights {
            ctx_align: self.var(binding, &format!("{prefix}.ctx_align"))?,
            pair_attn: self.var(binding, &format!("{prefix}.pair_attn"))?,
            feature: self.var(binding, &format!("{prefix}.feature"))?,
        })
    }

    fn triple_weights(&self, binding: &ModelBinding) -> Result<TripleWeights> {
        let mut w = TripleWeights::default();
        for id in BranchId::ALL {
            if self.config.has_branch(id) {
                let bw = Some(self.branch_weights(binding, id)?);
                match id {
                    BranchId::Answer => w.answer = bw,
                    BranchId::Question => w.question = bw,
                    BranchId::Passage => w.passage = bw,
                }
            }
        }
        Ok(w)
    }

    /// Encode one field of an instance through the configured encoder.
    fn encode_field(
        &self,
        g: &Graph<T>,
        binding: &ModelBinding,
        instance_id: &str,
        field: &str,
        tokens: &[String],
        rng: &mut RngState,
        training: bool,
    ) -> Result<Var> {
        match &self.encoder {
            EncoderChoice::Toy => {
                let tok_table = self.var(binding, "encoder.token_embedding")?;
                let pos_table = self.var(binding, "encoder.position_embedding")?;
                let ids = self.vocab.ids(tokens);
                encode_ids(
                    g,
                    tok_table,
                    pos_table,
                    &ids,
                    self.config.dropout,
                    rng,
                    training,
                )
            }
            EncoderChoice::Precomputed(store) => {
                let matrix = store.get(instance_id, field)?;
                g.constant(matrix.convert())
            }
        }
    }

    /// Representation of one candidate: encode the triple and run the
    /// configured matcher.
    pub fn candidate_repr(
        &self,
        g: &Graph<T>,
        binding: &ModelBinding,
        inst: &WindowedExample,
        candidate: usize,
        rng: &mut RngState,
        training: bool,
    ) -> Result<Var> {
        let id = inst.instance_id();
        let passage = self.encode_field(g, binding, &id, "p", &inst.passage, rng, training)?;
        let question = self.encode_field(g, binding, &id, "q", &inst.question, rng, training)?;
        let answer = self.encode_field(
            g,
            binding,
            &id,
            &format!("a{candidate}"),
            &inst.options[candidate],
            rng,
            training,
        )?;
        let enc = EncodedTriple {
            passage,
            question,
            answer,
        };
        self.match_encoded(g, binding, &enc, rng, training)
    }

    fn match_encoded(
        &self,
        g: &Graph<T>,
        binding: &ModelBinding,
        enc: &EncodedTriple,
        rng: &mut RngState,
        training: bool,
    ) -> Result<Var> {
        match self.config.matcher {
            MatcherKind::Ctm => {
                let weights = self.triple_weights(binding)?;
                let out = match_triple(g, enc, &weights, self.config.dropout, rng, training)?;
                Ok(out.combined)
            }
            MatcherKind::Dcmn => {
                let w = DualMatchWeights {
                    attn: self.var(binding, "match.dcmn.attn")?,
                    gate: self.var(binding, "match.dcmn.gate")?,
                    gate_bias: self.var(binding, "match.dcmn.gate_bias")?,
                };
                dcmn_dual_match(g, enc, &w)
            }
            MatcherKind::Co => {
                let w = SimMatchWeights {
                    attn: self.var(binding, "match.co.attn")?,
                    sim: self.var(binding, "match.co.sim")?,
                };
                co_match(g, enc, &w)
            }
            MatcherKind::Cnn => {
                let w = SimMatchWeights {
                    attn: self.var(binding, "match.cnn.attn")?,
                    sim: self.var(binding, "match.cnn.sim")?,
                };
                cnn_match(g, enc, &w)
            }
        }
    }

    /// Forward pass over all candidates of one instance. Passage and
    /// question are encoded once and shared across candidates.
    pub fn forward_instance(
        &self,
        g: &Graph<T>,
        binding: &ModelBinding,
        inst: &WindowedExample,
        rng: &mut RngState,
        training: bool,
    ) -> Result<InstanceForward> {
        let id = inst.instance_id();
        let passage = self.encode_field(g, binding, &id, "p", &inst.passage, rng, training)?;
        let question = self.encode_field(g, binding, &id, "q", &inst.question, rng, training)?;
        let head = self.var(binding, "head.weight")?;

        let mut candidates = Vec::with_capacity(inst.options.len());
        let mut scores = Vec::with_capacity(inst.options.len());
        for (ci, option) in inst.options.iter().enumerate() {
            let answer =
                self.encode_field(g, binding, &id, &format!("a{ci}"), option, rng, training)?;
            let enc = EncodedTriple {
                passage,
                question,
                answer,
            };
            let repr = self.match_encoded(g, binding, &enc, rng, training)?;
            scores.push(g.dot(repr, head)?);
            candidates.push(repr);
        }
        Ok(InstanceForward { candidates, scores })
    }

    /// Candidate scores as plain floats (evaluation path, no gradients).
    pub fn score_instance(&self, inst: &WindowedExample) -> Result<Vec<f64>> {
        let g = Graph::new();
        let binding = self.bind(&g, false)?;
        let mut rng = RngState::new(0); // unused in inference mode
        let fwd = self.forward_instance(&g, &binding, inst, &mut rng, false)?;
        Ok(fwd
            .scores
            .iter()
            .map(|&s| g.scalar_value(s).as_f64())
            .collect())
    }

    /// Loss of one question instance under a given step kind.
    ///
    /// Draw 1 covers the selection pass (and the contrastive anchor and
    /// negatives); the positive re-encodes and re-matches the gold
    /// candidate under draw 2. Streams are derived from (seed, epoch,
    /// dataset index, draw), so the two draws never interfere.
    pub fn question_loss(
        &self,
        g: &Graph<T>,
        binding: &ModelBinding,
        inst: &WindowedExample,
        epoch: usize,
        dataset_index: usize,
        kind: StepLoss,
        training: bool,
    ) -> Result<QuestionLossVars> {
        let seed = self.config.seed;
        let mut rng1 = RngState::stream(
            seed,
            &[0x7a11, epoch as u64, dataset_index as u64, 1],
        );
        let fwd = self.forward_instance(g, binding, inst, &mut rng1, training)?;
        let head = self.var(binding, "head.weight")?;

        let effective = if kind == StepLoss::Joint && self.config.lambda_cr == 0.0 {
            StepLoss::TmOnly
        } else {
            kind
        };

        let tm = if effective != StepLoss::CrOnly {
            Some(selection_loss(
                g,
                &QuestionBatch {
                    candidates: fwd.candidates.clone(),
                    gold: inst.gold,
                },
                head,
            )?)
        } else {
            None
        };

        let cr = if effective != StepLoss::TmOnly {
            let mut rng2 = RngState::stream(
                seed,
                &[0x7a11, epoch as u64, dataset_index as u64, 2],
            );
            let positive =
                self.candidate_repr(g, binding, inst, inst.gold, &mut rng2, training)?;
            let negatives: Vec<Var> = fwd
                .candidates
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != inst.gold)
                .map(|(_, &c)| c)
                .collect();
            Some(contrastive_loss(
                g,
                &ContrastiveViews {
                    anchor: fwd.candidates[inst.gold],
                    positive,
                    negatives,
                    tau: self.config.tau,
                },
            )?)
        } else {
            None
        };

        let total = match (effective, tm, cr) {
            (StepLoss::Joint, Some(tm), Some(cr)) => {
                joint_loss(g, tm, cr, self.config.lambda_cr)?
            }
            (_, Some(tm), None) => tm,
            (_, None, Some(cr)) => cr,
            _ => unreachable!("loss resolution covers all step kinds"),
        };
        Ok(QuestionLossVars {
            total,
            tm,
            cr,
            scores: fwd.scores,
            kind: effective,
        })
    }
}

/// Graph vars of all parameters, aligned with the parameter set.
#[derive(Debug, Clone)]
pub struct ModelBinding {
    pub vars: Vec<Var>,
}

/// Per-candidate representations and scores of one instance.
#[derive(Debug, Clone)]
pub struct InstanceForward {
    pub candidates: Vec<Var>,
    pub scores: Vec<Var>,
}

/// Loss vars of one question, with the effective step kind after the
/// joint/lambda degeneracy resolution.
#[derive(Debug, Clone)]
pub struct QuestionLossVars {
    pub total: Var,
    pub tm: Option<Var>,
    pub cr: Option<Var>,
    pub scores: Vec<Var>,
    pub kind: StepLoss,
}
