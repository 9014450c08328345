//! Acceptance suite: one test per release criterion, each printing a
//! `[PASS]` line with its measured time against the stated budget.
//!
//! Full-scale published accuracies (e.g. 81.5/75.3/72.0 with a large
//! pre-trained encoder, or the 65.7-vs-64.2 RACE-H ablation) require that
//! encoder plus the complete RACE/DREAM corpora and are out of reach at
//! desk scale, so acceptance is property-based, with one ordering check
//! shaped like the published branch ablation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ctm_core::checkpoint::checkpoint_bytes;
use ctm_core::data::{
    load_dataset, parse_dream_file, parse_race_file, sliding_window, synth_dataset, tag_question,
    windowize, DataFormat, McqaExample, QuestionTag, SynthSpec, WindowedExample,
};
use ctm_core::graph::{Graph, Var};
use ctm_core::matching::{branch_trace, nested_attention_form, BranchWeights, EncodedTriple};
use ctm_core::model::{CtmConfig, CtmModel};
use ctm_core::objectives::{
    contrastive_loss, selection_loss, ContrastiveViews, QuestionBatch, Strategy,
};
use ctm_core::train::{build_vocab, evaluate, gradcheck_objective, train, train_and_evaluate};
use ctm_core::{Real, RngState, Tensor};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn budget(name: &str, started: Instant, seconds: f64, detail: &str) {
    let elapsed = started.elapsed().as_secs_f64();
    println!("[PASS] {name}: {detail} ({elapsed:.1}s, budget {seconds}s)");
    assert!(
        elapsed < seconds,
        "{name} exceeded its {seconds}s budget: {elapsed:.1}s"
    );
}

fn synth(questions: usize, seed: u64) -> Vec<McqaExample> {
    synth_dataset(&SynthSpec {
        questions,
        options: 4,
        vocab_words: 64,
        seed,
    })
    .unwrap()
}

fn desk_config(hidden_dim: usize, epochs: usize, seed: u64) -> CtmConfig {
    CtmConfig {
        hidden_dim,
        epochs,
        max_len: 48,
        stride: 24,
        vocab_cap: 256,
        seed,
        ..CtmConfig::default()
    }
}

// ── 1. Gradient integrity ───────────────────────────────────────────────

#[test]
fn a01_gradient_integrity() {
    let started = Instant::now();
    let report = gradcheck_objective(2024).unwrap();
    assert!(
        report.worst < 1e-5,
        "worst relative error {} (per param: {:?})",
        report.worst,
        report.per_param
    );
    assert!(report.per_param.len() >= 12, "all parameter tensors checked");
    budget(
        "gradient integrity",
        started,
        60.0,
        &format!(
            "full joint objective, worst relative error {:.3e} over {} tensors",
            report.worst,
            report.per_param.len()
        ),
    );
}

// ── 2. Algebraic equivalence ────────────────────────────────────────────

fn equivalence_worst<T: Real>(trials: u64) -> f64 {
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut rng = RngState::stream(0xe9, &[trial]);
        let g = Graph::<T>::new();
        let l = 3 + (trial % 4) as usize;
        let mat = |rows: usize, rng: &mut RngState, g: &Graph<T>| -> Var {
            g.leaf(Tensor::uniform(vec![rows, l], -1.0, 1.0, rng), false)
                .unwrap()
        };
        let enc = EncodedTriple {
            passage: mat(2 + rng.below(5), &mut rng, &g),
            question: mat(2 + rng.below(4), &mut rng, &g),
            answer: mat(1 + rng.below(3), &mut rng, &g),
        };
        let weights = BranchWeights {
            ctx_align: g
                .leaf(Tensor::uniform(vec![l, l], -0.8, 0.8, &mut rng), false)
                .unwrap(),
            pair_attn: g
                .leaf(Tensor::uniform(vec![l, l], -0.8, 0.8, &mut rng), false)
                .unwrap(),
            feature: g
                .leaf(Tensor::uniform(vec![l, l], -0.8, 0.8, &mut rng), false)
                .unwrap(),
        };
        let mut no_rng = RngState::new(0);
        let trace = branch_trace(
            &g,
            enc.answer,
            enc.passage,
            enc.question,
            &weights,
            0.0,
            &mut no_rng,
            false,
        )
        .unwrap();
        let (nested_pq, nested_qp) = nested_attention_form(&g, &enc, &weights).unwrap();
        worst = worst
            .max(g.value(trace.fused_uv).max_abs_diff(&g.value(nested_pq)))
            .max(g.value(trace.fused_vu).max_abs_diff(&g.value(nested_qp)));
    }
    worst
}

#[test]
fn a02_algebraic_equivalence() {
    let started = Instant::now();
    let worst32 = equivalence_worst::<f32>(100);
    let worst64 = equivalence_worst::<f64>(100);
    assert!(worst32 <= 1e-6, "single precision diff {worst32}");
    assert!(worst64 <= 1e-12, "double precision diff {worst64}");
    budget(
        "algebraic equivalence",
        started,
        10.0,
        &format!(
            "nested attention vs branch pipeline over 100 instances, diff {worst32:.2e} (f32) / {worst64:.2e} (f64)"
        ),
    );
}

// ── 3. Normalization suite ──────────────────────────────────────────────

#[test]
fn a03_normalization_suite() {
    let started = Instant::now();
    let mut worst_attention = 0.0f64;
    let mut worst_selection = 0.0f64;
    for trial in 0..1000u64 {
        let mut rng = RngState::stream(0xa3, &[trial]);
        let g = Graph::<f32>::new();
        let l = 4;
        let ctx_rows = 1 + rng.below(6);
        let x_rows = 1 + rng.below(40);
        let ctx = g
            .leaf(Tensor::uniform(vec![ctx_rows, l], -2.0, 2.0, &mut rng), false)
            .unwrap();
        let x = g
            .leaf(Tensor::uniform(vec![x_rows, l], -2.0, 2.0, &mut rng), false)
            .unwrap();
        let w = g
            .leaf(Tensor::uniform(vec![l, l], -1.0, 1.0, &mut rng), false)
            .unwrap();
        let (attn, _) = ctm_core::matching::context_attend(&g, ctx, x, w).unwrap();
        let a = g.value(attn);
        for r in 0..a.rows() {
            let sum: f64 = a.row(r).iter().map(|v| *v as f64).sum();
            worst_attention = worst_attention.max((sum - 1.0).abs());
            assert!(a.row(r).iter().all(|&p| p > 0.0 && p < 1.0));
        }

        // selection probabilities over a random score vector
        let n = 2 + rng.below(4);
        let scores: Vec<f32> = (0..n).map(|_| rng.uniform(-5.0, 5.0) as f32).collect();
        let sv = g
            .leaf(Tensor::new(vec![1, n], scores).unwrap(), false)
            .unwrap();
        let probs = g.value(g.softmax_rows(sv).unwrap());
        let sum: f64 = probs.data().iter().map(|v| *v as f64).sum();
        worst_selection = worst_selection.max((sum - 1.0).abs());
    }
    assert!(worst_attention <= 1e-6, "attention row sum off by {worst_attention}");
    assert!(worst_selection <= 1e-6, "selection prob sum off by {worst_selection}");
    budget(
        "normalization suite",
        started,
        10.0,
        &format!(
            "1000 attention computations, worst row-sum deviation {worst_attention:.2e} / selection {worst_selection:.2e}"
        ),
    );
}

// ── 4. Permutation equivariance ─────────────────────────────────────────

#[test]
fn a04_permutation_equivariance() {
    let started = Instant::now();
    let data = synth(200, 404);
    let config = desk_config(8, 1, 44);
    let vocab = build_vocab(&data, config.vocab_cap);
    let model = CtmModel::<f32>::new(config.clone(), vocab).unwrap();
    let windows = windowize(&data, config.max_len, config.stride).unwrap();

    let mut rng = RngState::new(0x9e);
    let mut worst_loss_diff = 0.0f64;
    for inst in windows.iter().take(200) {
        let base_scores = model.score_instance(inst).unwrap();

        let mut perm: Vec<usize> = (0..inst.options.len()).collect();
        rng.shuffle(&mut perm);
        let mut permuted = inst.clone();
        permuted.options = perm.iter().map(|&i| inst.options[i].clone()).collect();
        permuted.gold = perm.iter().position(|&i| i == inst.gold).unwrap();
        let perm_scores = model.score_instance(&permuted).unwrap();

        // scores permute exactly (bitwise)
        for (slot, &orig) in perm.iter().enumerate() {
            assert_eq!(
                perm_scores[slot].to_bits(),
                base_scores[orig].to_bits(),
                "score permutation mismatch on {}",
                inst.instance_id()
            );
        }

        // both losses unchanged within 1e-6 (inference-mode representations)
        let losses = |w: &WindowedExample| -> (f64, f64) {
            let g = Graph::<f32>::new();
            let binding = model.bind(&g, false).unwrap();
            let mut r = RngState::new(0);
            let fwd = model.forward_instance(&g, &binding, w, &mut r, false).unwrap();
            let head_idx = model.params.index_of("head.weight").unwrap();
            let tm = selection_loss(
                &g,
                &QuestionBatch {
                    candidates: fwd.candidates.clone(),
                    gold: w.gold,
                },
                binding.vars[head_idx],
            )
            .unwrap();
            let negatives: Vec<Var> = fwd
                .candidates
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != w.gold)
                .map(|(_, &c)| c)
                .collect();
            let positive = model
                .candidate_repr(&g, &binding, w, w.gold, &mut RngState::new(0), false)
                .unwrap();
            let cr = contrastive_loss(
                &g,
                &ContrastiveViews {
                    anchor: fwd.candidates[w.gold],
                    positive,
                    negatives,
                    tau: model.config.tau,
                },
            )
            .unwrap();
            (
                g.scalar_value(tm) as f64,
                g.scalar_value(cr) as f64,
            )
        };
        let (tm_a, cr_a) = losses(inst);
        let (tm_b, cr_b) = losses(&permuted);
        worst_loss_diff = worst_loss_diff
            .max((tm_a - tm_b).abs())
            .max((cr_a - cr_b).abs());
    }
    assert!(worst_loss_diff <= 1e-6, "loss drift {worst_loss_diff}");
    budget(
        "permutation equivariance",
        started,
        30.0,
        &format!("200 questions, scores permute bitwise, loss drift {worst_loss_diff:.2e}"),
    );
}

// ── 5. Degeneracy: lambda = 0 equals selection-only training ────────────

#[test]
fn a05_lambda_zero_degeneracy() {
    let started = Instant::now();
    let data = synth(48, 505);
    let run = |strategy: Strategy, lambda: f64, pretrain_steps: usize| {
        let mut config = desk_config(16, 5, 77);
        config.strategy = strategy;
        config.lambda_cr = lambda;
        config.pretrain_steps = pretrain_steps;
        let vocab = build_vocab(&data, config.vocab_cap);
        let mut model = CtmModel::<f32>::new(config.clone(), vocab).unwrap();
        let windows = windowize(&data, config.max_len, config.stride).unwrap();
        let outcome = train(&mut model, &windows).unwrap();
        (model.params.digest(), outcome)
    };

    // joint with lambda 0 vs the explicit selection-only schedule
    // (pretrain with zero warmup steps)
    let (digest_a, outcome_a) = run(Strategy::Joint, 0.0, 0);
    let (digest_b, outcome_b) = run(Strategy::Pretrain, 0.5, 0);

    assert_eq!(digest_a, digest_b, "parameter trajectories diverged");
    assert_eq!(
        outcome_a.metrics.to_csv_without_time(),
        outcome_b.metrics.to_csv_without_time(),
        "metrics diverged"
    );
    assert_eq!(outcome_a.steps, outcome_b.steps, "step traces diverged");
    budget(
        "lambda-zero degeneracy",
        started,
        120.0,
        &format!(
            "bitwise-identical parameters and step traces over {} steps",
            outcome_a.steps.len()
        ),
    );
}

// ── 6. Overfit sanity ───────────────────────────────────────────────────

#[test]
fn a06_overfit_sanity() {
    let started = Instant::now();
    let data = synth(32, 7);
    let config = desk_config(16, 300, 5);
    let vocab = build_vocab(&data, config.vocab_cap);
    let mut model = CtmModel::<f32>::new(config.clone(), vocab).unwrap();
    let windows = windowize(&data, config.max_len, config.stride).unwrap();
    let outcome = train(&mut model, &windows).unwrap();
    let first_perfect = outcome
        .metrics
        .rows
        .iter()
        .find(|r| r.accuracy == 1.0)
        .map(|r| r.epoch);
    assert!(
        first_perfect.is_some(),
        "never reached 100% train accuracy in 300 epochs (best {:?})",
        outcome.metrics.best_accuracy("train")
    );
    budget(
        "overfit sanity",
        started,
        120.0,
        &format!(
            "32 questions memorized; 100% train accuracy at epoch {}",
            first_perfect.unwrap()
        ),
    );
}

// ── 7. Learning signal on held-out data ─────────────────────────────────

#[test]
fn a07_learning_signal() {
    let started = Instant::now();
    let data = synth(1000, 11);
    let train_set = &data[..800];
    let eval_set = &data[800..];
    let mut accs = Vec::new();
    for seed in [201u64, 202, 203] {
        let config = desk_config(32, 10, seed);
        let (_, _, acc) = train_and_evaluate(&config, train_set, eval_set).unwrap();
        accs.push(acc);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!(
        mean >= 0.80,
        "mean held-out accuracy {mean:.3} below 0.80 (chance 0.25); per seed {accs:?}"
    );
    budget(
        "learning signal",
        started,
        600.0,
        &format!("held-out accuracy mean {mean:.3} over 3 seeds (chance 0.25), per seed {accs:?}"),
    );
}

// ── 8. Ordering check shaped like the published branch ablation ─────────

#[test]
fn a08_branch_ordering() {
    let started = Instant::now();
    let data = synth(1000, 11);
    let train_set = &data[..800];
    let eval_set = &data[800..];
    let arms = ["a", "q", "p", "aqp"];
    let seeds = [101u64, 102, 103, 104, 105];

    let mut means = Vec::new();
    for arm in arms {
        let set = ctm_core::train::AblationSet::parse(arm).unwrap();
        let mut accs = Vec::new();
        for &seed in &seeds {
            let config = set.apply(&desk_config(32, 10, seed));
            let (_, _, acc) = train_and_evaluate(&config, train_set, eval_set).unwrap();
            accs.push(acc);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("  branch set {arm:>4}: mean {mean:.3} over paired seeds {accs:?}");
        means.push((arm, mean));
    }
    let triple = means.last().unwrap().1;
    for (arm, mean) in &means[..3] {
        assert!(
            triple >= *mean,
            "triple mean {triple:.3} below single branch {arm} mean {mean:.3}"
        );
    }
    println!(
        "  full-scale reference on RACE-H (not reproducible at desk scale): \
         triple matching 65.7 vs gated dual matching 64.2"
    );
    budget(
        "branch ordering",
        started,
        1800.0,
        &format!(
            "triple mean {:.3} >= singles [{:.3}, {:.3}, {:.3}] over 5 paired seeds",
            triple, means[0].1, means[1].1, means[2].1
        ),
    );
}

// ── 9. Contrastive scalar oracles ───────────────────────────────────────

/// Independent high-precision implementation of the contrastive loss from
/// raw cosine values.
fn oracle_infonce(cos_pos: f64, cos_negs: &[f64], tau: f64) -> f64 {
    let s_pos = cos_pos / tau;
    let denom: f64 = std::iter::once(s_pos)
        .chain(cos_negs.iter().map(|c| c / tau))
        .map(f64::exp)
        .sum();
    -(s_pos.exp() / denom).ln()
}

#[test]
fn a09_contrastive_scalar_oracles() {
    let started = Instant::now();
    let g = Graph::<f64>::new();
    let vec_of = |v: Vec<f64>| g.leaf(Tensor::vector(v), false).unwrap();

    // aligned positive, two orthogonal negatives, tau = 1
    let case_a = contrastive_loss(
        &g,
        &ContrastiveViews {
            anchor: vec_of(vec![1.0, 0.0]),
            positive: vec_of(vec![2.0, 0.0]),
            negatives: vec![vec_of(vec![0.0, 1.0]), vec_of(vec![0.0, -3.0])],
            tau: 1.0,
        },
    )
    .unwrap();
    let expect_a = oracle_infonce(1.0, &[0.0, 0.0], 1.0);
    assert!((g.scalar_value(case_a) - expect_a).abs() < 1e-10);
    assert!((expect_a - 0.55144471393205109).abs() < 1e-12);

    // no negatives: exactly zero
    let case_b = contrastive_loss(
        &g,
        &ContrastiveViews {
            anchor: vec_of(vec![0.3, 0.4]),
            positive: vec_of(vec![0.6, 0.8]),
            negatives: vec![],
            tau: 0.07,
        },
    )
    .unwrap();
    assert_eq!(g.scalar_value(case_b), 0.0);
    assert_eq!(oracle_infonce(1.0, &[], 0.07), 0.0);

    // anti-aligned negatives at tau 0.07: numerically zero through the
    // stabilized log-sum-exp
    let case_c = contrastive_loss(
        &g,
        &ContrastiveViews {
            anchor: vec_of(vec![1.0, 2.0]),
            positive: vec_of(vec![2.0, 4.0]),
            negatives: vec![vec_of(vec![-1.0, -2.0]), vec_of(vec![-3.0, -6.0])],
            tau: 0.07,
        },
    )
    .unwrap();
    let got_c = g.scalar_value(case_c);
    let expect_c = oracle_infonce(1.0, &[-1.0, -1.0], 0.07);
    assert!((got_c - expect_c).abs() < 1e-10);
    assert!(got_c >= 0.0 && got_c < 1e-10, "loss {got_c}");
    budget(
        "contrastive scalar oracles",
        started,
        1.0,
        "three frozen cases match the independent scalar implementation to 1e-10",
    );
}

// ── 10. Data fidelity ───────────────────────────────────────────────────

#[test]
fn a10_data_fidelity() {
    let started = Instant::now();

    // hand-counted fixture totals
    let race = parse_race_file(&fixture("race_fixture.json")).unwrap();
    assert_eq!(race.len(), 5, "race fixture holds exactly 5 questions");
    assert!(race.iter().all(|e| e.options.len() == 4 && e.gold < 4));
    let dream = parse_dream_file(&fixture("dream_fixture.json")).unwrap();
    assert_eq!(dream.len(), 2, "dream fixture holds exactly 2 questions");
    assert!(dream.iter().all(|e| e.options.len() == 3));

    // question tags match the fixtures' hand labels exactly
    let race_labels = [
        QuestionTag::Cloze,
        QuestionTag::What,
        QuestionTag::Which,
        QuestionTag::Other,
        QuestionTag::Other,
    ];
    for (ex, expect) in race.iter().zip(race_labels) {
        assert_eq!(tag_question(&ex.question), expect, "{}", ex.id);
    }
    let dream_labels = [QuestionTag::What, QuestionTag::Other];
    for (ex, expect) in dream.iter().zip(dream_labels) {
        assert_eq!(tag_question(&ex.question), expect, "{}", ex.id);
    }

    // directory loading finds both fixtures
    let from_dir = load_dataset(&fixture(""), DataFormat::Race);
    assert!(from_dir.is_err(), "dream fixture must not parse as race");

    // window coverage invariant over 1000 random (length, stride) pairs
    let mut rng = RngState::new(0xda7a);
    for _ in 0..1000 {
        let len = 1 + rng.below(500);
        let max_len = 1 + rng.below(100);
        let stride = 1 + rng.below(max_len);
        let starts = sliding_window(len, max_len, stride).unwrap();
        let mut covered = vec![false; len];
        for &s in &starts {
            for c in covered.iter_mut().skip(s).take(max_len) {
                *c = true;
            }
        }
        assert!(
            covered.iter().all(|&c| c),
            "uncovered token: len {len} max_len {max_len} stride {stride}"
        );
        if len <= max_len {
            assert_eq!(starts, vec![0]);
        }
    }
    budget(
        "data fidelity",
        started,
        5.0,
        "fixture totals and hand labels exact; window coverage holds on 1000 random pairs",
    );
}

// ── 11. Determinism ─────────────────────────────────────────────────────

#[test]
fn a11_determinism() {
    let started = Instant::now();
    let data = synth(200, 1111);
    let train_set = &data[..160];
    let eval_set = &data[160..];

    let run = || {
        let config = desk_config(16, 4, 2718);
        let (model, outcome, _) = train_and_evaluate(&config, train_set, eval_set).unwrap();
        let eval_windows = windowize(eval_set, config.max_len, config.stride).unwrap();
        let eval_metrics = evaluate(&model, &eval_windows, "eval").unwrap();
        (
            checkpoint_bytes(&model).unwrap(),
            outcome.metrics.to_csv_without_time(),
            eval_metrics.to_csv_without_time(),
        )
    };
    let (bytes_1, train_csv_1, eval_csv_1) = run();
    let (bytes_2, train_csv_2, eval_csv_2) = run();
    assert_eq!(bytes_1, bytes_2, "checkpoint bytes differ between runs");
    assert_eq!(train_csv_1, train_csv_2, "training metrics differ");
    assert_eq!(eval_csv_1, eval_csv_2, "evaluation metrics differ");
    budget(
        "determinism",
        started,
        240.0,
        &format!(
            "two runs, byte-identical checkpoints ({} bytes) and metrics",
            bytes_1.len()
        ),
    );
}
