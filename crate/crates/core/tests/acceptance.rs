//! One PASS/FAIL line per acceptance criterion.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use icb_core::attention::{
    compute_alphas, decompose_hs, head_activation, partition_attention, reweight_query,
    shift_inject, AttentionWeights, HeadActivation, ShiftConfig,
};
use icb_core::cli::{self, RunConfig};
use icb_core::layout::{image_sequence, positional_embedding, Segment, TokenLayout};
use icb_core::model::{Mechanisms, VelocityNet};
use icb_core::numerics::Tensor2D;
use icb_core::oracle::{random_instance, run_suite, verify_decomposition, Instance, SuiteReport};
use icb_core::sampler::{
    noised_latent, run_sampling_observed, sample_noise, token_blend, PipelineInputs, SamplerConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generated latents of the all-off run on [`toggle_config`], hashed as an
/// encoded tensor file.
const BASELINE_SHA256: &str = "53b006aa8ec9850771cbab3b53e7cc8502b684684b5fae277c0d28223b4a49dc";

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

/// Writes past the test harness capture so the line shows in plain runs.
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

fn report(id: usize, name: &'static str, passed: bool, detail: String) -> Outcome {
    let line = format!(
        "criterion {id} {name:<24} {} {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    emit(&line);
    Outcome {
        id,
        name,
        passed,
        detail,
    }
}

fn check(report: &SuiteReport, name: &str) -> (bool, f64) {
    let c = report
        .checks
        .iter()
        .find(|c| c.name == name)
        .unwrap_or_else(|| panic!("suite has no check {name}"));
    (c.passed, c.max_error)
}

fn decomposition() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut ok = true;
    for _ in 0..100 {
        let Instance { x, layout, weights } = random_instance(&mut rng);
        let r = verify_decomposition(&x, layout, &weights, 1e-5, None).unwrap();
        worst = worst.max(r.max_error);
        ok &= r.passed;
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(10);
    report(
        1,
        "decomposition",
        ok,
        format!(
            "trials=100 max_err={worst:.3e} tol=1e-5 time={:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn alpha_normalization(suite: &SuiteReport) -> Outcome {
    let (norm_ok, norm_err) = check(suite, "alpha_normalization");
    let (oracle_ok, oracle_err) = check(suite, "alpha_oracle");

    // zero queries give uniform logits
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut uniform_err = 0.0f64;
    for (lp, lc, ls, d, heads) in [(3, 5, 7, 8, 2), (8, 16, 16, 32, 4), (1, 1, 1, 8, 1)] {
        let layout = TokenLayout::new(lp, lc, ls).unwrap();
        let base = AttentionWeights::random(d, heads, &mut rng).unwrap();
        let w = AttentionWeights::new(
            Tensor2D::zeros(d, d),
            base.w_k().clone(),
            base.w_v().clone(),
            base.w_o().clone(),
            heads,
        )
        .unwrap();
        let x = sample_noise(layout.total(), d, (lp * 100 + ls) as u64);
        let alphas = compute_alphas(&partition_attention(&x, layout, &w).unwrap());
        let l = layout.total() as f64;
        let want = [lp as f64 / l, lc as f64 / l, ls as f64 / l];
        for h in 0..heads {
            for r in 0..ls {
                let a = alphas.get(h, r);
                for k in 0..3 {
                    uniform_err = uniform_err.max((f64::from(a[k]) - want[k]).abs());
                }
            }
        }
    }
    report(
        2,
        "alpha_normalization",
        norm_ok && oracle_ok && uniform_err <= 1e-6,
        format!("sum_err={norm_err:.3e} oracle_err={oracle_err:.3e} uniform_err={uniform_err:.3e} tol=1e-6"),
    )
}

fn shift_identities(suite: &SuiteReport) -> Outcome {
    let (zero_ok, _) = check(suite, "shift_zero_identity");
    let (homog_ok, homog) = check(suite, "shift_homogeneity");
    let (lin_ok, lin) = check(suite, "shift_linearity");

    // direct bit-exact no-op on a fresh instance
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let Instance { x, layout, weights } = random_instance(&mut rng);
    let p = partition_attention(&x, layout, &weights).unwrap();
    let values = icb_core::attention::value_segments(&x, layout, &weights).unwrap();
    let hidden = icb_core::attention::joint_attention(&x, layout, &weights)
        .unwrap()
        .hidden;
    let same = shift_inject(&hidden, &p, &values, ShiftConfig::new(0.0, 0.0).unwrap()).unwrap();
    let bit_exact = same.merged().data().iter().map(|v| v.to_bits()).eq(hidden
        .merged()
        .data()
        .iter()
        .map(|v| v.to_bits()));
    report(
        3,
        "shift_identities",
        zero_ok && homog_ok && lin_ok && bit_exact,
        format!("noop_bit_exact={bit_exact} homogeneity={homog:.3e} linearity={lin:.3e} tol=1e-6"),
    )
}

fn head_reweighting(suite: &SuiteReport) -> Outcome {
    let (bounds_ok, _) = check(suite, "reweight_bounds");
    let (zero_ok, zero_err) = check(suite, "reweight_zero_head");
    let (neutral_ok, _) = check(suite, "reweight_neutral");

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut range_ok = true;
    let mut argmax_ok = true;
    let mut checked = 0;
    for _ in 0..100 {
        let Instance { x, layout, weights } = random_instance(&mut rng);
        let act = head_activation(&partition_attention(&x, layout, &weights).unwrap());
        range_ok &= act.normalized().iter().all(|v| (0.0..=1.0).contains(v));
        let raw = act.raw();
        if raw.iter().any(|&v| v != raw[0]) {
            checked += 1;
            let top = raw
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > raw[best] { i } else { best });
            argmax_ok &= act.normalized()[top] == 1.0;
        }
    }
    let Instance { x, layout, weights } = random_instance(&mut rng);
    let hidden = decompose_hs(&x, layout, &weights).unwrap();
    let equal = HeadActivation::from_raw(vec![0.3; weights.num_heads()]).unwrap();
    let noop = reweight_query(&hidden, &equal).unwrap() == hidden;
    report(
        4,
        "head_reweighting",
        bounds_ok && zero_ok && neutral_ok && range_ok && argmax_ok && noop && checked > 0,
        format!(
            "range={range_ok} argmax={argmax_ok} ({checked} non-degenerate) equal_noop={noop} zero_head={zero_err:.3e} tol=1e-6"
        ),
    )
}

fn small_config() -> RunConfig {
    RunConfig {
        model_dim: 32,
        heads: 4,
        blocks: 2,
        steps: 6,
        prompt_len: 4,
        ..RunConfig::default()
    }
}

fn token_blending() -> Outcome {
    let cfg = small_config();
    let inputs = cli::synthetic_inputs(&cfg, 5).unwrap();
    let model = VelocityNet::seeded(cfg.model_dims(), 5).unwrap();
    let sampler = SamplerConfig::new(cfg.steps, 9).unwrap();
    let mech = cfg.mechanisms().unwrap();

    let reference = inputs.clean_reference().unwrap();
    let clean = image_sequence(&reference, &inputs.target).unwrap();
    let eps = sample_noise(clean.rows(), clean.cols(), sampler.seed);
    let mut max_err = 0.0f64;
    let mut idempotent = true;
    let mut final_exact = false;
    let mut steps_seen = 0;
    run_sampling_observed(&inputs, &model, &sampler, &mech, &mut |rec| {
        steps_seen += 1;
        let t = f64::from(rec.t_next);
        for (r, &masked) in rec.state.mask.iter().enumerate() {
            if masked {
                continue;
            }
            for j in 0..clean.cols() {
                let want = (1.0 - t) * f64::from(clean.get(r, j)) + t * f64::from(eps.get(r, j));
                max_err = max_err.max((f64::from(rec.tokens.get(r, j)) - want).abs());
            }
        }
        let again = token_blend(rec.tokens, rec.state, rec.t_next).unwrap();
        idempotent &= again.data().iter().map(|v| v.to_bits()).eq(rec
            .tokens
            .data()
            .iter()
            .map(|v| v.to_bits()));
        if rec.t_next == 0.0 {
            final_exact = rec.state.mask.iter().enumerate().all(|(r, &m)| {
                m || rec
                    .tokens
                    .row(r)
                    .iter()
                    .zip(clean.row(r))
                    .all(|(a, b)| a.to_bits() == b.to_bits())
            });
        }
    })
    .unwrap();
    let endpoint = noised_latent(&clean, &eps, 0.0).unwrap() == clean;
    report(
        5,
        "token_blending",
        max_err <= 1e-6 && idempotent && final_exact && endpoint && steps_seen == cfg.steps,
        format!("steps={steps_seen} max_err={max_err:.3e} tol=1e-6 final_bit_exact={final_exact} idempotent={idempotent}"),
    )
}

fn toggle_config() -> RunConfig {
    RunConfig {
        model_dim: 32,
        heads: 4,
        blocks: 2,
        steps: 4,
        prompt_len: 4,
        seed: 11,
        weights_seed: 12,
        input_seed: 13,
        ..RunConfig::default()
    }
}

/// Plain rectified-flow Euler loop with no edits and no blending, written
/// against the model directly.
fn baseline_loop(cfg: &RunConfig, inputs: &PipelineInputs) -> Tensor2D {
    let model = VelocityNet::seeded(cfg.model_dims(), cfg.weights_seed).unwrap();
    let layout = inputs.layout().unwrap();
    let reference = inputs.clean_reference().unwrap();
    let clean = image_sequence(&reference, &inputs.target).unwrap();
    let d = cfg.model_dim;
    let positions = Tensor2D::vstack(&[
        &positional_embedding(reference.height(), reference.width(), 0, d),
        &positional_embedding(
            inputs.target.height(),
            inputs.target.width(),
            reference.width(),
            d,
        ),
    ])
    .unwrap();
    let mut w = sample_noise(clean.rows(), clean.cols(), cfg.seed);
    let n = cfg.steps as f32;
    for k in (1..=cfg.steps).rev() {
        let (t, t_next) = (k as f32 / n, (k - 1) as f32 / n);
        let v = model
            .forward(
                inputs.prompt.embeddings(),
                &w,
                &positions,
                t,
                layout,
                &Mechanisms::off(),
                None,
            )
            .unwrap();
        let dt = t - t_next;
        w = Tensor2D::from_vec(
            w.rows(),
            w.cols(),
            w.data()
                .iter()
                .zip(v.data())
                .map(|(&a, &b)| a - dt * b)
                .collect(),
        )
        .unwrap();
    }
    w.slice_rows(layout.len(Segment::Reference)..clean.rows())
}

fn disabled_paths() -> Outcome {
    let base = toggle_config();
    let inputs = cli::load_inputs(&base).unwrap();
    let mut hashes = Vec::new();
    let mut deterministic = true;
    for bits in 0..8u8 {
        let mut cfg = base.clone();
        cfg.shift = bits & 1 != 0;
        cfg.reweight = bits & 2 != 0;
        cfg.blend = bits & 4 != 0;
        let a = cli::run_insert(&cfg, inputs.clone())
            .unwrap()
            .generated_sha256();
        let b = cli::run_insert(&cfg, inputs.clone())
            .unwrap()
            .generated_sha256();
        deterministic &= a == b;
        hashes.push(a);
    }
    let distinct = hashes.iter().collect::<BTreeSet<_>>().len() == 8;
    let off = &hashes[0];

    let independent = baseline_loop(&base, &inputs);
    let independent_grid = icb_core::layout::unflatten_tokens(
        &independent,
        inputs.target.height(),
        inputs.target.width(),
    )
    .unwrap();
    let independent_hash = cli::sha256_hex(&cli::TensorFile::from(&independent_grid).encode());
    let matches_loop = *off == independent_hash;
    let matches_golden = off == BASELINE_SHA256;
    println!("  all-off sha256 {off}");
    report(
        6,
        "disabled_paths",
        deterministic && distinct && matches_loop && matches_golden,
        format!(
            "combinations=8 deterministic={deterministic} distinct={distinct} baseline_loop={matches_loop} golden={matches_golden}"
        ),
    )
}

fn run_icb(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_icb"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut files_equal = true;
    let mut worst = Duration::ZERO;
    let mut outputs: Vec<Vec<Vec<u8>>> = Vec::new();
    for run in ["a", "b"] {
        let cfg = dir.path().join(format!("{run}.cfg"));
        std::fs::write(&cfg, format!("seed=7\nout_dir={run}\n")).unwrap();
        let start = Instant::now();
        let out = run_icb(&["insert", "--config", cfg.to_str().unwrap()], dir.path());
        worst = worst.max(start.elapsed());
        files_equal &= out.status.success();
        outputs.push(
            [
                cli::commands::GENERATED_FILE,
                cli::commands::ALPHA_TRACE_FILE,
                cli::commands::HEAD_ACTIVATION_FILE,
            ]
            .iter()
            .map(|f| std::fs::read(dir.path().join(run).join(f)).unwrap_or_default())
            .collect(),
        );
    }
    files_equal &= outputs[0] == outputs[1] && outputs[0].iter().all(|b| !b.is_empty());
    report(
        7,
        "end_to_end_determinism",
        files_equal && worst < Duration::from_secs(30),
        format!(
            "byte_identical={files_equal} default_run={:.2}s limit=30s",
            worst.as_secs_f64()
        ),
    )
}

fn oracle_independence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let ok = run_icb(&["verify", "--trials", "100", "--seed", "0"], dir.path());
    let bad = run_icb(&["verify", "--trials", "10", "--inject-fault"], dir.path());
    let (ok_code, bad_code) = (ok.status.code(), bad.status.code());
    report(
        8,
        "oracle_independence",
        ok_code == Some(0) && bad_code == Some(1),
        format!("verify_exit={ok_code:?} fault_exit={bad_code:?}"),
    )
}

#[test]
fn acceptance() {
    let suite = run_suite(100, 0, None).unwrap();
    let outcomes = [
        decomposition(),
        alpha_normalization(&suite),
        shift_identities(&suite),
        head_reweighting(&suite),
        token_blending(),
        disabled_paths(),
        end_to_end(),
        oracle_independence(),
    ];
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| format!("{} {}: {}", o.id, o.name, o.detail))
        .collect();
    emit(&format!(
        "acceptance: {}/{} criteria met",
        outcomes.len() - failed.len(),
        outcomes.len()
    ));
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
