//! Brute-force references for the attention identities.
//!
//! Nothing here calls into the attention module's kernels for the reference
//! side: projections, logits, softmax and weighted sums are explicit f64
//! loops. The checks then compare the fast f32 path against them.

#![allow(clippy::needless_range_loop)]

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    decompose_hs, gaussian, head_activation, joint_attention, partition_attention, reweight_query,
    shift_inject, value_segments, AttentionWeights, HeadActivation, HiddenStates, ShiftConfig,
};
use crate::error::{Error, Result};
use crate::layout::{Segment, TokenLayout};
use crate::numerics::{relative_frobenius_error, Tensor2D};

pub const MAX_TOKENS: usize = 64;
pub const MAX_DIM: usize = 32;

fn check_size(x: &Tensor2D, layout: TokenLayout, w: &AttentionWeights) -> Result<()> {
    if layout.total() > MAX_TOKENS || w.model_dim() > MAX_DIM {
        return Err(Error::InvalidArgument(format!(
            "oracle handles at most {MAX_TOKENS} tokens and dim {MAX_DIM}, got {} and {}",
            layout.total(),
            w.model_dim()
        )));
    }
    if x.rows() != layout.total() || x.cols() != w.model_dim() {
        return Err(Error::shape(format!(
            "input is {}x{}, expected {}x{}",
            x.rows(),
            x.cols(),
            layout.total(),
            w.model_dim()
        )));
    }
    Ok(())
}

fn project64(x: &Tensor2D, m: &Tensor2D) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|i| {
            (0..m.cols())
                .map(|j| {
                    let mut acc = 0.0f64;
                    for k in 0..x.cols() {
                        acc += f64::from(x.get(i, k)) * f64::from(m.get(k, j));
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Per head, the explicit `L × L` attention probabilities in f64.
struct ReferenceAttention {
    probs: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<f64>>,
    head_dim: usize,
}

fn reference_attention(x: &Tensor2D, w: &AttentionWeights) -> ReferenceAttention {
    let q = project64(x, w.w_q());
    let k = project64(x, w.w_k());
    let values = project64(x, w.w_v());
    let (l, dh) = (x.rows(), w.head_dim());
    let scale = f64::from(w.logit_scale());
    let probs = (0..w.num_heads())
        .map(|h| {
            (0..l)
                .map(|i| {
                    let logits: Vec<f64> = (0..l)
                        .map(|j| {
                            let mut dot = 0.0;
                            for c in h * dh..(h + 1) * dh {
                                dot += q[i][c] * k[j][c];
                            }
                            dot * scale
                        })
                        .collect();
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    exps.into_iter().map(|e| e / z).collect()
                })
                .collect()
        })
        .collect();
    ReferenceAttention {
        probs,
        values,
        head_dim: dh,
    }
}

/// `out[i][c]` in f64, heads side by side.
fn reference_output(r: &ReferenceAttention, model_dim: usize) -> Vec<Vec<f64>> {
    let l = r.values.len();
    let mut out = vec![vec![0.0f64; model_dim]; l];
    for (h, probs) in r.probs.iter().enumerate() {
        for (i, row) in out.iter_mut().enumerate() {
            for c in h * r.head_dim..(h + 1) * r.head_dim {
                let mut acc = 0.0f64;
                for j in 0..l {
                    acc += probs[i][j] * r.values[j][c];
                }
                row[c] = acc;
            }
        }
    }
    out
}

/// Pre-projection multi-head attention output (`L × model_dim`), computed
/// with explicit loops and an explicit softmax.
pub fn full_softmax_reference(
    x: &Tensor2D,
    layout: TokenLayout,
    w: &AttentionWeights,
) -> Result<Tensor2D> {
    check_size(x, layout, w)?;
    let out = reference_output(&reference_attention(x, w), w.model_dim());
    let data = out.into_iter().flatten().map(|v| v as f32).collect();
    Tensor2D::from_vec(x.rows(), w.model_dim(), data)
}

/// Per head and target row, the reference `[α_p, α_c, α_s]` in f64.
pub fn reference_alphas(
    x: &Tensor2D,
    layout: TokenLayout,
    w: &AttentionWeights,
) -> Result<Vec<Vec<[f64; 3]>>> {
    check_size(x, layout, w)?;
    let r = reference_attention(x, w);
    Ok(r.probs
        .iter()
        .map(|probs| {
            layout
                .range(Segment::Target)
                .map(|i| Segment::ALL.map(|seg| layout.range(seg).map(|j| probs[i][j]).sum()))
                .collect()
        })
        .collect())
}

/// One line of a verification report.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckReport {
    fn new(name: &str, max_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            max_error,
            tolerance,
            // NaN fails
            passed: max_error <= tolerance,
        }
    }

    fn merge(&mut self, other: &CheckReport) {
        if other.max_error > self.max_error || other.max_error.is_nan() {
            self.max_error = other.max_error;
        }
        self.passed &= other.passed;
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<22} max_err={:.3e} tol={:.0e} {}",
            self.name,
            self.max_error,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Deliberate corruption used to show the checks can fail.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fault {
    /// Add this amount to `α_p` of the first target row of head 0 before recombining.
    PerturbAlpha(f32),
}

/// Reference `h_s` against the recombined decomposition, per head.
pub fn verify_decomposition(
    x: &Tensor2D,
    layout: TokenLayout,
    w: &AttentionWeights,
    tol: f64,
    fault: Option<Fault>,
) -> Result<CheckReport> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    check_size(x, layout, w)?;
    let reference = reference_output(&reference_attention(x, w), w.model_dim());
    let hidden = decompose_hs(x, layout, w)?;
    let mut dec = hidden
        .decomposition()
        .cloned()
        .expect("decompose_hs attaches a decomposition");
    if let Some(Fault::PerturbAlpha(delta)) = fault {
        let mut a = dec.alphas.get(0, 0);
        a[0] += delta;
        dec.alphas.set(0, 0, a);
    }
    let s = layout.range(Segment::Target);
    let mut worst = 0.0f64;
    for h in 0..w.num_heads() {
        // recombine in f64 so only the decomposed quantities carry rounding
        let c = &dec.components[h];
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for (r, i) in s.clone().enumerate() {
            let a = dec.alphas.get(h, r).map(f64::from);
            for (j, col) in w.head_cols(h).enumerate() {
                let got = a[0] * f64::from(c.demo_p.get(r, j))
                    + a[1] * f64::from(c.demo_c.get(r, j))
                    + a[2] * f64::from(c.query.get(r, j));
                let want = reference[i][col];
                diff += (got - want) * (got - want);
                norm += want * want;
            }
        }
        let err = if norm == 0.0 {
            diff.sqrt()
        } else {
            (diff / norm).sqrt()
        };
        if err > worst || err.is_nan() {
            worst = err;
        }
    }
    Ok(CheckReport::new("decomposition", worst, tol))
}

/// Checks `ĥ_s − h_s` against `α₁·D(1,0) + α₂·D(0,1)` for every grid point,
/// relative to the delta's norm.
pub fn verify_shift_linearity(
    x: &Tensor2D,
    layout: TokenLayout,
    w: &AttentionWeights,
    grid: &[(f32, f32)],
    tol: f64,
) -> Result<CheckReport> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty shift grid".into()));
    }
    let out = joint_attention(x, layout, w)?;
    let partition = partition_attention(x, layout, w)?;
    let values = value_segments(x, layout, w)?;
    let delta = |a1: f32, a2: f32| -> Result<Vec<f64>> {
        let shifted = shift_inject(&out.hidden, &partition, &values, ShiftConfig::new(a1, a2)?)?;
        Ok(target_delta(&out.hidden, &shifted))
    };
    let basis_p = delta(1.0, 0.0)?;
    let basis_c = delta(0.0, 1.0)?;
    let mut worst = 0.0f64;
    for &(a1, a2) in grid {
        let d = delta(a1, a2)?;
        let (mut dev, mut norm) = (0.0f64, 0.0f64);
        for i in 0..d.len() {
            let fit = f64::from(a1) * basis_p[i] + f64::from(a2) * basis_c[i];
            dev += (d[i] - fit).powi(2);
            norm += d[i] * d[i];
        }
        let rel = if norm == 0.0 {
            dev.sqrt()
        } else {
            (dev / norm).sqrt()
        };
        worst = worst.max(rel);
    }
    Ok(CheckReport::new("shift_linearity", worst, tol))
}

/// `ĥ_s − h_s` over all heads, read from the stored edit.
fn target_delta(before: &HiddenStates, after: &HiddenStates) -> Vec<f64> {
    let mut out = Vec::new();
    for h in 0..after.num_heads() {
        let base = before.target_edit(h);
        match after.target_edit(h) {
            Some(e) => out.extend(
                e.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| f64::from(v) - base.map_or(0.0, |b| f64::from(b.data()[i]))),
            ),
            None => {
                let rows = before.segment(h, Segment::Target);
                out.extend(std::iter::repeat_n(0.0, rows.data().len()));
            }
        }
    }
    out
}

/// Random instance within the oracle's size limits.
#[derive(Clone, Debug)]
pub struct Instance {
    pub x: Tensor2D,
    pub layout: TokenLayout,
    pub weights: AttentionWeights,
}

/// Layouts up to `(8, 16, 16)`, dims in `{8, 16, 32}`, heads in `{1, 2, 4}`.
pub fn random_instance(rng: &mut impl Rng) -> Instance {
    let layout = TokenLayout::new(
        rng.random_range(1..=8),
        rng.random_range(1..=16),
        rng.random_range(1..=16),
    )
    .expect("segments are non-empty");
    let dim = [8, 16, 32][rng.random_range(0..3)];
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let x = gaussian(layout.total(), dim, 1.0, rng);
    let weights = AttentionWeights::random(dim, heads, rng).expect("dims divide");
    Instance { x, layout, weights }
}

pub const DECOMPOSITION_TOL: f64 = 1e-5;
pub const ALPHA_TOL: f64 = 1e-6;
pub const SHIFT_TOL: f64 = 1e-6;
pub const REWEIGHT_TOL: f64 = 1e-6;
pub const SHIFT_GRID: [f32; 3] = [0.25, 0.5, 1.0];

/// Aggregated result of [`run_suite`].
#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub checks: Vec<CheckReport>,
    pub trials: usize,
    pub seed: u64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# icb verify trials={} seed={}", self.trials, self.seed)?;
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        writeln!(f, "{}", if self.passed() { "ALL PASS" } else { "FAILED" })
    }
}

fn max_abs(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, |m, v| {
        if v.is_nan() || v.abs() > m {
            v.abs()
        } else {
            m
        }
    })
}

/// Runs every identity check over `trials` seeded random instances.
pub fn run_suite(trials: usize, seed: u64, fault: Option<Fault>) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = [
        ("oracle_agreement", DECOMPOSITION_TOL),
        ("decomposition", DECOMPOSITION_TOL),
        ("alpha_normalization", ALPHA_TOL),
        ("alpha_oracle", ALPHA_TOL),
        ("shift_zero_identity", 0.0),
        ("shift_homogeneity", SHIFT_TOL),
        ("shift_linearity", SHIFT_TOL),
        ("reweight_bounds", 0.0),
        ("reweight_zero_head", REWEIGHT_TOL),
        ("reweight_neutral", 0.0),
    ];
    let mut checks: Vec<CheckReport> = names
        .iter()
        .map(|(n, t)| CheckReport::new(n, 0.0, *t))
        .collect();
    let grid: Vec<(f32, f32)> = SHIFT_GRID
        .iter()
        .flat_map(|&a| SHIFT_GRID.iter().map(move |&b| (a, b)))
        .collect();

    for _ in 0..trials {
        let Instance {
            x,
            layout,
            weights: w,
        } = random_instance(&mut rng);
        let mut results = Vec::with_capacity(checks.len());

        let out = joint_attention(&x, layout, &w)?;
        let reference = full_softmax_reference(&x, layout, &w)?;
        results.push(CheckReport::new(
            "oracle_agreement",
            relative_frobenius_error(&out.hidden.merged(), &reference),
            DECOMPOSITION_TOL,
        ));
        results.push(verify_decomposition(
            &x,
            layout,
            &w,
            DECOMPOSITION_TOL,
            fault,
        )?);

        let partition = partition_attention(&x, layout, &w)?;
        let alphas = crate::attention::compute_alphas(&partition);
        let ref_alphas = reference_alphas(&x, layout, &w)?;
        let mut norm_err = Vec::new();
        let mut oracle_err = Vec::new();
        for h in 0..alphas.num_heads() {
            for r in 0..alphas.rows() {
                let a = alphas.get(h, r).map(f64::from);
                norm_err.push(a.iter().sum::<f64>() - 1.0);
                for k in 0..3 {
                    oracle_err.push(a[k] - ref_alphas[h][r][k]);
                }
            }
        }
        results.push(CheckReport::new(
            "alpha_normalization",
            max_abs(norm_err),
            ALPHA_TOL,
        ));
        results.push(CheckReport::new(
            "alpha_oracle",
            max_abs(oracle_err),
            ALPHA_TOL,
        ));

        let values = value_segments(&x, layout, &w)?;
        let unshifted = shift_inject(&out.hidden, &partition, &values, ShiftConfig::default())?;
        let zero_err = if unshifted == out.hidden { 0.0 } else { 1.0 };
        results.push(CheckReport::new("shift_zero_identity", zero_err, 0.0));

        let a2 = 0.5f32;
        let shifted = shift_inject(&out.hidden, &partition, &values, ShiftConfig::new(0.0, a2)?)?;
        let delta_sq: f64 = target_delta(&out.hidden, &shifted)
            .iter()
            .map(|d| d * d)
            .sum();
        let mut term_sq = 0.0f64;
        for h in 0..w.num_heads() {
            let term = crate::numerics::matmul(
                &partition.block(h, Segment::Target, Segment::Reference),
                &values.segment(h, Segment::Reference),
            )?;
            term_sq += term.frobenius_norm().powi(2);
        }
        let expected = f64::from(a2) * term_sq.sqrt();
        let homog = (delta_sq.sqrt() - expected).abs() / expected.max(f64::MIN_POSITIVE);
        results.push(CheckReport::new("shift_homogeneity", homog, SHIFT_TOL));
        results.push(verify_shift_linearity(&x, layout, &w, &grid, SHIFT_TOL)?);

        let act = head_activation(&partition);
        results.push(CheckReport::new(
            "reweight_bounds",
            reweight_bounds_violation(&act),
            0.0,
        ));

        let hidden = decompose_hs(&x, layout, &w)?;
        let dec = hidden.decomposition().expect("decomposed");
        let mut weights = vec![1.0f32; w.num_heads()];
        weights[0] = 0.0;
        let zeroed = reweight_query(&hidden, &HeadActivation::from_weights(weights))?;
        let target = zeroed.segment(0, Segment::Target);
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for r in 0..target.rows() {
            let [ap, ac, _] = dec.alphas.get(0, r);
            for j in 0..target.cols() {
                let want = f64::from(ap) * f64::from(dec.components[0].demo_p.get(r, j))
                    + f64::from(ac) * f64::from(dec.components[0].demo_c.get(r, j));
                diff += (f64::from(target.get(r, j)) - want).powi(2);
                norm += want * want;
            }
        }
        let zero_err = if norm == 0.0 {
            diff.sqrt()
        } else {
            (diff / norm).sqrt()
        };
        results.push(CheckReport::new(
            "reweight_zero_head",
            zero_err,
            REWEIGHT_TOL,
        ));

        let neutral = reweight_query(
            &hidden,
            &HeadActivation::from_raw(vec![0.7; w.num_heads()])?,
        )?;
        results.push(CheckReport::new(
            "reweight_neutral",
            if neutral == hidden { 0.0 } else { 1.0 },
            0.0,
        ));

        for (c, r) in checks.iter_mut().zip(&results) {
            debug_assert_eq!(c.name, r.name);
            c.merge(r);
        }
    }
    Ok(SuiteReport {
        checks,
        trials,
        seed,
    })
}

/// 0 when every normalised weight lies in `[0, 1]` and the argmax of raw and
/// normalised activations agree (or all raw values are equal); 1 otherwise.
pub fn reweight_bounds_violation(act: &HeadActivation) -> f64 {
    let norm = act.normalized();
    if norm.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return 1.0;
    }
    let raw = act.raw();
    let all_equal = raw.iter().all(|&v| v == raw[0]);
    if !all_equal && argmax(raw) != argmax(norm) {
        return 1.0;
    }
    0.0
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
