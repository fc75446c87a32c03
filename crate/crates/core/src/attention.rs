//! Joint multi-head attention over `[prompt | reference | target]`.
//!
//! The attention map of every head is a single softmax over the whole row,
//! so it splits into nine blocks `A[i][j]` with `i, j ∈ {p, c, s}`. For the
//! target rows the output decomposes as
//!
//! ```text
//! h_s = α_p · h(demo_p) + α_c · h(demo_c) + α_s · h(query)
//! ```
//!
//! where each `h(·)` is a softmax attention restricted to one key segment and
//! `α_tag` is the softmax mass the joint row puts on that segment. The two
//! editing mechanisms act on this structure:
//!
//! * feature shift: `ĥ_s = h_s + α₁ A[s][p] v_p + α₂ A[s][c] v_c`
//! * head reweighting: each head's `h(query)` is scaled by the min-max
//!   normalised mass of its `A[p][s]` block.
//!
//! Everything here operates per head on pre-projection hidden states; `W_o`
//! is applied afterwards.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::layout::{Segment, TokenLayout};
use crate::numerics::{gelu, layer_norm, matmul, matmul_transposed, row_softmax, Tensor2D};

/// Projection matrices of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    w_q: Tensor2D,
    w_k: Tensor2D,
    w_v: Tensor2D,
    w_o: Tensor2D,
    num_heads: usize,
    logit_scale: f32,
}

impl AttentionWeights {
    /// All four matrices must be `model_dim × model_dim` with `model_dim`
    /// divisible by `num_heads`. The logit scale defaults to `1/√head_dim`.
    pub fn new(
        w_q: Tensor2D,
        w_k: Tensor2D,
        w_v: Tensor2D,
        w_o: Tensor2D,
        num_heads: usize,
    ) -> Result<Self> {
        let d = w_q.rows();
        if num_heads == 0 || d == 0 || !d.is_multiple_of(num_heads) {
            return Err(Error::shape(format!(
                "model dim {d} is not divisible into {num_heads} heads"
            )));
        }
        for (name, m) in [("W_q", &w_q), ("W_k", &w_k), ("W_v", &w_v), ("W_o", &w_o)] {
            if m.rows() != d || m.cols() != d {
                return Err(Error::shape(format!(
                    "{name} is {}x{}, expected {d}x{d}",
                    m.rows(),
                    m.cols()
                )));
            }
            if !m.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} has non-finite entries"
                )));
            }
        }
        let logit_scale = 1.0 / libm::sqrtf((d / num_heads) as f32);
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            num_heads,
            logit_scale,
        })
    }

    /// Gaussian init with std `1/√model_dim`.
    pub fn random(model_dim: usize, num_heads: usize, rng: &mut impl Rng) -> Result<Self> {
        let std = 1.0 / (model_dim as f32).sqrt();
        let mut m = || gaussian(model_dim, model_dim, std, rng);
        let (q, k, v, o) = (m(), m(), m(), m());
        Self::new(q, k, v, o, num_heads)
    }

    /// Replaces the logit scale; `1.0` gives the unscaled `x W_qk xᵀ` form.
    pub fn with_logit_scale(mut self, scale: f32) -> Self {
        self.logit_scale = scale;
        self
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim() / self.num_heads
    }

    pub fn logit_scale(&self) -> f32 {
        self.logit_scale
    }

    pub fn w_q(&self) -> &Tensor2D {
        &self.w_q
    }

    pub fn w_k(&self) -> &Tensor2D {
        &self.w_k
    }

    pub fn w_v(&self) -> &Tensor2D {
        &self.w_v
    }

    pub fn w_o(&self) -> &Tensor2D {
        &self.w_o
    }

    pub(crate) fn head_cols(&self, head: usize) -> std::ops::Range<usize> {
        let dh = self.head_dim();
        head * dh..(head + 1) * dh
    }
}

pub(crate) fn gaussian(rows: usize, cols: usize, std: f32, rng: &mut impl Rng) -> Tensor2D {
    let normal = Normal::new(0.0f32, std).expect("std is finite and positive");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor2D::from_vec(rows, cols, data).expect("length matches")
}

/// Shift strengths `(α₁, α₂)` for the prompt and reference terms.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ShiftConfig {
    alpha1: f32,
    alpha2: f32,
}

impl ShiftConfig {
    pub fn new(alpha1: f32, alpha2: f32) -> Result<Self> {
        for (name, v) in [("alpha1", alpha1), ("alpha2", alpha2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        Ok(Self { alpha1, alpha2 })
    }

    pub fn alpha1(&self) -> f32 {
        self.alpha1
    }

    pub fn alpha2(&self) -> f32 {
        self.alpha2
    }

    pub fn is_zero(&self) -> bool {
        self.alpha1 == 0.0 && self.alpha2 == 0.0
    }
}

/// Per-head full attention maps; blocks are sliced out on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionPartition {
    layout: TokenLayout,
    maps: Vec<Tensor2D>,
}

impl AttentionPartition {
    /// Normalises raw per-head logits (`L × L`) with the given scale.
    /// Entries may be −∞ to exclude keys.
    pub fn from_logits(layout: TokenLayout, logits: &[Tensor2D], scale: f32) -> Result<Self> {
        let l = layout.total();
        if logits.is_empty() {
            return Err(Error::InvalidArgument("no heads".into()));
        }
        if let Some(bad) = logits.iter().find(|t| t.rows() != l || t.cols() != l) {
            return Err(Error::shape(format!(
                "logits {}x{} for a sequence of {l}",
                bad.rows(),
                bad.cols()
            )));
        }
        let maps = logits.iter().map(|t| row_softmax(t, scale)).collect();
        Ok(Self { layout, maps })
    }

    pub fn layout(&self) -> TokenLayout {
        self.layout
    }

    pub fn num_heads(&self) -> usize {
        self.maps.len()
    }

    /// Full `L × L` map of one head.
    pub fn map(&self, head: usize) -> &Tensor2D {
        &self.maps[head]
    }

    /// `A[query][key]` of one head.
    pub fn block(&self, head: usize, query: Segment, key: Segment) -> Tensor2D {
        self.maps[head].block(self.layout.range(query), self.layout.range(key))
    }

    /// Sum of one row's entries inside a key segment, accumulated left to right.
    pub(crate) fn segment_mass(&self, head: usize, row: usize, key: Segment) -> f64 {
        let mut acc = 0.0f64;
        for &v in &self.maps[head].row(row)[self.layout.range(key)] {
            acc += f64::from(v);
        }
        acc
    }
}

/// Per target row and head, the softmax mass on each segment.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaTriplet {
    heads: Vec<Vec<[f32; 3]>>,
}

impl AlphaTriplet {
    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn rows(&self) -> usize {
        self.heads.first().map_or(0, Vec::len)
    }

    /// `[α_p, α_c, α_s]` for target row `row` (0-based within the target segment).
    pub fn get(&self, head: usize, row: usize) -> [f32; 3] {
        self.heads[head][row]
    }

    pub fn set(&mut self, head: usize, row: usize, value: [f32; 3]) {
        self.heads[head][row] = value;
    }

    /// Average over target rows, in f64.
    pub fn mean(&self, head: usize) -> [f64; 3] {
        let rows = &self.heads[head];
        let mut acc = [0.0f64; 3];
        for r in rows {
            for k in 0..3 {
                acc[k] += f64::from(r[k]);
            }
        }
        acc.map(|v| v / rows.len() as f64)
    }
}

/// Segment-local attention outputs of the target rows for one head.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryComponents {
    pub demo_p: Tensor2D,
    pub demo_c: Tensor2D,
    pub query: Tensor2D,
}

/// The three-way split of every head's target rows plus the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub components: Vec<QueryComponents>,
    pub alphas: AlphaTriplet,
}

impl Decomposition {
    /// `α_p·h(demo_p) + α_c·h(demo_c) + α_s·h(query)` for one head.
    pub fn recombine(&self, head: usize) -> Tensor2D {
        let c = &self.components[head];
        let mut out = Tensor2D::zeros(c.query.rows(), c.query.cols());
        for r in 0..out.rows() {
            let [ap, ac, asf] = self.alphas.get(head, r);
            let (p, cc, q) = (c.demo_p.row(r), c.demo_c.row(r), c.query.row(r));
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = ap * p[j] + ac * cc[j] + asf * q[j];
            }
        }
        out
    }
}

/// Pre-projection attention outputs, one `L × head_dim` matrix per head.
///
/// Edits to the target rows are held as a separate additive term, so
/// `ĥ_s − h_s` is available without differencing.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    layout: TokenLayout,
    heads: Vec<Tensor2D>,
    decomposition: Option<Decomposition>,
    target_edit: Option<Vec<Tensor2D>>,
}

impl HiddenStates {
    pub fn layout(&self) -> TokenLayout {
        self.layout
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// All rows of one head, edits applied.
    pub fn head(&self, head: usize) -> Tensor2D {
        match &self.target_edit {
            None => self.heads[head].clone(),
            Some(edit) => {
                let mut out = self.heads[head].clone();
                let s = self.layout.range(Segment::Target);
                let target = out
                    .slice_rows(s.clone())
                    .add(&edit[head])
                    .expect("edit matches target rows");
                out.write_rows(s.start, &target);
                out
            }
        }
    }

    /// One segment's rows of one head (`h_p`, `h_c` or `h_s`), edits applied.
    pub fn segment(&self, head: usize, seg: Segment) -> Tensor2D {
        let rows = self.heads[head].slice_rows(self.layout.range(seg));
        match (&self.target_edit, seg) {
            (Some(edit), Segment::Target) => {
                rows.add(&edit[head]).expect("edit matches target rows")
            }
            _ => rows,
        }
    }

    /// Accumulated additive edit of one head's target rows, if any.
    pub fn target_edit(&self, head: usize) -> Option<&Tensor2D> {
        self.target_edit.as_ref().map(|e| &e[head])
    }

    pub fn decomposition(&self) -> Option<&Decomposition> {
        self.decomposition.as_ref()
    }

    /// Heads concatenated along columns: `L × model_dim`.
    pub fn merged(&self) -> Tensor2D {
        let heads: Vec<Tensor2D> = (0..self.num_heads()).map(|h| self.head(h)).collect();
        let refs: Vec<&Tensor2D> = heads.iter().collect();
        Tensor2D::hstack(&refs).expect("heads share a row count")
    }

    /// One segment's rows of all heads concatenated along columns.
    pub fn merged_segment(&self, seg: Segment) -> Tensor2D {
        self.merged().slice_rows(self.layout.range(seg))
    }
}

/// Hidden states plus the `W_o` projection of their merged form.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub hidden: HiddenStates,
    pub projected: Tensor2D,
}

/// Per-head value matrices `X W_v`, `L × head_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueSegments {
    layout: TokenLayout,
    heads: Vec<Tensor2D>,
}

impl ValueSegments {
    pub fn segment(&self, head: usize, seg: Segment) -> Tensor2D {
        self.heads[head].slice_rows(self.layout.range(seg))
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }
}

/// Raw and min-max normalised prompt→target activation per head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadActivation {
    raw: Vec<f32>,
    normalized: Vec<f32>,
}

impl HeadActivation {
    /// Normalises `raw` to `[0, 1]`. When all values are equal every head gets 1.
    pub fn from_raw(raw: Vec<f32>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::InvalidArgument("no heads".into()));
        }
        let min = raw.iter().copied().fold(f32::INFINITY, f32::min);
        let max = raw.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let normalized = if max == min {
            vec![1.0; raw.len()]
        } else {
            let span = max - min;
            raw.iter().map(|v| (v - min) / span).collect()
        };
        Ok(Self { raw, normalized })
    }

    /// Uses `normalized` directly as the per-head weights.
    pub fn from_weights(normalized: Vec<f32>) -> Self {
        Self {
            raw: normalized.clone(),
            normalized,
        }
    }

    pub fn raw(&self) -> &[f32] {
        &self.raw
    }

    pub fn normalized(&self) -> &[f32] {
        &self.normalized
    }
}

struct HeadInputs {
    q: Tensor2D,
    k: Tensor2D,
    v: Tensor2D,
}

fn check_input(x: &Tensor2D, layout: &TokenLayout, w: &AttentionWeights) -> Result<()> {
    if x.rows() != layout.total() || x.cols() != w.model_dim() {
        return Err(Error::shape(format!(
            "input is {}x{}, layout needs {} rows and weights {} columns",
            x.rows(),
            x.cols(),
            layout.total(),
            w.model_dim()
        )));
    }
    Ok(())
}

fn project_heads(x: &Tensor2D, w: &AttentionWeights) -> Result<Vec<HeadInputs>> {
    let q = matmul(x, &w.w_q)?;
    let k = matmul(x, &w.w_k)?;
    let v = matmul(x, &w.w_v)?;
    Ok((0..w.num_heads)
        .map(|h| {
            let cols = w.head_cols(h);
            HeadInputs {
                q: q.slice_cols(cols.clone()),
                k: k.slice_cols(cols.clone()),
                v: v.slice_cols(cols),
            }
        })
        .collect())
}

/// Everything one attention pass produces.
struct Pass {
    partition: AttentionPartition,
    values: ValueSegments,
    hidden: HiddenStates,
}

fn attention_pass(
    x: &Tensor2D,
    layout: TokenLayout,
    w: &AttentionWeights,
    decompose: bool,
) -> Result<Pass> {
    check_input(x, &layout, w)?;
    let inputs = project_heads(x, w)?;
    let logits: Vec<Tensor2D> = inputs
        .iter()
        .map(|hi| matmul_transposed(&hi.q, &hi.k))
        .collect::<Result<_>>()?;
    let partition = AttentionPartition::from_logits(layout, &logits, w.logit_scale)?;
    let values = ValueSegments {
        layout,
        heads: inputs.into_iter().map(|hi| hi.v).collect(),
    };
    let heads = (0..w.num_heads)
        .map(|h| matmul(partition.map(h), &values.heads[h]))
        .collect::<Result<Vec<_>>>()?;
    let decomposition = if decompose {
        Some(decompose_logits(
            &partition,
            &logits,
            &values,
            w.logit_scale,
        )?)
    } else {
        None
    };
    Ok(Pass {
        partition,
        values,
        hidden: HiddenStates {
            layout,
            heads,
            decomposition,
            target_edit: None,
        },
    })
}

/// Segment-local softmax attention of the target rows against each key
/// segment, with weights taken from the joint partition.
fn decompose_logits(
    partition: &AttentionPartition,
    logits: &[Tensor2D],
    values: &ValueSegments,
    scale: f32,
) -> Result<Decomposition> {
    let layout = partition.layout;
    let s_rows = layout.range(Segment::Target);
    let mut components = Vec::with_capacity(logits.len());
    for (h, lg) in logits.iter().enumerate() {
        let local = |key: Segment| -> Result<Tensor2D> {
            let weights = row_softmax(&lg.block(s_rows.clone(), layout.range(key)), scale);
            matmul(&weights, &values.segment(h, key))
        };
        components.push(QueryComponents {
            demo_p: local(Segment::Prompt)?,
            demo_c: local(Segment::Reference)?,
            query: local(Segment::Target)?,
        });
    }
    Ok(Decomposition {
        components,
        alphas: compute_alphas(partition),
    })
}

/// Multi-head softmax attention over the whole sequence.
pub fn joint_attention(
    x: &Tensor2D,
    layout: TokenLayout,
    w: &AttentionWeights,
) -> Result<AttentionOutput> {
    let pass = attention_pass(x, layout, w, false)?;
    let projected = matmul(&pass.hidden.merged(), &w.w_o)?;
    Ok(AttentionOutput {
        hidden: pass.hidden,
        projected,
    })
}

/// The jointly normalised attention maps of every head.
pub fn partition_attention(
    x: &Tensor2D,
    layout: TokenLayout,
    w: &AttentionWeights,
) -> Result<AttentionPartition> {
    Ok(attention_pass(x, layout, w, false)?.partition)
}

/// Per-head values `X W_v`.
pub fn value_segments(
    x: &Tensor2D,
    layout: TokenLayout,
    w: &AttentionWeights,
) -> Result<ValueSegments> {
    check_input(x, &layout, w)?;
    let v = matmul(x, &w.w_v)?;
    Ok(ValueSegments {
        layout,
        heads: (0..w.num_heads)
            .map(|h| v.slice_cols(w.head_cols(h)))
            .collect(),
    })
}

/// Row sums of `A[s][p]`, `A[s][c]`, `A[s][s]` for each target row.
pub fn compute_alphas(partition: &AttentionPartition) -> AlphaTriplet {
    let s_rows = partition.layout.range(Segment::Target);
    let heads = (0..partition.num_heads())
        .map(|h| {
            s_rows
                .clone()
                .map(|r| {
                    let mass = Segment::ALL.map(|seg| partition.segment_mass(h, r, seg));
                    let total = mass[0] + mass[1] + mass[2];
                    mass.map(|m| (m / total) as f32)
                })
                .collect()
        })
        .collect();
    AlphaTriplet { heads }
}

/// Joint attention with the target rows also split into demo/query parts.
pub fn decompose_hs(
    x: &Tensor2D,
    layout: TokenLayout,
    w: &AttentionWeights,
) -> Result<HiddenStates> {
    Ok(attention_pass(x, layout, w, true)?.hidden)
}

/// `α₁ A[s][p] v_p + α₂ A[s][c] v_c` per head (`L_s × head_dim`). Terms with
/// a zero strength are omitted rather than multiplied by zero.
pub fn shift_delta(
    partition: &AttentionPartition,
    values: &ValueSegments,
    cfg: ShiftConfig,
) -> Result<Vec<Tensor2D>> {
    if partition.num_heads() != values.num_heads() {
        return Err(Error::shape(format!(
            "{} attention heads vs {} value heads",
            partition.num_heads(),
            values.num_heads()
        )));
    }
    let layout = partition.layout;
    (0..partition.num_heads())
        .map(|h| {
            let mut delta: Option<Tensor2D> = None;
            for (strength, key) in [
                (cfg.alpha1, Segment::Prompt),
                (cfg.alpha2, Segment::Reference),
            ] {
                if strength == 0.0 {
                    continue;
                }
                let term = matmul(
                    &partition.block(h, Segment::Target, key),
                    &values.segment(h, key),
                )?
                .scale(strength);
                delta = Some(match delta {
                    Some(d) => d.add(&term)?,
                    None => term,
                });
            }
            Ok(delta.unwrap_or_else(|| {
                Tensor2D::zeros(layout.len(Segment::Target), values.heads[h].cols())
            }))
        })
        .collect()
}

/// Adds the shift term to the target rows of every head. Prompt and
/// reference rows are left untouched; `(0, 0)` returns an exact copy.
pub fn shift_inject(
    hidden: &HiddenStates,
    partition: &AttentionPartition,
    values: &ValueSegments,
    cfg: ShiftConfig,
) -> Result<HiddenStates> {
    let mut out = hidden.clone();
    if cfg.is_zero() {
        return Ok(out);
    }
    if hidden.num_heads() != partition.num_heads() {
        return Err(Error::shape(
            "head count mismatch between hidden states and partition",
        ));
    }
    let deltas = shift_delta(partition, values, cfg)?;
    apply_target_delta(&mut out, &deltas)?;
    Ok(out)
}

fn apply_target_delta(hidden: &mut HiddenStates, deltas: &[Tensor2D]) -> Result<()> {
    hidden.target_edit = Some(match hidden.target_edit.take() {
        None => deltas.to_vec(),
        Some(edit) => edit
            .iter()
            .zip(deltas)
            .map(|(e, d)| e.add(d))
            .collect::<Result<Vec<_>>>()?,
    });
    Ok(())
}

/// Entry sum of each head's `A[p][s]` block, min-max normalised across heads.
pub fn head_activation(partition: &AttentionPartition) -> HeadActivation {
    let layout = partition.layout;
    let raw = (0..partition.num_heads())
        .map(|h| {
            let mut acc = 0.0f32;
            for r in layout.range(Segment::Prompt) {
                for &v in &partition.map(h).row(r)[layout.range(Segment::Target)] {
                    acc += v;
                }
            }
            acc
        })
        .collect();
    HeadActivation::from_raw(raw).expect("partition has at least one head")
}

/// Scales each head's `h(query)` by its normalised activation and rebuilds
/// the target rows as `α_p h(demo_p) + α_c h(demo_c) + α_s V̂_h h(query)`.
/// Any shift already applied is kept. Heads with weight exactly 1 are left
/// bit-identical.
pub fn reweight_query(hidden: &HiddenStates, act: &HeadActivation) -> Result<HiddenStates> {
    let Some(dec) = hidden.decomposition.as_ref() else {
        return Err(Error::InvalidArgument(
            "reweighting needs decomposed hidden states".into(),
        ));
    };
    if act.normalized.len() != hidden.num_heads() {
        return Err(Error::shape(format!(
            "{} head weights for {} heads",
            act.normalized.len(),
            hidden.num_heads()
        )));
    }
    let mut out = hidden.clone();
    let start = hidden.layout.offset(Segment::Target);
    for (h, &weight) in act.normalized.iter().enumerate() {
        if weight == 1.0 {
            continue;
        }
        let new_dec = out
            .decomposition
            .as_mut()
            .expect("cloned with decomposition");
        new_dec.components[h].query = dec.components[h].query.scale(weight);
        let rows = new_dec.recombine(h);
        out.heads[h].write_rows(start, &rows);
    }
    Ok(out)
}

/// Which attention edits a block applies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MechanismFlags {
    pub shift: bool,
    pub reweight: bool,
}

impl MechanismFlags {
    pub const OFF: MechanismFlags = MechanismFlags {
        shift: false,
        reweight: false,
    };
    pub const ALL: MechanismFlags = MechanismFlags {
        shift: true,
        reweight: true,
    };
}

/// One transformer block: pre-norm joint attention and a GELU feed-forward,
/// each with a residual connection.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub attention: AttentionWeights,
    pub norm1_gain: Vec<f32>,
    pub norm1_bias: Vec<f32>,
    pub norm2_gain: Vec<f32>,
    pub norm2_bias: Vec<f32>,
    pub ff_in: Tensor2D,
    pub ff_in_bias: Vec<f32>,
    pub ff_out: Tensor2D,
    pub ff_out_bias: Vec<f32>,
}

pub const NORM_EPS: f32 = 1e-5;

impl BlockWeights {
    pub fn random(
        model_dim: usize,
        num_heads: usize,
        ff_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let attention = AttentionWeights::random(model_dim, num_heads, rng)?;
        let ff_in = gaussian(model_dim, ff_dim, 1.0 / (model_dim as f32).sqrt(), rng);
        let ff_out = gaussian(ff_dim, model_dim, 1.0 / (ff_dim as f32).sqrt(), rng);
        Ok(Self {
            attention,
            norm1_gain: vec![1.0; model_dim],
            norm1_bias: vec![0.0; model_dim],
            norm2_gain: vec![1.0; model_dim],
            norm2_bias: vec![0.0; model_dim],
            ff_in,
            ff_in_bias: vec![0.0; ff_dim],
            ff_out,
            ff_out_bias: vec![0.0; model_dim],
        })
    }

    pub fn model_dim(&self) -> usize {
        self.attention.model_dim()
    }
}

/// Diagnostics recorded while running a block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTrace {
    /// Mean `[α_p, α_c, α_s]` over target rows, per head.
    pub alpha_means: Vec<[f64; 3]>,
    pub activation: HeadActivation,
    /// `‖ĥ_s − h_s‖_F` of the shift term over all heads; 0 when no shift ran.
    pub shift_norm: f64,
}

pub fn block_forward(
    x: &Tensor2D,
    layout: TokenLayout,
    w: &BlockWeights,
    cfg: ShiftConfig,
    flags: MechanismFlags,
) -> Result<Tensor2D> {
    Ok(block_forward_traced(x, layout, w, cfg, flags)?.0)
}

pub fn block_forward_traced(
    x: &Tensor2D,
    layout: TokenLayout,
    w: &BlockWeights,
    cfg: ShiftConfig,
    flags: MechanismFlags,
) -> Result<(Tensor2D, BlockTrace)> {
    let normed = layer_norm(x, &w.norm1_gain, &w.norm1_bias, NORM_EPS)?;
    let pass = attention_pass(&normed, layout, &w.attention, flags.reweight)?;
    let activation = head_activation(&pass.partition);
    let alphas = compute_alphas(&pass.partition);
    let mut hidden = pass.hidden;
    if flags.reweight {
        hidden = reweight_query(&hidden, &activation)?;
    }
    let mut shift_norm = 0.0;
    if flags.shift && !cfg.is_zero() {
        let deltas = shift_delta(&pass.partition, &pass.values, cfg)?;
        shift_norm = deltas
            .iter()
            .map(|d| d.frobenius_norm().powi(2))
            .sum::<f64>()
            .sqrt();
        apply_target_delta(&mut hidden, &deltas)?;
    }

    let attn = matmul(&hidden.merged(), w.attention.w_o())?;
    let resid = x.add(&attn)?;
    let out = feed_forward_residual(&resid, w)?;
    let trace = BlockTrace {
        alpha_means: (0..alphas.num_heads()).map(|h| alphas.mean(h)).collect(),
        activation,
        shift_norm,
    };
    Ok((out, trace))
}

fn feed_forward_residual(x: &Tensor2D, w: &BlockWeights) -> Result<Tensor2D> {
    let normed = layer_norm(x, &w.norm2_gain, &w.norm2_bias, NORM_EPS)?;
    let mut hidden = matmul(&normed, &w.ff_in)?;
    hidden.add_row_vector(&w.ff_in_bias)?;
    let hidden = hidden.map(gelu);
    let mut out = matmul(&hidden, &w.ff_out)?;
    out.add_row_vector(&w.ff_out_bias)?;
    x.add(&out)
}
