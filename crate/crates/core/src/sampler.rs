//! Rectified-flow Euler sampling over the side-by-side latent with per-step
//! token blending.
//!
//! Latents follow `x_t = (1 − t)·x_0 + t·ε`. Sampling starts from `ε` at
//! `t = 1` and walks a uniform schedule down to `t = 0`. After each step,
//! tokens outside the extended mask are replaced by the clean input noised to
//! the new time, so the background trajectory never drifts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::BlockTrace;
use crate::error::{Error, Result};
use crate::layout::{
    apply_reference_mask, extend_mask, image_sequence, make_layout, positional_embedding,
    sequence_mask, unflatten_tokens, BinaryMask, LatentGrid, PromptTokens, Segment, TokenLayout,
};
use crate::model::{Mechanisms, VelocityNet};
use crate::numerics::Tensor2D;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
    pub blend: bool,
    /// Add the noised background to `M·w_out` without masking the noise.
    pub literal_blend: bool,
}

impl SamplerConfig {
    pub fn new(steps: usize, seed: u64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("steps must be at least 1".into()));
        }
        Ok(Self {
            steps,
            seed,
            blend: true,
            literal_blend: false,
        })
    }

    /// `steps + 1` times from exactly 1 down to exactly 0.
    pub fn schedule(&self) -> Vec<f32> {
        let n = self.steps as f32;
        (0..=self.steps).rev().map(|k| k as f32 / n).collect()
    }
}

/// Loop state shared by the step functions.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseState {
    pub w: Tensor2D,
    pub t: f32,
    /// Extended mask per image token, in sequence order.
    pub mask: Vec<bool>,
    pub noise: Tensor2D,
    pub clean: Tensor2D,
    pub literal_blend: bool,
}

impl DenoiseState {
    /// Validates shapes and that no reference token (the first `len_ref`) is masked.
    pub fn new(
        w: Tensor2D,
        t: f32,
        mask: Vec<bool>,
        noise: Tensor2D,
        clean: Tensor2D,
        len_ref: usize,
    ) -> Result<Self> {
        for (name, m) in [("noise", &noise), ("clean", &clean)] {
            if m.rows() != w.rows() || m.cols() != w.cols() {
                return Err(Error::shape(format!(
                    "{name} is {}x{}, latent is {}x{}",
                    m.rows(),
                    m.cols(),
                    w.rows(),
                    w.cols()
                )));
            }
        }
        if mask.len() != w.rows() {
            return Err(Error::shape(format!(
                "{} mask entries for {} tokens",
                mask.len(),
                w.rows()
            )));
        }
        if mask.iter().take(len_ref).any(|&b| b) {
            return Err(Error::InvalidArgument(
                "mask must be zero over the reference".into(),
            ));
        }
        Ok(Self {
            w,
            t,
            mask,
            noise,
            clean,
            literal_blend: false,
        })
    }
}

/// `(1 − t)·clean + t·eps`, returning the endpoints verbatim at `t = 0` and `t = 1`.
pub fn noised_latent(clean: &Tensor2D, eps: &Tensor2D, t: f32) -> Result<Tensor2D> {
    if clean.rows() != eps.rows() || clean.cols() != eps.cols() {
        return Err(Error::shape(format!(
            "clean {}x{} vs noise {}x{}",
            clean.rows(),
            clean.cols(),
            eps.rows(),
            eps.cols()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t = {t} outside [0, 1]")));
    }
    if t == 0.0 {
        return Ok(clean.clone());
    }
    if t == 1.0 {
        return Ok(eps.clone());
    }
    let keep = 1.0 - t;
    let data = clean
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&c, &e)| keep * c + t * e)
        .collect();
    Tensor2D::from_vec(clean.rows(), clean.cols(), data)
}

/// `w − dt·v`.
pub fn euler_step(state: &DenoiseState, velocity: &Tensor2D, dt: f32) -> Result<Tensor2D> {
    if dt.is_nan() || dt <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "dt must be positive, got {dt}"
        )));
    }
    if velocity.rows() != state.w.rows() || velocity.cols() != state.w.cols() {
        return Err(Error::shape("velocity and latent differ in shape"));
    }
    let data = state
        .w
        .data()
        .iter()
        .zip(velocity.data())
        .map(|(&w, &v)| w - dt * v)
        .collect();
    Tensor2D::from_vec(state.w.rows(), state.w.cols(), data)
}

/// Keeps masked tokens from `w_out` and replaces the rest with the clean
/// input noised to `t_next`. In literal mode masked tokens instead become
/// `t_next·ε + w_out`.
pub fn token_blend(w_out: &Tensor2D, state: &DenoiseState, t_next: f32) -> Result<Tensor2D> {
    if w_out.rows() != state.clean.rows() || w_out.cols() != state.clean.cols() {
        return Err(Error::shape("model output and clean input differ in shape"));
    }
    let background = noised_latent(&state.clean, &state.noise, t_next)?;
    let mut out = background.clone();
    for (r, &masked) in state.mask.iter().enumerate() {
        if !masked {
            continue;
        }
        if state.literal_blend {
            for ((o, &e), &m) in out
                .row_mut(r)
                .iter_mut()
                .zip(state.noise.row(r))
                .zip(w_out.row(r))
            {
                *o = t_next * e + m;
            }
        } else {
            out.row_mut(r).copy_from_slice(w_out.row(r));
        }
    }
    Ok(out)
}

/// Everything a sampling run consumes besides the model.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineInputs {
    pub prompt: PromptTokens,
    pub reference: LatentGrid,
    pub target: LatentGrid,
    /// Insertion region over the target grid.
    pub mask: BinaryMask,
    /// Subject region over the reference grid; tokens outside it are zeroed.
    pub reference_mask: Option<BinaryMask>,
}

impl PipelineInputs {
    pub fn layout(&self) -> Result<TokenLayout> {
        make_layout(&self.prompt, &self.reference, &self.target)
    }

    /// Reference with the subject mask applied.
    pub fn clean_reference(&self) -> Result<LatentGrid> {
        match &self.reference_mask {
            Some(m) => apply_reference_mask(&self.reference, m),
            None => Ok(self.reference.clone()),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.mask.height() != self.target.height() || self.mask.width() != self.target.width() {
            return Err(Error::shape(format!(
                "mask {}x{} for a {}x{} target",
                self.mask.height(),
                self.mask.width(),
                self.target.height(),
                self.target.width()
            )));
        }
        if self.reference.height() != self.target.height() {
            return Err(Error::shape("reference and target heights differ"));
        }
        Ok(())
    }
}

/// One completed step, handed to the observer.
pub struct StepRecord<'a> {
    pub step: usize,
    pub t_next: f32,
    /// Image tokens after the update (and blend, when enabled).
    pub tokens: &'a Tensor2D,
    pub state: &'a DenoiseState,
}

#[derive(Clone, Debug)]
pub struct SamplingOutput {
    /// Final target region.
    pub generated: LatentGrid,
    /// Final reference region.
    pub reference: LatentGrid,
    /// `[step][block]`.
    pub traces: Vec<Vec<BlockTrace>>,
}

/// Seeded standard-normal noise for the image tokens.
pub fn sample_noise(rows: usize, cols: usize, seed: u64) -> Tensor2D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Tensor2D::from_vec(rows, cols, data).expect("length matches")
}

pub fn run_sampling(
    inputs: &PipelineInputs,
    model: &VelocityNet,
    cfg: &SamplerConfig,
    mech: &Mechanisms,
) -> Result<SamplingOutput> {
    run_sampling_observed(inputs, model, cfg, mech, &mut |_| {})
}

pub fn run_sampling_observed(
    inputs: &PipelineInputs,
    model: &VelocityNet,
    cfg: &SamplerConfig,
    mech: &Mechanisms,
    observer: &mut dyn FnMut(&StepRecord<'_>),
) -> Result<SamplingOutput> {
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    inputs.validate()?;
    let layout = inputs.layout()?;
    let dims = model.dims();
    if inputs.prompt.channels() != dims.channels {
        return Err(Error::shape(format!(
            "inputs have {} channels, model expects {}",
            inputs.prompt.channels(),
            dims.channels
        )));
    }

    let reference = inputs.clean_reference()?;
    let clean = image_sequence(&reference, &inputs.target)?;
    let extended = extend_mask(&inputs.mask, (reference.height(), reference.width()))?;
    let mask = sequence_mask(&extended, reference.width())?;
    let positions = Tensor2D::vstack(&[
        &positional_embedding(reference.height(), reference.width(), 0, dims.model_dim),
        &positional_embedding(
            inputs.target.height(),
            inputs.target.width(),
            reference.width(),
            dims.model_dim,
        ),
    ])?;

    let noise = sample_noise(clean.rows(), clean.cols(), cfg.seed);
    let mut state = DenoiseState::new(
        noise.clone(),
        1.0,
        mask,
        noise,
        clean,
        layout.len(Segment::Reference),
    )?;
    state.literal_blend = cfg.literal_blend;

    let schedule = cfg.schedule();
    let mut traces = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (t, t_next) = (schedule[step], schedule[step + 1]);
        state.t = t;
        let mut step_trace = Vec::with_capacity(dims.blocks);
        let velocity = model.forward(
            inputs.prompt.embeddings(),
            &state.w,
            &positions,
            t,
            layout,
            mech,
            Some(&mut step_trace),
        )?;
        let w_out = euler_step(&state, &velocity, t - t_next)?;
        state.w = if cfg.blend {
            token_blend(&w_out, &state, t_next)?
        } else {
            w_out
        };
        state.t = t_next;
        traces.push(step_trace);
        observer(&StepRecord {
            step,
            t_next,
            tokens: &state.w,
            state: &state,
        });
    }

    let ref_rows = layout.len(Segment::Reference);
    let reference_out = unflatten_tokens(
        &state.w.slice_rows(0..ref_rows),
        reference.height(),
        reference.width(),
    )?;
    let generated = unflatten_tokens(
        &state.w.slice_rows(ref_rows..state.w.rows()),
        inputs.target.height(),
        inputs.target.width(),
    )?;
    Ok(SamplingOutput {
        generated,
        reference: reference_out,
        traces,
    })
}
