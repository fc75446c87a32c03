//! Toy velocity network: a stack of joint-attention blocks between a latent
//! embedding and a linear head. Weights come from a seeded initializer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    block_forward_traced, gaussian, BlockTrace, BlockWeights, MechanismFlags, ShiftConfig, NORM_EPS,
};
use crate::error::{Error, Result};
use crate::layout::TokenLayout;
use crate::numerics::{layer_norm, matmul, Tensor2D};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub channels: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_dim: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0
            || self.model_dim == 0
            || self.heads == 0
            || self.blocks == 0
            || self.ff_dim == 0
        {
            return Err(Error::InvalidArgument(format!(
                "model dims must be positive: {self:?}"
            )));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Which blocks apply which attention edits.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mechanisms {
    pub shift: ShiftConfig,
    pub flags: MechanismFlags,
    /// Blocks the edits apply to; `None` means every block.
    pub enabled_blocks: Option<Vec<usize>>,
}

impl Mechanisms {
    pub fn off() -> Self {
        Self::default()
    }

    pub fn flags_for(&self, block: usize) -> MechanismFlags {
        match &self.enabled_blocks {
            Some(list) if !list.contains(&block) => MechanismFlags::OFF,
            _ => self.flags,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNet {
    dims: ModelDims,
    latent_in: Tensor2D,
    latent_in_bias: Vec<f32>,
    prompt_in: Tensor2D,
    prompt_in_bias: Vec<f32>,
    blocks: Vec<BlockWeights>,
    final_gain: Vec<f32>,
    final_bias: Vec<f32>,
    head: Tensor2D,
    head_bias: Vec<f32>,
}

impl VelocityNet {
    pub fn seeded(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, d) = (dims.channels, dims.model_dim);
        let in_std = 1.0 / (c as f32).sqrt();
        let latent_in = gaussian(c, d, in_std, &mut rng);
        let prompt_in = gaussian(c, d, in_std, &mut rng);
        let blocks = (0..dims.blocks)
            .map(|_| BlockWeights::random(d, dims.heads, dims.ff_dim, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head = gaussian(d, c, 1.0 / (d as f32).sqrt(), &mut rng);
        Ok(Self {
            dims,
            latent_in,
            latent_in_bias: vec![0.0; d],
            prompt_in,
            prompt_in_bias: vec![0.0; d],
            blocks,
            final_gain: vec![1.0; d],
            final_bias: vec![0.0; d],
            head,
            head_bias: vec![0.0; c],
        })
    }

    /// Overrides the attention logit scale in every block.
    pub fn with_logit_scale(mut self, scale: f32) -> Result<Self> {
        if !scale.is_finite() || scale <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "logit scale must be positive, got {scale}"
            )));
        }
        for b in &mut self.blocks {
            b.attention = b.attention.clone().with_logit_scale(scale);
        }
        Ok(self)
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn blocks(&self) -> &[BlockWeights] {
        &self.blocks
    }

    /// Predicted velocity for the image tokens (`L_img × channels`).
    ///
    /// `positions` holds one embedding row per image token. When `trace` is
    /// given, one [`BlockTrace`] per block is appended to it.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        prompt: &Tensor2D,
        image: &Tensor2D,
        positions: &Tensor2D,
        t: f32,
        layout: TokenLayout,
        mech: &Mechanisms,
        mut trace: Option<&mut Vec<BlockTrace>>,
    ) -> Result<Tensor2D> {
        if image.rows() != layout.image_tokens() || positions.rows() != image.rows() {
            return Err(Error::shape(format!(
                "{} image tokens and {} positions for layout {:?}",
                image.rows(),
                positions.rows(),
                layout.lens()
            )));
        }
        let mut p = matmul(prompt, &self.prompt_in)?;
        p.add_row_vector(&self.prompt_in_bias)?;
        let mut img = matmul(image, &self.latent_in)?;
        img.add_row_vector(&self.latent_in_bias)?;
        img.add_assign(positions)?;

        let mut x = Tensor2D::vstack(&[&p, &img])?;
        x.add_row_vector(&time_embedding(t, self.dims.model_dim))?;
        for (i, block) in self.blocks.iter().enumerate() {
            let (next, bt) =
                block_forward_traced(&x, layout, block, mech.shift, mech.flags_for(i))?;
            x = next;
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(bt);
            }
        }
        let x = layer_norm(&x, &self.final_gain, &self.final_bias, NORM_EPS)?;
        let img = x.slice_rows(layout.len(crate::layout::Segment::Prompt)..layout.total());
        let mut v = matmul(&img, &self.head)?;
        v.add_row_vector(&self.head_bias)?;
        Ok(v)
    }
}

/// Sinusoidal embedding of `1000·t`.
pub fn time_embedding(t: f32, dim: usize) -> Vec<f32> {
    let half = (dim / 2).max(1) as f32;
    let pos = 1000.0 * t;
    (0..dim)
        .map(|j| {
            let freq = libm::powf(10_000.0, -((j / 2) as f32) / half);
            if j % 2 == 0 {
                libm::sinf(pos * freq)
            } else {
                libm::cosf(pos * freq)
            }
        })
        .collect()
}
