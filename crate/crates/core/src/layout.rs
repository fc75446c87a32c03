//! In-context input construction: side-by-side reference/target grids, the
//! extended mask, and the `[prompt | reference | target]` token sequence.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::Tensor2D;

/// `height × width` tokens of `channels` floats each, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl LatentGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width}x{channels} grid",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn token_count(&self) -> usize {
        self.height * self.width
    }

    pub fn token(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn token_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Splits a side-by-side grid at column `left_width`.
    pub fn split_width(&self, left_width: usize) -> Result<(LatentGrid, LatentGrid)> {
        if left_width > self.width {
            return Err(Error::shape(format!(
                "cannot split width {} at column {left_width}",
                self.width
            )));
        }
        let mut left = LatentGrid::zeros(self.height, left_width, self.channels);
        let mut right = LatentGrid::zeros(self.height, self.width - left_width, self.channels);
        for r in 0..self.height {
            for c in 0..self.width {
                let src = self.token(r, c);
                if c < left_width {
                    left.token_mut(r, c).copy_from_slice(src);
                } else {
                    right.token_mut(r, c - left_width).copy_from_slice(src);
                }
            }
        }
        Ok((left, right))
    }
}

/// A `{0,1}` mask over a token grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!(
                "{} bits for a {height}x{width} mask",
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    /// Accepts only values that are exactly 0.0 or 1.0.
    pub fn from_f32(height: usize, width: usize, values: &[f32]) -> Result<Self> {
        let bits = values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v == 0.0 {
                    Ok(false)
                } else if v == 1.0 {
                    Ok(true)
                } else {
                    Err(Error::InvalidArgument(format!(
                        "mask entry {i} is {v}, expected 0 or 1"
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(height, width, bits)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.width + col] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Synthetic prompt embeddings, `count × channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTokens {
    embeddings: Tensor2D,
}

impl PromptTokens {
    pub fn new(embeddings: Tensor2D) -> Result<Self> {
        if embeddings.rows() == 0 {
            return Err(Error::InvalidArgument(
                "prompt needs at least one token".into(),
            ));
        }
        if !embeddings.is_finite() {
            return Err(Error::InvalidArgument(
                "prompt embeddings must be finite".into(),
            ));
        }
        Ok(Self { embeddings })
    }

    /// Standard-normal embeddings from a seeded generator.
    pub fn seeded(count: usize, channels: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..count * channels)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self::new(Tensor2D::from_vec(count, channels, data)?)
    }

    pub fn count(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn channels(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Tensor2D {
        &self.embeddings
    }
}

/// The three segments of the joint sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Segment {
    Prompt,
    Reference,
    Target,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::Prompt, Segment::Reference, Segment::Target];

    pub fn index(self) -> usize {
        match self {
            Segment::Prompt => 0,
            Segment::Reference => 1,
            Segment::Target => 2,
        }
    }

    pub fn tag(self) -> char {
        match self {
            Segment::Prompt => 'p',
            Segment::Reference => 'c',
            Segment::Target => 's',
        }
    }
}

/// Segment lengths and offsets of `[prompt | reference | target]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    len_prompt: usize,
    len_ref: usize,
    len_target: usize,
}

impl TokenLayout {
    /// All three segments must be non-empty.
    pub fn new(len_prompt: usize, len_ref: usize, len_target: usize) -> Result<Self> {
        if len_prompt == 0 || len_ref == 0 || len_target == 0 {
            return Err(Error::InvalidArgument(format!(
                "empty segment in layout ({len_prompt}, {len_ref}, {len_target})"
            )));
        }
        Ok(Self {
            len_prompt,
            len_ref,
            len_target,
        })
    }

    pub fn len(&self, seg: Segment) -> usize {
        match seg {
            Segment::Prompt => self.len_prompt,
            Segment::Reference => self.len_ref,
            Segment::Target => self.len_target,
        }
    }

    pub fn offset(&self, seg: Segment) -> usize {
        match seg {
            Segment::Prompt => 0,
            Segment::Reference => self.len_prompt,
            Segment::Target => self.len_prompt + self.len_ref,
        }
    }

    pub fn range(&self, seg: Segment) -> Range<usize> {
        let start = self.offset(seg);
        start..start + self.len(seg)
    }

    pub fn lens(&self) -> (usize, usize, usize) {
        (self.len_prompt, self.len_ref, self.len_target)
    }

    pub fn offsets(&self) -> (usize, usize, usize) {
        (
            self.offset(Segment::Prompt),
            self.offset(Segment::Reference),
            self.offset(Segment::Target),
        )
    }

    pub fn total(&self) -> usize {
        self.len_prompt + self.len_ref + self.len_target
    }

    /// Image tokens only (reference + target).
    pub fn image_tokens(&self) -> usize {
        self.len_ref + self.len_target
    }
}

/// Places `reference` left of `target`.
pub fn build_icl_input(reference: &LatentGrid, target: &LatentGrid) -> Result<LatentGrid> {
    if reference.height != target.height || reference.channels != target.channels {
        return Err(Error::shape(format!(
            "reference {}x{}x{} and target {}x{}x{} differ in height or channels",
            reference.height,
            reference.width,
            reference.channels,
            target.height,
            target.width,
            target.channels
        )));
    }
    let (h, c) = (reference.height, reference.channels);
    let width = reference.width + target.width;
    let mut out = LatentGrid::zeros(h, width, c);
    for r in 0..h {
        for col in 0..reference.width {
            out.token_mut(r, col)
                .copy_from_slice(reference.token(r, col));
        }
        for col in 0..target.width {
            out.token_mut(r, reference.width + col)
                .copy_from_slice(target.token(r, col));
        }
    }
    Ok(out)
}

/// Extends a target mask to the side-by-side grid: zeros over the reference
/// columns, `m` over the target columns.
pub fn extend_mask(m: &BinaryMask, ref_dims: (usize, usize)) -> Result<BinaryMask> {
    let (ref_h, ref_w) = ref_dims;
    if ref_h != m.height {
        return Err(Error::shape(format!(
            "reference height {ref_h} does not match mask height {}",
            m.height
        )));
    }
    let width = ref_w + m.width;
    let mut out = BinaryMask::zeros(m.height, width);
    for r in 0..m.height {
        for c in 0..m.width {
            out.set(r, ref_w + c, m.get(r, c));
        }
    }
    Ok(out)
}

/// Grid to `(height·width) × channels` in raster order.
pub fn flatten_tokens(grid: &LatentGrid) -> Tensor2D {
    Tensor2D::from_vec(grid.token_count(), grid.channels, grid.data.clone())
        .expect("grid invariant guarantees matching length")
}

/// Inverse of [`flatten_tokens`].
pub fn unflatten_tokens(tokens: &Tensor2D, height: usize, width: usize) -> Result<LatentGrid> {
    if tokens.rows() != height * width {
        return Err(Error::shape(format!(
            "{} tokens for a {height}x{width} grid",
            tokens.rows()
        )));
    }
    LatentGrid::new(height, width, tokens.cols(), tokens.data().to_vec())
}

pub fn make_layout(
    prompt: &PromptTokens,
    reference: &LatentGrid,
    target: &LatentGrid,
) -> Result<TokenLayout> {
    if prompt.channels() != reference.channels || reference.channels != target.channels {
        return Err(Error::shape(format!(
            "channel mismatch: prompt {}, reference {}, target {}",
            prompt.channels(),
            reference.channels,
            target.channels
        )));
    }
    TokenLayout::new(
        prompt.count(),
        reference.token_count(),
        target.token_count(),
    )
}

/// Zeroes reference tokens outside `subject`, standing in for background removal.
pub fn apply_reference_mask(reference: &LatentGrid, subject: &BinaryMask) -> Result<LatentGrid> {
    if subject.height != reference.height || subject.width != reference.width {
        return Err(Error::shape(format!(
            "reference mask {}x{} for a {}x{} reference",
            subject.height, subject.width, reference.height, reference.width
        )));
    }
    let mut out = reference.clone();
    for r in 0..reference.height {
        for c in 0..reference.width {
            if !subject.get(r, c) {
                out.token_mut(r, c).fill(0.0);
            }
        }
    }
    Ok(out)
}

/// Image tokens in sequence order: all reference tokens, then all target tokens.
pub fn image_sequence(reference: &LatentGrid, target: &LatentGrid) -> Result<Tensor2D> {
    Tensor2D::vstack(&[&flatten_tokens(reference), &flatten_tokens(target)])
}

/// Per image token in sequence order, whether the extended mask is set.
/// The side-by-side mask is `ref_width` columns of reference then target.
pub fn sequence_mask(extended: &BinaryMask, ref_width: usize) -> Result<Vec<bool>> {
    if ref_width > extended.width {
        return Err(Error::shape("reference wider than extended mask"));
    }
    let target_width = extended.width - ref_width;
    let mut out = Vec::with_capacity(extended.bits.len());
    for r in 0..extended.height {
        for c in 0..ref_width {
            out.push(extended.get(r, c));
        }
    }
    for r in 0..extended.height {
        for c in 0..target_width {
            out.push(extended.get(r, ref_width + c));
        }
    }
    Ok(out)
}

/// 2D sinusoidal position code of width `dim` for every token of an
/// `height × width` grid whose columns start at `col_offset` in the
/// side-by-side image. The first half of the channels encodes the row, the
/// second half the column.
pub fn positional_embedding(
    height: usize,
    width: usize,
    col_offset: usize,
    dim: usize,
) -> Tensor2D {
    let half = dim / 2;
    let mut out = Tensor2D::zeros(height * width, dim);
    for r in 0..height {
        for c in 0..width {
            let row = out.row_mut(r * width + c);
            encode_axis(&mut row[..half], r as f32);
            encode_axis(&mut row[half..2 * half], (c + col_offset) as f32);
        }
    }
    out
}

fn encode_axis(dst: &mut [f32], pos: f32) {
    let n = dst.len().max(1) as f32;
    for (j, d) in dst.iter_mut().enumerate() {
        let pair = (j / 2) as f32;
        let freq = libm::powf(10_000.0, -2.0 * pair / n);
        *d = if j % 2 == 0 {
            libm::sinf(pos * freq)
        } else {
            libm::cosf(pos * freq)
        };
    }
}
