//! Latent-space identity proxy: cosine similarity of mean-pooled tokens.

use crate::error::{Error, Result};
use crate::layout::{BinaryMask, LatentGrid};
use crate::numerics::Tensor2D;

pub fn identity_proxy_score(output_region: &Tensor2D, reference_region: &Tensor2D) -> Result<f64> {
    if output_region.rows() == 0 || reference_region.rows() == 0 {
        return Err(Error::InvalidArgument(
            "proxy score needs non-empty regions".into(),
        ));
    }
    if output_region.cols() != reference_region.cols() {
        return Err(Error::shape(format!(
            "{} vs {} channels",
            output_region.cols(),
            reference_region.cols()
        )));
    }
    let a = mean_pool(output_region);
    let b = mean_pool(reference_region);
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedScore(
            "a pooled region has zero norm".into(),
        ));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn mean_pool(t: &Tensor2D) -> Vec<f64> {
    let mut acc = vec![0.0f64; t.cols()];
    for r in 0..t.rows() {
        for (a, &v) in acc.iter_mut().zip(t.row(r)) {
            *a += f64::from(v);
        }
    }
    let n = t.rows() as f64;
    acc.into_iter().map(|v| v / n).collect()
}

/// Tokens of `grid` where `mask` is set, in raster order.
pub fn masked_tokens(grid: &LatentGrid, mask: &BinaryMask) -> Result<Tensor2D> {
    if grid.height() != mask.height() || grid.width() != mask.width() {
        return Err(Error::shape("mask and grid dims differ"));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for r in 0..grid.height() {
        for c in 0..grid.width() {
            if mask.get(r, c) {
                data.extend_from_slice(grid.token(r, c));
                rows += 1;
            }
        }
    }
    Tensor2D::from_vec(rows, grid.channels(), data)
}
