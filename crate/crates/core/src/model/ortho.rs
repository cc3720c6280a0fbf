//! Projection of convolution kernels onto orthonormal matrices.
//!
//! A layer's weights form an `out_channels x fan_in` matrix `G`. The nearest
//! matrix with orthonormal rows (columns when `fan_in < out_channels`) in
//! Frobenius norm is the polar factor `U V^T` of `G = U S V^T`, computed here
//! as `(G G^T)^{-1/2} G` from the eigendecomposition of the small Gram matrix.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{DenoiserParams, Mode};
use crate::error::{Error, Result};
use crate::rng::{mix_seed, stream_rng};

/// Gram eigenvalues below this fraction of the largest mark a kernel as rank deficient.
const RANK_TOLERANCE: f64 = 1e-12;
const DEGENERATE_SEED: u64 = 0x6f72_7468_6f67_6f6e;

/// Returns a copy of `params` whose every kernel matrix is orthonormal.
///
/// Zero or rank-deficient kernels have no unique projection; they are replaced
/// by a random orthonormal matrix seeded from the layer index.
pub fn orthogonalize_kernels(params: &DenoiserParams) -> Result<DenoiserParams> {
    if params.mode != Mode::Train {
        return Err(Error::State("orthogonalization requires train-mode parameters".into()));
    }
    let mut out = params.clone();
    for (i, layer) in out.layers.iter_mut().enumerate() {
        let rows = layer.spec.out_channels;
        let cols = layer.spec.fan_in();
        let g = DMatrix::from_row_slice(rows, cols, &layer.weight);
        let projected = match polar_factor(&g) {
            Some(p) => p,
            None => {
                let mut rng = stream_rng(mix_seed(DEGENERATE_SEED, i as u64), 0);
                let random =
                    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
                polar_factor(&random).ok_or_else(|| {
                    Error::State(format!("layer {i}: random replacement kernel is singular"))
                })?
            }
        };
        // DMatrix is column-major; weights are stored row-major.
        layer.weight = projected.transpose().as_slice().to_vec();
    }
    Ok(out)
}

fn polar_factor(g: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let wide = g.nrows() <= g.ncols();
    let gram = if wide { g * g.transpose() } else { g.transpose() * g };
    let eig = SymmetricEigen::new(gram);
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || !max.is_finite() || min <= RANK_TOLERANCE * max {
        return None;
    }
    let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    let q = &eig.eigenvectors;
    let inv_root = q * DMatrix::from_diagonal(&inv_sqrt) * q.transpose();
    Some(if wide { inv_root * g } else { g * inv_root })
}

/// Frobenius distance of a kernel's Gram matrix (on its smaller side) from identity.
pub fn gram_deviation(weight: &[f64], rows: usize, cols: usize) -> f64 {
    let g = DMatrix::from_row_slice(rows, cols, weight);
    let gram = if rows <= cols { &g * g.transpose() } else { g.transpose() * &g };
    let n = gram.nrows();
    (gram - DMatrix::<f64>::identity(n, n)).norm()
}

/// [`gram_deviation`] for every layer.
pub fn orthogonality_errors(params: &DenoiserParams) -> Vec<f64> {
    params
        .layers
        .iter()
        .map(|l| gram_deviation(&l.weight, l.spec.out_channels, l.spec.fan_in()))
        .collect()
}
