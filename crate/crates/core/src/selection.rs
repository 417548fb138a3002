//! Deviation-from-diagonality criterion and the choice of `d`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CapError, Result};
use crate::model::{Hyperparameters, WhitenedDataset};
use crate::sampler::{fit, HmcConfig, PosteriorDraws};
use crate::spd::{symmetrize, Matrix, SpdMatrix};

pub const DEFAULT_CUTOFF: f64 = 1.5;

/// `(1/n) Σ_i T_i (log|Diag(Λ_i)| - log|Λ_i|)`; nonnegative by Hadamard's
/// inequality and zero iff every `Λ_i` is diagonal.
pub fn log_dfd(lambda_hats: &[Matrix], counts: &[usize]) -> Result<f64> {
    if lambda_hats.len() != counts.len() {
        return Err(CapError::Validation(format!(
            "{} matrices but {} time-point counts",
            lambda_hats.len(),
            counts.len()
        )));
    }
    if lambda_hats.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, (lam, &t)) in lambda_hats.iter().zip(counts).enumerate() {
        let context = format!("subject {}", i + 1);
        // the gap equals -log|R| for the correlation matrix R; building R with
        // an exact unit diagonal makes diagonal input give exactly zero
        let scale: Vec<f64> = lam.diagonal().iter().map(|v| v.sqrt()).collect();
        if scale.iter().any(|s| !(*s > 0.0)) {
            SpdMatrix::with_context(lam.clone(), &context)?;
        }
        let r = Matrix::from_fn(lam.nrows(), lam.ncols(), |a, b| {
            if a == b {
                1.0
            } else {
                lam[(a, b)] / (scale[a] * scale[b])
            }
        });
        total -= t as f64 * SpdMatrix::with_context(symmetrize(&r), &context)?.log_det();
    }
    Ok(total / lambda_hats.len() as f64)
}

/// Posterior mean of the log-DfD with `Λ̂_i = Γᵀ Ŝ_i Γ`, `Ŝ_i` the whitened
/// second moment of subject `i`.
pub fn posterior_mean_dfd(draws: &PosteriorDraws, data: &WhitenedDataset) -> Result<f64> {
    if draws.dims.p != data.p() || draws.dims.n != data.n() {
        return Err(CapError::Validation(format!(
            "draws (p={}, n={}) do not match data (p={}, n={})",
            draws.dims.p,
            draws.dims.n,
            data.p(),
            data.n()
        )));
    }
    if draws.d() == 1 || data.n() == 0 {
        return Ok(0.0);
    }
    let counts: Vec<usize> = data.time_points().collect();
    let mut total = 0.0;
    for draw in draws.iter() {
        let g = draw.gamma.matrix();
        let hats: Vec<Matrix> = data
            .second_moments()
            .iter()
            .map(|s| symmetrize(&(g.transpose() * s * g)))
            .collect();
        total += log_dfd(&hats, &counts)?;
    }
    Ok(total / draws.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfdCandidate {
    pub d: usize,
    pub dfd_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfdReport {
    pub candidates: Vec<DfdCandidate>,
    pub cutoff: f64,
    pub chosen_d: usize,
}

/// Largest candidate whose value is at most `cutoff` (ties accepted), never
/// below 1.
pub fn choose_d(candidates: &[DfdCandidate], cutoff: f64) -> usize {
    candidates
        .iter()
        .filter(|c| c.dfd_mean <= cutoff)
        .map(|c| c.d)
        .max()
        .unwrap_or(1)
        .max(1)
}

/// Fits `d = 1..=d_max` (fresh sampler run per candidate, same seed) and
/// picks the largest `d` whose posterior-mean log-DfD is within `cutoff`.
pub fn select_d(
    data: &WhitenedDataset,
    d_max: usize,
    cutoff: f64,
    hyper: &Hyperparameters,
    config: &HmcConfig,
) -> Result<DfdReport> {
    if d_max == 0 || d_max > data.p() {
        return Err(CapError::Argument(format!(
            "d_max must satisfy 1 <= d_max <= p = {}, got {d_max}",
            data.p()
        )));
    }
    if !cutoff.is_finite() {
        return Err(CapError::Argument(format!(
            "cutoff must be finite, got {cutoff}"
        )));
    }
    let candidates = (1..=d_max)
        .into_par_iter()
        .map(|d| {
            let value = if d == 1 {
                // a 1×1 projected covariance is always diagonal
                0.0
            } else {
                fit(data, d, hyper, config)
                    .and_then(|draws| posterior_mean_dfd(&draws, data))
                    .map_err(|e| CapError::Candidate {
                        d,
                        source: Box::new(e),
                    })?
            };
            Ok(DfdCandidate { d, dfd_mean: value })
        })
        .collect::<Result<Vec<_>>>()?;
    let chosen_d = choose_d(&candidates, cutoff);
    Ok(DfdReport {
        candidates,
        cutoff,
        chosen_d,
    })
}
