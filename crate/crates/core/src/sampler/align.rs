//! Label and sign alignment of posterior draws, and component ordering.

use serde::Serialize;

use super::{Draw, PosteriorDraws};
use crate::spd::{Matrix, OrthonormalMatrix};

/// Maps component `k` of the output to component `perm[k]` of the input,
/// multiplied by `signs[k]` (loadings only; log-variances and coefficients
/// are sign-free).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignedPermutation {
    pub perm: Vec<usize>,
    pub signs: Vec<f64>,
}

impl SignedPermutation {
    pub fn identity(d: usize) -> Self {
        Self {
            perm: (0..d).collect(),
            signs: vec![1.0; d],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(k, &j)| k == j) && self.signs.iter().all(|&s| s == 1.0)
    }

    /// `self` applied after `first`.
    pub fn after(&self, first: &SignedPermutation) -> SignedPermutation {
        let perm = self.perm.iter().map(|&j| first.perm[j]).collect();
        let signs = self
            .perm
            .iter()
            .zip(&self.signs)
            .map(|(&j, &s)| s * first.signs[j])
            .collect();
        SignedPermutation { perm, signs }
    }

    pub fn apply_columns(&self, m: &Matrix, signed: bool) -> Matrix {
        let mut out = Matrix::zeros(m.nrows(), m.ncols());
        for (k, (&j, &s)) in self.perm.iter().zip(&self.signs).enumerate() {
            let col = m.column(j);
            if signed && s != 1.0 {
                out.set_column(k, &(col * s));
            } else {
                out.set_column(k, &col);
            }
        }
        out
    }

    pub fn apply_rows(&self, m: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(m.nrows(), m.ncols());
        for (k, &j) in self.perm.iter().enumerate() {
            out.set_row(k, &m.row(j));
        }
        out
    }

    pub fn apply_to_draw(&self, draw: &Draw) -> Draw {
        let mut state = draw.state.clone();
        state.u = self.apply_columns(&draw.state.u, true);
        state.lambda = self.apply_columns(&draw.state.lambda, false);
        state.b = self.apply_rows(&draw.state.b);
        Draw {
            state,
            gamma: OrthonormalMatrix::new_unchecked(self.apply_columns(draw.gamma.matrix(), true)),
            log_posterior: draw.log_posterior,
            alignment: self.after(&draw.alignment),
        }
    }
}

/// Greedy signed matching of the columns of `gamma` to those of `reference`:
/// repeatedly pair the unmatched columns with the largest absolute inner
/// product (ties go to the lower reference index, then the lower source
/// index), then flip signs so each matched inner product is nonnegative.
pub fn match_columns(gamma: &Matrix, reference: &Matrix) -> SignedPermutation {
    let d = reference.ncols();
    let inner = gamma.transpose() * reference; // inner[(j, k)] = <γ_j, ref_k>
    let mut used_src = vec![false; gamma.ncols()];
    let mut used_ref = vec![false; d];
    let mut perm = vec![0; d];
    let mut signs = vec![1.0; d];
    for _ in 0..d {
        let mut best: Option<(usize, usize, f64)> = None;
        for k in (0..d).filter(|&k| !used_ref[k]) {
            for j in (0..gamma.ncols()).filter(|&j| !used_src[j]) {
                let v = inner[(j, k)].abs();
                if best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((j, k, v));
                }
            }
        }
        let (j, k, _) = best.expect("square matching");
        used_src[j] = true;
        used_ref[k] = true;
        perm[k] = j;
        signs[k] = if inner[(j, k)] < 0.0 { -1.0 } else { 1.0 };
    }
    SignedPermutation { perm, signs }
}

/// Aligns every draw to `reference` by the greedy signed permutation.
pub fn align(mut draws: PosteriorDraws, reference: &OrthonormalMatrix) -> PosteriorDraws {
    for chain in &mut draws.chains {
        for draw in chain.iter_mut() {
            let sp = match_columns(draw.gamma.matrix(), reference.matrix());
            if !sp.is_identity() {
                *draw = sp.apply_to_draw(draw);
            }
        }
    }
    draws
}

/// Between-subject variance `V^(k)` of the posterior-mean log-variances.
pub fn component_variances(draws: &PosteriorDraws) -> Vec<f64> {
    let (n, d) = (draws.dims.n, draws.dims.d);
    if n == 0 || draws.is_empty() {
        return vec![0.0; d];
    }
    let mut mean = Matrix::zeros(n, d);
    for draw in draws.iter() {
        mean += &draw.state.lambda;
    }
    mean /= draws.len() as f64;
    (0..d)
        .map(|k| {
            let col = mean.column(k);
            let avg = col.sum() / n as f64;
            col.iter().map(|v| (v - avg).powi(2)).sum()
        })
        .collect()
}

/// Reorders components so that `V^(1) ≥ … ≥ V^(d)`; ties keep the original
/// order.
pub fn order_components(mut draws: PosteriorDraws) -> PosteriorDraws {
    let v = component_variances(&draws);
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    let sp = SignedPermutation {
        perm: order.clone(),
        signs: vec![1.0; order.len()],
    };
    if !sp.is_identity() {
        for chain in &mut draws.chains {
            for draw in chain.iter_mut() {
                *draw = sp.apply_to_draw(draw);
            }
        }
    }
    draws.component_variance = Some(order.iter().map(|&k| v[k]).collect());
    draws
}
