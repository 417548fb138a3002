//! Multi-chain posterior sampling and post-processing of the draws.

pub mod align;
pub mod hmc;
pub mod io;
pub mod summary;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CapError, Result};
use crate::model::{
    log_posterior, log_posterior_and_grad, ExpandedState, Hyperparameters, StateDims,
    WhitenedDataset,
};
use crate::spd::{
    polar_factor, standard_normal_matrix, sym_eigen, symmetrize, Matrix, OrthonormalMatrix,
};

pub use align::{align, order_components, SignedPermutation};
pub use hmc::{run_chain, ChainRun, HmcConfig, LogDensity};
pub use summary::{summarize, ParameterSummary, PosteriorSummary};

/// The expanded CAP posterior as an HMC target over flattened states.
pub struct CapPosterior<'a> {
    data: &'a WhitenedDataset,
    hyper: &'a Hyperparameters,
    dims: StateDims,
    /// `c` when `Ψ = c I`.
    isotropic: Option<f64>,
}

impl<'a> CapPosterior<'a> {
    pub fn new(data: &'a WhitenedDataset, hyper: &'a Hyperparameters, d: usize) -> Result<Self> {
        if d == 0 || d > data.p() {
            return Err(CapError::Argument(format!(
                "number of components must satisfy 1 <= d <= p = {}, got {d}",
                data.p()
            )));
        }
        if hyper.psi().dim() != data.p() {
            return Err(CapError::Validation(format!(
                "Ψ is {0}x{0} but the data have p = {1}",
                hyper.psi().dim(),
                data.p()
            )));
        }
        let psi = hyper.psi().matrix();
        let c = psi[(0, 0)];
        let isotropic = (psi == &(Matrix::identity(psi.nrows(), psi.ncols()) * c)).then_some(c);
        Ok(Self {
            data,
            hyper,
            isotropic,
            dims: StateDims {
                p: data.p(),
                d,
                n: data.n(),
                q: data.q(),
            },
        })
    }

    pub fn dims(&self) -> StateDims {
        self.dims
    }
}

impl LogDensity for CapPosterior<'_> {
    fn dim(&self) -> usize {
        self.dims.len()
    }

    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        let state = ExpandedState::from_slice(self.dims, x)?;
        let (value, g) = log_posterior_and_grad(&state, self.data, self.hyper)?;
        grad.copy_from_slice(&g.to_vec());
        Ok(value)
    }

    /// With `Ψ = c I` the stretch `(UᵀU)^{1/2}` is independent of `Γ` and of
    /// the data, distributed as `√c (ZᵀZ)^{1/2}` for a standard normal
    /// `p × d` matrix `Z`. Redrawing it leaves the posterior invariant and
    /// stops chains from stalling where a column of `U` is short and the
    /// curvature in `Γ` is large.
    fn refresh(&self, x: &mut [f64], rng: &mut dyn RngCore) -> bool {
        let Some(c) = self.isotropic else {
            return false;
        };
        let StateDims { p, d, .. } = self.dims;
        let u = Matrix::from_row_slice(p, d, &x[..p * d]);
        let (Ok(current), Ok(fresh)) = (
            polar_factor(&u),
            polar_factor(&standard_normal_matrix(p, d, rng)),
        ) else {
            return false;
        };
        let moved = current.gamma.matrix() * fresh.stretch * c.sqrt();
        for r in 0..p {
            for k in 0..d {
                x[r * d + k] = moved[(r, k)];
            }
        }
        true
    }
}

/// Data-driven starting point shared by all chains.
///
/// Two candidate bases are tried: the directions along which the
/// covariate-predicted part of the subjects' whitened second moments varies
/// most, and the directions along which the raw moments vary most. The
/// first ignores subject-level noise and usually finds the linked
/// directions; the second is a fallback when the covariates carry little
/// signal. For each, `λ₀` are the log-variances along the basis (clamped to
/// `[-10, 10]`), `B₀` their least-squares regression on the covariates and
/// `τ₀` the log residual variance. The candidate with the larger
/// log-posterior wins.
pub fn initial_state(
    data: &WhitenedDataset,
    d: usize,
    hyper: &Hyperparameters,
) -> Result<ExpandedState> {
    let (p, n, q) = (data.p(), data.n(), data.q());
    let dims = StateDims { p, d, n, q };
    if n == 0 {
        let mut state = ExpandedState::zeros(dims);
        state.u = Matrix::identity(p, d);
        return Ok(state);
    }
    let moments = data.second_moments();
    let mut mean = Matrix::zeros(p, p);
    for s in moments {
        mean += s;
    }
    mean /= n as f64;
    let x = data.covariates();
    let xtx_chol = symmetrize(&(x.transpose() * x)).cholesky();

    let mut candidates = Vec::with_capacity(2);
    if let Some(chol) = &xtx_chol {
        // entrywise regression of the moments on the covariates
        let mut fitted = vec![Matrix::zeros(p, p); n];
        for a in 0..p {
            for b in a..p {
                let y = Matrix::from_fn(n, 1, |i, _| moments[i][(a, b)]);
                let f = x * chol.solve(&(x.transpose() * y));
                for (i, m) in fitted.iter_mut().enumerate() {
                    m[(a, b)] = f[(i, 0)];
                    m[(b, a)] = f[(i, 0)];
                }
            }
        }
        candidates.push(leading_spread(&fitted, &mean, d)?);
    }
    candidates.push(leading_spread(moments, &mean, d)?);

    let mut best: Option<(ExpandedState, f64)> = None;
    for gamma0 in candidates {
        let mut state = ExpandedState::zeros(dims);
        for (i, s) in moments.iter().enumerate() {
            let sg = s * &gamma0;
            for k in 0..d {
                let var = gamma0.column(k).dot(&sg.column(k));
                state.lambda[(i, k)] = var.max(f64::MIN_POSITIVE).ln().clamp(-10.0, 10.0);
            }
        }
        state.u = gamma0;
        if let Some(chol) = &xtx_chol {
            state.b = chol.solve(&(x.transpose() * &state.lambda)).transpose();
        }
        let resid = &state.lambda - x * state.b.transpose();
        let var = resid.norm_squared() / (n * d) as f64;
        state.tau = var.max(1e-4).ln();
        let lp = log_posterior(&state, data, hyper).unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(_, b)| lp > *b) {
            best = Some((state, lp));
        }
    }
    Ok(best.expect("at least one candidate").0)
}

/// Top-`d` eigenvectors of `Σ_i (M_i − M̄)²`.
fn leading_spread(mats: &[Matrix], mean: &Matrix, d: usize) -> Result<Matrix> {
    let p = mean.nrows();
    let mut spread = Matrix::zeros(p, p);
    for m in mats {
        let dev = m - mean;
        spread += &dev * &dev;
    }
    Ok(sym_eigen(&symmetrize(&spread))?
        .vectors
        .columns(0, d)
        .into_owned())
}

/// One recorded posterior draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub state: ExpandedState,
    pub gamma: OrthonormalMatrix,
    pub log_posterior: f64,
    /// Signed permutation applied to the raw sampler output.
    pub alignment: SignedPermutation,
}

impl Draw {
    pub fn from_state(state: ExpandedState, log_posterior: f64) -> Result<Self> {
        let gamma = polar_factor(&state.u)?.gamma;
        let d = gamma.ncols();
        Ok(Self {
            state,
            gamma,
            log_posterior,
            alignment: SignedPermutation::identity(d),
        })
    }

    pub fn sigma(&self) -> f64 {
        self.state.sigma()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub chain: usize,
    pub step_size: f64,
    pub mean_accept: f64,
    pub divergences: usize,
    pub warmup_divergences: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrawIndex {
    pub chain: usize,
    pub draw: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub dims: StateDims,
    pub chains: Vec<Vec<Draw>>,
    pub stats: Vec<ChainStats>,
    /// Draw whose `Γ` served as the alignment reference.
    pub reference: Option<DrawIndex>,
    /// Between-subject variance of the posterior-mean log-variance per
    /// component, in current component order (set by `order_components`).
    pub component_variance: Option<Vec<f64>>,
}

impl PosteriorDraws {
    pub fn iter(&self) -> impl Iterator<Item = &Draw> {
        self.chains.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.chains.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d(&self) -> usize {
        self.dims.d
    }

    /// Highest log-posterior draw.
    pub fn max_posterior_index(&self) -> Option<DrawIndex> {
        let mut best: Option<(DrawIndex, f64)> = None;
        for (c, chain) in self.chains.iter().enumerate() {
            for (t, draw) in chain.iter().enumerate() {
                if best.is_none_or(|(_, lp)| draw.log_posterior > lp) {
                    best = Some((DrawIndex { chain: c, draw: t }, draw.log_posterior));
                }
            }
        }
        best.map(|(i, _)| i)
    }

    pub fn draw(&self, index: DrawIndex) -> &Draw {
        &self.chains[index.chain][index.draw]
    }

    pub fn total_divergences(&self) -> usize {
        self.stats.iter().map(|s| s.divergences).sum()
    }
}

/// Runs `config.chains` chains on the expanded posterior and returns draws
/// aligned to the maximum-posterior draw.
pub fn fit(
    data: &WhitenedDataset,
    d: usize,
    hyper: &Hyperparameters,
    config: &HmcConfig,
) -> Result<PosteriorDraws> {
    config.validate()?;
    let target = CapPosterior::new(data, hyper, d)?;
    let dims = target.dims();
    let init = initial_state(data, d, hyper)?.to_vec();

    let runs: Vec<ChainRun> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(&target, &init, config, c))
        .collect::<Result<_>>()?;

    let mut chains = Vec::with_capacity(runs.len());
    let mut stats = Vec::with_capacity(runs.len());
    for (c, run) in runs.into_iter().enumerate() {
        let divergent = run.divergences();
        if divergent as f64 > config.max_divergent_fraction * config.draws as f64 {
            return Err(CapError::Divergence {
                chain: c,
                divergent,
                total: config.draws,
            });
        }
        stats.push(ChainStats {
            chain: c,
            step_size: run.step_size,
            mean_accept: run.mean_accept(),
            divergences: divergent,
            warmup_divergences: run.warmup_divergences,
        });
        let draws = run
            .draws
            .iter()
            .zip(&run.log_density)
            .map(|(x, &lp)| Draw::from_state(ExpandedState::from_slice(dims, x)?, lp))
            .collect::<Result<Vec<_>>>()?;
        chains.push(draws);
    }

    let mut draws = PosteriorDraws {
        dims,
        chains,
        stats,
        reference: None,
        component_variance: None,
    };
    let reference_index = draws
        .max_posterior_index()
        .ok_or_else(|| CapError::Validation("sampler produced no draws".into()))?;
    let reference = draws.draw(reference_index).gamma.clone();
    draws = align(draws, &reference);
    draws.reference = Some(reference_index);
    Ok(draws)
}
