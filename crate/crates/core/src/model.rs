//! Data containers, whitening, and the parameter-expanded log-posterior.
//!
//! The target density is over `(U, λ, B, τ)` with `τ = log σ²`:
//!
//! ```text
//! Σ_i Σ_k [ -T_i λ_ik / 2 - e^{-λ_ik} γ_kᵀ S_i γ_k / 2 ]            likelihood
//! + Σ_i [ -(d/2) τ - e^{-τ} |λ_i - B x_i|² / 2 ]                  λ | B, σ²
//! - tr(Uᵀ Ψ⁻¹ U) / 2                                              U ~ MN(0, Ψ, I)
//! - |B|²_F / (2 b_sd²)                                            B
//! - rate e^τ + τ                                                  σ² ~ Exp(rate), Jacobian
//! ```
//!
//! where `Γ = U (UᵀU)^{-1/2}` and `S_i = Σ_l y*_il y*_ilᵀ` is the scatter of
//! subject `i`'s whitened signals.

use crate::error::{CapError, Result};
use crate::spd::{
    polar_factor, symmetrize, Matrix, OrthonormalMatrix, SpdFunction, SpdMatrix, Vector,
};

/// One subject: a `T × p` signal block and a length-`q` covariate vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub signals: Matrix,
    pub covariates: Vector,
}

impl Subject {
    pub fn len(&self) -> usize {
        self.signals.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.nrows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    p: usize,
    q: usize,
    subjects: Vec<Subject>,
}

impl TimeSeriesDataset {
    pub fn new(p: usize, q: usize, subjects: Vec<Subject>) -> Result<Self> {
        if p == 0 || q == 0 {
            return Err(CapError::Validation(format!(
                "dataset needs p >= 1 and q >= 1, got p={p}, q={q}"
            )));
        }
        for s in &subjects {
            if s.signals.ncols() != p {
                return Err(CapError::Validation(format!(
                    "subject {}: {} signal columns, expected {p}",
                    s.id,
                    s.signals.ncols()
                )));
            }
            if s.covariates.len() != q {
                return Err(CapError::Validation(format!(
                    "subject {}: {} covariates, expected {q}",
                    s.id,
                    s.covariates.len()
                )));
            }
            if s.len() < 2 {
                return Err(CapError::Validation(format!(
                    "subject {}: needs at least 2 time points, got {}",
                    s.id,
                    s.len()
                )));
            }
            if s.signals
                .iter()
                .chain(s.covariates.iter())
                .any(|v| !v.is_finite())
            {
                return Err(CapError::Validation(format!(
                    "subject {}: non-finite value",
                    s.id
                )));
            }
        }
        let data = Self { p, q, subjects };
        if !data.subjects.is_empty() {
            data.check_covariate_rank()?;
        }
        Ok(data)
    }

    fn check_covariate_rank(&self) -> Result<()> {
        let x = self.covariate_matrix();
        let gram = symmetrize(&(x.transpose() * &x));
        let eig = crate::spd::sym_eigen(&gram)?;
        let (largest, smallest) = (eig.values[0], eig.values[self.q - 1]);
        if !(largest > 0.0) || smallest <= 1e-12 * largest {
            return Err(CapError::Validation(
                "covariate matrix does not have full column rank".into(),
            ));
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn into_subjects(self) -> Vec<Subject> {
        self.subjects
    }

    /// `n × q` matrix with `x_iᵀ` as row `i`.
    pub fn covariate_matrix(&self) -> Matrix {
        let mut x = Matrix::zeros(self.n(), self.q);
        for (i, s) in self.subjects.iter().enumerate() {
            x.set_row(i, &s.covariates.transpose());
        }
        x
    }

    /// Copy with each subject's column means subtracted.
    pub fn mean_removed(&self) -> Self {
        let subjects = self
            .subjects
            .iter()
            .map(|s| Subject {
                id: s.id.clone(),
                signals: remove_column_means(&s.signals),
                covariates: s.covariates.clone(),
            })
            .collect();
        Self {
            p: self.p,
            q: self.q,
            subjects,
        }
    }
}

pub(crate) fn remove_column_means(y: &Matrix) -> Matrix {
    let mut out = y.clone();
    let t = y.nrows() as f64;
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / t;
        col.add_scalar_mut(-mean);
    }
    out
}

/// Mean-removed, whitened data with the reference covariance cached.
#[derive(Debug, Clone)]
pub struct WhitenedDataset {
    base: TimeSeriesDataset,
    sigma_star: SpdMatrix,
    sigma_star_inv_sqrt: Matrix,
    whitened: Vec<Matrix>,
    /// `(1/T_i) Σ_l y*_il y*_ilᵀ`
    second_moments: Vec<Matrix>,
    /// `Σ_l y*_il y*_ilᵀ`
    scatters: Vec<Matrix>,
    covariates: Matrix,
}

/// Removes subject means, forms the pooled second moment `Σ*`, and whitens by
/// `Σ*^{-1/2}`. `jitter` is added to the diagonal of `Σ*` before inversion.
pub fn whiten(data: &TimeSeriesDataset, jitter: f64) -> Result<WhitenedDataset> {
    if !(jitter >= 0.0) || !jitter.is_finite() {
        return Err(CapError::Argument(format!(
            "jitter must be >= 0, got {jitter}"
        )));
    }
    if data.n() == 0 {
        return Err(CapError::Degenerate(
            "cannot whiten a dataset with no subjects".into(),
        ));
    }
    let base = data.mean_removed();
    let p = base.p();
    let mut pooled = Matrix::zeros(p, p);
    for s in base.subjects() {
        pooled += s.signals.transpose() * &s.signals / s.len() as f64;
    }
    pooled /= base.n() as f64;
    pooled += Matrix::identity(p, p) * jitter;
    let sigma_star = match SpdMatrix::with_context(symmetrize(&pooled), "pooled covariance") {
        Ok(s) => s,
        Err(CapError::NotPositiveDefinite { eigenvalue, .. }) if jitter == 0.0 => {
            return Err(CapError::Degenerate(format!(
                "pooled second moment is not positive definite (smallest eigenvalue \
                 {eigenvalue:e}); rerun with a positive jitter"
            )))
        }
        Err(e) => return Err(e),
    };
    let w = sigma_star.apply(SpdFunction::InvSqrt);
    let whitened: Vec<Matrix> = base.subjects().iter().map(|s| &s.signals * &w).collect();
    Ok(WhitenedDataset::assemble(base, sigma_star, w, whitened))
}

impl WhitenedDataset {
    fn assemble(
        base: TimeSeriesDataset,
        sigma_star: SpdMatrix,
        sigma_star_inv_sqrt: Matrix,
        whitened: Vec<Matrix>,
    ) -> Self {
        let scatters: Vec<Matrix> = whitened
            .iter()
            .map(|y| symmetrize(&(y.transpose() * y)))
            .collect();
        let second_moments = scatters
            .iter()
            .zip(&whitened)
            .map(|(s, y)| s / y.nrows() as f64)
            .collect();
        let covariates = base.covariate_matrix();
        Self {
            base,
            sigma_star,
            sigma_star_inv_sqrt,
            whitened,
            second_moments,
            scatters,
            covariates,
        }
    }

    /// A dataset with no subjects, for prior-only fits. `Σ* = I`.
    pub fn prior_only(p: usize, q: usize) -> Result<Self> {
        let base = TimeSeriesDataset::new(p, q, Vec::new())?;
        Ok(Self::assemble(
            base,
            SpdMatrix::identity(p),
            Matrix::identity(p, p),
            Vec::new(),
        ))
    }

    pub fn base(&self) -> &TimeSeriesDataset {
        &self.base
    }

    pub fn n(&self) -> usize {
        self.base.n()
    }

    pub fn p(&self) -> usize {
        self.base.p()
    }

    pub fn q(&self) -> usize {
        self.base.q()
    }

    pub fn sigma_star(&self) -> &SpdMatrix {
        &self.sigma_star
    }

    pub fn sigma_star_inv_sqrt(&self) -> &Matrix {
        &self.sigma_star_inv_sqrt
    }

    pub fn whitened(&self) -> &[Matrix] {
        &self.whitened
    }

    pub fn second_moments(&self) -> &[Matrix] {
        &self.second_moments
    }

    pub fn scatters(&self) -> &[Matrix] {
        &self.scatters
    }

    pub fn covariates(&self) -> &Matrix {
        &self.covariates
    }

    pub fn time_points(&self) -> impl Iterator<Item = usize> + '_ {
        self.whitened.iter().map(|y| y.nrows())
    }
}

/// Unconstrained sampler state.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedState {
    /// `p × d`
    pub u: Matrix,
    /// `n × d` log-variances
    pub lambda: Matrix,
    /// `d × q`
    pub b: Matrix,
    /// `log σ²`
    pub tau: f64,
}

/// Shape of an [`ExpandedState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StateDims {
    pub p: usize,
    pub d: usize,
    pub n: usize,
    pub q: usize,
}

impl StateDims {
    pub fn len(&self) -> usize {
        self.p * self.d + self.n * self.d + self.d * self.q + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Column names in flattening order: `U_r_c`, `lambda_i_k`, `B_k_j`, `tau`
    /// (1-based indices).
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.len());
        for r in 0..self.p {
            for c in 0..self.d {
                names.push(format!("U_{}_{}", r + 1, c + 1));
            }
        }
        for i in 0..self.n {
            for k in 0..self.d {
                names.push(format!("lambda_{}_{}", i + 1, k + 1));
            }
        }
        for k in 0..self.d {
            for j in 0..self.q {
                names.push(format!("B_{}_{}", k + 1, j + 1));
            }
        }
        names.push("tau".into());
        names
    }
}

impl ExpandedState {
    pub fn zeros(dims: StateDims) -> Self {
        Self {
            u: Matrix::zeros(dims.p, dims.d),
            lambda: Matrix::zeros(dims.n, dims.d),
            b: Matrix::zeros(dims.d, dims.q),
            tau: 0.0,
        }
    }

    pub fn dims(&self) -> StateDims {
        StateDims {
            p: self.u.nrows(),
            d: self.u.ncols(),
            n: self.lambda.nrows(),
            q: self.b.ncols(),
        }
    }

    /// Row-major flattening of `U`, `λ`, `B`, then `τ`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dims().len());
        for m in [&self.u, &self.lambda, &self.b] {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    out.push(m[(r, c)]);
                }
            }
        }
        out.push(self.tau);
        out
    }

    pub fn from_slice(dims: StateDims, x: &[f64]) -> Result<Self> {
        if x.len() != dims.len() {
            return Err(CapError::Validation(format!(
                "state vector has {} entries, expected {}",
                x.len(),
                dims.len()
            )));
        }
        let mut state = Self::zeros(dims);
        let mut it = x.iter().copied();
        for m in [&mut state.u, &mut state.lambda, &mut state.b] {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    m[(r, c)] = it.next().unwrap();
                }
            }
        }
        state.tau = it.next().unwrap();
        Ok(state)
    }

    pub fn is_finite(&self) -> bool {
        self.tau.is_finite()
            && self
                .u
                .iter()
                .chain(self.lambda.iter())
                .chain(self.b.iter())
                .all(|v| v.is_finite())
    }

    pub fn gamma(&self) -> Result<OrthonormalMatrix> {
        Ok(polar_factor(&self.u)?.gamma)
    }

    pub fn sigma(&self) -> f64 {
        (0.5 * self.tau).exp()
    }
}

#[derive(Debug, Clone)]
pub struct Hyperparameters {
    psi: SpdMatrix,
    psi_inv: Matrix,
    b_sd: f64,
    sigma2_rate: f64,
}

impl Hyperparameters {
    pub const DEFAULT_B_SD: f64 = 2.5;
    pub const DEFAULT_SIGMA2_RATE: f64 = 1.0;

    pub fn new(psi: SpdMatrix, b_sd: f64, sigma2_rate: f64) -> Result<Self> {
        if !(b_sd > 0.0 && b_sd.is_finite()) {
            return Err(CapError::Validation(format!(
                "b_sd must be positive, got {b_sd}"
            )));
        }
        if !(sigma2_rate > 0.0 && sigma2_rate.is_finite()) {
            return Err(CapError::Validation(format!(
                "sigma2_rate must be positive, got {sigma2_rate}"
            )));
        }
        let psi_inv = psi.inverse();
        Ok(Self {
            psi,
            psi_inv,
            b_sd,
            sigma2_rate,
        })
    }

    /// `Ψ = I_p`, `b_sd = 2.5`, `sigma2_rate = 1`.
    pub fn default_for(p: usize) -> Self {
        Self::new(
            SpdMatrix::identity(p),
            Self::DEFAULT_B_SD,
            Self::DEFAULT_SIGMA2_RATE,
        )
        .expect("defaults are valid")
    }

    pub fn with_priors(p: usize, b_sd: f64, sigma2_rate: f64) -> Result<Self> {
        Self::new(SpdMatrix::identity(p), b_sd, sigma2_rate)
    }

    pub fn psi(&self) -> &SpdMatrix {
        &self.psi
    }

    pub fn b_sd(&self) -> f64 {
        self.b_sd
    }

    pub fn sigma2_rate(&self) -> f64 {
        self.sigma2_rate
    }
}

fn check_dims(
    state: &ExpandedState,
    data: &WhitenedDataset,
    hyper: &Hyperparameters,
) -> Result<()> {
    let dims = state.dims();
    if dims.p != data.p() || dims.n != data.n() || dims.q != data.q() || hyper.psi.dim() != data.p()
    {
        return Err(CapError::Validation(format!(
            "state dims {dims:?} do not match data (p={}, n={}, q={}) / Ψ ({})",
            data.p(),
            data.n(),
            data.q(),
            hyper.psi.dim()
        )));
    }
    if dims.d == 0 || dims.d > dims.p {
        return Err(CapError::Validation(format!(
            "need 1 <= d <= p, got d={}",
            dims.d
        )));
    }
    Ok(())
}

fn finite(value: f64, term: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(CapError::NonFinite { term })
    }
}

/// Expanded log-posterior up to an additive constant.
pub fn log_posterior(
    state: &ExpandedState,
    data: &WhitenedDataset,
    hyper: &Hyperparameters,
) -> Result<f64> {
    evaluate(state, data, hyper, false).map(|(v, _)| v)
}

/// Exact gradient of [`log_posterior`].
pub fn grad_log_posterior(
    state: &ExpandedState,
    data: &WhitenedDataset,
    hyper: &Hyperparameters,
) -> Result<ExpandedState> {
    evaluate(state, data, hyper, true).map(|(_, g)| g.expect("gradient requested"))
}

/// Value and gradient in one pass.
pub fn log_posterior_and_grad(
    state: &ExpandedState,
    data: &WhitenedDataset,
    hyper: &Hyperparameters,
) -> Result<(f64, ExpandedState)> {
    evaluate(state, data, hyper, true).map(|(v, g)| (v, g.expect("gradient requested")))
}

fn evaluate(
    state: &ExpandedState,
    data: &WhitenedDataset,
    hyper: &Hyperparameters,
    want_grad: bool,
) -> Result<(f64, Option<ExpandedState>)> {
    check_dims(state, data, hyper)?;
    let StateDims { p, d, n, .. } = state.dims();
    let polar = polar_factor(&state.u)?;
    let gamma = polar.gamma.matrix();
    let x = data.covariates();
    let inv_var = (-state.tau).exp();

    let mut grad_gamma = Matrix::zeros(p, d);
    let mut grad_lambda = Matrix::zeros(n, d);
    let mut likelihood = 0.0;
    let mut resid_sq = 0.0;
    let fitted = x * state.b.transpose(); // n × d, row i = (B x_i)ᵀ

    for (i, scatter) in data.scatters().iter().enumerate() {
        let t_i = data.whitened()[i].nrows() as f64;
        let sg = scatter * gamma;
        for k in 0..d {
            let quad = gamma.column(k).dot(&sg.column(k));
            let lam = state.lambda[(i, k)];
            let prec = (-lam).exp();
            likelihood += -0.5 * t_i * lam - 0.5 * prec * quad;
            let r = lam - fitted[(i, k)];
            resid_sq += r * r;
            if want_grad {
                grad_lambda[(i, k)] = -0.5 * t_i + 0.5 * prec * quad - inv_var * r;
                grad_gamma.column_mut(k).axpy(-prec, &sg.column(k), 1.0);
            }
        }
    }
    let likelihood = finite(likelihood, "likelihood")?;
    let lambda_prior = finite(
        -(n as f64) * (d as f64) / 2.0 * state.tau - 0.5 * inv_var * resid_sq,
        "lambda_prior",
    )?;
    let psi_inv_u = &hyper.psi_inv * &state.u;
    let u_prior = finite(-0.5 * state.u.dot(&psi_inv_u), "u_prior")?;
    let b_var = hyper.b_sd * hyper.b_sd;
    let b_prior = finite(-state.b.norm_squared() / (2.0 * b_var), "b_prior")?;
    let sigma2_prior = finite(
        -hyper.sigma2_rate * state.tau.exp() + state.tau,
        "sigma2_prior",
    )?;
    let value = finite(
        likelihood + lambda_prior + u_prior + b_prior + sigma2_prior,
        "total",
    )?;
    if !want_grad {
        return Ok((value, None));
    }

    // dL/dB = e^{-τ} Σ_i (λ_i - B x_i) x_iᵀ - B / b_sd²
    let resid = &state.lambda - &fitted; // n × d
    let grad_b = resid.transpose() * x * inv_var - &state.b / b_var;
    let grad_tau = -(n as f64) * (d as f64) / 2.0 + 0.5 * inv_var * resid_sq
        - hyper.sigma2_rate * state.tau.exp()
        + 1.0;
    let grad_u = polar_pullback(&state.u, &polar, &grad_gamma) - psi_inv_u;

    let grad = ExpandedState {
        u: grad_u,
        lambda: grad_lambda,
        b: grad_b,
        tau: grad_tau,
    };
    if !grad.is_finite() {
        return Err(CapError::NonFinite { term: "gradient" });
    }
    Ok((value, Some(grad)))
}

/// Pulls `G = ∂L/∂Γ` back through `Γ = U M^{-1/2}`, `M = UᵀU`.
///
/// `dL = <G W, dU> + <sym(UᵀG), dW>`; in the eigenbasis of `M`,
/// `dW = Q (F ∘ Qᵀ dM Q) Qᵀ` with `F_jk = -1 / (s_j s_k (s_j + s_k))`,
/// `s = sqrt(eig(M))`. Since `dM = dUᵀU + UᵀdU`, the second term contributes
/// `2 U K` with `K = Q (F ∘ Qᵀ sym(UᵀG) Q) Qᵀ`.
fn polar_pullback(u: &Matrix, polar: &crate::spd::Polar, grad_gamma: &Matrix) -> Matrix {
    let q = &polar.gram_eigen.vectors;
    let s: Vec<f64> = polar.gram_eigen.values.iter().map(|v| v.sqrt()).collect();
    let h = symmetrize(&(u.transpose() * grad_gamma));
    let mut rotated = q.transpose() * h * q;
    let d = s.len();
    for j in 0..d {
        for k in 0..d {
            rotated[(j, k)] *= -1.0 / (s[j] * s[k] * (s[j] + s[k]));
        }
    }
    let kmat = q * rotated * q.transpose();
    grad_gamma * &polar.inv_sqrt + u * kmat * 2.0
}
