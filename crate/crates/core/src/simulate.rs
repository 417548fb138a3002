//! Synthetic datasets with two covariate-linked components and known truth.
//!
//! Subject `i` draws `x_i = (1, Bernoulli(1/2), N(0, 1))` and a log-spectrum
//! `B̃ x_i + ũ_i` with `ũ_ik ~ N(0, 0.5²)`. Rows 2 and 3 of `B̃` are
//! `(1, 0.5, -0.5)` and `(1, -0.3, 0.3)`; every other row is `(1, 0, 0)`.
//! Columns 2 and 3 of the eigenbasis are shared by all subjects; the remaining
//! columns are rotated by a subject-specific uniform orthogonal matrix.

use rand::{Rng, SeedableRng};
use rand_distr::{Bernoulli, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{CapError, Result};
use crate::model::{Subject, TimeSeriesDataset};
use crate::spd::{
    orthonormality_error, polar_factor, sample_haar_orthonormal, standard_normal_matrix, Matrix,
    SpdMatrix, Vector,
};

pub const SIGMA_TRUE: f64 = 0.5;

/// Covariate rows of `B̃` for the two linked components.
pub const B_LINKED: [[f64; 3]; 2] = [[1.0, 0.5, -0.5], [1.0, -0.3, 0.3]];

#[derive(Debug, Clone, PartialEq)]
pub struct SimSubjectTruth {
    pub x: Vector,
    pub u_tilde: Vector,
    pub sigma: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    /// Full `p × p` population eigenbasis `Γ̃`.
    pub gamma_full: Matrix,
    /// `p × 2`: the covariate-linked columns `(γ^(1), γ^(2))`.
    pub gamma: Matrix,
    /// `2 × 3`
    pub b: Matrix,
    /// Full `p × 3` log-spectrum coefficients `B̃`.
    pub b_full: Matrix,
    pub sigma: f64,
    pub subjects: Vec<SimSubjectTruth>,
}

/// Serializable view of [`SimTruth`] for the truth JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub p: usize,
    pub gamma: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub sigma: f64,
    pub gamma_full: Vec<Vec<f64>>,
    pub b_full: Vec<Vec<f64>>,
    pub u_tilde: Vec<Vec<f64>>,
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| m.row(r).iter().copied().collect())
        .collect()
}

fn from_rows(r: &[Vec<f64>]) -> Result<Matrix> {
    let ncols = r.first().map(Vec::len).unwrap_or(0);
    if r.iter().any(|row| row.len() != ncols) {
        return Err(CapError::Validation("ragged matrix in truth record".into()));
    }
    Ok(Matrix::from_fn(r.len(), ncols, |i, j| r[i][j]))
}

impl TruthRecord {
    pub fn from_truth(t: &SimTruth) -> Self {
        Self {
            p: t.gamma.nrows(),
            gamma: rows(&t.gamma),
            b: rows(&t.b),
            sigma: t.sigma,
            gamma_full: rows(&t.gamma_full),
            b_full: rows(&t.b_full),
            u_tilde: t
                .subjects
                .iter()
                .map(|s| s.u_tilde.iter().copied().collect())
                .collect(),
        }
    }

    pub fn gamma(&self) -> Result<Matrix> {
        from_rows(&self.gamma)
    }

    pub fn b(&self) -> Result<Matrix> {
        from_rows(&self.b)
    }
}

/// Population eigenbasis for `p = 5`: first column `1/√5`, column `j ≥ 2`
/// equal to `a e₁ + c (e₂ + … + e₅) - e_j` with `a = 1/√5`, `c = (1 - a)/4`
/// (printed to three decimals as 0.447, 0.138, -0.862).
pub fn gamma_p5() -> Matrix {
    let a = 1.0 / 5f64.sqrt();
    let c = (1.0 - a) / 4.0;
    let mut g = Matrix::zeros(5, 5);
    for r in 0..5 {
        g[(r, 0)] = a;
    }
    for j in 1..5 {
        g[(0, j)] = a;
        for r in 1..5 {
            g[(r, j)] = if r == j { c - 1.0 } else { c };
        }
    }
    // exact in real arithmetic; one polar step removes rounding
    polar_factor(&g).expect("full rank").gamma.into_inner()
}

fn b_full(p: usize) -> Matrix {
    let mut b = Matrix::zeros(p, 3);
    for r in 0..p {
        b[(r, 0)] = 1.0;
    }
    for (k, row) in B_LINKED.iter().enumerate() {
        for j in 0..3 {
            b[(k + 1, j)] = row[j];
        }
    }
    b
}

fn generate(
    gamma_full: Matrix,
    n: usize,
    t: usize,
    rng: &mut Xoshiro256PlusPlus,
) -> Result<(TimeSeriesDataset, SimTruth)> {
    let p = gamma_full.nrows();
    let b_full = b_full(p);
    let complement_idx: Vec<usize> = (0..p).filter(|&j| j != 1 && j != 2).collect();
    let omega = Matrix::from_fn(p, p - 2, |r, c| gamma_full[(r, complement_idx[c])]);
    let bern = Bernoulli::new(0.5).expect("valid probability");

    let mut subjects = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);
    for i in 0..n {
        let x = Vector::from_vec(vec![
            1.0,
            if rng.sample(bern) { 1.0 } else { 0.0 },
            rng.sample(StandardNormal),
        ]);
        let u_tilde = Vector::from_fn(p, |_, _| SIGMA_TRUE * rng.sample::<f64, _>(StandardNormal));
        let log_spec = &b_full * &x + &u_tilde;

        let rotation = sample_haar_orthonormal(p - 2, p - 2, rng)?.into_inner();
        let rotated = &omega * rotation;
        let mut basis = gamma_full.clone();
        for (c, &j) in complement_idx.iter().enumerate() {
            basis.set_column(j, &rotated.column(c));
        }
        let sd = log_spec.map(|v| (0.5 * v).exp());
        let mut factor = basis.clone();
        for j in 0..p {
            factor.column_mut(j).scale_mut(sd[j]);
        }
        let sigma = crate::spd::symmetrize(&(&factor * factor.transpose()));
        // Y_l = Γ̃_i Λ̃_i^{1/2} z_l, stored as rows
        let z = standard_normal_matrix(t, p, rng);
        let signals = z * factor.transpose();
        subjects.push(Subject {
            id: format!("sub{:04}", i + 1),
            signals,
            covariates: x.clone(),
        });
        truths.push(SimSubjectTruth { x, u_tilde, sigma });
    }

    let data = TimeSeriesDataset::new(p, 3, subjects)?;
    let gamma = gamma_full.columns(1, 2).into_owned();
    let b = Matrix::from_fn(2, 3, |k, j| B_LINKED[k][j]);
    Ok((
        data,
        SimTruth {
            gamma_full,
            gamma,
            b,
            b_full,
            sigma: SIGMA_TRUE,
            subjects: truths,
        },
    ))
}

fn check_sizes(n: usize, t: usize) -> Result<()> {
    if n < 2 || t < 2 {
        return Err(CapError::Argument(format!(
            "simulation needs n >= 2 and T >= 2, got n={n}, T={t}"
        )));
    }
    Ok(())
}

/// `p = 5` design with the fixed population eigenbasis of [`gamma_p5`].
pub fn simulate_p5(n: usize, t: usize, seed: u64) -> Result<(TimeSeriesDataset, SimTruth)> {
    check_sizes(n, t)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    generate(gamma_p5(), n, t, &mut rng)
}

/// General `p ≥ 5` design with a uniformly random population eigenbasis.
pub fn simulate_general(
    p: usize,
    n: usize,
    t: usize,
    seed: u64,
) -> Result<(TimeSeriesDataset, SimTruth)> {
    check_sizes(n, t)?;
    if p < 5 {
        return Err(CapError::Argument(format!(
            "simulation needs p >= 5, got {p}"
        )));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let gamma_full = sample_haar_orthonormal(p, p, &mut rng)?.into_inner();
    generate(gamma_full, n, t, &mut rng)
}

/// Dispatches to [`simulate_p5`] for `p = 5` and [`simulate_general`]
/// otherwise.
pub fn simulate(p: usize, n: usize, t: usize, seed: u64) -> Result<(TimeSeriesDataset, SimTruth)> {
    if p == 5 {
        simulate_p5(n, t, seed)
    } else {
        simulate_general(p, n, t, seed)
    }
}

/// Intercepts of the linked components in the whitened parametrization:
/// `β₀^(k) + log(γ^(k)ᵀ Σ*⁻¹ γ^(k))`.
pub fn true_tangent_intercept(truth: &SimTruth, sigma_star: &SpdMatrix) -> Result<Vec<f64>> {
    if sigma_star.dim() != truth.gamma.nrows() {
        return Err(CapError::Validation(format!(
            "Σ* is {0}x{0} but the truth has p = {1}",
            sigma_star.dim(),
            truth.gamma.nrows()
        )));
    }
    let inv = sigma_star.inverse();
    Ok((0..truth.gamma.ncols())
        .map(|k| {
            let g = truth.gamma.column(k);
            truth.b[(k, 0)] + g.dot(&(&inv * g)).ln()
        })
        .collect())
}

/// Largest deviation of `Γ̃ᵀΓ̃` from the identity, for sanity checks.
pub fn basis_error(truth: &SimTruth) -> f64 {
    orthonormality_error(&truth.gamma_full)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn printed_constants() {
        let g = gamma_p5();
        assert!(orthonormality_error(&g) < 1e-12);
        for r in 0..5 {
            assert!((g[(r, 0)] - 0.447).abs() < 5e-4);
        }
        let expected = [0.447, -0.862, 0.138, 0.138, 0.138];
        for (r, e) in expected.iter().enumerate() {
            assert!((g[(r, 1)] - e).abs() < 5e-4, "{} vs {e}", g[(r, 1)]);
        }
        assert!((g[(2, 2)] + 0.862).abs() < 5e-4);
        assert!((g[(4, 4)] + 0.862).abs() < 5e-4);
    }

    #[test]
    fn coefficient_rows() {
        let (_, truth) = simulate_p5(12, 3, 1).unwrap();
        let expected = [
            [1.0, 0.0, 0.0],
            [1.0, 0.5, -0.5],
            [1.0, -0.3, 0.3],
            [1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
        ];
        for (r, row) in expected.iter().enumerate() {
            for j in 0..3 {
                assert_eq!(truth.b_full[(r, j)], row[j]);
            }
        }
        let (_, truth) = simulate_general(20, 12, 3, 1).unwrap();
        let plain = (0..20)
            .filter(|&r| truth.b_full.row(r).iter().copied().eq([1.0, 0.0, 0.0]))
            .count();
        assert_eq!(plain, 18);
    }

    #[test]
    fn subject_bases_and_covariances() {
        let (data, truth) = simulate_general(8, 6, 4, 3).unwrap();
        assert_eq!(data.p(), 8);
        assert!(basis_error(&truth) < 1e-10);
        for s in &truth.subjects {
            assert!(SpdMatrix::new(s.sigma.clone()).is_ok());
            // linked directions are eigenvectors with the covariate-driven eigenvalue
            for k in 0..2 {
                let g = truth.gamma.column(k);
                let sg = &s.sigma * g;
                let ev = (truth.b.row(k) * &s.x)[0] + s.u_tilde[k + 1];
                assert!((sg - g * ev.exp()).norm() < 1e-10);
            }
        }
        // complement columns differ between subjects
        let e0 = crate::spd::sym_eigen(&truth.subjects[0].sigma).unwrap();
        let e1 = crate::spd::sym_eigen(&truth.subjects[1].sigma).unwrap();
        assert!((e0.vectors.clone() - e1.vectors.clone()).norm() > 1e-3);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let a = simulate_p5(10, 5, 42).unwrap();
        let b = simulate_p5(10, 5, 42).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_ne!(simulate_p5(10, 5, 43).unwrap().0, a.0);
    }

    #[test]
    fn tangent_intercepts() {
        let (_, truth) = simulate_p5(4, 3, 2).unwrap();
        let id = SpdMatrix::identity(5);
        let v = true_tangent_intercept(&truth, &id).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-14 && (v[1] - 1.0).abs() < 1e-14);
        let e = SpdMatrix::new(Matrix::identity(5, 5) * std::f64::consts::E).unwrap();
        let v = true_tangent_intercept(&truth, &e).unwrap();
        assert!(v[0].abs() < 1e-14 && v[1].abs() < 1e-14);
    }

    #[test]
    fn rejects_tiny_designs() {
        assert!(simulate_p5(1, 10, 0).is_err());
        assert!(simulate_general(4, 10, 10, 0).is_err());
    }
}
