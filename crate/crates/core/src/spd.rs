//! Dense symmetric and SPD matrix primitives.
//!
//! Every matrix function in the crate goes through [`sym_eigen`], a cyclic
//! Jacobi eigensolver. Matrices here are small (p is at most a few dozen), so
//! Jacobi's accuracy matters more than its cubic-per-sweep cost.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CapError, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative asymmetry accepted by [`sym_eigen`] and [`SpdMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Smallest admissible eigenvalue relative to the largest.
pub const PD_REL_TOL: f64 = 1e-12;

const MAX_SWEEPS: usize = 64;

/// Eigendecomposition `A = Q diag(values) Qᵀ` with eigenvalues in
/// descending order and eigenvectors as the columns of `vectors`.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vector,
    pub vectors: Matrix,
}

impl SymEigen {
    /// `Q f(D) Qᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for k in 0..n {
            let fk = f(self.values[k]);
            scaled.column_mut(k).scale_mut(fk);
        }
        let out = &scaled * self.vectors.transpose();
        symmetrize(&out)
    }

    pub fn reconstruct(&self) -> Matrix {
        self.map(|x| x)
    }
}

pub fn symmetrize(a: &Matrix) -> Matrix {
    (a + a.transpose()) * 0.5
}

fn check_symmetric(a: &Matrix, context: &str) -> Result<()> {
    if !a.is_square() {
        return Err(CapError::Validation(format!(
            "{context}: expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(CapError::Validation(format!(
            "{context}: matrix has non-finite entries"
        )));
    }
    let asym = (a - a.transpose()).norm();
    if asym > SYMMETRY_TOL * a.norm() {
        return Err(CapError::Validation(format!(
            "{context}: matrix is not symmetric (asymmetry {asym:e})"
        )));
    }
    Ok(())
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn sym_eigen(a: &Matrix) -> Result<SymEigen> {
    check_symmetric(a, "sym_eigen")?;
    Ok(jacobi(symmetrize(a)))
}

fn jacobi(mut a: Matrix) -> SymEigen {
    let n = a.nrows();
    let mut v = Matrix::identity(n, n);
    let scale = a.norm();
    if n > 1 && scale > 0.0 {
        for _ in 0..MAX_SWEEPS {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += a[(p, q)] * a[(p, q)];
                }
            }
            if off.sqrt() <= 1e-17 * scale {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[(p, q)];
                    if apq == 0.0 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = Vector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &v.column(src));
    }
    SymEigen { values, vectors }
}

/// Scalar maps applied spectrally by [`spd_function`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpdFunction {
    Log,
    Exp,
    Sqrt,
    InvSqrt,
    Inverse,
}

impl SpdFunction {
    fn apply(self, x: f64) -> f64 {
        match self {
            SpdFunction::Log => x.ln(),
            SpdFunction::Exp => x.exp(),
            SpdFunction::Sqrt => x.sqrt(),
            SpdFunction::InvSqrt => 1.0 / x.sqrt(),
            SpdFunction::Inverse => 1.0 / x,
        }
    }
}

/// A symmetric positive-definite matrix with its eigendecomposition cached.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    matrix: Matrix,
    eigen: SymEigen,
}

impl SpdMatrix {
    pub fn new(a: Matrix) -> Result<Self> {
        Self::with_context(a, "SPD construction")
    }

    pub fn with_context(a: Matrix, context: &str) -> Result<Self> {
        check_symmetric(&a, context)?;
        let matrix = symmetrize(&a);
        let eigen = jacobi(matrix.clone());
        let n = eigen.values.len();
        if n == 0 {
            return Err(CapError::Validation(format!("{context}: empty matrix")));
        }
        let largest = eigen.values[0];
        let smallest = eigen.values[n - 1];
        if !(largest > 0.0) || smallest <= PD_REL_TOL * largest {
            return Err(CapError::NotPositiveDefinite {
                context: context.to_string(),
                eigenvalue: smallest,
            });
        }
        Ok(Self { matrix, eigen })
    }

    pub fn identity(p: usize) -> Self {
        Self::new(Matrix::identity(p, p)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn eigen(&self) -> &SymEigen {
        &self.eigen
    }

    pub fn apply(&self, f: SpdFunction) -> Matrix {
        self.eigen.map(|x| f.apply(x))
    }

    pub fn log_det(&self) -> f64 {
        self.eigen.values.iter().map(|x| x.ln()).sum()
    }

    pub fn inverse(&self) -> Matrix {
        self.apply(SpdFunction::Inverse)
    }
}

/// Applies `f` spectrally. `Exp` accepts any symmetric matrix; the other maps
/// require positive definiteness and fail naming the offending eigenvalue.
pub fn spd_function(a: &Matrix, f: SpdFunction) -> Result<Matrix> {
    match f {
        SpdFunction::Exp => Ok(sym_eigen(a)?.map(f64::exp)),
        _ => Ok(SpdMatrix::with_context(a.clone(), "spd_function")?.apply(f)),
    }
}

pub fn log_det(a: &Matrix) -> Result<f64> {
    Ok(SpdMatrix::with_context(a.clone(), "log_det")?.log_det())
}

/// A `p × d` matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthonormalMatrix(Matrix);

impl OrthonormalMatrix {
    pub const TOL: f64 = 1e-10;

    pub fn new(m: Matrix) -> Result<Self> {
        if m.ncols() > m.nrows() {
            return Err(CapError::Validation(format!(
                "orthonormal matrix needs d <= p, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let err = orthonormality_error(&m);
        if !(err <= Self::TOL) {
            return Err(CapError::Validation(format!(
                "columns are not orthonormal (|GᵀG - I|_F = {err:e})"
            )));
        }
        Ok(Self(m))
    }

    pub(crate) fn new_unchecked(m: Matrix) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }
}

pub fn orthonormality_error(m: &Matrix) -> f64 {
    let d = m.ncols();
    (m.transpose() * m - Matrix::identity(d, d)).norm()
}

/// Polar decomposition `U = Γ S` with `Γ = U (UᵀU)^{-1/2}` and
/// `S = (UᵀU)^{1/2}`.
#[derive(Debug, Clone)]
pub struct Polar {
    pub gamma: OrthonormalMatrix,
    pub stretch: Matrix,
    /// `(UᵀU)^{-1/2}`
    pub inv_sqrt: Matrix,
    /// Eigendecomposition of `UᵀU`.
    pub gram_eigen: SymEigen,
}

pub fn polar_factor(u: &Matrix) -> Result<Polar> {
    if u.ncols() > u.nrows() || u.ncols() == 0 {
        return Err(CapError::Validation(format!(
            "polar factor needs 1 <= d <= p, got {}x{}",
            u.nrows(),
            u.ncols()
        )));
    }
    if u.iter().any(|x| !x.is_finite()) {
        return Err(CapError::Degenerate(
            "polar factor of non-finite matrix".into(),
        ));
    }
    let gram = symmetrize(&(u.transpose() * u));
    let eig = jacobi(gram);
    let d = eig.values.len();
    let (largest, smallest) = (eig.values[0], eig.values[d - 1]);
    if !(largest > 0.0) || smallest <= PD_REL_TOL * largest {
        return Err(CapError::Degenerate(format!(
            "UᵀU is numerically singular (eigenvalues {largest:e} .. {smallest:e})"
        )));
    }
    let inv_sqrt = eig.map(|x| 1.0 / x.sqrt());
    let stretch = eig.map(f64::sqrt);
    let gamma = OrthonormalMatrix::new_unchecked(u * &inv_sqrt);
    Ok(Polar {
        gamma,
        stretch,
        inv_sqrt,
        gram_eigen: eig,
    })
}

/// Whitening-transport tangent map `log(W Σ W)` with `W = Σ*^{-1/2}`.
pub fn tangent_map(sigma: &SpdMatrix, ref_inv_sqrt: &Matrix) -> Result<Matrix> {
    let inner = symmetrize(&(ref_inv_sqrt * sigma.matrix() * ref_inv_sqrt));
    Ok(SpdMatrix::with_context(inner, "tangent_map")?.apply(SpdFunction::Log))
}

/// Unnormalized MACG log-density `-(d/2) log|Ψ| - (p/2) log|ΓᵀΨ⁻¹Γ|`.
pub fn macg_log_density(gamma: &OrthonormalMatrix, psi: &SpdMatrix) -> Result<f64> {
    let (p, d) = (gamma.nrows(), gamma.ncols());
    if psi.dim() != p {
        return Err(CapError::Validation(format!(
            "MACG: Ψ is {}x{} but Γ has {p} rows",
            psi.dim(),
            psi.dim()
        )));
    }
    let g = gamma.matrix();
    let inner = symmetrize(&(g.transpose() * psi.inverse() * g));
    let inner = SpdMatrix::with_context(inner, "MACG ΓᵀΨ⁻¹Γ")?;
    Ok(-(d as f64) / 2.0 * psi.log_det() - (p as f64) / 2.0 * inner.log_det())
}

pub fn standard_normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Uniform draw from the Stiefel manifold of `p × d` orthonormal matrices.
pub fn sample_haar_orthonormal<R: Rng + ?Sized>(
    p: usize,
    d: usize,
    rng: &mut R,
) -> Result<OrthonormalMatrix> {
    if d == 0 || d > p {
        return Err(CapError::Argument(format!(
            "Haar sample needs 1 <= d <= p, got p={p}, d={d}"
        )));
    }
    loop {
        let u = standard_normal_matrix(p, d, rng);
        if let Ok(polar) = polar_factor(&u) {
            return Ok(polar.gamma);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::from_row_slice(rows, cols, data)
    }

    fn random_symmetric(n: usize, rng: &mut Xoshiro256PlusPlus) -> Matrix {
        let g = standard_normal_matrix(n, n, rng);
        symmetrize(&g)
    }

    fn random_spd(n: usize, rng: &mut Xoshiro256PlusPlus) -> Matrix {
        let g = standard_normal_matrix(n, n + 2, rng);
        &g * g.transpose() + Matrix::identity(n, n) * 0.1
    }

    #[test]
    fn identity_eigenvalues() {
        let e = sym_eigen(&Matrix::identity(3, 3)).unwrap();
        assert_eq!(e.values.as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn two_by_two_eigenpairs() {
        let e = sym_eigen(&m(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-14);
        assert!((e.values[1] - 1.0).abs() < 1e-14);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let v0 = e.vectors.column(0);
        let v1 = e.vectors.column(1);
        assert!((v0[0].abs() - h).abs() < 1e-14 && (v0[0] - v0[1]).abs() < 1e-14);
        assert!((v1[0].abs() - h).abs() < 1e-14 && (v1[0] + v1[1]).abs() < 1e-14);
    }

    #[test]
    fn random_reconstruction() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        for _ in 0..50 {
            let a = random_symmetric(5, &mut rng);
            let e = sym_eigen(&a).unwrap();
            assert!((e.reconstruct() - &a).norm() <= 1e-10 * a.norm());
            assert!(orthonormality_error(&e.vectors) < 1e-12);
            for k in 1..5 {
                assert!(e.values[k - 1] >= e.values[k]);
            }
        }
    }

    #[test]
    fn non_symmetric_rejected() {
        let a = m(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(sym_eigen(&a), Err(CapError::Validation(_))));
    }

    #[test]
    fn log_of_identity_and_diagonal() {
        let l = spd_function(&Matrix::identity(4, 4), SpdFunction::Log).unwrap();
        assert_eq!(l.norm(), 0.0);
        let e = std::f64::consts::E;
        let l = spd_function(&m(2, 2, &[e, 0.0, 0.0, e * e]), SpdFunction::Log).unwrap();
        assert!((l - m(2, 2, &[1.0, 0.0, 0.0, 2.0])).norm() < 1e-14);
    }

    #[test]
    fn sqrt_of_two_by_two() {
        let a = m(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let s = spd_function(&a, SpdFunction::Sqrt).unwrap();
        // eigenvalues 3 and 1 on (1,1)/√2 and (1,-1)/√2
        let (r3, r1) = (3f64.sqrt(), 1.0);
        let expected = m(
            2,
            2,
            &[
                (r3 + r1) / 2.0,
                (r3 - r1) / 2.0,
                (r3 - r1) / 2.0,
                (r3 + r1) / 2.0,
            ],
        );
        assert!((&s - expected).norm() < 1e-14);
        assert!((&s * &s - a).norm() < 1e-13);
    }

    #[test]
    fn log_of_indefinite_names_eigenvalue() {
        let a = m(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        match spd_function(&a, SpdFunction::Log) {
            Err(CapError::NotPositiveDefinite { eigenvalue, .. }) => {
                assert!((eigenvalue + 1.0).abs() < 1e-12)
            }
            other => panic!("unexpected {other:?}"),
        }
        // exp accepts any symmetric matrix
        assert!(spd_function(&a, SpdFunction::Exp).is_ok());
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        for _ in 0..100 {
            let a = random_spd(6, &mut rng);
            let l = spd_function(&a, SpdFunction::Log).unwrap();
            let back = spd_function(&l, SpdFunction::Exp).unwrap();
            assert!((back - &a).norm() <= 1e-8 * a.norm());
        }
    }

    #[test]
    fn log_det_values() {
        assert_eq!(log_det(&Matrix::identity(3, 3)).unwrap(), 0.0);
        assert!((log_det(&m(2, 2, &[2.0, 0.0, 0.0, 3.0])).unwrap() - 6f64.ln()).abs() < 1e-15);
        assert!((log_det(&m(2, 2, &[1.0, 0.5, 0.5, 1.0])).unwrap() - 0.75f64.ln()).abs() < 1e-15);
        assert!(matches!(
            log_det(&m(2, 2, &[1.0, 0.0, 0.0, -1.0])),
            Err(CapError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn log_det_matches_eigen_product() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        for _ in 0..50 {
            let a = random_spd(5, &mut rng);
            let prod: f64 = sym_eigen(&a).unwrap().values.iter().product();
            let ld = log_det(&a).unwrap();
            assert!((ld - prod.ln()).abs() <= 1e-10 * prod.ln().abs().max(1.0));
        }
    }

    #[test]
    fn polar_of_orthonormal_and_stretch() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let u = m(3, 2, &[h, 0.0, h, 0.0, 0.0, 1.0]);
        let pol = polar_factor(&u).unwrap();
        assert!((pol.gamma.matrix() - &u).norm() < 1e-15);
        assert!((&pol.stretch - Matrix::identity(2, 2)).norm() < 1e-15);

        let u = m(3, 2, &[2.0, 0.0, 0.0, 3.0, 0.0, 0.0]);
        let pol = polar_factor(&u).unwrap();
        assert!((pol.gamma.matrix() - m(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0])).norm() < 1e-15);
        assert!((&pol.stretch - m(2, 2, &[2.0, 0.0, 0.0, 3.0])).norm() < 1e-14);
    }

    #[test]
    fn polar_rank_deficient_rejected() {
        let u = m(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(matches!(polar_factor(&u), Err(CapError::Degenerate(_))));
    }

    #[test]
    fn tangent_map_cases() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
        let s = SpdMatrix::new(random_spd(4, &mut rng)).unwrap();
        let w = s.apply(SpdFunction::InvSqrt);
        assert!(tangent_map(&s, &w).unwrap().norm() < 1e-10);

        let t = tangent_map(&s, &Matrix::identity(4, 4)).unwrap();
        assert!((t - s.apply(SpdFunction::Log)).norm() < 1e-12);

        let e = std::f64::consts::E;
        let sig = SpdMatrix::new(Matrix::identity(2, 2) * (4.0 * e)).unwrap();
        let w = Matrix::identity(2, 2) * 0.5;
        assert!((tangent_map(&sig, &w).unwrap() - Matrix::identity(2, 2)).norm() < 1e-14);
    }

    #[test]
    fn macg_values() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let g = sample_haar_orthonormal(4, 2, &mut rng).unwrap();
        assert!(macg_log_density(&g, &SpdMatrix::identity(4)).unwrap().abs() < 1e-14);
        let c = SpdMatrix::new(Matrix::identity(4, 4) * 7.3).unwrap();
        assert!(macg_log_density(&g, &c).unwrap().abs() < 1e-12);

        let psi = SpdMatrix::new(Matrix::from_diagonal(&Vector::from_vec(vec![
            4.0, 1.0, 1.0,
        ])))
        .unwrap();
        let e1 = OrthonormalMatrix::new(m(3, 1, &[1.0, 0.0, 0.0])).unwrap();
        let v = macg_log_density(&e1, &psi).unwrap();
        // -(1/2) log 4 - (3/2) log(1/4) = -log 2 + 3 log 2
        assert!((v - 2.0 * 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn haar_scalar_case_is_sign() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        let mut plus = 0;
        for _ in 0..2000 {
            let g = sample_haar_orthonormal(1, 1, &mut rng).unwrap();
            let v = g.matrix()[(0, 0)];
            assert!((v.abs() - 1.0).abs() < 1e-15);
            if v > 0.0 {
                plus += 1;
            }
        }
        // binomial(2000, 1/2): sd ≈ 22.4
        assert!((plus as f64 - 1000.0).abs() < 4.0 * 22.4);
    }

    #[test]
    fn haar_draws_orthonormal() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
        for _ in 0..200 {
            let g = sample_haar_orthonormal(5, 2, &mut rng).unwrap();
            assert!(orthonormality_error(g.matrix()) <= 1e-10);
        }
    }
}
