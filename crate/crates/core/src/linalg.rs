//! Dense complex/real linear-algebra kernels used across the crate.
//!
//! Only what the solver needs: the principal eigenpair of a Hermitian
//! matrix, a guarded 5x5 SPD solve, and a few helpers for Hermitian and PSD
//! bookkeeping.

use nalgebra::{DMatrix, DVector, Matrix5, SymmetricEigen, Vector5};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;
pub type Mat5 = Matrix5<f64>;
pub type Vec5 = Vector5<f64>;

/// Dimension up to which the principal eigenpair comes from a full dense
/// decomposition. Larger matrices go through restarted Lanczos.
pub const DENSE_EIGEN_MAX_DIM: usize = 64;

const HERMITIAN_TOL: f64 = 1e-12;

/// A square complex matrix equal to its conjugate transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianMatrix(CMat);

impl HermitianMatrix {
    /// Validates that `m` is Hermitian to within a 1e-12 relative tolerance
    /// and stores its exactly-symmetrized form.
    pub fn new(m: CMat) -> Result<Self> {
        check_square_finite(&m)?;
        let scale = max_abs(&m).max(1.0);
        let n = m.nrows();
        for r in 0..n {
            for c in r..n {
                let diff = (m[(r, c)] - m[(c, r)].conj()).norm();
                if diff > HERMITIAN_TOL * scale {
                    return Err(Error::InvalidInput(format!(
                        "matrix is not Hermitian at ({r},{c}): deviation {diff:.3e}"
                    )));
                }
            }
        }
        Ok(Self::from_symmetrized(m))
    }

    /// Returns ½(M + Mᴴ) without any tolerance check.
    pub fn from_symmetrized(m: CMat) -> Self {
        let h = (&m + m.adjoint()) * Complex64::new(0.5, 0.0);
        HermitianMatrix(h)
    }

    pub fn zeros(dim: usize) -> Self {
        HermitianMatrix(CMat::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        HermitianMatrix(CMat::identity(dim, dim))
    }

    pub fn from_real_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        HermitianMatrix(CMat::from_fn(n, n, |r, c| {
            if r == c {
                Complex64::new(diag[r], 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        }))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &CMat {
        &self.0
    }

    pub fn into_matrix(self) -> CMat {
        self.0
    }

    /// Real part of vᴴ M v (the imaginary part vanishes for Hermitian M).
    pub fn quad_form(&self, v: &CVec) -> f64 {
        v.dotc(&(&self.0 * v)).re
    }

    /// M − μ·other, still Hermitian.
    pub fn sub_scaled(&self, mu: f64, other: &HermitianMatrix) -> HermitianMatrix {
        HermitianMatrix(&self.0 - &other.0 * Complex64::new(mu, 0.0))
    }

    pub fn scale(&self, s: f64) -> HermitianMatrix {
        HermitianMatrix(&self.0 * Complex64::new(s, 0.0))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// Eigenvalue with its unit eigenvector.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub value: f64,
    pub vector: CVec,
}

/// Algebraically largest eigenvalue of `m` and a unit eigenvector for it.
///
/// The eigenvector's global phase is fixed so that its largest-magnitude
/// entry (lowest index on ties) is real and nonnegative, which makes the
/// result reproducible.
pub fn principal_eigenpair(m: &HermitianMatrix) -> Result<EigenPair> {
    check_square_finite(m.as_matrix())?;
    let n = m.dim();
    if n == 0 {
        return Err(Error::InvalidInput("empty matrix".into()));
    }
    let (value, mut vector) = if n <= DENSE_EIGEN_MAX_DIM {
        dense_principal(m.as_matrix())
    } else {
        lanczos_principal(m.as_matrix()).unwrap_or_else(|| dense_principal(m.as_matrix()))
    };
    canonicalize_phase(&mut vector);
    Ok(EigenPair { value, vector })
}

fn dense_principal(m: &CMat) -> (f64, CVec) {
    let eig = SymmetricEigen::new(m.clone());
    let mut best = 0;
    for (k, &val) in eig.eigenvalues.iter().enumerate() {
        if val > eig.eigenvalues[best] {
            best = k;
        }
    }
    let mut v = eig.eigenvectors.column(best).into_owned();
    let norm = v.norm();
    v /= Complex64::new(norm, 0.0);
    (eig.eigenvalues[best], v)
}

/// Restarted Lanczos with full reorthogonalization. Returns `None` on an
/// early breakdown or if the residual target is not met, in which case the
/// caller falls back to the dense decomposition.
fn lanczos_principal(m: &CMat) -> Option<(f64, CVec)> {
    let n = m.nrows();
    let krylov = n.min(48);
    let scale = m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    // Deterministic start with no special alignment to any axis.
    let mut start = CVec::from_fn(n, |i, _| {
        Complex64::new(1.0 + 0.5 * ((i as f64) * 0.618).sin(), 0.3 * ((i as f64) * 1.3).cos())
    });
    start /= Complex64::new(start.norm(), 0.0);

    for _restart in 0..30 {
        let mut basis: Vec<CVec> = vec![start.clone()];
        let mut alpha = Vec::with_capacity(krylov);
        let mut beta: Vec<f64> = Vec::with_capacity(krylov);
        for j in 0..krylov {
            let mut w = m * &basis[j];
            let a = basis[j].dotc(&w).re;
            alpha.push(a);
            // Two passes of Gram-Schmidt against the whole basis.
            for _ in 0..2 {
                for q in &basis {
                    let proj = q.dotc(&w);
                    w -= q * proj;
                }
            }
            let b = w.norm();
            if j + 1 == krylov {
                break;
            }
            if b <= 1e-13 * scale {
                if j + 1 < n {
                    // Invariant subspace smaller than the space: cannot
                    // certify that the largest eigenvalue was captured.
                    return None;
                }
                break;
            }
            beta.push(b);
            basis.push(w / Complex64::new(b, 0.0));
        }
        let k = alpha.len();
        let t = DMatrix::<f64>::from_fn(k, k, |r, c| {
            if r == c {
                alpha[r]
            } else if r + 1 == c {
                beta[r]
            } else if c + 1 == r {
                beta[c]
            } else {
                0.0
            }
        });
        let eig = SymmetricEigen::new(t);
        let mut best = 0;
        for (idx, &val) in eig.eigenvalues.iter().enumerate() {
            if val > eig.eigenvalues[best] {
                best = idx;
            }
        }
        let theta = eig.eigenvalues[best];
        let y = eig.eigenvectors.column(best);
        let mut x = CVec::zeros(n);
        for (q, &yk) in basis.iter().zip(y.iter()) {
            x += q * Complex64::new(yk, 0.0);
        }
        x /= Complex64::new(x.norm(), 0.0);
        let resid = (m * &x - &x * Complex64::new(theta, 0.0)).norm();
        if resid <= 1e-12 * scale {
            return Some((theta, x));
        }
        start = x;
    }
    None
}

fn canonicalize_phase(v: &mut CVec) {
    let mut idx = 0;
    let mut best = -1.0;
    for (k, z) in v.iter().enumerate() {
        let mag = z.norm();
        if mag > best {
            best = mag;
            idx = k;
        }
    }
    if best > 0.0 {
        let rot = v[idx].conj() / best;
        v.iter_mut().for_each(|z| *z *= rot);
        // Remove the rounding residue on the pivot entry.
        v[idx] = Complex64::new(v[idx].re, 0.0);
    }
}

/// Solves M x = b for a real symmetric positive-definite 5x5 `m`.
///
/// Uses Jacobi equilibration, a Cholesky factorization and two steps of
/// iterative refinement. Rejects matrices whose equilibrated form has its
/// smallest eigenvalue below 1e-14 of its trace.
pub fn solve_spd(m: &Mat5, b: &Vec5) -> Result<Vec5> {
    if m.iter().chain(b.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("solve_spd input".into()));
    }
    let sym = symmetrize5(m);
    if (0..5).any(|k| !(sym[(k, k)] > 0.0)) {
        return Err(Error::Singular {
            condition: f64::INFINITY,
            context: "non-positive diagonal entry".into(),
        });
    }
    let s = Vec5::from_fn(|k, _| 1.0 / sym[(k, k)].sqrt());
    let scaled = Mat5::from_fn(|r, c| s[r] * sym[(r, c)] * s[c]);
    let eig = SymmetricEigen::new(scaled);
    let min_eig = eig.eigenvalues.min();
    let max_eig = eig.eigenvalues.max();
    if min_eig <= 1e-14 * scaled.trace() {
        let condition = if min_eig > 0.0 { max_eig / min_eig } else { f64::INFINITY };
        return Err(Error::Singular {
            condition,
            context: format!("smallest equilibrated eigenvalue {min_eig:.3e}"),
        });
    }
    let chol = scaled.cholesky().ok_or_else(|| Error::Singular {
        condition: max_eig / min_eig,
        context: "Cholesky factorization failed".into(),
    })?;
    let solve = |rhs: &Vec5| -> Vec5 {
        let y = chol.solve(&rhs.component_mul(&s));
        y.component_mul(&s)
    };
    let mut x = solve(b);
    for _ in 0..2 {
        let r = b - sym * x;
        x += solve(&r);
    }
    Ok(x)
}

pub fn symmetrize5(m: &Mat5) -> Mat5 {
    (m + m.transpose()) * 0.5
}

/// True when every eigenvalue of the symmetrized `m` is at least
/// −rel_tol·|trace(M)|.
pub fn is_psd5(m: &Mat5, rel_tol: f64) -> bool {
    let sym = symmetrize5(m);
    let eig = SymmetricEigen::new(sym);
    eig.eigenvalues.min() >= -rel_tol * sym.trace().abs()
}

fn check_square_finite(m: &CMat) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidInput(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    Ok(())
}

fn max_abs(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_hermitian(n: usize, rng: &mut ChaCha8Rng) -> HermitianMatrix {
        let m = CMat::from_fn(n, n, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        HermitianMatrix::from_symmetrized(m)
    }

    /// Cyclic Jacobi on a real symmetric matrix; independent of nalgebra's
    /// eigen routines.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|p| (0..n).filter(move |&q| q != p).map(move |q| (p, q)))
                .map(|(p, q)| a[p][q] * a[p][q])
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let cs = 1.0 / (t * t + 1.0).sqrt();
                    let sn = t * cs;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = cs * akp - sn * akq;
                        a[k][q] = sn * akp + cs * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = cs * apk - sn * aqk;
                        a[q][k] = sn * apk + cs * aqk;
                    }
                }
            }
        }
        (0..n).map(|k| a[k][k]).collect()
    }

    /// Largest eigenvalue through the real 2n x 2n embedding [[Re, -Im], [Im, Re]].
    fn oracle_lambda_max(m: &HermitianMatrix) -> f64 {
        let n = m.dim();
        let a = m.as_matrix();
        let mut e = vec![vec![0.0; 2 * n]; 2 * n];
        for r in 0..n {
            for col in 0..n {
                e[r][col] = a[(r, col)].re;
                e[r][col + n] = -a[(r, col)].im;
                e[r + n][col] = a[(r, col)].im;
                e[r + n][col + n] = a[(r, col)].re;
            }
        }
        jacobi_eigenvalues(e).into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn diagonal_principal_pair() {
        let m = HermitianMatrix::from_real_diagonal(&[2.0, 1.0]);
        let p = principal_eigenpair(&m).unwrap();
        assert_eq!(p.value, 2.0);
        assert_eq!(p.vector, CVec::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0)]));
    }

    #[test]
    fn negative_identity_picks_first_axis() {
        let m = HermitianMatrix::identity(3).scale(-1.0);
        let p = principal_eigenpair(&m).unwrap();
        assert!((p.value + 1.0).abs() < 1e-15);
        assert!((p.vector[0] - c(1.0, 0.0)).norm() < 1e-15);
        assert!(p.vector[1].norm() < 1e-15 && p.vector[2].norm() < 1e-15);
    }

    #[test]
    fn random_hermitian_matches_embedding_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let m = random_hermitian(8, &mut rng);
            let p = principal_eigenpair(&m).unwrap();
            let fro = m.frobenius_norm();
            let resid = (m.as_matrix() * &p.vector - &p.vector * c(p.value, 0.0)).norm();
            assert!(resid <= 1e-9 * (1.0 + p.value.abs()) * fro, "residual {resid}");
            assert!((p.vector.norm() - 1.0).abs() < 1e-12);
            let oracle = oracle_lambda_max(&m);
            assert!((p.value - oracle).abs() < 1e-10, "{} vs {}", p.value, oracle);
            assert!((m.quad_form(&p.vector) - p.value).abs() <= 1e-9 * (1.0 + p.value.abs()));
        }
    }

    #[test]
    fn lanczos_path_agrees_with_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_hermitian(90, &mut rng);
        let p = principal_eigenpair(&m).unwrap();
        let (dense_val, mut dense_vec) = dense_principal(m.as_matrix());
        canonicalize_phase(&mut dense_vec);
        assert!((p.value - dense_val).abs() < 1e-10 * dense_val.abs().max(1.0));
        assert!((&p.vector - &dense_vec).norm() < 1e-8);
    }

    #[test]
    fn deterministic_and_phase_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_hermitian(6, &mut rng);
        let a = principal_eigenpair(&m).unwrap();
        let b = principal_eigenpair(&m).unwrap();
        assert_eq!(a, b);
        let (idx, _) = a
            .vector
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.norm().partial_cmp(&y.1.norm()).unwrap())
            .unwrap();
        assert_eq!(a.vector[idx].im, 0.0);
        assert!(a.vector[idx].re > 0.0);
    }

    #[test]
    fn rejects_non_finite_and_non_hermitian() {
        let mut m = CMat::identity(2, 2);
        m[(0, 1)] = c(f64::NAN, 0.0);
        assert!(HermitianMatrix::new(m.clone()).is_err());
        assert!(principal_eigenpair(&HermitianMatrix(m)).is_err());
        let mut m = CMat::identity(2, 2);
        m[(0, 1)] = c(0.5, 0.0);
        assert!(HermitianMatrix::new(m).is_err());
    }

    #[test]
    fn spd_identity_and_scaled() {
        let e2 = Vec5::new(0.0, 1.0, 0.0, 0.0, 0.0);
        assert_eq!(solve_spd(&Mat5::identity(), &e2).unwrap(), e2);
        let e1 = Vec5::new(1.0, 0.0, 0.0, 0.0, 0.0);
        let x = solve_spd(&(Mat5::identity() * 2.0), &e1).unwrap();
        assert!((x - e1 * 0.5).norm() < 1e-15);
    }

    /// Explicit inverse by Gauss-Jordan with partial pivoting.
    fn gauss_jordan_inverse(m: &Mat5) -> Mat5 {
        let mut a = [[0.0; 10]; 5];
        for r in 0..5 {
            for col in 0..5 {
                a[r][col] = m[(r, col)];
            }
            a[r][5 + r] = 1.0;
        }
        for col in 0..5 {
            let piv = (col..5).max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap()).unwrap();
            a.swap(col, piv);
            let p = a[col][col];
            for k in 0..10 {
                a[col][k] /= p;
            }
            for r in 0..5 {
                if r != col {
                    let f = a[r][col];
                    for k in 0..10 {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
        Mat5::from_fn(|r, col| a[r][5 + col])
    }

    #[test]
    fn spd_gram_matches_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let g = Mat5::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let m = g * g.transpose() + Mat5::identity() * 0.1;
            let b = Vec5::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let x = solve_spd(&m, &b).unwrap();
            assert!((m * x - b).norm() <= 1e-10 * b.norm());
            let x_ref = gauss_jordan_inverse(&m) * b;
            assert!((x - x_ref).norm() <= 1e-9 * x_ref.norm().max(1.0));
        }
    }

    #[test]
    fn spd_singular_reports_condition() {
        let mut m = Mat5::identity();
        m[(4, 4)] = 0.0;
        match solve_spd(&m, &Vec5::zeros()) {
            Err(Error::Singular { condition, .. }) => assert!(condition.is_infinite()),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn psd_check() {
        assert!(is_psd5(&Mat5::identity(), 1e-10));
        let mut m = Mat5::identity();
        m[(2, 2)] = -1.0;
        assert!(!is_psd5(&m, 1e-10));
    }

    proptest::proptest! {
        #[test]
        fn eigpair_rayleigh_quotient_matches(seed in 0u64..500, n in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_hermitian(n, &mut rng);
            let p = principal_eigenpair(&m).unwrap();
            let rq = m.quad_form(&p.vector);
            proptest::prop_assert!((rq - p.value).abs() <= 1e-9 * (1.0 + p.value.abs()));
        }

        #[test]
        fn spd_residual_small(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Mat5::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let m = g * g.transpose() + Mat5::identity() * 1e-3;
            let b = Vec5::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let x = solve_spd(&m, &b).unwrap();
            proptest::prop_assert!((m * x - b).norm() <= 1e-10 * b.norm());
        }
    }
}
