//! Numerical foundations: Hermitian positive-definite factorizations, the
//! Gaussian tail function and its inverse, feasibility projections and a
//! central-difference gradient checker.
//!
//! Complex gradients throughout the crate use the stacked real/imaginary
//! convention: for a real function `f` of a complex entry `z = a + jb`, the
//! reported gradient entry is `∂f/∂a + j ∂f/∂b`.

use nalgebra::{Cholesky, DMatrix, Dyn};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::rates::BeamformerSet;

pub type ComplexMatrix = DMatrix<Complex64>;

const HERMITIAN_TOL: f64 = 1e-10;

/// Returns an error if any entry of `m` is NaN or infinite.
pub fn ensure_finite(m: &ComplexMatrix, what: &str) -> Result<()> {
    if m.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} has non-finite entries")))
    }
}

/// Squared Frobenius norm, i.e. `Tr(M M^H)`.
pub fn power_of(m: &ComplexMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

/// `Re Tr(A^H B)`, the real inner product of two equally shaped matrices.
pub fn re_inner(a: &ComplexMatrix, b: &ComplexMatrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| x.re * y.re + x.im * y.im)
        .sum()
}

/// Real part of the trace of a square matrix.
pub fn re_trace(m: &ComplexMatrix) -> f64 {
    (0..m.nrows()).map(|i| m[(i, i)].re).sum()
}

/// A square complex matrix that is Hermitian and positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct HpdMatrix(ComplexMatrix);

impl HpdMatrix {
    /// Validates squareness, finiteness and Hermitian symmetry; positive
    /// definiteness is checked when the matrix is factored.
    pub fn new(m: ComplexMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::dims(format!(
                "HPD matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        ensure_finite(&m, "HPD matrix")?;
        let scale = m.norm().max(f64::MIN_POSITIVE);
        if (&m - m.adjoint()).norm() > HERMITIAN_TOL * scale {
            return Err(Error::invalid("matrix is not Hermitian"));
        }
        Ok(HpdMatrix(m))
    }

    /// Builds `σ² I + Σ X X^H` for the given factors, symmetrized exactly.
    pub fn noise_plus_grams<'a>(
        dim: usize,
        sigma2: f64,
        factors: impl IntoIterator<Item = &'a ComplexMatrix>,
    ) -> Self {
        let mut m = ComplexMatrix::identity(dim, dim) * Complex64::new(sigma2, 0.0);
        for x in factors {
            m += x * x.adjoint();
        }
        HpdMatrix(hermitian_part(&m))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &ComplexMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.0
    }

    pub fn factor(&self) -> Result<HpdFactor> {
        let fail = || Error::domain("Cholesky factorization failed (matrix not positive definite)");
        let chol = Cholesky::new(self.0.clone()).ok_or_else(fail)?;
        // The complex square root never fails, so check the pivots directly.
        let l = chol.l_dirty();
        let ok = (0..l.nrows()).all(|i| {
            let d = l[(i, i)];
            d.re > 0.0 && d.re.is_finite() && d.im.abs() <= 1e-12 * d.re
        });
        if ok {
            Ok(HpdFactor { chol })
        } else {
            Err(fail())
        }
    }
}

/// `(M + M^H) / 2`.
pub fn hermitian_part(m: &ComplexMatrix) -> ComplexMatrix {
    (m + m.adjoint()) * Complex64::new(0.5, 0.0)
}

/// A Cholesky factorization `M = L L^H` kept around for repeated solves.
#[derive(Debug, Clone)]
pub struct HpdFactor {
    chol: Cholesky<Complex64, Dyn>,
}

impl HpdFactor {
    pub fn logdet(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].re.ln()).sum::<f64>()
    }

    pub fn solve(&self, rhs: &ComplexMatrix) -> ComplexMatrix {
        self.chol.solve(rhs)
    }

    pub fn inverse(&self) -> ComplexMatrix {
        hermitian_part(&self.chol.inverse())
    }
}

/// Natural-log determinant of an HPD matrix via Cholesky.
pub fn logdet_hpd(m: &HpdMatrix) -> Result<f64> {
    ensure_finite(&m.0, "HPD matrix")?;
    let value = m.factor()?.logdet();
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::domain("log-determinant is not finite"))
    }
}

/// Solves `M X = rhs` for HPD `M`.
pub fn solve_hpd(m: &HpdMatrix, rhs: &ComplexMatrix) -> Result<ComplexMatrix> {
    if rhs.nrows() != m.dim() {
        return Err(Error::dims(format!(
            "cannot solve {}x{} system with {} right-hand rows",
            m.dim(),
            m.dim(),
            rhs.nrows()
        )));
    }
    ensure_finite(rhs, "right-hand side")?;
    Ok(m.factor()?.solve(rhs))
}

/// Gaussian tail probability `Q(x) = P(N(0,1) > x)`.
pub fn q_function(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Acklam's rational approximation of the standard normal quantile
/// (relative error about 1e-9), used as the starting point for refinement.
#[allow(clippy::excessive_precision)]
fn normal_quantile_approx(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    }
}

/// Inverse Gaussian tail: returns `x` with `Q(x) = eps`.
///
/// Starts from a rational approximation and applies two Halley steps on the
/// erfc-based tail, which brings the absolute error well below 1e-12 over
/// the whole open interval.
pub fn inv_q(eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::invalid(format!(
            "inv_q requires 0 < eps < 1, got {eps}"
        )));
    }
    // y is the lower-tail quantile, Φ(y) = eps; Q^{-1}(eps) = -y.
    let mut y = normal_quantile_approx(eps);
    let sqrt_2pi = (2.0 * std::f64::consts::PI).sqrt();
    for _ in 0..2 {
        let e = q_function(-y) - eps;
        let u = e * sqrt_2pi * (0.5 * y * y).exp();
        y -= u / (1.0 + 0.5 * y * u);
    }
    Ok(-y)
}

/// Radial projection of a beamformer set onto the total-power ball.
pub fn project_power(ws: &BeamformerSet, budget: f64) -> Result<BeamformerSet> {
    if !(budget > 0.0) {
        return Err(Error::invalid(format!(
            "power budget must be positive, got {budget}"
        )));
    }
    let total = ws.total_power();
    if !total.is_finite() {
        return Err(Error::invalid("beamformers have non-finite entries"));
    }
    if total <= budget * (1.0 + 1e-12) {
        return Ok(ws.clone());
    }
    Ok(ws.scaled((budget / total).sqrt()))
}

/// Clamps active entries onto the closed unit disk and zeroes inactive ones.
pub fn project_unit_disk(theta: &[Complex64], active: &[bool]) -> Result<Vec<Complex64>> {
    if theta.len() != active.len() {
        return Err(Error::dims(format!(
            "mask length {} does not match vector length {}",
            active.len(),
            theta.len()
        )));
    }
    Ok(theta
        .iter()
        .zip(active)
        .map(|(&z, &on)| {
            if on {
                clamp_unit(z)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect())
}

pub(crate) fn clamp_unit(z: Complex64) -> Complex64 {
    let r = z.norm();
    if r > 1.0 {
        let u = z / r;
        if u.norm() > 1.0 {
            u * (1.0 - f64::EPSILON)
        } else {
            u
        }
    } else {
        z
    }
}

/// Compares a claimed gradient with central differences.
///
/// The step for coordinate `i` is `1e-6 (1 + |x_i|)`. The result is the
/// largest coordinate discrepancy relative to the larger infinity norm of
/// the two gradients (zero when both vanish).
pub fn fd_gradient_check(f: impl Fn(&[f64]) -> f64, x: &[f64], g: &[f64]) -> Result<f64> {
    if x.len() != g.len() {
        return Err(Error::dims("gradient length differs from point length"));
    }
    let mut probe = x.to_vec();
    let mut fd = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let h = 1e-6 * (1.0 + x[i].abs());
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::domain(format!(
                "non-finite function value near coordinate {i}"
            )));
        }
        fd.push((up - down) / (2.0 * h));
    }
    let scale = fd
        .iter()
        .chain(g.iter())
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok(fd
        .iter()
        .zip(g)
        .map(|(a, b)| (a - b).abs() / scale)
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, cols: usize) -> ComplexMatrix {
        ComplexMatrix::from_fn(r, cols, |_, _| {
            c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        })
    }

    fn random_hpd(rng: &mut ChaCha8Rng, n: usize) -> HpdMatrix {
        let x = random_matrix(rng, n, n + 1);
        HpdMatrix::noise_plus_grams(n, 0.1, [&x])
    }

    fn bisect_inv_q(eps: f64) -> f64 {
        let (mut lo, mut hi) = (-40.0, 40.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if q_function(mid) > eps {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn logdet_trivial_cases() {
        let id = HpdMatrix::new(ComplexMatrix::identity(3, 3)).unwrap();
        assert_eq!(logdet_hpd(&id).unwrap(), 0.0);
        let two = HpdMatrix::new(ComplexMatrix::from_diagonal_element(2, 2, c(2.0, 0.0))).unwrap();
        assert!((logdet_hpd(&two).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logdet_matches_eigenvalue_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..6 {
            let a = random_hpd(&mut rng, n);
            let eig = SymmetricEigen::new(a.as_matrix().clone());
            let oracle: f64 = eig.eigenvalues.iter().map(|l| l.ln()).sum();
            let got = logdet_hpd(&a).unwrap();
            assert!(
                (got - oracle).abs() <= 1e-10 * oracle.abs().max(1.0),
                "{got} vs {oracle}"
            );
        }
    }

    #[test]
    fn logdet_additive_over_commuting_diagonals() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let d1: Vec<f64> = (0..4).map(|_| 0.1 + rng.random::<f64>() * 5.0).collect();
            let d2: Vec<f64> = (0..4).map(|_| 0.1 + rng.random::<f64>() * 5.0).collect();
            let mk = |d: &[f64]| {
                ComplexMatrix::from_fn(4, 4, |i, j| if i == j { c(d[i], 0.0) } else { c(0.0, 0.0) })
            };
            let a = mk(&d1);
            let b = mk(&d2);
            let ab = HpdMatrix::new(&a * &b).unwrap();
            let lhs = logdet_hpd(&ab).unwrap();
            let rhs = logdet_hpd(&HpdMatrix::new(a).unwrap()).unwrap()
                + logdet_hpd(&HpdMatrix::new(b).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn logdet_errors() {
        let mut bad = ComplexMatrix::identity(2, 2);
        bad[(0, 1)] = c(f64::NAN, 0.0);
        assert!(matches!(HpdMatrix::new(bad), Err(Error::InvalidInput(_))));
        let indefinite =
            HpdMatrix::new(ComplexMatrix::from_diagonal_element(2, 2, c(-1.0, 0.0))).unwrap();
        assert!(matches!(
            logdet_hpd(&indefinite),
            Err(Error::NumericDomain(_))
        ));
        let not_herm = ComplexMatrix::from_row_slice(
            2,
            2,
            &[c(1.0, 0.0), c(0.5, 0.0), c(0.0, 0.0), c(1.0, 0.0)],
        );
        assert!(HpdMatrix::new(not_herm).is_err());
    }

    #[test]
    fn solve_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = random_matrix(&mut rng, 3, 2);
        let id = HpdMatrix::new(ComplexMatrix::identity(3, 3)).unwrap();
        assert!((solve_hpd(&id, &b).unwrap() - &b).norm() < 1e-15);
        let two = HpdMatrix::new(ComplexMatrix::identity(3, 3) * c(2.0, 0.0)).unwrap();
        let half = solve_hpd(&two, &ComplexMatrix::identity(3, 3)).unwrap();
        assert!((half - ComplexMatrix::identity(3, 3) * c(0.5, 0.0)).norm() < 1e-15);
        for n in 1..6 {
            let m = random_hpd(&mut rng, n);
            let rhs = random_matrix(&mut rng, n, 3);
            let x = solve_hpd(&m, &rhs).unwrap();
            assert!((m.as_matrix() * &x - &rhs).norm() <= 1e-10 * rhs.norm());
        }
        assert!(matches!(
            solve_hpd(&id, &ComplexMatrix::zeros(2, 1)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn inv_q_values() {
        assert!(inv_q(0.5).unwrap().abs() < 1e-15);
        for eps in [1e-5, 5e-6] {
            let oracle = bisect_inv_q(eps);
            assert!((inv_q(eps).unwrap() - oracle).abs() < 1e-10);
        }
        assert!((inv_q(1e-5).unwrap() - 4.264891).abs() < 1e-6);
        assert!((inv_q(5e-6).unwrap() - 4.417173).abs() < 1e-6);
        for eps in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(inv_q(eps).is_err());
        }
    }

    #[test]
    fn inv_q_round_trip() {
        for eps in [1e-2, 1e-5, 5e-6, 1e-9, 0.3, 0.9, 1e-15] {
            let x = inv_q(eps).unwrap();
            assert!(((q_function(x) - eps) / eps).abs() <= 1e-8, "eps={eps}");
        }
    }

    #[test]
    fn power_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ws = BeamformerSet::new(
            random_matrix(&mut rng, 2, 2),
            vec![random_matrix(&mut rng, 2, 2); 3],
        );
        let p = ws.total_power();
        assert_eq!(project_power(&ws, 2.0 * p).unwrap(), ws);
        assert_eq!(project_power(&ws, p).unwrap(), ws);
        let proj = project_power(&ws, p / 4.0).unwrap();
        assert!((proj.wc.clone() - ws.wc.clone() * c(0.5, 0.0)).norm() < 1e-14);
        assert!((proj.total_power() - p / 4.0).abs() < 1e-14);
        assert_eq!(project_power(&proj, p / 4.0).unwrap(), proj);
        assert!(project_power(&ws, 0.0).is_err());
    }

    #[test]
    fn unit_disk_projection() {
        let inside = Complex64::from_polar(0.5, std::f64::consts::FRAC_PI_4);
        let outside = Complex64::from_polar(2.0, std::f64::consts::FRAC_PI_3);
        let out = project_unit_disk(&[inside, outside, outside], &[true, true, false]).unwrap();
        assert_eq!(out[0], inside);
        assert!((out[1] - Complex64::from_polar(1.0, std::f64::consts::FRAC_PI_3)).norm() < 1e-15);
        assert_eq!(out[2], c(0.0, 0.0));
        assert!(project_unit_disk(&[inside], &[true, false]).is_err());
    }

    #[test]
    fn fd_check_trivial() {
        let x = [0.3, -1.2, 2.0];
        let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let err = fd_gradient_check(|y| y.iter().map(|v| v * v).sum(), &x, &g).unwrap();
        assert!(err <= 1e-6);
        assert_eq!(fd_gradient_check(|_| 4.0, &x, &[0.0; 3]).unwrap(), 0.0);
        assert!(fd_gradient_check(|_| f64::NAN, &x, &[0.0; 3]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn project_power_idempotent(entries in proptest::collection::vec(-3.0f64..3.0, 16), budget in 0.01f64..10.0) {
                let m = |o: usize| ComplexMatrix::from_fn(2, 2, |i, j| Complex64::new(entries[o + 2 * i + j], entries[o + 4 + 2 * i + j]));
                let ws = BeamformerSet::new(m(0), vec![m(8)]);
                let once = project_power(&ws, budget).unwrap();
                prop_assert!(once.total_power() <= budget * (1.0 + 1e-12));
                prop_assert_eq!(project_power(&once, budget).unwrap(), once);
            }

            #[test]
            fn project_disk_idempotent(parts in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0, any::<bool>()), 1..12)) {
                let theta: Vec<Complex64> = parts.iter().map(|(a, b, _)| Complex64::new(*a, *b)).collect();
                let mask: Vec<bool> = parts.iter().map(|p| p.2).collect();
                let once = project_unit_disk(&theta, &mask).unwrap();
                let twice = project_unit_disk(&once, &mask).unwrap();
                prop_assert_eq!(&once, &twice);
                for (z, on) in once.iter().zip(&mask) {
                    if *on {
                        prop_assert!(z.norm() <= 1.0 + 1e-15);
                    } else {
                        prop_assert!(z.re.to_bits() == 0 && z.im.to_bits() == 0);
                    }
                }
            }
        }
    }
}
