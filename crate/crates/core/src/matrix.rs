//! Dense numerical kernels: network reduction, Perron pairs, M-matrix tests,
//! symmetric extremal eigenvalues and the quadratic eigenvalue problem.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::AdmittancePartition;

/// Relative asymmetry above which a "symmetric" input is rejected.
pub const SYMMETRY_TOL: f64 = 1e-10;

const PERRON_MAX_ITER: usize = 100_000;
const PERRON_TOL: f64 = 1e-12;

/// Load-side equivalent of the network after eliminating the sources.
///
/// The steady-state load balance reads `U_L (beta + Y1 u_L) = -P`.
#[derive(Debug, Clone)]
pub struct ReducedNetwork {
    /// m x m reduced conductance matrix (S).
    pub y1: DMatrix<f64>,
    /// Source injection term (A).
    pub beta: DVector<f64>,
    /// Open-circuit load voltage `-Y1^{-1} beta` (V).
    pub zeta: DVector<f64>,
    /// Virtual resistances (ohm).
    pub k: Vec<f64>,
}

/// Eliminates the source nodes and their virtual resistances:
/// `Y1 = Y_LL - Y_LS K (I + Y_SS K)^{-1} Y_SL`, `beta = Y_LS (I + K Y_SS)^{-1} u_ref 1`.
///
/// Written without `K^{-1}` so that `k_i = 0` (ideal voltage source) is allowed.
pub fn reduce(partition: &AdmittancePartition, k: &[f64], u_ref: f64) -> Result<ReducedNetwork> {
    let n = partition.n_sources();
    if k.len() != n {
        return Err(Error::domain(format!(
            "expected {n} virtual resistances, got {}",
            k.len()
        )));
    }
    if k.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
        return Err(Error::domain("virtual resistances must be finite and nonnegative"));
    }
    let kd = DMatrix::from_diagonal(&DVector::from_column_slice(k));
    let eye = DMatrix::<f64>::identity(n, n);

    let right = (&eye + &partition.y_ss * &kd).lu();
    let w = right
        .solve(&partition.y_sl)
        .ok_or_else(|| Error::Internal("singular source block in reduction".into()))?;
    let y1 = &partition.y_ll - &partition.y_ls * &kd * w;
    let y1 = symmetrize(&y1)?;

    let left = (&eye + &kd * &partition.y_ss).lu();
    let drive = left
        .solve(&DVector::from_element(n, u_ref))
        .ok_or_else(|| Error::Internal("singular source block in reduction".into()))?;
    let beta = &partition.y_ls * drive;

    let zeta = y1
        .clone()
        .lu()
        .solve(&(-&beta))
        .ok_or_else(|| Error::Internal("reduced matrix is singular".into()))?;

    Ok(ReducedNetwork {
        y1,
        beta,
        zeta,
        k: k.to_vec(),
    })
}

impl ReducedNetwork {
    pub fn n_loads(&self) -> usize {
        self.y1.nrows()
    }

    /// `Y1^{-1} diag(P)`, the positive matrix driving every existence test.
    pub fn load_matrix(&self, powers: &[f64]) -> Result<DMatrix<f64>> {
        let m = self.n_loads();
        if powers.len() != m {
            return Err(Error::domain(format!("expected {m} load powers, got {}", powers.len())));
        }
        let theta = DMatrix::from_diagonal(&DVector::from_column_slice(powers));
        self.y1
            .clone()
            .lu()
            .solve(&theta)
            .ok_or_else(|| Error::Internal("reduced matrix is singular".into()))
    }

    /// Explicit `Y1^{-1}`.
    pub fn y1_inverse(&self) -> Result<DMatrix<f64>> {
        self.y1
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Internal("reduced matrix is singular".into()))
    }
}

/// Rejects matrices whose relative asymmetry exceeds [`SYMMETRY_TOL`] and
/// returns `(A + A^T) / 2` otherwise.
pub fn symmetrize(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::domain("matrix is not square"));
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let skew = (a - a.transpose()).amax();
    if skew > SYMMETRY_TOL * scale {
        return Err(Error::domain(format!(
            "matrix is not symmetric (relative asymmetry {:.3e})",
            skew / scale
        )));
    }
    Ok((a + a.transpose()) * 0.5)
}

/// Spectral radius and positive unit eigenvector of a positive matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerronPair {
    pub chi: f64,
    pub eta: Vec<f64>,
}

/// Power iteration for the Perron pair of an entrywise-positive matrix.
///
/// Convergence is judged by the Collatz-Wielandt bounds
/// `min_i (Ax)_i/x_i <= chi <= max_i (Ax)_i/x_i`, which pinch together for
/// positive matrices.
pub fn perron(a: &DMatrix<f64>) -> Result<PerronPair> {
    if !a.is_square() || a.nrows() == 0 {
        return Err(Error::domain("Perron pair needs a nonempty square matrix"));
    }
    if a.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::domain("Perron pair needs an entrywise positive matrix"));
    }
    power_iteration(a)
}

/// Power iteration without the positivity precondition. Callers must know
/// the dominant eigenvalue is simple with a positive eigenvector.
pub(crate) fn power_iteration(a: &DMatrix<f64>) -> Result<PerronPair> {
    let m = a.nrows();
    let mut x = DVector::from_element(m, 1.0 / (m as f64).sqrt());
    let mut chi = 0.0;
    let mut converged = false;
    for _ in 0..PERRON_MAX_ITER {
        let y = a * &x;
        let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
        for i in 0..m {
            if x[i] > 0.0 {
                let r = y[i] / x[i];
                lo = lo.min(r);
                hi = hi.max(r);
            }
        }
        let norm = y.norm();
        if norm == 0.0 {
            return Err(Error::domain("matrix annihilates the iterate"));
        }
        x = y / norm;
        chi = 0.5 * (lo + hi);
        if hi - lo <= PERRON_TOL * hi {
            converged = true;
            break;
        }
    }
    let residual = (a * &x - &x * chi).norm();
    if !converged && residual > 1e-10 * chi {
        return Err(Error::numerical(
            "power iteration did not converge within the iteration cap",
            residual,
        ));
    }
    // Refine the root with the Rayleigh-like ratio on the converged vector.
    let ax = a * &x;
    chi = ax.dot(&x) / x.dot(&x);
    Ok(PerronPair {
        chi,
        eta: x.iter().map(|v| v.abs()).collect(),
    })
}

/// Eigenvalues of a general real square matrix via the real Schur form.
pub fn dense_eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    if !a.is_square() {
        return Err(Error::domain("matrix is not square"));
    }
    if a.nrows() == 0 {
        return Ok(Vec::new());
    }
    let schur = nalgebra::Schur::try_new(a.clone(), f64::EPSILON, 1000 * a.nrows())
        .ok_or_else(|| Error::numerical("Schur iteration did not converge", f64::NAN))?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| Complex64::new(z.re, z.im))
        .collect())
}

/// Maximum real part over the spectrum.
pub fn spectral_abscissa(eigenvalues: &[Complex64]) -> f64 {
    eigenvalues
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn check_z_matrix(a: &DMatrix<f64>) -> Result<()> {
    if !a.is_square() {
        return Err(Error::domain("matrix is not square"));
    }
    let n = a.nrows();
    for i in 0..n {
        for j in 0..n {
            if i != j && a[(i, j)] > 0.0 {
                return Err(Error::domain(format!(
                    "not a Z-matrix: entry ({i}, {j}) = {} is positive",
                    a[(i, j)]
                )));
            }
        }
    }
    Ok(())
}

/// M-matrix test for a Z-matrix: nonsingular with an entrywise nonnegative
/// inverse, cross-checked against the spectral abscissa.
pub fn is_m_matrix(a: &DMatrix<f64>) -> Result<bool> {
    check_z_matrix(a)?;
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let by_inverse = match a.clone().try_inverse() {
        Some(inv) => {
            let inv_scale = inv.amax();
            inv.iter().all(|&v| v >= -1e-12 * inv_scale) && inv_scale.is_finite()
        }
        None => false,
    };
    let min_re = -spectral_abscissa(
        &dense_eigenvalues(&(-a))?,
    );
    let by_spectrum = min_re > 0.0;
    if by_inverse != by_spectrum && min_re.abs() > 1e-9 * scale {
        // The inverse test is unreliable only near singularity; a clear
        // spectral margin takes precedence.
        return Ok(by_spectrum);
    }
    Ok(by_inverse)
}

/// Smallest eigenvalue and a unit eigenvector of a symmetric matrix.
pub fn min_symmetric_eigenpair(a: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    let sym = symmetrize(a)?;
    if sym.nrows() == 0 {
        return Err(Error::domain("empty matrix"));
    }
    let eig = sym.symmetric_eigen();
    let (idx, &lambda) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty");
    Ok((lambda, eig.eigenvectors.column(idx).into_owned()))
}

pub fn min_symmetric_eigenvalue(a: &DMatrix<f64>) -> Result<f64> {
    min_symmetric_eigenpair(a).map(|(l, _)| l)
}

/// True iff the symmetric matrix has minimum eigenvalue above `1e-12 * ||A||`.
pub fn is_positive_definite(a: &DMatrix<f64>) -> Result<bool> {
    let lambda = min_symmetric_eigenvalue(a)?;
    Ok(lambda > 1e-12 * a.norm())
}

/// Relative residual bound for accepted QEP eigenvalues.
pub const QEP_RESIDUAL_TOL: f64 = 1e-7;

/// Roots of `det(lambda^2 M + lambda D + S) = 0` via the first companion
/// linearization `[[0, I], [-M^{-1} S, -M^{-1} D]]`.
///
/// Every returned eigenvalue is checked: the smallest singular value of
/// `Q(lambda)` must not exceed `1e-7 (|l|^2 ||M|| + |l| ||D|| + ||S||)`.
pub fn solve_qep(m: &DMatrix<f64>, d: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    let n = m.nrows();
    for (name, mat) in [("M", m), ("D", d), ("S", s)] {
        if mat.nrows() != n || mat.ncols() != n {
            return Err(Error::domain(format!("{name} must be {n}x{n}")));
        }
    }
    let lu = m.clone().lu();
    if !lu.is_invertible() {
        return Err(Error::domain("leading matrix M is singular"));
    }
    let minv_s = lu.solve(s).ok_or_else(|| Error::domain("leading matrix M is singular"))?;
    let minv_d = lu.solve(d).ok_or_else(|| Error::domain("leading matrix M is singular"))?;

    let mut companion = DMatrix::zeros(2 * n, 2 * n);
    companion
        .view_mut((0, n), (n, n))
        .copy_from(&DMatrix::<f64>::identity(n, n));
    companion.view_mut((n, 0), (n, n)).copy_from(&(-minv_s));
    companion.view_mut((n, n), (n, n)).copy_from(&(-minv_d));
    let mut eigenvalues = dense_eigenvalues(&companion)?;

    let (nm, nd, ns) = (m.norm(), d.norm(), s.norm());
    for &lambda in &eigenvalues {
        let residual = qep_residual(m, d, s, lambda);
        let mag = lambda.norm();
        let bound = QEP_RESIDUAL_TOL * (mag * mag * nm + mag * nd + ns);
        if !(residual <= bound) {
            return Err(Error::numerical(
                format!("QEP eigenvalue {lambda} fails the residual check"),
                residual,
            ));
        }
    }
    eigenvalues.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    Ok(eigenvalues)
}

/// Smallest singular value of `lambda^2 M + lambda D + S`, i.e. the best
/// residual `||Q(lambda) v||` over unit vectors `v`.
pub fn qep_residual(m: &DMatrix<f64>, d: &DMatrix<f64>, s: &DMatrix<f64>, lambda: Complex64) -> f64 {
    let n = m.nrows();
    let q = DMatrix::<Complex64>::from_fn(n, n, |i, j| {
        lambda * lambda * m[(i, j)] + lambda * d[(i, j)] + s[(i, j)]
    });
    let nq = q.map(|z| nalgebra::Complex::new(z.re, z.im));
    nq.singular_values()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub(crate) fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(v))
}
