//! Small-signal stability around an equilibrium.
//!
//! Loads are linearized to negative incremental resistances, eliminated to
//! an effective source-side admittance `Y_eq`, and the closed loop with the
//! `X = b K` controller yields the 2n x 2n Jacobian
//! `[[-I/b, -K^{-1}/b], [C^{-1}, -C^{-1} Y_eq]]`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{self, diag};
use crate::network::AdmittancePartition;

/// Margin on the spectral abscissa for the Hurwitz verdict.
pub const HURWITZ_MARGIN: f64 = 1e-9;

/// Incremental conductances `1/r_i = -P_i / u_i^2` of the loads; zero-power
/// loads contribute exactly zero (open circuit).
pub fn cpl_linearize(u: &[f64], powers: &[f64]) -> Result<Vec<f64>> {
    if u.len() != powers.len() {
        return Err(Error::domain("voltage and power vectors differ in length"));
    }
    u.iter()
        .zip(powers)
        .map(|(&ui, &pi)| {
            if pi == 0.0 {
                Ok(0.0)
            } else if ui == 0.0 || !ui.is_finite() {
                Err(Error::domain(format!(
                    "load drawing {pi} W has voltage {ui}; no linearization"
                )))
            } else {
                Ok(-pi / (ui * ui))
            }
        })
        .collect()
}

/// Incremental resistances `r_i = -u_i^2 / P_i`; `None` for open circuits.
pub fn cpl_resistances(conductances: &[f64]) -> Vec<Option<f64>> {
    conductances
        .iter()
        .map(|&g| (g != 0.0).then(|| 1.0 / g))
        .collect()
}

/// `Y_eq = Y_SS - Y_SL (Y_LL + R_L^{-1})^{-1} Y_LS`, symmetrized.
pub fn effective_admittance(partition: &AdmittancePartition, conductances: &[f64]) -> Result<DMatrix<f64>> {
    if conductances.len() != partition.n_loads() {
        return Err(Error::domain("one conductance per load is required"));
    }
    let inner = &partition.y_ll + diag(conductances);
    let lu = inner.lu();
    if !lu.is_invertible() {
        return Err(Error::domain("linearization invalid at this point: Y_LL + R_L^-1 is singular"));
    }
    let solved = lu
        .solve(&partition.y_ls)
        .ok_or_else(|| Error::domain("linearization invalid at this point"))?;
    let y_eq = &partition.y_ss - &partition.y_sl * solved;
    matrix::symmetrize(&y_eq)
}

/// General closed-loop Jacobian `[[-X^{-1} K, -X^{-1}], [C^{-1}, -C^{-1} Y_eq]]`
/// for diagonal virtual inductance `x` and resistance `k`.
pub fn closed_loop_jacobian(y_eq: &DMatrix<f64>, k: &[f64], x: &[f64], c: &[f64]) -> Result<DMatrix<f64>> {
    let n = y_eq.nrows();
    if k.len() != n || x.len() != n || c.len() != n {
        return Err(Error::domain("parameter vectors must match the number of sources"));
    }
    if x.iter().chain(c).any(|&v| !(v > 0.0)) {
        return Err(Error::domain("virtual inductances and capacitances must be positive"));
    }
    let mut j = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        j[(i, i)] = -k[i] / x[i];
        j[(i, n + i)] = -1.0 / x[i];
        j[(n + i, i)] = 1.0 / c[i];
        for l in 0..n {
            j[(n + i, n + l)] = -y_eq[(i, l)] / c[i];
        }
    }
    Ok(j)
}

/// Jacobian for the `X = b K` design: `[[-I/b, -K^{-1}/b], [C^{-1}, -C^{-1} Y_eq]]`.
pub fn jacobian(y_eq: &DMatrix<f64>, k: &[f64], c: &[f64], b: f64) -> Result<DMatrix<f64>> {
    if !(b > 0.0) {
        return Err(Error::domain("b must be positive"));
    }
    if k.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::domain("virtual resistances must be positive"));
    }
    let x: Vec<f64> = k.iter().map(|ki| b * ki).collect();
    closed_loop_jacobian(y_eq, k, &x, c)
}

/// The same spectrum as [`jacobian`] computed as the roots of
/// `det(l^2 C + l (C/b + Y_eq) + (Y_eq + K^{-1})/b)`.
pub fn qep_spectrum(y_eq: &DMatrix<f64>, k: &[f64], c: &[f64], b: f64) -> Result<Vec<Complex64>> {
    let cm = diag(c);
    let kinv: Vec<f64> = k.iter().map(|v| 1.0 / v).collect();
    let d = &cm / b + y_eq;
    let s = (y_eq + diag(&kinv)) / b;
    matrix::solve_qep(&cm, &d, &s)
}

/// Sufficient Hurwitz test: `C + b Y_eq > 0` and `K^{-1} + b Y_eq > 0`.
pub fn theorem3_check(y_eq: &DMatrix<f64>, c: &[f64], k: &[f64], b: f64) -> Result<bool> {
    let kinv: Vec<f64> = k.iter().map(|v| 1.0 / v).collect();
    let first = diag(c) + y_eq * b;
    let second = diag(&kinv) + y_eq * b;
    Ok(matrix::is_positive_definite(&first)? && matrix::is_positive_definite(&second)?)
}

/// Damping bound `b0 = min(-C_min / l1, -1 / (l1 k_max))` with
/// `l1 = lambda_1(Y_eq)`; `None` (unbounded) when `l1 >= 0`.
pub fn b_max(y_eq: &DMatrix<f64>, c: &[f64], k: &[f64]) -> Result<Option<f64>> {
    let lambda1 = matrix::min_symmetric_eigenvalue(y_eq)?;
    Ok(b_bound(lambda1, y_eq.norm(), c, k))
}

fn b_bound(lambda1: f64, scale: f64, c: &[f64], k: &[f64]) -> Option<f64> {
    // a Laplacian Schur complement has lambda1 = 0 up to rounding
    if lambda1 >= -1e-12 * scale {
        return None;
    }
    let c_min = c.iter().cloned().fold(f64::INFINITY, f64::min);
    let k_max = k.iter().cloned().fold(0.0, f64::max);
    Some((-c_min / lambda1).min(-1.0 / (lambda1 * k_max)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StabilityVerdict {
    Stable,
    Unstable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    pub b: f64,
    /// Incremental load resistances (ohm); `None` for zero-power loads.
    pub cpl_resistance: Vec<Option<f64>>,
    pub y_eq: Vec<Vec<f64>>,
    /// Smallest eigenvalue of `Y_eq` (S).
    pub lambda1: f64,
    /// `Y_LL + R_L^{-1}` positive definite.
    pub load_block_positive_definite: bool,
    /// Spectral radius of `-Y1^{-1} R_L^{-1}`, when the reduced matrix is supplied.
    pub load_coupling_radius: Option<f64>,
    /// Jacobian eigenvalues as `[re, im]`.
    pub spectrum: Vec<[f64; 2]>,
    pub spectral_abscissa: f64,
    pub theorem3_holds: bool,
    /// Upper bound on b for the certificate; `None` when unbounded.
    pub b0: Option<f64>,
    pub verdict: StabilityVerdict,
}

/// Linearizes at load voltages `u` and assembles the full report for gain `b`.
pub fn analyze_stability(
    partition: &AdmittancePartition,
    y1: Option<&DMatrix<f64>>,
    u: &[f64],
    powers: &[f64],
    k: &[f64],
    c: &[f64],
    b: f64,
) -> Result<StabilityReport> {
    let g = cpl_linearize(u, powers)?;
    let y_eq = effective_admittance(partition, &g)?;
    let lambda1 = matrix::min_symmetric_eigenvalue(&y_eq)?;
    let load_block = &partition.y_ll + diag(&g);
    let load_block_positive_definite = matrix::is_positive_definite(&load_block)?;

    let load_coupling_radius = match y1 {
        Some(y1) => {
            let coupling = y1
                .clone()
                .lu()
                .solve(&(-diag(&g)))
                .ok_or_else(|| Error::Internal("reduced matrix is singular".into()))?;
            let eig = matrix::dense_eigenvalues(&coupling)?;
            Some(eig.iter().map(|z| z.norm()).fold(0.0, f64::max))
        }
        None => None,
    };

    let j = jacobian(&y_eq, k, c, b)?;
    let spectrum = matrix::dense_eigenvalues(&j)?;
    let abscissa = matrix::spectral_abscissa(&spectrum);
    let theorem3_holds = theorem3_check(&y_eq, c, k, b)?;

    Ok(StabilityReport {
        b,
        cpl_resistance: cpl_resistances(&g),
        y_eq: y_eq.row_iter().map(|r| r.iter().copied().collect()).collect(),
        lambda1,
        load_block_positive_definite,
        load_coupling_radius,
        spectrum: spectrum.iter().map(|z| [z.re, z.im]).collect(),
        spectral_abscissa: abscissa,
        theorem3_holds,
        b0: b_bound(lambda1, y_eq.norm(), c, k),
        verdict: if abscissa < -HURWITZ_MARGIN {
            StabilityVerdict::Stable
        } else {
            StabilityVerdict::Unstable
        },
    })
}
