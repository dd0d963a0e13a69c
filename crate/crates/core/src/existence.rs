//! Equilibrium existence for constant power loads.
//!
//! The steady-state load voltages solve `U_L (beta + Y1 u_L) = -P`, which is
//! rewritten as the fixed point `u = F(u) = zeta - A g(u)` with
//! `A = Y1^{-1} diag(P)` entrywise positive and `g(u) = 1/u` componentwise.
//! `F` is increasing, so a pair `h xi < F(h xi)`, `F(zeta) < zeta` brackets a
//! fixed point and the decreasing iteration from `zeta` reaches it.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{self, PerronPair, ReducedNetwork};
use crate::network::{build_admittance, NetworkSpec, NodeId};
use crate::simplex::NelderMead;

/// Newton polish step cap.
const NEWTON_POLISH_STEPS: usize = 20;
const FIXED_POINT_MAX_ITER: usize = 1_000_000;

/// Perron pair of `A = Y1^{-1} diag(P)`, allowing zero loads.
///
/// Columns of zero-power loads vanish, so the pair is computed on the
/// positive block of loaded nodes and extended by `eta_N = A_NS eta_S / chi`.
/// Returns `None` when every load is zero.
pub fn load_perron(a: &DMatrix<f64>) -> Result<Option<PerronPair>> {
    let m = a.nrows();
    let support: Vec<usize> = (0..m)
        .filter(|&j| a.column(j).iter().any(|&v| v != 0.0))
        .collect();
    if support.is_empty() {
        return Ok(None);
    }
    let sub = DMatrix::from_fn(support.len(), support.len(), |i, j| a[(support[i], support[j])]);
    let inner = matrix::perron(&sub)?;
    let mut eta = DVector::zeros(m);
    for (i, &s) in support.iter().enumerate() {
        eta[s] = inner.eta[i];
    }
    if support.len() < m {
        let full = a * &eta / inner.chi;
        for i in 0..m {
            if !support.contains(&i) {
                eta[i] = full[i];
            }
        }
        let norm = eta.norm();
        eta /= norm;
    }
    Ok(Some(PerronPair {
        chi: inner.chi,
        eta: eta.iter().copied().collect(),
    }))
}

/// Necessary threshold `2 sqrt(chi)`; zero when no load draws power.
pub fn threshold_necessary(y1: &DMatrix<f64>, powers: &[f64]) -> Result<f64> {
    let theta = matrix::diag(powers);
    let a = y1
        .clone()
        .lu()
        .solve(&theta)
        .ok_or_else(|| Error::Internal("reduced matrix is singular".into()))?;
    Ok(load_perron(&a)?.map_or(0.0, |p| 2.0 * p.chi.sqrt()))
}

fn check_weights(q: &[f64], a: &DMatrix<f64>) -> Result<()> {
    if q.len() != a.nrows() || !a.is_square() {
        return Err(Error::domain("weight vector and matrix dimensions differ"));
    }
    if q.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
        return Err(Error::domain("weights must be finite and positive"));
    }
    Ok(())
}

fn pair_value(aq: &[f64], q: &[f64], i: usize, j: usize) -> f64 {
    let ri = aq[i] / q[i];
    let rj = aq[j] / q[j];
    let top = ri.max(rj);
    if i == j {
        return 4.0 * ri;
    }
    let xi = aq[i] / q[j];
    let xj = aq[j] / q[i];
    let cross = xi + xj;
    if cross <= 2.0 * top {
        4.0 * top
    } else {
        (xi - xj).powi(2) / (cross - ri - rj)
    }
}

/// Pairwise weight function: `u_ref^2 > f_ij(q)` holds exactly when the
/// admissible scale intervals of loads `i` and `j` overlap.
pub fn f_pair(q: &[f64], a: &DMatrix<f64>, i: usize, j: usize) -> Result<f64> {
    check_weights(q, a)?;
    if i >= q.len() || j >= q.len() {
        return Err(Error::domain("pair index out of range"));
    }
    let aq: Vec<f64> = (a * DVector::from_column_slice(q)).iter().copied().collect();
    Ok(pair_value(&aq, q, i, j))
}

/// `max_{i,j} f_ij(q)`.
pub fn max_f(q: &[f64], a: &DMatrix<f64>) -> Result<f64> {
    check_weights(q, a)?;
    Ok(max_f_unchecked(q, a))
}

fn max_f_unchecked(q: &[f64], a: &DMatrix<f64>) -> f64 {
    let m = q.len();
    let mut aq = vec![0.0; m];
    for i in 0..m {
        let mut s = 0.0;
        for j in 0..m {
            s += a[(i, j)] * q[j];
        }
        aq[i] = s;
    }
    let mut best = 0.0_f64;
    for i in 0..m {
        for j in i..m {
            best = best.max(pair_value(&aq, q, i, j));
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightOptimum {
    /// Minimizing weights, scaled so the largest component is 1.
    pub q: Vec<f64>,
    /// `sqrt(min_q max_ij f_ij(q))`.
    pub tau2: f64,
    pub evaluations: usize,
}

/// Minimizes `max_ij f_ij(q)` over positive weights.
///
/// Works in log coordinates with the last component pinned (the objective is
/// invariant under scaling of `q`), multi-started from `q = 1` and the Perron
/// vector so the result never exceeds either analytic threshold.
pub fn optimize_q(a: &DMatrix<f64>, perron: Option<&PerronPair>) -> Result<WeightOptimum> {
    let m = a.nrows();
    if m == 0 {
        return Err(Error::domain("empty load matrix"));
    }
    let ones = vec![1.0; m];
    if m == 1 {
        return Ok(WeightOptimum {
            q: ones.clone(),
            tau2: max_f_unchecked(&ones, a).sqrt(),
            evaluations: 1,
        });
    }

    let to_q = |x: &[f64]| -> Vec<f64> {
        x.iter().map(|v| v.exp()).chain(std::iter::once(1.0)).collect()
    };
    let to_x = |q: &[f64]| -> Vec<f64> {
        let last = q[m - 1];
        q[..m - 1].iter().map(|v| (v / last).ln()).collect()
    };
    let objective = |x: &[f64]| -> f64 {
        if x.iter().any(|v| !v.is_finite() || v.abs() > 700.0) {
            return f64::INFINITY;
        }
        max_f_unchecked(&to_q(x), a)
    };

    let mut starts = vec![ones];
    if let Some(p) = perron {
        if p.eta.iter().all(|&v| v > 0.0) {
            starts.push(p.eta.clone());
        }
    }

    let optimizer = NelderMead::default();
    let mut evaluations = 0;
    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in &starts {
        let result = optimizer.minimize(objective, &to_x(start));
        evaluations += result.evaluations;
        if best.as_ref().map_or(true, |(_, v)| result.value < *v) {
            best = Some((result.x, result.value));
        }
    }
    let (x, value) = best.expect("at least one start");
    let q = to_q(&x);
    let top = q.iter().cloned().fold(0.0, f64::max);
    Ok(WeightOptimum {
        q: q.iter().map(|v| v / top).collect(),
        tau2: value.sqrt(),
        evaluations,
    })
}

/// Closed-form sufficient thresholds: `tau3` from the Perron vector and
/// `tau4 = 2 sqrt(||A||_inf)` from uniform weights.
pub fn thresholds_analytic(a: &DMatrix<f64>, perron: &PerronPair) -> (f64, f64) {
    let hi = perron.eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = perron.eta.iter().cloned().fold(f64::INFINITY, f64::min);
    let tau3 = perron.chi.sqrt() * (hi + lo) / (hi * lo).sqrt();
    let inf_norm = a
        .row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    (tau3, 2.0 * inf_norm.sqrt())
}

/// Componentwise interval `[h xi, zeta]` mapped into itself by `F`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bracket {
    pub h: f64,
    /// `h xi`, with `xi = 1/q` componentwise (V).
    pub lower: Vec<f64>,
    /// `zeta` (V).
    pub upper: Vec<f64>,
}

/// Evaluates `F(u) = zeta - A (1/u)`.
pub fn fractional_map(zeta: &DVector<f64>, a: &DMatrix<f64>, u: &DVector<f64>) -> DVector<f64> {
    zeta - a * u.map(|v| 1.0 / v)
}

/// Builds the bracket for weights `q` at reference voltage `u_ref`, or
/// `None` when `u_ref^2 <= max f_ij(q)`.
///
/// `h` is taken a hair inside the admissible interval so that
/// `F(h xi) > h xi` holds strictly; both bracket inequalities are verified
/// numerically before returning.
pub fn bracket(q: &[f64], u_ref: f64, a: &DMatrix<f64>) -> Result<Option<Bracket>> {
    check_weights(q, a)?;
    if !(u_ref > 0.0) {
        return Err(Error::domain("reference voltage must be positive"));
    }
    let m = q.len();
    let aq = a * DVector::from_column_slice(q);
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for i in 0..m {
        let disc = u_ref * u_ref - 4.0 * aq[i] / q[i];
        if !(disc > 0.0) {
            return Ok(None);
        }
        let root = disc.sqrt();
        lo = lo.max(0.5 * q[i] * (u_ref - root));
        hi = hi.min(0.5 * q[i] * (u_ref + root));
    }
    if !(lo < hi) || max_f_unchecked(q, a) >= u_ref * u_ref {
        return Ok(None);
    }
    let h = hi - 1e-9 * (hi - lo);
    let lower = DVector::from_iterator(m, q.iter().map(|qi| h / qi));
    let zeta = DVector::from_element(m, u_ref);

    let f_lower = fractional_map(&zeta, a, &lower);
    let f_upper = fractional_map(&zeta, a, &zeta);
    let ok_lower = (0..m).all(|i| f_lower[i] > lower[i]);
    let ok_upper = (0..m).all(|i| f_upper[i] < zeta[i]);
    if !(ok_lower && ok_upper) {
        return Ok(None);
    }
    Ok(Some(Bracket {
        h,
        lower: lower.iter().copied().collect(),
        upper: zeta.iter().copied().collect(),
    }))
}

/// Successive images `F(u_0), F(F(u_0)), ...`.
pub struct FixedPointIterates<'a> {
    zeta: &'a DVector<f64>,
    a: &'a DMatrix<f64>,
    current: DVector<f64>,
}

impl<'a> FixedPointIterates<'a> {
    pub fn new(zeta: &'a DVector<f64>, a: &'a DMatrix<f64>, start: DVector<f64>) -> Self {
        Self {
            zeta,
            a,
            current: start,
        }
    }
}

impl Iterator for FixedPointIterates<'_> {
    type Item = DVector<f64>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.current.iter().any(|&v| !(v > 0.0)) {
            return None;
        }
        self.current = fractional_map(self.zeta, self.a, &self.current);
        Some(self.current.clone())
    }
}

/// Max-norm residual of `U_L (beta + Y1 u) + P`.
pub fn balance_residual(reduced: &ReducedNetwork, powers: &[f64], u: &DVector<f64>) -> f64 {
    let current = &reduced.beta + &reduced.y1 * u;
    (0..u.len())
        .map(|i| (u[i] * current[i] + powers[i]).abs())
        .fold(0.0, f64::max)
}

fn newton_step(reduced: &ReducedNetwork, powers: &[f64], u: &DVector<f64>) -> Option<DVector<f64>> {
    let m = u.len();
    let current = &reduced.beta + &reduced.y1 * u;
    let residual = DVector::from_fn(m, |i, _| u[i] * current[i] + powers[i]);
    let mut jac = DMatrix::from_fn(m, m, |i, j| u[i] * reduced.y1[(i, j)]);
    for i in 0..m {
        jac[(i, i)] += current[i];
    }
    jac.lu().solve(&(-residual))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixedPoint {
    pub u: Vec<f64>,
    /// `||U_L (beta + Y1 u) + P||_inf` (W).
    pub residual: f64,
    pub iterations: usize,
    pub newton_steps: usize,
}

/// Decreasing fixed-point iteration from `zeta` inside the bracket, followed
/// by a bounded Newton polish on the balance residual.
pub fn fixed_point_solve(
    reduced: &ReducedNetwork,
    powers: &[f64],
    u_ref: f64,
    bracket: &Bracket,
) -> Result<FixedPoint> {
    let m = reduced.n_loads();
    let a = reduced.load_matrix(powers)?;
    let zeta = &reduced.zeta;
    let lower = DVector::from_column_slice(&bracket.lower);
    let upper = DVector::from_column_slice(&bracket.upper);
    let slack = 1e-9 * u_ref;

    let mut u = zeta.clone();
    let mut iterations = 0;
    for next in FixedPointIterates::new(zeta, &a, zeta.clone()).take(FIXED_POINT_MAX_ITER) {
        iterations += 1;
        if (0..m).any(|i| next[i] < lower[i] - slack || next[i] > u[i] + slack) {
            return Err(Error::numerical(
                "fixed-point iterate left the bracket or increased",
                (&next - &u).amax(),
            ));
        }
        let step = (&next - &u).amax();
        u = next;
        if step <= 1e-10 * u_ref {
            break;
        }
    }

    let mut newton_steps = 0;
    let mut residual = balance_residual(reduced, powers, &u);
    for _ in 0..NEWTON_POLISH_STEPS {
        if residual <= 1e-13 * u_ref * u_ref {
            break;
        }
        let Some(delta) = newton_step(reduced, powers, &u) else {
            break;
        };
        let candidate = &u + &delta;
        let inside = (0..m).all(|i| candidate[i] >= lower[i] - slack && candidate[i] <= upper[i] + slack);
        if !inside {
            break;
        }
        let r = balance_residual(reduced, powers, &candidate);
        if !(r < residual) {
            break;
        }
        u = candidate;
        residual = r;
        newton_steps += 1;
    }

    Ok(FixedPoint {
        u: u.iter().copied().collect(),
        residual,
        iterations,
        newton_steps,
    })
}

/// Aggregated single-load check with all load nodes merged into one bus.
///
/// Merging the loads sums the reduced balance equations into
/// `u (1'beta + (1'Y1 1) u) = -sum(P)`; the test is its discriminant. Exact
/// when there is a single load, optimistic otherwise. Advisory only.
pub fn single_cpl_check(
    partition: &crate::network::AdmittancePartition,
    k: &[f64],
    u_ref: f64,
    powers: &[f64],
) -> Result<bool> {
    let reduced = matrix::reduce(partition, k, u_ref)?;
    let y_bus: f64 = reduced.y1.iter().sum();
    let drive: f64 = -reduced.beta.iter().sum::<f64>();
    let p_eq: f64 = powers.iter().sum();
    Ok(drive * drive >= 4.0 * y_bus * p_eq)
}

/// Multi-start Newton outcome in the band where no certificate is available.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionSearch {
    pub starts: usize,
    pub seed: u64,
    pub found: bool,
    pub solution: Option<Vec<f64>>,
    pub residual: Option<f64>,
}

/// Damped Newton on the balance residual from one start; returns a strictly
/// positive root meeting `||r||_inf <= 1e-8 u_ref^2`.
pub fn newton_from(
    reduced: &ReducedNetwork,
    powers: &[f64],
    u_ref: f64,
    start: &DVector<f64>,
) -> Option<(DVector<f64>, f64)> {
    let tol = 1e-8 * u_ref * u_ref;
    let mut u = start.clone();
    let mut r = balance_residual(reduced, powers, &u);
    for _ in 0..100 {
        if r <= 1e-3 * tol {
            break;
        }
        let delta = newton_step(reduced, powers, &u)?;
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-6 {
            let candidate = &u + &delta * t;
            let rc = balance_residual(reduced, powers, &candidate);
            if rc.is_finite() && rc < r {
                u = candidate;
                r = rc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (r <= tol && u.iter().all(|&v| v > 0.0)).then_some((u, r))
}

/// Newton from `zeta`, from `(u_ref/2 + eps) 1`, and from `random_starts`
/// seeded points in the box `[u_ref/2, zeta]`. Keeps the root with the
/// largest total voltage.
pub fn search_equilibrium(
    reduced: &ReducedNetwork,
    powers: &[f64],
    u_ref: f64,
    random_starts: usize,
    seed: u64,
) -> SolutionSearch {
    let m = reduced.n_loads();
    let mut starts = vec![
        reduced.zeta.clone(),
        DVector::from_element(m, 0.5 * u_ref + 1e-3 * u_ref),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..random_starts {
        starts.push(DVector::from_fn(m, |i, _| {
            let lo = 0.5 * u_ref;
            lo + rng.random::<f64>() * (reduced.zeta[i] - lo)
        }));
    }
    let mut best: Option<(DVector<f64>, f64)> = None;
    for s in &starts {
        if let Some((u, r)) = newton_from(reduced, powers, u_ref, s) {
            if best.as_ref().map_or(true, |(b, _)| u.sum() > b.sum()) {
                best = Some((u, r));
            }
        }
    }
    SolutionSearch {
        starts: starts.len(),
        seed,
        found: best.is_some(),
        residual: best.as_ref().map(|(_, r)| *r),
        solution: best.map(|(u, _)| u.iter().copied().collect()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExistenceVerdict {
    /// Bracket feasible and the fixed-point solver converged.
    CertifiedExists,
    /// `u_ref <= tau1`: no equilibrium can exist.
    NecessaryFailed,
    /// Between the necessary and sufficient thresholds.
    Undetermined,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertifyOptions {
    pub seed: u64,
    /// Random Newton starts in the undetermined band, on top of the two
    /// deterministic ones.
    pub random_starts: usize,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            random_starts: 15,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExistenceCertificate {
    pub u_ref: f64,
    pub load_ids: Vec<NodeId>,
    pub powers: Vec<f64>,
    /// Necessary threshold `2 sqrt(chi)` (V).
    pub tau1: f64,
    /// Optimized sufficient threshold (V).
    pub tau2: f64,
    /// Perron-vector sufficient threshold (V).
    pub tau3: f64,
    /// Uniform-weight (contraction) sufficient threshold (V).
    pub tau4: f64,
    pub perron_root: f64,
    pub q_star: Vec<f64>,
    pub optimizer_evaluations: usize,
    pub bracket: Option<Bracket>,
    pub verdict: ExistenceVerdict,
    /// Certified equilibrium load voltages (V).
    pub equilibrium: Option<Vec<f64>>,
    pub residual: Option<f64>,
    pub fixed_point_iterations: Option<usize>,
    /// Best-effort root search, run only in the undetermined band.
    pub search: Option<SolutionSearch>,
    /// Merged-bus single-load test; advisory, never a certificate.
    pub single_cpl_advisory: bool,
    pub diagnostics: Vec<String>,
}

impl ExistenceCertificate {
    /// Load voltages usable for linearization: the certified equilibrium, or
    /// a root found without certificate.
    pub fn operating_point(&self) -> Option<&[f64]> {
        self.equilibrium
            .as_deref()
            .or_else(|| self.search.as_ref().and_then(|s| s.solution.as_deref()))
    }

    /// An equilibrium is known, certified or not.
    pub fn solution_found(&self) -> bool {
        self.operating_point().is_some()
    }
}

/// Full existence analysis of a network at its own `u_ref` and loads.
pub fn certify(spec: &NetworkSpec, options: &CertifyOptions) -> Result<ExistenceCertificate> {
    spec.validate()?;
    let partition = build_admittance(spec);
    let k = spec.virtual_resistances();
    let u_ref = spec.control.u_ref;
    let reduced = matrix::reduce(&partition, &k, u_ref)?;
    let mut cert = certify_reduced(&reduced, &spec.load_powers(), u_ref, options)?;
    cert.load_ids = spec.load_ids();
    cert.single_cpl_advisory = single_cpl_check(&partition, &k, u_ref, &spec.load_powers())?;
    Ok(cert)
}

/// Existence analysis on an already reduced network.
pub fn certify_reduced(
    reduced: &ReducedNetwork,
    powers: &[f64],
    u_ref: f64,
    options: &CertifyOptions,
) -> Result<ExistenceCertificate> {
    let m = reduced.n_loads();
    let a = reduced.load_matrix(powers)?;
    let mut cert = ExistenceCertificate {
        u_ref,
        load_ids: Vec::new(),
        powers: powers.to_vec(),
        tau1: 0.0,
        tau2: 0.0,
        tau3: 0.0,
        tau4: 0.0,
        perron_root: 0.0,
        q_star: vec![1.0; m],
        optimizer_evaluations: 0,
        bracket: None,
        verdict: ExistenceVerdict::Undetermined,
        equilibrium: None,
        residual: None,
        fixed_point_iterations: None,
        search: None,
        single_cpl_advisory: true,
        diagnostics: Vec::new(),
    };

    let Some(perron) = load_perron(&a)? else {
        // No load current: F is constant and zeta is the equilibrium.
        let zeta: Vec<f64> = reduced.zeta.iter().copied().collect();
        cert.bracket = Some(Bracket {
            h: 1.0,
            lower: zeta.clone(),
            upper: zeta.clone(),
        });
        cert.residual = Some(balance_residual(reduced, powers, &reduced.zeta));
        cert.equilibrium = Some(zeta);
        cert.fixed_point_iterations = Some(1);
        cert.verdict = ExistenceVerdict::CertifiedExists;
        return Ok(cert);
    };

    cert.perron_root = perron.chi;
    cert.tau1 = 2.0 * perron.chi.sqrt();
    let (tau3, tau4) = thresholds_analytic(&a, &perron);
    cert.tau3 = tau3;
    cert.tau4 = tau4;
    let optimum = optimize_q(&a, Some(&perron))?;
    cert.tau2 = optimum.tau2;
    cert.q_star = optimum.q.clone();
    cert.optimizer_evaluations = optimum.evaluations;

    if u_ref <= cert.tau1 {
        cert.verdict = ExistenceVerdict::NecessaryFailed;
        return Ok(cert);
    }

    if let Some(br) = bracket(&optimum.q, u_ref, &a)? {
        match fixed_point_solve(reduced, powers, u_ref, &br) {
            Ok(fp) => {
                cert.verdict = ExistenceVerdict::CertifiedExists;
                cert.equilibrium = Some(fp.u);
                cert.residual = Some(fp.residual);
                cert.fixed_point_iterations = Some(fp.iterations);
            }
            Err(e) => cert.diagnostics.push(format!("fixed-point solve failed: {e}")),
        }
        cert.bracket = Some(br);
    } else {
        cert.diagnostics
            .push("no Tarski bracket at this reference voltage".to_string());
    }

    if cert.verdict == ExistenceVerdict::Undetermined {
        let search = search_equilibrium(reduced, powers, u_ref, options.random_starts, options.seed);
        cert.diagnostics.push(if search.found {
            "solution found without certificate".to_string()
        } else {
            "no solution found".to_string()
        });
        cert.search = Some(search);
    }
    Ok(cert)
}
