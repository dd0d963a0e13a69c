//! One-parameter sweeps over reference voltage, load scale or damping gain.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::existence::{CertifyOptions, ExistenceVerdict};
use crate::network::NetworkSpec;
use crate::report::{analyze, AnalysisReport};
use crate::stability::StabilityVerdict;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    /// Reference voltage `u_ref` (V).
    Uref,
    /// Uniform factor applied to every base load power.
    Load,
    /// Virtual inductance coefficient `b`.
    B,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Uref => "uref",
            SweepParam::Load => "load",
            SweepParam::B => "b",
        }
    }

    /// Copy of `base` with this parameter set to `value`.
    pub fn apply(self, base: &NetworkSpec, value: f64) -> NetworkSpec {
        let mut spec = base.clone();
        match self {
            SweepParam::Uref => spec.control.u_ref = value,
            SweepParam::Load => spec.loads.iter_mut().for_each(|l| l.power *= value),
            SweepParam::B => spec.control.b = value,
        }
        spec
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAnalysis {
    Existence,
    Stability,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    /// Evenly spaced points, optionally in log space.
    Points { count: usize, log: bool },
    /// Bisection on the change of the analysis predicate.
    Bisect { tolerance: f64 },
}

#[derive(Debug, Clone)]
pub struct SweepRequest {
    pub base: NetworkSpec,
    pub param: SweepParam,
    pub min: f64,
    pub max: f64,
    pub mode: SweepMode,
    pub analysis: SweepAnalysis,
    /// Concurrent evaluations; `None` uses all cores.
    pub jobs: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub existence: ExistenceVerdict,
    pub solution_found: bool,
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
    pub tau4: f64,
    pub stability: Option<StabilityVerdict>,
    pub spectral_abscissa: Option<f64>,
    pub theorem3_holds: Option<bool>,
    pub b0: Option<f64>,
}

impl SweepRow {
    fn from_report(value: f64, report: &AnalysisReport) -> Self {
        let e = &report.existence;
        let s = report.stability.as_ref();
        SweepRow {
            value,
            existence: e.verdict,
            solution_found: e.solution_found(),
            tau1: e.tau1,
            tau2: e.tau2,
            tau3: e.tau3,
            tau4: e.tau4,
            stability: s.map(|s| s.verdict),
            spectral_abscissa: s.map(|s| s.spectral_abscissa),
            theorem3_holds: s.map(|s| s.theorem3_holds),
            b0: s.and_then(|s| s.b0),
        }
    }

    /// Predicate tracked by bisection.
    pub fn predicate(&self, analysis: SweepAnalysis) -> bool {
        let stable = self.stability == Some(StabilityVerdict::Stable);
        match analysis {
            SweepAnalysis::Existence => self.solution_found,
            SweepAnalysis::Stability => stable,
            SweepAnalysis::Both => self.solution_found && stable,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Boundary {
    pub lower: f64,
    pub upper: f64,
    /// Successive bisection brackets, outermost first.
    pub brackets: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub param: SweepParam,
    pub analysis: SweepAnalysis,
    /// Evaluated points in increasing parameter order.
    pub rows: Vec<SweepRow>,
    /// Set when bisection found a predicate change.
    pub boundary: Option<Boundary>,
}

impl SweepRequest {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if !(self.min.is_finite() && self.max.is_finite()) {
            return Err(Error::invalid("range", "bounds must be finite"));
        }
        if self.min > self.max {
            return Err(Error::invalid("range", "min must not exceed max"));
        }
        if !(self.min > 0.0) {
            return Err(Error::invalid("range.min", "parameter values must be positive"));
        }
        match self.mode {
            SweepMode::Points { count, .. } if count < 2 && self.min < self.max => {
                Err(Error::invalid("points", "at least 2 points are required"))
            }
            SweepMode::Bisect { tolerance } if !(tolerance > 0.0) => {
                Err(Error::invalid("bisect", "tolerance must be positive"))
            }
            _ => Ok(()),
        }
    }

    fn evaluate(&self, value: f64) -> Result<SweepRow> {
        let spec = self.param.apply(&self.base, value);
        let options = CertifyOptions { seed: self.seed, ..CertifyOptions::default() };
        Ok(SweepRow::from_report(value, &analyze(&spec, &options)?))
    }

    fn evaluate_all(&self, values: &[f64]) -> Result<Vec<SweepRow>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs.unwrap_or(0))
            .build()
            .map_err(|e| Error::Internal(e.to_string()))?;
        pool.install(|| values.par_iter().map(|&v| self.evaluate(v)).collect())
    }

    pub fn values(&self) -> Vec<f64> {
        if self.min == self.max {
            return vec![self.min];
        }
        let count = match self.mode {
            SweepMode::Points { count, .. } => count,
            SweepMode::Bisect { .. } => 2,
        };
        let log = matches!(self.mode, SweepMode::Points { log: true, .. });
        (0..count)
            .map(|i| {
                let t = i as f64 / (count - 1) as f64;
                if log {
                    (self.min.ln() + t * (self.max.ln() - self.min.ln())).exp()
                } else {
                    self.min + t * (self.max - self.min)
                }
            })
            .collect()
    }
}

pub fn run_sweep(request: &SweepRequest) -> Result<SweepResult> {
    request.validate()?;
    let mut rows = request.evaluate_all(&request.values())?;
    let mut boundary = None;
    if let (SweepMode::Bisect { tolerance }, [lo_row, hi_row]) = (request.mode, rows.as_slice()) {
        let target = lo_row.predicate(request.analysis);
        if target != hi_row.predicate(request.analysis) {
            let (mut lo, mut hi) = (request.min, request.max);
            let mut brackets = vec![(lo, hi)];
            while hi - lo > tolerance {
                let mid = 0.5 * (lo + hi);
                let row = request.evaluate(mid)?;
                if row.predicate(request.analysis) == target {
                    lo = mid;
                } else {
                    hi = mid;
                }
                rows.push(row);
                brackets.push((lo, hi));
            }
            boundary = Some(Boundary { lower: lo, upper: hi, brackets });
        }
    }
    rows.sort_by(|a, b| a.value.total_cmp(&b.value));
    Ok(SweepResult { param: request.param, analysis: request.analysis, rows, boundary })
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        fn opt<T: ToString>(v: Option<T>) -> String {
            v.map(|v| v.to_string()).unwrap_or_default()
        }
        fn verdict<T: Serialize>(v: &T) -> String {
            serde_json::to_value(v).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
        }
        writeln!(
            out,
            "{},existence,solution_found,tau1,tau2,tau3,tau4,stability,spectral_abscissa,theorem3_holds,b0",
            self.param.name()
        )?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.value,
                verdict(&r.existence),
                r.solution_found,
                r.tau1,
                r.tau2,
                r.tau3,
                r.tau4,
                r.stability.as_ref().map(verdict).unwrap_or_default(),
                opt(r.spectral_abscissa),
                opt(r.theorem3_holds),
                opt(r.b0),
            )?;
        }
        if let Some(b) = &self.boundary {
            writeln!(out, "# boundary lower={} upper={}", b.lower, b.upper)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Control, Line, Load, Source};

    fn scalar_spec() -> NetworkSpec {
        NetworkSpec {
            sources: vec![Source { id: 1.into(), input_voltage: 300.0, inductance: 2e-3, capacitance: 2e-3, k: 1.0 }],
            loads: vec![Load { id: 2.into(), power: 1000.0 }],
            lines: vec![Line { a: 1.into(), b: 2.into(), r: 1.0 }],
            control: Control { u_ref: 100.0, b: 1e-3 },
        }
    }

    fn request(mode: SweepMode, min: f64, max: f64) -> SweepRequest {
        SweepRequest {
            base: scalar_spec(),
            param: SweepParam::Uref,
            min,
            max,
            mode,
            analysis: SweepAnalysis::Existence,
            jobs: Some(2),
            seed: 0,
        }
    }

    #[test]
    fn scalar_boundary_is_the_discriminant() {
        // u_ref^2 >= 4 (r + k) P
        let exact = (8000.0f64).sqrt();
        let res = run_sweep(&request(SweepMode::Bisect { tolerance: 1e-3 }, 80.0, 100.0)).unwrap();
        let b = res.boundary.unwrap();
        assert!(b.lower <= exact + 1e-9 && exact <= b.upper + 1e-6, "{b:?}");
        assert!(b.brackets.windows(2).all(|w| w[1].1 - w[1].0 < w[0].1 - w[0].0));
    }

    #[test]
    fn degenerate_range_is_one_row() {
        let res = run_sweep(&request(SweepMode::Points { count: 5, log: false }, 95.0, 95.0)).unwrap();
        assert_eq!(res.rows.len(), 1);
    }

    #[test]
    fn rows_in_parameter_order() {
        let res = run_sweep(&request(SweepMode::Points { count: 7, log: true }, 50.0, 200.0)).unwrap();
        let v: Vec<f64> = res.rows.iter().map(|r| r.value).collect();
        assert!(v.windows(2).all(|w| w[0] < w[1]));
        assert!((v[0] - 50.0).abs() < 1e-12 && (v[6] - 200.0).abs() < 1e-9);
    }
}
