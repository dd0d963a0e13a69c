//! Combined existence and stability analysis with a single outcome code.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Result;
use crate::existence::{certify, CertifyOptions, ExistenceCertificate, ExistenceVerdict};
use crate::matrix;
use crate::network::{build_admittance, NetworkSpec};
use crate::stability::{analyze_stability, StabilityReport, StabilityVerdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    CertifiedStable,
    ExistsUnstable,
    Undetermined,
    NecessaryFailed,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::CertifiedStable => 0,
            Outcome::ExistsUnstable => 1,
            Outcome::Undetermined => 2,
            Outcome::NecessaryFailed => 3,
        }
    }

    pub fn from_verdicts(existence: ExistenceVerdict, stability: Option<StabilityVerdict>) -> Self {
        match (existence, stability) {
            (ExistenceVerdict::NecessaryFailed, _) => Outcome::NecessaryFailed,
            (ExistenceVerdict::Undetermined, _) => Outcome::Undetermined,
            (ExistenceVerdict::CertifiedExists, Some(StabilityVerdict::Stable)) => Outcome::CertifiedStable,
            (ExistenceVerdict::CertifiedExists, Some(StabilityVerdict::Unstable)) => Outcome::ExistsUnstable,
            (ExistenceVerdict::CertifiedExists, None) => Outcome::Undetermined,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub outcome: Outcome,
    pub exit_code: i32,
    pub existence: ExistenceCertificate,
    /// Linearization at the certified equilibrium, or at a root found
    /// without certificate.
    pub stability: Option<StabilityReport>,
    pub stability_error: Option<String>,
}

/// Certifies existence and, when an operating point is known, stability at
/// the spec's own `b`.
pub fn analyze(spec: &NetworkSpec, options: &CertifyOptions) -> Result<AnalysisReport> {
    let existence = certify(spec, options)?;
    let mut stability = None;
    let mut stability_error = None;
    if let Some(u) = existence.operating_point() {
        let partition = build_admittance(spec);
        let y1 = matrix::reduce(&partition, &spec.virtual_resistances(), spec.control.u_ref)?.y1;
        match analyze_stability(
            &partition,
            Some(&y1),
            u,
            &spec.load_powers(),
            &spec.virtual_resistances(),
            &spec.capacitances(),
            spec.control.b,
        ) {
            Ok(r) => stability = Some(r),
            Err(e) => stability_error = Some(e.to_string()),
        }
    }
    let outcome = Outcome::from_verdicts(existence.verdict, stability.as_ref().map(|s| s.verdict));
    Ok(AnalysisReport {
        outcome,
        exit_code: outcome.exit_code(),
        existence,
        stability,
        stability_error,
    })
}

impl AnalysisReport {
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("report is serializable")
    }

    /// Plain-text rendering of exactly the fields of [`Self::to_json`].
    pub fn to_text(&self) -> String {
        render_text(&self.to_json())
    }
}

/// Indented key/value rendering of a JSON value. Arrays of scalars stay on
/// one line.
pub fn render_text(value: &Value) -> String {
    let mut out = String::new();
    render_into(&mut out, value, 0);
    out
}

fn scalar(v: &Value) -> String {
    match v {
        Value::Null => "none".to_string(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn is_flat(v: &Value) -> bool {
    match v {
        Value::Array(items) => items.iter().all(|i| !i.is_object() && (!i.is_array() || is_flat(i))),
        Value::Object(_) => false,
        _ => true,
    }
}

fn inline(v: &Value) -> String {
    match v {
        Value::Array(items) => format!("[{}]", items.iter().map(inline).collect::<Vec<_>>().join(", ")),
        other => scalar(other),
    }
}

fn render_into(out: &mut String, value: &Value, depth: usize) {
    let pad = "  ".repeat(depth);
    match value {
        Value::Object(map) => {
            for (key, v) in map {
                if is_flat(v) {
                    out.push_str(&format!("{pad}{key}: {}\n", inline(v)));
                } else {
                    out.push_str(&format!("{pad}{key}:\n"));
                    render_into(out, v, depth + 1);
                }
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                if is_flat(v) {
                    out.push_str(&format!("{pad}- {}\n", inline(v)));
                } else {
                    out.push_str(&format!("{pad}- [{i}]\n"));
                    render_into(out, v, depth + 1);
                }
            }
        }
        other => out.push_str(&format!("{pad}{}\n", scalar(other))),
    }
}
