//! Time-domain simulation of the averaged closed loop.
//!
//! State is the converter current `i` and source voltage `u_S` per source.
//! Load voltages are algebraic: at every Runge-Kutta stage they are re-solved
//! from `u_i (Y_LS u_S + Y_LL u_L)_i = -P_i` by warm-started Newton.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{build_admittance, parse_network, AdmittancePartition, NetworkSpec, NodeId};

pub const DEFAULT_DT: f64 = 1e-6;
pub const MAX_SAMPLES: usize = 100_000;
const NEWTON_MAX_STEPS: usize = 50;
const COLLAPSE_VOLTAGE: f64 = 1.0;
const DROP_WINDOW: usize = 100;
const DROP_FRACTION: f64 = 0.2;

/// Virtual resistance `k` per source (a scalar applies to all) and gain `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gains {
    Uniform(f64),
    PerSource(Vec<f64>),
}

impl Gains {
    fn expand(&self, n: usize) -> Vec<f64> {
        match self {
            Gains::Uniform(k) => vec![*k; n],
            Gains::PerSource(k) => k.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum Action {
    SetLoads {
        #[serde(rename = "P")]
        powers: Vec<f64>,
    },
    SetController {
        k: Gains,
        b: f64,
    },
    ActivateCpl,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
        match self {
            Action::SetLoads { powers } => write!(f, "set-loads P=[{}]", list(powers)),
            Action::SetController { k: Gains::Uniform(k), b } => write!(f, "set-controller k={k} b={b}"),
            Action::SetController { k: Gains::PerSource(k), b } => {
                write!(f, "set-controller k=[{}] b={b}", list(k))
            }
            Action::ActivateCpl => f.write_str("activate-cpl"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    #[serde(flatten)]
    pub action: Action,
}

/// Explicit initial state; omitted fields fall back to the defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    pub u_s: Option<Vec<f64>>,
    pub i_l: Option<Vec<f64>>,
    pub u_l: Option<Vec<f64>>,
    pub cpl_active: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSettings {
    pub horizon: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub events: Vec<Event>,
    /// Store every n-th step. Defaults to the smallest value keeping the
    /// trace under [`MAX_SAMPLES`].
    #[serde(default)]
    pub decimation: Option<usize>,
    #[serde(default)]
    pub initial: Option<InitialState>,
}

fn default_dt() -> f64 {
    DEFAULT_DT
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub network: NetworkSpec,
    pub settings: ScenarioSettings,
}

#[derive(Deserialize)]
struct ScenarioDocument {
    scenario: serde_json::Value,
}

/// Parses a network document carrying a `scenario` object.
pub fn parse_scenario(document: &str) -> Result<Scenario> {
    let network = parse_network(document)?;
    let doc: ScenarioDocument = serde_json::from_str(document)
        .map_err(|e| Error::invalid("scenario", e.to_string()))?;
    let settings: ScenarioSettings = serde_path_to_error::deserialize(doc.scenario).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { "scenario".to_string() } else { format!("scenario.{path}") };
        Error::invalid(path, e.into_inner().to_string())
    })?;
    let scenario = Scenario { network, settings };
    scenario.validate()?;
    Ok(scenario)
}

impl Scenario {
    pub fn new(network: NetworkSpec, settings: ScenarioSettings) -> Result<Self> {
        network.validate()?;
        let s = Scenario { network, settings };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.settings;
        let (n, m) = (self.network.n_sources(), self.network.n_loads());
        if !(s.horizon.is_finite() && s.horizon > 0.0) {
            return Err(Error::invalid("scenario.horizon", "must be finite and positive"));
        }
        if !(s.dt.is_finite() && s.dt > 0.0 && s.dt <= s.horizon) {
            return Err(Error::invalid("scenario.dt", "must be positive and at most the horizon"));
        }
        if s.decimation == Some(0) {
            return Err(Error::invalid("scenario.decimation", "must be at least 1"));
        }
        let mut last = 0.0;
        for (i, e) in s.events.iter().enumerate() {
            let path = format!("scenario.events[{i}]");
            if !(e.time.is_finite() && e.time >= 0.0) {
                return Err(Error::invalid(format!("{path}.time"), "must be nonnegative"));
            }
            if e.time < last {
                return Err(Error::invalid(format!("{path}.time"), "events must be sorted by time"));
            }
            if e.time > s.horizon {
                return Err(Error::invalid(format!("{path}.time"), "event after the horizon"));
            }
            last = e.time;
            match &e.action {
                Action::SetLoads { powers } => {
                    if powers.len() != m {
                        return Err(Error::invalid(format!("{path}.P"), format!("expected {m} powers")));
                    }
                    if powers.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                        return Err(Error::invalid(format!("{path}.P"), "powers must be nonnegative"));
                    }
                }
                Action::SetController { k, b } => {
                    let k = k.expand(n);
                    if k.len() != n {
                        return Err(Error::invalid(format!("{path}.k"), format!("expected {n} gains")));
                    }
                    if k.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                        return Err(Error::invalid(format!("{path}.k"), "gains must be nonnegative"));
                    }
                    if !(b.is_finite() && *b > 0.0) {
                        return Err(Error::invalid(format!("{path}.b"), "must be positive"));
                    }
                }
                Action::ActivateCpl => {}
            }
        }
        if let Some(init) = &s.initial {
            for (name, v, len) in [("u_s", &init.u_s, n), ("i_l", &init.i_l, n), ("u_l", &init.u_l, m)] {
                if let Some(v) = v {
                    if v.len() != len || v.iter().any(|x| !x.is_finite()) {
                        return Err(Error::invalid(
                            format!("scenario.initial.{name}"),
                            format!("expected {len} finite values"),
                        ));
                    }
                }
            }
            if let Some(u) = &init.u_l {
                if u.iter().any(|x| *x <= 0.0) {
                    return Err(Error::invalid("scenario.initial.u_l", "voltages must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// Controller parameters in force during one phase of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerPhase {
    pub k: Vec<f64>,
    pub b: f64,
}

impl ControllerPhase {
    /// Virtual inductance `X = b k`, or `X = b` for a source with `k = 0`.
    pub fn inductance(&self) -> Vec<f64> {
        self.k
            .iter()
            .map(|&k| if k > 0.0 { self.b * k } else { self.b })
            .collect()
    }
}

/// The fixed plant: network blocks, capacitances and reference voltage.
#[derive(Debug, Clone)]
pub struct Plant {
    pub partition: AdmittancePartition,
    pub capacitance: Vec<f64>,
    pub u_ref: f64,
}

impl Plant {
    pub fn new(spec: &NetworkSpec) -> Self {
        Plant {
            partition: build_admittance(spec),
            capacitance: spec.capacitances(),
            u_ref: spec.control.u_ref,
        }
    }

    pub fn source_currents(&self, u_s: &DVector<f64>, u_l: &DVector<f64>) -> DVector<f64> {
        &self.partition.y_ss * u_s + &self.partition.y_sl * u_l
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub u_s: DVector<f64>,
    pub i_l: DVector<f64>,
    pub u_l: DVector<f64>,
}

impl SimState {
    /// Steady state of the closed loop for load voltages `u_l`:
    /// `u_S = (I + K Y_SS)^{-1} (u_ref 1 - K Y_SL u_L)` and `i = i_S`.
    pub fn equilibrium(plant: &Plant, k: &[f64], u_l: &[f64]) -> Result<Self> {
        let p = &plant.partition;
        let n = p.n_sources();
        let kd = DMatrix::from_diagonal(&DVector::from_column_slice(k));
        let u_l = DVector::from_column_slice(u_l);
        let lhs = DMatrix::identity(n, n) + &kd * &p.y_ss;
        let rhs = DVector::from_element(n, plant.u_ref) - &kd * (&p.y_sl * &u_l);
        let u_s = lhs
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Internal("source equilibrium system is singular".into()))?;
        let i_l = plant.source_currents(&u_s, &u_l);
        Ok(SimState { u_s, i_l, u_l })
    }
}

/// Newton solve of `u_i (Y_LS u_S + Y_LL u_L)_i = -P_i` from `warm_start`.
/// With all powers zero the linear divider is returned directly.
pub fn solve_load_voltages(
    u_s: &DVector<f64>,
    powers: &[f64],
    partition: &AdmittancePartition,
    warm_start: &DVector<f64>,
) -> Result<DVector<f64>> {
    let m = partition.n_loads();
    if powers.len() != m || warm_start.len() != m {
        return Err(Error::domain("one power and one warm-start voltage per load"));
    }
    if warm_start.iter().any(|&u| !(u > 0.0)) {
        return Err(Error::domain("warm start must be positive"));
    }
    let injected = &partition.y_ls * u_s;
    if powers.iter().all(|&p| p == 0.0) {
        return partition
            .y_ll
            .clone()
            .lu()
            .solve(&(-injected))
            .ok_or_else(|| Error::Internal("Y_LL is singular".into()));
    }
    let p = DVector::from_column_slice(powers);
    let tol = 1e-9 * powers.iter().cloned().fold(1.0, f64::max);
    let residual = |u: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
        let i = &injected + &partition.y_ll * u;
        (u.component_mul(&i) + &p, i)
    };

    let mut u = warm_start.clone();
    let (mut g, mut i) = residual(&u);
    let mut norm = g.amax();
    for _ in 0..NEWTON_MAX_STEPS {
        if norm <= tol {
            return Ok(u);
        }
        let mut jac = DMatrix::from_diagonal(&i);
        for r in 0..m {
            for c in 0..m {
                jac[(r, c)] += u[r] * partition.y_ll[(r, c)];
            }
        }
        let delta = jac
            .lu()
            .solve(&(-&g))
            .ok_or_else(|| Error::numerical("singular load-flow Jacobian", norm))?;
        let mut t = 1.0;
        loop {
            let trial = &u + &delta * t;
            if trial.iter().all(|&x| x > 0.0) {
                let (tg, ti) = residual(&trial);
                let tn = tg.amax();
                if tn < norm || t < 1e-3 {
                    u = trial;
                    g = tg;
                    i = ti;
                    norm = tn;
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-6 {
                return Err(Error::numerical("load-flow Newton cannot keep voltages positive", norm));
            }
        }
    }
    if norm <= tol {
        Ok(u)
    } else {
        Err(Error::numerical("load-flow Newton did not converge", norm))
    }
}

fn derivative(
    plant: &Plant,
    phase: &ControllerPhase,
    x: &[f64],
    powers: &[f64],
    u_s: &DVector<f64>,
    i_l: &DVector<f64>,
    warm: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let u_l = solve_load_voltages(u_s, powers, &plant.partition, warm)?;
    let i_s = plant.source_currents(u_s, &u_l);
    let n = u_s.len();
    let di = DVector::from_fn(n, |i, _| (plant.u_ref - phase.k[i] * i_l[i] - u_s[i]) / x[i]);
    let du = DVector::from_fn(n, |i, _| (i_l[i] - i_s[i]) / plant.capacitance[i]);
    Ok((di, du, u_l))
}

/// One classical Runge-Kutta step of `X di/dt = u_ref 1 - K i - u_S`,
/// `C du_S/dt = i - i_S`, re-solving the load voltages at every stage.
pub fn step(
    state: &SimState,
    plant: &Plant,
    phase: &ControllerPhase,
    powers: &[f64],
    dt: f64,
) -> Result<SimState> {
    let x = phase.inductance();
    let (i0, u0) = (&state.i_l, &state.u_s);
    let (k1i, k1u, w1) = derivative(plant, phase, &x, powers, u0, i0, &state.u_l)?;
    let (k2i, k2u, w2) = derivative(
        plant, phase, &x, powers,
        &(u0 + &k1u * (dt / 2.0)), &(i0 + &k1i * (dt / 2.0)), &w1,
    )?;
    let (k3i, k3u, w3) = derivative(
        plant, phase, &x, powers,
        &(u0 + &k2u * (dt / 2.0)), &(i0 + &k2i * (dt / 2.0)), &w2,
    )?;
    let (k4i, k4u, _) = derivative(
        plant, phase, &x, powers,
        &(u0 + &k3u * dt), &(i0 + &k3i * dt), &w3,
    )?;
    let i_l = i0 + (k1i + k2i * 2.0 + k3i * 2.0 + k4i) * (dt / 6.0);
    let u_s = u0 + (k1u + k2u * 2.0 + k3u * 2.0 + k4u) * (dt / 6.0);
    let u_l = solve_load_voltages(&u_s, powers, &plant.partition, &w3)?;
    Ok(SimState { u_s, i_l, u_l })
}

#[derive(Debug, Clone, Serialize)]
pub struct Sample {
    pub t: f64,
    pub u_l: Vec<f64>,
    pub u_s: Vec<f64>,
    pub i_l: Vec<f64>,
    pub i_s: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EventMarker {
    pub time: f64,
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Termination {
    Completed,
    Collapsed { time: f64, node: NodeId, reason: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationTrace {
    pub load_ids: Vec<NodeId>,
    pub source_ids: Vec<NodeId>,
    pub samples: Vec<Sample>,
    pub events: Vec<EventMarker>,
    pub termination: Termination,
}

impl SimulationTrace {
    pub fn collapsed(&self) -> bool {
        matches!(self.termination, Termination::Collapsed { .. })
    }

    pub fn last(&self) -> &Sample {
        self.samples.last().expect("a trace holds at least the initial sample")
    }

    /// Writes the trace as CSV: one row per sample, then event and
    /// termination comment lines.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend(self.load_ids.iter().map(|id| format!("u_{id}")));
        header.extend(self.source_ids.iter().map(|id| format!("us_{id}")));
        header.extend(self.source_ids.iter().map(|id| format!("il_{id}")));
        writeln!(out, "{}", header.join(","))?;
        for s in &self.samples {
            let row: Vec<String> = std::iter::once(s.t)
                .chain(s.u_l.iter().copied())
                .chain(s.u_s.iter().copied())
                .chain(s.i_l.iter().copied())
                .map(|v| format!("{v:.9e}"))
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        for e in &self.events {
            writeln!(out, "# event t={} {}", e.time, e.action)?;
        }
        match &self.termination {
            Termination::Completed => writeln!(out, "# termination completed"),
            Termination::Collapsed { time, node, reason } => {
                writeln!(out, "# termination collapsed t={time} node={node} reason={reason}")
            }
        }
    }
}

struct CollapseMonitor {
    history: VecDeque<f64>,
    falling: usize,
}

impl CollapseMonitor {
    fn new() -> Self {
        CollapseMonitor { history: VecDeque::with_capacity(DROP_WINDOW + 1), falling: 0 }
    }

    /// Returns a reason when `u` shows collapse.
    fn observe(&mut self, u: &DVector<f64>) -> Option<(usize, String)> {
        let (idx, &min) = u
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("at least one load");
        if min <= COLLAPSE_VOLTAGE {
            return Some((idx, format!("load voltage {min:.4} V at or below {COLLAPSE_VOLTAGE} V")));
        }
        if let Some(&prev) = self.history.back() {
            self.falling = if min < prev { self.falling + 1 } else { 0 };
        }
        self.history.push_back(min);
        if self.history.len() > DROP_WINDOW + 1 {
            self.history.pop_front();
        }
        if self.falling >= DROP_WINDOW {
            let start = self.history[0];
            if min <= (1.0 - DROP_FRACTION) * start {
                return Some((idx, format!(
                    "minimum load voltage fell from {start:.4} V to {min:.4} V over {DROP_WINDOW} steps"
                )));
            }
        }
        None
    }
}

fn record(plant: &Plant, t: f64, s: &SimState) -> Sample {
    Sample {
        t,
        u_l: s.u_l.iter().copied().collect(),
        u_s: s.u_s.iter().copied().collect(),
        i_l: s.i_l.iter().copied().collect(),
        i_s: plant.source_currents(&s.u_s, &s.u_l).iter().copied().collect(),
    }
}

/// Runs the scenario to its horizon or until the load voltages collapse.
pub fn simulate(scenario: &Scenario) -> Result<SimulationTrace> {
    scenario.validate()?;
    let spec = &scenario.network;
    let settings = &scenario.settings;
    let plant = Plant::new(spec);
    let (n, m) = (spec.n_sources(), spec.n_loads());
    let load_ids = spec.load_ids();

    let mut phase = ControllerPhase { k: spec.virtual_resistances(), b: spec.control.b };
    let mut powers = spec.load_powers();
    let init = settings.initial.clone().unwrap_or_default();
    let mut active = init
        .cpl_active
        .unwrap_or_else(|| !settings.events.iter().any(|e| e.action == Action::ActivateCpl));
    let effective = |active: bool, p: &[f64]| if active { p.to_vec() } else { vec![0.0; p.len()] };

    let total_steps = (settings.horizon / settings.dt).ceil() as usize;
    let decimation = settings
        .decimation
        .unwrap_or_else(|| total_steps.div_ceil(MAX_SAMPLES - 2).max(1));

    let mut trace = SimulationTrace {
        load_ids: load_ids.clone(),
        source_ids: spec.source_ids(),
        samples: Vec::new(),
        events: Vec::new(),
        termination: Termination::Completed,
    };

    let u_s = DVector::from_vec(init.u_s.unwrap_or_else(|| vec![plant.u_ref; n]));
    let i_l = DVector::from_vec(init.i_l.unwrap_or_else(|| vec![0.0; n]));
    let warm = match init.u_l {
        Some(u) => DVector::from_vec(u),
        None => solve_load_voltages(&u_s, &vec![0.0; m], &plant.partition, &DVector::from_element(m, plant.u_ref))?,
    };
    let mut t = 0.0;
    let collapse = |trace: &mut SimulationTrace, t: f64, node: usize, reason: String| {
        trace.termination = Termination::Collapsed { time: t, node: load_ids[node].clone(), reason };
    };
    let weakest = |u: &DVector<f64>| u.imin();

    let mut state = match solve_load_voltages(&u_s, &effective(active, &powers), &plant.partition, &warm.map(|v| v.max(1e-3))) {
        Ok(u_l) => SimState { u_s, i_l, u_l },
        Err(e) => {
            collapse(&mut trace, t, weakest(&warm), format!("initial load flow failed: {e}"));
            trace.samples.push(record(&plant, t, &SimState { u_s, i_l, u_l: warm }));
            return Ok(trace);
        }
    };
    trace.samples.push(record(&plant, t, &state));

    let mut monitor = CollapseMonitor::new();
    let mut step_count = 0usize;
    let mut next_event = 0;
    let events = &settings.events;

    loop {
        let mut changed = false;
        while next_event < events.len() && events[next_event].time <= t {
            let e = &events[next_event];
            match &e.action {
                Action::SetLoads { powers: p } => powers = p.clone(),
                Action::SetController { k, b } => phase = ControllerPhase { k: k.expand(n), b: *b },
                Action::ActivateCpl => active = true,
            }
            trace.events.push(EventMarker { time: e.time, action: e.action.to_string() });
            changed = true;
            next_event += 1;
        }
        if changed {
            match solve_load_voltages(&state.u_s, &effective(active, &powers), &plant.partition, &state.u_l) {
                Ok(u_l) => state.u_l = u_l,
                Err(e) => {
                    collapse(&mut trace, t, weakest(&state.u_l), format!("load flow failed after event: {e}"));
                    return Ok(trace);
                }
            }
        }
        if t >= settings.horizon {
            break;
        }
        let segment_end = events.get(next_event).map_or(settings.horizon, |e| e.time.min(settings.horizon));
        let steps = ((segment_end - t) / settings.dt - 1e-9).ceil().max(1.0) as usize;
        let h = (segment_end - t) / steps as f64;
        let start = t;
        let p_now = effective(active, &powers);
        for s in 1..=steps {
            match step(&state, &plant, &phase, &p_now, h) {
                Ok(next) => state = next,
                Err(e) => {
                    let t_fail = start + s as f64 * h;
                    collapse(&mut trace, t_fail, weakest(&state.u_l), format!("load flow failed: {e}"));
                    return Ok(trace);
                }
            }
            t = if s == steps { segment_end } else { start + s as f64 * h };
            step_count += 1;
            if step_count % decimation == 0 || t >= settings.horizon {
                trace.samples.push(record(&plant, t, &state));
            }
            if let Some((node, reason)) = monitor.observe(&state.u_l) {
                if trace.samples.last().map(|s| s.t) != Some(t) {
                    trace.samples.push(record(&plant, t, &state));
                }
                collapse(&mut trace, t, node, reason);
                return Ok(trace);
            }
        }
    }
    Ok(trace)
}
