mod common;

use common::{grid, read_data, CASE1_LOADS};
use dcgrid::existence::{certify, CertifyOptions};
use dcgrid::network::build_admittance;
use dcgrid::simulate::{
    parse_scenario, simulate, solve_load_voltages, step, Action, ControllerPhase, Event, InitialState, Plant,
    Scenario, ScenarioSettings, SimState,
};
use dcgrid::stability::{cpl_linearize, effective_admittance, jacobian};
use nalgebra::DVector;

fn case1_equilibrium() -> Vec<f64> {
    certify(&grid(&CASE1_LOADS, 89.64, 1e-3), &CertifyOptions::default())
        .unwrap()
        .equilibrium
        .unwrap()
}

#[test]
fn load_flow_reproduces_case1_equilibrium() {
    let spec = grid(&CASE1_LOADS, 89.64, 1e-3);
    let plant = Plant::new(&spec);
    let u = case1_equilibrium();
    let state = SimState::equilibrium(&plant, &spec.virtual_resistances(), &u).unwrap();
    let warm = DVector::from_element(6, 80.0);
    let solved = solve_load_voltages(&state.u_s, &CASE1_LOADS, &plant.partition, &warm).unwrap();
    let expected = [43.57, 43.49, 47.24, 56.59, 44.33, 52.05];
    for (x, e) in solved.iter().zip(expected) {
        assert!((x - e).abs() <= 0.05, "{x} vs {e}");
    }
}

#[test]
fn equilibrium_is_a_fixed_point_of_the_flow() {
    let spec = grid(&CASE1_LOADS, 89.64, 1e-3);
    let plant = Plant::new(&spec);
    let phase = ControllerPhase { k: spec.virtual_resistances(), b: 1e-3 };
    let start = SimState::equilibrium(&plant, &phase.k, &case1_equilibrium()).unwrap();
    let mut state = start.clone();
    for _ in 0..10_000 {
        state = step(&state, &plant, &phase, &CASE1_LOADS, 1e-6).unwrap();
    }
    assert!((&state.u_s - &start.u_s).amax() <= 1e-9 * 89.64);
    assert!((&state.u_l - &start.u_l).amax() <= 1e-9 * 89.64);
    assert!((&state.i_l - &start.i_l).amax() <= 1e-9 * 100.0);
}

#[test]
fn flat_trace_from_equilibrium_without_events() {
    let spec = grid(&CASE1_LOADS, 89.64, 1e-3);
    let plant = Plant::new(&spec);
    let eq = SimState::equilibrium(&plant, &spec.virtual_resistances(), &case1_equilibrium()).unwrap();
    let settings = ScenarioSettings {
        horizon: 5e-3,
        dt: 1e-6,
        events: vec![],
        decimation: Some(10),
        initial: Some(InitialState {
            u_s: Some(eq.u_s.iter().copied().collect()),
            i_l: Some(eq.i_l.iter().copied().collect()),
            u_l: Some(eq.u_l.iter().copied().collect()),
            cpl_active: Some(true),
        }),
    };
    let trace = simulate(&Scenario::new(spec, settings).unwrap()).unwrap();
    assert!(!trace.collapsed());
    for s in &trace.samples {
        for (x, e) in s.u_l.iter().zip(eq.u_l.iter()) {
            assert!((x - e).abs() < 1e-8);
        }
    }
}

#[test]
fn algebraic_constraint_holds_along_traces() {
    for name in ["case5.json", "case6.json"] {
        let scenario = parse_scenario(&read_data(name)).unwrap();
        let part = build_admittance(&scenario.network);
        let u_ref = scenario.network.control.u_ref;
        let trace = simulate(&scenario).unwrap();
        // samples at an event time precede the event
        for s in trace.samples.iter().filter(|s| s.t > 0.001) {
            let powers = match scenario.settings.events.iter().rev().find(|e| {
                e.time < s.t && matches!(e.action, Action::SetLoads { .. })
            }) {
                Some(Event { action: Action::SetLoads { powers }, .. }) => powers.clone(),
                _ => scenario.network.load_powers(),
            };
            let u_s = DVector::from_vec(s.u_s.clone());
            let u_l = DVector::from_vec(s.u_l.clone());
            let i = &part.y_ls * &u_s + &part.y_ll * &u_l;
            let r = (0..6).map(|k| (u_l[k] * i[k] + powers[k]).abs()).fold(0.0, f64::max);
            assert!(r <= 1e-6 * u_ref * u_ref, "{name} t={} residual {r}", s.t);
        }
    }
}

#[test]
fn halving_the_step_barely_moves_case6() {
    let mut scenario = parse_scenario(&read_data("case6.json")).unwrap();
    let coarse = simulate(&scenario).unwrap();
    scenario.settings.dt /= 2.0;
    let fine = simulate(&scenario).unwrap();
    let (a, b) = (coarse.last(), fine.last());
    assert_eq!(a.t, b.t);
    for (x, y) in a.u_l.iter().chain(&a.u_s).zip(b.u_l.iter().chain(&b.u_s)) {
        assert!((x - y).abs() <= 1e-4, "{x} vs {y}");
    }
}

#[test]
fn small_perturbation_follows_the_linearization() {
    let spec = grid(&CASE1_LOADS, 89.64, 1e-3);
    let plant = Plant::new(&spec);
    let (k, c) = (spec.virtual_resistances(), spec.capacitances());
    let u = case1_equilibrium();
    let eq = SimState::equilibrium(&plant, &k, &u).unwrap();
    let y_eq = effective_admittance(&plant.partition, &cpl_linearize(&u, &CASE1_LOADS).unwrap()).unwrap();
    let j = jacobian(&y_eq, &k, &c, 1e-3).unwrap();

    let n = k.len();
    let phase = ControllerPhase { k: k.clone(), b: 1e-3 };
    let mut state = eq.clone();
    state.u_s[0] += 0.1;
    state.u_l = solve_load_voltages(&state.u_s, &CASE1_LOADS, &plant.partition, &eq.u_l).unwrap();
    let mut x = DVector::zeros(2 * n);
    x[n] = 0.1;

    let dt = 1e-6;
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for _ in 0..2000 {
        state = step(&state, &plant, &phase, &CASE1_LOADS, dt).unwrap();
        let k1 = &j * &x;
        let k2 = &j * (&x + &k1 * (dt / 2.0));
        let k3 = &j * (&x + &k2 * (dt / 2.0));
        let k4 = &j * (&x + &k3 * dt);
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        for i in 0..n {
            let nonlinear = state.u_s[i] - eq.u_s[i];
            worst = worst.max((nonlinear - x[n + i]).abs());
            scale = scale.max(x[n + i].abs());
        }
    }
    assert!(worst <= 0.02 * scale, "deviation {worst} against amplitude {scale}");
}

#[test]
fn below_the_necessary_threshold_every_start_collapses() {
    let spec = grid(&CASE1_LOADS, 85.0, 1e-3);
    let cert = certify(&spec, &CertifyOptions::default()).unwrap();
    assert_eq!(cert.verdict, dcgrid::existence::ExistenceVerdict::NecessaryFailed);
    for (u0, i0) in [(85.0, 0.0), (80.0, 20.0), (85.0, 60.0)] {
        let settings = ScenarioSettings {
            horizon: 0.2,
            dt: 1e-6,
            events: vec![Event { time: 0.001, action: Action::ActivateCpl }],
            decimation: None,
            initial: Some(InitialState {
                u_s: Some(vec![u0; 4]),
                i_l: Some(vec![i0; 4]),
                u_l: None,
                cpl_active: None,
            }),
        };
        let trace = simulate(&Scenario::new(spec.clone(), settings).unwrap()).unwrap();
        assert!(trace.collapsed(), "start ({u0}, {i0}) survived");
        assert!(trace.last().t < 0.2);
    }
}
