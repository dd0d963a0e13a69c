#![allow(dead_code)]

use std::path::PathBuf;

use dcgrid::network::{parse_network, Control, Line, Load, NetworkSpec, Source};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const CASE1_LOADS: [f64; 6] = [1000.0, 1000.0, 1000.0, 500.0, 500.0, 500.0];
pub const CASE3_LOADS: [f64; 6] = [2000.0, 2000.0, 2000.0, 1500.0, 1500.0, 1500.0];

pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

pub fn read_data(name: &str) -> String {
    std::fs::read_to_string(data_path(name)).expect("data file")
}

/// The 4-source, 6-load grid with the given loads and controller settings.
pub fn grid(powers: &[f64], u_ref: f64, b: f64) -> NetworkSpec {
    let mut spec = parse_network(&read_data("paper_table1.json")).expect("valid grid");
    for (load, &p) in spec.loads.iter_mut().zip(powers) {
        load.power = p;
    }
    spec.control = Control { u_ref, b };
    spec
}

/// Connected grid with 1..=max_sources sources and 1..=max_loads loads: a
/// random spanning tree plus a few extra lines. `u_ref` is left at 1 for the
/// caller to set.
pub fn random_spec(rng: &mut ChaCha8Rng, max_sources: usize, max_loads: usize) -> NetworkSpec {
    let n = rng.random_range(1..=max_sources);
    let m = rng.random_range(1..=max_loads);
    let total = n + m;
    let sources = (0..n)
        .map(|i| Source {
            id: (i as u32 + 1).into(),
            input_voltage: 300.0,
            inductance: 2e-3,
            capacitance: rng.random_range(1e-3..5e-3),
            k: rng.random_range(0.2..2.0),
        })
        .collect();
    let mut loads: Vec<Load> = (0..m)
        .map(|i| Load {
            id: ((n + i) as u32 + 1).into(),
            power: if rng.random_bool(0.15) { 0.0 } else { rng.random_range(100.0..2000.0) },
        })
        .collect();
    if loads.iter().all(|l| l.power == 0.0) {
        loads[0].power = 500.0;
    }
    let mut order: Vec<usize> = (0..total).collect();
    for i in (1..total).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut pairs = std::collections::HashSet::new();
    for i in 1..total {
        let j = order[rng.random_range(0..i)];
        let a = order[i];
        pairs.insert((a.min(j), a.max(j)));
    }
    for _ in 0..rng.random_range(0..=total) {
        let a = rng.random_range(0..total);
        let b = rng.random_range(0..total);
        if a != b {
            pairs.insert((a.min(b), a.max(b)));
        }
    }
    let mut pairs: Vec<_> = pairs.into_iter().collect();
    pairs.sort();
    let lines = pairs
        .into_iter()
        .map(|(a, b)| Line {
            a: (a as u32 + 1).into(),
            b: (b as u32 + 1).into(),
            r: rng.random_range(0.1..2.0),
        })
        .collect();
    NetworkSpec { sources, loads, lines, control: Control { u_ref: 1.0, b: 1e-3 } }
}
