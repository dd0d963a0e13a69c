//! Network descriptions and the conductance Laplacian.
//!
//! Nodes are ordered sources first, then loads, each in declaration order.
//! Every vector indexed by load (voltages, powers) follows that order.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Node identifier as written in the network document. Integers and strings
/// are both accepted and compared by their textual form.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<u32> for NodeId {
    fn from(v: u32) -> Self {
        NodeId(v.to_string())
    }
}

impl From<&str> for NodeId {
    fn from(v: &str) -> Self {
        NodeId(v.to_string())
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Int(v) => Ok(NodeId(v.to_string())),
            Raw::Str(s) if !s.is_empty() => Ok(NodeId(s)),
            Raw::Str(_) => Err(serde::de::Error::custom("node id must not be empty")),
        }
    }
}

/// Converter-fed source node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Source {
    pub id: NodeId,
    /// Converter input voltage (V).
    #[serde(rename = "V")]
    pub input_voltage: f64,
    /// Filter inductance (H).
    #[serde(rename = "L")]
    pub inductance: f64,
    /// Output capacitance (F).
    #[serde(rename = "C")]
    pub capacitance: f64,
    /// Virtual resistance (ohm).
    pub k: f64,
}

/// Constant power load node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Load {
    pub id: NodeId,
    /// Drawn power (W).
    #[serde(rename = "P")]
    pub power: f64,
}

/// Purely resistive line between two nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Line {
    pub a: NodeId,
    pub b: NodeId,
    /// Resistance (ohm).
    pub r: f64,
}

/// Controller globals shared by all converters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Control {
    /// Reference voltage (V).
    pub u_ref: f64,
    /// Virtual inductance coefficient: X = b K.
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub sources: Vec<Source>,
    pub loads: Vec<Load>,
    pub lines: Vec<Line>,
    pub control: Control,
}

impl NetworkSpec {
    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn n_loads(&self) -> usize {
        self.loads.len()
    }

    pub fn load_powers(&self) -> Vec<f64> {
        self.loads.iter().map(|l| l.power).collect()
    }

    pub fn virtual_resistances(&self) -> Vec<f64> {
        self.sources.iter().map(|s| s.k).collect()
    }

    pub fn capacitances(&self) -> Vec<f64> {
        self.sources.iter().map(|s| s.capacitance).collect()
    }

    pub fn load_ids(&self) -> Vec<NodeId> {
        self.loads.iter().map(|l| l.id.clone()).collect()
    }

    pub fn source_ids(&self) -> Vec<NodeId> {
        self.sources.iter().map(|s| s.id.clone()).collect()
    }

    /// Copy with the load powers replaced, order as in `loads`.
    pub fn with_load_powers(&self, powers: &[f64]) -> Self {
        let mut spec = self.clone();
        for (load, &p) in spec.loads.iter_mut().zip(powers) {
            load.power = p;
        }
        spec
    }

    /// Checks every structural and numeric invariant, including connectivity.
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::invalid("sources", "at least one source is required"));
        }
        if self.loads.is_empty() {
            return Err(Error::invalid("loads", "at least one load is required"));
        }

        let mut seen: HashMap<&NodeId, String> = HashMap::new();
        for (i, s) in self.sources.iter().enumerate() {
            let path = format!("sources[{i}]");
            if let Some(prev) = seen.insert(&s.id, path.clone()) {
                return Err(Error::invalid(
                    format!("{path}.id"),
                    format!("duplicate node id {} (first declared at {prev})", s.id),
                ));
            }
            positive(&format!("{path}.V"), s.input_voltage)?;
            positive(&format!("{path}.L"), s.inductance)?;
            positive(&format!("{path}.C"), s.capacitance)?;
            positive(&format!("{path}.k"), s.k)?;
        }
        for (i, l) in self.loads.iter().enumerate() {
            let path = format!("loads[{i}]");
            if let Some(prev) = seen.insert(&l.id, path.clone()) {
                return Err(Error::invalid(
                    format!("{path}.id"),
                    format!("duplicate node id {} (first declared at {prev})", l.id),
                ));
            }
            if !l.power.is_finite() || l.power < 0.0 {
                return Err(Error::invalid(
                    format!("{path}.P"),
                    format!("power must be finite and nonnegative, got {}", l.power),
                ));
            }
        }

        let mut pairs = HashSet::new();
        for (i, line) in self.lines.iter().enumerate() {
            let path = format!("lines[{i}]");
            for (end, id) in [("a", &line.a), ("b", &line.b)] {
                if !seen.contains_key(id) {
                    return Err(Error::invalid(
                        format!("{path}.{end}"),
                        format!("line endpoint {id} is not a declared node"),
                    ));
                }
            }
            if line.a == line.b {
                return Err(Error::invalid(
                    path,
                    format!("self-loop at node {}", line.a),
                ));
            }
            let key = if line.a < line.b {
                (&line.a, &line.b)
            } else {
                (&line.b, &line.a)
            };
            if !pairs.insert(key) {
                return Err(Error::invalid(
                    path,
                    format!("parallel line between {} and {}", line.a, line.b),
                ));
            }
            positive(&format!("{path}.r"), line.r)?;
        }

        positive("control.u_ref", self.control.u_ref)?;
        positive("control.b", self.control.b)?;

        if !check_connected(self) {
            return Err(Error::invalid("lines", "graph not connected"));
        }
        Ok(())
    }
}

fn positive(path: &str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(
            path,
            format!("must be finite and positive, got {value}"),
        ))
    }
}

/// Parses and validates a JSON network document.
///
/// Unknown top-level keys (such as `scenario`) are ignored so that scenario
/// files can be read as networks.
pub fn parse_network(document: &str) -> Result<NetworkSpec> {
    if document.trim().is_empty() {
        return Err(Error::invalid("$", "empty document"));
    }
    let mut de = serde_json::Deserializer::from_str(document);
    let spec: NetworkSpec = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { "$".to_string() } else { path };
        Error::invalid(path, e.into_inner().to_string())
    })?;
    spec.validate()?;
    Ok(spec)
}

/// True iff the undirected graph over all declared nodes is connected.
/// Lines naming undeclared nodes are ignored.
pub fn check_connected(spec: &NetworkSpec) -> bool {
    let ids: Vec<&NodeId> = spec
        .sources
        .iter()
        .map(|s| &s.id)
        .chain(spec.loads.iter().map(|l| &l.id))
        .collect();
    if ids.is_empty() {
        return false;
    }
    let index: HashMap<&NodeId, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut adjacency = vec![Vec::new(); ids.len()];
    for line in &spec.lines {
        if let (Some(&a), Some(&b)) = (index.get(&line.a), index.get(&line.b)) {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
    }
    let mut visited = vec![false; ids.len()];
    let mut queue = VecDeque::from([0]);
    visited[0] = true;
    let mut count = 1;
    while let Some(v) = queue.pop_front() {
        for &w in &adjacency[v] {
            if !visited[w] {
                visited[w] = true;
                count += 1;
                queue.push_back(w);
            }
        }
    }
    count == ids.len()
}

/// Conductance Laplacian and its source/load blocks.
#[derive(Debug, Clone)]
pub struct AdmittancePartition {
    /// Full (n+m)x(n+m) Laplacian in siemens.
    pub y: DMatrix<f64>,
    pub y_ss: DMatrix<f64>,
    pub y_sl: DMatrix<f64>,
    pub y_ls: DMatrix<f64>,
    pub y_ll: DMatrix<f64>,
    pub source_ids: Vec<NodeId>,
    pub load_ids: Vec<NodeId>,
    /// Row of each node in `y`.
    pub index: HashMap<NodeId, usize>,
}

impl AdmittancePartition {
    pub fn n_sources(&self) -> usize {
        self.source_ids.len()
    }

    pub fn n_loads(&self) -> usize {
        self.load_ids.len()
    }
}

/// Assembles the Laplacian `Y[i][j] = -1/r_ij`, diagonal = sum of incident
/// conductances, and splits it into blocks. Expects a validated spec.
pub fn build_admittance(spec: &NetworkSpec) -> AdmittancePartition {
    let n = spec.n_sources();
    let m = spec.n_loads();
    let source_ids = spec.source_ids();
    let load_ids = spec.load_ids();
    let index: HashMap<NodeId, usize> = source_ids
        .iter()
        .chain(load_ids.iter())
        .cloned()
        .enumerate()
        .map(|(i, id)| (id, i))
        .collect();

    let mut y = DMatrix::zeros(n + m, n + m);
    for line in &spec.lines {
        let a = index[&line.a];
        let b = index[&line.b];
        let g = 1.0 / line.r;
        y[(a, a)] += g;
        y[(b, b)] += g;
        y[(a, b)] -= g;
        y[(b, a)] -= g;
    }

    AdmittancePartition {
        y_ss: y.view((0, 0), (n, n)).into_owned(),
        y_sl: y.view((0, n), (n, m)).into_owned(),
        y_ls: y.view((n, 0), (m, n)).into_owned(),
        y_ll: y.view((n, n), (m, m)).into_owned(),
        y,
        source_ids,
        load_ids,
        index,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn source(id: u32) -> Source {
        Source {
            id: id.into(),
            input_voltage: 300.0,
            inductance: 2e-3,
            capacitance: 2e-3,
            k: 1.0,
        }
    }

    fn load(id: u32, p: f64) -> Load {
        Load {
            id: id.into(),
            power: p,
        }
    }

    fn line(a: u32, b: u32, r: f64) -> Line {
        Line {
            a: a.into(),
            b: b.into(),
            r,
        }
    }

    fn spec(sources: Vec<Source>, loads: Vec<Load>, lines: Vec<Line>) -> NetworkSpec {
        NetworkSpec {
            sources,
            loads,
            lines,
            control: Control {
                u_ref: 100.0,
                b: 1e-3,
            },
        }
    }

    #[test]
    fn two_node_laplacian() {
        let s = spec(vec![source(1)], vec![load(2, 0.0)], vec![line(1, 2, 0.5)]);
        s.validate().unwrap();
        let part = build_admittance(&s);
        assert_eq!(part.y, DMatrix::from_row_slice(2, 2, &[2.0, -2.0, -2.0, 2.0]));
    }

    #[test]
    fn star_of_three_loads() {
        let s = spec(
            vec![source(1)],
            vec![load(2, 0.0), load(3, 0.0), load(4, 0.0)],
            vec![line(1, 2, 1.0), line(1, 3, 1.0), line(1, 4, 1.0)],
        );
        let y = build_admittance(&s).y;
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[
                3.0, -1.0, -1.0, -1.0, //
                -1.0, 1.0, 0.0, 0.0, //
                -1.0, 0.0, 1.0, 0.0, //
                -1.0, 0.0, 0.0, 1.0,
            ],
        );
        assert_eq!(y, expected);
    }

    #[test]
    fn blocks_are_transposes() {
        let s = spec(
            vec![source(1), source(2)],
            vec![load(3, 10.0), load(4, 5.0)],
            vec![line(1, 3, 1.0), line(3, 4, 0.3), line(2, 4, 2.0)],
        );
        let part = build_admittance(&s);
        assert_eq!(part.y_ls, part.y_sl.transpose());
        assert_eq!(part.y_ll[(0, 1)], -1.0 / 0.3);
    }

    #[test]
    fn disjoint_pairs_are_disconnected() {
        let s = spec(
            vec![source(1), source(2)],
            vec![load(3, 0.0), load(4, 0.0)],
            vec![line(1, 3, 1.0), line(2, 4, 1.0)],
        );
        assert!(!check_connected(&s));
        let err = s.validate().unwrap_err();
        assert!(err.to_string().contains("graph not connected"), "{err}");
    }

    #[test]
    fn rejects_bad_lines() {
        let mut s = spec(vec![source(1)], vec![load(2, 0.0)], vec![line(1, 2, 1.0)]);
        s.lines.push(line(2, 1, 3.0));
        assert!(s.validate().unwrap_err().to_string().contains("parallel"));

        s.lines = vec![line(1, 2, 1.0), line(2, 2, 1.0)];
        assert!(s.validate().unwrap_err().to_string().contains("self-loop"));

        s.lines = vec![line(1, 2, 0.0)];
        let err = s.validate().unwrap_err().to_string();
        assert!(err.starts_with("lines[0].r"), "{err}");

        s.lines = vec![line(1, 7, 1.0)];
        let err = s.validate().unwrap_err().to_string();
        assert!(err.starts_with("lines[0].b"), "{err}");
    }

    #[test]
    fn rejects_duplicate_ids_and_bad_parameters() {
        let s = spec(vec![source(1)], vec![load(1, 0.0)], vec![]);
        let err = s.validate().unwrap_err().to_string();
        assert!(err.starts_with("loads[0].id"), "{err}");

        let mut s = spec(vec![source(1)], vec![load(2, 0.0)], vec![line(1, 2, 1.0)]);
        s.sources[0].capacitance = -1.0;
        assert!(s.validate().unwrap_err().to_string().starts_with("sources[0].C"));
        s.sources[0].capacitance = 1e-3;
        s.loads[0].power = -5.0;
        assert!(s.validate().unwrap_err().to_string().starts_with("loads[0].P"));
    }

    #[test]
    fn parse_reports_field_paths() {
        let doc = r#"{"sources":[{"id":1,"V":300,"L":0.002,"C":0.002,"k":1}],
                      "loads":[{"id":2,"P":"lots"}],
                      "lines":[{"a":1,"b":2,"r":1}],
                      "control":{"u_ref":100,"b":0.001}}"#;
        let err = parse_network(doc).unwrap_err();
        assert!(err.is_input_error());
        assert!(err.to_string().starts_with("loads[0].P"), "{err}");

        let err = parse_network("   ").unwrap_err();
        assert!(err.is_input_error());
    }

    #[test]
    fn parse_minimal_document() {
        let doc = r#"{"sources":[{"id":"s","V":300,"L":0.002,"C":0.002,"k":1}],
                      "loads":[{"id":"x","P":10}],
                      "lines":[{"a":"s","b":"x","r":1}],
                      "control":{"u_ref":100,"b":0.001},
                      "scenario":{"ignored":true}}"#;
        let spec = parse_network(doc).unwrap();
        assert_eq!(spec.n_sources(), 1);
        assert_eq!(spec.load_ids(), vec![NodeId::from("x")]);
    }
}
