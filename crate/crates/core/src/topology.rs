//! Communication graphs with per-edge budget and frequency.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DclError, Result};
use crate::rng::{purpose, stream};
use crate::AgentId;

/// Metadata of a directed edge: `b` floats per communication, every `f` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeMeta {
    pub budget: f64,
    pub frequency: u32,
}

impl Default for EdgeMeta {
    fn default() -> Self {
        Self {
            budget: 1.0,
            frequency: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    n: usize,
    edges: BTreeMap<(AgentId, AgentId), EdgeMeta>,
}

impl Topology {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            edges: BTreeMap::new(),
        }
    }

    pub fn n_agents(&self) -> usize {
        self.n
    }

    pub fn add_edge(&mut self, from: AgentId, to: AgentId, meta: EdgeMeta) -> Result<()> {
        if from == to {
            return Err(DclError::InvalidArgument(format!("self-edge on agent {from}")));
        }
        if from >= self.n || to >= self.n {
            return Err(DclError::OutOfRange(format!(
                "edge {from}->{to} in a graph of {} agents",
                self.n
            )));
        }
        if !(meta.budget >= 0.0) || meta.frequency == 0 {
            return Err(DclError::InvalidArgument(format!(
                "edge {from}->{to} needs budget >= 0 and frequency >= 1"
            )));
        }
        self.edges.insert((from, to), meta);
        Ok(())
    }

    fn add_undirected(&mut self, a: AgentId, b: AgentId) {
        self.edges.insert((a, b), EdgeMeta::default());
        self.edges.insert((b, a), EdgeMeta::default());
    }

    /// Number of directed edges.
    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = ((AgentId, AgentId), EdgeMeta)> + '_ {
        self.edges.iter().map(|(k, v)| (*k, *v))
    }

    pub fn edge(&self, from: AgentId, to: AgentId) -> Option<EdgeMeta> {
        self.edges.get(&(from, to)).copied()
    }

    /// Agents `j` with an edge `i -> j`, ascending.
    pub fn neighbors(&self, i: AgentId) -> Vec<AgentId> {
        self.edges
            .range((i, 0)..(i + 1, 0))
            .map(|((_, j), _)| *j)
            .collect()
    }

    pub fn degree(&self, i: AgentId) -> usize {
        self.neighbors(i).len()
    }

    /// Overrides budget and frequency on every edge.
    pub fn with_uniform(mut self, meta: EdgeMeta) -> Self {
        for v in self.edges.values_mut() {
            *v = meta;
        }
        self
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        let mut seen = BTreeSet::from([0]);
        let mut queue = VecDeque::from([0]);
        while let Some(i) = queue.pop_front() {
            for j in self.neighbors(i) {
                if seen.insert(j) {
                    queue.push_back(j);
                }
            }
        }
        seen.len() == self.n
    }

    /// Parses `i j b f` rows; blank lines and `#` comments are skipped.
    pub fn parse_edge_list(n: usize, text: &str) -> Result<Self> {
        let mut t = Self::empty(n);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| DclError::Parse {
                line: lineno + 1,
                msg,
            };
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 4 {
                return Err(err(format!("expected `i j b f`, got {} columns", cols.len())));
            }
            let from = cols[0].parse().map_err(|e| err(format!("{e}")))?;
            let to = cols[1].parse().map_err(|e| err(format!("{e}")))?;
            let budget = cols[2].parse().map_err(|e| err(format!("{e}")))?;
            let frequency = cols[3].parse().map_err(|e| err(format!("{e}")))?;
            t.add_edge(from, to, EdgeMeta { budget, frequency })
                .map_err(|e| err(e.to_string()))?;
        }
        Ok(t)
    }

    pub fn load_edge_list(n: usize, path: &Path) -> Result<Self> {
        Self::parse_edge_list(n, &std::fs::read_to_string(path)?)
    }

    pub fn to_edge_list(&self) -> String {
        self.edges
            .iter()
            .map(|((i, j), m)| format!("{i} {j} {} {}\n", m.budget, m.frequency))
            .collect()
    }
}

pub fn gen_erdos_renyi(n: usize, p: f64, seed: u64) -> Result<Topology> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DclError::InvalidArgument(format!("edge probability {p} outside [0, 1]")));
    }
    let mut rng = stream(seed, &[purpose::TOPOLOGY, n as u64]);
    let mut t = Topology::empty(n);
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                t.add_undirected(i, j);
            }
        }
    }
    Ok(t)
}

fn check_n(n: usize) -> Result<()> {
    if n < 2 {
        return Err(DclError::InvalidArgument(format!("topology needs >= 2 agents, got {n}")));
    }
    Ok(())
}

pub fn gen_ring(n: usize) -> Result<Topology> {
    check_n(n)?;
    let mut t = Topology::empty(n);
    for i in 0..n {
        t.add_undirected(i, (i + 1) % n);
    }
    Ok(t)
}

/// Star centered at agent 0.
pub fn gen_server(n: usize) -> Result<Topology> {
    check_n(n)?;
    let mut t = Topology::empty(n);
    for i in 1..n {
        t.add_undirected(0, i);
    }
    Ok(t)
}

/// Balanced binary tree in heap order: the parent of `i` is `(i - 1) / 2`.
pub fn gen_tree(n: usize) -> Result<Topology> {
    check_n(n)?;
    let mut t = Topology::empty(n);
    for i in 1..n {
        t.add_undirected((i - 1) / 2, i);
    }
    Ok(t)
}

pub fn gen_complete(n: usize) -> Result<Topology> {
    check_n(n)?;
    let mut t = Topology::empty(n);
    for i in 0..n {
        for j in i + 1..n {
            t.add_undirected(i, j);
        }
    }
    Ok(t)
}
