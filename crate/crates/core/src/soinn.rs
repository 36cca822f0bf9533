//! Supervised load-balancing SOINN used to rank samples for the replay memory.
//!
//! Nodes carry a single label; edges join equal-label nodes only and are
//! never removed, and nodes are never deleted. Each assignment awards the
//! winner `1 / (1 + d)^2` points, `d` being its mean distance to its
//! topological neighbours, and a node's density is its accumulated points
//! divided by the number of `lambda`-input periods in which it won.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Euclidean,
    /// `1 - cos(a, b)`.
    Cosine,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Metric::Cosine => {
                let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
                for (x, y) in a.iter().zip(b) {
                    ab += x * y;
                    aa += x * x;
                    bb += y * y;
                }
                let denom = (aa * bb).sqrt();
                if denom == 0.0 {
                    1.0
                } else {
                    1.0 - (ab / denom).clamp(-1.0, 1.0)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoinnConfig {
    #[serde(default = "default_lambda")]
    pub lambda: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_metric")]
    pub metric: Metric,
}

fn default_lambda() -> usize {
    1000
}
fn default_eta() -> f64 {
    1.04
}
fn default_metric() -> Metric {
    Metric::Euclidean
}

impl Default for SoinnConfig {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            eta: default_eta(),
            metric: default_metric(),
        }
    }
}

impl SoinnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda == 0 {
            return Err(Error::config("soinn.lambda", "must be at least 1"));
        }
        if !(self.eta >= 1.0) {
            return Err(Error::config("soinn.eta", "must be at least 1"));
        }
        Ok(())
    }
}

/// Points for a winner whose mean neighbour distance is `mean_dist`.
pub fn points(mean_dist: f64) -> f64 {
    1.0 / ((1.0 + mean_dist) * (1.0 + mean_dist))
}

/// Cap on the load-balancing exponent.
const MAX_LOAD_EXPONENT: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoinnNode {
    pub weight: Vec<f64>,
    pub label: usize,
    pub accumulated: f64,
    pub wins: u64,
    pub periods: u64,
    won_this_period: bool,
    pub assigned: Vec<usize>,
}

impl SoinnNode {
    pub fn density(&self) -> f64 {
        self.accumulated / self.periods.max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub node: usize,
    pub created: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoinnNetwork {
    config: SoinnConfig,
    dim: Option<usize>,
    nodes: Vec<SoinnNode>,
    /// Keyed by `(low id, high id)`; the value is the edge age.
    edges: BTreeMap<(usize, usize), u64>,
    neighbors: Vec<BTreeSet<usize>>,
    inputs: u64,
    total_wins: u64,
    /// `sample id -> (node, assignment order)`.
    samples: HashMap<usize, (usize, usize)>,
}

impl SoinnNetwork {
    pub fn new(config: SoinnConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            dim: None,
            nodes: Vec::new(),
            edges: BTreeMap::new(),
            neighbors: Vec::new(),
            inputs: 0,
            total_wins: 0,
            samples: HashMap::new(),
        })
    }

    pub fn config(&self) -> &SoinnConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[SoinnNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &SoinnNode {
        &self.nodes[id]
    }

    pub fn edges(&self) -> impl Iterator<Item = ((usize, usize), u64)> + '_ {
        self.edges.iter().map(|(&k, &v)| (k, v))
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbors(&self, id: usize) -> impl Iterator<Item = usize> + '_ {
        self.neighbors[id].iter().copied()
    }

    pub fn inputs(&self) -> u64 {
        self.inputs
    }

    fn dist(&self, a: &[f64], b: &[f64]) -> f64 {
        self.config.metric.distance(a, b)
    }

    /// Unscaled similarity threshold: the farthest topological neighbour,
    /// or the nearest other node when there are no neighbours.
    pub fn threshold_base(&self, id: usize) -> f64 {
        if self.nodes.len() < 2 {
            return f64::INFINITY;
        }
        let w = &self.nodes[id].weight;
        if self.neighbors[id].is_empty() {
            self.nodes
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != id)
                .map(|(_, n)| self.dist(w, &n.weight))
                .fold(f64::INFINITY, f64::min)
        } else {
            self.neighbors[id]
                .iter()
                .map(|&j| self.dist(w, &self.nodes[j].weight))
                .fold(0.0, f64::max)
        }
    }

    /// Load-balanced threshold: `base * eta^min(wins / mean wins, 10)`.
    pub fn threshold(&self, id: usize) -> f64 {
        let base = self.threshold_base(id);
        if !base.is_finite() {
            return base;
        }
        let mean = self.total_wins as f64 / self.nodes.len() as f64;
        let load = if mean > 0.0 {
            (self.nodes[id].wins as f64 / mean).min(MAX_LOAD_EXPONENT)
        } else {
            0.0
        };
        base * self.config.eta.powf(load)
    }

    fn mean_neighbor_distance(&self, id: usize) -> f64 {
        let nb = &self.neighbors[id];
        if nb.is_empty() {
            return 0.0;
        }
        let w = &self.nodes[id].weight;
        nb.iter().map(|&j| self.dist(w, &self.nodes[j].weight)).sum::<f64>() / nb.len() as f64
    }

    fn award(&mut self, id: usize) {
        let p = points(self.mean_neighbor_distance(id));
        let node = &mut self.nodes[id];
        node.accumulated += p;
        node.won_this_period = true;
    }

    /// Ends the current period: every node that won since the last boundary
    /// increments its period count.
    pub fn close_period(&mut self) {
        for n in &mut self.nodes {
            if n.won_this_period {
                n.periods += 1;
                n.won_this_period = false;
            }
        }
    }

    fn two_nearest(&self, z: &[f64]) -> ((usize, f64), (usize, f64)) {
        let mut best = (usize::MAX, f64::INFINITY);
        let mut second = (usize::MAX, f64::INFINITY);
        for (i, n) in self.nodes.iter().enumerate() {
            let d = self.dist(z, &n.weight);
            if d < best.1 {
                second = best;
                best = (i, d);
            } else if d < second.1 {
                second = (i, d);
            }
        }
        (best, second)
    }

    fn connect(&mut self, a: usize, b: usize) {
        for &j in &self.neighbors[a] {
            if j != b {
                *self.edges.get_mut(&(a.min(j), a.max(j))).expect("adjacency mirrors edges") += 1;
            }
        }
        self.edges.insert((a.min(b), a.max(b)), 0);
        self.neighbors[a].insert(b);
        self.neighbors[b].insert(a);
    }

    /// Presents one labelled input.
    pub fn present(&mut self, z: &[f64], label: usize, sample: usize) -> Result<Assignment> {
        match self.dim {
            Some(d) if d != z.len() => {
                return Err(Error::Contract(format!(
                    "soinn input has dim {} but the network has dim {d}",
                    z.len()
                )))
            }
            None if z.is_empty() => return Err(Error::contract("soinn input is empty")),
            _ => {}
        }
        if self.samples.contains_key(&sample) {
            return Err(Error::Contract(format!("sample {sample} was already presented")));
        }
        if crate::numkit::checked() && z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "soinn_present" });
        }
        self.dim = Some(z.len());

        let assignment = if self.nodes.len() < 2 {
            self.create(z, label)
        } else {
            let ((w1, d1), (w2, d2)) = self.two_nearest(z);
            if d1 > self.threshold(w1) || d2 > self.threshold(w2) || label != self.nodes[w1].label {
                self.create(z, label)
            } else {
                let node = &mut self.nodes[w1];
                node.wins += 1;
                let rate = 1.0 / node.wins as f64;
                for (w, x) in node.weight.iter_mut().zip(z) {
                    *w += rate * (x - *w);
                }
                self.total_wins += 1;
                self.award(w1);
                if self.nodes[w2].label == self.nodes[w1].label {
                    self.connect(w1, w2);
                }
                Assignment {
                    node: w1,
                    created: false,
                }
            }
        };
        let order = self.samples.len();
        self.samples.insert(sample, (assignment.node, order));
        self.nodes[assignment.node].assigned.push(sample);
        self.inputs += 1;
        if self.inputs % self.config.lambda as u64 == 0 {
            self.close_period();
        }
        Ok(assignment)
    }

    fn create(&mut self, z: &[f64], label: usize) -> Assignment {
        self.nodes.push(SoinnNode {
            weight: z.to_vec(),
            label,
            accumulated: 0.0,
            wins: 1,
            periods: 0,
            won_this_period: false,
            assigned: Vec::new(),
        });
        self.neighbors.push(BTreeSet::new());
        self.total_wins += 1;
        let id = self.nodes.len() - 1;
        self.award(id);
        Assignment {
            node: id,
            created: true,
        }
    }

    /// Presents every row of `rows` in order with sample ids `0..n`.
    pub fn train(&mut self, rows: &Tensor, labels: &[usize]) -> Result<()> {
        if rows.rows() != labels.len() {
            return Err(Error::contract("one label per row required"));
        }
        for (i, &label) in labels.iter().enumerate() {
            self.present(rows.row(i), label, i)?;
        }
        Ok(())
    }

    /// Density of the node holding `sample`.
    pub fn sample_density(&self, sample: usize) -> Result<f64> {
        self.samples
            .get(&sample)
            .map(|&(n, _)| self.nodes[n].density())
            .ok_or_else(|| Error::Contract(format!("sample {sample} was never assigned")))
    }

    /// Orders samples by their node's density, highest first; ties keep the
    /// assignment order.
    pub fn rank_samples(&self, ids: &[usize]) -> Result<Vec<usize>> {
        let mut keyed = Vec::with_capacity(ids.len());
        for &id in ids {
            let &(node, order) = self
                .samples
                .get(&id)
                .ok_or_else(|| Error::Contract(format!("sample {id} was never assigned")))?;
            keyed.push((self.nodes[node].density(), order, id));
        }
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(keyed.into_iter().map(|k| k.2).collect())
    }

    /// Text dump: one `node id label density w...` line per node, then one
    /// `edge a b age` line per edge.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let _ = write!(out, "node {i} {} {}", n.label, n.density());
            for w in &n.weight {
                let _ = write!(out, " {w}");
            }
            out.push('\n');
        }
        for (&(a, b), &age) in &self.edges {
            let _ = writeln!(out, "edge {a} {b} {age}");
        }
        out
    }
}
