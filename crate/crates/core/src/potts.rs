//! Potts prior over model-order fields.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lattice::{grid_to_text, parse_grid, LatticeGraph};

/// Largest state space `enumerate_exact` will walk.
pub const ENUMERATION_LIMIT: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PottsParams {
    /// Coupling constant `J`.
    pub coupling: f64,
    /// Number of model orders `D`.
    pub state_count: usize,
}

impl PottsParams {
    pub fn new(coupling: f64, state_count: usize) -> Result<Self> {
        if !(coupling >= 0.0) || !coupling.is_finite() {
            return Err(invalid(format!("coupling must be finite and non-negative, got {coupling}")));
        }
        if state_count < 2 {
            return Err(invalid(format!("need at least two states, got {state_count}")));
        }
        Ok(Self { coupling, state_count })
    }
}

/// One model index in `0..model_count` per lattice node, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelField {
    width: usize,
    height: usize,
    model_count: usize,
    states: Vec<usize>,
}

impl ModelField {
    pub fn new(width: usize, height: usize, model_count: usize, states: Vec<usize>) -> Result<Self> {
        if states.len() != width * height {
            return Err(invalid(format!("{} states do not fill a {width}x{height} field", states.len())));
        }
        if let Some(bad) = states.iter().find(|&&s| s >= model_count) {
            return Err(invalid(format!("state {bad} outside 0..{model_count}")));
        }
        Ok(Self { width, height, model_count, states })
    }

    pub fn constant(width: usize, height: usize, model_count: usize, state: usize) -> Result<Self> {
        Self::new(width, height, model_count, vec![state; width * height])
    }

    pub fn uniform_random<R: Rng + ?Sized>(graph: &LatticeGraph, model_count: usize, rng: &mut R) -> Self {
        let states = (0..graph.node_count()).map(|_| rng.random_range(0..model_count)).collect();
        Self { width: graph.width(), height: graph.height(), model_count, states }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn model_count(&self) -> usize {
        self.model_count
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    #[inline]
    pub fn get(&self, v: usize) -> usize {
        self.states[v]
    }

    #[inline]
    pub fn set(&mut self, v: usize, state: usize) {
        debug_assert!(state < self.model_count);
        self.states[v] = state;
    }

    pub fn matches(&self, graph: &LatticeGraph) -> bool {
        self.width == graph.width() && self.height == graph.height()
    }

    /// Text grid, one row per line.
    pub fn to_text(&self) -> String {
        grid_to_text(self.width, &self.states)
    }

    pub fn parse_text(text: &str, model_count: usize) -> Result<Self> {
        let (w, h, states) = parse_grid::<usize>(text)?;
        Self::new(w, h, model_count, states)
    }

    /// CSV with header `node,model`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("node,model\n");
        for (v, s) in self.states.iter().enumerate() {
            out.push_str(&format!("{v},{s}\n"));
        }
        out
    }

    pub fn parse_csv(text: &str, width: usize, height: usize, model_count: usize) -> Result<Self> {
        let mut states = vec![usize::MAX; width * height];
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next().map(str::trim) {
            Some("node,model") => {}
            other => return Err(Error::Parse(format!("expected header node,model, got {other:?}"))),
        }
        for line in lines {
            let (node, model) = line.trim().split_once(',').ok_or_else(|| Error::Parse(format!("bad row {line:?}")))?;
            let node: usize = node.parse().map_err(|_| Error::Parse(format!("bad node in {line:?}")))?;
            let model: usize = model.parse().map_err(|_| Error::Parse(format!("bad model in {line:?}")))?;
            if node >= states.len() {
                return Err(invalid(format!("node {node} outside {width}x{height} field")));
            }
            states[node] = model;
        }
        if states.contains(&usize::MAX) {
            return Err(Error::Parse("field CSV does not cover every node".into()));
        }
        Self::new(width, height, model_count, states)
    }
}

/// Number of neighbours of `v` currently in `state`.
#[inline]
pub fn agreements(field: &ModelField, graph: &LatticeGraph, v: usize, state: usize) -> usize {
    graph.neighbors_of(v).iter().filter(|&&u| field.states[u] == state).count()
}

/// Log prior ratio `log p(M*) - log p(M)` for changing node `v` to `proposed`.
#[inline]
pub fn log_prior_ratio(field: &ModelField, graph: &LatticeGraph, coupling: f64, v: usize, proposed: usize) -> f64 {
    let delta = agreements(field, graph, v, proposed) as f64 - agreements(field, graph, v, field.get(v)) as f64;
    coupling * delta
}

/// `J` times the number of agreeing edges.
pub fn log_prior_unnorm(field: &ModelField, params: &PottsParams, graph: &LatticeGraph) -> f64 {
    let agree = graph.edges().filter(|&(u, v)| field.states[u] == field.states[v]).count();
    params.coupling * agree as f64
}

/// Conditional distribution of node `v` given its neighbours.
pub fn full_conditional(v: usize, field: &ModelField, params: &PottsParams, graph: &LatticeGraph) -> Vec<f64> {
    let mut counts = vec![0usize; params.state_count];
    for &u in graph.neighbors_of(v) {
        counts[field.states[u]] += 1;
    }
    let max = *counts.iter().max().unwrap_or(&0) as f64;
    let mut probs: Vec<f64> = counts.iter().map(|&c| (params.coupling * (c as f64 - max)).exp()).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    probs
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// One raster-order single-site Gibbs sweep; updates `field` in place.
pub fn gibbs_sweep<R: Rng + ?Sized>(field: &mut ModelField, params: &PottsParams, graph: &LatticeGraph, rng: &mut R) {
    for v in 0..graph.node_count() {
        let probs = full_conditional(v, field, params, graph);
        field.states[v] = sample_categorical(&probs, rng);
    }
}

/// Exact probabilities over every configuration, indexed by [`config_index`].
#[derive(Debug, Clone)]
pub struct ExactTable {
    pub probs: Vec<f64>,
    /// Log of the normalising constant.
    pub log_partition: f64,
    pub node_count: usize,
    pub state_count: usize,
}

impl ExactTable {
    /// Marginal distribution of node `v`.
    pub fn node_marginal(&self, v: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.state_count];
        for (code, p) in self.probs.iter().enumerate() {
            out[decode_state(code, v, self.state_count)] += p;
        }
        out
    }
}

/// Base-`D` code of a configuration, node 0 least significant.
pub fn config_index(states: &[usize], state_count: usize) -> usize {
    states.iter().rev().fold(0, |acc, &s| acc * state_count + s)
}

fn decode_state(code: usize, v: usize, state_count: usize) -> usize {
    (code / state_count.pow(v as u32)) % state_count
}

pub fn decode_config(code: usize, node_count: usize, state_count: usize) -> Vec<usize> {
    let mut code = code;
    (0..node_count)
        .map(|_| {
            let s = code % state_count;
            code /= state_count;
            s
        })
        .collect()
}

/// Brute-force Potts distribution on a small graph.
pub fn enumerate_exact(graph: &LatticeGraph, params: &PottsParams) -> Result<ExactTable> {
    let zeros = vec![vec![0.0; params.state_count]; graph.node_count()];
    enumerate_with_field(graph, params, &zeros)
}

/// Brute-force distribution proportional to the Potts prior times
/// `exp(external[v][M_v])` at every node, the posterior when `external`
/// holds log marginal likelihoods.
pub fn enumerate_with_field(graph: &LatticeGraph, params: &PottsParams, external: &[Vec<f64>]) -> Result<ExactTable> {
    let n = graph.node_count();
    let d = params.state_count;
    let size = (d as u64).checked_pow(n as u32).filter(|&s| s <= ENUMERATION_LIMIT).ok_or_else(|| {
        Error::Capacity(format!("{d}^{n} configurations exceed the enumeration limit of {ENUMERATION_LIMIT}"))
    })? as usize;
    if external.len() != n || external.iter().any(|row| row.len() != d) {
        return Err(invalid("external field must be node_count x state_count"));
    }
    let edges: Vec<(usize, usize)> = graph.edges().collect();
    let mut logs = Vec::with_capacity(size);
    let mut states = vec![0usize; n];
    for code in 0..size {
        let mut c = code;
        for s in states.iter_mut() {
            *s = c % d;
            c /= d;
        }
        let agree = edges.iter().filter(|&&(u, v)| states[u] == states[v]).count();
        let ext: f64 = states.iter().enumerate().map(|(v, &s)| external[v][s]).sum();
        logs.push(params.coupling * agree as f64 + ext);
    }
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    let log_partition = max + total.ln();
    let probs = logs.iter().map(|l| (l - log_partition).exp()).collect();
    Ok(ExactTable { probs, log_partition, node_count: n, state_count: d })
}

/// `log(1 + sqrt(D))`, the critical coupling of the `D`-state model on the square lattice.
pub fn critical_coupling(state_count: usize) -> Result<f64> {
    if state_count < 2 {
        return Err(invalid(format!("critical coupling needs D >= 2, got {state_count}")));
    }
    Ok((1.0 + (state_count as f64).sqrt()).ln())
}
