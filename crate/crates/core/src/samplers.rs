//! Chains over the model-order field: spatially independent selection,
//! the node-wise pseudo-marginal sampler, and its multiple-augmentation and
//! single-estimation variants.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::evidence::{draw_or_zero, fill_matrix, EvidenceDraw, EvidenceMatrix, EvidenceSource};
use crate::lattice::LatticeGraph;
use crate::potts::{agreements, gibbs_sweep, ModelField, PottsParams};
use crate::rng::{stream, tag, StreamRng};

/// Traces longer than this keep per-iteration changes instead of snapshots.
pub const SNAPSHOT_LIMIT: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub coupling: f64,
    pub iterations: usize,
    /// Allowed fraction of failed evidence estimates.
    pub failure_budget: f64,
}

impl ChainConfig {
    pub fn new(coupling: f64, iterations: usize) -> Self {
        Self { coupling, iterations, failure_budget: 1e-3 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.coupling >= 0.0) || !self.coupling.is_finite() {
            return Err(invalid("coupling must be finite and non-negative"));
        }
        if self.iterations == 0 {
            return Err(invalid("need at least one iteration"));
        }
        if !(self.failure_budget >= 0.0) {
            return Err(invalid("failure budget must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    Snapshots(Vec<Vec<u8>>),
    Deltas { first: Vec<u8>, changes: Vec<Vec<(u32, u8)>> },
}

/// Model-order fields visited by a chain, one per graphical iteration, with
/// per-iteration bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrace {
    width: usize,
    height: usize,
    model_count: usize,
    storage: Storage,
    last: Vec<u8>,
    pub accepted: Vec<u64>,
    pub proposed: Vec<u64>,
    /// Evidence estimates drawn during each iteration.
    pub refreshed: Vec<u64>,
    pub elapsed_s: Vec<f64>,
    pub failures: u64,
    /// Running sums and counts of the derived quantity per (node, model).
    derived_sum: Vec<f64>,
    derived_n: Vec<u64>,
}

impl ChainTrace {
    fn new(width: usize, height: usize, model_count: usize, planned: usize) -> Self {
        let storage = if planned <= SNAPSHOT_LIMIT {
            Storage::Snapshots(Vec::with_capacity(planned))
        } else {
            Storage::Deltas { first: Vec::new(), changes: Vec::new() }
        };
        let cells = width * height * model_count;
        Self {
            width,
            height,
            model_count,
            storage,
            last: Vec::new(),
            accepted: Vec::new(),
            proposed: Vec::new(),
            refreshed: Vec::new(),
            elapsed_s: Vec::new(),
            failures: 0,
            derived_sum: vec![0.0; cells],
            derived_n: vec![0; cells],
        }
    }

    /// Rebuilds a trace from stored fields, as read back from a trace file.
    pub fn from_fields(fields: &[ModelField]) -> Result<Self> {
        let first = fields.first().ok_or_else(|| invalid("empty trace"))?;
        let mut t = Self::new(first.width(), first.height(), first.model_count(), fields.len());
        for f in fields {
            if f.width() != first.width() || f.height() != first.height() {
                return Err(invalid("trace fields differ in size"));
            }
            t.push(f, 0, 0, 0, 0.0);
        }
        Ok(t)
    }

    fn push(&mut self, field: &ModelField, accepted: u64, proposed: u64, refreshed: u64, elapsed: f64) {
        let states: Vec<u8> = field.states().iter().map(|&s| s as u8).collect();
        match &mut self.storage {
            Storage::Snapshots(s) => s.push(states.clone()),
            Storage::Deltas { first, changes } => {
                if first.is_empty() && changes.is_empty() {
                    *first = states.clone();
                    changes.push(Vec::new());
                } else {
                    let diff = states
                        .iter()
                        .zip(&self.last)
                        .enumerate()
                        .filter(|(_, (a, b))| a != b)
                        .map(|(v, (a, _))| (v as u32, *a))
                        .collect();
                    changes.push(diff);
                }
            }
        }
        self.last = states;
        self.accepted.push(accepted);
        self.proposed.push(proposed);
        self.refreshed.push(refreshed);
        self.elapsed_s.push(elapsed);
    }

    fn record_derived(&mut self, node: usize, model: usize, value: f64) {
        if value.is_finite() {
            let i = node * self.model_count + model;
            self.derived_sum[i] += value;
            self.derived_n[i] += 1;
        }
    }

    pub fn len(&self) -> usize {
        self.accepted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accepted.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn node_count(&self) -> usize {
        self.width * self.height
    }

    pub fn model_count(&self) -> usize {
        self.model_count
    }

    /// Visits the stored fields in iteration order.
    pub fn for_each_state(&self, mut f: impl FnMut(usize, &[u8])) {
        match &self.storage {
            Storage::Snapshots(s) => s.iter().enumerate().for_each(|(i, x)| f(i, x)),
            Storage::Deltas { first, changes } => {
                let mut cur = first.clone();
                for (i, diff) in changes.iter().enumerate() {
                    for &(v, s) in diff {
                        cur[v as usize] = s;
                    }
                    f(i, &cur);
                }
            }
        }
    }

    pub fn field_at(&self, iteration: usize) -> Result<ModelField> {
        if iteration >= self.len() {
            return Err(invalid(format!("iteration {iteration} beyond trace length {}", self.len())));
        }
        let mut out = None;
        self.for_each_state(|i, s| {
            if i == iteration {
                out = Some(s.to_vec());
            }
        });
        let states = out.expect("iteration within range").into_iter().map(usize::from).collect();
        ModelField::new(self.width, self.height, self.model_count, states)
    }

    pub fn last_field(&self) -> ModelField {
        ModelField::new(self.width, self.height, self.model_count, self.last.iter().map(|&s| s as usize).collect())
            .expect("trace dimensions are consistent")
    }

    /// Visit counts per (node, model), node-major.
    pub fn counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.node_count() * self.model_count];
        self.for_each_state(|_, s| {
            for (v, &m) in s.iter().enumerate() {
                counts[v * self.model_count + m as usize] += 1;
            }
        });
        counts
    }

    /// Mean of the derived quantity over all estimates drawn for each
    /// (node, model); `NaN` where none were drawn.
    pub fn conditional_means(&self) -> Vec<f64> {
        self.derived_sum
            .iter()
            .zip(&self.derived_n)
            .map(|(s, &n)| if n > 0 { s / n as f64 } else { f64::NAN })
            .collect()
    }

    pub fn total_estimates(&self) -> u64 {
        self.refreshed.iter().sum()
    }

    /// Long-form CSV `iteration,node,model` with 1-based iterations.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,node,model\n");
        self.for_each_state(|i, s| {
            for (v, m) in s.iter().enumerate() {
                out.push_str(&format!("{},{v},{m}\n", i + 1));
            }
        });
        out
    }

    pub fn parse_csv(text: &str, width: usize, height: usize, model_count: usize) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        if lines.next() != Some("iteration,node,model") {
            return Err(Error::Parse("expected header iteration,node,model".into()));
        }
        let nodes = width * height;
        let mut fields: Vec<Vec<usize>> = Vec::new();
        for line in lines {
            let bad = || Error::Parse(format!("bad trace row {line:?}"));
            let mut it = line.split(',').map(|x| x.parse::<usize>());
            let (i, v, m) = match (it.next(), it.next(), it.next()) {
                (Some(Ok(i)), Some(Ok(v)), Some(Ok(m))) if i >= 1 && v < nodes && m < model_count => (i, v, m),
                _ => return Err(bad()),
            };
            while fields.len() < i {
                fields.push(vec![usize::MAX; nodes]);
            }
            fields[i - 1][v] = m;
        }
        let fields = fields
            .into_iter()
            .map(|s| {
                if s.contains(&usize::MAX) {
                    return Err(Error::Parse("trace is missing (iteration, node) entries".into()));
                }
                ModelField::new(width, height, model_count, s)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_fields(&fields)
    }
}

fn check_inputs<S: EvidenceSource + ?Sized>(
    source: &S,
    graph: &LatticeGraph,
    init: &ModelField,
    cfg: &ChainConfig,
) -> Result<()> {
    cfg.validate()?;
    if source.node_count() != graph.node_count() || !init.matches(graph) {
        return Err(invalid("data, lattice and initial field sizes differ"));
    }
    if init.model_count() != source.model_count() {
        return Err(invalid("initial field and evidence source disagree on the number of models"));
    }
    if source.model_count() < 2 {
        return Err(invalid("model selection needs at least two models"));
    }
    if source.model_count() > u8::MAX as usize {
        return Err(invalid("at most 255 model orders are supported"));
    }
    Ok(())
}

/// Failure accounting against a budget on the planned number of estimates.
struct Budget {
    allowed: u64,
    failures: u64,
    planned: u64,
}

impl Budget {
    fn new(fraction: f64, planned: u64) -> Self {
        Self { allowed: (fraction * planned as f64).floor() as u64, failures: 0, planned }
    }

    fn add(&mut self, failed: u64) -> Result<()> {
        self.failures += failed;
        if self.failures > self.allowed {
            return Err(Error::FailureBudget { failures: self.failures, proposals: self.planned });
        }
        Ok(())
    }
}

#[inline]
fn propose_other<R: Rng + ?Sized>(current: usize, model_count: usize, rng: &mut R) -> usize {
    let k = rng.random_range(0..model_count - 1);
    if k < current {
        k
    } else {
        k + 1
    }
}

/// Per-node argmax of `log Z + log prior`, ties to the smaller order.
pub fn independent_select(
    matrix: &EvidenceMatrix,
    log_model_prior: Option<&[f64]>,
    width: usize,
    height: usize,
) -> Result<ModelField> {
    if width * height != matrix.node_count {
        return Err(invalid("matrix node count does not match the lattice"));
    }
    if let Some(p) = log_model_prior {
        if p.len() != matrix.model_count {
            return Err(invalid("model prior length does not match the matrix"));
        }
    }
    let mut states = Vec::with_capacity(matrix.node_count);
    for v in 0..matrix.node_count {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for m in 0..matrix.model_count {
            let lz = matrix.get(v, m);
            if lz.is_nan() {
                return Err(invalid(format!("missing evidence for node {v}, model {m}")));
            }
            let score = lz + log_model_prior.map_or(0.0, |p| p[m]);
            if score > best_score || (m == 0 && score == f64::NEG_INFINITY) {
                best = m;
                best_score = score;
            }
        }
        states.push(best);
    }
    ModelField::new(width, height, matrix.model_count, states)
}

/// Initial field from the Potts prior: uniform random states followed by
/// `sweeps` Gibbs sweeps.
pub fn init_prior_gibbs(
    graph: &LatticeGraph,
    model_count: usize,
    coupling: f64,
    sweeps: usize,
    seed: u64,
) -> Result<ModelField> {
    let params = PottsParams::new(coupling, model_count)?;
    let mut rng = stream(seed, &[tag::INIT]);
    let mut field = ModelField::uniform_random(graph, model_count, &mut rng);
    for _ in 0..sweeps {
        gibbs_sweep(&mut field, &params, graph, &mut rng);
    }
    Ok(field)
}

/// Node-wise pseudo-marginal sampler. The first iteration draws an estimate
/// for every node's initial order; each later iteration is a raster sweep
/// proposing a different order at every node with a fresh estimate.
/// `n` iterations therefore draw `n |V|` estimates.
pub fn nwpm_run<S: EvidenceSource + ?Sized>(
    source: &S,
    graph: &LatticeGraph,
    init: &ModelField,
    cfg: &ChainConfig,
    seed: u64,
) -> Result<ChainTrace> {
    check_inputs(source, graph, init, cfg)?;
    let nodes = graph.node_count();
    let models = source.model_count();
    let mut budget = Budget::new(cfg.failure_budget, (cfg.iterations * nodes) as u64);
    let mut trace = ChainTrace::new(graph.width(), graph.height(), models, cfg.iterations);
    let mut rng = stream(seed, &[tag::CHAIN]);
    let mut field = init.clone();
    let start = Instant::now();

    let initial: Vec<(EvidenceDraw, bool)> =
        (0..nodes).into_par_iter().map(|v| draw_or_zero(source, v, field.get(v), 0)).collect::<Result<_>>()?;
    let mut log_z: Vec<f64> = initial.iter().map(|d| d.0.log_z).collect();
    for (v, d) in initial.iter().enumerate() {
        trace.record_derived(v, field.get(v), d.0.derived);
    }
    budget.add(initial.iter().filter(|d| d.1).count() as u64)?;
    trace.push(&field, 0, 0, nodes as u64, start.elapsed().as_secs_f64());

    let mut proposals = vec![0usize; nodes];
    let mut uniforms = vec![0.0f64; nodes];
    for i in 1..cfg.iterations {
        let sweep_start = Instant::now();
        // A node's own state changes only at its own update, so every
        // proposal of the sweep is known up front and the estimates can be
        // drawn in parallel.
        for v in 0..nodes {
            proposals[v] = propose_other(field.get(v), models, &mut rng);
            uniforms[v] = rng.random();
        }
        let draws: Vec<(EvidenceDraw, bool)> = (0..nodes)
            .into_par_iter()
            .map(|v| draw_or_zero(source, v, proposals[v], i as u64))
            .collect::<Result<_>>()?;
        budget.add(draws.iter().filter(|d| d.1).count() as u64)?;

        let mut accepted = 0;
        for v in 0..nodes {
            let (draw, _) = draws[v];
            trace.record_derived(v, proposals[v], draw.derived);
            let delta =
                agreements(&field, graph, v, proposals[v]) as f64 - agreements(&field, graph, v, field.get(v)) as f64;
            let log_r = cfg.coupling * delta + (draw.log_z - log_z[v]);
            if accept(uniforms[v], log_r, draw.log_z) {
                field.set(v, proposals[v]);
                log_z[v] = draw.log_z;
                accepted += 1;
            }
        }
        trace.push(&field, accepted, nodes as u64, nodes as u64, sweep_start.elapsed().as_secs_f64());
    }
    trace.failures = budget.failures;
    Ok(trace)
}

/// MH acceptance that never accepts a zero estimate.
#[inline]
fn accept(u: f64, log_r: f64, proposed_log_z: f64) -> bool {
    proposed_log_z > f64::NEG_INFINITY && (log_r.is_nan() || u.ln() < log_r)
}

/// One raster sweep of order updates against stored estimates.
fn fixed_field_sweep(
    field: &mut ModelField,
    matrix: &EvidenceMatrix,
    graph: &LatticeGraph,
    coupling: f64,
    rng: &mut StreamRng,
) -> u64 {
    let models = matrix.model_count;
    let mut accepted = 0;
    for v in 0..graph.node_count() {
        let cur = field.get(v);
        let prop = propose_other(cur, models, rng);
        let u: f64 = rng.random();
        let delta = agreements(field, graph, v, prop) as f64 - agreements(field, graph, v, cur) as f64;
        let proposed = matrix.get(v, prop);
        let log_r = coupling * delta + (proposed - matrix.get(v, cur));
        if accept(u, log_r, proposed) {
            field.set(v, prop);
            accepted += 1;
        }
    }
    accepted
}

fn initial_matrix<S: EvidenceSource + ?Sized>(
    source: &S,
    trace: &mut ChainTrace,
    budget: &mut Budget,
) -> Result<EvidenceMatrix> {
    let (matrix, failures) = fill_matrix(source, 0)?;
    budget.add(failures)?;
    for v in 0..matrix.node_count {
        for m in 0..matrix.model_count {
            trace.record_derived(v, m, matrix.entry(v, m).derived);
        }
    }
    Ok(matrix)
}

/// Single-estimation variant: one estimate per (node, model) drawn before
/// the chain, then `n` sweeps using only those values.
pub fn nwse_run<S: EvidenceSource + ?Sized>(
    source: &S,
    graph: &LatticeGraph,
    init: &ModelField,
    cfg: &ChainConfig,
    seed: u64,
) -> Result<ChainTrace> {
    nwma_run(source, graph, init, cfg, usize::MAX, seed)
}

/// Multiple-augmentation variant: keeps an estimate for every (node, model)
/// and, after every `kappa`-th sweep, proposes a fresh block of estimates at
/// each node, accepted with the ratio of fresh to stored estimate at the
/// node's current order.
pub fn nwma_run<S: EvidenceSource + ?Sized>(
    source: &S,
    graph: &LatticeGraph,
    init: &ModelField,
    cfg: &ChainConfig,
    kappa: usize,
    seed: u64,
) -> Result<ChainTrace> {
    check_inputs(source, graph, init, cfg)?;
    if kappa == 0 {
        return Err(invalid("refresh period must be at least 1"));
    }
    let nodes = graph.node_count();
    let models = source.model_count();
    let refreshes = (cfg.iterations / kappa) as u64;
    let mut budget = Budget::new(cfg.failure_budget, (nodes * models) as u64 * (1 + refreshes));
    let mut trace = ChainTrace::new(graph.width(), graph.height(), models, cfg.iterations);
    let mut rng = stream(seed, &[tag::CHAIN]);
    let mut field = init.clone();

    let start = Instant::now();
    let mut matrix = initial_matrix(source, &mut trace, &mut budget)?;
    let mut setup_time = start.elapsed().as_secs_f64();

    for i in 1..=cfg.iterations {
        let sweep_start = Instant::now();
        let mut accepted = fixed_field_sweep(&mut field, &matrix, graph, cfg.coupling, &mut rng);
        let mut proposed = nodes as u64;
        let mut drawn = if i == 1 { (nodes * models) as u64 } else { 0 };
        if i % kappa == 0 {
            let (fresh, failures) = fill_matrix(source, i as u64)?;
            budget.add(failures)?;
            drawn += (nodes * models) as u64;
            for v in 0..nodes {
                for m in 0..models {
                    trace.record_derived(v, m, fresh.entry(v, m).derived);
                }
                let cur = field.get(v);
                let u: f64 = rng.random();
                let new = fresh.get(v, cur);
                if accept(u, new - matrix.get(v, cur), new) {
                    let row = v * models..(v + 1) * models;
                    matrix.log_z[row.clone()].copy_from_slice(&fresh.log_z[row.clone()]);
                    matrix.derived[row.clone()].copy_from_slice(&fresh.derived[row]);
                    accepted += 1;
                }
                proposed += 1;
            }
        }
        let elapsed = sweep_start.elapsed().as_secs_f64() + std::mem::take(&mut setup_time);
        trace.push(&field, accepted, proposed, drawn, elapsed);
    }
    trace.failures = budget.failures;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidence::{Counting, ExactEvidence, SmcEvidence};
    use crate::model::NodeModel;
    use crate::potts::{config_index, enumerate_with_field, log_prior_unnorm};
    use crate::smc::SmcConfig;
    use crate::toy::{ToyModel, ToyModelParams};

    fn toy() -> ToyModel {
        ToyModel::new(ToyModelParams { mu0: vec![5.0, -5.0], sigma0: 5.0, sigma: 1.0 }).unwrap()
    }

    #[test]
    fn independent_select_examples() {
        let m = EvidenceMatrix::from_log_z(1, 2, vec![-3.0, -1.0]).unwrap();
        assert_eq!(independent_select(&m, None, 1, 1).unwrap().states(), &[1]);
        let tie = EvidenceMatrix::from_log_z(1, 3, vec![-1.0, -1.0, -1.0]).unwrap();
        assert_eq!(independent_select(&tie, None, 1, 1).unwrap().states(), &[0]);
        let dead = EvidenceMatrix::from_log_z(1, 2, vec![f64::NEG_INFINITY; 2]).unwrap();
        assert_eq!(independent_select(&dead, None, 1, 1).unwrap().states(), &[0]);
        let missing = EvidenceMatrix::from_log_z(1, 2, vec![f64::NAN, 0.0]).unwrap();
        assert!(independent_select(&missing, None, 1, 1).is_err());
        let prior = [0.0, -5.0];
        assert_eq!(independent_select(&m, Some(&prior), 1, 1).unwrap().states(), &[0]);
    }

    fn tv_against_enumeration(trace: &ChainTrace, probs: &[f64]) -> f64 {
        let mut freq = vec![0.0; probs.len()];
        trace.for_each_state(|_, s| {
            let st: Vec<usize> = s.iter().map(|&x| x as usize).collect();
            freq[config_index(&st, 2)] += 1.0;
        });
        let n = trace.len() as f64;
        0.5 * freq.iter().zip(probs).map(|(f, p)| (f / n - p).abs()).sum::<f64>()
    }

    #[test]
    fn oracle_chains_match_enumeration_on_small_lattice() {
        let model = toy();
        let graph = LatticeGraph::new(2, 2).unwrap();
        let data = vec![1.0, -0.5, 0.3, 2.0];
        let exact = ExactEvidence { family: &model, data: &data };
        let external: Vec<Vec<f64>> =
            data.iter().map(|&y| (0..2).map(|m| exact.family.exact_log_marginal(&y, m).unwrap()).collect()).collect();
        let table = enumerate_with_field(&graph, &PottsParams::new(0.6, 2).unwrap(), &external).unwrap();
        let init = ModelField::constant(2, 2, 2, 0).unwrap();
        let cfg = ChainConfig::new(0.6, 40_000);
        let a = nwpm_run(&exact, &graph, &init, &cfg, 1).unwrap();
        let b = nwse_run(&exact, &graph, &init, &cfg, 2).unwrap();
        let c = nwma_run(&exact, &graph, &init, &cfg, 7, 3).unwrap();
        for t in [&a, &b, &c] {
            assert!(tv_against_enumeration(t, &table.probs) < 0.02);
        }
    }

    #[test]
    fn zero_coupling_gives_softmax_marginals() {
        let matrix = EvidenceMatrix::from_log_z(2, 2, vec![0.0, 1.0, 2.0, -1.0]).unwrap();
        struct M(EvidenceMatrix);
        impl EvidenceSource for M {
            fn node_count(&self) -> usize {
                2
            }
            fn model_count(&self) -> usize {
                2
            }
            fn draw(&self, v: usize, m: usize, _e: u64) -> Result<EvidenceDraw> {
                Ok(self.0.entry(v, m))
            }
        }
        let graph = LatticeGraph::new(2, 1).unwrap();
        let init = ModelField::constant(2, 1, 2, 0).unwrap();
        let trace = nwse_run(&M(matrix), &graph, &init, &ChainConfig::new(0.0, 50_000), 5).unwrap();
        let counts = trace.counts();
        let p1 = 1.0f64.exp() / (1.0 + 1.0f64.exp());
        let p2 = 1.0 / (1.0 + (-3.0f64).exp());
        assert!((counts[1] as f64 / 50_000.0 - p1).abs() < 0.01);
        assert!((counts[2] as f64 / 50_000.0 - p2).abs() < 0.01);
    }

    #[test]
    fn single_node_is_gimh() {
        let model = toy();
        let data = vec![-1.0];
        let src = SmcEvidence::new(&model, &data, SmcConfig::new(10, 5), 3).unwrap();
        let graph = LatticeGraph::new(1, 1).unwrap();
        let init = ModelField::constant(1, 1, 2, 0).unwrap();
        let trace = nwpm_run(&src, &graph, &init, &ChainConfig::new(1.0, 20_000), 4).unwrap();
        let lz: Vec<f64> = (0..2).map(|m| model.exact_log_marginal(&-1.0, m).unwrap()).collect();
        let p = 1.0 / (1.0 + (lz[0] - lz[1]).exp());
        let freq = trace.counts()[1] as f64 / 20_000.0;
        assert!((freq - p).abs() < 0.03, "{freq} vs {p}");
    }

    #[test]
    fn estimate_counts() {
        let model = toy();
        let data: Vec<f64> = (0..12).map(|i| i as f64 - 6.0).collect();
        let graph = LatticeGraph::new(4, 3).unwrap();
        let init = ModelField::constant(4, 3, 2, 1).unwrap();
        let cfg = ChainConfig::new(0.5, 23);
        let src = Counting::new(ExactEvidence { family: &model, data: &data });
        let t = nwpm_run(&src, &graph, &init, &cfg, 1).unwrap();
        assert_eq!(src.count(), 23 * 12);
        assert_eq!(t.total_estimates(), 23 * 12);
        assert_eq!(t.len(), 23);
        let src = Counting::new(ExactEvidence { family: &model, data: &data });
        nwse_run(&src, &graph, &init, &cfg, 1).unwrap();
        assert_eq!(src.count(), 24);
        for kappa in [1, 5, 23, 40] {
            let src = Counting::new(ExactEvidence { family: &model, data: &data });
            let t = nwma_run(&src, &graph, &init, &cfg, kappa, 1).unwrap();
            assert_eq!(src.count(), 24 * (1 + 23 / kappa as u64));
            assert_eq!(t.total_estimates(), src.count());
        }
    }

    #[test]
    fn long_refresh_period_equals_single_estimation() {
        let model = toy();
        let data: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) * 1.5).collect();
        let src = SmcEvidence::new(&model, &data, SmcConfig::new(10, 5), 11).unwrap();
        let graph = LatticeGraph::new(3, 3).unwrap();
        let init = ModelField::constant(3, 3, 2, 0).unwrap();
        let cfg = ChainConfig::new(0.4, 30);
        let a = nwse_run(&src, &graph, &init, &cfg, 9).unwrap();
        let b = nwma_run(&src, &graph, &init, &cfg, 31, 9).unwrap();
        let mut fa = Vec::new();
        let mut fb = Vec::new();
        a.for_each_state(|_, s| fa.push(s.to_vec()));
        b.for_each_state(|_, s| fb.push(s.to_vec()));
        assert_eq!(fa, fb);
    }

    /// Replays an NWPM chain, checking that rejected proposals leave the
    /// stored pair untouched and that local prior ratios equal global ones.
    #[test]
    fn rejected_proposals_keep_state_and_ratios_are_local() {
        let model = toy();
        let data: Vec<f64> = (0..16).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let src = SmcEvidence::new(&model, &data, SmcConfig::new(8, 4), 2).unwrap();
        let graph = LatticeGraph::new(4, 4).unwrap();
        let init = init_prior_gibbs(&graph, 2, 0.3, 5, 1).unwrap();
        let cfg = ChainConfig::new(0.8, 15);
        let trace = nwpm_run(&src, &graph, &init, &cfg, 6).unwrap();

        let params = PottsParams::new(0.8, 2).unwrap();
        let mut rng = stream(6, &[tag::CHAIN]);
        let mut field = init.clone();
        let mut log_z: Vec<f64> = (0..16).map(|v| src.draw(v, field.get(v), 0).unwrap().log_z).collect();
        for i in 1..15 {
            let props: Vec<(usize, f64)> =
                (0..16).map(|v| (propose_other(field.get(v), 2, &mut rng), rng.random::<f64>())).collect();
            for v in 0..16 {
                let (prop, u) = props[v];
                let fresh = src.draw(v, prop, i as u64).unwrap().log_z;
                let mut moved = field.clone();
                moved.set(v, prop);
                let global = log_prior_unnorm(&moved, &params, &graph) - log_prior_unnorm(&field, &params, &graph);
                let local = crate::potts::log_prior_ratio(&field, &graph, 0.8, v, prop);
                assert!((global - local).abs() < 1e-10);
                if u.ln() < global + fresh - log_z[v] {
                    field = moved;
                    log_z[v] = fresh;
                }
            }
            assert_eq!(field, trace.field_at(i).unwrap());
        }
    }

    #[test]
    fn trace_storage_and_csv() {
        let mut rng = stream(1, &[0]);
        let graph = LatticeGraph::new(3, 2).unwrap();
        let fields: Vec<ModelField> = (0..1500).map(|_| ModelField::uniform_random(&graph, 3, &mut rng)).collect();
        let long = ChainTrace::from_fields(&fields).unwrap();
        assert!(matches!(long.storage, Storage::Deltas { .. }));
        assert_eq!(long.field_at(1234).unwrap(), fields[1234]);
        let short = ChainTrace::from_fields(&fields[..10]).unwrap();
        let back = ChainTrace::parse_csv(&short.to_csv(), 3, 2, 3).unwrap();
        assert_eq!(back.counts(), short.counts());
        assert_eq!(back.field_at(9).unwrap(), fields[9]);
    }

    #[test]
    fn prior_gibbs_init_is_seeded() {
        let graph = LatticeGraph::new(5, 5).unwrap();
        let a = init_prior_gibbs(&graph, 3, 0.4, 10, 8).unwrap();
        assert_eq!(a, init_prior_gibbs(&graph, 3, 0.4, 10, 8).unwrap());
        assert_ne!(a, init_prior_gibbs(&graph, 3, 0.4, 10, 9).unwrap());
    }

    #[test]
    fn failure_budget_enforced() {
        struct Broken;
        impl EvidenceSource for Broken {
            fn node_count(&self) -> usize {
                4
            }
            fn model_count(&self) -> usize {
                2
            }
            fn draw(&self, _v: usize, m: usize, _e: u64) -> Result<EvidenceDraw> {
                if m == 1 {
                    Err(Error::EstimationFailure { temperature: 1 })
                } else {
                    Ok(EvidenceDraw { log_z: 0.0, derived: 0.0 })
                }
            }
        }
        let graph = LatticeGraph::new(2, 2).unwrap();
        let init = ModelField::constant(2, 2, 2, 0).unwrap();
        let err = nwpm_run(&Broken, &graph, &init, &ChainConfig::new(0.1, 5), 1).unwrap_err();
        assert!(matches!(err, Error::FailureBudget { .. }));
        let lenient = ChainConfig { failure_budget: 1.0, ..ChainConfig::new(0.1, 5) };
        let t = nwpm_run(&Broken, &graph, &init, &lenient, 1).unwrap();
        assert_eq!(t.counts()[1], 0);
        assert_eq!(t.failures, 16);
    }
}
