//! Sources of per-node evidence estimates and the full evidence matrix.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::model::NodeModel;
use crate::rng::{stream, tag};
use crate::smc::{estimate_evidence, SmcConfig};

/// One evidence estimate with the matching conditional mean of the derived
/// quantity (`NaN` when the source has none).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvidenceDraw {
    pub log_z: f64,
    pub derived: f64,
}

/// Anything that yields evidence estimates keyed by `(node, model, epoch)`.
///
/// Repeated calls with the same key must return the same value, which is
/// what makes runs independent of thread scheduling.
pub trait EvidenceSource: Sync {
    fn node_count(&self) -> usize;
    fn model_count(&self) -> usize;
    fn draw(&self, node: usize, model: usize, epoch: u64) -> Result<EvidenceDraw>;
}

/// Annealed SMC estimates on observed data.
pub struct SmcEvidence<'a, F: NodeModel> {
    pub family: &'a F,
    pub data: &'a [F::Data],
    pub cfg: SmcConfig,
    pub seed: u64,
}

impl<'a, F: NodeModel> SmcEvidence<'a, F> {
    pub fn new(family: &'a F, data: &'a [F::Data], cfg: SmcConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { family, data, cfg, seed })
    }
}

impl<F: NodeModel> EvidenceSource for SmcEvidence<'_, F> {
    fn node_count(&self) -> usize {
        self.data.len()
    }

    fn model_count(&self) -> usize {
        self.family.model_count()
    }

    fn draw(&self, node: usize, model: usize, epoch: u64) -> Result<EvidenceDraw> {
        let mut rng = stream(self.seed, &[tag::EVIDENCE, node as u64, model as u64, epoch]);
        let est = estimate_evidence(self.family, &self.data[node], model, &self.cfg, &mut rng)?;
        Ok(EvidenceDraw { log_z: est.log_z, derived: est.derived_mean })
    }
}

/// Closed-form marginal likelihoods used as zero-variance estimates.
pub struct ExactEvidence<'a, F: NodeModel> {
    pub family: &'a F,
    pub data: &'a [F::Data],
}

impl<F: NodeModel> EvidenceSource for ExactEvidence<'_, F> {
    fn node_count(&self) -> usize {
        self.data.len()
    }

    fn model_count(&self) -> usize {
        self.family.model_count()
    }

    fn draw(&self, node: usize, model: usize, _epoch: u64) -> Result<EvidenceDraw> {
        let log_z = self
            .family
            .exact_log_marginal(&self.data[node], model)
            .ok_or_else(|| invalid("model family has no closed-form marginal likelihood"))?;
        Ok(EvidenceDraw { log_z, derived: f64::NAN })
    }
}

/// Serves the epoch-0 entries from a precomputed matrix and delegates the
/// rest, so several samplers can share one initial matrix.
pub struct Prefilled<'a, S> {
    pub matrix: &'a EvidenceMatrix,
    pub inner: &'a S,
}

impl<S: EvidenceSource> EvidenceSource for Prefilled<'_, S> {
    fn node_count(&self) -> usize {
        self.matrix.node_count
    }

    fn model_count(&self) -> usize {
        self.matrix.model_count
    }

    fn draw(&self, node: usize, model: usize, epoch: u64) -> Result<EvidenceDraw> {
        if epoch == 0 {
            Ok(self.matrix.entry(node, model))
        } else {
            self.inner.draw(node, model, epoch)
        }
    }
}

/// Wraps a source and counts the estimates it hands out.
pub struct Counting<S> {
    inner: S,
    count: AtomicU64,
}

impl<S> Counting<S> {
    pub fn new(inner: S) -> Self {
        Self { inner, count: AtomicU64::new(0) }
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }
}

impl<S: EvidenceSource> EvidenceSource for Counting<S> {
    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    fn model_count(&self) -> usize {
        self.inner.model_count()
    }

    fn draw(&self, node: usize, model: usize, epoch: u64) -> Result<EvidenceDraw> {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.draw(node, model, epoch)
    }
}

/// Draws an estimate, turning an estimation failure into `log_z = -inf`.
/// Returns whether the draw failed.
pub(crate) fn draw_or_zero<S: EvidenceSource + ?Sized>(
    source: &S,
    node: usize,
    model: usize,
    epoch: u64,
) -> Result<(EvidenceDraw, bool)> {
    match source.draw(node, model, epoch) {
        Ok(d) if d.log_z.is_nan() => Ok((EvidenceDraw { log_z: f64::NEG_INFINITY, derived: f64::NAN }, true)),
        Ok(d) => Ok((d, d.log_z == f64::NEG_INFINITY)),
        Err(Error::EstimationFailure { .. }) => {
            Ok((EvidenceDraw { log_z: f64::NEG_INFINITY, derived: f64::NAN }, true))
        }
        Err(e) => Err(e),
    }
}

/// One log-evidence estimate per (node, model), node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceMatrix {
    pub node_count: usize,
    pub model_count: usize,
    pub log_z: Vec<f64>,
    pub derived: Vec<f64>,
    pub n_particles: usize,
    pub n_temperatures: usize,
    pub seed: u64,
}

impl EvidenceMatrix {
    pub fn from_log_z(node_count: usize, model_count: usize, log_z: Vec<f64>) -> Result<Self> {
        if log_z.len() != node_count * model_count {
            return Err(invalid("evidence matrix size does not match its dimensions"));
        }
        Ok(Self {
            node_count,
            model_count,
            derived: vec![f64::NAN; log_z.len()],
            log_z,
            n_particles: 0,
            n_temperatures: 0,
            seed: 0,
        })
    }

    #[inline]
    pub fn get(&self, node: usize, model: usize) -> f64 {
        self.log_z[node * self.model_count + model]
    }

    pub fn entry(&self, node: usize, model: usize) -> EvidenceDraw {
        let i = node * self.model_count + model;
        EvidenceDraw { log_z: self.log_z[i], derived: self.derived[i] }
    }

    pub fn row(&self, node: usize) -> &[f64] {
        &self.log_z[node * self.model_count..(node + 1) * self.model_count]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("node,model,log_z,n_particles,n_temperatures,seed\n");
        for v in 0..self.node_count {
            for m in 0..self.model_count {
                out.push_str(&format!(
                    "{v},{m},{:?},{},{},{}\n",
                    self.get(v, m),
                    self.n_particles,
                    self.n_temperatures,
                    self.seed
                ));
            }
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some("node,model,log_z,n_particles,n_temperatures,seed") => {}
            other => return Err(Error::Parse(format!("unexpected evidence header {other:?}"))),
        }
        let mut rows = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Parse(format!("bad evidence row {line:?}"));
            if f.len() != 6 {
                return Err(bad());
            }
            let node: usize = f[0].parse().map_err(|_| bad())?;
            let model: usize = f[1].parse().map_err(|_| bad())?;
            let log_z: f64 = f[2].parse().map_err(|_| bad())?;
            let n: usize = f[3].parse().map_err(|_| bad())?;
            let t: usize = f[4].parse().map_err(|_| bad())?;
            let seed: u64 = f[5].parse().map_err(|_| bad())?;
            rows.push((node, model, log_z, n, t, seed));
        }
        let node_count = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let model_count = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        let mut log_z = vec![f64::NAN; node_count * model_count];
        for r in &rows {
            log_z[r.0 * model_count + r.1] = r.2;
        }
        if rows.len() != log_z.len() || log_z.iter().any(|x| x.is_nan()) {
            return Err(Error::Parse("evidence matrix has missing or duplicate entries".into()));
        }
        let (n_particles, n_temperatures, seed) = rows.first().map(|r| (r.3, r.4, r.5)).unwrap_or_default();
        Ok(Self { n_particles, n_temperatures, seed, ..Self::from_log_z(node_count, model_count, log_z)? })
    }
}

/// Fills the full matrix at `epoch`, in parallel over entries. Returns the
/// matrix and the number of failed estimates.
pub fn fill_matrix<S: EvidenceSource + ?Sized>(source: &S, epoch: u64) -> Result<(EvidenceMatrix, u64)> {
    let (nodes, models) = (source.node_count(), source.model_count());
    let draws: Vec<(EvidenceDraw, bool)> = (0..nodes * models)
        .into_par_iter()
        .map(|i| draw_or_zero(source, i / models, i % models, epoch))
        .collect::<Result<_>>()?;
    let failures = draws.iter().filter(|d| d.1).count() as u64;
    let mut matrix = EvidenceMatrix::from_log_z(nodes, models, draws.iter().map(|d| d.0.log_z).collect())?;
    matrix.derived = draws.iter().map(|d| d.0.derived).collect();
    Ok((matrix, failures))
}

/// Evidence matrix from SMC with its metadata filled in.
pub fn smc_matrix<F: NodeModel>(source: &SmcEvidence<'_, F>) -> Result<(EvidenceMatrix, u64)> {
    let (mut m, failures) = fill_matrix(source, 0)?;
    m.n_particles = source.cfg.particles;
    m.n_temperatures = source.cfg.temperatures;
    m.seed = source.seed;
    Ok((m, failures))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{ToyModel, ToyModelParams};

    fn toy() -> ToyModel {
        ToyModel::new(ToyModelParams { mu0: vec![5.0, -5.0], sigma0: 5.0, sigma: 1.0 }).unwrap()
    }

    #[test]
    fn draws_are_keyed_not_ordered() {
        let model = toy();
        let data = vec![4.0, -2.0, 0.5];
        let src = SmcEvidence::new(&model, &data, SmcConfig::new(20, 10), 7).unwrap();
        let a = src.draw(1, 0, 3).unwrap();
        let _ = src.draw(2, 1, 0).unwrap();
        let b = src.draw(1, 0, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(src.draw(1, 0, 4).unwrap().log_z, a.log_z);
    }

    #[test]
    fn matrix_round_trip_and_parallel_equality() {
        let model = toy();
        let data = vec![4.0, -2.0, 0.5, 9.0];
        let src = SmcEvidence::new(&model, &data, SmcConfig::new(20, 10), 7).unwrap();
        let (m, failures) = smc_matrix(&src).unwrap();
        assert_eq!(failures, 0);
        for v in 0..4 {
            for k in 0..2 {
                assert_eq!(m.get(v, k), src.draw(v, k, 0).unwrap().log_z);
            }
        }
        let back = EvidenceMatrix::parse_csv(&m.to_csv()).unwrap();
        assert_eq!(back.log_z, m.log_z);
        assert_eq!((back.n_particles, back.n_temperatures, back.seed), (20, 10, 7));
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let (again, _) = single.install(|| smc_matrix(&src)).unwrap();
        assert_eq!(again.log_z, m.log_z);
    }

    #[test]
    fn counting_and_prefill() {
        let model = toy();
        let data = vec![1.0, 2.0];
        let exact = Counting::new(ExactEvidence { family: &model, data: &data });
        let (m, _) = fill_matrix(&exact, 0).unwrap();
        assert_eq!(exact.count(), 4);
        let pre = Prefilled { matrix: &m, inner: &exact };
        pre.draw(0, 1, 0).unwrap();
        assert_eq!(exact.count(), 4);
        pre.draw(0, 1, 5).unwrap();
        assert_eq!(exact.count(), 5);
        assert!(EvidenceMatrix::parse_csv("node,model,log_z,n_particles,n_temperatures,seed\n0,1,2.0,1,1,1\n").is_err());
    }
}
