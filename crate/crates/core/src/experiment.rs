//! Replicated studies: configuration, data simulation, runs of every
//! sampler over replicates and couplings, aggregated metrics and the output
//! manifest.
//!
//! Everything random is keyed from the master seed. Data are simulated once
//! per study; replicate `r` then draws all of its evidence estimates, initial
//! fields and chain moves from streams keyed by `(seed, r, ...)`, shared by
//! every sampler with the same SMC settings so that methods are compared on
//! common random numbers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::evidence::{fill_matrix, EvidenceMatrix, Prefilled, SmcEvidence};
use crate::lattice::{ground_truth_field, LatticeGraph, RegionMask};
use crate::metrics::{self, modal_select, percent_correct, percent_correct_by_iteration, SelectionResult, VdMode};
use crate::model::NodeModel;
use crate::pet::{
    simulate_pet_image, volume_of_distribution, FrameSchedule, Kinetics, NoiseKind, PetImage, PetModel, PetPrior,
    PetSetup, PlasmaInput,
};
use crate::potts::ModelField;
use crate::rng::{derive_seed, tag};
use crate::samplers::{independent_select, init_prior_gibbs, nwma_run, nwpm_run, nwse_run, ChainConfig, ChainTrace};
use crate::smc::{estimate_evidence, SmcConfig};
use crate::toy::{toy_simulate, ToyModel, ToyModelParams};

/// Fraction of runs allowed to fail before the whole study is an error.
pub const MAX_FAILED_FRACTION: f64 = 0.1;

pub const PRESET_NAMES: [&str; 6] =
    ["toy-study1", "toy-study1-large", "toy-study2", "pet-sim", "pet-sim-desk", "toy-long-run"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub replicates: usize,
    pub lattice: LatticeSpec,
    pub family: FamilySpec,
    /// Potts couplings; every chain sampler runs once per coupling.
    #[serde(default)]
    pub couplings: Vec<f64>,
    pub samplers: Vec<SamplerSpec>,
    #[serde(default)]
    pub init: InitSpec,
    /// Allowed fraction of failed evidence estimates within one run.
    #[serde(default = "default_failure_budget")]
    pub failure_budget: f64,
    /// Write wall-clock timings. Timing files are the only outputs that
    /// differ between otherwise identical runs.
    #[serde(default = "default_true")]
    pub record_timing: bool,
    /// Write per-run trace and summary files.
    #[serde(default)]
    pub write_traces: bool,
}

fn default_failure_budget() -> f64 {
    1e-3
}

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub mask: MaskSource,
    #[serde(default = "default_one")]
    pub upscale: usize,
    #[serde(default = "default_one")]
    pub downsample: usize,
    /// Region label to model index.
    pub regions: BTreeMap<u32, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MaskSource {
    /// The bundled 20×20 four-region mask.
    Default20,
    /// Its five-fold upscale.
    Default100,
    File {
        path: PathBuf,
    },
    /// A single region labelled 0.
    Uniform {
        width: usize,
        height: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FamilySpec {
    Toy(ToyModelParams),
    Pet(PetSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PetSpec {
    /// True kinetics for model index `m` (`m + 1` compartments).
    pub truth: Vec<KineticsSpec>,
    pub input: InputSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    pub noise_level: f64,
    #[serde(default)]
    pub noise: NoiseKind,
    #[serde(default)]
    pub prior: PetPrior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KineticsSpec {
    pub phi: Vec<f64>,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSpec {
    /// `A t exp(-b t)` sampled on the default knots.
    Bolus {
        amplitude: f64,
        rate: f64,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    #[default]
    Default,
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Indep,
    Nwpm,
    Nwse,
    Nwma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub label: String,
    pub kind: SamplerKind,
    /// Graphical iterations; ignored by `indep`.
    #[serde(default)]
    pub iterations: usize,
    /// Refresh period of `nwma`.
    #[serde(default)]
    pub kappa: Option<usize>,
    #[serde(default)]
    pub smc: SmcConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitSpec {
    /// Uniform random field followed by Gibbs sweeps of the Potts prior at
    /// the run's coupling. Above the critical coupling a 20×20 field needs
    /// several hundred sweeps to reach its ordered prior states.
    PriorGibbs { sweeps: usize },
    /// Per-node argmax of the shared initial evidence matrix.
    IndependentArgmax,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self::PriorGibbs { sweeps: 1000 }
    }
}

impl SamplerSpec {
    fn chain(label: &str, kind: SamplerKind, iterations: usize, particles: usize, temperatures: usize) -> Self {
        Self { label: label.into(), kind, iterations, kappa: None, smc: SmcConfig::new(particles, temperatures) }
    }

    fn indep(label: &str, particles: usize, temperatures: usize) -> Self {
        Self::chain(label, SamplerKind::Indep, 0, particles, temperatures)
    }

    fn nwma(label: &str, iterations: usize, kappa: usize, particles: usize, temperatures: usize) -> Self {
        Self { kappa: Some(kappa), ..Self::chain(label, SamplerKind::Nwma, iterations, particles, temperatures) }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative file references relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let MaskSource::File { path } = &mut self.lattice.mask {
            fix(path);
        }
        if let FamilySpec::Pet(pet) = &mut self.family {
            if let InputSpec::File { path } = &mut pet.input {
                fix(path);
            }
            if let ScheduleSpec::File { path } = &mut pet.schedule {
                fix(path);
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_count(&self) -> usize {
        match &self.family {
            FamilySpec::Toy(p) => p.mu0.len(),
            FamilySpec::Pet(p) => p.truth.len(),
        }
    }

    fn has_chains(&self) -> bool {
        self.samplers.iter().any(|s| s.kind != SamplerKind::Indep)
    }

    /// Checks every field without touching files or running anything.
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(invalid("study name is empty"));
        }
        if self.replicates == 0 {
            return Err(invalid("need at least one replicate"));
        }
        if self.lattice.upscale == 0 || self.lattice.downsample == 0 {
            return Err(invalid("lattice scale factors must be at least 1"));
        }
        let models = self.model_count();
        if models < 2 {
            return Err(invalid("need at least two model orders"));
        }
        if let Some((label, m)) = self.lattice.regions.iter().find(|(_, &m)| m >= models) {
            return Err(invalid(format!("region {label} maps to model {m}, but only {models} models exist")));
        }
        match &self.family {
            FamilySpec::Toy(p) => p.validate()?,
            FamilySpec::Pet(p) => {
                for (m, k) in p.truth.iter().enumerate() {
                    if k.phi.len() != m + 1 || k.theta.len() != m + 1 {
                        return Err(invalid(format!("true kinetics for model {m} need {} compartments", m + 1)));
                    }
                    Kinetics::new(k.phi.clone(), k.theta.clone())?;
                    if k.phi.iter().chain(&k.theta).any(|&x| !(x > 0.0)) {
                        return Err(invalid("true rate constants must be positive"));
                    }
                }
                if !(p.noise_level >= 0.0) || !p.noise_level.is_finite() {
                    return Err(invalid("noise level must be finite and non-negative"));
                }
                if let InputSpec::Bolus { amplitude, rate } = p.input {
                    if !(amplitude > 0.0) || !(rate > 0.0) {
                        return Err(invalid("bolus amplitude and rate must be positive"));
                    }
                }
                p.prior.validate()?;
            }
        }
        if self.samplers.is_empty() {
            return Err(invalid("no samplers configured"));
        }
        let mut labels = std::collections::BTreeSet::new();
        for s in &self.samplers {
            if s.label.is_empty() || !s.label.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
                return Err(invalid(format!("sampler label {:?} must be non-empty [A-Za-z0-9._-]", s.label)));
            }
            if !labels.insert(&s.label) {
                return Err(invalid(format!("duplicate sampler label {:?}", s.label)));
            }
            s.smc.validate()?;
            if s.kind != SamplerKind::Indep && s.iterations == 0 {
                return Err(invalid(format!("sampler {:?} needs at least one iteration", s.label)));
            }
            if s.kind == SamplerKind::Nwma && !matches!(s.kappa, Some(k) if k > 0) {
                return Err(invalid(format!("sampler {:?} needs a positive kappa", s.label)));
            }
        }
        if self.has_chains() && self.couplings.is_empty() {
            return Err(invalid("chain samplers need at least one coupling"));
        }
        if self.couplings.iter().any(|j| !(*j >= 0.0) || !j.is_finite()) {
            return Err(invalid("couplings must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.failure_budget) {
            return Err(invalid("failure budget must lie in [0, 1]"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn replicate_seed(&self, r: usize) -> u64 {
        derive_seed(self.seed, &[tag::REPLICATE, r as u64])
    }
}

/// Truth, graph and simulated data of a study.
pub struct StudyData {
    pub truth: ModelField,
    pub graph: LatticeGraph,
    pub observations: Observations,
}

#[allow(clippy::large_enum_variant)]
pub enum Observations {
    Toy { model: ToyModel, values: Vec<f64> },
    Pet { model: PetModel, image: PetImage, curves: Vec<Vec<f64>>, truth_vd: Vec<f64> },
}

impl StudyData {
    /// True derived quantity per node, when the family has one.
    pub fn truth_vd(&self) -> Option<&[f64]> {
        match &self.observations {
            Observations::Pet { truth_vd, .. } => Some(truth_vd),
            Observations::Toy { .. } => None,
        }
    }
}

fn load_mask(spec: &LatticeSpec) -> Result<RegionMask> {
    let mut mask = match &spec.mask {
        MaskSource::Default20 => RegionMask::default_20x20(),
        MaskSource::Default100 => RegionMask::default_100x100(),
        MaskSource::File { path } => RegionMask::parse(
            &fs::read_to_string(path).map_err(|e| invalid(format!("cannot read mask {}: {e}", path.display())))?,
        )?,
        MaskSource::Uniform { width, height } => RegionMask::uniform(*width, *height, 0)?,
    };
    if spec.upscale > 1 {
        mask = mask.upscale(spec.upscale)?;
    }
    if spec.downsample > 1 {
        mask = mask.downsample(spec.downsample)?;
    }
    Ok(mask)
}

fn read_file(path: &Path, what: &str) -> Result<String> {
    fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {what} {}: {e}", path.display())))
}

pub fn pet_setup(spec: &PetSpec) -> Result<PetSetup> {
    let schedule = match &spec.schedule {
        ScheduleSpec::Default => FrameSchedule::default_schedule(),
        ScheduleSpec::File { path } => FrameSchedule::parse_csv(&read_file(path, "frame schedule")?)?,
    };
    let input = match &spec.input {
        InputSpec::Bolus { amplitude, rate } => {
            PlasmaInput::bolus(*amplitude, *rate, &PlasmaInput::default_knots(schedule.last()))?
        }
        InputSpec::File { path } => PlasmaInput::parse_csv(&read_file(path, "plasma input")?)?,
    };
    PetSetup::new(input, schedule)
}

/// Builds the truth field and simulates the study's data set.
pub fn simulate(cfg: &ExperimentConfig) -> Result<StudyData> {
    cfg.validate()?;
    let mask = load_mask(&cfg.lattice)?;
    let truth = ground_truth_field(&mask, &cfg.lattice.regions, cfg.model_count())?;
    let graph = LatticeGraph::new(truth.width(), truth.height())?;
    let seed = derive_seed(cfg.seed, &[tag::DATA]);
    let observations = match &cfg.family {
        FamilySpec::Toy(params) => {
            Observations::Toy { model: ToyModel::new(params.clone())?, values: toy_simulate(&truth, params, seed)? }
        }
        FamilySpec::Pet(spec) => {
            let setup = pet_setup(spec)?;
            let kinetics: Vec<Kinetics> =
                spec.truth.iter().map(|k| Kinetics::new(k.phi.clone(), k.theta.clone())).collect::<Result<_>>()?;
            let image = simulate_pet_image(&truth, &kinetics, &setup, spec.noise_level, seed)?;
            let vd: Vec<f64> = kinetics.iter().map(volume_of_distribution).collect::<Result<_>>()?;
            let truth_vd = truth.states().iter().map(|&m| vd[m]).collect();
            let model = PetModel::new(setup, spec.prior, spec.noise, kinetics.len())?;
            Observations::Pet { model, curves: image.curves(), image, truth_vd }
        }
    };
    Ok(StudyData { truth, graph, observations })
}

/// Scores of one sampler run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub percent_correct: f64,
    /// Percent correct of the cumulative modal selection after each iteration.
    pub by_iteration: Vec<f64>,
    pub accept_rate: f64,
    pub vd_rmse_averaged: Option<f64>,
    pub vd_rmse_modal: Option<f64>,
    pub estimates: u64,
    pub failures: u64,
    /// Wall-clock seconds per iteration.
    pub seconds: Vec<f64>,
    pub selection: ModelField,
    /// Kept only when traces are written.
    pub trace: Option<ChainTrace>,
    /// Mean derived quantity per (node, model), kept only when traces are
    /// written.
    pub conditional_means: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub replicate: usize,
    pub sampler: String,
    pub kind: SamplerKind,
    /// `None` for spatially independent selection.
    pub coupling: Option<f64>,
    pub outcome: std::result::Result<RunMetrics, String>,
}

/// Mean and sample standard deviation across successful replicates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { mean: f64::NAN, sd: f64::NAN, n };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Self { mean, sd, n }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub sampler: String,
    pub kind: SamplerKind,
    pub coupling: Option<f64>,
    pub failed: usize,
    pub percent: MeanSd,
    pub vd_rmse_averaged: MeanSd,
    pub vd_rmse_modal: MeanSd,
    pub accept_rate: MeanSd,
    pub seconds_per_iteration: MeanSd,
    /// Mean and s.d. across replicates of the cumulative percent correct per iteration.
    pub by_iteration: Vec<MeanSd>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub name: String,
    pub config_hash: String,
    pub runs: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
}

impl StudyReport {
    pub fn row(&self, sampler: &str, coupling: Option<f64>) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.sampler == sampler && r.coupling == coupling)
    }

    pub fn failed_runs(&self) -> usize {
        self.runs.iter().filter(|r| r.outcome.is_err()).count()
    }
}

struct Context<'a, F: NodeModel> {
    cfg: &'a ExperimentConfig,
    family: &'a F,
    data: &'a [F::Data],
    graph: &'a LatticeGraph,
    truth: &'a ModelField,
    truth_vd: Option<&'a [f64]>,
}

struct CachedMatrix {
    smc: SmcConfig,
    result: std::result::Result<(EvidenceMatrix, u64, f64), String>,
}

impl<F: NodeModel> Context<'_, F> {
    fn matrix<'c>(&self, cache: &'c mut Vec<CachedMatrix>, smc: &SmcConfig, seed: u64) -> &'c CachedMatrix {
        if let Some(i) = cache.iter().position(|c| &c.smc == smc) {
            return &cache[i];
        }
        let start = Instant::now();
        let result = SmcEvidence::new(self.family, self.data, smc.clone(), seed)
            .and_then(|src| fill_matrix(&src, 0))
            .map(|(m, f)| (m, f, start.elapsed().as_secs_f64()))
            .map_err(|e| e.to_string());
        cache.push(CachedMatrix { smc: smc.clone(), result });
        cache.last().expect("just pushed")
    }

    fn vd_scores(&self, selection: &SelectionResult, conditional_means: &[f64]) -> Result<(Option<f64>, Option<f64>)> {
        let Some(truth) = self.truth_vd else {
            return Ok((None, None));
        };
        let averaged = metrics::vd_maps(selection, conditional_means, VdMode::ModelAveraged)?;
        let modal = metrics::vd_maps(selection, conditional_means, VdMode::PosteriorModal)?;
        Ok((Some(metrics::rmse(&averaged, truth)?), Some(metrics::rmse(&modal, truth)?)))
    }

    fn indep_run(&self, cached: &CachedMatrix) -> Result<RunMetrics> {
        let (matrix, failures, secs) = cached.result.as_ref().map_err(|e| Error::InvalidArgument(e.clone()))?;
        let planned = (matrix.node_count * matrix.model_count) as u64;
        let allowed = (self.cfg.failure_budget * planned as f64).floor() as u64;
        if *failures > allowed {
            return Err(Error::FailureBudget { failures: *failures, proposals: planned });
        }
        let selected = independent_select(matrix, None, self.truth.width(), self.truth.height())?;
        let models = matrix.model_count;
        // posterior order probabilities under a flat order prior
        let mut frequencies = Vec::with_capacity(planned as usize);
        for v in 0..matrix.node_count {
            let row = matrix.row(v);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
            let total: f64 = w.iter().sum();
            frequencies.extend(w.iter().map(|x| x / total));
        }
        let selection = SelectionResult { selected, frequencies };
        let (vd_rmse_averaged, vd_rmse_modal) = self.vd_scores(&selection, &matrix.derived)?;
        let pc = percent_correct(&selection.selected, self.truth)?;
        debug_assert_eq!(selection.frequencies.len(), matrix.node_count * models);
        Ok(RunMetrics {
            percent_correct: pc,
            by_iteration: vec![pc],
            accept_rate: f64::NAN,
            vd_rmse_averaged,
            vd_rmse_modal,
            estimates: planned,
            failures: *failures,
            seconds: vec![*secs],
            selection: selection.selected,
            trace: None,
            conditional_means: self.cfg.write_traces.then(|| matrix.derived.clone()),
        })
    }

    fn chain_run(
        &self,
        spec: &SamplerSpec,
        cached: &CachedMatrix,
        k: usize,
        coupling: f64,
        seed: u64,
    ) -> Result<RunMetrics> {
        let (matrix, _, matrix_secs) = cached.result.as_ref().map_err(|e| Error::InvalidArgument(e.clone()))?;
        let models = matrix.model_count;
        let init = match self.cfg.init {
            InitSpec::PriorGibbs { sweeps } => {
                init_prior_gibbs(self.graph, models, coupling, sweeps, derive_seed(seed, &[tag::INIT, k as u64]))?
            }
            InitSpec::IndependentArgmax => independent_select(matrix, None, self.truth.width(), self.truth.height())?,
        };
        let chain = ChainConfig { coupling, iterations: spec.iterations, failure_budget: self.cfg.failure_budget };
        let src = SmcEvidence::new(self.family, self.data, spec.smc.clone(), seed)?;
        let source = Prefilled { matrix, inner: &src };
        let chain_seed = derive_seed(seed, &[tag::CHAIN, k as u64]);
        let mut trace = match spec.kind {
            SamplerKind::Nwpm => nwpm_run(&source, self.graph, &init, &chain, chain_seed)?,
            SamplerKind::Nwse => nwse_run(&source, self.graph, &init, &chain, chain_seed)?,
            SamplerKind::Nwma => {
                nwma_run(&source, self.graph, &init, &chain, spec.kappa.expect("validated"), chain_seed)?
            }
            SamplerKind::Indep => unreachable!("handled separately"),
        };
        // The shared epoch-0 matrix was built outside the chain; charge its
        // cost to the first iteration (a pseudo-marginal chain only needs the
        // column of its initial orders).
        if let Some(first) = trace.elapsed_s.first_mut() {
            *first += match spec.kind {
                SamplerKind::Nwpm => matrix_secs / models as f64,
                _ => *matrix_secs,
            };
        }
        let selection = modal_select(&trace)?;
        let means = trace.conditional_means();
        let (vd_rmse_averaged, vd_rmse_modal) = self.vd_scores(&selection, &means)?;
        let accepted: u64 = trace.accepted.iter().sum();
        let proposed: u64 = trace.proposed.iter().sum();
        Ok(RunMetrics {
            percent_correct: percent_correct(&selection.selected, self.truth)?,
            by_iteration: percent_correct_by_iteration(&trace, self.truth)?,
            accept_rate: if proposed > 0 { accepted as f64 / proposed as f64 } else { 0.0 },
            vd_rmse_averaged,
            vd_rmse_modal,
            estimates: trace.total_estimates(),
            failures: trace.failures,
            seconds: trace.elapsed_s.clone(),
            selection: selection.selected,
            trace: self.cfg.write_traces.then_some(trace),
            conditional_means: self.cfg.write_traces.then_some(means),
        })
    }

    fn replicate(&self, r: usize) -> Vec<RunRecord> {
        let seed = self.cfg.replicate_seed(r);
        let mut cache = Vec::new();
        let mut out = Vec::new();
        for spec in &self.cfg.samplers {
            let cached = self.matrix(&mut cache, &spec.smc, seed);
            let record = |coupling, outcome: Result<RunMetrics>| RunRecord {
                replicate: r,
                sampler: spec.label.clone(),
                kind: spec.kind,
                coupling,
                outcome: outcome.map_err(|e| e.to_string()),
            };
            if spec.kind == SamplerKind::Indep {
                out.push(record(None, self.indep_run(cached)));
                continue;
            }
            for (k, &coupling) in self.cfg.couplings.iter().enumerate() {
                out.push(record(Some(coupling), self.chain_run(spec, cached, k, coupling, seed)));
            }
        }
        out
    }
}

fn run_all<F: NodeModel>(ctx: &Context<'_, F>) -> Vec<RunRecord> {
    let per_replicate: Vec<Vec<RunRecord>> =
        (0..ctx.cfg.replicates).into_par_iter().map(|r| ctx.replicate(r)).collect();
    per_replicate.into_iter().flatten().collect()
}

fn summarize(cfg: &ExperimentConfig, runs: &[RunRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(&SamplerSpec, Option<f64>)> = Vec::new();
    for spec in &cfg.samplers {
        if spec.kind == SamplerKind::Indep {
            keys.push((spec, None));
        } else {
            keys.extend(cfg.couplings.iter().map(|&j| (spec, Some(j))));
        }
    }
    keys.into_iter()
        .map(|(spec, coupling)| {
            let group: Vec<&RunRecord> =
                runs.iter().filter(|r| r.sampler == spec.label && r.coupling == coupling).collect();
            let ok: Vec<&RunMetrics> = group.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
            let collect = |f: &dyn Fn(&RunMetrics) -> Option<f64>| {
                MeanSd::of(&ok.iter().filter_map(|m| f(m)).collect::<Vec<_>>())
            };
            let length = ok.iter().map(|m| m.by_iteration.len()).max().unwrap_or(0);
            let by_iteration = (0..length)
                .map(|i| MeanSd::of(&ok.iter().filter_map(|m| m.by_iteration.get(i).copied()).collect::<Vec<_>>()))
                .collect();
            SummaryRow {
                sampler: spec.label.clone(),
                kind: spec.kind,
                coupling,
                failed: group.len() - ok.len(),
                percent: collect(&|m| Some(m.percent_correct)),
                vd_rmse_averaged: collect(&|m| m.vd_rmse_averaged),
                vd_rmse_modal: collect(&|m| m.vd_rmse_modal),
                accept_rate: collect(&|m| Some(m.accept_rate).filter(|a| !a.is_nan())),
                seconds_per_iteration: collect(&|m| {
                    Some(m.seconds.iter().sum::<f64>() / m.seconds.len().max(1) as f64)
                }),
                by_iteration,
            }
        })
        .collect()
}

/// Runs every replicate and writes the outputs into `out` when given.
/// Individual failed runs are recorded and excluded from the summaries; the
/// study fails when more than [`MAX_FAILED_FRACTION`] of its runs fail.
pub fn run_study(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<StudyReport> {
    let data = simulate(cfg)?;
    let runs = match &data.observations {
        Observations::Toy { model, values } => run_all(&Context {
            cfg,
            family: model,
            data: values,
            graph: &data.graph,
            truth: &data.truth,
            truth_vd: None,
        }),
        Observations::Pet { model, curves, truth_vd, .. } => run_all(&Context {
            cfg,
            family: model,
            data: curves,
            graph: &data.graph,
            truth: &data.truth,
            truth_vd: Some(truth_vd),
        }),
    };
    let report = StudyReport { name: cfg.name.clone(), config_hash: cfg.hash(), summary: summarize(cfg, &runs), runs };
    if let Some(dir) = out {
        write_study(cfg, &data, &report, dir)?;
    }
    let failed = report.failed_runs();
    if failed as f64 > MAX_FAILED_FRACTION * report.runs.len() as f64 {
        return Err(Error::StudyFailed { failed, total: report.runs.len() });
    }
    Ok(report)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

fn fmt_coupling(c: Option<f64>) -> String {
    fmt_opt(c)
}

fn fmt_kind(kind: SamplerKind) -> &'static str {
    match kind {
        SamplerKind::Indep => "indep",
        SamplerKind::Nwpm => "nwpm",
        SamplerKind::Nwse => "nwse",
        SamplerKind::Nwma => "nwma",
    }
}

/// Collects output files and their hashes; files marked volatile hold
/// wall-clock data and are listed without a hash.
struct OutputDir<'a> {
    root: &'a Path,
    hashes: BTreeMap<String, String>,
    volatile: Vec<String>,
}

impl<'a> OutputDir<'a> {
    fn new(root: &'a Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self { root, hashes: BTreeMap::new(), volatile: Vec::new() })
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.hashes.insert(rel.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    fn write_volatile(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, bytes)?;
        self.volatile.push(rel.to_string());
        Ok(())
    }

    fn finish(self, cfg: &ExperimentConfig, extra: serde_json::Value) -> Result<()> {
        let manifest = serde_json::json!({
            "name": cfg.name,
            "config_sha256": cfg.hash(),
            "seed": cfg.seed,
            "version": env!("CARGO_PKG_VERSION"),
            "replicate_seeds": (0..cfg.replicates).map(|r| cfg.replicate_seed(r)).collect::<Vec<_>>(),
            "files": self.hashes,
            "volatile": self.volatile,
            "extra": extra,
        });
        fs::write(self.root.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}

fn write_data(dir: &mut OutputDir<'_>, cfg: &ExperimentConfig, data: &StudyData) -> Result<()> {
    dir.write("config.json", (cfg.to_json() + "\n").as_bytes())?;
    dir.write("truth.txt", data.truth.to_text().as_bytes())?;
    dir.write("truth.pgm", &metrics::field_to_pgm(&data.truth))?;
    match &data.observations {
        Observations::Toy { values, .. } => {
            let mut csv = String::from("node,y\n");
            for (v, y) in values.iter().enumerate() {
                writeln!(csv, "{v},{y}").expect("string write");
            }
            dir.write("data.csv", csv.as_bytes())?;
        }
        Observations::Pet { model, image, truth_vd, .. } => {
            dir.write("image.csv", image.to_csv().as_bytes())?;
            dir.write("input.csv", model.setup.input().to_csv().as_bytes())?;
            dir.write("schedule.csv", model.setup.schedule().to_csv().as_bytes())?;
            dir.write("truth_vd.csv", metrics::map_to_csv(truth_vd).as_bytes())?;
        }
    }
    Ok(())
}

/// Simulates the study's data and writes it with a manifest.
pub fn write_simulation(cfg: &ExperimentConfig, out: &Path) -> Result<StudyData> {
    let data = simulate(cfg)?;
    let mut dir = OutputDir::new(out)?;
    write_data(&mut dir, cfg, &data)?;
    dir.finish(cfg, serde_json::json!({ "command": "simulate" }))?;
    Ok(data)
}

fn run_dir(r: &RunRecord) -> String {
    match r.coupling {
        Some(j) => format!("runs/{}/J{j}/r{}", r.sampler, r.replicate),
        None => format!("runs/{}/r{}", r.sampler, r.replicate),
    }
}

fn write_study(cfg: &ExperimentConfig, data: &StudyData, report: &StudyReport, root: &Path) -> Result<()> {
    let mut dir = OutputDir::new(root)?;
    write_data(&mut dir, cfg, data)?;

    let mut runs = String::from(
        "replicate,sampler,kind,coupling,status,percent_correct,accept_rate,vd_rmse_averaged,vd_rmse_modal,estimates,failures,error\n",
    );
    for r in &report.runs {
        let head = format!("{},{},{},{}", r.replicate, r.sampler, fmt_kind(r.kind), fmt_coupling(r.coupling));
        match &r.outcome {
            Ok(m) => writeln!(
                runs,
                "{head},ok,{},{},{},{},{},{},",
                m.percent_correct,
                if m.accept_rate.is_nan() { String::new() } else { m.accept_rate.to_string() },
                fmt_opt(m.vd_rmse_averaged),
                fmt_opt(m.vd_rmse_modal),
                m.estimates,
                m.failures
            ),
            Err(e) => writeln!(runs, "{head},failed,,,,,,,{:?}", e.replace(',', ";")),
        }
        .expect("string write");
    }
    dir.write("percent_correct.csv", runs.as_bytes())?;

    let mut summary = String::from(
        "sampler,kind,coupling,runs_ok,runs_failed,mean_percent,sd_percent,mean_vd_rmse_averaged,sd_vd_rmse_averaged,mean_vd_rmse_modal,sd_vd_rmse_modal,mean_accept_rate\n",
    );
    let mut by_iter = String::from("sampler,coupling,iteration,mean_percent,sd_percent,n\n");
    let mut timing = String::from("sampler,coupling,mean_seconds_per_iteration,sd_seconds_per_iteration\n");
    for row in &report.summary {
        let opt =
            |m: MeanSd| if m.n == 0 { (String::new(), String::new()) } else { (m.mean.to_string(), m.sd.to_string()) };
        let (vam, vas) = opt(row.vd_rmse_averaged);
        let (vmm, vms) = opt(row.vd_rmse_modal);
        let (pm, ps) = opt(row.percent);
        let (am, _) = opt(row.accept_rate);
        writeln!(
            summary,
            "{},{},{},{},{},{pm},{ps},{vam},{vas},{vmm},{vms},{am}",
            row.sampler,
            fmt_kind(row.kind),
            fmt_coupling(row.coupling),
            row.percent.n,
            row.failed
        )
        .expect("string write");
        for (i, m) in row.by_iteration.iter().enumerate() {
            writeln!(by_iter, "{},{},{},{},{},{}", row.sampler, fmt_coupling(row.coupling), i + 1, m.mean, m.sd, m.n)
                .expect("string write");
        }
        let (tm, ts) = opt(row.seconds_per_iteration);
        writeln!(timing, "{},{},{tm},{ts}", row.sampler, fmt_coupling(row.coupling)).expect("string write");
    }
    dir.write("study_summary.csv", summary.as_bytes())?;
    dir.write("percent_by_iteration.csv", by_iter.as_bytes())?;
    if cfg.record_timing {
        dir.write_volatile("timing.csv", timing.as_bytes())?;
    }

    if cfg.write_traces {
        for r in &report.runs {
            let Ok(m) = &r.outcome else { continue };
            let base = run_dir(r);
            dir.write(&format!("{base}/selected.txt"), m.selection.to_text().as_bytes())?;
            dir.write(&format!("{base}/selected.pgm"), &metrics::field_to_pgm(&m.selection))?;
            let mut s = String::from("iteration,percent_correct,accept_rate\n");
            let mut t = String::from("iteration,elapsed_s\n");
            for (i, pc) in m.by_iteration.iter().enumerate() {
                let rate = m.trace.as_ref().map_or(String::new(), |tr| {
                    let p = tr.proposed[i];
                    if p > 0 {
                        (tr.accepted[i] as f64 / p as f64).to_string()
                    } else {
                        String::new()
                    }
                });
                writeln!(s, "{},{pc},{rate}", i + 1).expect("string write");
                writeln!(t, "{},{}", i + 1, m.seconds.get(i).copied().unwrap_or(0.0)).expect("string write");
            }
            dir.write(&format!("{base}/summary.csv"), s.as_bytes())?;
            if cfg.record_timing {
                dir.write_volatile(&format!("{base}/timing.csv"), t.as_bytes())?;
            }
            if let Some(tr) = &m.trace {
                dir.write(&format!("{base}/trace.csv"), tr.to_csv().as_bytes())?;
            }
            if let (Some(means), true) = (&m.conditional_means, data.truth_vd().is_some()) {
                dir.write(&format!("{base}/conditional_means.csv"), means_to_csv(means, cfg.model_count()).as_bytes())?;
            }
        }
    }
    dir.finish(
        cfg,
        serde_json::json!({ "command": "run", "runs": report.runs.len(), "failed_runs": report.failed_runs() }),
    )
}

/// CSV `node,model,mean` of per-(node, model) conditional means; empty
/// cells mark orders a chain never evaluated.
pub fn means_to_csv(means: &[f64], model_count: usize) -> String {
    let mut out = String::from("node,model,mean\n");
    for (i, x) in means.iter().enumerate() {
        let cell = if x.is_nan() { String::new() } else { format!("{x:?}") };
        writeln!(out, "{},{},{cell}", i / model_count, i % model_count).expect("string write");
    }
    out
}

pub fn parse_means_csv(text: &str, node_count: usize, model_count: usize) -> Result<Vec<f64>> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
    if lines.next() != Some("node,model,mean") {
        return Err(Error::Parse("expected header node,model,mean".into()));
    }
    let mut out = vec![f64::NAN; node_count * model_count];
    for line in lines {
        let bad = || Error::Parse(format!("bad conditional-mean row {line:?}"));
        let mut it = line.split(',');
        let (v, m, x) = (it.next().ok_or_else(bad)?, it.next().ok_or_else(bad)?, it.next().ok_or_else(bad)?);
        let (v, m): (usize, usize) = (v.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?);
        if v >= node_count || m >= model_count {
            return Err(bad());
        }
        out[v * model_count + m] = if x.is_empty() { f64::NAN } else { x.parse().map_err(|_| bad())? };
    }
    Ok(out)
}

/// Grid of SMC settings for the estimator-variance probe at one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub node: usize,
    pub model: usize,
    pub particles: Vec<usize>,
    pub temperatures: Vec<usize>,
    pub replicates: usize,
    /// Settings other than `particles` and `temperatures`.
    #[serde(default)]
    pub smc: SmcConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeRow {
    pub particles: usize,
    pub temperatures: usize,
    pub replicates: usize,
    pub mean_log_z: f64,
    pub var_log_z: f64,
    /// Standard error of the variance under normality, `var sqrt(2 / (R - 1))`.
    pub se_var: f64,
}

/// Replicated evidence estimates at one node of the study data for every
/// `(N, T)` pair of the grid; reports the variance of `log Z-hat`.
pub fn probe_variance(cfg: &ExperimentConfig, spec: &ProbeSpec) -> Result<Vec<ProbeRow>> {
    if spec.replicates < 2 {
        return Err(invalid("the variance probe needs at least two replicates"));
    }
    if spec.particles.is_empty() || spec.temperatures.is_empty() {
        return Err(invalid("empty probe grid"));
    }
    let data = simulate(cfg)?;
    if spec.node >= data.truth.len() || spec.model >= cfg.model_count() {
        return Err(invalid("probe node or model out of range"));
    }
    match &data.observations {
        Observations::Toy { model, values } => probe_grid(cfg, spec, model, &values[spec.node]),
        Observations::Pet { model, curves, .. } => probe_grid(cfg, spec, model, &curves[spec.node]),
    }
}

fn probe_grid<F: NodeModel>(
    cfg: &ExperimentConfig,
    spec: &ProbeSpec,
    family: &F,
    y: &F::Data,
) -> Result<Vec<ProbeRow>> {
    let mut rows = Vec::new();
    for &n in &spec.particles {
        for &t in &spec.temperatures {
            let smc = SmcConfig { particles: n, temperatures: t, ..spec.smc.clone() };
            smc.validate()?;
            let draws: Vec<f64> = (0..spec.replicates)
                .into_par_iter()
                .map(|r| {
                    let key = [tag::PROBE, spec.node as u64, spec.model as u64, n as u64, t as u64, r as u64];
                    let mut rng = crate::rng::stream(cfg.seed, &key);
                    estimate_evidence(family, y, spec.model, &smc, &mut rng).map(|e| e.log_z)
                })
                .collect::<Result<_>>()?;
            let stats = MeanSd::of(&draws);
            let var = stats.sd * stats.sd;
            rows.push(ProbeRow {
                particles: n,
                temperatures: t,
                replicates: spec.replicates,
                mean_log_z: stats.mean,
                var_log_z: var,
                se_var: var * (2.0 / (spec.replicates - 1) as f64).sqrt(),
            });
        }
    }
    Ok(rows)
}

pub fn probe_to_csv(rows: &[ProbeRow]) -> String {
    let mut out = String::from("particles,temperatures,replicates,mean_log_z,var_log_z,se_var\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.particles, r.temperatures, r.replicates, r.mean_log_z, r.var_log_z, r.se_var
        )
        .expect("string write");
    }
    out
}

fn toy_two_state() -> ToyModelParams {
    ToyModelParams { mu0: vec![5.0, -5.0], sigma0: 5.0, sigma: 1.0 }
}

fn toy_regions() -> BTreeMap<u32, usize> {
    [(0, 0), (1, 1), (2, 1), (3, 1)].into_iter().collect()
}

fn pet_regions() -> BTreeMap<u32, usize> {
    // R0 two compartments, R1 three, R2 and R3 one
    [(0, 1), (1, 2), (2, 0), (3, 0)].into_iter().collect()
}

/// Amplitude of the synthetic bolus input used by the PET presets. At noise
/// level 0.5 it leaves two-compartment pixels correctly selected about 65% of
/// the time even with near-exact evidence.
pub const PET_BOLUS_AMPLITUDE: f64 = 0.4;
pub const PET_BOLUS_RATE: f64 = 1.0 / 60.0;

fn pet_spec() -> PetSpec {
    PetSpec {
        truth: vec![
            KineticsSpec { phi: vec![4.9e-3], theta: vec![5e-4] },
            KineticsSpec { phi: vec![4.9e-3, 1.8e-3], theta: vec![5e-4, 0.011] },
            KineticsSpec { phi: vec![4.4e-3, 1e-4, 1.4e-3], theta: vec![4.5e-4, 2.7e-3, 1e-2] },
        ],
        input: InputSpec::Bolus { amplitude: PET_BOLUS_AMPLITUDE, rate: PET_BOLUS_RATE },
        schedule: ScheduleSpec::Default,
        noise_level: 0.5,
        noise: NoiseKind::Normal,
        prior: PetPrior::default(),
    }
}

/// Built-in study designs.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    use SamplerKind::*;
    let toy_lattice = LatticeSpec { mask: MaskSource::Default20, upscale: 1, downsample: 1, regions: toy_regions() };
    let base = ExperimentConfig {
        name: name.to_string(),
        seed: 2024,
        replicates: 50,
        lattice: toy_lattice,
        family: FamilySpec::Toy(toy_two_state()),
        couplings: vec![0.4],
        samplers: Vec::new(),
        init: InitSpec::default(),
        failure_budget: default_failure_budget(),
        record_timing: true,
        write_traces: false,
    };
    let cfg = match name {
        "toy-study1" => ExperimentConfig {
            couplings: (0..=25).map(|i| (i as f64 * 0.2 * 10.0).round() / 10.0).collect(),
            samplers: vec![SamplerSpec::chain("nwpm", Nwpm, 100, 50, 80)],
            ..base
        },
        "toy-study1-large" => ExperimentConfig {
            lattice: LatticeSpec {
                mask: MaskSource::Default100,
                upscale: 1,
                downsample: 1,
                regions: [(0, 0), (1, 1), (2, 2), (3, 2)].into_iter().collect(),
            },
            family: FamilySpec::Toy(ToyModelParams { mu0: vec![7.0, 0.0, -7.0], sigma0: 5.0, sigma: 1.0 }),
            couplings: (0..=25).map(|i| (i as f64 * 0.2 * 10.0).round() / 10.0).collect(),
            samplers: vec![SamplerSpec::chain("nwpm", Nwpm, 100, 50, 80)],
            ..base
        },
        "toy-study2" => ExperimentConfig {
            replicates: 100,
            samplers: vec![
                SamplerSpec::indep("indep", 50, 80),
                SamplerSpec::chain("nwpm-n50", Nwpm, 50, 200, 80),
                SamplerSpec::chain("nwpm-n100", Nwpm, 100, 100, 80),
                SamplerSpec::chain("nwpm-n200", Nwpm, 200, 50, 80),
                SamplerSpec::chain("nwse", Nwse, 200, 200, 500),
                SamplerSpec::nwma("nwma", 200, 10, 200, 500),
            ],
            ..base
        },
        "toy-long-run" => ExperimentConfig {
            replicates: 5,
            samplers: vec![
                SamplerSpec::chain("nwse", Nwse, 10_000, 400, 500),
                SamplerSpec::nwma("nwma", 10_000, 100, 400, 500),
            ],
            ..base
        },
        "pet-sim" => ExperimentConfig {
            replicates: 30,
            lattice: LatticeSpec { mask: MaskSource::Default20, upscale: 1, downsample: 1, regions: pet_regions() },
            family: FamilySpec::Pet(pet_spec()),
            samplers: vec![
                SamplerSpec::indep("indep", 400, 600),
                SamplerSpec::chain("nwpm-n50", Nwpm, 50, 200, 400),
                SamplerSpec::chain("nwpm-n75", Nwpm, 75, 134, 400),
                SamplerSpec::chain("nwpm-n100", Nwpm, 100, 100, 400),
                SamplerSpec::chain("nwpm-n200", Nwpm, 200, 50, 400),
                SamplerSpec::chain("nwse", Nwse, 500, 400, 600),
                SamplerSpec::nwma("nwma", 500, 50, 200, 600),
            ],
            ..base
        },
        "pet-sim-desk" => ExperimentConfig {
            replicates: 10,
            lattice: LatticeSpec { mask: MaskSource::Default20, upscale: 1, downsample: 2, regions: pet_regions() },
            family: FamilySpec::Pet(pet_spec()),
            samplers: vec![
                // the full design's size ratios, scaled down
                SamplerSpec::indep("indep", 100, 200),
                SamplerSpec::chain("nwpm", Nwpm, 50, 50, 140),
                SamplerSpec::chain("nwse", Nwse, 200, 100, 200),
                SamplerSpec::nwma("nwma", 200, 50, 50, 200),
            ],
            ..base
        },
        other => return Err(invalid(format!("unknown preset {other:?}; known presets: {}", PRESET_NAMES.join(", ")))),
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_toy() -> ExperimentConfig {
        let mut cfg = preset("toy-study2").unwrap();
        cfg.name = "tiny".into();
        cfg.replicates = 3;
        cfg.lattice.mask = MaskSource::Default20;
        cfg.lattice.downsample = 4;
        cfg.couplings = vec![0.0, 0.6];
        cfg.samplers = vec![
            SamplerSpec::indep("indep", 20, 10),
            SamplerSpec::chain("nwpm", SamplerKind::Nwpm, 6, 20, 10),
            SamplerSpec::chain("nwse", SamplerKind::Nwse, 6, 20, 10),
            SamplerSpec::nwma("nwma", 6, 2, 20, 10),
        ];
        cfg
    }

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESET_NAMES {
            let cfg = preset(name).unwrap();
            assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg, "{name}");
        }
        assert!(preset("nope").unwrap_err().is_config());
    }

    #[test]
    fn rejects_bad_configs() {
        let good = tiny_toy();
        let mut c = good.clone();
        c.replicates = 0;
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.lattice.regions.insert(1, 5);
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.samplers.push(c.samplers[0].clone());
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.samplers[3].kappa = None;
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.couplings.clear();
        assert!(c.validate().is_err());
        let text = good.to_json().replacen("\"replicates\"", "\"replicats\"", 1);
        assert!(ExperimentConfig::from_json(&text).unwrap_err().is_config());
    }

    #[test]
    fn study_is_independent_of_thread_count() {
        let cfg = tiny_toy();
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let dir = tempfile::tempdir().unwrap();
            let report = pool.install(|| run_study(&cfg, Some(dir.path()))).unwrap();
            let manifest: serde_json::Value =
                serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
            (report, manifest["files"].clone())
        };
        let (a, files_a) = run(1);
        let (b, files_b) = run(3);
        assert_eq!(files_a, files_b);
        assert_eq!(a.summary.len(), 1 + 3 * 2);
        assert_eq!(a.runs.len(), 3 * 7);
        assert_eq!(a.failed_runs(), 0);
        for (x, y) in a.runs.iter().zip(&b.runs) {
            let (mx, my) = (x.outcome.as_ref().unwrap(), y.outcome.as_ref().unwrap());
            assert_eq!(mx.selection, my.selection);
            assert_eq!(mx.by_iteration, my.by_iteration);
        }
        for f in [
            "config.json",
            "truth.txt",
            "data.csv",
            "percent_correct.csv",
            "study_summary.csv",
            "percent_by_iteration.csv",
        ] {
            assert!(files_a.get(f).is_some(), "{f}");
        }
        assert!(files_a.get("timing.csv").is_none());
        let means = vec![1.0, f64::NAN, 2.5, 3.0];
        let back = parse_means_csv(&means_to_csv(&means, 2), 2, 2).unwrap();
        assert_eq!(back[0], 1.0);
        assert!(back[1].is_nan());
        assert_eq!(&back[2..], &[2.5, 3.0]);
    }

    #[test]
    fn samplers_share_initial_estimates() {
        // at zero coupling a long single-estimation chain visits each order in
        // proportion to the shared estimate, so its modal answer is the argmax
        let mut cfg = tiny_toy();
        cfg.couplings = vec![0.0];
        cfg.samplers =
            vec![SamplerSpec::indep("indep", 20, 10), SamplerSpec::chain("nwse", SamplerKind::Nwse, 3000, 20, 10)];
        let report = run_study(&cfg, None).unwrap();
        for r in 0..cfg.replicates {
            let get = |label: &str| {
                report
                    .runs
                    .iter()
                    .find(|x| x.replicate == r && x.sampler == label)
                    .unwrap()
                    .outcome
                    .as_ref()
                    .unwrap()
                    .selection
                    .clone()
            };
            let (a, b) = (get("indep"), get("nwse"));
            let agree = a.states().iter().zip(b.states()).filter(|(x, y)| x == y).count();
            assert!(agree >= a.len() - 1, "replicate {r}: {agree} of {}", a.len());
        }
    }

    #[test]
    fn pet_desk_study_writes_vd_scores() {
        let mut cfg = preset("pet-sim-desk").unwrap();
        cfg.replicates = 1;
        cfg.lattice.downsample = 5;
        cfg.samplers =
            vec![SamplerSpec::indep("indep", 20, 10), SamplerSpec::chain("nwse", SamplerKind::Nwse, 3, 20, 10)];
        let report = run_study(&cfg, None).unwrap();
        for row in &report.summary {
            assert_eq!(row.vd_rmse_averaged.n, 1, "{}", row.sampler);
            assert!(row.vd_rmse_modal.mean.is_finite());
        }
    }

    #[test]
    fn probe_reports_every_grid_point() {
        let cfg = tiny_toy();
        let spec = ProbeSpec {
            node: 0,
            model: 1,
            particles: vec![10, 20],
            temperatures: vec![5, 10, 20],
            replicates: 8,
            smc: SmcConfig::default(),
        };
        let rows = probe_variance(&cfg, &spec).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.var_log_z >= 0.0 && r.mean_log_z.is_finite()));
        assert_eq!(probe_to_csv(&rows).lines().count(), 7);
        assert_eq!(rows, probe_variance(&cfg, &spec).unwrap());
    }
}
