//! `nwpm`: simulate data, run replicated model-selection studies and score
//! stored results.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nwpm_core::experiment::{
    self, parse_means_csv, probe_to_csv, probe_variance, ExperimentConfig, ProbeSpec, StudyReport, PRESET_NAMES,
};
use nwpm_core::metrics::{self, modal_select, parse_map_csv, percent_correct, rmse, selection_bound, vd_maps, VdMode};
use nwpm_core::samplers::ChainTrace;
use nwpm_core::smc::SmcConfig;
use nwpm_core::{Error, ModelField};

#[derive(Parser)]
#[command(name = "nwpm", version, about = "Spatial Bayesian model selection with node-wise pseudo-marginal samplers")]
struct Cli {
    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the truth field and data of a study.
    Simulate {
        #[command(flatten)]
        study: StudyArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every replicate of a study and write aggregated results.
    Run {
        #[command(flatten)]
        study: StudyArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Modal order selection from a stored chain trace.
    Select {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        models: usize,
        /// Conditional means per (node, model); adds V_D maps to the output.
        #[arg(long)]
        means: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a selected field or a V_D map against the truth.
    Metrics {
        /// Selected field as written by `select` or `run`.
        #[arg(long, requires_all = ["truth", "models"])]
        selected: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        models: Option<usize>,
        /// `node,value` map.
        #[arg(long, requires = "truth_vd")]
        vd: Option<PathBuf>,
        #[arg(long)]
        truth_vd: Option<PathBuf>,
    },
    /// Variance of the log-evidence estimator over a grid of SMC sizes.
    ProbeVariance {
        #[command(flatten)]
        study: StudyArgs,
        #[arg(long, default_value_t = 0)]
        node: usize,
        #[arg(long, default_value_t = 0)]
        model: usize,
        #[arg(long, value_delimiter = ',', default_value = "50,200")]
        particles: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "80")]
        temperatures: Vec<usize>,
        #[arg(long = "probe-replicates", default_value_t = 100)]
        probe_replicates: usize,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Lower bound on the probability of selecting the best order.
    Bound {
        #[arg(long)]
        models: usize,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        sigma: f64,
    },
    /// Print a built-in study configuration as JSON.
    Preset {
        /// Omit to list the available presets.
        name: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct StudyArgs {
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    couplings: Option<Vec<f64>>,
    /// Write per-run traces, selections and conditional means.
    #[arg(long)]
    traces: bool,
    /// Skip wall-clock timing files.
    #[arg(long)]
    no_timing: bool,
}

impl StudyArgs {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path).map_err(CliError::from)?,
            (None, Some(name)) => experiment::preset(name)?,
            (None, None) => return Err(CliError::Config("pass --config or --preset".into())),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(r) = self.replicates {
            cfg.replicates = r;
        }
        if let Some(c) = &self.couplings {
            cfg.couplings = c.clone();
        }
        cfg.write_traces |= self.traces;
        cfg.record_timing &= !self.no_timing;
        cfg.validate()?;
        Ok(cfg)
    }
}

enum CliError {
    Config(String),
    Compute(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Compute(e.to_string())
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Compute(m) => write!(f, "computation failed: {m}"),
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::Compute(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Compute(format!("cannot write {}: {e}", path.display())))
}

fn print_report(report: &StudyReport) {
    println!(
        "{:<12} {:>7} {:>9} {:>8} {:>6} {:>10} {:>10}",
        "sampler", "J", "percent", "sd", "ok", "vd_avg", "vd_modal"
    );
    for row in &report.summary {
        let opt = |m: experiment::MeanSd| if m.n == 0 { "-".to_string() } else { format!("{:.4}", m.mean) };
        println!(
            "{:<12} {:>7} {:>9.2} {:>8.2} {:>6} {:>10} {:>10}",
            row.sampler,
            row.coupling.map_or("-".into(), |j| j.to_string()),
            row.percent.mean,
            row.percent.sd,
            row.percent.n,
            opt(row.vd_rmse_averaged),
            opt(row.vd_rmse_modal),
        );
    }
    if report.failed_runs() > 0 {
        eprintln!("{} of {} runs failed; see percent_correct.csv", report.failed_runs(), report.runs.len());
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { study, out } => {
            let cfg = study.load()?;
            let data = experiment::write_simulation(&cfg, &out)?;
            println!("{} nodes simulated into {}", data.truth.len(), out.display());
        }
        Command::Run { study, out } => {
            let cfg = study.load()?;
            let report = experiment::run_study(&cfg, Some(&out))?;
            print_report(&report);
            println!("results in {}", out.display());
        }
        Command::Select { trace, width, height, models, means, out } => {
            let trace = ChainTrace::parse_csv(&read(&trace)?, width, height, models)?;
            let selection = modal_select(&trace)?;
            fs::create_dir_all(&out).map_err(|e| CliError::Compute(e.to_string()))?;
            write(&out.join("selected.txt"), selection.selected.to_text())?;
            write(&out.join("selected.pgm"), metrics::field_to_pgm(&selection.selected))?;
            write(&out.join("frequencies.csv"), experiment::means_to_csv(&selection.frequencies, models))?;
            if let Some(path) = means {
                let means = parse_means_csv(&read(&path)?, width * height, models)?;
                for (mode, name) in
                    [(VdMode::ModelAveraged, "vd_averaged.csv"), (VdMode::PosteriorModal, "vd_modal.csv")]
                {
                    write(&out.join(name), metrics::map_to_csv(&vd_maps(&selection, &means, mode)?))?;
                }
            }
            println!("selected {} nodes from {} iterations into {}", width * height, trace.len(), out.display());
        }
        Command::Metrics { selected, truth, models, vd, truth_vd } => {
            if selected.is_none() && vd.is_none() {
                return Err(CliError::Config("pass --selected or --vd".into()));
            }
            if let (Some(sel), Some(truth), Some(models)) = (selected, truth, models) {
                let sel = ModelField::parse_text(&read(&sel)?, models)?;
                let truth = ModelField::parse_text(&read(&truth)?, models)?;
                println!("percent_correct,{}", percent_correct(&sel, &truth)?);
            }
            if let (Some(vd), Some(truth_vd)) = (vd, truth_vd) {
                let map = parse_map_csv(&read(&vd)?)?;
                let truth = parse_map_csv(&read(&truth_vd)?)?;
                println!("vd_rmse,{}", rmse(&map, &truth)?);
            }
        }
        Command::ProbeVariance { study, node, model, particles, temperatures, probe_replicates, out } => {
            let cfg = study.load()?;
            let smc = cfg.samplers.iter().map(|s| s.smc.clone()).next().unwrap_or_else(SmcConfig::default);
            let spec = ProbeSpec { node, model, particles, temperatures, replicates: probe_replicates, smc };
            let csv = probe_to_csv(&probe_variance(&cfg, &spec)?);
            match out {
                Some(path) => write(&path, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Bound { models, delta, sigma } => {
            println!("{:.4}", selection_bound(delta, sigma, models)?);
        }
        Command::Preset { name: None, .. } => {
            for name in PRESET_NAMES {
                println!("{name}");
            }
        }
        Command::Preset { name: Some(name), out } => {
            let json = experiment::preset(&name)?.to_json() + "\n";
            match out {
                Some(path) => write(&path, json)?,
                None => print!("{json}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("configuration error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("computation failed: cannot start worker pool: {e}");
            return ExitCode::from(3);
        }
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(match e {
                CliError::Config(_) => 2,
                CliError::Compute(_) => 3,
            })
        }
    }
}
