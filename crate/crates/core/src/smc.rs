//! Annealed SMC sampler for the marginal likelihood of one node under one model.
//!
//! Particles move from the prior to the posterior through
//! `pi_t ∝ prior * likelihood^alpha_t`. The evidence estimate is the product
//! over temperatures of the weighted mean incremental weight, accumulated in
//! log space.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::NodeModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AnnealingSchedule {
    /// `alpha_t = (t / T)^exponent`.
    Power { exponent: f64 },
    /// Explicit exponents `alpha_0..=alpha_T`.
    Explicit { alphas: Vec<f64> },
}

impl Default for AnnealingSchedule {
    fn default() -> Self {
        Self::Power { exponent: 5.0 }
    }
}

impl AnnealingSchedule {
    pub fn alphas(&self, temperatures: usize) -> Result<Vec<f64>> {
        let alphas = match self {
            Self::Power { exponent } => {
                if !(*exponent > 0.0) {
                    return Err(invalid("annealing exponent must be positive"));
                }
                (0..=temperatures).map(|t| (t as f64 / temperatures as f64).powf(*exponent)).collect()
            }
            Self::Explicit { alphas } => {
                if alphas.len() != temperatures + 1 {
                    return Err(invalid(format!(
                        "explicit schedule has {} exponents, expected {}",
                        alphas.len(),
                        temperatures + 1
                    )));
                }
                alphas.clone()
            }
        };
        if alphas[0] != 0.0 || alphas[temperatures] != 1.0 || alphas.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(invalid("annealing exponents must rise from 0 to 1"));
        }
        Ok(alphas)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ResampleMode {
    /// Resample after every reweighting.
    Always,
    /// Resample when the ESS drops below `threshold * N`.
    Ess { threshold: f64 },
}

impl Default for ResampleMode {
    fn default() -> Self {
        Self::Ess { threshold: 0.5 }
    }
}

/// Shape of the Gaussian random-walk proposal, scaled from the current
/// weighted particle population.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RandomWalk {
    /// Independent coordinates with the weighted standard deviations.
    Diagonal,
    /// Full weighted covariance.
    #[default]
    Covariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmcConfig {
    pub particles: usize,
    pub temperatures: usize,
    pub schedule: AnnealingSchedule,
    pub resample: ResampleMode,
    /// Random-walk MH moves per temperature.
    pub move_count: usize,
    /// Multiplier on the `2.38 / sqrt(d)` random-walk scale.
    pub step_scale: f64,
    pub proposal: RandomWalk,
    /// Keep the final weighted particles in the estimate.
    pub keep_particles: bool,
}

impl Default for SmcConfig {
    fn default() -> Self {
        Self {
            particles: 50,
            temperatures: 80,
            schedule: AnnealingSchedule::default(),
            resample: ResampleMode::default(),
            move_count: 1,
            step_scale: 1.0,
            proposal: RandomWalk::default(),
            keep_particles: false,
        }
    }
}

impl SmcConfig {
    pub fn new(particles: usize, temperatures: usize) -> Self {
        Self { particles, temperatures, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.particles < 2 {
            return Err(invalid("SMC needs at least two particles"));
        }
        if self.temperatures < 1 {
            return Err(invalid("SMC needs at least one temperature"));
        }
        if let ResampleMode::Ess { threshold } = self.resample {
            if !(threshold > 0.0 && threshold <= 1.0) {
                return Err(invalid("resample threshold must lie in (0, 1]"));
            }
        }
        if !(self.step_scale > 0.0) {
            return Err(invalid("step scale must be positive"));
        }
        self.schedule.alphas(self.temperatures).map(|_| ())
    }
}

/// Final-temperature particles in unconstrained coordinates with
/// normalized log weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub dimension: usize,
    pub params: Vec<f64>,
    pub log_weights: Vec<f64>,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.params[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceEstimate {
    pub log_z: f64,
    pub model: usize,
    pub n_particles: usize,
    pub n_temperatures: usize,
    /// Weighted mean of the model's derived quantity at the final temperature.
    pub derived_mean: f64,
    pub accept_rate: f64,
    pub resample_count: usize,
    pub particles: Option<ParticleSet>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorSummary {
    pub mean: f64,
    pub variance: f64,
    /// Set when the particle ESS is below 2.
    pub degenerate: bool,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// ESS `1 / sum W_i^2` of non-negative weights after normalization.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64> {
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(invalid("weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(invalid("weights are all zero"));
    }
    Ok(1.0 / weights.iter().map(|w| (w / total).powi(2)).sum::<f64>())
}

fn ess_from_log(log_weights: &[f64]) -> f64 {
    1.0 / log_weights.iter().map(|w| (2.0 * w).exp()).sum::<f64>()
}

/// Systematic resampling: ancestor indices for normalized log weights.
pub fn systematic_resample<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> Vec<usize> {
    let n = log_weights.len();
    let step = 1.0 / n as f64;
    let mut u = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(n);
    let mut cumulative = 0.0;
    let mut i = 0;
    for (j, w) in log_weights.iter().enumerate() {
        cumulative += w.exp();
        while i < n && u < cumulative {
            out.push(j);
            u += step;
            i += 1;
        }
    }
    // rounding can leave the last few slots unfilled
    let last = log_weights.iter().rposition(|w| *w > f64::NEG_INFINITY).unwrap_or(n - 1);
    out.resize(n, last);
    out
}

/// Runs the annealed sampler for model `m` at one node.
pub fn estimate_evidence<F: NodeModel, R: Rng + ?Sized>(
    family: &F,
    y: &F::Data,
    m: usize,
    cfg: &SmcConfig,
    rng: &mut R,
) -> Result<EvidenceEstimate> {
    cfg.validate()?;
    if m >= family.model_count() {
        return Err(invalid(format!("model {m} outside 0..{}", family.model_count())));
    }
    let alphas = cfg.schedule.alphas(cfg.temperatures)?;
    let n = cfg.particles;
    let d = family.dimension(m);

    let mut params = Vec::with_capacity(n * d);
    let mut log_prior = Vec::with_capacity(n);
    let mut lik = Vec::with_capacity(n);
    for _ in 0..n {
        let z = family.sample_prior(m, rng);
        log_prior.push(family.log_prior(&z, m));
        lik.push(family.tempered(y, &z, m));
        params.extend_from_slice(&z);
    }
    let mut log_w = vec![-(n as f64).ln(); n];
    let mut log_z = 0.0;
    let mut accepted = 0usize;
    let mut proposed = 0usize;
    let mut resample_count = 0;

    let mut next_params = vec![0.0; n * d];
    let mut scratch = vec![0.0; n];
    let mut next_lik = lik.clone();
    let mut proposal = vec![0.0; d];
    let mut scale = vec![0.0; d];
    let mut factor = vec![0.0; d * d];
    let mut noise = vec![0.0; d];

    for t in 1..=cfg.temperatures {
        let (previous, alpha) = (alphas[t - 1], alphas[t]);
        if alpha > previous {
            for i in 0..n {
                scratch[i] = if log_w[i] == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    log_w[i] + lik[i].at(alpha) - lik[i].at(previous)
                };
            }
            let lse = log_sum_exp(scratch.iter().copied());
            if lse == f64::NEG_INFINITY || lse.is_nan() {
                return Err(Error::EstimationFailure { temperature: t });
            }
            log_z += lse;
            for i in 0..n {
                log_w[i] = scratch[i] - lse;
            }
        }

        let resample = match cfg.resample {
            ResampleMode::Always => true,
            ResampleMode::Ess { threshold } => ess_from_log(&log_w) < threshold * n as f64,
        };
        if resample {
            let ancestors = systematic_resample(&log_w, rng);
            for (i, &a) in ancestors.iter().enumerate() {
                next_params[i * d..(i + 1) * d].copy_from_slice(&params[a * d..(a + 1) * d]);
                next_lik[i] = lik[a];
            }
            std::mem::swap(&mut params, &mut next_params);
            std::mem::swap(&mut lik, &mut next_lik);
            for (i, &a) in ancestors.iter().enumerate() {
                scratch[i] = log_prior[a];
            }
            log_prior.copy_from_slice(&scratch);
            log_w.fill(-(n as f64).ln());
            resample_count += 1;
        }

        for _ in 0..cfg.move_count {
            match cfg.proposal {
                RandomWalk::Diagonal => proposal_scale(&params, &log_w, d, cfg.step_scale, &mut scale),
                RandomWalk::Covariance => proposal_factor(&params, &log_w, d, cfg.step_scale, &mut factor),
            }
            for i in 0..n {
                if log_w[i] == f64::NEG_INFINITY {
                    continue;
                }
                let current = &params[i * d..(i + 1) * d];
                for e in noise.iter_mut() {
                    *e = rng.sample(StandardNormal);
                }
                match cfg.proposal {
                    RandomWalk::Diagonal => {
                        for k in 0..d {
                            proposal[k] = current[k] + scale[k] * noise[k];
                        }
                    }
                    RandomWalk::Covariance => {
                        for k in 0..d {
                            let row = &factor[k * d..k * d + k + 1];
                            proposal[k] = current[k] + row.iter().zip(&noise).map(|(l, e)| l * e).sum::<f64>();
                        }
                    }
                }
                let lp = family.log_prior(&proposal, m);
                let u: f64 = rng.random();
                proposed += 1;
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let ll = family.tempered(y, &proposal, m);
                let cur = log_prior[i] + lik[i].at(alpha);
                let new = lp + ll.at(alpha);
                if u.ln() < new - cur {
                    params[i * d..(i + 1) * d].copy_from_slice(&proposal);
                    log_prior[i] = lp;
                    lik[i] = ll;
                    accepted += 1;
                }
            }
        }
    }

    let derived_mean = (0..n)
        .filter(|&i| log_w[i] > f64::NEG_INFINITY)
        .map(|i| log_w[i].exp() * family.derived_quantity(&params[i * d..(i + 1) * d], m))
        .sum();
    Ok(EvidenceEstimate {
        log_z,
        model: m,
        n_particles: n,
        n_temperatures: cfg.temperatures,
        derived_mean,
        accept_rate: if proposed > 0 { accepted as f64 / proposed as f64 } else { 0.0 },
        resample_count,
        particles: cfg.keep_particles.then_some(ParticleSet { dimension: d, params, log_weights: log_w }),
    })
}

/// Per-coordinate random-walk scale from the weighted particle spread.
fn proposal_scale(params: &[f64], log_w: &[f64], d: usize, step_scale: f64, out: &mut [f64]) {
    let base = step_scale * 2.38 / (d as f64).sqrt();
    for k in 0..d {
        let mut mean = 0.0;
        let mut second = 0.0;
        for (i, lw) in log_w.iter().enumerate() {
            let w = lw.exp();
            if w > 0.0 {
                let x = params[i * d + k];
                mean += w * x;
                second += w * x * x;
            }
        }
        let var = (second - mean * mean).max(0.0);
        let sd = var.sqrt();
        let floor = 1e-8 * (1.0 + mean.abs());
        out[k] = base * if sd.is_finite() && sd > floor { sd } else { floor };
    }
}

/// Lower Cholesky factor of the scaled weighted particle covariance, with a
/// small ridge; falls back to the diagonal scale if the matrix is not
/// positive definite.
fn proposal_factor(params: &[f64], log_w: &[f64], d: usize, step_scale: f64, out: &mut [f64]) {
    let mut mean = vec![0.0; d];
    let weights: Vec<f64> = log_w.iter().map(|w| w.exp()).collect();
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            for k in 0..d {
                mean[k] += w * params[i * d + k];
            }
        }
    }
    let mut cov = vec![0.0; d * d];
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            let x = &params[i * d..(i + 1) * d];
            for a in 0..d {
                for b in 0..=a {
                    cov[a * d + b] += w * (x[a] - mean[a]) * (x[b] - mean[b]);
                }
            }
        }
    }
    let c = step_scale * step_scale * 2.38 * 2.38 / d as f64;
    for a in 0..d {
        let floor = 1e-8 * (1.0 + mean[a].abs());
        cov[a * d + a] = cov[a * d + a].max(0.0) * (1.0 + 1e-6) + floor * floor;
        for b in 0..=a {
            cov[a * d + b] *= c;
        }
    }
    out.fill(0.0);
    for a in 0..d {
        for b in 0..=a {
            let s: f64 = (0..b).map(|k| out[a * d + k] * out[b * d + k]).sum();
            if a == b {
                let v = cov[a * d + a] - s;
                if !(v > 0.0) || !v.is_finite() {
                    let mut scale = vec![0.0; d];
                    proposal_scale(params, log_w, d, step_scale, &mut scale);
                    out.fill(0.0);
                    for k in 0..d {
                        out[k * d + k] = scale[k];
                    }
                    return;
                }
                out[a * d + a] = v.sqrt();
            } else {
                out[a * d + b] = (cov[a * d + b] - s) / out[b * d + b];
            }
        }
    }
}

/// Self-normalized weighted mean and variance of `f` over retained particles.
pub fn posterior_summary(est: &EvidenceEstimate, f: impl Fn(&[f64]) -> f64) -> Result<PosteriorSummary> {
    let set = est.particles.as_ref().ok_or_else(|| invalid("estimate did not retain its particles"))?;
    let mut mean = 0.0;
    let mut second = 0.0;
    for i in 0..set.len() {
        let w = set.log_weights[i].exp();
        if w > 0.0 {
            let v = f(set.particle(i));
            mean += w * v;
            second += w * v * v;
        }
    }
    Ok(PosteriorSummary {
        mean,
        variance: (second - mean * mean).max(0.0),
        degenerate: ess_from_log(&set.log_weights) < 2.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{toy_exact_log_marginal, ToyModel, ToyModelParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> ToyModel {
        ToyModel::new(ToyModelParams { mu0: vec![5.0, -5.0], sigma0: 5.0, sigma: 1.0 }).unwrap()
    }

    struct Flat;
    impl NodeModel for Flat {
        type Data = ();
        fn model_count(&self) -> usize {
            1
        }
        fn dimension(&self, _m: usize) -> usize {
            2
        }
        fn log_likelihood(&self, _y: &(), _p: &[f64], _m: usize) -> f64 {
            0.0
        }
        fn sample_prior<R: Rng + ?Sized>(&self, _m: usize, rng: &mut R) -> Vec<f64> {
            vec![rng.sample(StandardNormal), rng.sample(StandardNormal)]
        }
        fn log_prior(&self, p: &[f64], _m: usize) -> f64 {
            -0.5 * (p[0] * p[0] + p[1] * p[1])
        }
        fn derived_quantity(&self, p: &[f64], _m: usize) -> f64 {
            p[0]
        }
    }

    #[test]
    fn ess_examples() {
        assert!((effective_sample_size(&[1.0; 7]).unwrap() - 7.0).abs() < 1e-12);
        assert!((effective_sample_size(&[0.0, 3.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((effective_sample_size(&[0.5, 0.25, 0.25]).unwrap() - 8.0 / 3.0).abs() < 1e-12);
        assert!(effective_sample_size(&[0.0, 0.0]).is_err());
        assert!(effective_sample_size(&[-1.0, 2.0]).is_err());
    }

    #[test]
    fn systematic_resampling_counts() {
        let w = [0.5f64, 0.25, 0.125, 0.125];
        let lw: Vec<f64> = w.iter().map(|x| x.ln()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let a = systematic_resample(&lw, &mut rng);
            assert_eq!(a.len(), 4);
            let count = |j| a.iter().filter(|&&x| x == j).count();
            assert_eq!(count(0), 2);
            assert_eq!(count(1), 1);
            assert!(a.windows(2).all(|p| p[0] <= p[1]));
        }
    }

    #[test]
    fn constant_likelihood_gives_unit_evidence() {
        for (n, t) in [(2, 1), (17, 5), (50, 80)] {
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            let est = estimate_evidence(&Flat, &(), 0, &SmcConfig::new(n, t), &mut rng).unwrap();
            assert_eq!(est.log_z, 0.0);
        }
    }

    #[test]
    fn single_step_is_importance_sampling() {
        let model = toy();
        let cfg = SmcConfig { move_count: 0, ..SmcConfig::new(64, 1) };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let est = estimate_evidence(&model, &5.0, 0, &cfg, &mut rng).unwrap();
        // replay the prior draws from the same stream
        let mut replay = ChaCha8Rng::seed_from_u64(12);
        let mean: f64 = (0..64)
            .map(|_| {
                let z = model.sample_prior(0, &mut replay);
                model.log_likelihood(&5.0, &z, 0).exp()
            })
            .sum::<f64>()
            / 64.0;
        assert!((est.log_z - mean.ln()).abs() < 1e-12);
    }

    #[test]
    fn deterministic_given_seed() {
        let model = toy();
        let cfg = SmcConfig::new(30, 20);
        let a = estimate_evidence(&model, &2.0, 1, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = estimate_evidence(&model, &2.0, 1, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.log_z.to_bits(), b.log_z.to_bits());
        let c = estimate_evidence(&model, &2.0, 1, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_ne!(a.log_z, c.log_z);
    }

    #[test]
    fn unbiased_on_toy_model() {
        let model = toy();
        let cfg = SmcConfig { resample: ResampleMode::Always, ..SmcConfig::new(50, 80) };
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let zs: Vec<f64> =
            (0..500).map(|_| estimate_evidence(&model, &5.0, 0, &cfg, &mut rng).unwrap().log_z.exp()).collect();
        let mean = zs.iter().sum::<f64>() / zs.len() as f64;
        let sd = (zs.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (zs.len() - 1) as f64).sqrt();
        let exact = toy_exact_log_marginal(5.0, 0, &model.params).exp();
        assert!((mean - exact).abs() < 4.0 * sd / (zs.len() as f64).sqrt(), "{mean} vs {exact}");
    }

    #[test]
    fn log_evidence_variance_shrinks_with_particles() {
        let model = toy();
        let var_for = |n| {
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            let xs: Vec<f64> = (0..200)
                .map(|_| estimate_evidence(&model, &-3.0, 0, &SmcConfig::new(n, 10), &mut rng).unwrap().log_z)
                .collect();
            let m = xs.iter().sum::<f64>() / 200.0;
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 199.0
        };
        let (a, b, c) = (var_for(10), var_for(20), var_for(40));
        assert!(a > b && b > c, "{a} {b} {c}");
    }

    #[test]
    fn posterior_mean_matches_conjugate_formula() {
        let model = toy();
        let cfg = SmcConfig { keep_particles: true, move_count: 3, ..SmcConfig::new(2000, 30) };
        let est = estimate_evidence(&model, &1.0, 0, &cfg, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let s = posterior_summary(&est, |p| p[0]).unwrap();
        // (sigma0^2 y + sigma^2 mu0) / (sigma0^2 + sigma^2), posterior var 25/26
        let want = (25.0 * 1.0 + 5.0) / 26.0;
        assert!((s.mean - want).abs() < 0.1, "{} vs {want}", s.mean);
        assert!((s.variance - 25.0 / 26.0).abs() < 0.15);
        assert!((est.derived_mean - s.mean).abs() < 1e-9);
        assert!(!s.degenerate);
        let c = posterior_summary(&est, |_| 3.5).unwrap();
        assert!((c.mean - 3.5).abs() < 1e-9 && c.variance < 1e-9);
        let sum: f64 = est.particles.as_ref().unwrap().weights().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn impossible_data_reports_temperature() {
        struct Never;
        impl NodeModel for Never {
            type Data = ();
            fn model_count(&self) -> usize {
                1
            }
            fn dimension(&self, _m: usize) -> usize {
                1
            }
            fn log_likelihood(&self, _y: &(), _p: &[f64], _m: usize) -> f64 {
                f64::NEG_INFINITY
            }
            fn sample_prior<R: Rng + ?Sized>(&self, _m: usize, rng: &mut R) -> Vec<f64> {
                vec![rng.random()]
            }
            fn log_prior(&self, _p: &[f64], _m: usize) -> f64 {
                0.0
            }
            fn derived_quantity(&self, p: &[f64], _m: usize) -> f64 {
                p[0]
            }
        }
        let err =
            estimate_evidence(&Never, &(), 0, &SmcConfig::new(5, 4), &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
        assert!(matches!(err, Error::EstimationFailure { temperature: 1 }));
    }

    #[test]
    fn config_validation() {
        assert!(SmcConfig::new(1, 5).validate().is_err());
        assert!(SmcConfig::new(5, 0).validate().is_err());
        let bad = SmcConfig {
            schedule: AnnealingSchedule::Explicit { alphas: vec![0.0, 0.7, 0.5, 1.0] },
            ..SmcConfig::new(5, 3)
        };
        assert!(bad.validate().is_err());
        let ok = SmcConfig {
            schedule: AnnealingSchedule::Explicit { alphas: vec![0.0, 0.5, 0.5, 1.0] },
            ..SmcConfig::new(5, 3)
        };
        assert!(ok.validate().is_ok());
        let a = AnnealingSchedule::default().alphas(4).unwrap();
        assert!((a[2] - 0.5f64.powi(5)).abs() < 1e-15);
    }
}
