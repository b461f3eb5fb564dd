//! Conjugate Gaussian toy model: `mu ~ N(mu0[M], sigma0^2)`, `y | mu ~ N(mu, sigma^2)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::NodeModel;
use crate::potts::ModelField;
use crate::rng::{stream, tag};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelParams {
    /// Prior mean of the latent level for each model order.
    pub mu0: Vec<f64>,
    /// Prior standard deviation of the latent level.
    pub sigma0: f64,
    /// Observation standard deviation.
    pub sigma: f64,
}

impl ToyModelParams {
    pub fn validate(&self) -> Result<()> {
        if self.mu0.len() < 2 {
            return Err(invalid("toy model needs at least two model orders"));
        }
        if !(self.sigma0 > 0.0) || !(self.sigma > 0.0) {
            return Err(invalid(format!(
                "toy standard deviations must be positive, got sigma0={} sigma={}",
                self.sigma0, self.sigma
            )));
        }
        Ok(())
    }
}

#[inline]
fn normal_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * LN_2PI - sd.ln() - 0.5 * z * z
}

pub fn toy_log_likelihood(y: f64, mu: f64, params: &ToyModelParams) -> f64 {
    normal_logpdf(y, mu, params.sigma)
}

pub fn toy_log_prior(mu: f64, m: usize, params: &ToyModelParams) -> f64 {
    normal_logpdf(mu, params.mu0[m], params.sigma0)
}

pub fn toy_sample_prior<R: Rng + ?Sized>(m: usize, params: &ToyModelParams, rng: &mut R) -> f64 {
    Normal::new(params.mu0[m], params.sigma0).expect("validated sd").sample(rng)
}

/// `log N(y; mu0[M], sigma^2 + sigma0^2)`.
pub fn toy_exact_log_marginal(y: f64, m: usize, params: &ToyModelParams) -> f64 {
    normal_logpdf(y, params.mu0[m], params.sigma.hypot(params.sigma0))
}

/// Simulates one observation per node. Node `v` draws only from its own
/// stream keyed by `(seed, v)`, so a node's value depends on nothing but its
/// own model order.
pub fn toy_simulate(field: &ModelField, params: &ToyModelParams, seed: u64) -> Result<Vec<f64>> {
    params.validate()?;
    if field.model_count() > params.mu0.len() {
        return Err(invalid("field has more model orders than the toy prior means"));
    }
    Ok(field
        .states()
        .iter()
        .enumerate()
        .map(|(v, &m)| {
            let mut rng = stream(seed, &[tag::DATA, v as u64]);
            let mu = params.mu0[m] + params.sigma0 * standard_normal(&mut rng);
            mu + params.sigma * standard_normal(&mut rng)
        })
        .collect())
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

/// The toy family as a [`NodeModel`]; the single parameter is the latent level itself.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub params: ToyModelParams,
}

impl ToyModel {
    pub fn new(params: ToyModelParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }
}

impl NodeModel for ToyModel {
    type Data = f64;

    fn model_count(&self) -> usize {
        self.params.mu0.len()
    }

    fn dimension(&self, _m: usize) -> usize {
        1
    }

    fn log_likelihood(&self, y: &f64, params: &[f64], _m: usize) -> f64 {
        toy_log_likelihood(*y, params[0], &self.params)
    }

    fn sample_prior<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Vec<f64> {
        vec![toy_sample_prior(m, &self.params, rng)]
    }

    fn log_prior(&self, params: &[f64], m: usize) -> f64 {
        toy_log_prior(params[0], m, &self.params)
    }

    fn exact_log_marginal(&self, y: &f64, m: usize) -> Option<f64> {
        Some(toy_exact_log_marginal(*y, m, &self.params))
    }

    fn derived_quantity(&self, params: &[f64], _m: usize) -> f64 {
        params[0]
    }

    fn model_label(&self, m: usize) -> String {
        // A, B, C, ...
        char::from_u32('A' as u32 + m as u32).map(String::from).unwrap_or_else(|| m.to_string())
    }
}
