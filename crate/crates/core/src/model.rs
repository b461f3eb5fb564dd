//! The per-node statistical model family.
//!
//! Parameters are handled in an unconstrained coordinate system chosen by
//! each family (for example logs of rate constants). Prior densities are
//! expressed in those coordinates, Jacobian included, so the evidence
//! sampler can run plain Gaussian random-walk moves on them.

use rand::Rng;
use statrs::function::gamma::ln_gamma;

pub trait NodeModel: Sync {
    /// Observation at a single node.
    type Data: Sync + Send + Clone;

    /// Size of the model-order set.
    fn model_count(&self) -> usize;

    /// Dimension of the unconstrained parameter vector for model `m`.
    fn dimension(&self, m: usize) -> usize;

    fn log_likelihood(&self, y: &Self::Data, params: &[f64], m: usize) -> f64;

    /// Draw unconstrained parameters from the prior of model `m`.
    fn sample_prior<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Vec<f64>;

    /// Log prior density of unconstrained parameters; `-inf` outside the support.
    fn log_prior(&self, params: &[f64], m: usize) -> f64;

    /// Closed-form log marginal likelihood, when one exists.
    fn exact_log_marginal(&self, _y: &Self::Data, _m: usize) -> Option<f64> {
        None
    }

    /// Scalar summary of interest for parameter inference (the latent mean
    /// for the toy model, the volume of distribution for kinetic models).
    fn derived_quantity(&self, params: &[f64], m: usize) -> f64;

    /// Per-particle summary from which the tempered likelihood is evaluated
    /// at any inverse temperature. The default is `alpha * log_likelihood`.
    fn tempered(&self, y: &Self::Data, params: &[f64], m: usize) -> Tempered {
        Tempered::Power(self.log_likelihood(y, params, m))
    }

    /// Human readable name of model `m`.
    fn model_label(&self, m: usize) -> String {
        m.to_string()
    }
}

/// Log of the tempered likelihood factor `gamma_alpha(x) / prior(x)`, kept
/// in a form that can be re-evaluated at any `alpha` without recomputing the
/// model curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tempered {
    /// `alpha * log_lik`.
    Power(f64),
    /// Gaussian errors with a `Gamma(shape, rate)` precision integrated out:
    /// `log int (lambda^(count/2) e^base e^(-lambda ss / 2))^alpha Gamma(lambda) dlambda`.
    /// At `alpha = 1` this is the likelihood with the precision marginalized.
    CollapsedPrecision { base: f64, count: f64, ss: f64, shape: f64, rate: f64 },
}

impl Tempered {
    pub fn at(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            return 0.0;
        }
        match *self {
            Tempered::Power(l) => alpha * l,
            Tempered::CollapsedPrecision { base, count, ss, shape, rate } => {
                let post = shape + 0.5 * alpha * count;
                alpha * base + shape * rate.ln() - ln_gamma(shape) + ln_gamma(post)
                    - post * (rate + 0.5 * alpha * ss).ln()
            }
        }
    }
}
