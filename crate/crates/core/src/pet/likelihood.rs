//! Frame likelihoods, priors and the kinetic family as a [`NodeModel`].
//!
//! Unconstrained coordinates for an order-`M` model are
//! `[ln phi_1..M, ln theta_1..M, ln lambda]` under normal errors and
//! `[ln phi_1..M, ln theta_1..M, ln tau, logit(2/nu)]` under t errors.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::input::PlasmaInput;
use super::kinetics::{tissue_curve, volume_of_distribution, ConvolutionPlan, Kinetics};
use super::schedule::FrameSchedule;
use crate::error::{invalid, Result};
use crate::model::{NodeModel, Tempered};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const LN_PI: f64 = 1.144_729_885_849_400_2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Noise {
    Normal { lambda: f64 },
    StudentT { tau: f64, nu: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Normal,
    StudentT,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompartmentParams {
    pub kinetics: Kinetics,
    pub noise: Noise,
}

impl CompartmentParams {
    pub fn order(&self) -> usize {
        self.kinetics.order()
    }
}

/// Input function and frame schedule shared by every pixel, with the
/// convolution plan for the frame end times.
#[derive(Debug, Clone)]
pub struct PetSetup {
    input: PlasmaInput,
    schedule: FrameSchedule,
    plan: ConvolutionPlan,
    durations: Vec<f64>,
}

impl PetSetup {
    pub fn new(input: PlasmaInput, schedule: FrameSchedule) -> Result<Self> {
        let plan = ConvolutionPlan::new(&input, schedule.ends())?;
        let durations = schedule.durations();
        Ok(Self { input, schedule, plan, durations })
    }

    pub fn input(&self) -> &PlasmaInput {
        &self.input
    }

    pub fn schedule(&self) -> &FrameSchedule {
        &self.schedule
    }

    pub fn frame_count(&self) -> usize {
        self.durations.len()
    }

    /// `C_T` at every frame end time.
    pub fn tissue_curve(&self, kinetics: &Kinetics) -> Vec<f64> {
        tissue_curve(&self.plan, kinetics)
    }

    /// Per-frame variance factors `iota_j = C_T(t_j) / duration_j`.
    pub fn iota(&self, curve: &[f64]) -> Vec<f64> {
        curve.iter().zip(&self.durations).map(|(c, d)| c / d).collect()
    }

    pub fn log_likelihood(&self, y: &[f64], params: &CompartmentParams) -> Result<f64> {
        if y.len() != self.frame_count() {
            return Err(invalid(format!("expected {} frames, got {}", self.frame_count(), y.len())));
        }
        let curve = self.tissue_curve(&params.kinetics);
        match params.noise {
            Noise::Normal { lambda } => {
                if !(lambda > 0.0) {
                    return Err(invalid("precision must be positive"));
                }
                Ok(normal_frames(y, &curve, &self.durations, lambda.ln(), lambda))
            }
            Noise::StudentT { tau, nu } => {
                if !(nu > 0.0) {
                    return Err(invalid("degrees of freedom must be positive"));
                }
                if !(tau > 0.0) {
                    return Err(invalid("scale must be positive"));
                }
                Ok(t_frames(y, &curve, &self.durations, tau.ln(), nu))
            }
        }
    }
}

fn normal_frames(y: &[f64], curve: &[f64], durations: &[f64], ln_lambda: f64, lambda: f64) -> f64 {
    let mut total = 0.0;
    for ((&yi, &c), &d) in y.iter().zip(curve).zip(durations) {
        if !(c > 0.0) {
            return f64::NEG_INFINITY;
        }
        let iota = c / d;
        let r = yi - c;
        total += 0.5 * ln_lambda - 0.5 * (LN_2PI + iota.ln()) - lambda * r * r / (2.0 * iota);
    }
    total
}

fn t_frames(y: &[f64], curve: &[f64], durations: &[f64], ln_tau: f64, nu: f64) -> f64 {
    let tau = ln_tau.exp();
    let head = ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) + 0.5 * (ln_tau - LN_PI - nu.ln());
    let mut total = 0.0;
    for ((&yi, &c), &d) in y.iter().zip(curve).zip(durations) {
        if !(c > 0.0) {
            return f64::NEG_INFINITY;
        }
        let iota = c / d;
        let r = yi - c;
        total += head - 0.5 * iota.ln() - 0.5 * (nu + 1.0) * (tau * r * r / (nu * iota)).ln_1p();
    }
    total
}

/// Normal-error log likelihood of one pixel's frame values.
pub fn log_likelihood_normal(
    y: &[f64],
    kinetics: &Kinetics,
    lambda: f64,
    input: &PlasmaInput,
    schedule: &FrameSchedule,
) -> Result<f64> {
    let setup = PetSetup::new(input.clone(), schedule.clone())?;
    setup.log_likelihood(y, &CompartmentParams { kinetics: kinetics.clone(), noise: Noise::Normal { lambda } })
}

/// Student-t-error log likelihood of one pixel's frame values.
pub fn log_likelihood_t(
    y: &[f64],
    kinetics: &Kinetics,
    tau: f64,
    nu: f64,
    input: &PlasmaInput,
    schedule: &FrameSchedule,
) -> Result<f64> {
    let setup = PetSetup::new(input.clone(), schedule.clone())?;
    setup.log_likelihood(y, &CompartmentParams { kinetics: kinetics.clone(), noise: Noise::StudentT { tau, nu } })
}

/// Box-uniform priors on rate constants, Gamma prior on the precision (or
/// t scale) and a uniform prior on `1/nu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PetPrior {
    pub phi: (f64, f64),
    pub theta: (f64, f64),
    pub gamma_shape: f64,
    pub gamma_rate: f64,
    /// Upper end of the uniform prior on `1/nu`; the lower end is 0.
    pub inv_nu_max: f64,
}

impl Default for PetPrior {
    fn default() -> Self {
        Self { phi: (1e-5, 1e-1), theta: (1e-4, 1e-1), gamma_shape: 1e-3, gamma_rate: 1e-3, inv_nu_max: 0.5 }
    }
}

impl PetPrior {
    /// Prior with the raised slow-decay cutoff used for measured data.
    pub fn real_data() -> Self {
        Self { theta: (7e-4, 1e-1), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let boxes_ok = [self.phi, self.theta].iter().all(|&(a, b)| a > 0.0 && b > a && b.is_finite());
        if !boxes_ok {
            return Err(invalid("prior boxes need 0 < lower < upper < inf"));
        }
        if !(self.gamma_shape > 0.0 && self.gamma_rate > 0.0) {
            return Err(invalid("gamma prior parameters must be positive"));
        }
        if !(self.inv_nu_max > 0.0) {
            return Err(invalid("upper bound on 1/nu must be positive"));
        }
        Ok(())
    }

    fn log_gamma_density(&self, x: f64) -> f64 {
        let (a, b) = (self.gamma_shape, self.gamma_rate);
        a * b.ln() - ln_gamma(a) + (a - 1.0) * x.ln() - b * x
    }

    /// Log prior density over the natural parameters, `-inf` outside the support.
    pub fn log_density(&self, params: &CompartmentParams) -> f64 {
        let k = &params.kinetics;
        let in_box = |x: f64, (a, b): (f64, f64)| x >= a && x <= b;
        if !k.phi.iter().all(|&p| in_box(p, self.phi)) || !k.theta.iter().all(|&t| in_box(t, self.theta)) {
            return f64::NEG_INFINITY;
        }
        let m = k.order() as f64;
        let boxes = -m * ((self.phi.1 - self.phi.0).ln() + (self.theta.1 - self.theta.0).ln());
        match params.noise {
            Noise::Normal { lambda } if lambda > 0.0 => boxes + self.log_gamma_density(lambda),
            Noise::StudentT { tau, nu } if tau > 0.0 && nu > 0.0 && 1.0 / nu < self.inv_nu_max => {
                boxes + self.log_gamma_density(tau) - self.inv_nu_max.ln() - 2.0 * nu.ln()
            }
            _ => f64::NEG_INFINITY,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, order: usize, kind: NoiseKind, rng: &mut R) -> CompartmentParams {
        let z = self.sample_unconstrained(order, kind, rng);
        from_unconstrained(&z, order, kind)
    }

    pub fn sample_unconstrained<R: Rng + ?Sized>(&self, order: usize, kind: NoiseKind, rng: &mut R) -> Vec<f64> {
        let mut pairs: Vec<(f64, f64)> = (0..order)
            .map(|_| (rng.random_range(self.phi.0..=self.phi.1), rng.random_range(self.theta.0..=self.theta.1)))
            .collect();
        pairs.sort_by(|a, b| a.1.total_cmp(&b.1));
        let mut z = Vec::with_capacity(2 * order + 2);
        z.extend(pairs.iter().map(|p| p.0.ln()));
        z.extend(pairs.iter().map(|p| p.1.ln()));
        z.push(log_gamma_sample(self.gamma_shape, self.gamma_rate, rng));
        if kind == NoiseKind::StudentT {
            let u: f64 = rng.random_range(0.0..self.inv_nu_max);
            let p = u / self.inv_nu_max;
            z.push(p.ln() - (-p).ln_1p());
        }
        z
    }

    /// Log prior density of the log rate constants alone.
    ///
    /// The compartments are exchangeable, so the sampled coordinates keep
    /// them sorted by ascending `theta`: the density is `order!` times the
    /// box density on that wedge. Every likelihood is symmetric under
    /// relabeling, so the evidence is unchanged and the posterior loses its
    /// `order!` mirror modes.
    pub fn log_density_kinetics(&self, z: &[f64], order: usize) -> f64 {
        let (ln_phi, rest) = z.split_at(order);
        let ln_theta = &rest[..order];
        if ln_theta.windows(2).any(|w| !(w[0] < w[1])) {
            return f64::NEG_INFINITY;
        }
        let mut total = ln_factorial(order);
        for (&lz, (a, b)) in ln_phi.iter().map(|v| (v, self.phi)).chain(ln_theta.iter().map(|v| (v, self.theta))) {
            let x = lz.exp();
            if !(x >= a && x <= b) {
                return f64::NEG_INFINITY;
            }
            total += lz - (b - a).ln();
        }
        total
    }

    /// Log prior density in unconstrained coordinates, Jacobian included.
    pub fn log_density_unconstrained(&self, z: &[f64], order: usize, kind: NoiseKind) -> f64 {
        let mut total = self.log_density_kinetics(z, order);
        if total == f64::NEG_INFINITY {
            return total;
        }
        let rest = &z[2 * order..];
        // Gamma on the log scale: density of ln x is x * p(x)
        let (a, b) = (self.gamma_shape, self.gamma_rate);
        let lz = rest[0];
        total += a * b.ln() - ln_gamma(a) + a * lz - b * lz.exp();
        if kind == NoiseKind::StudentT {
            // 1/nu = inv_nu_max * sigmoid(w) is uniform, so w is standard logistic
            let w = rest[1];
            total += -softplus(-w) - softplus(w);
        }
        total
    }
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Draws `ln X` for `X ~ Gamma(shape, rate)`. Small shapes are boosted with
/// `X = Y U^(1/shape)`, `Y ~ Gamma(shape + 1)`, so the log never underflows.
pub fn log_gamma_sample<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    if shape >= 1.0 {
        return Gamma::new(shape, 1.0 / rate).expect("positive parameters").sample(rng).ln();
    }
    let y = Gamma::new(shape + 1.0, 1.0).expect("positive parameters").sample(rng);
    let u: f64 = 1.0 - rng.random::<f64>();
    y.ln() + u.ln() / shape - rate.ln()
}

/// Maps unconstrained coordinates back to natural parameters (using the
/// default `1/nu` upper bound of 0.5).
pub fn from_unconstrained(z: &[f64], order: usize, kind: NoiseKind) -> CompartmentParams {
    from_unconstrained_with(z, order, kind, 0.5)
}

fn from_unconstrained_with(z: &[f64], order: usize, kind: NoiseKind, inv_nu_max: f64) -> CompartmentParams {
    let phi = z[..order].iter().map(|v| v.exp()).collect();
    let theta = z[order..2 * order].iter().map(|v| v.exp()).collect();
    let scale = z[2 * order].exp();
    let noise = match kind {
        NoiseKind::Normal => Noise::Normal { lambda: scale },
        NoiseKind::StudentT => Noise::StudentT { tau: scale, nu: 1.0 / (inv_nu_max * sigmoid(z[2 * order + 1])) },
    };
    CompartmentParams { kinetics: Kinetics { phi, theta }, noise }
}

/// Kinetic model family over orders `1..=max_order`, for use by the evidence
/// sampler. Model index `m` has `m + 1` compartments.
///
/// With normal errors and `collapse_precision` set (the default), the
/// precision is integrated out against its Gamma prior and the parameter
/// vector holds only the log rate constants. The evidence is unchanged; the
/// sampler just no longer has to explore `ln lambda`, whose prior spreads over
/// hundreds of nats.
#[derive(Debug, Clone)]
pub struct PetModel {
    pub setup: PetSetup,
    pub prior: PetPrior,
    pub noise: NoiseKind,
    pub max_order: usize,
    pub collapse_precision: bool,
}

impl PetModel {
    pub fn new(setup: PetSetup, prior: PetPrior, noise: NoiseKind, max_order: usize) -> Result<Self> {
        prior.validate()?;
        if max_order == 0 {
            return Err(invalid("need at least one model order"));
        }
        Ok(Self { setup, prior, noise, max_order, collapse_precision: true })
    }

    /// Keeps the precision as an explicit sampled coordinate.
    pub fn with_explicit_precision(mut self) -> Self {
        self.collapse_precision = false;
        self
    }

    fn collapsed(&self) -> bool {
        self.collapse_precision && self.noise == NoiseKind::Normal
    }

    /// Natural parameters of an explicit-coordinate vector. For a collapsed
    /// model the precision is reported as its prior mean.
    pub fn params(&self, z: &[f64], m: usize) -> CompartmentParams {
        if self.collapsed() {
            let mut full = z[..2 * (m + 1)].to_vec();
            full.push((self.prior.gamma_shape / self.prior.gamma_rate).ln());
            return from_unconstrained_with(&full, m + 1, self.noise, self.prior.inv_nu_max);
        }
        from_unconstrained_with(z, m + 1, self.noise, self.prior.inv_nu_max)
    }

    fn kinetics(z: &[f64], order: usize) -> Kinetics {
        Kinetics {
            phi: z[..order].iter().map(|v| v.exp()).collect(),
            theta: z[order..2 * order].iter().map(|v| v.exp()).collect(),
        }
    }

    /// Sufficient statistics of the normal likelihood with the precision
    /// left out: `sum ln(1 / iota_j) / 2 - k ln(2 pi) / 2` and `sum r_j^2 / iota_j`.
    fn collapsed_stats(&self, y: &[f64], z: &[f64], m: usize) -> Tempered {
        let curve = self.setup.tissue_curve(&Self::kinetics(z, m + 1));
        let mut base = 0.0;
        let mut ss = 0.0;
        for ((&yi, &c), &d) in y.iter().zip(&curve).zip(&self.setup.durations) {
            if !(c > 0.0) {
                return Tempered::Power(f64::NEG_INFINITY);
            }
            let iota = c / d;
            let r = yi - c;
            base -= 0.5 * (LN_2PI + iota.ln());
            ss += r * r / iota;
        }
        Tempered::CollapsedPrecision {
            base,
            count: y.len() as f64,
            ss,
            shape: self.prior.gamma_shape,
            rate: self.prior.gamma_rate,
        }
    }
}

impl NodeModel for PetModel {
    type Data = Vec<f64>;

    fn model_count(&self) -> usize {
        self.max_order
    }

    fn dimension(&self, m: usize) -> usize {
        let order = m + 1;
        2 * order
            + match (self.noise, self.collapsed()) {
                (_, true) => 0,
                (NoiseKind::Normal, false) => 1,
                (NoiseKind::StudentT, _) => 2,
            }
    }

    /// For a collapsed model this is the likelihood with the precision
    /// integrated out.
    fn log_likelihood(&self, y: &Vec<f64>, z: &[f64], m: usize) -> f64 {
        if self.collapsed() {
            return self.collapsed_stats(y, z, m).at(1.0);
        }
        let order = m + 1;
        let curve = self.setup.tissue_curve(&Self::kinetics(z, order));
        let ln_scale = z[2 * order];
        match self.noise {
            NoiseKind::Normal => normal_frames(y, &curve, &self.setup.durations, ln_scale, ln_scale.exp()),
            NoiseKind::StudentT => {
                let nu = 1.0 / (self.prior.inv_nu_max * sigmoid(z[2 * order + 1]));
                t_frames(y, &curve, &self.setup.durations, ln_scale, nu)
            }
        }
    }

    fn tempered(&self, y: &Vec<f64>, z: &[f64], m: usize) -> Tempered {
        if self.collapsed() {
            self.collapsed_stats(y, z, m)
        } else {
            Tempered::Power(self.log_likelihood(y, z, m))
        }
    }

    fn sample_prior<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Vec<f64> {
        let mut z = self.prior.sample_unconstrained(m + 1, self.noise, rng);
        if self.collapsed() {
            z.truncate(2 * (m + 1));
        }
        z
    }

    fn log_prior(&self, z: &[f64], m: usize) -> f64 {
        if self.collapsed() {
            return self.prior.log_density_kinetics(z, m + 1);
        }
        self.prior.log_density_unconstrained(z, m + 1, self.noise)
    }

    fn derived_quantity(&self, z: &[f64], m: usize) -> f64 {
        let order = m + 1;
        (0..order).map(|i| (z[i] - z[order + i]).exp()).sum()
    }

    fn model_label(&self, m: usize) -> String {
        format!("{}C", m + 1)
    }
}

/// Volume of distribution of natural parameters, a convenience for reports.
pub fn params_volume(params: &CompartmentParams) -> Result<f64> {
    volume_of_distribution(&params.kinetics)
}
