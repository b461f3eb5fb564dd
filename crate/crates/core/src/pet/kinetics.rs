//! Plasma-input compartmental kinetics.
//!
//! The tissue curve is `C_T(t) = sum_i phi_i (C_P * exp(-theta_i .))(t)`.
//! With a piecewise-linear input the convolution is accumulated segment by
//! segment in closed form, so it is exact for the interpolant.

use super::input::PlasmaInput;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy)]
struct Step {
    width: f64,
    /// Index into the plan's distinct step widths.
    width_index: usize,
    end_value: f64,
    slope: f64,
    /// Index of the evaluation time reached at the end of this step, if any.
    record: Option<usize>,
}

/// Precomputed integration steps for evaluating `(C_P * exp(-theta .))` at a
/// fixed set of ascending times, for any decay rate.
#[derive(Debug, Clone)]
pub struct ConvolutionPlan {
    steps: Vec<Step>,
    /// Distinct positive step widths; knots and frames sit on a few regular
    /// grids, so the kernel terms are shared between many steps.
    widths: Vec<f64>,
    /// Evaluation times before the first input sample; their value is zero.
    leading_zeros: Vec<usize>,
    len: usize,
}

impl ConvolutionPlan {
    pub fn new(input: &PlasmaInput, times: &[f64]) -> Result<Self> {
        if times.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(invalid("evaluation times must be ascending"));
        }
        if let Some(&t) = times.iter().find(|&&t| !(t >= 0.0) || t > input.last()) {
            return Err(invalid(format!("time {t} outside the plasma input support [0, {}]", input.last())));
        }
        let first = input.first();
        let mut points: Vec<(f64, Option<usize>)> = input.times().iter().map(|&t| (t, None)).collect();
        let mut leading_zeros = Vec::new();
        for (i, &t) in times.iter().enumerate() {
            if t < first {
                leading_zeros.push(i);
            } else {
                points.push((t, Some(i)));
            }
        }
        // knots sort before evaluation points at equal times
        points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.is_some().cmp(&b.1.is_some())));

        let mut steps = Vec::with_capacity(points.len());
        let mut widths: Vec<f64> = Vec::new();
        let mut prev = first;
        for (t, record) in points.into_iter().skip(1) {
            let end_value = input.value_at(t).expect("inside support");
            let start_value = input.value_at(prev).expect("inside support");
            let width = t - prev;
            let slope = if width > 0.0 { (end_value - start_value) / width } else { 0.0 };
            let width_index = match widths.iter().position(|&w| w == width) {
                Some(k) => k,
                None if width > 0.0 => {
                    widths.push(width);
                    widths.len() - 1
                }
                None => usize::MAX,
            };
            steps.push(Step { width, width_index, end_value, slope, record });
            prev = t;
        }
        // an evaluation time equal to the first knot has an empty integral
        let mut leading = leading_zeros;
        for (i, &t) in times.iter().enumerate() {
            if t == first {
                leading.push(i);
            }
        }
        Ok(Self { steps, widths, leading_zeros: leading, len: times.len() })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Writes `int_0^t C_P(s) exp(-theta (t - s)) ds` for each planned time into `out`.
    pub fn evaluate_into(&self, theta: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.len);
        for &i in &self.leading_zeros {
            out[i] = 0.0;
        }
        let terms: Vec<(f64, f64, f64)> = self
            .widths
            .iter()
            .map(|&h| {
                let x = theta * h;
                let decay = (-x).exp();
                let (e1, g) = kernel_moments(x, decay);
                (decay, h * e1, h * h * g)
            })
            .collect();
        let mut acc = 0.0;
        for step in &self.steps {
            if step.width > 0.0 {
                let (decay, e1, g) = terms[step.width_index];
                acc = decay * acc + step.end_value * e1 - step.slope * g;
            }
            if let Some(i) = step.record {
                out[i] = acc;
            }
        }
    }

    pub fn evaluate(&self, theta: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        self.evaluate_into(theta, &mut out);
        out
    }
}

/// Returns `((1 - e^-x) / x, (1 - e^-x (1 + x)) / x^2)` without cancellation near zero.
#[inline]
fn kernel_moments(x: f64, decay: f64) -> (f64, f64) {
    if x < 0.05 {
        // Taylor series; the first omitted term is below 1e-16 relative
        let mut e1 = 0.0;
        let mut g = 0.0;
        let mut power = 1.0; // (-x)^n
        let mut fact = 1.0; // (n + 1)!
        for n in 0..8 {
            let n1 = (n + 1) as f64;
            fact *= n1;
            e1 += power / fact;
            g += power * n1 / (fact * (n1 + 1.0));
            power *= -x;
        }
        (e1, g)
    } else {
        let one_minus = -(-x).exp_m1();
        (one_minus / x, (one_minus - x * decay) / (x * x))
    }
}

/// Kinetic parameters of an `M`-compartment model.
#[derive(Debug, Clone, PartialEq)]
pub struct Kinetics {
    pub phi: Vec<f64>,
    pub theta: Vec<f64>,
}

impl Kinetics {
    pub fn new(phi: Vec<f64>, theta: Vec<f64>) -> Result<Self> {
        if phi.is_empty() || phi.len() != theta.len() {
            return Err(invalid("need matching, non-empty phi and theta vectors"));
        }
        Ok(Self { phi, theta })
    }

    pub fn order(&self) -> usize {
        self.phi.len()
    }

    /// Compartments sorted by ascending decay rate.
    pub fn canonical(&self) -> Self {
        let mut idx: Vec<usize> = (0..self.order()).collect();
        idx.sort_by(|&a, &b| self.theta[a].total_cmp(&self.theta[b]));
        Self { phi: idx.iter().map(|&i| self.phi[i]).collect(), theta: idx.iter().map(|&i| self.theta[i]).collect() }
    }
}

/// Tissue concentration at a single time.
pub fn tissue_concentration(t: f64, kinetics: &Kinetics, input: &PlasmaInput) -> Result<f64> {
    let plan = ConvolutionPlan::new(input, &[t])?;
    Ok(tissue_curve(&plan, kinetics)[0])
}

/// Tissue concentration at every planned time.
pub fn tissue_curve(plan: &ConvolutionPlan, kinetics: &Kinetics) -> Vec<f64> {
    let mut out = vec![0.0; plan.len()];
    let mut scratch = vec![0.0; plan.len()];
    for (&phi, &theta) in kinetics.phi.iter().zip(&kinetics.theta) {
        plan.evaluate_into(theta, &mut scratch);
        for (o, s) in out.iter_mut().zip(&scratch) {
            *o += phi * s;
        }
    }
    out
}

/// Volume of distribution `sum_i phi_i / theta_i`.
pub fn volume_of_distribution(kinetics: &Kinetics) -> Result<f64> {
    if kinetics.theta.iter().any(|&t| !(t > 0.0)) {
        return Err(invalid("volume of distribution needs every theta > 0"));
    }
    Ok(kinetics.phi.iter().zip(&kinetics.theta).map(|(p, t)| p / t).sum())
}
