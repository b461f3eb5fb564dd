use crate::error::{invalid, Error, Result};

/// Sampled arterial plasma input, linearly interpolated between samples
/// and zero before the first sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PlasmaInput {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl PlasmaInput {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(invalid("plasma input needs matching, non-empty time and value samples"));
        }
        if times[0] < 0.0 {
            return Err(invalid("plasma input times must be non-negative"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("plasma input times must strictly increase"));
        }
        if values.iter().any(|&c| !(c >= 0.0) || !c.is_finite()) {
            return Err(invalid("plasma concentrations must be finite and non-negative"));
        }
        Ok(Self { times, values })
    }

    /// `C_P(t) = amplitude * t * exp(-rate * t)` sampled at `knots`.
    pub fn bolus(amplitude: f64, rate: f64, knots: &[f64]) -> Result<Self> {
        if !(amplitude > 0.0) || !(rate > 0.0) {
            return Err(invalid("bolus amplitude and rate must be positive"));
        }
        let values = knots.iter().map(|&t| amplitude * t * (-rate * t).exp()).collect();
        Self::new(knots.to_vec(), values)
    }

    /// Knots for sampling a bolus: 10 s spacing to 300 s, 60 s spacing to
    /// 1200 s, then a single knot at `end`.
    pub fn default_knots(end: f64) -> Vec<f64> {
        let mut knots: Vec<f64> = (0..30).map(|i| i as f64 * 10.0).collect();
        knots.extend((0..15).map(|i| 300.0 + i as f64 * 60.0));
        knots.push(1200.0);
        if end > 1200.0 {
            knots.push(end);
        }
        knots
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn first(&self) -> f64 {
        self.times[0]
    }

    pub fn last(&self) -> f64 {
        *self.times.last().expect("non-empty")
    }

    /// Interpolated concentration; `None` beyond the last sample.
    pub fn value_at(&self, t: f64) -> Option<f64> {
        if t < self.times[0] {
            return Some(0.0);
        }
        if t > self.last() {
            return None;
        }
        let i = self.times.partition_point(|&s| s <= t);
        if i == self.times.len() {
            return Some(*self.values.last().expect("non-empty"));
        }
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let (c0, c1) = (self.values[i - 1], self.values[i]);
        Some(c0 + (c1 - c0) * (t - t0) / (t1 - t0))
    }

    /// CSV with header `time_s,concentration`.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rows = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        match rows.next() {
            Some("time_s,concentration") => {}
            other => return Err(Error::Parse(format!("expected header time_s,concentration, got {other:?}"))),
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        for r in rows {
            let (t, c) = r.split_once(',').ok_or_else(|| Error::Parse(format!("bad input row {r:?}")))?;
            times.push(t.trim().parse().map_err(|_| Error::Parse(format!("bad time in {r:?}")))?);
            values.push(c.trim().parse().map_err(|_| Error::Parse(format!("bad concentration in {r:?}")))?);
        }
        Self::new(times, values)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_s,concentration\n");
        for (t, c) in self.times.iter().zip(&self.values) {
            out.push_str(&format!("{t},{c}\n"));
        }
        out
    }
}
