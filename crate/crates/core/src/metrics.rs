//! Decisions and scores derived from chain traces.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::potts::ModelField;
use crate::samplers::ChainTrace;

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub selected: ModelField,
    /// Empirical order frequencies per node, node-major.
    pub frequencies: Vec<f64>,
}

impl SelectionResult {
    pub fn row(&self, v: usize) -> &[f64] {
        let m = self.selected.model_count();
        &self.frequencies[v * m..(v + 1) * m]
    }
}

fn argmax_smallest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn selection_from_counts(counts: &[u64], width: usize, height: usize, models: usize) -> Result<SelectionResult> {
    let mut frequencies = Vec::with_capacity(counts.len());
    let mut states = Vec::with_capacity(width * height);
    for row in counts.chunks(models) {
        let total: u64 = row.iter().sum();
        let freq: Vec<f64> = row.iter().map(|&c| c as f64 / total as f64).collect();
        states.push(argmax_smallest(&freq));
        frequencies.extend(freq);
    }
    Ok(SelectionResult { selected: ModelField::new(width, height, models, states)?, frequencies })
}

/// Most frequent order per node across the whole trace; ties go to the
/// smaller order.
pub fn modal_select(trace: &ChainTrace) -> Result<SelectionResult> {
    if trace.is_empty() {
        return Err(invalid("cannot select from an empty trace"));
    }
    selection_from_counts(&trace.counts(), trace.width(), trace.height(), trace.model_count())
}

pub fn percent_correct(selected: &ModelField, truth: &ModelField) -> Result<f64> {
    if selected.width() != truth.width() || selected.height() != truth.height() {
        return Err(invalid("fields differ in size"));
    }
    let hits = selected.states().iter().zip(truth.states()).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / truth.len() as f64)
}

/// Percent correct of the modal selection using iterations `1..=i`, for every `i`.
pub fn percent_correct_by_iteration(trace: &ChainTrace, truth: &ModelField) -> Result<Vec<f64>> {
    if trace.width() != truth.width() || trace.height() != truth.height() {
        return Err(invalid("trace and truth differ in size"));
    }
    let models = trace.model_count();
    let mut counts = vec![0u64; trace.node_count() * models];
    let mut modal = vec![0usize; trace.node_count()];
    let mut out = Vec::with_capacity(trace.len());
    trace.for_each_state(|_, s| {
        for (v, &m) in s.iter().enumerate() {
            let row = &mut counts[v * models..(v + 1) * models];
            row[m as usize] += 1;
            let cur = modal[v];
            let m = m as usize;
            if row[m] > row[cur] || (row[m] == row[cur] && m < cur) {
                modal[v] = m;
            }
        }
        let hits = modal.iter().zip(truth.states()).filter(|(a, b)| a == b).count();
        out.push(100.0 * hits as f64 / modal.len() as f64);
    });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VdMode {
    ModelAveraged,
    PosteriorModal,
}

/// Per-node maps of the derived quantity from order frequencies and the
/// conditional means per (node, model).
pub fn vd_maps(selection: &SelectionResult, conditional_means: &[f64], mode: VdMode) -> Result<Vec<f64>> {
    let models = selection.selected.model_count();
    if conditional_means.len() != selection.frequencies.len() {
        return Err(invalid("conditional means do not match the selection"));
    }
    let mut out = Vec::with_capacity(selection.selected.len());
    for v in 0..selection.selected.len() {
        let means = &conditional_means[v * models..(v + 1) * models];
        let value = match mode {
            VdMode::PosteriorModal => means[selection.selected.get(v)],
            VdMode::ModelAveraged => {
                selection.row(v).iter().zip(means).filter(|(f, _)| **f > 0.0).map(|(f, m)| f * m).sum()
            }
        };
        if value.is_nan() {
            return Err(invalid(format!("no conditional mean available at node {v}")));
        }
        out.push(value);
    }
    Ok(out)
}

pub fn rmse(map: &[f64], truth: &[f64]) -> Result<f64> {
    if map.len() != truth.len() || map.is_empty() {
        return Err(invalid("maps differ in size"));
    }
    let sq: f64 = map.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((sq / map.len() as f64).sqrt())
}

/// Lower bound on the probability that argmax over independent estimators
/// with common variance `sigma^2` picks the order whose mean exceeds every
/// other by at least `delta`.
pub fn selection_bound(delta: f64, sigma: f64, model_count: usize) -> Result<f64> {
    if !(delta > 0.0) || !(sigma > 0.0) {
        return Err(invalid("delta and sigma must be positive"));
    }
    if model_count < 2 {
        return Err(invalid("need at least two models"));
    }
    Ok(1.0 - (model_count - 1) as f64 / (1.0 + delta * delta / (2.0 * sigma * sigma)))
}

/// CSV `node,value`.
pub fn map_to_csv(values: &[f64]) -> String {
    let mut out = String::from("node,value\n");
    for (v, x) in values.iter().enumerate() {
        out.push_str(&format!("{v},{x:?}\n"));
    }
    out
}

pub fn parse_map_csv(text: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
    if lines.next() != Some("node,value") {
        return Err(Error::Parse("expected header node,value".into()));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let (v, x) = line.split_once(',').ok_or_else(|| Error::Parse(format!("bad map row {line:?}")))?;
        if v.parse::<usize>().ok() != Some(i) {
            return Err(Error::Parse(format!("map rows must be in node order, got {line:?}")));
        }
        out.push(x.parse().map_err(|_| Error::Parse(format!("bad map value {line:?}")))?);
    }
    Ok(out)
}

/// Binary PGM (P5) with values linearly scaled from `[lo, hi]` to `0..=255`.
pub fn to_pgm(width: usize, height: usize, values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    out.extend(values.iter().map(|&x| (((x - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Model orders as evenly spaced gray levels.
pub fn field_to_pgm(field: &ModelField) -> Vec<u8> {
    let values: Vec<f64> = field.states().iter().map(|&s| s as f64).collect();
    to_pgm(field.width(), field.height(), &values, 0.0, (field.model_count() - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn trace_of(histories: &[&[usize]]) -> ChainTrace {
        let len = histories[0].len();
        let fields: Vec<ModelField> = (0..len)
            .map(|i| ModelField::new(histories.len(), 1, 2, histories.iter().map(|h| h[i]).collect()).unwrap())
            .collect();
        ChainTrace::from_fields(&fields).unwrap()
    }

    #[test]
    fn modal_examples() {
        let t = trace_of(&[&[0, 0, 1], &[0, 1, 1], &[1, 0, 1]]);
        let s = modal_select(&t).unwrap();
        assert_eq!(s.selected.states(), &[0, 1, 1]);
        let tie = trace_of(&[&[0, 1], &[1, 0]]);
        assert_eq!(modal_select(&tie).unwrap().selected.states(), &[0, 0]);
        for v in 0..3 {
            assert!((s.row(v).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let perm = trace_of(&[&[1, 0, 0], &[1, 1, 0], &[1, 1, 0]]);
        assert_eq!(modal_select(&perm).unwrap().selected.states(), &[0, 1, 1]);
    }

    #[test]
    fn percent_examples() {
        let a = ModelField::new(2, 2, 2, vec![0, 1, 1, 0]).unwrap();
        let b = ModelField::new(2, 2, 2, vec![1, 0, 0, 1]).unwrap();
        let c = ModelField::new(2, 2, 2, vec![0, 1, 1, 1]).unwrap();
        assert_eq!(percent_correct(&a, &a).unwrap(), 100.0);
        assert_eq!(percent_correct(&a, &b).unwrap(), 0.0);
        assert_eq!(percent_correct(&a, &c).unwrap(), 75.0);
        assert!(percent_correct(&a, &ModelField::constant(4, 1, 2, 0).unwrap()).is_err());
    }

    #[test]
    fn cumulative_percent_matches_prefix_selection() {
        let t = trace_of(&[&[0, 1, 1, 1], &[1, 0, 0, 1]]);
        let truth = ModelField::new(2, 1, 2, vec![1, 0]).unwrap();
        let by_iter = percent_correct_by_iteration(&t, &truth).unwrap();
        assert_eq!(by_iter, vec![0.0, 50.0, 100.0, 100.0]);
        let s = modal_select(&t).unwrap();
        assert_eq!(*by_iter.last().unwrap(), percent_correct(&s.selected, &truth).unwrap());
    }

    #[test]
    fn vd_examples() {
        let single = trace_of(&[&[1, 1]]);
        let s = modal_select(&single).unwrap();
        let means = vec![f64::NAN, 9.8];
        assert_eq!(vd_maps(&s, &means, VdMode::ModelAveraged).unwrap(), vec![9.8]);
        assert_eq!(vd_maps(&s, &means, VdMode::PosteriorModal).unwrap(), vec![9.8]);
        let split = modal_select(&trace_of(&[&[0, 1]])).unwrap();
        assert_eq!(vd_maps(&split, &[4.0, 6.0], VdMode::ModelAveraged).unwrap(), vec![5.0]);
        assert!(vd_maps(&split, &[f64::NAN, 6.0], VdMode::PosteriorModal).is_err());
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[3.5, 1.5], &[1.0, -1.0]).unwrap() - 2.5).abs() < 1e-12);
        assert!((rmse(&[3.0, 4.0], &[0.0, 0.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn bound_examples() {
        assert!((selection_bound(1.0, 1.0, 2).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((selection_bound(1.0, 1e-9, 2).unwrap() - 1.0).abs() < 1e-12);
        assert!(selection_bound(2f64.sqrt(), 1.0, 3).unwrap().abs() < 1e-12);
        assert!(selection_bound(0.0, 1.0, 2).is_err());
        assert!(selection_bound(1.0, -1.0, 2).is_err());
    }

    #[test]
    fn bound_holds_by_simulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (ratio, models) in [(0.5, 2), (2.0, 3), (4.0, 3)] {
            let n = 20_000;
            let mut hits = 0;
            for _ in 0..n {
                let z: f64 = StandardNormal.sample(&mut rng);
                let best = ratio + z;
                if (1..models).all(|_| best > StandardNormal.sample(&mut rng)) {
                    hits += 1;
                }
            }
            let p = hits as f64 / n as f64;
            assert!(p >= selection_bound(ratio, 1.0, models).unwrap());
        }
    }

    #[test]
    fn csv_and_pgm() {
        let vals = vec![0.5, -1.25, 9.8];
        assert_eq!(parse_map_csv(&map_to_csv(&vals)).unwrap(), vals);
        let field = ModelField::new(3, 1, 3, vec![0, 1, 2]).unwrap();
        let pgm = field_to_pgm(&field);
        assert!(pgm.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&pgm[pgm.len() - 3..], &[0, 128, 255]);
    }
}
