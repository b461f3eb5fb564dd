use rand_distr::{Distribution, StandardNormal};

use super::kinetics::Kinetics;
use super::likelihood::PetSetup;
use crate::error::{invalid, Error, Result};
use crate::potts::ModelField;
use crate::rng::{stream, tag};

const MAGIC: &[u8; 4] = b"PETI";

/// Dynamic image: one time-activity curve per node, stored node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PetImage {
    width: usize,
    height: usize,
    frames: usize,
    values: Vec<f64>,
}

impl PetImage {
    pub fn new(width: usize, height: usize, frames: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || frames == 0 {
            return Err(invalid("image dimensions must be positive"));
        }
        if values.len() != width * height * frames {
            return Err(invalid(format!(
                "expected {} values for a {width}x{height}x{frames} image, got {}",
                width * height * frames,
                values.len()
            )));
        }
        Ok(Self { width, height, frames, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn node_count(&self) -> usize {
        self.width * self.height
    }

    pub fn curve(&self, v: usize) -> &[f64] {
        &self.values[v * self.frames..(v + 1) * self.frames]
    }

    pub fn curves(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.frames).map(<[f64]>::to_vec).collect()
    }

    /// Mean over frames for each node, for quick-look previews.
    pub fn frame_means(&self) -> Vec<f64> {
        self.values.chunks(self.frames).map(|c| c.iter().sum::<f64>() / self.frames as f64).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 24);
        out.push_str(&format!("# width={} height={}\nnode,frame,value\n", self.width, self.height));
        for (i, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{},{},{:?}\n", i / self.frames, i % self.frames, v));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut dims = None;
        let mut rows = Vec::new();
        let mut header = false;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(c) = line.strip_prefix('#') {
                let mut w = None;
                let mut h = None;
                for kv in c.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("width", x)) => w = x.parse().ok(),
                        Some(("height", x)) => h = x.parse().ok(),
                        _ => {}
                    }
                }
                if let (Some(w), Some(h)) = (w, h) {
                    dims = Some((w, h));
                }
                continue;
            }
            if !header {
                if line != "node,frame,value" {
                    return Err(Error::Parse(format!("expected header node,frame,value, got {line:?}")));
                }
                header = true;
                continue;
            }
            let bad = || Error::Parse(format!("bad image row {line:?}"));
            let mut it = line.split(',');
            let node: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let frame: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let value: f64 = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            rows.push((node, frame, value));
        }
        let (width, height) = dims.ok_or_else(|| Error::Parse("missing '# width=.. height=..' line".into()))?;
        let frames = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        let mut values = vec![f64::NAN; width * height * frames];
        for (node, frame, value) in rows {
            if node >= width * height {
                return Err(Error::Parse(format!("node {node} outside a {width}x{height} image")));
            }
            values[node * frames + frame] = value;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Parse("image CSV is missing (node, frame) entries".into()));
        }
        Self::new(width, height, frames, values)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        for d in [self.width, self.height, self.frames] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Parse("not a PETI image".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        let (width, height, frames) = (dim(0), dim(1), dim(2));
        let body = &bytes[16..];
        if body.len() != 8 * width * height * frames {
            return Err(Error::Parse("PETI body length does not match its header".into()));
        }
        let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Self::new(width, height, frames, values)
    }
}

/// Simulates a dynamic image. Node `v` uses the kinetics of its model order
/// and Gaussian frame noise with variance `s * iota_j`, where `s` makes the
/// largest frame variance equal `noise_level`. Each node draws from its own
/// stream keyed by `(seed, v)`.
pub fn simulate_pet_image(
    field: &ModelField,
    truth: &[Kinetics],
    setup: &PetSetup,
    noise_level: f64,
    seed: u64,
) -> Result<PetImage> {
    if !(noise_level >= 0.0) || !noise_level.is_finite() {
        return Err(invalid("noise level must be finite and non-negative"));
    }
    if truth.len() < field.model_count() {
        return Err(invalid("need true kinetics for every model order in the field"));
    }
    let curves: Vec<Vec<f64>> = truth.iter().map(|k| setup.tissue_curve(k)).collect();
    let scales: Vec<Vec<f64>> = curves
        .iter()
        .map(|c| {
            let iota = setup.iota(c);
            let max = iota.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !(max > 0.0) {
                return Err(invalid("true tissue curve is zero at every frame"));
            }
            Ok(iota.iter().map(|i| (noise_level * i.max(0.0) / max).sqrt()).collect())
        })
        .collect::<Result<_>>()?;
    let frames = setup.frame_count();
    let mut values = Vec::with_capacity(field.states().len() * frames);
    for (v, &m) in field.states().iter().enumerate() {
        let mut rng = stream(seed, &[tag::DATA, v as u64]);
        for (c, s) in curves[m].iter().zip(&scales[m]) {
            let e: f64 = StandardNormal.sample(&mut rng);
            values.push(c + s * e);
        }
    }
    PetImage::new(field.width(), field.height(), frames, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pet::input::PlasmaInput;
    use crate::pet::schedule::FrameSchedule;

    fn setup() -> PetSetup {
        let input = PlasmaInput::bolus(40.0, 1.0 / 60.0, &PlasmaInput::default_knots(8265.0)).unwrap();
        PetSetup::new(input, FrameSchedule::default_schedule()).unwrap()
    }

    fn truth() -> Vec<Kinetics> {
        vec![
            Kinetics::new(vec![4.9e-3], vec![5e-4]).unwrap(),
            Kinetics::new(vec![4.9e-3, 1.8e-3], vec![5e-4, 0.011]).unwrap(),
        ]
    }

    #[test]
    fn variance_scaling() {
        let setup = setup();
        let field = ModelField::constant(100, 100, 2, 0).unwrap();
        let img = simulate_pet_image(&field, &truth(), &setup, 0.5, 21).unwrap();
        let n = field.states().len() as f64;
        let max_var = (0..img.frames())
            .map(|j| {
                let xs: Vec<f64> = (0..img.node_count()).map(|v| img.curve(v)[j]).collect();
                let m = xs.iter().sum::<f64>() / n;
                xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
            })
            .fold(0.0, f64::max);
        assert!((max_var - 0.5).abs() < 0.025, "max variance {max_var}");
    }

    #[test]
    fn noiseless_and_deterministic() {
        let setup = setup();
        let mut field = ModelField::constant(3, 2, 2, 0).unwrap();
        field.set(4, 1);
        let clean = simulate_pet_image(&field, &truth(), &setup, 0.0, 1).unwrap();
        assert_eq!(clean.curve(4), setup.tissue_curve(&truth()[1]).as_slice());
        let a = simulate_pet_image(&field, &truth(), &setup, 0.5, 9).unwrap();
        let b = simulate_pet_image(&field, &truth(), &setup, 0.5, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.curve(0), a.curve(1));
        let zero = vec![Kinetics::new(vec![0.0], vec![1e-3]).unwrap(); 2];
        assert!(simulate_pet_image(&field, &zero, &setup, 0.5, 1).is_err());
    }

    #[test]
    fn round_trips() {
        let setup = setup();
        let field = ModelField::constant(4, 3, 2, 1).unwrap();
        let img = simulate_pet_image(&field, &truth(), &setup, 0.5, 2).unwrap();
        assert_eq!(PetImage::parse_csv(&img.to_csv()).unwrap(), img);
        let bytes = img.to_bytes();
        assert_eq!(&bytes[..4], b"PETI");
        let back = PetImage::from_bytes(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(PetImage::parse_csv(&back.to_csv()).unwrap().to_bytes(), bytes);
        assert!(PetImage::from_bytes(&bytes[..20]).is_err());
    }
}
