//! First-order square lattices and region masks.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{invalid, Error, Result};
use crate::potts::ModelField;

/// A `width × height` first-order square lattice with free boundaries.
///
/// Nodes are indexed row-major: node `r * width + c` sits at row `r`, column `c`.
/// Two nodes are adjacent iff their pixel coordinates are at L1 distance one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatticeGraph {
    width: usize,
    height: usize,
    adjacency: Vec<[usize; 4]>,
    degree: Vec<u8>,
}

impl LatticeGraph {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid(format!("lattice dimensions must be positive, got {width}x{height}")));
        }
        let n = width * height;
        let mut adjacency = vec![[usize::MAX; 4]; n];
        let mut degree = vec![0u8; n];
        for r in 0..height {
            for c in 0..width {
                let v = r * width + c;
                let mut push = |u: usize| {
                    adjacency[v][degree[v] as usize] = u;
                    degree[v] += 1;
                };
                // N, E, S, W
                if r > 0 {
                    push(v - width);
                }
                if c + 1 < width {
                    push(v + 1);
                }
                if r + 1 < height {
                    push(v + width);
                }
                if c > 0 {
                    push(v - 1);
                }
            }
        }
        Ok(Self { width, height, adjacency, degree })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn node_count(&self) -> usize {
        self.width * self.height
    }

    pub fn edge_count(&self) -> usize {
        self.degree.iter().map(|&d| d as usize).sum::<usize>() / 2
    }

    /// Neighbours of `v` in N, E, S, W order, skipping those off the lattice.
    pub fn neighbors(&self, v: usize) -> Result<&[usize]> {
        if v >= self.node_count() {
            return Err(invalid(format!("node {v} out of range for {} nodes", self.node_count())));
        }
        Ok(self.neighbors_of(v))
    }

    #[inline]
    pub(crate) fn neighbors_of(&self, v: usize) -> &[usize] {
        &self.adjacency[v][..self.degree[v] as usize]
    }

    /// Undirected edges `(u, v)` with `u < v`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.node_count())
            .flat_map(move |v| self.neighbors_of(v).iter().copied().filter(move |&u| u > v).map(move |u| (v, u)))
    }

    pub fn coords(&self, v: usize) -> (usize, usize) {
        (v / self.width, v % self.width)
    }
}

/// A grid of small non-negative region labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    width: usize,
    height: usize,
    labels: Vec<u32>,
}

impl RegionMask {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(invalid(format!("mask of {} labels does not fill a {width}x{height} grid", labels.len())));
        }
        Ok(Self { width, height, labels })
    }

    pub fn uniform(width: usize, height: usize, label: u32) -> Result<Self> {
        Self::new(width, height, vec![label; width * height])
    }

    /// Parses a whitespace separated text grid; `#` lines are comments.
    pub fn parse(text: &str) -> Result<Self> {
        let (width, height, values) = parse_grid(text)?;
        Self::new(width, height, values)
    }

    pub fn to_text(&self) -> String {
        grid_to_text(self.width, &self.labels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Nearest-neighbour upscaling by an integer factor.
    pub fn upscale(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(invalid("upscale factor must be positive"));
        }
        let (w, h) = (self.width * factor, self.height * factor);
        let labels = (0..w * h)
            .map(|i| {
                let (r, c) = (i / w / factor, (i % w) / factor);
                self.labels[r * self.width + c]
            })
            .collect();
        Self::new(w, h, labels)
    }

    /// Keeps every `factor`-th pixel in each direction.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(invalid("downsample factor must be positive"));
        }
        let w = self.width.div_ceil(factor);
        let h = self.height.div_ceil(factor);
        let labels = (0..w * h).map(|i| self.labels[(i / w) * factor * self.width + (i % w) * factor]).collect();
        Self::new(w, h, labels)
    }

    /// The twenty-by-twenty four-region mask shipped with the crate.
    pub fn default_20x20() -> Self {
        Self::parse(include_str!("../data/mask_20x20.txt")).expect("bundled mask parses")
    }

    /// The five-fold upscaled 100×100 variant of [`RegionMask::default_20x20`].
    pub fn default_100x100() -> Self {
        Self::default_20x20().upscale(5).expect("positive factor")
    }
}

/// Maps every pixel's region label to a model index.
pub fn ground_truth_field(mask: &RegionMask, mapping: &BTreeMap<u32, usize>, model_count: usize) -> Result<ModelField> {
    let states = mask
        .labels
        .iter()
        .map(|label| {
            mapping.get(label).copied().ok_or_else(|| invalid(format!("region label {label} has no model mapping")))
        })
        .collect::<Result<Vec<_>>>()?;
    ModelField::new(mask.width, mask.height, model_count, states)
}

pub(crate) fn parse_grid<T: std::str::FromStr>(text: &str) -> Result<(usize, usize, Vec<T>)> {
    let mut width = None;
    let mut values = Vec::new();
    let mut height = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| tok.parse::<T>().map_err(|_| Error::Parse(format!("line {}: bad value {tok:?}", lineno + 1))))
            .collect::<Result<Vec<_>>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Parse(format!("line {}: expected {w} columns, found {}", lineno + 1, row.len())))
            }
            _ => {}
        }
        values.extend(row);
        height += 1;
    }
    let width = width.ok_or_else(|| Error::Parse("empty grid".into()))?;
    Ok((width, height, values))
}

pub(crate) fn grid_to_text<T: std::fmt::Display>(width: usize, values: &[T]) -> String {
    let mut out = String::new();
    for row in values.chunks(width) {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_node_has_no_edges() {
        let g = LatticeGraph::new(1, 1).unwrap();
        assert_eq!(g.node_count(), 1);
        assert_eq!(g.edge_count(), 0);
        assert!(g.neighbors(0).unwrap().is_empty());
    }

    #[test]
    fn two_by_two_is_a_cycle() {
        let g = LatticeGraph::new(2, 2).unwrap();
        assert_eq!(g.edge_count(), 4);
        for v in 0..4 {
            assert_eq!(g.neighbors(v).unwrap().len(), 2);
        }
    }

    #[test]
    fn twenty_square_edge_count() {
        let g = LatticeGraph::new(20, 20).unwrap();
        assert_eq!(g.node_count(), 400);
        assert_eq!(g.edge_count(), 760);
    }

    #[test]
    fn degrees_on_three_by_three() {
        let g = LatticeGraph::new(3, 3).unwrap();
        assert_eq!(g.neighbors(4).unwrap(), &[1, 5, 7, 3]);
        assert_eq!(g.neighbors(0).unwrap().len(), 2);
        assert_eq!(g.neighbors(1).unwrap().len(), 3);
        let g = LatticeGraph::new(2, 1).unwrap();
        assert_eq!(g.neighbors(0).unwrap(), &[1]);
    }

    #[test]
    fn zero_dimension_and_bad_node_rejected() {
        assert!(matches!(LatticeGraph::new(0, 3), Err(Error::InvalidArgument(_))));
        assert!(matches!(LatticeGraph::new(3, 0), Err(Error::InvalidArgument(_))));
        let g = LatticeGraph::new(2, 2).unwrap();
        assert!(matches!(g.neighbors(4), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn edge_count_matches_enumeration() {
        for w in 1..=5 {
            for h in 1..=5 {
                let g = LatticeGraph::new(w, h).unwrap();
                let mut brute = 0;
                for a in 0..w * h {
                    for b in a + 1..w * h {
                        let (ra, ca) = ((a / w) as i64, (a % w) as i64);
                        let (rb, cb) = ((b / w) as i64, (b % w) as i64);
                        if (ra - rb).abs() + (ca - cb).abs() == 1 {
                            brute += 1;
                            assert!(g.neighbors(a).unwrap().contains(&b));
                            assert!(g.neighbors(b).unwrap().contains(&a));
                        }
                    }
                }
                assert_eq!(g.edge_count(), brute);
                assert_eq!(brute, 2 * w * h - w - h);
                assert_eq!(g.edges().count(), brute);
            }
        }
    }

    #[test]
    fn mask_parsing_skips_comments() {
        let m = RegionMask::parse("# header\n0 1\n\n2 3\n").unwrap();
        assert_eq!((m.width(), m.height()), (2, 2));
        assert_eq!(m.labels(), &[0, 1, 2, 3]);
        assert!(RegionMask::parse("0 1\n2\n").is_err());
        assert!(RegionMask::parse("0 x\n").is_err());
        assert_eq!(RegionMask::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn ground_truth_mappings() {
        let mask = RegionMask::default_20x20();
        let toy: BTreeMap<u32, usize> = [(0, 0), (1, 1), (2, 1), (3, 1)].into();
        let field = ground_truth_field(&mask, &toy, 2).unwrap();
        for (label, &state) in mask.labels().iter().zip(field.states()) {
            assert_eq!(state, if *label == 0 { 0 } else { 1 });
        }
        // compartments 2, 3, 1, 1 stored as indices 1, 2, 0, 0
        let pet: BTreeMap<u32, usize> = [(0, 1), (1, 2), (2, 0), (3, 0)].into();
        let field = ground_truth_field(&mask, &pet, 3).unwrap();
        for (label, &state) in mask.labels().iter().zip(field.states()) {
            assert_eq!(state, [1, 2, 0, 0][*label as usize]);
        }
        let uniform = RegionMask::uniform(3, 2, 7).unwrap();
        let f = ground_truth_field(&uniform, &[(7, 1)].into(), 2).unwrap();
        assert!(f.states().iter().all(|&s| s == 1));
        assert!(ground_truth_field(&mask, &[(0, 0)].into(), 2).is_err());
    }

    #[test]
    fn default_masks_have_four_regions() {
        let m = RegionMask::default_20x20();
        assert_eq!((m.width(), m.height()), (20, 20));
        for label in 0..4 {
            assert!(m.labels().contains(&label));
        }
        let big = RegionMask::default_100x100();
        assert_eq!((big.width(), big.height()), (100, 100));
        assert_eq!(big.labels()[5 * 100 * 7 + 5 * 3], m.labels()[7 * 20 + 3]);
        assert_eq!(big.downsample(5).unwrap(), m);
    }
}
