//! Datasets and the synthetic stick-figure generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CrfError, Result};
use crate::model::{GridGeometry, LabelSpace, Labeling};
use crate::net::FeatureMap;
use crate::rng::derive_seed;

/// One depth image with its ground-truth part labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: FeatureMap,
    pub labels: Labeling,
}

impl Sample {
    pub fn new(input: FeatureMap, labels: Labeling) -> Result<Self> {
        if input.channels() != 1 {
            return Err(CrfError::contract("inputs must have exactly one channel"));
        }
        if input.height() * input.width() != labels.len() {
            return Err(CrfError::contract("input and label map differ in size"));
        }
        Ok(Sample { input, labels })
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry::new(self.input.height(), self.input.width()).expect("non-empty sample")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub labels: LabelSpace,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(labels: LabelSpace, samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(CrfError::contract("dataset is empty"));
        }
        if samples.iter().any(|s| s.labels.states().iter().any(|&v| v >= labels.count())) {
            return Err(CrfError::contract("label outside the dataset's label space"));
        }
        Ok(Dataset { labels, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn inputs(&self) -> Vec<FeatureMap> {
        self.samples.iter().map(|s| s.input.clone()).collect()
    }

    pub fn labelings(&self) -> Vec<Labeling> {
        self.samples.iter().map(|s| s.labels.clone()).collect()
    }
}

/// A template part: rectangle in figure-box coordinates, the part it merges
/// into when the label space is too small to hold it, and its depth.
struct Part {
    rect: [f64; 4],
    parent: usize,
    depth: f64,
}

const BACKGROUND_DEPTH: f64 = 0.15;
pub const NOISE_SIGMA: f64 = 0.05;

/// Parts indexed by label id minus one. Left and right mirror parts share a
/// depth so only their position tells them apart.
const PARTS: [Part; 19] = [
    part([0.34, 0.00, 0.66, 0.16], 0, 0.45), // 1 head
    part([0.14, 0.17, 0.50, 0.54], 0, 0.75), // 2 torso left
    part([0.50, 0.17, 0.86, 0.54], 0, 0.75), // 3 torso right
    part([0.16, 0.54, 0.50, 0.78], 2, 0.60), // 4 upper leg left
    part([0.50, 0.54, 0.84, 0.78], 3, 0.60), // 5 upper leg right
    part([0.00, 0.17, 0.14, 0.36], 2, 0.90), // 6 upper arm left
    part([0.86, 0.17, 1.00, 0.36], 3, 0.90), // 7 upper arm right
    part([0.16, 0.78, 0.50, 1.00], 4, 0.55), // 8 lower leg left
    part([0.50, 0.78, 0.84, 1.00], 5, 0.55), // 9 lower leg right
    part([0.00, 0.36, 0.14, 0.54], 6, 0.95), // 10 forearm left
    part([0.86, 0.36, 1.00, 0.54], 7, 0.95), // 11 forearm right
    part([0.44, 0.15, 0.56, 0.19], 1, 0.50), // 12 neck
    part([0.00, 0.54, 0.14, 0.60], 10, 0.85), // 13 hand left
    part([0.86, 0.54, 1.00, 0.60], 11, 0.85), // 14 hand right
    part([0.10, 0.94, 0.50, 1.00], 8, 0.40), // 15 foot left
    part([0.50, 0.94, 0.90, 1.00], 9, 0.40), // 16 foot right
    part([0.14, 0.46, 0.50, 0.54], 2, 0.70), // 17 hip left
    part([0.50, 0.46, 0.86, 0.54], 3, 0.70), // 18 hip right
    part([0.38, 0.17, 0.62, 0.24], 2, 0.80), // 19 chest
];

const fn part(rect: [f64; 4], parent: usize, depth: f64) -> Part {
    Part { rect, parent, depth }
}

pub const MAX_SYNTH_LABELS: usize = PARTS.len() + 1;

/// Label drawn for template part `p` (1-based) when only `labels` exist.
fn resolve_label(mut p: usize, labels: usize) -> usize {
    while p >= labels {
        p = PARTS[p - 1].parent;
    }
    p
}

/// Minimal figure-box size in pixels.
const MIN_FIGURE_HEIGHT: usize = 12;
const MIN_FIGURE_WIDTH: usize = 8;

/// Renders `count` stick figures. Each sample is drawn from its own stream,
/// so sample `d` does not depend on `count`.
pub fn generate_synthetic(count: usize, height: usize, width: usize, labels: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(CrfError::contract("dataset is empty"));
    }
    let label_space = LabelSpace::new(labels)?;
    if labels < 2 {
        return Err(CrfError::contract("need at least one part label besides background"));
    }
    if labels > MAX_SYNTH_LABELS {
        return Err(CrfError::Config(format!(
            "the stick-figure template has {} parts; {labels} labels requested",
            PARTS.len()
        )));
    }
    if height < MIN_FIGURE_HEIGHT + 2 || width < MIN_FIGURE_WIDTH + 2 {
        return Err(CrfError::Geometry(format!(
            "{height}x{width} is too small to place a figure (need at least {}x{})",
            MIN_FIGURE_HEIGHT + 2,
            MIN_FIGURE_WIDTH + 2
        )));
    }
    let samples = (0..count)
        .map(|d| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, d as u64));
            render_figure(&mut rng, height, width, labels, label_space)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(label_space, samples)
}

fn render_figure(rng: &mut ChaCha8Rng, height: usize, width: usize, labels: usize, space: LabelSpace) -> Result<Sample> {
    let max_fh = height - 2;
    let min_fh = MIN_FIGURE_HEIGHT.max((0.7 * max_fh as f64) as usize).min(max_fh);
    let fh = rng.random_range(min_fh..=max_fh);
    let max_fw = (width - 2).min((0.8 * fh as f64).round() as usize);
    let min_fw = MIN_FIGURE_WIDTH.max((0.85 * max_fw as f64) as usize).min(max_fw);
    let fw = rng.random_range(min_fw..=max_fw);
    let top = rng.random_range(1..=height - 1 - fh);
    let left = rng.random_range(1..=width - 1 - fw);

    let mut states = vec![0usize; height * width];
    for (i, part) in PARTS.iter().enumerate() {
        let label = resolve_label(i + 1, labels);
        let [x0, y0, x1, y1] = part.rect;
        let (r0, r1) = span(top, fh, y0, y1);
        let (c0, c1) = span(left, fw, x0, x1);
        for r in r0..r1 {
            for c in c0..c1 {
                states[r * width + c] = label;
            }
        }
    }
    let mut present = vec![false; labels];
    for &s in &states {
        present[s] = true;
    }
    if let Some(missing) = present.iter().position(|&p| !p) {
        return Err(CrfError::Geometry(format!("part {missing} has no pixels at {height}x{width}")));
    }
    let labeling = Labeling::new(states, space)?;

    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let depth = |label: usize| if label == 0 { BACKGROUND_DEPTH } else { PARTS[label - 1].depth };
    let data = labeling
        .states()
        .iter()
        .map(|&s| (depth(s) + noise.sample(rng)).clamp(0.0, 1.0))
        .collect();
    let input = FeatureMap::from_data(1, height, width, data)?;
    Sample::new(input, labeling)
}

/// Pixel range `[start, end)` of a normalized interval, at least one pixel.
fn span(origin: usize, extent: usize, a: f64, b: f64) -> (usize, usize) {
    let s = origin + (a * extent as f64).round() as usize;
    let e = (origin + (b * extent as f64).round() as usize).max(s + 1);
    (s, e.min(origin + extent))
}

/// Row of a part's centroid, or `None` if the part is absent.
pub fn centroid_row(labels: &Labeling, geometry: GridGeometry, part: usize) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (site, &s) in labels.states().iter().enumerate() {
        if s == part {
            sum += geometry.coords(site).0 as f64;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_small_requests_fail() {
        assert!(generate_synthetic(0, 48, 32, 6, 1).is_err());
        assert!(matches!(generate_synthetic(1, 8, 8, 6, 1), Err(CrfError::Geometry(_))));
        assert!(generate_synthetic(1, 48, 32, 1, 1).is_err());
    }

    #[test]
    fn deterministic_and_prefix_stable() {
        let a = generate_synthetic(5, 48, 32, 6, 9).unwrap();
        let b = generate_synthetic(5, 48, 32, 6, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(3, 48, 32, 6, 9).unwrap();
        assert_eq!(&a.samples[..3], &c.samples[..]);
        assert_ne!(a, generate_synthetic(5, 48, 32, 6, 10).unwrap());
    }

    #[test]
    fn every_label_in_every_sample_and_head_above_torso() {
        let data = generate_synthetic(200, 48, 32, 6, 3).unwrap();
        for s in &data.samples {
            let mut hist = [0usize; 6];
            for &v in s.labels.states() {
                hist[v] += 1;
            }
            assert!(hist.iter().all(|&h| h > 0), "{hist:?}");
            let g = s.geometry();
            let head = centroid_row(&s.labels, g, 1).unwrap();
            assert!(head < centroid_row(&s.labels, g, 2).unwrap());
            assert!(head < centroid_row(&s.labels, g, 3).unwrap());
        }
    }

    #[test]
    fn all_template_sizes_render() {
        for l in 2..=MAX_SYNTH_LABELS {
            let data = generate_synthetic(4, 64, 48, l, 5).unwrap();
            assert_eq!(data.labels.count(), l);
        }
        assert!(generate_synthetic(1, 48, 32, MAX_SYNTH_LABELS + 1, 1).is_err());
    }

    #[test]
    fn mirror_parts_share_depth() {
        assert_eq!(PARTS[1].depth, PARTS[2].depth);
        assert_eq!(PARTS[3].depth, PARTS[4].depth);
        let data = generate_synthetic(1, 48, 32, 6, 4).unwrap();
        let s = &data.samples[0];
        assert!(s.input.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
