//! Seeded 2D dual-tracer phantoms: smooth focal blobs and ring/shell patterns.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::metrics::RegionMask;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::rng;

/// Values are snapped to this dyadic grid so that the dual image minus any
/// subset of singles reproduces the remainder exactly.
const GRID: f64 = (1u64 << 24) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternKind {
    /// Gaussian focal uptake.
    Blobs,
    /// Thin annular shells.
    Rings,
}

impl PatternKind {
    /// Uniform uptake inside the head outline.
    pub fn background(self) -> f64 {
        match self {
            PatternKind::Blobs => 0.1,
            PatternKind::Rings => 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub size: usize,
    /// One entry per tracer.
    pub patterns: Vec<PatternKind>,
    pub blob_count: usize,
    pub ring_count: usize,
    /// Mixing weights of the dual image; empty means all ones.
    pub weights: Vec<f64>,
    /// Images must be divisible by this (the U-net's total downsampling).
    pub divisor: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 32,
            patterns: vec![PatternKind::Blobs, PatternKind::Rings],
            blob_count: 3,
            ring_count: 2,
            weights: Vec::new(),
            divisor: 2,
        }
    }
}

impl PhantomSpec {
    pub fn n_tracers(&self) -> usize {
        self.patterns.len()
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.weights.get(k).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config(format!(
                "phantom size {} is below 8",
                self.size
            )));
        }
        if self.divisor == 0 || !self.size.is_multiple_of(self.divisor) {
            return Err(Error::Config(format!(
                "phantom size {} is not divisible by {}",
                self.size, self.divisor
            )));
        }
        if self.patterns.is_empty() {
            return Err(Error::Config("phantom needs at least one tracer".into()));
        }
        if self.blob_count == 0 || self.ring_count == 0 {
            return Err(Error::Config(
                "blob and ring counts must be positive".into(),
            ));
        }
        if !self.weights.is_empty() && self.weights.len() != self.patterns.len() {
            return Err(Error::Config("one mixing weight per tracer".into()));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Config("mixing weights must be positive".into()));
        }
        Ok(())
    }
}

/// A dual-tracer image together with its per-tracer ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomPair {
    pub dual: Image,
    pub singles: Vec<Image>,
    /// Per tracer: `"lesion"` and `"background"`.
    pub regions: Vec<BTreeMap<String, RegionMask>>,
    pub seed: u64,
    pub spec: PhantomSpec,
}

impl PhantomPair {
    pub fn region(&self, tracer: usize, name: &str) -> Result<&RegionMask> {
        self.regions
            .get(tracer)
            .and_then(|r| r.get(name))
            .ok_or_else(|| Error::Metric(format!("no region `{name}` for tracer {tracer}")))
    }
}

fn snap(v: f64) -> f64 {
    (v * GRID).round() / GRID
}

struct Pattern {
    values: Vec<f64>,
    lesion: Vec<bool>,
}

fn blobs(r: &mut rng::Rng, size: usize, count: usize) -> Pattern {
    let s = size as f64;
    let scale = s / 32.0;
    let mut comps = Vec::with_capacity(count);
    for _ in 0..count {
        let angle = r.gen_range(0.0..std::f64::consts::TAU);
        let dist = r.gen_range(0.0..0.25 * s);
        let cy = s / 2.0 + dist * angle.sin();
        let cx = s / 2.0 + dist * angle.cos();
        let sigma = r.gen_range(1.5..3.0) * scale;
        let amp = r.gen_range(0.5..1.0);
        comps.push((cy, cx, sigma, amp));
    }
    let mut values = vec![0.0; size * size];
    let mut lesion = vec![false; size * size];
    let (ly, lx, ls, _) = comps[0];
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut v = 0.0;
            for &(cy, cx, sigma, amp) in &comps {
                let d2 = (fy - cy).powi(2) + (fx - cx).powi(2);
                v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            values[y * size + x] = v;
            lesion[y * size + x] = (fy - ly).powi(2) + (fx - lx).powi(2) <= ls * ls;
        }
    }
    Pattern { values, lesion }
}

fn rings(r: &mut rng::Rng, size: usize, count: usize) -> Pattern {
    let s = size as f64;
    let scale = s / 32.0;
    let mut comps = Vec::with_capacity(count);
    for _ in 0..count {
        let cy = s / 2.0 + r.gen_range(-2.0..2.0) * scale;
        let cx = s / 2.0 + r.gen_range(-2.0..2.0) * scale;
        let radius = r.gen_range(0.2..0.38) * s;
        let width = r.gen_range(1.0..1.8) * scale;
        let amp = r.gen_range(0.4..0.8);
        comps.push((cy, cx, radius, width, amp));
    }
    let mut values = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut v = 0.0;
            for &(cy, cx, radius, width, amp) in &comps {
                let d = ((fy - cy).powi(2) + (fx - cx).powi(2)).sqrt() - radius;
                v += amp * (-d * d / (2.0 * width * width)).exp();
            }
            values[y * size + x] = v;
        }
    }
    let peak = values.iter().cloned().fold(0.0, f64::max);
    let lesion = values.iter().map(|&v| v >= 0.5 * peak).collect();
    Pattern { values, lesion }
}

/// Generates one phantom; the result depends only on `seed` and `spec`.
pub fn gen_phantom(seed: u64, spec: &PhantomSpec) -> Result<PhantomPair> {
    spec.validate()?;
    let size = spec.size;
    let s = size as f64;
    let head_r2 = (0.45 * s).powi(2);
    let inside: Vec<bool> = (0..size * size)
        .map(|i| {
            let (fy, fx) = (
                (i / size) as f64 + 0.5 - s / 2.0,
                (i % size) as f64 + 0.5 - s / 2.0,
            );
            fy * fy + fx * fx <= head_r2
        })
        .collect();

    let mut singles = Vec::with_capacity(spec.n_tracers());
    let mut regions = Vec::with_capacity(spec.n_tracers());
    for (k, kind) in spec.patterns.iter().enumerate() {
        let mut r = rng::stream(seed, k as u64);
        let base = kind.background();
        let pattern = match kind {
            PatternKind::Blobs => blobs(&mut r, size, spec.blob_count),
            PatternKind::Rings => rings(&mut r, size, spec.ring_count),
        };
        let data = pattern
            .values
            .iter()
            .zip(&inside)
            .map(|(&v, &inn)| snap(if inn { base + v } else { 0.0 }))
            .collect();
        singles.push(Image::new(size, size, data)?);

        let lesion = RegionMask {
            height: size,
            width: size,
            bits: pattern
                .lesion
                .iter()
                .zip(&inside)
                .map(|(&l, &i)| l && i)
                .collect(),
        };
        let background = RegionMask {
            height: size,
            width: size,
            bits: pattern
                .lesion
                .iter()
                .zip(&inside)
                .map(|(&l, &i)| !l && i)
                .collect(),
        };
        if lesion.count() == 0 || background.count() == 0 {
            return Err(Error::Config("phantom produced an empty region".into()));
        }
        regions.push(BTreeMap::from([
            ("lesion".to_string(), lesion),
            ("background".to_string(), background),
        ]));
    }

    let mut dual = Image::zeros(size, size);
    for (k, single) in singles.iter().enumerate() {
        let w = spec.weight(k);
        for (d, &v) in dual.data_mut().iter_mut().zip(single.data()) {
            *d += w * v;
        }
    }

    Ok(PhantomPair {
        dual,
        singles,
        regions,
        seed,
        spec: spec.clone(),
    })
}

/// Per-item seeds of a corpus rooted at `seed`.
pub fn corpus_seeds(seed: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| seed.wrapping_add(i)).collect()
}

pub fn gen_corpus(seed: u64, count: usize, spec: &PhantomSpec) -> Result<Vec<PhantomPair>> {
    corpus_seeds(seed, count)
        .into_iter()
        .map(|s| gen_phantom(s, spec))
        .collect()
}
