//! Deterministic marker-based watershed label maps.
//!
//! Pipeline: grayscale -> Gaussian smoothing -> minima detection (plateau
//! aware, 4-connected) -> greedy priority-flood label propagation -> [0,1)
//! normalization. Every stage has a total tie order, so the result is a pure
//! function of the input raster.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{gaussian_blur, to_grayscale, ImageBuffer};

/// Integer region labels; 0 means unlabeled, regions are numbered 1..K.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn seed_count(&self) -> usize {
        self.max_label() as usize
    }
}

/// Float label map normalized to [0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Smoothing and normalization parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct WatershedConfig {
    /// Gaussian pre-smoothing sigma.
    pub sigma: f64,
    /// Normalization denominator guard.
    pub eps: f64,
}

impl Default for WatershedConfig {
    fn default() -> Self {
        Self { sigma: 2.0, eps: 1e-8 }
    }
}

impl WatershedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidParameter(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidParameter(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

fn neighbors4(p: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (p / w, p % w);
    [
        (y > 0).then(|| p - w),
        (y + 1 < h).then(|| p + w),
        (x > 0).then(|| p - 1),
        (x + 1 < w).then(|| p + 1),
    ]
    .into_iter()
    .flatten()
}

/// Find minimum plateaus of a smoothed single-channel image.
///
/// A plateau (maximal 4-connected region of exactly equal value) is a seed
/// iff none of its pixels has a 4-neighbor with a strictly smaller value.
/// Seeds are numbered 1..K in row-major order of each plateau's first-scanned
/// pixel; all other pixels stay 0.
pub fn detect_minima(smoothed: &ImageBuffer) -> Result<LabelMap> {
    if smoothed.channels() != 1 {
        return Err(Error::InvalidChannels { expected: "1", got: smoothed.channels() });
    }
    let (h, w) = (smoothed.height(), smoothed.width());
    let v = smoothed.data();
    let mut labels = vec![0u32; h * w];
    let mut visited = vec![false; h * w];
    let mut next = 1u32;
    let mut stack = Vec::new();
    let mut plateau = Vec::new();
    for start in 0..h * w {
        if visited[start] {
            continue;
        }
        let level = v[start];
        let mut is_min = true;
        plateau.clear();
        stack.push(start);
        visited[start] = true;
        while let Some(p) = stack.pop() {
            plateau.push(p);
            for n in neighbors4(p, h, w) {
                if v[n] == level {
                    if !visited[n] {
                        visited[n] = true;
                        stack.push(n);
                    }
                } else if v[n] < level {
                    is_min = false;
                }
            }
        }
        if is_min {
            for &p in &plateau {
                labels[p] = next;
            }
            next += 1;
        }
    }
    Ok(LabelMap { height: h, width: w, labels })
}

#[derive(PartialEq)]
struct FrontierEntry {
    cost: f64,
    pixel: u32,
    label: u32,
}

impl Eq for FrontierEntry {}

impl Ord for FrontierEntry {
    // BinaryHeap is a max-heap; invert so the smallest
    // (cost, pixel, label) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.pixel.cmp(&self.pixel))
            .then_with(|| other.label.cmp(&self.label))
    }
}

impl PartialOrd for FrontierEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Greedy priority flood: repeatedly commit the globally minimal-cost
/// (cost, pixel, label) frontier entry, where cost is the absolute intensity
/// difference between the candidate pixel and the labeled 4-neighbor through
/// which it is reached. Ties break on lower cost, then lower row-major pixel
/// index, then lower label.
pub fn propagate_labels(smoothed: &ImageBuffer, seeds: &LabelMap) -> Result<LabelMap> {
    if smoothed.channels() != 1 {
        return Err(Error::InvalidChannels { expected: "1", got: smoothed.channels() });
    }
    let (h, w) = (smoothed.height(), smoothed.width());
    if seeds.height != h || seeds.width != w {
        return Err(Error::ShapeMismatch(format!(
            "seeds {}x{} vs image {h}x{w}",
            seeds.height, seeds.width
        )));
    }
    if seeds.labels.iter().all(|&l| l == 0) {
        return Err(Error::NoSeeds);
    }
    let v = smoothed.data();
    let mut labels = seeds.labels.clone();
    let mut heap = BinaryHeap::new();
    let push_neighbors = |heap: &mut BinaryHeap<FrontierEntry>, labels: &[u32], p: usize| {
        let label = labels[p];
        for n in neighbors4(p, h, w) {
            if labels[n] == 0 {
                heap.push(FrontierEntry {
                    cost: (v[n] - v[p]).abs(),
                    pixel: n as u32,
                    label,
                });
            }
        }
    };
    for p in 0..h * w {
        if labels[p] != 0 {
            push_neighbors(&mut heap, &labels, p);
        }
    }
    while let Some(entry) = heap.pop() {
        let p = entry.pixel as usize;
        if labels[p] != 0 {
            continue;
        }
        labels[p] = entry.label;
        push_neighbors(&mut heap, &labels, p);
    }
    debug_assert!(labels.iter().all(|&l| l != 0));
    Ok(LabelMap { height: h, width: w, labels })
}

/// Normalize a fully labeled map: `(label - min) / (max - min + eps)`.
pub fn normalize_labels(labels: &LabelMap, eps: f64) -> Result<NormalizedMap> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("eps must be > 0, got {eps}")));
    }
    let unlabeled = labels.labels.iter().filter(|&&l| l == 0).count();
    if unlabeled > 0 {
        return Err(Error::IncompleteLabeling { unlabeled });
    }
    let min = *labels.labels.iter().min().expect("nonempty") as f64;
    let max = *labels.labels.iter().max().expect("nonempty") as f64;
    let denom = max - min + eps;
    let values = labels.labels.iter().map(|&l| (l as f64 - min) / denom).collect();
    Ok(NormalizedMap { height: labels.height, width: labels.width, values })
}

/// Full watershed map: grayscale (if RGB) -> Gaussian blur -> minima ->
/// propagation -> normalization. Signed-range inputs are mapped to unit
/// first.
pub fn watershed_map(img: &ImageBuffer, cfg: &WatershedConfig) -> Result<NormalizedMap> {
    cfg.validate()?;
    let unit = img.to_unit();
    let gray = if unit.channels() == 3 { to_grayscale(&unit)? } else { unit };
    let smoothed = gaussian_blur(&gray, cfg.sigma)?;
    let seeds = detect_minima(&smoothed)?;
    let labels = propagate_labels(&smoothed, &seeds)?;
    normalize_labels(&labels, cfg.eps)
}

/// Write a normalized map as a portable float text grid: a `height width`
/// header line, then one row of shortest-round-trip floats per line.
pub fn write_normalized_text(map: &NormalizedMap, out: &mut impl std::io::Write) -> Result<()> {
    writeln!(out, "{} {}", map.height, map.width)?;
    for y in 0..map.height {
        let row: Vec<String> = (0..map.width)
            .map(|x| format!("{}", map.values[y * map.width + x]))
            .collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    Ok(())
}
