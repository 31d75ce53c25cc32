//! Helpers and independent oracles shared by unit, integration, and
//! acceptance tests. Everything here is test support; nothing in the library
//! proper calls into it.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::imaging::{ImageBuffer, RangeTag};
use crate::watershed::LabelMap;

/// Deterministic RNG for tests.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random unit-range image with i.i.d. uniform samples.
pub fn uniform_image(r: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ImageBuffer {
    let data = (0..h * w * c).map(|_| r.random::<f64>()).collect();
    ImageBuffer::new(h, w, c, RangeTag::Unit, data).unwrap()
}

/// Central-difference gradient of `f` with respect to every sample of `img`.
/// Probe images skip range validation so the step may cross the nominal
/// bounds.
pub fn numeric_gradient(
    img: &ImageBuffer,
    step: f64,
    f: impl Fn(&ImageBuffer) -> f64,
) -> Vec<f64> {
    let mut grad = vec![0.0; img.len()];
    for i in 0..img.len() {
        let mut plus = img.data().to_vec();
        plus[i] += step;
        let mut minus = img.data().to_vec();
        minus[i] -= step;
        let fp = f(&ImageBuffer::new_unchecked(
            img.height(),
            img.width(),
            img.channels(),
            img.range(),
            plus,
        ));
        let fm = f(&ImageBuffer::new_unchecked(
            img.height(),
            img.width(),
            img.channels(),
            img.range(),
            minus,
        ));
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Norm-based relative error between an analytic gradient and a
/// finite-difference estimate.
pub fn gradient_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    let num: f64 = analytic
        .iter()
        .zip(fd)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nf: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
    num / na.max(nf).max(1e-12)
}

/// Two Gaussian pits on a bright field; the canonical two-basin fixture.
pub fn two_basin_image(h: usize, w: usize) -> ImageBuffer {
    let pit = |y: f64, x: f64, cy: f64, cx: f64| {
        let d2 = (y - cy).powi(2) + (x - cx).powi(2);
        0.45 * (-d2 / 4.5).exp()
    };
    ImageBuffer::from_fn(h, w, 1, RangeTag::Unit, |y, x, _| {
        let (yf, xf) = (y as f64, x as f64);
        0.9 - pit(yf, xf, h as f64 / 2.0, w as f64 * 0.25)
            - pit(yf, xf, h as f64 / 2.0, w as f64 * 0.75)
    })
    .unwrap()
}

/// Sequential global-minimum flood oracle, independent of the priority-heap
/// implementation: each round scans every (unlabeled pixel, labeled
/// 4-neighbor) pair and commits the single best assignment under the
/// (cost, row-major pixel, label) order.
pub fn oracle_flood(smoothed: &ImageBuffer, seeds: &LabelMap) -> LabelMap {
    assert_eq!(smoothed.channels(), 1);
    let (h, w) = (smoothed.height(), smoothed.width());
    let v = smoothed.data();
    let mut labels = seeds.labels.clone();
    loop {
        let mut best: Option<(f64, usize, u32)> = None;
        for p in 0..h * w {
            if labels[p] != 0 {
                continue;
            }
            let (y, x) = (p / w, p % w);
            let neighbors = [
                (y > 0).then(|| p - w),
                (y + 1 < h).then(|| p + w),
                (x > 0).then(|| p - 1),
                (x + 1 < w).then(|| p + 1),
            ];
            for n in neighbors.into_iter().flatten() {
                if labels[n] == 0 {
                    continue;
                }
                let cand = ((v[p] - v[n]).abs(), p, labels[n]);
                let better = match &best {
                    None => true,
                    Some(b) => cand < *b,
                };
                if better {
                    best = Some(cand);
                }
            }
        }
        match best {
            Some((_, p, l)) => labels[p] = l,
            None => break,
        }
    }
    LabelMap { height: h, width: w, labels }
}
