//! PSNR, SSIM, and the Wang-Bovik universal quality index.
//!
//! All three operate on unit-range images; 3-channel inputs are scored per
//! channel and averaged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ImageBuffer, RangeTag};
use crate::par;

/// PSNR sentinel for identical images (avoids infinities in reports).
pub const PSNR_CAP_DB: f64 = 100.0;

/// One row of a metric table.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub uqi: f64,
}

fn check_pair(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    if a.range() != RangeTag::Unit || b.range() != RangeTag::Unit {
        return Err(Error::InvalidParameter("metrics expect unit-range images".into()));
    }
    Ok(())
}

/// 10 log10(1 / MSE) over all samples, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_window_weights() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in -r..=r {
        for x in -r..=r {
            w.push((-((y * y + x * x) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    w.iter().map(|v| v / sum).collect()
}

/// Canonical SSIM: Gaussian 11x11 window (sigma 1.5), K1 = 0.01, K2 = 0.03,
/// dynamic range 1, mean over all valid window positions, channels averaged.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::TooSmall(format!(
            "ssim needs min dimension >= {SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let weights = ssim_window_weights();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut per_channel = Vec::with_capacity(a.channels());
    for ch in 0..a.channels() {
        let pa = a.plane(ch);
        let pb = b.plane(ch);
        let row_scores = par::map_collect(oh, |y0| {
            let mut acc = 0.0;
            for x0 in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                let mut wi = 0;
                for dy in 0..SSIM_WINDOW {
                    let row = (y0 + dy) * w + x0;
                    for dx in 0..SSIM_WINDOW {
                        let wt = weights[wi];
                        wi += 1;
                        let va = pa[row + dx];
                        let vb = pb[row + dx];
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let var_a = saa - ma * ma;
                let var_b = sbb - mb * mb;
                let cov = sab - ma * mb;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
            }
            acc
        });
        per_channel.push(row_scores.iter().sum::<f64>() / (oh * ow) as f64);
    }
    Ok(per_channel.iter().sum::<f64>() / per_channel.len() as f64)
}

const UQI_WINDOW: usize = 8;

/// Wang-Bovik universal quality index over 8x8 sliding windows, mean over
/// windows and channels. Degenerate windows follow the reference split:
/// 1 when both the variance sum and the mean-square sum vanish, the
/// luminance term alone when only the variance sum vanishes.
pub fn uqi(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < UQI_WINDOW || w < UQI_WINDOW {
        return Err(Error::TooSmall(format!(
            "uqi needs min dimension >= {UQI_WINDOW}, got {h}x{w}"
        )));
    }
    let n = (UQI_WINDOW * UQI_WINDOW) as f64;
    let (oh, ow) = (h - UQI_WINDOW + 1, w - UQI_WINDOW + 1);
    let mut per_channel = Vec::with_capacity(a.channels());
    for ch in 0..a.channels() {
        let pa = a.plane(ch);
        let pb = b.plane(ch);
        let row_scores = par::map_collect(oh, |y0| {
            let mut acc = 0.0;
            for x0 in 0..ow {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..UQI_WINDOW {
                    let row = (y0 + dy) * w + x0;
                    for dx in 0..UQI_WINDOW {
                        let va = pa[row + dx];
                        let vb = pb[row + dx];
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                acc += uqi_window(sa, sb, saa, sbb, sab, n);
            }
            acc
        });
        per_channel.push(row_scores.iter().sum::<f64>() / (oh * ow) as f64);
    }
    Ok(per_channel.iter().sum::<f64>() / per_channel.len() as f64)
}

/// Quality of one window from raw sums; shared with the test oracle logic
/// only through the published formula, not through code.
fn uqi_window(sa: f64, sb: f64, saa: f64, sbb: f64, sab: f64, n: f64) -> f64 {
    let mean_sq_sum = sa * sa + sb * sb;
    let var_sum = n * (saa + sbb) - mean_sq_sum;
    let cross_means = sa * sb;
    if var_sum == 0.0 {
        if mean_sq_sum == 0.0 {
            return 1.0;
        }
        return 2.0 * cross_means / mean_sq_sum;
    }
    if mean_sq_sum == 0.0 {
        return 1.0;
    }
    let num = 4.0 * (n * sab - cross_means) * cross_means;
    num / (var_sum * mean_sq_sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{rng, uniform_image};
    use rand::Rng;

    #[test]
    fn psnr_identical_hits_cap() {
        let mut r = rng(101);
        let img = uniform_image(&mut r, 8, 8, 3);
        assert_eq!(psnr(&img, &img).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_uniform_offset_is_twenty_db() {
        let a = ImageBuffer::filled(8, 8, 1, RangeTag::Unit, 0.2);
        let b = ImageBuffer::filled(8, 8, 1, RangeTag::Unit, 0.3);
        let v = psnr(&a, &b).unwrap();
        assert!((v - 20.0).abs() < 1e-9, "{v}");
        assert_eq!(format!("{v:.2}"), "20.00");
    }

    #[test]
    fn psnr_degrades_monotonically_with_noise() {
        let mut r = rng(103);
        let base: Vec<f64> = (0..256).map(|_| 0.3 + 0.4 * r.random::<f64>()).collect();
        let noise: Vec<f64> = (0..256).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
        let a = ImageBuffer::new(16, 16, 1, RangeTag::Unit, base.clone()).unwrap();
        let mut last = f64::INFINITY;
        for eps in [0.01, 0.05, 0.1] {
            let data: Vec<f64> = base.iter().zip(&noise).map(|(v, n)| v + eps * n).collect();
            let b = ImageBuffer::new(16, 16, 1, RangeTag::Unit, data).unwrap();
            let v = psnr(&a, &b).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn ssim_identical_is_one() {
        let mut r = rng(107);
        let img = uniform_image(&mut r, 16, 16, 1);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_constants_is_the_luminance_term() {
        let a = ImageBuffer::filled(16, 16, 1, RangeTag::Unit, 0.2);
        let b = ImageBuffer::filled(16, 16, 1, RangeTag::Unit, 0.8);
        let c1 = 0.01f64 * 0.01;
        let expect = (2.0 * 0.2 * 0.8 + c1) / (0.2 * 0.2 + 0.8 * 0.8 + c1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    /// Independent SSIM oracle: two-pass (explicit deviation) statistics.
    fn ssim_oracle(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
        let weights = ssim_window_weights();
        let (h, w) = (a.height(), a.width());
        let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
        let mut chans = Vec::new();
        for ch in 0..a.channels() {
            let mut total = 0.0;
            let mut count = 0;
            for y0 in 0..=h - 11 {
                for x0 in 0..=w - 11 {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    let mut wi = 0;
                    for dy in 0..11 {
                        for dx in 0..11 {
                            ma += weights[wi] * a.get(y0 + dy, x0 + dx, ch);
                            mb += weights[wi] * b.get(y0 + dy, x0 + dx, ch);
                            wi += 1;
                        }
                    }
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    wi = 0;
                    for dy in 0..11 {
                        for dx in 0..11 {
                            let da = a.get(y0 + dy, x0 + dx, ch) - ma;
                            let db = b.get(y0 + dy, x0 + dx, ch) - mb;
                            va += weights[wi] * da * da;
                            vb += weights[wi] * db * db;
                            cov += weights[wi] * da * db;
                            wi += 1;
                        }
                    }
                    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
            chans.push(total / count as f64);
        }
        chans.iter().sum::<f64>() / chans.len() as f64
    }

    #[test]
    fn ssim_matches_independent_oracle() {
        let mut r = rng(109);
        for _ in 0..5 {
            let a = uniform_image(&mut r, 16, 16, 3);
            let b = uniform_image(&mut r, 16, 16, 3);
            assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-6);
        }
    }

    #[test]
    fn ssim_too_small_is_an_error() {
        let img = ImageBuffer::filled(10, 16, 1, RangeTag::Unit, 0.5);
        assert!(matches!(ssim(&img, &img), Err(Error::TooSmall(_))));
    }

    #[test]
    fn uqi_identical_nonconstant_is_exactly_one() {
        let mut r = rng(113);
        let img = uniform_image(&mut r, 16, 16, 1);
        assert_eq!(uqi(&img, &img).unwrap(), 1.0);
    }

    #[test]
    fn uqi_anticorrelated_is_negative() {
        let mut r = rng(127);
        let a = uniform_image(&mut r, 16, 16, 1);
        let inv: Vec<f64> = a.data().iter().map(|v| 1.0 - v).collect();
        let b = ImageBuffer::new(16, 16, 1, RangeTag::Unit, inv).unwrap();
        assert!(uqi(&a, &b).unwrap() < 0.0);
    }

    /// Naive double-loop UQI oracle straight from the mean/variance form.
    fn uqi_oracle(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
        let (h, w) = (a.height(), a.width());
        let n = 64.0;
        let mut chans = Vec::new();
        for ch in 0..a.channels() {
            let mut total = 0.0;
            let mut count = 0;
            for y0 in 0..=h - 8 {
                for x0 in 0..=w - 8 {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for dy in 0..8 {
                        for dx in 0..8 {
                            ma += a.get(y0 + dy, x0 + dx, ch);
                            mb += b.get(y0 + dy, x0 + dx, ch);
                        }
                    }
                    ma /= n;
                    mb /= n;
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    for dy in 0..8 {
                        for dx in 0..8 {
                            let da = a.get(y0 + dy, x0 + dx, ch) - ma;
                            let db = b.get(y0 + dy, x0 + dx, ch) - mb;
                            va += da * da;
                            vb += db * db;
                            cov += da * db;
                        }
                    }
                    va /= n;
                    vb /= n;
                    cov /= n;
                    let denom = (va + vb) * (ma * ma + mb * mb);
                    total += if denom != 0.0 {
                        4.0 * cov * ma * mb / denom
                    } else if va + vb == 0.0 && ma * ma + mb * mb != 0.0 {
                        2.0 * ma * mb / (ma * ma + mb * mb)
                    } else {
                        1.0
                    };
                    count += 1;
                }
            }
            chans.push(total / count as f64);
        }
        chans.iter().sum::<f64>() / chans.len() as f64
    }

    #[test]
    fn uqi_matches_naive_oracle() {
        let mut r = rng(131);
        for _ in 0..5 {
            let a = uniform_image(&mut r, 16, 16, 3);
            let b = uniform_image(&mut r, 16, 16, 3);
            assert!((uqi(&a, &b).unwrap() - uqi_oracle(&a, &b)).abs() < 1e-6);
        }
    }

    #[test]
    fn metrics_are_symmetric() {
        let mut r = rng(137);
        let a = uniform_image(&mut r, 16, 16, 3);
        let b = uniform_image(&mut r, 16, 16, 3);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!((uqi(&a, &b).unwrap() - uqi(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_and_uqi_are_bounded() {
        let mut r = rng(139);
        for _ in 0..10 {
            let a = uniform_image(&mut r, 16, 16, 1);
            let b = uniform_image(&mut r, 16, 16, 1);
            let s = ssim(&a, &b).unwrap();
            let q = uqi(&a, &b).unwrap();
            assert!((-1.0..=1.0).contains(&s), "ssim {s}");
            assert!((-1.0..=1.0).contains(&q), "uqi {q}");
        }
    }

    #[test]
    fn uqi_too_small_is_an_error() {
        let img = ImageBuffer::filled(7, 16, 1, RangeTag::Unit, 0.5);
        assert!(matches!(uqi(&img, &img), Err(Error::TooSmall(_))));
    }
}
