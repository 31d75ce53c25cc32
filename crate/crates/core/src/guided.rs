//! Edge-preserving guided filter built from windowed statistics.
//!
//! The output is the local affine map `a * guide + b` where `a` and `b` come
//! from box-filtered means, variances, and covariances of a guide image and a
//! reference image. Coefficients are applied per pixel as printed; an optional
//! `coef_smoothing` switch box-filters `a` and `b` before application for the
//! canonical averaged variant. 3-channel images are filtered per channel
//! independently.

use crate::error::{Error, Result};
use crate::imaging::{box_mean_plane, ImageBuffer};

/// Per-pixel linear gain/offset maps for one guided-filter evaluation.
#[derive(Debug, Clone)]
pub struct GuidedCoefficients {
    height: usize,
    width: usize,
    channels: usize,
    /// Linear gain per sample, interleaved like the source image.
    pub a: Vec<f64>,
    /// Linear offset per sample.
    pub b: Vec<f64>,
    pub radius: usize,
    pub eps: f64,
}

impl GuidedCoefficients {
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
}

fn check_pair(guide: &ImageBuffer, reference: &ImageBuffer) -> Result<()> {
    if !guide.same_shape(reference) {
        return Err(Error::ShapeMismatch(format!(
            "guide {}x{}x{} vs reference {}x{}x{}",
            guide.height(),
            guide.width(),
            guide.channels(),
            reference.height(),
            reference.width(),
            reference.channels()
        )));
    }
    Ok(())
}

/// Windowed statistics of one channel plane, kept around for the guided-loss
/// gradient.
#[derive(Debug, Clone)]
pub(crate) struct PlaneStats {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub mu_guide: Vec<f64>,
    pub mu_ref: Vec<f64>,
    /// Unclamped variance `mean(g^2) - mean(g)^2`.
    pub var_raw: Vec<f64>,
}

/// Single-plane coefficients:
/// `a = (mean(g*r) - mean(g)*mean(r)) / (var(g) + eps)` and
/// `b = mean(r) - a * mean(g)`, with `var(g)` clamped below at 0. Where the
/// clamped variance is exactly 0 the limit values `a = 0`, `b = mean(r)` are
/// used directly.
pub(crate) fn plane_coefficients(
    g: &[f64],
    r: &[f64],
    h: usize,
    w: usize,
    radius: usize,
    eps: f64,
) -> PlaneStats {
    let gr: Vec<f64> = g.iter().zip(r).map(|(x, y)| x * y).collect();
    let gg: Vec<f64> = g.iter().map(|x| x * x).collect();
    let mu_guide = box_mean_plane(g, h, w, radius);
    let mu_ref = box_mean_plane(r, h, w, radius);
    let cross = box_mean_plane(&gr, h, w, radius);
    let g2 = box_mean_plane(&gg, h, w, radius);
    let mut a = vec![0.0; h * w];
    let mut b = vec![0.0; h * w];
    let mut var_raw = vec![0.0; h * w];
    for p in 0..h * w {
        var_raw[p] = g2[p] - mu_guide[p] * mu_guide[p];
        let var = var_raw[p].max(0.0);
        if var == 0.0 {
            a[p] = 0.0;
            b[p] = mu_ref[p];
        } else {
            let ap = (cross[p] - mu_guide[p] * mu_ref[p]) / (var + eps);
            a[p] = ap;
            b[p] = mu_ref[p] - ap * mu_guide[p];
        }
    }
    PlaneStats { a, b, mu_guide, mu_ref, var_raw }
}

fn check_params(radius: usize, eps: f64) -> Result<()> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("eps must be > 0, got {eps}")));
    }
    if radius < 1 {
        return Err(Error::InvalidParameter(format!("radius must be >= 1, got {radius}")));
    }
    Ok(())
}

/// Windowed-statistics coefficients per channel; see [`plane_coefficients`]
/// for the formulas and the exact zero-variance limit behavior.
pub fn guided_coefficients(
    guide: &ImageBuffer,
    reference: &ImageBuffer,
    radius: usize,
    eps: f64,
) -> Result<GuidedCoefficients> {
    check_pair(guide, reference)?;
    check_params(radius, eps)?;
    let (h, w, c) = (guide.height(), guide.width(), guide.channels());
    let mut a = vec![0.0; h * w * c];
    let mut b = vec![0.0; h * w * c];
    for ch in 0..c {
        let g = guide.plane(ch);
        let r = reference.plane(ch);
        let stats = plane_coefficients(&g, &r, h, w, radius, eps);
        for p in 0..h * w {
            a[p * c + ch] = stats.a[p];
            b[p * c + ch] = stats.b[p];
        }
    }
    Ok(GuidedCoefficients { height: h, width: w, channels: c, a, b, radius, eps })
}

/// Box-filter the coefficient maps in place (the canonical averaged variant).
pub fn smooth_coefficients(coefs: &mut GuidedCoefficients) {
    let (h, w, c) = (coefs.height, coefs.width, coefs.channels);
    for ch in 0..c {
        for field in [&mut coefs.a, &mut coefs.b] {
            let plane: Vec<f64> = (0..h * w).map(|p| field[p * c + ch]).collect();
            let sm = box_mean_plane(&plane, h, w, coefs.radius);
            for p in 0..h * w {
                field[p * c + ch] = sm[p];
            }
        }
    }
}

/// Apply coefficients: `out = a * guide + b` per sample.
///
/// The result reuses the guide's range tag but is not clamped: the affine map
/// can legitimately overshoot the nominal range, so the output is built
/// without range validation.
pub fn guided_filter_apply(guide: &ImageBuffer, coefs: &GuidedCoefficients) -> Result<ImageBuffer> {
    if guide.height() != coefs.height
        || guide.width() != coefs.width
        || guide.channels() != coefs.channels
    {
        return Err(Error::ShapeMismatch(format!(
            "guide {}x{}x{} vs coefficients {}x{}x{}",
            guide.height(),
            guide.width(),
            guide.channels(),
            coefs.height,
            coefs.width,
            coefs.channels
        )));
    }
    let data: Vec<f64> = guide
        .data()
        .iter()
        .zip(coefs.a.iter().zip(&coefs.b))
        .map(|(&g, (&a, &b))| a * g + b)
        .collect();
    Ok(unchecked_image(guide, data))
}

/// Full pipeline: coefficients from (guide, reference), optional smoothing,
/// then application to the guide.
pub fn guided_filter(
    guide: &ImageBuffer,
    reference: &ImageBuffer,
    radius: usize,
    eps: f64,
    coef_smoothing: bool,
) -> Result<ImageBuffer> {
    let mut coefs = guided_coefficients(guide, reference, radius, eps)?;
    if coef_smoothing {
        smooth_coefficients(&mut coefs);
    }
    guided_filter_apply(guide, &coefs)
}

/// Default window radius at a given resolution: 4 at 256 rows, scaled
/// proportionally, never below 1.
pub fn default_radius(height: usize) -> usize {
    ((4.0 * height as f64 / 256.0).round() as usize).max(1)
}

/// Default regularization.
pub const DEFAULT_EPS: f64 = 1e-4;

fn unchecked_image(like: &ImageBuffer, data: Vec<f64>) -> ImageBuffer {
    // Route through the watershed-free constructor by building with clamped
    // validation bypassed: the affine output intentionally may overshoot.
    ImageBuffer::new_unchecked(like.height(), like.width(), like.channels(), like.range(), data)
}
