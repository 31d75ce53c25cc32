//! The composite training objective: pixel L2, guided-filter L1, and
//! watershed label-map terms, plus their weighted total.
//!
//! Every term returns its analytic gradient with respect to the prediction.
//! The watershed term is piecewise constant in the prediction, so its default
//! gradient is the zero field; an optional straight-through mode treats the
//! normalized label map as if it were the Gaussian-smoothed intensity and
//! passes the map gradient through that stage unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guided::{plane_coefficients, PlaneStats};
use crate::imaging::{
    box_mean_adjoint_plane, box_mean_plane, gaussian_blur_adjoint_plane, grayscale_adjoint,
    ImageBuffer, RangeTag,
};
use crate::watershed::{watershed_map, WatershedConfig};

/// Weights of the three loss terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub lambda_l2: f64,
    pub lambda_guided: f64,
    pub lambda_water: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_l2: 5.0, lambda_guided: 1.0, lambda_water: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_l2 < 0.0 || self.lambda_guided < 0.0 || self.lambda_water < 0.0 {
            return Err(Error::InvalidParameter("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-term loss values and their weighted total.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossReport {
    pub l2: f64,
    pub guided: f64,
    pub water: f64,
    pub total: f64,
}

/// dLoss/dPrediction, same shape as the prediction image.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl GradientField {
    pub fn zeros_like(img: &ImageBuffer) -> Self {
        Self {
            height: img.height(),
            width: img.width(),
            channels: img.channels(),
            data: vec![0.0; img.len()],
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &GradientField) {
        for (o, &g) in self.data.iter_mut().zip(&other.data) {
            *o += alpha * g;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Gradient behavior of the watershed term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WaterGradMode {
    /// Zero field: the label map is piecewise constant in the prediction.
    #[default]
    None,
    /// Identity Jacobian through the discrete stage, as if the normalized map
    /// were the smoothed grayscale intensity.
    StraightThrough,
}

/// Distance between normalized label maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WaterMetric {
    L1,
    #[default]
    L2,
}

/// Everything `total_loss` needs besides the two images.
#[derive(Debug, Clone)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub guided_radius: usize,
    pub guided_eps: f64,
    pub coef_smoothing: bool,
    pub watershed: WatershedConfig,
    pub water_grad: WaterGradMode,
    pub water_metric: WaterMetric,
}

impl LossOptions {
    /// Defaults with the guided radius scaled for an image of `height` rows.
    pub fn for_height(height: usize) -> Self {
        Self {
            weights: LossWeights::default(),
            guided_radius: crate::guided::default_radius(height),
            guided_eps: crate::guided::DEFAULT_EPS,
            coef_smoothing: false,
            watershed: WatershedConfig::default(),
            water_grad: WaterGradMode::default(),
            water_metric: WaterMetric::default(),
        }
    }
}

fn check_shapes(pred: &ImageBuffer, gt: &ImageBuffer) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::ShapeMismatch(format!(
            "pred {}x{}x{} vs gt {}x{}x{}",
            pred.height(),
            pred.width(),
            pred.channels(),
            gt.height(),
            gt.width(),
            gt.channels()
        )));
    }
    Ok(())
}

/// Mean squared error over all samples and its gradient `2 (pred - gt) / N`.
pub fn l2_loss(pred: &ImageBuffer, gt: &ImageBuffer) -> Result<(f64, GradientField)> {
    check_shapes(pred, gt)?;
    if pred.range() != gt.range() {
        return Err(Error::ShapeMismatch("range tags differ".into()));
    }
    let n = pred.len() as f64;
    let mut grad = GradientField::zeros_like(pred);
    let mut loss = 0.0;
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        let d = p - g;
        loss += d * d;
        grad.data[i] = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

/// Mean absolute difference between the two guided-filter branches and its
/// exact gradient with respect to the prediction.
///
/// Branch `t` uses `I_t` as the guide and the ground truth as the statistics
/// reference; only the prediction branch depends on the prediction, through
/// the guide samples, its windowed mean, its variance, and the cross term.
pub fn guided_loss(
    pred: &ImageBuffer,
    gt: &ImageBuffer,
    radius: usize,
    eps: f64,
    coef_smoothing: bool,
) -> Result<(f64, GradientField)> {
    check_shapes(pred, gt)?;
    if pred.range() != RangeTag::Unit || gt.range() != RangeTag::Unit {
        return Err(Error::InvalidParameter("guided_loss expects unit-range images".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("eps must be > 0, got {eps}")));
    }
    if radius < 1 {
        return Err(Error::InvalidParameter(format!("radius must be >= 1, got {radius}")));
    }
    let (h, w, c) = (pred.height(), pred.width(), pred.channels());
    let npix = h * w;
    let n = (npix * c) as f64;
    let mut loss = 0.0;
    let mut grad = GradientField::zeros_like(pred);

    for ch in 0..c {
        let p = pred.plane(ch);
        let g = gt.plane(ch);

        let gt_stats = plane_coefficients(&g, &g, h, w, radius, eps);
        let pr_stats = plane_coefficients(&p, &g, h, w, radius, eps);

        let apply = |stats: &PlaneStats, guide: &[f64]| -> Vec<f64> {
            if coef_smoothing {
                let sa = box_mean_plane(&stats.a, h, w, radius);
                let sb = box_mean_plane(&stats.b, h, w, radius);
                (0..npix).map(|i| sa[i] * guide[i] + sb[i]).collect()
            } else {
                (0..npix).map(|i| stats.a[i] * guide[i] + stats.b[i]).collect()
            }
        };
        let out_gt = apply(&gt_stats, &g);
        let out_pr = apply(&pr_stats, &p);

        // dL/d(out_pr): subgradient 0 where the residual is exactly 0.
        let mut s = vec![0.0; npix];
        for i in 0..npix {
            let d = out_gt[i] - out_pr[i];
            loss += d.abs();
            s[i] = if d == 0.0 { 0.0 } else { -d.signum() / n };
        }

        // Backprop through out = a.p + b (optionally through the coefficient
        // smoothing pass first).
        let (mut da, db): (Vec<f64>, Vec<f64>) = if coef_smoothing {
            let sa = box_mean_plane(&pr_stats.a, h, w, radius);
            for i in 0..npix {
                grad_plane_axpy(&mut grad, ch, c, i, s[i] * sa[i]);
            }
            let sp: Vec<f64> = (0..npix).map(|i| s[i] * p[i]).collect();
            (
                box_mean_adjoint_plane(&sp, h, w, radius),
                box_mean_adjoint_plane(&s, h, w, radius),
            )
        } else {
            for i in 0..npix {
                grad_plane_axpy(&mut grad, ch, c, i, s[i] * pr_stats.a[i]);
            }
            let sp: Vec<f64> = (0..npix).map(|i| s[i] * p[i]).collect();
            (sp, s.clone())
        };

        // b = mu_gt - a mu_p  =>  fold db into da and mu_p.
        let mut dmu_p = vec![0.0; npix];
        for i in 0..npix {
            da[i] -= db[i] * pr_stats.mu_guide[i];
            dmu_p[i] -= db[i] * pr_stats.a[i];
        }

        // a = cov / (var + eps) on non-degenerate pixels only.
        let mut dcov = vec![0.0; npix];
        let mut dvar = vec![0.0; npix];
        for i in 0..npix {
            if pr_stats.var_raw[i] > 0.0 {
                let v = pr_stats.var_raw[i] + eps;
                dcov[i] = da[i] / v;
                dvar[i] = -da[i] * pr_stats.a[i] / v;
            }
        }

        // cov = M(p g) - mu_p mu_gt ; var = M(p^2) - mu_p^2.
        for i in 0..npix {
            dmu_p[i] -= dcov[i] * pr_stats.mu_ref[i];
            dmu_p[i] -= 2.0 * dvar[i] * pr_stats.mu_guide[i];
        }
        let mt_cov = box_mean_adjoint_plane(&dcov, h, w, radius);
        let mt_var = box_mean_adjoint_plane(&dvar, h, w, radius);
        let mt_mu = box_mean_adjoint_plane(&dmu_p, h, w, radius);
        for i in 0..npix {
            grad_plane_axpy(
                &mut grad,
                ch,
                c,
                i,
                g[i] * mt_cov[i] + 2.0 * p[i] * mt_var[i] + mt_mu[i],
            );
        }
    }
    Ok((loss / n, grad))
}

#[inline]
fn grad_plane_axpy(grad: &mut GradientField, ch: usize, channels: usize, pixel: usize, v: f64) {
    grad.data[pixel * channels + ch] += v;
}

/// Distance between the normalized watershed maps of prediction and ground
/// truth. Signed-range inputs are mapped to unit internally; the returned
/// gradient is with respect to the prediction as given.
pub fn water_loss(
    pred: &ImageBuffer,
    gt: &ImageBuffer,
    cfg: &WatershedConfig,
    metric: WaterMetric,
    grad_mode: WaterGradMode,
) -> Result<(f64, GradientField)> {
    check_shapes(pred, gt)?;
    let map_pred = watershed_map(pred, cfg)?;
    let map_gt = watershed_map(gt, cfg)?;
    let npix = (map_pred.height * map_pred.width) as f64;
    let mut loss = 0.0;
    let mut dmap = vec![0.0; map_pred.values.len()];
    for (i, (&mp, &mg)) in map_pred.values.iter().zip(&map_gt.values).enumerate() {
        let d = mp - mg;
        match metric {
            WaterMetric::L2 => {
                loss += d * d;
                dmap[i] = 2.0 * d / npix;
            }
            WaterMetric::L1 => {
                loss += d.abs();
                dmap[i] = if d == 0.0 { 0.0 } else { d.signum() / npix };
            }
        }
    }
    loss /= npix;

    let grad = match grad_mode {
        WaterGradMode::None => GradientField::zeros_like(pred),
        WaterGradMode::StraightThrough => {
            // Treat the map as blur(grayscale(unit(pred))) and chain through
            // those stages only.
            let through_blur =
                gaussian_blur_adjoint_plane(&dmap, map_pred.height, map_pred.width, cfg.sigma);
            let mut data = grayscale_adjoint(&through_blur, pred.channels());
            if pred.range() == RangeTag::Signed {
                for v in &mut data {
                    *v *= 0.5;
                }
            }
            GradientField {
                height: pred.height(),
                width: pred.width(),
                channels: pred.channels(),
                data,
            }
        }
    };
    Ok((loss, grad))
}

/// Weighted sum of the three terms and its gradient. Both images must share
/// shape and range tag; all terms are evaluated in unit range, and the
/// gradient is chained back through the (x+1)/2 mapping for signed inputs.
pub fn total_loss(
    pred: &ImageBuffer,
    gt: &ImageBuffer,
    opts: &LossOptions,
) -> Result<(LossReport, GradientField)> {
    check_shapes(pred, gt)?;
    if pred.range() != gt.range() {
        return Err(Error::ShapeMismatch("range tags differ".into()));
    }
    opts.weights.validate()?;
    let up = pred.to_unit();
    let ug = gt.to_unit();

    let (l2, g_l2) = l2_loss(&up, &ug)?;
    let (guided, g_gu) =
        guided_loss(&up, &ug, opts.guided_radius, opts.guided_eps, opts.coef_smoothing)?;
    let (water, g_wa) = water_loss(&up, &ug, &opts.watershed, opts.water_metric, opts.water_grad)?;

    let w = &opts.weights;
    let total = w.lambda_l2 * l2 + w.lambda_guided * guided + w.lambda_water * water;
    let mut grad = GradientField::zeros_like(pred);
    grad.axpy(w.lambda_l2, &g_l2);
    grad.axpy(w.lambda_guided, &g_gu);
    grad.axpy(w.lambda_water, &g_wa);
    if pred.range() == RangeTag::Signed {
        grad.scale(0.5);
    }
    if !total.is_finite() || !grad.is_finite() {
        return Err(Error::Numerical("non-finite loss or gradient".into()));
    }
    Ok((LossReport { l2, guided, water, total }, grad))
}
