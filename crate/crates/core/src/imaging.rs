//! Image I/O, color conversion, resizing, smoothing filters, and edge maps.
//!
//! Images are row-major interleaved f64 rasters with an explicit value-range
//! convention: `Unit` for [0,1] data (file I/O, losses, metrics) and `Signed`
//! for [-1,1] data (network input/output). All local filters use reflect
//! padding (mirror without edge duplication).

use std::path::Path;

use crate::error::{Error, Result};
use crate::par;

/// Declared value range of an [`ImageBuffer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RangeTag {
    /// Samples in [0, 1].
    Unit,
    /// Samples in [-1, 1].
    Signed,
}

impl RangeTag {
    fn bounds(self) -> (f64, f64) {
        match self {
            RangeTag::Unit => (0.0, 1.0),
            RangeTag::Signed => (-1.0, 1.0),
        }
    }
}

/// Slack allowed beyond the declared range for filtered outputs.
const RANGE_SLACK: f64 = 1e-6;

/// H x W x C floating-point raster, row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    range: RangeTag,
    data: Vec<f64>,
}

impl ImageBuffer {
    /// Build a buffer, validating the shape and range invariants.
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        range: RangeTag,
        data: Vec<f64>,
    ) -> Result<Self> {
        if height < 1 || width < 1 {
            return Err(Error::InvalidParameter(format!(
                "image dimensions must be >= 1, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidChannels { expected: "1 or 3", got: channels });
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "data length {} != {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        let (lo, hi) = range.bounds();
        for &v in &data {
            if !v.is_finite() || v < lo - RANGE_SLACK || v > hi + RANGE_SLACK {
                return Err(Error::InvalidParameter(format!(
                    "sample {v} outside declared range [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { height, width, channels, range, data })
    }

    /// Build without range validation. Used for intermediates (guided-filter
    /// outputs, synthetic gradients) whose values legitimately overshoot the
    /// nominal range; shape rules still apply.
    pub(crate) fn new_unchecked(
        height: usize,
        width: usize,
        channels: usize,
        range: RangeTag,
        data: Vec<f64>,
    ) -> Self {
        assert_eq!(data.len(), height * width * channels);
        Self { height, width, channels, range, data }
    }

    /// Uniform image of value `v`.
    pub fn filled(height: usize, width: usize, channels: usize, range: RangeTag, v: f64) -> Self {
        Self::new(height, width, channels, range, vec![v; height * width * channels])
            .expect("constant image within range")
    }

    /// Build from a per-sample closure `f(y, x, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        range: RangeTag,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, range, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn range(&self) -> RangeTag {
        self.range
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx(y, x, c)]
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.channels == other.channels
    }

    /// Map to unit range; `Signed` samples go through (x+1)/2.
    pub fn to_unit(&self) -> ImageBuffer {
        match self.range {
            RangeTag::Unit => self.clone(),
            RangeTag::Signed => {
                let data = self.data.iter().map(|&v| (v + 1.0) / 2.0).collect();
                ImageBuffer {
                    height: self.height,
                    width: self.width,
                    channels: self.channels,
                    range: RangeTag::Unit,
                    data,
                }
            }
        }
    }

    /// Map to signed range; `Unit` samples go through 2x-1.
    pub fn to_signed(&self) -> ImageBuffer {
        match self.range {
            RangeTag::Signed => self.clone(),
            RangeTag::Unit => {
                let data = self.data.iter().map(|&v| 2.0 * v - 1.0).collect();
                ImageBuffer {
                    height: self.height,
                    width: self.width,
                    channels: self.channels,
                    range: RangeTag::Signed,
                    data,
                }
            }
        }
    }

    /// Extract channel `c` as a plane vector.
    pub(crate) fn plane(&self, c: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.height * self.width);
        let mut i = c;
        for _ in 0..self.height * self.width {
            out.push(self.data[i]);
            i += self.channels;
        }
        out
    }

    fn from_planes(&self, planes: Vec<Vec<f64>>, range: RangeTag) -> ImageBuffer {
        let channels = planes.len();
        let mut data = vec![0.0; self.height * self.width * channels];
        for (c, plane) in planes.iter().enumerate() {
            for (p, &v) in plane.iter().enumerate() {
                data[p * channels + c] = v;
            }
        }
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels,
            range,
            data,
        }
    }
}

/// Binary edge raster with the same dimensions as its source image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMap {
    pub height: usize,
    pub width: usize,
    /// Strictly {0, 1} per pixel.
    pub data: Vec<u8>,
}

impl EdgeMap {
    pub fn count_edges(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

/// Load an 8-bit grayscale or RGB PNG as a unit-range image (byte / 255).
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|e| Error::UnsupportedFormat(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, bytes): (usize, Vec<u8>) = match img {
        image::DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        image::DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: only 8-bit grayscale or RGB without alpha is supported, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
    ImageBuffer::new(h, w, channels, RangeTag::Unit, data)
}

/// Write an 8-bit PNG. Signed-range images are mapped to unit via (x+1)/2;
/// quantization is round(x*255) with round-half-up, clamped to [0, 255].
pub fn save_image(img: &ImageBuffer, path: &Path) -> Result<()> {
    let unit = img.to_unit();
    let bytes: Vec<u8> = unit
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let color = if img.channels() == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer_with_format(
        path,
        &bytes,
        img.width() as u32,
        img.height() as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

/// Write an [`EdgeMap`] as a {0, 255} grayscale PNG.
pub fn save_edge_map(edges: &EdgeMap, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = edges.data.iter().map(|&v| v * 255).collect();
    image::save_buffer_with_format(
        path,
        &bytes,
        edges.width as u32,
        edges.height as u32,
        image::ExtendedColorType::L8,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

// ---------------------------------------------------------------------------
// Color conversion
// ---------------------------------------------------------------------------

const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// BT.601 luma: y = 0.299 R + 0.587 G + 0.114 B.
pub fn to_grayscale(img: &ImageBuffer) -> Result<ImageBuffer> {
    if img.channels() != 3 {
        return Err(Error::InvalidChannels { expected: "3", got: img.channels() });
    }
    let mut data = Vec::with_capacity(img.height() * img.width());
    for p in 0..img.height() * img.width() {
        let base = p * 3;
        let d = img.data();
        data.push(
            LUMA_WEIGHTS[0] * d[base] + LUMA_WEIGHTS[1] * d[base + 1] + LUMA_WEIGHTS[2] * d[base + 2],
        );
    }
    ImageBuffer::new(img.height(), img.width(), 1, img.range(), data)
}

/// Distribute a grayscale cotangent back over RGB with the luma weights
/// (adjoint of [`to_grayscale`]); identity for single-channel sources.
pub fn grayscale_adjoint(cotangent: &[f64], channels: usize) -> Vec<f64> {
    if channels == 1 {
        return cotangent.to_vec();
    }
    let mut out = Vec::with_capacity(cotangent.len() * 3);
    for &g in cotangent {
        out.push(LUMA_WEIGHTS[0] * g);
        out.push(LUMA_WEIGHTS[1] * g);
        out.push(LUMA_WEIGHTS[2] * g);
    }
    out
}

// ---------------------------------------------------------------------------
// Separable filters with reflect padding
// ---------------------------------------------------------------------------

/// Mirror-without-duplication index fold: -1 -> 1, n -> n-2.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

/// One separable pass along a plane axis. The sum is anchored at the center
/// sample so exactly-constant data stays bit-exact (needed by the guided
/// filter's zero-variance contract).
fn sep_pass(plane: &[f64], h: usize, w: usize, taps: &[f64], horizontal: bool) -> Vec<f64> {
    let r = taps.len() / 2;
    let mut out = vec![0.0; plane.len()];
    par::for_each_chunk_mut(&mut out, w, |y, row| {
        for (x, o) in row.iter_mut().enumerate() {
            let center = plane[y * w + x];
            let mut acc = 0.0;
            if horizontal {
                for (t, &wt) in taps.iter().enumerate() {
                    let xi = reflect(x as isize + t as isize - r as isize, w);
                    acc += wt * (plane[y * w + xi] - center);
                }
            } else {
                for (t, &wt) in taps.iter().enumerate() {
                    let yi = reflect(y as isize + t as isize - r as isize, h);
                    acc += wt * (plane[yi * w + x] - center);
                }
            }
            *o = center + acc;
        }
    });
    out
}

/// Adjoint of one (non-anchored) separable pass: scatter with the same taps.
fn sep_pass_adjoint(cot: &[f64], h: usize, w: usize, taps: &[f64], horizontal: bool) -> Vec<f64> {
    let r = taps.len() / 2;
    let mut out = vec![0.0; cot.len()];
    for y in 0..h {
        for x in 0..w {
            let u = cot[y * w + x];
            if u == 0.0 {
                continue;
            }
            if horizontal {
                for (t, &wt) in taps.iter().enumerate() {
                    let xi = reflect(x as isize + t as isize - r as isize, w);
                    out[y * w + xi] += wt * u;
                }
            } else {
                for (t, &wt) in taps.iter().enumerate() {
                    let yi = reflect(y as isize + t as isize - r as isize, h);
                    out[yi * w + x] += wt * u;
                }
            }
        }
    }
    out
}

fn sep_filter_plane(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let rows = sep_pass(plane, h, w, taps, true);
    sep_pass(&rows, h, w, taps, false)
}

/// Adjoint of [`sep_filter_plane`]: passes applied in reverse order.
pub(crate) fn sep_filter_adjoint_plane(cot: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let cols = sep_pass_adjoint(cot, h, w, taps, false);
    sep_pass_adjoint(&cols, h, w, taps, true)
}

fn filter_per_channel(img: &ImageBuffer, taps: &[f64]) -> ImageBuffer {
    let planes = (0..img.channels())
        .map(|c| sep_filter_plane(&img.plane(c), img.height(), img.width(), taps))
        .collect();
    img.from_planes(planes, img.range())
}

/// Normalized Gaussian taps for `sigma`, radius ceil(3 sigma).
pub(crate) fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as usize;
    let mut taps: Vec<f64> = (-(r as isize)..=r as isize)
        .map(|t| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable Gaussian convolution, kernel size 2*ceil(3 sigma)+1, reflect
/// padding, kernel normalized to sum 1.
pub fn gaussian_blur(img: &ImageBuffer, sigma: f64) -> Result<ImageBuffer> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma must be > 0, got {sigma}")));
    }
    Ok(filter_per_channel(img, &gaussian_taps(sigma)))
}

/// Adjoint of [`gaussian_blur`] on a single plane (for straight-through
/// watershed gradients).
pub fn gaussian_blur_adjoint_plane(cot: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    sep_filter_adjoint_plane(cot, h, w, &gaussian_taps(sigma))
}

pub(crate) fn box_taps(radius: usize) -> Vec<f64> {
    let n = 2 * radius + 1;
    vec![1.0 / n as f64; n]
}

/// Per-pixel mean over the (2r+1)^2 window with reflect padding.
pub fn box_mean(img: &ImageBuffer, radius: usize) -> Result<ImageBuffer> {
    if radius < 1 {
        return Err(Error::InvalidParameter(format!("radius must be >= 1, got {radius}")));
    }
    Ok(filter_per_channel(img, &box_taps(radius)))
}

/// Box mean over a raw plane (guided-filter statistics path).
pub(crate) fn box_mean_plane(plane: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    sep_filter_plane(plane, h, w, &box_taps(radius))
}

/// Adjoint of [`box_mean_plane`].
pub(crate) fn box_mean_adjoint_plane(cot: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    sep_filter_adjoint_plane(cot, h, w, &box_taps(radius))
}

// ---------------------------------------------------------------------------
// Resizing
// ---------------------------------------------------------------------------

/// Bilinear resize with the pixel-center convention
/// `src = (dst + 0.5) * scale - 0.5`, clamped at the borders.
pub fn resize_bilinear(img: &ImageBuffer, out_h: usize, out_w: usize) -> Result<ImageBuffer> {
    if out_h < 1 || out_w < 1 {
        return Err(Error::InvalidParameter(format!(
            "target dimensions must be >= 1, got {out_h}x{out_w}"
        )));
    }
    if out_h == img.height() && out_w == img.width() {
        return Ok(img.clone());
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;
    let src = img.data();
    let mut data = vec![0.0; out_h * out_w * c];
    par::for_each_chunk_mut(&mut data, out_w * c, |oy, row| {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let v00 = src[(y0 * w + x0) * c + ch];
                let v01 = src[(y0 * w + x1) * c + ch];
                let v10 = src[(y1 * w + x0) * c + ch];
                let v11 = src[(y1 * w + x1) * c + ch];
                row[ox * c + ch] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                    + fy * ((1.0 - fx) * v10 + fx * v11);
            }
        }
    });
    ImageBuffer::new(out_h, out_w, c, img.range(), data)
}

// ---------------------------------------------------------------------------
// Canny edges
// ---------------------------------------------------------------------------

/// Canny pre-smoothing sigma.
const CANNY_SIGMA: f64 = 1.4;

/// Standard Canny edge detector. Thresholds are on the 0-255 gradient
/// magnitude scale; `lo < hi` is required. Stages: Gaussian pre-smooth
/// (sigma 1.4), 3x3 Sobel, non-maximum suppression, double threshold,
/// hysteresis by 8-connectivity.
pub fn canny_edges(img: &ImageBuffer, lo: f64, hi: f64) -> Result<EdgeMap> {
    if lo >= hi {
        return Err(Error::InvalidParameter(format!(
            "canny thresholds require lo < hi, got {lo} >= {hi}"
        )));
    }
    let gray = if img.channels() == 3 { to_grayscale(img)? } else { img.clone() };
    let smoothed = gaussian_blur(&gray, CANNY_SIGMA)?;
    let (h, w) = (smoothed.height(), smoothed.width());
    let plane = smoothed.plane(0);

    let (gx, gy) = sobel(&plane, h, w);
    // Magnitudes on the paper's 0-255 convention.
    let mag: Vec<f64> = gx
        .iter()
        .zip(&gy)
        .map(|(&x, &y)| (x * x + y * y).sqrt() * 255.0)
        .collect();

    let suppressed = non_maximum_suppression(&mag, &gx, &gy, h, w);

    // Double threshold + hysteresis (8-connectivity from strong pixels).
    let mut out = vec![0u8; h * w];
    let mut stack = Vec::new();
    for (i, &m) in suppressed.iter().enumerate() {
        if m >= hi {
            out[i] = 1;
            stack.push(i);
        }
    }
    while let Some(i) = stack.pop() {
        let (y, x) = (i / w, i % w);
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                if dy == 0 && dx == 0 {
                    continue;
                }
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out[j] == 0 && suppressed[j] >= lo {
                    out[j] = 1;
                    stack.push(j);
                }
            }
        }
    }
    Ok(EdgeMap { height: h, width: w, data: out })
}

/// 3x3 Sobel gradients with reflect padding.
fn sobel(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    let at = |y: isize, x: isize| plane[reflect(y, h) * w + reflect(x, w)];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let tl = at(y - 1, x - 1);
            let tc = at(y - 1, x);
            let tr = at(y - 1, x + 1);
            let ml = at(y, x - 1);
            let mr = at(y, x + 1);
            let bl = at(y + 1, x - 1);
            let bc = at(y + 1, x);
            let br = at(y + 1, x + 1);
            let i = y as usize * w + x as usize;
            gx[i] = (tr + 2.0 * mr + br) - (tl + 2.0 * ml + bl);
            gy[i] = (bl + 2.0 * bc + br) - (tl + 2.0 * tc + tr);
        }
    }
    (gx, gy)
}

/// Keep a pixel iff its magnitude is strictly greater than the row-major
/// earlier neighbor along the gradient direction and >= the later one; the
/// asymmetric tie rule yields single-pixel lines on symmetric ridges.
fn non_maximum_suppression(mag: &[f64], gx: &[f64], gy: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if mag[i] == 0.0 {
                continue;
            }
            let mut angle = gy[i].atan2(gx[i]);
            if angle < 0.0 {
                angle += std::f64::consts::PI;
            }
            let sector = ((angle / (std::f64::consts::PI / 4.0)).round() as usize) % 4;
            // Canonical offsets (dx, dy); p - d is always row-major earlier.
            let (dx, dy) = match sector {
                0 => (1isize, 0isize),
                1 => (1, 1),
                2 => (0, 1),
                _ => (-1, 1),
            };
            let fetch = |yy: isize, xx: isize| -> f64 {
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    0.0
                } else {
                    mag[yy as usize * w + xx as usize]
                }
            };
            let earlier = fetch(y as isize - dy, x as isize - dx);
            let later = fetch(y as isize + dy, x as isize + dx);
            if mag[i] > earlier && mag[i] >= later {
                out[i] = mag[i];
            }
        }
    }
    out
}

/// Result of [`edge_compare`]: both edge maps plus the number of pixels on
/// which they disagree.
#[derive(Debug)]
pub struct EdgeComparison {
    pub edges_a: EdgeMap,
    pub edges_b: EdgeMap,
    pub disagreement: usize,
}

/// Run Canny on both images with shared thresholds and count disagreements.
pub fn edge_compare(a: &ImageBuffer, b: &ImageBuffer, lo: f64, hi: f64) -> Result<EdgeComparison> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::ShapeMismatch(format!(
            "edge-compare inputs differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let edges_a = canny_edges(a, lo, hi)?;
    let edges_b = canny_edges(b, lo, hi)?;
    let disagreement = edges_a
        .data
        .iter()
        .zip(&edges_b.data)
        .filter(|(x, y)| x != y)
        .count();
    Ok(EdgeComparison { edges_a, edges_b, disagreement })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{rng, uniform_image};

    /// Dense 2-D convolution oracle with reflect padding (non-separable).
    fn dense_filter_oracle(img: &ImageBuffer, taps: &[f64]) -> ImageBuffer {
        let r = taps.len() / 2;
        let (h, w, c) = (img.height(), img.width(), img.channels());
        let mut data = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (ty, &wy) in taps.iter().enumerate() {
                        for (tx, &wx) in taps.iter().enumerate() {
                            let yy = reflect(y as isize + ty as isize - r as isize, h);
                            let xx = reflect(x as isize + tx as isize - r as isize, w);
                            acc += wy * wx * img.get(yy, xx, ch);
                        }
                    }
                    data[(y * w + x) * c + ch] = acc;
                }
            }
        }
        ImageBuffer::new(h, w, c, img.range(), data).unwrap()
    }

    fn max_abs_diff(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn grayscale_matches_per_pixel_oracle() {
        let mut r = rng(11);
        let img = uniform_image(&mut r, 3, 3, 3);
        let gray = to_grayscale(&img).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let expect = 0.299 * img.get(y, x, 0) + 0.587 * img.get(y, x, 1)
                    + 0.114 * img.get(y, x, 2);
                assert!((gray.get(y, x, 0) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn grayscale_of_gray_pixel_is_identity() {
        let img = ImageBuffer::filled(2, 2, 3, RangeTag::Unit, 0.42);
        let gray = to_grayscale(&img).unwrap();
        for &v in gray.data() {
            assert!((v - 0.42).abs() < 1e-15);
        }
        let red = ImageBuffer::from_fn(2, 2, 3, RangeTag::Unit, |_, _, c| {
            if c == 0 { 1.0 } else { 0.0 }
        })
        .unwrap();
        assert!((to_grayscale(&red).unwrap().get(0, 0, 0) - 0.299).abs() < 1e-15);
    }

    #[test]
    fn grayscale_rejects_single_channel() {
        let img = ImageBuffer::filled(2, 2, 1, RangeTag::Unit, 0.5);
        assert!(matches!(to_grayscale(&img), Err(Error::InvalidChannels { .. })));
    }

    #[test]
    fn gaussian_blur_constant_is_exact() {
        let img = ImageBuffer::filled(9, 7, 1, RangeTag::Unit, 0.3);
        let out = gaussian_blur(&img, 2.0).unwrap();
        assert_eq!(img.data(), out.data());
    }

    #[test]
    fn gaussian_blur_impulse_reproduces_kernel() {
        let mut data = vec![0.0; 31 * 31];
        data[15 * 31 + 15] = 1.0;
        let img = ImageBuffer::new(31, 31, 1, RangeTag::Unit, data).unwrap();
        let out = gaussian_blur(&img, 1.0).unwrap();
        let taps = gaussian_taps(1.0);
        let r = taps.len() / 2;
        let mut sum = 0.0;
        for y in 0..31 {
            for x in 0..31 {
                let v = out.get(y, x, 0);
                sum += v;
                let (dy, dx) = (y as isize - 15, x as isize - 15);
                let expect = if dy.unsigned_abs() <= r && dx.unsigned_abs() <= r {
                    taps[(dy + r as isize) as usize] * taps[(dx + r as isize) as usize]
                } else {
                    0.0
                };
                assert!((v - expect).abs() < 1e-12, "at ({y},{x}): {v} vs {expect}");
            }
        }
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gaussian_blur_matches_dense_oracle() {
        let mut r = rng(7);
        let img = uniform_image(&mut r, 8, 8, 1);
        let out = gaussian_blur(&img, 2.0).unwrap();
        let oracle = dense_filter_oracle(&img, &gaussian_taps(2.0));
        assert!(max_abs_diff(&out, &oracle) < 1e-6);
    }

    #[test]
    fn gaussian_blur_rejects_nonpositive_sigma() {
        let img = ImageBuffer::filled(4, 4, 1, RangeTag::Unit, 0.5);
        assert!(gaussian_blur(&img, 0.0).is_err());
        assert!(gaussian_blur(&img, -1.0).is_err());
    }

    #[test]
    fn box_mean_constant_is_exact() {
        let img = ImageBuffer::filled(5, 5, 3, RangeTag::Unit, 0.1);
        let out = box_mean(&img, 2).unwrap();
        assert_eq!(img.data(), out.data());
    }

    #[test]
    fn box_mean_center_of_column_ramp() {
        // Rows of values (0, 1, 2)/2 repeated; r=1 center mean = 0.5.
        let img = ImageBuffer::from_fn(3, 3, 1, RangeTag::Unit, |_, x, _| x as f64 / 2.0).unwrap();
        let out = box_mean(&img, 1).unwrap();
        assert!((out.get(1, 1, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn box_mean_matches_naive_oracle() {
        let mut r = rng(13);
        let img = uniform_image(&mut r, 8, 8, 1);
        let out = box_mean(&img, 2).unwrap();
        // Naive double-loop windowed mean with reflect padding.
        for y in 0..8usize {
            for x in 0..8usize {
                let mut sum = 0.0;
                for dy in -2isize..=2 {
                    for dx in -2isize..=2 {
                        sum += img.get(reflect(y as isize + dy, 8), reflect(x as isize + dx, 8), 0);
                    }
                }
                let expect = sum / 25.0;
                assert!((out.get(y, x, 0) - expect).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn box_mean_rejects_zero_radius() {
        let img = ImageBuffer::filled(4, 4, 1, RangeTag::Unit, 0.5);
        assert!(box_mean(&img, 0).is_err());
    }

    #[test]
    fn filters_are_linear() {
        let mut r = rng(3);
        let a = uniform_image(&mut r, 8, 8, 1);
        let b = uniform_image(&mut r, 8, 8, 1);
        let (alpha, beta) = (0.4, 0.6);
        let combo = ImageBuffer::from_fn(8, 8, 1, RangeTag::Unit, |y, x, c| {
            alpha * a.get(y, x, c) + beta * b.get(y, x, c)
        })
        .unwrap();
        for filt in [
            |img: &ImageBuffer| gaussian_blur(img, 1.5).unwrap(),
            |img: &ImageBuffer| box_mean(img, 2).unwrap(),
        ] {
            let lhs = filt(&combo);
            let fa = filt(&a);
            let fb = filt(&b);
            for i in 0..lhs.len() {
                let rhs = alpha * fa.data()[i] + beta * fb.data()[i];
                assert!((lhs.data()[i] - rhs).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn filters_stay_in_unit_range() {
        let mut r = rng(5);
        let img = uniform_image(&mut r, 12, 12, 1);
        for out in [gaussian_blur(&img, 2.0).unwrap(), box_mean(&img, 3).unwrap()] {
            for &v in out.data() {
                assert!((-1e-9..=1.0 + 1e-9).contains(&v));
            }
        }
    }

    #[test]
    fn sep_filter_adjoint_is_transpose() {
        // <M x, u> == <x, M^T u> for random vectors.
        let mut r = rng(17);
        let (h, w) = (7, 6);
        let x = uniform_image(&mut r, h, w, 1);
        let u = uniform_image(&mut r, h, w, 1);
        let taps = box_taps(2);
        let mx = sep_filter_plane(x.data(), h, w, &taps);
        let mtu = sep_filter_adjoint_plane(u.data(), h, w, &taps);
        let lhs: f64 = mx.iter().zip(u.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(&mtu).map(|(a, b)| a * b).sum();
        // The anchored forward differs from the ideal operator by ~1e-16.
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn resize_identity_is_bitwise() {
        let mut r = rng(23);
        let img = uniform_image(&mut r, 6, 5, 3);
        let out = resize_bilinear(&img, 6, 5).unwrap();
        assert_eq!(img.data(), out.data());
    }

    #[test]
    fn resize_halves_512_to_256() {
        let img = ImageBuffer::filled(512, 512, 1, RangeTag::Unit, 0.25);
        let out = resize_bilinear(&img, 256, 256).unwrap();
        assert_eq!((out.height(), out.width()), (256, 256));
    }

    #[test]
    fn resize_checkerboard_matches_closed_form() {
        // 2x2 checkerboard (0,1;1,0) upsampled to 4x4; evaluate the bilinear
        // formula by hand at each target center: src = (dst+0.5)*0.5 - 0.5.
        let img = ImageBuffer::new(2, 2, 1, RangeTag::Unit, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = resize_bilinear(&img, 4, 4).unwrap();
        let src = |d: usize| ((d as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
        for y in 0..4 {
            for x in 0..4 {
                let (sy, sx) = (src(y), src(x));
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(1), (x0 + 1).min(1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let v = |yy: usize, xx: usize| img.get(yy, xx, 0);
                let expect = (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1))
                    + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1));
                assert!((out.get(y, x, 0) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn canny_constant_image_has_no_edges() {
        let img = ImageBuffer::filled(16, 16, 1, RangeTag::Unit, 0.7);
        let edges = canny_edges(&img, 100.0, 200.0).unwrap();
        assert_eq!(edges.count_edges(), 0);
    }

    #[test]
    fn canny_step_edge_is_single_column() {
        let img = ImageBuffer::from_fn(16, 16, 1, RangeTag::Unit, |_, x, _| {
            if x < 8 { 0.0 } else { 1.0 }
        })
        .unwrap();
        let edges = canny_edges(&img, 100.0, 200.0).unwrap();

        // Stage-by-stage oracle: the NMS survivor column is the one whose
        // smoothed-Sobel magnitude is a row-wise maximum under the same
        // earlier/later tie rule; recompute it densely here.
        let smoothed = gaussian_blur(&img, 1.4).unwrap();
        let plane = smoothed.plane(0);
        let (gx, gy) = sobel(&plane, 16, 16);
        let mag: Vec<f64> = gx
            .iter()
            .zip(&gy)
            .map(|(&x, &y)| (x * x + y * y).sqrt() * 255.0)
            .collect();
        let row = 8usize;
        let mut expect_col = None;
        for x in 0..16 {
            let m = mag[row * 16 + x];
            let earlier = if x == 0 { 0.0 } else { mag[row * 16 + x - 1] };
            let later = if x == 15 { 0.0 } else { mag[row * 16 + x + 1] };
            if m > earlier && m >= later && m >= 200.0 {
                expect_col = Some(x);
            }
        }
        let expect_col = expect_col.expect("oracle found an edge column");

        for y in 0..16 {
            for x in 0..16 {
                let expect = u8::from(x == expect_col);
                assert_eq!(
                    edges.data[y * 16 + x],
                    expect,
                    "pixel ({y},{x}); expected single column {expect_col}"
                );
            }
        }
    }

    #[test]
    fn canny_rejects_bad_thresholds() {
        let img = ImageBuffer::filled(8, 8, 1, RangeTag::Unit, 0.5);
        assert!(canny_edges(&img, 200.0, 100.0).is_err());
        assert!(canny_edges(&img, 100.0, 100.0).is_err());
    }

    #[test]
    fn save_load_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng(31);
        let img = uniform_image(&mut r, 9, 11, 3);
        let path = dir.path().join("round.png");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert!(img.same_shape(&back));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn save_quantization_rules() {
        let dir = tempfile::tempdir().unwrap();
        let half = ImageBuffer::filled(4, 4, 1, RangeTag::Unit, 0.5);
        let path = dir.path().join("half.png");
        save_image(&half, &path).unwrap();
        let back = load_image(&path).unwrap();
        // round(127.5) = 128 with round-half-up.
        for &v in back.data() {
            assert!((v - 128.0 / 255.0).abs() < 1e-12);
        }
        let neg = ImageBuffer::filled(4, 4, 1, RangeTag::Signed, -1.0);
        save_image(&neg, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert!(back.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn save_load_save_is_idempotent_at_byte_level() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng(37);
        let img = uniform_image(&mut r, 8, 8, 3);
        let p1 = dir.path().join("a.png");
        let p2 = dir.path().join("b.png");
        let p3 = dir.path().join("c.png");
        save_image(&img, &p1).unwrap();
        save_image(&load_image(&p1).unwrap(), &p2).unwrap();
        save_image(&load_image(&p2).unwrap(), &p3).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        let b3 = std::fs::read(&p3).unwrap();
        assert_eq!(b2, b3);
    }

    #[test]
    fn load_black_and_white() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bw.png");
        save_image(&ImageBuffer::filled(4, 4, 1, RangeTag::Unit, 0.0), &path).unwrap();
        assert!(load_image(&path).unwrap().data().iter().all(|&v| v == 0.0));
        save_image(&ImageBuffer::filled(4, 4, 1, RangeTag::Unit, 1.0), &path).unwrap();
        assert!(load_image(&path).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn load_missing_file_is_not_found() {
        let err = load_image(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(matches!(err, Error::NotFound(_)));
    }

    #[test]
    fn load_rejects_alpha() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgba.png");
        let rgba = image::RgbaImage::from_pixel(4, 4, image::Rgba([1, 2, 3, 4]));
        rgba.save(&path).unwrap();
        assert!(matches!(load_image(&path), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn edge_compare_counts_disagreements() {
        let flat = ImageBuffer::filled(16, 16, 1, RangeTag::Unit, 0.4);
        let step = ImageBuffer::from_fn(16, 16, 1, RangeTag::Unit, |_, x, _| {
            if x < 8 { 0.0 } else { 1.0 }
        })
        .unwrap();
        let cmp = edge_compare(&flat, &step, 100.0, 200.0).unwrap();
        assert_eq!(cmp.edges_a.count_edges(), 0);
        assert!(cmp.disagreement > 0);
        assert_eq!(cmp.disagreement, cmp.edges_b.count_edges());
    }
}
