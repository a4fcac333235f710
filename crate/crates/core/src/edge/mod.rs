//! Classical edge detection: Gaussian smoothing, Sobel gradients,
//! direction-interpolated non-maximum suppression and hysteresis tracking,
//! plus the single-threshold Sobel/Prewitt/Roberts detectors used for
//! ablation baselines.
//!
//! Numeric conventions are deliberately rigid so results are reproducible
//! bit for bit:
//!
//! * Images enter as 8-bit intensities and are processed as raw `f64`
//!   values in `[0, 255]`.
//! * All correlations replicate the border pixel (clamp-to-edge).
//! * The Gaussian kernel samples `exp(-(x^2 + y^2) / (2 sigma^2)) /
//!   (2 pi sigma^2)` on integer offsets and is normalized to sum 1.
//! * Non-maximum suppression compares each pixel against the two points
//!   where the gradient line crosses the neighbouring pixel ring, linearly
//!   interpolated between the two nearest neighbours with
//!   `t = |gy/gx|` or `|gx/gy|`, whichever is at most 1. Ties retain the
//!   pixel; the one-pixel image border is always suppressed; pixels with
//!   zero magnitude are always suppressed.
//! * Hysteresis marks `k > high` as strong and `low <= k <= high` (with
//!   `k > 0`) as pending; pending pixels survive only if 8-connected to a
//!   strong pixel, transitively through other survivors.

use crate::{Error, Result};

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::dim(format!(
                "image pixel count {} does not match {width}x{height}",
                pixels.len()
            )));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayImage { width, height, pixels: vec![value; width * height] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Raw intensities as `f64`, no rescaling.
    pub fn to_field(&self) -> Field {
        Field {
            width: self.width,
            height: self.height,
            data: self.pixels.iter().map(|p| *p as f64).collect(),
        }
    }
}

/// A single-channel `f64` image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Field {
    pub fn zeros(width: usize, height: usize) -> Self {
        Field { width, height, data: vec![0.0; width * height] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Value at `(y, x)` with clamp-to-edge semantics for out-of-range
    /// coordinates.
    #[inline]
    pub fn at_clamped(&self, y: isize, x: isize) -> f64 {
        let yy = y.clamp(0, self.height as isize - 1) as usize;
        let xx = x.clamp(0, self.width as isize - 1) as usize;
        self.data[yy * self.width + xx]
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }
}

/// Horizontal/vertical gradients and their magnitude.
#[derive(Clone, Debug)]
pub struct GradField {
    pub width: usize,
    pub height: usize,
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
    pub mag: Vec<f64>,
}

impl GradField {
    pub fn max_magnitude(&self) -> f64 {
        self.mag.iter().copied().fold(0.0, f64::max)
    }
}

/// Binary edge image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMap {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
}

impl EdgeMap {
    pub fn empty(width: usize, height: usize) -> Self {
        EdgeMap { width, height, mask: vec![false; width * height] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Render as an 8-bit image with edges at 255.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.mask.iter().map(|m| if *m { 255 } else { 0 }).collect(),
        }
    }

    /// Interpret any nonzero pixel as an edge.
    pub fn from_gray(img: &GrayImage) -> Self {
        EdgeMap {
            width: img.width,
            height: img.height,
            mask: img.pixels.iter().map(|p| *p != 0).collect(),
        }
    }
}

/// Gaussian smoothing parameters: `sigma` and the kernel radius (kernel
/// side is `2 * radius + 1`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianSpec {
    pub sigma: f64,
    pub radius: usize,
}

impl Default for GaussianSpec {
    fn default() -> Self {
        GaussianSpec { sigma: 1.4, radius: 2 }
    }
}

impl GaussianSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::config(format!("gaussian sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Hysteresis thresholds, either absolute magnitudes or fractions of the
/// maximum gradient magnitude of the smoothed image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Thresholds {
    Absolute { low: f64, high: f64 },
    Relative { low_frac: f64, high_frac: f64 },
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds::Relative { low_frac: 0.1, high_frac: 0.2 }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = match self {
            Thresholds::Absolute { low, high } => (*low, *high),
            Thresholds::Relative { low_frac, high_frac } => (*low_frac, *high_frac),
        };
        if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || hi < lo {
            return Err(Error::config(format!(
                "thresholds must satisfy 0 <= low <= high, got low={lo}, high={hi}"
            )));
        }
        Ok(())
    }

    /// Concrete `(low, high)` for a given maximum gradient magnitude.
    pub fn resolve(&self, max_magnitude: f64) -> (f64, f64) {
        match self {
            Thresholds::Absolute { low, high } => (*low, *high),
            Thresholds::Relative { low_frac, high_frac } => {
                (low_frac * max_magnitude, high_frac * max_magnitude)
            }
        }
    }
}

/// Full parameter set for [`canny`].
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct CannyParams {
    pub gaussian: GaussianSpec,
    pub thresholds: Thresholds,
}

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        self.gaussian.validate()?;
        self.thresholds.validate()
    }
}

/// Normalized Gaussian kernel of side `2 * radius + 1`, row-major.
pub fn gaussian_kernel(spec: &GaussianSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let r = spec.radius as isize;
    let side = 2 * spec.radius + 1;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * spec.sigma * spec.sigma);
    let denom = 2.0 * spec.sigma * spec.sigma;
    let mut kernel = Vec::with_capacity(side * side);
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dx * dx + dy * dy) as f64;
            kernel.push(norm * (-d2 / denom).exp());
        }
    }
    let sum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }
    Ok(kernel)
}

/// Direct 2-D correlation with the normalized Gaussian kernel, replicating
/// the border.
pub fn gaussian_blur(img: &Field, spec: &GaussianSpec) -> Result<Field> {
    let kernel = gaussian_kernel(spec)?;
    let r = spec.radius as isize;
    let side = (2 * spec.radius + 1) as isize;
    let mut out = Field::zeros(img.width, img.height);
    for y in 0..img.height as isize {
        for x in 0..img.width as isize {
            let mut acc = 0.0;
            for dy in 0..side {
                for dx in 0..side {
                    acc += kernel[(dy * side + dx) as usize]
                        * img.at_clamped(y + dy - r, x + dx - r);
                }
            }
            out.data[(y as usize) * img.width + x as usize] = acc;
        }
    }
    Ok(out)
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]];
const PREWITT_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0]];
const PREWITT_Y: [[f64; 3]; 3] = [[1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -1.0, -1.0]];

fn correlate3(img: &Field, k: &[[f64; 3]; 3]) -> Field {
    let mut out = Field::zeros(img.width, img.height);
    for y in 0..img.height as isize {
        for x in 0..img.width as isize {
            let mut acc = 0.0;
            for (dy, row) in k.iter().enumerate() {
                for (dx, kv) in row.iter().enumerate() {
                    acc += kv * img.at_clamped(y + dy as isize - 1, x + dx as isize - 1);
                }
            }
            out.data[(y as usize) * img.width + x as usize] = acc;
        }
    }
    out
}

fn gradients_from(img: &Field, kx: &[[f64; 3]; 3], ky: &[[f64; 3]; 3]) -> GradField {
    let gx = correlate3(img, kx);
    let gy = correlate3(img, ky);
    let mag = gx
        .data
        .iter()
        .zip(&gy.data)
        .map(|(x, y)| (x * x + y * y).sqrt())
        .collect();
    GradField { width: img.width, height: img.height, gx: gx.data, gy: gy.data, mag }
}

/// Sobel gradients of a (typically smoothed) field. `gx` increases to the
/// right, `gy` increases upward (toward smaller row indices).
pub fn sobel_gradients(img: &Field) -> GradField {
    gradients_from(img, &SOBEL_X, &SOBEL_Y)
}

/// Non-maximum suppression with sub-pixel interpolation along the gradient
/// direction.
///
/// A pixel survives (keeps its magnitude) iff its magnitude is `>=` both
/// interpolated magnitudes where the gradient line crosses the neighbour
/// ring. The one-pixel border and zero-magnitude pixels are always
/// suppressed.
pub fn non_maximum_suppression(grad: &GradField) -> Field {
    let (w, h) = (grad.width, grad.height);
    let mut out = Field::zeros(w, h);
    if w < 3 || h < 3 {
        return out;
    }
    let m = |y: usize, x: usize| grad.mag[y * w + x];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let mag = m(y, x);
            if mag == 0.0 {
                continue;
            }
            let gx = grad.gx[y * w + x];
            let gy = grad.gy[y * w + x];
            let ax = gx.abs();
            let ay = gy.abs();
            let same_sign = (gx >= 0.0) == (gy >= 0.0);
            // The gradient line leaves the pixel through one of four
            // neighbour pairs; t in [0, 1] interpolates within the pair.
            let (up, down) = if ax >= ay {
                let t = ay / ax;
                if same_sign {
                    (
                        (1.0 - t) * m(y, x + 1) + t * m(y - 1, x + 1),
                        (1.0 - t) * m(y, x - 1) + t * m(y + 1, x - 1),
                    )
                } else {
                    (
                        (1.0 - t) * m(y, x + 1) + t * m(y + 1, x + 1),
                        (1.0 - t) * m(y, x - 1) + t * m(y - 1, x - 1),
                    )
                }
            } else {
                let t = ax / ay;
                if same_sign {
                    (
                        (1.0 - t) * m(y - 1, x) + t * m(y - 1, x + 1),
                        (1.0 - t) * m(y + 1, x) + t * m(y + 1, x - 1),
                    )
                } else {
                    (
                        (1.0 - t) * m(y + 1, x) + t * m(y + 1, x + 1),
                        (1.0 - t) * m(y - 1, x) + t * m(y - 1, x - 1),
                    )
                }
            };
            if mag >= up && mag >= down {
                out.data[y * w + x] = mag;
            }
        }
    }
    out
}

/// Double-threshold hysteresis on suppressed magnitudes.
///
/// `k > high` seeds an edge; `low <= k <= high` (and `k > 0`) survives only
/// if 8-connected, transitively, to a seed.
pub fn hysteresis(suppressed: &Field, low: f64, high: f64) -> Result<EdgeMap> {
    if !(low.is_finite() && high.is_finite()) || low < 0.0 || high < low {
        return Err(Error::config(format!(
            "hysteresis thresholds must satisfy 0 <= low <= high, got low={low}, high={high}"
        )));
    }
    let (w, h) = (suppressed.width, suppressed.height);
    let mut map = EdgeMap::empty(w, h);
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if suppressed.at(y, x) > high {
                map.mask[y * w + x] = true;
                stack.push((y, x));
            }
        }
    }
    let pending = |y: usize, x: usize| {
        let k = suppressed.at(y, x);
        k > 0.0 && k >= low && k <= high
    };
    while let Some((y, x)) = stack.pop() {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if dy == 0 && dx == 0 {
                    continue;
                }
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                if !map.mask[ny * w + nx] && pending(ny, nx) {
                    map.mask[ny * w + nx] = true;
                    stack.push((ny, nx));
                }
            }
        }
    }
    Ok(map)
}

/// The full pipeline: blur, Sobel gradients, non-maximum suppression,
/// hysteresis. Relative thresholds resolve against the maximum gradient
/// magnitude of the smoothed image (before suppression).
pub fn canny(img: &GrayImage, params: &CannyParams) -> Result<EdgeMap> {
    params.validate()?;
    let blurred = gaussian_blur(&img.to_field(), &params.gaussian)?;
    let grad = sobel_gradients(&blurred);
    let (low, high) = params.thresholds.resolve(grad.max_magnitude());
    let suppressed = non_maximum_suppression(&grad);
    hysteresis(&suppressed, low, high)
}

/// Gradient kernel pair for [`threshold_detector`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradOperator {
    Sobel,
    Prewitt,
    Roberts,
}

impl GradOperator {
    pub fn name(&self) -> &'static str {
        match self {
            GradOperator::Sobel => "sobel",
            GradOperator::Prewitt => "prewitt",
            GradOperator::Roberts => "roberts",
        }
    }
}

impl std::str::FromStr for GradOperator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sobel" => Ok(GradOperator::Sobel),
            "prewitt" => Ok(GradOperator::Prewitt),
            "roberts" => Ok(GradOperator::Roberts),
            other => Err(Error::config(format!(
                "unknown gradient operator '{other}' (expected sobel, prewitt or roberts)"
            ))),
        }
    }
}

/// Roberts cross gradients: 2x2 kernels `[[1,0],[0,-1]]` and
/// `[[0,1],[-1,0]]` anchored at the top-left pixel, border replicated.
pub fn roberts_gradients(img: &Field) -> GradField {
    let (w, h) = (img.width, img.height);
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    let mut mag = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let g1 = img.at_clamped(y, x) - img.at_clamped(y + 1, x + 1);
            let g2 = img.at_clamped(y, x + 1) - img.at_clamped(y + 1, x);
            let i = (y as usize) * w + x as usize;
            gx[i] = g1;
            gy[i] = g2;
            mag[i] = (g1 * g1 + g2 * g2).sqrt();
        }
    }
    GradField { width: w, height: h, gx, gy, mag }
}

/// Gradient field for any of the three operators, computed on the raw
/// (unsmoothed) image.
pub fn operator_gradients(img: &GrayImage, op: GradOperator) -> GradField {
    let field = img.to_field();
    match op {
        GradOperator::Sobel => sobel_gradients(&field),
        GradOperator::Prewitt => gradients_from(&field, &PREWITT_X, &PREWITT_Y),
        GradOperator::Roberts => roberts_gradients(&field),
    }
}

/// Single-threshold detector: a pixel is an edge iff its gradient magnitude
/// exceeds `tfrac` times the maximum magnitude over the image. A constant
/// image therefore yields an empty map.
pub fn threshold_detector(img: &GrayImage, op: GradOperator, tfrac: f64) -> Result<EdgeMap> {
    if !tfrac.is_finite() || !(0.0..=1.0).contains(&tfrac) {
        return Err(Error::config(format!("tfrac must be in [0, 1], got {tfrac}")));
    }
    let grad = operator_gradients(img, op);
    let cut = tfrac * grad.max_magnitude();
    Ok(EdgeMap {
        width: img.width,
        height: img.height,
        mask: grad.mag.iter().map(|m| *m > cut).collect(),
    })
}
