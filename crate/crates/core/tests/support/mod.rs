//! Shared helpers for the integration suites: an independent per-pixel
//! reimplementation of the edge pipeline, brute-force confusion counts,
//! a small gallery of structured test images, and a ulp-distance helper.
//!
//! Everything here is written as plain nested loops over explicit formulas,
//! deliberately sharing no code with the library, so the two can check each
//! other.
#![allow(dead_code)]

use cdse_core::edge::{CannyParams, GrayImage, Thresholds};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A single-channel `f64` plane with clamp-to-edge indexing.
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn from_gray(img: &GrayImage) -> Plane {
        Plane {
            width: img.width,
            height: img.height,
            data: img.pixels.iter().map(|p| *p as f64).collect(),
        }
    }

    fn at(&self, y: isize, x: isize) -> f64 {
        let yy = y.clamp(0, self.height as isize - 1) as usize;
        let xx = x.clamp(0, self.width as isize - 1) as usize;
        self.data[yy * self.width + xx]
    }
}

/// Gaussian weights on integer offsets, normalized to sum 1, row-major over
/// `dy` then `dx` in `-radius..=radius`.
pub fn brute_gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut weights = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dx * dx + dy * dy) as f64;
            let w = (-d2 / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma);
            weights.push(w);
        }
    }
    let sum: f64 = weights.iter().sum();
    weights.iter().map(|w| w / sum).collect()
}

pub fn brute_blur(img: &Plane, sigma: f64, radius: usize) -> Plane {
    let kernel = brute_gaussian_kernel(sigma, radius);
    let r = radius as isize;
    let side = 2 * r + 1;
    let mut out = Vec::with_capacity(img.data.len());
    for y in 0..img.height as isize {
        for x in 0..img.width as isize {
            let mut acc = 0.0;
            for ky in 0..side {
                for kx in 0..side {
                    acc += kernel[(ky * side + kx) as usize] * img.at(y + ky - r, x + kx - r);
                }
            }
            out.push(acc);
        }
    }
    Plane { width: img.width, height: img.height, data: out }
}

/// Gradients of `img` under a 3x3 kernel pair, plus the Euclidean magnitude.
/// `gy` follows the upward-positive convention (row 0 of the kernel weighs
/// the row above).
pub struct BruteGrad {
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
    pub mag: Vec<f64>,
}

fn brute_correlate3(img: &Plane, k: [[f64; 3]; 3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(img.data.len());
    for y in 0..img.height as isize {
        for x in 0..img.width as isize {
            let mut acc = 0.0;
            for dy in 0..3isize {
                for dx in 0..3isize {
                    acc += k[dy as usize][dx as usize] * img.at(y + dy - 1, x + dx - 1);
                }
            }
            out.push(acc);
        }
    }
    out
}

pub fn brute_sobel(img: &Plane) -> BruteGrad {
    let gx = brute_correlate3(img, [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]);
    let gy = brute_correlate3(img, [[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]]);
    let mag = gx.iter().zip(&gy).map(|(x, y)| (x * x + y * y).sqrt()).collect();
    BruteGrad { gx, gy, mag }
}

/// Non-maximum suppression: each interior pixel is compared against the two
/// magnitudes interpolated where the gradient line crosses the neighbour
/// ring; it keeps its magnitude only if it is `>=` both. Border and
/// zero-magnitude pixels are always suppressed.
pub fn brute_nms(grad: &BruteGrad, width: usize, height: usize) -> Vec<f64> {
    let mut out = vec![0.0; width * height];
    if width < 3 || height < 3 {
        return out;
    }
    let m = |y: isize, x: isize| grad.mag[y as usize * width + x as usize];
    for y in 1..height as isize - 1 {
        for x in 1..width as isize - 1 {
            let mag = m(y, x);
            if mag == 0.0 {
                continue;
            }
            let gx = grad.gx[y as usize * width + x as usize];
            let gy = grad.gy[y as usize * width + x as usize];
            // Walk one unit along the gradient: +gx steps right, +gy steps
            // up (smaller y). Normalize so the dominant component is 1 and
            // interpolate between the two pixels the line passes between.
            let (ahead, behind) = if gx.abs() >= gy.abs() {
                let t = (gy / gx).abs();
                let dy = if (gx >= 0.0) == (gy >= 0.0) { -1 } else { 1 };
                (
                    (1.0 - t) * m(y, x + 1) + t * m(y + dy, x + 1),
                    (1.0 - t) * m(y, x - 1) + t * m(y - dy, x - 1),
                )
            } else {
                let t = (gx / gy).abs();
                let dx = if (gx >= 0.0) == (gy >= 0.0) { 1 } else { -1 };
                (
                    (1.0 - t) * m(y - 1, x) + t * m(y - 1, x + dx),
                    (1.0 - t) * m(y + 1, x) + t * m(y + 1, x - dx),
                )
            };
            if mag >= ahead && mag >= behind {
                out[y as usize * width + x as usize] = mag;
            }
        }
    }
    out
}

/// Hysteresis by fixpoint sweeps: seed every pixel above `high`, then keep
/// sweeping the image, promoting pending pixels (`low <= k <= high`, `k > 0`)
/// with an already-promoted 8-neighbour, until a sweep changes nothing.
pub fn brute_hysteresis(suppressed: &[f64], width: usize, height: usize, low: f64, high: f64) -> Vec<bool> {
    let mut edge: Vec<bool> = suppressed.iter().map(|k| *k > high).collect();
    let pending: Vec<bool> =
        suppressed.iter().map(|k| *k > 0.0 && *k >= low && *k <= high).collect();
    loop {
        let mut changed = false;
        for y in 0..height as isize {
            for x in 0..width as isize {
                let i = y as usize * width + x as usize;
                if edge[i] || !pending[i] {
                    continue;
                }
                'scan: for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (ny, nx) = (y + dy, x + dx);
                        if (dy != 0 || dx != 0)
                            && ny >= 0
                            && nx >= 0
                            && ny < height as isize
                            && nx < width as isize
                            && edge[ny as usize * width + nx as usize]
                        {
                            edge[i] = true;
                            changed = true;
                            break 'scan;
                        }
                    }
                }
            }
        }
        if !changed {
            return edge;
        }
    }
}

/// The whole pipeline, returning the boolean edge mask row-major.
pub fn brute_canny(img: &GrayImage, params: &CannyParams) -> Vec<bool> {
    let blurred = brute_blur(&Plane::from_gray(img), params.gaussian.sigma, params.gaussian.radius);
    let grad = brute_sobel(&blurred);
    let max = grad.mag.iter().copied().fold(0.0, f64::max);
    let (low, high) = match params.thresholds {
        Thresholds::Absolute { low, high } => (low, high),
        Thresholds::Relative { low_frac, high_frac } => (low_frac * max, high_frac * max),
    };
    let suppressed = brute_nms(&grad, img.width, img.height);
    brute_hysteresis(&suppressed, img.width, img.height, low, high)
}

pub fn random_image(seed: u64, width: usize, height: usize) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = (0..width * height).map(|_| rng.gen::<u8>()).collect();
    GrayImage::new(width, height, pixels).unwrap()
}

/// Named 16x16 images with qualitatively different edge structure: a filled
/// square, a disk, a half-plane step, a smooth horizontal ramp and a
/// checkerboard.
pub fn structured_images() -> Vec<(&'static str, GrayImage)> {
    let n = 16usize;
    let mut square = vec![0u8; n * n];
    let mut disk = vec![0u8; n * n];
    let mut step = vec![0u8; n * n];
    let mut ramp = vec![0u8; n * n];
    let mut checker = vec![0u8; n * n];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            if (4..12).contains(&y) && (4..12).contains(&x) {
                square[i] = 255;
            }
            let (dy, dx) = (y as f64 - 7.5, x as f64 - 7.5);
            if dy * dy + dx * dx <= 25.0 {
                disk[i] = 255;
            }
            if x >= 8 {
                step[i] = 255;
            }
            ramp[i] = (x * 17) as u8;
            if (y / 4 + x / 4) % 2 == 0 {
                checker[i] = 255;
            }
        }
    }
    let img = |px| GrayImage::new(n, n, px).unwrap();
    vec![
        ("square", img(square)),
        ("disk", img(disk)),
        ("step", img(step)),
        ("ramp", img(ramp)),
        ("checkerboard", img(checker)),
    ]
}

/// Confusion counts by a plain loop over pixel pairs, positive above 0.5.
#[derive(Default, PartialEq, Eq, Debug)]
pub struct BruteCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

pub fn brute_counts(pred: &[f64], truth: &[f64]) -> BruteCounts {
    assert_eq!(pred.len(), truth.len());
    let mut c = BruteCounts::default();
    for i in 0..pred.len() {
        let p = pred[i] > 0.5;
        let t = truth[i] > 0.5;
        if p && t {
            c.tp += 1;
        } else if p && !t {
            c.fp += 1;
        } else if !p && t {
            c.fn_ += 1;
        } else {
            c.tn += 1;
        }
    }
    c
}

/// Number of representable `f64` values strictly between `a` and `b`
/// (0 when they are equal; `-0.0` counts as equal to `0.0`).
pub fn ulps_between(a: f64, b: f64) -> u64 {
    fn ordinal(x: f64) -> i64 {
        let bits = x.to_bits() as i64;
        if bits < 0 {
            i64::MIN - bits
        } else {
            bits
        }
    }
    assert!(a.is_finite() && b.is_finite(), "ulp distance needs finite inputs");
    ordinal(a).abs_diff(ordinal(b))
}
