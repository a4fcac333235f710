//! Synthetic lesion dataset generation.
//!
//! Each image is a dark background with two bright elliptical lung fields
//! and one to five soft-edged elliptical lesions at intermediate intensity,
//! plus Gaussian pixel noise. Masks are the exact lesion supports. Lesion
//! centers are confined to a scaled-down copy of their lung ellipse and
//! lesion radii bounded so that, by the triangle inequality in the lung's
//! elliptical norm, every lesion pixel stays inside the lung field.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{Manifest, ManifestEntry};
use super::pgm;
use crate::edge::GrayImage;
use crate::{Error, Result};

/// How far out (as a fraction of the lung radii) lesion centers may sit.
const LESION_CENTER_SCALE: f64 = 0.55;
/// Lesion radii relative to the smaller lung radius. With the center scale
/// above, worst case distance from the lung center in the lung's elliptical
/// norm is 0.55 + sqrt(2) * 0.25 < 1.
const LESION_RADIUS_RANGE: (f64, f64) = (0.08, 0.25);

#[derive(Clone, Copy, PartialEq, Debug)]
pub struct SyntheticSpec {
    pub count: usize,
    /// Square image side; must be a positive multiple of 16.
    pub size: usize,
    /// Inclusive range for the number of lesions per image.
    pub blob_count_range: (usize, usize),
    pub lung_intensity: (f64, f64),
    pub lesion_intensity: (f64, f64),
    pub background_intensity: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            count: 8,
            size: 64,
            blob_count_range: (1, 5),
            lung_intensity: (170.0, 230.0),
            lesion_intensity: (90.0, 150.0),
            background_intensity: (10.0, 30.0),
            noise_sigma: 6.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::config("synthetic count must be at least 1"));
        }
        if self.size == 0 || self.size % 16 != 0 {
            return Err(Error::config(format!(
                "synthetic size {} must be a positive multiple of 16",
                self.size
            )));
        }
        let (lo, hi) = self.blob_count_range;
        if lo < 1 || lo > hi {
            return Err(Error::config(format!("bad blob count range {lo}..={hi}")));
        }
        for (name, (a, b)) in [
            ("lung", self.lung_intensity),
            ("lesion", self.lesion_intensity),
            ("background", self.background_intensity),
        ] {
            if !(0.0..=255.0).contains(&a) || !(0.0..=255.0).contains(&b) || a > b {
                return Err(Error::config(format!("bad {name} intensity range {a}..{b}")));
            }
        }
        if self.background_intensity.1 >= self.lesion_intensity.0
            || self.lesion_intensity.1 >= self.lung_intensity.0
        {
            return Err(Error::config(
                "intensity bands must be ordered background < lesion < lung",
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config(format!("bad noise sigma {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// An axis-aligned ellipse in pixel coordinates.
#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    /// Distance from the center in the ellipse's own norm; 1.0 on the rim.
    fn norm(&self, x: f64, y: f64) -> f64 {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        (dx * dx + dy * dy).sqrt()
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        self.norm(x, y) <= 1.0
    }
}

/// One image's geometry and intensities, fully determined by the RNG draws.
struct Scene {
    background: f64,
    lungs: [(Ellipse, f64); 2],
    /// (owning lung index, shape, intensity)
    lesions: Vec<(usize, Ellipse, f64)>,
}

impl Scene {
    fn sample(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let s = spec.size as f64;
        let uniform =
            |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.gen_range(lo..hi) } else { lo };

        let background = uniform(rng, spec.background_intensity);
        let mut lungs = Vec::with_capacity(2);
        for base_cx in [0.32, 0.68] {
            let lung = Ellipse {
                cx: (base_cx + rng.gen_range(-0.03..0.03)) * s,
                cy: (0.5 + rng.gen_range(-0.04..0.04)) * s,
                rx: rng.gen_range(0.12..0.17) * s,
                ry: rng.gen_range(0.26..0.34) * s,
            };
            lungs.push((lung, uniform(rng, spec.lung_intensity)));
        }
        let lungs = [lungs[0], lungs[1]];

        let (lo, hi) = spec.blob_count_range;
        let n_lesions = rng.gen_range(lo..=hi);
        let mut lesions = Vec::with_capacity(n_lesions);
        for _ in 0..n_lesions {
            let which = rng.gen_range(0..2usize);
            let lung = lungs[which].0;
            let (u, v) = loop {
                let u: f64 = rng.gen_range(-1.0..1.0);
                let v: f64 = rng.gen_range(-1.0..1.0);
                if u * u + v * v <= 1.0 {
                    break (u, v);
                }
            };
            let r_min = lung.rx.min(lung.ry);
            let lesion = Ellipse {
                cx: lung.cx + u * LESION_CENTER_SCALE * lung.rx,
                cy: lung.cy + v * LESION_CENTER_SCALE * lung.ry,
                rx: rng.gen_range(LESION_RADIUS_RANGE.0..LESION_RADIUS_RANGE.1) * r_min,
                ry: rng.gen_range(LESION_RADIUS_RANGE.0..LESION_RADIUS_RANGE.1) * r_min,
            };
            lesions.push((which, lesion, uniform(rng, spec.lesion_intensity)));
        }

        Scene { background, lungs, lesions }
    }

    /// Rasterize to an 8-bit image and its exact lesion-support mask.
    fn render(&self, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (GrayImage, GrayImage) {
        let size = spec.size;
        let mut canvas = vec![self.background; size * size];
        let mut mask = vec![false; size * size];

        for (lung, intensity) in &self.lungs {
            paint(&mut canvas, size, lung, *intensity, 0.06);
        }
        for (_, lesion, intensity) in &self.lesions {
            paint(&mut canvas, size, lesion, *intensity, 0.25);
            stamp(&mut mask, size, lesion);
        }

        let pixels: Vec<u8> = canvas
            .iter()
            .map(|v| {
                let noisy = v + spec.noise_sigma * standard_normal(rng);
                noisy.round().clamp(0.0, 255.0) as u8
            })
            .collect();
        let image = GrayImage { width: size, height: size, pixels };
        let mask = GrayImage {
            width: size,
            height: size,
            pixels: mask.iter().map(|m| if *m { 255 } else { 0 }).collect(),
        };
        (image, mask)
    }
}

/// Blend `intensity` over the ellipse interior, ramping linearly from the
/// rim over `rim` of the ellipse norm so edges are soft.
fn paint(canvas: &mut [f64], size: usize, e: &Ellipse, intensity: f64, rim: f64) {
    for y in 0..size {
        for x in 0..size {
            let d = e.norm(x as f64, y as f64);
            if d <= 1.0 {
                let w = ((1.0 - d) / rim).min(1.0);
                let v = &mut canvas[y * size + x];
                *v = *v * (1.0 - w) + intensity * w;
            }
        }
    }
}

fn stamp(mask: &mut [bool], size: usize, e: &Ellipse) {
    for y in 0..size {
        for x in 0..size {
            if e.contains(x as f64, y as f64) {
                mask[y * size + x] = true;
            }
        }
    }
}

/// Box-Muller transform over two uniform draws.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generate `spec.count` image/mask pairs plus a `manifest.tsv` into
/// `out_dir`, which is created if needed. Fully deterministic for a seed.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut manifest = Manifest::new(out_dir);
    for i in 0..spec.count {
        let scene = Scene::sample(spec, &mut rng);
        let (image, mask) = scene.render(spec, &mut rng);
        let image_name = format!("img_{i:04}.pgm");
        let mask_name = format!("mask_{i:04}.pgm");
        pgm::write_pgm(&image, &out_dir.join(&image_name))?;
        pgm::write_pgm(&mask, &out_dir.join(&mask_name))?;
        manifest.entries.push(ManifestEntry {
            image: image_name.into(),
            mask: mask_name.into(),
            edge: None,
        });
    }
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
