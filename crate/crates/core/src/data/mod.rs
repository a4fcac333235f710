//! Dataset plumbing: PGM IO, manifests, synthesis, edge caching,
//! checkpoints, and the loader that turns files into model-ready tensors.
//!
//! The loader normalizes images to intensities / 255 in `[0, 1]`,
//! binarizes masks at mid-gray, and attaches an edge map per sample:
//! either loaded from the manifest's cached edge file or computed on the
//! fly by the configured detector.

mod checkpoint;
mod manifest;
mod pgm;
mod synth;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, load_checkpoint_bytes, save_checkpoint, MAGIC, VERSION,
};
pub use manifest::{Manifest, ManifestEntry};
pub use pgm::{parse_pgm, pgm_bytes, read_pgm, write_pgm};
pub use synth::{generate_synthetic, SyntheticSpec};

use std::path::PathBuf;

use crate::edge::{canny, threshold_detector, CannyParams, EdgeMap, GradOperator, GrayImage, Thresholds};
use crate::tensor::{Dims, Scalar, Tensor};
use crate::{Error, Result};

/// Which detector produces the edge-path input.
#[derive(Clone, Copy, PartialEq, Debug)]
pub enum EdgeGen {
    Canny(CannyParams),
    /// Single-threshold gradient detector at `tfrac` of the max magnitude.
    Threshold { op: GradOperator, tfrac: f64 },
}

impl Default for EdgeGen {
    fn default() -> Self {
        EdgeGen::Canny(CannyParams::default())
    }
}

impl EdgeGen {
    pub fn validate(&self) -> Result<()> {
        match self {
            EdgeGen::Canny(params) => params.validate(),
            EdgeGen::Threshold { tfrac, .. } => {
                if !(0.0..=1.0).contains(tfrac) {
                    return Err(Error::config(format!(
                        "threshold fraction {tfrac} must lie in [0, 1]"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn generate(&self, img: &GrayImage) -> Result<EdgeMap> {
        match self {
            EdgeGen::Canny(params) => canny(img, params),
            EdgeGen::Threshold { op, tfrac } => threshold_detector(img, *op, *tfrac),
        }
    }

    /// A filename-safe tag encoding the detector and all its parameters,
    /// used to key cached edge images.
    pub fn cache_tag(&self) -> String {
        match self {
            EdgeGen::Canny(p) => {
                let t = match p.thresholds {
                    Thresholds::Absolute { low, high } => format!("abs-{low}-{high}"),
                    Thresholds::Relative { low_frac, high_frac } => {
                        format!("rel-{low_frac}-{high_frac}")
                    }
                };
                format!("edges-canny-s{}-r{}-{t}", p.gaussian.sigma, p.gaussian.radius)
            }
            EdgeGen::Threshold { op, tfrac } => format!("edges-{}-t{tfrac}", op.name()),
        }
    }
}

/// One loaded example, each tensor `[1, 1, H, W]`.
pub struct Sample<T: Scalar> {
    pub image: Tensor<T>,
    pub edge: Tensor<T>,
    pub mask: Tensor<T>,
}

pub struct DataSet<T: Scalar> {
    pub samples: Vec<Sample<T>>,
}

impl<T: Scalar> DataSet<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// `[1, 1, H, W]` tensor of intensities divided by 255.
pub fn image_tensor<T: Scalar>(img: &GrayImage) -> Tensor<T> {
    let dims = Dims::new(1, 1, img.height, img.width);
    let data: Vec<T> = img.pixels.iter().map(|p| T::from_f64(*p as f64 / 255.0)).collect();
    debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(&v.to_f64())));
    Tensor { dims, data }
}

/// `[1, 1, H, W]` 0/1 tensor, binarized at mid-gray.
pub fn mask_tensor<T: Scalar>(img: &GrayImage) -> Tensor<T> {
    let dims = Dims::new(1, 1, img.height, img.width);
    let data = img
        .pixels
        .iter()
        .map(|p| if *p >= 128 { T::ONE } else { T::ZERO })
        .collect();
    Tensor { dims, data }
}

/// `[1, 1, H, W]` 0/1 tensor from an edge map.
pub fn edge_tensor<T: Scalar>(map: &EdgeMap) -> Tensor<T> {
    let dims = Dims::new(1, 1, map.height, map.width);
    let data = map.mask.iter().map(|m| if *m { T::ONE } else { T::ZERO }).collect();
    Tensor { dims, data }
}

/// Turn a single `[1, 1, H, W]` mask tensor back into an image: values
/// above one half become white, the rest black.
pub fn gray_from_mask<T: Scalar>(mask: &Tensor<T>) -> Result<GrayImage> {
    let d = mask.dims;
    if d.n != 1 || d.c != 1 {
        return Err(Error::dim(format!("expected a single [1, 1, H, W] mask, got {d}")));
    }
    let half = T::from_f64(0.5);
    let pixels = mask.data.iter().map(|v| if *v > half { 255 } else { 0 }).collect();
    GrayImage::new(d.w, d.h, pixels)
}

/// Load every manifest entry. Cached edge files are used when present;
/// otherwise `edge_gen` runs on the raw image.
pub fn load_dataset<T: Scalar>(manifest: &Manifest, edge_gen: &EdgeGen) -> Result<DataSet<T>> {
    let mut samples = Vec::with_capacity(manifest.len());
    for entry in &manifest.entries {
        let (image_path, mask_path, edge_path) = manifest.paths(entry);
        let image = read_pgm(&image_path)?;
        let mask = read_pgm(&mask_path)?;
        if (mask.width, mask.height) != (image.width, image.height) {
            return Err(Error::dim(format!(
                "mask {} does not match image {} dimensions",
                mask_path.display(),
                image_path.display()
            )));
        }
        let edge = match edge_path {
            Some(p) => EdgeMap::from_gray(&read_pgm(&p)?),
            None => edge_gen.generate(&image)?,
        };
        samples.push(Sample {
            image: image_tensor(&image),
            edge: edge_tensor(&edge),
            mask: mask_tensor(&mask),
        });
    }
    Ok(DataSet { samples })
}

/// Cache hit/miss tallies from one [`cache_edges`] run.
#[derive(Clone, Copy, Default, PartialEq, Eq, Debug)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
}

/// Precompute edge maps for every entry, writing them as PGMs next to the
/// source images, and return a manifest with the edge paths filled in. A
/// cache file is reused when it is at least as new as its source image, so
/// a second run recomputes nothing.
pub fn cache_edges(manifest: &Manifest, edge_gen: &EdgeGen) -> Result<(Manifest, CacheStats)> {
    let tag = edge_gen.cache_tag();
    let mut out = manifest.clone();
    let mut stats = CacheStats::default();
    for entry in &mut out.entries {
        let image_rel = entry.image.clone();
        let stem = image_rel
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::config(format!("bad image filename {}", image_rel.display())))?;
        let cache_name = format!("{stem}.{tag}.pgm");
        let cache_rel: PathBuf = match image_rel.parent() {
            Some(p) if p.as_os_str().is_empty() => cache_name.clone().into(),
            Some(p) => p.join(&cache_name),
            None => cache_name.clone().into(),
        };
        let image_abs = manifest.dir.join(&image_rel);
        let cache_abs = manifest.dir.join(&cache_rel);

        if is_fresh(&cache_abs, &image_abs) {
            stats.hits += 1;
        } else {
            let image = read_pgm(&image_abs)?;
            let edges = edge_gen.generate(&image)?;
            write_pgm(&edges.to_gray(), &cache_abs)?;
            stats.misses += 1;
        }
        entry.edge = Some(cache_rel);
    }
    Ok((out, stats))
}

/// True when `cache` exists and is no older than `source`.
fn is_fresh(cache: &std::path::Path, source: &std::path::Path) -> bool {
    let mtime = |p: &std::path::Path| std::fs::metadata(p).and_then(|m| m.modified()).ok();
    match (mtime(cache), mtime(source)) {
        (Some(c), Some(s)) => c >= s,
        _ => false,
    }
}
