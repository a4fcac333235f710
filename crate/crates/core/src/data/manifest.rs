//! Dataset manifests and train/test splitting.
//!
//! A manifest is a UTF-8 text file with LF line endings: one entry per
//! line, `image<TAB>mask[<TAB>edge]`, paths relative to the manifest's
//! directory. Lines starting with `#` are comments; the special comment
//! `# split_seed=N` records which seed produced a split file.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pgm;
use crate::{Error, Result};

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub edge: Option<PathBuf>,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Manifest {
    /// Directory entry paths are relative to. Not serialized; set from the
    /// manifest file's location on load.
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub split_seed: Option<u64>,
}

impl Manifest {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Manifest { dir: dir.into(), entries: Vec::new(), split_seed: None }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Absolute (dir-joined) paths for one entry.
    pub fn paths(&self, entry: &ManifestEntry) -> (PathBuf, PathBuf, Option<PathBuf>) {
        (
            self.dir.join(&entry.image),
            self.dir.join(&entry.mask),
            entry.edge.as_ref().map(|e| self.dir.join(e)),
        )
    }

    /// Load and validate: every referenced file must exist and parse, and
    /// mask (and cached edge) dims must match the image per entry.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut manifest = Manifest::new(dir);

        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(seed) = comment.trim().strip_prefix("split_seed=") {
                    manifest.split_seed = Some(seed.trim().parse().map_err(|_| {
                        Error::load(format!("line {}: bad split_seed '{seed}'", lineno + 1))
                    })?);
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(Error::load(format!(
                    "line {}: expected image<TAB>mask[<TAB>edge], got {} fields",
                    lineno + 1,
                    fields.len()
                )));
            }
            manifest.entries.push(ManifestEntry {
                image: PathBuf::from(fields[0]),
                mask: PathBuf::from(fields[1]),
                edge: fields.get(2).map(PathBuf::from),
            });
        }

        manifest.validate()?;
        Ok(manifest)
    }

    /// The existence and dimension checks [`load`] applies.
    ///
    /// [`load`]: Manifest::load
    pub fn validate(&self) -> Result<()> {
        for entry in &self.entries {
            let (image, mask, edge) = self.paths(entry);
            let img = pgm::read_pgm(&image)
                .map_err(|e| Error::load(format!("entry {}: {e}", entry.image.display())))?;
            let msk = pgm::read_pgm(&mask)
                .map_err(|e| Error::load(format!("entry {}: {e}", entry.image.display())))?;
            if (img.width, img.height) != (msk.width, msk.height) {
                return Err(Error::load(format!(
                    "entry {}: mask is {}x{} but image is {}x{}",
                    entry.image.display(),
                    msk.width,
                    msk.height,
                    img.width,
                    img.height
                )));
            }
            if let Some(edge) = edge {
                let e = pgm::read_pgm(&edge)
                    .map_err(|e| Error::load(format!("entry {}: {e}", entry.image.display())))?;
                if (e.width, e.height) != (img.width, img.height) {
                    return Err(Error::load(format!(
                        "entry {}: cached edge is {}x{} but image is {}x{}",
                        entry.image.display(),
                        e.width,
                        e.height,
                        img.width,
                        img.height
                    )));
                }
            }
        }
        Ok(())
    }

    /// Serialize back to the text format. Entry order and paths are written
    /// exactly as stored, so load, save, load is stable.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        if let Some(seed) = self.split_seed {
            text.push_str(&format!("# split_seed={seed}\n"));
        }
        for e in &self.entries {
            text.push_str(&path_str(&e.image)?);
            text.push('\t');
            text.push_str(&path_str(&e.mask)?);
            if let Some(edge) = &e.edge {
                text.push('\t');
                text.push_str(&path_str(edge)?);
            }
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Seeded-shuffle split: the first `round(train_fraction * n)` shuffled
    /// entries become the train set, the rest the test set. The same seed
    /// always yields the same split.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::config(format!(
                "train_fraction must be in [0, 1], got {train_fraction}"
            )));
        }
        let mut shuffled = self.entries.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((train_fraction * self.len() as f64).round() as usize).min(self.len());
        if n_train == self.len() && !self.is_empty() {
            log::warn!("train_fraction {train_fraction} leaves the test set empty");
        }
        let test_entries = shuffled.split_off(n_train);
        let make = |entries| Manifest {
            dir: self.dir.clone(),
            entries,
            split_seed: Some(seed),
        };
        Ok((make(shuffled), make(test_entries)))
    }
}

fn path_str(p: &Path) -> Result<String> {
    p.to_str()
        .map(str::to_owned)
        .ok_or_else(|| Error::config(format!("path {} is not valid UTF-8", p.display())))
}
