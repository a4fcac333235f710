//! Config-file handling: a small INI dialect with `[model]`, `[train]`,
//! `[canny]`, and `[data]` sections, `key=value` lines, and `#` comments.
//! Unknown sections or keys are hard errors; command-line flags override
//! whatever the file set.

use std::path::Path;

use cdse_core::data::EdgeGen;
use cdse_core::edge::{CannyParams, GaussianSpec, GradOperator, Thresholds};
use cdse_core::train::TrainConfig;
use cdse_core::{Error, Result};

/// `[canny]` section: detector settings kept in flat form until a command
/// needs real [`CannyParams`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CannySettings {
    pub sigma: f64,
    pub radius: usize,
    pub low: f64,
    pub high: f64,
    /// Interpret `low`/`high` as absolute magnitudes instead of fractions
    /// of the maximum gradient magnitude.
    pub absolute: bool,
}

impl Default for CannySettings {
    fn default() -> Self {
        let gaussian = GaussianSpec::default();
        CannySettings {
            sigma: gaussian.sigma,
            radius: gaussian.radius,
            low: 0.1,
            high: 0.2,
            absolute: false,
        }
    }
}

impl CannySettings {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "sigma" => self.sigma = parsed(key, value)?,
            "radius" => self.radius = parsed(key, value)?,
            "low" => self.low = parsed(key, value)?,
            "high" => self.high = parsed(key, value)?,
            "mode" => match value {
                "relative" => self.absolute = false,
                "absolute" => self.absolute = true,
                other => {
                    return Err(Error::config(format!(
                        "canny mode '{other}' must be relative or absolute"
                    )))
                }
            },
            other => return Err(Error::config(format!("unknown canny key '{other}'"))),
        }
        Ok(())
    }

    pub fn to_params(self) -> CannyParams {
        let thresholds = if self.absolute {
            Thresholds::Absolute { low: self.low, high: self.high }
        } else {
            Thresholds::Relative { low_frac: self.low, high_frac: self.high }
        };
        CannyParams {
            gaussian: GaussianSpec { sigma: self.sigma, radius: self.radius },
            thresholds,
        }
    }
}

/// `[data]` section: how manifests are split and which detector feeds the
/// edge path.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub train_fraction: f64,
    pub split_seed: u64,
    /// `canny`, `sobel`, `prewitt`, or `roberts`.
    pub operator: String,
    pub tfrac: f64,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            train_fraction: 0.9,
            split_seed: 0,
            operator: "canny".to_string(),
            tfrac: 0.2,
        }
    }
}

impl DataSettings {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "train_fraction" => self.train_fraction = parsed(key, value)?,
            "split_seed" => self.split_seed = parsed(key, value)?,
            "operator" => {
                if value != "canny" {
                    value.parse::<GradOperator>()?;
                }
                self.operator = value.to_string();
            }
            "tfrac" => self.tfrac = parsed(key, value)?,
            other => return Err(Error::config(format!("unknown data key '{other}'"))),
        }
        Ok(())
    }

    pub fn edge_gen(&self, canny: CannyParams) -> Result<EdgeGen> {
        if self.operator == "canny" {
            canny.validate()?;
            Ok(EdgeGen::Canny(canny))
        } else {
            let op: GradOperator = self.operator.parse()?;
            Ok(EdgeGen::Threshold { op, tfrac: self.tfrac })
        }
    }
}

/// Everything the file can configure, at defaults until loaded.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AppConfig {
    pub train: TrainConfig,
    pub canny: CannySettings,
    pub data: DataSettings,
}

impl AppConfig {
    /// Defaults, overlaid with `path` when given.
    pub fn load(path: Option<&Path>) -> Result<AppConfig> {
        let mut config = AppConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            config.apply_file(&text)?;
        }
        Ok(config)
    }

    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (section, key, value) in parse_ini(text)? {
            match section.as_str() {
                "model" => self.train.model.apply(&key, &value)?,
                "train" => self.train.apply(&key, &value)?,
                "canny" => self.canny.apply(&key, &value)?,
                "data" => self.data.apply(&key, &value)?,
                other => return Err(Error::config(format!("unknown section '[{other}]'"))),
            }
        }
        Ok(())
    }

    /// The training config with the edge generator resolved from the
    /// `[data]` and `[canny]` sections.
    pub fn resolved_train(&self) -> Result<TrainConfig> {
        let mut train = self.train;
        train.edge_gen = self.data.edge_gen(self.canny.to_params())?;
        train.validate()?;
        Ok(train)
    }
}

fn parsed<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::config(format!("invalid value '{value}' for {key}")))
}

/// `(section, key, value)` triples in file order.
fn parse_ini(text: &str) -> Result<Vec<(String, String, String)>> {
    let mut entries = Vec::new();
    let mut section: Option<String> = None;
    for (index, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let Some(name) = name.strip_suffix(']') else {
                return Err(Error::config(format!("line {}: unterminated section header", index + 1)));
            };
            section = Some(name.trim().to_string());
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(format!("line {}: expected key=value, got '{line}'", index + 1)));
        };
        let Some(current) = &section else {
            return Err(Error::config(format!("line {}: key before any [section]", index + 1)));
        };
        entries.push((current.clone(), key.trim().to_string(), value.trim().to_string()));
    }
    Ok(entries)
}
