//! The training loop, evaluation, and the ablation driver.
//!
//! [`train`] runs epochs of shuffled mini-batches, minimizes the combined
//! loss with Adam under the step learning-rate schedule, evaluates on the
//! test set at a fixed cadence, and keeps the checkpoint with the highest
//! test DSC seen so far — the best checkpoint is returned, never the last.
//! Everything is seeded, so a fixed [`TrainConfig`] reproduces the same
//! [`TrainLog`] and checkpoint bytes run after run.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{checkpoint_bytes, load_checkpoint_bytes, load_dataset, DataSet, EdgeGen, Manifest};
use crate::edge::{CannyParams, GradOperator};
use crate::error::{Error, Result};
use crate::loss::{combined_loss, LossValue};
use crate::metrics::{confusion, metrics, Aggregation, MetricsReport};
use crate::model::{CdseUnet, ModelConfig};
use crate::tensor::{Adam, Dims, Graph, LrSchedule, Mode, Tensor};
use crate::FusionVariant;

/// Mask threshold used for every evaluation.
pub const EVAL_THRESHOLD: f32 = 0.5;

/// Everything one training run needs besides the data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    /// Evaluate on the test set every this many epochs. The final epoch
    /// always evaluates so a best checkpoint exists.
    pub eval_every: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub edge_gen: EdgeGen,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 2,
            lr: LrSchedule::default(),
            eval_every: 1,
            seed: 0,
            model: ModelConfig::default(),
            edge_gen: EdgeGen::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        if !(self.lr.base.is_finite() && self.lr.base > 0.0) {
            return Err(Error::config(format!("lr_base {} must be positive", self.lr.base)));
        }
        if !(self.lr.factor.is_finite() && self.lr.factor > 0.0) {
            return Err(Error::config(format!("lr_factor {} must be positive", self.lr.factor)));
        }
        if self.lr.interval == 0 {
            return Err(Error::config("lr_interval must be at least 1"));
        }
        self.model.validate()?;
        self.edge_gen.validate()
    }

    /// Set one training field from its config-file key. Model keys live on
    /// [`ModelConfig::apply`]; unknown keys here are errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn parsed<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(format!("invalid value '{value}' for {key}")))
        }
        match key {
            "epochs" => self.epochs = parsed(key, value)?,
            "batch_size" => self.batch_size = parsed(key, value)?,
            "eval_every" => self.eval_every = parsed(key, value)?,
            "seed" => self.seed = parsed(key, value)?,
            "lr_base" => self.lr.base = parsed(key, value)?,
            "lr_factor" => self.lr.factor = parsed(key, value)?,
            "lr_interval" => self.lr.interval = parsed(key, value)?,
            other => return Err(Error::config(format!("unknown training key '{other}'"))),
        }
        Ok(())
    }
}

/// One line of the training log.
///
/// `wall_time_s` is informational and deliberately left out of the
/// serialized form so logs from identical seeded runs are byte-identical.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: LossValue,
    /// Micro-pooled test metrics, present on evaluation epochs.
    pub test: Option<MetricsReport>,
    /// Highest test DSC seen so far; 0 until the first evaluation.
    pub best_dsc: f64,
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Per-epoch records, serialized as line-delimited JSON.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("epoch records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<TrainLog> {
        let mut records = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim();
            if !trimmed.is_empty() {
                let record: EpochRecord = serde_json::from_str(trimmed)
                    .map_err(|e| Error::parse(offset, format!("bad log record: {e}")))?;
                records.push(record);
            }
            offset += line.len();
        }
        Ok(TrainLog { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<TrainLog> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        TrainLog::from_jsonl(&text)
    }
}

/// What [`train`] hands back: the model reloaded from the best checkpoint,
/// the full log, and the checkpoint bytes themselves.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: CdseUnet<f32>,
    pub log: TrainLog,
    pub best_checkpoint: Vec<u8>,
    pub best_dsc: f64,
    pub best_epoch: usize,
}

/// Micro-pooled and per-image-mean metrics for one evaluation pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub micro: MetricsReport,
    pub per_image: MetricsReport,
}

fn stack_batch(
    set: &DataSet<f32>,
    indices: &[usize],
) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let per = set.samples[indices[0]].image.dims;
    let dims = Dims::new(indices.len(), 1, per.h, per.w);
    let mut image = Vec::with_capacity(dims.numel());
    let mut edge = Vec::with_capacity(dims.numel());
    let mut mask = Vec::with_capacity(dims.numel());
    for &i in indices {
        let s = &set.samples[i];
        if s.image.dims != per || s.edge.dims != per || s.mask.dims != per {
            return Err(Error::dim(format!(
                "sample {i} has dims {} / {} / {}, expected {per} throughout the batch",
                s.image.dims, s.edge.dims, s.mask.dims
            )));
        }
        image.extend_from_slice(&s.image.data);
        edge.extend_from_slice(&s.edge.data);
        mask.extend_from_slice(&s.mask.data);
    }
    Ok((
        Tensor::from_vec(dims, image)?,
        Tensor::from_vec(dims, edge)?,
        Tensor::from_vec(dims, mask)?,
    ))
}

/// Run the full loop and return the best checkpoint, never the last.
///
/// Per epoch: shuffle (seeded by `cfg.seed` and the epoch), train over
/// mini-batches, then evaluate when the cadence or the final epoch says so.
/// A test DSC strictly above the best so far replaces the kept checkpoint.
/// A non-finite loss aborts with the epoch, batch, and loss components.
pub fn train(
    train_set: &DataSet<f32>,
    test_set: &DataSet<f32>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::config("training and test sets must both be non-empty"));
    }

    let mut model = CdseUnet::build(cfg.model, cfg.seed)?;
    let mut opt = Adam::new();
    let mut log = TrainLog::default();
    let mut best_dsc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best: Option<Vec<u8>> = None;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr.at_epoch(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        order.shuffle(&mut rng);

        let mut sums = LossValue { total: 0.0, bce: 0.0, dice: 0.0 };
        let mut batches = 0usize;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (image, edge, mask) = stack_batch(train_set, chunk)?;
            let mut g = Graph::new();
            let (probs, lease, _) = model.forward(&mut g, &image, Some(&edge), Mode::Train)?;
            let target = g.leaf(mask, false);
            let loss = combined_loss(&mut g, probs, target)?;
            let value = loss.read(&g);
            if !(value.total.is_finite() && value.bce.is_finite() && value.dice.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "loss diverged at epoch {epoch}, batch {batch}: total={}, bce={}, dice={}",
                    value.total, value.bce, value.dice
                )));
            }
            g.backward(loss.total)?;
            lease.accumulate(&g, &mut model.params);
            opt.step(&mut model.params, lr);
            sums.total += value.total;
            sums.bce += value.bce;
            sums.dice += value.dice;
            batches += 1;
        }
        let inv = 1.0 / batches as f64;
        let train_loss =
            LossValue { total: sums.total * inv, bce: sums.bce * inv, dice: sums.dice * inv };

        let mut test = None;
        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            let report = evaluate(&mut model, test_set)?;
            if report.micro.dsc > best_dsc {
                best_dsc = report.micro.dsc;
                best_epoch = epoch;
                best = Some(checkpoint_bytes(&model));
            }
            test = Some(report.micro);
        }

        log.records.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            test,
            best_dsc: if best.is_some() { best_dsc } else { 0.0 },
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        if let Some(r) = &log.records.last().unwrap().test {
            log::info!(
                "epoch {epoch}: lr {lr:.6}, loss {:.4}, test dsc {:.4}, best {best_dsc:.4}",
                train_loss.total,
                r.dsc
            );
        } else {
            log::debug!("epoch {epoch}: lr {lr:.6}, loss {:.4}", train_loss.total);
        }
    }

    let best_checkpoint = best.expect("the final epoch always evaluates");
    let model = load_checkpoint_bytes(&best_checkpoint)?;
    Ok(TrainOutcome { model, log, best_checkpoint, best_dsc, best_epoch })
}

/// Predict every sample at threshold 0.5 and pool the confusion counts,
/// both micro (counts summed first) and as per-image means.
pub fn evaluate(model: &mut CdseUnet<f32>, set: &DataSet<f32>) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::config("cannot evaluate on an empty set"));
    }
    let mut counts = Vec::with_capacity(set.len());
    for sample in &set.samples {
        let pred = model.predict(&sample.image, Some(&sample.edge), EVAL_THRESHOLD)?;
        counts.push(confusion(&pred, &sample.mask)?);
    }
    Ok(EvalReport {
        micro: metrics(&counts, Aggregation::Micro),
        per_image: metrics(&counts, Aggregation::PerImageMean),
    })
}

/// Metric column headers shared by every ablation table.
pub const ABLATION_COLUMNS: [&str; 4] = ["Accuracy", "Precision", "Recall", "DSC"];

/// One grid point: a label for the report row plus the full config to run.
#[derive(Clone, Debug)]
pub struct AblationCell {
    pub label: String,
    pub config: TrainConfig,
}

/// The three channel-fusion variants, each swapped into `base`.
pub fn fusion_grid(base: &TrainConfig) -> Vec<AblationCell> {
    [
        (FusionVariant::SimpleConcat, "Simple Concatenation"),
        (FusionVariant::SingleSenet, "Single SENet Concatenation"),
        (FusionVariant::DoubleSenet, "Double SENet Concatenation"),
    ]
    .into_iter()
    .map(|(fusion, label)| {
        let mut config = *base;
        config.model.fusion = fusion;
        AblationCell { label: label.to_string(), config }
    })
    .collect()
}

/// The four edge detectors, each swapped into `base`. The gradient-only
/// operators threshold at 0.2 of the max magnitude; the Canny cell keeps
/// the base parameters when the base already uses Canny.
pub fn operator_grid(base: &TrainConfig) -> Vec<AblationCell> {
    let canny = match base.edge_gen {
        EdgeGen::Canny(params) => params,
        _ => CannyParams::default(),
    };
    let mut cells: Vec<AblationCell> = [
        (GradOperator::Sobel, "Sobel"),
        (GradOperator::Roberts, "Roberts"),
        (GradOperator::Prewitt, "Prewitt"),
    ]
    .into_iter()
    .map(|(op, name)| {
        let mut config = *base;
        config.edge_gen = EdgeGen::Threshold { op, tfrac: 0.2 };
        AblationCell { label: format!("{name}&CDSE-UNet"), config }
    })
    .collect();
    let mut config = *base;
    config.edge_gen = EdgeGen::Canny(canny);
    cells.push(AblationCell { label: "Canny&CDSE-UNet".to_string(), config });
    cells
}

/// One finished (or failed) row of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Aligned plain text: a `Method` label column then the four metric
    /// columns, one row per cell, four decimals per value.
    pub fn to_text(&self) -> String {
        let label_width = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain(["Method".len()])
            .max()
            .unwrap_or(0);
        let mut out = format!("{:<label_width$}", "Method");
        for column in ABLATION_COLUMNS {
            out.push_str(&format!("  {column:>9}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{:<label_width$}", row.label));
            match (&row.metrics, &row.error) {
                (Some(m), _) => {
                    for value in [m.accuracy, m.precision, m.recall, m.dsc] {
                        out.push_str(&format!("  {value:>9.4}"));
                    }
                }
                (None, Some(e)) => out.push_str(&format!("  failed: {e}")),
                (None, None) => out.push_str("  failed"),
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ablation tables serialize")
    }
}

/// Train and evaluate every cell on the same manifests. Each cell reloads
/// the datasets with its own edge detector, so operator cells really see
/// different edge inputs. A failed cell records its error and the rest of
/// the grid still runs.
pub fn ablate(
    cells: &[AblationCell],
    train_manifest: &Manifest,
    test_manifest: &Manifest,
) -> Result<AblationTable> {
    if cells.is_empty() {
        return Err(Error::config("ablation grid is empty"));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        log::info!("ablation cell '{}'", cell.label);
        let run = || -> Result<EvalReport> {
            let train_set = load_dataset::<f32>(train_manifest, &cell.config.edge_gen)?;
            let test_set = load_dataset::<f32>(test_manifest, &cell.config.edge_gen)?;
            let mut outcome = train(&train_set, &test_set, &cell.config)?;
            evaluate(&mut outcome.model, &test_set)
        };
        match run() {
            Ok(report) => rows.push(AblationRow {
                label: cell.label.clone(),
                metrics: Some(report.micro),
                error: None,
            }),
            Err(e) => {
                log::warn!("ablation cell '{}' failed: {e}", cell.label);
                rows.push(AblationRow {
                    label: cell.label.clone(),
                    metrics: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    Ok(AblationTable { rows })
}
