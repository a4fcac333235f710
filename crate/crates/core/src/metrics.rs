//! Pixel-level evaluation metrics.
//!
//! Everything derives from confusion counts: accuracy `(tp+tn)/total`,
//! precision `tp/(tp+fp)`, recall `tp/(tp+fn)` and Dice similarity
//! `2tp/(2tp+fp+fn)`. A zero denominator scores 1.0 when the sets it
//! compares are both empty (a correct prediction of nothing) and 0.0
//! otherwise.
//!
//! Two aggregations are reported: `micro` pools counts over the whole set
//! before computing ratios, `per_image_mean` averages per-image ratios.

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Pixel confusion counts for one or more mask pairs.
#[derive(Clone, Copy, Default, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total(), self.total() == 0)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp, self.fn_ == 0)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, self.fp == 0)
    }

    pub fn dsc(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_, true)
    }
}

fn ratio(num: u64, den: u64, empty_matches: bool) -> f64 {
    if den == 0 {
        if empty_matches {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

/// How a [`MetricsReport`] was pooled.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Micro,
    PerImageMean,
}

/// The four ratios, their source counts, and how they were pooled.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub dsc: f64,
    pub counts: ConfusionCounts,
    pub aggregation: Aggregation,
}

/// Count agreements between a predicted and a reference mask. A pixel is
/// positive when its value exceeds 0.5, so exact 0/1 masks and probability
/// maps binarized elsewhere both work.
pub fn confusion<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<ConfusionCounts> {
    if pred.dims != truth.dims {
        return Err(Error::dim(format!(
            "mask dims {} do not match reference dims {}",
            pred.dims, truth.dims
        )));
    }
    let half = T::from_f64(0.5);
    let mut c = ConfusionCounts::default();
    for (p, t) in pred.data.iter().zip(&truth.data) {
        match (*p > half, *t > half) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Pool per-image counts into one report. `Micro` sums the counts first and
/// computes each ratio once; `PerImageMean` averages the per-image ratios.
/// Either way `counts` holds the pooled sums.
pub fn metrics(per_image: &[ConfusionCounts], aggregation: Aggregation) -> MetricsReport {
    let mut pooled = ConfusionCounts::default();
    for c in per_image {
        pooled.merge(c);
    }
    let (accuracy, precision, recall, dsc) = match aggregation {
        Aggregation::Micro => (pooled.accuracy(), pooled.precision(), pooled.recall(), pooled.dsc()),
        Aggregation::PerImageMean => {
            let n = per_image.len() as f64;
            let mut sums = [0.0f64; 4];
            for c in per_image {
                sums[0] += c.accuracy();
                sums[1] += c.precision();
                sums[2] += c.recall();
                sums[3] += c.dsc();
            }
            if per_image.is_empty() {
                (1.0, 1.0, 1.0, 1.0)
            } else {
                (sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n)
            }
        }
    };
    MetricsReport { accuracy, precision, recall, dsc, counts: pooled, aggregation }
}

impl MetricsReport {
    /// The four ratios in report column order, four decimals each,
    /// space-separated: `accuracy precision recall dsc`.
    pub fn table_values(&self) -> String {
        format_values(&[self.accuracy, self.precision, self.recall, self.dsc])
    }
}

/// Format ratios the way [`MetricsReport::table_values`] does.
pub fn format_values(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" ")
}

/// Parse a line of space-separated ratios back into numbers. Rejects
/// anything that is not a finite value in `[0, 1]`.
pub fn parse_values(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|tok| {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::config(format!("bad metric value '{tok}'")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("metric value {v} outside [0, 1]")));
            }
            Ok(v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    fn mask(values: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Dims::new(1, 1, 1, values.len()), values.to_vec()).unwrap()
    }

    #[test]
    fn hand_computed_counts_give_expected_ratios() {
        let c = ConfusionCounts { tp: 3, fp: 1, fn_: 1, tn: 95 };
        assert_eq!(c.accuracy(), 0.98);
        assert_eq!(c.precision(), 0.75);
        assert_eq!(c.recall(), 0.75);
        assert_eq!(c.dsc(), 0.75);
    }

    #[test]
    fn perfect_prediction_scores_ones() {
        let c = ConfusionCounts { tp: 10, fp: 0, fn_: 0, tn: 90 };
        assert_eq!(
            (c.accuracy(), c.precision(), c.recall(), c.dsc()),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn zero_denominators_follow_the_empty_set_convention() {
        let both_empty = ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 5 };
        assert_eq!(both_empty.precision(), 1.0);
        assert_eq!(both_empty.recall(), 1.0);
        assert_eq!(both_empty.dsc(), 1.0);

        let missed = ConfusionCounts { tp: 0, fp: 0, fn_: 3, tn: 5 };
        assert_eq!(missed.precision(), 0.0, "predicted empty but truth was not");
        assert_eq!(missed.recall(), 0.0);
        assert_eq!(missed.dsc(), 0.0);

        let hallucinated = ConfusionCounts { tp: 0, fp: 3, fn_: 0, tn: 5 };
        assert_eq!(hallucinated.recall(), 0.0, "truth empty but prediction was not");
        assert_eq!(hallucinated.precision(), 0.0);

        let nothing = ConfusionCounts::default();
        assert_eq!(nothing.accuracy(), 1.0);
    }

    #[test]
    fn confusion_counts_match_the_masks() {
        let truth: Vec<f64> = (0..100).map(|i| if i < 10 { 1.0 } else { 0.0 }).collect();
        let same = confusion(&mask(&truth), &mask(&truth)).unwrap();
        assert_eq!(same, ConfusionCounts { tp: 10, fp: 0, fn_: 0, tn: 90 });

        let all_ones = vec![1.0; 100];
        let c = confusion(&mask(&all_ones), &mask(&truth)).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 10, fp: 90, fn_: 0, tn: 0 });

        assert!(confusion(&mask(&[1.0]), &mask(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn micro_pools_counts_and_per_image_averages_ratios() {
        let imgs = [
            ConfusionCounts { tp: 1, fp: 0, fn_: 0, tn: 3 },
            ConfusionCounts { tp: 0, fp: 2, fn_: 2, tn: 0 },
        ];
        let micro = metrics(&imgs, Aggregation::Micro);
        assert_eq!(micro.counts, ConfusionCounts { tp: 1, fp: 2, fn_: 2, tn: 3 });
        assert_eq!(micro.precision, 1.0 / 3.0);
        assert_eq!(micro.dsc, 2.0 / 6.0);

        let mean = metrics(&imgs, Aggregation::PerImageMean);
        assert_eq!(mean.counts, micro.counts);
        assert_eq!(mean.precision, 0.5, "(1.0 + 0.0) / 2");
        assert_eq!(mean.dsc, 0.5);
        assert_eq!(mean.accuracy, 0.5);
    }

    #[test]
    fn dsc_equals_the_harmonic_mean_of_precision_and_recall() {
        let c = ConfusionCounts { tp: 7, fp: 3, fn_: 5, tn: 49 };
        let (p, r) = (c.precision(), c.recall());
        let f1 = 2.0 * p * r / (p + r);
        assert!((c.dsc() - f1).abs() < 1e-15);
    }

    #[test]
    fn report_serializes_with_the_documented_keys() {
        let report = metrics(
            &[ConfusionCounts { tp: 3, fp: 1, fn_: 1, tn: 95 }],
            Aggregation::Micro,
        );
        let json = serde_json::to_string(&report).unwrap();
        for key in ["\"accuracy\"", "\"precision\"", "\"recall\"", "\"dsc\"", "\"counts\"", "\"fn\"", "\"aggregation\"", "\"micro\""] {
            assert!(json.contains(key), "missing {key} in {json}");
        }
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn table_values_round_trip_losslessly() {
        let line = "0.9930 0.8135 0.9648 0.9107";
        let parsed = parse_values(line).unwrap();
        assert_eq!(format_values(&parsed), line);
        assert!(parse_values("0.5 nope").is_err());
        assert!(parse_values("1.5").is_err());
    }
}
