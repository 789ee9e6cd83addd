//! Segmentation metrics, the random-subset baseline, and overlays.

use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{SliceId, SliceRecord};
use crate::error::{Error, Result};
use crate::imageops::{Image, Mask};
use crate::model::{ModelConfig, SegModel, LEVELS};
use crate::pngio::quantize;
use crate::rng::{derive_seed, stream, tag};
use crate::selection::binarize;
use crate::training::{train, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
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
}

/// Pixelwise counts of prediction `p` against truth `y` (nonzero =
/// foreground).
pub fn confusion(p: &Mask, y: &Mask) -> Result<ConfusionCounts> {
    if p.dim() != y.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs truth {:?}", p.dim(), y.dim())));
    }
    let mut c = ConfusionCounts::default();
    for (&a, &b) in p.iter().zip(y) {
        match (a != 0, b != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
    pub dice: f64,
    pub accuracy: f64,
}

impl Metrics {
    /// Empty-mask conventions: precision is 1 when nothing is predicted and
    /// nothing is missed, recall is 1 when nothing is present and nothing
    /// is falsely predicted, and `J = D = 1` when both masks are empty.
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
        let precision = if c.tp + c.fp == 0 {
            if c.fn_ == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            tp / (tp + fp)
        };
        let recall = if c.tp + c.fn_ == 0 {
            if c.fp == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            tp / (tp + fn_)
        };
        let (jaccard, dice) = if c.tp + c.fp + c.fn_ == 0 {
            (1.0, 1.0)
        } else {
            (tp / (tp + fp + fn_), 2.0 * tp / (2.0 * tp + fp + fn_))
        };
        let total = c.total();
        let accuracy = if total == 0 { 1.0 } else { (tp + tn) / total as f64 };
        Self {
            precision,
            recall,
            jaccard,
            dice,
            accuracy,
        }
    }

    fn as_array(&self) -> [f64; 5] {
        [self.precision, self.recall, self.jaccard, self.dice, self.accuracy]
    }

    fn from_array(a: [f64; 5]) -> Self {
        Self {
            precision: a[0],
            recall: a[1],
            jaccard: a[2],
            dice: a[3],
            accuracy: a[4],
        }
    }

    /// Per-slice macro average.
    pub fn mean(items: &[Metrics]) -> Metrics {
        if items.is_empty() {
            return Metrics::default();
        }
        let mut acc = [0.0; 5];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.as_array()) {
                *a += v;
            }
        }
        Metrics::from_array(acc.map(|s| s / items.len() as f64))
    }

    /// Population standard deviation of each field.
    pub fn std(items: &[Metrics]) -> Metrics {
        if items.is_empty() {
            return Metrics::default();
        }
        let mean = Metrics::mean(items).as_array();
        let mut acc = [0.0; 5];
        for m in items {
            for ((a, v), mu) in acc.iter_mut().zip(m.as_array()).zip(mean) {
                *a += (v - mu) * (v - mu);
            }
        }
        Metrics::from_array(acc.map(|s| (s / items.len() as f64).sqrt()))
    }
}

pub fn seg_metrics(p: &Mask, y: &Mask) -> Result<Metrics> {
    Ok(Metrics::from_counts(&confusion(p, y)?))
}

/// Final prediction: `L4` binarized at 0.5.
pub fn predict_mask(model: &SegModel, image: &Image) -> Result<Mask> {
    let out = model.forward(std::slice::from_ref(image))?.remove(0);
    Ok(binarize(&out.levels[LEVELS - 1]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceMetrics {
    pub id: SliceId,
    pub metrics: Metrics,
}

/// Scores the model on every annotated record.
pub fn evaluate(model: &SegModel, records: &[&SliceRecord]) -> Result<Vec<SliceMetrics>> {
    let missing: Vec<String> = records
        .iter()
        .filter(|r| r.annotation.is_none())
        .map(|r| r.id().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "evaluation slices without annotation: {}",
            missing.join(", ")
        )));
    }
    let images: Vec<Image> = records.iter().map(|r| r.image.clone()).collect();
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let outputs = model.forward(&images)?;
    records
        .iter()
        .zip(outputs)
        .map(|(r, out)| {
            let pred = binarize(&out.levels[LEVELS - 1]);
            Ok(SliceMetrics {
                id: r.id(),
                metrics: seg_metrics(&pred, r.annotation.as_ref().expect("checked"))?,
            })
        })
        .collect()
}

const METRIC_HEADER: [&str; 5] = ["precision", "recall", "jaccard", "dice", "accuracy"];

/// `stack_id,slice_index,precision,...` with a trailing `MEAN` row.
pub fn write_metrics_csv(path: &Path, rows: &[SliceMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["stack_id", "slice_index"];
    header.extend(METRIC_HEADER);
    w.write_record(&header)?;
    let fmt = |m: &Metrics| m.as_array().map(|v| v.to_string());
    for r in rows {
        let mut rec = vec![r.id.stack_id.clone(), r.id.slice_index.to_string()];
        rec.extend(fmt(&r.metrics));
        w.write_record(&rec)?;
    }
    let all: Vec<Metrics> = rows.iter().map(|r| r.metrics).collect();
    let mut rec = vec!["MEAN".to_string(), String::new()];
    rec.extend(fmt(&Metrics::mean(&all)));
    w.write_record(&rec)?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads the `MEAN` row back from a metrics file.
pub fn read_mean_metrics(path: &Path) -> Result<Metrics> {
    let mut r = csv::Reader::from_path(path)?;
    for rec in r.records() {
        let rec = rec?;
        if &rec[0] == "MEAN" {
            let mut a = [0.0; 5];
            for (i, v) in a.iter_mut().enumerate() {
                *v = rec[i + 2].parse().map_err(|_| Error::Load {
                    path: path.to_path_buf(),
                    reason: format!("bad metric value {:?}", &rec[i + 2]),
                })?;
            }
            return Ok(Metrics::from_array(a));
        }
    }
    Err(Error::Load {
        path: path.to_path_buf(),
        reason: "no MEAN row".into(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRun {
    pub run: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub runs: Vec<BaselineRun>,
    pub mean: Metrics,
    pub std: Metrics,
}

impl BaselineReport {
    pub fn from_runs(runs: Vec<BaselineRun>) -> Self {
        let all: Vec<Metrics> = runs.iter().map(|r| r.metrics).collect();
        Self {
            mean: Metrics::mean(&all),
            std: Metrics::std(&all),
            runs,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["run", "train_size", "test_size"];
        header.extend(METRIC_HEADER);
        w.write_record(&header)?;
        let fmt = |m: &Metrics| m.as_array().map(|v| v.to_string());
        for r in &self.runs {
            let mut rec = vec![r.run.to_string(), r.train_size.to_string(), r.test_size.to_string()];
            rec.extend(fmt(&r.metrics));
            w.write_record(&rec)?;
        }
        for (label, m) in [("MEAN", &self.mean), ("STD", &self.std)] {
            let mut rec = vec![label.to_string(), String::new(), String::new()];
            rec.extend(fmt(m));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Trains a fresh model on `train_set` and returns its mean metrics on
/// `eval_set`.
pub fn train_and_evaluate(
    train_set: &[&SliceRecord],
    eval_set: &[&SliceRecord],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    model_seed: u64,
) -> Result<Metrics> {
    let mut model = SegModel::build(model_config.clone(), model_seed)?;
    train(&mut model, train_set, train_config)?;
    let rows = evaluate(&model, eval_set)?;
    Ok(Metrics::mean(&rows.iter().map(|r| r.metrics).collect::<Vec<_>>()))
}

/// Draws `k` distinct records from `from` with the run's seeded stream,
/// returned in their original order.
pub fn sample_subset<'a>(from: &[&'a SliceRecord], k: usize, seed: u64, run: usize) -> Vec<&'a SliceRecord> {
    let mut idx = sample(&mut stream(seed, &[tag::BASELINE, run as u64]), from.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| from[i]).collect()
}

/// Random-subset protocol: each run trains a fresh model on
/// `⌈fraction·n⌉` randomly drawn slices and evaluates on the rest.
pub fn random_baseline(
    records: &[&SliceRecord],
    fraction: f64,
    runs: usize,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    seed: u64,
) -> Result<BaselineReport> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Validation(format!(
            "fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = records.len();
    let k = (fraction * n as f64).ceil() as usize;
    if k == 0 || k >= n {
        return Err(Error::Validation(format!(
            "fraction {fraction} of {n} slices leaves an empty train or test set"
        )));
    }
    let mut out = Vec::with_capacity(runs);
    for run in 0..runs {
        let chosen = sample_subset(records, k, seed, run);
        let ids: std::collections::HashSet<SliceId> = chosen.iter().map(|r| r.id()).collect();
        let rest: Vec<&SliceRecord> = records.iter().copied().filter(|r| !ids.contains(&r.id())).collect();
        let cfg = TrainConfig {
            seed: derive_seed(seed, &[tag::BASELINE, run as u64, 1]),
            ..train_config.clone()
        };
        let model_seed = derive_seed(seed, &[tag::BASELINE, run as u64, 2]);
        let metrics = train_and_evaluate(&chosen, &rest, model_config, &cfg, model_seed)?;
        log::info!("baseline run {run}: dice {:.4}", metrics.dice);
        out.push(BaselineRun {
            run,
            train_size: k,
            test_size: rest.len(),
            metrics,
        });
    }
    Ok(BaselineReport::from_runs(out))
}

pub const RED: [u8; 3] = [255, 0, 0];
pub const BLUE: [u8; 3] = [0, 0, 255];
pub const MAGENTA: [u8; 3] = [255, 0, 255];

/// Grayscale image with false negatives red, false positives blue and
/// true positives magenta.
pub fn render_overlay(p: &Mask, y: &Mask, image: &Image) -> Result<Array2<[u8; 3]>> {
    if p.dim() != y.dim() || p.dim() != image.dim() {
        return Err(Error::Shape(format!(
            "overlay inputs differ: prediction {:?}, truth {:?}, image {:?}",
            p.dim(),
            y.dim(),
            image.dim()
        )));
    }
    Ok(Array2::from_shape_fn(p.dim(), |ix| match (p[ix] != 0, y[ix] != 0) {
        (true, true) => MAGENTA,
        (true, false) => BLUE,
        (false, true) => RED,
        (false, false) => {
            let g = quantize(image[ix]);
            [g, g, g]
        }
    }))
}
