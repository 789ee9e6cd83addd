//! Deep-supervised training: dice loss on all four heads, paired
//! augmentation, Adam.

mod augment;
mod loss;

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use augment::{apply_affine, augment, flip_horizontal, AffineParams, AugmentConfig};
pub use loss::{dice_loss, dice_loss_grad, gradient_check};

use crate::data::SliceRecord;
use crate::error::{Error, Result};
use crate::imageops::{resize_bilinear_plane, resize_bilinear_plane_adjoint, Image, Mask};
use crate::model::{SegModel, LEVELS};
use crate::nn::{Grads, ParamStore, Tensor};
use crate::rng::{stream, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub augmentation: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 60,
            batch_size: 20,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-7,
            augmentation: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        self.augmentation.validate()
    }
}

/// Mean losses of one epoch. `levels[0..3]` are the resized heads
/// `L1r..L3r`, `levels[3]` is `L4`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub levels: [f64; LEVELS],
    pub combined: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub epochs: Vec<EpochLoss>,
}

const LOSS_HEADER: [&str; 6] = ["epoch", "l1", "l2", "l3", "l4", "combined"];

impl LossHistory {
    pub fn last(&self) -> Option<&EpochLoss> {
        self.epochs.last()
    }

    /// Appends `other`, renumbering its epochs to follow this history.
    pub fn extend(&mut self, other: &LossHistory) {
        let offset = self.epochs.len();
        self.epochs.extend(other.epochs.iter().map(|e| EpochLoss {
            epoch: e.epoch + offset,
            ..e.clone()
        }));
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(LOSS_HEADER)?;
        for e in &self.epochs {
            let mut row = vec![e.epoch.to_string()];
            row.extend(e.levels.iter().map(|v| v.to_string()));
            row.push(e.combined.to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let bad = |msg: String| Error::Load {
            path: path.to_path_buf(),
            reason: msg,
        };
        if r.headers()?.iter().collect::<Vec<_>>() != LOSS_HEADER {
            return Err(bad(format!("expected header {}", LOSS_HEADER.join(","))));
        }
        let mut epochs = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let num =
                |i: usize| -> Result<f64> { rec[i].parse().map_err(|_| bad(format!("bad number {:?}", &rec[i]))) };
            epochs.push(EpochLoss {
                epoch: rec[0].parse().map_err(|_| bad(format!("bad epoch {:?}", &rec[0])))?,
                levels: [num(1)?, num(2)?, num(3)?, num(4)?],
                combined: num(5)?,
            });
        }
        Ok(Self { epochs })
    }
}

/// Adam with bias correction, one moment pair per trainable parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: &TrainConfig) -> Self {
        let zeros = || {
            store
                .params
                .iter()
                .map(|p| {
                    if p.trainable {
                        vec![0.0; p.data.len()]
                    } else {
                        Vec::new()
                    }
                })
                .collect()
        };
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        if self.lr == 0.0 {
            return;
        }
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let step_size = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (i, p) in store.params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.values[i]);
            for k in 0..p.data.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                p.data[k] -= step_size * m[k] / (v[k].sqrt() + eps);
            }
        }
    }
}

/// One annotated training example.
#[derive(Clone, Debug)]
pub struct Example {
    pub image: Image,
    pub target: Mask,
}

/// Extracts `(image, annotation)` pairs, checking that every record is
/// annotated and sized for the model.
pub fn examples_from(records: &[&SliceRecord], input_size: usize) -> Result<Vec<Example>> {
    if records.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let missing: Vec<String> = records
        .iter()
        .filter(|r| r.annotation.is_none())
        .map(|r| r.id().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "training slices without annotation: {}",
            missing.join(", ")
        )));
    }
    records
        .iter()
        .map(|r| {
            if r.dim() != (input_size, input_size) {
                return Err(Error::Shape(format!(
                    "slice {} is {:?}, model expects {input_size}×{input_size}",
                    r.id(),
                    r.dim()
                )));
            }
            Ok(Example {
                image: r.image.clone(),
                target: r.annotation.clone().expect("checked above"),
            })
        })
        .collect()
}

/// Loss of each head on a batch plus gradients w.r.t. the native-resolution
/// head outputs. Each head is upsampled to full resolution and scored with a
/// single dice over the whole batch; the combined loss is their mean.
pub(crate) fn head_losses(heads: &[Tensor; LEVELS], targets: &[f32], size: usize) -> ([f64; LEVELS], [Tensor; LEVELS]) {
    let n = heads[0].n;
    let mut losses = [0.0; LEVELS];
    let grads = std::array::from_fn(|l| {
        let head = &heads[l];
        let mut full = Vec::with_capacity(n * size * size);
        for i in 0..n {
            full.extend(resize_bilinear_plane(head.plane(i, 0), head.h, head.w, size, size));
        }
        let mut g = vec![0.0f32; full.len()];
        losses[l] = loss::dice_loss_and_grad_f32(&full, targets, &mut g);
        let scale = 1.0 / LEVELS as f32;
        let mut out = Tensor::zeros(n, 1, head.h, head.w);
        for i in 0..n {
            let gi = &g[i * size * size..(i + 1) * size * size];
            let native = resize_bilinear_plane_adjoint(gi, head.h, head.w, size, size);
            for (o, v) in out.plane_mut(i, 0).iter_mut().zip(native) {
                *o = v * scale;
            }
        }
        out
    });
    (losses, grads)
}

/// Trains `model` in place and returns the per-epoch loss history.
///
/// Each epoch reshuffles the examples and draws a fresh augmentation per
/// sample; all randomness comes from `config.seed`.
pub fn train(model: &mut SegModel, records: &[&SliceRecord], config: &TrainConfig) -> Result<LossHistory> {
    config.validate()?;
    let size = model.config.input_size;
    let examples = examples_from(records, size)?;
    let mut adam = Adam::new(&model.store, config);
    let mut history = LossHistory::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut stream(config.seed, &[tag::SHUFFLE, epoch as u64]));
        let mut sums = [0.0f64; LEVELS];
        let mut combined_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len() * size * size);
            for &i in chunk {
                let ex = &examples[i];
                let mut rng = stream(config.seed, &[tag::AUGMENT, epoch as u64, i as u64]);
                let (img, mask) = augment(&ex.image, &ex.target, &config.augmentation, &mut rng)?;
                images.push(img);
                targets.extend(mask.iter().map(|&v| f32::from(v)));
            }
            let batch = crate::model::image_batch(&images)?;
            let mut rng = stream(config.seed, &[tag::DROPOUT, epoch as u64, b as u64]);
            let trace = model.forward_train(&batch, &mut rng)?;
            let (losses, head_grads) = head_losses(&trace.heads, &targets, size);
            let combined = losses.iter().sum::<f64>() / LEVELS as f64;
            if !combined.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    loss: combined,
                });
            }
            let grads = model.backward(&trace, &head_grads);
            adam.update(&mut model.store, &grads);

            let weight = chunk.len() as f64;
            for l in 0..LEVELS {
                sums[l] += losses[l] * weight;
            }
            combined_sum += combined * weight;
        }
        let n = examples.len() as f64;
        let entry = EpochLoss {
            epoch,
            levels: sums.map(|s| s / n),
            combined: combined_sum / n,
        };
        log::debug!("epoch {epoch}: combined loss {:.4}", entry.combined);
        history.epochs.push(entry);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::model::ModelConfig;

    fn tiny_model(seed: u64) -> SegModel {
        SegModel::build(
            ModelConfig {
                input_size: 16,
                base_channels: 2,
                in_channels: 1,
                dropout_rate: 0.0,
            },
            seed,
        )
        .unwrap()
    }

    fn record(i: usize) -> SliceRecord {
        let image = Image::from_shape_fn((16, 16), |(r, c)| ((r * 3 + c * 5 + i) % 11) as f32 / 10.0);
        let annotation = Mask::from_shape_fn((16, 16), |(r, c)| u8::from((4..9).contains(&r) && c >= i % 5 && c < 8));
        SliceRecord {
            stack_id: "t".into(),
            slice_index: i,
            image,
            roi_mask: None,
            annotation: Some(annotation),
            split: Split::Pool,
        }
    }

    #[test]
    fn empty_or_unannotated_sets_rejected() {
        let mut m = tiny_model(0);
        assert!(matches!(
            train(&mut m, &[], &TrainConfig::default()),
            Err(Error::Validation(_))
        ));
        let mut r = record(0);
        r.annotation = None;
        let err = train(&mut m, &[&r], &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("t/0"));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut m = tiny_model(1);
        let before = m.store.clone();
        let recs: Vec<_> = (0..3).map(record).collect();
        let refs: Vec<_> = recs.iter().collect();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let h = train(&mut m, &refs, &cfg).unwrap();
        assert_eq!(h.epochs.len(), 2);
        for (a, b) in before.params.iter().zip(&m.store.params) {
            if a.trainable {
                assert_eq!(a.data, b.data, "{}", a.name);
            }
        }
    }

    #[test]
    fn training_is_reproducible() {
        let recs: Vec<_> = (0..4).map(record).collect();
        let refs: Vec<_> = recs.iter().collect();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            epochs: 2,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let mut a = tiny_model(2);
        let mut b = tiny_model(2);
        let ha = train(&mut a, &refs, &cfg).unwrap();
        let hb = train(&mut b, &refs, &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.store, b.store);
    }

    #[test]
    fn head_loss_gradient_matches_finite_differences() {
        let mut rng = stream(9, &[]);
        use rand::Rng;
        let heads: [Tensor; LEVELS] = std::array::from_fn(|l| {
            let s = 2usize << l;
            let data = (0..2 * s * s).map(|_| rng.random_range(0.05..0.95)).collect();
            Tensor::from_vec(2, 1, s, s, data).unwrap()
        });
        let targets: Vec<f32> = (0..2 * 16 * 16).map(|k| ((k / 7) % 2) as f32).collect();
        let (base, grads) = head_losses(&heads, &targets, 16);
        let total = |h: &[Tensor; LEVELS]| head_losses(h, &targets, 16).0.iter().sum::<f64>() / 4.0;
        assert!((total(&heads) - base.iter().sum::<f64>() / 4.0).abs() < 1e-12);
        for l in 0..LEVELS {
            for k in [0, heads[l].data.len() - 1] {
                let mut up = heads.clone();
                up[l].data[k] += 1e-3;
                let mut down = heads.clone();
                down[l].data[k] -= 1e-3;
                let numeric = (total(&up) - total(&down)) / 2e-3;
                let analytic = grads[l].data[k] as f64;
                assert!(
                    (numeric - analytic).abs() < 1e-4 + 1e-2 * analytic.abs(),
                    "{l}/{k}: {numeric} vs {analytic}"
                );
            }
        }
    }

    #[test]
    fn history_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss_history.csv");
        let h = LossHistory {
            epochs: vec![EpochLoss {
                epoch: 1,
                levels: [-0.1, -0.2, -0.3, -0.4],
                combined: -0.25,
            }],
        };
        h.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,l1,l2,l3,l4,combined"));
        assert_eq!(LossHistory::read_csv(&path).unwrap(), h);
    }
}
