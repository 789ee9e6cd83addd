//! Deep-supervised U-net++ with four output heads.
//!
//! Nodes are addressed `X(row, col)`: the encoder column `X(1,1)..X(5,1)`
//! (two 3×3 conv + batch-norm + ReLU each, 2×2 max-pool between rows,
//! dropout after `X(4,1)` and `X(5,1)`), and nested decoder nodes `X(i,j)`
//! for `j ≥ 2, i + j ≤ 6`. A decoder node upsamples `X(i+1,j-1)` with a
//! 2×2 stride-2 transposed convolution, concatenates it with
//! `X(i,1)..X(i,j-1)`, and applies two 3×3 conv + ReLU (no batch-norm).
//!
//! Head `L(level)` is a 1×1 conv + sigmoid on the diagonal node
//! `X(5-level, level+1)`, so `L1..L4` come out at 1/8, 1/4, 1/2 and full
//! input resolution. `L1..L3` are bilinearly resized to full resolution
//! before they are compared with anything.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{resize_bilinear, Image};
use crate::nn::layers::{
    dropout_backward, dropout_inplace, maxpool2, maxpool2_backward, relu_backward, relu_inplace, sigmoid_backward,
    sigmoid_inplace, BatchNorm2d, BatchNormCache, Conv2d, ConvTranspose2x2,
};
use crate::nn::{Grads, ParamStore, Tensor};
use crate::rng::{stream, tag};

/// Encoder rows `X(1,1)..X(5,1)`.
pub const ROWS: usize = 5;
/// Number of deep-supervision heads.
pub const LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub dropout_rate: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            base_channels: 32,
            in_channels: 1,
            dropout_rate: 0.3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "input_size must be a positive multiple of 16, got {}",
                self.input_size
            )));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Channel width of each encoder row: `base × {1, 2, 4, 8, 16}`.
    pub fn widths(&self) -> [usize; ROWS] {
        std::array::from_fn(|i| self.base_channels << i)
    }

    /// Side length of row `row` (1-based).
    pub fn row_size(&self, row: usize) -> usize {
        self.input_size >> (row - 1)
    }
}

/// Node feeding head `level` (1-based).
pub fn head_node(level: usize) -> (usize, usize) {
    (ROWS - level, level + 1)
}

fn node_slot(row: usize, col: usize) -> usize {
    (row - 1) * ROWS + (col - 1)
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    dropout: bool,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    row: usize,
    col: usize,
    up: ConvTranspose2x2,
    conv1: Conv2d,
    conv2: Conv2d,
}

/// U-net++ parameters and topology.
#[derive(Clone, Debug)]
pub struct SegModel {
    pub config: ModelConfig,
    pub seed: u64,
    pub store: ParamStore,
    encoders: Vec<EncoderBlock>,
    /// Ordered by column, then row: a valid evaluation order.
    decoders: Vec<DecoderBlock>,
    heads: Vec<Conv2d>,
}

/// Deep-supervision outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutputs {
    /// `L1..L4` at their native resolutions.
    pub levels: [Image; LEVELS],
    /// `L1r..L3r`, populated by [`resize_outputs`].
    pub resized: Option<[Image; LEVELS - 1]>,
}

impl LevelOutputs {
    /// Full-resolution map for `level` (1-based): `L(level)r` for levels
    /// 1..3, `L4` itself for level 4.
    pub fn full_res(&self, level: usize) -> Option<&Image> {
        if level == LEVELS {
            return Some(&self.levels[LEVELS - 1]);
        }
        self.resized.as_ref().map(|r| &r[level - 1])
    }
}

/// Bilinearly upsamples `L1..L3` to the resolution of `L4`. Idempotent.
pub fn resize_outputs(outputs: &LevelOutputs) -> LevelOutputs {
    let (h, w) = outputs.levels[LEVELS - 1].dim();
    let resized = std::array::from_fn(|i| resize_bilinear(&outputs.levels[i], h, w));
    LevelOutputs {
        levels: outputs.levels.clone(),
        resized: Some(resized),
    }
}

struct EncoderCache {
    input: Tensor,
    bn1: BatchNormCache,
    a1: Tensor,
    bn2: BatchNormCache,
    a2: Tensor,
    drop_mask: Option<Vec<f32>>,
    /// Argmax of the pool that produced `input` (rows ≥ 2).
    pool_arg: Option<Vec<u32>>,
}

struct DecoderCache {
    cat: Tensor,
    a1: Tensor,
}

/// Everything the backward pass needs from a training forward pass.
pub struct Trace {
    nodes: Vec<Option<Tensor>>,
    encoders: Vec<EncoderCache>,
    decoders: Vec<DecoderCache>,
    /// Sigmoid head outputs at native resolution.
    pub heads: [Tensor; LEVELS],
}

impl SegModel {
    /// Builds the network with He-uniform weights drawn from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, &[tag::INIT]);
        let mut store = ParamStore::default();
        let widths = config.widths();

        let mut encoders = Vec::with_capacity(ROWS);
        for row in 1..=ROWS {
            let cin = if row == 1 { config.in_channels } else { widths[row - 2] };
            let w = widths[row - 1];
            let name = format!("x{row}1");
            encoders.push(EncoderBlock {
                conv1: Conv2d::new(&mut store, &format!("{name}.conv1"), cin, w, 3, &mut rng),
                bn1: BatchNorm2d::new(&mut store, &format!("{name}.bn1"), w),
                conv2: Conv2d::new(&mut store, &format!("{name}.conv2"), w, w, 3, &mut rng),
                bn2: BatchNorm2d::new(&mut store, &format!("{name}.bn2"), w),
                dropout: row >= 4,
            });
        }

        let mut decoders = Vec::new();
        for col in 2..=ROWS {
            for row in 1..=(ROWS + 1 - col) {
                let w = widths[row - 1];
                let name = format!("x{row}{col}");
                decoders.push(DecoderBlock {
                    row,
                    col,
                    up: ConvTranspose2x2::new(&mut store, &format!("{name}.up"), widths[row], w, &mut rng),
                    conv1: Conv2d::new(&mut store, &format!("{name}.conv1"), col * w, w, 3, &mut rng),
                    conv2: Conv2d::new(&mut store, &format!("{name}.conv2"), w, w, 3, &mut rng),
                });
            }
        }

        let heads = (1..=LEVELS)
            .map(|level| {
                let (row, _) = head_node(level);
                Conv2d::new(&mut store, &format!("head{level}"), widths[row - 1], 1, 1, &mut rng)
            })
            .collect();

        Ok(Self {
            config,
            seed,
            store,
            encoders,
            decoders,
            heads,
        })
    }

    /// Trainable parameter count, batch-norm scale/shift included.
    pub fn count_params(&self) -> usize {
        self.store.trainable_count()
    }

    /// Per-layer count straight from the layer shapes.
    pub fn layer_param_counts(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (i, e) in self.encoders.iter().enumerate() {
            let n = e.conv1.param_count() + e.bn1.param_count() + e.conv2.param_count() + e.bn2.param_count();
            out.push((format!("x{}1", i + 1), n));
        }
        for d in &self.decoders {
            let n = d.up.param_count() + d.conv1.param_count() + d.conv2.param_count();
            out.push((format!("x{}{}", d.row, d.col), n));
        }
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("head{}", i + 1), h.param_count()));
        }
        out
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let s = self.config.input_size;
        if batch.h != s || batch.w != s || batch.c != self.config.in_channels || batch.n == 0 {
            return Err(Error::Shape(format!(
                "model expects N×{}×{s}×{s} input, got {:?}",
                self.config.in_channels,
                batch.shape()
            )));
        }
        Ok(())
    }

    fn node(nodes: &[Option<Tensor>], row: usize, col: usize) -> &Tensor {
        nodes[node_slot(row, col)].as_ref().expect("node evaluated")
    }

    fn decoder_input(&self, d: &DecoderBlock, nodes: &[Option<Tensor>]) -> Tensor {
        let up = d.up.forward(&self.store, Self::node(nodes, d.row + 1, d.col - 1));
        let mut parts: Vec<&Tensor> = vec![&up];
        parts.extend((1..d.col).map(|k| Self::node(nodes, d.row, k)));
        Tensor::concat_channels(&parts)
    }

    /// Inference-mode forward pass (running batch-norm statistics, no
    /// dropout). Returns the four sigmoid heads at native resolution.
    pub fn forward_batch(&self, batch: &Tensor) -> Result<[Tensor; LEVELS]> {
        self.check_input(batch)?;
        let mut nodes: Vec<Option<Tensor>> = vec![None; ROWS * ROWS];
        for (i, e) in self.encoders.iter().enumerate() {
            let row = i + 1;
            let pooled;
            let input = if row == 1 {
                batch
            } else {
                pooled = maxpool2(Self::node(&nodes, row - 1, 1)).0;
                &pooled
            };
            let mut x = e
                .bn1
                .forward_inference(&self.store, &e.conv1.forward(&self.store, input));
            relu_inplace(&mut x);
            let mut x = e.bn2.forward_inference(&self.store, &e.conv2.forward(&self.store, &x));
            relu_inplace(&mut x);
            nodes[node_slot(row, 1)] = Some(x);
        }
        for d in &self.decoders {
            let cat = self.decoder_input(d, &nodes);
            let mut x = d.conv1.forward(&self.store, &cat);
            relu_inplace(&mut x);
            let mut x = d.conv2.forward(&self.store, &x);
            relu_inplace(&mut x);
            nodes[node_slot(d.row, d.col)] = Some(x);
        }
        Ok(std::array::from_fn(|i| {
            let (row, col) = head_node(i + 1);
            let mut y = self.heads[i].forward(&self.store, Self::node(&nodes, row, col));
            sigmoid_inplace(&mut y);
            y
        }))
    }

    /// Runs inference on each image independently (in parallel) and
    /// returns native-resolution level outputs.
    pub fn forward(&self, images: &[Image]) -> Result<Vec<LevelOutputs>> {
        images
            .par_iter()
            .map(|img| {
                let batch = image_batch(std::slice::from_ref(img))?;
                let heads = self.forward_batch(&batch)?;
                Ok(LevelOutputs {
                    levels: std::array::from_fn(|i| plane_to_image(&heads[i], 0)),
                    resized: None,
                })
            })
            .collect()
    }

    /// Forward pass plus resize, for one image.
    pub fn predict(&self, image: &Image) -> Result<LevelOutputs> {
        let out = self.forward(std::slice::from_ref(image))?.remove(0);
        Ok(resize_outputs(&out))
    }

    /// Training-mode forward: batch statistics (running buffers updated)
    /// and dropout at `X(4,1)`, `X(5,1)` drawn from `rng`.
    pub fn forward_train(&mut self, batch: &Tensor, rng: &mut impl Rng) -> Result<Trace> {
        self.check_input(batch)?;
        let rate = self.config.dropout_rate;
        let mut nodes: Vec<Option<Tensor>> = vec![None; ROWS * ROWS];
        let mut enc_caches = Vec::with_capacity(ROWS);
        let encoders = self.encoders.clone();
        for (i, e) in encoders.iter().enumerate() {
            let row = i + 1;
            let (input, pool_arg) = if row == 1 {
                (batch.clone(), None)
            } else {
                let (p, arg) = maxpool2(Self::node(&nodes, row - 1, 1));
                (p, Some(arg))
            };
            let z1 = e.conv1.forward(&self.store, &input);
            let (mut a1, bn1) = e.bn1.forward_train(&mut self.store, &z1);
            relu_inplace(&mut a1);
            let z2 = e.conv2.forward(&self.store, &a1);
            let (mut a2, bn2) = e.bn2.forward_train(&mut self.store, &z2);
            relu_inplace(&mut a2);
            let mut out = a2.clone();
            let drop_mask = (e.dropout && rate > 0.0).then(|| dropout_inplace(&mut out, rate, rng));
            nodes[node_slot(row, 1)] = Some(out);
            enc_caches.push(EncoderCache {
                input,
                bn1,
                a1,
                bn2,
                a2,
                drop_mask,
                pool_arg,
            });
        }
        let mut dec_caches = Vec::with_capacity(self.decoders.len());
        for d in &self.decoders {
            let cat = self.decoder_input(d, &nodes);
            let mut a1 = d.conv1.forward(&self.store, &cat);
            relu_inplace(&mut a1);
            let mut a2 = d.conv2.forward(&self.store, &a1);
            relu_inplace(&mut a2);
            nodes[node_slot(d.row, d.col)] = Some(a2);
            dec_caches.push(DecoderCache { cat, a1 });
        }
        let heads = std::array::from_fn(|i| {
            let (row, col) = head_node(i + 1);
            let mut y = self.heads[i].forward(&self.store, Self::node(&nodes, row, col));
            sigmoid_inplace(&mut y);
            y
        });
        Ok(Trace {
            nodes,
            encoders: enc_caches,
            decoders: dec_caches,
            heads,
        })
    }

    /// Backpropagates gradients of the native-resolution head outputs.
    pub fn backward(&self, trace: &Trace, head_grads: &[Tensor; LEVELS]) -> Grads {
        let store = &self.store;
        let mut grads = store.zero_grads();
        let mut dnodes: Vec<Option<Tensor>> = vec![None; ROWS * ROWS];
        let accumulate = |dnodes: &mut Vec<Option<Tensor>>, row: usize, col: usize, g: Tensor| {
            let slot = &mut dnodes[node_slot(row, col)];
            match slot {
                Some(acc) => acc.add_assign(&g),
                None => *slot = Some(g),
            }
        };

        for (i, head) in self.heads.iter().enumerate() {
            let (row, col) = head_node(i + 1);
            let dz = sigmoid_backward(&trace.heads[i], &head_grads[i]);
            let input = Self::node(&trace.nodes, row, col);
            let dx = head.backward(store, &mut grads, input, &dz, true).expect("input grad");
            accumulate(&mut dnodes, row, col, dx);
        }

        for (d, cache) in self.decoders.iter().zip(&trace.decoders).rev() {
            let Some(dout) = dnodes[node_slot(d.row, d.col)].take() else {
                continue;
            };
            let a2 = Self::node(&trace.nodes, d.row, d.col);
            let g = relu_backward(a2, &dout);
            let g = d
                .conv2
                .backward(store, &mut grads, &cache.a1, &g, true)
                .expect("input grad");
            let g = relu_backward(&cache.a1, &g);
            let dcat = d
                .conv1
                .backward(store, &mut grads, &cache.cat, &g, true)
                .expect("input grad");
            let w = self.config.widths()[d.row - 1];
            let mut parts = dcat.split_channels(&vec![w; d.col]).into_iter();
            let dup = parts.next().expect("upsampled part");
            let below = Self::node(&trace.nodes, d.row + 1, d.col - 1);
            let dbelow = d.up.backward(store, &mut grads, below, &dup);
            accumulate(&mut dnodes, d.row + 1, d.col - 1, dbelow);
            for (k, part) in parts.enumerate() {
                accumulate(&mut dnodes, d.row, k + 1, part);
            }
        }

        for (i, (e, cache)) in self.encoders.iter().zip(&trace.encoders).enumerate().rev() {
            let row = i + 1;
            let Some(mut g) = dnodes[node_slot(row, 1)].take() else {
                continue;
            };
            if let Some(mask) = &cache.drop_mask {
                g = dropout_backward(mask, &g);
            }
            let g = relu_backward(&cache.a2, &g);
            let g = e.bn2.backward(store, &mut grads, &cache.bn2, &g);
            let g = e
                .conv2
                .backward(store, &mut grads, &cache.a1, &g, true)
                .expect("input grad");
            let g = relu_backward(&cache.a1, &g);
            let g = e.bn1.backward(store, &mut grads, &cache.bn1, &g);
            let dx = e.conv1.backward(store, &mut grads, &cache.input, &g, row > 1);
            if let (Some(dx), Some(arg)) = (dx, &cache.pool_arg) {
                let prev_shape = Self::node(&trace.nodes, row - 1, 1).shape();
                accumulate(&mut dnodes, row - 1, 1, maxpool2_backward(prev_shape, arg, &dx));
            }
        }
        grads
    }

    /// Names of the parameters belonging to node `X(row, col)`.
    pub fn node_param_names(&self, row: usize, col: usize) -> Vec<String> {
        let prefix = format!("x{row}{col}.");
        self.store
            .params
            .iter()
            .filter(|p| p.name.starts_with(&prefix))
            .map(|p| p.name.clone())
            .collect()
    }
}

/// Packs same-sized single-channel images into an `N×1×H×W` batch.
pub fn image_batch(images: &[Image]) -> Result<Tensor> {
    let (h, w) = images
        .first()
        .map(|i| i.dim())
        .ok_or_else(|| Error::Shape("empty batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "batch mixes {:?} and {:?} images",
                (h, w),
                img.dim()
            )));
        }
        data.extend(img.iter().copied());
    }
    Tensor::from_vec(images.len(), 1, h, w, data)
}

/// Channel-0 plane of sample `i` as an image.
pub fn plane_to_image(t: &Tensor, i: usize) -> Image {
    Array2::from_shape_vec((t.h, t.w), t.plane(i, 0).to_vec()).expect("plane shape")
}
