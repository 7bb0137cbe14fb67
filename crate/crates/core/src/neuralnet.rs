//! Combo-NN: a residual 1-D convolutional front-end feeding a dense head,
//! with exact reverse-mode gradients, plain SGD and a versioned binary weight
//! format.
//!
//! A sample's feature vector is read as a single-channel sequence of length
//! `input_dim`. The forward pipeline is
//!
//! ```text
//! stem conv (1 -> S, same padding) -> ReLU
//! residual_blocks x [conv -> ReLU -> conv, + skip, ReLU]
//! pooling (global average over positions, or flatten)
//! dense_hidden x [dense -> ReLU]
//! dense -> logits
//! ```
//!
//! Weights are plain values: every operation returns new weights and never
//! mutates its inputs.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::Dataset;
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("label {label} outside {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("weights do not belong to this network (fingerprint {found:016x}, expected {expected:016x})")]
    FingerprintMismatch { expected: u64, found: u64 },
    #[error("parameter shapes are not congruent: {0}")]
    ShapeMismatch(String),
    #[error("forward cache does not match these weights")]
    StaleCache,
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("weight file does not start with the FTLW magic bytes")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u16),
    #[error("weight file truncated")]
    Truncated,
    #[error("malformed weight file: {0}")]
    Malformed(String),
    #[error("non-finite value produced during training")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over positions; the dense head sees `stem_channels` values.
    GlobalAverage,
    /// Channel-major flatten; the dense head sees `stem_channels * input_dim`.
    #[default]
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComboNetConfig {
    pub input_dim: usize,
    pub stem_channels: usize,
    pub residual_blocks: usize,
    pub kernel_size: usize,
    pub dense_hidden: Vec<usize>,
    pub n_classes: usize,
    pub pooling: Pooling,
    pub init_seed: u64,
}

impl ComboNetConfig {
    /// Desk-scale defaults: 8 stem channels, 2 residual blocks, kernel 3,
    /// one hidden layer of 32.
    pub fn new(input_dim: usize, n_classes: usize) -> Self {
        Self {
            input_dim,
            stem_channels: 8,
            residual_blocks: 2,
            kernel_size: 3,
            dense_hidden: vec![32],
            n_classes,
            pooling: Pooling::default(),
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NetError::InvalidConfig(m.to_owned()));
        if self.input_dim == 0 || self.stem_channels == 0 {
            return bad("input_dim and stem_channels must be positive");
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return bad("kernel_size must be odd and positive");
        }
        if self.dense_hidden.contains(&0) {
            return bad("dense_hidden sizes must be positive");
        }
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        Ok(())
    }

    pub fn pooled_dim(&self) -> usize {
        match self.pooling {
            Pooling::GlobalAverage => self.stem_channels,
            Pooling::Flatten => self.stem_channels * self.input_dim,
        }
    }

    /// FNV-1a over the architecture fields. The init seed is excluded: two
    /// models with the same shape are interchangeable for transfer.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        h.write(b"combo-net/1");
        for v in [
            self.input_dim,
            self.stem_channels,
            self.residual_blocks,
            self.kernel_size,
            self.n_classes,
            self.dense_hidden.len(),
        ] {
            h.write(&(v as u64).to_le_bytes());
        }
        for &v in &self.dense_hidden {
            h.write(&(v as u64).to_le_bytes());
        }
        h.write(&[match self.pooling {
            Pooling::GlobalAverage => 0,
            Pooling::Flatten => 1,
        }]);
        h.finish()
    }

    /// `(layer_id, kind, weight shape, bias length)` for every parameter block.
    pub fn block_layout(&self) -> Vec<(String, LayerKind, Vec<usize>, usize)> {
        let (s, k) = (self.stem_channels, self.kernel_size);
        let mut layout = vec![("stem".to_owned(), LayerKind::Conv, vec![s, 1, k], s)];
        for r in 0..self.residual_blocks {
            for c in 1..=2 {
                layout.push((format!("res{r}.conv{c}"), LayerKind::Conv, vec![s, s, k], s));
            }
        }
        let mut width = self.pooled_dim();
        for (i, &h) in self.dense_hidden.iter().enumerate() {
            layout.push((format!("dense{i}"), LayerKind::Dense, vec![width, h], h));
            width = h;
        }
        layout.push((
            "output".to_owned(),
            LayerKind::Dense,
            vec![width, self.n_classes],
            self.n_classes,
        ));
        layout
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Weight shape `[out_channels, in_channels, kernel]`.
    Conv,
    /// Weight shape `[in, out]`.
    Dense,
}

impl LayerKind {
    fn tag(self) -> u8 {
        match self {
            LayerKind::Conv => 0,
            LayerKind::Dense => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(LayerKind::Conv),
            1 => Some(LayerKind::Dense),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub layer_id: String,
    pub kind: LayerKind,
    pub shape: Vec<usize>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ParamBlock {
    fn zeros_like(&self) -> Self {
        Self {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
            ..self.clone()
        }
    }

    fn same_shape(&self, other: &ParamBlock) -> bool {
        self.layer_id == other.layer_id
            && self.kind == other.kind
            && self.shape == other.shape
            && self.bias.len() == other.bias.len()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(&self.bias)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }
}

fn congruent(a: &[ParamBlock], b: &[ParamBlock]) -> Result<()> {
    if a.len() != b.len() {
        return Err(NetError::ShapeMismatch(format!(
            "{} vs {} blocks",
            a.len(),
            b.len()
        )));
    }
    match a.iter().zip(b).find(|(x, y)| !x.same_shape(y)) {
        Some((x, y)) => Err(NetError::ShapeMismatch(format!(
            "block '{}' {:?} vs '{}' {:?}",
            x.layer_id, x.shape, y.layer_id, y.shape
        ))),
        None => Ok(()),
    }
}

/// Ordered parameter blocks of one Combo-NN, tagged with the fingerprint of
/// the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub fingerprint: u64,
    pub blocks: Vec<ParamBlock>,
}

impl ModelWeights {
    pub fn num_parameters(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.weight.len() + b.bias.len())
            .sum()
    }

    /// All parameters in block order, weights before biases.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.blocks.iter().flat_map(ParamBlock::values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.blocks.iter_mut().flat_map(ParamBlock::values_mut)
    }

    pub fn check_congruent(&self, other: &ModelWeights) -> Result<()> {
        if self.fingerprint != other.fingerprint {
            return Err(NetError::FingerprintMismatch {
                expected: self.fingerprint,
                found: other.fingerprint,
            });
        }
        congruent(&self.blocks, &other.blocks)
    }

    /// Confirms these weights match `config`'s architecture.
    pub fn check_config(&self, config: &ComboNetConfig) -> Result<()> {
        let expected = config.fingerprint();
        if self.fingerprint != expected {
            return Err(NetError::FingerprintMismatch {
                expected,
                found: self.fingerprint,
            });
        }
        let layout = config.block_layout();
        if layout.len() != self.blocks.len() {
            return Err(NetError::ShapeMismatch(format!(
                "expected {} blocks, found {}",
                layout.len(),
                self.blocks.len()
            )));
        }
        for ((id, kind, shape, bias), b) in layout.iter().zip(&self.blocks) {
            let n: usize = shape.iter().product();
            if &b.layer_id != id
                || b.kind != *kind
                || &b.shape != shape
                || b.weight.len() != n
                || b.bias.len() != *bias
            {
                return Err(NetError::ShapeMismatch(format!("block '{}'", b.layer_id)));
            }
        }
        Ok(())
    }

    /// Largest absolute per-parameter difference.
    pub fn max_abs_diff(&self, other: &ModelWeights) -> Result<f64> {
        self.check_congruent(other)?;
        Ok(self
            .values()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    fn digest(&self) -> u64 {
        let mut h = Fnv::new();
        h.write(&self.fingerprint.to_le_bytes());
        for v in self.values() {
            h.write(&v.to_bits().to_le_bytes());
        }
        h.finish()
    }
}

/// Mean gradient of the loss over `sample_count` samples, shaped like the
/// weights it was taken at.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub fingerprint: u64,
    pub blocks: Vec<ParamBlock>,
    pub sample_count: usize,
}

impl GradientSet {
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.blocks.iter().flat_map(ParamBlock::values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.blocks.iter_mut().flat_map(ParamBlock::values_mut)
    }

    pub fn is_zero(&self) -> bool {
        self.values().all(|&v| v == 0.0)
    }
}

/// Row-major feature rows with their class labels.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: &'a [f64],
    pub labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn from_dataset(data: &'a Dataset) -> Self {
        Batch {
            features: data.features(),
            labels: data.labels(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// He-uniform weights (limit `sqrt(6 / fan_in)`), zero biases, drawn in block
/// order from the config's init seed.
pub fn init_model(config: &ComboNetConfig) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = seed::rng(seed::derive(config.init_seed, &[seed::stream::INIT]));
    let blocks = config
        .block_layout()
        .into_iter()
        .map(|(layer_id, kind, shape, bias_len)| {
            let fan_in = match kind {
                LayerKind::Conv => shape[1] * shape[2],
                LayerKind::Dense => shape[0],
            };
            let limit = (6.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            let weight = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
            ParamBlock {
                layer_id,
                kind,
                shape,
                weight,
                bias: vec![0.0; bias_len],
            }
        })
        .collect();
    Ok(ModelWeights {
        fingerprint: config.fingerprint(),
        blocks,
    })
}

/// Same-padded 1-D convolution over `[in_ch][len]`, giving `[out_ch][len]`.
fn conv1d(input: &[f64], in_ch: usize, len: usize, block: &ParamBlock) -> Vec<f64> {
    let (out_ch, k) = (block.shape[0], block.shape[2]);
    let pad = k / 2;
    let mut out = vec![0.0; out_ch * len];
    for o in 0..out_ch {
        let row = &mut out[o * len..(o + 1) * len];
        row.iter_mut().for_each(|v| *v = block.bias[o]);
        for i in 0..in_ch {
            let x = &input[i * len..(i + 1) * len];
            let w = &block.weight[(o * in_ch + i) * k..(o * in_ch + i + 1) * k];
            for (t, &wt) in w.iter().enumerate() {
                // position p reads x[p + t - pad]
                let lo = pad.saturating_sub(t);
                let hi = (len + pad).saturating_sub(t).min(len);
                for p in lo..hi {
                    row[p] += wt * x[p + t - pad];
                }
            }
        }
    }
    out
}

/// Accumulates parameter gradients into `grad` and returns d(input).
fn conv1d_backward(
    input: &[f64],
    in_ch: usize,
    len: usize,
    block: &ParamBlock,
    dout: &[f64],
    grad: &mut ParamBlock,
    want_dinput: bool,
) -> Vec<f64> {
    let (out_ch, k) = (block.shape[0], block.shape[2]);
    let pad = k / 2;
    let mut din = if want_dinput {
        vec![0.0; in_ch * len]
    } else {
        Vec::new()
    };
    for o in 0..out_ch {
        let dy = &dout[o * len..(o + 1) * len];
        grad.bias[o] += dy.iter().sum::<f64>();
        for i in 0..in_ch {
            let x = &input[i * len..(i + 1) * len];
            let base = (o * in_ch + i) * k;
            for t in 0..k {
                let lo = pad.saturating_sub(t);
                let hi = (len + pad).saturating_sub(t).min(len);
                let mut acc = 0.0;
                for p in lo..hi {
                    acc += dy[p] * x[p + t - pad];
                }
                grad.weight[base + t] += acc;
                if want_dinput {
                    let wt = block.weight[base + t];
                    let dx = &mut din[i * len..(i + 1) * len];
                    for p in lo..hi {
                        dx[p + t - pad] += dy[p] * wt;
                    }
                }
            }
        }
    }
    din
}

fn dense(input: &[f64], block: &ParamBlock) -> Vec<f64> {
    let out_dim = block.shape[1];
    let mut out = block.bias.clone();
    for (i, &x) in input.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let w = &block.weight[i * out_dim..(i + 1) * out_dim];
        for (o, &wo) in w.iter().enumerate() {
            out[o] += x * wo;
        }
    }
    out
}

fn dense_backward(
    input: &[f64],
    block: &ParamBlock,
    dout: &[f64],
    grad: &mut ParamBlock,
) -> Vec<f64> {
    let out_dim = block.shape[1];
    for (g, &d) in grad.bias.iter_mut().zip(dout) {
        *g += d;
    }
    let mut din = vec![0.0; input.len()];
    for (i, &x) in input.iter().enumerate() {
        let w = &block.weight[i * out_dim..(i + 1) * out_dim];
        let gw = &mut grad.weight[i * out_dim..(i + 1) * out_dim];
        let mut acc = 0.0;
        for o in 0..out_dim {
            gw[o] += x * dout[o];
            acc += w[o] * dout[o];
        }
        din[i] = acc;
    }
    din
}

fn relu_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// Zeroes gradient entries whose post-ReLU activation is not positive.
fn relu_mask(grad: &mut [f64], activation: &[f64]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Post-activation values for one sample.
#[derive(Debug, Clone)]
struct SampleCache {
    input: Vec<f64>,
    stem: Vec<f64>,
    /// Per residual block: (inner ReLU output, block output).
    blocks: Vec<(Vec<f64>, Vec<f64>)>,
    pooled: Vec<f64>,
    hidden: Vec<Vec<f64>>,
}

/// Logits for a batch plus the activations backprop needs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Row-major `[batch x n_classes]`.
    pub logits: Vec<f64>,
    pub n_classes: usize,
    caches: Vec<SampleCache>,
    weights_digest: u64,
}

impl ForwardPass {
    pub fn batch_len(&self) -> usize {
        self.caches.len()
    }

    pub fn logit_row(&self, i: usize) -> &[f64] {
        &self.logits[i * self.n_classes..(i + 1) * self.n_classes]
    }
}

fn forward_sample(
    config: &ComboNetConfig,
    weights: &ModelWeights,
    x: &[f64],
) -> (Vec<f64>, SampleCache) {
    let (d, s) = (config.input_dim, config.stem_channels);
    let mut blocks = weights.blocks.iter();
    let mut stem = conv1d(x, 1, d, blocks.next().unwrap());
    relu_in_place(&mut stem);

    let mut h = stem.clone();
    let mut res = Vec::with_capacity(config.residual_blocks);
    for _ in 0..config.residual_blocks {
        let mut a = conv1d(&h, s, d, blocks.next().unwrap());
        relu_in_place(&mut a);
        let mut out = conv1d(&a, s, d, blocks.next().unwrap());
        for (o, &skip) in out.iter_mut().zip(&h) {
            *o = (*o + skip).max(0.0);
        }
        res.push((a, out.clone()));
        h = out;
    }

    let pooled = match config.pooling {
        Pooling::GlobalAverage => h
            .chunks(d)
            .map(|c| c.iter().sum::<f64>() / d as f64)
            .collect(),
        Pooling::Flatten => h,
    };

    let mut z = pooled.clone();
    let mut hidden = Vec::with_capacity(config.dense_hidden.len());
    for _ in 0..config.dense_hidden.len() {
        let mut u = dense(&z, blocks.next().unwrap());
        relu_in_place(&mut u);
        hidden.push(u.clone());
        z = u;
    }
    let logits = dense(&z, blocks.next().unwrap());
    (
        logits,
        SampleCache {
            input: x.to_vec(),
            stem,
            blocks: res,
            pooled,
            hidden,
        },
    )
}

/// Runs the network on every row of `batch.features`.
pub fn forward(
    config: &ComboNetConfig,
    weights: &ModelWeights,
    features: &[f64],
) -> Result<ForwardPass> {
    weights.check_config(config)?;
    let d = config.input_dim;
    if !features.len().is_multiple_of(d) {
        return Err(NetError::DimensionMismatch {
            expected: d,
            found: features.len() % d,
        });
    }
    let mut logits = Vec::with_capacity(features.len() / d * config.n_classes);
    let mut caches = Vec::with_capacity(features.len() / d);
    for row in features.chunks(d) {
        let (l, c) = forward_sample(config, weights, row);
        logits.extend(l);
        caches.push(c);
    }
    Ok(ForwardPass {
        logits,
        n_classes: config.n_classes,
        caches,
        weights_digest: weights.digest(),
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &[f64], n_classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(n_classes) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&z| (z - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    out
}

/// Mean softmax cross-entropy over the batch and its gradient with respect to
/// the logits (already divided by the batch size).
pub fn cross_entropy_loss(
    logits: &[f64],
    labels: &[usize],
    n_classes: usize,
) -> Result<(f64, Vec<f64>)> {
    if labels.is_empty() {
        return Err(NetError::EmptyBatch);
    }
    if logits.len() != labels.len() * n_classes {
        return Err(NetError::DimensionMismatch {
            expected: labels.len() * n_classes,
            found: logits.len(),
        });
    }
    let b = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &y) in logits.chunks(n_classes).zip(labels) {
        if y >= n_classes {
            return Err(NetError::LabelOutOfRange {
                label: y,
                n_classes,
            });
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - m).exp()).sum();
        let log_sum = sum.ln();
        loss += log_sum - (row[y] - m);
        for (c, &z) in row.iter().enumerate() {
            let p = (z - m).exp() / sum;
            grad.push((p - if c == y { 1.0 } else { 0.0 }) / b);
        }
    }
    Ok((loss / b, grad))
}

/// Reverse-mode gradients of the loss whose logit gradient is `dlogits`.
pub fn backward(
    config: &ComboNetConfig,
    weights: &ModelWeights,
    pass: &ForwardPass,
    dlogits: &[f64],
) -> Result<GradientSet> {
    weights.check_config(config)?;
    if pass.weights_digest != weights.digest() || pass.n_classes != config.n_classes {
        return Err(NetError::StaleCache);
    }
    if dlogits.len() != pass.logits.len() {
        return Err(NetError::DimensionMismatch {
            expected: pass.logits.len(),
            found: dlogits.len(),
        });
    }
    let (d, s, c) = (config.input_dim, config.stem_channels, config.n_classes);
    let mut grads: Vec<ParamBlock> = weights.blocks.iter().map(ParamBlock::zeros_like).collect();
    let n_blocks = grads.len();
    let first_dense = 1 + 2 * config.residual_blocks;

    for (cache, dl) in pass.caches.iter().zip(dlogits.chunks(c)) {
        if dl.iter().all(|&v| v == 0.0) {
            continue;
        }
        // Dense head, output layer first.
        let mut dz = dl.to_vec();
        for li in (first_dense..n_blocks).rev() {
            let hidden_idx = li - first_dense;
            let input = if hidden_idx == 0 {
                &cache.pooled
            } else {
                &cache.hidden[hidden_idx - 1]
            };
            dz = dense_backward(input, &weights.blocks[li], &dz, &mut grads[li]);
            if hidden_idx > 0 {
                relu_mask(&mut dz, &cache.hidden[hidden_idx - 1]);
            }
        }

        let mut dh = match config.pooling {
            Pooling::GlobalAverage => dz
                .iter()
                .flat_map(|&g| std::iter::repeat_n(g / d as f64, d))
                .collect(),
            Pooling::Flatten => dz,
        };

        for r in (0..config.residual_blocks).rev() {
            let (a, out) = &cache.blocks[r];
            let h_in = if r == 0 {
                &cache.stem
            } else {
                &cache.blocks[r - 1].1
            };
            relu_mask(&mut dh, out);
            let (i1, i2) = (1 + 2 * r, 2 + 2 * r);
            let mut da = conv1d_backward(a, s, d, &weights.blocks[i2], &dh, &mut grads[i2], true);
            relu_mask(&mut da, a);
            let dconv = conv1d_backward(h_in, s, d, &weights.blocks[i1], &da, &mut grads[i1], true);
            for (g, v) in dh.iter_mut().zip(dconv) {
                *g += v;
            }
        }

        relu_mask(&mut dh, &cache.stem);
        conv1d_backward(
            &cache.input,
            1,
            d,
            &weights.blocks[0],
            &dh,
            &mut grads[0],
            false,
        );
    }
    Ok(GradientSet {
        fingerprint: weights.fingerprint,
        blocks: grads,
        sample_count: pass.batch_len(),
    })
}

/// `w' = w - lr * g` for every parameter.
pub fn sgd_step(weights: &ModelWeights, grads: &GradientSet, lr: f64) -> Result<ModelWeights> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(NetError::InvalidLearningRate(lr));
    }
    if weights.fingerprint != grads.fingerprint {
        return Err(NetError::FingerprintMismatch {
            expected: weights.fingerprint,
            found: grads.fingerprint,
        });
    }
    congruent(&weights.blocks, &grads.blocks)?;
    let mut next = weights.clone();
    for (w, &g) in next.values_mut().zip(grads.values()) {
        *w -= lr * g;
    }
    Ok(next)
}

/// Loss and mean gradient over the whole batch in one pass.
pub fn loss_and_gradient(
    config: &ComboNetConfig,
    weights: &ModelWeights,
    batch: Batch<'_>,
) -> Result<(f64, GradientSet)> {
    let pass = forward(config, weights, batch.features)?;
    check_batch(config, &pass, batch)?;
    let (loss, dlogits) = cross_entropy_loss(&pass.logits, batch.labels, config.n_classes)?;
    let grads = backward(config, weights, &pass, &dlogits)?;
    Ok((loss, grads))
}

/// Mean cross-entropy over the batch.
pub fn evaluate_loss(
    config: &ComboNetConfig,
    weights: &ModelWeights,
    batch: Batch<'_>,
) -> Result<f64> {
    let pass = forward(config, weights, batch.features)?;
    check_batch(config, &pass, batch)?;
    Ok(cross_entropy_loss(&pass.logits, batch.labels, config.n_classes)?.0)
}

fn check_batch(config: &ComboNetConfig, pass: &ForwardPass, batch: Batch<'_>) -> Result<()> {
    if pass.batch_len() != batch.len() {
        return Err(NetError::DimensionMismatch {
            expected: pass.batch_len(),
            found: batch.len(),
        });
    }
    if batch.is_empty() {
        return Err(NetError::EmptyBatch);
    }
    if let Some(&label) = batch.labels.iter().find(|&&l| l >= config.n_classes) {
        return Err(NetError::LabelOutOfRange {
            label,
            n_classes: config.n_classes,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.05,
            shuffle_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    /// Full-data mean loss after each epoch.
    pub epoch_losses: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Seeded mini-batch SGD over `data` for `params.epochs` epochs.
pub fn train_epochs(
    config: &ComboNetConfig,
    weights: &ModelWeights,
    data: &Dataset,
    params: &TrainParams,
) -> Result<TrainOutcome> {
    weights.check_config(config)?;
    if data.is_empty() {
        return Err(NetError::EmptyBatch);
    }
    if data.n_features() != config.input_dim {
        return Err(NetError::DimensionMismatch {
            expected: config.input_dim,
            found: data.n_features(),
        });
    }
    if !(params.learning_rate > 0.0 && params.learning_rate.is_finite()) {
        return Err(NetError::InvalidLearningRate(params.learning_rate));
    }
    let n = data.n_samples();
    let mut warnings = Vec::new();
    let mut batch_size = params.batch_size.max(1);
    if batch_size > n {
        let w = format!("batch_size {batch_size} exceeds {n} samples; using full batch");
        log::warn!("{w}");
        warnings.push(w);
        batch_size = n;
    }

    let mut rng = seed::rng(params.shuffle_seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut current = weights.clone();
    let mut epoch_losses = Vec::with_capacity(params.epochs);
    let d = data.n_features();
    let mut feats = Vec::with_capacity(batch_size * d);
    let mut labels = Vec::with_capacity(batch_size);
    for _ in 0..params.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            feats.clear();
            labels.clear();
            for &i in chunk {
                feats.extend_from_slice(data.row(i));
                labels.push(data.labels()[i]);
            }
            let (_, grads) = loss_and_gradient(
                config,
                &current,
                Batch {
                    features: &feats,
                    labels: &labels,
                },
            )?;
            current = sgd_step(&current, &grads, params.learning_rate)?;
        }
        let loss = evaluate_loss(config, &current, Batch::from_dataset(data))?;
        if !loss.is_finite() {
            return Err(NetError::NonFinite);
        }
        epoch_losses.push(loss);
    }
    Ok(TrainOutcome {
        weights: current,
        epoch_losses,
        warnings,
    })
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict_classes(
    config: &ComboNetConfig,
    weights: &ModelWeights,
    features: &[f64],
) -> Result<Vec<usize>> {
    let pass = forward(config, weights, features)?;
    Ok(pass.logits.chunks(config.n_classes).map(argmax).collect())
}

pub const WEIGHT_MAGIC: &[u8; 4] = b"FTLW";
pub const WEIGHT_FORMAT_VERSION: u16 = 1;
/// Magic, version, fingerprint and block count.
pub const WEIGHT_HEADER_LEN: usize = 4 + 2 + 8 + 4;

/// Encoded size of one block in the weight file.
pub fn encoded_block_len(block: &ParamBlock) -> usize {
    2 + block.layer_id.len()
        + 1
        + 1
        + 4 * block.shape.len()
        + 4
        + 8 * (block.weight.len() + block.bias.len())
}

/// Encodes weights in the `FTLW` format (see `docs/weight-format.md`).
pub fn serialize_weights(weights: &ModelWeights) -> Vec<u8> {
    let total = WEIGHT_HEADER_LEN + weights.blocks.iter().map(encoded_block_len).sum::<usize>();
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&weights.fingerprint.to_le_bytes());
    out.extend_from_slice(&(weights.blocks.len() as u32).to_le_bytes());
    for b in &weights.blocks {
        out.extend_from_slice(&(b.layer_id.len() as u16).to_le_bytes());
        out.extend_from_slice(b.layer_id.as_bytes());
        out.push(b.kind.tag());
        out.push(b.shape.len() as u8);
        for &dim in &b.shape {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        out.extend_from_slice(&(b.bias.len() as u32).to_le_bytes());
        for v in b.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(NetError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(NetError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or(NetError::Truncated)?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Decodes an `FTLW` file without checking it against a network config.
pub fn decode_weights(bytes: &[u8]) -> Result<ModelWeights> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| NetError::BadMagic)? != WEIGHT_MAGIC {
        return Err(NetError::BadMagic);
    }
    let version = r.u16()?;
    if version != WEIGHT_FORMAT_VERSION {
        return Err(NetError::UnsupportedVersion(version));
    }
    let fingerprint = r.u64()?;
    let count = r.u32()? as usize;
    let mut blocks = Vec::new();
    for _ in 0..count {
        let id_len = r.u16()? as usize;
        let layer_id = String::from_utf8(r.take(id_len)?.to_vec())
            .map_err(|_| NetError::Malformed("layer id is not UTF-8".into()))?;
        let kind = LayerKind::from_tag(r.u8()?)
            .ok_or_else(|| NetError::Malformed(format!("unknown layer kind in '{layer_id}'")))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let bias_len = r.u32()? as usize;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| NetError::Malformed("shape overflows".into()))?;
        let weight = r.f64s(n)?;
        let bias = r.f64s(bias_len)?;
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(NetError::Malformed(format!(
                "non-finite value in '{layer_id}'"
            )));
        }
        blocks.push(ParamBlock {
            layer_id,
            kind,
            shape,
            weight,
            bias,
        });
    }
    if r.pos != bytes.len() {
        return Err(NetError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(ModelWeights {
        fingerprint,
        blocks,
    })
}

/// Decodes an `FTLW` file and verifies it belongs to `config`.
pub fn deserialize_weights(bytes: &[u8], config: &ComboNetConfig) -> Result<ModelWeights> {
    let weights = decode_weights(bytes)?;
    weights.check_config(config)?;
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(d: usize, blocks: usize, hidden: Vec<usize>, c: usize) -> ComboNetConfig {
        ComboNetConfig {
            input_dim: d,
            stem_channels: 3,
            residual_blocks: blocks,
            kernel_size: 3,
            dense_hidden: hidden,
            n_classes: c,
            pooling: Pooling::Flatten,
            init_seed: 5,
        }
    }

    fn zeroed(w: &ModelWeights) -> ModelWeights {
        let mut z = w.clone();
        z.values_mut().for_each(|v| *v = 0.0);
        z
    }

    #[test]
    fn config_validation() {
        let mut c = small(4, 1, vec![8], 3);
        assert!(c.validate().is_ok());
        c.kernel_size = 2;
        assert!(c.validate().is_err());
        c.kernel_size = 3;
        c.n_classes = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let c = small(6, 2, vec![8], 3);
        assert_eq!(init_model(&c).unwrap(), init_model(&c).unwrap());
        let mut other = c.clone();
        other.init_seed = 6;
        assert_ne!(init_model(&c).unwrap(), init_model(&other).unwrap());
        assert!(init_model(&c)
            .unwrap()
            .blocks
            .iter()
            .all(|b| b.bias.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn minimal_architecture_has_single_dense_layer() {
        let mut c = small(5, 0, vec![], 4);
        c.pooling = Pooling::GlobalAverage;
        let w = init_model(&c).unwrap();
        let dense: Vec<_> = w
            .blocks
            .iter()
            .filter(|b| b.kind == LayerKind::Dense)
            .collect();
        assert_eq!(dense.len(), 1);
        assert_eq!(dense[0].shape, vec![c.stem_channels, 4]);
    }

    #[test]
    fn zero_network_gives_uniform_softmax() {
        let c = small(4, 1, vec![5], 4);
        let w = zeroed(&init_model(&c).unwrap());
        let pass = forward(&c, &w, &[0.3, 0.1, 0.9, 0.2]).unwrap();
        assert!(pass.logits.iter().all(|&v| v == 0.0));
        assert!(softmax(&pass.logits, 4)
            .iter()
            .all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn duplicated_rows_give_identical_logits() {
        let c = small(4, 2, vec![6], 3);
        let w = init_model(&c).unwrap();
        let row = [0.2, 0.7, 0.1, 0.5];
        let both: Vec<f64> = row.iter().chain(&row).copied().collect();
        let pass = forward(&c, &w, &both).unwrap();
        assert_eq!(pass.logit_row(0), pass.logit_row(1));
    }

    #[test]
    fn doubling_last_layer_doubles_logits() {
        let c = small(4, 0, vec![], 3);
        let w = init_model(&c).unwrap();
        let mut w2 = w.clone();
        w2.blocks
            .last_mut()
            .unwrap()
            .weight
            .iter_mut()
            .for_each(|v| *v *= 2.0);
        let x = [0.4, 0.8, 0.3, 0.6];
        let a = forward(&c, &w, &x).unwrap().logits;
        let b = forward(&c, &w2, &x).unwrap().logits;
        for (u, v) in a.iter().zip(&b) {
            assert!((2.0 * u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let c = small(4, 0, vec![], 3);
        let w = init_model(&c).unwrap();
        assert!(matches!(
            forward(&c, &w, &[1.0; 5]),
            Err(NetError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_residual_block_is_identity_on_nonnegative_input() {
        let c = small(5, 1, vec![], 2);
        let mut w = init_model(&c).unwrap();
        for b in &mut w.blocks[1..3] {
            b.values_mut().for_each(|v| *v = 0.0);
        }
        let mut c0 = c.clone();
        c0.residual_blocks = 0;
        let mut w0 = init_model(&c0).unwrap();
        w0.blocks[0] = w.blocks[0].clone();
        *w0.blocks.last_mut().unwrap() = w.blocks.last().unwrap().clone();
        let x = [0.1, 0.9, 0.4, 0.3, 0.7];
        let a = forward(&c, &w, &x).unwrap().logits;
        let b = forward(&c0, &w0, &x).unwrap().logits;
        assert_eq!(a, b);
    }

    #[test]
    fn loss_known_values() {
        let (l, _) = cross_entropy_loss(&[0.0; 4], &[2], 4).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let (l, _) = cross_entropy_loss(&[1000.0, 0.0, 0.0], &[0], 3).unwrap();
        assert!((0.0..1e-12).contains(&l));
        assert!(cross_entropy_loss(&[0.0, 0.0], &[2], 2).is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let c = small(4, 1, vec![5], 3);
        let w = init_model(&c).unwrap();
        let pass = forward(&c, &w, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let g = backward(&c, &w, &pass, &[0.0; 3]).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn stale_cache_rejected() {
        let c = small(4, 1, vec![5], 3);
        let w = init_model(&c).unwrap();
        let pass = forward(&c, &w, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut moved = w.clone();
        moved.blocks[0].weight[0] += 0.5;
        assert_eq!(
            backward(&c, &moved, &pass, &[0.1, 0.0, -0.1]),
            Err(NetError::StaleCache)
        );
    }

    #[test]
    fn sgd_step_arithmetic() {
        let c = small(3, 0, vec![], 2);
        let mut w = init_model(&c).unwrap();
        w.values_mut().for_each(|v| *v = 1.0);
        let mut g = GradientSet {
            fingerprint: w.fingerprint,
            blocks: w.blocks.iter().map(ParamBlock::zeros_like).collect(),
            sample_count: 1,
        };
        assert_eq!(sgd_step(&w, &g, 0.1).unwrap(), w);
        g.values_mut().for_each(|v| *v = 0.5);
        let next = sgd_step(&w, &g, 0.1).unwrap();
        assert!(next.values().all(|&v| v == 0.95));
        assert!(w.values().all(|&v| v == 1.0));
        assert!(matches!(
            sgd_step(&w, &g, 0.0),
            Err(NetError::InvalidLearningRate(_))
        ));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.1, 0.9]), 1);
        assert_eq!(argmax(&[0.5, 0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.7, 0.7]), 1);
    }

    #[test]
    fn serialization_round_trip_and_layout() {
        let c = small(6, 1, vec![4], 3);
        let w = init_model(&c).unwrap();
        let bytes = serialize_weights(&w);
        let expected = WEIGHT_HEADER_LEN + w.blocks.iter().map(encoded_block_len).sum::<usize>();
        assert_eq!(bytes.len(), expected);
        assert_eq!(deserialize_weights(&bytes, &c).unwrap(), w);
    }

    #[test]
    fn corrupt_files_rejected() {
        let c = small(6, 1, vec![4], 3);
        let bytes = serialize_weights(&init_model(&c).unwrap());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(decode_weights(&bad), Err(NetError::BadMagic));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(decode_weights(&bad), Err(NetError::UnsupportedVersion(9)));

        assert_eq!(
            decode_weights(&bytes[..bytes.len() - 3]),
            Err(NetError::Truncated)
        );

        let other = small(7, 1, vec![4], 3);
        assert!(matches!(
            deserialize_weights(&bytes, &other),
            Err(NetError::FingerprintMismatch { .. })
        ));
    }
}
