//! Toy segmentation model: a small conv encoder, a 1x1 classifier head,
//! and SGD with momentum on a poly learning-rate schedule.
//!
//! The encoder is a stack of 3x3 conv + ReLU stages without bias terms.
//! The first `log2(downsample_factor)` stages use stride 2, the rest
//! stride 1, so the feature map is `H/downsample x W/downsample`. Kernels
//! are initialized fan-in-scaled uniform; the classifier starts at zero so
//! an untrained model predicts the uniform distribution over classes.
//!
//! Checkpoint layout (little-endian throughout):
//!
//! ```text
//! magic    8  bytes  b"COVCKPT\0"
//! version  u32       1
//! hash     u32 len, then len bytes of the config-hash string
//! config   u32 in_channels, u32 num_classes, u32 downsample_factor,
//!          u32 widths_len, widths_len x u32
//! params   u32 count, then per parameter in declaration order
//!          (encoder stages, then classifier):
//!          u32 ndim, ndim x u32 dims, numel x f64 values
//! ```
//!
//! Momentum buffers are not part of a checkpoint; loading yields a model
//! with fresh optimizer state and bit-identical forward outputs.

use crate::tensor::{Tape, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const CKPT_MAGIC: &[u8; 8] = b"COVCKPT\0";
const CKPT_VERSION: u32 = 1;

/// Architecture of the toy encoder and classifier.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output channels per encoder stage; the last entry is the feature
    /// dimension seen by category pooling.
    pub widths: Vec<usize>,
    pub num_classes: usize,
    /// Spatial reduction from input to feature map; a power of two no
    /// larger than `2^widths.len()`.
    pub downsample_factor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            widths: vec![16, 32, 32],
            num_classes: 5,
            downsample_factor: 4,
        }
    }
}

impl ModelConfig {
    /// Feature dimension produced by [`SegModel::encode`].
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("widths is non-empty")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_classes < 2 {
            return Err(ConfigError::new("num_classes must be at least 2"));
        }
        if self.widths.is_empty() {
            return Err(ConfigError::new("widths must be non-empty"));
        }
        if self.in_channels == 0 {
            return Err(ConfigError::new("in_channels must be positive"));
        }
        if !self.downsample_factor.is_power_of_two() {
            return Err(ConfigError::new("downsample_factor must be a power of two"));
        }
        let stride2 = self.downsample_factor.trailing_zeros() as usize;
        if stride2 > self.widths.len() {
            return Err(ConfigError::new(
                "downsample_factor needs more stride-2 stages than widths provides",
            ));
        }
        Ok(())
    }

    /// Per-stage strides: stride 2 until the downsample factor is reached.
    fn strides(&self) -> Vec<usize> {
        let stride2 = self.downsample_factor.trailing_zeros() as usize;
        (0..self.widths.len())
            .map(|i| if i < stride2 { 2 } else { 1 })
            .collect()
    }
}

#[derive(Debug, Error)]
#[error("invalid config: {msg}")]
pub struct ConfigError {
    msg: String,
}

impl ConfigError {
    fn new(msg: &str) -> Self {
        ConfigError {
            msg: msg.to_string(),
        }
    }

    /// Config-shaped error raised outside this module.
    pub(crate) fn other(msg: &str) -> Self {
        ConfigError::new(msg)
    }
}

/// SGD hyperparameters and the poly schedule horizon.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    /// Total iteration budget; the schedule reaches zero here.
    pub max_iters: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            poly_power: 0.9,
            max_iters: 1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.base_lr > 0.0) {
            return Err(ConfigError::new("base_lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ConfigError::new("momentum must be in [0, 1)"));
        }
        if !(self.poly_power > 0.0) {
            return Err(ConfigError::new("poly_power must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(ConfigError::new("weight_decay must be non-negative"));
        }
        if self.max_iters == 0 {
            return Err(ConfigError::new("max_iters must be positive"));
        }
        Ok(())
    }
}

/// `base_lr * (1 - iter/I)^power`, defined on `0..=I` with `lr(I) = 0`.
pub fn poly_lr(optim: &OptimConfig, iter: usize) -> f64 {
    assert!(
        iter <= optim.max_iters,
        "poly_lr: iteration {iter} beyond schedule horizon {}",
        optim.max_iters
    );
    let frac = 1.0 - iter as f64 / optim.max_iters as f64;
    optim.base_lr * frac.powf(optim.poly_power)
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error("parameter {index} became non-finite after the update")]
    NonFiniteParam { index: usize },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} is not a checkpoint: {reason}")]
    Malformed { path: String, reason: String },
}

/// Thread-portable parameter snapshot of a [`SegModel`].
#[derive(Clone)]
pub struct ModelSnapshot {
    config: ModelConfig,
    params: Vec<(Vec<usize>, Vec<f64>)>,
}

/// Encoder + classifier parameters with per-parameter momentum buffers.
pub struct SegModel {
    pub config: ModelConfig,
    stage_kernels: Vec<Tensor>,
    classifier: Tensor,
    velocity: Vec<Vec<f64>>,
}

impl SegModel {
    /// Initialize from a seed: encoder kernels fan-in-scaled uniform in
    /// draw order (stage by stage), classifier zeros.
    pub fn init(config: &ModelConfig, seed: u64) -> SegModel {
        config.validate().expect("invalid model config");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stage_kernels = Vec::new();
        let mut cin = config.in_channels;
        for &cout in &config.widths {
            // He-style fan-in scaling keeps activation variance roughly
            // constant through the ReLU stages
            let fan_in = (cin * 9) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let data: Vec<f64> = (0..cout * cin * 9)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            stage_kernels.push(Tensor::param(&[cout, cin, 3, 3], data));
            cin = cout;
        }
        let n = config.num_classes;
        let c = config.feature_dim();
        let classifier = Tensor::param(&[n, c, 1, 1], vec![0.0; n * c]);
        let velocity = stage_kernels
            .iter()
            .chain(std::iter::once(&classifier))
            .map(|p| vec![0.0; p.numel()])
            .collect();
        SegModel {
            config: config.clone(),
            stage_kernels,
            classifier,
            velocity,
        }
    }

    /// Parameter handles in declaration order (encoder stages, classifier).
    pub fn params(&self) -> Vec<Tensor> {
        let mut v: Vec<Tensor> = self.stage_kernels.clone();
        v.push(self.classifier.clone());
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn all_params_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    /// Plain-data copy of config and parameters, safe to move across
    /// threads; rebuild with [`SegModel::from_snapshot`].
    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            config: self.config.clone(),
            params: self
                .params()
                .iter()
                .map(|p| (p.shape(), p.to_vec()))
                .collect(),
        }
    }

    pub fn from_snapshot(snap: &ModelSnapshot) -> SegModel {
        let mut tensors: Vec<Tensor> = snap
            .params
            .iter()
            .map(|(shape, data)| Tensor::param(shape, data.clone()))
            .collect();
        let classifier = tensors.pop().expect("snapshot has a classifier");
        let velocity = tensors
            .iter()
            .chain(std::iter::once(&classifier))
            .map(|p| vec![0.0; p.numel()])
            .collect();
        SegModel {
            config: snap.config.clone(),
            stage_kernels: tensors,
            classifier,
            velocity,
        }
    }

    /// Deep copy with fresh buffers and zeroed momentum.
    pub fn deep_clone(&self) -> SegModel {
        let stage_kernels: Vec<Tensor> = self
            .stage_kernels
            .iter()
            .map(|k| {
                let t = k.detach();
                t.set_requires_grad(true);
                t
            })
            .collect();
        let classifier = self.classifier.detach();
        classifier.set_requires_grad(true);
        let velocity = stage_kernels
            .iter()
            .chain(std::iter::once(&classifier))
            .map(|p| vec![0.0; p.numel()])
            .collect();
        SegModel {
            config: self.config.clone(),
            stage_kernels,
            classifier,
            velocity,
        }
    }

    /// Deep features `[C, H/d, W/d]` for an input `[Cin, H, W]`.
    ///
    /// Spatial extents must be divisible by the downsample factor.
    pub fn encode(&self, tape: &Tape, x: &Tensor) -> Tensor {
        let s = x.shape();
        assert_eq!(s.len(), 3, "encode: expected [Cin,H,W], got {s:?}");
        assert_eq!(s[0], self.config.in_channels, "encode: channel mismatch");
        let d = self.config.downsample_factor;
        assert!(
            s[1] % d == 0 && s[2] % d == 0,
            "encode: input {}x{} not divisible by downsample factor {d}",
            s[1],
            s[2]
        );
        let strides = self.config.strides();
        let mut cur = x.clone();
        for (kernel, stride) in self.stage_kernels.iter().zip(strides) {
            cur = tape.relu(&tape.conv2d(&cur, kernel, stride, 1));
        }
        cur
    }

    /// Class logits at feature resolution: a 1x1 convolution `[N, h, w]`.
    pub fn classify_coarse(&self, tape: &Tape, features: &Tensor) -> Tensor {
        tape.conv2d(features, &self.classifier, 1, 0)
    }

    /// Class logits upsampled to label resolution `[N, out_h, out_w]`.
    pub fn classify(&self, tape: &Tape, features: &Tensor, out_h: usize, out_w: usize) -> Tensor {
        let coarse = self.classify_coarse(tape, features);
        tape.upsample_bilinear(&coarse, out_h, out_w)
    }

    /// One SGD step at schedule position `iter`:
    /// `v <- momentum*v + grad + weight_decay*param; param -= lr(iter)*v`,
    /// then gradients are zeroed. Missing gradients count as zero.
    pub fn sgd_step(&mut self, optim: &OptimConfig, iter: usize) -> Result<(), StepError> {
        assert!(
            iter < optim.max_iters,
            "sgd_step: iteration {iter} exhausts schedule of {}",
            optim.max_iters
        );
        let lr = poly_lr(optim, iter);
        let params = self.params();
        for (index, (param, vel)) in params.iter().zip(self.velocity.iter_mut()).enumerate() {
            let grad = param.grad().unwrap_or_else(|| vec![0.0; param.numel()]);
            let mut values = param.to_vec();
            let mut finite = true;
            for ((p, v), g) in values.iter_mut().zip(vel.iter_mut()).zip(&grad) {
                *v = optim.momentum * *v + g + optim.weight_decay * *p;
                *p -= lr * *v;
                finite &= p.is_finite();
            }
            if !finite {
                return Err(StepError::NonFiniteParam { index });
            }
            param.set_data(&values);
            param.zero_grad();
        }
        Ok(())
    }

    pub fn zero_grads(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }

    /// Write a checkpoint in the documented layout.
    pub fn save(&self, path: &Path, config_hash: &str) -> Result<(), CheckpointError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let hash = config_hash.as_bytes();
        buf.extend_from_slice(&(hash.len() as u32).to_le_bytes());
        buf.extend_from_slice(hash);
        buf.extend_from_slice(&(self.config.in_channels as u32).to_le_bytes());
        buf.extend_from_slice(&(self.config.num_classes as u32).to_le_bytes());
        buf.extend_from_slice(&(self.config.downsample_factor as u32).to_le_bytes());
        buf.extend_from_slice(&(self.config.widths.len() as u32).to_le_bytes());
        for &w in &self.config.widths {
            buf.extend_from_slice(&(w as u32).to_le_bytes());
        }
        let params = self.params();
        buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in &params {
            let shape = p.shape();
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &e in &shape {
                buf.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in p.data().iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        file.write_all(&buf).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Load a checkpoint, returning the model and the embedded config hash.
    pub fn load(path: &Path) -> Result<(SegModel, String), CheckpointError> {
        let display = path.display().to_string();
        let io_err = |source| CheckpointError::Io {
            path: display.clone(),
            source,
        };
        let bad = |reason: &str| CheckpointError::Malformed {
            path: display.clone(),
            reason: reason.to_string(),
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(io_err)?
            .read_to_end(&mut bytes)
            .map_err(|source| CheckpointError::Io {
                path: display.clone(),
                source,
            })?;
        let mut cursor = Cursor::new(&bytes);
        if cursor.take_bytes(8).ok_or_else(|| bad("truncated magic"))? != CKPT_MAGIC {
            return Err(bad("bad magic"));
        }
        if cursor.take_u32().ok_or_else(|| bad("truncated version"))? != CKPT_VERSION {
            return Err(bad("unsupported version"));
        }
        let hash_len = cursor.take_u32().ok_or_else(|| bad("truncated hash"))? as usize;
        let hash_bytes = cursor
            .take_bytes(hash_len)
            .ok_or_else(|| bad("truncated hash"))?;
        let hash = String::from_utf8(hash_bytes.to_vec()).map_err(|_| bad("hash not utf8"))?;
        let in_channels = cursor.take_u32().ok_or_else(|| bad("truncated config"))? as usize;
        let num_classes = cursor.take_u32().ok_or_else(|| bad("truncated config"))? as usize;
        let downsample_factor = cursor.take_u32().ok_or_else(|| bad("truncated config"))? as usize;
        let widths_len = cursor.take_u32().ok_or_else(|| bad("truncated config"))? as usize;
        let mut widths = Vec::with_capacity(widths_len);
        for _ in 0..widths_len {
            widths.push(cursor.take_u32().ok_or_else(|| bad("truncated widths"))? as usize);
        }
        let config = ModelConfig {
            in_channels,
            widths,
            num_classes,
            downsample_factor,
        };
        config
            .validate()
            .map_err(|e| bad(&format!("config invalid: {e}")))?;
        let count = cursor.take_u32().ok_or_else(|| bad("truncated params"))? as usize;
        if count != config.widths.len() + 1 {
            return Err(bad("parameter count does not match config"));
        }
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let ndim = cursor.take_u32().ok_or_else(|| bad("truncated shape"))? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cursor.take_u32().ok_or_else(|| bad("truncated shape"))? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(cursor.take_f64().ok_or_else(|| bad("truncated values"))?);
            }
            tensors.push(Tensor::param(&shape, data));
        }
        if cursor.remaining() != 0 {
            return Err(bad("trailing bytes"));
        }
        let classifier = tensors.pop().expect("count >= 1");
        let velocity = tensors
            .iter()
            .chain(std::iter::once(&classifier))
            .map(|p| vec![0.0; p.numel()])
            .collect();
        Ok((
            SegModel {
                config,
                stage_kernels: tensors,
                classifier,
                velocity,
            },
            hash,
        ))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }
    fn take_bytes(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return None;
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Some(s)
    }
    fn take_u32(&mut self) -> Option<u32> {
        self.take_bytes(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn take_f64(&mut self) -> Option<f64> {
        self.take_bytes(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            in_channels: 2,
            widths: vec![4, 6, 8],
            num_classes: 3,
            downsample_factor: 4,
        }
    }

    fn random_image(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn default_encode_shape() {
        let model = SegModel::init(&ModelConfig::default(), 0);
        let tape = Tape::inference();
        let x = Tensor::zeros(&[3, 64, 64]);
        let f = model.encode(&tape, &x);
        assert_eq!(f.shape(), vec![32, 16, 16]);
    }

    #[test]
    fn zero_input_stays_finite() {
        let model = SegModel::init(&ModelConfig::default(), 1);
        let tape = Tape::inference();
        let x = Tensor::zeros(&[3, 64, 64]);
        let f = model.encode(&tape, &x);
        let logits = model.classify(&tape, &f, 64, 64);
        assert!(logits.is_finite());
    }

    #[test]
    fn classify_shapes_and_zero_classifier_uniform() {
        let cfg = ModelConfig {
            num_classes: 7,
            ..ModelConfig::default()
        };
        let model = SegModel::init(&cfg, 2);
        let tape = Tape::inference();
        let x = random_image(&[3, 64, 64], 5);
        let f = model.encode(&tape, &x);
        let logits = model.classify(&tape, &f, 64, 64);
        assert_eq!(logits.shape(), vec![7, 64, 64]);
        let probs = tape.softmax_channel(&logits);
        for v in probs.data().iter() {
            assert!((v - 1.0 / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbation_stays_inside_receptive_field() {
        // Two stride-2 stages then one stride-1 stage: feature o depends on
        // input columns/rows within |p - 4*o| <= 7 (derived from the conv
        // index arithmetic, independently of the forward code).
        let cfg = tiny_config();
        let model = SegModel::init(&cfg, 3);
        let x0 = random_image(&[2, 16, 16], 7);
        let tape = Tape::inference();
        let base = model.encode(&tape, &x0).to_vec();

        let (py, px) = (10usize, 3usize);
        let mut vals = x0.to_vec();
        vals[py * 16 + px] += 0.5; // channel 0
        let x1 = Tensor::from_vec(&[2, 16, 16], vals);
        let tape2 = Tape::inference();
        let out = model.encode(&tape2, &x1).to_vec();

        let fh = 4usize;
        for c in 0..cfg.feature_dim() {
            for fy in 0..fh {
                for fx in 0..fh {
                    let idx = (c * fh + fy) * fh + fx;
                    if (base[idx] - out[idx]).abs() > 0.0 {
                        let dy = py as i64 - 4 * fy as i64;
                        let dx = px as i64 - 4 * fx as i64;
                        assert!(
                            dy.abs() <= 7 && dx.abs() <= 7,
                            "feature ({fy},{fx}) outside receptive field of pixel ({py},{px})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn classifier_gradient_matches_finite_differences() {
        let cfg = tiny_config();
        let model = SegModel::init(&cfg, 4);
        let x = random_image(&[2, 8, 8], 9);
        let tape = Tape::inference();
        let feat = model.encode(&tape, &x).detach();
        let point = {
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let n = cfg.num_classes * cfg.feature_dim();
            Tensor::from_vec(
                &[cfg.num_classes, cfg.feature_dim(), 1, 1],
                (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            )
        };
        let err = grad_check(
            move |tape, w| {
                let logits = tape.conv2d(&feat, w, 1, 0);
                tape.mean(&logits)
            },
            &point,
            1e-5,
        );
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn poly_schedule_endpoints_and_monotonicity() {
        let optim = OptimConfig {
            base_lr: 0.01,
            max_iters: 100,
            ..OptimConfig::default()
        };
        assert_eq!(poly_lr(&optim, 0), 0.01);
        assert_eq!(poly_lr(&optim, 100), 0.0);
        let mut prev = f64::INFINITY;
        for it in 0..=100 {
            let lr = poly_lr(&optim, it);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn plain_sgd_single_step() {
        let cfg = tiny_config();
        let mut model = SegModel::init(&cfg, 0);
        let p = model.params()[0].clone();
        p.set_data(&vec![1.0; p.numel()]);
        p.accumulate_grad(&vec![1.0; p.numel()]);
        let optim = OptimConfig {
            base_lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            poly_power: 0.9,
            max_iters: usize::MAX >> 1,
        };
        // max_iters huge so lr(0) == base_lr exactly
        model.sgd_step(&optim, 0).unwrap();
        for v in p.data().iter() {
            assert!((v - 0.9).abs() < 1e-15);
        }
        assert!(p.grad().is_none(), "gradients are zeroed after the step");
    }

    #[test]
    fn momentum_recurrence_matches_hand_unrolled_values() {
        // Hand-unrolled: with wd = 0 and constant grad g, v1 = g and
        // v2 = 0.9 g + g = 1.9 g; p2 = p0 - lr(0) v1 - lr(1) v2.
        let cfg = ModelConfig {
            in_channels: 1,
            widths: vec![1],
            num_classes: 2,
            downsample_factor: 2,
        };
        let mut model = SegModel::init(&cfg, 0);
        let p = model.params()[0].clone();
        let n = p.numel();
        p.set_data(&vec![1.0; n]);
        let optim = OptimConfig {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            poly_power: 1.0,
            max_iters: 10,
        };
        let g = 2.0;
        p.accumulate_grad(&vec![g; n]);
        model.sgd_step(&optim, 0).unwrap();
        let after1 = p.value_at(0);
        assert!((after1 - (1.0 - 0.1 * g)).abs() < 1e-15);
        p.accumulate_grad(&vec![g; n]);
        model.sgd_step(&optim, 1).unwrap();
        let lr1 = 0.1 * (1.0 - 0.1);
        let expect = after1 - lr1 * 1.9 * g;
        assert!((p.value_at(0) - expect).abs() < 1e-15);
    }

    #[test]
    #[should_panic(expected = "exhausts schedule")]
    fn step_beyond_horizon_panics() {
        let mut model = SegModel::init(&tiny_config(), 0);
        let optim = OptimConfig {
            max_iters: 5,
            ..OptimConfig::default()
        };
        let _ = model.sgd_step(&optim, 5);
    }

    #[test]
    fn loss_decreases_on_memorizable_batch() {
        use crate::tensor::Tape;
        for seed in 0..5u64 {
            let cfg = tiny_config();
            let mut model = SegModel::init(&cfg, seed);
            let x = random_image(&[2, 8, 8], 100 + seed);
            // fixed random per-pixel class weighting as a stand-in target
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let wdata: Vec<f64> = (0..cfg.num_classes * 64)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let wt = Tensor::from_vec(&[cfg.num_classes, 8, 8], wdata);
            let optim = OptimConfig {
                base_lr: 0.05,
                momentum: 0.0,
                weight_decay: 0.0,
                poly_power: 1.0,
                max_iters: usize::MAX >> 1,
            };
            let mut prev = f64::INFINITY;
            for step in 0..10 {
                let tape = Tape::new();
                let f = model.encode(&tape, &x);
                let logits = model.classify(&tape, &f, 8, 8);
                let probs = tape.softmax_channel(&logits);
                let loss = tape.mean(&tape.mul(&probs, &wt));
                let v = loss.item();
                assert!(v < prev, "seed {seed} step {step}: {v} !< {prev}");
                prev = v;
                tape.backward(&loss);
                model.sgd_step(&optim, 0).unwrap();
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = tiny_config();
        let mut model = SegModel::init(&cfg, 11);
        // make parameters non-trivial
        let x = random_image(&[2, 8, 8], 1);
        let tape = Tape::new();
        let f = model.encode(&tape, &x);
        let logits = model.classify(&tape, &f, 8, 8);
        let loss = tape.mean(&tape.mul(&logits, &logits));
        tape.backward(&loss);
        let optim = OptimConfig {
            max_iters: 10,
            ..OptimConfig::default()
        };
        model.sgd_step(&optim, 0).unwrap();

        model.save(&path, "deadbeef").unwrap();
        let (loaded, hash) = SegModel::load(&path).unwrap();
        assert_eq!(hash, "deadbeef");
        assert_eq!(loaded.config, cfg);

        let probe = random_image(&[2, 8, 8], 2);
        let t1 = Tape::inference();
        let o1 = model
            .classify(&t1, &model.encode(&t1, &probe), 8, 8)
            .to_vec();
        let t2 = Tape::inference();
        let o2 = loaded
            .classify(&t2, &loaded.encode(&t2, &probe), 8, 8)
            .to_vec();
        assert_eq!(o1, o2);
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not_a_ckpt.bin");
        std::fs::write(&path, b"hello world").unwrap();
        assert!(SegModel::load(&path).is_err());
    }

    #[test]
    fn param_count_is_function_of_config() {
        let cfg = tiny_config();
        let a = SegModel::init(&cfg, 0);
        let b = SegModel::init(&cfg, 999);
        assert_eq!(a.param_count(), b.param_count());
        // 2->4, 4->6, 6->8 conv3x3 stacks plus 8->3 classifier
        let expect = 4 * 2 * 9 + 6 * 4 * 9 + 8 * 6 * 9 + 3 * 8;
        assert_eq!(a.param_count(), expect);
    }
}
