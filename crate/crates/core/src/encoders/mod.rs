//! Unimodal encoders with exact reverse-mode gradients.
//!
//! * [`shape`]: per-point MLP, global max-pool, fusion MLP over `[point; global]`,
//!   segmentation head and per-part average pooling.
//! * [`text`]: word embeddings followed by a bidirectional gated recurrent
//!   encoder whose forward and backward states are concatenated per word.
//!
//! Every forward pass returns a cache; the matching `backward` accumulates
//! parameter gradients into a [`ModelParams`] used as a gradient buffer.

pub mod checkpoint;
pub mod shape;
pub mod text;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

pub use shape::{encode_shape, ShapeCache, ShapeEncoding};
pub use text::{encode_text, tokenize, TextCache, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden width of the per-point MLP.
    pub point_hidden: usize,
    /// Width of per-point features before fusion.
    pub point_dim: usize,
    /// Joint embedding width; must be even (two recurrent directions of `dim / 2`).
    pub dim: usize,
    pub seg_classes: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
}

impl ModelConfig {
    /// Desk-scale defaults; `vocab_size` and `seg_classes` come from the data.
    pub fn desk(vocab_size: usize, seg_classes: usize) -> Self {
        Self {
            point_hidden: 64,
            point_dim: 64,
            dim: 64,
            seg_classes,
            vocab_size,
            embed_dim: 32,
        }
    }

    pub fn hidden(&self) -> usize {
        self.dim / 2
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.point_hidden,
            self.point_dim,
            self.dim,
            self.seg_classes,
            self.vocab_size,
            self.embed_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid(format!("zero dimension in {self:?}")));
        }
        if self.dim % 2 != 0 {
            return Err(Error::invalid(format!("feature width {} must be even", self.dim)));
        }
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocabulary must hold the two reserved tokens"));
        }
        Ok(())
    }
}

/// Weights of one recurrent direction. Columns are grouped as
/// `[update | reset | candidate]`, each `hidden` wide.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_in: Array2<f64>,
    pub w_hid: Array2<f64>,
    pub bias: Array2<f64>,
}

/// All trainable tensors. Biases are stored as `1 x n` rows so that every
/// tensor is two-dimensional.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub pt_w1: Array2<f64>,
    pub pt_b1: Array2<f64>,
    pub pt_w2: Array2<f64>,
    pub pt_b2: Array2<f64>,
    pub fuse_w1: Array2<f64>,
    pub fuse_b1: Array2<f64>,
    pub fuse_w2: Array2<f64>,
    pub fuse_b2: Array2<f64>,
    pub seg_w: Array2<f64>,
    pub seg_b: Array2<f64>,
    pub embed: Array2<f64>,
    pub gru_fwd: GruParams,
    pub gru_bwd: GruParams,
}

pub const TENSOR_NAMES: [&str; 17] = [
    "pt_w1",
    "pt_b1",
    "pt_w2",
    "pt_b2",
    "fuse_w1",
    "fuse_b1",
    "fuse_w2",
    "fuse_b2",
    "seg_w",
    "seg_b",
    "embed",
    "gru_fwd.w_in",
    "gru_fwd.w_hid",
    "gru_fwd.bias",
    "gru_bwd.w_in",
    "gru_bwd.w_hid",
    "gru_bwd.bias",
];

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Self {
        let c = config;
        let h = c.hidden();
        let gru = || GruParams {
            w_in: Array2::zeros((c.embed_dim, 3 * h)),
            w_hid: Array2::zeros((h, 3 * h)),
            bias: Array2::zeros((1, 3 * h)),
        };
        Self {
            config,
            pt_w1: Array2::zeros((3, c.point_hidden)),
            pt_b1: Array2::zeros((1, c.point_hidden)),
            pt_w2: Array2::zeros((c.point_hidden, c.point_dim)),
            pt_b2: Array2::zeros((1, c.point_dim)),
            fuse_w1: Array2::zeros((2 * c.point_dim, c.dim)),
            fuse_b1: Array2::zeros((1, c.dim)),
            fuse_w2: Array2::zeros((c.dim, c.dim)),
            fuse_b2: Array2::zeros((1, c.dim)),
            seg_w: Array2::zeros((c.dim, c.seg_classes)),
            seg_b: Array2::zeros((1, c.seg_classes)),
            embed: Array2::zeros((c.vocab_size, c.embed_dim)),
            gru_fwd: gru(),
            gru_bwd: gru(),
        }
    }

    /// Weight matrices drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
    /// The embedding table uses its row width as fan-in.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut r = rng::stream(seed);
        for (name, t) in p.tensors_mut() {
            if is_bias(name) {
                continue;
            }
            let fan_in = if name == "embed" { t.ncols() } else { t.nrows() };
            let bound = 1.0 / (fan_in as f64).sqrt();
            t.mapv_inplace(|_| r.random_range(-bound..bound));
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    pub fn tensors(&self) -> [(&'static str, &Array2<f64>); 17] {
        [
            (TENSOR_NAMES[0], &self.pt_w1),
            (TENSOR_NAMES[1], &self.pt_b1),
            (TENSOR_NAMES[2], &self.pt_w2),
            (TENSOR_NAMES[3], &self.pt_b2),
            (TENSOR_NAMES[4], &self.fuse_w1),
            (TENSOR_NAMES[5], &self.fuse_b1),
            (TENSOR_NAMES[6], &self.fuse_w2),
            (TENSOR_NAMES[7], &self.fuse_b2),
            (TENSOR_NAMES[8], &self.seg_w),
            (TENSOR_NAMES[9], &self.seg_b),
            (TENSOR_NAMES[10], &self.embed),
            (TENSOR_NAMES[11], &self.gru_fwd.w_in),
            (TENSOR_NAMES[12], &self.gru_fwd.w_hid),
            (TENSOR_NAMES[13], &self.gru_fwd.bias),
            (TENSOR_NAMES[14], &self.gru_bwd.w_in),
            (TENSOR_NAMES[15], &self.gru_bwd.w_hid),
            (TENSOR_NAMES[16], &self.gru_bwd.bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Array2<f64>); 17] {
        [
            (TENSOR_NAMES[0], &mut self.pt_w1),
            (TENSOR_NAMES[1], &mut self.pt_b1),
            (TENSOR_NAMES[2], &mut self.pt_w2),
            (TENSOR_NAMES[3], &mut self.pt_b2),
            (TENSOR_NAMES[4], &mut self.fuse_w1),
            (TENSOR_NAMES[5], &mut self.fuse_b1),
            (TENSOR_NAMES[6], &mut self.fuse_w2),
            (TENSOR_NAMES[7], &mut self.fuse_b2),
            (TENSOR_NAMES[8], &mut self.seg_w),
            (TENSOR_NAMES[9], &mut self.seg_b),
            (TENSOR_NAMES[10], &mut self.embed),
            (TENSOR_NAMES[11], &mut self.gru_fwd.w_in),
            (TENSOR_NAMES[12], &mut self.gru_fwd.w_hid),
            (TENSOR_NAMES[13], &mut self.gru_fwd.bias),
            (TENSOR_NAMES[14], &mut self.gru_bwd.w_in),
            (TENSOR_NAMES[15], &mut self.gru_bwd.w_hid),
            (TENSOR_NAMES[16], &mut self.gru_bwd.bias),
        ]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.tensors()
            .iter()
            .zip(other.tensors().iter())
            .all(|((_, a), (_, b))| a.dim() == b.dim())
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch("parameter sets differ in shape".into()));
        }
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(scale, b);
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * s);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

pub fn is_bias(name: &str) -> bool {
    name.ends_with("bias") || matches!(name, "pt_b1" | "pt_b2" | "fuse_b1" | "fuse_b2" | "seg_b")
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
