//! Losses, optimizer, gradient verification and the training loop.
//!
//! The training objective is `L_SEG + L_S2T + L_T2S`: per-point segmentation
//! cross-entropy plus InfoNCE in both retrieval directions over a `B x B`
//! similarity matrix scaled by `1/tau`. The ablation replaces the InfoNCE
//! terms by a semi-hard triplet loss.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{generate_any_stream, AugmentOptions, CaptionTemplate, GeneratedPair};
use crate::encoders::checkpoint::Checkpoint;
use crate::encoders::{shape, text, tokenize, ModelConfig, ModelParams, Vocab, TENSOR_NAMES};
use crate::evalharness::{evaluate, EvalOptions, Gallery, MetricsReport};
use crate::geometry::PointCloud;
use crate::library::ComponentLibrary;
use crate::matching::{similarity, similarity_backward, SimilarityCache, SimilarityMode, SinkhornConfig};
use crate::rng;
use crate::{Error, Result};

fn log_sum_exp(row: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = row.clone().fold(f64::NEG_INFINITY, f64::max);
    max + row.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_square(sim: &Array2<f64>) -> Result<usize> {
    let (r, c) = sim.dim();
    if r != c || r == 0 {
        return Err(Error::ShapeMismatch(format!("similarity matrix must be square and non-empty, got {r}x{c}")));
    }
    Ok(r)
}

/// Shape-to-text InfoNCE: softmax over each row of `sim / tau` with the
/// diagonal as target, averaged over rows. Returns the loss and `dL/dsim`.
pub fn infonce_s2t(sim: &Array2<f64>, tau: f64) -> Result<(f64, Array2<f64>)> {
    let b = check_square(sim)?;
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros((b, b));
    for i in 0..b {
        let row = sim.row(i);
        let lse = log_sum_exp(row.iter().map(|v| v / tau));
        loss += lse - sim[[i, i]] / tau;
        for j in 0..b {
            let p = (sim[[i, j]] / tau - lse).exp();
            grad[[i, j]] = (p - if i == j { 1.0 } else { 0.0 }) / (tau * b as f64);
        }
    }
    Ok((loss / b as f64, grad))
}

/// Text-to-shape InfoNCE: the shape-to-text loss of the transposed matrix.
pub fn infonce_t2s(sim: &Array2<f64>, tau: f64) -> Result<(f64, Array2<f64>)> {
    let (loss, grad) = infonce_s2t(&sim.t().to_owned(), tau)?;
    Ok((loss, grad.reversed_axes()))
}

/// Mean softmax cross-entropy over points. Returns the loss and `dL/dlogits`.
pub fn seg_cross_entropy(logits: &Array2<f64>, labels: &[u32]) -> Result<(f64, Array2<f64>)> {
    let (n, k) = logits.dim();
    if labels.len() != n || n == 0 {
        return Err(Error::ShapeMismatch(format!("{} labels for {n} points", labels.len())));
    }
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros((n, k));
    for (i, &label) in labels.iter().enumerate() {
        let label = label as usize;
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let row = logits.row(i);
        let lse = log_sum_exp(row.iter().copied());
        loss += lse - row[label];
        for c in 0..k {
            grad[[i, c]] = ((row[c] - lse).exp() - if c == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Semi-hard triplet loss with shapes as anchors (rows). For anchor `i` the
/// negative is the most similar `j != i` with `sim_ij < sim_ii + margin`,
/// or the most similar overall when none qualifies; the hinge
/// `max(0, sim_ij - sim_ii + margin)` is averaged over anchors.
pub fn triplet_s2t(sim: &Array2<f64>, margin: f64) -> Result<(f64, Array2<f64>)> {
    let b = check_square(sim)?;
    if b < 2 {
        return Err(Error::invalid("triplet loss needs at least two pairs"));
    }
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros((b, b));
    for i in 0..b {
        let pos = sim[[i, i]];
        let hardest = |pred: &dyn Fn(f64) -> bool| {
            (0..b)
                .filter(|&j| j != i && pred(sim[[i, j]]))
                .fold(None, |best: Option<usize>, j| match best {
                    Some(k) if sim[[i, k]] >= sim[[i, j]] => Some(k),
                    _ => Some(j),
                })
        };
        let neg = hardest(&|v| v < pos + margin)
            .or_else(|| hardest(&|_| true))
            .expect("b >= 2");
        let h = sim[[i, neg]] - pos + margin;
        if h > 0.0 {
            loss += h;
            grad[[i, neg]] += 1.0 / b as f64;
            grad[[i, i]] -= 1.0 / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}

pub fn triplet_t2s(sim: &Array2<f64>, margin: f64) -> Result<(f64, Array2<f64>)> {
    let (loss, grad) = triplet_s2t(&sim.t().to_owned(), margin)?;
    Ok((loss, grad.reversed_axes()))
}

/// Both directions summed.
pub fn semi_hard_triplet(sim: &Array2<f64>, margin: f64) -> Result<f64> {
    Ok(triplet_s2t(sim, margin)?.0 + triplet_t2s(sim, margin)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub seg: f64,
    pub s2t: f64,
    pub t2s: f64,
}

/// `L_SEG + L_S2T + L_T2S`; a non-finite component is reported by name.
pub fn total_loss(c: &LossComponents) -> Result<f64> {
    for (name, v) in [("L_SEG", c.seg), ("L_S2T", c.s2t), ("L_T2S", c.t2s)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component {name} ({v})")));
        }
    }
    Ok(c.seg + c.s2t + c.t2s)
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Clips `grads` to global norm `clip`, then applies one bias-corrected Adam
/// update. Returns the gradient norm before clipping.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    lr: f64,
    clip: f64,
) -> Result<f64> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) || !params.same_shape(&state.v) {
        return Err(Error::ShapeMismatch("optimizer tensors differ from parameters".into()));
    }
    let norm = grads.sq_norm().sqrt();
    let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut());
    for ((((_, p), (_, g)), (_, m)), (_, v)) in tensors {
        ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            let g = g * scale;
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        });
    }
    Ok(norm)
}

/// Linear decay from `base` at step 0 to zero at `total`.
pub fn decayed_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - step.min(total) as f64 / total as f64)
}

// ---------------------------------------------------------------------------
// Batch loss and gradients

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    #[default]
    InfoNce,
    Triplet,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "infonce" => Ok(Self::InfoNce),
            "triplet" => Ok(Self::Triplet),
            other => Err(Error::invalid(format!("unknown loss mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub similarity: SimilarityMode,
    pub loss: LossMode,
    pub margin: f64,
    pub sinkhorn: SinkhornConfig,
    pub use_seg: bool,
    pub use_s2t: bool,
    pub use_t2s: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            similarity: SimilarityMode::Emd,
            loss: LossMode::InfoNce,
            margin: 0.2,
            sinkhorn: SinkhornConfig::default(),
            use_seg: true,
            use_s2t: true,
            use_t2s: true,
        }
    }
}

/// A labelled shape and its tokenized caption.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub shape: PointCloud,
    pub tokens: Vec<usize>,
}

impl Example {
    pub fn from_pair(pair: &GeneratedPair, vocab: &Vocab) -> Self {
        Self {
            shape: pair.shape.clone(),
            tokens: tokenize(&pair.caption, vocab),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub components: LossComponents,
    pub total: f64,
    pub sim: Array2<f64>,
    pub grads: ModelParams,
}

/// Forward and backward pass over one batch. Disabled components contribute
/// zero to both the value and the gradient.
pub fn batch_loss(params: &ModelParams, batch: &[Example], cfg: &LossConfig) -> Result<BatchResult> {
    let b = batch.len();
    if b < 2 && (cfg.use_s2t || cfg.use_t2s) {
        return Err(Error::invalid("contrastive terms need a batch of at least two"));
    }
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let shapes: Vec<_> = batch
        .par_iter()
        .map(|ex| shape::encode_shape(&ex.shape, params))
        .collect::<Result<_>>()?;
    let texts: Vec<_> = batch
        .par_iter()
        .map(|ex| text::encode_text(&ex.tokens, params))
        .collect::<Result<_>>()?;

    let contrastive = cfg.use_s2t || cfg.use_t2s;
    let cells: Vec<(f64, SimilarityCache)> = if contrastive {
        (0..b * b)
            .into_par_iter()
            .map(|k| {
                similarity(
                    shapes[k / b].0.part_features.view(),
                    texts[k % b].0.view(),
                    cfg.similarity,
                    &cfg.sinkhorn,
                )
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let sim = if contrastive {
        Array2::from_shape_fn((b, b), |(i, j)| cells[i * b + j].0)
    } else {
        Array2::zeros((b, b))
    };

    let mut components = LossComponents::default();
    let mut d_sim = Array2::<f64>::zeros((b, b));
    if cfg.use_s2t {
        let (l, g) = match cfg.loss {
            LossMode::InfoNce => infonce_s2t(&sim, cfg.tau)?,
            LossMode::Triplet => triplet_s2t(&sim, cfg.margin)?,
        };
        components.s2t = l;
        d_sim += &g;
    }
    if cfg.use_t2s {
        let (l, g) = match cfg.loss {
            LossMode::InfoNce => infonce_t2s(&sim, cfg.tau)?,
            LossMode::Triplet => triplet_t2s(&sim, cfg.margin)?,
        };
        components.t2s = l;
        d_sim += &g;
    }
    let mut d_segs: Vec<Option<Array2<f64>>> = vec![None; b];
    if cfg.use_seg {
        for ((ex, (enc, _)), slot) in batch.iter().zip(&shapes).zip(d_segs.iter_mut()) {
            let labels = ex
                .shape
                .labels()
                .ok_or_else(|| Error::invalid("segmentation loss needs labelled shapes"))?;
            let (l, g) = seg_cross_entropy(&enc.seg_logits, labels)?;
            components.seg += l / b as f64;
            *slot = Some(g / b as f64);
        }
    }
    let total = total_loss(&components)?;

    // upstream gradients of part and word features
    let per_cell: Vec<Option<(Array2<f64>, Array2<f64>)>> = cells
        .par_iter()
        .enumerate()
        .map(|(k, (_, cache))| {
            let d = d_sim[[k / b, k % b]];
            (d != 0.0).then(|| similarity_backward(cache, d))
        })
        .collect();
    let mut d_parts: Vec<Array2<f64>> = shapes.iter().map(|(e, _)| Array2::zeros(e.part_features.dim())).collect();
    let mut d_words: Vec<Array2<f64>> = texts.iter().map(|(w, _)| Array2::zeros(w.dim())).collect();
    for (k, cell) in per_cell.into_iter().enumerate() {
        if let Some((ds, dw)) = cell {
            d_parts[k / b] += &ds;
            d_words[k % b] += &dw;
        }
    }

    let shape_grads: Vec<ModelParams> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut g = params.zeros_like();
            shape::backward(&shapes[i].1, params, contrastive.then_some(&d_parts[i]), d_segs[i].as_ref(), &mut g)?;
            if contrastive {
                text::backward(&texts[i].1, params, &d_words[i], &mut g)?;
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut grads = params.zeros_like();
    for g in &shape_grads {
        grads.add_scaled(g, 1.0)?;
    }
    Ok(BatchResult {
        components,
        total,
        sim,
        grads,
    })
}

// ---------------------------------------------------------------------------
// Gradient check

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    /// Total coordinates; spread evenly over all tensors.
    pub coordinates: usize,
    pub step: f64,
    pub seed: u64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            coordinates: 204,
            step: 1e-5,
            seed: 0,
            floor: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateCheck {
    pub tensor: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub coordinates: usize,
    /// Sampled coordinates skipped because the stencil crossed a kink.
    pub kinks: usize,
    pub max_rel_err: f64,
    /// Worst coordinate of every tensor, in tensor order.
    pub worst: Vec<CoordinateCheck>,
}

impl std::fmt::Display for FdReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{} coordinates ({} skipped at kinks), max relative error {:.3e}",
            self.coordinates, self.kinks, self.max_rel_err
        )?;
        for w in &self.worst {
            writeln!(
                f,
                "  {:<14} [{:>3},{:>3}] analytic {:>13.6e} numeric {:>13.6e} rel {:.3e}",
                w.tensor, w.row, w.col, w.analytic, w.numeric, w.rel_err
            )?;
        }
        Ok(())
    }
}

/// Five-point central differences of the batch loss against [`batch_loss`]
/// gradients. Embedding coordinates are drawn from rows of tokens present in
/// the batch; coordinates whose stencil flips a ReLU gate or max-pool winner
/// are replaced.
pub fn finite_difference_check(
    params: &ModelParams,
    batch: &[Example],
    loss: &LossConfig,
    fd: &FdConfig,
) -> Result<FdReport> {
    let analytic = batch_loss(params, batch, loss)?.grads;
    let mut used_tokens: Vec<usize> = batch.iter().flat_map(|e| e.tokens.iter().copied()).collect();
    used_tokens.sort_unstable();
    used_tokens.dedup();

    // candidate coordinates per tensor; embedding rows only for tokens in the batch
    let candidates: Vec<Vec<(usize, usize)>> = params
        .tensors()
        .iter()
        .map(|(name, tensor)| {
            let (rows, cols) = tensor.dim();
            let rows: Vec<usize> = if *name == "embed" { used_tokens.clone() } else { (0..rows).collect() };
            rows.iter().flat_map(|&r| (0..cols).map(move |c| (r, c))).collect()
        })
        .collect();
    // even quotas, with what small tensors cannot take handed to the others
    let mut quota = vec![0usize; candidates.len()];
    let mut remaining = fd.coordinates.max(candidates.len());
    while remaining > 0 {
        let open: Vec<usize> = (0..candidates.len()).filter(|&t| quota[t] < candidates[t].len()).collect();
        if open.is_empty() {
            break;
        }
        let share = remaining.div_ceil(open.len());
        for t in open {
            let take = share.min(candidates[t].len() - quota[t]).min(remaining);
            quota[t] += take;
            remaining -= take;
        }
    }
    let eval = |p: &ModelParams| -> Result<f64> { Ok(batch_loss(p, batch, loss)?.total) };
    let patterns = |p: &ModelParams| -> Result<Vec<Vec<usize>>> {
        batch
            .iter()
            .map(|e| shape::encode_shape(&e.shape, p).map(|(_, c)| shape::branch_pattern(&c)))
            .collect()
    };
    let base_pattern = patterns(params)?;
    let h = fd.step;
    // coordinates whose stencil crosses a ReLU gate or max-pool switch sit on a
    // kink of the loss and are replaced by others from the same tensor
    let per_tensor: Vec<(Vec<CoordinateCheck>, usize)> = candidates
        .par_iter()
        .enumerate()
        .map(|(t, cands)| {
            let mut r = rng::stream(rng::derive(fd.seed, t as u64));
            let order = index::sample(&mut r, cands.len(), cands.len());
            let mut done = Vec::with_capacity(quota[t]);
            let mut kinks = 0;
            for k in order {
                if done.len() == quota[t] {
                    break;
                }
                let (row, col) = cands[k];
                let mut p = params.clone();
                let orig = p.tensors()[t].1[[row, col]];
                let mut f = [0.0; 4];
                let mut smooth = true;
                for (slot, offset) in [-2.0, -1.0, 1.0, 2.0].into_iter().enumerate() {
                    p.tensors_mut()[t].1[[row, col]] = orig + offset * h;
                    if patterns(&p)? != base_pattern {
                        smooth = false;
                        break;
                    }
                    f[slot] = eval(&p)?;
                }
                if !smooth {
                    kinks += 1;
                    continue;
                }
                // five-point central stencil
                let numeric = (8.0 * (f[2] - f[1]) - (f[3] - f[0])) / (12.0 * h);
                let a = analytic.tensors()[t].1[[row, col]];
                let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(fd.floor);
                done.push(CoordinateCheck {
                    tensor: TENSOR_NAMES[t].to_string(),
                    row,
                    col,
                    analytic: a,
                    numeric,
                    rel_err,
                });
            }
            Ok((done, kinks))
        })
        .collect::<Result<_>>()?;
    let kinks = per_tensor.iter().map(|(_, k)| k).sum();
    let checks: Vec<CoordinateCheck> = per_tensor.into_iter().flat_map(|(c, _)| c).collect();

    let mut worst: Vec<CoordinateCheck> = Vec::new();
    for name in TENSOR_NAMES {
        if let Some(w) = checks
            .iter()
            .filter(|c| c.tensor == name)
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        {
            worst.push(w.clone());
        }
    }
    Ok(FdReport {
        coordinates: checks.len(),
        kinks,
        max_rel_err: checks.iter().map(|c| c.rel_err).fold(0.0, f64::max),
        worst,
    })
}

/// A small fixed problem for gradient verification: `dim = 8`, a batch of
/// three generated pairs of 32 points, captions cut to at most 12 words, and
/// Sinkhorn run for a fixed number of iterations so that the computed
/// function is smooth in the parameters.
pub fn gradient_check_fixture(seed: u64) -> Result<(ModelParams, Vec<Example>, LossConfig)> {
    let lib = crate::library::synthetic_library(seed, 64)?;
    let tmpl = CaptionTemplate::default();
    let opts = AugmentOptions {
        n_points: 32,
        ..AugmentOptions::default()
    };
    let vocab = training_vocab(&lib, &tmpl);
    let batch: Vec<Example> = generate_any_stream(&lib, &tmpl, &opts, 3, rng::fork(seed, "fd"))?
        .iter()
        .map(|p| {
            let mut ex = Example::from_pair(p, &vocab);
            ex.tokens.truncate(12);
            ex
        })
        .collect();
    let cfg = ModelConfig {
        point_hidden: 8,
        point_dim: 8,
        dim: 8,
        seg_classes: seg_classes(&lib),
        vocab_size: vocab.len(),
        embed_dim: 8,
    };
    let params = ModelParams::init(cfg, rng::fork(seed, "init"))?;
    let loss = LossConfig {
        sinkhorn: SinkhornConfig {
            tol: 0.0,
            max_iter: 50,
            ..SinkhornConfig::default()
        },
        ..LossConfig::default()
    };
    Ok((params, batch, loss))
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub tau: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub clip: f64,
    pub seed: u64,
    pub inter: bool,
    pub intra: bool,
    /// Train on a fixed pregenerated pool instead of fresh pairs every step.
    pub no_augment: bool,
    pub pool_size: usize,
    pub similarity: SimilarityMode,
    pub loss: LossMode,
    pub margin: f64,
    pub use_seg: bool,
    pub use_s2t: bool,
    pub use_t2s: bool,
    pub dim: usize,
    pub point_hidden: usize,
    pub point_dim: usize,
    pub embed_dim: usize,
    pub n_points: usize,
    pub theta: f64,
    pub sinkhorn_eps: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
    pub gallery_size: usize,
    /// Evaluate on the held-out gallery every this many epochs (0: only at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            tau: 0.1,
            epochs: 20,
            steps_per_epoch: 25,
            lr: 4e-4,
            clip: 2.0,
            seed: 0,
            inter: true,
            intra: true,
            no_augment: false,
            pool_size: 256,
            similarity: SimilarityMode::Emd,
            loss: LossMode::InfoNce,
            margin: 0.2,
            use_seg: true,
            use_s2t: true,
            use_t2s: true,
            dim: 64,
            point_hidden: 64,
            point_dim: 64,
            embed_dim: 32,
            n_points: 256,
            theta: 0.95,
            sinkhorn_eps: 0.05,
            sinkhorn_iters: 200,
            sinkhorn_tol: 1e-6,
            gallery_size: 64,
            eval_every: 0,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 30] = [
        "batch_size",
        "tau",
        "epochs",
        "steps_per_epoch",
        "lr",
        "clip",
        "seed",
        "inter",
        "intra",
        "no_augment",
        "pool_size",
        "similarity",
        "loss",
        "margin",
        "use_seg",
        "use_s2t",
        "use_t2s",
        "dim",
        "point_hidden",
        "point_dim",
        "embed_dim",
        "n_points",
        "theta",
        "sinkhorn_eps",
        "sinkhorn_iters",
        "sinkhorn_tol",
        "gallery_size",
        "eval_every",
        "threads",
        "library",
    ];

    /// Sets one key from its text form. `threads` and `library` are accepted
    /// but belong to the caller.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = || Error::invalid(format!("bad value `{v}` for `{key}`"));
        macro_rules! num {
            ($field:expr) => {
                $field = v.parse().map_err(|_| bad())?
            };
        }
        macro_rules! flag {
            ($field:expr) => {
                $field = parse_bool(v).ok_or_else(bad)?
            };
        }
        match key {
            "batch_size" => num!(self.batch_size),
            "tau" => num!(self.tau),
            "epochs" => num!(self.epochs),
            "steps_per_epoch" => num!(self.steps_per_epoch),
            "lr" => num!(self.lr),
            "clip" => num!(self.clip),
            "seed" => num!(self.seed),
            "inter" => flag!(self.inter),
            "intra" => flag!(self.intra),
            "no_augment" => flag!(self.no_augment),
            "pool_size" => num!(self.pool_size),
            "similarity" => self.similarity = v.parse()?,
            "loss" => self.loss = v.parse()?,
            "margin" => num!(self.margin),
            "use_seg" => flag!(self.use_seg),
            "use_s2t" => flag!(self.use_s2t),
            "use_t2s" => flag!(self.use_t2s),
            "dim" => num!(self.dim),
            "point_hidden" => num!(self.point_hidden),
            "point_dim" => num!(self.point_dim),
            "embed_dim" => num!(self.embed_dim),
            "n_points" => num!(self.n_points),
            "theta" => num!(self.theta),
            "sinkhorn_eps" => num!(self.sinkhorn_eps),
            "sinkhorn_iters" => num!(self.sinkhorn_iters),
            "sinkhorn_tol" => num!(self.sinkhorn_tol),
            "gallery_size" => num!(self.gallery_size),
            "eval_every" => num!(self.eval_every),
            "threads" | "library" => {}
            other => return Err(Error::invalid(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let contrastive = self.use_s2t || self.use_t2s;
        if contrastive && self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2 for contrastive terms"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::invalid("batch_size, epochs and steps_per_epoch must be positive"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau must be positive"));
        }
        if !(self.lr >= 0.0) || !(self.clip >= 0.0) {
            return Err(Error::invalid("lr and clip must be nonnegative"));
        }
        if !(self.sinkhorn_eps > 0.0) || self.sinkhorn_iters == 0 {
            return Err(Error::invalid("sinkhorn_eps and sinkhorn_iters must be positive"));
        }
        if self.no_augment && self.pool_size < self.batch_size {
            return Err(Error::invalid("pool_size must hold at least one batch"));
        }
        if self.n_points == 0 || self.gallery_size == 0 {
            return Err(Error::invalid("n_points and gallery_size must be positive"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            similarity: self.similarity,
            loss: self.loss,
            margin: self.margin,
            sinkhorn: self.sinkhorn(),
            use_seg: self.use_seg,
            use_s2t: self.use_s2t,
            use_t2s: self.use_t2s,
        }
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig {
            epsilon: self.sinkhorn_eps,
            max_iter: self.sinkhorn_iters,
            tol: self.sinkhorn_tol,
        }
    }

    pub fn augment_options(&self) -> AugmentOptions {
        AugmentOptions {
            n_points: self.n_points,
            theta: self.theta,
            inter: self.inter,
            intra: self.intra,
        }
    }

    pub fn model_config(&self, vocab_size: usize, seg_classes: usize) -> ModelConfig {
        ModelConfig {
            point_hidden: self.point_hidden,
            point_dim: self.point_dim,
            dim: self.dim,
            seg_classes,
            vocab_size,
            embed_dim: self.embed_dim,
        }
    }
}

/// Every word the generator can emit: part captions, category names and the
/// template's fixed text.
pub fn training_vocab(lib: &ComponentLibrary, tmpl: &CaptionTemplate) -> Vocab {
    let mut texts: Vec<&str> = lib.records().iter().map(|r| r.caption.as_str()).collect();
    texts.extend(lib.schemas().iter().map(|s| s.category.as_str()));
    texts.extend([tmpl.pattern.as_str(), tmpl.separator.as_str(), tmpl.conjunction.as_str()]);
    Vocab::build(texts)
}

/// Segmentation classes: one per slot of the widest schema.
pub fn seg_classes(lib: &ComponentLibrary) -> usize {
    lib.schemas().iter().map(|s| s.slots.len()).max().unwrap_or(1)
}

/// The held-out gallery is drawn from a stream that training never touches,
/// always with both adjustments enabled.
pub fn heldout_gallery(lib: &ComponentLibrary, tmpl: &CaptionTemplate, cfg: &TrainConfig) -> Result<Vec<GeneratedPair>> {
    let opts = AugmentOptions {
        inter: true,
        intra: true,
        ..cfg.augment_options()
    };
    generate_any_stream(lib, tmpl, &opts, cfg.gallery_size, rng::fork(cfg.seed, "gallery"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub seg: f64,
    pub s2t: f64,
    pub t2s: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub s2t: MetricsReport,
    pub t2s: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub vocab: Vocab,
    pub epochs: Vec<EpochRecord>,
    pub evals: Vec<EvalRecord>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.pfck";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LOSS_FILE: &str = "loss.csv";
pub const METRICS_FILE: &str = "metrics.jsonl";

pub fn loss_csv(epochs: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,L_SEG,L_S2T,L_T2S,total\n");
    for e in epochs {
        let _ = writeln!(out, "{},{},{},{},{}", e.epoch, e.seg, e.s2t, e.t2s, e.total);
    }
    out
}

/// Reads the vocabulary stored in a checkpoint's metadata.
pub fn checkpoint_vocab(ck: &Checkpoint) -> Result<Vocab> {
    let tokens = ck
        .meta
        .get("vocab")
        .and_then(|v| v.as_array())
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no vocabulary".into()))?;
    let mut text = String::new();
    for t in tokens {
        text.push_str(t.as_str().ok_or_else(|| Error::Checkpoint("vocabulary entry is not a string".into()))?);
        text.push('\n');
    }
    let vocab = Vocab::parse(&text)?;
    if vocab.len() != ck.params.config.vocab_size {
        return Err(Error::Checkpoint("vocabulary size disagrees with the model".into()));
    }
    Ok(vocab)
}

/// Training options read from a checkpoint, for evaluation with the same matching.
pub fn checkpoint_train_config(ck: &Checkpoint) -> Option<TrainConfig> {
    ck.meta.get("train").and_then(|v| serde_json::from_value(v.clone()).ok())
}

fn make_checkpoint(
    params: &ModelParams,
    adam: &AdamState,
    step: usize,
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(params.clone());
    for (name, t) in adam.m.tensors() {
        ck.extra.push((format!("adam.m.{name}"), t.clone()));
    }
    for (name, t) in adam.v.tensors() {
        ck.extra.push((format!("adam.v.{name}"), t.clone()));
    }
    ck.meta.insert("step".into(), serde_json::json!(step));
    ck.meta.insert("adam_step".into(), serde_json::json!(adam.step));
    ck.meta.insert("train".into(), serde_json::to_value(cfg)?);
    let tokens: Vec<&str> = (0..vocab.len()).map(|i| vocab.token(i).expect("in range")).collect();
    ck.meta.insert("vocab".into(), serde_json::json!(tokens));
    Ok(ck)
}

fn restore(ck: &Checkpoint) -> Result<(ModelParams, AdamState, usize)> {
    let params = ck.params.clone();
    let mut adam = AdamState::new(&params);
    for (prefix, target) in [("adam.m.", &mut adam.m), ("adam.v.", &mut adam.v)] {
        for (name, t) in target.tensors_mut() {
            let stored = ck
                .extra(&format!("{prefix}{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {prefix}{name}")))?;
            if stored.dim() != t.dim() {
                return Err(Error::Checkpoint(format!("optimizer tensor {prefix}{name} has the wrong shape")));
            }
            t.assign(stored);
        }
    }
    let step = ck.meta.get("step").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    adam.step = ck.meta.get("adam_step").and_then(|v| v.as_u64()).unwrap_or(step as u64);
    Ok((params, adam, step))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Trains on online-augmented batches. Batch `t` is generated from a seed
/// derived from `(seed, t)` so a resumed run sees the same data as an
/// uninterrupted one. With `out`, the checkpoint, vocabulary, loss curve and
/// metrics are written there; on divergence the last good checkpoint is
/// written before the error is returned.
pub fn train(
    cfg: &TrainConfig,
    lib: &ComponentLibrary,
    tmpl: &CaptionTemplate,
    resume: Option<&Checkpoint>,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let vocab = training_vocab(lib, tmpl);
    let model_cfg = cfg.model_config(vocab.len(), seg_classes(lib));
    let (mut params, mut adam, start) = match resume {
        Some(ck) => {
            if ck.params.config != model_cfg {
                return Err(Error::Checkpoint("checkpoint model does not match the configuration".into()));
            }
            if checkpoint_vocab(ck)? != vocab {
                return Err(Error::Checkpoint("checkpoint vocabulary does not match the library".into()));
            }
            restore(ck)?
        }
        None => {
            let params = ModelParams::init(model_cfg, rng::fork(cfg.seed, "init"))?;
            let adam = AdamState::new(&params);
            (params, adam, 0)
        }
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        vocab.save(dir.join(VOCAB_FILE))?;
    }

    let loss_cfg = cfg.loss_config();
    let opts = cfg.augment_options();
    let pool = if cfg.no_augment {
        generate_any_stream(lib, tmpl, &opts, cfg.pool_size, rng::fork(cfg.seed, "pool"))?
    } else {
        Vec::new()
    };
    let gallery = Gallery::from_pairs(&heldout_gallery(lib, tmpl, cfg)?)?;
    let eval_opts = EvalOptions {
        similarity: cfg.similarity,
        sinkhorn: cfg.sinkhorn(),
        ..EvalOptions::default()
    };

    let total_steps = cfg.total_steps();
    let mut epochs = Vec::new();
    let mut evals = Vec::new();
    let mut epoch_sum = LossComponents::default();
    let mut epoch_steps = 0usize;
    let mut last_good = (params.clone(), adam.clone(), start);
    for step in start..total_steps {
        let batch_seed = rng::fork(cfg.seed, &format!("batch/{step}"));
        let pairs = if cfg.no_augment {
            let mut r = rng::stream(batch_seed);
            index::sample(&mut r, pool.len(), cfg.batch_size)
                .into_iter()
                .map(|i| pool[i].clone())
                .collect()
        } else {
            generate_any_stream(lib, tmpl, &opts, cfg.batch_size, batch_seed)?
        };
        let batch: Vec<Example> = pairs.iter().map(|p| Example::from_pair(p, &vocab)).collect();

        let result = batch_loss(&params, &batch, &loss_cfg).and_then(|r| {
            if r.grads.is_finite() {
                Ok(r)
            } else {
                Err(Error::NonFinite("gradients".into()))
            }
        });
        let result = match result {
            Ok(r) => r,
            Err(e @ Error::NonFinite(_)) => {
                if let Some(dir) = out {
                    let (p, a, s) = &last_good;
                    make_checkpoint(p, a, *s, &vocab, cfg)?.save(dir.join(CHECKPOINT_FILE))?;
                    write_file(&dir.join(LOSS_FILE), loss_csv(&epochs))?;
                }
                return Err(Error::Diverged {
                    step,
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        };
        // these parameters produced a finite loss
        last_good = (params.clone(), adam.clone(), step);
        let lr = decayed_lr(cfg.lr, step, total_steps);
        adam_step(&mut params, &result.grads, &mut adam, lr, cfg.clip)?;

        epoch_sum.seg += result.components.seg;
        epoch_sum.s2t += result.components.s2t;
        epoch_sum.t2s += result.components.t2s;
        epoch_steps += 1;
        if (step + 1) % cfg.steps_per_epoch == 0 {
            let n = epoch_steps as f64;
            let epoch = (step + 1) / cfg.steps_per_epoch;
            let c = LossComponents {
                seg: epoch_sum.seg / n,
                s2t: epoch_sum.s2t / n,
                t2s: epoch_sum.t2s / n,
            };
            epochs.push(EpochRecord {
                epoch,
                seg: c.seg,
                s2t: c.s2t,
                t2s: c.t2s,
                total: c.seg + c.s2t + c.t2s,
            });
            epoch_sum = LossComponents::default();
            epoch_steps = 0;
            let last = epoch == cfg.epochs;
            if last || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0) {
                let [s2t, t2s] = evaluate(&params, &vocab, &gallery, &eval_opts)?;
                evals.push(EvalRecord { epoch, s2t, t2s });
            }
        }
    }

    let checkpoint = make_checkpoint(&params, &adam, total_steps, &vocab, cfg)?;
    if let Some(dir) = out {
        checkpoint.save(dir.join(CHECKPOINT_FILE))?;
        write_file(&dir.join(LOSS_FILE), loss_csv(&epochs))?;
        let mut lines = String::new();
        for e in &evals {
            lines.push_str(&serde_json::to_string(e)?);
            lines.push('\n');
        }
        write_file(&dir.join(METRICS_FILE), lines)?;
    }
    Ok(TrainOutcome {
        checkpoint,
        vocab,
        epochs,
        evals,
    })
}

/// Key/value pairs of a flat config file: `key = value`, `#` comments.
pub fn parse_kv(text: &str, origin: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            reason: "expected key = value".into(),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
