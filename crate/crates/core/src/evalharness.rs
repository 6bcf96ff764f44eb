//! Retrieval evaluation in both directions.
//!
//! Scores are always laid out shapes x captions. Shape-to-text (S2T) ranks the
//! captions of each row, text-to-shape (T2S) ranks the shapes of each column.

use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{read_pairs, GeneratedPair};
use crate::encoders::{encode_shape, encode_text, tokenize, ModelParams, Vocab};
use crate::geometry::PointCloud;
use crate::matching::{similarity, SimilarityMode, SinkhornConfig};
use crate::{Error, Result};

/// Which captions belong to which shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalGround {
    shape_captions: Vec<Vec<usize>>,
    caption_shape: Vec<usize>,
}

impl RetrievalGround {
    /// Every shape must own at least one caption.
    pub fn from_caption_shapes(caption_shape: Vec<usize>, n_shapes: usize) -> Result<Self> {
        let mut shape_captions = vec![Vec::new(); n_shapes];
        for (c, &s) in caption_shape.iter().enumerate() {
            let slot = shape_captions
                .get_mut(s)
                .ok_or_else(|| Error::invalid(format!("caption {c} names shape {s} of {n_shapes}")))?;
            slot.push(c);
        }
        if let Some(s) = shape_captions.iter().position(Vec::is_empty) {
            return Err(Error::invalid(format!("shape {s} has no caption")));
        }
        Ok(Self {
            shape_captions,
            caption_shape,
        })
    }

    /// One caption per shape, in order.
    pub fn one_to_one(n: usize) -> Self {
        Self::from_caption_shapes((0..n).collect(), n).expect("bijection")
    }

    pub fn n_shapes(&self) -> usize {
        self.shape_captions.len()
    }

    pub fn n_captions(&self) -> usize {
        self.caption_shape.len()
    }

    pub fn captions_of(&self, shape: usize) -> &[usize] {
        &self.shape_captions[shape]
    }

    pub fn shape_of(&self, caption: usize) -> usize {
        self.caption_shape[caption]
    }

    /// Relevant caption ids per shape query.
    pub fn s2t_relevant(&self) -> Vec<Vec<usize>> {
        self.shape_captions.clone()
    }

    /// Relevant shape id per caption query.
    pub fn t2s_relevant(&self) -> Vec<Vec<usize>> {
        self.caption_shape.iter().map(|&s| vec![s]).collect()
    }
}

/// Gallery indices ordered by descending score, ties to the lower index.
pub fn ranking(scores: ArrayView1<f64>) -> Result<Vec<usize>> {
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("retrieval scores".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // partial_cmp so that -0.0 and 0.0 tie
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("no NaN").then(a.cmp(&b)));
    Ok(order)
}

fn check_queries(scores: &Array2<f64>, relevant: &[Vec<usize>], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if relevant.len() != scores.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} relevance lists for {} queries",
            relevant.len(),
            scores.nrows()
        )));
    }
    if scores.nrows() == 0 {
        return Err(Error::invalid("no queries"));
    }
    for (q, rel) in relevant.iter().enumerate() {
        if rel.is_empty() {
            return Err(Error::invalid(format!("query {q} has no relevant item")));
        }
        if let Some(&g) = rel.iter().find(|&&g| g >= scores.ncols()) {
            return Err(Error::invalid(format!("query {q} lists item {g} outside the gallery")));
        }
    }
    Ok(())
}

/// Percentage of queries (rows) with a relevant item among their top `k`.
pub fn rr_at_k(scores: &Array2<f64>, relevant: &[Vec<usize>], k: usize) -> Result<f64> {
    check_queries(scores, relevant, k)?;
    let mut hits = 0usize;
    for (row, rel) in scores.rows().into_iter().zip(relevant) {
        let order = ranking(row)?;
        if order.iter().take(k).any(|g| rel.contains(g)) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / scores.nrows() as f64)
}

/// Mean binary-gain NDCG@k over queries (rows), as a percentage.
pub fn ndcg_at_k(scores: &Array2<f64>, relevant: &[Vec<usize>], k: usize) -> Result<f64> {
    check_queries(scores, relevant, k)?;
    let mut total = 0.0;
    for (row, rel) in scores.rows().into_iter().zip(relevant) {
        let order = ranking(row)?;
        let dcg: f64 = order
            .iter()
            .take(k)
            .enumerate()
            .filter(|(_, g)| rel.contains(g))
            .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
            .sum();
        let ideal: f64 = (0..rel.len().min(k)).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
        total += dcg / ideal;
    }
    Ok(100.0 * total / scores.nrows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    S2T,
    T2S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub direction: Direction,
    pub rr_at_1: f64,
    pub rr_at_5: f64,
    pub ndcg_at_5: f64,
    pub queries: usize,
    pub gallery: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

/// Both directions from one shapes x captions score matrix.
pub fn metrics_from_scores(scores: &Array2<f64>, ground: &RetrievalGround) -> Result<[MetricsReport; 2]> {
    if scores.dim() != (ground.n_shapes(), ground.n_captions()) {
        return Err(Error::ShapeMismatch(format!(
            "scores {:?} for {} shapes and {} captions",
            scores.dim(),
            ground.n_shapes(),
            ground.n_captions()
        )));
    }
    let report = |direction, m: &Array2<f64>, rel: &[Vec<usize>]| -> Result<MetricsReport> {
        Ok(MetricsReport {
            direction,
            rr_at_1: rr_at_k(m, rel, 1)?,
            rr_at_5: rr_at_k(m, rel, 5)?,
            ndcg_at_5: ndcg_at_k(m, rel, 5)?,
            queries: m.nrows(),
            gallery: m.ncols(),
            checkpoint: None,
        })
    };
    let transposed = scores.t().to_owned();
    Ok([
        report(Direction::S2T, scores, &ground.s2t_relevant())?,
        report(Direction::T2S, &transposed, &ground.t2s_relevant())?,
    ])
}

/// Shapes and captions to retrieve between.
#[derive(Debug, Clone)]
pub struct Gallery {
    pub shapes: Vec<PointCloud>,
    pub captions: Vec<String>,
    pub ground: RetrievalGround,
}

impl Gallery {
    pub fn from_pairs(pairs: &[GeneratedPair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("empty gallery"));
        }
        Ok(Self {
            shapes: pairs.iter().map(|p| p.shape.clone()).collect(),
            captions: pairs.iter().map(|p| p.caption.clone()).collect(),
            ground: RetrievalGround::one_to_one(pairs.len()),
        })
    }

    /// Reads a pairs directory; captions that share a shape file are all
    /// relevant to that shape.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let ds = read_pairs(dir)?;
        let ground = RetrievalGround::from_caption_shapes(ds.caption_shape, ds.shapes.len())?;
        Ok(Self {
            shapes: ds.shapes,
            captions: ds.captions,
            ground,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub similarity: SimilarityMode,
    pub sinkhorn: SinkhornConfig,
    /// Shape rows scored per chunk; bounds the number of live transport plans.
    pub chunk_rows: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            similarity: SimilarityMode::Emd,
            sinkhorn: SinkhornConfig::default(),
            chunk_rows: 16,
        }
    }
}

/// Shapes x captions similarity matrix under the given model. Labelled
/// shapes are pooled by their labels, unlabelled ones by predicted segmentation.
pub fn score_gallery(
    params: &ModelParams,
    vocab: &Vocab,
    gallery: &Gallery,
    opts: &EvalOptions,
) -> Result<Array2<f64>> {
    if vocab.len() != params.config.vocab_size {
        return Err(Error::ShapeMismatch(format!(
            "vocabulary of {} words for a model expecting {}",
            vocab.len(),
            params.config.vocab_size
        )));
    }
    if gallery.shapes.is_empty() || gallery.captions.is_empty() {
        return Err(Error::invalid("empty gallery"));
    }
    let parts: Vec<Array2<f64>> = gallery
        .shapes
        .par_iter()
        .map(|s| encode_shape(s, params).map(|(e, _)| e.part_features))
        .collect::<Result<_>>()?;
    let words: Vec<Array2<f64>> = gallery
        .captions
        .par_iter()
        .map(|c| encode_text(&tokenize(c, vocab), params).map(|(w, _)| w))
        .collect::<Result<_>>()?;
    let g = words.len();
    let mut scores = Array2::<f64>::zeros((parts.len(), g));
    let chunk = opts.chunk_rows.max(1);
    for start in (0..parts.len()).step_by(chunk) {
        let end = (start + chunk).min(parts.len());
        let cells: Vec<f64> = (start * g..end * g)
            .into_par_iter()
            .map(|k| {
                similarity(parts[k / g].view(), words[k % g].view(), opts.similarity, &opts.sinkhorn)
                    .map(|(v, _)| v)
            })
            .collect::<Result<_>>()?;
        for (k, v) in cells.into_iter().enumerate() {
            scores[[start + k / g, k % g]] = v;
        }
    }
    Ok(scores)
}

/// `[S2T, T2S]` reports for `params` on `gallery`.
pub fn evaluate(
    params: &ModelParams,
    vocab: &Vocab,
    gallery: &Gallery,
    opts: &EvalOptions,
) -> Result<[MetricsReport; 2]> {
    let scores = score_gallery(params, vocab, gallery, opts)?;
    metrics_from_scores(&scores, &gallery.ground)
}

/// Brute-force metrics that share no code with [`rr_at_k`] and [`ndcg_at_k`]:
/// the rank of each relevant item is the number of items that beat it.
pub mod oracle {
    use ndarray::Array2;

    fn rank_of(row: &[f64], item: usize) -> usize {
        row.iter()
            .enumerate()
            .filter(|&(j, &v)| v > row[item] || (v == row[item] && j < item))
            .count()
    }

    pub fn rr(scores: &Array2<f64>, relevant: &[Vec<usize>], k: usize) -> f64 {
        let hits = scores
            .rows()
            .into_iter()
            .zip(relevant)
            .filter(|(row, rel)| {
                let row = row.to_vec();
                rel.iter().map(|&g| rank_of(&row, g)).min().expect("non-empty") < k
            })
            .count();
        100.0 * hits as f64 / scores.nrows() as f64
    }

    pub fn ndcg(scores: &Array2<f64>, relevant: &[Vec<usize>], k: usize) -> f64 {
        let mut total = 0.0;
        for (row, rel) in scores.rows().into_iter().zip(relevant) {
            let row = row.to_vec();
            let dcg: f64 = rel
                .iter()
                .map(|&g| rank_of(&row, g))
                .filter(|&rank| rank < k)
                .map(|rank| 1.0 / (rank as f64 + 2.0).log2())
                .sum();
            let idcg: f64 = (0..rel.len().min(k)).map(|i| 1.0 / (i as f64 + 2.0).log2()).sum();
            total += dcg / idcg;
        }
        100.0 * total / scores.nrows() as f64
    }
}
