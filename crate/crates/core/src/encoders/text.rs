//! Caption tokenizer, vocabulary and bidirectional gated recurrent encoder.
//!
//! Cell equations (per direction, `x` the word embedding, `h` the previous state):
//!
//! ```text
//! z  = sigmoid(x Wz + h Uz + bz)
//! r  = sigmoid(x Wr + h Ur + br)
//! n  = tanh(x Wn + (r * h) Un + bn)
//! h' = (1 - z) * n + z * h
//! ```

use std::collections::HashMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{sigmoid, GruParams, ModelParams};
use crate::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from the normalized words of `texts`, sorted so
    /// that the id assignment does not depend on input order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = texts.into_iter().flat_map(normalize_words).collect();
        words.sort();
        words.dedup();
        words.retain(|w| w != PAD && w != UNK);
        Self::from_tokens(words)
    }

    fn from_tokens(words: Vec<String>) -> Self {
        let mut tokens = vec![PAD.to_string(), UNK.to_string()];
        tokens.extend(words);
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// One token per line, line number == id.
    pub fn to_text(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < 2 || tokens[PAD_ID] != PAD || tokens[UNK_ID] != UNK {
            return Err(Error::invalid("vocabulary must start with <pad> and <unk>"));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = tokens.iter().find(|t| !seen.insert(t.as_str())) {
            return Err(Error::invalid(format!("duplicate vocabulary token `{dup}`")));
        }
        Ok(Self::from_tokens(tokens[2..].to_vec()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Lowercases, replaces punctuation with spaces and looks words up; unseen
/// words map to `<unk>` and an empty text yields a single `<unk>`.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<usize> {
    let ids: Vec<usize> = normalize_words(text).iter().map(|w| vocab.id(w)).collect();
    if ids.is_empty() {
        vec![UNK_ID]
    } else {
        ids
    }
}

#[derive(Debug, Clone)]
struct Step {
    h_prev: Array1<f64>,
    z: Array1<f64>,
    r: Array1<f64>,
    n: Array1<f64>,
    rh: Array1<f64>,
}

#[derive(Debug, Clone)]
struct DirectionCache {
    /// Time indices in processing order.
    order: Vec<usize>,
    steps: Vec<Step>,
}

#[derive(Debug, Clone)]
pub struct TextCache {
    tokens: Vec<usize>,
    embedded: Array2<f64>,
    fwd: DirectionCache,
    bwd: DirectionCache,
}

fn run_direction(
    gru: &GruParams,
    x_proj: &Array2<f64>,
    order: Vec<usize>,
    hidden: usize,
) -> (Array2<f64>, DirectionCache) {
    let m = x_proj.nrows();
    let mut out = Array2::zeros((m, hidden));
    let mut steps = Vec::with_capacity(m);
    let mut h = Array1::<f64>::zeros(hidden);
    let u_zr = gru.w_hid.slice(s![.., ..2 * hidden]);
    let u_n = gru.w_hid.slice(s![.., 2 * hidden..]);
    for &t in &order {
        let xp = x_proj.row(t);
        let hzr = h.dot(&u_zr);
        let z = Array1::from_shape_fn(hidden, |k| sigmoid(xp[k] + hzr[k]));
        let r = Array1::from_shape_fn(hidden, |k| sigmoid(xp[hidden + k] + hzr[hidden + k]));
        let rh = &r * &h;
        let hn = rh.dot(&u_n);
        let n = Array1::from_shape_fn(hidden, |k| (xp[2 * hidden + k] + hn[k]).tanh());
        let h_new = Array1::from_shape_fn(hidden, |k| (1.0 - z[k]) * n[k] + z[k] * h[k]);
        out.row_mut(t).assign(&h_new);
        steps.push(Step {
            h_prev: std::mem::replace(&mut h, h_new),
            z,
            r,
            n,
            rh,
        });
    }
    (out, DirectionCache { order, steps })
}

/// Encodes a token sequence into `M x D` word features `[h_fwd; h_bwd]`.
pub fn encode_text(tokens: &[usize], params: &ModelParams) -> Result<(Array2<f64>, TextCache)> {
    let cfg = params.config;
    if tokens.is_empty() {
        return Err(Error::invalid("cannot encode an empty token sequence"));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id: bad,
            size: cfg.vocab_size,
        });
    }
    let m = tokens.len();
    let hidden = cfg.hidden();
    let embedded = params.embed.select(Axis(0), tokens);

    let proj_f = embedded.dot(&params.gru_fwd.w_in) + &params.gru_fwd.bias;
    let proj_b = embedded.dot(&params.gru_bwd.w_in) + &params.gru_bwd.bias;
    let (hf, fwd) = run_direction(&params.gru_fwd, &proj_f, (0..m).collect(), hidden);
    let (hb, bwd) = run_direction(&params.gru_bwd, &proj_b, (0..m).rev().collect(), hidden);

    let mut words = Array2::zeros((m, cfg.dim));
    words.slice_mut(s![.., ..hidden]).assign(&hf);
    words.slice_mut(s![.., hidden..]).assign(&hb);
    Ok((
        words,
        TextCache {
            tokens: tokens.to_vec(),
            embedded,
            fwd,
            bwd,
        },
    ))
}

/// Backpropagates one direction; returns the gradient w.r.t. its input projections.
fn backward_direction(
    gru: &GruParams,
    cache: &DirectionCache,
    d_out: ArrayView2<f64>,
    grads: &mut GruParams,
    hidden: usize,
) -> Array2<f64> {
    let m = cache.order.len();
    let mut d_proj = Array2::zeros((m, 3 * hidden));
    let mut carry = Array1::<f64>::zeros(hidden);
    let u_zr = gru.w_hid.slice(s![.., ..2 * hidden]);
    let u_n = gru.w_hid.slice(s![.., 2 * hidden..]);
    for (step, &t) in cache.steps.iter().zip(&cache.order).rev() {
        let dh = &d_out.row(t) + &carry;
        let Step { h_prev, z, r, n, rh } = step;

        let mut d_a = Array1::<f64>::zeros(3 * hidden);
        let mut d_hprev = Array1::<f64>::zeros(hidden);
        for k in 0..hidden {
            let dz = dh[k] * (h_prev[k] - n[k]);
            let dn = dh[k] * (1.0 - z[k]);
            d_hprev[k] = dh[k] * z[k];
            d_a[k] = dz * z[k] * (1.0 - z[k]);
            d_a[2 * hidden + k] = dn * (1.0 - n[k] * n[k]);
        }
        let d_an = d_a.slice(s![2 * hidden..]);
        // candidate: a_n = x Wn + (r * h) Un + bn
        let d_rh = u_n.dot(&d_an);
        outer_add(&mut grads.w_hid.slice_mut(s![.., 2 * hidden..]), rh.view(), d_an);
        for k in 0..hidden {
            let dr = d_rh[k] * h_prev[k];
            d_hprev[k] += d_rh[k] * r[k];
            d_a[hidden + k] = dr * r[k] * (1.0 - r[k]);
        }
        let d_azr = d_a.slice(s![..2 * hidden]);
        outer_add(&mut grads.w_hid.slice_mut(s![.., ..2 * hidden]), h_prev.view(), d_azr);
        d_hprev += &u_zr.dot(&d_azr);

        d_proj.row_mut(t).assign(&d_a);
        carry = d_hprev;
    }
    d_proj
}

fn outer_add(target: &mut ndarray::ArrayViewMut2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    for (i, &ai) in a.iter().enumerate() {
        if ai != 0.0 {
            target.row_mut(i).scaled_add(ai, &b);
        }
    }
}

/// Accumulates parameter gradients given `d_words` (`M x D`).
pub fn backward(
    cache: &TextCache,
    params: &ModelParams,
    d_words: &Array2<f64>,
    grads: &mut ModelParams,
) -> Result<()> {
    let m = cache.tokens.len();
    let hidden = params.config.hidden();
    if d_words.dim() != (m, params.config.dim) {
        return Err(Error::ShapeMismatch(format!(
            "word gradient {:?} for {m} words",
            d_words.dim()
        )));
    }
    let d_pf = backward_direction(
        &params.gru_fwd,
        &cache.fwd,
        d_words.slice(s![.., ..hidden]),
        &mut grads.gru_fwd,
        hidden,
    );
    let d_pb = backward_direction(
        &params.gru_bwd,
        &cache.bwd,
        d_words.slice(s![.., hidden..]),
        &mut grads.gru_bwd,
        hidden,
    );
    let mut d_embedded = Array2::<f64>::zeros(cache.embedded.dim());
    for (gru, g, d_proj) in [
        (&params.gru_fwd, &mut grads.gru_fwd, &d_pf),
        (&params.gru_bwd, &mut grads.gru_bwd, &d_pb),
    ] {
        g.w_in += &cache.embedded.t().dot(d_proj);
        g.bias += &d_proj.sum_axis(Axis(0)).insert_axis(Axis(0));
        d_embedded += &d_proj.dot(&gru.w_in.t());
    }
    for (i, &tok) in cache.tokens.iter().enumerate() {
        grads.embed.row_mut(tok).scaled_add(1.0, &d_embedded.row(i));
    }
    Ok(())
}
