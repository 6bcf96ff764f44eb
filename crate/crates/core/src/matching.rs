//! Fine-grained cross-modal similarity.
//!
//! Part features `S` (`N x D`) and word features `W` (`M x D`) are compared
//! through cosine transport costs `c_ij = 1 - cos(s_i, w_j)`. An entropic
//! transport plan `X` between uniform marginals is computed with log-domain
//! Sinkhorn iterations and the similarity is `-sum_ij c_ij x_ij`. Gradients
//! flow through the unrolled iterations.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Norm guard in the cosine denominator.
pub const NORM_GUARD: f64 = 1e-8;

/// How a shape and a text are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMode {
    /// Transport between part features and word features.
    #[default]
    Emd,
    /// Cosine between mean part feature and mean word feature.
    Cosine,
}

impl std::str::FromStr for SimilarityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "emd" => Ok(Self::Emd),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::invalid(format!("unknown similarity mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iter: usize,
    /// Stop once the row-marginal L-infinity residual falls below this value.
    /// Zero runs exactly `max_iter` iterations.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iter: 200,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CostCache {
    s: Array2<f64>,
    w: Array2<f64>,
    s_norm: Array1<f64>,
    w_norm: Array1<f64>,
    dots: Array2<f64>,
}

/// `c_ij = 1 - s_i.w_j / ((|s_i| + d)(|w_j| + d))`.
pub fn cost_matrix(s: ArrayView2<f64>, w: ArrayView2<f64>) -> Result<(Array2<f64>, CostCache)> {
    if s.ncols() != w.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "part width {} vs word width {}",
            s.ncols(),
            w.ncols()
        )));
    }
    if s.nrows() == 0 || w.nrows() == 0 {
        return Err(Error::invalid("cost matrix needs at least one part and one word"));
    }
    let s_norm = s.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let w_norm = w.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let dots = s.dot(&w.t());
    let cost = Array2::from_shape_fn(dots.dim(), |(i, j)| {
        1.0 - dots[[i, j]] / ((s_norm[i] + NORM_GUARD) * (w_norm[j] + NORM_GUARD))
    });
    let cache = CostCache {
        s: s.to_owned(),
        w: w.to_owned(),
        s_norm,
        w_norm,
        dots,
    };
    Ok((cost, cache))
}

/// Gradients of a scalar with respect to `S` and `W` given `dL/dC`.
pub fn cost_matrix_backward(cache: &CostCache, d_cost: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (n, m) = cache.dots.dim();
    // cos_ij = dots_ij / (a_i b_j); dL/dcos = -dL/dC
    let mut ds = Array2::<f64>::zeros(cache.s.dim());
    let mut dw = Array2::<f64>::zeros(cache.w.dim());
    for i in 0..n {
        let a = cache.s_norm[i] + NORM_GUARD;
        for j in 0..m {
            let g = -d_cost[[i, j]];
            if g == 0.0 {
                continue;
            }
            let b = cache.w_norm[j] + NORM_GUARD;
            let d = cache.dots[[i, j]];
            // d cos / d s_i = w_j / (a b) - d / (a^2 b) * s_i / |s_i|
            ds.row_mut(i).scaled_add(g / (a * b), &cache.w.row(j));
            if cache.s_norm[i] > 0.0 {
                ds.row_mut(i)
                    .scaled_add(-g * d / (a * a * b * cache.s_norm[i]), &cache.s.row(i));
            }
            dw.row_mut(j).scaled_add(g / (a * b), &cache.s.row(i));
            if cache.w_norm[j] > 0.0 {
                dw.row_mut(j)
                    .scaled_add(-g * d / (a * b * b * cache.w_norm[j]), &cache.w.row(j));
            }
        }
    }
    (ds, dw)
}

#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub flow: Array2<f64>,
    pub row_marginals: Array1<f64>,
    pub col_marginals: Array1<f64>,
    pub epsilon: f64,
    pub iterations: usize,
    /// L-infinity deviation of the plan's row sums from the row marginals
    /// (column sums are exact after each half step).
    pub residual: f64,
    potentials: Vec<(Array1<f64>, Array1<f64>)>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_marginal(m: &Array1<f64>, what: &str) -> Result<()> {
    if m.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid(format!("{what} marginals must be finite and nonnegative")));
    }
    if (m.sum() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("{what} marginals must sum to 1")));
    }
    Ok(())
}

/// Entropic optimal transport between `r` and `c` under `cost`, in the log domain.
///
/// Dual potentials `f`, `g` are updated alternately:
/// `f_i = eps ln r_i - eps lse_j((g_j - c_ij)/eps)`, then the symmetric `g` update;
/// the plan is `x_ij = exp((f_i + g_j - c_ij)/eps)`.
pub fn sinkhorn(
    cost: &Array2<f64>,
    r: &Array1<f64>,
    c: &Array1<f64>,
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    let (n, m) = cost.dim();
    if r.len() != n || c.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "marginals {}x{} for a {n}x{m} cost",
            r.len(),
            c.len()
        )));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("transport cost".into()));
    }
    if !(cfg.epsilon > 0.0) {
        return Err(Error::invalid("sinkhorn epsilon must be positive"));
    }
    if cfg.max_iter == 0 {
        return Err(Error::invalid("sinkhorn needs at least one iteration"));
    }
    check_marginal(r, "row")?;
    check_marginal(c, "column")?;
    let eps = cfg.epsilon;
    let log_r = r.mapv(f64::ln);
    let log_c = c.mapv(f64::ln);

    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(m);
    let mut potentials = Vec::new();
    let mut residual;
    let mut iterations = 0;
    loop {
        // row update; its log-sum-exp also yields the current row sums
        let lse_rows: Vec<f64> = (0..n)
            .map(|i| log_sum_exp((0..m).map(|j| (g[j] - cost[[i, j]]) / eps)))
            .collect();
        if iterations > 0 {
            residual = (0..n)
                .map(|i| ((f[i] / eps + lse_rows[i]).exp() - r[i]).abs())
                .fold(0.0, f64::max);
            if residual < cfg.tol || iterations >= cfg.max_iter {
                break;
            }
        }
        f = Array1::from_shape_fn(n, |i| eps * (log_r[i] - lse_rows[i]));
        g = Array1::from_shape_fn(m, |j| {
            eps * (log_c[j] - log_sum_exp((0..n).map(|i| (f[i] - cost[[i, j]]) / eps)))
        });
        iterations += 1;
        potentials.push((f.clone(), g.clone()));
    }
    let flow = Array2::from_shape_fn((n, m), |(i, j)| ((f[i] + g[j] - cost[[i, j]]) / eps).exp());
    Ok(TransportPlan {
        flow,
        row_marginals: r.clone(),
        col_marginals: c.clone(),
        epsilon: eps,
        iterations,
        residual,
        potentials,
    })
}

/// Reverse pass through the unrolled iterations: `dL/dC` given `dL/dX`
/// (the explicit dependence of `X` on `C` included).
pub fn sinkhorn_backward(cost: &Array2<f64>, plan: &TransportPlan, d_flow: &Array2<f64>) -> Array2<f64> {
    let (n, m) = cost.dim();
    let eps = plan.epsilon;
    let mut d_cost = Array2::<f64>::zeros((n, m));
    if plan.potentials.is_empty() {
        return d_cost;
    }
    // x_ij = exp(u_ij), u = (f_i + g_j - c_ij) / eps
    let d_u = d_flow * &plan.flow;
    let mut d_f = d_u.sum_axis(Axis(1)) / eps;
    let mut d_g = d_u.sum_axis(Axis(0)) / eps;
    d_cost.scaled_add(-1.0 / eps, &d_u);

    let r = &plan.row_marginals;
    let c = &plan.col_marginals;
    for t in (0..plan.potentials.len()).rev() {
        let (f, g) = &plan.potentials[t];
        // g_j = eps ln c_j - eps lse_i((f_i - c_ij)/eps)
        // dg_j/df_i = -P_ij, dg_j/dc_ij = P_ij, P_ij = exp((f_i + g_j - c_ij)/eps) / c_j
        for j in 0..m {
            if c[j] == 0.0 || d_g[j] == 0.0 {
                continue;
            }
            for i in 0..n {
                let p = ((f[i] + g[j] - cost[[i, j]]) / eps).exp() / c[j];
                d_f[i] -= d_g[j] * p;
                d_cost[[i, j]] += d_g[j] * p;
            }
        }
        // f_i = eps ln r_i - eps lse_j((g_prev_j - c_ij)/eps)
        let mut d_g_prev = Array1::<f64>::zeros(m);
        if t > 0 {
            let g_prev = &plan.potentials[t - 1].1;
            for i in 0..n {
                if r[i] == 0.0 || d_f[i] == 0.0 {
                    continue;
                }
                for j in 0..m {
                    let q = ((f[i] + g_prev[j] - cost[[i, j]]) / eps).exp() / r[i];
                    d_g_prev[j] -= d_f[i] * q;
                    d_cost[[i, j]] += d_f[i] * q;
                }
            }
        } else {
            // g starts at zero
            for i in 0..n {
                if r[i] == 0.0 || d_f[i] == 0.0 {
                    continue;
                }
                for j in 0..m {
                    let q = ((f[i] - cost[[i, j]]) / eps).exp() / r[i];
                    d_cost[[i, j]] += d_f[i] * q;
                }
            }
        }
        d_g = d_g_prev;
        d_f = Array1::zeros(n);
    }
    d_cost
}

/// `-sum_ij c_ij x_ij`.
pub fn emd_similarity(cost: &Array2<f64>, flow: &Array2<f64>) -> Result<f64> {
    if cost.dim() != flow.dim() {
        return Err(Error::ShapeMismatch(format!(
            "cost {:?} vs flow {:?}",
            cost.dim(),
            flow.dim()
        )));
    }
    Ok(-(cost * flow).sum())
}

pub fn uniform(n: usize) -> Array1<f64> {
    Array1::from_elem(n, 1.0 / n as f64)
}

/// Everything needed to backpropagate one shape/text similarity.
#[derive(Debug, Clone)]
pub struct PairCache {
    cost: Array2<f64>,
    cost_cache: CostCache,
    plan: TransportPlan,
}

impl PairCache {
    pub fn plan(&self) -> &TransportPlan {
        &self.plan
    }

    pub fn cost(&self) -> &Array2<f64> {
        &self.cost
    }
}

/// Cost matrix, Sinkhorn plan with uniform marginals, then the EMD score.
pub fn pair_similarity(
    s: ArrayView2<f64>,
    w: ArrayView2<f64>,
    cfg: &SinkhornConfig,
) -> Result<(f64, PairCache)> {
    let (cost, cost_cache) = cost_matrix(s, w)?;
    let plan = sinkhorn(&cost, &uniform(s.nrows()), &uniform(w.nrows()), cfg)?;
    let sim = emd_similarity(&cost, &plan.flow)?;
    Ok((
        sim,
        PairCache {
            cost,
            cost_cache,
            plan,
        },
    ))
}

/// `(dL/dS, dL/dW)` given `dL/dsim`.
pub fn pair_similarity_backward(cache: &PairCache, d_sim: f64) -> (Array2<f64>, Array2<f64>) {
    // sim = -sum C * X(C)
    let d_flow = cache.cost.mapv(|v| -v * d_sim);
    let mut d_cost = cache.plan.flow.mapv(|v| -v * d_sim);
    d_cost += &sinkhorn_backward(&cache.cost, &cache.plan, &d_flow);
    cost_matrix_backward(&cache.cost_cache, &d_cost)
}

/// `sim[i][j] = pair_similarity(shapes[i], texts[j])`, cells computed in parallel.
pub fn score_matrix(
    shapes: &[Array2<f64>],
    texts: &[Array2<f64>],
    cfg: &SinkhornConfig,
) -> Result<Array2<f64>> {
    let (q, g) = (shapes.len(), texts.len());
    let cells: Vec<f64> = (0..q * g)
        .into_par_iter()
        .map(|k| pair_similarity(shapes[k / g].view(), texts[k % g].view(), cfg).map(|(v, _)| v))
        .collect::<Result<_>>()?;
    Ok(Array2::from_shape_vec((q, g), cells).expect("q*g cells"))
}

#[derive(Debug, Clone)]
pub struct GlobalCache {
    s_mean: Array1<f64>,
    w_mean: Array1<f64>,
    n: usize,
    m: usize,
}

/// Cosine between the mean part feature and the mean word feature.
pub fn cosine_global_similarity(s: ArrayView2<f64>, w: ArrayView2<f64>) -> Result<(f64, GlobalCache)> {
    if s.nrows() == 0 || w.nrows() == 0 {
        return Err(Error::invalid("need at least one part and one word"));
    }
    if s.ncols() != w.ncols() {
        return Err(Error::ShapeMismatch("feature widths differ".into()));
    }
    let s_mean = s.mean_axis(Axis(0)).expect("non-empty");
    let w_mean = w.mean_axis(Axis(0)).expect("non-empty");
    let (a, b) = (s_mean.dot(&s_mean).sqrt(), w_mean.dot(&w_mean).sqrt());
    let cos = s_mean.dot(&w_mean) / ((a + NORM_GUARD) * (b + NORM_GUARD));
    Ok((
        cos,
        GlobalCache {
            s_mean,
            w_mean,
            n: s.nrows(),
            m: w.nrows(),
        },
    ))
}

pub fn cosine_global_backward(cache: &GlobalCache, d_sim: f64) -> (Array2<f64>, Array2<f64>) {
    let s = cache.s_mean.view().insert_axis(Axis(0)).to_owned();
    let w = cache.w_mean.view().insert_axis(Axis(0)).to_owned();
    let cost_cache = CostCache {
        s_norm: Array1::from_elem(1, cache.s_mean.dot(&cache.s_mean).sqrt()),
        w_norm: Array1::from_elem(1, cache.w_mean.dot(&cache.w_mean).sqrt()),
        dots: Array2::from_elem((1, 1), cache.s_mean.dot(&cache.w_mean)),
        s,
        w,
    };
    // cos = 1 - cost, so dL/dcost = -dL/dcos
    let (ds, dw) = cost_matrix_backward(&cost_cache, &Array2::from_elem((1, 1), -d_sim));
    let ds_rows = ds.row(0).mapv(|v| v / cache.n as f64);
    let dw_rows = dw.row(0).mapv(|v| v / cache.m as f64);
    (
        ds_rows.broadcast((cache.n, ds_rows.len())).expect("broadcast").to_owned(),
        dw_rows.broadcast((cache.m, dw_rows.len())).expect("broadcast").to_owned(),
    )
}

#[derive(Debug, Clone)]
pub enum SimilarityCache {
    Emd(PairCache),
    Cosine(GlobalCache),
}

/// Dispatches on `mode`; `cfg` only matters for [`SimilarityMode::Emd`].
pub fn similarity(
    s: ArrayView2<f64>,
    w: ArrayView2<f64>,
    mode: SimilarityMode,
    cfg: &SinkhornConfig,
) -> Result<(f64, SimilarityCache)> {
    match mode {
        SimilarityMode::Emd => pair_similarity(s, w, cfg).map(|(v, c)| (v, SimilarityCache::Emd(c))),
        SimilarityMode::Cosine => cosine_global_similarity(s, w).map(|(v, c)| (v, SimilarityCache::Cosine(c))),
    }
}

pub fn similarity_backward(cache: &SimilarityCache, d_sim: f64) -> (Array2<f64>, Array2<f64>) {
    match cache {
        SimilarityCache::Emd(c) => pair_similarity_backward(c, d_sim),
        SimilarityCache::Cosine(c) => cosine_global_backward(c, d_sim),
    }
}

/// Exact optimal transport for square uniform problems by enumerating
/// permutations (the optimum of the assignment LP is attained at a
/// permutation matrix scaled by `1/n`). Test oracle, `n <= 8`.
pub fn exact_uniform_ot(cost: &Array2<f64>) -> f64 {
    fn permute(k: usize, perm: &mut Vec<usize>, cost: &Array2<f64>, best: &mut f64) {
        let n = perm.len();
        if k == n {
            let total: f64 = (0..n).map(|i| cost[[i, perm[i]]]).sum();
            *best = best.min(total / n as f64);
            return;
        }
        for i in k..n {
            perm.swap(k, i);
            permute(k + 1, perm, cost, best);
            perm.swap(k, i);
        }
    }
    assert_eq!(cost.nrows(), cost.ncols(), "square problems only");
    let mut perm: Vec<usize> = (0..cost.nrows()).collect();
    let mut best = f64::INFINITY;
    permute(0, &mut perm, cost, &mut best);
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;
    use rand::Rng as _;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::stream(seed);
        Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn cosine_costs() {
        let s = array![[1.0, 0.0], [0.0, 2.0]];
        let w = array![[3.0, 0.0], [-1.0, 0.0]];
        let (c, _) = cost_matrix(s.view(), w.view()).unwrap();
        assert!(c[[0, 0]].abs() < 1e-7);
        assert!((c[[0, 1]] - 2.0).abs() < 1e-7);
        assert!((c[[1, 0]] - 1.0).abs() < 1e-12);
        let zero = array![[0.0, 0.0]];
        let (c, _) = cost_matrix(zero.view(), w.view()).unwrap();
        assert!(c.iter().all(|v| v.is_finite() && *v == 1.0));
    }

    #[test]
    fn cost_gradient_matches_finite_differences() {
        let s = random(3, 4, 1);
        let w = random(5, 4, 2);
        let weights = random(3, 5, 3);
        let f = |s: &Array2<f64>, w: &Array2<f64>| (&cost_matrix(s.view(), w.view()).unwrap().0 * &weights).sum();
        let (_, cache) = cost_matrix(s.view(), w.view()).unwrap();
        let (ds, dw) = cost_matrix_backward(&cache, &weights);
        let h = 1e-6;
        for (mat, grad, is_s) in [(&s, &ds, true), (&w, &dw, false)] {
            for idx in 0..mat.len() {
                let mut p = mat.clone();
                let mut m = mat.clone();
                p.as_slice_mut().unwrap()[idx] += h;
                m.as_slice_mut().unwrap()[idx] -= h;
                let fd = if is_s { (f(&p, &w) - f(&m, &w)) / (2.0 * h) } else { (f(&s, &p) - f(&s, &m)) / (2.0 * h) };
                let an = grad.as_slice().unwrap()[idx];
                assert!((fd - an).abs() < 1e-7, "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn sinkhorn_trivial_cases() {
        let plan = sinkhorn(&array![[0.7]], &uniform(1), &uniform(1), &SinkhornConfig::default()).unwrap();
        assert!((plan.flow[[0, 0]] - 1.0).abs() < 1e-12);

        let plan = sinkhorn(&Array2::from_elem((2, 2), 0.3), &uniform(2), &uniform(2), &SinkhornConfig::default())
            .unwrap();
        for v in plan.flow.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn sinkhorn_recovers_diagonal_assignment() {
        let cost = array![[0.0, 1.0], [1.0, 0.0]];
        // enumerating the two permutations: identity costs 0, swap costs 1
        assert_eq!(exact_uniform_ot(&cost), 0.0);
        let cfg = SinkhornConfig { epsilon: 0.01, ..Default::default() };
        let plan = sinkhorn(&cost, &uniform(2), &uniform(2), &cfg).unwrap();
        let expected = array![[0.5, 0.0], [0.0, 0.5]];
        for (a, b) in plan.flow.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn sinkhorn_errors() {
        let cfg = SinkhornConfig::default();
        assert!(sinkhorn(&array![[f64::NAN]], &uniform(1), &uniform(1), &cfg).is_err());
        assert!(sinkhorn(&array![[0.0]], &uniform(1), &uniform(2), &cfg).is_err());
        assert!(sinkhorn(&array![[0.0]], &uniform(1), &uniform(1), &SinkhornConfig { epsilon: 0.0, ..cfg }).is_err());
        assert!(sinkhorn(&array![[0.0, 1.0]], &uniform(1), &array![0.7, 0.7], &cfg).is_err());
    }

    #[test]
    fn sinkhorn_marginals_and_mass() {
        let cost = random(17, 32, 4).mapv(|v| v + 1.0);
        let plan = sinkhorn(&cost, &uniform(17), &uniform(32), &SinkhornConfig::default()).unwrap();
        assert!(plan.residual < 1e-6, "{}", plan.residual);
        assert!(plan.flow.iter().all(|v| *v >= 0.0));
        assert!((plan.flow.sum() - 1.0).abs() < 1e-6);
        for (s, c) in plan.flow.sum_axis(Axis(0)).iter().zip(plan.col_marginals.iter()) {
            assert!((s - c).abs() < 1e-9);
        }
    }

    #[test]
    fn sinkhorn_approaches_exact_ot_as_epsilon_shrinks() {
        for seed in 0..10 {
            let cost = random(4, 4, 100 + seed).mapv(|v| v + 1.0);
            let exact = -exact_uniform_ot(&cost);
            let mut errs = Vec::new();
            for eps in [0.2, 0.05, 0.01, 0.002] {
                let cfg = SinkhornConfig { epsilon: eps, max_iter: 20_000, tol: 1e-10 };
                let plan = sinkhorn(&cost, &uniform(4), &uniform(4), &cfg).unwrap();
                errs.push((emd_similarity(&cost, &plan.flow).unwrap() - exact).abs());
            }
            assert!(errs[3] < 1e-2, "{errs:?}");
            assert!(errs[3] <= errs[0] + 1e-12, "{errs:?}");
        }
    }

    #[test]
    fn emd_similarity_examples() {
        let flow = array![[0.5, 0.0], [0.25, 0.25]];
        assert_eq!(emd_similarity(&Array2::zeros((2, 2)), &flow).unwrap(), 0.0);
        assert!((emd_similarity(&Array2::ones((2, 2)), &flow).unwrap() + 1.0).abs() < 1e-15);
        assert!(emd_similarity(&Array2::ones((2, 3)), &flow).is_err());
        let cfg = SinkhornConfig::default();
        for seed in 0..1000 {
            let mut r = rng::stream(seed);
            let (n, m) = (r.random_range(1..5), r.random_range(1..7));
            let (sim, _) = pair_similarity(random(n, 6, seed).view(), random(m, 6, seed + 7).view(), &cfg).unwrap();
            assert!((-2.0 - 1e-9..=1e-9).contains(&sim), "{sim}");
        }
    }

    #[test]
    fn pair_similarity_examples() {
        let cfg = SinkhornConfig::default();
        // cos = 0.5 between the single part and single word
        let s = array![[1.0, 0.0]];
        let w = array![[0.5, 0.75f64.sqrt()]];
        let (sim, _) = pair_similarity(s.view(), w.view(), &cfg).unwrap();
        assert!((sim + 0.5).abs() < 1e-7, "{sim}");

        let s = random(3, 5, 9);
        let (sw, _) = pair_similarity(s.view(), s.view(), &cfg).unwrap();
        let shuffled = ndarray::stack![Axis(0), s.row(0), s.row(0), s.row(1)];
        let (mismatch, _) = pair_similarity(s.view(), shuffled.view(), &cfg).unwrap();
        assert!(sw > mismatch);

        // the transposed problem has the same entropic optimum; iterate to it
        let tight = SinkhornConfig { tol: 1e-13, max_iter: 10_000, ..cfg };
        let t = random(4, 5, 10);
        let (ab, _) = pair_similarity(s.view(), t.view(), &tight).unwrap();
        let (ba, _) = pair_similarity(t.view(), s.view(), &tight).unwrap();
        assert!((ab - ba).abs() < 1e-9, "{ab} vs {ba}");
    }

    #[test]
    fn pair_gradient_matches_finite_differences() {
        let cfg = SinkhornConfig { epsilon: 0.1, max_iter: 40, tol: 0.0 };
        let s = random(3, 4, 21);
        let w = random(5, 4, 22);
        let (_, cache) = pair_similarity(s.view(), w.view(), &cfg).unwrap();
        assert_eq!(cache.plan().iterations, 40);
        let (ds, dw) = pair_similarity_backward(&cache, 1.0);
        let f = |s: &Array2<f64>, w: &Array2<f64>| pair_similarity(s.view(), w.view(), &cfg).unwrap().0;
        let h = 1e-6;
        for (mat, grad, is_s) in [(&s, &ds, true), (&w, &dw, false)] {
            for idx in 0..mat.len() {
                let mut p = mat.clone();
                let mut m = mat.clone();
                p.as_slice_mut().unwrap()[idx] += h;
                m.as_slice_mut().unwrap()[idx] -= h;
                let fd = if is_s { (f(&p, &w) - f(&m, &w)) / (2.0 * h) } else { (f(&s, &p) - f(&s, &m)) / (2.0 * h) };
                let an = grad.as_slice().unwrap()[idx];
                assert!((fd - an).abs() < 1e-7 * (1.0 + an.abs()), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn score_matrix_contracts() {
        let cfg = SinkhornConfig::default();
        let shapes: Vec<_> = (0..4).map(|k| random(2 + k % 2, 6, k as u64)).collect();
        let texts: Vec<_> = (0..4).map(|k| random(3 + k, 6, 50 + k as u64)).collect();
        let one = score_matrix(&shapes[..1], &texts[..1], &cfg).unwrap();
        assert_eq!(one.dim(), (1, 1));
        let full = score_matrix(&shapes, &texts, &cfg).unwrap();
        assert_eq!(full, score_matrix(&shapes, &texts, &cfg).unwrap());
        let perm = [2usize, 0, 3, 1];
        let ps: Vec<_> = perm.iter().map(|&i| shapes[i].clone()).collect();
        let pt: Vec<_> = perm.iter().map(|&i| texts[i].clone()).collect();
        let permuted = score_matrix(&ps, &pt, &cfg).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(permuted[[a, b]], full[[perm[a], perm[b]]]);
            }
        }
    }

    #[test]
    fn cosine_global_examples() {
        let a = array![[1.0, 2.0, -1.0]];
        let (v, _) = cosine_global_similarity(a.view(), a.view()).unwrap();
        assert!((v - 1.0).abs() < 1e-7);
        let (v, _) = cosine_global_similarity(array![[1.0, 0.0], [1.0, 0.0]].view(), array![[0.0, 3.0]].view()).unwrap();
        assert_eq!(v, 0.0);
        for seed in 0..200 {
            let (v, _) = cosine_global_similarity(random(3, 4, seed).view(), random(5, 4, seed + 1).view()).unwrap();
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn cosine_global_gradient() {
        let s = random(3, 4, 31);
        let w = random(2, 4, 32);
        let (_, cache) = cosine_global_similarity(s.view(), w.view()).unwrap();
        let (ds, dw) = cosine_global_backward(&cache, 1.0);
        let f = |s: &Array2<f64>, w: &Array2<f64>| cosine_global_similarity(s.view(), w.view()).unwrap().0;
        let h = 1e-6;
        for idx in 0..s.len() {
            let mut p = s.clone();
            let mut m = s.clone();
            p.as_slice_mut().unwrap()[idx] += h;
            m.as_slice_mut().unwrap()[idx] -= h;
            let fd = (f(&p, &w) - f(&m, &w)) / (2.0 * h);
            assert!((fd - ds.as_slice().unwrap()[idx]).abs() < 1e-8);
        }
        for idx in 0..w.len() {
            let mut p = w.clone();
            let mut m = w.clone();
            p.as_slice_mut().unwrap()[idx] += h;
            m.as_slice_mut().unwrap()[idx] -= h;
            let fd = (f(&s, &p) - f(&s, &m)) / (2.0 * h);
            assert!((fd - dw.as_slice().unwrap()[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn exact_ot_is_monotone_in_costs() {
        for seed in 0..50 {
            let cost = random(4, 4, seed).mapv(|v| v + 1.0);
            let base = -exact_uniform_ot(&cost);
            let mut r = rng::stream(seed + 1000);
            let mut lowered = cost.clone();
            let (i, j) = (r.random_range(0..4), r.random_range(0..4));
            lowered[[i, j]] -= r.random_range(0.0..1.0);
            assert!(-exact_uniform_ot(&lowered) >= base - 1e-15);
        }
    }
}
