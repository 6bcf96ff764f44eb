//! Point-cloud encoder: `[shared MLP] -> max-pool -> [fusion MLP] -> part pooling`.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Axis};

use super::ModelParams;
use crate::geometry::PointCloud;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct ShapeEncoding {
    /// One row per part group, ascending by group label.
    pub part_features: Array2<f64>,
    pub part_labels: Vec<u32>,
    pub seg_logits: Array2<f64>,
    /// Max-pooled per-point features (`s^g`).
    pub global: Array1<f64>,
}

/// Intermediate values needed by [`backward`].
#[derive(Debug, Clone)]
pub struct ShapeCache {
    input: Array2<f64>,
    pre1: Array2<f64>,
    act1: Array2<f64>,
    pre2: Array2<f64>,
    argmax: Vec<usize>,
    fused: Array2<f64>,
    pre3: Array2<f64>,
    act3: Array2<f64>,
    out: Array2<f64>,
    groups: Vec<usize>,
    group_sizes: Vec<usize>,
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

fn relu_back(grad: &mut Array2<f64>, pre: &Array2<f64>) {
    grad.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
}

fn affine(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    x.dot(w) + b
}

/// Encodes a cloud. Parts are grouped by the cloud's labels when present,
/// otherwise by the argmax of the segmentation logits (ties to the lowest class).
pub fn encode_shape(cloud: &PointCloud, params: &ModelParams) -> Result<(ShapeEncoding, ShapeCache)> {
    let n = cloud.len();
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    let k = params.config.seg_classes;
    let p_dim = params.config.point_dim;
    let input = Array2::from_shape_fn((n, 3), |(i, j)| cloud.points()[i][j]);

    let pre1 = affine(&input, &params.pt_w1, &params.pt_b1);
    let act1 = relu(&pre1);
    let pre2 = affine(&act1, &params.pt_w2, &params.pt_b2);
    let point_feats = relu(&pre2);

    // max-pool over points, ties to the lowest index
    let mut global = Array1::from_elem(p_dim, f64::NEG_INFINITY);
    let mut argmax = vec![0usize; p_dim];
    for (i, row) in point_feats.outer_iter().enumerate() {
        for c in 0..p_dim {
            if row[c] > global[c] {
                global[c] = row[c];
                argmax[c] = i;
            }
        }
    }

    let mut fused = Array2::zeros((n, 2 * p_dim));
    fused.slice_mut(s![.., ..p_dim]).assign(&point_feats);
    fused.slice_mut(s![.., p_dim..]).assign(&global.broadcast((n, p_dim)).expect("broadcast"));

    let pre3 = affine(&fused, &params.fuse_w1, &params.fuse_b1);
    let act3 = relu(&pre3);
    let out = affine(&act3, &params.fuse_w2, &params.fuse_b2);
    let seg_logits = affine(&out, &params.seg_w, &params.seg_b);

    let labels: Vec<usize> = match cloud.labels() {
        Some(l) => {
            let labels: Vec<usize> = l.iter().map(|&v| v as usize).collect();
            if let Some(&bad) = labels.iter().find(|&&v| v >= k) {
                return Err(Error::LabelOutOfRange { label: bad, classes: k });
            }
            labels
        }
        None => seg_logits
            .outer_iter()
            .map(|row| {
                let mut best = 0;
                for c in 1..k {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect(),
    };

    let mut group_of: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in &labels {
        group_of.entry(l).or_insert(0);
    }
    for (g, v) in group_of.values_mut().enumerate() {
        *v = g;
    }
    let part_labels: Vec<u32> = group_of.keys().map(|&l| l as u32).collect();
    let groups: Vec<usize> = labels.iter().map(|l| group_of[l]).collect();
    let mut group_sizes = vec![0usize; part_labels.len()];
    let mut part_features = Array2::zeros((part_labels.len(), params.config.dim));
    for (i, &g) in groups.iter().enumerate() {
        group_sizes[g] += 1;
        let mut row = part_features.row_mut(g);
        row += &out.row(i);
    }
    for (g, &size) in group_sizes.iter().enumerate() {
        part_features.row_mut(g).mapv_inplace(|v| v / size as f64);
    }

    let enc = ShapeEncoding {
        part_features,
        part_labels,
        seg_logits,
        global,
    };
    let cache = ShapeCache {
        input,
        pre1,
        act1,
        pre2,
        argmax,
        fused,
        pre3,
        act3,
        out,
        groups,
        group_sizes,
    };
    Ok((enc, cache))
}

/// Accumulates into `grads` the gradients of a scalar whose derivatives with
/// respect to `part_features` and `seg_logits` are given. Either upstream may
/// be omitted when it is zero.
pub fn backward(
    cache: &ShapeCache,
    params: &ModelParams,
    d_parts: Option<&Array2<f64>>,
    d_seg: Option<&Array2<f64>>,
    grads: &mut ModelParams,
) -> Result<()> {
    let n = cache.input.nrows();
    let dim = params.config.dim;
    let p_dim = params.config.point_dim;
    let mut d_out = Array2::<f64>::zeros((n, dim));
    if let Some(dp) = d_parts {
        if dp.dim() != (cache.group_sizes.len(), dim) {
            return Err(Error::ShapeMismatch(format!(
                "part gradient {:?} for {} groups",
                dp.dim(),
                cache.group_sizes.len()
            )));
        }
        for (i, &g) in cache.groups.iter().enumerate() {
            let inv = 1.0 / cache.group_sizes[g] as f64;
            d_out.row_mut(i).scaled_add(inv, &dp.row(g));
        }
    }
    if let Some(ds) = d_seg {
        if ds.dim() != (n, params.config.seg_classes) {
            return Err(Error::ShapeMismatch("segmentation gradient".into()));
        }
        grads.seg_w += &cache.out.t().dot(ds);
        grads.seg_b += &ds.sum_axis(Axis(0)).insert_axis(Axis(0));
        d_out += &ds.dot(&params.seg_w.t());
    }

    grads.fuse_w2 += &cache.act3.t().dot(&d_out);
    grads.fuse_b2 += &d_out.sum_axis(Axis(0)).insert_axis(Axis(0));
    let mut d_pre3 = d_out.dot(&params.fuse_w2.t());
    relu_back(&mut d_pre3, &cache.pre3);

    grads.fuse_w1 += &cache.fused.t().dot(&d_pre3);
    grads.fuse_b1 += &d_pre3.sum_axis(Axis(0)).insert_axis(Axis(0));
    let d_fused = d_pre3.dot(&params.fuse_w1.t());

    let mut d_point = d_fused.slice(s![.., ..p_dim]).to_owned();
    let d_global = d_fused.slice(s![.., p_dim..]).sum_axis(Axis(0));
    for (c, &i) in cache.argmax.iter().enumerate() {
        d_point[[i, c]] += d_global[c];
    }
    relu_back(&mut d_point, &cache.pre2);

    grads.pt_w2 += &cache.act1.t().dot(&d_point);
    grads.pt_b2 += &d_point.sum_axis(Axis(0)).insert_axis(Axis(0));
    let mut d_pre1 = d_point.dot(&params.pt_w2.t());
    relu_back(&mut d_pre1, &cache.pre1);

    grads.pt_w1 += &cache.input.t().dot(&d_pre1);
    grads.pt_b1 += &d_pre1.sum_axis(Axis(0)).insert_axis(Axis(0));
    Ok(())
}

/// Point index achieving the max-pool for each global channel.
pub fn global_argmax(cache: &ShapeCache) -> &[usize] {
    &cache.argmax
}

/// The discrete choices of a forward pass: every ReLU gate, the max-pool
/// winners and the part grouping. The encoding is smooth in the parameters
/// as long as this stays the same.
pub fn branch_pattern(cache: &ShapeCache) -> Vec<usize> {
    let gates = |pre: &Array2<f64>| pre.iter().map(|&v| usize::from(v > 0.0)).collect::<Vec<_>>();
    let mut out = gates(&cache.pre1);
    out.extend(gates(&cache.pre2));
    out.extend(gates(&cache.pre3));
    out.extend(&cache.argmax);
    out.extend(&cache.groups);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ModelConfig;
    use crate::rng;
    use rand::seq::SliceRandom;
    use rand::Rng as _;

    fn small_config() -> ModelConfig {
        ModelConfig {
            point_hidden: 6,
            point_dim: 5,
            dim: 4,
            seg_classes: 3,
            vocab_size: 4,
            embed_dim: 3,
        }
    }

    fn random_cloud(n: usize, seed: u64, labelled: bool) -> PointCloud {
        let mut r = rng::stream(seed);
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])
            .collect();
        if labelled {
            let labels = (0..n).map(|i| (i * 2 / n) as u32).collect();
            PointCloud::with_labels(pts, labels).unwrap()
        } else {
            PointCloud::new(pts).unwrap()
        }
    }

    #[test]
    fn output_shapes() {
        let params = ModelParams::init(small_config(), 1).unwrap();
        let (enc, _) = encode_shape(&random_cloud(8, 0, true), &params).unwrap();
        assert_eq!(enc.part_features.dim(), (2, 4));
        assert_eq!(enc.seg_logits.dim(), (8, 3));
        assert_eq!(enc.part_labels, vec![0, 1]);
        assert_eq!(enc.global.len(), 5);
    }

    #[test]
    fn label_out_of_range() {
        let params = ModelParams::init(small_config(), 1).unwrap();
        let c = PointCloud::with_labels(vec![[0.0; 3]], vec![3]).unwrap();
        assert!(matches!(encode_shape(&c, &params), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn unlabelled_clouds_group_by_prediction() {
        let params = ModelParams::init(small_config(), 5).unwrap();
        let (enc, _) = encode_shape(&random_cloud(40, 3, false), &params).unwrap();
        let mut predicted: Vec<u32> = enc
            .seg_logits
            .outer_iter()
            .map(|r| {
                let mut b = 0;
                for c in 1..r.len() {
                    if r[c] > r[b] {
                        b = c;
                    }
                }
                b as u32
            })
            .collect();
        predicted.sort();
        predicted.dedup();
        assert_eq!(enc.part_labels, predicted);
    }

    #[test]
    fn permutation_invariance() {
        let params = ModelParams::init(small_config(), 2).unwrap();
        let cloud = random_cloud(30, 4, true);
        let mut order: Vec<usize> = (0..30).collect();
        order.shuffle(&mut rng::stream(8));
        let pts = order.iter().map(|&i| cloud.points()[i]).collect();
        let labels = order.iter().map(|&i| cloud.labels().unwrap()[i]).collect();
        let permuted = PointCloud::with_labels(pts, labels).unwrap();
        let (a, _) = encode_shape(&cloud, &params).unwrap();
        let (b, _) = encode_shape(&permuted, &params).unwrap();
        for (x, y) in a.part_features.iter().zip(b.part_features.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicating_a_point_keeps_global_feature() {
        let params = ModelParams::init(small_config(), 2).unwrap();
        let cloud = random_cloud(12, 6, false);
        let mut pts = cloud.points().to_vec();
        pts.push(pts[5]);
        let (a, _) = encode_shape(&cloud, &params).unwrap();
        let (b, _) = encode_shape(&PointCloud::new(pts).unwrap(), &params).unwrap();
        assert_eq!(a.global, b.global);
    }

    #[test]
    fn scaling_one_point_touches_few_global_channels() {
        let params = ModelParams::init(small_config(), 9).unwrap();
        let cloud = random_cloud(50, 1, false);
        let (a, cache) = encode_shape(&cloud, &params).unwrap();
        let victim = 17;
        let mut pts = cloud.points().to_vec();
        pts[victim] = pts[victim].map(|v| v * 1.5);
        let (b, _) = encode_shape(&PointCloud::new(pts).unwrap(), &params).unwrap();
        for c in 0..a.global.len() {
            if a.global[c] != b.global[c] {
                // either the point owned the channel before or it overtakes it now
                let owned = global_argmax(&cache)[c] == victim;
                assert!(owned || b.global[c] > a.global[c]);
            }
        }
    }

    #[test]
    fn max_pool_gradient_routes_to_one_point() {
        let params = ModelParams::init(small_config(), 11).unwrap();
        let cloud = random_cloud(20, 2, true);
        let (_, cache) = encode_shape(&cloud, &params).unwrap();
        // perturb each point and see which ones move the global feature
        let (base, _) = encode_shape(&cloud, &params).unwrap();
        for c in 0..base.global.len() {
            if base.global[c] <= 0.0 {
                continue;
            }
            let mut movers = Vec::new();
            for i in 0..cloud.len() {
                let mut pts = cloud.points().to_vec();
                pts[i][0] += 1e-6;
                pts[i][1] -= 1e-6;
                let moved = PointCloud::with_labels(pts, cloud.labels().unwrap().to_vec()).unwrap();
                let (e, _) = encode_shape(&moved, &params).unwrap();
                if e.global[c] != base.global[c] {
                    movers.push(i);
                }
            }
            assert_eq!(movers, vec![global_argmax(&cache)[c]]);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let params = ModelParams::init(small_config(), 3).unwrap();
        let (enc, cache) = encode_shape(&random_cloud(10, 5, true), &params).unwrap();
        let mut grads = params.zeros_like();
        let dp = Array2::zeros(enc.part_features.dim());
        let ds = Array2::zeros(enc.seg_logits.dim());
        backward(&cache, &params, Some(&dp), Some(&ds), &mut grads).unwrap();
        assert_eq!(grads.sq_norm(), 0.0);
    }
}
