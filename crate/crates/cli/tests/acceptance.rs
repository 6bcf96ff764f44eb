//! End-to-end acceptance criteria. Each test prints one PASS/FAIL line to
//! stderr (bypassing output capture) and then asserts. Tests hold a shared
//! lock so that wall-clock budgets are measured without interference.

#[path = "../../captioner/tests/stub/mod.rs"]
mod stub;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use ndarray::{Array2, Axis as NdAxis};
use partforge::augment::{generate_pair_detailed, AugmentOptions, CaptionTemplate};
use partforge::evalharness::{ndcg_at_k, rr_at_k};
use partforge::geometry::{aabb, containment_fraction};
use partforge::library::{default_schemas, synthetic_library, LibraryManifest, Relation, MANIFEST_FILE};
use partforge::matching::{emd_similarity, sinkhorn, uniform, SinkhornConfig};
use partforge::objective::{
    finite_difference_check, gradient_check_fixture, infonce_s2t, infonce_t2s, seg_cross_entropy, train, FdConfig,
    TrainConfig, TrainOutcome,
};
use partforge::rng;
use partforge_captioner::{request_caption, render_views, CaptionJob, EndpointConfig};
use rand::Rng as _;
use stub::{completion, Stub};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "{verdict} criterion {id} ({name}): {detail}");
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn max_abs(a: impl Iterator<Item = f64>) -> f64 {
    a.fold(0.0, |m, v| m.max(v.abs()))
}

/// Best assignment of a square cost matrix by trying every permutation.
fn permutation_optimum(cost: &Array2<f64>) -> f64 {
    let n = cost.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    // Heap's algorithm
    let mut c = vec![0usize; n];
    best = best.min((0..n).map(|i| cost[[i, idx[i]]]).sum());
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                idx.swap(0, i);
            } else {
                idx.swap(c[i], i);
            }
            best = best.min((0..n).map(|r| cost[[r, idx[r]]]).sum());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best / n as f64
}

#[test]
fn criterion_1_sinkhorn_correctness() {
    let _g = serial();
    let start = Instant::now();
    let mut r = rng::stream(101);
    let cfg = SinkhornConfig {
        epsilon: 1e-3,
        max_iter: 100_000,
        tol: 1e-9,
    };
    let mut worst_gap = 0.0f64;
    for _ in 0..100 {
        let cost = Array2::from_shape_simple_fn((3, 3), || r.random_range(0.0..1.0));
        let plan = sinkhorn(&cost, &uniform(3), &uniform(3), &cfg).unwrap();
        let sim = emd_similarity(&cost, &plan.flow).unwrap();
        worst_gap = worst_gap.max((sim - -permutation_optimum(&cost)).abs());
    }
    let mut worst_residual = 0.0f64;
    let mut converged = 0;
    for _ in 0..100 {
        let cost = Array2::from_shape_simple_fn((17, 32), || r.random_range(0.0..1.0));
        let plan = sinkhorn(&cost, &uniform(17), &uniform(32), &SinkhornConfig::default()).unwrap();
        if plan.iterations >= SinkhornConfig::default().max_iter {
            continue;
        }
        converged += 1;
        let rows = plan.flow.sum_axis(NdAxis(1)) - 1.0 / 17.0;
        let cols = plan.flow.sum_axis(NdAxis(0)) - 1.0 / 32.0;
        worst_residual = worst_residual.max(max_abs(rows.iter().chain(cols.iter()).copied()));
    }
    let elapsed = start.elapsed();
    report(
        1,
        "sinkhorn correctness",
        worst_gap < 1e-2 && worst_residual < 1e-6 && converged > 0 && elapsed < Duration::from_secs(10),
        &format!(
            "max |emd - exact| {worst_gap:.2e} (< 1e-2), max residual {worst_residual:.2e} (< 1e-6) on {converged}/100 converged, {:.2}s (< 10s)",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_2_gradient_fidelity() {
    let _g = serial();
    let start = Instant::now();
    let (params, batch, loss) = gradient_check_fixture(5).unwrap();
    let dims_ok = params.config.dim == 8
        && batch.len() == 3
        && batch.iter().all(|e| e.shape.len() == 32 && e.tokens.len() <= 12);
    let fd = FdConfig {
        step: 1e-5,
        ..FdConfig::default()
    };
    let rep = finite_difference_check(&params, &batch, &loss, &fd).unwrap();
    let mut covered: Vec<&str> = rep.worst.iter().map(|c| c.tensor.as_str()).collect();
    covered.sort_unstable();
    covered.dedup();
    let every_tensor = covered.len() == params.tensors().len();
    let elapsed = start.elapsed();
    report(
        2,
        "gradient fidelity",
        dims_ok && every_tensor && rep.max_rel_err < 1e-4 && elapsed < Duration::from_secs(60),
        &format!(
            "max relative error {:.2e} (< 1e-4) over {} coordinates in {}/{} tensors, {:.2}s (< 60s)",
            rep.max_rel_err,
            rep.coordinates,
            covered.len(),
            params.tensors().len(),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_3_augmentation_geometry() {
    let _g = serial();
    let start = Instant::now();
    let lib = synthetic_library(3, 512).unwrap();
    let tmpl = CaptionTemplate::default();
    let opts = AugmentOptions::default();
    let mut failures: Vec<String> = Vec::new();
    let mut relations = 0usize;
    let mut covers = 0usize;
    let mut worst_gap_err = 0.0f64;
    let mut min_containment = 1.0f64;
    for schema in default_schemas() {
        for k in 0..1000u64 {
            let (pair, asm) = generate_pair_detailed(&lib, &schema, &tmpl, &opts, rng::derive(77, k)).unwrap();
            let slot_of = |name: &str| schema.slots.iter().position(|s| s.name == name).unwrap();
            let part_at = |slot: usize| asm.parts.iter().find(|p| p.slot == slot);
            for part in &asm.parts {
                let slot = &schema.slots[part.slot];
                if !matches!(slot.relation, Relation::Above | Relation::Below) {
                    continue;
                }
                let anchor = part_at(slot_of(slot.anchor.as_deref().unwrap())).expect("anchor placed");
                let (own, base) = (aabb(&part.cloud).unwrap(), aabb(&anchor.cloud).unwrap());
                let gap = match slot.relation {
                    Relation::Below => base.min[2] - own.max[2],
                    _ => own.min[2] - base.max[2],
                };
                relations += 1;
                worst_gap_err = worst_gap_err.max((gap - slot.margin).abs());
                if (gap - slot.margin).abs() > 1e-6 {
                    failures.push(format!("{} pair {k}: slot {} gap {gap}", schema.category, slot.name));
                }
            }
            for (support, cover) in &schema.cover_pairs {
                let (Some(s), Some(c)) = (part_at(slot_of(support)), part_at(slot_of(cover))) else {
                    continue;
                };
                covers += 1;
                let frac = containment_fraction(&s.cloud, &aabb(&c.cloud).unwrap()).unwrap();
                min_containment = min_containment.min(frac);
                if frac < 0.95 {
                    failures.push(format!("{} pair {k}: containment {frac}", schema.category));
                }
            }
            if !pair.caption.contains(&schema.category)
                || !asm.part_captions.iter().all(|c| pair.caption.contains(c.as_str()))
            {
                failures.push(format!("{} pair {k}: caption {:?}", schema.category, pair.caption));
            }
            if pair.shape.len() != opts.n_points {
                failures.push(format!("{} pair {k}: {} points", schema.category, pair.shape.len()));
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        3,
        "augmentation geometry",
        failures.is_empty() && relations > 0 && covers > 0 && elapsed < Duration::from_secs(30),
        &format!(
            "{} violations; {relations} stacking relations (max |gap - margin| {worst_gap_err:.1e}), {covers} cover pairs (min containment {min_containment:.3}), {:.2}s (< 30s){}",
            failures.len(),
            elapsed.as_secs_f64(),
            failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    );
}

/// Sort-based oracle: order the row by descending score, ties by index,
/// then read off positions of the relevant items.
fn sorted_positions(row: &[f64], relevant: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    relevant
        .iter()
        .map(|&g| order.iter().position(|&i| i == g).unwrap())
        .collect()
}

#[test]
fn criterion_4_metric_oracles() {
    let _g = serial();
    let mut r = rng::stream(404);
    let mut rr_mismatch = 0;
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (q, g) = (r.random_range(1..12), r.random_range(1..20));
        // coarse values so that ties are common
        let scores = Array2::from_shape_simple_fn((q, g), || (r.random_range(-1.0..1.0f64) * 5.0).round() / 5.0);
        let relevant: Vec<Vec<usize>> = (0..q)
            .map(|_| {
                let n = r.random_range(1..=g.min(4));
                rand::seq::index::sample(&mut r, g, n).into_vec()
            })
            .collect();
        let k = r.random_range(1..=8);
        let (mut hits, mut ndcg) = (0usize, 0.0);
        for (row, rel) in scores.rows().into_iter().zip(&relevant) {
            let pos = sorted_positions(&row.to_vec(), rel);
            if pos.iter().any(|&p| p < k) {
                hits += 1;
            }
            let dcg: f64 = pos.iter().filter(|&&p| p < k).map(|&p| 1.0 / ((p + 2) as f64).log2()).sum();
            let ideal: f64 = (0..rel.len().min(k)).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
            ndcg += dcg / ideal;
        }
        let oracle_rr = 100.0 * hits as f64 / q as f64;
        let oracle_ndcg = 100.0 * ndcg / q as f64;
        if rr_at_k(&scores, &relevant, k).unwrap() != oracle_rr {
            rr_mismatch += 1;
        }
        worst = worst.max((ndcg_at_k(&scores, &relevant, k).unwrap() - oracle_ndcg).abs());
    }
    report(
        4,
        "metric oracles",
        rr_mismatch == 0 && worst < 1e-9,
        &format!("{rr_mismatch} RR mismatches (exact), max |NDCG delta| {worst:.1e} (< 1e-9) over 200 matrices"),
    );
}

#[test]
fn criterion_5_closed_form_losses() {
    let _g = serial();
    let mut worst = 0.0f64;
    for b in [2usize, 7, 16, 64] {
        let sim = Array2::from_elem((b, b), -0.37);
        let expected = (b as f64).ln();
        worst = worst.max((infonce_s2t(&sim, 0.1).unwrap().0 - expected).abs());
        worst = worst.max((infonce_t2s(&sim, 0.1).unwrap().0 - expected).abs());
    }
    for k in [2usize, 5, 11] {
        let logits = Array2::from_elem((40, k), 1.3);
        let labels: Vec<u32> = (0..40).map(|i| (i % k) as u32).collect();
        worst = worst.max((seg_cross_entropy(&logits, &labels).unwrap().0 - (k as f64).ln()).abs());
    }
    report(
        5,
        "closed-form losses",
        worst < 1e-9,
        &format!("max deviation from ln B / ln K {worst:.1e} (< 1e-9)"),
    );
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn desk_config(seed: u64, adjust: bool) -> TrainConfig {
    TrainConfig {
        seed,
        dim: 32,
        point_hidden: 32,
        point_dim: 32,
        embed_dim: 32,
        n_points: 256,
        batch_size: 16,
        epochs: 20,
        gallery_size: 64,
        inter: adjust,
        intra: adjust,
        ..TrainConfig::default()
    }
}

fn desk_run(seed: u64, adjust: bool) -> (TrainOutcome, Duration) {
    let lib = synthetic_library(seed, 512).unwrap();
    let start = Instant::now();
    let out = train(&desk_config(seed, adjust), &lib, &CaptionTemplate::default(), None, None).unwrap();
    (out, start.elapsed())
}

fn adjusted_runs() -> &'static Vec<(TrainOutcome, Duration)> {
    static RUNS: OnceLock<Vec<(TrainOutcome, Duration)>> = OnceLock::new();
    RUNS.get_or_init(|| SEEDS.iter().map(|&s| desk_run(s, true)).collect())
}

fn final_t2s_rr1(out: &TrainOutcome) -> f64 {
    out.evals.last().expect("final evaluation").t2s.rr_at_1
}

#[test]
fn criterion_6_desk_scale_learning() {
    let _g = serial();
    let runs = adjusted_runs();
    let bound = 16f64.ln() - 0.5;
    let losses: Vec<f64> = runs
        .iter()
        .map(|(o, _)| {
            let last = o.epochs.last().unwrap();
            (last.s2t + last.t2s) / 2.0
        })
        .collect();
    let mean_rr = runs.iter().map(|(o, _)| final_t2s_rr1(o)).sum::<f64>() / runs.len() as f64;
    let gallery_ok = runs.iter().all(|(o, _)| o.evals.last().unwrap().t2s.queries == 64);
    let slowest = runs.iter().map(|(_, t)| *t).max().unwrap();
    let lib = synthetic_library(0, 512).unwrap();
    let buckets_ok = lib.schemas().len() == 2 && lib.bucket_counts().values().all(|&n| n >= 4);
    report(
        6,
        "desk-scale learning",
        losses.iter().all(|&l| l < bound)
            && mean_rr >= 7.8
            && gallery_ok
            && buckets_ok
            && slowest < Duration::from_secs(600),
        &format!(
            "final (S2T+T2S)/2 per seed {:?} (< {bound:.3}), mean held-out T2S RR@1 {mean_rr:.2}% (>= 7.8%), slowest run {:.1}s (< 600s)",
            losses.iter().map(|l| format!("{l:.3}")).collect::<Vec<_>>(),
            slowest.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_7_ablation_trend() {
    let _g = serial();
    let with: Vec<f64> = adjusted_runs().iter().map(|(o, _)| final_t2s_rr1(o)).collect();
    let without: Vec<f64> = SEEDS.iter().map(|&s| final_t2s_rr1(&desk_run(s, false).0)).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&with), mean(&without));
    report(
        7,
        "ablation trend",
        a >= b,
        &format!("mean held-out T2S RR@1 with adjustments {a:.2}% vs without {b:.2}% (per seed {with:?} vs {without:?})"),
    );
}

fn partforge(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_partforge"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Runs `args` into `out` twice from scratch and compares the trees.
fn twice_identical(out: &Path, args: &[&str]) -> (bool, usize) {
    let mut trees = Vec::new();
    for _ in 0..2 {
        let _ = std::fs::remove_dir_all(out);
        let res = partforge(args);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        trees.push(tree(out));
    }
    (trees[0] == trees[1], trees[0].len())
}

#[test]
fn criterion_8_determinism() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let lib = dir.path().join("lib");
    assert!(partforge(&["library", "build", "--out", &s(&lib), "--seed", "4"]).status.success());

    let aug = dir.path().join("aug");
    let (aug_same, aug_files) = twice_identical(
        &aug,
        &["augment", "--library", &s(&lib), "--count", "20", "--seed", "7", "--out", &s(&aug)],
    );
    let run = dir.path().join("train");
    let (train_same, train_files) = twice_identical(
        &run,
        &[
            "train", "--out", &s(&run), "--library", &s(&lib), "--seed", "3", "--set", "epochs=2", "--set",
            "steps_per_epoch=3", "--set", "dim=16", "--set", "point_hidden=16", "--set", "point_dim=16", "--set",
            "embed_dim=16", "--set", "n_points=128", "--set", "batch_size=8", "--set", "gallery_size=16",
        ],
    );
    report(
        8,
        "determinism",
        aug_same && train_same && aug_files == 22 && train_files == 5,
        &format!(
            "augment: {aug_files} files {}; train: {train_files} files {}",
            if aug_same { "byte-identical" } else { "DIFFER" },
            if train_same { "byte-identical" } else { "DIFFER" }
        ),
    );
}

#[test]
fn criterion_9_captioner_resilience() {
    let _g = serial();
    // 429, 429, then 200
    let stub = Stub::start(Duration::ZERO, |k, _| {
        if k < 2 {
            (429, r#"{"error":"rate limited"}"#.into())
        } else {
            (200, completion("a narrow slatted back"))
        }
    });
    let lib = synthetic_library(6, 64).unwrap();
    let rec = &lib.records()[0];
    let job = CaptionJob {
        part_id: rec.part_id.clone(),
        category: rec.category.clone(),
        part_type: rec.part_type.clone(),
        shape_caption: rec.caption.clone(),
        views: render_views(&rec.cloud, 32).unwrap(),
    };
    let endpoint = EndpointConfig {
        api_key: Some("k".into()),
        backoff: Duration::from_millis(5),
        ..EndpointConfig::new(&stub.url)
    };
    let resp = request_caption(&job, &endpoint).unwrap();
    let retry_ok = resp.retries == 2 && stub.requests() == 3;

    // interrupted then resumed through the CLI
    let dir = tempfile::tempdir().unwrap();
    lib.save(dir.path()).unwrap();
    let n = lib.len();
    let dying = Stub::start(Duration::ZERO, |k, _| {
        if k < 5 {
            (200, completion("first pass phrase"))
        } else {
            (503, "unavailable".into())
        }
    });
    let caption = |url: &str| {
        Command::new(env!("CARGO_BIN_EXE_partforge"))
            .args(["library", "caption", "--library", dir.path().to_str().unwrap(), "--endpoint", url])
            .args(["--concurrency", "2", "--resolution", "32", "--max-retries", "0"])
            .env("PARTFORGE_API_KEY", "k")
            .output()
            .unwrap()
    };
    let first = caption(&dying.url);
    let healthy = Stub::start(Duration::ZERO, |_, _| (200, completion("second pass phrase")));
    let second = caption(&healthy.url);
    let manifest = LibraryManifest::read(dir.path().join(MANIFEST_FILE)).unwrap();
    let from_first = manifest.entries.iter().filter(|e| e.caption == "first pass phrase").count();
    let resume_ok = first.status.code() == Some(1)
        && second.status.success()
        && healthy.requests() == n - 5
        && from_first == 5;
    report(
        9,
        "captioner resilience",
        retry_ok && resume_ok,
        &format!(
            "429,429,200 -> {} retries over {} requests; resume issued {} requests for {} remaining parts ({} duplicates)",
            resp.retries,
            stub.requests(),
            healthy.requests(),
            n - 5,
            healthy.requests().saturating_sub(n - 5)
        ),
    );
}
