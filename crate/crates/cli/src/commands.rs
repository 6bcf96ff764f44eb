use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use partforge::augment::{generate_any_stream, generate_stream, write_pairs, AugmentOptions, CaptionTemplate};
use partforge::encoders::checkpoint::Checkpoint;
use partforge::evalharness::{evaluate, score_gallery, EvalOptions, Gallery, MetricsReport, RetrievalGround};
use partforge::geometry::PointCloud;
use partforge::library::{self, AssemblySchema, ComponentLibrary};
use partforge::objective::{self, checkpoint_train_config, checkpoint_vocab, parse_kv, TrainConfig};
use partforge_captioner::{caption_library, CaptionOptions, EndpointConfig, API_KEY_ENV};
use serde_json::{json, Value};

use crate::{AugmentArgs, BuildArgs, CaptionArgs, EvalArgs, ScoreArgs, TrainArgs};

pub const RUN_FILE: &str = "run.json";
pub const ENV_PREFIX: &str = "PARTFORGE_";
/// Points per part of the synthetic library used when `train` gets no library.
pub const SYNTHETIC_POINTS: usize = 512;

pub fn init_threads(threads: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn write_run(dir: &Path, command: &str, resolved: Value) -> anyhow::Result<()> {
    let run = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "resolved": resolved,
    });
    let path = dir.join(RUN_FILE);
    let mut text = serde_json::to_string_pretty(&run)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_library(dir: &Path) -> anyhow::Result<ComponentLibrary> {
    let report = library::ingest(dir).with_context(|| format!("reading library {}", dir.display()))?;
    for e in &report.errors {
        eprintln!("warning: skipped {} ({}): {}", e.path.display(), e.part_id, e.reason);
    }
    Ok(report.library)
}

pub fn library_build(args: &BuildArgs, threads: Option<usize>) -> anyhow::Result<ExitCode> {
    init_threads(threads)?;
    let lib = match &args.from {
        Some(src) => load_library(src)?,
        None => library::synthetic_library(args.seed, args.points)?,
    };
    lib.save(&args.out)
        .with_context(|| format!("writing library {}", args.out.display()))?;
    let buckets = lib.bucket_counts();
    write_run(
        &args.out,
        "library build",
        json!({
            "out": args.out,
            "from": args.from,
            "seed": args.seed,
            "points": args.points,
            "threads": threads,
            "parts": lib.len(),
        }),
    )?;
    println!("{} parts in {} buckets -> {}", lib.len(), buckets.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn library_caption(args: &CaptionArgs, threads: Option<usize>) -> anyhow::Result<ExitCode> {
    init_threads(threads)?;
    let endpoint = EndpointConfig {
        model: args.model.clone(),
        max_retries: args.max_retries,
        timeout: Duration::from_secs_f64(args.timeout),
        backoff: Duration::from_millis(args.backoff_ms),
        ..EndpointConfig::from_env(&args.endpoint)
    };
    if endpoint.api_key.is_none() {
        bail!("missing credential: set {API_KEY_ENV}");
    }
    let concurrency = match threads {
        Some(t) => args.concurrency.min(t),
        None => args.concurrency,
    };
    let opts = CaptionOptions {
        concurrency,
        resolution: args.resolution,
    };
    let report = caption_library(&args.library, &endpoint, &opts)?;
    for f in &report.failures {
        eprintln!("failed: {f}");
    }
    println!(
        "captioned {}, already captioned {}, failed {}",
        report.captioned.len(),
        report.skipped,
        report.failures.len()
    );
    if !report.ok() {
        bail!("{} captions failed; rerun to resume", report.failures.len());
    }
    Ok(ExitCode::SUCCESS)
}

/// Directory name of an augmentation run; fixed by its parameters.
pub fn run_id(category: Option<&str>, args: &AugmentArgs) -> String {
    let mut id = format!("{}-n{}-s{}-p{}", category.unwrap_or("all"), args.count, args.seed, args.points);
    if args.no_inter {
        id.push_str("-nointer");
    }
    if args.no_intra {
        id.push_str("-nointra");
    }
    id
}

pub fn augment(args: &AugmentArgs, threads: Option<usize>) -> anyhow::Result<ExitCode> {
    init_threads(threads)?;
    let lib = load_library(&args.library)?;
    let tmpl = match &args.template {
        Some(p) => CaptionTemplate::new(p, ", ", " and ")?,
        None => CaptionTemplate::default(),
    };
    let opts = AugmentOptions {
        n_points: args.points,
        theta: args.theta,
        inter: !args.no_inter,
        intra: !args.no_intra,
    };
    let schema = match &args.schema {
        Some(path) => {
            let s = AssemblySchema::load(path)?;
            s.validate()?;
            Some(s)
        }
        None => None,
    };
    let pairs = match &schema {
        Some(s) => generate_stream(&lib, s, &tmpl, &opts, args.count, args.seed)?,
        None => generate_any_stream(&lib, &tmpl, &opts, args.count, args.seed)?,
    };
    let id = run_id(schema.as_ref().map(|s| s.category.as_str()), args);
    let dir = args.out.join("pairs").join(&id);
    write_pairs(&dir, &pairs)?;
    write_run(
        &dir,
        "augment",
        json!({
            "library": args.library,
            "schema": args.schema,
            "category": schema.as_ref().map(|s| s.category.clone()),
            "count": args.count,
            "seed": args.seed,
            "out": args.out,
            "run_id": id,
            "options": opts,
            "template": tmpl,
            "threads": threads,
        }),
    )?;
    println!("{} pairs -> {}", pairs.len(), dir.display());
    Ok(ExitCode::SUCCESS)
}

/// Where a resolved training key came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    File,
    Env,
    Flag,
}

impl Source {
    fn as_str(self) -> &'static str {
        match self {
            Self::File => "file",
            Self::Env => "env",
            Self::Flag => "flag",
        }
    }
}

/// Training keys merged with flag > environment > file precedence.
pub fn merged_train_keys(
    args: &TrainArgs,
    env: impl Fn(&str) -> Option<String>,
) -> anyhow::Result<BTreeMap<String, (String, Source)>> {
    let mut merged = BTreeMap::new();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for (k, v) in parse_kv(&text, path)? {
            if !TrainConfig::KEYS.contains(&k.as_str()) {
                bail!("{}: unknown config key `{k}`", path.display());
            }
            merged.insert(k, (v, Source::File));
        }
    }
    for key in TrainConfig::KEYS {
        if let Some(v) = env(&format!("{ENV_PREFIX}{}", key.to_ascii_uppercase())) {
            merged.insert(key.to_string(), (v, Source::Env));
        }
    }
    for item in &args.set {
        let (k, v) = item
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{item}`"))?;
        let k = k.trim();
        if !TrainConfig::KEYS.contains(&k) {
            bail!("unknown config key `{k}`");
        }
        merged.insert(k.to_string(), (v.trim().to_string(), Source::Flag));
    }
    if let Some(lib) = &args.library {
        merged.insert("library".into(), (lib.display().to_string(), Source::Flag));
    }
    if let Some(seed) = args.seed {
        merged.insert("seed".into(), (seed.to_string(), Source::Flag));
    }
    Ok(merged)
}

pub fn train(args: &TrainArgs, threads: Option<usize>) -> anyhow::Result<ExitCode> {
    let merged = merged_train_keys(args, |k| std::env::var(k).ok())?;
    let mut cfg = TrainConfig::default();
    for (k, (v, _)) in &merged {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    let threads = match threads {
        Some(t) => Some(t),
        None => merged
            .get("threads")
            .map(|(v, _)| v.parse::<usize>().with_context(|| format!("bad value `{v}` for `threads`")))
            .transpose()?,
    };
    init_threads(threads)?;
    let library_dir = merged.get("library").map(|(v, _)| PathBuf::from(v));
    let lib = match &library_dir {
        Some(dir) => load_library(dir)?,
        None => library::synthetic_library(cfg.seed, SYNTHETIC_POINTS)?,
    };
    let resume = match &args.resume {
        Some(path) => Some(Checkpoint::load(path)?),
        None => None,
    };

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let sources: BTreeMap<&str, &str> = merged.iter().map(|(k, (_, s))| (k.as_str(), s.as_str())).collect();
    write_run(
        &args.out,
        "train",
        json!({
            "config": cfg,
            "sources": sources,
            "library": match &library_dir {
                Some(dir) => json!(dir),
                None => json!({"synthetic": {"seed": cfg.seed, "points": SYNTHETIC_POINTS}}),
            },
            "template": CaptionTemplate::default(),
            "resume": args.resume,
            "out": args.out,
            "threads": threads,
        }),
    )?;

    let outcome = objective::train(&cfg, &lib, &CaptionTemplate::default(), resume.as_ref(), Some(&args.out))?;
    if let Some(last) = outcome.epochs.last() {
        println!(
            "epoch {}: seg {:.4} s2t {:.4} t2s {:.4} total {:.4}",
            last.epoch, last.seg, last.s2t, last.t2s, last.total
        );
    }
    for e in &outcome.evals {
        println!(
            "epoch {} held-out: S2T RR@1 {:.2} T2S RR@1 {:.2}",
            e.epoch, e.s2t.rr_at_1, e.t2s.rr_at_1
        );
    }
    println!("checkpoint -> {}", args.out.join(objective::CHECKPOINT_FILE).display());
    Ok(ExitCode::SUCCESS)
}

fn load_model(path: &Path) -> anyhow::Result<(Checkpoint, partforge::encoders::Vocab, EvalOptions)> {
    let ck = Checkpoint::load(path)?;
    let vocab = checkpoint_vocab(&ck)?;
    let tc = checkpoint_train_config(&ck).unwrap_or_default();
    let opts = EvalOptions {
        similarity: tc.similarity,
        sinkhorn: tc.sinkhorn(),
        ..EvalOptions::default()
    };
    Ok((ck, vocab, opts))
}

/// Flat report: `s2t_*` and `t2s_*` metric fields plus the inputs.
pub fn flat_report(reports: &[MetricsReport; 2], checkpoint: &Path, gallery: &Path) -> Value {
    let mut out = serde_json::Map::new();
    out.insert("checkpoint".into(), json!(checkpoint));
    out.insert("gallery".into(), json!(gallery));
    for (prefix, r) in [("s2t", &reports[0]), ("t2s", &reports[1])] {
        out.insert(format!("{prefix}_rr_at_1"), json!(r.rr_at_1));
        out.insert(format!("{prefix}_rr_at_5"), json!(r.rr_at_5));
        out.insert(format!("{prefix}_ndcg_at_5"), json!(r.ndcg_at_5));
        out.insert(format!("{prefix}_queries"), json!(r.queries));
        out.insert(format!("{prefix}_gallery"), json!(r.gallery));
    }
    Value::Object(out)
}

pub fn eval(args: &EvalArgs, threads: Option<usize>) -> anyhow::Result<ExitCode> {
    init_threads(threads)?;
    let (ck, vocab, opts) = load_model(&args.ckpt)?;
    let gallery = Gallery::load(&args.gallery).with_context(|| format!("reading gallery {}", args.gallery.display()))?;
    let reports = evaluate(&ck.params, &vocab, &gallery, &opts)?;
    let report = flat_report(&reports, &args.ckpt, &args.gallery);
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(&args.out, text).with_context(|| format!("writing {}", args.out.display()))?;
    for r in &reports {
        println!(
            "{:?}: RR@1 {:.2} RR@5 {:.2} NDCG@5 {:.2} ({} queries)",
            r.direction, r.rr_at_1, r.rr_at_5, r.ndcg_at_5, r.queries
        );
    }
    Ok(ExitCode::SUCCESS)
}

pub fn score(args: &ScoreArgs, threads: Option<usize>) -> anyhow::Result<ExitCode> {
    init_threads(threads)?;
    let (ck, vocab, opts) = load_model(&args.ckpt)?;
    let shape = PointCloud::read_xyz(&args.shape)?;
    let gallery = Gallery {
        shapes: vec![shape],
        captions: vec![args.text.clone()],
        ground: RetrievalGround::one_to_one(1),
    };
    let s = score_gallery(&ck.params, &vocab, &gallery, &opts)?;
    println!("{}", s[[0, 0]]);
    Ok(ExitCode::SUCCESS)
}
