use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn partforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partforge"))
        .args(args)
        .env_remove("PARTFORGE_API_KEY")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Relative path -> bytes for every file below `root`.
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

fn build_library(dir: &Path) -> PathBuf {
    let lib = dir.join("lib");
    let out = partforge(&["library", "build", "--out", p(&lib), "--points", "128", "--seed", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    lib
}

#[test]
fn selfcheck_passes() {
    let out = partforge(&["selfcheck"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 3, "{stdout}");
}

#[test]
fn missing_library_is_a_usage_error() {
    let out = partforge(&["augment", "--count", "5", "--seed", "7", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--library") && stderr.contains("Usage"), "{stderr}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = partforge(&["selfcheck", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn augment_twice_gives_identical_trees() {
    let dir = tempfile::tempdir().unwrap();
    let lib = build_library(dir.path());
    let out_dir = dir.path().join("out");
    let args = ["augment", "--library", p(&lib), "--count", "5", "--seed", "7", "--out", p(&out_dir)];
    assert!(partforge(&args).status.success());
    let first = tree(&out_dir);
    std::fs::remove_dir_all(&out_dir).unwrap();
    assert!(partforge(&args).status.success());
    assert_eq!(tree(&out_dir), first);
    let run_dir = Path::new("pairs").join("all-n5-s7-p256");
    assert!(first.contains_key(&run_dir.join("pairs.jsonl")));
    assert!(first.contains_key(&run_dir.join("run.json")));
    assert_eq!(first.keys().filter(|k| k.extension().is_some_and(|e| e == "xyz")).count(), 5);
}

#[test]
fn ablation_flags_change_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let lib = build_library(dir.path());
    let out_dir = dir.path().join("out");
    let schema = lib.join("schemas").join("table.json");
    let out = partforge(&[
        "augment", "--library", p(&lib), "--schema", p(&schema), "--count", "3", "--out", p(&out_dir), "--no-inter",
        "--no-intra",
    ]);
    assert!(out.status.success());
    let run = out_dir.join("pairs").join("table-n3-s0-p256-nointer-nointra");
    let text = std::fs::read_to_string(run.join("pairs.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().all(|l| l.contains("\"category\":\"table\"")));
}

#[test]
fn train_eval_score_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let lib = build_library(dir.path());
    let cfg = dir.path().join("train.cfg");
    std::fs::write(
        &cfg,
        "# tiny run\nepochs = 2\nsteps_per_epoch = 2\nbatch_size = 4\ndim = 8\npoint_hidden = 8\n\
         point_dim = 8\nembed_dim = 8\nn_points = 64\ngallery_size = 8\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let out = partforge(&[
        "train", "--config", p(&cfg), "--out", p(&run), "--library", p(&lib), "--set", "lr=0.001",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.pfck", "vocab.txt", "loss.csv", "metrics.jsonl", "run.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let runinfo: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(runinfo["resolved"]["config"]["lr"], 0.001);
    assert_eq!(runinfo["resolved"]["config"]["epochs"], 2);
    assert_eq!(runinfo["resolved"]["sources"]["lr"], "flag");
    let csv = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,L_SEG,L_S2T,L_T2S,total"));
    assert_eq!(csv.lines().count(), 3);

    let pairs = dir.path().join("pairs");
    assert!(partforge(&["augment", "--library", p(&lib), "--count", "4", "--seed", "1", "--out", p(&pairs), "--points", "64"])
        .status
        .success());
    let gallery = pairs.join("pairs").join("all-n4-s1-p64");
    let report = dir.path().join("report.json");
    let ckpt = run.join("checkpoint.pfck");
    let out = partforge(&["eval", "--ckpt", p(&ckpt), "--gallery", p(&gallery), "--out", p(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    for key in ["s2t_rr_at_1", "s2t_rr_at_5", "s2t_ndcg_at_5", "t2s_rr_at_1", "t2s_rr_at_5", "t2s_ndcg_at_5"] {
        let v = r[key].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&v), "{key} = {v}");
    }
    // four items: every relevant item sits in the top five
    assert_eq!(r["t2s_rr_at_5"], 100.0);
    assert_eq!(r["t2s_queries"], 4);

    let shape = gallery.join("pair_0.xyz");
    let out = partforge(&["score", "--shape", p(&shape), "--text", "a table with a thin top", "--ckpt", p(&ckpt)]);
    assert!(out.status.success());
    let s: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!((-2.0..=0.0).contains(&s), "{s}");
}

#[test]
fn runtime_errors_exit_one_with_a_single_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = partforge(&["score", "--shape", "missing.xyz", "--text", "a", "--ckpt", "missing.pfck"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&out.stderr).trim().lines().count(), 1);

    let out = partforge(&["train", "--out", p(&dir.path().join("t")), "--set", "bogus=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let lib = build_library(dir.path());
    let out = partforge(&["library", "caption", "--library", p(&lib), "--endpoint", "http://127.0.0.1:9/x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("PARTFORGE_API_KEY"));
}

#[test]
fn library_build_round_trips_through_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let lib = build_library(dir.path());
    let copy = dir.path().join("copy");
    let out = partforge(&["library", "build", "--from", p(&lib), "--out", p(&copy)]);
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(lib.join("manifest.jsonl")).unwrap(),
        std::fs::read(copy.join("manifest.jsonl")).unwrap()
    );
}
