//! End-to-end exercises of the `vvs` binary: subcommand flows, exit codes,
//! JSON output shapes, and byte-level idempotency.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use vvs::eval::EmbeddingStore;
use vvs::manifest::{DatasetManifest, Tier, VideoEntry};
use vvs::trainer::{load_checkpoint, PipelineToggles};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_vvs")
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(bin())
        .args(args)
        .output()
        .expect("binary spawns");
    (
        out.status.code().expect("binary exits"),
        String::from_utf8(out.stdout).expect("stdout is utf-8"),
        String::from_utf8(out.stderr).expect("stderr is utf-8"),
    )
}

fn run_ok(args: &[&str]) -> serde_json::Value {
    let (code, stdout, stderr) = run(args);
    assert_eq!(
        code, 0,
        "args {args:?} failed\nstdout: {stdout}\nstderr: {stderr}"
    );
    serde_json::from_str(&stdout).expect("stdout is one JSON value")
}

struct Fixture {
    #[allow(dead_code)]
    dir: tempfile::TempDir,
    manifest: PathBuf,
    ckpt: PathBuf,
    store: PathBuf,
}

/// One tiny corpus, a one-epoch checkpoint, and a full-pipeline store,
/// shared by every test in this file.
fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let data = dir.path().join("data");
        run_ok(&[
            "synth",
            "--out",
            data.to_str().unwrap(),
            "--videos",
            "24",
            "--queries",
            "4",
            "--channels",
            "8",
            "--topics",
            "4",
            "--t-min",
            "12",
            "--t-max",
            "24",
            "--seed",
            "7",
        ]);
        let manifest = data.join("manifest.json");
        let cfg = dir.path().join("cfg.json");
        std::fs::write(
            &cfg,
            r#"{"t_train":12,"epochs":1,"iters_per_epoch":5,"tau":4.0}"#,
        )
        .unwrap();
        let ckpt = dir.path().join("ckpt.vvsc");
        run_ok(&[
            "train",
            "--manifest",
            manifest.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
        ]);
        let store = dir.path().join("full.vvse");
        run_ok(&[
            "embed",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            store.to_str().unwrap(),
        ]);
        Fixture {
            dir,
            manifest,
            ckpt,
            store,
        }
    })
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_and_embed_emit_expected_json() {
    let f = fixture();
    let embed = run_ok(&[
        "embed",
        "--ckpt",
        arg(&f.ckpt),
        "--manifest",
        arg(&f.manifest),
        "--out",
        arg(&f.dir.path().join("again.vvse")),
    ]);
    assert_eq!(embed["videos"], 24);
    assert_eq!(embed["dim"], 8);
    assert_eq!(embed["modules"]["ddm"], true);
}

#[test]
fn embed_is_byte_idempotent_and_ablation_flags_change_output() {
    let f = fixture();
    let twin = f.dir.path().join("twin.vvse");
    run_ok(&[
        "embed",
        "--ckpt",
        arg(&f.ckpt),
        "--manifest",
        arg(&f.manifest),
        "--out",
        arg(&twin),
    ]);
    assert_eq!(
        std::fs::read(&f.store).unwrap(),
        std::fs::read(&twin).unwrap(),
        "same inputs must reproduce the store byte for byte"
    );

    let base = f.dir.path().join("base.vvse");
    run_ok(&[
        "embed",
        "--ckpt",
        arg(&f.ckpt),
        "--manifest",
        arg(&f.manifest),
        "--out",
        arg(&base),
        "--no-ddm",
        "--no-tsm",
        "--no-tgm",
    ]);
    assert_ne!(
        std::fs::read(&f.store).unwrap(),
        std::fs::read(&base).unwrap()
    );
}

#[test]
fn search_returns_ranked_lists_for_manifest_queries() {
    let f = fixture();
    let lists = run_ok(&[
        "search",
        "--store",
        arg(&f.store),
        "--manifest",
        arg(&f.manifest),
        "--topk",
        "3",
    ]);
    let lists = lists.as_array().expect("array of ranked lists");
    assert_eq!(lists.len(), 4);
    for list in lists {
        let entries = list["entries"].as_array().unwrap();
        assert_eq!(entries.len(), 3);
        let top = entries[0]["score"].as_f64().unwrap();
        let next = entries[1]["score"].as_f64().unwrap();
        assert!(top >= next);
        assert_ne!(list["query_id"], entries[0]["video_id"]);
    }
}

#[test]
fn eval_scores_all_tiers_and_duration_buckets() {
    let f = fixture();
    let report = run_ok(&[
        "eval",
        "--store",
        arg(&f.store),
        "--manifest",
        arg(&f.manifest),
        "--duration-buckets",
        "2",
    ]);
    let maps = report["map"].as_array().unwrap();
    assert_eq!(maps.len(), 3);
    assert_eq!(maps[0]["task"], "DSVR");
    assert_eq!(maps[2]["task"], "ISVR");
    for m in maps {
        let v = m["map"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
        assert_eq!(m["per_query"].as_array().unwrap().len(), 4);
    }
    let buckets = report["duration_buckets"].as_array().unwrap();
    assert_eq!(buckets.len(), 3);
    assert_eq!(buckets[0]["buckets"].as_array().unwrap().len(), 2);
}

#[test]
fn eval_on_a_perfect_store_reports_unit_map() {
    let dir = tempfile::tempdir().unwrap();
    let entry = |id: &str| VideoEntry {
        id: id.into(),
        feature_path: format!("features/{id}.vvsf"),
        duration_frames: 10,
        topic_id: Some(0),
    };
    let manifest = DatasetManifest {
        videos: vec![entry("d1"), entry("d2"), entry("d3"), entry("q")],
        queries: vec!["q".into()],
        relevance: BTreeMap::from([("q".into(), BTreeMap::from([("d1".into(), Tier::Dsvr)]))]),
        distractor_segments: BTreeMap::new(),
    };
    let manifest_path = dir.path().join("manifest.json");
    manifest.save(&manifest_path).unwrap();

    let mut store = EmbeddingStore::new(2).unwrap();
    store.index_add("q", &[1.0, 0.0]).unwrap();
    store.index_add("d1", &[1.0, 0.1]).unwrap();
    store.index_add("d2", &[0.0, 1.0]).unwrap();
    store.index_add("d3", &[-1.0, 0.5]).unwrap();
    let store_path = dir.path().join("perfect.vvse");
    store.save(&store_path).unwrap();

    let report = run_ok(&[
        "eval",
        "--store",
        arg(&store_path),
        "--manifest",
        arg(&manifest_path),
    ]);
    for m in report["map"].as_array().unwrap() {
        assert_eq!(m["map"].as_f64().unwrap(), 1.0, "task {}", m["task"]);
    }
}

#[test]
fn bench_counts_match_corpus_structure() {
    let f = fixture();
    let report = run_ok(&[
        "bench",
        "--ckpt",
        arg(&f.ckpt),
        "--manifest",
        arg(&f.manifest),
        "--store",
        arg(&f.store),
    ]);
    assert_eq!(report["video_level"]["similarity_op_count"], 24);
    assert_eq!(report["video_level"]["stored_feature_count"], 24);
    let (manifest, _) = DatasetManifest::load(&f.manifest).unwrap();
    let total_frames: u64 = manifest
        .videos
        .iter()
        .map(|v| u64::from(v.duration_frames))
        .sum();
    assert_eq!(report["frame_level"]["stored_feature_count"], total_frames);
    assert!(report["speedup"].as_f64().unwrap() > 0.0);
}

#[test]
fn plot_weights_csv_rows_match_kept_frames() {
    let f = fixture();
    let plots = f.dir.path().join("plots");
    let report = run_ok(&[
        "plot-weights",
        "--ckpt",
        arg(&f.ckpt),
        "--manifest",
        arg(&f.manifest),
        "--out",
        arg(&plots),
        "--video",
        "v0000",
    ]);
    assert_eq!(report["written"].as_array().unwrap().len(), 2);

    let (set, pca, pipeline) = load_checkpoint(&f.ckpt).unwrap();
    let (manifest, base) = DatasetManifest::load(&f.manifest).unwrap();
    let raw = vvs::io::read_features(&manifest.feature_path(&base, "v0000").unwrap()).unwrap();
    let x = pca.apply(&raw).unwrap().data;
    let trace = pipeline.embed(&set, &x, PipelineToggles::all()).unwrap();
    let kept = trace.kept.iter().filter(|&&k| k).count();

    let csv = std::fs::read_to_string(plots.join("v0000.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "frame_index,w_di_kept,w_sa,w_gu,W");
    assert_eq!(lines.count(), kept);

    let svg = std::fs::read_to_string(plots.join("v0000.svg")).unwrap();
    assert!(svg.starts_with("<svg "));
    assert_eq!(svg.matches("<polyline").count(), 3);
}

#[test]
fn usage_errors_exit_two_and_runtime_output_stays_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");

    let (code, _, stderr) = run(&["synth", "--out", arg(&out), "--videos", "0"]);
    assert_eq!(code, 2, "invalid config must be a usage error");
    assert!(stderr.contains("videos"));

    let (code, _, _) = run(&[
        "train",
        "--manifest",
        "/no/such/manifest.json",
        "--out",
        arg(&out),
    ]);
    assert_eq!(code, 2, "missing input file must be a usage error");

    let (code, _, _) = run(&["embed", "--bogus-flag"]);
    assert_eq!(code, 2, "unknown flags must be rejected");

    let f = fixture();
    let (code, stdout, _) = run(&["search", "--store", arg(&f.store)]);
    assert_eq!(code, 2, "search without a query source is a usage error");
    assert_eq!(stdout, "", "errors must not pollute stdout");
}

#[test]
fn seed_flag_works_before_and_after_the_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    let flags = [
        "--videos",
        "12",
        "--queries",
        "2",
        "--channels",
        "8",
        "--topics",
        "2",
        "--t-min",
        "12",
    ];
    for (out, pre, post) in [
        (&a, Some("3"), None),
        (&b, None, Some("3")),
        (&c, None, Some("99")),
    ] {
        let mut args: Vec<&str> = Vec::new();
        if let Some(seed) = pre {
            args.extend_from_slice(&["--seed", seed]);
        }
        args.extend_from_slice(&["synth", "--out", arg(out)]);
        args.extend_from_slice(&flags);
        if let Some(seed) = post {
            args.extend_from_slice(&["--seed", seed]);
        }
        run_ok(&args);
    }
    let read = |p: &Path| std::fs::read(p.join("manifest.json")).unwrap();
    assert_eq!(
        read(&a),
        read(&b),
        "flag position must not change the outcome"
    );
    assert_ne!(
        read(&a),
        read(&c),
        "a different seed must change the corpus"
    );
}
