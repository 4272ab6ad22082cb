use std::collections::{BTreeMap, HashMap};
use std::ffi::OsStr;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use icbench_core::dataset::Dimension;
use icbench_core::subjective::{MosEntry, RatingRecord, ScreeningReport};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn icbench<S: AsRef<OsStr> + std::fmt::Debug>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icbench"))
        .args(args)
        .env_remove("ICBENCH_SERVER")
        .env_remove("ICBENCH_CONFIG")
        .output()
        .unwrap()
}

fn ok<S: AsRef<OsStr> + std::fmt::Debug>(args: &[S]) -> String {
    let out = icbench(args);
    assert!(
        out.status.success(),
        "icbench {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails<S: AsRef<OsStr> + std::fmt::Debug>(args: &[S], code: i32) -> String {
    let out = icbench(args);
    assert_eq!(out.status.code(), Some(code), "icbench {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_jsonl<T: serde::de::DeserializeOwned>(p: &Path) -> Vec<T> {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Straight-line MOS: group outliers, per-subject screening, z-scores, rescale.
fn oracle(ratings: &[RatingRecord]) -> BTreeMap<(String, Dimension), f64> {
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let c = |p: i32| v.iter().map(|x| (x - m).powi(p)).sum::<f64>() / n;
        (m, c(2), c(4))
    };
    let mut by_item: HashMap<(&str, Dimension), Vec<usize>> = HashMap::new();
    for (i, r) in ratings.iter().enumerate() {
        by_item.entry((&r.caption_id, r.dimension)).or_default().push(i);
    }
    let mut out = vec![false; ratings.len()];
    for idx in by_item.values().filter(|v| v.len() > 1) {
        let v: Vec<f64> = idx.iter().map(|&i| ratings[i].score).collect();
        let (m, m2, m4) = stats(&v);
        let b2 = if m2 > 0.0 { m4 / (m2 * m2) } else { 0.0 };
        let k = if (2.0..=4.0).contains(&b2) { 2.0 } else { 20f64.sqrt() };
        for &i in idx {
            out[i] = (ratings[i].score - m).abs() > k * m2.sqrt();
        }
    }
    let mut by_subj: HashMap<(&str, Dimension), Vec<usize>> = HashMap::new();
    for (i, r) in ratings.iter().enumerate() {
        by_subj.entry((&r.subject_id, r.dimension)).or_default().push(i);
    }
    let mut z: BTreeMap<(String, Dimension), Vec<f64>> = BTreeMap::new();
    for idx in by_subj.values() {
        let kept: Vec<f64> = idx.iter().filter(|&&i| !out[i]).map(|&i| ratings[i].score).collect();
        let n_out = idx.len() - kept.len();
        if kept.is_empty() || n_out * 20 > idx.len() {
            continue;
        }
        let (m, m2, _) = stats(&kept);
        if m2.sqrt() < 1e-6 {
            continue;
        }
        for &i in idx.iter().filter(|&&i| !out[i]) {
            let r = &ratings[i];
            z.entry((r.caption_id.clone(), r.dimension))
                .or_default()
                .push((r.score - m) / m2.sqrt());
        }
    }
    z.into_iter()
        .map(|(k, v)| {
            let zbar = v.iter().sum::<f64>() / v.len() as f64;
            (k, (100.0 * (zbar + 3.0) / 6.0).clamp(0.0, 100.0))
        })
        .collect()
}

#[test]
fn mos_matches_golden_file_and_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mos.jsonl");
    ok(&["mos", "--ratings", s(&fixtures().join("ratings.jsonl")), "--out", s(&out)]);
    let golden = std::fs::read(fixtures().join("mos.golden.jsonl")).unwrap();
    assert!(std::fs::read(&out).unwrap() == golden, "mos.jsonl differs from the golden file");

    let ratings: Vec<RatingRecord> = read_jsonl(&fixtures().join("ratings.jsonl"));
    let want = oracle(&ratings);
    let got: Vec<MosEntry> = read_jsonl(&out);
    assert_eq!(got.len(), want.len());
    for e in &got {
        let w = want[&(e.caption_id.clone(), e.dimension)];
        assert!((e.mos - w).abs() < 1e-9, "{} {}: {} vs {w}", e.caption_id, e.dimension, e.mos);
    }
    assert!(dir.path().join("mos.jsonl.screening.json").is_file());
}

#[test]
fn planted_bad_rater_is_screened_out() {
    let dir = tempfile::tempdir().unwrap();
    let screening = dir.path().join("screening.json");
    ok(&[
        "mos",
        "--ratings",
        s(&fixtures().join("ratings.jsonl")),
        "--out",
        s(&dir.path().join("mos.jsonl")),
        "--screening",
        s(&screening),
    ]);
    let report: ScreeningReport = serde_json::from_str(&std::fs::read_to_string(&screening).unwrap()).unwrap();
    let rate = |pred: &dyn Fn(&str) -> bool| {
        let (out, n) = report
            .subjects
            .iter()
            .filter(|s| pred(&s.subject_id))
            .fold((0, 0), |(o, n), s| (o + s.n_outliers, n + s.n_ratings));
        out as f64 / n as f64
    };
    let bad = rate(&|id| id.starts_with("bad-"));
    let clean = rate(&|id| !id.starts_with("bad-"));
    assert!(bad > 5.0 * clean, "bad {bad:.3} vs clean {clean:.3}");
    let bad_excluded = report.subjects.iter().filter(|s| s.subject_id == "bad-00" && s.excluded).count();
    assert!(bad_excluded >= 3, "bad-00 excluded in {bad_excluded} dimensions");
}

#[test]
fn empty_ratings_fail_validation() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let err = fails(&["mos", "--ratings", s(&empty), "--out", s(&dir.path().join("m.jsonl"))], 2);
    assert!(err.contains("no ratings"), "{err}");
    assert!(!dir.path().join("m.jsonl").exists());
}

#[test]
fn missing_inputs_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("absent.itih");
    let err = fails(
        &[
            "score",
            "--captions",
            s(&fixtures().join("captions.jsonl")),
            "--images-root",
            s(dir.path()),
            "--checkpoint",
            s(&ckpt),
            "--out",
            s(&dir.path().join("scores.jsonl")),
        ],
        2,
    );
    assert!(err.contains("absent.itih"), "{err}");

    let err = fails(&["ingest", "--captions", s(&dir.path().join("nope.jsonl"))], 2);
    assert!(err.contains("nope.jsonl"), "{err}");
    fails(&["split", "--captions", s(&fixtures().join("captions.jsonl")), "--out", "x", "--ratios", "4:1"], 2);
    fails(&["--mode", "sideways", "ingest", "--captions", "x"], 2);
}

#[test]
fn unreachable_server_is_a_transport_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails(
        &[
            "--server",
            "http://127.0.0.1:9",
            "mos",
            "--ratings",
            s(&fixtures().join("ratings.jsonl")),
            "--out",
            s(&dir.path().join("m.jsonl")),
        ],
        3,
    );
    assert!(err.contains("127.0.0.1:9"), "{err}");
}

#[test]
fn ingest_round_trips_canonical_captions() {
    let captions = fixtures().join("captions.jsonl");
    let text = ok(&["ingest", "--captions", s(&captions)]);
    assert_eq!(text, std::fs::read_to_string(&captions).unwrap());
}

#[test]
fn mock_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    let config = d("bench.json");
    std::fs::write(
        &config,
        r#"{"gateway": {"feature_dim": 16}, "train": {"epochs": 3, "h1": 16, "h2": 8}}"#,
    )
    .unwrap();
    let cache = d("cache");
    let g = ["--config", s(&config), "--seed", "5", "--cache-dir", s(&cache), "--mode", "mock"];
    let with = |rest: &[&str]| -> Vec<String> { g.iter().chain(rest).map(|a| a.to_string()).collect() };

    ok(&with(&["synth", "--out-dir", s(&d("corpus")), "--images", "4", "--models", "3"]));
    let captions = d("corpus/captions.jsonl");
    ok(&with(&[
        "mos",
        "--ratings",
        s(&d("corpus/ratings.jsonl")),
        "--out",
        s(&d("mos.jsonl")),
        "--captions",
        s(&captions),
        "--histogram",
        s(&d("hist.csv")),
        "--by-category",
        s(&d("cat.csv")),
    ]));
    assert!(std::fs::read_to_string(d("hist.csv")).unwrap().starts_with("length_class,dimension,bin_lo"));
    assert!(std::fs::read_to_string(d("cat.csv")).unwrap().lines().count() > 1);

    ok(&with(&["split", "--captions", s(&captions), "--out", s(&d("splits.jsonl"))]));
    assert_eq!(std::fs::read_to_string(d("splits.jsonl")).unwrap().lines().count(), 24);

    ok(&with(&["reconstruct", "--captions", s(&captions), "--out-dir", s(&d("recon"))]));
    ok(&with(&[
        "extract",
        "--captions",
        s(&captions),
        "--images-root",
        s(&d("corpus/images")),
        "--recon-dir",
        s(&d("recon")),
        "--out",
        s(&d("features.jsonl")),
    ]));
    assert!(std::fs::read_to_string(d("features.jsonl")).unwrap().lines().count() >= 24);

    let train_args = with(&[
        "train",
        "--captions",
        s(&captions),
        "--mos",
        s(&d("mos.jsonl")),
        "--images-root",
        s(&d("corpus/images")),
        "--out-dir",
        s(&d("run")),
    ]);
    ok(&train_args);
    let ckpt_dir = std::fs::read_dir(d("run")).unwrap();
    let ckpt = ckpt_dir
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "itih"))
        .expect("checkpoint written");
    let first = std::fs::read(&ckpt).unwrap();
    ok(&train_args);
    assert!(std::fs::read(&ckpt).unwrap() == first, "retraining with the same seed changed the checkpoint");

    ok(&with(&[
        "score",
        "--captions",
        s(&captions),
        "--images-root",
        s(&d("corpus/images")),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&d("scores.jsonl")),
    ]));
    assert_eq!(std::fs::read_to_string(d("scores.jsonl")).unwrap().lines().count(), 72);

    let identity = ok(&with(&[
        "report",
        "--scores",
        s(&d("mos.jsonl")),
        "--mos",
        s(&d("mos.jsonl")),
        "--csv",
        s(&d("identity.csv")),
    ]));
    assert!(identity.contains("overall (pooled)"), "{identity}");
    let csv = std::fs::read_to_string(d("identity.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with("100.00,100.00,100.00")), "{csv}");

    ok(&with(&["report", "--scores", s(&d("scores.jsonl")), "--mos", s(&d("mos.jsonl")), "--json", s(&d("r.json"))]));
    assert!(std::fs::read_to_string(d("r.json")).unwrap().contains("overall_pooled"));

    let board = ok(&with(&[
        "leaderboard",
        "--captions",
        s(&captions),
        "--mos",
        s(&d("mos.jsonl")),
        "--scores",
        s(&d("scores.jsonl")),
        "--subset",
        "short",
        "--csv",
        s(&d("board.csv")),
    ]));
    assert!(board.contains("SRCC to human"), "{board}");
    assert!(std::fs::read_to_string(d("board.csv")).unwrap().contains("model-02"));
}

#[tokio::test(flavor = "multi_thread")]
async fn server_flag_delegates_to_the_service() {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(icbench_service::serve(listener, icbench_service::AppState::default()));

    let dir = tempfile::tempdir().unwrap();
    let (local, remote) = (dir.path().join("local.jsonl"), dir.path().join("remote.jsonl"));
    let ratings = fixtures().join("ratings.jsonl");
    let captions = fixtures().join("captions.jsonl");
    let run = |args: Vec<String>| tokio::task::spawn_blocking(move || icbench(&args));

    let out = run(vec!["mos".into(), "--ratings".into(), s(&ratings).into(), "--out".into(), s(&local).into()])
        .await
        .unwrap();
    assert!(out.status.success());
    let out = run(vec![
        "--server".into(),
        url.clone(),
        "mos".into(),
        "--ratings".into(),
        s(&ratings).into(),
        "--out".into(),
        s(&remote).into(),
    ])
    .await
    .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read(&local).unwrap(), std::fs::read(&remote).unwrap());

    let board = |server: Option<String>| {
        let mut a: Vec<String> = server.into_iter().flat_map(|u| ["--server".into(), u]).collect();
        a.extend(["leaderboard", "--captions", s(&captions), "--mos", s(&local)].map(String::from));
        run(a)
    };
    let (l, r) = (board(None).await.unwrap(), board(Some(url.clone())).await.unwrap());
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(l.stdout, r.stdout);

    // The service reports validation failures with exit code 2, like the local path.
    let out = run(vec![
        "--server".into(),
        url,
        "leaderboard".into(),
        "--captions".into(),
        s(&captions).into(),
    ])
    .await
    .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[tokio::test(flavor = "multi_thread")]
async fn serve_runs_the_annotation_study() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("journal.jsonl");
    let mut child = Command::new(env!("CARGO_BIN_EXE_icbench"))
        .args([
            "serve",
            "--addr",
            "127.0.0.1:0",
            "--captions",
            s(&fixtures().join("captions.jsonl")),
            "--journal",
            s(&journal),
            "--mock-models",
        ])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("listening on ").unwrap_or_else(|| panic!("{line:?}")).to_string();

    let result = async {
        let c = icbench_client::Client::new(&url).unwrap();
        c.health().await.unwrap();
        let sess = c.create_session("ann-1").await.unwrap();
        c.qualify(&sess.session_id, vec![]).await.unwrap();
        let task = c.next_task(&sess.session_id).await.unwrap().unwrap();
        c.submit(&icbench_core::api::RatingSubmission {
            session_id: sess.session_id.clone(),
            task_id: task.task_id.clone(),
            dimension: task.dimensions[0],
            score: 4.0,
        })
        .await
        .unwrap();
        let export = c.export().await.unwrap();
        assert_eq!(export.len(), 1);
        assert_eq!(c.progress().await.unwrap().total_ratings, 1);
    }
    .await;
    child.kill().unwrap();
    child.wait().unwrap();
    let () = result;
    assert_eq!(std::fs::read_to_string(&journal).unwrap().lines().filter(|l| l.contains("\"rating\"")).count(), 1);
}
