use std::path::Path;
use std::process::{Command, Output};

fn gvt2rpm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gvt2rpm")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(out: &Path, dims: &str, subjects: &str, clips: &str) -> Output {
    gvt2rpm(&["gen", "--preset", "simple", "--subjects", subjects, "--clips-per-subject", clips, "--dims", dims, "--fps", "30", "--seed", "0", "--out", p(out)])
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "clips", "traces"] {
        let d = dir.join(sub);
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_file() {
                out.push((format!("{sub}/{}", path.file_name().unwrap().to_string_lossy()), std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_writes_the_dataset_and_repeats_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(gen(&a, "120x64x64", "4", "4").status.success());
    assert!(gen(&b, "120x64x64", "4", "4").status.success());
    let fa = files(&a);
    assert_eq!(fa.iter().filter(|(n, _)| n.ends_with(".gvtc")).count(), 16);
    assert_eq!(fa.iter().filter(|(n, _)| n.ends_with(".gvts")).count(), 16);
    assert!(fa.iter().any(|(n, _)| n == "/manifest.json"));
    assert_eq!(fa, files(&b));
}

#[test]
fn perfect_stub_eval_echoes_the_general_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let run = tmp.path().join("run");
    assert!(gen(&data, "120x64x64", "2", "2").status.success());
    let out = gvt2rpm(&["eval", "--run", p(&run), "--data", p(&data), "--stub", "perfect"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let config = std::fs::read_to_string(run.join("config.json")).unwrap();
    assert!(config.contains(r#""scaling":"Scale-2""#), "{config}");
    assert!(config.contains(r#""input_dims":[120,64,64]"#), "{config}");
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["mae"].as_f64().unwrap() <= 1e-9);
    assert_eq!(metrics["excluded_windows"], 0);
    let pairs = std::fs::read_to_string(run.join("pairs.csv")).unwrap();
    assert!(pairs.starts_with("clip_id,pred_bpm,label_bpm\n"));
    assert_eq!(pairs.lines().count(), 5);
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gen(&tmp.path().join("x"), "0x64x64", "1", "1");
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(gvt2rpm(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(gvt2rpm(&["--help"]).status.code(), Some(0));
}

#[test]
fn malformed_config_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    assert!(gen(&data, "60x8x8", "3", "1").status.success());
    for (json, key) in [(r#"{"learning_rate": "fast"}"#, "learning_rate"), (r#"{"heads": 2}"#, "heads")] {
        let cfg = tmp.path().join("cfg.json");
        std::fs::write(&cfg, json).unwrap();
        let out = gvt2rpm(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&tmp.path().join("r"))]);
        assert_eq!(out.status.code(), Some(1));
        assert!(String::from_utf8_lossy(&out.stderr).contains(key));
    }
}

#[test]
fn missing_or_unwritable_paths_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gvt2rpm(&["train", "--data", p(&tmp.path().join("none")), "--out", p(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, b"").unwrap();
    let out = gen(&blocker.join("sub"), "60x8x8", "1", "1");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("file/sub"));
}

#[test]
fn train_then_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"input_dims": [60, 8, 8], "scaling": "Scale-0", "base_width": 4, "stage_depths": [1, 1, 1, 1],
            "epochs": 2, "batch_size": 2, "split": {"KFold": 3}, "test_fold": 1}"#,
    )
    .unwrap();
    assert!(gen(&data, "60x8x8", "3", "2").status.success());
    let out = gvt2rpm(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.json", "history.csv", "pairs.csv", "metrics.json", "model.gvtm"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    let out = gvt2rpm(&["eval", "--run", p(&run), "--data", p(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(run.join("pairs.csv")).unwrap().lines().count(), 7);
}

#[test]
fn search_writes_a_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"base_width": 4, "stage_depths": [1, 1, 1, 1], "heads_per_stage": [1, 1, 1, 1], "epochs": 1,
            "max_steps": 1, "split": {"KFold": 3}, "search_max_tokens": 3840}"#,
    )
    .unwrap();
    assert!(gen(&data, "120x32x32", "3", "1").status.success());
    let out = gvt2rpm(&["search", "--data", p(&data), "--config", p(&cfg), "--out", p(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = std::fs::read_to_string(run.join("search_trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines[0], "phase,candidate,mae,selected");
    assert_eq!(lines.len(), 25);
    assert_eq!(trace.matches(",true").count(), 6);
    // only the 32×32 spatial candidate fits the token cap
    assert!(lines.contains(&"spatial,120x256x256,inf,false"));
    assert!(lines.iter().any(|l| l.starts_with("spatial,120x32x32,") && l.ends_with(",true")));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("evaluator calls"));
    assert!(run.join("best_config.json").is_file());
}

#[test]
fn gradcheck_passes_and_prints_a_table() {
    let out = gvt2rpm(&["gradcheck", "--seeds", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.lines().next().unwrap().starts_with("check"));
    assert!(table.contains("conv3d"));
    assert!(table.contains("model (tiny, end-to-end)"));
    assert!(!table.contains("FAIL"));
}

#[test]
fn invalid_thread_count_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_gvt2rpm")).env("GVT2RPM_THREADS", "many").args(["gradcheck"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}
