use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn morphidx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morphidx")).args(args).output().expect("spawn")
}

fn ok(args: &[&str]) -> String {
    let out = morphidx(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_build_validate_search() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.bin");
    let idx = dir.path().join("idx.bin");
    ok(&["generate", "--subjects", "64", "--dim", "16", "--seed", "3", "--out", s(&g)]);
    ok(&["build-index", "--gallery", s(&g), "--method", "similarity", "--capacity", "4", "--out", s(&idx)]);
    let v: serde_json::Value = serde_json::from_str(&ok(&["validate-index", "--index", s(&idx), "--gallery", s(&g)])).unwrap();
    assert_eq!(v["passed"], true);

    let out = ok(&["search", "--gallery", s(&g), "--index", s(&idx), "--probe-id", "0", "--ks", "2,3", "--trace"]);
    let lines: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4, "two morph stages, the reference stage and the result");
    let result = &lines[3];
    assert_eq!(result["total_comparisons"], 16 + 2 * 2 + 2 * 3);
    let traced: u64 = lines[..3].iter().map(|l| l["compared"].as_array().unwrap().len() as u64).sum();
    assert_eq!(result["total_comparisons"].as_u64().unwrap(), traced);

    let out = ok(&["search", "--gallery", s(&g), "--index", s(&idx), "--probe-id", "1", "--k", "5"]);
    let r: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(r["total_comparisons"], 16 + 5 * 4);
}

#[test]
fn pair_writes_groups() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.csv");
    let groups = dir.path().join("groups.csv");
    ok(&["generate", "--subjects", "32", "--dim", "8", "--out", s(&g)]);
    ok(&["pair", "--gallery", s(&g), "--method", "softbio", "--capacity", "2", "--out", s(&groups)]);
    let text = fs::read_to_string(&groups).unwrap();
    assert_eq!(text.lines().next(), Some("group_id,capacity,member_ids"));
    assert_eq!(text.lines().count(), 1 + 16);
}

#[test]
fn errors_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.bin");
    let idx = dir.path().join("idx.bin");
    ok(&["generate", "--subjects", "32", "--dim", "8", "--out", s(&g)]);
    ok(&["build-index", "--gallery", s(&g), "--capacity", "2", "--out", s(&idx)]);
    let out = morphidx(&["search", "--gallery", s(&g), "--index", s(&idx), "--probe-id", "0", "--k", "99"]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "invalid_input");

    let other = dir.path().join("other.bin");
    ok(&["generate", "--subjects", "32", "--dim", "8", "--seed", "9", "--out", s(&other)]);
    let out = morphidx(&["search", "--gallery", s(&other), "--index", s(&idx), "--probe-id", "0", "--k", "1"]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["message"].as_str().unwrap().contains("gallery"), "{err}");
}

#[test]
fn sweep_is_deterministic_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.toml");
    fs::write(
        &cfg,
        r#"
        seed = 2
        folds = 3
        mode = "two-stage"
        capacities = [2, 4]
        pairings = ["random", "softbio", "similarity"]
        open_set_thresholds = [0.8]
        [gallery.synthetic]
        n_subjects = 128
        dimension = 32
        [shortlists]
        2 = [1, 4, 16]
        4 = [1, 8]
        "#,
    )
    .unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["sweep", "--config", s(&cfg), "--threads", "1", "--out", s(&a)]);
    ok(&["sweep", "--config", s(&cfg), "--threads", "3", "--out", s(&b)]);
    let report = fs::read(a.join("report.csv")).unwrap();
    assert_eq!(report, fs::read(b.join("report.csv")).unwrap());
    assert_eq!(String::from_utf8(report).unwrap().lines().count(), 1 + 3 * 3 + 3 * 2);
    for f in ["folds.csv", "summary.json", "cmc_n2_similarity.csv", "det_n4_random.csv", "cmc_baseline.csv"] {
        assert!(a.join(f).exists(), "{f} missing");
    }
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["baseline"]["workload_pct"]["mean"], 100.0);
}

#[test]
fn baseline_and_balance_and_decision_space() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("b.toml");
    fs::write(
        &cfg,
        "mode = \"two-stage\"\ncapacities = [2]\npairings = [\"similarity\"]\noutput_dir = \"out\"\n\
         [gallery.synthetic]\nn_subjects = 64\ndimension = 16\n[shortlists]\n2 = [1]\n",
    )
    .unwrap();
    let row: serde_json::Value = serde_json::from_str(ok(&["baseline", "--config", s(&cfg)]).trim()).unwrap();
    assert_eq!(row["hit_rate"]["mean"], 1.0);
    assert!(dir.path().join("out/baseline.csv").exists());

    let g = dir.path().join("g.bin");
    ok(&["generate", "--subjects", "128", "--dim", "32", "--out", s(&g)]);
    let bal: serde_json::Value = serde_json::from_str(ok(&["balance-check", "--gallery", s(&g)]).trim()).unwrap();
    assert!(bal["wasserstein"].as_f64().unwrap() >= 0.0);

    let ds = dir.path().join("ds.csv");
    ok(&["decision-space", "--capacities", "2", "--steps", "10", "--out", s(&ds)]);
    let text = fs::read_to_string(&ds).unwrap();
    let last = text.lines().last().unwrap();
    assert!(last.ends_with(",1.500000"), "{last}");
    assert!(text.lines().nth(1).unwrap().ends_with(",0.500000"));
}
