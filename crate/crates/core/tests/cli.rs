use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lcp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcp")).args(args).output().expect("spawn lcp")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_writes_loadable_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = lcp(&["gen-data", "--count", "5", "--seed", "0", "--out", s(d)]);
        assert_eq!(code(&o), 0, "{}", text(&o));
    }
    let ds = lcp::data::Dataset::load(&a).unwrap();
    assert_eq!(ds.len(), 5);
    for f in ["images.lcpt", "annotations.jsonl", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let o = lcp(&["gen-data", "--count", "5"]);
    assert_eq!(code(&o), 2);
    assert!(text(&o).contains("--out") && text(&o).contains("Usage"), "{}", text(&o));
    assert_eq!(code(&lcp(&["gen-data", "--bogus"])), 2);
    assert_eq!(code(&lcp(&["frobnicate"])), 2);
    assert_eq!(code(&lcp(&["eval", "--model", "/nonexistent/m.lcpm", "--data", "/nonexistent"])), 2);
    assert_eq!(code(&lcp(&["prune", "--alpha", "1", "--baseline"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "colour = red\n").unwrap();
    assert_eq!(code(&lcp(&["--config", s(&cfg), "gen-data", "--out", s(dir.path())])), 2);
}

#[test]
fn corrupt_dataset_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert_eq!(code(&lcp(&["gen-data", "--count", "2", "--out", s(&data)])), 0);
    fs::write(data.join("images.lcpt"), b"LCPX").unwrap();
    let o = lcp(&["train", "--data", s(&data), "--epochs", "1", "--out", s(&dir.path().join("m.lcpm"))]);
    assert_eq!(code(&o), 1, "{}", text(&o));
    assert!(text(&o).contains("byte 0"), "{}", text(&o));
}

#[test]
fn train_prune_eval_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    assert_eq!(code(&lcp(&["gen-data", "--count", "4", "--seed", "1", "--out", s(&p("data"))])), 0);
    let o = lcp(&["train", "--data", s(&p("data")), "--epochs", "1", "--out", s(&p("m.lcpm"))]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("epochs = 1"));

    fs::write(
        p("prune.cfg"),
        "epochs_per_layer = 0\nscoring_batches = 1\nscoring_batch_size = 2\nseed = 5\n",
    )
    .unwrap();
    let (cfg, model, data) = (p("prune.cfg"), p("m.lcpm"), p("data"));
    let prune = |out: &str, extra: &[&str]| {
        let mut args = vec!["--config", s(&cfg), "prune", "--model", s(&model)];
        args.extend(["--data", s(&data), "--eta", "0.5", "--m", "50", "--seed", "13"]);
        args.extend(["--out", out]);
        args.extend(extra);
        lcp(&args)
    };
    let o = prune(s(&p("lcp")), &["--alpha", "1.0"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("seed = 13") && text(&o).contains("epochs_per_layer = 0"));

    let pruned = lcp::detector::load_checkpoint(&p("lcp").join("pruned.lcpm"), &Default::default()).unwrap();
    for (l, c) in [16, 32, 32, 64, 64, 64].into_iter().enumerate() {
        assert_eq!(pruned.stage_mask(l).unwrap().unwrap().len(), c / 2);
    }
    let report = fs::read_to_string(p("lcp").join("report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 7);
    assert!(report.lines().next().unwrap().contains("\"mode\":\"lcp\""));

    let o = lcp(&["report-gradients", "--input", s(&p("lcp"))]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let rows: Vec<Vec<f64>> = String::from_utf8_lossy(&o.stdout)
        .lines()
        .filter_map(|l| {
            let v: Vec<f64> = l.split_whitespace().filter_map(|t| t.parse().ok()).collect();
            (v.len() == 4).then_some(v)
        })
        .collect();
    assert_eq!(rows.len(), 6);
    for r in rows {
        assert!(r[1..].iter().all(|&v| v >= 0.0));
        assert!((r[1] + r[2] + r[3] - 100.0).abs() <= 0.1, "{r:?}");
    }

    let o = prune(s(&p("base")), &["--baseline"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let report = fs::read_to_string(p("base").join("report.jsonl")).unwrap();
    assert!(report.lines().next().unwrap().contains("\"mode\":\"baseline\""));

    // The echoed config alone reproduces the run bit for bit.
    let o = lcp(&["--config", s(&p("lcp").join("config.txt")), "prune", "--out", s(&p("again"))]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    for f in ["pruned.lcpm", "report.jsonl", "ledger.json"] {
        assert_eq!(fs::read(p("lcp").join(f)).unwrap(), fs::read(p("again").join(f)).unwrap(), "{f}");
    }

    let o = lcp(&["eval", "--model", s(&p("lcp").join("pruned.lcpm")), "--data", s(&p("data"))]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("AP@[.5:.95]") && text(&o).contains("\"record\":\"eval\""));
}
