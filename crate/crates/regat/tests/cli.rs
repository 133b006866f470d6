use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use regat::config::RunConfig;
use regat_core::graph::RelationKind;
use regat_core::model::init_params;

fn regat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regat")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy_scene.json")
}

#[test]
fn help_lists_every_flag() {
    let cases: [(&str, &[&str]); 6] = [
        ("extract-graph", &["--kind", "--far-threshold", "--out"]),
        ("generate", &["--seed", "--n", "--n-val", "--kinds", "--out-dir"]),
        ("train", &["--config", "--set", "--kind", "--train", "--val", "--seed", "--epochs", "--out-dir"]),
        ("eval", &["--checkpoint", "--data", "--alpha", "--beta", "--grid", "--predictions"]),
        ("gradcheck", &["--config", "--set", "--regions", "--answers", "--vocab"]),
        ("dump-attention", &["--checkpoint", "--data", "--question-id", "--out"]),
    ];
    let top = regat(&["--help"]);
    assert!(top.status.success());
    for (cmd, flags) in cases {
        assert!(stdout(&top).contains(cmd), "{cmd}");
        let o = regat(&[cmd, "--help"]);
        assert!(o.status.success(), "{cmd}");
        for f in flags {
            assert!(stdout(&o).contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn extract_graph_writes_the_same_dump_to_file_and_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.json");
    let printed = regat(&["extract-graph", s(&fixture()), "--kind", "spatial"]);
    assert!(printed.status.success(), "{}", stderr(&printed));
    let written = regat(&["extract-graph", s(&fixture()), "--kind", "spatial", "--out", s(&out)]);
    assert!(written.status.success());
    assert_eq!(std::fs::read_to_string(&out).unwrap(), stdout(&printed));
    let v: serde_json::Value = serde_json::from_str(&stdout(&printed)).unwrap();
    assert_eq!(v["K"], 4);
    assert_eq!(v["edges"].as_array().unwrap().len(), 10);
}

#[test]
fn invalid_inputs_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"boxes": [[0, 0, -3, 4]]}"#).unwrap();
    let o = regat(&["extract-graph", s(&bad), "--kind", "implicit"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let data = dir.path().join("d.jsonl");
    std::fs::write(&data, "{\"question_id\": \"q\"}\nnot json\n").unwrap();
    let o = regat(&["train", "--train", s(&data), "--out-dir", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));

    let o = regat(&["gradcheck", "--set", "model.d_hh=8"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.d_hh"), "{}", stderr(&o));

    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"train": {"epochz": 3}}"#).unwrap();
    let o = regat(&["gradcheck", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epochz"), "{}", stderr(&o));

    let o = regat(&["gradcheck", "--set", "model.heads=3"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn gradcheck_reports_every_parameter_and_catches_a_broken_rule() {
    let o = regat(&["gradcheck"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    for kind in RelationKind::ALL {
        assert!(text.contains(&format!("{kind}: max_rel_err")), "{text}");
    }
    for kind in RelationKind::ALL {
        let cfg = RunConfig::default().model_config(kind, 12, 8).unwrap();
        for (name, _) in init_params(&cfg, 0).unwrap().iter() {
            assert!(text.contains(&format!("  {name} ")), "{name} missing from\n{text}");
        }
    }

    let o = regat(&["gradcheck", "--fault", "matmul"]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stderr(&o).contains("gradient check failed"));
    let o = regat(&["gradcheck", "--fault", "no_such_op"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn generate_train_eval_dump_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let o = regat(&["generate", "--seed", "2", "--n", "48", "--n-val", "24", "--out-dir", s(&p("data"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (train, val) = (p("data/train.jsonl"), p("data/val.jsonl"));

    let mut checkpoints = Vec::new();
    for kind in RelationKind::ALL {
        let run = p(&format!("run-{kind}"));
        let o = regat(&[
            "train", "--kind", kind.name(), "--train", s(&train), "--val", s(&val), "--epochs", "3", "--set", "train.batch_size=8",
            "--out-dir", s(&run),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().next(), Some("epoch,loss,train_acc,val_acc,lr"));
        assert_eq!(metrics.lines().count(), 4);
        checkpoints.push(run.join("checkpoint.json"));
    }

    let one = |pred: &Path| regat(&["eval", "--checkpoint", s(&checkpoints[0]), "--data", s(&val), "--predictions", s(pred)]);
    let (a, b) = (one(&p("pa.jsonl")), one(&p("pb.jsonl")));
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(std::fs::read(p("pa.jsonl")).unwrap(), std::fs::read(p("pb.jsonl")).unwrap());
    let first: serde_json::Value = serde_json::from_str(std::fs::read_to_string(p("pa.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert!(first["question_id"].is_string() && first["answer"].is_string() && first["probs_topk"].is_array());

    let all: Vec<&str> = checkpoints.iter().flat_map(|c| ["--checkpoint", s(c)]).collect();
    let mut args = vec!["eval"];
    args.extend(&all);
    args.extend(["--data", s(&val), "--grid", "0.25"]);
    let o = regat(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("ensemble alpha="), "{}", stdout(&o));

    let o = regat(&["eval", "--checkpoint", s(&checkpoints[0]), "--checkpoint", s(&checkpoints[1]), "--data", s(&val)]);
    assert_eq!(o.status.code(), Some(2));

    let o = regat(&["dump-attention", "--checkpoint", s(&checkpoints[1]), "--data", s(&val), "--question-id", "val-spatial-00001a"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dump: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(dump["kind"], "spatial");
    for head in dump["relation"].as_array().unwrap() {
        for row in head.as_array().unwrap() {
            let sum: f64 = row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-10);
        }
    }
    let o = regat(&["dump-attention", "--checkpoint", s(&checkpoints[1]), "--data", s(&val), "--question-id", "missing"]);
    assert_eq!(o.status.code(), Some(2));
}
