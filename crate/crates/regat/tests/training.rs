use regat::commands::{self, METRICS_FILE};
use regat::config::RunConfig;
use regat::data::write_jsonl;
use regat::synth::{generate, SynthSpec};
use regat_core::graph::RelationKind;

const MAX_UPTICKS: usize = 3;

/// Training-set loss under the default schedule on a small toy set: at most three epochs may
/// go up over fifty.
#[test]
fn toy_overfit_loss_is_nearly_monotone() {
    let dir = tempfile::tempdir().unwrap();
    for kind in RelationKind::ALL {
        let (train, _) = generate(&SynthSpec { seed: 5, train: 32, val: 0, kinds: vec![kind] }).unwrap();
        let data = dir.path().join(format!("{kind}.jsonl"));
        write_jsonl(&data, &train).unwrap();
        let cfg = RunConfig::load(
            None,
            &[
                format!("model.kind=\"{}\"", kind.name()),
                format!("data.train={}", serde_json::to_string(&data).unwrap()),
                "model.dropout=0".into(),
                "model.classifier_dropout=0".into(),
                "train.epochs=50".into(),
                "train.batch_size=8".into(),
            ],
        )
        .unwrap();
        let report = commands::train(&cfg, &dir.path().join(kind.name())).unwrap();
        let losses: Vec<f64> = report.metrics.iter().map(|m| m.loss).collect();
        assert_eq!(losses.len(), 50);
        let upticks = losses.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(upticks <= MAX_UPTICKS, "{kind}: {upticks} upticks in {losses:?}");
        assert!(losses[49] < losses[0], "{kind}");
        let csv = std::fs::read_to_string(dir.path().join(kind.name()).join(METRICS_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 51);
    }
}

#[test]
fn eval_uses_answers_seen_in_training_only() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = generate(&SynthSpec { seed: 6, train: 12, val: 12, kinds: vec![RelationKind::Semantic] }).unwrap();
    let data = dir.path().join("t.jsonl");
    write_jsonl(&data, &train).unwrap();
    let cfg = RunConfig::load(
        None,
        &[
            "model.kind=\"semantic\"".into(),
            format!("data.train={}", serde_json::to_string(&data).unwrap()),
            "train.epochs=2".into(),
        ],
    )
    .unwrap();
    let run = dir.path().join("run");
    commands::train(&cfg, &run).unwrap();
    let m = commands::load_model(&run.join(commands::CHECKPOINT_FILE)).unwrap();
    let report = commands::evaluate(std::slice::from_ref(&m), &val, commands::Weighting::Fixed(0.4, 0.3)).unwrap();
    assert_eq!(report.predictions.len(), val.len());
    assert!((0.0..=1.0).contains(&report.accuracy));
    for p in &report.predictions {
        assert!(m.vocab.answers.contains(&p.answer));
        assert_eq!(p.probs_topk.len(), commands::TOP_K.min(m.vocab.answers.len()));
    }
}
