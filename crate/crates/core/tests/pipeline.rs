use std::collections::BTreeMap;

use regat_core::config::ModelConfig;
use regat_core::geometry::BBox;
use regat_core::graph::{RegionSet, RelationKind, SemanticTriple};
use regat_core::model::{answer_distribution, forward, init_params, Sample};
use regat_core::nn::Ctx;
use regat_core::optim::LrSchedule;
use regat_core::train::{TrainConfig, Trainer};
use regat_core::Tensor;

const D_V: usize = 8;

fn regions(perm: &[usize]) -> RegionSet {
    let boxes = [[10., 10., 40., 30.], [20., 15., 10., 10.], [90., 12., 30., 30.], [15., 70., 25., 20.], [300., 300., 5., 5.]];
    let feats: Vec<f64> = perm.iter().flat_map(|&i| (0..D_V).map(move |c| ((i * 7 + c * 3) % 11) as f64 / 5.0 - 1.0)).collect();
    let b = perm.iter().map(|&i| BBox::new(boxes[i][0], boxes[i][1], boxes[i][2], boxes[i][3]).unwrap()).collect();
    RegionSet::new(Tensor::matrix(perm.len(), D_V, feats).unwrap(), b).unwrap()
}

fn triples(perm: &[usize]) -> Vec<SemanticTriple> {
    let pos = |orig: usize| perm.iter().position(|&p| p == orig).unwrap();
    [(0, 3, 1), (2, 1, 0), (3, 13, 2)]
        .into_iter()
        .map(|(s, p, o)| SemanticTriple { subject: pos(s), predicate: p, object: pos(o) })
        .collect()
}

fn sample(cfg: &ModelConfig, perm: &[usize], tokens: &[usize], answer: usize) -> Sample {
    Sample::new(cfg, "q".into(), tokens, regions(perm), &triples(perm), BTreeMap::from([(answer, 10)])).unwrap()
}

#[test]
fn region_order_does_not_change_the_answer() {
    let perm = [3, 0, 4, 2, 1];
    for kind in RelationKind::ALL {
        let mut cfg = ModelConfig::toy(kind, 10, D_V, 6);
        cfg.d_h = 16;
        let params = init_params(&cfg, 9).unwrap();
        let a = sample(&cfg, &[0, 1, 2, 3, 4], &[2, 5, 7], 1);
        let b = sample(&cfg, &perm, &[2, 5, 7], 1);
        let pa = answer_distribution(&params, &cfg, &a).unwrap();
        let pb = answer_distribution(&params, &cfg, &b).unwrap();
        for (x, y) in pa.probs().iter().zip(pb.probs()) {
            assert!((x - y).abs() < 1e-12, "{kind}: {x} vs {y}");
        }

        let attention = |s: &Sample| {
            let mut ctx = Ctx::eval(&params);
            let out = forward(&mut ctx, &cfg, s).unwrap();
            out.relation_attention.iter().map(|&n| ctx.graph.value(n).clone()).collect::<Vec<_>>()
        };
        let (aa, ab) = (attention(&a), attention(&b));
        for (ha, hb) in aa.iter().zip(&ab) {
            for i in 0..5 {
                for j in 0..5 {
                    assert!((hb.at(i, j) - ha.at(perm[i], perm[j])).abs() < 1e-12, "{kind} ({i}, {j})");
                }
            }
        }
    }
}

#[test]
fn trainer_separates_two_questions_about_one_scene() {
    for kind in RelationKind::ALL {
        let mut cfg = ModelConfig::toy(kind, 10, D_V, 4);
        cfg.dropout = 0.0;
        cfg.classifier_dropout = 0.0;
        let ident = [0, 1, 2, 3, 4];
        let train = [sample(&cfg, &ident, &[2, 3, 4], 0), sample(&cfg, &ident, &[2, 6, 4], 3)];
        let tc = TrainConfig { epochs: 40, batch_size: 2, seed: 1, schedule: LrSchedule::constant(0.01) };
        let mut epochs = 0;
        let report = Trainer::new(&cfg, tc, init_params(&cfg, 2).unwrap())
            .unwrap()
            .fit(&train, &[], |_, _, _| epochs += 1)
            .unwrap();
        assert_eq!(epochs, 40);
        assert!(report.aborted.is_none());
        let last = report.metrics.last().unwrap();
        assert_eq!(last.train_acc, 1.0, "{kind}");
        assert!(last.loss < report.metrics[0].loss);
    }
}
