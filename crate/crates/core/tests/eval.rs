mod common;

use common::checks::tiny_data;
use common::rng;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;
use shike::checkpoint;
use shike::data::{make_longtail_counts, split_divisions, synth_gaussian_lt, ClassDivision, Division, SynthOptions};
use shike::eval::{
    evaluate, expert_preference, hardest_negative_hist, report_from_logits, EvalReport, ProbabilitySource,
};
use shike::model::{assign_depths, BackboneConfig, Family, MoEModel, ModelConfig};
use shike::train::{train_two_stage, TrainConfig};

fn model(m: usize, c: usize, dims: usize, seed: u64) -> MoEModel {
    MoEModel::new(
        ModelConfig {
            backbone: BackboneConfig {
                family: Family::Mlp,
                input_shape: shike::data::Shape3::vector(dims),
                stage_widths: vec![8, 8],
                batch_norm: true,
            },
            expert_width: 6,
            num_classes: c,
            tap_depths: assign_depths(m, 2),
            fusion: true,
        },
        seed,
    )
    .unwrap()
}

/// Per-class accuracy by direct counting.
fn count_accuracy(logits: &[Vec<Vec<f64>>], labels: &[usize], c: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let argmax = |z: &[f64]| {
        let mut best = 0;
        for i in 1..z.len() {
            if z[i] > z[best] {
                best = i;
            }
        }
        best
    };
    let mut seen = vec![0.0; c];
    let mut hit = vec![0.0; c];
    let mut expert_hit = vec![vec![0.0; c]; logits.len()];
    for (b, &y) in labels.iter().enumerate() {
        seen[y] += 1.0;
        let mut sum = vec![0.0; c];
        for (m, z) in logits.iter().enumerate() {
            for k in 0..c {
                sum[k] += z[b][k];
            }
            if argmax(&z[b]) == y {
                expert_hit[m][y] += 1.0;
            }
        }
        if argmax(&sum) == y {
            hit[y] += 1.0;
        }
    }
    let per_class = (0..c).map(|k| hit[k] / seen[k]).collect();
    let per_expert = expert_hit.iter().map(|h| (0..c).map(|k| h[k] / seen[k]).collect()).collect();
    (per_class, per_expert)
}

#[test]
fn accuracy_matches_counting_oracle() {
    let mut r = rng(1);
    for _ in 0..200 {
        let m = r.random_range(1..5);
        let c = r.random_range(2..8);
        let per = r.random_range(1..6);
        let labels: Vec<usize> = (0..c * per).map(|i| i % c).collect();
        // Coarse integer logits so ties actually occur.
        let raw: Vec<Vec<Vec<f64>>> = (0..m)
            .map(|_| labels.iter().map(|_| (0..c).map(|_| r.random_range(0..3) as f64).collect()).collect())
            .collect();
        let arrays: Vec<Array2<f64>> = raw
            .iter()
            .map(|z| Array2::from_shape_fn((labels.len(), c), |(b, k)| z[b][k]))
            .collect();
        let div = ClassDivision {
            many: (0..c / 2).collect(),
            medium: vec![],
            few: (c / 2..c).collect(),
        };
        let rep = report_from_logits(&arrays, &labels, &div).unwrap();
        let (per_class, per_expert) = count_accuracy(&raw, &labels, c);
        assert_eq!(rep.per_class, per_class);
        assert_eq!(rep.per_expert, per_expert);
        assert_eq!(rep.sample_count, labels.len());
        let mean = per_class.iter().sum::<f64>() / c as f64;
        assert!((rep.overall - mean).abs() < 1e-15);
        assert_eq!(rep.divisions.medium, None);
        let few = per_class[c / 2..].iter().sum::<f64>() / (c - c / 2) as f64;
        assert!((rep.divisions.few.unwrap() - few).abs() < 1e-15);
    }
}

#[test]
fn evaluate_agrees_with_forward_logits() {
    // More samples than one evaluation chunk.
    let counts = make_longtail_counts(4, 60, 10.0).unwrap();
    let opts = SynthOptions {
        test_per_class: 150,
        ..SynthOptions::default()
    };
    let (train, test) = synth_gaussian_lt(&counts, 5, 2.0, 3, &opts).unwrap();
    let div = split_divisions(train.spec());
    let net = model(3, 4, 5, 3);
    let out = net.forward(test.inputs()).unwrap();
    let want = report_from_logits(&out.logits, test.labels(), &div).unwrap();
    assert_eq!(evaluate(&net, &test, &div).unwrap(), want);
}

#[test]
fn uniform_model_has_flat_hardest_negative() {
    let (_, test) = tiny_data(2);
    let mut net = model(2, 3, 4, 2);
    for e in net.experts_mut() {
        e.head.weight.value.iter_mut().for_each(|v| *v = 0.0);
        e.head.bias.value.iter_mut().for_each(|v| *v = 0.0);
    }
    let h = hardest_negative_hist(&net, &test, 10, ProbabilitySource::Ensemble).unwrap();
    assert_eq!(h.total(), test.len());
    assert!(h.values.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    assert_eq!(h.counts.iter().filter(|&&n| n > 0).count(), 1);
    assert_eq!(h.counts[3], test.len());
    assert_eq!(h.fraction_above(0.5), 0.0);
}

#[test]
fn histogram_sources() {
    let (_, test) = tiny_data(3);
    let net = model(2, 3, 4, 3);
    for src in [ProbabilitySource::Ensemble, ProbabilitySource::Expert(0), ProbabilitySource::Expert(1)] {
        let h = hardest_negative_hist(&net, &test, 7, src).unwrap();
        assert_eq!(h.total(), test.len());
        assert_eq!(h.edges.len(), 8);
    }
    assert!(hardest_negative_hist(&net, &test, 7, ProbabilitySource::Expert(2)).is_err());
    assert!(hardest_negative_hist(&net, &test, 0, ProbabilitySource::Ensemble).is_err());
}

#[test]
fn checkpoint_roundtrip_preserves_report() {
    let (train, test) = tiny_data(4);
    let div = split_divisions(train.spec());
    let cfg = TrainConfig {
        epochs_stage1: 3,
        epochs_stage2: 2,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let mut state = train_two_stage(model(3, 3, 4, 4), &train, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&state, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    // Gradient buffers are scratch space and are not stored.
    state.model.zero_grad();
    assert_eq!(back, state);
    let a: EvalReport = evaluate(&state.model, &test, &div).unwrap();
    let b = evaluate(&back.model, &test, &div).unwrap();
    assert_eq!(a, b);
    assert!(checkpoint::load_for_classes(&path, 5).is_err());

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    assert!(checkpoint::load(&path).is_err());
    std::fs::write(&path, &bytes[..mid]).unwrap();
    assert!(checkpoint::load(&path).is_err());
}

proptest! {
    #[test]
    fn preference_shares_sum_to_one(
        per_expert in (1usize..5, 1usize..12).prop_flat_map(|(m, c)|
            prop::collection::vec(prop::collection::vec(0u8..4, c), m)),
        split in 0usize..12,
    ) {
        let c = per_expert[0].len();
        let split = split.min(c);
        let rep = EvalReport {
            overall: 0.0,
            divisions: Default::default(),
            per_class: vec![0.0; c],
            per_expert: per_expert.iter().map(|r| r.iter().map(|&v| v as f64 / 4.0).collect()).collect(),
            sample_count: 0,
        };
        let div = ClassDivision { many: (0..split).collect(), medium: vec![], few: (split..c).collect() };
        let pref = expert_preference(&rep, &div);
        prop_assert!(pref.medium.is_none());
        for d in [Division::Many, Division::Few] {
            match pref.get(d) {
                None => prop_assert!(div.members(d).is_empty()),
                Some(share) => {
                    prop_assert!((share.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    prop_assert!(share.iter().all(|&s| (0.0..=1.0).contains(&s)));
                }
            }
        }
    }
}
