mod common;

use common::checks;
use common::*;
use proptest::prelude::*;
use shike::losses::{
    consensus_mean, decouple_logits, dkt_loss, elect_grand_teacher, loss_bsce, loss_ce, loss_mutual, loss_nt,
    nontarget_softmax,
};

#[test]
fn losses_match_scalar_oracles() {
    let line = checks::loss_oracles(1000, 1).unwrap();
    println!("{line}");
}

#[test]
fn teacher_suppresses_consensus_negative() {
    checks::suppression(10_000, 2).unwrap();
}

#[test]
fn election_worked_example() {
    // Non-target vectors (5,1,0) and (1,4,0): the mean is (3,2.5,0) so the
    // consensus negative is the first position and the teacher is (3,4,0).
    let a = decouple_logits(&[9.0, 5.0, 1.0, 0.0], 0).unwrap();
    let b = decouple_logits(&[9.0, 1.0, 4.0, 0.0], 0).unwrap();
    assert_eq!(consensus_mean(&[a.clone(), b.clone()]).unwrap(), vec![3.0, 2.5, 0.0]);
    let t = elect_grand_teacher(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(t.consensus_index, 0);
    assert_eq!(t.logits, vec![3.0, 4.0, 0.0]);
    let l = loss_nt(&t, &[a, b], 1.0).unwrap();
    let pt = softmax(&[3.0, 4.0, 0.0]);
    let want = kl(&pt, &softmax(&[5.0, 1.0, 0.0])) + kl(&pt, &softmax(&[1.0, 4.0, 0.0]));
    assert!((l.value - want).abs() < 1e-14);
}

#[test]
fn mutual_two_expert_example() {
    let z1 = [0.0, 0.0];
    let z2 = [0.0, 3f64.ln()];
    let got = loss_mutual(&[&z1, &z2], 1.0).unwrap().value;
    let (p1, p2) = ([0.5, 0.5], [0.25, 0.75]);
    assert!((got - kl(&p1, &p2) - kl(&p2, &p1)).abs() < 1e-14);
}

fn logits_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
    (1usize..=4, 2usize..=8).prop_flat_map(|(m, c)| {
        (
            prop::collection::vec(prop::collection::vec(-8.0f64..8.0, c), m),
            0..c,
        )
    })
}

proptest! {
    #[test]
    fn decoupling_reconstructs_bitwise((z, y) in logits_strategy()) {
        let d = decouple_logits(&z[0], y).unwrap();
        prop_assert!(!d.index_map.contains(&y));
        prop_assert_eq!(d.index_map.len(), z[0].len() - 1);
        let back = d.reconstruct();
        prop_assert!(back.iter().zip(&z[0]).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn distillation_is_nonnegative((z, y) in logits_strategy()) {
        let refs: Vec<&[f64]> = z.iter().map(Vec::as_slice).collect();
        prop_assert!(loss_mutual(&refs, 1.0).unwrap().value >= -1e-12);
        prop_assert!(dkt_loss(&refs, y, 1.0).unwrap().value >= -1e-12);
    }

    #[test]
    fn consensus_gives_zero_distillation((z, y) in logits_strategy(), m in 1usize..4) {
        let same: Vec<&[f64]> = (0..m).map(|_| z[0].as_slice()).collect();
        // The consensus mean of identical rows can round by an ulp.
        prop_assert!(loss_mutual(&same, 1.0).unwrap().value.abs() < 1e-12);
        prop_assert!(dkt_loss(&same, y, 1.0).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn teacher_dominates_mean((z, y) in logits_strategy()) {
        let d: Vec<_> = z.iter().map(|v| decouple_logits(v, y).unwrap()).collect();
        let mean = consensus_mean(&d).unwrap();
        let t = elect_grand_teacher(&d).unwrap();
        for i in 0..mean.len() {
            prop_assert!(t.logits[i] >= mean[i]);
        }
        prop_assert_eq!(t.logits[t.consensus_index], mean[t.consensus_index]);
    }

    #[test]
    fn nontarget_softmax_sums_to_one(z in prop::collection::vec(-50.0f64..50.0, 1..10), shift in -100.0f64..100.0) {
        let p = nontarget_softmax(&z, 1.0).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| v > 0.0));
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        let q = nontarget_softmax(&shifted, 1.0).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn class_permutation_equivariance((z, y) in logits_strategy(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let c = z[0].len();
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut rng(seed));
        let counts: Vec<usize> = (0..c).map(|i| 1 + 7 * i).collect();
        // Class i moves to position perm[i].
        let permute = |v: &[f64]| {
            let mut out = vec![0.0; c];
            for i in 0..c {
                out[perm[i]] = v[i];
            }
            out
        };
        let mut pcounts = vec![0; c];
        for i in 0..c {
            pcounts[perm[i]] = counts[i];
        }
        let pz: Vec<Vec<f64>> = z.iter().map(|v| permute(v)).collect();
        let refs: Vec<&[f64]> = z.iter().map(Vec::as_slice).collect();
        let prefs: Vec<&[f64]> = pz.iter().map(Vec::as_slice).collect();
        let py = perm[y];
        let pairs = [
            (loss_ce(&refs, y).unwrap(), loss_ce(&prefs, py).unwrap()),
            (loss_mutual(&refs, 1.0).unwrap(), loss_mutual(&prefs, 1.0).unwrap()),
            (loss_bsce(&refs, y, &counts).unwrap(), loss_bsce(&prefs, py, &pcounts).unwrap()),
        ];
        for (a, b) in pairs {
            prop_assert!((a.value - b.value).abs() < 1e-10);
            for (ga, gb) in a.grads.iter().zip(&b.grads) {
                let pga = permute(ga);
                for (u, v) in pga.iter().zip(gb) {
                    prop_assert!((u - v).abs() < 1e-10);
                }
            }
        }
        // The consensus argmax breaks ties by position, so the non-target
        // loss is only compared when the consensus negative is unique.
        let d: Vec<_> = z.iter().map(|v| decouple_logits(v, y).unwrap()).collect();
        let mean = consensus_mean(&d).unwrap();
        let top = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if mean.iter().filter(|&&v| v == top).count() == 1 {
            let a = dkt_loss(&refs, y, 1.0).unwrap();
            let b = dkt_loss(&prefs, py, 1.0).unwrap();
            prop_assert!((a.value - b.value).abs() < 1e-10);
        }
    }

    #[test]
    fn bsce_shift_invariance((z, y) in logits_strategy(), shift in -20.0f64..20.0) {
        let c = z[0].len();
        let counts: Vec<usize> = (0..c).map(|i| 100 / (i + 1)).collect();
        let refs: Vec<&[f64]> = z.iter().map(Vec::as_slice).collect();
        let sz: Vec<Vec<f64>> = z.iter().map(|v| v.iter().map(|x| x + shift).collect()).collect();
        let srefs: Vec<&[f64]> = sz.iter().map(Vec::as_slice).collect();
        let a = loss_bsce(&refs, y, &counts).unwrap().value;
        let b = loss_bsce(&srefs, y, &counts).unwrap().value;
        prop_assert!((a - b).abs() < 1e-9);
    }
}
