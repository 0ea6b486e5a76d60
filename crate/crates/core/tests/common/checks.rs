//! Acceptance checks that run quickly enough to also serve as ordinary tests.
//! Each returns a one-line summary on success and a reason on failure.
#![allow(dead_code)]

use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use shike::data::{make_longtail_counts, synth_gaussian_lt, LabeledDataset, Shape3, SynthOptions};
use shike::losses::{
    decouple_logits, dkt_loss, elect_grand_teacher, loss_bsce, loss_ce, loss_mutual, nontarget_softmax,
};
use shike::model::{BackboneConfig, Family, MoEModel, ModelConfig, Trainable};
use shike::nn::{global_avg_pool, Layer, Mode};
use shike::train::{cosine_lr, epoch_order, run_stage1, Stage, TrainConfig, TrainState};

use super::*;

pub type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Loss values, teacher election and non-target softmax against the scalar
/// oracles on 1,000 random configurations.
pub fn loss_oracles(instances: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for n in 0..instances {
        let inst = random_instance(&mut r, 4, 10);
        let z = inst.refs();
        let y = inst.y;
        let mut cmp = |what: &str, a: f64, b: f64| -> Result<(), String> {
            let d = (a - b).abs();
            worst = worst.max(d);
            ensure(d <= 1e-10, || format!("instance {n}: {what} {a} vs oracle {b}"))
        };
        cmp("L_ce", loss_ce(&z, y).unwrap().value, ce(&inst.logits, y))?;
        cmp("L_mu", loss_mutual(&z, 1.0).unwrap().value, mutual(&inst.logits))?;
        cmp("L_nt", dkt_loss(&z, y, 1.0).unwrap().value, nt_loss(&inst.logits, y))?;
        cmp("L_bsce", loss_bsce(&z, y, &inst.counts).unwrap().value, bsce(&inst.logits, y, &inst.counts))?;

        let dec: Vec<_> = z.iter().map(|v| decouple_logits(v, y).unwrap()).collect();
        let t = elect_grand_teacher(&dec).unwrap();
        let (ot, ohard) = teacher(&inst.logits, y);
        ensure(t.consensus_index == ohard, || format!("instance {n}: consensus index"))?;
        for (a, b) in t.logits.iter().zip(&ot) {
            cmp("teacher logit", *a, *b)?;
        }
        let pt = nontarget_softmax(&t.logits, 1.0).unwrap();
        for (a, b) in pt.iter().zip(softmax(&ot)) {
            cmp("teacher p~", *a, b)?;
        }
        for (m, d) in dec.iter().enumerate() {
            let p = nontarget_softmax(&d.nontarget, 1.0).unwrap();
            for (a, b) in p.iter().zip(softmax(&nontarget(&inst.logits[m], y))) {
                cmp("student p~", *a, b)?;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.2}s (limit 10s)"))?;
    Ok(format!("{instances} configurations, max |diff| {worst:.2e}, {secs:.2}s"))
}

/// Analytic gradients of the four losses against central differences, and
/// the stop-gradient contract of the grand teacher.
pub fn gradient_checks(instances: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut r = rng(seed);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for n in 0..instances {
        let inst = random_instance(&mut r, 4, 10);
        let z = inst.refs();
        let y = inst.y;
        let frozen = inst.logits.clone();
        let counts = inst.counts.clone();
        let ce_g = loss_ce(&z, y).unwrap().grads;
        let bs_g = loss_bsce(&z, y, &counts).unwrap().grads;
        let mu_g = loss_mutual(&z, 1.0).unwrap().grads;
        let nt_g = dkt_loss(&z, y, 1.0).unwrap().grads;
        let cases: [(&str, &Vec<Vec<f64>>, Box<dyn Fn(&[Vec<f64>]) -> f64>); 4] = [
            ("L_ce", &ce_g, Box::new(|l: &[Vec<f64>]| ce(l, y))),
            ("L_bsce", &bs_g, Box::new(|l: &[Vec<f64>]| bsce(l, y, &counts))),
            ("L_mu", &mu_g, Box::new(|l: &[Vec<f64>]| mutual_detached(&frozen, l))),
            ("L_nt", &nt_g, Box::new(|l: &[Vec<f64>]| nt_loss_detached(&frozen, l, y))),
        ];
        for (name, g, f) in &cases {
            for m in 0..inst.logits.len() {
                for i in 0..inst.logits[m].len() {
                    let fd = central_diff(&inst.logits, m, i, h, f.as_ref());
                    let e = rel_err(g[m][i], fd);
                    worst = worst.max(e);
                    ensure(e <= 1e-5, || format!("instance {n}: {name} d/dz[{m}][{i}] {} vs fd {fd}", g[m][i]))?;
                }
            }
        }
        // Teacher path: the gradient equals the student-only gradient
        // `p~_m - p~_T` with the teacher as a constant, at every position,
        // and nothing is routed to the target logit.
        let (t, _) = teacher(&inst.logits, y);
        let pt = softmax(&t);
        for (m, gm) in nt_g.iter().enumerate() {
            ensure(gm[y] == 0.0, || format!("instance {n}: target logit received gradient"))?;
            let ps = softmax(&nontarget(&inst.logits[m], y));
            let g_nt = nontarget(gm, y);
            for i in 0..ps.len() {
                let want = ps[i] - pt[i];
                ensure((g_nt[i] - want).abs() <= 1e-12, || {
                    format!("instance {n}: L_nt gradient has a teacher component at {i}")
                })?;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.2}s (limit 30s)"))?;
    Ok(format!("{instances} instances, max rel err {worst:.2e}, teacher path zero, {secs:.2}s"))
}

/// The grand teacher never puts more non-target mass on the consensus
/// hardest negative than the plain mean does.
pub fn suppression(trials: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut strict = 0;
    for n in 0..trials {
        let inst = random_instance(&mut r, 4, 10);
        let dec: Vec<_> = inst.refs().iter().map(|v| decouple_logits(v, inst.y).unwrap()).collect();
        let t = elect_grand_teacher(&dec).unwrap();
        let k = t.consensus_index;
        let mean: Vec<f64> = (0..t.logits.len())
            .map(|i| dec.iter().map(|d| d.nontarget[i]).sum::<f64>() / dec.len() as f64)
            .collect();
        let pt = nontarget_softmax(&t.logits, 1.0).unwrap()[k];
        let pm = nontarget_softmax(&mean, 1.0).unwrap()[k];
        ensure(pt <= pm, || format!("trial {n}: teacher {pt} > mean {pm}"))?;
        let raised = (0..mean.len()).any(|i| i != k && t.logits[i] > mean[i]);
        if raised {
            ensure(pt < pm, || format!("trial {n}: expected strict suppression"))?;
            strict += 1;
        }
    }
    Ok(format!("{trials} logit sets, 0 violations ({strict} strict)"))
}

fn tiny_model(num_experts: usize, fusion: bool, classes: usize, dims: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            family: Family::Mlp,
            input_shape: Shape3::vector(dims),
            stage_widths: vec![6, 5],
            batch_norm: true,
        },
        expert_width: 4,
        num_classes: classes,
        tap_depths: shike::model::assign_depths(num_experts, 2),
        fusion,
    }
}

pub fn tiny_data(seed: u64) -> (LabeledDataset, LabeledDataset) {
    let counts = make_longtail_counts(3, 30, 10.0).unwrap();
    synth_gaussian_lt(&counts, 4, 2.0, seed, &SynthOptions { test_per_class: 10, ..Default::default() }).unwrap()
}

/// Plain cross-entropy training of a single-expert model written directly
/// against the layer API: softmax minus one-hot, momentum SGD with weight
/// decay, cosine schedule.
fn plain_ce_epoch(model: &mut MoEModel, velocity: &mut [Vec<f64>], data: &LabeledDataset, cfg: &TrainConfig, e: usize) {
    let lr = cosine_lr(e, cfg.epochs_stage1, cfg.base_lr).unwrap();
    let order = epoch_order(data.len(), cfg.seed, Stage::Representation, e);
    for idx in order.chunks(cfg.batch_size) {
        let (x, y) = data.batch(idx);
        model.zero_grad();
        let (out, cache) = model.forward_train(&x, Mode::Train).unwrap();
        let z = &out.logits[0];
        let mut g = Array2::zeros(z.raw_dim());
        for (b, &t) in y.iter().enumerate() {
            let p = softmax(&z.row(b).to_vec());
            for i in 0..p.len() {
                g[[b, i]] = (p[i] - if i == t { 1.0 } else { 0.0 }) / y.len() as f64;
            }
        }
        model.backward(&cache, &[g], Trainable::ALL);
        let mut k = 0;
        model.for_each_param_mut(&mut |_, _, p| {
            for j in 0..p.value.len() {
                let d = p.grad[j] + cfg.weight_decay * p.value[j];
                velocity[k][j] = cfg.momentum * velocity[k][j] + d;
                p.value[j] -= lr * velocity[k][j];
            }
            k += 1;
        });
    }
}

fn params(model: &MoEModel) -> Vec<f64> {
    let mut v = Vec::new();
    model.for_each_param(&mut |_, _, p| v.extend_from_slice(&p.value));
    v
}

/// Degenerate configurations: single expert without distillation is plain
/// cross-entropy training; balanced BSCE is CE; all-ones alignment output
/// makes fusion a passthrough.
pub fn degenerate(seed: u64) -> Check {
    // (a) step-for-step training equivalence
    let (train, _) = tiny_data(seed);
    let cfg = TrainConfig {
        epochs_stage1: 6,
        batch_size: 16,
        base_lr: 0.1,
        seed,
        weights: shike::losses::LossWeights {
            alpha: 0.0,
            beta: 0.0,
            temperature: 1.0,
        },
        ..TrainConfig::default()
    };
    let model = MoEModel::new(tiny_model(1, false, 3, 4), seed).unwrap();
    let mut lib = TrainState::new(model.clone());
    let mut with_kd = TrainState::new(model.clone());
    let kd_cfg = TrainConfig {
        weights: shike::losses::LossWeights::default(),
        ..cfg.clone()
    };
    let mut plain = model;
    let mut vel: Vec<Vec<f64>> = lib.velocity.clone();
    let mut max_dev: f64 = 0.0;
    for e in 0..cfg.epochs_stage1 {
        run_stage1(&mut lib, &train, &cfg, Some(e + 1), &shike::data::NoAugment).map_err(|x| x.to_string())?;
        run_stage1(&mut with_kd, &train, &kd_cfg, Some(e + 1), &shike::data::NoAugment).map_err(|x| x.to_string())?;
        plain_ce_epoch(&mut plain, &mut vel, &train, &cfg, e);
        let (a, b) = (params(&lib.model), params(&plain));
        for (x, y) in a.iter().zip(&b) {
            max_dev = max_dev.max((x - y).abs() / x.abs().max(1.0));
        }
        ensure(max_dev <= 1e-10, || format!("epoch {e}: trajectory deviates by {max_dev:.2e}"))?;
        ensure(params(&with_kd.model) == a, || {
            format!("epoch {e}: M=1 with distillation weights differs from plain CE")
        })?;
    }

    // (b) balanced BSCE equals CE
    let mut r = rng(seed ^ 0xb5ce);
    let mut bsce_dev: f64 = 0.0;
    for _ in 0..1000 {
        let inst = random_instance(&mut r, 4, 10);
        let n = r.random_range(1..1000);
        let counts = vec![n; inst.logits[0].len()];
        let a = loss_bsce(&inst.refs(), inst.y, &counts).unwrap();
        let b = loss_ce(&inst.refs(), inst.y).unwrap();
        bsce_dev = bsce_dev.max((a.value - b.value).abs());
        for (ga, gb) in a.grads.iter().flatten().zip(b.grads.iter().flatten()) {
            bsce_dev = bsce_dev.max((ga - gb).abs());
        }
    }
    ensure(bsce_dev <= 1e-12, || format!("balanced BSCE deviates from CE by {bsce_dev:.2e}"))?;

    // (c) all-ones alignment output: fusion is the identity
    let mut model = MoEModel::new(tiny_model(2, true, 3, 4), seed).unwrap();
    for e in model.experts_mut() {
        let path = e.alignment.as_mut().expect("fusion enabled");
        let bn = path
            .layers
            .iter_mut()
            .rev()
            .find_map(|l| match l {
                Layer::BatchNorm(b) => Some(b),
                _ => None,
            })
            .expect("alignment blocks end in batch norm");
        bn.gamma.value.iter_mut().for_each(|g| *g = 0.0);
        bn.beta.value.iter_mut().for_each(|b| *b = 1.0);
    }
    let x = Array2::from_shape_fn((7, 4), |_| r.random_range(-2.0..2.0));
    let out = model.forward(&x).map_err(|e| e.to_string())?;
    let stack = model.backbone_forward(&x).map_err(|e| e.to_string())?;
    let last = stack.at(stack.depth());
    for m in 0..model.num_experts() {
        let ex = &model.experts()[m];
        let aligned = model.align(m, stack.at(ex.tap_depth)).unwrap().unwrap();
        ensure(aligned.iter().all(|&v| v == 1.0), || "alignment output is not all ones".into())?;
        let high = model.exclusive_forward(m, last);
        let plain = ex.head.forward(&global_avg_pool(&high, ex.exclusive.output));
        ensure(out.logits[m] == plain, || format!("expert {m}: fused logits differ from unfused"))?;
    }
    Ok(format!(
        "M=1 CE trajectory max dev {max_dev:.1e} over {} epochs, BSCE/CE max dev {bsce_dev:.1e}, fusion passthrough exact",
        cfg.epochs_stage1
    ))
}
