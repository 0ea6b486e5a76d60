//! Loss functions with analytic gradients with respect to expert logits.
//!
//! Every distillation term treats its teacher as a constant: gradients only
//! flow into the student argument of each KL divergence. Softmax and
//! log-sum-exp are always evaluated with max-subtraction.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::argmax;

/// Trade-off weights of the representation-learning objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the non-target distillation term.
    pub alpha: f64,
    /// Weight of the mutual distillation term.
    pub beta: f64,
    /// Softmax temperature of both distillation terms.
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            temperature: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::invalid("alpha", "must be finite and >= 0"));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::invalid("beta", "must be finite and >= 0"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid("temperature", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// How per-expert cross-entropy terms are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertReduction {
    #[default]
    Sum,
    Mean,
}

/// A scalar loss and its gradient with respect to each expert's input.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
}

fn check_finite(z: &[f64], what: &'static str) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn check_label(y: usize, c: usize) -> Result<()> {
    if y >= c {
        Err(Error::InvalidLabel {
            label: y,
            num_classes: c,
        })
    } else {
        Ok(())
    }
}

fn check_experts(logits: &[&[f64]]) -> Result<usize> {
    let first = logits
        .first()
        .ok_or_else(|| Error::invalid("experts", "at least one expert is required"))?;
    let c = first.len();
    if let Some(bad) = logits.iter().find(|z| z.len() != c) {
        return Err(Error::ShapeMismatch {
            context: "expert logits",
            expected: c.to_string(),
            actual: bad.len().to_string(),
        });
    }
    Ok(c)
}

/// `log(sum(exp(z)))` with max-subtraction.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax(z: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = z.iter().map(|v| v / temperature).collect();
    let lse = log_sum_exp(&scaled);
    scaled.into_iter().map(|v| v - lse).collect()
}

pub fn softmax(z: &[f64], temperature: f64) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - m) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `KL(p || q)` from log-probabilities.
pub fn kl_from_log(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum()
}

fn kd_scale(temperature: f64) -> f64 {
    if temperature == 1.0 {
        1.0
    } else {
        temperature * temperature
    }
}

/// Target logit, non-target logits and the class ids they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoupledLogits {
    pub target: f64,
    pub nontarget: Vec<f64>,
    /// Non-target class ids in ascending order.
    pub index_map: Vec<usize>,
}

impl DecoupledLogits {
    pub fn reconstruct(&self) -> Vec<f64> {
        let c = self.index_map.len() + 1;
        let mut z = vec![self.target; c];
        for (&idx, &v) in self.index_map.iter().zip(&self.nontarget) {
            z[idx] = v;
        }
        z
    }
}

pub fn decouple_logits(z: &[f64], y: usize) -> Result<DecoupledLogits> {
    check_label(y, z.len())?;
    let index_map: Vec<usize> = (0..z.len()).filter(|&i| i != y).collect();
    Ok(DecoupledLogits {
        target: z[y],
        nontarget: index_map.iter().map(|&i| z[i]).collect(),
        index_map,
    })
}

fn check_shared_map(experts: &[DecoupledLogits]) -> Result<()> {
    let first = experts
        .first()
        .ok_or_else(|| Error::invalid("experts", "at least one expert is required"))?;
    for e in experts {
        if e.index_map != first.index_map || e.nontarget.len() != first.nontarget.len() {
            return Err(Error::ShapeMismatch {
                context: "non-target index maps",
                expected: format!("{:?}", first.index_map),
                actual: format!("{:?}", e.index_map),
            });
        }
    }
    Ok(())
}

/// Cross-expert mean of the non-target logits.
pub fn consensus_mean(experts: &[DecoupledLogits]) -> Result<Vec<f64>> {
    check_shared_map(experts)?;
    let m = experts.len() as f64;
    let k = experts[0].nontarget.len();
    Ok((0..k)
        .map(|i| experts.iter().map(|e| e.nontarget[i]).sum::<f64>() / m)
        .collect())
}

/// Distillation target over the non-target classes.
#[derive(Clone, Debug, PartialEq)]
pub struct GrandTeacher {
    pub logits: Vec<f64>,
    /// Position (within the non-target ordering) of the consensus hardest
    /// negative: the argmax of the cross-expert mean.
    pub consensus_index: usize,
    pub index_map: Vec<usize>,
}

/// The grand teacher keeps the cross-expert mean at the consensus hardest
/// negative and takes the cross-expert maximum everywhere else.
pub fn elect_grand_teacher(experts: &[DecoupledLogits]) -> Result<GrandTeacher> {
    let mean = consensus_mean(experts)?;
    let consensus_index = argmax(&mean);
    let logits = (0..mean.len())
        .map(|i| {
            if i == consensus_index {
                mean[i]
            } else {
                experts
                    .iter()
                    .map(|e| e.nontarget[i])
                    .fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .collect();
    Ok(GrandTeacher {
        logits,
        consensus_index,
        index_map: experts[0].index_map.clone(),
    })
}

/// Tempered softmax over non-target logits.
pub fn nontarget_softmax(z: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_finite(z, "non-target logits")?;
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::invalid("temperature", "must be finite and > 0"));
    }
    Ok(softmax(z, temperature))
}

/// Non-target distillation `sum_m KL(p_teacher || p_m)` over the `C - 1`
/// non-target classes. Gradients are with respect to each student's
/// non-target logits; the teacher is a constant.
pub fn loss_nt(teacher: &GrandTeacher, students: &[DecoupledLogits], temperature: f64) -> Result<LossGrad> {
    check_shared_map(students)?;
    if students[0].index_map != teacher.index_map || teacher.logits.len() != students[0].nontarget.len() {
        return Err(Error::ShapeMismatch {
            context: "teacher vs student non-target logits",
            expected: teacher.logits.len().to_string(),
            actual: students[0].nontarget.len().to_string(),
        });
    }
    check_finite(&teacher.logits, "teacher logits")?;
    let scale = kd_scale(temperature);
    let log_t = log_softmax(&teacher.logits, temperature);
    let p_t: Vec<f64> = log_t.iter().map(|v| v.exp()).collect();
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(students.len());
    for s in students {
        check_finite(&s.nontarget, "student logits")?;
        let log_s = log_softmax(&s.nontarget, temperature);
        value += scale * kl_from_log(&log_t, &log_s);
        grads.push(
            log_s
                .iter()
                .zip(&p_t)
                .map(|(ls, pt)| scale * (ls.exp() - pt) / temperature)
                .collect(),
        );
    }
    Ok(LossGrad { value, grads })
}

/// Full-class non-target distillation for one sample: decouple every
/// expert's logits, elect the grand teacher and distil. Gradients are
/// scattered back to full length `C` with zero at the target class.
pub fn dkt_loss(logits: &[&[f64]], y: usize, temperature: f64) -> Result<LossGrad> {
    let c = check_experts(logits)?;
    check_label(y, c)?;
    let decoupled = logits
        .iter()
        .map(|z| decouple_logits(z, y))
        .collect::<Result<Vec<_>>>()?;
    let teacher = elect_grand_teacher(&decoupled)?;
    let nt = loss_nt(&teacher, &decoupled, temperature)?;
    let grads = nt
        .grads
        .into_iter()
        .map(|g| {
            let mut full = vec![0.0; c];
            for (&idx, v) in teacher.index_map.iter().zip(g) {
                full[idx] = v;
            }
            full
        })
        .collect();
    Ok(LossGrad {
        value: nt.value,
        grads,
    })
}

/// Mutual distillation over ordered expert pairs with separate teacher and
/// student inputs: `sum_j sum_{k != j} KL(p(teacher_j) || p(student_k))`.
/// Gradients are with respect to the student logits.
pub fn loss_mutual_split(teachers: &[&[f64]], students: &[&[f64]], temperature: f64) -> Result<LossGrad> {
    let c = check_experts(teachers)?;
    if teachers.len() != students.len() || check_experts(students)? != c {
        return Err(Error::ShapeMismatch {
            context: "mutual distillation operands",
            expected: format!("{} x {c}", teachers.len()),
            actual: format!("{} x {}", students.len(), students.first().map_or(0, |s| s.len())),
        });
    }
    let m = teachers.len();
    let scale = kd_scale(temperature);
    let log_t: Vec<Vec<f64>> = teachers.iter().map(|z| log_softmax(z, temperature)).collect();
    let log_s: Vec<Vec<f64>> = students.iter().map(|z| log_softmax(z, temperature)).collect();
    let mut value = 0.0;
    let mut grads = vec![vec![0.0; c]; m];
    for j in 0..m {
        for k in (0..m).filter(|&k| k != j) {
            value += scale * kl_from_log(&log_t[j], &log_s[k]);
            for i in 0..c {
                grads[k][i] += scale * (log_s[k][i].exp() - log_t[j][i].exp()) / temperature;
            }
        }
    }
    Ok(LossGrad { value, grads })
}

/// Mutual distillation where every expert is both teacher (detached) and
/// student. Zero for a single expert.
pub fn loss_mutual(logits: &[&[f64]], temperature: f64) -> Result<LossGrad> {
    for z in logits {
        check_finite(z, "expert logits")?;
    }
    loss_mutual_split(logits, logits, temperature)
}

/// `sum_m -log softmax(z^m)_y`.
pub fn loss_ce(logits: &[&[f64]], y: usize) -> Result<LossGrad> {
    let c = check_experts(logits)?;
    check_label(y, c)?;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for z in logits {
        check_finite(z, "expert logits")?;
        let ls = log_softmax(z, 1.0);
        value -= ls[y];
        let mut g: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
        g[y] -= 1.0;
        grads.push(g);
    }
    Ok(LossGrad { value, grads })
}

/// Balanced softmax cross-entropy: cross-entropy on logits shifted by the
/// log class counts, summed over experts.
pub fn loss_bsce(logits: &[&[f64]], y: usize, counts: &[usize]) -> Result<LossGrad> {
    let c = check_experts(logits)?;
    if counts.len() != c {
        return Err(Error::ShapeMismatch {
            context: "class counts",
            expected: c.to_string(),
            actual: counts.len().to_string(),
        });
    }
    if counts.contains(&0) {
        return Err(Error::invalid("counts", "balanced softmax needs every class count >= 1"));
    }
    let log_prior: Vec<f64> = counts.iter().map(|&n| (n as f64).ln()).collect();
    let shifted: Vec<Vec<f64>> = logits
        .iter()
        .map(|z| z.iter().zip(&log_prior).map(|(a, b)| a + b).collect())
        .collect();
    let refs: Vec<&[f64]> = shifted.iter().map(Vec::as_slice).collect();
    loss_ce(&refs, y)
}

pub fn loss_total(ce: f64, nt: f64, mu: f64, weights: &LossWeights) -> f64 {
    ce + weights.alpha * nt + weights.beta * mu
}

/// Batch-averaged loss terms of one optimization step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub nt: f64,
    pub mu: f64,
    pub total: f64,
}

fn rows(logits: &[Array2<f64>], b: usize) -> Vec<&[f64]> {
    logits
        .iter()
        .map(|z| z.row(b).to_slice().expect("contiguous logits"))
        .collect()
}

/// Representation-learning objective averaged over the batch, with the
/// gradient with respect to every expert's logit matrix. Terms whose weight
/// is zero are skipped (reported as zero).
pub fn stage1_objective(
    logits: &[Array2<f64>],
    labels: &[usize],
    weights: &LossWeights,
    reduction: ExpertReduction,
) -> Result<(LossBreakdown, Vec<Array2<f64>>)> {
    weights.validate()?;
    let n = labels.len();
    let mut grads: Vec<Array2<f64>> = logits.iter().map(|z| Array2::zeros(z.raw_dim())).collect();
    let mut out = LossBreakdown::default();
    let inv_n = 1.0 / n as f64;
    let ce_scale = match reduction {
        ExpertReduction::Sum => 1.0,
        ExpertReduction::Mean => 1.0 / logits.len() as f64,
    };
    for (b, &y) in labels.iter().enumerate() {
        let z = rows(logits, b);
        let ce = loss_ce(&z, y)?;
        out.ce += ce_scale * ce.value * inv_n;
        for (g, d) in grads.iter_mut().zip(&ce.grads) {
            g.row_mut(b).iter_mut().zip(d).for_each(|(a, v)| *a += ce_scale * v * inv_n);
        }
        if weights.alpha > 0.0 {
            let nt = dkt_loss(&z, y, weights.temperature)?;
            out.nt += nt.value * inv_n;
            for (g, d) in grads.iter_mut().zip(&nt.grads) {
                g.row_mut(b).iter_mut().zip(d).for_each(|(a, v)| *a += weights.alpha * v * inv_n);
            }
        }
        if weights.beta > 0.0 && logits.len() > 1 {
            let mu = loss_mutual(&z, weights.temperature)?;
            out.mu += mu.value * inv_n;
            for (g, d) in grads.iter_mut().zip(&mu.grads) {
                g.row_mut(b).iter_mut().zip(d).for_each(|(a, v)| *a += weights.beta * v * inv_n);
            }
        }
    }
    out.total = loss_total(out.ce, out.nt, out.mu, weights);
    Ok((out, grads))
}

/// Balanced softmax objective averaged over the batch.
pub fn bsce_objective(logits: &[Array2<f64>], labels: &[usize], counts: &[usize]) -> Result<(f64, Vec<Array2<f64>>)> {
    let n = labels.len() as f64;
    let mut grads: Vec<Array2<f64>> = logits.iter().map(|z| Array2::zeros(z.raw_dim())).collect();
    let mut value = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let lg = loss_bsce(&rows(logits, b), y, counts)?;
        value += lg.value / n;
        for (g, d) in grads.iter_mut().zip(&lg.grads) {
            g.row_mut(b).iter_mut().zip(d).for_each(|(a, v)| *a += v / n);
        }
    }
    Ok((value, grads))
}
