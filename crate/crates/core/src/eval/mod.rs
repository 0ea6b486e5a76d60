//! Balanced evaluation and model diagnostics.

mod experiments;

pub use experiments::{
    ablation_run, expert_count_sweep, run_experiment, seeded, AblationFlags, AblationRow, AblationTable,
    ExperimentOutcome, SweepCell, SweepTable, TABLE4_ROWS,
};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClassDivision, Division, LabeledDataset};
use crate::error::{Error, Result};
use crate::losses::softmax;
use crate::model::{argmax, MoEModel};

const EVAL_CHUNK: usize = 256;

/// Accuracy per division; `None` marks an empty division.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DivisionAccuracy {
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

impl DivisionAccuracy {
    pub fn get(&self, d: Division) -> Option<f64> {
        match d {
            Division::Many => self.many,
            Division::Medium => self.medium,
            Division::Few => self.few,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean of the per-class accuracies (equal to the sample-weighted
    /// accuracy on a balanced test set).
    pub overall: f64,
    pub divisions: DivisionAccuracy,
    pub per_class: Vec<f64>,
    /// `per_expert[m][c]`: accuracy on class `c` of expert `m`'s logits alone.
    pub per_expert: Vec<Vec<f64>>,
    pub sample_count: usize,
}

fn division_mean(per_class: &[f64], members: &[usize]) -> Option<f64> {
    if members.is_empty() {
        None
    } else {
        Some(members.iter().map(|&c| per_class[c]).sum::<f64>() / members.len() as f64)
    }
}

/// Per-chunk hit counts: ensemble hits per class and expert hits per class.
#[derive(Clone, Debug)]
struct Hits {
    ensemble: Vec<usize>,
    expert: Vec<Vec<usize>>,
    seen: Vec<usize>,
}

impl Hits {
    fn new(m: usize, c: usize) -> Self {
        Hits {
            ensemble: vec![0; c],
            expert: vec![vec![0; c]; m],
            seen: vec![0; c],
        }
    }

    fn merge(mut self, other: Hits) -> Hits {
        let add = |a: &mut [usize], b: &[usize]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.ensemble, &other.ensemble);
        add(&mut self.seen, &other.seen);
        for (a, b) in self.expert.iter_mut().zip(&other.expert) {
            add(a, b);
        }
        self
    }
}

/// Build a report from raw per-expert logits and labels.
pub fn report_from_logits(logits: &[Array2<f64>], labels: &[usize], division: &ClassDivision) -> Result<EvalReport> {
    let c = division.num_classes();
    let mut hits = Hits::new(logits.len(), c);
    for (b, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::InvalidLabel { label: y, num_classes: c });
        }
        hits.seen[y] += 1;
        let mut ens = vec![0.0; c];
        for (m, z) in logits.iter().enumerate() {
            let row = z.row(b);
            let row = row.as_slice().expect("contiguous logits");
            hits.expert[m][y] += usize::from(argmax(row) == y);
            ens.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        hits.ensemble[y] += usize::from(argmax(&ens) == y);
    }
    finish(hits, division)
}

fn finish(hits: Hits, division: &ClassDivision) -> Result<EvalReport> {
    if let Some(c) = hits.seen.iter().position(|&n| n == 0) {
        return Err(Error::invalid("test set", format!("class {c} has no test samples")));
    }
    let rate = |h: &[usize]| -> Vec<f64> {
        h.iter().zip(&hits.seen).map(|(&k, &n)| k as f64 / n as f64).collect()
    };
    let per_class = rate(&hits.ensemble);
    let per_expert = hits.expert.iter().map(|h| rate(h)).collect();
    let overall = per_class.iter().sum::<f64>() / per_class.len() as f64;
    Ok(EvalReport {
        overall,
        divisions: DivisionAccuracy {
            many: division_mean(&per_class, &division.many),
            medium: division_mean(&per_class, &division.medium),
            few: division_mean(&per_class, &division.few),
        },
        per_class,
        per_expert,
        sample_count: hits.seen.iter().sum(),
    })
}

/// Ensemble evaluation of `model` on a balanced test set, with the class
/// divisions taken from the training distribution.
pub fn evaluate(model: &MoEModel, test: &LabeledDataset, division: &ClassDivision) -> Result<EvalReport> {
    let c = model.num_classes();
    if division.num_classes() != c || test.num_classes() != c {
        return Err(Error::ShapeMismatch {
            context: "evaluation classes",
            expected: c.to_string(),
            actual: test.num_classes().to_string(),
        });
    }
    let idx: Vec<usize> = (0..test.len()).collect();
    let m = model.num_experts();
    let hits = idx
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| -> Result<Hits> {
            let (x, y) = test.batch(chunk);
            let out = model.forward(&x)?;
            let mut h = Hits::new(m, c);
            for (b, &t) in y.iter().enumerate() {
                h.seen[t] += 1;
                h.ensemble[t] += usize::from(argmax(out.ensemble.row(b).as_slice().expect("row")) == t);
                for (e, z) in out.logits.iter().enumerate() {
                    h.expert[e][t] += usize::from(argmax(z.row(b).as_slice().expect("row")) == t);
                }
            }
            Ok(h)
        })
        .try_reduce(|| Hits::new(m, c), |a, b| Ok(a.merge(b)))?;
    finish(hits, division)
}

/// Fraction of the classes of each division on which each expert attains the
/// best per-class accuracy. Ties split the class evenly among the tied
/// experts. `None` for empty divisions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertPreference {
    pub many: Option<Vec<f64>>,
    pub medium: Option<Vec<f64>>,
    pub few: Option<Vec<f64>>,
}

impl ExpertPreference {
    pub fn get(&self, d: Division) -> Option<&[f64]> {
        match d {
            Division::Many => self.many.as_deref(),
            Division::Medium => self.medium.as_deref(),
            Division::Few => self.few.as_deref(),
        }
    }
}

pub fn expert_preference(report: &EvalReport, division: &ClassDivision) -> ExpertPreference {
    let m = report.per_expert.len();
    let ratios = |members: &[usize]| -> Option<Vec<f64>> {
        if members.is_empty() || m == 0 {
            return None;
        }
        let mut share = vec![0.0; m];
        for &c in members {
            let best = report.per_expert.iter().map(|row| row[c]).fold(f64::NEG_INFINITY, f64::max);
            let winners: Vec<usize> = (0..m).filter(|&e| report.per_expert[e][c] == best).collect();
            for &e in &winners {
                share[e] += 1.0 / winners.len() as f64;
            }
        }
        Some(share.into_iter().map(|s| s / members.len() as f64).collect())
    };
    ExpertPreference {
        many: ratios(&division.many),
        medium: ratios(&division.medium),
        few: ratios(&division.few),
    }
}

/// Which logits the hardest-negative probability is read from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbabilitySource {
    /// Full softmax of the summed expert logits.
    #[default]
    Ensemble,
    /// Full softmax of one expert's logits.
    Expert(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardestNegativeHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Hardest-negative probability of every test sample, in test order.
    #[serde(skip)]
    pub values: Vec<f64>,
}

impl HardestNegativeHistogram {
    pub fn from_values(values: Vec<f64>, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::invalid("bins", "must be positive"));
        }
        let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
        let mut counts = vec![0; bins];
        for &p in &values {
            counts[((p * bins as f64) as usize).min(bins - 1)] += 1;
        }
        Ok(HardestNegativeHistogram { edges, counts, values })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Fraction of samples whose hardest-negative probability exceeds `t`.
    pub fn fraction_above(&self, t: f64) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().filter(|&&p| p > t).count() as f64 / self.values.len() as f64
    }
}

/// Largest non-target probability of one logit row.
pub fn hardest_negative_probability(logits: &[f64], label: usize) -> f64 {
    softmax(logits, 1.0)
        .into_iter()
        .enumerate()
        .filter(|&(c, _)| c != label)
        .map(|(_, p)| p)
        .fold(0.0, f64::max)
}

pub fn hardest_negative_hist(
    model: &MoEModel,
    test: &LabeledDataset,
    bins: usize,
    source: ProbabilitySource,
) -> Result<HardestNegativeHistogram> {
    if let ProbabilitySource::Expert(m) = source {
        if m >= model.num_experts() {
            return Err(Error::invalid("expert", format!("{m} out of range")));
        }
    }
    let idx: Vec<usize> = (0..test.len()).collect();
    let parts = idx
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| -> Result<Vec<f64>> {
            let (x, y) = test.batch(chunk);
            let out = model.forward(&x)?;
            let z = match source {
                ProbabilitySource::Ensemble => &out.ensemble,
                ProbabilitySource::Expert(m) => &out.logits[m],
            };
            Ok(y.iter()
                .enumerate()
                .map(|(b, &t)| hardest_negative_probability(z.row(b).as_slice().expect("row"), t))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    HardestNegativeHistogram::from_values(parts.concat(), bins)
}
