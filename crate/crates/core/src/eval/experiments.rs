//! Component ablations and expert-count sweeps.
//!
//! Every cell of a table is a full two-stage run; seed `k` shifts both the
//! data seed and the training seed of the base config by `k`, so all rows
//! of a table see the same `k`-th dataset.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, hardest_negative_hist, EvalReport, ProbabilitySource};
use crate::config::RunConfig;
use crate::data::{split_divisions, ClassDivision, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::MoEModel;
use crate::train::{begin_stage2, run_stage2, train_stage1, TrainState};

/// The config used for seed index `k`.
pub fn seeded(base: &RunConfig, k: usize) -> RunConfig {
    let mut cfg = base.clone();
    cfg.data.data_seed = base.data.data_seed.wrapping_add(k as u64);
    cfg.train.seed = base.train.seed.wrapping_add(k as u64);
    cfg
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub state: TrainState,
    /// Ensemble evaluation of the stage-1 network with its original heads.
    pub stage1: EvalReport,
    pub report: EvalReport,
    pub division: ClassDivision,
}

/// Train both stages on `train` and evaluate on `test`.
pub fn run_experiment(cfg: &RunConfig, train: &LabeledDataset, test: &LabeledDataset) -> Result<ExperimentOutcome> {
    let model = MoEModel::new(cfg.model_config(train.input_shape())?, cfg.train.seed)?;
    let division = split_divisions(train.spec());
    let mut state = train_stage1(model, train, &cfg.train)?;
    let stage1 = evaluate(&state.model, test, &division)?;
    begin_stage2(&mut state, &cfg.train)?;
    run_stage2(&mut state, train, &cfg.train, None)?;
    let report = evaluate(&state.model, test, &division)?;
    Ok(ExperimentOutcome {
        state,
        stage1,
        report,
        division,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_moe: bool,
    pub use_dkf: bool,
    pub use_mu: bool,
    pub use_nt: bool,
}

const fn flags(use_moe: bool, use_dkf: bool, use_mu: bool, use_nt: bool) -> AblationFlags {
    AblationFlags {
        use_moe,
        use_dkf,
        use_mu,
        use_nt,
    }
}

/// The seven component combinations of the standard ablation, baseline first
/// and full model last.
pub const TABLE4_ROWS: [AblationFlags; 7] = [
    flags(false, false, false, false),
    flags(true, false, false, false),
    flags(true, true, false, false),
    flags(true, true, true, false),
    flags(true, true, false, true),
    flags(true, false, true, true),
    flags(true, true, true, true),
];

impl AblationFlags {
    pub const FULL: AblationFlags = flags(true, true, true, true);
    pub const SINGLE: AblationFlags = flags(false, false, false, false);
    pub const PLAIN_MOE: AblationFlags = flags(true, false, false, false);

    pub fn validate(&self) -> Result<()> {
        if !self.use_moe && (self.use_dkf || self.use_mu || self.use_nt) {
            return Err(Error::invalid("ablation flags", "dkf, mu and nt require moe"));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        if !self.use_moe {
            return "single".into();
        }
        let mut parts = vec!["moe"];
        for (on, name) in [(self.use_dkf, "dkf"), (self.use_mu, "mu"), (self.use_nt, "nt")] {
            if on {
                parts.push(name);
            }
        }
        parts.join("+")
    }

    /// Parse a label produced by [`AblationFlags::label`].
    pub fn parse(label: &str) -> Result<Self> {
        let mut f = flags(false, false, false, false);
        if label.trim() == "single" {
            return Ok(f);
        }
        for part in label.split('+').map(str::trim) {
            match part {
                "moe" => f.use_moe = true,
                "dkf" => f.use_dkf = true,
                "mu" => f.use_mu = true,
                "nt" => f.use_nt = true,
                other => return Err(Error::invalid("ablation flags", format!("unknown component {other:?}"))),
            }
        }
        f.validate()?;
        Ok(f)
    }

    /// The base config with only the flagged components enabled. Everything
    /// else (data, widths, schedule, seeds) is left untouched.
    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        self.validate()?;
        let mut cfg = base.clone();
        if self.use_moe {
            if base.model.num_experts < 2 {
                return Err(Error::invalid("num_experts", "the moe rows need at least two experts"));
            }
        } else {
            cfg.model.num_experts = 1;
            cfg.model.arrangement = None;
        }
        cfg.model.fusion = self.use_dkf;
        if !self.use_nt {
            cfg.train.weights.alpha = 0.0;
        }
        if !self.use_mu {
            cfg.train.weights.beta = 0.0;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub flags: AblationFlags,
    pub label: String,
    /// Balanced test accuracy per seed.
    pub accuracies: Vec<f64>,
    /// Fraction of test samples whose hardest negative exceeds 0.5, per seed.
    pub hard_negative_rate: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, f: AblationFlags) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.flags == f)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn datasets(base: &RunConfig, seeds: usize) -> Result<Vec<(LabeledDataset, LabeledDataset)>> {
    (0..seeds).into_par_iter().map(|k| seeded(base, k).data.build()).collect()
}

/// Train and evaluate every row for `seeds` seeds.
pub fn ablation_run(base: &RunConfig, rows: &[AblationFlags], seeds: usize) -> Result<AblationTable> {
    if seeds == 0 {
        return Err(Error::invalid("seeds", "must be positive"));
    }
    let configs = rows.iter().map(|f| f.apply(base)).collect::<Result<Vec<_>>>()?;
    let data = datasets(base, seeds)?;
    let cells: Vec<(usize, usize)> = (0..rows.len()).flat_map(|r| (0..seeds).map(move |k| (r, k))).collect();
    let results = cells
        .par_iter()
        .map(|&(r, k)| -> Result<(f64, f64)> {
            let cfg = seeded(&configs[r], k);
            let (train, test) = &data[k];
            let out = run_experiment(&cfg, train, test)?;
            let h = hardest_negative_hist(&out.state.model, test, 20, ProbabilitySource::Ensemble)?;
            Ok((out.report.overall, h.fraction_above(0.5)))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = rows
        .iter()
        .enumerate()
        .map(|(r, f)| {
            let cell = &results[r * seeds..(r + 1) * seeds];
            let accuracies: Vec<f64> = cell.iter().map(|c| c.0).collect();
            AblationRow {
                flags: *f,
                label: f.label(),
                mean: mean(&accuracies),
                hard_negative_rate: cell.iter().map(|c| c.1).collect(),
                accuracies,
            }
        })
        .collect();
    Ok(AblationTable { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub num_experts: usize,
    pub arrangement: String,
    pub accuracies: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    /// The best mean accuracy among arrangements with `m` experts.
    pub fn best_mean(&self, m: usize) -> Option<f64> {
        self.cells
            .iter()
            .filter(|c| c.num_experts == m)
            .map(|c| c.mean)
            .max_by(f64::total_cmp)
    }
}

/// Train the full model for each `(M, arrangement)` cell.
pub fn expert_count_sweep(base: &RunConfig, cells: &[(usize, String)], seeds: usize) -> Result<SweepTable> {
    if seeds == 0 {
        return Err(Error::invalid("seeds", "must be positive"));
    }
    let configs = cells
        .iter()
        .map(|(m, a)| {
            let mut cfg = base.clone();
            cfg.model.num_experts = *m;
            cfg.model.arrangement = Some(a.clone());
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let data = datasets(base, seeds)?;
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..seeds).map(move |k| (c, k))).collect();
    let acc = jobs
        .par_iter()
        .map(|&(c, k)| {
            let (train, test) = &data[k];
            run_experiment(&seeded(&configs[c], k), train, test).map(|o| o.report.overall)
        })
        .collect::<Result<Vec<_>>>()?;
    let cells = cells
        .iter()
        .enumerate()
        .map(|(i, (m, a))| {
            let accuracies = acc[i * seeds..(i + 1) * seeds].to_vec();
            SweepCell {
                num_experts: *m,
                arrangement: a.split_whitespace().collect(),
                mean: mean(&accuracies),
                accuracies,
            }
        })
        .collect();
    Ok(SweepTable { cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_validate_and_roundtrip() {
        assert!(flags(false, true, false, false).validate().is_err());
        for f in TABLE4_ROWS {
            f.validate().unwrap();
            assert_eq!(AblationFlags::parse(&f.label()).unwrap(), f);
        }
        assert!(AblationFlags::parse("dkf").is_err());
    }

    #[test]
    fn apply_touches_only_flagged_parts() {
        let base = RunConfig::default();
        let single = AblationFlags::SINGLE.apply(&base).unwrap();
        assert_eq!(single.model.num_experts, 1);
        assert!(!single.model.fusion);
        assert_eq!(single.train.weights.alpha, 0.0);
        assert_eq!(single.train.weights.beta, 0.0);
        assert_eq!(single.train.epochs_stage1, base.train.epochs_stage1);
        let full = AblationFlags::FULL.apply(&base).unwrap();
        assert_eq!(full, base);
    }

    #[test]
    fn sweep_rejects_length_mismatch() {
        let base = RunConfig::default();
        assert!(expert_count_sweep(&base, &[(2, "ABC".into())], 1).is_err());
    }
}
