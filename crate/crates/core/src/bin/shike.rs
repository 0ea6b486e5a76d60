use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use shike::config::{apply_overrides, load_dataset, save_dataset, RunConfig, RunManifest};
use shike::data::{split_divisions, DatasetManifest, LabeledDataset, NoAugment};
use shike::eval::{
    ablation_run, evaluate, expert_count_sweep, expert_preference, hardest_negative_hist, AblationFlags,
    ProbabilitySource, TABLE4_ROWS,
};
use shike::losses::{decouple_logits, dkt_loss, elect_grand_teacher, loss_bsce, loss_ce, loss_mutual, LossGrad};
use shike::model::MoEModel;
use shike::train::{begin_stage2, run_stage1, run_stage2, write_metrics_csv, Stage, TrainState};
use shike::{checkpoint, report, Error, Result};

#[derive(Parser)]
#[command(name = "shike", version, about = "Long-tailed mixture-of-experts training and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat JSON config file. Keys not given fall back to the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting point for keys missing from the config file.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Override one config key, e.g. `--set epochs_stage1=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (defaults to the config's `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Small synthetic benchmark that trains in seconds.
    Desk,
    /// Library defaults (CIFAR-scale schedule).
    Default,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or import the long-tailed dataset and store it on disk.
    BuildData(ConfigArgs),
    /// Two-stage training with checkpoints and metric logs.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory written by build-data; built from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint (e.g. run stage 2 only from a stage-1 checkpoint).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the balanced test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Expert preference and hardest-negative histogram of a checkpoint.
    Diagnose {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// `ensemble` or `expert:<m>`.
        #[arg(long, default_value = "ensemble")]
        source: String,
    },
    /// Component ablation over several seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated row labels such as `single,moe,moe+dkf+mu+nt`; all seven rows by default.
        #[arg(long)]
        rows: Option<String>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Accuracy for several expert counts and depth arrangements.
    SweepExperts {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated arrangements such as `A,AB,ABC`; the expert count is the length.
        #[arg(long, default_value = "A,B,C,AB,BC,AC,ABC")]
        cells: String,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Evaluate every loss on logits read from a JSON file.
    Losses {
        /// JSON object `{"logits": [[...], ...], "label": y, "counts": [...], "temperature": t}`
        /// or an array of such objects.
        #[arg(long)]
        logits: PathBuf,
        /// Write the result here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(Some(p), &self.overrides),
            None => {
                let base = match self.preset {
                    Preset::Desk => RunConfig::desk(),
                    Preset::Default => RunConfig::from_value(json!({}))?,
                };
                let mut v = serde_json::to_value(&base)?;
                apply_overrides(&mut v, &self.overrides)?;
                RunConfig::from_value(v)
            }
        }
    }

    fn out_dir(&self, cfg: &RunConfig) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        Ok(dir)
    }
}

struct Data {
    train: LabeledDataset,
    test: LabeledDataset,
    manifest: DatasetManifest,
}

fn load_data(dir: Option<&Path>, cfg: &RunConfig) -> Result<Data> {
    match dir {
        Some(d) => {
            let (train, test, files) = load_dataset(d)?;
            if train.num_classes() != cfg.data.num_classes {
                return Err(Error::ShapeMismatch {
                    context: "dataset classes vs config num_classes",
                    expected: cfg.data.num_classes.to_string(),
                    actual: train.num_classes().to_string(),
                });
            }
            Ok(Data {
                train,
                test,
                manifest: files.manifest,
            })
        }
        None => {
            let (train, test) = cfg.data.build()?;
            let manifest = DatasetManifest::new(train.spec(), cfg.data.data_seed);
            Ok(Data { train, test, manifest })
        }
    }
}

fn print_json(v: &Value) {
    // A closed pipe (e.g. `| head`) is not an error worth reporting.
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(v).expect("json value"));
}

fn cmd_build_data(args: &ConfigArgs) -> Result<Value> {
    let cfg = args.load()?;
    let dir = args.out_dir(&cfg)?;
    let (train, test) = cfg.data.build()?;
    let files = save_dataset(&dir, &train, &test, cfg.data.data_seed)?;
    let mut m = RunManifest::new("build-data", &cfg, files.manifest.clone());
    for name in [shike::config::DATASET_JSON, shike::config::TRAIN_BIN, shike::config::TEST_BIN] {
        m.add(name, &dir, &dir.join(name))?;
    }
    m.write(&dir)?;
    Ok(json!({
        "dir": dir,
        "manifest": files.manifest,
        "train_sha256": files.train_sha256,
        "test_sha256": files.test_sha256,
    }))
}

fn cmd_train(args: &ConfigArgs, data: Option<&Path>, resume: Option<&Path>) -> Result<Value> {
    let cfg = args.load()?;
    let dir = args.out_dir(&cfg)?;
    let d = load_data(data, &cfg)?;
    let division = split_divisions(d.train.spec());
    let mut state = match resume {
        Some(p) => checkpoint::load_for_classes(p, d.train.num_classes())?,
        None => TrainState::new(MoEModel::new(cfg.model_config(d.train.input_shape())?, cfg.train.seed)?),
    };
    let mut m = RunManifest::new("train", &cfg, d.manifest.clone());
    let mut out = json!({});

    if state.stage == Stage::Representation {
        run_stage1(&mut state, &d.train, &cfg.train, None, &NoAugment)?;
        let p = dir.join("stage1.ckpt");
        checkpoint::save(&state, &p)?;
        m.add("stage1_checkpoint", &dir, &p)?;
        let r = evaluate(&state.model, &d.test, &division)?;
        let p = dir.join("report_stage1.json");
        report::write_json(&r, &p)?;
        m.add("stage1_report", &dir, &p)?;
        out["stage1_accuracy"] = json!(r.overall);
        begin_stage2(&mut state, &cfg.train)?;
    }
    run_stage2(&mut state, &d.train, &cfg.train, None)?;
    let p = dir.join("stage2.ckpt");
    checkpoint::save(&state, &p)?;
    m.add("stage2_checkpoint", &dir, &p)?;

    let r = evaluate(&state.model, &d.test, &division)?;
    let p = dir.join("report.json");
    report::write_json(&r, &p)?;
    m.add("report", &dir, &p)?;
    let p = dir.join("metrics.csv");
    let f = fs::File::create(&p).map_err(|e| Error::Io {
        path: p.clone(),
        source: e,
    })?;
    write_metrics_csv(&state.history, f)?;
    m.add("metrics", &dir, &p)?;
    let p = dir.join("config.json");
    report::write_text(&cfg.to_json_pretty(), &p)?;
    m.add("config", &dir, &p)?;
    m.write(&dir)?;

    out["accuracy"] = json!(r.overall);
    out["divisions"] = json!(r.divisions);
    out["dir"] = json!(dir);
    Ok(out)
}

fn cmd_eval(args: &ConfigArgs, ckpt: &Path, data: Option<&Path>) -> Result<Value> {
    let cfg = args.load()?;
    let dir = args.out_dir(&cfg)?;
    let d = load_data(data, &cfg)?;
    let state = checkpoint::load_for_classes(ckpt, d.test.num_classes())?;
    let division = split_divisions(d.train.spec());
    let r = evaluate(&state.model, &d.test, &division)?;
    let mut m = RunManifest::new("eval", &cfg, d.manifest);
    let p = dir.join("eval.json");
    report::write_json(&r, &p)?;
    m.add("report", &dir, &p)?;
    let p = dir.join("per_class.csv");
    report::write_per_class_csv(&r, &division, &p)?;
    m.add("per_class_csv", &dir, &p)?;
    let p = dir.join("per_class.svg");
    report::write_text(&report::per_class_svg(&r, "Per-class accuracy"), &p)?;
    m.add("per_class_plot", &dir, &p)?;
    m.write(&dir)?;
    Ok(json!({ "accuracy": r.overall, "divisions": r.divisions, "samples": r.sample_count }))
}

fn parse_source(s: &str) -> Result<ProbabilitySource> {
    if s == "ensemble" {
        return Ok(ProbabilitySource::Ensemble);
    }
    s.strip_prefix("expert:")
        .and_then(|m| m.parse().ok())
        .map(ProbabilitySource::Expert)
        .ok_or_else(|| Error::InvalidArgument {
            field: "source",
            reason: format!("expected `ensemble` or `expert:<m>`, got {s:?}"),
        })
}

fn cmd_diagnose(args: &ConfigArgs, ckpt: &Path, data: Option<&Path>, bins: usize, source: &str) -> Result<Value> {
    let cfg = args.load()?;
    let source = parse_source(source)?;
    let dir = args.out_dir(&cfg)?;
    let d = load_data(data, &cfg)?;
    let state = checkpoint::load_for_classes(ckpt, d.test.num_classes())?;
    let division = split_divisions(d.train.spec());
    let r = evaluate(&state.model, &d.test, &division)?;
    let pref = expert_preference(&r, &division);
    let hist = hardest_negative_hist(&state.model, &d.test, bins, source)?;
    let above = hist.fraction_above(0.5);

    let mut m = RunManifest::new("diagnose", &cfg, d.manifest);
    let p = dir.join("preference.json");
    report::write_json(&pref, &p)?;
    m.add("preference", &dir, &p)?;
    let p = dir.join("preference.csv");
    report::write_preference_csv(&pref, &p)?;
    m.add("preference_csv", &dir, &p)?;
    let p = dir.join("hardest_negative.json");
    report::write_json(&json!({ "histogram": hist, "fraction_above_half": above }), &p)?;
    m.add("hardest_negative", &dir, &p)?;
    let p = dir.join("hardest_negative.csv");
    report::write_histogram_csv(&hist, &p)?;
    m.add("hardest_negative_csv", &dir, &p)?;
    let p = dir.join("hardest_negative.svg");
    report::write_text(&report::histogram_svg(&hist, "Hardest-negative probability"), &p)?;
    m.add("hardest_negative_plot", &dir, &p)?;
    let p = dir.join("per_class.csv");
    report::write_per_class_csv(&r, &division, &p)?;
    m.add("per_class_csv", &dir, &p)?;
    m.write(&dir)?;
    Ok(json!({ "preference": pref, "fraction_above_half": above, "accuracy": r.overall }))
}

fn cmd_ablate(args: &ConfigArgs, rows: Option<&str>, seeds: usize) -> Result<Value> {
    let cfg = args.load()?;
    let dir = args.out_dir(&cfg)?;
    let rows: Vec<AblationFlags> = match rows {
        Some(s) => s.split(',').map(|l| AblationFlags::parse(l.trim())).collect::<Result<_>>()?,
        None => TABLE4_ROWS.to_vec(),
    };
    let table = ablation_run(&cfg, &rows, seeds)?;
    let mut m = RunManifest::new("ablate", &cfg, DatasetManifest::new(&cfg.data.spec()?, cfg.data.data_seed));
    let p = dir.join("ablation.json");
    report::write_json(&table, &p)?;
    m.add("table", &dir, &p)?;
    let p = dir.join("ablation.csv");
    report::write_ablation_csv(&table, &p)?;
    m.add("table_csv", &dir, &p)?;
    let labels: Vec<String> = table.rows.iter().map(|r| r.label.clone()).collect();
    let means: Vec<f64> = table.rows.iter().map(|r| r.mean).collect();
    let p = dir.join("ablation.svg");
    report::write_text(&report::bar_chart_svg("Mean balanced accuracy", &labels, &means, 1.0), &p)?;
    m.add("plot", &dir, &p)?;
    m.write(&dir)?;
    Ok(json!(table
        .rows
        .iter()
        .map(|r| json!({ "label": r.label, "mean": r.mean, "accuracies": r.accuracies }))
        .collect::<Vec<_>>()))
}

fn cmd_sweep(args: &ConfigArgs, cells: &str, seeds: usize) -> Result<Value> {
    let cfg = args.load()?;
    let dir = args.out_dir(&cfg)?;
    let cells: Vec<(usize, String)> = cells
        .split(',')
        .map(|a| {
            let a = a.trim().to_string();
            (a.chars().filter(|c| !c.is_whitespace()).count(), a)
        })
        .collect();
    let table = expert_count_sweep(&cfg, &cells, seeds)?;
    let mut m = RunManifest::new("sweep-experts", &cfg, DatasetManifest::new(&cfg.data.spec()?, cfg.data.data_seed));
    let p = dir.join("sweep.json");
    report::write_json(&table, &p)?;
    m.add("table", &dir, &p)?;
    let p = dir.join("sweep.csv");
    report::write_sweep_csv(&table, &p)?;
    m.add("table_csv", &dir, &p)?;
    let labels: Vec<String> = table.cells.iter().map(|c| c.arrangement.clone()).collect();
    let means: Vec<f64> = table.cells.iter().map(|c| c.mean).collect();
    let p = dir.join("sweep.svg");
    report::write_text(&report::bar_chart_svg("Mean accuracy by arrangement", &labels, &means, 1.0), &p)?;
    m.add("plot", &dir, &p)?;
    m.write(&dir)?;
    let best: Vec<Value> = (1..=cells.iter().map(|c| c.0).max().unwrap_or(0))
        .filter_map(|k| table.best_mean(k).map(|b| json!({ "experts": k, "best_mean": b })))
        .collect();
    Ok(json!({ "cells": table.cells, "best": best }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LogitSample {
    logits: Vec<Vec<f64>>,
    label: usize,
    #[serde(default)]
    counts: Option<Vec<usize>>,
    #[serde(default = "one")]
    temperature: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LogitFile {
    One(LogitSample),
    Many(Vec<LogitSample>),
}

#[derive(Serialize)]
struct LossReport {
    value: f64,
    grads: Vec<Vec<f64>>,
}

impl From<LossGrad> for LossReport {
    fn from(l: LossGrad) -> Self {
        LossReport {
            value: l.value,
            grads: l.grads,
        }
    }
}

fn sample_losses(s: &LogitSample) -> Result<Value> {
    let z: Vec<&[f64]> = s.logits.iter().map(Vec::as_slice).collect();
    let dec = z.iter().map(|v| decouple_logits(v, s.label)).collect::<Result<Vec<_>>>()?;
    let teacher = elect_grand_teacher(&dec)?;
    let mut out = json!({
        "ce": LossReport::from(loss_ce(&z, s.label)?),
        "mu": LossReport::from(loss_mutual(&z, s.temperature)?),
        "nt": LossReport::from(dkt_loss(&z, s.label, s.temperature)?),
        "grand_teacher": { "logits": teacher.logits, "consensus_index": teacher.consensus_index,
                           "consensus_class": dec[0].index_map[teacher.consensus_index] },
    });
    if let Some(c) = &s.counts {
        out["bsce"] = json!(LossReport::from(loss_bsce(&z, s.label, c)?));
    }
    Ok(out)
}

fn cmd_losses(path: &Path, out: Option<&Path>) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let parsed: LogitFile = serde_json::from_str(&text)?;
    let v = match parsed {
        LogitFile::One(s) => sample_losses(&s)?,
        LogitFile::Many(v) => Value::Array(v.iter().map(sample_losses).collect::<Result<_>>()?),
    };
    if let Some(p) = out {
        report::write_json(&v, p)?;
    }
    Ok(v)
}

fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::BuildData(a) => cmd_build_data(&a),
        Command::Train { cfg, data, resume } => cmd_train(&cfg, data.as_deref(), resume.as_deref()),
        Command::Eval { cfg, checkpoint, data } => cmd_eval(&cfg, &checkpoint, data.as_deref()),
        Command::Diagnose {
            cfg,
            checkpoint,
            data,
            bins,
            source,
        } => cmd_diagnose(&cfg, &checkpoint, data.as_deref(), bins, &source),
        Command::Ablate { cfg, rows, seeds } => cmd_ablate(&cfg, rows.as_deref(), seeds),
        Command::SweepExperts { cfg, cells, seeds } => cmd_sweep(&cfg, &cells, seeds),
        Command::Losses { logits, out } => cmd_losses(&logits, out.as_deref()),
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = write!(std::io::stdout(), "{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string()),
    };
    match run(cli) {
        Ok(v) => {
            print_json(&v);
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
