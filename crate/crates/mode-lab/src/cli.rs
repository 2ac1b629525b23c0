//! Command-line entry points: dataset generation, training, evaluation,
//! expert-count sweeps, routing ablations, and merged comparison tables.
//!
//! Every command reads a plain TOML experiment config (unknown keys are
//! rejected) and derives all randomness from its master seed, so repeating
//! a command reproduces its outputs byte for byte. Commands never modify a
//! generated dataset; they only read it and write under the output root or
//! the given run directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::checkpoint;
use crate::config::{EvalSettings, ExperimentConfig};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::model::ModelConfig;
use crate::synthdata::{self, MultiTaskDataset, Split};
use crate::training::{
    self, mean_and_stderr, separate_system_accuracy, Regime, RunResult, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "mode-lab",
    version,
    about = "Mixture-of-DoRA-experts adaptation lab: generate synthetic multi-task data, \
             train adapter regimes over a frozen backbone, and evaluate calibration."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset described by the config's [data]
    /// section and write it under `<output_root>/dataset/`.
    Generate(GenerateArgs),
    /// Train one regime; writes one run directory per seed plus an
    /// aggregated result.json.
    Train(TrainArgs),
    /// Evaluate a finished run's selected checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train the routed mixture across several expert counts and tabulate
    /// mean accuracy per count.
    SweepExperts(SweepExpertsArgs),
    /// Routing ablations: as configured, temperature pinned to 1, and load
    /// balancing disabled.
    Ablate(AblateArgs),
    /// Merge trained-run directories into a tasks-by-regimes accuracy
    /// table (mean and standard error over seeds).
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Adaptation regime to train.
    #[arg(long, value_enum)]
    pub regime: RegimeArg,
    /// Override the config's seed list, e.g. `--seeds 1,2,3`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Dataset directory (defaults to `<output_root>/dataset`).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory created by `train` (contains config.json and
    /// best.ckpt).
    pub run_dir: PathBuf,
    /// Dataset split to evaluate.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Dataset directory override (defaults to the directory recorded in
    /// the run's config snapshot).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Restrict evaluation to one task.
    #[arg(long)]
    pub task: Option<usize>,
    /// Override the number of equal-width confidence bins.
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepExpertsArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Expert counts to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 4, 8, 10, 16])]
    pub experts: Vec<usize>,
    /// Train up to N sweep points concurrently (each run stays internally
    /// deterministic).
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    /// Dataset directory (defaults to `<output_root>/dataset`).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset directory (defaults to `<output_root>/dataset`).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories containing result.json, or parents of such
    /// directories (e.g. the output root holding separate-task*).
    #[arg(required = true)]
    pub run_dirs: Vec<PathBuf>,
    /// Also write the table as CSV to this path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegimeArg {
    Separate,
    Joint,
    JointMode,
    TwoStage,
}

impl RegimeArg {
    fn to_regime(self) -> Regime {
        match self {
            RegimeArg::Separate => Regime::Separate,
            RegimeArg::Joint => Regime::Joint,
            RegimeArg::JointMode => Regime::JointMode,
            RegimeArg::TwoStage => Regime::TwoStage,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Dev,
    Test,
}

impl SplitArg {
    fn to_split(self) -> Split {
        match self {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
    fn tag(self) -> &'static str {
        self.to_split().tag()
    }
}

/// Dispatch one parsed invocation.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => cmd_generate(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::SweepExperts(args) => cmd_sweep_experts(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::Report(args) => cmd_report(&args),
    }
}

/// Load the dataset a command should train or evaluate on, refusing
/// datasets generated from a different [data] section.
fn load_dataset(cfg: &ExperimentConfig, explicit: Option<&Path>) -> Result<(MultiTaskDataset, PathBuf)> {
    let dir = explicit.map(Path::to_path_buf).unwrap_or_else(|| cfg.dataset_dir());
    if !dir.join("manifest.json").is_file() {
        return Err(Error::config(format!(
            "no dataset at {} — run `mode-lab generate --config <file>` first (or pass --dataset)",
            dir.display()
        )));
    }
    let ds = MultiTaskDataset::load(&dir)?;
    let want = cfg.data.config_hash();
    let got = ds.cfg.config_hash();
    if got != want {
        return Err(Error::config(format!(
            "dataset at {} was generated from a different data config (hash {}… vs expected {}…); \
             regenerate it or fix the config",
            dir.display(),
            &got[..12],
            &want[..12]
        )));
    }
    Ok((ds, dir))
}

/// Echo the full resolved experiment config into every seed run directory
/// so each run carries everything needed to reproduce it.
fn echo_experiment(cfg: &ExperimentConfig, results: &[RunResult]) -> Result<()> {
    let text = cfg.to_toml()?;
    for result in results {
        for seed_run in &result.seed_runs {
            if let Some(dir) = &seed_run.run_dir {
                fs::write(dir.join("experiment.toml"), &text)?;
            }
        }
    }
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let dir = cfg.dataset_dir();
    let manifest_path = dir.join("manifest.json");
    if manifest_path.is_file() {
        let existing = MultiTaskDataset::load(&dir)?;
        if existing.cfg.config_hash() != cfg.data.config_hash() {
            return Err(Error::config(format!(
                "{} already holds a dataset from a different data config; \
                 choose another output_root or remove it explicitly",
                dir.display()
            )));
        }
        // Same config: regeneration is deterministic, so rewriting below
        // reproduces the existing files byte for byte.
    }
    let ds = synthdata::generate(&cfg.data)?;
    let manifest = ds.save(&dir)?;
    println!("dataset {}", dir.display());
    println!("config_hash {}", manifest.config_hash);
    println!("records {}", manifest.n_records);
    println!(
        "splits train={} dev={} test={}",
        manifest.split_sizes[0], manifest.split_sizes[1], manifest.split_sizes[2]
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let (ds, data_dir) = load_dataset(&cfg, args.dataset.as_deref())?;
    let mut tc = cfg.train.clone();
    tc.regime = args.regime.to_regime();
    if let Some(seeds) = &args.seeds {
        if seeds.is_empty() {
            return Err(Error::config("--seeds needs at least one value"));
        }
        tc.seeds = seeds.clone();
    }
    tc.dataset_dir = Some(fs::canonicalize(&data_dir).unwrap_or(data_dir));
    tc.validate()?;

    let results: Vec<RunResult> = match tc.regime {
        Regime::Separate => training::train_separate(&tc, &cfg.backbone, &ds, Some(&cfg.output_root))?,
        Regime::Joint | Regime::JointMode => {
            let out = cfg.output_root.join(tc.regime.label());
            vec![training::train_joint(
                &tc,
                &cfg.backbone,
                &ds,
                tc.regime == Regime::JointMode,
                Some(&out),
            )?]
        }
        Regime::TwoStage => {
            let out = cfg.output_root.join(tc.regime.label());
            vec![training::train_two_stage(&tc, &cfg.backbone, &ds, Some(&out))?]
        }
    };
    echo_experiment(&cfg, &results)?;

    for result in &results {
        println!(
            "{} test_accuracy {:.4} stderr {:.4}",
            result.label, result.mean_accuracy, result.stderr_accuracy
        );
    }
    if tc.regime == Regime::Separate {
        let (mean, stderr) = separate_system_accuracy(&results)?;
        println!("separate-system test_accuracy {:.4} stderr {:.4}", mean, stderr);
    }
    Ok(())
}

/// The per-run config snapshot written by training, read back for
/// evaluation.
#[derive(Debug, Deserialize)]
struct RunMeta {
    train: TrainConfig,
    #[allow(dead_code)]
    model: ModelConfig,
    #[allow(dead_code)]
    seed: u64,
    dataset_config_hash: String,
}

/// Evaluation settings for a run: the echoed experiment config if present,
/// defaults otherwise.
fn eval_settings_for(run_dir: &Path) -> Result<EvalSettings> {
    let echoed = run_dir.join("experiment.toml");
    if echoed.is_file() {
        let text = fs::read_to_string(&echoed)?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {}", echoed.display(), e)))?;
        cfg.eval.validate()?;
        return Ok(cfg.eval);
    }
    Ok(EvalSettings::default())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let run_dir = &args.run_dir;
    let meta_path = run_dir.join("config.json");
    if !meta_path.is_file() {
        return Err(Error::config(format!(
            "{} is not a run directory (missing config.json)",
            run_dir.display()
        )));
    }
    let meta: RunMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)
        .map_err(|e| Error::Format(format!("{}: {}", meta_path.display(), e)))?;

    let data_dir = args
        .dataset
        .clone()
        .or_else(|| meta.train.dataset_dir.clone())
        .ok_or_else(|| {
            Error::config("run config records no dataset directory; pass --dataset".to_string())
        })?;
    if !data_dir.join("manifest.json").is_file() {
        return Err(Error::config(format!(
            "no dataset at {} — run `mode-lab generate --config <file>` first (or pass --dataset)",
            data_dir.display()
        )));
    }
    let ds = MultiTaskDataset::load(&data_dir)?;
    let got = ds.cfg.config_hash();
    if got != meta.dataset_config_hash {
        return Err(Error::config(format!(
            "dataset at {} (hash {}…) is not the one this run trained on (hash {}…)",
            data_dir.display(),
            &got[..12],
            &meta.dataset_config_hash[..12]
        )));
    }

    // A Separate-regime run only adapted its own task; refuse cross-task use.
    let task = match (meta.train.task_filter, args.task) {
        (Some(own), Some(asked)) if own != asked => {
            return Err(Error::config(format!(
                "this run adapted task {} only; it cannot be evaluated on task {}",
                own, asked
            )));
        }
        (Some(own), _) => Some(own),
        (None, asked) => asked,
    };
    if let Some(t) = task {
        if t >= ds.cfg.n_tasks {
            return Err(Error::index("eval", format!("task {} of {}", t, ds.cfg.n_tasks)));
        }
    }

    let ckpt_path = run_dir.join("best.ckpt");
    if !ckpt_path.is_file() {
        return Err(Error::config(format!(
            "{} has no best.ckpt; the run did not finish training",
            run_dir.display()
        )));
    }
    let (model, store) = checkpoint::load(&ckpt_path)?;

    let split = args.split.to_split();
    let indices: Vec<usize> = ds
        .records_in(split)
        .into_iter()
        .filter(|&i| task.map(|t| ds.records[i].task_id == t).unwrap_or(true))
        .collect();
    if indices.is_empty() {
        return Err(Error::domain("eval", format!("no records in the {} split", split.tag())));
    }

    let outs =
        training::eval_examples(&model, &store, &ds, &indices, meta.train.batch_size, false)?;
    let records = eval::records_from_outputs(&outs);
    let routing_rows: Option<Vec<(usize, Vec<f64>)>> = if outs.iter().all(|o| o.routing.is_some()) {
        Some(outs.iter().map(|o| (o.task_id, o.routing.clone().unwrap())).collect())
    } else {
        None
    };

    let mut settings = eval_settings_for(run_dir)?;
    if let Some(bins) = args.bins {
        settings.n_bins = bins;
        settings.validate()?;
    }
    let report = eval::full_report(
        &records,
        routing_rows.as_deref(),
        model.cfg.n_tasks,
        settings.n_bins,
        &settings.rejection_rates,
    )?;

    write_eval_artifacts(run_dir, args.split.tag(), &records, &report)?;
    println!(
        "eval split={} n={} accuracy={:.4}",
        args.split.tag(),
        report.n_records,
        report.averaged_accuracy
    );
    let opt = |v: Option<f64>| match v {
        Some(v) => format!("{:.4}", v),
        None => "undefined".to_string(),
    };
    println!(
        "ece={:.4} mce={:.4} nll={:.4} nce={} auroc={} auprc={}",
        report.ece,
        report.mce,
        report.nll,
        opt(report.nce),
        opt(report.auroc),
        opt(report.auprc)
    );
    Ok(())
}

fn write_eval_artifacts(
    run_dir: &Path,
    split_tag: &str,
    records: &[eval::PredictionRecord],
    report: &EvalReport,
) -> Result<()> {
    let report_path = run_dir.join(format!("eval_{}.json", split_tag));
    fs::write(
        &report_path,
        serde_json::to_string_pretty(report)
            .map_err(|e| Error::Format(format!("report encode: {}", e)))?,
    )?;
    println!("report {}", report_path.display());

    let mut pred_csv = String::from("participant_id,task_id,label,pred,confidence,p1,correct\n");
    for r in records {
        pred_csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.participant_id,
            r.task_id,
            r.label,
            r.pred,
            r.confidence,
            r.p1,
            u8::from(r.correct())
        ));
    }
    let pred_path = run_dir.join(format!("predictions_{}.csv", split_tag));
    fs::write(&pred_path, pred_csv)?;
    println!("predictions {}", pred_path.display());

    let mut rej_csv = String::from("rate,retained,accuracy\n");
    for p in &report.rejection_curve {
        rej_csv.push_str(&format!("{},{},{}\n", p.rate, p.retained, p.accuracy));
    }
    let rej_path = run_dir.join(format!("rejection_{}.csv", split_tag));
    fs::write(&rej_path, rej_csv)?;
    println!("rejection {}", rej_path.display());

    if let Some(activation) = &report.activation {
        let n_experts = activation.iter().flatten().map(Vec::len).next().unwrap_or(0);
        let mut heat_csv = String::from("task");
        for i in 0..n_experts {
            heat_csv.push_str(&format!(",w{}", i));
        }
        heat_csv.push('\n');
        for (t, row) in activation.iter().enumerate() {
            if let Some(weights) = row {
                heat_csv.push_str(&t.to_string());
                for w in weights {
                    heat_csv.push_str(&format!(",{}", w));
                }
                heat_csv.push('\n');
            }
        }
        let heat_path = run_dir.join(format!("heatmap_{}.csv", split_tag));
        fs::write(&heat_path, heat_csv)?;
        println!("heatmap {}", heat_path.display());
    }
    Ok(())
}

fn cmd_sweep_experts(args: &SweepExpertsArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let (ds, data_dir) = load_dataset(&cfg, args.dataset.as_deref())?;
    let mut tc = cfg.train.clone();
    tc.regime = Regime::JointMode;
    tc.dataset_dir = Some(fs::canonicalize(&data_dir).unwrap_or(data_dir));
    tc.validate()?;
    let out = cfg.output_root.join("sweep");
    let rows = training::sweep_experts(
        &tc,
        &cfg.backbone,
        &ds,
        &args.experts,
        Some(&out),
        args.parallel.max(1),
    )?;
    println!("n_experts  mean_accuracy  stderr");
    for row in &rows {
        println!("{:<9}  {:<13.4}  {:.4}", row.n_experts, row.mean_accuracy, row.stderr_accuracy);
    }
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let (ds, data_dir) = load_dataset(&cfg, args.dataset.as_deref())?;
    let mut tc = cfg.train.clone();
    tc.regime = Regime::JointMode;
    tc.dataset_dir = Some(fs::canonicalize(&data_dir).unwrap_or(data_dir));
    tc.validate()?;
    let out = cfg.output_root.join("ablations");
    let rows = training::ablate(&tc, &cfg.backbone, &ds, Some(&out))?;
    println!("variant            mean_accuracy  stderr  final_routing_entropy");
    for row in &rows {
        println!(
            "{:<17}  {:<13.4}  {:<6.4}  {:.4}",
            row.label, row.mean_accuracy, row.stderr_accuracy, row.mean_final_entropy
        );
    }
    Ok(())
}

fn read_result(path: &Path) -> Result<RunResult> {
    serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))
}

/// Gather RunResults from the given paths: either directories holding a
/// result.json, or parents whose children do (scanned in sorted order).
fn collect_results(paths: &[PathBuf]) -> Result<Vec<RunResult>> {
    let mut results = Vec::new();
    for path in paths {
        let direct = path.join("result.json");
        if direct.is_file() {
            results.push(read_result(&direct)?);
            continue;
        }
        let mut found = Vec::new();
        if path.is_dir() {
            let mut children: Vec<PathBuf> =
                fs::read_dir(path)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
            children.sort();
            for child in children {
                let nested = child.join("result.json");
                if nested.is_file() {
                    found.push(read_result(&nested)?);
                }
            }
        }
        if found.is_empty() {
            return Err(Error::config(format!(
                "{}: no result.json found; pass directories created by `mode-lab train`",
                path.display()
            )));
        }
        results.extend(found);
    }
    Ok(results)
}

/// One column of the comparison table. The per-task Separate runs merge
/// into a single "separate" system column.
struct ReportColumn {
    label: String,
    results: Vec<RunResult>,
}

fn build_columns(results: Vec<RunResult>) -> Result<Vec<ReportColumn>> {
    let mut columns: Vec<ReportColumn> = Vec::new();
    for result in results {
        let key = if result.label.starts_with("separate-task") {
            "separate".to_string()
        } else {
            result.label.clone()
        };
        match columns.iter_mut().find(|c| c.label == key) {
            Some(col) if key == "separate" => col.results.push(result),
            Some(_) => {
                return Err(Error::config(format!(
                    "two runs share the label {:?}; report each regime once",
                    key
                )))
            }
            None => columns.push(ReportColumn { label: key, results: vec![result] }),
        }
    }
    Ok(columns)
}

/// Mean and stderr of one task's accuracy over seeds, if the column's runs
/// cover that task.
fn task_cell(col: &ReportColumn, task: usize) -> Option<(f64, f64)> {
    if col.label == "separate" {
        let wanted = format!("separate-task{}", task);
        let result = col.results.iter().find(|r| r.label == wanted)?;
        let accs: Vec<f64> = result.seed_runs.iter().map(|s| s.test_accuracy).collect();
        if accs.is_empty() {
            return None;
        }
        Some(mean_and_stderr(&accs))
    } else {
        let result = &col.results[0];
        let accs: Vec<f64> = result
            .seed_runs
            .iter()
            .filter_map(|s| s.per_task_test_accuracy.get(task).copied().flatten())
            .collect();
        if accs.is_empty() {
            return None;
        }
        Some(mean_and_stderr(&accs))
    }
}

fn average_cell(col: &ReportColumn) -> Result<(f64, f64)> {
    if col.label == "separate" {
        separate_system_accuracy(&col.results)
    } else {
        let result = &col.results[0];
        Ok((result.mean_accuracy, result.stderr_accuracy))
    }
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let results = collect_results(&args.run_dirs)?;
    let columns = build_columns(results)?;
    let n_tasks = columns
        .iter()
        .flat_map(|c| c.results.iter())
        .flat_map(|r| r.seed_runs.iter())
        .map(|s| s.per_task_test_accuracy.len())
        .max()
        .unwrap_or(0);

    let mut csv = String::from("task");
    for col in &columns {
        csv.push_str(&format!(",{}_mean,{}_stderr", col.label, col.label));
    }
    csv.push('\n');
    let mut table_rows: Vec<Vec<String>> = Vec::new();
    for task in 0..n_tasks {
        let mut csv_row = task.to_string();
        let mut human = vec![task.to_string()];
        for col in &columns {
            match task_cell(col, task) {
                Some((mean, stderr)) => {
                    csv_row.push_str(&format!(",{},{}", mean, stderr));
                    human.push(format!("{:.4}±{:.4}", mean, stderr));
                }
                None => {
                    csv_row.push_str(",,");
                    human.push("-".to_string());
                }
            }
        }
        csv_row.push('\n');
        csv.push_str(&csv_row);
        table_rows.push(human);
    }
    let mut csv_row = String::from("average");
    let mut human = vec!["average".to_string()];
    for col in &columns {
        let (mean, stderr) = average_cell(col)?;
        csv_row.push_str(&format!(",{},{}", mean, stderr));
        human.push(format!("{:.4}±{:.4}", mean, stderr));
    }
    csv_row.push('\n');
    csv.push_str(&csv_row);
    table_rows.push(human);

    if let Some(out) = &args.out {
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(out, &csv)?;
        println!("report_table {}", out.display());
    }

    let mut header = vec!["task".to_string()];
    header.extend(columns.iter().map(|c| c.label.clone()));
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            table_rows
                .iter()
                .map(|r| r[i].len())
                .chain(std::iter::once(header[i].len()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let render = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{:>width$}", c, width = w))
            .collect::<Vec<_>>()
            .join("  ")
    };
    println!("{}", render(&header));
    for row in &table_rows {
        println!("{}", render(row));
    }
    Ok(())
}
