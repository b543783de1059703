mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crbpr::checkpoint::{self, Manifest};
use crbpr::data::{generate_synthetic, split_triplets, Dataset};
use crbpr::eval::{
    self, case_tsv, emit_report, rank_case, report_tsv, MetricReport, ReportFormat, Scorer,
};
use crbpr::model::Model;
use crbpr::trainer::{run_ablation, run_grid, train, PreparedData, TrainOptions};
use crbpr::Error;
use serde::Serialize;

use config::RunConfig;

const DATA_ENV: &str = "CRBPR_DATA_DIR";

#[derive(Parser, Debug)]
#[command(
    name = "crbpr",
    version,
    about = "Consistency-regularized BPR for complementary clothing recommendation"
)]
struct Cli {
    /// Worker threads for evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON config with flat dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
struct DataArg {
    /// Dataset directory; defaults to `data.dir`, then $CRBPR_DATA_DIR.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with planted structure.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model and evaluate it on the test split.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Rank candidate matchers for one user and given product.
    Rank {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long)]
        given: String,
        /// Comma-separated matcher ids.
        #[arg(long, value_delimiter = ',', required = true)]
        candidates: Vec<String>,
    },
    /// Train every ablation variant over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Exhaustive hyperparameter sweep selected on validation AUC.
    Grid {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
}

/// Failure with its exit code: 1 for bad input, 2 for runtime trouble.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_validation() { 1 } else { 2 },
            msg: e.to_string(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        msg: msg.into(),
    }
}

fn runtime(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        msg: format!("{}: {e}", path.display()),
    }
}

type CliResult<T> = Result<T, Failure>;

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    Ok(cfg)
}

fn require_seed(cfg: &RunConfig) -> CliResult<u64> {
    cfg.seed
        .ok_or_else(|| invalid("no seed: pass --seed or set `seed` in the config"))
}

fn require_out(common: &Common) -> CliResult<PathBuf> {
    let out = common
        .out
        .clone()
        .ok_or_else(|| invalid("--out is required"))?;
    fs::create_dir_all(&out).map_err(|e| runtime(&out, e))?;
    Ok(out)
}

fn data_dir(arg: &DataArg, cfg: &RunConfig) -> CliResult<PathBuf> {
    arg.data
        .clone()
        .or_else(|| cfg.data.dir.clone())
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
        .ok_or_else(|| {
            invalid(format!(
                "no dataset: pass --data, set `data.dir`, or set ${DATA_ENV}"
            ))
        })
}

fn prepare(arg: &DataArg, cfg: &mut RunConfig) -> CliResult<PreparedData> {
    let dir = data_dir(arg, cfg)?;
    cfg.data.dir = Some(dir.clone());
    let dataset = Dataset::load_dir(&dir, cfg.data.min_interactions)?;
    Ok(PreparedData::new(&dataset, cfg.data.exclude_target)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| runtime(path, e))?;
    fs::write(path, text + "\n").map_err(|e| runtime(path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| runtime(path, e))
}

fn write_reports(cfg: &RunConfig, out: &Path, reports: &[MetricReport]) -> CliResult<()> {
    let formats = match cfg.eval.format.as_str() {
        "both" => vec![ReportFormat::Json, ReportFormat::Tsv],
        other => vec![other.parse::<ReportFormat>()?],
    };
    for format in formats {
        let name = match format {
            ReportFormat::Json => "report.json",
            ReportFormat::Tsv => "report.tsv",
        };
        emit_report(reports, &out.join(name), format)?;
    }
    Ok(())
}

fn train_options(cfg: &RunConfig, seed: u64) -> CliResult<TrainOptions> {
    Ok(TrainOptions {
        eval: cfg.protocol(seed)?,
        strict_negatives: cfg.train.strict_negatives,
        config_echo: cfg.resolved(),
        ..TrainOptions::default()
    })
}

fn cmd_synth(common: &Common) -> CliResult<()> {
    let cfg = load_config(common)?;
    let seed = require_seed(&cfg)?;
    let out = require_out(common)?;
    let data = generate_synthetic(&cfg.synth.generator(seed))?;
    let triplets = split_triplets(&data.triplets, cfg.synth.ratios(), seed)?;
    let dataset = Dataset::new(data.catalog, data.features, triplets)?;
    dataset.save_dir(&out, cfg.synth.binary)?;
    write_json(&out.join("oracle.json"), &data.oracle)?;
    cfg.write_resolved(&out)?;
    eprintln!(
        "wrote {} triplets ({} users, {} givens, {} matchers) to {}",
        dataset.triplets.len(),
        dataset.catalog.users.len(),
        dataset.catalog.givens.len(),
        dataset.catalog.matchers.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(common: &Common, data_arg: &DataArg) -> CliResult<()> {
    let mut cfg = load_config(common)?;
    let seed = require_seed(&cfg)?;
    let out = require_out(common)?;
    let data = prepare(data_arg, &mut cfg)?;
    let (hyper, toggles) = cfg.model_config(seed)?;
    cfg.write_resolved(&out)?;
    let opts = TrainOptions {
        log_path: Some(out.join("epochs.jsonl")),
        checkpoint_dir: Some(out.join("checkpoint")),
        ..train_options(&cfg, seed)?
    };
    let run = train(&data, &hyper, &toggles, &opts)?;
    let mut reports = Vec::new();
    if let Some(mut test) = run.test {
        test.model = cfg.model.variant.clone();
        test.fingerprint = cfg.fingerprint();
        reports.push(test);
    }
    write_reports(&cfg, &out, &reports)?;
    eprintln!(
        "best epoch {} with validation AUC {:.4}; checkpoint in {}",
        run.best_epoch,
        run.best_valid_auc,
        out.join("checkpoint").display()
    );
    print!("{}", report_tsv(&reports));
    Ok(())
}

/// A run directory written by `train`, or a checkpoint directory itself.
fn load_checkpoint(path: &Path) -> CliResult<(Model, Manifest)> {
    let dir = if path.join(checkpoint::MANIFEST).exists() {
        path.to_path_buf()
    } else {
        path.join("checkpoint")
    };
    Ok(checkpoint::load(&dir)?)
}

/// Explicit config, else the one recorded with the checkpoint. The seed
/// falls back to the checkpoint's.
fn checkpoint_config(common: &Common, manifest: &Manifest) -> CliResult<RunConfig> {
    let mut cfg = match (&common.config, &manifest.config) {
        (Some(_), _) | (None, serde_json::Value::Null) => load_config(common)?,
        (None, recorded) => {
            let text = recorded.to_string();
            RunConfig::from_json_str(&text, Path::new("checkpoint manifest"))?
        }
    };
    cfg.eval.norm = manifest.eval_norm;
    cfg.seed = common.seed.or(cfg.seed).or(Some(manifest.seed));
    Ok(cfg)
}

fn cmd_eval(common: &Common, data_arg: &DataArg, ckpt: &Path) -> CliResult<()> {
    let (model, manifest) = load_checkpoint(ckpt)?;
    let mut cfg = checkpoint_config(common, &manifest)?;
    let seed = require_seed(&cfg)?;
    let out = require_out(common)?;
    let data = prepare(data_arg, &mut cfg)?;
    if data.sizes != manifest.sizes {
        return Err(invalid(format!(
            "dataset sizes {:?} do not match checkpoint sizes {:?}",
            data.sizes, manifest.sizes
        )));
    }
    cfg.write_resolved(&out)?;
    let protocol = cfg.protocol(seed)?;
    let scorer = Scorer::new(&model, &data.features, &data.lists, protocol.norm)?;
    let mut report = eval::evaluate(&scorer, &data.test, &protocol, &cfg.model.variant, "test")?;
    report.fingerprint = cfg.fingerprint();
    let reports = vec![report];
    write_reports(&cfg, &out, &reports)?;
    print!("{}", report_tsv(&reports));
    Ok(())
}

fn cmd_rank(
    common: &Common,
    data_arg: &DataArg,
    ckpt: &Path,
    user: &str,
    given: &str,
    candidates: &[String],
) -> CliResult<()> {
    let (model, manifest) = load_checkpoint(ckpt)?;
    let mut cfg = checkpoint_config(common, &manifest)?;
    let data = prepare(data_arg, &mut cfg)?;
    if data.sizes != manifest.sizes {
        return Err(invalid("dataset does not match the checkpoint"));
    }
    let u = data.catalog.user(user)?;
    let g = data.catalog.given(given)?;
    let cands = candidates
        .iter()
        .map(|c| data.catalog.matcher(c.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    let scorer = Scorer::new(&model, &data.features, &data.lists, cfg.eval.norm)?;
    let rows = rank_case(&scorer, u, g, &cands)?;
    let text = case_tsv(&rows, |r| data.catalog.matchers.id(r).to_string());
    if let Some(out) = &common.out {
        fs::create_dir_all(out).map_err(|e| runtime(out, e))?;
        cfg.write_resolved(out)?;
        write_text(&out.join("case.tsv"), &text)?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_ablate(common: &Common, data_arg: &DataArg) -> CliResult<()> {
    let mut cfg = load_config(common)?;
    let seed = require_seed(&cfg)?;
    let out = require_out(common)?;
    let data = prepare(data_arg, &mut cfg)?;
    let base = cfg.base_hyperparams(seed);
    base.validate()?;
    cfg.write_resolved(&out)?;
    let seeds = cfg.ablation_seeds(seed);
    let rows = run_ablation(
        &data,
        &base,
        &cfg.ablate.variants,
        &seeds,
        &train_options(&cfg, seed)?,
    )?;
    write_json(&out.join("ablation.json"), &rows)?;
    let means: Vec<MetricReport> = rows
        .iter()
        .map(|r| MetricReport {
            fingerprint: cfg.fingerprint(),
            ..r.mean.clone()
        })
        .collect();
    let text = report_tsv(&means);
    write_text(&out.join("ablation.tsv"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_grid(common: &Common, data_arg: &DataArg) -> CliResult<()> {
    let mut cfg = load_config(common)?;
    let seed = require_seed(&cfg)?;
    let out = require_out(common)?;
    let data = prepare(data_arg, &mut cfg)?;
    let (hyper, toggles) = cfg.model_config(seed)?;
    cfg.write_resolved(&out)?;
    let result = run_grid(
        &data,
        &hyper,
        &toggles,
        &cfg.grid_spec(),
        &train_options(&cfg, seed)?,
    )?;
    write_json(&out.join("grid.json"), &result)?;
    let mut text =
        String::from("batch_size\tlambda\thidden\tlearning_rate\tvalid_AUC\tbest_epoch\n");
    for p in &result.points {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.4}\t{}\n",
            p.batch_size, p.lambda, p.hidden, p.learning_rate, p.valid_auc, p.best_epoch
        ));
    }
    write_text(&out.join("grid.tsv"), &text)?;
    print!("{text}");
    let best = &result.points[result.best];
    eprintln!(
        "best: batch_size={} lambda={} hidden={} learning_rate={} (valid AUC {:.4})",
        best.batch_size, best.lambda, best.hidden, best.learning_rate, best.valid_auc
    );
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if cli.threads == 0 {
        return Err(invalid("--threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Failure {
            code: 2,
            msg: format!("thread pool: {e}"),
        })?;
    match &cli.command {
        Command::Synth { common } => cmd_synth(common),
        Command::Train { common, data } => cmd_train(common, data),
        Command::Eval {
            common,
            data,
            checkpoint,
        } => cmd_eval(common, data, checkpoint),
        Command::Rank {
            common,
            data,
            checkpoint,
            user,
            given,
            candidates,
        } => cmd_rank(common, data, checkpoint, user, given, candidates),
        Command::Ablate { common, data } => cmd_ablate(common, data),
        Command::Grid { common, data } => cmd_grid(common, data),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
