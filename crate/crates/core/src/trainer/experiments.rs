use serde::{Deserialize, Serialize};

use super::{train, PreparedData, TrainOptions};
use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::model::{reduce_to_baseline, Baseline, BranchToggles, Hyperparams};

pub const DEFAULT_VARIANTS: [&str; 10] = [
    "CR-BPR",
    "-w/o UC",
    "-w/o GC",
    "-w/o UC+U",
    "-w/o GC+G",
    "-w/o FS*",
    "-w/o V",
    "-w/o T",
    "-w/o V+FS*",
    "-w/o T+FS*",
];

/// Hyperparameters and toggles of a named variant: a model name such as
/// `GP-BPR`, or `-w/o` followed by `+`-joined parts out of
/// UC, GC, U, G, FS*, V, T removed from the full model.
pub fn variant_config(name: &str, base: &Hyperparams) -> Result<(Hyperparams, BranchToggles)> {
    let name = name.trim();
    let Some(rest) = name.strip_prefix("-w/o") else {
        let baseline: Baseline = name.parse()?;
        return Ok(reduce_to_baseline(baseline, base));
    };
    let mut h = base.clone();
    let mut t = BranchToggles::default();
    let parts: Vec<&str> = rest.split('+').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("unknown ablation variant `{name}`")));
    }
    for part in parts {
        match part {
            "UC" => {
                t.use_uc = false;
                h.phi_uc = 0.0;
            }
            "GC" => {
                t.use_gc = false;
                h.phi_gc = 0.0;
            }
            "U" => t.use_u = false,
            "G" => t.use_g = false,
            "FS*" | "FS" => h.feature_scaling = false,
            "V" => t.use_visual = false,
            "T" => t.use_textual = false,
            _ => return Err(Error::Config(format!("unknown ablation variant `{name}`"))),
        }
    }
    t.validate()?;
    Ok((h, t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub valid_auc: f64,
    pub test: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub runs: Vec<SeedResult>,
    /// Seed means of the test metrics.
    pub mean: MetricReport,
}

/// Train every variant once per seed. Seeds set both the model seed and
/// the evaluation seed, so variants see identical negatives.
pub fn run_ablation(
    data: &PreparedData,
    base: &Hyperparams,
    variants: &[String],
    seeds: &[u64],
    opts: &TrainOptions,
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let configs = variants
        .iter()
        .map(|v| variant_config(v, base).map(|c| (v.clone(), c)))
        .collect::<Result<Vec<_>>>()?;
    let mut opts = opts.clone();
    opts.log_path = None;
    opts.checkpoint_dir = None;
    opts.evaluate_test = true;
    let mut rows = Vec::with_capacity(configs.len());
    for (name, (hyper, toggles)) in configs {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let h = Hyperparams {
                seed,
                ..hyper.clone()
            };
            opts.eval.seed = seed;
            let run = train(data, &h, &toggles, &opts)?;
            let mut test = run.test.ok_or(Error::Empty("test split"))?;
            test.model = name.clone();
            test.setting = format!("seed={seed}");
            runs.push(SeedResult {
                seed,
                best_epoch: run.best_epoch,
                valid_auc: run.best_valid_auc,
                test,
            });
        }
        let n = runs.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| runs.iter().map(|r| f(&r.test)).sum::<f64>() / n;
        let mean = MetricReport {
            model: name.clone(),
            setting: format!("mean of {} seeds", runs.len()),
            k: opts.eval.k,
            auc: avg(|r| r.auc),
            hr: avg(|r| r.hr),
            ndcg: avg(|r| r.ndcg),
            mrr: avg(|r| r.mrr),
            ranks: Vec::new(),
            fingerprint: String::new(),
        };
        rows.push(AblationRow {
            variant: name,
            runs,
            mean,
        });
    }
    Ok(rows)
}

/// Candidate values for the exhaustive sweep. `hidden` sets the latent and
/// both content dimensions together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub batch_size: Vec<usize>,
    pub lambda: Vec<f64>,
    pub hidden: Vec<usize>,
    pub learning_rate: Vec<f64>,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size.is_empty()
            || self.lambda.is_empty()
            || self.hidden.is_empty()
            || self.learning_rate.is_empty()
        {
            return Err(Error::Config(
                "every grid axis needs at least one value".into(),
            ));
        }
        Ok(())
    }

    pub fn points(&self, base: &Hyperparams) -> Vec<Hyperparams> {
        let mut out = Vec::new();
        for &batch_size in &self.batch_size {
            for &lambda in &self.lambda {
                for &hidden in &self.hidden {
                    for &learning_rate in &self.learning_rate {
                        out.push(Hyperparams {
                            batch_size,
                            lambda,
                            latent_dim: hidden,
                            visual_hidden: hidden,
                            textual_hidden: hidden,
                            learning_rate,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub batch_size: usize,
    pub lambda: f64,
    pub hidden: usize,
    pub learning_rate: f64,
    pub valid_auc: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub points: Vec<GridPoint>,
    pub best: usize,
    pub best_hyperparams: Hyperparams,
}

/// Highest validation AUC; ties go to the smaller model, then the smaller
/// learning rate, then the earlier point.
pub fn select_best(points: &[GridPoint]) -> Option<usize> {
    (0..points.len()).reduce(|a, b| {
        let (pa, pb) = (&points[a], &points[b]);
        let better = pb.valid_auc > pa.valid_auc
            || (pb.valid_auc == pa.valid_auc
                && (pb.hidden < pa.hidden
                    || (pb.hidden == pa.hidden && pb.learning_rate < pa.learning_rate)));
        if better {
            b
        } else {
            a
        }
    })
}

pub fn run_grid(
    data: &PreparedData,
    base: &Hyperparams,
    toggles: &BranchToggles,
    spec: &GridSpec,
    opts: &TrainOptions,
) -> Result<GridResult> {
    spec.validate()?;
    let mut opts = opts.clone();
    opts.log_path = None;
    opts.checkpoint_dir = None;
    opts.evaluate_test = false;
    let candidates = spec.points(base);
    let mut points = Vec::with_capacity(candidates.len());
    for h in &candidates {
        let run = train(data, h, toggles, &opts)?;
        points.push(GridPoint {
            batch_size: h.batch_size,
            lambda: h.lambda,
            hidden: h.latent_dim,
            learning_rate: h.learning_rate,
            valid_auc: run.best_valid_auc,
            best_epoch: run.best_epoch,
        });
    }
    let best = select_best(&points).expect("grid has at least one point");
    Ok(GridResult {
        best_hyperparams: candidates[best].clone(),
        points,
        best,
    })
}
