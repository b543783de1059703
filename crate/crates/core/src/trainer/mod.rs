//! Negative sampling, the pairwise loss, and the epoch loop with early
//! stopping on validation AUC.

mod experiments;

use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::data::{Catalog, CatalogSizes, Dataset, ProductFeatures, Split, Triplet};
use crate::error::{Error, Result};
use crate::eval::{self, EvalProtocol, MetricReport, Scorer};
use crate::history::{HistoryIndex, HistoryLists, SimilaritySpace};
use crate::model::{
    BranchToggles, FusionWeights, Hyperparams, Model, ModelParams, NormContext, ScoreBatch,
};
use crate::optim::{adam_step, AdamState};
use crate::tensor::{neg_log_sigmoid, sigmoid, Real};

pub use experiments::{
    run_ablation, run_grid, variant_config, AblationRow, GridPoint, GridResult, GridSpec,
    SeedResult, DEFAULT_VARIANTS,
};

/// A dataset with its splits, dense features and history lists, ready to
/// be shared by many training runs.
pub struct PreparedData {
    pub catalog: Catalog,
    pub sizes: CatalogSizes,
    pub features: ProductFeatures<f32>,
    pub lists: HistoryLists,
    pub train: Vec<Triplet>,
    pub valid: Vec<Triplet>,
    pub test: Vec<Triplet>,
    positives: HashSet<(usize, usize, usize)>,
}

impl PreparedData {
    /// History lists come from the train split only.
    pub fn new(dataset: &Dataset, exclude_target: bool) -> Result<Self> {
        let sizes = dataset.catalog.sizes();
        let features = dataset.product_features();
        let records = &dataset.triplets.records;
        let index = HistoryIndex::build(records, sizes.users, sizes.givens, sizes.matchers);
        let space = SimilaritySpace::from_features(&features);
        let train = dataset.triplets.of_split(Split::Train);
        Ok(PreparedData {
            catalog: dataset.catalog.clone(),
            sizes,
            lists: HistoryLists::new(index, space, exclude_target),
            positives: train.iter().map(|t| (t.user, t.given, t.matcher)).collect(),
            valid: dataset.triplets.of_split(Split::Valid),
            test: dataset.triplets.of_split(Split::Test),
            train,
            features,
        })
    }

    pub fn visual_dim(&self) -> usize {
        self.features.visual.cols()
    }

    pub fn textual_dim(&self) -> usize {
        self.features.textual.cols()
    }
}

/// Uniform over all matching products except `positive`.
pub fn sample_negative(positive: usize, n_matchers: usize, rng: &mut impl Rng) -> Result<usize> {
    if n_matchers < 2 {
        return Err(Error::Sampling(
            "need at least two matching products to draw a negative".into(),
        ));
    }
    let r = rng.random_range(0..n_matchers - 1);
    Ok(if r >= positive { r + 1 } else { r })
}

/// Like [`sample_negative`] but also avoids every observed positive of
/// `(user, given)`.
pub fn sample_negative_strict(
    user: usize,
    given: usize,
    positive: usize,
    n_matchers: usize,
    observed: &HashSet<(usize, usize, usize)>,
    rng: &mut impl Rng,
) -> Result<usize> {
    let allowed = (0..n_matchers)
        .filter(|&r| r != positive && !observed.contains(&(user, given, r)))
        .count();
    if allowed == 0 {
        return Err(Error::Sampling(format!(
            "every matching product is a positive of user {user} with given {given}"
        )));
    }
    loop {
        let r = sample_negative(positive, n_matchers, rng)?;
        if !observed.contains(&(user, given, r)) {
            return Ok(r);
        }
    }
}

/// `−ln σ(p₊ − p₋)`.
pub fn bpr_term(diff: f64) -> f64 {
    neg_log_sigmoid(diff)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    /// Summed pairwise term over the batch.
    pub bpr: f64,
    /// `λ/2·‖Θ‖²` over enabled parameters.
    pub penalty: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.bpr + self.penalty
    }
}

fn split_pairs(batch: &ScoreBatch) -> Result<usize> {
    if batch.is_empty() || batch.len() % 2 != 0 {
        return Err(Error::shape(
            "bpr loss",
            "batch must hold positives followed by as many negatives",
        ));
    }
    Ok(batch.len() / 2)
}

/// Loss of a batch laid out as `B` positives followed by their `B`
/// negatives, scored in one scaling context. Parameters are unchanged.
pub fn bpr_loss_value<T: Real>(
    params: &ModelParams<T>,
    feats: &ProductFeatures<T>,
    batch: &ScoreBatch,
    w: &FusionWeights,
    norm: &NormContext<T>,
    lambda: f64,
) -> Result<LossParts> {
    let b = split_pairs(batch)?;
    let p = params.score(feats, batch, w, norm)?.overall;
    let bpr = (0..b)
        .map(|i| bpr_term(p[i].as_f64() - p[b + i].as_f64()))
        .sum();
    Ok(LossParts {
        bpr,
        penalty: 0.5 * lambda * params.active_sum_squares(&w.toggles),
    })
}

/// As [`bpr_loss_value`], additionally accumulating `∂loss/∂Θ` into the
/// parameter gradients.
pub fn bpr_loss<T: Real>(
    params: &mut ModelParams<T>,
    feats: &ProductFeatures<T>,
    batch: &ScoreBatch,
    w: &FusionWeights,
    norm: &NormContext<T>,
    lambda: f64,
) -> Result<LossParts> {
    let b = split_pairs(batch)?;
    let fwd = params.forward(feats, batch, w, norm)?;
    let p = &fwd.scores.overall;
    let mut bpr = 0.0;
    let mut d = vec![T::zero(); 2 * b];
    for i in 0..b {
        let diff = p[i].as_f64() - p[b + i].as_f64();
        bpr += bpr_term(diff);
        // d/dx −ln σ(x) = −σ(−x)
        let g = sigmoid(-diff);
        d[i] = T::of(-g);
        d[b + i] = T::of(g);
    }
    if !bpr.is_finite() {
        return Err(Error::Numeric {
            what: "pairwise loss".into(),
        });
    }
    params.backward(&fwd, batch, w, &d);
    let penalty = params.add_weight_decay(lambda, &w.toggles);
    Ok(LossParts { bpr, penalty })
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub eval: EvalProtocol,
    pub strict_negatives: bool,
    /// JSON-lines epoch log.
    pub log_path: Option<PathBuf>,
    /// Written on every validation improvement.
    pub checkpoint_dir: Option<PathBuf>,
    /// Recorded in the checkpoint manifest.
    pub config_echo: serde_json::Value,
    /// Evaluate the best parameters on the test split after training.
    pub evaluate_test: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            eval: EvalProtocol::default(),
            strict_negatives: false,
            log_path: None,
            checkpoint_dir: None,
            config_echo: serde_json::Value::Null,
            evaluate_test: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub valid_auc: f64,
    /// Seconds since training started; excluded from determinism checks.
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub hyper: Hyperparams,
    pub toggles: BranchToggles,
    pub epoch_log: Vec<EpochRecord>,
    /// 1-based epoch with the highest validation AUC, earliest on ties.
    pub best_epoch: usize,
    pub best_valid_auc: f64,
    pub checkpoint_path: Option<PathBuf>,
    /// Parameters from `best_epoch`.
    pub model: Model,
    /// Test metrics of the best parameters.
    pub test: Option<MetricReport>,
}

/// Shuffle and negative draws for one epoch come from this stream.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Run one epoch of minibatch updates and return the mean per-triplet loss.
pub fn train_epoch(
    model: &mut Model,
    adam: &mut AdamState,
    data: &PreparedData,
    epoch: usize,
    strict_negatives: bool,
) -> Result<f64> {
    let h = model.hyper.clone();
    let w = model.weights();
    let norm = if h.feature_scaling {
        NormContext::Batch
    } else {
        NormContext::Identity
    };
    let mut rng = epoch_rng(h.seed, epoch);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order.shuffle(&mut rng);
    let n_matchers = data.sizes.matchers;
    let mut total = 0.0;
    for chunk in order.chunks(h.batch_size) {
        let mut triplets = Vec::with_capacity(2 * chunk.len());
        triplets.extend(chunk.iter().map(|&i| {
            let t = data.train[i];
            (t.user, t.given, t.matcher)
        }));
        for &i in chunk {
            let t = data.train[i];
            let neg = if strict_negatives {
                sample_negative_strict(
                    t.user,
                    t.given,
                    t.matcher,
                    n_matchers,
                    &data.positives,
                    &mut rng,
                )?
            } else {
                sample_negative(t.matcher, n_matchers, &mut rng)?
            };
            triplets.push((t.user, t.given, neg));
        }
        let batch = ScoreBatch::with_lists(&triplets, &data.lists, h.history_len, &w);
        model.params.zero_grad();
        let loss = bpr_loss(
            &mut model.params,
            &data.features,
            &batch,
            &w,
            &norm,
            h.lambda,
        )?;
        let mut params = model.params.params_mut();
        adam_step(&mut params, adam, h.learning_rate)?;
        total += loss.total();
    }
    Ok(total / data.train.len().max(1) as f64)
}

pub fn train(
    data: &PreparedData,
    hyper: &Hyperparams,
    toggles: &BranchToggles,
    opts: &TrainOptions,
) -> Result<TrainRun> {
    opts.eval.validate()?;
    if data.train.is_empty() {
        return Err(Error::Empty("train split"));
    }
    if data.valid.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let mut model = Model::new(
        data.sizes,
        data.visual_dim(),
        data.textual_dim(),
        hyper.clone(),
        *toggles,
    )?;
    let mut adam = {
        let params = model.params.params_mut();
        AdamState::new(&params, hyper.adam)
    };
    if let Some(path) = &opts.log_path {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, "").map_err(|e| Error::io(path, e))?;
    }

    let start = Instant::now();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ModelParams<f32>)> = None;
    for epoch in 1..=hyper.max_epochs {
        let loss = train_epoch(&mut model, &mut adam, data, epoch, opts.strict_negatives)?;
        let valid_auc = {
            let scorer = Scorer::new(&model, &data.features, &data.lists, opts.eval.norm)?;
            eval::auc(&scorer, &data.valid, &opts.eval)?
        };
        let record = EpochRecord {
            epoch,
            loss,
            valid_auc,
            wall_time: start.elapsed().as_secs_f64(),
        };
        if let Some(path) = &opts.log_path {
            let mut f = OpenOptions::new()
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            let line = serde_json::to_string(&record).map_err(|e| Error::json(path, e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        log.push(record);

        let improved = best.as_ref().is_none_or(|(_, auc, _)| valid_auc > *auc);
        if improved {
            best = Some((epoch, valid_auc, model.params.clone()));
            if let Some(dir) = &opts.checkpoint_dir {
                let meta = CheckpointMeta {
                    eval_norm: Some(opts.eval.norm),
                    epoch,
                    config: opts.config_echo.clone(),
                };
                checkpoint::save(&model, data.visual_dim(), data.textual_dim(), &meta, dir)?;
            }
        }
        let best_epoch = best.as_ref().map(|b| b.0).unwrap_or(epoch);
        if epoch - best_epoch >= hyper.patience {
            break;
        }
    }

    let (best_epoch, best_valid_auc, params) = best.expect("at least one epoch ran");
    model.params = params;
    let test = if opts.evaluate_test && !data.test.is_empty() {
        let scorer = Scorer::new(&model, &data.features, &data.lists, opts.eval.norm)?;
        Some(eval::evaluate(&scorer, &data.test, &opts.eval, "", "test")?)
    } else {
        None
    };
    Ok(TrainRun {
        hyper: hyper.clone(),
        toggles: *toggles,
        epoch_log: log,
        best_epoch,
        best_valid_auc,
        checkpoint_path: opts.checkpoint_dir.clone(),
        model,
        test,
    })
}
