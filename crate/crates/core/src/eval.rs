//! AUC and top-K ranking metrics, candidate construction, case-study
//! rankings and report files.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ProductFeatures, Triplet};
use crate::error::{Error, Result};
use crate::history::HistoryLists;
use crate::model::{
    BranchScores, CorpusNorms, FusionWeights, Model, NormContext, NormMode, ScoreBatch,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub k: usize,
    /// Candidates per ranking query: the positive plus sampled negatives.
    pub n_candidates: usize,
    pub seed: u64,
    pub norm: NormMode,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            k: 10,
            n_candidates: 100,
            seed: 0,
            norm: NormMode::Corpus,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("eval.k must be ≥ 1".into()));
        }
        if self.n_candidates <= self.k {
            return Err(Error::Config(format!(
                "eval.n_candidates ({}) must exceed eval.k ({})",
                self.n_candidates, self.k
            )));
        }
        Ok(())
    }
}

/// 1-based rank of the positive; ties count against it.
pub fn rank_of_positive(positive: f64, negatives: &[f64]) -> usize {
    1 + negatives.iter().filter(|&&s| s >= positive).count()
}

pub fn hit_ratio(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn mrr(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / rank as f64
    } else {
        0.0
    }
}

/// 1 when the positive wins, 0.5 on a tie, else 0.
pub fn pair_credit(positive: f64, negative: f64) -> f64 {
    if positive > negative {
        1.0
    } else if positive == negative {
        0.5
    } else {
        0.0
    }
}

pub fn auc_from_scores(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::Empty("evaluation triplets"));
    }
    let total: f64 = positives
        .iter()
        .zip(negatives)
        .map(|(&p, &n)| pair_credit(p, n))
        .sum();
    Ok(total / positives.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub hr: f64,
    pub ndcg: f64,
    pub mrr: f64,
}

pub fn summarize_ranks(ranks: &[usize], k: usize) -> Result<RankSummary> {
    if ranks.is_empty() {
        return Err(Error::Empty("ranking queries"));
    }
    let n = ranks.len() as f64;
    Ok(RankSummary {
        hr: ranks.iter().map(|&r| hit_ratio(r, k)).sum::<f64>() / n,
        ndcg: ranks.iter().map(|&r| ndcg(r, k)).sum::<f64>() / n,
        mrr: ranks.iter().map(|&r| mrr(r, k)).sum::<f64>() / n,
    })
}

/// Frozen model plus everything needed to score arbitrary triplets.
pub struct Scorer<'a> {
    pub model: &'a Model,
    pub features: &'a ProductFeatures<f32>,
    pub lists: &'a HistoryLists,
    weights: FusionWeights,
    norm: NormMode,
    corpus: Option<CorpusNorms<f32>>,
}

impl<'a> Scorer<'a> {
    /// Models trained without feature scaling always score without it.
    pub fn new(
        model: &'a Model,
        features: &'a ProductFeatures<f32>,
        lists: &'a HistoryLists,
        norm: NormMode,
    ) -> Result<Self> {
        let norm = if model.hyper.feature_scaling {
            norm
        } else {
            NormMode::Identity
        };
        let corpus = match norm {
            NormMode::Corpus => Some(CorpusNorms::compute(
                &model.params,
                features,
                2 * model.hyper.batch_size,
            )?),
            _ => None,
        };
        Ok(Scorer {
            model,
            features,
            lists,
            weights: model.weights(),
            norm,
            corpus,
        })
    }

    pub fn norm(&self) -> NormMode {
        self.norm
    }

    pub fn weights(&self) -> &FusionWeights {
        &self.weights
    }

    /// Score `(user, given, matcher)` triplets in one scaling context.
    pub fn score(&self, triplets: &[(usize, usize, usize)]) -> Result<BranchScores<f32>> {
        let batch = ScoreBatch::with_lists(
            triplets,
            self.lists,
            self.model.hyper.history_len,
            &self.weights,
        );
        let ctx = match (&self.norm, &self.corpus) {
            (NormMode::Corpus, Some(c)) => NormContext::Corpus(c),
            (NormMode::Identity, _) => NormContext::Identity,
            _ => NormContext::Batch,
        };
        self.model
            .params
            .score(self.features, &batch, &self.weights, &ctx)
    }

    fn n_matchers(&self) -> usize {
        self.features.n_matchers
    }
}

fn query_rng(seed: u64, query: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(query as u64 + 1);
    rng
}

/// One uniform negative per triplet, never equal to its positive.
pub fn auc_negatives(triplets: &[Triplet], n_matchers: usize, seed: u64) -> Result<Vec<usize>> {
    if n_matchers < 2 {
        return Err(Error::Sampling(
            "need at least two matching products".into(),
        ));
    }
    Ok(triplets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut rng = query_rng(seed, i);
            let r = rng.random_range(0..n_matchers - 1);
            if r >= t.matcher {
                r + 1
            } else {
                r
            }
        })
        .collect())
}

/// Positive plus `n - 1` distinct negatives, positive first.
pub fn ranking_candidates(
    positive: usize,
    n: usize,
    n_matchers: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if n > n_matchers {
        return Err(Error::Sampling(format!(
            "{n} candidates requested but only {n_matchers} matching products exist"
        )));
    }
    let mut out = Vec::with_capacity(n);
    out.push(positive);
    out.extend(sample(rng, n_matchers - 1, n - 1).into_iter().map(|r| {
        if r >= positive {
            r + 1
        } else {
            r
        }
    }));
    Ok(out)
}

/// AUC with one seeded negative per triplet. Pairs are scored in chunks of
/// the training batch size so batch statistics match training.
pub fn auc(scorer: &Scorer, triplets: &[Triplet], protocol: &EvalProtocol) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::Empty("evaluation triplets"));
    }
    let negatives = auc_negatives(triplets, scorer.n_matchers(), protocol.seed)?;
    let chunk = scorer.model.hyper.batch_size.max(1);
    let parts: Vec<Result<(Vec<f64>, Vec<f64>)>> = triplets
        .par_chunks(chunk)
        .zip(negatives.par_chunks(chunk))
        .map(|(ts, ns)| {
            let mut batch: Vec<(usize, usize, usize)> =
                ts.iter().map(|t| (t.user, t.given, t.matcher)).collect();
            batch.extend(ts.iter().zip(ns).map(|(t, &r)| (t.user, t.given, r)));
            let s = scorer.score(&batch)?.overall;
            let (pos, neg) = s.split_at(ts.len());
            Ok((
                pos.iter().map(|&x| x as f64).collect(),
                neg.iter().map(|&x| x as f64).collect(),
            ))
        })
        .collect();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for part in parts {
        let (p, n) = part?;
        pos.extend(p);
        neg.extend(n);
    }
    auc_from_scores(&pos, &neg)
}

/// Rank of each triplet's positive among its sampled candidates.
pub fn positive_ranks(
    scorer: &Scorer,
    triplets: &[Triplet],
    protocol: &EvalProtocol,
) -> Result<Vec<usize>> {
    protocol.validate()?;
    if triplets.is_empty() {
        return Err(Error::Empty("evaluation triplets"));
    }
    triplets
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            // streams disjoint from the AUC negatives
            let mut rng = query_rng(protocol.seed ^ 0x5eed_0000_0000, i);
            let candidates = ranking_candidates(
                t.matcher,
                protocol.n_candidates,
                scorer.n_matchers(),
                &mut rng,
            )?;
            let batch: Vec<_> = candidates.iter().map(|&r| (t.user, t.given, r)).collect();
            let s = scorer.score(&batch)?.overall;
            let negs: Vec<f64> = s[1..].iter().map(|&x| x as f64).collect();
            Ok(rank_of_positive(s[0] as f64, &negs))
        })
        .collect()
}

pub fn rank_metrics(
    scorer: &Scorer,
    triplets: &[Triplet],
    protocol: &EvalProtocol,
) -> Result<RankSummary> {
    summarize_ranks(&positive_ranks(scorer, triplets, protocol)?, protocol.k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub setting: String,
    pub k: usize,
    pub auc: f64,
    pub hr: f64,
    pub ndcg: f64,
    pub mrr: f64,
    /// Positive rank per ranking query, for auditing.
    pub ranks: Vec<usize>,
    pub fingerprint: String,
}

pub fn evaluate(
    scorer: &Scorer,
    triplets: &[Triplet],
    protocol: &EvalProtocol,
    model: &str,
    setting: &str,
) -> Result<MetricReport> {
    let auc = auc(scorer, triplets, protocol)?;
    let ranks = positive_ranks(scorer, triplets, protocol)?;
    let summary = summarize_ranks(&ranks, protocol.k)?;
    Ok(MetricReport {
        model: model.into(),
        setting: setting.into(),
        k: protocol.k,
        auc,
        hr: summary.hr,
        ndcg: summary.ndcg,
        mrr: summary.mrr,
        ranks,
        fingerprint: String::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Tsv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "tsv" => Ok(ReportFormat::Tsv),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

pub fn report_tsv(reports: &[MetricReport]) -> String {
    let k = reports.first().map(|r| r.k).unwrap_or(10);
    let mut out = format!("model\tsetting\tAUC\tHR@{k}\tNDCG@{k}\tMRR@{k}\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            r.model, r.setting, r.auc, r.hr, r.ndcg, r.mrr
        );
    }
    out
}

pub fn emit_report(reports: &[MetricReport], path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => {
            serde_json::to_string_pretty(reports).map_err(|e| Error::json(path, e))?
        }
        ReportFormat::Tsv => report_tsv(reports),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_report_json(path: &Path) -> Result<Vec<MetricReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub rank: usize,
    pub matcher: usize,
    pub p: f64,
    pub s_ur: f64,
    pub s_gr: f64,
    pub s_ur_c: f64,
    pub s_gr_c: f64,
}

/// Score `candidates` for one `(user, given)` and sort by overall score,
/// highest first; equal scores keep candidate order.
pub fn rank_case(
    scorer: &Scorer,
    user: usize,
    given: usize,
    candidates: &[usize],
) -> Result<Vec<CaseRow>> {
    if candidates.is_empty() {
        return Err(Error::Empty("case candidates"));
    }
    let mut seen = HashSet::new();
    for &c in candidates {
        if !seen.insert(c) {
            return Err(Error::Duplicate(format!("candidate index {c}")));
        }
    }
    let batch: Vec<_> = candidates.iter().map(|&r| (user, given, r)).collect();
    let s = scorer.score(&batch)?;
    let mut rows: Vec<CaseRow> = candidates
        .iter()
        .enumerate()
        .map(|(j, &r)| CaseRow {
            rank: 0,
            matcher: r,
            p: s.overall[j] as f64,
            s_ur: s.preference[j] as f64,
            s_gr: s.matching[j] as f64,
            s_ur_c: s.user_consistency[j] as f64,
            s_gr_c: s.given_consistency[j] as f64,
        })
        .collect();
    rows.sort_by(|a, b| b.p.total_cmp(&a.p));
    for (i, row) in rows.iter_mut().enumerate() {
        row.rank = i + 1;
    }
    Ok(rows)
}

/// TSV with columns rank, product_id, p, s_ur, s_gr, s_ur^c, s_gr^c.
pub fn case_tsv(rows: &[CaseRow], matcher_id: impl Fn(usize) -> String) -> String {
    let mut out = String::from("rank\tproduct_id\tp\ts_ur\ts_gr\ts_ur^c\ts_gr^c\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.rank,
            matcher_id(r.matcher),
            r.p,
            r.s_ur,
            r.s_gr,
            r.s_ur_c,
            r.s_gr_c
        );
    }
    out
}
