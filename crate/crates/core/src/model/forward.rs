use std::collections::{BTreeMap, HashMap};

use super::{Branch, FusionWeights, Modality, ModelParams};
use crate::data::ProductFeatures;
use crate::error::{Error, Result};
use crate::history::{Anchor, HistoryLists, HistoryQuery};
use crate::optim::Param;
use crate::tensor::{
    add_scaled_columns, affine_sigmoid, affine_sigmoid_backward, column_dots, scale_rows_backward,
    scale_rows_by_norm, scale_rows_fixed, Real, RowScale, Tensor, NORM_EPS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProductSide {
    Given,
    Matcher,
}

/// Where a representation sits in a score: the anchor (given product) or
/// the target (candidate and list members).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SlotRole {
    Anchor,
    Target,
}

/// Key of one scaling step, used to look up corpus-wide divisors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    UserLatent,
    ItemLatent,
    UserContent(Modality),
    Stack(Branch, Modality, SlotRole),
}

/// Precomputed per-dimension divisors over the whole catalog.
///
/// A dimension's divisor is its root sum of squares over every entity,
/// rescaled to the size of a scoring batch:
/// `sqrt(Σₑ x²ₑ · reference_batch / n_entities)`. With that rescaling the
/// scaled representations have the same magnitude as during training.
#[derive(Clone, Debug)]
pub struct CorpusNorms<T = f32> {
    divisors: HashMap<Slot, Vec<T>>,
    pub reference_batch: usize,
}

impl<T: Real> CorpusNorms<T> {
    pub fn compute(
        params: &ModelParams<T>,
        feats: &ProductFeatures<T>,
        reference_batch: usize,
    ) -> Result<Self> {
        let sizes = params.sizes;
        let users: Vec<usize> = (0..sizes.users).collect();
        let givens: Vec<usize> = (0..sizes.givens).map(|g| feats.given_row(g)).collect();
        let matchers: Vec<usize> = (0..sizes.matchers).map(|r| feats.matcher_row(r)).collect();
        let mut divisors = HashMap::new();
        let mut put = |slot: Slot, raw: Tensor<T>| {
            divisors.insert(slot, corpus_divisor(&raw, reference_batch));
        };
        put(
            Slot::UserLatent,
            gather_rows(&params.user_latent.value, &users),
        );
        put(
            Slot::ItemLatent,
            gather_rows(&params.item_latent.value, &matchers),
        );
        for m in Modality::ALL {
            put(
                Slot::UserContent(m),
                gather_rows(params.user_table(m), &users),
            );
            for b in Branch::ALL {
                let acts = params.stack_forward(feats, b, m, &matchers)?;
                put(
                    Slot::Stack(b, m, SlotRole::Target),
                    acts.into_iter().last().unwrap(),
                );
            }
            let acts = params.stack_forward(feats, Branch::Matching, m, &givens)?;
            put(
                Slot::Stack(Branch::Matching, m, SlotRole::Anchor),
                acts.into_iter().last().unwrap(),
            );
        }
        Ok(CorpusNorms {
            divisors,
            reference_batch,
        })
    }

    pub fn divisor(&self, slot: Slot) -> Option<&[T]> {
        self.divisors.get(&slot).map(Vec::as_slice)
    }
}

fn corpus_divisor<T: Real>(raw: &Tensor<T>, reference_batch: usize) -> Vec<T> {
    let n = raw.cols().max(1) as f64;
    (0..raw.rows())
        .map(|m| {
            let ss: f64 = raw.row(m).iter().map(|x| x.as_f64() * x.as_f64()).sum();
            T::of((ss * reference_batch as f64 / n).sqrt().max(NORM_EPS))
        })
        .collect()
}

/// Which statistics a scoring call scales representations with.
#[derive(Clone, Copy, Debug)]
pub enum NormContext<'a, T = f32> {
    Batch,
    Corpus(&'a CorpusNorms<T>),
    Identity,
}

impl<T: Real> NormContext<'_, T> {
    fn apply(&self, raw: Tensor<T>, slot: Slot) -> (Tensor<T>, Option<RowScale<T>>) {
        match self {
            NormContext::Batch => {
                let (out, s) = scale_rows_by_norm(&raw, NORM_EPS);
                (out, Some(s))
            }
            NormContext::Corpus(c) => match c.divisor(slot) {
                Some(d) if d.len() == raw.rows() => {
                    let (out, s) = scale_rows_fixed(&raw, d);
                    (out, Some(s))
                }
                _ => {
                    let (out, s) = scale_rows_by_norm(&raw, NORM_EPS);
                    (out, Some(s))
                }
            },
            NormContext::Identity => (raw, None),
        }
    }
}

/// Index-aligned triplets to score, with their `ur`/`gr` lists laid out
/// slot-major: member `k` of pair `j` is at `k·n + j`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScoreBatch {
    pub users: Vec<usize>,
    pub givens: Vec<usize>,
    pub matchers: Vec<usize>,
    pub user_lists: Vec<usize>,
    pub given_lists: Vec<usize>,
    pub list_len: usize,
}

impl ScoreBatch {
    /// Batch without history lists; only valid when both consistency
    /// branches are disabled.
    pub fn plain(triplets: &[(usize, usize, usize)]) -> Self {
        ScoreBatch {
            users: triplets.iter().map(|t| t.0).collect(),
            givens: triplets.iter().map(|t| t.1).collect(),
            matchers: triplets.iter().map(|t| t.2).collect(),
            ..ScoreBatch::default()
        }
    }

    /// Batch with the lists each enabled consistency branch needs.
    pub fn with_lists(
        triplets: &[(usize, usize, usize)],
        lists: &HistoryLists,
        list_len: usize,
        weights: &FusionWeights,
    ) -> Self {
        let mut batch = Self::plain(triplets);
        batch.list_len = list_len;
        let n = triplets.len();
        let fill = |anchor: &dyn Fn(usize, usize) -> Anchor| {
            let mut per_pair = Vec::with_capacity(n * list_len);
            for &(u, g, r) in triplets {
                let q = HistoryQuery {
                    anchor: anchor(u, g),
                    target: r,
                    n: list_len,
                };
                lists.extend_list(q, &mut per_pair);
            }
            transpose_lists(&per_pair, n, list_len)
        };
        if weights.toggles.use_uc {
            batch.user_lists = fill(&|u, _| Anchor::User(u));
        }
        if weights.toggles.use_gc {
            batch.given_lists = fill(&|_, g| Anchor::Given(g));
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Member `k` of every pair's list, in pair order.
    pub fn list_slot<'a>(lists: &'a [usize], n: usize, k: usize) -> &'a [usize] {
        &lists[k * n..(k + 1) * n]
    }

    fn validate(
        &self,
        params_sizes: crate::data::CatalogSizes,
        weights: &FusionWeights,
    ) -> Result<()> {
        let n = self.len();
        if self.givens.len() != n || self.matchers.len() != n {
            return Err(Error::shape(
                "score batch",
                "user, given and matcher batches differ in length",
            ));
        }
        let check = |kind: &'static str, ids: &[usize], size: usize| -> Result<()> {
            match ids.iter().find(|&&i| i >= size) {
                Some(&index) => Err(Error::IndexOutOfRange { kind, index, size }),
                None => Ok(()),
            }
        };
        check("user", &self.users, params_sizes.users)?;
        check("given", &self.givens, params_sizes.givens)?;
        check("matcher", &self.matchers, params_sizes.matchers)?;
        for (on, lists, name) in [
            (weights.toggles.use_uc, &self.user_lists, "user"),
            (weights.toggles.use_gc, &self.given_lists, "given"),
        ] {
            if on && (self.list_len == 0 || lists.len() != n * self.list_len) {
                return Err(Error::shape(
                    "score batch",
                    format!("{name} history lists missing or not {n}×{}", self.list_len),
                ));
            }
            check("history matcher", lists, params_sizes.matchers)?;
        }
        Ok(())
    }
}

fn transpose_lists(per_pair: &[usize], n: usize, list_len: usize) -> Vec<usize> {
    let mut out = vec![0; per_pair.len()];
    for j in 0..n {
        for k in 0..list_len {
            out[k * n + j] = per_pair[j * list_len + k];
        }
    }
    out
}

/// Every branch score per triplet, and the fused score.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchScores<T = f32> {
    pub preference: Vec<T>,
    pub matching: Vec<T>,
    pub user_consistency: Vec<T>,
    pub given_consistency: Vec<T>,
    pub overall: Vec<T>,
}

impl<T: Real> BranchScores<T> {
    fn zeros(n: usize) -> Self {
        BranchScores {
            preference: vec![T::zero(); n],
            matching: vec![T::zero(); n],
            user_consistency: vec![T::zero(); n],
            given_consistency: vec![T::zero(); n],
            overall: vec![T::zero(); n],
        }
    }
}

#[derive(Clone, Debug)]
struct Scaled<T> {
    out: Tensor<T>,
    scale: Option<RowScale<T>>,
}

impl<T: Real> Scaled<T> {
    /// Gradient w.r.t. the pre-scaling input.
    fn backward(&self, dy: &Tensor<T>) -> Tensor<T> {
        match &self.scale {
            Some(s) => scale_rows_backward(&self.out, s, dy),
            None => dy.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct TableRep<T> {
    rows: Vec<usize>,
    rep: Scaled<T>,
}

#[derive(Clone, Debug)]
struct StackRep<T> {
    rows: Vec<usize>,
    /// Input followed by each layer's output.
    acts: Vec<Tensor<T>>,
    rep: Scaled<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum StackSlot {
    Anchor,
    Target,
    Member(usize),
}

/// Scores plus everything the backward pass needs.
#[derive(Clone, Debug)]
pub struct Forward<T = f32> {
    pub scores: BranchScores<T>,
    user_latent: Option<TableRep<T>>,
    item_latent: Option<TableRep<T>>,
    user_content: HashMap<Modality, TableRep<T>>,
    stacks: HashMap<(Branch, Modality, StackSlot), StackRep<T>>,
    means: HashMap<(Branch, Modality), Tensor<T>>,
}

fn gather_rows<T: Real>(table: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let d = table.cols();
    let l = rows.len();
    let mut out = Tensor::zeros(&[d, l]);
    let data = out.data_mut();
    for (j, &r) in rows.iter().enumerate() {
        for (m, &x) in table.row(r).iter().enumerate() {
            data[m * l + j] = x;
        }
    }
    out
}

fn scatter_rows<T: Real>(grad: &mut Tensor<T>, rows: &[usize], d: &Tensor<T>) {
    let l = rows.len();
    let cols = grad.cols();
    let g = grad.data_mut();
    for m in 0..d.rows() {
        let src = d.row(m);
        for (j, &r) in rows.iter().enumerate() {
            g[r * cols + m] = g[r * cols + m] + src[j];
        }
    }
    debug_assert_eq!(d.cols(), l);
}

fn scaled_by<T: Real>(src: &Tensor<T>, coef: &[T]) -> Tensor<T> {
    let mut out = Tensor::zeros(src.shape());
    add_scaled_columns(&mut out, src, coef);
    out
}

fn add_into<T: Real>(dst: &mut [T], src: &[T], w: f64) {
    let w = T::of(w);
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + w * s;
    }
}

impl<T: Real> ModelParams<T> {
    pub(crate) fn user_table(&self, m: Modality) -> &Tensor<T> {
        match m {
            Modality::Visual => &self.user_visual.value,
            Modality::Textual => &self.user_textual.value,
        }
    }

    fn user_table_mut(&mut self, m: Modality) -> &mut Param<T> {
        match m {
            Modality::Visual => &mut self.user_visual,
            Modality::Textual => &mut self.user_textual,
        }
    }

    fn product_input(&self, feats: &ProductFeatures<T>, m: Modality, rows: &[usize]) -> Tensor<T> {
        let (table, delta) = match m {
            Modality::Visual => (&feats.visual, self.feature_delta.as_ref().map(|d| &d.0)),
            Modality::Textual => (&feats.textual, self.feature_delta.as_ref().map(|d| &d.1)),
        };
        let mut x = gather_rows(table, rows);
        if let Some(delta) = delta {
            let dx = gather_rows(&delta.value, rows);
            add_into(x.data_mut(), dx.data(), 1.0);
        }
        x
    }

    /// Input and every layer's activation of one stack over product rows.
    fn stack_forward(
        &self,
        feats: &ProductFeatures<T>,
        branch: Branch,
        m: Modality,
        rows: &[usize],
    ) -> Result<Vec<Tensor<T>>> {
        let mut acts = vec![self.product_input(feats, m, rows)];
        for layer in &self.stack(branch, m).layers {
            let y = affine_sigmoid(acts.last().unwrap(), &layer.weight.value, &layer.bias.value)?;
            acts.push(y);
        }
        Ok(acts)
    }

    fn stack_rep(
        &self,
        feats: &ProductFeatures<T>,
        branch: Branch,
        m: Modality,
        rows: Vec<usize>,
        role: SlotRole,
        norm: &NormContext<T>,
    ) -> Result<StackRep<T>> {
        let acts = self.stack_forward(feats, branch, m, &rows)?;
        let (out, scale) = norm.apply(acts.last().unwrap().clone(), Slot::Stack(branch, m, role));
        Ok(StackRep {
            rows,
            acts,
            rep: Scaled { out, scale },
        })
    }

    fn table_rep(
        table: &Tensor<T>,
        rows: Vec<usize>,
        slot: Slot,
        norm: &NormContext<T>,
    ) -> TableRep<T> {
        let (out, scale) = norm.apply(gather_rows(table, &rows), slot);
        TableRep {
            rows,
            rep: Scaled { out, scale },
        }
    }

    /// Scaled `[hidden × l]` representation of products through one stack.
    pub fn represent(
        &self,
        feats: &ProductFeatures<T>,
        side: ProductSide,
        ids: &[usize],
        branch: Branch,
        modality: Modality,
        norm: &NormContext<T>,
    ) -> Result<Tensor<T>> {
        let (rows, role, size, kind) = match side {
            ProductSide::Given => (
                ids.iter().map(|&g| feats.given_row(g)).collect::<Vec<_>>(),
                SlotRole::Anchor,
                feats.n_givens,
                "given",
            ),
            ProductSide::Matcher => (
                ids.iter().map(|&r| feats.matcher_row(r)).collect(),
                SlotRole::Target,
                feats.n_matchers,
                "matcher",
            ),
        };
        if let Some(&index) = ids.iter().find(|&&i| i >= size) {
            return Err(Error::IndexOutOfRange { kind, index, size });
        }
        Ok(self
            .stack_rep(feats, branch, modality, rows, role, norm)?
            .rep
            .out)
    }

    /// Score every triplet of `batch`, keeping intermediate values for
    /// [`ModelParams::backward`].
    pub fn forward(
        &self,
        feats: &ProductFeatures<T>,
        batch: &ScoreBatch,
        w: &FusionWeights,
        norm: &NormContext<T>,
    ) -> Result<Forward<T>> {
        batch.validate(self.sizes, w)?;
        let n = batch.len();
        let t = &w.toggles;
        let mut fwd = Forward {
            scores: BranchScores::zeros(n),
            user_latent: None,
            item_latent: None,
            user_content: HashMap::new(),
            stacks: HashMap::new(),
            means: HashMap::new(),
        };
        let matcher_rows: Vec<usize> = batch
            .matchers
            .iter()
            .map(|&r| feats.matcher_row(r))
            .collect();
        let given_rows: Vec<usize> = batch.givens.iter().map(|&g| feats.given_row(g)).collect();

        if t.use_u {
            let s = &mut fwd.scores.preference;
            let alpha = self.offset.value.data()[0];
            for j in 0..n {
                s[j] = self.user_bias.value.data()[batch.users[j]]
                    + self.item_bias.value.data()[batch.matchers[j]]
                    + alpha;
            }
            if t.use_latent {
                let eu = Self::table_rep(
                    &self.user_latent.value,
                    batch.users.clone(),
                    Slot::UserLatent,
                    norm,
                );
                let er = Self::table_rep(
                    &self.item_latent.value,
                    matcher_rows.clone(),
                    Slot::ItemLatent,
                    norm,
                );
                add_into(s, &column_dots(&eu.rep.out, &er.rep.out), 1.0);
                fwd.user_latent = Some(eu);
                fwd.item_latent = Some(er);
            }
            for m in Modality::ALL.into_iter().filter(|&m| t.modality(m)) {
                let uc = Self::table_rep(
                    self.user_table(m),
                    batch.users.clone(),
                    Slot::UserContent(m),
                    norm,
                );
                let pr = self.stack_rep(
                    feats,
                    Branch::Preference,
                    m,
                    matcher_rows.clone(),
                    SlotRole::Target,
                    norm,
                )?;
                add_into(
                    s,
                    &column_dots(&uc.rep.out, &pr.rep.out),
                    w.modality_weight(Branch::Preference, m),
                );
                fwd.user_content.insert(m, uc);
                fwd.stacks
                    .insert((Branch::Preference, m, StackSlot::Target), pr);
            }
        }

        if t.use_g {
            for m in Modality::ALL.into_iter().filter(|&m| t.modality(m)) {
                let g = self.stack_rep(
                    feats,
                    Branch::Matching,
                    m,
                    given_rows.clone(),
                    SlotRole::Anchor,
                    norm,
                )?;
                let r = self.stack_rep(
                    feats,
                    Branch::Matching,
                    m,
                    matcher_rows.clone(),
                    SlotRole::Target,
                    norm,
                )?;
                let dots = column_dots(&g.rep.out, &r.rep.out);
                add_into(
                    &mut fwd.scores.matching,
                    &dots,
                    w.modality_weight(Branch::Matching, m),
                );
                fwd.stacks
                    .insert((Branch::Matching, m, StackSlot::Anchor), g);
                fwd.stacks
                    .insert((Branch::Matching, m, StackSlot::Target), r);
            }
        }

        for (branch, on, lists) in [
            (Branch::UserConsistency, t.use_uc, &batch.user_lists),
            (Branch::GivenConsistency, t.use_gc, &batch.given_lists),
        ] {
            if !on {
                continue;
            }
            for m in Modality::ALL.into_iter().filter(|&m| t.modality(m)) {
                let target = self.stack_rep(
                    feats,
                    branch,
                    m,
                    matcher_rows.clone(),
                    SlotRole::Target,
                    norm,
                )?;
                let mut mean = Tensor::zeros(target.rep.out.shape());
                for k in 0..batch.list_len {
                    let rows = ScoreBatch::list_slot(lists, n, k)
                        .iter()
                        .map(|&r| feats.matcher_row(r))
                        .collect();
                    let member = self.stack_rep(feats, branch, m, rows, SlotRole::Target, norm)?;
                    add_into(
                        mean.data_mut(),
                        member.rep.out.data(),
                        1.0 / batch.list_len as f64,
                    );
                    fwd.stacks.insert((branch, m, StackSlot::Member(k)), member);
                }
                let dots = column_dots(&mean, &target.rep.out);
                let s = match branch {
                    Branch::UserConsistency => &mut fwd.scores.user_consistency,
                    _ => &mut fwd.scores.given_consistency,
                };
                add_into(s, &dots, w.modality_weight(branch, m));
                fwd.stacks.insert((branch, m, StackSlot::Target), target);
                fwd.means.insert((branch, m), mean);
            }
        }

        let sc = &mut fwd.scores;
        for j in 0..n {
            let p = w.fuse(
                sc.matching[j].as_f64(),
                sc.preference[j].as_f64(),
                sc.given_consistency[j].as_f64(),
                sc.user_consistency[j].as_f64(),
            );
            sc.overall[j] = T::of(p);
        }
        Ok(fwd)
    }

    /// Scores only.
    pub fn score(
        &self,
        feats: &ProductFeatures<T>,
        batch: &ScoreBatch,
        w: &FusionWeights,
        norm: &NormContext<T>,
    ) -> Result<BranchScores<T>> {
        Ok(self.forward(feats, batch, w, norm)?.scores)
    }

    /// Accumulate `∂L/∂Θ` into the parameter gradients given `∂L/∂p` per
    /// triplet.
    pub fn backward(
        &mut self,
        fwd: &Forward<T>,
        batch: &ScoreBatch,
        w: &FusionWeights,
        d_overall: &[T],
    ) {
        let n = batch.len();
        let scaled = |c: f64| -> Vec<T> { d_overall.iter().map(|&d| T::of(c) * d).collect() };

        if w.toggles.use_u {
            let d = scaled(w.preference);
            // f64 accumulation so a shared user's positive and negative
            // contributions cancel exactly.
            let mut d_user = BTreeMap::new();
            let mut d_item = BTreeMap::new();
            let mut d_alpha = 0.0;
            for j in 0..n {
                let dj = d[j].as_f64();
                *d_user.entry(batch.users[j]).or_insert(0.0) += dj;
                *d_item.entry(batch.matchers[j]).or_insert(0.0) += dj;
                d_alpha += dj;
            }
            for (grad, acc) in [
                (&mut self.user_bias.grad, d_user),
                (&mut self.item_bias.grad, d_item),
            ] {
                let g = grad.data_mut();
                for (i, v) in acc {
                    g[i] = g[i] + T::of(v);
                }
            }
            let a = self.offset.grad.data_mut();
            a[0] = a[0] + T::of(d_alpha);
            if let (Some(eu), Some(er)) = (&fwd.user_latent, &fwd.item_latent) {
                let d_eu = eu.rep.backward(&scaled_by(&er.rep.out, &d));
                let d_er = er.rep.backward(&scaled_by(&eu.rep.out, &d));
                scatter_rows(&mut self.user_latent.grad, &eu.rows, &d_eu);
                scatter_rows(&mut self.item_latent.grad, &er.rows, &d_er);
            }
            for m in Modality::ALL {
                let (Some(uc), Some(pr)) = (
                    fwd.user_content.get(&m),
                    fwd.stacks.get(&(Branch::Preference, m, StackSlot::Target)),
                ) else {
                    continue;
                };
                let c = scaled(w.preference * w.modality_weight(Branch::Preference, m));
                let d_uc = uc.rep.backward(&scaled_by(&pr.rep.out, &c));
                scatter_rows(&mut self.user_table_mut(m).grad, &uc.rows, &d_uc);
                self.stack_backward(Branch::Preference, m, pr, &scaled_by(&uc.rep.out, &c));
            }
        }

        for m in Modality::ALL {
            let (Some(g), Some(r)) = (
                fwd.stacks.get(&(Branch::Matching, m, StackSlot::Anchor)),
                fwd.stacks.get(&(Branch::Matching, m, StackSlot::Target)),
            ) else {
                continue;
            };
            let c = scaled(w.matching * w.modality_weight(Branch::Matching, m));
            self.stack_backward(Branch::Matching, m, g, &scaled_by(&r.rep.out, &c));
            self.stack_backward(Branch::Matching, m, r, &scaled_by(&g.rep.out, &c));
        }

        for (branch, weight) in [
            (Branch::UserConsistency, w.user_consistency),
            (Branch::GivenConsistency, w.given_consistency),
        ] {
            for m in Modality::ALL {
                let (Some(target), Some(mean)) = (
                    fwd.stacks.get(&(branch, m, StackSlot::Target)),
                    fwd.means.get(&(branch, m)),
                ) else {
                    continue;
                };
                let c = scaled(weight * w.modality_weight(branch, m));
                self.stack_backward(branch, m, target, &scaled_by(mean, &c));
                let mut d_mean = scaled_by(&target.rep.out, &c);
                let inv = T::of(1.0 / batch.list_len as f64);
                d_mean.data_mut().iter_mut().for_each(|x| *x = *x * inv);
                for k in 0..batch.list_len {
                    if let Some(member) = fwd.stacks.get(&(branch, m, StackSlot::Member(k))) {
                        self.stack_backward(branch, m, member, &d_mean);
                    }
                }
            }
        }
    }

    fn stack_backward(
        &mut self,
        branch: Branch,
        m: Modality,
        rep: &StackRep<T>,
        d_out: &Tensor<T>,
    ) {
        let mut d = rep.rep.backward(d_out);
        let has_delta = self.feature_delta.is_some();
        let depth = self.stack(branch, m).layers.len();
        for k in (1..=depth).rev() {
            let layer = &mut self.stack_mut(branch, m).layers[k - 1];
            let want_dx = k > 1 || has_delta;
            let dx = affine_sigmoid_backward(
                &rep.acts[k - 1],
                &layer.weight.value,
                &rep.acts[k],
                &d,
                &mut layer.weight.grad,
                &mut layer.bias.grad,
                want_dx,
            );
            match dx {
                Some(dx) => d = dx,
                None => return,
            }
        }
        if let Some((dv, dw)) = &mut self.feature_delta {
            let delta = if m == Modality::Visual { dv } else { dw };
            scatter_rows(&mut delta.grad, &rep.rows, &d);
        }
    }
}
