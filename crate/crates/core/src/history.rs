//! Per-user and per-given-product interaction histories, and the
//! similarity-filtered `ur`/`gr` lists fed to the consistency branches.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::RwLock;

use crate::data::{ProductFeatures, Split, Triplet};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Anchor {
    User(usize),
    Given(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct HistoryQuery {
    pub anchor: Anchor,
    pub target: usize,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HistoryIndex {
    by_user: Vec<Vec<usize>>,
    by_given: Vec<Vec<usize>>,
    popularity: Vec<u32>,
    /// Matchers by descending train count, ties by ascending index.
    popular: Vec<usize>,
}

impl HistoryIndex {
    /// Build from the train records of `triplets`; other splits are ignored.
    pub fn build(triplets: &[Triplet], n_users: usize, n_givens: usize, n_matchers: usize) -> Self {
        let mut by_user = vec![Vec::new(); n_users];
        let mut by_given = vec![Vec::new(); n_givens];
        let mut popularity = vec![0u32; n_matchers];
        for t in triplets.iter().filter(|t| t.split == Split::Train) {
            popularity[t.matcher] += 1;
            for list in [&mut by_user[t.user], &mut by_given[t.given]] {
                if !list.contains(&t.matcher) {
                    list.push(t.matcher);
                }
            }
        }
        let mut popular: Vec<usize> = (0..n_matchers).collect();
        popular.sort_by(|&a, &b| popularity[b].cmp(&popularity[a]).then(a.cmp(&b)));
        HistoryIndex {
            by_user,
            by_given,
            popularity,
            popular,
        }
    }

    pub fn user_history(&self, user: usize) -> &[usize] {
        self.by_user.get(user).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn given_history(&self, given: usize) -> &[usize] {
        self.by_given.get(given).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn history(&self, anchor: Anchor) -> &[usize] {
        match anchor {
            Anchor::User(u) => self.user_history(u),
            Anchor::Given(g) => self.given_history(g),
        }
    }

    pub fn popularity(&self, matcher: usize) -> u32 {
        self.popularity.get(matcher).copied().unwrap_or(0)
    }

    pub fn n_matchers(&self) -> usize {
        self.popularity.len()
    }

    /// The `n` history members most similar to the target, per the fill
    /// and popularity fallback rules. Always returns exactly `n` ids.
    pub fn query_list(
        &self,
        q: HistoryQuery,
        space: &SimilaritySpace,
        exclude_target: bool,
    ) -> Vec<usize> {
        assert!(q.n >= 1, "history list length must be at least 1");
        let mut candidates: Vec<(usize, f64)> = self
            .history(q.anchor)
            .iter()
            .copied()
            .filter(|&r| !(exclude_target && r == q.target))
            .map(|r| (r, space.cosine(r, q.target)))
            .collect();

        if candidates.is_empty() {
            let mut out: Vec<usize> = self
                .popular
                .iter()
                .copied()
                .filter(|&r| !(exclude_target && r == q.target))
                .take(q.n)
                .collect();
            if out.is_empty() {
                // only the target itself exists
                out.push(q.target);
            }
            let mut i = 0;
            while out.len() < q.n {
                out.push(out[i]);
                i += 1;
            }
            return out;
        }

        candidates.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        let mut out: Vec<usize> = candidates.iter().take(q.n).map(|c| c.0).collect();
        let best = out[0];
        out.resize(q.n, best);
        out
    }
}

/// Unit-normalized concatenation of each matcher's pretrained visual and
/// textual vectors; cosine similarity is then a dot product.
#[derive(Clone, Debug)]
pub struct SimilaritySpace {
    dim: usize,
    rows: Vec<f64>,
}

impl SimilaritySpace {
    pub fn from_features<T: Real>(features: &ProductFeatures<T>) -> Self {
        let dv = features.visual.cols();
        let dw = features.textual.cols();
        let dim = dv + dw;
        let mut rows = Vec::with_capacity(features.n_matchers * dim);
        for r in 0..features.n_matchers {
            let row = features.matcher_row(r);
            let start = rows.len();
            rows.extend(features.visual.row(row).iter().map(|x| x.as_f64()));
            rows.extend(features.textual.row(row).iter().map(|x| x.as_f64()));
            let norm = rows[start..].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                rows[start..].iter_mut().for_each(|x| *x /= norm);
            }
        }
        SimilaritySpace { dim, rows }
    }

    /// Cosine similarity of two matchers; 0 when either vector is zero.
    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        let ra = &self.rows[a * self.dim..(a + 1) * self.dim];
        let rb = &self.rows[b * self.dim..(b + 1) * self.dim];
        ra.iter().zip(rb).map(|(x, y)| x * y).sum()
    }
}

/// History index plus similarity space with a memo of answered queries.
pub struct HistoryLists {
    pub index: HistoryIndex,
    pub space: SimilaritySpace,
    pub exclude_target: bool,
    memo: RwLock<HashMap<HistoryQuery, Vec<usize>>>,
}

impl HistoryLists {
    pub fn new(index: HistoryIndex, space: SimilaritySpace, exclude_target: bool) -> Self {
        HistoryLists {
            index,
            space,
            exclude_target,
            memo: RwLock::new(HashMap::new()),
        }
    }

    /// Append the list for `q` to `out`.
    pub fn extend_list(&self, q: HistoryQuery, out: &mut Vec<usize>) {
        if let Some(hit) = self.memo.read().expect("history memo poisoned").get(&q) {
            out.extend_from_slice(hit);
            return;
        }
        let list = self.index.query_list(q, &self.space, self.exclude_target);
        out.extend_from_slice(&list);
        self.memo
            .write()
            .expect("history memo poisoned")
            .insert(q, list);
    }

    pub fn list(&self, q: HistoryQuery) -> Vec<usize> {
        let mut out = Vec::with_capacity(q.n);
        self.extend_list(q, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn features(vectors: &[[f32; 2]]) -> ProductFeatures<f32> {
        let n = vectors.len();
        let visual =
            Tensor::from_vec(&[n, 2], vectors.iter().flatten().copied().collect()).unwrap();
        ProductFeatures {
            visual,
            textual: Tensor::zeros(&[n, 1]),
            n_givens: 0,
            n_matchers: n,
        }
    }

    fn t(user: usize, given: usize, matcher: usize) -> Triplet {
        Triplet {
            user,
            given,
            matcher,
            split: Split::Train,
        }
    }

    #[test]
    fn build_collects_user_histories() {
        let idx = HistoryIndex::build(&[t(0, 0, 0), t(0, 1, 1)], 1, 2, 2);
        assert_eq!(idx.user_history(0), &[0, 1]);
        assert_eq!(idx.given_history(1), &[1]);
    }

    #[test]
    fn duplicates_are_deduplicated_but_counted() {
        let mut tr = vec![t(0, 0, 1), t(0, 1, 1)];
        tr.push(Triplet {
            split: Split::Test,
            ..t(0, 0, 0)
        });
        let idx = HistoryIndex::build(&tr, 1, 2, 2);
        assert_eq!(idx.user_history(0), &[1]);
        assert_eq!(idx.popularity(1), 2);
        assert_eq!(idx.popularity(0), 0, "non-train records are ignored");
    }

    #[test]
    fn empty_train_set() {
        let idx = HistoryIndex::build(&[], 2, 2, 3);
        assert!(idx.user_history(0).is_empty() && idx.given_history(1).is_empty());
    }

    #[test]
    fn top_n_by_cosine() {
        // matchers 0..3 are history; 3 is the target [1, 0]
        let f = features(&[[1.0, 0.0], [0.0, 1.0], [0.9, 0.1], [1.0, 0.0]]);
        let space = SimilaritySpace::from_features(&f);
        let idx = HistoryIndex::build(&[t(0, 0, 0), t(0, 1, 1), t(0, 2, 2)], 1, 3, 4);
        let q = HistoryQuery {
            anchor: Anchor::User(0),
            target: 3,
            n: 2,
        };
        assert_eq!(idx.query_list(q, &space, true), vec![0, 2]);
        assert!((space.cosine(2, 3) - 0.9 / (0.82f64).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn single_member_is_repeated() {
        let f = features(&[[1.0, 0.0], [0.0, 1.0]]);
        let space = SimilaritySpace::from_features(&f);
        let idx = HistoryIndex::build(&[t(0, 0, 1)], 1, 1, 2);
        let q = HistoryQuery {
            anchor: Anchor::User(0),
            target: 0,
            n: 3,
        };
        assert_eq!(idx.query_list(q, &space, true), vec![1, 1, 1]);
    }

    #[test]
    fn empty_history_falls_back_to_popular() {
        let f = features(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 1.0]]);
        let space = SimilaritySpace::from_features(&f);
        let tr = [
            t(0, 0, 2),
            t(0, 1, 2),
            t(0, 2, 2),
            t(0, 0, 3),
            t(0, 1, 3),
            t(0, 2, 1),
        ];
        let idx = HistoryIndex::build(&tr, 2, 3, 4);
        let q = HistoryQuery {
            anchor: Anchor::User(1),
            target: 0,
            n: 2,
        };
        assert_eq!(idx.query_list(q, &space, true), vec![2, 3]);
        // excluding the target skips it in the popularity list too
        let q = HistoryQuery {
            anchor: Anchor::User(1),
            target: 2,
            n: 2,
        };
        assert_eq!(idx.query_list(q, &space, true), vec![3, 1]);
        // unknown anchors behave like empty histories
        let q = HistoryQuery {
            anchor: Anchor::Given(99),
            target: 0,
            n: 1,
        };
        assert_eq!(idx.query_list(q, &space, true), vec![2]);
    }

    #[test]
    fn target_excluded_only_when_asked() {
        let f = features(&[[1.0, 0.0], [0.0, 1.0]]);
        let space = SimilaritySpace::from_features(&f);
        let idx = HistoryIndex::build(&[t(0, 0, 0), t(0, 0, 1)], 1, 1, 2);
        let q = HistoryQuery {
            anchor: Anchor::User(0),
            target: 0,
            n: 1,
        };
        assert_eq!(idx.query_list(q, &space, false), vec![0]);
        assert_eq!(idx.query_list(q, &space, true), vec![1]);
    }

    #[test]
    fn memoized_lists_match_direct_queries() {
        let f = features(&[[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]);
        let idx = HistoryIndex::build(&[t(0, 0, 0), t(0, 0, 1)], 1, 1, 3);
        let lists = HistoryLists::new(idx.clone(), SimilaritySpace::from_features(&f), true);
        let q = HistoryQuery {
            anchor: Anchor::Given(0),
            target: 2,
            n: 2,
        };
        let first = lists.list(q);
        assert_eq!(first, lists.list(q));
        assert_eq!(first, idx.query_list(q, &lists.space, true));
    }
}
