mod common;

use crbpr::data::ProductFeatures;
use crbpr::eval::{auc_from_scores, hit_ratio, mrr, ndcg, rank_of_positive};
use crbpr::history::{Anchor, HistoryQuery};
use crbpr::model::{
    Branch, BranchToggles, FusionWeights, Hyperparams, Modality, ModelParams, NormContext,
    ProductSide, ScoreBatch,
};
use crbpr::tensor::{batch_feature_scale, sigmoid, Tensor};
use crbpr::trainer::{bpr_loss, bpr_loss_value, PreparedData};
use proptest::prelude::*;

const NORM_EPS: f64 = 1e-12;

fn matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..6, 1usize..8)
        .prop_flat_map(|(d, l)| (Just(d), Just(l), prop::collection::vec(-5.0f64..5.0, d * l)))
}

struct Fixture {
    data: PreparedData,
    feats: ProductFeatures<f64>,
    params: ModelParams<f64>,
    hyper: Hyperparams,
}

fn fixture(seed: u64) -> Fixture {
    let data = common::toy_data(seed);
    let hyper = common::toy_hyper(seed);
    let feats = data.features.cast::<f64>();
    let params =
        ModelParams::<f64>::init(data.sizes, data.visual_dim(), data.textual_dim(), &hyper);
    Fixture {
        data,
        feats,
        params,
        hyper,
    }
}

fn batch_of(fx: &Fixture, triplets: &[(usize, usize, usize)], w: &FusionWeights) -> ScoreBatch {
    ScoreBatch::with_lists(triplets, &fx.data.lists, fx.hyper.history_len, w)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scaling_ignores_positive_row_factors((d, l, data) in matrix(), factors in prop::collection::vec(0.01f64..100.0, 6)) {
        let v = Tensor::from_vec(&[d, l], data.clone()).unwrap();
        let mut scaled = data;
        for m in 0..d {
            scaled[m * l..(m + 1) * l].iter_mut().for_each(|x| *x *= factors[m]);
        }
        let a = batch_feature_scale(&v, NORM_EPS);
        let b = batch_feature_scale(&Tensor::from_vec(&[d, l], scaled).unwrap(), NORM_EPS);
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
        let again = batch_feature_scale(&a, NORM_EPS);
        for m in 0..d {
            let norm = dot(a.row(m), a.row(m)).sqrt();
            prop_assert!(norm <= 1.0 + 1e-9);
            for (x, y) in a.row(m).iter().zip(again.row(m)) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn sigmoid_stays_in_unit_interval(x in -800.0f64..800.0) {
        let s = sigmoid(x);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((s + sigmoid(-x) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_survive_increasing_transforms(pos in -3.0f64..3.0, negs in prop::collection::vec(-3.0f64..3.0, 1..40), k in 1usize..20) {
        let r = rank_of_positive(pos, &negs);
        let f = |x: f64| 2.0 * x.exp() + 1.0;
        let t: Vec<f64> = negs.iter().map(|&x| f(x)).collect();
        prop_assert_eq!(r, rank_of_positive(f(pos), &t));
        prop_assert!(hit_ratio(r, k) >= ndcg(r, k));
        prop_assert!(ndcg(r, k) >= mrr(r, k));
        for m in [hit_ratio(r, k), ndcg(r, k), mrr(r, k)] {
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn rank_counts_ties_against_the_positive(pos in 0i32..4, negs in prop::collection::vec(0i32..4, 1..20)) {
        let neg: Vec<f64> = negs.iter().map(|&x| x as f64).collect();
        let mut all: Vec<(f64, bool)> = neg.iter().map(|&x| (x, false)).collect();
        all.push((pos as f64, true));
        // sorted descending, the positive placed after every equal negative
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let brute = all.iter().position(|e| e.1).unwrap() + 1;
        prop_assert_eq!(rank_of_positive(pos as f64, &neg), brute);
    }

    #[test]
    fn auc_is_mean_pair_credit(pairs in prop::collection::vec((0i32..5, 0i32..5), 1..50)) {
        let p: Vec<f64> = pairs.iter().map(|t| t.0 as f64).collect();
        let n: Vec<f64> = pairs.iter().map(|t| t.1 as f64).collect();
        let wins = pairs.iter().filter(|t| t.0 > t.1).count() as f64;
        let ties = pairs.iter().filter(|t| t.0 == t.1).count() as f64;
        let auc = auc_from_scores(&p, &n).unwrap();
        prop_assert!((auc - (wins + 0.5 * ties) / pairs.len() as f64).abs() < 1e-12);
        let flipped = auc_from_scores(&n, &p).unwrap();
        prop_assert!((auc + flipped - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fusion_is_linear(a in prop::array::uniform4(-5.0f64..5.0), b in prop::array::uniform4(-5.0f64..5.0), c in -3.0f64..3.0,
                        mu in 0.0f64..1.0, phi_gc in 0.0f64..3.0, phi_uc in 0.0f64..3.0) {
        let h = Hyperparams { mu, phi_gc, phi_uc, ..Hyperparams::default() };
        let w = FusionWeights::new(&h, &BranchToggles::default());
        let f = |s: [f64; 4]| w.fuse(s[0], s[1], s[2], s[3]);
        let sum = [a[0] + c * b[0], a[1] + c * b[1], a[2] + c * b[2], a[3] + c * b[3]];
        prop_assert!((f(sum) - f(a) - c * f(b)).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn offset_shifts_every_candidate_equally(seed in 0u64..1000, delta in -5.0f64..5.0) {
        let mut fx = fixture(seed);
        let w = FusionWeights::new(&fx.hyper, &BranchToggles::default());
        let t = fx.data.train[0];
        let triplets: Vec<_> = (0..fx.data.sizes.matchers).map(|r| (t.user, t.given, r)).collect();
        let batch = batch_of(&fx, &triplets, &w);
        let before = fx.params.score(&fx.feats, &batch, &w, &NormContext::Batch).unwrap().overall;
        fx.params.offset.value.data_mut()[0] += delta;
        let after = fx.params.score(&fx.feats, &batch, &w, &NormContext::Batch).unwrap().overall;
        let shift = w.preference * delta;
        for (x, y) in before.iter().zip(&after) {
            prop_assert!((y - x - shift).abs() < 1e-9);
        }
    }

    #[test]
    fn branches_are_isolated(seed in 0u64..1000, scale in 0.1f64..3.0) {
        let mut fx = fixture(seed);
        let w = FusionWeights::new(&fx.hyper, &BranchToggles::default());
        let triplets: Vec<_> = fx.data.train.iter().take(6).map(|t| (t.user, t.given, t.matcher)).collect();
        let batch = batch_of(&fx, &triplets, &w);
        let before = fx.params.score(&fx.feats, &batch, &w, &NormContext::Batch).unwrap();
        for m in Modality::ALL {
            for layer in &mut fx.params.stack_mut(Branch::Matching, m).layers {
                layer.weight.value.data_mut().iter_mut().for_each(|x| *x = *x * scale + 0.3);
            }
        }
        let after = fx.params.score(&fx.feats, &batch, &w, &NormContext::Batch).unwrap();
        prop_assert_eq!(&before.preference, &after.preference);
        prop_assert_eq!(&before.user_consistency, &after.user_consistency);
        prop_assert_eq!(&before.given_consistency, &after.given_consistency);
    }

    #[test]
    fn consistency_is_mean_of_slot_dots(seed in 0u64..1000, n in 1usize..4) {
        let mut fx = fixture(seed);
        fx.hyper.history_len = n;
        let w = FusionWeights::new(&fx.hyper, &BranchToggles::default());
        let triplets: Vec<_> = fx.data.train.iter().take(5).map(|t| (t.user, t.given, t.matcher)).collect();
        let l = triplets.len();
        let batch = batch_of(&fx, &triplets, &w);
        let s = fx.params.score(&fx.feats, &batch, &w, &NormContext::Batch).unwrap();
        for (branch, lists, got) in [
            (Branch::UserConsistency, &batch.user_lists, &s.user_consistency),
            (Branch::GivenConsistency, &batch.given_lists, &s.given_consistency),
        ] {
            let mut want = vec![0.0; l];
            for m in Modality::ALL {
                let rep = |ids: &[usize]| fx.params.represent(&fx.feats, ProductSide::Matcher, ids, branch, m, &NormContext::Batch).unwrap();
                let target = rep(&batch.matchers);
                let weight = w.modality_weight(branch, m);
                for k in 0..n {
                    let member = rep(ScoreBatch::list_slot(lists, l, k));
                    for (j, v) in want.iter_mut().enumerate() {
                        let col = |t: &Tensor<f64>| (0..t.rows()).map(|r| t.get2(r, j)).collect::<Vec<_>>();
                        *v += weight * dot(&col(&member), &col(&target)) / n as f64;
                    }
                }
            }
            for (a, b) in want.iter().zip(got) {
                prop_assert!((a - b).abs() < 1e-9, "{:?}: {} vs {}", branch, a, b);
            }
        }
    }

    #[test]
    fn loss_is_positive_and_grows_with_lambda(seed in 0u64..1000, lambda in 0.0f64..1.0) {
        let fx = fixture(seed);
        let w = FusionWeights::new(&fx.hyper, &BranchToggles::default());
        let pairs = common::pair_batch(&fx.data, 4, &mut common::rng(seed));
        let batch = batch_of(&fx, &pairs, &w);
        let lo = bpr_loss_value(&fx.params, &fx.feats, &batch, &w, &NormContext::Batch, lambda).unwrap();
        let hi = bpr_loss_value(&fx.params, &fx.feats, &batch, &w, &NormContext::Batch, lambda + 0.5).unwrap();
        prop_assert!(lo.bpr > 0.0 && lo.penalty >= 0.0);
        prop_assert!(hi.total() > lo.total());
        prop_assert_eq!(lo.bpr, hi.bpr);
    }

    #[test]
    fn small_gradient_step_does_not_raise_loss(seed in 0u64..1000) {
        let mut fx = fixture(seed);
        let w = FusionWeights::new(&fx.hyper, &BranchToggles::default());
        let pairs = common::pair_batch(&fx.data, 4, &mut common::rng(seed));
        let batch = batch_of(&fx, &pairs, &w);
        let lambda = fx.hyper.lambda;
        fx.params.zero_grad();
        let before = bpr_loss(&mut fx.params, &fx.feats, &batch, &w, &NormContext::Batch, lambda).unwrap().total();
        for p in fx.params.params_mut() {
            let g = p.grad.data().to_vec();
            p.value.data_mut().iter_mut().zip(g).for_each(|(x, g)| *x -= 1e-4 * g);
        }
        let after = bpr_loss_value(&fx.params, &fx.feats, &batch, &w, &NormContext::Batch, lambda).unwrap().total();
        prop_assert!(after <= before + 1e-12, "{} -> {}", before, after);
    }

    #[test]
    fn history_lists_have_requested_length(seed in 0u64..1000, n in 1usize..6) {
        let data = common::toy_data(seed);
        let s = data.sizes;
        for u in 0..s.users {
            for r in 0..s.matchers {
                for anchor in [Anchor::User(u), Anchor::Given(u % s.givens)] {
                    let list = data.lists.list(HistoryQuery { anchor, target: r, n });
                    prop_assert_eq!(list.len(), n);
                    prop_assert!(list.iter().all(|&m| m < s.matchers));
                    prop_assert!(list.iter().all(|&m| m != r), "target leaked into its own list");
                }
            }
        }
    }
}
