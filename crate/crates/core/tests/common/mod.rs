#![allow(dead_code)]

use crbpr::data::{generate_synthetic, split_triplets, Dataset, SplitRatios, SynthConfig};
use crbpr::model::Hyperparams;
use crbpr::trainer::PreparedData;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 5 users, 8 givens, 8 matchers.
pub fn toy_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        n_users: 5,
        n_givens: 8,
        n_matchers: 8,
        n_triplets: 40,
        latent_dim: 4,
        persona_clusters: 2,
        visual_dim: 6,
        textual_dim: 5,
        candidate_pool: 8,
        textual_scale: 1.0,
        seed,
        ..SynthConfig::default()
    }
}

pub fn dataset(cfg: &SynthConfig, ratios: SplitRatios, split_seed: u64) -> Dataset {
    let data = generate_synthetic(cfg).expect("synthetic data");
    let triplets = split_triplets(&data.triplets, ratios, split_seed).expect("split");
    Dataset::new(data.catalog, data.features, triplets).expect("dataset")
}

pub fn toy_data(seed: u64) -> PreparedData {
    let ratios = SplitRatios {
        train: 0.6,
        valid: 0.2,
        test: 0.2,
    };
    PreparedData::new(&dataset(&toy_synth(seed), ratios, seed), true).expect("prepared data")
}

/// Every dimension 4, one layer, visible initial weights.
pub fn toy_hyper(seed: u64) -> Hyperparams {
    Hyperparams {
        latent_dim: 4,
        visual_hidden: 4,
        textual_hidden: 4,
        layers: 1,
        history_len: 2,
        init_scale: 1.0,
        lambda: 0.01,
        seed,
        ..Hyperparams::default()
    }
}

/// `b` train positives followed by one uniform negative each.
pub fn pair_batch(
    data: &PreparedData,
    b: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize, usize)> {
    let mut pos = Vec::with_capacity(b);
    for _ in 0..b {
        let t = data.train[rng.random_range(0..data.train.len())];
        pos.push((t.user, t.given, t.matcher));
    }
    let mut neg: Vec<_> = pos
        .iter()
        .map(|&(u, g, r)| {
            let n = data.sizes.matchers;
            let x = rng.random_range(0..n - 1);
            (u, g, if x >= r { x + 1 } else { x })
        })
        .collect();
    pos.append(&mut neg);
    pos
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
