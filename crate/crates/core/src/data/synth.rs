//! Synthetic interaction data with planted preference, matching and
//! consistency structure.
//!
//! Every product gets a latent vector `z`; its visual and textual features
//! are fixed random linear views of `z` plus noise. Users belong to persona
//! clusters and carry a style vector near their cluster center (optionally
//! several, the extra ones near other centers). For each interaction a
//! user, one of their styles and a given product are drawn and the
//! matching product is the candidate in a random pool maximizing
//! `s_u·z_r + z_g·M·z_r`.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Catalog, FeatureStore, FeatureTable, IdSet, Split, Triplet, TripletSet};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_givens: usize,
    pub n_matchers: usize,
    pub n_triplets: usize,
    pub latent_dim: usize,
    pub noise_std: f64,
    pub persona_clusters: usize,
    pub seed: u64,
    /// Spread of user styles around their persona center.
    pub persona_spread: f64,
    pub visual_dim: usize,
    pub textual_dim: usize,
    /// Raw textual features are multiplied by this; the modalities then
    /// arrive on different scales.
    pub textual_scale: f64,
    /// Candidates considered per interaction.
    pub candidate_pool: usize,
    /// Weight of the given–matcher bilinear term relative to user style.
    pub matching_weight: f64,
    /// Style vectors per user. With more than one, each interaction draws
    /// one of them, so a user's choices form several tight groups.
    pub styles_per_user: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 50,
            n_givens: 200,
            n_matchers: 200,
            n_triplets: 2000,
            latent_dim: 8,
            noise_std: 0.05,
            persona_clusters: 5,
            seed: 0,
            persona_spread: 0.3,
            visual_dim: 32,
            textual_dim: 16,
            textual_scale: 10.0,
            candidate_pool: 50,
            matching_weight: 1.0,
            styles_per_user: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_users", self.n_users),
            ("n_givens", self.n_givens),
            ("n_matchers", self.n_matchers),
            ("n_triplets", self.n_triplets),
            ("latent_dim", self.latent_dim),
            ("persona_clusters", self.persona_clusters),
            ("visual_dim", self.visual_dim),
            ("textual_dim", self.textual_dim),
            ("candidate_pool", self.candidate_pool),
            ("styles_per_user", self.styles_per_user),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("synth.{name} must be positive")));
            }
        }
        if !(self.noise_std >= 0.0) || !(self.persona_spread >= 0.0) || !(self.textual_scale > 0.0)
        {
            return Err(Error::Config(
                "synth noise/spread must be ≥ 0 and textual_scale > 0".into(),
            ));
        }
        if self.n_matchers < 2 {
            return Err(Error::Config("synth.n_matchers must be at least 2".into()));
        }
        let capacity = self.n_users as f64 * self.n_givens as f64 * self.n_matchers as f64;
        if (self.n_triplets as f64) > capacity / 4.0 {
            return Err(Error::Config(
                "synth.n_triplets too large for the id space".into(),
            ));
        }
        Ok(())
    }
}

/// The planted latents, kept for validating learned models.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticOracle {
    pub latent_dim: usize,
    pub user_persona: Vec<usize>,
    /// One or more style vectors per user; the first is near the user's
    /// own persona center.
    pub user_styles: Vec<Vec<Vec<f64>>>,
    pub given_latent: Vec<Vec<f64>>,
    pub matcher_latent: Vec<Vec<f64>>,
    /// Row-major `latent_dim × latent_dim`.
    pub bilinear: Vec<f64>,
}

impl SyntheticOracle {
    /// Planted affinity under the user's best-fitting style.
    pub fn score(&self, user: usize, given: usize, matcher: usize) -> f64 {
        (0..self.user_styles[user].len())
            .map(|s| self.score_with_style(user, s, given, matcher))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn score_with_style(&self, user: usize, style: usize, given: usize, matcher: usize) -> f64 {
        let z_r = &self.matcher_latent[matcher];
        let z_g = &self.given_latent[given];
        let style: f64 = self.user_styles[user][style]
            .iter()
            .zip(z_r)
            .map(|(a, b)| a * b)
            .sum();
        let k = self.latent_dim;
        let mut matching = 0.0;
        for i in 0..k {
            let row = &self.bilinear[i * k..(i + 1) * k];
            matching += z_g[i] * row.iter().zip(z_r).map(|(a, b)| a * b).sum::<f64>();
        }
        style + matching
    }
}

pub struct SyntheticData {
    pub catalog: Catalog,
    pub features: FeatureStore,
    /// All records are marked train; split them with `split_triplets`.
    pub triplets: TripletSet,
    pub oracle: SyntheticOracle,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn project(map: &[f64], rows: usize, z: &[f64]) -> Vec<f64> {
    let k = z.len();
    (0..rows)
        .map(|i| {
            map[i * k..(i + 1) * k]
                .iter()
                .zip(z)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.latent_dim;
    let map_scale = 1.0 / (k as f64).sqrt();

    let centers: Vec<Vec<f64>> = (0..cfg.persona_clusters)
        .map(|_| normal_vec(&mut rng, k, 1.0))
        .collect();
    let mut user_persona = Vec::with_capacity(cfg.n_users);
    let mut user_styles = Vec::with_capacity(cfg.n_users);
    for _ in 0..cfg.n_users {
        let c = rng.random_range(0..cfg.persona_clusters);
        user_persona.push(c);
        let styles: Vec<Vec<f64>> = (0..cfg.styles_per_user)
            .map(|s| {
                let center = if s == 0 {
                    c
                } else {
                    rng.random_range(0..cfg.persona_clusters)
                };
                let jitter = normal_vec(&mut rng, k, cfg.persona_spread);
                centers[center]
                    .iter()
                    .zip(&jitter)
                    .map(|(a, b)| a + b)
                    .collect()
            })
            .collect();
        user_styles.push(styles);
    }
    let given_latent: Vec<Vec<f64>> = (0..cfg.n_givens)
        .map(|_| normal_vec(&mut rng, k, 1.0))
        .collect();
    let matcher_latent: Vec<Vec<f64>> = (0..cfg.n_matchers)
        .map(|_| normal_vec(&mut rng, k, 1.0))
        .collect();
    let visual_map = normal_vec(&mut rng, cfg.visual_dim * k, map_scale);
    let textual_map = normal_vec(&mut rng, cfg.textual_dim * k, map_scale);
    let bilinear: Vec<f64> = normal_vec(&mut rng, k * k, map_scale)
        .into_iter()
        .map(|x| x * cfg.matching_weight)
        .collect();

    let pad = |n: usize| n.saturating_sub(1).to_string().len().max(4);
    let (pu, pg, pr) = (pad(cfg.n_users), pad(cfg.n_givens), pad(cfg.n_matchers));
    let catalog = Catalog {
        users: IdSet::from_ids("user", (0..cfg.n_users).map(|i| format!("u{i:0pu$}")))?,
        givens: IdSet::from_ids("given", (0..cfg.n_givens).map(|i| format!("g{i:0pg$}")))?,
        matchers: IdSet::from_ids("matcher", (0..cfg.n_matchers).map(|i| format!("r{i:0pr$}")))?,
    };

    let mut visual = FeatureTable::new(cfg.visual_dim);
    let mut textual = FeatureTable::new(cfg.textual_dim);
    let products = catalog
        .givens
        .ids()
        .iter()
        .zip(&given_latent)
        .chain(catalog.matchers.ids().iter().zip(&matcher_latent));
    for (id, z) in products {
        let v: Vec<f32> = project(&visual_map, cfg.visual_dim, z)
            .into_iter()
            .zip(normal_vec(&mut rng, cfg.visual_dim, cfg.noise_std))
            .map(|(a, n)| (a + n) as f32)
            .collect();
        let w: Vec<f32> = project(&textual_map, cfg.textual_dim, z)
            .into_iter()
            .zip(normal_vec(&mut rng, cfg.textual_dim, cfg.noise_std))
            .map(|(a, n)| (cfg.textual_scale * (a + n)) as f32)
            .collect();
        visual.push(id.clone(), &v)?;
        textual.push(id.clone(), &w)?;
    }

    let oracle = SyntheticOracle {
        latent_dim: k,
        user_persona,
        user_styles,
        given_latent,
        matcher_latent,
        bilinear,
    };

    let pool = cfg.candidate_pool.min(cfg.n_matchers);
    let mut seen = HashSet::with_capacity(cfg.n_triplets);
    let mut records = Vec::with_capacity(cfg.n_triplets);
    while records.len() < cfg.n_triplets {
        let user = rng.random_range(0..cfg.n_users);
        let given = rng.random_range(0..cfg.n_givens);
        let style = rng.random_range(0..cfg.styles_per_user);
        let matcher = sample(&mut rng, cfg.n_matchers, pool)
            .into_iter()
            .map(|r| (r, oracle.score_with_style(user, style, given, r)))
            .fold((usize::MAX, f64::NEG_INFINITY), |best, (r, s)| {
                if s > best.1 || (s == best.1 && r < best.0) {
                    (r, s)
                } else {
                    best
                }
            })
            .0;
        if seen.insert((user, given, matcher)) {
            records.push(Triplet {
                user,
                given,
                matcher,
                split: Split::Train,
            });
        }
    }

    Ok(SyntheticData {
        catalog,
        features: FeatureStore { visual, textual },
        triplets: TripletSet::new(records)?,
        oracle,
    })
}
