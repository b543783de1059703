//! Run configuration: a JSON object with flat dotted keys such as
//! `"model.mu"` or `"train.learning_rate"`. Every key has a default; the
//! resolved set is echoed next to each run's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use crbpr::data::{SplitRatios, SynthConfig};
use crbpr::eval::EvalProtocol;
use crbpr::model::{BranchToggles, Hyperparams, NormMode};
use crbpr::optim::AdamConfig;
use crbpr::trainer::{variant_config, GridSpec, DEFAULT_VARIANTS};
use crbpr::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub dir: Option<PathBuf>,
    pub min_interactions: usize,
    pub exclude_target: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dir: None,
            min_interactions: 1,
            exclude_target: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Model or ablation variant name: `CR-BPR`, `GP-BPR`, `-w/o UC`, ...
    pub variant: String,
    pub eta: f64,
    pub pi: f64,
    pub mu: f64,
    pub phi_gc: f64,
    pub phi_uc: f64,
    pub lambda: f64,
    pub history_len: usize,
    pub latent_dim: usize,
    pub visual_hidden: usize,
    pub textual_hidden: usize,
    pub layers: usize,
    pub feature_scaling: bool,
    pub learn_feature_deltas: bool,
    pub init_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let h = Hyperparams::default();
        ModelSection {
            variant: "CR-BPR".into(),
            eta: h.eta,
            pi: h.pi,
            mu: h.mu,
            phi_gc: h.phi_gc,
            phi_uc: h.phi_uc,
            lambda: h.lambda,
            history_len: h.history_len,
            latent_dim: h.latent_dim,
            visual_hidden: h.visual_hidden,
            textual_hidden: h.textual_hidden,
            layers: h.layers,
            feature_scaling: h.feature_scaling,
            learn_feature_deltas: h.learn_feature_deltas,
            init_scale: h.init_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub strict_negatives: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let h = Hyperparams::default();
        TrainSection {
            learning_rate: h.learning_rate,
            batch_size: h.batch_size,
            max_epochs: h.max_epochs,
            patience: h.patience,
            strict_negatives: false,
            adam_beta1: h.adam.beta1,
            adam_beta2: h.adam.beta2,
            adam_eps: h.adam.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub k: usize,
    pub n_candidates: usize,
    pub norm: NormMode,
    pub format: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        let p = EvalProtocol::default();
        EvalSection {
            k: p.k,
            n_candidates: p.n_candidates,
            norm: p.norm,
            format: "both".into(),
        }
    }
}

/// Generator settings; the generator seed is the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n_users: usize,
    pub n_givens: usize,
    pub n_matchers: usize,
    pub n_triplets: usize,
    pub latent_dim: usize,
    pub noise_std: f64,
    pub persona_clusters: usize,
    pub persona_spread: f64,
    pub visual_dim: usize,
    pub textual_dim: usize,
    pub textual_scale: f64,
    pub candidate_pool: usize,
    pub matching_weight: f64,
    pub styles_per_user: usize,
    pub train_ratio: f64,
    pub valid_ratio: f64,
    pub test_ratio: f64,
    /// Write CRFT binary features instead of TSV.
    pub binary: bool,
}

impl Default for SynthSection {
    fn default() -> Self {
        let c = SynthConfig::default();
        let r = SplitRatios::default();
        SynthSection {
            n_users: c.n_users,
            n_givens: c.n_givens,
            n_matchers: c.n_matchers,
            n_triplets: c.n_triplets,
            latent_dim: c.latent_dim,
            noise_std: c.noise_std,
            persona_clusters: c.persona_clusters,
            persona_spread: c.persona_spread,
            visual_dim: c.visual_dim,
            textual_dim: c.textual_dim,
            textual_scale: c.textual_scale,
            candidate_pool: c.candidate_pool,
            matching_weight: c.matching_weight,
            styles_per_user: c.styles_per_user,
            train_ratio: r.train,
            valid_ratio: r.valid,
            test_ratio: r.test,
            binary: false,
        }
    }
}

impl SynthSection {
    pub fn generator(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            n_users: self.n_users,
            n_givens: self.n_givens,
            n_matchers: self.n_matchers,
            n_triplets: self.n_triplets,
            latent_dim: self.latent_dim,
            noise_std: self.noise_std,
            persona_clusters: self.persona_clusters,
            seed,
            persona_spread: self.persona_spread,
            visual_dim: self.visual_dim,
            textual_dim: self.textual_dim,
            textual_scale: self.textual_scale,
            candidate_pool: self.candidate_pool,
            matching_weight: self.matching_weight,
            styles_per_user: self.styles_per_user,
        }
    }

    pub fn ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.train_ratio,
            valid: self.valid_ratio,
            test: self.test_ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub variants: Vec<String>,
    /// Empty means five consecutive seeds starting at the run seed.
    pub seeds: Vec<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            variants: DEFAULT_VARIANTS.iter().map(|s| s.to_string()).collect(),
            seeds: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub batch_size: Vec<usize>,
    pub lambda: Vec<f64>,
    pub hidden: Vec<usize>,
    pub learning_rate: Vec<f64>,
}

impl Default for GridSection {
    fn default() -> Self {
        let h = Hyperparams::default();
        GridSection {
            batch_size: vec![h.batch_size],
            lambda: vec![h.lambda],
            hidden: vec![h.latent_dim],
            learning_rate: vec![h.learning_rate],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub synth: SynthSection,
    pub ablate: AblateSection,
    pub grid: GridSection,
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// `{"a.b": 1}` → `{"a": {"b": 1}}`. Nested objects are merged too.
fn unflatten(flat: &Map<String, Value>) -> Result<Value> {
    let mut root = Map::new();
    for (key, value) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(config_error(format!("malformed key `{key}`")));
        }
        let mut node = &mut root;
        for part in &parts[..parts.len() - 1] {
            let entry = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            node = entry
                .as_object_mut()
                .ok_or_else(|| config_error(format!("key `{key}` conflicts with a scalar")))?;
        }
        let last = parts[parts.len() - 1].to_string();
        match (node.get_mut(&last), value) {
            (Some(Value::Object(existing)), Value::Object(extra)) => {
                for (k, v) in extra {
                    existing.insert(k.clone(), v.clone());
                }
            }
            (Some(_), _) => return Err(config_error(format!("key `{key}` given twice"))),
            (None, v) => {
                node.insert(last, v.clone());
            }
        }
    }
    Ok(Value::Object(root))
}

fn flatten_into(prefix: &str, value: &Value, out: &mut Map<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

impl RunConfig {
    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| config_error(format!("{}: {e}", origin.display())))?;
        let Value::Object(flat) = value else {
            return Err(config_error(format!(
                "{}: config must be a JSON object",
                origin.display()
            )));
        };
        let nested = unflatten(&flat)?;
        serde_json::from_value(nested)
            .map_err(|e| config_error(format!("{}: {e}", origin.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text, path)
    }

    /// Every key with its resolved value, flat and sorted.
    pub fn resolved(&self) -> Value {
        let nested = serde_json::to_value(self).expect("config serializes");
        let mut flat = Map::new();
        flatten_into("", &nested, &mut flat);
        Value::Object(flat)
    }

    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(&self.resolved()).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| config_error(format!("{}: {e}", dir.display())))?;
        let path = dir.join("config.resolved.json");
        let text = serde_json::to_string_pretty(&self.resolved()).expect("config serializes");
        fs::write(&path, text + "\n")
            .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        Ok(path)
    }

    /// Hyperparameters before applying the variant.
    pub fn base_hyperparams(&self, seed: u64) -> Hyperparams {
        let (m, t) = (&self.model, &self.train);
        Hyperparams {
            eta: m.eta,
            pi: m.pi,
            mu: m.mu,
            phi_gc: m.phi_gc,
            phi_uc: m.phi_uc,
            lambda: m.lambda,
            history_len: m.history_len,
            latent_dim: m.latent_dim,
            visual_hidden: m.visual_hidden,
            textual_hidden: m.textual_hidden,
            layers: m.layers,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed,
            feature_scaling: m.feature_scaling,
            learn_feature_deltas: m.learn_feature_deltas,
            init_scale: m.init_scale,
            adam: AdamConfig {
                beta1: t.adam_beta1,
                beta2: t.adam_beta2,
                eps: t.adam_eps,
            },
        }
    }

    /// Hyperparameters and toggles of `model.variant`.
    pub fn model_config(&self, seed: u64) -> Result<(Hyperparams, BranchToggles)> {
        let base = self.base_hyperparams(seed);
        base.validate()?;
        variant_config(&self.model.variant, &base)
    }

    pub fn protocol(&self, seed: u64) -> Result<EvalProtocol> {
        let p = EvalProtocol {
            k: self.eval.k,
            n_candidates: self.eval.n_candidates,
            seed,
            norm: self.eval.norm,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            batch_size: self.grid.batch_size.clone(),
            lambda: self.grid.lambda.clone(),
            hidden: self.grid.hidden.clone(),
            learning_rate: self.grid.learning_rate.clone(),
        }
    }

    pub fn ablation_seeds(&self, seed: u64) -> Vec<u64> {
        if self.ablate.seeds.is_empty() {
            (0..5).map(|i| seed + i).collect()
        } else {
            self.ablate.seeds.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::from_json_str(text, Path::new("test.json"))
    }

    #[test]
    fn dotted_keys_override_defaults() {
        let c = parse(r#"{"model.mu": 0.25, "train.learning_rate": 0.5, "seed": 3}"#).unwrap();
        assert_eq!(c.model.mu, 0.25);
        assert_eq!(c.train.learning_rate, 0.5);
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.model.eta, Hyperparams::default().eta);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = parse(r#"{"model.muu": 0.25}"#).unwrap_err().to_string();
        assert!(err.contains("muu"), "{err}");
        assert!(parse(r#"{"nonsense": 1}"#).is_err());
    }

    #[test]
    fn wrong_types_rejected() {
        assert!(parse(r#"{"train.batch_size": "big"}"#).is_err());
        assert!(parse("[1, 2]").is_err());
    }

    #[test]
    fn resolved_round_trips() {
        let c = parse(r#"{"eval.norm": "batch", "ablate.variants": ["-w/o UC"]}"#).unwrap();
        let text = serde_json::to_string(&c.resolved()).unwrap();
        assert!(text.contains("\"eval.norm\":\"batch\""));
        assert_eq!(parse(&text).unwrap(), c);
        assert_eq!(parse(&text).unwrap().fingerprint(), c.fingerprint());
    }

    #[test]
    fn variant_controls_toggles() {
        let c = parse(r#"{"model.variant": "MF-BPR"}"#).unwrap();
        let (h, t) = c.model_config(1).unwrap();
        assert!(!t.use_g && !t.use_visual && h.mu == 0.0 && h.seed == 1);
        assert!(parse(r#"{"model.variant": "nope"}"#)
            .unwrap()
            .model_config(1)
            .is_err());
    }
}
