//! Model directories: `manifest.json` plus one CRFT blob per tensor under
//! `tensors/`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{binary, CatalogSizes};
use crate::error::{Error, Result};
use crate::model::{BranchToggles, Hyperparams, Model, ModelParams, NormMode};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const TENSOR_DIR: &str = "tensors";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub sizes: CatalogSizes,
    pub visual_dim: usize,
    pub textual_dim: usize,
    pub hyperparams: Hyperparams,
    pub toggles: BranchToggles,
    pub eval_norm: NormMode,
    pub seed: u64,
    pub epoch: usize,
    pub tensors: Vec<TensorEntry>,
    /// Fully resolved run configuration, if the caller supplied one.
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Extra fields recorded next to the parameters.
#[derive(Clone, Debug, Default)]
pub struct CheckpointMeta {
    pub eval_norm: Option<NormMode>,
    pub epoch: usize,
    pub config: serde_json::Value,
}

fn file_name(name: &str) -> String {
    format!("{name}.bin")
}

pub fn save(
    model: &Model,
    visual_dim: usize,
    textual_dim: usize,
    meta: &CheckpointMeta,
    dir: &Path,
) -> Result<()> {
    let tensor_dir = dir.join(TENSOR_DIR);
    fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;
    let mut tensors = Vec::new();
    for (p, _) in model.params.params() {
        let (rows, cols) = (p.value.rows(), p.value.cols());
        let file = file_name(&p.name);
        binary::write(&tensor_dir.join(&file), rows, cols, p.value.data())?;
        tensors.push(TensorEntry {
            name: p.name.clone(),
            file,
            shape: p.value.shape().to_vec(),
        });
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        sizes: model.params.sizes,
        visual_dim,
        textual_dim,
        hyperparams: model.hyper.clone(),
        toggles: model.toggles,
        eval_norm: meta.eval_norm.unwrap_or(NormMode::Corpus),
        seed: model.hyper.seed,
        epoch: meta.epoch,
        tensors,
        config: meta.config.clone(),
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            path,
            msg: format!("unsupported checkpoint version {}", manifest.version),
        });
    }
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<(Model, Manifest)> {
    let manifest = load_manifest(dir)?;
    let mut hyper = manifest.hyperparams.clone();
    hyper.init_scale = 0.0;
    let mut model = Model::new(
        manifest.sizes,
        manifest.visual_dim,
        manifest.textual_dim,
        hyper,
        manifest.toggles,
    )?;
    model.hyper = manifest.hyperparams.clone();
    let expected = model.params.params().len();
    if manifest.tensors.len() != expected {
        return Err(Error::Format {
            path: dir.join(MANIFEST),
            msg: format!(
                "{} tensors listed, model has {expected}",
                manifest.tensors.len()
            ),
        });
    }
    for entry in &manifest.tensors {
        let path = dir.join(TENSOR_DIR).join(&entry.file);
        let (count, dim, values) = binary::read(&path)?;
        let param = model
            .params
            .param_mut(&entry.name)
            .ok_or_else(|| Error::Format {
                path: path.clone(),
                msg: format!("unknown tensor `{}`", entry.name),
            })?;
        let shape = param.value.shape().to_vec();
        if shape != entry.shape || count != param.value.rows() || dim != param.value.cols() {
            return Err(Error::shape(
                "checkpoint",
                format!(
                    "{}: stored {count}×{dim}, model expects {shape:?}",
                    entry.name
                ),
            ));
        }
        param.value = Tensor::from_vec(&shape, values)?;
    }
    Ok((model, manifest))
}

/// Parameters only, for callers that already hold the configuration.
pub fn load_params(dir: &Path) -> Result<ModelParams<f32>> {
    Ok(load(dir)?.0.params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let sizes = CatalogSizes {
            users: 4,
            givens: 3,
            matchers: 6,
        };
        let hyper = Hyperparams {
            latent_dim: 3,
            visual_hidden: 2,
            textual_hidden: 5,
            layers: 2,
            learn_feature_deltas: true,
            seed: 9,
            ..Hyperparams::default()
        };
        let mut model = Model::new(sizes, 7, 4, hyper, BranchToggles::default()).unwrap();
        model.params.offset.value.data_mut()[0] = 0.1234567;
        save(&model, 7, 4, &CheckpointMeta::default(), dir.path()).unwrap();
        let (back, manifest) = load(dir.path()).unwrap();
        assert_eq!(manifest.seed, 9);
        assert_eq!(back.hyper, model.hyper);
        for ((a, _), (b, _)) in model.params.params().iter().zip(back.params.params()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load(dir.path()).is_err());
    }
}
