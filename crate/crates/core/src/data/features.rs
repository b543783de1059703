use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{binary, Catalog};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Fixed-width float vectors keyed by product id.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureTable {
    pub fn new(dim: usize) -> Self {
        FeatureTable {
            ids: Vec::new(),
            index: HashMap::new(),
            dim,
            data: Vec::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, values: &[f32]) -> Result<()> {
        let id = id.into();
        if values.len() != self.dim {
            return Err(Error::shape(
                "feature table",
                format!(
                    "product {id} has {} values, table width is {}",
                    values.len(),
                    self.dim
                ),
            ));
        }
        if self.index.contains_key(&id) {
            return Err(Error::Duplicate(format!("feature row for `{id}`")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(values);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index
            .get(id)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    /// Read a table, detecting CRFT binary by its magic bytes and falling
    /// back to TSV otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if binary::is_crft(&bytes) {
            Self::from_binary(path, &bytes)
        } else {
            let text = String::from_utf8(bytes).map_err(|_| Error::Format {
                path: path.to_path_buf(),
                msg: "feature file is neither CRFT nor UTF-8 TSV".into(),
            })?;
            Self::from_tsv(path, &text)
        }
    }

    fn from_tsv(path: &Path, text: &str) -> Result<Self> {
        let mut table: Option<FeatureTable> = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Load {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let mut cols = line.split('\t');
            let id = cols.next().unwrap_or_default().trim();
            let values = cols
                .map(|c| c.trim().parse::<f32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| err(format!("product {id}: {e}")))?;
            if values.is_empty() {
                return Err(err(format!("product {id} has no feature values")));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(err(format!("product {id} has a non-finite feature value")));
            }
            let t = table.get_or_insert_with(|| FeatureTable::new(values.len()));
            if values.len() != t.dim {
                return Err(err(format!(
                    "product {id} has {} values, expected {}",
                    values.len(),
                    t.dim
                )));
            }
            t.push(id, &values).map_err(|e| err(e.to_string()))?;
        }
        table.ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: "empty feature file".into(),
        })
    }

    fn from_binary(path: &Path, bytes: &[u8]) -> Result<Self> {
        let (count, dim, values) = binary::decode(path, bytes)?;
        let sidecar = sidecar_path(path);
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let mut ids = vec![None; count];
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Load {
                path: sidecar.clone(),
                line: i + 1,
                msg,
            };
            let (row, id) = line
                .split_once('\t')
                .ok_or_else(|| err("expected row_index\\tproduct_id".into()))?;
            let row: usize = row
                .trim()
                .parse()
                .map_err(|_| err(format!("bad row index `{row}`")))?;
            if row >= count {
                return Err(err(format!("row index {row} beyond {count} rows")));
            }
            ids[row] = Some(id.trim().to_string());
        }
        let mut table = FeatureTable::new(dim);
        for (row, id) in ids.into_iter().enumerate() {
            let id = id.ok_or_else(|| Error::Format {
                path: sidecar.clone(),
                msg: format!("no product id for row {row}"),
            })?;
            let v = &values[row * dim..(row + 1) * dim];
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Load {
                    path: path.to_path_buf(),
                    line: row,
                    msg: format!("product {id} has a non-finite feature value"),
                });
            }
            table.push(id, v)?;
        }
        Ok(table)
    }

    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for (i, id) in self.ids.iter().enumerate() {
            text.push_str(id);
            for v in &self.data[i * self.dim..(i + 1) * self.dim] {
                // `{}` on f32 prints the shortest string that parses back exactly.
                text.push('\t');
                text.push_str(&v.to_string());
            }
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        binary::write(path, self.len(), self.dim, &self.data)?;
        let sidecar = sidecar_path(path);
        let text: String = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| format!("{i}\t{id}\n"))
            .collect();
        fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
    }
}

/// `visual.bin` → `visual.ids.tsv`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("ids.tsv")
}

/// Pretrained visual and textual vectors for every product.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    pub visual: FeatureTable,
    pub textual: FeatureTable,
}

impl FeatureStore {
    pub fn load(visual_path: &Path, textual_path: &Path) -> Result<Self> {
        Ok(FeatureStore {
            visual: FeatureTable::load(visual_path)?,
            textual: FeatureTable::load(textual_path)?,
        })
    }

    pub fn visual_dim(&self) -> usize {
        self.visual.dim()
    }

    pub fn textual_dim(&self) -> usize {
        self.textual.dim()
    }

    /// Every given and matching product must have both vectors.
    pub fn validate(&self, catalog: &Catalog) -> Result<()> {
        for id in catalog.givens.ids().iter().chain(catalog.matchers.ids()) {
            for (table, modality) in [(&self.visual, "visual"), (&self.textual, "textual")] {
                if table.get(id).is_none() {
                    return Err(Error::Format {
                        path: PathBuf::from(modality),
                        msg: format!("missing {modality} features for product `{id}`"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Features laid out densely by product row: givens first, then matchers,
/// matching the row order of the item embedding table.
#[derive(Clone, Debug)]
pub struct ProductFeatures<T = f32> {
    pub visual: Tensor<T>,
    pub textual: Tensor<T>,
    pub n_givens: usize,
    pub n_matchers: usize,
}

impl<T: Real> ProductFeatures<T> {
    pub fn from_store(store: &FeatureStore, catalog: &Catalog) -> Result<Self> {
        store.validate(catalog)?;
        let ids: Vec<&String> = catalog
            .givens
            .ids()
            .iter()
            .chain(catalog.matchers.ids())
            .collect();
        let gather = |table: &FeatureTable| -> Tensor<T> {
            let data = ids
                .iter()
                .flat_map(|id| table.get(id).unwrap().iter().map(|&x| T::of(x as f64)))
                .collect();
            Tensor::from_vec(&[ids.len(), table.dim()], data).unwrap()
        };
        Ok(ProductFeatures {
            visual: gather(&store.visual),
            textual: gather(&store.textual),
            n_givens: catalog.givens.len(),
            n_matchers: catalog.matchers.len(),
        })
    }

    pub fn given_row(&self, given: usize) -> usize {
        given
    }

    pub fn matcher_row(&self, matcher: usize) -> usize {
        self.n_givens + matcher
    }

    pub fn cast<U: Real>(&self) -> ProductFeatures<U> {
        ProductFeatures {
            visual: self.visual.cast(),
            textual: self.textual.cast(),
            n_givens: self.n_givens,
            n_matchers: self.n_matchers,
        }
    }
}
