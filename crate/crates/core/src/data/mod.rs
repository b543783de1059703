//! Entity catalogs, interaction triplets, feature stores and the synthetic
//! generator.

pub mod binary;
mod features;
mod split;
mod synth;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use features::{FeatureStore, FeatureTable, ProductFeatures};
pub use split::{split_triplets, SplitRatios};
pub use synth::{generate_synthetic, SynthConfig, SyntheticData, SyntheticOracle};

/// Ordered set of string ids with dense indices in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IdSet {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_ids<I, S>(kind: &'static str, ids: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set = IdSet::new();
        for id in ids {
            let id = id.into();
            if set.index.contains_key(&id) {
                return Err(Error::Duplicate(format!("{kind} id `{id}`")));
            }
            set.insert(id);
        }
        Ok(set)
    }

    /// Index of `id`, adding it if new.
    pub fn insert(&mut self, id: String) -> usize {
        if let Some(&i) = self.index.get(&id) {
            return i;
        }
        let i = self.ids.len();
        self.index.insert(id.clone(), i);
        self.ids.push(id);
        i
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Users, given products and matching products.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Catalog {
    pub users: IdSet,
    pub givens: IdSet,
    pub matchers: IdSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogSizes {
    pub users: usize,
    pub givens: usize,
    pub matchers: usize,
}

impl Catalog {
    pub fn sizes(&self) -> CatalogSizes {
        CatalogSizes {
            users: self.users.len(),
            givens: self.givens.len(),
            matchers: self.matchers.len(),
        }
    }

    pub fn user(&self, id: &str) -> Result<usize> {
        self.users.get(id).ok_or_else(|| Error::UnknownId {
            kind: "user",
            id: id.to_string(),
        })
    }

    pub fn given(&self, id: &str) -> Result<usize> {
        self.givens.get(id).ok_or_else(|| Error::UnknownId {
            kind: "given product",
            id: id.to_string(),
        })
    }

    pub fn matcher(&self, id: &str) -> Result<usize> {
        self.matchers.get(id).ok_or_else(|| Error::UnknownId {
            kind: "matching product",
            id: id.to_string(),
        })
    }

    /// Read `users.txt`, `givens.txt` and `matchers.txt` (one id per line).
    pub fn load_dir(dir: &Path) -> Result<Self> {
        Ok(Catalog {
            users: read_id_list(&dir.join(USERS_FILE), "user")?,
            givens: read_id_list(&dir.join(GIVENS_FILE), "given product")?,
            matchers: read_id_list(&dir.join(MATCHERS_FILE), "matching product")?,
        })
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        write_id_list(&dir.join(USERS_FILE), &self.users)?;
        write_id_list(&dir.join(GIVENS_FILE), &self.givens)?;
        write_id_list(&dir.join(MATCHERS_FILE), &self.matchers)
    }

    /// Catalog of every id referenced by a triplet file, in first-seen order.
    pub fn from_triplet_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut catalog = Catalog::default();
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 3 {
                return Err(Error::Load {
                    path: path.to_path_buf(),
                    line: line_no + 1,
                    msg: "expected user\\tgiven\\tmatcher[\\tsplit]".into(),
                });
            }
            catalog.users.insert(cols[0].to_string());
            catalog.givens.insert(cols[1].to_string());
            catalog.matchers.insert(cols[2].to_string());
        }
        Ok(catalog)
    }
}

pub const USERS_FILE: &str = "users.txt";
pub const GIVENS_FILE: &str = "givens.txt";
pub const MATCHERS_FILE: &str = "matchers.txt";
pub const TRIPLETS_FILE: &str = "triplets.tsv";
pub const VISUAL_TSV: &str = "visual.tsv";
pub const TEXTUAL_TSV: &str = "textual.tsv";
pub const VISUAL_BIN: &str = "visual.bin";
pub const TEXTUAL_BIN: &str = "textual.bin";

fn read_id_list(path: &Path, kind: &'static str) -> Result<IdSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    IdSet::from_ids(kind, text.lines().map(str::trim).filter(|l| !l.is_empty()))
}

fn write_id_list(path: &Path, set: &IdSet) -> Result<()> {
    let mut text = set.ids().join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// One interaction record, by catalog index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub user: usize,
    pub given: usize,
    pub matcher: usize,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TripletSet {
    pub records: Vec<Triplet>,
}

impl TripletSet {
    /// Build a set, rejecting duplicate `(u, g, r, split)` records.
    pub fn new(records: Vec<Triplet>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for t in &records {
            if !seen.insert(*t) {
                return Err(Error::Duplicate(format!(
                    "triplet (user {}, given {}, matcher {}, {})",
                    t.user, t.given, t.matcher, t.split
                )));
            }
        }
        Ok(TripletSet { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn of_split(&self, split: Split) -> Vec<Triplet> {
        self.records
            .iter()
            .copied()
            .filter(|t| t.split == split)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|t| t.split == split).count()
    }

    /// Drop every record of users with fewer than `min` interactions.
    pub fn filter_min_interactions(&self, min: usize) -> TripletSet {
        if min <= 1 {
            return self.clone();
        }
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for t in &self.records {
            *counts.entry(t.user).or_default() += 1;
        }
        TripletSet {
            records: self
                .records
                .iter()
                .copied()
                .filter(|t| counts[&t.user] >= min)
                .collect(),
        }
    }
}

/// Parse `user\tgiven\tmatcher[\tsplit]` rows against a catalog. Rows
/// without a split column are marked train.
pub fn load_triplets(path: &Path, catalog: &Catalog) -> Result<TripletSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let load_err = |line: usize, msg: String| Error::Load {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if !(3..=4).contains(&cols.len()) {
            return Err(load_err(
                line_no,
                format!("expected 3 or 4 columns, found {}", cols.len()),
            ));
        }
        let resolve = |r: Result<usize>| r.map_err(|e| load_err(line_no, e.to_string()));
        let split = match cols.get(3) {
            Some(s) => s.parse::<Split>().map_err(|e| load_err(line_no, e))?,
            None => Split::Train,
        };
        let t = Triplet {
            user: resolve(catalog.user(cols[0]))?,
            given: resolve(catalog.given(cols[1]))?,
            matcher: resolve(catalog.matcher(cols[2]))?,
            split,
        };
        if !seen.insert(t) {
            return Err(load_err(
                line_no,
                format!("duplicate triplet {}", cols.join(" ")),
            ));
        }
        records.push(t);
    }
    Ok(TripletSet { records })
}

pub fn save_triplets(path: &Path, set: &TripletSet, catalog: &Catalog) -> Result<()> {
    let mut text = String::with_capacity(set.len() * 32);
    for t in &set.records {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            catalog.users.id(t.user),
            catalog.givens.id(t.given),
            catalog.matchers.id(t.matcher),
            t.split
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A fully loaded and validated data directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub catalog: Catalog,
    pub features: FeatureStore,
    pub triplets: TripletSet,
}

impl Dataset {
    pub fn new(catalog: Catalog, features: FeatureStore, triplets: TripletSet) -> Result<Self> {
        features.validate(&catalog)?;
        Ok(Dataset {
            catalog,
            features,
            triplets,
        })
    }

    /// Load a data directory. Catalog files are optional (ids are then
    /// taken from the triplets); features may be TSV or CRFT binary.
    pub fn load_dir(dir: &Path, min_interactions: usize) -> Result<Self> {
        let triplet_path = dir.join(TRIPLETS_FILE);
        let catalog = if dir.join(USERS_FILE).exists() {
            Catalog::load_dir(dir)?
        } else {
            Catalog::from_triplet_file(&triplet_path)?
        };
        let triplets =
            load_triplets(&triplet_path, &catalog)?.filter_min_interactions(min_interactions);
        let features = FeatureStore::load(
            &pick_existing(dir, VISUAL_BIN, VISUAL_TSV),
            &pick_existing(dir, TEXTUAL_BIN, TEXTUAL_TSV),
        )?;
        Dataset::new(catalog, features, triplets)
    }

    pub fn save_dir(&self, dir: &Path, binary_features: bool) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.catalog.save_dir(dir)?;
        save_triplets(&dir.join(TRIPLETS_FILE), &self.triplets, &self.catalog)?;
        if binary_features {
            self.features.visual.save_binary(&dir.join(VISUAL_BIN))?;
            self.features.textual.save_binary(&dir.join(TEXTUAL_BIN))
        } else {
            self.features.visual.save_tsv(&dir.join(VISUAL_TSV))?;
            self.features.textual.save_tsv(&dir.join(TEXTUAL_TSV))
        }
    }

    pub fn product_features(&self) -> ProductFeatures<f32> {
        ProductFeatures::from_store(&self.features, &self.catalog)
            .expect("dataset features were validated at construction")
    }
}

fn pick_existing(dir: &Path, preferred: &str, fallback: &str) -> PathBuf {
    let p = dir.join(preferred);
    if p.exists() {
        p
    } else {
        dir.join(fallback)
    }
}
