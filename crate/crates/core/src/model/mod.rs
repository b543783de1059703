//! Learnable parameters and scoring for the four-branch ranking model.
//!
//! A triplet `(u, g, r)` is scored as
//! `p = μ·s_gr + (1−μ)·s_ur + φ_gc·s_gr^c + φ_uc·s_ur^c` where
//!
//! * `s_ur` is user preference: latent affinity, user visual/textual taste
//!   against the candidate's content, plus biases and a global offset;
//! * `s_gr` is content compatibility between the given and candidate;
//! * `s_ur^c`, `s_gr^c` compare the candidate against the mean of the
//!   user's (resp. given product's) most similar past choices.
//!
//! Every representation is scaled per dimension across its batch before
//! any dot product.

mod forward;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::CatalogSizes;
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, Param};
use crate::tensor::{Real, Tensor};

pub use forward::{
    BranchScores, CorpusNorms, Forward, NormContext, ProductSide, ScoreBatch, Slot, SlotRole,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    /// User preference (`p`).
    Preference,
    /// Product matching (`m`).
    Matching,
    /// User preference consistency (`cu`).
    UserConsistency,
    /// Product matching consistency (`cg`).
    GivenConsistency,
}

impl Branch {
    pub const ALL: [Branch; 4] = [
        Branch::Preference,
        Branch::Matching,
        Branch::UserConsistency,
        Branch::GivenConsistency,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Branch::Preference => "p",
            Branch::Matching => "m",
            Branch::UserConsistency => "cu",
            Branch::GivenConsistency => "cg",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Visual,
    Textual,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Visual, Modality::Textual];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Visual => "v",
            Modality::Textual => "w",
        }
    }
}

/// How representations are scaled before dot products.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Row norms of the batch being scored.
    Batch,
    /// Row norms precomputed over the whole catalog.
    Corpus,
    /// No scaling.
    Identity,
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(NormMode::Batch),
            "corpus" => Ok(NormMode::Corpus),
            "identity" | "none" => Ok(NormMode::Identity),
            other => Err(Error::Config(format!("unknown norm mode `{other}`"))),
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormMode::Batch => "batch",
            NormMode::Corpus => "corpus",
            NormMode::Identity => "identity",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    /// Visual vs textual weight inside user preference.
    pub eta: f64,
    /// Visual vs textual weight inside matching and both consistency scores.
    pub pi: f64,
    /// Matching vs user preference.
    pub mu: f64,
    pub phi_gc: f64,
    pub phi_uc: f64,
    /// Weight decay, applied as `λ/2·‖Θ‖²` inside the loss.
    pub lambda: f64,
    /// Length `N` of the `ur`/`gr` lists.
    pub history_len: usize,
    pub latent_dim: usize,
    pub visual_hidden: usize,
    pub textual_hidden: usize,
    /// Depth `K` of every projection stack.
    pub layers: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// `false` replaces every scaling step with the identity.
    pub feature_scaling: bool,
    /// Learn an additive per-product offset on the pretrained features.
    pub learn_feature_deltas: bool,
    pub init_scale: f64,
    pub adam: AdamConfig,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            eta: 0.5,
            pi: 0.5,
            mu: 0.5,
            phi_gc: 1.0,
            phi_uc: 1.0,
            lambda: 1e-5,
            history_len: 2,
            latent_dim: 64,
            visual_hidden: 64,
            textual_hidden: 64,
            layers: 1,
            learning_rate: 0.01,
            batch_size: 16,
            max_epochs: 80,
            patience: 8,
            seed: 0,
            feature_scaling: true,
            learn_feature_deltas: false,
            init_scale: 0.01,
            adam: AdamConfig::default(),
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eta", self.eta), ("pi", self.pi), ("mu", self.mu)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        for (name, v) in [
            ("phi_gc", self.phi_gc),
            ("phi_uc", self.phi_uc),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a finite value ≥ 0, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("history_len", self.history_len),
            ("latent_dim", self.latent_dim),
            ("visual_hidden", self.visual_hidden),
            ("textual_hidden", self.textual_hidden),
            ("layers", self.layers),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be ≥ 1")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::Config("init_scale must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn hidden(&self, modality: Modality) -> usize {
        match modality {
            Modality::Visual => self.visual_hidden,
            Modality::Textual => self.textual_hidden,
        }
    }

    pub fn train_norm(&self) -> NormMode {
        if self.feature_scaling {
            NormMode::Batch
        } else {
            NormMode::Identity
        }
    }
}

/// Which score branches and input kinds take part.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchToggles {
    pub use_u: bool,
    pub use_g: bool,
    pub use_uc: bool,
    pub use_gc: bool,
    pub use_visual: bool,
    pub use_textual: bool,
    pub use_latent: bool,
}

impl Default for BranchToggles {
    fn default() -> Self {
        BranchToggles {
            use_u: true,
            use_g: true,
            use_uc: true,
            use_gc: true,
            use_visual: true,
            use_textual: true,
            use_latent: true,
        }
    }
}

impl BranchToggles {
    pub fn validate(&self) -> Result<()> {
        if !(self.use_u || self.use_g || self.use_uc || self.use_gc) {
            return Err(Error::Config(
                "at least one score branch must be enabled".into(),
            ));
        }
        let content = self.use_visual || self.use_textual;
        if (self.use_g || self.use_uc || self.use_gc) && !content {
            return Err(Error::Config(
                "matching and consistency branches need the visual or textual modality".into(),
            ));
        }
        if self.use_u && !(content || self.use_latent) {
            return Err(Error::Config(
                "user preference needs latent or content inputs".into(),
            ));
        }
        Ok(())
    }

    pub fn branch(&self, b: Branch) -> bool {
        match b {
            Branch::Preference => self.use_u,
            Branch::Matching => self.use_g,
            Branch::UserConsistency => self.use_uc,
            Branch::GivenConsistency => self.use_gc,
        }
    }

    pub fn modality(&self, m: Modality) -> bool {
        match m {
            Modality::Visual => self.use_visual,
            Modality::Textual => self.use_textual,
        }
    }
}

/// Resolved scalar weights of every term, after applying toggles.
///
/// With a single modality enabled, that modality's weight becomes 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionWeights {
    pub toggles: BranchToggles,
    /// (visual, textual) inside `s_ur`.
    pub eta: (f64, f64),
    /// (visual, textual) inside `s_gr`, `s_ur^c`, `s_gr^c`.
    pub pi: (f64, f64),
    pub matching: f64,
    pub preference: f64,
    pub given_consistency: f64,
    pub user_consistency: f64,
}

impl FusionWeights {
    pub fn new(h: &Hyperparams, t: &BranchToggles) -> Self {
        let split = |w: f64| match (t.use_visual, t.use_textual) {
            (true, true) => (w, 1.0 - w),
            (true, false) => (1.0, 0.0),
            (false, true) => (0.0, 1.0),
            (false, false) => (0.0, 0.0),
        };
        let on = |b: bool, w: f64| if b { w } else { 0.0 };
        FusionWeights {
            toggles: *t,
            eta: split(h.eta),
            pi: split(h.pi),
            matching: on(t.use_g, h.mu),
            preference: on(t.use_u, 1.0 - h.mu),
            given_consistency: on(t.use_gc, h.phi_gc),
            user_consistency: on(t.use_uc, h.phi_uc),
        }
    }

    pub fn modality_weight(&self, branch: Branch, m: Modality) -> f64 {
        let pair = if branch == Branch::Preference {
            self.eta
        } else {
            self.pi
        };
        match m {
            Modality::Visual => pair.0,
            Modality::Textual => pair.1,
        }
    }

    /// Whether the representation stack of `branch`/`m` influences scores.
    pub fn uses(&self, branch: Branch, m: Modality) -> bool {
        self.toggles.branch(branch) && self.toggles.modality(m)
    }

    pub fn fuse(&self, s_gr: f64, s_ur: f64, s_gr_c: f64, s_ur_c: f64) -> f64 {
        self.matching * s_gr
            + self.preference * s_ur
            + self.given_consistency * s_gr_c
            + self.user_consistency * s_ur_c
    }
}

/// The named model configurations compared in experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Baseline {
    #[serde(rename = "MF-BPR")]
    MfBpr,
    #[serde(rename = "V-BPR")]
    VBpr,
    #[serde(rename = "T-BPR")]
    TBpr,
    #[serde(rename = "VT-BPR")]
    VtBpr,
    #[serde(rename = "GP-BPR")]
    GpBpr,
    #[serde(rename = "CR-BPR")]
    CrBpr,
}

impl Baseline {
    pub const ALL: [Baseline; 6] = [
        Baseline::MfBpr,
        Baseline::VBpr,
        Baseline::TBpr,
        Baseline::VtBpr,
        Baseline::GpBpr,
        Baseline::CrBpr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::MfBpr => "MF-BPR",
            Baseline::VBpr => "V-BPR",
            Baseline::TBpr => "T-BPR",
            Baseline::VtBpr => "VT-BPR",
            Baseline::GpBpr => "GP-BPR",
            Baseline::CrBpr => "CR-BPR",
        }
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown model `{s}`")))
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Hyperparameters and toggles realizing `baseline` on top of `base`.
///
/// The single-branch preference models also set `μ = 0` so their score
/// is exactly `s_ur`.
pub fn reduce_to_baseline(baseline: Baseline, base: &Hyperparams) -> (Hyperparams, BranchToggles) {
    let mut h = base.clone();
    let user_only = |visual: bool, textual: bool| BranchToggles {
        use_u: true,
        use_g: false,
        use_uc: false,
        use_gc: false,
        use_visual: visual,
        use_textual: textual,
        use_latent: true,
    };
    let toggles = match baseline {
        Baseline::MfBpr => user_only(false, false),
        Baseline::VBpr => user_only(true, false),
        Baseline::TBpr => user_only(false, true),
        Baseline::VtBpr => user_only(true, true),
        Baseline::GpBpr => BranchToggles {
            use_uc: false,
            use_gc: false,
            ..BranchToggles::default()
        },
        Baseline::CrBpr => BranchToggles::default(),
    };
    match baseline {
        Baseline::MfBpr | Baseline::VBpr | Baseline::TBpr | Baseline::VtBpr => {
            h.mu = 0.0;
            h.phi_gc = 0.0;
            h.phi_uc = 0.0;
        }
        Baseline::GpBpr => {
            h.phi_gc = 0.0;
            h.phi_uc = 0.0;
        }
        Baseline::CrBpr => {}
    }
    (h, toggles)
}

/// One `σ(W·x + b)` layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpStack<T = f32> {
    pub layers: Vec<DenseLayer<T>>,
}

impl<T: Real> MlpStack<T> {
    pub fn out_dim(&self) -> usize {
        self.layers
            .last()
            .map(|l| l.weight.value.rows())
            .unwrap_or(0)
    }
}

/// What a parameter tensor feeds, for deciding which ones a configuration
/// regularizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    UserLatent,
    ItemLatent,
    UserContent(Modality),
    Bias,
    Mlp(Branch, Modality),
    FeatureDelta(Modality),
}

impl ParamRole {
    pub fn active(self, t: &BranchToggles) -> bool {
        match self {
            ParamRole::UserLatent | ParamRole::ItemLatent => t.use_u && t.use_latent,
            ParamRole::UserContent(m) => t.use_u && t.modality(m),
            ParamRole::Bias => t.use_u,
            ParamRole::Mlp(b, m) => t.branch(b) && t.modality(m),
            ParamRole::FeatureDelta(m) => t.modality(m) && Branch::ALL.iter().any(|&b| t.branch(b)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    /// `E_U`: users × latent_dim.
    pub user_latent: Param<T>,
    /// `E_I`: (givens + matchers) × latent_dim, givens first.
    pub item_latent: Param<T>,
    /// `V_U`: users × visual_hidden.
    pub user_visual: Param<T>,
    /// `W_U`: users × textual_hidden.
    pub user_textual: Param<T>,
    pub user_bias: Param<T>,
    pub item_bias: Param<T>,
    pub offset: Param<T>,
    /// Indexed by [`ModelParams::stack_index`].
    pub mlps: Vec<MlpStack<T>>,
    /// Optional learnable offsets on pretrained (visual, textual) features.
    pub feature_delta: Option<(Param<T>, Param<T>)>,
    pub sizes: CatalogSizes,
}

impl<T: Real> ModelParams<T> {
    pub fn stack_index(branch: Branch, modality: Modality) -> usize {
        let b = Branch::ALL.iter().position(|&x| x == branch).unwrap();
        b * 2 + if modality == Modality::Visual { 0 } else { 1 }
    }

    pub fn stack(&self, branch: Branch, modality: Modality) -> &MlpStack<T> {
        &self.mlps[Self::stack_index(branch, modality)]
    }

    pub fn stack_mut(&mut self, branch: Branch, modality: Modality) -> &mut MlpStack<T> {
        &mut self.mlps[Self::stack_index(branch, modality)]
    }

    pub fn mlp_param_name(branch: Branch, modality: Modality, layer: usize, part: &str) -> String {
        format!(
            "mlp.{}.{}.layer{}.{}",
            branch.tag(),
            modality.tag(),
            layer,
            part
        )
    }

    /// Fresh parameters: uniform(−init_scale, init_scale) for tables and
    /// projection weights, zeros for biases, offset and feature deltas.
    pub fn init(
        sizes: CatalogSizes,
        visual_dim: usize,
        textual_dim: usize,
        h: &Hyperparams,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(h.seed);
        let scale = h.init_scale;
        let mut uniform = |name: String, shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let x: f64 = if scale > 0.0 {
                        rng.random_range(-scale..scale)
                    } else {
                        0.0
                    };
                    T::of(x)
                })
                .collect();
            Param::new(name, Tensor::from_vec(shape, data).unwrap())
        };
        let n_items = sizes.givens + sizes.matchers;
        let user_latent = uniform("E_U".into(), &[sizes.users, h.latent_dim]);
        let item_latent = uniform("E_I".into(), &[n_items, h.latent_dim]);
        let user_visual = uniform("V_U".into(), &[sizes.users, h.visual_hidden]);
        let user_textual = uniform("W_U".into(), &[sizes.users, h.textual_hidden]);
        let mut mlps = Vec::with_capacity(8);
        for branch in Branch::ALL {
            for modality in Modality::ALL {
                let input = match modality {
                    Modality::Visual => visual_dim,
                    Modality::Textual => textual_dim,
                };
                let hidden = h.hidden(modality);
                let layers = (1..=h.layers)
                    .map(|k| {
                        let d_in = if k == 1 { input } else { hidden };
                        DenseLayer {
                            weight: uniform(
                                Self::mlp_param_name(branch, modality, k, "W"),
                                &[hidden, d_in],
                            ),
                            bias: Param::new(
                                Self::mlp_param_name(branch, modality, k, "b"),
                                Tensor::zeros(&[hidden]),
                            ),
                        }
                    })
                    .collect();
                mlps.push(MlpStack { layers });
            }
        }
        let feature_delta = h.learn_feature_deltas.then(|| {
            (
                Param::new("delta.v", Tensor::zeros(&[n_items, visual_dim])),
                Param::new("delta.w", Tensor::zeros(&[n_items, textual_dim])),
            )
        });
        ModelParams {
            user_latent,
            item_latent,
            user_visual,
            user_textual,
            user_bias: Param::new("beta_u", Tensor::zeros(&[sizes.users])),
            item_bias: Param::new("beta_r", Tensor::zeros(&[sizes.matchers])),
            offset: Param::new("alpha", Tensor::zeros(&[1])),
            mlps,
            feature_delta,
            sizes,
        }
    }

    /// Every parameter in a fixed order, with its role.
    pub fn params(&self) -> Vec<(&Param<T>, ParamRole)> {
        let mut out = vec![
            (&self.user_latent, ParamRole::UserLatent),
            (&self.item_latent, ParamRole::ItemLatent),
            (&self.user_visual, ParamRole::UserContent(Modality::Visual)),
            (
                &self.user_textual,
                ParamRole::UserContent(Modality::Textual),
            ),
            (&self.user_bias, ParamRole::Bias),
            (&self.item_bias, ParamRole::Bias),
            (&self.offset, ParamRole::Bias),
        ];
        for branch in Branch::ALL {
            for modality in Modality::ALL {
                for layer in &self.stack(branch, modality).layers {
                    out.push((&layer.weight, ParamRole::Mlp(branch, modality)));
                    out.push((&layer.bias, ParamRole::Mlp(branch, modality)));
                }
            }
        }
        if let Some((dv, dw)) = &self.feature_delta {
            out.push((dv, ParamRole::FeatureDelta(Modality::Visual)));
            out.push((dw, ParamRole::FeatureDelta(Modality::Textual)));
        }
        out
    }

    /// Mutable view in the same order as [`ModelParams::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = vec![
            &mut self.user_latent,
            &mut self.item_latent,
            &mut self.user_visual,
            &mut self.user_textual,
            &mut self.user_bias,
            &mut self.item_bias,
            &mut self.offset,
        ];
        // Branch-major, modality-minor; matches stack_index order.
        for stack in self.mlps.iter_mut() {
            for layer in stack.layers.iter_mut() {
                out.push(&mut layer.weight);
                out.push(&mut layer.bias);
            }
        }
        if let Some((dv, dw)) = &mut self.feature_delta {
            out.push(dv);
            out.push(dw);
        }
        out
    }

    pub fn roles(&self) -> Vec<ParamRole> {
        self.params().into_iter().map(|(_, r)| r).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params()
            .into_iter()
            .map(|(p, _)| p)
            .find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params_mut().into_iter().find(|p| p.name == name)
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// `‖Θ‖²` over parameters active under `toggles`.
    pub fn active_sum_squares(&self, toggles: &BranchToggles) -> f64 {
        self.params()
            .into_iter()
            .filter(|(_, r)| r.active(toggles))
            .map(|(p, _)| p.value.sum_squares())
            .sum()
    }

    /// Add `λ/2·‖Θ‖²` over active parameters to the gradients and return
    /// the penalty.
    pub fn add_weight_decay(&mut self, lambda: f64, toggles: &BranchToggles) -> f64 {
        if lambda == 0.0 {
            return 0.0;
        }
        let roles = self.roles();
        let mut penalty = 0.0;
        for (p, role) in self.params_mut().into_iter().zip(roles) {
            if !role.active(toggles) {
                continue;
            }
            penalty += p.value.sum_squares();
            let lam = T::of(lambda);
            for (g, &v) in p.grad.data_mut().iter_mut().zip(p.value.data()) {
                *g = *g + lam * v;
            }
        }
        0.5 * lambda * penalty
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            user_latent: self.user_latent.cast(),
            item_latent: self.item_latent.cast(),
            user_visual: self.user_visual.cast(),
            user_textual: self.user_textual.cast(),
            user_bias: self.user_bias.cast(),
            item_bias: self.item_bias.cast(),
            offset: self.offset.cast(),
            mlps: self
                .mlps
                .iter()
                .map(|s| MlpStack {
                    layers: s
                        .layers
                        .iter()
                        .map(|l| DenseLayer {
                            weight: l.weight.cast(),
                            bias: l.bias.cast(),
                        })
                        .collect(),
                })
                .collect(),
            feature_delta: self
                .feature_delta
                .as_ref()
                .map(|(a, b)| (a.cast(), b.cast())),
            sizes: self.sizes,
        }
    }
}

/// Parameters together with the configuration they were trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub params: ModelParams<f32>,
    pub hyper: Hyperparams,
    pub toggles: BranchToggles,
}

impl Model {
    pub fn new(
        sizes: CatalogSizes,
        visual_dim: usize,
        textual_dim: usize,
        hyper: Hyperparams,
        toggles: BranchToggles,
    ) -> Result<Self> {
        hyper.validate()?;
        toggles.validate()?;
        Ok(Model {
            params: ModelParams::init(sizes, visual_dim, textual_dim, &hyper),
            hyper,
            toggles,
        })
    }

    pub fn weights(&self) -> FusionWeights {
        FusionWeights::new(&self.hyper, &self.toggles)
    }
}
