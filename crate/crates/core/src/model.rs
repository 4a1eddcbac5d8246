//! The full hierarchy: short-term attentive GRU per week, intra-sector GAT,
//! long-term attentive GRUs over weeks (two streams), sector max-pooling,
//! inter-sector GAT, embedding fusion, and the two task heads — plus the
//! sector-free NT variant, the ablation variants, and the MLP/GRU/GRU+Att
//! baseline presets composed from the same layers.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::ckpt;
use crate::data::{InstanceWindow, SectorCatalog, FEATURE_DIM};
use crate::layers::{
    complete_graph, dense, gat_forward, gru_forward, seeded_rng, temporal_attention, Activation,
    AttnParams, AttnVars, GatParams, GatVars, GruParams, GruVars, Param, ParamKind,
};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Which architecture/objective composition to train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full hierarchy with both graph levels and the multi-task objective.
    Full,
    /// Sector-free: one complete graph over all stocks.
    Nt,
    /// Intra-sector embeddings removed; sector pooling falls back to the
    /// sequential stream.
    NoIntra,
    /// Inter-sector embeddings removed.
    NoInter,
    /// Rank-only objective; the movement head exists but is not trained.
    NoMtl,
    /// Movement task replaced by return regression (sigmoid removed).
    Mse,
    /// Baseline: two-layer perceptron over the flattened window.
    Mlp,
    /// Baseline: one 32-dim GRU over the whole window.
    Gru,
    /// Baseline: 32-dim GRU plus temporal attention.
    GruAtt,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::Nt,
        Variant::NoIntra,
        Variant::NoInter,
        Variant::NoMtl,
        Variant::Mse,
        Variant::Mlp,
        Variant::Gru,
        Variant::GruAtt,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Nt => "nt",
            Variant::NoIntra => "no_intra",
            Variant::NoInter => "no_inter",
            Variant::NoMtl => "no_mtl",
            Variant::Mse => "mse",
            Variant::Mlp => "mlp",
            Variant::Gru => "gru",
            Variant::GruAtt => "gru_att",
        }
    }

    /// Whether the second head feeds the training objective.
    pub fn trains_move_head(&self) -> bool {
        !matches!(self, Variant::NoMtl)
    }

    /// Whether the second head emits a probability (sigmoid) rather than a
    /// raw regression value.
    pub fn move_head_is_probability(&self) -> bool {
        !matches!(self, Variant::Mse)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .find(|v| v.name() == s)
            .copied()
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?}; expected one of {:?}",
                    Variant::ALL.map(|v| v.name())
                ))
            })
    }
}

/// Which feature columns feed the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    /// All 15 columns (normalized raw prices plus ratio features).
    Full,
    /// The 10 scale-free columns only (return ratio, price ratios, MAs).
    RatiosOnly,
}

impl FeatureSet {
    pub fn dim(&self) -> usize {
        match self {
            FeatureSet::Full => FEATURE_DIM,
            FeatureSet::RatiosOnly => FEATURE_DIM - 5,
        }
    }

    pub fn start(&self) -> usize {
        match self {
            FeatureSet::Full => 0,
            FeatureSet::RatiosOnly => 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub weeks: usize,
    pub days_per_week: usize,
    pub variant: Variant,
    pub feature_set: FeatureSet,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 16,
            weeks: 3,
            days_per_week: 5,
            variant: Variant::Full,
            feature_set: FeatureSet::Full,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.feature_set.dim()
    }

    pub fn window(&self) -> usize {
        self.weeks * self.days_per_week
    }

    fn fusion_input_dim(&self) -> usize {
        match self.variant {
            Variant::Full | Variant::NoMtl | Variant::Mse => 3 * self.hidden_dim,
            Variant::Nt | Variant::NoIntra | Variant::NoInter => 2 * self.hidden_dim,
            _ => 0,
        }
    }
}

// ── Parameter sets ───────────────────────────────────────────────────────

/// Return head plus movement head. The movement head always exists in the
/// state (so checkpoints are uniform); whether it trains or applies a
/// sigmoid depends on the variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub e_return: Param,
    pub b_return: Param,
    pub e_move: Param,
    pub b_move: Param,
}

impl HeadParams {
    fn new(dim: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        HeadParams {
            e_return: Param::init("head_return.e", ParamKind::Weight, vec![dim], dim, rng),
            b_return: Param::init("head_return.b", ParamKind::Bias, vec![1], dim, rng),
            e_move: Param::init("head_move.e", ParamKind::Weight, vec![dim], dim, rng),
            b_move: Param::init("head_move.b", ParamKind::Bias, vec![1], dim, rng),
        }
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.e_return, &self.b_return, &self.e_move, &self.b_move]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.e_return, &mut self.b_return, &mut self.e_move, &mut self.b_move]
    }

    fn bind_with(
        &self,
        tape: &mut Tape,
        source: &mut dyn FnMut(&Param, &mut Tape) -> Var,
    ) -> BoundHeads {
        BoundHeads {
            e_return: source(&self.e_return, tape),
            b_return: source(&self.b_return, tape),
            e_move: source(&self.e_move, tape),
            b_move: source(&self.b_move, tape),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct BoundHeads {
    e_return: Var,
    b_return: Var,
    e_move: Var,
    b_move: Var,
}

/// Parameters of the hierarchical variants. Streams that a variant removes
/// are simply absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierParams {
    pub week_gru: GruParams,
    pub week_attn: AttnParams,
    pub stock_gat: Option<GatParams>,
    pub long_g_gru: Option<GruParams>,
    pub long_g_attn: Option<AttnParams>,
    pub long_a_gru: GruParams,
    pub long_a_attn: AttnParams,
    pub inter_gat: Option<GatParams>,
    pub fusion: Param,
    pub heads: HeadParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
    pub heads: HeadParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruBaselineParams {
    pub gru: GruParams,
    pub attn: Option<AttnParams>,
    pub heads: HeadParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Arch {
    Hier(HierParams),
    Mlp(MlpParams),
    GruBaseline(GruBaselineParams),
}

/// Baseline layer sizes follow the published baseline descriptions.
const MLP_HIDDEN1: usize = 32;
const MLP_HIDDEN2: usize = 8;
const GRU_BASELINE_HIDDEN: usize = 32;

/// All learnable state for one model, plus the config that shaped it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: ModelConfig,
    pub arch: Arch,
}

impl ModelState {
    /// Seeded initialization; identical configs yield identical parameters.
    pub fn init(config: &ModelConfig) -> Result<ModelState> {
        if config.hidden_dim == 0 || config.weeks == 0 || config.days_per_week == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        let mut rng = seeded_rng(config.seed);
        let h = config.hidden_dim;
        let feat = config.feature_dim();
        let arch = match config.variant {
            Variant::Mlp => {
                let input = config.window() * feat;
                Arch::Mlp(MlpParams {
                    w1: Param::init("mlp.w1", ParamKind::Weight, vec![MLP_HIDDEN1, input], input, &mut rng),
                    b1: Param::init("mlp.b1", ParamKind::Bias, vec![MLP_HIDDEN1], MLP_HIDDEN1, &mut rng),
                    w2: Param::init("mlp.w2", ParamKind::Weight, vec![MLP_HIDDEN2, MLP_HIDDEN1], MLP_HIDDEN1, &mut rng),
                    b2: Param::init("mlp.b2", ParamKind::Bias, vec![MLP_HIDDEN2], MLP_HIDDEN2, &mut rng),
                    heads: HeadParams::new(MLP_HIDDEN2, &mut rng),
                })
            }
            Variant::Gru | Variant::GruAtt => {
                let gru = GruParams::new("seq_gru", feat, GRU_BASELINE_HIDDEN, &mut rng);
                let attn = match config.variant {
                    Variant::GruAtt => {
                        Some(AttnParams::new("seq_attn", GRU_BASELINE_HIDDEN, &mut rng))
                    }
                    _ => None,
                };
                Arch::GruBaseline(GruBaselineParams {
                    gru,
                    attn,
                    heads: HeadParams::new(GRU_BASELINE_HIDDEN, &mut rng),
                })
            }
            variant => {
                let has_g_stream = variant != Variant::NoIntra;
                let has_inter = matches!(
                    variant,
                    Variant::Full | Variant::NoMtl | Variant::Mse | Variant::NoIntra
                );
                let week_gru = GruParams::new("week_gru", feat, h, &mut rng);
                let week_attn = AttnParams::new("week_attn", h, &mut rng);
                let stock_gat = has_g_stream
                    .then(|| GatParams::new("stock_gat", h, h, &mut rng));
                let long_g_gru = has_g_stream
                    .then(|| GruParams::new("long_g_gru", h, h, &mut rng));
                let long_g_attn = has_g_stream
                    .then(|| AttnParams::new("long_g_attn", h, &mut rng));
                let long_a_gru = GruParams::new("long_a_gru", h, h, &mut rng);
                let long_a_attn = AttnParams::new("long_a_attn", h, &mut rng);
                let inter_gat = has_inter
                    .then(|| GatParams::new("inter_gat", h, h, &mut rng));
                let fusion_in = config.fusion_input_dim();
                let fusion = Param::init(
                    "fusion.w",
                    ParamKind::Weight,
                    vec![h, fusion_in],
                    fusion_in,
                    &mut rng,
                );
                Arch::Hier(HierParams {
                    week_gru,
                    week_attn,
                    stock_gat,
                    long_g_gru,
                    long_g_attn,
                    long_a_gru,
                    long_a_attn,
                    inter_gat,
                    fusion,
                    heads: HeadParams::new(h, &mut rng),
                })
            }
        };
        Ok(ModelState { config: *config, arch })
    }

    /// Every parameter in canonical order (checkpoint order).
    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        match &self.arch {
            Arch::Hier(p) => {
                out.extend(p.week_gru.params());
                out.extend(p.week_attn.params());
                if let Some(g) = &p.stock_gat {
                    out.extend(g.params());
                }
                if let Some(g) = &p.long_g_gru {
                    out.extend(g.params());
                }
                if let Some(a) = &p.long_g_attn {
                    out.extend(a.params());
                }
                out.extend(p.long_a_gru.params());
                out.extend(p.long_a_attn.params());
                if let Some(g) = &p.inter_gat {
                    out.extend(g.params());
                }
                out.push(&p.fusion);
                out.extend(p.heads.params());
            }
            Arch::Mlp(p) => {
                out.push(&p.w1);
                out.push(&p.b1);
                out.push(&p.w2);
                out.push(&p.b2);
                out.extend(p.heads.params());
            }
            Arch::GruBaseline(p) => {
                out.extend(p.gru.params());
                if let Some(a) = &p.attn {
                    out.extend(a.params());
                }
                out.extend(p.heads.params());
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        match &mut self.arch {
            Arch::Hier(p) => {
                out.extend(p.week_gru.params_mut());
                out.extend(p.week_attn.params_mut());
                if let Some(g) = &mut p.stock_gat {
                    out.extend(g.params_mut());
                }
                if let Some(g) = &mut p.long_g_gru {
                    out.extend(g.params_mut());
                }
                if let Some(a) = &mut p.long_g_attn {
                    out.extend(a.params_mut());
                }
                out.extend(p.long_a_gru.params_mut());
                out.extend(p.long_a_attn.params_mut());
                if let Some(g) = &mut p.inter_gat {
                    out.extend(g.params_mut());
                }
                out.push(&mut p.fusion);
                out.extend(p.heads.params_mut());
            }
            Arch::Mlp(p) => {
                out.push(&mut p.w1);
                out.push(&mut p.b1);
                out.push(&mut p.w2);
                out.push(&mut p.b2);
                out.extend(p.heads.params_mut());
            }
            Arch::GruBaseline(p) => {
                out.extend(p.gru.params_mut());
                if let Some(a) = &mut p.attn {
                    out.extend(a.params_mut());
                }
                out.extend(p.heads.params_mut());
            }
        }
        out
    }

    fn is_trainable(&self, path: &str) -> bool {
        if self.config.variant == Variant::NoMtl {
            !path.starts_with("head_move.")
        } else {
            true
        }
    }

    /// Parameters in the active objective: everything except the movement
    /// head under the rank-only variant.
    pub fn trainable_params(&self) -> Vec<&Param> {
        self.params()
            .into_iter()
            .filter(|p| self.is_trainable(&p.path))
            .collect()
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param> {
        let keep: Vec<bool> = self
            .params()
            .iter()
            .map(|p| self.is_trainable(&p.path))
            .collect();
        self.params_mut()
            .into_iter()
            .zip(keep)
            .filter_map(|(p, k)| k.then_some(p))
            .collect()
    }

    /// Register every parameter on a tape. `trainable` leaves receive
    /// gradients; inference passes bind frozen leaves. The movement head
    /// stays frozen under the rank-only variant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let mut source = |p: &Param, tape: &mut Tape| {
            p.bind(tape, trainable && self.is_trainable(&p.path))
        };
        self.bind_with(tape, &mut source)
    }

    /// Bind with externally supplied Vars for every trainable parameter (in
    /// [`ModelState::trainable_params`] order); non-trainable parameters
    /// bind frozen from the stored values. Used by the gradient checker to
    /// perturb all parameters through one packed tensor.
    pub fn bind_from_vars(&self, tape: &mut Tape, vars: &[Var]) -> Result<BoundModel> {
        let expected = self.trainable_params().len();
        if vars.len() != expected {
            return Err(Error::Config(format!(
                "bind_from_vars got {} vars, model has {expected} trainable parameters",
                vars.len()
            )));
        }
        let mut iter = vars.iter().copied();
        let mut source = |p: &Param, tape: &mut Tape| {
            if self.is_trainable(&p.path) {
                iter.next().expect("var count checked above")
            } else {
                p.bind(tape, false)
            }
        };
        Ok(self.bind_with(tape, &mut source))
    }

    fn bind_with(
        &self,
        tape: &mut Tape,
        source: &mut dyn FnMut(&Param, &mut Tape) -> Var,
    ) -> BoundModel {
        let arch = match &self.arch {
            Arch::Hier(p) => BoundArch::Hier(BoundHier {
                week_gru: p.week_gru.bind_with(tape, source),
                week_attn: p.week_attn.bind_with(tape, source),
                stock_gat: p.stock_gat.as_ref().map(|g| g.bind_with(tape, source)),
                long_g_gru: p.long_g_gru.as_ref().map(|g| g.bind_with(tape, source)),
                long_g_attn: p.long_g_attn.as_ref().map(|a| a.bind_with(tape, source)),
                long_a_gru: p.long_a_gru.bind_with(tape, source),
                long_a_attn: p.long_a_attn.bind_with(tape, source),
                inter_gat: p.inter_gat.as_ref().map(|g| g.bind_with(tape, source)),
                fusion: source(&p.fusion, tape),
                heads: p.heads.bind_with(tape, source),
            }),
            Arch::Mlp(p) => BoundArch::Mlp(BoundMlp {
                w1: source(&p.w1, tape),
                b1: source(&p.b1, tape),
                w2: source(&p.w2, tape),
                b2: source(&p.b2, tape),
                heads: p.heads.bind_with(tape, source),
            }),
            Arch::GruBaseline(p) => BoundArch::GruBaseline(BoundGruBaseline {
                gru: p.gru.bind_with(tape, source),
                attn: p.attn.as_ref().map(|a| a.bind_with(tape, source)),
                heads: p.heads.bind_with(tape, source),
            }),
        };
        BoundModel { config: self.config, arch }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(self.config)?;
        ckpt::save(path, &meta, &self.params())
    }

    /// Rebuild a state from a checkpoint: the stored config shapes the
    /// architecture, then every parameter is overwritten by path.
    pub fn load(path: &Path) -> Result<ModelState> {
        let (meta, loaded) = ckpt::load(path)?;
        let config: ModelConfig = serde_json::from_value(meta)
            .map_err(|e| Error::Checkpoint(format!("bad model config in checkpoint: {e}")))?;
        let mut state = ModelState::init(&config)?;
        let by_path: BTreeMap<String, Param> =
            loaded.into_iter().map(|p| (p.path.clone(), p)).collect();
        let mut used = 0usize;
        for param in state.params_mut() {
            let stored = by_path.get(&param.path).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint missing parameter {}", param.path))
            })?;
            if stored.value.shape() != param.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    param.path,
                    stored.value.shape(),
                    param.value.shape()
                )));
            }
            param.value = stored.value.clone();
            used += 1;
        }
        if used != by_path.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model uses {used}",
                by_path.len()
            )));
        }
        Ok(state)
    }
}

pub struct BoundModel {
    pub config: ModelConfig,
    arch: BoundArch,
}

enum BoundArch {
    Hier(BoundHier),
    Mlp(BoundMlp),
    GruBaseline(BoundGruBaseline),
}

struct BoundHier {
    week_gru: GruVars,
    week_attn: AttnVars,
    stock_gat: Option<GatVars>,
    long_g_gru: Option<GruVars>,
    long_g_attn: Option<AttnVars>,
    long_a_gru: GruVars,
    long_a_attn: AttnVars,
    inter_gat: Option<GatVars>,
    fusion: Var,
    heads: BoundHeads,
}

struct BoundMlp {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    heads: BoundHeads,
}

struct BoundGruBaseline {
    gru: GruVars,
    attn: Option<AttnVars>,
    heads: BoundHeads,
}

fn gru_leaf_vars(g: &GruVars) -> [Var; 9] {
    [
        g.w_update, g.u_update, g.b_update, g.w_reset, g.u_reset, g.b_reset, g.w_cand, g.u_cand,
        g.b_cand,
    ]
}

impl BoundModel {
    /// Leaf handles in the same order as [`ModelState::trainable_params`].
    pub fn trainable_leaves(&self) -> Vec<Var> {
        let mut out = Vec::new();
        match &self.arch {
            BoundArch::Hier(p) => {
                out.extend(gru_leaf_vars(&p.week_gru));
                out.extend([p.week_attn.w0, p.week_attn.score]);
                if let Some(g) = &p.stock_gat {
                    out.extend([g.w1, g.w2, g.attn]);
                }
                if let Some(g) = &p.long_g_gru {
                    out.extend(gru_leaf_vars(g));
                }
                if let Some(a) = &p.long_g_attn {
                    out.extend([a.w0, a.score]);
                }
                out.extend(gru_leaf_vars(&p.long_a_gru));
                out.extend([p.long_a_attn.w0, p.long_a_attn.score]);
                if let Some(g) = &p.inter_gat {
                    out.extend([g.w1, g.w2, g.attn]);
                }
                out.push(p.fusion);
                out.extend([p.heads.e_return, p.heads.b_return]);
                if self.config.variant != Variant::NoMtl {
                    out.extend([p.heads.e_move, p.heads.b_move]);
                }
            }
            BoundArch::Mlp(p) => {
                out.extend([p.w1, p.b1, p.w2, p.b2]);
                out.extend([p.heads.e_return, p.heads.b_return, p.heads.e_move, p.heads.b_move]);
            }
            BoundArch::GruBaseline(p) => {
                out.extend(gru_leaf_vars(&p.gru));
                if let Some(a) = &p.attn {
                    out.extend([a.w0, a.score]);
                }
                out.extend([p.heads.e_return, p.heads.b_return, p.heads.e_move, p.heads.b_move]);
            }
        }
        out
    }
}

// ── Forward pass ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnLevel {
    Temporal,
    Intra,
    Inter,
}

impl std::fmt::Display for AttnLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttnLevel::Temporal => "temporal",
            AttnLevel::Intra => "intra",
            AttnLevel::Inter => "inter",
        })
    }
}

/// One captured attention weight. Rows sharing (level, context, from) form
/// one softmax distribution over `to`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub level: AttnLevel,
    pub context: String,
    pub from: String,
    pub to: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StockPrediction {
    pub stock_id: String,
    pub pred_return: f64,
    /// Movement probability in [0, 1]. Under the regression variant this is
    /// the binarized sign of the raw second-head output.
    pub pred_move: f64,
    pub true_return: f64,
    pub true_move: bool,
}

/// Per-day predictions across the full cross-section plus captured
/// attention weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionBatch {
    pub prediction_date: NaiveDate,
    pub predictions: Vec<StockPrediction>,
    pub attention: Vec<AttentionRecord>,
}

/// Handles into a forward graph built on an external tape; used by training
/// to attach losses.
pub struct GraphOutputs {
    pub stock_ids: Vec<String>,
    pub true_returns: Vec<f64>,
    pub true_moves: Vec<bool>,
    /// Predicted return per stock, aligned with `stock_ids`.
    pub pred_return: Var,
    /// Second-head output per stock: probabilities, or raw values under the
    /// regression variant. Absent when the head is skipped (rank-only
    /// training).
    pub pred_move: Option<Var>,
    pub attention: Vec<AttentionRecord>,
}

fn named<T>(layer: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { op } => Error::Numeric {
            layer: layer.to_string(),
            details: format!("non-finite value in {op}"),
        },
        other => other,
    })
}

struct SectorLayout {
    /// Sorted sector names present in this cross-section.
    names: Vec<String>,
    /// Per stock (in processing order): index into `names`.
    of_stock: Vec<usize>,
    /// Per sector: member stock indices in processing order.
    members: Vec<Vec<usize>>,
}

fn sector_layout(ids: &[String], catalog: &SectorCatalog) -> Result<SectorLayout> {
    let mut names: Vec<String> = Vec::new();
    let mut raw: Vec<String> = Vec::with_capacity(ids.len());
    for id in ids {
        let sector = catalog.sector_of(id).ok_or_else(|| {
            Error::Data(format!("stock {id} is absent from the sector catalog"))
        })?;
        raw.push(sector.to_string());
        if !names.contains(&sector.to_string()) {
            names.push(sector.to_string());
        }
    }
    names.sort();
    let of_stock: Vec<usize> = raw
        .iter()
        .map(|s| names.iter().position(|n| n == s).expect("sector present"))
        .collect();
    let mut members = vec![Vec::new(); names.len()];
    for (q, &c) in of_stock.iter().enumerate() {
        members[c].push(q);
    }
    Ok(SectorLayout { names, of_stock, members })
}

/// Build the forward graph for one instance on the given tape.
///
/// Stocks are processed in ascending id order regardless of input order, so
/// outputs are a pure function of the cross-section contents. `capture`
/// collects attention rows; `with_move` controls whether the second head is
/// evaluated (training under the rank-only variant skips it).
pub fn forward_graph(
    tape: &mut Tape,
    bound: &BoundModel,
    instance: &InstanceWindow,
    catalog: &SectorCatalog,
    capture: bool,
    with_move: bool,
) -> Result<GraphOutputs> {
    let cfg = &bound.config;
    let window = cfg.window();
    let feat_start = cfg.feature_set.start();
    let feat_dim = cfg.feature_dim();

    if instance.stocks.is_empty() {
        return Err(Error::Data(format!(
            "instance {} has an empty cross-section",
            instance.prediction_date
        )));
    }
    let mut order: Vec<usize> = (0..instance.stocks.len()).collect();
    order.sort_by(|&a, &b| instance.stocks[a].stock_id.cmp(&instance.stocks[b].stock_id));

    let mut ids = Vec::with_capacity(order.len());
    let mut true_returns = Vec::with_capacity(order.len());
    let mut true_moves = Vec::with_capacity(order.len());
    let mut day_feats: Vec<Vec<Var>> = Vec::with_capacity(order.len());
    for &idx in &order {
        let slice = &instance.stocks[idx];
        if slice.features.len() != window {
            return Err(Error::Data(format!(
                "stock {} carries {} feature rows, expected {window}",
                slice.stock_id,
                slice.features.len()
            )));
        }
        let mut rows = Vec::with_capacity(window);
        for row in &slice.features {
            if row.len() != FEATURE_DIM {
                return Err(Error::Data(format!(
                    "stock {} feature row has {} columns, expected {FEATURE_DIM}",
                    slice.stock_id,
                    row.len()
                )));
            }
            let sub = row[feat_start..feat_start + feat_dim].to_vec();
            rows.push(tape.constant(Tensor::vector(sub)?));
        }
        ids.push(slice.stock_id.clone());
        true_returns.push(slice.target_return);
        true_moves.push(slice.target_move);
        day_feats.push(rows);
    }

    let mut attention = Vec::new();
    let (pred_return, pred_move) = match &bound.arch {
        BoundArch::Hier(p) => hier_forward(
            tape,
            cfg,
            p,
            &ids,
            &day_feats,
            catalog,
            capture,
            with_move,
            &mut attention,
        )?,
        BoundArch::Mlp(p) => mlp_forward(tape, p, &day_feats, with_move)?,
        BoundArch::GruBaseline(p) => {
            gru_baseline_forward(tape, p, &ids, &day_feats, capture, with_move, &mut attention)?
        }
    };

    Ok(GraphOutputs {
        stock_ids: ids,
        true_returns,
        true_moves,
        pred_return,
        pred_move,
        attention,
    })
}

fn heads_forward(
    tape: &mut Tape,
    heads: &BoundHeads,
    fused: &[Var],
    probability: bool,
    with_move: bool,
) -> Result<(Var, Option<Var>)> {
    let mut returns = Vec::with_capacity(fused.len());
    let mut moves = Vec::with_capacity(fused.len());
    for &f in fused {
        let yr = tape.dot(heads.e_return, f)?;
        returns.push(tape.add(yr, heads.b_return)?);
        if with_move {
            let raw = tape.dot(heads.e_move, f)?;
            let raw = tape.add(raw, heads.b_move)?;
            moves.push(if probability { tape.sigmoid(raw)? } else { raw });
        }
    }
    let pred_return = named("head_return", tape.concat(&returns, 0))?;
    let pred_move = if with_move {
        Some(named("head_move", tape.concat(&moves, 0))?)
    } else {
        None
    };
    Ok((pred_return, pred_move))
}

#[allow(clippy::too_many_arguments)]
fn hier_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    p: &BoundHier,
    ids: &[String],
    day_feats: &[Vec<Var>],
    catalog: &SectorCatalog,
    capture: bool,
    with_move: bool,
    attention: &mut Vec<AttentionRecord>,
) -> Result<(Var, Option<Var>)> {
    let n = ids.len();
    let h0 = tape.constant(Tensor::zeros(vec![cfg.hidden_dim]));
    let layout = sector_layout(ids, catalog)?;

    let capture_alpha = |tape: &Tape, alpha: Var, context: &str, from: &str, to_of: &dyn Fn(usize) -> String, attention: &mut Vec<AttentionRecord>| {
        for (j, w) in tape.value(alpha).iter().enumerate() {
            attention.push(AttentionRecord {
                level: AttnLevel::Temporal,
                context: context.to_string(),
                from: from.to_string(),
                to: to_of(j),
                weight: *w,
            });
        }
    };

    // (1) Short-term: per stock, per week, attentive GRU over the week's days.
    let mut a_weeks: Vec<Vec<Var>> = vec![Vec::with_capacity(n); cfg.weeks];
    for (q, rows) in day_feats.iter().enumerate() {
        for w in 0..cfg.weeks {
            let seq = &rows[w * cfg.days_per_week..(w + 1) * cfg.days_per_week];
            let (states, _) = named("week_gru", gru_forward(tape, &p.week_gru, seq, h0))?;
            let (agg, alpha) =
                named("week_attn", temporal_attention(tape, &p.week_attn, &states))?;
            if capture {
                capture_alpha(
                    tape,
                    alpha,
                    &ids[q],
                    &format!("w{}", w + 1),
                    &|j| format!("d{}", j + 1),
                    attention,
                );
            }
            a_weeks[w].push(agg);
        }
    }

    // (2) Stock-level graph attention per week.
    let g_weeks: Option<Vec<Vec<Var>>> = match (&p.stock_gat, cfg.variant) {
        (Some(gat), Variant::Nt) => {
            let adj = complete_graph(n);
            let mut out = Vec::with_capacity(cfg.weeks);
            for (w, feats) in a_weeks.iter().enumerate() {
                let (outs, betas) = named("stock_gat", gat_forward(tape, gat, &adj, feats))?;
                if capture {
                    let context = format!("all@w{}", w + 1);
                    for (q, &beta) in betas.iter().enumerate() {
                        for (nb, wgt) in tape.value(beta).iter().enumerate() {
                            attention.push(AttentionRecord {
                                level: AttnLevel::Intra,
                                context: context.clone(),
                                from: ids[q].clone(),
                                to: ids[nb].clone(),
                                weight: *wgt,
                            });
                        }
                    }
                }
                out.push(outs);
            }
            Some(out)
        }
        (Some(gat), _) => {
            let mut out: Vec<Vec<Var>> = vec![vec![h0; n]; cfg.weeks];
            for w in 0..cfg.weeks {
                for (c, members) in layout.members.iter().enumerate() {
                    let feats: Vec<Var> = members.iter().map(|&q| a_weeks[w][q]).collect();
                    let adj = complete_graph(members.len());
                    let (outs, betas) = named("stock_gat", gat_forward(tape, gat, &adj, &feats))?;
                    if capture {
                        let context = format!("{}@w{}", layout.names[c], w + 1);
                        for (mi, &beta) in betas.iter().enumerate() {
                            for (mj, wgt) in tape.value(beta).iter().enumerate() {
                                attention.push(AttentionRecord {
                                    level: AttnLevel::Intra,
                                    context: context.clone(),
                                    from: ids[members[mi]].clone(),
                                    to: ids[members[mj]].clone(),
                                    weight: *wgt,
                                });
                            }
                        }
                    }
                    for (mi, &q) in members.iter().enumerate() {
                        out[w][q] = outs[mi];
                    }
                }
            }
            Some(out)
        }
        (None, _) => None,
    };

    // (3) Long-term attentive GRUs over the week sequence, per stream.
    let mut tau_a = Vec::with_capacity(n);
    for q in 0..n {
        let seq: Vec<Var> = (0..cfg.weeks).map(|w| a_weeks[w][q]).collect();
        let (states, _) = named("long_a_gru", gru_forward(tape, &p.long_a_gru, &seq, h0))?;
        let (agg, alpha) =
            named("long_a_attn", temporal_attention(tape, &p.long_a_attn, &states))?;
        if capture {
            capture_alpha(tape, alpha, &ids[q], "long_a", &|w| format!("w{}", w + 1), attention);
        }
        tau_a.push(agg);
    }
    let tau_g: Option<Vec<Var>> = match &g_weeks {
        Some(g) => {
            let gru = p.long_g_gru.as_ref().expect("g stream bound");
            let attn = p.long_g_attn.as_ref().expect("g stream bound");
            let mut out = Vec::with_capacity(n);
            for q in 0..n {
                let seq: Vec<Var> = (0..cfg.weeks).map(|w| g[w][q]).collect();
                let (states, _) = named("long_g_gru", gru_forward(tape, gru, &seq, h0))?;
                let (agg, alpha) =
                    named("long_g_attn", temporal_attention(tape, attn, &states))?;
                if capture {
                    capture_alpha(
                        tape,
                        alpha,
                        &ids[q],
                        "long_g",
                        &|w| format!("w{}", w + 1),
                        attention,
                    );
                }
                out.push(agg);
            }
            Some(out)
        }
        None => None,
    };

    // (4)+(5) Sector pooling and inter-sector graph attention.
    let tau_sector: Option<Vec<Var>> = match &p.inter_gat {
        Some(gat) => {
            let pool_source = tau_g.as_ref().unwrap_or(&tau_a);
            let mut z = Vec::with_capacity(layout.names.len());
            for members in &layout.members {
                let vecs: Vec<Var> = members.iter().map(|&q| pool_source[q]).collect();
                z.push(named("sector_pool", tape.reduce_max_elementwise(&vecs))?);
            }
            let adj = complete_graph(z.len());
            let (outs, betas) = named("inter_gat", gat_forward(tape, gat, &adj, &z))?;
            if capture {
                for (c, &beta) in betas.iter().enumerate() {
                    for (d, wgt) in tape.value(beta).iter().enumerate() {
                        attention.push(AttentionRecord {
                            level: AttnLevel::Inter,
                            context: "sectors".to_string(),
                            from: layout.names[c].clone(),
                            to: layout.names[d].clone(),
                            weight: *wgt,
                        });
                    }
                }
            }
            Some(outs)
        }
        None => None,
    };

    // (6) Fusion; part order follows the published concatenation.
    let mut fused = Vec::with_capacity(n);
    for q in 0..n {
        let mut parts = Vec::new();
        if let Some(g) = &tau_g {
            parts.push(g[q]);
        }
        parts.push(tau_a[q]);
        if let Some(s) = &tau_sector {
            parts.push(s[layout.of_stock[q]]);
        }
        let cat = tape.concat(&parts, 0)?;
        let f = named("fusion", dense(tape, p.fusion, None, cat, Activation::Relu))?;
        fused.push(f);
    }

    // (7) Task heads.
    heads_forward(tape, &p.heads, &fused, cfg.variant.move_head_is_probability(), with_move)
}

fn mlp_forward(
    tape: &mut Tape,
    p: &BoundMlp,
    day_feats: &[Vec<Var>],
    with_move: bool,
) -> Result<(Var, Option<Var>)> {
    let mut fused = Vec::with_capacity(day_feats.len());
    for rows in day_feats {
        let flat = tape.concat(rows, 0)?;
        let h1 = named("mlp.l1", dense(tape, p.w1, Some(p.b1), flat, Activation::Relu))?;
        let h2 = named("mlp.l2", dense(tape, p.w2, Some(p.b2), h1, Activation::Relu))?;
        fused.push(h2);
    }
    heads_forward(tape, &p.heads, &fused, true, with_move)
}

fn gru_baseline_forward(
    tape: &mut Tape,
    p: &BoundGruBaseline,
    ids: &[String],
    day_feats: &[Vec<Var>],
    capture: bool,
    with_move: bool,
    attention: &mut Vec<AttentionRecord>,
) -> Result<(Var, Option<Var>)> {
    let h0 = tape.constant(Tensor::zeros(vec![p.gru.hidden_dim]));
    let mut fused = Vec::with_capacity(day_feats.len());
    for (q, rows) in day_feats.iter().enumerate() {
        let (states, last) = named("seq_gru", gru_forward(tape, &p.gru, rows, h0))?;
        let emb = match &p.attn {
            Some(attn) => {
                let (agg, alpha) =
                    named("seq_attn", temporal_attention(tape, attn, &states))?;
                if capture {
                    for (j, w) in tape.value(alpha).iter().enumerate() {
                        attention.push(AttentionRecord {
                            level: AttnLevel::Temporal,
                            context: ids[q].clone(),
                            from: "seq".to_string(),
                            to: format!("d{}", j + 1),
                            weight: *w,
                        });
                    }
                }
                agg
            }
            None => last,
        };
        fused.push(emb);
    }
    heads_forward(tape, &p.heads, &fused, true, with_move)
}

/// Evaluate one instance with frozen parameters, returning per-stock
/// predictions and captured attention.
pub fn forward(
    state: &ModelState,
    instance: &InstanceWindow,
    catalog: &SectorCatalog,
) -> Result<PredictionBatch> {
    let mut tape = Tape::new();
    let bound = state.bind(&mut tape, false);
    let out = forward_graph(&mut tape, &bound, instance, catalog, true, true)?;

    let returns = tape.value(out.pred_return).to_vec();
    let moves_raw = tape
        .value(out.pred_move.expect("inference always evaluates the second head"))
        .to_vec();
    let probability = state.config.variant.move_head_is_probability();
    let mut predictions = Vec::with_capacity(out.stock_ids.len());
    for (i, id) in out.stock_ids.iter().enumerate() {
        let pred_move = if probability {
            moves_raw[i]
        } else {
            // Regression head: movement is the sign of the predicted value.
            if moves_raw[i] > 0.0 {
                1.0
            } else {
                0.0
            }
        };
        predictions.push(StockPrediction {
            stock_id: id.clone(),
            pred_return: returns[i],
            pred_move,
            true_return: out.true_returns[i],
            true_move: out.true_moves[i],
        });
    }
    Ok(PredictionBatch {
        prediction_date: instance.prediction_date,
        predictions,
        attention: out.attention,
    })
}

/// Entry point for the sector-free variant; the state must have been built
/// with `variant = nt`.
pub fn forward_nt(
    state: &ModelState,
    instance: &InstanceWindow,
    catalog: &SectorCatalog,
) -> Result<PredictionBatch> {
    if state.config.variant != Variant::Nt {
        return Err(Error::Config(format!(
            "forward_nt requires variant nt, state holds {}",
            state.config.variant
        )));
    }
    forward(state, instance, catalog)
}

// ── Attention export ─────────────────────────────────────────────────────

/// A flat attention dump row with the batch date attached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDumpRow {
    pub date: NaiveDate,
    pub level: AttnLevel,
    pub context: String,
    pub from: String,
    pub to: String,
    pub weight: f64,
}

/// Flatten a batch's captured attention into dump rows.
pub fn capture_attention(batch: &PredictionBatch) -> Vec<AttentionDumpRow> {
    batch
        .attention
        .iter()
        .map(|r| AttentionDumpRow {
            date: batch.prediction_date,
            level: r.level,
            context: r.context.clone(),
            from: r.from.clone(),
            to: r.to.clone(),
            weight: r.weight,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnStats {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
}

/// Per-level mean/variance of attention weights (population variance).
pub fn attention_summary(rows: &[AttentionDumpRow]) -> BTreeMap<String, AttnStats> {
    let mut grouped: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows {
        grouped.entry(r.level.to_string()).or_default().push(r.weight);
    }
    grouped
        .into_iter()
        .map(|(level, ws)| {
            let n = ws.len() as f64;
            let mean = ws.iter().sum::<f64>() / n;
            let variance = ws.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / n;
            (level, AttnStats { count: ws.len(), mean, variance })
        })
        .collect()
}
