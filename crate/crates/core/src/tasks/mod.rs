//! Task families, episode sampling and closed-form reference predictors.

pub mod alchemy;
pub mod gp;
pub mod hh;
mod oracle;
pub mod raven;
mod split;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::rng::{self, tags, Rng as TaskRng};
use crate::numeric::softmax_in_place;

pub use alchemy::AlchemyPools;
pub use gp::{gp_posterior_mean, gp_sample_joint};
pub use hh::{hh_param_grid, hh_solve, hh_time_grid, HhParams};
pub use oracle::{oracle_predict, sin_amplitudes};
pub use raven::raven_generate;
pub use split::{combo_count, decode_combo, encode_combo, latent_split, LatentSplit};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    #[default]
    LinReg,
    MlpReg,
    SinReg,
    GpReg,
    #[serde(rename = "hh")]
    HodgkinHuxley,
    LinCls,
    MlpCls,
    MoE,
    Raven,
    Alchemy,
}

impl TaskKind {
    pub const ALL: [TaskKind; 10] = [
        TaskKind::LinReg,
        TaskKind::MlpReg,
        TaskKind::SinReg,
        TaskKind::GpReg,
        TaskKind::HodgkinHuxley,
        TaskKind::LinCls,
        TaskKind::MlpCls,
        TaskKind::MoE,
        TaskKind::Raven,
        TaskKind::Alchemy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::LinReg => "linreg",
            TaskKind::MlpReg => "mlpreg",
            TaskKind::SinReg => "sinreg",
            TaskKind::GpReg => "gpreg",
            TaskKind::HodgkinHuxley => "hh",
            TaskKind::LinCls => "lincls",
            TaskKind::MlpCls => "mlpcls",
            TaskKind::MoE => "moe",
            TaskKind::Raven => "raven",
            TaskKind::Alchemy => "alchemy",
        }
    }

    pub fn is_compositional(self) -> bool {
        matches!(self, TaskKind::MoE | TaskKind::Raven | TaskKind::Alchemy)
    }

    pub fn is_regression(self) -> bool {
        matches!(
            self,
            TaskKind::LinReg | TaskKind::MlpReg | TaskKind::SinReg | TaskKind::GpReg | TaskKind::HodgkinHuxley | TaskKind::MoE
        )
    }

    fn default_x_dim(self) -> usize {
        match self {
            TaskKind::LinReg | TaskKind::SinReg | TaskKind::GpReg | TaskKind::HodgkinHuxley => 1,
            TaskKind::MlpReg | TaskKind::LinCls | TaskKind::MlpCls => 2,
            TaskKind::MoE => 4,
            TaskKind::Raven => 2 * raven::ATTRIBUTES,
            TaskKind::Alchemy => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QueryMode {
    #[default]
    #[serde(rename = "id")]
    Id,
    #[serde(rename = "ood3x")]
    Ood3x,
    #[serde(rename = "near_context")]
    NearContext,
    #[serde(rename = "far_from_context")]
    FarFromContext,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentSide {
    #[default]
    Train,
    Heldout,
}

/// Task family and its knobs. Unset dimensions fall back to per-kind defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub x_dim: Option<usize>,
    /// Output dimension of the regression families with a free output size.
    pub y_dim: Option<usize>,
    pub context_min: usize,
    pub context_max: usize,
    /// Gaussian label noise for linear regression.
    pub noise_std: f64,
    pub gp_lengthscale: f64,
    pub sin_terms: usize,
    pub mlp_hidden: usize,
    pub classes: usize,
    pub moe_layers: usize,
    pub moe_experts: usize,
    /// Fraction of latent combinations kept for training; `None` trains on all.
    pub train_fraction: Option<f64>,
    pub near_std: f64,
    pub far_delta: f64,
    pub far_budget: usize,
    pub raven_choices: usize,
    /// Pool sizes for graphs, potion maps and stone maps.
    pub alchemy_pools: [usize; 3],
    pub hh_noise: f64,
    /// Seed for frozen task parameters; defaults to the run seed.
    pub task_seed: Option<u64>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::LinReg,
            x_dim: None,
            y_dim: None,
            context_min: 16,
            context_max: 128,
            noise_std: 0.0,
            gp_lengthscale: 1.0,
            sin_terms: 3,
            mlp_hidden: 64,
            classes: 2,
            moe_layers: 5,
            moe_experts: 5,
            train_fraction: None,
            near_std: 0.1,
            far_delta: 1.0,
            far_budget: 100_000,
            raven_choices: 8,
            alchemy_pools: [16, 8, 8],
            hh_noise: 0.0,
            task_seed: None,
        }
    }
}

impl TaskConfig {
    pub fn new(kind: TaskKind) -> Self {
        TaskConfig {
            kind,
            ..TaskConfig::default()
        }
    }
}

/// How labels enter the model and which loss applies.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Regression,
    /// One softmax group per entry, with that many classes.
    Categorical(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub x_raw: usize,
    pub x_feat: usize,
    pub y_raw: usize,
    pub y_feat: usize,
    pub out_dim: usize,
    pub target: Target,
}

impl Layout {
    /// Width of a context token's features: `x`, `y` and the mask flag.
    pub fn token_dim(&self) -> usize {
        self.x_feat + self.y_feat + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LatentDesc {
    Continuous(usize),
    Categorical(Vec<usize>),
}

impl LatentDesc {
    /// Number of latent components.
    pub fn dim(&self) -> usize {
        match self {
            LatentDesc::Continuous(d) => *d,
            LatentDesc::Categorical(c) => c.len(),
        }
    }

    /// Width of the probe target (one-hot blocks for categorical latents).
    pub fn target_dim(&self) -> usize {
        match self {
            LatentDesc::Continuous(d) => *d,
            LatentDesc::Categorical(c) => c.iter().sum(),
        }
    }

    pub fn probe_target(&self, z: &[f64]) -> Vec<f64> {
        match self {
            LatentDesc::Continuous(_) => z.to_vec(),
            LatentDesc::Categorical(cards) => cards
                .iter()
                .zip(z)
                .flat_map(|(&k, &v)| one_hot(v as usize, k))
                .collect(),
        }
    }
}

/// Parameters frozen for a whole experiment.
#[derive(Clone, Debug, PartialEq)]
pub enum Fixed {
    None,
    Sin { lambda: Vec<f64> },
    Moe { experts: Vec<Vec<f64>> },
    Alchemy(AlchemyPools),
}

/// Per-instance data beyond the latent vector.
#[derive(Clone, Debug, PartialEq)]
pub enum InstanceData {
    None,
    Hh(Vec<f64>),
    Raven(raven::RavenGrid),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskInstance {
    pub z: Vec<f64>,
    pub data: InstanceData,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTags {
    pub query_dist: QueryMode,
    pub latent_split: LatentSide,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// One context set plus a single query. Inputs and labels are stored raw;
/// categorical values are class indices.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Episode {
    pub kind: TaskKind,
    pub z: Vec<f64>,
    pub fixed_ref: String,
    #[serde(serialize_with = "serialize_context")]
    pub context: Vec<Pair>,
    pub query_x: Vec<f64>,
    pub query_y: Vec<f64>,
    pub tags: EpisodeTags,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<Vec<f64>>>,
    /// Class probabilities of the query under the true conditional.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_probs: Option<Vec<f64>>,
}

fn serialize_context<S: serde::Serializer>(ctx: &[Pair], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(ctx.len()))?;
    for p in ctx {
        let row: Vec<f64> = p.x.iter().chain(&p.y).copied().collect();
        seq.serialize_element(&row)?;
    }
    seq.end()
}

impl Episode {
    pub fn len(&self) -> usize {
        self.context.len()
    }

    pub fn is_empty(&self) -> bool {
        self.context.is_empty()
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub fn one_hot(i: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[i] = 1.0;
    v
}

fn normals(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `relu(W1ᵀx + b1)` followed by `W2ᵀh`, weights flattened into `z` in the
/// order `W1 [x × h]`, `b1 [h]`, `W2 [h × out]`.
pub fn mlp_apply(z: &[f64], x: &[f64], hidden: usize, out: usize) -> Vec<f64> {
    let d = x.len();
    let (w1, rest) = z.split_at(d * hidden);
    let (b1, w2) = rest.split_at(hidden);
    let h: Vec<f64> = (0..hidden)
        .map(|j| (b1[j] + (0..d).map(|i| x[i] * w1[i * hidden + j]).sum::<f64>()).max(0.0))
        .collect();
    (0..out).map(|k| (0..hidden).map(|j| h[j] * w2[j * out + k]).sum()).collect()
}

/// `zᵀx` with `z` stored row-major as `[x × out]`.
pub fn linear_apply(z: &[f64], x: &[f64], out: usize) -> Vec<f64> {
    (0..out).map(|k| x.iter().enumerate().map(|(i, xi)| xi * z[i * out + k]).sum()).collect()
}

/// Per-input sine features `Σ_d sin(2π λ_i x_d)`.
pub fn sin_basis(lambda: &[f64], x: &[f64]) -> Vec<f64> {
    lambda
        .iter()
        .map(|l| x.iter().map(|xd| (2.0 * std::f64::consts::PI * l * xd).sin()).sum())
        .collect()
}

/// Composition of `tanh(W x)` experts, first layer first. Each expert is a
/// row-major square matrix.
pub fn moe_apply(experts: &[Vec<f64>], choice: &[usize], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut h = x.to_vec();
    for &c in choice {
        let w = &experts[c];
        h = (0..d).map(|i| (0..d).map(|j| w[i * d + j] * h[j]).sum::<f64>().tanh()).collect();
    }
    h
}

/// A task family with its frozen parameters and latent split.
#[derive(Clone, Debug)]
pub struct Task {
    cfg: TaskConfig,
    task_seed: u64,
    fixed: Fixed,
    split: Option<LatentSplit>,
    layout: Layout,
    latent: LatentDesc,
}

impl Task {
    pub fn new(cfg: TaskConfig, run_seed: u64) -> Result<Task> {
        let task_seed = cfg.task_seed.unwrap_or(run_seed);
        let kind = cfg.kind;
        if cfg.context_min == 0 || cfg.context_min > cfg.context_max {
            return Err(Error::Config(format!(
                "context length range [{}, {}] is empty",
                cfg.context_min, cfg.context_max
            )));
        }
        let x_dim = cfg.x_dim.unwrap_or(kind.default_x_dim());
        if x_dim == 0 {
            return Err(Error::Config("x_dim must be positive".into()));
        }
        if matches!(kind, TaskKind::MoE | TaskKind::Raven | TaskKind::Alchemy | TaskKind::HodgkinHuxley)
            && x_dim != kind.default_x_dim()
        {
            return Err(Error::Config(format!("{} has fixed input dimension {}", kind.name(), kind.default_x_dim())));
        }
        let y_dim = cfg.y_dim.unwrap_or(1);
        if y_dim != 1 && !matches!(kind, TaskKind::LinReg | TaskKind::MlpReg) {
            return Err(Error::Config(format!("{} has a fixed output dimension", kind.name())));
        }
        if cfg.train_fraction.is_some() && !kind.is_compositional() {
            return Err(Error::Config(format!("{} has no compositional latent to split", kind.name())));
        }
        if kind.is_compositional() && matches!(kind, TaskKind::MoE) && (cfg.moe_experts == 0 || cfg.moe_layers == 0) {
            return Err(Error::Config("mixture of experts needs at least one layer and expert".into()));
        }
        if matches!(kind, TaskKind::LinCls | TaskKind::MlpCls) && cfg.classes < 2 {
            return Err(Error::Config("classification needs at least two classes".into()));
        }
        let mut frozen = rng::stream(task_seed, &[tags::FROZEN]);
        let fixed = match kind {
            TaskKind::SinReg => {
                if cfg.sin_terms == 0 {
                    return Err(Error::Config("sin_terms must be positive".into()));
                }
                Fixed::Sin {
                    lambda: (0..cfg.sin_terms).map(|_| frozen.gen_range(0.0..5.0)).collect(),
                }
            }
            TaskKind::MoE => Fixed::Moe {
                experts: (0..cfg.moe_experts).map(|_| normals(&mut frozen, x_dim * x_dim, 0.5)).collect(),
            },
            TaskKind::Alchemy => Fixed::Alchemy(AlchemyPools::sample(cfg.alchemy_pools, &mut frozen)?),
            _ => Fixed::None,
        };
        let h = cfg.mlp_hidden;
        let (layout, latent) = match kind {
            TaskKind::LinReg => (
                regression_layout(x_dim, y_dim),
                LatentDesc::Continuous(x_dim * y_dim),
            ),
            TaskKind::MlpReg => (
                regression_layout(x_dim, y_dim),
                LatentDesc::Continuous(x_dim * h + h + h * y_dim),
            ),
            TaskKind::SinReg => (regression_layout(x_dim, 1), LatentDesc::Continuous(cfg.sin_terms)),
            TaskKind::GpReg => (regression_layout(x_dim, 1), LatentDesc::Continuous(0)),
            TaskKind::HodgkinHuxley => (regression_layout(1, 1), LatentDesc::Continuous(2)),
            TaskKind::LinCls => (
                categorical_layout(x_dim, x_dim, vec![cfg.classes]),
                LatentDesc::Continuous(x_dim * cfg.classes),
            ),
            TaskKind::MlpCls => (
                categorical_layout(x_dim, x_dim, vec![cfg.classes]),
                LatentDesc::Continuous(x_dim * h + h + h * cfg.classes),
            ),
            TaskKind::MoE => (
                regression_layout(x_dim, x_dim),
                LatentDesc::Categorical(vec![cfg.moe_experts; cfg.moe_layers]),
            ),
            TaskKind::Raven => (
                categorical_layout(
                    2 * raven::ATTRIBUTES,
                    2 * raven::ATTRIBUTES * raven::VALUES,
                    vec![raven::VALUES; raven::ATTRIBUTES],
                ),
                LatentDesc::Categorical(vec![raven::RULES; raven::ATTRIBUTES]),
            ),
            TaskKind::Alchemy => {
                let cards = match &fixed {
                    Fixed::Alchemy(p) => p.cards(),
                    _ => unreachable!(),
                };
                (
                    categorical_layout(2, alchemy::STONES + alchemy::POTIONS, vec![alchemy::STONES]),
                    LatentDesc::Categorical(cards),
                )
            }
        };
        let split = match (&latent, cfg.train_fraction) {
            (LatentDesc::Categorical(cards), Some(f)) => {
                Some(latent_split(cards, f, &mut rng::stream(task_seed, &[tags::SPLIT]))?)
            }
            _ => None,
        };
        Ok(Task {
            cfg,
            task_seed,
            fixed,
            split,
            layout,
            latent,
        })
    }

    pub fn kind(&self) -> TaskKind {
        self.cfg.kind
    }

    pub fn cfg(&self) -> &TaskConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn latent(&self) -> &LatentDesc {
        &self.latent
    }

    pub fn fixed(&self) -> &Fixed {
        &self.fixed
    }

    pub fn split(&self) -> Option<&LatentSplit> {
        self.split.as_ref()
    }

    pub fn x_dim(&self) -> usize {
        self.layout.x_raw
    }

    pub fn y_dim(&self) -> usize {
        self.layout.y_raw
    }

    pub fn fixed_ref(&self) -> String {
        format!("{}:{}", self.kind().name(), self.task_seed)
    }

    /// Inputs of this family have a Gaussian marginal.
    fn gaussian_inputs(&self) -> bool {
        !matches!(self.kind(), TaskKind::HodgkinHuxley | TaskKind::Raven | TaskKind::Alchemy)
    }

    pub fn encode_x(&self, x: &[f64]) -> Vec<f64> {
        match self.kind() {
            TaskKind::Raven => x.iter().flat_map(|&v| one_hot(v as usize, raven::VALUES)).collect(),
            TaskKind::Alchemy => {
                let mut f = one_hot(x[0] as usize, alchemy::STONES);
                f.extend(one_hot(x[1] as usize, alchemy::POTIONS));
                f
            }
            _ => x.to_vec(),
        }
    }

    pub fn encode_y(&self, y: &[f64]) -> Vec<f64> {
        match &self.layout.target {
            Target::Regression => y.to_vec(),
            Target::Categorical(groups) => groups
                .iter()
                .zip(y)
                .flat_map(|(&k, &v)| one_hot(v as usize, k))
                .collect(),
        }
    }

    pub fn class_targets(&self, y: &[f64]) -> Vec<usize> {
        y.iter().map(|&v| v as usize).collect()
    }

    pub fn sample_context_len(&self, rng: &mut impl Rng) -> usize {
        if self.kind() == TaskKind::Raven {
            return 2;
        }
        rng.gen_range(self.cfg.context_min..=self.cfg.context_max)
    }

    /// Largest context length `sample_context_len` can return.
    pub fn max_context_len(&self) -> usize {
        if self.kind() == TaskKind::Raven {
            2
        } else {
            self.cfg.context_max
        }
    }

    fn sample_combo(&self, side: LatentSide, cards: &[usize], rng: &mut impl Rng) -> Vec<usize> {
        let pool = self.split.as_ref().map(|s| match side {
            LatentSide::Train => &s.train,
            LatentSide::Heldout if s.heldout.is_empty() => &s.train,
            LatentSide::Heldout => &s.heldout,
        });
        match pool {
            Some(p) => p.choose(rng).expect("split pools are non-empty").clone(),
            None => cards.iter().map(|&k| rng.gen_range(0..k)).collect(),
        }
    }

    /// Draws a latent from the prior, restricted to one side of the split.
    pub fn sample_instance(&self, side: LatentSide, rng: &mut impl Rng) -> Result<TaskInstance> {
        let z: Vec<f64> = match (&self.latent, self.kind()) {
            (LatentDesc::Categorical(cards), _) => {
                self.sample_combo(side, cards, rng).into_iter().map(|c| c as f64).collect()
            }
            (_, TaskKind::SinReg) => (0..self.cfg.sin_terms).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (_, TaskKind::HodgkinHuxley) => {
                let (a, b) = hh::random_grid_point(rng);
                vec![a, b]
            }
            (LatentDesc::Continuous(d), _) => normals(rng, *d, 1.0),
        };
        self.instance_from_z(&z, rng)
    }

    /// Builds the instance for a given latent, drawing any per-instance
    /// nuisance (matrix values) from `rng`.
    pub fn instance_from_z(&self, z: &[f64], rng: &mut impl Rng) -> Result<TaskInstance> {
        if z.len() != self.latent.dim() {
            return Err(Error::invalid("instance_from_z", format!("latent has {} entries, expected {}", z.len(), self.latent.dim())));
        }
        if let LatentDesc::Categorical(cards) = &self.latent {
            if z.iter().zip(cards).any(|(&v, &k)| v < 0.0 || v as usize >= k || v.fract() != 0.0) {
                return Err(Error::invalid("instance_from_z", format!("categorical latent {z:?} outside {cards:?}")));
            }
        }
        let data = match self.kind() {
            TaskKind::HodgkinHuxley => {
                let mut p = HhParams::new(z[0], z[1]);
                p.noise = self.cfg.hh_noise;
                let grid = hh_time_grid();
                let v = if p.noise != 0.0 {
                    hh_solve(&p, &grid, hh::HH_MAX_DT, Some(rng))?
                } else {
                    hh_solve(&p, &grid, hh::HH_MAX_DT, None)?
                };
                InstanceData::Hh(v)
            }
            TaskKind::Raven => {
                let rules = std::array::from_fn(|a| z[a] as usize);
                InstanceData::Raven(raven_generate(rules, rng))
            }
            _ => InstanceData::None,
        };
        Ok(TaskInstance { z: z.to_vec(), data })
    }

    /// Input drawn from the training marginal.
    pub fn sample_input(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self.kind() {
            TaskKind::HodgkinHuxley => vec![rng.gen::<f64>()],
            TaskKind::Alchemy => vec![
                rng.gen_range(0..alchemy::STONES) as f64,
                rng.gen_range(0..alchemy::POTIONS) as f64,
            ],
            TaskKind::Raven => (0..2 * raven::ATTRIBUTES).map(|_| rng.gen_range(0..raven::VALUES) as f64).collect(),
            _ => normals(rng, self.x_dim(), 1.0),
        }
    }

    /// Noise-free label; class probabilities for the classification families.
    pub fn mean_label(&self, inst: &TaskInstance, x: &[f64]) -> Result<Vec<f64>> {
        let z = &inst.z;
        let cfg = &self.cfg;
        Ok(match self.kind() {
            TaskKind::LinReg => linear_apply(z, x, self.y_dim()),
            TaskKind::MlpReg => mlp_apply(z, x, cfg.mlp_hidden, self.y_dim()),
            TaskKind::SinReg => {
                let Fixed::Sin { lambda } = &self.fixed else { unreachable!() };
                let phi = sin_basis(lambda, x);
                vec![phi.iter().zip(z).map(|(p, a)| p * a).sum()]
            }
            TaskKind::GpReg => {
                return Err(Error::Unsupported("pointwise labels for gaussian-process tasks".into()));
            }
            TaskKind::HodgkinHuxley => {
                let InstanceData::Hh(v) = &inst.data else { unreachable!() };
                vec![hh::interp(v, 1.0, x[0]) / HH_V_SCALE]
            }
            TaskKind::LinCls | TaskKind::MlpCls => {
                let mut logits = if self.kind() == TaskKind::LinCls {
                    linear_apply(z, x, cfg.classes)
                } else {
                    mlp_apply(z, x, cfg.mlp_hidden, cfg.classes)
                };
                softmax_in_place(&mut logits);
                logits
            }
            TaskKind::MoE => {
                let Fixed::Moe { experts } = &self.fixed else { unreachable!() };
                let choice: Vec<usize> = z.iter().map(|&c| c as usize).collect();
                moe_apply(experts, &choice, x)
            }
            TaskKind::Raven => {
                let InstanceData::Raven(g) = &inst.data else { unreachable!() };
                let c0: raven::Cell = std::array::from_fn(|a| x[a] as usize);
                let c1: raven::Cell = std::array::from_fn(|a| x[raven::ATTRIBUTES + a] as usize);
                raven::complete_row(&g.rules, &g.triples, &c0, &c1).iter().map(|&v| v as f64).collect()
            }
            TaskKind::Alchemy => {
                let Fixed::Alchemy(p) = &self.fixed else { unreachable!() };
                let env: Vec<usize> = z.iter().map(|&c| c as usize).collect();
                vec![p.transition(&env, x[0] as usize, x[1] as usize) as f64]
            }
        })
    }

    /// Label for `x`: noisy for noisy regression, a categorical draw for the
    /// classification families, the mean label otherwise.
    pub fn label(&self, inst: &TaskInstance, x: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
        let mean = self.mean_label(inst, x)?;
        Ok(match self.kind() {
            TaskKind::LinCls | TaskKind::MlpCls => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut class = mean.len() - 1;
                for (i, p) in mean.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        class = i;
                        break;
                    }
                }
                vec![class as f64]
            }
            TaskKind::LinReg if self.cfg.noise_std > 0.0 => {
                mean.iter().map(|m| m + self.cfg.noise_std * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
            }
            _ => mean,
        })
    }

    /// Query input under `mode`, given the context inputs.
    pub fn sample_query_x(&self, context: &[Vec<f64>], mode: QueryMode, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let unsupported = || Error::Unsupported(format!("{mode:?} queries for {}", self.kind().name()));
        match mode {
            QueryMode::Id => Ok(self.sample_input(rng)),
            QueryMode::Ood3x if self.gaussian_inputs() => Ok(normals(rng, self.x_dim(), 3.0)),
            QueryMode::NearContext if self.gaussian_inputs() || self.kind() == TaskKind::HodgkinHuxley => {
                let base = context.choose(rng).ok_or_else(|| Error::invalid("sample_query", "empty context"))?;
                let eps = normals(rng, base.len(), self.cfg.near_std);
                let mut x: Vec<f64> = base.iter().zip(eps).map(|(b, e)| b + e).collect();
                if self.kind() == TaskKind::HodgkinHuxley {
                    x[0] = x[0].clamp(0.0, 1.0);
                }
                Ok(x)
            }
            QueryMode::FarFromContext if self.gaussian_inputs() || self.kind() == TaskKind::HodgkinHuxley => {
                let d2 = self.cfg.far_delta * self.cfg.far_delta;
                for _ in 0..self.cfg.far_budget {
                    let x = self.sample_input(rng);
                    if context.iter().all(|c| sq_dist(c, &x) >= d2) {
                        return Ok(x);
                    }
                }
                Err(Error::invalid(
                    "sample_query",
                    format!("no query at distance ≥ {} after {} draws", self.cfg.far_delta, self.cfg.far_budget),
                ))
            }
            _ => Err(unsupported()),
        }
    }

    /// Query `(x*, y*)` for an instance.
    pub fn sample_query(&self, inst: &TaskInstance, context: &[Vec<f64>], mode: QueryMode, rng: &mut impl Rng) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = self.sample_query_x(context, mode, rng)?;
        let y = self.label(inst, &x, rng)?;
        Ok((x, y))
    }

    /// Episode with `n` context pairs for a given instance.
    pub fn episode_for(&self, inst: &TaskInstance, n: usize, mode: QueryMode, side: LatentSide, rng: &mut impl Rng) -> Result<Episode> {
        let tags = EpisodeTags {
            query_dist: mode,
            latent_split: side,
        };
        let mut ep = Episode {
            kind: self.kind(),
            z: inst.z.clone(),
            fixed_ref: self.fixed_ref(),
            context: Vec::new(),
            query_x: Vec::new(),
            query_y: Vec::new(),
            tags,
            choices: None,
            query_probs: None,
        };
        match (self.kind(), &inst.data) {
            (TaskKind::Raven, InstanceData::Raven(g)) => {
                if mode != QueryMode::Id {
                    return Err(Error::Unsupported(format!("{mode:?} queries for raven")));
                }
                let row = |r: usize| -> Pair {
                    let x = g.cells[r][0].iter().chain(&g.cells[r][1]).map(|&v| v as f64).collect();
                    let y = g.cells[r][2].iter().map(|&v| v as f64).collect();
                    Pair { x, y }
                };
                ep.context = vec![row(0), row(1)];
                let q = row(2);
                let answer: raven::Cell = std::array::from_fn(|a| g.cells[2][2][a]);
                let (choices, _) = raven::answer_choices(&answer, self.cfg.raven_choices, rng);
                ep.choices = Some(choices.iter().map(|c| c.iter().map(|&v| v as f64).collect()).collect());
                ep.query_x = q.x;
                ep.query_y = q.y;
            }
            (TaskKind::GpReg, _) => {
                let mut xs: Vec<Vec<f64>> = (0..n).map(|_| self.sample_input(rng)).collect();
                let qx = self.sample_query_x(&xs, mode, rng)?;
                xs.push(qx);
                let ys = gp_sample_joint(&xs, self.cfg.gp_lengthscale, rng)?;
                let qx = xs.pop().unwrap();
                ep.context = xs.into_iter().zip(&ys).map(|(x, &y)| Pair { x, y: vec![y] }).collect();
                ep.query_x = qx;
                ep.query_y = vec![ys[n]];
            }
            _ => {
                let mut xs = Vec::with_capacity(n);
                for _ in 0..n {
                    let x = self.sample_input(rng);
                    let y = self.label(inst, &x, rng)?;
                    xs.push(x.clone());
                    ep.context.push(Pair { x, y });
                }
                let (qx, qy) = self.sample_query(inst, &xs, mode, rng)?;
                if matches!(self.kind(), TaskKind::LinCls | TaskKind::MlpCls) {
                    ep.query_probs = Some(self.mean_label(inst, &qx)?);
                }
                ep.query_x = qx;
                ep.query_y = qy;
            }
        }
        Ok(ep)
    }

    /// Fresh instance plus episode.
    pub fn sample_episode(&self, n: usize, mode: QueryMode, side: LatentSide, rng: &mut impl Rng) -> Result<(TaskInstance, Episode)> {
        let inst = self.sample_instance(side, rng)?;
        let ep = self.episode_for(&inst, n, mode, side, rng)?;
        Ok((inst, ep))
    }

    /// Episode `index` of the stream identified by `seed` and `stream`; the
    /// result depends on nothing else.
    pub fn indexed_episode(&self, seed: u64, stream: u64, index: u64, mode: QueryMode, side: LatentSide) -> Result<Episode> {
        let mut r: TaskRng = rng::stream(seed, &[stream, index]);
        let n = self.sample_context_len(&mut r);
        Ok(self.sample_episode(n, mode, side, &mut r)?.1)
    }
}

/// Membrane potentials are divided by this before entering a model; times
/// are given as fractions of the simulated window.
pub const HH_V_SCALE: f64 = 50.0;

fn regression_layout(x: usize, y: usize) -> Layout {
    Layout {
        x_raw: x,
        x_feat: x,
        y_raw: y,
        y_feat: y,
        out_dim: y,
        target: Target::Regression,
    }
}

fn categorical_layout(x_raw: usize, x_feat: usize, groups: Vec<usize>) -> Layout {
    let feat: usize = groups.iter().sum();
    Layout {
        x_raw,
        x_feat,
        y_raw: groups.len(),
        y_feat: feat,
        out_dim: feat,
        target: Target::Categorical(groups),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(kind: TaskKind) -> Task {
        Task::new(TaskConfig::new(kind), 7).unwrap()
    }

    #[test]
    fn linreg_direct_formula() {
        let t = task(TaskKind::LinReg);
        let inst = t.instance_from_z(&[2.0], &mut rng::stream(0, &[])).unwrap();
        assert_eq!(t.mean_label(&inst, &[3.0]).unwrap(), vec![6.0]);
    }

    #[test]
    fn zero_amplitudes_give_zero_sines() {
        let t = task(TaskKind::SinReg);
        let inst = t.instance_from_z(&[0.0; 3], &mut rng::stream(0, &[])).unwrap();
        for x in [-2.0, 0.1, 0.7] {
            assert_eq!(t.mean_label(&inst, &[x]).unwrap(), vec![0.0]);
        }
    }

    #[test]
    fn identity_experts_compose_tanh() {
        let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        let experts = vec![eye; 5];
        let x = [0.5, -1.0, 2.0, 0.0];
        let y = moe_apply(&experts, &[0, 1, 2, 3, 4], &x);
        for (yi, xi) in y.iter().zip(x) {
            let mut v: f64 = xi;
            for _ in 0..5 {
                v = v.tanh();
            }
            assert!((yi - v).abs() < 1e-15);
        }
    }

    #[test]
    fn episodes_are_deterministic() {
        for kind in TaskKind::ALL {
            let mut cfg = TaskConfig::new(kind);
            cfg.context_min = 4;
            cfg.context_max = 8;
            let t = Task::new(cfg, 3).unwrap();
            let a = t.indexed_episode(3, tags::EVAL, 5, QueryMode::Id, LatentSide::Train).unwrap();
            let b = t.indexed_episode(3, tags::EVAL, 5, QueryMode::Id, LatentSide::Train).unwrap();
            assert_eq!(a, b, "{kind:?}");
            let c = t.indexed_episode(3, tags::EVAL, 6, QueryMode::Id, LatentSide::Train).unwrap();
            assert_ne!(a, c, "{kind:?}");
        }
    }

    #[test]
    fn relabeling_reproduces_regression_labels() {
        let mut r = rng::stream(1, &[]);
        for kind in [TaskKind::LinReg, TaskKind::MlpReg, TaskKind::SinReg, TaskKind::MoE, TaskKind::Alchemy, TaskKind::Raven] {
            let t = task(kind);
            let (inst, ep) = t.sample_episode(20, QueryMode::Id, LatentSide::Train, &mut r).unwrap();
            for p in &ep.context {
                assert_eq!(t.mean_label(&inst, &p.x).unwrap(), p.y, "{kind:?}");
            }
            assert_eq!(t.mean_label(&inst, &ep.query_x).unwrap(), ep.query_y);
        }
    }

    #[test]
    fn query_modes() {
        let t = task(TaskKind::LinReg);
        let mut r = rng::stream(2, &[]);
        let n = 20_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| t.sample_query_x(&[], QueryMode::Ood3x, &mut r).unwrap()[0])
            .collect();
        let var = xs.iter().map(|x| x * x).sum::<f64>() / n as f64;
        assert!((var.sqrt() - 3.0).abs() < 0.1);

        let mut cfg = TaskConfig::new(TaskKind::LinReg);
        cfg.near_std = 0.0;
        let t = Task::new(cfg, 0).unwrap();
        let ctx = vec![vec![0.25], vec![-1.5]];
        for _ in 0..20 {
            let q = t.sample_query_x(&ctx, QueryMode::NearContext, &mut r).unwrap();
            assert!(ctx.contains(&q));
        }
        for _ in 0..200 {
            let q = t.sample_query_x(&ctx, QueryMode::FarFromContext, &mut r).unwrap();
            assert!(ctx.iter().all(|c| (c[0] - q[0]).abs() >= 1.0));
        }
    }

    #[test]
    fn far_budget_exhaustion_fails() {
        let mut cfg = TaskConfig::new(TaskKind::LinReg);
        cfg.far_delta = 100.0;
        cfg.far_budget = 50;
        let t = Task::new(cfg, 0).unwrap();
        assert!(t.sample_query_x(&[vec![0.0]], QueryMode::FarFromContext, &mut rng::stream(0, &[])).is_err());
    }

    #[test]
    fn heldout_episodes_use_heldout_latents() {
        let mut cfg = TaskConfig::new(TaskKind::MoE);
        cfg.train_fraction = Some(0.3);
        let t = Task::new(cfg, 1).unwrap();
        let split = t.split().unwrap().clone();
        let mut r = rng::stream(4, &[]);
        for side in [LatentSide::Train, LatentSide::Heldout] {
            for _ in 0..50 {
                let inst = t.sample_instance(side, &mut r).unwrap();
                let combo: Vec<usize> = inst.z.iter().map(|&v| v as usize).collect();
                let pool = if side == LatentSide::Train { &split.train } else { &split.heldout };
                assert!(pool.contains(&combo));
            }
        }
    }

    #[test]
    fn classification_probabilities_sum_to_one() {
        let t = task(TaskKind::MlpCls);
        let mut r = rng::stream(5, &[]);
        let (_, ep) = t.sample_episode(10, QueryMode::Id, LatentSide::Train, &mut r).unwrap();
        let p = ep.query_probs.unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(ep.query_y[0] == 0.0 || ep.query_y[0] == 1.0);
    }

    #[test]
    fn json_line_fields() {
        let t = task(TaskKind::LinReg);
        let ep = t.indexed_episode(0, tags::EXPORT, 0, QueryMode::Id, LatentSide::Train).unwrap();
        let v: serde_json::Value = serde_json::from_str(&ep.to_json_line().unwrap()).unwrap();
        for key in ["kind", "z", "fixed_ref", "context", "query_x", "query_y", "tags"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["kind"], "linreg");
        assert_eq!(v["context"][0].as_array().unwrap().len(), 2);
    }

    #[test]
    fn config_errors() {
        let mut cfg = TaskConfig::new(TaskKind::LinReg);
        cfg.train_fraction = Some(0.5);
        assert!(Task::new(cfg, 0).is_err());
        let mut cfg = TaskConfig::new(TaskKind::MoE);
        cfg.x_dim = Some(3);
        assert!(Task::new(cfg, 0).is_err());
        let mut cfg = TaskConfig::new(TaskKind::SinReg);
        cfg.context_min = 10;
        cfg.context_max = 5;
        assert!(Task::new(cfg, 0).is_err());
    }
}
