//! Implicit and explicit in-context learners.
//!
//! The implicit model reads `[x₁,y₁] … [xₙ,yₙ] [x*, ∅]` with one encoder and
//! predicts at the query token. Explicit models first compress the context
//! into a bottleneck `z_ψ` read at a learned summary token, then predict from
//! `(z_ψ, x*)` alone.

mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Bound, Graph, ParamId, ParamSet, Tensor, Var};
use crate::tasks::{sin_basis, Episode, Fixed, LatentDesc, Target, Task, TaskKind};
use crate::transformer::{pair_features, Encoder, EncoderConfig, Linear, TokenRole, TokenSequence};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Implicit,
    ExplicitMlp,
    ExplicitTsf,
    ExplicitKnown,
    ImplicitProxy,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Implicit => "implicit",
            Variant::ExplicitMlp => "explicit_mlp",
            Variant::ExplicitTsf => "explicit_tsf",
            Variant::ExplicitKnown => "explicit_known",
            Variant::ImplicitProxy => "implicit_proxy",
        }
    }

    pub fn has_bottleneck(self) -> bool {
        self != Variant::Implicit
    }
}

/// Encoder size without the task-dependent input and output widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub layers: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub heads: usize,
}

impl EncoderShape {
    pub fn with_io(self, in_dim: usize, out_dim: usize) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            model_dim: self.model_dim,
            mlp_dim: self.mlp_dim,
            heads: self.heads,
            in_dim,
            out_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub implicit: EncoderShape,
    pub context: EncoderShape,
    pub predictor: EncoderShape,
    /// Hidden widths of the MLP predictor.
    pub mlp_hidden: Vec<usize>,
    pub bottleneck_dim: usize,
    /// Whether the implicit proxy's aggregator sees the query token.
    pub query_visible: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let base = EncoderShape {
            layers: 4,
            model_dim: 256,
            mlp_dim: 512,
            heads: 4,
        };
        ModelConfig {
            variant: Variant::Implicit,
            implicit: EncoderShape { layers: 8, ..base },
            context: base,
            predictor: base,
            mlp_hidden: vec![512; 4],
            bottleneck_dim: 256,
            query_visible: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxLoss {
    #[default]
    None,
    /// `‖z − W z_ψ‖²` with `W` learned jointly.
    AuxDecoded,
    /// `‖z − z_ψ‖²`.
    AuxDirect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskLoss {
    Mse,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSpec {
    /// Must agree with the task's target type when given.
    pub task_loss: Option<TaskLoss>,
    pub aux: AuxLoss,
    pub aux_weight: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            task_loss: None,
            aux: AuxLoss::None,
            aux_weight: 1.0,
        }
    }
}

/// Locations where activations can be read or replaced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tap {
    Bottleneck,
    /// Query-token state after layer `l` (0 = embedding).
    QueryLayer(usize),
}

impl Tap {
    pub fn name(self) -> String {
        match self {
            Tap::Bottleneck => "bottleneck".into(),
            Tap::QueryLayer(l) => format!("layer{l}"),
        }
    }
}

/// Sees every tapped state `[batch, dim]` during a forward pass and returns
/// the state to continue with.
pub trait TapHook {
    fn visit(&mut self, g: &mut Graph, tap: Tap, state: Var) -> Result<Var>;
}

pub struct NoHook;

impl TapHook for NoHook {
    fn visit(&mut self, _: &mut Graph, _: Tap, state: Var) -> Result<Var> {
        Ok(state)
    }
}

#[derive(Clone, Debug)]
enum Predictor {
    Mlp(Vec<Linear>),
    Tsf { z_proj: Option<Linear>, enc: Encoder },
    Known { decode: Linear },
}

#[derive(Clone, Debug)]
enum Parts {
    Implicit(Encoder),
    Explicit {
        ctx: Encoder,
        summary: ParamId,
        predictor: Predictor,
    },
}

/// Output of [`Model::forward`].
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[batch, out_dim]`.
    pub pred: Var,
    /// `[batch, bottleneck_dim]` for explicit variants.
    pub bottleneck: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub task: Var,
    pub aux: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub loss: LossSpec,
    pub params: ParamSet,
    task: Task,
    parts: Parts,
    aux_w: Option<Linear>,
}

impl Model {
    pub fn new(task: &Task, cfg: ModelConfig, loss: LossSpec, rng: &mut impl Rng) -> Result<Model> {
        let lay = task.layout().clone();
        let expected = match lay.target {
            Target::Regression => TaskLoss::Mse,
            Target::Categorical(_) => TaskLoss::CrossEntropy,
        };
        if let Some(l) = loss.task_loss {
            if l != expected {
                return Err(Error::Config(format!("{:?} loss does not fit {} targets", l, task.kind().name())));
            }
        }
        let latent_dim = task.latent().target_dim();
        match loss.aux {
            AuxLoss::None => {}
            _ if !cfg.variant.has_bottleneck() => {
                return Err(Error::Config("auxiliary latent losses need a bottleneck".into()));
            }
            _ if latent_dim == 0 => {
                return Err(Error::Config(format!("{} has no finite latent for an auxiliary loss", task.kind().name())));
            }
            AuxLoss::AuxDirect if cfg.bottleneck_dim != latent_dim => {
                return Err(Error::Config(format!(
                    "aux_direct needs bottleneck_dim {} to equal the latent size {latent_dim}",
                    cfg.bottleneck_dim
                )));
            }
            _ => {}
        }
        let mut ps = ParamSet::new();
        let token = lay.token_dim();
        let parts = match cfg.variant {
            Variant::Implicit => Parts::Implicit(Encoder::new(&mut ps, "implicit", cfg.implicit.with_io(token, lay.out_dim), rng)?),
            v => {
                if cfg.bottleneck_dim == 0 {
                    return Err(Error::Config("bottleneck_dim must be positive".into()));
                }
                // the summary state is the bottleneck itself when widths agree
                let ctx_out = if cfg.bottleneck_dim == cfg.context.model_dim { 0 } else { cfg.bottleneck_dim };
                let ctx = Encoder::new(&mut ps, "context", cfg.context.with_io(token, ctx_out), rng)?;
                let summary = ps.add("context.summary", normal_vector(cfg.context.model_dim, rng));
                let predictor = match v {
                    Variant::ExplicitMlp | Variant::ImplicitProxy => {
                        let mut widths = vec![cfg.bottleneck_dim + lay.x_feat];
                        widths.extend(&cfg.mlp_hidden);
                        widths.push(lay.out_dim);
                        if widths.contains(&0) {
                            return Err(Error::Config("MLP widths must be positive".into()));
                        }
                        Predictor::Mlp(
                            widths
                                .windows(2)
                                .enumerate()
                                .map(|(i, w)| Linear::new(&mut ps, &format!("predictor.fc{i}"), w[0], w[1], true, rng))
                                .collect(),
                        )
                    }
                    Variant::ExplicitTsf => {
                        let z_proj = (cfg.bottleneck_dim != cfg.predictor.model_dim).then(|| {
                            Linear::new(&mut ps, "predictor.z_proj", cfg.bottleneck_dim, cfg.predictor.model_dim, true, rng)
                        });
                        let enc = Encoder::new(&mut ps, "predictor", cfg.predictor.with_io(token, lay.out_dim), rng)?;
                        Predictor::Tsf { z_proj, enc }
                    }
                    Variant::ExplicitKnown => {
                        let width = known_latent_width(task)?;
                        Predictor::Known {
                            decode: Linear::new(&mut ps, "predictor.decode", cfg.bottleneck_dim, width, true, rng),
                        }
                    }
                    Variant::Implicit => unreachable!(),
                };
                Parts::Explicit { ctx, summary, predictor }
            }
        };
        let aux_w = (loss.aux == AuxLoss::AuxDecoded).then(|| {
            let id = ps.add("aux.w", Tensor::zeros(&[cfg.bottleneck_dim, latent_dim]));
            Linear::from_weight(id, cfg.bottleneck_dim, latent_dim)
        });
        Ok(Model {
            cfg,
            loss,
            params: ps,
            task: task.clone(),
            parts,
            aux_w,
        })
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Taps at which DAS and probes can act.
    pub fn taps(&self) -> Vec<Tap> {
        match &self.parts {
            Parts::Implicit(enc) => (0..=enc.cfg.layers).map(Tap::QueryLayer).collect(),
            Parts::Explicit { .. } => vec![Tap::Bottleneck],
        }
    }

    pub fn tap_dim(&self, tap: Tap) -> Result<usize> {
        match (&self.parts, tap) {
            (Parts::Implicit(enc), Tap::QueryLayer(l)) if l <= enc.cfg.layers => Ok(enc.cfg.model_dim),
            (Parts::Explicit { .. }, Tap::Bottleneck) => Ok(self.cfg.bottleneck_dim),
            _ => Err(Error::invalid("tap", format!("{tap:?} does not exist on {}", self.variant().name()))),
        }
    }

    fn token_features(&self, batch: &[&Episode]) -> Result<(usize, Vec<f64>, Vec<f64>)> {
        let n = batch[0].len();
        if batch.iter().any(|e| e.len() != n) {
            return Err(Error::invalid("forward", "episodes in a batch must share the context length"));
        }
        let lay = self.task.layout();
        let mut ctx = Vec::with_capacity(batch.len() * n * lay.token_dim());
        let mut query = Vec::with_capacity(batch.len() * lay.token_dim());
        for ep in batch {
            for p in &ep.context {
                ctx.extend(pair_features(&self.task.encode_x(&p.x), Some(&self.task.encode_y(&p.y)), lay.y_feat));
            }
            query.extend(pair_features(&self.task.encode_x(&ep.query_x), None, lay.y_feat));
        }
        Ok((n, ctx, query))
    }

    /// Predictions for a batch of episodes sharing one context length.
    /// `hard` switches relaxed discrete decoders to their argmax form.
    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &[&Episode], hook: &mut dyn TapHook, hard: bool) -> Result<Forward> {
        if batch.is_empty() {
            return Err(Error::invalid("forward", "empty batch"));
        }
        let b = batch.len();
        let lay = self.task.layout();
        let td = lay.token_dim();
        let (n, ctx_feats, q_feats) = self.token_features(batch)?;
        match &self.parts {
            Parts::Implicit(enc) => {
                let ctx = (n > 0).then(|| g.constant(Tensor::from_parts(vec![b, n, td], ctx_feats)));
                let q = g.constant(Tensor::from_parts(vec![b, 1, td], q_feats));
                let feats = match ctx {
                    Some(c) => g.concat(&[c, q], 1)?,
                    None => q,
                };
                let tokens = enc.embed(g, p, feats)?;
                let mut roles = vec![TokenRole::ContextPair; n];
                roles.push(TokenRole::Query);
                let seq = TokenSequence { tokens, roles };
                let d = enc.cfg.model_dim;
                let mut tap = |g: &mut Graph, l: usize, h: Var| -> Result<Var> {
                    let row = g.slice(h, 1, n, 1)?;
                    let row = g.reshape(row, &[b, d])?;
                    let new = hook.visit(g, Tap::QueryLayer(l), row)?;
                    if new == row {
                        return Ok(h);
                    }
                    let new = g.reshape(new, &[b, 1, d])?;
                    if n == 0 {
                        return Ok(new);
                    }
                    let head = g.slice(h, 1, 0, n)?;
                    g.concat(&[head, new], 1)
                };
                let hidden = enc.forward(g, p, &seq, &mut tap)?;
                let pred = enc.readout(g, p, hidden, &seq, TokenRole::Query)?;
                Ok(Forward { pred, bottleneck: None })
            }
            Parts::Explicit { ctx, summary, predictor } => {
                let mut parts = Vec::new();
                let mut roles = vec![TokenRole::ContextPair; n];
                if n > 0 {
                    let c = g.constant(Tensor::from_parts(vec![b, n, td], ctx_feats));
                    parts.push(ctx.embed(g, p, c)?);
                }
                let q = g.constant(Tensor::from_parts(vec![b, 1, td], q_feats.clone()));
                if self.variant() == Variant::ImplicitProxy && self.cfg.query_visible {
                    parts.push(ctx.embed(g, p, q)?);
                    roles.push(TokenRole::Query);
                }
                let zeros = g.constant(Tensor::zeros(&[b, 1, ctx.cfg.model_dim]));
                parts.push(g.add(zeros, p.var(*summary))?);
                roles.push(TokenRole::Summary);
                let tokens = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 1)? };
                let seq = TokenSequence { tokens, roles };
                let hidden = ctx.forward(g, p, &seq, &mut crate::transformer::no_tap)?;
                let z = ctx.readout(g, p, hidden, &seq, TokenRole::Summary)?;
                let z = hook.visit(g, Tap::Bottleneck, z)?;
                let xs: Vec<&[f64]> = batch.iter().map(|e| e.query_x.as_slice()).collect();
                let pred = self.predict(g, p, predictor, z, &xs, hard)?;
                Ok(Forward { pred, bottleneck: Some(z) })
            }
        }
    }

    /// Prediction from a bottleneck `[batch, bottleneck_dim]` and raw query
    /// inputs; the context enters only through `z`.
    pub fn predict_from_bottleneck(&self, g: &mut Graph, p: &Bound, z: Var, query_x: &[&[f64]], hard: bool) -> Result<Var> {
        match &self.parts {
            Parts::Explicit { predictor, .. } => self.predict(g, p, predictor, z, query_x, hard),
            Parts::Implicit(_) => Err(Error::invalid("predict", "the implicit model has no bottleneck")),
        }
    }

    fn predict(&self, g: &mut Graph, p: &Bound, predictor: &Predictor, z: Var, query_x: &[&[f64]], hard: bool) -> Result<Var> {
        let b = query_x.len();
        let lay = self.task.layout();
        match predictor {
            Predictor::Mlp(layers) => {
                let xf: Vec<f64> = query_x.iter().flat_map(|x| self.task.encode_x(x)).collect();
                let x = g.constant(Tensor::from_parts(vec![b, lay.x_feat], xf));
                let mut h = g.concat(&[z, x], 1)?;
                for (i, l) in layers.iter().enumerate() {
                    h = l.forward(g, p, h)?;
                    if i + 1 < layers.len() {
                        h = g.relu(h);
                    }
                }
                Ok(h)
            }
            Predictor::Tsf { z_proj, enc } => {
                let zt = match z_proj {
                    Some(l) => l.forward(g, p, z)?,
                    None => z,
                };
                let zt = g.reshape(zt, &[b, 1, enc.cfg.model_dim])?;
                let qf: Vec<f64> = query_x
                    .iter()
                    .flat_map(|x| pair_features(&self.task.encode_x(x), None, lay.y_feat))
                    .collect();
                let q = g.constant(Tensor::from_parts(vec![b, 1, lay.token_dim()], qf));
                let qt = enc.embed(g, p, q)?;
                let tokens = g.concat(&[zt, qt], 1)?;
                let seq = TokenSequence {
                    tokens,
                    roles: vec![TokenRole::Summary, TokenRole::Query],
                };
                let hidden = enc.forward(g, p, &seq, &mut crate::transformer::no_tap)?;
                enc.readout(g, p, hidden, &seq, TokenRole::Query)
            }
            Predictor::Known { decode } => {
                let zh = decode.forward(g, p, z)?;
                known_predict(g, &self.task, zh, query_x, hard)
            }
        }
    }

    /// Task loss plus the weighted auxiliary term.
    pub fn loss(&self, g: &mut Graph, p: &Bound, batch: &[&Episode], hook: &mut dyn TapHook) -> Result<LossParts> {
        let f = self.forward(g, p, batch, hook, false)?;
        let targets: Vec<&[f64]> = batch.iter().map(|e| e.query_y.as_slice()).collect();
        let task = task_loss(g, &self.task, f.pred, &targets)?;
        let aux = match (self.loss.aux, f.bottleneck) {
            (AuxLoss::None, _) | (_, None) => None,
            (kind, Some(zpsi)) => {
                let zs: Vec<&[f64]> = batch.iter().map(|e| e.z.as_slice()).collect();
                let w = self.aux_w.as_ref().map(|w| p.var(w.weight()));
                Some(aux_term(g, self.task.latent(), kind, zpsi, w, &zs)?)
            }
        };
        let total = match aux {
            Some(a) => {
                let s = g.scale(a, self.loss.aux_weight);
                g.add(task, s)?
            }
            None => task,
        };
        Ok(LossParts { total, task, aux })
    }
}

fn normal_vector(n: usize, rng: &mut impl Rng) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    Tensor::from_parts(vec![n], (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

/// Width of the decoded latent consumed by the known prediction function.
fn known_latent_width(task: &Task) -> Result<usize> {
    let lay = task.layout();
    match (task.kind(), task.latent()) {
        (TaskKind::LinReg, _) => Ok(lay.x_raw * lay.y_raw),
        (TaskKind::SinReg, LatentDesc::Continuous(k)) => Ok(*k),
        (TaskKind::LinCls, LatentDesc::Continuous(d)) => Ok(*d),
        (TaskKind::MoE, LatentDesc::Categorical(c)) => Ok(c.iter().sum()),
        (k, _) => Err(Error::Config(format!("{} has no analytic prediction function", k.name()))),
    }
}

/// True prediction function applied to a decoded latent `ẑ`.
pub fn known_predict(g: &mut Graph, task: &Task, zh: Var, query_x: &[&[f64]], hard: bool) -> Result<Var> {
    let b = query_x.len();
    let lay = task.layout();
    let xs: Vec<f64> = query_x.iter().flat_map(|x| x.iter().copied()).collect();
    match task.kind() {
        TaskKind::LinReg | TaskKind::LinCls => {
            let (d, out) = (lay.x_raw, lay.out_dim);
            let w = g.reshape(zh, &[b, d, out])?;
            let x = g.constant(Tensor::from_parts(vec![b, 1, d], xs));
            let y = g.matmul(x, w)?;
            g.reshape(y, &[b, out])
        }
        TaskKind::SinReg => {
            let Fixed::Sin { lambda } = task.fixed() else { unreachable!() };
            let phi: Vec<f64> = query_x.iter().flat_map(|x| sin_basis(lambda, x)).collect();
            let phi = g.constant(Tensor::from_parts(vec![b, lambda.len()], phi));
            let prod = g.mul(zh, phi)?;
            let s = g.sum(prod, 1)?;
            g.reshape(s, &[b, 1])
        }
        TaskKind::MoE => {
            let Fixed::Moe { experts } = task.fixed() else { unreachable!() };
            let LatentDesc::Categorical(cards) = task.latent() else { unreachable!() };
            let (layers, k) = (cards.len(), cards[0]);
            let d = lay.x_raw;
            // columns k*d..(k+1)*d hold expert k transposed
            let mut stacked = vec![0.0; d * k * d];
            for (e, w) in experts.iter().enumerate() {
                for i in 0..d {
                    for j in 0..d {
                        stacked[j * k * d + e * d + i] = w[i * d + j];
                    }
                }
            }
            let stacked = g.constant(Tensor::from_parts(vec![d, k * d], stacked));
            let logits = g.reshape(zh, &[b, layers, k])?;
            let weights = if hard {
                let v = g.value(logits).clone();
                let mut hot = vec![0.0; v.len()];
                for (row, out) in v.data().chunks_exact(k).zip(hot.chunks_exact_mut(k)) {
                    let arg = row
                        .iter()
                        .enumerate()
                        .fold(0, |best, (i, &x)| if x > row[best] { i } else { best });
                    out[arg] = 1.0;
                }
                g.constant(Tensor::from_parts(vec![b, layers, k], hot))
            } else {
                g.softmax(logits)
            };
            let mut h = g.constant(Tensor::from_parts(vec![b, d], xs));
            for l in 0..layers {
                let all = g.matmul(h, stacked)?;
                let all = g.tanh(all);
                let all = g.reshape(all, &[b, k, d])?;
                let w = g.slice(weights, 1, l, 1)?;
                let mixed = g.matmul(w, all)?;
                h = g.reshape(mixed, &[b, d])?;
            }
            Ok(h)
        }
        k => Err(Error::Config(format!("{} has no analytic prediction function", k.name()))),
    }
}

/// Mean squared error for regression; summed per-group cross-entropy for
/// categorical targets.
pub fn task_loss(g: &mut Graph, task: &Task, pred: Var, targets: &[&[f64]]) -> Result<Var> {
    let b = targets.len();
    let lay = task.layout();
    match &lay.target {
        Target::Regression => {
            let y: Vec<f64> = targets.iter().flat_map(|t| t.iter().copied()).collect();
            let y = g.constant(Tensor::new(vec![b, lay.y_raw], y)?);
            g.mse(pred, y)
        }
        Target::Categorical(groups) => {
            let mut total: Option<Var> = None;
            let mut offset = 0;
            for (gi, &k) in groups.iter().enumerate() {
                let logits = g.slice(pred, 1, offset, k)?;
                let cls: Vec<usize> = targets.iter().map(|t| t[gi] as usize).collect();
                let ce = g.cross_entropy(logits, &cls)?;
                total = Some(match total {
                    Some(t) => g.add(t, ce)?,
                    None => ce,
                });
                offset += k;
            }
            Ok(total.expect("at least one label group"))
        }
    }
}

/// Batch mean of `‖target(z) − W z_ψ‖²` (decoded) or `‖target(z) − z_ψ‖²`.
pub fn aux_term(g: &mut Graph, latent: &LatentDesc, kind: AuxLoss, zpsi: Var, w: Option<Var>, zs: &[&[f64]]) -> Result<Var> {
    let b = zs.len();
    let t: Vec<f64> = zs.iter().flat_map(|z| latent.probe_target(z)).collect();
    let t = g.constant(Tensor::new(vec![b, latent.target_dim()], t)?);
    let decoded = match (kind, w) {
        (AuxLoss::AuxDecoded, Some(w)) => g.matmul(zpsi, w)?,
        (AuxLoss::AuxDirect, _) => zpsi,
        _ => return Err(Error::invalid("aux_term", "decoded auxiliary loss needs its matrix")),
    };
    let diff = g.sub(t, decoded)?;
    let sq = g.mul(diff, diff)?;
    let per = g.sum(sq, 1)?;
    g.mean(per, 0)
}

#[cfg(test)]
mod tests;
