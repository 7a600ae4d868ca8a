//! Distributed alignment search: a learned orthonormal subspace `Π` at one
//! location such that swapping `ΠΠᵀh` between two runs reproduces the
//! prediction for the swapped latent.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::argmax;
use super::probe::Recorder;
use crate::error::{Error, Result};
use crate::models::{task_loss, Model, Tap, TapHook};
use crate::numeric::rng::{self, tags};
use crate::numeric::{adam_step, AdamConfig, AdamState, Graph, Tensor, Var};
use crate::tasks::{Episode, LatentDesc, LatentSide, QueryMode, Target, Task, TaskKind};

/// A model whose activations can be read and replaced at named locations.
pub trait Intervenable {
    fn task(&self) -> &Task;
    fn locations(&self) -> Vec<Tap>;
    fn location_dim(&self, tap: Tap) -> Result<usize>;
    /// Predictions `[batch, out_dim]` with `hook` applied at every location.
    fn run(&self, g: &mut Graph, batch: &[&Episode], hook: &mut dyn TapHook, hard: bool) -> Result<Var>;
}

impl Intervenable for Model {
    fn task(&self) -> &Task {
        Model::task(self)
    }

    fn locations(&self) -> Vec<Tap> {
        self.taps()
    }

    fn location_dim(&self, tap: Tap) -> Result<usize> {
        self.tap_dim(tap)
    }

    fn run(&self, g: &mut Graph, batch: &[&Episode], hook: &mut dyn TapHook, hard: bool) -> Result<Var> {
        let p = self.params.bind(g, false);
        Ok(self.forward(g, &p, batch, hook, hard)?.pred)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DasConfig {
    /// Subspace dimension.
    pub k: usize,
    /// Latent components that differ between base and source.
    pub latents: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub eval_pairs: usize,
    /// Regression interventions count as correct when their squared error
    /// is at most this.
    pub tau: f64,
    pub seed: u64,
}

impl Default for DasConfig {
    fn default() -> Self {
        DasConfig {
            k: 10,
            latents: vec![0],
            steps: 400,
            batch: 32,
            lr: 3e-2,
            eval_pairs: 512,
            tau: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DasResult {
    pub location: String,
    pub latents: Vec<usize>,
    /// `[d, k]` with orthonormal columns.
    pub pi: Tensor,
    pub iia: f64,
    pub baseline: f64,
    /// `None` when the baseline is already perfect.
    pub relative: Option<f64>,
    /// Mean squared error of intervened predictions against the
    /// counterfactual, for regression targets.
    pub intervened_mse: Option<f64>,
    /// Largest `|ΠᵀΠ − I|` entry seen after any optimizer step.
    pub max_orth_error: f64,
}

/// `(IIA − baseline) / (1 − baseline)`, undefined for a perfect baseline.
pub fn relative_accuracy(iia: f64, baseline: f64) -> Option<f64> {
    (baseline < 1.0).then(|| (iia - baseline) / (1.0 - baseline))
}

/// Replaces `ΠΠᵀh` at one location with the source run's `ΠΠᵀh_src`.
pub struct Swap {
    pub tap: Tap,
    pub pi: Var,
    pub source: Var,
}

impl TapHook for Swap {
    fn visit(&mut self, g: &mut Graph, tap: Tap, state: Var) -> Result<Var> {
        if tap != self.tap {
            return Ok(state);
        }
        let diff = g.sub(self.source, state)?;
        let coords = g.matmul(diff, self.pi)?;
        let pit = g.transpose(self.pi, 0, 1)?;
        let back = g.matmul(coords, pit)?;
        g.add(state, back)
    }
}

/// Base/source episodes sharing one context length, with the labels the
/// base query would receive under the source latent.
pub struct PairBatch {
    pub base: Vec<Episode>,
    pub source: Vec<Episode>,
    pub targets: Vec<Vec<f64>>,
}

fn counterfactual(task: &Task, inst: &crate::tasks::TaskInstance, x: &[f64]) -> Result<Vec<f64>> {
    let y = task.mean_label(inst, x)?;
    Ok(match task.kind() {
        TaskKind::LinCls | TaskKind::MlpCls => vec![argmax(&y) as f64],
        _ => y,
    })
}

/// `count` pairs whose latents differ only at `latents`.
pub fn sample_pairs(task: &Task, latents: &[usize], count: usize, rng: &mut impl Rng) -> Result<PairBatch> {
    let dim = task.latent().dim();
    if latents.is_empty() || latents.iter().any(|&i| i >= dim) {
        return Err(Error::invalid("das", format!("latent indices {latents:?} for a {dim}-component latent")));
    }
    let n = task.sample_context_len(rng);
    let mut out = PairBatch {
        base: Vec::with_capacity(count),
        source: Vec::with_capacity(count),
        targets: Vec::with_capacity(count),
    };
    for _ in 0..count {
        let base = task.sample_instance(LatentSide::Train, rng)?;
        let mut zbar = base.z.clone();
        for _ in 0..64 {
            let other = task.sample_instance(LatentSide::Train, rng)?;
            for &i in latents {
                zbar[i] = other.z[i];
            }
            if zbar != base.z {
                break;
            }
        }
        let src = task.instance_from_z(&zbar, rng)?;
        let b = task.episode_for(&base, n, QueryMode::Id, LatentSide::Train, rng)?;
        let s = task.episode_for(&src, n, QueryMode::Id, LatentSide::Train, rng)?;
        out.targets.push(counterfactual(task, &src, &b.query_x)?);
        out.base.push(b);
        out.source.push(s);
    }
    Ok(out)
}

fn location_code(tap: Tap) -> u64 {
    match tap {
        Tap::Bottleneck => 0,
        Tap::QueryLayer(l) => l as u64 + 1,
    }
}

fn source_states(model: &dyn Intervenable, tap: Tap, eps: &[Episode]) -> Result<Tensor> {
    let refs: Vec<&Episode> = eps.iter().collect();
    let mut rec = Recorder { tap, rows: Vec::new() };
    let mut g = Graph::new();
    model.run(&mut g, &refs, &mut rec, true)?;
    let d = rec.rows.first().map_or(0, Vec::len);
    Tensor::new(vec![rec.rows.len(), d], rec.rows.concat())
}

fn intervened(model: &dyn Intervenable, tap: Tap, pi: &Tensor, batch: &PairBatch, hard: bool) -> Result<(Graph, Var, Var)> {
    let src = source_states(model, tap, &batch.source)?;
    let mut g = Graph::new();
    let piv = g.param(pi.clone());
    let source = g.constant(src);
    let mut hook = Swap { tap, pi: piv, source };
    let refs: Vec<&Episode> = batch.base.iter().collect();
    let pred = model.run(&mut g, &refs, &mut hook, hard)?;
    Ok((g, pred, piv))
}

/// Orthonormal basis of the column span, with signs fixed so the QR factor
/// has a non-negative diagonal.
pub fn orthonormalize(pi: &Tensor) -> Result<Tensor> {
    let (d, k) = (pi.shape()[0], pi.shape()[1]);
    let m = DMatrix::from_row_slice(d, k, pi.data());
    let qr = m.qr();
    let (q, r) = (qr.q(), qr.r());
    let mut out = vec![0.0; d * k];
    for j in 0..k {
        let s = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            out[i * k + j] = s * q[(i, j)];
        }
    }
    Tensor::new(vec![d, k], out)
}

/// Largest entry of `|ΠᵀΠ − I|`.
pub fn orthonormality_error(pi: &Tensor) -> f64 {
    let (d, k) = (pi.shape()[0], pi.shape()[1]);
    let m = DMatrix::from_row_slice(d, k, pi.data());
    let gram = m.transpose() * &m - DMatrix::<f64>::identity(k, k);
    gram.iter().fold(0.0, |a: f64, v| a.max(v.abs()))
}

/// Principal angles in degrees between the column spans of two
/// orthonormal `[d, k]` matrices, largest first.
pub fn principal_angles(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let m = |t: &Tensor| DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data());
    let s = (m(a).transpose() * m(b)).singular_values();
    let mut angles: Vec<f64> = s.iter().map(|c| c.clamp(-1.0, 1.0).acos().to_degrees()).collect();
    angles.sort_by(|x, y| y.total_cmp(x));
    angles
}

fn correct(task: &Task, pred: &[f64], target: &[f64], tau: f64) -> (bool, f64) {
    match &task.layout().target {
        Target::Regression => {
            let se = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64;
            (se <= tau, se)
        }
        Target::Categorical(groups) => {
            let mut offset = 0;
            let ok = groups.iter().zip(target).all(|(&k, &t)| {
                let hit = argmax(&pred[offset..offset + k]) == t as usize;
                offset += k;
                hit
            });
            (ok, 0.0)
        }
    }
}

/// Interchange intervention accuracy of `pi` over `batches`, the same
/// score without intervention, and their relative accuracy.
pub fn iia(model: &dyn Intervenable, tap: Tap, pi: &Tensor, batches: &[PairBatch], tau: f64) -> Result<DasResult> {
    let task = model.task();
    let (mut hits, mut base_hits, mut total, mut se_sum) = (0usize, 0usize, 0usize, 0.0);
    for b in batches {
        let (g, pred, _) = intervened(model, tap, pi, b, true)?;
        let mut g0 = Graph::new();
        let refs: Vec<&Episode> = b.base.iter().collect();
        let base_pred = model.run(&mut g0, &refs, &mut crate::models::NoHook, true)?;
        for (i, t) in b.targets.iter().enumerate() {
            let (ok, se) = correct(task, g.value(pred).row(i), t, tau);
            let (base_ok, _) = correct(task, g0.value(base_pred).row(i), t, tau);
            hits += usize::from(ok);
            base_hits += usize::from(base_ok);
            se_sum += se;
            total += 1;
        }
    }
    let total_f = total.max(1) as f64;
    let (iia, baseline) = (hits as f64 / total_f, base_hits as f64 / total_f);
    Ok(DasResult {
        location: tap.name(),
        latents: Vec::new(),
        pi: pi.clone(),
        iia,
        baseline,
        relative: relative_accuracy(iia, baseline),
        intervened_mse: matches!(task.layout().target, Target::Regression).then_some(se_sum / total_f),
        max_orth_error: orthonormality_error(pi),
    })
}

/// Learns `Π` at `tap` by Adam on the interchange loss, re-orthonormalizing
/// after every step, then scores it on fresh pairs.
pub fn das_train(model: &dyn Intervenable, tap: Tap, cfg: &DasConfig) -> Result<DasResult> {
    let task = model.task();
    if task.kind() == TaskKind::GpReg || matches!(task.latent(), LatentDesc::Continuous(0)) {
        return Err(Error::Unsupported(format!("{} has no finite latent to intervene on", task.kind().name())));
    }
    let d = model.location_dim(tap)?;
    if cfg.k == 0 || cfg.k > d {
        return Err(Error::invalid("das", format!("subspace dimension {} at a {d}-dimensional location", cfg.k)));
    }
    let mut r = rng::stream(cfg.seed, &[tags::DAS, location_code(tap)]);
    let init: Vec<f64> = (0..d * cfg.k).map(|_| StandardNormal.sample(&mut r)).collect();
    let mut pi = orthonormalize(&Tensor::new(vec![d, cfg.k], init)?)?;
    let mut state = AdamState::new(std::slice::from_ref(&pi), &AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut max_orth = orthonormality_error(&pi);
    for _ in 0..cfg.steps {
        let batch = sample_pairs(task, &cfg.latents, cfg.batch, &mut r)?;
        let (mut g, pred, piv) = intervened(model, tap, &pi, &batch, false)?;
        let targets: Vec<&[f64]> = batch.targets.iter().map(Vec::as_slice).collect();
        let loss = task_loss(&mut g, task, pred, &targets)?;
        g.backward(loss)?;
        let grad = g.grad(piv).cloned().unwrap_or_else(|| Tensor::zeros(pi.shape()));
        adam_step(std::slice::from_mut(&mut pi), &[grad], &mut state)?;
        pi = orthonormalize(&pi)?;
        max_orth = max_orth.max(orthonormality_error(&pi));
    }
    let mut er = rng::stream(cfg.seed, &[tags::DAS, location_code(tap), 1]);
    let mut batches = Vec::new();
    let mut left = cfg.eval_pairs;
    while left > 0 {
        let m = left.min(cfg.batch.max(1));
        batches.push(sample_pairs(task, &cfg.latents, m, &mut er)?);
        left -= m;
    }
    let mut res = iia(model, tap, &pi, &batches, cfg.tau)?;
    res.latents = cfg.latents.clone();
    res.max_orth_error = res.max_orth_error.max(max_orth);
    Ok(res)
}

/// DAS at every location of the model; returns the best by IIA and all
/// results.
pub fn das_search(model: &dyn Intervenable, cfg: &DasConfig) -> Result<(DasResult, Vec<DasResult>)> {
    let all = model
        .locations()
        .into_iter()
        .map(|t| das_train(model, t, cfg))
        .collect::<Result<Vec<_>>>()?;
    let best = all
        .iter()
        .max_by(|a, b| a.iia.total_cmp(&b.iia))
        .cloned()
        .ok_or_else(|| Error::invalid("das", "model has no intervention locations"))?;
    Ok((best, all))
}
