//! Post-hoc linear decoding of task latents from frozen features.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::argmax;
use crate::error::{Error, Result};
use crate::models::{Model, Tap, TapHook};
use crate::numeric::{Graph, Var};
use crate::tasks::{Episode, LatentDesc, Task};
use crate::training::length_batches;

pub const PROBE_RIDGE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ProbeScore {
    /// Held-out coefficient of determination per latent component.
    R2(Vec<f64>),
    /// Held-out accuracy of the arg-max within each one-hot block.
    Accuracy(Vec<f64>),
}

impl ProbeScore {
    pub fn mean(&self) -> f64 {
        let v = match self {
            ProbeScore::R2(v) | ProbeScore::Accuracy(v) => v,
        };
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn metric(&self) -> &'static str {
        match self {
            ProbeScore::R2(_) => "r2",
            ProbeScore::Accuracy(_) => "accuracy",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    /// `[features × targets]`, row-major.
    pub w: Vec<f64>,
    pub bias: Vec<f64>,
    pub feature_dim: usize,
    pub target_dim: usize,
    pub score: ProbeScore,
    pub train_size: usize,
    pub heldout_size: usize,
    pub warnings: Vec<String>,
}

impl Probe {
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        (0..self.target_dim)
            .map(|t| self.bias[t] + f.iter().enumerate().map(|(i, v)| v * self.w[i * self.target_dim + t]).sum::<f64>())
            .collect()
    }
}

/// Ridge fit of latents on features using the first `1 − heldout` share of
/// the rows, scored on the rest. Categorical latents are fit as one-hot
/// blocks.
pub fn probe_fit(features: &[Vec<f64>], zs: &[Vec<f64>], latent: &LatentDesc, heldout: f64) -> Result<Probe> {
    let n = features.len();
    if n != zs.len() || n < 4 {
        return Err(Error::invalid("probe_fit", format!("{n} feature rows for {} latents", zs.len())));
    }
    if !(heldout > 0.0 && heldout < 1.0) {
        return Err(Error::invalid("probe_fit", format!("held-out share {heldout}")));
    }
    let f = features[0].len();
    if features.iter().any(|r| r.len() != f) {
        return Err(Error::invalid("probe_fit", "ragged feature rows"));
    }
    let targets: Vec<Vec<f64>> = zs.iter().map(|z| latent.probe_target(z)).collect();
    let t = latent.target_dim();
    let n_test = ((n as f64 * heldout).round() as usize).clamp(2, n - 2);
    let n_train = n - n_test;
    let mut warnings = Vec::new();
    if n_train < 10 * f {
        warnings.push(format!("{n_train} training rows for {f} features; at least {} recommended", 10 * f));
    }
    let x = DMatrix::from_fn(n_train, f, |i, j| features[i][j]);
    let y = DMatrix::from_fn(n_train, t, |i, j| targets[i][j]);
    let xm = x.row_mean();
    let ym = y.row_mean();
    let xc = DMatrix::from_fn(n_train, f, |i, j| x[(i, j)] - xm[j]);
    let yc = DMatrix::from_fn(n_train, t, |i, j| y[(i, j)] - ym[j]);
    let gram = xc.transpose() * &xc + DMatrix::identity(f, f) * PROBE_RIDGE;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Linalg("probe gram matrix is singular despite the ridge".into()))?;
    let w = chol.solve(&(xc.transpose() * yc));
    let bias: Vec<f64> = (0..t).map(|j| ym[j] - (0..f).map(|i| xm[i] * w[(i, j)]).sum::<f64>()).collect();
    let mut probe = Probe {
        w: (0..f).flat_map(|i| (0..t).map(move |j| (i, j))).map(|(i, j)| w[(i, j)]).collect(),
        bias,
        feature_dim: f,
        target_dim: t,
        score: ProbeScore::R2(Vec::new()),
        train_size: n_train,
        heldout_size: n_test,
        warnings,
    };
    let preds: Vec<Vec<f64>> = features[n_train..].iter().map(|r| probe.apply(r)).collect();
    let truth = &targets[n_train..];
    probe.score = match latent {
        LatentDesc::Continuous(d) => ProbeScore::R2(
            (0..*d)
                .map(|j| {
                    let mean = truth.iter().map(|r| r[j]).sum::<f64>() / n_test as f64;
                    let tot = truth.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>();
                    let res = truth.iter().zip(&preds).map(|(r, p)| (r[j] - p[j]).powi(2)).sum::<f64>();
                    if tot > 0.0 {
                        1.0 - res / tot
                    } else {
                        f64::NAN
                    }
                })
                .collect(),
        ),
        LatentDesc::Categorical(cards) => {
            let mut offset = 0;
            let acc = cards
                .iter()
                .map(|&k| {
                    let hits = truth
                        .iter()
                        .zip(&preds)
                        .filter(|(r, p)| argmax(&r[offset..offset + k]) == argmax(&p[offset..offset + k]))
                        .count();
                    offset += k;
                    hits as f64 / n_test as f64
                })
                .collect();
            ProbeScore::Accuracy(acc)
        }
    };
    Ok(probe)
}

/// Where probe features come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    Tap(Tap),
    /// Concatenated context pairs, zero-padded to `n_max` pairs.
    RawContext { n_max: usize },
}

impl FeatureSource {
    pub fn name(self) -> String {
        match self {
            FeatureSource::Tap(t) => t.name(),
            FeatureSource::RawContext { .. } => "raw_context".into(),
        }
    }

    pub fn dim(self, model: &Model) -> Result<usize> {
        match self {
            FeatureSource::Tap(t) => model.tap_dim(t),
            FeatureSource::RawContext { n_max } => {
                let lay = model.task().layout();
                Ok(n_max * (lay.x_feat + lay.y_feat))
            }
        }
    }
}

/// Every tap of the model plus the raw-context baseline.
pub fn probe_sources(model: &Model) -> Vec<FeatureSource> {
    let mut v: Vec<FeatureSource> = model.taps().into_iter().map(FeatureSource::Tap).collect();
    v.push(FeatureSource::RawContext {
        n_max: model.task().max_context_len(),
    });
    v
}

/// Copies the state seen at one tap, leaving the forward pass untouched.
pub struct Recorder {
    pub tap: Tap,
    pub rows: Vec<Vec<f64>>,
}

impl TapHook for Recorder {
    fn visit(&mut self, g: &mut Graph, tap: Tap, state: Var) -> Result<Var> {
        if tap == self.tap {
            let v = g.value(state);
            let w = v.shape()[1];
            self.rows.extend(v.data().chunks(w).map(<[f64]>::to_vec));
        }
        Ok(state)
    }
}

fn raw_context(task: &Task, ep: &Episode, n_max: usize) -> Vec<f64> {
    let lay = task.layout();
    let mut f = Vec::with_capacity(n_max * (lay.x_feat + lay.y_feat));
    for p in ep.context.iter().take(n_max) {
        f.extend(task.encode_x(&p.x));
        f.extend(task.encode_y(&p.y));
    }
    f.resize(n_max * (lay.x_feat + lay.y_feat), 0.0);
    f
}

/// Feature rows for `eps` in order.
pub fn extract_features(model: &Model, eps: &[Episode], source: FeatureSource, batch: usize) -> Result<Vec<Vec<f64>>> {
    match source {
        FeatureSource::RawContext { n_max } => Ok(eps.iter().map(|e| raw_context(model.task(), e, n_max)).collect()),
        FeatureSource::Tap(tap) => {
            model.tap_dim(tap)?;
            let mut out = vec![Vec::new(); eps.len()];
            for idx in length_batches(eps, batch) {
                let refs: Vec<&Episode> = idx.iter().map(|&i| &eps[i]).collect();
                let mut rec = Recorder { tap, rows: Vec::new() };
                let mut g = Graph::new();
                let p = model.params.bind(&mut g, false);
                model.forward(&mut g, &p, &refs, &mut rec, true)?;
                for (&i, row) in idx.iter().zip(rec.rows) {
                    out[i] = row;
                }
            }
            Ok(out)
        }
    }
}
