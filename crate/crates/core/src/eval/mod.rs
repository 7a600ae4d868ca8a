//! Evaluation protocols, latent probes and distributed alignment search.

pub mod das;
pub mod probe;
pub mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Model, NoHook};
use crate::numeric::rng::tags;
use crate::numeric::{softmax_in_place, Graph, Tensor};
use crate::tasks::{oracle_predict, Episode, LatentSide, QueryMode, Target, Task, TaskKind};
use crate::training::length_batches;

pub use das::{das_search, das_train, iia, relative_accuracy, DasConfig, DasResult, Intervenable};
pub use probe::{extract_features, probe_fit, probe_sources, FeatureSource, Probe, ProbeScore};
pub use report::{figure_table, EvalReport, MetricSummary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD_query_3x")]
    OodQuery3x,
    #[serde(rename = "OOD_latent_heldout")]
    OodLatent,
    /// Queries at least `far_delta` from every context input.
    #[serde(rename = "NearContextTrainFarEval")]
    FarFromContext,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::Id, Protocol::OodQuery3x, Protocol::OodLatent, Protocol::FarFromContext];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Id => "ID",
            Protocol::OodQuery3x => "OOD_query_3x",
            Protocol::OodLatent => "OOD_latent_heldout",
            Protocol::FarFromContext => "NearContextTrainFarEval",
        }
    }

    pub fn parse(s: &str) -> Result<Protocol> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown protocol {s:?}")))
    }

    pub fn query_mode(self) -> QueryMode {
        match self {
            Protocol::Id | Protocol::OodLatent => QueryMode::Id,
            Protocol::OodQuery3x => QueryMode::Ood3x,
            Protocol::FarFromContext => QueryMode::FarFromContext,
        }
    }

    pub fn side(self) -> LatentSide {
        match self {
            Protocol::OodLatent => LatentSide::Heldout,
            _ => LatentSide::Train,
        }
    }

    fn stream(self) -> u64 {
        (tags::EVAL << 8) | self as u64
    }

    /// Whether the task can generate episodes for this protocol.
    pub fn available(self, task: &Task) -> bool {
        let kind = task.kind();
        let continuous_inputs = !matches!(kind, TaskKind::Raven | TaskKind::Alchemy);
        match self {
            Protocol::Id => true,
            Protocol::OodQuery3x => continuous_inputs && kind != TaskKind::HodgkinHuxley,
            Protocol::OodLatent => kind.is_compositional() && task.split().is_some_and(|s| !s.heldout.is_empty()),
            Protocol::FarFromContext => continuous_inputs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSuite {
    pub protocols: Vec<Protocol>,
    pub n_episodes: usize,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for EvalSuite {
    fn default() -> Self {
        EvalSuite {
            protocols: vec![Protocol::Id, Protocol::OodQuery3x],
            n_episodes: 1000,
            seed: 0,
            batch_size: 64,
        }
    }
}

impl EvalSuite {
    /// Every protocol the task supports.
    pub fn for_task(task: &Task, n_episodes: usize, seed: u64) -> EvalSuite {
        EvalSuite {
            protocols: Protocol::ALL.into_iter().filter(|p| p.available(task)).collect(),
            n_episodes,
            seed,
            ..EvalSuite::default()
        }
    }
}

/// Anything that maps a batch of equal-length episodes to predictions:
/// label means for regression, logits for categorical targets.
pub trait EpisodePredictor {
    fn task(&self) -> &Task;
    fn label(&self) -> String;
    fn predict(&self, batch: &[&Episode]) -> Result<Tensor>;
}

impl EpisodePredictor for Model {
    fn task(&self) -> &Task {
        Model::task(self)
    }

    fn label(&self) -> String {
        self.variant().name().to_string()
    }

    fn predict(&self, batch: &[&Episode]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let f = self.forward(&mut g, &p, batch, &mut NoHook, true)?;
        Ok(g.value(f.pred).clone())
    }
}

/// The closed-form predictor as a pseudo-model.
pub struct OraclePredictor {
    pub task: Task,
}

impl EpisodePredictor for OraclePredictor {
    fn task(&self) -> &Task {
        &self.task
    }

    fn label(&self) -> String {
        "oracle".into()
    }

    fn predict(&self, batch: &[&Episode]) -> Result<Tensor> {
        let rows = batch
            .iter()
            .map(|e| oracle_predict(&self.task, &e.context, &e.query_x))
            .collect::<Result<Vec<_>>>()?;
        let width = rows[0].len();
        Tensor::new(vec![rows.len(), width], rows.concat())
    }
}

/// Episodes of one protocol; index `i` is the same episode for every model.
pub fn protocol_episodes(task: &Task, protocol: Protocol, n: usize, seed: u64) -> Result<Vec<Episode>> {
    if !protocol.available(task) {
        return Err(Error::Unsupported(format!("{} for {}", protocol.name(), task.kind().name())));
    }
    (0..n)
        .map(|i| task.indexed_episode(seed, protocol.stream(), i as u64, protocol.query_mode(), protocol.side()))
        .collect()
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let mut p = row.to_vec();
    softmax_in_place(&mut p);
    p.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect()
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Per-episode metric values for one prediction row.
pub fn episode_metrics(task: &Task, ep: &Episode, pred: &[f64]) -> BTreeMap<&'static str, f64> {
    let mut m = BTreeMap::new();
    match &task.layout().target {
        Target::Regression => {
            let se = pred.iter().zip(&ep.query_y).map(|(p, y)| (p - y) * (p - y)).sum::<f64>();
            m.insert("mse", se / pred.len() as f64);
        }
        Target::Categorical(groups) => {
            let mut offset = 0;
            let (mut nll, mut hits) = (0.0, 0usize);
            let mut logp = Vec::new();
            for (gi, &k) in groups.iter().enumerate() {
                let lp = log_softmax(&pred[offset..offset + k]);
                let y = ep.query_y[gi] as usize;
                nll -= lp[y];
                hits += usize::from(argmax(&lp) == y);
                logp.push(lp);
                offset += k;
            }
            m.insert("log_loss", nll);
            match &ep.choices {
                Some(choices) => {
                    let score = |c: &Vec<f64>| c.iter().zip(&logp).map(|(&v, lp)| lp[v as usize]).sum::<f64>();
                    let scores: Vec<f64> = choices.iter().map(score).collect();
                    let answer = choices.iter().position(|c| c == &ep.query_y);
                    m.insert("accuracy", f64::from(u8::from(answer == Some(argmax(&scores)))));
                    m.insert("attribute_accuracy", hits as f64 / groups.len() as f64);
                }
                None => {
                    m.insert("accuracy", hits as f64 / groups.len() as f64);
                }
            }
        }
    }
    m
}

/// Mean and standard error of a sample.
pub fn summarize(values: &[f64]) -> MetricSummary {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n.max(1) as f64;
    let stderr = if n > 1 {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    MetricSummary { mean, stderr, n }
}

/// Metric summaries over `eps`.
pub fn evaluate_episodes(model: &dyn EpisodePredictor, eps: &[Episode], batch: usize) -> Result<BTreeMap<String, MetricSummary>> {
    let mut per: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    for idx in length_batches(eps, batch) {
        let refs: Vec<&Episode> = idx.iter().map(|&i| &eps[i]).collect();
        let pred = model.predict(&refs)?;
        for (r, ep) in refs.iter().enumerate() {
            for (k, v) in episode_metrics(model.task(), ep, pred.row(r)) {
                per.entry(k).or_default().push(v);
            }
        }
    }
    Ok(per.into_iter().map(|(k, v)| (k.to_string(), summarize(&v))).collect())
}

/// Runs every protocol of the suite on fresh episodes.
pub fn evaluate(model: &dyn EpisodePredictor, suite: &EvalSuite, config_hash: &str) -> Result<EvalReport> {
    let task = model.task();
    let mut report = EvalReport::new(config_hash, &model.label(), task.kind().name());
    for &p in &suite.protocols {
        let eps = protocol_episodes(task, p, suite.n_episodes, suite.seed)?;
        report.protocols.insert(p.name().to_string(), evaluate_episodes(model, &eps, suite.batch_size)?);
    }
    Ok(report)
}
