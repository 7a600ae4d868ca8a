//! Run configuration, the training loop and run outputs.

mod presets;
mod runlog;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{load_checkpoint, save_checkpoint, task_loss, LossSpec, Model, ModelConfig, NoHook};
use crate::numeric::rng::{self, tags};
use crate::numeric::{adam_step, clip_global_norm, AdamConfig, AdamState, Graph};
use crate::tasks::{Episode, LatentSide, QueryMode, Task, TaskConfig};

pub use presets::{preset, presets, sweep_configs, SweepAxis};
pub use runlog::{LogRow, RunLog, RunStatus, RUNLOG_HEADER};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.icll";
pub const RUNLOG_FILE: &str = "runlog.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub loss: LossSpec,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    /// Fresh batches per epoch; an epoch is only a logging unit.
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs between validation rows; 0 logs only at the start and end.
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Epochs between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub train_query: QueryMode,
    /// Global gradient norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            loss: LossSpec::default(),
            optimizer: AdamConfig::default(),
            epochs: 1000,
            batches_per_epoch: 100,
            batch_size: 64,
            seed: 0,
            eval_every: 10,
            eval_episodes: 256,
            checkpoint_every: 0,
            train_query: QueryMode::Id,
            clip_norm: Some(1.0),
        }
    }
}

impl RunConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run configs serialize")
    }

    pub fn from_json(s: &str) -> Result<RunConfig> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("run configs serialize");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batches_per_epoch == 0 {
            return Err(Error::Config("batch_size and batches_per_epoch must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.optimizer.lr)));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn build_task(&self) -> Result<Task> {
        Task::new(self.task.clone(), self.seed)
    }

    /// The model at initialization.
    pub fn build_model(&self) -> Result<Model> {
        let task = self.build_task()?;
        Model::new(&task, self.model.clone(), self.loss.clone(), &mut rng::stream(self.seed, &[tags::INIT]))
    }
}

/// Config echo written next to run outputs and embedded in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub config: RunConfig,
    pub config_hash: String,
    pub version: String,
}

impl ConfigEcho {
    pub fn new(cfg: &RunConfig) -> Self {
        ConfigEcho {
            config: cfg.clone(),
            config_hash: cfg.hash(),
            version: concat!("icll ", env!("CARGO_PKG_VERSION"), " (git ", env!("ICLL_GIT_REV"), ")").to_string(),
        }
    }
}

/// Indices of `eps` grouped into batches of equal context length, each at
/// most `max` long, in order of first appearance.
pub fn length_batches(eps: &[Episode], max: usize) -> Vec<Vec<usize>> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, e) in eps.iter().enumerate() {
        match groups.iter_mut().find(|(n, g)| *n == e.len() && g.len() < max.max(1)) {
            Some((_, g)) => g.push(i),
            None => groups.push((e.len(), vec![i])),
        }
    }
    groups.into_iter().map(|(_, g)| g).collect()
}

/// Mean task loss over `eps`, batched by context length.
pub fn mean_task_loss(model: &Model, eps: &[Episode], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for idx in length_batches(eps, batch) {
        let refs: Vec<&Episode> = idx.iter().map(|&i| &eps[i]).collect();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        let f = model.forward(&mut g, &p, &refs, &mut NoHook, true)?;
        let targets: Vec<&[f64]> = refs.iter().map(|e| e.query_y.as_slice()).collect();
        let l = task_loss(&mut g, model.task(), f.pred, &targets)?;
        total += g.value(l).item() * refs.len() as f64;
    }
    Ok(total / eps.len().max(1) as f64)
}

/// The batch drawn at `(epoch, batch)`: one context length, fresh latents.
pub fn training_batch(cfg: &RunConfig, task: &Task, epoch: usize, batch: usize) -> Result<Vec<Episode>> {
    let mut r = rng::stream(cfg.seed, &[tags::TRAIN, epoch as u64, batch as u64]);
    let n = task.sample_context_len(&mut r);
    (0..cfg.batch_size)
        .map(|_| Ok(task.sample_episode(n, cfg.train_query, LatentSide::Train, &mut r)?.1))
        .collect()
}

/// Fixed validation episodes used for the loss curve.
pub fn validation_set(cfg: &RunConfig, task: &Task) -> Result<Vec<Episode>> {
    (0..cfg.eval_episodes)
        .map(|i| task.indexed_episode(cfg.seed, tags::VALID, i as u64, QueryMode::Id, LatentSide::Train))
        .collect()
}

pub struct TrainOutput {
    pub model: Model,
    pub log: RunLog,
    pub config_hash: String,
}

fn write_checkpoint(dir: Option<&Path>, echo: &str, model: &Model) -> Result<()> {
    match dir {
        Some(d) => save_checkpoint(&d.join(CHECKPOINT_FILE), echo, &model.params),
        None => Ok(()),
    }
}

/// Trains from scratch. With `out_dir`, writes the config echo, the run log
/// (flushed per row) and checkpoints there. A non-finite loss or gradient
/// stops the run before any parameter is touched, saves the last good
/// weights and returns [`Error::NanAbort`].
pub fn train(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutput> {
    cfg.validate()?;
    let task = cfg.build_task()?;
    let mut model = cfg.build_model()?;
    let echo = serde_json::to_string_pretty(&ConfigEcho::new(cfg))?;
    let mut log = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let path = d.join(CONFIG_FILE);
            std::fs::write(&path, &echo).map_err(|e| Error::io(&path, e))?;
            RunLog::create(&d.join(RUNLOG_FILE))?
        }
        None => RunLog::in_memory(),
    };
    let valid = validation_set(cfg, &task)?;
    log.push(0, "valid", "loss", mean_task_loss(&model, &valid, cfg.batch_size)?)?;
    let mut state = AdamState::new(model.params.tensors(), &cfg.optimizer);
    let mut steps = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        for b in 0..cfg.batches_per_epoch {
            let batch = training_batch(cfg, &task, epoch, b)?;
            let refs: Vec<&Episode> = batch.iter().collect();
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let parts = model.loss(&mut g, &p, &refs, &mut NoHook)?;
            let value = g.value(parts.total).item();
            let mut grads = if value.is_finite() {
                g.backward(parts.total)?;
                p.grads(&g)
            } else {
                Vec::new()
            };
            let norm = match cfg.clip_norm {
                Some(c) => clip_global_norm(&mut grads, c),
                None => grads.iter().map(|t| t.sq_norm()).sum::<f64>().sqrt(),
            };
            if !value.is_finite() || !norm.is_finite() {
                write_checkpoint(out_dir, &echo, &model)?;
                log.finish(epoch, RunStatus::NanAbort, steps)?;
                return Err(Error::NanAbort {
                    epoch,
                    batch: b,
                    detail: format!("loss {value}, gradient norm {norm}, context length {}", batch[0].len()),
                });
            }
            adam_step(model.params.tensors_mut(), &grads, &mut state)?;
            steps += 1;
            sum += value;
        }
        let last = epoch == cfg.epochs;
        if last || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0) {
            log.push(epoch, "train", "loss", sum / cfg.batches_per_epoch as f64)?;
            log.push(epoch, "valid", "loss", mean_task_loss(&model, &valid, cfg.batch_size)?)?;
        }
        if !last && cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            write_checkpoint(out_dir, &echo, &model)?;
        }
    }
    write_checkpoint(out_dir, &echo, &model)?;
    log.finish(cfg.epochs, RunStatus::Completed, steps)?;
    Ok(TrainOutput {
        model,
        log,
        config_hash: cfg.hash(),
    })
}

/// Rebuilds a trained model from a checkpoint. The embedded config hash is
/// verified, and so is agreement with `expected` when given.
pub fn load_run(path: &Path, expected: Option<&RunConfig>) -> Result<(RunConfig, Model)> {
    let (json, params) = load_checkpoint(path)?;
    let echo: ConfigEcho =
        serde_json::from_str(&json).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    if echo.config.hash() != echo.config_hash {
        return Err(Error::Checkpoint("embedded config does not match its hash".into()));
    }
    if let Some(exp) = expected {
        if exp.hash() != echo.config_hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained under config {} ({} / {}), not {} ({} / {})",
                &echo.config_hash[..12],
                echo.config.task.kind.name(),
                echo.config.model.variant.name(),
                &exp.hash()[..12],
                exp.task.kind.name(),
                exp.model.variant.name(),
            )));
        }
    }
    let mut model = echo.config.build_model()?;
    model.params.load_from(&params)?;
    Ok((echo.config, model))
}
