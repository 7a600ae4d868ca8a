//! Named run configurations and sweep expansion.

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::error::{Error, Result};
use crate::models::{AuxLoss, EncoderShape, LossSpec, ModelConfig, Variant};
use crate::numeric::AdamConfig;
use crate::tasks::{QueryMode, TaskConfig, TaskKind};

const VARIANTS: [Variant; 3] = [Variant::Implicit, Variant::ExplicitMlp, Variant::ExplicitTsf];

fn known_capable(kind: TaskKind) -> bool {
    matches!(kind, TaskKind::LinReg | TaskKind::SinReg | TaskKind::LinCls | TaskKind::MoE)
}

fn paper(kind: TaskKind, variant: Variant) -> RunConfig {
    RunConfig {
        task: TaskConfig::new(kind),
        model: ModelConfig {
            variant,
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    }
}

fn desk_shape() -> EncoderShape {
    EncoderShape {
        layers: 2,
        model_dim: 64,
        mlp_dim: 128,
        heads: 4,
    }
}

/// Small single-worker configuration for one task and variant.
pub fn desk(kind: TaskKind, variant: Variant) -> RunConfig {
    let mut task = TaskConfig::new(kind);
    task.context_min = 8;
    task.context_max = 24;
    match kind {
        TaskKind::LinReg | TaskKind::SinReg => task.x_dim = Some(1),
        TaskKind::MoE => task.train_fraction = Some(0.5),
        _ => {}
    }
    let s = desk_shape();
    RunConfig {
        task,
        model: ModelConfig {
            variant,
            implicit: s,
            context: s,
            predictor: s,
            mlp_hidden: vec![128, 128],
            bottleneck_dim: 64,
            query_visible: true,
        },
        optimizer: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        epochs: 200,
        batches_per_epoch: 10,
        batch_size: 32,
        eval_every: 10,
        eval_episodes: 128,
        ..RunConfig::default()
    }
}

/// Linear-regression scaling base: 100-d inputs, 75-125 context points,
/// 8 heads, 8 layers, 512 hidden and 256 feature dimensions.
pub fn scaling_base(variant: Variant) -> RunConfig {
    let mut task = TaskConfig::new(TaskKind::LinReg);
    task.x_dim = Some(100);
    task.context_min = 75;
    task.context_max = 125;
    let full = EncoderShape {
        layers: 8,
        model_dim: 256,
        mlp_dim: 512,
        heads: 8,
    };
    let half = EncoderShape { layers: 4, ..full };
    RunConfig {
        task,
        model: ModelConfig {
            variant,
            implicit: full,
            context: half,
            predictor: half,
            mlp_hidden: vec![512; 4],
            bottleneck_dim: 256,
            query_visible: true,
        },
        optimizer: AdamConfig {
            lr: 1e-5,
            ..AdamConfig::default()
        },
        epochs: 5000,
        ..RunConfig::default()
    }
}

fn named(name: String, mut cfg: RunConfig) -> (String, RunConfig) {
    cfg.name = name.clone();
    (name, cfg)
}

/// Every shipped preset, keyed by name.
pub fn presets() -> Vec<(String, RunConfig)> {
    let mut out = Vec::new();
    for kind in TaskKind::ALL {
        let mut variants = VARIANTS.to_vec();
        if known_capable(kind) {
            variants.push(Variant::ExplicitKnown);
        }
        variants.push(Variant::ImplicitProxy);
        for v in variants {
            out.push(named(format!("paper_{}_{}", kind.name(), v.name()), paper(kind, v)));
            out.push(named(format!("{}_{}", kind.name(), v.name()), desk(kind, v)));
        }
        for v in [Variant::ExplicitMlp, Variant::ExplicitTsf] {
            let mut cfg = paper(kind, v);
            cfg.model.context = cfg.model.implicit;
            out.push(named(format!("paper_{}_{}_full_context", kind.name(), v.name()), cfg));
        }
        if known_capable(kind) {
            for (scale, mut cfg) in [("paper", paper(kind, Variant::ExplicitMlp)), ("desk", desk(kind, Variant::ExplicitMlp))] {
                cfg.loss = LossSpec {
                    aux: AuxLoss::AuxDecoded,
                    ..LossSpec::default()
                };
                let prefix = if scale == "paper" { "paper_" } else { "" };
                out.push(named(format!("{prefix}{}_explicit_mlp_aux", kind.name()), cfg));
            }
        }
    }
    for v in [Variant::Implicit, Variant::ExplicitMlp, Variant::ExplicitTsf, Variant::ExplicitKnown] {
        out.push(named(format!("scaling_linreg_{}", v.name()), scaling_base(v)));
    }
    for ctx in [4, 6, 8] {
        for (v, preds) in [
            (Variant::Implicit, vec![0]),
            (Variant::ExplicitKnown, vec![0]),
            (Variant::ExplicitMlp, vec![4, 6, 8]),
            (Variant::ExplicitTsf, vec![4, 6, 8]),
        ] {
            for pred in preds {
                let mut cfg = paper(TaskKind::LinReg, v);
                cfg.model.implicit.layers = ctx;
                cfg.model.context.layers = ctx;
                let name = if pred == 0 {
                    format!("ablation_linreg_{}_c{ctx}", v.name())
                } else {
                    cfg.model.predictor.layers = pred;
                    cfg.model.mlp_hidden = vec![512; pred];
                    format!("ablation_linreg_{}_c{ctx}_p{pred}", v.name())
                };
                out.push(named(name, cfg));
            }
        }
    }
    for v in [Variant::Implicit, Variant::ExplicitMlp] {
        for (tag, mode) in [("near", QueryMode::NearContext), ("random", QueryMode::Id)] {
            let mut cfg = shortcut_base(v);
            cfg.train_query = mode;
            out.push(named(format!("shortcut_sinreg_{}_{tag}", v.name()), cfg));
        }
    }
    out
}

/// Desk sinusoid setting used for shortcut injection: queries far from the
/// context at evaluation time probe whether the model copies nearby labels.
pub fn shortcut_base(variant: Variant) -> RunConfig {
    desk(TaskKind::SinReg, variant)
}

pub fn preset(name: &str) -> Option<RunConfig> {
    presets().into_iter().find(|(n, _)| n == name).map(|(_, c)| c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    InputDim,
    ContextLen,
    /// Multiplies heads, layers and widths of every encoder and the MLP.
    ModelSize,
    MoeTrainFraction,
    OutputDim,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::InputDim => "input_dim",
            SweepAxis::ContextLen => "context_len",
            SweepAxis::ModelSize => "model_size",
            SweepAxis::MoeTrainFraction => "moe_train_fraction",
            SweepAxis::OutputDim => "output_dim",
        }
    }

    pub fn parse(s: &str) -> Result<SweepAxis> {
        [
            SweepAxis::InputDim,
            SweepAxis::ContextLen,
            SweepAxis::ModelSize,
            SweepAxis::MoeTrainFraction,
            SweepAxis::OutputDim,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown sweep axis {s:?}")))
    }
}

fn whole(v: f64, axis: SweepAxis) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::Config(format!("{} needs positive integers, got {v}", axis.name())))
    }
}

fn scaled(n: usize, f: f64) -> Result<usize> {
    let v = n as f64 * f;
    if v >= 1.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::Config(format!("model size factor {f} turns {n} into {v}")))
    }
}

fn scale_shape(s: EncoderShape, f: f64) -> Result<EncoderShape> {
    Ok(EncoderShape {
        layers: scaled(s.layers, f)?,
        model_dim: scaled(s.model_dim, f)?,
        mlp_dim: scaled(s.mlp_dim, f)?,
        heads: scaled(s.heads, f)?,
    })
}

/// One config per value, all sharing the base seed.
pub fn sweep_configs(base: &RunConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<RunConfig>> {
    values
        .iter()
        .map(|&v| {
            let mut c = base.clone();
            match axis {
                SweepAxis::InputDim => c.task.x_dim = Some(whole(v, axis)?),
                SweepAxis::OutputDim => c.task.y_dim = Some(whole(v, axis)?),
                SweepAxis::ContextLen => {
                    let n = whole(v, axis)?;
                    c.task.context_min = n.saturating_sub(25).max(1);
                    c.task.context_max = n + 25;
                }
                SweepAxis::ModelSize => {
                    let m = &mut c.model;
                    m.implicit = scale_shape(m.implicit, v)?;
                    m.context = scale_shape(m.context, v)?;
                    m.predictor = scale_shape(m.predictor, v)?;
                    m.bottleneck_dim = scaled(m.bottleneck_dim, v)?;
                    m.mlp_hidden = m.mlp_hidden.iter().map(|&h| scaled(h, v)).collect::<Result<_>>()?;
                }
                SweepAxis::MoeTrainFraction => {
                    if !(v > 0.0 && v <= 1.0) {
                        return Err(Error::Config(format!("train fraction {v} outside (0, 1]")));
                    }
                    c.task.train_fraction = Some(v);
                }
            }
            c.name = format!("{}_{}_{v}", base.name, axis.name());
            Ok(c)
        })
        .collect()
}
