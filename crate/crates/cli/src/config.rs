use std::path::{Path, PathBuf};

use clap::Args;
use icll::training::{preset, RunConfig};
use icll::{Error, Result};
use serde_json::Value;

/// Flags shared by every command.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run config as JSON; a config echo written by `train` also works.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Named built-in config, used when --config is absent.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Override any config field, e.g. `--set task.x_dim=3`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batches_per_epoch: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub eval_every: Option<usize>,
    /// Turn off gradient clipping.
    #[arg(long, global = true)]
    pub no_clip: bool,
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, path: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{path}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(key.to_string(), v);
            return Ok(());
        }
        cur = obj
            .get_mut(*key)
            .ok_or_else(|| Error::Config(format!("{path}: no field {key:?}")))?;
    }
    Ok(())
}

/// Accepts a bare run config or a config echo.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let inner = match v.get("config") {
        Some(c) if v.get("config_hash").is_some() => c.clone(),
        _ => v,
    };
    serde_json::from_value(inner).map_err(|e| Error::Config(e.to_string()))
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

impl Common {
    fn overrides(&self) -> Vec<(String, Value)> {
        let mut o: Vec<(String, Value)> = Vec::new();
        if let Some(s) = self.seed {
            o.push(("seed".into(), s.into()));
        }
        if let Some(v) = self.epochs {
            o.push(("epochs".into(), v.into()));
        }
        if let Some(v) = self.batches_per_epoch {
            o.push(("batches_per_epoch".into(), v.into()));
        }
        if let Some(v) = self.batch_size {
            o.push(("batch_size".into(), v.into()));
        }
        if let Some(v) = self.lr {
            o.push(("optimizer.lr".into(), v.into()));
        }
        if let Some(v) = self.eval_every {
            o.push(("eval_every".into(), v.into()));
        }
        if self.no_clip {
            o.push(("clip_norm".into(), Value::Null));
        }
        o
    }

    pub fn has_overrides(&self) -> bool {
        !self.set.is_empty() || !self.overrides().is_empty()
    }

    /// The config named by --config or --preset with every override applied.
    pub fn run_config(&self) -> Result<RunConfig> {
        let base = match (&self.config, &self.preset) {
            (Some(p), _) => read_config(p)?,
            (None, Some(name)) => preset(name).ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?,
            (None, None) => return Err(Error::Config("one of --config or --preset is required".into())),
        };
        self.apply(base)
    }

    pub fn apply(&self, base: RunConfig) -> Result<RunConfig> {
        if !self.has_overrides() {
            return Ok(base);
        }
        let mut v = serde_json::to_value(&base)?;
        for (path, val) in self.overrides() {
            set_path(&mut v, &path, val)?;
        }
        for s in &self.set {
            let (path, raw) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set {s:?}: expected PATH=VALUE")))?;
            set_path(&mut v, path.trim(), parse_value(raw.trim()))?;
        }
        serde_json::from_value(v).map_err(|e| Error::Config(format!("after overrides: {e}")))
    }

    /// `--out`, else `$ICLL_OUT_DIR/<name>`, else `runs/<name>`.
    pub fn out_dir(&self, name: &str) -> PathBuf {
        match &self.out {
            Some(p) => p.clone(),
            None => out_root().join(name),
        }
    }
}

pub fn out_root() -> PathBuf {
    std::env::var_os("ICLL_OUT_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}
