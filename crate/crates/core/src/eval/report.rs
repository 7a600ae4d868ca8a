//! Evaluation reports and their long-form CSV views.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    /// Model label, usually the variant name.
    pub model: String,
    pub task: String,
    /// protocol → metric → summary
    pub protocols: BTreeMap<String, BTreeMap<String, MetricSummary>>,
    /// tap → metric → value
    #[serde(default)]
    pub probes: BTreeMap<String, BTreeMap<String, f64>>,
    /// location → metric → value
    #[serde(default)]
    pub das: BTreeMap<String, BTreeMap<String, f64>>,
}

impl EvalReport {
    pub fn new(config_hash: &str, model: &str, task: &str) -> Self {
        EvalReport {
            config_hash: config_hash.to_string(),
            model: model.to_string(),
            task: task.to_string(),
            protocols: BTreeMap::new(),
            probes: BTreeMap::new(),
            das: BTreeMap::new(),
        }
    }

    pub fn metric(&self, protocol: &str, metric: &str) -> Option<MetricSummary> {
        self.protocols.get(protocol)?.get(metric).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(Error::from)
    }

    /// One row per value: `model,task,section,key,metric,mean,stderr,n`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,task,section,key,metric,mean,stderr,n\n");
        for (p, ms) in &self.protocols {
            for (m, v) in ms {
                s.push_str(&format!("{},{},protocol,{p},{m},{},{},{}\n", self.model, self.task, v.mean, v.stderr, v.n));
            }
        }
        for (section, map) in [("probe", &self.probes), ("das", &self.das)] {
            for (k, ms) in map {
                for (m, v) in ms {
                    s.push_str(&format!("{},{},{section},{k},{m},{v},,\n", self.model, self.task));
                }
            }
        }
        s
    }
}

/// Tidy table for one figure layout, built only from `reports`.
///
/// `fig2` keeps the main metric of each task (MSE or accuracy) and tags
/// every protocol as an `ID` or `OOD` panel; `long` emits every protocol
/// metric.
pub fn figure_table(reports: &[(String, EvalReport)], figure: &str) -> Result<String> {
    let mut s = String::new();
    match figure {
        "fig2" => {
            s.push_str("task,model,panel,protocol,metric,mean,stderr,n,source\n");
            let mut rows = Vec::new();
            for (src, r) in reports {
                for (p, ms) in &r.protocols {
                    let (metric, v) = match (ms.get("mse"), ms.get("accuracy")) {
                        (Some(v), _) => ("mse", v),
                        (None, Some(v)) => ("accuracy", v),
                        _ => continue,
                    };
                    let panel = if p == "ID" { "ID" } else { "OOD" };
                    rows.push(format!(
                        "{},{},{panel},{p},{metric},{},{},{},{src}",
                        r.task, r.model, v.mean, v.stderr, v.n
                    ));
                }
            }
            rows.sort();
            for r in rows {
                s.push_str(&r);
                s.push('\n');
            }
        }
        "long" => {
            s.push_str("source,model,task,section,key,metric,mean,stderr,n\n");
            for (src, r) in reports {
                for line in r.to_csv().lines().skip(1) {
                    s.push_str(&format!("{src},{line}\n"));
                }
            }
        }
        other => return Err(Error::Config(format!("unknown figure {other:?}; expected fig2 or long"))),
    }
    Ok(s)
}
