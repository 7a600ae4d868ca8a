mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use icll::eval::{
    das_search, das_train, evaluate, extract_features, figure_table, probe_fit, probe_sources, protocol_episodes,
    DasConfig, DasResult, EvalReport, EvalSuite, Protocol,
};
use icll::models::{Model, Tap};
use icll::training::{load_run, presets, sweep_configs, train, RunConfig, SweepAxis, CHECKPOINT_FILE};
use icll::{Error, Result};

use config::{out_root, Common};

const EVAL_FILE: &str = "eval.json";
const EVAL_CSV: &str = "eval.csv";
const REPORT_FILE: &str = "report.csv";

#[derive(Parser, Debug)]
#[command(name = "icll", version, about = "Train and analyse implicit and explicit in-context learners")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train one run; writes config.json, runlog.csv and checkpoint.icll.
    Train,
    /// Evaluate a trained run on every requested protocol; writes eval.json.
    Eval {
        /// Run directory holding checkpoint.icll; defaults to --out.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Comma-separated protocol names; defaults to all the task supports.
        #[arg(long, value_delimiter = ',')]
        protocols: Vec<String>,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
    },
    /// Fit linear probes for the task latent at every tap and on raw context.
    Probe {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        episodes: usize,
        /// Share of episodes held out for scoring.
        #[arg(long, default_value_t = 0.2)]
        heldout: f64,
    },
    /// Distributed alignment search at one location or all of them.
    Das {
        #[arg(long)]
        run: Option<PathBuf>,
        /// `bottleneck` or `layerN`; searches every location when absent.
        #[arg(long)]
        location: Option<String>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        latents: Vec<usize>,
        #[arg(long, default_value_t = 400)]
        steps: usize,
        #[arg(long, default_value_t = 512)]
        pairs: usize,
    },
    /// Train and evaluate one run per value along an axis; writes report.csv.
    Sweep {
        /// input_dim, context_len, model_size, moe_train_fraction or output_dim.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
    },
    /// Write generated episodes as JSON lines.
    ExportEpisodes {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value = "ID")]
        protocol: String,
    },
    /// Tidy CSV for a figure, computed only from the given eval.json files.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// fig2 or long.
        #[arg(long, default_value = "fig2")]
        figure: String,
    },
    /// List or export the built-in configs.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand, Debug)]
enum PresetAction {
    List,
    /// Write every preset as `<name>.json` under --out.
    Export,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Directory of a trained run plus the config it was trained under.
fn open_run(c: &Common, run: &Option<PathBuf>) -> Result<(PathBuf, RunConfig, Model)> {
    let dir = run
        .clone()
        .or_else(|| c.out.clone())
        .ok_or_else(|| Error::Config("--run or --out must name a run directory".into()))?;
    let expected = match (&c.config, &c.preset) {
        (None, None) => None,
        _ => Some(c.run_config()?),
    };
    let (cfg, model) = load_run(&dir.join(CHECKPOINT_FILE), expected.as_ref())?;
    Ok((dir, cfg, model))
}

/// The existing report in `dir` when it belongs to the same config.
fn existing_report(dir: &Path, cfg: &RunConfig, model: &Model) -> Result<EvalReport> {
    let path = dir.join(EVAL_FILE);
    let hash = cfg.hash();
    if let Ok(text) = std::fs::read_to_string(&path) {
        let r = EvalReport::from_json(&text)?;
        if r.config_hash == hash {
            return Ok(r);
        }
    }
    Ok(EvalReport::new(&hash, model.variant().name(), cfg.task.kind.name()))
}

fn save_report(dir: &Path, r: &EvalReport) -> Result<()> {
    write(&dir.join(EVAL_FILE), &r.to_json())?;
    write(&dir.join(EVAL_CSV), &r.to_csv())
}

fn suite_for(model: &Model, names: &[String], episodes: usize, seed: u64) -> Result<EvalSuite> {
    let mut suite = EvalSuite::for_task(model.task(), episodes, seed);
    if !names.is_empty() {
        suite.protocols = names.iter().map(|n| Protocol::parse(n)).collect::<Result<_>>()?;
    }
    Ok(suite)
}

fn parse_tap(s: &str) -> Result<Tap> {
    if s == "bottleneck" {
        return Ok(Tap::Bottleneck);
    }
    s.strip_prefix("layer")
        .and_then(|l| l.parse().ok())
        .map(Tap::QueryLayer)
        .ok_or_else(|| Error::Config(format!("unknown location {s:?}; expected bottleneck or layerN")))
}

fn das_entry(r: &DasResult) -> std::collections::BTreeMap<String, f64> {
    let mut m = std::collections::BTreeMap::new();
    m.insert("iia".to_string(), r.iia);
    m.insert("baseline".to_string(), r.baseline);
    m.insert("max_orth_error".to_string(), r.max_orth_error);
    if let Some(v) = r.relative {
        m.insert("relative".to_string(), v);
    }
    if let Some(v) = r.intervened_mse {
        m.insert("intervened_mse".to_string(), v);
    }
    m
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match cli.cmd {
        Cmd::Train => {
            let cfg = c.run_config()?;
            let dir = c.out_dir(&cfg.name);
            let out = train(&cfg, Some(&dir))?;
            let last = out.log.series("valid", "loss").last().map(|r| r.1).unwrap_or(f64::NAN);
            println!("{}: trained {} into {} (final valid loss {last:.6})", cfg.name, out.config_hash, dir.display());
        }
        Cmd::Eval { run, protocols, episodes } => {
            let (dir, cfg, model) = open_run(c, &run)?;
            let suite = suite_for(&model, &protocols, episodes, c.seed.unwrap_or(cfg.seed))?;
            let fresh = evaluate(&model, &suite, &cfg.hash())?;
            let mut r = existing_report(&dir, &cfg, &model)?;
            r.protocols.extend(fresh.protocols);
            let out = c.out.clone().unwrap_or(dir);
            save_report(&out, &r)?;
            print!("{}", r.to_csv());
        }
        Cmd::Probe { run, episodes, heldout } => {
            let (dir, cfg, model) = open_run(c, &run)?;
            let eps = protocol_episodes(model.task(), Protocol::Id, episodes, c.seed.unwrap_or(cfg.seed))?;
            let zs: Vec<Vec<f64>> = eps.iter().map(|e| e.z.clone()).collect();
            let mut r = existing_report(&dir, &cfg, &model)?;
            for src in probe_sources(&model) {
                let f = extract_features(&model, &eps, src, 64)?;
                let p = probe_fit(&f, &zs, model.task().latent(), heldout)?;
                for w in &p.warnings {
                    eprintln!("probe {}: {w}", src.name());
                }
                println!("{},{},{}", src.name(), p.score.metric(), p.score.mean());
                r.probes.insert(src.name(), [(p.score.metric().to_string(), p.score.mean())].into());
            }
            save_report(&c.out.clone().unwrap_or(dir), &r)?;
        }
        Cmd::Das { run, location, k, latents, steps, pairs } => {
            let (dir, cfg, model) = open_run(c, &run)?;
            let dc = DasConfig {
                k,
                latents,
                steps,
                eval_pairs: pairs,
                seed: c.seed.unwrap_or(cfg.seed),
                ..DasConfig::default()
            };
            let results = match location {
                Some(l) => vec![das_train(&model, parse_tap(&l)?, &dc)?],
                None => das_search(&model, &dc)?.1,
            };
            let mut r = existing_report(&dir, &cfg, &model)?;
            for d in &results {
                println!("{},iia,{},baseline,{}", d.location, d.iia, d.baseline);
                r.das.insert(d.location.clone(), das_entry(d));
            }
            let out = c.out.clone().unwrap_or(dir);
            write(&out.join("das.json"), &serde_json::to_string_pretty(&results)?)?;
            save_report(&out, &r)?;
        }
        Cmd::Sweep { axis, values, episodes } => {
            let base = c.run_config()?;
            let axis = SweepAxis::parse(&axis)?;
            let dir = c.out_dir(&format!("{}_{}", base.name, axis.name()));
            let mut table = String::from("axis,value,run,model,task,protocol,metric,mean,stderr,n\n");
            let mut aborted = None;
            for (v, cfg) in values.iter().zip(sweep_configs(&base, axis, &values)?) {
                let run_dir = dir.join(&cfg.name);
                let out = match train(&cfg, Some(&run_dir)) {
                    Ok(o) => o,
                    Err(e @ Error::NanAbort { .. }) => {
                        eprintln!("{}: {e}", cfg.name);
                        aborted = Some(e);
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let suite = EvalSuite::for_task(out.model.task(), episodes, cfg.seed);
                let r = evaluate(&out.model, &suite, &out.config_hash)?;
                save_report(&run_dir, &r)?;
                for (p, ms) in &r.protocols {
                    for (m, s) in ms {
                        table.push_str(&format!(
                            "{},{v},{},{},{},{p},{m},{},{},{}\n",
                            axis.name(),
                            cfg.name,
                            r.model,
                            r.task,
                            s.mean,
                            s.stderr,
                            s.n
                        ));
                    }
                }
                println!("{} done", cfg.name);
            }
            write(&dir.join(REPORT_FILE), &table)?;
            if let Some(e) = aborted {
                return Err(e);
            }
        }
        Cmd::ExportEpisodes { count, protocol } => {
            let cfg = c.run_config()?;
            let task = cfg.build_task()?;
            let p = Protocol::parse(&protocol)?;
            let eps = protocol_episodes(&task, p, count, cfg.seed)?;
            let mut text = String::new();
            for e in &eps {
                text.push_str(&e.to_json_line()?);
                text.push('\n');
            }
            let path = c.out_dir(&cfg.name).join(format!("episodes_{}.jsonl", p.name()));
            write(&path, &text)?;
            println!("{} episodes written to {}", eps.len(), path.display());
        }
        Cmd::Report { inputs, figure } => {
            let mut reports = Vec::new();
            for p in &inputs {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                reports.push((p.display().to_string(), EvalReport::from_json(&text)?));
            }
            let table = figure_table(&reports, &figure)?;
            let path = match &c.out {
                Some(p) if p.extension().is_some_and(|e| e == "csv") => p.clone(),
                Some(p) => p.join(REPORT_FILE),
                None => out_root().join(REPORT_FILE),
            };
            write(&path, &table)?;
            println!("{} rows written to {}", table.lines().count() - 1, path.display());
        }
        Cmd::Presets { action } => match action {
            PresetAction::List => {
                let mut stdout = std::io::stdout().lock();
                for (name, _) in presets() {
                    let _ = writeln!(stdout, "{name}");
                }
            }
            PresetAction::Export => {
                let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("presets"));
                let all = presets();
                for (name, cfg) in &all {
                    write(&dir.join(format!("{name}.json")), &(cfg.to_json() + "\n"))?;
                }
                println!("{} presets written to {}", all.len(), dir.display());
            }
        },
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NanAbort { .. } => 2,
        Error::Config(_) | Error::Json(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
