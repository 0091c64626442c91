//! The `commdef` command line: train, eval, replay and emit-curves.
//!
//! Exit codes: 0 success, 1 usage, 2 runtime failure, 3 replay divergence.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};
use commdef::commgraph::AdjacencyMask;
use commdef::policy::Checkpoint;
use commdef::scenario::{build_scenario, load_scenario, Scenario, ScenarioKind};
use commdef::trainer::{
    coordinated_blocks, curves_to_text, emit_curves, evaluate_with, parse_action_log, replay, run_baseline, train,
    Baseline, RunDirectory, TrainConfig, TrainingLog,
};
use commdef::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

/// Overrides the default output directory; `--out` still wins.
pub const OUT_DIR_ENV: &str = "COMMDEF_OUT_DIR";

pub const EVAL_ACTIONS_FILE: &str = "eval_actions.jsonl";

#[derive(Parser, Debug)]
#[command(name = "commdef", about = "Train and evaluate communicating network defenders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a policy and its communication graph.
    Train {
        /// Built-in scenario name or path to a scenario TOML file.
        #[arg(long)]
        scenario: String,
        /// Training config TOML; flags and --set apply on top.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Total environment steps.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        /// Config override such as `model.d_model=32`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory (default `run`, or $COMMDEF_OUT_DIR).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy evaluation of a checkpoint; prints `mean±std`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Refuse unless the checkpoint was trained on this scenario.
        #[arg(long)]
        scenario: Option<String>,
        /// Which communication mask to evaluate with.
        #[arg(long, value_enum, default_value_t = MaskChoice::Learned)]
        mask: MaskChoice,
        /// Output directory for the evaluation action log.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scripted baseline episodes; prints `mean±std`.
    Baseline {
        #[arg(long)]
        scenario: String,
        #[arg(long, value_enum)]
        policy: BaselineChoice,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Re-execute an action log and check every reward bit for bit.
    Replay { log: PathBuf },
    /// Episodes of an action log in which a firewall agent blocked red's
    /// subnet within `window` steps of the first watched detection.
    Coordination {
        log: PathBuf,
        #[arg(long, default_value_t = 3)]
        window: usize,
    },
    /// Window-averaged series from a training CSV.
    EmitCurves {
        csv: PathBuf,
        #[arg(long, default_value_t = 10)]
        window: usize,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MaskChoice {
    Learned,
    Identity,
    Complete,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BaselineChoice {
    Random,
    Sleep,
}

enum Failure {
    Usage(String),
    Runtime(Error),
    Divergence(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return EXIT_USAGE;
            }
            let _ = write!(out, "{}", e.render());
            return EXIT_OK;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
        Err(Failure::Divergence(m)) => {
            let _ = writeln!(err, "divergence: {m}");
            EXIT_DIVERGENCE
        }
    }
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("run"))
}

/// A built-in name, or else a scenario file.
fn resolve_scenario(source: &str) -> Result<Scenario, Failure> {
    match ScenarioKind::from_str(source) {
        Ok(k) => Ok(build_scenario(k)),
        Err(e) => {
            let path = Path::new(source);
            if path.is_file() {
                let text = std::fs::read_to_string(path).map_err(|e| Failure::Runtime(io_error(path, e)))?;
                load_scenario(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
            } else {
                Err(Failure::Usage(e.to_string()))
            }
        }
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Runtime(io_error(path, e)))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(io_error(dir, e)))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::Runtime(io_error(path, e)))
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    match command {
        Command::Train {
            scenario,
            config,
            steps,
            seed,
            threads,
            overrides,
            out: dir,
        } => {
            let scenario = resolve_scenario(&scenario)?;
            let mut cfg = match config {
                Some(p) => TrainConfig::from_toml(&read(&p)?).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
                None => TrainConfig::default(),
            };
            let shorthand = [
                steps.map(|v| format!("total_steps={v}")),
                seed.map(|v| format!("seed={v}")),
                threads.map(|v| format!("threads={v}")),
            ];
            for o in shorthand.into_iter().flatten().chain(overrides) {
                cfg.apply_override(&o).map_err(|e| Failure::Usage(e.to_string()))?;
            }
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let dir = out_dir(dir);
            let summary = {
                let mut sink = RunDirectory::create(&dir)?.on_log(|r| {
                    let eval = match (r.eval_mean, r.eval_std) {
                        (Some(m), Some(s)) => format!(" eval={m:.3}±{s:.3}"),
                        _ => String::new(),
                    };
                    let _ = writeln!(
                        out,
                        "steps={} train={:.3}±{:.3} policy_loss={:.4} value_loss={:.4} entropy={:.4}{eval}",
                        r.steps, r.train_mean, r.train_std, r.policy_loss, r.value_loss, r.entropy
                    );
                });
                train(&scenario, &cfg, &mut sink)?
            };
            let _ = writeln!(
                out,
                "done: {} episodes, {} updates, {} steps; final eval {:.3}±{:.3}; artifacts in {}",
                summary.episodes,
                summary.updates,
                summary.steps,
                summary.final_eval.mean,
                summary.final_eval.std,
                dir.display()
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
            scenario,
            mask,
            out: dir,
        } => {
            if episodes == 0 {
                return Err(Failure::Usage("--episodes must be at least 1".into()));
            }
            let ck = Checkpoint::load(&checkpoint)?;
            let embedded = ck.scenario()?;
            if let Some(s) = scenario {
                ck.check_scenario(&resolve_scenario(&s)?)?;
            }
            let n = embedded.n_agents();
            let fixed = match mask {
                MaskChoice::Learned => None,
                MaskChoice::Identity => Some(AdjacencyMask::identity(n)),
                MaskChoice::Complete => Some(AdjacencyMask::complete(n)),
            };
            let report = evaluate_with(
                &embedded,
                &ck.policy,
                &ck.graph,
                fixed.as_ref(),
                episodes,
                seed,
                &format!("eval seed={seed}"),
            )?;
            let path = out_dir(dir).join(EVAL_ACTIONS_FILE);
            write_file(&path, &report.action_log)?;
            let _ = writeln!(out, "{}±{}", report.mean, report.std);
            let _ = writeln!(err, "{episodes} episodes; action log {}", path.display());
            Ok(())
        }
        Command::Baseline {
            scenario,
            policy,
            episodes,
            seed,
        } => {
            let s = resolve_scenario(&scenario)?;
            let b = match policy {
                BaselineChoice::Random => Baseline::Random,
                BaselineChoice::Sleep => Baseline::Sleep,
            };
            let r = run_baseline(&s, b, episodes, seed)?;
            let _ = writeln!(out, "{}±{}", r.mean, r.std);
            Ok(())
        }
        Command::Replay { log } => {
            let parsed = parse_action_log(&read(&log)?)?;
            let report = replay(&parsed)?;
            match report.divergence {
                None => {
                    let _ = writeln!(
                        out,
                        "replayed {} episodes, {} steps: no divergence",
                        report.episodes, report.steps
                    );
                    Ok(())
                }
                Some(d) => Err(Failure::Divergence(format!(
                    "episode {} step {} (line {}): logged reward {} but replay gives {}",
                    d.episode, d.step, d.line, d.logged, d.replayed
                ))),
            }
        }
        Command::Coordination { log, window } => {
            let parsed = parse_action_log(&read(&log)?)?;
            let hits = coordinated_blocks(&parsed, window)?;
            for h in &hits {
                let _ = writeln!(
                    out,
                    "episode={} detection_step={} block_step={} subnet={}",
                    h.episode, h.detection_step, h.block_step, h.subnet
                );
            }
            let _ = writeln!(out, "{} of {} episodes", hits.len(), parsed.episodes.len());
            Ok(())
        }
        Command::EmitCurves { csv, window, out: dest } => {
            let log = TrainingLog::from_csv(&read(&csv)?)?;
            let curves = emit_curves(&log, window).map_err(|e| Failure::Usage(e.to_string()))?;
            let text = curves_to_text(&curves);
            match dest {
                Some(p) => write_file(&p, &text)?,
                None => {
                    let _ = out.write_all(text.as_bytes());
                }
            }
            Ok(())
        }
    }
}
