//! The `cpql` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use cpql_core::envs::{normalized_score, ScoreRef, HOPPER_REF};
use cpql_core::seed::split_seed;
use cpql_core::theory::CheckReport;
use serde::Serialize;

use crate::config::{ExperimentConfig, Operator};
use crate::error::{invalid, Error, Result};
use crate::io::{dataset_jsonl, read_dataset, read_mdp, train_csv, MdpFile, OutputDir, TablesFile};
use crate::o2o::{run_o2o, summarize, write_o2o};
use crate::sweep::{run_cell, run_sweep, write_sweep, Cell};
use crate::verify::{run_verify, write_verify};

#[derive(Debug, Parser)]
#[command(name = "cpql", version, about = "Tabular conservative Peng's Q(lambda) experiments and checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment configuration (JSON); defaults apply when omitted.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the configured environment and write mdp.json.
    GenEnv(Common),
    /// Collect the recipe dataset: mdp.json, dataset.jsonl, dataset.meta.json.
    Collect(Common),
    /// Train one learner with the `train` settings.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "cpql")]
        operator: Operator,
        /// Train on this JSON Lines dataset instead of collecting one.
        #[arg(long, value_name = "FILE")]
        dataset: Option<PathBuf>,
        /// MDP of the dataset and of evaluation (default: the configured env).
        #[arg(long, value_name = "FILE")]
        mdp: Option<PathBuf>,
    },
    /// Run the theory check suite; exits 1 if an asserted check fails.
    Verify(Common),
    /// Run the (operator, alpha, lambda, seed) grid.
    Sweep(Common),
    /// Offline pretraining then online fine-tuning, with baseline arms.
    O2o(Common),
    /// Normalize raw returns: 100 (raw - ref_min) / (ref_max - ref_min).
    Score {
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Raw returns to normalize.
        #[arg(long, required = true, num_args = 1..)]
        raw: Vec<f64>,
        #[arg(long, requires = "ref_max", allow_hyphen_values = true)]
        ref_min: Option<f64>,
        #[arg(long, requires = "ref_min", allow_hyphen_values = true)]
        ref_max: Option<f64>,
        /// Use the hopper reference returns.
        #[arg(long, conflicts_with_all = ["ref_min", "ref_max"])]
        hopper: bool,
    },
}

/// Loads the configuration and applies the command-line overrides.
pub fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.display().to_string();
    }
    if common.threads == Some(0) {
        return Err(Error::config("--threads: must be at least 1"));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    PathBuf::from(&cfg.output_dir)
}

fn gen_env(common: &Common) -> Result<()> {
    let cfg = resolve(common)?;
    let mdp = cfg.build_env()?;
    let mut out = OutputDir::create(&out_dir(&cfg))?;
    let path = out.json("mdp.json", &MdpFile::from_mdp(&mdp))?;
    out.finish("gen-env", &cfg)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn collect(common: &Common) -> Result<()> {
    let cfg = resolve(common)?;
    let mdp = cfg.build_env()?;
    let ds = cfg.build_dataset(&mdp, 0)?;
    let mut out = OutputDir::create(&out_dir(&cfg))?;
    out.json("mdp.json", &MdpFile::from_mdp(&mdp))?;
    let path = out.text("dataset.jsonl", &dataset_jsonl(&ds))?;
    out.json("dataset.meta.json", &ds.meta)?;
    out.finish("collect", &cfg)?;
    println!("wrote {} ({} episodes, {} steps)", path.display(), ds.episodes.len(), ds.num_steps());
    Ok(())
}

#[derive(Serialize)]
struct TrainRun<'a> {
    config: &'a ExperimentConfig,
    operator: Operator,
    dataset: Option<&'a Path>,
    mdp: Option<&'a Path>,
}

fn train(common: &Common, operator: Operator, dataset: Option<&Path>, mdp_path: Option<&Path>) -> Result<()> {
    let cfg = resolve(common)?;
    let mdp = match mdp_path {
        Some(p) => read_mdp(p)?,
        None => cfg.build_env()?,
    };
    let ds = match dataset {
        Some(p) => read_dataset(p, mdp.num_states(), mdp.num_actions())?,
        None => cfg.build_dataset(&mdp, 0)?,
    };
    let lambda = match operator {
        Operator::Cql => Some(0.0),
        Operator::Nstep => None,
        _ => Some(cfg.train.lambda),
    };
    // The first cell of a one-cell sweep.
    let cell = Cell {
        index: 0,
        operator,
        alpha: cfg.train.alpha,
        lambda,
        repeat: 0,
        seed: split_seed(cfg.master_seed, 0),
    };
    let score_ref = cfg.eval.resolve_ref(&mdp)?;
    let (mut result, trace) = run_cell(&cfg, &mdp, &ds, score_ref, &cell)?;
    result.trace = Some("trace.csv".into());
    let mut out = OutputDir::create(&out_dir(&cfg))?;
    out.text("trace.csv", &train_csv(&trace.records)?)?;
    out.json("tables.json", &TablesFile::new(&trace.tables, &trace.policy))?;
    out.json("result.json", &result)?;
    out.finish(
        "train",
        &TrainRun {
            config: &cfg,
            operator,
            dataset,
            mdp: mdp_path,
        },
    )?;
    println!(
        "final J_eval {:.6}, avg Q {:.6}",
        result.final_j_eval.unwrap_or(f64::NAN),
        result.final_avg_q.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn print_failures(reports: &[CheckReport]) {
    for r in reports.iter().filter(|r| r.is_failure()) {
        eprintln!(
            "FAILED {} (seed {}, gamma {}, lambda {:?}, alpha {:?}): lhs {:e}, rhs {:e}, residual {:e} > {:e}",
            r.name,
            r.instance.seed,
            r.instance.gamma,
            r.instance.lambda,
            r.instance.alpha,
            r.lhs,
            r.rhs,
            r.residual,
            r.tolerance
        );
    }
}

/// Exit 0 when every asserted check passes, 1 otherwise.
fn verify(common: &Common) -> Result<i32> {
    let cfg = resolve(common)?;
    let reports = run_verify(cfg.master_seed, &cfg.verify, common.threads)?;
    let ok = write_verify(&reports, cfg.master_seed, &cfg.verify, &out_dir(&cfg))?;
    let failures = reports.iter().filter(|r| r.is_failure()).count();
    print_failures(&reports);
    println!(
        "{} checks, {} failed; report at {}",
        reports.len(),
        failures,
        out_dir(&cfg).join("verify_report.json").display()
    );
    Ok(if ok { 0 } else { 1 })
}

fn sweep(common: &Common) -> Result<i32> {
    let cfg = resolve(common)?;
    let outcome = run_sweep(&cfg, common.threads)?;
    write_sweep(&outcome, &cfg, &out_dir(&cfg))?;
    for s in &outcome.spreads {
        println!(
            "{} lambda={}: spread over alpha {:.6}",
            s.operator.name(),
            s.lambda,
            s.spread_score.unwrap_or(s.spread_j_eval)
        );
    }
    let failed = outcome.failed_cells();
    for r in outcome.results.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "cell {} alpha={} lambda={:?} repeat={} failed: {}",
            r.operator.name(),
            r.alpha,
            r.lambda,
            r.repeat,
            r.error.as_deref().unwrap_or_default()
        );
    }
    println!("{} cells, {} failed", outcome.results.len(), failed);
    Ok(if failed == 0 { 0 } else { 1 })
}

fn o2o(common: &Common) -> Result<()> {
    let cfg = resolve(common)?;
    let runs = run_o2o(&cfg, common.threads)?;
    write_o2o(&runs, &cfg, &out_dir(&cfg))?;
    for s in summarize(&runs) {
        println!("alpha={} {}: mean final J {:.6}", s.alpha, s.arm, s.mean_final_j_eval);
    }
    Ok(())
}

fn score(config: Option<&Path>, raw: &[f64], ref_min: Option<f64>, ref_max: Option<f64>, hopper: bool) -> Result<()> {
    let r = if hopper {
        HOPPER_REF
    } else if let (Some(lo), Some(hi)) = (ref_min, ref_max) {
        ScoreRef::new(lo, hi).map_err(|e| invalid("--ref-min/--ref-max", e))?
    } else {
        let cfg = ExperimentConfig::load(config)?;
        cfg.validate()?;
        match cfg.eval.resolve_ref(&cfg.build_env()?)? {
            Some(r) => r,
            None => return Err(Error::config("eval.score_ref: no reference returns given")),
        }
    };
    for x in raw {
        println!("{x},{}", normalized_score(*x, r));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenEnv(c) => gen_env(&c).map(|_| 0),
        Command::Collect(c) => collect(&c).map(|_| 0),
        Command::Train {
            common,
            operator,
            dataset,
            mdp,
        } => train(&common, operator, dataset.as_deref(), mdp.as_deref()).map(|_| 0),
        Command::Verify(c) => verify(&c),
        Command::Sweep(c) => sweep(&c),
        Command::O2o(c) => o2o(&c).map(|_| 0),
        Command::Score {
            config,
            raw,
            ref_min,
            ref_max,
            hopper,
        } => score(config.as_deref(), &raw, ref_min, ref_max, hopper).map(|_| 0),
    }
}

/// Parses `args` and runs the command. Usage and configuration errors exit
/// with 2, runtime errors with 1.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_subcommand_exits_2() {
        assert_eq!(run(["cpql", "frobnicate"]), 2);
        assert_eq!(run(["cpql", "train", "--bogus"]), 2);
    }

    #[test]
    fn missing_config_exits_2() {
        assert_eq!(run(["cpql", "train", "--config", "/nonexistent/missing.json"]), 2);
    }

    #[test]
    fn help_exits_0() {
        assert_eq!(run(["cpql", "--help"]), 0);
    }

    fn small_config(dir: &Path) -> PathBuf {
        let cfg = serde_json::json!({
            "env": {"kind": {"type": "chain", "len": 5, "slip": 0.1}, "gamma": 0.9},
            "dataset": {"episodes": 8, "horizon": 10},
            "train": {"iters": 30, "batch": 16, "eval_every": 10},
            "alpha_grid": [0.5, 2.0],
            "lambda_grid": [0.7],
            "operators": ["cpql", "cql"],
            "o2o": {"online_steps": 30, "horizon": 10, "eval_every": 10},
            "verify": {"instances": 2, "dataset_steps": [200], "contraction_iters": 100, "ratio_trials": 100},
            "repeats": 2
        });
        let path = dir.join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        path
    }

    fn arg(p: &Path) -> String {
        p.display().to_string()
    }

    #[test]
    fn collect_then_train_on_the_written_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = arg(&small_config(dir.path()));
        let data = dir.path().join("data");
        assert_eq!(run(["cpql", "collect", "--config", &cfg, "--out", &arg(&data)]), 0);
        for f in ["mdp.json", "dataset.jsonl", "dataset.meta.json", "manifest.json"] {
            assert!(data.join(f).exists(), "{f}");
        }
        let from_files = dir.path().join("train_files");
        let code = run([
            "cpql",
            "train",
            "--config",
            &cfg,
            "--dataset",
            &arg(&data.join("dataset.jsonl")),
            "--mdp",
            &arg(&data.join("mdp.json")),
            "--out",
            &arg(&from_files),
        ]);
        assert_eq!(code, 0);
        let direct = dir.path().join("train_direct");
        assert_eq!(run(["cpql", "train", "--config", &cfg, "--out", &arg(&direct)]), 0);
        for f in ["trace.csv", "tables.json", "result.json"] {
            let a = std::fs::read(from_files.join(f)).unwrap();
            let b = std::fs::read(direct.join(f)).unwrap();
            assert_eq!(a, b, "{f} differs after the file round trip");
        }
        let header = std::fs::read_to_string(direct.join("trace.csv")).unwrap();
        assert!(header.starts_with("iter,td_loss,penalty,avg_q,j_eval\n"));
    }

    #[test]
    fn gen_env_writes_a_loadable_mdp() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = arg(&small_config(dir.path()));
        assert_eq!(run(["cpql", "gen-env", "--config", &cfg, "--out", &arg(dir.path())]), 0);
        let mdp = read_mdp(&dir.path().join("mdp.json")).unwrap();
        assert_eq!((mdp.num_states(), mdp.num_actions(), mdp.gamma()), (5, 2, 0.9));
    }

    #[test]
    fn verify_writes_a_report_and_passes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = arg(&small_config(dir.path()));
        let out = dir.path().join("v");
        assert_eq!(run(["cpql", "verify", "--config", &cfg, "--seed", "1", "--out", &arg(&out)]), 0);
        let reports: Vec<CheckReport> =
            serde_json::from_str(&std::fs::read_to_string(out.join("verify_report.json")).unwrap()).unwrap();
        assert!(!reports.is_empty());
    }

    #[test]
    fn sweep_reruns_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = arg(&small_config(dir.path()));
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        assert_eq!(run(["cpql", "sweep", "--config", &cfg, "--out", &arg(&a), "--threads", "1"]), 0);
        assert_eq!(run(["cpql", "sweep", "--config", &cfg, "--out", &arg(&b), "--threads", "3"]), 0);
        for f in ["results.json", "summary.csv", "traces/cell_0005.csv", "plot.gp"] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
        }
        let ma = std::fs::read_to_string(a.join("manifest.json")).unwrap();
        let mb = std::fs::read_to_string(b.join("manifest.json")).unwrap();
        assert_eq!(ma.replace(&arg(&a), ""), mb.replace(&arg(&b), ""));
    }

    #[test]
    fn o2o_writes_traces_and_pairing() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = arg(&small_config(dir.path()));
        let out = dir.path().join("o");
        assert_eq!(run(["cpql", "o2o", "--config", &cfg, "--out", &arg(&out)]), 0);
        let pairing: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("pairing.json")).unwrap()).unwrap();
        assert_eq!(pairing.as_array().unwrap().len(), 2 * 2 * 3);
        assert!(out.join("o2o.gp").exists());
    }

    #[test]
    fn invalid_config_exits_2_naming_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, r#"{"lambda_grid": [1.0]}"#).unwrap();
        assert_eq!(run(["cpql", "sweep", "--config", &arg(&path)]), 2);
        let err = resolve(&Common {
            config: Some(path),
            seed: None,
            out: None,
            threads: None,
        })
        .unwrap_err();
        assert!(err.to_string().contains("lambda_grid[0]"));
    }

    #[test]
    fn score_with_explicit_refs() {
        assert_eq!(run(["cpql", "score", "--raw", "1600", "--hopper"]), 0);
        assert_eq!(run(["cpql", "score", "--raw", "5", "--ref-min", "-1", "--ref-max", "9"]), 0);
        assert_eq!(run(["cpql", "score", "--raw", "5", "--ref-min", "3", "--ref-max", "1"]), 2);
        assert_eq!(run(["cpql", "score", "--raw", "5"]), 2);
    }
}
