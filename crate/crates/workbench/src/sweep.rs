//! Grid sweeps over operator, alpha, lambda and seed.

use std::path::Path;

use cpql_core::cpql::{train_learner, TrainTrace};
use cpql_core::dataset::{rollout, TrajectoryDataset};
use cpql_core::envs::{normalized_score, ScoreRef};
use cpql_core::mdp::expected_return;
use cpql_core::seed::{rng_from_seed, split_seed};
use cpql_core::FiniteMdp;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Operator};
use crate::error::{Error, Result};
use crate::io::{summary_csv, train_csv, OutputDir};

/// One grid cell; `index` is its position in key order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub operator: Operator,
    pub alpha: f64,
    pub lambda: Option<f64>,
    pub repeat: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub operator: Operator,
    pub alpha: f64,
    /// `None` for operators that ignore lambda.
    pub lambda: Option<f64>,
    pub repeat: usize,
    pub seed: u64,
    pub final_j_eval: Option<f64>,
    /// Mean final Q over the dataset's state-action pairs.
    pub final_avg_q: Option<f64>,
    pub normalized_score: Option<f64>,
    /// Discounted Monte Carlo return of the final greedy policy.
    pub mc_return: Option<f64>,
    /// Trace CSV relative to the output directory.
    pub trace: Option<String>,
    pub error: Option<String>,
}

/// Mean over repeats of one (operator, alpha, lambda) group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub operator: Operator,
    pub alpha: f64,
    pub lambda: String,
    pub runs: usize,
    pub mean_j_eval: f64,
    pub mean_score: Option<f64>,
}

/// Max minus min over alpha of the group means at one (operator, lambda).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpreadRow {
    pub operator: Operator,
    pub lambda: String,
    pub spread_j_eval: f64,
    pub spread_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    pub cells: Vec<Cell>,
    pub results: Vec<CellResult>,
    pub traces: Vec<Option<String>>,
    pub summary: Vec<SummaryRow>,
    pub spreads: Vec<SpreadRow>,
}

impl SweepOutcome {
    pub fn failed_cells(&self) -> usize {
        self.results.iter().filter(|r| r.error.is_some()).count()
    }
}

pub fn lambda_label(lambda: Option<f64>) -> String {
    lambda.map_or_else(|| "-".into(), |l| format!("{l}"))
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Every cell in key order. The cell seed is `split_seed(master_seed, index)`.
pub fn sweep_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut ops = cfg.operators.clone();
    ops.sort();
    let alphas = sorted(&cfg.alpha_grid);
    let lambdas = sorted(&cfg.lambda_grid);
    let mut cells = Vec::new();
    for op in ops {
        for &alpha in &alphas {
            for lambda in op.lambdas(&lambdas) {
                for repeat in 0..cfg.repeats {
                    let index = cells.len();
                    cells.push(Cell {
                        index,
                        operator: op,
                        alpha,
                        lambda,
                        repeat,
                        seed: split_seed(cfg.master_seed, index as u64),
                    });
                }
            }
        }
    }
    cells
}

pub fn trace_name(cell: &Cell) -> String {
    format!("traces/cell_{:04}.csv", cell.index)
}

/// Runs `f` on a pool of `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::runtime(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

fn dataset_avg_q(ds: &TrajectoryDataset, q: &cpql_core::QTable) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for ep in &ds.episodes {
        for (s, a) in ep.states.iter().zip(&ep.actions) {
            sum += q.get(*s, *a);
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

fn mc_return(mdp: &FiniteMdp, pi: &cpql_core::TabularPolicy, episodes: usize, horizon: usize, seed: u64) -> f64 {
    let mut rng = rng_from_seed(seed);
    let total: f64 = (0..episodes)
        .map(|_| {
            let ep = rollout(mdp, pi, horizon, &mut rng);
            let mut g = 0.0;
            for r in ep.rewards.iter().rev() {
                g = r + mdp.gamma() * g;
            }
            g
        })
        .sum();
    total / episodes as f64
}

/// Trains one cell.
pub fn run_cell(
    cfg: &ExperimentConfig,
    mdp: &FiniteMdp,
    ds: &TrajectoryDataset,
    score_ref: Option<ScoreRef>,
    cell: &Cell,
) -> Result<(CellResult, TrainTrace)> {
    let train = cell.operator.cell_config(&cfg.train, cell.alpha, cell.lambda, cell.seed);
    let train = cpql_core::cpql::CpqlConfig {
        gamma: mdp.gamma(),
        ..train
    };
    let (trace, learner) = train_learner(ds, &train, Some(mdp), None).map_err(|e| Error::runtime(e.to_string()))?;
    let greedy = learner.greedy();
    let j = expected_return(mdp, &greedy).map_err(|e| Error::runtime(e.to_string()))?;
    let mc = (cfg.eval.episodes > 0)
        .then(|| mc_return(mdp, &greedy, cfg.eval.episodes, cfg.eval.horizon, split_seed(cell.seed, 7)));
    let result = CellResult {
        operator: cell.operator,
        alpha: cell.alpha,
        lambda: cell.lambda,
        repeat: cell.repeat,
        seed: cell.seed,
        final_j_eval: Some(j),
        final_avg_q: Some(dataset_avg_q(ds, &learner.combined())),
        normalized_score: score_ref.map(|r| normalized_score(j, r)),
        mc_return: mc,
        trace: Some(trace_name(cell)),
        error: None,
    };
    Ok((result, trace))
}

fn error_result(cell: &Cell, err: &Error) -> CellResult {
    CellResult {
        operator: cell.operator,
        alpha: cell.alpha,
        lambda: cell.lambda,
        repeat: cell.repeat,
        seed: cell.seed,
        final_j_eval: None,
        final_avg_q: None,
        normalized_score: None,
        mc_return: None,
        trace: None,
        error: Some(err.to_string()),
    }
}

fn summarize(results: &[CellResult]) -> (Vec<SummaryRow>, Vec<SpreadRow>) {
    let mut summary: Vec<SummaryRow> = Vec::new();
    let mut i = 0;
    while i < results.len() {
        let head = &results[i];
        let group: Vec<&CellResult> = results[i..]
            .iter()
            .take_while(|r| r.operator == head.operator && r.alpha == head.alpha && r.lambda == head.lambda)
            .collect();
        i += group.len();
        let ok: Vec<&&CellResult> = group.iter().filter(|r| r.error.is_none()).collect();
        if ok.is_empty() {
            continue;
        }
        let n = ok.len() as f64;
        let mean_j = ok.iter().filter_map(|r| r.final_j_eval).sum::<f64>() / n;
        let scores: Vec<f64> = ok.iter().filter_map(|r| r.normalized_score).collect();
        summary.push(SummaryRow {
            operator: head.operator,
            alpha: head.alpha,
            lambda: lambda_label(head.lambda),
            runs: ok.len(),
            mean_j_eval: mean_j,
            mean_score: (scores.len() == ok.len()).then(|| scores.iter().sum::<f64>() / n),
        });
    }
    let mut spreads: Vec<SpreadRow> = Vec::new();
    let mut keys: Vec<(Operator, String)> = summary.iter().map(|r| (r.operator, r.lambda.clone())).collect();
    keys.dedup();
    keys.sort_by(|a, b| a.0.cmp(&b.0));
    for (op, lambda) in keys {
        if spreads.iter().any(|s| s.operator == op && s.lambda == lambda) {
            continue;
        }
        let rows: Vec<&SummaryRow> = summary.iter().filter(|r| r.operator == op && r.lambda == lambda).collect();
        let span = |v: Vec<f64>| {
            v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min)
        };
        let scores: Option<Vec<f64>> = rows.iter().map(|r| r.mean_score).collect();
        spreads.push(SpreadRow {
            operator: op,
            lambda: lambda.clone(),
            spread_j_eval: span(rows.iter().map(|r| r.mean_j_eval).collect()),
            spread_score: scores.map(span),
        });
    }
    (summary, spreads)
}

/// Executes every cell. Cell failures are recorded in the result, not raised.
pub fn run_sweep(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<SweepOutcome> {
    cfg.validate()?;
    let mdp = cfg.build_env()?;
    let score_ref = cfg.eval.resolve_ref(&mdp)?;
    let cells = sweep_cells(cfg);
    let outcome = with_threads(threads, || {
        let datasets: Vec<std::result::Result<TrajectoryDataset, String>> = (0..cfg.repeats)
            .into_par_iter()
            .map(|r| cfg.build_dataset(&mdp, r).map_err(|e| e.to_string()))
            .collect();
        cells
            .par_iter()
            .map(|cell| {
                let run = match &datasets[cell.repeat] {
                    Ok(ds) => run_cell(cfg, &mdp, ds, score_ref, cell),
                    Err(e) => Err(Error::runtime(format!("dataset of repeat {}: {e}", cell.repeat))),
                };
                match run {
                    Ok((res, trace)) => match train_csv(&trace.records) {
                        Ok(csv) => (res, Some(csv)),
                        Err(e) => (error_result(cell, &e), None),
                    },
                    Err(e) => (error_result(cell, &e), None),
                }
            })
            .collect::<Vec<_>>()
    })?;
    let (results, traces): (Vec<CellResult>, Vec<Option<String>>) = outcome.into_iter().unzip();
    let (summary, spreads) = summarize(&results);
    Ok(SweepOutcome {
        cells,
        results,
        traces,
        summary,
        spreads,
    })
}

/// Gnuplot script drawing the mean final score against alpha, one curve per
/// (operator, lambda).
pub fn plot_script(outcome: &SweepOutcome) -> String {
    let use_score = outcome.summary.iter().all(|r| r.mean_score.is_some());
    let (col, label) = if use_score { (6, "mean normalized score") } else { (5, "mean final J") };
    let mut s = String::new();
    s.push_str("set datafile separator ','\nset key outside\nset logscale x\n");
    s.push_str(&format!("set xlabel 'alpha'\nset ylabel '{label}'\n"));
    s.push_str("set terminal pngcairo size 900,600\nset output 'sweep.png'\n");
    let curves: Vec<String> = outcome
        .spreads
        .iter()
        .map(|g| {
            format!(
                "'summary.csv' using 2:((strcol(1) eq '{op}' && strcol(3) eq '{l}') ? ${col} : 1/0) with linespoints title '{op} lambda={l}'",
                op = g.operator.name(),
                l = g.lambda,
            )
        })
        .collect();
    if !curves.is_empty() {
        s.push_str("plot ");
        s.push_str(&curves.join(", \\\n     "));
        s.push('\n');
    }
    s
}

/// `results.json`, `summary.csv`, `spreads.json`, per-cell traces,
/// `plot.gp` and `manifest.json`.
pub fn write_sweep(outcome: &SweepOutcome, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let mut out = OutputDir::create(dir)?;
    for (cell, csv) in outcome.cells.iter().zip(&outcome.traces) {
        if let Some(csv) = csv {
            out.text(&trace_name(cell), csv)?;
        }
    }
    out.json("results.json", &outcome.results)?;
    out.text("summary.csv", &summary_csv(&outcome.summary)?)?;
    out.json("spreads.json", &outcome.spreads)?;
    out.text("plot.gp", &plot_script(outcome))?;
    out.finish("sweep", cfg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use cpql_core::cpql::cpql_sgd_train;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.env = cpql_core::envs::EnvSpec::new(cpql_core::envs::EnvKind::Chain { len: 5, slip: 0.1 }, 0);
        cfg.dataset.episodes = 10;
        cfg.dataset.horizon = 10;
        cfg.train.iters = 40;
        cfg.train.batch = 16;
        cfg.train.eval_every = 20;
        cfg.alpha_grid = vec![1.0, 0.1];
        cfg.lambda_grid = vec![0.7];
        cfg.operators = vec![Operator::Cql, Operator::Cpql, Operator::Nstep];
        cfg.repeats = 2;
        cfg
    }

    #[test]
    fn cells_are_sorted_and_seeded_by_index() {
        let cfg = small();
        let cells = sweep_cells(&cfg);
        assert_eq!(cells.len(), 3 * 2 * 2);
        assert_eq!(cells[0].operator, Operator::Cpql);
        assert_eq!(cells[0].alpha, 0.1);
        assert_eq!(cells[4].operator, Operator::Cql);
        assert_eq!(cells[4].lambda, Some(0.0));
        assert_eq!(cells[8].lambda, None);
        for (i, c) in cells.iter().enumerate() {
            assert_eq!(c.index, i);
            assert_eq!(c.seed, split_seed(cfg.master_seed, i as u64));
        }
    }

    #[test]
    fn one_cell_matches_a_direct_training_run() {
        let mut cfg = small();
        cfg.operators = vec![Operator::Cpql];
        cfg.alpha_grid = vec![1.0];
        cfg.repeats = 1;
        let out = run_sweep(&cfg, Some(1)).unwrap();
        assert_eq!(out.results.len(), 1);
        let mdp = cfg.build_env().unwrap();
        let ds = cfg.build_dataset(&mdp, 0).unwrap();
        let train = cpql_core::cpql::CpqlConfig {
            alpha: 1.0,
            lambda: 0.7,
            seed: split_seed(cfg.master_seed, 0),
            gamma: mdp.gamma(),
            ..cfg.train.clone()
        };
        let trace = cpql_sgd_train(&ds, &train, Some(&mdp)).unwrap();
        assert_eq!(out.traces[0].as_deref(), Some(train_csv(&trace.records).unwrap().as_str()));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let cfg = small();
        let a = run_sweep(&cfg, Some(1)).unwrap();
        let b = run_sweep(&cfg, Some(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.failed_cells(), 0);
        assert_eq!(a.summary.len(), 6);
        assert_eq!(a.spreads.len(), 3);
    }

    #[test]
    fn written_outputs_carry_a_manifest() {
        let cfg = small();
        let dir = tempfile::tempdir().unwrap();
        let out = run_sweep(&cfg, None).unwrap();
        write_sweep(&out, &cfg, dir.path()).unwrap();
        let manifest: crate::io::Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest.command, "sweep");
        assert_eq!(manifest.config["repeats"], 2);
        assert!(manifest.outputs.iter().any(|o| o.path == "results.json"));
        assert!(dir.path().join("traces/cell_0011.csv").exists());
        let plot = std::fs::read_to_string(dir.path().join("plot.gp")).unwrap();
        assert!(plot.contains("strcol(1) eq 'cpql' && strcol(3) eq '0.7'"));
    }
}
