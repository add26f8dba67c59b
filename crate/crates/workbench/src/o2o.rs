//! Offline-to-online experiments: the configured arm and its baselines per
//! alpha and seed.

use std::path::Path;

use cpql_core::cpql::CpqlConfig;
use cpql_core::online::{baseline_config, run_offline_to_online, O2oConfig, O2oTrace, TransitionBaseline};
use cpql_core::seed::split_seed;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::io::{o2o_csv, OutputDir};
use crate::sweep::with_threads;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// The `train` settings offline, then online fine-tuning.
    Configured,
    Baseline(TransitionBaseline),
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Configured => "cpql_to_pql",
            Arm::Baseline(TransitionBaseline::CqlToQlearning) => "cql_to_qlearning",
            Arm::Baseline(TransitionBaseline::ScratchPql) => "scratch_pql",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct O2oRun {
    pub alpha: f64,
    pub repeat: usize,
    pub arm: Arm,
    pub config: O2oConfig,
    pub trace: O2oTrace,
}

impl O2oRun {
    pub fn trace_name(&self) -> String {
        format!("traces/alpha{}_seed{}_{}.csv", self.alpha, self.repeat, self.arm.name())
    }

    /// Last offline avg-Q minus first online avg-Q; `None` without an offline phase.
    pub fn carry_over_gap(&self) -> Option<f64> {
        let last = self.trace.offline().last()?;
        Some(last.avg_q - self.trace.online()[0].avg_q)
    }
}

/// The seed of repeat `r`; all arms of a repeat share it and its dataset.
pub fn repeat_seed(cfg: &ExperimentConfig, repeat: usize) -> u64 {
    split_seed(cfg.master_seed, repeat as u64)
}

pub fn arms(cfg: &ExperimentConfig) -> Vec<Arm> {
    let mut arms = vec![Arm::Configured];
    for b in &cfg.o2o.baselines {
        if !arms.contains(&Arm::Baseline(*b)) {
            arms.push(Arm::Baseline(*b));
        }
    }
    arms
}

/// Runs every (alpha, repeat, arm) in that order.
pub fn run_o2o(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<Vec<O2oRun>> {
    cfg.validate()?;
    let mdp = cfg.build_env()?;
    let mut alphas = cfg.alpha_grid.clone();
    alphas.sort_by(f64::total_cmp);
    let arms = arms(cfg);
    let mut plan = Vec::new();
    for &alpha in &alphas {
        for repeat in 0..cfg.repeats {
            let seed = repeat_seed(cfg, repeat);
            let offline = CpqlConfig {
                alpha,
                seed,
                gamma: mdp.gamma(),
                ..cfg.train.clone()
            };
            let base = cfg.o2o.to_config(offline, seed);
            for &arm in &arms {
                let config = match arm {
                    Arm::Configured => base.clone(),
                    Arm::Baseline(b) => baseline_config(&base, b),
                };
                plan.push((alpha, repeat, arm, config));
            }
        }
    }
    with_threads(threads, || {
        let datasets: Vec<Result<_>> = (0..cfg.repeats)
            .into_par_iter()
            .map(|r| cfg.build_dataset(&mdp, r))
            .collect();
        plan.into_par_iter()
            .map(|(alpha, repeat, arm, config)| {
                let ds = datasets[repeat].as_ref().map_err(|e| Error::runtime(e.to_string()))?;
                let trace = run_offline_to_online(&mdp, ds, &config)
                    .map_err(|e| Error::runtime(format!("alpha {alpha}, repeat {repeat}, {}: {e}", arm.name())))?;
                Ok(O2oRun {
                    alpha,
                    repeat,
                    arm,
                    config,
                    trace,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingEntry {
    pub alpha: f64,
    pub repeat: usize,
    pub arm: String,
    pub seed: u64,
    pub dataset_seed: u64,
    pub config: O2oConfig,
    pub trace: String,
    pub transition_index: usize,
    pub final_j_eval: f64,
    pub carry_over_gap: Option<f64>,
}

/// Per-seed final returns of one (alpha, arm).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub alpha: f64,
    pub arm: String,
    pub final_j_eval: Vec<f64>,
    pub mean_final_j_eval: f64,
}

pub fn summarize(runs: &[O2oRun]) -> Vec<ArmSummary> {
    let mut out: Vec<ArmSummary> = Vec::new();
    for run in runs {
        let name = run.arm.name();
        match out.iter_mut().find(|s| s.alpha == run.alpha && s.arm == name) {
            Some(s) => s.final_j_eval.push(run.trace.final_j_eval),
            None => out.push(ArmSummary {
                alpha: run.alpha,
                arm: name.into(),
                final_j_eval: vec![run.trace.final_j_eval],
                mean_final_j_eval: 0.0,
            }),
        }
    }
    for s in &mut out {
        s.mean_final_j_eval = s.final_j_eval.iter().sum::<f64>() / s.final_j_eval.len() as f64;
    }
    out
}

/// Average-Q curves of the first seed, one per (alpha, arm).
pub fn plot_script(runs: &[O2oRun]) -> String {
    let mut s = String::from(
        "set datafile separator ','\nset key outside\nset xlabel 'update'\nset ylabel 'average Q'\n\
         set terminal pngcairo size 900,600\nset output 'o2o.png'\n",
    );
    let curves: Vec<String> = runs
        .iter()
        .filter(|r| r.repeat == 0)
        .map(|r| {
            format!(
                "'{}' every ::1 using 0:3 with lines title 'alpha={} {}'",
                r.trace_name(),
                r.alpha,
                r.arm.name()
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

/// Per-run traces, `pairing.json`, `o2o_summary.json`, `o2o.gp` and the manifest.
pub fn write_o2o(runs: &[O2oRun], cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let mut out = OutputDir::create(dir)?;
    let mut pairing = Vec::with_capacity(runs.len());
    for run in runs {
        out.text(&run.trace_name(), &o2o_csv(&run.trace.records)?)?;
        pairing.push(PairingEntry {
            alpha: run.alpha,
            repeat: run.repeat,
            arm: run.arm.name().into(),
            seed: run.config.seed,
            dataset_seed: cfg.dataset_seed(run.repeat),
            config: run.config.clone(),
            trace: run.trace_name(),
            transition_index: run.trace.transition_index,
            final_j_eval: run.trace.final_j_eval,
            carry_over_gap: run.carry_over_gap(),
        });
    }
    out.json("pairing.json", &pairing)?;
    out.json("o2o_summary.json", &summarize(runs))?;
    out.text("o2o.gp", &plot_script(runs))?;
    out.finish("o2o", cfg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use cpql_core::envs::{EnvKind, EnvSpec};

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.env = EnvSpec::new(EnvKind::Chain { len: 5, slip: 0.1 }, 0);
        cfg.dataset.episodes = 10;
        cfg.dataset.horizon = 10;
        cfg.train.iters = 30;
        cfg.train.batch = 16;
        cfg.train.eval_every = 10;
        cfg.alpha_grid = vec![5.0, 1.0];
        cfg.o2o.online_steps = 40;
        cfg.o2o.horizon = 10;
        cfg.o2o.eval_every = 20;
        cfg.repeats = 2;
        cfg
    }

    #[test]
    fn arms_share_seeds_and_carry_over_exactly() {
        let cfg = small();
        let runs = run_o2o(&cfg, Some(2)).unwrap();
        assert_eq!(runs.len(), 2 * 2 * 3);
        assert_eq!(runs[0].alpha, 1.0);
        for chunk in runs.chunks(3) {
            assert!(chunk.iter().all(|r| r.config.seed == chunk[0].config.seed));
            assert_eq!(chunk[0].carry_over_gap(), Some(0.0));
            assert_eq!(chunk[1].carry_over_gap(), Some(0.0));
            assert_eq!(chunk[2].carry_over_gap(), None);
        }
        assert_eq!(summarize(&runs).len(), 6);
    }

    #[test]
    fn four_curves_for_two_alphas_and_two_arms() {
        let mut cfg = small();
        cfg.o2o.baselines = vec![TransitionBaseline::CqlToQlearning];
        cfg.repeats = 1;
        let runs = run_o2o(&cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_o2o(&runs, &cfg, dir.path()).unwrap();
        let plot = std::fs::read_to_string(dir.path().join("o2o.gp")).unwrap();
        assert_eq!(plot.matches("with lines").count(), 4);
        let csv = std::fs::read_to_string(dir.path().join("traces/alpha1_seed0_cql_to_qlearning.csv")).unwrap();
        assert!(csv.starts_with("phase,step,avg_q,j_eval\noffline,1,"));
    }

    #[test]
    fn runs_are_thread_count_invariant() {
        let cfg = small();
        assert_eq!(run_o2o(&cfg, Some(1)).unwrap(), run_o2o(&cfg, Some(4)).unwrap());
    }
}
