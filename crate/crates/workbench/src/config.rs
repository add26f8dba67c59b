//! Experiment configuration (JSON).

use std::path::Path;

use cpql_core::cpql::{CpqlConfig, TargetKind};
use cpql_core::dataset::{DatasetMeta, TrajectoryDataset};
use cpql_core::envs::{dataset_recipe, make_env, recipe_policies, EnvKind, EnvSpec, Quality, ScoreRef};
use cpql_core::mdp::{expected_return, value_iteration};
use cpql_core::online::{Exploration, O2oConfig, TransitionBaseline};
use cpql_core::seed::split_seed;
use cpql_core::theory::SuiteGrid;
use cpql_core::{FiniteMdp, TabularPolicy};
use serde::{Deserialize, Serialize};

use crate::error::{failed, invalid, Error, Result};
use crate::io::{json_sha256, mdp_sha256, read_json, PolicyFile};

/// Stream index of the dataset seeds under the master seed.
const DATASET_STREAM: u64 = u64::MAX;

/// Learner family of a sweep cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    /// Peng's lambda-return targets with the conservative penalty.
    Cpql,
    /// One-step targets with the conservative penalty (`lambda = 0`).
    Cql,
    /// Uncorrected n-step targets over the whole segment; lambda is unused.
    Nstep,
    Retrace,
    Treebackup,
}

impl Operator {
    pub fn name(self) -> &'static str {
        match self {
            Operator::Cpql => "cpql",
            Operator::Cql => "cql",
            Operator::Nstep => "nstep",
            Operator::Retrace => "retrace",
            Operator::Treebackup => "treebackup",
        }
    }

    fn target(self) -> TargetKind {
        match self {
            Operator::Cpql | Operator::Cql => TargetKind::Peng,
            Operator::Nstep => TargetKind::NStep,
            Operator::Retrace => TargetKind::Retrace,
            Operator::Treebackup => TargetKind::TreeBackup,
        }
    }

    /// Lambda values this operator takes from the grid; `None` when unused.
    pub fn lambdas(self, grid: &[f64]) -> Vec<Option<f64>> {
        match self {
            Operator::Cql => vec![Some(0.0)],
            Operator::Nstep => vec![None],
            _ => grid.iter().copied().map(Some).collect(),
        }
    }

    /// `base` with this operator's target, `alpha` and `lambda`.
    pub fn cell_config(self, base: &CpqlConfig, alpha: f64, lambda: Option<f64>, seed: u64) -> CpqlConfig {
        CpqlConfig {
            alpha,
            lambda: lambda.unwrap_or(0.0),
            target: self.target(),
            seed,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetRecipe {
    pub quality: Quality,
    pub episodes: usize,
    pub horizon: usize,
}

impl Default for DatasetRecipe {
    fn default() -> Self {
        Self {
            quality: Quality::Medium,
            episodes: 50,
            horizon: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    /// Monte Carlo rollouts of the final greedy policy (0 = exact return only).
    pub episodes: usize,
    /// Rollout length of the Monte Carlo estimate.
    pub horizon: usize,
    pub score_ref: Option<ScoreRef>,
    /// Normalize against the uniform-policy and optimal returns of the env.
    pub env_refs: bool,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            episodes: 0,
            horizon: 200,
            score_ref: None,
            env_refs: false,
        }
    }
}

impl EvalSpec {
    pub fn resolve_ref(&self, mdp: &FiniteMdp) -> Result<Option<ScoreRef>> {
        if self.env_refs {
            let (ns, na) = (mdp.num_states(), mdp.num_actions());
            let j_min = expected_return(mdp, &TabularPolicy::uniform(ns, na)).map_err(|e| failed("eval", e))?;
            let (_, pi_star) = value_iteration(mdp, 1e-12, 1_000_000).map_err(|e| failed("eval", e))?;
            let j_max = expected_return(mdp, &pi_star).map_err(|e| failed("eval", e))?;
            return ScoreRef::new(j_min, j_max)
                .map(Some)
                .map_err(|e| invalid("eval.env_refs", e));
        }
        Ok(self.score_ref)
    }
}

/// Online-phase settings; the offline phase uses `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct O2oSection {
    pub online_steps: usize,
    pub exploration: Exploration,
    pub replay_capacity: usize,
    pub segment_len: usize,
    pub horizon: usize,
    pub eval_every: usize,
    pub retain_offline: bool,
    /// Arms run next to the configured one, each with matched seeds.
    pub baselines: Vec<TransitionBaseline>,
}

impl Default for O2oSection {
    fn default() -> Self {
        let d = O2oConfig::default();
        Self {
            online_steps: d.online_steps,
            exploration: d.exploration,
            replay_capacity: d.replay_capacity,
            segment_len: d.segment_len,
            horizon: d.horizon,
            eval_every: d.eval_every,
            retain_offline: d.retain_offline,
            baselines: vec![TransitionBaseline::CqlToQlearning, TransitionBaseline::ScratchPql],
        }
    }
}

impl O2oSection {
    pub fn to_config(&self, offline: CpqlConfig, seed: u64) -> O2oConfig {
        O2oConfig {
            offline,
            online_steps: self.online_steps,
            exploration: self.exploration,
            replay_capacity: self.replay_capacity,
            segment_len: self.segment_len,
            horizon: self.horizon,
            eval_every: self.eval_every,
            retain_offline: self.retain_offline,
            seed,
        }
    }
}

fn default_env() -> EnvSpec {
    EnvSpec::new(EnvKind::Chain { len: 10, slip: 0.1 }, 0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub dataset: DatasetRecipe,
    /// Learner defaults; the grids override `alpha`, `lambda`, `target` and `seed`.
    pub train: CpqlConfig,
    pub alpha_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub operators: Vec<Operator>,
    pub eval: EvalSpec,
    pub o2o: O2oSection,
    pub verify: SuiteGrid,
    pub output_dir: String,
    pub master_seed: u64,
    /// Seeds per cell.
    pub repeats: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: default_env(),
            dataset: DatasetRecipe::default(),
            train: CpqlConfig::default(),
            alpha_grid: vec![0.1, 0.5, 1.0, 3.0, 5.0, 7.0, 10.0],
            lambda_grid: vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 0.95, 0.99],
            operators: vec![Operator::Cpql],
            eval: EvalSpec::default(),
            o2o: O2oSection::default(),
            verify: SuiteGrid::default(),
            output_dir: "out".into(),
            master_seed: 0,
            repeats: 1,
        }
    }
}

fn check_grid(field: &str, values: &[f64], ok: impl Fn(f64) -> bool, range: &str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::config(format!("{field}: must not be empty")));
    }
    for (i, v) in values.iter().enumerate() {
        if !ok(*v) {
            return Err(Error::config(format!("{field}[{i}]: {v} outside {range}")));
        }
        if values[..i].contains(v) {
            return Err(Error::config(format!("{field}[{i}]: duplicate value {v}")));
        }
    }
    Ok(())
}

impl ExperimentConfig {
    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            Some(p) => read_json(p)?,
            None => Self::default(),
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        make_env(&self.env).map_err(|e| invalid("env", e))?;
        if self.dataset.episodes == 0 {
            return Err(Error::config("dataset.episodes: must be at least 1"));
        }
        if self.dataset.horizon == 0 {
            return Err(Error::config("dataset.horizon: must be at least 1"));
        }
        if let Quality::Mixed { ratios } = &self.dataset.quality {
            if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || ratios.iter().sum::<f64>() <= 0.0 {
                return Err(Error::config("dataset.quality.ratios: need non-negative shares with a positive sum"));
            }
        }
        self.train.validate().map_err(|e| invalid("train", e))?;
        check_grid("alpha_grid", &self.alpha_grid, |a| a.is_finite() && a >= 0.0, "[0, inf)")?;
        check_grid("lambda_grid", &self.lambda_grid, |l| (0.0..1.0).contains(&l), "[0, 1)")?;
        if self.operators.is_empty() {
            return Err(Error::config("operators: must not be empty"));
        }
        for (i, op) in self.operators.iter().enumerate() {
            if self.operators[..i].contains(op) {
                return Err(Error::config(format!("operators[{i}]: duplicate operator {}", op.name())));
            }
        }
        if self.eval.env_refs && self.eval.score_ref.is_some() {
            return Err(Error::config("eval: set either score_ref or env_refs, not both"));
        }
        if let Some(r) = self.eval.score_ref {
            ScoreRef::new(r.ref_min, r.ref_max).map_err(|e| invalid("eval.score_ref", e))?;
        }
        if self.eval.episodes > 0 && self.eval.horizon == 0 {
            return Err(Error::config("eval.horizon: must be at least 1"));
        }
        self.o2o
            .to_config(self.train.clone(), 0)
            .validate()
            .map_err(|e| invalid("o2o", e))?;
        self.verify.validate().map_err(|e| invalid("verify", e))?;
        if self.repeats == 0 {
            return Err(Error::config("repeats: must be at least 1"));
        }
        Ok(())
    }

    pub fn build_env(&self) -> Result<FiniteMdp> {
        make_env(&self.env).map_err(|e| invalid("env", e))
    }

    /// Dataset seed of repeat `r`; every cell of a repeat shares its dataset.
    pub fn dataset_seed(&self, repeat: usize) -> u64 {
        split_seed(split_seed(self.master_seed, DATASET_STREAM), repeat as u64)
    }

    /// The recipe dataset of repeat `r` with its provenance attached.
    pub fn build_dataset(&self, mdp: &FiniteMdp, repeat: usize) -> Result<TrajectoryDataset> {
        let seed = self.dataset_seed(repeat);
        let r = &self.dataset;
        let ds = dataset_recipe(mdp, &r.quality, r.episodes, r.horizon, seed).map_err(|e| failed("dataset", e))?;
        let policies = recipe_policies(mdp).map_err(|e| failed("dataset", e))?;
        let policy_sha256 = match &r.quality {
            Quality::Random => json_sha256(&PolicyFile::from_policy(&policies.random)),
            Quality::Medium => json_sha256(&PolicyFile::from_policy(&policies.medium)),
            Quality::Expert => json_sha256(&PolicyFile::from_policy(&policies.expert)),
            Quality::Mixed { ratios } => json_sha256(&(
                ratios,
                [&policies.random, &policies.medium, &policies.expert].map(PolicyFile::from_policy),
            )),
        };
        Ok(ds.with_meta(DatasetMeta {
            mdp_sha256: mdp_sha256(mdp),
            policy_sha256,
            seed,
            horizon: r.horizon,
            gamma: mdp.gamma(),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[test]
    fn defaults_are_valid() {
        ExperimentConfig::default().validate().unwrap();
        let cfg = parse("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn lambda_one_is_rejected_by_name() {
        let err = parse(r#"{"lambda_grid": [0.5, 1.0]}"#).unwrap_err();
        assert!(err.to_string().contains("lambda_grid[1]"), "{err}");
        assert_eq!(err.exit_code(), 2);
        parse(r#"{"lambda_grid": [0.99]}"#).unwrap();
    }

    #[test]
    fn errors_name_the_field() {
        let err = parse(r#"{"train": {"tau": 0.0}}"#).unwrap_err();
        assert!(err.to_string().contains("train") && err.to_string().contains("tau"), "{err}");
        let err = parse(r#"{"alpah_grid": [1.0]}"#).unwrap_err();
        assert!(err.to_string().contains("alpah_grid"), "{err}");
        let err = parse(r#"{"operators": ["sarsa"]}"#).unwrap_err();
        assert!(err.to_string().contains("sarsa"), "{err}");
        let err = parse(r#"{"alpha_grid": []}"#).unwrap_err();
        assert!(err.to_string().contains("alpha_grid"), "{err}");
        let err = parse(r#"{"repeats": 0}"#).unwrap_err();
        assert!(err.to_string().contains("repeats"), "{err}");
        let err = parse(r#"{"env": {"kind": {"type": "chain", "len": 4, "slip": 1.5}}}"#).unwrap_err();
        assert!(err.to_string().contains("env"), "{err}");
    }

    #[test]
    fn operators_map_lambdas() {
        let grid = [0.3, 0.7];
        assert_eq!(Operator::Cql.lambdas(&grid), vec![Some(0.0)]);
        assert_eq!(Operator::Nstep.lambdas(&grid), vec![None]);
        assert_eq!(Operator::Retrace.lambdas(&grid), vec![Some(0.3), Some(0.7)]);
        let cfg = Operator::Treebackup.cell_config(&CpqlConfig::default(), 2.0, Some(0.3), 9);
        assert_eq!((cfg.alpha, cfg.lambda, cfg.target, cfg.seed), (2.0, 0.3, TargetKind::TreeBackup, 9));
    }

    #[test]
    fn dataset_carries_provenance() {
        let cfg = ExperimentConfig::default();
        let mdp = cfg.build_env().unwrap();
        let ds = cfg.build_dataset(&mdp, 1).unwrap();
        let meta = ds.meta.clone().unwrap();
        assert_eq!(meta.seed, cfg.dataset_seed(1));
        assert_eq!(meta.mdp_sha256, mdp_sha256(&mdp));
        assert_eq!(ds.episodes.len(), 50);
        assert_ne!(cfg.dataset_seed(0), cfg.dataset_seed(1));
    }

    #[test]
    fn env_refs_span_uniform_and_optimal() {
        let cfg = ExperimentConfig::default();
        let mdp = cfg.build_env().unwrap();
        let spec = EvalSpec {
            env_refs: true,
            ..EvalSpec::default()
        };
        let r = spec.resolve_ref(&mdp).unwrap().unwrap();
        assert!(r.ref_max > r.ref_min);
    }
}
