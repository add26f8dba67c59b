//! Conservative PQL: the exact penalized recursion on a known model, the
//! tabular sampled learner, and the overestimation threshold on `alpha`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_empirical_model, EmpiricalModel, Segment, SegmentSampler, TrajectoryDataset};
use crate::envs::softmax_policy;
use crate::error::{Error, Result};
use crate::linalg::{dot, solve_resolvent, sup_dist};
use crate::mdp::{
    argmax, expected_return, greedy_policy, mixture_policy, FiniteMdp, QTable, TabularPolicy, TieBreak,
};
use crate::operators::{pql_rate, rounding_floor, PqlSolver};
use crate::seed::{rng_from_seed, split_seed, WorkRng};

/// How the target policy follows the current Q estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Improvement {
    /// Argmax, lowest index on ties.
    Greedy,
    Softmax { temperature: f64 },
    /// Exact-model only: coordinate ascent on the penalized objective from the
    /// behavior policy.
    PenalizedHillClimb,
    /// Keep the initial policy.
    Frozen,
}

impl Default for Improvement {
    fn default() -> Self {
        Improvement::Softmax { temperature: 0.01 }
    }
}

/// Bootstrapped multi-step target of the sampled learner.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Peng's lambda-return.
    #[default]
    Peng,
    /// Uncorrected n-step return over the whole segment.
    NStep,
    /// Truncated importance traces `lambda * min(1, pi / beta)`.
    Retrace,
    /// Target-probability traces `lambda * pi`.
    TreeBackup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpqlConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub segment_len: usize,
    pub batch: usize,
    pub lr: f64,
    pub tau: f64,
    pub iters: usize,
    pub improvement: Improvement,
    pub twin_tables: bool,
    pub target: TargetKind,
    /// Initial table entries are uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
    /// Evaluate the greedy policy in the true MDP every this many steps (0 = never).
    pub eval_every: usize,
    pub allow_truncated: bool,
    pub seed: u64,
}

impl Default for CpqlConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda: 0.7,
            gamma: 0.99,
            segment_len: 5,
            batch: 256,
            lr: 1.0,
            tau: 5e-3,
            iters: 1000,
            improvement: Improvement::default(),
            twin_tables: false,
            target: TargetKind::Peng,
            init_scale: 1e-3,
            eval_every: 100,
            allow_truncated: true,
            seed: 0,
        }
    }
}

impl CpqlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: alloc::string::String| {
            Err(Error::InvalidParameter(format!("{field}: {msg}")))
        };
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha", format!("{} must be finite and >= 0", self.alpha));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return bad("lambda", format!("{} outside [0, 1)", self.lambda));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma", format!("{} outside [0, 1)", self.gamma));
        }
        if self.segment_len == 0 {
            return bad("segment_len", "must be at least 1".into());
        }
        if self.batch == 0 {
            return bad("batch", "must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("{} must be finite and >= 0", self.lr));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau", format!("{} outside (0, 1]", self.tau));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale", format!("{} must be finite and >= 0", self.init_scale));
        }
        if let Improvement::Softmax { temperature } = self.improvement {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return bad("improvement.temperature", format!("{temperature} must be positive"));
            }
        }
        Ok(())
    }
}

/// `pi(a|s) / pi_beta(a|s) - 1`; the caller applies `alpha`.
pub fn conservative_ratio_penalty(pi: &TabularPolicy, pi_beta_hat: &TabularPolicy, s: usize, a: usize) -> Result<f64> {
    let b = pi_beta_hat.prob(s, a);
    if b <= 0.0 {
        return Err(Error::SupportViolation {
            state: s,
            action: a,
            target: pi.prob(s, a),
        });
    }
    Ok(pi.prob(s, a) / b - 1.0)
}

/// A known model with the behavior policy and the set of states seen in data.
///
/// The penalty applies on observed pairs (observed state, `pi_beta > 0`);
/// target policies must keep their mass on those pairs at observed states.
#[derive(Clone, Debug)]
pub struct ExactProblem<'a> {
    pub mdp: &'a FiniteMdp,
    pub pi_beta: &'a TabularPolicy,
    pub observed: Vec<bool>,
}

impl<'a> ExactProblem<'a> {
    /// Every state counts as observed.
    pub fn true_model(mdp: &'a FiniteMdp, pi_beta: &'a TabularPolicy) -> Result<Self> {
        mdp.check_policy(pi_beta)?;
        Ok(Self {
            mdp,
            pi_beta,
            observed: vec![true; mdp.num_states()],
        })
    }

    pub fn empirical(model: &'a EmpiricalModel) -> Self {
        let ns = model.mdp().num_states();
        Self {
            mdp: model.mdp(),
            pi_beta: model.pi_beta_hat(),
            observed: (0..ns).map(|s| model.is_observed_state(s)).collect(),
        }
    }

    pub fn is_penalized(&self, s: usize, a: usize) -> bool {
        self.observed[s] && self.pi_beta.prob(s, a) > 0.0
    }

    /// Actions the target policy may use at `s`.
    pub fn allowed(&self, s: usize, a: usize) -> bool {
        !self.observed[s] || self.pi_beta.prob(s, a) > 0.0
    }

    fn check_support(&self, pi: &TabularPolicy) -> Result<()> {
        for s in 0..self.mdp.num_states() {
            for a in 0..self.mdp.num_actions() {
                if pi.prob(s, a) > 0.0 && !self.allowed(s, a) {
                    return Err(Error::SupportViolation {
                        state: s,
                        action: a,
                        target: pi.prob(s, a),
                    });
                }
            }
        }
        Ok(())
    }

    /// Ratio penalty table of `pi` (zero off the penalized pairs).
    pub fn penalty(&self, pi: &TabularPolicy) -> Result<Vec<f64>> {
        self.check_support(pi)?;
        let (ns, na) = (self.mdp.num_states(), self.mdp.num_actions());
        let mut out = vec![0.0; ns * na];
        for s in 0..ns {
            for a in 0..na {
                if self.is_penalized(s, a) {
                    out[s * na + a] = conservative_ratio_penalty(pi, self.pi_beta, s, a)?;
                }
            }
        }
        Ok(out)
    }

    /// `g(s) = E_{a~pi}[pi/beta - 1]` at observed states, zero elsewhere.
    pub fn expected_ratio(&self, pi: &TabularPolicy) -> Result<Vec<f64>> {
        let pen = self.penalty(pi)?;
        let na = self.mdp.num_actions();
        Ok((0..self.mdp.num_states())
            .map(|s| dot(pi.row(s), &pen[s * na..(s + 1) * na]))
            .collect())
    }

    /// `V^mix - alpha (1 - lambda) (I - gamma P_mix)^{-1} g`: the state values
    /// of the penalized fixed point under the mixture policy.
    pub fn penalized_mixture_values(&self, pi: &TabularPolicy, alpha: f64, lambda: f64) -> Result<Vec<f64>> {
        let mix = mixture_policy(self.pi_beta, pi, lambda)?;
        let g = self.expected_ratio(pi)?;
        let r_mix = self.mdp.policy_reward(&mix);
        let rhs: Vec<f64> = r_mix
            .iter()
            .zip(&g)
            .map(|(r, gs)| r - alpha * (1.0 - lambda) * gs)
            .collect();
        solve_resolvent(&self.mdp.state_chain(&mix), self.mdp.gamma(), &rhs)
    }

    /// `E_{d0}` of [`Self::penalized_mixture_values`].
    pub fn penalized_objective(&self, pi: &TabularPolicy, alpha: f64, lambda: f64) -> Result<f64> {
        Ok(dot(self.mdp.d0(), &self.penalized_mixture_values(pi, alpha, lambda)?))
    }

    /// Row-wise improvement of `q` restricted to allowed actions.
    pub fn improve(&self, q: &QTable, rule: Improvement, current: &TabularPolicy) -> TabularPolicy {
        let (ns, na) = (self.mdp.num_states(), self.mdp.num_actions());
        match rule {
            Improvement::Frozen | Improvement::PenalizedHillClimb => current.clone(),
            Improvement::Greedy => {
                let actions: Vec<usize> = (0..ns)
                    .map(|s| {
                        let mut best = None;
                        for a in (0..na).filter(|a| self.allowed(s, *a)) {
                            if best.is_none_or(|b: usize| q.get(s, a) > q.get(s, b)) {
                                best = Some(a);
                            }
                        }
                        best.unwrap_or(0)
                    })
                    .collect();
                TabularPolicy::deterministic(na, &actions).expect("actions in range")
            }
            Improvement::Softmax { temperature } => {
                let masked: Vec<f64> = (0..ns * na)
                    .map(|i| if self.allowed(i / na, i % na) { q.values()[i] } else { f64::NEG_INFINITY })
                    .collect();
                softmax_policy(&QTable::from_raw(ns, na, masked), temperature)
            }
        }
    }
}

/// Step sizes tried by the penalized hill-climb.
pub const HILL_CLIMB_STEPS: [f64; 7] = [1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625];

/// One sweep of coordinate ascent: at each state, for each allowed action and
/// step size, move the row toward that action if the penalized objective
/// strictly improves. Returns the number of accepted moves.
pub fn hill_climb_sweep(
    problem: &ExactProblem<'_>,
    pi: &mut TabularPolicy,
    objective: &mut f64,
    alpha: f64,
    lambda: f64,
) -> Result<usize> {
    let (ns, na) = (problem.mdp.num_states(), problem.mdp.num_actions());
    let mut accepted = 0;
    for s in 0..ns {
        for a in (0..na).filter(|a| problem.allowed(s, *a)) {
            for eta in HILL_CLIMB_STEPS {
                let old: Vec<f64> = pi.row(s).to_vec();
                let row: Vec<f64> = old
                    .iter()
                    .enumerate()
                    .map(|(b, p)| (1.0 - eta) * p + if b == a { eta } else { 0.0 })
                    .collect();
                if row == old {
                    continue;
                }
                pi.set_row(s, &row)?;
                let value = problem.penalized_objective(pi, alpha, lambda)?;
                if value > *objective + 1e-12 * (1.0 + objective.abs()) {
                    *objective = value;
                    accepted += 1;
                    break;
                }
                pi.set_row(s, &old)?;
            }
        }
    }
    Ok(accepted)
}

/// Settings of the exact penalized iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub improvement: Improvement,
    /// Stop once `||Q_{k+1} - Q_k||` certifies this distance to the fixed point
    /// and the policy no longer changes.
    pub tol: f64,
    pub max_iter: usize,
    /// Starting policy; the behavior policy when `None`.
    pub initial_policy: Option<TabularPolicy>,
}

impl ExactConfig {
    pub fn new(alpha: f64, lambda: f64, improvement: Improvement) -> Self {
        Self {
            alpha,
            lambda,
            improvement,
            tol: 1e-11,
            max_iter: 100_000,
            initial_policy: None,
        }
    }

    pub fn from_cpql(cfg: &CpqlConfig) -> Self {
        Self::new(cfg.alpha, cfg.lambda, cfg.improvement)
    }

    pub fn with_initial_policy(mut self, pi: TabularPolicy) -> Self {
        self.initial_policy = Some(pi);
        self
    }
}

/// Per-iteration summary of the exact iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactRecord {
    pub iter: usize,
    /// `||Q_{k+1} - Q_k||_inf`.
    pub step: f64,
    /// Mean ratio penalty of the current policy over penalized pairs.
    pub penalty: f64,
    /// Mean Q over penalized pairs.
    pub avg_q: f64,
    /// Penalized objective of the current policy.
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExactOutcome {
    pub q: QTable,
    pub pi: TabularPolicy,
    pub records: Vec<ExactRecord>,
    pub converged: bool,
    /// `||Q - (T_lambda Q - alpha * penalty)||_inf` at the returned pair.
    pub residual: f64,
}

fn mean_over(problem: &ExactProblem<'_>, values: &[f64]) -> f64 {
    let na = problem.mdp.num_actions();
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, v) in values.iter().enumerate() {
        if problem.is_penalized(i / na, i % na) {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// `Q_{k+1} = T_lambda^{beta, pi_k} Q_k - alpha * penalty(pi_k)`, alternated
/// with policy improvement.
pub fn cpql_exact_iterate(problem: &ExactProblem<'_>, cfg: &ExactConfig) -> Result<ExactOutcome> {
    if !(cfg.alpha >= 0.0 && cfg.alpha.is_finite()) {
        return Err(Error::InvalidParameter(format!("alpha {} must be finite and >= 0", cfg.alpha)));
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance {} must be positive", cfg.tol)));
    }
    let mdp = problem.mdp;
    let solver = PqlSolver::new(mdp, problem.pi_beta, cfg.lambda)?;
    let rate = pql_rate(mdp.gamma(), cfg.lambda);
    let threshold = if rate > 0.0 { cfg.tol * (1.0 - rate) / rate } else { f64::INFINITY };

    let mut pi = cfg.initial_policy.clone().unwrap_or_else(|| problem.pi_beta.clone());
    mdp.check_policy(&pi)?;
    let mut pen = problem.penalty(&pi)?;
    let mut objective = problem.penalized_objective(&pi, cfg.alpha, cfg.lambda)?;
    let mut climbing = cfg.improvement == Improvement::PenalizedHillClimb;
    let mut q = QTable::zeros(mdp.num_states(), mdp.num_actions());
    let mut records = Vec::new();
    let mut converged = false;

    for iter in 0..cfg.max_iter {
        let backed = solver.apply(mdp, &pi, &q)?;
        let next: Vec<f64> = backed
            .values()
            .iter()
            .zip(&pen)
            .map(|(v, p)| v - cfg.alpha * p)
            .collect();
        let step = sup_dist(&next, q.values());
        q = QTable::from_raw(mdp.num_states(), mdp.num_actions(), next);

        let mut policy_changed = false;
        if climbing {
            let accepted = hill_climb_sweep(problem, &mut pi, &mut objective, cfg.alpha, cfg.lambda)?;
            climbing = accepted > 0;
            policy_changed = climbing;
        } else if !matches!(cfg.improvement, Improvement::Frozen | Improvement::PenalizedHillClimb) {
            let improved = problem.improve(&q, cfg.improvement, &pi);
            policy_changed = improved != pi;
            if policy_changed {
                pi = improved;
                objective = problem.penalized_objective(&pi, cfg.alpha, cfg.lambda)?;
            }
        }
        if policy_changed {
            pen = problem.penalty(&pi)?;
        }
        records.push(ExactRecord {
            iter,
            step,
            penalty: mean_over(problem, &pen),
            avg_q: mean_over(problem, q.values()),
            objective,
        });
        if step <= threshold.max(rounding_floor(q.sup_norm())) && !policy_changed {
            converged = true;
            break;
        }
    }

    let backed = solver.apply(mdp, &pi, &q)?;
    let residual = backed
        .values()
        .iter()
        .zip(&pen)
        .zip(q.values())
        .fold(0.0_f64, |m, ((b, p), v)| m.max((b - cfg.alpha * p - v).abs()));
    Ok(ExactOutcome {
        q,
        pi,
        records,
        converged,
        residual,
    })
}

/// Improving run followed by a frozen run from the improved policy, so the
/// returned Q is the penalized fixed point of the returned policy.
pub fn cpql_exact_improve_then_evaluate(problem: &ExactProblem<'_>, cfg: &ExactConfig) -> Result<ExactOutcome> {
    let improved = cpql_exact_iterate(problem, cfg)?;
    let frozen = ExactConfig {
        improvement: Improvement::Frozen,
        initial_policy: Some(improved.pi.clone()),
        ..cfg.clone()
    };
    let mut out = cpql_exact_iterate(problem, &frozen)?;
    let mut records = improved.records;
    let offset = records.len();
    records.extend(out.records.iter().map(|r| ExactRecord { iter: r.iter + offset, ..*r }));
    out.records = records;
    Ok(out)
}

/// Smallest `alpha` that rules out overestimation given concentration
/// constants `c_r`, `c_p`. `+inf` when `pi` matches the behavior policy in
/// expectation at some observed state; `0` when both constants vanish.
pub fn alpha_threshold(
    model: &EmpiricalModel,
    pi: &TabularPolicy,
    lambda: f64,
    c_r: f64,
    c_p: f64,
    gamma: f64,
    r_max: f64,
) -> Result<f64> {
    if c_r < 0.0 || c_p < 0.0 {
        return Err(Error::InvalidParameter("concentration constants must be >= 0".into()));
    }
    if !(0.0..1.0).contains(&lambda) || !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidParameter("lambda and gamma must lie in [0, 1)".into()));
    }
    let numerator = c_r + gamma * c_p * r_max / (1.0 - gamma);
    if numerator == 0.0 {
        return Ok(0.0);
    }
    let problem = ExactProblem::empirical(model);
    let g = problem.expected_ratio(pi)?;
    let mut max_inv_g = 0.0_f64;
    for s in model.observed_states() {
        if g[s] <= 0.0 {
            return Ok(f64::INFINITY);
        }
        max_inv_g = max_inv_g.max(1.0 / g[s]);
    }
    let min_count = model.counts().iter().copied().filter(|n| *n > 0).min().unwrap_or(1);
    let max_inv_sqrt = 1.0 / libm::sqrt(min_count as f64);
    Ok(numerator / ((1.0 - gamma * lambda) * (1.0 - lambda) * (1.0 - gamma)) * max_inv_sqrt * max_inv_g)
}

/// `E_{a ~ pi} q(s, a)`.
fn policy_value(q: &QTable, pi: &TabularPolicy, s: usize) -> f64 {
    dot(q.row(s), pi.row(s))
}

/// Peng's lambda-return targets `Q^0..Q^{n-1}` along a segment, with
/// `Q^n = E_pi q(s_n, .)` and expected bootstraps.
pub fn lambda_return_targets(segment: &Segment, q_target: &QTable, pi: &TabularPolicy, lambda: f64, gamma: f64) -> Vec<f64> {
    let n = segment.len();
    let mut out = vec![0.0; n];
    let mut next = policy_value(q_target, pi, segment.states[n]);
    for i in (0..n).rev() {
        let v = policy_value(q_target, pi, segment.states[i + 1]);
        let value = segment.rewards[i] + gamma * v + gamma * lambda * (next - v);
        out[i] = value;
        next = value;
    }
    out
}

/// Targets of every [`TargetKind`]; `pi_beta` is only read by the trace kinds.
pub fn segment_targets(
    kind: TargetKind,
    segment: &Segment,
    q_target: &QTable,
    pi: &TabularPolicy,
    pi_beta: &TabularPolicy,
    lambda: f64,
    gamma: f64,
) -> Vec<f64> {
    match kind {
        TargetKind::Peng => lambda_return_targets(segment, q_target, pi, lambda, gamma),
        TargetKind::NStep => lambda_return_targets(segment, q_target, pi, 1.0, gamma),
        TargetKind::Retrace | TargetKind::TreeBackup => {
            let n = segment.len();
            let mut out = vec![0.0; n];
            let mut next = 0.0;
            for i in (0..n).rev() {
                let sp = segment.states[i + 1];
                let v = policy_value(q_target, pi, sp);
                let correction = if i + 1 < n {
                    let ap = segment.actions[i + 1];
                    let c = match kind {
                        TargetKind::Retrace => {
                            let b = pi_beta.prob(sp, ap);
                            if b > 0.0 {
                                lambda * (pi.prob(sp, ap) / b).min(1.0)
                            } else {
                                0.0
                            }
                        }
                        _ => lambda * pi.prob(sp, ap),
                    };
                    c * (next - q_target.get(sp, ap))
                } else {
                    0.0
                };
                out[i] = segment.rewards[i] + gamma * (v + correction);
                next = out[i];
            }
            out
        }
    }
}

/// One training record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub td_loss: f64,
    /// Mean `logsumexp Q(s, .) - E_beta Q(s, .)` over the batch, before `alpha`.
    pub penalty: f64,
    pub avg_q: f64,
    pub j_eval: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TrainRecord>,
    pub tables: Vec<QTable>,
    pub policy: TabularPolicy,
}

/// Statistics of one gradient step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub td_loss: f64,
    pub penalty: f64,
    pub avg_q: f64,
}

/// Online and target tables of the tabular learner plus its current policy.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularLearner {
    pub tables: Vec<QTable>,
    pub targets: Vec<QTable>,
    pub policy: TabularPolicy,
}

impl TabularLearner {
    /// Tables drawn uniformly in `[-init_scale, init_scale]`, one stream per table.
    pub fn new(num_states: usize, num_actions: usize, cfg: &CpqlConfig) -> Self {
        let count = if cfg.twin_tables { 2 } else { 1 };
        let tables: Vec<QTable> = (0..count)
            .map(|j| {
                let mut rng = rng_from_seed(split_seed(cfg.seed, 100 + j as u64));
                let values = (0..num_states * num_actions)
                    .map(|_| {
                        if cfg.init_scale == 0.0 {
                            0.0
                        } else {
                            rng.random_range(-cfg.init_scale..=cfg.init_scale)
                        }
                    })
                    .collect();
                QTable::from_raw(num_states, num_actions, values)
            })
            .collect();
        let mut learner = Self {
            targets: tables.clone(),
            tables,
            policy: TabularPolicy::uniform(num_states, num_actions),
        };
        learner.improve(cfg.improvement);
        learner
    }

    pub fn combined(&self) -> QTable {
        combine_min(&self.tables)
    }

    pub fn combined_target(&self) -> QTable {
        combine_min(&self.targets)
    }

    pub fn greedy(&self) -> TabularPolicy {
        greedy_policy(&self.combined(), TieBreak::LowestIndex)
    }

    pub fn improve(&mut self, rule: Improvement) {
        let q = self.combined();
        self.policy = match rule {
            Improvement::Softmax { temperature } => softmax_policy(&q, temperature),
            Improvement::Frozen => self.policy.clone(),
            _ => greedy_policy(&q, TieBreak::LowestIndex),
        };
    }

    /// Mean combined `Q(s_0, a_0)` over a batch.
    pub fn avg_q(&self, batch: &[Segment]) -> f64 {
        let q = self.combined();
        batch.iter().map(|s| q.get(s.states[0], s.actions[0])).sum::<f64>() / batch.len().max(1) as f64
    }

    /// One gradient step on the batch-mean loss
    /// `0.5 (Q(s0,a0) - y)^2 + alpha (logsumexp Q(s0,.) - E_beta Q(s0,.))`,
    /// then the soft target update and policy improvement.
    pub fn step(&mut self, batch: &[Segment], pi_beta: &TabularPolicy, alpha: f64, cfg: &CpqlConfig) -> StepStats {
        let q_target = self.combined_target();
        let na = self.policy.num_actions();
        let scale = cfg.lr / batch.len() as f64;
        let targets: Vec<f64> = batch
            .iter()
            .map(|seg| segment_targets(cfg.target, seg, &q_target, &self.policy, pi_beta, cfg.lambda, cfg.gamma)[0])
            .collect();
        let avg_q = self.avg_q(batch);
        let (mut td_loss, mut penalty) = (0.0, 0.0);
        for table in self.tables.iter_mut() {
            let mut grad = vec![0.0; table.values().len()];
            let (mut td, mut pen) = (0.0, 0.0);
            for (seg, y) in batch.iter().zip(&targets) {
                let (s, a) = (seg.states[0], seg.actions[0]);
                let err = table.get(s, a) - y;
                td += 0.5 * err * err;
                grad[s * na + a] += err;
                let row = table.row(s);
                let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| libm::exp(v - top)).collect();
                let z: f64 = exps.iter().sum();
                pen += top + libm::log(z) - dot(row, pi_beta.row(s));
                if alpha != 0.0 {
                    for b in 0..na {
                        grad[s * na + b] += alpha * (exps[b] / z - pi_beta.prob(s, b));
                    }
                }
            }
            for (v, g) in table.values_mut().iter_mut().zip(&grad) {
                *v -= scale * g;
            }
            td_loss += td / batch.len() as f64;
            penalty += pen / batch.len() as f64;
        }
        let count = self.tables.len() as f64;
        for (target, table) in self.targets.iter_mut().zip(&self.tables) {
            for (t, v) in target.values_mut().iter_mut().zip(table.values()) {
                *t = cfg.tau * v + (1.0 - cfg.tau) * *t;
            }
        }
        self.improve(cfg.improvement);
        StepStats {
            td_loss: td_loss / count,
            penalty: penalty / count,
            avg_q,
        }
    }
}

fn combine_min(tables: &[QTable]) -> QTable {
    let mut out = tables[0].clone();
    for t in &tables[1..] {
        out = out.pointwise_min(t);
    }
    out
}

/// Tabular rendering of the practical algorithm on an offline dataset.
/// `eval_mdp` enables `j_eval` (greedy policy of the combined table).
pub fn cpql_sgd_train(ds: &TrajectoryDataset, cfg: &CpqlConfig, eval_mdp: Option<&FiniteMdp>) -> Result<TrainTrace> {
    Ok(train_learner(ds, cfg, eval_mdp, None)?.0)
}

/// [`cpql_sgd_train`] that also hands back the learner. With a `probe`
/// batch, `avg_q` is measured on it after each update instead of on the
/// training batch before it.
pub fn train_learner(
    ds: &TrajectoryDataset,
    cfg: &CpqlConfig,
    eval_mdp: Option<&FiniteMdp>,
    probe: Option<&[Segment]>,
) -> Result<(TrainTrace, TabularLearner)> {
    cfg.validate()?;
    if cfg.improvement == Improvement::PenalizedHillClimb {
        return Err(Error::InvalidParameter(
            "improvement: penalized-hill-climb needs a known model; use the exact iteration".into(),
        ));
    }
    let model = build_empirical_model(ds, cfg.gamma, ds.max_abs_reward())?;
    let pi_beta = model.pi_beta_hat();
    let sampler = SegmentSampler::new(ds, cfg.segment_len, cfg.allow_truncated)?;
    let mut rng: WorkRng = rng_from_seed(split_seed(cfg.seed, 0));
    let mut learner = TabularLearner::new(ds.num_states, ds.num_actions, cfg);
    let mut records = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        let batch = sampler.sample_batch(ds, cfg.batch, &mut rng);
        let stats = learner.step(&batch, pi_beta, cfg.alpha, cfg);
        let j_eval = match eval_mdp {
            Some(mdp) if cfg.eval_every > 0 && ((iter + 1) % cfg.eval_every == 0 || iter + 1 == cfg.iters) => {
                Some(expected_return(mdp, &learner.greedy())?)
            }
            _ => None,
        };
        records.push(TrainRecord {
            iter,
            td_loss: stats.td_loss,
            penalty: stats.penalty,
            avg_q: probe.map_or(stats.avg_q, |p| learner.avg_q(p)),
            j_eval,
        });
    }
    let trace = TrainTrace {
        records,
        tables: learner.tables.clone(),
        policy: learner.policy.clone(),
    };
    Ok((trace, learner))
}

/// Greedy action of each state with the lowest index on ties.
pub fn greedy_actions(q: &QTable) -> Vec<usize> {
    (0..q.num_states()).map(|s| argmax(q.row(s))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{random_deterministic_policy, random_mdp, random_policy};
    use crate::mdp::{policy_evaluation_exact, state_values_exact, two_state_toggle, STAY, TOGGLE};

    #[test]
    fn ratio_penalty_cases() {
        let beta = TabularPolicy::uniform(1, 4);
        assert_eq!(conservative_ratio_penalty(&beta, &beta, 0, 2).unwrap(), 0.0);
        let pi = TabularPolicy::deterministic(4, &[1]).unwrap();
        assert_eq!(conservative_ratio_penalty(&pi, &beta, 0, 1).unwrap(), 3.0);
        assert_eq!(conservative_ratio_penalty(&pi, &beta, 0, 0).unwrap(), -1.0);
        let narrow = TabularPolicy::deterministic(4, &[0]).unwrap();
        assert!(matches!(
            conservative_ratio_penalty(&pi, &narrow, 0, 1),
            Err(Error::SupportViolation { .. })
        ));
    }

    #[test]
    fn closed_form_gap_on_toggle() {
        let mdp = two_state_toggle();
        let beta = TabularPolicy::uniform(2, 2);
        let pi = TabularPolicy::deterministic(2, &[TOGGLE, STAY]).unwrap();
        let problem = ExactProblem::true_model(&mdp, &beta).unwrap();
        for (alpha, lambda) in [(0.5, 0.5), (10.0, 0.0), (1.0, 0.9)] {
            let cfg = ExactConfig::new(alpha, lambda, Improvement::Frozen).with_initial_policy(pi.clone());
            let out = cpql_exact_iterate(&problem, &cfg).unwrap();
            assert!(out.converged);
            assert!(out.residual <= 1e-9);
            let mix = mixture_policy(&beta, &pi, lambda).unwrap();
            let v_mix = state_values_exact(&mdp, &mix).unwrap().values;
            let v_hat = out.q.state_values(&mix).values;
            let gap = alpha * (1.0 - lambda) * 1.0 / (1.0 - mdp.gamma());
            for s in 0..2 {
                assert!(((v_mix[s] - v_hat[s]) - gap).abs() <= 1e-8);
            }
            let closed = problem.penalized_mixture_values(&pi, alpha, lambda).unwrap();
            for s in 0..2 {
                assert!((closed[s] - v_hat[s]).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn zero_alpha_is_plain_pql() {
        let mdp = random_mdp(5, 3, 3, 0.2, 0.9, 3).unwrap();
        let beta = random_policy(5, 3, 4);
        let problem = ExactProblem::true_model(&mdp, &beta).unwrap();
        let pi = random_policy(5, 3, 5);
        let cfg = ExactConfig::new(0.0, 0.6, Improvement::Frozen).with_initial_policy(pi.clone());
        let out = cpql_exact_iterate(&problem, &cfg).unwrap();
        let exact = policy_evaluation_exact(&mdp, &mixture_policy(&beta, &pi, 0.6).unwrap()).unwrap();
        assert!(out.q.sup_dist(&exact) <= 1e-9);
    }

    #[test]
    fn hill_climb_objective_never_decreases() {
        let mdp = random_mdp(6, 3, 3, 0.3, 0.9, 8).unwrap();
        let beta = random_policy(6, 3, 9);
        let problem = ExactProblem::true_model(&mdp, &beta).unwrap();
        let out = cpql_exact_iterate(&problem, &ExactConfig::new(0.5, 0.5, Improvement::PenalizedHillClimb)).unwrap();
        for w in out.records.windows(2) {
            assert!(w[1].objective >= w[0].objective);
        }
        let start = problem.penalized_objective(&beta, 0.5, 0.5).unwrap();
        assert!(out.records.last().unwrap().objective > start);
    }

    #[test]
    fn greedy_respects_behavior_support() {
        let mdp = two_state_toggle();
        let beta = TabularPolicy::deterministic(2, &[STAY, STAY]).unwrap();
        let problem = ExactProblem::true_model(&mdp, &beta).unwrap();
        let out = cpql_exact_iterate(&problem, &ExactConfig::new(1.0, 0.5, Improvement::Greedy)).unwrap();
        assert_eq!(out.pi, beta);
    }

    #[test]
    fn threshold_examples() {
        let mut next = vec![0u64; 8];
        // N = 100 on every pair of the fixture.
        next[0] = 100;
        next[3] = 100;
        next[5] = 100;
        next[6] = 100;
        let model = EmpiricalModel::from_counts(2, 2, 0.5, 1.0, &next, &[0.0, 0.0, 100.0, 0.0], &[1, 0]).unwrap();
        let pi = TabularPolicy::deterministic(2, &[TOGGLE, STAY]).unwrap();
        let t = alpha_threshold(&model, &pi, 0.5, 1.0, 0.0, 0.5, 1.0).unwrap();
        assert!((t - 8.0 / 15.0).abs() < 1e-12);
        assert_eq!(alpha_threshold(&model, &pi, 0.5, 0.0, 0.0, 0.5, 1.0).unwrap(), 0.0);
        let beta = model.pi_beta_hat().clone();
        assert_eq!(alpha_threshold(&model, &beta, 0.5, 1.0, 0.0, 0.5, 1.0).unwrap(), f64::INFINITY);
    }

    fn toggle_segment() -> Segment {
        Segment {
            states: vec![0, 1, 1, 0, 1, 1],
            actions: vec![TOGGLE, STAY, TOGGLE, TOGGLE, STAY],
            rewards: vec![0.0, 1.0, 0.0, 0.0, 1.0],
            truncated: false,
            episode: 0,
            start: 0,
        }
    }

    #[test]
    fn lambda_return_reductions() {
        let q = QTable::from_values(2, 2, vec![0.2, 0.9, 1.7, 0.4]).unwrap();
        let pi = random_policy(2, 2, 1);
        let seg = toggle_segment();
        let v = |s: usize| dot(q.row(s), pi.row(s));
        let one = lambda_return_targets(&seg, &q, &pi, 0.0, 0.5);
        for i in 0..5 {
            assert_eq!(one[i], seg.rewards[i] + 0.5 * v(seg.states[i + 1]));
        }
        let mut short = seg.clone();
        short.states.truncate(2);
        short.actions.truncate(1);
        short.rewards.truncate(1);
        assert_eq!(lambda_return_targets(&short, &q, &pi, 0.9, 0.5)[0], 0.0 + 0.5 * v(1));
    }

    #[test]
    fn lambda_return_matches_mixture_expansion() {
        let q = QTable::from_values(2, 2, vec![0.2, 0.9, 1.7, 0.4]).unwrap();
        let pi = random_deterministic_policy(2, 2, 4);
        let seg = toggle_segment();
        let (lambda, gamma, n) = (0.9_f64, 0.5_f64, 5);
        let v = |s: usize| dot(q.row(s), pi.row(s));
        let g = |k: usize| {
            (0..k).map(|i| gamma.powi(i as i32) * seg.rewards[i]).sum::<f64>() + gamma.powi(k as i32) * v(seg.states[k])
        };
        let oracle = (1..n).map(|k| (1.0 - lambda) * lambda.powi(k as i32 - 1) * g(k)).sum::<f64>()
            + lambda.powi(n as i32 - 1) * g(n);
        let got = lambda_return_targets(&seg, &q, &pi, lambda, gamma)[0];
        assert!((got - oracle).abs() <= 1e-12);
    }

    #[test]
    fn on_policy_trace_targets_match_nstep() {
        // With pi = beta and lambda near 1 both trace rules reduce to the
        // corrected return along the sampled actions.
        let q = QTable::from_values(2, 2, vec![0.2, 0.9, 1.7, 0.4]).unwrap();
        let pi = TabularPolicy::deterministic(2, &[TOGGLE, STAY]).unwrap();
        let seg = Segment {
            states: vec![0, 1, 1, 1],
            actions: vec![TOGGLE, STAY, STAY],
            rewards: vec![0.0, 1.0, 1.0],
            truncated: false,
            episode: 0,
            start: 0,
        };
        let rt = segment_targets(TargetKind::Retrace, &seg, &q, &pi, &pi, 1.0, 0.5);
        let tb = segment_targets(TargetKind::TreeBackup, &seg, &q, &pi, &pi, 1.0, 0.5);
        let ns = segment_targets(TargetKind::NStep, &seg, &q, &pi, &pi, 0.0, 0.5);
        assert_eq!(rt, tb);
        assert!((rt[0] - ns[0]).abs() <= 1e-15);
    }

    fn toggle_dataset() -> TrajectoryDataset {
        let mdp = two_state_toggle();
        crate::dataset::collect_trajectories(&mdp, &TabularPolicy::uniform(2, 2), 50, 10, 3).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_tables() {
        let ds = toggle_dataset();
        let cfg = CpqlConfig {
            lr: 0.0,
            iters: 20,
            batch: 16,
            gamma: 0.5,
            ..CpqlConfig::default()
        };
        let trace = cpql_sgd_train(&ds, &cfg, None).unwrap();
        assert_eq!(trace.tables, TabularLearner::new(2, 2, &cfg).tables);
        assert_eq!(trace.records.len(), 20);
    }

    #[test]
    fn sgd_is_deterministic_and_learns_toggle() {
        let ds = toggle_dataset();
        let mdp = two_state_toggle();
        let cfg = CpqlConfig {
            alpha: 0.1,
            lambda: 0.5,
            gamma: 0.5,
            iters: 400,
            batch: 32,
            tau: 0.1,
            eval_every: 50,
            twin_tables: true,
            ..CpqlConfig::default()
        };
        let a = cpql_sgd_train(&ds, &cfg, Some(&mdp)).unwrap();
        let b = cpql_sgd_train(&ds, &cfg, Some(&mdp)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.last().unwrap().j_eval, Some(1.0));
        assert!(a.records[48].j_eval.is_none());
        assert!(a.records[49].j_eval.is_some());
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = CpqlConfig {
            lambda: 1.0,
            ..CpqlConfig::default()
        };
        let msg = alloc::string::ToString::to_string(&bad.validate().unwrap_err());
        assert!(msg.contains("lambda"));
        let bad = CpqlConfig {
            tau: 0.0,
            ..CpqlConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
