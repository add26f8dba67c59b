//! Finite MDPs, tabular policies and exact dynamic programming.
//!
//! All arrays are dense and row-major:
//! `reward[s * A + a]`, `transition[(s * A + a) * S + s']`, `policy[s * A + a]`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, solve_resolvent, sup_dist, sup_norm};

/// Tolerance for stochastic rows and distributions at construction.
pub const STOCHASTIC_TOL: f64 = 1e-9;

fn check_distribution(row: &[f64], what: &str) -> core::result::Result<(), alloc::string::String> {
    if let Some(bad) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(format!("{what} has invalid entry {bad}"));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > STOCHASTIC_TOL {
        return Err(format!("{what} sums to {total}, not 1"));
    }
    Ok(())
}

/// A finite discounted MDP with known dynamics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteMdp {
    num_states: usize,
    num_actions: usize,
    gamma: f64,
    r_max: f64,
    d0: Vec<f64>,
    reward: Vec<f64>,
    transition: Vec<f64>,
}

impl FiniteMdp {
    /// Validates and builds an MDP. Rows are never renormalized.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        gamma: f64,
        r_max: f64,
        d0: Vec<f64>,
        reward: Vec<f64>,
        transition: Vec<f64>,
    ) -> Result<Self> {
        let invalid = |m: alloc::string::String| Err(Error::InvalidMdp(m));
        if num_states == 0 || num_actions == 0 {
            return invalid(format!("empty spaces: S={num_states}, A={num_actions}"));
        }
        if !(0.0..1.0).contains(&gamma) {
            return invalid(format!("discount {gamma} outside [0, 1)"));
        }
        if !r_max.is_finite() || r_max < 0.0 {
            return invalid(format!("r_max {r_max} must be finite and non-negative"));
        }
        if d0.len() != num_states {
            return invalid(format!("d0 has length {}, expected {num_states}", d0.len()));
        }
        if reward.len() != num_states * num_actions {
            return invalid(format!("reward has length {}, expected {}", reward.len(), num_states * num_actions));
        }
        if transition.len() != num_states * num_actions * num_states {
            return invalid(format!(
                "transition has length {}, expected {}",
                transition.len(),
                num_states * num_actions * num_states
            ));
        }
        if let Err(m) = check_distribution(&d0, "d0") {
            return invalid(m);
        }
        for (i, r) in reward.iter().enumerate() {
            if !r.is_finite() || r.abs() > r_max {
                return invalid(format!(
                    "reward at (s={}, a={}) is {r}, exceeding r_max {r_max}",
                    i / num_actions,
                    i % num_actions
                ));
            }
        }
        for (i, row) in transition.chunks(num_states).enumerate() {
            if let Err(m) = check_distribution(
                row,
                &format!("P(.|s={}, a={})", i / num_actions, i % num_actions),
            ) {
                return invalid(m);
            }
        }
        Ok(Self {
            num_states,
            num_actions,
            gamma,
            r_max,
            d0,
            reward,
            transition,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn d0(&self) -> &[f64] {
        &self.d0
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transition
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.num_actions + a]
    }

    /// `P(.|s, a)` as a slice of length S.
    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    /// Same dynamics with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(
            self.num_states,
            self.num_actions,
            gamma,
            self.r_max,
            self.d0.clone(),
            self.reward.clone(),
            self.transition.clone(),
        )
    }

    /// Same dynamics with a different initial distribution.
    pub fn with_d0(&self, d0: Vec<f64>) -> Result<Self> {
        Self::new(
            self.num_states,
            self.num_actions,
            self.gamma,
            self.r_max,
            d0,
            self.reward.clone(),
            self.transition.clone(),
        )
    }

    /// Upper bound on `|Q|` for any policy: `R_max / (1 - gamma)`.
    pub fn value_bound(&self) -> f64 {
        self.r_max / (1.0 - self.gamma)
    }

    pub(crate) fn check_policy(&self, pi: &TabularPolicy) -> Result<()> {
        if pi.num_states != self.num_states || pi.num_actions != self.num_actions {
            return Err(Error::ShapeMismatch(format!(
                "policy is {}x{}, MDP is {}x{}",
                pi.num_states, pi.num_actions, self.num_states, self.num_actions
            )));
        }
        Ok(())
    }

    pub(crate) fn check_q(&self, q: &QTable) -> Result<()> {
        if q.num_states != self.num_states || q.num_actions != self.num_actions {
            return Err(Error::ShapeMismatch(format!(
                "Q table is {}x{}, MDP is {}x{}",
                q.num_states, q.num_actions, self.num_states, self.num_actions
            )));
        }
        Ok(())
    }

    /// State-to-state chain `P_pi[s, s'] = sum_a pi(a|s) P(s'|s, a)`.
    pub fn state_chain(&self, pi: &TabularPolicy) -> DMatrix<f64> {
        let n = self.num_states;
        let mut m = DMatrix::<f64>::zeros(n, n);
        for s in 0..n {
            for a in 0..self.num_actions {
                let w = pi.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                for (sp, p) in self.next_dist(s, a).iter().enumerate() {
                    m[(s, sp)] += w * p;
                }
            }
        }
        m
    }

    /// Pair-to-pair chain `M[(s,a), (s',a')] = P(s'|s,a) * weight(s', a')`.
    pub fn pair_chain(&self, weight: impl Fn(usize, usize) -> f64) -> DMatrix<f64> {
        let (ns, na) = (self.num_states, self.num_actions);
        let n = ns * na;
        let mut m = DMatrix::<f64>::zeros(n, n);
        for sp in 0..ns {
            for ap in 0..na {
                let w = weight(sp, ap);
                if w == 0.0 {
                    continue;
                }
                let col = sp * na + ap;
                for row in 0..n {
                    let p = self.transition[row * ns + sp];
                    if p != 0.0 {
                        m[(row, col)] = p * w;
                    }
                }
            }
        }
        m
    }

    /// `r_pi(s) = sum_a pi(a|s) r(s, a)`.
    pub fn policy_reward(&self, pi: &TabularPolicy) -> Vec<f64> {
        (0..self.num_states)
            .map(|s| (0..self.num_actions).map(|a| pi.prob(s, a) * self.reward(s, a)).sum())
            .collect()
    }

    /// `(P V)(s, a) = sum_s' P(s'|s,a) V(s')`.
    pub fn expect_next(&self, v: &[f64]) -> Vec<f64> {
        self.transition.chunks(self.num_states).map(|row| dot(row, v)).collect()
    }

    /// `(P^pi Q)(s, a) = sum_s' P(s'|s,a) sum_a' pi(a'|s') Q(s', a')`.
    pub fn expect_next_q(&self, pi: &TabularPolicy, q: &QTable) -> Vec<f64> {
        self.expect_next(&q.state_values(pi).values)
    }
}

/// A row-stochastic state-to-action distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if num_states == 0 || num_actions == 0 || probs.len() != num_states * num_actions {
            return Err(Error::InvalidPolicy(format!(
                "expected {}x{} entries, got {}",
                num_states,
                num_actions,
                probs.len()
            )));
        }
        for (s, row) in probs.chunks(num_actions).enumerate() {
            check_distribution(row, &format!("policy row {s}")).map_err(Error::InvalidPolicy)?;
        }
        Ok(Self {
            num_states,
            num_actions,
            probs,
        })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions],
        }
    }

    /// One-hot rows: all mass on `actions[s]`.
    pub fn deterministic(num_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * num_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(Error::InvalidPolicy(format!("action {a} out of range at state {s}")));
            }
            probs[s * num_actions + a] = 1.0;
        }
        Self::new(actions.len(), num_actions, probs)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Replaces one row; the row must be a distribution.
    pub fn set_row(&mut self, s: usize, row: &[f64]) -> Result<()> {
        check_distribution(row, &format!("policy row {s}")).map_err(Error::InvalidPolicy)?;
        self.probs[s * self.num_actions..(s + 1) * self.num_actions].copy_from_slice(row);
        Ok(())
    }

    /// Index of the largest probability in row `s` (lowest index on ties).
    pub fn mode(&self, s: usize) -> usize {
        argmax(self.row(s))
    }

    pub fn is_deterministic(&self) -> bool {
        self.probs.iter().all(|&p| p == 0.0 || p == 1.0)
    }
}

/// Dense action-value function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    num_states: usize,
    num_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            values: vec![0.0; num_states * num_actions],
        }
    }

    pub fn from_values(num_states: usize, num_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != num_states * num_actions {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values, got {}",
                num_states * num_actions,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("Q table has non-finite entries".into()));
        }
        Ok(Self {
            num_states,
            num_actions,
            values,
        })
    }

    /// Unchecked constructor for internal tables (entries may be infinite masks).
    pub(crate) fn from_raw(num_states: usize, num_actions: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), num_states * num_actions);
        Self {
            num_states,
            num_actions,
            values,
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.num_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.num_actions + a] = v;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn sup_norm(&self) -> f64 {
        sup_norm(&self.values)
    }

    pub fn sup_dist(&self, other: &QTable) -> f64 {
        sup_dist(&self.values, &other.values)
    }

    /// `V(s) = sum_a pi(a|s) Q(s, a)`.
    pub fn state_values(&self, pi: &TabularPolicy) -> VTable {
        VTable {
            values: (0..self.num_states)
                .map(|s| dot(self.row(s), pi.row(s)))
                .collect(),
        }
    }

    /// Pointwise minimum of two tables of equal shape.
    pub fn pointwise_min(&self, other: &QTable) -> QTable {
        QTable {
            num_states: self.num_states,
            num_actions: self.num_actions,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a.min(*b))
                .collect(),
        }
    }
}

/// Dense state-value function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VTable {
    pub values: Vec<f64>,
}

/// Discounted visitation distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitDist {
    pub state_probs: Vec<f64>,
    pub state_action_probs: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    LowestIndex,
    UniformOverTies,
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Exact `Q^pi` from the linear system `V = r_pi + gamma P_pi V`, lifted to Q.
pub fn policy_evaluation_exact(mdp: &FiniteMdp, pi: &TabularPolicy) -> Result<QTable> {
    mdp.check_policy(pi)?;
    let v = solve_resolvent(&mdp.state_chain(pi), mdp.gamma, &mdp.policy_reward(pi))?;
    let next = mdp.expect_next(&v);
    let values: Vec<f64> = mdp
        .reward
        .iter()
        .zip(next)
        .map(|(r, n)| r + mdp.gamma * n)
        .collect();
    QTable::from_values(mdp.num_states, mdp.num_actions, values)
}

/// `V^pi` by direct solve.
pub fn state_values_exact(mdp: &FiniteMdp, pi: &TabularPolicy) -> Result<VTable> {
    mdp.check_policy(pi)?;
    Ok(VTable {
        values: solve_resolvent(&mdp.state_chain(pi), mdp.gamma, &mdp.policy_reward(pi))?,
    })
}

/// Greedy (deterministic unless `UniformOverTies`) policy of `q`.
pub fn greedy_policy(q: &QTable, tie_break: TieBreak) -> TabularPolicy {
    let na = q.num_actions;
    let mut probs = vec![0.0; q.num_states * na];
    for s in 0..q.num_states {
        let row = q.row(s);
        match tie_break {
            TieBreak::LowestIndex => probs[s * na + argmax(row)] = 1.0,
            TieBreak::UniformOverTies => {
                let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let ties = row.iter().filter(|v| **v == best).count() as f64;
                for (a, v) in row.iter().enumerate() {
                    if *v == best {
                        probs[s * na + a] = 1.0 / ties;
                    }
                }
            }
        }
    }
    TabularPolicy {
        num_states: q.num_states,
        num_actions: na,
        probs,
    }
}

/// `T* Q = r + gamma P max_a Q`.
pub fn bellman_optimal_backup(mdp: &FiniteMdp, q: &QTable) -> QTable {
    let v: Vec<f64> = (0..mdp.num_states)
        .map(|s| q.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let next = mdp.expect_next(&v);
    QTable {
        num_states: mdp.num_states,
        num_actions: mdp.num_actions,
        values: mdp.reward.iter().zip(next).map(|(r, n)| r + mdp.gamma * n).collect(),
    }
}

/// Value iteration to `||T*Q - Q|| <= tol`, then policy-iteration polishing of
/// the greedy policy so the returned policy is exactly optimal.
///
/// Returns `Q^{pi*}` (exact) and the greedy policy `pi*`.
pub fn value_iteration(mdp: &FiniteMdp, tol: f64, max_iter: usize) -> Result<(QTable, TabularPolicy)> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance {tol} must be positive")));
    }
    let mut q = QTable::zeros(mdp.num_states, mdp.num_actions);
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let next = bellman_optimal_backup(mdp, &q);
        residual = next.sup_dist(&q);
        q = next;
        if residual <= tol {
            break;
        }
    }
    if residual > tol {
        return Err(Error::NoConvergence {
            iterations: max_iter,
            residual,
        });
    }
    let mut pi = greedy_policy(&q, TieBreak::LowestIndex);
    for _ in 0..(mdp.num_states * mdp.num_actions + 1) {
        let q_pi = policy_evaluation_exact(mdp, &pi)?;
        // Switch only on strict improvement so ties cannot cycle.
        let mut changed = false;
        let mut actions: Vec<usize> = (0..mdp.num_states).map(|s| pi.mode(s)).collect();
        for (s, current) in actions.iter_mut().enumerate() {
            let row = q_pi.row(s);
            let best = argmax(row);
            if row[best] > row[*current] + 1e-12 * (1.0 + row[*current].abs()) {
                *current = best;
                changed = true;
            }
        }
        if !changed {
            return Ok((q_pi, pi));
        }
        pi = TabularPolicy::deterministic(mdp.num_actions, &actions)?;
    }
    let q_pi = policy_evaluation_exact(mdp, &pi)?;
    Ok((q_pi, pi))
}

/// Row-wise convex combination `lambda * pi_beta + (1 - lambda) * pi`.
pub fn mixture_policy(pi_beta: &TabularPolicy, pi: &TabularPolicy, lambda: f64) -> Result<TabularPolicy> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!("mixture weight {lambda} outside [0, 1]")));
    }
    if pi_beta.num_states != pi.num_states || pi_beta.num_actions != pi.num_actions {
        return Err(Error::ShapeMismatch("mixture of policies with different shapes".into()));
    }
    let probs = if lambda == 0.0 {
        pi.probs.clone()
    } else if lambda == 1.0 {
        pi_beta.probs.clone()
    } else {
        pi_beta
            .probs
            .iter()
            .zip(&pi.probs)
            .map(|(b, p)| lambda * b + (1.0 - lambda) * p)
            .collect()
    };
    Ok(TabularPolicy {
        num_states: pi.num_states,
        num_actions: pi.num_actions,
        probs,
    })
}

/// `d^pi = (1 - gamma) (I - gamma P_pi^T)^{-1} d0`, with `d^pi(s, a) = d^pi(s) pi(a|s)`.
pub fn visitation_distribution(mdp: &FiniteMdp, pi: &TabularPolicy) -> Result<VisitDist> {
    mdp.check_policy(pi)?;
    let chain_t = mdp.state_chain(pi).transpose();
    let mut d = solve_resolvent(&chain_t, mdp.gamma, &mdp.d0)?;
    for x in d.iter_mut() {
        *x *= 1.0 - mdp.gamma;
    }
    let sa = (0..mdp.num_states)
        .flat_map(|s| (0..mdp.num_actions).map(move |a| (s, a)))
        .map(|(s, a)| d[s] * pi.prob(s, a))
        .collect();
    Ok(VisitDist {
        state_probs: d,
        state_action_probs: Some(sa),
    })
}

/// Both forms of `J(pi)`: `E_{d0}[V^pi]` and `E_{d^pi}[r] / (1 - gamma)`.
pub fn expected_return_forms(mdp: &FiniteMdp, pi: &TabularPolicy) -> Result<(f64, f64)> {
    let v = state_values_exact(mdp, pi)?;
    let from_start = dot(&mdp.d0, &v.values);
    let d = visitation_distribution(mdp, pi)?;
    let from_visits = dot(&d.state_probs, &mdp.policy_reward(pi)) / (1.0 - mdp.gamma);
    Ok((from_start, from_visits))
}

/// `J(pi) = E_{s ~ d0}[V^pi(s)]`.
pub fn expected_return(mdp: &FiniteMdp, pi: &TabularPolicy) -> Result<f64> {
    let (j, j_visits) = expected_return_forms(mdp, pi)?;
    debug_assert!(
        (j - j_visits).abs() <= 1e-8 * (1.0 + j.abs()),
        "return identity violated: {j} vs {j_visits}"
    );
    Ok(j)
}

/// Per-state total variation `0.5 * sum_a |pi1(a|s) - pi2(a|s)|`.
pub fn total_variation(pi1: &TabularPolicy, pi2: &TabularPolicy) -> Result<Vec<f64>> {
    if pi1.num_states != pi2.num_states || pi1.num_actions != pi2.num_actions {
        return Err(Error::ShapeMismatch(format!(
            "policies are {}x{} and {}x{}",
            pi1.num_states, pi1.num_actions, pi2.num_states, pi2.num_actions
        )));
    }
    Ok((0..pi1.num_states)
        .map(|s| {
            let tv: f64 = pi1.row(s).iter().zip(pi2.row(s)).map(|(a, b)| (a - b).abs()).sum();
            (0.5 * tv).min(1.0)
        })
        .collect())
}

/// Action indices of the two-state fixture.
pub const STAY: usize = 0;
pub const TOGGLE: usize = 1;

/// The two-state toggle fixture: `stay` keeps the state, `toggle` switches it,
/// `r(s1, stay) = 1` and zero elsewhere, `gamma = 0.5`, `d0 = delta(s0)`.
pub fn two_state_toggle() -> FiniteMdp {
    let transition = vec![
        1.0, 0.0, // s0 stay
        0.0, 1.0, // s0 toggle
        0.0, 1.0, // s1 stay
        1.0, 0.0, // s1 toggle
    ];
    FiniteMdp::new(2, 2, 0.5, 1.0, vec![1.0, 0.0], vec![0.0, 0.0, 1.0, 0.0], transition)
        .expect("fixture is valid")
}
