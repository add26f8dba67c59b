//! Off-policy backup operators and a fixed-point solver.
//!
//! `P^pi Q(s, a) = sum_s' P(s'|s, a) sum_a' pi(a'|s') Q(s', a')`. All backups
//! are exact expectations over a known (true or empirical) model.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sup_norm, Factored};
use crate::mdp::{bellman_optimal_backup, FiniteMdp, QTable, TabularPolicy};

fn check_lambda_open(lambda: f64) -> Result<()> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!("lambda {lambda} outside [0, 1)")));
    }
    Ok(())
}

fn check_lambda_closed(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

fn table(mdp: &FiniteMdp, values: Vec<f64>) -> QTable {
    QTable::from_values(mdp.num_states(), mdp.num_actions(), values).expect("shape matches model")
}

/// `r + gamma * x` elementwise.
fn reward_plus(mdp: &FiniteMdp, scale: f64, x: &[f64]) -> Vec<f64> {
    mdp.rewards().iter().zip(x).map(|(r, v)| r + scale * v).collect()
}

/// `T^pi Q = r + gamma P^pi Q`.
pub fn bellman_backup(mdp: &FiniteMdp, pi: &TabularPolicy, q: &QTable) -> Result<QTable> {
    mdp.check_policy(pi)?;
    mdp.check_q(q)?;
    let next = mdp.expect_next_q(pi, q);
    Ok(table(mdp, reward_plus(mdp, mdp.gamma(), &next)))
}

/// `(I - gamma*lambda*P^{beta})^{-1}` factored once per behavior policy.
///
/// The factorization does not depend on the target policy, so repeated PQL
/// backups under changing targets reuse it.
#[derive(Clone, Debug)]
pub struct PqlSolver {
    lu: Factored,
    lambda: f64,
    gamma: f64,
}

impl PqlSolver {
    pub fn new(mdp: &FiniteMdp, pi_beta: &TabularPolicy, lambda: f64) -> Result<Self> {
        check_lambda_open(lambda)?;
        mdp.check_policy(pi_beta)?;
        let n = mdp.num_pairs();
        let m = mdp.pair_chain(|s, a| pi_beta.prob(s, a));
        let a = nalgebra::DMatrix::<f64>::identity(n, n) - m * (mdp.gamma() * lambda);
        Ok(Self {
            lu: Factored::new(a)?,
            lambda,
            gamma: mdp.gamma(),
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `(I - gamma*lambda*P^beta)^{-1} (r + gamma(1-lambda) P^pi Q)`.
    pub fn apply(&self, mdp: &FiniteMdp, pi: &TabularPolicy, q: &QTable) -> Result<QTable> {
        mdp.check_policy(pi)?;
        mdp.check_q(q)?;
        let next = mdp.expect_next_q(pi, q);
        let rhs = reward_plus(mdp, self.gamma * (1.0 - self.lambda), &next);
        Ok(table(mdp, self.lu.solve(&rhs)?))
    }

    /// The same map without the reward term; `apply(Q1) - apply(Q2) = linear(Q1 - Q2)`.
    pub fn linear(&self, mdp: &FiniteMdp, pi: &TabularPolicy, e: &QTable) -> Result<QTable> {
        let next = mdp.expect_next_q(pi, e);
        let rhs: Vec<f64> = next.iter().map(|v| self.gamma * (1.0 - self.lambda) * v).collect();
        Ok(table(mdp, self.lu.solve(&rhs)?))
    }

    /// Solves `(I - gamma*lambda*P^beta) x = rhs` for an arbitrary right-hand side.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        self.lu.solve(rhs)
    }
}

/// Contraction rate of the PQL operator: `gamma(1-lambda) / (1-gamma*lambda)`.
pub fn pql_rate(gamma: f64, lambda: f64) -> f64 {
    gamma * (1.0 - lambda) / (1.0 - gamma * lambda)
}

pub fn pql_backup_closed_form(
    mdp: &FiniteMdp,
    pi_beta: &TabularPolicy,
    pi: &TabularPolicy,
    lambda: f64,
    q: &QTable,
) -> Result<QTable> {
    PqlSolver::new(mdp, pi_beta, lambda)?.apply(mdp, pi, q)
}

/// Truncated geometric series of n-step backups and a bound on the dropped tail.
pub fn pql_backup_series(
    mdp: &FiniteMdp,
    pi_beta: &TabularPolicy,
    pi: &TabularPolicy,
    lambda: f64,
    q: &QTable,
    n_max: usize,
) -> Result<(QTable, f64)> {
    check_lambda_open(lambda)?;
    if n_max == 0 {
        return Err(Error::InvalidParameter("n_max must be at least 1".into()));
    }
    mdp.check_policy(pi_beta)?;
    let mut x = bellman_backup(mdp, pi, q)?;
    let mut sum: Vec<f64> = x.values().iter().map(|v| (1.0 - lambda) * v).collect();
    let mut weight = 1.0 - lambda;
    for _ in 2..=n_max {
        x = bellman_backup(mdp, pi_beta, &x)?;
        weight *= lambda;
        if weight == 0.0 {
            break;
        }
        for (s, v) in sum.iter_mut().zip(x.values()) {
            *s += weight * v;
        }
    }
    let tail = 2.0 * libm::pow(lambda, n_max as f64) * (q.sup_norm() + mdp.value_bound());
    Ok((table(mdp, sum), tail))
}

/// `(T^beta)^{n-1} T^pi Q`.
pub fn nstep_backup(
    mdp: &FiniteMdp,
    pi_beta: &TabularPolicy,
    pi: &TabularPolicy,
    n: usize,
    q: &QTable,
) -> Result<QTable> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be at least 1".into()));
    }
    mdp.check_policy(pi_beta)?;
    let mut x = bellman_backup(mdp, pi, q)?;
    for _ in 1..n {
        x = bellman_backup(mdp, pi_beta, &x)?;
    }
    Ok(x)
}

/// `lambda T^beta Q + (1 - lambda) T^pi Q`.
pub fn mixture_backup(
    mdp: &FiniteMdp,
    pi_beta: &TabularPolicy,
    pi: &TabularPolicy,
    lambda: f64,
    q: &QTable,
) -> Result<QTable> {
    check_lambda_closed(lambda)?;
    let b = bellman_backup(mdp, pi_beta, q)?;
    let t = bellman_backup(mdp, pi, q)?;
    Ok(table(
        mdp,
        b.values()
            .iter()
            .zip(t.values())
            .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
            .collect(),
    ))
}

/// Trace coefficient family of the expected off-policy return operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceRule {
    /// `c = lambda * min(1, pi / beta)`.
    Retrace,
    /// `c = lambda * pi`.
    TreeBackup,
}

/// Per-pair trace coefficients `c(s, a)`; errors if `pi > 0` where `beta = 0`
/// under the truncated-ratio rule.
pub fn trace_coefficients(
    rule: TraceRule,
    pi_beta: &TabularPolicy,
    pi: &TabularPolicy,
    lambda: f64,
) -> Result<Vec<f64>> {
    let (ns, na) = (pi.num_states(), pi.num_actions());
    let mut c = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            let (p, b) = (pi.prob(s, a), pi_beta.prob(s, a));
            c.push(match rule {
                TraceRule::Retrace => {
                    if b > 0.0 {
                        lambda * (p / b).min(1.0)
                    } else if p > 0.0 {
                        return Err(Error::SupportViolation {
                            state: s,
                            action: a,
                            target: p,
                        });
                    } else {
                        0.0
                    }
                }
                TraceRule::TreeBackup => lambda * p,
            });
        }
    }
    Ok(c)
}

/// Expected trace operator `Q + (I - gamma P^{c beta})^{-1} (T^pi Q - Q)`,
/// where `P^{c beta}` weights next pairs by `beta(a'|s') c(s', a')`.
#[derive(Clone, Debug)]
pub struct TraceOperator {
    lu: Factored,
    pi: TabularPolicy,
}

impl TraceOperator {
    pub fn new(
        mdp: &FiniteMdp,
        rule: TraceRule,
        pi_beta: &TabularPolicy,
        pi: &TabularPolicy,
        lambda: f64,
    ) -> Result<Self> {
        check_lambda_closed(lambda)?;
        mdp.check_policy(pi_beta)?;
        mdp.check_policy(pi)?;
        let c = trace_coefficients(rule, pi_beta, pi, lambda)?;
        let na = mdp.num_actions();
        let m = mdp.pair_chain(|s, a| pi_beta.prob(s, a) * c[s * na + a]);
        let n = mdp.num_pairs();
        let a = nalgebra::DMatrix::<f64>::identity(n, n) - m * mdp.gamma();
        Ok(Self {
            lu: Factored::new(a)?,
            pi: pi.clone(),
        })
    }

    pub fn apply(&self, mdp: &FiniteMdp, q: &QTable) -> Result<QTable> {
        let t = bellman_backup(mdp, &self.pi, q)?;
        let delta: Vec<f64> = t.values().iter().zip(q.values()).map(|(x, y)| x - y).collect();
        let corr = self.lu.solve(&delta)?;
        Ok(table(mdp, q.values().iter().zip(corr).map(|(x, c)| x + c).collect()))
    }

    /// `apply(Q1) - apply(Q2)` computed from `Q1 - Q2` without the reward.
    pub fn linear(&self, mdp: &FiniteMdp, e: &QTable) -> Result<QTable> {
        let next = mdp.expect_next_q(&self.pi, e);
        let delta: Vec<f64> = next
            .iter()
            .zip(e.values())
            .map(|(n, x)| mdp.gamma() * n - x)
            .collect();
        let corr = self.lu.solve(&delta)?;
        Ok(table(mdp, e.values().iter().zip(corr).map(|(x, c)| x + c).collect()))
    }
}

pub fn retrace_backup(
    mdp: &FiniteMdp,
    pi_beta: &TabularPolicy,
    pi: &TabularPolicy,
    lambda: f64,
    q: &QTable,
) -> Result<QTable> {
    TraceOperator::new(mdp, TraceRule::Retrace, pi_beta, pi, lambda)?.apply(mdp, q)
}

pub fn treebackup_backup(
    mdp: &FiniteMdp,
    pi_beta: &TabularPolicy,
    pi: &TabularPolicy,
    lambda: f64,
    q: &QTable,
) -> Result<QTable> {
    TraceOperator::new(mdp, TraceRule::TreeBackup, pi_beta, pi, lambda)?.apply(mdp, q)
}

/// Which backup a [`BackupOperator`] applies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackupKind {
    Bellman {
        pi: TabularPolicy,
    },
    BellmanOptimal,
    Pql {
        pi_beta: TabularPolicy,
        pi: TabularPolicy,
        lambda: f64,
    },
    NStep {
        pi_beta: TabularPolicy,
        pi: TabularPolicy,
        n: usize,
    },
    Retrace {
        pi_beta: TabularPolicy,
        pi: TabularPolicy,
        lambda: f64,
    },
    TreeBackup {
        pi_beta: TabularPolicy,
        pi: TabularPolicy,
        lambda: f64,
    },
    Mixture {
        pi_beta: TabularPolicy,
        pi: TabularPolicy,
        lambda: f64,
    },
}

#[derive(Clone, Debug)]
enum Prepared {
    None,
    Pql(PqlSolver),
    Trace(TraceOperator),
}

/// A backup bound to a model, with any factorization done up front.
#[derive(Clone, Debug)]
pub struct BackupOperator<'a> {
    mdp: &'a FiniteMdp,
    kind: BackupKind,
    prepared: Prepared,
}

impl<'a> BackupOperator<'a> {
    pub fn new(mdp: &'a FiniteMdp, kind: BackupKind) -> Result<Self> {
        let prepared = match &kind {
            BackupKind::Bellman { pi } => {
                mdp.check_policy(pi)?;
                Prepared::None
            }
            BackupKind::BellmanOptimal => Prepared::None,
            BackupKind::Pql { pi_beta, pi, lambda } => {
                mdp.check_policy(pi)?;
                Prepared::Pql(PqlSolver::new(mdp, pi_beta, *lambda)?)
            }
            BackupKind::NStep { pi_beta, pi, n } => {
                mdp.check_policy(pi_beta)?;
                mdp.check_policy(pi)?;
                if *n == 0 {
                    return Err(Error::InvalidParameter("n must be at least 1".into()));
                }
                Prepared::None
            }
            BackupKind::Retrace { pi_beta, pi, lambda } => {
                check_lambda_open(*lambda)?;
                Prepared::Trace(TraceOperator::new(mdp, TraceRule::Retrace, pi_beta, pi, *lambda)?)
            }
            BackupKind::TreeBackup { pi_beta, pi, lambda } => {
                check_lambda_open(*lambda)?;
                Prepared::Trace(TraceOperator::new(mdp, TraceRule::TreeBackup, pi_beta, pi, *lambda)?)
            }
            BackupKind::Mixture { pi_beta, pi, lambda } => {
                check_lambda_closed(*lambda)?;
                mdp.check_policy(pi_beta)?;
                mdp.check_policy(pi)?;
                Prepared::None
            }
        };
        Ok(Self { mdp, kind, prepared })
    }

    pub fn kind(&self) -> &BackupKind {
        &self.kind
    }

    pub fn mdp(&self) -> &FiniteMdp {
        self.mdp
    }

    /// Contraction modulus used by the stopping rule.
    pub fn modulus(&self) -> f64 {
        let g = self.mdp.gamma();
        match &self.kind {
            BackupKind::Pql { lambda, .. } => pql_rate(g, *lambda),
            BackupKind::NStep { n, .. } => libm::pow(g, *n as f64),
            _ => g,
        }
    }

    pub fn apply(&self, q: &QTable) -> Result<QTable> {
        let mdp = self.mdp;
        match (&self.kind, &self.prepared) {
            (BackupKind::Bellman { pi }, _) => bellman_backup(mdp, pi, q),
            (BackupKind::BellmanOptimal, _) => {
                mdp.check_q(q)?;
                Ok(bellman_optimal_backup(mdp, q))
            }
            (BackupKind::Pql { pi, .. }, Prepared::Pql(solver)) => solver.apply(mdp, pi, q),
            (BackupKind::NStep { pi_beta, pi, n }, _) => nstep_backup(mdp, pi_beta, pi, *n, q),
            (BackupKind::Retrace { .. } | BackupKind::TreeBackup { .. }, Prepared::Trace(op)) => {
                mdp.check_q(q)?;
                op.apply(mdp, q)
            }
            (BackupKind::Mixture { pi_beta, pi, lambda }, _) => mixture_backup(mdp, pi_beta, pi, *lambda, q),
            _ => unreachable!("operator prepared at construction"),
        }
    }

    /// The linear part `O(Q1) - O(Q2)` as a function of `e = Q1 - Q2`.
    /// `None` for the non-linear optimality backup.
    pub fn apply_linear(&self, e: &QTable) -> Option<Result<QTable>> {
        let mdp = self.mdp;
        let g = mdp.gamma();
        let bellman_linear = |pi: &TabularPolicy, x: &QTable| {
            let next = mdp.expect_next_q(pi, x);
            table(mdp, next.iter().map(|v| g * v).collect())
        };
        Some(match (&self.kind, &self.prepared) {
            (BackupKind::BellmanOptimal, _) => return None,
            (BackupKind::Bellman { pi }, _) => Ok(bellman_linear(pi, e)),
            (BackupKind::Pql { pi, .. }, Prepared::Pql(solver)) => solver.linear(mdp, pi, e),
            (BackupKind::NStep { pi_beta, pi, n }, _) => {
                let mut x = bellman_linear(pi, e);
                for _ in 1..*n {
                    x = bellman_linear(pi_beta, &x);
                }
                Ok(x)
            }
            (BackupKind::Retrace { .. } | BackupKind::TreeBackup { .. }, Prepared::Trace(op)) => op.linear(mdp, e),
            (BackupKind::Mixture { pi_beta, pi, lambda }, _) => {
                let b = bellman_linear(pi_beta, e);
                let t = bellman_linear(pi, e);
                Ok(table(
                    mdp,
                    b.values()
                        .iter()
                        .zip(t.values())
                        .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
                        .collect(),
                ))
            }
            _ => unreachable!("operator prepared at construction"),
        })
    }
}

/// Iterates of a fixed-point run and their distances to the final point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPointTrace {
    /// The last iterate with one extra application.
    pub q_final: QTable,
    /// `||Q_k - q_final||_inf` for `k = 0..=iterations`.
    pub errors: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub modulus: f64,
}

/// Iterates `Q_{k+1} = O Q_k` until `||Q_{k+1} - Q_k|| <= tol (1 - m) / m`
/// (so that `||Q_{k+1} - Q_fp|| <= tol`) or `max_iter` steps. The step
/// threshold never drops below the rounding floor of the iterate.
pub fn solve_fixed_point(op: &BackupOperator<'_>, q0: &QTable, tol: f64, max_iter: usize) -> Result<FixedPointTrace> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance {tol} must be positive")));
    }
    op.mdp().check_q(q0)?;
    let m = op.modulus();
    let threshold = if m > 0.0 { tol * (1.0 - m) / m } else { f64::INFINITY };
    let mut iterates = Vec::with_capacity(64);
    iterates.push(q0.clone());
    let mut converged = false;
    for _ in 0..max_iter {
        let next = op.apply(iterates.last().expect("non-empty"))?;
        let step = next.sup_dist(iterates.last().expect("non-empty"));
        let floor = rounding_floor(next.sup_norm());
        iterates.push(next);
        if step <= threshold.max(floor) {
            converged = true;
            break;
        }
    }
    let q_final = op.apply(iterates.last().expect("non-empty"))?;
    let errors = iterates.iter().map(|q| q.sup_dist(&q_final)).collect();
    Ok(FixedPointTrace {
        q_final,
        errors,
        iterations: iterates.len() - 1,
        converged,
        modulus: m,
    })
}

/// Smallest step distinguishable from rounding noise for iterates of size `norm`.
pub fn rounding_floor(norm: f64) -> f64 {
    16.0 * f64::EPSILON * (1.0 + norm)
}

/// Error sequence `||L^k e_0||_inf` of the operator's linear part, which equals
/// `||Q_k - Q_fp||` in exact arithmetic for `e_0 = q0 - Q_fp`.
pub fn propagate_error(op: &BackupOperator<'_>, e0: &QTable, steps: usize) -> Result<Vec<f64>> {
    let mut e = e0.clone();
    let mut out = Vec::with_capacity(steps + 1);
    out.push(sup_norm(e.values()));
    for _ in 0..steps {
        e = match op.apply_linear(&e) {
            Some(r) => r?,
            None => return Err(Error::InvalidParameter("optimality backup has no linear part".into())),
        };
        out.push(sup_norm(e.values()));
    }
    Ok(out)
}
