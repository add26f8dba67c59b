//! Seeded benchmark MDPs, dataset recipes and score normalization.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{collect_trajectories, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::mdp::{
    expected_return, two_state_toggle, value_iteration, FiniteMdp, QTable, TabularPolicy,
};
use crate::seed::{rng_from_seed, split_seed, WorkRng};

pub const DEFAULT_GAMMA: f64 = 0.99;

/// Chain actions.
pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;

/// Gridworld actions.
pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const WEST: usize = 2;
pub const EAST: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvKind {
    Chain {
        len: usize,
        slip: f64,
    },
    Gridworld {
        width: usize,
        height: usize,
        goal: usize,
        slip: f64,
        step_cost: f64,
    },
    Random {
        num_states: usize,
        num_actions: usize,
        branching: usize,
        reward_sparsity: f64,
    },
    TwoStateToggle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub kind: EnvKind,
    #[serde(default)]
    pub seed: u64,
    /// Discount; generated MDPs default to 0.99, the toggle fixture keeps 0.5.
    #[serde(default)]
    pub gamma: Option<f64>,
}

impl EnvSpec {
    pub fn new(kind: EnvKind, seed: u64) -> Self {
        Self {
            kind,
            seed,
            gamma: None,
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = Some(gamma);
        self
    }
}

fn check_slip(slip: f64) -> Result<()> {
    if !(0.0..1.0).contains(&slip) {
        return Err(Error::InvalidParameter(format!("slip {slip} outside [0, 1)")));
    }
    Ok(())
}

pub fn make_env(spec: &EnvSpec) -> Result<FiniteMdp> {
    let gamma = spec.gamma.unwrap_or(DEFAULT_GAMMA);
    match spec.kind {
        EnvKind::Chain { len, slip } => chain(len, slip, gamma),
        EnvKind::Gridworld {
            width,
            height,
            goal,
            slip,
            step_cost,
        } => gridworld(width, height, goal, slip, step_cost, gamma),
        EnvKind::Random {
            num_states,
            num_actions,
            branching,
            reward_sparsity,
        } => random_mdp(num_states, num_actions, branching, reward_sparsity, gamma, spec.seed),
        EnvKind::TwoStateToggle => match spec.gamma {
            Some(g) => two_state_toggle().with_gamma(g),
            None => Ok(two_state_toggle()),
        },
    }
}

/// States `0..len`; `RIGHT` moves up, `LEFT` moves down, a slip reverses the
/// move, walls hold the agent in place. `r(len-1, RIGHT) = 1`, `d0 = delta(0)`.
pub fn chain(len: usize, slip: f64, gamma: f64) -> Result<FiniteMdp> {
    if len < 2 {
        return Err(Error::InvalidParameter(format!("chain length {len} must be at least 2")));
    }
    check_slip(slip)?;
    let (ns, na) = (len, 2);
    let mut p = vec![0.0; ns * na * ns];
    let mut r = vec![0.0; ns * na];
    let step = |s: usize, right: bool| if right { (s + 1).min(len - 1) } else { s.saturating_sub(1) };
    for s in 0..ns {
        for a in 0..na {
            let right = a == RIGHT;
            let row = &mut p[(s * na + a) * ns..(s * na + a + 1) * ns];
            row[step(s, right)] += 1.0 - slip;
            row[step(s, !right)] += slip;
        }
    }
    r[(len - 1) * na + RIGHT] = 1.0;
    let mut d0 = vec![0.0; ns];
    d0[0] = 1.0;
    FiniteMdp::new(ns, na, gamma, 1.0, d0, r, p)
}

/// Row-major grid; a slip replaces the chosen move with a uniformly random
/// direction. The goal cell is absorbing with reward 1 under every action,
/// every other pair costs `step_cost`. Starts uniformly over non-goal cells.
pub fn gridworld(
    width: usize,
    height: usize,
    goal: usize,
    slip: f64,
    step_cost: f64,
    gamma: f64,
) -> Result<FiniteMdp> {
    let ns = width * height;
    if width == 0 || height == 0 || ns < 2 {
        return Err(Error::InvalidParameter(format!("grid {width}x{height} needs at least two cells")));
    }
    if goal >= ns {
        return Err(Error::InvalidParameter(format!("goal {goal} outside grid of {ns} cells")));
    }
    check_slip(slip)?;
    if !step_cost.is_finite() || step_cost < 0.0 {
        return Err(Error::InvalidParameter(format!("step_cost {step_cost} must be non-negative")));
    }
    let na = 4;
    let moved = |s: usize, a: usize| {
        let (x, y) = (s % width, s / width);
        match a {
            UP if y > 0 => s - width,
            DOWN if y + 1 < height => s + width,
            WEST if x > 0 => s - 1,
            EAST if x + 1 < width => s + 1,
            _ => s,
        }
    };
    let mut p = vec![0.0; ns * na * ns];
    let mut r = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let pair = s * na + a;
            let row = &mut p[pair * ns..(pair + 1) * ns];
            if s == goal {
                row[s] = 1.0;
                r[pair] = 1.0;
                continue;
            }
            row[moved(s, a)] += 1.0 - slip;
            for d in 0..na {
                row[moved(s, d)] += slip / na as f64;
            }
            r[pair] = -step_cost;
        }
    }
    let start = 1.0 / (ns - 1) as f64;
    let d0 = (0..ns).map(|s| if s == goal { 0.0 } else { start }).collect();
    FiniteMdp::new(ns, na, gamma, step_cost.max(1.0), d0, r, p)
}

/// Dirichlet(1, ..., 1) sample via normalized exponentials.
fn flat_dirichlet(rng: &mut WorkRng, k: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..k)
        .map(|_| -libm::log(1.0 - rng.random::<f64>()))
        .collect();
    let total: f64 = w.iter().sum();
    for x in w.iter_mut() {
        *x /= total;
    }
    w
}

/// Each pair gets `branching` distinct successors with flat-Dirichlet weights;
/// a reward is nonzero with probability `1 - reward_sparsity`, drawn from
/// `U[0, 1)`. `d0` is uniform.
pub fn random_mdp(
    num_states: usize,
    num_actions: usize,
    branching: usize,
    reward_sparsity: f64,
    gamma: f64,
    seed: u64,
) -> Result<FiniteMdp> {
    if num_states == 0 || num_actions == 0 {
        return Err(Error::InvalidParameter("random MDP needs S >= 1 and A >= 1".into()));
    }
    if branching == 0 || branching > num_states {
        return Err(Error::InvalidParameter(format!(
            "branching {branching} must be in 1..={num_states}"
        )));
    }
    if !(0.0..=1.0).contains(&reward_sparsity) {
        return Err(Error::InvalidParameter(format!(
            "reward_sparsity {reward_sparsity} outside [0, 1]"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let (ns, na) = (num_states, num_actions);
    let mut p = vec![0.0; ns * na * ns];
    let mut r = vec![0.0; ns * na];
    for pair in 0..ns * na {
        let succ = rand::seq::index::sample(&mut rng, ns, branching);
        let w = flat_dirichlet(&mut rng, branching);
        // Renormalize after placement so the row sums to 1 to the last ulp.
        let row = &mut p[pair * ns..(pair + 1) * ns];
        for (sp, wi) in succ.iter().zip(w) {
            row[sp] = wi;
        }
        let total: f64 = row.iter().sum();
        for x in row.iter_mut() {
            *x /= total;
        }
        if rng.random::<f64>() >= reward_sparsity {
            r[pair] = rng.random::<f64>();
        }
    }
    let d0 = vec![1.0 / ns as f64; ns];
    FiniteMdp::new(ns, na, gamma, 1.0, d0, r, p)
}

/// Random policy with flat-Dirichlet rows (full support almost surely).
pub fn random_policy(num_states: usize, num_actions: usize, seed: u64) -> TabularPolicy {
    let mut rng = rng_from_seed(seed);
    let probs: Vec<f64> = (0..num_states)
        .flat_map(|_| flat_dirichlet(&mut rng, num_actions))
        .collect();
    TabularPolicy::new(num_states, num_actions, probs).expect("dirichlet rows are distributions")
}

/// Random deterministic policy.
pub fn random_deterministic_policy(num_states: usize, num_actions: usize, seed: u64) -> TabularPolicy {
    let mut rng = rng_from_seed(seed);
    let actions: Vec<usize> = (0..num_states).map(|_| rng.random_range(0..num_actions)).collect();
    TabularPolicy::deterministic(num_actions, &actions).expect("actions in range")
}

/// Row-wise softmax of `q / temperature`.
pub fn softmax_policy(q: &QTable, temperature: f64) -> TabularPolicy {
    let (ns, na) = (q.num_states(), q.num_actions());
    let mut probs = Vec::with_capacity(ns * na);
    for s in 0..ns {
        let row = q.row(s);
        let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| libm::exp((v - top) / temperature)).collect();
        let total: f64 = e.iter().sum();
        probs.extend(e.iter().map(|x| x / total));
    }
    TabularPolicy::new(ns, na, probs).expect("softmax rows are distributions")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Quality {
    Random,
    Medium,
    Expert,
    /// Episode shares of random, medium and expert data.
    Mixed { ratios: [f64; 3] },
}

/// Softmax temperature used when medium calibration cannot bracket the target.
pub const MEDIUM_FALLBACK_TEMPERATURE: f64 = 0.1;

/// Behavior policies of the three pure qualities plus the calibration outcome.
#[derive(Clone, Debug)]
pub struct RecipePolicies {
    pub random: TabularPolicy,
    pub medium: TabularPolicy,
    pub expert: TabularPolicy,
    pub medium_temperature: f64,
    pub medium_calibrated: bool,
}

/// Builds the uniform, calibrated-softmax and greedy-optimal behavior policies.
pub fn recipe_policies(mdp: &FiniteMdp) -> Result<RecipePolicies> {
    let (q_star, expert) = value_iteration(mdp, 1e-10, 1_000_000)?;
    let random = TabularPolicy::uniform(mdp.num_states(), mdp.num_actions());
    let j_expert = expected_return(mdp, &expert)?;
    let j_random = expected_return(mdp, &random)?;
    let target = 0.5 * (j_expert + j_random);
    let band = 0.1 * (j_expert - j_random).abs();
    let j_at = |t: f64| expected_return(mdp, &softmax_policy(&q_star, t));

    let mut calibrated = false;
    let mut temperature = MEDIUM_FALLBACK_TEMPERATURE;
    if band > 0.0 {
        // Return falls as temperature rises; bisect in log-space.
        let (mut lo, mut hi) = (1e-6_f64, 1e6_f64);
        let (j_lo, j_hi) = (j_at(lo)?, j_at(hi)?);
        if j_lo >= target && j_hi <= target {
            for _ in 0..200 {
                let mid = libm::sqrt(lo * hi);
                let j = j_at(mid)?;
                if (j - target).abs() <= band {
                    temperature = mid;
                    calibrated = true;
                    break;
                }
                if j > target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }
    }
    let medium = softmax_policy(&q_star, temperature);
    Ok(RecipePolicies {
        random,
        medium,
        expert,
        medium_temperature: temperature,
        medium_calibrated: calibrated,
    })
}

/// Splits `total` into integer counts proportional to `ratios` by largest remainder.
pub fn split_counts(total: usize, ratios: &[f64]) -> Result<Vec<usize>> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::InvalidParameter("mixture ratios must be non-negative".into()));
    }
    let sum: f64 = ratios.iter().sum();
    if sum <= 0.0 {
        return Err(Error::InvalidParameter("mixture ratios sum to zero".into()));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| total as f64 * r / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| libm::floor(*x) as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&i, &j| {
        let fi = exact[i] - counts[i] as f64;
        let fj = exact[j] - counts[j] as f64;
        fj.partial_cmp(&fi).unwrap_or(core::cmp::Ordering::Equal).then(i.cmp(&j))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    Ok(counts)
}

/// Collects `episodes` episodes of length `horizon` with the behavior policy of
/// the requested quality. Mixed datasets concatenate random, medium and expert
/// episodes in that order.
pub fn dataset_recipe(
    mdp: &FiniteMdp,
    quality: &Quality,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<TrajectoryDataset> {
    let policies = recipe_policies(mdp)?;
    match quality {
        Quality::Random => collect_trajectories(mdp, &policies.random, episodes, horizon, seed),
        Quality::Medium => collect_trajectories(mdp, &policies.medium, episodes, horizon, seed),
        Quality::Expert => collect_trajectories(mdp, &policies.expert, episodes, horizon, seed),
        Quality::Mixed { ratios } => {
            let counts = split_counts(episodes, ratios)?;
            let parts = [&policies.random, &policies.medium, &policies.expert];
            let mut all = Vec::with_capacity(episodes);
            for (i, (pi, n)) in parts.iter().zip(counts).enumerate() {
                if n == 0 {
                    continue;
                }
                let part = collect_trajectories(mdp, pi, n, horizon, split_seed(seed, i as u64))?;
                all.extend(part.episodes);
            }
            TrajectoryDataset::from_episodes(mdp.num_states(), mdp.num_actions(), all)
        }
    }
}

/// Reference returns for score normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRef {
    pub ref_min: f64,
    pub ref_max: f64,
}

impl ScoreRef {
    pub fn new(ref_min: f64, ref_max: f64) -> Result<Self> {
        if !(ref_max > ref_min) || !ref_min.is_finite() || !ref_max.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "score reference needs ref_max > ref_min, got ({ref_min}, {ref_max})"
            )));
        }
        Ok(Self { ref_min, ref_max })
    }
}

/// Hopper random and expert returns.
pub const HOPPER_REF: ScoreRef = ScoreRef {
    ref_min: -20.27,
    ref_max: 3234.3,
};

/// `100 * (raw - ref_min) / (ref_max - ref_min)`.
pub fn normalized_score(raw_return: f64, score_ref: ScoreRef) -> f64 {
    100.0 * (raw_return - score_ref.ref_min) / (score_ref.ref_max - score_ref.ref_min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{STAY, TOGGLE};

    #[test]
    fn toggle_spec_is_the_fixture() {
        let spec = EnvSpec::new(EnvKind::TwoStateToggle, 3);
        assert_eq!(make_env(&spec).unwrap(), two_state_toggle());
    }

    #[test]
    fn short_chain_matches_toggle_under_action_swap() {
        let c = chain(2, 0.0, 0.5).unwrap();
        let t = two_state_toggle();
        // At s0 LEFT is stay; at s1 RIGHT is stay.
        let map = [[STAY, TOGGLE], [TOGGLE, STAY]];
        for s in 0..2 {
            for a in 0..2 {
                let ta = map[s][a];
                assert_eq!(c.reward(s, a), t.reward(s, ta));
                assert_eq!(c.next_dist(s, a), t.next_dist(s, ta));
            }
        }
        assert_eq!(c.d0(), t.d0());
    }

    #[test]
    fn random_mdp_is_deterministic() {
        let spec = EnvSpec::new(
            EnvKind::Random {
                num_states: 8,
                num_actions: 3,
                branching: 3,
                reward_sparsity: 0.5,
            },
            7,
        );
        let a = make_env(&spec).unwrap();
        assert_eq!(a, make_env(&spec).unwrap());
        for s in 0..8 {
            for act in 0..3 {
                assert_eq!(a.next_dist(s, act).iter().filter(|p| **p > 0.0).count(), 3);
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(chain(1, 0.0, 0.9).is_err());
        assert!(chain(4, 1.0, 0.9).is_err());
        assert!(gridworld(3, 3, 9, 0.0, 0.0, 0.9).is_err());
        assert!(random_mdp(4, 2, 5, 0.0, 0.9, 1).is_err());
        assert!(ScoreRef::new(1.0, 1.0).is_err());
    }

    #[test]
    fn gridworld_goal_is_absorbing() {
        let g = gridworld(3, 2, 5, 0.2, 0.01, 0.9).unwrap();
        for a in 0..4 {
            assert_eq!(g.next_dist(5, a)[5], 1.0);
            assert_eq!(g.reward(5, a), 1.0);
        }
        assert!((g.reward(0, UP) + 0.01).abs() < 1e-15);
        assert_eq!(g.d0()[5], 0.0);
    }

    #[test]
    fn expert_on_toggle_toggles_then_stays() {
        let mdp = two_state_toggle();
        let ds = dataset_recipe(&mdp, &Quality::Expert, 5, 4, 1).unwrap();
        for ep in &ds.episodes {
            assert_eq!(ep.actions, vec![TOGGLE, STAY, STAY, STAY]);
        }
    }

    #[test]
    fn mixed_counts_follow_ratios_exactly() {
        assert_eq!(split_counts(10, &[5.0, 3.0, 2.0]).unwrap(), vec![5, 3, 2]);
        assert_eq!(split_counts(7, &[1.0, 1.0, 1.0]).unwrap(), vec![3, 2, 2]);
        let mdp = chain(5, 0.1, 0.9).unwrap();
        let ds = dataset_recipe(&mdp, &Quality::Mixed { ratios: [0.5, 0.3, 0.2] }, 20, 6, 4).unwrap();
        assert_eq!(ds.episodes.len(), 20);
    }

    #[test]
    fn quality_ordering_on_chain() {
        let mdp = chain(6, 0.1, 0.9).unwrap();
        let p = recipe_policies(&mdp).unwrap();
        let je = expected_return(&mdp, &p.expert).unwrap();
        let jm = expected_return(&mdp, &p.medium).unwrap();
        let jr = expected_return(&mdp, &p.random).unwrap();
        assert!(je >= jm - 1e-9 && jm >= jr - 1e-9);
        assert!(p.medium_calibrated);
        assert!((jm - 0.5 * (je + jr)).abs() <= 0.1 * (je - jr));
    }

    #[test]
    fn hopper_scores() {
        assert!((normalized_score(HOPPER_REF.ref_max, HOPPER_REF) - 100.0).abs() < 1e-12);
        assert!(normalized_score(HOPPER_REF.ref_min, HOPPER_REF).abs() < 1e-12);
        assert!((normalized_score(1600.0, HOPPER_REF) - 49.7844).abs() < 1e-4);
    }
}
