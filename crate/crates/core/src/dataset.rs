//! Offline trajectory datasets, empirical models and segment sampling.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{FiniteMdp, TabularPolicy};
use crate::seed::{rng_from_seed, WorkRng};

/// One episode: `states` has one more entry than `actions` (the final state).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn validate(&self, index: usize, num_states: usize, num_actions: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDataset(format!("episode {index}: {m}")));
        if self.actions.is_empty() {
            return bad("no steps".into());
        }
        if self.states.len() != self.actions.len() + 1 || self.rewards.len() != self.actions.len() {
            return bad(format!(
                "{} states, {} actions, {} rewards (need n+1, n, n)",
                self.states.len(),
                self.actions.len(),
                self.rewards.len()
            ));
        }
        if let Some(s) = self.states.iter().find(|s| **s >= num_states) {
            return bad(format!("state {s} out of range 0..{num_states}"));
        }
        if let Some(a) = self.actions.iter().find(|a| **a >= num_actions) {
            return bad(format!("action {a} out of range 0..{num_actions}"));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return bad("non-finite reward".into());
        }
        Ok(())
    }
}

/// Provenance of a collected dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub mdp_sha256: String,
    pub policy_sha256: String,
    pub seed: u64,
    pub horizon: usize,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDataset {
    pub num_states: usize,
    pub num_actions: usize,
    pub episodes: Vec<Episode>,
    pub meta: Option<DatasetMeta>,
}

impl TrajectoryDataset {
    /// Validates indices and shapes. An empty episode list is allowed here and
    /// rejected by consumers.
    pub fn from_episodes(num_states: usize, num_actions: usize, episodes: Vec<Episode>) -> Result<Self> {
        for (i, ep) in episodes.iter().enumerate() {
            ep.validate(i, num_states, num_actions)?;
        }
        Ok(Self {
            num_states,
            num_actions,
            episodes,
            meta: None,
        })
    }

    pub fn with_meta(mut self, meta: DatasetMeta) -> Self {
        self.meta = Some(meta);
        self
    }

    pub fn num_steps(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.episodes
            .iter()
            .flat_map(|e| e.rewards.iter())
            .fold(0.0_f64, |m, r| m.max(r.abs()))
    }
}

/// Inverse-CDF draw from a probability row.
pub fn sample_index(rng: &mut WorkRng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Rolls out one episode of `horizon` steps from a state drawn from `d0`.
pub fn rollout(mdp: &FiniteMdp, pi: &TabularPolicy, horizon: usize, rng: &mut WorkRng) -> Episode {
    let mut s = sample_index(rng, mdp.d0());
    let mut ep = Episode {
        states: Vec::with_capacity(horizon + 1),
        actions: Vec::with_capacity(horizon),
        rewards: Vec::with_capacity(horizon),
    };
    for _ in 0..horizon {
        let a = sample_index(rng, pi.row(s));
        ep.states.push(s);
        ep.actions.push(a);
        ep.rewards.push(mdp.reward(s, a));
        s = sample_index(rng, mdp.next_dist(s, a));
    }
    ep.states.push(s);
    ep
}

pub fn collect_trajectories(
    mdp: &FiniteMdp,
    pi_beta: &TabularPolicy,
    num_episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<TrajectoryDataset> {
    if horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be at least 1".into()));
    }
    if pi_beta.num_states() != mdp.num_states() || pi_beta.num_actions() != mdp.num_actions() {
        return Err(Error::ShapeMismatch("behavior policy does not match the MDP".into()));
    }
    let mut rng = rng_from_seed(seed);
    let episodes = (0..num_episodes)
        .map(|_| rollout(mdp, pi_beta, horizon, &mut rng))
        .collect();
    Ok(TrajectoryDataset {
        num_states: mdp.num_states(),
        num_actions: mdp.num_actions(),
        episodes,
        meta: Some(DatasetMeta {
            mdp_sha256: String::new(),
            policy_sha256: String::new(),
            seed,
            horizon,
            gamma: mdp.gamma(),
        }),
    })
}

/// Maximum-likelihood model of a dataset.
///
/// Unobserved pairs are completed as zero-reward self-loops and unobserved
/// states get a uniform behavior row, so [`EmpiricalModel::mdp`] is always a
/// valid MDP. Checks quantified over the data use [`EmpiricalModel::is_observed_state`]
/// and [`EmpiricalModel::is_observed_pair`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalModel {
    counts: Vec<u64>,
    state_counts: Vec<u64>,
    pi_beta_hat: TabularPolicy,
    mdp: FiniteMdp,
}

impl EmpiricalModel {
    /// Builds the model from raw counts. `next_counts[(s*A+a)*S + s']` and
    /// `reward_sums[s*A+a]`; `start_counts[s]` counts episode starts.
    pub fn from_counts(
        num_states: usize,
        num_actions: usize,
        gamma: f64,
        r_max: f64,
        next_counts: &[u64],
        reward_sums: &[f64],
        start_counts: &[u64],
    ) -> Result<Self> {
        let (ns, na) = (num_states, num_actions);
        if next_counts.len() != ns * na * ns || reward_sums.len() != ns * na || start_counts.len() != ns {
            return Err(Error::ShapeMismatch("count arrays do not match S and A".into()));
        }
        let counts: Vec<u64> = next_counts.chunks(ns).map(|row| row.iter().sum()).collect();
        let state_counts: Vec<u64> = counts.chunks(na).map(|row| row.iter().sum()).collect();
        let starts: u64 = start_counts.iter().sum();
        if starts == 0 || state_counts.iter().all(|c| *c == 0) {
            return Err(Error::EmptyDataset);
        }

        let mut pi = Vec::with_capacity(ns * na);
        for s in 0..ns {
            let n_s = state_counts[s];
            for a in 0..na {
                pi.push(if n_s == 0 {
                    1.0 / na as f64
                } else {
                    counts[s * na + a] as f64 / n_s as f64
                });
            }
        }
        let mut p = vec![0.0; ns * na * ns];
        let mut r = vec![0.0; ns * na];
        let mut r_bound = r_max;
        for pair in 0..ns * na {
            let n = counts[pair];
            let row = &mut p[pair * ns..(pair + 1) * ns];
            if n == 0 {
                row[pair / na] = 1.0;
                continue;
            }
            for (x, c) in row.iter_mut().zip(&next_counts[pair * ns..(pair + 1) * ns]) {
                *x = *c as f64 / n as f64;
            }
            r[pair] = reward_sums[pair] / n as f64;
            r_bound = r_bound.max(r[pair].abs());
        }
        let d0 = start_counts.iter().map(|c| *c as f64 / starts as f64).collect();
        let mdp = FiniteMdp::new(ns, na, gamma, r_bound, d0, r, p)?;
        Ok(Self {
            counts,
            state_counts,
            pi_beta_hat: TabularPolicy::new(ns, na, pi)?,
            mdp,
        })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, s: usize, a: usize) -> u64 {
        self.counts[s * self.mdp.num_actions() + a]
    }

    pub fn state_count(&self, s: usize) -> u64 {
        self.state_counts[s]
    }

    pub fn pi_beta_hat(&self) -> &TabularPolicy {
        &self.pi_beta_hat
    }

    /// The completed empirical MDP.
    pub fn mdp(&self) -> &FiniteMdp {
        &self.mdp
    }

    pub fn is_observed_state(&self, s: usize) -> bool {
        self.state_counts[s] > 0
    }

    pub fn is_observed_pair(&self, s: usize, a: usize) -> bool {
        self.count(s, a) > 0
    }

    pub fn observed_states(&self) -> Vec<usize> {
        (0..self.mdp.num_states()).filter(|s| self.is_observed_state(*s)).collect()
    }
}

/// Counts every step of `ds`. `r_max` is raised to the largest observed
/// `|reward|` if needed.
pub fn build_empirical_model(ds: &TrajectoryDataset, gamma: f64, r_max: f64) -> Result<EmpiricalModel> {
    if ds.is_empty() || ds.num_steps() == 0 {
        return Err(Error::EmptyDataset);
    }
    let (ns, na) = (ds.num_states, ds.num_actions);
    let mut next = vec![0u64; ns * na * ns];
    let mut rsum = vec![0.0; ns * na];
    let mut starts = vec![0u64; ns];
    for (i, ep) in ds.episodes.iter().enumerate() {
        ep.validate(i, ns, na)?;
        starts[ep.states[0]] += 1;
        for t in 0..ep.len() {
            let pair = ep.states[t] * na + ep.actions[t];
            next[pair * ns + ep.states[t + 1]] += 1;
            rsum[pair] += ep.rewards[t];
        }
    }
    EmpiricalModel::from_counts(ns, na, gamma, r_max.max(ds.max_abs_reward()), &next, &rsum, &starts)
}

/// A contiguous slice of one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Shorter than requested because the episode ended.
    pub truncated: bool,
    pub episode: usize,
    pub start: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Precomputed valid start positions for length-`n` segments.
#[derive(Clone, Debug)]
pub struct SegmentSampler {
    n: usize,
    positions: Vec<(usize, usize, usize)>,
}

impl SegmentSampler {
    /// Full-length starts in every episode of length `>= n`; with
    /// `allow_truncated`, shorter episodes contribute one whole-episode segment.
    pub fn new(ds: &TrajectoryDataset, n: usize, allow_truncated: bool) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("segment length must be at least 1".into()));
        }
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut positions = Vec::new();
        for (e, ep) in ds.episodes.iter().enumerate() {
            if ep.len() >= n {
                positions.extend((0..=ep.len() - n).map(|start| (e, start, n)));
            } else if allow_truncated && !ep.is_empty() {
                positions.push((e, 0, ep.len()));
            }
        }
        if positions.is_empty() {
            return Err(Error::NoSegments(n));
        }
        Ok(Self { n, positions })
    }

    pub fn num_positions(&self) -> usize {
        self.positions.len()
    }

    pub fn sample(&self, ds: &TrajectoryDataset, rng: &mut WorkRng) -> Segment {
        let (e, start, len) = self.positions[rng.random_range(0..self.positions.len())];
        let ep = &ds.episodes[e];
        Segment {
            states: ep.states[start..=start + len].to_vec(),
            actions: ep.actions[start..start + len].to_vec(),
            rewards: ep.rewards[start..start + len].to_vec(),
            truncated: len < self.n,
            episode: e,
            start,
        }
    }

    pub fn sample_batch(&self, ds: &TrajectoryDataset, batch: usize, rng: &mut WorkRng) -> Vec<Segment> {
        (0..batch).map(|_| self.sample(ds, rng)).collect()
    }
}

/// Draws `batch` segments of length `n`; short episodes give truncated
/// segments when `allow_truncated`.
pub fn sample_segments(
    ds: &TrajectoryDataset,
    n: usize,
    batch: usize,
    seed: u64,
    allow_truncated: bool,
) -> Result<Vec<Segment>> {
    let sampler = SegmentSampler::new(ds, n, allow_truncated)?;
    let mut rng = rng_from_seed(seed);
    Ok(sampler.sample_batch(ds, batch, &mut rng))
}
