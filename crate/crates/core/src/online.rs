//! Offline pretraining followed by online fine-tuning without the penalty.
//!
//! The online phase acts in the true MDP with an exploration wrapper over the
//! current greedy policy, keeps a bounded replay of whole episodes and updates
//! the same tables with `alpha = 0`.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cpql::{train_learner, CpqlConfig, TabularLearner, TargetKind};
use crate::dataset::{sample_index, Episode, Segment, SegmentSampler, TrajectoryDataset};
use crate::envs::softmax_policy;
use crate::error::{Error, Result};
use crate::mdp::{argmax, expected_return, FiniteMdp, TabularPolicy};
use crate::seed::{rng_from_seed, split_seed, WorkRng};

/// Behavior of the online actor around the greedy action.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Exploration {
    EpsilonGreedy { epsilon: f64 },
    Softmax { temperature: f64 },
}

impl Default for Exploration {
    fn default() -> Self {
        Exploration::EpsilonGreedy { epsilon: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct O2oConfig {
    pub offline: CpqlConfig,
    /// Environment steps of the online phase; one update per step once the
    /// replay holds an episode.
    pub online_steps: usize,
    pub exploration: Exploration,
    /// Replay capacity in episodes; the oldest episode is evicted first.
    pub replay_capacity: usize,
    /// Online segment length.
    pub segment_len: usize,
    /// Online episode length.
    pub horizon: usize,
    /// Evaluate the greedy policy every this many online steps (0 = only at the end).
    pub eval_every: usize,
    /// Seed the replay with the offline episodes.
    pub retain_offline: bool,
    pub seed: u64,
}

impl Default for O2oConfig {
    fn default() -> Self {
        Self {
            offline: CpqlConfig::default(),
            online_steps: 2000,
            exploration: Exploration::default(),
            replay_capacity: 100,
            segment_len: 5,
            horizon: 20,
            eval_every: 100,
            retain_offline: false,
            seed: 0,
        }
    }
}

impl O2oConfig {
    pub fn validate(&self) -> Result<()> {
        self.offline.validate()?;
        let bad = |field: &str, msg: &str| Err(Error::InvalidParameter(format!("{field}: {msg}")));
        match self.exploration {
            Exploration::EpsilonGreedy { epsilon } if !(0.0..=1.0).contains(&epsilon) => {
                return bad("exploration.epsilon", "must lie in [0, 1]");
            }
            Exploration::Softmax { temperature } if !(temperature > 0.0 && temperature.is_finite()) => {
                return bad("exploration.temperature", "must be positive");
            }
            _ => {}
        }
        if self.replay_capacity == 0 {
            return bad("replay_capacity", "must be at least 1");
        }
        if self.segment_len == 0 {
            return bad("segment_len", "must be at least 1");
        }
        if self.horizon == 0 {
            return bad("horizon", "must be at least 1");
        }
        Ok(())
    }

    /// Learner settings of the online phase: no penalty, Peng targets.
    fn online_learner_cfg(&self) -> CpqlConfig {
        CpqlConfig {
            alpha: 0.0,
            segment_len: self.segment_len,
            target: TargetKind::Peng,
            ..self.offline.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Offline,
    Online,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct O2oRecord {
    pub phase: Phase,
    /// Update index within the phase; online step 0 is taken before any online update.
    pub step: usize,
    pub avg_q: f64,
    pub j_eval: Option<f64>,
    pub episodes_completed: usize,
}

/// Where a replay episode came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", content = "index", rename_all = "snake_case")]
pub enum Provenance {
    /// Index into the offline dataset.
    Offline(usize),
    /// Index into the episodes generated online.
    Online(usize),
}

/// Bounded FIFO of tagged episodes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<(Provenance, Episode)>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::new(),
        }
    }

    pub fn push(&mut self, tag: Provenance, ep: Episode) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((tag, ep));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tags(&self) -> Vec<Provenance> {
        self.entries.iter().map(|(t, _)| *t).collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = &(Provenance, Episode)> {
        self.entries.iter()
    }

    /// Every entry equals the episode its tag names.
    pub fn provenance_holds(&self, offline: &TrajectoryDataset, generated: &[Episode]) -> bool {
        self.entries.iter().all(|(tag, ep)| match tag {
            Provenance::Offline(i) => offline.episodes.get(*i) == Some(ep),
            Provenance::Online(i) => generated.get(*i) == Some(ep),
        })
    }

    fn as_dataset(&self, num_states: usize, num_actions: usize) -> TrajectoryDataset {
        TrajectoryDataset {
            num_states,
            num_actions,
            episodes: self.entries.iter().map(|(_, e)| e.clone()).collect(),
            meta: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct O2oTrace {
    pub records: Vec<O2oRecord>,
    /// Index of the first online record.
    pub transition_index: usize,
    /// Greedy-policy return at the end of the run.
    pub final_j_eval: f64,
    /// Episodes completed online, in order.
    pub generated: Vec<Episode>,
    /// Tags of the replay at the end of the run.
    pub replay_tags: Vec<Provenance>,
}

impl O2oTrace {
    pub fn offline(&self) -> &[O2oRecord] {
        &self.records[..self.transition_index]
    }

    pub fn online(&self) -> &[O2oRecord] {
        &self.records[self.transition_index..]
    }
}

/// Fixed probe batch drawn once from the offline data.
pub fn probe_batch(ds: &TrajectoryDataset, cfg: &O2oConfig) -> Result<Vec<Segment>> {
    let sampler = SegmentSampler::new(ds, 1, true)?;
    let mut rng = rng_from_seed(split_seed(cfg.seed, 1));
    Ok(sampler.sample_batch(ds, cfg.offline.batch, &mut rng))
}

fn act(learner: &TabularLearner, exploration: Exploration, s: usize, rng: &mut WorkRng) -> usize {
    let q = learner.combined();
    match exploration {
        Exploration::EpsilonGreedy { epsilon } => {
            if epsilon > 0.0 && rng.random::<f64>() < epsilon {
                rng.random_range(0..q.num_actions())
            } else {
                argmax(q.row(s))
            }
        }
        Exploration::Softmax { temperature } => {
            let pi = softmax_policy(&q, temperature);
            sample_index(rng, pi.row(s))
        }
    }
}

/// The online phase from an existing learner. Record 0 is measured before any
/// update; later records follow each environment step.
pub fn run_online(
    mdp: &FiniteMdp,
    learner: &mut TabularLearner,
    probe: &[Segment],
    replay: &mut ReplayBuffer,
    cfg: &O2oConfig,
) -> Result<(Vec<O2oRecord>, Vec<Episode>)> {
    cfg.validate()?;
    let learn_cfg = cfg.online_learner_cfg();
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    // The penalty is off, so the behavior row only feeds the reported statistic.
    let uniform = TabularPolicy::uniform(ns, na);
    let mut env_rng = rng_from_seed(split_seed(cfg.seed, 2));
    let mut batch_rng = rng_from_seed(split_seed(cfg.seed, 3));
    let eval = |l: &TabularLearner| expected_return(mdp, &l.greedy());

    let mut records = Vec::with_capacity(cfg.online_steps + 1);
    records.push(O2oRecord {
        phase: Phase::Online,
        step: 0,
        avg_q: learner.avg_q(probe),
        j_eval: Some(eval(learner)?),
        episodes_completed: 0,
    });
    let mut generated = Vec::new();
    let mut sampler = None;
    let mut current = Episode {
        states: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
    };
    let mut s = sample_index(&mut env_rng, mdp.d0());
    for step in 1..=cfg.online_steps {
        let a = act(learner, cfg.exploration, s, &mut env_rng);
        current.states.push(s);
        current.actions.push(a);
        current.rewards.push(mdp.reward(s, a));
        s = sample_index(&mut env_rng, mdp.next_dist(s, a));
        if current.actions.len() == cfg.horizon {
            current.states.push(s);
            let ep = core::mem::replace(
                &mut current,
                Episode {
                    states: Vec::new(),
                    actions: Vec::new(),
                    rewards: Vec::new(),
                },
            );
            replay.push(Provenance::Online(generated.len()), ep.clone());
            generated.push(ep);
            s = sample_index(&mut env_rng, mdp.d0());
            sampler = None;
        }
        if sampler.is_none() && !replay.is_empty() {
            let ds = replay.as_dataset(ns, na);
            sampler = Some((SegmentSampler::new(&ds, cfg.segment_len, true)?, ds));
        }
        if let Some((smp, ds)) = &sampler {
            let batch = smp.sample_batch(ds, learn_cfg.batch, &mut batch_rng);
            learner.step(&batch, &uniform, 0.0, &learn_cfg);
        }
        let due = step == cfg.online_steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        records.push(O2oRecord {
            phase: Phase::Online,
            step,
            avg_q: learner.avg_q(probe),
            j_eval: if due { Some(eval(learner)?) } else { None },
            episodes_completed: generated.len(),
        });
    }
    Ok((records, generated))
}

/// Offline training on `ds`, then online fine-tuning in `mdp`.
pub fn run_offline_to_online(mdp: &FiniteMdp, ds: &TrajectoryDataset, cfg: &O2oConfig) -> Result<O2oTrace> {
    cfg.validate()?;
    if ds.num_states != mdp.num_states() || ds.num_actions != mdp.num_actions() {
        return Err(Error::ShapeMismatch("dataset does not match the MDP".into()));
    }
    let probe = probe_batch(ds, cfg)?;
    let offline_cfg = CpqlConfig {
        gamma: mdp.gamma(),
        ..cfg.offline.clone()
    };
    let (mut learner, mut records) = if offline_cfg.iters == 0 {
        (TabularLearner::new(ds.num_states, ds.num_actions, &offline_cfg), Vec::new())
    } else {
        let (trace, learner) = train_learner(ds, &offline_cfg, Some(mdp), Some(&probe))?;
        let records: Vec<O2oRecord> = trace
            .records
            .iter()
            .map(|r| O2oRecord {
                phase: Phase::Offline,
                step: r.iter + 1,
                avg_q: r.avg_q,
                j_eval: r.j_eval,
                episodes_completed: 0,
            })
            .collect();
        (learner, records)
    };
    let transition_index = records.len();

    let mut replay = ReplayBuffer::new(cfg.replay_capacity);
    if cfg.retain_offline {
        for (i, ep) in ds.episodes.iter().enumerate() {
            replay.push(Provenance::Offline(i), ep.clone());
        }
    }
    let online_cfg = O2oConfig {
        offline: offline_cfg,
        ..cfg.clone()
    };
    let (online, generated) = run_online(mdp, &mut learner, &probe, &mut replay, &online_cfg)?;
    records.extend(online);
    Ok(O2oTrace {
        records,
        transition_index,
        final_j_eval: expected_return(mdp, &learner.greedy())?,
        generated,
        replay_tags: replay.tags(),
    })
}

/// The same online budget from freshly initialized tables.
pub fn scratch_config(cfg: &O2oConfig) -> O2oConfig {
    O2oConfig {
        offline: CpqlConfig {
            iters: 0,
            ..cfg.offline.clone()
        },
        ..cfg.clone()
    }
}

/// The arm compared against the configured conservative PQL arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionBaseline {
    /// `lambda = 0` offline, single-step online updates.
    CqlToQlearning,
    /// No offline phase.
    ScratchPql,
}

/// Baseline configuration with the same seeds as `cfg`.
pub fn baseline_config(cfg: &O2oConfig, baseline: TransitionBaseline) -> O2oConfig {
    match baseline {
        TransitionBaseline::CqlToQlearning => O2oConfig {
            offline: CpqlConfig {
                lambda: 0.0,
                ..cfg.offline.clone()
            },
            segment_len: 1,
            ..cfg.clone()
        },
        TransitionBaseline::ScratchPql => scratch_config(cfg),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTrace {
    pub baseline_kind: TransitionBaseline,
    pub cpql: O2oTrace,
    pub baseline: O2oTrace,
}

/// Runs the configured arm and the baseline arm with matched seeds.
pub fn compare_transition_baselines(
    mdp: &FiniteMdp,
    ds: &TrajectoryDataset,
    cfg: &O2oConfig,
    baseline: TransitionBaseline,
) -> Result<PairedTrace> {
    Ok(PairedTrace {
        baseline_kind: baseline,
        cpql: run_offline_to_online(mdp, ds, cfg)?,
        baseline: run_offline_to_online(mdp, ds, &baseline_config(cfg, baseline))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpql::Improvement;
    use alloc::vec;
    use crate::dataset::collect_trajectories;
    use crate::envs::{chain, dataset_recipe, Quality};
    use crate::mdp::{policy_evaluation_exact, two_state_toggle, QTable, STAY, TOGGLE};

    fn small_cfg() -> O2oConfig {
        O2oConfig {
            offline: CpqlConfig {
                iters: 60,
                batch: 16,
                eval_every: 20,
                gamma: 0.9,
                ..CpqlConfig::default()
            },
            online_steps: 80,
            horizon: 10,
            replay_capacity: 3,
            eval_every: 20,
            seed: 4,
            ..O2oConfig::default()
        }
    }

    fn chain_data() -> (FiniteMdp, TrajectoryDataset) {
        let mdp = chain(5, 0.1, 0.9).unwrap();
        let ds = dataset_recipe(&mdp, &Quality::Medium, 20, 10, 3).unwrap();
        (mdp, ds)
    }

    #[test]
    fn carry_over_is_exact() {
        let (mdp, ds) = chain_data();
        let t = run_offline_to_online(&mdp, &ds, &small_cfg()).unwrap();
        assert_eq!(t.transition_index, 60);
        assert_eq!(t.online()[0].avg_q, t.offline()[59].avg_q);
        assert_eq!(t.online().len(), 81);
        assert!(t.online().iter().all(|r| r.phase == Phase::Online));
    }

    #[test]
    fn zero_online_steps_is_offline_trace() {
        let (mdp, ds) = chain_data();
        let cfg = O2oConfig {
            online_steps: 0,
            ..small_cfg()
        };
        let t = run_offline_to_online(&mdp, &ds, &cfg).unwrap();
        let probe = probe_batch(&ds, &cfg).unwrap();
        let offline = CpqlConfig { gamma: 0.9, ..cfg.offline.clone() };
        let (trace, _) = train_learner(&ds, &offline, Some(&mdp), Some(&probe)).unwrap();
        assert_eq!(t.offline().len(), trace.records.len());
        for (a, b) in t.offline().iter().zip(&trace.records) {
            assert_eq!((a.avg_q, a.j_eval), (b.avg_q, b.j_eval));
        }
        assert_eq!(t.online().len(), 1);
    }

    #[test]
    fn replay_is_bounded_and_tagged() {
        let (mdp, ds) = chain_data();
        let t = run_offline_to_online(&mdp, &ds, &small_cfg()).unwrap();
        assert_eq!(t.generated.len(), 8);
        assert_eq!(t.replay_tags, vec![Provenance::Online(5), Provenance::Online(6), Provenance::Online(7)]);
        let cfg = O2oConfig {
            retain_offline: true,
            replay_capacity: 100,
            ..small_cfg()
        };
        let t = run_offline_to_online(&mdp, &ds, &cfg).unwrap();
        assert_eq!(t.replay_tags.len(), 28);
        assert_eq!(t.replay_tags[0], Provenance::Offline(0));
    }

    #[test]
    fn provenance_check_detects_foreign_episodes() {
        let (_, ds) = chain_data();
        let mut replay = ReplayBuffer::new(10);
        replay.push(Provenance::Offline(1), ds.episodes[1].clone());
        assert!(replay.provenance_holds(&ds, &[]));
        replay.push(Provenance::Offline(2), ds.episodes[3].clone());
        assert!(!replay.provenance_holds(&ds, &[]));
    }

    #[test]
    fn runs_are_deterministic() {
        let (mdp, ds) = chain_data();
        let cfg = small_cfg();
        let a = compare_transition_baselines(&mdp, &ds, &cfg, TransitionBaseline::CqlToQlearning).unwrap();
        let b = compare_transition_baselines(&mdp, &ds, &cfg, TransitionBaseline::CqlToQlearning).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.cpql.records, a.baseline.records);
    }

    #[test]
    fn fixed_point_tables_stay_put_online() {
        let mdp = two_state_toggle();
        let pi = TabularPolicy::deterministic(2, &[TOGGLE, STAY]).unwrap();
        let q = policy_evaluation_exact(&mdp, &pi).unwrap();
        let offline = CpqlConfig {
            gamma: 0.5,
            improvement: Improvement::Greedy,
            batch: 8,
            ..CpqlConfig::default()
        };
        let mut learner = TabularLearner {
            tables: alloc::vec![q.clone()],
            targets: alloc::vec![q.clone()],
            policy: pi.clone(),
        };
        let ds = collect_trajectories(&mdp, &pi, 3, 5, 1).unwrap();
        let cfg = O2oConfig {
            offline,
            online_steps: 100,
            exploration: Exploration::EpsilonGreedy { epsilon: 0.0 },
            horizon: 5,
            ..O2oConfig::default()
        };
        let probe = probe_batch(&ds, &cfg).unwrap();
        let before = learner.avg_q(&probe);
        let mut replay = ReplayBuffer::new(10);
        let (records, _) = run_online(&mdp, &mut learner, &probe, &mut replay, &cfg).unwrap();
        for r in &records {
            assert!((r.avg_q - before).abs() < 1e-6);
        }
        assert!(QTable::sup_dist(&learner.tables[0], &q) < 1e-6);
    }

    #[test]
    fn invalid_settings_name_the_field() {
        let cfg = O2oConfig {
            exploration: Exploration::EpsilonGreedy { epsilon: 1.5 },
            ..O2oConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(format!("{err}").contains("exploration.epsilon"));
    }
}
