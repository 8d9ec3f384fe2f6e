//! Sampling access to a [`TabularMdp`]: the generative model, the parallel
//! sampler that draws one next state for every state-action pair at once,
//! and fixed-horizon episodes.
//!
//! Every batch routine derives one substream per `(s, a)` from a path, so its
//! output does not depend on how the work is split across threads.

use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{Policy, TabularMdp};
use crate::streams::{RandTree, Stream, StreamPath};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("state-action pair ({s},{a}) out of range for a {num_states}x{num_actions} MDP")]
    IndexOutOfRange {
        s: usize,
        a: usize,
        num_states: usize,
        num_actions: usize,
    },
    #[error("episode horizon must be at least 1")]
    ZeroHorizon,
    #[error("policy has {got} entries for {expected} states")]
    PolicyShape { got: usize, expected: usize },
}

/// One next state per `(s, a)`: `next_state[s][a]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelSample {
    pub next_state: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
}

/// Exactly `H` action-taking steps plus the state reached after the last one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub final_state: usize,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// `(s_h, a_h, s_{h+1})` for every step.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.steps.iter().enumerate().map(move |(h, step)| {
            let next = self
                .steps
                .get(h + 1)
                .map_or(self.final_state, |n| n.state);
            (step.state, step.action, next)
        })
    }
}

/// Histogram of next states per `(s, a)`: `counts[s][a][s']`, with the same
/// number of draws `m` in every row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextStateCounts {
    pub draws_per_pair: u64,
    pub counts: Vec<Vec<Vec<u64>>>,
}

/// How a batch of `m` parallel samples is realised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchMode {
    /// `m` literal calls of [`parallel_sample`], tallied.
    PerDraw,
    /// One multinomial draw per `(s, a)`; identical in distribution to
    /// `PerDraw` and independent of `m` in cost.
    #[default]
    Multinomial,
}

fn check_index(mdp: &TabularMdp, s: usize, a: usize) -> Result<(), SamplingError> {
    if s < mdp.num_states && a < mdp.num_actions {
        Ok(())
    } else {
        Err(SamplingError::IndexOutOfRange {
            s,
            a,
            num_states: mdp.num_states,
            num_actions: mdp.num_actions,
        })
    }
}

/// Generative model: the deterministic reward and a next state drawn from
/// `P(.|s,a)` by ascending-index inverse CDF.
pub fn generative_step(
    mdp: &TabularMdp,
    s: usize,
    a: usize,
    stream: &mut Stream,
) -> Result<(f64, usize), SamplingError> {
    check_index(mdp, s, a)?;
    let next = stream
        .categorical(mdp.transition(s, a))
        .expect("validated MDP rows are proper distributions");
    Ok((mdp.reward(s, a), next))
}

fn pair_index(mdp: &TabularMdp, s: usize, a: usize) -> u64 {
    (s * mdp.num_actions + a) as u64
}

/// One independent next-state draw for every `(s, a)`. The draw for pair
/// `idx = s * |A| + a` comes from `path/("sa", idx)` in `tree`.
pub fn parallel_sample(mdp: &TabularMdp, tree: &RandTree, path: &StreamPath) -> ParallelSample {
    let next_state = (0..mdp.num_states)
        .into_par_iter()
        .map(|s| {
            (0..mdp.num_actions)
                .map(|a| {
                    let mut stream = tree.derive(&path.child("sa", pair_index(mdp, s, a)));
                    generative_step(mdp, s, a, &mut stream).unwrap().1
                })
                .collect()
        })
        .collect();
    ParallelSample { next_state }
}

/// Draws `m` next states for one pair as a count vector.
pub fn multinomial_counts(probs: &[f64], m: u64, stream: &mut Stream) -> Vec<u64> {
    let mut counts = vec![0u64; probs.len()];
    let last_positive = probs.iter().rposition(|&p| p > 0.0);
    let Some(last_positive) = last_positive else {
        return counts;
    };
    let mut remaining = m;
    let mut mass_left: f64 = probs.iter().sum();
    for (i, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if p <= 0.0 {
            continue;
        }
        if i == last_positive {
            counts[i] = remaining;
            break;
        }
        let q = (p / mass_left).clamp(0.0, 1.0);
        let c = if q >= 1.0 {
            remaining
        } else {
            Binomial::new(remaining, q)
                .expect("q is a probability")
                .sample(stream)
        };
        counts[i] = c;
        remaining -= c;
        mass_left -= p;
    }
    counts
}

/// `m` parallel samples tallied into per-pair next-state histograms.
pub fn parallel_sample_counts(
    mdp: &TabularMdp,
    m: u64,
    mode: BatchMode,
    tree: &RandTree,
    path: &StreamPath,
) -> NextStateCounts {
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let counts = match mode {
        BatchMode::Multinomial => (0..ns)
            .into_par_iter()
            .map(|s| {
                (0..na)
                    .map(|a| {
                        let mut stream = tree.derive(&path.child("sa", pair_index(mdp, s, a)));
                        multinomial_counts(mdp.transition(s, a), m, &mut stream)
                    })
                    .collect()
            })
            .collect(),
        BatchMode::PerDraw => {
            let mut counts = vec![vec![vec![0u64; ns]; na]; ns];
            for call in 0..m {
                let sample = parallel_sample(mdp, tree, &path.child("call", call));
                for (s, row) in sample.next_state.iter().enumerate() {
                    for (a, &next) in row.iter().enumerate() {
                        counts[s][a][next] += 1;
                    }
                }
            }
            counts
        }
    };
    NextStateCounts {
        draws_per_pair: m,
        counts,
    }
}

/// `s_0 ~ mu`, then `H` steps following `policy`.
pub fn sample_episode(
    mdp: &TabularMdp,
    policy: &Policy,
    horizon: usize,
    stream: &mut Stream,
) -> Result<Trajectory, SamplingError> {
    if horizon == 0 {
        return Err(SamplingError::ZeroHorizon);
    }
    if policy.action.len() != mdp.num_states {
        return Err(SamplingError::PolicyShape {
            got: policy.action.len(),
            expected: mdp.num_states,
        });
    }
    let mut state = stream
        .categorical(&mdp.initial_dist)
        .expect("validated initial distribution");
    let mut steps = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let action = policy.action[state];
        let (reward, next) = generative_step(mdp, state, action, stream)?;
        steps.push(Step {
            state,
            action,
            reward,
        });
        state = next;
    }
    Ok(Trajectory {
        steps,
        final_state: state,
    })
}

/// `count` episodes, episode `i` drawn from `path/("episode", i)`.
pub fn sample_episodes(
    mdp: &TabularMdp,
    policy: &Policy,
    horizon: usize,
    count: usize,
    tree: &RandTree,
    path: &StreamPath,
) -> Result<Vec<Trajectory>, SamplingError> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut stream = tree.derive(&path.child("episode", i as u64));
            sample_episode(mdp, policy, horizon, &mut stream)
        })
        .collect()
}

/// Expected number of visits to each `(s, a)` over the `H` action-taking
/// steps of an episode, by forward dynamic programming.
pub fn expected_visits(mdp: &TabularMdp, policy: &Policy, horizon: usize) -> Vec<Vec<f64>> {
    let mut visits = vec![vec![0.0; mdp.num_actions]; mdp.num_states];
    let mut dist = mdp.initial_dist.clone();
    for _ in 0..horizon {
        let mut next = vec![0.0; mdp.num_states];
        for (s, &mass) in dist.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let a = policy.action[s];
            visits[s][a] += mass;
            for (s2, &p) in mdp.transition(s, a).iter().enumerate() {
                next[s2] += mass * p;
            }
        }
        dist = next;
    }
    visits
}
