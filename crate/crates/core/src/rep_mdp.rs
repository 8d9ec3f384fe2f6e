//! Replicable estimation of a whole transition kernel from a generative
//! model: one indicator query per `(s, a, s')`.
//!
//! This is the expensive route to a replicable model and exists mainly to
//! compare sample costs with [`crate::rpvi`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mdp::TabularMdp;
use crate::rstat::{rstat_histogram, Guarantee, RStatConfig, RStatError, SampleSizeMode};
use crate::sampling::multinomial_counts;
use crate::streams::{RandTree, StreamPath};

#[derive(Debug, Error)]
pub enum RepMdpError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    RStat(#[from] RStatError),
}

/// Where the `m` draws behind each query come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TupleSampling {
    /// `m` draws per `(s, a)`, shared by the `|S|` queries of that row.
    #[default]
    SharedPerPair,
    /// Fresh `m` draws for every `(s, a, s')`.
    PerTuple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxParams {
    /// Entry-wise accuracy.
    pub epsilon: f64,
    pub rho: f64,
    pub delta: f64,
    pub rho_sq: f64,
    pub delta_sq: f64,
    pub m: u64,
    pub mode: SampleSizeMode,
    pub sampling: TupleSampling,
}

impl ApproxParams {
    /// `rho_sq = rho / (|S|^2 |A|)`, `delta_sq = delta / (|S|^2 |A|)` and
    /// `m` from [`theoretical_m`].
    pub fn new(num_states: usize, num_actions: usize, epsilon: f64, rho: f64, delta: f64) -> Result<Self, RepMdpError> {
        if !(delta > 0.0 && 2.0 * delta < rho && rho < 1.0) {
            return Err(RepMdpError::InvalidParams(format!(
                "need 0 < 2 delta < rho < 1, got rho = {rho}, delta = {delta}"
            )));
        }
        let tuples = (num_states * num_states * num_actions) as f64;
        let params = ApproxParams {
            epsilon,
            rho,
            delta,
            rho_sq: rho / tuples,
            delta_sq: delta / tuples,
            m: theoretical_m(num_states, num_actions, epsilon, rho, delta),
            mode: SampleSizeMode::Strict,
            sampling: TupleSampling::default(),
        };
        params.rstat_config()?;
        Ok(params)
    }

    pub fn with_m(mut self, m: u64) -> Self {
        self.m = m;
        self
    }

    pub fn with_mode(mut self, mode: SampleSizeMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_sampling(mut self, sampling: TupleSampling) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn rstat_config(&self) -> Result<RStatConfig, RStatError> {
        RStatConfig::new(self.epsilon, self.rho_sq, self.delta_sq)
    }
}

/// Calls per `(s, a, s')`: `2 |S|^6 |A|^3 / (eps^2 (rho - 2 delta)^2) *
/// ln(2 |S|^2 |A| / delta)`, before rounding.
pub fn theoretical_m_real(num_states: usize, num_actions: usize, epsilon: f64, rho: f64, delta: f64) -> f64 {
    let (s, a) = (num_states as f64, num_actions as f64);
    let gap = rho - 2.0 * delta;
    2.0 * s.powi(6) * a.powi(3) / (epsilon * epsilon * gap * gap) * (2.0 * s * s * a / delta).ln()
}

/// [`theoretical_m_real`] rounded up, saturating at `u64::MAX`.
pub fn theoretical_m(num_states: usize, num_actions: usize, epsilon: f64, rho: f64, delta: f64) -> u64 {
    let m = theoretical_m_real(num_states, num_actions, epsilon, rho, delta).ceil();
    if m >= u64::MAX as f64 {
        u64::MAX
    } else {
        m as u64
    }
}

/// Entry-wise accuracy at which planning on the estimate loses at most
/// `epsilon` of return: `epsilon (1 - gamma)^2 / (|S| r_max)`.
pub fn entry_accuracy_for(epsilon: f64, gamma: f64, num_states: usize, r_max: f64) -> f64 {
    epsilon * (1.0 - gamma).powi(2) / (num_states as f64 * r_max)
}

/// Per-entry rounding record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub grid_index: i64,
    pub offset: f64,
    pub sample_size: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub alpha: f64,
    pub entries: Vec<Vec<Vec<EntryMeta>>>,
    pub guarantee: Guarantee,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxMdp {
    pub num_states: usize,
    pub num_actions: usize,
    pub gamma: f64,
    pub r_max: f64,
    /// Raw grid values clamped to `[0, 1]`; rows need not sum to one.
    pub p_hat: Vec<Vec<Vec<f64>>>,
    pub r_hat: Vec<Vec<f64>>,
    pub initial_dist: Vec<f64>,
    pub metadata: GridMeta,
}

impl ApproxMdp {
    /// Rows divided by their sums (all-zero rows become self-loops).
    pub fn to_mdp(&self) -> TabularMdp {
        let transitions = self
            .p_hat
            .iter()
            .enumerate()
            .map(|(s, rows)| {
                rows.iter()
                    .map(|row| {
                        let sum: f64 = row.iter().sum();
                        if sum > 0.0 {
                            row.iter().map(|p| p / sum).collect()
                        } else {
                            let mut r = vec![0.0; row.len()];
                            r[s] = 1.0;
                            r
                        }
                    })
                    .collect()
            })
            .collect();
        TabularMdp::new(
            self.gamma,
            self.r_max,
            self.r_hat.clone(),
            transitions,
            self.initial_dist.clone(),
        )
        .expect("normalised rows form a valid MDP")
    }

    /// The standard MDP JSON of [`Self::to_mdp`] plus a `metadata` block.
    pub fn to_json(&self) -> String {
        let mut value = serde_json::to_value(self.to_mdp()).expect("mdp serializes");
        value["metadata"] = serde_json::to_value(&self.metadata).expect("metadata serializes");
        value["raw_transitions"] = serde_json::to_value(&self.p_hat).expect("rows serialize");
        serde_json::to_string_pretty(&value).expect("json value serializes")
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        self.p_hat
            .iter()
            .flatten()
            .flatten()
            .chain(self.r_hat.iter().flatten())
            .flat_map(|x| x.to_bits().to_le_bytes())
            .collect()
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_bytes()))
    }
}

/// Estimates every `P(s' | s, a)` with an indicator query. Sample draws
/// come from `("sa", s*|A|+a)` (shared) or `("sas", (s*|A|+a)*|S|+s')` (per
/// tuple) on the sample tree; offsets from `("sas", ...)` on the internal
/// tree.
pub fn approximate_mdp(
    mdp: &TabularMdp,
    params: &ApproxParams,
    internal: &RandTree,
    sample: &RandTree,
) -> Result<ApproxMdp, RepMdpError> {
    if params.m == 0 {
        return Err(RepMdpError::InvalidParams("m must be at least 1".into()));
    }
    let config = params.rstat_config()?;
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let rows = (0..ns * na)
        .into_par_iter()
        .map(|pair| {
            let (s, a) = (pair / na, pair % na);
            let probs = mdp.transition(s, a);
            let shared = (params.sampling == TupleSampling::SharedPerPair).then(|| {
                multinomial_counts(probs, params.m, &mut sample.derive(&StreamPath::new("sa", pair as u64)))
            });
            (0..ns)
                .map(|s2| {
                    let idx = (pair * ns + s2) as u64;
                    let path = StreamPath::new("sas", idx);
                    let counts = match &shared {
                        Some(c) => c.clone(),
                        None => multinomial_counts(probs, params.m, &mut sample.derive(&path)),
                    };
                    let mut indicator = vec![0.0; ns];
                    indicator[s2] = 1.0;
                    rstat_histogram(&indicator, &counts, &config, params.mode, &mut internal.derive(&path))
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut p_hat = vec![vec![vec![0.0; ns]; na]; ns];
    let mut entries = vec![vec![Vec::with_capacity(ns); na]; ns];
    let mut guarantee = Guarantee::Theoretical;
    for (pair, answers) in rows.into_iter().enumerate() {
        let (s, a) = (pair / na, pair % na);
        for (s2, ans) in answers.into_iter().enumerate() {
            p_hat[s][a][s2] = ans.value;
            entries[s][a].push(EntryMeta {
                grid_index: ans.grid_index,
                offset: ans.offset,
                sample_size: ans.sample_size,
            });
            if ans.guarantee == Guarantee::Empirical {
                guarantee = Guarantee::Empirical;
            }
        }
    }
    Ok(ApproxMdp {
        num_states: ns,
        num_actions: na,
        gamma: mdp.gamma,
        r_max: mdp.r_max,
        p_hat,
        r_hat: mdp.rewards.clone(),
        initial_dist: mdp.initial_dist.clone(),
        metadata: GridMeta {
            alpha: config.alpha(),
            entries,
            guarantee,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{exact_value_iteration, greedy_policy, optimality_gap, simulation_gap_bound};

    fn one_action() -> TabularMdp {
        TabularMdp::new(
            0.5,
            1.0,
            vec![vec![0.0], vec![1.0]],
            vec![vec![vec![0.3, 0.7]], vec![vec![0.6, 0.4]]],
            vec![1.0, 0.0],
        )
        .unwrap()
    }

    fn deterministic() -> TabularMdp {
        TabularMdp::new(
            0.9,
            1.0,
            vec![vec![0.0, 0.1], vec![1.0, 0.0]],
            vec![
                vec![vec![0.0, 1.0], vec![1.0, 0.0]],
                vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            ],
            vec![1.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn theoretical_m_closed_form() {
        let m = theoretical_m_real(2, 1, 0.1, 0.2, 0.01);
        let expect = 2.0 * 64.0 / (0.01 * 0.18f64.powi(2)) * (8.0f64 / 0.01).ln();
        assert!((m - expect).abs() < 1e-6 * expect);
        // Sextic in |S|, cubic in |A|, up to the log factor.
        assert!(theoretical_m_real(4, 1, 0.1, 0.2, 0.01) > 64.0 * m);
        assert!(theoretical_m_real(2, 2, 0.1, 0.2, 0.01) > 8.0 * m);
    }

    #[test]
    fn theoretical_m_covers_each_query() {
        let p = ApproxParams::new(3, 2, 0.05, 0.2, 0.01).unwrap();
        assert!(p.m >= p.rstat_config().unwrap().required_n());
    }

    #[test]
    fn deterministic_rows_are_near_one_hot() {
        let mdp = deterministic();
        let p = ApproxParams::new(2, 2, 0.1, 0.2, 0.01)
            .unwrap()
            .with_m(500)
            .with_mode(SampleSizeMode::Practical);
        let est = approximate_mdp(&mdp, &p, &RandTree::internal(1u64), &RandTree::sample(2u64)).unwrap();
        let half = est.metadata.alpha / 2.0;
        for s in 0..2 {
            for a in 0..2 {
                for s2 in 0..2 {
                    assert!((est.p_hat[s][a][s2] - mdp.transitions[s][a][s2]).abs() <= half);
                }
            }
        }
        assert_eq!(est.metadata.guarantee, Guarantee::Empirical);
    }

    #[test]
    fn entries_lie_on_grid() {
        let mdp = one_action();
        let p = ApproxParams::new(2, 1, 0.1, 0.2, 0.01)
            .unwrap()
            .with_m(10_000)
            .with_mode(SampleSizeMode::Practical);
        let est = approximate_mdp(&mdp, &p, &RandTree::internal(3u64), &RandTree::sample(4u64)).unwrap();
        for s in 0..2 {
            for s2 in 0..2 {
                let e = est.metadata.entries[s][0][s2];
                let grid = e.offset + e.grid_index as f64 * est.metadata.alpha;
                assert_eq!(est.p_hat[s][0][s2], grid.clamp(0.0, 1.0));
            }
        }
    }

    #[test]
    fn per_tuple_mode_is_also_accurate() {
        let mdp = one_action();
        let p = ApproxParams::new(2, 1, 0.1, 0.2, 0.01)
            .unwrap()
            .with_m(20_000)
            .with_mode(SampleSizeMode::Practical)
            .with_sampling(TupleSampling::PerTuple);
        let est = approximate_mdp(&mdp, &p, &RandTree::internal(3u64), &RandTree::sample(4u64)).unwrap();
        for s in 0..2 {
            for s2 in 0..2 {
                assert!((est.p_hat[s][0][s2] - mdp.transitions[s][0][s2]).abs() <= 0.1);
            }
        }
    }

    #[test]
    fn paired_runs_at_theoretical_m_agree() {
        let mdp = one_action();
        let p = ApproxParams::new(2, 1, 0.1, 0.2, 0.01).unwrap();
        let mut same = 0;
        for i in 0..30u64 {
            let internal = RandTree::internal(i);
            let a = approximate_mdp(&mdp, &p, &internal, &RandTree::sample(2 * i)).unwrap();
            let b = approximate_mdp(&mdp, &p, &internal, &RandTree::sample(2 * i + 1)).unwrap();
            same += (a.digest() == b.digest()) as usize;
            assert_eq!(a.metadata.guarantee, Guarantee::Theoretical);
        }
        // 1 - rho - 3 sigma with sigma = sqrt(0.16 / 30)
        assert!(same as f64 / 30.0 >= 0.8 - 3.0 * (0.16f64 / 30.0).sqrt(), "{same}/30");
    }

    #[test]
    fn planning_on_estimate_respects_simulation_bound() {
        let mdp = TabularMdp::new(
            0.6,
            1.0,
            vec![vec![0.0, 0.4], vec![1.0, 0.1], vec![0.2, 0.7]],
            vec![
                vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.2, 0.2]],
                vec![vec![0.1, 0.1, 0.8], vec![0.3, 0.3, 0.4]],
                vec![vec![0.5, 0.25, 0.25], vec![0.0, 0.9, 0.1]],
            ],
            vec![1.0 / 3.0; 3],
        )
        .unwrap();
        let p = ApproxParams::new(3, 2, 0.05, 0.2, 0.01)
            .unwrap()
            .with_m(4_000)
            .with_mode(SampleSizeMode::Practical);
        for seed in 0..10u64 {
            let est = approximate_mdp(&mdp, &p, &RandTree::internal(seed), &RandTree::sample(seed)).unwrap();
            let model = est.to_mdp();
            let policy = greedy_policy(&exact_value_iteration(&model, 1e-12));
            let bound = simulation_gap_bound(&mdp, &model).unwrap();
            assert!(optimality_gap(&mdp, &policy, 1e-12) <= 2.0 * bound + 1e-9);
        }
    }

    #[test]
    fn json_has_mdp_schema_and_metadata() {
        let mdp = one_action();
        let p = ApproxParams::new(2, 1, 0.1, 0.2, 0.01)
            .unwrap()
            .with_m(100)
            .with_mode(SampleSizeMode::Practical);
        let est = approximate_mdp(&mdp, &p, &RandTree::internal(1u64), &RandTree::sample(1u64)).unwrap();
        let text = est.to_json();
        let back = TabularMdp::from_json(&text).unwrap();
        assert_eq!(back, est.to_mdp());
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["metadata"]["alpha"].as_f64().unwrap() > 0.0);
    }
}
