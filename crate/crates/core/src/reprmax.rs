//! Replicable episodic R-max with randomized known-thresholds, and the
//! classical fixed-threshold baseline.
//!
//! Unknown pairs are modelled as `R_max` self-loops so the planner steers
//! episodes towards them. Each round collects `m` episodes under the current
//! policy, adds the average per-episode visit count of every unknown pair to
//! its counter, and declares a pair known once the counter passes a threshold
//! `k' ~ U[k, k + w]` drawn from the internal tree. A freshly known pair's
//! transition row is estimated by one [`rstat_histogram`] indicator query per
//! next state on everything pooled so far. Two runs sharing the internal tree
//! see the same thresholds and the same grid offsets.
//!
//! Pooled trajectories are kept as per-pair next-state counts, which is all
//! both the counters and the indicator queries need.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mdp::{exact_value_iteration, greedy_policy, max_row_l1, Policy, QTable, TabularMdp};
use crate::rstat::{rstat_histogram, Guarantee, RStatConfig, RStatError, SampleSizeMode};
use crate::sampling::{sample_episode, SamplingError, Trajectory};
use crate::streams::{RandTree, Stream, StreamPath};

#[derive(Debug, Error)]
pub enum RMaxError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("trajectory {index} has {got} steps, expected {expected}")]
    TrajectoryLength {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("no trajectories given")]
    NoTrajectories,
    #[error(transparent)]
    RStat(#[from] RStatError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RMaxParams {
    pub epsilon: f64,
    pub rho: f64,
    pub delta: f64,
    pub gamma: f64,
    pub r_max: f64,
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    /// Maximum number of rounds.
    pub rounds: usize,
    /// Episodes per round.
    pub m: u64,
    pub k: f64,
    pub w: f64,
    pub rho_k: f64,
    pub rho_sq: f64,
    pub tau_sq: f64,
    pub delta_sq: f64,
    /// Scale of the per-round drift in counters between paired runs.
    pub t_gap: f64,
    pub mode: SampleSizeMode,
    /// Tolerance of the planner's value iteration.
    pub plan_tol: f64,
}

impl RMaxParams {
    /// Theory-driven defaults: `k = w = H`, `rounds = ceil(H|S||A|/eps +
    /// H^2 ln(1/delta)/eps^2)` and `m` from [`theoretical_m`].
    pub fn new(
        mdp: &TabularMdp,
        epsilon: f64,
        rho: f64,
        delta: f64,
        horizon: usize,
    ) -> Result<Self, RMaxError> {
        let bad = |msg: String| Err(RMaxError::InvalidParams(msg));
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return bad(format!("epsilon must be in (0, 1), got {epsilon}"));
        }
        if !(rho > 0.0 && rho < 1.0) {
            return bad(format!("rho must be in (0, 1), got {rho}"));
        }
        if !(delta > 0.0 && 4.0 * delta < rho) {
            return bad(format!("need 0 < delta < rho / 4, got delta = {delta}"));
        }
        if horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        let (ns, na) = (mdp.num_states as f64, mdp.num_actions as f64);
        let h = horizon as f64;
        let rounds = (h * ns * na / epsilon + h * h * (1.0 / delta).ln() / (epsilon * epsilon)).ceil();
        let tf = rounds.max(1.0);
        let tau_sq = epsilon * (1.0 - mdp.gamma).powi(2) / ns;
        let mut params = RMaxParams {
            epsilon,
            rho,
            delta,
            gamma: mdp.gamma,
            r_max: mdp.r_max,
            num_states: mdp.num_states,
            num_actions: mdp.num_actions,
            horizon,
            rounds: rounds as usize,
            m: 0,
            k: h,
            w: h,
            rho_k: rho / (tf * ns * na),
            rho_sq: rho / (ns * ns * na),
            tau_sq,
            delta_sq: delta / (ns * ns * na),
            t_gap: h * rho / (ns * na * tf * tf),
            mode: SampleSizeMode::Strict,
            plan_tol: 1e-10,
        };
        params.rstat_config()?;
        params.m = theoretical_m(&params);
        Ok(params)
    }

    pub fn with_m(mut self, m: u64) -> Self {
        self.m = m;
        self
    }

    pub fn with_rounds(mut self, rounds: usize) -> Self {
        self.rounds = rounds;
        self
    }

    pub fn with_mode(mut self, mode: SampleSizeMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_window(mut self, k: f64, w: f64) -> Result<Self, RMaxError> {
        if !(k >= 0.0 && w >= 0.0 && (k + w).is_finite()) {
            return Err(RMaxError::InvalidParams(format!("bad threshold window [{k}, {k} + {w}]")));
        }
        self.k = k;
        self.w = w;
        Ok(self)
    }

    /// Overrides the tolerance and replicability of the transition queries.
    pub fn with_query(mut self, tau_sq: f64, rho_sq: f64) -> Result<Self, RMaxError> {
        self.tau_sq = tau_sq;
        self.rho_sq = rho_sq;
        self.rstat_config()?;
        Ok(self)
    }

    pub fn rstat_config(&self) -> Result<RStatConfig, RStatError> {
        RStatConfig::new(self.tau_sq, self.rho_sq, self.delta_sq)
    }

    /// Whether `1 - gamma > sqrt(eps) ln^{1/4}(1/delta) / (H |A| ln^{1/4}(1/rho))`,
    /// the discount condition of the convergence analysis. Runs proceed either way.
    pub fn discount_condition_holds(&self) -> bool {
        let rhs = self.epsilon.sqrt() * (1.0 / self.delta).ln().powf(0.25)
            / (self.horizon as f64 * self.num_actions as f64 * (1.0 / self.rho).ln().powf(0.25));
        1.0 - self.gamma > rhs
    }

    /// Human-readable caveats about the parameter choice.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.discount_condition_holds() {
            out.push(format!(
                "gamma = {} violates the discount condition of the convergence analysis; \
                 the epsilon-optimality guarantee does not apply",
                self.gamma
            ));
        }
        if self.m < theoretical_m(self) {
            out.push(format!(
                "m = {} is below the theoretical {}; replicability is empirical only",
                self.m,
                theoretical_m(self)
            ));
        }
        out
    }
}

/// `|S|^2 |A|^2 T^4 ln(1/rho) / rho^2` with unit constants, saturating.
pub fn theoretical_m(params: &RMaxParams) -> u64 {
    let (ns, na) = (params.num_states as f64, params.num_actions as f64);
    let t = (params.rounds as f64).max(1.0);
    let m = (ns * ns * na * na * t.powi(4) * (1.0 / params.rho).ln() / (params.rho * params.rho)).ceil();
    if m >= u64::MAX as f64 {
        u64::MAX
    } else {
        m as u64
    }
}

/// Visit counters, the known set and the history of thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnownSet {
    pub n: Vec<Vec<f64>>,
    pub known: Vec<Vec<bool>>,
    pub k: f64,
    pub w: f64,
    pub thresholds: Vec<f64>,
}

impl KnownSet {
    pub fn new(num_states: usize, num_actions: usize, k: f64, w: f64) -> Self {
        KnownSet {
            n: vec![vec![0.0; num_actions]; num_states],
            known: vec![vec![false; num_actions]; num_states],
            k,
            w,
            thresholds: Vec::new(),
        }
    }

    pub fn is_known(&self, s: usize, a: usize) -> bool {
        self.known[s][a]
    }

    pub fn all_known(&self) -> bool {
        self.known.iter().flatten().all(|&k| k)
    }

    pub fn known_count(&self) -> usize {
        self.known.iter().flatten().filter(|&&k| k).count()
    }

    /// Adds `increments[s][a]` to every unknown counter, draws one threshold
    /// `k'` from `stream` and returns the pairs that pass it, in `(s, a)`
    /// order. Those pairs are marked known.
    pub fn update_with_increments(&mut self, increments: &[Vec<f64>], stream: &mut Stream) -> Vec<(usize, usize)> {
        let k_prime = stream.uniform(self.k, self.k + self.w).expect("valid threshold window");
        self.thresholds.push(k_prime);
        let mut newly = Vec::new();
        for (s, row) in increments.iter().enumerate() {
            for (a, &c) in row.iter().enumerate() {
                if self.known[s][a] {
                    continue;
                }
                self.n[s][a] += c;
                if self.n[s][a] >= k_prime {
                    self.known[s][a] = true;
                    newly.push((s, a));
                }
            }
        }
        newly
    }

    /// Bit-exact digest of the counters.
    pub fn counts_digest(&self) -> String {
        let mut h = Sha256::new();
        for x in self.n.iter().flatten() {
            h.update(x.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Sufficient statistics of a batch of episodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeCounts {
    pub episodes: u64,
    pub visits: Vec<Vec<u64>>,
    pub next: Vec<Vec<Vec<u64>>>,
}

impl EpisodeCounts {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        EpisodeCounts {
            episodes: 0,
            visits: vec![vec![0; num_actions]; num_states],
            next: vec![vec![vec![0; num_states]; num_actions]; num_states],
        }
    }

    pub fn add_trajectory(&mut self, trajectory: &Trajectory) {
        self.episodes += 1;
        for (s, a, s2) in trajectory.transitions() {
            self.visits[s][a] += 1;
            self.next[s][a][s2] += 1;
        }
    }

    pub fn merge(&mut self, other: &EpisodeCounts) {
        self.episodes += other.episodes;
        for (x, y) in self.visits.iter_mut().flatten().zip(other.visits.iter().flatten()) {
            *x += y;
        }
        for (x, y) in self.next.iter_mut().flatten().flatten().zip(other.next.iter().flatten().flatten()) {
            *x += y;
        }
    }

    /// Average visits per episode, `c_hat[s][a]`.
    pub fn average_visits(&self) -> Vec<Vec<f64>> {
        let n = self.episodes as f64;
        self.visits
            .iter()
            .map(|row| row.iter().map(|&v| v as f64 / n).collect())
            .collect()
    }
}

/// Counts `m` episodes drawn under `policy`, episode `j` from `path/("episode", j)`.
pub fn collect_episodes(
    mdp: &TabularMdp,
    policy: &Policy,
    horizon: usize,
    m: u64,
    tree: &RandTree,
    path: &StreamPath,
) -> Result<EpisodeCounts, SamplingError> {
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    (0..m)
        .into_par_iter()
        .try_fold(
            || EpisodeCounts::zeros(ns, na),
            |mut acc, j| {
                let mut stream = tree.derive(&path.child("episode", j));
                acc.add_trajectory(&sample_episode(mdp, policy, horizon, &mut stream)?);
                Ok(acc)
            },
        )
        .try_reduce(
            || EpisodeCounts::zeros(ns, na),
            |mut a, b| {
                a.merge(&b);
                Ok(a)
            },
        )
}

/// One round of the randomized-threshold update from raw trajectories.
pub fn rep_update_k(
    trajectories: &[Trajectory],
    horizon: usize,
    known: &mut KnownSet,
    stream: &mut Stream,
) -> Result<Vec<(usize, usize)>, RMaxError> {
    if trajectories.is_empty() {
        return Err(RMaxError::NoTrajectories);
    }
    let (ns, na) = (known.n.len(), known.n.first().map_or(0, Vec::len));
    let mut counts = EpisodeCounts::zeros(ns, na);
    for (index, tr) in trajectories.iter().enumerate() {
        if tr.horizon() != horizon {
            return Err(RMaxError::TrajectoryLength {
                index,
                got: tr.horizon(),
                expected: horizon,
            });
        }
        counts.add_trajectory(tr);
    }
    Ok(known.update_with_increments(&counts.average_visits(), stream))
}

/// Optimistic model: unknown rows are `R_max` self-loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RMaxModel {
    pub p_hat: Vec<Vec<Vec<f64>>>,
    pub r_hat: Vec<Vec<f64>>,
    pub known: Vec<Vec<bool>>,
    pub r_max: f64,
}

impl RMaxModel {
    pub fn optimistic(num_states: usize, num_actions: usize, r_max: f64) -> Self {
        let p_hat = (0..num_states)
            .map(|s| {
                let mut row = vec![0.0; num_states];
                row[s] = 1.0;
                vec![row; num_actions]
            })
            .collect();
        RMaxModel {
            p_hat,
            r_hat: vec![vec![r_max; num_actions]; num_states],
            known: vec![vec![false; num_actions]; num_states],
            r_max,
        }
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for x in self.p_hat.iter().flatten().flatten().chain(self.r_hat.iter().flatten()) {
            out.extend_from_slice(&x.to_bits().to_le_bytes());
        }
        out.extend(self.known.iter().flatten().map(|&k| k as u8));
        out
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_bytes()))
    }

    /// Rows clamped to `[0, 1]` and divided by their sum. An all-zero row
    /// falls back to a self-loop.
    pub fn stochastic_rows(&self) -> Vec<Vec<Vec<f64>>> {
        self.p_hat
            .iter()
            .enumerate()
            .map(|(s, rows)| {
                rows.iter()
                    .map(|row| {
                        let mut r: Vec<f64> = row.iter().map(|p| p.clamp(0.0, 1.0)).collect();
                        let sum: f64 = r.iter().sum();
                        if sum > 0.0 {
                            r.iter_mut().for_each(|p| *p /= sum);
                        } else {
                            r[s] = 1.0;
                        }
                        r
                    })
                    .collect()
            })
            .collect()
    }

    /// The planner's view of the model as an MDP.
    pub fn to_mdp(&self, gamma: f64, initial_dist: Vec<f64>) -> TabularMdp {
        TabularMdp::new(gamma, self.r_max, self.r_hat.clone(), self.stochastic_rows(), initial_dist)
            .expect("normalised model rows form a valid MDP")
    }
}

/// Estimates the rows of `newly_known` pairs from pooled next-state counts,
/// one indicator query per next state, offsets from
/// `("known-round", round, "sas", (s * |A| + a) * |S| + s')`.
#[allow(clippy::too_many_arguments)]
pub fn update_model(
    model: &mut RMaxModel,
    mdp: &TabularMdp,
    newly_known: &[(usize, usize)],
    pooled: &EpisodeCounts,
    config: &RStatConfig,
    mode: SampleSizeMode,
    internal: &RandTree,
    round: usize,
) -> Result<Guarantee, RMaxError> {
    let ns = mdp.num_states;
    let na = mdp.num_actions;
    let base = StreamPath::new("known-round", round as u64);
    let mut guarantee = Guarantee::Theoretical;
    for &(s, a) in newly_known {
        let counts = &pooled.next[s][a];
        let mut row = vec![0.0; ns];
        for (s2, p) in row.iter_mut().enumerate() {
            let mut indicator = vec![0.0; ns];
            indicator[s2] = 1.0;
            let idx = ((s * na + a) * ns + s2) as u64;
            let mut offsets = internal.derive(&base.child("sas", idx));
            let ans = rstat_histogram(&indicator, counts, config, mode, &mut offsets)?;
            if ans.guarantee == Guarantee::Empirical {
                guarantee = Guarantee::Empirical;
            }
            *p = ans.value;
        }
        model.p_hat[s][a] = row;
        model.r_hat[s][a] = mdp.reward(s, a);
        model.known[s][a] = true;
    }
    Ok(guarantee)
}

/// Greedy policy of the model after exact value iteration; lowest action
/// index wins ties.
pub fn plan(model: &RMaxModel, gamma: f64, tol: f64) -> Policy {
    greedy_policy(&plan_values(model, gamma, tol))
}

pub fn plan_values(model: &RMaxModel, gamma: f64, tol: f64) -> QTable {
    let ns = model.p_hat.len();
    let mdp = model.to_mdp(gamma, vec![1.0 / ns as f64; ns]);
    exact_value_iteration(&mdp, tol)
}

/// Audit record of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub k_prime: f64,
    pub newly_known: Vec<(usize, usize)>,
    pub n_counts_digest: String,
    pub model_hash: String,
    pub policy_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RMaxOutput {
    pub policy: Policy,
    pub model: RMaxModel,
    pub known: KnownSet,
    pub audit: Vec<RoundRecord>,
    pub guarantee: Guarantee,
}

impl RMaxOutput {
    /// Newly known pairs per round: the part of the audit that paired runs
    /// must reproduce.
    pub fn known_sequence(&self) -> Vec<Vec<(usize, usize)>> {
        self.audit.iter().map(|r| r.newly_known.clone()).collect()
    }

    /// Audit as JSON lines.
    pub fn audit_jsonl(&self) -> String {
        self.audit
            .iter()
            .map(|r| serde_json::to_string(r).expect("audit serializes") + "\n")
            .collect()
    }
}

/// Uniformly random action per state, drawn in state order.
pub fn random_policy(num_states: usize, num_actions: usize, stream: &mut Stream) -> Policy {
    Policy {
        action: (0..num_states)
            .map(|_| stream.uniform_int(num_actions as u64).expect("at least one action") as usize)
            .collect(),
    }
}

fn check_shape(params: &RMaxParams, mdp: &TabularMdp) -> Result<(), RMaxError> {
    if (params.num_states, params.num_actions) != (mdp.num_states, mdp.num_actions) {
        return Err(RMaxError::InvalidParams(format!(
            "parameters are for {}x{} but the MDP is {}x{}",
            params.num_states, params.num_actions, mdp.num_states, mdp.num_actions
        )));
    }
    if params.m == 0 {
        return Err(RMaxError::InvalidParams("m must be at least 1".into()));
    }
    Ok(())
}

pub fn run_reprmax(
    mdp: &TabularMdp,
    params: &RMaxParams,
    internal: &RandTree,
    sample: &RandTree,
) -> Result<RMaxOutput, RMaxError> {
    check_shape(params, mdp)?;
    let config = params.rstat_config()?;
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let mut policy = random_policy(ns, na, &mut internal.derive(&StreamPath::new("init-policy", 0)));
    let mut model = RMaxModel::optimistic(ns, na, params.r_max);
    let mut known = KnownSet::new(ns, na, params.k, params.w);
    let mut pooled = EpisodeCounts::zeros(ns, na);
    let mut audit = Vec::new();
    let mut guarantee = Guarantee::Theoretical;

    for round in 0..params.rounds {
        if known.all_known() {
            break;
        }
        let batch = collect_episodes(
            mdp,
            &policy,
            params.horizon,
            params.m,
            sample,
            &StreamPath::new("round", round as u64),
        )?;
        pooled.merge(&batch);
        let mut k_stream = internal.derive(&StreamPath::new("update-k", round as u64));
        let newly = known.update_with_increments(&batch.average_visits(), &mut k_stream);
        let g = update_model(&mut model, mdp, &newly, &pooled, &config, params.mode, internal, round)?;
        if g == Guarantee::Empirical {
            guarantee = Guarantee::Empirical;
        }
        policy = plan(&model, params.gamma, params.plan_tol);
        audit.push(RoundRecord {
            round,
            k_prime: *known.thresholds.last().expect("threshold drawn this round"),
            newly_known: newly,
            n_counts_digest: known.counts_digest(),
            model_hash: model.digest(),
            policy_hash: policy.digest(),
        });
    }
    Ok(RMaxOutput {
        policy,
        model,
        known,
        audit,
        guarantee,
    })
}

/// Classical R-max: a pair is known once its averaged visit counter reaches
/// `threshold`; known rows are raw empirical frequencies. Starts from the
/// all-zeros policy and uses no internal randomness.
pub fn run_rmax_baseline(
    mdp: &TabularMdp,
    params: &RMaxParams,
    threshold: f64,
    sample: &RandTree,
) -> Result<(Policy, RMaxModel), RMaxError> {
    check_shape(params, mdp)?;
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let mut policy = Policy::constant(ns, 0);
    let mut model = RMaxModel::optimistic(ns, na, params.r_max);
    let mut known = KnownSet::new(ns, na, threshold, 0.0);
    let mut pooled = EpisodeCounts::zeros(ns, na);
    // With w = 0 the threshold stream is never consumed for randomness.
    let mut fixed = RandTree::internal(0u64).derive(&StreamPath::root());
    for round in 0..params.rounds {
        if known.all_known() {
            break;
        }
        let batch = collect_episodes(
            mdp,
            &policy,
            params.horizon,
            params.m,
            sample,
            &StreamPath::new("round", round as u64),
        )?;
        pooled.merge(&batch);
        for (s, a) in known.update_with_increments(&batch.average_visits(), &mut fixed) {
            let counts = &pooled.next[s][a];
            let total: u64 = counts.iter().sum();
            model.p_hat[s][a] = counts.iter().map(|&c| c as f64 / total as f64).collect();
            model.r_hat[s][a] = mdp.reward(s, a);
            model.known[s][a] = true;
        }
        policy = plan(&model, params.gamma, params.plan_tol);
    }
    Ok((policy, model))
}

/// Probability that an `H`-step episode under `policy` takes some action in
/// an unknown pair.
pub fn explore_probability(mdp: &TabularMdp, policy: &Policy, known: &[Vec<bool>], horizon: usize) -> f64 {
    let mut dist = mdp.initial_dist.clone();
    let mut explored = 0.0;
    for _ in 0..horizon {
        let mut next = vec![0.0; mdp.num_states];
        for (s, &mass) in dist.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let a = policy.action[s];
            if !known[s][a] {
                explored += mass;
                continue;
            }
            for (s2, &p) in mdp.transition(s, a).iter().enumerate() {
                next[s2] += mass * p;
            }
        }
        dist = next;
    }
    explored
}

/// `max ||P(s, a) - P_hat(s, a)||_1` over known pairs, with the model's
/// rows normalised as the planner sees them.
pub fn known_model_error(mdp: &TabularMdp, model: &RMaxModel) -> f64 {
    let rows = model.stochastic_rows();
    let mut truth = mdp.transitions.clone();
    let mut est = rows;
    for s in 0..mdp.num_states {
        for a in 0..mdp.num_actions {
            if !model.known[s][a] {
                truth[s][a] = vec![0.0; mdp.num_states];
                est[s][a] = vec![0.0; mdp.num_states];
            }
        }
    }
    max_row_l1(&truth, &est)
}
