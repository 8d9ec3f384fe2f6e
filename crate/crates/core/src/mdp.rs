//! Finite discounted MDPs and the exact dynamic-programming oracles that every
//! sampled algorithm in this crate is checked against.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Tolerance for probability rows and the initial distribution.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

/// `(S, A, r, P, gamma, mu)` plus the reward bound `r_max`.
///
/// The JSON form matches the field names one to one. Construct through
/// [`TabularMdp::new`] or [`TabularMdp::from_json`] to get validation; the
/// fields are public so fixtures can be written inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub num_states: usize,
    pub num_actions: usize,
    pub gamma: f64,
    pub r_max: f64,
    /// `rewards[s][a]`
    pub rewards: Vec<Vec<f64>>,
    /// `transitions[s][a][s']`
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub initial_dist: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoStates,
    NoActions,
    GammaOutOfRange(f64),
    RMaxNotPositive(f64),
    RewardShape,
    RewardOutOfRange { s: usize, a: usize, value: f64 },
    TransitionShape { s: usize, a: Option<usize> },
    NegativeProbability { s: usize, a: usize, next: usize, value: f64 },
    RowSum { s: usize, a: usize, sum: f64 },
    InitialDistShape { len: usize },
    InitialDistNegative { s: usize, value: f64 },
    InitialDistSum(f64),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoStates => write!(f, "num_states must be positive"),
            Violation::NoActions => write!(f, "num_actions must be positive"),
            Violation::GammaOutOfRange(g) => write!(f, "gamma out of range: {g} not in [0, 1)"),
            Violation::RMaxNotPositive(r) => write!(f, "r_max must be positive, got {r}"),
            Violation::RewardShape => write!(f, "rewards must be a num_states x num_actions matrix"),
            Violation::RewardOutOfRange { s, a, value } => {
                write!(f, "reward ({s},{a}) = {value} outside [0, r_max]")
            }
            Violation::TransitionShape { s, a: None } => {
                write!(f, "transitions[{s}] must have num_actions rows")
            }
            Violation::TransitionShape { s, a: Some(a) } => {
                write!(f, "transitions[{s}][{a}] must have num_states entries")
            }
            Violation::NegativeProbability { s, a, next, value } => {
                write!(f, "transition ({s},{a})->{next} = {value} is negative or not finite")
            }
            Violation::RowSum { s, a, sum } => write!(f, "transition row ({s},{a}) sums to {sum}"),
            Violation::InitialDistShape { len } => {
                write!(f, "initial_dist has {len} entries, expected num_states")
            }
            Violation::InitialDistNegative { s, value } => {
                write!(f, "initial_dist[{s}] = {value} is negative or not finite")
            }
            Violation::InitialDistSum(sum) => write!(f, "initial_dist sums to {sum}"),
        }
    }
}

/// Every violated invariant of a [`TabularMdp`], with indices.
#[derive(Debug, Clone, PartialEq, Error)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid MDP ({} violations):", self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "  - {v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum MdpError {
    #[error(transparent)]
    Invalid(#[from] ValidationReport),
    #[error("malformed MDP JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("MDPs have different shapes ({0}x{1} vs {2}x{3})")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("MDPs must differ only in their transition probabilities")]
    NotComparable,
    #[error("policy has {got} entries, MDP has {expected} states")]
    PolicyShape { got: usize, expected: usize },
}

impl TabularMdp {
    pub fn new(
        gamma: f64,
        r_max: f64,
        rewards: Vec<Vec<f64>>,
        transitions: Vec<Vec<Vec<f64>>>,
        initial_dist: Vec<f64>,
    ) -> Result<Self, ValidationReport> {
        let mdp = TabularMdp {
            num_states: rewards.len(),
            num_actions: rewards.first().map_or(0, Vec::len),
            gamma,
            r_max,
            rewards,
            transitions,
            initial_dist,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn from_json(text: &str) -> Result<Self, MdpError> {
        let mdp: TabularMdp = serde_json::from_str(text)?;
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("MDP serialization cannot fail")
    }

    /// Checks every invariant and reports all violations, not just the first.
    pub fn validate(&self) -> Result<(), ValidationReport> {
        let mut v = Vec::new();
        let (ns, na) = (self.num_states, self.num_actions);
        if ns == 0 {
            v.push(Violation::NoStates);
        }
        if na == 0 {
            v.push(Violation::NoActions);
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            v.push(Violation::GammaOutOfRange(self.gamma));
        }
        let r_max_ok = self.r_max > 0.0 && self.r_max.is_finite();
        if !r_max_ok {
            v.push(Violation::RMaxNotPositive(self.r_max));
        }

        if self.rewards.len() != ns || self.rewards.iter().any(|row| row.len() != na) {
            v.push(Violation::RewardShape);
        } else {
            for (s, row) in self.rewards.iter().enumerate() {
                for (a, &value) in row.iter().enumerate() {
                    let in_range = value >= 0.0 && (!r_max_ok || value <= self.r_max);
                    if !in_range || !value.is_finite() {
                        v.push(Violation::RewardOutOfRange { s, a, value });
                    }
                }
            }
        }

        if self.transitions.len() != ns {
            v.push(Violation::TransitionShape {
                s: self.transitions.len().min(ns),
                a: None,
            });
        }
        for (s, per_action) in self.transitions.iter().enumerate().take(ns) {
            if per_action.len() != na {
                v.push(Violation::TransitionShape { s, a: None });
                continue;
            }
            for (a, row) in per_action.iter().enumerate() {
                if row.len() != ns {
                    v.push(Violation::TransitionShape { s, a: Some(a) });
                    continue;
                }
                let mut sum = 0.0;
                for (next, &p) in row.iter().enumerate() {
                    if !(p >= 0.0 && p.is_finite()) {
                        v.push(Violation::NegativeProbability { s, a, next, value: p });
                    }
                    sum += p;
                }
                if !((sum - 1.0).abs() <= ROW_SUM_TOLERANCE) {
                    v.push(Violation::RowSum { s, a, sum });
                }
            }
        }

        if self.initial_dist.len() != ns {
            v.push(Violation::InitialDistShape {
                len: self.initial_dist.len(),
            });
        } else {
            let mut sum = 0.0;
            for (s, &p) in self.initial_dist.iter().enumerate() {
                if !(p >= 0.0 && p.is_finite()) {
                    v.push(Violation::InitialDistNegative { s, value: p });
                }
                sum += p;
            }
            if !((sum - 1.0).abs() <= ROW_SUM_TOLERANCE) {
                v.push(Violation::InitialDistSum(sum));
            }
        }

        if v.is_empty() {
            Ok(())
        } else {
            Err(ValidationReport { violations: v })
        }
    }

    /// Rescales every transition row and the initial distribution to sum to
    /// one. Only ever applied on explicit request.
    pub fn renormalize(&mut self) {
        for row in self.transitions.iter_mut().flatten() {
            normalize_in_place(row);
        }
        normalize_in_place(&mut self.initial_dist);
    }

    pub fn transition(&self, s: usize, a: usize) -> &[f64] {
        &self.transitions[s][a]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s][a]
    }

    /// Upper bound on any discounted value, `r_max / (1 - gamma)`.
    pub fn value_bound(&self) -> f64 {
        self.r_max / (1.0 - self.gamma)
    }

    /// Content hash of the canonical binary encoding.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_states as u64).to_le_bytes());
        h.update((self.num_actions as u64).to_le_bytes());
        h.update(self.gamma.to_bits().to_le_bytes());
        h.update(self.r_max.to_bits().to_le_bytes());
        for x in self.rewards.iter().flatten() {
            h.update(x.to_bits().to_le_bytes());
        }
        for x in self.transitions.iter().flatten().flatten() {
            h.update(x.to_bits().to_le_bytes());
        }
        for x in &self.initial_dist {
            h.update(x.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Expected next-state value `sum_s' P(s'|s,a) v(s')`, summed in index order.
    pub fn expected_next(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        self.transitions[s][a]
            .iter()
            .zip(v)
            .map(|(p, x)| p * x)
            .sum()
    }
}

pub(crate) fn normalize_in_place(row: &mut [f64]) {
    let sum: f64 = row.iter().sum();
    if sum > 0.0 {
        for p in row.iter_mut() {
            *p /= sum;
        }
    }
}

/// Dense `|S| x |A|` action-value table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub values: Vec<Vec<f64>>,
}

impl QTable {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        QTable {
            values: vec![vec![0.0; num_actions]; num_states],
        }
    }

    pub fn num_states(&self) -> usize {
        self.values.len()
    }

    pub fn num_actions(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s][a]
    }

    /// `V(s) = max_a Q(s, a)`.
    pub fn state_values(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    pub fn max_abs_diff(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .flatten()
            .zip(other.values.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Exact bit patterns in row-major order; two tables are "identical"
    /// exactly when these bytes are.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.num_states() * self.num_actions());
        out.extend_from_slice(&(self.num_states() as u64).to_le_bytes());
        out.extend_from_slice(&(self.num_actions() as u64).to_le_bytes());
        for x in self.values.iter().flatten() {
            out.extend_from_slice(&x.to_bits().to_le_bytes());
        }
        out
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_bytes()))
    }
}

/// Deterministic stationary policy.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Policy {
    pub action: Vec<usize>,
}

impl Policy {
    pub fn constant(num_states: usize, a: usize) -> Self {
        Policy {
            action: vec![a; num_states],
        }
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.action.len());
        out.extend_from_slice(&(self.action.len() as u64).to_le_bytes());
        for &a in &self.action {
            out.extend_from_slice(&(a as u64).to_le_bytes());
        }
        out
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_bytes()))
    }
}

/// Argmax per state; ties go to the lowest action index.
pub fn greedy_policy(q: &QTable) -> Policy {
    let action = q
        .values
        .iter()
        .map(|row| {
            let mut best = 0;
            for (a, &x) in row.iter().enumerate().skip(1) {
                if x > row[best] {
                    best = a;
                }
            }
            best
        })
        .collect();
    Policy { action }
}

/// One application of the Bellman optimality operator.
pub fn bellman_backup(mdp: &TabularMdp, q: &QTable) -> QTable {
    let v = q.state_values();
    let values = (0..mdp.num_states)
        .map(|s| {
            (0..mdp.num_actions)
                .map(|a| mdp.reward(s, a) + mdp.gamma * mdp.expected_next(s, a, &v))
                .collect()
        })
        .collect();
    QTable { values }
}

/// Threshold on successive iterates that certifies `tol` accuracy.
fn stopping_threshold(gamma: f64, tol: f64) -> f64 {
    tol * (1.0 - gamma) / gamma
}

/// Value iteration from `Q = 0`, recording every iterate.
pub fn value_iteration_trace(mdp: &TabularMdp, tol: f64) -> Vec<QTable> {
    assert!(tol > 0.0, "tolerance must be positive");
    let threshold = stopping_threshold(mdp.gamma, tol);
    let mut iterates = vec![QTable::zeros(mdp.num_states, mdp.num_actions)];
    loop {
        let next = bellman_backup(mdp, iterates.last().unwrap());
        let diff = next.max_abs_diff(iterates.last().unwrap());
        iterates.push(next);
        if diff <= threshold {
            return iterates;
        }
    }
}

/// Returns `Q` with `||Q - TQ||_inf <= tol`. Pure and deterministic.
pub fn exact_value_iteration(mdp: &TabularMdp, tol: f64) -> QTable {
    assert!(tol > 0.0, "tolerance must be positive");
    let threshold = stopping_threshold(mdp.gamma, tol);
    let mut q = QTable::zeros(mdp.num_states, mdp.num_actions);
    loop {
        let next = bellman_backup(mdp, &q);
        let diff = next.max_abs_diff(&q);
        q = next;
        if diff <= threshold {
            return q;
        }
    }
}

/// `V_pi` for a stochastic policy given as `probs[s][a]`, accurate to `tol`.
pub fn evaluate_stochastic_policy(mdp: &TabularMdp, probs: &[Vec<f64>], tol: f64) -> Vec<f64> {
    assert!(tol > 0.0, "tolerance must be positive");
    let threshold = stopping_threshold(mdp.gamma, tol);
    let mut v = vec![0.0; mdp.num_states];
    loop {
        let next: Vec<f64> = (0..mdp.num_states)
            .map(|s| {
                (0..mdp.num_actions)
                    .filter(|&a| probs[s][a] > 0.0)
                    .map(|a| {
                        probs[s][a] * (mdp.reward(s, a) + mdp.gamma * mdp.expected_next(s, a, &v))
                    })
                    .sum()
            })
            .collect();
        let diff = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        if diff <= threshold {
            return v;
        }
    }
}

/// `V_pi` for a deterministic policy, accurate to `tol`.
pub fn evaluate_policy(mdp: &TabularMdp, policy: &Policy, tol: f64) -> Vec<f64> {
    assert_eq!(policy.action.len(), mdp.num_states, "policy shape");
    let probs: Vec<Vec<f64>> = policy
        .action
        .iter()
        .map(|&a| {
            let mut row = vec![0.0; mdp.num_actions];
            row[a] = 1.0;
            row
        })
        .collect();
    evaluate_stochastic_policy(mdp, &probs, tol)
}

/// `J(pi) = E_{s ~ mu}[V_pi(s)]`, accurate to `tol`.
pub fn policy_return(mdp: &TabularMdp, policy: &Policy, tol: f64) -> f64 {
    let v = evaluate_policy(mdp, policy, tol);
    dot(&mdp.initial_dist, &v)
}

pub fn stochastic_policy_return(mdp: &TabularMdp, probs: &[Vec<f64>], tol: f64) -> f64 {
    let v = evaluate_stochastic_policy(mdp, probs, tol);
    dot(&mdp.initial_dist, &v)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Suboptimality `J(pi*) - J(pi)` measured with the exact oracles.
pub fn optimality_gap(mdp: &TabularMdp, policy: &Policy, tol: f64) -> f64 {
    let optimal = greedy_policy(&exact_value_iteration(mdp, tol));
    policy_return(mdp, &optimal, tol) - policy_return(mdp, policy, tol)
}

/// `r_max / (2 (1 - gamma)^2) * max_{s,a} ||P1(s,a) - P2(s,a)||_1`, the
/// worst-case return difference of any policy between two MDPs that differ
/// only in their transitions.
pub fn simulation_gap_bound(m1: &TabularMdp, m2: &TabularMdp) -> Result<f64, MdpError> {
    if m1.num_states != m2.num_states || m1.num_actions != m2.num_actions {
        return Err(MdpError::ShapeMismatch(
            m1.num_states,
            m1.num_actions,
            m2.num_states,
            m2.num_actions,
        ));
    }
    if m1.gamma != m2.gamma
        || m1.r_max != m2.r_max
        || m1.rewards != m2.rewards
        || m1.initial_dist != m2.initial_dist
    {
        return Err(MdpError::NotComparable);
    }
    let max_l1 = max_row_l1(&m1.transitions, &m2.transitions);
    Ok(m1.r_max / (2.0 * (1.0 - m1.gamma).powi(2)) * max_l1)
}

pub(crate) fn max_row_l1(p1: &[Vec<Vec<f64>>], p2: &[Vec<Vec<f64>>]) -> f64 {
    p1.iter()
        .flatten()
        .zip(p2.iter().flatten())
        .map(|(r1, r2)| r1.iter().zip(r2).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}
