//! Replicable phased value iteration and its non-replicable baseline.
//!
//! Each phase draws `m` fresh parallel samples, estimates the expected
//! next-state value of every `(s, a)` and backs it up. The replicable variant
//! routes every estimate through [`rstat_histogram`] with a grid offset drawn
//! from the internal tree, so two runs sharing internal randomness agree
//! exactly unless some estimate lands on different sides of a grid boundary.
//!
//! Values are normalised before querying: `phi(s') = (1 - gamma) / r_max *
//! max_a Q(s', a)` lies in `[0, 1]`, the tolerance is scaled the same way,
//! and answers are scaled back.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mdp::{greedy_policy, Policy, QTable, TabularMdp};
use crate::rstat::{rstat_histogram, Guarantee, RStatConfig, RStatError, SampleSizeMode};
use crate::sampling::{parallel_sample_counts, BatchMode};
use crate::streams::{RandTree, StreamPath};

#[derive(Debug, Error)]
pub enum RpviError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("parameters are for a {expected:?} MDP, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error(transparent)]
    RStat(#[from] RStatError),
}

/// Number of phases needed for the truncation error to fall below `epsilon / 2`.
pub fn phase_count(gamma: f64, epsilon: f64) -> usize {
    let t = ((2.0 / ((1.0 - gamma).powi(2) * epsilon)).ln() / (1.0 - gamma)).ceil();
    (t as usize).max(1)
}

/// Calls needed by plain phased value iteration, ignoring `gamma` factors:
/// `ceil(ln(|S||A| / delta) / (2 eps^2))`.
pub fn baseline_m(num_pairs: usize, epsilon: f64, delta: f64) -> u64 {
    ((num_pairs as f64 / delta).ln() / (2.0 * epsilon * epsilon)).ceil() as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PviParams {
    pub epsilon: f64,
    pub rho: f64,
    pub delta: f64,
    pub gamma: f64,
    pub r_max: f64,
    /// Known upper bound on every value; queries are divided by it.
    pub value_bound: f64,
    pub num_states: usize,
    pub num_actions: usize,
    /// Number of phases `T`.
    pub phases: usize,
    /// Accuracy of each expected-value estimate, in value units.
    pub tau: f64,
    pub rho_sq: f64,
    pub delta_sq: f64,
    /// Parallel-sample calls per phase.
    pub m: u64,
    pub mode: SampleSizeMode,
    pub batch: BatchMode,
}

impl PviParams {
    /// Theory-driven defaults, including `m = theoretical_m`.
    pub fn new(mdp: &TabularMdp, epsilon: f64, rho: f64, delta: f64) -> Result<Self, RpviError> {
        let bad = |msg: String| Err(RpviError::InvalidParams(msg));
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {epsilon}"));
        }
        if !(rho > 0.0 && rho < 1.0) {
            return bad(format!("rho must be in (0, 1), got {rho}"));
        }
        if !(delta > 0.0 && 2.0 * delta < rho) {
            return bad(format!("need 0 < delta < rho / 2, got delta = {delta}"));
        }
        let gamma = mdp.gamma;
        let phases = phase_count(gamma, epsilon);
        let calls = (mdp.num_states * mdp.num_actions * phases) as f64;
        let mut params = PviParams {
            epsilon,
            rho,
            delta,
            gamma,
            r_max: mdp.r_max,
            value_bound: mdp.value_bound(),
            num_states: mdp.num_states,
            num_actions: mdp.num_actions,
            phases,
            tau: (1.0 - gamma) * epsilon / 2.0,
            rho_sq: rho / calls,
            delta_sq: delta / calls,
            m: 0,
            mode: SampleSizeMode::Strict,
            batch: BatchMode::default(),
        };
        let tol = params.query_tolerance();
        if !(tol > 0.0 && tol < 1.0) {
            return bad(format!("normalised tolerance {tol} not in (0, 1)"));
        }
        params.m = theoretical_m(&params);
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

    pub fn with_batch(mut self, batch: BatchMode) -> Self {
        self.batch = batch;
        self
    }

    /// Overrides the per-query replicability parameter.
    pub fn with_rho_sq(mut self, rho_sq: f64) -> Result<Self, RpviError> {
        if !(rho_sq > 2.0 * self.delta_sq && rho_sq < 1.0) {
            return Err(RpviError::InvalidParams(format!(
                "rho_sq must be in (2 delta_sq, 1) = ({}, 1), got {rho_sq}",
                2.0 * self.delta_sq
            )));
        }
        self.rho_sq = rho_sq;
        Ok(self)
    }

    /// Overrides the per-estimate accuracy `tau` (value units). Practical
    /// sweeps use the accuracy their sample budget buys rather than the one
    /// the phase analysis asks for.
    pub fn with_tau(mut self, tau: f64) -> Result<Self, RpviError> {
        if !(tau > 0.0 && tau * self.value_scale() < 1.0) {
            return Err(RpviError::InvalidParams(format!(
                "tau must be positive with normalised tolerance below 1, got {tau}"
            )));
        }
        self.tau = tau;
        Ok(self)
    }

    /// Tightens the normalisation when values are known to stay below
    /// `bound` (e.g. a reward that can be collected only once). Must be at
    /// least `r_max`; the default is `r_max / (1 - gamma)`.
    pub fn with_value_bound(mut self, bound: f64) -> Result<Self, RpviError> {
        if !(bound >= self.r_max && bound.is_finite()) {
            return Err(RpviError::InvalidParams(format!(
                "value bound {bound} must be finite and at least r_max = {}",
                self.r_max
            )));
        }
        self.value_bound = bound;
        if !(self.query_tolerance() < 1.0) {
            return Err(RpviError::InvalidParams("normalised tolerance must be below 1".into()));
        }
        Ok(self)
    }

    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    /// Factor mapping values into `[0, 1]`.
    pub fn value_scale(&self) -> f64 {
        1.0 / self.value_bound
    }

    /// Per-query tolerance on the normalised scale.
    pub fn query_tolerance(&self) -> f64 {
        self.value_scale() * self.tau
    }

    pub fn rstat_config(&self) -> Result<RStatConfig, RStatError> {
        RStatConfig::new(self.query_tolerance(), self.rho_sq, self.delta_sq)
    }

    /// `tau * gamma / (1 - gamma) + gamma^T * r_max / (1 - gamma)`.
    pub fn accuracy_bound(&self) -> f64 {
        let g = self.gamma;
        self.tau * g / (1.0 - g) + g.powi(self.phases as i32) * self.r_max / (1.0 - g)
    }

    fn check_shape(&self, mdp: &TabularMdp) -> Result<(), RpviError> {
        let expected = (self.num_states, self.num_actions);
        let got = (mdp.num_states, mdp.num_actions);
        if expected != got {
            return Err(RpviError::ShapeMismatch { expected, got });
        }
        if self.m == 0 {
            return Err(RpviError::InvalidParams("m must be at least 1".into()));
        }
        Ok(())
    }
}

/// `2 (|S||A|T)^2 / (tau^2 (rho - 2 delta)^2) * ln(2 |S||A|T / delta)` before rounding.
pub fn theoretical_m_real(params: &PviParams) -> f64 {
    let calls = (params.num_pairs() * params.phases) as f64;
    let gap = params.rho - 2.0 * params.delta;
    2.0 * calls * calls / (params.tau * params.tau * gap * gap) * (2.0 * calls / params.delta).ln()
}

/// [`theoretical_m_real`] rounded up, saturating at `u64::MAX`.
pub fn theoretical_m(params: &PviParams) -> u64 {
    let m = theoretical_m_real(params).ceil();
    if m >= u64::MAX as f64 {
        u64::MAX
    } else {
        m as u64
    }
}

/// One rSTAT call: the normalised empirical mean, the grid offset, and the
/// rounded answer (normalised scale).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub t: usize,
    pub s: usize,
    pub a: usize,
    pub offset: f64,
    pub mean: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpviOutput {
    pub q: QTable,
    pub policy: Policy,
    pub audit: Vec<AuditEntry>,
    /// `Empirical` if any query ran below its required sample size.
    pub guarantee: Guarantee,
}

/// SHA-256 over the bit patterns of every audit entry in order.
pub fn audit_digest(audit: &[AuditEntry]) -> String {
    let mut h = Sha256::new();
    for e in audit {
        for x in [e.t as u64, e.s as u64, e.a as u64] {
            h.update(x.to_le_bytes());
        }
        for x in [e.offset, e.mean, e.value] {
            h.update(x.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn normalised_values(q: &QTable, scale: f64) -> Vec<f64> {
    q.state_values()
        .into_iter()
        .map(|v| (scale * v).clamp(0.0, 1.0))
        .collect()
}

pub fn run_rpvi(
    mdp: &TabularMdp,
    params: &PviParams,
    internal: &RandTree,
    sample: &RandTree,
) -> Result<RpviOutput, RpviError> {
    params.check_shape(mdp)?;
    let config = params.rstat_config()?;
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let scale = params.value_scale();
    let unscale = params.value_bound;
    let mut q = QTable::zeros(ns, na);
    let mut audit = Vec::with_capacity(params.phases * ns * na);
    let mut guarantee = Guarantee::Theoretical;

    for t in 0..params.phases {
        let phase = StreamPath::new("iter", t as u64);
        let counts = parallel_sample_counts(mdp, params.m, params.batch, sample, &phase);
        let phi = normalised_values(&q, scale);
        let answers = (0..ns * na)
            .into_par_iter()
            .map(|idx| {
                let mut offsets = internal.derive(&phase.child("sa", idx as u64));
                let row = &counts.counts[idx / na][idx % na];
                rstat_histogram(&phi, row, &config, params.mode, &mut offsets)
            })
            .collect::<Result<Vec<_>, _>>()?;

        let mut next = QTable::zeros(ns, na);
        for (idx, ans) in answers.into_iter().enumerate() {
            let (s, a) = (idx / na, idx % na);
            next.values[s][a] = mdp.reward(s, a) + params.gamma * (ans.value * unscale);
            if ans.guarantee == Guarantee::Empirical {
                guarantee = Guarantee::Empirical;
            }
            audit.push(AuditEntry {
                t,
                s,
                a,
                offset: ans.offset,
                mean: ans.empirical_mean,
                value: ans.value,
            });
        }
        q = next;
    }
    let policy = greedy_policy(&q);
    Ok(RpviOutput {
        q,
        policy,
        audit,
        guarantee,
    })
}

/// The same phases with raw empirical means; `rho`, `rho_sq` and the mode are
/// ignored.
pub fn run_pvi_baseline(
    mdp: &TabularMdp,
    params: &PviParams,
    sample: &RandTree,
) -> Result<(QTable, Policy), RpviError> {
    params.check_shape(mdp)?;
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let mut q = QTable::zeros(ns, na);
    for t in 0..params.phases {
        let phase = StreamPath::new("iter", t as u64);
        let counts = parallel_sample_counts(mdp, params.m, params.batch, sample, &phase);
        let v = q.state_values();
        let mut next = QTable::zeros(ns, na);
        for s in 0..ns {
            for a in 0..na {
                let total: f64 = counts.counts[s][a]
                    .iter()
                    .zip(&v)
                    .filter(|(&c, _)| c > 0)
                    .map(|(&c, &x)| c as f64 * x)
                    .sum();
                next.values[s][a] = mdp.reward(s, a) + params.gamma * total / params.m as f64;
            }
        }
        q = next;
    }
    let policy = greedy_policy(&q);
    Ok((q, policy))
}
