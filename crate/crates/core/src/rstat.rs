//! Replicable statistical queries.
//!
//! A query `phi: X -> [0, 1]` is answered by the empirical mean of `phi` over
//! the sample, snapped to the nearest point of a randomly offset grid
//! `{offset + k * alpha}`. The offset comes from the *internal* randomness,
//! so two runs that share it but see different samples return the same grid
//! point unless their empirical means straddle a cell boundary.
//!
//! The total tolerance `tau` is split into a sampling part and a rounding
//! part:
//!
//! ```text
//! tau'  = tau * (rho - 2 delta) / (rho + 1 - 2 delta)
//! alpha = 2 tau / (rho + 1 - 2 delta)
//! tau   = tau' + alpha / 2
//! ```
//!
//! With `n >= ln(2/delta) / (2 tau'^2)` samples, Hoeffding gives
//! `|mean - E[phi]| <= tau'` except with probability `delta`; conditioned on
//! that for both runs, the chance that the two means round differently is at
//! most `2 tau' / alpha = rho - 2 delta`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::streams::Stream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RStatError {
    #[error("invalid rSTAT configuration: {0}")]
    InvalidConfig(String),
    #[error("sample of size {got} is below the required {required} (enable practical mode to allow this)")]
    SampleTooSmall { got: u64, required: u64 },
    #[error("sample value {value} at position {index} is outside [0, 1]")]
    ValueOutOfRange { index: usize, value: f64 },
    #[error("query returned {value} at position {index}, outside [0, 1]")]
    QueryOutOfRange { index: usize, value: f64 },
    #[error("empty sample")]
    EmptySample,
}

/// Per-query budget `(tau, rho, delta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RStatConfig {
    pub tau: f64,
    pub rho: f64,
    pub delta: f64,
}

impl RStatConfig {
    /// Requires every parameter in `(0, 1)` and `delta < rho / 2`.
    pub fn new(tau: f64, rho: f64, delta: f64) -> Result<Self, RStatError> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(tau) {
            return Err(RStatError::InvalidConfig(format!("tau = {tau} not in (0, 1)")));
        }
        if !open_unit(rho) {
            return Err(RStatError::InvalidConfig(format!("rho = {rho} not in (0, 1)")));
        }
        if !open_unit(delta) {
            return Err(RStatError::InvalidConfig(format!("delta = {delta} not in (0, 1)")));
        }
        if delta >= rho / 2.0 {
            return Err(RStatError::InvalidConfig(format!(
                "delta = {delta} must be below rho / 2 = {}",
                rho / 2.0
            )));
        }
        Ok(RStatConfig { tau, rho, delta })
    }

    fn denominator(&self) -> f64 {
        self.rho + 1.0 - 2.0 * self.delta
    }

    /// Sampling share of the tolerance.
    pub fn tau_prime(&self) -> f64 {
        self.tau * (self.rho - 2.0 * self.delta) / self.denominator()
    }

    /// Grid spacing.
    pub fn alpha(&self) -> f64 {
        2.0 * self.tau / self.denominator()
    }

    /// `ceil(ln(2/delta) / (2 tau'^2))`, the two-sided Hoeffding size.
    pub fn required_n(&self) -> u64 {
        let tp = self.tau_prime();
        ((2.0 / self.delta).ln() / (2.0 * tp * tp)).ceil() as u64
    }

    /// Disagreement bound `2 tau' / alpha` for two tau'-accurate means.
    pub fn disagreement_bound(&self) -> f64 {
        2.0 * self.tau_prime() / self.alpha()
    }
}

/// Whether undersized samples are an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleSizeMode {
    #[default]
    Strict,
    /// Undersized samples are allowed; the answer then carries only an
    /// empirical guarantee.
    Practical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Guarantee {
    Theoretical,
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RStatResult {
    /// Grid point clamped to `[0, 1]`.
    pub value: f64,
    /// Grid point before clamping: exactly `offset + grid_index * alpha`.
    pub grid_value: f64,
    pub grid_index: i64,
    pub empirical_mean: f64,
    pub offset: f64,
    pub sample_size: u64,
    pub guarantee: Guarantee,
}

/// Nearest grid point to `mean`; exact midpoints go to the lower point.
pub fn round_to_grid(mean: f64, offset: f64, alpha: f64) -> (i64, f64) {
    let x = (mean - offset) / alpha;
    let k = (x - 0.5).ceil();
    let k = k as i64;
    (k, offset + k as f64 * alpha)
}

/// Draws the shared grid offset `U[0, alpha)`.
pub fn draw_offset(config: &RStatConfig, offset_stream: &mut Stream) -> f64 {
    offset_stream
        .uniform(0.0, config.alpha())
        .expect("alpha is positive and finite")
}

fn finish(
    mean: f64,
    n: u64,
    config: &RStatConfig,
    mode: SampleSizeMode,
    offset_stream: &mut Stream,
) -> Result<RStatResult, RStatError> {
    if n == 0 {
        return Err(RStatError::EmptySample);
    }
    let required = config.required_n();
    let guarantee = if n >= required {
        Guarantee::Theoretical
    } else if mode == SampleSizeMode::Practical {
        Guarantee::Empirical
    } else {
        return Err(RStatError::SampleTooSmall { got: n, required });
    };
    let alpha = config.alpha();
    let offset = draw_offset(config, offset_stream);
    let (grid_index, grid_value) = round_to_grid(mean, offset, alpha);
    Ok(RStatResult {
        value: grid_value.clamp(0.0, 1.0),
        grid_value,
        grid_index,
        empirical_mean: mean,
        offset,
        sample_size: n,
        guarantee,
    })
}

/// Answers a query whose per-element values `sample` are already in `[0, 1]`.
pub fn rstat(
    sample: &[f64],
    config: &RStatConfig,
    mode: SampleSizeMode,
    offset_stream: &mut Stream,
) -> Result<RStatResult, RStatError> {
    for (index, &value) in sample.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(RStatError::ValueOutOfRange { index, value });
        }
    }
    let n = sample.len() as u64;
    let mean = if n == 0 {
        0.0
    } else {
        sample.iter().sum::<f64>() / n as f64
    };
    finish(mean, n, config, mode, offset_stream)
}

/// Same as [`rstat`] for a sample given as a histogram: `counts[i]` copies
/// of `values[i]`. The mean is summed in index order.
pub fn rstat_histogram(
    values: &[f64],
    counts: &[u64],
    config: &RStatConfig,
    mode: SampleSizeMode,
    offset_stream: &mut Stream,
) -> Result<RStatResult, RStatError> {
    assert_eq!(values.len(), counts.len(), "histogram shape");
    let mut n = 0u64;
    let mut total = 0.0;
    for (index, (&value, &count)) in values.iter().zip(counts).enumerate() {
        if count == 0 {
            continue;
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(RStatError::ValueOutOfRange { index, value });
        }
        n += count;
        total += count as f64 * value;
    }
    let mean = if n == 0 { 0.0 } else { total / n as f64 };
    finish(mean, n, config, mode, offset_stream)
}

/// Applies a statistical query element-wise, rejecting outputs outside `[0, 1]`.
pub fn apply_query<T, F>(sample: &[T], phi: F) -> Result<Vec<f64>, RStatError>
where
    F: Fn(&T) -> f64,
{
    sample
        .iter()
        .enumerate()
        .map(|(index, x)| {
            let value = phi(x);
            if (0.0..=1.0).contains(&value) {
                Ok(value)
            } else {
                Err(RStatError::QueryOutOfRange { index, value })
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::{RandTree, StreamPath};
    use proptest::prelude::*;

    fn stream(i: u64) -> Stream {
        RandTree::internal(17).derive(&StreamPath::new("offset", i))
    }

    #[test]
    fn tolerance_split_matches_formulas() {
        let c = RStatConfig::new(0.1, 0.2, 0.01).unwrap();
        assert!((c.tau_prime() - 0.1 * 0.18 / 1.18).abs() < 1e-15);
        assert!((c.alpha() - 0.2 / 1.18).abs() < 1e-15);
        assert!((c.tau_prime() - 0.015_254).abs() < 1e-6);
        assert!((c.alpha() - 0.169_492).abs() < 1e-6);
        assert!((c.tau_prime() + c.alpha() / 2.0 - 0.1).abs() < 1e-12);
        assert!((c.disagreement_bound() - 0.18).abs() < 1e-12);
    }

    #[test]
    fn required_n_is_hoeffding() {
        let c = RStatConfig::new(0.1, 0.2, 0.05).unwrap();
        let tp = c.tau_prime();
        let expect = (40f64.ln() / (2.0 * tp * tp)).ceil() as u64;
        assert_eq!(c.required_n(), expect);
        // Shape check: halving (rho - 2 delta) roughly quadruples n.
        let c2 = RStatConfig::new(0.1, 0.1, 0.025).unwrap();
        assert!(c2.required_n() > 3 * c.required_n());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(RStatConfig::new(0.0, 0.2, 0.01).is_err());
        assert!(RStatConfig::new(0.1, 1.0, 0.01).is_err());
        assert!(RStatConfig::new(0.1, 0.2, 0.1).is_err());
        assert!(RStatConfig::new(0.1, 0.2, 0.2).is_err());
        assert!(RStatConfig::new(0.1, 0.2, 0.0999).is_ok());
    }

    #[test]
    fn all_zero_sample() {
        let c = RStatConfig::new(0.1, 0.2, 0.01).unwrap();
        let sample = vec![0.0; c.required_n() as usize];
        let r = rstat(&sample, &c, SampleSizeMode::Strict, &mut stream(0)).unwrap();
        assert!(r.grid_value.abs() <= c.alpha() / 2.0 + 1e-15);
        assert!(r.value.abs() <= c.tau);
        assert!(r.value >= 0.0);
        assert_eq!(r.guarantee, Guarantee::Theoretical);
    }

    #[test]
    fn undersized_sample_is_a_hard_error_unless_practical() {
        let c = RStatConfig::new(0.1, 0.2, 0.01).unwrap();
        let sample = vec![0.5; 10];
        assert!(matches!(
            rstat(&sample, &c, SampleSizeMode::Strict, &mut stream(0)),
            Err(RStatError::SampleTooSmall { got: 10, .. })
        ));
        let r = rstat(&sample, &c, SampleSizeMode::Practical, &mut stream(0)).unwrap();
        assert_eq!(r.guarantee, Guarantee::Empirical);
        assert!(matches!(
            rstat(&[], &c, SampleSizeMode::Practical, &mut stream(0)),
            Err(RStatError::EmptySample)
        ));
    }

    #[test]
    fn out_of_range_values_rejected() {
        let c = RStatConfig::new(0.1, 0.2, 0.01).unwrap();
        let mut sample = vec![0.5; c.required_n() as usize];
        sample[3] = 1.5;
        assert_eq!(
            rstat(&sample, &c, SampleSizeMode::Strict, &mut stream(0)),
            Err(RStatError::ValueOutOfRange { index: 3, value: 1.5 })
        );
    }

    #[test]
    fn midpoint_rounds_down() {
        assert_eq!(round_to_grid(0.75, 0.25, 1.0), (0, 0.25));
        assert_eq!(round_to_grid(0.7500001, 0.25, 1.0), (1, 1.25));
        assert_eq!(round_to_grid(-0.25, 0.25, 1.0), (-1, -0.75));
        assert_eq!(round_to_grid(0.25, 0.25, 1.0), (0, 0.25));
    }

    #[test]
    fn histogram_and_list_agree() {
        let c = RStatConfig::new(0.2, 0.5, 0.05).unwrap();
        let values = [0.0, 0.25, 1.0];
        let counts = [3u64, 5, 2];
        let mut list = Vec::new();
        for (v, &k) in values.iter().zip(&counts) {
            list.extend(std::iter::repeat_n(*v, k as usize));
        }
        let a = rstat(&list, &c, SampleSizeMode::Practical, &mut stream(4)).unwrap();
        let b = rstat_histogram(&values, &counts, &c, SampleSizeMode::Practical, &mut stream(4)).unwrap();
        assert_eq!(a.grid_index, b.grid_index);
        assert!((a.empirical_mean - b.empirical_mean).abs() < 1e-15);
        // Values with zero count are never inspected.
        assert!(rstat_histogram(&[7.0, 0.5], &[0, 4], &c, SampleSizeMode::Practical, &mut stream(1)).is_ok());
    }

    #[test]
    fn indicator_query() {
        let states = [0usize, 1, 0];
        assert_eq!(apply_query(&states, |&s| (s == 0) as u8 as f64).unwrap(), vec![1.0, 0.0, 1.0]);
        assert!(matches!(
            apply_query(&states, |&s| s as f64 * 2.0),
            Err(RStatError::QueryOutOfRange { index: 1, .. })
        ));
    }

    #[test]
    fn max_q_query() {
        let q = crate::mdp::QTable { values: vec![vec![0.2, 0.7], vec![0.9, 0.1]] };
        let v = apply_query(&[0usize, 1, 1], |&s| q.values[s].iter().copied().fold(0.0, f64::max)).unwrap();
        assert_eq!(v, vec![0.7, 0.9, 0.9]);
    }

    proptest! {
        #[test]
        fn results_lie_on_the_offset_grid(
            mean in 0.0f64..=1.0,
            tau in 0.001f64..0.5,
            rho in 0.05f64..0.95,
            seed in 0u64..1000,
        ) {
            let c = RStatConfig::new(tau, rho, rho / 8.0).unwrap();
            let r = rstat(&[mean], &c, SampleSizeMode::Practical, &mut stream(seed)).unwrap();
            prop_assert!(r.offset >= 0.0 && r.offset < c.alpha());
            prop_assert_eq!(r.grid_value.to_bits(), (r.offset + r.grid_index as f64 * c.alpha()).to_bits());
            prop_assert!((r.grid_value - r.empirical_mean).abs() <= c.alpha() / 2.0 * (1.0 + 1e-12));
            prop_assert!((0.0..=1.0).contains(&r.value));
            prop_assert_eq!(r.value, r.grid_value.clamp(0.0, 1.0));
        }

        #[test]
        fn same_sample_same_offset_same_answer(
            xs in proptest::collection::vec(0.0f64..=1.0, 1..50),
            seed in 0u64..1000,
        ) {
            let c = RStatConfig::new(0.1, 0.3, 0.01).unwrap();
            let a = rstat(&xs, &c, SampleSizeMode::Practical, &mut stream(seed)).unwrap();
            let b = rstat(&xs, &c, SampleSizeMode::Practical, &mut stream(seed)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
