//! Paired-run experiments: cohorts that share internal randomness, the
//! replicability fractions measured on them, and the multiplier sweep.
//!
//! Runs are compared by exact equality of their canonical serialization.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mdp::{exact_value_iteration, greedy_policy, policy_return, Policy, TabularMdp};
use crate::rep_mdp::{approximate_mdp, ApproxParams, RepMdpError};
use crate::reprmax::{plan_values, run_reprmax, run_rmax_baseline, RMaxError, RMaxParams};
use crate::rpvi::{run_pvi_baseline, run_rpvi, PviParams, RpviError};
use crate::rstat::Guarantee;
use crate::streams::{RandTree, Seed};

/// Value-iteration tolerance of the ground-truth oracle.
pub const ORACLE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Rpvi,
    PviBaseline,
    Reprmax,
    RmaxBaseline,
    ApproxMdp,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Rpvi,
        Algorithm::PviBaseline,
        Algorithm::Reprmax,
        Algorithm::RmaxBaseline,
        Algorithm::ApproxMdp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Rpvi => "rpvi",
            Algorithm::PviBaseline => "pvi_baseline",
            Algorithm::Reprmax => "reprmax",
            Algorithm::RmaxBaseline => "rmax_baseline",
            Algorithm::ApproxMdp => "approx_mdp",
        }
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, Algorithm::PviBaseline | Algorithm::RmaxBaseline)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s.replace('-', "_"))
            .ok_or_else(|| format!("unknown algorithm {s:?}"))
    }
}

/// Parameters of one run; the variant must fit the algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunParams {
    Pvi(PviParams),
    /// `baseline_threshold` is the fixed visit threshold of classical R-max.
    Rmax { params: RMaxParams, baseline_threshold: f64 },
    Approx(ApproxParams),
}

impl RunParams {
    /// R-max parameters whose baseline threshold sits mid-window.
    pub fn rmax(params: RMaxParams) -> Self {
        let baseline_threshold = params.k + params.w / 2.0;
        RunParams::Rmax {
            params,
            baseline_threshold,
        }
    }

    pub fn m(&self) -> u64 {
        match self {
            RunParams::Pvi(p) => p.m,
            RunParams::Rmax { params, .. } => params.m,
            RunParams::Approx(p) => p.m,
        }
    }

    pub fn rho_sq(&self) -> f64 {
        match self {
            RunParams::Pvi(p) => p.rho_sq,
            RunParams::Rmax { params, .. } => params.rho_sq,
            RunParams::Approx(p) => p.rho_sq,
        }
    }

    pub fn epsilon(&self) -> f64 {
        match self {
            RunParams::Pvi(p) => p.epsilon,
            RunParams::Rmax { params, .. } => params.epsilon,
            RunParams::Approx(p) => p.epsilon,
        }
    }

    pub fn with_m(self, m: u64) -> Self {
        match self {
            RunParams::Pvi(p) => RunParams::Pvi(p.with_m(m)),
            RunParams::Rmax {
                params,
                baseline_threshold,
            } => RunParams::Rmax {
                params: params.with_m(m),
                baseline_threshold,
            },
            RunParams::Approx(p) => RunParams::Approx(p.with_m(m)),
        }
    }

    pub fn with_rho_sq(self, rho_sq: f64) -> Result<Self, LabError> {
        Ok(match self {
            RunParams::Pvi(p) => RunParams::Pvi(p.with_rho_sq(rho_sq)?),
            RunParams::Rmax {
                params,
                baseline_threshold,
            } => {
                let tau = params.tau_sq;
                RunParams::Rmax {
                    params: params.with_query(tau, rho_sq)?,
                    baseline_threshold,
                }
            }
            RunParams::Approx(mut p) => {
                p.rho_sq = rho_sq;
                p.rstat_config().map_err(RepMdpError::from)?;
                RunParams::Approx(p)
            }
        })
    }

    fn fits(&self, algorithm: Algorithm) -> bool {
        matches!(
            (algorithm, self),
            (Algorithm::Rpvi | Algorithm::PviBaseline, RunParams::Pvi(_))
                | (Algorithm::Reprmax | Algorithm::RmaxBaseline, RunParams::Rmax { .. })
                | (Algorithm::ApproxMdp, RunParams::Approx(_))
        )
    }
}

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid cohort: {0}")]
    InvalidSpec(String),
    #[error("run with sample seed {seed} failed: {source}")]
    RunFailed {
        seed: String,
        #[source]
        source: Box<LabError>,
    },
    #[error(transparent)]
    Rpvi(#[from] RpviError),
    #[error(transparent)]
    RMax(#[from] RMaxError),
    #[error(transparent)]
    RepMdp(#[from] RepMdpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Everything one run returns, plus its canonical hashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub policy: Policy,
    pub policy_hash: String,
    /// Q-table hash (learned for rPVI, planned on the model otherwise).
    pub value_hash: String,
    pub model_hash: Option<String>,
    /// Hash of the known-set sequence (R-max variants only).
    pub known_hash: Option<String>,
    /// The hash cohorts are grouped by.
    pub output_hash: String,
    pub guarantee: Guarantee,
    /// Full result document written by `solve`.
    pub document: serde_json::Value,
}

fn sha_hex(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Runs `algorithm` once.
pub fn run_once(
    algorithm: Algorithm,
    mdp: &TabularMdp,
    params: &RunParams,
    internal: &RandTree,
    sample: &RandTree,
) -> Result<RunResult, LabError> {
    if !params.fits(algorithm) {
        return Err(LabError::InvalidSpec(format!(
            "{} cannot run with these parameters",
            algorithm.name()
        )));
    }
    let result = match (algorithm, params) {
        (Algorithm::Rpvi, RunParams::Pvi(p)) => {
            let out = run_rpvi(mdp, p, internal, sample)?;
            let value_hash = out.q.digest();
            RunResult {
                policy_hash: out.policy.digest(),
                output_hash: value_hash.clone(),
                value_hash,
                model_hash: None,
                known_hash: None,
                guarantee: out.guarantee,
                document: serde_json::json!({
                    "q": out.q,
                    "policy": out.policy,
                    "audit_digest": crate::rpvi::audit_digest(&out.audit),
                    "guarantee": out.guarantee,
                }),
                policy: out.policy,
            }
        }
        (Algorithm::PviBaseline, RunParams::Pvi(p)) => {
            let (q, policy) = run_pvi_baseline(mdp, p, sample)?;
            let value_hash = q.digest();
            RunResult {
                policy_hash: policy.digest(),
                output_hash: value_hash.clone(),
                value_hash,
                model_hash: None,
                known_hash: None,
                guarantee: Guarantee::Empirical,
                document: serde_json::json!({ "q": q, "policy": policy }),
                policy,
            }
        }
        (Algorithm::Reprmax, RunParams::Rmax { params: p, .. }) => {
            let out = run_reprmax(mdp, p, internal, sample)?;
            let q = plan_values(&out.model, p.gamma, p.plan_tol);
            let known = serde_json::to_string(&out.known_sequence()).expect("pairs serialize");
            let known_hash = sha_hex(&[&known]);
            let model_hash = out.model.digest();
            let policy_hash = out.policy.digest();
            RunResult {
                output_hash: sha_hex(&[&known_hash, &model_hash, &policy_hash]),
                value_hash: q.digest(),
                model_hash: Some(model_hash),
                known_hash: Some(known_hash),
                policy_hash,
                guarantee: out.guarantee,
                document: serde_json::json!({
                    "policy": out.policy,
                    "model": out.model,
                    "audit": out.audit,
                    "guarantee": out.guarantee,
                    "warnings": p.warnings(),
                }),
                policy: out.policy,
            }
        }
        (
            Algorithm::RmaxBaseline,
            RunParams::Rmax {
                params: p,
                baseline_threshold,
            },
        ) => {
            let (policy, model) = run_rmax_baseline(mdp, p, *baseline_threshold, sample)?;
            let q = plan_values(&model, p.gamma, p.plan_tol);
            let model_hash = model.digest();
            let policy_hash = policy.digest();
            RunResult {
                output_hash: sha_hex(&[&model_hash, &policy_hash]),
                value_hash: q.digest(),
                model_hash: Some(model_hash),
                known_hash: None,
                policy_hash,
                guarantee: Guarantee::Empirical,
                document: serde_json::json!({ "policy": policy, "model": model }),
                policy,
            }
        }
        (Algorithm::ApproxMdp, RunParams::Approx(p)) => {
            let est = approximate_mdp(mdp, p, internal, sample)?;
            let q = exact_value_iteration(&est.to_mdp(), ORACLE_TOL);
            let policy = greedy_policy(&q);
            let model_hash = est.digest();
            RunResult {
                policy_hash: policy.digest(),
                value_hash: q.digest(),
                output_hash: model_hash.clone(),
                model_hash: Some(model_hash),
                known_hash: None,
                guarantee: est.metadata.guarantee,
                document: serde_json::json!({
                    "model": serde_json::from_str::<serde_json::Value>(&est.to_json()).expect("valid json"),
                    "policy": policy,
                }),
                policy,
            }
        }
        _ => unreachable!("checked by fits"),
    };
    Ok(result)
}

/// A cohort: one run per sample seed, all sharing `internal_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRunSpec {
    pub algorithm: Algorithm,
    /// Where the MDP came from (a path or `default-grid`); provenance only.
    pub source: String,
    pub mdp: TabularMdp,
    pub params: RunParams,
    pub internal_seed: Seed,
    pub sample_seeds: Vec<Seed>,
}

impl PairedRunSpec {
    pub fn num_runs(&self) -> usize {
        self.sample_seeds.len()
    }

    /// `count` sample seeds `first, first + 1, ...`.
    pub fn seed_range(first: u64, count: usize) -> Vec<Seed> {
        (0..count as u64).map(|i| Seed::from(first + i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub sample_seed: String,
    pub output_hash: String,
    pub value_hash: String,
    pub policy_hash: String,
    pub model_hash: Option<String>,
    pub known_hash: Option<String>,
    pub guarantee: Guarantee,
    /// `J*(mu) - J^pi(mu)` under the true MDP.
    pub eps_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub algorithm: Algorithm,
    pub source: String,
    pub mdp_digest: String,
    pub internal_seed: String,
    pub sample_seeds: Vec<String>,
    pub params: RunParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub provenance: Provenance,
    pub runs: Vec<RunRecord>,
    /// Sizes of the classes of identical outputs, largest first.
    pub class_sizes: Vec<usize>,
    pub largest_identical_frac: f64,
    pub unique_frac: f64,
    /// `agreement[i][j]` iff runs `i` and `j` gave identical outputs.
    pub pairwise_agreement: Vec<Vec<bool>>,
    /// Fraction of unordered pairs that disagree.
    pub pairwise_disagreement: f64,
    /// Largest-identical fraction of greedy policies.
    pub policy_rate: f64,
    /// Largest-identical fraction of Q-tables.
    pub value_rate: f64,
    /// Largest-identical fraction of models, for model-based algorithms.
    pub model_rate: Option<f64>,
    pub mean_eps_gap: f64,
    pub max_eps_gap: f64,
    /// Only filled in when timing is requested.
    pub wallclock_s: Option<f64>,
}

/// `0x`-prefixed hex, which parses back to the same seed.
pub fn seed_text(seed: &Seed) -> String {
    format!("0x{}", seed.to_hex())
}

/// Class sizes of `hashes` under exact equality, largest first.
pub fn class_sizes<S: AsRef<str>>(hashes: &[S]) -> Vec<usize> {
    let mut groups: BTreeMap<&str, usize> = BTreeMap::new();
    for h in hashes {
        *groups.entry(h.as_ref()).or_default() += 1;
    }
    let mut sizes: Vec<usize> = groups.into_values().collect();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    sizes
}

fn largest_frac<S: AsRef<str>>(hashes: &[S]) -> f64 {
    class_sizes(hashes)[0] as f64 / hashes.len() as f64
}

/// Runs a cohort in parallel. Output order follows `sample_seeds`, so the
/// report does not depend on scheduling.
pub fn run_cohort(spec: &PairedRunSpec, timing: bool) -> Result<ReplicationReport, LabError> {
    let n = spec.num_runs();
    if n < 2 {
        return Err(LabError::InvalidSpec(format!("need at least 2 runs, got {n}")));
    }
    if !spec.params.fits(spec.algorithm) {
        return Err(LabError::InvalidSpec(format!(
            "{} cannot run with these parameters",
            spec.algorithm.name()
        )));
    }
    let start = Instant::now();
    let optimal = policy_return(
        &spec.mdp,
        &greedy_policy(&exact_value_iteration(&spec.mdp, ORACLE_TOL)),
        ORACLE_TOL,
    );
    let internal = RandTree::internal(spec.internal_seed);
    let runs = spec
        .sample_seeds
        .par_iter()
        .map(|&seed| {
            let r = run_once(spec.algorithm, &spec.mdp, &spec.params, &internal, &RandTree::sample(seed))
                .map_err(|e| LabError::RunFailed {
                    seed: seed_text(&seed),
                    source: Box::new(e),
                })?;
            Ok(RunRecord {
                sample_seed: seed_text(&seed),
                eps_gap: optimal - policy_return(&spec.mdp, &r.policy, ORACLE_TOL),
                output_hash: r.output_hash,
                value_hash: r.value_hash,
                policy_hash: r.policy_hash,
                model_hash: r.model_hash,
                known_hash: r.known_hash,
                guarantee: r.guarantee,
            })
        })
        .collect::<Result<Vec<_>, LabError>>()?;

    let outputs: Vec<&str> = runs.iter().map(|r| r.output_hash.as_str()).collect();
    let sizes = class_sizes(&outputs);
    let agreement: Vec<Vec<bool>> = outputs
        .iter()
        .map(|a| outputs.iter().map(|b| a == b).collect())
        .collect();
    let mut disagreeing = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            disagreeing += !agreement[i][j] as usize;
        }
    }
    let policies: Vec<&str> = runs.iter().map(|r| r.policy_hash.as_str()).collect();
    let values: Vec<&str> = runs.iter().map(|r| r.value_hash.as_str()).collect();
    let models: Option<Vec<&str>> = runs.iter().map(|r| r.model_hash.as_deref()).collect();
    let gaps: Vec<f64> = runs.iter().map(|r| r.eps_gap).collect();

    Ok(ReplicationReport {
        provenance: Provenance {
            algorithm: spec.algorithm,
            source: spec.source.clone(),
            mdp_digest: spec.mdp.digest(),
            internal_seed: seed_text(&spec.internal_seed),
            sample_seeds: spec.sample_seeds.iter().map(seed_text).collect(),
            params: spec.params.clone(),
        },
        largest_identical_frac: sizes[0] as f64 / n as f64,
        unique_frac: sizes.len() as f64 / n as f64,
        class_sizes: sizes,
        pairwise_agreement: agreement,
        pairwise_disagreement: disagreeing as f64 / (n * (n - 1) / 2) as f64,
        policy_rate: largest_frac(&policies),
        value_rate: largest_frac(&values),
        model_rate: models.map(|m| largest_frac(&m)),
        mean_eps_gap: gaps.iter().sum::<f64>() / n as f64,
        max_eps_gap: gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        wallclock_s: timing.then(|| start.elapsed().as_secs_f64()),
        runs,
    })
}

/// Outcome of independent two-run cohorts, pair `i` using internal seed
/// `first_internal + i` and sample seeds `2i`, `2i + 1` offset by
/// `first_sample`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub pairs: usize,
    pub identical: usize,
    pub identical_frac: f64,
    /// Runs (two per pair) whose gap is at most `epsilon`.
    pub eps_optimal: usize,
    pub eps_optimal_frac: f64,
    pub max_eps_gap: f64,
}

pub fn run_pairs(
    algorithm: Algorithm,
    mdp: &TabularMdp,
    params: &RunParams,
    pairs: usize,
    first_internal: u64,
    first_sample: u64,
) -> Result<PairSummary, LabError> {
    let reports = (0..pairs as u64)
        .map(|i| {
            run_cohort(
                &PairedRunSpec {
                    algorithm,
                    source: String::new(),
                    mdp: mdp.clone(),
                    params: params.clone(),
                    internal_seed: Seed::from(first_internal + i),
                    sample_seeds: PairedRunSpec::seed_range(first_sample + 2 * i, 2),
                },
                false,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let eps = params.epsilon();
    let identical = reports.iter().filter(|r| r.class_sizes.len() == 1).count();
    let gaps: Vec<f64> = reports.iter().flat_map(|r| r.runs.iter().map(|x| x.eps_gap)).collect();
    let eps_optimal = gaps.iter().filter(|&&g| g <= eps).count();
    Ok(PairSummary {
        pairs,
        identical,
        identical_frac: identical as f64 / pairs as f64,
        eps_optimal,
        eps_optimal_frac: eps_optimal as f64 / gaps.len() as f64,
        max_eps_gap: gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// A grid of cohorts over budget multipliers, `rho_sq` values and internal
/// seeds. Baselines ignore `rho_sq` and get one row per multiplier and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub algorithms: Vec<Algorithm>,
    pub source: String,
    pub mdp: TabularMdp,
    /// Parameters for the replicable algorithms; baselines reuse them.
    pub params: RunParams,
    pub base_m: u64,
    pub multipliers: Vec<u64>,
    pub rho_sq_values: Vec<f64>,
    pub internal_seeds: Vec<Seed>,
    /// The same sample seeds are used in every cell.
    pub sample_seeds: Vec<Seed>,
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub algorithm: Algorithm,
    pub m_multiplier: u64,
    pub rho_sq: Option<f64>,
    pub internal_seed: String,
    pub largest_identical_frac: f64,
    pub unique_frac: f64,
    pub mean_eps_gap: f64,
    /// Zero unless timing was requested.
    pub wallclock_s: f64,
}

pub const CSV_HEADER: [&str; 8] = [
    "algorithm",
    "m_multiplier",
    "rho_sq",
    "internal_seed",
    "largest_identical_frac",
    "unique_frac",
    "mean_eps_gap",
    "wallclock_s",
];

fn write_row<W: Write>(w: &mut csv::Writer<W>, row: &SweepRow) -> Result<(), csv::Error> {
    w.write_record([
        row.algorithm.name().to_string(),
        row.m_multiplier.to_string(),
        row.rho_sq.map(|r| format!("{r:e}")).unwrap_or_default(),
        row.internal_seed.clone(),
        row.largest_identical_frac.to_string(),
        row.unique_frac.to_string(),
        row.mean_eps_gap.to_string(),
        row.wallclock_s.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

/// Runs the sweep, writing each row to `out` as soon as it is done so that
/// a failure leaves the finished rows behind. Rows are ordered by
/// algorithm, internal seed, `rho_sq`, then multiplier.
pub fn sweep<W: Write>(spec: &SweepSpec, out: W) -> Result<Vec<SweepRow>, LabError> {
    if spec.base_m == 0 {
        return Err(LabError::InvalidSpec("base_m must be at least 1".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    w.flush()?;
    let mut rows = Vec::new();
    for &algorithm in &spec.algorithms {
        let rho_values: Vec<Option<f64>> = if algorithm.is_baseline() {
            vec![None]
        } else {
            spec.rho_sq_values.iter().map(|&r| Some(r)).collect()
        };
        for &internal_seed in &spec.internal_seeds {
            for &rho in &rho_values {
                for &mult in &spec.multipliers {
                    let mut params = spec.params.clone().with_m(spec.base_m * mult);
                    if let Some(r) = rho {
                        params = params.with_rho_sq(r)?;
                    }
                    let report = run_cohort(
                        &PairedRunSpec {
                            algorithm,
                            source: spec.source.clone(),
                            mdp: spec.mdp.clone(),
                            params,
                            internal_seed,
                            sample_seeds: spec.sample_seeds.clone(),
                        },
                        spec.timing,
                    )?;
                    let row = SweepRow {
                        algorithm,
                        m_multiplier: mult,
                        rho_sq: rho,
                        internal_seed: seed_text(&internal_seed),
                        largest_identical_frac: report.largest_identical_frac,
                        unique_frac: report.unique_frac,
                        mean_eps_gap: report.mean_eps_gap,
                        wallclock_s: report.wallclock_s.unwrap_or(0.0),
                    };
                    write_row(&mut w, &row)?;
                    rows.push(row);
                }
            }
        }
    }
    Ok(rows)
}

pub const GRID_BASE_M: u64 = 13_000;
pub const GRID_MULTIPLIERS: [u64; 5] = [1, 2, 4, 8, 16];
pub const GRID_EPSILON: f64 = 0.02;
pub const GRID_RHO: f64 = 0.2;
pub const GRID_DELTA: f64 = 0.001;

/// Sweep parameters for a compiled gridworld: `eps = 0.02`, `rho = 0.2`,
/// `delta = 0.001`, practical mode, and each query answered to accuracy
/// `eps` on values normalised by `r_max`. A goal pays once and every other
/// reward is zero, so values never exceed `r_max` there.
pub fn grid_sweep_params(mdp: &TabularMdp) -> Result<PviParams, LabError> {
    Ok(PviParams::new(mdp, GRID_EPSILON, GRID_RHO, GRID_DELTA)?
        .with_value_bound(mdp.r_max)?
        .with_tau(GRID_EPSILON * mdp.r_max)?
        .with_mode(crate::rstat::SampleSizeMode::Practical)
        .with_m(GRID_BASE_M))
}

/// The per-query value from the union bound, then `0.01`, `0.1`, `0.5`.
pub fn default_rho_sq_values(params: &PviParams) -> Vec<f64> {
    vec![params.rho_sq, 0.01, 0.1, 0.5]
}

/// Rows grouped into curves keyed by `(algorithm, internal seed, rho_sq)`,
/// each sorted by multiplier.
pub fn curves(rows: &[SweepRow]) -> Vec<(String, Vec<&SweepRow>)> {
    let mut map: BTreeMap<(Algorithm, String, String), Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        let rho = r.rho_sq.map(|x| format!("{x:.3e}")).unwrap_or_default();
        map.entry((r.algorithm, r.internal_seed.clone(), rho)).or_default().push(r);
    }
    map.into_iter()
        .map(|((alg, seed, rho), mut v)| {
            v.sort_by_key(|r| r.m_multiplier);
            let short = seed.trim_start_matches("0x").trim_start_matches('0');
            let label = if rho.is_empty() {
                format!("{} seed {}", alg.name(), if short.is_empty() { "0" } else { short })
            } else {
                format!(
                    "{} seed {} rho_sq {rho}",
                    alg.name(),
                    if short.is_empty() { "0" } else { short }
                )
            };
            (label, v)
        })
        .collect()
}

/// Checks the two sweep trends on every curve: largest-identical fraction
/// non-decreasing and unique fraction non-increasing in the multiplier.
pub fn monotone_violations(rows: &[SweepRow]) -> Vec<String> {
    let mut out = Vec::new();
    for (label, curve) in curves(rows) {
        for pair in curve.windows(2) {
            if pair[1].largest_identical_frac < pair[0].largest_identical_frac {
                out.push(format!(
                    "{label}: largest-identical drops at x{}",
                    pair[1].m_multiplier
                ));
            }
            if pair[1].unique_frac > pair[0].unique_frac {
                out.push(format!("{label}: unique rises at x{}", pair[1].m_multiplier));
            }
        }
    }
    out
}

/// Two side-by-side line charts (largest-identical and unique fraction
/// against the multiplier on a log axis) as a standalone SVG document.
pub fn sweep_svg(rows: &[SweepRow], threshold: f64) -> String {
    const W: f64 = 420.0;
    const H: f64 = 300.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 8] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
    ];
    let series = curves(rows);
    let mults: Vec<f64> = rows.iter().map(|r| r.m_multiplier as f64).collect();
    let lo = mults.iter().cloned().fold(f64::INFINITY, f64::min).max(1.0).log2();
    let hi = mults.iter().cloned().fold(1.0, f64::max).log2();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x = |m: u64, panel: usize| {
        panel as f64 * W + PAD + ((m as f64).log2() - lo) / span * (W - 2.0 * PAD)
    };
    let y = |v: f64| H - PAD + -(v * (H - 2.0 * PAD));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="11">"#,
        2.0 * W,
        H + 20.0 * series.len() as f64
    );
    for (panel, title) in ["largest identical fraction", "unique fraction"].iter().enumerate() {
        let x0 = panel as f64 * W + PAD;
        let x1 = panel as f64 * W + W - PAD;
        let _ = writeln!(svg, r#"<text x="{}" y="20">{title}</text>"#, x0);
        let _ = writeln!(
            svg,
            r#"<path d="M{x0},{} L{x0},{} L{x1},{}" fill="none" stroke="black"/>"#,
            y(1.0),
            y(0.0),
            y(0.0)
        );
        for tick in [0.0, 0.5, 1.0] {
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="end">{tick}</text>"#,
                x0 - 4.0,
                y(tick) + 4.0
            );
        }
        let mut seen: Vec<u64> = rows.iter().map(|r| r.m_multiplier).collect();
        seen.sort_unstable();
        seen.dedup();
        for m in seen {
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="middle">x{m}</text>"#,
                x(m, panel),
                y(0.0) + 14.0
            );
        }
        if panel == 0 {
            let _ = writeln!(
                svg,
                r#"<line x1="{x0}" y1="{0}" x2="{x1}" y2="{0}" stroke="gray" stroke-dasharray="4 3"/>"#,
                y(threshold)
            );
        }
        for (i, (_, curve)) in series.iter().enumerate() {
            let points: Vec<String> = curve
                .iter()
                .map(|r| {
                    let v = if panel == 0 { r.largest_identical_frac } else { r.unique_frac };
                    format!("{:.2},{:.2}", x(r.m_multiplier, panel), y(v))
                })
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{}"/>"#,
                points.join(" "),
                COLORS[i % COLORS.len()]
            );
        }
    }
    for (i, (label, _)) in series.iter().enumerate() {
        let ly = H + 14.0 + 20.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{PAD}" y="{}" width="12" height="4" fill="{}"/><text x="{}" y="{}">{label}</text>"#,
            ly - 6.0,
            COLORS[i % COLORS.len()],
            PAD + 18.0,
            ly
        );
    }
    svg.push_str("</svg>\n");
    svg
}
