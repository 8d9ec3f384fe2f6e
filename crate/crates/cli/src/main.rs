//! `reprl`: run replicable RL algorithms, cohorts and sweeps from the shell.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid input, 3 runtime failure.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use replicable_rl::gridworld::{compile, default_paper_grid, render_policy, GridSpec};
use replicable_rl::lab::{
    self, default_rho_sq_values, run_cohort, run_once, sweep, sweep_svg, Algorithm, PairedRunSpec,
    RunParams, SweepSpec, ORACLE_TOL,
};
use replicable_rl::mdp::{evaluate_policy, exact_value_iteration, greedy_policy, policy_return};
use replicable_rl::rep_mdp::{ApproxParams, TupleSampling};
use replicable_rl::reprmax::RMaxParams;
use replicable_rl::rpvi::PviParams;
use replicable_rl::rstat::SampleSizeMode;
use replicable_rl::{Policy, RandTree, Seed, TabularMdp};

const THREADS_ENV: &str = "REPLICABLE_RL_THREADS";

#[derive(Parser)]
#[command(name = "reprl", version, about = "Replicable tabular reinforcement learning")]
struct Cli {
    /// Worker threads (falls back to REPLICABLE_RL_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one algorithm once and print its result.
    Solve(SolveArgs),
    /// Run a cohort of runs that share internal randomness.
    Cohort(CohortArgs),
    /// Cohorts over budget multipliers and rho_sq values.
    Sweep(SweepArgs),
    /// Exact optimal values, or the value of a given policy.
    Oracle(OracleArgs),
    /// Check an MDP (or grid) JSON file.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args, Clone)]
struct Source {
    /// MDP JSON file.
    #[arg(long, conflicts_with = "grid")]
    mdp: Option<PathBuf>,
    /// Grid JSON file; the built-in grid is used when neither is given.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Overrides the discount factor.
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args, Clone)]
struct ParamArgs {
    #[arg(long, default_value = "rpvi")]
    algo: String,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Episode horizon (R-max variants).
    #[arg(short = 'H', long = "horizon", default_value_t = 4)]
    horizon: usize,
    /// Calls per phase, episodes per round, or draws per pair. Defaults to
    /// the theoretical value.
    #[arg(short = 'm', long = "m")]
    m: Option<u64>,
    #[arg(long, default_value_t = 1)]
    m_multiplier: u64,
    #[arg(long)]
    rho_sq: Option<f64>,
    /// Per-estimate accuracy in value units (rpvi).
    #[arg(long)]
    tau: Option<f64>,
    /// Upper bound on values used to normalise queries (rpvi).
    #[arg(long)]
    value_bound: Option<f64>,
    /// Maximum rounds (R-max variants).
    #[arg(long)]
    rounds: Option<usize>,
    /// Visit threshold of the R-max baseline (default: mid-window).
    #[arg(long)]
    threshold: Option<f64>,
    /// Fresh draws for every (s, a, s') in approx_mdp.
    #[arg(long)]
    per_tuple: bool,
    /// Allow sample sizes below the theoretical requirement.
    #[arg(long)]
    practical: bool,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    params: ParamArgs,
    #[arg(long, default_value = "0")]
    internal_seed: String,
    #[arg(long, default_value = "0")]
    sample_seed: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Record wall-clock time (makes output non-reproducible).
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct CohortArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    params: ParamArgs,
    #[arg(long, default_value = "0")]
    internal_seed: String,
    /// Comma-separated sample seeds; overrides --num-runs.
    #[arg(long, value_delimiter = ',')]
    sample_seeds: Vec<String>,
    /// Runs with sample seeds 0, 1, ...
    #[arg(long, default_value_t = 30)]
    num_runs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    source: Source,
    /// Comma-separated algorithms.
    #[arg(long, value_delimiter = ',', default_value = "rpvi,pvi_baseline")]
    algos: Vec<String>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(short = 'H', long = "horizon", default_value_t = 4)]
    horizon: usize,
    #[arg(long, default_value_t = lab::GRID_BASE_M)]
    base_m: u64,
    #[arg(long = "m-multiplier", value_delimiter = ',', default_value = "1,2,4,8,16")]
    multipliers: Vec<u64>,
    /// Comma-separated values; defaults to the union-bound value, 0.01, 0.1, 0.5.
    #[arg(long, value_delimiter = ',')]
    rho_sq: Vec<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    value_bound: Option<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    internal_seeds: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    sample_seeds: Vec<String>,
    #[arg(long, default_value_t = 30)]
    num_runs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Also write an SVG chart of the two fractions.
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    source: Source,
    /// JSON array of actions, one per state, to evaluate.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    file: PathBuf,
    /// Treat the file as a grid specification.
    #[arg(long)]
    grid: bool,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Invalid(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Invalid(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl From<lab::LabError> for Failure {
    fn from(e: lab::LabError) -> Self {
        match e {
            lab::LabError::InvalidSpec(_)
            | lab::LabError::Rpvi(_)
            | lab::LabError::RMax(_)
            | lab::LabError::RepMdp(_) => Failure::Invalid(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Invalid(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

type Outcome<T> = Result<T, Failure>;

struct Loaded {
    label: String,
    mdp: TabularMdp,
    grid: Option<GridSpec>,
}

fn read(path: &Path) -> Outcome<String> {
    fs::read_to_string(path).map_err(|e| runtime(format!("cannot read {}: {e}", path.display())))
}

fn load(source: &Source) -> Outcome<Loaded> {
    let (label, mut mdp, grid) = match (&source.mdp, &source.grid) {
        (Some(path), _) => {
            let mdp = TabularMdp::from_json(&read(path)?).map_err(invalid)?;
            (path.display().to_string(), mdp, None)
        }
        (None, grid_path) => {
            let (label, mut spec) = match grid_path {
                Some(path) => (
                    path.display().to_string(),
                    GridSpec::from_json(&read(path)?).map_err(invalid)?,
                ),
                None => ("default-grid".to_string(), default_paper_grid()),
            };
            if let Some(g) = source.gamma {
                spec.gamma = g;
            }
            let mdp = compile(&spec).map_err(invalid)?;
            (label, mdp, Some(spec))
        }
    };
    if let Some(g) = source.gamma {
        mdp.gamma = g;
        mdp.validate().map_err(invalid)?;
    }
    Ok(Loaded { label, mdp, grid })
}

fn parse_seed(text: &str) -> Outcome<Seed> {
    text.parse().map_err(|e| Failure::Usage(format!("{e}")))
}

fn parse_algo(text: &str) -> Outcome<Algorithm> {
    text.parse().map_err(Failure::Usage)
}

fn mode(practical: bool) -> SampleSizeMode {
    if practical {
        SampleSizeMode::Practical
    } else {
        SampleSizeMode::Strict
    }
}

fn build_params(algo: Algorithm, mdp: &TabularMdp, p: &ParamArgs) -> Outcome<RunParams> {
    let eps = p.eps.unwrap_or(0.1);
    let rho = p.rho.unwrap_or(0.2);
    let delta = p.delta.unwrap_or(0.01);
    let params = match algo {
        Algorithm::Rpvi | Algorithm::PviBaseline => {
            let mut q = PviParams::new(mdp, eps, rho, delta).map_err(invalid)?;
            if let Some(b) = p.value_bound {
                q = q.with_value_bound(b).map_err(invalid)?;
            }
            if let Some(t) = p.tau {
                q = q.with_tau(t).map_err(invalid)?;
            }
            if let Some(r) = p.rho_sq {
                q = q.with_rho_sq(r).map_err(invalid)?;
            }
            let m = p.m.unwrap_or(q.m);
            RunParams::Pvi(q.with_mode(mode(p.practical)).with_m(m))
        }
        Algorithm::Reprmax | Algorithm::RmaxBaseline => {
            let mut q = RMaxParams::new(mdp, eps, rho, delta, p.horizon).map_err(invalid)?;
            if let Some(r) = p.rho_sq {
                let tau = q.tau_sq;
                q = q.with_query(tau, r).map_err(invalid)?;
            }
            if let Some(r) = p.rounds {
                q = q.with_rounds(r);
            }
            let m = p.m.unwrap_or(q.m);
            let q = q.with_mode(mode(p.practical)).with_m(m);
            match p.threshold {
                Some(t) => RunParams::Rmax {
                    params: q,
                    baseline_threshold: t,
                },
                None => RunParams::rmax(q),
            }
        }
        Algorithm::ApproxMdp => {
            let mut q =
                ApproxParams::new(mdp.num_states, mdp.num_actions, eps, rho, delta).map_err(invalid)?;
            if let Some(r) = p.rho_sq {
                q.rho_sq = r;
                q.rstat_config().map_err(invalid)?;
            }
            let m = p.m.unwrap_or(q.m);
            let sampling = if p.per_tuple {
                TupleSampling::PerTuple
            } else {
                TupleSampling::SharedPerPair
            };
            RunParams::Approx(q.with_mode(mode(p.practical)).with_m(m).with_sampling(sampling))
        }
    };
    let m = params
        .m()
        .checked_mul(p.m_multiplier)
        .ok_or_else(|| Failure::Usage("m times multiplier overflows".into()))?;
    Ok(params.with_m(m))
}

fn policy_ascii(loaded: &Loaded, policy: &Policy) -> String {
    match &loaded.grid {
        Some(spec) => render_policy(spec, policy),
        None => policy
            .action
            .iter()
            .enumerate()
            .map(|(s, a)| format!("s{s}: a{a}\n"))
            .collect(),
    }
}

/// Writes `text` to `out`, or stdout when absent.
fn emit(out: &Option<PathBuf>, text: &str) -> Outcome<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display()))),
        None => io::stdout().write_all(text.as_bytes()).map_err(runtime),
    }
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("json serializes") + "\n"
}

fn json_only(format: Format) -> Outcome<()> {
    match format {
        Format::Json => Ok(()),
        Format::Csv => Err(Failure::Usage("this command only writes JSON".into())),
    }
}

fn solve(args: SolveArgs) -> Outcome<()> {
    json_only(args.format)?;
    let loaded = load(&args.source)?;
    let algo = parse_algo(&args.params.algo)?;
    let params = build_params(algo, &loaded.mdp, &args.params)?;
    let internal = parse_seed(&args.internal_seed)?;
    let sample = parse_seed(&args.sample_seed)?;
    let start = Instant::now();
    let result = run_once(
        algo,
        &loaded.mdp,
        &params,
        &RandTree::internal(internal),
        &RandTree::sample(sample),
    )?;
    let optimal = policy_return(
        &loaded.mdp,
        &greedy_policy(&exact_value_iteration(&loaded.mdp, ORACLE_TOL)),
        ORACLE_TOL,
    );
    let ascii = policy_ascii(&loaded, &result.policy);
    let mut doc = json!({
        "command": "solve",
        "algorithm": algo,
        "source": loaded.label,
        "mdp_digest": loaded.mdp.digest(),
        "seeds": {
            "internal": args.internal_seed,
            "internal_hex": lab::seed_text(&internal),
            "sample": args.sample_seed,
            "sample_hex": lab::seed_text(&sample),
        },
        "params": params,
        "output_hash": result.output_hash,
        "eps_gap": optimal - policy_return(&loaded.mdp, &result.policy, ORACLE_TOL),
        "result": result.document,
        "policy_ascii": ascii,
    });
    if args.timing {
        doc["wallclock_s"] = json!(start.elapsed().as_secs_f64());
    }
    emit(&args.out, &pretty(&doc))?;
    if args.out.is_some() {
        print!("{ascii}");
    }
    Ok(())
}

fn sample_seeds(explicit: &[String], num_runs: usize) -> Outcome<(Vec<String>, Vec<Seed>)> {
    let texts: Vec<String> = if explicit.is_empty() {
        (0..num_runs).map(|i| i.to_string()).collect()
    } else {
        explicit.to_vec()
    };
    let seeds = texts.iter().map(|t| parse_seed(t)).collect::<Outcome<Vec<_>>>()?;
    Ok((texts, seeds))
}

fn cohort(args: CohortArgs) -> Outcome<()> {
    let loaded = load(&args.source)?;
    let algo = parse_algo(&args.params.algo)?;
    let params = build_params(algo, &loaded.mdp, &args.params)?;
    let internal = parse_seed(&args.internal_seed)?;
    let (texts, seeds) = sample_seeds(&args.sample_seeds, args.num_runs)?;
    let spec = PairedRunSpec {
        algorithm: algo,
        source: loaded.label.clone(),
        mdp: loaded.mdp.clone(),
        params,
        internal_seed: internal,
        sample_seeds: seeds,
    };
    let report = run_cohort(&spec, args.timing)?;
    let text = match args.format {
        Format::Json => pretty(&json!({
            "command": "cohort",
            "seeds": { "internal": args.internal_seed, "sample": texts },
            "report": report,
        })),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record([
                "algorithm",
                "m",
                "rho_sq",
                "internal_seed",
                "num_runs",
                "largest_identical_frac",
                "unique_frac",
                "pairwise_disagreement",
                "policy_rate",
                "value_rate",
                "model_rate",
                "mean_eps_gap",
                "wallclock_s",
            ])
            .map_err(runtime)?;
            w.write_record([
                algo.name().to_string(),
                spec.params.m().to_string(),
                format!("{:e}", spec.params.rho_sq()),
                args.internal_seed.clone(),
                spec.num_runs().to_string(),
                report.largest_identical_frac.to_string(),
                report.unique_frac.to_string(),
                report.pairwise_disagreement.to_string(),
                report.policy_rate.to_string(),
                report.value_rate.to_string(),
                report.model_rate.map(|r| r.to_string()).unwrap_or_default(),
                report.mean_eps_gap.to_string(),
                report.wallclock_s.unwrap_or(0.0).to_string(),
            ])
            .map_err(runtime)?;
            String::from_utf8(w.into_inner().map_err(runtime)?).map_err(runtime)?
        }
    };
    emit(&args.out, &text)
}

fn run_sweep(args: SweepArgs) -> Outcome<()> {
    let loaded = load(&args.source)?;
    let algorithms = args.algos.iter().map(|a| parse_algo(a)).collect::<Outcome<Vec<_>>>()?;
    let Some(&first) = algorithms.first() else {
        return Err(Failure::Usage("--algos is empty".into()));
    };
    if algorithms.iter().any(|a| lab_family(*a) != lab_family(first)) {
        return Err(Failure::Usage("all --algos must share a parameter family".into()));
    }
    let on_grid = loaded.grid.is_some();
    let eps = args.eps.unwrap_or(lab::GRID_EPSILON);
    let rho = args.rho.unwrap_or(lab::GRID_RHO);
    let delta = args.delta.unwrap_or(lab::GRID_DELTA);
    let (params, default_rho) = match lab_family(first) {
        Family::Pvi => {
            let mut p = PviParams::new(&loaded.mdp, eps, rho, delta).map_err(invalid)?;
            let bound = args.value_bound.or(on_grid.then_some(loaded.mdp.r_max));
            if let Some(b) = bound {
                p = p.with_value_bound(b).map_err(invalid)?;
            }
            let tau = args.tau.or(on_grid.then_some(eps * loaded.mdp.r_max));
            if let Some(t) = tau {
                p = p.with_tau(t).map_err(invalid)?;
            }
            let values = default_rho_sq_values(&p);
            (RunParams::Pvi(p.with_mode(SampleSizeMode::Practical)), values)
        }
        Family::Rmax => {
            let p = RMaxParams::new(&loaded.mdp, eps, rho, delta, args.horizon).map_err(invalid)?;
            let values = vec![p.rho_sq, 0.01, 0.1, 0.5];
            (RunParams::rmax(p.with_mode(SampleSizeMode::Practical)), values)
        }
        Family::Approx => {
            let p = ApproxParams::new(loaded.mdp.num_states, loaded.mdp.num_actions, eps, rho, delta)
                .map_err(invalid)?;
            let values = vec![p.rho_sq, 0.01, 0.1, 0.5];
            (RunParams::Approx(p.with_mode(SampleSizeMode::Practical)), values)
        }
    };
    let rho_sq_values = if args.rho_sq.is_empty() {
        default_rho
    } else {
        args.rho_sq.clone()
    };
    let internal_seeds = args.internal_seeds.iter().map(|s| parse_seed(s)).collect::<Outcome<Vec<_>>>()?;
    let (_, seeds) = sample_seeds(&args.sample_seeds, args.num_runs)?;
    let spec = SweepSpec {
        algorithms,
        source: loaded.label,
        mdp: loaded.mdp,
        params,
        base_m: args.base_m,
        multipliers: args.multipliers,
        rho_sq_values,
        internal_seeds,
        sample_seeds: seeds,
        timing: args.timing,
    };

    let rows = match (args.format, &args.out) {
        (Format::Csv, Some(path)) => {
            let file = fs::File::create(path).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
            sweep(&spec, io::BufWriter::new(file))?
        }
        (Format::Csv, None) => sweep(&spec, io::stdout().lock())?,
        (Format::Json, out) => {
            let rows = sweep(&spec, io::sink())?;
            emit(out, &pretty(&json!({ "command": "sweep", "rows": rows })))?;
            rows
        }
    };
    if let Some(path) = &args.svg {
        fs::write(path, sweep_svg(&rows, 1.0 - rho)).map_err(runtime)?;
    }
    Ok(())
}

#[derive(PartialEq)]
enum Family {
    Pvi,
    Rmax,
    Approx,
}

fn lab_family(a: Algorithm) -> Family {
    match a {
        Algorithm::Rpvi | Algorithm::PviBaseline => Family::Pvi,
        Algorithm::Reprmax | Algorithm::RmaxBaseline => Family::Rmax,
        Algorithm::ApproxMdp => Family::Approx,
    }
}

fn oracle(args: OracleArgs) -> Outcome<()> {
    let loaded = load(&args.source)?;
    let mdp = &loaded.mdp;
    let q = exact_value_iteration(mdp, ORACLE_TOL);
    let optimal = greedy_policy(&q);
    let optimal_return = policy_return(mdp, &optimal, ORACLE_TOL);
    let mut doc = json!({
        "command": "oracle",
        "source": loaded.label,
        "mdp_digest": mdp.digest(),
        "q": q,
        "v": q.state_values(),
        "policy": optimal,
        "optimal_return": optimal_return,
        "policy_ascii": policy_ascii(&loaded, &optimal),
    });
    if let Some(path) = &args.policy {
        let action: Vec<usize> = serde_json::from_str(&read(path)?).map_err(invalid)?;
        if action.len() != mdp.num_states || action.iter().any(|&a| a >= mdp.num_actions) {
            return Err(invalid(format!(
                "policy must list one action below {} for each of {} states",
                mdp.num_actions, mdp.num_states
            )));
        }
        let policy = Policy { action };
        let ret = policy_return(mdp, &policy, ORACLE_TOL);
        doc["evaluated"] = json!({
            "policy": policy,
            "values": evaluate_policy(mdp, &policy, ORACLE_TOL),
            "return": ret,
            "eps_gap": optimal_return - ret,
        });
    }
    emit(&args.out, &pretty(&doc))
}

fn validate(args: ValidateArgs) -> Outcome<()> {
    let text = read(&args.file)?;
    let digest = if args.grid {
        compile(&GridSpec::from_json(&text).map_err(invalid)?).map_err(invalid)?.digest()
    } else {
        TabularMdp::from_json(&text).map_err(invalid)?.digest()
    };
    println!("ok {digest}");
    Ok(())
}

fn configure_threads(flag: Option<usize>) -> Outcome<()> {
    let threads = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Failure::Usage(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(runtime)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let outcome = configure_threads(cli.threads).and_then(|()| match cli.command {
        Command::Solve(a) => solve(a),
        Command::Cohort(a) => cohort(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Oracle(a) => oracle(a),
        Command::Validate(a) => validate(a),
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Usage(m) | Failure::Invalid(m) | Failure::Runtime(m) => m,
            };
            eprintln!("error: {}", msg.trim_end());
            ExitCode::from(f.code())
        }
    }
}
