//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run alone with `cargo test --release -p replicable-rl-cli --test acceptance`.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use sha2::{Digest, Sha256};

use replicable_rl::gridworld::{compile, default_paper_grid};
use replicable_rl::lab::{
    self, default_rho_sq_values, grid_sweep_params, run_cohort, run_pairs, sweep, Algorithm, PairedRunSpec,
    RunParams, SweepSpec,
};
use replicable_rl::mdp::{exact_value_iteration, simulation_gap_bound};
use replicable_rl::rep_mdp;
use replicable_rl::reprmax::{KnownSet, RMaxParams};
use replicable_rl::rpvi::{self, run_rpvi, PviParams};
use replicable_rl::rstat::{rstat_histogram, RStatConfig, SampleSizeMode};
use replicable_rl::sampling::multinomial_counts;
use replicable_rl::{Policy, RandTree, Seed, Stream, StreamPath, TabularMdp};

struct Verdict {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn sigma(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Two states, two actions; state 1 pays for action 0.
fn desk_mdp() -> TabularMdp {
    TabularMdp::new(
        0.5,
        1.0,
        vec![vec![0.0, 0.3], vec![1.0, 0.2]],
        vec![
            vec![vec![0.1, 0.9], vec![0.9, 0.1]],
            vec![vec![0.1, 0.9], vec![0.8, 0.2]],
        ],
        vec![0.5, 0.5],
    )
    .unwrap()
}

fn random_row(n: usize, stream: &mut Stream) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| stream.uniform01() + 0.01).collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|x| x / sum).collect()
}

fn random_mdp(ns: usize, na: usize, gamma: f64, stream: &mut Stream) -> TabularMdp {
    let rewards = (0..ns).map(|_| (0..na).map(|_| stream.uniform01()).collect()).collect();
    let transitions = (0..ns)
        .map(|_| (0..na).map(|_| random_row(ns, stream)).collect())
        .collect();
    let mut mdp = TabularMdp::new(gamma, 1.0, rewards, transitions, vec![1.0 / ns as f64; ns]).unwrap();
    mdp.renormalize();
    mdp
}

/// Expected discounted return by Gaussian elimination on `(I - gamma P) v = r`.
fn exact_return(mdp: &TabularMdp, policy: &Policy) -> f64 {
    let n = mdp.num_states;
    let mut a = vec![vec![0.0; n + 1]; n];
    for s in 0..n {
        let act = policy.action[s];
        for s2 in 0..n {
            a[s][s2] = (s == s2) as u8 as f64 - mdp.gamma * mdp.transitions[s][act][s2];
        }
        a[s][n] = mdp.rewards[s][act];
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        for row in 0..n {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..=n {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    (0..n).map(|s| mdp.initial_dist[s] * a[s][n] / a[s][s]).sum()
}

fn criterion_1() -> Verdict {
    let (tau, rho, delta) = (0.1, 0.2, 0.05);
    let config = RStatConfig::new(tau, rho, delta).unwrap();
    let n = config.required_n();
    let trials = 2000;
    let mut worst = String::new();
    let mut pass = true;
    for (pi, &p) in [0.0, 0.37, 0.5, 1.0].iter().enumerate() {
        let (mut fails, mut disagree) = (0usize, 0usize);
        for t in 0..trials as u64 {
            let path = StreamPath::new("p", pi as u64).push("trial", t);
            let mut answers = [0.0; 2];
            for (run, ans) in answers.iter_mut().enumerate() {
                let counts = multinomial_counts(
                    &[1.0 - p, p],
                    n,
                    &mut RandTree::sample(run as u64).derive(&path),
                );
                let mut offsets = RandTree::internal(0u64).derive(&path);
                *ans = rstat_histogram(&[0.0, 1.0], &counts, &config, SampleSizeMode::Strict, &mut offsets)
                    .unwrap()
                    .value;
                fails += ((*ans - p).abs() > tau) as usize;
            }
            disagree += (answers[0] != answers[1]) as usize;
        }
        let fail_rate = fails as f64 / (2 * trials) as f64;
        let dis_rate = disagree as f64 / trials as f64;
        let ok = fail_rate <= delta + 3.0 * sigma(delta, 2 * trials)
            && dis_rate <= rho + 3.0 * sigma(rho, trials);
        pass &= ok;
        worst += &format!(" p={p}: fail {fail_rate:.4}, disagree {dis_rate:.4};");
    }
    check(pass, format!("n={n},{worst}"))
}

fn criterion_2() -> Verdict {
    let mdp = desk_mdp();
    let params = PviParams::new(&mdp, 0.1, 0.2, 0.01)
        .unwrap()
        .with_mode(SampleSizeMode::Practical);
    let m = params.m;
    let summary = run_pairs(Algorithm::Rpvi, &mdp, &RunParams::Pvi(params), 50, 0, 0).unwrap();
    let need_same = 0.8 - 3.0 * sigma(0.2, 50);
    let need_opt = 1.0 - 0.01 - 3.0 * sigma(0.01, 100);
    check(
        summary.identical_frac >= need_same && summary.eps_optimal_frac >= need_opt,
        format!(
            "m={m}: identical {}/50 (need {need_same:.3}), eps-optimal {}/100 (need {need_opt:.3})",
            summary.identical, summary.eps_optimal
        ),
    )
}

fn criterion_3() -> Verdict {
    let shapes = [(2, 2, 0.5), (3, 2, 0.7), (4, 3, 0.6), (5, 2, 0.8)];
    let mut within = 0;
    let mut worst_ratio: f64 = 0.0;
    for (j, &(ns, na, gamma)) in shapes.iter().enumerate() {
        let mdp = random_mdp(ns, na, gamma, &mut RandTree::internal(100 + j as u64).derive(&StreamPath::new("mdp", 0)));
        let q_star = exact_value_iteration(&mdp, 1e-13);
        let params = PviParams::new(&mdp, 0.1, 0.2, 0.01).unwrap();
        let n = params.rstat_config().unwrap().required_n();
        let params = params.with_m(n);
        let bound = params.tau * gamma / (1.0 - gamma) + gamma.powi(params.phases as i32) / (1.0 - gamma);
        for run in 0..25u64 {
            let out = run_rpvi(&mdp, &params, &RandTree::internal(run), &RandTree::sample(1000 + run)).unwrap();
            let err = out.q.max_abs_diff(&q_star);
            worst_ratio = worst_ratio.max(err / bound);
            within += (err <= bound) as usize;
        }
    }
    check(
        within >= 99,
        format!("{within}/100 runs within the bound (need 99); worst error/bound {worst_ratio:.3}"),
    )
}

fn criterion_4_and_10_pvi() -> (Verdict, Verdict) {
    let grid = default_paper_grid();
    let mdp = compile(&grid).unwrap();
    let params = grid_sweep_params(&mdp).unwrap();
    let theory_m = rpvi::theoretical_m(&PviParams::new(&mdp, lab::GRID_EPSILON, lab::GRID_RHO, lab::GRID_DELTA).unwrap());
    let rho_values = default_rho_sq_values(&params);
    let spec = SweepSpec {
        algorithms: vec![Algorithm::Rpvi, Algorithm::PviBaseline],
        source: "default-grid".into(),
        mdp,
        params: RunParams::Pvi(params),
        base_m: lab::GRID_BASE_M,
        multipliers: lab::GRID_MULTIPLIERS.to_vec(),
        rho_sq_values: rho_values.clone(),
        internal_seeds: vec![Seed::from(0u64)],
        sample_seeds: PairedRunSpec::seed_range(0, 30),
        timing: false,
    };
    let rows = sweep(&spec, std::io::sink()).unwrap();
    let rpvi_rows: Vec<_> = rows.iter().filter(|r| r.algorithm == Algorithm::Rpvi).cloned().collect();
    let violations = lab::monotone_violations(&rpvi_rows);
    // Pinned fixture: union-bound rho_sq, internal seed 0.
    let pinned: Vec<_> = rpvi_rows.iter().filter(|r| r.rho_sq == Some(rho_values[0])).collect();
    let crossing = pinned.iter().find(|r| r.largest_identical_frac >= 0.8);
    let curve: Vec<String> = pinned.iter().map(|r| format!("{:.3}", r.largest_identical_frac)).collect();
    let c4 = match crossing {
        Some(c) => check(
            violations.is_empty() && c.m_multiplier <= 16,
            format!(
                "pinned curve [{}] crosses 0.8 at x{} (m={} vs theoretical {theory_m:.3e}); {} monotonicity violations over {} curves",
                curve.join(", "),
                c.m_multiplier,
                lab::GRID_BASE_M * c.m_multiplier,
                violations.len(),
                rho_values.len()
            ),
        ),
        None => check(false, format!("pinned curve [{}] never reaches 0.8", curve.join(", "))),
    };
    let fixture_mult = crossing.map(|c| c.m_multiplier).unwrap_or(4);
    let rep = pinned.iter().find(|r| r.m_multiplier == fixture_mult).unwrap();
    let base = rows
        .iter()
        .find(|r| r.algorithm == Algorithm::PviBaseline && r.m_multiplier == fixture_mult)
        .unwrap();
    let c10 = check(
        base.largest_identical_frac < rep.largest_identical_frac,
        format!(
            "x{fixture_mult}: pvi_baseline {:.3} < rpvi {:.3}",
            base.largest_identical_frac, rep.largest_identical_frac
        ),
    );
    (c4, c10)
}

fn rmax_fixture() -> RunParams {
    RunParams::rmax(
        RMaxParams::new(&desk_mdp(), 0.1, 0.2, 0.01, 4)
            .unwrap()
            .with_m(100_000)
            .with_mode(SampleSizeMode::Practical),
    )
}

fn criterion_5() -> Verdict {
    let summary = run_pairs(Algorithm::Reprmax, &desk_mdp(), &rmax_fixture(), 30, 0, 0).unwrap();
    let need = 0.8 - 3.0 * sigma(0.2, 30);
    check(
        summary.identical_frac >= need && summary.eps_optimal == 2 * summary.pairs,
        format!(
            "m=100000, H=4: identical {}/30 (need {need:.3}), eps-optimal {}/60, max gap {:.2e}",
            summary.identical, summary.eps_optimal, summary.max_eps_gap
        ),
    )
}

fn criterion_10_rmax() -> Verdict {
    let cohort = |algorithm| {
        run_cohort(
            &PairedRunSpec {
                algorithm,
                source: "desk".into(),
                mdp: desk_mdp(),
                params: rmax_fixture(),
                internal_seed: Seed::from(0u64),
                sample_seeds: PairedRunSpec::seed_range(0, 30),
            },
            false,
        )
        .unwrap()
        .largest_identical_frac
    };
    let (rep, base) = (cohort(Algorithm::Reprmax), cohort(Algorithm::RmaxBaseline));
    check(base < rep, format!("rmax_baseline {base:.3} < reprmax {rep:.3}"))
}

fn criterion_6() -> Verdict {
    let settings = [(1.0, 10.0), (2.0, 20.0), (5.0, 20.0), (4.0, 8.0)];
    let trials = 10_000u64;
    let mut pass = true;
    let mut detail = Vec::new();
    for (si, &(drift, w)) in settings.iter().enumerate() {
        let k = 10.0;
        let mut disagree = 0usize;
        for t in 0..trials {
            let path = StreamPath::new("setting", si as u64).push("trial", t);
            let mut draws = RandTree::sample(0u64).derive(&path);
            // Rounds below the window, then one round landing inside it.
            let rounds = 1 + draws.uniform_int(4).unwrap();
            let mut first = Vec::new();
            let mut second = Vec::new();
            // Both runs stay below k (at most 0.75 k) before the last round.
            for _ in 0..rounds {
                let step = draws.uniform(0.0, k / (2.0 * rounds as f64)).unwrap();
                first.push(step);
                second.push(step * draws.uniform(0.5, 1.5).unwrap());
            }
            let n1 = draws.uniform(k, k + w).unwrap();
            let n2 = (n1 + draws.uniform(-drift, drift).unwrap()).max(0.0);
            let (s1, s2): (f64, f64) = (first.iter().sum(), second.iter().sum());
            first.push(n1 - s1);
            second.push(n2 - s2);
            let mut known = Vec::new();
            for incs in [&first, &second] {
                let mut set = KnownSet::new(1, 1, k, w);
                let mut thresholds = RandTree::internal(0u64).derive(&path);
                for &inc in incs.iter() {
                    set.update_with_increments(&[vec![inc]], &mut thresholds);
                }
                known.push(set.is_known(0, 0));
            }
            disagree += (known[0] != known[1]) as usize;
        }
        let rate = disagree as f64 / trials as f64;
        let bound = drift / w;
        let ok = rate <= bound + 3.0 * sigma(bound, trials as usize);
        pass &= ok;
        detail.push(format!("drift {drift}, w {w}: {rate:.4} vs {bound:.3}"));
    }
    check(pass, detail.join("; "))
}

fn criterion_7() -> Verdict {
    let mut violations = 0;
    let mut checked = 0;
    let mut tightest: f64 = 0.0;
    for pair in 0..100u64 {
        let mut stream = RandTree::internal(7u64).derive(&StreamPath::new("pair", pair));
        let ns = 2 + stream.uniform_int(5).unwrap() as usize;
        let na = 1 + stream.uniform_int(3).unwrap() as usize;
        let gamma = stream.uniform(0.0, 0.95).unwrap();
        let m1 = random_mdp(ns, na, gamma, &mut stream);
        let mix = stream.uniform(0.0, 0.5).unwrap();
        let mut m2 = m1.clone();
        for s in 0..ns {
            for a in 0..na {
                let noise = random_row(ns, &mut stream);
                m2.transitions[s][a] = m1.transitions[s][a]
                    .iter()
                    .zip(&noise)
                    .map(|(p, q)| (1.0 - mix) * p + mix * q)
                    .collect();
            }
        }
        m2.renormalize();
        m2.initial_dist = m1.initial_dist.clone();
        let mut l1: f64 = 0.0;
        for s in 0..ns {
            for a in 0..na {
                let d: f64 = (0..ns).map(|j| (m1.transitions[s][a][j] - m2.transitions[s][a][j]).abs()).sum();
                l1 = l1.max(d);
            }
        }
        let bound = m1.r_max / (2.0 * (1.0 - gamma).powi(2)) * l1;
        if (simulation_gap_bound(&m1, &m2).unwrap() - bound).abs() > 1e-12 * bound.max(1.0) {
            violations += 1;
        }
        for _ in 0..100 {
            let policy = Policy {
                action: (0..ns).map(|_| stream.uniform_int(na as u64).unwrap() as usize).collect(),
            };
            let gap = (exact_return(&m1, &policy) - exact_return(&m2, &policy)).abs();
            tightest = tightest.max(gap / bound);
            violations += (gap > bound + 1e-12) as usize;
            checked += 1;
        }
    }
    check(
        violations == 0,
        format!("{checked} policy checks, {violations} violations, largest gap/bound {tightest:.3}"),
    )
}

fn criterion_8() -> Verdict {
    let (eps, rho, delta, gamma) = (0.1, 0.2, 0.01, 0.5);
    let mut cells = 0;
    let mut failures = Vec::new();
    let mut smallest = f64::INFINITY;
    for ns in 2..=20usize {
        for na in 2..=5usize {
            let uniform = vec![vec![vec![1.0 / ns as f64; ns]; na]; ns];
            let mut mdp = TabularMdp::new(gamma, 1.0, vec![vec![0.0; na]; ns], uniform, vec![1.0 / ns as f64; ns]).unwrap();
            mdp.renormalize();
            let pvi = rpvi::theoretical_m_real(&PviParams::new(&mdp, eps, rho, delta).unwrap());
            let entry = rep_mdp::entry_accuracy_for(eps, gamma, ns, mdp.r_max);
            let approx = rep_mdp::theoretical_m_real(ns, na, entry, rho, delta);
            smallest = smallest.min(approx / pvi);
            if !(pvi < approx) {
                failures.push(format!("({ns},{na})"));
            }
            cells += 1;
        }
    }
    check(
        failures.is_empty(),
        format!(
            "{cells} cells at eps={eps}, rho={rho}, delta={delta}, gamma={gamma}; smallest ratio {smallest:.3}; failing {:?}",
            failures
        ),
    )
}

fn sha_file(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

fn criterion_9() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mdp_path = dir.path().join("desk.json");
    std::fs::write(&mdp_path, desk_mdp().to_json()).unwrap();
    let mdp = mdp_path.to_str().unwrap();
    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("solve-rpvi", vec!["solve", "--algo", "rpvi", "--practical", "-m", "13000", "--internal-seed", "5", "--sample-seed", "0x11"]),
        ("solve-pvi", vec!["solve", "--algo", "pvi_baseline", "--mdp", mdp, "-m", "500", "--sample-seed", "3"]),
        ("solve-reprmax", vec!["solve", "--algo", "reprmax", "--mdp", mdp, "--practical", "-m", "300", "--internal-seed", "1"]),
        ("solve-rmax", vec!["solve", "--algo", "rmax_baseline", "--mdp", mdp, "-m", "300"]),
        ("solve-approx", vec!["solve", "--algo", "approx_mdp", "--mdp", mdp, "--practical", "-m", "1000", "--per-tuple"]),
        ("cohort", vec!["cohort", "--mdp", mdp, "--practical", "-m", "2000", "--num-runs", "6"]),
        ("cohort-csv", vec!["cohort", "--mdp", mdp, "--practical", "-m", "2000", "--sample-seeds", "1,2,3", "--format", "csv"]),
        ("sweep", vec!["sweep", "--num-runs", "3", "--m-multiplier", "1,2", "--rho-sq", "0.1"]),
        ("sweep-json", vec!["sweep", "--mdp", mdp, "--num-runs", "3", "--base-m", "100", "--m-multiplier", "1,2", "--format", "json"]),
        ("oracle", vec!["oracle"]),
        ("validate", vec!["validate", mdp]),
    ];
    let bin = env!("CARGO_BIN_EXE_reprl");
    let mut mismatched = Vec::new();
    for (name, args) in &commands {
        let mut hashes = Vec::new();
        for rep in 0..2 {
            let out = dir.path().join(format!("{name}-{rep}.out"));
            let svg = dir.path().join(format!("{name}-{rep}.svg"));
            let mut cmd = Command::new(bin);
            cmd.args(args);
            if !matches!(*name, "validate") {
                cmd.arg("--out").arg(&out);
            }
            if name.starts_with("sweep") {
                cmd.arg("--svg").arg(&svg);
            }
            let result = cmd.output().unwrap();
            if !result.status.success() {
                mismatched.push(format!("{name} exited {:?}", result.status.code()));
                break;
            }
            let mut h = Sha256::new();
            h.update(&result.stdout);
            if out.exists() {
                h.update(sha_file(&out));
            }
            if svg.exists() {
                h.update(sha_file(&svg));
            }
            hashes.push(hex::encode(h.finalize()));
        }
        if hashes.len() == 2 && hashes[0] != hashes[1] {
            mismatched.push(name.to_string());
        }
    }
    check(
        mismatched.is_empty(),
        format!("{} commands re-run; differing: {:?}", commands.len(), mismatched),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |n: &str, v: Verdict, started: Instant| {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        failed += !v.pass as usize;
        println!("{tag} criterion {n}: {} [{:.1}s]", v.detail, started.elapsed().as_secs_f64());
    };
    let t = Instant::now();
    report("1", criterion_1(), t);
    let t = Instant::now();
    report("2", criterion_2(), t);
    let t = Instant::now();
    report("3", criterion_3(), t);
    let t = Instant::now();
    let (c4, c10_pvi) = criterion_4_and_10_pvi();
    report("4", c4, t);
    let t = Instant::now();
    report("5", criterion_5(), t);
    let t = Instant::now();
    report("6", criterion_6(), t);
    let t = Instant::now();
    report("7", criterion_7(), t);
    let t = Instant::now();
    report("8", criterion_8(), t);
    let t = Instant::now();
    report("9", criterion_9(), t);
    let t = Instant::now();
    let c10_rmax = criterion_10_rmax();
    report(
        "10",
        check(
            c10_pvi.pass && c10_rmax.pass,
            format!("{}; {}", c10_pvi.detail, c10_rmax.detail),
        ),
        t,
    );
    if failed > 0 {
        eprintln!("{failed} criteria failed");
        std::process::exit(1);
    }
}
