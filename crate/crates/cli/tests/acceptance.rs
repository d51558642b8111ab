//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line to stderr
//! (uncaptured, so it shows up in plain `cargo test` output) and then asserts.
//!
//! Trained models are shared through a `OnceLock`: equilibrium and flow fields
//! for all three environments, trained with default settings.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use eqm_cli::{
    cmd_compare_budget, cmd_gen_data, cmd_scan_threshold, cmd_train, cmd_warm_start_study, keys_for, RunConfig,
};
use eqm_core::analysis::{check_descent, estimate_contraction, sufficient_iterations, warm_start_saving};
use eqm_core::envs::{episode_seeds, run_closed_loop, success_rate, EnvKind, EnvSpec, LoopOptions};
use eqm_core::field::{field_forward, Activation, FieldConfig, FieldParams};
use eqm_core::formats::load_checkpoint;
use eqm_core::policy::{EqmDecoder, FlowDecoder};
use eqm_core::solver::{solve_equilibrium, SolverConfig};
use eqm_core::training::{eqm_loss_fixed, flow_loss_fixed, ObjectiveSample, ScheduleSpec};
use eqm_core::{ActionChunk, AnalyticField, Condition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances.
const FD_STEP: f64 = 1e-6;
const FD_MAX_REL_ERR: f64 = 1e-6;
const FD_REL_FLOOR: f64 = 0.1;
const ENERGY_SLACK: f64 = 1e-12;
const BOUND_REL_SLACK: f64 = 1e-12;
const ROUNDOFF: f64 = 1e-13;
const RATE_RANGE: (f64, f64) = (0.499, 0.501);
const WARM_LE_COLD_MIN: f64 = 0.8;
const EQM_SUCCESS_MIN: f64 = 0.9;
const FLOW_SUCCESS_MIN: f64 = 0.8;
const PARAM_COUNT_REL_DIFF_MAX: f64 = 0.01;
const BUDGET: usize = 64;
const EPISODES: usize = 200;
const SEED: u64 = 2024;

const ENVS: [EnvKind; 3] = [EnvKind::Reach, EnvKind::TwoWaypoint, EnvKind::Press];

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let line = format!("acceptance {criterion}: {status} {name}: {detail}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn run_config(command: &str, pairs: &[(&str, String)]) -> RunConfig {
    let overrides: Vec<(String, String)> = pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    RunConfig::resolve(command, keys_for(command).unwrap(), None, &overrides).unwrap()
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

struct Models {
    _dir: tempfile::TempDir,
    root: PathBuf,
    eqm: Vec<PathBuf>,
    flow: Vec<PathBuf>,
    /// Dataset generation plus both trainings on reach.
    reach_setup: Duration,
}

fn models() -> &'static Models {
    static CELL: OnceLock<Models> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let (mut eqm, mut flow) = (Vec::new(), Vec::new());
        let mut reach_setup = Duration::ZERO;
        for env in ENVS {
            let start = Instant::now();
            let data = root.join(format!("{env}.eqmd"));
            cmd_gen_data(&run_config("gen-data", &[("env", env.to_string()), ("out", path_str(&data))])).unwrap();
            for (objective, list) in [("eqm", &mut eqm), ("flow", &mut flow)] {
                let out = root.join(format!("{objective}_{env}"));
                let trained = cmd_train(&run_config(
                    "train",
                    &[
                        ("dataset", path_str(&data)),
                        ("objective", objective.to_string()),
                        ("out", path_str(&out)),
                    ],
                ))
                .unwrap();
                list.push(trained.checkpoint_path);
            }
            if env == EnvKind::Reach {
                reach_setup = start.elapsed();
            }
        }
        Models {
            _dir: dir,
            root,
            eqm,
            flow,
            reach_setup,
        }
    })
}

// ---------------------------------------------------------------- 1

fn random_objective_problem(rng: &mut ChaCha8Rng, time_conditioned: bool) -> (FieldParams, Vec<ObjectiveSample>) {
    let horizon = [1, 2, 4][rng.random_range(0..3)];
    let dim = rng.random_range(1..=3);
    let width = rng.random_range(0..=3);
    let hidden = (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=6)).collect();
    let cfg = FieldConfig::new(horizon, dim, width)
        .with_hidden(hidden)
        .with_activation(Activation::Tanh)
        .time_conditioned(time_conditioned);
    let mut params = FieldParams::zeros(cfg).unwrap();
    for v in params.values_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let samples = (0..rng.random_range(1..=4))
        .map(|_| ObjectiveSample {
            cond: Condition::from_features((0..width).map(|_| rng.random_range(-1.0..1.0)).collect(), 0).unwrap(),
            data: ActionChunk::standard_normal(horizon, dim, rng),
            noise: ActionChunk::standard_normal(horizon, dim, rng),
            gamma: rng.random_range(0.0..1.0),
        })
        .collect();
    (params, samples)
}

/// Loss written from the definitions on top of the single-sample forward pass.
fn oracle_loss(params: &FieldParams, samples: &[ObjectiveSample], flow: bool) -> f64 {
    let mut total = 0.0;
    for s in samples {
        let g = s.gamma;
        let (a, e) = (s.data.as_slice(), s.noise.as_slice());
        let x: Vec<f64> = a.iter().zip(e).map(|(a, e)| g * a + (1.0 - g) * e).collect();
        let x = ActionChunk::new(s.data.horizon(), s.data.dim(), x).unwrap();
        let out = field_forward(params, &x, &s.cond, flow.then_some(g)).unwrap();
        for (i, o) in out.as_slice().iter().enumerate() {
            let target = if flow { a[i] - e[i] } else { (1.0 - g) * (e[i] - a[i]) };
            total += (o - target) * (o - target);
        }
    }
    total / samples.len() as f64
}

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    let configs = 20;
    for trial in 0..2 * configs {
        let flow = trial % 2 == 1;
        let (params, samples) = random_objective_problem(&mut rng, flow);
        let (_, grad) = if flow {
            flow_loss_fixed(&params, &samples).unwrap()
        } else {
            eqm_loss_fixed(&params, &samples, ScheduleSpec::Linear).unwrap()
        };
        let mut probe = params.clone();
        for i in 0..params.len() {
            let orig = probe.values()[i];
            probe.values_mut()[i] = orig + FD_STEP;
            let up = oracle_loss(&probe, &samples, flow);
            probe.values_mut()[i] = orig - FD_STEP;
            let down = oracle_loss(&probe, &samples, flow);
            probe.values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grad.values()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= FD_MAX_REL_ERR && secs < 30.0;
    report(
        1,
        "gradient correctness",
        pass,
        &format!("{configs} configs x 2 objectives, max rel err {worst:.2e} (<= {FD_MAX_REL_ERR:e}), {secs:.2}s"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

fn plain(eta: f64, tau: f64, cap: usize) -> SolverConfig {
    SolverConfig {
        step_size: eta,
        momentum: 0.0,
        threshold: tau,
        max_iters: cap,
        record_iterates: true,
    }
}

#[test]
fn criterion_2_descent_bound() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (h, d, k) = (4, 2, 50);
    let mut ok = true;
    for _ in 0..20 {
        let kappa = rng.random_range(0.5..3.0);
        let star = ActionChunk::standard_normal(h, d, &mut rng);
        let init = star.add(&ActionChunk::standard_normal(h, d, &mut rng).scale(3.0)).unwrap();
        let eta = 1.0 / kappa;
        let report = check_descent(&AnalyticField::quadratic(kappa, star.clone()), &plain(eta, 0.0, k), &init, k).unwrap();
        // Oracle: closed-form energy 0.5 kappa ||A - A*||^2 recomputed on the solver's own map.
        let e0 = 0.5 * kappa * init.distance(&star).unwrap().powi(2);
        ok &= (report.energies[0] - e0).abs() <= 1e-12 * e0.max(1.0);
        ok &= report.energies.windows(2).all(|w| w[1] <= w[0] + ENERGY_SLACK);
        let mut running = f64::INFINITY;
        for (j, r) in report.residuals.iter().enumerate() {
            running = running.min(r * r);
            let bound = 2.0 * e0 / (eta * (j + 1) as f64 * (h * d) as f64);
            ok &= running <= bound * (1.0 + BOUND_REL_SLACK);
        }
    }
    // Tight 1-D case: E = x^2 / 2, E0 = 1, K = 1, eta = 1.
    let tight = check_descent(
        &AnalyticField::quadratic(1.0, ActionChunk::zeros(1, 1)),
        &plain(1.0, 0.0, 1),
        &ActionChunk::new(1, 1, vec![2f64.sqrt()]).unwrap(),
        1,
    )
    .unwrap();
    let tight_ok = (tight.bounds[0] - 2.0).abs() <= 1e-12 && (tight.prefix_min_sq[0] - 2.0).abs() <= 1e-12;
    let secs = start.elapsed().as_secs_f64();
    let pass = ok && tight_ok && secs < 1.0;
    report(
        2,
        "descent bound",
        pass,
        &format!(
            "20 random quadratics K = {k} ok = {ok}; tight case bound {} actual {}; {secs:.3}s",
            tight.bounds[0], tight.prefix_min_sq[0]
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_3_contraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (h, d) = (4, 2);
    let star = ActionChunk::standard_normal(h, d, &mut rng);
    let init = star.add(&ActionChunk::standard_normal(h, d, &mut rng)).unwrap();
    let field = AnalyticField::linear(1.0, star.clone());
    let (_, trace) = solve_equilibrium(&field, &Condition::empty(), &init, &plain(0.5, 0.0, 30)).unwrap();
    let rate = estimate_contraction(&trace, &star).unwrap().rate;
    let dist0 = init.distance(&star).unwrap();
    let (lipschitz, rho) = (1.0f64, 0.5f64);
    let decay_ok = trace.residuals.iter().enumerate().all(|(k, &r)| {
        let bound = lipschitz / ((h * d) as f64).sqrt() * rho.powi(k as i32) * dist0;
        r <= bound * (1.0 + BOUND_REL_SLACK) + ROUNDOFF
    });
    let pass = (RATE_RANGE.0..=RATE_RANGE.1).contains(&rate) && decay_ok;
    report(
        3,
        "contraction",
        pass,
        &format!("rho_hat = {rate:.6}, residual decay bound held at all {} steps: {decay_ok}", trace.residuals.len()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_sufficient_iterations() {
    let formula = sufficient_iterations(1.0, 1.0, 0.1, 1, 1, 0.5).unwrap();
    let oracle = (10f64.ln() / 2f64.ln()).ceil() as usize;
    let field = AnalyticField::linear(1.0, ActionChunk::zeros(1, 1));
    let cond = Condition::empty();
    let one = |v: f64| ActionChunk::new(1, 1, vec![v]).unwrap();
    let (_, run) = solve_equilibrium(&field, &cond, &one(1.0), &plain(0.5, 0.1, 100)).unwrap();
    let at_init = sufficient_iterations(1.0, 0.05, 0.1, 1, 1, 0.5).unwrap();
    let (_, run0) = solve_equilibrium(&field, &cond, &one(0.05), &plain(0.5, 0.1, 100)).unwrap();
    let pass = formula == 4 && formula == oracle && run.iterations <= formula && at_init == 0 && run0.iterations == 0;
    report(
        4,
        "sufficient iterations",
        pass,
        &format!(
            "formula {formula} (oracle {oracle}), solver stop {}; met at init: formula {at_init}, solver stop {}",
            run.iterations, run0.iterations
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_5_warm_start_saving() {
    let predicted = warm_start_saving(0.5, 0.5).unwrap();
    let oracle = (1.0f64 / 0.5).ln() / (1.0f64 / 0.5).ln();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (h, d) = (4, 2);
    let star = ActionChunk::standard_normal(h, d, &mut rng);
    let field = AnalyticField::linear(1.0, star.clone());
    let dir = ActionChunk::standard_normal(h, d, &mut rng);
    let dir = dir.scale(1.0 / dir.norm());
    let tau = 1e-3;
    let iters = |dist: f64| {
        let init = star.axpy(dist, &dir).unwrap();
        solve_equilibrium(&field, &Condition::empty(), &init, &plain(0.5, tau, 200)).unwrap().1.iterations
    };
    let (cold, warm) = (iters(1.0), iters(0.5));
    let gap = cold as f64 - warm as f64;
    let linear_ok = (predicted - oracle).abs() < 1e-12 && (gap - predicted).abs() <= 1.0;

    let m = models();
    let out = m.root.join("warm_study");
    let study = cmd_warm_start_study(&run_config(
        "warm-start-study",
        &[
            ("checkpoint", path_str(&m.eqm[0])),
            ("env", "reach".into()),
            ("episodes", EPISODES.to_string()),
            ("seed", SEED.to_string()),
            ("out", path_str(&out)),
        ],
    ))
    .unwrap();
    let frac = study.warm_le_cold_fraction();
    let pass = linear_ok && frac >= WARM_LE_COLD_MIN && !study.pairs.is_empty();
    report(
        5,
        "warm-start saving",
        pass,
        &format!(
            "linear field: predicted {predicted}, measured {gap} (cold {cold}, warm {warm}); reach: {} paired cycles, warm <= cold in {frac:.3} (>= {WARM_LE_COLD_MIN}), paired median ratio {:.3}, medians cold {} warm {}",
            study.pairs.len(),
            study.paired_median_ratio(),
            study.cold_median,
            study.warm_median
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_6_desk_scale_learning() {
    let m = models();
    let start = Instant::now();
    let spec = EnvSpec::new(EnvKind::Reach);
    let seeds = episode_seeds(SEED, EPISODES);
    let eqm_ckpt = load_checkpoint(&m.eqm[0]).unwrap();
    let flow_ckpt = load_checkpoint(&m.flow[0]).unwrap();
    let (n_eqm, n_flow) = (eqm_ckpt.params.len() as f64, flow_ckpt.params.len() as f64);
    let param_diff = (n_eqm - n_flow).abs() / n_eqm;

    let solver = SolverConfig {
        threshold: 1e-3,
        max_iters: BUDGET,
        ..SolverConfig::default()
    };
    let eqm = EqmDecoder::new(eqm_ckpt.params, eqm_ckpt.normalization.unwrap(), solver).unwrap();
    let flow = FlowDecoder::new(flow_ckpt.params, flow_ckpt.normalization.unwrap(), BUDGET).unwrap();
    let opts = LoopOptions::default();
    let eqm_rate = success_rate(&run_closed_loop(&eqm, &spec, &seeds, &opts).unwrap());
    let flow_rate = success_rate(&run_closed_loop(&flow, &spec, &seeds, &opts).unwrap());
    let total = m.reach_setup + start.elapsed();
    let pass = eqm_rate >= EQM_SUCCESS_MIN
        && flow_rate >= FLOW_SUCCESS_MIN
        && param_diff <= PARAM_COUNT_REL_DIFF_MAX
        && total < Duration::from_secs(15 * 60);
    report(
        6,
        "desk-scale learning",
        pass,
        &format!(
            "reach, {EPISODES} episodes: eqm {eqm_rate} (>= {EQM_SUCCESS_MIN}), flow {flow_rate} (>= {FLOW_SUCCESS_MIN}); params eqm {n_eqm} flow {n_flow}; data + training + evaluation {:.1}s",
            total.as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_matched_budget() {
    let m = models();
    let join = |ps: &[PathBuf]| ps.iter().map(|p| path_str(p)).collect::<Vec<_>>().join(",");
    let rows = cmd_compare_budget(&run_config(
        "compare-budget",
        &[
            ("env", "reach,two_waypoint,press".into()),
            ("eqm", join(&m.eqm)),
            ("flow", join(&m.flow)),
            ("budget", BUDGET.to_string()),
            ("episodes", EPISODES.to_string()),
            ("seed", SEED.to_string()),
            ("out", path_str(&m.root.join("compare"))),
        ],
    ))
    .unwrap();
    let decoders_exact = rows
        .iter()
        .filter(|r| r.decoder != "expert")
        .all(|r| r.exact_budget(BUDGET) && r.results.iter().all(|e| e.evaluations == BUDGET * e.cycles));
    let experts_perfect = rows.iter().filter(|r| r.decoder == "expert").all(|r| r.success_rate == 1.0);
    let pass = rows.len() == 9 && decoders_exact && experts_perfect;
    let summary: Vec<String> = rows
        .iter()
        .map(|r| format!("{}/{}={}", r.env, r.decoder, r.success_rate))
        .collect();
    report(
        7,
        "matched-budget protocol",
        pass,
        &format!(
            "B = {BUDGET}, every cycle exact: {decoders_exact}, expert rows 1.0: {experts_perfect}; {}",
            summary.join(" ")
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_8_threshold_scan() {
    let m = models();
    let mut ok = true;
    let mut notes = Vec::new();
    for (i, env) in ENVS.iter().enumerate() {
        let scan = cmd_scan_threshold(&run_config(
            "scan-threshold",
            &[
                ("checkpoint", path_str(&m.eqm[i])),
                ("env", env.to_string()),
                ("episodes", EPISODES.to_string()),
                ("seed", SEED.to_string()),
                ("out", path_str(&m.root.join(format!("scan_{env}")))),
            ],
        ))
        .unwrap();
        let monotone = scan.mean_iterations_non_increasing();
        ok &= monotone;
        let means: Vec<String> = scan.rows.iter().map(|r| format!("{:.2}", r.mean_iterations)).collect();
        let success: Vec<String> = scan.rows.iter().map(|r| r.success_rate.to_string()).collect();
        notes.push(format!(
            "{env}: mean iters [{}] non-increasing {monotone}, success [{}] non-monotone {}",
            means.join(" "),
            success.join(" "),
            scan.success_non_monotone
        ));
    }
    report(8, "threshold-scan structure", ok, &notes.join("; "));
    assert!(ok);
}

// ---------------------------------------------------------------- 9

fn eqm(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_eqm")).args(args).output().unwrap();
    assert!(status.status.success(), "{args:?}: {}", String::from_utf8_lossy(&status.stderr));
}

fn snapshot(paths: &[PathBuf]) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for p in paths {
        if p.is_dir() {
            for entry in std::fs::read_dir(p).unwrap() {
                let f = entry.unwrap().path();
                out.insert(f.clone(), std::fs::read(&f).unwrap());
            }
        } else {
            out.insert(p.clone(), std::fs::read(p).unwrap());
        }
    }
    out
}

#[test]
fn criterion_9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let s = |name: &str| path_str(&dir.path().join(name));
    let eqm_ckpt = s("eqm/checkpoint.eqmf");
    let flow_ckpt = s("flow/checkpoint.eqmf");
    let runs: Vec<(&str, Vec<String>, Vec<PathBuf>)> = vec![
        (
            "gen-data",
            vec!["gen-data".into(), "--episodes".into(), "40".into(), "--force".into(), "--out".into(), s("reach.eqmd")],
            vec![p("reach.eqmd"), p("reach.eqmd.config.txt")],
        ),
        (
            "train eqm",
            vec!["train".into(), "--dataset".into(), s("reach.eqmd"), "--steps".into(), "300".into(), "--out".into(), s("eqm")],
            vec![p("eqm")],
        ),
        (
            "train flow",
            vec![
                "train".into(), "--dataset".into(), s("reach.eqmd"), "--objective".into(), "flow".into(),
                "--steps".into(), "300".into(), "--out".into(), s("flow"),
            ],
            vec![p("flow")],
        ),
        (
            "compare-budget",
            vec![
                "compare-budget".into(), "--eqm".into(), eqm_ckpt.clone(), "--flow".into(), flow_ckpt,
                "--budget".into(), "16".into(), "--episodes".into(), "8".into(), "--out".into(), s("cmp"),
            ],
            vec![p("cmp")],
        ),
        (
            "scan-threshold",
            vec![
                "scan-threshold".into(), "--checkpoint".into(), eqm_ckpt.clone(), "--taus".into(), "0.1,1".into(),
                "--max-iters".into(), "32".into(), "--episodes".into(), "8".into(), "--out".into(), s("scan"),
            ],
            vec![p("scan")],
        ),
        (
            "warm-start-study",
            vec![
                "warm-start-study".into(), "--checkpoint".into(), eqm_ckpt.clone(), "--tau".into(), "0.05".into(),
                "--episodes".into(), "8".into(), "--out".into(), s("warm"),
            ],
            vec![p("warm")],
        ),
        ("verify-prop1", vec!["verify-prop1".into(), "--out".into(), s("verify")], vec![p("verify")]),
        (
            "solve",
            vec![
                "solve".into(), "--checkpoint".into(), eqm_ckpt, "--cond".into(), "0.2,0.3,1,0.7,0.6,0.7,0.6".into(),
                "--seed".into(), "5".into(), "--out".into(), s("solve"),
            ],
            vec![p("solve")],
        ),
    ];
    let mut failures = Vec::new();
    for (name, args, outputs) in &runs {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        eqm(&args);
        let first = snapshot(outputs);
        eqm(&args);
        let second = snapshot(outputs);
        if first != second || first.is_empty() {
            failures.push(*name);
        }
    }
    let pass = failures.is_empty();
    report(
        9,
        "determinism",
        pass,
        &format!("{} commands repeated, byte-identical outputs; differing: {failures:?}", runs.len()),
    );
    assert!(pass);
}
