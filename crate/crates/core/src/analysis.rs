//! Local convergence checks for the equilibrium solver.
//!
//! For a field that is the gradient of an `L`-smooth energy `E` bounded below
//! by `E*`, plain gradient iteration (`mu = 0`) with `eta <= 1/L` decreases
//! `E` monotonically and after `K` steps
//!
//! ```text
//! min_{j<K} r_j^2 <= 2 (E_0 - E*) / (eta K H d).
//! ```
//!
//! If the solver map contracts with factor `rho` toward `A*` then
//! `||A_k - A*|| <= rho^k ||A_0 - A*||` and `r_k <= (L / sqrt(H d)) rho^k ||A_0 - A*||`,
//! giving a sufficient iteration count for reaching `r_k <= tau`.
//!
//! The bounds are only asserted on [`AnalyticField`]s where `E`, `L` and `rho`
//! are known exactly. Learned fields get measurements, never verdicts.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chunk::{ActionChunk, Condition};
use crate::error::{Error, Result};
use crate::field::{AnalyticField, VectorField};
use crate::solver::{nesterov_step, solve_equilibrium, SolverConfig, SolverTrace};

const ENERGY_SLACK: f64 = 1e-12;
const BOUND_REL_SLACK: f64 = 1e-12;
const CONVERGED_DISTANCE: f64 = 1e-9;
const RATE_WINDOW: usize = 10;
/// Absolute slack for pointwise bounds once iterates sit at round-off level.
const ROUNDOFF: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq)]
pub struct DescentReport {
    /// `E(A_0) ..= E(A_K)`.
    pub energies: Vec<f64>,
    /// `r_0 .. r_{K-1}`.
    pub residuals: Vec<f64>,
    /// Right-hand side of the descent bound for prefixes `K' = 1 ..= K`.
    pub bounds: Vec<f64>,
    /// `min_{j<K'} r_j^2` for the same prefixes.
    pub prefix_min_sq: Vec<f64>,
    /// `eta <= 1/L`.
    pub within_hypothesis: bool,
    pub violated: bool,
}

impl DescentReport {
    /// CSV rows `k,energy,residual,bound` with `bound` for the prefix ending at `k`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,energy,residual,bound\n");
        for (k, (r, b)) in self.residuals.iter().zip(&self.bounds).enumerate() {
            let _ = writeln!(out, "{k},{:e},{:e},{:e}", self.energies[k], r, b);
        }
        out
    }
}

/// Runs `steps` plain gradient iterations on a conservative analytic field and checks descent.
pub fn check_descent(
    field: &AnalyticField,
    cfg: &SolverConfig,
    init: &ActionChunk,
    steps: usize,
) -> Result<DescentReport> {
    if cfg.momentum != 0.0 {
        return Err(Error::Contract("descent bound requires zero momentum".into()));
    }
    if !field.is_conservative() {
        return Err(Error::Contract("descent bound requires a gradient field".into()));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("need at least one step".into()));
    }
    cfg.validate()?;
    let lipschitz = field.lipschitz();
    let within_hypothesis = cfg.step_size * lipschitz <= 1.0 + 1e-12;
    let cond = Condition::empty();
    let energy = |a: &ActionChunk| -> Result<f64> {
        field
            .energy(a)?
            .ok_or_else(|| Error::Contract("field has no energy".into()))
    };

    let hd = init.len() as f64;
    let e0 = energy(init)?;
    let mut energies = vec![e0];
    let mut residuals = Vec::with_capacity(steps);
    let mut current = init.clone();
    for k in 0..steps {
        let step = nesterov_step(&current, &current, cfg, field, &cond, k)?;
        residuals.push(step.residual);
        current = step.next;
        energies.push(energy(&current)?);
    }

    let mut bounds = Vec::with_capacity(steps);
    let mut prefix_min_sq = Vec::with_capacity(steps);
    let mut running = f64::INFINITY;
    let mut violated = energies.windows(2).any(|w| w[1] > w[0] + ENERGY_SLACK);
    for (k, r) in residuals.iter().enumerate() {
        running = running.min(r * r);
        let bound = 2.0 * (e0 - field.energy_min()) / (cfg.step_size * (k + 1) as f64 * hd);
        violated |= running > bound * (1.0 + BOUND_REL_SLACK);
        bounds.push(bound);
        prefix_min_sq.push(running);
    }
    Ok(DescentReport {
        energies,
        residuals,
        bounds,
        prefix_min_sq,
        within_hypothesis,
        violated,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionReport {
    /// Geometric mean of the distance ratios used for the estimate.
    pub rate: f64,
    pub ratios: Vec<f64>,
    pub distances: Vec<f64>,
    /// `d_k <= rate^k d_0` per recorded iterate.
    pub geometric_bound_holds: Vec<bool>,
}

/// Estimates the local contraction factor from recorded iterates.
///
/// Uses the first ten distance ratios, or fewer once the distance to the
/// equilibrium drops below `1e-9`.
pub fn estimate_contraction(trace: &SolverTrace, equilibrium: &ActionChunk) -> Result<ContractionReport> {
    let iterates = trace
        .iterates
        .as_ref()
        .ok_or_else(|| Error::InsufficientData("trace has no recorded iterates".into()))?;
    let distances = iterates
        .iter()
        .map(|a| a.distance(equilibrium))
        .collect::<Result<Vec<_>>>()?;
    let converged = distances.last().is_some_and(|&d| d < CONVERGED_DISTANCE);
    if distances.len() < 3 && !(converged && distances.len() >= 2) {
        return Err(Error::InsufficientData(format!(
            "need at least 3 iterates, got {}",
            distances.len()
        )));
    }

    // A first step that already lands within round-off leaves no usable ratio: rate 0.
    let mut ratios = Vec::new();
    for k in 0..RATE_WINDOW.min(distances.len() - 1) {
        if distances[k + 1] < CONVERGED_DISTANCE {
            break;
        }
        ratios.push(distances[k + 1] / distances[k]);
    }
    let rate = if ratios.is_empty() {
        0.0
    } else {
        (ratios.iter().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64).exp()
    };
    let d0 = distances[0];
    let geometric_bound_holds = distances
        .iter()
        .enumerate()
        .map(|(k, &d)| d <= rate.powi(k as i32) * d0 * (1.0 + 1e-9) + ROUNDOFF)
        .collect();
    Ok(ContractionReport {
        rate,
        ratios,
        distances,
        geometric_bound_holds,
    })
}

/// `(L / sqrt(H d)) rho^k dist0`
pub fn residual_decay_bound(lipschitz: f64, rho: f64, dist0: f64, k: usize, horizon: usize, dim: usize) -> f64 {
    lipschitz / ((horizon * dim) as f64).sqrt() * rho.powi(k as i32) * dist0
}

fn check_rate_and_threshold(tau: f64, rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidArgument(format!("rho must be in (0, 1), got {rho}")));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    Ok(())
}

/// Sufficient iteration count before the ceiling: `log(L d0 / (tau sqrt(H d))) / log(1/rho)`.
pub fn sufficient_iterations_unrounded(
    lipschitz: f64,
    dist0: f64,
    tau: f64,
    horizon: usize,
    dim: usize,
    rho: f64,
) -> Result<f64> {
    check_rate_and_threshold(tau, rho)?;
    let arg = lipschitz * dist0 / (tau * ((horizon * dim) as f64).sqrt());
    Ok(arg.ln() / (1.0 / rho).ln())
}

/// Ceiling of [`sufficient_iterations_unrounded`], or 0 when the threshold already holds at init.
pub fn sufficient_iterations(
    lipschitz: f64,
    dist0: f64,
    tau: f64,
    horizon: usize,
    dim: usize,
    rho: f64,
) -> Result<usize> {
    check_rate_and_threshold(tau, rho)?;
    let arg = lipschitz * dist0 / (tau * ((horizon * dim) as f64).sqrt());
    if arg <= 1.0 {
        return Ok(0);
    }
    let value = sufficient_iterations_unrounded(lipschitz, dist0, tau, horizon, dim, rho)?;
    Ok(value.ceil() as usize)
}

/// Iterations saved by shrinking the initial distance by `alpha`: `log(1/alpha) / log(1/rho)`.
pub fn warm_start_saving(alpha: f64, rho: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must be in (0, 1), got {alpha}")));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidArgument(format!("rho must be in (0, 1), got {rho}")));
    }
    Ok((1.0 / alpha).ln() / (1.0 / rho).ln())
}

/// Trapezoidal line integral of the field around a closed polygon.
///
/// Near zero for gradient fields; for a planar rotation `omega J x` it
/// approaches `2 omega` times the enclosed area.
pub fn conservativity_probe<F: VectorField + ?Sized>(
    field: &F,
    cond: &Condition,
    loop_points: &[ActionChunk],
) -> Result<f64> {
    if loop_points.len() < 3 {
        return Err(Error::InvalidArgument("loop needs at least 3 points".into()));
    }
    let values = loop_points
        .iter()
        .map(|p| field.evaluate(p, cond))
        .collect::<Result<Vec<_>>>()?;
    let n = loop_points.len();
    let mut total = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        let seg = loop_points[j].sub(&loop_points[i])?;
        let avg = values[i].add(&values[j])?.scale(0.5);
        total += avg.dot(&seg)?;
    }
    Ok(total)
}

/// `m` points on a circle of `radius` around `center` in the plane of flat coordinates `i` and `j`.
pub fn circle_loop(center: &ActionChunk, i: usize, j: usize, radius: f64, m: usize) -> Result<Vec<ActionChunk>> {
    if i == j || i >= center.len() || j >= center.len() {
        return Err(Error::InvalidArgument(format!("invalid loop plane ({i}, {j})")));
    }
    (0..m)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / m as f64;
            let mut v = center.flatten();
            v[i] += radius * theta.cos();
            v[j] += radius * theta.sin();
            ActionChunk::new(center.horizon(), center.dim(), v)
        })
        .collect()
}

/// One line of the verification report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// False when the inputs fall outside the bound's hypothesis; such checks never fail the suite.
    pub within_hypothesis: bool,
    pub detail: String,
}

impl CheckOutcome {
    pub fn counts_as_failure(&self) -> bool {
        self.within_hypothesis && !self.passed
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationSuite {
    pub checks: Vec<CheckOutcome>,
    /// Per-step rows of the main descent run.
    pub descent: DescentReport,
}

impl VerificationSuite {
    pub fn failed(&self) -> bool {
        self.checks.iter().any(CheckOutcome::counts_as_failure)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = match (c.within_hypothesis, c.passed) {
                (false, _) => "SKIP (outside hypothesis)",
                (true, true) => "PASS",
                (true, false) => "FAIL",
            };
            let _ = writeln!(out, "[{status}] {}: {}", c.name, c.detail);
        }
        let failures = self.checks.iter().filter(|c| c.counts_as_failure()).count();
        let _ = writeln!(out, "{} checks, {} failures", self.checks.len(), failures);
        out
    }
}

fn outcome(name: &str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        passed,
        within_hypothesis: true,
        detail,
    }
}

fn plain(eta: f64, tau: f64, cap: usize) -> SolverConfig {
    SolverConfig {
        step_size: eta,
        momentum: 0.0,
        threshold: tau,
        max_iters: cap,
        record_iterates: true,
    }
}

fn scalar(v: f64) -> ActionChunk {
    ActionChunk::from_raw(1, 1, vec![v])
}

/// Checks every bound on analytic fields with exactly known constants.
pub fn run_verification_suite(seed: u64) -> Result<VerificationSuite> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cond = Condition::empty();
    let mut checks = Vec::new();

    // Descent bound, tight 1-D case: E = x^2/2, L = 1, eta = 1, E0 = 1.
    let tight = check_descent(
        &AnalyticField::quadratic(1.0, scalar(0.0)),
        &plain(1.0, 0.0, 1),
        &scalar(std::f64::consts::SQRT_2),
        1,
    )?;
    let r0_sq = tight.prefix_min_sq[0];
    checks.push(outcome(
        "descent bound (tight 1-D case)",
        !tight.violated && (tight.bounds[0] - 2.0).abs() < 1e-12 && (r0_sq - 2.0).abs() < 1e-12,
        format!("bound {:.15}, min r^2 {:.15}", tight.bounds[0], r0_sq),
    ));

    // Descent bound on random quadratic problems with eta = 1/L and eta = 0.5/L.
    let mut main_descent = None;
    let mut worst_margin = f64::INFINITY;
    let mut descent_ok = true;
    for trial in 0..20 {
        let kappa = 0.5 + 2.0 * (trial as f64 / 19.0);
        let star = ActionChunk::standard_normal(4, 2, &mut rng);
        let field = AnalyticField::quadratic(kappa, star.clone());
        let init = star.add(&ActionChunk::standard_normal(4, 2, &mut rng).scale(2.0))?;
        let frac = if trial % 2 == 0 { 1.0 } else { 0.5 };
        let report = check_descent(&field, &plain(frac / kappa, 0.0, 50), &init, 50)?;
        descent_ok &= !report.violated;
        for (m, b) in report.prefix_min_sq.iter().zip(&report.bounds) {
            worst_margin = worst_margin.min(b - m);
        }
        if trial == 1 {
            main_descent = Some(report);
        }
    }
    checks.push(outcome(
        "descent bound (random quadratic, eta <= 1/L, K = 50)",
        descent_ok,
        format!("20 runs, smallest bound margin {worst_margin:.3e}"),
    ));

    // Outside the hypothesis: eta = 2.5/L oscillates and grows. Reported, not failed.
    let star = ActionChunk::standard_normal(4, 2, &mut rng);
    let field = AnalyticField::quadratic(1.0, star.clone());
    let init = star.add(&ActionChunk::filled(4, 2, 1.0))?;
    let outside = check_descent(&field, &plain(2.5, 0.0, 10), &init, 10)?;
    checks.push(CheckOutcome {
        name: "descent bound (eta = 2.5/L, injected)".into(),
        passed: !outside.violated,
        within_hypothesis: outside.within_hypothesis,
        detail: format!("violated = {}", outside.violated),
    });

    // Contraction and residual decay: kappa = 1, eta = 0.5, rho = 0.5, L = 1.
    let star = ActionChunk::standard_normal(3, 2, &mut rng);
    let lin = AnalyticField::linear(1.0, star.clone());
    let init = star.add(&ActionChunk::standard_normal(3, 2, &mut rng))?;
    let (_, trace) = solve_equilibrium(&lin, &cond, &init, &plain(0.5, 0.0, 40))?;
    let est = estimate_contraction(&trace, &star)?;
    checks.push(outcome(
        "contraction estimate (kappa = 1, eta = 0.5)",
        (0.499..=0.501).contains(&est.rate) && est.geometric_bound_holds.iter().all(|&b| b),
        format!("rho_hat = {:.6}", est.rate),
    ));
    let dist0 = init.distance(&star)?;
    let decay_ok = trace
        .residuals
        .iter()
        .enumerate()
        .all(|(k, &r)| r <= residual_decay_bound(1.0, 0.5, dist0, k, 3, 2) * (1.0 + 1e-12) + ROUNDOFF);
    checks.push(outcome(
        "residual decay bound (L = 1, rho = 0.5)",
        decay_ok,
        format!("{} steps checked", trace.residuals.len()),
    ));

    // Sufficient iterations: L = 1, dist0 = 1, tau = 0.1, Hd = 1, rho = 0.5.
    let k_suff = sufficient_iterations(1.0, 1.0, 0.1, 1, 1, 0.5)?;
    let lin1 = AnalyticField::linear(1.0, scalar(0.0));
    let (_, t1) = solve_equilibrium(&lin1, &cond, &scalar(1.0), &plain(0.5, 0.1, 100))?;
    checks.push(outcome(
        "sufficient iterations (formula and solver)",
        k_suff == 4 && t1.iterations <= k_suff,
        format!("formula {k_suff}, solver stopped at {}", t1.iterations),
    ));
    let k_zero = sufficient_iterations(1.0, 0.05, 0.1, 1, 1, 0.5)?;
    let (_, t0) = solve_equilibrium(&lin1, &cond, &scalar(0.05), &plain(0.5, 0.1, 100))?;
    checks.push(outcome(
        "sufficient iterations (met at initialization)",
        k_zero == 0 && t0.iterations == 0,
        format!("formula {k_zero}, solver stopped at {}", t0.iterations),
    ));

    // Warm-start saving on the linear field.
    let predicted = warm_start_saving(0.5, 0.5)?;
    let (_, cold) = solve_equilibrium(&lin1, &cond, &scalar(1.0), &plain(0.5, 0.1, 100))?;
    let (_, warm) = solve_equilibrium(&lin1, &cond, &scalar(0.5), &plain(0.5, 0.1, 100))?;
    let measured = cold.iterations as f64 - warm.iterations as f64;
    checks.push(outcome(
        "warm-start saving (alpha = 0.5, rho = 0.5)",
        (measured - predicted).abs() <= 1.0,
        format!("predicted {predicted:.3}, measured {measured}"),
    ));

    // Conservativity probe on gradient and rotation fields.
    let center = ActionChunk::zeros(1, 2);
    let circle = circle_loop(&center, 0, 1, 1.0, 360)?;
    let grad_loop = conservativity_probe(&AnalyticField::quadratic(1.0, ActionChunk::new(1, 2, vec![0.3, -0.2])?), &cond, &circle)?;
    let rot_loop = conservativity_probe(&AnalyticField::rotation(1.0, 1.0, center.clone()), &cond, &circle)?;
    let expected = 2.0 * std::f64::consts::PI;
    checks.push(outcome(
        "conservativity probe (gradient field)",
        grad_loop.abs() <= 1e-6,
        format!("loop integral {grad_loop:.3e}"),
    ));
    checks.push(outcome(
        "conservativity probe (rotation field)",
        ((rot_loop - expected) / expected).abs() <= 0.01,
        format!("loop integral {rot_loop:.6}, expected {expected:.6}"),
    ));

    Ok(VerificationSuite {
        checks,
        descent: main_descent.expect("trial 1 runs"),
    })
}
