//! Experiment commands behind the `eqm` binary.
//!
//! Each command takes a resolved [`RunConfig`], writes its artifacts (CSV,
//! checkpoint or dataset files plus a copy of the resolved configuration)
//! and returns a structured outcome for programmatic callers.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use eqm_core::envs::{
    episode_seeds, generate_dataset, run_closed_loop, run_episode, success_rate, EnvKind, EnvSpec, EpisodeResult,
    LoopOptions,
};
use eqm_core::field::{init_params, Activation, FieldConfig, FieldParams};
use eqm_core::formats::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, Checkpoint};
use eqm_core::policy::{Decision, EqmDecoder, ExpertPolicy, FlowDecoder, Policy};
use eqm_core::solver::{
    cold_start_init, solve_equilibrium, SolverConfig, SolverTrace, WarmStartAlignment, WarmStartState,
};
use eqm_core::training::{train, Normalization, Objective, Optimizer, ScheduleSpec, TrainConfig};
use eqm_core::{ActionChunk, Condition};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{KeySpec, RunConfig};
use config::{key, required};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] eqm_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("verification failed:\n{0}")]
    VerifyFailed(String),
}

impl CliError {
    /// 1 usage or configuration, 2 numeric failure, 3 failed verification.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numeric() => 2,
            CliError::VerifyFailed(_) => 3,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

const SOLVER_KEYS: [KeySpec; 2] = [key("step_size", "0.1"), key("momentum", "0.9")];

pub const GEN_DATA_KEYS: &[KeySpec] = &[
    key("env", "reach"),
    key("episodes", "500"),
    key("seed", "0"),
    key("force", "false"),
    required("out"),
];

pub const TRAIN_KEYS: &[KeySpec] = &[
    required("dataset"),
    key("objective", "eqm"),
    key("steps", "20000"),
    key("batch_size", "64"),
    key("learning_rate", "0.003"),
    key("lr_schedule", "cosine"),
    key("optimizer", "adam"),
    key("schedule", "linear"),
    key("schedule_slope", "1"),
    key("hidden", "128,128"),
    key("activation", "tanh"),
    key("time_conditioned", "auto"),
    key("seed", "0"),
    required("out"),
];

pub const COMPARE_KEYS: &[KeySpec] = &[
    key("env", "reach"),
    required("eqm"),
    required("flow"),
    key("budget", "64"),
    key("episodes", "200"),
    key("seed", "0"),
    SOLVER_KEYS[0],
    SOLVER_KEYS[1],
    required("out"),
];

pub const DEFAULT_TAU_GRID: &str = "0.001,0.01,0.05,0.1,0.25,0.5,1.0,2.0";

pub const SCAN_KEYS: &[KeySpec] = &[
    required("checkpoint"),
    key("env", "reach"),
    key("taus", DEFAULT_TAU_GRID),
    key("max_iters", "256"),
    key("episodes", "200"),
    key("seed", "0"),
    SOLVER_KEYS[0],
    SOLVER_KEYS[1],
    required("out"),
];

pub const WARM_KEYS: &[KeySpec] = &[
    required("checkpoint"),
    key("env", "reach"),
    key("tau", "0.001"),
    key("max_iters", "300"),
    key("episodes", "200"),
    key("executed_steps", "1"),
    key("alignment", "shifted"),
    key("seed", "0"),
    SOLVER_KEYS[0],
    SOLVER_KEYS[1],
    required("out"),
];

pub const VERIFY_KEYS: &[KeySpec] = &[key("seed", "0"), required("out")];

pub const SOLVE_KEYS: &[KeySpec] = &[
    required("checkpoint"),
    required("cond"),
    key("init", "cold"),
    key("tau", "0.001"),
    key("max_iters", "300"),
    key("seed", "0"),
    SOLVER_KEYS[0],
    SOLVER_KEYS[1],
    required("out"),
];

/// Key table for a subcommand name.
pub fn keys_for(command: &str) -> Option<&'static [KeySpec]> {
    Some(match command {
        "gen-data" => GEN_DATA_KEYS,
        "train" => TRAIN_KEYS,
        "compare-budget" => COMPARE_KEYS,
        "scan-threshold" => SCAN_KEYS,
        "warm-start-study" => WARM_KEYS,
        "verify-prop1" => VERIFY_KEYS,
        "solve" => SOLVE_KEYS,
        _ => return None,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(cfg.str("out"));
    std::fs::create_dir_all(&dir).map_err(|source| CliError::Io {
        path: dir.clone(),
        source,
    })?;
    write_file(&dir.join("config.txt"), cfg.render())?;
    Ok(dir)
}

fn env_spec(name: &str) -> Result<EnvSpec> {
    Ok(EnvSpec::new(EnvKind::parse(name)?))
}

fn solver_config(cfg: &RunConfig, threshold: f64, max_iters: usize) -> Result<SolverConfig> {
    let solver = SolverConfig {
        step_size: cfg.parse("step_size")?,
        momentum: cfg.parse("momentum")?,
        threshold,
        max_iters,
        record_iterates: false,
    };
    solver.validate()?;
    Ok(solver)
}

fn positive(cfg: &RunConfig, name: &str) -> Result<usize> {
    let v: usize = cfg.parse(name)?;
    if v == 0 {
        return Err(CliError::Usage(format!("`{name}` must be positive")));
    }
    Ok(v)
}

/// Loads a checkpoint and returns its field with the stored (or identity) normalization.
fn load_model(path: &str) -> Result<(FieldParams, Normalization)> {
    let Checkpoint { params, normalization } = load_checkpoint(Path::new(path))?;
    let norm = normalization
        .unwrap_or_else(|| Normalization::identity(params.config().action_dim, params.config().cond_width));
    Ok((params, norm))
}

fn check_model_env(params: &FieldParams, spec: &EnvSpec, path: &str) -> Result<()> {
    let c = params.config();
    if c.horizon != spec.horizon || c.action_dim != spec.dim || c.cond_width != spec.cond_width() {
        return Err(CliError::Usage(format!(
            "{path}: model shape {}x{} with condition width {} does not fit env {}",
            c.horizon,
            c.action_dim,
            c.cond_width,
            spec.kind
        )));
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Median with the midpoint convention for even lengths; 0 for an empty slice.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn cycle_iterations(results: &[EpisodeResult]) -> Vec<f64> {
    results
        .iter()
        .flat_map(|r| r.iterations.iter().map(|&i| i as f64))
        .collect()
}

// ---------------------------------------------------------------- gen-data

#[derive(Debug, Clone)]
pub struct GenDataOutcome {
    pub path: PathBuf,
    pub records: usize,
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<GenDataOutcome> {
    let spec = env_spec(cfg.str("env"))?;
    let episodes: usize = cfg.parse("episodes")?;
    let seed: u64 = cfg.parse("seed")?;
    let path = PathBuf::from(cfg.str("out"));
    if path.exists() && !cfg.flag("force")? {
        return Err(CliError::Usage(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dataset = generate_dataset(&spec, episodes, &mut rng)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| CliError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    save_dataset(&path, &dataset)?;
    let mut cfg_path = path.clone().into_os_string();
    cfg_path.push(".config.txt");
    write_file(Path::new(&cfg_path), cfg.render())?;
    Ok(GenDataOutcome {
        path,
        records: dataset.len(),
    })
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
}

fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let objective = match cfg.str("objective") {
        "eqm" => Objective::Eqm,
        "flow" => Objective::Flow,
        other => return Err(CliError::Usage(format!("objective must be eqm or flow, got `{other}`"))),
    };
    let optimizer = match cfg.str("optimizer") {
        "adam" => Optimizer::Adam,
        "sgd" => Optimizer::Sgd,
        other => return Err(CliError::Usage(format!("optimizer must be adam or sgd, got `{other}`"))),
    };
    let schedule = match cfg.str("schedule") {
        "linear" => ScheduleSpec::Linear,
        "truncated" => ScheduleSpec::TruncatedLinear {
            slope: cfg.parse("schedule_slope")?,
        },
        other => return Err(CliError::Usage(format!("schedule must be linear or truncated, got `{other}`"))),
    };
    let cosine_decay = match cfg.str("lr_schedule") {
        "cosine" => true,
        "constant" => false,
        other => return Err(CliError::Usage(format!("lr_schedule must be cosine or constant, got `{other}`"))),
    };
    Ok(TrainConfig {
        steps: cfg.parse("steps")?,
        batch_size: cfg.parse("batch_size")?,
        learning_rate: cfg.parse("learning_rate")?,
        cosine_decay,
        optimizer,
        seed: cfg.parse("seed")?,
        schedule,
        objective,
    })
}

/// Stream tag separating parameter initialization from batch sampling.
const INIT_STREAM: u64 = 0x696e6974;

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let tc = train_config(cfg)?;
    let dataset = load_dataset(Path::new(cfg.str("dataset")))?;
    let activation = match cfg.str("activation") {
        "tanh" => Activation::Tanh,
        "identity" => Activation::Identity,
        other => return Err(CliError::Usage(format!("activation must be tanh or identity, got `{other}`"))),
    };
    let time_conditioned = match cfg.str("time_conditioned") {
        "auto" => tc.objective == Objective::Flow,
        _ => cfg.flag("time_conditioned")?,
    };
    let fc = FieldConfig::new(dataset.horizon, dataset.action_dim, dataset.cond_width)
        .with_hidden(cfg.list("hidden")?)
        .with_activation(activation)
        .time_conditioned(time_conditioned);
    let initial = init_params(&fc, eqm_core::envs::mix_seed(tc.seed, INIT_STREAM))?;
    let (params, losses) = train(&dataset, &tc, initial)?;

    let dir = out_dir(cfg)?;
    let checkpoint = Checkpoint {
        params,
        normalization: Some(dataset.normalization.clone()),
    };
    let checkpoint_path = dir.join("checkpoint.eqmf");
    save_checkpoint(&checkpoint_path, &checkpoint)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l}");
    }
    write_file(&dir.join("loss.csv"), csv)?;
    Ok(TrainOutcome {
        checkpoint_path,
        checkpoint,
        losses,
    })
}

// ---------------------------------------------------------------- compare-budget

#[derive(Debug, Clone)]
pub struct CompareRow {
    pub env: EnvKind,
    pub decoder: &'static str,
    pub success_rate: f64,
    /// Mean field evaluations per control cycle.
    pub mean_evals: f64,
    pub results: Vec<EpisodeResult>,
}

impl CompareRow {
    fn new(env: EnvKind, decoder: &'static str, results: Vec<EpisodeResult>) -> Self {
        let per_cycle: Vec<f64> = results
            .iter()
            .flat_map(|r| r.evaluations_per_cycle.iter().map(|&e| e as f64))
            .collect();
        Self {
            env,
            decoder,
            success_rate: success_rate(&results),
            mean_evals: mean(&per_cycle),
            results,
        }
    }

    /// Every cycle of every episode used exactly `budget` field evaluations.
    pub fn exact_budget(&self, budget: usize) -> bool {
        self.results
            .iter()
            .all(|r| r.evaluations_per_cycle.iter().all(|&e| e == budget))
    }
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut csv = String::from("env,decoder,success_rate,mean_evals\n");
    for r in rows {
        let _ = writeln!(csv, "{},{},{},{}", r.env, r.decoder, r.success_rate, r.mean_evals);
    }
    csv
}

/// Expert, equilibrium (tau = 0, cap B) and flow (B Euler steps) rows per env, on shared seeds.
pub fn cmd_compare_budget(cfg: &RunConfig) -> Result<Vec<CompareRow>> {
    let envs: Vec<String> = cfg.list("env")?;
    let eqm_paths: Vec<String> = cfg.list("eqm")?;
    let flow_paths: Vec<String> = cfg.list("flow")?;
    if eqm_paths.len() != envs.len() || flow_paths.len() != envs.len() {
        return Err(CliError::Usage(format!(
            "need one eqm and one flow checkpoint per env: {} envs, {} eqm, {} flow",
            envs.len(),
            eqm_paths.len(),
            flow_paths.len()
        )));
    }
    let budget = positive(cfg, "budget")?;
    let episodes = positive(cfg, "episodes")?;
    let seeds = episode_seeds(cfg.parse("seed")?, episodes);
    let solver = solver_config(cfg, 0.0, budget)?;
    let opts = LoopOptions::default();

    let mut rows = Vec::new();
    for ((env, eqm_path), flow_path) in envs.iter().zip(&eqm_paths).zip(&flow_paths) {
        let spec = env_spec(env)?;
        let (eqm_field, eqm_norm) = load_model(eqm_path)?;
        let (flow_field, flow_norm) = load_model(flow_path)?;
        check_model_env(&eqm_field, &spec, eqm_path)?;
        check_model_env(&flow_field, &spec, flow_path)?;
        let eqm = EqmDecoder::new(eqm_field, eqm_norm, solver.clone())?;
        let flow = FlowDecoder::new(flow_field, flow_norm, budget)?;

        let expert = run_closed_loop(&ExpertPolicy::new(spec.clone()), &spec, &seeds, &opts)?;
        rows.push(CompareRow::new(spec.kind, "expert", expert));
        rows.push(CompareRow::new(spec.kind, "eqm", run_closed_loop(&eqm, &spec, &seeds, &opts)?));
        rows.push(CompareRow::new(spec.kind, "flow", run_closed_loop(&flow, &spec, &seeds, &opts)?));
    }
    let dir = out_dir(cfg)?;
    write_file(&dir.join("compare_budget.csv"), compare_csv(&rows))?;
    Ok(rows)
}

// ---------------------------------------------------------------- scan-threshold

#[derive(Debug, Clone, PartialEq)]
pub struct ScanRow {
    pub tau: f64,
    pub success_rate: f64,
    pub mean_iterations: f64,
    pub median_iterations: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanOutcome {
    pub rows: Vec<ScanRow>,
    /// Success rate rises and falls (or falls and rises) somewhere along the grid.
    pub success_non_monotone: bool,
}

impl ScanOutcome {
    pub fn mean_iterations_non_increasing(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[1].mean_iterations <= w[0].mean_iterations)
    }

    pub fn to_csv(&self) -> String {
        let mut csv = String::from("tau,success_rate,mean_iterations,median_iterations\n");
        for r in &self.rows {
            let _ = writeln!(
                csv,
                "{},{},{},{}",
                r.tau, r.success_rate, r.mean_iterations, r.median_iterations
            );
        }
        csv
    }
}

fn is_monotone(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] >= w[0]) || xs.windows(2).all(|w| w[1] <= w[0])
}

pub fn cmd_scan_threshold(cfg: &RunConfig) -> Result<ScanOutcome> {
    let taus: Vec<f64> = cfg.list("taus")?;
    if taus.is_empty() || taus.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
        return Err(CliError::Usage("taus must be finite and non-negative".into()));
    }
    if taus.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CliError::Usage("taus must be sorted strictly ascending".into()));
    }
    let spec = env_spec(cfg.str("env"))?;
    let max_iters = positive(cfg, "max_iters")?;
    let episodes = positive(cfg, "episodes")?;
    let seeds = episode_seeds(cfg.parse("seed")?, episodes);
    let path = cfg.str("checkpoint");
    let (field, norm) = load_model(path)?;
    check_model_env(&field, &spec, path)?;

    let mut rows = Vec::with_capacity(taus.len());
    for &tau in &taus {
        let decoder = EqmDecoder::new(field.clone(), norm.clone(), solver_config(cfg, tau, max_iters)?)?;
        let results = run_closed_loop(&decoder, &spec, &seeds, &LoopOptions::default())?;
        let iters = cycle_iterations(&results);
        rows.push(ScanRow {
            tau,
            success_rate: success_rate(&results),
            mean_iterations: mean(&iters),
            median_iterations: median(&iters),
        });
    }
    let successes: Vec<f64> = rows.iter().map(|r| r.success_rate).collect();
    let outcome = ScanOutcome {
        success_non_monotone: !is_monotone(&successes),
        rows,
    };
    let dir = out_dir(cfg)?;
    write_file(&dir.join("scan_threshold.csv"), outcome.to_csv())?;
    Ok(outcome)
}

// ---------------------------------------------------------------- warm-start-study

/// Iterations to tau for one warm-started cycle and for a cold solve of the same cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairedCycle {
    pub episode: usize,
    pub cycle: usize,
    pub warm: usize,
    pub cold: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmStudyOutcome {
    pub cold_median: f64,
    pub cold_success: f64,
    pub warm_median: f64,
    pub warm_success: f64,
    pub pairs: Vec<PairedCycle>,
}

impl WarmStudyOutcome {
    pub fn warm_le_cold_fraction(&self) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        self.pairs.iter().filter(|p| p.warm <= p.cold).count() as f64 / self.pairs.len() as f64
    }

    /// Median warm iterations over median cold iterations on paired cycles.
    pub fn paired_median_ratio(&self) -> f64 {
        let warm: Vec<f64> = self.pairs.iter().map(|p| p.warm as f64).collect();
        let cold: Vec<f64> = self.pairs.iter().map(|p| p.cold as f64).collect();
        let c = median(&cold);
        if c == 0.0 {
            return if median(&warm) == 0.0 { 1.0 } else { f64::INFINITY };
        }
        median(&warm) / c
    }
}

/// Wraps a warm-started decoder and, on every warm cycle, also solves cold from
/// the identical noise draw (a cloned stream), so the pair differs only in the
/// copied half chunk.
struct PairedRecorder<'a> {
    decoder: &'a EqmDecoder,
    calls: AtomicUsize,
    pairs: Mutex<Vec<(usize, usize, usize)>>,
}

impl Policy for PairedRecorder<'_> {
    fn decode(&self, cond: &Condition, warm: Option<&WarmStartState>, rng: &mut ChaCha8Rng) -> eqm_core::Result<Decision> {
        let cycle = self.calls.fetch_add(1, Ordering::Relaxed);
        let shadow_cold = match warm {
            Some(_) => {
                let cfg = self.decoder.field.config();
                let mut shadow = rng.clone();
                let init = cold_start_init(cfg.horizon, cfg.action_dim, &mut shadow);
                let ncond = self.decoder.normalization.normalize_condition(cond)?;
                let (_, trace) = solve_equilibrium(&self.decoder.field, &ncond, &init, &self.decoder.solver)?;
                Some(trace.iterations)
            }
            None => None,
        };
        let decision = self.decoder.decode(cond, warm, rng)?;
        if let Some(cold) = shadow_cold {
            self.pairs
                .lock()
                .expect("recorder lock")
                .push((cycle, decision.iterations, cold));
        }
        Ok(decision)
    }
}

pub fn cmd_warm_start_study(cfg: &RunConfig) -> Result<WarmStudyOutcome> {
    use rayon::prelude::*;

    let spec = env_spec(cfg.str("env"))?;
    let episodes = positive(cfg, "episodes")?;
    let seeds = episode_seeds(cfg.parse("seed")?, episodes);
    let solver = solver_config(cfg, cfg.parse("tau")?, positive(cfg, "max_iters")?)?;
    let alignment = match cfg.str("alignment") {
        "shifted" => WarmStartAlignment::Shifted,
        "leading" => WarmStartAlignment::Leading,
        other => return Err(CliError::Usage(format!("alignment must be shifted or leading, got `{other}`"))),
    };
    let executed = positive(cfg, "executed_steps")?;
    if executed > spec.horizon / 2 {
        return Err(CliError::Usage(format!(
            "warm start needs executed_steps <= {}, got {executed}",
            spec.horizon / 2
        )));
    }
    let path = cfg.str("checkpoint");
    let (field, norm) = load_model(path)?;
    check_model_env(&field, &spec, path)?;
    let decoder = EqmDecoder::new(field, norm, solver)?;

    let cold_opts = LoopOptions {
        executed_steps: executed,
        ..LoopOptions::default()
    };
    let warm_opts = LoopOptions {
        warm_start: true,
        executed_steps: executed,
        alignment,
    };
    let cold = run_closed_loop(&decoder, &spec, &seeds, &cold_opts)?;
    let warm_runs = seeds
        .par_iter()
        .map(|&s| {
            let rec = PairedRecorder {
                decoder: &decoder,
                calls: AtomicUsize::new(0),
                pairs: Mutex::new(Vec::new()),
            };
            let result = run_episode(&rec, &spec, s, &warm_opts)?;
            Ok((result, rec.pairs.into_inner().expect("recorder lock")))
        })
        .collect::<eqm_core::Result<Vec<_>>>()?;

    let mut warm = Vec::with_capacity(warm_runs.len());
    let mut pairs = Vec::new();
    for (episode, (result, recorded)) in warm_runs.into_iter().enumerate() {
        warm.push(result);
        pairs.extend(recorded.into_iter().map(|(cycle, w, c)| PairedCycle {
            episode,
            cycle,
            warm: w,
            cold: c,
        }));
    }
    let outcome = WarmStudyOutcome {
        cold_median: median(&cycle_iterations(&cold)),
        cold_success: success_rate(&cold),
        warm_median: median(&cycle_iterations(&warm)),
        warm_success: success_rate(&warm),
        pairs,
    };

    let dir = out_dir(cfg)?;
    let mut csv = String::from("mode,median_iters_to_tau,success_rate\n");
    let _ = writeln!(csv, "cold,{},{}", outcome.cold_median, outcome.cold_success);
    let _ = writeln!(csv, "warm,{},{}", outcome.warm_median, outcome.warm_success);
    write_file(&dir.join("warm_start.csv"), csv)?;
    let mut paired = String::from("episode,cycle,warm_iters,cold_iters\n");
    for p in &outcome.pairs {
        let _ = writeln!(paired, "{},{},{},{}", p.episode, p.cycle, p.warm, p.cold);
    }
    write_file(&dir.join("warm_start_pairs.csv"), paired)?;
    let summary = format!(
        "pairs,warm_le_cold_fraction,paired_median_ratio\n{},{},{}\n",
        outcome.pairs.len(),
        outcome.warm_le_cold_fraction(),
        outcome.paired_median_ratio()
    );
    write_file(&dir.join("warm_start_summary.csv"), summary)?;
    Ok(outcome)
}

// ---------------------------------------------------------------- verify-prop1

/// Runs the analytic verification suite. Reports are written before a failure is returned.
pub fn cmd_verify_prop1(cfg: &RunConfig) -> Result<eqm_core::analysis::VerificationSuite> {
    let suite = eqm_core::analysis::run_verification_suite(cfg.parse("seed")?)?;
    let dir = out_dir(cfg)?;
    let report = suite.render();
    write_file(&dir.join("report.txt"), &report)?;
    write_file(&dir.join("descent.csv"), suite.descent.to_csv())?;
    if suite.failed() {
        return Err(CliError::VerifyFailed(report));
    }
    Ok(suite)
}

// ---------------------------------------------------------------- solve

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    /// Output chunk in environment action units.
    pub actions: ActionChunk,
    pub trace: SolverTrace,
}

pub fn cmd_solve(cfg: &RunConfig) -> Result<SolveOutcome> {
    let path = cfg.str("checkpoint");
    let (field, norm) = load_model(path)?;
    let fc = field.config().clone();
    if fc.time_conditioned {
        return Err(CliError::Usage(format!("{path}: solve needs an equilibrium (time-free) checkpoint")));
    }
    let features: Vec<f64> = cfg.list("cond")?;
    if features.len() != fc.cond_width {
        return Err(CliError::Usage(format!(
            "cond has {} values, model expects {}",
            features.len(),
            fc.cond_width
        )));
    }
    let cond = norm.normalize_condition(&Condition::from_features(features, 0)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.parse("seed")?);
    let init = match cfg.str("init") {
        "cold" => cold_start_init(fc.horizon, fc.action_dim, &mut rng),
        "zero" => ActionChunk::zeros(fc.horizon, fc.action_dim),
        other => return Err(CliError::Usage(format!("init must be cold or zero, got `{other}`"))),
    };
    let solver = solver_config(cfg, cfg.parse("tau")?, positive(cfg, "max_iters")?)?;
    let (chunk, trace) = solve_equilibrium(&field, &cond, &init, &solver)?;
    let actions = norm.denormalize_chunk(&chunk)?;

    let dir = out_dir(cfg)?;
    let mut csv = String::from("step");
    for j in 0..fc.action_dim {
        let _ = write!(csv, ",a{j}");
    }
    csv.push('\n');
    for (i, row) in actions.rows().enumerate() {
        let _ = write!(csv, "{i}");
        for v in row {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    write_file(&dir.join("chunk.csv"), csv)?;
    let mut tr = String::from("k,residual\n");
    for (k, r) in trace.residuals.iter().enumerate() {
        let _ = writeln!(tr, "{k},{r}");
    }
    write_file(&dir.join("trace.csv"), tr)?;
    Ok(SolveOutcome { actions, trace })
}
