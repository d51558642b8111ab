//! Equilibrium decoding and the Euler sampler used by the flow baseline.
//!
//! The equilibrium solver iterates
//!
//! ```text
//! L_k     = A_k + mu (A_k - A_{k-1})
//! A_{k+1} = L_k - eta f(L_k; c)
//! r_k     = ||f(L_k; c)|| / sqrt(H d)
//! ```
//!
//! with `A_{-1} = A_0`, and stops at the first `k` with `r_k <= tau` or at
//! `k = K_max`. Each iteration costs exactly one field evaluation at the
//! lookahead point, which serves both the update and the stopping check. On a
//! threshold stop the solver returns the certified lookahead `L_T` after
//! `T + 1` evaluations; on a cap stop it returns `L_{K_max}` after exactly
//! `K_max` evaluations.

use rand::Rng;

use crate::chunk::{normalized_residual, ActionChunk, Condition};
use crate::error::{Error, Result};
use crate::field::{TimeVectorField, VectorField};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub step_size: f64,
    pub momentum: f64,
    pub threshold: f64,
    pub max_iters: usize,
    pub record_iterates: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            momentum: 0.9,
            threshold: 1e-3,
            max_iters: 300,
            record_iterates: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step size must be positive, got {}", self.step_size)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::Config(format!("threshold must be >= 0, got {}", self.threshold)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("iteration cap must be at least 1".into()));
        }
        Ok(())
    }

    /// Run to the cap regardless of residual: the matched-budget setting.
    pub fn fixed_budget(budget: usize) -> Self {
        Self {
            threshold: 0.0,
            max_iters: budget,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Threshold,
    Cap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverTrace {
    /// `r_0 ..` one entry per field evaluation.
    pub residuals: Vec<f64>,
    pub stop_reason: StopReason,
    /// Stop index `T`.
    pub iterations: usize,
    /// Lookahead points `L_0 ..= L_T` when recording is enabled.
    pub iterates: Option<Vec<ActionChunk>>,
}

impl SolverTrace {
    pub fn evaluations(&self) -> usize {
        self.residuals.len()
    }

    /// Stop index a run with the looser threshold `tau` would have produced.
    ///
    /// Exact whenever `tau` is at least the threshold this trace ran with,
    /// since the iterates do not depend on the threshold.
    pub fn stop_index_for(&self, tau: f64) -> usize {
        self.residuals
            .iter()
            .position(|&r| r <= tau)
            .unwrap_or(self.iterations)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NesterovStep {
    pub lookahead: ActionChunk,
    pub next: ActionChunk,
    pub residual: f64,
}

fn divergence(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric(_) => Error::Divergence { iteration },
        other => other,
    }
}

fn lookahead(current: &ActionChunk, previous: &ActionChunk, momentum: f64) -> Result<ActionChunk> {
    current.axpy(momentum, &current.sub(previous)?)
}

/// One Nesterov iteration; evaluates the field exactly once, at the lookahead point.
pub fn nesterov_step<F: VectorField + ?Sized>(
    current: &ActionChunk,
    previous: &ActionChunk,
    cfg: &SolverConfig,
    field: &F,
    cond: &Condition,
    iteration: usize,
) -> Result<NesterovStep> {
    let look = lookahead(current, previous, cfg.momentum)?;
    if !look.is_finite() {
        return Err(Error::Divergence { iteration });
    }
    let f = field.evaluate(&look, cond).map_err(divergence(iteration))?;
    let residual = normalized_residual(&f).map_err(divergence(iteration))?;
    let next = look.axpy(-cfg.step_size, &f)?;
    if !next.is_finite() {
        return Err(Error::Divergence { iteration });
    }
    Ok(NesterovStep {
        lookahead: look,
        next,
        residual,
    })
}

/// Solves `f(A; c) = 0` from `init` with the adaptive stopping rule.
pub fn solve_equilibrium<F: VectorField + ?Sized>(
    field: &F,
    cond: &Condition,
    init: &ActionChunk,
    cfg: &SolverConfig,
) -> Result<(ActionChunk, SolverTrace)> {
    cfg.validate()?;
    if !init.is_finite() {
        return Err(Error::Numeric("non-finite initial chunk".into()));
    }
    let mut previous = init.clone();
    let mut current = init.clone();
    let mut residuals = Vec::new();
    let mut iterates = cfg.record_iterates.then(Vec::new);

    for k in 0.. {
        if k == cfg.max_iters {
            let look = lookahead(&current, &previous, cfg.momentum)?;
            if !look.is_finite() {
                return Err(Error::Divergence { iteration: k });
            }
            if let Some(it) = iterates.as_mut() {
                it.push(look.clone());
            }
            let trace = SolverTrace {
                residuals,
                stop_reason: StopReason::Cap,
                iterations: k,
                iterates,
            };
            return Ok((look, trace));
        }
        let step = nesterov_step(&current, &previous, cfg, field, cond, k)?;
        residuals.push(step.residual);
        if let Some(it) = iterates.as_mut() {
            it.push(step.lookahead.clone());
        }
        if step.residual <= cfg.threshold {
            let trace = SolverTrace {
                residuals,
                stop_reason: StopReason::Threshold,
                iterations: k,
                iterates,
            };
            return Ok((step.lookahead, trace));
        }
        previous = std::mem::replace(&mut current, step.next);
    }
    unreachable!("loop exits through the cap")
}

/// Which half-length segment of the previous output seeds the next solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WarmStartAlignment {
    /// Rows `e .. e + H/2`: the unexecuted continuation after `e` executed steps.
    #[default]
    Shifted,
    /// Rows `0 .. H/2` of the previous output.
    Leading,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmStartState {
    pub previous: ActionChunk,
    pub executed: usize,
    pub alignment: WarmStartAlignment,
}

impl WarmStartState {
    pub fn new(previous: ActionChunk, executed: usize) -> Self {
        Self {
            previous,
            executed,
            alignment: WarmStartAlignment::Shifted,
        }
    }
}

/// Standard-normal initialization.
pub fn cold_start_init<R: Rng + ?Sized>(horizon: usize, dim: usize, rng: &mut R) -> ActionChunk {
    ActionChunk::standard_normal(horizon, dim, rng)
}

/// Half-chunk warm start: copied rows from the previous output, then fresh noise.
///
/// Consumes exactly the same `H * d` normal draws as [`cold_start_init`], so
/// warm and cold decoders fed from identical streams share their noise tail.
pub fn warm_start_init<R: Rng + ?Sized>(ws: &WarmStartState, rng: &mut R) -> Result<ActionChunk> {
    let (h, d) = (ws.previous.horizon(), ws.previous.dim());
    if h % 2 != 0 {
        return Err(Error::Config(format!("warm start needs an even horizon, got {h}")));
    }
    let half = h / 2;
    if ws.executed == 0 || ws.executed + half > h {
        return Err(Error::Config(format!(
            "executed step count {} outside [1, {half}]",
            ws.executed
        )));
    }
    let offset = match ws.alignment {
        WarmStartAlignment::Shifted => ws.executed,
        WarmStartAlignment::Leading => 0,
    };
    let mut init = cold_start_init(h, d, rng);
    let src = &ws.previous.as_slice()[offset * d..(offset + half) * d];
    init.as_mut_slice()[..half * d].copy_from_slice(src);
    Ok(init)
}

/// Forward Euler integration of `dA/dt = f(A; c, t)` over `t in [0, 1]` in `steps` uniform steps.
pub fn euler_flow_from<F: TimeVectorField + ?Sized>(
    field: &F,
    cond: &Condition,
    init: &ActionChunk,
    steps: usize,
) -> Result<ActionChunk> {
    if steps == 0 {
        return Err(Error::Config("Euler sampler needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut state = init.clone();
    for k in 0..steps {
        let v = field
            .evaluate_at(&state, cond, k as f64 * dt)
            .map_err(divergence(k))?;
        state = state.axpy(dt, &v)?;
        if !state.is_finite() {
            return Err(Error::Divergence { iteration: k });
        }
    }
    Ok(state)
}

/// Euler sample started from fresh standard-normal noise.
pub fn euler_flow_sample<F: TimeVectorField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    cond: &Condition,
    horizon: usize,
    dim: usize,
    steps: usize,
    rng: &mut R,
) -> Result<ActionChunk> {
    let init = cold_start_init(horizon, dim, rng);
    euler_flow_from(field, cond, &init, steps)
}
