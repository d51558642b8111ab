//! Chunk decoders usable as closed-loop policies.

use rand_chacha::ChaCha8Rng;

use crate::chunk::{ActionChunk, Condition};
use crate::envs::{scripted_expert, EnvSpec, EnvState};
use crate::error::{Error, Result};
use crate::field::{CountingField, FieldParams};
use crate::solver::{cold_start_init, euler_flow_from, solve_equilibrium, warm_start_init, SolverConfig, WarmStartState};
use crate::training::Normalization;

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    /// Decoder-space chunk; this is what a warm start copies from.
    pub chunk: ActionChunk,
    /// Chunk in environment action units.
    pub actions: ActionChunk,
    /// Solver stop index (or Euler step count).
    pub iterations: usize,
    /// Field evaluations spent on this decision.
    pub evaluations: usize,
}

pub trait Policy: Sync {
    fn decode(&self, cond: &Condition, warm: Option<&WarmStartState>, rng: &mut ChaCha8Rng) -> Result<Decision>;
}

/// The scripted expert, bypassing any decoder.
#[derive(Debug, Clone)]
pub struct ExpertPolicy {
    spec: EnvSpec,
}

impl ExpertPolicy {
    pub fn new(spec: EnvSpec) -> Self {
        Self { spec }
    }
}

impl Policy for ExpertPolicy {
    fn decode(&self, cond: &Condition, _warm: Option<&WarmStartState>, _rng: &mut ChaCha8Rng) -> Result<Decision> {
        let state = EnvState::from_condition(cond, self.spec.dim)?;
        let chunk = scripted_expert(&state, &self.spec);
        Ok(Decision {
            actions: chunk.clone(),
            chunk,
            iterations: 0,
            evaluations: 0,
        })
    }
}

fn check_normalization(field: &FieldParams, norm: &Normalization) -> Result<()> {
    let cfg = field.config();
    if norm.action_dim() != cfg.action_dim || norm.cond_width() != cfg.cond_width {
        return Err(Error::shape(
            format!("normalization for d = {}, condition width {}", cfg.action_dim, cfg.cond_width),
            format!("d = {}, condition width {}", norm.action_dim(), norm.cond_width()),
        ));
    }
    Ok(())
}

/// Equilibrium decoder: Nesterov solve from a cold or half-chunk warm start.
#[derive(Debug, Clone)]
pub struct EqmDecoder {
    pub field: FieldParams,
    pub normalization: Normalization,
    pub solver: SolverConfig,
}

impl EqmDecoder {
    pub fn new(field: FieldParams, normalization: Normalization, solver: SolverConfig) -> Result<Self> {
        if field.config().time_conditioned {
            return Err(Error::Config("equilibrium decoder needs a time-free field".into()));
        }
        check_normalization(&field, &normalization)?;
        solver.validate()?;
        Ok(Self {
            field,
            normalization,
            solver,
        })
    }
}

impl Policy for EqmDecoder {
    fn decode(&self, cond: &Condition, warm: Option<&WarmStartState>, rng: &mut ChaCha8Rng) -> Result<Decision> {
        let cfg = self.field.config();
        let ncond = self.normalization.normalize_condition(cond)?;
        let init = match warm {
            Some(ws) => warm_start_init(ws, rng)?,
            None => cold_start_init(cfg.horizon, cfg.action_dim, rng),
        };
        let counted = CountingField::new(&self.field);
        let (chunk, trace) = solve_equilibrium(&counted, &ncond, &init, &self.solver)?;
        Ok(Decision {
            actions: self.normalization.denormalize_chunk(&chunk)?,
            chunk,
            iterations: trace.iterations,
            evaluations: counted.count(),
        })
    }
}

/// Flow-matching baseline: fixed-step Euler integration from noise.
#[derive(Debug, Clone)]
pub struct FlowDecoder {
    pub field: FieldParams,
    pub normalization: Normalization,
    pub steps: usize,
}

impl FlowDecoder {
    pub fn new(field: FieldParams, normalization: Normalization, steps: usize) -> Result<Self> {
        if !field.config().time_conditioned {
            return Err(Error::Config("flow decoder needs a time-conditioned field".into()));
        }
        if steps == 0 {
            return Err(Error::Config("flow decoder needs at least one step".into()));
        }
        check_normalization(&field, &normalization)?;
        Ok(Self {
            field,
            normalization,
            steps,
        })
    }
}

impl Policy for FlowDecoder {
    fn decode(&self, cond: &Condition, _warm: Option<&WarmStartState>, rng: &mut ChaCha8Rng) -> Result<Decision> {
        let cfg = self.field.config();
        let ncond = self.normalization.normalize_condition(cond)?;
        let init = cold_start_init(cfg.horizon, cfg.action_dim, rng);
        let counted = CountingField::new(&self.field);
        let chunk = euler_flow_from(&counted, &ncond, &init, self.steps)?;
        Ok(Decision {
            actions: self.normalization.denormalize_chunk(&chunk)?,
            chunk,
            iterations: self.steps,
            evaluations: counted.count(),
        })
    }
}
