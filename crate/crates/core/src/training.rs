//! Equilibrium-matching and flow-matching objectives plus a minimal training loop.
//!
//! Both objectives share the interpolant `A_g = g A + (1 - g) eps` with
//! `g ~ U(0, 1)` and `eps ~ N(0, I)` drawn fresh per sample per step.
//!
//! The equilibrium field regresses `w(g) (eps - A)` at `A_g`. With this sign
//! the field is the gradient of an implicit energy whose minima sit on the
//! data, so the solver update `A - eta f(A)` descends toward demonstrations.
//! The flow field regresses the velocity `A - eps` at `(A_g, g)`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chunk::{make_interpolant, ActionChunk, Condition};
use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::field::{field_param_gradient, FieldParams, RegressionSample};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ScheduleSpec {
    /// `w(g) = 1 - g`
    #[default]
    Linear,
    /// `w(g) = min(slope (1 - g), 1)`
    TruncatedLinear { slope: f64 },
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ScheduleSpec::Linear => Ok(()),
            ScheduleSpec::TruncatedLinear { slope } if slope > 0.0 && slope.is_finite() => Ok(()),
            ScheduleSpec::TruncatedLinear { slope } => Err(Error::Config(format!(
                "truncated-linear slope must be positive, got {slope}"
            ))),
        }
    }
}

/// Target weight `w(g)`; vanishes at `g = 1` for every schedule.
pub fn weight_schedule(gamma: f64, spec: ScheduleSpec) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1]")));
    }
    Ok(match spec {
        ScheduleSpec::Linear => 1.0 - gamma,
        ScheduleSpec::TruncatedLinear { slope } => (slope * (1.0 - gamma)).min(1.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    #[default]
    Eqm,
    Flow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Anneal the learning rate to zero over `steps` on a half-cosine.
    pub cosine_decay: bool,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub schedule: ScheduleSpec,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 64,
            learning_rate: 3e-3,
            cosine_decay: true,
            optimizer: Optimizer::Adam,
            seed: 0,
            schedule: ScheduleSpec::Linear,
            objective: Objective::Eqm,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.schedule.validate()
    }
}

/// Per-coordinate affine normalization of actions and conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
    pub cond_mean: Vec<f64>,
    pub cond_std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-6;

fn mean_std(columns: usize, rows: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; columns];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    let n = rows.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; columns];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd < STD_FLOOR {
                1.0
            } else {
                sd
            }
        })
        .collect();
    (mean, std)
}

impl Normalization {
    pub fn identity(action_dim: usize, cond_width: usize) -> Self {
        Self {
            action_mean: vec![0.0; action_dim],
            action_std: vec![1.0; action_dim],
            cond_mean: vec![0.0; cond_width],
            cond_std: vec![1.0; cond_width],
        }
    }

    /// Fits per action dimension (pooled over horizon steps) and per condition feature.
    pub fn fit(records: &[(Condition, ActionChunk)]) -> Result<Self> {
        let (c0, a0) = records
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot fit normalization on no records".into()))?;
        let d = a0.dim();
        let action_rows: Vec<&[f64]> = records.iter().flat_map(|(_, a)| a.rows()).collect();
        let cond_rows: Vec<&[f64]> = records.iter().map(|(c, _)| c.as_slice()).collect();
        let (action_mean, action_std) = mean_std(d, &action_rows);
        let (cond_mean, cond_std) = mean_std(c0.width(), &cond_rows);
        Ok(Self {
            action_mean,
            action_std,
            cond_mean,
            cond_std,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.action_mean.len()
    }

    pub fn cond_width(&self) -> usize {
        self.cond_mean.len()
    }

    pub fn normalize_chunk(&self, chunk: &ActionChunk) -> Result<ActionChunk> {
        self.map_chunk(chunk, |v, m, s| (v - m) / s)
    }

    pub fn denormalize_chunk(&self, chunk: &ActionChunk) -> Result<ActionChunk> {
        self.map_chunk(chunk, |v, m, s| v * s + m)
    }

    fn map_chunk(&self, chunk: &ActionChunk, f: impl Fn(f64, f64, f64) -> f64) -> Result<ActionChunk> {
        chunk.ensure_shape(chunk.horizon(), self.action_dim())?;
        let d = self.action_dim();
        let values = chunk
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, self.action_mean[i % d], self.action_std[i % d]))
            .collect();
        ActionChunk::new(chunk.horizon(), d, values)
    }

    pub fn normalize_condition(&self, cond: &Condition) -> Result<Condition> {
        cond.ensure_width(self.cond_width())?;
        let features = cond
            .as_slice()
            .iter()
            .zip(self.cond_mean.iter().zip(&self.cond_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        Condition::from_features(features, cond.state_len())
    }
}

/// Demonstration pairs recorded from a scripted expert.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env: EnvKind,
    pub horizon: usize,
    pub action_dim: usize,
    pub cond_width: usize,
    pub state_len: usize,
    pub records: Vec<(Condition, ActionChunk)>,
    pub normalization: Normalization,
}

impl Dataset {
    /// Validates shapes and fits normalization statistics.
    pub fn from_records(env: EnvKind, records: Vec<(Condition, ActionChunk)>) -> Result<Self> {
        let (c0, a0) = records
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty dataset".into()))?;
        let (horizon, action_dim, cond_width, state_len) =
            (a0.horizon(), a0.dim(), c0.width(), c0.state_len());
        for (c, a) in &records {
            a.ensure_shape(horizon, action_dim)?;
            c.ensure_width(cond_width)?;
        }
        let normalization = Normalization::fit(&records)?;
        Ok(Self {
            env,
            horizon,
            action_dim,
            cond_width,
            state_len,
            records,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records mapped through the dataset's own normalization.
    pub fn normalized_records(&self) -> Result<Vec<(Condition, ActionChunk)>> {
        self.records
            .iter()
            .map(|(c, a)| {
                Ok((
                    self.normalization.normalize_condition(c)?,
                    self.normalization.normalize_chunk(a)?,
                ))
            })
            .collect()
    }
}

/// A fully specified objective sample (noise and interpolation factor fixed).
#[derive(Debug, Clone)]
pub struct ObjectiveSample {
    pub cond: Condition,
    pub data: ActionChunk,
    pub noise: ActionChunk,
    pub gamma: f64,
}

/// Draws `eps ~ N(0, I)` and `g ~ U(0, 1)` for every record of the batch.
pub fn draw_samples<R: Rng + ?Sized>(
    batch: &[(Condition, ActionChunk)],
    rng: &mut R,
) -> Vec<ObjectiveSample> {
    batch
        .iter()
        .map(|(cond, data)| {
            let noise = ActionChunk::standard_normal(data.horizon(), data.dim(), rng);
            let gamma = rng.random_range(0.0..1.0);
            ObjectiveSample {
                cond: cond.clone(),
                data: data.clone(),
                noise,
                gamma,
            }
        })
        .collect()
}

/// Equilibrium-matching regression problem for fixed draws.
pub fn eqm_regression(samples: &[ObjectiveSample], spec: ScheduleSpec) -> Result<Vec<RegressionSample>> {
    samples
        .iter()
        .map(|s| {
            let interp = make_interpolant(&s.data, &s.noise, s.gamma)?;
            let w = weight_schedule(s.gamma, spec)?;
            Ok(RegressionSample {
                chunk: interp.a_gamma,
                cond: s.cond.clone(),
                target: s.noise.sub(&s.data)?.scale(w),
                time: None,
            })
        })
        .collect()
}

/// Flow-matching regression problem for fixed draws.
pub fn flow_regression(samples: &[ObjectiveSample]) -> Result<Vec<RegressionSample>> {
    samples
        .iter()
        .map(|s| {
            let interp = make_interpolant(&s.data, &s.noise, s.gamma)?;
            Ok(RegressionSample {
                chunk: interp.a_gamma,
                cond: s.cond.clone(),
                target: s.data.sub(&s.noise)?,
                time: Some(s.gamma),
            })
        })
        .collect()
}

fn require_time_conditioning(params: &FieldParams, want: bool) -> Result<()> {
    if params.config().time_conditioned != want {
        let msg = if want {
            "flow objective requires a time-conditioned field"
        } else {
            "equilibrium objective requires a time-free field"
        };
        return Err(Error::Config(msg.into()));
    }
    Ok(())
}

pub fn eqm_loss_fixed(
    params: &FieldParams,
    samples: &[ObjectiveSample],
    spec: ScheduleSpec,
) -> Result<(f64, FieldParams)> {
    require_time_conditioning(params, false)?;
    field_param_gradient(params, &eqm_regression(samples, spec)?)
}

pub fn flow_loss_fixed(params: &FieldParams, samples: &[ObjectiveSample]) -> Result<(f64, FieldParams)> {
    require_time_conditioning(params, true)?;
    field_param_gradient(params, &flow_regression(samples)?)
}

/// Batch-mean equilibrium-matching loss and gradient with fresh noise draws.
pub fn eqm_loss<R: Rng + ?Sized>(
    params: &FieldParams,
    batch: &[(Condition, ActionChunk)],
    spec: ScheduleSpec,
    rng: &mut R,
) -> Result<(f64, FieldParams)> {
    eqm_loss_fixed(params, &draw_samples(batch, rng), spec)
}

/// Batch-mean conditional flow-matching loss and gradient with fresh noise draws.
pub fn flow_loss<R: Rng + ?Sized>(
    params: &FieldParams,
    batch: &[(Condition, ActionChunk)],
    rng: &mut R,
) -> Result<(f64, FieldParams)> {
    flow_loss_fixed(params, &draw_samples(batch, rng))
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Learning rate at `step` of a `config.steps`-step run.
pub fn learning_rate_at(config: &TrainConfig, step: usize) -> f64 {
    if !config.cosine_decay || config.steps == 0 {
        return config.learning_rate;
    }
    let progress = step as f64 / config.steps as f64;
    0.5 * config.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn apply_update(
    params: &mut FieldParams,
    grad: &FieldParams,
    cfg: &TrainConfig,
    lr: f64,
    adam: &mut Option<AdamState>,
) {
    match cfg.optimizer {
        Optimizer::Sgd => {
            for (p, g) in params.values_mut().iter_mut().zip(grad.values()) {
                *p -= lr * g;
            }
        }
        Optimizer::Adam => {
            let n = params.len();
            let st = adam.get_or_insert_with(|| AdamState {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - BETA1.powi(st.t);
            let bc2 = 1.0 - BETA2.powi(st.t);
            for (((p, g), m), v) in params
                .values_mut()
                .iter_mut()
                .zip(grad.values())
                .zip(&mut st.m)
                .zip(&mut st.v)
            {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Trains on normalized dataset records; returns final params and the per-step loss curve.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    initial: FieldParams,
) -> Result<(FieldParams, Vec<f64>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let fc = initial.config();
    if fc.horizon != dataset.horizon || fc.action_dim != dataset.action_dim || fc.cond_width != dataset.cond_width {
        return Err(Error::shape(
            format!("{}x{} chunks, condition width {}", dataset.horizon, dataset.action_dim, dataset.cond_width),
            format!("field {}x{}, condition width {}", fc.horizon, fc.action_dim, fc.cond_width),
        ));
    }
    require_time_conditioning(&initial, config.objective == Objective::Flow)?;

    let records = dataset.normalized_records()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = initial;
    let mut adam = None;
    let mut curve = Vec::with_capacity(config.steps);
    let mut batch = Vec::with_capacity(config.batch_size);
    for step in 0..config.steps {
        batch.clear();
        for _ in 0..config.batch_size {
            batch.push(records[rng.random_range(0..records.len())].clone());
        }
        let (loss, grad) = match config.objective {
            Objective::Eqm => eqm_loss(&params, &batch, config.schedule, &mut rng)?,
            Objective::Flow => flow_loss(&params, &batch, &mut rng)?,
        };
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("training diverged at step {step}")));
        }
        apply_update(&mut params, &grad, config, learning_rate_at(config, step), &mut adam);
        if params.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite parameters after step {step}")));
        }
        curve.push(loss);
    }
    Ok((params, curve))
}
