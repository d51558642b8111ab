//! Conditional vector fields.
//!
//! [`FieldParams`] is a plain multilayer perceptron on the input
//! `[flatten(A); cond; (time)]` whose output is reshaped to an `H x d` chunk.
//! Parameters live in a single flat buffer; layer `l` stores its weight
//! matrix (`out x in`, row-major) followed by its bias vector, for
//! `l = 0..=hidden.len()`. Checkpoints serialize this buffer verbatim.
//!
//! [`AnalyticField`] provides closed-form fields with known energy and
//! smoothness constants for solver and bound checks.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::chunk::{ActionChunk, Condition};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    /// Linear hidden units; only used to build exact test networks.
    Identity,
}

impl Activation {
    pub fn tag(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Identity),
            _ => Err(Error::Format(format!("unknown activation tag {tag}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `y = act(z)`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldConfig {
    pub horizon: usize,
    pub action_dim: usize,
    pub cond_width: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_conditioned: bool,
}

impl FieldConfig {
    pub fn new(horizon: usize, action_dim: usize, cond_width: usize) -> Self {
        Self {
            horizon,
            action_dim,
            cond_width,
            hidden: vec![128, 128],
            activation: Activation::Tanh,
            time_conditioned: false,
        }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn time_conditioned(mut self, flag: bool) -> Self {
        self.time_conditioned = flag;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.action_dim == 0 {
            return Err(Error::Config("horizon and action dim must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn chunk_len(&self) -> usize {
        self.horizon * self.action_dim
    }

    pub fn input_width(&self) -> usize {
        self.chunk_len() + self.cond_width + usize::from(self.time_conditioned)
    }

    pub fn output_width(&self) -> usize {
        self.chunk_len()
    }

    /// `(out, in)` for every layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(self.input_width());
        widths.extend(&self.hidden);
        widths.push(self.output_width());
        widths.windows(2).map(|w| (w[1], w[0])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }
}

/// Flat parameter (or gradient) buffer laid out per [`FieldConfig::layer_shapes`].
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    config: FieldConfig,
    values: Vec<f64>,
    // (weight offset, bias offset, out, in) per layer
    layout: Vec<(usize, usize, usize, usize)>,
}

fn layout_for(config: &FieldConfig) -> Vec<(usize, usize, usize, usize)> {
    let mut off = 0;
    config
        .layer_shapes()
        .into_iter()
        .map(|(o, i)| {
            let w = off;
            let b = w + o * i;
            off = b + o;
            (w, b, o, i)
        })
        .collect()
}

impl FieldParams {
    pub fn zeros(config: FieldConfig) -> Result<Self> {
        config.validate()?;
        let n = config.param_count();
        Self::from_values(config, vec![0.0; n])
    }

    pub fn from_values(config: FieldConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if values.len() != config.param_count() {
            return Err(Error::shape(
                format!("{} parameters", config.param_count()),
                format!("{} parameters", values.len()),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite parameter at index {i}")));
        }
        let layout = layout_for(&config);
        Ok(Self { config, values, layout })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.layout.len()
    }

    pub fn weight(&self, layer: usize) -> ArrayView2<'_, f64> {
        let (w, _, o, i) = self.layout[layer];
        ArrayView2::from_shape((o, i), &self.values[w..w + o * i]).expect("layout")
    }

    pub fn bias(&self, layer: usize) -> ArrayView1<'_, f64> {
        let (_, b, o, _) = self.layout[layer];
        ArrayView1::from(&self.values[b..b + o])
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut [f64] {
        let (w, _, o, i) = self.layout[layer];
        &mut self.values[w..w + o * i]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let (_, b, o, _) = self.layout[layer];
        &mut self.values[b..b + o]
    }

    /// Range of flat indices owned by `layer` (weights then bias).
    pub fn layer_range(&self, layer: usize) -> std::ops::Range<usize> {
        let (w, b, o, _) = self.layout[layer];
        w..b + o
    }

    fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            values: vec![0.0; self.values.len()],
            layout: self.layout.clone(),
        }
    }

    fn check_inputs(&self, chunk: &ActionChunk, cond: &Condition, time: Option<f64>) -> Result<()> {
        chunk.ensure_shape(self.config.horizon, self.config.action_dim)?;
        cond.ensure_width(self.config.cond_width)?;
        match (self.config.time_conditioned, time) {
            (true, None) => Err(Error::InvalidArgument(
                "time-conditioned field requires a time input".into(),
            )),
            (false, Some(_)) => Err(Error::InvalidArgument(
                "time-free field does not accept a time input".into(),
            )),
            (_, Some(t)) if !t.is_finite() => Err(Error::Numeric("non-finite time input".into())),
            _ => Ok(()),
        }
    }

    fn write_input(&self, chunk: &ActionChunk, cond: &Condition, time: Option<f64>, out: &mut [f64]) {
        let n = chunk.len();
        out[..n].copy_from_slice(chunk.as_slice());
        out[n..n + cond.width()].copy_from_slice(cond.as_slice());
        if let Some(t) = time {
            out[n + cond.width()] = t;
        }
    }
}

/// Deterministic fan-in scaled init; output layer zeroed so the initial field is identically zero.
pub fn init_params(config: &FieldConfig, seed: u64) -> Result<FieldParams> {
    let mut params = FieldParams::zeros(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = params.num_layers() - 1;
    for layer in 0..last {
        let (_, _, _, fan_in) = params.layout[layer];
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
        for w in params.weight_mut(layer) {
            *w = normal.sample(&mut rng);
        }
    }
    Ok(params)
}

/// Evaluates the network at a single input.
pub fn field_forward(
    params: &FieldParams,
    chunk: &ActionChunk,
    cond: &Condition,
    time: Option<f64>,
) -> Result<ActionChunk> {
    params.check_inputs(chunk, cond, time)?;
    let cfg = &params.config;
    let mut x = vec![0.0; cfg.input_width()];
    params.write_input(chunk, cond, time, &mut x);

    let last = params.num_layers() - 1;
    for layer in 0..=last {
        let (w_off, b_off, out_w, in_w) = params.layout[layer];
        let weights = &params.values[w_off..w_off + out_w * in_w];
        let bias = &params.values[b_off..b_off + out_w];
        let mut y = bias.to_vec();
        for (o, row) in weights.chunks_exact(in_w).enumerate() {
            y[o] += row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>();
        }
        if layer < last {
            for v in &mut y {
                *v = cfg.activation.apply(*v);
            }
        }
        x = y;
    }
    let out = ActionChunk::from_raw(cfg.horizon, cfg.action_dim, x);
    if !out.is_finite() {
        return Err(Error::Numeric("non-finite field output".into()));
    }
    Ok(out)
}

/// One regression example for [`field_param_gradient`].
#[derive(Debug, Clone)]
pub struct RegressionSample {
    pub chunk: ActionChunk,
    pub cond: Condition,
    pub target: ActionChunk,
    pub time: Option<f64>,
}

/// Batch-mean squared error `mean_b ||f(x_b) - t_b||^2` and its exact parameter gradient.
pub fn field_param_gradient(
    params: &FieldParams,
    batch: &[RegressionSample],
) -> Result<(f64, FieldParams)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let cfg = &params.config;
    let n = batch.len();
    let mut input = Array2::<f64>::zeros((n, cfg.input_width()));
    let mut target = Array2::<f64>::zeros((n, cfg.output_width()));
    for (b, s) in batch.iter().enumerate() {
        params.check_inputs(&s.chunk, &s.cond, s.time)?;
        s.target.ensure_shape(cfg.horizon, cfg.action_dim)?;
        params.write_input(
            &s.chunk,
            &s.cond,
            s.time,
            input.row_mut(b).as_slice_mut().expect("contiguous row"),
        );
        target
            .row_mut(b)
            .as_slice_mut()
            .expect("contiguous row")
            .copy_from_slice(s.target.as_slice());
    }

    // activations[l] is the input to layer l; the last entry is the network output.
    let last = params.num_layers() - 1;
    let mut activations: Vec<Array2<f64>> = Vec::with_capacity(last + 2);
    activations.push(input);
    for layer in 0..=last {
        let mut z = activations[layer].dot(&params.weight(layer).t());
        z += &params.bias(layer);
        if layer < last {
            z.mapv_inplace(|v| cfg.activation.apply(v));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite activation in layer {layer}")));
        }
        activations.push(z);
    }

    let diff = &activations[last + 1] - &target;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }

    let mut grad = params.zeros_like();
    let mut delta = diff * (2.0 / n as f64);
    for layer in (0..=last).rev() {
        let a_in = &activations[layer];
        let dw = delta.t().dot(a_in);
        let db: Array1<f64> = delta.sum_axis(Axis(0));
        if dw.iter().chain(db.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in layer {layer}")));
        }
        grad.weight_mut(layer)
            .copy_from_slice(dw.as_slice().expect("standard layout"));
        grad.bias_mut(layer)
            .copy_from_slice(db.as_slice().expect("standard layout"));
        if layer > 0 {
            let mut back = delta.dot(&params.weight(layer));
            back.zip_mut_with(a_in, |g, &y| *g *= cfg.activation.derivative_from_output(y));
            delta = back;
        }
    }
    Ok((loss, grad))
}

/// A time-free field `f(A; c)`.
pub trait VectorField: Sync {
    fn evaluate(&self, chunk: &ActionChunk, cond: &Condition) -> Result<ActionChunk>;
}

/// A time-conditioned field `f(A; c, t)`.
pub trait TimeVectorField: Sync {
    fn evaluate_at(&self, chunk: &ActionChunk, cond: &Condition, time: f64) -> Result<ActionChunk>;
}

impl VectorField for FieldParams {
    fn evaluate(&self, chunk: &ActionChunk, cond: &Condition) -> Result<ActionChunk> {
        field_forward(self, chunk, cond, None)
    }
}

impl TimeVectorField for FieldParams {
    fn evaluate_at(&self, chunk: &ActionChunk, cond: &Condition, time: f64) -> Result<ActionChunk> {
        field_forward(self, chunk, cond, Some(time))
    }
}

impl<F: VectorField + ?Sized> VectorField for &F {
    fn evaluate(&self, chunk: &ActionChunk, cond: &Condition) -> Result<ActionChunk> {
        (**self).evaluate(chunk, cond)
    }
}

impl<F: TimeVectorField + ?Sized> TimeVectorField for &F {
    fn evaluate_at(&self, chunk: &ActionChunk, cond: &Condition, time: f64) -> Result<ActionChunk> {
        (**self).evaluate_at(chunk, cond, time)
    }
}

/// Wraps a field and counts every evaluation.
#[derive(Debug)]
pub struct CountingField<F> {
    inner: F,
    count: AtomicUsize,
}

impl<F> CountingField<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            count: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.count.store(0, Ordering::Relaxed);
    }
}

impl<F: VectorField> VectorField for CountingField<F> {
    fn evaluate(&self, chunk: &ActionChunk, cond: &Condition) -> Result<ActionChunk> {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.evaluate(chunk, cond)
    }
}

impl<F: TimeVectorField> TimeVectorField for CountingField<F> {
    fn evaluate_at(&self, chunk: &ActionChunk, cond: &Condition, time: f64) -> Result<ActionChunk> {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.evaluate_at(chunk, cond, time)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalyticKind {
    /// `kappa (A - A*)`
    LinearContraction,
    /// Gradient of `0.5 kappa ||A - A*||^2`; same map as the linear contraction.
    QuadraticEnergyGradient,
    /// `kappa (A - A*) + omega J (A - A*)` with `J` rotating consecutive coordinate pairs.
    Rotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticField {
    pub kind: AnalyticKind,
    pub stiffness: f64,
    pub equilibrium: ActionChunk,
    pub rotation: f64,
}

impl AnalyticField {
    pub fn linear(stiffness: f64, equilibrium: ActionChunk) -> Self {
        Self {
            kind: AnalyticKind::LinearContraction,
            stiffness,
            equilibrium,
            rotation: 0.0,
        }
    }

    pub fn quadratic(stiffness: f64, equilibrium: ActionChunk) -> Self {
        Self {
            kind: AnalyticKind::QuadraticEnergyGradient,
            stiffness,
            equilibrium,
            rotation: 0.0,
        }
    }

    pub fn rotation(stiffness: f64, rotation: f64, equilibrium: ActionChunk) -> Self {
        Self {
            kind: AnalyticKind::Rotation,
            stiffness,
            equilibrium,
            rotation,
        }
    }

    pub fn is_conservative(&self) -> bool {
        self.kind != AnalyticKind::Rotation || self.rotation == 0.0
    }

    /// Surrogate energy `0.5 kappa ||A - A*||^2`, or `None` for a rotating field.
    pub fn energy(&self, chunk: &ActionChunk) -> Result<Option<f64>> {
        if !self.is_conservative() {
            return Ok(None);
        }
        Ok(Some(0.5 * self.stiffness * chunk.sub(&self.equilibrium)?.norm_sq()))
    }

    /// Lower bound of the energy.
    pub fn energy_min(&self) -> f64 {
        0.0
    }

    /// Lipschitz constant of the field (the smoothness constant of its energy).
    pub fn lipschitz(&self) -> f64 {
        match self.kind {
            AnalyticKind::Rotation => self.stiffness.hypot(self.rotation),
            _ => self.stiffness,
        }
    }

    /// The skew part `omega J (A - A*)` on its own.
    pub fn skew_component(&self, chunk: &ActionChunk) -> Result<ActionChunk> {
        let dev = chunk.sub(&self.equilibrium)?;
        let v = dev.as_slice();
        let mut out = vec![0.0; v.len()];
        for i in (0..v.len() - v.len() % 2).step_by(2) {
            out[i] = -self.rotation * v[i + 1];
            out[i + 1] = self.rotation * v[i];
        }
        Ok(ActionChunk::from_raw(chunk.horizon(), chunk.dim(), out))
    }
}

/// Closed-form evaluation of an analytic field.
pub fn analytic_eval(field: &AnalyticField, chunk: &ActionChunk) -> Result<ActionChunk> {
    let pull = chunk.sub(&field.equilibrium)?.scale(field.stiffness);
    match field.kind {
        AnalyticKind::LinearContraction | AnalyticKind::QuadraticEnergyGradient => Ok(pull),
        AnalyticKind::Rotation => pull.add(&field.skew_component(chunk)?),
    }
}

impl VectorField for AnalyticField {
    fn evaluate(&self, chunk: &ActionChunk, _cond: &Condition) -> Result<ActionChunk> {
        analytic_eval(self, chunk)
    }
}

/// Field returning the same chunk everywhere, ignoring time and condition.
#[derive(Debug, Clone)]
pub struct ConstantField(pub ActionChunk);

impl VectorField for ConstantField {
    fn evaluate(&self, chunk: &ActionChunk, _cond: &Condition) -> Result<ActionChunk> {
        chunk.ensure_shape(self.0.horizon(), self.0.dim())?;
        Ok(self.0.clone())
    }
}

impl TimeVectorField for ConstantField {
    fn evaluate_at(&self, chunk: &ActionChunk, cond: &Condition, _time: f64) -> Result<ActionChunk> {
        self.evaluate(chunk, cond)
    }
}
