//! Per-token latent refinement: state, explicit Euler updates, and depth
//! truncation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: (usize, usize), got: (usize, usize) },
    #[error("state error: {0}")]
    State(String),
    #[error("non-finite latent at refinement step {step}, position {position}")]
    Numeric { step: usize, position: usize },
}

pub type Result<T> = std::result::Result<T, FlowError>;

/// Dense row-major matrix of `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(FlowError::Shape { expected: (rows, cols), got: (data.len() / cols.max(1), cols) });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(FlowError::Shape { expected: (rows.len(), cols), got: (rows.len(), r.len()) });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Latents `z_i` with progression times `t_i`; the first `prompt_len` rows
/// are conditioning and never move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSequence {
    latents: Matrix,
    times: Vec<f64>,
    prompt_len: usize,
}

impl LatentSequence {
    pub fn new(latents: Matrix, times: Vec<f64>, prompt_len: usize) -> Result<Self> {
        if times.len() != latents.rows() {
            return Err(FlowError::Shape { expected: (latents.rows(), 1), got: (times.len(), 1) });
        }
        if let Some(t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(FlowError::Domain(format!("time {t} outside [0, 1]")));
        }
        if prompt_len > latents.rows() {
            return Err(FlowError::Domain(format!("prompt_len {prompt_len} exceeds length {}", latents.rows())));
        }
        Ok(Self { latents, times, prompt_len })
    }

    pub fn latents(&self) -> &Matrix {
        &self.latents
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn len(&self) -> usize {
        self.latents.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Truncation {
    #[default]
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub k_max: usize,
    pub dt: f64,
    pub truncation: Truncation,
    pub soft_temperature: f64,
}

impl StepConfig {
    pub fn new(k_max: usize, truncation: Truncation) -> Self {
        let dt = if k_max == 0 { 0.0 } else { 1.0 / k_max as f64 };
        Self { k_max, dt, truncation, soft_temperature: DEFAULT_SOFT_TEMPERATURE }
    }

    pub fn hard(k_max: usize) -> Self {
        Self::new(k_max, Truncation::Hard)
    }

    /// `k_max = 0` is allowed and means no refinement at all.
    pub fn validate(&self) -> Result<()> {
        let expected = if self.k_max == 0 { 0.0 } else { 1.0 / self.k_max as f64 };
        if (self.dt - expected).abs() > 1e-12 {
            return Err(FlowError::Domain(format!("dt {} must equal 1/k_max = {expected}", self.dt)));
        }
        if !(self.soft_temperature > 0.0) {
            return Err(FlowError::Domain(format!("soft temperature {} not positive", self.soft_temperature)));
        }
        Ok(())
    }
}

pub const DEFAULT_SOFT_TEMPERATURE: f64 = 0.1;
pub const FINAL_SOFT_TEMPERATURE: f64 = 0.02;

/// Refinement depth `K_i = floor(k_max * t_i)`.
pub fn depth(t: f64, k_max: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::Domain(format!("time {t} outside [0, 1]")));
    }
    Ok(((k_max as f64 * t).floor() as usize).min(k_max))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Differentiable participation weight `sigmoid((k_max t - k) / tau)` of
/// step `k` for a token at time `t`.
pub fn soft_gate(t: f64, k: usize, k_max: usize, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(FlowError::Domain(format!("temperature {tau} not positive")));
    }
    if k >= k_max {
        return Err(FlowError::Domain(format!("step {k} outside [0, {k_max})")));
    }
    Ok(sigmoid((k_max as f64 * t - k as f64) / tau))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementState {
    pub seq: LatentSequence,
    pub step: usize,
    pub frozen: Vec<bool>,
}

impl RefinementState {
    pub fn new(seq: LatentSequence, config: &StepConfig) -> Self {
        let mut state = Self { frozen: vec![false; seq.len()], seq, step: 0 };
        state.refresh_frozen(config.k_max);
        state
    }

    fn refresh_frozen(&mut self, k_max: usize) {
        let step = self.step;
        let prompt_len = self.seq.prompt_len;
        for (i, (f, &t)) in self.frozen.iter_mut().zip(&self.seq.times).enumerate() {
            *f = i < prompt_len || step >= depth(t, k_max).unwrap_or(0);
        }
    }

    /// Rows that the next step will move under `config`.
    pub fn active(&self, config: &StepConfig) -> Vec<bool> {
        let p = self.seq.prompt_len;
        match config.truncation {
            Truncation::Hard => self
                .seq
                .times
                .iter()
                .enumerate()
                .map(|(i, &t)| i >= p && self.step < depth(t, config.k_max).unwrap_or(0))
                .collect(),
            Truncation::Soft => (0..self.seq.len()).map(|i| i >= p).collect(),
        }
    }

    pub fn is_complete(&self, config: &StepConfig) -> bool {
        self.step >= config.k_max
    }

    /// Applies one explicit update in place; returns the number of rows moved.
    pub fn advance(&mut self, velocities: &Matrix, config: &StepConfig) -> Result<usize> {
        config.validate()?;
        if velocities.shape() != self.seq.latents.shape() {
            return Err(FlowError::Shape { expected: self.seq.latents.shape(), got: velocities.shape() });
        }
        if self.step >= config.k_max {
            return Err(FlowError::State(format!("state already at step {} of {}", self.step, config.k_max)));
        }
        let active = self.active(config);
        let mut moved = 0;
        for (i, &on) in active.iter().enumerate() {
            if !on {
                continue;
            }
            let scale = match config.truncation {
                Truncation::Hard => config.dt,
                Truncation::Soft => {
                    config.dt * soft_gate(self.seq.times[i], self.step, config.k_max, config.soft_temperature)?
                }
            } as f32;
            let row = self.seq.latents.row_mut(i);
            for (z, v) in row.iter_mut().zip(velocities.row(i)) {
                *z += scale * v;
            }
            if row.iter().any(|z| !z.is_finite()) {
                return Err(FlowError::Numeric { step: self.step, position: i });
            }
            moved += 1;
        }
        self.step += 1;
        self.refresh_frozen(config.k_max);
        Ok(moved)
    }
}

/// `z <- z + dt * F` for the active rows, returning the advanced state.
pub fn ode_step(mut state: RefinementState, velocities: &Matrix, config: &StepConfig) -> Result<RefinementState> {
    state.advance(velocities, config)?;
    Ok(state)
}

/// Work counters for one refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RefinementStats {
    /// Calls made to the velocity field.
    pub field_evals: usize,
    /// Row updates applied, summed over steps.
    pub token_updates: usize,
    /// Rows presented to the field, summed over calls.
    pub rows_evaluated: usize,
}

/// Runs all `k_max` steps. The field is called with `(latents, times, step)`
/// and is skipped when no row would move.
pub fn refine_trajectory<F, E>(
    seq: LatentSequence,
    mut field: F,
    config: &StepConfig,
) -> std::result::Result<(LatentSequence, RefinementStats), E>
where
    F: FnMut(&Matrix, &[f64], usize) -> std::result::Result<Matrix, E>,
    E: From<FlowError>,
{
    config.validate()?;
    let mut state = RefinementState::new(seq, config);
    let mut stats = RefinementStats::default();
    while !state.is_complete(config) {
        if !state.active(config).iter().any(|a| *a) {
            state.step += 1;
            state.refresh_frozen(config.k_max);
            continue;
        }
        let v = field(&state.seq.latents, &state.seq.times, state.step)?;
        stats.field_evals += 1;
        stats.rows_evaluated += state.seq.len();
        stats.token_updates += state.advance(&v, config)?;
    }
    Ok((state.seq, stats))
}
