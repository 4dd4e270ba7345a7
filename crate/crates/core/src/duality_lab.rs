//! Numerical checks of the AR-flow / probability-flow correspondence.
//!
//! Everything here runs on densities with closed-form scores (isotropic
//! Gaussian mixtures transported by a linear SDE) or on discrete chains small
//! enough to sum over exhaustively, so each claim is checked against exact
//! arithmetic rather than a learned model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::schedules::{NoiseSchedule, ScheduleError, TimeReparam};

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("invalid density: {0}")]
    Density(String),
    #[error("invalid chain: {0}")]
    Chain(String),
    #[error("enumeration budget exceeded: {0}")]
    Size(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, LabError>;

/// Per-trajectory RNG stream derived from `(seed, index)`.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Drift of the forward SDE `dz = mu(t) z dt + sigma(t) dw`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Drift {
    /// `mu = 0`; the marginal variance grows by `int sigma^2`.
    Zero,
    /// `mu = -sigma^2 / 2`; unit-variance data stays unit variance.
    VariancePreserving,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionProcess {
    pub schedule: NoiseSchedule,
    pub drift: Drift,
}

impl DiffusionProcess {
    /// Zero-drift process, the form used by the flow correspondence.
    pub fn zero_drift(schedule: NoiseSchedule) -> Self {
        Self { schedule, drift: Drift::Zero }
    }

    pub fn variance_preserving(schedule: NoiseSchedule) -> Self {
        Self { schedule, drift: Drift::VariancePreserving }
    }

    pub fn mu(&self, t: f64) -> f64 {
        match self.drift {
            Drift::Zero => 0.0,
            Drift::VariancePreserving => -0.5 * self.schedule.sigma_sq(t),
        }
    }

    pub fn sigma_sq(&self, t: f64) -> f64 {
        self.schedule.sigma_sq(t)
    }

    /// `(a, b)` such that `z_t = a z_0 + sqrt(b) eps`.
    pub fn marginal_coeffs(&self, t: f64) -> (f64, f64) {
        let integral = self.schedule.integrated_sigma_sq(t);
        match self.drift {
            Drift::Zero => (1.0, integral),
            Drift::VariancePreserving => ((-0.5 * integral).exp(), -(-integral).exp_m1()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

/// Isotropic Gaussian mixture with exact diffused scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyticDensity {
    components: Vec<Component>,
}

impl AnalyticDensity {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components.first().ok_or_else(|| LabError::Density("no components".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(LabError::Density("zero-dimensional density".into()));
        }
        let mut total = 0.0;
        for c in &components {
            if c.mean.len() != dim {
                return Err(LabError::Shape { expected: dim, got: c.mean.len() });
            }
            if !(c.weight > 0.0) {
                return Err(LabError::Density(format!("weight {} not positive", c.weight)));
            }
            if !(c.variance > 0.0) {
                return Err(LabError::Density(format!("variance {} not positive", c.variance)));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(LabError::Density(format!("weights sum to {total}")));
        }
        Ok(Self { components })
    }

    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(vec![Component { weight: 1.0, mean, variance }])
    }

    /// Equal-weight two-component mixture at `-offset` and `+offset` along every axis.
    pub fn symmetric_pair(dim: usize, offset: f64, variance: f64) -> Result<Self> {
        Self::new(vec![
            Component { weight: 0.5, mean: vec![-offset; dim], variance },
            Component { weight: 0.5, mean: vec![offset; dim], variance },
        ])
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    fn check(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(LabError::Shape { expected: self.dim(), got: z.len() });
        }
        Ok(())
    }

    // per component: (log weight + log normal density, diffused mean scale, diffused variance)
    fn log_terms(&self, z: &[f64], a: f64, b: f64) -> Vec<(f64, f64)> {
        let d = z.len() as f64;
        self.components
            .iter()
            .map(|c| {
                let var = a * a * c.variance + b;
                let sq: f64 = z.iter().zip(&c.mean).map(|(zi, m)| (zi - a * m).powi(2)).sum();
                let lp = c.weight.ln() - 0.5 * sq / var - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln();
                (lp, var)
            })
            .collect()
    }

    /// Log-density of the data transported to marginal coefficients `(a, b)`.
    pub fn log_density_with(&self, z: &[f64], a: f64, b: f64) -> Result<f64> {
        self.check(z)?;
        let terms = self.log_terms(z, a, b);
        let max = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
        Ok(max + terms.iter().map(|t| (t.0 - max).exp()).sum::<f64>().ln())
    }

    /// Score of the data transported to marginal coefficients `(a, b)`.
    pub fn score_with(&self, z: &[f64], a: f64, b: f64) -> Result<Vec<f64>> {
        self.check(z)?;
        Ok(self.score_unchecked(z, a, b))
    }

    fn score_unchecked(&self, z: &[f64], a: f64, b: f64) -> Vec<f64> {
        let terms = self.log_terms(z, a, b);
        let max = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
        let resp: Vec<f64> = terms.iter().map(|t| (t.0 - max).exp()).collect();
        let norm: f64 = resp.iter().sum();
        let mut out = vec![0.0; z.len()];
        for ((c, (_, var)), r) in self.components.iter().zip(&terms).zip(&resp) {
            let w = r / norm;
            for (o, (zi, m)) in out.iter_mut().zip(z.iter().zip(&c.mean)) {
                *o -= w * (zi - a * m) / var;
            }
        }
        out
    }

    /// Draw from the marginal at coefficients `(a, b)`.
    pub fn sample_with<R: rand::Rng>(&self, a: f64, b: f64, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = &self.components[self.components.len() - 1];
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        let sd = (a * a * chosen.variance + b).sqrt();
        chosen
            .mean
            .iter()
            .map(|m| {
                let e: f64 = StandardNormal.sample(rng);
                a * m + sd * e
            })
            .collect()
    }
}

/// Exact score at time `t` of the density diffused by the variance-preserving
/// process of `schedule`.
pub fn analytic_score(density: &AnalyticDensity, z: &[f64], t: f64, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    diffused_score(density, z, t, &DiffusionProcess::variance_preserving(*schedule))
}

/// Exact score of the density diffused to time `t` under `process`.
pub fn diffused_score(density: &AnalyticDensity, z: &[f64], t: f64, process: &DiffusionProcess) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(ScheduleError::Domain(format!("t = {t} outside [0, 1]")).into());
    }
    let (a, b) = process.marginal_coeffs(t);
    density.score_with(z, a, b)
}

/// A discretized path; `grid` is strictly monotone in the direction of
/// integration and starts and ends at the interval endpoints.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryPath {
    pub grid: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub stochastic: bool,
}

impl TrajectoryPath {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("paths hold at least one state")
    }
}

fn uniform_grid(from: f64, to: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|k| if k == n { to } else { from + (to - from) * k as f64 / n as f64 }).collect()
}

fn check_steps(n_steps: usize) -> Result<()> {
    if n_steps == 0 {
        return Err(ScheduleError::Domain("n_steps must be at least 1".into()).into());
    }
    Ok(())
}

/// Euler-Maruyama path of the forward SDE from `t = 0` to `t = 1`.
pub fn simulate_forward_sde(z0: &[f64], process: &DiffusionProcess, n_steps: usize, rng_seed: u64) -> Result<TrajectoryPath> {
    check_steps(n_steps)?;
    let grid = uniform_grid(0.0, 1.0, n_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut z = z0.to_vec();
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(z.clone());
    for w in grid.windows(2) {
        let (t, h) = (w[0], w[1] - w[0]);
        let (mu, sigma) = (process.mu(t), process.sigma_sq(t).sqrt());
        for zi in z.iter_mut() {
            let xi: f64 = StandardNormal.sample(&mut rng);
            *zi += mu * *zi * h + sigma * h.sqrt() * xi;
        }
        states.push(z.clone());
    }
    Ok(TrajectoryPath { grid, states, stochastic: true })
}

/// Reverse-time Euler-Maruyama path from `t = 1` to `t = 0` driven by the
/// exact score.
pub fn simulate_reverse_sde(
    z_t: &[f64],
    density: &AnalyticDensity,
    process: &DiffusionProcess,
    n_steps: usize,
    rng_seed: u64,
) -> Result<TrajectoryPath> {
    check_steps(n_steps)?;
    density.check(z_t)?;
    let grid = uniform_grid(1.0, 0.0, n_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut z = z_t.to_vec();
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(z.clone());
    for w in grid.windows(2) {
        let (t, h) = (w[0], w[0] - w[1]);
        let (mu, sigma_sq) = (process.mu(t), process.sigma_sq(t));
        let (a, b) = process.marginal_coeffs(t);
        let score = density.score_unchecked(&z, a, b);
        let sigma = sigma_sq.sqrt();
        for (zi, s) in z.iter_mut().zip(&score) {
            let xi: f64 = StandardNormal.sample(&mut rng);
            *zi -= (mu * *zi - sigma_sq * s) * h;
            *zi += sigma * h.sqrt() * xi;
        }
        states.push(z.clone());
    }
    Ok(TrajectoryPath { grid, states, stochastic: true })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    Euler,
    Rk4,
}

/// Integrates `dz/dt = f(t, z)` across a given grid.
fn integrate_on_grid<F>(z0: &[f64], grid: &[f64], solver: Solver, mut f: F) -> Vec<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> Vec<f64>,
{
    let mut z = z0.to_vec();
    let mut states = Vec::with_capacity(grid.len());
    states.push(z.clone());
    let axpy = |z: &[f64], k: &[f64], h: f64| z.iter().zip(k).map(|(a, b)| a + h * b).collect::<Vec<_>>();
    for w in grid.windows(2) {
        let (t, h) = (w[0], w[1] - w[0]);
        match solver {
            Solver::Euler => {
                let k1 = f(t, &z);
                z = axpy(&z, &k1, h);
            }
            Solver::Rk4 => {
                let k1 = f(t, &z);
                let k2 = f(t + 0.5 * h, &axpy(&z, &k1, 0.5 * h));
                let k3 = f(t + 0.5 * h, &axpy(&z, &k2, 0.5 * h));
                let k4 = f(w[1], &axpy(&z, &k3, h));
                for i in 0..z.len() {
                    z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
        states.push(z.clone());
    }
    states
}

/// Deterministic probability-flow path from `t = 1` to `t = 0`:
/// `dz/dt = mu z - c sigma^2 score` with `c = 1/2` when `half_factor`, else
/// `c = 1`.
pub fn integrate_prob_flow(
    z_t: &[f64],
    density: &AnalyticDensity,
    process: &DiffusionProcess,
    solver: Solver,
    n_steps: usize,
    half_factor: bool,
) -> Result<TrajectoryPath> {
    check_steps(n_steps)?;
    density.check(z_t)?;
    let grid = uniform_grid(1.0, 0.0, n_steps);
    let c = if half_factor { 0.5 } else { 1.0 };
    let states = integrate_on_grid(z_t, &grid, solver, |t, z| {
        let (a, b) = process.marginal_coeffs(t);
        let (mu, sigma_sq) = (process.mu(t), process.sigma_sq(t));
        let score = density.score_unchecked(z, a, b);
        z.iter().zip(&score).map(|(zi, s)| mu * zi - c * sigma_sq * s).collect()
    });
    Ok(TrajectoryPath { grid, states, stochastic: false })
}

pub const EQUIVALENCE_TOLERANCE: f64 = 1e-6;
pub const EQUIVALENCE_MIN_STEPS: usize = 10_000;
/// Step count used for the shipped matrix; the clamped cosine schedule's
/// near-singular rate needs it to reach the tolerance.
pub const MATRIX_STEPS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub max_deviation: f64,
    pub tolerance: f64,
    pub n_steps: usize,
    pub pass: bool,
}

/// Integrates the zero-drift flow `dz/dt = -sigma^2 score_t` on a uniform
/// t-grid and the reparameterized flow `dz/ds = -C score_{t(s)}` on the image
/// grid `{s(t_k)}`, both with RK4, and reports the largest pointwise gap.
pub fn verify_reparam_equivalence(
    density: &AnalyticDensity,
    schedule: &NoiseSchedule,
    z_start: &[f64],
    n_steps: usize,
) -> Result<EquivalenceReport> {
    let (t_path, s_path) = reparam_paths(density, schedule, z_start, n_steps)?;
    let max_deviation = t_path
        .states
        .iter()
        .zip(&s_path.states)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    Ok(EquivalenceReport {
        max_deviation,
        tolerance: EQUIVALENCE_TOLERANCE,
        n_steps,
        pass: max_deviation < EQUIVALENCE_TOLERANCE && n_steps >= EQUIVALENCE_MIN_STEPS,
    })
}

/// The two paths compared by [`verify_reparam_equivalence`]: the first on the
/// t-grid, the second on the s-grid.
pub fn reparam_paths(
    density: &AnalyticDensity,
    schedule: &NoiseSchedule,
    z_start: &[f64],
    n_steps: usize,
) -> Result<(TrajectoryPath, TrajectoryPath)> {
    check_steps(n_steps)?;
    density.check(z_start)?;
    let reparam = schedule.reparam()?;
    let process = DiffusionProcess::zero_drift(*schedule);
    let t_grid = uniform_grid(1.0, 0.0, n_steps);
    let t_states = integrate_on_grid(z_start, &t_grid, Solver::Rk4, |t, z| {
        let (a, b) = process.marginal_coeffs(t);
        let sigma_sq = process.sigma_sq(t);
        density.score_unchecked(z, a, b).iter().map(|s| -sigma_sq * s).collect()
    });
    let s_grid: Vec<f64> = t_grid.iter().map(|&t| reparam.s_unchecked(t)).collect();
    let c = reparam.normalizer();
    let s_states = integrate_on_grid(z_start, &s_grid, Solver::Rk4, |s, z| {
        let (a, b) = process.marginal_coeffs(reparam.inverse_unchecked(s));
        density.score_unchecked(z, a, b).iter().map(|v| -c * v).collect()
    });
    Ok((
        TrajectoryPath { grid: t_grid, states: t_states, stochastic: false },
        TrajectoryPath { grid: s_grid, states: s_states, stochastic: false },
    ))
}

/// Integrates the reparameterized flow for a given `TimeReparam` directly.
pub fn integrate_in_s(
    density: &AnalyticDensity,
    schedule: &NoiseSchedule,
    reparam: &TimeReparam,
    z_start: &[f64],
    n_steps: usize,
) -> Result<TrajectoryPath> {
    check_steps(n_steps)?;
    density.check(z_start)?;
    let process = DiffusionProcess::zero_drift(*schedule);
    let grid = uniform_grid(1.0, 0.0, n_steps);
    let c = reparam.normalizer();
    let states = integrate_on_grid(z_start, &grid, Solver::Rk4, |s, z| {
        let (a, b) = process.marginal_coeffs(reparam.inverse_unchecked(s));
        density.score_unchecked(z, a, b).iter().map(|v| -c * v).collect()
    });
    Ok(TrajectoryPath { grid, states, stochastic: false })
}

// ---------------------------------------------------------------------------
// Discrete toy chain

const STATE_BUDGET: usize = 1_000_000;
const TABLE_BUDGET: usize = 200_000_000;

/// Row-major `states x states` transition table; row = conditioning state.
pub type Table = Vec<f64>;

/// A latent Markov chain over sequences of `length` symbols from an alphabet
/// of `alphabet` letters. State `i` encodes a sequence in base `alphabet`,
/// most significant symbol first.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyChainSpec {
    pub alphabet: usize,
    pub length: usize,
    /// Data distribution over states.
    pub data: Vec<f64>,
    /// `forward[t-1][i * S + j] = q(z_t = j | z_{t-1} = i)`.
    pub forward: Vec<Table>,
    /// Generative prior over `z_T`.
    pub prior: Vec<f64>,
    /// `reverse[t-1][i * S + j] = p(z_{t-1} = j | z_t = i)`.
    pub reverse: Vec<Table>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ElboGapReport {
    /// `E_data[log p(x)]`.
    pub exact_log_likelihood: f64,
    /// `E_data[ELBO(x)]`.
    pub elbo: f64,
    /// `exact_log_likelihood - elbo`.
    pub gap: f64,
    /// Data-averaged reverse-step KLs for `t = 1..T`, followed by the
    /// terminal KL between `q(z_T | x)` and `p(z_T | x)`. Sums to `gap`.
    pub per_step_kl: Vec<f64>,
}

fn state_count(alphabet: usize, length: usize) -> Result<usize> {
    if alphabet < 2 || alphabet > 4 {
        return Err(LabError::Chain(format!("alphabet size {alphabet} outside 2..=4")));
    }
    if length == 0 || length > 6 {
        return Err(LabError::Chain(format!("sequence length {length} outside 1..=6")));
    }
    Ok(alphabet.pow(length as u32))
}

fn check_budget(states: usize, steps: usize) -> Result<()> {
    if states * steps > STATE_BUDGET {
        return Err(LabError::Size(format!("{states} states x {steps} steps > {STATE_BUDGET}")));
    }
    if states * states * steps > TABLE_BUDGET {
        return Err(LabError::Size(format!("{} table entries > {TABLE_BUDGET}", states * states * steps)));
    }
    Ok(())
}

fn symbols(state: usize, alphabet: usize, length: usize) -> Vec<usize> {
    let mut out = vec![0; length];
    let mut s = state;
    for slot in out.iter_mut().rev() {
        *slot = s % alphabet;
        s /= alphabet;
    }
    out
}

fn vec_mat(v: &[f64], m: &Table, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        for (o, &mij) in out.iter_mut().zip(&m[i * n..(i + 1) * n]) {
            *o += vi * mij;
        }
    }
    out
}

fn mat_vec(m: &Table, v: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| m[i * n..(i + 1) * n].iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

impl ToyChainSpec {
    pub fn states(&self) -> usize {
        self.alphabet.pow(self.length as u32)
    }

    pub fn steps(&self) -> usize {
        self.forward.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = state_count(self.alphabet, self.length)?;
        let steps = self.forward.len();
        if steps == 0 {
            return Err(LabError::Chain("at least one diffusion step required".into()));
        }
        check_budget(n, steps)?;
        if self.reverse.len() != steps {
            return Err(LabError::Chain(format!("{} reverse tables for {steps} steps", self.reverse.len())));
        }
        let check_dist = |v: &[f64], what: &str| -> Result<()> {
            if v.len() != n {
                return Err(LabError::Shape { expected: n, got: v.len() });
            }
            if v.iter().any(|x| !(*x >= 0.0)) {
                return Err(LabError::Chain(format!("{what} has negative entries")));
            }
            let s: f64 = v.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(LabError::Chain(format!("{what} sums to {s}")));
            }
            Ok(())
        };
        check_dist(&self.data, "data distribution")?;
        check_dist(&self.prior, "prior")?;
        for (t, table) in self.forward.iter().chain(&self.reverse).enumerate() {
            if table.len() != n * n {
                return Err(LabError::Shape { expected: n * n, got: table.len() });
            }
            for row in 0..n {
                check_dist(&table[row * n..(row + 1) * n], &format!("table {t} row {row}"))?;
            }
        }
        Ok(())
    }

    /// Chain whose forward step independently replaces each symbol by a
    /// uniform draw with probability `betas[t]`; prior and reverse tables are
    /// the exact forward marginal and posterior, so the ELBO is tight.
    pub fn uniform_corruption(alphabet: usize, length: usize, data: Vec<f64>, betas: &[f64]) -> Result<Self> {
        let n = state_count(alphabet, length)?;
        check_budget(n, betas.len())?;
        if data.len() != n {
            return Err(LabError::Shape { expected: n, got: data.len() });
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(LabError::Chain(format!("corruption probability {b} outside [0, 1]")));
        }
        let decoded: Vec<Vec<usize>> = (0..n).map(|s| symbols(s, alphabet, length)).collect();
        let forward: Vec<Table> = betas
            .iter()
            .map(|&beta| {
                let stay = 1.0 - beta + beta / alphabet as f64;
                let change = beta / alphabet as f64;
                let mut table = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        table[i * n + j] = decoded[i]
                            .iter()
                            .zip(&decoded[j])
                            .map(|(a, b)| if a == b { stay } else { change })
                            .product();
                    }
                }
                table
            })
            .collect();
        let mut marginals = vec![data.clone()];
        for table in &forward {
            let next = vec_mat(marginals.last().unwrap(), table, n);
            marginals.push(next);
        }
        let reverse = forward
            .iter()
            .enumerate()
            .map(|(t, table)| {
                let (prev, cur) = (&marginals[t], &marginals[t + 1]);
                let mut rev = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        rev[i * n + j] = if cur[i] > 0.0 { prev[j] * table[j * n + i] / cur[i] } else { 0.0 };
                    }
                    if cur[i] == 0.0 {
                        // unreachable state: any normalized row will do
                        rev[i * n..(i + 1) * n].iter_mut().for_each(|v| *v = 1.0 / n as f64);
                    }
                }
                rev
            })
            .collect();
        let prior = marginals.pop().unwrap();
        Ok(Self { alphabet, length, data, forward, prior, reverse })
    }

    /// Replaces each reverse table with the product of its per-symbol
    /// marginals, the best factorized approximation of the joint reverse.
    pub fn with_factorized_reverse(mut self) -> Self {
        let n = self.states();
        let decoded: Vec<Vec<usize>> = (0..n).map(|s| symbols(s, self.alphabet, self.length)).collect();
        for table in self.reverse.iter_mut() {
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                let row = &table[i * n..(i + 1) * n];
                let mut marg = vec![vec![0.0; self.alphabet]; self.length];
                for (j, &p) in row.iter().enumerate() {
                    for (pos, &sym) in decoded[j].iter().enumerate() {
                        marg[pos][sym] += p;
                    }
                }
                for j in 0..n {
                    out[i * n + j] = decoded[j].iter().enumerate().map(|(pos, &sym)| marg[pos][sym]).product();
                }
                let s: f64 = out[i * n..(i + 1) * n].iter().sum();
                out[i * n..(i + 1) * n].iter_mut().for_each(|v| *v /= s);
            }
            *table = out;
        }
        self
    }
}

/// Exact log-likelihood, ELBO, and its per-step KL decomposition by
/// exhaustive summation over the state space at every step.
pub fn elbo_gap_toy(spec: &ToyChainSpec) -> Result<ElboGapReport> {
    spec.validate()?;
    let n = spec.states();
    let steps = spec.steps();

    // generative marginals p(z_t), t = T..0
    let mut gen = vec![spec.prior.clone()];
    for table in spec.reverse.iter().rev() {
        let next = vec_mat(gen.last().unwrap(), table, n);
        gen.push(next);
    }
    let p_x = gen.last().unwrap().clone();

    let mut report = ElboGapReport {
        exact_log_likelihood: 0.0,
        elbo: 0.0,
        gap: 0.0,
        per_step_kl: vec![0.0; steps + 1],
    };
    for (x, &weight) in spec.data.iter().enumerate() {
        if weight == 0.0 {
            continue;
        }
        // q(z_t | x), t = 0..T
        let mut fwd = vec![{
            let mut v = vec![0.0; n];
            v[x] = 1.0;
            v
        }];
        for table in &spec.forward {
            let next = vec_mat(fwd.last().unwrap(), table, n);
            fwd.push(next);
        }
        // p(z_0 = x | z_t), t = 0..T
        let mut back = vec![{
            let mut v = vec![0.0; n];
            v[x] = 1.0;
            v
        }];
        for table in &spec.reverse {
            let next = mat_vec(table, back.last().unwrap(), n);
            back.push(next);
        }

        let log_px = p_x[x].ln();
        let mut elbo: f64 = fwd[steps]
            .iter()
            .zip(&spec.prior)
            .filter(|(q, _)| **q > 0.0)
            .map(|(q, p)| q * p.ln())
            .sum();
        for t in 1..=steps {
            let (qf, rv) = (&spec.forward[t - 1], &spec.reverse[t - 1]);
            let prev = &fwd[t - 1];
            for j in 0..n {
                if prev[j] == 0.0 {
                    continue;
                }
                for i in 0..n {
                    let q = qf[j * n + i];
                    if q == 0.0 {
                        continue;
                    }
                    elbo += prev[j] * q * (rv[i * n + j].ln() - q.ln());
                }
            }
        }

        let mut kls = vec![0.0; steps + 1];
        for t in 1..=steps {
            let (qf, rv) = (&spec.forward[t - 1], &spec.reverse[t - 1]);
            let (prev, cur) = (&fwd[t - 1], &fwd[t]);
            let (bprev, bcur) = (&back[t - 1], &back[t]);
            let mut acc = 0.0;
            for i in 0..n {
                if cur[i] == 0.0 {
                    continue;
                }
                let q_post: Vec<f64> = (0..n).map(|j| prev[j] * qf[j * n + i] / cur[i]).collect();
                let p_post: Vec<f64> = (0..n).map(|j| rv[i * n + j] * bprev[j] / bcur[i]).collect();
                acc += cur[i] * kl(&q_post, &p_post);
            }
            kls[t - 1] = acc;
        }
        let p_terminal: Vec<f64> = spec.prior.iter().zip(&back[steps]).map(|(p, b)| p * b / p_x[x]).collect();
        kls[steps] = kl(&fwd[steps], &p_terminal);

        report.exact_log_likelihood += weight * log_px;
        report.elbo += weight * elbo;
        for (acc, k) in report.per_step_kl.iter_mut().zip(&kls) {
            *acc += weight * k;
        }
    }
    report.gap = report.exact_log_likelihood - report.elbo;
    Ok(report)
}

/// Nearest-neighbour-coupled binary data: `p(x) ∝ exp(coupling * #{j : x_j = x_{j+1}})`.
pub fn coupled_binary_data(length: usize, coupling: f64) -> Vec<f64> {
    let n = 1usize << length;
    let raw: Vec<f64> = (0..n)
        .map(|s| {
            let sym = symbols(s, 2, length);
            let agree = sym.windows(2).filter(|w| w[0] == w[1]).count();
            (coupling * agree as f64).exp()
        })
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

/// The acceptance chain: binary sequences of length 4 with coupled data,
/// per-step corruption `total_rate / T`, factorized reverse model.
pub fn mismatched_binary_chain(steps: usize, total_rate: f64) -> Result<ToyChainSpec> {
    let data = coupled_binary_data(4, 1.5);
    let betas = vec![total_rate / steps as f64; steps];
    Ok(ToyChainSpec::uniform_corruption(2, 4, data, &betas)?.with_factorized_reverse())
}

/// Moments of probability-flow samples pushed from `t = 1` back to `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransportReport {
    pub trajectories: usize,
    pub mean: f64,
    pub variance: f64,
    pub target_mean: f64,
    pub target_variance: f64,
}

/// Draws `trajectories` terminal states from the exact `t = 1` marginal of a
/// 1-D Gaussian under `process`, integrates the half-factor flow to `t = 0`
/// with RK4 and reports the sample moments.
pub fn transport_check(
    mean: f64,
    variance: f64,
    process: &DiffusionProcess,
    trajectories: usize,
    n_steps: usize,
    seed: u64,
) -> Result<TransportReport> {
    if trajectories < 2 {
        return Err(LabError::Size(format!("{trajectories} trajectories")));
    }
    let density = AnalyticDensity::gaussian(vec![mean], variance)?;
    let (a, b) = process.marginal_coeffs(1.0);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for i in 0..trajectories {
        let z1 = density.sample_with(a, b, &mut trajectory_rng(seed, i as u64));
        let z0 = integrate_prob_flow(&z1, &density, process, Solver::Rk4, n_steps, true)?.terminal()[0];
        sum += z0;
        sum_sq += z0 * z0;
    }
    let n = trajectories as f64;
    let m = sum / n;
    Ok(TransportReport {
        trajectories,
        mean: m,
        variance: (sum_sq - n * m * m) / (n - 1.0),
        target_mean: mean,
        target_variance: variance,
    })
}

// ---------------------------------------------------------------------------
// Test matrix

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixCell {
    pub density: String,
    pub schedule: String,
    pub report: EquivalenceReport,
}

/// Densities and schedules exercised by the equivalence matrix.
pub fn equivalence_matrix_inputs() -> Vec<(String, AnalyticDensity, String, NoiseSchedule)> {
    let densities = [
        ("gaussian", AnalyticDensity::gaussian(vec![0.0], 1.0).expect("valid")),
        ("mixture-2", AnalyticDensity::symmetric_pair(1, 1.0, 0.25).expect("valid")),
    ];
    let schedules = [
        ("constant-sigma", NoiseSchedule::constant_sigma(1.0, 20)),
        ("sigma2-2tau", NoiseSchedule::linear_beta(0.0, 2.0, 20)),
        ("cosine-vp-clamped", NoiseSchedule::cosine(20)),
    ];
    let mut out = Vec::new();
    for (dn, d) in &densities {
        for (sn, s) in &schedules {
            out.push((dn.to_string(), d.clone(), sn.to_string(), *s));
        }
    }
    out
}

pub fn run_equivalence_matrix(z_start: f64, n_steps: usize) -> Result<Vec<MatrixCell>> {
    equivalence_matrix_inputs()
        .into_iter()
        .map(|(dn, d, sn, s)| {
            let report = verify_reparam_equivalence(&d, &s, &[z_start], n_steps)?;
            Ok(MatrixCell { density: dn, schedule: sn, report })
        })
        .collect()
}
