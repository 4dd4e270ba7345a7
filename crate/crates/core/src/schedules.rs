//! Noise schedules and the diffusion-time reparameterization.
//!
//! A [`NoiseSchedule`] provides the marginal signal coefficient `alpha_bar(t)`
//! used by the forward perturbation, the per-step discrete transition
//! parameters, and the continuous-time rate `sigma^2(t)` of the matching SDE.
//! For the cosine kind the rate is derived in the variance-preserving sense,
//! `sigma^2(t) = -d/dt log alpha_bar(t)`, which diverges at `t = 1`; every
//! continuous-time evaluation clamps to [`COSINE_T_MAX`].

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest time at which the cosine rate is evaluated.
pub const COSINE_T_MAX: f64 = 1.0 - 1e-4;

/// Absolute tolerance for adaptive quadrature of `sigma^2`.
pub const QUADRATURE_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: expected length {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("degenerate schedule: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, ScheduleError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// `alpha_bar(t) = cos^2(pi t / 2)`.
    Cosine,
    /// `sigma^2(t) = beta_min + (beta_max - beta_min) t`.
    LinearBeta { beta_min: f64, beta_max: f64 },
    /// `sigma(t) = sigma`.
    ConstantSigma { sigma: f64 },
}

/// Which time indexes the training-time perturbation of a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseIndexing {
    /// Each token is noised at its own time.
    #[default]
    PerToken,
    /// One time per sequence, shared by all of its tokens.
    PerSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    #[serde(flatten)]
    pub kind: ScheduleKind,
    /// Number of refinement steps the schedule is discretized into.
    pub k_max: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::cosine(20)
    }
}

fn check_unit(t: f64, what: &str) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(ScheduleError::Domain(format!("{what} = {t} outside [0, 1]")))
    }
}

impl NoiseSchedule {
    pub fn cosine(k_max: usize) -> Self {
        Self { kind: ScheduleKind::Cosine, k_max }
    }

    pub fn linear_beta(beta_min: f64, beta_max: f64, k_max: usize) -> Self {
        Self { kind: ScheduleKind::LinearBeta { beta_min, beta_max }, k_max }
    }

    pub fn constant_sigma(sigma: f64, k_max: usize) -> Self {
        Self { kind: ScheduleKind::ConstantSigma { sigma }, k_max }
    }

    /// Checks the scalar parameters; does not reject zero-rate schedules
    /// (those are only degenerate for the reparameterization).
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(ScheduleError::Domain("k_max must be positive".into()));
        }
        match self.kind {
            ScheduleKind::Cosine => Ok(()),
            ScheduleKind::LinearBeta { beta_min, beta_max } => {
                if !(beta_min.is_finite() && beta_max.is_finite()) || beta_min < 0.0 || beta_max < 0.0 {
                    Err(ScheduleError::Domain(format!(
                        "linear-beta rates must be finite and non-negative, got ({beta_min}, {beta_max})"
                    )))
                } else {
                    Ok(())
                }
            }
            ScheduleKind::ConstantSigma { sigma } => {
                if !sigma.is_finite() || sigma < 0.0 {
                    Err(ScheduleError::Domain(format!("sigma must be finite and non-negative, got {sigma}")))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Marginal signal coefficient `alpha_bar(t)`.
    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        check_unit(t, "t")?;
        Ok(self.alpha_bar_unchecked(t))
    }

    pub(crate) fn alpha_bar_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            // half-angle form keeps both endpoints exact
            ScheduleKind::Cosine => 0.5 * (1.0 + (PI * t).cos()),
            _ => (-self.integrated_rate_unclamped(t)).exp(),
        }
    }

    fn integrated_rate_unclamped(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Cosine => -self.alpha_bar_unchecked(t).ln(),
            ScheduleKind::LinearBeta { beta_min, beta_max } => beta_min * t + 0.5 * (beta_max - beta_min) * t * t,
            ScheduleKind::ConstantSigma { sigma } => sigma * sigma * t,
        }
    }

    /// Continuous-time rate `sigma(t)^2` (clamped for the cosine kind).
    pub fn sigma_sq(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Cosine => {
                let t = t.clamp(0.0, COSINE_T_MAX);
                PI * (0.5 * PI * t).tan()
            }
            ScheduleKind::LinearBeta { beta_min, beta_max } => beta_min + (beta_max - beta_min) * t,
            ScheduleKind::ConstantSigma { sigma } => sigma * sigma,
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma_sq(t).max(0.0).sqrt()
    }

    /// `int_0^t sigma(tau)^2 dtau` in closed form, consistent with the clamp
    /// applied by [`Self::sigma_sq`].
    pub fn integrated_sigma_sq(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Cosine => {
                if t <= COSINE_T_MAX {
                    -(0.5 * (1.0 + (PI * t).cos())).ln()
                } else {
                    let head = -(0.5 * (1.0 + (PI * COSINE_T_MAX).cos())).ln();
                    head + self.sigma_sq(COSINE_T_MAX) * (t - COSINE_T_MAX)
                }
            }
            _ => self.integrated_rate_unclamped(t),
        }
    }

    /// Same integral as [`Self::integrated_sigma_sq`], by adaptive quadrature.
    pub fn integrated_sigma_sq_quadrature(&self, t: f64) -> f64 {
        let s = *self;
        let rate = |x: f64| s.sigma_sq(x);
        // split at the clamp so the kink sits on a panel edge
        let head = integrate(&rate, 0.0, t.min(COSINE_T_MAX), QUADRATURE_TOL);
        head + integrate(&rate, COSINE_T_MAX, t, QUADRATURE_TOL)
    }

    /// Forward perturbation `sqrt(a) z0 + sqrt(1 - a) eps` with `a = alpha_bar(t)`.
    pub fn perturb(&self, z0: &[f64], t: f64, eps: &[f64]) -> Result<Vec<f64>> {
        if z0.len() != eps.len() {
            return Err(ScheduleError::Shape { expected: z0.len(), got: eps.len() });
        }
        let a = self.alpha_bar(t)?;
        let (signal, noise) = (a.sqrt(), (1.0 - a).max(0.0).sqrt());
        Ok(z0.iter().zip(eps).map(|(z, e)| signal * z + noise * e).collect())
    }

    /// Per-step Gaussian transitions `N(sqrt(alpha_k) z, (1 - alpha_k) I)` for a
    /// uniform grid of `steps` steps, whose running product reproduces
    /// `alpha_bar(k / steps)`.
    pub fn discrete_forward_params(&self, steps: usize) -> Result<Vec<ForwardStep>> {
        if steps == 0 {
            return Err(ScheduleError::Domain("step count must be at least 1".into()));
        }
        let mut out = Vec::with_capacity(steps);
        let mut prev = self.alpha_bar_unchecked(0.0);
        for k in 1..=steps {
            let cur = self.alpha_bar_unchecked(k as f64 / steps as f64);
            let alpha = if prev > 0.0 { (cur / prev).clamp(0.0, 1.0) } else { 0.0 };
            out.push(ForwardStep { sqrt_alpha: alpha.sqrt(), variance: 1.0 - alpha });
            prev = cur;
        }
        Ok(out)
    }

    /// Normalized time map `s(t)` and its normalizer.
    pub fn reparam(&self) -> Result<TimeReparam> {
        TimeReparam::from_schedule(*self)
    }
}

/// One discrete forward transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardStep {
    pub sqrt_alpha: f64,
    pub variance: f64,
}

impl ForwardStep {
    pub fn alpha(&self) -> f64 {
        self.sqrt_alpha * self.sqrt_alpha
    }
}

#[derive(Clone)]
enum RateSource {
    Schedule(NoiseSchedule),
    Numeric(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

/// `s(t) = int_0^t sigma^2 / C` with `C = int_0^1 sigma^2`.
#[derive(Clone)]
pub struct TimeReparam {
    source: RateSource,
    normalizer: f64,
}

impl fmt::Debug for TimeReparam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let src = match &self.source {
            RateSource::Schedule(s) => format!("{:?}", s.kind),
            RateSource::Numeric(_) => "numeric".to_string(),
        };
        f.debug_struct("TimeReparam").field("source", &src).field("normalizer", &self.normalizer).finish()
    }
}

const DEGENERACY_GRID: usize = 1024;

impl TimeReparam {
    pub fn from_schedule(schedule: NoiseSchedule) -> Result<Self> {
        schedule.validate()?;
        let degenerate = match schedule.kind {
            ScheduleKind::Cosine => false,
            ScheduleKind::LinearBeta { beta_min, beta_max } => beta_min == 0.0 && beta_max == 0.0,
            ScheduleKind::ConstantSigma { sigma } => sigma == 0.0,
        };
        if degenerate {
            return Err(ScheduleError::Degenerate(format!("sigma vanishes identically for {:?}", schedule.kind)));
        }
        let normalizer = schedule.integrated_sigma_sq(1.0);
        Ok(Self { source: RateSource::Schedule(schedule), normalizer })
    }

    /// Reparameterization for an arbitrary rate function, integrated numerically.
    /// Rejects rates that vanish on a subinterval (two adjacent zero samples on
    /// a fine grid).
    pub fn from_sigma_sq<F>(sigma_sq: F) -> Result<Self>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let mut prev_zero = false;
        for i in 0..=DEGENERACY_GRID {
            let v = sigma_sq(i as f64 / DEGENERACY_GRID as f64);
            if !v.is_finite() || v < 0.0 {
                return Err(ScheduleError::Domain(format!("sigma^2 must be finite and non-negative, got {v}")));
            }
            let zero = v == 0.0;
            if zero && prev_zero {
                return Err(ScheduleError::Degenerate("sigma vanishes on a subinterval".into()));
            }
            prev_zero = zero;
        }
        let normalizer = integrate(&sigma_sq, 0.0, 1.0, QUADRATURE_TOL);
        if normalizer <= 0.0 {
            return Err(ScheduleError::Degenerate("zero total rate".into()));
        }
        Ok(Self { source: RateSource::Numeric(Arc::new(sigma_sq)), normalizer })
    }

    /// `C = int_0^1 sigma^2`.
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    fn cumulative(&self, t: f64) -> f64 {
        match &self.source {
            RateSource::Schedule(s) => s.integrated_sigma_sq(t),
            RateSource::Numeric(f) => integrate(f.as_ref(), 0.0, t, QUADRATURE_TOL),
        }
    }

    pub fn sigma_sq(&self, t: f64) -> f64 {
        match &self.source {
            RateSource::Schedule(s) => s.sigma_sq(t),
            RateSource::Numeric(f) => f(t),
        }
    }

    pub fn s(&self, t: f64) -> Result<f64> {
        check_unit(t, "t")?;
        Ok(self.s_unchecked(t))
    }

    pub(crate) fn s_unchecked(&self, t: f64) -> f64 {
        if let RateSource::Schedule(s) = &self.source {
            if let ScheduleKind::ConstantSigma { .. } = s.kind {
                return t;
            }
        }
        if t >= 1.0 {
            return 1.0;
        }
        self.cumulative(t) / self.normalizer
    }

    /// Diffusion time `t` with `s(t) = s`.
    pub fn inverse(&self, s: f64) -> Result<f64> {
        check_unit(s, "s")?;
        Ok(self.inverse_unchecked(s))
    }

    pub(crate) fn inverse_unchecked(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        if s >= 1.0 {
            return 1.0;
        }
        let target = s * self.normalizer;
        match &self.source {
            RateSource::Schedule(sched) => match sched.kind {
                ScheduleKind::ConstantSigma { .. } => s,
                ScheduleKind::LinearBeta { beta_min, beta_max } => {
                    let a = 0.5 * (beta_max - beta_min);
                    if a.abs() < 1e-300 {
                        target / beta_min
                    } else {
                        // stable root of a t^2 + beta_min t - target = 0
                        2.0 * target / (beta_min + (beta_min * beta_min + 4.0 * a * target).sqrt())
                    }
                }
                ScheduleKind::Cosine => {
                    let head = sched.integrated_sigma_sq(COSINE_T_MAX);
                    if target <= head {
                        // -2 ln cos(pi t / 2) = target
                        (2.0 / PI) * (-0.5 * target).exp().acos()
                    } else {
                        COSINE_T_MAX + (target - head) / sched.sigma_sq(COSINE_T_MAX)
                    }
                }
            },
            RateSource::Numeric(_) => {
                let (mut lo, mut hi) = (0.0f64, 1.0f64);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.s_unchecked(mid) < s {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo < 1e-15 {
                        break;
                    }
                }
                0.5 * (lo + hi)
            }
        }
    }
}

/// `(s(t), C)` for a schedule.
pub fn reparam_s(t: f64, schedule: &NoiseSchedule) -> Result<(f64, f64)> {
    let r = schedule.reparam()?;
    Ok((r.s(t)?, r.normalizer()))
}

// Five-point Gauss-Legendre nodes and weights on [-1, 1].
const GL_NODES: [f64; 5] = [
    0.0,
    -0.538_469_310_105_683_1,
    0.538_469_310_105_683_1,
    -0.906_179_845_938_664,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
    0.236_926_885_056_189_1,
];

fn gauss_legendre(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
    half * GL_NODES.iter().zip(GL_WEIGHTS.iter()).map(|(x, w)| w * f(mid + half * x)).sum::<f64>()
}

fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let left = gauss_legendre(f, a, m);
    let right = gauss_legendre(f, m, b);
    if depth == 0 || (left + right - whole).abs() <= tol {
        left + right
    } else {
        adaptive(f, a, m, left, 0.5 * tol, depth - 1) + adaptive(f, m, b, right, 0.5 * tol, depth - 1)
    }
}

/// Composite Gauss-Legendre quadrature with adaptive bisection.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let whole = gauss_legendre(f, a, b);
    adaptive(f, a, b, whole, tol, 40)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_are_exact() {
        let s = NoiseSchedule::cosine(20);
        assert_eq!(s.alpha_bar(0.0).unwrap(), 1.0);
        assert_eq!(s.alpha_bar(1.0).unwrap(), 0.0);
        assert_eq!(s.alpha_bar(0.5).unwrap(), 0.5);
    }

    #[test]
    fn cosine_quarter_matches_high_precision_value() {
        // cos^2(pi/8) = (2 + sqrt(2)) / 4, evaluated to 20 digits offline
        let expected = 0.853_553_390_593_273_762_2_f64;
        let got = NoiseSchedule::cosine(20).alpha_bar(0.25).unwrap();
        assert!((got - expected).abs() < 1e-15, "{got}");
        assert!((got - (2.0 + 2f64.sqrt()) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn alpha_bar_rejects_out_of_range() {
        let s = NoiseSchedule::cosine(20);
        assert!(matches!(s.alpha_bar(-0.1), Err(ScheduleError::Domain(_))));
        assert!(matches!(s.alpha_bar(1.0001), Err(ScheduleError::Domain(_))));
    }

    #[test]
    fn alpha_bar_monotone_on_grid() {
        for s in [
            NoiseSchedule::cosine(20),
            NoiseSchedule::linear_beta(0.1, 20.0, 20),
            NoiseSchedule::constant_sigma(1.0, 20),
        ] {
            let mut prev = f64::INFINITY;
            for i in 0..=1000 {
                let a = s.alpha_bar(i as f64 / 1000.0).unwrap();
                assert!(a <= prev, "{:?} not monotone at {i}", s.kind);
                prev = a;
            }
        }
    }

    #[test]
    fn perturb_endpoints() {
        let s = NoiseSchedule::cosine(20);
        let z0 = [0.3, -1.2, 2.5];
        let eps = [1.0, 0.5, -0.7];
        assert_eq!(s.perturb(&z0, 0.0, &eps).unwrap(), z0.to_vec());
        assert_eq!(s.perturb(&z0, 1.0, &eps).unwrap(), eps.to_vec());
        assert!(matches!(s.perturb(&z0, 0.5, &eps[..2]), Err(ScheduleError::Shape { .. })));
    }

    #[test]
    fn reparam_constant_is_identity() {
        let s = NoiseSchedule::constant_sigma(1.7, 20);
        let (v, c) = reparam_s(0.3, &s).unwrap();
        assert_eq!(v, 0.3);
        assert!((c - 1.7 * 1.7).abs() < 1e-15);
    }

    #[test]
    fn reparam_linear_ramp_closed_form_and_quadrature_agree() {
        // sigma^2 = 2 tau, so int_0^t = t^2 and C = 1
        let s = NoiseSchedule::linear_beta(0.0, 2.0, 20);
        let (v, c) = reparam_s(0.5, &s).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
        assert!((c - 1.0).abs() < 1e-15);
        let numeric = TimeReparam::from_sigma_sq(|t| 2.0 * t).unwrap();
        assert!((numeric.s(0.5).unwrap() - 0.25).abs() < 1e-10);
        assert!((numeric.normalizer() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn closed_form_integrals_match_quadrature() {
        for s in [
            NoiseSchedule::cosine(20),
            NoiseSchedule::linear_beta(0.1, 20.0, 20),
            NoiseSchedule::constant_sigma(0.8, 20),
        ] {
            for &t in &[0.0, 0.1, 0.37, 0.5, 0.9, 0.999, 1.0] {
                let a = s.integrated_sigma_sq(t);
                let b = s.integrated_sigma_sq_quadrature(t);
                assert!((a - b).abs() < 1e-8 * a.abs().max(1.0), "{:?} t={t}: {a} vs {b}", s.kind);
            }
        }
    }

    #[test]
    fn reparam_endpoints_and_inverse() {
        for s in [
            NoiseSchedule::cosine(20),
            NoiseSchedule::linear_beta(0.0, 2.0, 20),
            NoiseSchedule::linear_beta(0.1, 20.0, 20),
            NoiseSchedule::constant_sigma(1.0, 20),
        ] {
            let r = s.reparam().unwrap();
            assert!(r.s(0.0).unwrap().abs() < 1e-12);
            assert!((r.s(1.0).unwrap() - 1.0).abs() < 1e-12);
            for i in 1..100 {
                let t = i as f64 / 100.0;
                let back = r.inverse(r.s(t).unwrap()).unwrap();
                assert!((back - t).abs() < 1e-9, "{:?}: {t} -> {back}", s.kind);
            }
        }
    }

    #[test]
    fn degenerate_schedules_are_rejected() {
        assert!(matches!(
            reparam_s(0.5, &NoiseSchedule::constant_sigma(0.0, 20)),
            Err(ScheduleError::Degenerate(_))
        ));
        assert!(matches!(
            TimeReparam::from_sigma_sq(|t| if t < 0.5 { 0.0 } else { 1.0 }),
            Err(ScheduleError::Degenerate(_))
        ));
    }

    #[test]
    fn discrete_params_single_cosine_step() {
        let p = NoiseSchedule::cosine(20).discrete_forward_params(1).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].alpha(), 0.0);
        assert_eq!(p[0].variance, 1.0);
        assert!(NoiseSchedule::cosine(20).discrete_forward_params(0).is_err());
    }

    #[test]
    fn discrete_params_products_match_marginals() {
        let s = NoiseSchedule::cosine(20);
        let steps = s.discrete_forward_params(4).unwrap();
        let mut prod = 1.0;
        for (k, st) in steps.iter().enumerate() {
            prod *= st.alpha();
            let direct = s.alpha_bar((k + 1) as f64 / 4.0).unwrap();
            assert!((prod - direct).abs() < 1e-8, "k={k}: {prod} vs {direct}");
        }
        for st in &steps[..3] {
            assert!(st.variance > 0.0 && st.variance < 1.0);
        }
    }

    #[test]
    fn discrete_params_constant_sigma_are_equal() {
        let p = NoiseSchedule::constant_sigma(1.0, 20).discrete_forward_params(2).unwrap();
        assert!((p[0].variance - p[1].variance).abs() < 1e-15);
    }
}
