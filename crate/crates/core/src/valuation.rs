//! Time-depreciated task value and its expectation under a provider's
//! punctuality.
//!
//! Completion times are measured relative to the requester's deadline. A
//! task finished by the deadline keeps its full value however early it is
//! finished; a late task keeps `curve.factor(delay)` of it.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::model::{CurveKind, DepreciationCurve, Provider, Requester};
use crate::quadrature::adaptive_simpson;

/// Absolute tolerance of the numeric expectation path.
pub const QUADRATURE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ValuationError {
    #[error("Monte Carlo estimate needs at least one sample")]
    NoSamples,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CompletionTime {
    OnTime,
    /// Time units past the deadline, `> 0`.
    Late(f64),
}

impl CompletionTime {
    /// Classifies an absolute finishing time against a deadline.
    pub fn relative_to(finish: f64, deadline: f64) -> Self {
        if finish <= deadline {
            CompletionTime::OnTime
        } else {
            CompletionTime::Late(finish - deadline)
        }
    }

    pub fn delay(&self) -> f64 {
        match *self {
            CompletionTime::OnTime => 0.0,
            CompletionTime::Late(d) => d,
        }
    }

    pub fn is_on_time(&self) -> bool {
        matches!(self, CompletionTime::OnTime)
    }
}

/// `v_j * f(delay)`.
pub fn depreciated_value(requester: &Requester, completion: CompletionTime) -> f64 {
    requester.value * requester.depreciation.factor(completion.delay())
}

/// Draws a completion time from the provider's punctuality mixture.
pub fn sample_completion<R: Rng + ?Sized>(provider: &Provider, rng: &mut R) -> CompletionTime {
    let p = provider.punctuality;
    // Always consume the same number of draws so streams stay aligned across
    // providers with degenerate parameters.
    let u: f64 = rng.gen();
    let delay = Exp::new(p.late_rate)
        .expect("late_rate > 0 by construction")
        .sample(rng);
    if u < p.on_time_prob {
        CompletionTime::OnTime
    } else if delay > 0.0 {
        CompletionTime::Late(delay)
    } else {
        CompletionTime::OnTime
    }
}

/// Expected surviving value fraction `E[f(delay)]` for a late task whose
/// delay is exponential with rate `late_rate`.
///
/// Closed form for step and exponential curves; the linear curve goes
/// through [`expected_late_factor_numeric`].
pub fn expected_late_factor(curve: &DepreciationCurve, late_rate: f64) -> f64 {
    match curve.kind {
        CurveKind::Step => 0.0,
        CurveKind::Exponential => late_rate / (late_rate + curve.rate),
        CurveKind::Linear => expected_late_factor_numeric(curve, late_rate),
    }
}

/// `E[f(delay)]` by integrating `f(x) * mu * exp(-mu x)` numerically.
///
/// Works for every curve kind. The integration range stops where the curve
/// reaches zero (linear) or where the remaining exponential tail mass drops
/// below the tolerance.
pub fn expected_late_factor_numeric(curve: &DepreciationCurve, late_rate: f64) -> f64 {
    let mu = late_rate;
    let tail_cut = -(QUADRATURE_TOL * 1e-3).ln() / mu;
    let upper = match curve.kind {
        CurveKind::Step => return 0.0,
        CurveKind::Linear if curve.rate > 0.0 => (1.0 / curve.rate).min(tail_cut),
        _ => tail_cut,
    };
    let density = |x: f64| mu * (-mu * x).exp();
    // Split at the first unit of mean lateness, where most of the mass sits.
    let knee = (1.0 / mu).min(upper);
    let integrand = |x: f64| curve.factor(x.max(f64::MIN_POSITIVE)) * density(x);
    adaptive_simpson(integrand, 0.0, knee, 0.5 * QUADRATURE_TOL)
        + adaptive_simpson(integrand, knee, upper, 0.5 * QUADRATURE_TOL)
}

/// `E_i(v_j(t)) = p v + (1 - p) v E[f(delay)]`.
pub fn expected_value(requester: &Requester, provider: &Provider) -> f64 {
    let p = provider.punctuality.on_time_prob;
    let late = expected_late_factor(&requester.depreciation, provider.punctuality.late_rate);
    requester.value * (p + (1.0 - p) * late)
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

impl Estimate {
    /// Whether `x` lies within `k` standard errors of the mean. A zero
    /// standard error requires exact agreement up to rounding.
    pub fn agrees_with(&self, x: f64, k: f64) -> bool {
        let slack = (k * self.std_err).max(1e-12 * self.mean.abs().max(1.0));
        (self.mean - x).abs() <= slack
    }
}

/// Monte Carlo estimate of [`expected_value`] from simulated completions.
pub fn expected_value_monte_carlo<R: Rng + ?Sized>(
    requester: &Requester,
    provider: &Provider,
    samples: usize,
    rng: &mut R,
) -> Result<Estimate, ValuationError> {
    if samples == 0 {
        return Err(ValuationError::NoSamples);
    }
    // Welford's update keeps the variance stable for large sample counts.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for k in 1..=samples {
        let x = depreciated_value(requester, sample_completion(provider, rng));
        let d = x - mean;
        mean += d / k as f64;
        m2 += d * (x - mean);
    }
    let var = if samples > 1 {
        m2 / (samples - 1) as f64
    } else {
        0.0
    };
    Ok(Estimate {
        mean,
        std_err: (var / samples as f64).sqrt(),
        samples,
    })
}
