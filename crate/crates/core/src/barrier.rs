//! Relaxed logarithmic barrier, its derivative, the geometric decay schedule for
//! the barrier strength, and the Lagrange multipliers implied by the barrier.
//!
//! For `z <= -s` the barrier is the classical `-mu * ln(-z)`. Past the relaxation
//! threshold it continues as the tangent line at `z = -s`, so it is finite,
//! convex and continuously differentiable on the whole real line:
//!
//! ```text
//! B(z) = -mu ln(-z)                      z <= -s
//!        (mu / s) z + mu - mu ln(s)      z >  -s
//! B'(z) = mu / max(-z, s)
//! ```
//!
//! With `s = mu^2` the barrier tends to the indicator of `z <= 0` as `mu -> 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strength `mu` and relaxation threshold `s` of the barrier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BarrierParams {
    mu: f64,
    s: f64,
}

impl BarrierParams {
    pub fn new(mu: f64, s: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::domain(format!("barrier mu must be positive, got {mu}")));
        }
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::domain(format!("barrier s must be positive, got {s}")));
        }
        Ok(Self { mu, s })
    }

    /// Parameters with the relaxation threshold tied to the strength, `s = mu^2`.
    pub fn coupled(mu: f64) -> Result<Self> {
        Self::new(mu, mu * mu)
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn s(&self) -> f64 {
        self.s
    }
}

/// Value of the relaxed barrier at `z`. The point `z = -s` belongs to the log branch.
pub fn barrier_value(z: f64, p: BarrierParams) -> f64 {
    let BarrierParams { mu, s } = p;
    if z <= -s {
        -mu * (-z).ln()
    } else {
        (mu / s) * z + mu - mu * s.ln()
    }
}

/// Derivative of [`barrier_value`]; strictly positive and non-decreasing in `z`.
pub fn barrier_grad(z: f64, p: BarrierParams) -> f64 {
    p.mu / (-z).max(p.s)
}

/// Geometric decay of the barrier strength from `mu_initial` down to `mu_floor`
/// over `total_steps` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct BarrierSchedule {
    mu_initial: f64,
    mu_floor: f64,
    gamma: f64,
    total_steps: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleSpec {
    #[serde(default = "default_mu_initial")]
    mu_initial: f64,
    #[serde(default = "default_mu_floor")]
    mu_floor: f64,
    total_steps: usize,
}

fn default_mu_initial() -> f64 {
    1.0
}

fn default_mu_floor() -> f64 {
    1e-6
}

impl TryFrom<ScheduleSpec> for BarrierSchedule {
    type Error = Error;

    fn try_from(spec: ScheduleSpec) -> Result<Self> {
        BarrierSchedule::new(spec.mu_initial, spec.mu_floor, spec.total_steps)
    }
}

impl From<BarrierSchedule> for ScheduleSpec {
    fn from(s: BarrierSchedule) -> Self {
        ScheduleSpec {
            mu_initial: s.mu_initial,
            mu_floor: s.mu_floor,
            total_steps: s.total_steps,
        }
    }
}

impl BarrierSchedule {
    /// `gamma` is chosen so that `mu_initial * gamma^total_steps == mu_floor`.
    pub fn new(mu_initial: f64, mu_floor: f64, total_steps: usize) -> Result<Self> {
        if !(mu_initial > 0.0 && mu_initial.is_finite()) {
            return Err(Error::domain(format!("mu_initial must be positive, got {mu_initial}")));
        }
        if !(mu_floor > 0.0 && mu_floor <= mu_initial) {
            return Err(Error::domain(format!(
                "mu_floor must lie in (0, mu_initial], got {mu_floor}"
            )));
        }
        if total_steps == 0 {
            return Err(Error::domain("schedule needs at least one step"));
        }
        let gamma = (mu_floor / mu_initial).powf(1.0 / total_steps as f64);
        Ok(Self {
            mu_initial,
            mu_floor,
            gamma,
            total_steps,
        })
    }

    /// Default range: decay from 1 to 1e-6.
    pub fn with_default_range(total_steps: usize) -> Result<Self> {
        Self::new(default_mu_initial(), default_mu_floor(), total_steps)
    }

    pub fn mu_initial(&self) -> f64 {
        self.mu_initial
    }

    pub fn mu_floor(&self) -> f64 {
        self.mu_floor
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// `max(mu_initial * gamma^t, mu_floor)` for `0 <= t <= total_steps`.
    pub fn mu_at_step(&self, t: usize) -> Result<f64> {
        if t > self.total_steps {
            return Err(Error::domain(format!(
                "step {t} outside schedule of {} steps",
                self.total_steps
            )));
        }
        if t == self.total_steps {
            return Ok(self.mu_floor);
        }
        Ok((self.mu_initial * self.gamma.powf(t as f64)).max(self.mu_floor))
    }

    /// Barrier parameters at step `t`, with `s = mu^2`.
    pub fn params_at_step(&self, t: usize) -> Result<BarrierParams> {
        BarrierParams::coupled(self.mu_at_step(t)?)
    }
}

/// Multiplier on the gradient of constraint `i` in the barrier objective,
/// `mu / (k * max(-c, mu^2))`. Equals `1 / (k mu)` for active or violated constraints.
pub fn implied_multiplier(c_estimate: f64, mu: f64, k: usize) -> f64 {
    debug_assert!(mu > 0.0 && k >= 1);
    mu / (k as f64 * (-c_estimate).max(mu * mu))
}
