use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the noise rate `beta_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BetaKind {
    Constant { beta: f64 },
    Linear { beta_min: f64, beta_max: f64 },
}

/// Noise schedule of the VP-SDE `dx = -beta_t x dt + sigma sqrt(2 beta_t) dB` on `[0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: BetaKind,
    pub horizon: f64,
}

impl NoiseSchedule {
    pub fn new(kind: BetaKind, horizon: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Contract(format!(
                "schedule horizon must be positive, got {horizon}"
            )));
        }
        match kind {
            BetaKind::Constant { beta } => {
                if !(beta.is_finite() && beta > 0.0) {
                    return Err(Error::Contract(format!("beta must be positive, got {beta}")));
                }
            }
            BetaKind::Linear { beta_min, beta_max } => {
                if !(beta_min.is_finite() && beta_min > 0.0 && beta_max.is_finite()) {
                    return Err(Error::Contract(format!(
                        "beta_min must be positive, got {beta_min}"
                    )));
                }
                if beta_min > beta_max {
                    return Err(Error::Contract(format!(
                        "beta schedule must be non-decreasing: beta_min {beta_min} > beta_max {beta_max}"
                    )));
                }
            }
        }
        let s = Self { kind, horizon };
        let total = s.integral_unchecked(horizon);
        if total < 2.0 {
            log::warn!(
                "integrated noise rate over the horizon is {total:.3} < 2; p_T may be far from the reference Gaussian"
            );
        }
        Ok(s)
    }

    pub fn constant(beta: f64, horizon: f64) -> Result<Self> {
        Self::new(BetaKind::Constant { beta }, horizon)
    }

    pub fn linear(beta_min: f64, beta_max: f64, horizon: f64) -> Result<Self> {
        Self::new(BetaKind::Linear { beta_min, beta_max }, horizon)
    }

    /// Same rate shape, different horizon. Linear schedules keep their endpoints.
    pub fn with_horizon(&self, horizon: f64) -> Result<Self> {
        Self::new(self.kind, horizon)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let tol = 1e-12 * self.horizon.max(1.0);
        if t.is_finite() && t >= -tol && t <= self.horizon + tol {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "time {t} outside [0, {}]",
                self.horizon
            )))
        }
    }

    /// `beta_t`, extended analytically beyond the horizon.
    pub fn beta_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            BetaKind::Constant { beta } => beta,
            BetaKind::Linear { beta_min, beta_max } => {
                beta_min + (beta_max - beta_min) * t / self.horizon
            }
        }
    }

    pub fn beta(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.beta_unchecked(t.clamp(0.0, self.horizon)))
    }

    /// `int_0^t beta_s ds` in closed form; also the OU clock used by the semigroup.
    pub fn integral_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            BetaKind::Constant { beta } => beta * t,
            BetaKind::Linear { beta_min, beta_max } => {
                beta_min * t + 0.5 * (beta_max - beta_min) * t * t / self.horizon
            }
        }
    }

    pub fn integral(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.integral_unchecked(t.clamp(0.0, self.horizon)))
    }

    pub fn lambda_unchecked(&self, t: f64) -> f64 {
        -(-2.0 * self.integral_unchecked(t)).exp_m1()
    }

    /// `lambda_t = 1 - exp(-2 int_0^t beta_s ds)`.
    pub fn lambda_at(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.lambda_unchecked(t.clamp(0.0, self.horizon)))
    }
}
