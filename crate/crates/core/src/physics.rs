//! Retention-time physics of the MTJ storage element.
//!
//! Retention follows `t = C * exp(k * barrier)` with the thermal barrier
//! `E / (k_B * T)`. An attack of normalized strength `s` lowers the barrier
//! linearly until it vanishes at `critical_strength`; bit flips are then a
//! Poisson process with rate `1 / t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOLTZMANN: f64 = 1.380649e-23;

/// Exponent above which `exp` leaves the finite double range.
const MAX_EXP_ARG: f64 = 709.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MtjParams {
    /// Fitting constant `C`, seconds.
    pub fit_constant: f64,
    /// Fitting exponent `k`.
    pub fit_exponent: f64,
    /// Energy barrier `E`, joules.
    pub energy_barrier: f64,
    /// Boltzmann constant, J/K.
    pub boltzmann: f64,
    /// Kelvin.
    pub nominal_temperature: f64,
    /// Attack strength at which the effective barrier reaches zero.
    pub critical_strength: f64,
}

impl Default for MtjParams {
    fn default() -> Self {
        MtjParams {
            fit_constant: 1e-9,
            fit_exponent: 1.0,
            energy_barrier: 60.0 * BOLTZMANN * 300.0,
            boltzmann: BOLTZMANN,
            nominal_temperature: 300.0,
            critical_strength: 2.0,
        }
    }
}

impl MtjParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mtj.c", self.fit_constant),
            ("mtj.e", self.energy_barrier),
            ("mtj.kb", self.boltzmann),
            ("mtj.t", self.nominal_temperature),
            ("mtj.critical_strength", self.critical_strength),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        // k = 0 is accepted: it degenerates retention to the constant C.
        if !(self.fit_exponent.is_finite() && self.fit_exponent >= 0.0) {
            return Err(Error::Config(format!(
                "mtj.k must be non-negative, got {}",
                self.fit_exponent
            )));
        }
        Ok(())
    }

    pub fn thermal_barrier(&self, temperature: f64) -> Result<f64> {
        if !(temperature > 0.0) {
            return Err(Error::Domain(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(self.energy_barrier / (self.boltzmann * temperature))
    }

    /// Barrier at the nominal temperature with no attack applied.
    pub fn nominal_barrier(&self) -> f64 {
        self.energy_barrier / (self.boltzmann * self.nominal_temperature)
    }

    /// Seconds. Saturates at `f64::MAX` instead of overflowing.
    pub fn retention_time(&self, barrier: f64) -> Result<f64> {
        if !(barrier >= 0.0) {
            return Err(Error::Domain(format!(
                "barrier must be non-negative, got {barrier}"
            )));
        }
        Ok(self.retention_unchecked(barrier))
    }

    pub(crate) fn retention_unchecked(&self, barrier: f64) -> f64 {
        let exponent = self.fit_exponent * barrier;
        if exponent > MAX_EXP_ARG {
            return f64::MAX;
        }
        let t = self.fit_constant * exponent.exp();
        if t.is_finite() {
            t
        } else {
            f64::MAX
        }
    }

    pub fn effective_barrier(&self, strength: f64) -> Result<f64> {
        if !(strength >= 0.0) {
            return Err(Error::Domain(format!(
                "attack strength must be non-negative, got {strength}"
            )));
        }
        Ok(self.effective_barrier_unchecked(strength))
    }

    pub(crate) fn effective_barrier_unchecked(&self, strength: f64) -> f64 {
        self.nominal_barrier() * (1.0 - strength / self.critical_strength).max(0.0)
    }

    /// Probability that a line flips at least once during `dt` seconds of
    /// exposure at constant `strength`.
    pub fn flip_probability(&self, strength: f64, dt: f64) -> Result<f64> {
        if !(dt >= 0.0) {
            return Err(Error::Domain(format!(
                "exposure time must be non-negative, got {dt}"
            )));
        }
        let barrier = self.effective_barrier(strength)?;
        let retention = self.retention_unchecked(barrier);
        Ok(-(-dt / retention).exp_m1())
    }

    /// Flip rate in 1/s at constant strength.
    pub(crate) fn hazard_rate(&self, strength: f64) -> f64 {
        1.0 / self.retention_unchecked(self.effective_barrier_unchecked(strength))
    }
}

/// Converts an accumulated hazard into a flip probability.
pub fn probability_from_hazard(hazard: f64) -> f64 {
    -(-hazard).exp_m1()
}
