use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::T_DAY;
use crate::container::sha256_hex;

/// Time dependence of the people movement between the home and mobile groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InteractionSchedule {
    /// No exchange between groups.
    Off,
    /// People leave home during the first half of each day and return during
    /// the second half: home→mobile at `λ₀ max(0, sin 2πt/T)`, mobile→home at
    /// `λ₀ max(0, −sin 2πt/T)`. `lambda0` is per compartment (S, E, I, R).
    DayNight { lambda0: [f64; 4], day_length: f64 },
}

/// Diffusion and inter-group exchange coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportParams {
    /// Diffusivity (m²/s) per group (home, mobile) and compartment (S, E, I, R).
    /// Applied only in cells people can travel to; zero-flux elsewhere.
    pub diffusion: [[f64; 4]; 2],
    pub schedule: InteractionSchedule,
}

impl TransportParams {
    /// Home group static, mobile group diffusing at 1e4 m²/s, and a daily
    /// exchange cycle with `λ₀ = 4 / T_day`.
    pub fn town_default() -> Self {
        Self {
            diffusion: [[0.0; 4], [1e4; 4]],
            schedule: InteractionSchedule::DayNight {
                lambda0: [4.0 / T_DAY; 4],
                day_length: T_DAY,
            },
        }
    }

    /// No diffusion and no exchange: every cell evolves as an isolated SEIRS system.
    pub fn disabled() -> Self {
        Self {
            diffusion: [[0.0; 4]; 2],
            schedule: InteractionSchedule::Off,
        }
    }

    /// Exchange rates at time `t`: `(home→mobile, mobile→home)` per compartment.
    pub fn exchange_rates(&self, t: f64) -> ([f64; 4], [f64; 4]) {
        match &self.schedule {
            InteractionSchedule::Off => ([0.0; 4], [0.0; 4]),
            InteractionSchedule::DayNight {
                lambda0,
                day_length,
            } => {
                let s = (2.0 * PI * t / day_length).sin();
                let out = lambda0.map(|l| l * s.max(0.0));
                let back = lambda0.map(|l| l * (-s).max(0.0));
                (out, back)
            }
        }
    }

    pub fn digest(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("transport params serialize")
                .as_bytes(),
        )
    }
}

impl Default for TransportParams {
    fn default() -> Self {
        Self::town_default()
    }
}
