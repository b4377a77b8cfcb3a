use serde::{Deserialize, Serialize};

use super::SimError;

/// Seconds in one day.
pub const T_DAY: f64 = 86_400.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Home,
    Mobile,
}

impl Group {
    pub const ALL: [Group; 2] = [Group::Home, Group::Mobile];

    pub fn index(self) -> usize {
        match self {
            Group::Home => 0,
            Group::Mobile => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Home => "home",
            Group::Mobile => "mobile",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "home" | "1" => Some(Group::Home),
            "mobile" | "2" => Some(Group::Mobile),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Compartment {
    S,
    E,
    I,
    R,
}

impl Compartment {
    pub const ALL: [Compartment; 4] = [Compartment::S, Compartment::E, Compartment::I, Compartment::R];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Compartment::S => "S",
            Compartment::E => "E",
            Compartment::I => "I",
            Compartment::R => "R",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "S" | "s" => Some(Compartment::S),
            "E" | "e" => Some(Compartment::E),
            "I" | "i" => Some(Compartment::I),
            "R" | "r" => Some(Compartment::R),
            _ => None,
        }
    }
}

/// Epidemiological rates (all in 1/s) shared by both people groups, plus the
/// per-group basic reproduction numbers from which transmission rates derive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpiParams {
    /// Birth rate.
    pub eta: f64,
    /// Death rate.
    pub nu: f64,
    /// Exposed to infectious.
    pub sigma: f64,
    /// Recovery.
    pub gamma: f64,
    /// Loss of immunity.
    pub xi: f64,
    pub r0_home: f64,
    pub r0_mobile: f64,
}

impl EpiParams {
    /// COVID-19-like rates of the idealised town, with the given reproduction
    /// numbers.
    pub fn covid(r0_home: f64, r0_mobile: f64) -> Self {
        Self {
            eta: 1.0 / (60.0 * 365.0 * T_DAY),
            nu: 1.0 / (60.0 * 365.0 * T_DAY),
            sigma: 1.0 / (4.5 * T_DAY),
            gamma: 1.0 / (7.0 * T_DAY),
            xi: 1.0 / (365.0 * T_DAY),
            r0_home,
            r0_mobile,
        }
    }

    pub fn r0(&self, g: Group) -> f64 {
        match g {
            Group::Home => self.r0_home,
            Group::Mobile => self.r0_mobile,
        }
    }

    pub fn with_r0(mut self, r0: [f64; 2]) -> Self {
        self.r0_home = r0[0];
        self.r0_mobile = r0[1];
        self
    }

    /// Within-group transmission rate `β_hh`. Cross-group transmission is zero.
    pub fn beta(&self, g: Group) -> Result<f64, SimError> {
        r0_to_beta(self.r0(g), self)
    }

    pub fn betas(&self) -> Result<[f64; 2], SimError> {
        Ok([self.beta(Group::Home)?, self.beta(Group::Mobile)?])
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let rates = [
            ("eta", self.eta),
            ("nu", self.nu),
            ("sigma", self.sigma),
            ("gamma", self.gamma),
            ("xi", self.xi),
            ("r0_home", self.r0_home),
            ("r0_mobile", self.r0_mobile),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SimError::InvalidParam(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Transmission rate reproducing `r0` given the progression rates:
/// `β = R₀ (γ + ν)(σ + ν) / σ`.
pub fn r0_to_beta(r0: f64, p: &EpiParams) -> Result<f64, SimError> {
    if p.sigma == 0.0 {
        return Err(SimError::InvalidParam(
            "sigma must be positive to convert R0 to a transmission rate".into(),
        ));
    }
    Ok(r0 * (p.gamma + p.nu) * (p.sigma + p.nu) / p.sigma)
}
