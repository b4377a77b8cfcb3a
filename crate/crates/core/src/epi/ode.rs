use super::params::EpiParams;
use super::SimError;

/// Right-hand side of the classic single-population SEIRS system for the
/// state `[S, E, I, R]` with transmission rate `beta`.
pub fn seirs_ode_rhs(state: [f64; 4], beta: f64, p: &EpiParams) -> Result<[f64; 4], SimError> {
    let [s, e, i, r] = state;
    let n = s + e + i + r;
    if n == 0.0 {
        return Err(SimError::InvalidParam(
            "SEIRS right-hand side undefined for an empty population".into(),
        ));
    }
    let infection = beta * s * i / n;
    Ok([
        p.eta * n - infection + p.xi * r - p.nu * s,
        infection - p.sigma * e - p.nu * e,
        p.sigma * e - p.gamma * i - p.nu * i,
        p.gamma * i - p.xi * r - p.nu * r,
    ])
}
