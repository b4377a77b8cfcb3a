//! Adaptive Dormand–Prince 5(4) integrator for the single-population SEIRS
//! system, written from the textbook tableau. The system is autonomous so
//! the stage times are not needed.

const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

#[derive(Clone, Copy, Debug)]
pub struct Rates {
    pub beta: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub xi: f64,
    pub eta: f64,
    pub nu: f64,
}

pub fn rhs(r: &Rates, x: [f64; 4]) -> [f64; 4] {
    let [s, e, i, rr] = x;
    let n = s + e + i + rr;
    let inf = if n > 0.0 { r.beta * s * i / n } else { 0.0 };
    [
        r.eta * n - inf + r.xi * rr - r.nu * s,
        inf - (r.sigma + r.nu) * e,
        r.sigma * e - (r.gamma + r.nu) * i,
        r.gamma * i - (r.xi + r.nu) * rr,
    ]
}

/// Integrate from `x0` over `[0, t_end]`, returning the state at `t_end`.
pub fn integrate(r: &Rates, x0: [f64; 4], t_end: f64, rtol: f64, atol: f64) -> [f64; 4] {
    let mut x = x0;
    let mut t = 0.0;
    let mut h = (t_end / 100.0).max(1e-3);
    while t < t_end {
        if t + h > t_end {
            h = t_end - t;
        }
        let mut k = [[0.0; 4]; 7];
        for s in 0..7 {
            let mut xs = x;
            for j in 0..s {
                for v in 0..4 {
                    xs[v] += h * A[s][j] * k[j][v];
                }
            }
            k[s] = rhs(r, xs);
        }
        let mut x5 = x;
        let mut err: f64 = 0.0;
        for v in 0..4 {
            let mut d5 = 0.0;
            let mut d4 = 0.0;
            for s in 0..7 {
                d5 += B5[s] * k[s][v];
                d4 += B4[s] * k[s][v];
            }
            x5[v] += h * d5;
            let sc = atol + rtol * x[v].abs().max(x5[v].abs());
            err = err.max((h * (d5 - d4)).abs() / sc);
        }
        if err <= 1.0 {
            t += h;
            x = x5;
        }
        let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h *= fac;
    }
    x
}

/// States at `t = k · dt` for `k = 0..=n`.
pub fn trajectory(r: &Rates, x0: [f64; 4], dt: f64, n: usize) -> Vec<[f64; 4]> {
    let mut out = vec![x0];
    let mut x = x0;
    for _ in 0..n {
        x = integrate(r, x, dt, 1e-12, 1e-12);
        out.push(x);
    }
    out
}
