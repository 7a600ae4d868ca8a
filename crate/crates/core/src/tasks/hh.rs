//! Hodgkin-Huxley neuron with Na, delayed-rectifier K and slow M currents.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Biophysical constants. Units: mV, ms, mS/cm², µF/cm², µA/cm².
#[derive(Clone, Debug, PartialEq)]
pub struct HhParams {
    pub g_na: f64,
    pub g_k: f64,
    pub g_m: f64,
    pub g_l: f64,
    pub e_na: f64,
    pub e_k: f64,
    pub e_l: f64,
    pub c_m: f64,
    pub v_t: f64,
    pub tau_max: f64,
    pub v0: f64,
    /// Injected current amplitude, applied on `[t_on, t_off)`.
    pub i_inj: f64,
    pub t_on: f64,
    pub t_off: f64,
    /// Intrinsic noise amplitude; zero gives a deterministic trace.
    pub noise: f64,
}

/// 0.5 nA through a soma of radius 70 µm.
pub const DEFAULT_I_INJ: f64 = 5e-4 / (std::f64::consts::PI * 70e-4 * 70e-4);

impl HhParams {
    pub fn new(g_na: f64, g_k: f64) -> Self {
        HhParams {
            g_na,
            g_k,
            g_m: 0.07,
            g_l: 0.1,
            e_na: 53.0,
            e_k: -107.0,
            e_l: -70.0,
            c_m: 1.0,
            v_t: -60.0,
            tau_max: 600.0,
            v0: -70.0,
            i_inj: DEFAULT_I_INJ,
            t_on: 10.0,
            t_off: 110.0,
            noise: 0.0,
        }
    }

    fn current(&self, t: f64) -> f64 {
        if t >= self.t_on && t < self.t_off {
            self.i_inj
        } else {
            0.0
        }
    }
}

fn efun(z: f64) -> f64 {
    if z.abs() < 1e-4 {
        1.0 - z / 2.0
    } else {
        z / z.exp_m1()
    }
}

struct Rates {
    a_m: f64,
    b_m: f64,
    a_h: f64,
    b_h: f64,
    a_n: f64,
    b_n: f64,
    p_inf: f64,
    tau_p: f64,
}

fn rates(p: &HhParams, v: f64) -> Rates {
    let u = v - p.v_t;
    let w = v + 35.0;
    Rates {
        a_m: 0.32 * efun(-0.25 * (u - 13.0)) / 0.25,
        b_m: 0.28 * efun(0.2 * (u - 40.0)) / 0.2,
        a_h: 0.128 * (-(u - 17.0) / 18.0).exp(),
        b_h: 4.0 / (1.0 + (-0.2 * (u - 40.0)).exp()),
        a_n: 0.032 * efun(-0.2 * (u - 15.0)) / 0.2,
        b_n: 0.5 * (-(u - 10.0) / 40.0).exp(),
        p_inf: 1.0 / (1.0 + (-0.1 * w).exp()),
        tau_p: p.tau_max / (3.3 * (0.05 * w).exp() + (-0.05 * w).exp()),
    }
}

/// State `[V, m, h, n, p]`.
type State = [f64; 5];

fn initial_state(p: &HhParams) -> State {
    let r = rates(p, p.v0);
    [
        p.v0,
        r.a_m / (r.a_m + r.b_m),
        r.a_h / (r.a_h + r.b_h),
        r.a_n / (r.a_n + r.b_n),
        r.p_inf,
    ]
}

fn deriv(p: &HhParams, t: f64, s: &State) -> State {
    let [v, m, h, n, q] = *s;
    let r = rates(p, v);
    let i_ion = p.g_l * (p.e_l - v)
        + p.g_na * m * m * m * h * (p.e_na - v)
        + p.g_k * n * n * n * n * (p.e_k - v)
        + p.g_m * q * (p.e_k - v);
    [
        (i_ion + p.current(t)) / p.c_m,
        r.a_m * (1.0 - m) - r.b_m * m,
        r.a_h * (1.0 - h) - r.b_h * h,
        r.a_n * (1.0 - n) - r.b_n * n,
        (r.p_inf - q) / r.tau_p,
    ]
}

fn axpy(s: &State, k: &State, c: f64) -> State {
    std::array::from_fn(|i| s[i] + c * k[i])
}

fn rk4(p: &HhParams, t: f64, s: &State, dt: f64) -> State {
    let k1 = deriv(p, t, s);
    let k2 = deriv(p, t + dt / 2.0, &axpy(s, &k1, dt / 2.0));
    let k3 = deriv(p, t + dt / 2.0, &axpy(s, &k2, dt / 2.0));
    let k4 = deriv(p, t + dt, &axpy(s, &k3, dt));
    std::array::from_fn(|i| s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

/// Integrates the membrane potential and returns `V` at every point of the
/// increasing grid `t_grid` (ms). Each grid interval is split into RK4 steps
/// of at most `max_dt`. A nonzero `noise` adds an Euler-Maruyama kick to `V`
/// after each step, drawn from `rng`.
pub fn hh_solve(p: &HhParams, t_grid: &[f64], max_dt: f64, rng: Option<&mut dyn rand::RngCore>) -> Result<Vec<f64>> {
    if t_grid.is_empty() || max_dt <= 0.0 {
        return Err(Error::invalid("hh_solve", "empty grid or non-positive step"));
    }
    let mut rng = rng;
    if p.noise != 0.0 && rng.is_none() {
        return Err(Error::invalid("hh_solve", "noise requires an rng"));
    }
    let mut s = initial_state(p);
    let mut t = t_grid[0];
    let mut out = Vec::with_capacity(t_grid.len());
    out.push(s[0]);
    for &target in &t_grid[1..] {
        let span = target - t;
        if span < 0.0 {
            return Err(Error::invalid("hh_solve", "time grid must be increasing"));
        }
        let steps = (span / max_dt).ceil().max(1.0) as usize;
        let dt = span / steps as f64;
        for _ in 0..steps {
            s = rk4(p, t, &s, dt);
            if p.noise != 0.0 {
                if let Some(r) = rng.as_deref_mut() {
                    let eta: f64 = StandardNormal.sample(r);
                    s[0] += p.noise * dt.sqrt() * eta / p.c_m;
                }
            }
            t += dt;
        }
        t = target;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "hodgkin-huxley state at t={t} for g_na={}, g_k={}",
                p.g_na, p.g_k
            )));
        }
        out.push(s[0]);
    }
    Ok(out)
}

pub const HH_T_END: f64 = 120.0;
pub const HH_STEPS: usize = 1000;
pub const HH_MAX_DT: f64 = 0.01;
pub const HH_G_MAX: f64 = 40.0;
pub const HH_GRID_SIDE: usize = 80;

/// `HH_STEPS` evenly spaced times covering `[0, HH_T_END]`.
pub fn hh_time_grid() -> Vec<f64> {
    linspace(0.0, HH_T_END, HH_STEPS)
}

/// The 80 × 80 grid of `(g_na, g_k)` over `[0, 40]²`, row-major in `g_na`.
pub fn hh_param_grid() -> Vec<(f64, f64)> {
    let axis = linspace(0.0, HH_G_MAX, HH_GRID_SIDE);
    axis.iter().flat_map(|&a| axis.iter().map(move |&b| (a, b))).collect()
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// Linear interpolation of `values` on an evenly spaced grid over `[0, t_end]`.
pub(crate) fn interp(values: &[f64], t_end: f64, t: f64) -> f64 {
    let n = values.len();
    let pos = (t / t_end).clamp(0.0, 1.0) * (n - 1) as f64;
    let i = (pos.floor() as usize).min(n - 2);
    let f = pos - i as f64;
    values[i] * (1.0 - f) + values[i + 1] * f
}

/// Random draw helper used by the task sampler.
pub(crate) fn random_grid_point(rng: &mut impl Rng) -> (f64, f64) {
    let step = HH_G_MAX / (HH_GRID_SIDE - 1) as f64;
    (
        rng.gen_range(0..HH_GRID_SIDE) as f64 * step,
        rng.gen_range(0..HH_GRID_SIDE) as f64 * step,
    )
}
