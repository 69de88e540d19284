//! Stochastic characteristics of the BGK transport.
//!
//! ```text
//! dX = u_eps(t, X) dt + b(V) ∘ dW
//! dV = -V div u_eps(t, X) dt
//! ```
//!
//! The noise is one Brownian path shared by every point in space. `b` depends
//! only on `V`, which carries no noise, so the Itô and Stratonovich readings
//! coincide. The velocity equation is integrated exactly, which preserves the
//! sign of `V` and the bound `|V_t| <= |v| exp(t ‖div u_eps‖_∞)`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fields::{MollifiedVelocity, NoiseFlux};

/// 32-bit ChaCha words consumed per Gaussian draw (two `u64`).
const WORDS_PER_DRAW: u128 = 4;

/// Standard normal draw addressed by `(seed, step, coordinate)`.
///
/// Each coordinate is its own ChaCha stream and each step a fixed word
/// offset, so any increment can be regenerated without replaying the path.
pub fn standard_normal_at(seed: u64, step: u64, coordinate: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(coordinate);
    rng.set_word_pos(step as u128 * WORDS_PER_DRAW);
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Seed of Monte Carlo path `path` derived from a base seed.
pub fn path_seed(base_seed: u64, path: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(path);
    rng.next_u64()
}

/// Number of steps `⌈T/dt⌉`, ignoring rounding noise in the ratio.
pub fn step_count(t_end: f64, dt: f64) -> usize {
    ((t_end / dt) * (1.0 - 1e-12)).ceil() as usize
}

/// Wiener increments `ΔW_k ~ N(0, dt I_d)` for one path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrownianDriver {
    pub seed: u64,
    pub dt: f64,
    pub t_end: f64,
    pub d: usize,
    /// Row-major `[step * d + coordinate]`.
    pub increments: Vec<f64>,
}

pub fn sample_brownian(seed: u64, t_end: f64, dt: f64, d: usize) -> Result<BrownianDriver> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid("dt", format!("must be positive, got {dt}")));
    }
    if !(t_end >= dt) {
        return Err(invalid("T", format!("need T >= dt, got T = {t_end}, dt = {dt}")));
    }
    if d == 0 {
        return Err(invalid("d", "dimension must be at least 1"));
    }
    let steps = step_count(t_end, dt);
    let scale = dt.sqrt();
    let mut increments = Vec::with_capacity(steps * d);
    for k in 0..steps {
        for c in 0..d {
            increments.push(scale * standard_normal_at(seed, k as u64, c as u64));
        }
    }
    Ok(BrownianDriver {
        seed,
        dt,
        t_end,
        d,
        increments,
    })
}

impl BrownianDriver {
    pub fn steps(&self) -> usize {
        self.increments.len() / self.d
    }

    pub fn increment(&self, step: usize) -> &[f64] {
        &self.increments[step * self.d..(step + 1) * self.d]
    }

    /// Path value `W(t_k)` of coordinate `c` after `k` steps.
    pub fn path_value(&self, k: usize, c: usize) -> f64 {
        (0..k).map(|s| self.increments[s * self.d + c]).sum()
    }

    /// A driver with every increment zero, for deterministic runs.
    pub fn silent(t_end: f64, dt: f64, d: usize) -> Self {
        let steps = step_count(t_end, dt);
        Self {
            seed: 0,
            dt,
            t_end,
            d,
            increments: vec![0.0; steps * d],
        }
    }
}

/// Image of `(x, v)` under one forward step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowStepResult {
    pub x: f64,
    pub v: f64,
    /// `|det ∂(X, V)/∂(x, v)|` of the one-step map.
    pub jacobian_factor: f64,
}

/// Euler-Maruyama in `x`, exact exponential in `v`.
pub fn forward_flow_step(
    x: f64,
    v: f64,
    t: f64,
    dt: f64,
    dw: f64,
    u_eps: &MollifiedVelocity,
    b: &NoiseFlux,
) -> FlowStepResult {
    let u = u_eps.velocity(t, x);
    let c = u_eps.divergence(t, x);
    let dc = u_eps.divergence_slope(t, x);
    let decay = (-c * dt).exp();
    let xn = x + u * dt + b.b(v) * dw;
    let vn = v * decay;
    // d/dx of X is 1 + c dt, d/dv of X is b'(v) dW,
    // d/dx of V is -v c' dt e^{-c dt}, d/dv of V is e^{-c dt}.
    let det = (1.0 + c * dt) * decay + b.db(v) * dw * v * dc * dt * decay;
    FlowStepResult {
        x: xn,
        v: vn,
        jacobian_factor: det.abs(),
    }
}

/// Guard `dt ‖∇u_eps‖_∞ < 1` under which the one-step map is a diffeomorphism.
pub fn check_invertible(dt: f64, u_eps: &MollifiedVelocity) -> Result<()> {
    let product = dt * u_eps.grad_sup;
    if product >= 1.0 {
        return Err(Error::StepTooLarge { product });
    }
    Ok(())
}

/// First-order backward step: `w = v e^{c dt}`, `y = x - u dt - b(w) dW`.
pub fn inverse_flow_step(
    x: f64,
    v: f64,
    t: f64,
    dt: f64,
    dw: f64,
    u_eps: &MollifiedVelocity,
    b: &NoiseFlux,
) -> Result<(f64, f64)> {
    check_invertible(dt, u_eps)?;
    let u = u_eps.velocity(t, x);
    let c = u_eps.divergence(t, x);
    let w = v * (c * dt).exp();
    Ok((x - u * dt - b.b(w) * dw, w))
}

/// Runs `(x, v)` forward through the first `steps` increments of a driver
/// (coordinate 0), returning the final point and the product of one-step
/// Jacobian factors.
pub fn flow_forward(
    x: f64,
    v: f64,
    driver: &BrownianDriver,
    steps: usize,
    u_eps: &MollifiedVelocity,
    b: &NoiseFlux,
) -> FlowStepResult {
    let dt = driver.dt;
    let mut state = FlowStepResult {
        x,
        v,
        jacobian_factor: 1.0,
    };
    for k in 0..steps.min(driver.steps()) {
        let step = forward_flow_step(
            state.x,
            state.v,
            k as f64 * dt,
            dt,
            driver.increment(k)[0],
            u_eps,
            b,
        );
        state = FlowStepResult {
            x: step.x,
            v: step.v,
            jacobian_factor: state.jacobian_factor * step.jacobian_factor,
        };
    }
    state
}

/// Square reference cell `[x - h, x + h] x [v - h, v + h]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceCell {
    pub x: f64,
    pub v: f64,
    pub half_width: f64,
}

/// Volume distortion of the flow over `[0, T]`: pushes the four corners of
/// each reference cell along each path and compares the area of the image
/// quadrilateral with the original. Returns `max |area ratio - 1|`.
pub fn jacobian_estimate(
    cells: &[ReferenceCell],
    paths: &[BrownianDriver],
    u_eps: &MollifiedVelocity,
    b: &NoiseFlux,
    t_end: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for driver in paths {
        let steps = step_count(t_end, driver.dt);
        for cell in cells {
            let h = cell.half_width;
            let corners = [(-h, -h), (h, -h), (h, h), (-h, h)]
                .map(|(dx, dv)| flow_forward(cell.x + dx, cell.v + dv, driver, steps, u_eps, b));
            let mut twice_area = 0.0;
            for k in 0..4 {
                let p = corners[k];
                let q = corners[(k + 1) % 4];
                twice_area += p.x * q.v - q.x * p.v;
            }
            let ratio = 0.5 * twice_area / (4.0 * h * h);
            worst = worst.max((ratio - 1.0).abs());
        }
    }
    worst
}
