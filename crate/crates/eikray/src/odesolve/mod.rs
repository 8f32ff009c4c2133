//! Fixed-step explicit ODE integration with three gradient paths: a
//! constant-memory adjoint that replays the state backwards, recorded-
//! trajectory reverse mode, and a finite-difference oracle.
//!
//! The generic solver works on small fixed-size states; the trace-specific
//! gradient drivers live in [`adjoint`].

pub mod adjoint;

pub use adjoint::{backprop_recorded, integrate_adjoint, Costate, GradBuffer, GradSinks};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("non-finite state at s = {s:.6} (step {step})")]
    NonFinite { s: f64, step: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Method {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub method: Method,
    pub steps: usize,
}

impl SolverConfig {
    pub fn rk4(steps: usize) -> Self {
        assert!(steps >= 1);
        SolverConfig {
            method: Method::Rk4,
            steps,
        }
    }
    pub fn euler(steps: usize) -> Self {
        assert!(steps >= 1);
        SolverConfig {
            method: Method::Euler,
            steps,
        }
    }
}

#[inline]
fn axpy<const N: usize>(y: &[f64; N], a: f64, x: &[f64; N]) -> [f64; N] {
    let mut out = *y;
    for i in 0..N {
        out[i] += a * x[i];
    }
    out
}

/// One explicit step of the configured method.
pub fn step<const N: usize>(
    rhs: &impl Fn(f64, &[f64; N]) -> [f64; N],
    s: f64,
    z: &[f64; N],
    h: f64,
    method: Method,
) -> [f64; N] {
    match method {
        Method::Euler => axpy(z, h, &rhs(s, z)),
        Method::Rk4 => {
            let k1 = rhs(s, z);
            let k2 = rhs(s + 0.5 * h, &axpy(z, 0.5 * h, &k1));
            let k3 = rhs(s + 0.5 * h, &axpy(z, 0.5 * h, &k2));
            let k4 = rhs(s + h, &axpy(z, h, &k3));
            let mut out = *z;
            for i in 0..N {
                out[i] += h / 6.0 * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]);
            }
            out
        }
    }
}

/// Integrates z' = rhs(s, z) from s0 to s1 with fixed steps.
pub fn integrate<const N: usize>(
    rhs: &impl Fn(f64, &[f64; N]) -> [f64; N],
    z0: [f64; N],
    s0: f64,
    s1: f64,
    cfg: &SolverConfig,
) -> Result<[f64; N], SolveError> {
    debug_assert!(s1 > s0);
    let h = (s1 - s0) / cfg.steps as f64;
    let mut z = z0;
    for k in 0..cfg.steps {
        let s = s0 + k as f64 * h;
        z = step(rhs, s, &z, h, cfg.method);
        if z.iter().any(|x| !x.is_finite()) {
            return Err(SolveError::NonFinite { s: s + h, step: k });
        }
    }
    Ok(z)
}

/// Trajectory of per-step input states plus the final state; states[k] is the
/// input of step k, states[steps] the result.
#[derive(Debug, Clone)]
pub struct Recorded<const N: usize> {
    pub s0: f64,
    pub h: f64,
    pub method: Method,
    pub states: Vec<[f64; N]>,
}

/// Integrates while recording every step (memory linear in step count).
pub fn integrate_recorded<const N: usize>(
    rhs: &impl Fn(f64, &[f64; N]) -> [f64; N],
    z0: [f64; N],
    s0: f64,
    s1: f64,
    cfg: &SolverConfig,
) -> Result<Recorded<N>, SolveError> {
    let h = (s1 - s0) / cfg.steps as f64;
    let mut states = Vec::with_capacity(cfg.steps + 1);
    let mut z = z0;
    states.push(z);
    for k in 0..cfg.steps {
        let s = s0 + k as f64 * h;
        z = step(rhs, s, &z, h, cfg.method);
        if z.iter().any(|x| !x.is_finite()) {
            return Err(SolveError::NonFinite { s: s + h, step: k });
        }
        states.push(z);
    }
    Ok(Recorded {
        s0,
        h,
        method: cfg.method,
        states,
    })
}

/// Exact reverse-mode differentiation of a recorded Euler solve:
/// z' = z + h f(s, z), so a_k = a_{k+1} + h J^T a_{k+1} per step.
///
/// `vjp(s, z, upstream)` must return `(d rhs/d z)^T upstream` evaluated at
/// (s, z) and may accumulate parameter gradients for the same upstream as a
/// side effect. Returns the co-state at s0.
pub fn backprop_recorded_euler<const N: usize>(
    run: &Recorded<N>,
    vjp: &mut impl FnMut(f64, &[f64; N], &[f64; N]) -> [f64; N],
    seed: [f64; N],
) -> [f64; N] {
    assert_eq!(run.method, Method::Euler);
    let steps = run.states.len() - 1;
    let mut a = seed;
    for k in (0..steps).rev() {
        let z = &run.states[k];
        let s = run.s0 + k as f64 * run.h;
        let contrib = vjp(s, z, &a);
        a = axpy(&a, run.h, &contrib);
    }
    a
}

/// Exact reverse-mode differentiation of a recorded RK4 solve; needs both the
/// forward rhs (to recompute stage states) and its state VJP.
pub fn backprop_recorded_rk4<const N: usize>(
    run: &Recorded<N>,
    rhs: &impl Fn(f64, &[f64; N]) -> [f64; N],
    vjp: &mut impl FnMut(f64, &[f64; N], &[f64; N]) -> [f64; N],
    seed: [f64; N],
) -> [f64; N] {
    assert_eq!(run.method, Method::Rk4);
    let steps = run.states.len() - 1;
    let mut a = seed;
    for k in (0..steps).rev() {
        let z = &run.states[k];
        let s = run.s0 + k as f64 * run.h;
        a = rk4_step_vjp(rhs, vjp, s, z, run.h, &a);
    }
    a
}

/// Transposed chain of one RK4 step: given the upstream co-state on the step
/// output, returns the co-state on the step input. `vjp` is called once per
/// stage and may accumulate parameter gradients.
pub fn rk4_step_vjp<const N: usize>(
    rhs: &impl Fn(f64, &[f64; N]) -> [f64; N],
    vjp: &mut impl FnMut(f64, &[f64; N], &[f64; N]) -> [f64; N],
    s: f64,
    z: &[f64; N],
    h: f64,
    a_out: &[f64; N],
) -> [f64; N] {
    let k1 = rhs(s, z);
    let y2 = axpy(z, 0.5 * h, &k1);
    let k2 = rhs(s + 0.5 * h, &y2);
    let y3 = axpy(z, 0.5 * h, &k2);
    let k3 = rhs(s + 0.5 * h, &y3);
    let y4 = axpy(z, h, &k3);

    let mut a_k1 = [0.0; N];
    let mut a_k2 = [0.0; N];
    let mut a_k3 = [0.0; N];
    let mut a_k4 = [0.0; N];
    for i in 0..N {
        a_k1[i] = h / 6.0 * a_out[i];
        a_k2[i] = h / 3.0 * a_out[i];
        a_k3[i] = h / 3.0 * a_out[i];
        a_k4[i] = h / 6.0 * a_out[i];
    }
    let mut a_in = *a_out;
    // Stage 4 at y4 = z + h k3.
    let a_y4 = vjp(s + h, &y4, &a_k4);
    for i in 0..N {
        a_in[i] += a_y4[i];
        a_k3[i] += h * a_y4[i];
    }
    // Stage 3 at y3 = z + h/2 k2.
    let a_y3 = vjp(s + 0.5 * h, &y3, &a_k3);
    for i in 0..N {
        a_in[i] += a_y3[i];
        a_k2[i] += 0.5 * h * a_y3[i];
    }
    // Stage 2 at y2 = z + h/2 k1.
    let a_y2 = vjp(s + 0.5 * h, &y2, &a_k2);
    for i in 0..N {
        a_in[i] += a_y2[i];
        a_k1[i] += 0.5 * h * a_y2[i];
    }
    // Stage 1 at z.
    let a_y1 = vjp(s, z, &a_k1);
    for i in 0..N {
        a_in[i] += a_y1[i];
    }
    a_in
}

/// Central-difference gradient oracle over f32-stored parameters. Each
/// perturbation is divided by the actually stored delta, so f32 quantization
/// does not corrupt the estimate.
pub fn finite_diff_grad(
    loss: &mut impl FnMut(&[f32]) -> f64,
    params: &[f32],
    eps: f32,
) -> Vec<f64> {
    let mut grads = Vec::with_capacity(params.len());
    let mut work = params.to_vec();
    for i in 0..params.len() {
        let old = work[i];
        work[i] = old + eps;
        let hi_param = work[i];
        let hi = loss(&work);
        work[i] = old - eps;
        let lo_param = work[i];
        let lo = loss(&work);
        work[i] = old;
        let delta = hi_param as f64 - lo_param as f64;
        grads.push(if delta == 0.0 { 0.0 } else { (hi - lo) / delta });
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_rhs_identity() {
        let rhs = |_s: f64, _z: &[f64; 3]| [0.0; 3];
        let z0 = [1.0, -2.0, 0.5];
        let z1 = integrate(&rhs, z0, 0.0, 1.0, &SolverConfig::rk4(16)).unwrap();
        assert_eq!(z0, z1);
    }

    #[test]
    fn scalar_decay_rk4() {
        let rhs = |_s: f64, z: &[f64; 1]| [-z[0]];
        let z1 = integrate(&rhs, [1.0], 0.0, 1.0, &SolverConfig::rk4(128)).unwrap();
        assert!((z1[0] - (-1.0f64).exp()).abs() < 1e-9, "{}", z1[0]);
    }

    #[test]
    fn nan_aborts_with_diagnostic() {
        let rhs = |s: f64, z: &[f64; 1]| if s > 0.5 { [f64::NAN] } else { [z[0]] };
        let err = integrate(&rhs, [1.0], 0.0, 1.0, &SolverConfig::rk4(8)).unwrap_err();
        assert!(matches!(err, SolveError::NonFinite { .. }));
    }

    #[test]
    fn rk4_self_convergence_order() {
        // Smooth nonlinear system: z'' = -sin(z) as first-order pair.
        let rhs = |_s: f64, z: &[f64; 2]| [z[1], -(z[0]).sin()];
        let z0 = [1.0, 0.3];
        let fine = integrate(&rhs, z0, 0.0, 2.0, &SolverConfig::rk4(4096)).unwrap();
        let err = |steps: usize| {
            let z = integrate(&rhs, z0, 0.0, 2.0, &SolverConfig::rk4(steps)).unwrap();
            ((z[0] - fine[0]).powi(2) + (z[1] - fine[1]).powi(2)).sqrt()
        };
        let e64 = err(64);
        let e128 = err(128);
        assert!(e64 / e128 >= 8.0, "rk4 ratio {}", e64 / e128);

        let euler_err = |steps: usize| {
            let z = integrate(&rhs, z0, 0.0, 2.0, &SolverConfig::euler(steps)).unwrap();
            ((z[0] - fine[0]).powi(2) + (z[1] - fine[1]).powi(2)).sqrt()
        };
        let ratio = euler_err(256) / euler_err(512);
        assert!(ratio >= 1.9, "euler ratio {ratio}");
    }

    #[test]
    fn euler_one_step_linear_backprop_exact() {
        // dz/ds = A z, one Euler step: a0 = (I + hA)^T seed.
        let a_mat = [[0.5, -0.2], [0.3, 0.1]];
        let rhs = move |_s: f64, z: &[f64; 2]| {
            [
                a_mat[0][0] * z[0] + a_mat[0][1] * z[1],
                a_mat[1][0] * z[0] + a_mat[1][1] * z[1],
            ]
        };
        let run = integrate_recorded(&rhs, [1.0, 2.0], 0.0, 0.25, &SolverConfig::euler(1)).unwrap();
        let seed = [1.0, -1.0];
        let mut vjp = move |_s: f64, _z: &[f64; 2], u: &[f64; 2]| {
            [
                a_mat[0][0] * u[0] + a_mat[1][0] * u[1],
                a_mat[0][1] * u[0] + a_mat[1][1] * u[1],
            ]
        };
        let a0 = backprop_recorded_euler(&run, &mut vjp, seed);
        let h = 0.25;
        let expect = [
            seed[0] + h * (a_mat[0][0] * seed[0] + a_mat[1][0] * seed[1]),
            seed[1] + h * (a_mat[0][1] * seed[0] + a_mat[1][1] * seed[1]),
        ];
        assert_relative_eq!(a0[0], expect[0], max_relative = 1e-14);
        assert_relative_eq!(a0[1], expect[1], max_relative = 1e-14);
    }

    #[test]
    fn rk4_recorded_backprop_matches_finite_differences() {
        // Nonlinear rhs with an analytic jacobian.
        let rhs = |_s: f64, z: &[f64; 2]| [z[1] * z[1], (z[0]).sin()];
        let mut vjp = |_s: f64, z: &[f64; 2], u: &[f64; 2]| {
            // J = [[0, 2 z1], [cos z0, 0]]; return J^T u.
            [(z[0]).cos() * u[1], 2.0 * z[1] * u[0]]
        };
        let z0 = [0.4, 0.8];
        let cfg = SolverConfig::rk4(32);
        let run = integrate_recorded(&rhs, z0, 0.0, 1.0, &cfg).unwrap();
        let seed = [1.0, 0.5];
        let a0 = backprop_recorded_rk4(&run, &rhs, &mut vjp, seed);
        for i in 0..2 {
            let h = 1e-6;
            let mut hi = z0;
            hi[i] += h;
            let mut lo = z0;
            lo[i] -= h;
            let zh = integrate(&rhs, hi, 0.0, 1.0, &cfg).unwrap();
            let zl = integrate(&rhs, lo, 0.0, 1.0, &cfg).unwrap();
            let fd = (seed[0] * (zh[0] - zl[0]) + seed[1] * (zh[1] - zl[1])) / (2.0 * h);
            assert_relative_eq!(a0[i], fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn finite_diff_quadratic() {
        let mut loss = |p: &[f32]| (p[0] as f64) * (p[0] as f64);
        let g = finite_diff_grad(&mut loss, &[3.0], 1e-3);
        assert!((g[0] - 6.0).abs() < 1e-6, "{}", g[0]);
    }

    #[test]
    fn finite_diff_ignores_unused_params() {
        let mut loss = |p: &[f32]| (p[1] as f64).powi(2);
        let g = finite_diff_grad(&mut loss, &[5.0, 2.0], 1e-3);
        assert_eq!(g[0], 0.0);
        assert!((g[1] - 4.0).abs() < 1e-6);
    }
}
