//! Gradient paths through the mixed trace.
//!
//! `integrate_adjoint` walks the trace's op log backwards, reconstructing the
//! forward states by inverting each step (backward RK4 estimate plus a few
//! fixed-point refinements), and applies the exact per-step transposed
//! chain. It stores nothing per step: memory is the op log (a handful of
//! segment boundaries per ray) plus dense parameter accumulators.
//!
//! `backprop_recorded` differentiates the same discrete maps from a recorded
//! per-step trajectory (memory linear in step count) and, for straight
//! segments, uses the step-local co-state recurrence instead of the suffix
//! form - an algebraically distinct route used to cross-check the adjoint.

use crate::fields::ea::EaSource;
use crate::fields::grid::GradSink;
use crate::fields::ior::{IorField, Refractive};
use crate::transport::trace::{decay_gain, gain_dsigma, quadrature_intervals, rk4_pv, T_CUTOFF};
use crate::transport::{Exterior, ModelBundle, OpKind, OpRecord, RayState, TraceConfig, TraceLog, TraceTape};
use crate::Vec3;

/// Dense gradient accumulator over one grid's stored values.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    pub data: Vec<f64>,
}

impl GradBuffer {
    pub fn zeros(len: usize) -> Self {
        GradBuffer {
            data: vec![0.0; len],
        }
    }

    pub fn clear(&mut self) {
        self.data.fill(0.0);
    }

    pub fn merge_from(&mut self, other: &GradBuffer) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl GradSink for GradBuffer {
    #[inline]
    fn add(&mut self, index: u32, value: f64) {
        self.data[index as usize] += value;
    }
}

/// Parameter-gradient targets; `None` marks a frozen group.
#[derive(Debug, Default)]
pub struct GradSinks {
    pub ior: Option<GradBuffer>,
    pub exterior_emission: Option<GradBuffer>,
    pub exterior_absorption: Option<GradBuffer>,
    pub interior_emission: Option<GradBuffer>,
    pub interior_absorption: Option<GradBuffer>,
}

impl GradSinks {
    pub fn for_ior(param_count: usize) -> Self {
        GradSinks {
            ior: Some(GradBuffer::zeros(param_count)),
            ..Default::default()
        }
    }

    pub fn clear(&mut self) {
        for buf in [
            &mut self.ior,
            &mut self.exterior_emission,
            &mut self.exterior_absorption,
            &mut self.interior_emission,
            &mut self.interior_absorption,
        ]
        .into_iter()
        .flatten()
        {
            buf.clear();
        }
    }

    pub fn merge_from(&mut self, other: &GradSinks) {
        let pairs = [
            (&mut self.ior, &other.ior),
            (&mut self.exterior_emission, &other.exterior_emission),
            (&mut self.exterior_absorption, &other.exterior_absorption),
            (&mut self.interior_emission, &other.interior_emission),
            (&mut self.interior_absorption, &other.interior_absorption),
        ];
        for (mine, theirs) in pairs {
            if let (Some(a), Some(b)) = (mine.as_mut(), theirs.as_ref()) {
                a.merge_from(b);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        [
            &self.ior,
            &self.exterior_emission,
            &self.exterior_absorption,
            &self.interior_emission,
            &self.interior_absorption,
        ]
        .into_iter()
        .flatten()
        .all(|b| b.all_finite())
    }
}

/// Co-state over the ray state layout: d loss / d (p, v, L, T).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Costate {
    pub p: Vec3,
    pub v: Vec3,
    pub radiance: Vec3,
    pub transmittance: f64,
}

impl Costate {
    pub fn zeros() -> Self {
        Costate {
            p: Vec3::zeros(),
            v: Vec3::zeros(),
            radiance: Vec3::zeros(),
            transmittance: 0.0,
        }
    }

    /// Seed for a loss on the final radiance only.
    pub fn radiance_seed(up: Vec3) -> Self {
        Costate {
            radiance: up,
            ..Costate::zeros()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().all(|x| x.is_finite())
            && self.v.iter().all(|x| x.is_finite())
            && self.radiance.iter().all(|x| x.is_finite())
            && self.transmittance.is_finite()
    }
}

/// Fixed-point refinement sweeps for the backward state replay.
const REPLAY_REFINE: usize = 3;

enum StepSource<'a> {
    /// Reconstruct states by inverting steps from the op's terminal state.
    Replay,
    /// Use recorded per-step input states.
    Tape(&'a TraceTape),
}

/// Constant-memory adjoint over a logged trace. Gradients accumulate into
/// `sinks`; the return value is the co-state at the ray origin.
///
/// The exterior must be a grid backend (`Baked`/`Learnable`/`Empty`);
/// analytic backdrops have no quadrature steps to differentiate and must be
/// baked first.
pub fn integrate_adjoint(
    model: &ModelBundle<IorField>,
    cfg: &TraceConfig,
    log: &TraceLog,
    seed: Costate,
    sinks: &mut GradSinks,
) -> Costate {
    let final_state = log
        .final_state
        .expect("trace log missing final state; use trace_mixed_logged");
    backward_ops(
        model,
        cfg,
        &log.ops,
        final_state,
        seed,
        sinks,
        StepSource::Replay,
    )
}

/// Reverse-mode differentiation from a recorded trajectory (memory linear in
/// step count). Uses the same discrete step maps as the forward trace.
pub fn backprop_recorded(
    model: &ModelBundle<IorField>,
    cfg: &TraceConfig,
    tape: &TraceTape,
    seed: Costate,
    sinks: &mut GradSinks,
) -> Costate {
    let final_state = tape
        .log
        .final_state
        .expect("trace tape missing final state; use trace_mixed_taped");
    backward_ops(
        model,
        cfg,
        &tape.log.ops,
        final_state,
        seed,
        sinks,
        StepSource::Tape(tape),
    )
}

fn backward_ops(
    model: &ModelBundle<IorField>,
    cfg: &TraceConfig,
    ops: &[OpRecord],
    final_state: RayState,
    seed: Costate,
    sinks: &mut GradSinks,
    source: StepSource,
) -> Costate {
    let h_out = cfg.far_bound / cfg.steps_outside as f64;
    let mut a = seed;
    for i in (0..ops.len()).rev() {
        let op = &ops[i];
        let z_out = if i + 1 < ops.len() {
            ops[i + 1].z_in
        } else {
            final_state
        };
        match op.kind {
            OpKind::Ea { s_anchor, length } => {
                let recurrence = matches!(source, StepSource::Tape(_));
                ea_op_backward(
                    &model.exterior,
                    &op.z_in,
                    &z_out,
                    s_anchor,
                    length,
                    h_out,
                    &mut a,
                    sinks,
                    recurrence,
                );
            }
            OpKind::Enter => {
                // v_out = n(p) * omega with omega = z_in.v (unit).
                let p = op.z_in.p;
                let omega = op.z_in.v;
                let jet = model.ior.jet(p);
                let u_n = a.v.dot(&omega);
                a.v *= jet.n;
                a.p += jet.grad_n * u_n;
                if let Some(s) = sinks.ior.as_mut() {
                    model.ior.vjp(p, u_n, Vec3::zeros(), s);
                }
            }
            OpKind::Exit => {
                // v_out = w / |w| with w = z_in.v.
                let w = op.z_in.v;
                let m = w.norm();
                let omega = w / m;
                a.v = (a.v - omega * omega.dot(&a.v)) / m;
            }
            OpKind::Inside { steps, h } => match source {
                StepSource::Replay => {
                    let mut z_next = z_out;
                    for k in (0..steps).rev() {
                        // The entry state sits exactly on the box face where
                        // the clamped field has a kink and the fixed-point
                        // inversion converges slowly; the op record already
                        // stores it exactly.
                        let z_k = if k == 0 {
                            op.z_in
                        } else {
                            invert_inside_step(model, &z_next, h)
                        };
                        inside_step_backward(model, &z_k, h, &mut a, sinks);
                        z_next = z_k;
                    }
                }
                StepSource::Tape(tape) => {
                    let recorded = &tape.steps[i];
                    debug_assert_eq!(recorded.len(), steps as usize);
                    for z_k in recorded.iter().rev() {
                        inside_step_backward(model, z_k, h, &mut a, sinks);
                    }
                }
            },
        }
    }
    a
}

/// Inverts one in-box step: backward-RK4 estimate refined by fixed-point
/// iteration on the forward map, then analytic inversion of the (T, L)
/// update.
fn invert_inside_step(model: &ModelBundle<IorField>, z_next: &RayState, h: f64) -> RayState {
    let (mut p, mut v) = rk4_pv(model.ior, z_next.p, z_next.v, -h);
    for _ in 0..REPLAY_REFINE {
        let (fp, fv) = rk4_pv(model.ior, p, v, h);
        p += z_next.p - fp;
        v += z_next.v - fv;
    }
    let mut radiance = z_next.radiance;
    let mut transmittance = z_next.transmittance;
    if let Some(medium) = model.interior {
        let n0 = model.ior.ior(p);
        let x = p + v * (0.5 * h / n0);
        let sigma = medium.absorption(x);
        let q = medium.emission(x);
        if sigma > 0.0 || q != Vec3::zeros() {
            let nx = model.ior.ior(x);
            let (d, g) = decay_gain(sigma, h);
            transmittance = z_next.transmittance / d.max(1e-300);
            radiance = z_next.radiance - q * (transmittance * g / (nx * nx));
        }
    }
    RayState {
        p,
        v,
        radiance,
        transmittance,
    }
}

/// Transposed chain of one in-box step, reading the step's input state.
fn inside_step_backward(
    model: &ModelBundle<IorField>,
    z_k: &RayState,
    h: f64,
    a: &mut Costate,
    sinks: &mut GradSinks,
) {
    let a_out = *a;
    // Hamiltonian RK4 part (reads p, v; writes p, v).
    let (mut a_p, mut a_v) = rk4_pv_vjp(model.ior, z_k.p, z_k.v, h, a_out.p, a_out.v, sinks);
    let mut a_t = a_out.transmittance;

    // Interior emission-absorption part (reads p, v, T; writes T, L).
    if let Some(medium) = model.interior {
        let jet0 = model.ior.jet(z_k.p);
        let n0 = jet0.n;
        let x = z_k.p + z_k.v * (0.5 * h / n0);
        let (q, sigma, dq, dsigma) = medium.eval_with_spatial(x);
        if sigma > 0.0 || q != Vec3::zeros() {
            let jet_x = model.ior.jet(x);
            let nx = jet_x.n;
            let inv_nx2 = 1.0 / (nx * nx);
            let (d, g) = decay_gain(sigma, h);
            let gds = gain_dsigma(sigma, h);
            let al = a_out.radiance;
            let t = z_k.transmittance;

            // T' = T d, L' = L + T g q / nx^2.
            a_t = a_out.transmittance * d + al.dot(&q) * g * inv_nx2;
            let u_sigma = t * (a_out.transmittance * (-h * d) + al.dot(&q) * inv_nx2 * gds);
            let u_q = al * (t * g * inv_nx2);
            let u_nx = al.dot(&q) * t * g * (-2.0 / (nx * nx * nx));

            if let Some(s) = sinks.interior_absorption.as_mut() {
                medium.vjp_absorption(x, u_sigma, s);
            }
            if let Some(s) = sinks.interior_emission.as_mut() {
                medium.vjp_emission(x, u_q, s);
            }
            if let Some(s) = sinks.ior.as_mut() {
                model.ior.vjp(x, u_nx, Vec3::zeros(), s);
            }

            // Spatial chain through the sample point x = p + v h / (2 n0).
            let a_x = dsigma * u_sigma
                + dq[0] * u_q.x
                + dq[1] * u_q.y
                + dq[2] * u_q.z
                + jet_x.grad_n * u_nx;
            let k = 0.5 * h / n0;
            a_v += a_x * k;
            let u_n0 = -(0.5 * h / (n0 * n0)) * z_k.v.dot(&a_x);
            a_p += a_x + jet0.grad_n * u_n0;
            if let Some(s) = sinks.ior.as_mut() {
                model.ior.vjp(z_k.p, u_n0, Vec3::zeros(), s);
            }
        }
    }
    a.p = a_p;
    a.v = a_v;
    a.transmittance = a_t;
    // a.radiance is unchanged: every map is additive in L.
}

/// VJP of one eikonal RHS evaluation f(p, v) = (v/n, grad n):
/// given upstream on (f_p, f_v), returns the co-state on (p, v) and
/// accumulates IoR parameter gradients.
fn eikonal_stage_vjp(
    ior: &IorField,
    p: Vec3,
    v: Vec3,
    up_fp: Vec3,
    up_fv: Vec3,
    sinks: &mut GradSinks,
) -> (Vec3, Vec3) {
    let jet = ior.jet(p);
    let n = jet.n;
    let a_v = up_fp / n;
    let u_n = -up_fp.dot(&v) / (n * n);
    let a_p = jet.grad_n * u_n + jet.hess_times(up_fv);
    if let Some(s) = sinks.ior.as_mut() {
        ior.vjp(p, u_n, up_fv, s);
    }
    (a_p, a_v)
}

/// Transposed chain of the RK4 update on (p, v).
fn rk4_pv_vjp(
    ior: &IorField,
    p: Vec3,
    v: Vec3,
    h: f64,
    a_p_out: Vec3,
    a_v_out: Vec3,
    sinks: &mut GradSinks,
) -> (Vec3, Vec3) {
    let f = |p: Vec3, v: Vec3| {
        let (n, g) = ior.ior_and_gradient(p);
        (v / n, g)
    };
    let (k1p, k1v) = f(p, v);
    let (y2p, y2v) = (p + k1p * (0.5 * h), v + k1v * (0.5 * h));
    let (k2p, k2v) = f(y2p, y2v);
    let (y3p, y3v) = (p + k2p * (0.5 * h), v + k2v * (0.5 * h));
    let (k3p, k3v) = f(y3p, y3v);
    let (y4p, y4v) = (p + k3p * h, v + k3v * h);

    let (mut ak1p, mut ak1v) = (a_p_out * (h / 6.0), a_v_out * (h / 6.0));
    let (mut ak2p, mut ak2v) = (a_p_out * (h / 3.0), a_v_out * (h / 3.0));
    let (mut ak3p, mut ak3v) = (a_p_out * (h / 3.0), a_v_out * (h / 3.0));
    let (ak4p, ak4v) = (a_p_out * (h / 6.0), a_v_out * (h / 6.0));

    let (mut ap, mut av) = (a_p_out, a_v_out);

    let (s4p, s4v) = eikonal_stage_vjp(ior, y4p, y4v, ak4p, ak4v, sinks);
    ap += s4p;
    av += s4v;
    ak3p += s4p * h;
    ak3v += s4v * h;

    let (s3p, s3v) = eikonal_stage_vjp(ior, y3p, y3v, ak3p, ak3v, sinks);
    ap += s3p;
    av += s3v;
    ak2p += s3p * (0.5 * h);
    ak2v += s3v * (0.5 * h);

    let (s2p, s2v) = eikonal_stage_vjp(ior, y2p, y2v, ak2p, ak2v, sinks);
    ap += s2p;
    av += s2v;
    ak1p += s2p * (0.5 * h);
    ak1v += s2v * (0.5 * h);

    let (s1p, s1v) = eikonal_stage_vjp(ior, p, v, ak1p, ak1v, sinks);
    ap += s1p;
    av += s1v;

    (ap, av)
}

/// Backward sweep over one straight segment.
///
/// With `recurrence = false` the co-state on T is obtained from the suffix
/// decomposition (two forward sweeps, no per-step storage); with
/// `recurrence = true` the step-local reverse recurrence is evaluated from a
/// per-step cache. Both are exact; the two routes cross-check each other.
#[allow(clippy::too_many_arguments)]
fn ea_op_backward(
    exterior: &Exterior,
    z_in: &RayState,
    z_out: &RayState,
    s_anchor: f64,
    length: f64,
    h_out: f64,
    a: &mut Costate,
    sinks: &mut GradSinks,
    recurrence: bool,
) {
    // Position chain: p_out = p_in + v length (v is the unit direction).
    let dir = z_in.v;
    a.v += a.p * length;

    match exterior {
        Exterior::Empty => {}
        Exterior::Analytic(_) => {
            panic!("adjoint over analytic backdrops is unsupported; bake the background first")
        }
        Exterior::Baked(_) | Exterior::Learnable(_) => {
            let al = a.radiance;
            let a_t_out = a.transmittance;
            if recurrence {
                // Cache per-step forward values, then run the reverse
                // recurrence a_T_k = a_T_{k+1} d_k + a_L . e_k.
                let mut cache: Vec<(f64, f64, Vec3, f64, f64, f64, f64)> = Vec::new();
                let mut t = z_in.transmittance;
                quadrature_intervals(s_anchor, length, h_out, |t_mid, len| {
                    let x = z_in.p + dir * t_mid;
                    let (q, sigma) = exterior.sample(x);
                    let (d, g) = decay_gain(sigma, len);
                    cache.push((t_mid, len, q, sigma, d, g, t));
                    t *= d;
                    t >= T_CUTOFF
                });
                let mut a_t = a_t_out;
                for &(t_mid, len, q, sigma, d, g, t_k) in cache.iter().rev() {
                    let x = z_in.p + dir * t_mid;
                    let gds = gain_dsigma(sigma, len);
                    let u_sigma = -len * d * t_k * a_t + al.dot(&q) * t_k * gds;
                    let u_q = al * (t_k * g);
                    emit_ea_step(exterior, x, t_mid, u_q, u_sigma, a, sinks);
                    a_t = a_t * d + al.dot(&q) * g;
                }
                a.transmittance = a_t;
            } else {
                // Suffix form: u_sigma_k uses (L_out - L_{k+1}) and T_out.
                let t_out = z_out.transmittance;
                let l_out = z_out.radiance;
                let mut t = z_in.transmittance;
                let mut l = z_in.radiance;
                let mut a_t0 = 0.0;
                let mut prefix = 1.0;
                quadrature_intervals(s_anchor, length, h_out, |t_mid, len| {
                    let x = z_in.p + dir * t_mid;
                    let (q, sigma) = exterior.sample(x);
                        let (d, g) = decay_gain(sigma, len);
                        let gds = gain_dsigma(sigma, len);
                        let t_k = t;
                        // Forward update to expose L_{k+1}.
                        l += q * (t_k * g);
                        t *= d;
                        let u_sigma =
                            al.dot(&(q * (t_k * gds))) - len * (al.dot(&(l_out - l)) + t_out * a_t_out);
                        let u_q = al * (t_k * g);
                        emit_ea_step(exterior, x, t_mid, u_q, u_sigma, a, sinks);
                        a_t0 += al.dot(&(q * g)) * prefix;
                        prefix *= d;
                        t >= T_CUTOFF
                    },
                );
                a.transmittance = a_t_out * prefix + a_t0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
// temporary diagnostic appended as a test


    use crate::fields::ea::{GridEa, LearnableEa, MaskedEa};
    use crate::fields::grid::GridField;
    use crate::fields::ior::IorField;
    use crate::fields::smooth::{gaussian_smooth, SmoothingKernel};
    use crate::odesolve::finite_diff_grad;
    use crate::transport::{
        trace_mixed, trace_mixed_logged, trace_mixed_taped, RefractiveBox, TraceLog, TraceTape,
    };
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    struct Instance {
        ior: IorField,
        background: GridEa,
        refr_box: RefractiveBox,
        cfg: TraceConfig,
        origin: Vec3,
        dir: Vec3,
    }

    fn make_instance(seed: u64) -> Instance {
        let mut rng = StdRng::seed_from_u64(seed);
        let refr_box = RefractiveBox::new(Vec3::new(-0.5, -0.5, -0.5), Vec3::new(0.5, 0.5, 0.5));
        let mut ior = IorField::init_on_box(refr_box.min, refr_box.max, [8, 8, 8], -10.0);
        for v in &mut ior.raw.values {
            *v = rng.gen_range(-4.5..-1.0);
        }
        // Band-limit the raw field; fixed-step integration and the backward
        // replay assume cell-scale smoothness.
        ior.raw = gaussian_smooth(&ior.raw, &SmoothingKernel::new(0.2));
        // Smooth textured background grids behind and around the box.
        let dom_min = Vec3::new(-2.0, -2.0, -2.0);
        let dom_ext = Vec3::new(4.0, 4.0, 4.0);
        let mut emission = GridField::new(dom_min, dom_ext, [16, 16, 16], 3);
        let mut absorption = GridField::new(dom_min, dom_ext, [16, 16, 16], 1);
        for v in &mut emission.values {
            *v = rng.gen_range(0.0..4.0);
        }
        for v in &mut absorption.values {
            *v = rng.gen_range(0.0..1.5);
        }
        let kernel = SmoothingKernel::new(0.25);
        let mut emission = gaussian_smooth(&emission, &kernel);
        let mut absorption = gaussian_smooth(&absorption, &kernel);
        // Mask the box region, expanded by a margin, so the background
        // vanishes at the box boundary (the backward pass holds segment
        // boundaries fixed, which is exact only for fields that vanish
        // there - matching the masked-and-smoothed production setup).
        let margin = 0.55;
        let expanded = RefractiveBox::new(
            refr_box.min - Vec3::new(margin, margin, margin),
            refr_box.max + Vec3::new(margin, margin, margin),
        );
        for k in 0..16 {
            for j in 0..16 {
                for i in 0..16 {
                    let p = emission.node_pos(i, j, k);
                    if expanded.contains(p) {
                        for c in 0..3 {
                            let idx = emission.value_index(i, j, k, c);
                            emission.values[idx] = 0.0;
                        }
                        let idx = absorption.value_index(i, j, k, 0);
                        absorption.values[idx] = 0.0;
                    }
                }
            }
        }
        let background = GridEa {
            emission,
            absorption,
        };
        let origin = Vec3::new(
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            -1.8,
        );
        let target = Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), 0.0);
        let dir = (target - origin).normalize();
        Instance {
            ior,
            background,
            refr_box,
            cfg: TraceConfig {
                far_bound: 5.0,
                ..TraceConfig::default()
            },
            origin,
            dir,
        }
    }

    fn bundle<'a>(inst: &'a Instance) -> ModelBundle<'a, IorField> {
        ModelBundle {
            ior: &inst.ior,
            exterior: Exterior::Baked(&inst.background),
            interior: None,
            refr_box: Some(inst.refr_box),
        }
    }

    fn l2_rel(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        diff / norm.max(1e-300)
    }


#[test]
fn single_inside_step_vjp_matches_fd() {
    use crate::fields::smooth::{gaussian_smooth, SmoothingKernel};
    use crate::odesolve::finite_diff_grad;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    let mut rng = StdRng::seed_from_u64(2);
    let refr_box = crate::transport::RefractiveBox::new(Vec3::new(-0.5, -0.5, -0.5), Vec3::new(0.5, 0.5, 0.5));
    let mut ior = crate::fields::ior::IorField::init_on_box(refr_box.min, refr_box.max, [8, 8, 8], -10.0);
    for v in &mut ior.raw.values { *v = rng.gen_range(-4.5..-1.0); }
    ior.raw = gaussian_smooth(&ior.raw, &SmoothingKernel::new(0.2));
    let h = 0.1;
    let p0 = Vec3::new(0.03, -0.11, -0.21);
    let n0 = crate::fields::ior::Refractive::ior(&ior, p0);
    let v0 = Vec3::new(0.1, -0.05, 1.0).normalize() * n0;
    let (wp, wv) = (Vec3::new(0.3, -1.0, 0.6), Vec3::new(1.1, 0.2, -0.7));

    // adjoint single step
    let mut sinks = GradSinks::for_ior(ior.raw.values.len());
    let (ap, av) = rk4_pv_vjp(&ior, p0, v0, h, wp, wv, &mut sinks);
    let ga = sinks.ior.unwrap().data;

    // fd over params
    let base: Vec<f32> = ior.raw.values.clone();
    let mut loss = |params: &[f32]| {
        let mut f = ior.clone();
        f.raw.values.copy_from_slice(params);
        let (p1, v1) = crate::transport::trace::rk4_pv(&f, p0, v0, h);
        wp.dot(&p1) + wv.dot(&v1)
    };
    let gf = finite_diff_grad(&mut loss, &base, 1e-4);
    let diff: f64 = ga.iter().zip(&gf).map(|(a,b)| (a-b)*(a-b)).sum::<f64>().sqrt();
    let norm: f64 = gf.iter().map(|b| b*b).sum::<f64>().sqrt();
    assert!(diff / norm < 1e-6, "single-step param rel {:.3e}", diff / norm);

    // fd over state
    for axis in 0..6 {
        let e = 1e-6;
        let mut hi_p = p0; let mut lo_p = p0; let mut hi_v = v0; let mut lo_v = v0;
        if axis < 3 { hi_p[axis] += e; lo_p[axis] -= e; } else { hi_v[axis-3] += e; lo_v[axis-3] -= e; }
        let (p1h, v1h) = crate::transport::trace::rk4_pv(&ior, hi_p, hi_v, h);
        let (p1l, v1l) = crate::transport::trace::rk4_pv(&ior, lo_p, lo_v, h);
        let fd = (wp.dot(&p1h) + wv.dot(&v1h) - wp.dot(&p1l) - wv.dot(&v1l)) / (2.0 * e);
        let an = if axis < 3 { ap[axis] } else { av[axis-3] };
        assert!(
            ((an - fd) / fd).abs() < 1e-6,
            "state axis {axis}: adj {an:.6e} fd {fd:.6e}"
        );
    }
}







    #[test]
    fn trace_crosses_the_box() {
        let inst = make_instance(1);
        let mut log = TraceLog::default();
        let out =
            trace_mixed_logged(&bundle(&inst), inst.origin, inst.dir, &inst.cfg, &mut log).unwrap();
        assert!(!out.trapped);
        assert!(log
            .ops
            .iter()
            .any(|op| matches!(op.kind, OpKind::Inside { steps, .. } if steps > 10)));
        assert!(out.radiance.norm() > 1e-3, "ray saw no background");
    }

    #[test]
    fn adjoint_matches_recorded_backprop() {
        for seed in [1u64, 2, 3] {
            let inst = make_instance(seed);
            let b = bundle(&inst);
            let mut log = TraceLog::default();
            trace_mixed_logged(&b, inst.origin, inst.dir, &inst.cfg, &mut log).unwrap();
            let mut tape = TraceTape::default();
            trace_mixed_taped(&b, inst.origin, inst.dir, &inst.cfg, &mut tape).unwrap();

            let seed_costate = Costate {
                radiance: Vec3::new(1.0, -0.5, 0.25),
                transmittance: 0.4,
                ..Costate::zeros()
            };
            let mut sinks_a = GradSinks::for_ior(inst.ior.param_count());
            let a0 = integrate_adjoint(&b, &inst.cfg, &log, seed_costate, &mut sinks_a);
            let mut sinks_r = GradSinks::for_ior(inst.ior.param_count());
            let r0 = backprop_recorded(&b, &inst.cfg, &tape, seed_costate, &mut sinks_r);

            let ga = &sinks_a.ior.as_ref().unwrap().data;
            let gr = &sinks_r.ior.as_ref().unwrap().data;
            let rel = l2_rel(ga, gr);
            assert!(rel < 1e-9, "seed {seed}: adjoint vs recorded rel {rel}");
            assert!((a0.p - r0.p).norm() < 1e-9 * r0.p.norm().max(1.0));
            assert!((a0.v - r0.v).norm() < 1e-9 * r0.v.norm().max(1.0));
        }
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let inst = make_instance(5);
        let b = bundle(&inst);
        let mut log = TraceLog::default();
        trace_mixed_logged(&b, inst.origin, inst.dir, &inst.cfg, &mut log).unwrap();
        let w = Vec3::new(0.7, 1.0, -0.4);
        let seed_costate = Costate::radiance_seed(w);
        let mut sinks = GradSinks::for_ior(inst.ior.param_count());
        integrate_adjoint(&b, &inst.cfg, &log, seed_costate, &mut sinks);
        let ga = sinks.ior.unwrap().data;

        let raws: Vec<f32> = inst.ior.raw.values.clone();
        let mut loss = |params: &[f32]| {
            let mut ior = inst.ior.clone();
            ior.raw.values.copy_from_slice(params);
            let b2 = ModelBundle {
                ior: &ior,
                exterior: Exterior::Baked(&inst.background),
                interior: None,
                refr_box: Some(inst.refr_box),
            };
            let out = trace_mixed(&b2, inst.origin, inst.dir, &inst.cfg).unwrap();
            w.dot(&out.radiance)
        };
        let gf = finite_diff_grad(&mut loss, &raws, 1e-4);
        let rel = l2_rel(&ga, &gf);
        assert!(rel < 1e-3, "adjoint vs fd rel {rel}");
    }

    #[test]
    fn interior_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(9);
        let inst = make_instance(7);
        let mut interior = LearnableEa::init_on_box(&inst.refr_box, [5, 5, 5], 3.0, 2.0);
        for v in &mut interior.raw_emission.values {
            *v = rng.gen_range(-3.0..0.5);
        }
        for v in &mut interior.raw_absorption.values {
            *v = rng.gen_range(-3.0..0.5);
        }
        let b = ModelBundle {
            ior: &inst.ior,
            exterior: Exterior::Baked(&inst.background),
            interior: Some(&interior),
            refr_box: Some(inst.refr_box),
        };
        let mut log = TraceLog::default();
        trace_mixed_logged(&b, inst.origin, inst.dir, &inst.cfg, &mut log).unwrap();
        let w = Vec3::new(1.0, 0.5, 0.25);
        let seed_costate = Costate::radiance_seed(w);
        let mut sinks = GradSinks {
            ior: Some(GradBuffer::zeros(inst.ior.param_count())),
            interior_emission: Some(GradBuffer::zeros(interior.raw_emission.values.len())),
            interior_absorption: Some(GradBuffer::zeros(interior.raw_absorption.values.len())),
            ..Default::default()
        };
        integrate_adjoint(&b, &inst.cfg, &log, seed_costate, &mut sinks);

        // Interior emission gradients.
        let base: Vec<f32> = interior.raw_emission.values.clone();
        let mut loss = |params: &[f32]| {
            let mut med = interior.clone();
            med.raw_emission.values.copy_from_slice(params);
            let b2 = ModelBundle {
                interior: Some(&med),
                ..b
            };
            let out = trace_mixed(&b2, inst.origin, inst.dir, &inst.cfg).unwrap();
            w.dot(&out.radiance)
        };
        let gf = finite_diff_grad(&mut loss, &base, 1e-3);
        let rel = l2_rel(&sinks.interior_emission.as_ref().unwrap().data, &gf);
        assert!(rel < 1e-3, "interior emission vs fd rel {rel}");

        // Interior absorption gradients.
        let base: Vec<f32> = interior.raw_absorption.values.clone();
        let mut loss = |params: &[f32]| {
            let mut med = interior.clone();
            med.raw_absorption.values.copy_from_slice(params);
            let b2 = ModelBundle {
                interior: Some(&med),
                ..b
            };
            let out = trace_mixed(&b2, inst.origin, inst.dir, &inst.cfg).unwrap();
            w.dot(&out.radiance)
        };
        let gf = finite_diff_grad(&mut loss, &base, 1e-3);
        let rel = l2_rel(&sinks.interior_absorption.as_ref().unwrap().data, &gf);
        assert!(rel < 1e-3, "interior absorption vs fd rel {rel}");

        // IoR gradients with the interior active.
        let base: Vec<f32> = inst.ior.raw.values.clone();
        let mut loss = |params: &[f32]| {
            let mut ior = inst.ior.clone();
            ior.raw.values.copy_from_slice(params);
            let b2 = ModelBundle { ior: &ior, ..b };
            let out = trace_mixed(&b2, inst.origin, inst.dir, &inst.cfg).unwrap();
            w.dot(&out.radiance)
        };
        let gf = finite_diff_grad(&mut loss, &base, 1e-4);
        let rel = l2_rel(&sinks.ior.as_ref().unwrap().data, &gf);
        assert!(rel < 1e-3, "ior vs fd rel {rel}");
    }

    #[test]
    fn learnable_exterior_gradients_match_fd() {
        let mut rng = StdRng::seed_from_u64(31);
        let dom = RefractiveBox::new(Vec3::new(-1.5, -1.5, -1.5), Vec3::new(1.5, 1.5, 1.5));
        let mut ea = LearnableEa::init_on_box(&dom, [6, 6, 6], 2.0, 1.5);
        for v in &mut ea.raw_emission.values {
            *v = rng.gen_range(-2.0..1.0);
        }
        for v in &mut ea.raw_absorption.values {
            *v = rng.gen_range(-2.0..0.5);
        }
        let mask = RefractiveBox::new(Vec3::new(-0.3, -0.3, -0.3), Vec3::new(0.3, 0.3, 0.3));
        let ior = IorField::init_on_box(mask.min, mask.max, [4, 4, 4], -10.0);
        let cfg = TraceConfig {
            far_bound: 4.0,
            ..TraceConfig::default()
        };
        let origin = Vec3::new(0.1, 0.07, -1.9);
        let dir = Vec3::new(-0.05, 0.03, 1.0).normalize();

        let masked = MaskedEa::new(&ea, Some(mask));
        let b = ModelBundle {
            ior: &ior,
            exterior: Exterior::Learnable(&masked),
            interior: None,
            refr_box: None,
        };
        let mut log = TraceLog::default();
        trace_mixed_logged(&b, origin, dir, &cfg, &mut log).unwrap();
        let w = Vec3::new(0.8, -0.2, 0.5);
        let mut sinks = GradSinks {
            exterior_emission: Some(GradBuffer::zeros(ea.raw_emission.values.len())),
            exterior_absorption: Some(GradBuffer::zeros(ea.raw_absorption.values.len())),
            ..Default::default()
        };
        integrate_adjoint(&b, &cfg, &log, Costate::radiance_seed(w), &mut sinks);

        let base: Vec<f32> = ea.raw_absorption.values.clone();
        let mut loss = |params: &[f32]| {
            let mut med = ea.clone();
            med.raw_absorption.values.copy_from_slice(params);
            let masked = MaskedEa::new(&med, Some(mask));
            let b2 = ModelBundle {
                ior: &ior,
                exterior: Exterior::Learnable(&masked),
                interior: None,
                refr_box: None,
            };
            let out = trace_mixed(&b2, origin, dir, &cfg).unwrap();
            w.dot(&out.radiance)
        };
        let gf = finite_diff_grad(&mut loss, &base, 1e-3);
        let rel = l2_rel(&sinks.exterior_absorption.as_ref().unwrap().data, &gf);
        assert!(rel < 1e-3, "exterior absorption vs fd rel {rel}");
    }

    #[test]
    fn zero_seed_zero_gradients_and_linearity() {
        let inst = make_instance(13);
        let b = bundle(&inst);
        let mut log = TraceLog::default();
        trace_mixed_logged(&b, inst.origin, inst.dir, &inst.cfg, &mut log).unwrap();

        let mut sinks = GradSinks::for_ior(inst.ior.param_count());
        let a0 = integrate_adjoint(&b, &inst.cfg, &log, Costate::zeros(), &mut sinks);
        assert_eq!(sinks.ior.as_ref().unwrap().max_abs(), 0.0);
        assert_eq!(a0.p, Vec3::zeros());

        let u = Costate::radiance_seed(Vec3::new(1.0, 0.0, 0.5));
        let w = Costate::radiance_seed(Vec3::new(-0.3, 0.7, 0.1));
        let (alpha, beta) = (0.6, -1.7);
        let combo = Costate::radiance_seed(Vec3::new(
            alpha * 1.0 + beta * -0.3,
            alpha * 0.0 + beta * 0.7,
            alpha * 0.5 + beta * 0.1,
        ));
        let run = |seed: Costate| {
            let mut s = GradSinks::for_ior(inst.ior.param_count());
            integrate_adjoint(&b, &inst.cfg, &log, seed, &mut s);
            s.ior.unwrap().data
        };
        let gu = run(u);
        let gw = run(w);
        let gc = run(combo);
        for i in 0..gu.len() {
            let lin = alpha * gu[i] + beta * gw[i];
            assert!(
                (gc[i] - lin).abs() <= 1e-10 * lin.abs().max(1e-6),
                "index {i}: {} vs {}",
                gc[i],
                lin
            );
        }
    }

    #[test]
    fn op_log_size_is_independent_of_step_count() {
        // The adjoint's input carries no per-step data: the op log has the
        // same shape whatever the step budget, while the tape grows.
        let inst = make_instance(17);
        let b = bundle(&inst);
        let coarse = TraceConfig {
            steps_inside: 32,
            ..inst.cfg
        };
        let fine = TraceConfig {
            steps_inside: 1024,
            ..inst.cfg
        };
        let mut log_coarse = TraceLog::default();
        trace_mixed_logged(&b, inst.origin, inst.dir, &coarse, &mut log_coarse).unwrap();
        let mut log_fine = TraceLog::default();
        trace_mixed_logged(&b, inst.origin, inst.dir, &fine, &mut log_fine).unwrap();
        assert_eq!(log_coarse.ops.len(), log_fine.ops.len());

        let mut tape_coarse = TraceTape::default();
        trace_mixed_taped(&b, inst.origin, inst.dir, &coarse, &mut tape_coarse).unwrap();
        let mut tape_fine = TraceTape::default();
        trace_mixed_taped(&b, inst.origin, inst.dir, &fine, &mut tape_fine).unwrap();
        let count = |t: &TraceTape| t.steps.iter().map(Vec::len).sum::<usize>();
        assert!(count(&tape_fine) > 20 * count(&tape_coarse));
    }
}

/// Spatial and parameter contributions of one straight-segment quadrature
/// step, given the upstreams on the sampled emission and absorption.
fn emit_ea_step(
    exterior: &Exterior,
    x: Vec3,
    t_mid: f64,
    u_q: Vec3,
    u_sigma: f64,
    a: &mut Costate,
    sinks: &mut GradSinks,
) {
    let (dq, dsigma) = exterior.sample_spatial_gradient(x);
    let a_x = dsigma * u_sigma + dq[0] * u_q.x + dq[1] * u_q.y + dq[2] * u_q.z;
    a.p += a_x;
    a.v += a_x * t_mid;
    match exterior {
        Exterior::Learnable(m) => {
            if !m.mask.as_ref().is_some_and(|b| b.contains(x)) {
                if let Some(s) = sinks.exterior_emission.as_mut() {
                    m.inner.vjp_emission(x, u_q, s);
                }
                if let Some(s) = sinks.exterior_absorption.as_mut() {
                    m.inner.vjp_absorption(x, u_sigma, s);
                }
            }
        }
        Exterior::Baked(_) => {}
        _ => {}
    }
}
