//! Split-segment curved-ray tracing.
//!
//! A ray alternates between straight emission-absorption marching outside the
//! refractive box and fixed-step RK4 integration of the Hamiltonian system
//! inside it. Total internal reflection emerges from the ODE; there is no
//! surface logic. Straight-segment quadrature is anchored to the accumulated
//! arc length from the ray origin so that segment splits do not move sample
//! points.

use crate::fields::ea::{BackdropSet, EaSource, GridEa, LearnableEa, MaskedEa};
use crate::fields::ior::Refractive;
use crate::imageio::ImageF;
use crate::scene::Camera;
use crate::transport::{intersect_box, RayState, RefractiveBox, TraceConfig};
use crate::Vec3;
use rayon::prelude::*;
use thiserror::Error;

/// Transmittance below this is treated as opaque and marching stops early.
pub(crate) const T_CUTOFF: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("non-finite ray state at arc length {s:.4} (field corruption?)")]
    NonFinite { s: f64 },
}

/// Exterior emission-absorption medium for straight segments.
#[derive(Clone, Copy)]
pub enum Exterior<'a> {
    Empty,
    /// Analytic masked backdrops, marched with closed-form slab crossings.
    Analytic(&'a MaskedEa<BackdropSet>),
    /// Baked (masked at bake time) value grids, fixed-step quadrature.
    Baked(&'a GridEa),
    /// Learnable masked grids, fixed-step quadrature.
    Learnable(&'a MaskedEa<&'a LearnableEa>),
}

/// Everything a trace reads: the IoR field, the exterior medium, an optional
/// interior radiance medium defined on the box, and the box itself.
#[derive(Clone, Copy)]
pub struct ModelBundle<'a, R: Refractive> {
    pub ior: &'a R,
    pub exterior: Exterior<'a>,
    pub interior: Option<&'a LearnableEa>,
    pub refr_box: Option<RefractiveBox>,
}

#[derive(Debug, Clone, Copy)]
pub enum OpKind {
    /// Straight EA march from `z_in.p` along `z_in.v` over `length`;
    /// `s_anchor` is the accumulated arc length at segment start.
    Ea { s_anchor: f64, length: f64 },
    /// Momentum scaling at box entry: v <- n(p) v.
    Enter,
    /// Fixed-step integration inside the box.
    Inside { steps: u32, h: f64 },
    /// Momentum renormalization at box exit: v <- v/|v|.
    Exit,
}

/// One traversal op together with its input state. A trace is a handful of
/// ops regardless of step counts, which is what makes the constant-memory
/// backward replay possible.
#[derive(Debug, Clone, Copy)]
pub struct OpRecord {
    pub kind: OpKind,
    pub z_in: RayState,
}

#[derive(Debug, Clone, Default)]
pub struct TraceLog {
    pub ops: Vec<OpRecord>,
    pub final_state: Option<RayState>,
}

impl TraceLog {
    pub fn clear(&mut self) {
        self.ops.clear();
        self.final_state = None;
    }
}

/// Per-step input states for every op, for recorded (memory-linear) backprop.
#[derive(Debug, Clone, Default)]
pub struct TraceTape {
    pub log: TraceLog,
    /// Parallel to `log.ops`; non-empty only for `Inside` ops.
    pub steps: Vec<Vec<RayState>>,
}

impl TraceTape {
    pub fn clear(&mut self) {
        self.log.clear();
        self.steps.clear();
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TraceOutput {
    pub radiance: Vec3,
    pub transmittance: f64,
    pub trapped: bool,
    /// State at termination (far bound, or the trapping point).
    pub final_state: RayState,
}

trait Recorder {
    fn op(&mut self, rec: OpRecord);
    fn step(&mut self, z: &RayState);
    fn finish(&mut self, z: &RayState);
}

struct NoRecord;
impl Recorder for NoRecord {
    fn op(&mut self, _rec: OpRecord) {}
    fn step(&mut self, _z: &RayState) {}
    fn finish(&mut self, _z: &RayState) {}
}

impl Recorder for &mut TraceLog {
    fn op(&mut self, rec: OpRecord) {
        self.ops.push(rec);
    }
    fn step(&mut self, _z: &RayState) {}
    fn finish(&mut self, z: &RayState) {
        self.final_state = Some(*z);
    }
}

impl Recorder for &mut TraceTape {
    fn op(&mut self, rec: OpRecord) {
        self.log.ops.push(rec);
        if self.steps.len() < self.log.ops.len() {
            self.steps.push(Vec::new());
        }
    }
    fn step(&mut self, z: &RayState) {
        // Steps for the op currently being integrated are pushed before its
        // OpRecord; keep the parallel vector in sync.
        if self.steps.len() == self.log.ops.len() {
            self.steps.push(Vec::new());
        }
        self.steps.last_mut().unwrap().push(*z);
    }
    fn finish(&mut self, z: &RayState) {
        self.log.final_state = Some(*z);
    }
}

/// Exact transmittance decay and emission gain over a constant-field step:
/// returns (exp(-sigma len), (1 - exp(-sigma len)) / sigma). The gain is the
/// closed-form radiance weight for dL/ds = T q under dT/ds = -sigma T.
#[inline]
pub(crate) fn decay_gain(sigma: f64, len: f64) -> (f64, f64) {
    let x = sigma * len;
    if x < 1e-7 {
        (1.0 - x + 0.5 * x * x, len * (1.0 - 0.5 * x + x * x / 6.0))
    } else {
        let d = (-x).exp();
        (d, (1.0 - d) / sigma)
    }
}

/// d/d sigma of the gain term in [`decay_gain`].
#[inline]
pub(crate) fn gain_dsigma(sigma: f64, len: f64) -> f64 {
    let x = sigma * len;
    if x < 1e-5 {
        -0.5 * len * len + sigma * len * len * len / 3.0
    } else {
        let d = (-x).exp();
        (len * d * sigma - (1.0 - d)) / (sigma * sigma)
    }
}

impl<'a> Exterior<'a> {
    #[inline]
    pub(crate) fn sample(&self, p: Vec3) -> (Vec3, f64) {
        match self {
            Exterior::Empty => (Vec3::zeros(), 0.0),
            Exterior::Analytic(m) => (m.emission(p), m.absorption(p)),
            Exterior::Baked(g) => (g.emission(p), g.absorption(p)),
            Exterior::Learnable(l) => (l.emission(p), l.absorption(p)),
        }
    }

    /// Spatial gradients of the sampled emission (per channel) and
    /// absorption, consistent with [`Exterior::sample`]: zero outside the
    /// grid domain and inside the mask.
    pub(crate) fn sample_spatial_gradient(&self, p: Vec3) -> ([Vec3; 3], Vec3) {
        match self {
            Exterior::Empty | Exterior::Analytic(_) => ([Vec3::zeros(); 3], Vec3::zeros()),
            Exterior::Baked(g) => {
                if g.domain().contains(p) {
                    (g.emission.gradient_rgb(p), g.absorption.gradient_scalar(p))
                } else {
                    ([Vec3::zeros(); 3], Vec3::zeros())
                }
            }
            Exterior::Learnable(l) => {
                if l.mask.as_ref().is_some_and(|b| b.contains(p)) {
                    return ([Vec3::zeros(); 3], Vec3::zeros());
                }
                let (_q, _s, dq, dsigma) = l.inner.eval_with_spatial(p);
                (dq, dsigma)
            }
        }
    }
}

/// Enumerates the quadrature sub-intervals a straight-segment march visits,
/// in order: the global step grid (step `h_out`, anchored at the ray origin)
/// intersected with the segment. The grid depends only on the segment's arc
/// range, never on where the ray is in space, so sample placement is smooth
/// under field and ray perturbations. The callback receives the sub-interval
/// midpoint (as a local segment parameter) and its length, and returns false
/// to stop early (opaque cutoff).
pub(crate) fn quadrature_intervals(
    s_anchor: f64,
    length: f64,
    h_out: f64,
    mut visit: impl FnMut(f64, f64) -> bool,
) {
    if length <= 0.0 {
        return;
    }
    let s_lo = s_anchor;
    let s_hi = s_anchor + length;
    let k0 = (s_lo / h_out).floor() as i64;
    let k1 = (s_hi / h_out).ceil() as i64;
    for k in k0..k1 {
        let a = (k as f64 * h_out).max(s_lo);
        let b = ((k + 1) as f64 * h_out).min(s_hi);
        let len = b - a;
        if len <= 0.0 {
            continue;
        }
        let t_mid = 0.5 * (a + b) - s_anchor;
        if !visit(t_mid, len) {
            return;
        }
    }
}

/// Marches (T, L) along a straight segment. Quadrature backends use the
/// global step grid (step = far_bound / steps_outside) anchored at the ray
/// origin, so a segment split at the box boundary samples the same points as
/// an unsplit march. Analytic backdrops use exact slab crossings and are
/// split-invariant by construction.
pub(crate) fn march_straight(
    exterior: &Exterior,
    z: &mut RayState,
    dir: Vec3,
    s_anchor: f64,
    length: f64,
    h_out: f64,
) {
    if length <= 0.0 || z.transmittance < T_CUTOFF {
        return;
    }
    match exterior {
        Exterior::Empty => {}
        Exterior::Analytic(masked) => {
            // Collect plane-slab crossings in local t, process front to back.
            // The texture is sampled where the ray enters the slab: opaque
            // slabs saturate right at entry, which keeps analytic and baked
            // renders of the same scene aligned.
            let mut crossings: Vec<(f64, f64, usize)> = Vec::new();
            for (i, plane) in masked.inner.planes.iter().enumerate() {
                if let Some((lo, hi, _mid)) = plane.crossing(z.p, dir, 0.0, length) {
                    crossings.push((lo, hi, i));
                }
            }
            crossings.sort_by(|a, b| a.0.total_cmp(&b.0));
            for (lo, hi, i) in crossings {
                // Nudge the sample point into the slab; the exact entry can
                // land an ulp outside and fail the slab test.
                let x_entry = z.p + dir * (lo + (hi - lo) * 1e-6);
                let plane = &masked.inner.planes[i];
                if masked.mask.as_ref().is_some_and(|b| b.contains(x_entry))
                    || !plane.active_at(x_entry)
                {
                    continue;
                }
                let (d, g) = decay_gain(plane.sigma, hi - lo);
                let q = plane.texture_at(x_entry) * plane.sigma;
                z.radiance += q * (z.transmittance * g);
                z.transmittance *= d;
                if z.transmittance < T_CUTOFF {
                    return;
                }
            }
        }
        Exterior::Baked(_) | Exterior::Learnable(_) => {
            let p0 = z.p;
            quadrature_intervals(s_anchor, length, h_out, |t_mid, len| {
                let (q, sigma) = exterior.sample(p0 + dir * t_mid);
                let (d, g) = decay_gain(sigma, len);
                z.radiance += q * (z.transmittance * g);
                z.transmittance *= d;
                z.transmittance >= T_CUTOFF
            });
        }
    }
}

/// One in-box step: interior emission-absorption accumulated as basic
/// radiance at the half-step position, then an RK4 update of (p, v).
#[inline]
pub(crate) fn inside_step<R: Refractive>(
    ior: &R,
    interior: Option<&LearnableEa>,
    z: &RayState,
    h: f64,
) -> RayState {
    let mut radiance = z.radiance;
    let mut transmittance = z.transmittance;
    if let Some(medium) = interior {
        let n0 = ior.ior(z.p);
        let x = z.p + z.v * (0.5 * h / n0);
        let sigma = medium.absorption(x);
        let q = medium.emission(x);
        if sigma > 0.0 || q != Vec3::zeros() {
            let nx = ior.ior(x);
            let (d, g) = decay_gain(sigma, h);
            radiance += q * (transmittance * g / (nx * nx));
            transmittance *= d;
        }
    }
    let (p, v) = rk4_pv(ior, z.p, z.v, h);
    RayState {
        p,
        v,
        radiance,
        transmittance,
    }
}

/// Classic RK4 update of the Hamiltonian subsystem dp/ds = v/n, dv/ds = grad n.
#[inline]
pub(crate) fn rk4_pv<R: Refractive>(ior: &R, p: Vec3, v: Vec3, h: f64) -> (Vec3, Vec3) {
    let f = |p: Vec3, v: Vec3| {
        let (n, g) = ior.ior_and_gradient(p);
        (v / n, g)
    };
    let (k1p, k1v) = f(p, v);
    let (k2p, k2v) = f(p + k1p * (0.5 * h), v + k1v * (0.5 * h));
    let (k3p, k3v) = f(p + k2p * (0.5 * h), v + k2v * (0.5 * h));
    let (k4p, k4v) = f(p + k3p * h, v + k3v * h);
    (
        p + (k1p + (k2p + k3p) * 2.0 + k4p) * (h / 6.0),
        v + (k1v + (k2v + k3v) * 2.0 + k4v) * (h / 6.0),
    )
}

fn trace_impl<R: Refractive, Rec: Recorder>(
    model: &ModelBundle<R>,
    origin: Vec3,
    dir: Vec3,
    cfg: &TraceConfig,
    mut rec: Rec,
) -> Result<TraceOutput, TraceError> {
    debug_assert!((dir.norm() - 1.0).abs() < 1e-9, "direction must be unit");
    let h_out = cfg.far_bound / cfg.steps_outside as f64;
    let mut z = RayState::at_origin(origin, dir);
    let mut s_global = 0.0f64;
    let mut trapped = false;

    if let Some(b) = &model.refr_box {
        for _entry in 0..=cfg.max_reentries {
            let Some((t_enter, _)) = intersect_box(z.p, z.v, b) else {
                break;
            };
            let remaining = cfg.far_bound - s_global;
            if t_enter >= remaining {
                break;
            }
            // (a) Straight march up to the box.
            if t_enter > 0.0 {
                rec.op(OpRecord {
                    kind: OpKind::Ea {
                        s_anchor: s_global,
                        length: t_enter,
                    },
                    z_in: z,
                });
                let d = z.v;
                march_straight(&model.exterior, &mut z, d, s_global, t_enter, h_out);
                z.p += d * t_enter;
                s_global += t_enter;
            }
            // The advance can land a rounding ulp outside the face, which
            // would make the containment loop below exit with zero steps;
            // snap the entry point onto the box.
            for a in 0..3 {
                z.p[a] = z.p[a].clamp(b.min[a], b.max[a]);
            }
            // (b) Entry: v <- n(p) * direction.
            rec.op(OpRecord {
                kind: OpKind::Enter,
                z_in: z,
            });
            z.v *= model.ior.ior(z.p);

            let h = b.diagonal() / cfg.steps_inside as f64;
            let max_steps =
                (cfg.arc_budget_factor * cfg.steps_inside as f64).ceil() as u32;
            let z_inside_in = z;
            let mut steps = 0u32;
            while b.contains(z.p) {
                if steps >= max_steps {
                    trapped = true;
                    break;
                }
                rec.step(&z);
                z = inside_step(model.ior, model.interior, &z, h);
                steps += 1;
                s_global += h;
                if !z.is_finite() {
                    return Err(TraceError::NonFinite { s: s_global });
                }
            }
            rec.op(OpRecord {
                kind: OpKind::Inside { steps, h },
                z_in: z_inside_in,
            });
            if trapped {
                rec.finish(&z);
                return Ok(TraceOutput {
                    radiance: z.radiance,
                    transmittance: z.transmittance,
                    trapped: true,
                    final_state: z,
                });
            }
            // (c) Exit: renormalize to a unit direction and resume straight.
            rec.op(OpRecord {
                kind: OpKind::Exit,
                z_in: z,
            });
            z.v = z.v.normalize();
        }
    }

    // (e) Final straight march to the far bound.
    let remaining = cfg.far_bound - s_global;
    if remaining > 0.0 {
        rec.op(OpRecord {
            kind: OpKind::Ea {
                s_anchor: s_global,
                length: remaining,
            },
            z_in: z,
        });
        let d = z.v;
        march_straight(&model.exterior, &mut z, d, s_global, remaining, h_out);
        z.p += d * remaining;
    }
    rec.finish(&z);
    Ok(TraceOutput {
        radiance: z.radiance,
        transmittance: z.transmittance,
        trapped: false,
        final_state: z,
    })
}

/// Traces one ray through the mixed model. The ray origin must lie outside
/// the refractive box.
pub fn trace_mixed<R: Refractive>(
    model: &ModelBundle<R>,
    origin: Vec3,
    dir: Vec3,
    cfg: &TraceConfig,
) -> Result<TraceOutput, TraceError> {
    trace_impl(model, origin, dir, cfg, NoRecord)
}

/// Traces and records the op log needed for constant-memory backward replay.
pub fn trace_mixed_logged<R: Refractive>(
    model: &ModelBundle<R>,
    origin: Vec3,
    dir: Vec3,
    cfg: &TraceConfig,
    log: &mut TraceLog,
) -> Result<TraceOutput, TraceError> {
    log.clear();
    trace_impl(model, origin, dir, cfg, log)
}

/// Traces and records per-step states (memory linear in step count).
pub fn trace_mixed_taped<R: Refractive>(
    model: &ModelBundle<R>,
    origin: Vec3,
    dir: Vec3,
    cfg: &TraceConfig,
    tape: &mut TraceTape,
) -> Result<TraceOutput, TraceError> {
    tape.clear();
    trace_impl(model, origin, dir, cfg, tape)
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: ImageF,
    pub transmittance: ImageF,
    pub trapped: Vec<bool>,
}

/// Renders one image, one deterministic trace per pixel. Pixels are
/// independent; rows are traced in parallel and reassembled in order.
pub fn render_image<R: Refractive + Sync>(
    model: &ModelBundle<R>,
    camera: &Camera,
    cfg: &TraceConfig,
) -> Result<RenderOutput, TraceError> {
    let (w, h) = (camera.resolution[0], camera.resolution[1]);
    let rows: Result<Vec<_>, TraceError> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut color = Vec::with_capacity(w * 3);
            let mut trans = Vec::with_capacity(w);
            let mut trapped = Vec::with_capacity(w);
            for x in 0..w {
                let (origin, dir) = camera.pixel_ray(x, y);
                let out = trace_mixed(model, origin, dir, cfg)?;
                for c in 0..3 {
                    color.push(out.radiance[c] as f32);
                }
                trans.push(out.transmittance as f32);
                trapped.push(out.trapped);
            }
            Ok((color, trans, trapped))
        })
        .collect();
    let rows = rows?;
    let mut color = Vec::with_capacity(w * h * 3);
    let mut trans = Vec::with_capacity(w * h);
    let mut trapped = Vec::with_capacity(w * h);
    for (c, t, f) in rows {
        color.extend(c);
        trans.extend(t);
        trapped.extend(f);
    }
    Ok(RenderOutput {
        color: ImageF::from_data(w, h, 3, color),
        transmittance: ImageF::from_data(w, h, 1, trans),
        trapped,
    })
}
