//! Constant-IoR baseline: locate front/back surfaces along each training ray
//! by opacity accumulation, assign a constant index between them, and fit
//! the raw grid to those point targets by regularized least squares.

use crate::fields::grid::GridField;
use crate::fields::ior::{softplus_inv, IorField};
use crate::recon::TrainRay;
use crate::transport::{intersect_box, RefractiveBox};
use crate::Vec3;

/// Point targets per ray segment.
const SAMPLES_PER_RAY: usize = 10;
/// Opacity-march steps across the box chord.
const MARCH_STEPS: usize = 64;
/// Raw target for n = 1 regions (softplus_inv needs a strictly positive
/// excess; 1e-5 keeps n - 1 below render significance).
const VACUUM_EXCESS: f64 = 1e-5;

/// Builds the baseline IoR field from a fitted absorption grid: constant
/// `constant_n` between the per-ray front/back surfaces (opacity threshold
/// `tau` on accumulated optical depth), n = 1 elsewhere.
pub fn baseline_trivial(
    absorption: &GridField,
    rays: &[TrainRay],
    refr_box: &RefractiveBox,
    constant_n: f64,
    tau: f64,
    dims: [usize; 3],
) -> IorField {
    assert_eq!(absorption.channels, 1);
    let mut samples: Vec<(Vec3, f64)> = Vec::new();
    for ray in rays {
        let Some((t0, t1)) = intersect_box(ray.origin, ray.dir, refr_box) else {
            continue;
        };
        if t1 <= t0 {
            continue;
        }
        let h = (t1 - t0) / MARCH_STEPS as f64;
        // Forward march: first crossing of the opacity threshold.
        let mut depth = 0.0;
        let mut front = None;
        for k in 0..MARCH_STEPS {
            let t = t0 + (k as f64 + 0.5) * h;
            let sigma = absorption.sample_scalar(ray.origin + ray.dir * t).max(0.0) as f64;
            depth += sigma * h;
            if depth > tau {
                front = Some(t);
                break;
            }
        }
        // Backward march from the far side.
        let mut back = None;
        if front.is_some() {
            let mut depth = 0.0;
            for k in (0..MARCH_STEPS).rev() {
                let t = t0 + (k as f64 + 0.5) * h;
                let sigma = absorption.sample_scalar(ray.origin + ray.dir * t).max(0.0) as f64;
                depth += sigma * h;
                if depth > tau {
                    back = Some(t);
                    break;
                }
            }
        }
        let interval = match (front, back) {
            (Some(f), Some(b)) if b >= f => Some((f, b)),
            _ => None,
        };
        for k in 0..SAMPLES_PER_RAY {
            let t = t0 + (t1 - t0) * (k as f64 + 0.5) / SAMPLES_PER_RAY as f64;
            let inside = interval.is_some_and(|(f, b)| t >= f && t <= b);
            let excess_target = if inside { constant_n - 1.0 } else { 0.0 };
            samples.push((ray.origin + ray.dir * t, excess_target));
        }
    }

    fit_excess_least_squares(refr_box, dims, &samples)
}

/// Regularized linear least squares on the index excess e = n - 1 (fitting
/// in raw space would ring badly at the surface, where the raw targets jump
/// by ten units): minimize sum_s (interp(e, x_s) - e_s)^2 + lambda |e|^2,
/// solved with conjugate gradients on the normal equations, then convert the
/// fitted node values through softplus_inv into the raw grid.
fn fit_excess_least_squares(
    refr_box: &RefractiveBox,
    dims: [usize; 3],
    samples: &[(Vec3, f64)],
) -> IorField {
    let prior_raw = softplus_inv(VACUUM_EXCESS);
    let mut field = IorField::init_on_box(refr_box.min, refr_box.max, dims, prior_raw as f32);
    let n = field.param_count();
    if samples.is_empty() {
        return field;
    }
    let lambda = 1e-4 * (samples.len() as f64 / n as f64).max(1e-2);

    // Precompute sparse interpolation rows.
    let mut rows: Vec<([usize; 8], [f64; 8], f64)> = Vec::with_capacity(samples.len());
    for (p, r) in samples {
        let cell = field.raw.locate(*p);
        let idx = field.raw.corner_indices(&cell, 0);
        let w = GridField::corner_weights(&cell);
        rows.push((idx, w, *r));
    }

    // Normal equations: (W^T W + lambda I) x = W^T r.
    let matvec = |x: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (idx, w, _) in &rows {
            let mut dot = 0.0;
            for c in 0..8 {
                dot += w[c] * x[idx[c]];
            }
            for c in 0..8 {
                out[idx[c]] += w[c] * dot;
            }
        }
        for i in 0..x.len() {
            out[i] += lambda * x[i];
        }
    };
    let mut b = vec![0.0f64; n];
    for (idx, w, r) in &rows {
        for c in 0..8 {
            b[idx[c]] += w[c] * r;
        }
    }

    let mut x = vec![0.0f64; n];
    let mut ax = vec![0.0; n];
    matvec(&x, &mut ax);
    let mut res: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut dir = res.clone();
    let mut rs_old: f64 = res.iter().map(|v| v * v).sum();
    let tol = 1e-12 * rs_old.max(1.0);
    let mut adir = vec![0.0; n];
    for _ in 0..400 {
        if rs_old <= tol {
            break;
        }
        matvec(&dir, &mut adir);
        let denom: f64 = dir.iter().zip(&adir).map(|(d, a)| d * a).sum();
        let alpha = rs_old / denom;
        for i in 0..n {
            x[i] += alpha * dir[i];
            res[i] -= alpha * adir[i];
        }
        let rs_new: f64 = res.iter().map(|v| v * v).sum();
        let beta = rs_new / rs_old;
        for i in 0..n {
            dir[i] = res[i] + beta * dir[i];
        }
        rs_old = rs_new;
    }
    for (dst, src) in field.raw.values.iter_mut().zip(&x) {
        *dst = softplus_inv(src.max(VACUUM_EXCESS * 0.1)) as f32;
    }
    field
}
