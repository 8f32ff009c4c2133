//! Light-transport models over a position-momentum-radiance-transmittance
//! ray state: straight emission-absorption, curved eikonal propagation, the
//! complete refractive model, and the split-segment mixed tracer.

pub(crate) mod trace;

pub use trace::{
    render_image, trace_mixed, trace_mixed_logged, trace_mixed_taped, Exterior, ModelBundle,
    OpKind, OpRecord, RenderOutput, TraceError, TraceLog, TraceOutput, TraceTape,
};

use crate::fields::ea::EaSource;
use crate::fields::ior::Refractive;
use crate::Vec3;

/// Ray state: position, momentum (|v| = n along exact eikonal trajectories),
/// accumulated radiance, and remaining transmittance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayState {
    pub p: Vec3,
    pub v: Vec3,
    pub radiance: Vec3,
    pub transmittance: f64,
}

impl RayState {
    pub fn at_origin(p: Vec3, dir: Vec3) -> Self {
        RayState {
            p,
            v: dir,
            radiance: Vec3::zeros(),
            transmittance: 1.0,
        }
    }

    pub fn zeros() -> Self {
        RayState {
            p: Vec3::zeros(),
            v: Vec3::zeros(),
            radiance: Vec3::zeros(),
            transmittance: 0.0,
        }
    }

    #[inline]
    pub fn to_array(&self) -> [f64; 10] {
        [
            self.p.x,
            self.p.y,
            self.p.z,
            self.v.x,
            self.v.y,
            self.v.z,
            self.radiance.x,
            self.radiance.y,
            self.radiance.z,
            self.transmittance,
        ]
    }

    #[inline]
    pub fn from_array(a: &[f64; 10]) -> Self {
        RayState {
            p: Vec3::new(a[0], a[1], a[2]),
            v: Vec3::new(a[3], a[4], a[5]),
            radiance: Vec3::new(a[6], a[7], a[8]),
            transmittance: a[9],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }
}

/// The axis-aligned region that exclusively contains refractive content.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RefractiveBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl RefractiveBox {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        assert!(
            (0..3).all(|a| min[a] < max[a]),
            "box min must be strictly below max"
        );
        RefractiveBox { min, max }
    }

    #[inline]
    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    #[inline]
    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }
}

/// Slab-method ray/box intersection. Returns the parametric range clipped to
/// t >= 0, or `None` when the box is missed or entirely behind the origin.
pub fn intersect_box(origin: Vec3, direction: Vec3, b: &RefractiveBox) -> Option<(f64, f64)> {
    let mut t_min = f64::NEG_INFINITY;
    let mut t_max = f64::INFINITY;
    for a in 0..3 {
        let d = direction[a];
        if d.abs() < 1e-15 {
            if origin[a] < b.min[a] || origin[a] > b.max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let (t0, t1) = {
            let t0 = (b.min[a] - origin[a]) * inv;
            let t1 = (b.max[a] - origin[a]) * inv;
            if t0 <= t1 {
                (t0, t1)
            } else {
                (t1, t0)
            }
        };
        t_min = t_min.max(t0);
        t_max = t_max.min(t1);
        if t_min > t_max {
            return None;
        }
    }
    if t_max < 0.0 {
        return None;
    }
    Some((t_min.max(0.0), t_max))
}

/// Fixed-step budgets for the split-segment tracer.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TraceConfig {
    /// ODE step budget across one box traversal; h = diag(box) / steps_inside.
    pub steps_inside: usize,
    /// Quadrature steps across the full far range for straight segments
    /// (512 when an interior radiance field is active).
    pub steps_outside: usize,
    /// Cap on repeated box entries of a single ray.
    pub max_reentries: usize,
    /// A ray is flagged trapped once its in-box arc exceeds
    /// `arc_budget_factor * diag(box)`.
    pub arc_budget_factor: f64,
    /// Rays terminate at this distance along the path.
    pub far_bound: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            steps_inside: 128,
            steps_outside: 128,
            max_reentries: 4,
            arc_budget_factor: 4.0,
            far_bound: 12.0,
        }
    }
}

/// Straight-ray emission-absorption derivative:
/// dp/ds = v, dv/ds = 0, dT/ds = -sigma T, dL/ds = T q.
pub fn rhs_ea(state: &RayState, medium: &impl EaSource) -> RayState {
    let sigma = medium.absorption(state.p);
    let q = medium.emission(state.p);
    RayState {
        p: state.v,
        v: Vec3::zeros(),
        radiance: q * state.transmittance,
        transmittance: -sigma * state.transmittance,
    }
}

/// Hamiltonian ray-bending derivative shared by the eikonal and complete
/// models: dp/ds = v/n, dv/ds = grad n.
pub fn rhs_hamilton(p: Vec3, v: Vec3, ior: &impl Refractive) -> (Vec3, Vec3) {
    let (n, grad) = ior.ior_and_gradient(p);
    (v / n, grad)
}

/// Eikonal-only derivative: bends but neither emits nor absorbs.
pub fn rhs_eikonal(state: &RayState, ior: &impl Refractive) -> RayState {
    let (dp, dv) = rhs_hamilton(state.p, state.v, ior);
    RayState {
        p: dp,
        v: dv,
        radiance: Vec3::zeros(),
        transmittance: 0.0,
    }
}

/// Complete model: Hamiltonian bending with emission-absorption integrated as
/// basic radiance. The radiance component carries Lb = L/n^2 with
/// dLb/ds = T q / n^2; with the camera in an n = 1 medium the final L equals Lb.
pub fn rhs_complete(state: &RayState, ior: &impl Refractive, medium: &impl EaSource) -> RayState {
    let (n, grad) = ior.ior_and_gradient(state.p);
    let sigma = medium.absorption(state.p);
    let q = medium.emission(state.p);
    RayState {
        p: state.v / n,
        v: grad,
        radiance: q * (state.transmittance / (n * n)),
        transmittance: -sigma * state.transmittance,
    }
}
