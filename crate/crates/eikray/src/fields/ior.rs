//! Index-of-refraction fields.
//!
//! The learnable field stores raw grid values mapped through
//! `n = 1 + softplus(raw)`, which keeps n strictly above 1 for every
//! parameter value (no division blow-up in dp/ds = v/n). Analytic fields
//! cover validation scenes.

use crate::fields::grid::{GradSink, GridField};
use crate::Vec3;

/// Numerically stable ln(1 + e^x).
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// d softplus / dx = sigmoid(x).
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`]; requires y > 0.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0, "softplus_inv needs y > 0");
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Anything that can report an index of refraction and its spatial gradient.
pub trait Refractive {
    fn ior(&self, p: Vec3) -> f64;
    fn ior_gradient(&self, p: Vec3) -> Vec3;
    #[inline]
    fn ior_and_gradient(&self, p: Vec3) -> (f64, Vec3) {
        (self.ior(p), self.ior_gradient(p))
    }
}

/// Raw value used when (re)initializing IoR grids: n = 1 + softplus(-10),
/// about 1.000045, so freshly initialized rays are effectively straight.
pub const RAW_INIT: f32 = -10.0;

/// Learnable IoR field: a single-channel raw grid mapped through
/// `n(p) = 1 + softplus(interp(raw, p))`.
#[derive(Debug, Clone)]
pub struct IorField {
    pub raw: GridField,
}

impl IorField {
    pub fn new(raw: GridField) -> Self {
        assert_eq!(raw.channels, 1, "IoR raw grid is single channel");
        IorField { raw }
    }

    /// Constant-raw initialization covering the given world box exactly.
    pub fn init_on_box(min: Vec3, max: Vec3, dims: [usize; 3], raw_value: f32) -> Self {
        let grid = GridField::constant(min, max - min, dims, 1, raw_value);
        IorField { raw: grid }
    }

    #[inline]
    pub fn param_count(&self) -> usize {
        self.raw.values.len()
    }

    /// Chain-rule reverse pass for one evaluation point: `up_n` seeds the
    /// sampled n, `up_grad` seeds the sampled gradient of n. Contributions go
    /// to the 8 enclosing raw corners.
    pub fn vjp(&self, p: Vec3, up_n: f64, up_grad: Vec3, sink: &mut impl GradSink) {
        let cell = self.raw.locate(p);
        let idx = self.raw.corner_indices(&cell, 0);
        let w = GridField::corner_weights(&cell);
        let wg = self.raw.corner_weight_gradients(&cell);
        let mut r = 0.0;
        let mut grad_r = Vec3::zeros();
        for c in 0..8 {
            let v = self.raw.values[idx[c]] as f64;
            r += w[c] * v;
            grad_r += wg[c] * v;
        }
        let s = sigmoid(r);
        let ds = s * (1.0 - s);
        // n = 1 + softplus(r), grad n = sigmoid(r) * grad r:
        //   dn/dv_c      = s * w_c
        //   d(grad n)/dv_c = ds * w_c * grad_r + s * grad(w_c)
        let up_dot_gr = up_grad.dot(&grad_r);
        for c in 0..8 {
            let contrib = up_n * s * w[c] + ds * w[c] * up_dot_gr + s * up_grad.dot(&wg[c]);
            if contrib != 0.0 {
                sink.add(idx[c] as u32, contrib);
            }
        }
    }
}

/// Second-order local data for the adjoint: n, grad n, and enough of the
/// underlying interpolant to form Hessian-vector products. The trilinear
/// Hessian has zero diagonal; only the cross terms (xy, xz, yz) survive.
#[derive(Debug, Clone, Copy)]
pub struct IorJet {
    pub n: f64,
    pub grad_n: Vec3,
    sig: f64,
    dsig: f64,
    grad_r: Vec3,
    /// (H_xy, H_xz, H_yz) of the raw interpolant.
    hess_r: Vec3,
}

impl IorJet {
    /// (Hessian of n) * u, using Hn = sig'(r) grad_r grad_r^T + sig(r) Hr.
    #[inline]
    pub fn hess_times(&self, u: Vec3) -> Vec3 {
        let hr_u = Vec3::new(
            self.hess_r.x * u.y + self.hess_r.y * u.z,
            self.hess_r.x * u.x + self.hess_r.z * u.z,
            self.hess_r.y * u.x + self.hess_r.z * u.y,
        );
        self.grad_r * (self.dsig * self.grad_r.dot(&u)) + hr_u * self.sig
    }
}

impl IorField {
    pub fn jet(&self, p: Vec3) -> IorJet {
        let cell = self.raw.locate(p);
        let idx = self.raw.corner_indices(&cell, 0);
        let w = GridField::corner_weights(&cell);
        let s = self.raw.spacing();
        let [fx, fy, fz] = cell.frac;
        let gx = if cell.clamped[0] { 0.0 } else { 1.0 / s.x };
        let gy = if cell.clamped[1] { 0.0 } else { 1.0 / s.y };
        let gz = if cell.clamped[2] { 0.0 } else { 1.0 / s.z };
        let mut v = [0.0f64; 8];
        let mut r = 0.0;
        for c in 0..8 {
            v[c] = self.raw.values[idx[c]] as f64;
            r += w[c] * v[c];
        }
        // Corner-difference forms: exact zeros on constant cells.
        let grad_r = Vec3::new(
            gx * ((1.0 - fy) * (1.0 - fz) * (v[1] - v[0])
                + fy * (1.0 - fz) * (v[3] - v[2])
                + (1.0 - fy) * fz * (v[5] - v[4])
                + fy * fz * (v[7] - v[6])),
            gy * ((1.0 - fx) * (1.0 - fz) * (v[2] - v[0])
                + fx * (1.0 - fz) * (v[3] - v[1])
                + (1.0 - fx) * fz * (v[6] - v[4])
                + fx * fz * (v[7] - v[5])),
            gz * ((1.0 - fx) * (1.0 - fy) * (v[4] - v[0])
                + fx * (1.0 - fy) * (v[5] - v[1])
                + (1.0 - fx) * fy * (v[6] - v[2])
                + fx * fy * (v[7] - v[3])),
        );
        let hess_r = Vec3::new(
            gx * gy * ((1.0 - fz) * ((v[3] - v[2]) - (v[1] - v[0])) + fz * ((v[7] - v[6]) - (v[5] - v[4]))),
            gx * gz * ((1.0 - fy) * ((v[5] - v[4]) - (v[1] - v[0])) + fy * ((v[7] - v[6]) - (v[3] - v[2]))),
            gy * gz * ((1.0 - fx) * ((v[6] - v[4]) - (v[2] - v[0])) + fx * ((v[7] - v[5]) - (v[3] - v[1]))),
        );
        let sig = sigmoid(r);
        IorJet {
            n: 1.0 + softplus(r),
            grad_n: grad_r * sig,
            sig,
            dsig: sig * (1.0 - sig),
            grad_r,
            hess_r,
        }
    }
}

impl Refractive for IorField {
    #[inline]
    fn ior(&self, p: Vec3) -> f64 {
        1.0 + softplus(self.raw.sample_scalar(p))
    }

    #[inline]
    fn ior_gradient(&self, p: Vec3) -> Vec3 {
        let (r, grad_r) = self.raw.sample_and_gradient_scalar(p);
        grad_r * sigmoid(r)
    }

    #[inline]
    fn ior_and_gradient(&self, p: Vec3) -> (f64, Vec3) {
        let (r, grad_r) = self.raw.sample_and_gradient_scalar(p);
        (1.0 + softplus(r), grad_r * sigmoid(r))
    }
}

/// Spherical gradient-index lens: n(r) = sqrt(2 - (r/R)^2) for r <= R, else 1.
/// Focuses a parallel beam onto the diametrically opposite rim point.
#[derive(Debug, Clone, Copy)]
pub struct LuneburgLens {
    pub center: Vec3,
    pub radius: f64,
}

impl Refractive for LuneburgLens {
    fn ior(&self, p: Vec3) -> f64 {
        let d = p - self.center;
        let q = d.norm_squared() / (self.radius * self.radius);
        if q <= 1.0 {
            (2.0 - q).sqrt()
        } else {
            1.0
        }
    }

    fn ior_gradient(&self, p: Vec3) -> Vec3 {
        let d = p - self.center;
        let r2 = self.radius * self.radius;
        let q = d.norm_squared() / r2;
        if q <= 1.0 {
            // d/dp sqrt(2 - |d|^2/R^2) = -d / (R^2 n)
            -d / (r2 * (2.0 - q).sqrt())
        } else {
            Vec3::zeros()
        }
    }
}

/// Radially symmetric bump: n(p) = 1 + a exp(-|p-c|^2 / (2 rho^2)).
#[derive(Debug, Clone, Copy)]
pub struct GaussianBlob {
    pub center: Vec3,
    pub amplitude: f64,
    pub radius: f64,
}

impl Refractive for GaussianBlob {
    fn ior(&self, p: Vec3) -> f64 {
        let d = p - self.center;
        1.0 + self.amplitude * (-d.norm_squared() / (2.0 * self.radius * self.radius)).exp()
    }

    fn ior_gradient(&self, p: Vec3) -> Vec3 {
        let d = p - self.center;
        let rho2 = self.radius * self.radius;
        let e = self.amplitude * (-d.norm_squared() / (2.0 * rho2)).exp();
        -d * (e / rho2)
    }
}

/// Homogeneous medium, n constant everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantIor(pub f64);

impl Refractive for ConstantIor {
    fn ior(&self, _p: Vec3) -> f64 {
        self.0
    }
    fn ior_gradient(&self, _p: Vec3) -> Vec3 {
        Vec3::zeros()
    }
}
