//! Emission/absorption field backends: analytic backdrop planes, baked value
//! grids, learnable softplus-reparameterized grids, constants, and the masked
//! wrapper that zeroes everything inside the refractive box.

use crate::fields::grid::{GradSink, GridField};
use crate::fields::ior::{sigmoid, softplus};
use crate::transport::RefractiveBox;
use crate::Vec3;

/// View-independent emission (RGB, per unit length) and absorption
/// (scalar extinction per unit length) as functions of position.
pub trait EaSource {
    fn emission(&self, p: Vec3) -> Vec3;
    fn absorption(&self, p: Vec3) -> f64;
}

impl<S: EaSource + ?Sized> EaSource for &S {
    fn emission(&self, p: Vec3) -> Vec3 {
        (**self).emission(p)
    }
    fn absorption(&self, p: Vec3) -> f64 {
        (**self).absorption(p)
    }
}

/// Procedural plane textures.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Solid {
        color: [f64; 3],
    },
    Checker {
        scale: f64,
        color_a: [f64; 3],
        color_b: [f64; 3],
    },
    ValueNoise {
        scale: f64,
        seed: u64,
        color_a: [f64; 3],
        color_b: [f64; 3],
    },
}

fn lattice_hash(ix: i64, iy: i64, seed: u64) -> f64 {
    let mut h = seed ^ (ix as u64).wrapping_mul(0x9e3779b97f4a7c15);
    h ^= (iy as u64).wrapping_mul(0xc2b2ae3d27d4eb4f);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d049bb133111eb);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

impl Texture {
    pub fn eval(&self, u: f64, v: f64) -> Vec3 {
        match self {
            Texture::Solid { color } => Vec3::from(*color),
            Texture::Checker {
                scale,
                color_a,
                color_b,
            } => {
                let cell = (u / scale).floor() as i64 + (v / scale).floor() as i64;
                if cell.rem_euclid(2) == 0 {
                    Vec3::from(*color_a)
                } else {
                    Vec3::from(*color_b)
                }
            }
            Texture::ValueNoise {
                scale,
                seed,
                color_a,
                color_b,
            } => {
                let (su, sv) = (u / scale, v / scale);
                let (iu, iv) = (su.floor(), sv.floor());
                let (fu, fv) = (su - iu, sv - iv);
                let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
                let (wu, wv) = (smooth(fu), smooth(fv));
                let (iu, iv) = (iu as i64, iv as i64);
                let n00 = lattice_hash(iu, iv, *seed);
                let n10 = lattice_hash(iu + 1, iv, *seed);
                let n01 = lattice_hash(iu, iv + 1, *seed);
                let n11 = lattice_hash(iu + 1, iv + 1, *seed);
                let t = (n00 * (1.0 - wu) + n10 * wu) * (1.0 - wv)
                    + (n01 * (1.0 - wu) + n11 * wu) * wv;
                Vec3::from(*color_a) * (1.0 - t) + Vec3::from(*color_b) * t
            }
        }
    }
}

/// A textured opaque surface realized as a thin absorbing-emitting slab:
/// sigma is constant inside the slab and emission is texture * sigma, so the
/// surface saturates to its texture color and transmits essentially nothing.
#[derive(Debug, Clone)]
pub struct BackdropPlane {
    pub point: Vec3,
    pub normal: Vec3,
    pub tangent_u: Vec3,
    pub tangent_v: Vec3,
    pub half_thickness: f64,
    pub sigma: f64,
    pub texture: Texture,
    /// In-plane half extents along (tangent_u, tangent_v); `None` is infinite.
    pub half_extent: Option<(f64, f64)>,
}

impl BackdropPlane {
    /// Horizontal floor at the given height with x/z texture axes.
    pub fn floor(height: f64, half_thickness: f64, sigma: f64, texture: Texture) -> Self {
        BackdropPlane {
            point: Vec3::new(0.0, height, 0.0),
            normal: Vec3::new(0.0, 1.0, 0.0),
            tangent_u: Vec3::new(1.0, 0.0, 0.0),
            tangent_v: Vec3::new(0.0, 0.0, 1.0),
            half_thickness,
            sigma,
            texture,
            half_extent: None,
        }
    }

    /// True when p lies inside the slab and within the in-plane extent.
    #[inline]
    pub fn active_at(&self, p: Vec3) -> bool {
        if self.signed_distance(p).abs() > self.half_thickness {
            return false;
        }
        match self.half_extent {
            None => true,
            Some((eu, ev)) => {
                let d = p - self.point;
                self.tangent_u.dot(&d).abs() <= eu && self.tangent_v.dot(&d).abs() <= ev
            }
        }
    }

    #[inline]
    pub fn signed_distance(&self, p: Vec3) -> f64 {
        self.normal.dot(&(p - self.point))
    }

    #[inline]
    pub fn texture_at(&self, p: Vec3) -> Vec3 {
        let d = p - self.point;
        self.texture.eval(self.tangent_u.dot(&d), self.tangent_v.dot(&d))
    }

    /// Parametric slab crossing of the segment p0 + t*dir, t in [s0, s1].
    /// Returns (entry, exit, mid-plane crossing parameter) when the segment
    /// overlaps the slab.
    pub fn crossing(&self, p0: Vec3, dir: Vec3, s0: f64, s1: f64) -> Option<(f64, f64, f64)> {
        let denom = self.normal.dot(&dir);
        let dist = self.signed_distance(p0);
        if denom.abs() < 1e-12 {
            // Parallel: either fully inside the slab or fully outside.
            if dist.abs() <= self.half_thickness {
                return Some((s0, s1, 0.5 * (s0 + s1)));
            }
            return None;
        }
        let t_mid = -dist / denom;
        let dt = (self.half_thickness / denom).abs();
        let (a, b) = (t_mid - dt, t_mid + dt);
        let lo = a.max(s0);
        let hi = b.min(s1);
        if lo < hi {
            Some((lo, hi, t_mid.clamp(lo, hi)))
        } else {
            None
        }
    }
}

/// A set of backdrop planes; fields add up where slabs overlap.
#[derive(Debug, Clone, Default)]
pub struct BackdropSet {
    pub planes: Vec<BackdropPlane>,
}

impl EaSource for BackdropSet {
    fn emission(&self, p: Vec3) -> Vec3 {
        let mut q = Vec3::zeros();
        for plane in &self.planes {
            if plane.active_at(p) {
                q += plane.texture_at(p) * plane.sigma;
            }
        }
        q
    }

    fn absorption(&self, p: Vec3) -> f64 {
        let mut s = 0.0;
        for plane in &self.planes {
            if plane.active_at(p) {
                s += plane.sigma;
            }
        }
        s
    }
}

/// Homogeneous medium.
#[derive(Debug, Clone, Copy)]
pub struct ConstantEa {
    pub emission: Vec3,
    pub absorption: f64,
}

impl EaSource for ConstantEa {
    fn emission(&self, _p: Vec3) -> Vec3 {
        self.emission
    }
    fn absorption(&self, _p: Vec3) -> f64 {
        self.absorption
    }
}

/// Baked value grids: RGB emission plus scalar absorption. Values outside the
/// grid domain are zero (the domain is padded so edge values are already ~0).
#[derive(Debug, Clone)]
pub struct GridEa {
    pub emission: GridField,
    pub absorption: GridField,
}

impl GridEa {
    pub fn domain(&self) -> RefractiveBox {
        RefractiveBox {
            min: self.emission.origin,
            max: self.emission.origin + self.emission.extent,
        }
    }
}

impl EaSource for GridEa {
    fn emission(&self, p: Vec3) -> Vec3 {
        if self.domain().contains(p) {
            self.emission.sample_rgb(p).map(|v| v.max(0.0))
        } else {
            Vec3::zeros()
        }
    }
    fn absorption(&self, p: Vec3) -> f64 {
        if self.domain().contains(p) {
            self.absorption.sample_scalar(p).max(0.0)
        } else {
            0.0
        }
    }
}

/// Learnable emission/absorption: raw grids mapped through
/// `softplus(raw) * scale`, which keeps both fields nonnegative.
#[derive(Debug, Clone)]
pub struct LearnableEa {
    pub raw_emission: GridField,
    pub raw_absorption: GridField,
    pub emission_scale: f64,
    pub absorption_scale: f64,
}

/// Raw init for learnable EA grids; softplus(-10) * scale starts near zero.
pub const EA_RAW_INIT: f32 = -10.0;

impl LearnableEa {
    pub fn init_on_box(domain: &RefractiveBox, dims: [usize; 3], emission_scale: f64, absorption_scale: f64) -> Self {
        Self::init_on_box_with(domain, dims, emission_scale, absorption_scale, EA_RAW_INIT)
    }

    pub fn init_on_box_with(
        domain: &RefractiveBox,
        dims: [usize; 3],
        emission_scale: f64,
        absorption_scale: f64,
        raw_init: f32,
    ) -> Self {
        let extent = domain.max - domain.min;
        LearnableEa {
            raw_emission: GridField::constant(domain.min, extent, dims, 3, raw_init),
            raw_absorption: GridField::constant(domain.min, extent, dims, 1, raw_init),
            emission_scale,
            absorption_scale,
        }
    }

    pub fn domain(&self) -> RefractiveBox {
        RefractiveBox {
            min: self.raw_emission.origin,
            max: self.raw_emission.origin + self.raw_emission.extent,
        }
    }

    /// VJP of `emission(p)` w.r.t. raw emission values.
    pub fn vjp_emission(&self, p: Vec3, upstream: Vec3, sink: &mut impl GradSink) {
        if !self.domain().contains(p) {
            return;
        }
        let cell = self.raw_emission.locate(p);
        let w = GridField::corner_weights(&cell);
        for ch in 0..3 {
            if upstream[ch] == 0.0 {
                continue;
            }
            let idx = self.raw_emission.corner_indices(&cell, ch);
            let mut r = 0.0;
            for c in 0..8 {
                r += w[c] * self.raw_emission.values[idx[c]] as f64;
            }
            let d = sigmoid(r) * self.emission_scale * upstream[ch];
            for c in 0..8 {
                sink.add(idx[c] as u32, d * w[c]);
            }
        }
    }

    /// VJP of `absorption(p)` w.r.t. raw absorption values.
    pub fn vjp_absorption(&self, p: Vec3, upstream: f64, sink: &mut impl GradSink) {
        if upstream == 0.0 || !self.domain().contains(p) {
            return;
        }
        let cell = self.raw_absorption.locate(p);
        let idx = self.raw_absorption.corner_indices(&cell, 0);
        let w = GridField::corner_weights(&cell);
        let mut r = 0.0;
        for c in 0..8 {
            r += w[c] * self.raw_absorption.values[idx[c]] as f64;
        }
        let d = sigmoid(r) * self.absorption_scale * upstream;
        for c in 0..8 {
            sink.add(idx[c] as u32, d * w[c]);
        }
    }

    /// Emission, absorption, and their spatial gradients at p.
    #[allow(clippy::type_complexity)]
    pub fn eval_with_spatial(&self, p: Vec3) -> (Vec3, f64, [Vec3; 3], Vec3) {
        if !self.domain().contains(p) {
            return (Vec3::zeros(), 0.0, [Vec3::zeros(); 3], Vec3::zeros());
        }
        let mut q = Vec3::zeros();
        let mut dq = [Vec3::zeros(); 3];
        {
            let cell = self.raw_emission.locate(p);
            let w = GridField::corner_weights(&cell);
            let wg = self.raw_emission.corner_weight_gradients(&cell);
            for ch in 0..3 {
                let idx = self.raw_emission.corner_indices(&cell, ch);
                let mut r = 0.0;
                let mut gr = Vec3::zeros();
                for c in 0..8 {
                    let v = self.raw_emission.values[idx[c]] as f64;
                    r += w[c] * v;
                    gr += wg[c] * v;
                }
                q[ch] = softplus(r) * self.emission_scale;
                dq[ch] = gr * (sigmoid(r) * self.emission_scale);
            }
        }
        let (sig, dsig) = {
            let (r, gr) = self.raw_absorption.sample_and_gradient_scalar(p);
            (
                softplus(r) * self.absorption_scale,
                gr * (sigmoid(r) * self.absorption_scale),
            )
        };
        (q, sig, dq, dsig)
    }
}

impl EaSource for LearnableEa {
    fn emission(&self, p: Vec3) -> Vec3 {
        if !self.domain().contains(p) {
            return Vec3::zeros();
        }
        let v = self.raw_emission.sample_rgb(p);
        Vec3::new(
            softplus(v.x) * self.emission_scale,
            softplus(v.y) * self.emission_scale,
            softplus(v.z) * self.emission_scale,
        )
    }
    fn absorption(&self, p: Vec3) -> f64 {
        if !self.domain().contains(p) {
            return 0.0;
        }
        softplus(self.raw_absorption.sample_scalar(p)) * self.absorption_scale
    }
}

/// Masked wrapper: exactly zero emission and absorption inside the box,
/// delegating to the inner source elsewhere.
#[derive(Debug, Clone)]
pub struct MaskedEa<S> {
    pub inner: S,
    pub mask: Option<RefractiveBox>,
}

impl<S: EaSource> MaskedEa<S> {
    pub fn new(inner: S, mask: Option<RefractiveBox>) -> Self {
        MaskedEa { inner, mask }
    }

    #[inline]
    fn masked(&self, p: Vec3) -> bool {
        self.mask.as_ref().is_some_and(|b| b.contains(p))
    }
}

impl<S: EaSource> EaSource for MaskedEa<S> {
    fn emission(&self, p: Vec3) -> Vec3 {
        if self.masked(p) {
            Vec3::zeros()
        } else {
            self.inner.emission(p)
        }
    }
    fn absorption(&self, p: Vec3) -> f64 {
        if self.masked(p) {
            0.0
        } else {
            self.inner.absorption(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn checker_parity() {
        let t = Texture::Checker {
            scale: 1.0,
            color_a: [1.0, 1.0, 1.0],
            color_b: [0.0, 0.0, 0.0],
        };
        assert_eq!(t.eval(0.5, 0.5).x, 1.0);
        assert_eq!(t.eval(1.5, 0.5).x, 0.0);
        assert_eq!(t.eval(1.5, 1.5).x, 1.0);
        assert_eq!(t.eval(-0.5, 0.5).x, 0.0);
    }

    #[test]
    fn value_noise_is_deterministic_and_bounded() {
        let t = Texture::ValueNoise {
            scale: 0.7,
            seed: 42,
            color_a: [0.0, 0.0, 0.0],
            color_b: [1.0, 1.0, 1.0],
        };
        for i in 0..50 {
            let (u, v) = (i as f64 * 0.173, i as f64 * -0.311);
            let a = t.eval(u, v);
            let b = t.eval(u, v);
            assert_eq!(a, b);
            assert!(a.x >= 0.0 && a.x <= 1.0);
        }
    }

    #[test]
    fn plane_crossing_and_fields() {
        let plane = BackdropPlane::floor(
            -1.0,
            0.05,
            1e3,
            Texture::Solid {
                color: [0.5, 0.25, 0.125],
            },
        );
        let p0 = Vec3::new(0.0, 1.0, 0.0);
        let dir = Vec3::new(0.0, -1.0, 0.0);
        let (t_in, t_out, t_mid) = plane.crossing(p0, dir, 0.0, 10.0).unwrap();
        assert_relative_eq!(t_in, 1.95, epsilon = 1e-12);
        assert_relative_eq!(t_out, 2.05, epsilon = 1e-12);
        assert_relative_eq!(t_mid, 2.0, epsilon = 1e-12);
        assert!(plane.crossing(p0, Vec3::new(1.0, 0.0, 0.0), 0.0, 10.0).is_none());

        let set = BackdropSet {
            planes: vec![plane],
        };
        let inside = Vec3::new(0.2, -1.01, 0.3);
        assert_eq!(set.absorption(inside), 1e3);
        assert_relative_eq!(set.emission(inside).x, 0.5 * 1e3);
        assert_eq!(set.absorption(Vec3::new(0.2, 0.0, 0.3)), 0.0);
    }

    #[test]
    fn masked_zeroes_inside_box() {
        let inner = ConstantEa {
            emission: Vec3::new(0.5, 0.5, 0.5),
            absorption: 2.0,
        };
        let b = RefractiveBox {
            min: Vec3::new(-0.5, -0.5, -0.5),
            max: Vec3::new(0.5, 0.5, 0.5),
        };
        let m = MaskedEa::new(inner, Some(b));
        assert_eq!(m.emission(Vec3::zeros()), Vec3::zeros());
        assert_eq!(m.absorption(Vec3::zeros()), 0.0);
        assert_eq!(m.emission(Vec3::new(0.9, 0.0, 0.0)).x, 0.5);
        assert_eq!(m.absorption(Vec3::new(0.9, 0.0, 0.0)), 2.0);
    }

    #[test]
    fn learnable_vjp_matches_fd() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let domain = RefractiveBox {
            min: Vec3::zeros(),
            max: Vec3::new(1.0, 1.0, 1.0),
        };
        let mut ea = LearnableEa::init_on_box(&domain, [4, 4, 4], 2.0, 3.0);
        let mut rng = StdRng::seed_from_u64(8);
        for v in &mut ea.raw_emission.values {
            *v = rng.gen_range(-2.0..1.0);
        }
        for v in &mut ea.raw_absorption.values {
            *v = rng.gen_range(-2.0..1.0);
        }
        let p = Vec3::new(0.37, 0.61, 0.52);
        let up_q = Vec3::new(0.3, -0.7, 1.1);
        let up_s = 0.9;
        let mut sink_q = crate::fields::grid::GradEntries::new();
        let mut sink_s = crate::fields::grid::GradEntries::new();
        ea.vjp_emission(p, up_q, &mut sink_q);
        ea.vjp_absorption(p, up_s, &mut sink_s);

        let cell = ea.raw_emission.locate(p);
        for ch in 0..3 {
            for idx in ea.raw_emission.corner_indices(&cell, ch) {
                let mut hi = ea.clone();
                hi.raw_emission.values[idx] += 1e-4;
                let mut lo = ea.clone();
                lo.raw_emission.values[idx] -= 1e-4;
                let delta = hi.raw_emission.values[idx] as f64 - lo.raw_emission.values[idx] as f64;
                let fd = up_q.dot(&((hi.emission(p) - lo.emission(p)) / delta));
                let got: f64 = sink_q
                    .iter()
                    .filter(|(i, _)| *i as usize == idx)
                    .map(|(_, v)| v)
                    .sum();
                assert_relative_eq!(got, fd, max_relative = 1e-4, epsilon = 1e-9);
            }
        }
        for idx in ea.raw_absorption.corner_indices(&ea.raw_absorption.locate(p), 0) {
            let mut hi = ea.clone();
            hi.raw_absorption.values[idx] += 1e-4;
            let mut lo = ea.clone();
            lo.raw_absorption.values[idx] -= 1e-4;
            let delta = hi.raw_absorption.values[idx] as f64 - lo.raw_absorption.values[idx] as f64;
            let fd = up_s * (hi.absorption(p) - lo.absorption(p)) / delta;
            let got: f64 = sink_s
                .iter()
                .filter(|(i, _)| *i as usize == idx)
                .map(|(_, v)| v)
                .sum();
            assert_relative_eq!(got, fd, max_relative = 1e-4, epsilon = 1e-9);
        }
    }
}
