//! Gaussian band-limiting of grids and the masked emission/absorption
//! pyramid used by the coarse-to-fine schedule.

use crate::fields::ea::{EaSource, GridEa};
use crate::fields::grid::GridField;
use crate::transport::RefractiveBox;
use crate::Vec3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BakeError {
    #[error("refractive box {box_min:?}..{box_max:?} does not intersect grid domain {dom_min:?}..{dom_max:?}")]
    BoxOutsideDomain {
        box_min: [f64; 3],
        box_max: [f64; 3],
        dom_min: [f64; 3],
        dom_max: [f64; 3],
    },
}

/// Gaussian smoothing kernel specified as a normalized frequency bandwidth
/// in cycles per sample. The spatial sigma puts the half-power cutoff at the
/// bandwidth: sigma_samples = sqrt(2 ln 2) / (2 pi f_b).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SmoothingKernel {
    pub bandwidth: f64,
}

impl SmoothingKernel {
    pub fn new(bandwidth: f64) -> Self {
        assert!(bandwidth > 0.0, "bandwidth must be positive");
        SmoothingKernel { bandwidth }
    }

    pub fn sigma_samples(&self) -> f64 {
        (2.0 * 2.0f64.ln()).sqrt() / (2.0 * std::f64::consts::PI * self.bandwidth)
    }

    /// Discrete normalized half-kernel taps [w0, w1, ..., wr]; full kernel is
    /// symmetric. Large bandwidths collapse to the identity tap [1].
    pub fn taps(&self) -> Vec<f64> {
        let sigma = self.sigma_samples();
        let radius = (3.0 * sigma).ceil() as usize;
        let mut taps = vec![0.0; radius + 1];
        for (j, t) in taps.iter_mut().enumerate() {
            *t = (-((j * j) as f64) / (2.0 * sigma * sigma)).exp();
        }
        let sum: f64 = taps[0] + 2.0 * taps[1..].iter().sum::<f64>();
        for t in &mut taps {
            *t /= sum;
        }
        taps
    }
}

/// Separable 3D Gaussian convolution in index space, clamp-to-edge at the
/// boundary. Output dims equal input dims.
pub fn gaussian_smooth(field: &GridField, kernel: &SmoothingKernel) -> GridField {
    let taps = kernel.taps();
    if taps.len() == 1 {
        return field.clone();
    }
    let mut out = field.clone();
    let mut tmp = field.clone();
    let [nx, ny, nz] = field.dims;
    let ch = field.channels;
    let radius = taps.len() - 1;

    // One pass per axis, reading from `src`, writing to `dst`.
    let pass = |src: &GridField, dst: &mut GridField, axis: usize| {
        let n_axis = [nx, ny, nz][axis];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    for c in 0..ch {
                        let coord = [i, j, k];
                        let mut acc = taps[0] * src.values[src.value_index(i, j, k, c)] as f64;
                        for (d, &w) in taps.iter().enumerate().skip(1) {
                            let mut lo = coord;
                            lo[axis] = coord[axis].saturating_sub(d);
                            let mut hi = coord;
                            hi[axis] = (coord[axis] + d).min(n_axis - 1);
                            acc += w
                                * (src.values[src.value_index(lo[0], lo[1], lo[2], c)] as f64
                                    + src.values[src.value_index(hi[0], hi[1], hi[2], c)] as f64);
                        }
                        let idx = dst.value_index(i, j, k, c);
                        dst.values[idx] = acc as f32;
                    }
                }
            }
        }
    };

    let _ = radius;
    pass(field, &mut tmp, 0);
    pass(&tmp, &mut out, 1);
    pass(&out, &mut tmp, 2);
    out.values.copy_from_slice(&tmp.values);
    out
}

/// One level of the baked background pyramid.
#[derive(Debug, Clone)]
pub struct BakedLevel {
    pub grids: GridEa,
    pub bandwidth: f64,
}

/// Samples the masked emission/absorption source at grid nodes over the given
/// domain, zeroes nodes inside the refractive box exactly, then produces one
/// smoothed level per kernel. Level order follows `kernels`.
pub fn bake_masked_grid(
    source: &impl EaSource,
    refr_box: &RefractiveBox,
    domain: &RefractiveBox,
    dims: [usize; 3],
    kernels: &[SmoothingKernel],
) -> Result<Vec<BakedLevel>, BakeError> {
    let overlaps = (0..3).all(|a| refr_box.min[a] < domain.max[a] && refr_box.max[a] > domain.min[a]);
    if !overlaps {
        return Err(BakeError::BoxOutsideDomain {
            box_min: refr_box.min.into(),
            box_max: refr_box.max.into(),
            dom_min: domain.min.into(),
            dom_max: domain.max.into(),
        });
    }

    let extent = domain.max - domain.min;
    let mut emission = GridField::new(domain.min, extent, dims, 3);
    let mut absorption = GridField::new(domain.min, extent, dims, 1);
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let p = emission.node_pos(i, j, k);
                let (q, s) = if refr_box.contains(p) {
                    (Vec3::zeros(), 0.0)
                } else {
                    (source.emission(p), source.absorption(p))
                };
                for c in 0..3 {
                    let idx = emission.value_index(i, j, k, c);
                    emission.values[idx] = q[c] as f32;
                }
                let idx = absorption.value_index(i, j, k, 0);
                absorption.values[idx] = s as f32;
            }
        }
    }

    Ok(kernels
        .iter()
        .map(|kernel| BakedLevel {
            grids: GridEa {
                emission: gaussian_smooth(&emission, kernel),
                absorption: gaussian_smooth(&absorption, kernel),
            },
            bandwidth: kernel.bandwidth,
        })
        .collect())
}

/// The progression schedule's kernels: bandwidth starting at `bandwidth0`
/// and doubling per level.
pub fn progression_kernels(bandwidth0: f64, levels: usize) -> Vec<SmoothingKernel> {
    (0..levels)
        .map(|i| SmoothingKernel::new(bandwidth0 * (1u64 << i) as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::ea::ConstantEa;
    use approx::assert_relative_eq;

    fn unit_grid(dims: [usize; 3]) -> GridField {
        GridField::new(Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0), dims, 1)
    }

    #[test]
    fn sigma_mapping() {
        let k = SmoothingKernel::new(0.08);
        assert_relative_eq!(
            k.sigma_samples(),
            (2.0 * 2.0f64.ln()).sqrt() / (2.0 * std::f64::consts::PI * 0.08),
            max_relative = 1e-12
        );
        assert!(k.sigma_samples() > 2.3 && k.sigma_samples() < 2.4);
    }

    #[test]
    fn constant_grid_unchanged() {
        let g = GridField::constant(Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0), [6, 5, 4], 1, 0.7);
        let s = gaussian_smooth(&g, &SmoothingKernel::new(0.1));
        for (a, b) in g.values.iter().zip(&s.values) {
            assert_relative_eq!(*a as f64, *b as f64, epsilon = 1e-6);
        }
    }

    #[test]
    fn huge_bandwidth_is_identity() {
        let mut g = unit_grid([5, 5, 5]);
        g.fill_scalar(|p| (p.x * 13.7).sin() + p.y);
        let s = gaussian_smooth(&g, &SmoothingKernel::new(50.0));
        assert_eq!(g.values, s.values);
    }

    #[test]
    fn impulse_response_normalized_symmetric_peaked() {
        let mut g = unit_grid([9, 9, 9]);
        let center = g.value_index(4, 4, 4, 0);
        g.values[center] = 1.0;
        // Bandwidth chosen so the kernel support fits inside the grid.
        let s = gaussian_smooth(&g, &SmoothingKernel::new(0.3));
        let sum: f64 = s.values.iter().map(|&v| v as f64).sum();
        assert_relative_eq!(sum, 1.0, epsilon = 1e-5);
        let v = |i: usize, j: usize, k: usize| s.values[s.value_index(i, j, k, 0)];
        assert_eq!(v(3, 4, 4), v(5, 4, 4));
        assert_eq!(v(4, 3, 4), v(4, 5, 4));
        assert_eq!(v(4, 4, 3), v(4, 4, 5));
        let max = s.values.iter().cloned().fold(f32::MIN, f32::max);
        assert_eq!(max, v(4, 4, 4));
    }

    #[test]
    fn smoothing_is_linear_and_mean_preserving() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(17);
        let mut a = unit_grid([7, 7, 7]);
        let mut b = unit_grid([7, 7, 7]);
        // Interior-supported signals: leave a two-node border at zero.
        for k in 2..5 {
            for j in 2..5 {
                for i in 2..5 {
                    let idx = a.value_index(i, j, k, 0);
                    a.values[idx] = rng.gen_range(-1.0..1.0);
                    b.values[idx] = rng.gen_range(-1.0..1.0);
                }
            }
        }
        let kern = SmoothingKernel::new(0.5);
        let (alpha, beta) = (0.7, -0.3);
        let mut combo = a.clone();
        for (i, v) in combo.values.iter_mut().enumerate() {
            *v = (alpha * a.values[i] as f64 + beta * b.values[i] as f64) as f32;
        }
        let sc = gaussian_smooth(&combo, &kern);
        let sa = gaussian_smooth(&a, &kern);
        let sb = gaussian_smooth(&b, &kern);
        for i in 0..sc.values.len() {
            let lin = alpha * sa.values[i] as f64 + beta * sb.values[i] as f64;
            assert_relative_eq!(sc.values[i] as f64, lin, epsilon = 1e-6);
        }
        let mean = |g: &GridField| {
            g.values.iter().map(|&v| v as f64).sum::<f64>() / g.values.len() as f64
        };
        assert_relative_eq!(mean(&sa), mean(&a), epsilon = 1e-6);
    }

    #[test]
    fn bake_masks_box_interior_exactly() {
        let source = ConstantEa {
            emission: Vec3::new(0.5, 0.5, 0.5),
            absorption: 0.25,
        };
        let domain = RefractiveBox {
            min: Vec3::new(-1.0, -1.0, -1.0),
            max: Vec3::new(1.0, 1.0, 1.0),
        };
        let refr = RefractiveBox {
            min: Vec3::new(-0.25, -0.25, -0.25),
            max: Vec3::new(0.25, 0.25, 0.25),
        };
        let identity = SmoothingKernel::new(100.0); // collapses to identity tap
        let blur = SmoothingKernel::new(0.3);
        let levels =
            bake_masked_grid(&source, &refr, &domain, [9, 9, 9], &[identity, blur]).unwrap();

        // Identity level: plain voxel sampling with exact zeros inside the box.
        let lvl0 = &levels[0].grids;
        for k in 0..9 {
            for j in 0..9 {
                for i in 0..9 {
                    let p = lvl0.emission.node_pos(i, j, k);
                    let e = lvl0.emission.values[lvl0.emission.value_index(i, j, k, 0)];
                    if refr.contains(p) {
                        assert_eq!(e, 0.0);
                        assert_eq!(
                            lvl0.absorption.values[lvl0.absorption.value_index(i, j, k, 0)],
                            0.0
                        );
                    } else {
                        assert_eq!(e, 0.5);
                    }
                }
            }
        }
        // Smoothed level: blurred transition, value at the very center still
        // near zero, far corner close to the unmasked constant.
        let lvl1 = &levels[1].grids;
        let center = lvl1.emission.values[lvl1.emission.value_index(4, 4, 4, 0)];
        let corner = lvl1.emission.values[lvl1.emission.value_index(0, 0, 0, 0)];
        assert!(center < 0.2, "center {center}");
        assert!(corner > 0.45, "corner {corner}");
    }

    #[test]
    fn bake_zero_absorption_stays_zero() {
        let source = ConstantEa {
            emission: Vec3::new(0.3, 0.3, 0.3),
            absorption: 0.0,
        };
        let domain = RefractiveBox {
            min: Vec3::new(-1.0, -1.0, -1.0),
            max: Vec3::new(1.0, 1.0, 1.0),
        };
        let refr = RefractiveBox {
            min: Vec3::new(-0.2, -0.2, -0.2),
            max: Vec3::new(0.2, 0.2, 0.2),
        };
        let levels = bake_masked_grid(
            &source,
            &refr,
            &domain,
            [5, 5, 5],
            &progression_kernels(0.08, 3),
        )
        .unwrap();
        for lvl in levels {
            assert!(lvl.grids.absorption.values.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn bake_rejects_disjoint_box() {
        let source = ConstantEa {
            emission: Vec3::zeros(),
            absorption: 0.0,
        };
        let domain = RefractiveBox {
            min: Vec3::zeros(),
            max: Vec3::new(1.0, 1.0, 1.0),
        };
        let refr = RefractiveBox {
            min: Vec3::new(5.0, 5.0, 5.0),
            max: Vec3::new(6.0, 6.0, 6.0),
        };
        assert!(bake_masked_grid(&source, &refr, &domain, [4, 4, 4], &[]).is_err());
    }

    #[test]
    fn progression_doubles_bandwidth() {
        let ks = progression_kernels(0.08, 5);
        for (i, k) in ks.iter().enumerate() {
            assert_relative_eq!(k.bandwidth, 0.08 * 2f64.powi(i as i32));
        }
    }
}
