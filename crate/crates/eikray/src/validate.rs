//! Physics validation checks and the three-way gradient comparison. These
//! back both the `validate`/`gradcheck` CLI commands and the acceptance
//! tests.

use crate::fields::ea::GridEa;
use crate::fields::grid::GridField;
use crate::fields::ior::{softplus_inv, IorField, LuneburgLens, Refractive};
use crate::fields::smooth::{gaussian_smooth, SmoothingKernel};
use crate::odesolve::{
    backprop_recorded, finite_diff_grad, integrate, integrate_adjoint, Costate, GradSinks,
    SolverConfig,
};
use crate::transport::{
    intersect_box, trace_mixed, trace_mixed_logged, trace_mixed_taped, Exterior, ModelBundle,
    OpKind, RefractiveBox, TraceConfig, TraceLog, TraceTape,
};
use crate::Vec3;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        CheckResult {
            name,
            passed,
            detail,
        }
    }
}

/// 64 parallel rays through a Luneburg lens focus onto the diametrically
/// opposite rim point; max miss distance must stay under 1% of the radius.
pub fn check_luneburg() -> CheckResult {
    let lens = LuneburgLens {
        center: Vec3::zeros(),
        radius: 1.0,
    };
    let focus = Vec3::new(0.0, 0.0, 1.0);
    let steps = 512usize;
    let arc = 3.6; // covers the longest internal arc plus straight continuation
    let mut max_miss: f64 = 0.0;
    // Sunflower pattern of impact parameters up to 0.8 R.
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    for i in 0..64 {
        let r = 0.8 * ((i as f64 + 0.5) / 64.0).sqrt();
        let phi = golden * i as f64;
        let origin = Vec3::new(r * phi.cos(), r * phi.sin(), -2.0);
        let dir = Vec3::new(0.0, 0.0, 1.0);
        // Analytic sphere entry.
        let oc = origin - lens.center;
        let b = oc.dot(&dir);
        let t_entry = -b - (b * b - (oc.norm_squared() - 1.0)).sqrt();
        let entry = origin + dir * t_entry;

        let rhs = |_s: f64, z: &[f64; 6]| {
            let p = Vec3::new(z[0], z[1], z[2]);
            let v = Vec3::new(z[3], z[4], z[5]);
            let (n, g) = lens.ior_and_gradient(p);
            let dp = v / n;
            [dp.x, dp.y, dp.z, g.x, g.y, g.z]
        };
        let z0 = [entry.x, entry.y, entry.z, dir.x, dir.y, dir.z];
        let run = crate::odesolve::integrate_recorded(&rhs, z0, 0.0, arc, &SolverConfig::rk4(steps))
            .expect("finite");
        // Closest approach of the recorded polyline to the focus.
        let mut miss = f64::INFINITY;
        for pair in run.states.windows(2) {
            let a = Vec3::new(pair[0][0], pair[0][1], pair[0][2]);
            let b2 = Vec3::new(pair[1][0], pair[1][1], pair[1][2]);
            let ab = b2 - a;
            let t = ((focus - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
            miss = miss.min((a + ab * t - focus).norm());
        }
        max_miss = max_miss.max(miss);
    }
    CheckResult::new(
        "luneburg-focusing",
        max_miss < 0.01,
        format!("max miss {:.5} R (tolerance 0.01 R, 64 rays, RK4 x512)", max_miss),
    )
}

/// Index excess at the thin side of the planar step; exactly 1.0 is not
/// representable through softplus and a deep floor would put an exponential
/// cliff into the raw grid.
const STEP_LO_EXCESS: f64 = 1e-4;

/// Builds a raw grid holding a smoothed planar index step along z. The
/// smoothstep lives in raw space so per-cell raw slopes stay moderate.
fn planar_step_field(refr_box: &RefractiveBox, dims: usize, n_hi: f64, width_cells: f64) -> IorField {
    let raw_lo = softplus_inv(STEP_LO_EXCESS);
    let raw_hi = softplus_inv(n_hi - 1.0);
    let mut field = IorField::init_on_box(refr_box.min, refr_box.max, [dims; 3], raw_lo as f32);
    let cell = (refr_box.max.z - refr_box.min.z) / (dims - 1) as f64;
    let z0 = refr_box.min.z + 0.42 * (refr_box.max.z - refr_box.min.z);
    let w = width_cells * cell;
    let profile = |z: f64| {
        let t = ((z - z0) / w + 0.5).clamp(0.0, 1.0);
        let s = t * t * (3.0 - 2.0 * t);
        raw_lo + (raw_hi - raw_lo) * s
    };
    let dims3 = field.raw.dims;
    for k in 0..dims3[2] {
        for j in 0..dims3[1] {
            for i in 0..dims3[0] {
                let p = field.raw.node_pos(i, j, k);
                let idx = field.raw.value_index(i, j, k, 0);
                field.raw.values[idx] = profile(p.z) as f32;
            }
        }
    }
    // Band-limit the node data; slope jumps across cell faces kick the
    // momentum magnitude and widen the measured exit angle.
    field.raw = gaussian_smooth(&field.raw, &SmoothingKernel::new(0.16));
    field
}

/// Exit angles through a smoothed planar step (1.0 -> 1.5 over four cells)
/// obey Snell's law within half a degree at 15/30/45 degrees incidence.
pub fn check_snell() -> CheckResult {
    // Wide in x so steep rays finish the transition before leaving the box.
    let refr_box = RefractiveBox::new(Vec3::zeros(), Vec3::new(2.0, 1.0, 1.0));
    let n_hi = 1.5;
    let field = planar_step_field(&refr_box, 32, n_hi, 4.0);
    let model = ModelBundle {
        ior: &field,
        exterior: Exterior::Empty,
        interior: None,
        refr_box: Some(refr_box),
    };
    let cfg = TraceConfig {
        far_bound: 4.0,
        ..TraceConfig::default()
    };
    let mut worst: f64 = 0.0;
    let mut detail = String::new();
    for theta1_deg in [15.0f64, 30.0, 45.0] {
        let theta1 = theta1_deg.to_radians();
        let dir = Vec3::new(theta1.sin(), 0.0, theta1.cos());
        let origin = Vec3::new(0.25, 0.5, -0.4);
        let out = trace_mixed(&model, origin, dir, &cfg).expect("trace");
        assert!(!out.trapped);
        let v = out.final_state.v;
        let theta2 = v.xy().norm().atan2(v.z);
        let expected = ((1.0 + STEP_LO_EXCESS) * theta1.sin() / n_hi).asin();
        let err_deg = (theta2 - expected).abs().to_degrees();
        worst = worst.max(err_deg);
        detail.push_str(&format!(
            "{theta1_deg}deg -> {:.3}deg (snell {:.3}deg); ",
            theta2.to_degrees(),
            expected.to_degrees()
        ));
    }
    CheckResult::new(
        "snell-consistency",
        worst < 0.5,
        format!("max deviation {worst:.4} deg; {detail}"),
    )
}

/// Smoothed blob on a grid for the conservation check. The bump lives in raw
/// space (like fitted fields do); building it as softplus_inv of a floored
/// excess would create an exponential boundary layer that wrecks the
/// integrator's order.
pub fn smoothed_blob_field(refr_box: &RefractiveBox, dims: usize, amplitude: f64) -> IorField {
    let center = refr_box.center();
    let rho = 0.18 * refr_box.diagonal();
    let base = crate::fields::ior::RAW_INIT as f64;
    let peak = softplus_inv(amplitude);
    let mut field = IorField::init_on_box(refr_box.min, refr_box.max, [dims; 3], base as f32);
    let dims3 = field.raw.dims;
    for k in 0..dims3[2] {
        for j in 0..dims3[1] {
            for i in 0..dims3[0] {
                let p = field.raw.node_pos(i, j, k);
                let bump = (-(p - center).norm_squared() / (2.0 * rho * rho)).exp();
                let idx = field.raw.value_index(i, j, k, 0);
                field.raw.values[idx] = (base + (peak - base) * bump) as f32;
            }
        }
    }
    field.raw = gaussian_smooth(&field.raw, &SmoothingKernel::new(0.25));
    field
}

fn hamiltonian_drift<R: Refractive>(
    field: &R,
    refr_box: &RefractiveBox,
    steps_inside: usize,
) -> f64 {
    let model = ModelBundle {
        ior: field,
        exterior: Exterior::Empty,
        interior: None,
        refr_box: Some(*refr_box),
    };
    let cfg = TraceConfig {
        steps_inside,
        far_bound: 5.0,
        ..TraceConfig::default()
    };
    let origin = Vec3::new(0.31, 0.42, -1.0);
    let dir = Vec3::new(0.05, -0.04, 1.0).normalize();
    let mut tape = TraceTape::default();
    trace_mixed_taped(&model, origin, dir, &cfg, &mut tape).expect("trace");
    let mut drift: f64 = 0.0;
    for (op, states) in tape.log.ops.iter().zip(&tape.steps) {
        if !matches!(op.kind, OpKind::Inside { .. }) {
            continue;
        }
        for z in states {
            let n = field.ior(z.p);
            drift = drift.max((z.v.norm_squared() - n * n).abs());
        }
    }
    drift
}

/// |v|^2 - n^2 stays below 1e-6 across a full traversal at 128 steps and
/// shrinks at least 8x when the step count doubles. The field is the smooth
/// blob itself: across trilinear cell faces grad n is discontinuous and the
/// invariant picks up first-order kicks (documented representation limit),
/// so fourth-order conservation is a property of the integrator on smooth
/// fields, which this check isolates. The grid-backed drift is reported
/// alongside for reference.
pub fn check_conservation() -> CheckResult {
    let refr_box = RefractiveBox::new(Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0));
    let smooth = crate::fields::ior::GaussianBlob {
        center: refr_box.center(),
        amplitude: 0.12,
        radius: 0.18 * refr_box.diagonal(),
    };
    let d128 = hamiltonian_drift(&smooth, &refr_box, 128);
    let d256 = hamiltonian_drift(&smooth, &refr_box, 256);
    let ratio = d128 / d256.max(1e-300);
    let grid = smoothed_blob_field(&refr_box, 32, 0.12);
    let grid_drift = hamiltonian_drift(&grid, &refr_box, 128);
    CheckResult::new(
        "hamiltonian-conservation",
        d128 < 1e-6 && ratio >= 8.0,
        format!(
            "drift@128 {d128:.3e} (tol 1e-6), halving ratio {ratio:.1} (>= 8); trilinear-grid drift {grid_drift:.1e} for reference"
        ),
    )
}

/// With a constant raw grid (n - 1 = softplus(-10)), the mixed tracer must
/// reproduce the straight-ray emission-absorption render to 1e-5 per pixel
/// over a full 64x64 frame.
pub fn check_degeneracy() -> CheckResult {
    let spec = crate::scene::SceneSpec::blob_lens();
    let scene = crate::scene::build_scene(&spec).expect("scene");
    let kernels = [SmoothingKernel::new(100.0)]; // identity tap
    let levels = crate::fields::smooth::bake_masked_grid(
        &scene.backdrops,
        &spec.refr_box,
        &spec.bg_domain,
        [96, 96, 96],
        &kernels,
    )
    .expect("bake");
    let baked: &GridEa = &levels[0].grids;
    let ior = IorField::init_on_box(spec.refr_box.min, spec.refr_box.max, [32, 32, 32], -10.0);
    let camera = &scene.cameras[0];
    let cfg = TraceConfig {
        far_bound: spec.far_bound,
        ..TraceConfig::default()
    };
    let mixed = ModelBundle {
        ior: &ior,
        exterior: Exterior::Baked(baked),
        interior: None,
        refr_box: Some(spec.refr_box),
    };
    let straight = ModelBundle {
        refr_box: None,
        ..mixed
    };
    let image_mixed = crate::transport::render_image(&mixed, camera, &cfg).expect("render");
    let image_straight = crate::transport::render_image(&straight, camera, &cfg).expect("render");
    let max_diff = image_mixed
        .color
        .data
        .iter()
        .zip(&image_straight.color.data)
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .fold(0.0f64, f64::max);
    CheckResult::new(
        "constant-ior-degeneracy",
        max_diff < 1e-5,
        format!("max |mixed - straight| {max_diff:.3e} over 64x64 (tol 1e-5)"),
    )
}

pub fn run_all_checks() -> Vec<CheckResult> {
    vec![
        check_luneburg(),
        check_snell(),
        check_conservation(),
        check_degeneracy(),
    ]
}

/// One seeded gradient-comparison instance: an 8^3 (or `size`^3) raw IoR
/// grid in a box, a smooth masked background grid, and one box-hitting ray.
pub struct GradCheckInstance {
    pub ior: IorField,
    pub background: GridEa,
    pub refr_box: RefractiveBox,
    pub cfg: TraceConfig,
    pub origin: Vec3,
    pub dir: Vec3,
}

pub fn gradcheck_instance(seed: u64, size: usize) -> GradCheckInstance {
    let mut rng = StdRng::seed_from_u64(seed);
    let refr_box = RefractiveBox::new(Vec3::new(-0.5, -0.5, -0.5), Vec3::new(0.5, 0.5, 0.5));
    let mut ior = IorField::init_on_box(refr_box.min, refr_box.max, [size; 3], -10.0);
    for v in &mut ior.raw.values {
        *v = rng.gen_range(-4.5..-1.0);
    }
    ior.raw = gaussian_smooth(&ior.raw, &SmoothingKernel::new(0.2));

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
    // The background vanishes in a margin around the box; the backward pass
    // holds segment boundaries fixed, which is exact in that setting.
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
    let origin = Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), -1.8);
    let target = Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), 0.0);
    let dir = (target - origin).normalize();
    GradCheckInstance {
        ior,
        background: GridEa {
            emission,
            absorption,
        },
        refr_box,
        cfg: TraceConfig {
            far_bound: 5.0,
            ..TraceConfig::default()
        },
        origin,
        dir,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub seed: u64,
    pub adjoint_vs_recorded: f64,
    pub adjoint_vs_fd: f64,
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

/// Runs the three-way gradient comparison (constant-memory adjoint,
/// recorded reverse mode, central finite differences) on one seeded
/// instance with an L1 loss on the exit radiance.
pub fn gradcheck(seed: u64, size: usize) -> GradCheckReport {
    let inst = gradcheck_instance(seed, size);
    let model = ModelBundle {
        ior: &inst.ior,
        exterior: Exterior::Baked(&inst.background),
        interior: None,
        refr_box: Some(inst.refr_box),
    };
    // Random but seed-fixed L1 target.
    let mut rng = StdRng::seed_from_u64(seed ^ 0xfeed);
    let target = Vec3::new(rng.gen(), rng.gen(), rng.gen());

    let mut log = TraceLog::default();
    let out = trace_mixed_logged(&model, inst.origin, inst.dir, &inst.cfg, &mut log).expect("trace");
    assert!(
        intersect_box(inst.origin, inst.dir, &inst.refr_box).is_some(),
        "instance ray must hit the box"
    );
    let l1_seed = |radiance: Vec3| {
        let mut s = Vec3::zeros();
        for c in 0..3 {
            let d = radiance[c] - target[c];
            s[c] = if d > 0.0 {
                1.0 / 3.0
            } else if d < 0.0 {
                -1.0 / 3.0
            } else {
                0.0
            };
        }
        s
    };
    let seed_costate = Costate::radiance_seed(l1_seed(out.radiance));

    let mut sinks_a = GradSinks::for_ior(inst.ior.param_count());
    integrate_adjoint(&model, &inst.cfg, &log, seed_costate, &mut sinks_a);
    let mut tape = TraceTape::default();
    trace_mixed_taped(&model, inst.origin, inst.dir, &inst.cfg, &mut tape).expect("trace");
    let mut sinks_r = GradSinks::for_ior(inst.ior.param_count());
    backprop_recorded(&model, &inst.cfg, &tape, seed_costate, &mut sinks_r);

    let base: Vec<f32> = inst.ior.raw.values.clone();
    let mut loss = |params: &[f32]| {
        let mut ior = inst.ior.clone();
        ior.raw.values.copy_from_slice(params);
        let m = ModelBundle { ior: &ior, ..model };
        let out = trace_mixed(&m, inst.origin, inst.dir, &inst.cfg).expect("trace");
        let mut l = 0.0;
        for c in 0..3 {
            l += (out.radiance[c] - target[c]).abs() / 3.0;
        }
        l
    };
    let fd = finite_diff_grad(&mut loss, &base, 1e-4);

    GradCheckReport {
        seed,
        adjoint_vs_recorded: l2_rel(
            &sinks_a.ior.as_ref().unwrap().data,
            &sinks_r.ior.as_ref().unwrap().data,
        ),
        adjoint_vs_fd: l2_rel(&sinks_a.ior.as_ref().unwrap().data, &fd),
    }
}

/// Convergence-order probe used by the solver checks: RK4 self-convergence
/// on the smooth-blob eikonal system.
pub fn rk4_self_convergence_ratio() -> f64 {
    let refr_box = RefractiveBox::new(Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0));
    let field = crate::fields::ior::GaussianBlob {
        center: refr_box.center(),
        amplitude: 0.15,
        radius: 0.18 * refr_box.diagonal(),
    };
    let rhs = |_s: f64, z: &[f64; 6]| {
        let p = Vec3::new(z[0], z[1], z[2]);
        let v = Vec3::new(z[3], z[4], z[5]);
        let (n, g) = field.ior_and_gradient(p);
        let dp = v / n;
        [dp.x, dp.y, dp.z, g.x, g.y, g.z]
    };
    let entry = Vec3::new(0.35, 0.45, 0.0);
    let n0 = field.ior(entry);
    let z0 = [entry.x, entry.y, entry.z, 0.0, 0.0, n0];
    let err = |steps: usize| {
        let fine = integrate(&rhs, z0, 0.0, 1.0, &SolverConfig::rk4(steps * 10)).unwrap();
        let test = integrate(&rhs, z0, 0.0, 1.0, &SolverConfig::rk4(steps)).unwrap();
        (0..6)
            .map(|i| (fine[i] - test[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    err(64) / err(128).max(1e-300)
}
