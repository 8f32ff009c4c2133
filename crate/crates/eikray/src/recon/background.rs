//! Background emission-absorption fit: straight-ray rendering of learnable
//! masked grids under mean-absolute-error.

use crate::fields::ea::{LearnableEa, MaskedEa};
use crate::fields::ior::IorField;
use crate::odesolve::{GradBuffer, GradSinks};
use crate::recon::{
    collect_train_rays, l1_batch_pass, sample_batch, AdamState, FitConfig, FitError, LossRow,
};
use crate::scene::Dataset;
use crate::transport::{Exterior, ModelBundle, RefractiveBox, TraceConfig};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Value scale of learnable background grids: softplus(raw) * scale.
pub const BG_VALUE_SCALE: f64 = 50.0;

/// Raw value written into masked voxels after every step; softplus of it
/// underflows f32, and rendering masks the region to exact zero anyway.
pub const MASK_CLAMP_RAW: f32 = -30.0;

/// Fits emission/absorption grids over `domain` to the training views with
/// straight-ray rendering. Voxels inside the masked box are clamped after
/// every optimizer step and contribute exactly zero to rendering.
pub fn fit_background(
    dataset: &Dataset,
    domain: &RefractiveBox,
    mask: Option<RefractiveBox>,
    trace_cfg: &TraceConfig,
    cfg: &FitConfig,
) -> Result<(LearnableEa, Vec<LossRow>), FitError> {
    let rays = collect_train_rays(dataset, None);
    if rays.is_empty() {
        return Err(FitError::NoRays);
    }
    let dims = [cfg.bg_dims; 3];
    let mut ea = LearnableEa::init_on_box(domain, dims, BG_VALUE_SCALE, BG_VALUE_SCALE);
    clamp_masked(&mut ea, mask.as_ref());
    // The straight-ray stage never evaluates the IoR; the bundle still needs
    // one.
    let unit_ior = IorField::init_on_box(domain.min, domain.max, [2, 2, 2], -30.0);

    let n_q = ea.raw_emission.values.len();
    let n_s = ea.raw_absorption.values.len();
    let mut adam_q = AdamState::new(n_q);
    let mut adam_s = AdamState::new(n_s);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xb6);
    let mut batch = Vec::new();
    let mut rows = Vec::with_capacity(cfg.iters_background);

    for iteration in 0..cfg.iters_background {
        sample_batch(&mut rng, rays.len(), cfg.batch_rays, &mut batch);
        let pass = {
            let masked = MaskedEa::new(&ea, mask);
            let model = ModelBundle {
                ior: &unit_ior,
                exterior: Exterior::Learnable(&masked),
                interior: None,
                refr_box: None,
            };
            l1_batch_pass(&model, trace_cfg, &rays, &batch, &|| GradSinks {
                exterior_emission: Some(GradBuffer::zeros(n_q)),
                exterior_absorption: Some(GradBuffer::zeros(n_s)),
                ..Default::default()
            })
        };
        if !pass.loss.is_finite() {
            return Err(FitError::Diverged {
                iteration,
                detail: format!("loss {}", pass.loss),
            });
        }
        adam_q.step(
            &mut ea.raw_emission.values,
            &pass.sinks.exterior_emission.as_ref().unwrap().data,
            cfg.lr_background,
        );
        adam_s.step(
            &mut ea.raw_absorption.values,
            &pass.sinks.exterior_absorption.as_ref().unwrap().data,
            cfg.lr_background,
        );
        clamp_masked(&mut ea, mask.as_ref());
        debug_assert!(ea.raw_emission.all_finite() && ea.raw_absorption.all_finite());
        rows.push(LossRow {
            iteration,
            loss: pass.loss,
            level: 0,
        });
    }
    Ok((ea, rows))
}

fn clamp_masked(ea: &mut LearnableEa, mask: Option<&RefractiveBox>) {
    let Some(mask) = mask else { return };
    let dims = ea.raw_absorption.dims;
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let p = ea.raw_absorption.node_pos(i, j, k);
                if mask.contains(p) {
                    let idx = ea.raw_absorption.value_index(i, j, k, 0);
                    ea.raw_absorption.values[idx] = MASK_CLAMP_RAW;
                    for c in 0..3 {
                        let idx = ea.raw_emission.value_index(i, j, k, c);
                        ea.raw_emission.values[idx] = MASK_CLAMP_RAW;
                    }
                }
            }
        }
    }
}
