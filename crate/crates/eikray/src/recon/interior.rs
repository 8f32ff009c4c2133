//! Interior radiance fit: with the IoR and exterior frozen, learn emission
//! and absorption grids on the box interior. Rays bend through the fitted
//! IoR while accumulating interior radiance, so occluders inside the
//! refractive volume become explainable.

use crate::fields::ea::LearnableEa;
use crate::fields::ior::IorField;
use crate::fields::GridEa;
use crate::odesolve::{GradBuffer, GradSinks};
use crate::recon::{
    collect_train_rays, l1_batch_pass, sample_batch, AdamState, FitConfig, FitError, LossRow,
};
use crate::scene::Dataset;
use crate::transport::{Exterior, ModelBundle, RefractiveBox, TraceConfig};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Value scale of interior grids (softplus(raw) * scale); high enough that
/// opaque occluders are representable.
pub const INTERIOR_VALUE_SCALE: f64 = 400.0;

/// Interior raw init: softplus(-15) * 400 = 1.2e-4, so an empty interior
/// starts dark.
pub const INTERIOR_RAW_INIT: f32 = -15.0;

/// Fits interior emission/absorption grids on the box with the rest of the
/// model frozen. The trace uses 512 straight-segment steps so interior and
/// exterior radiance are densely sampled.
pub fn fit_interior(
    dataset: &Dataset,
    ior: &IorField,
    exterior: &GridEa,
    refr_box: &RefractiveBox,
    trace_cfg: &TraceConfig,
    cfg: &FitConfig,
) -> Result<(LearnableEa, Vec<LossRow>), FitError> {
    let rays = collect_train_rays(dataset, Some(refr_box));
    if rays.is_empty() {
        return Err(FitError::NoRays);
    }
    let trace_cfg = TraceConfig {
        steps_outside: 512,
        ..*trace_cfg
    };
    let mut interior = LearnableEa::init_on_box_with(
        refr_box,
        [cfg.interior_dims; 3],
        INTERIOR_VALUE_SCALE,
        INTERIOR_VALUE_SCALE,
        INTERIOR_RAW_INIT,
    );
    let n_q = interior.raw_emission.values.len();
    let n_s = interior.raw_absorption.values.len();
    let mut adam_q = AdamState::new(n_q);
    let mut adam_s = AdamState::new(n_s);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1417);
    let mut batch = Vec::new();
    let mut rows = Vec::with_capacity(cfg.iters_interior);

    for iteration in 0..cfg.iters_interior {
        sample_batch(&mut rng, rays.len(), cfg.batch_rays, &mut batch);
        let pass = {
            let model = ModelBundle {
                ior,
                exterior: Exterior::Baked(exterior),
                interior: Some(&interior),
                refr_box: Some(*refr_box),
            };
            l1_batch_pass(&model, &trace_cfg, &rays, &batch, &|| GradSinks {
                interior_emission: Some(GradBuffer::zeros(n_q)),
                interior_absorption: Some(GradBuffer::zeros(n_s)),
                ..Default::default()
            })
        };
        if !pass.loss.is_finite() {
            return Err(FitError::Diverged {
                iteration,
                detail: format!("loss {}", pass.loss),
            });
        }
        if pass.trapped * 2 > batch.len() {
            log::warn!(
                "iteration {iteration}: {}/{} rays trapped, skipping batch",
                pass.trapped,
                batch.len()
            );
        } else {
            adam_q.step(
                &mut interior.raw_emission.values,
                &pass.sinks.interior_emission.as_ref().unwrap().data,
                cfg.lr_background,
            );
            adam_s.step(
                &mut interior.raw_absorption.values,
                &pass.sinks.interior_absorption.as_ref().unwrap().data,
                cfg.lr_background,
            );
        }
        rows.push(LossRow {
            iteration,
            loss: pass.loss,
            level: 0,
        });
    }
    Ok((interior, rows))
}
