//! Progressive IoR fit: curved-ray rendering against the baked masked
//! background pyramid, with gradients through the constant-memory adjoint.

use crate::fields::ior::{IorField, RAW_INIT};
use crate::fields::smooth::BakedLevel;
use crate::odesolve::GradSinks;
use crate::recon::{
    collect_train_rays, l1_batch_pass, sample_batch, AdamState, FitConfig, FitError, LossRow,
    Progression,
};
use crate::scene::Dataset;
use crate::transport::{Exterior, ModelBundle, RefractiveBox, TraceConfig};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fits the raw IoR grid on the refractive box. Batches contain only rays
/// that hit the box; the background level follows the progression schedule
/// (bandwidth doubling per `doubling_every` iterations).
pub fn fit_ior(
    dataset: &Dataset,
    levels: &[BakedLevel],
    refr_box: &RefractiveBox,
    trace_cfg: &TraceConfig,
    cfg: &FitConfig,
) -> Result<(IorField, Vec<LossRow>), FitError> {
    assert!(!levels.is_empty(), "need at least one baked level");
    let rays = collect_train_rays(dataset, Some(refr_box));
    if rays.is_empty() {
        return Err(FitError::NoRays);
    }
    log::info!(
        "ior fit: {} box-hitting rays, {} levels, {} iterations",
        rays.len(),
        levels.len(),
        cfg.iters_ior
    );

    let mut ior = IorField::init_on_box(refr_box.min, refr_box.max, [cfg.ior_dims; 3], RAW_INIT);
    let n_params = ior.param_count();
    let mut adam = AdamState::new(n_params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x10f);
    let mut batch = Vec::new();
    let mut rows = Vec::with_capacity(cfg.iters_ior);
    let mut progression = Progression::new(cfg);
    let mut last_loss = f64::INFINITY;

    for iteration in 0..cfg.iters_ior {
        sample_batch(&mut rng, rays.len(), cfg.batch_rays, &mut batch);
        let level = progression
            .level(iteration, cfg.doubling_every, last_loss)
            .min(levels.len() - 1);
        let pass = {
            let model = ModelBundle {
                ior: &ior,
                exterior: Exterior::Baked(&levels[level].grids),
                interior: None,
                refr_box: Some(*refr_box),
            };
            l1_batch_pass(&model, trace_cfg, &rays, &batch, &|| {
                GradSinks::for_ior(n_params)
            })
        };
        if !pass.loss.is_finite() {
            return Err(FitError::Diverged {
                iteration,
                detail: format!("loss {}", pass.loss),
            });
        }
        last_loss = pass.loss;
        if pass.trapped * 2 > batch.len() {
            log::warn!(
                "iteration {iteration}: {}/{} rays trapped, skipping batch",
                pass.trapped,
                batch.len()
            );
        } else {
            adam.step(
                &mut ior.raw.values,
                &pass.sinks.ior.as_ref().unwrap().data,
                cfg.learning_rate,
            );
        }
        debug_assert!(ior.raw.all_finite());
        rows.push(LossRow {
            iteration,
            loss: pass.loss,
            level,
        });
    }
    Ok((ior, rows))
}
