//! Held-out evaluation: render test views, compare against the dataset
//! images, and emit a machine-readable report.

use crate::fields::ior::Refractive;
use crate::imageio::{psnr, ssim};
use crate::scene::Dataset;
use crate::transport::{render_image, ModelBundle, TraceConfig, TraceError};

/// Serialized stand-in for an infinite PSNR (identical images); JSON has no
/// infinity literal.
pub const PSNR_SENTINEL_DB: f64 = 999.0;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ViewMetrics {
    pub index: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

impl MetricsReport {
    pub fn from_views(views: Vec<ViewMetrics>) -> Self {
        let n = views.len().max(1) as f64;
        let mean_psnr_db = views.iter().map(|v| v.psnr_db).sum::<f64>() / n;
        let mean_ssim = views.iter().map(|v| v.ssim).sum::<f64>() / n;
        MetricsReport {
            views,
            mean_psnr_db,
            mean_ssim,
        }
    }
}

/// Renders every listed view and reports PSNR/SSIM against the dataset
/// images.
pub fn evaluate<R: Refractive + Sync>(
    model: &ModelBundle<R>,
    dataset: &Dataset,
    views: &[usize],
    trace_cfg: &TraceConfig,
) -> Result<MetricsReport, TraceError> {
    let mut out = Vec::with_capacity(views.len());
    for &view in views {
        let camera = dataset.camera(view);
        let render = render_image(model, camera, trace_cfg)?;
        let reference = &dataset.images[view];
        let p = psnr(&render.color, reference, 1.0).expect("matching shapes");
        let s = ssim(&render.color, reference).expect("matching shapes");
        out.push(ViewMetrics {
            index: view,
            psnr_db: if p.is_finite() { p } else { PSNR_SENTINEL_DB },
            ssim: s,
        });
    }
    Ok(MetricsReport::from_views(out))
}
