//! Posed multi-view datasets: manifest IO, train/test splitting, and
//! synthetic ground-truth generation (images, masks, depth, boxes).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::imageio::{self, ImageF};
use crate::scene::{estimate_box, Camera, Scene};
use crate::transport::{self, intersect_box, RefractiveBox, TraceConfig};
use crate::Vec3;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("missing or unreadable file {path}: {detail}")]
    BadFile { path: String, detail: String },
    #[error(transparent)]
    Image(#[from] imageio::ImageError),
    #[error(transparent)]
    Scene(#[from] crate::scene::SceneError),
    #[error("render failed: {0}")]
    Render(#[from] transport::TraceError),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ViewRecord {
    pub image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    pub camera: Camera,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitRecord {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub views: Vec<ViewRecord>,
    pub split: SplitRecord,
    pub seed: u64,
}

/// Loaded dataset: manifest plus decoded images and aux maps.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub images: Vec<ImageF>,
    pub masks: Vec<Option<Vec<bool>>>,
    pub depths: Vec<Option<ImageF>>,
}

impl Dataset {
    pub fn camera(&self, view: usize) -> &Camera {
        &self.manifest.views[view].camera
    }
    pub fn train_views(&self) -> &[usize] {
        &self.manifest.split.train
    }
    pub fn test_views(&self) -> &[usize] {
        &self.manifest.split.test
    }
}

/// Seeded hold-out split: ceil(n/10) test views, the rest train, both sorted.
pub fn make_split(n: usize, seed: u64) -> SplitRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_test = n.div_ceil(10);
    let mut test: Vec<usize> = order[..n_test].to_vec();
    let mut train: Vec<usize> = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    SplitRecord { train, test }
}

pub fn save_manifest(dir: &Path, manifest: &Manifest) -> Result<(), DatasetError> {
    let path = dir.join("dataset.json");
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| DatasetError::Manifest(e.to_string()))?;
    fs::write(&path, json).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Reads `dataset.json` and decodes every referenced file; a missing or
/// corrupt file fails with its path.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let mpath = dir.join("dataset.json");
    let text = fs::read_to_string(&mpath).map_err(|e| DatasetError::Io {
        path: mpath.display().to_string(),
        source: e,
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?;

    let n = manifest.views.len();
    for idx in manifest.split.train.iter().chain(&manifest.split.test) {
        if *idx >= n {
            return Err(DatasetError::Manifest(format!(
                "split references view {idx} of {n}"
            )));
        }
    }
    if manifest
        .split
        .train
        .iter()
        .any(|i| manifest.split.test.contains(i))
    {
        return Err(DatasetError::Manifest(
            "train and test splits overlap".into(),
        ));
    }

    let mut images = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut depths = Vec::with_capacity(n);
    for view in &manifest.views {
        view.camera.validate()?;
        let ipath = dir.join(&view.image);
        let image = imageio::read_pfm(&ipath)?;
        if image.width != view.camera.resolution[0] || image.height != view.camera.resolution[1] {
            return Err(DatasetError::BadFile {
                path: ipath.display().to_string(),
                detail: format!(
                    "image {}x{} does not match camera resolution {:?}",
                    image.width, image.height, view.camera.resolution
                ),
            });
        }
        images.push(image);
        masks.push(match &view.mask {
            Some(name) => {
                let (w, h, m) = imageio::read_ppm_mask(&dir.join(name))?;
                if w != view.camera.resolution[0] || h != view.camera.resolution[1] {
                    return Err(DatasetError::BadFile {
                        path: dir.join(name).display().to_string(),
                        detail: "mask resolution mismatch".into(),
                    });
                }
                Some(m)
            }
            None => None,
        });
        depths.push(match &view.depth {
            Some(name) => Some(imageio::read_pfm(&dir.join(name))?),
            None => None,
        });
    }
    Ok(Dataset {
        dir: dir.to_path_buf(),
        manifest,
        images,
        masks,
        depths,
    })
}

fn ray_sphere(origin: Vec3, dir: Vec3, center: Vec3, radius: f64) -> Option<f64> {
    let oc = origin - center;
    let b = oc.dot(&dir);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    if t > 0.0 {
        Some(t)
    } else {
        None
    }
}

/// Renders the ground-truth dataset: PFM images (plus PPM previews), masks
/// from refraction-induced background displacement, depth maps from the known
/// geometry, the estimated refractive box (`box.json`), and the ground-truth
/// box (`gt_box.json`).
pub fn generate_dataset(
    scene: &Scene,
    seed: u64,
    out_dir: &Path,
) -> Result<Dataset, DatasetError> {
    fs::create_dir_all(out_dir).map_err(|e| DatasetError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let spec = &scene.spec;
    let cfg = TraceConfig {
        far_bound: spec.far_bound,
        steps_outside: if scene.interior_gt.is_some() { 512 } else { 128 },
        ..TraceConfig::default()
    };
    let bundle = scene.gt_bundle();
    let geom_bundle = transport::ModelBundle {
        exterior: transport::Exterior::Empty,
        interior: None,
        ..bundle
    };

    let mut views = Vec::with_capacity(scene.cameras.len());
    let mut mask_views = Vec::with_capacity(scene.cameras.len());
    for (i, camera) in scene.cameras.iter().enumerate() {
        let render = transport::render_image(&bundle, camera, &cfg)?;
        let image_name = format!("view_{i:03}.pfm");
        imageio::write_pfm(&out_dir.join(&image_name), &render.color)?;
        imageio::write_ppm_preview(
            &out_dir.join(format!("preview_{i:03}.ppm")),
            &render.color,
            2.2,
        )?;

        // Mask: box-hitting pixels whose background hit point moves by more
        // than the threshold; depth: distance to the ground-truth support.
        let (w, h) = (camera.resolution[0], camera.resolution[1]);
        let mut mask = vec![false; w * h];
        let mut depth = ImageF::new(w, h, 1);
        for y in 0..h {
            for x in 0..w {
                let (o, d) = camera.pixel_ray(x, y);
                let idx = y * w + x;
                let hit = intersect_box(o, d, &spec.refr_box);
                let mut t_depth = spec.far_bound;
                if let Some((t0, _)) = hit {
                    t_depth = t0;
                    if let Some((c, r)) = scene.gt_ior.support_sphere() {
                        if let Some(ts) = ray_sphere(o, d, c, r) {
                            t_depth = ts;
                        }
                        let bent = transport::trace_mixed(&geom_bundle, o, d, &cfg)?;
                        let far_straight = o + d * spec.far_bound;
                        let far_bent = if bent.trapped {
                            far_straight
                        } else {
                            bent.final_state.p
                        };
                        let displacement = (far_bent - far_straight).norm();
                        mask[idx] = bent.trapped || displacement > spec.mask_threshold;
                    }
                }
                depth.pixel_mut(x, y)[0] = t_depth as f32;
            }
        }
        imageio::write_ppm_mask(&out_dir.join(format!("mask_{i:03}.ppm")), w, h, &mask)?;
        imageio::write_pfm(&out_dir.join(format!("depth_{i:03}.pfm")), &depth)?;
        mask_views.push((
            camera.clone(),
            mask.clone(),
            depth.data.clone(),
        ));
        views.push(ViewRecord {
            image: image_name,
            mask: Some(format!("mask_{i:03}.ppm")),
            depth: Some(format!("depth_{i:03}.pfm")),
            camera: camera.clone(),
        });
    }

    // Refractive box: estimated from masks and depth where possible,
    // otherwise the ground-truth box (refraction-free control scenes).
    let estimated = estimate_box(&mask_views);
    let boxes_json = |b: &RefractiveBox| serde_json::to_string_pretty(b).unwrap();
    fs::write(out_dir.join("gt_box.json"), boxes_json(&spec.refr_box)).map_err(|e| {
        DatasetError::Io {
            path: out_dir.join("gt_box.json").display().to_string(),
            source: e,
        }
    })?;
    let box_used = match estimated {
        Ok(b) => b,
        Err(_) => spec.refr_box,
    };
    fs::write(out_dir.join("box.json"), boxes_json(&box_used)).map_err(|e| DatasetError::Io {
        path: out_dir.join("box.json").display().to_string(),
        source: e,
    })?;
    fs::write(
        out_dir.join("scene.json"),
        serde_json::to_string_pretty(spec).unwrap(),
    )
    .map_err(|e| DatasetError::Io {
        path: out_dir.join("scene.json").display().to_string(),
        source: e,
    })?;

    let manifest = Manifest {
        views,
        split: make_split(scene.cameras.len(), seed),
        seed,
    };
    save_manifest(out_dir, &manifest)?;
    load_dataset(out_dir)
}

pub fn read_box(path: &Path) -> Result<RefractiveBox, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))
}
