//! Model checkpoints: one grid file per field plus a `model.json` sidecar
//! naming the grids, the refractive box, the stage provenance, and the
//! configuration used.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::fields::ea::LearnableEa;
use crate::fields::grid::{GridError, GridField};
use crate::fields::ior::IorField;
use crate::recon::FitConfig;
use crate::transport::RefractiveBox;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("bad model.json: {0}")]
    Sidecar(String),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelJson {
    /// Stages written so far, in order ("background", "ior", "interior").
    pub stages: Vec<String>,
    pub refr_box: Option<RefractiveBox>,
    /// Logical name -> grid file name.
    pub grids: BTreeMap<String, String>,
    /// softplus value scales for learnable grids, keyed like `grids`.
    pub scales: BTreeMap<String, f64>,
    pub config: FitConfig,
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_sidecar(dir: &Path) -> Result<Option<ModelJson>, CheckpointError> {
    let path = dir.join("model.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| CheckpointError::Sidecar(e.to_string()))
}

fn write_sidecar(dir: &Path, json: &ModelJson) -> Result<(), CheckpointError> {
    let path = dir.join("model.json");
    fs::write(&path, serde_json::to_string_pretty(json).unwrap()).map_err(|e| io_err(&path, e))
}

fn base_sidecar(
    existing: Option<ModelJson>,
    refr_box: Option<RefractiveBox>,
    cfg: &FitConfig,
) -> ModelJson {
    match existing {
        Some(mut m) => {
            if m.refr_box.is_none() {
                m.refr_box = refr_box;
            }
            m.config = cfg.clone();
            m
        }
        None => ModelJson {
            stages: Vec::new(),
            refr_box,
            grids: BTreeMap::new(),
            scales: BTreeMap::new(),
            config: cfg.clone(),
        },
    }
}

pub fn save_background(
    dir: &Path,
    ea: &LearnableEa,
    mask: Option<RefractiveBox>,
    cfg: &FitConfig,
) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    ea.raw_emission.write_file(&dir.join("bg_emission.grid"))?;
    ea.raw_absorption.write_file(&dir.join("bg_absorption.grid"))?;
    let mut sidecar = base_sidecar(read_sidecar(dir)?, mask, cfg);
    if !sidecar.stages.iter().any(|s| s == "background") {
        sidecar.stages.push("background".into());
    }
    sidecar.grids.insert("bg_emission".into(), "bg_emission.grid".into());
    sidecar.grids.insert("bg_absorption".into(), "bg_absorption.grid".into());
    sidecar.scales.insert("bg_emission".into(), ea.emission_scale);
    sidecar.scales.insert("bg_absorption".into(), ea.absorption_scale);
    write_sidecar(dir, &sidecar)
}

pub fn save_ior(
    dir: &Path,
    ior: &IorField,
    refr_box: &RefractiveBox,
    cfg: &FitConfig,
) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    ior.raw.write_file(&dir.join("ior_raw.grid"))?;
    let mut sidecar = base_sidecar(read_sidecar(dir)?, Some(*refr_box), cfg);
    sidecar.refr_box = Some(*refr_box);
    if !sidecar.stages.iter().any(|s| s == "ior") {
        sidecar.stages.push("ior".into());
    }
    sidecar.grids.insert("ior_raw".into(), "ior_raw.grid".into());
    write_sidecar(dir, &sidecar)
}

pub fn save_interior(
    dir: &Path,
    interior: &LearnableEa,
    refr_box: &RefractiveBox,
    cfg: &FitConfig,
) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    interior
        .raw_emission
        .write_file(&dir.join("interior_emission.grid"))?;
    interior
        .raw_absorption
        .write_file(&dir.join("interior_absorption.grid"))?;
    let mut sidecar = base_sidecar(read_sidecar(dir)?, Some(*refr_box), cfg);
    if !sidecar.stages.iter().any(|s| s == "interior") {
        sidecar.stages.push("interior".into());
    }
    sidecar
        .grids
        .insert("interior_emission".into(), "interior_emission.grid".into());
    sidecar
        .grids
        .insert("interior_absorption".into(), "interior_absorption.grid".into());
    sidecar
        .scales
        .insert("interior_emission".into(), interior.emission_scale);
    sidecar
        .scales
        .insert("interior_absorption".into(), interior.absorption_scale);
    write_sidecar(dir, &sidecar)
}

/// Whatever stages a checkpoint directory holds.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub sidecar: ModelJson,
    pub background: Option<LearnableEa>,
    pub ior: Option<IorField>,
    pub interior: Option<LearnableEa>,
}

pub fn load_model(dir: &Path) -> Result<LoadedModel, CheckpointError> {
    let sidecar = read_sidecar(dir)?
        .ok_or_else(|| CheckpointError::Sidecar(format!("{} has no model.json", dir.display())))?;
    let grid = |name: &str| -> Result<Option<GridField>, CheckpointError> {
        match sidecar.grids.get(name) {
            Some(file) => Ok(Some(GridField::read_file(&dir.join(file))?)),
            None => Ok(None),
        }
    };
    let scale = |name: &str| sidecar.scales.get(name).copied().unwrap_or(1.0);
    let background = match (grid("bg_emission")?, grid("bg_absorption")?) {
        (Some(q), Some(s)) => Some(LearnableEa {
            raw_emission: q,
            raw_absorption: s,
            emission_scale: scale("bg_emission"),
            absorption_scale: scale("bg_absorption"),
        }),
        _ => None,
    };
    let interior = match (grid("interior_emission")?, grid("interior_absorption")?) {
        (Some(q), Some(s)) => Some(LearnableEa {
            raw_emission: q,
            raw_absorption: s,
            emission_scale: scale("interior_emission"),
            absorption_scale: scale("interior_absorption"),
        }),
        _ => None,
    };
    let ior = grid("ior_raw")?.map(IorField::new);
    Ok(LoadedModel {
        sidecar,
        background,
        ior,
        interior,
    })
}
