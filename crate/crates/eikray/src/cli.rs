//! Command-line pipeline: scene generation, staged fitting, rendering,
//! metrics, and the validation/gradient-check suites.
//!
//! Exit codes: 0 success, 1 runtime or numeric failure, 2 configuration
//! error. Every run writes `config.resolved.json` with the effective
//! configuration; reruns with identical config and seed produce
//! byte-identical artifacts.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::fields::smooth::{bake_masked_grid, progression_kernels, SmoothingKernel};
use crate::recon::{
    self, fit_background, fit_interior, fit_ior, load_model, write_loss_log, FitConfig,
};
use crate::scene::{build_scene, dataset, SceneSpec};
use crate::transport::{Exterior, ModelBundle, RefractiveBox, TraceConfig};
use crate::validate;

/// Bandwidth whose kernel collapses to the identity tap; used to bake the
/// unsmoothed background for the interior stage.
const IDENTITY_BANDWIDTH: f64 = 100.0;

#[derive(Debug)]
enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }
    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

/// Full run configuration: scene, fit hyperparameters, solver settings, and
/// the seed. A config file provides the base; flags override single fields.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub fit: FitConfig,
    pub trace: TraceConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: SceneSpec::blob_lens(),
            fit: FitConfig::default(),
            trace: TraceConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "eikray",
    version,
    about = "Curved-ray volumetric rendering and index-of-refraction reconstruction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CommonOpts {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seed for dataset splits, batch sampling, and initialization.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: machine parallelism).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
struct FitOverrides {
    #[arg(long)]
    batch_rays: Option<usize>,
    #[arg(long)]
    iters_background: Option<usize>,
    #[arg(long)]
    iters_ior: Option<usize>,
    #[arg(long)]
    iters_interior: Option<usize>,
    #[arg(long)]
    bandwidth0: Option<f64>,
    #[arg(long)]
    doubling_every: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lr_background: Option<f64>,
    #[arg(long)]
    bg_dims: Option<usize>,
    #[arg(long)]
    ior_dims: Option<usize>,
    #[arg(long)]
    interior_dims: Option<usize>,
    #[arg(long)]
    bake_dims: Option<usize>,
    #[arg(long)]
    steps_inside: Option<usize>,
    #[arg(long)]
    steps_outside: Option<usize>,
    #[arg(long)]
    far_bound: Option<f64>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum Stage {
    Background,
    Ior,
    Interior,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum BackgroundSource {
    /// Ground-truth analytic backdrops from the dataset's scene.json.
    Scene,
    /// The background checkpoint fitted earlier into the model directory.
    Fitted,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum ViewSelection {
    Test,
    Train,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a synthetic scene and render its ground-truth dataset.
    MakeScene {
        #[command(flatten)]
        common: CommonOpts,
        /// Scene preset: blob-lens, no-refraction, interior-stick.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Run one reconstruction stage against a dataset.
    Fit {
        stage: Stage,
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        dataset: PathBuf,
        /// Background model for the ior/interior stages.
        #[arg(long, value_enum, default_value_t = BackgroundSource::Fitted)]
        background: BackgroundSource,
        #[command(flatten)]
        overrides: FitOverrides,
    },
    /// Render dataset views with a fitted model.
    Render {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = ViewSelection::Test)]
        views: ViewSelection,
        #[arg(long, value_enum, default_value_t = BackgroundSource::Fitted)]
        background: BackgroundSource,
        #[command(flatten)]
        overrides: FitOverrides,
    },
    /// Compare matching PFM images of two directories.
    Metrics {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        dir_a: PathBuf,
        #[arg(long)]
        dir_b: PathBuf,
    },
    /// Three-way gradient comparison (adjoint, recorded, finite differences).
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Physics validation suite (focusing, refraction law, conservation,
    /// degeneracy).
    Validate {
        #[arg(long)]
        threads: Option<usize>,
    },
}

/// Entry point used by `main`; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are successful exits; anything else is usage.
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    let result = match cli.command {
        Command::MakeScene { common, preset } => cmd_make_scene(&common, preset.as_deref()),
        Command::Fit {
            stage,
            common,
            dataset,
            background,
            overrides,
        } => cmd_fit(stage, &common, &dataset, background, &overrides),
        Command::Render {
            common,
            model,
            dataset,
            views,
            background,
            overrides,
        } => cmd_render(&common, &model, &dataset, views, background, &overrides),
        Command::Metrics {
            common,
            dir_a,
            dir_b,
        } => cmd_metrics(&common, &dir_a, &dir_b),
        Command::Gradcheck { seed, size, threads } => {
            init_threads(threads);
            cmd_gradcheck(seed, size)
        }
        Command::Validate { threads } => {
            init_threads(threads);
            cmd_validate()
        }
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            2
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

fn init_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        // Ignore the error when a global pool already exists (tests drive
        // several commands in one process).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn resolve_config(common: &CommonOpts, overrides: Option<&FitOverrides>) -> Result<RunConfig, CliError> {
    init_threads(common.threads);
    let mut cfg: RunConfig = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("bad config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.fit.seed = cfg.seed;
    if let Some(ov) = overrides {
        let f = &mut cfg.fit;
        macro_rules! ov_field {
            ($name:ident, $target:expr) => {
                if let Some(v) = ov.$name {
                    $target = v;
                }
            };
        }
        ov_field!(batch_rays, f.batch_rays);
        ov_field!(iters_background, f.iters_background);
        ov_field!(iters_ior, f.iters_ior);
        ov_field!(iters_interior, f.iters_interior);
        ov_field!(bandwidth0, f.bandwidth0);
        ov_field!(doubling_every, f.doubling_every);
        ov_field!(learning_rate, f.learning_rate);
        ov_field!(lr_background, f.lr_background);
        ov_field!(bg_dims, f.bg_dims);
        ov_field!(ior_dims, f.ior_dims);
        ov_field!(interior_dims, f.interior_dims);
        ov_field!(bake_dims, f.bake_dims);
        ov_field!(steps_inside, cfg.trace.steps_inside);
        ov_field!(steps_outside, cfg.trace.steps_outside);
        ov_field!(far_bound, cfg.trace.far_bound);
    }
    Ok(cfg)
}

fn write_resolved(out: &Path, cfg: &RunConfig) -> CliResult {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    std::fs::write(
        out.join("config.resolved.json"),
        serde_json::to_string_pretty(cfg).unwrap(),
    )
    .map_err(CliError::runtime)
}

fn cmd_make_scene(common: &CommonOpts, preset: Option<&str>) -> CliResult {
    let mut cfg = resolve_config(common, None)?;
    if let Some(name) = preset {
        cfg.scene = match name {
            "blob-lens" => SceneSpec::blob_lens(),
            "no-refraction" => SceneSpec::no_refraction(),
            "interior-stick" => SceneSpec::interior_stick(),
            other => return Err(CliError::Config(format!("unknown preset {other:?}"))),
        };
    }
    let scene = build_scene(&cfg.scene).map_err(CliError::config)?;
    write_resolved(&common.out, &cfg)?;
    let ds = dataset::generate_dataset(&scene, cfg.seed, &common.out).map_err(CliError::runtime)?;
    println!(
        "wrote {} views ({} train / {} test) to {}",
        ds.manifest.views.len(),
        ds.manifest.split.train.len(),
        ds.manifest.split.test.len(),
        common.out.display()
    );
    Ok(())
}

fn load_scene_spec(dataset_dir: &Path) -> Result<SceneSpec, CliError> {
    let path = dataset_dir.join("scene.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Config(format!("dataset has no scene.json ({e})")))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("bad scene.json: {e}")))
}

fn load_box(dataset_dir: &Path) -> Result<RefractiveBox, CliError> {
    let path = dataset_dir.join("box.json");
    dataset::read_box(&path)
        .map_err(|e| CliError::Config(format!("dataset lacks a readable box file: {e}")))
}

/// Bakes the masked background pyramid from either the scene's analytic
/// backdrops or a fitted background checkpoint.
fn bake_pyramid(
    source: BackgroundSource,
    spec: &SceneSpec,
    model_dir: &Path,
    refr_box: &RefractiveBox,
    kernels: &[SmoothingKernel],
    bake_dims: usize,
) -> Result<Vec<crate::fields::smooth::BakedLevel>, CliError> {
    let dims = [bake_dims; 3];
    match source {
        BackgroundSource::Scene => {
            let scene = build_scene(spec).map_err(CliError::config)?;
            bake_masked_grid(&scene.backdrops, refr_box, &spec.bg_domain, dims, kernels)
                .map_err(CliError::runtime)
        }
        BackgroundSource::Fitted => {
            let model = load_model(model_dir).map_err(|e| {
                CliError::Config(format!(
                    "--background fitted needs a background checkpoint in {}: {e}",
                    model_dir.display()
                ))
            })?;
            let bg = model.background.ok_or_else(|| {
                CliError::Config("checkpoint has no background stage".to_string())
            })?;
            let masked = crate::fields::ea::MaskedEa::new(&bg, Some(*refr_box));
            bake_masked_grid(&masked, refr_box, &spec.bg_domain, dims, kernels)
                .map_err(CliError::runtime)
        }
    }
}

fn cmd_fit(
    stage: Stage,
    common: &CommonOpts,
    dataset_dir: &Path,
    background: BackgroundSource,
    overrides: &FitOverrides,
) -> CliResult {
    let cfg = resolve_config(common, Some(overrides))?;
    let ds = dataset::load_dataset(dataset_dir).map_err(CliError::config)?;
    let spec = load_scene_spec(dataset_dir)?;
    let trace_cfg = TraceConfig {
        far_bound: spec.far_bound,
        steps_inside: cfg.trace.steps_inside,
        steps_outside: cfg.trace.steps_outside,
        ..TraceConfig::default()
    };
    write_resolved(&common.out, &cfg)?;

    match stage {
        Stage::Background => {
            let mask = load_box(dataset_dir).ok();
            let (ea, rows) =
                fit_background(&ds, &spec.bg_domain, mask, &trace_cfg, &cfg.fit)
                    .map_err(CliError::runtime)?;
            recon::checkpoint::save_background(&common.out, &ea, mask, &cfg.fit)
                .map_err(CliError::runtime)?;
            write_loss_log(&common.out.join("loss_background.csv"), &rows)
                .map_err(CliError::runtime)?;
            println!(
                "background fit done: final loss {:.6}",
                rows.last().map(|r| r.loss).unwrap_or(f64::NAN)
            );
        }
        Stage::Ior => {
            let refr_box = load_box(dataset_dir)?;
            let kernels = progression_kernels(cfg.fit.bandwidth0, cfg.fit.pyramid_levels());
            let levels = bake_pyramid(
                background,
                &spec,
                &common.out,
                &refr_box,
                &kernels,
                cfg.fit.bake_dims,
            )?;
            let (ior, rows) =
                fit_ior(&ds, &levels, &refr_box, &trace_cfg, &cfg.fit).map_err(CliError::runtime)?;
            recon::checkpoint::save_ior(&common.out, &ior, &refr_box, &cfg.fit)
                .map_err(CliError::runtime)?;
            write_loss_log(&common.out.join("loss_ior.csv"), &rows).map_err(CliError::runtime)?;
            println!(
                "ior fit done: final loss {:.6}",
                rows.last().map(|r| r.loss).unwrap_or(f64::NAN)
            );
        }
        Stage::Interior => {
            let refr_box = load_box(dataset_dir)?;
            let model = load_model(&common.out).map_err(|e| {
                CliError::Config(format!("interior stage needs an ior checkpoint: {e}"))
            })?;
            let ior = model
                .ior
                .ok_or_else(|| CliError::Config("checkpoint has no ior stage".to_string()))?;
            let kernels = [SmoothingKernel::new(IDENTITY_BANDWIDTH)];
            let levels = bake_pyramid(
                background,
                &spec,
                &common.out,
                &refr_box,
                &kernels,
                cfg.fit.bake_dims,
            )?;
            let (interior, rows) = fit_interior(
                &ds,
                &ior,
                &levels[0].grids,
                &refr_box,
                &trace_cfg,
                &cfg.fit,
            )
            .map_err(CliError::runtime)?;
            recon::checkpoint::save_interior(&common.out, &interior, &refr_box, &cfg.fit)
                .map_err(CliError::runtime)?;
            write_loss_log(&common.out.join("loss_interior.csv"), &rows)
                .map_err(CliError::runtime)?;
            println!(
                "interior fit done: final loss {:.6}",
                rows.last().map(|r| r.loss).unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}

fn cmd_render(
    common: &CommonOpts,
    model_dir: &Path,
    dataset_dir: &Path,
    views: ViewSelection,
    background: BackgroundSource,
    overrides: &FitOverrides,
) -> CliResult {
    let cfg = resolve_config(common, Some(overrides))?;
    let ds = dataset::load_dataset(dataset_dir).map_err(CliError::config)?;
    let spec = load_scene_spec(dataset_dir)?;
    let model = load_model(model_dir).map_err(CliError::config)?;
    let trace_cfg = TraceConfig {
        far_bound: spec.far_bound,
        steps_outside: if model.interior.is_some() { 512 } else { cfg.trace.steps_outside },
        steps_inside: cfg.trace.steps_inside,
        ..TraceConfig::default()
    };
    write_resolved(&common.out, &cfg)?;

    let scene = build_scene(&spec).map_err(CliError::config)?;
    let refr_box = model.sidecar.refr_box;
    let ior = model.ior.clone().unwrap_or_else(|| {
        crate::fields::ior::IorField::init_on_box(
            spec.refr_box.min,
            spec.refr_box.max,
            [2, 2, 2],
            crate::fields::ior::RAW_INIT,
        )
    });
    let fitted_bg = model
        .background
        .as_ref()
        .map(|bg| crate::fields::ea::MaskedEa::new(bg, refr_box));
    let exterior = match (background, fitted_bg.as_ref()) {
        (BackgroundSource::Fitted, Some(masked)) => Exterior::Learnable(masked),
        _ => Exterior::Analytic(&scene.backdrops),
    };
    let bundle = ModelBundle {
        ior: &ior,
        exterior,
        interior: model.interior.as_ref(),
        refr_box: if model.ior.is_some() { refr_box } else { None },
    };

    let selected: Vec<usize> = match views {
        ViewSelection::Test => ds.test_views().to_vec(),
        ViewSelection::Train => ds.train_views().to_vec(),
        ViewSelection::All => (0..ds.manifest.views.len()).collect(),
    };
    let mut trapped_total = 0usize;
    for &view in &selected {
        let camera = ds.camera(view);
        let render = crate::transport::render_image(&bundle, camera, &trace_cfg)
            .map_err(CliError::runtime)?;
        trapped_total += render.trapped.iter().filter(|&&t| t).count();
        crate::imageio::write_pfm(
            &common.out.join(format!("render_{view:03}.pfm")),
            &render.color,
        )
        .map_err(CliError::runtime)?;
        crate::imageio::write_ppm_preview(
            &common.out.join(format!("render_{view:03}.ppm")),
            &render.color,
            2.2,
        )
        .map_err(CliError::runtime)?;
    }
    println!(
        "rendered {} views to {} ({} trapped rays)",
        selected.len(),
        common.out.display(),
        trapped_total
    );
    Ok(())
}

fn cmd_metrics(common: &CommonOpts, dir_a: &Path, dir_b: &Path) -> CliResult {
    let list = |dir: &Path| -> Result<Vec<String>, CliError> {
        let mut names: Vec<String> = std::fs::read_dir(dir)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", dir.display())))?
            .filter_map(|ent| ent.ok())
            .map(|ent| ent.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".pfm"))
            .collect();
        names.sort();
        Ok(names)
    };
    let names_a = list(dir_a)?;
    let names_b = list(dir_b)?;
    let common_names: Vec<&String> = names_a.iter().filter(|n| names_b.contains(n)).collect();
    if common_names.is_empty() {
        return Err(CliError::Config(
            "no matching .pfm files between the directories".to_string(),
        ));
    }
    let mut views = Vec::new();
    for (index, name) in common_names.iter().enumerate() {
        let a = crate::imageio::read_pfm(&dir_a.join(name.as_str())).map_err(CliError::runtime)?;
        let b = crate::imageio::read_pfm(&dir_b.join(name.as_str())).map_err(CliError::runtime)?;
        let p = crate::imageio::psnr(&a, &b, 1.0).map_err(CliError::runtime)?;
        let s = crate::imageio::ssim(&a, &b).map_err(CliError::runtime)?;
        views.push(recon::ViewMetrics {
            index,
            psnr_db: if p.is_finite() { p } else { recon::PSNR_SENTINEL_DB },
            ssim: s,
        });
    }
    let report = recon::MetricsReport::from_views(views);
    std::fs::create_dir_all(&common.out).map_err(CliError::runtime)?;
    std::fs::write(
        common.out.join("metrics.json"),
        serde_json::to_string_pretty(&report).unwrap(),
    )
    .map_err(CliError::runtime)?;
    println!(
        "{} views: mean PSNR {:.2} dB, mean SSIM {:.4}",
        report.views.len(),
        report.mean_psnr_db,
        report.mean_ssim
    );
    Ok(())
}

fn cmd_gradcheck(seed: u64, size: usize) -> CliResult {
    let mut all_ok = true;
    let mut worst_rec: f64 = 0.0;
    let mut worst_fd: f64 = 0.0;
    for s in seed..seed + 5 {
        let report = validate::gradcheck(s, size);
        let ok = report.adjoint_vs_recorded <= 1e-5 && report.adjoint_vs_fd <= 1e-3;
        all_ok &= ok;
        worst_rec = worst_rec.max(report.adjoint_vs_recorded);
        worst_fd = worst_fd.max(report.adjoint_vs_fd);
        println!(
            "{} seed {s}: adjoint-vs-recorded {:.3e} (<= 1e-5), adjoint-vs-fd {:.3e} (<= 1e-3)",
            if ok { "PASS" } else { "FAIL" },
            report.adjoint_vs_recorded,
            report.adjoint_vs_fd
        );
    }
    println!("max relative errors: recorded {worst_rec:.3e}, finite-difference {worst_fd:.3e}");
    if all_ok {
        Ok(())
    } else {
        Err(CliError::Runtime("gradient comparison failed".to_string()))
    }
}

fn cmd_validate() -> CliResult {
    let mut all_ok = true;
    for check in validate::run_all_checks() {
        all_ok &= check.passed;
        println!(
            "{} {}: {}",
            if check.passed { "PASS" } else { "FAIL" },
            check.name,
            check.detail
        );
    }
    if all_ok {
        Ok(())
    } else {
        Err(CliError::Runtime("validation checks failed".to_string()))
    }
}
