//! Command-line front end shared by the `surfel-pbr` binary and the tests.
//!
//! Every command writes `run.json` (resolved config, seed, version, argv)
//! into its output directory. Exit codes: 0 success, 2 usage or config
//! error, 3 data error, 4 numerical divergence or failed gradient check.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use crate::config::Config;
use crate::dataset::{load_dataset, write_dataset, Dataset};
use crate::envlight::{load_hdr, write_bundle, CubeLevel};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::image_io::save_image;
use crate::losses::LossTerms;
use crate::math::V3;
use crate::mc::{write_records_csv, SampleBudget};
use crate::metrics::{normal_mae, psnr_masked, ssim};
use crate::model::{attribute_maps, estimate_pixel, load_checkpoint, save_checkpoint, FrozenView, McSettings, Model, Shading};
use crate::optim::{geometry_terms, relight, render_reconstruction, run_speccomp, run_stage1, run_stage2, Outputs};
use crate::splat::SplatScene;
use crate::surfel::{load_scene, Scene};
use crate::synth::{orbit_cameras, render_dataset, toy_scene, GroundTruth, ProceduralEnv};
use crate::trace::{SurfelBvh, Tracer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Version string written to `run.json`. Builds may inject a `git describe`
/// result through `SURFEL_PBR_VERSION`.
pub fn version() -> String {
    option_env!("SURFEL_PBR_VERSION").map(str::to_string).unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

#[derive(Parser, Debug)]
#[command(name = "surfel-pbr", version, about = "Inverse rendering of glossy objects with 2D Gaussian surfels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON config file; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Config overrides as dotted `key=value`; later ones win.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct FitArgs {
    /// Dataset directory holding `transforms.json`.
    #[arg(long)]
    pub data: PathBuf,
    /// Starting checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Shorthand for the stage's `iterations` key.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Drop prior maps from the dataset.
    #[arg(long)]
    pub no_priors: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Truth {
    Splitsum,
    Mc,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pre-filter an environment into a light bundle.
    Bake {
        /// Radiance `.hdr` file or one of `sky`, `studio`, `white`.
        #[arg(long)]
        env: String,
        #[command(flatten)]
        common: Common,
    },
    /// Render a synthetic dataset from a scene or checkpoint.
    Render {
        /// Scene JSON; the toy scene is used when neither this nor a checkpoint is given.
        #[arg(long, conflicts_with = "checkpoint")]
        scene: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Radiance `.hdr` file or a procedural name.
        #[arg(long, default_value = "sky")]
        env: String,
        #[arg(long, default_value_t = 8)]
        views: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 2.5)]
        distance: f64,
        #[arg(long, default_value_t = 0.3)]
        elevation: f64,
        #[arg(long, default_value_t = 0.6)]
        fov: f64,
        #[arg(long, value_enum, default_value_t = Truth::Splitsum)]
        truth: Truth,
        /// Total samples per pixel for `--truth mc`.
        #[arg(long, default_value_t = 2048)]
        samples: usize,
        /// Also write the exact normal and depth maps as priors.
        #[arg(long)]
        priors: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Stage I: geometry under split-sum shading.
    FitGeometry(FitArgs),
    /// Stage II: materials and light under Monte Carlo shading.
    FitMaterial(FitArgs),
    /// Fit the specular compensation network.
    FitSpeccomp(FitArgs),
    /// Render a checkpoint under a new environment.
    Relight {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        env: String,
        /// Dataset whose cameras are used.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Metrics of a checkpoint against a dataset, or the gradient check.
    Eval {
        #[arg(long, required_unless_present = "gradcheck")]
        checkpoint: Option<PathBuf>,
        #[arg(long, required_unless_present = "gradcheck")]
        data: Option<PathBuf>,
        /// Finite-difference check of every analytic gradient.
        #[arg(long)]
        gradcheck: bool,
        /// Random points per gradient check.
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Dump the Monte Carlo sample records of one pixel as CSV.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        view: usize,
        #[arg(long)]
        x: usize,
        #[arg(long)]
        y: usize,
        /// Use the learned light (default) or a given environment.
        #[arg(long)]
        env: Option<String>,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Bake { common, .. }
            | Command::Render { common, .. }
            | Command::Relight { common, .. }
            | Command::Eval { common, .. }
            | Command::Trace { common, .. } => common,
            Command::FitGeometry(a) | Command::FitMaterial(a) | Command::FitSpeccomp(a) => &a.common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Bake { .. } => "bake",
            Command::Render { .. } => "render",
            Command::FitGeometry(_) => "fit-geometry",
            Command::FitMaterial(_) => "fit-material",
            Command::FitSpeccomp(_) => "fit-speccomp",
            Command::Relight { .. } => "relight",
            Command::Eval { .. } => "eval",
            Command::Trace { .. } => "trace",
        }
    }

    /// Config section that bare keys such as `iterations` refer to.
    fn section(&self) -> Option<&'static str> {
        match self {
            Command::FitGeometry(_) => Some("stage1"),
            Command::FitMaterial(_) => Some("stage2"),
            Command::FitSpeccomp(_) => Some("speccomp"),
            _ => None,
        }
    }
}

/// A parsed command line with its fully resolved configuration.
#[derive(Debug)]
pub struct Plan {
    pub command: Command,
    pub config: Config,
    /// Overrides in the order applied, after section expansion.
    pub overrides: Vec<String>,
    pub argv: Vec<String>,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: String,
    seed: u64,
    argv: &'a [String],
    overrides: &'a [String],
    config: &'a Config,
}

fn top_level_keys() -> Vec<String> {
    match serde_json::to_value(Config::default()) {
        Ok(serde_json::Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

/// Parses `argv` (program name first) and resolves the configuration:
/// config file, then `--seed`, then overrides and flag shorthands in
/// command-line order.
pub fn parse(argv: &[String]) -> std::result::Result<Plan, CliError> {
    let matches = Cli::command().try_get_matches_from(argv.iter().map(OsString::from)).map_err(CliError::Clap)?;
    let cli = Cli::from_arg_matches(&matches).map_err(CliError::Clap)?;
    let command = cli.command;
    let common = command.common().clone();
    let mut config = match &common.config {
        Some(p) => Config::load(p).map_err(CliError::Run)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }

    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    let mut ordered = ordered_overrides(sub, &common.overrides);
    if let Command::FitGeometry(a) | Command::FitMaterial(a) | Command::FitSpeccomp(a) = &command {
        if let (Some(n), Some(i)) = (a.iterations, sub.index_of("iterations")) {
            ordered.push((i, format!("iterations={n}")));
        }
    }
    ordered.sort_by_key(|(i, _)| *i);

    let top = top_level_keys();
    let overrides: Vec<String> = ordered
        .into_iter()
        .map(|(_, o)| match (command.section(), o.split_once('=')) {
            (Some(sec), Some((k, v))) if !k.contains('.') && !top.iter().any(|t| t == k) => format!("{sec}.{k}={v}"),
            _ => o,
        })
        .collect();
    let mut seen = std::collections::HashSet::new();
    for o in overrides.iter().rev() {
        if let Some((k, _)) = o.split_once('=') {
            if !seen.insert(k.to_string()) {
                info!("'{k}' given more than once; the last value wins");
            }
        }
    }
    let config = config.with_overrides(&overrides).map_err(CliError::Run)?;
    Ok(Plan { command, config, overrides, argv: argv.to_vec() })
}

fn ordered_overrides(sub: &ArgMatches, values: &[String]) -> Vec<(usize, String)> {
    match sub.indices_of("overrides") {
        Some(idx) => idx.zip(values.iter().cloned()).collect(),
        None => Vec::new(),
    }
}

#[derive(Debug)]
pub enum CliError {
    Clap(clap::Error),
    Run(Error),
    GradCheck(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Clap(e) if !e.use_stderr() => EXIT_OK,
            CliError::Clap(_) => EXIT_USAGE,
            CliError::Run(e) => match e {
                Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
                Error::Diverged(_) => EXIT_NUMERIC,
                _ => EXIT_DATA,
            },
            CliError::GradCheck(_) => EXIT_NUMERIC,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Clap(e) => write!(f, "{e}"),
            CliError::Run(e) => write!(f, "error: {e}"),
            CliError::GradCheck(n) => write!(f, "error: {n} gradient checks failed"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

/// Parses and runs; returns the process exit code.
pub fn main_with_args(argv: &[String]) -> i32 {
    let result = parse(argv).and_then(|plan| execute(&plan));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = e.exit_code();
            if code == EXIT_OK {
                print!("{e}");
            } else {
                eprintln!("{e}");
            }
            code
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(io_err(path))
}

/// Procedural name or `.hdr` path to a cube map of the given face size.
pub fn environment_cube(spec: &str, size: usize) -> Result<CubeLevel> {
    match ProceduralEnv::parse(spec) {
        Some(p) => Ok(p.equirect(4 * size, 2 * size).to_cubemap(size)),
        None => Ok(load_hdr(Path::new(spec))?.to_cubemap(size)),
    }
}

fn load_data(path: &Path, no_priors: bool) -> Result<Dataset> {
    let ds = load_dataset(path)?;
    Ok(if no_priors { ds.without_priors() } else { ds })
}

/// Runs a parsed plan.
pub fn execute(plan: &Plan) -> std::result::Result<(), CliError> {
    let cfg = &plan.config;
    let out = &plan.command.common().out;
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    write_json(
        &out.join("run.json"),
        &RunRecord {
            command: plan.command.name(),
            version: version(),
            seed: cfg.seed,
            argv: &plan.argv,
            overrides: &plan.overrides,
            config: cfg,
        },
    )?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| run_command(&plan.command, cfg, out))
}

fn run_command(command: &Command, cfg: &Config, out: &Path) -> std::result::Result<(), CliError> {
    let shading = Shading::from_config(cfg);
    match command {
        Command::Bake { env, .. } => {
            let light = shading.environment(environment_cube(env, cfg.light.size)?);
            let path = out.join("light.bin");
            let file = std::fs::File::create(&path).map_err(io_err(&path))?;
            write_bundle(&light, std::io::BufWriter::new(file)).map_err(io_err(&path))?;
            info!("wrote {}", path.display());
        }
        Command::Render { scene, checkpoint, env, views, resolution, distance, elevation, fov, truth, samples, priors, .. } => {
            let scene: Scene = match (scene, checkpoint) {
                (Some(p), _) => load_scene(p)?,
                (None, Some(c)) => load_checkpoint(c)?.scene,
                (None, None) => toy_scene(2000),
            };
            let light = shading.environment(environment_cube(env, cfg.light.size)?);
            let center = scene.bounds().map_or(V3::zeros(), |(lo, hi)| (lo + hi) * 0.5);
            let cams = orbit_cameras(*views, center, *distance, *elevation, *fov, *resolution, *resolution);
            let truth = match truth {
                Truth::Splitsum => GroundTruth::SplitSum,
                Truth::Mc => GroundTruth::MonteCarlo(McSettings::even(*samples, cfg.seed, crate::mc::Strategy::Mis)?),
            };
            let ds = render_dataset(&scene, &light, &shading, &cams, truth, *priors)?;
            let path = write_dataset(out, &ds, "pfm")?;
            info!("wrote {}", path.display());
        }
        Command::FitGeometry(a) | Command::FitMaterial(a) | Command::FitSpeccomp(a) => {
            let data = load_data(&a.data, a.no_priors)?;
            let mut model = match &a.checkpoint {
                Some(c) => load_checkpoint(c)?,
                None if matches!(command, Command::FitGeometry(_)) => Model::initial(cfg)?,
                None => return Err(Error::InvalidArgument(format!("{} needs --checkpoint", command.name())).into()),
            };
            let stage = command.section().expect("fit commands have a section");
            let outputs = Some(Outputs { dir: out, stage });
            let report = match command {
                Command::FitGeometry(_) => run_stage1(&mut model, &data, cfg, &shading, outputs)?,
                Command::FitMaterial(_) => run_stage2(&mut model, &data, cfg, &shading, outputs)?,
                _ => run_speccomp(&mut model, &data, cfg, &shading, outputs)?,
            };
            if report.nonfinite_grads > 0 {
                warn!("{} non-finite gradient entries were zeroed", report.nonfinite_grads);
            }
            save_checkpoint(&model, &out.join(format!("{stage}.ckpt")))?;
            info!("{stage}: final loss {:?}", report.final_loss());
        }
        Command::Relight { checkpoint, env, data, .. } => {
            let model = load_checkpoint(checkpoint)?;
            let data = load_dataset(data)?;
            let light = shading.environment(environment_cube(env, cfg.light.size)?);
            let cams: Vec<_> = data.views.iter().map(|v| v.camera.clone()).collect();
            for (k, img) in relight(&model, &light, &shading, &cams, cfg)?.iter().enumerate() {
                save_image(img, &out.join(format!("relight_{k:03}.pfm")))?;
                save_image(img, &out.join(format!("relight_{k:03}.png")))?;
            }
        }
        Command::Eval { checkpoint, data, gradcheck: true, points, .. } => {
            if checkpoint.is_some() || data.is_some() {
                warn!("--gradcheck ignores --checkpoint and --data");
            }
            let checks = gradcheck::run_all(*points, cfg.seed);
            for c in &checks {
                println!("{} {:<34} max rel err {:.2e}", if c.passed() { "PASS" } else { "FAIL" }, c.name, c.max_rel_error);
            }
            write_json(&out.join("gradcheck.json"), &checks)?;
            let failed = checks.iter().filter(|c| !c.passed()).count();
            if failed > 0 {
                return Err(CliError::GradCheck(failed));
            }
        }
        Command::Eval { checkpoint, data, .. } => {
            let (Some(checkpoint), Some(data)) = (checkpoint, data) else {
                return Err(Error::InvalidArgument("eval needs --checkpoint and --data".into()).into());
            };
            let model = load_checkpoint(checkpoint)?;
            let data = load_dataset(data)?;
            let report = evaluate(&model, &data, cfg, &shading)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
            write_json(&out.join("metrics.json"), &report)?;
        }
        Command::Trace { checkpoint, data, view, x, y, env, .. } => {
            let model = load_checkpoint(checkpoint)?;
            let data = load_dataset(data)?;
            let v = data.views.get(*view).ok_or_else(|| Error::InvalidArgument(format!("no view {view}")))?;
            let cam = &v.camera;
            if *x >= cam.width || *y >= cam.height {
                return Err(Error::InvalidArgument(format!("pixel ({x}, {y}) outside {}x{}", cam.width, cam.height)).into());
            }
            let light = match env {
                Some(e) => shading.environment(environment_cube(e, cfg.light.size)?),
                None => shading.environment(model.light.radiance()),
            };
            let splat = SplatScene::new(&model.scene);
            let bvh = SurfelBvh::build(&splat.frames);
            let frozen = FrozenView::new(&splat, &bvh, cam, shading.options);
            let tracer = Tracer::new(&splat, &bvh, model.scene.scale());
            let mc = McSettings {
                budget: SampleBudget::new(cfg.stage2.n_r.div_ceil(2), cfg.stage2.n_r / 2, cfg.seed)?,
                strategy: cfg.stage2.strategy,
                visibility: cfg.stage2.visibility,
                indirect: cfg.stage2.indirect,
            };
            let i = y * cam.width + x;
            let path = out.join("trace.csv");
            let px = &frozen.rendered.gbuffer.pixels[i];
            let records = estimate_pixel(px, &frozen.exclude[i], &tracer, &light, &shading.brdf, &mc, i as u64, 0)
                .map(|e| e.records)
                .unwrap_or_default();
            if records.is_empty() {
                warn!("pixel ({x}, {y}) is background; no samples");
            }
            let mut buf = Vec::new();
            write_records_csv(&records, &mut buf).map_err(io_err(&path))?;
            std::fs::write(&path, buf).map_err(io_err(&path))?;
        }
    }
    Ok(())
}

/// Metrics written by `eval`.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    /// Mean over views, foreground-masked.
    pub psnr: f64,
    pub ssim: f64,
    /// Mean normal angle error in degrees against the dataset's normal maps.
    pub mae: Option<f64>,
    pub per_view_psnr: Vec<f64>,
    pub losses: LossTerms,
}

/// Reconstruction-mode metrics of `model` on every view of `data`.
pub fn evaluate(model: &Model, data: &Dataset, cfg: &Config, shading: &Shading) -> Result<EvalReport> {
    let cams: Vec<_> = data.views.iter().map(|v| v.camera.clone()).collect();
    let images = render_reconstruction(model, shading, &cams, cfg)?;
    let per_view_psnr: Vec<f64> = data.views.iter().zip(&images).map(|(v, img)| psnr_masked(img, &v.image, Some(&v.mask))).collect();
    let ssim_mean = data.views.iter().zip(&images).map(|(v, img)| ssim(img, &v.image)).sum::<f64>() / images.len() as f64;
    let env = shading.environment(model.light.radiance());
    let mut maes = Vec::new();
    for v in &data.views {
        if let Some(p) = &v.priors {
            let gb = crate::model::render_splitsum(&model.scene, &env, shading, &v.camera).gbuffer;
            if let Some(m) = normal_mae(&attribute_maps(&gb).normal, &p.normals, Some(&v.mask)) {
                maes.push(m);
            }
        }
    }
    Ok(EvalReport {
        psnr: per_view_psnr.iter().sum::<f64>() / per_view_psnr.len() as f64,
        ssim: ssim_mean,
        mae: (!maes.is_empty()).then(|| maes.iter().sum::<f64>() / maes.len() as f64),
        per_view_psnr,
        losses: geometry_terms(model, data, cfg, shading)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        std::iter::once("surfel-pbr").chain(s.split_whitespace()).map(String::from).collect()
    }

    #[test]
    fn render_plan() {
        let p = parse(&args("render --out d/")).unwrap();
        assert!(matches!(p.command, Command::Render { .. }));
        assert_eq!(p.command.common().out, PathBuf::from("d/"));
    }

    #[test]
    fn last_iteration_setting_wins() {
        let p = parse(&args("fit-geometry --data x --iterations 10 iterations=20")).unwrap();
        assert_eq!(p.config.stage1.iterations, 20);
        let p = parse(&args("fit-geometry --data x iterations=20 --iterations 10")).unwrap();
        assert_eq!(p.config.stage1.iterations, 10);
        let p = parse(&args("fit-material --data x --seed 9 seed=4 n_r=8")).unwrap();
        assert_eq!((p.config.seed, p.config.stage2.n_r), (4, 8));
    }

    #[test]
    fn usage_errors() {
        for bad in ["relight --checkpoint c --data d", "render --bogus", "eval", "fit-geometry --data x nope=1"] {
            let e = parse(&args(bad)).unwrap_err();
            assert_eq!(e.exit_code(), EXIT_USAGE, "{bad}");
        }
    }
}
