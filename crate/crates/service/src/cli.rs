//! Command line front end. Every pipeline flag maps onto a job config key.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mvinpaint::segmentation::AnnotationSet;
use mvinpaint::synthetic::{SyntheticConfig, SyntheticScene};

use crate::error::{ServiceError, ServiceResult};
use crate::pipeline::{
    check_provider, render_png, run_job, EvaluateJobConfig, GridChoice, InpaintJobConfig, JobSpec,
    PlainHooks, RefineJobConfig, SegmentJobConfig,
};
use crate::store::Store;

#[derive(Debug, Parser)]
#[command(name = "mvinpaint", version, about = "Multiview object removal on a voxel radiance field")]
pub struct Cli {
    /// Data root holding ingested scenes and job records.
    #[arg(long, global = true, env = crate::DATA_ENV, default_value = "mvinpaint-data")]
    pub data: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a directory with transforms.json and copy it into the store.
    Ingest {
        path: PathBuf,
        #[arg(long)]
        id: Option<String>,
    },
    /// Write the synthetic occluder scene as a dataset directory.
    Synth {
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        size: u32,
        #[arg(long, default_value_t = 16)]
        views: usize,
        #[arg(long, default_value_t = 4)]
        test_views: usize,
        #[arg(long, default_value = "synthetic")]
        id: String,
    },
    Segment(SegmentArgs),
    Refine(RefineArgs),
    Inpaint(InpaintArgs),
    /// Render a pose from a stored grid to a PNG.
    Render {
        #[arg(long)]
        scene: String,
        /// View index, or 16 comma-separated floats (row-major camera-to-world).
        #[arg(long, allow_hyphen_values = true)]
        pose: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "inpainted")]
        grid: GridArg,
        #[arg(long, default_value_t = 48)]
        samples: usize,
    },
    /// Score the inpainted field against object-free views and/or the masks
    /// against ground truth.
    Eval {
        #[arg(long)]
        scene: String,
        #[arg(long)]
        truth: Option<String>,
        #[arg(long, default_value = "masks")]
        truth_masks: String,
        #[arg(long)]
        gt_masks: Option<String>,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long, env = crate::PORT_ENV, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Jobs that may run at once.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum GridArg {
    Inpainted,
    Original,
    Semantic,
}

impl From<GridArg> for GridChoice {
    fn from(g: GridArg) -> Self {
        match g {
            GridArg::Inpainted => GridChoice::Inpainted,
            GridArg::Original => GridChoice::Original,
            GridArg::Semantic => GridChoice::Semantic,
        }
    }
}

/// Segment the clicked object in every view.
#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("init").required(true).args(["points", "source_mask", "init_masks"])))]
pub struct SegmentArgs {
    #[arg(long)]
    pub scene: String,
    /// Annotation JSON: {"source_view", "positive": [[x, y]], "negative": [...]}.
    #[arg(long)]
    pub points: Option<PathBuf>,
    /// Mask PNG of the object in the source view.
    #[arg(long)]
    pub source_mask: Option<PathBuf>,
    #[arg(long)]
    pub source_view: Option<usize>,
    /// Directory of per-view initial masks.
    #[arg(long)]
    pub init_masks: Option<PathBuf>,
    #[arg(long, default_value_t = SegmentJobConfig::default().stages)]
    pub stages: usize,
    #[arg(long, default_value_t = SegmentJobConfig::default().grid_resolution)]
    pub grid: usize,
    #[arg(long, default_value_t = SegmentJobConfig::default().geometry_iterations)]
    pub geometry_iters: usize,
    #[arg(long, default_value_t = SegmentJobConfig::default().iterations)]
    pub iters: usize,
    #[arg(long, default_value_t = SegmentJobConfig::default().lambda_clf, allow_hyphen_values = true)]
    pub lambda_clf: f64,
    #[arg(long, default_value_t = SegmentJobConfig::default().threshold)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SegmentArgs {
    pub fn config(&self) -> SegmentJobConfig {
        let abs = |p: &PathBuf| absolute(&p.to_string_lossy());
        let (init, source_mask) = match (&self.source_mask, &self.init_masks) {
            (Some(m), _) => ("project".to_string(), Some(abs(m))),
            (None, Some(d)) => (format!("dir:{}", abs(d)), None),
            _ => ("region_grow".to_string(), None),
        };
        SegmentJobConfig {
            stages: self.stages,
            grid_resolution: self.grid,
            geometry_iterations: self.geometry_iters,
            iterations: self.iters,
            lambda_clf: self.lambda_clf,
            threshold: self.threshold,
            seed: self.seed,
            init,
            source_mask,
            source_view: self.source_view,
        }
    }
}

/// Shrink the dilated masks using views that see behind the object.
#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub scene: String,
    /// Refine colors and masks only (the default).
    #[arg(long, conflicts_with = "with_depths")]
    pub rgb_only: bool,
    /// Also write refined depths.
    #[arg(long)]
    pub with_depths: bool,
    #[arg(long, default_value_t = 5)]
    pub dilate_kernel: usize,
    #[arg(long, default_value_t = 5)]
    pub dilate_iters: usize,
    #[arg(long, default_value = "auto")]
    pub masks: String,
    #[arg(long, default_value_t = RefineJobConfig::default().grid_resolution)]
    pub grid: usize,
    #[arg(long, default_value_t = RefineJobConfig::default().original_iterations)]
    pub original_iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl RefineArgs {
    pub fn config(&self) -> RefineJobConfig {
        RefineJobConfig {
            dilate_kernel: self.dilate_kernel,
            dilate_iters: self.dilate_iters,
            rgb_only: !self.with_depths,
            grid_resolution: self.grid,
            original_iterations: self.original_iters,
            seed: self.seed,
            masks: self.masks.clone(),
            ..RefineJobConfig::default()
        }
    }
}

/// Remove the object: refine, inpaint priors and fit the inpainted field.
#[derive(Debug, Args)]
pub struct InpaintArgs {
    #[arg(long)]
    pub scene: String,
    /// `harmonic` or `dir:PATH` with `{stem}.png` and optional `depth/{stem}.pfm`.
    #[arg(long, default_value = "harmonic")]
    pub provider: String,
    #[arg(long, default_value_t = 5)]
    pub dilate_kernel: usize,
    #[arg(long, default_value_t = 5)]
    pub dilate_iters: usize,
    #[arg(long, default_value_t = 0.01, allow_hyphen_values = true)]
    pub lambda_lpips: f64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub lambda_depth: f64,
    #[arg(long)]
    pub no_depth_prior: bool,
    #[arg(long)]
    pub no_refine: bool,
    #[arg(long)]
    pub refine_depths: bool,
    #[arg(long, default_value = "auto")]
    pub masks: String,
    #[arg(long, default_value_t = InpaintJobConfig::default().grid_resolution)]
    pub grid: usize,
    #[arg(long, default_value_t = InpaintJobConfig::default().original_iterations)]
    pub original_iters: usize,
    #[arg(long, default_value_t = InpaintJobConfig::default().iterations)]
    pub iters: usize,
    #[arg(long, default_value_t = InpaintJobConfig::default().patch_factor)]
    pub patch_factor: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl InpaintArgs {
    pub fn config(&self) -> InpaintJobConfig {
        let provider = match self.provider.strip_prefix("dir:") {
            Some(dir) => format!("dir:{}", absolute(dir)),
            None => self.provider.clone(),
        };
        InpaintJobConfig {
            provider,
            dilate_kernel: self.dilate_kernel,
            dilate_iters: self.dilate_iters,
            lambda_lpips: self.lambda_lpips,
            lambda_depth: self.lambda_depth,
            depth_prior: !self.no_depth_prior,
            refine: !self.no_refine,
            rgb_only: !self.refine_depths,
            grid_resolution: self.grid,
            original_iterations: self.original_iters,
            iterations: self.iters,
            patch_factor: self.patch_factor,
            seed: self.seed,
            masks: self.masks.clone(),
        }
    }
}

/// Command line paths are relative to the working directory, job config
/// paths to the scene directory.
fn absolute(p: &str) -> String {
    std::path::absolute(p)
        .map(|a| a.display().to_string())
        .unwrap_or_else(|_| p.to_string())
}

fn run_sync(store: &Store, scene: &str, spec: JobSpec) -> ServiceResult<()> {
    spec.validate()?;
    store.manifest(scene)?;
    let artifacts = run_job(store, scene, &spec, &PlainHooks(Default::default()))?;
    for a in artifacts {
        println!("{}", store.scene_dir(scene).join(a).display());
    }
    Ok(())
}

/// Runs a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            if e.is_validation() {
                2
            } else {
                1
            }
        }
    }
}

fn execute(cli: Cli) -> ServiceResult<()> {
    if let Command::Synth { out, size, views, test_views, id } = &cli.command {
        let syn = SyntheticScene::occluder(SyntheticConfig {
            width: *size,
            height: *size,
            n_train: *views,
            n_test: *test_views,
            ..SyntheticConfig::default()
        })?;
        syn.export(out, id)?;
        println!("{}", out.display());
        return Ok(());
    }
    let store = Store::open(&cli.data)?;
    match cli.command {
        Command::Synth { .. } => unreachable!("handled above"),
        Command::Ingest { path, id } => {
            let m = store.ingest(&path, id.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&m)?);
            Ok(())
        }
        Command::Segment(a) => {
            if let Some(p) = &a.points {
                if !p.is_file() {
                    return Err(mvinpaint::Error::MissingFiles(vec![p.display().to_string()]).into());
                }
                let ann = AnnotationSet::load(p)?;
                store.save_annotations(&a.scene, &ann)?;
            }
            run_sync(&store, &a.scene, JobSpec::Segment(a.config()))
        }
        Command::Refine(a) => run_sync(&store, &a.scene, JobSpec::Refine(a.config())),
        Command::Inpaint(a) => {
            let c = a.config();
            c.validate()?;
            check_provider(&store, &a.scene, &c.provider)?;
            run_sync(&store, &a.scene, JobSpec::Inpaint(c))
        }
        Command::Render { scene, pose, out, grid, samples } => {
            let m = store.manifest(&scene)?;
            let pose = match pose.trim().parse::<usize>() {
                Ok(v) => {
                    let f = m.frames.get(v).ok_or_else(|| {
                        ServiceError::Validation(format!("view {v} out of range ({} views)", m.frames.len()))
                    })?;
                    mvinpaint::Pose::from_row_major(&f.matrix)?
                }
                Err(_) => {
                    let values: Vec<f64> = pose
                        .split(',')
                        .map(|v| v.trim().parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| ServiceError::Validation(format!("--pose: {e}")))?;
                    mvinpaint::Pose::from_row_major(&values)?
                }
            };
            let bytes = render_png(&store, &scene, &pose, grid.into(), samples)?;
            std::fs::write(&out, bytes).map_err(|e| crate::store::io(&out, e))?;
            println!("{}", out.display());
            Ok(())
        }
        Command::Eval { scene, truth, truth_masks, gt_masks } => {
            let abs = |p: String| absolute(&p);
            let spec = JobSpec::Evaluate(EvaluateJobConfig {
                truth: truth.map(abs),
                truth_masks,
                gt_masks: gt_masks.map(abs),
                ..EvaluateJobConfig::default()
            });
            run_sync(&store, &scene, spec)?;
            let report = std::fs::read_to_string(store.stage_dir(&scene).join("eval.json"))
                .unwrap_or_default();
            println!("{report}");
            Ok(())
        }
        Command::Serve { port, host, workers } => serve(store, &host, port, workers),
    }
}

fn serve(store: Store, host: &str, port: u16, workers: usize) -> ServiceResult<()> {
    let executor = crate::jobs::Executor::start(store, workers)?;
    let app = crate::api::router(executor.clone());
    let addr = format!("{host}:{port}");
    let rt = tokio::runtime::Runtime::new().map_err(|e| ServiceError::Internal(e.to_string()))?;
    let result = rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await?;
        log::info!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    });
    executor.shutdown();
    result.map_err(|e| ServiceError::Internal(e.to_string()))
}
