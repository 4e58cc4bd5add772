//! Command-line entry points.

use std::path::{Path, PathBuf};

use anchor_edit::bench::{run_benchmark, TaskManifest};
use anchor_edit::config::load_config;
use anchor_edit::{
    run_edit, BackendSpec, EditKind, EditRequest, EditTransform, Error, Image, Mask, SamplerConfig,
};
use clap::{Args, Parser, Subcommand};

/// Exit status for invalid arguments or configuration.
pub const EXIT_INVALID: i32 = 2;
/// Exit status when the requested backend cannot be opened.
pub const EXIT_BACKEND: i32 = 3;
/// Exit status when the edit or benchmark itself fails.
pub const EXIT_FAILED: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "anchor-edit",
    version,
    about = "Consistent object editing without inversion"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Move, resize or paste one object.
    Edit(EditArgs),
    /// Run a task manifest and write report.json, report.csv and per-entry PNGs.
    Bench(BenchArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

/// Options shared by every command that runs the sampler.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Inference steps (overrides the config file).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// toy or ldm.
    #[arg(long, env = "ANCHOR_EDIT_BACKEND")]
    pub backend: Option<String>,
    /// Weight path for the ldm backend.
    #[arg(long, env = "ANCHOR_EDIT_LDM_WEIGHTS")]
    pub weights: Option<PathBuf>,
    /// YAML or JSON sampler configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Disable the guidance repeats.
    #[arg(long)]
    pub no_guidance: bool,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Object mask (single channel, nonzero = object). For paste, in the reference image.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, default_value = "move")]
    pub task: EditKind,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    pub dx: i64,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    pub dy: i64,
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Reference image for paste.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Report path (defaults to the output path with a .json extension).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Concurrent sampler jobs.
    #[arg(long, default_value_t = 2)]
    pub max_jobs: usize,
    /// Directory where finished jobs are persisted (one directory per job).
    #[arg(long)]
    pub results_dir: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

/// A failure with the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn invalid(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INVALID,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.root() {
            Error::BackendUnavailable(_) => EXIT_BACKEND,
            Error::Config(_) | Error::InvalidEdit(_) | Error::Manifest(_) | Error::Yaml(_) => {
                EXIT_INVALID
            }
            _ => EXIT_FAILED,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl RunArgs {
    /// Config file (or defaults) with command-line overrides applied.
    pub fn sampler_config(&self) -> Result<SamplerConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => SamplerConfig::default(),
        };
        if let Some(steps) = self.steps {
            cfg.schedule.inference_steps = steps;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(id) = &self.backend {
            let keep_toy = matches!((&cfg.backend, id.as_str()), (BackendSpec::Toy(_), "toy"));
            if !keep_toy {
                cfg.backend = BackendSpec::from_id(id, self.weights.clone())?;
            }
        }
        if let (BackendSpec::Ldm(ldm), Some(w)) = (&mut cfg.backend, &self.weights) {
            ldm.weights = Some(w.clone());
        }
        if self.no_guidance {
            cfg.guidance.enabled = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_request(args: &EditArgs) -> Result<EditRequest, Failure> {
    let read = |p: &Path| -> Result<Image, Failure> {
        Image::load(p).map_err(|e| Failure::invalid(format!("cannot read {}: {e}", p.display())))
    };
    let source = read(&args.input)?;
    let mask = Mask::load(&args.mask)
        .map_err(|e| Failure::invalid(format!("cannot read {}: {e}", args.mask.display())))?;
    let reference = args.reference.as_deref().map(read).transpose()?;
    let transform = EditTransform::from_parts(args.task, args.dx, args.dy, args.scale, reference)?;
    Ok(EditRequest::new(source, mask, transform))
}

pub fn edit(args: &EditArgs) -> Result<(), Failure> {
    let cfg = args.run.sampler_config()?;
    let request = load_request(args)?;
    let backend = cfg.backend.instantiate()?;
    let report = run_edit(&request, &cfg, backend.as_ref())?;
    report.output.save_png(&args.out)?;
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| args.out.with_extension("json"));
    let json = serde_json::to_vec_pretty(&report).map_err(Error::from)?;
    std::fs::write(&report_path, json).map_err(|e| Failure {
        code: EXIT_FAILED,
        message: format!("cannot write {}: {e}", report_path.display()),
    })?;
    log::info!(
        "wrote {} ({} forwards, {:.2} s)",
        args.out.display(),
        report.nfe,
        report.latency_secs
    );
    Ok(())
}

pub fn bench(args: &BenchArgs) -> Result<(), Failure> {
    let cfg = args.run.sampler_config()?;
    let manifest = TaskManifest::load(&args.manifest)?;
    let backend = cfg.backend.instantiate()?;
    let report = run_benchmark(&manifest, &cfg, backend.as_ref(), Some(&args.out), &[])?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let a = &report.aggregate;
    println!(
        "{} entries ({} failed), object PSNR {:?}, background PSNR {:?}, mean NFE {:?}",
        a.entries, a.failed, a.object_psnr, a.background_psnr, a.nfe
    );
    Ok(())
}

/// Runs a parsed command line and returns the process exit status.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Edit(a) => edit(&a),
        Command::Bench(a) => bench(&a),
        Command::Serve(a) => crate::server::serve_blocking(&a),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
