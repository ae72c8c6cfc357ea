//! `facefit` command-line frontend.
//!
//! Exit status: 0 success, 2 usage error, 3 data or validation error,
//! 4 numerical failure. Failures print one diagnostic line on stderr.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use facefit_core::fitting::ParamBlock;
use facefit_core::pipeline::PipelineConfig;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<facefit_core::Error> for CliError {
    fn from(e: facefit_core::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "facefit",
    version,
    about = "Morphable-model fitting, bare-skin normalization and UV texture tools"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// JSON pipeline config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Subject and scene seed (corpus seed for synth-corpus).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Rendered image side in pixels.
    #[arg(long, global = true)]
    pub size: Option<usize>,
    /// Iteration budget of every fit.
    #[arg(long, global = true)]
    pub iters: Option<usize>,
    /// Loss ablation, e.g. `--toggle-loss reg=off`; repeatable.
    #[arg(long = "toggle-loss", global = true, value_parser = parse_toggle)]
    pub toggle_loss: Vec<(String, bool)>,
    /// Report RMSE and PSNR on the 0-255 scale.
    #[arg(long, global = true)]
    pub scale255: bool,
}

fn parse_toggle(s: &str) -> Result<(String, bool), String> {
    let (name, state) = s.split_once('=').ok_or_else(|| format!("expected NAME=on|off, got {s:?}"))?;
    let on = match state {
        "on" => true,
        "off" => false,
        other => return Err(format!("toggle state must be on or off, got {other:?}")),
    };
    if !["coeff", "land", "diff", "light", "reg"].contains(&name) {
        return Err(format!("unknown loss term {name:?}"));
    }
    Ok((name.to_string(), on))
}

#[derive(Subcommand, Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate the synthetic corpus as OBJ meshes and color sidecars.
    SynthCorpus,
    /// Build a morphable model from a corpus directory (or from the config).
    BuildModel {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Render the model, or a synthetic subject with makeup.
    Render {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Fit JSON whose coefficients to render; default is the framed mean face.
        #[arg(long)]
        coeffs: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "none")]
        lighting: LightingChoice,
        /// Render held-out subject `--seed` with makeup instead of the model.
        #[arg(long)]
        subject: bool,
    },
    /// Fit the teacher: coefficients and lighting from an image and landmarks.
    Fit {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        landmarks: PathBuf,
    },
    /// Fit the student on a bare-skin image, guided by the teacher fit.
    FitStudent {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        landmarks: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Divide out the fitted shading, then match skin tone to the model.
    Delight {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        epsilon: Option<f64>,
        /// Skip skin-tone matching.
        #[arg(long)]
        no_tone: bool,
    },
    /// Project a UV texture onto the appearance subspace, keeping detail.
    Demakeup {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        texture: PathBuf,
        #[arg(long)]
        visibility: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Unwarp an image into the model's UV layout.
    Unwarp {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        fit: PathBuf,
        /// Image-space occlusion mask PNG (white = visible skin).
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        uv_size: Option<usize>,
    },
    /// RMSE, PSNR and SSIM between two images or UV textures.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Visibility PNGs; with both given the metrics run over their intersection.
        #[arg(long, requires = "b_visibility")]
        a_visibility: Option<PathBuf>,
        #[arg(long, requires = "a_visibility")]
        b_visibility: Option<PathBuf>,
    },
    /// Compare analytic gradients against central differences on a seeded scene.
    Gradcheck {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_parser = parse_block)]
        block: ParamBlockArg,
        #[arg(long, value_enum, default_value = "photometric")]
        loss: LossChoice,
        #[arg(long)]
        epsilon: Option<f64>,
        /// Largest accepted relative error; default 1e-5 for gamma and
        /// landmark checks, 1e-4 otherwise.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Synthetic subject with makeup through fit, delight, student fit,
    /// unwarp and de-makeup, scored against the true bare texture.
    Pipeline {
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

#[derive(clap::ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LightingChoice {
    None,
    Identity,
    /// Seeded random lighting.
    Random,
    /// The lighting stored in `--coeffs`.
    Fit,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossChoice {
    Photometric,
    Landmark,
}

#[derive(Debug, Clone, Copy, Serialize)]
#[serde(transparent)]
pub struct ParamBlockArg(pub ParamBlock);

fn parse_block(s: &str) -> Result<ParamBlockArg, String> {
    ParamBlock::parse(s).map(ParamBlockArg).map_err(|e| e.to_string())
}

/// Config after applying flags over the optional file.
pub fn resolve_config(g: &GlobalArgs) -> CliResult<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = g.size {
        cfg.image_size = s;
    }
    if let Some(n) = g.iters {
        cfg.teacher.iterations = n;
        cfg.student.iterations = n;
    }
    for (name, on) in &g.toggle_loss {
        cfg.teacher.toggles.set(name, *on)?;
        cfg.student.toggles.set(name, *on)?;
    }
    if g.scale255 {
        cfg.scale255 = true;
    }
    if cfg.image_size < 16 {
        return Err(CliError::Usage(format!("--size must be at least 16, got {}", cfg.image_size)));
    }
    cfg.teacher.validate()?;
    cfg.student.validate()?;
    Ok(cfg)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run_cli<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match commands::run(&cli.command, &cli.global) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("facefit: {e}");
            e.exit_code()
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    ExitCode::from(run_cli(std::env::args_os()))
}
