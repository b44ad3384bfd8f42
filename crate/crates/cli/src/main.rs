//! `wrnet`: optical-flow warping plus learned refinement for gray-scale frames.

mod commands;
mod settings;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

use settings::Settings;

/// Exit status classes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config values or parameters (exit 1).
    Usage(String),
    /// Unreadable, malformed or inconsistent input data (exit 2).
    Data(String),
    /// Numerical breakdown such as a non-finite loss (exit 3).
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<wrnet::Error> for CliError {
    fn from(e: wrnet::Error) -> Self {
        use wrnet::Error as E;
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else if matches!(e, E::InvalidParams(_) | E::CropTooLarge { .. }) {
            CliError::Usage(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "wrnet",
    version,
    about = "Frame interpolation and extrapolation by TV-L1 warping and learned refinement"
)]
struct Cli {
    #[command(flatten)]
    opts: Overrides,
    #[command(subcommand)]
    cmd: Cmd,
}

/// One flag per config key; values are parsed by [`Settings::set`].
#[derive(Debug, Args)]
struct Overrides {
    /// Config file of `key = value` lines; flags override it
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N", help = help("seed"))]
    seed: Option<String>,
    #[arg(long, global = true, value_name = "X", help = help("tau"))]
    tau: Option<String>,
    #[arg(long, global = true, value_name = "X", help = help("lambda"))]
    lambda: Option<String>,
    #[arg(long, global = true, value_name = "X", help = help("theta"))]
    theta: Option<String>,
    #[arg(long, global = true, value_name = "N", help = help("warps-per-level"))]
    warps_per_level: Option<String>,
    #[arg(long, global = true, value_name = "N", help = help("iters-per-warp"))]
    iters_per_warp: Option<String>,
    #[arg(long, global = true, value_name = "X", help = help("stop-epsilon"))]
    stop_epsilon: Option<String>,
    #[arg(long, global = true, value_name = "X", help = help("pyramid-factor"))]
    pyramid_factor: Option<String>,
    #[arg(long, global = true, value_name = "N", help = help("pyramid-min-dim"))]
    pyramid_min_dim: Option<String>,
    #[arg(long, global = true, value_name = "BOOL", help = help("median-filter"))]
    median_filter: Option<String>,
    #[arg(long, global = true, value_name = "X", help = help("intensity-scale"))]
    intensity_scale: Option<String>,
    #[arg(long, global = true, value_name = "A", action = ArgAction::Append, help = help("alpha"))]
    alpha: Vec<String>,
    #[arg(long, global = true, value_name = "N", help = help("steps"))]
    steps: Option<String>,
    #[arg(long, global = true, value_name = "PATH", help = help("checkpoint"))]
    checkpoint: Option<String>,
    #[arg(long, global = true, value_name = "HxW", help = help("crop"))]
    crop: Option<String>,
    #[arg(long, global = true, value_name = "FMT", help = help("format"))]
    format: Option<String>,
    #[arg(long, global = true, value_name = "N", help = help("batch-size"))]
    batch_size: Option<String>,
    #[arg(long, global = true, value_name = "X", help = help("lr"))]
    lr: Option<String>,
    #[arg(long, global = true, value_name = "MODE", help = help("mode"))]
    mode: Option<String>,
    #[arg(long, global = true, value_name = "N", help = help("frames"))]
    frames: Option<String>,
    #[arg(long, global = true, value_name = "N", help = help("embed-channels"))]
    embed_channels: Option<String>,
    #[arg(long, global = true, value_name = "N", help = help("enc-levels"))]
    enc_levels: Option<String>,
    #[arg(long, global = true, value_name = "N", help = help("base-channels"))]
    base_channels: Option<String>,
    #[arg(long, global = true, value_name = "N", help = help("attention-downsample"))]
    attention_downsample: Option<String>,
    #[arg(long, global = true, value_name = "BOOL", help = help("residual-output"))]
    residual_output: Option<String>,
    #[arg(long, global = true, value_name = "ROLES", help = help("attention-roles"))]
    attention_roles: Option<String>,
}

fn help(key: &str) -> &'static str {
    settings::KEYS
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, h)| *h)
        .unwrap_or_else(|| panic!("no help text for {key}"))
}

impl Overrides {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let alpha = (!self.alpha.is_empty()).then(|| self.alpha.join(","));
        [
            ("seed", &self.seed),
            ("tau", &self.tau),
            ("lambda", &self.lambda),
            ("theta", &self.theta),
            ("warps-per-level", &self.warps_per_level),
            ("iters-per-warp", &self.iters_per_warp),
            ("stop-epsilon", &self.stop_epsilon),
            ("pyramid-factor", &self.pyramid_factor),
            ("pyramid-min-dim", &self.pyramid_min_dim),
            ("median-filter", &self.median_filter),
            ("intensity-scale", &self.intensity_scale),
            ("alpha", &alpha),
            ("steps", &self.steps),
            ("checkpoint", &self.checkpoint),
            ("crop", &self.crop),
            ("format", &self.format),
            ("batch-size", &self.batch_size),
            ("lr", &self.lr),
            ("mode", &self.mode),
            ("frames", &self.frames),
            ("embed-channels", &self.embed_channels),
            ("enc-levels", &self.enc_levels),
            ("base-channels", &self.base_channels),
            ("attention-downsample", &self.attention_downsample),
            ("residual-output", &self.residual_output),
            ("attention-roles", &self.attention_roles),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.clone().map(|v| (k, v)))
        .collect()
    }

    /// Effective settings plus the keys set by the config file or a flag.
    fn resolve(&self) -> Result<(Settings, BTreeSet<String>), CliError> {
        let mut s = Settings::default();
        let mut explicit = BTreeSet::new();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            explicit.extend(
                s.apply_file(&text)
                    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
            );
        }
        for (k, v) in self.pairs() {
            s.set(k, &v)
                .map_err(|e| CliError::Usage(format!("--{e}")))?;
            explicit.insert(k.to_string());
        }
        Ok((s, explicit))
    }
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Estimate TV-L1 flow from frame A to frame B and write a Middlebury .flo file
    Flow {
        a: PathBuf,
        b: PathBuf,
        out: PathBuf,
    },
    /// Interpolate between A and B at each --alpha; OUT may contain {alpha} or {i}
    Interp {
        a: PathBuf,
        b: PathBuf,
        out: PathBuf,
    },
    /// Roll out --steps future frames after A, B; OUT may contain {i} (1-based)
    Extrapolate {
        a: PathBuf,
        b: PathBuf,
        out: PathBuf,
    },
    /// Train a refinement model on a dataset manifest and write a checkpoint
    Train { manifest: PathBuf, out: PathBuf },
    /// Evaluate Linear, Warp-Only and (with --checkpoint) Full on a manifest
    Eval { manifest: PathBuf, out: PathBuf },
    /// Write a synthetic sequence and its manifest from a JSON spec
    Synth { spec: PathBuf, out_dir: PathBuf },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Flow { .. } => "flow",
            Cmd::Interp { .. } => "interp",
            Cmd::Extrapolate { .. } => "extrapolate",
            Cmd::Train { .. } => "train",
            Cmd::Eval { .. } => "eval",
            Cmd::Synth { .. } => "synth",
        }
    }
}

fn header(cmd: &Cmd, config: Option<&PathBuf>, s: &Settings) -> String {
    let mut h = format!(
        "# wrnet {} {}\n# config: {}\n# threads: {}\n",
        env!("CARGO_PKG_VERSION"),
        cmd.name(),
        config.map_or("(none)".to_string(), |p| p.display().to_string()),
        commands::thread_count(),
    );
    h.push_str(&s.render());
    h
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (mut s, explicit) = cli.opts.resolve()?;
    // The header is printed even when the checkpoint fails to load.
    let model = commands::load_model(&mut s, &explicit);
    eprint!("{}", header(&cli.cmd, cli.opts.config.as_ref(), &s));
    let model = model?;
    match &cli.cmd {
        Cmd::Flow { a, b, out } => commands::flow(&s, a, b, out),
        Cmd::Interp { a, b, out } => commands::interp(&s, model.as_ref(), a, b, out),
        Cmd::Extrapolate { a, b, out } => commands::extrapolate(&s, model.as_ref(), a, b, out),
        Cmd::Train { manifest, out } => commands::train(&s, model, manifest, out),
        Cmd::Eval { manifest, out } => commands::eval(&s, model.as_ref(), manifest, out),
        Cmd::Synth { spec, out_dir } => commands::synth(&s, spec, out_dir),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
