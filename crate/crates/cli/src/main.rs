mod wav;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use postbeam_core::eval::{self, EvalConfig, EvalSignal};
use postbeam_core::pipeline::{self, PipelineConfig, Scheduling};
use postbeam_core::scenesim::{self, SceneSpec, SteeringTable};

#[derive(Parser)]
#[command(name = "postbeam", version, about = "Low-latency blind source separation with posterior-driven MVDR beamforming")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enhance a target speaker in a multichannel WAV recording.
    Enhance(EnhanceArgs),
    /// Render a synthetic scene to a directory.
    Simulate(SimulateArgs),
    /// Score baselines or a front-end parameter grid on a rendered scene.
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Args)]
struct EnhanceArgs {
    /// Multichannel input WAV.
    #[arg(long = "in")]
    input: PathBuf,
    /// Steering table for the input array.
    #[arg(long)]
    steering: PathBuf,
    /// Target azimuth in degrees.
    #[arg(long, allow_hyphen_values = true)]
    target_az: f64,
    /// Mono output WAV (32-bit float).
    #[arg(long)]
    out: PathBuf,
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the timing log as JSON lines.
    #[arg(long)]
    timing: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// Reproducible single-context run with ideal back-end scheduling.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    t_bf: Option<usize>,
    #[arg(long)]
    alpha_bf: Option<f64>,
    #[arg(long)]
    alpha_bss: Option<f64>,
    #[arg(long)]
    alpha_wpe: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(v) = self.t_bf {
            cfg.beamformer.t_bf = v;
        }
        if let Some(v) = self.alpha_bf {
            cfg.beamformer.alpha = v;
        }
        if let Some(v) = self.alpha_bss {
            cfg.alpha_bss = v;
        }
        if let Some(v) = self.alpha_wpe {
            cfg.wpe_front.alpha = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene description (TOML); the built-in default scene when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Noisy, WPE, WPE+DS, WPE+MPDR and the proposed system.
    Baselines(EvalArgs),
    /// Full factorial grid over `T^BF` and `α^BF`.
    Grid(GridArgs),
}

#[derive(Args)]
struct EvalArgs {
    /// Directory written by `simulate`.
    #[arg(long)]
    scene: PathBuf,
    /// Evaluation configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated `T^BF` values.
    #[arg(long, value_delimiter = ',', required = true)]
    t_bf: Vec<usize>,
    /// Comma-separated `α^BF` values.
    #[arg(long, value_delimiter = ',', required = true)]
    alpha_bf: Vec<f64>,
    #[arg(long)]
    alpha_bss: Option<f64>,
    #[arg(long)]
    alpha_wpe: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Usage problems detected after argument parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn require_file(flag: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(UsageError(format!("{flag}: no such file: {}", path.display())).into())
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(flag: &str, path: &Path) -> Result<T> {
    require_file(flag, path)?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| UsageError(format!("{flag}: {}: {e}", path.display())).into())
}

fn enhance(args: EnhanceArgs) -> Result<()> {
    require_file("--in", &args.input)?;
    require_file("--steering", &args.steering)?;
    let mut cfg: PipelineConfig = match &args.config {
        Some(p) => read_toml("--config", p)?,
        None => PipelineConfig::default(),
    };
    args.overrides.apply(&mut cfg);
    cfg.target_azimuths = vec![args.target_az];
    if args.deterministic {
        cfg.scheduling = Scheduling::Ideal;
    }
    info!("effective config:\n{}", cfg.to_toml()?);
    let (input, fs) = wav::read(&args.input)?;
    if fs != cfg.stft.sample_rate {
        return Err(UsageError(format!(
            "--in: sample rate {fs} Hz differs from configured {} Hz",
            cfg.stft.sample_rate
        ))
        .into());
    }
    let steering = SteeringTable::load(&args.steering).context("--steering")?;
    let out = pipeline::run(&input, &cfg, &steering)?;
    wav::write(&args.out, &[out.enhanced], fs)?;
    info!(
        "ticks {} skipped {} failed {} wpe resets {}; frame p95 {:.3} ms",
        out.ticks,
        out.skipped_ticks,
        out.failed_ticks,
        out.wpe_resets,
        out.timing.frame_percentile(95.0)
    );
    if let Some(p) = &args.timing {
        std::fs::write(p, out.timing.to_json_lines()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let spec: SceneSpec = match &args.spec {
        Some(p) => read_toml("--spec", p)?,
        None => SceneSpec::default_scene(),
    };
    spec.validate().map_err(|e| UsageError(format!("--spec: {e}")))?;
    info!("scene:\n{}", spec.to_toml()?);
    let scene = scenesim::render_with(&spec, args.seed, &mut |p| {
        wav::read(p)
            .map(|(ch, _)| ch.into_iter().next().unwrap_or_default())
            .map_err(|e| postbeam_core::Error::Io(format!("{}: {e}", p.display())))
    })?;
    let dir = &args.out;
    std::fs::create_dir_all(dir.join("refs")).with_context(|| format!("creating {}", dir.display()))?;
    wav::write(&dir.join("mixture.wav"), &scene.mixture, scene.sample_rate)?;
    for (n, src) in spec.sources.iter().enumerate() {
        wav::write(&dir.join("refs").join(format!("{}.wav", src.name)), &[scene.reference(n).to_vec()], scene.sample_rate)?;
    }
    scene.steering.save(&dir.join("steering.bin"))?;
    std::fs::write(dir.join("scene.toml"), spec.to_toml()?)?;
    info!("wrote {}", dir.display());
    Ok(())
}

struct LoadedScene {
    mixture: Vec<Vec<f64>>,
    reference: Vec<f64>,
    steering: SteeringTable,
    sample_rate: u32,
}

fn load_scene(dir: &Path) -> Result<LoadedScene> {
    let spec: SceneSpec = read_toml("--scene", &dir.join("scene.toml"))?;
    require_file("--scene", &dir.join("mixture.wav"))?;
    let target = spec
        .sources
        .first()
        .ok_or_else(|| UsageError("--scene: scene has no sources".into()))?;
    let (mixture, sample_rate) = wav::read(&dir.join("mixture.wav"))?;
    let (reference, _) = wav::read(&dir.join("refs").join(format!("{}.wav", target.name)))?;
    let steering = SteeringTable::load(&dir.join("steering.bin")).context("--scene: steering.bin")?;
    Ok(LoadedScene {
        mixture,
        reference: reference.into_iter().next().unwrap_or_default(),
        steering,
        sample_rate,
    })
}

fn eval_config(config: Option<&Path>, overrides: &Overrides, sample_rate: u32) -> Result<EvalConfig> {
    let mut cfg: EvalConfig = match config {
        Some(p) => read_toml("--config", p)?,
        None => EvalConfig::default(),
    };
    overrides.apply(&mut cfg.pipeline);
    if cfg.pipeline.stft.sample_rate != sample_rate {
        return Err(UsageError(format!("--scene: sample rate {sample_rate} Hz differs from configured")).into());
    }
    info!("effective config:\n{}", toml::to_string(&cfg)?);
    Ok(cfg)
}

fn emit(table: &str, out: Option<&Path>) -> Result<()> {
    print!("{table}");
    if let Some(p) = out {
        std::fs::write(p, table).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn eval_cmd(cmd: EvalCommand) -> Result<()> {
    match cmd {
        EvalCommand::Baselines(args) => {
            let scene = load_scene(&args.scene)?;
            let cfg = eval_config(args.config.as_deref(), &args.overrides, scene.sample_rate)?;
            let signal = EvalSignal::from_parts(&scene.mixture, &scene.reference, &cfg);
            let proposed = eval::run_proposed(&signal, &cfg, &scene.steering)?;
            let report = eval::baselines_with(&scene.steering, &cfg, &signal, &proposed)?;
            emit(&report.to_table(), args.out.as_deref())
        }
        EvalCommand::Grid(args) => {
            if args.t_bf.iter().any(|&t| t == 0) || args.alpha_bf.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
                return Err(UsageError("--t-bf values must be positive and --alpha-bf values in (0, 1]".into()).into());
            }
            let scene = load_scene(&args.scene)?;
            let overrides = Overrides {
                alpha_bss: args.alpha_bss,
                alpha_wpe: args.alpha_wpe,
                seed: args.seed,
                ..Default::default()
            };
            let cfg = eval_config(args.config.as_deref(), &overrides, scene.sample_rate)?;
            let signal = EvalSignal::from_parts(&scene.mixture, &scene.reference, &cfg);
            let recorded = eval::run_proposed(&signal, &cfg, &scene.steering)?;
            let grid = eval::grid_search_with(&signal, &cfg, &recorded.schedule, &args.t_bf, &args.alpha_bf)?;
            emit(&grid.to_table(), args.out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("POSTBEAM_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Enhance(a) => enhance(a),
        Command::Simulate(a) => simulate(a),
        Command::Eval(c) => eval_cmd(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
