use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mutadapt::error::Error;
use mutadapt::evaluation::{DepthEvalConfig, DepthScaling};
use mutadapt::map_refinement::{BaOptions, CullConfig};
use mutadapt::pipeline::{self, Preset, RunConfig};
use mutadapt::synthetic::SceneSpec;

#[derive(Parser)]
#[command(name = "mutadapt", version, about = "Online mutual adaptation of a depth network and a keyframe SLAM map")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the adaptation loop described by a config file.
    Run {
        /// Run config (TOML). Defaults apply to every key left out.
        config: Option<PathBuf>,
        /// Overrides `output_dir`.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Print the effective config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Depth accuracy of a checkpoint on a keyframe log, TUM directory or run config.
    Eval {
        #[arg(short, long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        source: PathBuf,
        #[arg(long, value_enum, default_value_t = Scaling::None)]
        scaling: Scaling,
        /// Relative error below which a pixel counts as correct.
        #[arg(long, default_value_t = 0.1)]
        threshold: f64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Cull map points and run global BA once over a whole source.
    Ba {
        #[arg(short, long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        source: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        #[arg(long, default_value_t = 10.0)]
        d_max: f64,
        #[arg(long, default_value_t = 30)]
        max_iters: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Render a synthetic sequence as a keyframe log with ground truth.
    Synth {
        #[arg(long, value_enum, default_value_t = PresetArg::EnvA)]
        preset: PresetArg,
        /// Scene description file; overrides the preset.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short = 'n', long, default_value_t = 100)]
        frames: usize,
        /// Use the noise of the default run instead of the scene's.
        #[arg(long)]
        noisy: bool,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Export plot-ready CSV files from a run directory.
    PlotExport {
        run_dir: PathBuf,
        /// Defaults to `<run_dir>/plots`.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scaling {
    None,
    GlobalMedian,
    GlobalLsq,
    PerFrameMedian,
}

impl From<Scaling> for DepthScaling {
    fn from(s: Scaling) -> Self {
        match s {
            Scaling::None => DepthScaling::None,
            Scaling::GlobalMedian => DepthScaling::GlobalMedian,
            Scaling::GlobalLsq => DepthScaling::GlobalLsq,
            Scaling::PerFrameMedian => DepthScaling::PerFrameMedian,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    EnvA,
    EnvB,
    Layered,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::EnvA => Preset::EnvA,
            PresetArg::EnvB => Preset::EnvB,
            PresetArg::Layered => Preset::Layered,
        }
    }
}

fn execute(cmd: Command) -> mutadapt::error::Result<()> {
    match cmd {
        Command::Run {
            config,
            output,
            print_config,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            if let Some(o) = output {
                cfg.output_dir = o;
            }
            if print_config {
                print!("{}", cfg.to_toml()?);
                return Ok(());
            }
            let out = pipeline::run(&cfg)?;
            println!(
                "{} keyframes, {} BA runs, artifacts in {}",
                out.keyframes,
                out.ba.len(),
                cfg.output_dir.display()
            );
            for (k, v) in &out.manifest.summary {
                println!("{k} = {v}");
            }
        }
        Command::Eval {
            checkpoint,
            source,
            scaling,
            threshold,
            output,
        } => {
            let cfg = DepthEvalConfig {
                rel_threshold: threshold,
                scaling: scaling.into(),
                ..DepthEvalConfig::default()
            };
            let m = pipeline::eval(&checkpoint, &pipeline::source_from_path(&source)?, &cfg, &output)?;
            for (k, v) in &m.summary {
                println!("{k} = {v}");
            }
        }
        Command::Ba {
            checkpoint,
            source,
            gamma,
            d_max,
            max_iters,
            output,
        } => {
            let cull = CullConfig { gamma, d_max };
            let opts = BaOptions {
                max_iters,
                ..BaOptions::default()
            };
            let m = pipeline::ba(&checkpoint, &pipeline::source_from_path(&source)?, &cull, &opts, &output)?;
            for (k, v) in &m.summary {
                println!("{k} = {v}");
            }
        }
        Command::Synth {
            preset,
            spec,
            seed,
            frames,
            noisy,
            output,
        } => {
            let mut s: SceneSpec = match spec {
                Some(p) => pipeline::parse_toml(&p)?,
                None => Preset::from(preset).spec(seed, frames),
            };
            s.seed = seed;
            s.frames = frames;
            if noisy {
                s.noise = pipeline::run_noise();
            }
            pipeline::synth(&s, &output)?;
            println!("{frames} frames written to {}", output.display());
        }
        Command::PlotExport { run_dir, output } => {
            let out = output.unwrap_or_else(|| run_dir.join("plots"));
            pipeline::plot_export(&run_dir, &out)?;
            println!("plot data written to {}", out.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::MissingFile(_) | Error::InvalidArgument(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
