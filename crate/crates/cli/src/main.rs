use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hoimotion::harness::{InteractionClip, Phase, Pipeline, PipelineConfig};
use hoimotion::io::load_motion;
use hoimotion::motion::recover_joints;
use hoimotion::skeleton::{JOINT_NAMES, PARENTS};
use hoimotion::CoreError;

#[derive(Parser, Debug)]
#[command(name = "hoimotion", version, about = "Text-driven human-object interaction motion synthesis")]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (paths.out_dir).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Arbitrary override, e.g. `--set stage1.train_steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Rerun the phase even if it already finished under this config.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic interaction dataset.
    GenData {
        #[arg(long)]
        n_clips: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Produce coarse text for every clip.
    Annotate,
    /// Train the hand and affordance diffusion model.
    TrainStage1 {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sample hand trajectories and affordance for test clips.
    SampleStage1,
    /// Train the motion denoiser and its control branch.
    TrainStage2 {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate full-body motion for test clips.
    Sample(GuidanceArgs),
    /// Score generated motions and write eval/report.{json,csv}.
    Evaluate,
    /// Write per-frame joint positions of one clip as JSON.
    ExportRender {
        #[arg(long)]
        clip: String,
        #[arg(long, value_enum, default_value_t = Source::Generated)]
        source: Source,
        /// Destination; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Every phase in order, resuming finished ones.
    Run(GuidanceArgs),
}

#[derive(Args, Debug, Default)]
struct GuidanceArgs {
    #[arg(long, value_enum)]
    joint_guidance: Option<Toggle>,
    #[arg(long, value_enum)]
    foot_guidance: Option<Toggle>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Contact distance threshold in meters.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lbfgs_iters: Option<usize>,
    /// Sampling seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Source {
    Generated,
    Reference,
}

impl GuidanceArgs {
    fn push(&self, out: &mut Vec<(String, String)>) {
        let mut set = |k: &str, v: String| out.push((format!("guidance.{k}"), v));
        if let Some(t) = self.joint_guidance {
            set("joint", matches!(t, Toggle::On).to_string());
        }
        if let Some(t) = self.foot_guidance {
            set("foot", matches!(t, Toggle::On).to_string());
        }
        if let Some(v) = self.alpha {
            set("alpha", format!("{v:?}"));
        }
        if let Some(v) = self.beta {
            set("beta", format!("{v:?}"));
        }
        if let Some(v) = self.tau {
            set("tau", format!("{v:?}"));
        }
        if let Some(v) = self.lbfgs_iters {
            set("lbfgs_iters", v.to_string());
        }
        if let Some(v) = self.seed {
            set("seed", v.to_string());
        }
    }
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>, CoreError> {
    let mut out = Vec::new();
    for raw in &cli.overrides {
        let (k, v) = raw
            .split_once('=')
            .ok_or_else(|| CoreError::Config(format!("--set expects KEY=VALUE, got {raw:?}")))?;
        out.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    if let Some(dir) = &cli.out_dir {
        out.push(("paths.out_dir".into(), format!("{:?}", dir.display().to_string())));
    }
    match &cli.command {
        Command::GenData { n_clips, seed } => {
            if let Some(n) = n_clips {
                out.push(("data.n_clips".into(), n.to_string()));
            }
            if let Some(s) = seed {
                out.push(("data.seed".into(), s.to_string()));
            }
        }
        Command::TrainStage1 { steps: Some(s) } => out.push(("stage1.train_steps".into(), s.to_string())),
        Command::TrainStage2 { steps: Some(s) } => out.push(("stage2.train_steps".into(), s.to_string())),
        Command::Sample(g) | Command::Run(g) => g.push(&mut out),
        _ => {}
    }
    Ok(out)
}

#[derive(serde::Serialize)]
struct RenderExport {
    clip_id: String,
    source: &'static str,
    fps: f64,
    joint_names: Vec<&'static str>,
    parents: Vec<Option<usize>>,
    /// frames × joints × xyz, meters, y up.
    frames: Vec<Vec<[f64; 3]>>,
}

fn export_render(pipe: &Pipeline, clip_id: &str, source: Source) -> Result<String, CoreError> {
    let dir = pipe.paths.data().join(clip_id);
    if !dir.join("meta.json").exists() {
        return Err(CoreError::InvalidArgument(format!("no clip {clip_id:?} under {}", pipe.paths.data().display())));
    }
    let motion = match source {
        Source::Reference => InteractionClip::load(&dir, None)?.motion,
        Source::Generated => {
            let stem = pipe.paths.samples().join(clip_id).join("motion");
            if !stem.with_extension("json").exists() {
                return Err(CoreError::MissingCheckpoint { phase: Phase::Sample.name().into(), path: stem.display().to_string() });
            }
            load_motion(&stem, None)?
        }
    };
    let joints = recover_joints(&motion);
    let export = RenderExport {
        clip_id: clip_id.to_owned(),
        source: match source {
            Source::Generated => "generated",
            Source::Reference => "reference",
        },
        fps: motion.fps,
        joint_names: JOINT_NAMES.to_vec(),
        parents: PARENTS.to_vec(),
        frames: (0..joints.frames()).map(|f| joints.frame(f).to_vec()).collect(),
    };
    Ok(serde_json::to_string(&export)?)
}

fn run(cli: Cli) -> Result<(), CoreError> {
    let config = PipelineConfig::load(cli.config.as_deref(), &overrides(&cli)?)?;
    let mut pipe = Pipeline::new(config)?;
    let phase = match &cli.command {
        Command::GenData { .. } => Phase::GenData,
        Command::Annotate => Phase::Annotate,
        Command::TrainStage1 { .. } => Phase::TrainStage1,
        Command::SampleStage1 => Phase::SampleStage1,
        Command::TrainStage2 { .. } => Phase::TrainStage2,
        Command::Sample(_) => Phase::Sample,
        Command::Evaluate => {
            pipe.run_phase(Phase::Evaluate, cli.force)?;
            println!("{}", serde_json::to_string_pretty(&pipe.load_report()?)?);
            return Ok(());
        }
        Command::ExportRender { clip, source, output } => {
            let json = export_render(&pipe, clip, *source)?;
            match output {
                Some(p) => {
                    if let Some(parent) = p.parent() {
                        fs::create_dir_all(parent)?;
                    }
                    fs::write(p, json)?;
                }
                None => println!("{json}"),
            }
            return Ok(());
        }
        Command::Run(_) => {
            if cli.force {
                for phase in Phase::ALL {
                    pipe.run_phase(phase, true)?;
                }
            }
            let report = pipe.run_all()?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            return Ok(());
        }
    };
    pipe.run_phase(phase, cli.force)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            let code = match &e {
                CoreError::Config(_) => 2,
                e if e.is_numeric() => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
