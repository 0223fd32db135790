use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use echosynth::diffusion::FastSolver;
use echosynth::downstream::{ProbeConfig, SegConfig};
use echosynth::error::{Error, ErrorClass, Result};
use echosynth::experiment::{
    cmd_downstream_cls, cmd_downstream_seg, cmd_evaluate, cmd_ingest, cmd_make_fixture, cmd_report, cmd_synthesize,
    cmd_train, ClsArgs, DownstreamSummary, EvalArgs, FixtureArgs, IngestArgs, RegimeArgs, SegArgs, SynthArgs,
    TrainArgs,
};
use echosynth::layered::layered;
use echosynth::metrics::KidParams;
use echosynth::models::GenerationMode;
use echosynth::prompt::ViewPhase;
use echosynth::training::TrainConfig;

const SEG_ENV_PREFIX: &str = "ECHOSYNTH_SEG__";
const CLS_ENV_PREFIX: &str = "ECHOSYNTH_CLS__";

#[derive(Parser)]
#[command(name = "echosynth", version, about = "Train, sample and evaluate conditional echo image generators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator on a dataset manifest.
    Train(TrainCmd),
    /// Sample images from a checkpoint into a synthetic manifest.
    Synthesize(SynthCmd),
    /// FID and KID of a synthetic manifest against a real one.
    Evaluate(EvalCmd),
    /// Train segmentation models on real/synthetic mixes and compare them.
    DownstreamSeg(SegCmd),
    /// Linear phase probes on a frozen backbone across mixes.
    DownstreamCls(ClsCmd),
    /// Merge the reports of several run directories.
    Report(ReportCmd),
    /// Read a scan tree into manifests.
    Ingest(IngestCmd),
    /// Write a phantom scan tree.
    MakeFixture(FixtureCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Unconditional,
    Text,
    TextSeg,
}

impl From<Mode> for GenerationMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Unconditional => GenerationMode::Unconditional,
            Mode::Text => GenerationMode::Text,
            Mode::TextSeg => GenerationMode::TextSeg,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Small images and networks, minutes on a CPU.
    Desk,
    /// Full-scale settings.
    Paper,
}

#[derive(Args)]
struct Layering {
    /// TOML file overlaid on the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key.path=value` override, applied after the file and environment.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[command(flatten)]
    layering: Layering,
    /// Manifest file or directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct SynthCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    /// Restrict to these view/phases, e.g. 2CH-ED; cycles over all four by default.
    #[arg(long = "view-phase")]
    view_phases: Vec<ViewPhase>,
    #[arg(long)]
    label_source: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    no_repeat: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 25, conflicts_with = "full_chain")]
    steps: usize,
    /// Run every reverse step instead of a strided solver.
    #[arg(long)]
    full_chain: bool,
    #[arg(long, default_value = "multistep2")]
    solver: FastSolver,
    #[arg(long)]
    guidance_scale: Option<f64>,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    synthetic: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `random-projection[:seed[:side[:dim]]]` or a registered asset name.
    #[arg(long, default_value = "random-projection")]
    extractor: String,
    #[arg(long)]
    assets: Option<PathBuf>,
    #[arg(long)]
    kid_subset_size: Option<usize>,
    #[arg(long, default_value_t = 100)]
    kid_subsets: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Row label in the report.
    #[arg(long, default_value = "synthetic")]
    model: String,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RegimeCmd {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    validation: PathBuf,
    #[arg(long)]
    synthetic: Option<PathBuf>,
    /// Synthetic share per regime, in percent of the real count.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    mix: Vec<u32>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    layering: Layering,
}

impl RegimeCmd {
    fn regimes(&self) -> RegimeArgs {
        RegimeArgs {
            train: self.train.clone(),
            validation: self.validation.clone(),
            synthetic: self.synthetic.clone(),
            mix_percents: self.mix.clone(),
            out: self.out.clone(),
        }
    }
}

#[derive(Args)]
struct SegCmd {
    #[command(flatten)]
    common: RegimeCmd,
}

#[derive(Args)]
struct ClsCmd {
    #[command(flatten)]
    common: RegimeCmd,
    #[arg(long)]
    assets: Option<PathBuf>,
}

#[derive(Args)]
struct ReportCmd {
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestCmd {
    #[arg(long)]
    root: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resolution: Option<usize>,
    /// Lowest-id patients held out as validation.
    #[arg(long)]
    validation_patients: Option<usize>,
}

#[derive(Args)]
struct FixtureCmd {
    #[arg(long)]
    root: PathBuf,
    #[arg(long, default_value_t = 8)]
    patients: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
}

fn print_downstream(s: &DownstreamSummary) {
    match &s.comparison {
        Some(c) => print!("{}", c.to_markdown()),
        None => print!("{}", s.report.to_markdown()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let base = match c.preset {
                Preset::Desk => TrainConfig::desk(c.mode.into()),
                Preset::Paper => TrainConfig::paper(c.mode.into()),
            };
            let config = TrainConfig::layered(&base, c.layering.config.as_deref(), std::env::vars(), &c.layering.overrides)?;
            let s = cmd_train(&TrainArgs { config, data: c.data, run_dir: c.run_dir, resume: c.resume })?;
            println!("trained {} iterations", s.iterations);
            if let Some(l) = s.final_loss {
                println!("final loss {l:.5}");
            }
            if let Some(p) = s.last_checkpoint {
                println!("checkpoint {}", p.display());
            }
        }
        Command::Synthesize(c) => {
            let mut args = SynthArgs::new(c.checkpoint, c.out, c.count);
            if !c.view_phases.is_empty() {
                args.view_phases = c.view_phases;
            }
            args.label_source = c.label_source;
            args.lexicon = c.lexicon;
            args.no_repeat = c.no_repeat;
            args.seed = c.seed;
            args.sampler_steps = (!c.full_chain).then_some(c.steps);
            args.solver = c.solver;
            args.guidance_scale = c.guidance_scale;
            args.batch_size = c.batch_size;
            let s = cmd_synthesize(&args)?;
            println!("wrote {} images to {} (manifest {})", s.count, s.out.display(), s.manifest_hash);
        }
        Command::Evaluate(c) => {
            let mut args = EvalArgs::new(c.real, c.synthetic, c.out);
            args.extractor = c.extractor;
            args.assets = c.assets;
            args.kid = KidParams { subset_size: c.kid_subset_size, n_subsets: c.kid_subsets, seed: c.seed };
            args.model = c.model;
            args.cache_dir = c.cache_dir;
            print!("{}", cmd_evaluate(&args)?.to_markdown());
        }
        Command::DownstreamSeg(c) => {
            let l = &c.common.layering;
            let config: SegConfig =
                layered(&SegConfig::desk(), l.config.as_deref(), SEG_ENV_PREFIX, std::env::vars(), &l.overrides)?;
            print_downstream(&cmd_downstream_seg(&SegArgs { regimes: c.common.regimes(), config })?);
        }
        Command::DownstreamCls(c) => {
            let l = &c.common.layering;
            let config: ProbeConfig =
                layered(&ProbeConfig::desk(), l.config.as_deref(), CLS_ENV_PREFIX, std::env::vars(), &l.overrides)?;
            print_downstream(&cmd_downstream_cls(&ClsArgs { regimes: c.common.regimes(), config, assets: c.assets })?);
        }
        Command::Report(c) => print!("{}", cmd_report(&c.runs, &c.out)?.to_markdown()),
        Command::Ingest(c) => {
            let s = cmd_ingest(&IngestArgs {
                root: c.root,
                out: c.out,
                resolution: c.resolution,
                validation_patients: c.validation_patients,
            })?;
            for (dir, n) in &s.manifests {
                println!("{n} records in {}", dir.display());
            }
            for g in &s.gaps {
                println!("gap: {} {}: {}", g.patient_id, g.view_phase, g.reason);
            }
        }
        Command::MakeFixture(c) => {
            let root = cmd_make_fixture(&FixtureArgs { root: c.root, patients: c.patients, size: c.size, skip_labels: vec![] })?;
            println!("wrote {} phantom patients under {}", c.patients, root.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Configuration => 2,
        ErrorClass::DataIntegrity => 3,
        ErrorClass::NumericFault => 4,
        ErrorClass::Other => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
