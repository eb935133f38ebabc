//! `loco`: track, evaluate, benchmark and generate synthetic data.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use locotrack::bench::{run_bench, BenchConfig};
use locotrack::pipeline::{run_eval, run_track, write_synth, BackboneKind, TrackJob, VideoFormat, WeightsSource};
use locotrack::rng::RngSeed;
use locotrack::selftest::run_selftest;
use locotrack::synth::Motion;
use locotrack::{synth_generate, QueryMode, SynthSpec, TrackerConfig, Variant};

#[derive(Parser)]
#[command(name = "loco", version, about = "Point tracking with local 4D correlation")]
struct Cli {
    /// TOML file with defaults; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "LOCOTRACK_WORKERS")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track query points through a video.
    Track(TrackArgs),
    /// Score a track file against ground truth.
    Eval(EvalArgs),
    /// Measure throughput and report operation counts.
    Bench(BenchArgs),
    /// Write a synthetic video with ground-truth tracks.
    Synth(SynthArgs),
    /// Check the optimized kernels against their references.
    Selftest(SelftestArgs),
}

#[derive(Args, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
struct TrackArgs {
    /// Directory of PNG frames or a tensor container.
    #[arg(long)]
    video: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Weights container; random weights from --seed when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// S or B.
    #[arg(long)]
    variant: Option<String>,
    /// learned or patch-identity.
    #[arg(long)]
    backbone: Option<String>,
    /// Shorthand for --backbone patch-identity.
    #[arg(long)]
    patch_identity: bool,
    /// learned or argmax.
    #[arg(long)]
    refiner: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Replace the Stage I fusion conv with a level-0 pass-through.
    #[arg(long)]
    identity_fusion: bool,
    /// Store every refinement iterate in the track file.
    #[arg(long)]
    history: bool,
    /// Write marker overlays into this directory.
    #[arg(long)]
    render_overlays: Option<PathBuf>,
}

#[derive(Args, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
struct EvalArgs {
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    /// strided or first.
    #[arg(long)]
    query_mode: Option<String>,
    /// Also write the report as JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
struct BenchArgs {
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Comma-separated point counts.
    #[arg(long, value_delimiter = ',')]
    points: Option<Vec<usize>>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// translate, sine or occluder.
    #[arg(long)]
    motion: Option<String>,
    #[arg(long)]
    speed: Option<f32>,
    /// Number of ground-truth tracks.
    #[arg(long)]
    tracks: Option<usize>,
    /// png or tensor.
    #[arg(long)]
    video_format: Option<String>,
    /// Which queries to write: strided or first.
    #[arg(long)]
    query_mode: Option<String>,
}

#[derive(Args)]
struct SelftestArgs {
    /// Print the results as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    workers: Option<usize>,
    track: TrackArgs,
    eval: EvalArgs,
    bench: BenchArgs,
    synth: SynthArgs,
}

impl ConfigFile {
    fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Flag if given, else the config value.
fn pick<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

fn parse<T: FromStr<Err = locotrack::Error>>(value: Option<String>, default: T) -> anyhow::Result<T> {
    Ok(match value {
        Some(s) => s.parse()?,
        None => default,
    })
}

fn required<T>(value: Option<T>, flag: &str) -> anyhow::Result<T> {
    match value {
        Some(v) => Ok(v),
        None => bail!("missing required --{flag}"),
    }
}

fn track(a: TrackArgs, f: TrackArgs) -> anyhow::Result<()> {
    let defaults = TrackerConfig::default();
    let backbone = if a.patch_identity || f.patch_identity {
        BackboneKind::PatchIdentity
    } else {
        parse(pick(a.backbone, f.backbone), defaults.backbone)?
    };
    let weights = match (pick(a.weights, f.weights), pick(a.seed, f.seed)) {
        (Some(_), Some(_)) => bail!("--weights and --seed are mutually exclusive"),
        (Some(p), None) => WeightsSource::File(p),
        (None, s) => WeightsSource::Seeded(RngSeed(s.unwrap_or(0))),
    };
    let job = TrackJob {
        video: required(pick(a.video, f.video), "video")?,
        queries: required(pick(a.queries, f.queries), "queries")?,
        out: required(pick(a.out, f.out), "out")?,
        weights,
        identity_fusion: a.identity_fusion || f.identity_fusion,
        config: TrackerConfig {
            variant: parse(pick(a.variant, f.variant), defaults.variant)?,
            backbone,
            refiner: parse(pick(a.refiner, f.refiner), defaults.refiner)?,
            iterations: pick(a.iterations, f.iterations).unwrap_or(defaults.iterations),
            keep_history: a.history || f.history,
            ..defaults
        },
        overlays: pick(a.render_overlays, f.render_overlays),
    };
    let file = run_track(&job)?;
    eprintln!("tracked {} points over {} frames -> {}", file.points.len(), file.num_frames, job.out.display());
    Ok(())
}

fn eval(a: EvalArgs, f: EvalArgs) -> anyhow::Result<()> {
    let pred = required(pick(a.pred, f.pred), "pred")?;
    let gt = required(pick(a.gt, f.gt), "gt")?;
    let mode = parse(pick(a.query_mode, f.query_mode), QueryMode::Strided)?;
    let report = run_eval(&pred, &gt, mode)?;
    println!("{report}");
    if let Some(p) = pick(a.report, f.report) {
        std::fs::write(&p, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn bench(a: BenchArgs, f: BenchArgs) -> anyhow::Result<()> {
    let d = BenchConfig::default();
    let cfg = BenchConfig {
        variant: parse::<Variant>(pick(a.variant, f.variant), d.variant)?,
        backbone: parse(pick(a.backbone, f.backbone), d.backbone)?,
        frames: pick(a.frames, f.frames).unwrap_or(d.frames),
        height: pick(a.height, f.height).unwrap_or(d.height),
        width: pick(a.width, f.width).unwrap_or(d.width),
        n_points: pick(a.points, f.points).unwrap_or(d.n_points),
        iterations: pick(a.iterations, f.iterations).unwrap_or(d.iterations),
        repeats: pick(a.repeats, f.repeats).unwrap_or(d.repeats),
        seed: RngSeed(pick(a.seed, f.seed).unwrap_or(d.seed.0)),
    };
    let report = run_bench(&cfg)?;
    println!("{report}");
    if let Some(p) = pick(a.report, f.report) {
        std::fs::write(&p, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn synth(a: SynthArgs, f: SynthArgs) -> anyhow::Result<()> {
    let d = SynthSpec::default();
    let spec = SynthSpec {
        seed: RngSeed(pick(a.seed, f.seed).unwrap_or(d.seed.0)),
        frames: pick(a.frames, f.frames).unwrap_or(d.frames),
        height: pick(a.height, f.height).unwrap_or(d.height),
        width: pick(a.width, f.width).unwrap_or(d.width),
        motion: parse::<Motion>(pick(a.motion, f.motion), d.motion)?,
        speed: pick(a.speed, f.speed).unwrap_or(d.speed),
        n_queries: pick(a.tracks, f.tracks).unwrap_or(d.n_queries),
    };
    let out = required(pick(a.out, f.out), "out")?;
    let format = parse(pick(a.video_format, f.video_format), VideoFormat::Png)?;
    let mode = parse(pick(a.query_mode, f.query_mode), QueryMode::First)?;
    let data = synth_generate(&spec)?;
    let paths = write_synth(&data, &out, format, mode)?;
    println!("video {}", paths.video.display());
    println!("ground truth {}", paths.ground_truth.display());
    println!("queries {}", paths.queries.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let file = ConfigFile::load(cli.config.as_deref())?;
    if let Some(n) = pick(cli.workers, file.workers) {
        if n == 0 {
            bail!("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Track(a) => track(a, file.track)?,
        Command::Eval(a) => eval(a, file.eval)?,
        Command::Bench(a) => bench(a, file.bench)?,
        Command::Synth(a) => synth(a, file.synth)?,
        Command::Selftest(a) => {
            let report = run_selftest();
            if a.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("{report}");
            }
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<locotrack::Error>().map_or(1, |e| e.code());
            ExitCode::from(code as u8)
        }
    }
}
