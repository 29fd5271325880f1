//! `condmdi` command line.

use std::cell::Cell;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use condmdi::diffusion::{NoiseSchedule, ScheduleKind};
use condmdi::eval::{evaluate_scheme, EvalOptions, ModelContext, ToyExtractor};
use condmdi::io::{
    humanml3d_to_relative, ingest_corpus, parse_npy, read_meta, read_mseq, sidecar_path, synth_corpus, write_corpus,
    write_meta, write_mseq, Checkpoint, ClipMeta, SynthConfig, SynthKind, CHECKPOINT_VERSION, HUMANML3D_FPS,
    MSEQ_VERSION,
};
use condmdi::mask::{KeyframeFile, MaskScheme};
use condmdi::motion::{
    global_to_relative, relative_to_global, FeatureLayout, MotionSequence, NormalizationStats, RootConvention, RootIntegration, SkeletonSpec,
};
use condmdi::nn::{DenoiserConfig, HashedBagOfTokens, UNet};
use condmdi::sampling::{GuidanceMode, SamplerConfig, Strategy};
use condmdi::training::{train_loop, LossKind, TrainConfig, TrainState};

use crate::service::{self, generate_clip, AppState, GenerateRequest, ModelSnapshot, ServiceConfig};

type CliResult<T = ()> = Result<T, Box<dyn std::error::Error>>;

#[derive(Debug, Parser)]
#[command(name = "condmdi", version, about = "Keyframe-conditioned motion diffusion", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a denoiser on a motion corpus.
    Train(TrainArgs),
    /// Generate one clip from a checkpoint.
    Sample(SampleArgs),
    /// Score a checkpoint on a corpus under a keyframe scheme.
    Eval(EvalArgs),
    /// Convert a clip between root conventions.
    Convert(ConvertArgs),
    /// Run the HTTP generation service.
    Serve(ServeArgs),
    /// Print the noise schedule as CSV.
    ScheduleDump(ScheduleArgs),
    /// Write a synthetic training corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn train(self) -> TrainConfig {
        match self {
            Preset::Paper => TrainConfig::paper(),
            Preset::Desk => TrainConfig::desk(),
        }
    }

    pub fn model(self, feature_width: usize) -> DenoiserConfig {
        match self {
            Preset::Paper => DenoiserConfig::paper(feature_width),
            Preset::Desk => DenoiserConfig::desk(feature_width),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory (MSEQ files with sidecars, or a HumanML3D export).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, env = "CONDMDI_PRESET", default_value = "desk")]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for checkpoints and the loss log.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Clips held out of training, chosen by seed.
    #[arg(long, default_value_t = 0)]
    pub holdout: usize,
    /// Never reveal keyframes, giving a plain motion model.
    #[arg(long)]
    pub no_mask_training: bool,
    /// Restrict the loss to unobserved entries.
    #[arg(long)]
    pub unobserved_loss: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Cond,
    Uncond,
    Imp,
    #[value(name = "imp+guide")]
    ImpGuide,
}

impl StrategyArg {
    fn strategy(self) -> Strategy {
        match self {
            StrategyArg::Cond => Strategy::Conditional,
            StrategyArg::Uncond => Strategy::Unconditioned,
            StrategyArg::Imp => Strategy::Imputation,
            StrategyArg::ImpGuide => Strategy::ImputationPlusGuidance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Exact,
    Surrogate,
}

impl ModeArg {
    fn mode(self) -> GuidanceMode {
        match self {
            ModeArg::Exact => GuidanceMode::ExactBackprop,
            ModeArg::Surrogate => GuidanceMode::Surrogate,
        }
    }
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    #[arg(long, value_enum, default_value = "cond")]
    pub strategy: StrategyArg,
    /// Classifier-free guidance weight.
    #[arg(long, default_value_t = 2.5)]
    pub w: f64,
    /// Reconstruction guidance weight.
    #[arg(long, default_value_t = 20.0)]
    pub wr: f64,
    /// Imputation stops once t ≤ C.
    #[arg(long = "C", default_value_t = 1)]
    pub stop_step: usize,
    #[arg(long, value_enum, default_value = "exact")]
    pub guidance_mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sample with the raw weights instead of the EMA weights.
    #[arg(long)]
    pub no_ema: bool,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig {
            strategy: self.strategy.strategy(),
            cfg_weight: self.w,
            guidance_weight: self.wr,
            stop_step: self.stop_step,
            guidance_mode: self.guidance_mode.mode(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub prompt: Option<String>,
    /// Keyframe JSON: `{"frames": [{"index", "joints", "values"}]}`.
    #[arg(long)]
    pub keyframes: Option<PathBuf>,
    /// Frames to generate; defaults to the model length.
    #[arg(long)]
    pub length: Option<usize>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Output MSEQ file (global root, world units).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// `randomK=5`, `random`, `everyT=20`, `root`, `vr` or `joint:<name>,…`.
    #[arg(long, default_value = "randomK=5")]
    pub scheme: String,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Evaluate only the first N clips.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 200)]
    pub diversity_subset: usize,
    #[arg(long, default_value_t = 32)]
    pub r_precision_batch: usize,
    /// Report JSON path; printed to stdout as well.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConventionArg {
    Global,
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IntegrationArg {
    Rotated,
    NaiveSum,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long, value_enum)]
    pub to: ConventionArg,
    #[arg(long, value_enum, default_value = "rotated")]
    pub integration: IntegrationArg,
    /// `.mseq`, or a HumanML3D `.npy` feature file.
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    /// Concurrent sampling jobs; defaults to the number of cores.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Requests allowed to wait before the service answers 503.
    #[arg(long, default_value_t = 64)]
    pub queue: usize,
    #[arg(long)]
    pub no_ema: bool,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    /// Number of diffusion steps.
    #[arg(long = "T", default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value = "cosine")]
    pub kind: String,
    /// Write to a file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 600)]
    pub clips: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated subset of sine-walk, figure-eight, jump.
    #[arg(long, value_delimiter = ',')]
    pub kinds: Vec<String>,
    #[arg(long)]
    pub min_frames: Option<usize>,
    #[arg(long)]
    pub max_frames: Option<usize>,
}

fn long_version() -> String {
    format!(
        "{}\ncheckpoint format {CHECKPOINT_VERSION}, mseq format {MSEQ_VERSION}\ntarget {}-{}, {} build",
        env!("CARGO_PKG_VERSION"),
        std::env::consts::ARCH,
        std::env::consts::OS,
        if cfg!(debug_assertions) { "debug" } else { "release" },
    )
}

/// Parses `args` (program name first) and runs the command. Exit status is
/// 0 on success, 2 on usage errors and 1 on runtime errors.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let command = Cli::command().long_version(&*Box::leak(long_version().into_boxed_str()));
    let cli = match command.try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Train(a) => train(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Convert(a) => convert(a),
        Command::Serve(a) => serve(a),
        Command::ScheduleDump(a) => schedule_dump(a),
        Command::Synth(a) => synth(a),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| format!("writing {}: {e}", path.display()))?;
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let skel = SkeletonSpec::humanml3d();
    let layout = FeatureLayout::canonical(&skel);
    let corpus = ingest_corpus(&a.data, &skel)?;
    let (train_idx, held) = corpus.split(a.holdout, a.seed);
    if train_idx.is_empty() {
        return Err("no clips left for training after the holdout".into());
    }
    let stats = NormalizationStats::from_sequences(train_idx.iter().map(|&i| &corpus.clips[i].motion))?;
    let base = a.preset.train();
    let config = TrainConfig {
        iterations: a.iterations.unwrap_or(base.iterations),
        batch_size: a.batch_size.unwrap_or(base.batch_size),
        checkpoint_every: a.checkpoint_every.unwrap_or(base.checkpoint_every),
        mask_training: !a.no_mask_training,
        loss: if a.unobserved_loss { LossKind::Unobserved } else { LossKind::Full },
        seed: a.seed,
        ..base
    };
    let mut net = a.preset.model(layout.width());
    net.mask_conditioned = config.mask_training;
    let text = HashedBagOfTokens::new(net.text_width);
    let examples = corpus.training_examples(&train_idx, &stats, net.max_frames, &text)?;
    let schedule = NoiseSchedule::cosine(config.diffusion_steps)?;
    fs::create_dir_all(&a.out).map_err(|e| format!("creating {}: {e}", a.out.display()))?;
    write_json(&a.out.join("corpus.json"), &corpus.manifest())?;
    write_json(&a.out.join("train_config.json"), &serde_json::json!({
        "preset": format!("{:?}", a.preset).to_lowercase(),
        "training": config,
        "model": net,
        "train_clips": train_idx.len(),
        "held_out": held,
    }))?;
    let mut state = TrainState::new(UNet::<f32>::new(net, a.seed)?, &config);
    let started = Instant::now();
    eprintln!(
        "training on {} clips for {} iterations (batch {}, T = {})",
        examples.len(),
        config.iterations,
        config.batch_size,
        config.diffusion_steps
    );
    let saving_step = Cell::new(0usize);
    let out = a.out.clone();
    let result = train_loop(
        &mut state,
        &examples,
        &skel,
        &layout,
        &schedule,
        &config,
        &mut |state, log| {
            saving_step.set(state.step);
            let ckpt = Checkpoint::new(&state.model, Some(&state.ema), &schedule, &stats, &skel, &layout, Some(config.clone()), state.step as u64)?;
            ckpt.save(&out.join(format!("step_{:08}.cmdi", state.step)))?;
            ckpt.save(&out.join("latest.cmdi"))?;
            fs::write(out.join("loss.csv"), log.to_csv()).map_err(|e| condmdi::Error::Invalid(format!("writing loss log: {e}")))
        },
        &mut |step, stats| {
            if step % 100 == 0 {
                eprintln!("step {step:>8}  loss {:.5}  grad {:.3}  {:.0} s", stats.loss, stats.grad_norm, started.elapsed().as_secs_f64());
            }
        },
    );
    let log = result.map_err(|e| format!("at step {}: {e}", saving_step.get().max(state.step)))?;
    if let Some((head, tail)) = log.head_tail_means(0.05) {
        eprintln!("mean loss first 5% {head:.5}, last 5% {tail:.5}");
    }
    eprintln!("done in {:.1} s; checkpoint {}", started.elapsed().as_secs_f64(), a.out.join("latest.cmdi").display());
    Ok(())
}

fn load_snapshot(path: &Path, no_ema: bool) -> CliResult<ModelSnapshot> {
    let ckpt = Checkpoint::load(path)?;
    Ok(ModelSnapshot::from_checkpoint(&ckpt, !no_ema)?)
}

fn sample_cmd(a: SampleArgs) -> CliResult {
    let snapshot = load_snapshot(&a.ckpt, a.sampler.no_ema)?;
    let keyframes = match &a.keyframes {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| format!("reading {}: {e}", p.display()))?;
            serde_json::from_str::<KeyframeFile>(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => KeyframeFile::default(),
    };
    let c = a.sampler.config();
    let request = GenerateRequest {
        prompt: a.prompt.clone(),
        length: a.length,
        keyframes,
        strategy: Some(c.strategy.name().into()),
        w: Some(c.cfg_weight),
        w_r: Some(c.guidance_weight),
        stop_step: Some(c.stop_step),
        guidance_mode: Some(c.guidance_mode),
        seed: Some(c.seed),
    };
    let started = Instant::now();
    let g = generate_clip(&snapshot, &request)?;
    write_mseq(&a.out, &g.motion)?;
    write_meta(
        &a.out,
        &ClipMeta {
            prompt: a.prompt,
            skeleton: snapshot.skeleton.name.clone(),
        },
    )?;
    let summary = serde_json::json!({
        "out": a.out,
        "frames": g.motion.frames(),
        "keyframe_error_m": g.keyframe_error_m,
        "evaluations": g.evaluations,
        "timing_ms": started.elapsed().as_secs_f64() * 1e3,
        "model_digest": snapshot.digest,
        "config": g.config,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let snapshot = load_snapshot(&a.ckpt, a.sampler.no_ema)?;
    let corpus = ingest_corpus(&a.data, &snapshot.skeleton)?;
    let n = a.limit.unwrap_or(corpus.clips.len()).min(corpus.clips.len());
    let indices: Vec<usize> = (0..n).collect();
    let clips = corpus.eval_clips(&indices);
    let scheme = MaskScheme::parse(&a.scheme, &snapshot.skeleton)?;
    let ctx = ModelContext {
        model: &snapshot.model,
        schedule: &snapshot.schedule,
        stats: &snapshot.stats,
        skeleton: &snapshot.skeleton,
        layout: &snapshot.layout,
        text: &snapshot.text,
    };
    let extractor = ToyExtractor::new(snapshot.layout.width(), 32, 0);
    let options = EvalOptions {
        seed: a.sampler.seed,
        diversity_subset: a.diversity_subset,
        r_precision_batch: a.r_precision_batch,
    };
    let mut report = evaluate_scheme(&ctx, &clips, &scheme, &a.sampler.config(), &extractor, &options)?;
    if let serde_json::Value::Object(map) = &mut report.config {
        map.insert("checkpoint".into(), serde_json::json!(a.ckpt));
        map.insert("model_digest".into(), serde_json::json!(snapshot.digest));
        map.insert("data".into(), serde_json::json!(a.data));
        map.insert("scheme_spec".into(), serde_json::json!(a.scheme));
    }
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn convert(a: ConvertArgs) -> CliResult {
    let mode = match a.integration {
        IntegrationArg::Rotated => RootIntegration::Rotated,
        IntegrationArg::NaiveSum => RootIntegration::NaiveSum,
    };
    let is_npy = a.input.extension().is_some_and(|e| e == "npy");
    let (seq, meta) = if is_npy {
        let bytes = fs::read(&a.input).map_err(|e| format!("reading {}: {e}", a.input.display()))?;
        let features = humanml3d_to_relative(&parse_npy(&bytes).map_err(|e| format!("{}: {e}", a.input.display()))?);
        let seq = MotionSequence::from_frames(features.mapv(|v| v as f32), HUMANML3D_FPS, RootConvention::RelativeRoot)?;
        let meta = ClipMeta {
            prompt: None,
            skeleton: SkeletonSpec::humanml3d().name,
        };
        (seq, meta)
    } else {
        (read_mseq(&a.input)?, read_meta(&a.input)?)
    };
    let out = match (a.to, seq.convention()) {
        (ConventionArg::Global, RootConvention::RelativeRoot) => relative_to_global(&seq, mode)?,
        (ConventionArg::Relative, RootConvention::GlobalRoot) => global_to_relative(&seq, mode)?,
        _ => seq,
    };
    write_mseq(&a.output, &out)?;
    if is_npy || sidecar_path(&a.input).exists() {
        write_meta(&a.output, &meta)?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> CliResult {
    let snapshot = Arc::new(load_snapshot(&a.ckpt, a.no_ema)?);
    let defaults = ServiceConfig::default();
    let config = ServiceConfig {
        workers: a.workers.unwrap_or(defaults.workers),
        queue: a.queue,
    };
    let state = AppState::new(snapshot, config);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(service::serve(state, &a.bind))?;
    Ok(())
}

fn schedule_dump(a: ScheduleArgs) -> CliResult {
    let kind = match a.kind.as_str() {
        "cosine" => ScheduleKind::Cosine,
        other => return Err(format!("unknown schedule kind `{other}`").into()),
    };
    let csv = NoiseSchedule::from_kind(kind, a.steps)?.to_csv();
    match &a.out {
        Some(p) => fs::write(p, csv).map_err(|e| format!("writing {}: {e}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn synth(a: SynthArgs) -> CliResult {
    let skel = SkeletonSpec::humanml3d();
    let layout = FeatureLayout::canonical(&skel);
    let base = SynthConfig::default();
    let kinds = if a.kinds.is_empty() {
        base.kinds.clone()
    } else {
        a.kinds.iter().map(|k| SynthKind::parse(k)).collect::<condmdi::Result<Vec<_>>>()?
    };
    let config = SynthConfig {
        clips: a.clips,
        seed: a.seed,
        min_frames: a.min_frames.unwrap_or(base.min_frames),
        max_frames: a.max_frames.unwrap_or(base.max_frames),
        kinds,
        ..base
    };
    let clips = synth_corpus(&config, &skel, &layout)?;
    write_corpus(&a.out, &clips, &skel)?;
    eprintln!("wrote {} clips to {}", clips.len(), a.out.display());
    Ok(())
}
