//! Subcommand definitions and implementations.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use flood_core::corpus_io::{generate_tree_corpus, load_config, load_corpus, save_corpus, CorpusSpec};
use flood_core::denoiser::{load_checkpoint_with, save_checkpoint_with};
use flood_core::metrics::{render_table, reports_to_jsonl, run_ablation, AblationGrid, EvalSettings};
use flood_core::sampler::{emissions_to_mat, stream_generate_sde, track_provider};
use flood_core::schedule::ScheduleConfig;
use flood_core::trainer::TrainConfig;
use flood_core::verify::{self, AblationOptions, LearningOptions};
use flood_core::{
    ConditionedCorpus, ControlId, DenoiserParams, MaskKind, PredictionKind, SampleConfig, ScheduleKind, SigmaProfile,
    StreamState, VectorizedSchedule,
};
use serde_json::json;

use crate::service::{self, ServiceContext, SessionSettings};

/// Bad invocation or missing input; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn input_file(path: &Path) -> Result<&Path> {
    if !path.is_file() {
        return Err(usage(format!("file not found: {}", path.display())));
    }
    Ok(path)
}

#[derive(Debug, Parser)]
#[command(name = "flood", version, about = "Streaming diffusion forcing for conditional time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus file.
    GenCorpus(GenCorpusArgs),
    /// Train a denoiser on a corpus.
    Train(TrainArgs),
    /// Draw bounded-length samples from a checkpoint.
    Sample(SampleArgs),
    /// Console streaming demo with scripted control switches.
    Stream(StreamArgs),
    /// Run the acceptance suite.
    Verify(VerifyArgs),
    /// Train and evaluate an ablation grid.
    Ablate(AblateArgs),
    /// Serve live streaming sessions over TCP and WebSocket.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Standard,
    Tree,
    Sensitivity,
}

impl Preset {
    fn spec(self) -> CorpusSpec {
        match self {
            Preset::Standard => CorpusSpec::standard_four_atom(),
            Preset::Tree => CorpusSpec::branching_tree(),
            Preset::Sensitivity => CorpusSpec::sensitivity_engineered(),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long, value_enum, default_value = "standard")]
    pub preset: Preset,
    /// Corpus spec (TOML); replaces the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Training config (TOML); flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub ns: Option<f64>,
    #[arg(long = "K")]
    pub frames: Option<usize>,
    #[arg(long)]
    pub mask: Option<MaskKind>,
    #[arg(long)]
    pub schedule: Option<ScheduleKind>,
    #[arg(long)]
    pub pred: Option<PredictionKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Per-step log as JSON lines.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub steps_per_unit: usize,
    #[arg(long, default_value_t = 1.0)]
    pub cfg: f64,
    /// Defaults to the schedule slope stored in the checkpoint.
    #[arg(long)]
    pub ns: Option<f64>,
    /// Sequence length; defaults to the training length.
    #[arg(long = "K")]
    pub frames: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Constant diffusion coefficient; 0 gives the deterministic sampler.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    /// Per-frame controls, comma separated; a single id applies to every frame.
    #[arg(long, default_value = "0")]
    pub controls: String,
    /// Samples as JSON lines.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub ns: Option<f64>,
    #[arg(long, default_value_t = 16)]
    pub steps_per_unit: usize,
    #[arg(long, default_value_t = 1.0)]
    pub cfg: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 40)]
    pub frames: usize,
    /// Scripted switches `frame:control,…`; frames before the first use control 0.
    #[arg(long, default_value = "0:0")]
    pub switches: String,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Also run the two training criteria (several minutes).
    #[arg(long)]
    pub full: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20_000)]
    pub train_steps: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, conflicts_with = "preset")]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "sensitivity")]
    pub preset: Preset,
    /// Base training config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub ns: Option<f64>,
    #[arg(long, value_delimiter = ',', default_value = "bi,causal")]
    pub masks: Vec<MaskKind>,
    #[arg(long, value_delimiter = ',', default_value = "tri,random")]
    pub schedules: Vec<ScheduleKind>,
    #[arg(long, value_delimiter = ',', default_value = "v")]
    pub preds: Vec<PredictionKind>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub cfgs: Vec<f64>,
    #[arg(long)]
    pub samples_per_track: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub ns: Option<f64>,
    /// Newline-delimited JSON sessions.
    #[arg(long, env = "FLOOD_BIND", default_value = "127.0.0.1:7878")]
    pub bind: SocketAddr,
    /// WebSocket sessions at `/ws`.
    #[arg(long, env = "FLOOD_WS_BIND")]
    pub ws_bind: Option<SocketAddr>,
    #[arg(long, default_value_t = 16)]
    pub steps_per_unit: usize,
    #[arg(long, default_value_t = 1.0)]
    pub cfg: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub default_control: ControlId,
    #[arg(long, default_value_t = 0)]
    pub step_delay_ms: u64,
    #[arg(long, default_value_t = 8)]
    pub window_state_every: usize,
    /// Rebind already-activated frames to a new control. Not implemented.
    #[arg(long)]
    pub rebind_active_frames: bool,
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Stream(a) => stream(a),
        Command::Verify(a) => verify_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::Serve(a) => serve(a),
    }
}

fn gen_corpus(a: GenCorpusArgs) -> Result<i32> {
    let mut spec = match &a.config {
        Some(p) => load_config::<CorpusSpec>(input_file(p)?)?,
        None => a.preset.spec(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let corpus = generate_tree_corpus(&spec)?;
    save_corpus(&corpus, &a.out)?;
    println!(
        "wrote {}: {} atoms, {} tracks, K={} D={} controls={}",
        a.out.display(),
        corpus.atoms().len(),
        corpus.tracks().len(),
        corpus.frames(),
        corpus.dim(),
        corpus.num_controls()
    );
    Ok(0)
}

fn train_config(a: &TrainArgs, corpus: &ConditionedCorpus) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => load_config::<TrainConfig>(input_file(p)?)?,
        None => TrainConfig::toy(2.0, corpus.frames()),
    };
    if let Some(v) = a.steps {
        cfg.total_steps = v;
    }
    if let Some(v) = a.ns {
        cfg.schedule.n_s = v;
    }
    if let Some(v) = a.schedule {
        cfg.schedule.kind = v;
    }
    if let Some(v) = a.mask {
        cfg.model.mask = v;
    }
    if let Some(v) = a.pred {
        cfg.prediction_kind = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
        cfg.schedule.offset_seed = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.eval_every {
        cfg.eval_every = v;
    }
    cfg.schedule.frames = a.frames.unwrap_or(cfg.schedule.frames);
    if cfg.schedule.frames != corpus.frames() {
        return Err(usage(format!(
            "K = {} but the corpus has {} frames per sequence",
            cfg.schedule.frames,
            corpus.frames()
        )));
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<i32> {
    let corpus = load_corpus(input_file(&a.corpus)?)?;
    let cfg = train_config(&a, &corpus)?;
    let mut log = match &a.log {
        Some(p) => Some(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };
    let mut log_err = None;
    let every = (cfg.total_steps / 20).max(1);
    let (params, records) = flood_core::trainer::train_loop_with(&cfg, &corpus, |r| {
        if let Some(w) = log.as_mut() {
            if let Err(e) = writeln!(w, "{}", serde_json::to_string(r).expect("log record serializes")) {
                log_err.get_or_insert(e);
            }
        }
        if r.step % every == 0 || r.velocity_mse_vs_oracle.is_some() {
            let mse = r
                .velocity_mse_vs_oracle
                .map(|m| format!(" oracle_mse {m:.5}"))
                .unwrap_or_default();
            eprintln!("step {:>6} loss {:.5}{mse} [{:.1}s]", r.step, r.loss, r.wall_time);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e).context("writing training log");
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    let final_loss = records.last().map(|r| r.loss);
    let meta = json!({ "train": cfg, "final_loss": final_loss });
    save_checkpoint_with(&params, &meta, &a.checkpoint)?;
    println!(
        "wrote {} ({} parameters, final loss {})",
        a.checkpoint.display(),
        params.param_count(),
        final_loss.map(|l| format!("{l:.5}")).unwrap_or_else(|| "n/a".into())
    );
    Ok(0)
}

/// Loads a checkpoint and the training schedule recorded alongside it.
fn load_model(path: &Path) -> Result<(DenoiserParams, Option<ScheduleConfig>)> {
    let (params, meta) = load_checkpoint_with(input_file(path)?)?;
    let sched = meta
        .get("train")
        .and_then(|t| t.get("schedule"))
        .and_then(|s| serde_json::from_value::<ScheduleConfig>(s.clone()).ok());
    Ok((params, sched))
}

fn resolve_ns(flag: Option<f64>, stored: Option<&ScheduleConfig>) -> Result<f64> {
    flag.or(stored.map(|s| s.n_s))
        .ok_or_else(|| usage("checkpoint has no stored schedule; pass --ns"))
}

fn sigma_profile(sigma: f64) -> SigmaProfile {
    if sigma > 0.0 {
        SigmaProfile::Constant { sigma0: sigma }
    } else {
        SigmaProfile::Off
    }
}

fn parse_controls(text: &str, frames: usize) -> Result<Vec<ControlId>> {
    let ids = text
        .split(',')
        .map(|s| s.trim().parse::<ControlId>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage(format!("bad --controls {text:?}: {e}")))?;
    match ids.len() {
        1 => Ok(vec![ids[0]; frames]),
        n if n == frames => Ok(ids),
        n => Err(usage(format!("--controls lists {n} ids for {frames} frames"))),
    }
}

fn sample(a: SampleArgs) -> Result<i32> {
    let (params, stored) = load_model(&a.checkpoint)?;
    let n_s = resolve_ns(a.ns, stored.as_ref())?;
    let frames = a
        .frames
        .or(stored.as_ref().map(|s| s.frames))
        .ok_or_else(|| usage("checkpoint has no stored length; pass --K"))?;
    let sched = VectorizedSchedule::triangular(n_s, frames).map_err(|e| usage(e.to_string()))?;
    let cfg = SampleConfig {
        steps_per_unit: a.steps_per_unit,
        cfg_scale: a.cfg,
        sigma: sigma_profile(a.sigma),
        seed: a.seed,
        unbounded: false,
        max_context: None,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let controls = parse_controls(&a.controls, frames)?;
    let null = params.config().null_control();
    if let Some(c) = controls.iter().find(|&&c| c >= null) {
        return Err(usage(format!("control {c} is outside 0..{null}")));
    }
    println!(
        "{}",
        json!({
            "steps_per_unit": cfg.steps_per_unit,
            "cfg_scale": cfg.cfg_scale,
            "sigma0": cfg.sigma.sigma0(),
            "n_s": n_s,
            "K": frames,
            "T": sched.horizon(),
            "total_solver_steps": cfg.total_steps(&sched),
            "seed": cfg.seed,
            "count": a.count,
        })
    );
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    };
    for i in 0..a.count {
        let mut c = cfg.clone();
        c.seed = cfg.seed.wrapping_add(i as u64);
        let recs = stream_generate_sde(&params, track_provider(&controls), &sched, params.config().dim, &c)?;
        let m = emissions_to_mat(&recs);
        let rows: Vec<&[f64]> = (0..m.rows()).map(|r| m.row(r)).collect();
        writeln!(out, "{}", json!({ "index": i, "seed": c.seed, "controls": controls, "frames": rows }))?;
    }
    out.flush()?;
    Ok(0)
}

fn parse_switches(text: &str) -> Result<Vec<(usize, ControlId)>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (f, c) = item
                .split_once(':')
                .ok_or_else(|| usage(format!("bad switch {item:?}; expected frame:control")))?;
            let f = f.trim().parse().map_err(|e| usage(format!("bad frame in {item:?}: {e}")))?;
            let c = c.trim().parse().map_err(|e| usage(format!("bad control in {item:?}: {e}")))?;
            Ok((f, c))
        })
        .collect()
}

fn stream(a: StreamArgs) -> Result<i32> {
    let (params, stored) = load_model(&a.checkpoint)?;
    let n_s = resolve_ns(a.ns, stored.as_ref())?;
    let mut switches = parse_switches(&a.switches)?;
    switches.sort_by_key(|s| s.0);
    let null = params.config().null_control();
    if let Some(&(_, c)) = switches.iter().find(|s| s.1 >= null) {
        return Err(usage(format!("control {c} is outside 0..{null}")));
    }
    let sched = VectorizedSchedule::triangular(n_s, 1).map_err(|e| usage(e.to_string()))?;
    let cfg = SampleConfig {
        steps_per_unit: a.steps_per_unit,
        cfg_scale: a.cfg,
        sigma: sigma_profile(a.sigma),
        seed: a.seed,
        unbounded: true,
        max_context: None,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let mut state = StreamState::new(params.config().dim, &sched, &cfg)?;
    let mut provider = |k: usize| -> Result<ControlId, String> {
        Ok(switches.iter().rev().find(|s| s.0 <= k).map_or(0, |s| s.1))
    };
    let mut out = std::io::stdout().lock();
    while state.emitted_count() < a.frames {
        for rec in state.step(&params, &mut provider)? {
            if rec.frame_index >= a.frames {
                break;
            }
            let values: Vec<String> = rec.values.iter().map(|v| format!("{v:+.4}")).collect();
            let w = state.window_state();
            writeln!(
                out,
                "frame {:>4} step {:>6} control {} window [{}, {}) values [{}]",
                rec.frame_index,
                rec.step_index,
                state.controls()[rec.frame_index],
                w.m,
                w.n,
                values.join(", ")
            )?;
        }
    }
    Ok(0)
}

fn verify_cmd(a: VerifyArgs) -> Result<i32> {
    let reports = if a.full {
        let learning = LearningOptions {
            train_steps: a.train_steps,
            seed: a.seed,
            ..LearningOptions::default()
        };
        let ablation = AblationOptions {
            train_steps: a.train_steps,
            seed: a.seed,
            ..AblationOptions::default()
        };
        verify::run_all(a.seed, &learning, &ablation)
    } else {
        verify::run_fast(a.seed)
    };
    for r in &reports {
        println!("{r}");
    }
    let passed = reports.iter().filter(|r| r.passed).count();
    println!("suite: {passed}/{} passed", reports.len());
    Ok(if passed == reports.len() { 0 } else { 1 })
}

fn ablate(a: AblateArgs) -> Result<i32> {
    let corpus = match &a.corpus {
        Some(p) => load_corpus(input_file(p)?)?,
        None => generate_tree_corpus(&a.preset.spec())?,
    };
    let mut base = match &a.config {
        Some(p) => load_config::<TrainConfig>(input_file(p)?)?,
        None => TrainConfig::toy(AblationOptions::default().n_s, corpus.frames()),
    };
    base.schedule.frames = corpus.frames();
    base.seed = a.seed;
    base.eval_every = 0;
    if let Some(v) = a.steps {
        base.total_steps = v;
    }
    if let Some(v) = a.ns {
        base.schedule.n_s = v;
    }
    base.validate().map_err(|e| usage(e.to_string()))?;
    let grid = AblationGrid {
        masks: a.masks,
        schedules: a.schedules,
        cfg_scales: a.cfgs,
        predictions: a.preds,
    };
    let mut eval = EvalSettings {
        seed: a.seed ^ 7,
        ..EvalSettings::default()
    };
    if let Some(v) = a.samples_per_track {
        eval.samples_per_track = v;
    }
    eprintln!("training {} cells for {} steps each", grid.cells(), base.total_steps);
    let reports = run_ablation(&grid, &base, &corpus, &eval)?;
    if let Some(p) = &a.out {
        std::fs::write(p, reports_to_jsonl(&reports)).with_context(|| format!("writing {}", p.display()))?;
    }
    print!("{}", render_table(&reports));
    Ok(if reports.iter().any(|r| r.error.is_some()) { 1 } else { 0 })
}

fn serve(a: ServeArgs) -> Result<i32> {
    if a.rebind_active_frames {
        bail!("--rebind-active-frames is not implemented; controls bind to frames at activation");
    }
    let (params, stored) = load_model(&a.checkpoint)?;
    let n_s = resolve_ns(a.ns, stored.as_ref())?;
    let defaults = SessionSettings {
        seed: a.seed,
        cfg_scale: a.cfg,
        steps_per_unit: a.steps_per_unit,
        default_control: a.default_control,
        step_delay_ms: a.step_delay_ms,
        window_state_every: a.window_state_every,
        ..SessionSettings::default()
    };
    let ctx = ServiceContext {
        model: Arc::new(params),
        n_s,
        defaults,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(ctx, a.bind, a.ws_bind))?;
    Ok(0)
}
