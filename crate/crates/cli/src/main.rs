use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dvae_denoise::checkpoint::{Checkpoint, CheckpointRole};
use dvae_denoise::corpus::{make_toy_corpus, mix_at_snr, write_atomic, Manifest, ManifestEntry, NoiseKind, Split, ToyCorpusConfig};
use dvae_denoise::enhancement::{run_mode, EnhancementMode, EnhancementParams, ModeKind, ModelSource};
use dvae_denoise::evaluation::{evaluate_one, rtf, test_pairs, utterance_rng, EvalReport, EvalSetup, ExternalMetric};
use dvae_denoise::noise_model::NoiseVariant;
use dvae_denoise::signal::{vad_trim, StftConfig, Waveform};
use dvae_denoise::train::{continue_nd, continue_pretrain, init_nd, init_pretrain, Segments, TrainConfig, TrainState};

/// Usage problems detected after argument parsing; reported with exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Device {
    Auto,
    Cpu,
    Accel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    Na,
    Nd,
    Nda,
}

impl From<ModeArg> for ModeKind {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Na => ModeKind::Na,
            ModeArg::Nd => ModeKind::Nd,
            ModeArg::Nda => ModeKind::Nda,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum VariantArg {
    Lv,
    No,
    Nolv,
}

impl From<VariantArg> for NoiseVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Lv => NoiseVariant::Lv,
            VariantArg::No => NoiseVariant::No,
            VariantArg::Nolv => NoiseVariant::Nolv,
        }
    }
}

/// Unsupervised speech enhancement with a recurrent VAE speech model and a
/// learned noise model.
///
/// Every flag can also be set through an environment variable named
/// DVAE_DENOISE_<FLAG>, e.g. DVAE_DENOISE_SEED or DVAE_DENOISE_OUT_DIR.
/// Precedence: flag > environment > config file > built-in default.
#[derive(Debug, Parser)]
#[command(name = "dvae-denoise", version, about)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Serialize)]
struct Global {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, env = "DVAE_DENOISE_SEED")]
    seed: Option<u64>,
    /// TOML file with [train], [enhance] and [stft] tables.
    #[arg(long, global = true, env = "DVAE_DENOISE_CONFIG")]
    config: Option<PathBuf>,
    /// Directory for all outputs.
    #[arg(long, global = true, env = "DVAE_DENOISE_OUT_DIR")]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum, env = "DVAE_DENOISE_DEVICE")]
    device: Option<Device>,
    /// Worker threads for per-utterance work.
    #[arg(long, global = true, env = "DVAE_DENOISE_JOBS")]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Pre-train the speech model on clean audio.
    Pretrain(PretrainArgs),
    /// Train encoder and noise model on noisy audio only.
    TrainNd(TrainNdArgs),
    /// Enhance a WAV file or every entry of a manifest.
    Enhance(EnhanceArgs),
    /// Enhance the test split of a noisy manifest and score it.
    Evaluate(EvaluateArgs),
    /// Compare the real-time factor of NA and ND on the same inputs.
    BenchRtf(BenchArgs),
    /// Mix clean and noise manifests at a grid of SNRs.
    Mix(MixArgs),
    /// Generate the synthetic toy corpus.
    MakeToy(MakeToyArgs),
}

#[derive(Debug, Args, Serialize, Default)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    mc_samples: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct PretrainArgs {
    #[arg(long)]
    clean_manifest: PathBuf,
    /// Continue from a checkpoint written with `.last.ckpt` suffix.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOverrides,
}

/// Only noisy audio is expected here; the tool cannot tell clean audio apart.
#[derive(Debug, Args, Serialize)]
struct TrainNdArgs {
    #[arg(long)]
    noisy_manifest: PathBuf,
    #[arg(long)]
    rvae_ckpt: PathBuf,
    #[arg(long, value_enum)]
    variant: VariantArg,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Debug, Args, Serialize)]
struct EnhanceOverrides {
    /// Optimization iterations (NA or NDA).
    #[arg(long)]
    iters: Option<usize>,
    /// Learning rate of the per-utterance loop.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    mc_samples: Option<usize>,
    /// Filter with the posterior mean of the latents instead of a sample.
    #[arg(long)]
    latent_mean: bool,
}

#[derive(Debug, Args, Serialize)]
struct EnhanceArgs {
    /// A WAV file or a manifest (.jsonl).
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Pre-trained checkpoint for NA, ND checkpoint for ND and NDA.
    #[arg(long)]
    ckpt: PathBuf,
    /// Noise model for NA; must match the checkpoint for ND and NDA.
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[command(flatten)]
    opts: EnhanceOverrides,
}

#[derive(Debug, Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    noisy_manifest: PathBuf,
    /// References, matched to noisy entries by id.
    #[arg(long)]
    clean_manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// External metric as NAME=PROGRAM; called with reference and estimate paths.
    #[arg(long = "metric")]
    metrics: Vec<String>,
    #[command(flatten)]
    opts: EnhanceOverrides,
}

#[derive(Debug, Args, Serialize)]
struct BenchArgs {
    /// A WAV file or a manifest (.jsonl); at most `--max-utts` entries are used.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    rvae_ckpt: PathBuf,
    /// ND checkpoint; without it an untrained noise model of the same size is timed.
    #[arg(long)]
    nd_ckpt: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "lv")]
    variant: VariantArg,
    /// NA iterations.
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 10)]
    max_utts: usize,
}

#[derive(Debug, Args, Serialize)]
struct MixArgs {
    #[arg(long)]
    clean_manifest: PathBuf,
    #[arg(long)]
    noise_manifest: PathBuf,
    /// Comma-separated SNRs in dB, assigned to clean utterances cyclically.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-5,0,5")]
    snrs: Vec<f64>,
}

#[derive(Debug, Args, Serialize)]
struct MakeToyArgs {
    /// Total number of utterances.
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 3.0)]
    duration: f64,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0")]
    snrs: Vec<f64>,
    #[arg(long, default_value = "colored")]
    noise_kind: String,
    /// Share of utterances in the train split.
    #[arg(long, default_value_t = 0.6)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.2)]
    valid_frac: f64,
}

/// Contents of `--config`.
#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    device: Option<Device>,
    jobs: Option<usize>,
    train: TrainConfig,
    enhance: EnhancementMode,
    stft: Option<StftConfig>,
}

/// Settings after layering flags over the config file.
#[derive(Debug, Serialize)]
struct Effective {
    seed: u64,
    out_dir: PathBuf,
    device: Device,
    jobs: usize,
    train: TrainConfig,
    enhance: EnhancementMode,
    stft: StftConfig,
}

#[derive(Serialize)]
struct Snapshot<'a> {
    command: &'a Command,
    effective: &'a Effective,
}

fn resolve(global: &Global) -> Result<Effective> {
    let file = match &global.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("cannot read config file {}: {e}", p.display())))?;
            toml::from_str::<FileConfig>(&text).map_err(|e| usage(format!("invalid config file {}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    let seed = global.seed.or(file.seed).unwrap_or(file.train.seed);
    let mut train = file.train;
    train.seed = seed;
    let device = global.device.or(file.device).unwrap_or(Device::Auto);
    if device == Device::Accel {
        warn!("no accelerator backend is built in; running on the CPU");
    }
    let jobs = global.jobs.or(file.jobs).unwrap_or(1);
    if jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let stft = file.stft.unwrap_or_default();
    stft.validate().map_err(|e| usage(e.to_string()))?;
    Ok(Effective {
        seed,
        out_dir: global.out_dir.clone().or(file.out_dir).unwrap_or_else(|| PathBuf::from("out")),
        device,
        jobs,
        train,
        enhance: file.enhance,
        stft,
    })
}

fn apply_train(cfg: &mut TrainConfig, o: &TrainOverrides) -> Result<()> {
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = o.$f { cfg.$f = v; } )* };
    }
    set!(epochs, lr_start, lr_end, warmup_epochs, hidden_dim, latent_dim, seq_len, batch_size, mc_samples);
    cfg.validate().map_err(|e| usage(e.to_string()))
}

fn apply_enhance(mode: &mut EnhancementMode, kind: ModeKind, o: &EnhanceOverrides) -> Result<()> {
    mode.kind = kind;
    if let Some(n) = o.iters {
        match kind {
            ModeKind::Na => mode.na_iters = n,
            ModeKind::Nda => mode.nda_iters = n,
            ModeKind::Nd if n > 0 => return Err(usage("--iters has no meaning in nd mode (a single forward pass)")),
            ModeKind::Nd => {}
        }
    }
    if let Some(lr) = o.lr {
        if !(lr > 0.0) {
            return Err(usage("--lr must be positive"));
        }
        mode.na_lr = lr;
        mode.nda_lr = lr;
    }
    if let Some(m) = o.mc_samples {
        mode.mc_samples = m.max(1);
    }
    mode.latent_mean |= o.latent_mean;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_snapshot(cmd: &Command, eff: &Effective, name: &str) -> Result<()> {
    create_dir(&eff.out_dir)?;
    let text = toml::to_string(&Snapshot { command: cmd, effective: eff }).context("serializing effective config")?;
    write_atomic(&eff.out_dir.join(format!("{name}.effective.toml")), text.as_bytes())?;
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} not found: {}", path.display())));
    }
    Ok(())
}

fn load_manifest(path: &Path, what: &str) -> Result<Manifest> {
    require_file(path, what)?;
    Manifest::load(path).with_context(|| format!("loading {what} {}", path.display()))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    require_file(path, "checkpoint")?;
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn read_split(m: &Manifest, split: Split) -> Result<Vec<Waveform>> {
    Ok(m.read_split(split)?.into_iter().map(|(_, w)| w).collect())
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build().context("building worker pool")
}

fn cmd_pretrain(args: &PretrainArgs, eff: &mut Effective) -> Result<()> {
    apply_train(&mut eff.train, &args.train)?;
    let manifest = load_manifest(&args.clean_manifest, "clean manifest")?;
    let train = read_split(&manifest, Split::Train)?;
    if train.is_empty() {
        bail!("clean manifest {} has no train entries", args.clean_manifest.display());
    }
    let valid = read_split(&manifest, Split::Valid)?;
    let segs = Segments::from_waveforms(&train, &valid, &eff.train, &eff.stft)?;
    info!("{} training and {} validation segments", segs.train.len(), segs.valid.len());
    let state = match &args.resume {
        Some(p) => {
            let c = load_ckpt(p)?;
            c.pretrain_state().map_err(|e| usage(format!("cannot resume from {}: {e}", p.display())))?
        }
        None => TrainState::new(init_pretrain(&segs, &eff.train)),
    };
    let state = continue_pretrain(state, &segs, &eff.train, eff.train.epochs)?;
    let dir = &eff.out_dir;
    Checkpoint::from_pretrain(&state, &eff.train, &eff.stft, false).save(dir.join("rvae.ckpt"))?;
    Checkpoint::from_pretrain(&state, &eff.train, &eff.stft, true).save(dir.join("rvae.last.ckpt"))?;
    write_atomic(&dir.join("pretrain_log.jsonl"), state.log.to_jsonl().as_bytes())?;
    println!(
        "pretrained {} epochs; best validation loss {:.4} at epoch {}; wrote {}",
        state.epoch,
        state.best_valid_loss,
        state.best_epoch,
        dir.join("rvae.ckpt").display()
    );
    Ok(())
}

fn cmd_train_nd(args: &TrainNdArgs, eff: &mut Effective) -> Result<()> {
    apply_train(&mut eff.train, &args.train)?;
    let variant = NoiseVariant::from(args.variant);
    let manifest = load_manifest(&args.noisy_manifest, "noisy manifest")?;
    let rvae_ckpt = load_ckpt(&args.rvae_ckpt)?;
    rvae_ckpt
        .expect_role(CheckpointRole::RvaePretrained)
        .map_err(|e| usage(format!("--rvae-ckpt: {e}")))?;
    let train = read_split(&manifest, Split::Train)?;
    if train.is_empty() {
        bail!("noisy manifest {} has no train entries", args.noisy_manifest.display());
    }
    let valid = read_split(&manifest, Split::Valid)?;
    let stft = rvae_ckpt.stft;
    let segs = Segments::from_waveforms(&train, &valid, &eff.train, &stft)?;
    let state = match &args.resume {
        Some(p) => {
            let c = load_ckpt(p)?;
            let s = c.nd_state().map_err(|e| usage(format!("cannot resume from {}: {e}", p.display())))?;
            if s.params.variant() != variant {
                return Err(usage(format!("resume checkpoint is {}, --variant is {variant}", s.params.variant())));
            }
            s
        }
        None => TrainState::new(init_nd(&rvae_ckpt.rvae, variant, &eff.train)),
    };
    let state = continue_nd(state, &segs, &eff.train, eff.train.epochs)?;
    let name = format!("nd_{}", variant.name().to_ascii_lowercase());
    let dir = &eff.out_dir;
    Checkpoint::from_nd(&state, &eff.train, &stft, false).save(dir.join(format!("{name}.ckpt")))?;
    Checkpoint::from_nd(&state, &eff.train, &stft, true).save(dir.join(format!("{name}.last.ckpt")))?;
    write_atomic(&dir.join(format!("{name}_log.jsonl")), state.log.to_jsonl().as_bytes())?;
    println!(
        "trained {variant} noise model for {} epochs; best validation loss {:.4}; wrote {}",
        state.epoch,
        state.best_valid_loss,
        dir.join(format!("{name}.ckpt")).display()
    );
    Ok(())
}

/// Parameters for a mode, checked against the checkpoint role.
enum Loaded {
    Pretrained(Box<Checkpoint>),
    Nd(Box<EnhancementParams>, Box<Checkpoint>),
}

impl Loaded {
    fn source(&self) -> ModelSource<'_> {
        match self {
            Loaded::Pretrained(c) => ModelSource::Pretrained(&c.rvae),
            Loaded::Nd(p, _) => ModelSource::NoiseDependent(p),
        }
    }

    fn stft(&self) -> StftConfig {
        match self {
            Loaded::Pretrained(c) | Loaded::Nd(_, c) => c.stft,
        }
    }
}

fn load_for_mode(ckpt: &Path, kind: ModeKind, variant: Option<VariantArg>) -> Result<(Loaded, NoiseVariant)> {
    let c = load_ckpt(ckpt)?;
    match (kind, c.role) {
        (ModeKind::Na, CheckpointRole::RvaePretrained) => {
            let v = variant.ok_or_else(|| usage("na mode needs --variant (lv, no or nolv)"))?;
            Ok((Loaded::Pretrained(Box::new(c)), v.into()))
        }
        (ModeKind::Nd | ModeKind::Nda, CheckpointRole::NdTrained) => {
            let params = c.enhancement_params()?;
            let v = params.variant();
            if let Some(req) = variant {
                if NoiseVariant::from(req) != v {
                    return Err(usage(format!("checkpoint holds the {v} noise model, --variant asks for {}", NoiseVariant::from(req))));
                }
            }
            Ok((Loaded::Nd(Box::new(params), Box::new(c)), v))
        }
        (ModeKind::Na, role) => Err(usage(format!(
            "na mode needs a pre-trained speech checkpoint (rvae_pretrained), {} is {role}",
            ckpt.display()
        ))),
        (kind, role) => Err(usage(format!(
            "{} mode needs a noise-dependent checkpoint from train-nd (nd_trained), {} is {role}",
            kind.name().to_ascii_lowercase(),
            ckpt.display()
        ))),
    }
}

fn is_manifest(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("jsonl" | "json" | "manifest"))
}

/// Inputs to enhance: every manifest entry, or the single WAV file.
fn inputs(path: &Path) -> Result<Vec<ManifestEntry>> {
    require_file(path, "input")?;
    if is_manifest(path) {
        Ok(Manifest::load(path)?.entries)
    } else {
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("input").to_string();
        Ok(vec![ManifestEntry::new(id, path, Split::Test)])
    }
}

fn cmd_enhance(args: &EnhanceArgs, eff: &mut Effective) -> Result<()> {
    let kind = ModeKind::from(args.mode);
    apply_enhance(&mut eff.enhance, kind, &args.opts)?;
    let (loaded, variant) = load_for_mode(&args.ckpt, kind, args.variant)?;
    let entries = inputs(&args.input)?;
    let stft = loaded.stft();
    let wav_dir = eff.out_dir.join("enhanced");
    let trace_dir = eff.out_dir.join("traces");
    create_dir(&wav_dir)?;
    if kind != ModeKind::Nd {
        create_dir(&trace_dir)?;
    }
    let mode = eff.enhance;
    let seed = eff.seed;
    let source = loaded.source();
    let results: Vec<Result<usize>> = thread_pool(eff.jobs)?.install(|| {
        entries
            .par_iter()
            .enumerate()
            .map(|(i, e)| {
                let x = Waveform::read_wav(&e.path)?;
                let mut rng = utterance_rng(seed, i);
                let out = run_mode(&x, source, variant, &mode, &stft, &mut rng).with_context(|| format!("enhancing {}", e.id))?;
                out.waveform.write_wav(wav_dir.join(format!("{}.wav", e.id)))?;
                if kind != ModeKind::Nd {
                    let lines: String = out.trace.iter().enumerate().map(|(k, l)| format!("{{\"iter\":{k},\"loss\":{l}}}\n")).collect();
                    write_atomic(&trace_dir.join(format!("{}.jsonl", e.id)), lines.as_bytes())?;
                }
                Ok(out.iterations)
            })
            .collect()
    });
    let mut failed = 0;
    for (e, r) in entries.iter().zip(&results) {
        match r {
            Ok(iters) => info!("{}: {iters} iterations", e.id),
            Err(err) => {
                failed += 1;
                eprintln!("error: {}: {err:#}", e.id);
            }
        }
    }
    println!("enhanced {} of {} inputs into {}", entries.len() - failed, entries.len(), wav_dir.display());
    if failed > 0 {
        bail!("{failed} input(s) failed");
    }
    Ok(())
}

fn parse_metric(s: &str) -> Result<ExternalMetric> {
    let (name, cmd) = s.split_once('=').ok_or_else(|| usage(format!("--metric expects NAME=PROGRAM, got `{s}`")))?;
    let mut parts = cmd.split_whitespace();
    let program = parts.next().ok_or_else(|| usage(format!("--metric `{s}` has no program")))?;
    Ok(ExternalMetric { name: name.to_string(), program: program.into(), args: parts.map(String::from).collect() })
}

fn cmd_evaluate(args: &EvaluateArgs, eff: &mut Effective) -> Result<()> {
    let kind = ModeKind::from(args.mode);
    apply_enhance(&mut eff.enhance, kind, &args.opts)?;
    let metrics = args.metrics.iter().map(|m| parse_metric(m)).collect::<Result<Vec<_>>>()?;
    let noisy = load_manifest(&args.noisy_manifest, "noisy manifest")?;
    let clean = args.clean_manifest.as_deref().map(|p| load_manifest(p, "clean manifest")).transpose()?;
    let (loaded, variant) = load_for_mode(&args.ckpt, kind, args.variant)?;
    let pairs = test_pairs(&noisy, clean.as_ref()).map_err(|e| usage(format!("{}: {e}", args.noisy_manifest.display())))?;
    let missing = pairs.iter().filter(|(_, r)| r.is_none()).count();
    if missing > 0 {
        warn!("{missing} test utterance(s) have no reference; SI-SDR marked unavailable");
    }
    let stft = loaded.stft();
    let wav_dir = eff.out_dir.join("enhanced");
    create_dir(&wav_dir)?;
    let setup = EvalSetup {
        models: loaded.source(),
        variant,
        mode: &eff.enhance,
        stft: &stft,
        seed: eff.seed,
        external: &metrics,
        out_dir: Some(&wav_dir),
    };
    let rows = thread_pool(eff.jobs)?.install(|| pairs.par_iter().enumerate().map(|(i, (e, r))| evaluate_one(i, e, *r, &setup)).collect());
    let report = EvalReport::from_rows(rows);
    write_atomic(&eff.out_dir.join("report.jsonl"), report.to_jsonl().as_bytes())?;
    let table = report.table();
    write_atomic(&eff.out_dir.join("report.txt"), table.as_bytes())?;
    print!("{table}");
    if report.aggregates.failures > 0 {
        bail!("{} utterance(s) failed", report.aggregates.failures);
    }
    Ok(())
}

fn cmd_bench_rtf(args: &BenchArgs, eff: &mut Effective) -> Result<()> {
    if eff.jobs != 1 {
        warn!("timing runs use a single worker; ignoring --jobs {}", eff.jobs);
        eff.jobs = 1;
    }
    let variant = NoiseVariant::from(args.variant);
    let rvae = load_ckpt(&args.rvae_ckpt)?;
    rvae.expect_role(CheckpointRole::RvaePretrained).map_err(|e| usage(format!("--rvae-ckpt: {e}")))?;
    let nd = match &args.nd_ckpt {
        Some(p) => {
            let (loaded, v) = load_for_mode(p, ModeKind::Nd, Some(args.variant))?;
            debug_assert_eq!(v, variant);
            match loaded {
                Loaded::Nd(params, _) => *params,
                Loaded::Pretrained(_) => unreachable!("nd mode loads an ND checkpoint"),
            }
        }
        None => {
            info!("no ND checkpoint; timing an untrained {variant} noise model");
            init_nd(&rvae.rvae, variant, &eff.train)
        }
    };
    let audio: Vec<Waveform> = inputs(&args.input)?
        .iter()
        .take(args.max_utts.max(1))
        .map(|e| Waveform::read_wav(&e.path))
        .collect::<Result<_, _>>()?;
    let stft = rvae.stft;
    let na_mode = EnhancementMode { kind: ModeKind::Na, na_iters: args.iters, ..eff.enhance };
    let nd_mode = EnhancementMode { kind: ModeKind::Nd, ..eff.enhance };
    let mut rng = ChaCha8Rng::seed_from_u64(eff.seed);
    let nd_rtf = rtf(|x| run_mode(x, ModelSource::NoiseDependent(&nd), variant, &nd_mode, &stft, &mut rng).map(|_| ()), &audio)?;
    let na_rtf = rtf(|x| run_mode(x, ModelSource::Pretrained(&rvae.rvae), variant, &na_mode, &stft, &mut rng).map(|_| ()), &audio)?;
    let ratio = na_rtf / nd_rtf;
    let text = format!(
        "{{\"variant\":\"{variant}\",\"utterances\":{},\"na_iters\":{},\"rtf_na\":{na_rtf},\"rtf_nd\":{nd_rtf},\"ratio\":{ratio}}}\n",
        audio.len(),
        args.iters
    );
    write_atomic(&eff.out_dir.join("rtf.jsonl"), text.as_bytes())?;
    println!("RTF  ND: {nd_rtf:.4}  NA ({} iterations): {na_rtf:.4}  ratio NA/ND: {ratio:.1}", args.iters);
    Ok(())
}

fn cmd_mix(args: &MixArgs, eff: &mut Effective) -> Result<()> {
    if args.snrs.is_empty() || args.snrs.iter().any(|s| !s.is_finite()) {
        return Err(usage("--snrs needs at least one finite value"));
    }
    let clean = load_manifest(&args.clean_manifest, "clean manifest")?;
    let noise = load_manifest(&args.noise_manifest, "noise manifest")?;
    if clean.is_empty() || noise.is_empty() {
        return Err(usage("clean and noise manifests must both be non-empty"));
    }
    let dir = eff.out_dir.join("noisy");
    create_dir(&dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(eff.seed);
    let mut entries = Vec::with_capacity(clean.len());
    for (i, c) in clean.entries.iter().enumerate() {
        let pool: Vec<&ManifestEntry> = {
            let same: Vec<_> = noise.split(c.split).collect();
            if same.is_empty() { noise.entries.iter().collect() } else { same }
        };
        let n = pool[i % pool.len()];
        let snr = args.snrs[i % args.snrs.len()];
        let speech = vad_trim(&Waveform::read_wav(&c.path)?, 30.0)?;
        let noisy = mix_at_snr(&speech, &Waveform::read_wav(&n.path)?, snr, &mut rng).with_context(|| format!("mixing {} with {}", c.id, n.id))?;
        let path = dir.join(format!("{}.wav", c.id));
        noisy.write_wav(&path)?;
        entries.push(ManifestEntry {
            snr_db: Some(snr),
            noise_kind: n.noise_kind.clone().or_else(|| Some(n.id.clone())),
            speaker: c.speaker.clone(),
            ..ManifestEntry::new(&c.id, path, c.split)
        });
    }
    let out = eff.out_dir.join("noisy.jsonl");
    Manifest::new(entries)?.save(&out)?;
    println!("mixed {} utterances at SNRs {:?} dB into {}", clean.len(), args.snrs, out.display());
    Ok(())
}

fn cmd_make_toy(args: &MakeToyArgs, eff: &mut Effective) -> Result<()> {
    if args.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    if !(args.duration > 0.0) {
        return Err(usage("--duration must be positive"));
    }
    if !(0.0..=1.0).contains(&args.train_frac) || !(0.0..=1.0).contains(&args.valid_frac) || args.train_frac + args.valid_frac > 1.0 {
        return Err(usage("--train-frac and --valid-frac must be in [0, 1] and sum to at most 1"));
    }
    let noise_kind: NoiseKind = args.noise_kind.parse().map_err(|e: dvae_denoise::Error| usage(e.to_string()))?;
    let n_train = (args.n as f64 * args.train_frac).round() as usize;
    let n_valid = ((args.n as f64 * args.valid_frac).round() as usize).min(args.n - n_train);
    let cfg = ToyCorpusConfig {
        n_train,
        n_valid,
        n_test: args.n - n_train - n_valid,
        duration_s: args.duration,
        seed: eff.seed,
        snrs_db: args.snrs.clone(),
        noise_kind,
        ..Default::default()
    };
    let corpus = make_toy_corpus(&cfg, &eff.out_dir)?;
    println!(
        "wrote {} toy utterances ({} train, {} valid, {} test) with clean.jsonl, noise.jsonl and noisy.jsonl in {}",
        corpus.clean.len(),
        cfg.n_train,
        cfg.n_valid,
        cfg.n_test,
        eff.out_dir.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut eff = resolve(&cli.global)?;
    let name = match &cli.command {
        Command::Pretrain(_) => "pretrain",
        Command::TrainNd(_) => "train-nd",
        Command::Enhance(_) => "enhance",
        Command::Evaluate(_) => "evaluate",
        Command::BenchRtf(_) => "bench-rtf",
        Command::Mix(_) => "mix",
        Command::MakeToy(_) => "make-toy",
    };
    create_dir(&eff.out_dir)?;
    let result = match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(a, &mut eff),
        Command::TrainNd(a) => cmd_train_nd(a, &mut eff),
        Command::Enhance(a) => cmd_enhance(a, &mut eff),
        Command::Evaluate(a) => cmd_evaluate(a, &mut eff),
        Command::BenchRtf(a) => cmd_bench_rtf(a, &mut eff),
        Command::Mix(a) => cmd_mix(a, &mut eff),
        Command::MakeToy(a) => cmd_make_toy(a, &mut eff),
    };
    if result.as_ref().err().is_none_or(|e| e.downcast_ref::<UsageError>().is_none()) {
        write_snapshot(&cli.command, &eff, name)?;
    }
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
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
