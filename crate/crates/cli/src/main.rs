//! `semtts` — command-line front end for the single-stream token TTS
//! pipeline: generate the synthetic corpus, train each stage, synthesize
//! speech, and run the evaluation protocols.
//!
//! Every command accepts `--preset {paper|desk}`, `--config FILE`,
//! `--seed N`, and `--workers N`; flags override the file, the file
//! overrides the preset. Runs are reproducible from `(config, seed)`
//! alone, and reports embed the SHA-256 of the resolved configuration.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 training divergence, 5 missing artifact.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rayon::prelude::*;

use config::{ConfigError, DomainName, Preset, RunConfig};
use semtts_core::checkpoint::{load_checkpoint, save_checkpoint};
use semtts_core::data::{load_manifest, read_wav, resample, write_wav, Utterance, Waveform};
use semtts_core::error::CoreError;
use semtts_core::features::{extract_features, FrameMatrix};
use semtts_core::lm::{build_lm, lm_from_checkpoint, lm_to_checkpoint, lm_train_full_batch};
use semtts_core::metrics::{
    bin_by_rate, cosine_similarity, error_rate, speaking_rate, summarize, write_rate_csv,
    write_report, ErrorUnit, EvalRecord,
};
use semtts_core::optim::{Adam, AdamConfig};
use semtts_core::pipeline::{
    best_of_k, report_jsonl, synthesize, AsrOracle, ExternalAsr, SynthesisModels,
    SynthesisRequest, ToysetOracle,
};
use semtts_core::quantizer::{fit_kmeans, load_codebook, quantize, save_codebook, Codebook};
use semtts_core::speaker::{embed_speaker, embed_speaker_eval, MIN_EMBED_SEC};
use semtts_core::text_tok::{encode, load_vocab, save_vocab, train_vocab};
use semtts_core::toyset::{make_corpus, ToySpec};
use semtts_core::vocoder::{
    build_vocoder, vocoder_from_checkpoint, vocoder_to_checkpoint, vocoder_train,
    VocoderTrainItem,
};
use semtts_core::{TokenSequence, MODEL_SAMPLE_RATE, SAMPLES_PER_FRAME};

// --- Error handling ---------------------------------------------------------

/// Anything a command can fail with, tagged for the exit-code contract.
#[derive(Debug)]
enum CliError {
    /// Bad configuration (file, key, value, or flag combination) — exit 2.
    Config(String),
    /// Pre-synthesized outputs expected but absent — exit 5, with the
    /// full listing so the user can see exactly what to regenerate.
    MissingOutputs(Vec<PathBuf>),
    /// A library error; the exit code follows its variant.
    Core(CoreError),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::MissingOutputs(paths) => {
                writeln!(f, "missing {} synthesized output(s):", paths.len())?;
                for p in paths {
                    writeln!(f, "  {}", p.display())?;
                }
                Ok(())
            }
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

/// Exit code for a library error: contract violations read as
/// configuration problems (2); i/o, parse, range, capacity, and format
/// problems are data errors (3); divergence is 4; a missing model
/// artifact is 5. Stage wrappers defer to the underlying cause.
fn core_exit_code(e: &CoreError) -> u8 {
    match e {
        CoreError::Stage { source, .. } => core_exit_code(source),
        CoreError::Contract(_) => 2,
        CoreError::Divergence(_) => 4,
        CoreError::MissingArtifact(_) => 5,
        _ => 3,
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingOutputs(_) => 5,
            CliError::Core(e) => core_exit_code(e),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

// --- Command line -------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "semtts",
    version,
    about = "Single-stream token TTS: corpus generation, stage training, synthesis, evaluation."
)]
struct Cli {
    /// TOML configuration file overlaying the preset (partial files are
    /// fine; unknown keys are rejected).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Base hyperparameter set the config file overlays.
    #[arg(long, global = true, value_enum, default_value = "desk")]
    preset: Preset,

    /// Master RNG seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for data-parallel sections; 0 = all cores
    /// (overrides the config file).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic tone-complex corpus (WAVs + manifest.jsonl).
    MakeToyset(MakeToysetArgs),
    /// Fit the k-means acoustic quantizer on a manifest's audio.
    TrainQuantizer(TrainQuantizerArgs),
    /// Learn the byte-merge text vocabulary from a manifest's transcripts.
    TrainTextvocab(TrainTextvocabArgs),
    /// Train the token language model (full-batch teacher forcing).
    TrainLm(TrainLmArgs),
    /// Train the unit vocoder (adversarial loop with mel matching).
    TrainVocoder(TrainVocoderArgs),
    /// Synthesize speech for a text given a prompt clip.
    Synthesize(SynthesizeArgs),
    /// Run an evaluation protocol over a manifest.
    Evaluate(EvaluateArgs),
    /// Print the resolved configuration and its SHA-256, then exit.
    ShowConfig,
}

#[derive(Args)]
struct MakeToysetArgs {
    /// Output directory; receives the WAV files and `manifest.jsonl`.
    #[arg(long)]
    out: PathBuf,
    /// Number of utterances to render.
    #[arg(long, default_value_t = 48)]
    count: usize,
}

#[derive(Args)]
struct TrainQuantizerArgs {
    /// Training manifest (JSON-lines utterance records).
    #[arg(long)]
    manifest: PathBuf,
    /// Where to write the codebook artifact.
    #[arg(long)]
    out: PathBuf,
    /// Number of centroids (overrides `quantizer.k`).
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct TrainTextvocabArgs {
    /// Training manifest (JSON-lines utterance records).
    #[arg(long)]
    manifest: PathBuf,
    /// Where to write the vocabulary artifact.
    #[arg(long)]
    out: PathBuf,
    /// Total vocabulary size (overrides `text.vocab_size`).
    #[arg(long)]
    vocab_size: Option<usize>,
}

#[derive(Args)]
struct TrainLmArgs {
    /// Training manifest (JSON-lines utterance records).
    #[arg(long)]
    manifest: PathBuf,
    /// Acoustic quantizer codebook artifact.
    #[arg(long)]
    codebook: PathBuf,
    /// Text vocabulary artifact.
    #[arg(long)]
    textvocab: PathBuf,
    /// Where to write the model checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint: parameters, optimizer moments, and
    /// the global step all continue where the file left off.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Optimizer steps to run (overrides `lm.steps`).
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct TrainVocoderArgs {
    /// Training manifest (JSON-lines utterance records).
    #[arg(long)]
    manifest: PathBuf,
    /// Acoustic quantizer codebook artifact.
    #[arg(long)]
    codebook: PathBuf,
    /// Where to write the model checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint (parameters, both optimizers, step).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Optimizer steps to run (overrides `vocoder.steps`).
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct SynthesizeArgs {
    /// Text to speak.
    #[arg(long)]
    text: String,
    /// Reference clip; its first `--prompt-sec` seconds become the
    /// acoustic prompt.
    #[arg(long)]
    prompt: PathBuf,
    /// Speaker reference clip; defaults to the prompt clip when omitted.
    #[arg(long)]
    speaker: Option<PathBuf>,
    /// Acoustic quantizer codebook artifact.
    #[arg(long)]
    codebook: PathBuf,
    /// Text vocabulary artifact.
    #[arg(long)]
    textvocab: PathBuf,
    /// Language-model checkpoint.
    #[arg(long)]
    lm: PathBuf,
    /// Vocoder checkpoint.
    #[arg(long)]
    vocoder: PathBuf,
    /// Output WAV path.
    #[arg(long)]
    out: PathBuf,
    /// Candidate report path (JSON-lines). Defaults to the output path
    /// with a `.report.jsonl` extension when more than one candidate is
    /// drawn.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Number of candidates; the one with the lowest transcription error
    /// is kept (overrides `synthesis.k`).
    #[arg(long)]
    k: Option<usize>,
    /// Nucleus sampling mass (overrides `synthesis.top_p`).
    #[arg(long)]
    top_p: Option<f64>,
    /// Prompt length in seconds, clamped to the clip length (overrides
    /// `synthesis.prompt_sec`).
    #[arg(long)]
    prompt_sec: Option<f64>,
    /// Domain flag (overrides `synthesis.domain`).
    #[arg(long, value_enum)]
    domain: Option<DomainName>,
    /// External recognizer for candidate scoring: a command line whose
    /// last argument will be the candidate WAV path and whose stdout is
    /// the transcript. Defaults to the built-in toy-corpus inverter.
    #[arg(long)]
    asr: Option<String>,
}

/// Which evaluation protocol to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalMode {
    /// Word/character error rate of synthesized speech against the
    /// manifest transcripts.
    Wer,
    /// Cosine similarity between synthesized and reference speaker
    /// embeddings (the held-out "eval" embedder on both sides).
    #[value(alias = "spk_sim")]
    SpkSim,
    /// Prompt-rate vs. generated-rate correlation with a fixed speaker
    /// vector, rate-binned before the Pearson statistic.
    #[value(alias = "rate_corr")]
    RateCorr,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Evaluation manifest (JSON-lines utterance records).
    #[arg(long)]
    manifest: PathBuf,
    /// Protocol to run.
    #[arg(long, value_enum)]
    mode: EvalMode,
    /// JSON-lines report path (records, then one summary line).
    #[arg(long)]
    out: PathBuf,
    /// Rate scatter CSV path (rate-corr mode; defaults to the report
    /// path with a `.csv` extension).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Directory of pre-synthesized outputs (`<utterance-id>.wav`).
    /// When given, the model artifacts are not needed; when absent,
    /// outputs are synthesized in-process from the four artifacts below.
    #[arg(long)]
    outputs: Option<PathBuf>,
    /// Acoustic quantizer codebook artifact.
    #[arg(long)]
    codebook: Option<PathBuf>,
    /// Text vocabulary artifact.
    #[arg(long)]
    textvocab: Option<PathBuf>,
    /// Language-model checkpoint.
    #[arg(long)]
    lm: Option<PathBuf>,
    /// Vocoder checkpoint.
    #[arg(long)]
    vocoder: Option<PathBuf>,
    /// Candidates per utterance, best kept (overrides `evaluate.best_of`;
    /// 1 = single-sample paradigm).
    #[arg(long)]
    best_of: Option<usize>,
    /// External recognizer (see `synthesize --asr`).
    #[arg(long)]
    asr: Option<String>,
}

// --- Entry point ---------------------------------------------------------------

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = RunConfig::load(cli.preset, cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    if cfg.workers > 0 {
        // Errors only if a pool already exists (e.g. under a test
        // harness); the existing pool then governs.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global();
    }
    info!(
        "resolved config: quantizer k={}, lm layers={}, heads={} (sha256 {})",
        cfg.quantizer.k,
        cfg.lm.layers,
        cfg.lm.heads,
        cfg.sha256_hex()
    );

    match cli.command {
        Command::MakeToyset(args) => cmd_make_toyset(&cfg, &args),
        Command::TrainQuantizer(args) => cmd_train_quantizer(&cfg, &args),
        Command::TrainTextvocab(args) => cmd_train_textvocab(&cfg, &args),
        Command::TrainLm(args) => cmd_train_lm(&cfg, &args),
        Command::TrainVocoder(args) => cmd_train_vocoder(&cfg, &args),
        Command::Synthesize(args) => cmd_synthesize(&cfg, &args),
        Command::Evaluate(args) => cmd_evaluate(&cfg, &args),
        Command::ShowConfig => cmd_show_config(&cfg, cli.preset),
    }
}

// --- Shared helpers --------------------------------------------------------------

/// Fails with the missing-artifact exit code unless `path` is a file.
fn require_artifact(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CoreError::MissingArtifact(path.to_path_buf()).into())
    }
}

/// Resolves an utterance's audio path relative to its manifest.
fn resolve_audio(manifest: &Path, utt: &Utterance) -> PathBuf {
    if utt.audio_path.is_absolute() {
        utt.audio_path.clone()
    } else {
        manifest
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&utt.audio_path)
    }
}

/// Reads a WAV and brings it to the model sample rate.
fn read_model_rate(path: &Path) -> CliResult<Waveform> {
    let w = read_wav(path)?;
    if w.sample_rate == MODEL_SAMPLE_RATE {
        Ok(w)
    } else {
        Ok(resample(&w, MODEL_SAMPLE_RATE)?)
    }
}

fn load_audio(manifest: &Path, utt: &Utterance) -> CliResult<Waveform> {
    read_model_rate(&resolve_audio(manifest, utt))
}

/// Manifest-order identifier: the audio file's stem.
fn utterance_id(utt: &Utterance) -> String {
    utt.audio_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| utt.audio_path.to_string_lossy().into_owned())
}

/// Cyclically extends a clip to the speaker embedder's minimum length.
/// Repetition changes duration, not timbre, so the embedding stays
/// faithful for clips shorter than the embedder accepts.
fn tile_to_embed_min(w: &Waveform) -> Waveform {
    let min_len = (MIN_EMBED_SEC * f64::from(MODEL_SAMPLE_RATE)).ceil() as usize;
    if w.is_empty() || w.len() >= min_len {
        return w.clone();
    }
    let mut samples = Vec::with_capacity(min_len);
    while samples.len() < min_len {
        let take = (min_len - samples.len()).min(w.len());
        samples.extend_from_slice(&w.samples[..take]);
    }
    Waveform::new(samples, w.sample_rate).expect("sample rate already validated")
}

/// Acoustic tokens of a 16 kHz clip under the given codebook.
fn tokens_for(audio: &Waveform, cb: &Codebook) -> CliResult<TokenSequence> {
    let feats = extract_features(audio)?;
    Ok(quantize(&feats, cb)?)
}

/// Candidate scorer: the built-in toy-corpus inverter, or an external
/// command when `--asr` is given.
fn build_oracle(asr: Option<&str>) -> CliResult<Box<dyn AsrOracle + Send + Sync>> {
    match asr {
        None => Ok(Box::new(ToysetOracle::default())),
        Some(cmd) => {
            let mut parts: Vec<String> = cmd.split_whitespace().map(String::from).collect();
            if parts.is_empty() {
                return Err(CliError::Config("--asr command is empty".into()));
            }
            let program = parts.remove(0);
            Ok(Box::new(ExternalAsr {
                program,
                args: parts,
            }))
        }
    }
}

fn load_models(
    codebook: &Path,
    textvocab: &Path,
    lm: &Path,
    vocoder: &Path,
) -> CliResult<SynthesisModels> {
    for p in [codebook, textvocab, lm, vocoder] {
        require_artifact(p)?;
    }
    let models = SynthesisModels {
        quantizer: load_codebook(codebook)?,
        text_vocab: load_vocab(textvocab)?,
        lm: lm_from_checkpoint(&load_checkpoint(lm)?)?,
        vocoder: vocoder_from_checkpoint(&load_checkpoint(vocoder)?)?,
    };
    models.validate()?;
    Ok(models)
}

// --- Commands ---------------------------------------------------------------------

fn cmd_show_config(cfg: &RunConfig, preset: Preset) -> CliResult<()> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| CliError::Config(format!("serialization: {e}")))?;
    println!(
        "# preset: {}",
        match preset {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    );
    println!("# sha256: {}", cfg.sha256_hex());
    println!(
        "# quantizer k={}, lm layers={}, heads={}",
        cfg.quantizer.k, cfg.lm.layers, cfg.lm.heads
    );
    print!("{text}");
    Ok(())
}

fn cmd_make_toyset(cfg: &RunConfig, args: &MakeToysetArgs) -> CliResult<()> {
    if args.count == 0 {
        return Err(CliError::Config("--count must be positive".into()));
    }
    let spec = ToySpec::default();
    let corpus = make_corpus(&spec, &args.out, args.count, cfg.seed)?;
    println!(
        "wrote {} utterances ({} speakers) to {}",
        corpus.utterances.len(),
        spec.speakers.len(),
        args.out.join("manifest.jsonl").display()
    );
    Ok(())
}

fn cmd_train_quantizer(cfg: &RunConfig, args: &TrainQuantizerArgs) -> CliResult<()> {
    let k = args.k.unwrap_or(cfg.quantizer.k);
    let utterances = load_manifest(&args.manifest)?;
    if utterances.is_empty() {
        return Err(CoreError::contract("manifest has no utterances").into());
    }

    let mut matrices = Vec::with_capacity(utterances.len());
    let mut total = 0usize;
    for utt in &utterances {
        let audio = load_audio(&args.manifest, utt)?;
        let feats = extract_features(&audio)?;
        total += feats.frames.nrows();
        matrices.push(feats);
    }
    // Deterministic stride subsampling keeps the pooled matrix under the
    // configured budget without favoring any utterance.
    let stride = total.div_ceil(cfg.quantizer.max_frames).max(1);
    let dim = matrices[0].feature_dim;
    let mut rows: Vec<f32> = Vec::new();
    let mut kept = 0usize;
    let mut index = 0usize;
    for m in &matrices {
        for row in m.frames.rows() {
            if index % stride == 0 {
                rows.extend(row.iter());
                kept += 1;
            }
            index += 1;
        }
    }
    let pooled = FrameMatrix {
        frames: ndarray::Array2::from_shape_vec((kept, dim), rows)
            .map_err(|e| CoreError::contract(format!("pooled feature matrix: {e}")))?,
        frame_rate: matrices[0].frame_rate,
        feature_dim: dim,
    };
    info!("pooled {kept} of {total} frames (stride {stride}) from {} utterances", utterances.len());

    let cb = fit_kmeans(&pooled, k, cfg.seed)?;
    save_codebook(&cb, &args.out)?;
    println!("wrote codebook {} (k={k}, dim={dim})", args.out.display());
    Ok(())
}

fn cmd_train_textvocab(cfg: &RunConfig, args: &TrainTextvocabArgs) -> CliResult<()> {
    let size = args.vocab_size.unwrap_or(cfg.text.vocab_size);
    let utterances = load_manifest(&args.manifest)?;
    let corpus: Vec<String> = utterances.iter().map(|u| u.transcript.clone()).collect();
    let vocab = train_vocab(&corpus, size)?;
    save_vocab(&vocab, &args.out)?;
    println!("wrote text vocabulary {} (size={})", args.out.display(), vocab.size());
    Ok(())
}

fn cmd_train_lm(cfg: &RunConfig, args: &TrainLmArgs) -> CliResult<()> {
    require_artifact(&args.codebook)?;
    require_artifact(&args.textvocab)?;
    let cb = load_codebook(&args.codebook)?;
    let vocab = load_vocab(&args.textvocab)?;

    let utterances = load_manifest(&args.manifest)?;
    let mut corpus = Vec::with_capacity(utterances.len());
    for utt in &utterances {
        let audio = load_audio(&args.manifest, utt)?;
        let z_txt = encode(&utt.transcript, &vocab);
        let z_ac = tokens_for(&audio, &cb)?;
        corpus.push((z_txt, z_ac));
    }

    let (params, mut opt, start_step) = match &args.resume {
        Some(path) => {
            require_artifact(path)?;
            let ckpt = load_checkpoint(path)?;
            let params = lm_from_checkpoint(&ckpt)?;
            let c = params.config();
            if c.text_vocab != vocab.size() || c.acoustic_vocab != cb.k() {
                return Err(CoreError::contract(format!(
                    "checkpoint vocabularies (text {}, acoustic {}) do not match the \
                     artifacts (text {}, acoustic {})",
                    c.text_vocab,
                    c.acoustic_vocab,
                    vocab.size(),
                    cb.k()
                ))
                .into());
            }
            let mut opt = Adam::new(AdamConfig::default());
            opt.read_from(&ckpt, "opt", params.device())?;
            info!("resuming from {} at step {}", path.display(), ckpt.step);
            (params, opt, ckpt.step)
        }
        None => {
            let lm_config = cfg.lm_config(vocab.size(), cb.k());
            lm_config.validate()?;
            let params = build_lm(&lm_config, cfg.seed)?;
            (params, Adam::new(AdamConfig::default()), 0)
        }
    };

    let mut opts = cfg.lm_train_options();
    if let Some(steps) = args.steps {
        opts.steps = steps;
    }
    let history = lm_train_full_batch(&params, &mut opt, &corpus, &opts, start_step)?;
    let final_step = start_step + history.len() as u64;
    let final_loss = history.last().copied().unwrap_or(f64::NAN);

    let ckpt = lm_to_checkpoint(&params, final_step, Some(&opt))?;
    save_checkpoint(&args.out, &ckpt)?;
    println!(
        "wrote lm checkpoint {} (step {final_step}, loss {final_loss:.4})",
        args.out.display()
    );
    Ok(())
}

fn cmd_train_vocoder(cfg: &RunConfig, args: &TrainVocoderArgs) -> CliResult<()> {
    require_artifact(&args.codebook)?;
    let cb = load_codebook(&args.codebook)?;

    let utterances = load_manifest(&args.manifest)?;
    let mut items = Vec::with_capacity(utterances.len());
    for utt in &utterances {
        let audio = load_audio(&args.manifest, utt)?;
        let tokens = tokens_for(&audio, &cb)?;
        let speaker = embed_speaker(&tile_to_embed_min(&audio))?;
        // The feature hop floors partial frames away; trim the target to
        // the exact token coverage so lengths agree.
        let mut samples = audio.samples;
        samples.truncate(tokens.len() * SAMPLES_PER_FRAME);
        let target = Waveform::new(samples, MODEL_SAMPLE_RATE)?;
        items.push(VocoderTrainItem {
            tokens,
            speaker,
            domain: utt.domain,
            audio: target,
        });
    }

    let (params, mut opt_g, mut opt_d, start_step) = match &args.resume {
        Some(path) => {
            require_artifact(path)?;
            let ckpt = load_checkpoint(path)?;
            let params = vocoder_from_checkpoint(&ckpt)?;
            if params.config.token_vocab as usize != cb.k() {
                return Err(CoreError::contract(format!(
                    "checkpoint token vocabulary {} does not match the codebook ({})",
                    params.config.token_vocab,
                    cb.k()
                ))
                .into());
            }
            let mut opt_g = Adam::new(AdamConfig::default());
            let mut opt_d = Adam::new(AdamConfig::default());
            opt_g.read_from(&ckpt, "opt_g", &params.device)?;
            opt_d.read_from(&ckpt, "opt_d", &params.device)?;
            info!("resuming from {} at step {}", path.display(), ckpt.step);
            (params, opt_g, opt_d, ckpt.step)
        }
        None => {
            let voc_config = cfg.vocoder_config(cb.k() as u32);
            voc_config.validate()?;
            let params = build_vocoder(&voc_config, cfg.seed)?;
            (
                params,
                Adam::new(AdamConfig::default()),
                Adam::new(AdamConfig::default()),
                0,
            )
        }
    };

    let mut opts = cfg.vocoder_train_options();
    if let Some(steps) = args.steps {
        opts.steps = steps;
    }
    let reports = vocoder_train(&params, &mut opt_g, &mut opt_d, &items, &opts, start_step)?;
    let final_step = start_step + reports.len() as u64;
    let last = reports.last();

    let ckpt = vocoder_to_checkpoint(&params, final_step, Some(&opt_g), Some(&opt_d))?;
    save_checkpoint(&args.out, &ckpt)?;
    match last {
        Some(r) => println!(
            "wrote vocoder checkpoint {} (step {final_step}, mel L1 {:.4}, gen total {:.4})",
            args.out.display(),
            r.mel_l1,
            r.gen_total
        ),
        None => println!(
            "wrote vocoder checkpoint {} (step {final_step}, no steps run)",
            args.out.display()
        ),
    }
    Ok(())
}

fn cmd_synthesize(cfg: &RunConfig, args: &SynthesizeArgs) -> CliResult<()> {
    let models = load_models(&args.codebook, &args.textvocab, &args.lm, &args.vocoder)?;
    let prompt = read_model_rate(&args.prompt)?;
    let speaker_src = match &args.speaker {
        Some(path) => read_model_rate(path)?,
        // The speaker reference defaults to the prompt clip itself.
        None => prompt.clone(),
    };
    let d_p = args
        .prompt_sec
        .unwrap_or(cfg.synthesis.prompt_sec)
        .min(prompt.duration_sec());
    let req = SynthesisRequest {
        text: args.text.clone(),
        prompt_audio: prompt,
        speaker_audio: tile_to_embed_min(&speaker_src),
        top_p: args.top_p.unwrap_or(cfg.synthesis.top_p),
        seed: cfg.seed,
        k: args.k.unwrap_or(cfg.synthesis.k),
        d_p,
        domain: args
            .domain
            .map(DomainName::to_domain)
            .unwrap_or_else(|| cfg.synthesis.domain.to_domain()),
    };

    if req.k == 1 && args.report.is_none() {
        let wav = synthesize(&req, &models)?;
        write_wav(&args.out, &wav)?;
        println!(
            "wrote {} ({:.2} s, seed {})",
            args.out.display(),
            wav.duration_sec(),
            req.seed
        );
        return Ok(());
    }

    let oracle = build_oracle(args.asr.as_deref())?;
    let (wav, reports) = best_of_k(&req, &models, oracle.as_ref())?;
    write_wav(&args.out, &wav)?;
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| args.out.with_extension("report.jsonl"));
    std::fs::write(&report_path, report_jsonl(&reports)?).map_err(CoreError::from)?;
    let selected = reports
        .iter()
        .find(|r| r.selected)
        .expect("exactly one candidate is selected");
    println!(
        "wrote {} ({:.2} s; candidate {} of {}, wer {:.4}) and report {}",
        args.out.display(),
        wav.duration_sec(),
        selected.index,
        reports.len(),
        selected.wer,
        report_path.display()
    );
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> CliResult<()> {
    let utterances = load_manifest(&args.manifest)?;
    if utterances.is_empty() {
        return Err(CoreError::contract("manifest has no utterances").into());
    }
    let oracle = build_oracle(args.asr.as_deref())?;

    let records = match &args.outputs {
        Some(dir) => eval_existing_outputs(args, &utterances, dir, oracle.as_ref())?,
        None => {
            let missing_flag = |name: &str| {
                CliError::Config(format!("--{name} is required unless --outputs is given"))
            };
            let codebook = args.codebook.as_ref().ok_or_else(|| missing_flag("codebook"))?;
            let textvocab = args
                .textvocab
                .as_ref()
                .ok_or_else(|| missing_flag("textvocab"))?;
            let lm = args.lm.as_ref().ok_or_else(|| missing_flag("lm"))?;
            let vocoder = args.vocoder.as_ref().ok_or_else(|| missing_flag("vocoder"))?;
            let models = load_models(codebook, textvocab, lm, vocoder)?;
            eval_synthesized(cfg, args, &utterances, &models, oracle.as_ref())?
        }
    };

    let pooling = cfg.evaluate.pooling.to_pooling();
    match args.mode {
        EvalMode::Wer | EvalMode::SpkSim => {
            let mut summary = summarize(&records, pooling)?;
            summary.config_sha256 = Some(cfg.sha256_hex());
            write_report(&args.out, &records, &summary)?;
            match args.mode {
                EvalMode::Wer => println!(
                    "wrote {} ({} records; wer {:.4}, cer {:.4})",
                    args.out.display(),
                    summary.count,
                    summary.wer,
                    summary.cer
                ),
                _ => println!(
                    "wrote {} ({} records; spk-sim {:.4})",
                    args.out.display(),
                    summary.count,
                    summary.spk_sim.unwrap_or(f64::NAN)
                ),
            }
        }
        EvalMode::RateCorr => {
            // The balanced protocol: bin prompts by speaking rate, cap
            // each bin, and correlate on the balanced sample.
            let binned = bin_by_rate(&records, cfg.evaluate.bins, cfg.evaluate.bin_cap, cfg.seed)?;
            let mut summary = summarize(&binned, pooling)?;
            summary.config_sha256 = Some(cfg.sha256_hex());
            write_report(&args.out, &binned, &summary)?;
            let csv_path = args
                .csv
                .clone()
                .unwrap_or_else(|| args.out.with_extension("csv"));
            write_rate_csv(&csv_path, &binned)?;
            println!(
                "wrote {} and {} ({} of {} records kept; rate pearson {:.4})",
                args.out.display(),
                csv_path.display(),
                binned.len(),
                records.len(),
                summary.rate_pearson.unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}

/// Synthesizes every manifest utterance and scores it. Parallel across
/// utterances; deterministic regardless of worker count because each
/// utterance derives its own seed from the master seed and its index.
fn eval_synthesized(
    cfg: &RunConfig,
    args: &EvaluateArgs,
    utterances: &[Utterance],
    models: &SynthesisModels,
    oracle: &(dyn AsrOracle + Send + Sync),
) -> CliResult<Vec<EvalRecord>> {
    let best_of = args.best_of.unwrap_or(cfg.evaluate.best_of).max(1);
    let mut jobs = Vec::with_capacity(utterances.len());
    for (idx, utt) in utterances.iter().enumerate() {
        jobs.push((idx, utt, load_audio(&args.manifest, utt)?));
    }
    // Rate-correlation runs isolate prosody transfer: one fixed speaker
    // vector source for every request, taken from the first utterance.
    let fixed_speaker = (args.mode == EvalMode::RateCorr).then(|| tile_to_embed_min(&jobs[0].2));

    let done = AtomicUsize::new(0);
    let total = jobs.len();
    let records: Result<Vec<EvalRecord>, CliError> = jobs
        .par_iter()
        .map(|(idx, utt, audio)| {
            let duration = audio.duration_sec();
            let d_p = cfg.synthesis.prompt_sec.min(duration);
            let speaker_audio = match &fixed_speaker {
                Some(w) => w.clone(),
                None => tile_to_embed_min(audio),
            };
            let req = SynthesisRequest {
                text: utt.transcript.clone(),
                prompt_audio: audio.clone(),
                speaker_audio,
                top_p: cfg.synthesis.top_p,
                seed: cfg.seed.wrapping_add((*idx as u64).wrapping_mul(best_of as u64)),
                k: best_of,
                d_p,
                domain: utt.domain,
            };
            let (wav, reports) = best_of_k(&req, models, oracle)?;
            let selected = reports
                .iter()
                .find(|r| r.selected)
                .expect("exactly one candidate is selected");
            let hyp = if selected.asr_failed {
                String::new()
            } else {
                oracle.transcribe(&wav).unwrap_or_default()
            };
            let record = score_output(args.mode, utt, audio, &wav, &hyp, Some(selected.wer))?;
            let n = done.fetch_add(1, Ordering::Relaxed) + 1;
            if n % 10 == 0 || n == total {
                info!("evaluated {n}/{total} utterances");
            }
            Ok(record)
        })
        .collect();
    records
}

/// Scores pre-synthesized WAVs named `<utterance-id>.wav` under `dir`.
/// Every absent file is listed before failing.
fn eval_existing_outputs(
    args: &EvaluateArgs,
    utterances: &[Utterance],
    dir: &Path,
    oracle: &(dyn AsrOracle + Send + Sync),
) -> CliResult<Vec<EvalRecord>> {
    let mut missing = Vec::new();
    let mut present = Vec::new();
    for utt in utterances {
        let path = dir.join(format!("{}.wav", utterance_id(utt)));
        if path.is_file() {
            present.push((utt, path));
        } else {
            missing.push(path);
        }
    }
    if !missing.is_empty() {
        return Err(CliError::MissingOutputs(missing));
    }

    let mut records = Vec::with_capacity(present.len());
    for (utt, path) in present {
        let reference = load_audio(&args.manifest, utt)?;
        let wav = read_model_rate(&path)?;
        let hyp = match oracle.transcribe(&wav) {
            Ok(h) => h,
            Err(e) => {
                warn!("{}: transcription failed ({e}); scoring empty", path.display());
                String::new()
            }
        };
        records.push(score_output(args.mode, utt, &reference, &wav, &hyp, None)?);
    }
    Ok(records)
}

/// Builds one evaluation record from a synthesized (or loaded) output.
/// `wer` may be precomputed by candidate selection; otherwise it is
/// derived from the transcript here.
fn score_output(
    mode: EvalMode,
    utt: &Utterance,
    reference: &Waveform,
    output: &Waveform,
    hyp: &str,
    wer: Option<f64>,
) -> CliResult<EvalRecord> {
    let wer = match wer {
        Some(w) => w,
        None => error_rate(&utt.transcript, hyp, ErrorUnit::Word)?,
    };
    let cer = error_rate(&utt.transcript, hyp, ErrorUnit::Char)?;
    let spk_sim = if mode == EvalMode::SpkSim {
        let a = embed_speaker_eval(&tile_to_embed_min(output))?;
        let b = embed_speaker_eval(&tile_to_embed_min(reference))?;
        Some(cosine_similarity(&a, &b)?)
    } else {
        None
    };
    let rate_prompt = speaking_rate(&utt.transcript, reference.duration_sec())?;
    let rate_generated = if output.duration_sec() > 0.0 {
        speaking_rate(hyp, output.duration_sec())?
    } else {
        0.0
    };
    Ok(EvalRecord {
        utterance_id: utterance_id(utt),
        ref_text: utt.transcript.clone(),
        hyp_text: hyp.to_string(),
        wer,
        cer,
        spk_sim,
        rate_prompt,
        rate_generated,
    })
}
