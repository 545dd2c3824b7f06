//! `wavetrainerfit`: train, synthesize, sample the prior, evaluate.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad arguments, config or
//! data, 3 nothing to evaluate.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use trainerfit::audio::{read_wav, write_wav};
use trainerfit::config::{Preset, RunConfig};
use trainerfit::features::{load_feature_file, write_feature_file, ConditionalFeature};
use trainerfit::metrics::{utterance_metrics, MetricReport};
use trainerfit::training::{Dataset, Trainer, Utterance};
use trainerfit::vocoder::{initial_noise, synthesize, GainMode};

#[derive(Parser)]
#[command(name = "wavetrainerfit", version, about = "Fixed-point iteration vocoder with a trainable noise prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from WAV files or the built-in synthetic corpus.
    Train(TrainArgs),
    /// Synthesize a waveform from features.
    Synth(SynthArgs),
    /// Draw initial noise from the prior and dump its variance map.
    SamplePrior(SamplePriorArgs),
    /// Objective metrics between two directories of WAV files.
    Evaluate(EvaluateArgs),
    /// Metrics and real-time factor per iteration count and gain mode.
    CompareIterations(CompareArgs),
    /// Print the effective configuration as TOML.
    DumpConfig(ConfigArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset: desk or paper.
    #[arg(long, default_value = "desk")]
    preset: String,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Failure> {
        match &self.config {
            Some(path) => RunConfig::load(path).map_err(Failure::input),
            None => {
                let preset: Preset = self.preset.parse().map_err(Failure::input)?;
                Ok(RunConfig::preset(preset))
            }
        }
    }
}

#[derive(Args)]
struct CorpusArgs {
    /// Directory of mono WAV files at the configured sample rate.
    #[arg(long, conflicts_with = "synthetic")]
    data_dir: Option<PathBuf>,
    /// Use this many built-in synthetic utterances instead.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Length of each synthetic utterance in seconds.
    #[arg(long, default_value_t = 1.0)]
    synthetic_secs: f64,
}

impl CorpusArgs {
    fn load(&self, cfg: &RunConfig) -> Result<Dataset, Failure> {
        match (&self.data_dir, self.synthetic) {
            (Some(dir), _) => Dataset::from_wav_dir(dir, cfg).map_err(Failure::input),
            (None, Some(n)) => Dataset::synthetic(n, self.synthetic_secs, cfg, cfg.training.seed).map_err(Failure::input),
            (None, None) => Err(Failure::input(anyhow!("one of --data-dir or --synthetic is required"))),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Output directory for `checkpoint.wtfc` and `train.jsonl`.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint, using its configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the configured number of training steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Write a checkpoint every N steps in addition to the final one.
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Args)]
struct FeatureSource {
    /// WTFF feature file.
    #[arg(long, conflicts_with = "wav")]
    features: Option<PathBuf>,
    /// WAV file to extract the built-in features from.
    #[arg(long)]
    wav: Option<PathBuf>,
}

impl FeatureSource {
    fn load(&self, cfg: &RunConfig) -> Result<ConditionalFeature, Failure> {
        match (&self.features, &self.wav) {
            (Some(path), _) => load_feature_file(path).map_err(Failure::input),
            (None, Some(path)) => {
                let w = read_wav(path).map_err(Failure::input)?;
                Ok(Utterance::from_waveform("input", &w, cfg).map_err(Failure::input)?.features)
            }
            (None, None) => Err(Failure::input(anyhow!("one of --features or --wav is required"))),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: FeatureSource,
    /// Gain mode: `reference` (prior noise) or `self` (white noise).
    #[arg(long, default_value = "reference")]
    mode: String,
    /// Iterations `T`; defaults to the configured value.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Directory for one WAV per iterate plus `gains.json`.
    #[arg(long)]
    dump_trace: Option<PathBuf>,
}

#[derive(Args)]
struct SamplePriorArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: FeatureSource,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_wav: PathBuf,
    /// `Σ_prior` as a WTFF grid: one row per STFT frame, one channel per bin.
    #[arg(long)]
    out_sigma: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ref_dir: PathBuf,
    #[arg(long)]
    hyp_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Iteration counts, as a range `1..5` or a list `1,3,5`.
    #[arg(long, default_value = "1..5")]
    steps: String,
    /// Modes to compare.
    #[arg(long, value_delimiter = ',', default_value = "self,reference")]
    modes: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn input(e: impl Into<anyhow::Error>) -> Self {
        Self { code: 2, error: e.into() }
    }

    fn empty(e: impl Into<anyhow::Error>) -> Self {
        Self { code: 3, error: e.into() }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Self { code: 1, error: e.into() }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Synth(a) => synth(a),
        Command::SamplePrior(a) => sample_prior(a),
        Command::Evaluate(a) => evaluate(a),
        Command::CompareIterations(a) => compare_iterations(a),
        Command::DumpConfig(a) => dump_config(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn parse_mode(s: &str) -> Result<GainMode, Failure> {
    match s {
        "self" => Ok(GainMode::SelfGain),
        "reference" => Ok(GainMode::Reference),
        other => Err(Failure::input(anyhow!("unknown mode {other:?} (expected self or reference)"))),
    }
}

fn parse_steps(s: &str) -> Result<Vec<usize>, Failure> {
    let bad = || Failure::input(anyhow!("bad --steps {s:?}: use 1..5 or 1,3,5"));
    let steps: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        (a..=b).collect()
    } else {
        s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if steps.is_empty() || steps.contains(&0) {
        return Err(bad());
    }
    Ok(steps)
}

fn load_trainer(path: &Path) -> Result<Trainer, Failure> {
    Trainer::from_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(Failure::input)
}

fn check_steps(trainer: &Trainer, steps: usize) -> Result<(), Failure> {
    let max = trainer.cfg.vocoder.network.steps;
    if steps == 0 || steps > max {
        return Err(Failure::input(anyhow!("--steps must be in 1..={max}")));
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut trainer = match &a.resume {
        Some(path) => {
            if a.config.config.is_some() {
                return Err(Failure::input(anyhow!("--resume uses the checkpoint's config; drop --config")));
            }
            load_trainer(path)?
        }
        None => Trainer::new(a.config.load()?).map_err(Failure::input)?,
    };
    if let Some(steps) = a.steps {
        trainer.cfg.training.steps = steps;
    }
    let ds = a.corpus.load(&trainer.cfg)?;
    let log_path = a.out.join("train.jsonl");
    let log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume.is_some())
        .truncate(a.resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(log);
    let ckpt = a.out.join("checkpoint.wtfc");
    let target = trainer.cfg.training.steps;
    let chunk = a.checkpoint_every.filter(|&n| n > 0).unwrap_or(target.max(1));
    log::info!(
        "training {} utterances from step {} to {target} ({} generator parameters)",
        ds.len(),
        trainer.step,
        trainer.gen_store.num_elements()
    );
    let start = Instant::now();
    while trainer.step < target {
        let until = (trainer.step + chunk).min(target);
        let records = trainer.run(&ds, until, Some(&mut log))?;
        log.flush()?;
        trainer.save_checkpoint(&ckpt)?;
        if let Some(r) = records.last() {
            log::info!(
                "step {} stft {:.4} pm {:.2} guide {:.4} gan_g {:.4} gan_d {:.4} ({:.0}s)",
                r.step,
                r.losses.stft,
                r.losses.pm,
                r.losses.guide,
                r.losses.gan_g,
                r.losses.gan_d,
                start.elapsed().as_secs_f64()
            );
        }
    }
    trainer.save_checkpoint(&ckpt)?;
    println!("{}", ckpt.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let trainer = load_trainer(&a.checkpoint)?;
    let mode = parse_mode(&a.mode)?;
    trainer.check_inference_mode(mode).map_err(Failure::input)?;
    let steps = a.steps.unwrap_or(trainer.cfg.vocoder.iterations);
    check_steps(&trainer, steps)?;
    let c = a.source.load(&trainer.cfg)?;
    let (y, trace) = synthesize(&c, steps, mode, &trainer.model, &trainer.cfg.gain_config(), a.seed)?;
    write_wav(&a.out, &y)?;
    if let Some(dir) = &a.dump_trace {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut gains = Vec::with_capacity(trace.len());
        for (i, step) in trace.steps.iter().enumerate() {
            write_wav(dir.join(format!("{i:02}_t{}.wav", step.t)), &step.waveform)?;
            gains.push(serde_json::json!({ "t": step.t, "gain": step.gain }));
        }
        fs::write(dir.join("gains.json"), serde_json::to_string_pretty(&gains)?)?;
    }
    Ok(())
}

fn sample_prior(a: SamplePriorArgs) -> Result<(), Failure> {
    let trainer = load_trainer(&a.checkpoint)?;
    trainer.check_inference_mode(GainMode::Reference).map_err(Failure::input)?;
    let c = a.source.load(&trainer.cfg)?;
    let (y, sigma) = initial_noise(&c, GainMode::Reference, &trainer.model, a.seed)?;
    let sigma = sigma.ok_or_else(|| anyhow!("reference sampling produced no variance map"))?;
    write_wav(&a.out_wav, &y)?;
    let hop = trainer.cfg.dsp.sigma_stft.hop as f64;
    write_feature_file(&a.out_sigma, &sigma.to_feature(trainer.cfg.dsp.sample_rate as f64 / hop)?)?;
    Ok(())
}

fn wav_names(dir: &Path) -> Result<Vec<String>, Failure> {
    let entries = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))
        .map_err(Failure::input)?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".wav"))
        .collect();
    names.sort();
    Ok(names)
}

fn evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let cfg = a.config.load()?;
    let refs = wav_names(&a.ref_dir)?;
    let hyps = wav_names(&a.hyp_dir)?;
    for n in refs.iter().filter(|n| !hyps.contains(n)) {
        log::warn!("{n}: no hypothesis, skipped");
    }
    for n in hyps.iter().filter(|n| !refs.contains(n)) {
        log::warn!("{n}: no reference, skipped");
    }
    let paired: Vec<&String> = refs.iter().filter(|n| hyps.contains(n)).collect();
    if paired.is_empty() {
        return Err(Failure::empty(anyhow!(
            "no file names in common between {} and {}",
            a.ref_dir.display(),
            a.hyp_dir.display()
        )));
    }
    let mut utterances = Vec::with_capacity(paired.len());
    for name in paired {
        let x = read_wav(a.ref_dir.join(name))?;
        let y = read_wav(a.hyp_dir.join(name))?;
        let stem = name.rsplit_once('.').map_or(name.as_str(), |(s, _)| s);
        utterances.push(utterance_metrics(stem, &x, &y, &cfg.metrics)?);
    }
    let report = MetricReport::from_utterances(utterances)?;
    fs::write(&a.out, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn compare_iterations(a: CompareArgs) -> Result<(), Failure> {
    let trainer = load_trainer(&a.checkpoint)?;
    let steps = parse_steps(&a.steps)?;
    for &t in &steps {
        check_steps(&trainer, t)?;
    }
    let modes = a.modes.iter().map(|m| parse_mode(m)).collect::<Result<Vec<_>, _>>()?;
    for &m in &modes {
        trainer.check_inference_mode(m).map_err(Failure::input)?;
    }
    let ds = a.corpus.load(&trainer.cfg)?;
    let gain_cfg = trainer.cfg.gain_config();
    let mut out = csv::Writer::from_writer(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    out.write_record(["T", "mode", "mcd", "sc", "snr", "rtf"])?;
    for &mode in &modes {
        for &t in &steps {
            let (mut mcd, mut sc, mut snr, mut secs, mut audio) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in &ds.utterances {
                let start = Instant::now();
                let (y, _) = synthesize(&u.features, t, mode, &trainer.model, &gain_cfg, a.seed)?;
                secs += start.elapsed().as_secs_f64();
                audio += u.waveform.duration_secs();
                let m = utterance_metrics(&u.name, &u.waveform, &y, &trainer.cfg.metrics)?;
                mcd += m.mcd;
                sc += m.spectral_convergence;
                snr += m.snr;
            }
            let n = ds.len() as f64;
            let mode_name = match mode {
                GainMode::SelfGain => "self",
                GainMode::Reference => "reference",
            };
            out.write_record([
                t.to_string(),
                mode_name.to_string(),
                format!("{:.6}", mcd / n),
                format!("{:.6}", sc / n),
                format!("{:.6}", snr / n),
                format!("{:.6}", secs / audio),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

fn dump_config(a: ConfigArgs) -> Result<(), Failure> {
    let cfg = a.load()?;
    print!("{}", cfg.to_toml_string()?);
    Ok(())
}

