//! Command-line front end. Every run writes a `manifest.json` run record next
//! to its outputs; `--replay` re-executes a recorded run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::corpus::{
    read_corpus, write_corpus, write_image, MANIFEST as CORPUS_MANIFEST,
};
use crate::evaluation::{
    evaluate_pair, fmt_value, MetricsReport, MetricsRow, PhantomPair, PhantomSpec, CSV_HEADER,
};
use crate::image::{Image, Pgm};
use crate::numerics::{DType, Real};
use crate::pipeline::checkpoint::{sha256_hex, MANIFEST as CHECKPOINT_MANIFEST};
use crate::pipeline::{load_checkpoint, save_checkpoint, separate, Model, TrainConfig, Trainer};
use crate::texture::{lbp_map, texture_condition, texture_mask, TextureConfig, DEFAULT_TAU};

/// File name of the per-run record.
pub const RUN_MANIFEST: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "mscdt",
    version,
    about = "Dual-tracer PET separation on synthetic phantoms"
)]
pub struct Cli {
    /// Re-run the command recorded in a run manifest.
    #[arg(long, value_name = "MANIFEST")]
    pub replay: Option<PathBuf>,
    /// With --replay, write outputs here instead of the recorded location.
    #[arg(long, value_name = "PATH", requires = "replay")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic phantom corpus.
    Phantom(PhantomArgs),
    /// Train a model on a phantom corpus and write a checkpoint.
    Train(TrainArgs),
    /// Separate a dual-tracer image, or every phantom of a corpus.
    Separate(SeparateArgs),
    /// Score separated images against corpus ground truth.
    Evaluate(EvaluateArgs),
    /// Write LBP codes, texture mask and masked texture of an image.
    Lbp(LbpArgs),
    /// Separate and evaluate a corpus at several texture thresholds.
    SweepTau(SweepArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PhantomArgs {
    /// JSON phantom spec; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus seed; phantom i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of phantoms.
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    /// Image side length.
    #[arg(long)]
    pub size: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// JSON training config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus directory written by `phantom`.
    #[arg(long)]
    pub data: PathBuf,
    /// Number of optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Seed for initialization and training noise.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Arithmetic precision: f32 or f64.
    #[arg(long)]
    pub precision: Option<DType>,
    /// Worker threads for the per-sample batch; gradients are reduced in a
    /// fixed order, so results do not depend on this.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Phantoms per step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Print losses every this many steps (0 disables).
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SeparateArgs {
    /// JSON texture config (`tau`, `alpha`); defaults to the checkpoint's.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dual image (`.tsr` or `.pgm`) or a corpus directory.
    #[arg(long)]
    pub input: PathBuf,
    /// Seed of the starting noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fusion weight of the separated image.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Texture mask threshold.
    #[arg(long)]
    pub tau: Option<u8>,
    /// Arithmetic precision; defaults to the checkpoint's.
    #[arg(long)]
    pub precision: Option<DType>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    /// Directory of predictions, laid out like the truth corpus.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth corpus directory.
    #[arg(long)]
    pub truth: PathBuf,
    /// Directory holding region masks; defaults to the truth corpus.
    #[arg(long)]
    pub regions: Option<PathBuf>,
    /// Prediction file prefix: `fused`, `raw`, or `single` for ground truth.
    #[arg(long, default_value = "fused")]
    pub which: String,
    /// Metrics CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct LbpArgs {
    /// Image (`.tsr` or `.pgm`).
    #[arg(long)]
    pub input: PathBuf,
    /// Texture mask threshold.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: u8,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Corpus directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated thresholds.
    #[arg(long, value_delimiter = ',', default_value = "120,150,180,200")]
    pub taus: Vec<u8>,
    /// Seed of the starting noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fusion weight; defaults to the checkpoint's.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Score `fused` or `raw` outputs.
    #[arg(long, default_value = "fused")]
    pub which: String,
    /// Arithmetic precision; defaults to the checkpoint's.
    #[arg(long)]
    pub precision: Option<DType>,
    /// Worker threads across corpus items.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Also write per-phantom rows, prefixed by tau, to this CSV.
    #[arg(long)]
    pub rows: Option<PathBuf>,
    /// Summary CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

/// Record of one run, enough to replay it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub args: Command,
    /// Fully resolved configuration.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_clock_s: f64,
    /// SHA-256 of the checkpoint manifest, which pins every blob.
    pub checkpoint_sha256: Option<String>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

/// Parses `argv` (program name first), runs, and returns the exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run_cli(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn run_cli(cli: Cli) -> Result<(), CliError> {
    let command = match (cli.replay, cli.command) {
        (Some(_), Some(_)) => return Err(CliError::Usage("--replay takes no subcommand".into())),
        (None, None) => return Err(CliError::Usage("missing subcommand (see --help)".into())),
        (None, Some(c)) => c,
        (Some(path), None) => {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let manifest: RunManifest = serde_json::from_str(&text).map_err(Error::from)?;
            let mut c = manifest.args;
            if let Some(out) = cli.out {
                set_out(&mut c, out);
            }
            c
        }
    };
    execute(&command)
}

fn set_out(c: &mut Command, out: PathBuf) {
    match c {
        Command::Phantom(a) => a.out = out,
        Command::Train(a) => a.out = out,
        Command::Separate(a) => a.out = out,
        Command::Evaluate(a) => a.out = out,
        Command::Lbp(a) => a.out = out,
        Command::SweepTau(a) => a.out = out,
    }
}

/// Runs one command and writes its run manifest.
pub fn execute(command: &Command) -> Result<(), CliError> {
    let start = Instant::now();
    let mut run = match command {
        Command::Phantom(a) => run_phantom(a)?,
        Command::Train(a) => run_train(a)?,
        Command::Separate(a) => run_separate(a)?,
        Command::Evaluate(a) => run_evaluate(a)?,
        Command::Lbp(a) => run_lbp(a)?,
        Command::SweepTau(a) => run_sweep(a)?,
    };
    let manifest = RunManifest {
        command: command_name(command).to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        args: command.clone(),
        config: run.config.take().unwrap_or(serde_json::Value::Null),
        seed: run.seed,
        inputs: run.inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: run
            .outputs
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
        wall_clock_s: start.elapsed().as_secs_f64(),
        checkpoint_sha256: run.checkpoint_sha256,
    };
    let path = run.manifest_dir.join(RUN_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(Error::from)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Phantom(_) => "phantom",
        Command::Train(_) => "train",
        Command::Separate(_) => "separate",
        Command::Evaluate(_) => "evaluate",
        Command::Lbp(_) => "lbp",
        Command::SweepTau(_) => "sweep-tau",
    }
}

#[derive(Debug, Default)]
struct RunRecord {
    config: Option<serde_json::Value>,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    checkpoint_sha256: Option<String>,
    manifest_dir: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Directory that holds the run manifest of a file output.
fn parent_dir(path: &Path) -> Result<PathBuf> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    create_dir(&dir)?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

fn run_phantom(a: &PhantomArgs) -> Result<RunRecord, CliError> {
    let mut spec: PhantomSpec = match &a.config {
        Some(p) => read_json(p)?,
        None => PhantomSpec::default(),
    };
    if let Some(size) = a.size {
        spec.size = size;
    }
    spec.validate()?;
    if a.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let manifest = write_corpus(&a.out, a.seed, a.count, &spec)?;
    let mut outputs = vec![a.out.join(CORPUS_MANIFEST)];
    outputs.extend(manifest.items.iter().map(|i| a.out.join(&i.id)));
    Ok(RunRecord {
        config: Some(to_value(&spec)?),
        seed: Some(a.seed),
        inputs: a.config.iter().cloned().collect(),
        outputs,
        manifest_dir: a.out.clone(),
        ..Default::default()
    })
}

fn corpus_pairs(dir: &Path, regions: Option<&Path>) -> Result<Vec<(String, PhantomPair)>> {
    let pairs = read_corpus(dir, regions)?;
    if pairs.is_empty() {
        return Err(Error::Config(format!("corpus {} is empty", dir.display())));
    }
    Ok(pairs)
}

fn run_train(a: &TrainArgs) -> Result<RunRecord, CliError> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.precision {
        cfg.precision = v;
    }
    if let Some(v) = a.threads {
        cfg.threads = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.adam.lr = v;
    }
    cfg.validate()?;
    let data: Vec<PhantomPair> = corpus_pairs(&a.data, None)?
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    create_dir(&a.out)?;
    match cfg.precision {
        DType::F32 => train_typed::<f32>(&cfg, &data, a)?,
        DType::F64 => train_typed::<f64>(&cfg, &data, a)?,
    }
    let ckpt = std::fs::read(a.out.join(CHECKPOINT_MANIFEST)).map_err(|e| Error::io(&a.out, e))?;
    Ok(RunRecord {
        config: Some(to_value(&cfg)?),
        seed: Some(cfg.seed),
        inputs: std::iter::once(a.data.clone())
            .chain(a.config.iter().cloned())
            .collect(),
        outputs: vec![a.out.join(CHECKPOINT_MANIFEST), a.out.join("losses.csv")],
        checkpoint_sha256: Some(sha256_hex(&ckpt)),
        manifest_dir: a.out.clone(),
    })
}

fn train_typed<T: Real>(cfg: &TrainConfig, data: &[PhantomPair], a: &TrainArgs) -> Result<()> {
    let mut trainer = Trainer::<T>::new(cfg)?;
    let mut csv = String::from("step,total,dm,tm\n");
    let every = a.log_every;
    trainer.run(data, |l| {
        let _ = writeln!(csv, "{},{},{},{}", l.step, l.total, l.dm, l.tm);
        if every > 0 && (l.step % every == 0 || l.step + 1 == cfg.steps) {
            eprintln!(
                "step {} total {:.6} dm {:.6} tm {:.6}",
                l.step, l.total, l.dm, l.tm
            );
        }
    })?;
    save_checkpoint(&trainer, &a.out)?;
    write_text(&a.out.join("losses.csv"), &csv)
}

/// Loads the checkpoint manifest hash and its dtype.
fn checkpoint_info(dir: &Path) -> Result<(String, TrainConfig, DType)> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = crate::pipeline::checkpoint::read_manifest(dir)?;
    Ok((sha256_hex(&bytes), manifest.train, manifest.dtype))
}

fn write_separation<T: Real>(
    dir: &Path,
    model: &Model<T>,
    dual: &Image,
    tex: &TextureConfig,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let s = separate(dual, model, tex, seed)?;
    let mut outputs = Vec::new();
    for (k, (fused, raw)) in s.fused.iter().zip(&s.raw).enumerate() {
        write_image(dir, &format!("fused_{k}"), fused)?;
        write_image(dir, &format!("raw_{k}"), raw)?;
        outputs.push(dir.join(format!("fused_{k}.tsr")));
        outputs.push(dir.join(format!("raw_{k}.tsr")));
    }
    let prior = dir.join("prior.tsr");
    crate::numerics::tsr::save(&prior, s.prior.values()).map_err(Error::from)?;
    outputs.push(prior);
    Ok(outputs)
}

fn resolve_texture(
    config: Option<&Path>,
    base: TextureConfig,
    tau: Option<u8>,
    alpha: Option<f64>,
) -> Result<TextureConfig> {
    let mut tex = match config {
        Some(p) => read_json(p)?,
        None => base,
    };
    if let Some(t) = tau {
        tex.tau = t;
    }
    if let Some(al) = alpha {
        tex.alpha = al;
    }
    tex.validate()?;
    Ok(tex)
}

fn run_separate(a: &SeparateArgs) -> Result<RunRecord, CliError> {
    let (hash, train, dtype) = checkpoint_info(&a.ckpt)?;
    let tex = resolve_texture(a.config.as_deref(), train.model.texture, a.tau, a.alpha)?;
    let outputs = match a.precision.unwrap_or(dtype) {
        DType::F32 => separate_typed::<f32>(a, &tex)?,
        DType::F64 => separate_typed::<f64>(a, &tex)?,
    };
    Ok(RunRecord {
        config: Some(to_value(&tex)?),
        seed: Some(a.seed),
        inputs: vec![a.ckpt.clone(), a.input.clone()],
        outputs,
        checkpoint_sha256: Some(hash),
        manifest_dir: a.out.clone(),
    })
}

fn separate_typed<T: Real>(a: &SeparateArgs, tex: &TextureConfig) -> Result<Vec<PathBuf>> {
    let model = load_checkpoint::<T>(&a.ckpt)?.model;
    create_dir(&a.out)?;
    if a.input.join(CORPUS_MANIFEST).is_file() {
        let mut outputs = Vec::new();
        for (id, pair) in corpus_pairs(&a.input, None)? {
            outputs.extend(write_separation(
                &a.out.join(&id),
                &model,
                &pair.dual,
                tex,
                a.seed,
            )?);
        }
        Ok(outputs)
    } else {
        let dual = Image::load(&a.input)?;
        write_separation(&a.out, &model, &dual, tex, a.seed)
    }
}

fn load_predictions(dir: &Path, which: &str, n: usize) -> Result<Vec<Image>> {
    (0..n)
        .map(|k| Image::load_tsr(dir.join(format!("{which}_{k}.tsr"))))
        .collect()
}

fn run_evaluate(a: &EvaluateArgs) -> Result<RunRecord, CliError> {
    let truth = corpus_pairs(&a.truth, a.regions.as_deref())?;
    let mut report = MetricsReport::default();
    for (id, pair) in &truth {
        let preds = load_predictions(&a.pred.join(id), &a.which, pair.singles.len())?;
        report.extend(evaluate_pair(id, &preds, pair)?);
    }
    let dir = parent_dir(&a.out)?;
    report.write_csv(&a.out)?;
    if let Some(m) = report.means(None) {
        println!(
            "mean psnr_db {} ssim {} nrmse {}",
            fmt_value(m.psnr_db),
            fmt_value(m.ssim),
            fmt_value(m.nrmse)
        );
    }
    let mut inputs = vec![a.pred.clone(), a.truth.clone()];
    inputs.extend(a.regions.iter().cloned());
    Ok(RunRecord {
        config: Some(serde_json::json!({ "which": a.which })),
        inputs,
        outputs: vec![a.out.clone()],
        manifest_dir: dir,
        ..Default::default()
    })
}

fn run_lbp(a: &LbpArgs) -> Result<RunRecord, CliError> {
    let image = Image::load(&a.input)?;
    let lbp = lbp_map(&image)?;
    let mask = texture_mask(&lbp, a.tau);
    let (_, masked) = texture_condition(&image, a.tau)?;
    create_dir(&a.out)?;
    Pgm::from_u8(lbp.height, lbp.width, &lbp.codes).write(a.out.join("lbp.pgm"))?;
    let bits: Vec<u8> = mask.bits.iter().map(|&b| b * 255).collect();
    Pgm::from_u8(mask.height, mask.width, &bits).write(a.out.join("mask.pgm"))?;
    write_image(&a.out, "masked", &masked)?;
    println!("mask density {}", mask.density());
    Ok(RunRecord {
        config: Some(serde_json::json!({ "tau": a.tau })),
        inputs: vec![a.input.clone()],
        outputs: ["lbp.pgm", "mask.pgm", "masked.tsr", "masked.pgm"]
            .iter()
            .map(|f| a.out.join(f))
            .collect(),
        manifest_dir: a.out.clone(),
        ..Default::default()
    })
}

/// Header of the sweep summary CSV.
pub const SWEEP_HEADER: &str = "tau,psnr_db,ssim,nrmse,mask_density";

/// Separates and scores every corpus item at one threshold. Returns the rows
/// and the mean texture-mask density of the dual images.
pub fn sweep_point<T: Real>(
    model: &Model<T>,
    corpus: &[(String, PhantomPair)],
    tex: &TextureConfig,
    seed: u64,
    which: &str,
    threads: usize,
) -> Result<(Vec<MetricsRow>, f64)> {
    let score = |(id, pair): &(String, PhantomPair)| -> Result<(Vec<MetricsRow>, f64)> {
        let s = separate(&pair.dual, model, tex, seed)?;
        let preds = match which {
            "fused" => s.fused,
            "raw" => s.raw,
            other => {
                return Err(Error::Config(format!(
                    "unknown output `{other}` (expected fused or raw)"
                )))
            }
        };
        let density = texture_mask(&lbp_map(&pair.dual)?, tex.tau).density();
        Ok((evaluate_pair(id, &preds, pair)?, density))
    };
    let parts: Vec<Result<(Vec<MetricsRow>, f64)>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| corpus.par_iter().map(score).collect())
    } else {
        corpus.iter().map(score).collect()
    };
    let mut rows = Vec::new();
    let mut density = 0.0;
    for p in parts {
        let (r, d) = p?;
        rows.extend(r);
        density += d;
    }
    Ok((rows, density / corpus.len() as f64))
}

fn run_sweep(a: &SweepArgs) -> Result<RunRecord, CliError> {
    if a.taus.is_empty() {
        return Err(CliError::Usage("--taus needs at least one value".into()));
    }
    if a.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let (hash, train, dtype) = checkpoint_info(&a.ckpt)?;
    let base = resolve_texture(None, train.model.texture, None, a.alpha)?;
    let corpus = corpus_pairs(&a.data, None)?;
    let (summary, rows) = match a.precision.unwrap_or(dtype) {
        DType::F32 => sweep_typed::<f32>(a, &base, &corpus)?,
        DType::F64 => sweep_typed::<f64>(a, &base, &corpus)?,
    };
    let dir = parent_dir(&a.out)?;
    write_text(&a.out, &summary)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(path) = &a.rows {
        parent_dir(path)?;
        write_text(path, &rows)?;
        outputs.push(path.clone());
    }
    print!("{summary}");
    Ok(RunRecord {
        config: Some(serde_json::json!({ "alpha": base.alpha, "taus": a.taus, "which": a.which })),
        seed: Some(a.seed),
        inputs: vec![a.ckpt.clone(), a.data.clone()],
        outputs,
        checkpoint_sha256: Some(hash),
        manifest_dir: dir,
    })
}

fn sweep_typed<T: Real>(
    a: &SweepArgs,
    base: &TextureConfig,
    corpus: &[(String, PhantomPair)],
) -> Result<(String, String)> {
    let model = load_checkpoint::<T>(&a.ckpt)?.model;
    let mut summary = format!("{SWEEP_HEADER}\n");
    let mut detail = format!("tau,{CSV_HEADER}\n");
    for &tau in &a.taus {
        let tex = TextureConfig { tau, ..*base };
        let (rows, density) = sweep_point(&model, corpus, &tex, a.seed, &a.which, a.threads)?;
        let report = MetricsReport { rows };
        let m = report.means(None).expect("non-empty corpus");
        let _ = writeln!(
            summary,
            "{tau},{},{},{},{}",
            fmt_value(m.psnr_db),
            fmt_value(m.ssim),
            fmt_value(m.nrmse),
            fmt_value(density)
        );
        for line in report.to_csv().lines().skip(1) {
            let _ = writeln!(detail, "{tau},{line}");
        }
    }
    Ok((summary, detail))
}
