//! Command-line driver: dataset synthesis and packing, pre-training,
//! generation, inpainting, and evaluation, all from one binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
//! Every flag has a `key=value` config-file equivalent (`--config`), CLI
//! flags override file values, and `SORCEN_SEED` overrides any seed.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use sorcen::autodiff::{Dtype, Scalar};
use sorcen::data::{
    generate_synthetic_range, read_dataset, write_dataset, DatasetReader, SyntheticSpec,
    TokenSequence,
};
use sorcen::evaluation::{
    extract_features, feature_cache_key, few_shot_eval, knn_eval, linear_probe,
    load_cached_features, store_cached_features, token_frechet_distance, ProbeConfig,
};
use sorcen::generation::{generate_unconditional, inpaint, render_png, DecodeConfig, VisibleSpec};
use sorcen::model::{checkpoint_dtype, read_checkpoint, Model, NetworkConfig};
use sorcen::objectives::LossConfig;
use sorcen::training::{
    apply_loss_kv, loss_to_kv, parse_kv, run_training, RunPaths, StageTimes, TrainConfig, Trainer,
};
use sorcen::SorcenError;

mod netcfg;

use netcfg::{apply_net_kv, net_to_kv};

#[derive(Parser)]
#[command(name = "sorcen", version, about = "unified token SSL: train, generate, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic token dataset
    Synth(SynthArgs),
    /// Pack token sequences from text into a .stok file
    Pack(PackArgs),
    /// Print the header and layout of a .stok file
    Inspect(InspectArgs),
    /// Pre-train on a token dataset
    Train(TrainArgs),
    /// Unconditional iterative generation from a checkpoint
    Generate(GenerateArgs),
    /// Fill the masked complement of a visible region
    Inpaint(InpaintArgs),
    /// Linear-probe accuracy of frozen features
    Probe(ProbeArgs),
    /// k-NN accuracy over pooled features
    Knn(KnnArgs),
    /// Few-shot probe accuracy, averaged over seeds
    Fewshot(FewshotArgs),
    /// Token-space Fréchet distance between two datasets
    Tfd(TfdArgs),
    /// Per-stage timing of the training step
    Bench(BenchArgs),
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Lib(SorcenError),
}

impl From<SorcenError> for CliError {
    fn from(e: SorcenError) -> Self {
        CliError::Lib(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

fn exit_code(e: &CliError) -> i32 {
    match e {
        CliError::Usage(_) => 1,
        CliError::Lib(SorcenError::NonFinite { .. }) => 3,
        CliError::Lib(_) => 2,
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            std::process::exit(if is_help { 0 } else { 1 });
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Pack(a) => cmd_pack(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Inpaint(a) => cmd_inpaint(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Knn(a) => cmd_knn(a),
        Command::Fewshot(a) => cmd_fewshot(a),
        Command::Tfd(a) => cmd_tfd(a),
        Command::Bench(a) => cmd_bench(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

// ---- config overlay ------------------------------------------------------

/// `key=value` pairs from a config file, queried as flags' fallbacks.
struct KvMap {
    pairs: Vec<(String, String)>,
}

impl KvMap {
    fn load(path: Option<&PathBuf>) -> CliResult<Self> {
        let pairs = match path {
            None => Vec::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                parse_kv(&text).map_err(|e| CliError::Usage(e.to_string()))?
            }
        };
        Ok(KvMap { pairs })
    }

    fn get(&self, key: &str) -> Option<&str> {
        // last occurrence wins, like flag repetition
        self.pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> CliResult<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("bad value {v:?} for config key {key:?}"))),
        }
    }
}

/// Resolution order: env (seeds only) > CLI flag > config file > default.
fn resolve<T: Clone + std::str::FromStr>(
    flag: Option<T>,
    kv: &KvMap,
    key: &str,
    default: T,
) -> CliResult<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    Ok(kv.parse(key)?.unwrap_or(default))
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var("SORCEN_SEED") {
        Err(_) => Ok(None),
        Ok(v) => v
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("SORCEN_SEED must be an integer, got {v:?}"))),
    }
}

fn resolve_seed(flag: Option<u64>, kv: &KvMap, default: u64) -> CliResult<u64> {
    if let Some(s) = env_seed()? {
        return Ok(s);
    }
    resolve(flag, kv, "seed", default)
}

fn print_kv_block(title: &str, text: &str) {
    println!("{title}:");
    for line in text.lines() {
        println!("  {line}");
    }
}

// ---- synth ---------------------------------------------------------------

#[derive(Args)]
struct SynthArgs {
    /// Config file with key=value fallbacks for these flags
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    classes: Option<u32>,
    /// Prototype grids per class
    #[arg(long)]
    prototypes: Option<u32>,
    /// Grid side; sequence length is its square
    #[arg(long)]
    grid: Option<u32>,
    #[arg(long)]
    vocab: Option<u32>,
    /// Sample count
    #[arg(long)]
    n: Option<usize>,
    /// Index of the first sample in the spec's stream (use disjoint
    /// offsets with one seed for train/test splits)
    #[arg(long)]
    offset: Option<usize>,
    /// Per-token corruption probability
    #[arg(long)]
    rho: Option<f64>,
    /// Apply a random toroidal shift per sample
    #[arg(long)]
    shift: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    let kv = KvMap::load(a.config.as_ref())?;
    let spec = SyntheticSpec {
        class_count: resolve(a.classes, &kv, "classes", 8)?,
        prototypes_per_class: resolve(a.prototypes, &kv, "prototypes", 4)?,
        grid: resolve(a.grid, &kv, "grid", 16)?,
        vocab: resolve(a.vocab, &kv, "vocab", 1024)?,
        corruption: resolve(a.rho, &kv, "rho", 0.2)?,
        background: None,
        toroidal_shift: resolve(a.shift, &kv, "shift", true)?,
        seed: resolve_seed(a.seed, &kv, 0)?,
    };
    let n = resolve(a.n, &kv, "n", 4096)?;
    let offset = resolve(a.offset, &kv, "offset", 0)?;
    let out = a
        .out
        .or(kv.get("out").map(PathBuf::from))
        .ok_or_else(|| CliError::Usage("synth: --out is required".into()))?;
    println!(
        "resolved synth config:\n  classes={}\n  prototypes={}\n  grid={}\n  vocab={}\n  n={n}\n  offset={offset}\n  rho={}\n  shift={}\n  seed={}\n  out={}",
        spec.class_count,
        spec.prototypes_per_class,
        spec.grid,
        spec.vocab,
        spec.corruption,
        spec.toroidal_shift,
        spec.seed,
        out.display()
    );
    let (records, labels) = generate_synthetic_range(&spec, offset, n)?;
    let header = write_dataset(&out, spec.vocab, spec.grid * spec.grid, &records, Some(&labels))?;
    println!(
        "wrote {} records ({} bytes) to {}",
        header.count,
        header.file_bytes(),
        out.display()
    );
    Ok(())
}

// ---- pack ----------------------------------------------------------------

#[derive(Args)]
struct PackArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Text file: one sequence per line, ids separated by spaces or commas
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<u32>,
    #[arg(long)]
    seq_len: Option<u32>,
    /// Optional label file: one integer per line, same line count
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_pack(a: PackArgs) -> CliResult<()> {
    let kv = KvMap::load(a.config.as_ref())?;
    let input = a
        .input
        .or(kv.get("input").map(PathBuf::from))
        .ok_or_else(|| CliError::Usage("pack: --input is required".into()))?;
    let out = a
        .out
        .or(kv.get("out").map(PathBuf::from))
        .ok_or_else(|| CliError::Usage("pack: --out is required".into()))?;
    let vocab = resolve(a.vocab, &kv, "vocab", 1024)?;
    let labels_path = a.labels.or(kv.get("labels").map(PathBuf::from));
    let text = std::fs::read_to_string(&input)
        .map_err(|e| SorcenError::io(input.display().to_string(), e))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let ids: Result<Vec<u32>, _> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<u32>())
            .collect();
        let ids = ids.map_err(|_| {
            CliError::Lib(SorcenError::invalid(format!(
                "{}:{}: token ids must be integers",
                input.display(),
                lineno + 1
            )))
        })?;
        records.push(TokenSequence::new(ids, vocab)?);
    }
    if records.is_empty() {
        return Err(CliError::Lib(SorcenError::invalid("pack: no sequences in input")));
    }
    let seq_len = resolve(a.seq_len, &kv, "seq_len", records[0].len() as u32)?;
    let labels = match labels_path {
        None => None,
        Some(p) => {
            let text = std::fs::read_to_string(&p)
                .map_err(|e| SorcenError::io(p.display().to_string(), e))?;
            let parsed: Result<Vec<u32>, _> =
                text.lines().filter(|l| !l.trim().is_empty()).map(|l| l.trim().parse()).collect();
            Some(parsed.map_err(|_| {
                CliError::Lib(SorcenError::invalid(format!(
                    "{}: labels must be integers",
                    p.display()
                )))
            })?)
        }
    };
    println!(
        "resolved pack config:\n  input={}\n  vocab={vocab}\n  seq_len={seq_len}\n  records={}\n  labeled={}\n  out={}",
        input.display(),
        records.len(),
        labels.is_some(),
        out.display()
    );
    let header = write_dataset(&out, vocab, seq_len, &records, labels.as_deref())?;
    println!("wrote {} records ({} bytes) to {}", header.count, header.file_bytes(), out.display());
    Ok(())
}

// ---- inspect ---------------------------------------------------------------

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    data: PathBuf,
}

fn cmd_inspect(a: InspectArgs) -> CliResult<()> {
    let reader = DatasetReader::open(&a.data)?;
    let h = reader.header();
    let actual = std::fs::metadata(&a.data)
        .map_err(|e| SorcenError::io(a.data.display().to_string(), e))?
        .len();
    println!("file: {}", a.data.display());
    println!("magic: STOK");
    println!("version: {}", h.version);
    println!("vocab: {}", h.vocab);
    println!("seq_len: {}", h.seq_len);
    println!("count: {}", h.count);
    println!("labeled: {}", h.labeled);
    println!("bits_per_token: {}", sorcen::data::bits_per_token(h.vocab));
    println!("payload_bytes_per_record: {}", h.payload_bytes());
    println!("file_bytes: {actual}");
    Ok(())
}

// ---- train -----------------------------------------------------------------

#[derive(Args, Clone)]
struct ModelFlags {
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    enc_depth: Option<usize>,
    #[arg(long)]
    dec_depth: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    mlp_ratio: Option<usize>,
    #[arg(long)]
    projector_width: Option<usize>,
    #[arg(long)]
    projector_depth: Option<usize>,
    #[arg(long)]
    predictor_depth: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// none | encoder | decoder | both
    #[arg(long)]
    dropout_site: Option<String>,
}

impl ModelFlags {
    fn as_kv(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        macro_rules! push {
            ($field:ident) => {
                if let Some(v) = &self.$field {
                    out.push((stringify!($field).to_string(), v.to_string()));
                }
            };
        }
        push!(embed_dim);
        push!(enc_depth);
        push!(dec_depth);
        push!(heads);
        push!(mlp_ratio);
        push!(projector_width);
        push!(projector_depth);
        push!(predictor_depth);
        push!(dropout);
        push!(dropout_site);
        out
    }
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lr_warmup_epochs: Option<u64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    ema_base: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    mask_mean: Option<f64>,
    #[arg(long)]
    mask_std: Option<f64>,
    #[arg(long)]
    mask_min: Option<f64>,
    #[arg(long)]
    mask_max: Option<f64>,
    /// f32 | f64
    #[arg(long)]
    precision: Option<String>,
    /// Contrastive weight
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Echo candidates come from logit ranks 2..=K
    #[arg(long, value_name = "K")]
    k: Option<usize>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    echo_warmup_epochs: Option<u64>,
    /// infonce | l2
    #[arg(long)]
    loss_variant: Option<String>,
    #[arg(long)]
    uniformity: Option<bool>,
    #[arg(long)]
    predictor: Option<bool>,
    #[arg(long)]
    echo: Option<bool>,
    #[arg(long)]
    jsm: Option<bool>,
}

impl TrainFlags {
    fn as_kv(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        macro_rules! push {
            ($field:ident) => {
                if let Some(v) = &self.$field {
                    out.push((stringify!($field).to_string(), v.to_string()));
                }
            };
            ($field:ident as $key:literal) => {
                if let Some(v) = &self.$field {
                    out.push(($key.to_string(), v.to_string()));
                }
            };
        }
        push!(epochs);
        push!(batch_size);
        push!(base_lr);
        push!(beta1);
        push!(beta2);
        push!(weight_decay);
        push!(lr_warmup_epochs);
        push!(grad_clip);
        push!(ema_base);
        push!(seed);
        push!(checkpoint_every);
        push!(mask_mean);
        push!(mask_std);
        push!(mask_min);
        push!(mask_max);
        push!(precision);
        push!(lambda);
        push!(temperature);
        push!(k as "top_k");
        push!(label_smoothing);
        push!(echo_warmup_epochs);
        push!(loss_variant);
        push!(uniformity);
        push!(predictor);
        push!(echo);
        push!(jsm);
        out
    }
}

/// Resolved training setup: defaults, then config file, then CLI flags.
struct ResolvedTrain {
    train: TrainConfig,
    loss: LossConfig,
    net: NetworkConfig,
}

fn resolve_train_setup(
    config: Option<&PathBuf>,
    train_flags: &TrainFlags,
    model_flags: &ModelFlags,
    vocab: u32,
    seq_len: usize,
) -> CliResult<ResolvedTrain> {
    let kv = KvMap::load(config)?;
    let mut train = TrainConfig::default();
    let mut loss = LossConfig::default();
    let mut net = NetworkConfig { vocab, seq_len, ..NetworkConfig::default() };
    let mut seen: Vec<String> = Vec::new();
    let apply = |train: &mut TrainConfig,
                     loss: &mut LossConfig,
                     net: &mut NetworkConfig,
                     seen: &mut Vec<String>,
                     key: &str,
                     value: &str|
     -> CliResult<()> {
        if key == "vocab" || key == "seq_len" {
            return Err(CliError::Usage(format!(
                "{key} comes from the dataset header and cannot be set"
            )));
        }
        let applied = train.apply_kv(key, value).is_ok()
            || apply_loss_kv(loss, key, value).is_ok()
            || apply_net_kv(net, key, value).is_ok();
        if !applied {
            return Err(CliError::Usage(format!("unknown config key {key:?}")));
        }
        seen.push(key.to_string());
        Ok(())
    };
    for (k, v) in &kv.pairs {
        apply(&mut train, &mut loss, &mut net, &mut seen, k, v)?;
    }
    for (k, v) in train_flags.as_kv().iter().chain(model_flags.as_kv().iter()) {
        apply(&mut train, &mut loss, &mut net, &mut seen, k, v)?;
    }
    if let Some(seed) = env_seed()? {
        train.seed = seed;
    }
    // warmups scale pro-rata with shortened schedules unless pinned
    if !seen.iter().any(|k| k == "lr_warmup_epochs") {
        train.lr_warmup_epochs = ((train.epochs as f64 * 0.025).round() as u64).max(1);
    }
    if !seen.iter().any(|k| k == "echo_warmup_epochs") {
        loss.echo_warmup_epochs = TrainConfig::default_echo_warmup(train.epochs);
    }
    train.validate()?;
    loss.validate(vocab)?;
    net.validate()?;
    Ok(ResolvedTrain { train, loss, net })
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset (.stok)
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV path (default: <out>.metrics.csv)
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Resume from an existing checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    train_flags: TrainFlags,
    #[command(flatten)]
    model_flags: ModelFlags,
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let (header, records, _labels) = read_dataset(&a.data)?;
    let setup = resolve_train_setup(
        a.config.as_ref(),
        &a.train_flags,
        &a.model_flags,
        header.vocab,
        header.seq_len as usize,
    )?;
    let metrics = a.metrics.clone().unwrap_or_else(|| a.out.with_extension("metrics.csv"));
    let paths = RunPaths { checkpoint: a.out.clone(), metrics };
    print_kv_block("resolved train config", &setup.train.to_kv());
    print_kv_block("resolved loss config", &loss_to_kv(&setup.loss));
    print_kv_block("resolved network config", &net_to_kv(&setup.net));
    println!(
        "dataset: {} records, vocab {}, seq_len {}",
        records.len(),
        header.vocab,
        header.seq_len
    );

    match setup.train.precision.as_str() {
        "f64" => train_run::<f64>(&setup, &records, &paths, a.resume.as_deref()),
        _ => train_run::<f32>(&setup, &records, &paths, a.resume.as_deref()),
    }
}

fn train_run<T: Scalar>(
    setup: &ResolvedTrain,
    records: &[TokenSequence],
    paths: &RunPaths,
    resume: Option<&Path>,
) -> CliResult<()> {
    let mut trainer = match resume {
        Some(ckpt) => Trainer::<T>::from_checkpoint(ckpt, records.len())?,
        None => {
            let mut rng = sorcen::rng::Prng::seeded(setup.train.seed);
            let model = Model::<T>::init(setup.net.clone(), &mut rng)?;
            Trainer::new(model, setup.train.clone(), setup.loss.clone(), records.len())?
        }
    };
    let summary = run_training(&mut trainer, records, paths)?;
    println!(
        "trained {} steps in {:.1}s (final loss {:.5})",
        summary.steps_run, summary.wall_s, summary.final_total
    );
    println!("checkpoint: {}", paths.checkpoint.display());
    println!("metrics: {}", paths.metrics.display());
    Ok(())
}

// ---- checkpoint-driven helpers ---------------------------------------------

/// Extract pooled features in the checkpoint's own precision.
fn features_for(
    ckpt: &Path,
    dataset: &Path,
    cache_dir: Option<&PathBuf>,
) -> CliResult<(sorcen::ndarray::Array2<f64>, Vec<u32>)> {
    let (header, records, labels) = read_dataset(dataset)?;
    let labels = labels.unwrap_or_default();
    if let Some(dir) = cache_dir {
        let key = feature_cache_key(ckpt, dataset)?;
        if let Some(cached) = load_cached_features(dir, &key)? {
            return Ok((cached, labels));
        }
    }
    let features = match checkpoint_dtype(ckpt)? {
        Dtype::F32 => {
            let data = read_checkpoint::<f32>(ckpt)?;
            let model = Model { cfg: data.cfg, student: data.student, teacher: data.teacher };
            check_dataset(&model.cfg, header.vocab, header.seq_len as usize)?;
            extract_features(&model, &records, 256)?
        }
        Dtype::F64 => {
            let data = read_checkpoint::<f64>(ckpt)?;
            let model = Model { cfg: data.cfg, student: data.student, teacher: data.teacher };
            check_dataset(&model.cfg, header.vocab, header.seq_len as usize)?;
            extract_features(&model, &records, 256)?
        }
    };
    if let Some(dir) = cache_dir {
        let key = feature_cache_key(ckpt, dataset)?;
        store_cached_features(dir, &key, &features)?;
    }
    Ok((features, labels))
}

fn check_dataset(cfg: &NetworkConfig, vocab: u32, seq_len: usize) -> Result<(), SorcenError> {
    if cfg.vocab != vocab {
        return Err(SorcenError::VocabMismatch { dataset: vocab, model: cfg.vocab });
    }
    if cfg.seq_len != seq_len {
        return Err(SorcenError::invalid(format!(
            "dataset seq_len {seq_len} does not match model seq_len {}",
            cfg.seq_len
        )));
    }
    Ok(())
}

fn write_metric_csv(path: Option<&PathBuf>, rows: &[(String, f64)]) -> CliResult<()> {
    if let Some(p) = path {
        let mut text = String::from("metric,value\n");
        for (k, v) in rows {
            text.push_str(&format!("{k},{v}\n"));
        }
        std::fs::write(p, text).map_err(|e| SorcenError::io(p.display().to_string(), e))?;
    }
    Ok(())
}

// ---- generate ----------------------------------------------------------------

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    temp_start: Option<f64>,
    #[arg(long)]
    temp_end: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also render the first few grids as PNGs into this directory
    #[arg(long)]
    png_dir: Option<PathBuf>,
    #[arg(long)]
    png_count: Option<usize>,
    #[arg(long)]
    png_scale: Option<usize>,
}

fn decode_config(
    kv: &KvMap,
    steps: Option<usize>,
    temp_start: Option<f64>,
    temp_end: Option<f64>,
    seed: Option<u64>,
) -> CliResult<DecodeConfig> {
    let d = DecodeConfig::default();
    Ok(DecodeConfig {
        steps: resolve(steps, kv, "steps", d.steps)?,
        temp_start: resolve(temp_start, kv, "temp_start", d.temp_start)?,
        temp_end: resolve(temp_end, kv, "temp_end", d.temp_end)?,
        seed: resolve_seed(seed, kv, d.seed)?,
    })
}

fn cmd_generate(a: GenerateArgs) -> CliResult<()> {
    let kv = KvMap::load(a.config.as_ref())?;
    let cfg = decode_config(&kv, a.steps, a.temp_start, a.temp_end, a.seed)?;
    let n = resolve(a.n, &kv, "n", 64)?;
    let out = a
        .out
        .or(kv.get("out").map(PathBuf::from))
        .ok_or_else(|| CliError::Usage("generate: --out is required".into()))?;
    println!(
        "resolved generate config:\n  ckpt={}\n  n={n}\n  steps={}\n  temp_start={}\n  temp_end={}\n  seed={}\n  out={}",
        a.ckpt.display(),
        cfg.steps,
        cfg.temp_start,
        cfg.temp_end,
        cfg.seed,
        out.display()
    );
    let (sequences, net) = match checkpoint_dtype(&a.ckpt)? {
        Dtype::F32 => {
            let data = read_checkpoint::<f32>(&a.ckpt)?;
            let model = Model { cfg: data.cfg, student: data.student, teacher: data.teacher };
            (generate_unconditional(&model, n, &cfg, 128)?, model.cfg)
        }
        Dtype::F64 => {
            let data = read_checkpoint::<f64>(&a.ckpt)?;
            let model = Model { cfg: data.cfg, student: data.student, teacher: data.teacher };
            (generate_unconditional(&model, n, &cfg, 128)?, model.cfg)
        }
    };
    write_dataset(&out, net.vocab, net.seq_len as u32, &sequences, None)?;
    println!("wrote {} generated sequences to {}", sequences.len(), out.display());
    maybe_render(&a.png_dir, a.png_count, a.png_scale, &kv, &sequences, net.seq_len)?;
    Ok(())
}

fn maybe_render(
    png_dir: &Option<PathBuf>,
    png_count: Option<usize>,
    png_scale: Option<usize>,
    kv: &KvMap,
    sequences: &[TokenSequence],
    seq_len: usize,
) -> CliResult<()> {
    let dir = match png_dir.clone().or(kv.get("png_dir").map(PathBuf::from)) {
        Some(d) => d,
        None => return Ok(()),
    };
    let count = resolve(png_count, kv, "png_count", 4)?.min(sequences.len());
    let scale = resolve(png_scale, kv, "png_scale", 16)?;
    let grid = (seq_len as f64).sqrt() as usize;
    if grid * grid != seq_len {
        return Err(CliError::Lib(SorcenError::invalid("png export needs a square token grid")));
    }
    std::fs::create_dir_all(&dir).map_err(|e| SorcenError::io(dir.display().to_string(), e))?;
    for (i, seq) in sequences.iter().take(count).enumerate() {
        let path = dir.join(format!("sample_{i:04}.png"));
        render_png(&seq.ids, grid, scale, &path)?;
    }
    println!("rendered {count} PNGs into {}", dir.display());
    Ok(())
}

// ---- inpaint -----------------------------------------------------------------

#[derive(Args)]
struct InpaintArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    /// Source dataset for the sequence to inpaint
    #[arg(long)]
    data: PathBuf,
    /// Record index within the dataset
    #[arg(long)]
    index: Option<u64>,
    /// Visible rectangle "top,left,height,width" on the token grid
    #[arg(long)]
    rect: Option<String>,
    /// Comma-separated visible positions
    #[arg(long)]
    keep_positions: Option<String>,
    /// Keep a random fraction of positions visible (0.25 reproduces the
    /// 75%-random-mask reconstruction setting)
    #[arg(long)]
    keep_random: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    temp_start: Option<f64>,
    #[arg(long)]
    temp_end: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    png_dir: Option<PathBuf>,
    #[arg(long)]
    png_scale: Option<usize>,
}

fn cmd_inpaint(a: InpaintArgs) -> CliResult<()> {
    let kv = KvMap::load(a.config.as_ref())?;
    let cfg = decode_config(&kv, a.steps, a.temp_start, a.temp_end, a.seed)?;
    let index = resolve(a.index, &kv, "index", 0)?;
    let out = a
        .out
        .or(kv.get("out").map(PathBuf::from))
        .ok_or_else(|| CliError::Usage("inpaint: --out is required".into()))?;
    let rect = a.rect.or(kv.get("rect").map(String::from));
    let keep_positions = a.keep_positions.or(kv.get("keep_positions").map(String::from));
    let keep_random = match a.keep_random {
        Some(v) => Some(v),
        None => kv.parse("keep_random")?,
    };
    let spec = match (&rect, &keep_positions, keep_random) {
        (Some(r), None, None) => {
            let parts: Vec<usize> = r
                .split(',')
                .map(|t| t.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|_| CliError::Usage(format!("bad --rect {r:?}; want top,left,h,w")))?;
            if parts.len() != 4 {
                return Err(CliError::Usage(format!("bad --rect {r:?}; want top,left,h,w")));
            }
            VisibleSpec::Rect { top: parts[0], left: parts[1], height: parts[2], width: parts[3] }
        }
        (None, Some(p), None) => {
            let ps: Vec<usize> = p
                .split(',')
                .filter(|t| !t.trim().is_empty())
                .map(|t| t.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|_| CliError::Usage(format!("bad --keep-positions {p:?}")))?;
            VisibleSpec::Positions(ps)
        }
        (None, None, Some(f)) => VisibleSpec::RandomFraction(f),
        (None, None, None) => {
            return Err(CliError::Usage(
                "inpaint: choose one of --rect, --keep-positions, --keep-random".into(),
            ))
        }
        _ => {
            return Err(CliError::Usage(
                "inpaint: --rect, --keep-positions, and --keep-random are mutually exclusive".into(),
            ))
        }
    };
    let mut reader = DatasetReader::open(&a.data)?;
    let record = reader.record(index)?;
    let vocab = reader.header().vocab;
    let seq_len = reader.header().seq_len as usize;
    println!(
        "resolved inpaint config:\n  ckpt={}\n  data={}\n  index={index}\n  steps={}\n  temp_start={}\n  temp_end={}\n  seed={}\n  out={}",
        a.ckpt.display(),
        a.data.display(),
        cfg.steps,
        cfg.temp_start,
        cfg.temp_end,
        cfg.seed,
        out.display()
    );
    let (result, report) = match checkpoint_dtype(&a.ckpt)? {
        Dtype::F32 => {
            let data = read_checkpoint::<f32>(&a.ckpt)?;
            let model = Model { cfg: data.cfg, student: data.student, teacher: data.teacher };
            check_dataset(&model.cfg, vocab, seq_len)?;
            inpaint(&model, &record.ids, &spec, &cfg)?
        }
        Dtype::F64 => {
            let data = read_checkpoint::<f64>(&a.ckpt)?;
            let model = Model { cfg: data.cfg, student: data.student, teacher: data.teacher };
            check_dataset(&model.cfg, vocab, seq_len)?;
            inpaint(&model, &record.ids, &spec, &cfg)?
        }
    };
    if report.unconditional {
        eprintln!("note: visible set is empty; decoded unconditionally");
    }
    println!("visible tokens kept: {}", report.visible_count);
    write_dataset(&out, vocab, seq_len as u32, std::slice::from_ref(&result), None)?;
    println!("wrote inpainted sequence to {}", out.display());
    if let Some(dir) = a.png_dir.clone().or(kv.get("png_dir").map(PathBuf::from)) {
        let scale = resolve(a.png_scale, &kv, "png_scale", 16)?;
        let grid = (seq_len as f64).sqrt() as usize;
        std::fs::create_dir_all(&dir).map_err(|e| SorcenError::io(dir.display().to_string(), e))?;
        render_png(&record.ids, grid, scale, dir.join("input.png"))?;
        render_png(&result.ids, grid, scale, dir.join("inpainted.png"))?;
        println!("rendered input/inpainted PNGs into {}", dir.display());
    }
    Ok(())
}

// ---- probe / knn / fewshot / tfd ----------------------------------------------

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn cmd_probe(a: ProbeArgs) -> CliResult<()> {
    let kv = KvMap::load(a.config.as_ref())?;
    let cache = a.cache_dir.clone().or(kv.get("cache_dir").map(PathBuf::from));
    println!(
        "resolved probe config:\n  train={}\n  test={}\n  ckpt={}",
        a.train.display(),
        a.test.display(),
        a.ckpt.display()
    );
    let (train_x, train_y) = features_for(&a.ckpt, &a.train, cache.as_ref())?;
    let (test_x, test_y) = features_for(&a.ckpt, &a.test, cache.as_ref())?;
    let acc = linear_probe(&train_x, &train_y, &test_x, &test_y, &ProbeConfig::default())?;
    println!("linear probe top-1 accuracy: {acc:.4}");
    write_metric_csv(a.csv.as_ref(), &[("linear_probe_top1".into(), acc)])?;
    Ok(())
}

#[derive(Args)]
struct KnnArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn cmd_knn(a: KnnArgs) -> CliResult<()> {
    let kv = KvMap::load(a.config.as_ref())?;
    let k = resolve(a.k, &kv, "k", 20)?;
    let cache = a.cache_dir.clone().or(kv.get("cache_dir").map(PathBuf::from));
    println!(
        "resolved knn config:\n  train={}\n  test={}\n  ckpt={}\n  k={k}",
        a.train.display(),
        a.test.display(),
        a.ckpt.display()
    );
    let (train_x, train_y) = features_for(&a.ckpt, &a.train, cache.as_ref())?;
    let (test_x, test_y) = features_for(&a.ckpt, &a.test, cache.as_ref())?;
    let acc = knn_eval(&train_x, &train_y, &test_x, &test_y, k)?;
    println!("k-NN top-1 accuracy (k={k}): {acc:.4}");
    write_metric_csv(a.csv.as_ref(), &[(format!("knn_top1_k{k}"), acc)])?;
    Ok(())
}

#[derive(Args)]
struct FewshotArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Comma-separated shot counts
    #[arg(long)]
    shots: Option<String>,
    /// Number of subsampling seeds per shot count
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn cmd_fewshot(a: FewshotArgs) -> CliResult<()> {
    let kv = KvMap::load(a.config.as_ref())?;
    let shots_text =
        a.shots.clone().or(kv.get("shots").map(String::from)).unwrap_or("5,10,13,25".into());
    let shots: Vec<usize> = shots_text
        .split(',')
        .map(|t| t.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad --shots {shots_text:?}")))?;
    let seed_count = resolve(a.seeds, &kv, "seeds", 5)?;
    let base_seed = resolve_seed(a.seed, &kv, 0)?;
    let seeds: Vec<u64> = (0..seed_count).map(|i| base_seed + i).collect();
    let cache = a.cache_dir.clone().or(kv.get("cache_dir").map(PathBuf::from));
    println!(
        "resolved fewshot config:\n  train={}\n  test={}\n  ckpt={}\n  shots={shots:?}\n  seeds={seed_count} (base {base_seed})",
        a.train.display(),
        a.test.display(),
        a.ckpt.display()
    );
    let (train_x, train_y) = features_for(&a.ckpt, &a.train, cache.as_ref())?;
    let (test_x, test_y) = features_for(&a.ckpt, &a.test, cache.as_ref())?;
    let mut rows = Vec::new();
    for &s in &shots {
        let acc = few_shot_eval(
            &train_x,
            &train_y,
            &test_x,
            &test_y,
            s,
            &seeds,
            &ProbeConfig::default(),
        )?;
        println!("few-shot top-1 accuracy ({s} shots, {seed_count} seeds): {acc:.4}");
        rows.push((format!("fewshot_top1_{s}shot"), acc));
    }
    write_metric_csv(a.csv.as_ref(), &rows)?;
    Ok(())
}

#[derive(Args)]
struct TfdArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reference dataset (.stok)
    #[arg(long)]
    real: PathBuf,
    /// Generated dataset (.stok)
    #[arg(long, value_name = "GEN")]
    generated: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn cmd_tfd(a: TfdArgs) -> CliResult<()> {
    let kv = KvMap::load(a.config.as_ref())?;
    let cache = a.cache_dir.clone().or(kv.get("cache_dir").map(PathBuf::from));
    println!(
        "resolved tfd config:\n  real={}\n  generated={}\n  ckpt={}",
        a.real.display(),
        a.generated.display(),
        a.ckpt.display()
    );
    let (real_x, _) = features_for(&a.ckpt, &a.real, cache.as_ref())?;
    let (gen_x, _) = features_for(&a.ckpt, &a.generated, cache.as_ref())?;
    let d = token_frechet_distance(&real_x, &gen_x)?;
    println!("token Fréchet distance: {d:.6}");
    write_metric_csv(a.csv.as_ref(), &[("token_frechet_distance".into(), d)])?;
    Ok(())
}

// ---- bench ---------------------------------------------------------------------

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Steps to time
    #[arg(long)]
    steps: Option<u64>,
    #[command(flatten)]
    train_flags: TrainFlags,
    #[command(flatten)]
    model_flags: ModelFlags,
}

fn cmd_bench(a: BenchArgs) -> CliResult<()> {
    let (header, records, _) = read_dataset(&a.data)?;
    let mut setup = resolve_train_setup(
        a.config.as_ref(),
        &a.train_flags,
        &a.model_flags,
        header.vocab,
        header.seq_len as usize,
    )?;
    // time the full pipeline: echo from the first step
    setup.loss.echo_warmup_epochs = 0;
    let kv = KvMap::load(a.config.as_ref())?;
    let steps = resolve(a.steps, &kv, "steps", 200)?;
    print_kv_block("resolved train config", &setup.train.to_kv());
    print_kv_block("resolved network config", &net_to_kv(&setup.net));
    println!("benchmarking {steps} steps at batch {}", setup.train.batch_size);
    match setup.train.precision.as_str() {
        "f64" => bench_run::<f64>(&setup, &records, steps),
        _ => bench_run::<f32>(&setup, &records, steps),
    }
}

fn bench_run<T: Scalar>(
    setup: &ResolvedTrain,
    records: &[TokenSequence],
    steps: u64,
) -> CliResult<()> {
    let mut rng = sorcen::rng::Prng::seeded(setup.train.seed);
    let model = Model::<T>::init(setup.net.clone(), &mut rng)?;
    let mut trainer = Trainer::new(model, setup.train.clone(), setup.loss.clone(), records.len())?;
    let batch = setup.train.batch_size;
    let mut total = StageTimes::default();
    let started = std::time::Instant::now();
    for s in 0..steps {
        let start = ((s as usize * batch) % records.len()).min(records.len() - batch);
        let refs: Vec<&[u32]> =
            records[start..start + batch].iter().map(|r| r.ids.as_slice()).collect();
        let stats = trainer.train_step(&refs)?;
        total.accumulate(&stats.stages);
    }
    let wall = started.elapsed().as_secs_f64();
    println!("stage timings over {steps} steps (seconds, share of wall):");
    let rows = [
        ("mask", total.mask),
        ("encode", total.encode),
        ("decode", total.decode),
        ("echo", total.echo),
        ("teacher", total.teacher),
        ("backward", total.backward),
        ("optimizer", total.optimizer),
    ];
    for (name, secs) in rows {
        println!("  {name:<10} {secs:>9.3}  {:>5.1}%", 100.0 * secs / wall);
    }
    println!("  {:<10} {wall:>9.3}", "wall");
    let (user, sys, minflt) = sorcen::resource_usage();
    println!("  user {user:.1}s sys {sys:.1}s minor-faults {minflt}");
    Ok(())
}
