//! Command-line interface: train, sample, reconstruct, attrvec, edit, eval.
//!
//! Configuration resolves as defaults < preset < config file < flags, and
//! every command echoes the fully resolved configuration as `key=value`
//! lines before acting, in a form that can be fed back via `--config`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
//! failure (non-finite loss).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::attributes::{self, AttributeError, AttributeVector};
use crate::checkpoint::{self, CheckpointError};
use crate::data::{self, AttributedDataset, DataError, SyntheticSpec};
use crate::eval::{self, EvalError, RegressorConfig};
use crate::losses::{DecGanStyle, GanTerms, ReconKind};
use crate::models::ModelError;
use crate::pnm;
use crate::rng::SeedRng;
use crate::tensor::Tensor;
use crate::train::{train_loop, Telemetry, TrainConfig, TrainError, TrainMode, Trainer};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => write!(f, "{m}"),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidSpec(_) | DataError::BatchTooLarge { .. } => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<AttributeError> for CliError {
    fn from(e: AttributeError) -> Self {
        match e {
            AttributeError::IndexOutOfRange(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::NoAttributes | EvalError::NotEnoughModels(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "vaegan",
    about = "VAE/GAN hybrid generative model with a learned feature-wise similarity metric",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write telemetry plus a final checkpoint.
    Train(TrainArgs),
    /// Decode prior samples from a checkpoint into image files.
    Sample(SampleArgs),
    /// Reconstruct input images through the encoder/decoder.
    Reconstruct(ReconstructArgs),
    /// Compute latent attribute direction vectors and store them in the
    /// checkpoint.
    Attrvec(AttrvecArgs),
    /// Reconstruct an image with an attribute direction added to its code.
    Edit(EditArgs),
    /// Score conditional checkpoints with an attribute regressor.
    Eval(EvalArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Data source: synthetic or idx.
    #[arg(long)]
    data: Option<String>,
    /// Sample count for the synthetic generator.
    #[arg(long)]
    synth_count: Option<usize>,
    /// Seed for the synthetic generator.
    #[arg(long)]
    synth_seed: Option<u64>,
    /// IDX image file (data=idx).
    #[arg(long)]
    idx_images: Option<PathBuf>,
    /// IDX label file (optional, data=idx).
    #[arg(long)]
    idx_labels: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// key=value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// smoke (16px), desk (32px) or paper (64px) bundle of defaults.
    #[arg(long)]
    preset: Option<String>,
    /// vae, vae-disl, vaegan or gan.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    res: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Reconstruction weight in decoder updates.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Architecture width factor (1, 0.5, 0.25, 0.125).
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Reconstruction space: pixel or disl (discriminator features).
    #[arg(long)]
    llike: Option<String>,
    /// GAN objective terms: 2 or 3.
    #[arg(long)]
    gan_terms: Option<u32>,
    /// Decoder GAN loss: saturating or non-saturating.
    #[arg(long)]
    dec_style: Option<String>,
    /// Condition all three networks on the dataset attributes.
    #[arg(long)]
    conditional: bool,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    telemetry_every: Option<u64>,
    /// Write a checkpoint every N steps.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Adversarial pretraining steps for vae-disl mode.
    #[arg(long)]
    gan_pretrain: Option<u64>,
    /// Stop after this many wall-clock seconds.
    #[arg(long)]
    wall_budget: Option<f64>,
    /// Continue training from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Attribute bits for conditional checkpoints, e.g. 1,0,1.
    #[arg(long)]
    attrs: Option<String>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Attribute bits for conditional checkpoints.
    #[arg(long)]
    attrs: Option<String>,
    /// PPM/PGM images to reconstruct.
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct AttrvecArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Attribute name, or all attributes when omitted.
    #[arg(long)]
    attr: Option<String>,
    #[command(flatten)]
    data: DataArgs,
    /// Output checkpoint path; defaults to updating in place.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    attr: String,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Attribute bits for conditional checkpoints.
    #[arg(long)]
    attrs: Option<String>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Conditional checkpoints to score.
    #[arg(long, required = true, num_args = 1..)]
    checkpoints: Vec<PathBuf>,
    /// Load a trained regressor instead of training one.
    #[arg(long)]
    regressor: Option<PathBuf>,
    /// Train a regressor on the evaluation dataset.
    #[arg(long)]
    train_regressor: bool,
    #[arg(long)]
    regressor_steps: Option<u64>,
    #[command(flatten)]
    data: DataArgs,
    /// Attribute rows to condition on.
    #[arg(long, default_value_t = 32)]
    rows: usize,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long, default_value_t = 10)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Reconstruct(args) => cmd_reconstruct(args),
        Command::Attrvec(args) => cmd_attrvec(args),
        Command::Edit(args) => cmd_edit(args),
        Command::Eval(args) => cmd_eval(args),
    }
}

// ---------------------------------------------------------------------------
// Configuration resolution
// ---------------------------------------------------------------------------

fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Data(format!("{}:{}: expected key=value", path.display(), lineno + 1))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

struct Resolver {
    file: BTreeMap<String, String>,
}

impl Resolver {
    fn get<T: FromStr + Clone>(&self, key: &str, flag: &Option<T>, fallback: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v.clone());
        }
        if let Some(raw) = self.file.get(key) {
            return raw
                .parse()
                .map_err(|_| CliError::Usage(format!("config key {key}: cannot parse {raw:?}")));
        }
        Ok(fallback)
    }

    fn get_str(&self, key: &str, flag: &Option<String>, fallback: &str) -> String {
        flag.clone()
            .or_else(|| self.file.get(key).cloned())
            .unwrap_or_else(|| fallback.to_string())
    }

    fn has(&self, key: &str, flag_set: bool) -> bool {
        flag_set || self.file.contains_key(key)
    }
}

struct Preset {
    res: usize,
    scale: f64,
    steps: u64,
    batch: usize,
}

fn preset_by_name(name: &str) -> Result<Preset> {
    match name {
        "smoke" => Ok(Preset { res: 16, scale: 0.125, steps: 500, batch: 16 }),
        "desk" => Ok(Preset { res: 32, scale: 0.25, steps: 5000, batch: 32 }),
        "paper" => Ok(Preset { res: 64, scale: 1.0, steps: u64::MAX, batch: 64 }),
        other => Err(CliError::Usage(format!("unknown preset {other} (smoke, desk, paper)"))),
    }
}

struct ResolvedData {
    source: String,
    synth_count: usize,
    synth_seed: u64,
    idx_images: Option<PathBuf>,
    idx_labels: Option<PathBuf>,
}

fn resolve_data(r: &Resolver, args: &DataArgs) -> Result<ResolvedData> {
    let source = r.get_str("data", &args.data, "synthetic");
    if source != "synthetic" && source != "idx" {
        return Err(CliError::Usage(format!("unknown data source {source} (synthetic, idx)")));
    }
    Ok(ResolvedData {
        source,
        synth_count: r.get("synth-count", &args.synth_count, 512)?,
        synth_seed: r.get("synth-seed", &args.synth_seed, 1)?,
        idx_images: args
            .idx_images
            .clone()
            .or_else(|| r.file.get("idx-images").map(PathBuf::from)),
        idx_labels: args
            .idx_labels
            .clone()
            .or_else(|| r.file.get("idx-labels").map(PathBuf::from)),
    })
}

fn load_dataset(data: &ResolvedData, res: usize) -> Result<AttributedDataset> {
    match data.source.as_str() {
        "synthetic" => {
            let spec = SyntheticSpec::new(res, data.synth_count, data.synth_seed);
            Ok(data::generate_synthetic(&spec)?)
        }
        "idx" => {
            let images = data
                .idx_images
                .as_ref()
                .ok_or_else(|| CliError::Usage("data=idx requires --idx-images".into()))?;
            Ok(data::load_idx(images, data.idx_labels.as_deref())?)
        }
        _ => unreachable!(),
    }
}

fn data_echo_lines(data: &ResolvedData) -> Vec<(String, String)> {
    let mut lines = vec![("data".to_string(), data.source.clone())];
    if data.source == "synthetic" {
        lines.push(("synth-count".to_string(), data.synth_count.to_string()));
        lines.push(("synth-seed".to_string(), data.synth_seed.to_string()));
    }
    if let Some(p) = &data.idx_images {
        lines.push(("idx-images".to_string(), p.display().to_string()));
    }
    if let Some(p) = &data.idx_labels {
        lines.push(("idx-labels".to_string(), p.display().to_string()));
    }
    lines
}

fn echo_config(lines: &[(String, String)]) {
    println!("# resolved configuration");
    for (k, v) in lines {
        println!("{k}={v}");
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = match &args.config {
        Some(p) => parse_config_file(p)?,
        None => BTreeMap::new(),
    };
    let r = Resolver { file };

    let preset_name = r.get_str("preset", &args.preset, "smoke");
    let preset = preset_by_name(&preset_name)?;

    let mode_str = r.get_str("mode", &args.mode, "vaegan");
    let mode = TrainMode::parse(&mode_str)
        .ok_or_else(|| CliError::Usage(format!("unknown mode {mode_str} (vae, vae-disl, vaegan, gan)")))?;

    // The reconstruction-space flag interacts with the mode; explicit
    // contradictions are rejected rather than silently ignored.
    let llike_given = r.has("llike", args.llike.is_some());
    let llike_str = r.get_str("llike", &args.llike, "");
    let recon_kind = match (mode, llike_str.as_str()) {
        (TrainMode::Gan, "") => ReconKind::Feature, // unused in gan mode
        (TrainMode::Gan, _) if llike_given => {
            return Err(CliError::Usage(
                "--llike has no meaning with --mode gan (no reconstruction term)".into(),
            ))
        }
        (TrainMode::Vae, "" | "pixel") => ReconKind::Pixel,
        (TrainMode::Vae, "disl") => {
            return Err(CliError::Usage(
                "plain vae mode is pixel-based; use --mode vae-disl for the learned metric".into(),
            ))
        }
        (TrainMode::VaeFrozenDis, "" | "disl") => ReconKind::Feature,
        (TrainMode::VaeFrozenDis, "pixel") => {
            return Err(CliError::Usage("vae-disl mode requires --llike disl".into()))
        }
        (TrainMode::VaeGan, "") => ReconKind::Feature,
        (TrainMode::VaeGan, "pixel") => ReconKind::Pixel,
        (TrainMode::VaeGan, "disl") => ReconKind::Feature,
        (_, other) => return Err(CliError::Usage(format!("unknown llike variant {other} (pixel, disl)"))),
    };

    let gan_terms = match r.get("gan-terms", &args.gan_terms, 3u32)? {
        2 => GanTerms::Two,
        3 => GanTerms::Three,
        other => return Err(CliError::Usage(format!("gan-terms must be 2 or 3, got {other}"))),
    };
    let dec_style = match r.get_str("dec-style", &args.dec_style, "non-saturating").as_str() {
        "non-saturating" | "non_saturating" => DecGanStyle::NonSaturating,
        "saturating" => DecGanStyle::Saturating,
        other => return Err(CliError::Usage(format!("unknown dec-style {other}"))),
    };

    let res = r.get("res", &args.res, preset.res)?;
    let scale = r.get("scale", &args.scale, preset.scale)?;
    let seed = r.get("seed", &args.seed, 0u64)?;
    let conditional = args.conditional || r.file.get("conditional").map(|v| v == "true").unwrap_or(false);

    let data_cfg = resolve_data(&r, &args.data)?;
    let dataset = load_dataset(&data_cfg, res)?;
    if dataset.resolution() != res {
        return Err(CliError::Data(format!(
            "dataset resolution {} does not match configured {res}",
            dataset.resolution()
        )));
    }
    if conditional && dataset.attr_count() == 0 {
        return Err(CliError::Usage(
            "--conditional requires a dataset with attributes (labels)".into(),
        ));
    }

    let mut config = TrainConfig::new(mode, res, scale, seed);
    config.channels = dataset.channels();
    config.recon_kind = recon_kind;
    config.gan_terms = gan_terms;
    config.dec_style = dec_style;
    config.max_steps = r.get("steps", &args.steps, preset.steps)?;
    config.batch_size = r.get("batch", &args.batch, preset.batch)?;
    config.gamma = r.get("gamma", &args.gamma, 1.0)?;
    config.learning_rate = r.get("lr", &args.lr, 3e-4)?;
    config.latent_dim = r.get(
        "latent-dim",
        &args.latent_dim,
        crate::models::scaled_units(128, scale),
    )?;
    config.attr_count = if conditional { dataset.attr_count() } else { 0 };
    config.telemetry_every = r.get("telemetry-every", &args.telemetry_every, 10)?;
    config.gan_pretrain_steps = r.get("gan-pretrain", &args.gan_pretrain, 500)?;
    config.wall_clock_budget_secs = args
        .wall_budget
        .or_else(|| r.file.get("wall-budget").and_then(|v| v.parse().ok()));

    let out_dir = args
        .out_dir
        .clone()
        .or_else(|| r.file.get("out-dir").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out_dir)?;
    let checkpoint_every = r.get("checkpoint-every", &args.checkpoint_every, 0u64)?;

    let mut trainer = match &args.resume {
        Some(path) => {
            let mut t = checkpoint::load(path)?;
            t.config.max_steps = config.max_steps;
            t.config.telemetry_every = config.telemetry_every;
            t.config.wall_clock_budget_secs = config.wall_clock_budget_secs;
            t
        }
        None => {
            let mut t = Trainer::new(config).map_err(CliError::from)?;
            t.attr_names = dataset.attr_names().to_vec();
            t
        }
    };

    let mut echo = vec![
        ("command".to_string(), "train".to_string()),
        ("preset".to_string(), preset_name.clone()),
    ];
    echo.extend(checkpoint::config_lines(&trainer.config));
    echo.extend(data_echo_lines(&data_cfg));
    echo.push(("conditional".to_string(), conditional.to_string()));
    echo.push(("out-dir".to_string(), out_dir.display().to_string()));
    echo_config(&echo);

    let telemetry_path = out_dir.join("telemetry.csv");
    let mut telemetry = Telemetry::with_csv(&telemetry_path, true)?;
    let ckpt_arg = (checkpoint_every > 0).then(|| (checkpoint_every, out_dir.as_path()));
    train_loop(&mut trainer, &dataset, &mut telemetry, ckpt_arg).map_err(CliError::from)?;

    let final_path = out_dir.join("checkpoint_final.vgcp");
    let mut extras = BTreeMap::new();
    for (k, v) in data_echo_lines(&data_cfg) {
        extras.insert(k, v);
    }
    checkpoint::save_with_extras(&trainer, &final_path, &extras)?;
    println!("wrote {}", telemetry_path.display());
    println!("wrote {}", final_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// sample / reconstruct
// ---------------------------------------------------------------------------

fn parse_attr_bits(raw: &str, expected: usize) -> Result<Tensor> {
    let bits: Vec<f64> = raw
        .split(',')
        .map(|s| match s.trim() {
            "0" => Ok(0.0),
            "1" => Ok(1.0),
            other => Err(CliError::Usage(format!("attribute bits must be 0 or 1, got {other}"))),
        })
        .collect::<Result<_>>()?;
    if bits.len() != expected {
        return Err(CliError::Usage(format!(
            "expected {expected} attribute bits, got {}",
            bits.len()
        )));
    }
    Ok(Tensor::from_vec(&[1, bits.len()], bits).unwrap())
}

fn conditional_attrs(trainer: &Trainer, attrs: &Option<String>, n: usize) -> Result<Option<Tensor>> {
    let a = trainer.config.attr_count;
    if a == 0 {
        return Ok(None);
    }
    let raw = attrs.as_ref().ok_or_else(|| {
        CliError::Usage(format!(
            "conditional checkpoint: pass --attrs with {a} bits (attributes: {})",
            trainer.attr_names.join(",")
        ))
    })?;
    let row = parse_attr_bits(raw, a)?;
    let data: Vec<f64> = row.data().iter().cycle().take(n * a).copied().collect();
    Ok(Some(Tensor::from_vec(&[n, a], data).unwrap()))
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    let mut trainer = checkpoint::load(&args.checkpoint)?;
    std::fs::create_dir_all(&args.out_dir)?;
    echo_config(&[
        ("command".into(), "sample".into()),
        ("checkpoint".into(), args.checkpoint.display().to_string()),
        ("n".into(), args.n.to_string()),
        ("seed".into(), args.seed.to_string()),
        ("attrs".into(), args.attrs.clone().unwrap_or_default()),
        ("out-dir".into(), args.out_dir.display().to_string()),
    ]);

    let attrs = conditional_attrs(&trainer, &args.attrs, args.n)?;
    let mut rng = SeedRng::new(args.seed);
    let z = rng.normal_tensor(&[args.n, trainer.config.latent_dim]);
    let images = trainer.model.decode(&z, attrs.as_ref())?;

    let (c, h, w) = (
        trainer.config.channels,
        trainer.config.resolution,
        trainer.config.resolution,
    );
    let plane = c * h * w;
    let ext = if c == 1 { "pgm" } else { "ppm" };
    let mut singles = Vec::with_capacity(args.n);
    for i in 0..args.n {
        let img = Tensor::from_vec(&[c, h, w], images.data()[i * plane..(i + 1) * plane].to_vec()).unwrap();
        let path = args.out_dir.join(format!("sample_{i:03}.{ext}"));
        pnm::write_image(&path, &img)?;
        singles.push(img);
    }
    let grid = pnm::montage(&singles, pnm::grid_cols(args.n))?;
    let montage_path = args.out_dir.join(format!("montage.{ext}"));
    pnm::write_image(&montage_path, &grid)?;
    println!("wrote {} samples and {}", args.n, montage_path.display());
    Ok(())
}

fn cmd_reconstruct(args: ReconstructArgs) -> Result<()> {
    let mut trainer = checkpoint::load(&args.checkpoint)?;
    if trainer.config.mode == TrainMode::Gan {
        return Err(CliError::Data(
            "this checkpoint was trained as a pure GAN and has no encoder; reconstruction is impossible"
                .into(),
        ));
    }
    std::fs::create_dir_all(&args.out_dir)?;
    echo_config(&[
        ("command".into(), "reconstruct".into()),
        ("checkpoint".into(), args.checkpoint.display().to_string()),
        ("inputs".into(), args.images.len().to_string()),
        ("out-dir".into(), args.out_dir.display().to_string()),
    ]);

    let ext = if trainer.config.channels == 1 { "pgm" } else { "ppm" };
    for input in &args.images {
        let img = pnm::read_image(input)?;
        let batched = img.reshaped(&[1, img.shape()[0], img.shape()[1], img.shape()[2]]).unwrap();
        let attrs = conditional_attrs(&trainer, &args.attrs, 1)?;
        let recon = trainer.model.reconstruct(&batched, attrs.as_ref())?;
        let recon_img = recon
            .reshaped(&[recon.shape()[1], recon.shape()[2], recon.shape()[3]])
            .unwrap();
        let pair = pnm::montage(&[img, recon_img], 2)?;
        let stem = input.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or("image".into());
        let out = args.out_dir.join(format!("recon_{stem}.{ext}"));
        pnm::write_image(&out, &pair)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// attrvec / edit
// ---------------------------------------------------------------------------

fn cmd_attrvec(args: AttrvecArgs) -> Result<()> {
    let mut trainer = checkpoint::load(&args.checkpoint)?;
    let r = Resolver { file: BTreeMap::new() };
    let data_cfg = resolve_data(&r, &args.data)?;
    let dataset = load_dataset(&data_cfg, trainer.config.resolution)?;
    if dataset.attr_count() == 0 {
        return Err(CliError::Usage("attribute vectors need a dataset with attributes".into()));
    }
    let out = args.out.clone().unwrap_or_else(|| args.checkpoint.clone());
    echo_config(&[
        ("command".into(), "attrvec".into()),
        ("checkpoint".into(), args.checkpoint.display().to_string()),
        ("attr".into(), args.attr.clone().unwrap_or_else(|| "all".into())),
        ("out".into(), out.display().to_string()),
    ]);

    let indices: Vec<usize> = match &args.attr {
        Some(name) => vec![dataset
            .attr_index(name)
            .ok_or_else(|| CliError::Usage(format!("unknown attribute name {name}")))?],
        None => (0..dataset.attr_count()).collect(),
    };
    for idx in indices {
        let vec = attributes::compute_attribute_vector(&mut trainer.model, &dataset, idx)?;
        println!(
            "attribute {} ({}): with {} / without {}",
            idx,
            dataset.attr_names()[idx],
            vec.with_count,
            vec.without_count
        );
        trainer.attr_vectors.insert(idx, vec.direction);
    }
    trainer.attr_names = dataset.attr_names().to_vec();
    checkpoint::save(&trainer, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_edit(args: EditArgs) -> Result<()> {
    let mut trainer = checkpoint::load(&args.checkpoint)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let attr_index = trainer
        .attr_names
        .iter()
        .position(|n| *n == args.attr)
        .ok_or_else(|| CliError::Usage(format!("unknown attribute name {}", args.attr)))?;
    let direction = trainer.attr_vectors.get(&attr_index).cloned().ok_or_else(|| {
        CliError::Usage(format!(
            "checkpoint has no stored vector for attribute {}; run attrvec first",
            args.attr
        ))
    })?;
    echo_config(&[
        ("command".into(), "edit".into()),
        ("checkpoint".into(), args.checkpoint.display().to_string()),
        ("image".into(), args.image.display().to_string()),
        ("attr".into(), args.attr.clone()),
        ("alpha".into(), args.alpha.to_string()),
        ("out-dir".into(), args.out_dir.display().to_string()),
    ]);

    let vec = AttributeVector {
        attr_index,
        direction,
        with_count: 0,
        without_count: 0,
    };
    let img = pnm::read_image(&args.image)?;
    let batched = img.reshaped(&[1, img.shape()[0], img.shape()[1], img.shape()[2]]).unwrap();
    let attrs = conditional_attrs(&trainer, &args.attrs, 1)?;

    let recon = trainer.model.reconstruct(&batched, attrs.as_ref())?;
    let edited = attributes::edit_image(&mut trainer.model, &batched, &vec, args.alpha, attrs.as_ref())?;

    let unbatch = |t: &Tensor| t.reshaped(&[t.shape()[1], t.shape()[2], t.shape()[3]]).unwrap();
    let ext = if trainer.config.channels == 1 { "pgm" } else { "ppm" };
    let stem = args
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or("image".into());
    let panels = vec![img, unbatch(&recon), unbatch(&edited)];
    let names = ["original", "recon", "edited"];
    for (panel, name) in panels.iter().zip(names) {
        pnm::write_image(&args.out_dir.join(format!("edit_{stem}_{name}.{ext}")), panel)?;
    }
    let strip = pnm::montage(&panels, 3)?;
    let out = args.out_dir.join(format!("edit_{stem}.{ext}"));
    pnm::write_image(&out, &strip)?;
    println!("wrote {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(args: EvalArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out_dir)?;
    let mut trainers = Vec::new();
    for path in &args.checkpoints {
        let t = checkpoint::load(path)?;
        if t.config.attr_count == 0 {
            return Err(CliError::Data(format!(
                "{} is unconditional; eval scores conditional checkpoints",
                path.display()
            )));
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or("model".into());
        trainers.push((name, t));
    }
    let first = &trainers[0].1.config;
    let (res, channels, attr_count, scale) = (first.resolution, first.channels, first.attr_count, first.scale);

    let r = Resolver { file: BTreeMap::new() };
    let data_cfg = resolve_data(&r, &args.data)?;
    let dataset = load_dataset(&data_cfg, res)?;
    if dataset.attr_count() != attr_count {
        return Err(CliError::Data(format!(
            "dataset has {} attributes, checkpoints expect {attr_count}",
            dataset.attr_count()
        )));
    }

    echo_config(&[
        ("command".into(), "eval".into()),
        ("checkpoints".into(), args.checkpoints.len().to_string()),
        ("rows".into(), args.rows.to_string()),
        ("runs".into(), args.runs.to_string()),
        ("samples".into(), args.samples.to_string()),
        ("seed".into(), args.seed.to_string()),
        ("out-dir".into(), args.out_dir.display().to_string()),
    ]);

    let regressor = match (&args.regressor, args.train_regressor) {
        (Some(path), _) => eval::load_regressor(path)?,
        (None, true) => {
            let mut config = RegressorConfig::new(res, channels, scale, attr_count, args.seed);
            if let Some(steps) = args.regressor_steps {
                config.steps = steps;
            }
            println!("training regressor ({} steps)...", config.steps);
            let reg = eval::train_regressor(&dataset, config)?;
            let path = args.out_dir.join("regressor.vgcp");
            eval::save_regressor(&reg, &path)?;
            println!("wrote {}", path.display());
            reg
        }
        (None, false) => {
            return Err(CliError::Usage(
                "pass --regressor <file> or --train-regressor".into(),
            ))
        }
    };

    let rows = args.rows.min(dataset.len());
    let idx: Vec<usize> = (0..rows).collect();
    let (_, attrs) = dataset.gather(&idx);

    let mut report = Vec::new();
    for (name, trainer) in trainers.iter_mut() {
        let score = eval::score_conditional(
            &mut trainer.model,
            &regressor,
            &attrs,
            args.samples,
            args.runs,
            args.seed,
        )?;
        report.push((name.clone(), score));
    }

    // Squared-error magnitudes depend on this binary-attribute setup; only
    // comparisons between rows of the same report are meaningful.
    print!("{}", eval::render_table(&report));
    let csv_path = args.out_dir.join("report.csv");
    std::fs::write(&csv_path, eval::render_csv(&report))?;
    println!("wrote {}", csv_path.display());
    Ok(())
}
