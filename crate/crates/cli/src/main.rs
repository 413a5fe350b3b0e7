//! `ichnet` command line: phantom generation, preprocessing, both training
//! stages, evaluation, the four studies and Grad-CAM rendering.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ichnet_core::explain;
use ichnet_core::io::{self, ImageFormat, Manifest, ManifestRow};
use ichnet_core::phantom::{self, SIGN_NAMES};
use ichnet_core::pipeline::{
    evaluate, finetune_location, run_experiment, split_dataset, train_classifier,
    train_segmentation, ExperimentName, RunRecord, SplitMode,
};
use ichnet_core::preprocess::{self, WindowParams};
use ichnet_core::{Checkpoint, Config, Dataset, Error, Location, PoolingMode};

#[derive(Parser, Debug)]
#[command(
    name = "ichnet",
    version,
    about = "Joint hematoma segmentation and sign classification on CT slices"
)]
struct Cli {
    /// TOML configuration; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Log verbosity (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic phantom dataset and its manifest.
    Generate(GenerateArgs),
    /// Window and clean every slice of a manifest into 8-bit PNGs.
    Preprocess(PreprocessArgs),
    /// Train the segmenter (stage one).
    TrainSeg(TrainSegArgs),
    /// Train the classifier on a frozen segmenter (stage two).
    TrainCls(TrainClsArgs),
    /// Fine-tune a segmenter on one hematoma location.
    FinetuneLoc(FinetuneArgs),
    /// Evaluate a checkpoint on the test split (or every case).
    Eval(EvalArgs),
    /// Run one of the comparison studies.
    Experiment(ExperimentArgs),
    /// Render a Grad-CAM overlay for one image.
    Gradcam(GradcamArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long)]
    slices_per_patient: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Four comma-separated probabilities in sign order.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    prevalence: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_noise: bool,
    #[arg(long)]
    no_skull: bool,
    #[arg(long)]
    no_center: bool,
    /// Lower HU bound of the window.
    #[arg(long, allow_negative_numbers = true)]
    a: Option<f64>,
    /// Upper HU bound of the window.
    #[arg(long, allow_negative_numbers = true)]
    b: Option<f64>,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Skip the cleanup stages (windowing only).
    #[arg(long)]
    raw: bool,
    #[arg(long, value_enum)]
    split_mode: Option<SplitArg>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainSegArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Comma-separated encoder widths.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    location: Option<Location>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainClsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Checkpoint holding the trained segmenter.
    #[arg(long)]
    seg_checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pooling: Option<PoolingArg>,
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long, conflicts_with = "unweighted")]
    weighted: bool,
    #[arg(long)]
    unweighted: bool,
    #[arg(long, conflicts_with = "no_fuse")]
    fuse: bool,
    #[arg(long)]
    no_fuse: bool,
    /// Multiply training images by ground-truth masks and test images by
    /// predicted masks.
    #[arg(long)]
    masked: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    location: Location,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate every case instead of the test split.
    #[arg(long)]
    all: bool,
    /// Multiply classifier inputs by binarised predicted masks.
    #[arg(long)]
    masked: bool,
    /// Also write `report.tsv` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    name: ExperimentName,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated master seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    seg_epochs: Option<usize>,
    #[arg(long)]
    cls_epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct GradcamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// 8-bit PNG (already windowed) or raw HU slice.
    #[arg(long)]
    image: PathBuf,
    /// Class index or sign name.
    #[arg(long)]
    class: String,
    /// Convolution to inspect; defaults to the last one.
    #[arg(long)]
    layer: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SplitArg {
    Random,
    ByPatient,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PoolingArg {
    MaxPool,
    WaveletLl,
    WaveletMultiresolution,
}

impl From<PoolingArg> for PoolingMode {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::MaxPool => PoolingMode::MaxPool,
            PoolingArg::WaveletLl => PoolingMode::WaveletLl,
            PoolingArg::WaveletMultiresolution => PoolingMode::WaveletMultiresolution,
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn apply_data(cfg: &mut Config, d: &DataArgs) {
    if let Some(m) = d.split_mode {
        cfg.split.mode = match m {
            SplitArg::Random => SplitMode::Random,
            SplitArg::ByPatient => SplitMode::ByPatient,
        };
    }
    set(&mut cfg.split.test_fraction, d.test_fraction);
    set(&mut cfg.split.seed, d.split_seed);
}

fn apply_train(t: &mut ichnet_core::TrainConfig, a: &TrainArgs, raw: bool) {
    set(&mut t.epochs, a.epochs);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.learning_rate, a.learning_rate);
    set(&mut t.seed, a.seed);
    if raw {
        t.preprocessed = false;
    }
}

fn load_data(
    cfg: &Config,
    manifest: &Path,
    preprocessed: bool,
) -> ichnet_core::Result<(Dataset, ichnet_core::Split)> {
    let data = Dataset::load(manifest, &cfg.preprocess, preprocessed)?;
    let keys = data.keys();
    let split = split_dataset(&keys, &cfg.split)?;
    if cfg.split.mode == SplitMode::ByPatient {
        split.check_patient_leakage(&keys)?;
    }
    Ok((data, split))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Saves checkpoint, record and report under `out`, then prints the report
/// and the checkpoint hash.
fn write_run(out: &Path, ck: &Checkpoint, mut record: RunRecord) -> anyhow::Result<()> {
    create_dir(out)?;
    let ck_path = out.join("checkpoint.ick");
    ck.save(&ck_path)?;
    record.checkpoint_path = Some(ck_path.clone());
    std::fs::write(out.join("record.json"), record.to_json())?;
    std::fs::write(out.join("report.tsv"), record.report.to_tsv())?;
    for w in &record.warnings {
        log::warn!("{w}");
    }
    print!("{}", record.report.to_tsv());
    println!("checkpoint\t{}\tsha256={}", ck_path.display(), ck.hash());
    Ok(())
}

fn generate(mut cfg: Config, a: GenerateArgs) -> anyhow::Result<()> {
    let spec = &mut cfg.phantom;
    set(&mut spec.patients, a.patients);
    set(&mut spec.slices_per_patient, a.slices_per_patient);
    set(&mut spec.image_size, a.image_size);
    set(&mut spec.seed, a.seed);
    if let Some(p) = a.prevalence {
        spec.prevalence = p.try_into().expect("clap enforces four values");
    }
    cfg.validate()?;
    let manifest = phantom::generate_dataset(&cfg.phantom, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn preprocess_cmd(mut cfg: Config, a: PreprocessArgs) -> anyhow::Result<()> {
    let pre = &mut cfg.preprocess;
    if a.no_noise {
        pre.enable_noise_removal = false;
    }
    if a.no_skull {
        pre.enable_skull_strip = false;
    }
    if a.no_center {
        pre.enable_centering = false;
    }
    pre.window = WindowParams {
        a: a.a.unwrap_or(pre.window.a),
        b: a.b.unwrap_or(pre.window.b),
    };
    cfg.validate()?;
    let src = Manifest::read(&a.manifest)?;
    let data = Dataset::from_manifest(&src, &cfg.preprocess, true)?;
    for sub in ["images", "masks"] {
        create_dir(&a.out.join(sub))?;
    }
    let mut rows = Vec::with_capacity(src.rows.len());
    for (row, sample) in src.rows.iter().zip(&data.samples) {
        let image_path = PathBuf::from("images").join(format!("{}.png", row.case_id));
        let to_u8 = |v: f32| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8;
        io::write_png_gray(&a.out.join(&image_path), &sample.image.mapv(to_u8))?;
        let mask_path = match &sample.mask {
            Some(m) => {
                let p = PathBuf::from("masks").join(format!("{}.png", row.case_id));
                io::write_png_gray(&a.out.join(&p), &m.mapv(|v| if v > 0.5 { 255 } else { 0 }))?;
                p
            }
            None => PathBuf::from("-"),
        };
        rows.push(ManifestRow {
            image_path,
            mask_path,
            ..row.clone()
        });
    }
    let out = Manifest {
        image_format: ImageFormat::Png8,
        rows,
        base_dir: a.out.clone(),
    };
    let path = a.out.join("manifest.tsv");
    out.write(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn train_seg_cmd(mut cfg: Config, a: TrainSegArgs) -> anyhow::Result<()> {
    apply_data(&mut cfg, &a.data);
    apply_train(&mut cfg.train_seg, &a.train, a.data.raw);
    set(&mut cfg.segmenter.encoder_widths, a.widths);
    if a.location.is_some() {
        cfg.train_seg.location_filter = a.location;
    }
    cfg.classifier.encoder_feature_width = cfg.segmenter.bottleneck_width();
    cfg.validate()?;
    let (data, split) = load_data(&cfg, &a.data.manifest, cfg.train_seg.preprocessed)?;
    let (ck, record) = train_segmentation(&cfg.segmenter, &cfg.train_seg, &data, &split)?;
    write_run(&a.out, &ck, record)
}

fn train_cls_cmd(mut cfg: Config, a: TrainClsArgs) -> anyhow::Result<()> {
    apply_data(&mut cfg, &a.data);
    apply_train(&mut cfg.train_cls, &a.train, a.data.raw);
    set(&mut cfg.classifier.block_widths, a.widths);
    if let Some(p) = a.pooling {
        cfg.classifier.pooling_mode = p.into();
    }
    if a.weighted || a.unweighted {
        cfg.train_cls.use_weighted_loss = a.weighted;
    }
    if a.fuse || a.no_fuse {
        cfg.classifier.fuse_encoder_features = a.fuse;
    }
    if a.masked {
        cfg.train_cls.masked_input = true;
    }
    let seg = Checkpoint::load(&a.seg_checkpoint)?;
    cfg.segmenter = seg.seg.config().clone();
    cfg.classifier.encoder_feature_width = cfg.segmenter.bottleneck_width();
    cfg.validate()?;
    let (data, split) = load_data(&cfg, &a.data.manifest, cfg.train_cls.preprocessed)?;
    let (ck, record) = train_classifier(&cfg.classifier, &cfg.train_cls, &data, &split, &seg)?;
    write_run(&a.out, &ck, record)
}

fn finetune_cmd(mut cfg: Config, a: FinetuneArgs) -> anyhow::Result<()> {
    apply_data(&mut cfg, &a.data);
    apply_train(&mut cfg.train_seg, &a.train, a.data.raw);
    if a.train.epochs.is_none() {
        cfg.train_seg.epochs = cfg.experiment.finetune_epochs;
    }
    cfg.validate()?;
    let base = Checkpoint::load(&a.checkpoint)?;
    let (data, split) = load_data(&cfg, &a.data.manifest, cfg.train_seg.preprocessed)?;
    let (ck, record) = finetune_location(&base, a.location, &cfg.train_seg, &data, &split)?;
    write_run(&a.out, &ck, record)
}

fn eval_cmd(mut cfg: Config, a: EvalArgs) -> anyhow::Result<()> {
    apply_data(&mut cfg, &a.data);
    cfg.validate()?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let preprocessed = !a.data.raw;
    let (data, split) = load_data(&cfg, &a.data.manifest, preprocessed)?;
    let idx: Vec<usize> = if a.all {
        (0..data.len()).collect()
    } else {
        split.test.clone()
    };
    let (report, _) = evaluate(&ck, &data, &idx, a.masked)?;
    if let Some(out) = &a.out {
        create_dir(out)?;
        std::fs::write(out.join("report.tsv"), report.to_tsv())?;
    }
    print!("{}", report.to_tsv());
    Ok(())
}

fn experiment_cmd(mut cfg: Config, a: ExperimentArgs) -> anyhow::Result<()> {
    set(&mut cfg.experiment.seeds, a.seeds);
    set(&mut cfg.train_seg.epochs, a.seg_epochs);
    set(&mut cfg.train_cls.epochs, a.cls_epochs);
    cfg.validate()?;
    let outcome = run_experiment(a.name, &cfg, &a.manifest)?;
    outcome.write(&a.out)?;
    print!("{}", outcome.tables_tsv());
    if !outcome.failures.is_empty() {
        log::error!(
            "{} grid cell(s) failed; see failures.txt",
            outcome.failures.len()
        );
    }
    Ok(())
}

fn class_index(s: &str) -> ichnet_core::Result<usize> {
    s.parse::<usize>()
        .ok()
        .or_else(|| SIGN_NAMES.iter().position(|n| *n == s))
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown class `{s}`; use 0-3 or one of {}",
                SIGN_NAMES.join(", ")
            ))
        })
}

fn gradcam_cmd(cfg: Config, a: GradcamArgs) -> anyhow::Result<()> {
    cfg.validate()?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let class = class_index(&a.class)?;
    let is_png = a
        .image
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let image = if is_png {
        io::read_png_gray(&a.image)?.mapv(|v| f32::from(v) / 255.0)
    } else {
        let hu = io::read_hu(&a.image)?;
        let img = if cfg.train_cls.preprocessed {
            preprocess::preprocess(&hu, &cfg.preprocess)?
        } else {
            preprocess::window_hu(&hu, cfg.preprocess.window)?
        };
        img.into_values().mapv_into(|v| v / 255.0)
    };
    let heat = explain::grad_cam(&ck, &image, class, a.layer.as_deref())?;
    create_dir(&a.out)?;
    let stem = a
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let path = a
        .out
        .join(format!("{stem}_{}_gradcam.png", SIGN_NAMES[class]));
    explain::render_overlay(&image, &heat, &path)?;
    println!("{}\tlayer={}", path.display(), heat.layer_name);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    match cli.command {
        Command::Generate(a) => generate(cfg, a),
        Command::Preprocess(a) => preprocess_cmd(cfg, a),
        Command::TrainSeg(a) => train_seg_cmd(cfg, a),
        Command::TrainCls(a) => train_cls_cmd(cfg, a),
        Command::FinetuneLoc(a) => finetune_cmd(cfg, a),
        Command::Eval(a) => eval_cmd(cfg, a),
        Command::Experiment(a) => experiment_cmd(cfg, a),
        Command::Gradcam(a) => gradcam_cmd(cfg, a),
    }
}

/// 2 for configuration errors, 1 for diverged training, 3 for everything
/// else the data or file system caused.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_config() => 2,
        Some(Error::NonFinite(_)) => 1,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
