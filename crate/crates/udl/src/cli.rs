//! Command-line interface.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use udl_core::datasets::{AlignmentPair, CryoGenConfig, PairGenConfig};
use udl_core::evaluation::{evaluate_reference, evaluate_synthetic, EvalOptions};
use udl_core::fourier_align::{align, apply_alignment};
use udl_core::imaging::NoiseSpec;
use udl_core::network::{InputRepr, Network};
use udl_core::udl::{calibrate_bias, TrainMode, TrainedModel, Trainer};
use udl_core::Image;

use crate::checkpoint::{load_checkpoint, load_meta, save_checkpoint, write_meta, CheckpointMeta};
use crate::config::{load_run_config, Preset, RunConfig};
use crate::dataset::{load_dataset, write_dataset, DatasetInfo};
use crate::error::{Error, Result};
use crate::generate::{generate_coco, generate_cryoem, CocoOptions, CryoOptions};
use crate::images::{list_images, load_grayscale, save_png, Scaling};
use crate::report::{format_table, write_report_json};

pub const DEVICE_ENV: &str = "UDL_DEVICE";
pub const TRAIN_LOG: &str = "train.log";

#[derive(Debug, Parser)]
#[command(name = "udl", version, about = "Rotation-regression alignment trained without labels")]
pub struct Cli {
    /// Compute device; only `cpu` is available.
    #[arg(long, global = true, env = DEVICE_ENV, default_value = "cpu")]
    pub device: String,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a pair dataset.
    #[command(subcommand)]
    Datagen(Datagen),
    /// Train the rotation network.
    Train(TrainArgs),
    /// Estimate the output bias of a checkpoint from labeled pairs.
    Calibrate(CalibrateArgs),
    /// Align two images; prints `angle_deg dx dy`.
    Align(AlignArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
}

#[derive(Debug, Subcommand)]
pub enum Datagen {
    /// Patch pairs cut from natural images.
    Coco(CocoArgs),
    /// Particle images generated from cluster centers.
    Cryoem(CryoArgs),
}

#[derive(Debug, Args)]
pub struct CocoArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 128)]
    pub patch: usize,
    #[arg(long, default_value_t = 10)]
    pub max_shift: u32,
    /// `none`, `gaussian:SNR` or `salt-pepper:PROPORTION`.
    #[arg(long, default_value = "none", value_parser = parse_noise)]
    pub noise: NoiseSpec,
    #[arg(long, default_value_t = udl_core::imaging::DEFAULT_TEXTURE_THRESHOLD)]
    pub texture_threshold: f64,
    /// Keep the rotation at zero (translation only).
    #[arg(long)]
    pub no_rotation: bool,
    #[arg(long, default_value = "train")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct CryoArgs {
    #[arg(long)]
    pub centers: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Images per center.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Target SNR; omit for clean images.
    #[arg(long)]
    pub snr: Option<f64>,
    #[arg(long, default_value_t = 10)]
    pub max_shift: u32,
    #[arg(long)]
    pub no_rotation: bool,
    #[arg(long, default_value = "train")]
    pub split: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Udl,
    Supervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReprArg {
    Spatial,
    Spectrum,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub input_repr: Option<ReprArg>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Warm start from this checkpoint and continue its iteration count.
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    /// Steps to run in this invocation.
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Labeled dataset; the first `--pairs` records are used.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub pairs: usize,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub dst: PathBuf,
    /// Write the aligned source image here (PNG).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset to evaluate; in reference mode its targets are the images.
    #[arg(long, required_unless_present = "images")]
    pub data: Option<PathBuf>,
    /// Also estimate translations and report their error.
    #[arg(long, conflicts_with = "reference")]
    pub full_align: bool,
    /// Reference image: align everything to it and score the average.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Directory of images for reference mode.
    #[arg(long, requires = "reference", conflicts_with = "data")]
    pub images: Option<PathBuf>,
    /// Correntropy kernel width; defaults to the reference's std.
    #[arg(long, requires = "reference")]
    pub sigma: Option<f64>,
    /// Write the JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Directory for the average image (reference mode).
    #[arg(long, requires = "reference")]
    pub average_out: Option<PathBuf>,
}

fn parse_noise(s: &str) -> std::result::Result<NoiseSpec, String> {
    let spec = match s.split_once(':') {
        None if s == "none" => NoiseSpec::None,
        Some(("gaussian", v)) => NoiseSpec::Gaussian { snr: v.parse().map_err(|e| format!("{v}: {e}"))? },
        Some(("salt-pepper", v)) => NoiseSpec::SaltPepper { proportion: v.parse().map_err(|e| format!("{v}: {e}"))? },
        _ => return Err(format!("expected none, gaussian:SNR or salt-pepper:P, got `{s}`")),
    };
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

/// Process exit code for an error: 2 for usage mistakes, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Usage(_) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.device != "cpu" {
        return Err(Error::Usage(format!("device `{}` is not available; only `cpu` is supported", cli.device)));
    }
    let seed = cli.seed;
    match cli.command {
        Command::Datagen(Datagen::Coco(a)) => datagen_coco(a, seed),
        Command::Datagen(Datagen::Cryoem(a)) => datagen_cryo(a, seed),
        Command::Train(a) => train(a, seed),
        Command::Calibrate(a) => calibrate(a),
        Command::Align(a) => align_cmd(a),
        Command::Eval(a) => eval(a),
    }
}

fn datagen_coco(a: CocoArgs, seed: Option<u64>) -> Result<()> {
    let mut pairs = PairGenConfig::new(a.patch, a.max_shift);
    pairs.noise = a.noise;
    pairs.texture_threshold = a.texture_threshold;
    pairs.random_rotation = !a.no_rotation;
    let opts = CocoOptions {
        source_dir: a.src,
        out_dir: a.out.clone(),
        count: a.count,
        split: a.split,
        seed: seed.unwrap_or(0),
        pairs,
    };
    let m = generate_coco(&opts)?;
    eprintln!("wrote {} pairs of {}x{}", m.count, m.height, m.width);
    println!("{}", a.out.join(crate::dataset::MANIFEST_FILE).display());
    Ok(())
}

fn datagen_cryo(a: CryoArgs, seed: Option<u64>) -> Result<()> {
    let opts = CryoOptions {
        centers_dir: a.centers,
        out_dir: a.out.clone(),
        split: a.split,
        seed: seed.unwrap_or(0),
        cryo: CryoGenConfig { count: a.count, snr: a.snr, max_shift: a.max_shift, random_rotation: !a.no_rotation },
    };
    let m = generate_cryoem(&opts)?;
    eprintln!("wrote {} pairs of {}x{}", m.count, m.height, m.width);
    println!("{}", a.out.join(crate::dataset::MANIFEST_FILE).display());
    Ok(())
}

fn train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut run = match &a.config {
        Some(p) => load_run_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = a.preset {
        run.network.preset = p;
    }
    if let Some(r) = a.input_repr {
        run.network.input_repr = Some(match r {
            ReprArg::Spatial => InputRepr::Spatial,
            ReprArg::Spectrum => InputRepr::Spectrum,
        });
    }
    let t = &mut run.train;
    if let Some(m) = a.mode {
        t.mode = match m {
            ModeArg::Udl => TrainMode::Udl,
            ModeArg::Supervised => TrainMode::Supervised,
        };
    }
    if let Some(v) = a.iterations {
        t.iterations = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = seed {
        t.seed = v;
    }
    if let Some(v) = a.checkpoint_every {
        run.checkpoint_every = v;
    }
    run.train.validate()?;

    let data = load_dataset(&a.data)?;
    let (h, w) = (data.manifest().height, data.manifest().width);
    let (network_cfg, init, start) = match &a.init_from {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            let mut cfg = ck.meta.network.clone();
            if let Some(r) = run.network.input_repr {
                cfg.input_repr = r;
            }
            (cfg, Some(ck.params), ck.meta.iteration)
        }
        None => (run.network.build(h, w), None, 0),
    };
    network_cfg.validate()?;
    if (network_cfg.input_height, network_cfg.input_width) != (h, w) {
        return Err(udl_core::Error::Shape(format!(
            "network expects {}x{} images, dataset has {h}x{w}",
            network_cfg.input_height, network_cfg.input_width
        ))
        .into());
    }
    if run.train.mode == TrainMode::Supervised && data.manifest().records.iter().any(|r| r.angle_deg.is_none()) {
        return Err(udl_core::Error::Protocol("supervised training needs ground truth in every record".into()).into());
    }
    let net = Network::new(network_cfg.clone())?;
    let mut meta = CheckpointMeta::new(network_cfg, run.train.clone());
    meta.dataset_digest = Some(data.digest().to_string());

    fs::create_dir_all(&a.out).map_err(Error::io(&a.out))?;
    let log_path = a.out.join(TRAIN_LOG);
    let log_file = fs::OpenOptions::new()
        .create(true)
        .append(a.init_from.is_some())
        .write(true)
        .truncate(a.init_from.is_none())
        .open(&log_path)
        .map_err(Error::io(&log_path))?;
    let mut log = BufWriter::new(log_file);

    let mut trainer = Trainer::new(&net, run.train.clone(), init, start)?;
    eprintln!(
        "training {} steps from iteration {start} on {} pairs ({:?} mode)",
        run.train.iterations,
        data.len(),
        run.train.mode
    );
    for _ in 0..run.train.iterations {
        let rec = trainer.step(&data)?;
        writeln!(log, "{} {:.6} {:.3e}", rec.iteration, rec.loss, rec.lr).map_err(Error::io(&log_path))?;
        if rec.iteration % 100 == 0 {
            eprintln!("iter {} loss {:.4} lr {:.3e}", rec.iteration, rec.loss, rec.lr);
        }
        if run.checkpoint_every > 0 && rec.iteration % run.checkpoint_every == 0 {
            log.flush().map_err(Error::io(&log_path))?;
            meta.iteration = rec.iteration;
            save_checkpoint(&a.out, &meta, trainer.params())?;
        }
    }
    log.flush().map_err(Error::io(&log_path))?;
    meta.iteration = trainer.iteration();
    save_checkpoint(&a.out, &meta, trainer.params())?;
    println!("{}", a.out.display());
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    if a.pairs == 0 {
        return Err(Error::Usage("--pairs must be at least 1".into()));
    }
    load_meta(&a.ckpt)?;
    let data = load_dataset(&a.data)?;
    if a.pairs > data.len() {
        return Err(Error::Usage(format!("--pairs {} exceeds the {} records in the dataset", a.pairs, data.len())));
    }
    let labeled = (0..a.pairs).map(|i| data.get(i)).collect::<Result<Vec<AlignmentPair>>>()?;
    let (model, mut meta) = load_checkpoint(&a.ckpt)?.into_model()?;
    let calib = calibrate_bias(&model, &labeled)?;
    if let Some(old) = meta.calibration {
        eprintln!("replacing previous calibration c = {:.6} (from {} pairs)", old.c, old.n_pairs);
    }
    meta.calibration = Some(calib);
    write_meta(&a.ckpt, &meta)?;
    println!("c = {:.6} deg from {} pairs (spread {:.4} deg)", calib.c, calib.n_pairs, calib.spread);
    Ok(())
}

fn load_calibrated(dir: &Path) -> Result<(TrainedModel, CheckpointMeta, udl_core::udl::BiasCalibration)> {
    let meta = load_meta(dir)?;
    let calib = meta.calibration.ok_or_else(|| Error::Checkpoint {
        path: dir.to_path_buf(),
        reason: "not calibrated; run `udl calibrate --ckpt <dir> --data <labeled dataset>` first".into(),
    })?;
    let (model, meta) = load_checkpoint(dir)?.into_model()?;
    Ok((model, meta, calib))
}

fn align_cmd(a: AlignArgs) -> Result<()> {
    let (model, _, calib) = load_calibrated(&a.ckpt)?;
    let src = load_grayscale(&a.src)?;
    let dst = load_grayscale(&a.dst)?;
    src.ensure_same_dims(&dst)?;
    let t = align(&model, &calib, &src, &dst)?;
    println!("{:.4} {} {}", t.angle(), t.dx, t.dy);
    if let Some(out) = &a.out {
        save_png(out, &apply_alignment(&src, &t), Scaling::Clamp)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, meta, calib) = load_calibrated(&a.ckpt)?;
    let meta_text = serde_json::to_vec(&meta).expect("meta serializes");
    let mut opts = EvalOptions { full_align: a.full_align, ..EvalOptions::default() };

    let report = match &a.reference {
        None => {
            let dir = a.data.as_ref().expect("clap requires --data without --images");
            let data = load_dataset(dir)?;
            opts.dataset_id = data.manifest().split.clone();
            opts.config_digest = format!("{:08x}-{}", crc32fast::hash(&meta_text), data.digest());
            evaluate_synthetic(&model, &calib, &data, &opts)?
        }
        Some(reference_path) => {
            let reference = load_grayscale(reference_path)?;
            let images: Vec<Image> = match (&a.images, &a.data) {
                (Some(dir), _) => {
                    let paths = list_images(dir)?;
                    if paths.is_empty() {
                        return Err(Error::Image { path: dir.clone(), reason: "no images found".into() });
                    }
                    paths.iter().map(|p| load_grayscale(p)).collect::<Result<_>>()?
                }
                (None, Some(dir)) => load_dataset(dir)?.iter().map(|p| p.map(|p| p.target)).collect::<Result<_>>()?,
                (None, None) => unreachable!("clap requires --data or --images"),
            };
            opts.dataset_id = reference_path.display().to_string();
            opts.config_digest = format!("{:08x}", crc32fast::hash(&meta_text));
            let (report, average) = evaluate_reference(&model, &calib, &images, &reference, a.sigma, &opts)?;
            if let Some(out) = &a.average_out {
                let pair = AlignmentPair { source: reference, target: average.clone(), gt: None, noise: NoiseSpec::None };
                let info = DatasetInfo {
                    split: "average".into(),
                    seed: 0,
                    generator: serde_json::json!({ "kind": "reference_average", "images": images.len() }),
                };
                write_dataset(out, &[pair], &info)?;
                save_png(&out.join("average.png"), &average, Scaling::MinMax)?;
            }
            report
        }
    };
    print!("{}", format_table(&report));
    if let Some(p) = &a.report {
        write_report_json(p, &report)?;
    }
    Ok(())
}
