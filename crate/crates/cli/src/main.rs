use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use hdc::bench::{bench_csv, run_bench};
use hdc::config::TrainConfig;
use hdc::data::{gen_synthetic, load_manifest, write_manifest, SyntheticSpec};
use hdc::inference::{decode_labels, default_stride, predict_volume};
use hdc::metrics::{evaluate, metrics_csv};
use hdc::nn::{BackboneSpec, Model, Network};
use hdc::train::train;
use hdc::volume::{read_vvol, write_vvol, Volume};
use hdc::{checkpoint, pds, pus, Error, Result, ShuffleFactors};

#[derive(Parser)]
#[command(name = "hdc", version, about = "Volumetric segmentation with HDC/DUC-wrapped U-nets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset with train/test manifests.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 25)]
        count: usize,
        /// Volumes listed in train.tsv; the rest go to test.tsv.
        #[arg(long, default_value_t = 20)]
        train_count: usize,
        #[arg(long, default_value = "48,48,48")]
        extent: String,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
    },
    /// Train from a key=value config; trailing `--key value` pairs override it.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
    /// Predict probability and label volumes for one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to config.txt next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_probs: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
        /// Defaults to half the patch.
        #[arg(long)]
        stride: Option<String>,
    },
    /// Per-class Dice, ASD and HD between two label volumes.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref", value_name = "REF")]
        reference: PathBuf,
        /// CSV destination; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Volume name written into the CSV.
        #[arg(long)]
        name: Option<String>,
    },
    /// Periodic down- or up-shuffling of a VVOL file.
    Shuffle {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        factors: String,
        #[arg(long, value_enum)]
        direction: Direction,
    },
    /// Time forward+backward passes and count backbone activations per factor.
    Bench {
        /// Space- or semicolon-separated factor triples.
        #[arg(long, default_value = "1,1,1 2,2,2 4,4,2")]
        factors: String,
        #[arg(long, default_value = "32,32,32")]
        patch: String,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 16)]
        hdc_features: usize,
        #[arg(long, default_value = "16,32")]
        widths: String,
        #[arg(long, default_value_t = 2)]
        convs_per_level: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    Down,
    Up,
}

fn parse_usizes(what: &str, s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("invalid {what} '{s}'"))))
        .collect()
}

fn parse_triple(what: &str, s: &str) -> Result<[usize; 3]> {
    parse_usizes(what, s)?
        .try_into()
        .map_err(|_| Error::Config(format!("{what} needs three comma-separated values, got '{s}'")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn gen_data(out: &Path, seed: u64, count: usize, train_count: usize, extent: &str, classes: usize, noise: f64) -> Result<()> {
    let extent = parse_triple("extent", extent)?;
    if extent.contains(&0) {
        return Err(Error::Config(format!("extents must be positive, got {extent:?}")));
    }
    if train_count > count {
        return Err(Error::Config(format!("train_count {train_count} exceeds count {count}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!("noise must be non-negative, got {noise}")));
    }
    let spec = SyntheticSpec { extent, class_count: classes, noise_sigma: noise, ..Default::default() };
    let samples = gen_synthetic(seed, count, &spec)?;
    create_dir(out)?;
    let mut entries = Vec::with_capacity(count);
    for (i, s) in samples.iter().enumerate() {
        let (img, lab) = (format!("img_{i:03}.vvol"), format!("lab_{i:03}.vvol"));
        write_vvol(&s.image, out.join(&img))?;
        write_vvol(&s.labels, out.join(&lab))?;
        entries.push((img, lab));
    }
    write_manifest(out.join("train.tsv"), &entries[..train_count])?;
    write_manifest(out.join("test.tsv"), &entries[train_count..])?;
    println!("wrote {count} volumes to {} ({train_count} train, {} test)", out.display(), count - train_count);
    Ok(())
}

fn cmd_train(config: Option<&Path>, overrides: &[String]) -> Result<()> {
    let mut cfg = match config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    let train_set = load_manifest(&cfg.train_manifest)?;
    let val_set = if cfg.val_manifest.as_os_str().is_empty() { Vec::new() } else { load_manifest(&cfg.val_manifest)? };
    create_dir(&cfg.out_dir)?;
    let out = train(&cfg, &train_set, &val_set, &mut |r| {
        eprintln!("iteration {}: val_loss {:.6} mean dice {:.4}", r.iteration, r.loss, r.mean_dice());
    })?;
    checkpoint::save(&out.params, cfg.out_dir.join("model.vckp"))?;
    write_text(&cfg.out_dir.join("config.txt"), &cfg.to_text())?;
    write_text(&cfg.out_dir.join("train_log.csv"), &out.log.train_csv())?;
    write_text(&cfg.out_dir.join("val_log.csv"), &out.log.val_csv(cfg.classes))?;
    let last = out.log.train.last().expect("at least one iteration");
    println!(
        "trained {} iterations, final loss {:.6}; wrote {}",
        last.iteration,
        last.loss,
        cfg.out_dir.join("model.vckp").display()
    );
    Ok(())
}

fn infer(checkpoint_path: &Path, config: Option<&Path>, image: &Path, out_probs: &Path, out_labels: &Path, stride: Option<&str>) -> Result<()> {
    let config_path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint_path.with_file_name("config.txt"),
    };
    let params = checkpoint::load(checkpoint_path)?;
    let cfg = TrainConfig::load(&config_path)?;
    let model = Model::new(Network::build(&cfg.backbone())?, params, cfg.patch)?;
    let vol = read_vvol(image)?.expect_image()?;
    if vol.shape().c != cfg.in_channels {
        return Err(Error::Data(format!("image has {} channels, model expects {}", vol.shape().c, cfg.in_channels)));
    }
    let stride = match stride {
        Some(s) => parse_triple("stride", s)?,
        None => default_stride(cfg.patch),
    };
    let probs = predict_volume(&model, &vol.tensor, stride)?;
    let labels = decode_labels(&probs)?;
    write_vvol(&Volume::probabilities(probs, vol.spacing), out_probs)?;
    write_vvol(&Volume::labels(labels, vol.spacing, cfg.classes as u32)?, out_labels)?;
    Ok(())
}

fn eval(pred: &Path, reference: &Path, out: Option<&Path>, name: Option<&str>) -> Result<()> {
    let p = read_vvol(pred)?.expect_labels()?;
    let r = read_vvol(reference)?.expect_labels()?;
    let name = name.map(str::to_string).unwrap_or_else(|| {
        pred.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "volume".into())
    });
    let csv = metrics_csv(&evaluate(&name, &p, &r)?);
    match out {
        Some(path) => write_text(path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn shuffle(input: &Path, output: &Path, factors: &str, direction: Direction) -> Result<()> {
    let f: ShuffleFactors = factors.parse()?;
    let vol = read_vvol(input)?;
    let tensor = match direction {
        Direction::Down => pds(&vol.tensor, f)?,
        Direction::Up => pus(&vol.tensor, f)?,
    };
    write_vvol(&Volume { tensor, ..vol }, output)
}

#[allow(clippy::too_many_arguments)]
fn bench(factors: &str, patch: &str, reps: usize, hdc_features: usize, widths: &str, convs_per_level: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    let factors = factors
        .split([' ', ';'])
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<ShuffleFactors>>>()?;
    if factors.is_empty() {
        return Err(Error::Config("no factors given".into()));
    }
    let template = BackboneSpec { hdc_features, widths: parse_usizes("widths", widths)?, convs_per_level, ..Default::default() };
    let rows = run_bench(&template, &factors, parse_triple("patch", patch)?, reps, seed)?;
    let csv = bench_csv(&rows);
    match out {
        Some(path) => write_text(path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, seed, count, train_count, extent, classes, noise } => {
            gen_data(&out, seed, count, train_count, &extent, classes, noise)
        }
        Command::Train { config, overrides } => cmd_train(config.as_deref(), &overrides),
        Command::Infer { checkpoint, config, image, out_probs, out_labels, stride } => {
            infer(&checkpoint, config.as_deref(), &image, &out_probs, &out_labels, stride.as_deref())
        }
        Command::Eval { pred, reference, out, name } => eval(&pred, &reference, out.as_deref(), name.as_deref()),
        Command::Shuffle { input, output, factors, direction } => shuffle(&input, &output, &factors, direction),
        Command::Bench { factors, patch, reps, hdc_features, widths, convs_per_level, seed, out } => {
            bench(&factors, &patch, reps, hdc_features, &widths, convs_per_level, seed, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class() as u8)
        }
    }
}
