use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use wavemamba_core::hsi_io::{self, LabelMap, Palette};
use wavemamba_core::metrics::MetricsReport;
use wavemamba_core::preprocess::SplitFractions;
use wavemamba_core::train::{self, Dataset, TrainConfig};

#[derive(Parser)]
#[command(name = "wavemamba", version, about = "Train and evaluate WaveMamba hyperspectral classifiers")]
struct Cli {
    /// Worker threads for evaluation and map prediction.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a scene and write checkpoint, history and per-split metrics.
    Train {
        #[command(flatten)]
        scene: Scene,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint on one split of a scene.
    Eval {
        #[command(flatten)]
        scene: Scene,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify every pixel with a full window and write a PPM map.
    Map {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and test over a grid of patch sizes and training percentages.
    Sweep {
        #[command(flatten)]
        scene: Scene,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long, value_delimiter = ',', required = true, value_parser = parse_patch)]
        patch_sizes: Vec<usize>,
        /// Training percentages, e.g. 5,10,25.
        #[arg(long, value_delimiter = ',', required = true, value_parser = parse_percent)]
        train_fracs: Vec<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train with and without the wavelet stage and report both.
    Ablate {
        #[command(flatten)]
        scene: Scene,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print header information for a cube and/or label map.
    Inspect {
        #[arg(long, required_unless_present = "labels")]
        cube: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Scene {
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    labels: PathBuf,
}

/// Overrides applied on top of `--config`.
#[derive(Args)]
struct TrainFlags {
    /// JSON file with TrainConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random stream [default: 3407].
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_parser = parse_patch)]
    patch: Option<usize>,
    /// Bands kept after reduction.
    #[arg(long)]
    bands: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    state_dim: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long, value_parser = parse_percent)]
    train_frac: Option<f64>,
    #[arg(long, value_parser = parse_percent)]
    val_frac: Option<f64>,
    #[arg(long)]
    no_wavelet: bool,
    /// Report train_time_s as 0 so reruns produce identical files.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
    All,
}

fn parse_patch(s: &str) -> std::result::Result<usize, String> {
    let p: usize = s.parse().map_err(|e| format!("{e}"))?;
    if p == 0 || p % 2 == 1 {
        return Err(format!("patch size must be even and positive, got {p}"));
    }
    Ok(p)
}

fn parse_percent(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if !(v > 0.0 && v < 100.0) {
        return Err(format!("percentage must be in (0, 100), got {v}"));
    }
    Ok(v)
}

impl TrainFlags {
    fn resolve(&self, labels: &LabelMap) -> Result<TrainConfig> {
        let mut cfg: TrainConfig = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($flag:expr, $field:expr) => {
                if let Some(v) = $flag {
                    $field = v;
                }
            };
        }
        set!(self.seed, cfg.seed);
        set!(self.epochs, cfg.epochs);
        set!(self.batch_size, cfg.batch_size);
        set!(self.lr, cfg.lr);
        set!(self.patch, cfg.model.patch_side);
        set!(self.bands, cfg.model.reduced_bands);
        set!(self.embed_dim, cfg.model.embed_dim);
        set!(self.state_dim, cfg.model.state_dim);
        set!(self.dropout, cfg.model.dropout);
        if self.train_frac.is_some() || self.val_frac.is_some() {
            let tr = self.train_frac.unwrap_or(cfg.split.train);
            let va = self.val_frac.unwrap_or(cfg.split.val);
            cfg.split = SplitFractions::new(tr, va, 100.0 - tr - va)?;
        }
        if self.no_wavelet {
            cfg.wavelet_enabled = false;
        }
        cfg.model.num_classes = labels.num_classes();
        cfg.model.wavelet = cfg.wavelet_enabled;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_scene(scene: &Scene) -> Result<(hsi_io::HsiCube, LabelMap)> {
    let cube = hsi_io::load_cube(&scene.cube)?;
    let labels = hsi_io::load_labels(&scene.labels)?;
    if (cube.height(), cube.width()) != (labels.height(), labels.width()) {
        bail!(
            "cube is {}x{} but labels are {}x{}",
            cube.height(),
            cube.width(),
            labels.height(),
            labels.width()
        );
    }
    Ok((cube, labels))
}

fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    fs::write(path, report.to_json()? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn split_indices(data: &Dataset, split: SplitName) -> Vec<usize> {
    match split {
        SplitName::Train => data.split.train.clone(),
        SplitName::Val => data.split.validation.clone(),
        SplitName::Test => data.split.test.clone(),
        SplitName::All => (0..data.patches.len()).collect(),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Train { scene, flags, out_dir } => {
            let (cube, labels) = load_scene(&scene)?;
            let cfg = flags.resolve(&labels)?;
            let data = train::prepare(&cube, &labels, &cfg)?;
            let (params, hist) = train::train(&data, &cfg)?;
            let time = if flags.no_timing { 0.0 } else { hist.wall_clock_s };
            fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            train::save_model(&params, &cfg, out_dir.join("model.wmck"))?;
            fs::write(out_dir.join("history.csv"), hist.to_csv())?;
            for (name, split) in [("train", SplitName::Train), ("val", SplitName::Val), ("test", SplitName::Test)] {
                let idx = split_indices(&data, split);
                if idx.is_empty() {
                    eprintln!("warning: {name} split is empty, no metrics written");
                    continue;
                }
                let report = train::evaluate(&params, &data, &idx, &cfg, time)?;
                write_report(&report, &out_dir.join(format!("metrics_{name}.json")))?;
                if name == "test" {
                    println!("test OA {:.4} AA {:.4} kappa {:.4}", report.oa, report.aa, report.kappa);
                }
            }
        }
        Command::Eval {
            scene,
            checkpoint,
            split,
            out,
        } => {
            let (params, cfg) = train::load_model(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let (cube, labels) = load_scene(&scene)?;
            if labels.num_classes() != cfg.model.num_classes {
                bail!(
                    "checkpoint has {} classes but {} has {}",
                    cfg.model.num_classes,
                    scene.labels.display(),
                    labels.num_classes()
                );
            }
            let data = train::prepare(&cube, &labels, &cfg)?;
            let report = train::evaluate(&params, &data, &split_indices(&data, split), &cfg, 0.0)?;
            match out {
                Some(path) => write_report(&report, &path)?,
                None => println!("{}", report.to_json()?),
            }
        }
        Command::Map { cube, checkpoint, out } => {
            let (params, cfg) = train::load_model(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let cube = hsi_io::load_cube(&cube)?;
            let (reduced, _) = train::preprocess_cube(&cube, &cfg)?;
            let map = train::predict_map(&params, &reduced, &cfg.model_config())?;
            hsi_io::render_map(&map, &Palette::default_for(cfg.model.num_classes), &out)?;
        }
        Command::Sweep {
            scene,
            flags,
            patch_sizes,
            train_fracs,
            out_dir,
        } => {
            let (cube, labels) = load_scene(&scene)?;
            let cfg = flags.resolve(&labels)?;
            let mut rows = train::sweep(&cube, &labels, &cfg, &patch_sizes, &train_fracs)?;
            if flags.no_timing {
                rows.iter_mut().for_each(|r| r.train_time_s = 0.0);
            }
            fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            fs::write(out_dir.join("sweep.csv"), train::sweep_csv(&rows))?;
        }
        Command::Ablate { scene, flags, out_dir } => {
            let (cube, labels) = load_scene(&scene)?;
            let cfg = flags.resolve(&labels)?;
            let data = train::prepare(&cube, &labels, &cfg)?;
            let mut pair = train::ablate_wavelet(&data, &cfg)?;
            if flags.no_timing {
                pair.with_wavelet.train_time_s = 0.0;
                pair.without_wavelet.train_time_s = 0.0;
            }
            fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            fs::write(out_dir.join("ablation.json"), serde_json::to_string_pretty(&pair)? + "\n")?;
            println!(
                "OA with wavelet {:.4}, without {:.4}",
                pair.with_wavelet.oa, pair.without_wavelet.oa
            );
        }
        Command::Inspect { cube, labels } => {
            if let Some(path) = cube {
                let cube = hsi_io::load_cube(&path)?;
                println!("height: {}", cube.height());
                println!("width: {}", cube.width());
                println!("bands: {}", cube.bands());
            }
            if let Some(path) = labels {
                let labels = hsi_io::load_labels(&path)?;
                println!("label height: {}", labels.height());
                println!("label width: {}", labels.width());
                println!("classes: {}", labels.num_classes());
                let hist = labels.histogram();
                println!("unlabeled: {}", hist[0]);
                for (k, n) in hist.iter().enumerate().skip(1) {
                    println!("class {k}: {n}");
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
