use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hipseg::config::RunConfig;
use hipseg::consensus::{segment, ModelSet};
use hipseg::dataset::{Dataset, Sample, Split, MANIFEST_NAME};
use hipseg::metrics::{
    ablation_csv, ablation_text, comparison_csv, comparison_text, default_thresholds, orientation_vs_consensus,
    run_ablation, sweep_csv, threshold_sweep, volumetric_dice, AblationSettings, AblationSpec, SweepRow,
};
use hipseg::nifti;
use hipseg::nn::{save_checkpoint, transfer_vgg11, NetworkParams, Vgg11Weights};
use hipseg::phantom::generate_dataset;
use hipseg::training::{train_from, write_metrics_log};
use hipseg::volume::{minmax_normalize, HeatmapSource, ProbabilityVolume};
use hipseg::{Error, Orientation, Result};

#[derive(Parser)]
#[command(name = "hipseg", version, about = "Tri-planar consensus hippocampus segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key (`key=value`); repeatable, wins over --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for every random stream of the command.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Threads for patch generation.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{o}`")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.set("seed", &self.seed.to_string())?;
        cfg.training.workers = self.workers.max(1);
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OrientationArg {
    Sagittal,
    Coronal,
    Axial,
    All,
}

impl OrientationArg {
    fn expand(self) -> Vec<Orientation> {
        match self {
            OrientationArg::Sagittal => vec![Orientation::Sagittal],
            OrientationArg::Coronal => vec![Orientation::Coronal],
            OrientationArg::Axial => vec![Orientation::Axial],
            OrientationArg::All => Orientation::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn config_help() -> String {
    format!(
        "Configuration keys accepted by --config and --set, with defaults:\n\n{}",
        RunConfig::default().to_text()
    )
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantoms, masks and a split manifest.
    #[command(after_long_help = config_help())]
    Synth {
        /// Number of phantoms (at least 10).
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// Output directory.
        #[arg(long)]
        out_dir: PathBuf,
        /// Volume size as X,Y,Z; phantom lengths scale with the smallest extent.
        #[arg(long, default_value = "64,64,64")]
        dims: String,
        #[command(flatten)]
        common: Common,
    },
    /// Train one network per requested orientation.
    #[command(after_long_help = config_help())]
    Train {
        /// Dataset directory containing the manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        orientation: OrientationArg,
        /// Output directory for checkpoints and metrics logs.
        #[arg(long)]
        out: PathBuf,
        /// Skip orientations whose checkpoint already exists.
        #[arg(long, default_value_t = false)]
        resume: bool,
        /// VGG11 weight archive; enables encoder transfer.
        #[arg(long)]
        vgg_weights: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Segment one volume with the three orientation networks.
    #[command(after_long_help = config_help())]
    Predict {
        /// Directory holding sagittal.ckpt, coronal.ckpt and axial.ckpt.
        #[arg(long)]
        models: PathBuf,
        /// Input NIfTI volume.
        #[arg(long)]
        input: PathBuf,
        /// Output mask path.
        #[arg(long)]
        out: PathBuf,
        /// Also write the three orientation heatmaps and the fused heatmap.
        #[arg(long, default_value_t = false)]
        export_heatmaps: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Volumetric Dice of a mask pair, or per-orientation vs consensus on a dataset split.
    #[command(after_long_help = config_help())]
    Evaluate {
        /// Predicted mask.
        #[arg(long, requires = "reference", conflicts_with_all = ["models", "data"])]
        pred: Option<PathBuf>,
        /// Reference mask.
        #[arg(long = "ref", id = "reference")]
        reference: Option<PathBuf>,
        /// Directory of orientation checkpoints.
        #[arg(long, requires = "data")]
        models: Option<PathBuf>,
        /// Dataset directory containing the manifest.
        #[arg(long, requires = "models")]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        data_split: SplitArg,
        /// Directory for the CSV and text reports.
        #[arg(long)]
        report_dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Dice after post-processing for thresholds 0.1 to 0.9.
    #[command(after_long_help = config_help())]
    Sweep {
        /// Fused heatmap volume.
        #[arg(long, requires = "reference", conflicts_with_all = ["models", "data"])]
        heatmap: Option<PathBuf>,
        /// Reference mask.
        #[arg(long = "ref", id = "reference")]
        reference: Option<PathBuf>,
        /// Directory of orientation checkpoints.
        #[arg(long, requires = "data")]
        models: Option<PathBuf>,
        /// Dataset directory containing the manifest.
        #[arg(long, requires = "models")]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        data_split: SplitArg,
        /// CSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train and score the architecture ablation rows.
    #[command(after_long_help = config_help())]
    Ablate {
        /// Spec file, one `name augmentation residual e2d vgg_transfer` per line; defaults to the five standard rows.
        #[arg(long)]
        specs: Option<PathBuf>,
        /// Dataset directory containing the manifest.
        #[arg(long)]
        data: PathBuf,
        /// VGG11 weight archive for rows with transfer.
        #[arg(long)]
        vgg_weights: Option<PathBuf>,
        /// Directory for the CSV and text reports.
        #[arg(long)]
        report_dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            count,
            out_dir,
            dims,
            common,
        } => {
            let cfg = common.run_config()?;
            let mut sized = cfg.clone();
            sized.set("phantom.dims", &dims)?;
            let phantom = cfg.phantom.scaled_to(sized.phantom.dims);
            let data = generate_dataset(count, &phantom, cfg.seed)?;
            let manifest = data.write(&out_dir)?;
            println!(
                "wrote {} phantoms ({} train / {} val / {} test) to {}",
                manifest.entries.len(),
                manifest.count(Split::Train),
                manifest.count(Split::Val),
                manifest.count(Split::Test),
                out_dir.display()
            );
            Ok(())
        }
        Command::Train {
            data,
            orientation,
            out,
            resume,
            vgg_weights,
            common,
        } => {
            let mut cfg = common.run_config()?;
            if let Some(p) = vgg_weights {
                cfg.vgg_weights = Some(p);
                cfg.vgg_transfer = true;
            }
            cfg.validate()?;
            let dataset = load_dataset(&data)?;
            fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let vgg = vgg_source(&cfg)?;
            for orient in orientation.expand() {
                let ckpt_path = ModelSet::checkpoint_path(&out, orient);
                if resume && ckpt_path.is_file() {
                    println!("{orient}: checkpoint exists, skipping");
                    continue;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
                rng.set_stream(orient.axis() as u64);
                let mut params = NetworkParams::build(&cfg.network, &mut rng)?;
                if let Some(v) = &vgg {
                    params = transfer_vgg11(&params, v)?;
                }
                let log_path = out.join(format!("{}_metrics.csv", orient.name()));
                let mut log = vec![];
                let model = train_from(params, &dataset.train, &dataset.val, orient, &cfg.training, &cfg.sampler, |r| {
                    log.push(*r);
                    let _ = write_metrics_log(&log, &log_path);
                })?;
                save_checkpoint(&model.to_checkpoint(), &ckpt_path)?;
                println!(
                    "{orient}: best val dice {:.4} at epoch {} -> {}",
                    model.best_val_dice,
                    model.best_epoch,
                    ckpt_path.display()
                );
            }
            Ok(())
        }
        Command::Predict {
            models,
            input,
            out,
            export_heatmaps,
            common,
        } => {
            let cfg = common.run_config()?;
            let start = Instant::now();
            let models = ModelSet::load(&models)?;
            let raw = nifti::load_volume(&input)?;
            let volume = minmax_normalize(&raw);
            let seg = segment(&volume, &models, &cfg.consensus)?;
            nifti::save_mask(&seg.mask, &raw, &out)?;
            if export_heatmaps {
                for map in seg.heatmaps.iter().chain(std::iter::once(&seg.fused)) {
                    let path = sibling(&out, heatmap_suffix(map));
                    nifti::save_heatmap(map, &raw, &path)?;
                    println!("heatmap: {}", path.display());
                }
            }
            println!("foreground voxels: {}", seg.mask.count());
            println!("wall time: {:.2} s", start.elapsed().as_secs_f64());
            Ok(())
        }
        Command::Evaluate {
            pred,
            reference,
            models,
            data,
            data_split,
            report_dir,
            common,
        } => {
            let cfg = common.run_config()?;
            if let (Some(pred), Some(reference)) = (pred, reference) {
                let dice = volumetric_dice(&nifti::load_mask(pred)?, &nifti::load_mask(reference)?)?;
                println!("dice: {dice:.6}");
                if let Some(dir) = report_dir {
                    write_report(&dir, "evaluate.csv", &format!("dice\n{dice:.6}\n"))?;
                }
                return Ok(());
            }
            let (models, data) = models
                .zip(data)
                .ok_or_else(|| Error::Config("evaluate needs --pred/--ref or --models/--data".into()))?;
            let models = ModelSet::load(&models)?;
            let dataset = load_dataset(&data)?;
            let rows = orientation_vs_consensus(&models, dataset.split(data_split.into()), &cfg.consensus)?;
            print!("{}", comparison_text(&rows));
            if let Some(dir) = report_dir {
                write_report(&dir, "evaluate.csv", &comparison_csv(&rows))?;
                write_report(&dir, "evaluate.txt", &comparison_text(&rows))?;
            }
            Ok(())
        }
        Command::Sweep {
            heatmap,
            reference,
            models,
            data,
            data_split,
            out,
            common,
        } => {
            let cfg = common.run_config()?;
            let c = &cfg.consensus;
            let rows = if let (Some(heatmap), Some(reference)) = (heatmap, reference) {
                let fused = ProbabilityVolume {
                    grid: nifti::load_volume(heatmap)?.grid,
                    source: HeatmapSource::Fused,
                };
                threshold_sweep(&fused, &nifti::load_mask(reference)?, &default_thresholds(), c.connectivity, c.keep_components)?
            } else {
                let (models, data) = models
                    .zip(data)
                    .ok_or_else(|| Error::Config("sweep needs --heatmap/--ref or --models/--data".into()))?;
                let models = ModelSet::load(&models)?;
                let dataset = load_dataset(&data)?;
                mean_sweep(&models, dataset.split(data_split.into()), &cfg)?
            };
            let csv = sweep_csv(&rows);
            print!("{csv}");
            if let Some(path) = out {
                fs::write(&path, csv).map_err(|e| Error::Io { path, source: e })?;
            }
            Ok(())
        }
        Command::Ablate {
            specs,
            data,
            vgg_weights,
            report_dir,
            common,
        } => {
            let mut cfg = common.run_config()?;
            if vgg_weights.is_some() {
                cfg.vgg_weights = vgg_weights;
            }
            let specs = match specs {
                Some(p) => AblationSpec::parse_list(&fs::read_to_string(&p).map_err(|e| Error::Io { path: p, source: e })?)?,
                None => AblationSpec::standard_rows(),
            };
            let vgg = if specs.iter().any(|s| s.vgg_transfer) {
                Some(match &cfg.vgg_weights {
                    Some(p) => Vgg11Weights::from_archive(p)?,
                    None => {
                        log::warn!("no VGG11 weights given; using seeded random stand-in weights");
                        Vgg11Weights::random(&mut ChaCha8Rng::seed_from_u64(cfg.seed))
                    }
                })
            } else {
                None
            };
            let dataset = load_dataset(&data)?;
            let settings = AblationSettings {
                network: cfg.network.clone(),
                training: cfg.training.clone(),
                sampler: cfg.sampler.clone(),
                consensus: cfg.consensus.clone(),
                vgg,
            };
            let rows = run_ablation(&specs, &dataset, &settings)?;
            print!("{}", ablation_text(&rows));
            if let Some(dir) = report_dir {
                write_report(&dir, "ablation.csv", &ablation_csv(&rows))?;
                write_report(&dir, "ablation.txt", &ablation_text(&rows))?;
            }
            Ok(())
        }
    }
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join(MANIFEST_NAME);
    if !manifest.is_file() {
        return Err(Error::Config(format!("manifest not found: expected {}", manifest.display())));
    }
    Dataset::load(dir)
}

fn vgg_source(cfg: &RunConfig) -> Result<Option<Vgg11Weights>> {
    if !cfg.vgg_transfer {
        return Ok(None);
    }
    let path = cfg
        .vgg_weights
        .as_ref()
        .ok_or_else(|| Error::Config("vgg_transfer is on but vgg_weights is not set".into()))?;
    Vgg11Weights::from_archive(path).map(Some)
}

fn heatmap_suffix(map: &ProbabilityVolume) -> &'static str {
    match map.source {
        HeatmapSource::Orientation(o) => o.name(),
        HeatmapSource::Fused => "fused",
    }
}

/// `out` with `_<tag>` inserted before its NIfTI extension.
fn sibling(out: &Path, tag: &str) -> PathBuf {
    let name = out.file_name().and_then(|n| n.to_str()).unwrap_or("mask.nii.gz");
    let (stem, ext) = if let Some(s) = name.strip_suffix(".nii.gz") {
        (s, ".nii.gz")
    } else if let Some(s) = name.strip_suffix(".nii") {
        (s, ".nii")
    } else {
        (name, ".nii.gz")
    };
    out.with_file_name(format!("{stem}_{tag}{ext}"))
}

fn write_report(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
}

/// Sweep averaged over the volumes of a split.
fn mean_sweep(models: &ModelSet, samples: &[Sample], cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    if samples.is_empty() {
        return Err(Error::Config("the selected split is empty".into()));
    }
    let c = &cfg.consensus;
    let ths = default_thresholds();
    let mut sums = vec![0.0f64; ths.len()];
    for s in samples {
        let seg = segment(&s.volume, models, c)?;
        for (acc, row) in sums
            .iter_mut()
            .zip(threshold_sweep(&seg.fused, &s.mask, &ths, c.connectivity, c.keep_components)?)
        {
            *acc += row.dice;
        }
    }
    Ok(ths
        .into_iter()
        .zip(sums)
        .map(|(threshold, sum)| SweepRow {
            threshold,
            dice: sum / samples.len() as f64,
        })
        .collect())
}
