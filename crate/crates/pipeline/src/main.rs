use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use apnet_core::{
    complete_image, grid_downsample, project_to_aerial, read_cloud, write_cloud, CloudFormat, RasterGeometry,
};
use apnet_core::aerial::dump_raster;
use apnet_model::FusionStrategy;
use apnet_pipeline::train::{self, EpochRecord, CHECKPOINT_FILE, CONFIG_FILE};
use apnet_pipeline::{generate_scene, gradcheck, prepare_sample, ExperimentConfig, Profile, CLASS_COUNT};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "apnet", version, about = "Dual-branch aerial/point segmentation on synthetic urban scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML file layered over the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "small")]
    profile: Profile,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    strategy: Option<FusionStrategy>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p, self.profile).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::profile(self.profile),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(s) = self.strategy {
            c.strategy = s;
        }
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write one synthetic scene as xyzrgbl text.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Project a cloud to a completed aerial raster and dump it.
    Project {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Grid-downsample a cloud.
    Downsample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Train one strategy and write metrics, checkpoint and config snapshot.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a trained run directory on held-out scenes.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Run directory holding the checkpoint and config snapshot.
        #[arg(long)]
        run: PathBuf,
        /// Master seed of the evaluation scenes (defaults to the validation split).
        #[arg(long)]
        split_seed: Option<u64>,
    },
    /// Train and compare strategies over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "a-only,p-only,addition,concatenation,naive-gaf,gaf")]
        strategies: Vec<FusionStrategy>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Dump the completed aerial raster of one scene crop.
    DumpAerial {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference checks of every operation, branch and loss.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
}

fn print_epoch(r: &EpochRecord) {
    let heads: Vec<String> =
        r.validation.heads.iter().map(|(h, m)| format!("{} {:.2}", h.name(), 100.0 * m.miou)).collect();
    eprintln!("epoch {:3}  loss {:.4}  lr {:.2e}  val mIoU: {}", r.epoch, r.loss.total, r.lr, heads.join(", "));
}

fn cloud_out(config: &ExperimentConfig, default: &str) -> PathBuf {
    if config.out.extension().is_some() {
        config.out.clone()
    } else {
        config.out.join(default)
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { common } => {
            let c = common.resolve()?;
            let cloud = generate_scene(c.seed, &c.scene)?;
            let path = cloud_out(&c, &format!("scene-{}.xyzrgbl", c.seed));
            ensure_parent(&path)?;
            write_cloud(&cloud, &path, CloudFormat::XyzrgblText)?;
            println!("{} points -> {}", cloud.len(), path.display());
        }
        Command::Project { common, input } => {
            let c = common.resolve()?;
            let cloud = read_input(&input)?;
            let geometry = RasterGeometry::for_cloud(&cloud, c.raster.pixel_size, c.raster.width, c.raster.height)?;
            let raster = complete_image(&project_to_aerial(&cloud, geometry), c.raster.completion_passes);
            std::fs::create_dir_all(&c.out)?;
            let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("raster");
            let dump = dump_raster(&raster, &c.out, stem)?;
            println!("{} of {} pixels valid -> {}", raster.valid_count(), raster.geometry.pixel_count(), dump.header.display());
        }
        Command::Downsample { common, input } => {
            let c = common.resolve()?;
            let cloud = read_input(&input)?;
            let down = grid_downsample(&cloud, c.sampling.grid_size)?;
            let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("cloud");
            let path = cloud_out(&c, &format!("{stem}-down.xyzrgbl"));
            ensure_parent(&path)?;
            write_cloud(&down.as_cloud(), &path, CloudFormat::XyzrgblText)?;
            println!("{} -> {} points -> {}", cloud.len(), down.len(), path.display());
        }
        Command::Train { common } => {
            let c = common.resolve()?;
            let start = Instant::now();
            let outcome = train::train(&c, Some(&c.out), print_epoch)?;
            let eval = &outcome.last().validation;
            println!("{}", summary_line(eval));
            println!("wrote {} in {:.1?}", c.out.display(), start.elapsed());
        }
        Command::Evaluate { common, run, split_seed } => {
            let mut c = ExperimentConfig::load(&run.join(CONFIG_FILE), common.profile)
                .with_context(|| format!("reading the config snapshot in {}", run.display()))?;
            if let Some(s) = common.strategy {
                c.strategy = s;
            }
            let out = common.out.clone();
            let eval = train::evaluate(&c, &run.join(CHECKPOINT_FILE), split_seed, out.as_deref())?;
            println!("head,{}", apnet_model::Metrics::csv_header(CLASS_COUNT));
            for (h, m) in &eval.heads {
                println!("{},{}", h.name(), m.csv_fields());
            }
        }
        Command::Ablate { common, strategies, seeds } => {
            let c = common.resolve()?;
            let rows = train::ablate(&c, &strategies, &seeds, Some(&c.out), |s, seed, r| {
                if r.epoch == c.train.epochs {
                    eprintln!("{s} seed {seed}: {}", summary_line(&r.validation));
                }
            })?;
            let table = train::ablation_table(&rows);
            std::fs::write(c.out.join("ablation.txt"), &table)?;
            print!("{table}");
        }
        Command::DumpAerial { common } => {
            let c = common.resolve()?;
            let cloud = generate_scene(c.seed, &c.scene)?;
            let sample = prepare_sample(&cloud, [c.scene.extent / 2.0; 2], &c)?;
            std::fs::create_dir_all(&c.out)?;
            let dump = dump_raster(&sample.raster, &c.out, &format!("aerial-{}", c.seed))?;
            println!("{}", dump.header.display());
        }
        Command::GradCheck { common, trials } => {
            let c = common.resolve()?;
            let mut failed = false;
            for s in gradcheck::run_suite(trials, c.seed)? {
                println!("{:<36} {:>4} trials  worst {:.3e}  {}", s.name, s.trials, s.worst, if s.passed() { "ok" } else { "FAILED" });
                failed |= !s.passed();
            }
            if failed {
                bail!("gradient check failures");
            }
        }
    }
    Ok(())
}

fn read_input(path: &Path) -> Result<apnet_core::LabeledPointCloud> {
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => CloudFormat::Ply { class_count: CLASS_COUNT },
        _ => CloudFormat::XyzrgblText,
    };
    read_cloud(path, format).with_context(|| format!("reading {}", path.display()))
}

fn summary_line(eval: &train::Evaluation) -> String {
    let parts: Vec<String> = eval
        .heads
        .iter()
        .map(|(h, m)| {
            let mark = if *h == eval.final_head { "*" } else { "" };
            format!("{}{mark}: OA {:.2} mIoU {:.2}", h.name(), 100.0 * m.oa, 100.0 * m.miou)
        })
        .collect();
    parts.join("  ")
}
