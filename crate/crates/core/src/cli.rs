//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::arap::{arap_deform, ArapOptions};
use crate::data::{generate_synthetic_dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::evaluate_dirs;
use crate::mesh::{load_obj, save_obj, write_correspondence_ply};
use crate::train::{load_data, load_model, train, TrainConfig};
use crate::transfer::transfer;

#[derive(Debug, Parser)]
#[command(name = "posetransfer", version, about = "Mesh pose transfer without correspondence labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic body dataset as OBJ files.
    GenData(GenData),
    /// Train a generator from a key = value config.
    Train(Train),
    /// Put the pose of one mesh onto another.
    Transfer(TransferArgs),
    /// Deform a rest mesh towards a target with the same faces.
    Arap(ArapArgs),
    /// Compare predicted meshes with ground truth by file name.
    Eval(EvalArgs),
    /// Write learned vertex correspondences as a PLY with line elements.
    Corr(CorrArgs),
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub identities: usize,
    #[arg(long, default_value_t = 40)]
    pub poses: usize,
    #[arg(long, default_value_t = 600)]
    pub vertices: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct Train {
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Output directory for the checkpoint, loss log and config copy.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    pub identity: PathBuf,
    pub pose: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Also write the warped mesh.
    #[arg(long)]
    pub warped: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ArapArgs {
    pub rest: PathBuf,
    pub target: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = crate::arap::DEFAULT_ANCHOR_FRACTION)]
    pub anchor_fraction: f64,
    #[arg(long, default_value_t = crate::arap::DEFAULT_ITERATIONS)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub clamp_negative_weights: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long)]
    pub gt_dir: PathBuf,
    /// Per-pair CSV; defaults to `metrics.csv` in the prediction directory.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Aggregate JSON; defaults to `metrics.json` in the prediction directory.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorrArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Horizontal gap between the two meshes in the PLY.
    #[arg(long, default_value_t = 1.5)]
    pub gap: f64,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let cfg = SyntheticConfig {
                n_identities: a.identities,
                n_poses: a.poses,
                vertices_per_mesh: a.vertices,
                seed: a.seed,
            };
            let (data, _, _) = generate_synthetic_dataset(&cfg)?;
            data.save(&a.out)?;
            println!(
                "wrote {} meshes of {} vertices to {}",
                data.n_identities() * data.n_poses(),
                data.vertex_count(),
                a.out.display()
            );
        }
        Command::Train(a) => {
            let mut cfg = match &a.config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            for kv in &a.overrides {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidArgument(format!("expected KEY=VALUE, got {kv:?}")))?;
                cfg.set(k.trim(), v.trim())?;
            }
            if let Some(e) = a.epochs {
                cfg.epochs = e;
                cfg.arap_start_epoch = cfg.arap_start_epoch.min(e);
            }
            if let Some(o) = a.out {
                cfg.out_dir = Some(o);
            }
            if cfg.out_dir.is_none() {
                cfg.out_dir = Some(PathBuf::from("run"));
            }
            cfg.validate()?;
            let data = load_data(&cfg)?;
            let out = train(&data, &cfg)?;
            let dir = cfg.out_dir.as_deref().expect("set above");
            match out.log.last() {
                Some(r) => println!("{} steps, final total loss {:.4}", out.log.len(), r.losses.total),
                None => println!("no training steps"),
            }
            println!("checkpoint in {}", dir.join("checkpoint").display());
        }
        Command::Transfer(a) => {
            let model = load_model(&a.ckpt)?;
            let out = transfer(&load_obj(&a.identity)?, &load_obj(&a.pose)?, &model)?;
            save_obj(&out.output, &a.output)?;
            if let Some(w) = &a.warped {
                save_obj(&out.warped, w)?;
            }
        }
        Command::Arap(a) => {
            let opts = ArapOptions {
                anchor_fraction: a.anchor_fraction,
                iterations: a.iterations,
                seed: a.seed,
                clamp_negative_weights: a.clamp_negative_weights,
            };
            let out = arap_deform(&load_obj(&a.rest)?, &load_obj(&a.target)?, &opts)?;
            save_obj(&out.mesh, &a.output)?;
            println!(
                "energy {:.6e} -> {:.6e} with {} anchors",
                out.energies[0],
                out.energies.last().copied().unwrap_or(f64::NAN),
                out.anchors.len()
            );
        }
        Command::Eval(a) => {
            let report = evaluate_dirs(&a.pred_dir, &a.gt_dir)?;
            write(&a.csv.unwrap_or_else(|| a.pred_dir.join("metrics.csv")), &report.to_csv())?;
            write(&a.json.unwrap_or_else(|| a.pred_dir.join("metrics.json")), &report.to_json())?;
            print!("{}", report.table());
        }
        Command::Corr(a) => {
            let model = load_model(&a.ckpt)?;
            let (ma, mb) = (load_obj(&a.a)?, load_obj(&a.b)?);
            let out = transfer(&ma, &mb, &model)?;
            let matches: Vec<(usize, usize)> = out.matches.iter().copied().enumerate().collect();
            let width = ma.bbox().map_or(1.0, |(lo, hi)| hi[0] - lo[0]);
            write_correspondence_ply(&ma, &mb, &matches, [a.gap * width, 0.0, 0.0], &a.output)?;
        }
    }
    Ok(())
}
