use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use mtmed3d::dataio::{read_manifest, synth_dataset, PhantomSpec};
use mtmed3d::metrics::write_layer_macs_csv;
use mtmed3d::pipeline::{
    self, ablate, evaluate_checkpoint, five_fold_split, infer_case, load_checkpoint, load_preprocessed,
    measure_efficiency, sharing_summary, split_cases, EvalSplit, MultiTaskModel, RunConfig, ENCODER_PREFIX,
};

#[derive(Parser)]
#[command(name = "mtmed3d", version, about = "Multi-task 3D brain tumour segmentation, detection and grading")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Smoke,
}

#[derive(Args)]
struct ConfigArgs {
    /// YAML run configuration; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    device: Option<String>,
    /// Dataset root (folder with manifest.csv).
    #[arg(long)]
    data: Option<PathBuf>,
}

impl ConfigArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(f) = self.fold {
            cfg.fold = f;
        }
        if let Some(d) = &self.device {
            cfg.device = d.clone();
        }
        if let Some(d) = &self.data {
            cfg.data.root = d.clone();
        }
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => match self.preset {
                Preset::Default => RunConfig::default(),
                Preset::Smoke => RunConfig::smoke(),
            },
        };
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom dataset in the BraTS folder layout.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 15)]
        n: usize,
        /// Cubic volume extent in voxels.
        #[arg(long, default_value_t = 64)]
        extent: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the grade-stratified five-fold split of a dataset.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the folds as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the configured fold; checkpoints, log and reports go to --out.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint (single centre crop) and write report.json.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        device: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Segment, detect and grade one unlabelled case folder.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Folder holding <id>_t1/_t1ce/_t2/_flair volumes.
        #[arg(long)]
        case: PathBuf,
        /// Case id; defaults to the folder name.
        #[arg(long)]
        case_id: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count parameters and MACs, time inference and size the checkpoint.
    Profile {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Per-layer MACs CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        repeats: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        /// Also count the three single-task baselines.
        #[arg(long)]
        sharing: bool,
    },
    /// Train and evaluate the {FPN, PANet} × {GradNorm, MGDA} grid.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { out, n, extent, seed } => {
            let spec = PhantomSpec::for_extent([extent; 3]);
            spec.validate().map_err(anyhow::Error::msg)?;
            let entries = synth_dataset(&out, n, &spec, seed)?;
            let hgg = entries.iter().filter(|e| e.grade == mtmed3d::datamodel::Grade::Hgg).count();
            println!("wrote {} cases ({hgg} HGG, {} LGG) to {}", entries.len(), entries.len() - hgg, out.display());
        }
        Command::Split { data, seed, out } => {
            let cases: Vec<_> = read_manifest(&data)?.into_iter().map(|e| (e.case_id, e.grade)).collect();
            let folds = five_fold_split(&cases, seed)?;
            for (k, f) in folds.iter().enumerate() {
                println!("fold {k}: {} train, val = {}", f.train.len(), f.val.join(","));
            }
            if let Some(p) = out {
                std::fs::write(&p, serde_json::to_string_pretty(&folds)?).with_context(|| p.display().to_string())?;
            }
        }
        Command::Train { cfg, out } => {
            let cfg = cfg.resolve()?;
            let outcome = pipeline::train(&cfg, &out)?;
            println!("trained {} steps; best checkpoint {}", outcome.steps, outcome.best_checkpoint.display());
            if let Some(r) = outcome.best_report {
                println!("{}", serde_json::to_string_pretty(&r)?);
            }
        }
        Command::Evaluate { checkpoint, split, out, seed, fold, device, data } => {
            let args = ConfigArgs {
                config: None,
                preset: Preset::Default,
                seed,
                fold,
                device,
                data,
            };
            let split = match split {
                SplitArg::Train => EvalSplit::Train,
                SplitArg::Val => EvalSplit::Val,
                SplitArg::All => EvalSplit::All,
            };
            let res = evaluate_checkpoint(&checkpoint, |c| args.apply(c), split, &out)?;
            println!("{}", serde_json::to_string_pretty(&res.report)?);
        }
        Command::Infer { checkpoint, case, case_id, out } => {
            let loaded = load_checkpoint(&checkpoint)?;
            let id = match case_id {
                Some(id) => id,
                None => folder_name(&case)?,
            };
            let res = infer_case(&loaded.model, &loaded.config, &case, &id, &out)?;
            if let Some(p) = &res.seg_path {
                println!("segmentation: {}", p.display());
            }
            if let Some(d) = &res.detections {
                println!("detections: {}", d.len());
            }
            if let Some(g) = &res.grade {
                println!("grade: {} (p_HGG = {:.3})", g.grade, g.hgg_probability);
            }
        }
        Command::Profile { cfg, csv, repeats, warmup, sharing } => {
            let cfg = cfg.resolve()?;
            let model = MultiTaskModel::<f32>::new(&cfg.model, cfg.seed)?;
            let enc = model.store.num_scalars_with_prefix(&format!("{ENCODER_PREFIX}."));
            println!("encoder params: {enc}");
            info!("timing {repeats} passes at {:?}", cfg.data.crop_size);
            let (eff, rows) = measure_efficiency(&model, &cfg, cfg.data.crop_size, warmup, repeats)?;
            println!("{}", serde_json::to_string_pretty(&eff)?);
            if let Some(p) = csv {
                write_layer_macs_csv(&p, &rows).with_context(|| p.display().to_string())?;
            }
            drop(model);
            if sharing {
                let s = sharing_summary(&cfg.model)?;
                println!(
                    "multi {} | seg_only {} + det_only {} + cls_only {} = {} | reduction {:.1}%",
                    s.multi,
                    s.seg_only,
                    s.det_only,
                    s.cls_only,
                    s.singles(),
                    100.0 * s.reduction()
                );
            }
        }
        Command::Ablate { cfg, out } => {
            let cfg = cfg.resolve()?;
            let cases = load_preprocessed(&cfg)?;
            let (train, val) = split_cases(&cfg, &cases)?;
            if val.is_empty() {
                bail!("fold {} has no validation cases", cfg.fold);
            }
            for r in ablate(&cfg, &train, &val, &out)? {
                println!(
                    "{:>5} {:>8}: dice {:?} acc {:?} mAP {:?}",
                    r.neck.to_string(),
                    r.balance.to_string(),
                    r.report.dice,
                    r.report.acc,
                    r.report.map_sweep
                );
            }
        }
    }
    Ok(())
}

fn folder_name(p: &Path) -> Result<String> {
    p.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_string)
        .with_context(|| format!("cannot take a case id from {}", p.display()))
}
