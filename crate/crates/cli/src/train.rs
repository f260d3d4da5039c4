use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use motron_core::model::{ModelConfig, Motron};
use motron_core::training::{parse_log_csv, split_sequences, train, TrainConfig, TrainOptions, WindowSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{create_dir, load_dataset};
use crate::manifest::{self, sha256_file, RunManifest};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory with skeleton.txt and motion_*.txt.
    #[arg(long)]
    pub data: PathBuf,
    /// `key = value` training config.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let cfg = TrainConfig::parse(&text).with_context(|| format!("in config {}", args.config.display()))?;
    cfg.validate().with_context(|| format!("in config {}", args.config.display()))?;
    let (skeleton, seqs, _) = load_dataset(&args.data)?;
    let classes = skeleton.class_map()?;

    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train_seqs, val_seqs) = split_sequences(seqs, cfg.val_fraction, &mut split_rng);
    if val_seqs.is_empty() {
        bail!("val_fraction {} leaves no validation sequences", cfg.val_fraction);
    }
    let windows = |s| WindowSet::from_sequences(s, cfg.history, cfg.target_horizon, cfg.window_stride);
    let train_set = windows(&train_seqs).context("cutting training windows")?;
    let val_set = windows(&val_seqs).context("cutting validation windows")?;
    log::info!("{} training and {} validation windows", train_set.len(), val_set.len());

    create_dir(&args.out)?;
    let ckpt = args.out.join(CHECKPOINT_FILE);
    let log_path = args.out.join(LOG_FILE);
    let (mut model, previous) = match &cfg.resume {
        Some(r) => resume(Path::new(r), &classes)?,
        None => {
            let mcfg = ModelConfig { latent_grad_flow: cfg.latent_grad_flow, ..ModelConfig::new(classes, cfg.hidden, cfg.modes, cfg.target_horizon)? };
            (Motron::new(mcfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?, Vec::new())
        }
    };
    if previous.is_empty() || !ckpt.exists() {
        model.save(&ckpt)?;
    }

    let mut manifest = RunManifest::new("train");
    manifest.config = Some(args.config.clone());
    manifest.seed = Some(cfg.seed);
    manifest.inputs.push(args.data.clone());
    if let Some(r) = &cfg.resume {
        manifest.inputs.push(r.into());
    }
    manifest.outputs = vec![ckpt.clone(), log_path.clone()];

    let opts = TrainOptions { skeleton: Some(&skeleton), checkpoint: Some(&ckpt), log: Some(&log_path), previous };
    let outcome = train(&mut model, &train_set, &val_set, &cfg, opts);
    manifest.checkpoint_sha256 = Some(sha256_file(&ckpt)?);
    manifest.write(&args.out.join(manifest::FILE_NAME))?;
    let report = outcome.with_context(|| format!("training aborted; last good checkpoint kept at {}", ckpt.display()))?;

    Motron::load(&ckpt, Some(&model.config().classes))?;
    parse_log_csv(&std::fs::read_to_string(&log_path)?).context("re-reading the training log")?;
    log::info!("best epoch {} with validation NLL {:.4}", report.best_epoch, report.best_val_nll);
    Ok(())
}

/// Checkpoint plus the log CSV stored beside it.
fn resume(path: &Path, classes: &motron_core::tglayers::ClassMap) -> Result<(Motron, Vec<motron_core::training::EpochRecord>)> {
    let model = Motron::load(path, Some(classes)).with_context(|| format!("resuming from {}", path.display()))?;
    let log = path.with_file_name(LOG_FILE);
    let records = match std::fs::read_to_string(&log) {
        Ok(t) => parse_log_csv(&t).with_context(|| format!("parsing {}", log.display()))?,
        Err(_) => Vec::new(),
    };
    Ok((model, records))
}
