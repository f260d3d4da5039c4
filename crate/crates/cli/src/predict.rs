use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, ValueEnum};
use motron_core::kindata::{states_from_frames, MotionSequence};
use motron_core::model::{ForecastResult, Motion, Motron};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{create_dir, read_motion_with_skeleton, write_motion_checked};
use crate::manifest::{self, sha256_file, RunManifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OutputMode {
    /// Per-mode weights, mean rotations and covariance factors as CSV.
    Distribution,
    /// `--num-samples` motion files drawn from the mixture.
    Sample,
    /// Mean motion of the most probable mode.
    MlMode,
    /// Weighted quaternion mean of the mode means.
    WMean,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Observed motion; its last frame is the present.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub horizon: usize,
    #[arg(long, value_enum, default_value_t = OutputMode::Distribution)]
    pub mode: OutputMode,
    #[arg(long, default_value_t = 50)]
    pub num_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Observed frames before the present that the encoder sees.
    #[arg(long, default_value_t = 9)]
    pub history: usize,
    /// A file, or a directory when sampling.
    #[arg(long)]
    pub out: PathBuf,
}

pub const DISTRIBUTION_HEADER: &str = "mode,weight,step,joint,qw,qx,qy,qz,l11,l21,l22,l31,l32,l33";

pub fn run(args: &PredictArgs) -> Result<()> {
    let (skeleton, input) = read_motion_with_skeleton(&args.input)?;
    let model = Motron::load(&args.model, Some(&skeleton.class_map()?))?;
    ensure!(
        (1..=model.config().max_horizon).contains(&args.horizon),
        "horizon {} outside 1..={} supported by the checkpoint",
        args.horizon,
        model.config().max_horizon
    );
    let start = input.num_frames().saturating_sub(args.history + 1);
    let states = states_from_frames(&input.frames[start..])?;
    let forecast = model.predict_distribution(&states, args.horizon)?;

    let mut manifest = RunManifest::new("predict");
    manifest.seed = Some(args.seed);
    manifest.inputs = vec![args.model.clone(), args.input.clone()];
    manifest.checkpoint_sha256 = Some(sha256_file(&args.model)?);
    let skel_ref = skeleton_reference(&args.input, &input.skeleton_path);
    let as_seq = |m: Motion| MotionSequence::new(skel_ref.clone(), input.fps, m);

    let manifest_dir = match args.mode {
        OutputMode::Distribution => {
            let text = distribution_csv(&forecast)?;
            std::fs::write(&args.out, &text).with_context(|| format!("writing {}", args.out.display()))?;
            check_distribution_csv(&std::fs::read_to_string(&args.out)?, &forecast)?;
            manifest.outputs.push(args.out.clone());
            parent_dir(&args.out)
        }
        OutputMode::Sample => {
            ensure!(args.num_samples > 0, "--num-samples must be at least 1");
            create_dir(&args.out)?;
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            for (i, m) in forecast.sample_motions(args.num_samples, &mut rng)?.into_iter().enumerate() {
                let path = args.out.join(format!("sample_{i:04}.txt"));
                write_motion_checked(&path, &as_seq(m)?, &skeleton)?;
                manifest.outputs.push(path);
            }
            args.out.clone()
        }
        OutputMode::MlMode | OutputMode::WMean => {
            let m = if args.mode == OutputMode::MlMode { forecast.ml_mode_motion() } else { forecast.w_mean_motion()? };
            write_motion_checked(&args.out, &as_seq(m)?, &skeleton)?;
            manifest.outputs.push(args.out.clone());
            parent_dir(&args.out)
        }
    };
    manifest.write(&manifest_dir.join(manifest::FILE_NAME))?;
    Ok(())
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Absolute path of the skeleton an input motion refers to.
fn skeleton_reference(input: &Path, named: &str) -> String {
    let p = Path::new(named);
    let joined = if p.is_relative() { parent_dir(input).join(p) } else { p.to_path_buf() };
    std::fs::canonicalize(&joined).unwrap_or(joined).display().to_string()
}

/// One row per mode, step and joint: the integrated mean rotation and the
/// row-wise lower Cholesky factor of its tangent covariance.
pub fn distribution_csv(f: &ForecastResult) -> Result<String> {
    let mut s = format!("{DISTRIBUTION_HEADER}\n");
    for (z, steps) in f.modes().iter().enumerate() {
        for (t, nodes) in steps.iter().enumerate() {
            for (n, d) in nodes.iter().enumerate() {
                let q = d.mean().to_array();
                let l = d.cholesky_factor()?;
                let _ = writeln!(
                    s,
                    "{z},{},{},{n},{},{},{},{},{},{},{},{},{},{}",
                    f.mode_weights()[z],
                    t + 1,
                    q[0],
                    q[1],
                    q[2],
                    q[3],
                    l[(0, 0)],
                    l[(1, 0)],
                    l[(1, 1)],
                    l[(2, 0)],
                    l[(2, 1)],
                    l[(2, 2)]
                );
            }
        }
    }
    Ok(s)
}

fn check_distribution_csv(text: &str, f: &ForecastResult) -> Result<()> {
    let mut lines = text.lines();
    ensure!(lines.next() == Some(DISTRIBUTION_HEADER), "distribution CSV header mismatch");
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let fields: Vec<f64> = line
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("distribution CSV row {}", i + 2))?;
        if fields.len() != 14 || fields.iter().any(|v| !v.is_finite()) {
            bail!("distribution CSV row {} is malformed", i + 2);
        }
        rows += 1;
    }
    ensure!(rows == f.num_modes() * f.horizon() * f.num_nodes(), "distribution CSV has {rows} rows");
    Ok(())
}
