use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use motron_core::kindata::{synth_generate, MotionSequence, Scenario};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{create_dir, motion_file_name, write_motion_checked, SKELETON_FILE};
use crate::manifest::{self, RunManifest};

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// bimodal-pendulum, trimodal-arm, constant-velocity or random-walk.
    #[arg(long)]
    pub scenario: String,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 35)]
    pub frames: usize,
    #[arg(long, default_value_t = 25.0)]
    pub fps: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: &SynthArgs) -> Result<()> {
    let scenario: Scenario = match args.scenario.parse() {
        Ok(s) => s,
        Err(_) => {
            let names: Vec<_> = Scenario::ALL.iter().map(|s| s.name()).collect();
            bail!("unknown scenario `{}`; expected one of {}", args.scenario, names.join(", "))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let data = synth_generate(scenario, args.count, args.frames, args.fps, &mut rng)?;
    create_dir(&args.out)?;
    let mut manifest = RunManifest::new("synth");
    manifest.seed = Some(args.seed);

    let skel_path = args.out.join(SKELETON_FILE);
    std::fs::write(&skel_path, data.skeleton.to_text()).with_context(|| format!("writing {}", skel_path.display()))?;
    crate::data::read_skeleton(&skel_path)?;
    manifest.outputs.push(skel_path);
    for (i, seq) in data.sequences.iter().enumerate() {
        let path = args.out.join(motion_file_name(i));
        let seq = MotionSequence { skeleton_path: SKELETON_FILE.into(), ..seq.clone() };
        write_motion_checked(&path, &seq, &data.skeleton)?;
        manifest.outputs.push(path);
    }
    let meta_path = args.out.join("metadata.json");
    std::fs::write(&meta_path, data.metadata_json())?;
    serde_json::from_str::<serde_json::Value>(&std::fs::read_to_string(&meta_path)?)
        .with_context(|| format!("re-reading {}", meta_path.display()))?;
    manifest.outputs.push(meta_path);
    manifest.write(&args.out.join(manifest::FILE_NAME))?;
    log::info!("wrote {} {} sequences to {}", args.count, scenario.name(), args.out.display());
    Ok(())
}
