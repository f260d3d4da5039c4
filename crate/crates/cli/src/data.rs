use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use motron_core::kindata::{parse_motion, write_motion, MotionSequence, Skeleton};

pub const SKELETON_FILE: &str = "skeleton.txt";

pub fn motion_file_name(i: usize) -> String {
    format!("motion_{i:04}.txt")
}

pub fn read_skeleton(path: &Path) -> Result<Skeleton> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Skeleton::parse(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Skeleton named in a motion file's header, resolved against the file's
/// directory when relative.
pub fn read_motion_with_skeleton(path: &Path) -> Result<(Skeleton, MotionSequence)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let named = text
        .lines()
        .find_map(|l| l.trim().strip_prefix("SKELETON").map(|s| s.trim().to_string()))
        .with_context(|| format!("{} has no SKELETON line", path.display()))?;
    let mut skel_path = PathBuf::from(&named);
    if skel_path.is_relative() {
        skel_path = path.parent().unwrap_or(Path::new(".")).join(skel_path);
    }
    let skeleton = read_skeleton(&skel_path)?;
    let motion = parse_motion(&text, &skeleton).with_context(|| format!("parsing {}", path.display()))?;
    Ok((skeleton, motion))
}

/// A dataset directory: `skeleton.txt` plus `motion_*.txt` in name order.
pub fn load_dataset(dir: &Path) -> Result<(Skeleton, Vec<MotionSequence>, Vec<PathBuf>)> {
    let skeleton = read_skeleton(&dir.join(SKELETON_FILE))?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("motion_") && n.ends_with(".txt"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no motion_*.txt files in {}", dir.display());
    }
    let mut seqs = Vec::with_capacity(files.len());
    for f in &files {
        let text = std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        seqs.push(parse_motion(&text, &skeleton).with_context(|| format!("parsing {}", f.display()))?);
    }
    Ok((skeleton, seqs, files))
}

/// Writes a motion and re-parses it against `skeleton`.
pub fn write_motion_checked(path: &Path, seq: &MotionSequence, skeleton: &Skeleton) -> Result<()> {
    let text = write_motion(seq);
    std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    let back = parse_motion(&std::fs::read_to_string(path)?, skeleton)
        .with_context(|| format!("re-reading {}", path.display()))?;
    if back.num_frames() != seq.num_frames() {
        bail!("{} did not round-trip", path.display());
    }
    Ok(())
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
