//! Skeletons, motion sequences, joint states and forward kinematics.

use nalgebra::{Matrix3, Vector3};

use crate::diffcore::Tensor;
use crate::error::{invalid, Error, Result};
use crate::model::STATE_DIM;
use crate::rotmath::{diff_quat, quat_mul, quat_to_rotmat, UnitQuaternion};
use crate::tglayers::ClassMap;

mod synth;

pub use synth::{synth_generate, Scenario, SynthDataset, BRANCH_FRAME, BRANCH_NOISE};

/// Normal of the sagittal plane used for mirroring.
pub const MIRROR_NORMAL: Vector3<f64> = Vector3::new(1.0, 0.0, 0.0);

/// Largest tolerated deviation from unit norm in motion files.
const UNIT_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub name: String,
    pub class: u32,
    pub parent: Option<usize>,
    pub offset: Vector3<f64>,
}

/// Kinematic forest with optional left/right correspondence.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    joints: Vec<Joint>,
    mirror: Option<Vec<usize>>,
    order: Vec<usize>,
}

impl Skeleton {
    /// Validates parents, offsets and the mirror pairs. Joints not named in
    /// any pair map to themselves.
    pub fn new(joints: Vec<Joint>, mirror_pairs: &[(usize, usize)]) -> Result<Self> {
        let n = joints.len();
        if n == 0 {
            return Err(Error::Validation("skeleton has no joints".into()));
        }
        for (i, j) in joints.iter().enumerate() {
            if let Some(p) = j.parent {
                if p >= n {
                    return Err(Error::Validation(format!("joint {} has parent {p} out of range", j.name)));
                }
                if p == i {
                    return Err(Error::Validation(format!("joint {} is its own parent", j.name)));
                }
            }
            if !j.offset.iter().all(|v| v.is_finite()) {
                return Err(Error::Validation(format!("joint {} has a non-finite offset", j.name)));
            }
        }
        let order = topological_order(&joints)?;
        let mirror = if mirror_pairs.is_empty() {
            None
        } else {
            let mut map: Vec<usize> = (0..n).collect();
            let mut seen = vec![false; n];
            for &(a, b) in mirror_pairs {
                if a >= n || b >= n {
                    return Err(Error::Validation(format!("mirror pair ({a}, {b}) out of range")));
                }
                if seen[a] || seen[b] {
                    return Err(Error::Validation(format!("joint in mirror pair ({a}, {b}) is already paired")));
                }
                seen[a] = true;
                seen[b] = true;
                map[a] = b;
                map[b] = a;
            }
            Some(map)
        };
        Ok(Self { joints, mirror, order })
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    /// Left/right index map, an involution, if the skeleton declares one.
    pub fn mirror_map(&self) -> Option<&[usize]> {
        self.mirror.as_deref()
    }

    /// Parents before children.
    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    pub fn class_map(&self) -> Result<ClassMap> {
        ClassMap::new(&self.joints.iter().map(|j| j.class).collect::<Vec<_>>())
    }

    /// `(parent, child)` pairs for every non-root joint.
    pub fn bones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.joints.iter().enumerate().filter_map(|(i, j)| j.parent.map(|p| (p, i)))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = content_lines(text);
        let (ln, header) = lines.next().ok_or(Error::Parse { line: 1, message: "empty skeleton file".into() })?;
        if header != "SKELETON v1" {
            return Err(Error::Parse { line: ln, message: format!("expected `SKELETON v1`, found `{header}`") });
        }
        let (ln, count_line) = lines.next().ok_or(Error::Parse { line: ln, message: "missing joint count".into() })?;
        let count = match count_line.split_whitespace().collect::<Vec<_>>()[..] {
            ["N", c] => parse_num::<usize>(c, ln)?,
            _ => return Err(Error::Parse { line: ln, message: format!("expected `N <count>`, found `{count_line}`") }),
        };
        let mut slots: Vec<Option<Joint>> = vec![None; count];
        let mut pairs = Vec::new();
        for (ln, line) in lines {
            let tok: Vec<&str> = line.split_whitespace().collect();
            match tok[0] {
                "JOINT" => {
                    if tok.len() != 8 {
                        return Err(Error::Parse { line: ln, message: format!("JOINT needs 7 fields, found {}", tok.len() - 1) });
                    }
                    let idx = parse_num::<usize>(tok[1], ln)?;
                    if idx >= count {
                        return Err(Error::Parse { line: ln, message: format!("joint index {idx} not below N = {count}") });
                    }
                    if slots[idx].is_some() {
                        return Err(Error::Parse { line: ln, message: format!("joint index {idx} defined twice") });
                    }
                    let parent = parse_num::<i64>(tok[4], ln)?;
                    let parent = match parent {
                        -1 => None,
                        p if p >= 0 => Some(p as usize),
                        p => return Err(Error::Parse { line: ln, message: format!("bad parent index {p}") }),
                    };
                    slots[idx] = Some(Joint {
                        name: tok[2].to_string(),
                        class: parse_num(tok[3], ln)?,
                        parent,
                        offset: Vector3::new(parse_num(tok[5], ln)?, parse_num(tok[6], ln)?, parse_num(tok[7], ln)?),
                    });
                }
                "MIRROR" => {
                    if tok.len() != 3 {
                        return Err(Error::Parse { line: ln, message: "MIRROR needs two joint indices".into() });
                    }
                    pairs.push((parse_num(tok[1], ln)?, parse_num(tok[2], ln)?));
                }
                other => return Err(Error::Parse { line: ln, message: format!("unknown record `{other}`") }),
            }
        }
        let joints = slots
            .into_iter()
            .enumerate()
            .map(|(i, j)| j.ok_or_else(|| Error::Validation(format!("joint {i} is not defined"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(joints, &pairs)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("SKELETON v1\nN {}\n", self.joints.len());
        for (i, j) in self.joints.iter().enumerate() {
            let parent = j.parent.map_or(-1, |p| p as i64);
            s += &format!(
                "JOINT {i} {} {} {parent} {} {} {}\n",
                j.name, j.class, j.offset.x, j.offset.y, j.offset.z
            );
        }
        if let Some(m) = &self.mirror {
            for (a, &b) in m.iter().enumerate() {
                if a < b {
                    s += &format!("MIRROR {a} {b}\n");
                }
            }
        }
        s
    }
}

fn topological_order(joints: &[Joint]) -> Result<Vec<usize>> {
    let n = joints.len();
    // 0 = unvisited, 1 = on the current path, 2 = placed
    let mut state = vec![0u8; n];
    let mut order = Vec::with_capacity(n);
    for start in 0..n {
        let mut path = Vec::new();
        let mut cur = start;
        loop {
            match state[cur] {
                2 => break,
                1 => {
                    return Err(Error::Validation(format!(
                        "parent cycle through joint {}",
                        joints[cur].name
                    )))
                }
                _ => {}
            }
            state[cur] = 1;
            path.push(cur);
            match joints[cur].parent {
                Some(p) => cur = p,
                None => break,
            }
        }
        for &j in path.iter().rev() {
            state[j] = 2;
            order.push(j);
        }
    }
    Ok(order)
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.parse().map_err(|_| Error::Parse { line, message: format!("cannot parse `{s}`") })
}

/// Rotations of every joint over time, indexed `[frame][joint]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub skeleton_path: String,
    pub fps: f64,
    pub frames: Vec<Vec<UnitQuaternion>>,
}

impl MotionSequence {
    pub fn new(skeleton_path: impl Into<String>, fps: f64, frames: Vec<Vec<UnitQuaternion>>) -> Result<Self> {
        if !(fps > 0.0 && fps.is_finite()) {
            return invalid(format!("fps must be positive, got {fps}"));
        }
        if frames.is_empty() {
            return invalid("motion needs at least one frame");
        }
        let n = frames[0].len();
        if n == 0 || frames.iter().any(|f| f.len() != n) {
            return invalid("frames must all have the same nonzero joint count");
        }
        Ok(Self { skeleton_path: skeleton_path.into(), fps, frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_joints(&self) -> usize {
        self.frames[0].len()
    }
}

pub fn parse_motion(text: &str, skeleton: &Skeleton) -> Result<MotionSequence> {
    let mut lines = content_lines(text);
    let mut header = |key: &str| -> Result<(usize, String)> {
        let (ln, l) = lines.next().ok_or(Error::Parse { line: 0, message: format!("missing `{key}` line") })?;
        match l.split_once(char::is_whitespace) {
            Some((k, v)) if k == key => Ok((ln, v.trim().to_string())),
            _ if key == "MOTION" && l == "MOTION" => Ok((ln, String::new())),
            _ => Err(Error::Parse { line: ln, message: format!("expected `{key}`, found `{l}`") }),
        }
    };
    let (ln, version) = header("MOTION")?;
    if version != "v1" {
        return Err(Error::Parse { line: ln, message: format!("unsupported motion version `{version}`") });
    }
    let (_, skeleton_path) = header("SKELETON")?;
    let (ln, fps) = header("FPS")?;
    let fps: f64 = parse_num(&fps, ln)?;
    let (ln, count) = header("FRAMES")?;
    let count: usize = parse_num(&count, ln)?;
    let n = skeleton.num_joints();
    let mut frames = Vec::with_capacity(count);
    let mut last = ln;
    for (ln, line) in lines {
        last = ln;
        let vals = line.split_whitespace().map(|t| parse_num::<f64>(t, ln)).collect::<Result<Vec<_>>>()?;
        if vals.len() != 4 * n {
            return Err(Error::Parse {
                line: ln,
                message: format!("expected {} values for {n} joints, found {}", 4 * n, vals.len()),
            });
        }
        let frame = vals
            .chunks_exact(4)
            .enumerate()
            .map(|(j, c)| {
                let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > UNIT_TOLERANCE {
                    return Err(Error::Validation(format!(
                        "line {ln}: joint {j} quaternion has norm {norm}"
                    )));
                }
                UnitQuaternion::new(c[0], c[1], c[2], c[3])
            })
            .collect::<Result<Vec<_>>>()?;
        frames.push(frame);
    }
    if frames.len() != count {
        return Err(Error::Parse { line: last, message: format!("FRAMES says {count}, found {}", frames.len()) });
    }
    MotionSequence::new(skeleton_path, fps, frames)
}

pub fn write_motion(seq: &MotionSequence) -> String {
    let mut s = format!(
        "MOTION v1\nSKELETON {}\nFPS {}\nFRAMES {}\n",
        seq.skeleton_path,
        seq.fps,
        seq.frames.len()
    );
    for frame in &seq.frames {
        let vals: Vec<String> = frame.iter().flat_map(|q| q.to_array()).map(|v| v.to_string()).collect();
        s += &vals.join(" ");
        s.push('\n');
    }
    s
}

/// States `[H+1, N, 8]` of frames `end − history ..= end`.
pub fn build_states(seq: &MotionSequence, end: usize, history: usize) -> Result<Tensor> {
    if end >= seq.num_frames() || history > end {
        return invalid(format!(
            "window [{}, {end}] outside a sequence of {} frames",
            end as i64 - history as i64,
            seq.num_frames()
        ));
    }
    states_from_frames(&seq.frames[end - history..=end])
}

/// States of consecutive frames; the first differential is the identity.
pub fn states_from_frames(frames: &[Vec<UnitQuaternion>]) -> Result<Tensor> {
    if frames.is_empty() {
        return invalid("no frames");
    }
    let n = frames[0].len();
    let mut data = Vec::with_capacity(frames.len() * n * STATE_DIM);
    for (f, frame) in frames.iter().enumerate() {
        if frame.len() != n {
            return invalid("ragged frames");
        }
        for (j, q) in frame.iter().enumerate() {
            let d = if f == 0 { UnitQuaternion::IDENTITY } else { diff_quat(&frames[f - 1][j], q) };
            data.extend(q.to_array());
            data.extend(d.to_array());
        }
    }
    Tensor::new(vec![frames.len(), n, STATE_DIM], data)
}

/// Keeps every `fps / target_fps`-th frame.
pub fn subsample(seq: &MotionSequence, target_fps: f64) -> Result<MotionSequence> {
    if !(target_fps > 0.0) {
        return invalid(format!("target fps must be positive, got {target_fps}"));
    }
    let ratio = seq.fps / target_fps;
    let stride = ratio.round();
    if stride < 1.0 || (ratio - stride).abs() > 1e-9 {
        return invalid(format!("{} Hz to {target_fps} Hz is not an integer stride", seq.fps));
    }
    let frames = seq.frames.iter().step_by(stride as usize).cloned().collect();
    MotionSequence::new(seq.skeleton_path.clone(), target_fps, frames)
}

/// Joint positions of one frame of local rotations.
pub fn forward_kinematics(
    skeleton: &Skeleton,
    frame: &[UnitQuaternion],
    root_position: &Vector3<f64>,
) -> Result<Vec<Vector3<f64>>> {
    let n = skeleton.num_joints();
    if frame.len() != n {
        return invalid(format!("frame has {} joints, skeleton {n}", frame.len()));
    }
    let mut pos = vec![Vector3::zeros(); n];
    let mut rot = vec![Matrix3::identity(); n];
    for &i in skeleton.topological_order() {
        let j = &skeleton.joints[i];
        let local = quat_to_rotmat(&frame[i]);
        match j.parent {
            None => {
                pos[i] = root_position + j.offset;
                rot[i] = local;
            }
            Some(p) => {
                pos[i] = pos[p] + rot[p] * j.offset;
                rot[i] = rot[p] * local;
            }
        }
    }
    Ok(pos)
}

/// Positions `[t][n]` of a whole motion, root at the origin.
pub fn motion_positions(skeleton: &Skeleton, motion: &[Vec<UnitQuaternion>]) -> Result<Vec<Vec<Vector3<f64>>>> {
    motion.iter().map(|f| forward_kinematics(skeleton, f, &Vector3::zeros())).collect()
}

/// Reflection of a rotation through the plane with unit normal `n`.
pub fn reflect_quat(q: &UnitQuaternion, n: &Vector3<f64>) -> UnitQuaternion {
    let v = q.vector();
    let r = 2.0 * v.dot(n) * n - v;
    UnitQuaternion::from_unit_parts(q.w(), r.x, r.y, r.z)
}

/// Mirrors a pose: each joint takes the reflected rotation of its partner.
pub fn mirror_frame(frame: &[UnitQuaternion], map: &[usize]) -> Vec<UnitQuaternion> {
    map.iter().map(|&src| reflect_quat(&frame[src], &MIRROR_NORMAL)).collect()
}

/// `quat_mul(q_{t−1}, q̇_t) = q_t` residual over a state tensor, for checks.
pub fn state_consistency_error(states: &Tensor) -> f64 {
    let s = states.shape();
    let (k, n) = (s[0], s[1]);
    let q = |f: usize, j: usize, off: usize| {
        let o = (f * n + j) * STATE_DIM + off;
        let d = &states.data()[o..o + 4];
        UnitQuaternion::from_unit_parts(d[0], d[1], d[2], d[3])
    };
    let mut worst = 0.0f64;
    for f in 1..k {
        for j in 0..n {
            let pred = quat_mul(&q(f - 1, j, 0), &q(f, j, 4));
            worst = worst.max(pred.max_abs_diff(&q(f, j, 0)));
        }
    }
    worst
}

#[cfg(test)]
mod tests;
