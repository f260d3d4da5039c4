//! Synthetic motion generators with known generative distributions.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{Joint, MotionSequence, Skeleton};
use crate::error::{invalid, Error, Result};
use crate::rotmath::{exp_so3, quat_mul, UnitQuaternion};
use crate::so3stats::{ConcentratedGaussianSO3, MixtureSO3};

/// First frame at which branching scenarios leave their common segment.
pub const BRANCH_FRAME: usize = 10;

/// Per-frame tangent noise of the branching scenarios after the split
/// (radians). Frames before the split are observed exactly.
pub const BRANCH_NOISE: f64 = 0.05;

/// Half-width of the uniform per-sequence phase of the branching joints.
pub const PHASE_SPREAD: f64 = 0.3;

/// Angular speed of a branch after the split (radians per frame).
pub const BRANCH_SPEED: f64 = 0.02;

/// Drift of the common segment (radians per frame).
const COMMON_DRIFT: f64 = 0.01;

/// Spread of the random-walk start pose and of its per-frame steps.
pub const WALK_START_SIGMA: f64 = 0.3;
pub const WALK_STEP_SIGMA: f64 = 0.03;

const PENDULUM_WEIGHTS: [f64; 2] = [0.7, 0.3];
const ARM_WEIGHTS: [f64; 3] = [0.5, 0.3, 0.2];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    /// 4-joint chain; the elbow swings up (0.7) or down (0.3) after the split.
    BimodalPendulum,
    /// Mirror-symmetric two-arm skeleton; both elbows raise, hold or lower.
    TrimodalArm,
    /// 4-joint chain; every joint spins about z at its own constant rate.
    ConstantVelocity,
    /// 4-joint chain; every joint follows an isotropic rotational random walk.
    RandomWalk,
}

impl Scenario {
    pub const ALL: [Scenario; 4] =
        [Scenario::BimodalPendulum, Scenario::TrimodalArm, Scenario::ConstantVelocity, Scenario::RandomWalk];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::BimodalPendulum => "bimodal-pendulum",
            Scenario::TrimodalArm => "trimodal-arm",
            Scenario::ConstantVelocity => "constant-velocity",
            Scenario::RandomWalk => "random-walk",
        }
    }

    pub fn skeleton(&self) -> Skeleton {
        let joint = |name: &str, class, parent, o: [f64; 3]| Joint {
            name: name.into(),
            class,
            parent,
            offset: Vector3::new(o[0], o[1], o[2]),
        };
        let result = match self {
            Scenario::TrimodalArm => Skeleton::new(
                vec![
                    joint("root", 0, None, [0.0, 0.0, 0.0]),
                    joint("l_shoulder", 1, Some(0), [0.2, 0.0, 0.0]),
                    joint("l_elbow", 2, Some(1), [0.25, 0.0, 0.0]),
                    joint("r_shoulder", 1, Some(0), [-0.2, 0.0, 0.0]),
                    joint("r_elbow", 2, Some(3), [-0.25, 0.0, 0.0]),
                ],
                &[(1, 3), (2, 4)],
            ),
            _ => Skeleton::new(
                vec![
                    joint("root", 0, None, [0.0, 0.0, 0.0]),
                    joint("shoulder", 1, Some(0), [0.0, 0.3, 0.0]),
                    joint("elbow", 2, Some(1), [0.3, 0.0, 0.0]),
                    joint("wrist", 3, Some(2), [0.25, 0.0, 0.0]),
                ],
                &[],
            ),
        };
        result.expect("built-in skeletons are valid")
    }

    /// Branch probabilities of the branching scenarios.
    pub fn branch_weights(&self) -> Option<&'static [f64]> {
        match self {
            Scenario::BimodalPendulum => Some(&PENDULUM_WEIGHTS),
            Scenario::TrimodalArm => Some(&ARM_WEIGHTS),
            _ => None,
        }
    }

    /// Noise-free rotation of `joint` at `frame` on `branch` for a sequence
    /// with the given phase.
    fn branch_center(&self, branch: usize, phase: f64, frame: usize, joint: usize) -> UnitQuaternion {
        let common = |f: usize| 0.3 + phase + COMMON_DRIFT * f.min(BRANCH_FRAME - 1) as f64;
        let after = frame.saturating_sub(BRANCH_FRAME - 1) as f64;
        let rot = |axis: Vector3<f64>, a: f64| exp_so3(&(axis * a));
        match self {
            Scenario::BimodalPendulum => match joint {
                1 => rot(Vector3::x(), 0.2),
                2 => {
                    let sign = if branch == 0 { 1.0 } else { -1.0 };
                    rot(Vector3::z(), common(frame) + sign * BRANCH_SPEED * after)
                }
                3 => rot(Vector3::z(), -0.2),
                _ => UnitQuaternion::IDENTITY,
            },
            Scenario::TrimodalArm => match joint {
                1 | 3 => rot(Vector3::x(), 0.1),
                2 | 4 => {
                    let sign = [1.0, 0.0, -1.0][branch];
                    rot(Vector3::x(), common(frame) + sign * BRANCH_SPEED * after)
                }
                _ => UnitQuaternion::IDENTITY,
            },
            _ => unreachable!("only branching scenarios have centers"),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL.into_iter().find(|sc| sc.name() == s).ok_or_else(|| {
            let names: Vec<_> = Scenario::ALL.iter().map(|s| s.name()).collect();
            Error::InvalidArgument(format!("unknown scenario `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// Generated sequences together with the generator's exact per-frame law.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub scenario: Scenario,
    pub skeleton: Skeleton,
    pub sequences: Vec<MotionSequence>,
    /// Branch drawn for each sequence (branching scenarios only).
    pub branches: Vec<Option<usize>>,
    /// Phase of the branching joints per sequence (zero otherwise).
    pub phases: Vec<f64>,
}

impl SynthDataset {
    /// Exact distribution of `frame` of sequence `seq` at `joint` given
    /// everything the generator conditions on: for branching scenarios the
    /// history-independent mixture over branches after the split and the
    /// exact common pose before it; for the random walk the
    /// step from the previous frame; for constant velocity a point mass.
    pub fn frame_distribution(&self, seq: usize, frame: usize, joint: usize) -> Result<MixtureSO3> {
        let s = self.sequences.get(seq).ok_or_else(|| Error::InvalidArgument(format!("no sequence {seq}")))?;
        if frame >= s.num_frames() || joint >= s.num_joints() {
            return invalid(format!("frame {frame}, joint {joint} out of range"));
        }
        match self.scenario {
            Scenario::BimodalPendulum | Scenario::TrimodalArm => {
                let phase = self.phases[seq];
                if frame < BRANCH_FRAME {
                    let c = self.scenario.branch_center(0, phase, frame, joint);
                    return MixtureSO3::new(vec![1.0], vec![ConcentratedGaussianSO3::point_mass(c)]);
                }
                let w = self.scenario.branch_weights().expect("branching");
                let comps = (0..w.len())
                    .map(|b| {
                        ConcentratedGaussianSO3::isotropic(self.scenario.branch_center(b, phase, frame, joint), BRANCH_NOISE)
                    })
                    .collect::<Result<Vec<_>>>()?;
                MixtureSO3::new(w.to_vec(), comps)
            }
            Scenario::RandomWalk => {
                let c = if frame == 0 {
                    ConcentratedGaussianSO3::isotropic(UnitQuaternion::IDENTITY, WALK_START_SIGMA)?
                } else {
                    ConcentratedGaussianSO3::isotropic(s.frames[frame - 1][joint], WALK_STEP_SIGMA)?
                };
                MixtureSO3::new(vec![1.0], vec![c])
            }
            Scenario::ConstantVelocity => {
                MixtureSO3::new(vec![1.0], vec![ConcentratedGaussianSO3::point_mass(s.frames[frame][joint])])
            }
        }
    }

    /// Mean rotation of `joint` at `frame` of sequence `seq` on `branch`, for
    /// branching scenarios.
    pub fn branch_mean(&self, seq: usize, branch: usize, frame: usize, joint: usize) -> Result<UnitQuaternion> {
        if seq >= self.sequences.len() {
            return invalid(format!("no sequence {seq}"));
        }
        match self.scenario.branch_weights() {
            Some(w) if branch < w.len() => Ok(self.scenario.branch_center(branch, self.phases[seq], frame, joint)),
            _ => invalid(format!("scenario {} has no branch {branch}", self.scenario)),
        }
    }

    /// Generator parameters and per-sequence branches as JSON.
    pub fn metadata_json(&self) -> String {
        let doc = serde_json::json!({
            "scenario": self.scenario.name(),
            "count": self.sequences.len(),
            "frames": self.sequences.first().map_or(0, |s| s.num_frames()),
            "fps": self.sequences.first().map_or(0.0, |s| s.fps),
            "branch_frame": self.scenario.branch_weights().map(|_| BRANCH_FRAME),
            "branch_weights": self.scenario.branch_weights(),
            "branch_noise_sigma": self.scenario.branch_weights().map(|_| BRANCH_NOISE),
            "branch_speed": self.scenario.branch_weights().map(|_| BRANCH_SPEED),
            "phase_spread": self.scenario.branch_weights().map(|_| PHASE_SPREAD),
            "walk_start_sigma": (self.scenario == Scenario::RandomWalk).then_some(WALK_START_SIGMA),
            "walk_step_sigma": (self.scenario == Scenario::RandomWalk).then_some(WALK_STEP_SIGMA),
            "branches": self.branches,
            "phases": self.phases,
        });
        serde_json::to_string_pretty(&doc).expect("json values serialize")
    }
}

fn gaussian_tangent<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| sigma * rng.sample::<f64, _>(StandardNormal))
}

pub fn synth_generate<R: Rng + ?Sized>(
    scenario: Scenario,
    count: usize,
    frames: usize,
    fps: f64,
    rng: &mut R,
) -> Result<SynthDataset> {
    if count == 0 || frames == 0 {
        return invalid("count and frames must be at least 1");
    }
    let skeleton = scenario.skeleton();
    let n = skeleton.num_joints();
    let mut sequences = Vec::with_capacity(count);
    let mut branches = Vec::with_capacity(count);
    let mut phases = Vec::with_capacity(count);
    for _ in 0..count {
        let mut phase = 0.0;
        let (motion, branch) = match scenario {
            Scenario::BimodalPendulum | Scenario::TrimodalArm => {
                let w = scenario.branch_weights().expect("branching");
                let b = WeightedIndex::new(w).map_err(|e| Error::InvalidArgument(e.to_string()))?.sample(rng);
                phase = rng.random_range(-PHASE_SPREAD..PHASE_SPREAD);
                let motion = (0..frames)
                    .map(|f| {
                        (0..n)
                            .map(|j| {
                                let c = scenario.branch_center(b, phase, f, j);
                                if f < BRANCH_FRAME {
                                    c
                                } else {
                                    quat_mul(&exp_so3(&gaussian_tangent(rng, BRANCH_NOISE)), &c)
                                }
                            })
                            .collect()
                    })
                    .collect();
                (motion, Some(b))
            }
            Scenario::ConstantVelocity => {
                let start: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
                let rate: Vec<f64> = (0..n).map(|_| rng.random_range(-0.05..0.05)).collect();
                let motion = (0..frames)
                    .map(|f| (0..n).map(|j| exp_so3(&(Vector3::z() * (start[j] + rate[j] * f as f64)))).collect())
                    .collect();
                (motion, None)
            }
            Scenario::RandomWalk => {
                let mut cur: Vec<UnitQuaternion> =
                    (0..n).map(|_| exp_so3(&gaussian_tangent(rng, WALK_START_SIGMA))).collect();
                let mut motion = Vec::with_capacity(frames);
                motion.push(cur.clone());
                for _ in 1..frames {
                    for q in cur.iter_mut() {
                        *q = quat_mul(&exp_so3(&gaussian_tangent(rng, WALK_STEP_SIGMA)), q);
                    }
                    motion.push(cur.clone());
                }
                (motion, None)
            }
        };
        sequences.push(MotionSequence::new("skeleton.txt", fps, motion)?);
        branches.push(branch);
        phases.push(phase);
    }
    Ok(SynthDataset { scenario, skeleton, sequences, branches, phases })
}
