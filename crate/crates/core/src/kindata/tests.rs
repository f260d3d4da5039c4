use nalgebra::{Matrix3, Vector3};
use proptest::{prop_assert, proptest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::rotmath::{exp_so3, integrate_diffs};

const CHAIN: &str = "SKELETON v1
# two bones along x
N 2
JOINT 0 hip 0 -1 0.0 0.0 0.0
JOINT 1 knee 1 0 0.4 0.0 0.0
";

fn random_quat(rng: &mut impl Rng) -> UnitQuaternion {
    exp_so3(&Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)))
}

fn random_motion(rng: &mut impl Rng, frames: usize, n: usize) -> MotionSequence {
    MotionSequence::new(
        "s.txt",
        50.0,
        (0..frames).map(|_| (0..n).map(|_| random_quat(rng)).collect()).collect(),
    )
    .unwrap()
}

fn rz(a: f64) -> UnitQuaternion {
    exp_so3(&(Vector3::z() * a))
}

#[test]
fn parses_chain() {
    let s = Skeleton::parse(CHAIN).unwrap();
    assert_eq!(s.num_joints(), 2);
    assert_eq!(s.joints()[1].offset, Vector3::new(0.4, 0.0, 0.0));
    assert_eq!(s.joints()[1].parent, Some(0));
    assert!(s.mirror_map().is_none());
    assert_eq!(Skeleton::parse(&s.to_text()).unwrap(), s);
}

#[test]
fn parse_errors_carry_context() {
    let cyc = "SKELETON v1\nN 3\nJOINT 0 a 0 -1 0 0 0\nJOINT 1 b 0 2 1 0 0\nJOINT 2 c 0 1 1 0 0\n";
    let e = Skeleton::parse(cyc).unwrap_err().to_string();
    assert!(e.contains("cycle") && (e.contains(" b") || e.contains(" c")), "{e}");
    let bad = "SKELETON v1\nN 1\nJOINT 0 a 0 -1 0 zero 0\n";
    match Skeleton::parse(bad) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    let mirror = "SKELETON v1\nN 3\nJOINT 0 a 0 -1 0 0 0\nJOINT 1 b 0 0 1 0 0\nJOINT 2 c 0 0 1 0 0\nMIRROR 1 2\nMIRROR 2 0\n";
    assert!(Skeleton::parse(mirror).is_err());
}

#[test]
fn motion_round_trip_and_validation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let skel = Skeleton::parse(CHAIN).unwrap();
    let seq = random_motion(&mut rng, 7, 2);
    let back = parse_motion(&write_motion(&seq), &skel).unwrap();
    assert_eq!(back.fps, seq.fps);
    assert_eq!(back.skeleton_path, "s.txt");
    for (a, b) in back.frames.iter().flatten().zip(seq.frames.iter().flatten()) {
        assert!(a.max_abs_diff(b) < 1e-9);
    }
    let nonunit = "MOTION v1\nSKELETON s.txt\nFPS 25\nFRAMES 1\n1 0 0 0 1.1 0 0 0\n";
    assert!(matches!(parse_motion(nonunit, &skel), Err(Error::Validation(_))));
    let short = "MOTION v1\nSKELETON s.txt\nFPS 25\nFRAMES 1\n1 0 0 0\n";
    assert!(matches!(parse_motion(short, &skel), Err(Error::Parse { line: 5, .. })));
}

#[test]
fn states_of_constant_and_spinning_motion() {
    let constant = MotionSequence::new("s", 25.0, vec![vec![rz(0.3), rz(-1.0)]; 5]).unwrap();
    let st = build_states(&constant, 4, 4).unwrap();
    assert_eq!(st.shape(), &[5, 2, 8]);
    for chunk in st.data().chunks_exact(8) {
        assert_eq!(&chunk[4..], &[1.0, 0.0, 0.0, 0.0]);
    }
    let step = 2f64.to_radians();
    let spin = |f: usize| exp_so3(&(Vector3::y() * (step * f as f64)));
    let seq = MotionSequence::new("s", 25.0, (0..10).map(|f| vec![spin(f)]).collect()).unwrap();
    let st = build_states(&seq, 9, 6).unwrap();
    let expect = exp_so3(&(Vector3::y() * step)).to_array();
    for f in 1..7 {
        for k in 0..4 {
            assert!((st.at(&[f, 0, 4 + k]) - expect[k]).abs() < 1e-12);
        }
    }
    assert!(build_states(&seq, 10, 2).is_err());
    assert!(build_states(&seq, 3, 4).is_err());
}

#[test]
fn states_reconstruct_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let seq = random_motion(&mut rng, 12, 3);
    let st = build_states(&seq, 11, 11).unwrap();
    assert!(state_consistency_error(&st) < 1e-6);
    for j in 0..3 {
        let diffs: Vec<_> = (1..12)
            .map(|f| {
                let o = (f * 3 + j) * 8 + 4;
                let d = &st.data()[o..o + 4];
                UnitQuaternion::new(d[0], d[1], d[2], d[3]).unwrap()
            })
            .collect();
        let back = integrate_diffs(&seq.frames[0][j], &diffs);
        for (f, q) in back.iter().enumerate() {
            assert!(q.max_abs_diff(&seq.frames[f + 1][j]) < 1e-12);
        }
    }
}

#[test]
fn subsampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seq = random_motion(&mut rng, 23, 1);
    let s = subsample(&MotionSequence { fps: 100.0, ..seq.clone() }, 20.0).unwrap();
    assert_eq!(s.num_frames(), 5);
    assert_eq!(s.frames[2], seq.frames[10]);
    assert_eq!(s.fps, 20.0);
    let same = subsample(&seq, seq.fps).unwrap();
    assert_eq!(same.frames, seq.frames);
    assert!(subsample(&MotionSequence { fps: 25.0, ..seq }, 20.0).is_err());
}

#[test]
fn fk_examples() {
    let skel = Skeleton::parse("SKELETON v1\nN 3\nJOINT 0 r 0 -1 0 0 0\nJOINT 1 a 1 0 0.5 0 0\nJOINT 2 b 2 1 0.3 0 0\n").unwrap();
    let id = vec![UnitQuaternion::IDENTITY; 3];
    let p = forward_kinematics(&skel, &id, &Vector3::zeros()).unwrap();
    assert!((p[1] - Vector3::new(0.5, 0.0, 0.0)).norm() < 1e-15);
    assert!((p[2] - Vector3::new(0.8, 0.0, 0.0)).norm() < 1e-15);
    let mut rot = id.clone();
    rot[0] = rz(std::f64::consts::FRAC_PI_2);
    let q = forward_kinematics(&skel, &rot, &Vector3::zeros()).unwrap();
    for (a, b) in p.iter().zip(&q) {
        assert!((Vector3::new(-a.y, a.x, a.z) - b).norm() < 1e-12);
    }
    let shifted = forward_kinematics(&skel, &id, &Vector3::new(1.0, 2.0, 3.0)).unwrap();
    assert!((shifted[2] - Vector3::new(1.8, 2.0, 3.0)).norm() < 1e-15);
}

#[test]
fn fk_handles_parents_after_children() {
    let skel = Skeleton::new(
        vec![
            Joint { name: "tip".into(), class: 0, parent: Some(1), offset: Vector3::new(0.0, 1.0, 0.0) },
            Joint { name: "base".into(), class: 0, parent: None, offset: Vector3::zeros() },
        ],
        &[],
    )
    .unwrap();
    let p = forward_kinematics(&skel, &[UnitQuaternion::IDENTITY; 2], &Vector3::zeros()).unwrap();
    assert_eq!(p[0], Vector3::new(0.0, 1.0, 0.0));
}

proptest! {
    #[test]
    fn fk_keeps_bone_lengths_and_ignores_hemisphere(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let skel = Scenario::TrimodalArm.skeleton();
        let frame: Vec<_> = (0..skel.num_joints()).map(|_| random_quat(&mut rng)).collect();
        let p = forward_kinematics(&skel, &frame, &Vector3::zeros()).unwrap();
        for (par, ch) in skel.bones() {
            let len = (p[ch] - p[par]).norm();
            prop_assert!((len - skel.joints()[ch].offset.norm()).abs() < 1e-12);
        }
        // a joint given by its negated representative lands in the same place
        let j = rng.random_range(0..skel.num_joints());
        let [w, x, y, z] = frame[j].to_array();
        let mut flipped = frame.clone();
        flipped[j] = UnitQuaternion::new(-w, -x, -y, -z).unwrap();
        let pf = forward_kinematics(&skel, &flipped, &Vector3::zeros()).unwrap();
        for (a, b) in p.iter().zip(&pf) {
            prop_assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn states_round_trip(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = random_motion(&mut rng, 6, 2);
        let st = build_states(&seq, 5, 5).unwrap();
        prop_assert!(state_consistency_error(&st) < 1e-6);
    }
}

#[test]
fn mirroring_is_an_involution_and_reflects_positions() {
    let skel = Scenario::TrimodalArm.skeleton();
    let map = skel.mirror_map().unwrap().to_vec();
    let s = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let frame: Vec<_> = (0..5).map(|_| random_quat(&mut rng)).collect();
        let twice = mirror_frame(&mirror_frame(&frame, &map), &map);
        for (a, b) in twice.iter().zip(&frame) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
        let p = forward_kinematics(&skel, &frame, &Vector3::zeros()).unwrap();
        let pm = forward_kinematics(&skel, &mirror_frame(&frame, &map), &Vector3::zeros()).unwrap();
        for j in 0..5 {
            assert!((pm[map[j]] - s * p[j]).norm() < 1e-6);
        }
        let r = quat_to_rotmat(&frame[0]);
        let rm = quat_to_rotmat(&reflect_quat(&frame[0], &MIRROR_NORMAL));
        assert!((rm - s * r * s).norm() < 1e-12);
    }
}

#[test]
fn scenario_names_round_trip() {
    for s in Scenario::ALL {
        assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
    }
    assert!("pendulum".parse::<Scenario>().is_err());
}

#[test]
fn bimodal_branch_frequencies() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    let d = synth_generate(Scenario::BimodalPendulum, n, BRANCH_FRAME + 2, 25.0, &mut rng).unwrap();
    let up = d.branches.iter().filter(|b| **b == Some(0)).count() as f64;
    let sd = (n as f64 * 0.7 * 0.3).sqrt();
    assert!((up - 0.7 * n as f64).abs() < 3.0 * sd, "{up}");
}

#[test]
fn generator_is_seed_deterministic() {
    for sc in Scenario::ALL {
        let a = synth_generate(sc, 3, 15, 25.0, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let b = synth_generate(sc, 3, 15, 25.0, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(a.sequences, b.sequences);
        assert_eq!(a.metadata_json(), b.metadata_json());
    }
}

#[test]
fn branch_samples_match_their_law() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = synth_generate(Scenario::BimodalPendulum, 400, BRANCH_FRAME + 10, 25.0, &mut rng).unwrap();
    let f = BRANCH_FRAME + 9;
    // mean squared residual to the drawn branch center is 3σ² per joint
    let mut acc = 0.0;
    for (i, (s, b)) in d.sequences.iter().zip(&d.branches).enumerate() {
        let c = d.branch_mean(i, b.unwrap(), f, 2).unwrap();
        let before = d.branch_mean(i, b.unwrap(), BRANCH_FRAME - 1, 2).unwrap();
        assert!(s.frames[BRANCH_FRAME - 1][2].angle_to(&before) < 1e-12);
        acc += crate::rotmath::log_so3(&quat_mul(&s.frames[f][2], &c.inverse())).norm_squared();
    }
    let msr = acc / 400.0;
    assert!((msr / (3.0 * synth::BRANCH_NOISE.powi(2)) - 1.0).abs() < 0.2, "{msr}");
    let up = d.branch_mean(0, 0, f, 2).unwrap();
    let down = d.branch_mean(0, 1, f, 2).unwrap();
    assert!((up.angle_to(&down) - 2.0 * synth::BRANCH_SPEED * 10.0).abs() < 1e-9);
    assert!(d.frame_distribution(0, f, 2).unwrap().log_pdf(&d.sequences[0].frames[f][2]).unwrap().is_finite());
}

#[test]
fn symmetric_scenario_is_mirror_stationary() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = synth_generate(Scenario::TrimodalArm, 20, BRANCH_FRAME + 5, 25.0, &mut rng).unwrap();
    let map = d.skeleton.mirror_map().unwrap();
    for (i, s) in d.sequences.iter().enumerate() {
        for f in 0..BRANCH_FRAME {
            let m = mirror_frame(&s.frames[f], map);
            assert!(m.iter().zip(&s.frames[f]).all(|(a, b)| a.angle_to(b) < 1e-12));
        }
        for f in [BRANCH_FRAME, BRANCH_FRAME + 4] {
            let m = mirror_frame(&s.frames[f], map);
            let ll = |fr: &[UnitQuaternion]| -> f64 {
                (0..5).map(|j| d.frame_distribution(i, f, j).unwrap().log_pdf(&fr[j]).unwrap()).sum()
            };
            assert!((ll(&m) - ll(&s.frames[f])).abs() < 1e-9);
        }
    }
}

#[test]
fn random_walk_law_is_conditional_on_previous_frame() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = synth_generate(Scenario::RandomWalk, 2, 5, 25.0, &mut rng).unwrap();
    let law = d.frame_distribution(1, 3, 2).unwrap();
    assert_eq!(law.components()[0].mean(), &d.sequences[1].frames[2][2]);
    let cv = synth_generate(Scenario::ConstantVelocity, 1, 5, 25.0, &mut rng).unwrap();
    assert!(cv.frame_distribution(0, 2, 0).unwrap().components()[0].is_point_mass());
}
