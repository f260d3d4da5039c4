use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use proptest::{prop_assert, prop_assert_eq, proptest};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::kindata::{states_from_frames, synth_generate, Joint, Scenario, BRANCH_FRAME};
use crate::rotmath::{euler_zyx_to_quat, exp_so3};

fn normal3(rng: &mut impl Rng, s: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| s * rng.sample::<f64, _>(StandardNormal))
}

fn random_track(rng: &mut impl Rng, t: usize, n: usize) -> Track {
    (0..t).map(|_| (0..n).map(|_| normal3(rng, 1.0)).collect()).collect()
}

fn single_point_tracks(pts: &[Vector3<f64>]) -> Vec<Track> {
    pts.iter().map(|p| vec![vec![*p]]).collect()
}

fn chain(lengths: &[f64]) -> Skeleton {
    let mut joints = vec![Joint { name: "root".into(), class: 0, parent: None, offset: Vector3::zeros() }];
    for (i, l) in lengths.iter().enumerate() {
        joints.push(Joint { name: format!("j{i}"), class: i as u32 + 1, parent: Some(i), offset: Vector3::new(*l, 0.0, 0.0) });
    }
    Skeleton::new(joints, &[]).unwrap()
}

fn rz(a: f64) -> UnitQuaternion {
    exp_so3(&Vector3::new(0.0, 0.0, a))
}

#[test]
fn kde_clips_far_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts: Vec<_> = (0..200).map(|_| normal3(&mut rng, 0.1)).collect();
    let r = kde_nll(&single_point_tracks(&pts), &vec![vec![Vector3::new(50.0, 0.0, 0.0)]], KDE_CLIP, Bandwidth::Scott)
        .unwrap();
    assert_eq!(r.per_step, vec![20.0]);
    assert_eq!(r.sum, 20.0);
}

#[test]
fn kde_matches_gaussian_at_its_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for s in [0.05, 1.0] {
        let pts: Vec<_> = (0..1000).map(|_| normal3(&mut rng, s)).collect();
        let r = kde_nll(&single_point_tracks(&pts), &vec![vec![Vector3::zeros()]], KDE_CLIP, Bandwidth::Scott).unwrap();
        let analytic = 1.5 * (2.0 * PI * s * s).ln();
        assert!((r.per_step[0] - analytic).abs() < 0.3, "{} vs {analytic}", r.per_step[0]);
    }
}

#[test]
fn kde_is_duplication_invariant_under_fixed_bandwidth() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples: Vec<Track> = (0..100).map(|_| random_track(&mut rng, 3, 2)).collect();
    let truth = random_track(&mut rng, 3, 2);
    let h = Bandwidth::Fixed(Matrix3::identity() * 0.2);
    let once = kde_nll(&samples, &truth, KDE_CLIP, h).unwrap();
    let doubled: Vec<Track> = samples.iter().chain(&samples).cloned().collect();
    let twice = kde_nll(&doubled, &truth, KDE_CLIP, h).unwrap();
    for (a, b) in once.per_step.iter().zip(&twice.per_step) {
        assert!((a - b).abs() < 1e-6);
    }
    // Scott's rule narrows the kernel as S grows, so the value moves a little
    let scott = kde_nll(&samples, &truth, KDE_CLIP, Bandwidth::Scott).unwrap();
    let scott2 = kde_nll(&doubled, &truth, KDE_CLIP, Bandwidth::Scott).unwrap();
    assert!((scott.sum - scott2.sum).abs() > 1e-6);
}

#[test]
fn kde_floors_degenerate_samples() {
    let samples = vec![vec![vec![Vector3::new(1.0, 2.0, 3.0)]]; 10];
    let r = kde_nll(&samples, &vec![vec![Vector3::new(1.0, 2.0, 3.0)]], KDE_CLIP, Bandwidth::Scott).unwrap();
    assert_eq!(r.floored, 1);
    // a kernel of std 1e-6 at its centre
    let expected = 1.5 * (2.0 * PI * 1e-12).ln();
    assert!((r.per_step[0] - expected).abs() < 1e-6, "{}", r.per_step[0]);
    assert!(kde_nll(&samples[..1], &samples[0], KDE_CLIP, Bandwidth::Scott).is_err());
}

#[test]
fn kde_sums_independent_joints_and_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let samples: Vec<Track> = (0..50).map(|_| random_track(&mut rng, 2, 3)).collect();
    let truth = random_track(&mut rng, 2, 3);
    let full = kde_nll(&samples, &truth, f64::INFINITY, Bandwidth::Scott).unwrap();
    for t in 0..2 {
        let mut acc = 0.0;
        for j in 0..3 {
            let sub: Vec<Track> = samples.iter().map(|s| vec![vec![s[t][j]]]).collect();
            acc += kde_nll(&sub, &vec![vec![truth[t][j]]], f64::INFINITY, Bandwidth::Scott).unwrap().sum;
        }
        assert!((full.per_step[t] - acc).abs() < 1e-9);
    }
    assert!((full.sum - full.per_step.iter().sum::<f64>()).abs() < 1e-12);
}

#[test]
fn kde_recovers_the_generator_law_in_the_rotation_chart() {
    // elbow of the bimodal generator: a large sample set against the exact
    // per-frame mixture, compared in the same tangent chart
    let horizon = 25;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let reference = [UnitQuaternion::IDENTITY];
    // elbow after the split, with the sequence phase removed so that all
    // sequences share one law
    let elbow = |d: &crate::kindata::SynthDataset, i: usize| -> Track {
        let undo = rz(-d.phases[i]);
        let m: Motion = d.sequences[i].frames[BRANCH_FRAME..]
            .iter()
            .map(|f| vec![crate::rotmath::quat_mul(&f[2], &undo)])
            .collect();
        rotation_chart(&m, &reference)
    };
    let mut tracks: Vec<Track> = Vec::with_capacity(100_000);
    for _ in 0..10 {
        let d = synth_generate(Scenario::BimodalPendulum, 10_000, BRANCH_FRAME + horizon, 25.0, &mut rng).unwrap();
        tracks.extend((0..10_000).map(|i| elbow(&d, i)));
    }
    let mut truths = synth_generate(Scenario::BimodalPendulum, 50, BRANCH_FRAME + horizon, 25.0, &mut rng).unwrap();
    let charts: Vec<Track> = (0..50).map(|i| elbow(&truths, i)).collect();
    truths.phases.iter_mut().for_each(|p| *p = 0.0);
    let mut kde = vec![0.0; horizon];
    let mut analytic = vec![0.0; horizon];
    for (i, chart) in charts.iter().enumerate() {
        let r = kde_nll(&tracks, chart, f64::INFINITY, Bandwidth::Scott).unwrap();
        for t in 0..horizon {
            kde[t] += r.per_step[t] / 50.0;
            let law = truths.frame_distribution(i, BRANCH_FRAME + t, 2).unwrap();
            analytic[t] -= mixture_log_pdf_in_chart(&law, &reference[0], &chart[t][0]).unwrap() / 50.0;
        }
    }
    for t in 0..horizon {
        assert!((kde[t] - analytic[t]).abs() < 0.5, "step {t}: kde {} analytic {}", kde[t], analytic[t]);
    }
}

#[test]
fn ade_fde_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let truth = random_track(&mut rng, 5, 3);
    let other = random_track(&mut rng, 5, 3);
    assert_eq!(ade_fde_best_of_n(&[other.clone(), truth.clone()], &truth).unwrap(), (0.0, 0.0));
    let shifted: Track = truth.iter().map(|f| f.iter().map(|p| p + Vector3::new(0.0, 1.0, 0.0)).collect()).collect();
    let (a, f) = ade_fde_best_of_n(&[shifted], &truth).unwrap();
    assert!((a - 1.0).abs() < 1e-12 && (f - 1.0).abs() < 1e-12);
    assert!(ade_fde_best_of_n(&[], &truth).is_err());
    assert!(ade_fde_best_of_n(&[random_track(&mut rng, 4, 3)], &truth).is_err());
}

proptest! {
    #[test]
    fn best_of_n_matches_loop_oracle(seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = random_track(&mut rng, 4, 3);
        let mut samples: Vec<Track> = (0..6).map(|_| random_track(&mut rng, 4, 3)).collect();
        let (ade, fde) = ade_fde_best_of_n(&samples, &truth).unwrap();
        let mut best = (f64::INFINITY, f64::INFINITY);
        for s in &samples {
            let mut acc = 0.0;
            for t in 0..4 {
                for j in 0..3 {
                    acc += (s[t][j] - truth[t][j]).norm();
                }
            }
            let last: f64 = (0..3).map(|j| (s[3][j] - truth[3][j]).norm()).sum::<f64>() / 3.0;
            prop_assert!(ade <= acc / 12.0 + 1e-12 && fde <= last + 1e-12);
            best = (best.0.min(acc / 12.0), best.1.min(last));
        }
        prop_assert!((ade - best.0).abs() < 1e-12 && (fde - best.1).abs() < 1e-12);
        let a = apd(&samples).unwrap();
        samples.shuffle(&mut rng);
        prop_assert!((apd(&samples).unwrap() - a).abs() < 1e-12);
        prop_assert_eq!(ade_fde_best_of_n(&samples, &truth).unwrap(), (ade, fde));
    }

    #[test]
    fn mm_groups_grow_with_threshold(seed in 0u64..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let poses: Vec<Vec<Vector3<f64>>> = (0..12).map(|_| (0..3).map(|_| normal3(&mut rng, 0.5)).collect()).collect();
        let mut prev = 0;
        for th in [1e-9, 0.5, 1.0, 2.0, 4.0, 1e9] {
            let g = mm_group(&poses, 3, th).unwrap();
            prop_assert!(g.contains(&3) && g.len() >= prev);
            prev = g.len();
        }
        prop_assert_eq!(mm_group(&poses, 3, 1e-9).unwrap(), vec![3]);
        prop_assert_eq!(mm_group(&poses, 3, 1e9).unwrap(), (0..12).collect::<Vec<_>>());
    }
}

#[test]
fn apd_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random_track(&mut rng, 4, 2);
    assert_eq!(apd(&[a.clone(), a.clone(), a.clone()]).unwrap(), 0.0);
    let d = 0.3;
    let b: Track = a.iter().map(|f| f.iter().map(|p| p.add_scalar(d)).collect()).collect();
    // K = 4 steps × 2 joints × 3 coordinates, each off by d
    assert!((apd(&[a.clone(), b.clone()]).unwrap() - d * 24f64.sqrt()).abs() < 1e-12);
    let c = random_track(&mut rng, 4, 2);
    let flat = |x: &Track| -> Vec<f64> { x.iter().flatten().flat_map(|p| p.iter().copied().collect::<Vec<_>>()).collect() };
    let dist = |x: &Track, y: &Track| flat(x).iter().zip(flat(y)).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
    let oracle = (dist(&a, &b) + dist(&a, &c) + dist(&b, &c)) / 3.0;
    assert!((apd(&[a.clone(), b, c]).unwrap() - oracle).abs() < 1e-12);
    assert!(apd(&[a]).is_err());
}

#[test]
fn mm_metrics_reduce_to_best_of_n_at_tiny_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let futures: Vec<Track> = (0..6).map(|_| random_track(&mut rng, 5, 3)).collect();
    let firsts: Vec<Vec<Vector3<f64>>> = (0..6).map(|_| (0..3).map(|_| normal3(&mut rng, 1.0)).collect()).collect();
    let samples: Vec<Vec<Track>> = (0..6).map(|_| (0..4).map(|_| random_track(&mut rng, 5, 3)).collect()).collect();
    let groups: Vec<Vec<usize>> = (0..6).map(|q| mm_group(&firsts, q, 1e-12).unwrap()).collect();
    let (mmade, mmfde) = mmade_mmfde(&samples, &futures, &groups).unwrap();
    let (mut ade, mut fde) = (0.0, 0.0);
    for q in 0..6 {
        let (a, f) = ade_fde_best_of_n(&samples[q], &futures[q]).unwrap();
        ade += a / 6.0;
        fde += f / 6.0;
    }
    assert!((mmade - ade).abs() < 1e-12 && (mmfde - fde).abs() < 1e-12);
    // with one all-encompassing group, every query averages over all futures
    let all: Vec<Vec<usize>> = (0..6).map(|q| mm_group(&firsts, q, 1e12).unwrap()).collect();
    let (wide, _) = mmade_mmfde(&samples, &futures, &all).unwrap();
    let mut oracle = 0.0;
    for q in 0..6 {
        for g in 0..6 {
            oracle += ade_fde_best_of_n(&samples[q], &futures[g]).unwrap().0 / 36.0;
        }
    }
    assert!((wide - oracle).abs() < 1e-12);
    assert!(mm_group(&firsts, 0, 0.0).is_err());
}

#[test]
fn mae_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let truth: Motion = (0..3).map(|_| (0..2).map(|_| exp_so3(&normal3(&mut rng, 0.5))).collect()).collect();
    assert!(mae_l2(&truth, &truth).unwrap().iter().all(|v| v.abs() < 1e-12));
    let base = Vector3::new(0.3, -0.2, 0.1);
    let t = vec![vec![euler_zyx_to_quat(&base), UnitQuaternion::IDENTITY]];
    let off = vec![vec![euler_zyx_to_quat(&(base + Vector3::new(0.5, 0.0, 0.0))), UnitQuaternion::IDENTITY]];
    assert!((mae_l2(&off, &t).unwrap()[0] - 0.5).abs() < 1e-9);
    // a full turn about z leaves the rotation, and the wrapped error, unchanged
    let turned = vec![vec![euler_zyx_to_quat(&(base + Vector3::new(2.0 * PI, 0.0, 0.0))), UnitQuaternion::IDENTITY]];
    assert!(mae_l2(&turned, &t).unwrap()[0] < 1e-9);
    // wrapping across ±π
    let a = vec![vec![rz(PI - 0.05)]];
    let b = vec![vec![rz(-PI + 0.05)]];
    assert!((mae_l2(&a, &b).unwrap()[0] - 0.1).abs() < 1e-9);
    assert!(mae_l2(&a, &truth).is_err());
}

#[test]
fn mpjpe_examples() {
    let skel = chain(&[0.4]);
    let angle = 0.7;
    let truth = vec![vec![UnitQuaternion::IDENTITY, UnitQuaternion::IDENTITY]];
    let pred = vec![vec![rz(angle), UnitQuaternion::IDENTITY]];
    let e = mpjpe(&pred, &truth, &skel).unwrap();
    assert!((e[0] - 2.0 * 0.4 * (angle / 2.0).sin() * 1000.0).abs() < 1e-9);
    assert_eq!(mpjpe(&truth, &truth, &skel).unwrap(), vec![0.0]);

    let skel = chain(&[0.3, 0.25, 0.2]);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a: Motion = (0..4).map(|_| (0..4).map(|_| exp_so3(&normal3(&mut rng, 0.6))).collect()).collect();
    let b: Motion = (0..4).map(|_| (0..4).map(|_| exp_so3(&normal3(&mut rng, 0.6))).collect()).collect();
    let e = mpjpe(&a, &b, &skel).unwrap();
    for t in 0..4 {
        let pa = motion_track(&a, &skel).unwrap();
        let pb = motion_track(&b, &skel).unwrap();
        let oracle: f64 = (1..4).map(|j| (pa[t][j] - pb[t][j]).norm()).sum::<f64>() / 3.0 * 1000.0;
        assert!((e[t] - oracle).abs() < 1e-9);
    }
}

#[test]
fn bone_audit_examples() {
    let skel = chain(&[0.3, 0.25, 0.2]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let motion: Motion = (0..5).map(|_| (0..4).map(|_| exp_so3(&normal3(&mut rng, 1.0))).collect()).collect();
    let mut pos = motion_track(&motion, &skel).unwrap();
    for (mean, max) in bone_deformation_audit(&pos, &skel).unwrap() {
        assert!(mean < 1e-12 && max < 1e-12);
    }
    // push the leaf 5 cm further along its bone
    let dir = (pos[2][3] - pos[2][2]).normalize();
    pos[2][3] += dir * 0.05;
    let audit = bone_deformation_audit(&pos, &skel).unwrap();
    assert!((audit[2].1 - 0.05).abs() < 1e-12);
    assert!((audit[2].0 - 0.05 / 3.0).abs() < 1e-12);
    assert!(bone_deformation_audit(&vec![vec![Vector3::zeros(); 2]], &skel).is_err());
}

#[test]
fn zero_velocity_baseline_examples() {
    let still: Vec<Vec<UnitQuaternion>> = vec![vec![rz(0.4), UnitQuaternion::IDENTITY]; 6];
    let states = states_from_frames(&still).unwrap();
    let pred = zero_velocity_baseline(&states, 8).unwrap();
    assert_eq!(pred.len(), 8);
    assert!(mae_l2(&pred, &vec![still[0].clone(); 8]).unwrap().iter().all(|v| v.abs() < 1e-12));

    // one joint spinning at ω about z: the error grows linearly, then wraps
    let omega = 0.3;
    let frames: Vec<Vec<UnitQuaternion>> = (0..30).map(|f| vec![rz(omega * f as f64), UnitQuaternion::IDENTITY]).collect();
    let states = states_from_frames(&frames[..5]).unwrap();
    let pred = zero_velocity_baseline(&states, 25).unwrap();
    let err = mae_l2(&pred, &frames[5..].to_vec()).unwrap();
    for (t, e) in err.iter().enumerate() {
        let expected = wrap_angle(omega * (t + 1) as f64).abs();
        assert!((e - expected).abs() < 1e-9, "step {t}: {e} vs {expected}");
    }
    assert!(zero_velocity_baseline(&Tensor::zeros(&[2, 2]), 3).is_err());
}

#[test]
fn metric_report_round_trips() {
    let r = MetricReport::per_step("kde_nll", vec![1.5, 2.0, 2.25], 25.0, 1000).unwrap();
    assert_eq!(r.horizons_ms(), &[40.0, 80.0, 120.0]);
    let csv = r.to_csv();
    assert!(csv.starts_with("horizon_ms,value\n40,1.5\n"));
    assert_eq!(MetricReport::from_csv("kde_nll", &csv, 1000).unwrap(), r);
    assert!(MetricReport::new("x", vec![1.0, 1.0], vec![0.0, 0.0], 1).is_err());
    assert!(MetricReport::from_csv("x", "h,v\n", 1).is_err());
    let json: serde_json::Value = serde_json::from_str(&MetricReport::summary_json(&[r.clone()])).unwrap();
    assert_eq!(json["metrics"][0]["values"][2], 2.25);
    let svg = svg_line_chart("NLL over time", "ms", "nats", &[r.series()]);
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>") && svg.contains("polyline"));
}
