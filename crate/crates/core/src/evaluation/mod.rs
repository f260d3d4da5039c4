//! Sample-based and deterministic forecast metrics.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::diffcore::Tensor;
use crate::error::{invalid, Result};
use crate::kindata::{forward_kinematics, Skeleton};
use crate::model::{Motion, STATE_DIM};
use crate::rotmath::{log_so3, quat_mul, quat_to_euler_zyx, wrap_angle, UnitQuaternion};
use crate::so3stats::{log_sum_exp, MixtureSO3};

mod report;

pub use report::{svg_line_chart, MetricReport, Series};

/// Joint positions (or other 3-d per-joint coordinates) `[t][n]`.
pub type Track = Vec<Vec<Vector3<f64>>>;

/// Upper bound applied to each per-step KDE-NLL.
pub const KDE_CLIP: f64 = 20.0;

/// Smallest kernel standard deviation along any direction.
pub const BANDWIDTH_FLOOR: f64 = 1e-6;

/// Kernel covariance rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    /// Sample covariance scaled by `S^(−2/(d+4))`.
    Scott,
    /// The same kernel covariance for every joint and step.
    Fixed(Matrix3<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct KdeNll {
    /// Clipped NLL per step, joints summed.
    pub per_step: Vec<f64>,
    pub sum: f64,
    /// Number of (step, joint) kernels that hit the bandwidth floor.
    pub floored: usize,
}

fn check_tracks(samples: &[Track], truth: &Track) -> Result<(usize, usize)> {
    let t = truth.len();
    let n = truth.first().map_or(0, |f| f.len());
    if t == 0 || n == 0 {
        return invalid("empty ground truth");
    }
    if samples.iter().any(|s| s.len() != t || s.iter().any(|f| f.len() != n)) {
        return invalid(format!("samples do not all match the {t}×{n} ground truth"));
    }
    Ok((t, n))
}

/// Per-step KDE negative log-likelihood of `truth` under the samples: an
/// independent 3-d Gaussian KDE per joint, joint log-densities summed,
/// each step clipped at `clip`.
pub fn kde_nll(samples: &[Track], truth: &Track, clip: f64, bandwidth: Bandwidth) -> Result<KdeNll> {
    if samples.len() < 2 {
        return invalid("KDE needs at least two samples");
    }
    let (t_len, n) = check_tracks(samples, truth)?;
    let s = samples.len() as f64;
    let scott = s.powf(-2.0 / 7.0);
    let mut per_step = Vec::with_capacity(t_len);
    let mut floored = 0;
    let mut pts = Vec::with_capacity(samples.len());
    for t in 0..t_len {
        let mut ll = 0.0;
        for j in 0..n {
            pts.clear();
            pts.extend(samples.iter().map(|smp| smp[t][j]));
            let raw = match bandwidth {
                Bandwidth::Scott => sample_cov(&pts) * scott,
                Bandwidth::Fixed(h) => h,
            };
            let (kernel, hit) = floor_cov(raw);
            floored += hit as usize;
            ll += kde_log_density(&pts, &kernel, &truth[t][j]);
        }
        per_step.push((-ll).min(clip));
    }
    if floored > 0 {
        log::warn!("KDE bandwidth floor applied to {floored} kernels");
    }
    let sum = per_step.iter().sum();
    Ok(KdeNll { per_step, sum, floored })
}

fn sample_cov(pts: &[Vector3<f64>]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let mean = pts.iter().sum::<Vector3<f64>>() / n;
    pts.iter().map(|p| (p - mean) * (p - mean).transpose()).sum::<Matrix3<f64>>() / (n - 1.0)
}

fn floor_cov(m: Matrix3<f64>) -> (Matrix3<f64>, bool) {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let floor = BANDWIDTH_FLOOR * BANDWIDTH_FLOOR;
    let hit = eig.eigenvalues.iter().any(|&l| !(l >= floor));
    let vals = eig.eigenvalues.map(|l| if l >= floor { l } else { floor });
    (eig.eigenvectors * Matrix3::from_diagonal(&vals) * eig.eigenvectors.transpose(), hit)
}

/// `ln (1/S) Σ_i N(x; p_i, H)`.
fn kde_log_density(pts: &[Vector3<f64>], kernel: &Matrix3<f64>, x: &Vector3<f64>) -> f64 {
    let chol = kernel.cholesky().expect("floored kernel is positive definite");
    let l = chol.l();
    let logdet = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let norm = -0.5 * logdet - 1.5 * (2.0 * std::f64::consts::PI).ln() - (pts.len() as f64).ln();
    let terms: Vec<f64> = pts
        .iter()
        .map(|p| {
            let u = l.solve_lower_triangular(&(x - p)).expect("nonsingular factor");
            -0.5 * u.norm_squared()
        })
        .collect();
    log_sum_exp(&terms) + norm
}

fn mean_error(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).norm()).sum::<f64>() / a.len() as f64
}

/// Best-of-N `(ADE, FDE)`: each sample is reduced to its mean error first,
/// then the minimum over samples is taken.
pub fn ade_fde_best_of_n(samples: &[Track], truth: &Track) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return invalid("best-of-N needs at least one sample");
    }
    let (t_len, _) = check_tracks(samples, truth)?;
    let mut ade = f64::INFINITY;
    let mut fde = f64::INFINITY;
    for s in samples {
        let avg = s.iter().zip(truth).map(|(a, b)| mean_error(a, b)).sum::<f64>() / t_len as f64;
        ade = ade.min(avg);
        fde = fde.min(mean_error(&s[t_len - 1], &truth[t_len - 1]));
    }
    Ok((ade, fde))
}

/// Mean L2 distance between the flattened trajectories of all sample pairs.
pub fn apd(samples: &[Track]) -> Result<f64> {
    if samples.len() < 2 {
        return invalid("APD needs at least two samples");
    }
    check_tracks(&samples[1..], &samples[0])?;
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let sq: f64 = samples[i]
                .iter()
                .flatten()
                .zip(samples[j].iter().flatten())
                .map(|(a, b)| (a - b).norm_squared())
                .sum();
            acc += sq.sqrt();
            pairs += 1;
        }
    }
    Ok(acc / pairs as f64)
}

/// Indices of all motions whose first pose lies strictly within
/// `threshold` (flattened L2 distance) of the query's first pose.
pub fn mm_group(first_poses: &[Vec<Vector3<f64>>], query: usize, threshold: f64) -> Result<Vec<usize>> {
    if !(threshold > 0.0) {
        return invalid(format!("threshold must be positive, got {threshold}"));
    }
    let q = first_poses.get(query).ok_or_else(|| crate::Error::InvalidArgument(format!("no motion {query}")))?;
    Ok(first_poses
        .iter()
        .enumerate()
        .filter(|(i, p)| {
            *i == query || p.iter().zip(q).map(|(a, b)| (a - b).norm_squared()).sum::<f64>().sqrt() < threshold
        })
        .map(|(i, _)| i)
        .collect())
}

/// Multimodal `(MMADE, MMFDE)`: per query the best-of-N errors against every
/// future in its group are averaged, then averaged over queries.
pub fn mmade_mmfde(samples_per_query: &[Vec<Track>], futures: &[Track], groups: &[Vec<usize>]) -> Result<(f64, f64)> {
    if samples_per_query.len() != groups.len() || samples_per_query.is_empty() {
        return invalid("one group per query is required");
    }
    let mut ade = 0.0;
    let mut fde = 0.0;
    for (samples, group) in samples_per_query.iter().zip(groups) {
        if group.is_empty() {
            return invalid("empty group");
        }
        let mut ga = 0.0;
        let mut gf = 0.0;
        for &g in group {
            let truth = futures.get(g).ok_or_else(|| crate::Error::InvalidArgument(format!("no future {g}")))?;
            let (a, f) = ade_fde_best_of_n(samples, truth)?;
            ga += a;
            gf += f;
        }
        ade += ga / group.len() as f64;
        fde += gf / group.len() as f64;
    }
    let q = groups.len() as f64;
    Ok((ade / q, fde / q))
}

/// Per step, the L2 norm of all joints' wrapped ZYX Euler-angle differences.
pub fn mae_l2(pred: &Motion, truth: &Motion) -> Result<Vec<f64>> {
    if pred.len() != truth.len() || pred.iter().zip(truth).any(|(a, b)| a.len() != b.len()) {
        return invalid("prediction and truth shapes differ");
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(pf, tf)| {
            pf.iter()
                .zip(tf)
                .map(|(p, t)| {
                    let d = quat_to_euler_zyx(p) - quat_to_euler_zyx(t);
                    d.iter().map(|a| wrap_angle(*a).powi(2)).sum::<f64>()
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Per-step mean joint position error in millimetres after forward
/// kinematics of both motions. Root joints sit at the origin in both and
/// are left out of the mean.
pub fn mpjpe(pred: &Motion, truth: &Motion, skeleton: &Skeleton) -> Result<Vec<f64>> {
    if pred.len() != truth.len() {
        return invalid("prediction and truth lengths differ");
    }
    let origin = Vector3::zeros();
    let moving: Vec<usize> = skeleton.bones().map(|(_, c)| c).collect();
    pred.iter()
        .zip(truth)
        .map(|(p, t)| {
            if moving.is_empty() {
                return Ok(0.0);
            }
            let a = forward_kinematics(skeleton, p, &origin)?;
            let b = forward_kinematics(skeleton, t, &origin)?;
            let sum: f64 = moving.iter().map(|&j| (a[j] - b[j]).norm()).sum();
            Ok(1000.0 * sum / moving.len() as f64)
        })
        .collect()
}

/// Per step `(mean, max)` over bones of `| ‖p_child − p_parent‖ − ‖offset‖ |`.
pub fn bone_deformation_audit(positions: &Track, skeleton: &Skeleton) -> Result<Vec<(f64, f64)>> {
    let n = skeleton.num_joints();
    if positions.iter().any(|f| f.len() != n) {
        return invalid(format!("positions must have {n} joints per step"));
    }
    let bones: Vec<(usize, usize)> = skeleton.bones().collect();
    Ok(positions
        .iter()
        .map(|f| {
            if bones.is_empty() {
                return (0.0, 0.0);
            }
            let devs: Vec<f64> = bones
                .iter()
                .map(|&(p, c)| ((f[c] - f[p]).norm() - skeleton.joints()[c].offset.norm()).abs())
                .collect();
            (devs.iter().sum::<f64>() / devs.len() as f64, devs.iter().cloned().fold(0.0, f64::max))
        })
        .collect())
}

/// Repeats the last observed pose of a `[H+1, N, 8]` history `horizon` times.
pub fn zero_velocity_baseline(states: &Tensor, horizon: usize) -> Result<Motion> {
    let s = states.shape();
    if s.len() != 3 || s[2] != STATE_DIM || s[0] == 0 {
        return invalid(format!("expected [H+1, N, {STATE_DIM}] states, got {s:?}"));
    }
    let (k, n) = (s[0], s[1]);
    let last = (0..n)
        .map(|j| {
            let o = ((k - 1) * n + j) * STATE_DIM;
            let d = &states.data()[o..o + 4];
            UnitQuaternion::new(d[0], d[1], d[2], d[3])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(vec![last; horizon])
}

/// Forward kinematics of every step of a motion.
pub fn motion_track(motion: &Motion, skeleton: &Skeleton) -> Result<Track> {
    crate::kindata::motion_positions(skeleton, motion)
}

/// Tangent coordinates `log(q ⊗ r⁻¹)` of each joint about a fixed
/// per-joint reference pose.
pub fn rotation_chart(motion: &Motion, reference: &[UnitQuaternion]) -> Track {
    motion
        .iter()
        .map(|f| f.iter().zip(reference).map(|(q, r)| log_so3(&quat_mul(q, &r.inverse()))).collect())
        .collect()
}

/// Log density of the chart coordinate `u = log(R ⊗ reference⁻¹)` when `R`
/// follows `law`, comparable with a KDE fitted in the same chart.
pub fn mixture_log_pdf_in_chart(law: &MixtureSO3, reference: &UnitQuaternion, u: &Vector3<f64>) -> Result<f64> {
    let terms = law
        .weights()
        .iter()
        .zip(law.components())
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, c)| Ok(w.ln() + c.log_pdf_in_chart(reference, u)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(log_sum_exp(&terms))
}

#[cfg(test)]
mod tests;
