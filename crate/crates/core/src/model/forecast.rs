use nalgebra::Matrix3;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::rotmath::{integrate_diffs, weighted_quat_mean, UnitQuaternion};
use crate::so3stats::{integrate_distribution, ConcentratedGaussianSO3, MixtureSO3};

/// Per-mode, per-step, per-node distributions. Indexing is `[z][t][n]`.
pub type ModeGrid = Vec<Vec<Vec<ConcentratedGaussianSO3>>>;

/// A motion: `[t][n]` absolute joint rotations.
pub type Motion = Vec<Vec<UnitQuaternion>>;

/// Forecast for one query: latent weights, per-mode differential
/// distributions and their integrated absolute counterparts.
#[derive(Clone, Debug)]
pub struct ForecastResult {
    mode_weights: Vec<f64>,
    origin: Vec<UnitQuaternion>,
    diff_modes: ModeGrid,
    modes: ModeGrid,
}

impl ForecastResult {
    /// Integrates each mode's differential distributions from `origin`.
    pub fn new(mode_weights: Vec<f64>, origin: Vec<UnitQuaternion>, diff_modes: ModeGrid) -> Result<Self> {
        if mode_weights.len() != diff_modes.len() || diff_modes.is_empty() {
            return invalid(format!(
                "{} mode weights for {} modes",
                mode_weights.len(),
                diff_modes.len()
            ));
        }
        let total: f64 = mode_weights.iter().sum();
        if mode_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return invalid(format!("mode weights {mode_weights:?} are not on the simplex"));
        }
        let horizon = diff_modes[0].len();
        let nodes = origin.len();
        if horizon == 0 {
            return invalid("forecast needs at least one step");
        }
        for steps in &diff_modes {
            if steps.len() != horizon || steps.iter().any(|s| s.len() != nodes) {
                return invalid("ragged forecast grid");
            }
        }
        let mut modes = Vec::with_capacity(diff_modes.len());
        for steps in &diff_modes {
            let mut per_node = Vec::with_capacity(nodes);
            for (n, q0) in origin.iter().enumerate() {
                let seq: Vec<_> = steps.iter().map(|s| s[n].clone()).collect();
                per_node.push(integrate_distribution(&seq, q0)?);
            }
            modes.push((0..horizon).map(|t| per_node.iter().map(|d| d[t].clone()).collect()).collect());
        }
        Ok(Self { mode_weights, origin, diff_modes, modes })
    }

    pub fn mode_weights(&self) -> &[f64] {
        &self.mode_weights
    }

    pub fn origin(&self) -> &[UnitQuaternion] {
        &self.origin
    }

    /// Integrated absolute-rotation distributions `[z][t][n]`.
    pub fn modes(&self) -> &ModeGrid {
        &self.modes
    }

    /// Differential distributions `[z][t][n]`.
    pub fn diff_modes(&self) -> &ModeGrid {
        &self.diff_modes
    }

    pub fn horizon(&self) -> usize {
        self.modes[0].len()
    }

    pub fn num_nodes(&self) -> usize {
        self.origin.len()
    }

    pub fn num_modes(&self) -> usize {
        self.mode_weights.len()
    }

    /// Mixture over absolute rotations for step `t` (0-based) and node `n`.
    pub fn mixture_at(&self, t: usize, n: usize) -> Result<MixtureSO3> {
        MixtureSO3::new(self.mode_weights.clone(), self.modes.iter().map(|m| m[t][n].clone()).collect())
    }

    /// Index of the most probable mode; ties go to the lowest index.
    pub fn ml_mode(&self) -> usize {
        let mut best = 0;
        for (i, w) in self.mode_weights.iter().enumerate() {
            if *w > self.mode_weights[best] {
                best = i;
            }
        }
        best
    }

    /// Integrated mean motion of mode `z`.
    pub fn mode_mean_motion(&self, z: usize) -> Motion {
        self.modes[z].iter().map(|step| step.iter().map(|d| *d.mean()).collect()).collect()
    }

    /// Mean motion of the most probable mode.
    pub fn ml_mode_motion(&self) -> Motion {
        self.mode_mean_motion(self.ml_mode())
    }

    /// Per step and node, the weighted quaternion mean of the mode means.
    pub fn w_mean_motion(&self) -> Result<Motion> {
        (0..self.horizon())
            .map(|t| {
                (0..self.num_nodes())
                    .map(|n| {
                        let qs: Vec<_> = self.modes.iter().map(|m| *m[t][n].mean()).collect();
                        weighted_quat_mean(&qs, &self.mode_weights)
                    })
                    .collect()
            })
            .collect()
    }

    /// Ancestral samples: mode by weight, then one differential draw per
    /// step and node, integrated from the origin.
    pub fn sample_motions<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<Motion>> {
        Ok(self.sample_motions_with_modes(count, rng)?.into_iter().map(|(_, m)| m).collect())
    }

    /// As [`sample_motions`](Self::sample_motions), also returning each
    /// sample's mode index.
    pub fn sample_motions_with_modes<R: Rng + ?Sized>(
        &self,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<(usize, Motion)>> {
        if count == 0 {
            return invalid("sample count must be at least 1");
        }
        let pick = WeightedIndex::new(&self.mode_weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let factors: Vec<Vec<Vec<Matrix3<f64>>>> = self
            .diff_modes
            .iter()
            .map(|steps| {
                steps
                    .iter()
                    .map(|nodes| nodes.iter().map(|d| d.cholesky_factor()).collect::<Result<Vec<_>>>())
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let horizon = self.horizon();
        let nodes = self.num_nodes();
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let z = pick.sample(rng);
            let mut cur = self.origin.clone();
            let mut motion = Vec::with_capacity(horizon);
            for t in 0..horizon {
                for n in 0..nodes {
                    let d = &self.diff_modes[z][t][n];
                    let step = d.sample_with_factor(&factors[z][t][n], rng);
                    cur[n] = integrate_diffs(&cur[n], &[step])[0];
                }
                motion.push(cur.clone());
            }
            out.push((z, motion));
        }
        Ok(out)
    }

    /// Keeps the first `t` steps.
    pub fn truncated(&self, t: usize) -> Result<Self> {
        if t == 0 || t > self.horizon() {
            return invalid(format!("cannot truncate horizon {} to {t}", self.horizon()));
        }
        Ok(Self {
            mode_weights: self.mode_weights.clone(),
            origin: self.origin.clone(),
            diff_modes: self.diff_modes.iter().map(|m| m[..t].to_vec()).collect(),
            modes: self.modes.iter().map(|m| m[..t].to_vec()).collect(),
        })
    }
}
