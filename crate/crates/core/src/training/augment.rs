use rand::Rng;

use super::TrainConfig;
use crate::diffcore::Tensor;
use crate::error::{invalid, Result};
use crate::kindata::{reflect_quat, Skeleton, MIRROR_NORMAL};
use crate::model::{Motion, STATE_DIM};
use crate::rotmath::UnitQuaternion;

/// Neutral state: identity rotation and identity differential.
pub const NEUTRAL_STATE: [f64; STATE_DIM] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];

/// Occludes each node of a `[H+1, N, 8]` history with probability `p`: a
/// run of `k ~ U{1..H+1}` most recent frames becomes the neutral state.
pub fn node_dropout<R: Rng + ?Sized>(states: &Tensor, rng: &mut R, p: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&p) {
        return invalid(format!("dropout probability must lie in [0, 1], got {p}"));
    }
    let s = states.shape();
    if s.len() != 3 || s[2] != STATE_DIM {
        return invalid(format!("expected [H+1, N, {STATE_DIM}] states, got {s:?}"));
    }
    let (k, n) = (s[0], s[1]);
    let mut out = states.clone();
    for j in 0..n {
        if p == 0.0 || !rng.random_bool(p) {
            continue;
        }
        let run = rng.random_range(1..=k);
        for f in k - run..k {
            let o = (f * n + j) * STATE_DIM;
            out.data_mut()[o..o + STATE_DIM].copy_from_slice(&NEUTRAL_STATE);
        }
    }
    Ok(out)
}

/// Mirrors a history and its future through the skeleton's sagittal plane:
/// partner joints swap and every rotation is reflected.
pub fn mirror_augment(states: &Tensor, future: &Motion, skeleton: &Skeleton) -> Result<(Tensor, Motion)> {
    let Some(map) = skeleton.mirror_map() else {
        return invalid("skeleton declares no left/right correspondence");
    };
    let s = states.shape();
    let n = map.len();
    if s.len() != 3 || s[1] != n || s[2] != STATE_DIM || future.iter().any(|f| f.len() != n) {
        return invalid(format!("states {s:?} do not match a {n}-joint skeleton"));
    }
    let reflect = |d: &[f64]| -> [f64; 4] {
        reflect_quat(&UnitQuaternion::from_unit_parts(d[0], d[1], d[2], d[3]), &MIRROR_NORMAL).to_array()
    };
    let mut out = states.clone();
    for f in 0..s[0] {
        for (j, &src) in map.iter().enumerate() {
            let from = (f * n + src) * STATE_DIM;
            let to = (f * n + j) * STATE_DIM;
            let q = reflect(&states.data()[from..from + 4]);
            let dq = reflect(&states.data()[from + 4..from + 8]);
            out.data_mut()[to..to + 4].copy_from_slice(&q);
            out.data_mut()[to + 4..to + 8].copy_from_slice(&dq);
        }
    }
    let fut = future
        .iter()
        .map(|frame| map.iter().map(|&src| reflect_quat(&frame[src], &MIRROR_NORMAL)).collect())
        .collect();
    Ok((out, fut))
}

/// Curriculum horizon of `epoch`: grows from the start horizon by the step
/// per epoch until it reaches the target.
pub fn horizon_schedule(epoch: usize, cfg: &TrainConfig) -> usize {
    (cfg.start_horizon + epoch.saturating_mul(cfg.horizon_step)).min(cfg.target_horizon)
}

/// Per-iteration horizon, uniform in `1..=current`.
pub fn shrink_horizon<R: Rng + ?Sized>(current: usize, rng: &mut R) -> usize {
    rng.random_range(1..=current.max(1))
}
