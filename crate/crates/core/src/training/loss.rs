use std::f64::consts::PI;

use super::Objective;
use crate::diffcore::{BoundParams, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::model::{ForecastResult, Motion, Motron, STATE_DIM};
use crate::so3stats::log_sum_exp;

/// Loss of one forecast against a ground-truth motion `[t][n]`, summed over
/// steps and nodes.
pub fn forecast_loss(forecast: &ForecastResult, truth: &Motion, objective: Objective) -> Result<f64> {
    if truth.len() != forecast.horizon() || truth.iter().any(|f| f.len() != forecast.num_nodes()) {
        return invalid(format!(
            "truth is {}×{}, forecast {}×{}",
            truth.len(),
            truth.first().map_or(0, |f| f.len()),
            forecast.horizon(),
            forecast.num_nodes()
        ));
    }
    let mut per_mode = vec![0.0; forecast.num_modes()];
    for (z, steps) in forecast.modes().iter().enumerate() {
        for (t, nodes) in steps.iter().enumerate() {
            for (n, d) in nodes.iter().enumerate() {
                let lp = d.log_pdf(&truth[t][n])?;
                if !lp.is_finite() {
                    return Err(non_finite(t, n, z));
                }
                per_mode[z] += lp;
            }
        }
    }
    let w = forecast.mode_weights();
    Ok(match objective {
        Objective::Marginal => {
            let terms: Vec<f64> =
                w.iter().zip(&per_mode).filter(|(p, _)| **p > 0.0).map(|(p, l)| p.ln() + l).collect();
            -log_sum_exp(&terms)
        }
        Objective::Expected => -w.iter().zip(&per_mode).map(|(p, l)| p * l).sum::<f64>(),
    })
}

fn non_finite(t: usize, n: usize, z: usize) -> Error {
    Error::Numerical(format!("non-finite log-density at step {t}, node {n}, mode {z}"))
}

/// Differentiable batch loss, the mean over the batch of the per-sample loss.
///
/// `states` is `[B, H+1, N, 8]`; `truth` is `[B, T, N, 4]`. Each mode's
/// differential distributions are integrated from the last observed pose.
pub fn batch_loss<'t>(
    model: &Motron,
    p: &BoundParams<'t>,
    tape: &'t Tape,
    states: &Tensor,
    truth: &Tensor,
    objective: Objective,
) -> Result<Var<'t>> {
    let (ss, ts) = (states.shape(), truth.shape());
    if ts.len() != 4 || ss.len() != 4 || ts[0] != ss[0] || ts[2] != ss[2] || ts[3] != 4 {
        return invalid(format!("truth shape {ts:?} does not match states {ss:?}"));
    }
    let (b, k, n) = (ss[0], ss[1], ss[2]);
    let horizon = ts[1];
    let z = model.config().modes;
    let rows = b * z;
    let fv = model.forward(p, tape.constant(states.clone()), horizon)?;

    // origin and truth are replicated per mode, rows ordered b·Z + z
    let origin = tape.constant(Tensor::from_fn(&[rows, n, 4], |i| {
        let (r, j, c) = (i / (n * 4), (i / 4) % n, i % 4);
        states.data()[((r / z * k + k - 1) * n + j) * STATE_DIM + c]
    }));

    let log_norm = 1.5 * (2.0 * PI).ln();
    let mut mu = origin;
    let mut sigma: Option<Var<'t>> = None;
    let mut total: Option<Var<'t>> = None;
    for t in 0..horizon {
        let rot = mu.quat_to_rotmat()?;
        let spread = rot.batched_matmul(fv.covs[t])?.batched_matmul(rot.transpose_last2()?)?;
        let cov = match sigma {
            None => spread,
            Some(s) => s.add(spread)?,
        };
        mu = mu.quat_mul(fv.means[t])?;
        let y = tape.constant(Tensor::from_fn(&[rows, n, 4], |i| {
            let (r, j, c) = (i / (n * 4), (i / 4) % n, i % 4);
            truth.data()[((r / z * horizon + t) * n + j) * 4 + c]
        }));
        let e = y.quat_mul(mu.quat_conj()?)?.quat_log()?;
        let lp = cov.mahalanobis3(e)?.add(cov.logdet3()?)?.scale(-0.5).add_scalar(-log_norm);
        if let Some(i) = lp.value().data().iter().position(|v| !v.is_finite()) {
            return Err(non_finite(t, i % n, (i / n) % z));
        }
        total = Some(match total {
            None => lp,
            Some(acc) => acc.add(lp)?,
        });
        sigma = Some(cov);
    }
    let ll = total.expect("horizon >= 1").sum_axis(1)?.reshape(&[b, z])?;
    let per_sample = match objective {
        Objective::Marginal => fv.log_pi.add(ll)?.log_sum_exp().neg(),
        Objective::Expected => {
            let log_pi = if model.config().latent_grad_flow { fv.log_pi } else { fv.log_pi.detach() };
            log_pi.exp().mul(ll)?.sum_axis(1)?.neg()
        }
    };
    Ok(per_sample.mean())
}

/// Mean per-sample loss over `states`/`truth` without gradients, in chunks.
pub fn dataset_loss(model: &Motron, states: &Tensor, truth: &Tensor, objective: Objective, chunk: usize) -> Result<f64> {
    let b = states.shape()[0];
    let mut acc = 0.0;
    let mut start = 0;
    while start < b {
        let len = chunk.max(1).min(b - start);
        let tape = Tape::new();
        let p = model.params().attach_frozen(&tape);
        let s = slice0(states, start, len);
        let y = slice0(truth, start, len);
        acc += batch_loss(model, &p, &tape, &s, &y, objective)?.item() * len as f64;
        start += len;
    }
    Ok(acc / b as f64)
}

pub(crate) fn slice0(t: &Tensor, start: usize, len: usize) -> Tensor {
    let inner: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = len;
    Tensor::new(shape, t.data()[start * inner..(start + len) * inner].to_vec()).expect("consistent slice")
}
