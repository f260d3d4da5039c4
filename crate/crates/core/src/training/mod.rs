//! Optimization harness: mixture likelihood loss, augmentation, curriculum
//! and early stopping.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{ParamStore, Tape, Tensor};
use crate::error::{invalid, Error, Result};
use crate::kindata::{states_from_frames, MotionSequence, Skeleton};
use crate::model::{Motion, Motron, STATE_DIM};

mod augment;
mod config;
mod loss;

pub use augment::{horizon_schedule, mirror_augment, node_dropout, shrink_horizon, NEUTRAL_STATE};
pub use config::{Objective, OptimizerKind, TrainConfig};
pub use loss::{batch_loss, dataset_loss, forecast_loss};

/// One training window: history states `[H+1, N, 8]` and the future `[t][n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub states: Tensor,
    pub future: Motion,
}

#[derive(Clone, Debug, Default)]
pub struct WindowSet {
    pub samples: Vec<Sample>,
}

impl WindowSet {
    /// Windows whose current frame advances by `stride` through each
    /// sequence; sequences shorter than one window contribute nothing.
    pub fn from_sequences(seqs: &[MotionSequence], history: usize, horizon: usize, stride: usize) -> Result<Self> {
        if horizon == 0 || stride == 0 {
            return invalid("horizon and stride must be at least 1");
        }
        let mut samples = Vec::new();
        for seq in seqs {
            let mut end = history;
            while end + horizon < seq.num_frames() {
                samples.push(Sample {
                    states: states_from_frames(&seq.frames[end - history..=end])?,
                    future: seq.frames[end + 1..=end + horizon].to_vec(),
                });
                end += stride;
            }
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacked `[B, H+1, N, 8]` states and `[B, T, N, 4]` truth over the
    /// first `horizon` future frames.
    pub fn stacked(&self, horizon: usize) -> Result<(Tensor, Tensor)> {
        stack(self.samples.iter().map(|s| (&s.states, &s.future)), horizon)
    }
}

fn stack<'a>(items: impl Iterator<Item = (&'a Tensor, &'a Motion)>, horizon: usize) -> Result<(Tensor, Tensor)> {
    let mut sdata = Vec::new();
    let mut tdata = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut b = 0;
    for (st, fut) in items {
        match &shape {
            None => shape = Some(st.shape().to_vec()),
            Some(s) if s != st.shape() => return invalid("windows have different shapes"),
            _ => {}
        }
        if fut.len() < horizon {
            return invalid(format!("window has {} future frames, need {horizon}", fut.len()));
        }
        sdata.extend_from_slice(st.data());
        for frame in &fut[..horizon] {
            for q in frame {
                tdata.extend(q.to_array());
            }
        }
        b += 1;
    }
    let s = shape.ok_or_else(|| Error::InvalidArgument("no windows".into()))?;
    let n = s[1];
    Ok((Tensor::new(vec![b, s[0], n, STATE_DIM], sdata)?, Tensor::new(vec![b, horizon, n, 4], tdata)?))
}

/// Splits sequences at random into training and validation parts; the
/// validation part gets `ceil(fraction · count)` sequences.
pub fn split_sequences<R: Rng + ?Sized>(
    seqs: Vec<MotionSequence>,
    fraction: f64,
    rng: &mut R,
) -> (Vec<MotionSequence>, Vec<MotionSequence>) {
    let mut idx: Vec<usize> = (0..seqs.len()).collect();
    idx.shuffle(rng);
    let n_val = ((fraction * seqs.len() as f64).ceil() as usize).min(seqs.len());
    let mut val_mask = vec![false; seqs.len()];
    for &i in &idx[..n_val] {
        val_mask[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, v) in seqs.into_iter().zip(val_mask) {
        if v {
            val.push(s)
        } else {
            train.push(s)
        }
    }
    (train, val)
}

/// First-order optimizer state.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: i32,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore) -> Self {
        let zeros = || store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { kind, lr, m: zeros(), v: zeros(), step: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return invalid(format!("{} gradients for {} parameters", grads.len(), store.len()));
        }
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step);
        let bc2 = 1.0 - Self::BETA2.powi(self.step);
        let mut values = store.values().to_vec();
        for (k, (w, g)) in values.iter_mut().zip(grads).enumerate() {
            match self.kind {
                OptimizerKind::Sgd => {
                    for (wi, gi) in w.data_mut().iter_mut().zip(g.data()) {
                        *wi -= self.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
                    for (i, (wi, gi)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * gi;
                        v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * gi * gi;
                        *wi -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + Self::EPS);
                    }
                }
            }
        }
        store.set_values(values)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub horizon: usize,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,train_nll,val_nll,horizon,seconds";

pub fn log_csv(records: &[EpochRecord]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in records {
        s += &format!("{},{},{},{},{:.3}\n", r.epoch, r.train_nll, r.val_nll, r.horizon, r.seconds);
    }
    s
}

pub fn parse_log_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == LOG_HEADER => {}
        _ => return Err(Error::Parse { line: 1, message: format!("expected header `{LOG_HEADER}`") }),
    }
    lines
        .map(|(i, l)| {
            let bad = || Error::Parse { line: i + 1, message: format!("malformed log row `{l}`") };
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_nll: f[1].parse().map_err(|_| bad())?,
                val_nll: f[2].parse().map_err(|_| bad())?,
                horizon: f[3].parse().map_err(|_| bad())?,
                seconds: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Where training persists its best checkpoint and log, and what it
/// continues from.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Required when mirroring is enabled.
    pub skeleton: Option<&'a Skeleton>,
    pub checkpoint: Option<&'a Path>,
    pub log: Option<&'a Path>,
    /// Records of an earlier run being resumed.
    pub previous: Vec<EpochRecord>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_nll: f64,
    pub stopped_early: bool,
}

/// Minibatch training with per-epoch validation and early stopping.
///
/// On return the model holds the parameters of the best validation epoch.
/// A non-finite loss, gradient or parameter aborts with
/// [`Error::Diverged`] after restoring those parameters; the checkpoint on
/// disk is only ever written on improvement.
pub fn train(
    model: &mut Motron,
    train_set: &WindowSet,
    val_set: &WindowSet,
    cfg: &TrainConfig,
    opts: TrainOptions<'_>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return invalid(format!(
            "need training and validation windows, got {} and {}",
            train_set.len(),
            val_set.len()
        ));
    }
    if cfg.latent_grad_flow != model.config().latent_grad_flow {
        return invalid("latent_grad_flow differs between the training config and the model");
    }
    if cfg.target_horizon > model.config().max_horizon {
        return invalid(format!(
            "target horizon {} exceeds the model's maximum {}",
            cfg.target_horizon,
            model.config().max_horizon
        ));
    }
    let skeleton = match (cfg.mirror, opts.skeleton) {
        (false, _) => None,
        (true, Some(s)) if s.mirror_map().is_some() => Some(s),
        (true, _) => return invalid("mirror augmentation needs a skeleton with a symmetry map"),
    };
    let (val_states, val_truth) = val_set.stacked(cfg.target_horizon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, model.params());
    let mut records = opts.previous;
    let mut best_params = model.params().values().to_vec();
    let (mut best_epoch, mut best_val) = records
        .iter()
        .map(|r| (r.epoch, r.val_nll))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    let first_epoch = records.len();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let latent_ids: Vec<usize> = model
        .params()
        .iter()
        .enumerate()
        .filter(|(_, (_, name, _))| name.starts_with("latent."))
        .map(|(i, _)| i)
        .collect();

    for epoch in first_epoch..cfg.max_epochs {
        let clock = Instant::now();
        let horizon = horizon_schedule(epoch, cfg);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let h = if cfg.random_shrink { shrink_horizon(horizon, &mut rng) } else { horizon };
            let mut items = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &train_set.samples[i];
                let (mut st, fut) = match skeleton {
                    Some(sk) if rng.random_bool(0.5) => mirror_augment(&s.states, &s.future, sk)?,
                    _ => (s.states.clone(), s.future.clone()),
                };
                if cfg.node_dropout > 0.0 {
                    st = node_dropout(&st, &mut rng, cfg.node_dropout)?;
                }
                items.push((st, fut));
            }
            let (states, truth) = stack(items.iter().map(|(a, b)| (a, b)), h)?;
            let tape = Tape::new();
            let p = model.params().attach(&tape);
            let diverged = |message: String| {
                Error::Diverged { epoch, message }
            };
            let loss = match batch_loss(model, &p, &tape, &states, &truth, cfg.objective_at(epoch)) {
                Ok(l) => l,
                Err(Error::Numerical(m)) => {
                    model.params_mut().set_values(best_params)?;
                    return Err(diverged(m));
                }
                Err(e) => return Err(e),
            };
            let value = loss.item();
            let mut grads = tape.backward(loss)?;
            let mut g = p.collect_grads(&mut grads, model.params());
            if epoch < cfg.latent_warmup {
                for &i in &latent_ids {
                    g[i] = Tensor::zeros(g[i].shape());
                }
            }
            if !value.is_finite() || g.iter().any(|t| !t.is_finite()) {
                model.params_mut().set_values(best_params)?;
                return Err(diverged(format!("non-finite loss or gradient (loss {value})")));
            }
            opt.step(model.params_mut(), &g)?;
            if model.params().values().iter().any(|t| !t.is_finite()) {
                model.params_mut().set_values(best_params)?;
                return Err(diverged("non-finite parameters after update".into()));
            }
            loss_sum += value * batch.len() as f64;
        }
        let train_nll = loss_sum / train_set.len() as f64;
        let val_nll = match dataset_loss(model, &val_states, &val_truth, Objective::Marginal, 64) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(Error::Numerical(_)) => {
                model.params_mut().set_values(best_params)?;
                return Err(Error::Diverged { epoch, message: "non-finite validation loss".into() });
            }
            Err(e) => return Err(e),
        };
        records.push(EpochRecord { epoch, train_nll, val_nll, horizon, seconds: clock.elapsed().as_secs_f64() });
        log::info!("epoch {epoch}: train {train_nll:.4} val {val_nll:.4} horizon {horizon}");
        if val_nll < best_val {
            best_val = val_nll;
            best_epoch = epoch;
            best_params = model.params().values().to_vec();
            if let Some(path) = opts.checkpoint {
                model.save(path)?;
            }
        }
        if let Some(path) = opts.log {
            std::fs::write(path, log_csv(&records))?;
        }
        if cfg.patience > 0 && epoch >= cfg.warmup_end() && epoch - best_epoch.max(cfg.warmup_end()) >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    model.params_mut().set_values(best_params)?;
    Ok(TrainReport { records, best_epoch, best_val_nll: best_val, stopped_early })
}
