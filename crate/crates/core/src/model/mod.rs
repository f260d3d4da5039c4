//! The forecasting network.
//!
//! A typed-graph GRU encodes the observed state history into a per-node
//! hidden state `h`. A typed-graph linear head maps `h` to per-node latent
//! logits; their node average, passed through a softmax, gives `p(z | x)`.
//! For every latent mode a typed-graph GRU decoder emits, per step and node,
//! a concentrated Gaussian over the differential quaternion. Integrating the
//! differentials from the last observed pose yields the forecast.

mod checkpoint;
mod forecast;

use rand::Rng;

pub use forecast::{ForecastResult, ModeGrid, Motion};

use crate::diffcore::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::error::{invalid, Result};
use crate::rotmath::UnitQuaternion;
use crate::so3stats::ConcentratedGaussianSO3;
use crate::tglayers::{ClassMap, TgGru, TgLinear};

/// Per-node state width: absolute quaternion followed by the differential.
pub const STATE_DIM: usize = 8;

/// Lower bound added to the Cholesky diagonal.
pub const COV_FLOOR: f64 = 1e-6;

/// Initial per-axis standard deviation of the emitted differentials.
const INIT_SIGMA: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub classes: ClassMap,
    pub hidden: usize,
    pub modes: usize,
    pub max_horizon: usize,
    /// When false the latent head sees a detached copy of `h`, so the
    /// encoder is trained by the decoder path only.
    pub latent_grad_flow: bool,
}

impl ModelConfig {
    pub fn new(classes: ClassMap, hidden: usize, modes: usize, max_horizon: usize) -> Result<Self> {
        let c = Self { classes, hidden, modes, max_horizon, latent_grad_flow: false };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return invalid("hidden width must be positive");
        }
        if self.modes == 0 {
            return invalid("at least one latent mode is required");
        }
        if self.max_horizon == 0 {
            return invalid("max horizon must be positive");
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.classes.num_nodes()
    }
}

/// Differentiable outputs of one forward pass over a batch of `B` queries.
pub struct ForwardVars<'t> {
    /// `[B, Z]` log mode weights.
    pub log_pi: Var<'t>,
    /// Per step, `[B·Z, N, 4]` unit mean differentials (row `b·Z + z`).
    pub means: Vec<Var<'t>>,
    /// Per step, `[B·Z, N, 3, 3]` covariances of the differentials.
    pub covs: Vec<Var<'t>>,
}

#[derive(Clone, Debug)]
pub struct Motron {
    config: ModelConfig,
    params: ParamStore,
    encoder: TgGru,
    enc_out: TgLinear,
    latent: TgLinear,
    decoder: TgGru,
    head: TgLinear,
}

fn softplus_inv(y: f64) -> f64 {
    y.exp_m1().ln()
}

impl Motron {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let cl = &config.classes;
        let (dh, z) = (config.hidden, config.modes);
        let encoder = TgGru::new(&mut params, "encoder", cl, STATE_DIM, dh, rng);
        let enc_out = TgLinear::new(&mut params, "enc_out", cl, dh, dh, rng);
        let latent = TgLinear::new(&mut params, "latent", cl, dh, z, rng);
        let decoder = TgGru::new(&mut params, "decoder", cl, z + dh + 4, dh, rng);
        let head = TgLinear::new(&mut params, "head", cl, dh, 10, rng);
        let b = params.get_mut(head.b);
        let c = b.shape()[0];
        for k in 0..c {
            b.data_mut()[k * 10] = 1.0;
            for d in 4..7 {
                b.data_mut()[k * 10 + d] = softplus_inv(INIT_SIGMA);
            }
        }
        Ok(Self { config, params, encoder, enc_out, latent, decoder, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn latent_head(&self) -> &TgLinear {
        &self.latent
    }

    /// Trainable scalar count for a configuration, shared weights counted once.
    pub fn param_count(config: &ModelConfig) -> usize {
        let c = config.classes.num_classes();
        let n = config.num_nodes();
        let (dh, z) = (config.hidden, config.modes);
        TgGru::param_count(c, n, STATE_DIM, dh)
            + TgLinear::param_count(c, n, dh, dh)
            + TgLinear::param_count(c, n, dh, z)
            + TgGru::param_count(c, n, z + dh + 4, dh)
            + TgLinear::param_count(c, n, dh, 10)
    }

    /// Named influence matrices (`G` of every layer, `G_ta` of every GRU).
    pub fn influence_matrices(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .filter(|(_, name, _)| name.ends_with(".g") || name.ends_with(".g0") || name.ends_with(".gta"))
            .map(|(_, name, t)| (name.to_string(), t.clone()))
            .collect()
    }

    fn check_states(&self, shape: &[usize]) -> Result<()> {
        let n = self.config.num_nodes();
        if shape.len() != 4 || shape[1] == 0 || shape[2] != n || shape[3] != STATE_DIM {
            return invalid(format!("states must be [B, H+1, {n}, {STATE_DIM}], got {shape:?}"));
        }
        Ok(())
    }

    /// Hidden state `[B, N, Dh]` from states `[B, H+1, N, 8]`.
    pub fn encode<'t>(&self, p: &BoundParams<'t>, states: Var<'t>) -> Result<Var<'t>> {
        let s = states.shape();
        self.check_states(&s)?;
        let (b, k, n) = (s[0], s[1], s[2]);
        let frames: Vec<Var<'t>> = (0..k)
            .map(|i| states.slice(1, i, 1).and_then(|f| f.reshape(&[b, n, STATE_DIM])))
            .collect::<Result<_>>()?;
        let h0 = states.tape().constant(Tensor::zeros(&[b, n, self.config.hidden]));
        let (_, last) = self.encoder.sequence(p, &frames, h0, 0)?;
        self.enc_out.forward(p, last)
    }

    /// `[B, Z]` log mode weights from `h`.
    pub fn latent_log_probs<'t>(&self, p: &BoundParams<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let input = if self.config.latent_grad_flow { h } else { h.detach() };
        let logits = self.latent.forward(p, input)?;
        Ok(logits.mean_axis(1)?.log_softmax())
    }

    /// Decodes every mode for `horizon` steps.
    pub fn decode<'t>(&self, p: &BoundParams<'t>, h: Var<'t>, horizon: usize) -> Result<(Vec<Var<'t>>, Vec<Var<'t>>)> {
        if horizon == 0 {
            return invalid("horizon must be at least 1");
        }
        let s = h.shape();
        let (b, n) = (s[0], s[1]);
        let z = self.config.modes;
        let rows = b * z;
        let tape = h.tape();
        let rep: Vec<usize> = (0..rows).map(|r| r / z).collect();
        let h_rep = h.index_select0(&rep)?;
        let onehot = tape.constant(Tensor::from_fn(&[rows, n, z], |i| {
            let (r, k) = (i / (n * z), i % z);
            if r % z == k {
                1.0
            } else {
                0.0
            }
        }));
        let mut prev = tape.constant(Tensor::from_fn(&[rows, n, 4], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let mut hidden = h_rep;
        let mut means = Vec::with_capacity(horizon);
        let mut covs = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let input = Var::concat(&[onehot, h_rep, prev], 2)?;
            hidden = self.decoder.step(p, input, hidden, t)?;
            let out = self.head.forward(p, hidden)?;
            let mean = out.slice(2, 0, 4)?.normalize_last();
            let diag = out.slice(2, 4, 3)?.softplus().add_scalar(COV_FLOOR);
            let l = Var::concat(&[diag, out.slice(2, 7, 3)?], 2)?.lower_tri3()?;
            let cov = l.batched_matmul(l.transpose_last2()?)?;
            means.push(mean);
            covs.push(cov);
            prev = mean;
        }
        Ok((means, covs))
    }

    pub fn forward<'t>(&self, p: &BoundParams<'t>, states: Var<'t>, horizon: usize) -> Result<ForwardVars<'t>> {
        let h = self.encode(p, states)?;
        let log_pi = self.latent_log_probs(p, h)?;
        let (means, covs) = self.decode(p, h, horizon)?;
        Ok(ForwardVars { log_pi, means, covs })
    }

    /// Forecasts for a batch of state histories `[B, H+1, N, 8]`.
    pub fn predict_batch(&self, states: &Tensor, horizon: usize) -> Result<Vec<ForecastResult>> {
        self.check_states(states.shape())?;
        let tape = Tape::new();
        let p = self.params.attach_frozen(&tape);
        let fv = self.forward(&p, tape.constant(states.clone()), horizon)?;
        let s = states.shape();
        let (b, k, n) = (s[0], s[1], s[2]);
        let z = self.config.modes;
        let log_pi = fv.log_pi.value();
        let means: Vec<_> = fv.means.iter().map(|m| m.value()).collect();
        let covs: Vec<_> = fv.covs.iter().map(|c| c.value()).collect();
        let mut out = Vec::with_capacity(b);
        for bi in 0..b {
            let origin = (0..n)
                .map(|j| {
                    let o = ((bi * k + k - 1) * n + j) * STATE_DIM;
                    let d = &states.data()[o..o + 4];
                    UnitQuaternion::new(d[0], d[1], d[2], d[3])
                })
                .collect::<Result<Vec<_>>>()?;
            let mut w: Vec<f64> = (0..z).map(|zi| log_pi.at(&[bi, zi]).exp()).collect();
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= total);
            let mut grid = Vec::with_capacity(z);
            for zi in 0..z {
                let row = bi * z + zi;
                let steps = (0..horizon)
                    .map(|t| {
                        (0..n)
                            .map(|j| {
                                let mo = (row * n + j) * 4;
                                let md = &means[t].data()[mo..mo + 4];
                                let q = UnitQuaternion::new(md[0], md[1], md[2], md[3])?;
                                let co = (row * n + j) * 9;
                                let cov = nalgebra::Matrix3::from_row_slice(&covs[t].data()[co..co + 9]);
                                Ok(ConcentratedGaussianSO3::from_parts(q, cov))
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                grid.push(steps);
            }
            out.push(ForecastResult::new(w, origin, grid)?);
        }
        Ok(out)
    }

    /// Forecast for one history `[H+1, N, 8]`.
    pub fn predict_distribution(&self, states: &Tensor, horizon: usize) -> Result<ForecastResult> {
        let mut shape = vec![1];
        shape.extend_from_slice(states.shape());
        let mut r = self.predict_batch(&states.reshaped(shape)?, horizon)?;
        Ok(r.remove(0))
    }

    pub fn sample_motions<R: Rng + ?Sized>(
        &self,
        states: &Tensor,
        horizon: usize,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<Motion>> {
        self.predict_distribution(states, horizon)?.sample_motions(count, rng)
    }

    pub fn ml_mode_motion(&self, states: &Tensor, horizon: usize) -> Result<Motion> {
        Ok(self.predict_distribution(states, horizon)?.ml_mode_motion())
    }

    pub fn w_mean_motion(&self, states: &Tensor, horizon: usize) -> Result<Motion> {
        self.predict_distribution(states, horizon)?.w_mean_motion()
    }
}
