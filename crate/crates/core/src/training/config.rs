use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Training objective over the latent modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// `−ln Σ_z π_z p(y | x, z)`: the marginal likelihood of the mixture.
    Marginal,
    /// `−Σ_z π_z ln p(y | x, z)`: expected log-likelihood under `π`.
    Expected,
}

macro_rules! named_enum {
    ($ty:ident { $($v:ident => $s:literal),+ }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$v => $s),+ })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($ty::$v),)+
                    _ => Err(Error::InvalidArgument(format!(
                        "unknown {} `{s}`", stringify!($ty).to_lowercase()
                    ))),
                }
            }
        }
    };
}

named_enum!(OptimizerKind { Adam => "adam", Sgd => "sgd" });
named_enum!(Objective { Marginal => "marginal", Expected => "expected" });

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub objective: Objective,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub start_horizon: usize,
    /// Curriculum growth per epoch.
    pub horizon_step: usize,
    pub target_horizon: usize,
    /// Draw each iteration's horizon uniformly from `1..=curriculum`.
    pub random_shrink: bool,
    pub node_dropout: f64,
    pub mirror: bool,
    pub latent_grad_flow: bool,
    /// Leading epochs trained with the expected objective (mode weights
    /// detached) before switching to `objective`.
    pub expected_warmup: usize,
    /// Leading epochs during which the mode weights are held fixed.
    pub latent_warmup: usize,
    pub seed: u64,
    /// Observed frames before the current one (`H`).
    pub history: usize,
    pub hidden: usize,
    pub modes: usize,
    /// Frame stride between training windows cut from one sequence.
    pub window_stride: usize,
    pub val_fraction: f64,
    /// Checkpoint to continue from; its log is continued too.
    pub resume: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            objective: Objective::Marginal,
            max_epochs: 100,
            patience: 10,
            start_horizon: 5,
            horizon_step: 2,
            target_horizon: 25,
            random_shrink: true,
            node_dropout: 0.1,
            mirror: false,
            latent_grad_flow: false,
            expected_warmup: 0,
            latent_warmup: 0,
            seed: 0,
            history: 9,
            hidden: 32,
            modes: 2,
            window_stride: 10,
            val_fraction: 0.1,
            resume: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.start_horizon == 0 || self.start_horizon > self.target_horizon {
            return bad(format!(
                "need 1 <= start_horizon ({}) <= target_horizon ({})",
                self.start_horizon, self.target_horizon
            ));
        }
        if !(0.0..=1.0).contains(&self.node_dropout) {
            return bad(format!("node_dropout must lie in [0, 1], got {}", self.node_dropout));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        if self.hidden == 0 || self.modes == 0 || self.window_stride == 0 {
            return bad("hidden, modes and window_stride must be at least 1".into());
        }
        Ok(())
    }

    /// Objective in force during `epoch`.
    pub fn objective_at(&self, epoch: usize) -> Objective {
        if epoch < self.expected_warmup {
            Objective::Expected
        } else {
            self.objective
        }
    }

    /// First epoch that counts towards early stopping.
    pub fn warmup_end(&self) -> usize {
        self.expected_warmup.max(self.latent_warmup)
    }

    /// Epochs until the curriculum reaches the target horizon.
    pub fn ramp_epochs(&self) -> usize {
        if self.horizon_step == 0 {
            return 0;
        }
        (self.target_horizon - self.start_horizon).div_ceil(self.horizon_step)
    }

    /// Parses `key = value` lines; `#` starts a comment, unknown keys fail.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Parse { line: line_no, message: format!("expected `key = value`, found `{line}`") })?;
            cfg.set(key, value).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::InvalidArgument(format!("bad value `{v}` for {key}")))
        }
        match key {
            "batch_size" => self.batch_size = num(key, v)?,
            "learning_rate" => self.learning_rate = num(key, v)?,
            "optimizer" => self.optimizer = v.parse()?,
            "objective" => self.objective = v.parse()?,
            "max_epochs" => self.max_epochs = num(key, v)?,
            "patience" => self.patience = num(key, v)?,
            "start_horizon" => self.start_horizon = num(key, v)?,
            "horizon_step" => self.horizon_step = num(key, v)?,
            "target_horizon" => self.target_horizon = num(key, v)?,
            "random_shrink" => self.random_shrink = num(key, v)?,
            "node_dropout" => self.node_dropout = num(key, v)?,
            "mirror" => self.mirror = num(key, v)?,
            "latent_grad_flow" => self.latent_grad_flow = num(key, v)?,
            "expected_warmup" => self.expected_warmup = num(key, v)?,
            "latent_warmup" => self.latent_warmup = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "history" => self.history = num(key, v)?,
            "hidden" => self.hidden = num(key, v)?,
            "modes" => self.modes = num(key, v)?,
            "window_stride" => self.window_stride = num(key, v)?,
            "val_fraction" => self.val_fraction = num(key, v)?,
            "resume" => self.resume = (!v.is_empty()).then(|| v.to_string()),
            _ => return Err(Error::InvalidArgument(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "batch_size = {}\nlearning_rate = {}\noptimizer = {}\nobjective = {}\nmax_epochs = {}\n\
             patience = {}\nstart_horizon = {}\nhorizon_step = {}\ntarget_horizon = {}\n\
             random_shrink = {}\nnode_dropout = {}\nmirror = {}\nlatent_grad_flow = {}\nexpected_warmup = {}\nlatent_warmup = {}\nseed = {}\n\
             history = {}\nhidden = {}\nmodes = {}\nwindow_stride = {}\nval_fraction = {}\n",
            self.batch_size,
            self.learning_rate,
            self.optimizer,
            self.objective,
            self.max_epochs,
            self.patience,
            self.start_horizon,
            self.horizon_step,
            self.target_horizon,
            self.random_shrink,
            self.node_dropout,
            self.mirror,
            self.latent_grad_flow,
            self.expected_warmup,
            self.latent_warmup,
            self.seed,
            self.history,
            self.hidden,
            self.modes,
            self.window_stride,
            self.val_fraction,
        );
        if let Some(r) = &self.resume {
            s += &format!("resume = {r}\n");
        }
        s
    }
}
