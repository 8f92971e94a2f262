//! Training hyper-parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Downstream loss plus adversarial CAV penalties at every probe.
    Dcr,
    Erm,
    /// Alternating linear adversary on annotated training data.
    Adversarial,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Dcr => "dcr",
            Method::Erm => "erm",
            Method::Adversarial => "adversarial",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum OptimizerKind {
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
    Sgd {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: default_beta1(), beta2: default_beta2(), eps: default_adam_eps() }
    }
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_momentum() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// Scale of the adversarial term.
    pub gamma: f64,
    /// Step-1 CAV refinements per update; the curvature buffer holds `cav_steps * batch_size` rows.
    pub cav_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cav_lr: f64,
    pub epochs: usize,
    pub recon_scale: f64,
    /// Per-probe ridge strengths; empty keeps the lambdas of the model's probe points.
    pub probe_lambdas: Vec<f64>,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Warn when `lambda M / |H|_F^2` of a probe buffer drops below this.
    pub stability_floor: f64,
    /// Keep `epoch-NNNN.ckpt` every this many epochs (0: only `last.ckpt`).
    pub checkpoint_every: usize,
    pub eval_batch_size: usize,
    /// Adversary learning rate and inner steps per update, alternating baseline only.
    pub adv_lr: f64,
    pub adv_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Dcr,
            gamma: 1.0,
            cav_steps: 5,
            batch_size: 64,
            lr: 1e-3,
            cav_lr: 1e-3,
            epochs: 30,
            recon_scale: 10.0,
            probe_lambdas: Vec::new(),
            seed: 0,
            optimizer: OptimizerKind::default(),
            stability_floor: 1e-6,
            checkpoint_every: 0,
            eval_batch_size: 256,
            adv_lr: 1e-2,
            adv_steps: 1,
        }
    }
}

fn positive(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Config(format!("{name} must be positive, got {x}")))
    }
}

fn nonnegative(name: &str, x: f64) -> Result<()> {
    if x >= 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Config(format!("{name} must be nonnegative, got {x}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        nonnegative("gamma", self.gamma)?;
        nonnegative("recon_scale", self.recon_scale)?;
        nonnegative("stability_floor", self.stability_floor)?;
        positive("lr", self.lr)?;
        positive("cav_lr", self.cav_lr)?;
        positive("adv_lr", self.adv_lr)?;
        for (name, n) in [
            ("cav_steps", self.cav_steps),
            ("epochs", self.epochs),
            ("eval_batch_size", self.eval_batch_size),
            ("adv_steps", self.adv_steps),
        ] {
            if n == 0 {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        // batch norm needs two rows, a balanced concept batch needs one of each class
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        for (i, &l) in self.probe_lambdas.iter().enumerate() {
            positive(&format!("probe_lambdas[{i}]"), l)?;
        }
        match self.optimizer {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(TrainError::Config("Adam betas must lie in [0, 1)".into()));
                }
                positive("eps", eps)?;
            }
            OptimizerKind::Sgd { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(TrainError::Config("momentum must lie in [0, 1)".into()));
                }
            }
        }
        Ok(())
    }

    /// Rows in each probe's curvature buffer.
    pub fn buffer_rows(&self) -> usize {
        self.cav_steps * self.batch_size
    }

    /// Label recorded in reports: a DCR run with `gamma = 0` is plain ERM.
    pub fn effective_method(&self) -> Method {
        match self.method {
            Method::Dcr | Method::Adversarial if self.gamma == 0.0 => Method::Erm,
            m => m,
        }
    }
}
