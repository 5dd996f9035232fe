//! Flat `key = value` run configuration. Every key has a default, unknown
//! keys are rejected, and rendering always lists every key in a fixed order
//! so that parse, render, parse is idempotent.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::ensemble::{Strategy, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::error::{Error, Result};
use crate::fga::GaConfig;
use crate::losses::{class_weights, LossKind, LossPolicy};
use crate::model::{MiniCnnOptions, NetworkSpec};
use crate::par::Execution;
use crate::trainer::{AdamConfig, TrainConfig};

/// Loss policy as written in the config: either explicit entries or chosen
/// from the training class counts.
#[derive(Clone, Debug, PartialEq)]
pub enum PolicyChoice {
    /// Skewed default when `max count / min count >= loss.auto_skew_ratio`,
    /// balanced default otherwise.
    Auto,
    Entries(Vec<(LossKind, f64)>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub policy: PolicyChoice,
    pub auto_skew_ratio: f64,
    pub model: MiniCnnOptions,
    pub fga: GaConfig,
    pub alpha: f64,
    pub beta: f64,
    /// Worker threads; 0 lets the thread pool decide.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            policy: PolicyChoice::Auto,
            auto_skew_ratio: 2.0,
            model: MiniCnnOptions::default(),
            fga: GaConfig::default(),
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            threads: 0,
        }
    }
}

/// Every recognized key, in render order.
pub const KEYS: &[&str] = &[
    "train.batch_size",
    "train.max_epochs",
    "train.lr1",
    "train.cosine_period",
    "train.cosine_min_lr",
    "train.lr2",
    "train.step_gamma",
    "train.step_interval",
    "train.plateau_window",
    "train.plateau_loss_tol",
    "train.plateau_acc_tol",
    "train.flip_prob",
    "train.stop_on_plateau",
    "train.adam_beta1",
    "train.adam_beta2",
    "train.adam_eps",
    "train.seed",
    "loss.policy",
    "loss.epsilon",
    "loss.auto_skew_ratio",
    "model.conv_channels",
    "model.kernel",
    "model.hidden",
    "model.fa_regions",
    "fga.fusions",
    "fga.parents",
    "fga.fresh",
    "fga.tau",
    "fga.child_max_epochs",
    "fga.seed",
    "ensemble.alpha",
    "ensemble.beta",
    "run.parallel",
    "run.threads",
];

fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value `{value}` for {key}")))
}

fn render_regions(regions: &[([f64; 4], f64)]) -> String {
    if regions.is_empty() {
        return "none".into();
    }
    regions
        .iter()
        .map(|([t, l, h, w], lambda)| format!("{t},{l},{h},{w},{lambda}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_regions(key: &str, value: &str) -> Result<Vec<([f64; 4], f64)>> {
    if value == "none" {
        return Ok(Vec::new());
    }
    value
        .split(';')
        .map(|r| {
            let v: Vec<f64> = r.split(',').map(|x| num(key, x.trim())).collect::<Result<_>>()?;
            match v.as_slice() {
                &[t, l, h, w, lambda] => Ok(([t, l, h, w], lambda)),
                _ => Err(Error::config(format!("{key}: region `{r}` needs top,left,height,width,lambda"))),
            }
        })
        .collect()
}

impl RunConfig {
    /// Parses config text on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("line {}: duplicate key {key}", n + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| match e {
                    Error::Config(m) => Error::config(format!("line {}: {m}", n + 1)),
                    other => other,
                })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key; unknown keys are a configuration error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "train.batch_size" => t.batch_size = num(key, value)?,
            "train.max_epochs" => t.max_epochs = num(key, value)?,
            "train.lr1" => t.lr1 = num(key, value)?,
            "train.cosine_period" => t.cosine_period = num(key, value)?,
            "train.cosine_min_lr" => t.cosine_min_lr = num(key, value)?,
            "train.lr2" => t.lr2 = num(key, value)?,
            "train.step_gamma" => t.step_gamma = num(key, value)?,
            "train.step_interval" => t.step_interval = num(key, value)?,
            "train.plateau_window" => t.plateau_window = num(key, value)?,
            "train.plateau_loss_tol" => t.plateau_loss_tol = num(key, value)?,
            "train.plateau_acc_tol" => t.plateau_acc_tol = num(key, value)?,
            "train.flip_prob" => t.flip_prob = num(key, value)?,
            "train.stop_on_plateau" => t.stop_on_plateau = num(key, value)?,
            "train.adam_beta1" => t.adam.beta1 = num(key, value)?,
            "train.adam_beta2" => t.adam.beta2 = num(key, value)?,
            "train.adam_eps" => t.adam.eps = num(key, value)?,
            "train.seed" => t.seed = num(key, value)?,
            "loss.policy" => {
                self.policy = if value == "auto" {
                    PolicyChoice::Auto
                } else {
                    PolicyChoice::Entries(LossPolicy::parse_entries(value)?)
                }
            }
            "loss.epsilon" => t.policy.epsilon = num(key, value)?,
            "loss.auto_skew_ratio" => self.auto_skew_ratio = num(key, value)?,
            "model.conv_channels" => {
                let v: Vec<usize> = value.split(',').map(|x| num(key, x.trim())).collect::<Result<_>>()?;
                self.model.conv_channels = v
                    .try_into()
                    .map_err(|_| Error::config("model.conv_channels needs three values"))?;
            }
            "model.kernel" => self.model.kernel = num(key, value)?,
            "model.hidden" => self.model.hidden = num(key, value)?,
            "model.fa_regions" => self.model.fa_regions = parse_regions(key, value)?,
            "fga.fusions" => self.fga.fusions = num(key, value)?,
            "fga.parents" => self.fga.parents = num(key, value)?,
            "fga.fresh" => self.fga.fresh = num(key, value)?,
            "fga.tau" => self.fga.tau = num(key, value)?,
            "fga.child_max_epochs" => self.fga.child_max_epochs = num(key, value)?,
            "fga.seed" => self.fga.seed = num(key, value)?,
            "ensemble.alpha" => self.alpha = num(key, value)?,
            "ensemble.beta" => self.beta = num(key, value)?,
            "run.parallel" => {
                t.execution = if num::<bool>(key, value)? {
                    Execution::Parallel
                } else {
                    Execution::Sequential
                }
            }
            "run.threads" => self.threads = num(key, value)?,
            other => return Err(Error::config(format!("unknown key {other}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "train.batch_size" => t.batch_size.to_string(),
            "train.max_epochs" => t.max_epochs.to_string(),
            "train.lr1" => t.lr1.to_string(),
            "train.cosine_period" => t.cosine_period.to_string(),
            "train.cosine_min_lr" => t.cosine_min_lr.to_string(),
            "train.lr2" => t.lr2.to_string(),
            "train.step_gamma" => t.step_gamma.to_string(),
            "train.step_interval" => t.step_interval.to_string(),
            "train.plateau_window" => t.plateau_window.to_string(),
            "train.plateau_loss_tol" => t.plateau_loss_tol.to_string(),
            "train.plateau_acc_tol" => t.plateau_acc_tol.to_string(),
            "train.flip_prob" => t.flip_prob.to_string(),
            "train.stop_on_plateau" => t.stop_on_plateau.to_string(),
            "train.adam_beta1" => t.adam.beta1.to_string(),
            "train.adam_beta2" => t.adam.beta2.to_string(),
            "train.adam_eps" => t.adam.eps.to_string(),
            "train.seed" => t.seed.to_string(),
            "loss.policy" => match &self.policy {
                PolicyChoice::Auto => "auto".into(),
                PolicyChoice::Entries(e) => LossPolicy {
                    entries: e.clone(),
                    epsilon: 0.0,
                    class_weights: None,
                }
                .render_entries(),
            },
            "loss.epsilon" => t.policy.epsilon.to_string(),
            "loss.auto_skew_ratio" => self.auto_skew_ratio.to_string(),
            "model.conv_channels" => {
                let [a, b, c] = self.model.conv_channels;
                format!("{a},{b},{c}")
            }
            "model.kernel" => self.model.kernel.to_string(),
            "model.hidden" => self.model.hidden.to_string(),
            "model.fa_regions" => render_regions(&self.model.fa_regions),
            "fga.fusions" => self.fga.fusions.to_string(),
            "fga.parents" => self.fga.parents.to_string(),
            "fga.fresh" => self.fga.fresh.to_string(),
            "fga.tau" => self.fga.tau.to_string(),
            "fga.child_max_epochs" => self.fga.child_max_epochs.to_string(),
            "fga.seed" => self.fga.seed.to_string(),
            "ensemble.alpha" => self.alpha.to_string(),
            "ensemble.beta" => self.beta.to_string(),
            "run.parallel" => (t.execution == Execution::Parallel).to_string(),
            "run.threads" => self.threads.to_string(),
            _ => return None,
        })
    }

    /// Every key with its resolved value, one `key = value` line each.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("listed key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let mut t = self.train.clone();
        if let PolicyChoice::Entries(e) = &self.policy {
            t.policy.entries = e.clone();
        }
        t.validate()?;
        if !(self.auto_skew_ratio >= 1.0) {
            return Err(Error::config("loss.auto_skew_ratio must be at least 1"));
        }
        if !(self.fga.tau > 0.0) {
            return Err(Error::config("fga.tau must be positive"));
        }
        if self.fga.fusions > 0 && self.fga.parents == 0 {
            return Err(Error::config("fga.parents must be positive"));
        }
        if !(self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::config("ensemble weights must be finite"));
        }
        Ok(())
    }

    /// Resolves the loss policy against the training class counts. WCE
    /// weights are inverse class frequencies.
    pub fn loss_policy(&self, counts: &[usize]) -> Result<LossPolicy> {
        let entries = match &self.policy {
            PolicyChoice::Entries(e) => e.clone(),
            PolicyChoice::Auto => {
                let max = counts.iter().copied().max().unwrap_or(0);
                let min = counts.iter().copied().min().unwrap_or(0);
                if min == 0 || max as f64 / min as f64 >= self.auto_skew_ratio {
                    LossPolicy::skewed_default().entries
                } else {
                    LossPolicy::balanced_default().entries
                }
            }
        };
        let mut policy = LossPolicy::new(entries, self.train.policy.epsilon)?;
        if policy.entries.iter().any(|&(k, p)| k == LossKind::Wce && p > 0.0) {
            policy = policy.with_class_weights(class_weights(counts)?);
        }
        Ok(policy)
    }

    /// Training configuration for a given training set.
    pub fn train_config(&self, counts: &[usize]) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            policy: self.loss_policy(counts)?,
            ..self.train.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn network_spec(&self, input: [usize; 3], classes: usize) -> Result<NetworkSpec> {
        NetworkSpec::mini_cnn(input, classes, &self.model)
    }

    pub fn t2v(&self) -> Strategy {
        Strategy::T2v {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        self.train.adam
    }
}

/// Documented default for each key, rendered like [`RunConfig::render`].
pub fn default_config_text() -> String {
    RunConfig::default().render()
}
