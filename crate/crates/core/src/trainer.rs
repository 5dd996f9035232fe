//! Per-network training: Adam, flip augmentation, per-batch loss selection,
//! and the two-phase learning-rate regime switched by a plateau trigger.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{flip_horizontal, DatasetBundle};
use crate::error::{Error, Result};
use crate::losses::{pick_loss, LossKind, LossPolicy};
use crate::metrics::ClassificationReport;
use crate::model::{Gradients, NetworkState};
use crate::par::Execution;
use crate::tensor::{Real, Tensor};

const DATA_STREAM: u64 = 1;
const LOSS_STREAM: u64 = 2;

/// `lr_min + (lr_max - lr_min)(1 + cos(pi t / T)) / 2`. `t` past the period is
/// held at `T`.
pub fn cosine_lr(epoch: usize, period: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if period == 0 {
        return Err(Error::config("cosine period must be positive"));
    }
    let t = epoch.min(period) as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t / period as f64).cos()))
}

/// `base * gamma^floor(epoch / interval)`.
pub fn step_lr(epoch: usize, base: f64, gamma: f64, interval: usize) -> Result<f64> {
    if interval == 0 {
        return Err(Error::config("step interval must be positive"));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::config(format!("step factor {gamma} outside (0, 1]")));
    }
    Ok(base * gamma.powi((epoch / interval) as i32))
}

/// True iff over the last `window` epochs both the loss range and the
/// accuracy range are below their tolerances. Shorter histories are not
/// ready and return false.
pub fn plateau_reached(losses: &[f64], accuracies: &[f64], window: usize, loss_tol: f64, acc_tol: f64) -> bool {
    if window == 0 || losses.len() < window || accuracies.len() < window {
        return false;
    }
    let range = |xs: &[f64]| {
        let (lo, hi) = xs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        hi - lo
    };
    range(&losses[losses.len() - window..]) < loss_tol && range(&accuracies[accuracies.len() - window..]) < acc_tol
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    cfg: AdamConfig,
    step: i32,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor<T>>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        self.step += 1;
        let b1 = T::from_f64_lossy(self.cfg.beta1);
        let b2 = T::from_f64_lossy(self.cfg.beta2);
        let c1 = T::from_f64_lossy(1.0 - self.cfg.beta1.powi(self.step));
        let c2 = T::from_f64_lossy(1.0 - self.cfg.beta2.powi(self.step));
        let eps = T::from_f64_lossy(self.cfg.eps);
        let lr = T::from_f64_lossy(lr);
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::config(format!("no gradient for `{name}`")))?;
            g.expect_shape(p.shape(), name)?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); p.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); p.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// How a training run ended.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TrainStatus {
    /// Never trained.
    #[default]
    Untrained,
    /// Stopped because the plateau trigger fired again after the LR switch.
    Plateau,
    /// Ran the full epoch budget.
    EpochCap,
}

impl TrainStatus {
    pub fn name(self) -> &'static str {
        match self {
            TrainStatus::Untrained => "untrained",
            TrainStatus::Plateau => "plateau",
            TrainStatus::EpochCap => "epoch_cap",
        }
    }

    pub fn is_trained(self) -> bool {
        self != TrainStatus::Untrained
    }
}

impl fmt::Display for TrainStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "untrained" => Ok(TrainStatus::Untrained),
            "plateau" => Ok(TrainStatus::Plateau),
            "epoch_cap" => Ok(TrainStatus::EpochCap),
            other => Err(Error::config(format!("unknown training status `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub adam: AdamConfig,
    pub lr1: f64,
    /// Cosine period in epochs; 0 means `max_epochs`.
    pub cosine_period: usize,
    pub cosine_min_lr: f64,
    pub lr2: f64,
    pub step_gamma: f64,
    pub step_interval: usize,
    pub plateau_window: usize,
    pub plateau_loss_tol: f64,
    pub plateau_acc_tol: f64,
    pub flip_prob: f64,
    /// Stop once the plateau trigger fires a second time, after the LR switch.
    pub stop_on_plateau: bool,
    pub policy: LossPolicy,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            max_epochs: 30,
            adam: AdamConfig::default(),
            lr1: 3e-4,
            cosine_period: 0,
            cosine_min_lr: 0.0,
            lr2: 1e-5,
            step_gamma: 0.9,
            step_interval: 5,
            plateau_window: 5,
            plateau_loss_tol: 0.01,
            plateau_acc_tol: 0.005,
            flip_prob: 0.5,
            stop_on_plateau: true,
            policy: LossPolicy::balanced_default(),
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.lr1 > self.lr2 && self.lr2 > 0.0) {
            return Err(Error::config(format!(
                "learning rates must satisfy lr1 > lr2 > 0 (got {} and {})",
                self.lr1, self.lr2
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("flip probability outside [0, 1]"));
        }
        if self.plateau_window < 2 {
            return Err(Error::config("plateau window must be at least 2 epochs"));
        }
        if self.step_interval == 0 {
            return Err(Error::config("step interval must be positive"));
        }
        if !(self.step_gamma > 0.0 && self.step_gamma <= 1.0) {
            return Err(Error::config("step factor outside (0, 1]"));
        }
        self.policy.validate()
    }

    fn period(&self) -> usize {
        if self.cosine_period == 0 {
            self.max_epochs.max(1)
        } else {
            self.cosine_period
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub loss_tally: BTreeMap<LossKind, usize>,
    pub batches: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// First epoch trained with the step schedule, if the switch happened.
    pub switch_epoch: Option<usize>,
    pub status: TrainStatus,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.accuracy).collect()
    }

    /// Mean training loss over the last `window` epochs.
    pub fn fitness(&self, window: usize) -> Option<f64> {
        let n = self.epochs.len().min(window);
        if n == 0 {
            return None;
        }
        Some(self.epochs[self.epochs.len() - n..].iter().map(|e| e.loss).sum::<f64>() / n as f64)
    }
}

/// Samples per work unit. Each unit sums its samples in order and units are
/// then summed in order, so the result does not depend on thread count. The
/// size also bounds how many per-sample gradient maps are alive at once.
const GRAD_CHUNK: usize = 16;

struct ChunkResult<T: Real> {
    loss: f64,
    correct: usize,
    grads: Gradients<T>,
}

/// One optimizer step's worth of gradient.
fn batch_gradients<T: Real>(
    state: &NetworkState<T>,
    inputs: &[(Tensor<T>, usize)],
    policy: &LossPolicy,
    kind: LossKind,
    execution: Execution,
) -> Result<(f64, usize, Gradients<T>)> {
    if inputs.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let scale = T::one() / T::from_usize(inputs.len()).unwrap();
    let chunks: Vec<&[(Tensor<T>, usize)]> = inputs.chunks(GRAD_CHUNK).collect();
    let results = execution.map(&chunks, |chunk| -> Result<ChunkResult<T>> {
        let mut acc = ChunkResult {
            loss: 0.0,
            correct: 0,
            grads: Gradients::new(),
        };
        for (x, label) in chunk.iter() {
            let (logits, cache) = state.forward_cached(x)?;
            let out = policy.sample_loss(kind, logits.data(), *label)?;
            let d = Tensor::new(logits.shape().to_vec(), out.grad.into_iter().map(|g| g * scale).collect())?;
            let g = state.backward_sample(&cache, &d)?;
            acc.loss += out.loss.to_f64_lossy();
            acc.correct += (logits.argmax() == *label) as usize;
            if acc.grads.is_empty() {
                acc.grads = g;
            } else {
                crate::model::accumulate(&mut acc.grads, &g)?;
            }
        }
        Ok(acc)
    });
    let mut total: Option<Gradients<T>> = None;
    let mut loss = 0.0;
    let mut correct = 0;
    for r in results {
        let r = r?;
        loss += r.loss;
        correct += r.correct;
        match total.as_mut() {
            None => total = Some(r.grads),
            Some(acc) => crate::model::accumulate(acc, &r.grads)?,
        }
    }
    Ok((loss / inputs.len() as f64, correct, total.expect("non-empty batch")))
}

/// Gradient of the mean batch loss for a fixed loss kind, without touching
/// any RNG. Exposed for benchmarking the per-sample fan-out.
pub fn batch_gradient<T: Real>(
    state: &NetworkState<T>,
    data: &DatasetBundle,
    indices: &[usize],
    policy: &LossPolicy,
    kind: LossKind,
    execution: Execution,
) -> Result<(f64, Gradients<T>)> {
    let inputs: Vec<(Tensor<T>, usize)> = indices.iter().map(|&i| (data.sample(i), data.labels()[i])).collect();
    let (loss, _, g) = batch_gradients(state, &inputs, policy, kind, execution)?;
    Ok((loss, g))
}

/// Trains `state` in place. Shuffling and flipping use one seeded stream and
/// loss selection another, so changing the loss policy never changes the data
/// order.
pub fn train<T: Real>(state: &mut NetworkState<T>, data: &DatasetBundle, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.image_shape() != state.spec.input {
        return Err(Error::config(format!(
            "dataset images {:?} do not match network input {:?}",
            data.image_shape(),
            state.spec.input
        )));
    }
    if data.classes() != state.spec.classes {
        return Err(Error::config(format!(
            "dataset has {} classes, network has {}",
            data.classes(),
            state.spec.classes
        )));
    }
    if data.is_empty() {
        return Err(Error::input("empty training set"));
    }
    let mut report = TrainReport {
        epochs: Vec::new(),
        switch_epoch: None,
        status: TrainStatus::Untrained,
    };
    if cfg.max_epochs == 0 {
        return Ok(report);
    }

    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(DATA_STREAM);
    let mut loss_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    loss_rng.set_stream(LOSS_STREAM);
    let mut adam = Adam::new(cfg.adam);
    let batch_size = cfg.batch_size.min(data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::new();
    let mut accs = Vec::new();

    for epoch in 0..cfg.max_epochs {
        let lr = match report.switch_epoch {
            None => cosine_lr(epoch, cfg.period(), cfg.lr1, cfg.cosine_min_lr)?,
            Some(s) => step_lr(epoch - s, cfg.lr2, cfg.step_gamma, cfg.step_interval)?,
        };
        order.shuffle(&mut data_rng);
        let mut tally: BTreeMap<LossKind, usize> = BTreeMap::new();
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let inputs: Vec<(Tensor<T>, usize)> = chunk
                .iter()
                .map(|&i| {
                    let x = data.sample::<T>(i);
                    let x = if data_rng.gen_bool(cfg.flip_prob) { flip_horizontal(&x) } else { x };
                    (x, data.labels()[i])
                })
                .collect();
            let kind = pick_loss(&cfg.policy, b, &mut loss_rng)?;
            *tally.entry(kind).or_default() += 1;
            let (loss, c, grads) = batch_gradients(state, &inputs, &cfg.policy, kind, cfg.execution)?;
            if !loss.is_finite() || grads.values().any(|g| !g.all_finite()) {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    kind: kind.to_string(),
                    loss,
                });
            }
            adam.step(&mut state.params, &grads, lr)?;
            loss_sum += loss * chunk.len() as f64;
            correct += c;
            batches += 1;
        }
        let record = EpochRecord {
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
            lr,
            loss_tally: tally,
            batches,
        };
        losses.push(record.loss);
        accs.push(record.accuracy);
        state.loss_history.push(record.loss);
        state.epoch += 1;
        report.epochs.push(record);

        let w = cfg.plateau_window;
        match report.switch_epoch {
            None => {
                if plateau_reached(&losses, &accs, w, cfg.plateau_loss_tol, cfg.plateau_acc_tol) {
                    report.switch_epoch = Some(epoch + 1);
                }
            }
            Some(s) => {
                let since = epoch + 1 - s;
                if cfg.stop_on_plateau
                    && since >= w
                    && plateau_reached(&losses, &accs, w, cfg.plateau_loss_tol, cfg.plateau_acc_tol)
                {
                    report.status = TrainStatus::Plateau;
                    break;
                }
            }
        }
    }
    if report.status == TrainStatus::Untrained {
        report.status = TrainStatus::EpochCap;
    }
    Ok(report)
}

/// Test-set scores plus raw per-sample logits (flip-free).
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: ClassificationReport,
    pub logits: Vec<Vec<f64>>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        self.report.accuracy
    }
}

pub fn evaluate<T: Real>(state: &NetworkState<T>, data: &DatasetBundle, execution: Execution) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::input("empty evaluation set"));
    }
    if data.classes() != state.spec.classes {
        return Err(Error::config(format!(
            "dataset has {} classes, network has {}",
            data.classes(),
            state.spec.classes
        )));
    }
    let logits = execution
        .map_range(data.len(), |i| {
            state
                .forward_sample(&data.sample::<T>(i))
                .map(|l| l.data().iter().map(|v| v.to_f64_lossy()).collect::<Vec<f64>>())
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let predictions: Vec<usize> = logits.iter().map(|l| crate::tensor::argmax(l)).collect();
    let report = ClassificationReport::from_predictions(data.labels(), &predictions, data.classes())?;
    Ok(Evaluation { report, logits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::model::{build, MiniCnnOptions, NetworkSpec};

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 10, 3e-4, 1e-5).unwrap(), 3e-4);
        assert!((cosine_lr(10, 10, 3e-4, 1e-5).unwrap() - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(5, 10, 3e-4, 1e-5).unwrap() - (3e-4 + 1e-5) / 2.0).abs() < 1e-18);
        assert!(matches!(cosine_lr(1, 0, 1.0, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn step_schedule() {
        assert_eq!(step_lr(0, 1e-5, 0.5, 10).unwrap(), 1e-5);
        assert_eq!(step_lr(25, 1e-5, 0.5, 10).unwrap(), 1e-5 * 0.25);
        assert!((0..100).all(|e| step_lr(e, 2e-5, 1.0, 3).unwrap() == 2e-5));
        assert!(matches!(step_lr(1, 1.0, 0.5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn plateau_cases() {
        assert!(plateau_reached(&[0.5; 6], &[0.9; 6], 5, 0.01, 0.005));
        let osc: Vec<f64> = (0..6).map(|i| 1.0 + if i % 2 == 0 { 0.02 } else { 0.0 }).collect();
        assert!(!plateau_reached(&osc, &[0.9; 6], 5, 0.01, 0.005));
        assert!(plateau_reached(&[1.00, 1.004, 0.998], &[0.8, 0.801, 0.8], 3, 0.01, 0.005));
        assert!(!plateau_reached(&[1.0, 1.0], &[0.5, 0.5], 3, 0.01, 0.005));
    }

    #[test]
    fn zero_gradient_adam_step_is_identity() {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::<f64>::from_fn(&[3, 2], |i| i as f64 - 2.5));
        let before = params.clone();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::<f64>::zeros(&[3, 2]));
        Adam::new(AdamConfig::default()).step(&mut params, &grads, 0.1).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::<f64>::zeros(&[2]));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new(vec![2], vec![3.0, -0.5]).unwrap());
        Adam::new(AdamConfig::default()).step(&mut params, &grads, 0.01).unwrap();
        let w = params["w"].data();
        assert!((w[0] + 0.01).abs() < 1e-9 && (w[1] - 0.01).abs() < 1e-9);
    }

    fn small_problem() -> (NetworkState<f32>, DatasetBundle) {
        let (train, _) = generate_synthetic(&SynthConfig::new(vec![12, 12, 12], 0.25, 16, 0.1, 5)).unwrap();
        let spec = NetworkSpec::mini_cnn([1, 16, 16], 3, &MiniCnnOptions::default()).unwrap();
        (build(&spec, 3).unwrap(), train)
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (mut state, data) = small_problem();
        let before = state.clone();
        let cfg = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        let report = train(&mut state, &data, &cfg).unwrap();
        assert!(report.epochs.is_empty());
        assert_eq!(report.status, TrainStatus::Untrained);
        assert_eq!(state, before);
    }

    #[test]
    fn training_is_deterministic_and_tallies_batches() {
        let cfg = TrainConfig {
            batch_size: 10,
            max_epochs: 3,
            seed: 42,
            ..TrainConfig::default()
        };
        let (mut a, data) = small_problem();
        let mut b = a.clone();
        let ra = train(&mut a, &data, &cfg).unwrap();
        let rb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(ra, rb);
        for e in &ra.epochs {
            assert_eq!(e.loss_tally.values().sum::<usize>(), e.batches);
            assert_eq!(e.batches, 4);
        }
        let sequential = TrainConfig {
            execution: Execution::Sequential,
            ..cfg
        };
        let (mut c, _) = small_problem();
        train(&mut c, &data, &sequential).unwrap();
        assert_eq!(a.params, c.params);
    }

    #[test]
    fn lr_follows_cosine_then_step() {
        let cfg = TrainConfig {
            batch_size: 36,
            max_epochs: 12,
            plateau_window: 2,
            plateau_loss_tol: 10.0,
            plateau_acc_tol: 10.0,
            stop_on_plateau: false,
            ..TrainConfig::default()
        };
        let (mut state, data) = small_problem();
        let report = train(&mut state, &data, &cfg).unwrap();
        let s = report.switch_epoch.expect("loose tolerances trigger the switch");
        assert_eq!(s, 2);
        for (e, rec) in report.epochs.iter().enumerate() {
            let expected = if e < s {
                cosine_lr(e, 12, cfg.lr1, cfg.cosine_min_lr).unwrap()
            } else {
                step_lr(e - s, cfg.lr2, cfg.step_gamma, cfg.step_interval).unwrap()
            };
            assert_eq!(rec.lr, expected);
        }
        assert_eq!(report.status, TrainStatus::EpochCap);
    }

    #[test]
    fn plateau_stops_after_switch() {
        let cfg = TrainConfig {
            batch_size: 36,
            max_epochs: 20,
            plateau_window: 2,
            plateau_loss_tol: 10.0,
            plateau_acc_tol: 10.0,
            ..TrainConfig::default()
        };
        let (mut state, data) = small_problem();
        let report = train(&mut state, &data, &cfg).unwrap();
        assert_eq!(report.status, TrainStatus::Plateau);
        assert_eq!(report.epochs.len(), 4);
    }

    #[test]
    fn mismatched_data_rejected() {
        let (mut state, _) = small_problem();
        let (other, _) = generate_synthetic(&SynthConfig::new(vec![4, 4], 0.25, 16, 0.1, 5)).unwrap();
        assert!(matches!(
            train(&mut state, &other, &TrainConfig::default()),
            Err(Error::Config(_))
        ));
        let bad = TrainConfig {
            lr2: 1.0,
            ..TrainConfig::default()
        };
        let (mut s2, d2) = small_problem();
        assert!(matches!(train(&mut s2, &d2, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn evaluation_rows_sum_to_one() {
        let (state, data) = small_problem();
        let ev = evaluate(&state, &data, Execution::Parallel).unwrap();
        assert_eq!(ev.logits.len(), data.len());
        for row in &ev.report.confusion {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
