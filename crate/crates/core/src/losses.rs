//! Cross entropy, weighted cross entropy, label smoothing, and the per-batch
//! random loss selection policy.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::softmax;
use crate::tensor::Real;

/// Loss value and its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub loss: T,
    pub grad: Vec<T>,
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::input(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// `-w_y log q_y`, gradient `w_y (q - onehot(y))`. Unweighted when `weights` is `None`.
pub fn ce_loss<T: Real>(logits: &[T], label: usize, weights: Option<&[f64]>) -> Result<LossOutput<T>> {
    check_label(label, logits.len())?;
    let w = match weights {
        Some(ws) if ws.len() != logits.len() => {
            return Err(Error::input(format!(
                "{} class weights for {} classes",
                ws.len(),
                logits.len()
            )))
        }
        Some(ws) => T::from_f64_lossy(ws[label]),
        None => T::one(),
    };
    let log_q = log_softmax(logits);
    let q = softmax(logits);
    let grad = q
        .iter()
        .enumerate()
        .map(|(i, &qi)| w * (if i == label { qi - T::one() } else { qi }))
        .collect();
    Ok(LossOutput {
        loss: -w * log_q[label],
        grad,
    })
}

/// Cross entropy against the smoothed target `1-eps` on the label and
/// `eps/(C-1)` elsewhere.
pub fn lsr_loss<T: Real>(logits: &[T], label: usize, epsilon: f64) -> Result<LossOutput<T>> {
    let c = logits.len();
    if c < 2 {
        return Err(Error::config("label smoothing needs at least two classes"));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::config(format!("smoothing factor {epsilon} outside [0,1]")));
    }
    check_label(label, c)?;
    let target = smoothed_target::<T>(c, label, epsilon);
    let log_q = log_softmax(logits);
    let q = softmax(logits);
    let loss = -target
        .iter()
        .zip(&log_q)
        .fold(T::zero(), |acc, (&p, &lq)| acc + p * lq);
    // sum(target) = 1, so d/dz = q - target
    let grad = q.iter().zip(&target).map(|(&qi, &pi)| qi - pi).collect();
    Ok(LossOutput { loss, grad })
}

/// The label-smoothing target vector.
pub fn smoothed_target<T: Real>(classes: usize, label: usize, epsilon: f64) -> Vec<T> {
    let off = T::from_f64_lossy(epsilon / (classes as f64 - 1.0));
    let on = T::from_f64_lossy(1.0 - epsilon);
    (0..classes).map(|i| if i == label { on } else { off }).collect()
}

fn log_softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&z| (z - m).exp()).sum::<T>().ln() + m;
    logits.iter().map(|&z| z - lse).collect()
}

/// Inverse-frequency class weights `N / (C n_c)`.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::input("no class counts"));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::input(format!("class {c} has no samples")));
    }
    let total: usize = counts.iter().sum();
    let c = counts.len() as f64;
    Ok(counts
        .iter()
        .map(|&n| total as f64 / (c * n as f64))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossKind {
    Ce,
    Wce,
    Lsr,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Ce, LossKind::Wce, LossKind::Lsr];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Wce => "wce",
            LossKind::Lsr => "lsr",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ce" => Ok(LossKind::Ce),
            "wce" => Ok(LossKind::Wce),
            "lsr" => Ok(LossKind::Lsr),
            other => Err(Error::config(format!("unknown loss kind `{other}`"))),
        }
    }
}

/// One loss is drawn per batch according to the entry probabilities; the
/// losses are never blended.
#[derive(Clone, Debug, PartialEq)]
pub struct LossPolicy {
    pub entries: Vec<(LossKind, f64)>,
    pub epsilon: f64,
    pub class_weights: Option<Vec<f64>>,
}

impl LossPolicy {
    pub fn new(entries: Vec<(LossKind, f64)>, epsilon: f64) -> Result<Self> {
        let policy = Self {
            entries,
            epsilon,
            class_weights: None,
        };
        policy.validate()?;
        Ok(policy)
    }

    /// `{LSR 0.8, CE 0.2}`, used when class proportions are close.
    pub fn balanced_default() -> Self {
        Self::new(vec![(LossKind::Lsr, 0.8), (LossKind::Ce, 0.2)], 0.1).unwrap()
    }

    /// `{WCE 0.8, LSR 0.2}`, used for skewed training sets.
    pub fn skewed_default() -> Self {
        Self::new(vec![(LossKind::Wce, 0.8), (LossKind::Lsr, 0.2)], 0.1).unwrap()
    }

    pub fn with_class_weights(mut self, weights: Vec<f64>) -> Self {
        self.class_weights = Some(weights);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::config("loss policy has no entries"));
        }
        if self.entries.iter().any(|&(_, p)| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::config("loss probabilities must be finite and non-negative"));
        }
        let total: f64 = self.entries.iter().map(|&(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("loss probabilities sum to {total}, not 1")));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::config(format!("smoothing factor {} outside [0,1]", self.epsilon)));
        }
        Ok(())
    }

    /// Parses `lsr:0.8,ce:0.2`.
    pub fn parse_entries(text: &str) -> Result<Vec<(LossKind, f64)>> {
        text.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|part| {
                let (kind, p) = part
                    .split_once(':')
                    .ok_or_else(|| Error::config(format!("loss entry `{part}` is not kind:prob")))?;
                let p: f64 = p
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(format!("bad probability in `{part}`")))?;
                Ok((kind.parse()?, p))
            })
            .collect()
    }

    pub fn render_entries(&self) -> String {
        self.entries
            .iter()
            .map(|(k, p)| format!("{k}:{p}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Per-sample loss of the given kind.
    pub fn sample_loss<T: Real>(&self, kind: LossKind, logits: &[T], label: usize) -> Result<LossOutput<T>> {
        match kind {
            LossKind::Ce => ce_loss(logits, label, None),
            LossKind::Wce => ce_loss(logits, label, self.class_weights.as_deref()),
            LossKind::Lsr => lsr_loss(logits, label, self.epsilon),
        }
    }
}

/// Draws the loss for one batch. `batch_index` does not influence the draw;
/// the sequence is fully determined by the RNG stream.
pub fn pick_loss<R: Rng + ?Sized>(policy: &LossPolicy, _batch_index: usize, rng: &mut R) -> Result<LossKind> {
    if policy.entries.is_empty() {
        return Err(Error::config("loss policy has no entries"));
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(kind, p) in &policy.entries {
        acc += p;
        if u < acc {
            return Ok(kind);
        }
    }
    // rounding left u above the cumulative total; take the last nonzero entry
    Ok(policy
        .entries
        .iter()
        .rev()
        .find(|&&(_, p)| p > 0.0)
        .unwrap_or(&policy.entries[0])
        .0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetric_logits_cost_ln2() {
        let out = ce_loss(&[0.0f64, 0.0], 0, None).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_is_near_zero() {
        let out = ce_loss(&[50.0f64, 0.0], 0, None).unwrap();
        assert!(out.loss < 1e-9 && out.loss >= 0.0);
    }

    #[test]
    fn ce_matches_direct_softmax() {
        let z = [1.0f64, 0.0, -1.0];
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let expected = -((-1.0f64).exp() / denom).ln();
        let out = ce_loss(&z, 2, None).unwrap();
        assert!((out.loss - expected).abs() < 1e-14);
    }

    #[test]
    fn label_out_of_range_is_input_error() {
        assert!(matches!(ce_loss(&[0.0f64; 3], 3, None), Err(Error::Input(_))));
        assert!(matches!(lsr_loss(&[0.0f64; 3], 5, 0.1), Err(Error::Input(_))));
    }

    #[test]
    fn lsr_single_class_is_config_error() {
        assert!(matches!(lsr_loss(&[1.0f64], 0, 0.1), Err(Error::Config(_))));
    }

    #[test]
    fn lsr_target_for_seven_classes() {
        let t: Vec<f64> = smoothed_target(7, 2, 0.1);
        assert!((t[2] - 0.9).abs() < 1e-15);
        for (i, v) in t.iter().enumerate() {
            if i != 2 {
                assert!((v - 0.1 / 6.0).abs() < 1e-15);
                assert!((v - 0.016667).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn lsr_zero_epsilon_is_ce() {
        let z = [0.3f64, -1.2, 2.0, 0.1];
        let a = lsr_loss(&z, 1, 0.0).unwrap();
        let b = ce_loss(&z, 1, None).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    #[test]
    fn weighted_ce_scales_loss_and_grad() {
        let z = [0.5f64, -0.5];
        let plain = ce_loss(&z, 1, None).unwrap();
        let weighted = ce_loss(&z, 1, Some(&[1.0, 3.0])).unwrap();
        assert!((weighted.loss - 3.0 * plain.loss).abs() < 1e-14);
        assert!((weighted.grad[0] - 3.0 * plain.grad[0]).abs() < 1e-14);
    }

    #[test]
    fn class_weight_cases() {
        assert_eq!(class_weights(&[10, 10, 10]).unwrap(), vec![1.0, 1.0, 1.0]);
        let w = class_weights(&[30, 10]).unwrap();
        assert!((w[0] - 40.0 / 60.0).abs() < 1e-15 && (w[1] - 2.0).abs() < 1e-15);
        let r = class_weights(&[1, 1000]).unwrap();
        assert!((r[0] / r[1] - 1000.0).abs() < 1e-9);
        assert!(matches!(class_weights(&[3, 0]), Err(Error::Input(_))));
    }

    #[test]
    fn degenerate_policy_always_picks_its_entry() {
        let p = LossPolicy::new(vec![(LossKind::Ce, 1.0)], 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!((0..500).all(|i| pick_loss(&p, i, &mut rng).unwrap() == LossKind::Ce));
    }

    #[test]
    fn pick_sequence_is_seeded() {
        let p = LossPolicy::balanced_default();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..200).map(|i| pick_loss(&p, i, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }

    #[test]
    fn invalid_policies_rejected() {
        assert!(LossPolicy::new(vec![], 0.1).is_err());
        assert!(LossPolicy::new(vec![(LossKind::Ce, 0.5)], 0.1).is_err());
        assert!(LossPolicy::new(vec![(LossKind::Ce, 1.0)], 1.5).is_err());
        let empty = LossPolicy {
            entries: vec![],
            epsilon: 0.1,
            class_weights: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(pick_loss(&empty, 0, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn entries_parse_and_render() {
        let e = LossPolicy::parse_entries("lsr:0.8, ce:0.2").unwrap();
        assert_eq!(e, vec![(LossKind::Lsr, 0.8), (LossKind::Ce, 0.2)]);
        let p = LossPolicy::new(e, 0.1).unwrap();
        assert_eq!(LossPolicy::parse_entries(&p.render_entries()).unwrap(), p.entries);
        assert!(LossPolicy::parse_entries("focal:1.0").is_err());
    }
}
