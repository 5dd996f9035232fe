//! Decision-level ensembles: top-two voting (T2V), top-one voting (bagging),
//! normalized output integration (NOI), and rank-distribution analytics.
//!
//! Rank vectors use the encoding where the largest logit receives `C-1` and
//! the smallest `0`. Under this encoding the arithmetic vote form
//! `(α-2β)·max(S+2-C, 0) + β·max(S+3-C, 0)` gives exactly α to the top class
//! and β to the runner-up.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::ClassificationReport;
use crate::nn::softmax;
use crate::par::Execution;
use crate::tensor::argmax;

pub const DEFAULT_ALPHA: f64 = 1.9;
pub const DEFAULT_BETA: f64 = 1.0;

/// Rank score of every class: `C-1` for the largest logit down to `0` for the
/// smallest. Equal logits rank the lower class index higher.
pub fn rank_vector(logits: &[f64]) -> Vec<usize> {
    let c = logits.len();
    let mut order: Vec<usize> = (0..c).collect();
    // stable sort keeps lower indices first among ties
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut s = vec![0; c];
    for (pos, &class) in order.iter().enumerate() {
        s[class] = c - 1 - pos;
    }
    s
}

fn check_permutation(s: &[usize]) -> Result<()> {
    let c = s.len();
    if c < 2 {
        return Err(Error::config("top-two voting needs at least two classes"));
    }
    let mut seen = vec![false; c];
    for &r in s {
        if r >= c || std::mem::replace(&mut seen[r], true) {
            return Err(Error::input(format!("rank vector {s:?} is not a permutation of 0..{c}")));
        }
    }
    Ok(())
}

/// Votes by case analysis: α for the first-ranked class, β for the second,
/// zero for the rest.
pub fn t2v_votes_direct(s: &[usize], alpha: f64, beta: f64) -> Result<Vec<f64>> {
    check_permutation(s)?;
    let c = s.len();
    Ok(s.iter()
        .map(|&r| match c - 1 - r {
            0 => alpha,
            1 => beta,
            _ => 0.0,
        })
        .collect())
}

/// Votes by the closed-form element-wise expression.
pub fn t2v_votes_fast(s: &[usize], alpha: f64, beta: f64) -> Result<Vec<f64>> {
    check_permutation(s)?;
    let c = s.len() as i64;
    Ok(s.iter()
        .map(|&r| {
            let r = r as i64;
            let a = (r + 2 - c).max(0) as f64;
            let b = (r + 3 - c).max(0) as f64;
            // (alpha - 2 beta) a + beta b, regrouped so that every term is an
            // exact product and the result is bit-identical to the direct form
            alpha * a + beta * (b - 2.0 * a)
        })
        .collect())
}

/// The T2V label vector of one network output.
pub fn t2v_label_vector(s: &[usize], alpha: f64, beta: f64, classes: usize) -> Result<Vec<f64>> {
    if classes < 2 {
        return Err(Error::config("top-two voting needs at least two classes"));
    }
    if s.len() != classes {
        return Err(Error::input(format!(
            "rank vector has {} entries for {classes} classes",
            s.len()
        )));
    }
    t2v_votes_fast(s, alpha, beta)
}

/// Aggregate score vector and the winning class (lowest index on ties).
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleDecision {
    pub aggregate: Vec<f64>,
    pub class: usize,
}

impl EnsembleDecision {
    fn from_aggregate(aggregate: Vec<f64>) -> Self {
        let class = argmax(&aggregate);
        Self { aggregate, class }
    }
}

fn common_classes(outputs: &[Vec<f64>]) -> Result<usize> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::input("an ensemble needs at least one network output"))?;
    let c = first.len();
    if let Some(bad) = outputs.iter().find(|o| o.len() != c) {
        return Err(Error::input(format!(
            "network outputs disagree on class count ({c} vs {})",
            bad.len()
        )));
    }
    if c == 0 {
        return Err(Error::input("empty network output"));
    }
    if outputs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::input("non-finite network output"));
    }
    Ok(c)
}

/// `sum_l V^l` over all networks; no normalization of the raw outputs.
/// Accumulated as per-class top-1 and top-2 counts, so the aggregate is
/// bit-identical under any ordering of the networks.
pub fn t2v(outputs: &[Vec<f64>], alpha: f64, beta: f64) -> Result<EnsembleDecision> {
    let c = common_classes(outputs)?;
    if c < 2 {
        return Err(Error::config("top-two voting needs at least two classes"));
    }
    let mut first = vec![0u32; c];
    let mut second = vec![0u32; c];
    for out in outputs {
        let s = rank_vector(out);
        for (class, &r) in s.iter().enumerate() {
            if r == c - 1 {
                first[class] += 1;
            } else if r == c - 2 {
                second[class] += 1;
            }
        }
    }
    let total = first
        .iter()
        .zip(&second)
        .map(|(&n1, &n2)| alpha * f64::from(n1) + beta * f64::from(n2))
        .collect();
    Ok(EnsembleDecision::from_aggregate(total))
}

/// One vote per network for its argmax class.
pub fn top1_vote(outputs: &[Vec<f64>]) -> Result<EnsembleDecision> {
    let c = common_classes(outputs)?;
    let mut counts = vec![0.0; c];
    for out in outputs {
        counts[argmax(out)] += 1.0;
    }
    Ok(EnsembleDecision::from_aggregate(counts))
}

/// Sum of softmax-normalized outputs.
pub fn noi(outputs: &[Vec<f64>]) -> Result<EnsembleDecision> {
    let c = common_classes(outputs)?;
    let mut total = vec![0.0; c];
    for out in outputs {
        for (t, q) in total.iter_mut().zip(softmax(out)) {
            *t += q;
        }
    }
    Ok(EnsembleDecision::from_aggregate(total))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Strategy {
    T2v { alpha: f64, beta: f64 },
    Top1,
    Noi,
}

impl Strategy {
    pub fn t2v_default() -> Self {
        Strategy::T2v {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
        }
    }

    pub fn decide(&self, outputs: &[Vec<f64>]) -> Result<EnsembleDecision> {
        match *self {
            Strategy::T2v { alpha, beta } => t2v(outputs, alpha, beta),
            Strategy::Top1 => top1_vote(outputs),
            Strategy::Noi => noi(outputs),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::T2v { .. } => "t2v",
            Strategy::Top1 => "top1",
            Strategy::Noi => "noi",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// `t2v` parses with the default α and β.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "t2v" => Ok(Strategy::t2v_default()),
            "top1" | "t1v" | "bagging" => Ok(Strategy::Top1),
            "noi" => Ok(Strategy::Noi),
            other => Err(Error::config(format!("unknown ensemble strategy `{other}`"))),
        }
    }
}

/// Ensemble predictions over a dataset. `logits[m][n]` is network `m`'s output
/// for sample `n`.
pub fn ensemble_predictions(logits: &[Vec<Vec<f64>>], strategy: Strategy, execution: Execution) -> Result<Vec<usize>> {
    let n = logits
        .first()
        .ok_or_else(|| Error::input("an ensemble needs at least one network"))?
        .len();
    if logits.iter().any(|l| l.len() != n) {
        return Err(Error::input("networks were evaluated on different sample counts"));
    }
    execution
        .map_range(n, |i| {
            let outputs: Vec<Vec<f64>> = logits.iter().map(|l| l[i].clone()).collect();
            strategy.decide(&outputs).map(|d| d.class)
        })
        .into_iter()
        .collect()
}

pub fn ensemble_report(
    logits: &[Vec<Vec<f64>>],
    labels: &[usize],
    classes: usize,
    strategy: Strategy,
    execution: Execution,
) -> Result<ClassificationReport> {
    let preds = ensemble_predictions(logits, strategy, execution)?;
    ClassificationReport::from_predictions(labels, &preds, classes)
}

/// Fraction of samples whose true label sits at rank position 1, 2, ..., C of
/// the output (position 1 = largest logit).
pub fn rank_distribution(logits: &[Vec<f64>], labels: &[usize]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::input("rank distribution of an empty set"));
    }
    if logits.len() != labels.len() {
        return Err(Error::input(format!(
            "{} outputs but {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let c = common_classes(logits)?;
    let mut counts = vec![0usize; c];
    for (out, &label) in logits.iter().zip(labels) {
        if label >= c {
            return Err(Error::input(format!("label {label} out of range for {c} classes")));
        }
        counts[c - 1 - rank_vector(out)[label]] += 1;
    }
    Ok(counts.into_iter().map(|k| k as f64 / logits.len() as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        assert_eq!(rank_vector(&[3.0, 1.0, 2.0]), vec![2, 0, 1]);
        assert_eq!(rank_vector(&[0.1, 0.2, 0.3, 0.4]), vec![0, 1, 2, 3]);
        assert_eq!(rank_vector(&[5.0; 4]), vec![3, 2, 1, 0]);
    }

    #[test]
    fn label_vector_for_seven_classes() {
        // top-1 at index 3, top-2 at index 0
        let logits = [0.295, 0.138, -1.331, 0.917, -1.429, -0.502, -0.712];
        let v = t2v_label_vector(&rank_vector(&logits), 1.9, 1.0, 7).unwrap();
        assert_eq!(v, vec![1.0, 0.0, 0.0, 1.9, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn equal_weights_tie_top_two() {
        let v = t2v_label_vector(&[1, 2, 0], 1.0, 1.0, 3).unwrap();
        assert_eq!(v, vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn label_vector_errors() {
        assert!(matches!(t2v_label_vector(&[0], 1.9, 1.0, 1), Err(Error::Config(_))));
        assert!(matches!(t2v_votes_fast(&[0, 0, 1], 1.9, 1.0), Err(Error::Input(_))));
    }

    #[test]
    fn single_voter_matches_argmax() {
        let out = vec![vec![0.2, 1.5, -0.3]];
        assert_eq!(t2v(&out, 1.9, 1.0).unwrap().class, 1);
        assert_eq!(top1_vote(&out).unwrap().class, 1);
        assert_eq!(noi(&out).unwrap().class, 1);
    }

    #[test]
    fn replicated_outputs_scale() {
        let one = vec![vec![0.2, 1.5, -0.3, 0.9]];
        let many = vec![one[0].clone(); 4];
        let a = t2v(&one, 1.9, 1.0).unwrap();
        let b = t2v(&many, 1.9, 1.0).unwrap();
        assert_eq!(a.class, b.class);
        for (x, y) in a.aggregate.iter().zip(&b.aggregate) {
            assert!((4.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn noi_symmetric_tie_goes_low() {
        let d = noi(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((d.aggregate[0] - 1.0).abs() < 1e-15 && (d.aggregate[1] - 1.0).abs() < 1e-15);
        assert_eq!(d.class, 0);
    }

    #[test]
    fn unanimous_top1() {
        let d = top1_vote(&vec![vec![0.0, 2.0, 1.0]; 5]).unwrap();
        assert_eq!(d.aggregate, vec![0.0, 5.0, 0.0]);
    }

    #[test]
    fn inconsistent_class_counts_rejected() {
        let outs = vec![vec![0.0, 1.0], vec![0.0, 1.0, 2.0]];
        for s in [Strategy::t2v_default(), Strategy::Top1, Strategy::Noi] {
            assert!(matches!(s.decide(&outs), Err(Error::Input(_))));
            assert!(matches!(s.decide(&[]), Err(Error::Input(_))));
        }
    }

    #[test]
    fn rank_distribution_extremes() {
        let labels = [0, 1, 2];
        let perfect: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..3).map(|c| if c == l { 1.0 } else { 0.0 }).collect())
            .collect();
        assert_eq!(rank_distribution(&perfect, &labels).unwrap(), vec![1.0, 0.0, 0.0]);
        let worst: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..3).map(|c| if c == l { -1.0 } else { 0.0 }).collect())
            .collect();
        assert_eq!(rank_distribution(&worst, &labels).unwrap(), vec![0.0, 0.0, 1.0]);
        assert!(matches!(rank_distribution(&perfect, &[0, 1, 7]), Err(Error::Input(_))));
    }

    #[test]
    fn strategy_names_parse() {
        assert_eq!("t2v".parse::<Strategy>().unwrap(), Strategy::t2v_default());
        assert_eq!("top1".parse::<Strategy>().unwrap(), Strategy::Top1);
        assert_eq!("NOI".parse::<Strategy>().unwrap(), Strategy::Noi);
        assert!("svm".parse::<Strategy>().is_err());
    }
}
