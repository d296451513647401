//! Training objective and evaluation metric.
//!
//! The per-window loss is label-smoothed cross-entropy (mean over voxels)
//! plus `1 − SoftDice` over the foreground classes `1..K`. Hard Dice is
//! reported in percent per named group of class ids.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub classes: usize,
    /// Label-smoothing mass ε.
    pub smoothing: f64,
    /// Stability constant of the Soft Dice quotient.
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { classes: 4, smoothing: 0.05, dice_eps: 1e-5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::InvalidConfig(format!("smoothing {} outside [0, 1)", self.smoothing)));
        }
        if !(self.dice_eps > 0.0) {
            return Err(Error::InvalidConfig("dice eps must be positive".into()));
        }
        Ok(())
    }
}

fn check_inputs<T>(values: &[T], labels: &[u16], k: usize) -> Result<usize> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyTensor);
    }
    if values.len() != n * k {
        return Err(Error::ShapeMismatch(format!("{} values for {n} rows x {k} classes", values.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| usize::from(l) >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    Ok(n)
}

/// Row-wise numerically stable softmax of `N×K` logits.
pub fn softmax_rows<T: Real>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut sum = T::zero();
        for &z in row {
            let e = (z - max).exp();
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= sum);
    }
    out
}

/// Mean label-smoothed cross-entropy and its gradient w.r.t. the logits.
pub fn ce_label_smoothing<T: Real>(logits: &[T], labels: &[u16], cfg: &LossConfig) -> Result<(f64, Vec<T>)> {
    cfg.validate()?;
    let k = cfg.classes;
    let n = check_inputs(logits, labels, k)?;
    let on = 1.0 - cfg.smoothing;
    let off = cfg.smoothing / (k - 1) as f64;
    let probs = softmax_rows(logits, k);
    let inv_n = 1.0 / n as f64;

    let mut total = 0.0f64;
    let mut grad = Vec::with_capacity(logits.len());
    for ((row, prow), &y) in logits.chunks_exact(k).zip(probs.chunks_exact(k)).zip(labels) {
        let max = row.iter().map(|z| z.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z.to_f64_lossy() - max).exp()).sum::<f64>().ln();
        for (c, (&z, &p)) in row.iter().zip(prow).enumerate() {
            let q = if c == usize::from(y) { on } else { off };
            total -= q * (z.to_f64_lossy() - lse);
            grad.push(T::from_f64_lossy((p.to_f64_lossy() - q) * inv_n));
        }
    }
    Ok((total * inv_n, grad))
}

/// Soft Dice over the foreground classes and its gradient w.r.t. the probabilities.
pub fn soft_dice<T: Real>(probs: &[T], labels: &[u16], cfg: &LossConfig) -> Result<(f64, Vec<T>)> {
    cfg.validate()?;
    let k = cfg.classes;
    check_inputs(probs, labels, k)?;
    for (row, p) in probs.chunks_exact(k).enumerate() {
        let sum: f64 = p.iter().map(|v| v.to_f64_lossy()).sum();
        if (sum - 1.0).abs() > 1e-5 || p.iter().any(|&v| v < T::zero()) {
            return Err(Error::InvalidProbability { row, sum });
        }
    }
    Ok(soft_dice_unchecked(probs, labels, cfg))
}

fn soft_dice_unchecked<T: Real>(probs: &[T], labels: &[u16], cfg: &LossConfig) -> (f64, Vec<T>) {
    let k = cfg.classes;
    let mut intersection = vec![0.0f64; k];
    let mut prob_mass = vec![0.0f64; k];
    let mut counts = vec![0.0f64; k];
    for (p, &y) in probs.chunks_exact(k).zip(labels) {
        for c in 1..k {
            let v = p[c].to_f64_lossy();
            prob_mass[c] += v;
            if usize::from(y) == c {
                intersection[c] += v;
            }
        }
        counts[usize::from(y)] += 1.0;
    }
    let eps = cfg.dice_eps;
    let scale = 1.0 / (k - 1) as f64;
    let mut value = 0.0;
    let mut numer = vec![0.0f64; k];
    let mut denom = vec![0.0f64; k];
    for c in 1..k {
        numer[c] = 2.0 * intersection[c] + eps;
        denom[c] = prob_mass[c] + counts[c] + eps;
        value += numer[c] / denom[c];
    }
    value *= scale;

    let mut grad = Vec::with_capacity(probs.len());
    for &y in labels {
        grad.push(T::zero());
        for c in 1..k {
            let hit = if usize::from(y) == c { 2.0 } else { 0.0 };
            let g = (hit * denom[c] - numer[c]) / (denom[c] * denom[c]);
            grad.push(T::from_f64_lossy(g * scale));
        }
    }
    (value, grad)
}

/// `CE + (1 − SoftDice(softmax(logits)))` and its gradient w.r.t. the logits.
pub fn combined_loss<T: Real>(logits: &[T], labels: &[u16], cfg: &LossConfig) -> Result<(f64, Vec<T>)> {
    let k = cfg.classes;
    let (ce, mut grad) = ce_label_smoothing(logits, labels, cfg)?;
    let probs = softmax_rows(logits, k);
    let (dice, d_dice) = soft_dice(&probs, labels, cfg)?;
    for ((g, p), dd) in grad.chunks_exact_mut(k).zip(probs.chunks_exact(k)).zip(d_dice.chunks_exact(k)) {
        // Chain −∂Dice/∂p through the softmax Jacobian.
        let weighted: f64 = p.iter().zip(dd).map(|(a, b)| a.to_f64_lossy() * b.to_f64_lossy()).sum();
        for c in 0..k {
            let pc = p[c].to_f64_lossy();
            *g.get_mut(c).unwrap() += T::from_f64_lossy(pc * (weighted - dd[c].to_f64_lossy()));
        }
    }
    Ok((ce + 1.0 - dice, grad))
}

/// Named groups of class ids, e.g. `{"rib": [1], "overall": [1, 2, 3]}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassGrouping {
    pub groups: BTreeMap<String, BTreeSet<u16>>,
}

impl ClassGrouping {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        for ids in self.groups.values() {
            if let Some(&label) = ids.iter().find(|&&id| usize::from(id) >= classes) {
                return Err(Error::LabelOutOfRange { label, classes });
            }
        }
        Ok(())
    }

    /// Adds an `"overall"` group holding every given foreground id, unless one exists.
    pub fn ensure_overall(&mut self, foreground: impl IntoIterator<Item = u16>) {
        self.groups
            .entry("overall".to_string())
            .or_insert_with(|| foreground.into_iter().filter(|&id| id != 0).collect());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDice {
    pub group: String,
    /// Percent in `[0, 100]`.
    pub dice: f64,
    /// Both masks were empty; Dice is reported as 100 by convention.
    pub both_empty: bool,
}

/// Hard Dice per group after binarizing both volumes to group membership.
pub fn hard_dice(pred: &Volume<u16>, gt: &Volume<u16>, grouping: &ClassGrouping) -> Result<Vec<GroupDice>> {
    if pred.shape != gt.shape || pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("prediction {:?} vs ground truth {:?}", pred.shape, gt.shape)));
    }
    let mut member = vec![false; usize::from(u16::MAX) + 1];
    let mut out = Vec::with_capacity(grouping.groups.len());
    for (name, ids) in &grouping.groups {
        member.iter_mut().for_each(|m| *m = false);
        for &id in ids {
            member[usize::from(id)] = true;
        }
        let (mut a, mut b, mut both) = (0u64, 0u64, 0u64);
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            let (in_a, in_b) = (member[usize::from(p)], member[usize::from(g)]);
            a += u64::from(in_a);
            b += u64::from(in_b);
            both += u64::from(in_a && in_b);
        }
        let both_empty = a + b == 0;
        let dice = if both_empty { 100.0 } else { 200.0 * both as f64 / (a + b) as f64 };
        out.push(GroupDice { group: name.clone(), dice, both_empty });
    }
    Ok(out)
}
