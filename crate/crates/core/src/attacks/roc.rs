use serde::Serialize;

use crate::error::{Error, Result};

/// One operating point. A record is flagged as a member when its score is at
/// least `threshold`; `None` flags nothing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: Option<f64>,
}

/// Scores (higher means "more likely a member") with their evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct AttackResult {
    pub scores: Vec<f64>,
    pub members: Vec<bool>,
    /// Operating threshold on the score scale.
    pub threshold: Option<f64>,
    /// Balanced accuracy `(TPR + TNR)/2` at the operating threshold.
    pub accuracy: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub roc: Vec<RocPoint>,
    pub auc: f64,
    /// Records whose score needed a numerical fallback.
    pub flagged: usize,
}

impl AttackResult {
    pub fn thresholds(&self) -> Vec<Option<f64>> {
        self.roc.iter().map(|p| p.threshold).collect()
    }

    /// Re-targets the operating point to `score >= threshold`.
    pub fn with_threshold(mut self, threshold: Option<f64>) -> Self {
        let (tpr, fpr) = rates_at(&self.scores, &self.members, threshold);
        self.threshold = threshold;
        self.tpr = tpr;
        self.fpr = fpr;
        self.accuracy = 0.5 * (tpr + 1.0 - fpr);
        self
    }

    /// Re-targets the operating point to the strict rule `score > threshold`.
    pub fn with_strict_threshold(mut self, threshold: f64) -> Self {
        let (p, n) = class_counts(&self.members);
        let tp = self
            .scores
            .iter()
            .zip(&self.members)
            .filter(|(s, &m)| m && **s > threshold)
            .count();
        let fp = self
            .scores
            .iter()
            .zip(&self.members)
            .filter(|(s, &m)| !m && **s > threshold)
            .count();
        self.tpr = tp as f64 / p as f64;
        self.fpr = fp as f64 / n as f64;
        self.threshold = Some(threshold);
        self.accuracy = 0.5 * (self.tpr + 1.0 - self.fpr);
        self
    }
}

fn class_counts(members: &[bool]) -> (usize, usize) {
    let p = members.iter().filter(|&&m| m).count();
    (p, members.len() - p)
}

fn rates_at(scores: &[f64], members: &[bool], threshold: Option<f64>) -> (f64, f64) {
    let (p, n) = class_counts(members);
    let Some(t) = threshold else { return (0.0, 0.0) };
    let tp = scores.iter().zip(members).filter(|(s, &m)| m && **s >= t).count();
    let fp = scores.iter().zip(members).filter(|(s, &m)| !m && **s >= t).count();
    (tp as f64 / p as f64, fp as f64 / n as f64)
}

/// Sweeps every distinct score as a threshold. The operating point is the one
/// maximizing balanced accuracy (earliest on ties).
pub fn roc_curve(scores: &[f64], members: &[bool]) -> Result<AttackResult> {
    if scores.len() != members.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            members.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("attack score"));
    }
    let (p, n) = class_counts(members);
    if p == 0 || n == 0 {
        return Err(Error::Domain("ROC needs both members and non-members".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));

    let mut roc = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: None,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if members[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        roc.push(RocPoint {
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
            threshold: Some(s),
        });
    }
    let auc = roc
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * 0.5 * (w[1].tpr + w[0].tpr))
        .sum::<f64>();
    let best = roc.iter().copied().fold(roc[0], |best, pt| {
        if pt.tpr - pt.fpr > best.tpr - best.fpr {
            pt
        } else {
            best
        }
    });
    Ok(AttackResult {
        scores: scores.to_vec(),
        members: members.to_vec(),
        threshold: best.threshold,
        accuracy: 0.5 * (best.tpr + 1.0 - best.fpr),
        tpr: best.tpr,
        fpr: best.fpr,
        roc,
        auc,
        flagged: 0,
    })
}
