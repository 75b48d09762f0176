//! Membership inference against a released model.
//!
//! Attacks only see the released model's probabilities and an auxiliary pool
//! drawn from the same distribution as the private data. Every score follows
//! one convention: higher means "more likely a training member".

mod logistic;
mod roc;

use std::collections::HashSet;

use rayon::prelude::*;
use serde::Serialize;

pub use logistic::Logistic;
pub use roc::{roc_curve, AttackResult, RocPoint};

use crate::error::{Error, Result};
use crate::fl::model::{probabilities, sample_loss, Sample};
use crate::linalg::{DenseMatrix, RngStream};

pub const DEFAULT_SHADOWS: usize = 8;
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Black-box access to a classifier.
pub trait TargetModel: Sync {
    fn confidences(&self, sample: &Sample) -> Vec<f64>;

    fn loss(&self, sample: &Sample) -> f64 {
        let p = self.confidences(sample)[sample.y];
        -p.max(f64::MIN_POSITIVE).ln()
    }
}

impl TargetModel for DenseMatrix {
    fn confidences(&self, sample: &Sample) -> Vec<f64> {
        probabilities(self, &sample.x)
    }

    fn loss(&self, sample: &Sample) -> f64 {
        sample_loss(self, sample)
    }
}

impl<T: TargetModel + ?Sized + Send> TargetModel for Box<T> {
    fn confidences(&self, sample: &Sample) -> Vec<f64> {
        (**self).confidences(sample)
    }

    fn loss(&self, sample: &Sample) -> f64 {
        (**self).loss(sample)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackRecord {
    pub id: u64,
    pub loss: f64,
    pub confidence: Vec<f64>,
    pub is_member: bool,
}

impl AttackRecord {
    pub fn observe(model: &impl TargetModel, sample: &Sample, is_member: bool) -> Self {
        Self {
            id: sample.id,
            loss: model.loss(sample),
            confidence: model.confidences(sample),
            is_member,
        }
    }

    /// Confidences in decreasing order followed by the loss.
    fn features(&self) -> Vec<f64> {
        let mut f = self.confidence.clone();
        f.sort_by(|a, b| b.total_cmp(a));
        f.push(self.loss);
        f
    }
}

/// Records the attacker must label.
#[derive(Debug, Clone, Default)]
pub struct EvalSet {
    pub members: Vec<Sample>,
    pub non_members: Vec<Sample>,
}

impl EvalSet {
    /// Draws `count` of each population without replacement.
    pub fn balanced(members: &[Sample], non_members: &[Sample], count: usize, rng: &mut RngStream) -> Result<Self> {
        if count > members.len() || count > non_members.len() {
            return Err(Error::Config(format!(
                "need {count} of each population, have {} members and {} non-members",
                members.len(),
                non_members.len()
            )));
        }
        let pick = |pool: &[Sample], rng: &mut RngStream| {
            rng.choose_indices(pool.len(), count)
                .into_iter()
                .map(|i| pool[i].clone())
                .collect()
        };
        Ok(Self {
            members: pick(members, rng),
            non_members: pick(non_members, rng),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Sample, bool)> {
        self.members
            .iter()
            .map(|s| (s, true))
            .chain(self.non_members.iter().map(|s| (s, false)))
    }

    pub fn labels(&self) -> Vec<bool> {
        self.iter().map(|(_, m)| m).collect()
    }

    pub fn observe(&self, model: &impl TargetModel) -> Vec<AttackRecord> {
        self.iter().map(|(s, m)| AttackRecord::observe(model, s, m)).collect()
    }
}

/// A model trained by the attacker together with the ids it was trained on.
#[derive(Debug, Clone)]
pub struct ShadowModel<M> {
    pub model: M,
    pub trained_on: HashSet<u64>,
}

/// Member iff `ℓ(W_tar, x, y) < τ` with `τ` the mean shadow loss over `aux`.
pub fn loss_threshold_attack(
    target: &impl TargetModel,
    shadow: &impl TargetModel,
    aux: &[Sample],
    eval: &EvalSet,
) -> Result<AttackResult> {
    if aux.is_empty() {
        return Err(Error::Config("loss attack needs a non-empty auxiliary pool".into()));
    }
    let tau = aux.iter().map(|s| shadow.loss(s)).sum::<f64>() / aux.len() as f64;
    let scores: Vec<f64> = eval.iter().map(|(s, _)| -target.loss(s)).collect();
    Ok(roc_curve(&scores, &eval.labels())?.with_strict_threshold(-tau))
}

/// Per-sample z-score of the target loss against the losses of shadows that
/// never saw the sample. Member iff the score is below `tau`; with `tau`
/// unset the balanced-accuracy-optimal value is used.
pub fn calibration_attack<M: TargetModel>(
    target: &impl TargetModel,
    shadows: &[ShadowModel<M>],
    tau: Option<f64>,
    eval: &EvalSet,
) -> Result<AttackResult> {
    let mut flagged = 0;
    let mut scores = Vec::with_capacity(eval.members.len() + eval.non_members.len());
    for (s, _) in eval.iter() {
        let out: Vec<f64> = shadows
            .iter()
            .filter(|sh| !sh.trained_on.contains(&s.id))
            .map(|sh| sh.model.loss(s))
            .collect();
        if out.len() < 2 {
            return Err(Error::Config(format!(
                "sample {} is excluded by {} shadows; at least 2 are needed",
                s.id,
                out.len()
            )));
        }
        let k = out.len() as f64;
        let mu = out.iter().sum::<f64>() / k;
        let var = out.iter().map(|l| (l - mu).powi(2)).sum::<f64>() / (k - 1.0);
        let mut sd = var.sqrt();
        if !(sd > 0.0) {
            sd = SIGMA_FLOOR;
            flagged += 1;
        }
        scores.push(-(target.loss(s) - mu) / sd);
    }
    let res = roc_curve(&scores, &eval.labels())?;
    let mut res = match tau {
        Some(t) => res.with_strict_threshold(-t),
        None => res,
    };
    res.flagged = flagged;
    Ok(res)
}

#[derive(Debug, Clone)]
pub struct ShadowAttack<M> {
    pub result: AttackResult,
    pub shadows: Vec<ShadowModel<M>>,
    /// Auxiliary samples no shadow was trained on.
    pub holdout: Vec<Sample>,
}

struct AttackClassifier {
    per_class: Vec<Option<Logistic>>,
    pooled: Logistic,
}

impl AttackClassifier {
    fn fit(records: &[AttackRecord], labels: &[usize], classes: usize) -> Self {
        let feats: Vec<Vec<f64>> = records.iter().map(AttackRecord::features).collect();
        let members: Vec<bool> = records.iter().map(|r| r.is_member).collect();
        let pooled = Logistic::fit(&feats, &members);
        let per_class = (0..classes)
            .map(|c| {
                let idx: Vec<usize> = (0..records.len()).filter(|&i| labels[i] == c).collect();
                let pos = idx.iter().filter(|&&i| members[i]).count();
                if pos == 0 || pos == idx.len() {
                    return None;
                }
                let f: Vec<Vec<f64>> = idx.iter().map(|&i| feats[i].clone()).collect();
                let y: Vec<bool> = idx.iter().map(|&i| members[i]).collect();
                Some(Logistic::fit(&f, &y))
            })
            .collect();
        Self { per_class, pooled }
    }

    fn score(&self, record: &AttackRecord, label: usize) -> f64 {
        let f = record.features();
        match self.per_class.get(label) {
            Some(Some(m)) => m.predict(&f),
            _ => self.pooled.predict(&f),
        }
    }
}

/// Trains `s` shadow models on disjoint slices of `aux` and fits per-class
/// logistic attack models on their (confidence, loss) outputs. One further
/// slice of `aux` serves as the shadows' shared non-members.
///
/// `trainer` must be the procedure that produced the target.
pub fn shadow_model_attack<M, F>(
    target: &impl TargetModel,
    aux: &[Sample],
    s: usize,
    trainer: F,
    eval: &EvalSet,
    rng: &RngStream,
) -> Result<ShadowAttack<M>>
where
    M: TargetModel + Send,
    F: Fn(&[Sample], &RngStream) -> Result<M> + Sync,
{
    if s < 2 {
        return Err(Error::Config(format!(
            "shadow attack needs at least 2 shadows, got {s}"
        )));
    }
    let chunk = aux.len() / (s + 1);
    if chunk == 0 {
        return Err(Error::Config(format!(
            "auxiliary pool of {} samples cannot host {s} shadows plus a holdout",
            aux.len()
        )));
    }
    let mut order: Vec<usize> = (0..aux.len()).collect();
    rng.child(0).shuffle(&mut order);
    let slice = |j: usize| -> Vec<Sample> {
        order[j * chunk..(j + 1) * chunk]
            .iter()
            .map(|&i| aux[i].clone())
            .collect()
    };
    let holdout = slice(s);
    let shadows: Vec<ShadowModel<M>> = (0..s)
        .into_par_iter()
        .map(|j| {
            let train = slice(j);
            let model = trainer(&train, &rng.child(1).child(j as u64))?;
            Ok(ShadowModel {
                model,
                trained_on: train.iter().map(|x| x.id).collect(),
            })
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::with_capacity(2 * s * chunk);
    let mut labels = Vec::with_capacity(2 * s * chunk);
    for (j, sh) in shadows.iter().enumerate() {
        for x in slice(j) {
            records.push(AttackRecord::observe(&sh.model, &x, true));
            labels.push(x.y);
        }
        for x in &holdout {
            records.push(AttackRecord::observe(&sh.model, x, false));
            labels.push(x.y);
        }
    }
    let classes = records.first().map_or(0, |r| r.confidence.len());
    let classifier = AttackClassifier::fit(&records, &labels, classes);
    let scores: Vec<f64> = eval
        .iter()
        .map(|(x, m)| classifier.score(&AttackRecord::observe(target, x, m), x.y))
        .collect();
    let result = roc_curve(&scores, &eval.labels())?.with_threshold(Some(0.5));
    Ok(ShadowAttack {
        result,
        shadows,
        holdout,
    })
}
