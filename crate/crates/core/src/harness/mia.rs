use std::sync::Arc;

use rand::RngCore;
use serde::Serialize;

use crate::attacks::{calibration_attack, loss_threshold_attack, shadow_model_attack, AttackResult, EvalSet};
use crate::error::{Error, Result};
use crate::fl::task::pool;
use crate::fl::{train_federated, Dataset, FLRunConfig, Sample, SyntheticTask};
use crate::linalg::{DenseMatrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Shadow,
    Loss,
    Calibration,
}

impl AttackKind {
    pub const ALL: [AttackKind; 3] = [AttackKind::Shadow, AttackKind::Loss, AttackKind::Calibration];

    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::Shadow => "shadow",
            AttackKind::Loss => "loss",
            AttackKind::Calibration => "calibration",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MiaOptions {
    pub shadows: usize,
    /// Members (and as many non-members) in the evaluation set.
    pub eval_count: usize,
    /// Test samples used for the per-round accuracy of shadow runs.
    pub shadow_test_size: usize,
    pub seed: u64,
}

impl Default for MiaOptions {
    fn default() -> Self {
        Self {
            shadows: crate::attacks::DEFAULT_SHADOWS,
            eval_count: 500,
            shadow_test_size: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MiaOutcome {
    pub attack: AttackKind,
    pub result: AttackResult,
}

#[derive(Debug, Clone, Serialize)]
pub struct MiaReport {
    pub outcomes: Vec<MiaOutcome>,
    pub eval_ids: Vec<u64>,
}

impl MiaReport {
    pub fn get(&self, kind: AttackKind) -> Option<&AttackResult> {
        self.outcomes.iter().find(|o| o.attack == kind).map(|o| &o.result)
    }
}

/// Attacks a model released by a run of `config` on `task`.
///
/// The attacker knows the public base weight and the training recipe, and
/// draws auxiliary data from the task distribution. Shadows are trained with
/// the same federated procedure on client splits of their auxiliary slice.
pub fn run_mia(
    config: &FLRunConfig,
    task: &SyntheticTask,
    target: &DenseMatrix,
    attacks: &[AttackKind],
    options: &MiaOptions,
) -> Result<MiaReport> {
    let privacy = config.resolve_privacy()?;
    let members = task.training_pool();
    let n_train = members.len();
    let s = options.shadows;
    let aux = task.draw_pool(pool::AUX, (s + 1) * n_train);
    let holdout = task.draw_pool(pool::HOLDOUT, n_train);
    let root = RngStream::at(options.seed, vec![0x4D1A]);
    let count = options.eval_count.min(n_train);
    let eval = EvalSet::balanced(&members, &holdout, count, &mut root.child(0))?;
    let shadow_test: Vec<Sample> = task
        .test
        .iter()
        .take(options.shadow_test_size.max(1))
        .cloned()
        .collect();
    let clients = config.task.clients;

    let trainer = |train: &[Sample], rng: &RngStream| -> Result<DenseMatrix> {
        let per = train.len() / clients;
        if per == 0 {
            return Err(Error::Config("shadow slice smaller than the client count".into()));
        }
        let datasets: Vec<Dataset> = train
            .chunks_exact(per)
            .take(clients)
            .map(|c| Arc::new(c.to_vec()))
            .collect();
        let seed = rng.clone().next_u64();
        let out = train_federated(config, &privacy, &task.base, &datasets, &shadow_test, seed)?;
        Ok(out.weight)
    };

    let shadow = shadow_model_attack(target, &aux, s, trainer, &eval, &root.child(1))?;
    let mut outcomes = Vec::new();
    for &kind in attacks {
        let result = match kind {
            AttackKind::Shadow => shadow.result.clone(),
            AttackKind::Loss => {
                let first = &shadow.shadows[0];
                let seen: Vec<Sample> = aux
                    .iter()
                    .filter(|x| first.trained_on.contains(&x.id))
                    .cloned()
                    .collect();
                loss_threshold_attack(target, &first.model, &seen, &eval)?
            }
            AttackKind::Calibration => calibration_attack(target, &shadow.shadows, None, &eval)?,
        };
        outcomes.push(MiaOutcome { attack: kind, result });
    }
    Ok(MiaReport {
        outcomes,
        eval_ids: eval.iter().map(|(x, _)| x.id).collect(),
    })
}
