use crate::dp::Adjacency;
use crate::error::{Error, Result};
use crate::fl::{FLRunConfig, PrivacyConfig, Protocol, ProtocolConfig, TaskConfig, TrainingConfig};

pub const PRESETS: [&str; 4] = ["nonprivate", "eps9", "eps6", "eps3"];

pub const DELTA: f64 = 1e-5;
pub const CLIP: f64 = 2.0;
pub const RANK: usize = 8;

fn base_task(seed: u64) -> TaskConfig {
    TaskConfig::new(64, 16, 10, 2560, 6, seed)
}

fn training() -> TrainingConfig {
    TrainingConfig {
        rounds: 200,
        local_rounds: 5,
        eta: 0.1,
        q_c: 0.5,
        q_s: 0.05,
        optimizer: Default::default(),
        init_std: None,
    }
}

/// Named configuration: FedPower, six clients, rank 8, 200 rounds, client rate
/// 0.5 and an expected mini-batch of 128. Private presets use `C = 2` and
/// `δ = 1e-5`; their σ is derived by the accountant when the run resolves.
pub fn preset(name: &str) -> Result<FLRunConfig> {
    let epsilon = match name {
        "nonprivate" => None,
        "eps9" => Some(9.0),
        "eps6" => Some(6.0),
        "eps3" => Some(3.0),
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; valid presets: {}",
                PRESETS.join(", ")
            )))
        }
    };
    let privacy = match epsilon {
        None => PrivacyConfig::non_private(),
        Some(e) => PrivacyConfig {
            epsilon: Some(e),
            delta: DELTA,
            clip: Some(CLIP),
            adjacency: Adjacency::Sample,
            sigma: None,
            tight_sensitivity: false,
        },
    };
    Ok(FLRunConfig {
        task: base_task(0),
        protocol: ProtocolConfig {
            name: Protocol::FedPower,
            r: RANK,
            k: crate::factorize::DEFAULT_ITERS,
            refactor_frequency: 1,
        },
        training: training(),
        privacy,
        bits_per_value: 32,
        seeds: vec![0, 1, 2, 3, 4],
        out_dir: None,
    })
}
