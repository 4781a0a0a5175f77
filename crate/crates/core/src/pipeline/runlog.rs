use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_f1: Option<f64>,
    pub seconds: f64,
}

/// Append-only record of one run. Everything except `seconds` and
/// `wall_clock_s` is a deterministic function of config, seed and data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub epochs: Vec<EpochRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_epoch: Option<usize>,
    #[serde(default)]
    pub warnings: Vec<String>,
    pub wall_clock_s: f64,
}

impl RunLog {
    pub fn new<C: Serialize>(stage: &str, seed: u64, config: &C) -> Self {
        let config = serde_json::to_value(config).expect("config serializes");
        RunLog {
            stage: stage.to_string(),
            seed,
            config_hash: config_hash(&config),
            config,
            epochs: Vec::new(),
            selected_epoch: None,
            warnings: Vec::new(),
            wall_clock_s: 0.0,
        }
    }

    pub fn push(&mut self, record: EpochRecord) {
        self.wall_clock_s += record.seconds;
        self.epochs.push(record);
    }

    /// Copy with every timing zeroed, for embedding in artifacts that must
    /// hash identically across runs.
    pub fn without_timings(&self) -> RunLog {
        let mut log = self.clone();
        log.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        log.wall_clock_s = 0.0;
        log
    }

    /// Logged numbers without timings, for bit-exact comparisons.
    pub fn metrics(&self) -> Vec<(usize, u64, Option<u64>, Option<u64>, Option<u64>)> {
        self.epochs
            .iter()
            .map(|e| {
                (
                    e.epoch,
                    e.train_loss.to_bits(),
                    e.val_loss.map(f64::to_bits),
                    e.val_auc.map(f64::to_bits),
                    e.val_f1.map(f64::to_bits),
                )
            })
            .collect()
    }
}

/// Lower-case hex SHA-256 of the compact JSON encoding.
pub fn config_hash(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("json value serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_config() {
        let a = RunLog::new("pretrain", 1, &serde_json::json!({"epochs": 3}));
        let b = RunLog::new("pretrain", 1, &serde_json::json!({"epochs": 3}));
        let c = RunLog::new("pretrain", 1, &serde_json::json!({"epochs": 4}));
        assert_eq!(a.config_hash, b.config_hash);
        assert_ne!(a.config_hash, c.config_hash);
        assert_eq!(a.config_hash.len(), 64);
    }
}
