//! Single-file JSON configuration driving the whole experiment; two runs
//! that differ in one field (dataset difficulty, optimizer) are two configs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use vulnplane::attack::VarianceMode;
use vulnplane::data::DatasetSpec;
use vulnplane::optim::OptimizerConfig;
use vulnplane::train::ModelConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMethod {
    Lira,
    Shokri,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub variance_mode: VarianceMode,
    pub threshold: f64,
    pub leave_one_out: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            method: AttackMethod::Lira,
            variance_mode: VarianceMode::Global,
            threshold: 0.0,
            leave_one_out: true,
        }
    }
}

impl AttackConfig {
    pub fn lira(&self) -> vulnplane::attack::LiraConfig {
        vulnplane::attack::LiraConfig {
            variance_mode: self.variance_mode,
            threshold: self.threshold,
            leave_one_out: self.leave_one_out,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbscanConfig {
    pub eps: f64,
    pub min_pts: usize,
}

impl Default for DbscanConfig {
    fn default() -> Self {
        DbscanConfig { eps: 0.02, min_pts: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[derive(Default)]
pub enum BudgetRuleConfig {
    #[default]
    VulnerableCount,
    Fraction(f64),
}


impl BudgetRuleConfig {
    pub fn to_rule(self) -> vulnplane::dynamics::BudgetRule {
        match self {
            BudgetRuleConfig::VulnerableCount => vulnplane::dynamics::BudgetRule::VulnerableCount,
            BudgetRuleConfig::Fraction(q) => vulnplane::dynamics::BudgetRule::Fraction(q),
        }
    }
}

fn default_batch_size() -> usize {
    32
}
fn default_grid_resolution() -> u32 {
    3
}
fn default_entropy_resolution() -> u32 {
    30
}
fn default_influence_damping() -> f64 {
    0.01
}
fn default_travel_quantile() -> f64 {
    0.1
}

/// Everything one experiment needs, in dependency order of the stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: u32,
    pub checkpoint_interval: u32,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub n_shadow: usize,
    #[serde(default)]
    pub attack: AttackConfig,
    /// Transition analysis is fixed at 3; kept explicit in the config.
    #[serde(default = "default_grid_resolution")]
    pub grid_resolution: u32,
    #[serde(default = "default_entropy_resolution")]
    pub entropy_resolution: u32,
    #[serde(default)]
    pub dbscan: DbscanConfig,
    #[serde(default)]
    pub theta_vuln: f64,
    #[serde(default = "default_influence_damping")]
    pub influence_damping: f64,
    #[serde(default = "default_travel_quantile")]
    pub travel_quantile: f64,
    #[serde(default)]
    pub budget_rule: BudgetRuleConfig,
    #[serde(default)]
    pub emit_binary_scores: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("cannot parse {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg_err = |m: String| CliError::Config(m);
        self.dataset
            .validate()
            .map_err(|e| cfg_err(format!("dataset: {e}")))?;
        self.optimizer
            .validate()
            .map_err(|e| cfg_err(format!("optimizer: {e}")))?;
        if self.epochs == 0 || self.checkpoint_interval == 0 {
            return Err(cfg_err("epochs and checkpoint_interval must be positive".into()));
        }
        if !self.epochs.is_multiple_of(self.checkpoint_interval) {
            return Err(cfg_err(format!(
                "checkpoint_interval {} does not divide epochs {}",
                self.checkpoint_interval, self.epochs
            )));
        }
        if self.n_shadow < 4 {
            return Err(cfg_err("n_shadow must be at least 4".into()));
        }
        if self.grid_resolution != 3 {
            return Err(cfg_err(
                "grid_resolution is fixed at 3 for transition analysis".into(),
            ));
        }
        if self.entropy_resolution < 2 {
            return Err(cfg_err("entropy_resolution must be at least 2".into()));
        }
        if self.dbscan.eps <= 0.0 || self.dbscan.min_pts == 0 {
            return Err(cfg_err("dbscan needs eps > 0 and min_pts >= 1".into()));
        }
        if self.influence_damping <= 0.0 {
            return Err(cfg_err("influence_damping must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.travel_quantile) || self.travel_quantile == 0.0 {
            return Err(cfg_err("travel_quantile must be in (0, 0.5)".into()));
        }
        if let BudgetRuleConfig::Fraction(q) = self.budget_rule {
            if !(0.0..=1.0).contains(&q) {
                return Err(cfg_err("budget fraction must be in [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Canonical content hash: the config reserialized with fixed field
    /// order, so formatting differences in the source file do not matter.
    pub fn sha256(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canon.as_bytes()))
    }

    pub fn train_settings(&self) -> vulnplane::train::TrainSettings {
        vulnplane::train::TrainSettings {
            epochs: self.epochs,
            checkpoint_interval: self.checkpoint_interval,
            batch_size: self.batch_size,
            master_seed: vulnplane::data::mix_seed(self.seed, 0x7472_6169_6e00),
        }
    }

    pub fn plan_seed(&self) -> u64 {
        vulnplane::data::mix_seed(self.seed, 0x706c_616e_0000)
    }

    pub fn summary_config(&self) -> vulnplane::dynamics::SummaryConfig {
        vulnplane::dynamics::SummaryConfig {
            entropy_resolution: self.entropy_resolution,
            dbscan_eps: self.dbscan.eps,
            dbscan_min_pts: self.dbscan.min_pts,
            theta_vuln: self.theta_vuln,
        }
    }

    pub fn hardness_config(&self) -> vulnplane::hardness::HardnessConfig {
        vulnplane::hardness::HardnessConfig {
            influence: vulnplane::hardness::InfluenceOptions {
                damping: self.influence_damping,
                ..Default::default()
            },
            uncertainty_epoch: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use vulnplane::data::DatasetKind;

    pub fn tiny_config() -> PipelineConfig {
        PipelineConfig {
            seed: 7,
            dataset: DatasetSpec {
                kind: DatasetKind::GaussianBlobs,
                n_classes: 2,
                n_samples: 40,
                dim: 4,
                class_separation: 2.0,
                label_noise_rate: 0.0,
                seed: 3,
                csv_path: None,
                idx_images: None,
                idx_labels: None,
            },
            model: ModelConfig { hidden_widths: vec![8] },
            optimizer: OptimizerConfig::adamw(1e-3, 0.0),
            epochs: 4,
            checkpoint_interval: 2,
            batch_size: 16,
            n_shadow: 4,
            attack: AttackConfig::default(),
            grid_resolution: 3,
            entropy_resolution: 30,
            dbscan: DbscanConfig::default(),
            theta_vuln: 0.0,
            influence_damping: 0.01,
            travel_quantile: 0.1,
            budget_rule: BudgetRuleConfig::default(),
            emit_binary_scores: false,
            out_dir: None,
        }
    }

    #[test]
    fn config_roundtrips_losslessly() {
        let cfg = tiny_config();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.sha256(), back.sha256());
    }

    #[test]
    fn defaults_fill_in() {
        let minimal = serde_json::json!({
            "seed": 1,
            "dataset": {
                "kind": "gaussian-blobs", "n_classes": 2, "n_samples": 20,
                "dim": 4, "class_separation": 1.0, "label_noise_rate": 0.0, "seed": 2
            },
            "model": {"hidden_widths": [8]},
            "optimizer": {"kind": "adamw", "lr": 0.001},
            "epochs": 4,
            "checkpoint_interval": 2,
            "n_shadow": 4
        });
        let cfg: PipelineConfig = serde_json::from_value(minimal).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.entropy_resolution, 30);
        assert_eq!(cfg.attack.method, AttackMethod::Lira);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = tiny_config();
        cfg.checkpoint_interval = 3;
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_config();
        cfg.grid_resolution = 4;
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_config();
        cfg.n_shadow = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = tiny_config();
        let mut b = tiny_config();
        assert_eq!(a.sha256(), b.sha256());
        b.epochs = 8;
        assert_ne!(a.sha256(), b.sha256());
    }
}
