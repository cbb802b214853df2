//! Experiment configuration: one JSON document drives synthesis,
//! pretraining, and adaptation. Every field has a desk-scale default, so a
//! partial (or absent) config file works.

use pluto_core::engine::EngineConfig;
use pluto_core::optim::{OptAlgo, OptimizerSpec};
use pluto_core::pet::ModuleKind;
use pluto_core::selector::SelectorConfig;
use pluto_core::synth::{Corruption, DomainSpec};
use pluto_core::vit::VitConfig;
use serde::{Deserialize, Serialize};

/// Optimization schedules and data sizes for the pretraining stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub backbone: OptimizerSpec,
    pub vpt: OptimizerSpec,
    pub adapter: OptimizerSpec,
    pub selector_lr: f64,
    pub selector_epochs: usize,
    pub selector_fine_lr: f64,
    pub selector_fine_epochs: usize,
    pub selector_batch: usize,
    pub base_dataset_size: usize,
    pub train_fraction: f64,
    pub target_stream_len: usize,
    pub forgetting_samples_per_domain: usize,
    /// LayerNorm step size used by both pipelines in the forgetting
    /// comparison (stronger pressure than the stationary default).
    pub forgetting_ln_lr: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            backbone: OptimizerSpec {
                algo: OptAlgo::AdamW,
                lr: 1.5e-3,
                weight_decay: 1e-4,
                epochs: 30,
                batch_size: 16,
                warmup_epochs: 3,
            },
            vpt: OptimizerSpec {
                algo: OptAlgo::Sgd { momentum: 0.9 },
                lr: 0.25,
                weight_decay: 0.0,
                epochs: 20,
                batch_size: 16,
                warmup_epochs: 2,
            },
            adapter: OptimizerSpec {
                algo: OptAlgo::AdamW,
                lr: 2e-3,
                weight_decay: 0.0,
                epochs: 20,
                batch_size: 16,
                warmup_epochs: 2,
            },
            selector_lr: 0.1,
            selector_epochs: 30,
            selector_fine_lr: 0.02,
            selector_fine_epochs: 15,
            selector_batch: 32,
            base_dataset_size: 600,
            train_fraction: 0.8,
            target_stream_len: 768,
            forgetting_samples_per_domain: 192,
            forgetting_ln_lr: 5e-3,
        }
    }
}

/// What the unlabeled test stream is drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum TargetSpec {
    Domain { spec: DomainSpec },
    Mixture {
        domains: Vec<DomainSpec>,
        lambdas: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub vit: VitConfig,
    pub selector: SelectorConfig,
    pub engine: EngineConfig,
    pub training: TrainingConfig,
    pub module_kind: ModuleKind,
    pub vpt_prompts: usize,
    pub adapter_bottleneck: usize,
    pub sources: Vec<DomainSpec>,
    pub target: TargetSpec,
    /// Continual stream used by the forgetting comparison.
    pub forgetting_domains: Vec<DomainSpec>,
    pub seeds: Vec<u64>,
    pub output: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            vit: VitConfig::desk_default(),
            selector: SelectorConfig::desk_default(),
            engine: EngineConfig::desk_default(),
            training: TrainingConfig::default(),
            module_kind: ModuleKind::Vpt,
            vpt_prompts: 8,
            adapter_bottleneck: 8,
            sources: vec![
                DomainSpec::new(Corruption::GaussianNoise, 3, 0xD0),
                DomainSpec::new(Corruption::Blur, 3, 0xD0),
                DomainSpec::new(Corruption::Contrast, 3, 0xD0),
                DomainSpec::new(Corruption::Brightness, 3, 0xD0),
            ],
            target: TargetSpec::Domain {
                spec: DomainSpec::new(Corruption::Pixelate, 3, 0xA1),
            },
            forgetting_domains: vec![
                DomainSpec::new(Corruption::Pixelate, 3, 0xA1),
                DomainSpec::new(Corruption::Rotation, 4, 0xA2),
                DomainSpec::new(Corruption::ShotNoise, 4, 0xA3),
                DomainSpec::new(Corruption::GaussianNoise, 5, 0xA4),
                DomainSpec::new(Corruption::Contrast, 5, 0xA5),
            ],
            seeds: vec![11, 12, 13],
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.vit.validate().map_err(|e| e.to_string())?;
        self.selector.validate().map_err(|e| e.to_string())?;
        self.engine.sam.validate().map_err(|e| e.to_string())?;
        if self.sources.is_empty() {
            return Err("at least one source domain required".to_string());
        }
        if self.engine.top_m < 1 || self.engine.top_m > self.sources.len() {
            return Err(format!(
                "top_m {} out of range 1..={}",
                self.engine.top_m,
                self.sources.len()
            ));
        }
        if self.seeds.is_empty() {
            return Err("at least one seed required".to_string());
        }
        if self.selector.embed_dim != self.vit.embed_dim
            || self.selector.logit_dim != self.vit.classes
        {
            return Err("selector dims must match the backbone".to_string());
        }
        if !(0.0..=1.0).contains(&self.training.train_fraction) {
            return Err("train_fraction outside [0, 1]".to_string());
        }
        if let TargetSpec::Mixture { domains, lambdas } = &self.target {
            if domains.len() != lambdas.len() {
                return Err("mixture domains and lambdas must align".to_string());
            }
        }
        Ok(())
    }

    pub fn from_json(raw: &str) -> Result<ExperimentConfig, String> {
        let cfg: ExperimentConfig =
            serde_json::from_str(raw).map_err(|e| format!("config parse error: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrips_through_json() {
        let cfg = ExperimentConfig::default();
        let emitted = cfg.to_json();
        let parsed = ExperimentConfig::from_json(&emitted).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"seeds": [7]}"#).unwrap();
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.vit, VitConfig::desk_default());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"seeds": []}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"engine": {"top_m": 9, "batch_size": 32, "shots": 16, "selector_lr": 0.02, "selector_steps": 1, "sam": {"rho": 0.05, "entropy_threshold_factor": 0.4, "lr": 0.001}, "update_all_selected": false}}"#).is_err());
    }
}
