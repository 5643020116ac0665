//! Experiment configuration: JSON in, JSON echo out, every seed explicit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::addt::{AddtConfig, CgpoObjective, PerturbationMode};
use crate::attacks::AttackNorm;
use crate::diffusion::SamplerKind;
use crate::error::{Error, Result};
use crate::nets::PredictionKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub noise_std: f64,
    /// Grating amplitude; the robust share of the class evidence.
    pub signal_amp: f64,
    /// Checkerboard-texture amplitude; the thin high-frequency share.
    pub texture_amp: f64,
    /// Orientation jitter (radians); controls how much evidence the grating
    /// alone carries.
    pub orient_jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PurifySection {
    pub sampler: SamplerKind,
    /// Diffusion depth; `null` means `round(0.1 * t_max)`.
    pub t_star: Option<usize>,
    pub nfe: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub norm: AttackNorm,
    pub radius: f64,
    pub step_size: f64,
    pub steps: usize,
    pub eot_samples: usize,
    /// EoT samples over the unknown draws in partial-knowledge DW attacks.
    pub dw_eot_samples: usize,
    pub semi_k: usize,
    pub seed: u64,
    #[serde(default)]
    pub random_start: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub batch_size: usize,
    pub classifier_epochs: usize,
    pub diffusion_epochs: usize,
    pub lr_classifier: f64,
    pub lr_denoiser: f64,
    pub denoiser_hidden: usize,
    pub denoiser_prediction: PredictionKind,
    pub classifier_hidden: usize,
    pub time_embed_dim: usize,
    /// Probability of drawing the training timestep from `1..=t_star`
    /// instead of the full range, emphasizing the depths purification uses.
    pub t_bias: f64,
    /// Final-epoch diffusion loss must drop below this when set.
    pub diffusion_loss_threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AddtSection {
    pub lambda_unit: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub cgpo_steps: usize,
    pub perturbation_mode: PerturbationMode,
    pub objective: CgpoObjective,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub seed: u64,
    pub workers: usize,
    /// Repeats of the worst-of-k estimator when used.
    pub repeated_k: usize,
    /// Samples used by the analysis runner (EoT sweep, landscape).
    pub analysis_samples: usize,
    pub landscape_samples: usize,
    pub landscape_extent: f64,
    pub landscape_resolution: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub precision: Precision,
    pub dataset: DatasetSection,
    pub schedule: ScheduleSection,
    pub purify: PurifySection,
    pub attack: AttackSection,
    pub train: TrainSection,
    pub addt: AddtSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    /// Desk-scale defaults: 16x16 grayscale, 4 classes, T = 100 with the
    /// standard beta constants rescaled for the shorter chain, t* = 10.
    pub fn toy_default() -> Self {
        ExperimentConfig {
            precision: Precision::F32,
            dataset: DatasetSection {
                seed: 101,
                n_train: 512,
                n_eval: 128,
                image_size: 16,
                num_classes: 4,
                noise_std: 0.03,
                signal_amp: 0.25,
                texture_amp: 0.04,
                orient_jitter: 0.28,
            },
            schedule: ScheduleSection {
                t_max: 100,
                beta_start: 1e-3,
                beta_end: 0.2,
            },
            purify: PurifySection {
                sampler: SamplerKind::Ddpm,
                t_star: None,
                nfe: 10,
            },
            attack: AttackSection {
                norm: AttackNorm::Linf,
                radius: 8.0 / 255.0,
                step_size: 2.0 / 255.0,
                steps: 20,
                eot_samples: 10,
                dw_eot_samples: 1,
                semi_k: 8,
                seed: 303,
                random_start: false,
            },
            train: TrainSection {
                seed: 202,
                batch_size: 64,
                classifier_epochs: 60,
                diffusion_epochs: 300,
                lr_classifier: 1e-3,
                lr_denoiser: 1e-3,
                denoiser_hidden: 128,
                denoiser_prediction: PredictionKind::X0,
                classifier_hidden: 64,
                time_embed_dim: 16,
                t_bias: 0.5,
                diffusion_loss_threshold: None,
            },
            addt: AddtSection {
                lambda_unit: 0.03,
                lambda_min: 0.0,
                lambda_max: 0.3,
                cgpo_steps: 5,
                perturbation_mode: PerturbationMode::Rbgm,
                objective: CgpoObjective::ClassifierCe,
                epochs: 40,
                lr: 1e-3,
                seed: 404,
            },
            eval: EvalSection {
                seed: 505,
                workers: 4,
                repeated_k: 20,
                analysis_samples: 32,
                landscape_samples: 8,
                landscape_extent: 1.5,
                landscape_resolution: 11,
            },
        }
    }

    pub fn t_star(&self) -> usize {
        self.purify
            .t_star
            .unwrap_or_else(|| crate::diffusion::PurifyConfig::default_t_star(self.schedule.t_max))
    }

    pub fn image_dim(&self) -> usize {
        self.dataset.image_size * self.dataset.image_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.n_train == 0 || self.dataset.n_eval == 0 {
            return Err(Error::config("dataset splits must be non-empty"));
        }
        if self.eval.workers == 0 {
            return Err(Error::config("worker count must be >= 1"));
        }
        if self.attack.semi_k == 0 {
            return Err(Error::config("semi_k must be >= 1"));
        }
        self.addt_config().validate()?;
        Ok(())
    }

    pub fn addt_config(&self) -> AddtConfig {
        AddtConfig {
            lambda_unit: self.addt.lambda_unit,
            lambda_min: self.addt.lambda_min,
            lambda_max: self.addt.lambda_max,
            cgpo_steps: self.addt.cgpo_steps,
            perturbation_mode: self.addt.perturbation_mode,
            objective: self.addt.objective,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_pretty())?;
        Ok(())
    }
}
