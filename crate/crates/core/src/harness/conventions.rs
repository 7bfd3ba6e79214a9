//! Every convention flag the pipelines depend on, gathered for run manifests.

use serde::{Deserialize, Serialize};

use crate::attribution::ShuffleScheme;
use crate::harness::pipeline::ModelConfig;
use crate::rollout::SEED_SCHEME;
use crate::verify::VerifyConventions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConventions {
    pub latitude_weights: String,
    pub calendar: String,
    pub ordering: String,
    pub ocean_only_channels: Vec<String>,
    pub masked_reductions: String,
    pub climatology_window_halfwidth_days: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqConventions {
    pub objective: String,
    pub commitment_term: bool,
    pub commitment_beta: f64,
    pub straight_through: bool,
    pub polar_row_merge: String,
    pub codebook_init: String,
    pub tie_rule: String,
    pub codebook_size: usize,
    pub atmosphere_dim: usize,
    pub boundary_dim: usize,
    pub patch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConventions {
    pub parameterization: String,
    pub epsilon_adapter_available: bool,
    pub training_noise: String,
    pub sampler: String,
    pub steps: usize,
    pub schedule: crate::diffusion::ScheduleKind,
    pub n_infer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingConventions {
    pub apply: String,
    pub variant: crate::coupling::CouplingVariant,
    pub marginals: crate::coupling::Marginals,
    pub sinkhorn: crate::coupling::SinkhornConfig,
    pub solver: String,
    pub cost: String,
    pub feature_extractors: String,
    pub cross_attention: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConventions {
    pub space: String,
    pub seed_scheme: String,
    pub failure_policy: String,
    pub reference_denoiser: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionConventions {
    pub shuffle_scheme: ShuffleScheme,
    pub shuffle_times: String,
    pub member_seeds: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConventions {
    pub tensor_files: String,
    pub reports: String,
    pub byte_order: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub grid: GridConventions,
    pub vq: VqConventions,
    pub diffusion: DiffusionConventions,
    pub coupling: CouplingConventions,
    pub rollout: RolloutConventions,
    pub verify: VerifyConventions,
    pub attribution: AttributionConventions,
    pub harness: HarnessConventions,
}

impl Conventions {
    pub fn new(model: &ModelConfig, verify: &VerifyConventions, shuffle: ShuffleScheme, clim_halfwidth: usize) -> Self {
        Conventions {
            grid: GridConventions {
                latitude_weights: "cos(latitude) normalized to mean 1 over valid cells".into(),
                calendar: "366 circular slots; non-leap years skip slot 60 (Feb 29, 1-based)".into(),
                ordering: "latitude north to south, longitude ascending from 0".into(),
                ocean_only_channels: crate::harness::inventory::OCEAN_ONLY.iter().map(|s| s.to_string()).collect(),
                masked_reductions: "masked cells excluded, weights renormalized".into(),
                climatology_window_halfwidth_days: clim_halfwidth,
            },
            vq: VqConventions {
                objective: "reconstruction + codebook, additive".into(),
                commitment_term: false,
                commitment_beta: crate::vq::COMMITMENT_BETA,
                straight_through: false,
                polar_row_merge: "two northernmost rows averaged when n_lat = k*patch + 1".into(),
                codebook_init: "randomly chosen encoded training sites".into(),
                tie_rule: "lowest index".into(),
                codebook_size: model.codebook_size,
                atmosphere_dim: model.atmosphere_dim,
                boundary_dim: model.boundary_dim,
                patch: model.patch,
            },
            diffusion: DiffusionConventions {
                parameterization: "direct prediction of the previous noisy state".into(),
                epsilon_adapter_available: true,
                training_noise: "target and input from one forward trajectory".into(),
                sampler: "strided DDPM ancestral".into(),
                steps: model.diffusion_steps,
                schedule: model.schedule,
                n_infer: model.n_infer,
            },
            coupling: CouplingConventions {
                apply: "target + gain * G_target * source @ plan^T".into(),
                variant: model.variant,
                marginals: model.marginals.clone(),
                sinkhorn: model.sinkhorn,
                solver: "log-domain Sinkhorn, row-marginal stopping rule".into(),
                cost: "1 - cosine similarity, range [0, 2]".into(),
                feature_extractors: "fixed seeded linear maps per sphere over stream and context".into(),
                cross_attention: "row softmax(F_t^T F_s / sqrt(d_f)) / G_target".into(),
            },
            rollout: RolloutConventions {
                space: "latent rollout, single decode per lead".into(),
                seed_scheme: SEED_SCHEME.into(),
                failure_policy: "isolate and report".into(),
                reference_denoiser: "damped persistence through the coupling block, exact Gaussian bridge".into(),
            },
            verify: verify.clone(),
            attribution: AttributionConventions {
                shuffle_scheme: shuffle,
                shuffle_times: "same permutation on both conditioning days".into(),
                member_seeds: "derive_seed(seed, member), shared by baseline and shuffled runs".into(),
            },
            harness: HarnessConventions {
                tensor_files: "one file per array, S2SK header plus JSON sidecar".into(),
                reports: "CSV with JSON sidecar".into(),
                byte_order: "little-endian, row-major".into(),
            },
        }
    }
}

impl Default for Conventions {
    fn default() -> Self {
        Conventions::new(&ModelConfig::desk(0), &VerifyConventions::default(), ShuffleScheme::default(), 15)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_section_serializes() {
        let v = serde_json::to_value(Conventions::default()).unwrap();
        for key in ["grid", "vq", "diffusion", "coupling", "rollout", "verify", "attribution", "harness"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["verify"]["crps_estimator"], "standard");
        assert_eq!(v["coupling"]["variant"], "optimal_transport");
        let back: Conventions = serde_json::from_value(v).unwrap();
        assert_eq!(back, Conventions::default());
    }
}
