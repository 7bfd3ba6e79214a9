//! Three-way coupling comparison: optimal transport, cross-attention, none.
//!
//! All three share one fitted model and identical member seeds; only the
//! operator inside the coupling block changes.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::coupling::CouplingVariant;
use crate::error::{Result, S2skError};
use crate::grid::FieldSet;
use crate::harness::pipeline::ReferenceModel;
use crate::rollout::RolloutConfig;
use crate::verify::{channel_ensemble, channel_weights, crps_field, CrpsEstimator};

pub const VARIANTS: [CouplingVariant; 3] = [CouplingVariant::OptimalTransport, CouplingVariant::CrossAttention, CouplingVariant::None];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub n_members: usize,
    /// Inclusive lead-day window scored, days 22 to 28 by default.
    pub first_lead: usize,
    pub last_lead: usize,
    pub variables: Vec<String>,
    pub master_seed: u64,
    pub estimator: CrpsEstimator,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            n_members: 11,
            first_lead: 22,
            last_lead: 28,
            variables: vec!["T2M".into(), "Z500".into()],
            master_seed: 2024,
            estimator: CrpsEstimator::Standard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: CouplingVariant,
    pub variable: String,
    pub crps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub init_dates: Vec<NaiveDate>,
    pub config: AblationConfig,
}

impl AblationReport {
    pub fn get(&self, variant: CouplingVariant, variable: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.variable == variable)
            .map(|r| r.crps)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["variant", "variable", "first_lead", "last_lead", "crps"])?;
        for r in &self.rows {
            w.write_record([
                r.variant.to_string(),
                r.variable.clone(),
                self.config.first_lead.to_string(),
                self.config.last_lead.to_string(),
                format!("{:.10e}", r.crps),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean CRPS over the lead window and all initializations. `series` is a
/// consecutive daily truth series; each `init` index `i` conditions on days
/// `i - 1` and `i` and is scored against days `i + first_lead ..= i + last_lead`.
pub fn coupling_ablation(model: &ReferenceModel, series: &[FieldSet], inits: &[usize], config: &AblationConfig) -> Result<AblationReport> {
    if config.first_lead == 0 || config.first_lead > config.last_lead {
        return Err(S2skError::invalid("lead window must satisfy 1 <= first <= last"));
    }
    if inits.is_empty() {
        return Err(S2skError::invalid("no initializations"));
    }
    for &i in inits {
        if i == 0 || i + config.last_lead >= series.len() {
            return Err(S2skError::invalid(format!("initialization {i} lacks history or verifying truth")));
        }
    }
    let layout = &series[0].channels;
    let idx: Vec<usize> = config
        .variables
        .iter()
        .map(|v| {
            layout
                .iter()
                .position(|c| &c.name == v)
                .ok_or_else(|| S2skError::invalid(format!("unknown variable {v}")))
        })
        .collect::<Result<_>>()?;
    let weights = channel_weights(&series[0].grid, layout)?;
    let rc = RolloutConfig {
        horizon_days: config.last_lead,
        n_members: config.n_members,
        n_infer: model.config.n_infer,
        master_seed: config.master_seed,
    };
    let mut rows = Vec::new();
    for variant in VARIANTS {
        let m = model.with_variant(variant);
        let mut sums = vec![0.0; idx.len()];
        let mut count = 0usize;
        for &i in inits {
            let fc = m.rollout(&series[i - 1], &series[i], &rc)?;
            if !fc.failures.is_empty() {
                return Err(S2skError::invalid(format!("{} member(s) failed for {variant}", fc.failures.len())));
            }
            for lead in config.first_lead..=config.last_lead {
                let members = fc.lead(lead)?;
                let truth = &series[i + lead];
                for (k, &c) in idx.iter().enumerate() {
                    let ens = channel_ensemble(&members, c);
                    sums[k] += crps_field(ens.view(), truth.values.index_axis(ndarray::Axis(0), c), &weights[c], config.estimator)?;
                }
                count += 1;
            }
        }
        for (k, v) in config.variables.iter().enumerate() {
            rows.push(AblationRow {
                variant,
                variable: v.clone(),
                crps: sums[k] / count as f64,
            });
        }
    }
    Ok(AblationReport {
        rows,
        init_dates: inits.iter().map(|&i| series[i].valid_time).collect(),
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::pipeline::{fit_reference_model, ModelConfig};
    use crate::harness::synth::{generate_synthetic, SynthConfig};

    #[test]
    fn three_way_report_is_deterministic() {
        let xs = generate_synthetic(&SynthConfig::desk(1), 80).unwrap();
        let mut mc = ModelConfig::desk(2);
        mc.codebook_size = 64;
        let model = fit_reference_model(&xs[..60], &mc).unwrap();
        let cfg = AblationConfig {
            n_members: 3,
            first_lead: 3,
            last_lead: 5,
            ..Default::default()
        };
        let a = coupling_ablation(&model, &xs, &[62, 70], &cfg).unwrap();
        let b = coupling_ablation(&model, &xs, &[62, 70], &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 6);
        for v in VARIANTS {
            assert!(a.get(v, "T2M").unwrap() > 0.0);
        }
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("variant,variable,first_lead,last_lead,crps\n"));
        assert!(text.contains("cross_attention,Z500,3,5,"));
    }

    #[test]
    fn rejects_short_series() {
        let xs = generate_synthetic(&SynthConfig::desk(1), 30).unwrap();
        let mut mc = ModelConfig::desk(2);
        mc.codebook_size = 16;
        let model = fit_reference_model(&xs, &mc).unwrap();
        assert!(coupling_ablation(&model, &xs, &[10], &AblationConfig::default()).is_err());
        assert!(coupling_ablation(&model, &xs, &[0], &AblationConfig { last_lead: 3, first_lead: 1, ..Default::default() }).is_err());
    }
}
