//! The pipeline configuration: one JSON document whose sections mirror the
//! library's per-module settings. Every section and field is optional.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use tesqdt::calibration::CalibrationConfig;
use tesqdt::metrics::{Perturbations, DEFAULT_SPLIT_M};
use tesqdt::{DetectorPhysicalConfig, EstimationConfig, Probe, ProbeEnsemble, ReconstructionConfig};

use crate::error::{CliError, CliResult};

pub const DEFAULT_PULSES: u64 = 100_000;
pub const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    /// Photon number separating the well-probed columns from the rest.
    pub split_m: usize,
    /// Linearity holds when `F_m` reaches this for every `m <= split_m`.
    pub fidelity_threshold: f64,
    pub perturbations: Perturbations,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig { split_m: DEFAULT_SPLIT_M, fidelity_threshold: 0.99, perturbations: Perturbations::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub detector: DetectorPhysicalConfig,
    pub probes: Vec<Probe>,
    pub calibration: CalibrationConfig,
    pub reconstruction: ReconstructionConfig,
    pub estimation: EstimationConfig,
    pub validation: ValidationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: DEFAULT_SEED,
            detector: DetectorPhysicalConfig::default(),
            probes: ProbeEnsemble::paper_default(DEFAULT_PULSES).probes().to_vec(),
            calibration: CalibrationConfig::default(),
            reconstruction: ReconstructionConfig::default(),
            estimation: EstimationConfig::default(),
            validation: ValidationConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::parse(&text).map_err(|e| match e {
                    CliError::Schema(msg) => CliError::Schema(format!("{}: {msg}", p.display())),
                    other => other,
                })
            }
        }
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| CliError::schema(e.to_string()))?;
        // Probes are checked one by one first so that an error names the
        // offending probe rather than an array position.
        if let Some(probes) = value.get("probes") {
            let list = probes.as_array().ok_or_else(|| CliError::schema("`probes` must be an array"))?;
            for (i, raw) in list.iter().enumerate() {
                if let Err(e) = Probe::deserialize(raw) {
                    let who = match raw.get("id").and_then(Value::as_u64) {
                        Some(id) => format!("probe {id}"),
                        None => format!("probe #{i} (no id)"),
                    };
                    return Err(CliError::schema(format!("{who}: {e}")));
                }
            }
        }
        let cfg: PipelineConfig = serde_json::from_value(value).map_err(|e| CliError::schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.detector.validate()?;
        self.ensemble()?;
        self.calibration.validate()?;
        self.reconstruction.validate()?;
        self.estimation.validate()?;
        self.validation.perturbations.grid()?;
        if !(self.validation.fidelity_threshold > 0.0 && self.validation.fidelity_threshold <= 1.0) {
            return Err(CliError::schema("validation.fidelity_threshold must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn ensemble(&self) -> CliResult<ProbeEnsemble> {
        Ok(ProbeEnsemble::new(self.probes.clone())?)
    }

    pub fn n_outcomes(&self) -> usize {
        self.reconstruction.n_outcomes
    }

    /// SHA-256 of the canonical serialization (defaults filled in), so
    /// equivalent documents hash alike.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(PipelineConfig::parse("{}").unwrap(), PipelineConfig::default());
        assert_eq!(PipelineConfig::default().probes.len(), 20);
    }

    #[test]
    fn missing_mean_photons_names_the_probe() {
        let text = r#"{"probes": [{"id": 0, "mean_photons": 5.0, "n_pulses": 10},
                                  {"id": 7, "n_pulses": 10}]}"#;
        let err = PipelineConfig::parse(text).unwrap_err().to_string();
        assert!(err.contains("probe 7") && err.contains("mean_photons"), "{err}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(PipelineConfig::parse(r#"{"detector": {"etaa": 0.1}}"#).is_err());
        assert!(PipelineConfig::parse(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn hash_ignores_formatting_but_not_content() {
        let a = PipelineConfig::parse(r#"{"seed": 3}"#).unwrap();
        let b = PipelineConfig::parse("{\n  \"seed\" : 3\n}").unwrap();
        let c = PipelineConfig::parse(r#"{"seed": 4}"#).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }
}
