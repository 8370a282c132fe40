//! Pipeline configuration: one JSON document, with command-line flags
//! taking precedence over file values. The only secret (the API key) lives
//! in an environment variable, never in the config or any manifest.

use crate::error::{CliError, ErrorKind};
use esd_distill::distill::DatasetVariant;
use esd_distill::generate::{
    CandidateGenerator, GenerationConfig, HttpGenerator, HttpGeneratorConfig, MockGenerator,
    MockGeneratorSpec,
};
use esd_distill::utility::UtilityKind;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

/// Root configuration document.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub backend: BackendKind,
    pub generation: GenerationConfig,
    pub mock: MockGeneratorSpec,
    pub http: Option<HttpGeneratorConfig>,
    pub utility: UtilityKind,
    pub variant: DatasetVariant,
    /// Total iterations T.
    pub iterations: u32,
    pub master_seed: u64,
    pub segments: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Mock,
            generation: GenerationConfig::default(),
            mock: MockGeneratorSpec::default(),
            http: None,
            utility: UtilityKind::SoftF1,
            variant: DatasetVariant::Sft,
            iterations: 3,
            master_seed: 0,
            segments: None,
            output_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError {
            kind: ErrorKind::Io,
            message: format!("{}: {e}", path.display()),
        })?;
        serde_json::from_str(&text).map_err(|e| CliError {
            kind: ErrorKind::Validation,
            message: format!("{}: invalid config: {e}", path.display()),
        })
    }

    /// Backend instance for this config. The mock is rebuilt from the
    /// current spec each call, so the loop can adapt it between iterations.
    pub fn build_generator(&self) -> Result<Box<dyn CandidateGenerator>, CliError> {
        match self.backend {
            BackendKind::Mock => Ok(Box::new(MockGenerator::new(self.mock.clone())?)),
            BackendKind::Http => {
                let http = self.http.clone().ok_or_else(|| CliError {
                    kind: ErrorKind::Validation,
                    message: "backend is http but the config has no `http` section".into(),
                })?;
                Ok(Box::new(HttpGenerator::new(http)?))
            }
        }
    }
}
