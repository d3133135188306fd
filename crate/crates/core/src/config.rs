//! TOML engine configuration.
//!
//! ```toml
//! [planner]
//! max_stages = 6
//!
//! [run]
//! answer_extraction = "last_organize"
//!
//! [providers.designer]
//! kind = "http_chat"
//! endpoint = "http://localhost:8000/v1/chat/completions"
//! model = "designer-7b"
//! credential_env = "DESIGNER_API_KEY"
//! price = { prompt = 0.1, completion = 0.3 }
//!
//! [providers.executor]
//! kind = "scripted"
//! responses = [{ text = "4" }]
//!
//! [sandbox]
//! command = ["python3", "-m", "sandbox_runner"]
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{AnswerExtraction, NodeFailurePolicy, RunConfig, RunProviders};
use crate::planner::PlannerConfig;
use crate::providers::{Price, ProviderError, ProviderRef, Role, Sampling};
use crate::sandbox::SandboxConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderSet {
    pub designer: ProviderRef,
    pub executor: ProviderRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summarizer: Option<ProviderRef>,
}

impl ProviderSet {
    /// Fresh provider handles; scripted queues start from the top.
    pub fn build(&self) -> Result<RunProviders, ProviderError> {
        Ok(RunProviders {
            designer: self.designer.build(Role::Designer)?,
            executor: self.executor.build(Role::Executor)?,
            summarizer: self.summarizer.as_ref().map(|s| s.build(Role::Summarizer)).transpose()?,
        })
    }

    /// Configured prices keyed by model name.
    pub fn prices(&self) -> BTreeMap<String, Price> {
        [Some(&self.designer), Some(&self.executor), self.summarizer.as_ref()]
            .into_iter()
            .flatten()
            .filter_map(|p| p.price.map(|price| (p.model().to_string(), price)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub answer_extraction: AnswerExtraction,
    pub node_failure_policy: NodeFailurePolicy,
    pub sampling: Sampling,
    pub policy: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default)]
    pub run: RunSection,
    pub providers: ProviderSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sandbox: Option<SandboxConfig>,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl EngineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.planner.validate().map_err(ConfigError::Invalid)?;
        for p in [Some(&self.providers.designer), Some(&self.providers.executor), self.providers.summarizer.as_ref()]
            .into_iter()
            .flatten()
        {
            p.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.run.sampling.temperature < 0.0 || self.run.sampling.max_tokens == 0 {
            return Err(ConfigError::Invalid("temperature must be >= 0 and max_tokens > 0".into()));
        }
        Ok(())
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            planner: self.planner.clone(),
            answer_extraction: self.run.answer_extraction,
            node_failure_policy: self.run.node_failure_policy,
            sampling: self.run.sampling.clone(),
            sandbox: self.sandbox.clone(),
            policy: self.run.policy.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::ProviderKind;

    const SAMPLE: &str = r#"
[planner]
max_stages = 4

[run]
node_failure_policy = "abort_stage"
sampling = { temperature = 0.5, max_tokens = 512 }

[providers.designer]
kind = "http_chat"
endpoint = "http://localhost:9/v1/chat/completions"
model = "d"
credential_env = "D_KEY"
price = { prompt = 1.0, completion = 3.0 }

[providers.executor]
kind = "scripted"
model = "e"
responses = [{ text = "4", prompt_tokens = 10, completion_tokens = 2 }]
"#;

    #[test]
    fn parses_documented_layout() {
        let cfg = EngineConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(cfg.planner.max_stages, 4);
        assert_eq!(cfg.planner.parse_retries, 2);
        assert_eq!(cfg.planner.summary_char_budget, 4000);
        assert_eq!(cfg.providers.designer.kind, ProviderKind::HttpChat);
        assert_eq!(cfg.providers.executor.responses[0].prompt_tokens, 10);
        let run = cfg.run_config();
        assert_eq!(run.node_failure_policy, NodeFailurePolicy::AbortStage);
        assert_eq!(run.sampling.max_tokens, 512);
        assert_eq!(cfg.providers.prices().len(), 1);
    }

    #[test]
    fn http_without_endpoint_is_invalid() {
        let text = SAMPLE.replace("endpoint = \"http://localhost:9/v1/chat/completions\"\n", "");
        assert!(matches!(EngineConfig::from_toml(&text), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn zero_stage_budget_is_invalid() {
        let text = SAMPLE.replace("max_stages = 4", "max_stages = 0");
        assert!(EngineConfig::from_toml(&text).is_err());
    }

    #[test]
    fn missing_credential_fails_at_build() {
        let cfg = EngineConfig::from_toml(SAMPLE).unwrap();
        std::env::remove_var("D_KEY");
        assert!(matches!(cfg.providers.build(), Err(ProviderError::Auth(_))));
    }
}
