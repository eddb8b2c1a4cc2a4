//! Black-box services: the deterministic synthetic marketplace and an
//! OpenAI-compatible HTTP client.

mod cache;
mod http;
mod mock;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use cache::{invocation_key, InvocationCache};
pub use http::{HttpEndpoint, HttpService, RetryPolicy};
pub use mock::{synth_marketplace, MarketplaceConfig, MockMarketplace, MockService};

use crate::error::{Error, Result};
use crate::records::{ContextSpec, InvocationRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ServiceKind {
    Mock,
    Http,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub generation: bool,
    /// Whether the service can score the input tokens (needed for PPL).
    pub input_scoring: bool,
    pub top_k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceDescriptor {
    pub service_id: String,
    pub kind: ServiceKind,
    pub capabilities: Capabilities,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<HttpEndpoint>,
}

impl ServiceDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.capabilities.top_k == 0 {
            return Err(Error::invalid("top_k", format!("{} must request at least 1", self.service_id)));
        }
        match (self.kind, &self.endpoint) {
            (ServiceKind::Http, None) => Err(Error::invalid(
                "endpoint",
                format!("HTTP service {} needs an endpoint", self.service_id),
            )),
            _ => Ok(()),
        }
    }
}

/// Something that answers one prompt with token probabilities.
pub trait LlmService: Sync {
    fn descriptor(&self) -> &ServiceDescriptor;

    fn invoke(
        &self,
        task_id: &str,
        sample_id: &str,
        input_text: &str,
        context: &ContextSpec,
    ) -> Result<InvocationRecord>;
}

/// Service config file:
///
/// ```toml
/// concurrency = 4
///
/// [[service]]
/// service_id = "gpt-small"
/// kind = "HTTP"
/// capabilities = { generation = true, input_scoring = true, top_k = 5 }
/// endpoint = { base_url = "http://localhost:8000/v1", model = "small", api_key_env = "SMALL_KEY" }
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(rename = "service", default)]
    pub services: Vec<ServiceDescriptor>,
}

fn default_concurrency() -> usize {
    4
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ServiceConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("service config: {e}")))?;
        if cfg.concurrency == 0 {
            return Err(Error::Config("`concurrency` must be at least 1".into()));
        }
        for s in &cfg.services {
            s.validate()?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("service configs always serialize")
    }

    pub fn get(&self, service_id: &str) -> Result<&ServiceDescriptor> {
        self.services
            .iter()
            .find(|s| s.service_id == service_id)
            .ok_or_else(|| Error::Lookup(format!("no service `{service_id}` in config")))
    }
}

/// Prompt sent to a text-completion service: demonstrations, then the input.
pub fn render_prompt(context: &ContextSpec, input_text: &str) -> (String, usize) {
    let mut prompt = String::new();
    for (x, y) in &context.examples {
        prompt.push_str(&format!("Input: {x}\nOutput: {y}\n\n"));
    }
    prompt.push_str("Input: ");
    let start = prompt.len();
    prompt.push_str(input_text);
    prompt.push_str("\nOutput:");
    (prompt, start)
}
