//! OpenAI-compatible completions client.
//!
//! Generation asks for `logprobs = top_k` and reads `tokens` and
//! `top_logprobs`. Input scoring re-sends the prompt with `echo = true` and
//! `max_tokens = 0`, keeping the token log-probabilities whose
//! `text_offset` falls inside the input text. Nothing is ever filled in: a
//! missing field is an error.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{render_prompt, LlmService, ServiceDescriptor, ServiceKind};
use crate::error::{Error, Result};
use crate::records::{ContextSpec, InvocationRecord, TokenStep};

fn default_timeout() -> u64 {
    60
}
fn default_max_tokens() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HttpEndpoint {
    /// Base URL up to and including the API version, e.g. `.../v1`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct RetryPolicy {
    pub attempts: u32,
    /// Delay before the second attempt; doubles each time.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

pub struct HttpService {
    descriptor: ServiceDescriptor,
    endpoint: HttpEndpoint,
    api_key: Option<String>,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

enum Failure {
    Retryable(String),
    Fatal(Error),
}

impl HttpService {
    pub fn new(descriptor: ServiceDescriptor) -> Result<Self> {
        descriptor.validate()?;
        if descriptor.kind != ServiceKind::Http {
            return Err(Error::Config(format!("{} is not an HTTP service", descriptor.service_id)));
        }
        let endpoint = descriptor.endpoint.clone().expect("validated");
        let api_key = match &endpoint.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!(
                    "environment variable `{var}` for {} is not set",
                    descriptor.service_id
                ))
            })?),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(endpoint.timeout_secs)))
            .build()
            .into();
        Ok(HttpService {
            descriptor,
            endpoint,
            api_key,
            agent,
            retry: RetryPolicy::default(),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn url(&self) -> String {
        format!("{}/completions", self.endpoint.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &Value) -> std::result::Result<Value, Failure> {
        let mut req = self.agent.post(&self.url());
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Failure::Retryable(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(Failure::Retryable(format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err(Failure::Fatal(Error::Protocol(format!("HTTP {status}: {text}"))));
        }
        serde_json::from_str(&text).map_err(|e| Failure::Fatal(Error::Protocol(format!("response is not JSON: {e}"))))
    }

    /// POSTs with retries on transport failures, 429 and 5xx.
    fn post(&self, body: &Value) -> Result<Value> {
        let mut last = String::new();
        for attempt in 0..self.retry.attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry.base_delay * 2u32.pow(attempt - 1));
            }
            match self.attempt(body) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(m)) => last = m,
            }
        }
        Err(Error::Transport {
            attempts: self.retry.attempts,
            message: last,
        })
    }

    fn generate(&self, prompt: &str) -> Result<(String, Vec<TokenStep>)> {
        let body = json!({
            "model": self.endpoint.model,
            "prompt": prompt,
            "max_tokens": self.endpoint.max_tokens,
            "temperature": 0,
            "logprobs": self.descriptor.capabilities.top_k,
        });
        let resp = self.post(&body)?;
        let choice = first_choice(&resp)?;
        let text = choice
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Protocol("choice has no `text`".into()))?;
        let logprobs = logprobs_of(choice, &self.descriptor.service_id)?;
        let tokens = array(logprobs, "tokens")?;
        let tops = array(logprobs, "top_logprobs")?;
        if tokens.len() != tops.len() {
            return Err(Error::Protocol("`tokens` and `top_logprobs` differ in length".into()));
        }
        let mut steps = Vec::with_capacity(tokens.len());
        for (tok, top) in tokens.iter().zip(tops) {
            let tok = tok
                .as_str()
                .ok_or_else(|| Error::Protocol("non-string token".into()))?;
            let map = top.as_object().ok_or_else(|| {
                Error::Capability(format!("{} returned no top-k probabilities", self.descriptor.service_id))
            })?;
            let mut probs = Vec::with_capacity(map.len());
            for (t, lp) in map {
                let lp = lp
                    .as_f64()
                    .ok_or_else(|| Error::Protocol(format!("log-probability of `{t}` is not a number")))?;
                probs.push((t.clone(), lp.exp().min(1.0)));
            }
            probs.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            steps.push(TokenStep::new(tok, probs));
        }
        Ok((text.to_string(), steps))
    }

    fn score_input(&self, prompt: &str, start: usize, len: usize) -> Result<Vec<f64>> {
        let body = json!({
            "model": self.endpoint.model,
            "prompt": prompt,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
        });
        let resp = self.post(&body)?;
        let logprobs = logprobs_of(first_choice(&resp)?, &self.descriptor.service_id)?;
        let offsets = array(logprobs, "text_offset")?;
        let lps = array(logprobs, "token_logprobs")?;
        if offsets.len() != lps.len() {
            return Err(Error::Protocol("`text_offset` and `token_logprobs` differ in length".into()));
        }
        let mut scores = Vec::new();
        for (off, lp) in offsets.iter().zip(lps) {
            let off = off
                .as_u64()
                .ok_or_else(|| Error::Protocol("non-integer text offset".into()))? as usize;
            if off < start || off >= start + len {
                continue;
            }
            let lp = lp.as_f64().ok_or_else(|| {
                Error::Capability(format!("{} did not score input token at offset {off}", self.descriptor.service_id))
            })?;
            scores.push(lp.exp().min(1.0));
        }
        if scores.is_empty() && len > 0 {
            return Err(Error::Capability(format!(
                "{} returned no input-token scores",
                self.descriptor.service_id
            )));
        }
        Ok(scores)
    }
}

fn first_choice(resp: &Value) -> Result<&Value> {
    resp.get("choices")
        .and_then(Value::as_array)
        .and_then(|c| c.first())
        .ok_or_else(|| Error::Protocol("response has no choices".into()))
}

fn logprobs_of<'a>(choice: &'a Value, service: &str) -> Result<&'a Value> {
    match choice.get("logprobs") {
        Some(v) if v.is_object() => Ok(v),
        _ => Err(Error::Capability(format!("{service} returned no logprobs"))),
    }
}

fn array<'a>(v: &'a Value, field: &str) -> Result<&'a Vec<Value>> {
    v.get(field)
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Capability(format!("logprobs lack `{field}`")))
}

impl LlmService for HttpService {
    fn descriptor(&self) -> &ServiceDescriptor {
        &self.descriptor
    }

    fn invoke(&self, task_id: &str, sample_id: &str, input_text: &str, context: &ContextSpec) -> Result<InvocationRecord> {
        let (prompt, start) = render_prompt(context, input_text);
        let (generated_text, output_steps) = self.generate(&prompt)?;
        let input_scores = if self.descriptor.capabilities.input_scoring {
            Some(self.score_input(&prompt, start, input_text.len())?)
        } else {
            None
        };
        let record = InvocationRecord {
            service_id: self.descriptor.service_id.clone(),
            task_id: task_id.into(),
            context_id: context.context_id.clone(),
            sample_id: sample_id.into(),
            input_text: input_text.into(),
            generated_text: generated_text.trim().to_string(),
            output_steps,
            input_scores,
            reference: None,
        };
        record.validate()?;
        Ok(record)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    use super::*;
    use crate::services::Capabilities;

    /// Serves `responses` in order, one per connection, and records the
    /// request bodies.
    pub(crate) fn fake_server(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Value>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&seen);
        std::thread::spawn(move || {
            for (status, body) in responses {
                let Ok((stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                if let Ok(v) = serde_json::from_slice(&buf) {
                    log.lock().unwrap().push(v);
                }
                let mut stream = stream;
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
            }
        });
        (format!("http://{addr}/v1"), seen)
    }

    pub(crate) fn descriptor(url: &str, input_scoring: bool) -> ServiceDescriptor {
        ServiceDescriptor {
            service_id: "remote".into(),
            kind: ServiceKind::Http,
            capabilities: Capabilities {
                generation: true,
                input_scoring,
                top_k: 2,
            },
            endpoint: Some(HttpEndpoint {
                base_url: url.into(),
                model: "m".into(),
                api_key_env: None,
                timeout_secs: 5,
                max_tokens: 8,
            }),
        }
    }

    fn fast() -> RetryPolicy {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(1),
        }
    }

    pub(crate) fn generation_body() -> String {
        json!({"choices": [{"text": " Paris", "logprobs": {
            "tokens": [" Paris"],
            "top_logprobs": [{" Paris": -0.1, " Lyon": -2.5}]
        }}]})
        .to_string()
    }

    fn ctx() -> ContextSpec {
        ContextSpec::new("c0", vec![("x".into(), "y".into())])
    }

    #[test]
    fn parses_generation_and_input_scores() {
        let (_, start) = render_prompt(&ctx(), "capital of France");
        let echo = json!({"choices": [{"text": "", "logprobs": {
            "text_offset": [0, start, start + 7, start + 10],
            "token_logprobs": [null, -1.0, -0.5, -0.25]
        }}]})
        .to_string();
        let (url, seen) = fake_server(vec![(200, generation_body()), (200, echo)]);
        let svc = HttpService::new(descriptor(&url, true)).unwrap().with_retry(fast());
        let r = svc.invoke("t", "s1", "capital of France", &ctx()).unwrap();
        assert_eq!(r.generated_text, "Paris");
        assert_eq!(r.output_steps.len(), 1);
        assert!((r.output_steps[0].top1() - (-0.1f64).exp()).abs() < 1e-12);
        assert!((r.output_steps[0].top2() - (-2.5f64).exp()).abs() < 1e-12);
        let scores = r.input_scores.unwrap();
        assert_eq!(scores.len(), 3);
        assert!((scores[0] - (-1.0f64).exp()).abs() < 1e-12);
        let bodies = seen.lock().unwrap();
        assert_eq!(bodies[0]["logprobs"], 2);
        assert_eq!(bodies[1]["echo"], true);
    }

    #[test]
    fn missing_logprobs_is_capability_error() {
        let body = json!({"choices": [{"text": "hi"}]}).to_string();
        let (url, _) = fake_server(vec![(200, body)]);
        let svc = HttpService::new(descriptor(&url, false)).unwrap().with_retry(fast());
        assert!(matches!(svc.invoke("t", "s", "q", &ctx()), Err(Error::Capability(_))));
    }

    #[test]
    fn null_input_score_is_capability_error() {
        let (_, start) = render_prompt(&ctx(), "q");
        let echo = json!({"choices": [{"text": "", "logprobs": {
            "text_offset": [start], "token_logprobs": [null]
        }}]})
        .to_string();
        let (url, _) = fake_server(vec![(200, generation_body()), (200, echo)]);
        let svc = HttpService::new(descriptor(&url, true)).unwrap().with_retry(fast());
        assert!(matches!(svc.invoke("t", "s", "q", &ctx()), Err(Error::Capability(_))));
    }

    #[test]
    fn retries_server_errors_then_succeeds() {
        let (url, seen) = fake_server(vec![(503, "{}".into()), (500, "{}".into()), (200, generation_body())]);
        let svc = HttpService::new(descriptor(&url, false)).unwrap().with_retry(fast());
        let r = svc.invoke("t", "s", "q", &ctx()).unwrap();
        assert_eq!(r.output_steps.len(), 1);
        assert_eq!(seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn gives_up_after_three_attempts() {
        let (url, _) = fake_server(vec![(500, "{}".into()); 3]);
        let svc = HttpService::new(descriptor(&url, false)).unwrap().with_retry(fast());
        let err = svc.invoke("t", "s", "q", &ctx()).unwrap_err();
        assert!(matches!(err, Error::Transport { attempts: 3, .. }));
        assert!(err.is_retryable());
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, seen) = fake_server(vec![(400, "{\"error\":\"bad\"}".into()), (200, generation_body())]);
        let svc = HttpService::new(descriptor(&url, false)).unwrap().with_retry(fast());
        assert!(matches!(svc.invoke("t", "s", "q", &ctx()), Err(Error::Protocol(_))));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn unset_key_variable_is_config_error() {
        let mut d = descriptor("http://127.0.0.1:1/v1", false);
        d.endpoint.as_mut().unwrap().api_key_env = Some("PLUGPERF_TEST_UNSET_KEY_VAR".into());
        assert!(matches!(HttpService::new(d), Err(Error::Config(_))));
    }
}
