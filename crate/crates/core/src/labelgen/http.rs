//! List-wise labeling through an OpenAI-style chat-completions endpoint.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::Labeler;
use crate::error::{Error, Result};
use crate::text::{Document, Query};

/// Environment variable holding the bearer token.
pub const TOKEN_ENV: &str = "RANKDISTILL_HTTP_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpLabelerConfig {
    pub endpoint: String,
    pub model: String,
    pub token_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
}

impl Default for HttpLabelerConfig {
    fn default() -> Self {
        HttpLabelerConfig {
            endpoint: String::new(),
            model: String::new(),
            token_env: TOKEN_ENV.to_string(),
            timeout_secs: 60,
            max_retries: 3,
        }
    }
}

pub struct HttpLabeler {
    config: HttpLabelerConfig,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpLabeler {
    pub fn new(config: HttpLabelerConfig) -> Result<Self> {
        if config.endpoint.is_empty() {
            return Err(Error::Config("HTTP labeler needs an endpoint URL".into()));
        }
        let token = std::env::var(&config.token_env).ok().filter(|t| !t.is_empty());
        if token.is_none() {
            log::warn!("{} is not set; sending unauthenticated requests", config.token_env);
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::LabelerTransport(e.to_string()))?;
        Ok(HttpLabeler { config, token, client })
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let body = json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut last_err = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(250 << attempt.min(6)));
            }
            let mut req = self.client.post(&self.config.endpoint).json(&body);
            if let Some(t) = &self.token {
                req = req.bearer_auth(t);
            }
            let resp = match req.send() {
                Ok(r) => r,
                Err(e) => {
                    last_err = e.to_string();
                    continue;
                }
            };
            let status = resp.status();
            if status.is_server_error() || status.as_u16() == 429 {
                last_err = format!("HTTP {status}");
                continue;
            }
            if !status.is_success() {
                return Err(Error::LabelerTransport(format!("HTTP {status}")));
            }
            let value: serde_json::Value =
                resp.json().map_err(|e| Error::LabelerTransport(format!("bad response body: {e}")))?;
            return value["choices"][0]["message"]["content"]
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| Error::LabelerTransport("response has no message content".into()));
        }
        Err(Error::LabelerTransport(format!(
            "giving up after {} attempts: {last_err}",
            self.config.max_retries + 1
        )))
    }
}

/// List-wise instruction with passages numbered from 1.
pub fn listwise_prompt(query: &Query, docs: &[&Document]) -> String {
    let mut p = format!(
        "Rank the {} passages below by relevance to the query. Leave out passages that are not relevant. \
         Answer only with passage numbers in descending order of relevance, e.g. [2] > [1] > [3].\n\nQuery: {}\n\n",
        docs.len(),
        query.text
    );
    for (i, d) in docs.iter().enumerate() {
        p.push_str(&format!("[{}] {}\n", i + 1, d.text));
    }
    p
}

/// Parse `id (> id)*` where each id is a 1-based passage number, optionally
/// bracketed. An empty reply means no passage is relevant.
pub fn parse_ranking_reply(reply: &str, n_docs: usize) -> std::result::Result<Vec<usize>, String> {
    let reply = reply.trim();
    if reply.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for item in reply.split('>') {
        let item = item.trim();
        let inner = item
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .unwrap_or(item)
            .trim();
        if inner.is_empty() || !inner.bytes().all(|b| b.is_ascii_digit()) {
            return Err(format!("`{item}` is not a passage number"));
        }
        let n: usize = inner.parse().map_err(|_| format!("`{item}` is out of range"))?;
        if n == 0 || n > n_docs {
            return Err(format!("passage {n} is out of range 1..={n_docs}"));
        }
        if out.contains(&(n - 1)) {
            return Err(format!("passage {n} listed twice"));
        }
        out.push(n - 1);
    }
    Ok(out)
}

impl Labeler for HttpLabeler {
    fn label(&self, query: &Query, docs: &[&Document]) -> Result<Vec<String>> {
        let reply = self.complete(&listwise_prompt(query, docs))?;
        let idx = parse_ranking_reply(&reply, docs.len()).map_err(|detail| Error::LabelerContract {
            query_id: query.id.clone(),
            detail,
        })?;
        Ok(idx.into_iter().map(|i| docs[i].id.clone()).collect())
    }
}
