//! Pluggable response judges for pairwise comparison.
//!
//! Two implementations: a deterministic offline heuristic (so the
//! comparison pipeline is testable without network access; its verdicts
//! carry no scientific meaning and reports label them as such) and a
//! chat-completion-style HTTP client.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textmetrics::{log_diversity, WordSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    A,
    B,
    Tie,
}

impl Verdict {
    pub fn flipped(self) -> Verdict {
        match self {
            Verdict::A => Verdict::B,
            Verdict::B => Verdict::A,
            Verdict::Tie => Verdict::Tie,
        }
    }
}

/// Judges which of two responses to a prompt is better. `first` and
/// `second` are presented in the order given; position handling is the
/// caller's job.
pub trait Judge {
    fn judge(&mut self, prompt: &str, first: &str, second: &str) -> Result<Verdict>;
    fn name(&self) -> &'static str;
}

/// Offline stand-in judge with a documented, pure scoring function:
///
/// score(text) = min(n, 250)/250 + [n ≥ 4] · min(log_diversity, 18)/18
///
/// where n is the normalized token count. Scores within 1e-9 tie. The
/// score rewards length and n-gram diversity only; it knows nothing about
/// quality.
#[derive(Debug, Clone, Copy, Default)]
pub struct DeterministicHeuristicJudge;

impl DeterministicHeuristicJudge {
    pub fn score(text: &str) -> f64 {
        let words = WordSequence::normalize(text);
        let n = words.len();
        let mut s = (n as f64).min(250.0) / 250.0;
        if let Some(ld) = log_diversity(words.tokens()) {
            s += ld.min(18.0) / 18.0;
        }
        s
    }
}

impl Judge for DeterministicHeuristicJudge {
    fn judge(&mut self, _prompt: &str, first: &str, second: &str) -> Result<Verdict> {
        let a = Self::score(first);
        let b = Self::score(second);
        Ok(if (a - b).abs() <= 1e-9 {
            Verdict::Tie
        } else if a > b {
            Verdict::A
        } else {
            Verdict::B
        })
    }

    fn name(&self) -> &'static str {
        "heuristic"
    }
}

pub const JUDGE_URL_ENV: &str = "NOISYFT_JUDGE_URL";
pub const JUDGE_TOKEN_ENV: &str = "NOISYFT_JUDGE_TOKEN";
pub const JUDGE_MODEL_ENV: &str = "NOISYFT_JUDGE_MODEL";

/// One request/response exchange, kept for the judging transcript.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub prompt: String,
    pub request: serde_json::Value,
    pub response: Option<serde_json::Value>,
    pub error: Option<String>,
}

/// Chat-completion-style HTTP judge.
///
/// Request JSON: {"model": …, "messages": [{"role": "system"|"user",
/// "content": …}]}. The reply is read from `choices[0].message.content`
/// or a top-level `"verdict"` string; the first standalone `A`, `B`, or
/// `tie` token (case-insensitive) decides. Transport and HTTP errors are
/// retried with exponential backoff; after the retry budget the item
/// fails, which callers treat as "unjudged". Requests run strictly one
/// at a time.
pub struct ExternalHttpJudge {
    client: reqwest::blocking::Client,
    url: String,
    token: Option<String>,
    model: String,
    retries: u32,
    backoff: Duration,
    transcript: Vec<TranscriptEntry>,
}

impl ExternalHttpJudge {
    /// Reads the endpoint from `NOISYFT_JUDGE_URL`, the optional bearer
    /// token from `NOISYFT_JUDGE_TOKEN`, and the model name from
    /// `NOISYFT_JUDGE_MODEL` (default "judge").
    pub fn from_env() -> Result<ExternalHttpJudge> {
        let url = std::env::var(JUDGE_URL_ENV)
            .map_err(|_| Error::Judge(format!("{JUDGE_URL_ENV} is not set")))?;
        let token = std::env::var(JUDGE_TOKEN_ENV).ok();
        let model = std::env::var(JUDGE_MODEL_ENV).unwrap_or_else(|_| "judge".to_string());
        Ok(Self::new(url, token, model))
    }

    pub fn new(url: String, token: Option<String>, model: String) -> ExternalHttpJudge {
        ExternalHttpJudge {
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(30))
                .build()
                .expect("http client builds"),
            url,
            token,
            model,
            retries: 3,
            backoff: Duration::from_millis(500),
            transcript: Vec::new(),
        }
    }

    /// Shrinks the retry backoff, for tests.
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    fn request_body(&self, prompt: &str, first: &str, second: &str) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "messages": [
                {
                    "role": "system",
                    "content": "You compare two responses to the same instruction. \
                                Reply with exactly one token: A if the first response \
                                is better, B if the second is better, or tie."
                },
                {
                    "role": "user",
                    "content": format!(
                        "Instruction:\n{prompt}\n\nResponse A:\n{first}\n\nResponse B:\n{second}"
                    )
                }
            ]
        })
    }

    fn parse_verdict(value: &serde_json::Value) -> Result<Verdict> {
        let content = value["choices"][0]["message"]["content"]
            .as_str()
            .or_else(|| value["verdict"].as_str())
            .ok_or_else(|| {
                Error::Judge("judge reply has neither choices[0].message.content nor verdict".into())
            })?;
        for raw in content.split_whitespace() {
            let token = raw
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase();
            match token.as_str() {
                "a" => return Ok(Verdict::A),
                "b" => return Ok(Verdict::B),
                "tie" => return Ok(Verdict::Tie),
                _ => {}
            }
        }
        Err(Error::Judge(format!(
            "no A/B/tie verdict token in judge reply {content:?}"
        )))
    }

    fn post_once(&self, body: &serde_json::Value) -> Result<serde_json::Value> {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .map_err(|e| Error::Judge(format!("transport: {e}")))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::Judge(format!("judge endpoint returned {status}")));
        }
        resp.json::<serde_json::Value>()
            .map_err(|e| Error::Judge(format!("invalid judge reply: {e}")))
    }
}

impl Judge for ExternalHttpJudge {
    fn judge(&mut self, prompt: &str, first: &str, second: &str) -> Result<Verdict> {
        let body = self.request_body(prompt, first, second);
        let mut last_err = None;
        for attempt in 0..self.retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            match self.post_once(&body) {
                Ok(reply) => {
                    let verdict = Self::parse_verdict(&reply);
                    self.transcript.push(TranscriptEntry {
                        prompt: prompt.to_string(),
                        request: body.clone(),
                        response: Some(reply),
                        error: verdict.as_ref().err().map(|e| e.to_string()),
                    });
                    return verdict;
                }
                Err(e) => {
                    log::warn!("judge attempt {} failed: {e}", attempt + 1);
                    last_err = Some(e);
                }
            }
        }
        let err = last_err.unwrap();
        self.transcript.push(TranscriptEntry {
            prompt: prompt.to_string(),
            request: body,
            response: None,
            error: Some(err.to_string()),
        });
        Err(err)
    }

    fn name(&self) -> &'static str {
        "external-http"
    }
}
