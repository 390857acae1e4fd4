//! HTTP judge speaking the generic chat-completion shape: POST with a JSON
//! body {model, messages, temperature}, reply parsed from the first
//! choice's message content. All callers funnel through one dispatcher
//! that bounds both in-flight requests and requests per minute.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use super::{parse_raw, Judge, JudgeError, JudgeRequest, JudgeVerdict};

pub const ENV_BASE_URL: &str = "JUDGE_BASE_URL";
pub const ENV_API_KEY: &str = "JUDGE_API_KEY";
pub const ENV_MODEL: &str = "JUDGE_MODEL";

#[derive(Debug, Clone)]
pub struct HttpJudgeConfig {
    pub base_url: String,
    pub api_key: String,
    pub model: String,
    pub max_in_flight: usize,
    pub per_minute: usize,
    pub timeout: Duration,
}

impl HttpJudgeConfig {
    /// Reads JUDGE_BASE_URL / JUDGE_API_KEY / JUDGE_MODEL.
    pub fn from_env() -> Result<Self, JudgeError> {
        let get = |k: &str| {
            std::env::var(k).map_err(|_| JudgeError::Transport(format!("missing env {k}")))
        };
        Ok(Self {
            base_url: get(ENV_BASE_URL)?,
            api_key: std::env::var(ENV_API_KEY).unwrap_or_default(),
            model: get(ENV_MODEL)?,
            max_in_flight: 4,
            per_minute: 60,
            timeout: Duration::from_secs(60),
        })
    }
}

struct LimiterState {
    in_flight: usize,
    recent: VecDeque<Instant>,
}

/// Blocking dispatcher: at most `max_in_flight` concurrent requests and at
/// most `per_minute` requests per sliding window. Violations are impossible
/// by construction — a request only proceeds once `acquire` returns.
pub struct RateLimiter {
    max_in_flight: usize,
    per_minute: usize,
    window: Duration,
    state: Mutex<LimiterState>,
    cv: Condvar,
}

impl RateLimiter {
    pub fn new(max_in_flight: usize, per_minute: usize) -> Self {
        Self::with_window(max_in_flight, per_minute, Duration::from_secs(60))
    }

    pub fn with_window(max_in_flight: usize, per_minute: usize, window: Duration) -> Self {
        Self {
            max_in_flight: max_in_flight.max(1),
            per_minute: per_minute.max(1),
            window,
            state: Mutex::new(LimiterState {
                in_flight: 0,
                recent: VecDeque::new(),
            }),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut state = self.state.lock().unwrap();
        loop {
            let now = Instant::now();
            while state
                .recent
                .front()
                .map(|&t| now.duration_since(t) > self.window)
                .unwrap_or(false)
            {
                state.recent.pop_front();
            }
            if state.in_flight < self.max_in_flight && state.recent.len() < self.per_minute {
                state.in_flight += 1;
                state.recent.push_back(now);
                return Permit { limiter: self };
            }
            let wait = if state.recent.len() >= self.per_minute {
                // Sleep until the oldest stamp leaves the window.
                let oldest = *state.recent.front().unwrap();
                self.window
                    .saturating_sub(now.duration_since(oldest))
                    .max(Duration::from_millis(1))
            } else {
                Duration::from_millis(50)
            };
            let (s, _) = self.cv.wait_timeout(state, wait).unwrap();
            state = s;
        }
    }

    pub fn in_flight(&self) -> usize {
        self.state.lock().unwrap().in_flight
    }
}

pub struct Permit<'a> {
    limiter: &'a RateLimiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut state = self.limiter.state.lock().unwrap();
        state.in_flight -= 1;
        drop(state);
        self.limiter.cv.notify_all();
    }
}

pub struct HttpJudge {
    config: HttpJudgeConfig,
    client: reqwest::blocking::Client,
    limiter: RateLimiter,
}

impl HttpJudge {
    pub fn new(config: HttpJudgeConfig) -> Result<Self, JudgeError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| JudgeError::Transport(e.to_string()))?;
        let limiter = RateLimiter::new(config.max_in_flight, config.per_minute);
        Ok(Self {
            config,
            client,
            limiter,
        })
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }
}

impl Judge for HttpJudge {
    fn complete(&self, req: &JudgeRequest) -> Result<JudgeVerdict, JudgeError> {
        let _permit = self.limiter.acquire();
        let messages: Vec<serde_json::Value> = req
            .messages()
            .into_iter()
            .map(|(role, content)| serde_json::json!({"role": role, "content": content}))
            .collect();
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": req.temperature,
        });
        let mut http = self.client.post(self.endpoint()).json(&body);
        if !self.config.api_key.is_empty() {
            http = http.bearer_auth(&self.config.api_key);
        }
        let resp = http
            .send()
            .map_err(|e| JudgeError::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(JudgeError::Transport(format!(
                "judge returned status {}",
                resp.status()
            )));
        }
        let json: serde_json::Value = resp
            .json()
            .map_err(|e| JudgeError::Transport(e.to_string()))?;
        let raw = json["choices"][0]["message"]["content"]
            .as_str()
            .unwrap_or_default()
            .to_string();
        Ok(JudgeVerdict {
            task: req.task,
            raw_text: raw.clone(),
            parsed: parse_raw(req.task, &raw),
        })
    }

    fn model_name(&self) -> &str {
        &self.config.model
    }
}
