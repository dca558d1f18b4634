use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use serde_json::{json, Value};

use super::{BackendConfig, CaptionRequest, LlmBackend, LlmError, LlmResponse, Result, TokenUsage};
use crate::representation::RepImage;

/// Counting semaphore bounding in-flight requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// OpenAI-compatible chat-completions client.
pub struct HttpBackend {
    config: BackendConfig,
    url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    gate: Gate,
}

enum Attempt {
    Done(LlmResponse),
    Retry(LlmError),
    Fail(LlmError),
}

impl HttpBackend {
    /// The API key is read once from `config.api_key_env`; a missing variable
    /// means requests go out without an `Authorization` header.
    pub fn new(config: BackendConfig) -> Result<Self> {
        let (Some(endpoint), Some(model)) = (config.endpoint.clone(), config.model.clone()) else {
            return Err(LlmError::Config("http backend needs both endpoint and model".into()));
        };
        if config.concurrency == 0 {
            return Err(LlmError::Config("concurrency cap must be at least 1".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout()))
            .http_status_as_error(false)
            .build()
            .into();
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(Self {
            url: format!("{}/chat/completions", endpoint.trim_end_matches('/')),
            model,
            api_key,
            agent,
            gate: Gate::new(config.concurrency),
            config,
        })
    }

    fn image_png(&self, image: &RepImage) -> Vec<u8> {
        let png = image.encode_png();
        let Some([w, h]) = self.config.image_size else {
            return png;
        };
        if (w as usize, h as usize) == (image.width(), image.height()) {
            return png;
        }
        let decoded = image::load_from_memory(&png).expect("own PNG decodes").to_rgb8();
        let resized = image::imageops::resize(&decoded, w, h, image::imageops::FilterType::Triangle);
        let mut out = std::io::Cursor::new(Vec::new());
        resized
            .write_to(&mut out, image::ImageFormat::Png)
            .expect("in-memory PNG encoding");
        out.into_inner()
    }

    pub fn request_body(&self, request: &CaptionRequest) -> Value {
        let b64 = base64::engine::general_purpose::STANDARD.encode(self.image_png(&request.image));
        json!({
            "model": self.model,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": request.prompt},
                    {"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{b64}")}}
                ]
            }],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        })
    }

    fn attempt(&self, body: &Value, attempt: u32) -> Attempt {
        let start = Instant::now();
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Attempt::Retry(LlmError::Timeout { attempts: attempt }),
            Err(ureq::Error::Io(e)) if e.kind() == std::io::ErrorKind::TimedOut => {
                return Attempt::Retry(LlmError::Timeout { attempts: attempt })
            }
            Err(e) => return Attempt::Fail(LlmError::Transport(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => return Attempt::Retry(LlmError::Timeout { attempts: attempt }),
            Err(e) => return Attempt::Fail(LlmError::Transport(e.to_string())),
        };
        match status {
            200..=299 => match parse_completion(&text) {
                Ok((content, usage)) => Attempt::Done(LlmResponse {
                    text: content,
                    backend: self.id().to_string(),
                    latency_ms: start.elapsed().as_millis() as u64,
                    usage,
                }),
                Err(e) => Attempt::Fail(e),
            },
            429 => Attempt::Retry(LlmError::RateLimited { attempts: attempt }),
            500..=599 => Attempt::Retry(LlmError::Http { status, body: text }),
            _ => Attempt::Fail(LlmError::Http { status, body: text }),
        }
    }
}

fn parse_completion(text: &str) -> Result<(String, Option<TokenUsage>)> {
    let v: Value = serde_json::from_str(text).map_err(|e| LlmError::BadResponse(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| LlmError::BadResponse("missing choices[0].message.content".into()))?;
    let usage = v.get("usage").and_then(|u| {
        Some(TokenUsage {
            prompt_tokens: u.get("prompt_tokens")?.as_u64()?,
            completion_tokens: u.get("completion_tokens")?.as_u64()?,
        })
    });
    Ok((content.to_string(), usage))
}

fn with_attempts(err: LlmError, attempts: u32) -> LlmError {
    match err {
        LlmError::Timeout { .. } => LlmError::Timeout { attempts },
        LlmError::RateLimited { .. } => LlmError::RateLimited { attempts },
        other => other,
    }
}

impl LlmBackend for HttpBackend {
    fn id(&self) -> &str {
        "http"
    }

    fn complete(&self, request: &CaptionRequest) -> Result<LlmResponse> {
        let body = self.request_body(request);
        let _permit = self.gate.acquire();
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut attempt = 1;
        loop {
            match self.attempt(&body, attempt) {
                Attempt::Done(r) => return Ok(r),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) if attempt > self.config.max_retries => return Err(with_attempts(e, attempt)),
                Attempt::Retry(e) => {
                    log::warn!("{} attempt {attempt} failed: {e}; retrying in {delay:?}", self.url);
                    std::thread::sleep(delay);
                    delay = delay.saturating_mul(2);
                    attempt += 1;
                }
            }
        }
    }

    fn max_concurrency(&self) -> usize {
        self.config.concurrency
    }
}
