//! Captioning and recognition over interchangeable LLM backends.
//!
//! Every backend answers one question: given a prompt and an image, what text
//! comes back. [`caption`] and [`recognize`] build the prompts; backends are
//! read-only from the caller's point of view (nothing is ever sent back to
//! update a model).
//!
//! - [`HttpBackend`]: OpenAI-compatible `POST {endpoint}/chat/completions`
//!   with the image inlined as a base64 PNG data URL.
//! - [`MockBackend`]: a pure function of image statistics for offline runs.
//! - [`ReplayBackend`]: answers from a JSON-lines fixture keyed by prompt and
//!   image digests; [`RecordingBackend`] writes such fixtures.

mod http;
mod mock;
mod replay;

pub use http::HttpBackend;
pub use mock::{mock_caption, mock_recognition, MockBackend};
pub use replay::{FixtureEntry, RecordingBackend, ReplayBackend};

use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::hashing::sha256_hex;
use crate::representation::RepImage;

pub const CAPTION_PROMPT: &str = "Describe the main object in this image in one sentence.";

const RECOGNITION_PREFIX: &str =
    "Which one of the following categories best matches the image? Answer with the category name only: ";

pub const DEFAULT_MAX_TOKENS: u32 = 64;

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("no recorded response for prompt {prompt_sha256} / image {image_sha256}")]
    ReplayMiss {
        prompt_sha256: String,
        image_sha256: String,
    },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = LlmError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
pub struct CaptionRequest {
    pub image: RepImage,
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl CaptionRequest {
    pub fn new(image: RepImage, prompt: impl Into<String>) -> Self {
        Self {
            image,
            prompt: prompt.into(),
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be positive".into()));
        }
        if let Some(v) = self.image.pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(LlmError::InvalidRequest(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn prompt_sha256(&self) -> String {
        sha256_hex(self.prompt.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmResponse {
    pub text: String,
    pub backend: String,
    pub latency_ms: u64,
    pub usage: Option<TokenUsage>,
}

pub trait LlmBackend: Send + Sync {
    /// Stable identifier used in reports.
    fn id(&self) -> &str;

    fn complete(&self, request: &CaptionRequest) -> Result<LlmResponse>;

    /// Requests worth running at once against this backend.
    fn max_concurrency(&self) -> usize {
        std::thread::available_parallelism().map_or(4, |n| n.get())
    }
}

impl<B: LlmBackend + ?Sized> LlmBackend for &B {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn complete(&self, request: &CaptionRequest) -> Result<LlmResponse> {
        (**self).complete(request)
    }
    fn max_concurrency(&self) -> usize {
        (**self).max_concurrency()
    }
}

impl<B: LlmBackend + ?Sized> LlmBackend for Box<B> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn complete(&self, request: &CaptionRequest) -> Result<LlmResponse> {
        (**self).complete(request)
    }
    fn max_concurrency(&self) -> usize {
        (**self).max_concurrency()
    }
}

impl<B: LlmBackend + ?Sized> LlmBackend for std::sync::Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn complete(&self, request: &CaptionRequest) -> Result<LlmResponse> {
        (**self).complete(request)
    }
    fn max_concurrency(&self) -> usize {
        (**self).max_concurrency()
    }
}

pub fn caption(backend: &dyn LlmBackend, request: &CaptionRequest) -> Result<LlmResponse> {
    request.validate()?;
    backend.complete(request)
}

/// Captions `image` with the default description prompt.
pub fn describe(backend: &dyn LlmBackend, image: &RepImage) -> Result<LlmResponse> {
    caption(backend, &CaptionRequest::new(image.clone(), CAPTION_PROMPT))
}

pub fn recognition_prompt(class_list: &[String]) -> String {
    format!("{RECOGNITION_PREFIX}{}.", class_list.join(", "))
}

/// Class list embedded in a recognition prompt, if `prompt` is one.
pub fn classes_from_prompt(prompt: &str) -> Option<Vec<String>> {
    let rest = prompt.strip_prefix(RECOGNITION_PREFIX)?;
    let rest = rest.strip_suffix('.').unwrap_or(rest);
    Some(rest.split(", ").map(str::to_owned).collect())
}

pub fn recognize(backend: &dyn LlmBackend, image: &RepImage, class_list: &[String]) -> Result<LlmResponse> {
    if class_list.is_empty() {
        return Err(LlmError::InvalidRequest("class list is empty".into()));
    }
    caption(backend, &CaptionRequest::new(image.clone(), recognition_prompt(class_list)))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Label(String),
    Unknown,
}

impl Prediction {
    pub fn label(&self) -> Option<&str> {
        match self {
            Prediction::Label(l) => Some(l),
            Prediction::Unknown => None,
        }
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Byte offset of the first whole-word occurrence of `needle` in `hay`
/// (both already lowercased).
fn first_word_match(hay: &str, needle: &str) -> Option<usize> {
    if needle.is_empty() {
        return None;
    }
    let mut from = 0;
    while let Some(rel) = hay[from..].find(needle) {
        let start = from + rel;
        let end = start + needle.len();
        let before_ok = hay[..start].chars().next_back().is_none_or(|c| !is_word_char(c));
        let after_ok = hay[end..].chars().next().is_none_or(|c| !is_word_char(c));
        if before_ok && after_ok {
            return Some(start);
        }
        from = start + hay[start..].chars().next().map_or(1, char::len_utf8);
    }
    None
}

/// Finds the class named in `text`.
///
/// Matching is case-insensitive and whole-word. When several classes occur,
/// the earliest occurrence wins; equal positions fall back to `class_list`
/// order.
pub fn parse_prediction(text: &str, class_list: &[String]) -> Prediction {
    let hay = text.to_lowercase();
    class_list
        .iter()
        .enumerate()
        .filter_map(|(i, c)| first_word_match(&hay, &c.to_lowercase()).map(|pos| (pos, i)))
        .min()
        .map_or(Prediction::Unknown, |(_, i)| Prediction::Label(class_list[i].clone()))
}

/// Runs `requests` on up to `workers` threads and returns results in
/// completion order, tagged with each request's index.
pub fn complete_many(
    backend: &dyn LlmBackend,
    requests: &[CaptionRequest],
    workers: usize,
) -> Vec<(usize, Result<LlmResponse>)> {
    let workers = workers.clamp(1, requests.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(req) = requests.get(i) else { break };
                if tx.send((i, caption(backend, req))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        rx.into_iter().collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    #[default]
    Mock,
    Replay,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "http" => Ok(BackendKind::Http),
            "mock" => Ok(BackendKind::Mock),
            "replay" => Ok(BackendKind::Replay),
            other => Err(format!("unknown backend {other:?} (expected mock, replay or http)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    /// Initial retry delay; doubles per attempt.
    pub backoff_ms: u64,
    pub concurrency: usize,
    /// Replay fixture (JSON lines).
    pub fixture: Option<PathBuf>,
    /// Resize images to `[width, height]` before sending.
    pub image_size: Option<[u32; 2]>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: None,
            model: None,
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 60.0,
            max_retries: 3,
            backoff_ms: 500,
            concurrency: 4,
            fixture: None,
            image_size: None,
        }
    }
}

impl BackendConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs.max(0.001))
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            BackendKind::Http if self.endpoint.is_none() || self.model.is_none() => {
                Err(LlmError::Config("http backend needs both endpoint and model".into()))
            }
            BackendKind::Replay if self.fixture.is_none() => {
                Err(LlmError::Config("replay backend needs a fixture file".into()))
            }
            _ if self.concurrency == 0 => Err(LlmError::Config("concurrency cap must be at least 1".into())),
            _ => Ok(()),
        }
    }
}

pub fn build_backend(config: &BackendConfig) -> Result<Box<dyn LlmBackend>> {
    config.validate()?;
    Ok(match config.kind {
        BackendKind::Mock => Box::new(MockBackend::new()),
        BackendKind::Replay => Box::new(ReplayBackend::open(config.fixture.as_deref().expect("validated"))?),
        BackendKind::Http => Box::new(HttpBackend::new(config.clone())?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn prediction_rules() {
        let l = classes(&["butterfly", "chair"]);
        assert_eq!(parse_prediction("This is a butterfly.", &l), Prediction::Label("butterfly".into()));
        assert_eq!(parse_prediction("I cannot tell", &l), Prediction::Unknown);
        assert_eq!(parse_prediction("Chair or BUTTERFLY", &l), Prediction::Label("chair".into()));
        // whole words only
        assert_eq!(parse_prediction("armchairs", &l), Prediction::Unknown);
        assert_eq!(parse_prediction("", &l), Prediction::Unknown);
    }

    #[test]
    fn prediction_multiword_and_ties() {
        let l = classes(&["cat", "wild cat", "sea horse"]);
        assert_eq!(parse_prediction("a Wild Cat", &l), Prediction::Label("wild cat".into()));
        assert_eq!(parse_prediction("seahorse? sea horse!", &l), Prediction::Label("sea horse".into()));
        let l = classes(&["wild cat", "wild"]);
        assert_eq!(parse_prediction("wild cat", &l), Prediction::Label("wild cat".into()));
    }

    #[test]
    fn recognition_prompt_round_trip() {
        let l = classes(&["zero", "one", "car side"]);
        let p = recognition_prompt(&l);
        assert_eq!(
            p,
            "Which one of the following categories best matches the image? Answer with the category name only: zero, one, car side."
        );
        assert_eq!(classes_from_prompt(&p), Some(l));
        assert_eq!(classes_from_prompt(CAPTION_PROMPT), None);
    }

    #[test]
    fn empty_class_list_rejected() {
        let img = RepImage::new(ndarray::Array3::zeros((2, 2, 3)), crate::RepKind::Tencode);
        assert!(matches!(
            recognize(&MockBackend::new(), &img, &[]),
            Err(LlmError::InvalidRequest(_))
        ));
    }

    #[test]
    fn request_validation() {
        let img = RepImage::new(ndarray::Array3::from_elem((2, 2, 3), 2.0), crate::RepKind::Tencode);
        assert!(CaptionRequest::new(img, "x").validate().is_err());
        let mut ok = CaptionRequest::new(RepImage::new(ndarray::Array3::zeros((2, 2, 3)), crate::RepKind::Tencode), "x");
        assert!(ok.validate().is_ok());
        ok.max_tokens = 0;
        assert!(ok.validate().is_err());
    }

    #[test]
    fn backend_config_rules() {
        let http = BackendConfig {
            kind: BackendKind::Http,
            ..Default::default()
        };
        assert!(http.validate().is_err());
        assert!(BackendConfig::default().validate().is_ok());
        assert!("grpc".parse::<BackendKind>().is_err());
    }
}
