use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{CaptionRequest, LlmBackend, LlmError, LlmResponse, Result};

/// One line of a replay fixture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub prompt_sha256: String,
    pub image_sha256: String,
    pub text: String,
}

impl FixtureEntry {
    pub fn for_request(request: &CaptionRequest, text: impl Into<String>) -> Self {
        Self {
            prompt_sha256: request.prompt_sha256(),
            image_sha256: request.image.content_sha256(),
            text: text.into(),
        }
    }
}

/// Answers from recorded responses keyed by (prompt digest, image digest).
/// Later lines override earlier ones with the same key.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    entries: HashMap<(String, String), String>,
}

impl ReplayBackend {
    pub fn from_entries(entries: impl IntoIterator<Item = FixtureEntry>) -> Self {
        Self {
            entries: entries
                .into_iter()
                .map(|e| ((e.prompt_sha256, e.image_sha256), e.text))
                .collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureEntry = serde_json::from_str(line)
                .map_err(|e| LlmError::Config(format!("fixture line {}: {e}", i + 1)))?;
            entries.push(entry);
        }
        Ok(Self::from_entries(entries))
    }

    pub fn open(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| LlmError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl LlmBackend for ReplayBackend {
    fn id(&self) -> &str {
        "replay"
    }

    fn complete(&self, request: &CaptionRequest) -> Result<LlmResponse> {
        let key = (request.prompt_sha256(), request.image.content_sha256());
        match self.entries.get(&key) {
            Some(text) => Ok(LlmResponse {
                text: text.clone(),
                backend: self.id().to_string(),
                latency_ms: 0,
                usage: None,
            }),
            None => Err(LlmError::ReplayMiss {
                prompt_sha256: key.0,
                image_sha256: key.1,
            }),
        }
    }
}

/// Forwards to `inner` and appends every successful exchange to a fixture file.
pub struct RecordingBackend<B> {
    inner: B,
    path: PathBuf,
    lock: Mutex<()>,
}

impl<B: LlmBackend> RecordingBackend<B> {
    pub fn new(inner: B, path: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            path: path.into(),
            lock: Mutex::new(()),
        }
    }

    pub fn into_inner(self) -> B {
        self.inner
    }
}

impl<B: LlmBackend> LlmBackend for RecordingBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &CaptionRequest) -> Result<LlmResponse> {
        let response = self.inner.complete(request)?;
        let mut line = serde_json::to_string(&FixtureEntry::for_request(request, &response.text))
            .expect("fixture entry serializes");
        line.push('\n');
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let io = |source| LlmError::Io {
            path: self.path.clone(),
            source,
        };
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path).map_err(io)?;
        f.write_all(line.as_bytes()).map_err(io)?;
        Ok(response)
    }

    fn max_concurrency(&self) -> usize {
        self.inner.max_concurrency()
    }
}
