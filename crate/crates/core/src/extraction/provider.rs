//! Chat-completion providers.
//!
//! Requests carry text and image parts. Fixture mode replays canned replies
//! stored as `<content-hash>.txt`, where the hash covers the model name and
//! every message part (images by their SHA-256, not their path), so fixtures
//! are portable across machines.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("no fixture reply for request {hash} in {dir}")]
    FixtureMissing { hash: String, dir: PathBuf },
    #[error("provider request failed: {0}")]
    Transport(String),
    #[error("provider returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("provider response has no message content: {0}")]
    MalformedResponse(String),
    #[error("no API key: set {env_var} or `api_key` in the provider config")]
    MissingKey { env_var: String },
    #[error("provider config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Part {
    Text {
        text: String,
    },
    Image {
        name: String,
        sha256: String,
        #[serde(skip)]
        path: PathBuf,
    },
}

impl Part {
    pub fn text(text: impl Into<String>) -> Self {
        Part::Text { text: text.into() }
    }

    /// An image part; the file is hashed now and read again only when sent.
    pub fn image(path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| ProviderError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Part::Image {
            name: path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            path: path.to_path_buf(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            parts: vec![Part::text(text)],
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            parts: vec![Part::text(text)],
        }
    }

    pub fn user(parts: Vec<Part>) -> Self {
        Self { role: Role::User, parts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
}

impl ChatRequest {
    /// Hex SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

pub trait ChatProvider: Send + Sync {
    /// Returns the assistant's reply text.
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError>;
}

impl<T: ChatProvider + ?Sized> ChatProvider for std::sync::Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        (**self).complete(request)
    }
}

/// Replays replies from `<dir>/<hash>.txt`. Never touches the network.
#[derive(Debug, Clone)]
pub struct FixtureProvider {
    dir: PathBuf,
}

impl FixtureProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn reply_path(&self, request: &ChatRequest) -> PathBuf {
        self.dir.join(format!("{}.txt", request.content_hash()))
    }

    /// Stores a canned reply for `request`.
    pub fn store(&self, request: &ChatRequest, reply: &str) -> Result<PathBuf, ProviderError> {
        fs::create_dir_all(&self.dir).map_err(|source| ProviderError::Io {
            path: self.dir.clone(),
            source,
        })?;
        let path = self.reply_path(request);
        fs::write(&path, reply).map_err(|source| ProviderError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }
}

impl ChatProvider for FixtureProvider {
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let path = self.reply_path(request);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(ProviderError::FixtureMissing {
                hash: request.content_hash(),
                dir: self.dir.clone(),
            }),
            Err(source) => Err(ProviderError::Io { path, source }),
        }
    }
}

/// Forwards to an inner provider and saves each reply as a fixture.
pub struct RecordingProvider<P> {
    inner: P,
    fixtures: FixtureProvider,
}

impl<P: ChatProvider> RecordingProvider<P> {
    pub fn new(inner: P, dir: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            fixtures: FixtureProvider::new(dir),
        }
    }
}

impl<P: ChatProvider> ChatProvider for RecordingProvider<P> {
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let reply = self.inner.complete(request)?;
        self.fixtures.store(request, &reply)?;
        Ok(reply)
    }
}

fn media_type(name: &str) -> &'static str {
    let lower = name.to_ascii_lowercase();
    if lower.ends_with(".jpg") || lower.ends_with(".jpeg") {
        "image/jpeg"
    } else if lower.ends_with(".webp") {
        "image/webp"
    } else if lower.ends_with(".gif") {
        "image/gif"
    } else {
        "image/png"
    }
}

/// OpenAI-compatible chat-completions client.
pub struct HttpProvider {
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            api_key,
            client,
        })
    }

    /// Wire body for a request; images are inlined as data URLs.
    pub fn body(request: &ChatRequest) -> Result<Value, ProviderError> {
        let mut messages = Vec::new();
        for m in &request.messages {
            let mut content = Vec::new();
            for part in &m.parts {
                match part {
                    Part::Text { text } => content.push(json!({"type": "text", "text": text})),
                    Part::Image { name, path, .. } => {
                        let bytes = fs::read(path).map_err(|source| ProviderError::Io {
                            path: path.clone(),
                            source,
                        })?;
                        let data = base64::engine::general_purpose::STANDARD.encode(bytes);
                        content.push(json!({
                            "type": "image_url",
                            "image_url": {"url": format!("data:{};base64,{data}", media_type(name))}
                        }));
                    }
                }
            }
            messages.push(json!({"role": m.role, "content": content}));
        }
        Ok(json!({
            "model": request.model,
            "messages": messages,
            "response_format": {"type": "json_object"},
        }))
    }
}

impl ChatProvider for HttpProvider {
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let mut call = self.client.post(&self.endpoint).json(&Self::body(request)?);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let response = call.send().map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| ProviderError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ProviderError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        let value: Value = serde_json::from_str(&text).map_err(|_| ProviderError::MalformedResponse(text.clone()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or(ProviderError::MalformedResponse(text))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderMode {
    Live,
    Fixture,
    /// Live calls whose replies are also written to the fixture directory.
    Record,
}

/// Provider settings as they appear in the project config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub mode: ProviderMode,
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the API key; overrides `api_key`.
    pub api_key_env: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub fixture_dir: Option<PathBuf>,
    pub timeout_secs: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            mode: ProviderMode::Fixture,
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            api_key_env: "COGCHAIN_API_KEY".into(),
            api_key: None,
            fixture_dir: None,
            timeout_secs: 300,
        }
    }
}

impl ProviderConfig {
    pub fn fixture(dir: impl Into<PathBuf>, model: impl Into<String>) -> Self {
        Self {
            mode: ProviderMode::Fixture,
            model: model.into(),
            fixture_dir: Some(dir.into()),
            ..Default::default()
        }
    }

    fn key(&self) -> Option<String> {
        std::env::var(&self.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .or_else(|| self.api_key.clone())
    }

    fn fixture_dir(&self) -> Result<&Path, ProviderError> {
        self.fixture_dir
            .as_deref()
            .ok_or_else(|| ProviderError::Config(format!("{:?} mode needs fixture_dir", self.mode)))
    }

    fn http(&self) -> Result<HttpProvider, ProviderError> {
        let key = self.key().ok_or_else(|| ProviderError::MissingKey {
            env_var: self.api_key_env.clone(),
        })?;
        HttpProvider::new(self.endpoint.clone(), Some(key), Duration::from_secs(self.timeout_secs))
    }

    pub fn build(&self) -> Result<Box<dyn ChatProvider>, ProviderError> {
        Ok(match self.mode {
            ProviderMode::Fixture => Box::new(FixtureProvider::new(self.fixture_dir()?)),
            ProviderMode::Live => Box::new(self.http()?),
            ProviderMode::Record => Box::new(RecordingProvider::new(self.http()?, self.fixture_dir()?)),
        })
    }
}
