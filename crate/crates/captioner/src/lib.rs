//! Part captioning through a multimodal chat endpoint.
//!
//! Each un-captioned library record is rendered into six orthographic views,
//! wrapped in a prompt together with its current caption and part type, and
//! sent to an OpenAI-style `chat/completions` endpoint as PNG attachments.
//! The core pipeline never links against this crate.

mod render;

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine as _;
use partforge::geometry::PointCloud;
use partforge::library::{CaptionSource, LibraryManifest, MANIFEST_FILE};
use serde_json::{json, Value};

pub use render::{render_views, ViewImage, VIEW_COUNT};

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "PARTFORGE_API_KEY";

pub const DIVERSITY_INSTRUCTION: &str =
    "Describe the part with as many different words and phrases as possible while staying accurate.";

#[derive(Debug, thiserror::Error)]
pub enum CaptionError {
    #[error("{part_id}: authentication rejected (HTTP {status})")]
    Auth { part_id: String, status: u16 },
    #[error("{part_id}: gave up after {attempts} attempts: {last}")]
    Exhausted {
        part_id: String,
        attempts: u32,
        last: String,
    },
    #[error("{part_id}: request rejected (HTTP {status}): {body}")]
    Rejected {
        part_id: String,
        status: u16,
        body: String,
    },
    #[error("{part_id}: malformed response: {reason}")]
    Parse { part_id: String, reason: String },
    #[error("{part_id}: empty caption in response")]
    Empty { part_id: String },
    #[error("{part_id}: missing credential; set {API_KEY_ENV}")]
    MissingCredential { part_id: String },
    #[error(transparent)]
    Core(#[from] partforge::Error),
}

impl CaptionError {
    pub fn part_id(&self) -> Option<&str> {
        match self {
            Self::Auth { part_id, .. }
            | Self::Exhausted { part_id, .. }
            | Self::Rejected { part_id, .. }
            | Self::Parse { part_id, .. }
            | Self::Empty { part_id }
            | Self::MissingCredential { part_id } => Some(part_id),
            Self::Core(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CaptionJob {
    pub part_id: String,
    pub category: String,
    pub part_type: String,
    pub shape_caption: String,
    pub views: Vec<ViewImage>,
}

pub fn build_prompt(job: &CaptionJob) -> String {
    format!(
        "The images show one part of a 3D {category} from {n} axis-aligned viewpoints. \
         The part is the {part_type}. A description of the object it belongs to: \"{caption}\". \
         Write one short noun phrase describing only the {part_type}: its shape, proportions, \
         material and style. {diversity} Reply with the phrase only.",
        category = job.category,
        n = job.views.len(),
        part_type = job.part_type,
        caption = job.shape_caption,
        diversity = DIVERSITY_INSTRUCTION,
    )
}

#[derive(Debug, Clone)]
pub struct EndpointConfig {
    /// Full URL of the chat completions route.
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    /// Retries after the first attempt for rate limits, server errors and timeouts.
    pub max_retries: u32,
    /// Delay before retry `k` is `backoff * 2^k`.
    pub backoff: Duration,
    pub max_tokens: u32,
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: "llava".into(),
            api_key: None,
            timeout: Duration::from_secs(60),
            max_retries: 5,
            backoff: Duration::from_millis(500),
            max_tokens: 64,
        }
    }

    /// Takes the credential from [`API_KEY_ENV`].
    pub fn from_env(url: impl Into<String>) -> Self {
        Self {
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            ..Self::new(url)
        }
    }
}

/// The request body: one user message with the prompt and the views as PNG data URLs.
pub fn request_body(job: &CaptionJob, endpoint: &EndpointConfig) -> Value {
    let mut content = vec![json!({"type": "text", "text": build_prompt(job)})];
    for view in &job.views {
        let png = base64::engine::general_purpose::STANDARD.encode(view.to_png());
        content.push(json!({
            "type": "image_url",
            "image_url": {"url": format!("data:image/png;base64,{png}")}
        }));
    }
    json!({
        "model": endpoint.model,
        "max_tokens": endpoint.max_tokens,
        "messages": [{"role": "user", "content": content}],
    })
}

/// First text block of the first choice, trimmed. Accepts a plain string
/// `content` or a list of typed blocks.
fn extract_caption(part_id: &str, body: &str) -> Result<String, CaptionError> {
    let parse = |reason: &str| CaptionError::Parse {
        part_id: part_id.to_string(),
        reason: reason.to_string(),
    };
    let value: Value = serde_json::from_str(body).map_err(|e| parse(&e.to_string()))?;
    let content = value
        .pointer("/choices/0/message/content")
        .ok_or_else(|| parse("no choices[0].message.content"))?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(blocks) => blocks
            .iter()
            .find(|b| b.get("type").and_then(Value::as_str) == Some("text"))
            .and_then(|b| b.get("text"))
            .and_then(Value::as_str)
            .ok_or_else(|| parse("no text block in content"))?
            .to_string(),
        Value::Null => String::new(),
        _ => return Err(parse("content is neither text nor a list of blocks")),
    };
    let text = text.trim();
    if text.is_empty() {
        return Err(CaptionError::Empty {
            part_id: part_id.to_string(),
        });
    }
    Ok(text.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionResponse {
    pub caption: String,
    pub retries: u32,
}

/// Sends one job, retrying rate limits (429), server errors (5xx) and
/// transport failures with exponential backoff.
pub fn request_caption(job: &CaptionJob, endpoint: &EndpointConfig) -> Result<CaptionResponse, CaptionError> {
    let key = endpoint
        .api_key
        .as_deref()
        .ok_or_else(|| CaptionError::MissingCredential {
            part_id: job.part_id.clone(),
        })?;
    let body = request_body(job, endpoint);
    let agent = ureq::AgentBuilder::new().timeout(endpoint.timeout).build();
    let mut retries = 0;
    loop {
        let result = agent
            .post(&endpoint.url)
            .set("Authorization", &format!("Bearer {key}"))
            .send_json(&body);
        let transient = match result {
            Ok(resp) => {
                let text = resp.into_string().map_err(|e| CaptionError::Parse {
                    part_id: job.part_id.clone(),
                    reason: e.to_string(),
                })?;
                let caption = extract_caption(&job.part_id, &text)?;
                return Ok(CaptionResponse { caption, retries });
            }
            Err(ureq::Error::Status(status @ (401 | 403), _)) => {
                return Err(CaptionError::Auth {
                    part_id: job.part_id.clone(),
                    status,
                })
            }
            Err(ureq::Error::Status(status, resp)) if status == 429 || status >= 500 => {
                format!("HTTP {status}: {}", resp.into_string().unwrap_or_default().trim())
            }
            Err(ureq::Error::Status(status, resp)) => {
                return Err(CaptionError::Rejected {
                    part_id: job.part_id.clone(),
                    status,
                    body: resp.into_string().unwrap_or_default(),
                })
            }
            Err(ureq::Error::Transport(t)) => t.to_string(),
        };
        if retries >= endpoint.max_retries {
            return Err(CaptionError::Exhausted {
                part_id: job.part_id.clone(),
                attempts: retries + 1,
                last: transient,
            });
        }
        std::thread::sleep(endpoint.backoff * 2u32.saturating_pow(retries));
        retries += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptionOptions {
    pub concurrency: usize,
    pub resolution: usize,
}

impl Default for CaptionOptions {
    fn default() -> Self {
        Self {
            concurrency: 4,
            resolution: 128,
        }
    }
}

#[derive(Debug, Default)]
pub struct CaptionReport {
    pub captioned: Vec<String>,
    /// Records that already carried a model caption.
    pub skipped: usize,
    pub failures: Vec<CaptionError>,
}

impl CaptionReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

fn load_job(root: &Path, entry: &partforge::library::ManifestEntry, resolution: usize) -> Result<CaptionJob, CaptionError> {
    let cloud = PointCloud::read_xyz(root.join(&entry.path))?;
    Ok(CaptionJob {
        part_id: entry.part_id.clone(),
        category: entry.category.clone(),
        part_type: entry.part_type.clone(),
        shape_caption: entry.caption.clone(),
        views: render_views(&cloud, resolution)?,
    })
}

/// Captions every record of the library at `root` whose caption did not come
/// from the model. The manifest is rewritten after each completed job, so an
/// interrupted run resumes where it stopped. Point files are never touched.
pub fn caption_library(
    root: impl AsRef<Path>,
    endpoint: &EndpointConfig,
    opts: &CaptionOptions,
) -> Result<CaptionReport, CaptionError> {
    let root = root.as_ref();
    let manifest_path: PathBuf = root.join(MANIFEST_FILE);
    let manifest = LibraryManifest::read(&manifest_path)?;
    let pending: VecDeque<usize> = manifest
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.source != CaptionSource::Mllm)
        .map(|(i, _)| i)
        .collect();
    let skipped = manifest.entries.len() - pending.len();
    let queue = Mutex::new(pending);
    let state = Mutex::new((manifest, CaptionReport { skipped, ..Default::default() }));

    let workers = opts.concurrency.max(1);
    let fatal: Mutex<Option<CaptionError>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let Some(ix) = queue.lock().expect("queue lock").pop_front() else {
                    return;
                };
                let entry = state.lock().expect("state lock").0.entries[ix].clone();
                let outcome = load_job(root, &entry, opts.resolution).and_then(|job| request_caption(&job, endpoint));
                let mut guard = state.lock().expect("state lock");
                let (manifest, report) = &mut *guard;
                match outcome {
                    Ok(resp) => {
                        manifest.entries[ix].caption = resp.caption;
                        manifest.entries[ix].source = CaptionSource::Mllm;
                        if let Err(e) = manifest.write(&manifest_path) {
                            *fatal.lock().expect("fatal lock") = Some(e.into());
                            queue.lock().expect("queue lock").clear();
                            return;
                        }
                        report.captioned.push(entry.part_id);
                    }
                    Err(e) => report.failures.push(e),
                }
            });
        }
    });
    if let Some(e) = fatal.into_inner().expect("fatal lock") {
        return Err(e);
    }
    let (_, mut report) = state.into_inner().expect("state lock");
    report.captioned.sort();
    report
        .failures
        .sort_by(|a, b| a.part_id().unwrap_or("").cmp(b.part_id().unwrap_or("")));
    Ok(report)
}
