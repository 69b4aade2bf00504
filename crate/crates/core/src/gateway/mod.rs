//! Chat-completion client: one request in, one reply or one terminal error out.
//!
//! [`Gateway`] owns retries, backoff, in-flight caps and attempt accounting.
//! The model behind it is a [`ChatModel`]: either [`HttpChatModel`] talking to
//! a local model server, or one of the scripted mocks in [`mock`].

pub mod mock;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde_json::{json, Value};

use crate::http::{JsonTransport, RetryPolicy, Semaphore, TransportError, UreqTransport};
use crate::types::estimate_tokens;

pub use mock::{FlakyModel, OmittingModel, ScriptRule, ScriptedModel};

/// The exact phrase the model is told to reply with when context is lacking.
pub const DEFERRAL_SENTINEL: &str = "insufficient information";

pub const DEFAULT_MULTIMODAL_IN_FLIGHT: usize = 2;
pub const DEFAULT_TEXT_IN_FLIGHT: usize = 4;
/// Upper bound on system + user characters accepted before sending.
pub const DEFAULT_MAX_PROMPT_CHARS: usize = 1 << 20;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid chat request: {0}")]
    Input(String),
    #[error("chat transport failed after {attempts} attempt(s): {source}")]
    Transport {
        attempts: usize,
        #[source]
        source: TransportError,
    },
    #[error("cannot read image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("malformed chat response: {0}")]
    Malformed(String),
}

impl GatewayError {
    pub fn is_transport(&self) -> bool {
        matches!(self, GatewayError::Transport { .. })
    }

    fn retryable(&self) -> bool {
        match self {
            GatewayError::Transport { source, .. } => source.is_retryable(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub image_paths: Vec<PathBuf>,
    pub temperature: f32,
    pub max_output_tokens: u32,
    pub timeout: Duration,
}

impl ChatRequest {
    pub fn text(system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            system: system.into(),
            user: user.into(),
            image_paths: Vec::new(),
            temperature: 0.0,
            max_output_tokens: 1024,
            timeout: Duration::from_secs(120),
        }
    }

    pub fn with_images(mut self, paths: impl IntoIterator<Item = PathBuf>) -> Self {
        self.image_paths = paths.into_iter().collect();
        self
    }

    pub fn is_multimodal(&self) -> bool {
        !self.image_paths.is_empty()
    }
}

/// What a model returns for one attempt.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelReply {
    pub text: String,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
}

impl ModelReply {
    /// Reply with token counts estimated from the texts.
    pub fn estimated(req: &ChatRequest, text: String) -> Self {
        Self {
            prompt_tokens: estimate_tokens(&req.system) + estimate_tokens(&req.user),
            completion_tokens: estimate_tokens(&text),
            text,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    pub latency: Duration,
    pub attempts: usize,
}

/// One attempt against a model. Retries are the gateway's job.
pub trait ChatModel: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<ModelReply, GatewayError>;
}

impl<M: ChatModel + ?Sized> ChatModel for Arc<M> {
    fn complete(&self, req: &ChatRequest) -> Result<ModelReply, GatewayError> {
        (**self).complete(req)
    }
}

impl<M: ChatModel + ?Sized> ChatModel for Box<M> {
    fn complete(&self, req: &ChatRequest) -> Result<ModelReply, GatewayError> {
        (**self).complete(req)
    }
}

/// Shareable front door for every model call.
pub struct Gateway {
    model: Arc<dyn ChatModel>,
    retry: RetryPolicy,
    max_images: usize,
    max_prompt_chars: usize,
    multimodal: Semaphore,
    text: Semaphore,
    calls: AtomicU64,
    attempts: AtomicU64,
}

impl Gateway {
    pub fn new(model: Arc<dyn ChatModel>, retry_limit: usize, max_images: usize) -> Self {
        Self {
            model,
            retry: RetryPolicy::new(retry_limit),
            max_images,
            max_prompt_chars: DEFAULT_MAX_PROMPT_CHARS,
            multimodal: Semaphore::new(DEFAULT_MULTIMODAL_IN_FLIGHT),
            text: Semaphore::new(DEFAULT_TEXT_IN_FLIGHT),
            calls: AtomicU64::new(0),
            attempts: AtomicU64::new(0),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_in_flight(mut self, multimodal: usize, text: usize) -> Self {
        self.multimodal = Semaphore::new(multimodal);
        self.text = Semaphore::new(text);
        self
    }

    pub fn with_max_prompt_chars(mut self, limit: usize) -> Self {
        self.max_prompt_chars = limit;
        self
    }

    /// Requests accepted past validation.
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// Model attempts across all calls, retries included.
    pub fn attempt_count(&self) -> u64 {
        self.attempts.load(Ordering::Relaxed)
    }

    fn check(&self, req: &ChatRequest) -> Result<(), GatewayError> {
        if req.image_paths.len() > self.max_images {
            return Err(GatewayError::Input(format!(
                "{} images attached, at most {} allowed",
                req.image_paths.len(),
                self.max_images
            )));
        }
        let chars = req.system.chars().count() + req.user.chars().count();
        if chars > self.max_prompt_chars {
            return Err(GatewayError::Input(format!(
                "prompt of {chars} characters exceeds the {} character limit",
                self.max_prompt_chars
            )));
        }
        if req.user.trim().is_empty() {
            return Err(GatewayError::Input("empty user prompt".into()));
        }
        Ok(())
    }

    pub fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.check(req)?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        let sem = if req.is_multimodal() {
            &self.multimodal
        } else {
            &self.text
        };
        let started = Instant::now();
        let (result, attempts) = self.retry.run(
            |_| {
                self.attempts.fetch_add(1, Ordering::Relaxed);
                let _permit = sem.acquire();
                self.model.complete(req)
            },
            GatewayError::retryable,
        );
        let latency = started.elapsed();
        match result {
            Ok(r) => Ok(ChatResponse {
                text: r.text,
                prompt_tokens: r.prompt_tokens,
                completion_tokens: r.completion_tokens,
                latency,
                attempts,
            }),
            Err(GatewayError::Transport { source, .. }) => {
                log::warn!("chat call failed after {attempts} attempt(s): {source}");
                Err(GatewayError::Transport { attempts, source })
            }
            Err(e) => Err(e),
        }
    }
}

/// Client for a local model server taking
/// `{model, system, prompt, images[], options{temperature, num_predict}}`.
pub struct HttpChatModel {
    endpoint: String,
    model: String,
    transport: Arc<dyn JsonTransport>,
}

impl HttpChatModel {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, transport: Arc<dyn JsonTransport>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            transport,
        }
    }

    /// Reads `FINRAG_LLM_URL` and `FINRAG_LLM_MODEL`; `None` without a URL.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var("FINRAG_LLM_URL").ok().filter(|u| !u.trim().is_empty())?;
        let model = std::env::var("FINRAG_LLM_MODEL").unwrap_or_else(|_| "gemma3:27b".into());
        Some(Self::new(url, model, Arc::new(UreqTransport::default())))
    }

    pub fn request_body(&self, req: &ChatRequest) -> Result<Value, GatewayError> {
        let images = req
            .image_paths
            .iter()
            .map(|p| encode_image(p))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(json!({
            "model": self.model,
            "system": req.system,
            "prompt": req.user,
            "images": images,
            "options": {
                "temperature": req.temperature,
                "num_predict": req.max_output_tokens,
            },
            "stream": false,
        }))
    }
}

fn encode_image(path: &Path) -> Result<String, GatewayError> {
    let bytes = std::fs::read(path).map_err(|e| GatewayError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
}

impl ChatModel for HttpChatModel {
    fn complete(&self, req: &ChatRequest) -> Result<ModelReply, GatewayError> {
        let body = self.request_body(req)?;
        let resp = self
            .transport
            .post_json(&self.endpoint, &body, req.timeout)
            .map_err(|source| GatewayError::Transport { attempts: 1, source })?;
        let text = resp
            .get("response")
            .or_else(|| resp.get("text"))
            .and_then(Value::as_str)
            .ok_or_else(|| GatewayError::Malformed("missing `response` string".into()))?
            .to_string();
        let count = |k: &str| resp.get(k).and_then(Value::as_u64).map(|n| n as usize);
        let mut reply = ModelReply::estimated(req, text);
        if let Some(n) = count("prompt_eval_count") {
            reply.prompt_tokens = n;
        }
        if let Some(n) = count("eval_count") {
            reply.completion_tokens = n;
        }
        Ok(reply)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    fn fast(model: impl ChatModel + 'static, retries: usize) -> Gateway {
        Gateway::new(Arc::new(model), retries, 5)
            .with_retry(RetryPolicy::new(retries).with_base_delay(Duration::from_millis(1)))
    }

    #[test]
    fn too_many_images_is_input_error() {
        let gw = fast(ScriptedModel::default(), 2);
        let req = ChatRequest::text("s", "u").with_images((0..6).map(|i| PathBuf::from(format!("{i}.png"))));
        assert!(matches!(gw.chat(&req), Err(GatewayError::Input(_))));
        assert_eq!(gw.call_count(), 0);
    }

    #[test]
    fn oversized_prompt_rejected_before_sending() {
        let gw = fast(ScriptedModel::default(), 2).with_max_prompt_chars(10);
        let err = gw.chat(&ChatRequest::text("", "x".repeat(11))).unwrap_err();
        assert!(matches!(err, GatewayError::Input(_)));
        assert_eq!(gw.attempt_count(), 0);
    }

    #[test]
    fn fails_twice_then_succeeds() {
        let gw = fast(FlakyModel::new(ScriptedModel::default(), 2), 2);
        let resp = gw.chat(&ChatRequest::text("s", "hello")).unwrap();
        assert_eq!(resp.attempts, 3);
        assert_eq!(gw.attempt_count(), 3);
        assert_eq!(gw.call_count(), 1);
    }

    #[test]
    fn exhausted_retries_report_attempts() {
        let gw = fast(FlakyModel::new(ScriptedModel::default(), 5), 2);
        match gw.chat(&ChatRequest::text("s", "hello")) {
            Err(GatewayError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    struct Recorder(Mutex<Vec<Value>>);

    impl JsonTransport for Recorder {
        fn post_json(&self, _url: &str, body: &Value, _t: Duration) -> Result<Value, TransportError> {
            self.0.lock().unwrap().push(body.clone());
            Ok(json!({"response": "ok", "prompt_eval_count": 7, "eval_count": 1}))
        }
    }

    #[test]
    fn http_body_shape() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("t1.png");
        std::fs::write(&img, b"\x89PNG").unwrap();
        let rec = Arc::new(Recorder(Mutex::new(Vec::new())));
        let model = HttpChatModel::new("http://x/api/generate", "m", rec.clone());
        let req = ChatRequest::text("sys", "user").with_images([img]);
        let reply = model.complete(&req).unwrap();
        assert_eq!(reply.text, "ok");
        assert_eq!(reply.prompt_tokens, 7);
        let body = &rec.0.lock().unwrap()[0];
        assert_eq!(body["model"], "m");
        assert_eq!(body["system"], "sys");
        assert_eq!(body["prompt"], "user");
        assert_eq!(body["images"][0], "iVBORw==");
        assert_eq!(body["options"]["temperature"], 0.0);
        assert_eq!(body["stream"], false);
    }

    #[test]
    fn missing_image_is_not_retried() {
        let rec = Arc::new(Recorder(Mutex::new(Vec::new())));
        let gw = fast(HttpChatModel::new("http://x", "m", rec.clone()), 2);
        let req = ChatRequest::text("s", "u").with_images([PathBuf::from("/nonexistent/a.png")]);
        assert!(matches!(gw.chat(&req), Err(GatewayError::Image { .. })));
        assert_eq!(gw.attempt_count(), 1);
        assert!(rec.0.lock().unwrap().is_empty());
    }

    #[test]
    fn multimodal_in_flight_is_capped() {
        use std::sync::atomic::AtomicUsize;
        struct Probe {
            now: AtomicUsize,
            peak: AtomicUsize,
        }
        impl ChatModel for Probe {
            fn complete(&self, req: &ChatRequest) -> Result<ModelReply, GatewayError> {
                let n = self.now.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(n, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(15));
                self.now.fetch_sub(1, Ordering::SeqCst);
                Ok(ModelReply::estimated(req, "ok".into()))
            }
        }
        let probe = Arc::new(Probe {
            now: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let gw = Gateway::new(probe.clone(), 0, 5);
        let req = ChatRequest::text("s", "u").with_images([PathBuf::from("a.png")]);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| gw.chat(&req).unwrap());
            }
        });
        assert!(probe.peak.load(Ordering::SeqCst) <= DEFAULT_MULTIMODAL_IN_FLIGHT);
    }
}
