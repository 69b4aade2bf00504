//! Embedding backends: a remote HTTP embedder and a deterministic
//! token-hash embedder for offline runs and tests.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use crate::http::{JsonTransport, RetryPolicy, Semaphore, TransportError, UreqTransport};
use crate::types::{EmbeddingVector, VectorError};

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("cannot embed empty text (item {index})")]
    EmptyInput { index: usize },
    #[error("embedding transport failed after {attempts} attempt(s): {source}")]
    Transport {
        attempts: usize,
        #[source]
        source: TransportError,
    },
    #[error("embedding server returned {got} vectors for {expected} texts")]
    CountMismatch { expected: usize, got: usize },
    #[error("embedding server returned dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("embedding server returned an unusable vector: {0}")]
    BadVector(#[from] VectorError),
    #[error("malformed embedding response: {0}")]
    Malformed(String),
    #[error("invalid embedder spec: {0}")]
    Spec(String),
}

impl EmbedError {
    pub fn is_transport(&self) -> bool {
        matches!(self, EmbedError::Transport { .. })
    }
}

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;

    /// Embeds `texts` in order. The default embeds one at a time.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

impl<E: Embedder + ?Sized> Embedder for Arc<E> {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        (**self).embed_one(text)
    }
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        (**self).embed_batch(texts)
    }
}

impl<E: Embedder + ?Sized> Embedder for Box<E> {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        (**self).embed_one(text)
    }
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        (**self).embed_batch(texts)
    }
}

fn check_non_empty(texts: &[String]) -> Result<(), EmbedError> {
    match texts.iter().position(|t| t.trim().is_empty()) {
        Some(index) => Err(EmbedError::EmptyInput { index }),
        None => Ok(()),
    }
}

const TOKEN_SEED: u64 = 0x243f_6a88_85a3_08d3;
const SIGN_SEED: u64 = 0x1319_8a2e_0370_7344;

/// FNV-1a over `bytes` starting from a seeded basis, finished with a
/// splitmix64 avalanche so low bits are usable as bucket indices.
pub(crate) fn seeded_hash(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Deterministic bag-of-tokens embedder.
///
/// Each token lands in one of `dim` buckets with a ±1 sign, both taken from
/// fixed-seed hashes; the bucket sums are L2-normalized. Texts sharing many
/// tokens therefore land close together, and the output depends only on the
/// text, never on process state.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    /// Bucket and sign a single token maps to.
    pub fn token_slot(&self, token: &str) -> (usize, f32) {
        let bytes = token.as_bytes();
        let bucket = (seeded_hash(TOKEN_SEED, bytes) % self.dim as u64) as usize;
        let sign = if seeded_hash(SIGN_SEED, bytes) & 1 == 0 {
            1.0
        } else {
            -1.0
        };
        (bucket, sign)
    }

    fn raw(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0.0f32; self.dim];
        for tok in tokenize(text) {
            let (b, s) = self.token_slot(&tok);
            v[b] += s;
        }
        v
    }
}

impl Embedder for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(EmbedError::EmptyInput { index: 0 });
        }
        match EmbeddingVector::normalize(self.raw(trimmed)) {
            Ok(v) => Ok(v),
            // Punctuation-only text, or tokens that cancel: hash the whole string.
            Err(_) => {
                let (b, s) = self.token_slot(trimmed);
                let mut v = vec![0.0f32; self.dim];
                v[b] = s;
                Ok(EmbeddingVector::normalize(v)?)
            }
        }
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        check_non_empty(texts)?;
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

/// Embedder talking to an HTTP server with the `{"texts": [...]}` ->
/// `{"vectors": [[...], ...]}` wire shape.
pub struct RemoteEmbedder {
    endpoint: String,
    dim: usize,
    timeout: Duration,
    max_batch: usize,
    retry: RetryPolicy,
    transport: Arc<dyn JsonTransport>,
    in_flight: Semaphore,
    max_in_flight: usize,
}

impl RemoteEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        dim: usize,
        timeout: Duration,
        max_batch: usize,
        retry: RetryPolicy,
        transport: Arc<dyn JsonTransport>,
    ) -> Self {
        Self {
            endpoint: endpoint.into(),
            dim,
            timeout,
            max_batch: max_batch.max(1),
            retry,
            transport,
            in_flight: Semaphore::new(4),
            max_in_flight: 4,
        }
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.max_in_flight = limit.max(1);
        self.in_flight = Semaphore::new(self.max_in_flight);
        self
    }

    fn call(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let body = json!({ "texts": texts });
        let (resp, attempts) = self.retry.run(
            |_| {
                let _permit = self.in_flight.acquire();
                self.transport.post_json(&self.endpoint, &body, self.timeout)
            },
            TransportError::is_retryable,
        );
        let resp = resp.map_err(|source| EmbedError::Transport { attempts, source })?;
        self.decode(texts.len(), &resp)
    }

    fn decode(&self, expected: usize, resp: &Value) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let rows = resp
            .get("vectors")
            .and_then(Value::as_array)
            .ok_or_else(|| EmbedError::Malformed("missing `vectors` array".into()))?;
        if rows.len() != expected {
            return Err(EmbedError::CountMismatch {
                expected,
                got: rows.len(),
            });
        }
        rows.iter()
            .map(|row| {
                let row = row
                    .as_array()
                    .ok_or_else(|| EmbedError::Malformed("vector is not an array".into()))?;
                if row.len() != self.dim {
                    return Err(EmbedError::Dimension {
                        expected: self.dim,
                        got: row.len(),
                    });
                }
                let values = row
                    .iter()
                    .map(|x| {
                        x.as_f64()
                            .map(|f| f as f32)
                            .ok_or_else(|| EmbedError::Malformed("non-numeric component".into()))
                    })
                    .collect::<Result<Vec<f32>, _>>()?;
                Ok(EmbeddingVector::normalize(values)?)
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyInput { index: 0 });
        }
        Ok(self.call(&[text.to_string()])?.remove(0))
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        check_non_empty(texts)?;
        let groups: Vec<&[String]> = texts.chunks(self.max_batch).collect();
        let mut out = Vec::with_capacity(texts.len());
        // Each wave runs up to `max_in_flight` requests concurrently.
        for wave in groups.chunks(self.max_in_flight) {
            let results: Vec<_> = std::thread::scope(|s| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|group| s.spawn(move || self.call(group)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("embedding worker panicked"))
                    .collect()
            });
            for r in results {
                out.extend(r?);
            }
        }
        Ok(out)
    }
}

/// Content-keyed memo table in front of another embedder.
pub struct MemoEmbedder<E> {
    inner: E,
    memo: Mutex<HashMap<String, EmbeddingVector>>,
}

impl<E: Embedder> MemoEmbedder<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            memo: Mutex::new(HashMap::new()),
        }
    }

    pub fn cached(&self) -> usize {
        self.memo.lock().map(|m| m.len()).unwrap_or(0)
    }
}

impl<E: Embedder> Embedder for MemoEmbedder<E> {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if let Some(v) = self.memo.lock().unwrap().get(text) {
            return Ok(v.clone());
        }
        let v = self.inner.embed_one(text)?;
        self.memo.lock().unwrap().insert(text.to_string(), v.clone());
        Ok(v)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        check_non_empty(texts)?;
        let missing: Vec<String> = {
            let memo = self.memo.lock().unwrap();
            let mut seen = std::collections::HashSet::new();
            texts
                .iter()
                .filter(|t| !memo.contains_key(*t) && seen.insert(t.as_str()))
                .cloned()
                .collect()
        };
        if !missing.is_empty() {
            let fresh = self.inner.embed_batch(&missing)?;
            let mut memo = self.memo.lock().unwrap();
            memo.extend(missing.into_iter().zip(fresh));
        }
        let memo = self.memo.lock().unwrap();
        Ok(texts.iter().map(|t| memo[t].clone()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedderKind {
    Remote,
    DeterministicTest,
}

#[derive(Debug, Clone)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    pub endpoint_url: Option<String>,
    pub dimension: usize,
    pub request_timeout: Duration,
    pub max_batch: usize,
    pub retry_limit: usize,
}

impl EmbedderSpec {
    pub fn deterministic(dimension: usize) -> Self {
        Self {
            kind: EmbedderKind::DeterministicTest,
            endpoint_url: None,
            dimension,
            request_timeout: Duration::from_secs(30),
            max_batch: 32,
            retry_limit: 2,
        }
    }

    pub fn remote(endpoint: impl Into<String>, dimension: usize) -> Self {
        Self {
            kind: EmbedderKind::Remote,
            endpoint_url: Some(endpoint.into()),
            ..Self::deterministic(dimension)
        }
    }

    /// Remote spec from `FINRAG_EMBED_URL`, if set.
    pub fn from_env(dimension: usize) -> Option<Self> {
        std::env::var("FINRAG_EMBED_URL")
            .ok()
            .filter(|u| !u.trim().is_empty())
            .map(|u| Self::remote(u, dimension))
    }

    pub fn validate(&self, config_dim: usize) -> Result<(), EmbedError> {
        if self.dimension != config_dim {
            return Err(EmbedError::Spec(format!(
                "embedder dimension {} does not match embed_dim {config_dim}",
                self.dimension
            )));
        }
        if self.dimension == 0 || self.max_batch == 0 {
            return Err(EmbedError::Spec("dimension and max_batch must be positive".into()));
        }
        if self.kind == EmbedderKind::Remote
            && self.endpoint_url.as_deref().is_none_or(|u| u.trim().is_empty())
        {
            return Err(EmbedError::Spec("remote embedder requires an endpoint".into()));
        }
        Ok(())
    }

    pub fn build(&self, config_dim: usize) -> Result<Box<dyn Embedder>, EmbedError> {
        self.validate(config_dim)?;
        Ok(match self.kind {
            EmbedderKind::DeterministicTest => Box::new(HashEmbedder::new(self.dimension)),
            EmbedderKind::Remote => Box::new(MemoEmbedder::new(RemoteEmbedder::new(
                self.endpoint_url.clone().unwrap_or_default(),
                self.dimension,
                self.request_timeout,
                self.max_batch,
                RetryPolicy::new(self.retry_limit),
                Arc::new(UreqTransport::default()),
            ))),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::cosine_similarity;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn empty_text_rejected() {
        let e = HashEmbedder::new(64);
        assert!(matches!(e.embed_one(""), Err(EmbedError::EmptyInput { .. })));
        assert!(matches!(e.embed_one("   \n"), Err(EmbedError::EmptyInput { .. })));
        assert!(matches!(
            e.embed_batch(&["a".into(), " ".into()]),
            Err(EmbedError::EmptyInput { index: 1 })
        ));
    }

    #[test]
    fn deterministic_and_self_similar() {
        let e = HashEmbedder::new(128);
        let a = e.embed_one("Net revenue rose 12% in fiscal 2023").unwrap();
        let b = e.embed_one("Net revenue rose 12% in fiscal 2023").unwrap();
        assert_eq!(a, b);
        assert!((cosine_similarity(&a, &b).unwrap() - 1.0).abs() < 1e-6);
        // Case and punctuation do not matter.
        let c = e.embed_one("net REVENUE rose, 12 % in fiscal 2023!").unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn disjoint_vocabularies_are_dissimilar() {
        let e = HashEmbedder::new(256);
        let a = e.embed_one("operating margin expanded across segments").unwrap();
        let b = e.embed_one("dividend policy unchanged for shareholders").unwrap();
        // Only bucket collisions can make these similar: with d=256 and 5
        // tokens each the expected overlap is tiny; compute it from the slots.
        let slots = |t: &str| tokenize(t).map(|k| e.token_slot(&k)).collect::<Vec<_>>();
        let (sa, sb) = (
            slots("operating margin expanded across segments"),
            slots("dividend policy unchanged for shareholders"),
        );
        let mut va = vec![0.0f64; 256];
        let mut vb = vec![0.0f64; 256];
        sa.iter().for_each(|&(k, s)| va[k] += f64::from(s));
        sb.iter().for_each(|&(k, s)| vb[k] += f64::from(s));
        let expected = va.iter().zip(&vb).map(|(x, y)| x * y).sum::<f64>()
            / (va.iter().map(|x| x * x).sum::<f64>().sqrt() * vb.iter().map(|x| x * x).sum::<f64>().sqrt());
        let got = cosine_similarity(&a, &b).unwrap();
        assert!((got - expected).abs() < 1e-6);
        assert!(got < 0.5);
    }

    #[test]
    fn punctuation_only_still_embeds() {
        let e = HashEmbedder::new(32);
        let v = e.embed_one("--- !!").unwrap();
        assert!((v.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn batch_matches_singletons() {
        let e = HashEmbedder::new(64);
        let texts: Vec<String> = ["alpha beta", "gamma", "delta epsilon zeta"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let batch = e.embed_batch(&texts).unwrap();
        for (t, v) in texts.iter().zip(&batch) {
            assert_eq!(&e.embed_one(t).unwrap(), v);
        }
        assert!(e.embed_batch(&[]).unwrap().is_empty());
    }

    /// Server stand-in: embeds with a hash embedder, scaled so the client must
    /// renormalize, and counts calls.
    struct FakeServer {
        inner: HashEmbedder,
        calls: AtomicUsize,
        max_seen: AtomicUsize,
        fail_first: AtomicUsize,
    }

    impl JsonTransport for FakeServer {
        fn post_json(&self, _url: &str, body: &Value, _t: Duration) -> Result<Value, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self
                .fail_first
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                .is_ok()
            {
                return Err(TransportError::Status { status: 503, body: "busy".into() });
            }
            let texts = body["texts"].as_array().unwrap();
            self.max_seen.fetch_max(texts.len(), Ordering::SeqCst);
            let vectors: Vec<Vec<f32>> = texts
                .iter()
                .map(|t| {
                    self.inner
                        .embed_one(t.as_str().unwrap())
                        .unwrap()
                        .as_slice()
                        .iter()
                        .map(|x| x * 3.0)
                        .collect()
                })
                .collect();
            Ok(json!({ "vectors": vectors }))
        }
    }

    fn server(fail_first: usize) -> Arc<FakeServer> {
        Arc::new(FakeServer {
            inner: HashEmbedder::new(16),
            calls: AtomicUsize::new(0),
            max_seen: AtomicUsize::new(0),
            fail_first: AtomicUsize::new(fail_first),
        })
    }

    fn remote(server: Arc<FakeServer>, max_batch: usize) -> RemoteEmbedder {
        RemoteEmbedder::new(
            "http://embed.local/v1",
            16,
            Duration::from_secs(1),
            max_batch,
            RetryPolicy::new(2).with_base_delay(Duration::ZERO),
            server,
        )
    }

    #[test]
    fn remote_batches_are_rechunked_in_order() {
        let srv = server(0);
        let emb = remote(srv.clone(), 32);
        let texts: Vec<String> = (0..1000).map(|i| format!("text number {i}")).collect();
        let out = emb.embed_batch(&texts).unwrap();
        // ceil(1000 / 32) = 32
        assert_eq!(srv.calls.load(Ordering::SeqCst), 32);
        assert!(srv.max_seen.load(Ordering::SeqCst) <= 32);
        assert_eq!(out.len(), 1000);
        let local = HashEmbedder::new(16);
        for (t, v) in texts.iter().zip(&out) {
            assert!((v.norm() - 1.0).abs() < 1e-6);
            let want = local.embed_one(t).unwrap();
            for (a, b) in v.as_slice().iter().zip(want.as_slice()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn remote_retries_then_succeeds() {
        let srv = server(2);
        let emb = remote(srv.clone(), 8);
        emb.embed_one("hello").unwrap();
        assert_eq!(srv.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn remote_exhausted_retries_fail_whole_batch() {
        let srv = server(100);
        let emb = remote(srv.clone(), 8);
        let err = emb
            .embed_batch(&["a".into(), "b".into()])
            .unwrap_err();
        assert!(matches!(err, EmbedError::Transport { attempts: 3, .. }));
        assert!(err.is_transport());
    }

    #[test]
    fn remote_rejects_short_responses() {
        struct Short;
        impl JsonTransport for Short {
            fn post_json(&self, _: &str, _: &Value, _: Duration) -> Result<Value, TransportError> {
                Ok(json!({ "vectors": [[1.0, 0.0]] }))
            }
        }
        let emb = RemoteEmbedder::new("u", 2, Duration::from_secs(1), 4, RetryPolicy::new(0), Arc::new(Short));
        assert!(matches!(
            emb.embed_batch(&["a".into(), "b".into()]),
            Err(EmbedError::CountMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn memo_avoids_repeat_calls() {
        let srv = server(0);
        let emb = MemoEmbedder::new(remote(srv.clone(), 8));
        let texts: Vec<String> = vec!["x".into(), "y".into(), "x".into()];
        let a = emb.embed_batch(&texts).unwrap();
        let b = emb.embed_batch(&texts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0], a[2]);
        assert_eq!(srv.calls.load(Ordering::SeqCst), 1);
        assert_eq!(emb.cached(), 2);
    }

    #[test]
    fn spec_validation() {
        assert!(EmbedderSpec::deterministic(64).build(64).is_ok());
        assert!(EmbedderSpec::deterministic(64).build(128).is_err());
        assert!(EmbedderSpec::remote("", 64).validate(64).is_err());
        assert!(EmbedderSpec::remote("http://localhost:1", 64).validate(64).is_ok());
    }
}
