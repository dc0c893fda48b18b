//! Admission-capped access to a backend and the OOD labeling composition.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::audit::{AuditEntry, AuditLog, REDACTED};
use super::backend::{remote_complete, Backend};
use super::transport::{HttpTransport, RetryPolicy, Sleeper, ThreadSleeper, Transport};
use super::{GenerationRequest, LlmError, DEFAULT_IN_FLIGHT, DEFAULT_TEMPERATURE, DEFAULT_TOP_P};
use crate::ingest::{LabelSpace, TrafficSample};
use crate::sps::{canonicalize_label, digest_for_sample, render_prompt, PromptBundle, SpsMode, StrictSource, TemplateSet};

#[derive(Default)]
struct AdmissionState {
    next_ticket: u64,
    serving: u64,
    in_flight: usize,
}

/// Counting semaphore that admits waiters in arrival order.
struct Admission {
    cap: usize,
    state: Mutex<AdmissionState>,
    cv: Condvar,
}

struct Permit<'a>(&'a Admission);

impl Admission {
    fn new(cap: usize) -> Self {
        Self { cap: cap.max(1), state: Mutex::default(), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        let ticket = st.next_ticket;
        st.next_ticket += 1;
        while st.serving != ticket || st.in_flight >= self.cap {
            st = self.cv.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        st.serving += 1;
        st.in_flight += 1;
        self.cv.notify_all();
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut st = self.0.state.lock().unwrap_or_else(|e| e.into_inner());
        st.in_flight -= 1;
        self.0.cv.notify_all();
    }
}

pub struct Gateway {
    pub backend: Backend,
    transport: Option<Arc<dyn Transport>>,
    sleeper: Arc<dyn Sleeper>,
    pub policy: RetryPolicy,
    admission: Admission,
    audit: Option<AuditLog>,
    temperature: f64,
    top_p: f64,
}

impl Gateway {
    /// Remote backends get a real HTTP transport; mocks get none at all.
    pub fn new(backend: Backend) -> Result<Self, LlmError> {
        let transport: Option<Arc<dyn Transport>> = match backend {
            Backend::Remote(_) => Some(Arc::new(
                HttpTransport::new(Duration::from_secs(60)).map_err(|e| LlmError::BackendUnreachable { attempts: 0, message: e.0 })?,
            )),
            _ => None,
        };
        Ok(Self {
            backend,
            transport,
            sleeper: Arc::new(ThreadSleeper),
            policy: RetryPolicy::default(),
            admission: Admission::new(DEFAULT_IN_FLIGHT),
            audit: None,
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
        })
    }

    pub fn with_transport(mut self, transport: Arc<dyn Transport>) -> Self {
        self.transport = Some(transport);
        self
    }

    pub fn with_sleeper(mut self, sleeper: Arc<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn with_in_flight_cap(mut self, cap: usize) -> Self {
        self.admission = Admission::new(cap);
        self
    }

    pub fn with_audit(mut self, audit: AuditLog) -> Self {
        self.audit = Some(audit);
        self
    }

    pub fn with_sampling(mut self, temperature: f64, top_p: f64) -> Self {
        self.temperature = temperature;
        self.top_p = top_p;
        self
    }

    /// A request carrying this gateway's sampling settings.
    pub fn request(&self, prompt: impl Into<String>, request_id: impl Into<String>) -> GenerationRequest {
        GenerationRequest { temperature: self.temperature, top_p: self.top_p, ..GenerationRequest::new(prompt, request_id) }
    }

    pub fn in_flight_cap(&self) -> usize {
        self.admission.cap
    }

    /// Text of the first completion.
    pub fn complete(&self, req: &GenerationRequest) -> Result<String, LlmError> {
        req.validate()?;
        let _permit = self.admission.acquire();
        let (result, attempts) = match &self.backend {
            Backend::MockKeyword(table) => (Ok(table.lookup(&req.prompt)), 1),
            Backend::MockOracle(gold) => (
                gold.get(&req.request_id)
                    .cloned()
                    .ok_or_else(|| LlmError::MalformedResponse(format!("oracle has no label for {:?}", req.request_id))),
                1,
            ),
            Backend::Remote(cfg) => {
                let transport = self.transport.as_deref().expect("remote backends always carry a transport");
                match remote_complete(cfg, req, transport, self.sleeper.as_ref(), &self.policy) {
                    Ok((text, n)) => (Ok(text), n),
                    Err(e) => {
                        let n = match &e {
                            LlmError::RateLimited { attempts } | LlmError::BackendUnreachable { attempts, .. } => *attempts,
                            LlmError::AuthMissing => 0,
                            _ => 1,
                        };
                        (Err(e), n)
                    }
                }
            }
        };
        if let Some(audit) = &self.audit {
            let (endpoint, authorization) = match &self.backend {
                Backend::Remote(cfg) => (Some(cfg.endpoint()), Some(format!("Bearer {REDACTED}"))),
                _ => (None, None),
            };
            audit.record(&AuditEntry {
                request_id: &req.request_id,
                backend: self.backend.kind(),
                endpoint,
                authorization,
                request: req,
                response: result.as_deref().ok(),
                error: result.as_ref().err().map(ToString::to_string),
                attempts,
            })?;
        }
        result
    }
}

/// Outcome of labeling one OOD-routed sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodPrediction {
    /// A candidate label or `UNMAPPED`.
    pub label: String,
    pub raw_text: String,
    pub prompt: PromptBundle,
}

/// Digest, prompt, one generation, canonicalization.
pub fn classify_ood(
    gateway: &Gateway,
    templates: &TemplateSet,
    sample: &TrafficSample,
    mode: SpsMode,
    space: &LabelSpace,
    strict_source: StrictSource,
    detector_route: Option<&str>,
) -> Result<OodPrediction, LlmError> {
    let mut digest = digest_for_sample(sample);
    digest.detector_route = detector_route.map(str::to_string);
    let prompt = render_prompt(templates, mode, space, strict_source, &digest)?;
    let raw_text = gateway.complete(&gateway.request(prompt.rendered_text.clone(), sample.id.clone()))?;
    let label = canonicalize_label(&raw_text, &prompt.candidates);
    Ok(OodPrediction { label, raw_text, prompt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Origin;
    use crate::llm::backend::{KeywordTable, RemoteConfig};
    use crate::llm::transport::{HttpResponse, TransportError};
    use crate::sps::UNMAPPED;
    use std::collections::BTreeMap;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn space() -> LabelSpace {
        LabelSpace::new(vec!["QQMail".into(), "QQMusic".into()], vec!["WeChat".into(), "Weibo".into()])
    }

    fn sample(id: &str) -> TrafficSample {
        TrafficSample { id: id.into(), tokens: vec![1, 2, 3], label: Some("WeChat".into()), origin: Origin::Synthetic }
    }

    #[test]
    fn oracle_returns_gold() {
        let gold = BTreeMap::from([("a".to_string(), "WeChat".to_string())]);
        let g = Gateway::new(Backend::MockOracle(gold)).unwrap();
        let p = classify_ood(&g, &TemplateSet::shipped(), &sample("a"), SpsMode::Strict, &space(), StrictSource::Ood, None).unwrap();
        assert_eq!(p.label, "WeChat");
        assert_eq!(p.prompt.candidates, ["WeChat", "Weibo"]);
    }

    #[test]
    fn noisy_and_unrelated_answers() {
        let table = |text: &str| KeywordTable { rules: vec![], fallback: text.into() };
        let g = Gateway::new(Backend::MockKeyword(table("  wechat "))).unwrap();
        let p = classify_ood(&g, &TemplateSet::shipped(), &sample("a"), SpsMode::Complete, &space(), StrictSource::Ood, None).unwrap();
        assert_eq!(p.label, "WeChat");
        let g = Gateway::new(Backend::MockKeyword(table("I cannot tell"))).unwrap();
        let p = classify_ood(&g, &TemplateSet::shipped(), &sample("a"), SpsMode::Complete, &space(), StrictSource::Ood, Some("OOD")).unwrap();
        assert_eq!(p.label, UNMAPPED);
        assert_eq!(p.raw_text, "I cannot tell");
        assert!(p.prompt.rendered_text.contains("detector_route:OOD"));
    }

    /// Counts calls and tracks peak concurrency.
    #[derive(Default)]
    struct Counting {
        calls: AtomicUsize,
        active: AtomicUsize,
        peak: AtomicUsize,
    }

    impl Transport for Counting {
        fn post_json(&self, _: &str, _: &str, _: &serde_json::Value) -> Result<HttpResponse, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            self.active.fetch_sub(1, Ordering::SeqCst);
            Ok(HttpResponse { status: 200, body: r#"{"choices":[{"message":{"content":"Weibo"}}]}"#.into() })
        }
    }

    #[test]
    fn mocks_never_touch_transport() {
        let counter = Arc::new(Counting::default());
        let gold = BTreeMap::from([("a".to_string(), "WeChat".to_string())]);
        for backend in [Backend::MockOracle(gold), Backend::MockKeyword(KeywordTable::default())] {
            let g = Gateway::new(backend).unwrap().with_transport(counter.clone());
            let _ = g.complete(&GenerationRequest::new("p", "a"));
        }
        assert_eq!(counter.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn in_flight_cap_holds() {
        let counter = Arc::new(Counting::default());
        let cfg = RemoteConfig { base_url: "http://x".into(), model: "m".into(), api_key: Some("k".into()) };
        let g = Gateway::new(Backend::Remote(cfg)).unwrap().with_transport(counter.clone()).with_in_flight_cap(3);
        std::thread::scope(|s| {
            for i in 0..12 {
                let g = &g;
                s.spawn(move || g.complete(&GenerationRequest::new("p", format!("r{i}"))).unwrap());
            }
        });
        assert_eq!(counter.calls.load(Ordering::SeqCst), 12);
        assert!(counter.peak.load(Ordering::SeqCst) <= 3);
    }

    #[test]
    fn audit_log_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.jsonl");
        let cfg = RemoteConfig { base_url: "http://x".into(), model: "m".into(), api_key: Some("topsecret".into()) };
        let g = Gateway::new(Backend::Remote(cfg))
            .unwrap()
            .with_transport(Arc::new(Counting::default()))
            .with_audit(AuditLog::open(&path, vec!["topsecret".into()]).unwrap());
        assert_eq!(g.complete(&GenerationRequest::new("p", "r1")).unwrap(), "Weibo");
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"request_id\":\"r1\""));
        assert!(!text.contains("topsecret"));
    }
}
