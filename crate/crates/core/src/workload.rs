//! Workload index in `[0, 10]` from a request's free-text description.
//!
//! Scores come from a chat-completions endpoint when one is configured,
//! memoized in an append-only JSON-lines cache, with a deterministic
//! text heuristic as the offline fallback.

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use chrono::{Datelike, NaiveDate};
use log::{debug, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAX_WORKLOAD: f64 = 10.0;
pub const DEFAULT_TEMPLATE: &str = include_str!("../prompts/workload.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadSource {
    Llm,
    Fallback,
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadScore {
    pub w: f64,
    pub source: WorkloadSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

impl WorkloadScore {
    pub fn missing() -> Self {
        Self {
            w: 0.0,
            source: WorkloadSource::Missing,
            rationale: None,
        }
    }
}

fn split_segments(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    for part in lower.split([',', ';', '\n']) {
        let mut current: Vec<&str> = Vec::new();
        for word in part.split_whitespace() {
            if word == "and" || word == "&" {
                if !current.is_empty() {
                    out.push(current.join(" "));
                    current.clear();
                }
            } else {
                current.push(word);
            }
        }
        if !current.is_empty() {
            out.push(current.join(" "));
        }
    }
    out
}

/// Offline heuristic: `1 + sum of quantities + 0.5 * distinct items`,
/// clamped to `[0, 10]`. Each comma- or "and"-separated segment is one item
/// whose quantity is its leading integer (1 when absent).
pub fn fallback_score(description: &str) -> f64 {
    let segments = split_segments(description);
    if segments.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    let mut items = BTreeSet::new();
    for seg in &segments {
        let mut words = seg.split_whitespace();
        let first = words.next().unwrap_or("");
        let digits: String = first.chars().take_while(|c| c.is_ascii_digit()).collect();
        let (qty, rest) = match digits.parse::<u32>() {
            Ok(q) if digits.len() == first.len() => (f64::from(q), words.collect::<Vec<_>>().join(" ")),
            Ok(q) => (f64::from(q), seg[digits.len()..].trim().to_string()),
            Err(_) => (1.0, seg.clone()),
        };
        total += qty;
        items.insert(if rest.is_empty() { seg.clone() } else { rest });
    }
    (1.0 + total + 0.5 * items.len() as f64).clamp(0.0, MAX_WORKLOAD)
}

/// Extracts the first number in a model response and clamps it to range.
pub fn parse_score(response: &str) -> Option<f64> {
    let bytes = response.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = if i > 0 && bytes[i - 1] == b'-' { i - 1 } else { i };
            let mut end = i;
            while end < bytes.len() && bytes[end].is_ascii_digit() {
                end += 1;
            }
            if end + 1 < bytes.len() && bytes[end] == b'.' && bytes[end + 1].is_ascii_digit() {
                end += 1;
                while end < bytes.len() && bytes[end].is_ascii_digit() {
                    end += 1;
                }
            }
            let v: f64 = response[start..end].parse().ok()?;
            return Some(v.clamp(0.0, MAX_WORKLOAD));
        }
        i += 1;
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmClientConfig {
    /// Full chat-completions URL; scoring uses the fallback when empty.
    pub endpoint: String,
    pub model: String,
    /// Prompt template file; the built-in template when empty.
    pub prompt_template: Option<PathBuf>,
    pub timeout_secs: f64,
    pub max_retries: usize,
    pub cache_path: Option<PathBuf>,
    pub parallelism: usize,
    pub api_key_env: Option<String>,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: "llama3:8b".into(),
            prompt_template: None,
            timeout_secs: 30.0,
            max_retries: 2,
            cache_path: None,
            parallelism: 4,
            api_key_env: None,
        }
    }
}

impl LlmClientConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0) {
            return Err(Error::Config("llm timeout_secs must be positive".into()));
        }
        if self.parallelism == 0 {
            return Err(Error::Config("llm parallelism must be at least 1".into()));
        }
        Ok(())
    }

    pub fn template(&self) -> Result<String> {
        match &self.prompt_template {
            Some(p) => Ok(std::fs::read_to_string(p)?),
            None => Ok(DEFAULT_TEMPLATE.to_string()),
        }
    }
}

/// Anything that turns a prompt into a completion.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(config: &LlmClientConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| Error::Llm(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: config.endpoint.clone(),
            model: config.model.clone(),
            api_key: config.api_key_env.as_ref().and_then(|k| std::env::var(k).ok()),
        })
    }
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, prompt: &str) -> Result<String> {
        let body = serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Llm(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(Error::Llm(format!("endpoint returned {}", resp.status())));
        }
        let v: serde_json::Value = resp.json().map_err(|e| Error::Llm(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::Llm("response has no choices[0].message.content".into()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheLine {
    key: String,
    w: f64,
    #[serde(default)]
    rationale: Option<String>,
}

/// Append-only JSON-lines score cache.
pub struct WorkloadCache {
    entries: HashMap<String, (f64, Option<String>)>,
    file: Option<Mutex<File>>,
}

impl WorkloadCache {
    pub fn in_memory() -> Self {
        Self {
            entries: HashMap::new(),
            file: None,
        }
    }

    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(&line) {
                    Ok(c) => {
                        entries.insert(c.key, (c.w, c.rationale));
                    }
                    Err(e) => warn!("skipping malformed cache line {}: {e}", n + 1),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            entries,
            file: Some(Mutex::new(file)),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&(f64, Option<String>)> {
        self.entries.get(key)
    }

    fn append(&self, line: &CacheLine) -> Result<()> {
        if let Some(f) = &self.file {
            let mut f = f.lock().expect("cache file lock");
            writeln!(f, "{}", serde_json::to_string(line)?)?;
            f.flush()?;
        }
        Ok(())
    }
}

/// Calendar fields handed to the model alongside the text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DateFields {
    pub date: NaiveDate,
}

impl DateFields {
    pub fn render(&self) -> (String, String, u32, i32) {
        (
            self.date.format("%Y-%m-%d").to_string(),
            self.date.format("%A").to_string(),
            self.date.iso_week().week(),
            self.date.year(),
        )
    }
}

pub fn render_prompt(template: &str, description: &str, request_type: &str, date: DateFields) -> String {
    let (d, wd, week, year) = date.render();
    template
        .replace("{description}", description)
        .replace("{request_type}", request_type)
        .replace("{date}", &d)
        .replace("{weekday}", &wd)
        .replace("{week}", &week.to_string())
        .replace("{year}", &year.to_string())
}

pub fn cache_key(model: &str, template: &str, description: &str, date: DateFields) -> String {
    let template_hash = Sha256::digest(template.as_bytes());
    let mut h = Sha256::new();
    h.update(model.as_bytes());
    h.update([0]);
    h.update(template_hash);
    h.update([0]);
    h.update(description.as_bytes());
    h.update([0]);
    h.update(date.render().0.as_bytes());
    hex::encode(h.finalize())
}

/// Scores descriptions through an optional backend and a cache.
pub struct WorkloadScorer {
    backend: Option<Box<dyn CompletionBackend>>,
    cache: WorkloadCache,
    model: String,
    template: String,
    max_retries: usize,
    parallelism: usize,
    calls: std::sync::atomic::AtomicUsize,
    cache_lock: Mutex<HashMap<String, (f64, Option<String>)>>,
}

impl WorkloadScorer {
    /// Fallback-only scorer.
    pub fn offline() -> Self {
        Self::with_backend(
            None,
            WorkloadCache::in_memory(),
            &LlmClientConfig::default(),
            DEFAULT_TEMPLATE.into(),
        )
    }

    pub fn from_config(config: &LlmClientConfig) -> Result<Self> {
        config.validate()?;
        let backend: Option<Box<dyn CompletionBackend>> = if config.endpoint.is_empty() {
            None
        } else {
            Some(Box::new(HttpBackend::new(config)?))
        };
        let cache = match &config.cache_path {
            Some(p) => WorkloadCache::open(p)?,
            None => WorkloadCache::in_memory(),
        };
        Ok(Self::with_backend(backend, cache, config, config.template()?))
    }

    pub fn with_backend(
        backend: Option<Box<dyn CompletionBackend>>,
        cache: WorkloadCache,
        config: &LlmClientConfig,
        template: String,
    ) -> Self {
        Self {
            backend,
            cache,
            model: config.model.clone(),
            template,
            max_retries: config.max_retries,
            parallelism: config.parallelism.max(1),
            calls: Default::default(),
            cache_lock: Mutex::new(HashMap::new()),
        }
    }

    /// Number of backend calls issued so far.
    pub fn backend_calls(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::SeqCst)
    }

    /// Cached model score if present, else the heuristic. Never calls the
    /// backend.
    pub fn score_cached(&self, description: Option<&str>, date: NaiveDate) -> WorkloadScore {
        let text = match description.map(str::trim) {
            Some(t) if !t.is_empty() => t,
            _ => return WorkloadScore::missing(),
        };
        let key = cache_key(&self.model, &self.template, text, DateFields { date });
        match self.lookup(&key) {
            Some((w, rationale)) => WorkloadScore {
                w,
                source: WorkloadSource::Llm,
                rationale,
            },
            None => WorkloadScore {
                w: fallback_score(text),
                source: WorkloadSource::Fallback,
                rationale: None,
            },
        }
    }

    fn lookup(&self, key: &str) -> Option<(f64, Option<String>)> {
        if let Some(v) = self.cache.get(key) {
            return Some(v.clone());
        }
        self.cache_lock.lock().expect("cache lock").get(key).cloned()
    }

    pub fn score(&self, description: Option<&str>, request_type: &str, date: NaiveDate) -> WorkloadScore {
        let text = match description.map(str::trim) {
            Some(t) if !t.is_empty() => t,
            _ => return WorkloadScore::missing(),
        };
        let fields = DateFields { date };
        if let Some(backend) = &self.backend {
            let key = cache_key(&self.model, &self.template, text, fields);
            if let Some((w, rationale)) = self.lookup(&key) {
                return WorkloadScore {
                    w,
                    source: WorkloadSource::Llm,
                    rationale,
                };
            }
            let prompt = render_prompt(&self.template, text, request_type, fields);
            for attempt in 0..=self.max_retries {
                self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                match backend.complete(&prompt) {
                    Ok(reply) => match parse_score(&reply) {
                        Some(w) => {
                            let rationale = Some(reply.trim().to_string());
                            let line = CacheLine {
                                key: key.clone(),
                                w,
                                rationale: rationale.clone(),
                            };
                            let mut mem = self.cache_lock.lock().expect("cache lock");
                            if let Err(e) = self.cache.append(&line) {
                                warn!("could not persist workload cache entry: {e}");
                            }
                            mem.insert(key, (w, rationale.clone()));
                            return WorkloadScore {
                                w,
                                source: WorkloadSource::Llm,
                                rationale,
                            };
                        }
                        None => debug!("attempt {attempt}: no number in reply {reply:?}"),
                    },
                    Err(e) => debug!("attempt {attempt}: {e}"),
                }
            }
            warn!("workload scoring fell back to the heuristic for {text:?}");
        }
        WorkloadScore {
            w: fallback_score(text),
            source: WorkloadSource::Fallback,
            rationale: None,
        }
    }

    /// Scores many items with bounded parallelism; output is index-aligned.
    pub fn score_all(&self, items: &[(Option<&str>, &str, NaiveDate)]) -> Vec<WorkloadScore> {
        if self.backend.is_none() || self.parallelism == 1 {
            return items.iter().map(|(d, t, day)| self.score(*d, t, *day)).collect();
        }
        let chunk = items.len().div_ceil(self.parallelism).max(1);
        std::thread::scope(|s| {
            let handles: Vec<_> = items
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(|(d, t, day)| self.score(*d, t, *day)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("scoring thread"))
                .collect()
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WorkloadRow {
    request_id: String,
    w: f64,
    source: WorkloadSource,
}

/// Writes `request_id,w,source` rows.
pub fn write_workloads<W: Write>(w: W, rows: &[(String, WorkloadScore)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for (id, s) in rows {
        out.serialize(WorkloadRow {
            request_id: id.clone(),
            w: s.w,
            source: s.source,
        })?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_workloads<R: std::io::Read>(r: R) -> Result<HashMap<String, WorkloadScore>> {
    let mut out = HashMap::new();
    for row in csv::Reader::from_reader(r).deserialize::<WorkloadRow>() {
        let row = row?;
        if !(0.0..=MAX_WORKLOAD).contains(&row.w) {
            return Err(Error::InvalidInput(format!(
                "workload {} for {} outside [0, 10]",
                row.w, row.request_id
            )));
        }
        out.insert(
            row.request_id,
            WorkloadScore {
                w: row.w,
                source: row.source,
                rationale: None,
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;

    #[test]
    fn fallback_examples() {
        assert_eq!(fallback_score("2 chairs"), 3.5);
        assert_eq!(fallback_score("sofa pick up in rear"), 2.5);
        assert_eq!(fallback_score("2 bags of leaves"), 3.5);
        // 1 + (2 + 1 + 3 + 2 + 1 + 1) + 0.5 * 6 = 14, clamped.
        assert_eq!(
            fallback_score("2 mattress, bed frame, 3 desk, 2 cabinet, hamper, flag pole"),
            10.0
        );
        assert_eq!(fallback_score("chair and table"), 1.0 + 2.0 + 1.0);
        let forty = (0..40).map(|i| format!("item{i}")).collect::<Vec<_>>().join(", ");
        assert_eq!(fallback_score(&forty), 10.0);
        assert_eq!(fallback_score("   "), 0.0);
    }

    #[test]
    fn missing_description_scores_zero() {
        let s = WorkloadScorer::offline();
        let day = NaiveDate::from_ymd_opt(2023, 5, 1).unwrap();
        assert_eq!(s.score(None, "Bulk Trash", day), WorkloadScore::missing());
        assert_eq!(s.score(Some("  \t"), "Bulk Trash", day).w, 0.0);
        assert_eq!(
            s.score(Some("2 chairs"), "Bulk Trash", day).source,
            WorkloadSource::Fallback
        );
    }

    #[test]
    fn parses_first_number() {
        assert_eq!(parse_score("8"), Some(8.0));
        assert_eq!(parse_score("Effort: 6.5 out of 10"), Some(6.5));
        assert_eq!(parse_score("about 42"), Some(10.0));
        assert_eq!(parse_score("-3"), Some(0.0));
        assert_eq!(parse_score("no idea"), None);
    }

    #[test]
    fn template_carries_the_instruction() {
        assert!(DEFAULT_TEMPLATE.contains("rate the effort required on a 0–10 scale, answer with a single number"));
        let day = NaiveDate::from_ymd_opt(2023, 5, 1).unwrap();
        let p = render_prompt(
            DEFAULT_TEMPLATE,
            "2 bags of leaves",
            "Bagged yard waste",
            DateFields { date: day },
        );
        assert!(p.contains("2 bags of leaves") && p.contains("Monday") && p.contains("2023"));
        assert!(!p.contains('{'));
    }

    struct Counting {
        calls: Arc<AtomicUsize>,
        reply: String,
    }

    impl CompletionBackend for Counting {
        fn complete(&self, _: &str) -> Result<String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(self.reply.clone())
        }
    }

    #[test]
    fn unparsable_replies_retry_then_fall_back() {
        let calls = Arc::new(AtomicUsize::new(0));
        let backend = Counting {
            calls: calls.clone(),
            reply: "hard to say".into(),
        };
        let cfg = LlmClientConfig {
            max_retries: 2,
            ..Default::default()
        };
        let s = WorkloadScorer::with_backend(
            Some(Box::new(backend)),
            WorkloadCache::in_memory(),
            &cfg,
            DEFAULT_TEMPLATE.into(),
        );
        let day = NaiveDate::from_ymd_opt(2023, 5, 1).unwrap();
        let out = s.score(Some("2 chairs"), "Bulk Trash", day);
        assert_eq!(out.source, WorkloadSource::Fallback);
        assert_eq!(out.w, 3.5);
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn cache_file_prevents_requery() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let day = NaiveDate::from_ymd_opt(2023, 5, 1).unwrap();
        let cfg = LlmClientConfig::default();
        let items = ["2 chairs", "sofa", "2 chairs", "3 bags of leaves"];
        let mut first = Vec::new();
        for round in 0..2 {
            let calls = Arc::new(AtomicUsize::new(0));
            let backend = Counting {
                calls: calls.clone(),
                reply: "7".into(),
            };
            let s = WorkloadScorer::with_backend(
                Some(Box::new(backend)),
                WorkloadCache::open(&path).unwrap(),
                &cfg,
                DEFAULT_TEMPLATE.into(),
            );
            let scores: Vec<_> = items.iter().map(|d| s.score(Some(d), "Bulk Trash", day)).collect();
            if round == 0 {
                assert_eq!(calls.load(Ordering::SeqCst), 3);
                first = scores;
            } else {
                assert_eq!(calls.load(Ordering::SeqCst), 0);
                assert_eq!(scores, first);
            }
        }
    }

    #[test]
    fn workload_file_round_trip() {
        let rows = vec![
            ("a".to_string(), WorkloadScore::missing()),
            (
                "b".to_string(),
                WorkloadScore {
                    w: 3.5,
                    source: WorkloadSource::Fallback,
                    rationale: None,
                },
            ),
        ];
        let mut buf = Vec::new();
        write_workloads(&mut buf, &rows).unwrap();
        let back = read_workloads(&buf[..]).unwrap();
        assert_eq!(back["b"], rows[1].1);
        assert_eq!(back["a"], rows[0].1);
    }

    proptest! {
        #[test]
        fn fallback_is_bounded_and_pure(text in ".{0,200}") {
            let a = fallback_score(&text);
            prop_assert!((0.0..=10.0).contains(&a));
            prop_assert_eq!(a.to_bits(), fallback_score(&text).to_bits());
        }

        #[test]
        fn parse_score_is_bounded(text in ".{0,60}") {
            if let Some(v) = parse_score(&text) {
                prop_assert!((0.0..=10.0).contains(&v));
            }
        }
    }
}
