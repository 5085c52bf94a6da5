//! Episodic context cache and persistent procedural memory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::ZoneId;
use crate::tasks::TaskId;

pub const PSM_CAPACITY: usize = 10;
pub const MERGE_THRESHOLD: f64 = 0.6;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("cache label \"{0}\" is already used in this episode")]
    DuplicateLabel(String),
    #[error("no cache entry labelled \"{0}\"")]
    NotFound(String),
    #[error("cache entry created at tick {got} precedes the latest entry at tick {latest}")]
    NonMonotone { got: u64, latest: u64 },
    #[error("insight must be one non-empty sentence: \"{0}\"")]
    InvalidInsight(String),
    #[error("reflection output is not a JSON array of strings: {0}")]
    MalformedReflection(String),
    #[error("memory file {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CacheKey {
    #[serde(default)]
    pub zones: BTreeSet<ZoneId>,
    /// `[start, end]` seconds since midnight.
    pub window: (f64, f64),
    #[serde(default)]
    pub task: Option<TaskId>,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub label: String,
    pub key: CacheKey,
    /// Serialized artifact, returned byte for byte.
    pub value: String,
    pub created_at: u64,
}

/// Intra-episode store of analysis artifacts, in insertion order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ContextCache {
    entries: Vec<CacheEntry>,
}

impl ContextCache {
    pub fn put(&mut self, label: &str, value: String, key: CacheKey, created_at: u64) -> Result<(), MemoryError> {
        if self.entries.iter().any(|e| e.label == label) {
            return Err(MemoryError::DuplicateLabel(label.to_owned()));
        }
        if let Some(last) = self.entries.last() {
            if created_at < last.created_at {
                return Err(MemoryError::NonMonotone {
                    got: created_at,
                    latest: last.created_at,
                });
            }
        }
        self.entries.push(CacheEntry {
            label: label.to_owned(),
            key,
            value,
            created_at,
        });
        Ok(())
    }

    pub fn get(&self, label: &str) -> Result<&str, MemoryError> {
        self.entries
            .iter()
            .find(|e| e.label == label)
            .map(|e| e.value.as_str())
            .ok_or_else(|| MemoryError::NotFound(label.to_owned()))
    }

    pub fn list(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.label.as_str()).collect()
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Entries ranked by task match, kind match, window overlap, zone
    /// overlap, recency, then label.
    pub fn retrieve(&self, query: &CacheKey) -> Vec<&CacheEntry> {
        let mut ranked: Vec<(RetrievalScore, &CacheEntry)> =
            self.entries.iter().map(|e| (RetrievalScore::of(e, query), e)).collect();
        ranked.sort_by(|(a, ea), (b, eb)| b.cmp_key(a).then_with(|| ea.label.cmp(&eb.label)));
        ranked.into_iter().map(|(_, e)| e).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalScore {
    pub task_match: bool,
    pub kind_match: bool,
    pub window_overlap: f64,
    pub zone_overlap: f64,
    pub created_at: u64,
}

impl RetrievalScore {
    pub fn of(entry: &CacheEntry, query: &CacheKey) -> Self {
        Self {
            task_match: entry.key.task == query.task,
            kind_match: entry.key.kind == query.kind,
            window_overlap: window_overlap(entry.key.window, query.window),
            zone_overlap: set_jaccard(&entry.key.zones, &query.zones),
            created_at: entry.created_at,
        }
    }

    fn cmp_key(&self, other: &Self) -> std::cmp::Ordering {
        self.task_match
            .cmp(&other.task_match)
            .then(self.kind_match.cmp(&other.kind_match))
            .then(self.window_overlap.total_cmp(&other.window_overlap))
            .then(self.zone_overlap.total_cmp(&other.zone_overlap))
            .then(self.created_at.cmp(&other.created_at))
    }
}

/// Fraction of the query window covered by the entry window.
pub fn window_overlap(entry: (f64, f64), query: (f64, f64)) -> f64 {
    let len = query.1 - query.0;
    if len <= 0.0 {
        return f64::from(u8::from(entry.0 <= query.0 && query.0 <= entry.1));
    }
    let overlap = (entry.1.min(query.1) - entry.0.max(query.0)).max(0.0);
    overlap / len
}

fn set_jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Case-folded, punctuation-stripped word set.
pub fn tokens(text: &str) -> BTreeSet<String> {
    text.chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_lowercase().next().unwrap_or(c)
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

pub fn jaccard(a: &str, b: &str) -> f64 {
    set_jaccard(&tokens(a), &tokens(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProceduralInsight {
    pub text: String,
    pub weight: f64,
    pub source_episodes: BTreeSet<u64>,
    pub last_updated: u64,
}

fn is_single_sentence(text: &str) -> bool {
    let t = text.trim();
    if t.is_empty() || t.contains('\n') {
        return false;
    }
    let chars: Vec<char> = t.chars().collect();
    !chars
        .windows(2)
        .any(|w| matches!(w[0], '.' | '!' | '?') && w[1].is_whitespace())
}

impl ProceduralInsight {
    pub fn candidate(text: &str, episode: u64) -> Result<Self, MemoryError> {
        if !is_single_sentence(text) {
            return Err(MemoryError::InvalidInsight(text.to_owned()));
        }
        Ok(Self {
            text: text.trim().to_owned(),
            weight: 1.0,
            source_episodes: BTreeSet::from([episode]),
            last_updated: episode,
        })
    }
}

/// Capacity-bounded store of one-sentence insights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProceduralMemory {
    items: Vec<ProceduralInsight>,
}

impl ProceduralMemory {
    pub fn items(&self) -> &[ProceduralInsight] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Inserts or merges each candidate, then prunes to capacity.
    ///
    /// A candidate merges into the most similar entry with token Jaccard
    /// ≥ 0.6 (the newer text is kept and the weight grows by one). Entries
    /// that become similar to the merged text are folded in as well.
    pub fn update(&mut self, candidates: impl IntoIterator<Item = ProceduralInsight>) {
        for c in candidates {
            let best = self
                .items
                .iter()
                .enumerate()
                .map(|(k, e)| (k, jaccard(&e.text, &c.text)))
                .filter(|(_, j)| *j >= MERGE_THRESHOLD)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((k, _)) => {
                    let e = &mut self.items[k];
                    e.text = c.text;
                    e.weight += 1.0;
                    e.source_episodes.extend(c.source_episodes);
                    e.last_updated = e.last_updated.max(c.last_updated);
                    self.fold_similar(k);
                }
                None => self.items.push(ProceduralInsight { weight: 1.0, ..c }),
            }
            while self.items.len() > PSM_CAPACITY {
                self.prune_one();
            }
        }
    }

    fn fold_similar(&mut self, mut k: usize) {
        while let Some(j) = (0..self.items.len())
            .find(|&j| j != k && jaccard(&self.items[j].text, &self.items[k].text) >= MERGE_THRESHOLD)
        {
            let other = self.items.remove(j);
            if j < k {
                k -= 1;
            }
            let e = &mut self.items[k];
            e.weight += other.weight;
            e.source_episodes.extend(other.source_episodes);
            e.last_updated = e.last_updated.max(other.last_updated);
        }
    }

    /// Removes the lowest-weight entry; among ties the least recently
    /// updated, then the earliest stored.
    fn prune_one(&mut self) {
        let victim = self
            .items
            .iter()
            .enumerate()
            .min_by(|(ka, a), (kb, b)| {
                a.weight
                    .total_cmp(&b.weight)
                    .then(a.last_updated.cmp(&b.last_updated))
                    .then(ka.cmp(kb))
            })
            .map(|(k, _)| k);
        if let Some(k) = victim {
            self.items.remove(k);
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MemoryError> {
        let path = path.as_ref();
        let io = |message: String| MemoryError::Io {
            path: path.display().to_string(),
            message,
        };
        match std::fs::read_to_string(path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| io(e.to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(io(e.to_string())),
        }
    }

    /// Writes through a temporary file and rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MemoryError> {
        let path = path.as_ref();
        let io = |e: std::io::Error| MemoryError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let text = serde_json::to_string_pretty(&self.items).expect("serializable");
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, text).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    /// Prompt section listing every insight verbatim.
    pub fn render_for_prompt(&self) -> String {
        if self.items.is_empty() {
            return "(none)".into();
        }
        self.items
            .iter()
            .enumerate()
            .map(|(k, i)| format!("{}. {}", k + 1, i.text))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Parses a reflection reply: a JSON array of at most ten strings. Longer
/// arrays are truncated with a warning.
pub fn parse_reflection(raw: &str) -> Result<(Vec<String>, Vec<String>), MemoryError> {
    let start = raw
        .find('[')
        .ok_or_else(|| MemoryError::MalformedReflection("no array".into()))?;
    let end = raw
        .rfind(']')
        .ok_or_else(|| MemoryError::MalformedReflection("no array".into()))?;
    if end < start {
        return Err(MemoryError::MalformedReflection("no array".into()));
    }
    let mut items: Vec<String> =
        serde_json::from_str(&raw[start..=end]).map_err(|e| MemoryError::MalformedReflection(e.to_string()))?;
    let mut warnings = Vec::new();
    if items.len() > PSM_CAPACITY {
        warnings.push(format!(
            "reflection returned {} items; keeping the first {PSM_CAPACITY}",
            items.len()
        ));
        items.truncate(PSM_CAPACITY);
    }
    Ok((items, warnings))
}

fn clock_label(t: f64) -> String {
    let m = (t / 60.0).floor() as i64;
    format!("{:02}:{:02}", (m / 60) % 24, m % 60)
}

/// One templated sentence per task whose relative improvement is non-zero.
pub fn fallback_insights(
    task_ri: &BTreeMap<TaskId, f64>,
    plan_kinds: &BTreeMap<TaskId, String>,
    window: (f64, f64),
) -> Vec<String> {
    let span = format!("{}-{}", clock_label(window.0), clock_label(window.1));
    task_ri
        .iter()
        .filter(|(_, ri)| **ri != 0.0)
        .map(|(task, ri)| {
            let verb = if *ri > 0.0 { "improved" } else { "regressed" };
            let kind = plan_kinds.get(task).map_or("default", String::as_str);
            format!(
                "Task {task} {verb} by {:.1}% under plan kind {kind} during window {span}.",
                ri.abs() * 100.0
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummarySource {
    External,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub insights: Vec<String>,
    pub source: SummarySource,
    /// External output was present but unusable.
    pub flagged: bool,
    pub warnings: Vec<String>,
}

/// Uses the external reflection reply when it parses, else templated insights.
pub fn summarize_episode(
    external_reply: Option<&str>,
    task_ri: &BTreeMap<TaskId, f64>,
    plan_kinds: &BTreeMap<TaskId, String>,
    window: (f64, f64),
) -> EpisodeSummary {
    let fallback = |flagged: bool, warnings: Vec<String>| EpisodeSummary {
        insights: fallback_insights(task_ri, plan_kinds, window),
        source: SummarySource::Fallback,
        flagged,
        warnings,
    };
    match external_reply.map(parse_reflection) {
        None => fallback(false, Vec::new()),
        Some(Ok((insights, warnings))) => EpisodeSummary {
            insights,
            source: SummarySource::External,
            flagged: false,
            warnings,
        },
        Some(Err(e)) => fallback(true, vec![e.to_string()]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(task: Option<TaskId>, kind: &str, window: (f64, f64)) -> CacheKey {
        CacheKey {
            zones: BTreeSet::new(),
            window,
            task,
            kind: kind.into(),
        }
    }

    #[test]
    fn cache_round_trip_and_errors() {
        let mut c = ContextCache::default();
        assert!(c.list().is_empty());
        assert!(matches!(c.get("x"), Err(MemoryError::NotFound(_))));
        c.put(
            "hotspots_t600",
            "[1,2]".into(),
            key(None, "hotspots", (0.0, 600.0)),
            600,
        )
        .unwrap();
        assert_eq!(c.get("hotspots_t600").unwrap(), "[1,2]");
        assert!(matches!(
            c.put("hotspots_t600", "x".into(), CacheKey::default(), 601),
            Err(MemoryError::DuplicateLabel(_))
        ));
        c.put("b", "1".into(), CacheKey::default(), 700).unwrap();
        c.put("c", "2".into(), CacheKey::default(), 700).unwrap();
        assert_eq!(c.list(), ["hotspots_t600", "b", "c"]);
        assert!(c.put("d", "3".into(), CacheKey::default(), 5).is_err());
    }

    #[test]
    fn retrieval_prefers_exact_then_newer() {
        let mut c = ContextCache::default();
        let q = key(Some(TaskId::SignalTiming), "hotspots", (0.0, 600.0));
        c.put("old", "".into(), q.clone(), 1).unwrap();
        c.put(
            "other",
            "".into(),
            key(Some(TaskId::RampMetering), "hotspots", (0.0, 600.0)),
            2,
        )
        .unwrap();
        c.put("new", "".into(), q.clone(), 3).unwrap();
        let labels: Vec<&str> = c.retrieve(&q).iter().map(|e| e.label.as_str()).collect();
        assert_eq!(labels, ["new", "old", "other"]);
    }

    #[test]
    fn jaccard_normalizes_case_and_punctuation() {
        assert_eq!(jaccard("Shorten cycles, at night!", "shorten CYCLES at night"), 1.0);
        assert_eq!(jaccard("a b", "c d"), 0.0);
    }

    #[test]
    fn twelve_distinct_insertions_keep_ten() {
        let mut m = ProceduralMemory::default();
        let words = [
            "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet", "kilo", "lima",
        ];
        for (k, w) in words.iter().enumerate() {
            m.update([ProceduralInsight::candidate(&format!("{w} insight"), k as u64).unwrap()]);
        }
        assert_eq!(m.len(), 10);
        let kept: Vec<&str> = m.items().iter().map(|i| i.text.as_str()).collect();
        assert!(!kept.contains(&"alpha insight") && !kept.contains(&"bravo insight"));
    }

    #[test]
    fn near_duplicate_bumps_weight() {
        let mut m = ProceduralMemory::default();
        let a = "reduce cycle length at junction J1 during night hours";
        let b = "reduce cycle length at junction J1 during late night hours";
        assert!(jaccard(a, b) >= 0.8);
        m.update([ProceduralInsight::candidate(a, 1).unwrap()]);
        m.update([ProceduralInsight::candidate(b, 2).unwrap()]);
        assert_eq!(m.len(), 1);
        assert_eq!(m.items()[0].weight, 2.0);
        assert_eq!(m.items()[0].text, b);
        let before = m.clone();
        m.update(Vec::new());
        assert_eq!(m, before);
    }

    #[test]
    fn sentence_validation() {
        assert!(ProceduralInsight::candidate("Use 1.5 s lost time.", 0).is_ok());
        assert!(ProceduralInsight::candidate("One. Two.", 0).is_err());
        assert!(ProceduralInsight::candidate("  ", 0).is_err());
    }

    #[test]
    fn reflection_parsing() {
        let twelve: Vec<String> = (0..12).map(|k| format!("item {k}")).collect();
        let (items, warnings) = parse_reflection(&serde_json::to_string(&twelve).unwrap()).unwrap();
        assert_eq!(items.len(), 10);
        assert_eq!(warnings.len(), 1);
        assert!(parse_reflection("{\"a\": 1}").is_err());
    }

    #[test]
    fn fallback_templates() {
        let ri = BTreeMap::from([(TaskId::SignalTiming, 0.2), (TaskId::BusScheduling, -0.1)]);
        let s = summarize_episode(None, &ri, &BTreeMap::new(), (12600.0, 14400.0));
        assert_eq!(s.insights.len(), 2);
        assert!(s.insights[0].contains("signal_timing improved"));
        assert!(s.insights[0].contains("03:30-04:00"));
        assert!(s.insights[1].contains("bus_scheduling regressed"));
        let s = summarize_episode(Some("not json"), &ri, &BTreeMap::new(), (0.0, 1.0));
        assert!(s.flagged);
        assert_eq!(s.source, SummarySource::Fallback);
    }
}
