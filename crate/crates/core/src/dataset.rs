//! Template-key streams to labeled windows: sessionization, fixed windows,
//! the normal-only train / balanced test split, and multi-system fusion.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{MladError, Result};
use crate::logparse::TemplateStore;

/// Sessions longer than this are truncated.
pub const MAX_SESSION_LEN: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }

    pub fn as_digit(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Anomalous => 1,
        }
    }

    fn parse(s: &str) -> Option<Label> {
        match s.trim() {
            "0" | "Normal" | "normal" | "-" => Some(Label::Normal),
            "1" | "Anomaly" | "anomaly" | "Anomalous" | "anomalous" => Some(Label::Anomalous),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogRecord {
    pub index: usize,
    pub template_key: u32,
    pub label: Label,
    pub session_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub keys: Vec<u32>,
    pub label: Label,
    pub origin: String,
    pub session_id: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    Sliding,
    Session,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub seed: u64,
    pub mode: WindowMode,
    pub window_size: usize,
}

impl SplitSpec {
    pub fn sliding(window_size: usize, seed: u64) -> Self {
        SplitSpec {
            seed,
            mode: WindowMode::Sliding,
            window_size,
        }
    }
}

/// Joins parsed keys with per-line labels. `labels` is aligned with the raw
/// corpus, so it must cover every line index the parser reported.
pub fn records_from_keys(keys: &[(usize, u32)], labels: &[Label]) -> Result<Vec<LogRecord>> {
    if let Some(&(line, _)) = keys.iter().find(|(line, _)| *line >= labels.len()) {
        return Err(MladError::Contract(format!(
            "labels cover {} lines but keys reference line {}",
            labels.len(),
            line + 1
        )));
    }
    Ok(keys
        .iter()
        .map(|&(index, template_key)| LogRecord {
            index,
            template_key,
            label: labels[index],
            session_id: None,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sessionized {
    pub records: Vec<LogRecord>,
    /// Records dropped because their line carried no ID.
    pub dropped: usize,
}

/// Tags each record with the first match of `id_pattern` in its raw line.
pub fn sessionize(records: &[LogRecord], lines: &[String], id_pattern: &str) -> Result<Sessionized> {
    let re = Regex::new(id_pattern)
        .map_err(|e| MladError::Config(format!("bad session id regex {id_pattern:?}: {e}")))?;
    let mut kept = Vec::with_capacity(records.len());
    let mut dropped = 0;
    for r in records {
        let line = lines.get(r.index).ok_or_else(|| {
            MladError::Contract(format!("record refers to missing line {}", r.index + 1))
        })?;
        match re.find(line) {
            Some(m) => kept.push(LogRecord {
                session_id: Some(m.as_str().to_string()),
                ..r.clone()
            }),
            None => dropped += 1,
        }
    }
    if kept.is_empty() {
        return Err(MladError::Config(format!(
            "session id pattern {id_pattern:?} matched no records"
        )));
    }
    if dropped > 0 {
        log::warn!("sessionize: dropped {dropped} records without a session id");
    }
    Ok(Sessionized {
        records: kept,
        dropped,
    })
}

/// Overrides record labels with per-session labels (HDFS-style block labels).
pub fn apply_session_labels(records: &mut [LogRecord], labels: &HashMap<String, Label>) {
    for r in records {
        if let Some(l) = r.session_id.as_ref().and_then(|s| labels.get(s)) {
            r.label = *l;
        }
    }
}

fn window_of(records: &[&LogRecord], origin: &str, session_id: Option<String>) -> Window {
    let label = if records.iter().any(|r| r.label.is_anomalous()) {
        Label::Anomalous
    } else {
        Label::Normal
    };
    Window {
        keys: records.iter().map(|r| r.template_key).collect(),
        label,
        origin: origin.to_string(),
        session_id,
    }
}

/// Cuts records into windows.
///
/// Sliding mode takes consecutive non-overlapping chunks of `window_size`
/// and keeps a trailing chunk only if it has at least two records. Session
/// mode emits one window per session in order of first appearance,
/// truncated to [`MAX_SESSION_LEN`]; single-record sessions are dropped.
pub fn windowize(records: &[LogRecord], spec: &SplitSpec, origin: &str) -> Result<Vec<Window>> {
    match spec.mode {
        WindowMode::Sliding => {
            if spec.window_size < 2 {
                return Err(MladError::Config(format!(
                    "sliding windows need size >= 2, got {}",
                    spec.window_size
                )));
            }
            if records.iter().any(|r| r.session_id.is_some()) {
                return Err(MladError::Contract(
                    "sliding windows over sessionized records".into(),
                ));
            }
            let refs: Vec<&LogRecord> = records.iter().collect();
            Ok(refs
                .chunks(spec.window_size)
                .filter(|c| c.len() >= 2)
                .map(|c| window_of(c, origin, None))
                .collect())
        }
        WindowMode::Session => {
            let mut order: Vec<&str> = Vec::new();
            let mut groups: HashMap<&str, Vec<&LogRecord>> = HashMap::new();
            for r in records {
                let id = r.session_id.as_deref().ok_or_else(|| {
                    MladError::Contract(format!("record {} has no session id", r.index))
                })?;
                groups
                    .entry(id)
                    .or_insert_with(|| {
                        order.push(id);
                        Vec::new()
                    })
                    .push(r);
            }
            Ok(order
                .into_iter()
                .filter_map(|id| {
                    let members = &groups[id];
                    let members = &members[..members.len().min(MAX_SESSION_LEN)];
                    (members.len() >= 2).then(|| window_of(members, origin, Some(id.to_string())))
                })
                .collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<Window>,
    pub test: Vec<Window>,
}

/// Every anomalous window plus an equal number of randomly drawn normal
/// windows form the test set; the remaining normal windows form the training
/// set. Both keep the input order.
pub fn split(windows: &[Window], seed: u64) -> Result<Split> {
    let normal: Vec<usize> = (0..windows.len())
        .filter(|&i| !windows[i].label.is_anomalous())
        .collect();
    let anomalous = windows.len() - normal.len();
    if normal.len() < anomalous {
        return Err(MladError::Split {
            normal: normal.len(),
            anomalous,
        });
    }
    let mut shuffled = normal.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_test = vec![false; windows.len()];
    for &i in &shuffled[..anomalous] {
        in_test[i] = true;
    }
    for (i, w) in windows.iter().enumerate() {
        if w.label.is_anomalous() {
            in_test[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (w, t) in windows.iter().zip(in_test) {
        if t {
            test.push(w.clone());
        } else {
            train.push(w.clone());
        }
    }
    Ok(Split { train, test })
}

/// One system's templates and windows.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemCorpus {
    pub origin: String,
    pub store: TemplateStore,
    pub windows: Vec<Window>,
}

impl SystemCorpus {
    pub fn origin_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for w in &self.windows {
            *counts.entry(w.origin.clone()).or_insert(0) += 1;
        }
        counts
    }
}

/// Merges systems into one corpus. Template keys are namespaced by origin:
/// each system's keys are shifted past those of the systems before it, so
/// textually identical templates from different systems stay distinct. The
/// windows are shuffled with `seed` and keep their origin tags.
pub fn fuse(parts: &[SystemCorpus], seed: u64) -> Result<SystemCorpus> {
    let mut store = TemplateStore::new();
    let mut windows = Vec::new();
    let mut seen: BTreeMap<(String, u32), u32> = BTreeMap::new();
    for part in parts {
        let offset = store.len() as u32;
        for t in part.store.iter() {
            let global = store.push(t.tokens.clone(), t.support_count);
            if seen.insert((part.origin.clone(), t.key), global).is_some() {
                return Err(MladError::Contract(format!(
                    "template ({}, {}) collides after namespacing",
                    part.origin, t.key
                )));
            }
        }
        for w in &part.windows {
            let keys = w
                .keys
                .iter()
                .map(|&k| {
                    if (k as usize) < part.store.len() {
                        Ok(k + offset)
                    } else {
                        Err(MladError::MissingKeys(vec![k]))
                    }
                })
                .collect::<Result<Vec<u32>>>()?;
            windows.push(Window {
                keys,
                ..w.clone()
            });
        }
    }
    windows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let origin = parts
        .iter()
        .map(|p| p.origin.as_str())
        .collect::<Vec<_>>()
        .join("+");
    Ok(SystemCorpus {
        origin,
        store,
        windows,
    })
}

/// `origin TAB label TAB comma-joined keys [TAB session_id]` per window.
pub fn windows_to_text(windows: &[Window]) -> String {
    let mut out = String::new();
    for w in windows {
        let keys = w
            .keys
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let _ = write!(out, "{}\t{}\t{}", w.origin, w.label.as_digit(), keys);
        if let Some(s) = &w.session_id {
            let _ = write!(out, "\t{s}");
        }
        out.push('\n');
    }
    out
}

pub fn windows_from_text(text: &str, source: &str) -> Result<Vec<Window>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(MladError::parse(source, i + 1, "expected origin, label, keys"));
        }
        let label = match fields[1] {
            "0" => Label::Normal,
            "1" => Label::Anomalous,
            other => return Err(MladError::parse(source, i + 1, format!("bad label {other:?}"))),
        };
        let keys = fields[2]
            .split(',')
            .map(|k| {
                k.parse::<u32>()
                    .map_err(|_| MladError::parse(source, i + 1, format!("bad key {k:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Window {
            keys,
            label,
            origin: fields[0].to_string(),
            session_id: fields.get(3).map(|s| s.to_string()),
        });
    }
    Ok(out)
}

/// One `0`/`1` label per line, aligned with the raw corpus.
pub fn line_labels_from_text(text: &str, source: &str) -> Result<Vec<Label>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            Label::parse(l).ok_or_else(|| MladError::parse(source, i + 1, format!("bad label {l:?}")))
        })
        .collect()
}

/// HDFS-style `block_id,label` CSV; a header row is skipped when present.
pub fn session_labels_from_csv(text: &str, source: &str) -> Result<HashMap<String, Label>> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, label) = line
            .split_once(',')
            .ok_or_else(|| MladError::parse(source, i + 1, "expected block_id,label"))?;
        match Label::parse(label) {
            Some(l) => {
                out.insert(id.trim().to_string(), l);
            }
            None if i == 0 => {}
            None => return Err(MladError::parse(source, i + 1, format!("bad label {label:?}"))),
        }
    }
    Ok(out)
}
