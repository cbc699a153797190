//! Fixed-depth template mining in the style of Drain.
//!
//! Each line is masked (block IDs, addresses, numbers become `<*>`), split
//! on whitespace and routed through a prefix tree: first by token count, then
//! by its leading tokens. The leaf reached holds a small group of templates of
//! that length; the line joins the most similar one if the similarity clears
//! the threshold, otherwise it starts a new template.
//!
//! ```text
//!               root
//!                 |
//!            [4 tokens]
//!                 |
//!           "exception"
//!                 |
//!            "syndrome"
//!                 |
//!   [exception syndrome register: <*>]
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{MladError, Result};

pub const WILDCARD: &str = "<*>";
const STORE_HEADER: &str = "#mlad-templates v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pub key: u32,
    pub tokens: Vec<String>,
    pub support_count: u64,
}

impl Template {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Templates indexed by key; keys are dense and assigned in creation order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TemplateStore {
    templates: Vec<Template>,
}

impl TemplateStore {
    pub fn new() -> Self {
        TemplateStore::default()
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn get(&self, key: u32) -> Option<&Template> {
        self.templates.get(key as usize)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Template> {
        self.templates.iter()
    }

    /// Appends a template under the next free key.
    pub fn push(&mut self, tokens: Vec<String>, support_count: u64) -> u32 {
        let key = self.templates.len() as u32;
        self.templates.push(Template {
            key,
            tokens,
            support_count,
        });
        key
    }

    /// Line-oriented text form: a version header, then
    /// `key TAB support_count TAB space-joined tokens` per template.
    pub fn to_text(&self) -> String {
        let mut out = String::from(STORE_HEADER);
        out.push('\n');
        for t in &self.templates {
            let _ = writeln!(out, "{}\t{}\t{}", t.key, t.support_count, t.text());
        }
        out
    }

    pub fn from_text(text: &str, source: &str) -> Result<TemplateStore> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == STORE_HEADER => {}
            Some((_, h)) => {
                return Err(MladError::Version {
                    found: h.to_string(),
                    expected: STORE_HEADER.to_string(),
                })
            }
            None => return Err(MladError::parse(source, 1, "empty template file")),
        }
        let mut store = TemplateStore::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let (Some(k), Some(c), Some(toks)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(MladError::parse(source, i + 1, "expected 3 tab-separated fields"));
            };
            let key: u32 = k
                .parse()
                .map_err(|_| MladError::parse(source, i + 1, format!("bad key {k:?}")))?;
            let support: u64 = c
                .parse()
                .map_err(|_| MladError::parse(source, i + 1, format!("bad count {c:?}")))?;
            if key as usize != store.len() {
                return Err(MladError::parse(
                    source,
                    i + 1,
                    format!("keys must be dense and ordered, expected {}", store.len()),
                ));
            }
            let tokens: Vec<String> = toks.split(' ').map(str::to_string).collect();
            if tokens.iter().any(String::is_empty) {
                return Err(MladError::parse(source, i + 1, "empty token"));
            }
            store.push(tokens, support);
        }
        Ok(store)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRule {
    pub pattern: String,
    pub placeholder: String,
}

impl MaskRule {
    fn wildcard(pattern: &str) -> Self {
        MaskRule {
            pattern: pattern.to_string(),
            placeholder: WILDCARD.to_string(),
        }
    }
}

/// The built-in masks, applied in this order.
pub fn default_masks() -> Vec<MaskRule> {
    vec![
        // HDFS block IDs
        MaskRule::wildcard(r"blk_-?\d+"),
        // IPv4 with optional port
        MaskRule::wildcard(r"\b(?:\d{1,3}\.){3}\d{1,3}(?::\d+)?\b"),
        MaskRule::wildcard(r"\b0[xX][0-9a-fA-F]+\b"),
        // absolute file paths
        MaskRule::wildcard(r"(?:^|\s)(?:/[\w.\-]+)+/?"),
        MaskRule::wildcard(r"\b\d+\b"),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParserConfig {
    pub depth: usize,
    pub similarity_threshold: f64,
    pub max_children: usize,
    pub masks: Vec<MaskRule>,
    /// Removed from the start of each line before masking (timestamps,
    /// severity prefixes).
    pub header_regex: Option<String>,
}

impl Default for ParserConfig {
    fn default() -> Self {
        ParserConfig {
            depth: 4,
            similarity_threshold: 0.4,
            max_children: 100,
            masks: default_masks(),
            header_regex: None,
        }
    }
}

/// Compiled masking rules.
#[derive(Clone, Debug)]
pub struct Masker {
    rules: Vec<(Regex, String)>,
    header: Option<Regex>,
}

impl Masker {
    pub fn new(masks: &[MaskRule], header_regex: Option<&str>) -> Result<Masker> {
        let compile = |p: &str| {
            Regex::new(p).map_err(|e| MladError::Config(format!("bad regex {p:?}: {e}")))
        };
        let rules = masks
            .iter()
            .map(|m| Ok((compile(&m.pattern)?, m.placeholder.clone())))
            .collect::<Result<Vec<_>>>()?;
        let header = header_regex
            .map(|h| compile(&format!("^(?:{h})")))
            .transpose()?;
        Ok(Masker { rules, header })
    }

    pub fn preprocess(&self, line: &str) -> Option<Vec<String>> {
        let mut text = match &self.header {
            Some(h) => h.replace(line, "").into_owned(),
            None => line.to_string(),
        };
        for (re, placeholder) in &self.rules {
            if re.is_match(&text) {
                // keep a separating space the path rule may have consumed
                text = re
                    .replace_all(&text, |caps: &regex::Captures<'_>| {
                        let m = &caps[0];
                        if m.starts_with(char::is_whitespace) {
                            format!(" {placeholder}")
                        } else {
                            placeholder.clone()
                        }
                    })
                    .into_owned();
            }
        }
        let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            None
        } else {
            Some(tokens)
        }
    }
}

/// Masks and tokenizes one line; `None` means the line is blank after masking
/// and should be skipped.
pub fn preprocess(line: &str, masks: &[MaskRule]) -> Result<Option<Vec<String>>> {
    Ok(Masker::new(masks, None)?.preprocess(line))
}

/// Fraction of positions that agree, where `<*>` on either side agrees with
/// anything. Lists of different lengths never match.
pub fn similarity(a: &[String], b: &[String]) -> f64 {
    if a.len() != b.len() || a.is_empty() {
        return 0.0;
    }
    let same = a
        .iter()
        .zip(b)
        .filter(|(x, y)| x == y || *x == WILDCARD || *y == WILDCARD)
        .count();
    same as f64 / a.len() as f64
}

#[derive(Debug, Default)]
struct InnerNode {
    children: BTreeMap<String, InnerNode>,
    group: Vec<u32>,
}

#[derive(Debug)]
pub struct ParseTree {
    depth: usize,
    similarity_threshold: f64,
    max_children: usize,
    by_length: BTreeMap<usize, InnerNode>,
    store: TemplateStore,
}

impl ParseTree {
    pub fn new(config: &ParserConfig) -> Result<ParseTree> {
        if config.depth < 3 {
            return Err(MladError::Config(format!(
                "tree depth must be at least 3, got {}",
                config.depth
            )));
        }
        if !(config.similarity_threshold > 0.0 && config.similarity_threshold < 1.0) {
            return Err(MladError::Config(format!(
                "similarity threshold must lie in (0, 1), got {}",
                config.similarity_threshold
            )));
        }
        if config.max_children == 0 {
            return Err(MladError::Config("max_children must be positive".into()));
        }
        Ok(ParseTree {
            depth: config.depth,
            similarity_threshold: config.similarity_threshold,
            max_children: config.max_children,
            by_length: BTreeMap::new(),
            store: TemplateStore::new(),
        })
    }

    /// A tree pre-populated with existing templates, keys preserved.
    pub fn seeded(config: &ParserConfig, store: &TemplateStore) -> Result<ParseTree> {
        let mut tree = ParseTree::new(config)?;
        for t in store.iter() {
            let key = tree.store.push(t.tokens.clone(), t.support_count);
            tree.leaf_mut(&t.tokens).group.push(key);
        }
        Ok(tree)
    }

    pub fn store(&self) -> &TemplateStore {
        &self.store
    }

    pub fn into_store(self) -> TemplateStore {
        self.store
    }

    fn leaf_mut(&mut self, tokens: &[String]) -> &mut InnerNode {
        let max_children = self.max_children;
        let mut node = self.by_length.entry(tokens.len()).or_default();
        for tok in tokens.iter().take(self.depth - 2) {
            let route = if tok.chars().any(|c| c.is_ascii_digit()) {
                WILDCARD
            } else {
                tok.as_str()
            };
            let route = if node.children.contains_key(route)
                || route == WILDCARD
                || node.children.len() < max_children
            {
                route
            } else {
                WILDCARD
            };
            node = node.children.entry(route.to_string()).or_default();
        }
        node
    }

    /// Assigns `tokens` to a template, returning its key and whether it was
    /// created by this call.
    pub fn parse_line(&mut self, tokens: &[String]) -> (u32, bool) {
        debug_assert!(!tokens.is_empty());
        let threshold = self.similarity_threshold;
        let group = self.leaf_mut(tokens).group.clone();
        let mut best: Option<(u32, f64)> = None;
        for key in group {
            let sim = similarity(&self.store.templates[key as usize].tokens, tokens);
            if best.map_or(true, |(_, s)| sim > s) {
                best = Some((key, sim));
            }
        }
        if let Some((key, sim)) = best {
            if sim >= threshold {
                let t = &mut self.store.templates[key as usize];
                for (slot, tok) in t.tokens.iter_mut().zip(tokens) {
                    if slot != tok {
                        *slot = WILDCARD.to_string();
                    }
                }
                t.support_count += 1;
                return (key, false);
            }
        }
        let key = self.store.push(tokens.to_vec(), 1);
        self.leaf_mut(tokens).group.push(key);
        (key, true)
    }
}

/// Templates plus the key of every non-skipped line, tagged with its
/// zero-based line index in the input.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedCorpus {
    pub store: TemplateStore,
    pub keys: Vec<(usize, u32)>,
    pub skipped: usize,
}

impl ParsedCorpus {
    /// `line_index TAB key` per parsed line.
    pub fn keys_text(&self) -> String {
        let mut out = String::new();
        for (line, key) in &self.keys {
            let _ = writeln!(out, "{line}\t{key}");
        }
        out
    }
}

pub fn parse_keys_text(text: &str, source: &str) -> Result<Vec<(usize, u32)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let (a, b) = l
                .split_once('\t')
                .ok_or_else(|| MladError::parse(source, i + 1, "expected `line TAB key`"))?;
            let line = a
                .parse()
                .map_err(|_| MladError::parse(source, i + 1, format!("bad line index {a:?}")))?;
            let key = b
                .parse()
                .map_err(|_| MladError::parse(source, i + 1, format!("bad key {b:?}")))?;
            Ok((line, key))
        })
        .collect()
}

/// Parses lines in order, starting from `seed` templates when given.
pub fn parse_corpus<'a>(
    lines: impl IntoIterator<Item = &'a str>,
    config: &ParserConfig,
    seed: Option<&TemplateStore>,
) -> Result<ParsedCorpus> {
    let masker = Masker::new(&config.masks, config.header_regex.as_deref())?;
    let mut tree = match seed {
        Some(s) => ParseTree::seeded(config, s)?,
        None => ParseTree::new(config)?,
    };
    let mut keys = Vec::new();
    let mut skipped = 0;
    for (i, line) in lines.into_iter().enumerate() {
        match masker.preprocess(line) {
            Some(tokens) => keys.push((i, tree.parse_line(&tokens).0)),
            None => skipped += 1,
        }
    }
    Ok(ParsedCorpus {
        store: tree.into_store(),
        keys,
        skipped,
    })
}

/// Reads every line from `reader`, reporting undecodable input with its line
/// number, then parses the corpus.
pub fn parse_reader(
    reader: impl BufRead,
    source: &str,
    config: &ParserConfig,
) -> Result<ParsedCorpus> {
    let mut lines = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| MladError::parse(source, i + 1, e.to_string()))?;
        lines.push(line);
    }
    parse_corpus(lines.iter().map(String::as_str), config, None)
}
