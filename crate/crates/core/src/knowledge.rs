//! App knowledge gathered by exploration, persisted as JSON lines and
//! retrieved for a task by lexical overlap.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::Instruction;

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("knowledge item needs non-empty {0}")]
    Invalid(&'static str),
    #[error("knowledge storage: {0}")]
    Storage(#[from] std::io::Error),
    #[error("{path}:{line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
}

/// Where an item came from: an exploration episode and the steps summarized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeSource {
    pub episode: String,
    /// Inclusive first and last step index.
    pub steps: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeItem {
    pub id: String,
    pub app: String,
    pub text: String,
    #[serde(default)]
    pub tags: Vec<String>,
    pub source: KnowledgeSource,
    pub created_at: DateTime<Utc>,
}

impl KnowledgeItem {
    /// Builds an item whose id is derived from `(app, text)`.
    pub fn new(
        app: impl Into<String>,
        text: impl Into<String>,
        tags: Vec<String>,
        source: KnowledgeSource,
        created_at: DateTime<Utc>,
    ) -> Self {
        let (app, text) = (app.into(), text.into());
        Self { id: item_id(&app, &text), app, text, tags, source, created_at }
    }
}

fn item_id(app: &str, text: &str) -> String {
    let mut h = Sha256::new();
    h.update(app.as_bytes());
    h.update([0]);
    h.update(text.as_bytes());
    let digest = h.finalize();
    let hex: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
    format!("k{hex}")
}

/// Append-only store. All methods take `&self`; writes are serialized.
#[derive(Debug)]
pub struct KnowledgeStore {
    path: Option<PathBuf>,
    items: Mutex<Vec<KnowledgeItem>>,
}

impl KnowledgeStore {
    pub fn in_memory() -> Self {
        Self { path: None, items: Mutex::new(Vec::new()) }
    }

    /// Opens (or lazily creates) a store backed by `path`.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, KnowledgeError> {
        let path = path.into();
        let items = if path.exists() { load_lines(&path)? } else { Vec::new() };
        Ok(Self { path: Some(path), items: Mutex::new(items) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Adds `item`, returning its id. An existing item with the same app and
    /// text wins and its id is returned instead.
    pub fn add(&self, item: KnowledgeItem) -> Result<String, KnowledgeError> {
        if item.app.trim().is_empty() {
            return Err(KnowledgeError::Invalid("app"));
        }
        if item.text.trim().is_empty() {
            return Err(KnowledgeError::Invalid("text"));
        }
        let mut items = self.items.lock().unwrap();
        if let Some(existing) = items.iter().find(|i| i.app == item.app && i.text == item.text) {
            return Ok(existing.id.clone());
        }
        if let Some(path) = &self.path {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            let mut line = serde_json::to_string(&item).expect("item serializes");
            line.push('\n');
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            f.write_all(line.as_bytes())?;
            f.sync_data()?;
        }
        let id = item.id.clone();
        items.push(item);
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Option<KnowledgeItem> {
        self.items.lock().unwrap().iter().find(|i| i.id == id).cloned()
    }

    pub fn len(&self) -> usize {
        self.items.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Snapshot in insertion order.
    pub fn items(&self) -> Vec<KnowledgeItem> {
        self.items.lock().unwrap().clone()
    }

    pub fn items_for_app(&self, app: &str) -> Vec<KnowledgeItem> {
        self.items
            .lock()
            .unwrap()
            .iter()
            .filter(|i| i.app.eq_ignore_ascii_case(app))
            .cloned()
            .collect()
    }

    /// The `limit` most relevant items for `instruction`, best first.
    pub fn retrieve(&self, instruction: &Instruction, limit: usize) -> Vec<KnowledgeItem> {
        if limit == 0 {
            return Vec::new();
        }
        let items = self.items.lock().unwrap();
        let mut scored: Vec<(usize, usize, &KnowledgeItem)> = items
            .iter()
            .enumerate()
            .map(|(pos, item)| (relevance(instruction, item), pos, item))
            .filter(|(score, _, _)| *score > 0)
            .collect();
        scored.sort_by(|a, b| {
            b.0.cmp(&a.0).then(b.2.created_at.cmp(&a.2.created_at)).then(b.1.cmp(&a.1))
        });
        scored.into_iter().take(limit).map(|(_, _, i)| i.clone()).collect()
    }
}

fn load_lines(path: &Path) -> Result<Vec<KnowledgeItem>, KnowledgeError> {
    let reader = BufReader::new(File::open(path)?);
    let mut items: Vec<KnowledgeItem> = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: KnowledgeItem = serde_json::from_str(&line).map_err(|e| KnowledgeError::Corrupt {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        // Concatenated files may repeat items.
        if !items.iter().any(|i| i.app == item.app && i.text == item.text) {
            items.push(item);
        }
    }
    Ok(items)
}

/// `2·[app mentioned or hinted] + |stems(instruction) ∩ stems(text, tags)|`.
pub fn relevance(instruction: &Instruction, item: &KnowledgeItem) -> usize {
    let lower = instruction.text().to_lowercase();
    let app = item.app.to_lowercase();
    let app_hit = lower.contains(&app)
        || instruction.app_hint().is_some_and(|h| h.eq_ignore_ascii_case(&item.app));
    let wanted = stems(instruction.text());
    let mut have = stems(&item.text);
    for tag in &item.tags {
        have.extend(stems(tag));
    }
    2 * app_hit as usize + wanted.intersection(&have).count()
}

const STOP_WORDS: &[&str] = &[
    "a", "about", "after", "all", "an", "and", "any", "are", "as", "at", "be", "before", "by",
    "can", "do", "does", "for", "from", "has", "have", "how", "i", "if", "in", "into", "is", "it",
    "its", "me", "my", "no", "not", "of", "on", "or", "so", "than", "that", "the", "then",
    "there", "this", "to", "up", "was", "what", "when", "where", "which", "with", "you", "your",
];

/// Lowercased word stems with stop words removed.
pub fn stems(text: &str) -> HashSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .map(str::to_lowercase)
        .filter(|w| !w.is_empty() && !STOP_WORDS.contains(&w.as_str()))
        .map(|w| stem(&w))
        .collect()
}

/// Strips one common English suffix.
pub fn stem(word: &str) -> String {
    let n = word.chars().count();
    let rules: &[(&str, &str, usize)] = &[
        ("ies", "y", 5),
        ("ing", "", 6),
        ("ed", "", 5),
        ("es", "", 5),
        ("ly", "", 5),
        ("s", "", 4),
    ];
    for (suffix, replacement, min_len) in rules {
        if n >= *min_len && word.ends_with(suffix) && !(*suffix == "s" && word.ends_with("ss")) {
            return format!("{}{}", &word[..word.len() - suffix.len()], replacement);
        }
    }
    word.to_string()
}
