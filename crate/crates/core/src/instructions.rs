//! Instruction templates and their tokenization into word-bucket ids.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    CaptionLike,
    #[default]
    VqaLike,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::CaptionLike => "caption-like",
            TaskKind::VqaLike => "vqa-like",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "caption-like" => Ok(TaskKind::CaptionLike),
            "vqa-like" => Ok(TaskKind::VqaLike),
            other => Err(Error::config(format!("unknown task kind {other:?}"))),
        }
    }
}

pub const CAPTION_TEMPLATES: [&str; 3] = [
    "What objects are in the picture?",
    "What are the characteristics of the objects in the picture",
    "What is the relationship between the objects in the picture?",
];

pub const VQA_TEMPLATES: [&str; 3] = [
    "What objects are in the picture?",
    "What color are the objects in the picture?",
    "What are the characteristics of the objects in the picture",
];

pub const CAPTION_TASK_TEMPLATE: &str = "A photo of {}";
pub const VQA_TASK_TEMPLATE: &str = "Question: {Question} Short answer:";

/// Marker left in a tokenized line where the question id goes.
pub const QUESTION_SLOT: &str = "{question}";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateSet {
    pub lines: Vec<String>,
    pub task_line: String,
}

impl TemplateSet {
    pub fn defaults(kind: TaskKind) -> Self {
        let (lines, task) = match kind {
            TaskKind::CaptionLike => (CAPTION_TEMPLATES, CAPTION_TASK_TEMPLATE),
            TaskKind::VqaLike => (VQA_TEMPLATES, VQA_TASK_TEMPLATE),
        };
        Self {
            lines: lines.iter().map(|s| s.to_string()).collect(),
            task_line: task.to_string(),
        }
    }

    /// One template per line; blank lines and `#` comments are skipped. A line
    /// containing `{` is taken as the task line, otherwise the task line of
    /// `kind`'s defaults is kept.
    pub fn load(path: &Path, kind: TaskKind) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, kind)
    }

    pub fn parse(text: &str, kind: TaskKind) -> Result<Self> {
        let mut set = Self {
            lines: Vec::new(),
            task_line: Self::defaults(kind).task_line,
        };
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.contains('{') {
                set.task_line = line.to_string();
            } else {
                set.lines.push(line.to_string());
            }
        }
        if set.lines.is_empty() {
            return Err(Error::config("template file holds no instruction lines"));
        }
        Ok(set)
    }

    /// Word-bucket ids of all lines stacked in order, then the task line.
    /// `None` marks the question slot of the task line.
    pub fn token_ids(&self, buckets: usize) -> Vec<Option<usize>> {
        let mut out: Vec<Option<usize>> = self
            .lines
            .iter()
            .flat_map(|l| words(l))
            .map(|w| Some(bucket(&w, buckets)))
            .collect();
        for w in words(&self.task_line) {
            if w == QUESTION_SLOT {
                out.push(None);
            } else if !w.starts_with('{') {
                out.push(Some(bucket(&w, buckets)));
            }
        }
        out
    }
}

/// Lowercased words with surrounding punctuation removed. Placeholders in
/// braces are kept whole.
pub fn words(line: &str) -> Vec<String> {
    line.split_whitespace()
        .filter_map(|w| {
            let w = w.to_lowercase();
            if w.starts_with('{') {
                return Some(w);
            }
            let w: String = w.trim_matches(|c: char| !c.is_alphanumeric()).to_string();
            (!w.is_empty()).then_some(w)
        })
        .collect()
}

/// FNV-1a, reduced modulo `buckets`.
pub fn bucket(word: &str, buckets: usize) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h % buckets.max(1) as u64) as usize
}
