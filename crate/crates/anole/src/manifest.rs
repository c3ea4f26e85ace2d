//! JSONL dataset manifest: one record per line.

use std::fs;
use std::path::{Path, PathBuf};

use anole_core::vocab::{MultimodalDocument, Segment};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ppm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    #[default]
    CaptionFirst,
    ImageFirst,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    /// Image path, relative to the manifest's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default)]
    pub order: Order,
}

/// A parsed record together with the manifest line it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub record: Record,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub path: PathBuf,
    pub entries: Vec<Entry>,
}

impl Manifest {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Manifest { path: path.to_owned(), line: line_no, message };
            let record: Record = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            if record.image.is_none() && record.caption.is_none() {
                return Err(err("record has neither image nor caption".into()));
            }
            entries.push(Entry { line: line_no, record });
        }
        Ok(Self { path: path.to_owned(), entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(path, &text)
    }

    pub fn write(path: &Path, records: &[Record]) -> Result<()> {
        let mut out = String::new();
        for r in records {
            out.push_str(&serde_json::to_string(r).expect("records are always serializable"));
            out.push('\n');
        }
        fs::write(path, out).map_err(Error::io(path))
    }

    pub fn base_dir(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new("."))
    }

    /// Loads one record as a document, checking the image size.
    pub fn document(&self, entry: &Entry, height: usize, width: usize) -> Result<MultimodalDocument> {
        let err = |message: String| Error::Manifest { path: self.path.clone(), line: entry.line, message };
        let image = match &entry.record.image {
            Some(rel) => {
                let path = self.base_dir().join(rel);
                if !path.is_file() {
                    return Err(err(format!("image file {} does not exist", path.display())));
                }
                let img = ppm::read(&path).map_err(|e| err(e.to_string()))?;
                if img.height() != height || img.width() != width {
                    return Err(err(format!(
                        "image {} is {}x{}, expected {height}x{width}",
                        path.display(),
                        img.height(),
                        img.width()
                    )));
                }
                Some(Segment::Pixels(img))
            }
            None => None,
        };
        let caption = entry.record.caption.clone().map(Segment::Text);
        let segments = match entry.record.order {
            Order::CaptionFirst => caption.into_iter().chain(image).collect(),
            Order::ImageFirst => image.into_iter().chain(caption).collect(),
        };
        Ok(MultimodalDocument::new(segments))
    }

    pub fn documents(&self, height: usize, width: usize) -> Result<Vec<MultimodalDocument>> {
        self.entries.iter().map(|e| self.document(e, height, width)).collect()
    }
}
