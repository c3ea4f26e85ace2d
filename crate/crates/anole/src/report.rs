//! Markdown reports and `key: value` run manifests.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use anole_core::finetune::FinetuneReport;
use anole_core::vocab::{MultimodalDocument, Segment};
use anole_core::vq::VqModel;

use crate::error::{Error, Result};
use crate::ppm;

pub const REPORT_FILE: &str = "report.md";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub markdown: PathBuf,
    pub images: Vec<PathBuf>,
}

pub fn image_name(index: usize) -> String {
    format!("images/img_{index:03}.ppm")
}

/// Writes `report.md` and one PPM per image under `dir`, in segment order.
/// Token-grid segments need `vq` to be decoded.
pub fn render(doc: &MultimodalDocument, dir: &Path, vq: Option<&VqModel<f32>>) -> Result<Rendered> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut blocks = Vec::new();
    let mut images = Vec::new();
    for seg in &doc.segments {
        let image = match seg {
            Segment::Text(t) => {
                blocks.push(t.clone());
                continue;
            }
            Segment::Pixels(img) => img.clone(),
            Segment::Tokens(grid) => {
                let vq = vq.ok_or_else(|| Error::Config("rendering token images needs a tokenizer".into()))?;
                vq.decode(grid)?
            }
        };
        let name = image_name(images.len());
        let path = dir.join(&name);
        if images.is_empty() {
            let sub = dir.join("images");
            fs::create_dir_all(&sub).map_err(Error::io(&sub))?;
        }
        ppm::write(&path, &image)?;
        blocks.push(format!("![image {}]({name})", images.len()));
        images.push(path);
    }
    let markdown = dir.join(REPORT_FILE);
    let mut text = blocks.join("\n\n");
    text.push('\n');
    fs::write(&markdown, text).map_err(Error::io(&markdown))?;
    Ok(Rendered { markdown, images })
}

/// Ordered `key: value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues(pub Vec<(String, String)>);

impl KeyValues {
    pub fn push(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.0.push((key.to_owned(), value.to_string()));
        self
    }

    /// Strings are JSON-quoted so a value never spans lines.
    pub fn push_str(&mut self, key: &str, value: &str) -> &mut Self {
        self.push(key, serde_json::to_string(value).expect("strings serialize"))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .filter_map(|l| l.split_once(": "))
                .map(|(k, v)| (k.to_owned(), v.to_owned()))
                .collect(),
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string()).map_err(Error::io(path))
    }
}

impl std::fmt::Display for KeyValues {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.0 {
            writeln!(f, "{k}: {v}")?;
        }
        Ok(())
    }
}

pub fn finetune_report(report: &FinetuneReport) -> KeyValues {
    let mut kv = KeyValues::default();
    let opt = |v: Option<f64>| v.map_or_else(|| "none".to_owned(), |v| format!("{v:.6}"));
    kv.push("trainable_parameters", report.trainable_parameters)
        .push("steps", report.steps)
        .push("initial_loss", opt(report.initial_loss))
        .push("final_loss", opt(report.final_loss))
        .push("max_frozen_drift", report.max_frozen_drift());
    match &report.early_stop {
        Some(reason) => kv.push_str("early_stop", reason),
        None => kv.push("early_stop", "none"),
    };
    for (name, drift) in &report.frozen_drift {
        kv.push(&format!("drift.{name}"), drift);
    }
    kv
}

/// `16640` as `16,640`.
pub fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use anole_core::vq::Image;

    #[test]
    fn thousands_separators() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(999), "999");
        assert_eq!(thousands(16_640), "16,640");
        assert_eq!(thousands(33_554_432), "33,554,432");
    }

    #[test]
    fn text_only_report_has_no_images() {
        let dir = tempfile::tempdir().unwrap();
        let r = render(&MultimodalDocument::text("hello"), dir.path(), None).unwrap();
        assert!(r.images.is_empty());
        assert_eq!(fs::read_to_string(r.markdown).unwrap(), "hello\n");
        assert!(!dir.path().join("images").exists());
    }

    #[test]
    fn images_are_numbered_in_order_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let a = Image::new(2, 2, (0..12).map(|i| i as f32 / 11.0).collect()).unwrap();
        let b = Image::filled(2, 2, 0.5);
        let doc = MultimodalDocument::new(vec![
            Segment::Text("first".into()),
            Segment::Pixels(a.clone()),
            Segment::Text("second".into()),
            Segment::Pixels(b),
        ]);
        let r = render(&doc, dir.path(), None).unwrap();
        assert_eq!(r.images.len(), 2);
        let md = fs::read_to_string(&r.markdown).unwrap();
        assert_eq!(md, "first\n\n![image 0](images/img_000.ppm)\n\nsecond\n\n![image 1](images/img_001.ppm)\n");
        assert_eq!(ppm::read(&r.images[0]).unwrap(), ppm::quantize_image(&a));
    }

    #[test]
    fn key_values_round_trip() {
        let mut kv = KeyValues::default();
        kv.push("seed", 3).push_str("prompt", "two\nlines");
        let text = kv.to_string();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(KeyValues::parse(&text), kv);
    }
}
