//! Binary checkpoint container.
//!
//! ```text
//! magic "ANOLECKP" | version u32 | header_len u32 | header JSON | header crc32 u32
//! section_count u32
//! per section: name_len u32 | name | rank u32 | dims u64 * rank | byte_len u64 | crc32 u32 | f32 LE data
//! ```
//!
//! All integers are little-endian; tensors are row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anole_core::optim::Parameters;
use anole_core::transformer::{ModelConfig, ModelParams};
use anole_core::vocab::VocabLayout;
use anole_core::vq::{Codebook, VqConfig, VqModel};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ANOLECKP";
pub const FORMAT_VERSION: u32 = 1;

/// Vocabulary layout as stored in the header: counts plus every sentinel id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutRecord {
    pub text_vocab: u32,
    pub image_vocab: u32,
    pub grid_height: u32,
    pub grid_width: u32,
    pub total: u32,
    pub bos: u32,
    pub eos: u32,
    pub boi: u32,
    pub eoi: u32,
    pub pad: u32,
}

impl From<&VocabLayout> for LayoutRecord {
    fn from(l: &VocabLayout) -> Self {
        Self {
            text_vocab: l.text_vocab(),
            image_vocab: l.image_vocab(),
            grid_height: l.grid_height(),
            grid_width: l.grid_width(),
            total: l.total(),
            bos: l.bos(),
            eos: l.eos(),
            boi: l.boi(),
            eoi: l.eoi(),
            pad: l.pad(),
        }
    }
}

impl LayoutRecord {
    pub fn to_layout(&self) -> Result<VocabLayout> {
        let layout = VocabLayout::new(self.text_vocab, self.image_vocab, self.grid_height, self.grid_width)?;
        if LayoutRecord::from(&layout) != *self {
            return Err(Error::Header("vocabulary layout sentinel ids are inconsistent with its counts".into()));
        }
        Ok(layout)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    #[serde(default)]
    pub vq: Option<VqConfig>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub layout: Option<LayoutRecord>,
    /// Free-form provenance (stage, step counts, data path).
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::MissingSection(name.to_owned()))
    }

    fn push(&mut self, name: String, shape: Vec<usize>, data: &[f32]) {
        self.tensors.retain(|t| t.name != name);
        self.tensors.push(Tensor { name, shape, data: data.to_vec() });
    }

    pub fn put_vq(&mut self, vq: &VqModel<f32>) {
        self.header.vq = Some(vq.config().clone());
        for (name, shape, data) in vq.net.named_tensors() {
            self.push(name, shape, data);
        }
        let cb = &vq.codebook;
        self.push("vq.codebook".into(), vec![cb.size(), cb.dim()], cb.entries());
    }

    pub fn put_model(&mut self, params: &ModelParams<f32>, layout: &VocabLayout) {
        self.header.model = Some(*params.config());
        self.header.layout = Some(layout.into());
        for (name, shape, data) in params.named_tensors() {
            self.push(name, shape, data);
        }
    }

    /// Copies stored tensors into `slots`, checking names and shapes.
    fn fill(&self, slots: Vec<(String, Vec<usize>, &mut [f32])>) -> Result<()> {
        for (name, shape, dst) in slots {
            let t = self.tensor(&name)?;
            if t.shape != shape {
                return Err(Error::SectionShape {
                    section: name,
                    message: format!("expected shape {shape:?}, found {:?}", t.shape),
                });
            }
            dst.copy_from_slice(&t.data);
        }
        Ok(())
    }

    pub fn vq_model(&self) -> Result<VqModel<f32>> {
        let config = self.header.vq.clone().ok_or_else(|| Error::MissingSection("vq.codebook".into()))?;
        let mut net = VqModel::<f32>::skeleton(&config)?;
        let layout: Vec<_> = net.named_tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        let slots = layout.into_iter().zip(net.param_slices_mut()).map(|((n, s), d)| (n, s, d)).collect();
        self.fill(slots)?;
        let cb = self.tensor("vq.codebook")?;
        if cb.shape != [config.codebook_size, config.latent_dim] {
            return Err(Error::SectionShape {
                section: cb.name.clone(),
                message: format!("expected shape [{}, {}], found {:?}", config.codebook_size, config.latent_dim, cb.shape),
            });
        }
        let codebook = Codebook::new(config.codebook_size, config.latent_dim, cb.data.clone())?;
        Ok(VqModel::from_parts(config, net, codebook)?)
    }

    pub fn model(&self) -> Result<(ModelParams<f32>, VocabLayout)> {
        let (Some(config), Some(layout)) = (self.header.model, self.header.layout) else {
            // the error names the first tensor an LM load needs
            return Err(Error::MissingSection("lm.embed".into()));
        };
        let layout = layout.to_layout()?;
        config.check_layout(&layout)?;
        let mut params = ModelParams::<f32>::init(config)?;
        self.fill(params.named_tensors_mut())?;
        Ok((params, layout))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header is always serializable");
        let mut out = Vec::with_capacity(64 + header.len() + self.tensors.iter().map(|t| t.data.len() * 4 + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&crc32fast::hash(&header).to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let data: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            out.extend_from_slice(&crc32fast::hash(&data).to_le_bytes());
            out.extend_from_slice(&data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: FORMAT_VERSION });
        }
        let header_len = r.u32("header length")? as usize;
        let header_bytes = r.take(header_len, "header")?;
        if r.u32("header checksum")? != crc32fast::hash(header_bytes) {
            return Err(Error::Checksum { section: "header".into() });
        }
        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| Error::Header(e.to_string()))?;
        let count = r.u32("section count")?;
        let mut tensors = Vec::new();
        for i in 0..count {
            let name_len = r.u32("section name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "section name")?)
                .map_err(|_| Error::Header(format!("section {i} name is not UTF-8")))?
                .to_owned();
            let rank = r.u32(&name)? as usize;
            let shape = (0..rank).map(|_| r.u64(&name).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let byte_len = r.u64(&name)? as usize;
            let expected = shape.iter().product::<usize>() * 4;
            if byte_len != expected {
                return Err(Error::SectionShape {
                    section: name,
                    message: format!("byte length {byte_len} does not match shape {shape:?}"),
                });
            }
            let crc = r.u32(&name)?;
            let data = r.take(byte_len, &name)?;
            if crc32fast::hash(data) != crc {
                return Err(Error::Checksum { section: name });
            }
            let data = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Header(format!("{} trailing bytes after the last section", bytes.len() - r.pos)));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(Error::io(path))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated { what: what.to_owned() })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
