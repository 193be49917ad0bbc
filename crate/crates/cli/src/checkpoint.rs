//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "RMADCKPT" | u32 version | str header
//! u32 sections, each: str name | str metadata | u32 tensors,
//!     each: str name | u32 rank | u64 dims[rank] | f64 data[prod(dims)]
//! sha256 of everything above
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8. Header and metadata are JSON
//! text kept verbatim, so decode followed by encode reproduces the input bytes.

use std::fs;
use std::path::Path;

use rmadapter_core::{
    attach, AdaptedModel, AdapterPlacement, DualEncoderModel, EncoderConfig, RecDepth, SharingMode,
    Tensor,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"RMADCKPT";
pub const FORMAT_VERSION: u32 = 1;
pub const BACKBONE_SECTION: &str = "backbone";
pub const ADAPTER_SECTION: &str = "adapters";

const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub encoder: EncoderConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub metadata: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Section {
    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub header: String,
    pub sections: Vec<Section>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneMeta {
    pub frozen: bool,
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterMeta {
    pub placement: AdapterPlacement,
    pub mode: SharingMode,
    pub depth: RecDepth,
    pub seed: u64,
    pub backbone_fingerprint: String,
}

fn hex(v: u64) -> String {
    format!("{v:016x}")
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

impl Checkpoint {
    pub fn new(header: &Header) -> Self {
        Self {
            version: FORMAT_VERSION,
            header: json(header),
            sections: Vec::new(),
        }
    }

    pub fn header(&self) -> std::result::Result<Header, String> {
        serde_json::from_str(&self.header).map_err(|e| format!("bad header: {e}"))
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn push_section<'a>(
        &mut self,
        name: &str,
        metadata: String,
        tensors: impl IntoIterator<Item = (String, &'a Tensor)>,
    ) {
        self.sections.push(Section {
            name: name.to_string(),
            metadata,
            tensors: tensors.into_iter().map(|(n, t)| (n, t.clone())).collect(),
        });
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        put_str(&mut out, &self.header);
        put_u32(&mut out, self.sections.len());
        for s in &self.sections {
            put_str(&mut out, &s.name);
            put_str(&mut out, &s.metadata);
            put_u32(&mut out, s.tensors.len());
            for (name, t) in &s.tensors {
                put_str(&mut out, name);
                put_u32(&mut out, t.shape().len());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
            return Err(format!("truncated checkpoint ({} bytes)", bytes.len()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()? as u32;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err("checksum mismatch".into());
        }
        let header = r.string()?;
        let count = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let metadata = r.string()?;
            let n = r.u32()?;
            let mut tensors = Vec::new();
            for _ in 0..n {
                let tname = r.string()?;
                let rank = r.u32()?;
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    shape.push(usize::try_from(r.u64()?).map_err(|_| "dimension overflow")?);
                }
                let len = shape
                    .iter()
                    .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                    .ok_or("tensor size overflow")?;
                let raw = r.take(len.checked_mul(8).ok_or("tensor size overflow")?)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let t = Tensor::new(&shape, data).map_err(|e| e.to_string())?;
                tensors.push((tname, t));
            }
            sections.push(Section {
                name,
                metadata,
                tensors,
            });
        }
        if r.pos != body.len() {
            return Err(format!("{} trailing bytes", body.len() - r.pos));
        }
        Ok(Self {
            version,
            header,
            sections,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| CliError::format(path, e))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("length fits in u32");
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid UTF-8".into())
    }
}

pub fn backbone_checkpoint(model: &DualEncoderModel, seed: u64) -> Checkpoint {
    let mut ck = Checkpoint::new(&Header {
        encoder: model.config.clone(),
        seed,
    });
    let meta = BackboneMeta {
        frozen: model.frozen,
        fingerprint: hex(model.fingerprint()),
    };
    ck.push_section(BACKBONE_SECTION, json(&meta), model.named_tensors());
    ck
}

pub fn adapter_checkpoint(model: &AdaptedModel, seed: u64) -> Checkpoint {
    let mut ck = Checkpoint::new(&Header {
        encoder: model.backbone.config.clone(),
        seed,
    });
    let meta = AdapterMeta {
        placement: model.placement.clone(),
        mode: model.mode,
        depth: model.depth,
        seed,
        backbone_fingerprint: hex(model.backbone.fingerprint()),
    };
    ck.push_section(ADAPTER_SECTION, json(&meta), model.named_adapter_tensors());
    ck
}

fn section<'a>(ck: &'a Checkpoint, name: &str, path: &Path) -> Result<&'a Section> {
    ck.section(name)
        .ok_or_else(|| CliError::format(path, format!("no {name} section")))
}

/// Rebuilds a backbone from a checkpoint file.
pub fn load_backbone(path: &Path) -> Result<(DualEncoderModel, Header)> {
    let ck = Checkpoint::read(path)?;
    let header = ck.header().map_err(|e| CliError::format(path, e))?;
    let s = section(&ck, BACKBONE_SECTION, path)?;
    let meta: BackboneMeta =
        serde_json::from_str(&s.metadata).map_err(|e| CliError::format(path, e.to_string()))?;
    let mut model = DualEncoderModel::new(header.encoder.clone(), header.seed)?;
    model.load_tensors(s.tensors.clone())?;
    model.frozen = meta.frozen;
    if hex(model.fingerprint()) != meta.fingerprint {
        return Err(CliError::format(path, "backbone fingerprint mismatch"));
    }
    Ok((model, header))
}

/// Attaches the adapters stored at `path` to `backbone`.
pub fn load_adapters(path: &Path, backbone: DualEncoderModel) -> Result<AdaptedModel> {
    let ck = Checkpoint::read(path)?;
    let s = section(&ck, ADAPTER_SECTION, path)?;
    let meta: AdapterMeta =
        serde_json::from_str(&s.metadata).map_err(|e| CliError::format(path, e.to_string()))?;
    if meta.backbone_fingerprint != hex(backbone.fingerprint()) {
        return Err(CliError::Config(format!(
            "{}: adapters were trained on a different backbone",
            path.display()
        )));
    }
    let mut model = attach(backbone, meta.placement, meta.mode, meta.depth, meta.seed)?;
    model.load_adapter_tensors(s.tensors.clone())?;
    Ok(model)
}
