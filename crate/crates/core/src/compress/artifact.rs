//! The `MESW` expert container.
//!
//! ```text
//! "MESW" | version u16 | manifest_len u32 | manifest (UTF-8 JSON)
//! per layer:
//!   m u32 | n u32 | b u8 | k u32
//!   salient indices  k × u32 (ascending)
//!   salient rows     k × n × u16 (binary16 bits)
//!   steps            n × f32
//!   codes_len u32 | packed codes
//! ```
//! Everything is little-endian.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CompressedDelta;
use crate::error::{Error, Result};
use crate::quant::{PackedCodes, QuantConfig, StepSizes};
use crate::salient::SalientSet;

pub const ARTIFACT_MAGIC: [u8; 4] = *b"MESW";
pub const ARTIFACT_VERSION: u16 = 1;
/// Magic, version and manifest length prefix.
pub const FILE_HEADER_FIXED_BYTES: usize = 4 + 2 + 4;
/// m, n, b, k and the codes length prefix.
pub const LAYER_HEADER_BYTES: usize = 4 + 4 + 1 + 4 + 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub model_id: String,
    pub domain: String,
    /// SHA-256 (hex) of the base model's FP32 weight bytes.
    pub base_digest: String,
    pub layers: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertArtifact {
    pub manifest: Manifest,
    pub layers: Vec<CompressedDelta>,
}

impl ExpertArtifact {
    pub fn new(model_id: impl Into<String>, domain: impl Into<String>, base_digest: impl Into<String>, layers: Vec<CompressedDelta>) -> Self {
        Self {
            manifest: Manifest {
                model_id: model_id.into(),
                domain: domain.into(),
                base_digest: base_digest.into(),
                layers: layers.len() as u32,
            },
            layers,
        }
    }

    /// SHA-256 (hex) of the serialized bytes.
    pub fn digest(&self) -> String {
        hex_sha256(&serialize_artifact(self))
    }
}

pub(crate) fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn serialize_artifact(artifact: &ExpertArtifact) -> Vec<u8> {
    let manifest = serde_json::to_vec(&artifact.manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(compressed_size_bytes(artifact).total);
    out.extend_from_slice(&ARTIFACT_MAGIC);
    out.extend_from_slice(&ARTIFACT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    for layer in &artifact.layers {
        out.extend_from_slice(&(layer.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.cols() as u32).to_le_bytes());
        out.push(layer.bits());
        out.extend_from_slice(&(layer.salient().len() as u32).to_le_bytes());
        for &i in layer.salient().indices() {
            out.extend_from_slice(&i.to_le_bytes());
        }
        for &h in layer.salient_rows_bits() {
            out.extend_from_slice(&h.to_le_bytes());
        }
        for &s in layer.steps().as_slice() {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&(layer.packed().bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&layer.packed().bytes);
    }
    out
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            what,
            expected: self.pos.saturating_add(n),
            actual: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self, what: &'static str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn deserialize_artifact(bytes: &[u8]) -> Result<ExpertArtifact> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != ARTIFACT_MAGIC {
        return Err(Error::BadMagic {
            expected: ARTIFACT_MAGIC,
            found: magic,
        });
    }
    let version = r.u16("version")?;
    if version != ARTIFACT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mlen = r.u32("manifest length")? as usize;
    let manifest: Manifest =
        serde_json::from_slice(r.take(mlen, "manifest")?).map_err(|e| Error::Manifest(e.to_string()))?;

    let mut layers = Vec::with_capacity(manifest.layers as usize);
    for _ in 0..manifest.layers {
        let m = r.u32("layer rows")? as usize;
        let n = r.u32("layer cols")? as usize;
        let cfg = QuantConfig::new(r.u8("layer bits")?)?;
        let k = r.u32("salient count")? as usize;
        if k > m {
            return Err(Error::InvalidArgument(format!("salient count {k} exceeds {m} rows")));
        }
        let mut indices = Vec::with_capacity(k);
        for _ in 0..k {
            indices.push(r.u32("salient indices")?);
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("salient indices not strictly ascending".into()));
        }
        let salient = SalientSet::new(indices, m)?;
        let mut rows = Vec::with_capacity(k * n);
        for _ in 0..k * n {
            rows.push(r.u16("salient rows")?);
        }
        let mut steps = Vec::with_capacity(n);
        for _ in 0..n {
            steps.push(r.f32("steps")?);
        }
        let clen = r.u32("codes length")? as usize;
        let expected = PackedCodes::expected_len(m, n, cfg.bits());
        if clen != expected {
            return Err(Error::Truncated {
                what: "packed codes",
                expected,
                actual: clen,
            });
        }
        let packed = PackedCodes {
            bits: cfg.bits(),
            rows: m,
            cols: n,
            bytes: r.take(clen, "packed codes")?.to_vec(),
        };
        layers.push(CompressedDelta::from_parts(cfg, salient, rows, StepSizes::new(steps)?, packed)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::InvalidArgument(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ExpertArtifact { manifest, layers })
}

/// Deserializes and checks the manifest's base digest against `base_digest`.
pub fn deserialize_artifact_for_base(bytes: &[u8], base_digest: &str) -> Result<ExpertArtifact> {
    let a = deserialize_artifact(bytes)?;
    if a.manifest.base_digest != base_digest {
        return Err(Error::DigestMismatch {
            expected: base_digest.to_string(),
            found: a.manifest.base_digest,
        });
    }
    Ok(a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayerSize {
    pub header: usize,
    pub indices: usize,
    pub salient: usize,
    pub steps: usize,
    pub codes: usize,
}

impl LayerSize {
    pub fn total(&self) -> usize {
        self.header + self.indices + self.salient + self.steps + self.codes
    }

    pub fn for_shape(m: usize, n: usize, bits: u8, k: usize) -> Self {
        Self {
            header: LAYER_HEADER_BYTES,
            indices: 4 * k,
            salient: 2 * k * n,
            steps: 4 * n,
            codes: PackedCodes::expected_len(m, n, bits),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactSize {
    /// Magic, version, manifest length prefix and manifest bytes.
    pub header: usize,
    pub layers: Vec<LayerSize>,
    pub total: usize,
}

/// Exact on-disk size with a per-layer breakdown.
pub fn compressed_size_bytes(artifact: &ExpertArtifact) -> ArtifactSize {
    let manifest_len = serde_json::to_vec(&artifact.manifest).map(|v| v.len()).unwrap_or(0);
    let header = FILE_HEADER_FIXED_BYTES + manifest_len;
    let layers: Vec<LayerSize> = artifact
        .layers
        .iter()
        .map(|l| LayerSize::for_shape(l.rows(), l.cols(), l.bits(), l.salient().len()))
        .collect();
    let total = header + layers.iter().map(LayerSize::total).sum::<usize>();
    ArtifactSize { header, layers, total }
}
