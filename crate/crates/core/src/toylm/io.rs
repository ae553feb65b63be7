use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{ToyConfig, ToyLm};
use crate::compress::Reader;
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

pub const MODEL_MAGIC: [u8; 4] = *b"TOYL";
pub const MODEL_VERSION: u16 = 1;

impl ToyLm {
    /// `TOYL`, u16 version, u32 vocab/width/depth/dead channels, then the
    /// FP32 little-endian tensors E, W₁..W_L, H.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.config;
        let mut out = Vec::with_capacity(22 + self.parameter_count() * 4);
        out.extend_from_slice(&MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        for v in [c.vocab, c.width, c.depth, c.dead_channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend(self.embedding.to_le_bytes());
        for w in &self.layers {
            out.extend(w.to_le_bytes());
        }
        out.extend(self.head.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.take(4, "model magic")?.try_into().unwrap();
        if magic != MODEL_MAGIC {
            return Err(Error::BadMagic {
                expected: MODEL_MAGIC,
                found: magic,
            });
        }
        let version = r.u16("model version")?;
        if version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("model dims")? as usize;
        }
        let config = ToyConfig {
            vocab: dims[0],
            width: dims[1],
            depth: dims[2],
            dead_channels: dims[3],
        };
        config.validate()?;
        let (v, d) = (config.vocab, config.width);
        let mut tensor = |rows: usize, cols: usize| -> Result<DenseMatrix> {
            let raw = r.take(rows * cols * 4, "model tensor")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            DenseMatrix::new(rows, cols, data)
        };
        let embedding = tensor(v, d)?;
        let layers = (0..config.depth).map(|_| tensor(d, d)).collect::<Result<Vec<_>>>()?;
        let head = tensor(d, v)?;
        if r.remaining() != 0 {
            return Err(Error::InvalidArgument(format!("{} trailing bytes after model", r.remaining())));
        }
        Self::from_parts(config, embedding, layers, head)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Writes one JSON array of token ids per line.
pub fn save_sequences(path: &Path, seqs: &[Vec<u32>]) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    for s in seqs {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Reads token sequences written by [`save_sequences`]; blank lines are skipped.
pub fn load_sequences(path: &Path) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(std::fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::InvalidArgument(format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}
