//! Byte-level toy language model: embedding plus sinusoidal position bias,
//! `depth` square linear+ReLU layers, and a linear head. There is no
//! attention, so the logits at a position depend only on that position's
//! token and index.

mod backward;
mod io;
mod synth;

pub use io::{load_sequences, save_sequences, MODEL_MAGIC, MODEL_VERSION};
pub use synth::{calibration_set, synthesize_expert, ExpertSpec, SyntheticExpert};

use crate::compress::hex_sha256;
use crate::error::{Error, Result};
use crate::infer::{delta_matmul, DeltaSet};
use crate::numerics::{DenseMatrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyConfig {
    pub vocab: usize,
    pub width: usize,
    pub depth: usize,
    /// Trailing hidden channels that never activate: their embedding
    /// columns, position bias and incoming weight columns are all zero.
    pub dead_channels: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            width: 64,
            depth: 4,
            dead_channels: 0,
        }
    }
}

impl ToyConfig {
    pub fn is_dead(&self, channel: usize) -> bool {
        channel >= self.width - self.dead_channels
    }

    pub fn live_channels(&self) -> std::ops::Range<usize> {
        0..self.width - self.dead_channels
    }

    pub fn dead_range(&self) -> std::ops::Range<usize> {
        self.width - self.dead_channels..self.width
    }

    fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.width == 0 || self.depth == 0 {
            return Err(Error::InvalidArgument("toy model dimensions must be positive".into()));
        }
        if self.dead_channels >= self.width {
            return Err(Error::InvalidArgument("dead channels must leave at least one live channel".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm {
    config: ToyConfig,
    embedding: DenseMatrix,
    layers: Vec<DenseMatrix>,
    head: DenseMatrix,
}

/// Per-position activations kept for the backward pass.
pub(crate) struct Trace {
    /// `inputs[l]` is the `T×d` input of hidden layer `l`; `inputs[depth]` feeds the head.
    pub inputs: Vec<DenseMatrix>,
    pub logits: DenseMatrix,
}

impl ToyLm {
    pub fn from_parts(config: ToyConfig, embedding: DenseMatrix, layers: Vec<DenseMatrix>, head: DenseMatrix) -> Result<Self> {
        config.validate()?;
        let (v, d) = (config.vocab, config.width);
        if embedding.shape() != (v, d) {
            return Err(Error::dims("embedding rows", v, embedding.rows()));
        }
        if layers.len() != config.depth {
            return Err(Error::dims("layer count", config.depth, layers.len()));
        }
        if let Some(bad) = layers.iter().find(|w| w.shape() != (d, d)) {
            return Err(Error::dims("hidden layer rows", d, bad.rows()));
        }
        if head.shape() != (d, v) {
            return Err(Error::dims("head rows", d, head.rows()));
        }
        Ok(Self {
            config,
            embedding,
            layers,
            head,
        })
    }

    /// Seeded base model. Embeddings ~ N(0,1), hidden weights ~ N(0, 2/d),
    /// head ~ N(0, 1/d); dead channels are zeroed as described on [`ToyConfig`].
    pub fn base(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (v, d) = (config.vocab, config.width);
        let mut rng = Rng::derive(seed, 0xba5e);
        let dead = |j: usize| config.is_dead(j);
        let embedding = DenseMatrix::from_fn(v, d, |_, j| {
            let g = rng.gaussian();
            if dead(j) {
                0.0
            } else {
                g
            }
        });
        let sigma = (2.0 / d as f32).sqrt();
        let layers = (0..config.depth)
            .map(|_| {
                DenseMatrix::from_fn(d, d, |_, j| {
                    let g = sigma * rng.gaussian();
                    if dead(j) {
                        0.0
                    } else {
                        g
                    }
                })
            })
            .collect();
        let head = DenseMatrix::gaussian(d, v, (1.0 / d as f32).sqrt(), &mut rng);
        Self::from_parts(config, embedding, layers, head)
    }

    pub fn config(&self) -> ToyConfig {
        self.config
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn embedding(&self) -> &DenseMatrix {
        &self.embedding
    }

    pub fn layers(&self) -> &[DenseMatrix] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &DenseMatrix {
        &self.layers[l]
    }

    pub fn head(&self) -> &DenseMatrix {
        &self.head
    }

    pub fn parameter_count(&self) -> usize {
        self.embedding.as_slice().len()
            + self.layers.iter().map(|w| w.as_slice().len()).sum::<usize>()
            + self.head.as_slice().len()
    }

    /// SHA-256 (hex) over the FP32 little-endian bytes of every tensor in
    /// declaration order.
    pub fn digest(&self) -> String {
        let mut bytes = Vec::with_capacity(self.parameter_count() * 4);
        bytes.extend(self.embedding.to_le_bytes());
        for w in &self.layers {
            bytes.extend(w.to_le_bytes());
        }
        bytes.extend(self.head.to_le_bytes());
        hex_sha256(&bytes)
    }

    /// Returns a copy with every hidden layer replaced by `W_l + Δ_l`.
    pub fn merged(&self, deltas: &[DenseMatrix]) -> Result<Self> {
        if deltas.len() != self.depth() {
            return Err(Error::dims("delta layer count", self.depth(), deltas.len()));
        }
        let layers = self.layers.iter().zip(deltas).map(|(w, d)| w.add(d)).collect::<Result<Vec<_>>>()?;
        Self::from_parts(self.config, self.embedding.clone(), layers, self.head.clone())
    }

    pub(crate) fn with_layers(&self, layers: Vec<DenseMatrix>) -> Result<Self> {
        Self::from_parts(self.config, self.embedding.clone(), layers, self.head.clone())
    }

    /// Sinusoidal bias for position `t`, zero on dead channels.
    pub fn position_bias(&self, t: usize) -> Vec<f32> {
        let d = self.width();
        (0..d)
            .map(|c| {
                if self.config.is_dead(c) {
                    return 0.0;
                }
                let pair = (c / 2 * 2) as f64;
                let angle = t as f64 / 10000f64.powf(pair / d as f64);
                if c % 2 == 0 {
                    angle.sin() as f32
                } else {
                    angle.cos() as f32
                }
            })
            .collect()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.vocab()) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: self.vocab(),
            });
        }
        Ok(())
    }

    /// `T×d` embedding-plus-position rows for `(token, position)` pairs.
    fn embed(&self, tokens: &[u32], positions: impl Iterator<Item = usize>, deltas: Option<&DeltaSet>) -> Result<DenseMatrix> {
        let d = self.width();
        let mut h = DenseMatrix::zeros(tokens.len(), d);
        for ((r, &tok), t) in tokens.iter().enumerate().zip(positions) {
            let row = h.row_mut(r);
            row.copy_from_slice(self.embedding.row(tok as usize));
            for (x, b) in row.iter_mut().zip(self.position_bias(t)) {
                *x += b;
            }
        }
        if let Some(p) = deltas.and_then(|d| d.embedding.as_ref()) {
            let onehot = DenseMatrix::from_fn(tokens.len(), self.vocab(), |r, v| (tokens[r] as usize == v) as u8 as f32);
            let extra = delta_matmul(&onehot, p)?;
            for (x, e) in h.as_mut_slice().iter_mut().zip(extra.as_slice()) {
                *x += e;
            }
        }
        Ok(h)
    }

    fn run(&self, mut h: DenseMatrix, deltas: Option<&DeltaSet>, keep: bool) -> Result<Trace> {
        if let Some(ds) = deltas {
            if ds.layers.len() != self.depth() {
                return Err(Error::dims("delta providers vs hidden layers", self.depth(), ds.layers.len()));
            }
        }
        let mut inputs = Vec::new();
        for (l, w) in self.layers.iter().enumerate() {
            let mut z = h.matmul(w)?;
            if let Some(ds) = deltas {
                let extra = delta_matmul(&h, &ds.layers[l])?;
                for (a, b) in z.as_mut_slice().iter_mut().zip(extra.as_slice()) {
                    *a += b;
                }
            }
            for v in z.as_mut_slice() {
                *v = v.max(0.0);
            }
            if keep {
                inputs.push(std::mem::replace(&mut h, z));
            } else {
                h = z;
            }
        }
        let mut logits = h.matmul(&self.head)?;
        if let Some(p) = deltas.and_then(|d| d.head.as_ref()) {
            let extra = delta_matmul(&h, p)?;
            for (a, b) in logits.as_mut_slice().iter_mut().zip(extra.as_slice()) {
                *a += b;
            }
        }
        if keep {
            inputs.push(h);
        }
        Ok(Trace { inputs, logits })
    }

    /// `T×V` logits for every position.
    pub fn forward(&self, tokens: &[u32]) -> Result<DenseMatrix> {
        self.check_tokens(tokens)?;
        let h = self.embed(tokens, 0..tokens.len(), None)?;
        Ok(self.run(h, None, false)?.logits)
    }

    /// Forward with `x·W + x·Δ̃` at every layer that has a provider.
    pub fn forward_with_delta(&self, deltas: &DeltaSet, tokens: &[u32]) -> Result<DenseMatrix> {
        self.check_tokens(tokens)?;
        let h = self.embed(tokens, 0..tokens.len(), Some(deltas))?;
        Ok(self.run(h, Some(deltas), false)?.logits)
    }

    /// Logits of a single `(token, position)`.
    pub fn forward_position(&self, deltas: Option<&DeltaSet>, token: u32, position: usize) -> Result<Vec<f32>> {
        self.check_tokens(&[token])?;
        let h = self.embed(&[token], std::iter::once(position), deltas)?;
        Ok(self.run(h, deltas, false)?.logits.into_vec())
    }

    pub(crate) fn trace(&self, tokens: &[u32], deltas: Option<&DeltaSet>) -> Result<Trace> {
        self.check_tokens(tokens)?;
        let h = self.embed(tokens, 0..tokens.len(), deltas)?;
        self.run(h, deltas, true)
    }

    /// Inputs of hidden layer `layer` at every position of `tokens`.
    pub fn layer_inputs(&self, tokens: &[u32], layer: usize) -> Result<Vec<Vec<f32>>> {
        if layer >= self.depth() {
            return Err(Error::InvalidArgument(format!("layer {layer} >= depth {}", self.depth())));
        }
        let tr = self.trace(tokens, None)?;
        let x = &tr.inputs[layer];
        Ok((0..x.rows()).map(|r| x.row(r).to_vec()).collect())
    }

    /// Appends the argmax of the last position's logits `max_new` times
    /// (ties to the lowest id). Returns prompt followed by generated ids.
    pub fn greedy_decode(&self, deltas: Option<&DeltaSet>, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
        self.check_tokens(prompt)?;
        let mut out = prompt.to_vec();
        for _ in 0..max_new {
            let pos = out.len() - 1;
            let logits = self.forward_position(deltas, out[pos], pos)?;
            out.push(argmax(&logits) as u32);
        }
        Ok(out)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Byte-level tokenization: one token per UTF-8 byte.
pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Inverse of [`tokenize`]; ids ≥ 256 or invalid UTF-8 are replaced lossily.
pub fn detokenize(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().map(|&t| t.min(255) as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::DeltaProvider;

    fn small() -> ToyLm {
        ToyLm::base(
            ToyConfig {
                vocab: 256,
                width: 16,
                depth: 3,
                dead_channels: 0,
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn tokenizer_roundtrip() {
        assert_eq!(tokenize("A"), vec![65]);
        assert!(tokenize("").is_empty());
        for s in ["héllo wörld", "数学问题", "a\nb\tc"] {
            assert_eq!(detokenize(&tokenize(s)), s);
        }
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let cfg = ToyConfig {
            vocab: 8,
            width: 4,
            depth: 2,
            dead_channels: 0,
        };
        let m = ToyLm::from_parts(cfg, DenseMatrix::zeros(8, 4), vec![DenseMatrix::zeros(4, 4); 2], DenseMatrix::zeros(4, 8)).unwrap();
        assert!(m.forward(&[1, 2, 3]).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_relu_embedding() {
        let cfg = ToyConfig {
            vocab: 6,
            width: 4,
            depth: 1,
            dead_channels: 0,
        };
        let mut rng = Rng::new(3);
        let e = DenseMatrix::gaussian(6, 4, 1.0, &mut rng);
        let head = DenseMatrix::from_fn(4, 6, |i, j| (i == j) as u8 as f32);
        let m = ToyLm::from_parts(cfg, e.clone(), vec![DenseMatrix::identity(4)], head).unwrap();
        let logits = m.forward(&[2, 5]).unwrap();
        for (t, &tok) in [2usize, 5].iter().enumerate() {
            let bias = m.position_bias(t);
            for (c, b) in bias.iter().take(4).enumerate() {
                assert_eq!(logits.get(t, c), (e.get(tok, c) + b).max(0.0));
            }
            assert_eq!(logits.get(t, 4), 0.0);
        }
    }

    #[test]
    fn rejects_bad_tokens() {
        let m = small();
        assert!(matches!(m.forward(&[300]), Err(Error::TokenOutOfRange { token: 300, .. })));
        assert!(m.forward(&[]).is_err());
    }

    #[test]
    fn order_sensitive() {
        let m = small();
        let a = m.forward(&[10, 20]).unwrap();
        let b = m.forward(&[20, 10]).unwrap();
        assert_ne!(a.row(1), b.row(0));
    }

    #[test]
    fn zero_delta_matches_base() {
        let m = small();
        let ds = DeltaSet::zeros(m.depth(), m.width());
        let toks = tokenize("hello");
        assert_eq!(m.forward_with_delta(&ds, &toks).unwrap(), m.forward(&toks).unwrap());
        assert_eq!(m.greedy_decode(Some(&ds), &toks, 5).unwrap(), m.greedy_decode(None, &toks, 5).unwrap());
    }

    #[test]
    fn layer_misalignment_is_an_error() {
        let m = small();
        let ds = DeltaSet::zeros(m.depth() - 1, m.width());
        assert!(m.forward_with_delta(&ds, &[1]).is_err());
    }

    #[test]
    fn embedding_and_head_providers() {
        let m = small();
        let mut rng = Rng::new(9);
        let de = DenseMatrix::gaussian(256, 16, 0.1, &mut rng);
        let dh = DenseMatrix::gaussian(16, 256, 0.1, &mut rng);
        let mut ds = DeltaSet::zeros(m.depth(), m.width());
        ds.embedding = Some(DeltaProvider::Exact(de.clone()));
        ds.head = Some(DeltaProvider::Exact(dh.clone()));
        let merged = ToyLm::from_parts(m.config(), m.embedding().add(&de).unwrap(), m.layers().to_vec(), m.head().add(&dh).unwrap()).unwrap();
        let toks = tokenize("xyz");
        let a = m.forward_with_delta(&ds, &toks).unwrap();
        let b = merged.forward(&toks).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= 1e-4 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn decode_basics() {
        let m = small();
        let p = tokenize("ab");
        assert_eq!(m.greedy_decode(None, &p, 0).unwrap(), p);
        let out = m.greedy_decode(None, &p, 6).unwrap();
        assert_eq!(out.len(), 8);
        // Each step equals the argmax of a full forward.
        let full = m.forward(&out[..7]).unwrap();
        assert_eq!(argmax(full.row(6)) as u32, out[7]);
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }

    #[test]
    fn dead_channels_stay_silent() {
        let cfg = ToyConfig {
            dead_channels: 5,
            ..ToyConfig::default()
        };
        let m = ToyLm::base(cfg, 1).unwrap();
        for l in 0..m.depth() {
            for x in m.layer_inputs(&tokenize("the quick brown fox"), l).unwrap() {
                assert!(cfg.dead_range().all(|c| x[c] == 0.0));
            }
        }
    }
}
