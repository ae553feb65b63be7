//! Salient-aware delta compression: extract Δ, score input channels
//! against an all-rows quantization, keep the top-k rows in half precision,
//! re-quantize the rest, and optionally distill the step sizes.

mod artifact;
pub(crate) mod distill;
mod lowrank;
mod pipeline;
mod rescale;

pub use artifact::{
    compressed_size_bytes, deserialize_artifact, deserialize_artifact_for_base, serialize_artifact, ArtifactSize,
    ExpertArtifact, LayerSize, Manifest, ARTIFACT_MAGIC, ARTIFACT_VERSION, FILE_HEADER_FIXED_BYTES,
    LAYER_HEADER_BYTES,
};
pub use distill::{calibration_loss, distill_step_sizes, teacher_logits, DIVERGENCE_FACTOR, DistillConfig, DistillReport, QuantizedLayer, STEP_FLOOR};
pub(crate) use artifact::{hex_sha256, Reader};
pub use lowrank::{lora_truncate, LowRankDelta};
pub use pipeline::{compress_expert, ExpertCompression};
pub use rescale::{rescale_quantize, RescaledDelta, DEFAULT_RESCALE_GRID};

use crate::error::{Error, Result};
use crate::numerics::{f32_to_half_bits, half_bits_to_f32, DenseMatrix};
use crate::quant::{
    dequantize, init_step_sizes, init_step_sizes_over, pack_codes, quantize_codes, unpack_codes, CodeMatrix,
    PackedCodes, QuantConfig, StepSizes,
};
use crate::salient::{
    score_magnitude, score_random, score_reconstruction, score_wanda, top_k, ActivationStats, SalientMetric,
    SalientSet,
};

/// One layer's compressed delta: packed low-bit codes with per-output-channel
/// steps, plus the salient input rows stored as binary16.
///
/// Salient rows keep null bits in the packed stream (code 0 for b ≥ 2, code −1
/// for binary); kernels mask those rows out and add the half rows instead.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedDelta {
    cfg: QuantConfig,
    salient: SalientSet,
    salient_rows: Vec<u16>,
    steps: StepSizes,
    packed: PackedCodes,
}

impl CompressedDelta {
    pub fn from_parts(
        cfg: QuantConfig,
        salient: SalientSet,
        salient_rows: Vec<u16>,
        steps: StepSizes,
        packed: PackedCodes,
    ) -> Result<Self> {
        let (m, n) = (packed.rows, packed.cols);
        if packed.bits != cfg.bits() {
            return Err(Error::InvalidArgument(format!(
                "packed width {} differs from config {}",
                packed.bits,
                cfg.bits()
            )));
        }
        if steps.len() != n {
            return Err(Error::dims("step sizes vs output channels", n, steps.len()));
        }
        if salient_rows.len() != salient.len() * n {
            return Err(Error::dims("salient row values", salient.len() * n, salient_rows.len()));
        }
        if salient.indices().last().is_some_and(|&i| i as usize >= m) {
            return Err(Error::InvalidArgument("salient index out of range".into()));
        }
        let expected = PackedCodes::expected_len(m, n, cfg.bits());
        if packed.bytes.len() != expected {
            return Err(Error::Truncated {
                what: "packed codes",
                expected,
                actual: packed.bytes.len(),
            });
        }
        Ok(Self {
            cfg,
            salient,
            salient_rows,
            steps,
            packed,
        })
    }

    pub fn rows(&self) -> usize {
        self.packed.rows
    }

    pub fn cols(&self) -> usize {
        self.packed.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    pub fn config(&self) -> QuantConfig {
        self.cfg
    }

    pub fn bits(&self) -> u8 {
        self.cfg.bits()
    }

    pub fn salient(&self) -> &SalientSet {
        &self.salient
    }

    /// Half bits of salient row `slot` (position within the salient set).
    pub fn salient_row_bits(&self, slot: usize) -> &[u16] {
        let n = self.cols();
        &self.salient_rows[slot * n..(slot + 1) * n]
    }

    pub fn salient_rows_bits(&self) -> &[u16] {
        &self.salient_rows
    }

    pub fn steps(&self) -> &StepSizes {
        &self.steps
    }

    pub fn packed(&self) -> &PackedCodes {
        &self.packed
    }

    pub fn codes(&self) -> Result<CodeMatrix> {
        unpack_codes(&self.packed)
    }

    /// Dense `Δ̃`: widened half rows where salient, `q_ij · s_j` elsewhere.
    pub fn reconstruct(&self) -> Result<DenseMatrix> {
        let mut out = dequantize(&self.codes()?, &self.steps, self.cfg)?;
        for (slot, &i) in self.salient.indices().iter().enumerate() {
            for (dst, &h) in out.row_mut(i as usize).iter_mut().zip(self.salient_row_bits(slot)) {
                *dst = half_bits_to_f32(h);
            }
        }
        Ok(out)
    }
}

/// Salient-aware layer compression settings.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionConfig {
    pub bits: u8,
    pub salient_k: usize,
    pub metric: SalientMetric,
    pub distill: DistillConfig,
    /// Only used by the random metric.
    pub seed: u64,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            bits: 2,
            salient_k: 8,
            metric: SalientMetric::Reconstruction,
            distill: DistillConfig::default(),
            seed: 0,
        }
    }
}

/// `Δ = W_FT − W`.
pub fn extract_delta(finetuned: &DenseMatrix, base: &DenseMatrix) -> Result<DenseMatrix> {
    finetuned.sub(base)
}

/// Scores input channels of `delta` under `metric`, quantizing all rows with
/// freshly initialized steps where the metric needs a reconstruction.
pub fn score_channels(
    delta: &DenseMatrix,
    stats: &ActivationStats,
    qcfg: QuantConfig,
    metric: SalientMetric,
    seed: u64,
) -> Result<crate::salient::ChannelScore> {
    if stats.len() != delta.rows() {
        return Err(Error::dims("activation stats vs delta rows", delta.rows(), stats.len()));
    }
    match metric {
        SalientMetric::Reconstruction => {
            let steps = init_step_sizes(delta, qcfg)?.steps;
            let quantized = dequantize(&quantize_codes(delta, &steps, qcfg)?, &steps, qcfg)?;
            score_reconstruction(delta, &quantized, stats)
        }
        SalientMetric::Magnitude => Ok(score_magnitude(delta)),
        SalientMetric::Wanda => score_wanda(delta, stats),
        SalientMetric::Random => Ok(score_random(delta.rows(), seed)),
    }
}

/// Compresses `delta` with an explicit salient set: half-precision salient
/// rows, steps initialized from the remaining rows, remaining rows quantized.
pub fn compress_with_salient(delta: &DenseMatrix, salient: SalientSet, qcfg: QuantConfig) -> Result<CompressedDelta> {
    let m = delta.rows();
    let mask = salient.mask(m);
    let steps = init_step_sizes_over(delta, qcfg, |i| !mask[i])?.steps;
    compress_with_steps(delta, salient, qcfg, steps)
}

/// Quantizes the non-salient rows of `delta` with the given steps.
pub fn compress_with_steps(delta: &DenseMatrix, salient: SalientSet, qcfg: QuantConfig, steps: StepSizes) -> Result<CompressedDelta> {
    let n = delta.cols();
    let mut codes = quantize_codes(delta, &steps, qcfg)?;
    let null = qcfg.null_code();
    let mut salient_rows = Vec::with_capacity(salient.len() * n);
    for &i in salient.indices() {
        let i = i as usize;
        for j in 0..n {
            codes.set(i, j, null);
        }
        salient_rows.extend(delta.row(i).iter().map(|&v| f32_to_half_bits(v)));
    }
    let packed = pack_codes(&codes, qcfg)?;
    CompressedDelta::from_parts(qcfg, salient, salient_rows, steps, packed)
}

/// The full layer pipeline: init steps on all rows and quantize, score with
/// `cfg.metric`, select top-k, then store salient rows in half precision and
/// re-quantize the rest with steps re-initialized from the non-salient rows.
pub fn compress_layer(delta: &DenseMatrix, stats: &ActivationStats, cfg: &CompressionConfig) -> Result<CompressedDelta> {
    let qcfg = QuantConfig::new(cfg.bits)?;
    if cfg.salient_k > delta.rows() {
        return Err(Error::InvalidArgument(format!(
            "salient k = {} exceeds {} input channels",
            cfg.salient_k,
            delta.rows()
        )));
    }
    let scores = score_channels(delta, stats, qcfg, cfg.metric, cfg.seed)?;
    let salient = top_k(&scores, cfg.salient_k)?;
    compress_with_salient(delta, salient, qcfg)
}

/// `Σ_i E_i · Σ_j (Δ_ij − Δ̃_ij)²`, accumulated in FP64.
pub fn activation_weighted_error(delta: &DenseMatrix, approx: &DenseMatrix, stats: &ActivationStats) -> Result<f64> {
    if delta.shape() != approx.shape() {
        return Err(Error::dims("approximation rows", delta.rows(), approx.rows()));
    }
    if stats.len() != delta.rows() {
        return Err(Error::dims("activation stats vs delta rows", delta.rows(), stats.len()));
    }
    Ok((0..delta.rows())
        .map(|i| {
            let row: f64 = delta
                .row(i)
                .iter()
                .zip(approx.row(i))
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum();
            stats.energy[i] as f64 * row
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{half_roundtrip, Rng};

    fn cfg(bits: u8, k: usize) -> CompressionConfig {
        CompressionConfig {
            bits,
            salient_k: k,
            ..CompressionConfig::default()
        }
    }

    #[test]
    fn defaults() {
        let c = CompressionConfig::default();
        assert_eq!((c.bits, c.salient_k, c.metric), (2, 8, SalientMetric::Reconstruction));
        assert_eq!((c.distill.epochs, c.distill.lr, c.distill.batch), (1, 1e-5, 4));
    }

    #[test]
    fn extract_examples() {
        let mut rng = Rng::new(1);
        let w = DenseMatrix::gaussian(3, 4, 1.0, &mut rng);
        assert!(extract_delta(&w, &w).unwrap().as_slice().iter().all(|&v| v == 0.0));
        let d = extract_delta(&DenseMatrix::from_rows(&[vec![2.0]]).unwrap(), &DenseMatrix::from_rows(&[vec![0.5]]).unwrap()).unwrap();
        assert_eq!(d.as_slice(), &[1.5]);
        let ft = DenseMatrix::gaussian(3, 4, 1.0, &mut rng);
        let d = extract_delta(&ft, &w).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(d.get(i, j), ft.get(i, j) - w.get(i, j));
            }
        }
        assert!(extract_delta(&ft, &DenseMatrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn everything_salient_is_half_rounded_delta() {
        let mut rng = Rng::new(2);
        let d = DenseMatrix::gaussian(5, 6, 0.3, &mut rng);
        let c = compress_layer(&d, &ActivationStats::uniform(5, 1.0), &cfg(2, 5)).unwrap();
        let r = c.reconstruct().unwrap();
        for (a, b) in r.as_slice().iter().zip(d.as_slice()) {
            assert_eq!(*a, half_roundtrip(*b));
        }
    }

    #[test]
    fn no_salient_is_fixed_precision() {
        let mut rng = Rng::new(3);
        let d = DenseMatrix::gaussian(7, 4, 0.3, &mut rng);
        let c = compress_layer(&d, &ActivationStats::uniform(7, 1.0), &cfg(2, 0)).unwrap();
        let q = QuantConfig::new(2).unwrap();
        let s = init_step_sizes(&d, q).unwrap().steps;
        let fixed = dequantize(&quantize_codes(&d, &s, q).unwrap(), &s, q).unwrap();
        assert_eq!(c.reconstruct().unwrap(), fixed);
        assert!(c.salient().is_empty());
    }

    #[test]
    fn planted_row_goes_to_half_precision() {
        let d = DenseMatrix::from_rows(&[
            vec![0.1, -0.05],
            vec![1.4, -2.9],
            vec![-0.08, 0.02],
            vec![2.0, 0.09],
        ])
        .unwrap();
        let stats = ActivationStats::uniform(4, 1.0);
        let mixed = compress_layer(&d, &stats, &cfg(2, 1)).unwrap();
        assert_eq!(mixed.salient().indices(), &[1]);
        let fixed = compress_layer(&d, &stats, &cfg(2, 0)).unwrap();
        let e_mixed = activation_weighted_error(&d, &mixed.reconstruct().unwrap(), &stats).unwrap();
        let e_fixed = activation_weighted_error(&d, &fixed.reconstruct().unwrap(), &stats).unwrap();
        // Brute force over every single-row choice: the selected row is optimal.
        let best = (0..4)
            .map(|r| {
                let c = compress_with_salient(&d, SalientSet::new(vec![r], 4).unwrap(), QuantConfig::new(2).unwrap()).unwrap();
                activation_weighted_error(&d, &c.reconstruct().unwrap(), &stats).unwrap()
            })
            .fold(f64::INFINITY, f64::min);
        assert!(e_mixed < e_fixed, "{e_mixed} vs {e_fixed}");
        assert_eq!(e_mixed, best);
    }

    #[test]
    fn salient_codes_are_null() {
        let mut rng = Rng::new(4);
        let d = DenseMatrix::gaussian(10, 3, 1.0, &mut rng);
        for bits in [1u8, 2, 4] {
            let c = compress_layer(&d, &ActivationStats::uniform(10, 1.0), &cfg(bits, 3)).unwrap();
            let codes = c.codes().unwrap();
            let null = if bits == 1 { -1 } else { 0 };
            for &i in c.salient().indices() {
                assert!((0..3).all(|j| codes.get(i as usize, j) == null));
                // Null bits in the packed stream.
                assert!((0..3).all(|j| c.packed().offset_at(i as usize, j) == if bits == 1 { 0 } else { 1 << (bits - 1) }));
            }
        }
    }

    #[test]
    fn zero_delta_and_bad_k() {
        let d = DenseMatrix::zeros(4, 4);
        let c = compress_layer(&d, &ActivationStats::uniform(4, 1.0), &cfg(2, 1)).unwrap();
        assert!(c.reconstruct().unwrap().as_slice().iter().all(|&v| v == 0.0));
        assert!(compress_layer(&d, &ActivationStats::uniform(4, 1.0), &cfg(2, 5)).is_err());
        assert!(compress_layer(&d, &ActivationStats::uniform(3, 1.0), &cfg(2, 1)).is_err());
    }
}
