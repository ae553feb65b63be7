//! Input-channel saliency for delta matrices.
//!
//! The reconstruction score of channel `i` over a calibration set is
//! `Σ_t Σ_j (x_i^(t) (Δ_ij − Δ̂_ij))²`, which factorizes into
//! `E_i · Σ_j (Δ_ij − Δ̂_ij)²` with `E_i = Σ_t (x_i^(t))²`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, Rng};
use crate::toylm::ToyLm;

/// Per-channel squared-activation energy accumulated over calibration tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    pub energy: Vec<f32>,
    pub sample_count: usize,
}

impl ActivationStats {
    /// Accumulates in FP64, stores FP32.
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a [f32]>) -> Result<Self> {
        let mut acc: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for x in samples {
            if count == 0 {
                acc = vec![0.0; x.len()];
            } else if x.len() != acc.len() {
                return Err(Error::dims("activation sample width", acc.len(), x.len()));
            }
            for (a, &v) in acc.iter_mut().zip(x) {
                *a += (v as f64) * (v as f64);
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyCalibration);
        }
        Ok(Self {
            energy: acc.into_iter().map(|v| v as f32).collect(),
            sample_count: count,
        })
    }

    pub fn uniform(m: usize, value: f32) -> Self {
        Self {
            energy: vec![value; m],
            sample_count: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.energy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energy.is_empty()
    }

    /// True when every channel is silent; scoring still works but ranks by index.
    pub fn all_zero(&self) -> bool {
        self.energy.iter().all(|&e| e == 0.0)
    }
}

/// Squared inputs of hidden layer `layer` (0-based) over every position of
/// every calibration sequence, run through `model`.
pub fn collect_activation_stats(model: &ToyLm, layer: usize, calib: &[Vec<u32>]) -> Result<ActivationStats> {
    let mut acc = vec![0.0f64; model.width()];
    let mut count = 0usize;
    for seq in calib {
        let acts = model.layer_inputs(seq, layer)?;
        for x in &acts {
            for (a, &v) in acc.iter_mut().zip(x) {
                *a += (v as f64) * (v as f64);
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyCalibration);
    }
    Ok(ActivationStats {
        energy: acc.into_iter().map(|v| v as f32).collect(),
        sample_count: count,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelScore(pub Vec<f32>);

impl ChannelScore {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Sorted, unique input-channel indices kept in half precision.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SalientSet {
    indices: Vec<u32>,
}

impl SalientSet {
    pub fn new(mut indices: Vec<u32>, m: usize) -> Result<Self> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("duplicate salient index".into()));
        }
        if let Some(&last) = indices.last() {
            if last as usize >= m {
                return Err(Error::InvalidArgument(format!("salient index {last} >= {m} rows")));
            }
        }
        Ok(Self { indices })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&(i as u32)).is_ok()
    }

    /// Dense membership mask of length `m`.
    pub fn mask(&self, m: usize) -> Vec<bool> {
        let mut mask = vec![false; m];
        for &i in &self.indices {
            mask[i as usize] = true;
        }
        mask
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SalientMetric {
    #[default]
    Reconstruction,
    Magnitude,
    Wanda,
    Random,
}

impl SalientMetric {
    pub const ALL: [SalientMetric; 4] = [Self::Reconstruction, Self::Magnitude, Self::Wanda, Self::Random];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Reconstruction => "reconstruction",
            Self::Magnitude => "magnitude",
            Self::Wanda => "wanda",
            Self::Random => "random",
        }
    }
}

impl fmt::Display for SalientMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SalientMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown metric {s:?}")))
    }
}

/// `score_i = E_i · Σ_j (Δ_ij − Δ̂_ij)²`.
pub fn score_reconstruction(delta: &DenseMatrix, quantized: &DenseMatrix, stats: &ActivationStats) -> Result<ChannelScore> {
    if delta.shape() != quantized.shape() {
        return Err(Error::dims("quantized delta rows", delta.rows(), quantized.rows()));
    }
    if stats.len() != delta.rows() {
        return Err(Error::dims("activation stats vs delta rows", delta.rows(), stats.len()));
    }
    let scores = (0..delta.rows())
        .map(|i| {
            let row_err: f64 = delta
                .row(i)
                .iter()
                .zip(quantized.row(i))
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum();
            (stats.energy[i] as f64 * row_err) as f32
        })
        .collect();
    Ok(ChannelScore(scores))
}

/// Row L1 norm.
pub fn score_magnitude(delta: &DenseMatrix) -> ChannelScore {
    ChannelScore((0..delta.rows()).map(|i| row_l1(delta, i)).collect())
}

/// `√E_i · ‖Δ_i‖₁`.
pub fn score_wanda(delta: &DenseMatrix, stats: &ActivationStats) -> Result<ChannelScore> {
    if stats.len() != delta.rows() {
        return Err(Error::dims("activation stats vs delta rows", delta.rows(), stats.len()));
    }
    Ok(ChannelScore(
        (0..delta.rows())
            .map(|i| stats.energy[i].sqrt() * row_l1(delta, i))
            .collect(),
    ))
}

/// A seeded permutation of `0..m`, as scores.
pub fn score_random(m: usize, seed: u64) -> ChannelScore {
    ChannelScore(Rng::new(seed).permutation(m).into_iter().map(|v| v as f32).collect())
}

fn row_l1(delta: &DenseMatrix, i: usize) -> f32 {
    delta.row(i).iter().map(|v| v.abs() as f64).sum::<f64>() as f32
}

/// The `k` largest scores; ties go to the lower index.
pub fn top_k(scores: &ChannelScore, k: usize) -> Result<SalientSet> {
    let m = scores.len();
    if k > m {
        return Err(Error::InvalidArgument(format!("salient k = {k} exceeds {m} channels")));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| scores.0[b].total_cmp(&scores.0[a]).then(a.cmp(&b)));
    SalientSet::new(order[..k].iter().map(|&i| i as u32).collect(), m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn mat(rows: &[Vec<f32>]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    /// Unfactorized double sum over samples and output channels.
    fn brute_force_scores(samples: &[Vec<f32>], d: &DenseMatrix, dh: &DenseMatrix) -> Vec<f64> {
        (0..d.rows())
            .map(|i| {
                samples
                    .iter()
                    .map(|x| {
                        (0..d.cols())
                            .map(|j| {
                                let e = x[i] as f64 * d.get(i, j) as f64 - x[i] as f64 * dh.get(i, j) as f64;
                                e * e
                            })
                            .sum::<f64>()
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn stats_examples() {
        let s = ActivationStats::from_samples([[1.0f32, 2.0].as_slice()]).unwrap();
        assert_eq!(s.energy, vec![1.0, 4.0]);
        let s = ActivationStats::from_samples([[1.0f32, 0.0].as_slice(), [0.0, 3.0].as_slice()]).unwrap();
        assert_eq!(s.energy, vec![1.0, 9.0]);
        assert_eq!(s.sample_count, 2);
        let z = ActivationStats::from_samples([[0.0f32, 0.0].as_slice()]).unwrap();
        assert!(z.all_zero());
        assert!(matches!(
            ActivationStats::from_samples(std::iter::empty::<&[f32]>()),
            Err(Error::EmptyCalibration)
        ));
    }

    #[test]
    fn reconstruction_examples() {
        let d = mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let s = score_reconstruction(&d, &d, &ActivationStats::uniform(2, 1.0)).unwrap();
        assert_eq!(s.0, vec![0.0, 0.0]);

        // Row errors 0.25 and 0.01.
        let d = mat(&[vec![0.5, 0.0], vec![0.1, 0.0]]);
        let dh = DenseMatrix::zeros(2, 2);
        let stats = ActivationStats { energy: vec![1.0, 4.0], sample_count: 1 };
        let s = score_reconstruction(&d, &dh, &stats).unwrap();
        assert!((s.0[0] - 0.25).abs() < 1e-7 && (s.0[1] - 0.04).abs() < 1e-7);

        let x = vec![vec![0.7f32, -1.3]];
        let d = mat(&[vec![0.3, -0.2], vec![1.1, 0.4]]);
        let dh = mat(&[vec![0.25, 0.0], vec![1.0, 0.5]]);
        let stats = ActivationStats::from_samples(x.iter().map(Vec::as_slice)).unwrap();
        let s = score_reconstruction(&d, &dh, &stats).unwrap();
        for (a, b) in s.0.iter().zip(brute_force_scores(&x, &d, &dh)) {
            assert!((*a as f64 - b).abs() <= 1e-6 * b.max(1e-12));
        }
    }

    #[test]
    fn shape_errors() {
        let d = DenseMatrix::zeros(2, 2);
        assert!(score_reconstruction(&d, &DenseMatrix::zeros(3, 2), &ActivationStats::uniform(2, 1.0)).is_err());
        assert!(score_reconstruction(&d, &d, &ActivationStats::uniform(3, 1.0)).is_err());
        assert!(score_wanda(&d, &ActivationStats::uniform(1, 1.0)).is_err());
    }

    #[test]
    fn magnitude_and_wanda_examples() {
        assert_eq!(score_magnitude(&mat(&[vec![1.0, -1.0], vec![3.0, 0.0]])).0, vec![2.0, 3.0]);
        assert_eq!(score_magnitude(&DenseMatrix::zeros(1, 3)).0, vec![0.0]);
        let w = score_wanda(&mat(&[vec![1.0, -2.0]]), &ActivationStats { energy: vec![4.0], sample_count: 1 }).unwrap();
        assert_eq!(w.0, vec![6.0]);
        let w0 = score_wanda(&mat(&[vec![1.0, -2.0]]), &ActivationStats { energy: vec![0.0], sample_count: 1 }).unwrap();
        assert_eq!(w0.0, vec![0.0]);
        let mut rng = Rng::new(4);
        let d = DenseMatrix::gaussian(6, 5, 1.0, &mut rng);
        assert_eq!(score_wanda(&d, &ActivationStats::uniform(6, 1.0)).unwrap(), score_magnitude(&d));
    }

    #[test]
    fn random_scores() {
        assert_eq!(score_random(10, 3), score_random(10, 3));
        assert_ne!(score_random(10, 3), score_random(10, 4));
        assert_eq!(score_random(1, 9).0, vec![0.0]);
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&ChannelScore(vec![3.0, 3.0, 1.0]), 1).unwrap().indices(), &[0]);
        assert_eq!(top_k(&ChannelScore(vec![0.1, 5.0, 2.0, 4.0]), 2).unwrap().indices(), &[1, 3]);
        assert!(top_k(&ChannelScore(vec![1.0]), 0).unwrap().is_empty());
        assert!(top_k(&ChannelScore(vec![1.0]), 2).is_err());
    }

    #[test]
    fn misleading_magnitude_rows() {
        // Row 0 is huge but its channel never fires.
        let d = mat(&[vec![5.0, -5.0], vec![0.3, 0.2], vec![0.1, -0.4]]);
        let dh = DenseMatrix::zeros(3, 2);
        let stats = ActivationStats { energy: vec![0.0, 1.0, 1.0], sample_count: 3 };
        let rec = score_reconstruction(&d, &dh, &stats).unwrap();
        assert_eq!(rec.0[0], 0.0);
        assert_eq!(top_k(&score_magnitude(&d), 1).unwrap().indices(), &[0]);
        assert_ne!(top_k(&rec, 1).unwrap().indices(), &[0]);
    }

    #[test]
    fn metric_names_roundtrip() {
        for m in SalientMetric::ALL {
            assert_eq!(m.as_str().parse::<SalientMetric>().unwrap(), m);
        }
        assert!("l2".parse::<SalientMetric>().is_err());
    }
}
