use super::{activation_weighted_error, compress_with_salient, CompressedDelta};
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::quant::QuantConfig;
use crate::salient::{ActivationStats, SalientSet};

pub const DEFAULT_RESCALE_GRID: [f32; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Quantization of row-rescaled `Δ'_i = g_i · Δ_i`; reconstruction divides
/// the dequantized rows by `g_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RescaledDelta {
    pub compressed: CompressedDelta,
    pub row_scale: Vec<f32>,
    pub alpha: f32,
    /// Activation-weighted reconstruction error at the chosen `alpha`.
    pub error: f64,
}

impl RescaledDelta {
    pub fn reconstruct(&self) -> Result<DenseMatrix> {
        let mut r = self.compressed.reconstruct()?;
        for (i, &g) in self.row_scale.iter().enumerate() {
            for v in r.row_mut(i) {
                *v /= g;
            }
        }
        Ok(r)
    }
}

/// `g_i = (√E_i)^α`, normalized to mean 1 over active channels; silent
/// channels get `g_i = 1`.
pub fn row_scales(stats: &ActivationStats, alpha: f32) -> Vec<f32> {
    let raw: Vec<Option<f64>> = stats
        .energy
        .iter()
        .map(|&e| (e > 0.0).then(|| (e as f64).sqrt().powf(alpha as f64)))
        .collect();
    let active: Vec<f64> = raw.iter().flatten().copied().collect();
    let mean = if active.is_empty() {
        1.0
    } else {
        active.iter().sum::<f64>() / active.len() as f64
    };
    raw.into_iter().map(|g| g.map_or(1.0, |g| (g / mean) as f32)).collect()
}

/// Grid search over `alpha`; ties keep the earliest grid entry.
pub fn rescale_quantize(delta: &DenseMatrix, stats: &ActivationStats, bits: u8, grid: &[f32]) -> Result<RescaledDelta> {
    if stats.len() != delta.rows() {
        return Err(Error::dims("activation stats vs delta rows", delta.rows(), stats.len()));
    }
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty rescale grid".into()));
    }
    let qcfg = QuantConfig::new(bits)?;
    let mut best: Option<RescaledDelta> = None;
    for &alpha in grid {
        let g = row_scales(stats, alpha);
        let mut scaled = delta.clone();
        for (i, &gi) in g.iter().enumerate() {
            for v in scaled.row_mut(i) {
                *v *= gi;
            }
        }
        let compressed = compress_with_salient(&scaled, SalientSet::empty(), qcfg)?;
        let mut candidate = RescaledDelta {
            compressed,
            row_scale: g,
            alpha,
            error: 0.0,
        };
        candidate.error = activation_weighted_error(delta, &candidate.reconstruct()?, stats)?;
        if best.as_ref().is_none_or(|b| candidate.error < b.error) {
            best = Some(candidate);
        }
    }
    Ok(best.expect("grid is non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn never_worse_than_plain() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let d = DenseMatrix::gaussian(16, 8, 0.2, &mut rng);
            let stats = ActivationStats {
                energy: (0..16).map(|_| rng.uniform() * 4.0).collect(),
                sample_count: 1,
            };
            let plain = compress_with_salient(&d, SalientSet::empty(), QuantConfig::new(2).unwrap()).unwrap();
            let plain_err = activation_weighted_error(&d, &plain.reconstruct().unwrap(), &stats).unwrap();
            let r = rescale_quantize(&d, &stats, 2, &DEFAULT_RESCALE_GRID).unwrap();
            assert!(r.error <= plain_err);
        }
    }

    #[test]
    fn uniform_energy_is_identity() {
        let mut rng = Rng::new(6);
        let d = DenseMatrix::gaussian(8, 4, 0.2, &mut rng);
        let r = rescale_quantize(&d, &ActivationStats::uniform(8, 3.0), 2, &DEFAULT_RESCALE_GRID).unwrap();
        assert!(r.row_scale.iter().all(|&g| (g - 1.0).abs() < 1e-6));
        let plain = compress_with_salient(&d, SalientSet::empty(), QuantConfig::new(2).unwrap()).unwrap();
        assert_eq!(r.reconstruct().unwrap(), plain.reconstruct().unwrap());
    }

    #[test]
    fn silent_channels_keep_unit_scale() {
        let stats = ActivationStats { energy: vec![0.0, 4.0, 16.0], sample_count: 1 };
        let g = row_scales(&stats, 1.0);
        assert_eq!(g[0], 1.0);
        assert!((g[1] - 2.0 / 3.0).abs() < 1e-6 && (g[2] - 4.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn planted_high_energy_row_prefers_rescaling() {
        // One hot channel whose row sits well inside the column range set by
        // a silent-ish outlier row: scaling it up buys it finer codes.
        let mut d = DenseMatrix::zeros(4, 3);
        d.row_mut(0).copy_from_slice(&[0.3, -0.28, 0.26]);
        d.row_mut(1).copy_from_slice(&[1.0, -1.0, 1.0]);
        d.row_mut(2).copy_from_slice(&[0.05, 0.02, -0.04]);
        d.row_mut(3).copy_from_slice(&[-0.03, 0.06, 0.01]);
        let stats = ActivationStats { energy: vec![100.0, 0.01, 1.0, 1.0], sample_count: 1 };
        let r = rescale_quantize(&d, &stats, 2, &DEFAULT_RESCALE_GRID).unwrap();
        // Exhaustive grid oracle.
        let errs: Vec<f64> = DEFAULT_RESCALE_GRID
            .iter()
            .map(|&a| rescale_quantize(&d, &stats, 2, &[a]).unwrap().error)
            .collect();
        let (best_idx, _) = errs
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &e)| if e < acc.1 { (i, e) } else { acc });
        assert_eq!(r.alpha, DEFAULT_RESCALE_GRID[best_idx]);
        assert!(r.alpha > 0.0, "errors {errs:?}");
    }
}
