use crate::compress::{compress_layer, distill_step_sizes, extract_delta, CompressionConfig, DistillReport, ExpertArtifact, QuantizedLayer};
use crate::error::{Error, Result};
use crate::salient::{collect_activation_stats, ActivationStats};
use crate::toylm::ToyLm;

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertCompression {
    pub artifact: ExpertArtifact,
    /// Present when `cfg.distill.epochs > 0`.
    pub distill: Option<DistillReport>,
    /// Per hidden layer, gathered from the fine-tuned model.
    pub stats: Vec<ActivationStats>,
}

/// Compresses every hidden layer of `finetuned` against `base`, then trains
/// the step sizes of all layers jointly on `calib`.
pub fn compress_expert(
    base: &ToyLm,
    finetuned: &ToyLm,
    calib: &[Vec<u32>],
    cfg: &CompressionConfig,
    model_id: &str,
    domain: &str,
) -> Result<ExpertCompression> {
    if base.config() != finetuned.config() {
        return Err(Error::InvalidArgument("base and fine-tuned models differ in shape".into()));
    }
    if base.embedding() != finetuned.embedding() || base.head() != finetuned.head() {
        return Err(Error::InvalidArgument("only hidden layers may differ from the base".into()));
    }
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let mut stats = Vec::with_capacity(base.depth());
    let mut layers = Vec::with_capacity(base.depth());
    for l in 0..base.depth() {
        let delta = extract_delta(finetuned.layer(l), base.layer(l))?;
        let s = collect_activation_stats(finetuned, l, calib)?;
        let c = compress_layer(&delta, &s, cfg)?;
        layers.push(QuantizedLayer::new(delta, &c)?);
        stats.push(s);
    }
    let distill = if cfg.distill.epochs > 0 {
        Some(distill_step_sizes(base, &mut layers, calib, &cfg.distill)?)
    } else {
        None
    };
    let compressed = layers.iter().map(QuantizedLayer::to_compressed).collect::<Result<Vec<_>>>()?;
    Ok(ExpertCompression {
        artifact: ExpertArtifact::new(model_id, domain, base.digest(), compressed),
        distill,
        stats,
    })
}
