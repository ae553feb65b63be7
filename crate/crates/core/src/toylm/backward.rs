use super::ToyLm;
use crate::compress::QuantizedLayer;
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// Loss and per-layer step gradients for one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGradients {
    /// Mean squared logit error over every (sequence, position, vocab) entry.
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

impl ToyLm {
    /// Reverse-mode gradients of the mean-squared logit error with respect to
    /// every layer's step sizes. The student runs `W_l + Δ̃_l(s_l)`; ReLU and
    /// linear adjoints are exact and each quantizer site uses the
    /// straight-through rule of [`QuantizedLayer::step_gradient`].
    pub fn backward_step_sizes(&self, layers: &[QuantizedLayer], batch: &[Vec<u32>], targets: &[DenseMatrix]) -> Result<StepGradients> {
        if layers.len() != self.depth() {
            return Err(Error::dims("quantized layers vs hidden layers", self.depth(), layers.len()));
        }
        if batch.len() != targets.len() {
            return Err(Error::dims("target sequences", batch.len(), targets.len()));
        }
        let student = crate::compress::distill::student(self, layers)?;
        let weights_t: Vec<DenseMatrix> = student.layers().iter().map(|w| w.transpose()).collect();
        let head_t = student.head().transpose();
        let total: usize = targets.iter().map(|t| t.as_slice().len()).sum();
        let norm = if total == 0 { 0.0 } else { 1.0 / total as f64 };

        let d = self.width();
        let mut weight_grads = vec![DenseMatrix::zeros(d, d); self.depth()];
        let mut loss = 0.0f64;
        for (seq, target) in batch.iter().zip(targets) {
            let trace = student.trace(seq, None)?;
            if trace.logits.shape() != target.shape() {
                return Err(Error::dims("target logit rows", trace.logits.rows(), target.rows()));
            }
            loss += crate::compress::distill::squared_error(&trace.logits, target)?;
            let mut g_logits = trace.logits.clone();
            for (g, &y) in g_logits.as_mut_slice().iter_mut().zip(target.as_slice()) {
                *g = (2.0 * (*g - y) as f64 * norm) as f32;
            }
            let mut g_h = g_logits.matmul(&head_t)?;
            for l in (0..self.depth()).rev() {
                let out = &trace.inputs[l + 1];
                for (g, &o) in g_h.as_mut_slice().iter_mut().zip(out.as_slice()) {
                    if o <= 0.0 {
                        *g = 0.0;
                    }
                }
                let gw = trace.inputs[l].transpose().matmul(&g_h)?;
                for (acc, v) in weight_grads[l].as_mut_slice().iter_mut().zip(gw.as_slice()) {
                    *acc += v;
                }
                if l > 0 {
                    g_h = g_h.matmul(&weights_t[l])?;
                }
            }
        }
        let grads = layers
            .iter()
            .zip(&weight_grads)
            .map(|(layer, gw)| layer.step_gradient(gw))
            .collect::<Result<Vec<_>>>()?;
        Ok(StepGradients { loss: loss * norm, grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::{compress_with_salient, teacher_logits};
    use crate::numerics::Rng;
    use crate::quant::{ste_local, QuantConfig, StepSizes};
    use crate::salient::SalientSet;
    use crate::toylm::ToyConfig;

    fn setup(seed: u64, bits: u8, salient: Vec<u32>) -> (ToyLm, Vec<QuantizedLayer>, Vec<Vec<u32>>) {
        let cfg = ToyConfig {
            vocab: 16,
            width: 6,
            depth: 2,
            dead_channels: 0,
        };
        let base = ToyLm::base(cfg, seed).unwrap();
        let mut rng = Rng::new(seed ^ 0x55);
        let qcfg = QuantConfig::new(bits).unwrap();
        let layers = (0..2)
            .map(|_| {
                let d = DenseMatrix::gaussian(6, 6, 0.2, &mut rng);
                let c = compress_with_salient(&d, SalientSet::new(salient.clone(), 6).unwrap(), qcfg).unwrap();
                QuantizedLayer::new(d, &c).unwrap()
            })
            .collect();
        let batch = (0..3).map(|_| (0..4).map(|_| rng.below(16) as u32).collect()).collect();
        (base, layers, batch)
    }

    /// Loss with every quantizer replaced by its straight-through surrogate
    /// `x + (round(u₀) − u₀)·s` frozen at the current steps. Its derivative is
    /// what the estimator reports; at `s₀` it equals the true loss.
    fn surrogate_loss(base: &ToyLm, layers: &[QuantizedLayer], steps: &[Vec<f64>], batch: &[Vec<u32>], targets: &[DenseMatrix]) -> f64 {
        let merged: Vec<DenseMatrix> = base
            .layers()
            .iter()
            .zip(layers)
            .zip(steps)
            .map(|((w, layer), s)| {
                let s0 = layer.steps().as_slice();
                let recon = layer.reconstruct().unwrap();
                let delta = layer.delta();
                DenseMatrix::from_fn(w.rows(), w.cols(), |i, j| {
                    let slope = if layer_is_salient(layer, i) {
                        0.0
                    } else {
                        ste_local(delta.get(i, j), s0[j], layer_cfg(layer)) as f64
                    };
                    w.get(i, j) + (recon.get(i, j) as f64 + (s[j] - s0[j] as f64) * slope) as f32
                })
            })
            .collect();
        let m = base.with_layers(merged).unwrap();
        let mut sum = 0.0;
        let mut count = 0;
        for (seq, t) in batch.iter().zip(targets) {
            let y = m.forward(seq).unwrap();
            sum += crate::compress::distill::squared_error(&y, t).unwrap();
            count += t.as_slice().len();
        }
        sum / count as f64
    }

    fn layer_is_salient(layer: &QuantizedLayer, i: usize) -> bool {
        layer.to_compressed().unwrap().salient().contains(i)
    }

    fn layer_cfg(layer: &QuantizedLayer) -> QuantConfig {
        layer.to_compressed().unwrap().config()
    }

    #[test]
    fn zero_loss_gives_zero_grads() {
        let (base, layers, batch) = setup(1, 2, vec![]);
        let student = crate::compress::distill::student(&base, &layers).unwrap();
        let targets: Vec<_> = batch.iter().map(|s| student.forward(s).unwrap()).collect();
        let g = base.backward_step_sizes(&layers, &batch, &targets).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.grads.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_finite_differences_of_surrogate() {
        for (seed, bits) in [(2u64, 2u8), (3, 4), (4, 1), (5, 3)] {
            let (base, layers, batch) = setup(seed, bits, vec![0]);
            let targets = teacher_logits(&base, &layers, &batch).unwrap();
            let g = base.backward_step_sizes(&layers, &batch, &targets).unwrap();
            let s0: Vec<Vec<f64>> = layers.iter().map(|l| l.steps().as_slice().iter().map(|&v| v as f64).collect()).collect();
            // Components are compared against the largest gradient of the batch.
            let scale = g.grads.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            for l in 0..layers.len() {
                for j in 0..s0[l].len() {
                    let h = 1e-2 * s0[l][j];
                    let mut plus = s0.clone();
                    plus[l][j] += h;
                    let mut minus = s0.clone();
                    minus[l][j] -= h;
                    let fd = (surrogate_loss(&base, &layers, &plus, &batch, &targets) - surrogate_loss(&base, &layers, &minus, &batch, &targets)) / (2.0 * h);
                    let an = g.grads[l][j];
                    let tol = 1e-3 * an.abs().max(fd.abs()).max(scale);
                    assert!((an - fd).abs() <= tol, "bits {bits} layer {l} col {j}: {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn rejects_misaligned_inputs() {
        let (base, layers, batch) = setup(6, 2, vec![]);
        assert!(base.backward_step_sizes(&layers[..1], &batch, &[]).is_err());
        assert!(base.backward_step_sizes(&layers, &batch, &[]).is_err());
        let mut wrong = layers.clone();
        wrong[0].set_steps(StepSizes::new(vec![1.0; 6]).unwrap()).unwrap();
        let bad_target = vec![DenseMatrix::zeros(1, 16); batch.len()];
        assert!(base.backward_step_sizes(&wrong, &batch, &bad_target).is_err());
    }
}
