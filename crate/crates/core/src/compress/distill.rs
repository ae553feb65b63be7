use crate::compress::{compress_with_steps, CompressedDelta};
use crate::error::{Error, Result};
use crate::numerics::{half_bits_to_f32, DenseMatrix};
use crate::quant::{dequantize, quantize_codes, ste_local, QuantConfig, StepSizes};
use crate::salient::SalientSet;
use crate::toylm::ToyLm;

/// Lower clamp applied to every step after an update.
pub const STEP_FLOOR: f32 = 1e-8;

/// Abort once a batch loss exceeds this multiple of the initial loss.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 1e-5,
            batch: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillReport {
    /// Mean-squared logit error over the whole calibration set before training.
    pub initial_loss: f64,
    /// Same measure after the last update.
    pub final_loss: f64,
    /// Loss of every mini-batch, in update order (measured before its update).
    pub history: Vec<f64>,
}

impl DistillReport {
    pub fn reduction(&self) -> f64 {
        if self.initial_loss == 0.0 {
            0.0
        } else {
            1.0 - self.final_loss / self.initial_loss
        }
    }
}

/// A layer under step-size training. The delta itself is frozen; codes are
/// re-derived from `Δ / s` on every evaluation so that the straight-through
/// rule sees the current rounding residuals. Salient rows stay fixed at their
/// half-precision values and take no part in the step gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    delta: DenseMatrix,
    salient: SalientSet,
    salient_rows: Vec<f32>,
    cfg: QuantConfig,
    steps: StepSizes,
}

impl QuantizedLayer {
    pub fn new(delta: DenseMatrix, compressed: &CompressedDelta) -> Result<Self> {
        if delta.shape() != compressed.shape() {
            return Err(Error::dims("delta rows vs compressed layer", compressed.rows(), delta.rows()));
        }
        Ok(Self {
            salient_rows: compressed.salient_rows_bits().iter().map(|&b| half_bits_to_f32(b)).collect(),
            salient: compressed.salient().clone(),
            cfg: compressed.config(),
            steps: compressed.steps().clone(),
            delta,
        })
    }

    pub fn delta(&self) -> &DenseMatrix {
        &self.delta
    }

    pub fn steps(&self) -> &StepSizes {
        &self.steps
    }

    pub fn set_steps(&mut self, steps: StepSizes) -> Result<()> {
        if steps.len() != self.delta.cols() {
            return Err(Error::dims("step sizes vs output channels", self.delta.cols(), steps.len()));
        }
        self.steps = steps;
        Ok(())
    }

    /// `Δ̃(s)`: salient rows from half precision, the rest `Q(Δ/s)·s`.
    pub fn reconstruct(&self) -> Result<DenseMatrix> {
        let mut out = dequantize(&quantize_codes(&self.delta, &self.steps, self.cfg)?, &self.steps, self.cfg)?;
        let n = self.delta.cols();
        for (slot, &i) in self.salient.indices().iter().enumerate() {
            out.row_mut(i as usize).copy_from_slice(&self.salient_rows[slot * n..(slot + 1) * n]);
        }
        Ok(out)
    }

    /// Chains `∂L/∂Δ̃` to `∂L/∂s` with the straight-through rule.
    pub fn step_gradient(&self, upstream: &DenseMatrix) -> Result<Vec<f64>> {
        if upstream.shape() != self.delta.shape() {
            return Err(Error::dims("upstream rows", self.delta.rows(), upstream.rows()));
        }
        let steps = self.steps.as_slice();
        let mut grad = vec![0.0f64; self.delta.cols()];
        for i in 0..self.delta.rows() {
            if self.salient.contains(i) {
                continue;
            }
            for (j, (&x, &g)) in self.delta.row(i).iter().zip(upstream.row(i)).enumerate() {
                grad[j] += g as f64 * ste_local(x, steps[j], self.cfg) as f64;
            }
        }
        Ok(grad)
    }

    /// Freezes the current steps into a compressed layer.
    pub fn to_compressed(&self) -> Result<CompressedDelta> {
        compress_with_steps(&self.delta, self.salient.clone(), self.cfg, self.steps.clone())
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(layers: &[QuantizedLayer]) -> Self {
        let zeros = || layers.iter().map(|l| vec![0.0; l.steps.len()]).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    fn update(&mut self, layers: &mut [QuantizedLayer], grads: &[Vec<f64>], cfg: &DistillConfig) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (l, layer) in layers.iter_mut().enumerate() {
            let mut steps = layer.steps.clone();
            for (j, &g) in grads[l].iter().enumerate() {
                let m = &mut self.m[l][j];
                let v = &mut self.v[l][j];
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let s = steps.as_slice()[j] as f64;
                let upd = (*m / c1) / ((*v / c2).sqrt() + cfg.eps) + cfg.weight_decay * s;
                if upd != 0.0 {
                    steps.set_clamped(j, (s - cfg.lr * upd) as f32, STEP_FLOOR);
                }
            }
            layer.set_steps(steps)?;
        }
        Ok(())
    }
}

/// Teacher logits: the base with every exact delta merged in.
pub fn teacher_logits(base: &ToyLm, layers: &[QuantizedLayer], calib: &[Vec<u32>]) -> Result<Vec<DenseMatrix>> {
    let deltas: Vec<DenseMatrix> = layers.iter().map(|l| l.delta.clone()).collect();
    let teacher = base.merged(&deltas)?;
    calib.iter().map(|seq| teacher.forward(seq)).collect()
}

/// Mean-squared logit error of the quantized student over `calib`.
pub fn calibration_loss(base: &ToyLm, layers: &[QuantizedLayer], calib: &[Vec<u32>], targets: &[DenseMatrix]) -> Result<f64> {
    let student = student(base, layers)?;
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (seq, target) in calib.iter().zip(targets) {
        let logits = student.forward(seq)?;
        sum += squared_error(&logits, target)?;
        count += target.as_slice().len();
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

pub(crate) fn student(base: &ToyLm, layers: &[QuantizedLayer]) -> Result<ToyLm> {
    if layers.len() != base.depth() {
        return Err(Error::dims("quantized layers vs hidden layers", base.depth(), layers.len()));
    }
    let merged = base
        .layers()
        .iter()
        .zip(layers)
        .map(|(w, l)| w.add(&l.reconstruct()?))
        .collect::<Result<Vec<_>>>()?;
    base.with_layers(merged)
}

pub(crate) fn squared_error(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dims("target logit rows", a.rows(), b.rows()));
    }
    Ok(a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum())
}

/// Learns the step sizes of every layer by matching the uncompressed expert's
/// logits on `calib`, one AdamW update per mini-batch of `cfg.batch` sequences.
pub fn distill_step_sizes(base: &ToyLm, layers: &mut [QuantizedLayer], calib: &[Vec<u32>], cfg: &DistillConfig) -> Result<DistillReport> {
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if cfg.batch == 0 || !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::InvalidArgument("distillation needs batch > 0 and a finite non-negative lr".into()));
    }
    if layers.len() != base.depth() {
        return Err(Error::dims("quantized layers vs hidden layers", base.depth(), layers.len()));
    }
    let targets = teacher_logits(base, layers, calib)?;
    let initial_loss = calibration_loss(base, layers, calib, &targets)?;
    let mut adam = Adam::new(layers);
    let mut history = Vec::new();
    for _ in 0..cfg.epochs {
        for (seqs, tgts) in calib.chunks(cfg.batch).zip(targets.chunks(cfg.batch)) {
            let step = base.backward_step_sizes(layers, seqs, tgts)?;
            if !step.loss.is_finite() || step.loss > DIVERGENCE_FACTOR * initial_loss.max(f64::MIN_POSITIVE) {
                return Err(Error::Diverged {
                    step: history.len(),
                    loss: step.loss,
                    initial: initial_loss,
                });
            }
            history.push(step.loss);
            adam.update(layers, &step.grads, cfg)?;
        }
    }
    let final_loss = calibration_loss(base, layers, calib, &targets)?;
    Ok(DistillReport {
        initial_loss,
        final_loss,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::compress_with_salient;
    use crate::numerics::Rng;
    use crate::quant::StepSizes;
    use crate::toylm::{ToyConfig, ToyLm};

    fn setup(seed: u64, sigma: f32) -> (ToyLm, Vec<QuantizedLayer>, Vec<Vec<u32>>) {
        setup_bits(seed, sigma, 2)
    }

    fn setup_bits(seed: u64, sigma: f32, bits: u8) -> (ToyLm, Vec<QuantizedLayer>, Vec<Vec<u32>>) {
        let cfg = ToyConfig {
            vocab: 32,
            width: 8,
            depth: 2,
            dead_channels: 0,
        };
        let base = ToyLm::base(cfg, seed).unwrap();
        let mut rng = Rng::new(seed + 100);
        let qcfg = QuantConfig::new(bits).unwrap();
        let layers = (0..2)
            .map(|_| {
                let d = DenseMatrix::gaussian(8, 8, sigma, &mut rng);
                let c = compress_with_salient(&d, SalientSet::new(vec![1], 8).unwrap(), qcfg).unwrap();
                QuantizedLayer::new(d, &c).unwrap()
            })
            .collect();
        let calib = (0..8).map(|_| (0..6).map(|_| rng.below(32) as u32).collect()).collect();
        (base, layers, calib)
    }

    #[test]
    fn defaults() {
        let d = DistillConfig::default();
        assert_eq!((d.epochs, d.lr, d.batch), (1, 1e-5, 4));
        assert_eq!((d.beta1, d.beta2, d.weight_decay), (0.9, 0.999, 0.0));
    }

    #[test]
    fn zero_delta_is_a_no_op() {
        let (base, mut layers, calib) = setup(1, 0.0);
        let before: Vec<_> = layers.iter().map(|l| l.steps().clone()).collect();
        let r = distill_step_sizes(&base, &mut layers, &calib, &DistillConfig::default()).unwrap();
        assert_eq!(r.initial_loss, 0.0);
        assert_eq!(r.final_loss, 0.0);
        assert!(r.history.iter().all(|&l| l == 0.0));
        let after: Vec<_> = layers.iter().map(|l| l.steps().clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn reconstruct_matches_compressed() {
        let (_, layers, _) = setup(2, 0.05);
        for l in &layers {
            assert_eq!(l.reconstruct().unwrap(), l.to_compressed().unwrap().reconstruct().unwrap());
        }
    }

    #[test]
    fn salient_rows_get_no_gradient_contribution() {
        let (_, layers, _) = setup(3, 0.05);
        let l = &layers[0];
        let mut up = DenseMatrix::zeros(8, 8);
        up.row_mut(1).fill(1.0);
        assert!(l.step_gradient(&up).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn larger_lr_reduces_loss() {
        let (base, mut layers, calib) = setup(4, 0.05);
        let cfg = DistillConfig {
            lr: 1e-3,
            epochs: 20,
            batch: 2,
            ..DistillConfig::default()
        };
        let r = distill_step_sizes(&base, &mut layers, &calib, &cfg).unwrap();
        assert!(r.final_loss < r.initial_loss, "{r:?}");
        assert!(layers.iter().all(|l| l.steps().as_slice().iter().all(|&s| s >= STEP_FLOOR)));
    }

    #[test]
    fn divergence_aborts() {
        // Binary scales are unbounded above, so a huge lr blows the loss up.
        let (base, mut layers, calib) = setup_bits(5, 0.05, 1);
        let cfg = DistillConfig {
            lr: 5.0,
            epochs: 50,
            batch: 1,
            ..DistillConfig::default()
        };
        assert!(matches!(
            distill_step_sizes(&base, &mut layers, &calib, &cfg),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn rejects_empty_calibration_and_misalignment() {
        let (base, mut layers, _) = setup(6, 0.05);
        assert!(matches!(
            distill_step_sizes(&base, &mut layers, &[], &DistillConfig::default()),
            Err(Error::EmptyCalibration)
        ));
        let mut one = vec![layers[0].clone()];
        assert!(distill_step_sizes(&base, &mut one, &[vec![1]], &DistillConfig::default()).is_err());
    }

    /// Single linear layer, one output column: `L(s) = ‖X·(Δ̃(s) − Δ)‖²`.
    fn column_loss(x: &DenseMatrix, layer: &QuantizedLayer) -> (f64, DenseMatrix) {
        let err = layer.reconstruct().unwrap().sub(layer.delta()).unwrap();
        let r = x.matmul(&err).unwrap();
        let loss = r.as_slice().iter().map(|v| (*v as f64).powi(2)).sum();
        let grad = x.transpose().matmul(&r).unwrap();
        let grad = DenseMatrix::from_fn(grad.rows(), 1, |i, _| 2.0 * grad.get(i, 0));
        (loss, grad)
    }

    #[test]
    fn recovers_one_dimensional_optimum() {
        let mut rng = Rng::new(21);
        let m = 32;
        let delta = DenseMatrix::gaussian(m, 1, 1.0, &mut rng);
        let x = DenseMatrix::gaussian(64, m, 1.0, &mut rng);
        let qcfg = QuantConfig::new(2).unwrap();
        let c = compress_with_salient(&delta, SalientSet::empty(), qcfg).unwrap();
        let mut layer = QuantizedLayer::new(delta, &c).unwrap();
        let s0 = layer.steps().as_slice()[0] as f64;

        // Oracle: dense scan then golden-section refinement of the true loss.
        let eval = |s: f64| {
            let mut l = layer.clone();
            l.set_steps(StepSizes::new(vec![s as f32]).unwrap()).unwrap();
            column_loss(&x, &l).0
        };
        let grid: Vec<f64> = (1..=2000).map(|i| s0 * i as f64 / 1000.0).collect();
        let best = grid.iter().copied().min_by(|a, b| eval(*a).total_cmp(&eval(*b))).unwrap();
        let (mut lo, mut hi) = (best - s0 / 1000.0, best + s0 / 1000.0);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..60 {
            let (a, b) = (hi - phi * (hi - lo), lo + phi * (hi - lo));
            if eval(a) < eval(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        let s_star = (lo + hi) / 2.0;

        let cfg = DistillConfig {
            lr: 0.005 * s0,
            ..DistillConfig::default()
        };
        let mut adam = Adam::new(std::slice::from_ref(&layer));
        for _ in 0..200 {
            let (_, g) = column_loss(&x, &layer);
            let grads = vec![layer.step_gradient(&g).unwrap()];
            adam.update(std::slice::from_mut(&mut layer), &grads, &cfg).unwrap();
        }
        let learned = layer.steps().as_slice()[0] as f64;
        assert!((learned - s_star).abs() <= 0.05 * s_star, "learned {learned}, optimum {s_star}, init {s0}");
    }
}
