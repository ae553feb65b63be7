use super::ToyLm;
use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, Rng};

/// Recipe for a synthetic fine-tuned expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSpec {
    pub domain: String,
    pub seed: u64,
    pub dense_sigma: f32,
    /// Rows per layer carrying a large update on live input channels.
    pub planted_rows: usize,
    pub planted_amplitude: f32,
    /// Large rows placed on dead input channels: big by magnitude, zero
    /// activation energy.
    pub misleading_rows: usize,
}

impl ExpertSpec {
    pub fn new(domain: impl Into<String>, seed: u64) -> Self {
        Self {
            domain: domain.into(),
            seed,
            dense_sigma: 0.01,
            planted_rows: 4,
            planted_amplitude: 0.5,
            misleading_rows: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticExpert {
    pub model: ToyLm,
    pub deltas: Vec<DenseMatrix>,
    /// Planted row indices per layer, ascending.
    pub planted: Vec<Vec<usize>>,
    /// Misleading row indices per layer, ascending.
    pub misleading: Vec<Vec<usize>>,
}

/// `W_FT = W + Δ` per hidden layer with `Δ = σ·N(0,1)` plus planted and
/// misleading rows. Dead output columns stay zero so dead channels remain
/// silent in the expert as well.
pub fn synthesize_expert(base: &ToyLm, spec: &ExpertSpec) -> Result<SyntheticExpert> {
    let cfg = base.config();
    let d = cfg.width;
    if spec.planted_rows + spec.misleading_rows > d {
        return Err(Error::InvalidArgument(format!(
            "planted ({}) + misleading ({}) rows exceed width {d}",
            spec.planted_rows, spec.misleading_rows
        )));
    }
    let live: Vec<usize> = cfg.live_channels().collect();
    let dead: Vec<usize> = cfg.dead_range().collect();
    if spec.planted_rows > live.len() {
        return Err(Error::InvalidArgument(format!("{} planted rows but only {} live channels", spec.planted_rows, live.len())));
    }
    if spec.misleading_rows > dead.len() {
        return Err(Error::InvalidArgument(format!(
            "{} misleading rows need as many dead channels, have {}",
            spec.misleading_rows,
            dead.len()
        )));
    }
    if !(spec.dense_sigma.is_finite() && spec.planted_amplitude.is_finite()) {
        return Err(Error::NonFinite("expert spec"));
    }
    let mut deltas = Vec::with_capacity(cfg.depth);
    let mut planted = Vec::with_capacity(cfg.depth);
    let mut misleading = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let mut rng = Rng::derive(spec.seed, l as u64 + 1);
        let mut delta = DenseMatrix::from_fn(d, d, |_, j| {
            let g = rng.gaussian();
            if cfg.is_dead(j) {
                0.0
            } else {
                spec.dense_sigma * g
            }
        });
        let mut p = rng.choose_distinct(&live, spec.planted_rows);
        let mut q = rng.choose_distinct(&dead, spec.misleading_rows);
        p.sort_unstable();
        q.sort_unstable();
        for &i in p.iter().chain(&q) {
            for j in cfg.live_channels() {
                let v = delta.get(i, j) + spec.planted_amplitude * rng.gaussian();
                delta.set(i, j, v);
            }
        }
        deltas.push(delta);
        planted.push(p);
        misleading.push(q);
    }
    let model = base.merged(&deltas)?;
    Ok(SyntheticExpert {
        model,
        deltas,
        planted,
        misleading,
    })
}

/// `count` sequences of `len` tokens drawn uniformly from the vocabulary.
pub fn calibration_set(vocab: usize, count: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = Rng::derive(seed, 0xca1b);
    (0..count).map(|_| (0..len).map(|_| rng.below(vocab) as u32).collect()).collect()
}
