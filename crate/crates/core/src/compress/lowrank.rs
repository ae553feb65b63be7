use crate::error::{Error, Result};
use crate::numerics::{svd, DenseMatrix};

/// Truncated-SVD factorization `Δ̃ = A · B`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankDelta {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
}

impl LowRankDelta {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.a.rows(), self.b.cols())
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        self.a.matmul(&self.b).expect("factor shapes agree")
    }

    /// Storage of both factors in half precision.
    pub fn fp16_bytes(&self) -> usize {
        2 * (self.a.rows() * self.rank() + self.rank() * self.b.cols())
    }

    /// Largest rank whose half-precision factors fit in `budget` bytes.
    pub fn rank_for_budget(m: usize, n: usize, budget: usize) -> usize {
        (budget / (2 * (m + n))).min(m.min(n))
    }
}

/// Keeps the top `r` singular triples: `A = U_r·diag(√S_r)`, `B = diag(√S_r)·V_r`.
pub fn lora_truncate(delta: &DenseMatrix, r: usize) -> Result<LowRankDelta> {
    let (m, n) = delta.shape();
    if r == 0 || r > m.min(n) {
        return Err(Error::InvalidArgument(format!("rank {r} outside 1..={}", m.min(n))));
    }
    let s = svd(delta)?;
    let roots: Vec<f64> = s.singular_values[..r].iter().map(|v| v.sqrt()).collect();
    let a = DenseMatrix::from_fn(m, r, |i, t| (s.u.get(i, t) as f64 * roots[t]) as f32);
    let b = DenseMatrix::from_fn(r, n, |t, j| (roots[t] * s.v.get(t, j) as f64) as f32);
    Ok(LowRankDelta { a, b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn rank_one_is_exact() {
        let mut rng = Rng::new(1);
        let u: Vec<f32> = (0..6).map(|_| rng.gaussian()).collect();
        let v: Vec<f32> = (0..4).map(|_| rng.gaussian()).collect();
        let d = DenseMatrix::from_fn(6, 4, |i, j| u[i] * v[j]);
        let lr = lora_truncate(&d, 1).unwrap();
        let err = d.sub(&lr.reconstruct()).unwrap().frobenius_norm();
        assert!(err <= 1e-5 * d.frobenius_norm());
    }

    #[test]
    fn full_rank_is_exact() {
        let mut rng = Rng::new(2);
        let d = DenseMatrix::gaussian(5, 3, 1.0, &mut rng);
        let lr = lora_truncate(&d, 3).unwrap();
        assert!(d.sub(&lr.reconstruct()).unwrap().frobenius_norm() <= 1e-5 * d.frobenius_norm());
    }

    #[test]
    fn truncation_hits_eckart_young() {
        let mut rng = Rng::new(3);
        let d = DenseMatrix::gaussian(6, 4, 1.0, &mut rng);
        let lr = lora_truncate(&d, 2).unwrap();
        let err = d.sub(&lr.reconstruct()).unwrap().frobenius_norm();
        // Tail energy from an independent decomposition.
        let reference = nalgebra::DMatrix::from_fn(6, 4, |i, j| d.get(i, j) as f64).svd(false, false);
        let mut sv: Vec<f64> = reference.singular_values.iter().cloned().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let tail = sv[2..].iter().map(|s| s * s).sum::<f64>().sqrt();
        assert!((err - tail).abs() <= 1e-5 * d.frobenius_norm(), "{err} vs {tail}");
    }

    #[test]
    fn invalid_ranks() {
        let d = DenseMatrix::zeros(3, 2);
        assert!(lora_truncate(&d, 0).is_err());
        assert!(lora_truncate(&d, 3).is_err());
    }

    #[test]
    fn budget_rank() {
        assert_eq!(LowRankDelta::rank_for_budget(64, 64, 2336), 9);
        assert_eq!(LowRankDelta::rank_for_budget(4, 4, 1 << 20), 4);
    }
}
