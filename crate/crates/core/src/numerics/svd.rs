use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// Off-diagonal threshold relative to the column norms.
pub const SVD_TOLERANCE: f64 = 1e-10;
pub const SVD_MAX_SWEEPS: usize = 60;

/// Thin SVD `A = U · diag(S) · V` with `U: m×r`, `V: r×n`, `r = min(m, n)`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DenseMatrix,
    /// Non-negative, non-increasing.
    pub singular_values: Vec<f64>,
    pub v: DenseMatrix,
    pub sweeps: usize,
}

impl Svd {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `U_r · diag(S_r) · V_r` for the leading `r` triples, in FP64.
    pub fn reconstruct(&self, r: usize) -> DenseMatrix {
        let (m, n) = (self.u.rows(), self.v.cols());
        let r = r.min(self.rank());
        DenseMatrix::from_fn(m, n, |i, j| {
            (0..r)
                .map(|t| self.u.get(i, t) as f64 * self.singular_values[t] * self.v.get(t, j) as f64)
                .sum::<f64>() as f32
        })
    }
}

/// One-sided (Hestenes) Jacobi SVD, computed in FP64.
pub fn svd(a: &DenseMatrix) -> Result<Svd> {
    if a.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("svd input"));
    }
    let (m, n) = a.shape();
    if m >= n {
        let cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j).map(f64::from).collect()).collect();
        let (u, s, v, sweeps) = hestenes(cols, m);
        Ok(Svd {
            u: columns_to_matrix(&u, m),
            singular_values: s,
            v: rows_to_matrix(&v, n),
            sweeps,
        })
    } else {
        // A^T = U' S V'^T, so A = V' S U'^T.
        let cols: Vec<Vec<f64>> = (0..m).map(|i| a.row(i).iter().map(|&v| v as f64).collect()).collect();
        let (u_t, s, v_t, sweeps) = hestenes(cols, n);
        Ok(Svd {
            u: DenseMatrix::from_fn(m, m, |i, t| v_t[t][i] as f32),
            singular_values: s,
            v: DenseMatrix::from_fn(m, n, |t, j| u_t[t][j] as f32),
            sweeps,
        })
    }
}

/// Orthogonalizes `cols` (each of length `len`, count `r ≤ len`).
/// Returns left singular vectors (as columns), singular values, and right
/// singular vectors as rows of `V^T` (each of length `r`), sorted descending.
type Columns = Vec<Vec<f64>>;

fn hestenes(mut cols: Columns, len: usize) -> (Columns, Vec<f64>, Columns, usize) {
    let r = cols.len();
    let mut v: Vec<Vec<f64>> = (0..r)
        .map(|j| (0..r).map(|t| if t == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut sweeps = 0;
    while sweeps < SVD_MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        for p in 0..r {
            for q in p + 1..r {
                let (alpha, beta, gamma) = dots(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= SVD_TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..r).collect();
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let scale = norms.iter().cloned().fold(0.0, f64::max);
    let floor = scale * f64::EPSILON * len as f64;
    let mut u: Vec<Vec<f64>> = Vec::with_capacity(r);
    let mut s = Vec::with_capacity(r);
    let mut vt = Vec::with_capacity(r);
    for &j in &order {
        let sigma = norms[j];
        if sigma > floor && sigma > 0.0 {
            u.push(cols[j].iter().map(|x| x / sigma).collect());
            s.push(sigma);
        } else {
            // Null direction: completed below so U keeps orthonormal columns.
            u.push(Vec::new());
            s.push(0.0);
        }
        vt.push(v[j].clone());
    }
    complete_basis(&mut u, len);
    (u, s, vt, sweeps)
}

fn dots(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    a.iter().zip(b).fold((0.0, 0.0, 0.0), |(aa, bb, ab), (&x, &y)| {
        (aa + x * x, bb + y * y, ab + x * y)
    })
}

/// Rotates vectors `p` and `q` in place; `vecs[k]` is indexed `[vector][component]`.
fn rotate(vecs: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = vecs.split_at_mut(q);
    let (vp, vq) = (&mut left[p], &mut right[0]);
    for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills empty slots with unit vectors orthogonal to every filled slot,
/// via Gram–Schmidt against the standard basis.
fn complete_basis(u: &mut [Vec<f64>], len: usize) {
    let mut candidate = 0;
    for slot in 0..u.len() {
        if !u[slot].is_empty() {
            continue;
        }
        loop {
            assert!(candidate < len, "cannot complete orthonormal basis");
            let mut e = vec![0.0; len];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for other in u.iter().filter(|o| !o.is_empty()) {
                    let d: f64 = e.iter().zip(other).map(|(a, b)| a * b).sum();
                    for (x, o) in e.iter_mut().zip(other) {
                        *x -= d * o;
                    }
                }
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                u[slot] = e.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

fn columns_to_matrix(cols: &[Vec<f64>], len: usize) -> DenseMatrix {
    DenseMatrix::from_fn(len, cols.len(), |i, j| cols[j][i] as f32)
}

fn rows_to_matrix(rows: &[Vec<f64>], len: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows.len(), len, |i, j| rows[i][j] as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn rel_recon_error(a: &DenseMatrix, s: &Svd) -> f64 {
        let mut err = 0.0;
        for i in 0..a.rows() {
            for j in 0..a.cols() {
                let r: f64 = (0..s.rank())
                    .map(|t| s.u.get(i, t) as f64 * s.singular_values[t] * s.v.get(t, j) as f64)
                    .sum();
                err += (a.get(i, j) as f64 - r).powi(2);
            }
        }
        err.sqrt() / a.frobenius_norm().max(f64::MIN_POSITIVE)
    }

    fn max_orthonormality_defect(vectors: &[Vec<f64>]) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, va) in vectors.iter().enumerate() {
            for (b, vb) in vectors.iter().enumerate() {
                let d: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((d - target).abs());
            }
        }
        worst
    }

    fn check(a: &DenseMatrix) -> Svd {
        let s = svd(a).unwrap();
        assert!(rel_recon_error(a, &s) <= 1e-6, "recon {}", rel_recon_error(a, &s));
        assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
        assert!(s.singular_values.iter().all(|&x| x >= 0.0));
        let ucols: Vec<Vec<f64>> = (0..s.rank()).map(|t| s.u.column(t).map(f64::from).collect()).collect();
        let vrows: Vec<Vec<f64>> = (0..s.rank()).map(|t| s.v.row(t).iter().map(|&x| x as f64).collect()).collect();
        assert!(max_orthonormality_defect(&ucols) <= 1e-6);
        assert!(max_orthonormality_defect(&vrows) <= 1e-6);
        s
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let s = check(&DenseMatrix::identity(3));
        for v in s.singular_values {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_outer_product() {
        // |u| = 2, |v| = 3.
        let u = [2.0f32, 0.0, 0.0, 0.0];
        let v = [0.0f32, 3.0, 0.0];
        let a = DenseMatrix::from_fn(4, 3, |i, j| u[i] * v[j]);
        let s = check(&a);
        assert!((s.singular_values[0] - 6.0).abs() < 1e-9);
        assert!(s.singular_values[1..].iter().all(|&x| x < 1e-9));

        let mut rng = Rng::new(5);
        let u: Vec<f32> = (0..5).map(|_| rng.gaussian()).collect();
        let v: Vec<f32> = (0..7).map(|_| rng.gaussian()).collect();
        let a = DenseMatrix::from_fn(5, 7, |i, j| u[i] * v[j]);
        let s = check(&a);
        let nu = u.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((s.singular_values[0] - nu * nv).abs() < 1e-5 * nu * nv);
    }

    #[test]
    fn random_matches_golub_kahan_reference() {
        let mut rng = Rng::new(17);
        let a = DenseMatrix::gaussian(5, 4, 1.0, &mut rng);
        let s = check(&a);
        let reference = nalgebra::DMatrix::from_fn(5, 4, |i, j| a.get(i, j) as f64).svd(false, false);
        let mut want: Vec<f64> = reference.singular_values.iter().cloned().collect();
        want.sort_by(|x, y| y.total_cmp(x));
        for (got, want) in s.singular_values.iter().zip(want) {
            assert!((got - want).abs() < 1e-9 * want.max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn wide_matrix_uses_transpose_path() {
        let mut rng = Rng::new(23);
        let a = DenseMatrix::gaussian(3, 8, 1.0, &mut rng);
        let s = check(&a);
        assert_eq!(s.u.shape(), (3, 3));
        assert_eq!(s.v.shape(), (3, 8));
    }

    #[test]
    fn rejects_non_finite() {
        let mut a = DenseMatrix::zeros(2, 2);
        a.as_mut_slice()[1] = f32::INFINITY;
        assert!(svd(&a).is_err());
    }

    #[test]
    fn zero_matrix_still_orthonormal() {
        let s = check(&DenseMatrix::zeros(4, 3));
        assert!(s.singular_values.iter().all(|&x| x == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn energy_identity(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let (m, n) = (1 + rng.below(20), 1 + rng.below(20));
            let a = DenseMatrix::gaussian(m, n, 1.0, &mut rng);
            let s = check(&a);
            let energy: f64 = s.singular_values.iter().map(|x| x * x).sum();
            let fro = a.frobenius_norm().powi(2);
            prop_assert!((energy - fro).abs() <= 1e-5 * fro.max(f64::MIN_POSITIVE));
        }
    }
}
