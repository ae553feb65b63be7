//! Storage arithmetic for serving `M` experts from one base, and the
//! singular-value energy profile of deltas.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::{svd, DenseMatrix};

/// Sizes in any consistent unit (bytes or decimal GB).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeModel {
    /// Base model size Ψ.
    pub psi: f64,
    /// Compressed delta size Ψ̃ per expert.
    pub psi_tilde: f64,
    /// Router size Φ.
    pub phi: f64,
    /// Expert count M.
    pub m: u64,
}

impl SizeModel {
    pub fn new(psi: f64, psi_tilde: f64, phi: f64, m: u64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(psi) && ok(psi_tilde) && ok(phi)) || psi == 0.0 || psi_tilde == 0.0 || m == 0 {
            return Err(Error::InvalidArgument(format!(
                "size model needs psi > 0, psi_tilde > 0, phi >= 0, m >= 1 (got {psi}, {psi_tilde}, {phi}, {m})"
            )));
        }
        Ok(Self { psi, psi_tilde, phi, m })
    }

    pub fn with_m(self, m: u64) -> Result<Self> {
        Self::new(self.psi, self.psi_tilde, self.phi, m)
    }
}

/// `M·Ψ / (Ψ + M·Ψ̃ + Φ)`.
pub fn compression_ratio(sz: &SizeModel) -> f64 {
    let m = sz.m as f64;
    m * sz.psi / (sz.psi + m * sz.psi_tilde + sz.phi)
}

/// Ratios for every `M` in `range`.
pub fn ratio_curve(sz: &SizeModel, range: std::ops::RangeInclusive<u64>) -> Result<Vec<(u64, f64)>> {
    range.map(|m| Ok((m, compression_ratio(&sz.with_m(m)?)))).collect()
}

/// `m,ratio` CSV with a header line.
pub fn ratio_csv(curve: &[(u64, f64)]) -> String {
    let mut out = String::from("m,ratio\n");
    for (m, r) in curve {
        writeln!(out, "{m},{r:.6}").unwrap();
    }
    out
}

/// Parses `a..b` or `a..=b` (both inclusive) into a range of expert counts.
pub fn parse_m_range(s: &str) -> Result<std::ops::RangeInclusive<u64>> {
    let bad = || Error::InvalidArgument(format!("expected a range like 1..16, got {s:?}"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let b = b.strip_prefix('=').unwrap_or(b);
    let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if a == 0 || a > b {
        return Err(bad());
    }
    Ok(a..=b)
}

/// `c_r = Σ_{i≤r} σ_i² / Σ σ_i²` for `r = 1..min(m, n)`. A zero matrix
/// reports all ones.
pub fn cumulative_energy(delta: &DenseMatrix) -> Result<Vec<f64>> {
    let s = svd(delta)?;
    let sq: Vec<f64> = s.singular_values.iter().map(|v| v * v).collect();
    let total: f64 = sq.iter().sum();
    if total == 0.0 {
        return Ok(vec![1.0; sq.len()]);
    }
    let mut acc = 0.0;
    let mut out: Vec<f64> = sq
        .iter()
        .map(|v| {
            acc += v;
            (acc / total).min(1.0)
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
    Ok(out)
}

pub fn cumulative_energy_report(deltas: &[DenseMatrix]) -> Result<Vec<Vec<f64>>> {
    deltas.iter().map(cumulative_energy).collect()
}

/// `layer,rank,energy` CSV with a header line; ranks start at 1.
pub fn energy_csv(report: &[Vec<f64>]) -> String {
    let mut out = String::from("layer,rank,energy\n");
    for (l, c) in report.iter().enumerate() {
        for (r, e) in c.iter().enumerate() {
            writeln!(out, "{l},{},{e:.6}", r + 1).unwrap();
        }
    }
    out
}
