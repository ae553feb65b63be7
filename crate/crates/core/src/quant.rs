//! Uniform b-bit quantization with one learnable step size per output
//! channel, the binary (sign × scale) fallback, straight-through step
//! gradients, and the column-major offset-code packing used on disk.

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

pub const SUPPORTED_BITS: [u8; 5] = [1, 2, 3, 4, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantConfig {
    bits: u8,
}

impl QuantConfig {
    pub fn new(bits: u8) -> Result<Self> {
        if !SUPPORTED_BITS.contains(&bits) {
            return Err(Error::InvalidArgument(format!(
                "unsupported bit width {bits}, expected one of {SUPPORTED_BITS:?}"
            )));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn is_binary(&self) -> bool {
        self.bits == 1
    }

    /// Number of negative levels; `2^(b-1)` for b ≥ 2, 1 for binary.
    pub fn q_neg(&self) -> i32 {
        if self.is_binary() {
            1
        } else {
            1 << (self.bits - 1)
        }
    }

    /// Number of positive levels; `2^(b-1) - 1` for b ≥ 2, 1 for binary.
    pub fn q_pos(&self) -> i32 {
        if self.is_binary() {
            1
        } else {
            (1 << (self.bits - 1)) - 1
        }
    }

    pub fn code_valid(&self, q: i8) -> bool {
        if self.is_binary() {
            q == 1 || q == -1
        } else {
            (-self.q_neg()..=self.q_pos()).contains(&(q as i32))
        }
    }

    /// Code used for rows that carry no quantized content (salient rows).
    /// Binary has no zero level, so it uses -1 (offset 0).
    pub fn null_code(&self) -> i8 {
        if self.is_binary() {
            -1
        } else {
            0
        }
    }
}

/// Per-output-channel step sizes; for binary quantization these are the
/// per-channel scales α.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSizes(Vec<f32>);

impl StepSizes {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        for (j, &v) in values.iter().enumerate() {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::NonPositiveStep { channel: j, value: v });
            }
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    /// Replaces channel `j`, clamping to `floor` so the invariant holds.
    pub fn set_clamped(&mut self, j: usize, v: f32, floor: f32) {
        self.0[j] = if v.is_finite() { v.max(floor) } else { floor };
    }
}

#[derive(Debug, Clone)]
pub struct StepInit {
    pub steps: StepSizes,
    /// Output channels with no magnitude; their step fell back to `f32::MIN_POSITIVE`.
    pub zero_columns: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeMatrix {
    rows: usize,
    cols: usize,
    codes: Vec<i8>,
}

impl CodeMatrix {
    pub fn new(rows: usize, cols: usize, codes: Vec<i8>) -> Result<Self> {
        if codes.len() != rows * cols {
            return Err(Error::dims("code matrix length", rows * cols, codes.len()));
        }
        Ok(Self { rows, cols, codes })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.codes[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, q: i8) {
        self.codes[i * self.cols + j] = q;
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.codes
    }

    pub fn validate(&self, cfg: QuantConfig) -> Result<()> {
        for (idx, &q) in self.codes.iter().enumerate() {
            if !cfg.code_valid(q) {
                return Err(Error::CodeOutOfRange {
                    row: idx / self.cols.max(1),
                    col: idx % self.cols.max(1),
                    code: q,
                    min: -cfg.q_neg() as i8,
                    max: cfg.q_pos() as i8,
                });
            }
        }
        Ok(())
    }
}

/// Column-major offset codes, LSB-first, each column padded to a byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodes {
    pub bits: u8,
    pub rows: usize,
    pub cols: usize,
    pub bytes: Vec<u8>,
}

impl PackedCodes {
    pub fn bytes_per_column(rows: usize, bits: u8) -> usize {
        (rows * bits as usize).div_ceil(8)
    }

    pub fn expected_len(rows: usize, cols: usize, bits: u8) -> usize {
        Self::bytes_per_column(rows, bits) * cols
    }

    /// Offset code at `(i, j)` read straight from the byte stream.
    #[inline]
    pub fn offset_at(&self, i: usize, j: usize) -> u8 {
        let col_base = j * Self::bytes_per_column(self.rows, self.bits);
        read_bits(&self.bytes[col_base..], i * self.bits as usize, self.bits)
    }
}

#[inline]
fn round_half_away(v: f32) -> f32 {
    v.round()
}

fn check_steps(x: &DenseMatrix, s: &StepSizes) -> Result<()> {
    if s.len() != x.cols() {
        return Err(Error::dims("step sizes vs output channels", x.cols(), s.len()));
    }
    for (j, &v) in s.as_slice().iter().enumerate() {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::NonPositiveStep { channel: j, value: v });
        }
    }
    Ok(())
}

/// b ≥ 2: `s_j = max_i |X_ij| / (2^(b-1) - 1)`; b = 1: `α_j = mean_i |X_ij|`.
pub fn init_step_sizes(x: &DenseMatrix, cfg: QuantConfig) -> Result<StepInit> {
    init_step_sizes_over(x, cfg, |_| true)
}

/// Like [`init_step_sizes`], but only rows where `include(i)` holds
/// contribute to each channel's statistic.
pub fn init_step_sizes_over(
    x: &DenseMatrix,
    cfg: QuantConfig,
    include: impl Fn(usize) -> bool,
) -> Result<StepInit> {
    if x.is_empty() && x.cols() == 0 {
        return Err(Error::InvalidArgument("cannot initialize steps of an empty matrix".into()));
    }
    let rows: Vec<usize> = (0..x.rows()).filter(|&i| include(i)).collect();
    let mut steps = Vec::with_capacity(x.cols());
    let mut zero_columns = Vec::new();
    for j in 0..x.cols() {
        let s = if cfg.is_binary() {
            let sum: f64 = rows.iter().map(|&i| x.get(i, j).abs() as f64).sum();
            if rows.is_empty() {
                0.0
            } else {
                (sum / rows.len() as f64) as f32
            }
        } else {
            let max = rows.iter().map(|&i| x.get(i, j).abs()).fold(0.0f32, f32::max);
            max / cfg.q_pos() as f32
        };
        if s > 0.0 && s.is_finite() {
            steps.push(s);
        } else {
            zero_columns.push(j);
            steps.push(f32::MIN_POSITIVE);
        }
    }
    Ok(StepInit {
        steps: StepSizes::new(steps)?,
        zero_columns,
    })
}

/// Integer code of a single value.
#[inline]
pub fn quantize_value(x: f32, s: f32, cfg: QuantConfig) -> i8 {
    if cfg.is_binary() {
        if x >= 0.0 {
            1
        } else {
            -1
        }
    } else {
        let q = round_half_away(x / s).clamp(-cfg.q_neg() as f32, cfg.q_pos() as f32);
        q as i8
    }
}

pub fn quantize_codes(x: &DenseMatrix, s: &StepSizes, cfg: QuantConfig) -> Result<CodeMatrix> {
    check_steps(x, s)?;
    let steps = s.as_slice();
    let mut codes = Vec::with_capacity(x.rows() * x.cols());
    for i in 0..x.rows() {
        codes.extend(x.row(i).iter().zip(steps).map(|(&v, &sj)| quantize_value(v, sj, cfg)));
    }
    CodeMatrix::new(x.rows(), x.cols(), codes)
}

/// `X̂_ij = q_ij · s_j`.
pub fn dequantize(q: &CodeMatrix, s: &StepSizes, cfg: QuantConfig) -> Result<DenseMatrix> {
    if s.len() != q.cols() {
        return Err(Error::dims("step sizes vs code columns", q.cols(), s.len()));
    }
    q.validate(cfg)?;
    let steps = s.as_slice();
    Ok(DenseMatrix::from_fn(q.rows(), q.cols(), |i, j| {
        q.get(i, j) as f32 * steps[j]
    }))
}

/// `∂X̂/∂s` for one element under the straight-through estimator.
///
/// With `u = x / s`: `round(u) - u` inside `[-Q_N, Q_P]`, `-Q_N` below and
/// `Q_P` above. Binary: `sign(x)`.
#[inline]
pub fn ste_local(x: f32, s: f32, cfg: QuantConfig) -> f32 {
    if cfg.is_binary() {
        return if x >= 0.0 { 1.0 } else { -1.0 };
    }
    let u = x / s;
    let (qn, qp) = (cfg.q_neg() as f32, cfg.q_pos() as f32);
    if u < -qn {
        -qn
    } else if u > qp {
        qp
    } else {
        round_half_away(u) - u
    }
}

/// `grad_s[j] = Σ_i upstream_ij · ∂X̂_ij/∂s_j`.
pub fn ste_step_gradient(
    x: &DenseMatrix,
    s: &StepSizes,
    cfg: QuantConfig,
    upstream: &DenseMatrix,
) -> Result<Vec<f32>> {
    check_steps(x, s)?;
    if upstream.shape() != x.shape() {
        return Err(Error::dims("upstream rows", x.rows(), upstream.rows()));
    }
    let steps = s.as_slice();
    let mut grad = vec![0.0f64; x.cols()];
    for i in 0..x.rows() {
        for (j, (&v, &g)) in x.row(i).iter().zip(upstream.row(i)).enumerate() {
            grad[j] += g as f64 * ste_local(v, steps[j], cfg) as f64;
        }
    }
    Ok(grad.into_iter().map(|g| g as f32).collect())
}

#[inline]
fn to_offset(q: i8, cfg: QuantConfig) -> u8 {
    if cfg.is_binary() {
        ((q as i32 + 1) / 2) as u8
    } else {
        (q as i32 + cfg.q_neg()) as u8
    }
}

#[inline]
pub(crate) fn from_offset(u: u8, bits: u8) -> i8 {
    if bits == 1 {
        (u as i8) * 2 - 1
    } else {
        (u as i32 - (1i32 << (bits - 1))) as i8
    }
}

#[inline]
fn read_bits(bytes: &[u8], bit_pos: usize, bits: u8) -> u8 {
    let mut out = 0u16;
    let mut got = 0u8;
    let mut pos = bit_pos;
    while got < bits {
        let byte = bytes[pos / 8] as u16;
        let shift = (pos % 8) as u8;
        let take = (8 - shift).min(bits - got);
        let chunk = (byte >> shift) & ((1 << take) - 1);
        out |= chunk << got;
        got += take;
        pos += take as usize;
    }
    out as u8
}

#[inline]
fn write_bits(bytes: &mut [u8], bit_pos: usize, bits: u8, value: u8) {
    let mut done = 0u8;
    let mut pos = bit_pos;
    while done < bits {
        let shift = (pos % 8) as u8;
        let take = (8 - shift).min(bits - done);
        let chunk = ((value as u16 >> done) & ((1 << take) - 1)) as u8;
        bytes[pos / 8] |= chunk << shift;
        done += take;
        pos += take as usize;
    }
}

pub fn pack_codes(q: &CodeMatrix, cfg: QuantConfig) -> Result<PackedCodes> {
    q.validate(cfg)?;
    let bits = cfg.bits();
    let per_col = PackedCodes::bytes_per_column(q.rows(), bits);
    let mut bytes = vec![0u8; per_col * q.cols()];
    for j in 0..q.cols() {
        let col = &mut bytes[j * per_col..(j + 1) * per_col];
        for i in 0..q.rows() {
            write_bits(col, i * bits as usize, bits, to_offset(q.get(i, j), cfg));
        }
    }
    Ok(PackedCodes {
        bits,
        rows: q.rows(),
        cols: q.cols(),
        bytes,
    })
}

pub fn unpack_codes(p: &PackedCodes) -> Result<CodeMatrix> {
    let cfg = QuantConfig::new(p.bits)?;
    let expected = PackedCodes::expected_len(p.rows, p.cols, p.bits);
    if p.bytes.len() != expected {
        return Err(Error::Truncated {
            what: "packed codes",
            expected,
            actual: p.bytes.len(),
        });
    }
    let mut q = CodeMatrix::new(p.rows, p.cols, vec![0; p.rows * p.cols])?;
    for j in 0..p.cols {
        for i in 0..p.rows {
            q.set(i, j, from_offset(p.offset_at(i, j), cfg.bits()));
        }
    }
    Ok(q)
}
