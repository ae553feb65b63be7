//! Decoupled inference: `y = x·W + x·Δ̃`, where `Δ̃` comes from a
//! [`DeltaProvider`]. The compressed path multiplies straight from packed
//! codes, one column at a time, and applies the step size once per output.

use std::collections::BTreeMap;
use std::ops::Deref;
use std::time::Instant;

use crate::compress::{CompressedDelta, ExpertArtifact, LowRankDelta};
use crate::error::{Error, Result};
use crate::numerics::{half_bits_to_f32, matvec_accumulate, DenseMatrix, Rng, RowVector};
use crate::quant::from_offset;
use crate::toylm::ToyLm;

#[derive(Debug, Clone, PartialEq)]
pub enum DeltaProvider {
    Exact(DenseMatrix),
    Compressed(CompressedDelta),
    LowRank(LowRankDelta),
    Zero { rows: usize, cols: usize },
}

impl DeltaProvider {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            DeltaProvider::Exact(d) => d.shape(),
            DeltaProvider::Compressed(c) => c.shape(),
            DeltaProvider::LowRank(l) => l.shape(),
            DeltaProvider::Zero { rows, cols } => (*rows, *cols),
        }
    }

    /// Bytes this provider keeps in memory.
    pub fn resident_bytes(&self) -> usize {
        match self {
            DeltaProvider::Exact(d) => d.as_slice().len() * 4,
            DeltaProvider::Compressed(c) => {
                c.packed().bytes.len() + c.salient_rows_bits().len() * 2 + c.steps().len() * 4 + c.salient().len() * 4
            }
            DeltaProvider::LowRank(l) => l.fp16_bytes(),
            DeltaProvider::Zero { .. } => 0,
        }
    }
}

/// `x·Δ̃` for a single row vector.
pub fn delta_matvec(x: &[f32], p: &DeltaProvider) -> Result<RowVector> {
    let (m, _) = p.shape();
    if x.len() != m {
        return Err(Error::dims("input length vs delta rows", m, x.len()));
    }
    let xm = DenseMatrix::new(1, m, x.to_vec())?;
    Ok(delta_matmul(&xm, p)?.into_vec())
}

/// `X·Δ̃` for every row of `x`.
pub fn delta_matmul(x: &DenseMatrix, p: &DeltaProvider) -> Result<DenseMatrix> {
    let (m, n) = p.shape();
    if x.cols() != m {
        return Err(Error::dims("input width vs delta rows", m, x.cols()));
    }
    match p {
        DeltaProvider::Zero { .. } => Ok(DenseMatrix::zeros(x.rows(), n)),
        DeltaProvider::Exact(d) => x.matmul(d),
        DeltaProvider::LowRank(l) => x.matmul(&l.a)?.matmul(&l.b),
        DeltaProvider::Compressed(c) => Ok(compressed_matmul(x, c)),
    }
}

fn compressed_matmul(x: &DenseMatrix, c: &CompressedDelta) -> DenseMatrix {
    let (m, n) = c.shape();
    let rows = x.rows();
    let bits = c.bits();
    let salient = c.salient().indices();
    // Inputs with salient entries masked; those rows hold null codes.
    let mut masked = x.clone();
    for r in 0..rows {
        let row = masked.row_mut(r);
        for &i in salient {
            row[i as usize] = 0.0;
        }
    }
    let packed = c.packed();
    let per_col = crate::quant::PackedCodes::bytes_per_column(m, bits);
    let mask = ((1u16 << bits) - 1) as u8;
    let lut: Vec<f32> = (0..=mask).map(|u| from_offset(u, bits) as f32).collect();
    let mut column = vec![0.0f32; m];
    let mut out = DenseMatrix::zeros(rows, n);
    let steps = c.steps().as_slice();
    for (j, &step) in steps.iter().enumerate() {
        let bytes = &packed.bytes[j * per_col..(j + 1) * per_col];
        for (i, q) in column.iter_mut().enumerate() {
            let bit = i * bits as usize;
            let (byte, shift) = (bit / 8, bit % 8);
            let mut u = (bytes[byte] >> shift) as u16;
            if shift + bits as usize > 8 {
                u |= (bytes[byte + 1] as u16) << (8 - shift);
            }
            *q = lut[(u as u8 & mask) as usize];
        }
        for r in 0..rows {
            let acc: f32 = masked.row(r).iter().zip(&column).map(|(a, b)| a * b).sum();
            out.set(r, j, step * acc);
        }
    }
    if !salient.is_empty() {
        let widened: Vec<f32> = c.salient_rows_bits().iter().map(|&b| half_bits_to_f32(b)).collect();
        let sal = DenseMatrix::new(salient.len(), n, widened).expect("salient rows are finite");
        for r in 0..rows {
            let xs: Vec<f32> = salient.iter().map(|&i| x.get(r, i as usize)).collect();
            matvec_accumulate(&xs, &sal, out.row_mut(r));
        }
    }
    out
}

/// Providers for every delta site of a toy model.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSet {
    pub embedding: Option<DeltaProvider>,
    pub layers: Vec<DeltaProvider>,
    pub head: Option<DeltaProvider>,
}

impl DeltaSet {
    pub fn zeros(depth: usize, width: usize) -> Self {
        Self::from_layers(vec![DeltaProvider::Zero { rows: width, cols: width }; depth])
    }

    pub fn from_layers(layers: Vec<DeltaProvider>) -> Self {
        Self {
            embedding: None,
            layers,
            head: None,
        }
    }

    pub fn exact(deltas: &[DenseMatrix]) -> Self {
        Self::from_layers(deltas.iter().cloned().map(DeltaProvider::Exact).collect())
    }

    pub fn from_artifact(artifact: &ExpertArtifact) -> Self {
        Self::from_layers(artifact.layers.iter().cloned().map(DeltaProvider::Compressed).collect())
    }

    pub fn resident_bytes(&self) -> usize {
        self.embedding.iter().chain(&self.layers).chain(&self.head).map(DeltaProvider::resident_bytes).sum()
    }
}

/// Something that maps expert ids to resident delta sets; the guard keeps the
/// expert resident for as long as it lives.
pub trait ExpertResolver {
    type Guard: Deref<Target = DeltaSet>;
    fn resolve(&self, expert: &str) -> Result<Self::Guard>;
}

impl ExpertResolver for BTreeMap<String, std::sync::Arc<DeltaSet>> {
    type Guard = std::sync::Arc<DeltaSet>;

    fn resolve(&self, expert: &str) -> Result<Self::Guard> {
        self.get(expert).cloned().ok_or_else(|| Error::UnknownExpert(expert.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedQuery {
    pub id: u64,
    pub expert: String,
    pub tokens: Vec<u32>,
}

/// Queries of one batch and their grouping by expert.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchPlan {
    queries: Vec<PlannedQuery>,
}

impl BatchPlan {
    pub fn new(queries: Vec<PlannedQuery>) -> Self {
        Self { queries }
    }

    pub fn push(&mut self, id: u64, expert: impl Into<String>, tokens: Vec<u32>) {
        self.queries.push(PlannedQuery {
            id,
            expert: expert.into(),
            tokens,
        });
    }

    pub fn queries(&self) -> &[PlannedQuery] {
        &self.queries
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Query indices per expert, in first-appearance order of each expert.
    pub fn groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        for (q, query) in self.queries.iter().enumerate() {
            match out.iter_mut().find(|(e, _)| *e == query.expert) {
                Some((_, v)) => v.push(q),
                None => out.push((query.expert.clone(), vec![q])),
            }
        }
        out
    }
}

#[derive(Debug)]
pub struct QueryOutput {
    pub id: u64,
    pub expert: String,
    pub logits: Result<DenseMatrix>,
}

/// Runs every query of `plan` in one pass: the base product `H·W` is computed
/// once over all rows of the batch, then each expert group adds its own
/// `H_g·Δ̃_g`. Output order follows the plan; queries whose expert cannot be
/// resolved (or whose tokens are invalid) get an error entry.
pub fn batched_multi_model_forward<R: ExpertResolver>(base: &ToyLm, resolver: &R, plan: &BatchPlan) -> Vec<QueryOutput> {
    batched_forward_ordered(base, resolver, plan, &plan.groups())
}

/// As [`batched_multi_model_forward`] with an explicit group processing order.
pub fn batched_forward_ordered<R: ExpertResolver>(base: &ToyLm, resolver: &R, plan: &BatchPlan, groups: &[(String, Vec<usize>)]) -> Vec<QueryOutput> {
    let mut errors: Vec<Option<Error>> = (0..plan.len()).map(|_| None).collect();
    let mut resolved: Vec<(R::Guard, Vec<usize>)> = Vec::new();
    for (expert, members) in groups {
        match resolver.resolve(expert) {
            Ok(guard) if guard.layers.len() != base.depth() => {
                for &q in members {
                    errors[q] = Some(Error::dims("delta providers vs hidden layers", base.depth(), guard.layers.len()));
                }
            }
            Ok(guard) => resolved.push((guard, members.clone())),
            Err(e) => {
                for &q in members {
                    errors[q] = Some(clone_error(&e));
                }
            }
        }
    }
    for (q, query) in plan.queries().iter().enumerate() {
        if errors[q].is_none() {
            if let Some(&t) = query.tokens.iter().find(|&&t| t as usize >= base.vocab()) {
                errors[q] = Some(Error::TokenOutOfRange { token: t, vocab: base.vocab() });
            } else if query.tokens.is_empty() {
                errors[q] = Some(Error::InvalidArgument("empty token sequence".into()));
            }
        }
    }

    // Row ranges of each live query in the stacked activations.
    let mut ranges: Vec<Option<std::ops::Range<usize>>> = vec![None; plan.len()];
    let mut total = 0;
    for (q, query) in plan.queries().iter().enumerate() {
        if errors[q].is_none() {
            ranges[q] = Some(total..total + query.tokens.len());
            total += query.tokens.len();
        }
    }
    let d = base.width();
    let mut h = DenseMatrix::zeros(total, d);
    for (q, query) in plan.queries().iter().enumerate() {
        if let Some(range) = &ranges[q] {
            for (t, (r, &tok)) in range.clone().zip(&query.tokens).enumerate() {
                let row = h.row_mut(r);
                row.copy_from_slice(base.embedding().row(tok as usize));
                for (x, b) in row.iter_mut().zip(base.position_bias(t)) {
                    *x += b;
                }
            }
        }
    }
    let group_rows = |members: &[usize]| -> Vec<usize> { members.iter().filter_map(|&q| ranges[q].clone()).flatten().collect() };
    let apply = |z: &mut DenseMatrix, h: &DenseMatrix, pick: &dyn Fn(&DeltaSet) -> Option<&DeltaProvider>, errs: &mut Vec<Option<Error>>| {
        for (guard, members) in &resolved {
            let Some(p) = pick(guard) else { continue };
            let rows = group_rows(members);
            if rows.is_empty() {
                continue;
            }
            let sub = DenseMatrix::from_fn(rows.len(), h.cols(), |r, c| h.get(rows[r], c));
            match delta_matmul(&sub, p) {
                Ok(extra) => {
                    for (r, &row) in rows.iter().enumerate() {
                        for (a, b) in z.row_mut(row).iter_mut().zip(extra.row(r)) {
                            *a += b;
                        }
                    }
                }
                Err(e) => {
                    for &q in members {
                        errs[q] = Some(clone_error(&e));
                    }
                }
            }
        }
    };

    if resolved.iter().any(|(g, _)| g.embedding.is_some()) {
        let onehot = DenseMatrix::from_fn(total, base.vocab(), |r, v| {
            let tok = plan
                .queries()
                .iter()
                .zip(&ranges)
                .find_map(|(q, range)| range.as_ref().filter(|rg| rg.contains(&r)).map(|rg| q.tokens[r - rg.start]));
            (tok == Some(v as u32)) as u8 as f32
        });
        apply(&mut h, &onehot, &|s: &DeltaSet| s.embedding.as_ref(), &mut errors);
    }
    for l in 0..base.depth() {
        let mut z = h.matmul(base.layer(l)).expect("shapes checked");
        apply(&mut z, &h, &|s: &DeltaSet| s.layers.get(l), &mut errors);
        for v in z.as_mut_slice() {
            *v = v.max(0.0);
        }
        h = z;
    }
    let mut logits = h.matmul(base.head()).expect("shapes checked");
    apply(&mut logits, &h, &|s: &DeltaSet| s.head.as_ref(), &mut errors);

    plan.queries()
        .iter()
        .enumerate()
        .map(|(q, query)| QueryOutput {
            id: query.id,
            expert: query.expert.clone(),
            logits: match (errors[q].take(), &ranges[q]) {
                (Some(e), _) => Err(e),
                (None, Some(range)) => Ok(DenseMatrix::from_fn(range.len(), base.vocab(), |r, c| logits.get(range.start + r, c))),
                (None, None) => Err(Error::InvalidArgument("query was not scheduled".into())),
            },
        })
        .collect()
}

fn clone_error(e: &Error) -> Error {
    match e {
        Error::UnknownExpert(id) => Error::UnknownExpert(id.clone()),
        Error::BudgetExceeded { needed, available, budget } => Error::BudgetExceeded {
            needed: *needed,
            available: *available,
            budget: *budget,
        },
        other => Error::InvalidArgument(other.to_string()),
    }
}

/// Median and 90th percentile of a sample, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub median_ms: f64,
    pub p90_ms: f64,
}

impl Timing {
    fn from_samples(samples: &mut [f64]) -> Self {
        samples.sort_by(f64::total_cmp);
        let at = |q: f64| samples[((samples.len() - 1) as f64 * q).round() as usize];
        Self {
            median_ms: at(0.5),
            p90_ms: at(0.9),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub base_gemm_ms: Timing,
    pub delta_stage_ms: Timing,
    pub total_ms: Timing,
    pub samples: usize,
    /// Set when only one timed repetition ran.
    pub no_variance: bool,
}

/// Warmup repetitions run and discarded before timing.
pub const BENCH_WARMUP: usize = 3;

/// Times one decode-style pass over `batch` rows of `seq_len` positions:
/// the shared `x·W` products for all layers, then each expert's `x·Δ̃` on its
/// share of the rows (rows are dealt round-robin across `providers`).
pub fn bench_decode(base: &ToyLm, providers: &[DeltaSet], seq_len: usize, batch: usize, repetitions: usize) -> Result<BenchReport> {
    if repetitions == 0 || seq_len == 0 || batch == 0 {
        return Err(Error::InvalidArgument("bench needs positive seq_len, batch and repetitions".into()));
    }
    if let Some(p) = providers.iter().find(|p| p.layers.len() != base.depth()) {
        return Err(Error::dims("delta providers vs hidden layers", base.depth(), p.layers.len()));
    }
    let rows = seq_len * batch;
    let mut rng = Rng::new(0xbe4c);
    let x = DenseMatrix::from_fn(rows, base.width(), |_, _| rng.gaussian().max(0.0));
    let groups: Vec<Vec<usize>> = (0..providers.len())
        .map(|g| (0..batch).filter(|b| b % providers.len() == g).flat_map(|b| b * seq_len..(b + 1) * seq_len).collect())
        .collect();
    let subs: Vec<DenseMatrix> = groups.iter().map(|rs| DenseMatrix::from_fn(rs.len(), x.cols(), |r, c| x.get(rs[r], c))).collect();

    let (mut base_s, mut delta_s, mut total_s) = (Vec::new(), Vec::new(), Vec::new());
    for rep in 0..repetitions + BENCH_WARMUP {
        let t0 = Instant::now();
        for w in base.layers() {
            std::hint::black_box(x.matmul(w)?);
        }
        let t1 = Instant::now();
        for (set, sub) in providers.iter().zip(&subs) {
            if sub.rows() == 0 {
                continue;
            }
            for p in &set.layers {
                std::hint::black_box(delta_matmul(sub, p)?);
            }
        }
        let t2 = Instant::now();
        if rep >= BENCH_WARMUP {
            base_s.push((t1 - t0).as_secs_f64() * 1e3);
            delta_s.push((t2 - t1).as_secs_f64() * 1e3);
            total_s.push((t2 - t0).as_secs_f64() * 1e3);
        }
    }
    Ok(BenchReport {
        base_gemm_ms: Timing::from_samples(&mut base_s),
        delta_stage_ms: Timing::from_samples(&mut delta_s),
        total_ms: Timing::from_samples(&mut total_s),
        samples: repetitions,
        no_variance: repetitions == 1,
    })
}
