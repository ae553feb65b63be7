//! Model-level routing: a multinomial Naive Bayes classifier over hashed
//! character n-grams picks a domain per query; the multiple-choice prompt for
//! an external LLM router is rendered alongside.

mod data;
mod prompt;

pub use data::{load_dataset, save_dataset, RoutingRecord, SyntheticRouting, STANDARD_DOMAINS};
pub use prompt::{
    parse_letter, render_prompt, route_external, standard_options, ExternalRouter, PromptOption, MAX_PROMPT_OPTIONS,
    PROMPT_FOOTER, PROMPT_HEADER,
};

use std::path::Path;

use crate::compress::Reader;
use crate::error::{Error, Result};

pub const ROUTER_MAGIC: [u8; 4] = *b"MERT";
pub const ROUTER_VERSION: u16 = 1;
pub const HASH_BITS: u32 = 16;
pub const BUCKETS: usize = 1 << HASH_BITS;
pub const NGRAM_SIZES: [usize; 2] = [2, 3];

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DomainLabel {
    pub id: u32,
    pub name: String,
}

/// Bucket indices of the character 2- and 3-grams of every whitespace
/// separated word (lowercased, padded with one space on each side).
pub fn hashed_ngrams(text: &str, seed: u64) -> Vec<usize> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let chars: Vec<char> = std::iter::once(' ').chain(word.to_lowercase().chars()).chain(std::iter::once(' ')).collect();
        for n in NGRAM_SIZES {
            for gram in chars.windows(n) {
                let mut h = FNV_OFFSET ^ seed.wrapping_mul(FNV_PRIME);
                let mut buf = [0u8; 4];
                for c in gram {
                    for &b in c.encode_utf8(&mut buf).as_bytes() {
                        h ^= b as u64;
                        h = h.wrapping_mul(FNV_PRIME);
                    }
                }
                out.push((h & (BUCKETS as u64 - 1)) as usize);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub label: DomainLabel,
    /// Softmax-normalized posterior of the winner; ordinal only.
    pub confidence: f64,
    /// True when the query had no n-grams and only priors decided.
    pub prior_only: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterModel {
    domains: Vec<String>,
    seed: u64,
    log_priors: Vec<f32>,
    /// `domains × BUCKETS` log-likelihoods, row-major.
    log_likelihoods: Vec<f32>,
}

impl RouterModel {
    /// Fits priors and add-one smoothed bucket likelihoods.
    pub fn train(records: &[RoutingRecord], domains: &[String], seed: u64) -> Result<Self> {
        check_domains(domains)?;
        let mut counts = vec![0u64; domains.len() * BUCKETS];
        let mut totals = vec![0u64; domains.len()];
        let mut docs = vec![0u64; domains.len()];
        for r in records {
            let d = domain_index(domains, &r.domain)?;
            docs[d] += 1;
            for b in hashed_ngrams(&r.query, seed) {
                counts[d * BUCKETS + b] += 1;
                totals[d] += 1;
            }
        }
        let uncovered: Vec<String> = domains.iter().zip(&docs).filter(|(_, &n)| n == 0).map(|(d, _)| d.clone()).collect();
        if !uncovered.is_empty() {
            return Err(Error::UncoveredDomains(uncovered));
        }
        let n: u64 = docs.iter().sum();
        let log_priors = docs.iter().map(|&c| (c as f64 / n as f64).ln() as f32).collect();
        let mut log_likelihoods = vec![0.0f32; counts.len()];
        for d in 0..domains.len() {
            let denom = (totals[d] + BUCKETS as u64) as f64;
            for b in 0..BUCKETS {
                log_likelihoods[d * BUCKETS + b] = ((counts[d * BUCKETS + b] + 1) as f64 / denom).ln() as f32;
            }
        }
        Ok(Self {
            domains: domains.to_vec(),
            seed,
            log_priors,
            log_likelihoods,
        })
    }

    /// Baseline that keeps the data priors but has uniform likelihoods, so
    /// every prediction is the prior argmax.
    pub fn prior_only(records: &[RoutingRecord], domains: &[String], seed: u64) -> Result<Self> {
        let mut m = Self::train(records, domains, seed)?;
        m.log_likelihoods.fill(-(BUCKETS as f32).ln());
        Ok(m)
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self, id: usize) -> DomainLabel {
        DomainLabel {
            id: id as u32,
            name: self.domains[id].clone(),
        }
    }

    /// Per-domain log posterior up to a shared constant.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let grams = hashed_ngrams(query, self.seed);
        (0..self.domains.len())
            .map(|d| {
                let row = &self.log_likelihoods[d * BUCKETS..(d + 1) * BUCKETS];
                self.log_priors[d] as f64 + grams.iter().map(|&b| row[b] as f64).sum::<f64>()
            })
            .collect()
    }

    pub fn classify(&self, query: &str) -> Classification {
        let prior_only = hashed_ngrams(query, self.seed).is_empty();
        let scores = self.scores(query);
        let mut best = 0;
        for (d, &s) in scores.iter().enumerate().skip(1) {
            if s > scores[best] {
                best = d;
            }
        }
        let z: f64 = scores.iter().map(|s| (s - scores[best]).exp()).sum();
        Classification {
            label: self.label(best),
            confidence: 1.0 / z,
            prior_only,
        }
    }

    /// `MERT`, u16 version, u64 seed, u32 domain count, then per domain a
    /// u32-length UTF-8 name and f32 log prior, u32 bucket count, and the
    /// f32 bucket log-likelihoods domain by domain.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(22 + self.log_likelihoods.len() * 4);
        out.extend_from_slice(&ROUTER_MAGIC);
        out.extend_from_slice(&ROUTER_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.domains.len() as u32).to_le_bytes());
        for (name, p) in self.domains.iter().zip(&self.log_priors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&p.to_le_bytes());
        }
        out.extend_from_slice(&(BUCKETS as u32).to_le_bytes());
        for v in &self.log_likelihoods {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.take(4, "router magic")?.try_into().unwrap();
        if magic != ROUTER_MAGIC {
            return Err(Error::BadMagic {
                expected: ROUTER_MAGIC,
                found: magic,
            });
        }
        let version = r.u16("router version")?;
        if version != ROUTER_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let seed = u64::from_le_bytes(r.take(8, "router seed")?.try_into().unwrap());
        let n = r.u32("domain count")? as usize;
        let mut domains = Vec::new();
        let mut log_priors = Vec::new();
        for _ in 0..n {
            let len = r.u32("domain name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "domain name")?)
                .map_err(|e| Error::InvalidArgument(format!("domain name: {e}")))?
                .to_string();
            domains.push(name);
            log_priors.push(r.f32("log prior")?);
        }
        check_domains(&domains)?;
        let buckets = r.u32("bucket count")? as usize;
        if buckets != BUCKETS {
            return Err(Error::dims("router buckets", BUCKETS, buckets));
        }
        let raw = r.take(n * BUCKETS * 4, "bucket log-likelihoods")?;
        let log_likelihoods = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if r.remaining() != 0 {
            return Err(Error::InvalidArgument(format!("{} trailing bytes after router", r.remaining())));
        }
        Ok(Self {
            domains,
            seed,
            log_priors,
            log_likelihoods,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn size_bytes(&self) -> usize {
        self.to_bytes().len()
    }
}

fn check_domains(domains: &[String]) -> Result<()> {
    if domains.is_empty() {
        return Err(Error::InvalidArgument("router needs at least one domain".into()));
    }
    for (i, d) in domains.iter().enumerate() {
        if domains[..i].contains(d) {
            return Err(Error::InvalidArgument(format!("duplicate domain {d:?}")));
        }
    }
    Ok(())
}

fn domain_index(domains: &[String], name: &str) -> Result<usize> {
    domains.iter().position(|d| d == name).ok_or_else(|| Error::UnknownDomain(name.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterEval {
    pub accuracy: f64,
    pub per_domain: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub count: usize,
}

pub fn evaluate_router(router: &RouterModel, records: &[RoutingRecord]) -> Result<RouterEval> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = router.domains().len();
    let mut confusion = vec![vec![0usize; k]; k];
    for r in records {
        let truth = domain_index(router.domains(), &r.domain)?;
        confusion[truth][router.classify(&r.query).label.id as usize] += 1;
    }
    let correct: usize = (0..k).map(|d| confusion[d][d]).sum();
    let per_domain = confusion
        .iter()
        .enumerate()
        .map(|(d, row)| {
            let n: usize = row.iter().sum();
            if n == 0 {
                f64::NAN
            } else {
                row[d] as f64 / n as f64
            }
        })
        .collect();
    Ok(RouterEval {
        accuracy: correct as f64 / records.len() as f64,
        per_domain,
        confusion,
        count: records.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn rec(q: &str, d: &str) -> RoutingRecord {
        RoutingRecord {
            query: q.into(),
            domain: d.into(),
        }
    }

    #[test]
    fn hashing_is_deterministic_and_salted() {
        assert_eq!(hashed_ngrams("Hello world", 1), hashed_ngrams("hello   WORLD", 1));
        assert_ne!(hashed_ngrams("hello", 1), hashed_ngrams("hello", 2));
        // " ab " has 3 bigrams and 2 trigrams.
        assert_eq!(hashed_ngrams("ab", 0).len(), 5);
        assert!(hashed_ngrams("   ", 0).is_empty());
        assert!(hashed_ngrams("数学", 0).iter().all(|&b| b < BUCKETS));
    }

    #[test]
    fn likelihoods_normalize() {
        let m = RouterModel::train(&[rec("alpha beta", "a"), rec("gamma", "b")], &names(&["a", "b"]), 3).unwrap();
        for d in 0..2 {
            let row = &m.log_likelihoods[d * BUCKETS..(d + 1) * BUCKETS];
            let total: f64 = row.iter().map(|&l| (l as f64).exp()).sum();
            assert!((total - 1.0).abs() < 1e-4, "{total}");
        }
    }

    #[test]
    fn single_domain_always_wins() {
        let m = RouterModel::train(&[rec("anything", "only")], &names(&["only"]), 0).unwrap();
        let c = m.classify("something else entirely");
        assert_eq!(c.label.name, "only");
        assert_eq!(c.confidence, 1.0);
    }

    #[test]
    fn uncovered_and_unknown_domains() {
        let err = RouterModel::train(&[rec("x", "a")], &names(&["a", "b", "c"]), 0).unwrap_err();
        assert!(matches!(err, Error::UncoveredDomains(ref v) if v == &names(&["b", "c"])));
        assert!(matches!(RouterModel::train(&[rec("x", "z")], &names(&["a"]), 0), Err(Error::UnknownDomain(_))));
        assert!(RouterModel::train(&[rec("x", "a")], &names(&["a", "a"]), 0).is_err());
    }

    #[test]
    fn empty_query_is_prior_only() {
        let data = [rec("foo", "a"), rec("bar", "b")];
        let m = RouterModel::train(&data, &names(&["a", "b"]), 0).unwrap();
        let c = m.classify("");
        assert!(c.prior_only);
        assert_eq!(c.label.id, 0);
        assert!((c.confidence - 0.5).abs() < 1e-6);
        assert!(!m.classify("foo").prior_only);
    }

    #[test]
    fn repetition_keeps_argmax() {
        let syn = SyntheticRouting::new(&names(&STANDARD_DOMAINS), 1);
        let train = syn.sample(50, 2);
        let m = RouterModel::train(&train, syn.domains(), 0).unwrap();
        for r in syn.sample(10, 3) {
            let twice = format!("{} {}", r.query, r.query);
            assert_eq!(m.classify(&r.query).label, m.classify(&twice).label);
        }
    }

    #[test]
    fn separable_domains_are_learned() {
        let syn = SyntheticRouting::new(&names(&["code", "math"]), 4);
        let m = RouterModel::train(&syn.sample(100, 5), syn.domains(), 9).unwrap();
        let eval = evaluate_router(&m, &syn.sample(100, 6)).unwrap();
        assert_eq!(eval.accuracy, 1.0);
        for (d, row) in eval.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), 100, "domain {d}");
        }
    }

    #[test]
    fn retraining_is_byte_identical_and_roundtrips() {
        let syn = SyntheticRouting::new(&names(&STANDARD_DOMAINS), 1);
        let data = syn.sample(20, 2);
        let a = RouterModel::train(&data, syn.domains(), 7).unwrap();
        let b = RouterModel::train(&data, syn.domains(), 7).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let back = RouterModel::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(back, a);
        let mut bad = a.to_bytes();
        bad[0] = b'X';
        assert!(matches!(RouterModel::from_bytes(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(RouterModel::from_bytes(&a.to_bytes()[..100]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn evaluation_errors() {
        let m = RouterModel::train(&[rec("x", "a")], &names(&["a"]), 0).unwrap();
        assert!(matches!(evaluate_router(&m, &[]), Err(Error::EmptyDataset)));
        assert!(matches!(evaluate_router(&m, &[rec("x", "q")]), Err(Error::UnknownDomain(_))));
    }
}
