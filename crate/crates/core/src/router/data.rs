use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const STANDARD_DOMAINS: [&str; 4] = ["instruct", "code", "math", "chinese"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub query: String,
    pub domain: String,
}

/// Reads one `{"query": ..., "domain": ...}` object per non-blank line.
pub fn load_dataset(path: &Path) -> Result<Vec<RoutingRecord>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::InvalidArgument(format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, records: &[RoutingRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

const INSTRUCT: &[&str] = &[
    "advice", "explain", "guidance", "recommend", "tips", "suggest", "overview", "describe", "summarize", "plan",
    "improve", "habits", "career", "travel", "healthy", "learn", "productivity", "organize", "decide", "motivation",
];
const CODE: &[&str] = &[
    "python", "function", "debug", "compile", "rust", "variable", "loop", "array", "segfault", "stacktrace",
    "refactor", "api", "struct", "pointer", "recursion", "regex", "javascript", "syntax", "github", "unittest",
];
const MATH: &[&str] = &[
    "integral", "derivative", "equation", "theorem", "prime", "matrix", "probability", "polynomial", "geometry",
    "algebra", "proof", "calculus", "fraction", "logarithm", "triangle", "vector", "eigenvalue", "series", "limit",
    "factorial",
];
const CHINESE: &[&str] = &[
    "翻译", "语法", "成语", "汉字", "拼音", "词语", "句子", "意思", "古诗", "声调", "部首", "繁体", "简体", "量词",
    "造句", "同义词", "反义词", "文言文", "写作", "发音",
];
const FILLER: &[&str] = &["please", "the", "how", "can", "you", "help", "me", "with", "a", "about", "what", "is"];
const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ru", "te", "zan", "vor", "qui", "ple", "dro", "sha", "nex", "tul", "bri", "os", "gam", "fey",
    "wix", "jo", "hur",
];
const POOL_SIZE: usize = 20;

/// Keyword-pool generator: each domain owns a disjoint pool of words and
/// queries mix a few of them with shared filler words.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRouting {
    domains: Vec<String>,
    pools: Vec<Vec<String>>,
}

impl SyntheticRouting {
    /// The four standard domains use fixed pools; any other name gets a pool
    /// of seeded pseudo-words, disjoint from every other pool.
    pub fn new(domains: &[String], pool_seed: u64) -> Self {
        let mut used: HashSet<String> = FILLER.iter().map(|s| s.to_string()).collect();
        for p in [INSTRUCT, CODE, MATH, CHINESE] {
            used.extend(p.iter().map(|s| s.to_string()));
        }
        let mut rng = Rng::derive(pool_seed, 0x9001);
        let pools = domains
            .iter()
            .map(|d| {
                let fixed = match d.as_str() {
                    "instruct" => Some(INSTRUCT),
                    "code" => Some(CODE),
                    "math" => Some(MATH),
                    "chinese" => Some(CHINESE),
                    _ => None,
                };
                match fixed {
                    Some(p) => p.iter().map(|s| s.to_string()).collect(),
                    None => {
                        let mut pool = Vec::with_capacity(POOL_SIZE);
                        while pool.len() < POOL_SIZE {
                            let n = 2 + rng.below(2);
                            let w: String = (0..n).map(|_| SYLLABLES[rng.below(SYLLABLES.len())]).collect();
                            if used.insert(w.clone()) {
                                pool.push(w);
                            }
                        }
                        pool
                    }
                }
            })
            .collect();
        Self {
            domains: domains.to_vec(),
            pools,
        }
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn pool(&self, domain: usize) -> &[String] {
        &self.pools[domain]
    }

    /// One query: 2–5 domain keywords and 0–3 filler words, shuffled.
    pub fn query(&self, domain: usize, rng: &mut Rng) -> String {
        let pool = &self.pools[domain];
        let mut words: Vec<&str> = (0..2 + rng.below(4)).map(|_| pool[rng.below(pool.len())].as_str()).collect();
        words.extend((0..rng.below(4)).map(|_| FILLER[rng.below(FILLER.len())]));
        rng.shuffle(&mut words);
        words.join(" ")
    }

    /// `per_domain` records for each domain, interleaved by domain.
    pub fn sample(&self, per_domain: usize, seed: u64) -> Vec<RoutingRecord> {
        let mut rng = Rng::derive(seed, 0x5a3e);
        let mut out = Vec::with_capacity(per_domain * self.domains.len());
        for _ in 0..per_domain {
            for (d, name) in self.domains.iter().enumerate() {
                out.push(RoutingRecord {
                    query: self.query(d, &mut rng),
                    domain: name.clone(),
                });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_are_disjoint() {
        let names: Vec<String> = STANDARD_DOMAINS.iter().map(|s| s.to_string()).chain((0..12).map(|i| format!("x{i}"))).collect();
        let syn = SyntheticRouting::new(&names, 3);
        let mut seen = HashSet::new();
        for d in 0..names.len() {
            assert_eq!(syn.pool(d).len(), POOL_SIZE);
            for w in syn.pool(d) {
                assert!(seen.insert(w.clone()), "{w} repeated");
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let names: Vec<String> = STANDARD_DOMAINS.iter().map(|s| s.to_string()).collect();
        let syn = SyntheticRouting::new(&names, 1);
        assert_eq!(syn.sample(5, 2), syn.sample(5, 2));
        assert_ne!(syn.sample(5, 2), syn.sample(5, 3));
        assert_eq!(syn.sample(5, 2).len(), 20);
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let data = vec![
            RoutingRecord {
                query: "求 \"导数\"".into(),
                domain: "math".into(),
            },
            RoutingRecord {
                query: "fix\nloop".into(),
                domain: "code".into(),
            },
        ];
        save_dataset(&p, &data).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), data);
        std::fs::write(&p, "{\"query\": 1}\n").unwrap();
        assert!(load_dataset(&p).is_err());
    }
}
