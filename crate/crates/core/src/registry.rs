//! Expert store: compressed artifacts on disk, loaded on demand into a byte
//! budget with LRU eviction among unpinned residents.
//!
//! Locking: one mutex guards all residency state. Artifact reads and decoding
//! happen outside it into a staging value that is committed under the lock.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Deref;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use crate::compress::{compressed_size_bytes, deserialize_artifact_for_base};
use crate::error::{Error, Result};
use crate::infer::{DeltaSet, ExpertResolver};

pub const MANIFEST_FILE: &str = "registry.json";
pub const ARTIFACT_EXT: &str = "mesw";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryConfig {
    pub root: PathBuf,
    pub budget_bytes: usize,
    pub base_digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertMeta {
    pub id: String,
    pub domain: String,
    pub size_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ManifestFile {
    base_digest: String,
    experts: Vec<ExpertMeta>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Residency {
    Unloaded,
    Resident { bytes: usize, last_use: u64, pins: usize },
}

/// Point-in-time copy of the residency state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidencyState {
    pub experts: BTreeMap<String, Residency>,
    pub current_bytes: usize,
    pub peak_bytes: usize,
    pub load_count: u64,
    pub evict_count: u64,
}

/// One committed operation, in lock order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegistryEvent {
    Acquire { id: String, loaded: bool, evicted: Vec<String> },
    Release { id: String },
}

enum Slot {
    Unloaded,
    Resident {
        set: Arc<DeltaSet>,
        bytes: usize,
        last_use: u64,
        pins: usize,
    },
}

struct Inner {
    metas: BTreeMap<String, ExpertMeta>,
    slots: BTreeMap<String, Slot>,
    tick: u64,
    current: usize,
    peak: usize,
    loads: u64,
    evicts: u64,
    events: Vec<RegistryEvent>,
}

impl Inner {
    fn pinned_bytes(&self) -> usize {
        self.slots
            .values()
            .map(|s| match s {
                Slot::Resident { bytes, pins, .. } if *pins > 0 => *bytes,
                _ => 0,
            })
            .sum()
    }

    fn pin_resident(&mut self, id: &str) -> Option<Arc<DeltaSet>> {
        self.tick += 1;
        let tick = self.tick;
        match self.slots.get_mut(id) {
            Some(Slot::Resident { set, last_use, pins, .. }) => {
                *last_use = tick;
                *pins += 1;
                let set = Arc::clone(set);
                self.events.push(RegistryEvent::Acquire {
                    id: id.to_string(),
                    loaded: false,
                    evicted: vec![],
                });
                Some(set)
            }
            _ => {
                self.tick -= 1;
                None
            }
        }
    }

    /// Unpinned resident with the smallest last-use tick.
    fn lru_victim(&self) -> Option<String> {
        self.slots
            .iter()
            .filter_map(|(id, s)| match s {
                Slot::Resident { last_use, pins: 0, .. } => Some((*last_use, id)),
                _ => None,
            })
            .min()
            .map(|(_, id)| id.clone())
    }

    fn check_fits(&self, size: usize, budget: usize) -> Result<()> {
        let pinned = self.pinned_bytes();
        if pinned + size > budget {
            return Err(Error::BudgetExceeded {
                needed: size,
                available: budget - pinned,
                budget,
            });
        }
        Ok(())
    }

    fn commit_load(&mut self, id: &str, set: Arc<DeltaSet>, size: usize, budget: usize) -> Arc<DeltaSet> {
        let mut evicted = Vec::new();
        while self.current + size > budget {
            let victim = self.lru_victim().expect("feasibility checked before evicting");
            if let Some(Slot::Resident { bytes, .. }) = self.slots.insert(victim.clone(), Slot::Unloaded) {
                self.current -= bytes;
            }
            self.evicts += 1;
            evicted.push(victim);
        }
        self.tick += 1;
        self.slots.insert(
            id.to_string(),
            Slot::Resident {
                set: Arc::clone(&set),
                bytes: size,
                last_use: self.tick,
                pins: 1,
            },
        );
        self.current += size;
        self.peak = self.peak.max(self.current);
        self.loads += 1;
        assert!(self.current <= budget, "resident bytes {} exceed budget {budget}", self.current);
        self.events.push(RegistryEvent::Acquire {
            id: id.to_string(),
            loaded: true,
            evicted,
        });
        set
    }
}

pub struct Registry {
    config: RegistryConfig,
    inner: Mutex<Inner>,
    unpinned: Condvar,
}

impl std::fmt::Debug for Registry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registry").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Registry {
    /// Opens `config.root`, creating it (and an empty manifest) if needed.
    /// An existing manifest must name the same base digest.
    pub fn open(config: RegistryConfig) -> Result<Self> {
        fs::create_dir_all(&config.root)?;
        let path = config.root.join(MANIFEST_FILE);
        let metas = if path.exists() {
            let m: ManifestFile = serde_json::from_slice(&fs::read(&path)?)?;
            if m.base_digest != config.base_digest {
                return Err(Error::DigestMismatch {
                    expected: config.base_digest.clone(),
                    found: m.base_digest,
                });
            }
            m.experts
        } else {
            Vec::new()
        };
        if let Some(big) = metas.iter().find(|m| m.size_bytes > config.budget_bytes) {
            return Err(Error::BudgetExceeded {
                needed: big.size_bytes,
                available: config.budget_bytes,
                budget: config.budget_bytes,
            });
        }
        let reg = Self {
            inner: Mutex::new(Inner {
                slots: metas.iter().map(|m| (m.id.clone(), Slot::Unloaded)).collect(),
                metas: metas.into_iter().map(|m| (m.id.clone(), m)).collect(),
                tick: 0,
                current: 0,
                peak: 0,
                loads: 0,
                evicts: 0,
                events: Vec::new(),
            }),
            config,
            unpinned: Condvar::new(),
        };
        reg.write_manifest(&reg.lock())?;
        Ok(reg)
    }

    pub fn config(&self) -> &RegistryConfig {
        &self.config
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn artifact_path(&self, id: &str) -> PathBuf {
        self.config.root.join(format!("{id}.{ARTIFACT_EXT}"))
    }

    fn write_manifest(&self, inner: &Inner) -> Result<()> {
        let m = ManifestFile {
            base_digest: self.config.base_digest.clone(),
            experts: inner.metas.values().cloned().collect(),
        };
        fs::write(self.config.root.join(MANIFEST_FILE), serde_json::to_vec_pretty(&m)?)?;
        Ok(())
    }

    /// Validates the artifact at `path` against the base, copies it to
    /// `<root>/<id>.mesw` and lists it as unloaded.
    pub fn register(&self, id: &str, path: &Path) -> Result<ExpertMeta> {
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(Error::InvalidArgument(format!("expert id {id:?} must be non-empty [A-Za-z0-9_-]")));
        }
        let bytes = fs::read(path)?;
        let artifact = deserialize_artifact_for_base(&bytes, &self.config.base_digest)?;
        let size = compressed_size_bytes(&artifact).total;
        if size > self.config.budget_bytes {
            return Err(Error::BudgetExceeded {
                needed: size,
                available: self.config.budget_bytes,
                budget: self.config.budget_bytes,
            });
        }
        let meta = ExpertMeta {
            id: id.to_string(),
            domain: artifact.manifest.domain.clone(),
            size_bytes: size,
        };
        let mut inner = self.lock();
        if inner.metas.contains_key(id) {
            return Err(Error::DuplicateExpert(id.to_string()));
        }
        let dest = self.artifact_path(id);
        if fs::canonicalize(path).ok() != fs::canonicalize(&dest).ok() {
            fs::write(&dest, &bytes)?;
        }
        inner.metas.insert(id.to_string(), meta.clone());
        inner.slots.insert(id.to_string(), Slot::Unloaded);
        self.write_manifest(&inner)?;
        Ok(meta)
    }

    pub fn experts(&self) -> Vec<ExpertMeta> {
        self.lock().metas.values().cloned().collect()
    }

    pub fn meta(&self, id: &str) -> Option<ExpertMeta> {
        self.lock().metas.get(id).cloned()
    }

    /// Pins `id`, loading it first if needed. Fails with `BudgetExceeded`
    /// (state unchanged) when it cannot fit even after evicting every
    /// unpinned resident. Pair with [`Registry::release`].
    pub fn pin(&self, id: &str) -> Result<Arc<DeltaSet>> {
        self.pin_inner(id, false)
    }

    /// As [`Registry::pin`], but waits for other pins to be released instead
    /// of failing when pinned experts block the load.
    pub fn pin_blocking(&self, id: &str) -> Result<Arc<DeltaSet>> {
        self.pin_inner(id, true)
    }

    fn pin_inner(&self, id: &str, wait: bool) -> Result<Arc<DeltaSet>> {
        let size = {
            let mut inner = self.lock();
            let size = inner.metas.get(id).ok_or_else(|| Error::UnknownExpert(id.to_string()))?.size_bytes;
            if let Some(set) = inner.pin_resident(id) {
                return Ok(set);
            }
            if !wait {
                inner.check_fits(size, self.config.budget_bytes)?;
            }
            size
        };
        let staged = Arc::new(self.stage(id)?);
        let mut inner = self.lock();
        loop {
            if let Some(set) = inner.pin_resident(id) {
                return Ok(set);
            }
            match inner.check_fits(size, self.config.budget_bytes) {
                Ok(()) => return Ok(inner.commit_load(id, staged, size, self.config.budget_bytes)),
                Err(e) if !wait => return Err(e),
                Err(_) => inner = self.unpinned.wait(inner).unwrap_or_else(|e| e.into_inner()),
            }
        }
    }

    fn stage(&self, id: &str) -> Result<DeltaSet> {
        let bytes = fs::read(self.artifact_path(id))?;
        let artifact = deserialize_artifact_for_base(&bytes, &self.config.base_digest)?;
        Ok(DeltaSet::from_artifact(&artifact))
    }

    pub fn release(&self, id: &str) -> Result<()> {
        let mut inner = self.lock();
        match inner.slots.get_mut(id) {
            Some(Slot::Resident { pins, .. }) if *pins > 0 => {
                *pins -= 1;
                inner.events.push(RegistryEvent::Release { id: id.to_string() });
                drop(inner);
                self.unpinned.notify_all();
                Ok(())
            }
            Some(_) => Err(Error::InvalidArgument(format!("expert {id} is not pinned"))),
            None => Err(Error::UnknownExpert(id.to_string())),
        }
    }

    /// Pins `id` and returns a guard that releases it when dropped.
    pub fn acquire(&self, id: &str) -> Result<Lease<'_>> {
        Ok(Lease {
            set: self.pin(id)?,
            registry: self,
            id: id.to_string(),
        })
    }

    pub fn acquire_blocking(&self, id: &str) -> Result<Lease<'_>> {
        Ok(Lease {
            set: self.pin_blocking(id)?,
            registry: self,
            id: id.to_string(),
        })
    }

    pub fn stats(&self) -> ResidencyState {
        let inner = self.lock();
        ResidencyState {
            experts: inner
                .slots
                .iter()
                .map(|(id, s)| {
                    let r = match s {
                        Slot::Unloaded => Residency::Unloaded,
                        Slot::Resident { bytes, last_use, pins, .. } => Residency::Resident {
                            bytes: *bytes,
                            last_use: *last_use,
                            pins: *pins,
                        },
                    };
                    (id.clone(), r)
                })
                .collect(),
            current_bytes: inner.current,
            peak_bytes: inner.peak,
            load_count: inner.loads,
            evict_count: inner.evicts,
        }
    }

    pub fn events(&self) -> Vec<RegistryEvent> {
        self.lock().events.clone()
    }
}

/// A pinned expert; unpins on drop.
pub struct Lease<'a> {
    registry: &'a Registry,
    id: String,
    set: Arc<DeltaSet>,
}

impl Lease<'_> {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn delta_set(&self) -> &Arc<DeltaSet> {
        &self.set
    }
}

impl Deref for Lease<'_> {
    type Target = DeltaSet;

    fn deref(&self) -> &DeltaSet {
        &self.set
    }
}

impl Drop for Lease<'_> {
    fn drop(&mut self) {
        let _ = self.registry.release(&self.id);
    }
}

impl<'a> ExpertResolver for &'a Registry {
    type Guard = Lease<'a>;

    fn resolve(&self, expert: &str) -> Result<Lease<'a>> {
        let registry: &'a Registry = self;
        registry.acquire(expert)
    }
}

/// Sequential LRU model used to replay an event log: given the sizes and the
/// acquire/release order, returns the evictions strict LRU prescribes.
pub fn replay_lru(sizes: &BTreeMap<String, usize>, budget: usize, ops: &[RegistryEvent]) -> Result<Vec<RegistryEvent>> {
    let mut resident: Vec<(String, usize)> = Vec::new(); // (id, pins), most recent last
    let mut used = 0usize;
    let mut out = Vec::with_capacity(ops.len());
    for op in ops {
        match op {
            RegistryEvent::Acquire { id, .. } => {
                if let Some(pos) = resident.iter().position(|(r, _)| r == id) {
                    let mut entry = resident.remove(pos);
                    entry.1 += 1;
                    resident.push(entry);
                    out.push(RegistryEvent::Acquire {
                        id: id.clone(),
                        loaded: false,
                        evicted: vec![],
                    });
                    continue;
                }
                let size = *sizes.get(id).ok_or_else(|| Error::UnknownExpert(id.clone()))?;
                let mut evicted = Vec::new();
                while used + size > budget {
                    let pos = resident.iter().position(|(_, p)| *p == 0).ok_or(Error::BudgetExceeded {
                        needed: size,
                        available: budget - used,
                        budget,
                    })?;
                    let (victim, _) = resident.remove(pos);
                    used -= sizes[&victim];
                    evicted.push(victim);
                }
                used += size;
                resident.push((id.clone(), 1));
                out.push(RegistryEvent::Acquire {
                    id: id.clone(),
                    loaded: true,
                    evicted,
                });
            }
            RegistryEvent::Release { id } => {
                let entry = resident.iter_mut().find(|(r, _)| r == id).ok_or_else(|| Error::UnknownExpert(id.clone()))?;
                entry.1 -= 1;
                out.push(op.clone());
            }
        }
    }
    Ok(out)
}
