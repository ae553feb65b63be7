//! C ABI over `deltaswitch`.
//!
//! Conventions:
//! - every fallible call returns a [`DsStatus`]; on failure the message is
//!   kept per thread and read with [`ds_last_error`];
//! - objects are opaque handles created by `*_load`/`*_open` and destroyed by
//!   the matching `*_free` (null is accepted and ignored);
//! - strings are UTF-8 and NUL-terminated; output strings are copied into a
//!   caller buffer and `out_len` always receives the length without the NUL,
//!   so a call with `cap = 0` sizes the buffer.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use deltaswitch::analytics::{compression_ratio, SizeModel};
use deltaswitch::compress::{compressed_size_bytes, deserialize_artifact, ExpertArtifact};
use deltaswitch::infer::DeltaSet;
use deltaswitch::registry::{Registry, RegistryConfig, Residency};
use deltaswitch::router::{render_prompt, standard_options, RouterModel};
use deltaswitch::toylm::ToyLm;
use deltaswitch::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DigestMismatch = 5,
    UnknownExpert = 6,
    BudgetExceeded = 7,
    BufferTooSmall = 8,
    Panic = 9,
    Other = 10,
}

impl From<&Error> for DsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_)
            | Error::DimensionMismatch { .. }
            | Error::TokenOutOfRange { .. }
            | Error::NonFinite(_)
            | Error::EmptyCalibration
            | Error::EmptyDataset => DsStatus::InvalidArgument,
            Error::Io(_) => DsStatus::Io,
            Error::Truncated { .. }
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion(_)
            | Error::Manifest(_)
            | Error::Json(_)
            | Error::CodeOutOfRange { .. }
            | Error::NonPositiveStep { .. } => DsStatus::Format,
            Error::DigestMismatch { .. } => DsStatus::DigestMismatch,
            Error::UnknownExpert(_) | Error::DuplicateExpert(_) => DsStatus::UnknownExpert,
            Error::BudgetExceeded { .. } => DsStatus::BudgetExceeded,
            _ => DsStatus::Other,
        }
    }
}

pub struct DsModel(ToyLm);

pub struct DsArtifact {
    artifact: ExpertArtifact,
    deltas: DeltaSet,
}

pub struct DsRouter(RouterModel);

pub struct DsRegistry(Registry);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DsRegistryStats {
    pub current_bytes: usize,
    pub peak_bytes: usize,
    pub resident_count: usize,
    pub pinned_count: usize,
    pub load_count: u64,
    pub evict_count: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Fail(DsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail((&e).into(), format!("{}: {e}", e.kind()))
    }
}

fn fail(status: DsStatus, msg: impl Into<String>) -> Fail {
    Fail(status, msg.into())
}

/// Runs `f`, records any error or panic and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DsStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("panic inside deltaswitch".into());
            DsStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(fail(DsStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(DsStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| fail(DsStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(DsStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(out: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(fail(DsStatus::NullPointer, format!("{what} is null")));
    }
    out.write(v);
    Ok(())
}

unsafe fn copy_str(s: &str, buf: *mut c_char, cap: usize, out_len: *mut usize) -> Result<(), Fail> {
    if !out_len.is_null() {
        out_len.write(s.len());
    }
    if cap < s.len() + 1 {
        return Err(fail(DsStatus::BufferTooSmall, format!("need {} bytes, buffer holds {cap}", s.len() + 1)));
    }
    if buf.is_null() {
        return Err(fail(DsStatus::NullPointer, "buf is null"));
    }
    std::ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
    buf.add(s.len()).write(0);
    Ok(())
}

unsafe fn copy_tokens(tokens: &[u32], out: *mut u32, cap: usize, out_len: *mut usize) -> Result<(), Fail> {
    if !out_len.is_null() {
        out_len.write(tokens.len());
    }
    if cap < tokens.len() {
        return Err(fail(DsStatus::BufferTooSmall, format!("need {} tokens, buffer holds {cap}", tokens.len())));
    }
    if !tokens.is_empty() {
        if out.is_null() {
            return Err(fail(DsStatus::NullPointer, "out is null"));
        }
        std::ptr::copy_nonoverlapping(tokens.as_ptr(), out, tokens.len());
    }
    Ok(())
}

/// Copies the calling thread's last error message into `buf`. Never
/// replaces the stored message, so it can be retried with a larger buffer.
///
/// # Safety
/// `buf` must be valid for `cap` bytes; `out_len` may be null.
#[no_mangle]
pub unsafe extern "C" fn ds_last_error(buf: *mut c_char, cap: usize, out_len: *mut usize) -> DsStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    match copy_str(&msg, buf, cap, out_len) {
        Ok(()) => DsStatus::Ok,
        Err(Fail(s, _)) => s,
    }
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ds_model_load(path: *const c_char, out: *mut *mut DsModel) -> DsStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        let m = ToyLm::load(Path::new(p))?;
        write_out(out, Box::into_raw(Box::new(DsModel(m))), "out")
    })
}

/// # Safety
/// `model` must come from [`ds_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ds_model_free(model: *mut DsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Hex SHA-256 of the model's weights (64 characters).
///
/// # Safety
/// `model` must be a live handle and `buf` valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn ds_model_digest(model: *const DsModel, buf: *mut c_char, cap: usize, out_len: *mut usize) -> DsStatus {
    guard(|| copy_str(&ref_arg(model, "model")?.0.digest(), buf, cap, out_len))
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ds_model_vocab(model: *const DsModel, out: *mut usize) -> DsStatus {
    guard(|| write_out(out, ref_arg(model, "model")?.0.vocab(), "out"))
}

/// Greedy decode of `max_new` tokens after `prompt`; `out` receives prompt
/// plus continuation. `artifact` may be null to run the bare base.
///
/// # Safety
/// Handles must be live; `prompt` valid for `prompt_len` and `out` for `cap`
/// elements.
#[no_mangle]
pub unsafe extern "C" fn ds_model_greedy_decode(
    model: *const DsModel,
    artifact: *const DsArtifact,
    prompt: *const u32,
    prompt_len: usize,
    max_new: usize,
    out: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> DsStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.0;
        let deltas = artifact.as_ref().map(|a| &a.deltas);
        if let Some(a) = artifact.as_ref() {
            if a.artifact.manifest.base_digest != m.digest() {
                return Err(Error::DigestMismatch {
                    expected: m.digest(),
                    found: a.artifact.manifest.base_digest.clone(),
                }
                .into());
            }
        }
        let tokens = m.greedy_decode(deltas, slice_arg(prompt, prompt_len, "prompt")?, max_new)?;
        copy_tokens(&tokens, out, cap, out_len)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ds_artifact_load(path: *const c_char, out: *mut *mut DsArtifact) -> DsStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        let bytes = std::fs::read(p).map_err(Error::from)?;
        let artifact = deserialize_artifact(&bytes)?;
        let deltas = DeltaSet::from_artifact(&artifact);
        write_out(out, Box::into_raw(Box::new(DsArtifact { artifact, deltas })), "out")
    })
}

/// # Safety
/// `artifact` must come from [`ds_artifact_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ds_artifact_free(artifact: *mut DsArtifact) {
    if !artifact.is_null() {
        drop(Box::from_raw(artifact));
    }
}

/// Exact serialized size in bytes.
///
/// # Safety
/// `artifact` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ds_artifact_size_bytes(artifact: *const DsArtifact, out: *mut usize) -> DsStatus {
    guard(|| write_out(out, compressed_size_bytes(&ref_arg(artifact, "artifact")?.artifact).total, "out"))
}

/// # Safety
/// `artifact` must be a live handle and `buf` valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn ds_artifact_domain(artifact: *const DsArtifact, buf: *mut c_char, cap: usize, out_len: *mut usize) -> DsStatus {
    guard(|| copy_str(&ref_arg(artifact, "artifact")?.artifact.manifest.domain, buf, cap, out_len))
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ds_router_load(path: *const c_char, out: *mut *mut DsRouter) -> DsStatus {
    guard(|| {
        let r = RouterModel::load(Path::new(str_arg(path, "path")?))?;
        write_out(out, Box::into_raw(Box::new(DsRouter(r))), "out")
    })
}

/// # Safety
/// `router` must come from [`ds_router_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ds_router_free(router: *mut DsRouter) {
    if !router.is_null() {
        drop(Box::from_raw(router));
    }
}

/// Classifies `query`; writes the domain name, its label id and the
/// (ordinal) confidence. `out_id` and `out_confidence` may be null.
///
/// # Safety
/// `router` must be live, `query` NUL-terminated and `buf` valid for `cap`.
#[no_mangle]
pub unsafe extern "C" fn ds_router_classify(
    router: *const DsRouter,
    query: *const c_char,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
    out_id: *mut u32,
    out_confidence: *mut f64,
) -> DsStatus {
    guard(|| {
        let c = ref_arg(router, "router")?.0.classify(str_arg(query, "query")?);
        if !out_id.is_null() {
            out_id.write(c.label.id);
        }
        if !out_confidence.is_null() {
            out_confidence.write(c.confidence);
        }
        copy_str(&c.label.name, buf, cap, out_len)
    })
}

/// `m·Ψ / (Ψ + m·Ψ̃ + Φ)`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ds_compression_ratio(psi: f64, psi_tilde: f64, phi: f64, m: u64, out: *mut f64) -> DsStatus {
    guard(|| write_out(out, compression_ratio(&SizeModel::new(psi, psi_tilde, phi, m)?), "out"))
}

/// The multiple-choice routing prompt over the standard domain options.
///
/// # Safety
/// `query` must be NUL-terminated and `buf` valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn ds_render_prompt(query: *const c_char, buf: *mut c_char, cap: usize, out_len: *mut usize) -> DsStatus {
    guard(|| copy_str(&render_prompt(str_arg(query, "query")?, &standard_options())?, buf, cap, out_len))
}

/// Opens (or creates) a registry directory bound to `model`'s digest.
///
/// # Safety
/// `root` must be NUL-terminated, `model` live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ds_registry_open(root: *const c_char, budget_bytes: usize, model: *const DsModel, out: *mut *mut DsRegistry) -> DsStatus {
    guard(|| {
        let root = Path::new(str_arg(root, "root")?);
        std::fs::create_dir_all(root).map_err(Error::from)?;
        let reg = Registry::open(RegistryConfig {
            root: root.to_path_buf(),
            budget_bytes,
            base_digest: ref_arg(model, "model")?.0.digest(),
        })?;
        write_out(out, Box::into_raw(Box::new(DsRegistry(reg))), "out")
    })
}

/// # Safety
/// `registry` must come from [`ds_registry_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ds_registry_free(registry: *mut DsRegistry) {
    if !registry.is_null() {
        drop(Box::from_raw(registry));
    }
}

/// # Safety
/// `registry` must be live; `id` and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ds_registry_register(registry: *const DsRegistry, id: *const c_char, path: *const c_char) -> DsStatus {
    guard(|| {
        let r = &ref_arg(registry, "registry")?.0;
        r.register(str_arg(id, "id")?, Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Pins `id`, loading it and evicting least-recently-used experts as needed.
/// Fails with `BudgetExceeded` when pinned experts leave no room.
///
/// # Safety
/// `registry` must be live and `id` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ds_registry_acquire(registry: *const DsRegistry, id: *const c_char) -> DsStatus {
    guard(|| {
        ref_arg(registry, "registry")?.0.pin(str_arg(id, "id")?)?;
        Ok(())
    })
}

/// # Safety
/// `registry` must be live and `id` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ds_registry_release(registry: *const DsRegistry, id: *const c_char) -> DsStatus {
    guard(|| {
        ref_arg(registry, "registry")?.0.release(str_arg(id, "id")?)?;
        Ok(())
    })
}

/// # Safety
/// `registry` must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ds_registry_stats(registry: *const DsRegistry, out: *mut DsRegistryStats) -> DsStatus {
    guard(|| {
        let s = ref_arg(registry, "registry")?.0.stats();
        let mut st = DsRegistryStats {
            current_bytes: s.current_bytes,
            peak_bytes: s.peak_bytes,
            load_count: s.load_count,
            evict_count: s.evict_count,
            ..DsRegistryStats::default()
        };
        for r in s.experts.values() {
            if let Residency::Resident { pins, .. } = r {
                st.resident_count += 1;
                st.pinned_count += usize::from(*pins > 0);
            }
        }
        write_out(out, st, "out")
    })
}

/// Acquires `id`, greedy-decodes with it and releases it again.
///
/// # Safety
/// Handles must be live, `id` NUL-terminated, `prompt` valid for
/// `prompt_len` and `out` for `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn ds_registry_decode(
    registry: *const DsRegistry,
    model: *const DsModel,
    id: *const c_char,
    prompt: *const u32,
    prompt_len: usize,
    max_new: usize,
    out: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> DsStatus {
    guard(|| {
        let r = &ref_arg(registry, "registry")?.0;
        let m = &ref_arg(model, "model")?.0;
        let prompt = slice_arg(prompt, prompt_len, "prompt")?;
        let lease = r.acquire_blocking(str_arg(id, "id")?)?;
        let tokens = m.greedy_decode(Some(&lease), prompt, max_new)?;
        drop(lease);
        copy_tokens(&tokens, out, cap, out_len)
    })
}
