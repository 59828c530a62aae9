//! C ABI over `cppo-core`.
//!
//! Every fallible call returns a [`CppoStatus`]; on failure the message is
//! available from [`cppo_last_error`] on the same thread. Handles are opaque
//! and owned by the caller until passed to the matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cppo_core::checkpoint;
use cppo_core::cpl::infonce_loss;
use cppo_core::env::{Query, SyntheticImage};
use cppo_core::objective::relative_advantages;
use cppo_core::perception::{entropy, select_topk, EntropyProfile};
use cppo_core::policy::{GridPolicy, PolicyParams, PriorConfig};
use cppo_core::trace_io;
use cppo_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CppoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Numerical = 3,
    Io = 4,
    Format = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// A policy architecture plus its weights.
pub struct CppoPolicy {
    policy: GridPolicy,
    params: PolicyParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> CppoStatus {
    match e {
        Error::Numerical(_) => CppoStatus::Numerical,
        Error::Io(_) => CppoStatus::Io,
        Error::TraceFormat { .. } | Error::Checkpoint { .. } => CppoStatus::Format,
        _ => CppoStatus::InvalidInput,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (CppoStatus, String)>) -> CppoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CppoStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CppoStatus::Panic
        }
    }
}

fn core<T>(r: cppo_core::Result<T>) -> Result<T, (CppoStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (CppoStatus, String) {
    (CppoStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `ptr` must be null or point to `len` readable values.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], (CppoStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or point to `len` writable values.
unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], (CppoStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

/// # Safety
/// `s` must be null or a valid NUL-terminated string.
unsafe fn path_arg<'a>(s: *const c_char) -> Result<&'a Path, (CppoStatus, String)> {
    if s.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(s)
        .to_str()
        .map(Path::new)
        .map_err(|_| (CppoStatus::InvalidInput, "path is not UTF-8".into()))
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cppo_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

fn geometry(width: u32, height: u32, alphabet: u8, max_len: u32) -> Result<GridPolicy, (CppoStatus, String)> {
    if width < 2 || height < 2 || alphabet < 2 || max_len == 0 {
        return Err((CppoStatus::InvalidInput, "grid must be at least 2×2 with alphabet ≥ 2 and max_len ≥ 1".into()));
    }
    Ok(GridPolicy::new(width as usize, height as usize, alphabet, max_len as usize))
}

/// Creates a policy with the format prior as its weights.
///
/// # Safety
/// `out` must be a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn cppo_policy_prior(width: u32, height: u32, alphabet: u8, max_len: u32, out: *mut *mut CppoPolicy) -> CppoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let policy = geometry(width, height, alphabet, max_len)?;
        let params = policy.prior_params(&PriorConfig::default());
        *out = Box::into_raw(Box::new(CppoPolicy { policy, params }));
        Ok(())
    })
}

/// Loads checkpoint weights for a policy of the given geometry.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cppo_policy_load(
    path: *const c_char,
    width: u32,
    height: u32,
    alphabet: u8,
    max_len: u32,
    out: *mut *mut CppoPolicy,
) -> CppoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let policy = geometry(width, height, alphabet, max_len)?;
        let params = core(checkpoint::load(path_arg(path)?))?;
        if params.feature_dim() != policy.layout().dim() || params.vocab_size() != policy.vocab().size() {
            return Err((CppoStatus::InvalidInput, "checkpoint shape does not match the grid geometry".into()));
        }
        *out = Box::into_raw(Box::new(CppoPolicy { policy, params }));
        Ok(())
    })
}

/// # Safety
/// `policy` must be null or a handle from `cppo_policy_*` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cppo_policy_free(policy: *mut CppoPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Vocabulary size, or 0 for a null handle.
///
/// # Safety
/// `policy` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cppo_policy_vocab_size(policy: *const CppoPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.policy.vocab().size())
}

/// Next-token distribution. `query_kind` is 0 = cell lookup (`arg` = column),
/// 1 = row sum, 2 = count equal (`arg` = target value). `cells` and `noise`
/// are row-major with `width·height` entries.
///
/// # Safety
/// Pointers must reference buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn cppo_policy_next_token(
    policy: *const CppoPolicy,
    query_kind: u32,
    row: u32,
    arg: u32,
    cells: *const u8,
    noise: *const u8,
    n_cells: usize,
    prefix: *const u32,
    prefix_len: usize,
    out_probs: *mut f64,
    out_len: usize,
) -> CppoStatus {
    guard(|| {
        let p = policy.as_ref().ok_or_else(|| null("policy"))?;
        let vocab = p.policy.vocab();
        if out_len < vocab.size() {
            return Err((CppoStatus::BufferTooSmall, format!("need {} output slots", vocab.size())));
        }
        let cells = slice(cells, n_cells, "cells")?.to_vec();
        let noise = slice(noise, n_cells, "noise")?.to_vec();
        let prefix: Vec<usize> = slice(prefix, prefix_len, "prefix")?.iter().map(|&t| t as usize).collect();
        if prefix.iter().any(|&t| t >= vocab.size()) {
            return Err((CppoStatus::InvalidInput, "prefix token out of vocabulary".into()));
        }
        let (width, height) = (p.policy.layout().width, p.policy.layout().height);
        if n_cells != width * height {
            return Err((CppoStatus::InvalidInput, format!("expected {} cells, got {n_cells}", width * height)));
        }
        let image = core(SyntheticImage::new(width, height, vocab.alphabet(), cells, noise))?;
        let (row, arg) = (row as usize, arg as usize);
        let query = match query_kind {
            0 => Query::CellLookup { row, col: arg },
            1 => Query::RowSum { row },
            2 => Query::CountEqual { row, target: u8::try_from(arg).map_err(|_| (CppoStatus::InvalidInput, "target out of range".into()))? },
            _ => return Err((CppoStatus::InvalidInput, format!("unknown query kind {query_kind}"))),
        };
        core(query.validate(&image))?;
        let dist = core(p.policy.next_token_distribution(&p.params, &query, &image, &prefix))?;
        slice_mut(out_probs, out_len, "out_probs")?[..dist.len()].copy_from_slice(dist.probs());
        Ok(())
    })
}

/// Group-relative advantages of `n ≥ 2` rewards into `out[n]`.
///
/// # Safety
/// `rewards` and `out` must reference `n` values.
#[no_mangle]
pub unsafe extern "C" fn cppo_relative_advantages(rewards: *const f64, n: usize, out: *mut f64) -> CppoStatus {
    guard(|| {
        let r = slice(rewards, n, "rewards")?;
        let adv = core(relative_advantages(r))?;
        slice_mut(out, n, "out")?.copy_from_slice(&adv.advantages);
        Ok(())
    })
}

/// Two-way InfoNCE loss.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cppo_infonce(sim_pos: f64, sim_neg: f64, tau: f64, out: *mut f64) -> CppoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err((CppoStatus::InvalidInput, format!("temperature {tau} must be positive")));
        }
        *out = infonce_loss(sim_pos, sim_neg, tau);
        Ok(())
    })
}

/// Shannon entropy in nats.
///
/// # Safety
/// `probs` must reference `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cppo_entropy(probs: *const f64, n: usize, out: *mut f64) -> CppoStatus {
    guard(|| {
        let p = slice(probs, n, "probs")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = entropy(p);
        Ok(())
    })
}

/// Top-k selection over entropy shifts; writes a 0/1 mask and the count.
///
/// # Safety
/// `delta_h` and `out_mask` must reference `n` values; `out_count` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cppo_select_topk(delta_h: *const f64, n: usize, k_ratio: f64, out_mask: *mut u8, out_count: *mut usize) -> CppoStatus {
    guard(|| {
        let d = slice(delta_h, n, "delta_h")?;
        if out_count.is_null() {
            return Err(null("out_count"));
        }
        let profile = core(EntropyProfile::from_entropies(vec![0.0; n], d.to_vec()))?;
        let mask = core(select_topk(&profile, k_ratio))?;
        for (o, &b) in slice_mut(out_mask, n, "out_mask")?.iter_mut().zip(&mask.mask) {
            *o = b as u8;
        }
        *out_count = mask.count();
        Ok(())
    })
}

/// Analyzes a trace file; `*out_json` receives a report to release with
/// [`cppo_string_free`].
///
/// # Safety
/// `path` must be NUL-terminated; `out_json` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cppo_analyze_trace(path: *const c_char, k_ratio: f64, tau: f64, seed: u64, out_json: *mut *mut c_char) -> CppoStatus {
    guard(|| {
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let records = core(trace_io::read_trace(path_arg(path)?))?;
        let report = core(trace_io::analyze_trace(&records, k_ratio, tau, seed))?;
        let json = serde_json::to_string(&report).map_err(|e| (CppoStatus::Format, e.to_string()))?;
        *out_json = CString::new(json).map_err(|e| (CppoStatus::Format, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn cppo_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
