//! C ABI over the d2dmoe toolkit.
//!
//! Every fallible call returns a [`D2dStatus`]; on failure a message is kept
//! per thread and read with [`d2d_last_error`]. Models are opaque handles
//! owned by the caller and released with [`d2d_model_free`]. Panics never
//! cross the boundary.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use d2dmoe::checkpoint::{load_checkpoint, save_checkpoint};
use d2dmoe::cost::{flops_ratio, model_flops, CostParams};
use d2dmoe::harness::{run_pipeline, ExperimentSpec, RunOptions};
use d2dmoe::model::{forward, Capture, DenseModel, TokenBatch, TransformerConfig};
use d2dmoe::moe::set_policy;
use d2dmoe::routing::GatePolicy;
use d2dmoe::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum D2dStatus {
    Ok = 0,
    Io = 1,
    /// Invalid input, configuration or API misuse.
    Invalid = 2,
    Numeric = 3,
    Format = 4,
    NullPointer = 5,
    /// Output buffer too small; the required length is reported.
    BufferTooSmall = 6,
    Panic = 7,
}

/// Opaque model handle.
pub struct D2dModel {
    inner: DenseModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> D2dStatus {
    match e.exit_code() {
        2 => D2dStatus::Invalid,
        3 => D2dStatus::Numeric,
        4 => D2dStatus::Format,
        _ => D2dStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (D2dStatus, String)>) -> D2dStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => D2dStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            D2dStatus::Panic
        }
    }
}

fn lib(e: Error) -> (D2dStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (D2dStatus, String) {
    (D2dStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (D2dStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (D2dStatus::Invalid, format!("{what} is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const D2dModel) -> Result<&'a D2dModel, (D2dStatus, String)> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn model_mut<'a>(m: *mut D2dModel) -> Result<&'a mut D2dModel, (D2dStatus, String)> {
    m.as_mut().ok_or_else(|| null("model"))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn d2d_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn d2d_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a checkpoint. On success `*out` owns a new handle.
#[no_mangle]
pub unsafe extern "C" fn d2d_model_load(path: *const c_char, out: *mut *mut D2dModel) -> D2dStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let m = load_checkpoint(Path::new(path)).map_err(lib)?;
        *out = Box::into_raw(Box::new(D2dModel { inner: m }));
        Ok(())
    })
}

/// Build a freshly initialized dense model from a JSON model config.
#[no_mangle]
pub unsafe extern "C" fn d2d_model_build(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut D2dModel,
) -> D2dStatus {
    guard(|| {
        let js = str_arg(config_json, "config_json")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg: TransformerConfig =
            serde_json::from_str(js).map_err(|e| (D2dStatus::Invalid, format!("config: {e}")))?;
        let m = DenseModel::build(cfg, seed).map_err(lib)?;
        *out = Box::into_raw(Box::new(D2dModel { inner: m }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn d2d_model_save(model: *const D2dModel, path: *const c_char) -> D2dStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = str_arg(path, "path")?;
        save_checkpoint(&m.inner, Path::new(path)).map_err(lib)
    })
}

/// Release a handle. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn d2d_model_free(model: *mut D2dModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Logits per output row: `vocab_size` for the LM head, classes otherwise.
#[no_mangle]
pub unsafe extern "C" fn d2d_model_output_dim(
    model: *const D2dModel,
    out: *mut usize,
) -> D2dStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.inner.config.output_dim();
        Ok(())
    })
}

/// Number of MoE sites in the model.
#[no_mangle]
pub unsafe extern "C" fn d2d_model_moe_sites(model: *const D2dModel, out: *mut usize) -> D2dStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.inner.moe_sites().len();
        Ok(())
    })
}

/// Gate every MoE site with dynamic-k at threshold `tau`.
#[no_mangle]
pub unsafe extern "C" fn d2d_model_set_dynamic_k(model: *mut D2dModel, tau: f64) -> D2dStatus {
    guard(|| {
        let m = model_mut(model)?;
        let mut next = m.inner.clone();
        set_policy(&mut next, GatePolicy::DynamicK { tau }).map_err(lib)?;
        m.inner = next;
        Ok(())
    })
}

/// Gate every MoE site with static top-`k`.
#[no_mangle]
pub unsafe extern "C" fn d2d_model_set_top_k(model: *mut D2dModel, k: usize) -> D2dStatus {
    guard(|| {
        let m = model_mut(model)?;
        let mut next = m.inner.clone();
        set_policy(&mut next, GatePolicy::TopK { k }).map_err(lib)?;
        m.inner = next;
        Ok(())
    })
}

/// Run the model on `batch × seq` token ids. Logits go to `logits_out`
/// (row-major, `rows × output_dim` where rows is `batch·seq` for the LM head
/// and `batch` for the classifier). `*logits_len` carries the buffer
/// capacity in and the written count out. `flops_per_token` may be null.
#[no_mangle]
pub unsafe extern "C" fn d2d_model_forward(
    model: *const D2dModel,
    ids: *const u32,
    batch: usize,
    seq: usize,
    logits_out: *mut f32,
    logits_len: *mut usize,
    flops_per_token: *mut f64,
) -> D2dStatus {
    guard(|| {
        let m = model_ref(model)?;
        if ids.is_null() || logits_len.is_null() {
            return Err(null("ids or logits_len"));
        }
        let n = batch
            .checked_mul(seq)
            .ok_or((D2dStatus::Invalid, "batch x seq overflows".to_string()))?;
        let ids: Vec<usize> = std::slice::from_raw_parts(ids, n)
            .iter()
            .map(|&t| t as usize)
            .collect();
        let tb = TokenBatch::new(batch, seq, ids, vec![0; n]).map_err(lib)?;
        let (logits, _, trace) = forward(&m.inner, &tb, &Capture::none()).map_err(lib)?;
        let need = logits.numel();
        if *logits_len < need || logits_out.is_null() {
            *logits_len = need;
            return Err((
                D2dStatus::BufferTooSmall,
                format!("logits need {need} floats"),
            ));
        }
        std::slice::from_raw_parts_mut(logits_out, need).copy_from_slice(logits.data());
        *logits_len = need;
        if !flops_per_token.is_null() {
            let cost = model_flops(&m.inner, &trace, seq, n as u64).map_err(lib)?;
            *flops_per_token = cost.mean();
        }
        Ok(())
    })
}

/// MoE-to-dense FFN cost ratio for `k` executed experts.
#[no_mangle]
pub unsafe extern "C" fn d2d_flops_ratio(
    d_m: u64,
    e: u64,
    n: u64,
    d_h: u64,
    k: f64,
    out: *mut f64,
) -> D2dStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CostParams::new(d_m, e, n, d_h).map_err(lib)?;
        if !(0.0..=n as f64).contains(&k) {
            return Err((D2dStatus::Invalid, format!("k = {k} outside [0, {n}]")));
        }
        *out = flops_ratio(&p, k);
        Ok(())
    })
}

/// Run a full experiment spec (JSON file) writing results under `out_dir`.
#[no_mangle]
pub unsafe extern "C" fn d2d_run_pipeline(
    spec_path: *const c_char,
    out_dir: *const c_char,
    resume: bool,
) -> D2dStatus {
    guard(|| {
        let spec =
            ExperimentSpec::load(Path::new(str_arg(spec_path, "spec_path")?)).map_err(lib)?;
        let out = str_arg(out_dir, "out_dir")?;
        run_pipeline(&spec, Path::new(out), &RunOptions { resume }).map_err(lib)?;
        Ok(())
    })
}
