//! C ABI over `blockffn-core`.
//!
//! Every fallible function returns a [`BffnStatus`]; on failure the message is
//! kept per thread and read back with [`bffn_last_error_message`]. Models are
//! opaque [`BffnModel`] handles owned by the caller until
//! [`bffn_model_free`]. Token ids cross the boundary as `uint32_t`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use blockffn::decode::{decode_loop, greedy_decode, DraftPolicyKind, Drafter};
use blockffn::ffn::FfnConfig;
use blockffn::kernel::{build_union_plan, cost_accounting};
use blockffn::metrics::{cls, reuse_ratio, tls, union_sparsity};
use blockffn::train::data::load_split;
use blockffn::train::Checkpoint;
use blockffn::{Error, Tensor2D};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BffnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Contract = 5,
    NonFinite = 6,
    /// Output buffer too small; the required length was still written.
    BufferTooSmall = 7,
    Panic = 8,
}

/// Draft proposer for [`bffn_spec_decode`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BffnDraftPolicy {
    SelfGreedy = 0,
    Ngram = 1,
    Random = 2,
}

impl From<BffnDraftPolicy> for DraftPolicyKind {
    fn from(p: BffnDraftPolicy) -> Self {
        match p {
            BffnDraftPolicy::SelfGreedy => DraftPolicyKind::SelfGreedy,
            BffnDraftPolicy::Ngram => DraftPolicyKind::Ngram,
            BffnDraftPolicy::Random => DraftPolicyKind::Random,
        }
    }
}

/// A loaded checkpoint.
pub struct BffnModel {
    checkpoint: Checkpoint,
}

/// Geometry of a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BffnModelInfo {
    pub vocab_size: usize,
    pub context: usize,
    pub n_layers: usize,
    pub d_h: usize,
    pub d_e: usize,
    pub n_experts: usize,
    pub step: u64,
}

/// Sparsity of one activation matrix. Undefined values are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BffnSparsity {
    pub tls: f64,
    pub cls: f64,
    pub reuse_ratio: f64,
    pub union_sparsity: f64,
}

/// Counted cost of one chunk through the union kernel.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BffnChunkCost {
    pub union_size: usize,
    pub expert_weight_bytes_touched: u64,
    pub dense_expert_weight_bytes: u64,
    pub flops_sparse: u64,
    pub flops_dense: u64,
    pub bytes_ratio: f64,
}

/// Speculative decoding statistics.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BffnDecodeStats {
    pub tokens_generated: usize,
    pub steps: usize,
    /// NaN when no verification step ran.
    pub mean_accepted: f64,
    pub counted_ffn_bytes: u64,
    pub counted_ffn_bytes_dense_equivalent: u64,
    pub dense_ar_bytes_per_token: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(BffnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => BffnStatus::Io,
            Error::Checkpoint(_) => BffnStatus::Checkpoint,
            Error::Contract(_) => BffnStatus::Contract,
            Error::NonFinite(_) | Error::Diverged { .. } => BffnStatus::NonFinite,
            _ => BffnStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(BffnStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(BffnStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BffnStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(Failure(BffnStatus::Panic, format!("panic: {}", msg.unwrap_or_default())))
    });
    match outcome {
        Ok(()) => {
            set_last_error(String::new());
            BffnStatus::Ok
        }
        Err(Failure(status, msg)) => {
            set_last_error(msg);
            status
        }
    }
}

/// # Safety
/// `ptr` must be null or point to `len` readable values.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or valid for writes.
unsafe fn write<T>(ptr: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    ptr.write(value);
    Ok(())
}

/// # Safety
/// `model` must be null or a live handle from [`bffn_model_load`].
unsafe fn model_ref<'a>(model: *const BffnModel) -> Result<&'a BffnModel, Failure> {
    model.as_ref().ok_or_else(|| null("model"))
}

/// # Safety
/// `ptr` must be null or point to `rows · cols` readable floats.
unsafe fn activations(ptr: *const f32, rows: usize, cols: usize) -> Result<Tensor2D<f32>, Failure> {
    if rows == 0 || cols == 0 {
        return Err(invalid("activation matrix must be non-empty"));
    }
    let len = rows.checked_mul(cols).ok_or_else(|| invalid("activation matrix too large"))?;
    let data = slice(ptr, len, "activations")?.to_vec();
    Ok(Tensor2D::from_vec(rows, cols, data)?)
}

fn to_ids(tokens: &[u32]) -> Vec<usize> {
    tokens.iter().map(|&t| t as usize).collect()
}

/// # Safety
/// `out` must hold `cap` writable values; `out_len` must be writable.
unsafe fn emit(tokens: &[usize], out: *mut u32, cap: usize, out_len: *mut usize) -> Result<(), Failure> {
    write(out_len, tokens.len(), "out_len")?;
    if tokens.len() > cap {
        return Err(Failure(
            BffnStatus::BufferTooSmall,
            format!("{} tokens do not fit a buffer of {cap}", tokens.len()),
        ));
    }
    if !tokens.is_empty() {
        if out.is_null() {
            return Err(null("out_tokens"));
        }
        for (i, &t) in tokens.iter().enumerate() {
            out.add(i).write(t as u32);
        }
    }
    Ok(())
}

/// Message of the calling thread's most recent failure; empty after a
/// success. The pointer stays valid until the thread's next call.
#[no_mangle]
pub extern "C" fn bffn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bffn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a `.bffn` checkpoint into a new handle written to `out_model`.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bffn_model_load(path: *const c_char, out_model: *mut *mut BffnModel) -> BffnStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out_model.is_null() {
            return Err(null("out_model"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let checkpoint = Checkpoint::load(Path::new(path))?;
        out_model.write(Box::into_raw(Box::new(BffnModel { checkpoint })));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`bffn_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bffn_model_free(model: *mut BffnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bffn_model_info(model: *const BffnModel, out: *mut BffnModelInfo) -> BffnStatus {
    guard(|| {
        let ck = &model_ref(model)?.checkpoint;
        let c = &ck.model.config;
        let info = BffnModelInfo {
            vocab_size: c.vocab_size,
            context: c.context,
            n_layers: c.n_layers,
            d_h: c.ffn.d_h,
            d_e: c.ffn.d_e,
            n_experts: c.ffn.n_experts,
            step: ck.step,
        };
        write(out, info, "out")
    })
}

/// Plain greedy decoding of `max_tokens` tokens after the prompt.
///
/// `out_len` receives the token count even when the buffer is too small.
///
/// # Safety
/// `model` must be a live handle, `prompt` must hold `prompt_len` values,
/// `out_tokens` must hold `out_cap` values and `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bffn_greedy_decode(
    model: *const BffnModel,
    prompt: *const u32,
    prompt_len: usize,
    max_tokens: usize,
    out_tokens: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
) -> BffnStatus {
    guard(|| {
        let m = &model_ref(model)?.checkpoint.model;
        let prompt = to_ids(slice(prompt, prompt_len, "prompt")?);
        let tokens = greedy_decode(m, &prompt, max_tokens)?;
        emit(&tokens, out_tokens, out_cap, out_len)
    })
}

/// Draft-then-verify decoding with `n` drafts per step. The output equals
/// [`bffn_greedy_decode`] for every policy.
///
/// The n-gram policy builds its table of `ngram_order` from `corpus`, or from
/// the checkpoint's training split when `corpus` is null. `seed` drives the
/// random policy. `stats` may be null.
///
/// # Safety
/// As [`bffn_greedy_decode`]; `corpus` must be null or hold `corpus_len`
/// values; `stats` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn bffn_spec_decode(
    model: *const BffnModel,
    policy: BffnDraftPolicy,
    n: usize,
    ngram_order: usize,
    seed: u64,
    corpus: *const u32,
    corpus_len: usize,
    prompt: *const u32,
    prompt_len: usize,
    max_tokens: usize,
    out_tokens: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
    stats: *mut BffnDecodeStats,
) -> BffnStatus {
    guard(|| {
        let ck = &model_ref(model)?.checkpoint;
        let prompt = to_ids(slice(prompt, prompt_len, "prompt")?);
        let kind = DraftPolicyKind::from(policy);
        let corpus = match (kind, corpus.is_null()) {
            (DraftPolicyKind::Ngram, true) => load_split(&ck.config.data)?.train,
            (DraftPolicyKind::Ngram, false) => to_ids(slice(corpus, corpus_len, "corpus")?),
            _ => Vec::new(),
        };
        let mut drafter = Drafter::new(kind, &corpus, ngram_order, seed)?;
        let out = decode_loop(&ck.model, &mut drafter, &prompt, max_tokens, n)?;
        if !stats.is_null() {
            let st = &out.stats;
            stats.write(BffnDecodeStats {
                tokens_generated: st.tokens_generated,
                steps: st.steps,
                mean_accepted: st.mean_accepted().unwrap_or(f64::NAN),
                counted_ffn_bytes: st.counted_ffn_bytes,
                counted_ffn_bytes_dense_equivalent: st.counted_ffn_bytes_dense_equivalent,
                dense_ar_bytes_per_token: st.dense_ar_bytes_per_token,
            });
        }
        emit(&out.tokens, out_tokens, out_cap, out_len)
    })
}

/// TLS, `CLS_chunk_len`, reuse ratio and union sparsity of a row-major
/// `[rows × cols]` activation matrix. An entry is active when it exceeds
/// `threshold`.
///
/// # Safety
/// `a` must hold `rows · cols` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bffn_sparsity(
    a: *const f32,
    rows: usize,
    cols: usize,
    chunk_len: usize,
    threshold: f64,
    out: *mut BffnSparsity,
) -> BffnStatus {
    guard(|| {
        let a = activations(a, rows, cols)?;
        let s = BffnSparsity {
            tls: tls(&a, threshold)?,
            cls: cls(&a, chunk_len, threshold)?,
            reuse_ratio: if rows < 2 { f64::NAN } else { reuse_ratio(&a, threshold)?.unwrap_or(f64::NAN) },
            union_sparsity: union_sparsity(&a, threshold)?,
        };
        write(out, s, "out")
    })
}

/// Counted bytes and FLOPs of one chunk whose row-major `[rows × cols]`
/// activations select experts of shape `d_h × d_e`; `cols` is the expert
/// count. Nonzero entries are active.
///
/// # Safety
/// `a` must hold `rows · cols` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bffn_chunk_cost(
    a: *const f32,
    rows: usize,
    cols: usize,
    d_h: usize,
    d_e: usize,
    bytes_per_param: usize,
    out: *mut BffnChunkCost,
) -> BffnStatus {
    guard(|| {
        if bytes_per_param == 0 {
            return Err(invalid("bytes_per_param must be positive"));
        }
        let config = FfnConfig::block_ffn(d_h, d_e, cols);
        config.validate()?;
        let plan = build_union_plan(&activations(a, rows, cols)?)?;
        let cost = cost_accounting(&plan, &config, bytes_per_param);
        let c = BffnChunkCost {
            union_size: plan.union_indices.len(),
            expert_weight_bytes_touched: cost.expert_weight_bytes_touched,
            dense_expert_weight_bytes: cost.dense_expert_weight_bytes,
            flops_sparse: cost.flops_sparse,
            flops_dense: cost.flops_dense,
            bytes_ratio: cost.bytes_ratio(),
        };
        write(out, c, "out")
    })
}
