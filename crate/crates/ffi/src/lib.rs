//! C ABI over `comemo-core`.
//!
//! Every function returns a [`ComemoStatus`]; on failure the message is
//! available from [`comemo_last_error`] on the same thread. Models are opaque
//! handles created by `comemo_model_new` or `comemo_model_load` and released
//! with `comemo_model_free`. Config and task arguments are JSON strings; a
//! null pointer selects the defaults.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use comemo_core::analysis::{average_gates, task_accuracy};
use comemo_core::checkpoint::{load_checkpoint, save_checkpoint};
use comemo_core::decay::decay_bound;
use comemo_core::model::{decode, forward, MemoryBank, ModelConfig, ModelParams, Sampling};
use comemo_core::pos_encoding::{assign_position_ids, rope_inner_product, PositionMap, PositionMode, RopeConfig};
use comemo_core::seqplan::{build_plan, DhrLayout, ImageDetail, ImageId, PlanItem, Prompt, PromptItem};
use comemo_core::tasks::TaskSpec;
use comemo_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComemoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Checkpoint = 4,
    Format = 5,
    Io = 6,
    Diverged = 7,
    Config = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

pub const COMEMO_POSITION_VANILLA: u32 = 0;
pub const COMEMO_POSITION_DHR: u32 = 1;
pub const COMEMO_POSITION_DHR_NC: u32 = 2;

/// Opaque model handle.
pub struct ComemoModel {
    config: ModelConfig,
    params: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(ComemoStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape(_) => ComemoStatus::Shape,
            Error::Argument(_) => ComemoStatus::InvalidArgument,
            Error::Checkpoint { .. } => ComemoStatus::Checkpoint,
            Error::Format(_) => ComemoStatus::Format,
            Error::Diverged { .. } => ComemoStatus::Diverged,
            Error::Config(_) => ComemoStatus::Config,
            Error::Io(_) => ComemoStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: ComemoStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

/// Runs `f`, records any error or panic, and returns its status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ComemoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ComemoStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            ComemoStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(ptr: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if ptr.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map(Some)
        .or_else(|_| fail(ComemoStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn required_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    str_arg(ptr, what)?.map_or_else(|| fail(ComemoStatus::NullPointer, format!("{what} is null")), Ok)
}

unsafe fn model_ref<'a>(model: *const ComemoModel) -> Result<&'a ComemoModel, Failure> {
    model
        .as_ref()
        .map_or_else(|| fail(ComemoStatus::NullPointer, "model handle is null"), Ok)
}

unsafe fn slice_arg<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return fail(ComemoStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn out_arg<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut()
        .map_or_else(|| fail(ComemoStatus::NullPointer, format!("{what} is null")), Ok)
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>, what: &str) -> Result<T, Failure> {
    match text {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).or_else(|e| fail(ComemoStatus::Config, format!("{what}: {e}"))),
    }
}

fn parse_mode(code: u32) -> Result<PositionMode, Failure> {
    match code {
        COMEMO_POSITION_VANILLA => Ok(PositionMode::Vanilla),
        COMEMO_POSITION_DHR => Ok(PositionMode::Dhr),
        COMEMO_POSITION_DHR_NC => Ok(PositionMode::DhrNc),
        other => fail(ComemoStatus::InvalidArgument, format!("unknown position mode {other}")),
    }
}

/// Copies `src` into a caller buffer of `capacity` elements. `out_len`
/// always receives the required length.
unsafe fn write_out<T: Copy>(src: &[T], dst: *mut T, capacity: usize, out_len: *mut usize) -> Result<(), Failure> {
    *out_arg(out_len, "out_len")? = src.len();
    if capacity < src.len() {
        return fail(
            ComemoStatus::BufferTooSmall,
            format!("buffer holds {capacity} elements, {} needed", src.len()),
        );
    }
    if !src.is_empty() {
        if dst.is_null() {
            return fail(ComemoStatus::NullPointer, "output buffer is null");
        }
        std::ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
    Ok(())
}

/// Text-only prompt with sequential position IDs.
fn text_prompt(model: &ComemoModel, tokens: &[u32]) -> Result<(Prompt, PositionMap), Failure> {
    if tokens.is_empty() {
        return fail(ComemoStatus::InvalidArgument, "prompt has no tokens");
    }
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= model.config.vocab_size) {
        return fail(
            ComemoStatus::InvalidArgument,
            format!("token {t} outside the vocabulary"),
        );
    }
    let prompt = Prompt::build(&[PromptItem::Text(tokens.to_vec())], model.config.context_detail)?;
    let posmap = assign_position_ids(&prompt.plan, &prompt.layouts(), PositionMode::Vanilla)?;
    Ok((prompt, posmap))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn comemo_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Static version string.
#[no_mangle]
pub extern "C" fn comemo_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(s) => s,
        Err(_) => panic!("version string"),
    };
    VERSION.as_ptr()
}

/// Creates a freshly initialized model. `config_json` may be null.
///
/// # Safety
/// `config_json` must be null or a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn comemo_model_new(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut ComemoModel,
) -> ComemoStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let config: ModelConfig = parse_json(str_arg(config_json, "config_json")?, "model config")?;
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        *out = Box::into_raw(Box::new(ComemoModel { config, params }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn comemo_model_free(model: *mut ComemoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn comemo_model_load(path: *const c_char, out: *mut *mut ComemoModel) -> ComemoStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let (config, params) = load_checkpoint(Path::new(required_str(path, "path")?))?;
        *out = Box::into_raw(Box::new(ComemoModel { config, params }));
        Ok(())
    })
}

/// Writes the model atomically.
///
/// # Safety
/// `model` must be a live handle and `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn comemo_model_save(model: *const ComemoModel, path: *const c_char) -> ComemoStatus {
    guard(|| {
        let m = model_ref(model)?;
        save_checkpoint(&m.config, &m.params, Path::new(required_str(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn comemo_model_vocab_size(model: *const ComemoModel, out: *mut usize) -> ComemoStatus {
    guard(|| {
        *out_arg(out, "out")? = model_ref(model)?.config.vocab_size;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn comemo_model_num_parameters(model: *const ComemoModel, out: *mut usize) -> ComemoStatus {
    guard(|| {
        *out_arg(out, "out")? = model_ref(model)?.params.num_parameters();
        Ok(())
    })
}

/// Mean `|tanh(attn_gate)|` over mixin layers.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn comemo_model_average_gates(model: *const ComemoModel, out: *mut f64) -> ComemoStatus {
    guard(|| {
        *out_arg(out, "out")? = average_gates(&model_ref(model)?.params);
        Ok(())
    })
}

/// Logits for a text-only prompt, row-major `n_tokens x vocab_size`.
///
/// # Safety
/// `tokens` must hold `n_tokens` values; `logits` must hold `capacity`
/// values; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn comemo_model_forward_text(
    model: *const ComemoModel,
    tokens: *const u32,
    n_tokens: usize,
    logits: *mut f64,
    capacity: usize,
    out_len: *mut usize,
) -> ComemoStatus {
    guard(|| {
        let m = model_ref(model)?;
        let (prompt, posmap) = text_prompt(m, slice_arg(tokens, n_tokens, "tokens")?)?;
        let out = forward(&m.params, &m.config, &prompt, &posmap)?;
        let flat: Vec<f64> = out.iter().copied().collect();
        write_out(&flat, logits, capacity, out_len)
    })
}

/// Greedy continuation of a text-only prompt; writes `steps` tokens.
///
/// # Safety
/// `tokens` must hold `n_tokens` values and `out_tokens` at least `steps`.
#[no_mangle]
pub unsafe extern "C" fn comemo_model_decode_text(
    model: *const ComemoModel,
    tokens: *const u32,
    n_tokens: usize,
    steps: usize,
    out_tokens: *mut u32,
) -> ComemoStatus {
    guard(|| {
        let m = model_ref(model)?;
        let (prompt, posmap) = text_prompt(m, slice_arg(tokens, n_tokens, "tokens")?)?;
        let bank = MemoryBank::build(&m.params, &m.config, &prompt, &posmap)?;
        let generated = decode(&m.params, &m.config, &prompt, &posmap, &bank, steps, Sampling::Greedy)?;
        let mut len = 0;
        write_out(&generated, out_tokens, steps, &mut len)
    })
}

/// Greedy first-token accuracy over `samples` draws of a synthetic task.
///
/// # Safety
/// `model` must be a live handle, `task_json` null or a valid C string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn comemo_model_task_accuracy(
    model: *const ComemoModel,
    task_json: *const c_char,
    position_mode: u32,
    samples: usize,
    seed: u64,
    out: *mut f64,
) -> ComemoStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out_arg(out, "out")?;
        let spec: TaskSpec = parse_json(str_arg(task_json, "task_json")?, "task spec")?;
        spec.validate()?;
        *out = task_accuracy(&m.params, &m.config, parse_mode(position_mode)?, &spec, samples, seed)?;
        Ok(())
    })
}

/// `<R_m q, R_n k>` for head dimension `dim`.
///
/// # Safety
/// `q` and `k` must hold `dim` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn comemo_rope_inner_product(
    q: *const f64,
    k: *const f64,
    dim: usize,
    m: i64,
    n: i64,
    theta_base: f64,
    out: *mut f64,
) -> ComemoStatus {
    guard(|| {
        let cfg = RopeConfig::new(dim, theta_base)?;
        *out_arg(out, "out")? = rope_inner_product(slice_arg(q, dim, "q")?, slice_arg(k, dim, "k")?, m, n, &cfg)?;
        Ok(())
    })
}

/// `|<R_Δ q, k>|` and its summation-by-parts upper bound.
///
/// # Safety
/// `q` and `k` must hold `dim` values; both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn comemo_decay_bound(
    q: *const f64,
    k: *const f64,
    dim: usize,
    delta: f64,
    theta_base: f64,
    out_value: *mut f64,
    out_bound: *mut f64,
) -> ComemoStatus {
    guard(|| {
        let cfg = RopeConfig::new(dim, theta_base)?;
        let (v, b) = decay_bound(slice_arg(q, dim, "q")?, slice_arg(k, dim, "k")?, delta, &cfg)?;
        *out_arg(out_value, "out_value")? = v;
        *out_arg(out_bound, "out_bound")? = b;
        Ok(())
    })
}

/// Position IDs of a single full-detail image preceded by `text_before`
/// text tokens. IDs are written in sequence order: text, tiles, thumbnail.
///
/// # Safety
/// `ids` must hold `capacity` values and `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn comemo_position_ids(
    tile_rows: usize,
    tile_cols: usize,
    tile_patch: usize,
    shuffle_factor: usize,
    text_before: usize,
    position_mode: u32,
    ids: *mut usize,
    capacity: usize,
    out_len: *mut usize,
) -> ComemoStatus {
    guard(|| {
        let mode = parse_mode(position_mode)?;
        let layout = DhrLayout::new(tile_rows, tile_cols, tile_patch, shuffle_factor)?;
        let mut items = vec![];
        if text_before > 0 {
            items.push(PlanItem::Text(text_before));
        }
        items.push(PlanItem::Image(layout));
        let plan = build_plan(&items, ImageDetail::Full)?;
        let layouts = [(ImageId(0), layout)].into_iter().collect();
        let map = assign_position_ids(&plan, &layouts, mode)?;
        write_out(map.ids(), ids, capacity, out_len)
    })
}
