//! C ABI for the speech-to-image pipeline.
//!
//! Conventions: an opaque [`StaPipeline`] handle carries the resolved
//! configuration; functions return [`StaStatus`] codes; the last error
//! message is retrievable per thread via [`sta_last_error_message`];
//! strings returned by `*_json` functions are freed with
//! [`sta_string_free`]. The header is generated by cbindgen into
//! `include/sta.h`.

use sta_core::config::PipelineConfig;
use sta_core::data::{generate_corpus, CorpusConfig, Language, SceneSpec};
use sta_core::pipeline::{
    evaluate, retrieval_eval, sample_images, train_stage, CaptionSource, PreparedCorpus, Stage,
};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;

/// Return codes for every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StaStatus {
    Ok = 0,
    /// A required pointer was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8 or failed to parse.
    InvalidArgument = 2,
    /// The operation itself failed; see sta_last_error_message.
    RuntimeError = 3,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(message: &str, code: StaStatus) -> StaStatus {
    set_error(message);
    code
}

unsafe fn arg_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, StaStatus> {
    if ptr.is_null() {
        set_error(&format!("{} is null", name));
        return Err(StaStatus::NullPointer);
    }
    match unsafe { CStr::from_ptr(ptr) }.to_str() {
        Ok(s) => Ok(s),
        Err(_) => {
            set_error(&format!("{} is not valid UTF-8", name));
            Err(StaStatus::InvalidArgument)
        }
    }
}

/// Opaque pipeline handle: resolved config plus directory roots.
pub struct StaPipeline {
    cfg: PipelineConfig,
}

/// Copy the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the number of bytes written
/// including the terminator, or 0 if `buf` is null or `len` is 0.
#[no_mangle]
pub unsafe extern "C" fn sta_last_error_message(buf: *mut c_char, len: usize) -> usize {
    if buf.is_null() || len == 0 {
        return 0;
    }
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        let n = bytes.len().min(len - 1);
        unsafe {
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        n + 1
    })
}

/// Library version as a static string; never freed by the caller.
#[no_mangle]
pub extern "C" fn sta_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Create a pipeline from a config file path, or from built-in defaults
/// when `config_path` is null. Returns null on failure.
///
/// # Safety
/// `config_path` must be null or a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sta_pipeline_new(config_path: *const c_char) -> *mut StaPipeline {
    let cfg = if config_path.is_null() {
        Ok(PipelineConfig::default())
    } else {
        match unsafe { arg_str(config_path, "config_path") } {
            Ok(path) => PipelineConfig::load(std::path::Path::new(path)),
            Err(_) => return std::ptr::null_mut(),
        }
    };
    match cfg {
        Ok(cfg) => Box::into_raw(Box::new(StaPipeline { cfg })),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Create a pipeline from config text in the `section.key = value` format.
///
/// # Safety
/// `config_text` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sta_pipeline_new_from_text(config_text: *const c_char) -> *mut StaPipeline {
    let text = match unsafe { arg_str(config_text, "config_text") } {
        Ok(t) => t,
        Err(_) => return std::ptr::null_mut(),
    };
    match PipelineConfig::parse(text) {
        Ok(cfg) => Box::into_raw(Box::new(StaPipeline { cfg })),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Override the master seed.
///
/// # Safety
/// `pipeline` must be a live handle from a `sta_pipeline_new*` call.
#[no_mangle]
pub unsafe extern "C" fn sta_pipeline_set_seed(pipeline: *mut StaPipeline, seed: u64) -> StaStatus {
    match unsafe { pipeline.as_mut() } {
        Some(p) => {
            p.cfg.seed = seed;
            StaStatus::Ok
        }
        None => fail("pipeline is null", StaStatus::NullPointer),
    }
}

/// Destroy a pipeline handle. Null is a no-op.
///
/// # Safety
/// `pipeline` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sta_pipeline_free(pipeline: *mut StaPipeline) {
    if !pipeline.is_null() {
        drop(unsafe { Box::from_raw(pipeline) });
    }
}

fn pipeline_ref<'a>(pipeline: *const StaPipeline) -> Result<&'a StaPipeline, StaStatus> {
    unsafe { pipeline.as_ref() }.ok_or_else(|| {
        set_error("pipeline is null");
        StaStatus::NullPointer
    })
}

/// Generate the synthetic corpus into the configured corpus directory
/// (or `dir_override` when non-null). `force` clears a non-empty target.
///
/// # Safety
/// Pointer arguments must be null or valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn sta_gen_data(
    pipeline: *const StaPipeline,
    dir_override: *const c_char,
    force: bool,
) -> StaStatus {
    let p = match pipeline_ref(pipeline) {
        Ok(p) => p,
        Err(code) => return code,
    };
    let dir = if dir_override.is_null() {
        PathBuf::from(&p.cfg.corpus_dir)
    } else {
        match unsafe { arg_str(dir_override, "dir_override") } {
            Ok(s) => PathBuf::from(s),
            Err(code) => return code,
        }
    };
    if dir.exists() && dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        if !force {
            return fail(
                &format!("{} is not empty; pass force=true", dir.display()),
                StaStatus::RuntimeError,
            );
        }
        if let Err(e) = std::fs::remove_dir_all(&dir) {
            return fail(&e.to_string(), StaStatus::RuntimeError);
        }
    }
    let corpus_cfg = CorpusConfig {
        n_scenes: p.cfg.corpus_scenes,
        languages: p.cfg.languages(),
        speakers_per_caption: p.cfg.corpus_speakers,
        repeat_factor: p.cfg.corpus_repeat_factor,
        test_fraction: p.cfg.corpus_test_fraction,
        dev_fraction: p.cfg.corpus_dev_fraction,
    };
    match generate_corpus(&corpus_cfg, p.cfg.seed, &dir) {
        Ok(_) => StaStatus::Ok,
        Err(e) => fail(&e.to_string(), StaStatus::RuntimeError),
    }
}

/// Train one stage: "vqvae" | "encoder" | "diffusion" | "eval-classifier".
///
/// # Safety
/// Pointer arguments must be valid per their types.
#[no_mangle]
pub unsafe extern "C" fn sta_train(
    pipeline: *const StaPipeline,
    stage: *const c_char,
    resume: bool,
) -> StaStatus {
    let p = match pipeline_ref(pipeline) {
        Ok(p) => p,
        Err(code) => return code,
    };
    let stage = match unsafe { arg_str(stage, "stage") } {
        Ok(s) => s,
        Err(code) => return code,
    };
    let stage = match Stage::parse(stage) {
        Ok(s) => s,
        Err(e) => return fail(&e.to_string(), StaStatus::InvalidArgument),
    };
    let corpus = match PreparedCorpus::load(std::path::Path::new(&p.cfg.corpus_dir)) {
        Ok(c) => c,
        Err(e) => return fail(&e.to_string(), StaStatus::RuntimeError),
    };
    let run_dir = PathBuf::from(&p.cfg.run_dir);
    match train_stage(&p.cfg, stage, &corpus, &run_dir, resume) {
        Ok(()) => StaStatus::Ok,
        Err(e) => fail(&e.to_string(), StaStatus::RuntimeError),
    }
}

/// Sample `count` images conditioned on a scene caption synthesized on
/// the fly. `scene` uses `shape=...,color=...,size=...,pos=N`; `language`
/// is "a" or "b".
///
/// # Safety
/// Pointer arguments must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn sta_sample_scene(
    pipeline: *const StaPipeline,
    scene: *const c_char,
    language: *const c_char,
    speaker: u32,
    count: usize,
    out_dir: *const c_char,
) -> StaStatus {
    let p = match pipeline_ref(pipeline) {
        Ok(p) => p,
        Err(code) => return code,
    };
    let scene = match unsafe { arg_str(scene, "scene") } {
        Ok(s) => s,
        Err(code) => return code,
    };
    let language = match unsafe { arg_str(language, "language") } {
        Ok(s) => s,
        Err(code) => return code,
    };
    let out_dir = match unsafe { arg_str(out_dir, "out_dir") } {
        Ok(s) => PathBuf::from(s),
        Err(code) => return code,
    };
    let spec = match SceneSpec::parse(scene) {
        Ok(s) => s,
        Err(e) => return fail(&e.to_string(), StaStatus::InvalidArgument),
    };
    let language = match Language::parse(language) {
        Ok(l) => l,
        Err(e) => return fail(&e.to_string(), StaStatus::InvalidArgument),
    };
    let source = CaptionSource::Scene {
        spec,
        language,
        speaker,
    };
    match sample_images(
        &p.cfg,
        &PathBuf::from(&p.cfg.run_dir),
        &source,
        count,
        p.cfg.seed,
        &out_dir,
        false,
    ) {
        Ok(_) => StaStatus::Ok,
        Err(e) => fail(&e.to_string(), StaStatus::RuntimeError),
    }
}

/// Sample `count` images conditioned on a caption file (.stac).
///
/// # Safety
/// Pointer arguments must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn sta_sample_caption(
    pipeline: *const StaPipeline,
    caption_path: *const c_char,
    count: usize,
    out_dir: *const c_char,
) -> StaStatus {
    let p = match pipeline_ref(pipeline) {
        Ok(p) => p,
        Err(code) => return code,
    };
    let caption = match unsafe { arg_str(caption_path, "caption_path") } {
        Ok(s) => PathBuf::from(s),
        Err(code) => return code,
    };
    let out_dir = match unsafe { arg_str(out_dir, "out_dir") } {
        Ok(s) => PathBuf::from(s),
        Err(code) => return code,
    };
    match sample_images(
        &p.cfg,
        &PathBuf::from(&p.cfg.run_dir),
        &CaptionSource::File(caption),
        count,
        p.cfg.seed,
        &out_dir,
        false,
    ) {
        Ok(_) => StaStatus::Ok,
        Err(e) => fail(&e.to_string(), StaStatus::RuntimeError),
    }
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .map(|c| c.into_raw())
        .unwrap_or(std::ptr::null_mut())
}

/// FID / IS / Recall@k report as a JSON string (free with
/// `sta_string_free`); null on failure. `k = 0` uses the configured
/// default cutoff.
///
/// # Safety
/// Pointer arguments must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn sta_evaluate_json(
    pipeline: *const StaPipeline,
    generated_dir: *const c_char,
    reference_dir: *const c_char,
    k: usize,
    allow_mismatch: bool,
) -> *mut c_char {
    let p = match pipeline_ref(pipeline) {
        Ok(p) => p,
        Err(_) => return std::ptr::null_mut(),
    };
    let generated = match unsafe { arg_str(generated_dir, "generated_dir") } {
        Ok(s) => PathBuf::from(s),
        Err(_) => return std::ptr::null_mut(),
    };
    let reference = match unsafe { arg_str(reference_dir, "reference_dir") } {
        Ok(s) => PathBuf::from(s),
        Err(_) => return std::ptr::null_mut(),
    };
    let k = if k == 0 { None } else { Some(k) };
    match evaluate(
        &p.cfg,
        &PathBuf::from(&p.cfg.run_dir),
        &generated,
        &reference,
        k,
        allow_mismatch,
    ) {
        Ok(reports) => match serde_json::to_string_pretty(&reports) {
            Ok(json) => to_c_string(json),
            Err(e) => {
                set_error(&e.to_string());
                std::ptr::null_mut()
            }
        },
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Speech↔image retrieval table as a JSON string (free with
/// `sta_string_free`); null on failure.
///
/// # Safety
/// `pipeline` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sta_retrieval_eval_json(pipeline: *const StaPipeline) -> *mut c_char {
    let p = match pipeline_ref(pipeline) {
        Ok(p) => p,
        Err(_) => return std::ptr::null_mut(),
    };
    let corpus = match PreparedCorpus::load(std::path::Path::new(&p.cfg.corpus_dir)) {
        Ok(c) => c,
        Err(e) => {
            set_error(&e.to_string());
            return std::ptr::null_mut();
        }
    };
    match retrieval_eval(&p.cfg, &corpus, &PathBuf::from(&p.cfg.run_dir), None) {
        Ok(report) => match serde_json::to_string_pretty(&report) {
            Ok(json) => to_c_string(json),
            Err(e) => {
                set_error(&e.to_string());
                std::ptr::null_mut()
            }
        },
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Free a string returned by a `*_json` function. Null is a no-op.
///
/// # Safety
/// `s` must be null or a pointer produced by this library's `*_json`
/// functions, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sta_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
