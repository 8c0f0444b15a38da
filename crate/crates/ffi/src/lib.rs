//! C ABI over `fgc-core`.
//!
//! Objects cross the boundary as opaque handles (`FgcModel`, `FgcAudio`)
//! owned by the caller and released with the matching `_free` function.
//! Every fallible call returns an `FgcStatus`; on failure the message is
//! available from [`fgc_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fgc_core::conditions::{extract_loudness, ConditionKind, LoudnessConfig, PitchConfig};
use fgc_core::data::EditSpec;
use fgc_core::dsp::{estimate_f0, AudioClip, DEFAULT_SAMPLE_RATE};
use fgc_core::io::{read_wav, resample_linear, write_wav};
use fgc_core::model::{BranchInput, ModelBundle};
use fgc_core::pipeline::{decode_latent, edit_control};
use fgc_core::train::{sample, SampleConfig};
use fgc_core::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FgcStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Bad argument, malformed input data or unreadable file.
    InvalidInput = 2,
    /// The checkpoint does not match this library's model.
    IncompatibleCheckpoint = 3,
    /// A computation produced NaN or infinity.
    NonFinite = 4,
    /// The output buffer is too small; the required length was written.
    BufferTooSmall = 5,
    /// Any other failure, including a caught panic.
    Failure = 6,
}

/// Loaded model checkpoint.
pub struct FgcModel {
    bundle: ModelBundle,
}

/// Mono audio at 44.1 kHz.
pub struct FgcAudio {
    clip: AudioClip,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FgcStatus {
    match e {
        Error::Incompatible(_) | Error::Zip(_) => FgcStatus::IncompatibleCheckpoint,
        Error::NonFinite(_) => FgcStatus::NonFinite,
        Error::InvalidInput(_)
        | Error::InvalidArgument(_)
        | Error::Shape(_)
        | Error::File { .. }
        | Error::Json(_)
        | Error::Wav(_)
        | Error::Format(_) => FgcStatus::InvalidInput,
        _ => FgcStatus::Failure,
    }
}

struct Fail(FgcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(FgcStatus::InvalidInput, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FgcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FgcStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            FgcStatus::Failure
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(FgcStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(FgcStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail(FgcStatus::NullPointer, format!("{what} is null")))
}

/// Copy `data` into a caller buffer, or report the needed length.
unsafe fn fill(data: &[f64], out: *mut f64, capacity: usize, out_len: *mut usize) -> Result<(), Fail> {
    *out_arg(out_len, "out_len")? = data.len();
    if capacity < data.len() {
        return Err(Fail(FgcStatus::BufferTooSmall, format!("buffer holds {capacity} values, need {}", data.len())));
    }
    if !data.is_empty() {
        if out.is_null() {
            return Err(Fail(FgcStatus::NullPointer, "out is null".into()));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
    }
    Ok(())
}

fn sample_config(steps: u32, cfg_scale: f64, seed: u64) -> SampleConfig {
    SampleConfig {
        steps: steps as usize,
        cfg_scale,
        seed,
    }
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn fgc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fgc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fgc_model_load(path: *const c_char, out: *mut *mut FgcModel) -> FgcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let bundle = ModelBundle::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(FgcModel { bundle }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `fgc_model_load` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fgc_model_free(model: *mut FgcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of control and editor branches in the checkpoint; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fgc_model_branch_count(model: *const FgcModel) -> usize {
    model.as_ref().map_or(0, |m| m.bundle.branches().len())
}

/// Sample a clip of `duration` seconds from comma-separated caption labels.
///
/// # Safety
/// `model` must be a live handle, `caption` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn fgc_model_generate(
    model: *const FgcModel,
    caption: *const c_char,
    duration: f64,
    steps: u32,
    cfg_scale: f64,
    seed: u64,
    out: *mut *mut FgcAudio,
) -> FgcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let bundle = &ref_arg(model, "model")?.bundle;
        let labels: Vec<String> = str_arg(caption, "caption")?.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(invalid("duration must be positive"));
        }
        let samples = (duration * f64::from(DEFAULT_SAMPLE_RATE)).round() as usize;
        let text = bundle.text_batch(&[labels], &[false])?;
        let latent = sample(bundle, &text, &[], bundle.codec().frames_for(samples), &sample_config(steps, cfg_scale, seed))?;
        let clip = decode_latent(bundle, &latent, 0, samples)?;
        *out = Box::into_raw(Box::new(FgcAudio { clip }));
        Ok(())
    })
}

/// Apply an instruction "action: label: start: end" with an editor branch.
/// `branch` may be null to pick the editor named after the action, or the only one.
///
/// # Safety
/// `model` and `input` must be live handles, strings NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn fgc_model_edit(
    model: *const FgcModel,
    input: *const FgcAudio,
    spec: *const c_char,
    branch: *const c_char,
    steps: u32,
    cfg_scale: f64,
    seed: u64,
    out: *mut *mut FgcAudio,
) -> FgcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let bundle = &ref_arg(model, "model")?.bundle;
        let clip = &ref_arg(input, "input")?.clip;
        let spec: EditSpec = str_arg(spec, "spec")?.parse()?;
        let editors: Vec<&str> = bundle.branches().iter().filter(|b| b.kind() == ConditionKind::Edit).map(|b| b.name()).collect();
        let name = if branch.is_null() {
            match editors.iter().find(|n| **n == spec.action.as_str()) {
                Some(n) => *n,
                None if editors.len() == 1 => editors[0],
                None => return Err(invalid(format!("ambiguous editor choice among {editors:?}"))),
            }
        } else {
            let b = str_arg(branch, "branch")?;
            editors.iter().copied().find(|n| *n == b).ok_or_else(|| invalid(format!("no editor branch {b:?}")))?
        };
        let control = edit_control(bundle, clip, &spec)?;
        let text = bundle.text_batch(&[Vec::<String>::new()], &[false])?;
        let frames = bundle.codec().frames_for(clip.len());
        let latent = sample(bundle, &text, &[BranchInput::new(name, &control)], frames, &sample_config(steps, cfg_scale, seed))?;
        let edited = decode_latent(bundle, &latent, 0, clip.len())?;
        *out = Box::into_raw(Box::new(FgcAudio { clip: edited }));
        Ok(())
    })
}

/// Wrap `len` samples in `[-1, 1]`; other rates are resampled to 44.1 kHz.
///
/// # Safety
/// `samples` must point to `len` readable doubles and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn fgc_audio_from_samples(samples: *const f64, len: usize, sample_rate: u32, out: *mut *mut FgcAudio) -> FgcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        if samples.is_null() {
            return Err(Fail(FgcStatus::NullPointer, "samples is null".into()));
        }
        if sample_rate == 0 {
            return Err(invalid("sample rate must be positive"));
        }
        let data = std::slice::from_raw_parts(samples, len);
        let data = if sample_rate == DEFAULT_SAMPLE_RATE {
            data.to_vec()
        } else {
            resample_linear(data, sample_rate, DEFAULT_SAMPLE_RATE)
        };
        let clip = AudioClip::new(data, DEFAULT_SAMPLE_RATE)?;
        *out = Box::into_raw(Box::new(FgcAudio { clip }));
        Ok(())
    })
}

/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn fgc_audio_read_wav(path: *const c_char, out: *mut *mut FgcAudio) -> FgcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let clip = read_wav(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(FgcAudio { clip }));
        Ok(())
    })
}

/// # Safety
/// `audio` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fgc_audio_write_wav(audio: *const FgcAudio, path: *const c_char) -> FgcStatus {
    guard(|| {
        let clip = &ref_arg(audio, "audio")?.clip;
        write_wav(Path::new(str_arg(path, "path")?), clip)?;
        Ok(())
    })
}

/// Number of samples; 0 for a null handle.
///
/// # Safety
/// `audio` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fgc_audio_len(audio: *const FgcAudio) -> usize {
    audio.as_ref().map_or(0, |a| a.clip.len())
}

/// Copy the samples into `out`. With a short buffer, returns
/// `BufferTooSmall` and writes the needed length to `out_len`.
///
/// # Safety
/// `audio` must be a live handle, `out` writable for `capacity` doubles, `out_len` valid.
#[no_mangle]
pub unsafe extern "C" fn fgc_audio_samples(audio: *const FgcAudio, out: *mut f64, capacity: usize, out_len: *mut usize) -> FgcStatus {
    guard(|| fill(ref_arg(audio, "audio")?.clip.samples(), out, capacity, out_len))
}

/// # Safety
/// `audio` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fgc_audio_free(audio: *mut FgcAudio) {
    if !audio.is_null() {
        drop(Box::from_raw(audio));
    }
}

/// Smoothed loudness curve in dB with the default settings, one value per frame.
///
/// # Safety
/// As for `fgc_audio_samples`.
#[no_mangle]
pub unsafe extern "C" fn fgc_extract_loudness(audio: *const FgcAudio, out: *mut f64, capacity: usize, out_len: *mut usize) -> FgcStatus {
    guard(|| {
        let curve = extract_loudness(&ref_arg(audio, "audio")?.clip, &LoudnessConfig::default())?;
        fill(&curve.db, out, capacity, out_len)
    })
}

/// Per-frame f0 in Hz with the default pitch settings; unvoiced frames hold 0.
///
/// # Safety
/// As for `fgc_audio_samples`.
#[no_mangle]
pub unsafe extern "C" fn fgc_estimate_f0(audio: *const FgcAudio, out: *mut f64, capacity: usize, out_len: *mut usize) -> FgcStatus {
    guard(|| {
        let cfg = PitchConfig::default();
        let track = estimate_f0(&ref_arg(audio, "audio")?.clip, cfg.frame, cfg.yin)?;
        fill(&track.f0, out, capacity, out_len)
    })
}
