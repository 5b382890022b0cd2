//! C ABI over the stemseg pipeline.
//!
//! Every function returns a [`StemsegStatus`]; on failure a message is kept
//! per thread and can be read with [`stemseg_last_error`]. Handles are
//! opaque and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use stemseg::checkpoint::ParamFile;
use stemseg::classes::StemClass;
use stemseg::metrics::{average_precision, PrCurve};
use stemseg::netarch::{infer, ModelParams, NetworkConfig};
use stemseg::preprocess::{preprocess_image, PreprocessConfig};
use stemseg::stemextract::{argmax_mask, extract_stems, ExtractConfig, ProbabilityMask, StemDetection};
use stemseg::tensor::Tensor;
use stemseg::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StemsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    CorruptFile = 4,
    ConfigMismatch = 5,
    UndefinedMetric = 6,
    Internal = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> StemsegStatus {
    match err {
        Error::Io { .. } | Error::Image { .. } | Error::Dataset { .. } => StemsegStatus::Io,
        Error::CorruptFile(_) => StemsegStatus::CorruptFile,
        Error::ConfigMismatch { .. } => StemsegStatus::ConfigMismatch,
        Error::UndefinedMetric(_) => StemsegStatus::UndefinedMetric,
        _ => StemsegStatus::InvalidArgument,
    }
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (StemsegStatus, String)>) -> StemsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            StemsegStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            StemsegStatus::Internal
        }
    }
}

fn lift(err: Error) -> (StemsegStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (StemsegStatus, String) {
    (StemsegStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> (StemsegStatus, String) {
    (StemsegStatus::InvalidArgument, msg.into())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn stemseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// A loaded network ready for inference.
pub struct StemsegModel {
    net: NetworkConfig,
    params: ModelParams<f32>,
    preprocess: PreprocessConfig,
    extract: ExtractConfig,
}

/// Detections of one image.
pub struct StemsegDetections {
    items: Vec<StemDetection>,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StemsegDetection {
    /// 1 crop, 2 dicot (the stem-mask label).
    pub class_label: u32,
    /// Column, sub-pixel.
    pub x: f64,
    /// Row, sub-pixel.
    pub y: f64,
    pub confidence: f64,
    pub area: u64,
}

/// Load a parameter file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stemseg_model_load(path: *const c_char, out: *mut *mut StemsegModel) -> StemsegStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let file = ParamFile::<f32>::read(Path::new(path)).map_err(lift)?;
        let net = file.config.clone();
        let preprocess = file
            .metadata
            .get("train_config")
            .and_then(|c| c.get("preprocess"))
            .and_then(|p| serde_json::from_value(p.clone()).ok())
            .unwrap_or_default();
        let params = file.into_params(&net).map_err(lift)?;
        let model = Box::new(StemsegModel {
            net,
            params,
            preprocess,
            extract: ExtractConfig::default(),
        });
        *out = Box::into_raw(model);
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`stemseg_model_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn stemseg_model_free(model: *mut StemsegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of input channels the model expects (3 RGB, 4 RGB + NIR), or 0
/// for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn stemseg_model_input_channels(model: *const StemsegModel) -> u32 {
    model.as_ref().map_or(0, |m| m.net.input_channels as u32)
}

/// Run the model on one image of interleaved 8-bit pixels (`height` rows of
/// `width * channels` bytes). Writes a detections handle to `out`, and the
/// per-pixel plant labels to `plant_labels` (`width * height` bytes) unless
/// it is null.
///
/// # Safety
/// `pixels` must point to `width * height * channels` bytes; `plant_labels`
/// to `width * height` writable bytes or null.
#[no_mangle]
pub unsafe extern "C" fn stemseg_model_infer(
    model: *const StemsegModel,
    pixels: *const u8,
    width: u32,
    height: u32,
    channels: u32,
    out: *mut *mut StemsegDetections,
    plant_labels: *mut u8,
) -> StemsegStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let (w, h, c) = (width as usize, height as usize, channels as usize);
        if c != model.net.input_channels {
            return Err(invalid(format!("model expects {} channels, got {c}", model.net.input_channels)));
        }
        let plane = w * h;
        let bytes = std::slice::from_raw_parts(pixels, plane * c);
        let image = Tensor::new([c, h, w], (0..c * plane).map(|i| bytes[(i % plane) * c + i / plane] as f64).collect())
            .map_err(lift)?;
        let input = preprocess_image(&image, &model.preprocess).map_err(lift)?;
        let batch = input.cast::<f32>().reshape([1, c, h, w]).map_err(lift)?;
        let (plant, stem) = infer(&model.params, &model.net, &batch).map_err(lift)?;
        let stem = ProbabilityMask::from_tensor(&stem.batch_item(0).map_err(lift)?).map_err(lift)?;
        let items = extract_stems(&stem, &model.extract).map_err(lift)?;
        if !plant_labels.is_null() {
            let plant = ProbabilityMask::from_tensor(&plant.batch_item(0).map_err(lift)?).map_err(lift)?;
            std::slice::from_raw_parts_mut(plant_labels, plane).copy_from_slice(argmax_mask(&plant).data());
        }
        *out = Box::into_raw(Box::new(StemsegDetections { items }));
        Ok(())
    })
}

/// Stem extraction on a caller-supplied `[classes, height, width]` array of
/// probabilities (channel-major, class 0 soil, 1 crop, 2 dicot).
///
/// # Safety
/// `probs` must point to `classes * width * height` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn stemseg_extract_stems(
    probs: *const f64,
    classes: u32,
    width: u32,
    height: u32,
    min_area: u32,
    out: *mut *mut StemsegDetections,
) -> StemsegStatus {
    guard(|| {
        if probs.is_null() {
            return Err(null("probs"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let n = classes as usize * width as usize * height as usize;
        let data = std::slice::from_raw_parts(probs, n).to_vec();
        let mask = ProbabilityMask::new(classes as usize, width as usize, height as usize, data).map_err(lift)?;
        let items = extract_stems(
            &mask,
            &ExtractConfig {
                min_area: min_area as usize,
            },
        )
        .map_err(lift)?;
        *out = Box::into_raw(Box::new(StemsegDetections { items }));
        Ok(())
    })
}

/// # Safety
/// `dets` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn stemseg_detections_len(dets: *const StemsegDetections) -> usize {
    dets.as_ref().map_or(0, |d| d.items.len())
}

/// Copy detection `index` (in descending confidence order) into `out`.
///
/// # Safety
/// `dets` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stemseg_detections_get(
    dets: *const StemsegDetections,
    index: usize,
    out: *mut StemsegDetection,
) -> StemsegStatus {
    guard(|| {
        let dets = dets.as_ref().ok_or_else(|| null("dets"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let d = dets
            .items
            .get(index)
            .ok_or_else(|| invalid(format!("index {index} out of range for {} detections", dets.items.len())))?;
        *out = StemsegDetection {
            class_label: match d.class {
                StemClass::Crop => 1,
                StemClass::Dicot => 2,
            },
            x: d.x,
            y: d.y,
            confidence: d.confidence,
            area: d.area as u64,
        };
        Ok(())
    })
}

/// # Safety
/// `dets` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn stemseg_detections_free(dets: *mut StemsegDetections) {
    if !dets.is_null() {
        drop(Box::from_raw(dets));
    }
}

/// Interpolated average precision of a ranking: `tp[i]` is nonzero when the
/// detection at rank `i` is a true positive.
///
/// # Safety
/// `tp` must point to `len` bytes (or be null with `len == 0`); `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn stemseg_average_precision(
    tp: *const u8,
    len: usize,
    num_ground_truth: usize,
    out: *mut f64,
) -> StemsegStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if tp.is_null() && len > 0 {
            return Err(null("tp"));
        }
        let flags: Vec<bool> = if len == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(tp, len).iter().map(|&b| b != 0).collect()
        };
        *out = average_precision(&PrCurve::from_ranked(&flags, num_ground_truth)).map_err(lift)?;
        Ok(())
    })
}
