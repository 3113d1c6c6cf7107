//! C ABI over the training, adaptation, and evaluation pipeline.
//!
//! Conventions: every fallible function returns a [`DrslStatus`]; zero
//! means success. On failure a thread-local message is stored and can be
//! read with [`drsl_last_error`] until the next failing call on the same
//! thread. String arguments are NUL-terminated UTF-8 paths. The model
//! handle is opaque; free it with [`drsl_model_free`].
//!
//! The C header is generated into `include/drsl.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use drsl::segnet::Model;
use drsl::toyworld::{gen_dataset, Shift, ToySpec};
use drsl::trainer::{self, TrainConfig};
use drsl::types::ImageTensor;

/// Result of every fallible call. `RUNTIME` covers failures inside the
/// pipeline (I/O, bad data, divergence); `USAGE` covers misuse of this
/// API itself (null pointers, malformed strings, bad buffer shapes).
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrslStatus {
    Ok = 0,
    Runtime = 1,
    Usage = 2,
}

/// Opaque trained-model handle.
pub struct DrslModel {
    inner: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: DrslStatus, message: impl std::fmt::Display) -> DrslStatus {
    let text = message.to_string().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(text).expect("NUL bytes stripped");
    });
    status
}

fn runtime_err(e: impl std::fmt::Display) -> DrslStatus {
    fail(DrslStatus::Runtime, e)
}

/// Runs a body with a panic barrier: unwinding must not cross the ABI.
fn guarded(body: impl FnOnce() -> DrslStatus) -> DrslStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "internal panic".into());
            fail(DrslStatus::Runtime, format!("internal panic: {msg}"))
        }
    }
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string valid for the call.
unsafe fn utf8_path(ptr: *const c_char, name: &str) -> Result<PathBuf, DrslStatus> {
    if ptr.is_null() {
        return Err(fail(DrslStatus::Usage, format!("{name} is null")));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => Err(fail(DrslStatus::Usage, format!("{name} is not UTF-8"))),
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, DrslStatus> {
    match path {
        Some(p) => TrainConfig::load(p).map_err(runtime_err),
        None => Ok(TrainConfig::default()),
    }
}

/// Returns the library version as a static string.
#[no_mangle]
pub extern "C" fn drsl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Returns the message of the most recent failure on this thread. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn drsl_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Generates a two-domain dataset (reference appearance shift) under
/// `out_dir`.
///
/// # Safety
/// `out_dir` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn drsl_generate_dataset(
    out_dir: *const c_char,
    image_size: u32,
    num_classes: u32,
    styles_per_class: u32,
    n_source: u32,
    n_target: u32,
    seed: u64,
) -> DrslStatus {
    let out = match utf8_path(out_dir, "out_dir") {
        Ok(p) => p,
        Err(s) => return s,
    };
    guarded(|| {
        let spec = ToySpec {
            image_size: image_size as usize,
            num_classes: num_classes as usize,
            styles_per_class: styles_per_class as usize,
            shift: Shift::reference(),
            seed,
            ..ToySpec::default()
        };
        match gen_dataset(&spec, n_source as usize, n_target as usize, &out) {
            Ok(_) => DrslStatus::Ok,
            Err(e) => runtime_err(e),
        }
    })
}

/// Trains the source-domain model. `config_path` may be null for the
/// default configuration.
///
/// # Safety
/// Non-null arguments must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn drsl_train_source(
    config_path: *const c_char,
    dataset: *const c_char,
    out_dir: *const c_char,
) -> DrslStatus {
    let config = if config_path.is_null() {
        None
    } else {
        match utf8_path(config_path, "config_path") {
            Ok(p) => Some(p),
            Err(s) => return s,
        }
    };
    let dataset = match utf8_path(dataset, "dataset") {
        Ok(p) => p,
        Err(s) => return s,
    };
    let out = match utf8_path(out_dir, "out_dir") {
        Ok(p) => p,
        Err(s) => return s,
    };
    guarded(|| {
        let cfg = match load_config(config.as_deref()) {
            Ok(c) => c,
            Err(s) => return s,
        };
        let manifest = trainer::manifest_path_of(&dataset);
        match trainer::train_source(&cfg, &manifest, &out) {
            Ok(_) => DrslStatus::Ok,
            Err(e) => runtime_err(e),
        }
    })
}

/// Runs the self-training adaptation rounds starting from a source
/// checkpoint. `config_path` may be null for the default configuration.
///
/// # Safety
/// Non-null arguments must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn drsl_adapt(
    config_path: *const c_char,
    checkpoint_dir: *const c_char,
    dataset: *const c_char,
    out_dir: *const c_char,
) -> DrslStatus {
    let config = if config_path.is_null() {
        None
    } else {
        match utf8_path(config_path, "config_path") {
            Ok(p) => Some(p),
            Err(s) => return s,
        }
    };
    let checkpoint = match utf8_path(checkpoint_dir, "checkpoint_dir") {
        Ok(p) => p,
        Err(s) => return s,
    };
    let dataset = match utf8_path(dataset, "dataset") {
        Ok(p) => p,
        Err(s) => return s,
    };
    let out = match utf8_path(out_dir, "out_dir") {
        Ok(p) => p,
        Err(s) => return s,
    };
    guarded(|| {
        let cfg = match load_config(config.as_deref()) {
            Ok(c) => c,
            Err(s) => return s,
        };
        let manifest = trainer::manifest_path_of(&dataset);
        match trainer::adapt(&cfg, &checkpoint, &manifest, &out) {
            Ok(_) => DrslStatus::Ok,
            Err(e) => runtime_err(e),
        }
    })
}

/// Evaluates a checkpoint against the dataset's held-out target labels
/// and writes the mean IoU to `miou_out`.
///
/// # Safety
/// Arguments must be valid; `miou_out` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn drsl_evaluate(
    checkpoint_dir: *const c_char,
    dataset: *const c_char,
    miou_out: *mut f64,
) -> DrslStatus {
    let checkpoint = match utf8_path(checkpoint_dir, "checkpoint_dir") {
        Ok(p) => p,
        Err(s) => return s,
    };
    let dataset = match utf8_path(dataset, "dataset") {
        Ok(p) => p,
        Err(s) => return s,
    };
    if miou_out.is_null() {
        return fail(DrslStatus::Usage, "miou_out is null");
    }
    guarded(|| {
        let model: Model<f32> = match Model::load(&checkpoint) {
            Ok(m) => m,
            Err(e) => return runtime_err(e),
        };
        let manifest_path = trainer::manifest_path_of(&dataset);
        let (_, target, manifest) = match trainer::load_training_data(&manifest_path, None) {
            Ok(t) => t,
            Err(e) => return runtime_err(e),
        };
        let Some(labels) = trainer::try_load_eval_labels(&manifest_path, &manifest) else {
            return runtime_err("target eval labels not found");
        };
        match trainer::eval_miou(&model, &target.images, &labels, manifest.spec.num_classes) {
            Ok(Some(m)) => {
                *miou_out = m;
                DrslStatus::Ok
            }
            Ok(None) => runtime_err("no evaluated classes"),
            Err(e) => runtime_err(e),
        }
    })
}

/// Loads a checkpoint into an opaque model handle. On success the handle
/// is owned by the caller and must be released with `drsl_model_free`.
///
/// # Safety
/// `checkpoint_dir` must be a valid string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn drsl_model_load(
    checkpoint_dir: *const c_char,
    out: *mut *mut DrslModel,
) -> DrslStatus {
    let checkpoint = match utf8_path(checkpoint_dir, "checkpoint_dir") {
        Ok(p) => p,
        Err(s) => return s,
    };
    if out.is_null() {
        return fail(DrslStatus::Usage, "out is null");
    }
    guarded(|| match Model::load(&checkpoint) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(DrslModel { inner }));
            DrslStatus::Ok
        }
        Err(e) => runtime_err(e),
    })
}

/// Releases a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be null or a handle from `drsl_model_load` that has not
/// been freed.
#[no_mangle]
pub unsafe extern "C" fn drsl_model_free(model: *mut DrslModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the model's class count to `out`.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn drsl_model_num_classes(
    model: *const DrslModel,
    out: *mut u32,
) -> DrslStatus {
    if model.is_null() {
        return fail(DrslStatus::Usage, "model is null");
    }
    if out.is_null() {
        return fail(DrslStatus::Usage, "out is null");
    }
    *out = (*model).inner.spec.num_classes as u32;
    DrslStatus::Ok
}

/// Segments one image. `image` is channel-major RGB (3 × height × width
/// floats in [0, 1]); `labels_out` receives height × width class ids.
/// Both spatial dimensions must be multiples of 4 (the encoder stride).
///
/// # Safety
/// `model` must be a live handle; `image` must hold 3*height*width
/// floats; `labels_out` must hold height*width bytes.
#[no_mangle]
pub unsafe extern "C" fn drsl_model_predict(
    model: *const DrslModel,
    image: *const f32,
    height: u32,
    width: u32,
    labels_out: *mut u8,
) -> DrslStatus {
    if model.is_null() {
        return fail(DrslStatus::Usage, "model is null");
    }
    if image.is_null() {
        return fail(DrslStatus::Usage, "image is null");
    }
    if labels_out.is_null() {
        return fail(DrslStatus::Usage, "labels_out is null");
    }
    let (h, w) = (height as usize, width as usize);
    if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
        return fail(
            DrslStatus::Usage,
            format!("dimensions {h}x{w} must be nonzero multiples of 4"),
        );
    }
    let pixels = std::slice::from_raw_parts(image, 3 * h * w);
    let out = std::slice::from_raw_parts_mut(labels_out, h * w);
    guarded(|| {
        let data = ndarray::Array3::from_shape_vec((3, h, w), pixels.to_vec())
            .expect("slice length matches shape");
        let img = match ImageTensor::new(data) {
            Ok(i) => i,
            Err(e) => return runtime_err(e),
        };
        let (labels, _) = trainer::predict(&(*model).inner, &img);
        for (dst, &src) in out.iter_mut().zip(labels.0.iter()) {
            *dst = src;
        }
        DrslStatus::Ok
    })
}
