//! C ABI over `mame-core`.
//!
//! Every fallible call returns a [`MameStatus`]; on failure the message is
//! kept per thread and read with [`mame_last_error`]. Handles are opaque and
//! owned by the caller, who releases them with the matching `_free`.
//!
//! Images cross the boundary as row-major `height × width × channels` arrays
//! of `double` in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use mame_core::adaptive::{init_staircase, staircase_update, threshold_estimate, Condition, StaircaseConfig};
use mame_core::adaptive::{StaircaseState, StaircaseStatus, TapStaircase, TrialOutcome, XIs};
use mame_core::analysis::{difference_image, rms_contrast, ssim, to_grayscale, SsimConfig};
use mame_core::features::{gram, FeatureMatrix};
use mame_core::ica::{fit_ica, IcaFitConfig, IcaModel};
use mame_core::synthesis::{synthesize, Direction, OptimConfig, SynthesisSpec};
use mame_core::{Backbone, BackboneConfig, Error, ImageTensor, TapId};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MameStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Io = 4,
    Format = 5,
    Config = 6,
    Dimension = 7,
    Numeric = 8,
    Staircase = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MameTap {
    Early = 0,
    Mid = 1,
    Late = 2,
}

impl From<MameTap> for TapId {
    fn from(t: MameTap) -> Self {
        match t {
            MameTap::Early => TapId::Early,
            MameTap::Mid => TapId::Mid,
            MameTap::Late => TapId::Late,
        }
    }
}

impl From<TapId> for MameTap {
    fn from(t: TapId) -> Self {
        match t {
            TapId::Early => MameTap::Early,
            TapId::Mid => MameTap::Mid,
            TapId::Late => MameTap::Late,
        }
    }
}

pub struct MameBackbone(Backbone);

pub struct MameIcaModel(IcaModel);

pub struct MameStaircase(StaircaseState);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(MameStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => MameStatus::Io,
            Error::Format(_) | Error::WeightsFormat(_) | Error::Json(_) => MameStatus::Format,
            Error::Dimension { .. } | Error::WeightsShape { .. } | Error::Image(_) => MameStatus::Dimension,
            Error::NonFinite { .. } | Error::Diverged { .. } | Error::ZeroNorm | Error::InsufficientRank { .. } => {
                MameStatus::Numeric
            }
            Error::Staircase(_) | Error::InsufficientReversals { .. } => MameStatus::Staircase,
            _ => MameStatus::Config,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(MameStatus::InvalidArgument, message.into())
}

fn null(what: &str) -> Failure {
    Failure(MameStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MameStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MameStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(panic) => {
            let what = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {what}"));
            MameStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn path(ptr: *const c_char) -> Result<PathBuf, Failure> {
    if ptr.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(ptr).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn image(pixels: *const f64, height: usize, width: usize, channels: usize) -> Result<ImageTensor, Failure> {
    let len = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| invalid("image size overflows"))?;
    let data = slice(pixels, len, "pixels")?;
    Ok(ImageTensor::new(height, width, channels, data.to_vec())?)
}

fn write_all(src: &[f64], dst: *mut f64, capacity: usize) -> Result<(), Failure> {
    if dst.is_null() {
        return Err(null("output buffer"));
    }
    if capacity < src.len() {
        return Err(Failure(
            MameStatus::BufferTooSmall,
            format!("output needs {} values, buffer holds {capacity}", src.len()),
        ));
    }
    // SAFETY: caller guarantees `capacity` writable doubles at `dst`.
    unsafe { std::ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len()) };
    Ok(())
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to fit, into `buf`. Returns the buffer size the full message
/// needs, or 0 when there is no error. `buf` may be null to query the size.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mame_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

#[no_mangle]
pub extern "C" fn mame_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mame_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// The 64×64×3 desk backbone with weights drawn from `seed`.
///
/// # Safety
/// `out_handle` must be a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn mame_backbone_new_desk(seed: u64, out_handle: *mut *mut MameBackbone) -> MameStatus {
    guard(|| {
        let slot = out(out_handle, "out_handle")?;
        let backbone = Backbone::new(BackboneConfig::desk_default(seed))?;
        *slot = Box::into_raw(Box::new(MameBackbone(backbone)));
        Ok(())
    })
}

/// The desk backbone with weights read from a weights file.
///
/// # Safety
/// `weights_path` must be a NUL-terminated string; `out_handle` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mame_backbone_load(
    weights_path: *const c_char,
    out_handle: *mut *mut MameBackbone,
) -> MameStatus {
    guard(|| {
        let slot = out(out_handle, "out_handle")?;
        let p = path(weights_path)?;
        let backbone = Backbone::new(BackboneConfig::desk_default(0))?.load_weights(&p)?;
        *slot = Box::into_raw(Box::new(MameBackbone(backbone)));
        Ok(())
    })
}

/// # Safety
/// `backbone` must be a valid handle; `weights_path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mame_backbone_save(backbone: *const MameBackbone, weights_path: *const c_char) -> MameStatus {
    guard(|| {
        let b = borrow(backbone, "backbone")?;
        b.0.export_weights(&path(weights_path)?)?;
        Ok(())
    })
}

/// Input height, width and channel count.
///
/// # Safety
/// `backbone` must be a valid handle and the outputs writable.
#[no_mangle]
pub unsafe extern "C" fn mame_backbone_input_shape(
    backbone: *const MameBackbone,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> MameStatus {
    guard(|| {
        let input = &borrow(backbone, "backbone")?.0.config().input;
        *out(height, "height")? = input.height;
        *out(width, "width")? = input.width;
        *out(channels, "channels")? = input.channels;
        Ok(())
    })
}

/// Packed Gram features of `pixels` at `tap`. `*written` receives the
/// feature length even when the buffer is too small.
///
/// # Safety
/// `pixels` must hold the backbone's input size; `features` must hold
/// `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn mame_gram_features(
    backbone: *const MameBackbone,
    pixels: *const f64,
    tap: MameTap,
    features: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> MameStatus {
    guard(|| {
        let b = &borrow(backbone, "backbone")?.0;
        let written = out(written, "written")?;
        let input = &b.config().input;
        let img = image(pixels, input.height, input.width, input.channels)?;
        let tap = TapId::from(tap);
        let g = gram(&b.forward(&img, &[tap])?[&tap]);
        *written = g.values.len();
        write_all(&g.values, features, capacity)
    })
}

/// # Safety
/// `backbone` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mame_backbone_free(backbone: *mut MameBackbone) {
    if !backbone.is_null() {
        drop(Box::from_raw(backbone));
    }
}

/// Fits FastICA on `rows × cols` row-major features and keeps the `select`
/// components with the largest explained variance.
///
/// # Safety
/// `features` must hold `rows * cols` doubles; `out_handle` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mame_ica_fit(
    features: *const f64,
    rows: usize,
    cols: usize,
    tap: MameTap,
    n_components: usize,
    select: usize,
    seed: u64,
    out_handle: *mut *mut MameIcaModel,
) -> MameStatus {
    guard(|| {
        let slot = out(out_handle, "out_handle")?;
        let len = rows.checked_mul(cols).ok_or_else(|| invalid("feature matrix size overflows"))?;
        let values = slice(features, len, "features")?.to_vec();
        let x = FeatureMatrix {
            tap: tap.into(),
            rows,
            cols,
            values,
            image_ids: (0..rows).map(|i| i.to_string()).collect(),
        };
        let cfg = IcaFitConfig {
            n_components,
            select,
            seed,
            ..Default::default()
        };
        *slot = Box::into_raw(Box::new(MameIcaModel(fit_ica(&x, &cfg)?)));
        Ok(())
    })
}

/// # Safety
/// `model_path` must be NUL-terminated; its metadata sidecar must exist.
#[no_mangle]
pub unsafe extern "C" fn mame_ica_load(model_path: *const c_char, out_handle: *mut *mut MameIcaModel) -> MameStatus {
    guard(|| {
        let slot = out(out_handle, "out_handle")?;
        let model = IcaModel::load(&path(model_path)?)?;
        *slot = Box::into_raw(Box::new(MameIcaModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must be a valid handle; `model_path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mame_ica_save(model: *const MameIcaModel, model_path: *const c_char) -> MameStatus {
    guard(|| {
        borrow(model, "model")?.0.save(&path(model_path)?)?;
        Ok(())
    })
}

/// Tap the model was fitted on, and the count of selected components.
///
/// # Safety
/// `model` must be a valid handle and the outputs writable.
#[no_mangle]
pub unsafe extern "C" fn mame_ica_info(model: *const MameIcaModel, tap: *mut MameTap, selected: *mut usize) -> MameStatus {
    guard(|| {
        let m = &borrow(model, "model")?.0;
        *out(tap, "tap")? = m.tap.into();
        *out(selected, "selected")? = m.selected.len();
        Ok(())
    })
}

/// Values of the selected components for `pixels`, in selection order.
///
/// # Safety
/// `pixels` must hold the backbone's input size; `values` must hold
/// `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn mame_ica_components(
    backbone: *const MameBackbone,
    model: *const MameIcaModel,
    pixels: *const f64,
    values: *mut f64,
    capacity: usize,
) -> MameStatus {
    guard(|| {
        let b = &borrow(backbone, "backbone")?.0;
        let m = &borrow(model, "model")?.0;
        let input = &b.config().input;
        let img = image(pixels, input.height, input.width, input.channels)?;
        let g = gram(&b.forward(&img, &[m.tap])?[&m.tap]);
        let y = m.transform_components(&g.values, &m.selected)?;
        write_all(&y, values, capacity)
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mame_ica_free(model: *mut MameIcaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MameSynthesisOptions {
    pub learning_rate: f64,
    pub iterations: usize,
    pub stop_loss: f64,
    /// Seconds; zero or negative means no limit.
    pub time_budget: f64,
}

/// Default optimizer settings.
#[no_mangle]
pub extern "C" fn mame_synthesis_defaults() -> MameSynthesisOptions {
    let d = OptimConfig::default();
    MameSynthesisOptions {
        learning_rate: d.learning_rate,
        iterations: d.iterations,
        stop_loss: d.stop_loss,
        time_budget: d.time_budget.unwrap_or(0.0),
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MameSynthesisReport {
    pub final_loss: f64,
    pub iterations: usize,
    pub elapsed: f64,
    pub converged: bool,
}

/// Moves selected component `component` of `reference` by `direction · target`
/// (`direction` is +1 or −1) and writes the synthesized image to `result`.
///
/// # Safety
/// `reference` and `result` must each hold the backbone's input size;
/// `options` may be null for defaults; `report` may be null.
#[no_mangle]
pub unsafe extern "C" fn mame_synthesize(
    backbone: *const MameBackbone,
    model: *const MameIcaModel,
    reference: *const f64,
    component: usize,
    direction: i32,
    target: f64,
    options: *const MameSynthesisOptions,
    result: *mut f64,
    capacity: usize,
    report: *mut MameSynthesisReport,
) -> MameStatus {
    guard(|| {
        let b = &borrow(backbone, "backbone")?.0;
        let m = &borrow(model, "model")?.0;
        let input = &b.config().input;
        let img = image(reference, input.height, input.width, input.channels)?;
        let direction = match direction {
            1 => Direction::Positive,
            -1 => Direction::Negative,
            d => return Err(invalid(format!("direction must be +1 or -1, got {d}"))),
        };
        let mut optim = OptimConfig::default();
        if let Some(o) = options.as_ref() {
            optim.learning_rate = o.learning_rate;
            optim.iterations = o.iterations;
            optim.stop_loss = o.stop_loss;
            optim.time_budget = (o.time_budget > 0.0).then_some(o.time_budget);
        }
        let spec = SynthesisSpec {
            tap: m.tap,
            component,
            direction,
            target,
        };
        let r = synthesize(b, m, &img, &spec, &optim)?;
        write_all(r.image.data(), result, capacity)?;
        if let Some(rep) = report.as_mut() {
            *rep = MameSynthesisReport {
                final_loss: r.final_loss,
                iterations: r.loss_trace.len(),
                elapsed: r.elapsed,
                converged: r.converged,
            };
        }
        Ok(())
    })
}

/// A 2-up-1-down staircase. `initial` NaN starts at the midpoint of
/// `[range_min, range_max]`.
///
/// # Safety
/// `out_handle` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mame_staircase_new(
    step: f64,
    range_min: f64,
    range_max: f64,
    initial: f64,
    reversal_quota: usize,
    out_handle: *mut *mut MameStaircase,
) -> MameStatus {
    guard(|| {
        let slot = out(out_handle, "out_handle")?;
        let tap = TapStaircase {
            step,
            search_range: [range_min, range_max],
            initial: (!initial.is_nan()).then_some(initial),
        };
        let config = StaircaseConfig {
            taps: [(TapId::Early, tap)].into(),
            reversal_quota,
        };
        let condition = Condition {
            tap: TapId::Early,
            component: 0,
            direction: Direction::Positive,
            eccentricity_deg: 4,
        };
        *slot = Box::into_raw(Box::new(MameStaircase(init_staircase(condition, &config)?)));
        Ok(())
    })
}

/// Records one trial. Gaze-invalid trials only increase the trial count.
///
/// # Safety
/// `staircase` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn mame_staircase_update(staircase: *mut MameStaircase, correct: bool, gaze_valid: bool) -> MameStatus {
    guard(|| {
        let s = out(staircase, "staircase")?;
        let outcome = TrialOutcome {
            response: XIs::A,
            correct,
            gaze_valid,
            client_timings: None,
        };
        s.0 = staircase_update(&s.0, &outcome)?;
        Ok(())
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MameStaircaseState {
    pub current_target: f64,
    pub trial_count: usize,
    pub reversal_count: usize,
    pub converged: bool,
}

/// # Safety
/// `staircase` must be a valid handle and `state` writable.
#[no_mangle]
pub unsafe extern "C" fn mame_staircase_state(staircase: *const MameStaircase, state: *mut MameStaircaseState) -> MameStatus {
    guard(|| {
        let s = &borrow(staircase, "staircase")?.0;
        *out(state, "state")? = MameStaircaseState {
            current_target: s.current_target,
            trial_count: s.trial_count,
            reversal_count: s.reversals.len(),
            converged: s.status == StaircaseStatus::Converged,
        };
        Ok(())
    })
}

/// Mean of the last quota reversals.
///
/// # Safety
/// `staircase` must be a valid handle and `threshold` writable.
#[no_mangle]
pub unsafe extern "C" fn mame_staircase_threshold(staircase: *const MameStaircase, threshold: *mut f64) -> MameStatus {
    guard(|| {
        let s = &borrow(staircase, "staircase")?.0;
        *out(threshold, "threshold")? = threshold_estimate(s)?;
        Ok(())
    })
}

/// # Safety
/// `staircase` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mame_staircase_free(staircase: *mut MameStaircase) {
    if !staircase.is_null() {
        drop(Box::from_raw(staircase));
    }
}

/// RMS contrast of the luma difference `perturbed − reference`.
///
/// # Safety
/// Both images must hold `height * width * channels` doubles.
#[no_mangle]
pub unsafe extern "C" fn mame_rms_difference(
    perturbed: *const f64,
    reference: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    value: *mut f64,
) -> MameStatus {
    guard(|| {
        let p = image(perturbed, height, width, channels)?;
        let r = image(reference, height, width, channels)?;
        *out(value, "value")? = rms_contrast(&difference_image(&p, &r)?)?;
        Ok(())
    })
}

/// Mean SSIM of the luma images with the default 11×11 Gaussian window.
///
/// # Safety
/// Both images must hold `height * width * channels` doubles.
#[no_mangle]
pub unsafe extern "C" fn mame_ssim(
    a: *const f64,
    b: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    value: *mut f64,
) -> MameStatus {
    guard(|| {
        let a = to_grayscale(&image(a, height, width, channels)?);
        let b = to_grayscale(&image(b, height, width, channels)?);
        *out(value, "value")? = ssim(&a, &b, &SsimConfig::default())?;
        Ok(())
    })
}
