//! C ABI over the loss stack.
//!
//! Conventions:
//! - every fallible function returns a [`GeolossStatus`]; on failure
//!   [`geoloss_last_error`] describes it (per thread, valid until the next
//!   call on that thread);
//! - scenes and configurations are opaque handles created by `*_new` /
//!   `*_load` / `*_render` functions and released with the matching `*_free`;
//! - maps are row-major `double` buffers of `width * height` values owned by
//!   the caller;
//! - panics never cross the boundary; they surface as `GEOLOSS_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use geoloss::crossloss::{evaluate, task_weights, LossKind};
use geoloss::grid::{FlowField, ScalarMap};
use geoloss::loss::{LossConfig, LossState};
use geoloss::occlusion::{occlusion_map, range_map};
use geoloss::photometric::direction_weights;
use geoloss::synthworld::{read_scene_dir, render, write_scene_dir, SceneSpec, SceneTruth};
use geoloss::Error;

/// Result of a call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeolossStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DimensionMismatch = 5,
    NonFinite = 6,
    MissingInput = 7,
    Scene = 8,
    Panic = 9,
}

/// Loss selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeolossLoss {
    Op = 0,
    Ap = 1,
    S = 2,
    Total = 3,
}

impl From<GeolossLoss> for LossKind {
    fn from(l: GeolossLoss) -> Self {
        match l {
            GeolossLoss::Op => LossKind::Op,
            GeolossLoss::Ap => LossKind::Ap,
            GeolossLoss::S => LossKind::S,
            GeolossLoss::Total => LossKind::Total,
        }
    }
}

/// A loss evaluation state, with ground truth when rendered.
pub struct GeolossScene {
    state: LossState,
    truth: Option<SceneTruth>,
}

/// Loss weights, threshold and photometric parameters.
pub struct GeolossConfig {
    loss: LossConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> GeolossStatus {
    match e {
        Error::Io { .. } => GeolossStatus::Io,
        Error::Header(_) | Error::Truncated { .. } | Error::Format(_) | Error::NonFiniteFlow { .. } => {
            GeolossStatus::Format
        }
        Error::DimensionMismatch(_) => GeolossStatus::DimensionMismatch,
        Error::NonFinite(_) => GeolossStatus::NonFinite,
        Error::MissingInput(_) => GeolossStatus::MissingInput,
        Error::Scene(_) => GeolossStatus::Scene,
        Error::Contract(_) | Error::Config(_) | Error::LogAtPi => GeolossStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), (GeolossStatus, String)>) -> GeolossStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GeolossStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            GeolossStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (GeolossStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (GeolossStatus, String) {
    (GeolossStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: String) -> (GeolossStatus, String) {
    (GeolossStatus::InvalidArgument, msg)
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (GeolossStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], (GeolossStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_slice<'a>(p: *mut f64, n: usize, what: &str) -> Result<&'a mut [f64], (GeolossStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

fn checked_len(width: usize, height: usize) -> Result<usize, (GeolossStatus, String)> {
    if width == 0 || height == 0 {
        return Err(invalid(format!("empty grid {width}x{height}")));
    }
    width.checked_mul(height).ok_or_else(|| invalid("grid size overflows".into()))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn geoloss_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, a static nul-terminated string.
#[no_mangle]
pub extern "C" fn geoloss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn geoloss_config_new(out: *mut *mut GeolossConfig) -> GeolossStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(GeolossConfig {
            loss: LossConfig::default(),
        }));
        Ok(())
    })
}

/// Configuration from a JSON document with the loss configuration fields;
/// missing fields keep their defaults.
///
/// # Safety
/// `json` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn geoloss_config_from_json(json: *const c_char, out: *mut *mut GeolossConfig) -> GeolossStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_arg(json, "json")?;
        let loss: LossConfig = serde_json::from_str(text)
            .map_err(|e| (GeolossStatus::Format, format!("line {}, column {}: {e}", e.line(), e.column())))?;
        loss.validate().map_err(lib_err)?;
        *out = Box::into_raw(Box::new(GeolossConfig { loss }));
        Ok(())
    })
}

/// Releases a configuration; null is ignored.
///
/// # Safety
/// `config` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn geoloss_config_free(config: *mut GeolossConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Renders a scene from its JSON specification.
///
/// # Safety
/// `spec_json` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn geoloss_scene_render(spec_json: *const c_char, out: *mut *mut GeolossScene) -> GeolossStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_arg(spec_json, "spec_json")?;
        let spec: SceneSpec = serde_json::from_str(text)
            .map_err(|e| (GeolossStatus::Format, format!("line {}, column {}: {e}", e.line(), e.column())))?;
        let truth = render(&spec).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(GeolossScene {
            state: truth.state(),
            truth: Some(truth),
        }));
        Ok(())
    })
}

/// Loads the inputs `loss` needs from a scene directory.
///
/// # Safety
/// `dir` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn geoloss_scene_load(
    dir: *const c_char,
    loss: GeolossLoss,
    out: *mut *mut GeolossScene,
) -> GeolossStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = str_arg(dir, "dir")?;
        let state = read_scene_dir(Path::new(dir), loss.into()).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(GeolossScene { state, truth: None }));
        Ok(())
    })
}

/// Writes a rendered scene into `dir`.
///
/// # Safety
/// `scene` must be a live handle and `dir` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn geoloss_scene_write(scene: *const GeolossScene, dir: *const c_char) -> GeolossStatus {
    guard(|| {
        let scene = scene.as_ref().ok_or_else(|| null("scene"))?;
        let dir = str_arg(dir, "dir")?;
        let truth = scene
            .truth
            .as_ref()
            .ok_or_else(|| invalid("only rendered scenes can be written".into()))?;
        write_scene_dir(truth, Path::new(dir)).map_err(lib_err)?;
        Ok(())
    })
}

/// Image size of a scene.
///
/// # Safety
/// `scene` must be a live handle; `width` and `height` writable.
#[no_mangle]
pub unsafe extern "C" fn geoloss_scene_size(
    scene: *const GeolossScene,
    width: *mut usize,
    height: *mut usize,
) -> GeolossStatus {
    guard(|| {
        let scene = scene.as_ref().ok_or_else(|| null("scene"))?;
        if width.is_null() || height.is_null() {
            return Err(null("width/height"));
        }
        *width = scene.state.width();
        *height = scene.state.height();
        Ok(())
    })
}

/// Releases a scene; null is ignored.
///
/// # Safety
/// `scene` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn geoloss_scene_free(scene: *mut GeolossScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Evaluates `loss` on `scene`. `config` may be null for the defaults;
/// `per_pixel` may be null, otherwise it receives `width * height` values.
///
/// # Safety
/// Handles must be live; `value` writable; `per_pixel` null or holding
/// `width * height` doubles.
#[no_mangle]
pub unsafe extern "C" fn geoloss_eval_loss(
    scene: *const GeolossScene,
    config: *const GeolossConfig,
    loss: GeolossLoss,
    value: *mut f64,
    per_pixel: *mut f64,
) -> GeolossStatus {
    guard(|| {
        let scene = scene.as_ref().ok_or_else(|| null("scene"))?;
        if value.is_null() {
            return Err(null("value"));
        }
        let cfg = config.as_ref().map_or_else(LossConfig::default, |c| c.loss);
        let bundle = evaluate(&scene.state, &cfg, loss.into(), false).map_err(lib_err)?;
        *value = bundle.value;
        if !per_pixel.is_null() {
            let n = bundle.per_pixel.len();
            std::slice::from_raw_parts_mut(per_pixel, n).copy_from_slice(bundle.per_pixel.data());
        }
        Ok(())
    })
}

unsafe fn flow_arg(u: *const f64, v: *const f64, width: usize, height: usize) -> Result<FlowField, (GeolossStatus, String)> {
    let n = checked_len(width, height)?;
    let u = slice_arg(u, n, "u")?;
    let v = slice_arg(v, n, "v")?;
    FlowField::new(width, height, u.to_vec(), v.to_vec()).map_err(lib_err)
}

/// Bilinear splat count `R` of a source-to-target flow given as separate
/// `u` and `v` planes of the source grid, written to `out`
/// (`target_width * target_height` values).
///
/// # Safety
/// `u` and `v` hold `width * height` doubles, `out` holds
/// `target_width * target_height`.
#[no_mangle]
pub unsafe extern "C" fn geoloss_range_map(
    u: *const f64,
    v: *const f64,
    width: usize,
    height: usize,
    target_width: usize,
    target_height: usize,
    out: *mut f64,
) -> GeolossStatus {
    guard(|| {
        let flow = flow_arg(u, v, width, height)?;
        let n = checked_len(target_width, target_height)?;
        let out = out_slice(out, n, "out")?;
        out.copy_from_slice(range_map(&flow, target_width, target_height).data());
        Ok(())
    })
}

/// Occlusion map `min(1, R)` of a source-to-target flow; see
/// [`geoloss_range_map`] for the layout.
///
/// # Safety
/// As for [`geoloss_range_map`].
#[no_mangle]
pub unsafe extern "C" fn geoloss_occlusion_map(
    u: *const f64,
    v: *const f64,
    width: usize,
    height: usize,
    target_width: usize,
    target_height: usize,
    out: *mut f64,
) -> GeolossStatus {
    guard(|| {
        let flow = flow_arg(u, v, width, height)?;
        let n = checked_len(target_width, target_height)?;
        let out = out_slice(out, n, "out")?;
        let occ = occlusion_map(&range_map(&flow, target_width, target_height)).map_err(lib_err)?;
        out.copy_from_slice(occ.as_map().data());
        Ok(())
    })
}

unsafe fn pair_maps(a: *const f64, b: *const f64, n: usize) -> Result<(ScalarMap, ScalarMap), (GeolossStatus, String)> {
    if n == 0 {
        return Err(invalid("empty input".into()));
    }
    let a = ScalarMap::new(n, 1, slice_arg(a, n, "first input")?.to_vec()).map_err(lib_err)?;
    let b = ScalarMap::new(n, 1, slice_arg(b, n, "second input")?.to_vec()).map_err(lib_err)?;
    Ok((a, b))
}

/// Per-pixel softmax direction weights of backward/forward photometric
/// errors, `n` values each.
///
/// # Safety
/// All four buffers hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn geoloss_direction_weights(
    l_bo: *const f64,
    l_fo: *const f64,
    n: usize,
    w_bo: *mut f64,
    w_fo: *mut f64,
) -> GeolossStatus {
    guard(|| {
        let (a, b) = pair_maps(l_bo, l_fo, n)?;
        let (wa, wb) = direction_weights(&a, &b).map_err(lib_err)?;
        out_slice(w_bo, n, "w_bo")?.copy_from_slice(wa.data());
        out_slice(w_fo, n, "w_fo")?.copy_from_slice(wb.data());
        Ok(())
    })
}

/// Binary task weights of a loss pair under the log-odds `threshold`.
///
/// # Safety
/// All four buffers hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn geoloss_task_weights(
    l_o: *const f64,
    l_d: *const f64,
    n: usize,
    threshold: f64,
    w_o: *mut f64,
    w_d: *mut f64,
) -> GeolossStatus {
    guard(|| {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(invalid(format!("threshold must lie in [0, 1], got {threshold}")));
        }
        let (a, b) = pair_maps(l_o, l_d, n)?;
        let (wa, wb) = task_weights(&a, &b, threshold).map_err(lib_err)?;
        out_slice(w_o, n, "w_o")?.copy_from_slice(wa.data());
        out_slice(w_d, n, "w_d")?.copy_from_slice(wb.data());
        Ok(())
    })
}
