//! C ABI over the semifreddo library.
//!
//! Objects are opaque handles created by `sf_*_new`/`sf_*_load` style calls
//! and released with the matching `sf_*_free`. Every fallible call returns an
//! [`SfStatus`]; on failure `sf_last_error` describes the problem. Errors are
//! tracked per thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use semifreddo::engine::{forward_pass, Binding, ExecOptions, ModelState, Tensor};
use semifreddo::freezing::{effective_ratio, make_freeze_plan, FreezePlan, FreezeScheme};
use semifreddo::hardware::{self, CostParams};
use semifreddo::io::{load_bundle, save_bundle, WeightBundle};
use semifreddo::quant::{quantize_input, quantized_forward, QGraph, QTensor, QuantParams};
use semifreddo::topology::{build_graph, Core, CoreSet, ExecGraph, NetworkSpec};
use semifreddo::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Unreadable or malformed input data, or a missing file.
    Data = 3,
    /// Topology, shape or numeric contract violated.
    Contract = 4,
    /// The library panicked; the handle involved should be discarded.
    Internal = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfCore {
    Frozen = 0,
    Trainable1 = 1,
    Trainable2 = 2,
}

impl From<SfCore> for Core {
    fn from(c: SfCore) -> Self {
        match c {
            SfCore::Frozen => Core::Frozen,
            SfCore::Trainable1 => Core::Trainable1,
            SfCore::Trainable2 => Core::Trainable2,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfScheme {
    /// Ratio `a` everywhere.
    Uniform = 0,
    /// Linear in depth from `a` down to `b`.
    RampDown = 1,
    /// Linear in depth from `a` up to `b`.
    RampUp = 2,
    /// Frozen core fully frozen; `a` and `b` ignored.
    CorePartition = 3,
}

/// Network description.
pub struct SfSpec {
    spec: NetworkSpec,
}

/// Float weights, freeze plan and the graph they belong to.
pub struct SfModel {
    bundle: WeightBundle,
    graph: ExecGraph,
}

/// Quantized int8 network.
pub struct SfQGraph {
    qgraph: QGraph,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> SfStatus {
    match e.exit_code() {
        2 => SfStatus::InvalidArgument,
        4 => SfStatus::Contract,
        _ => SfStatus::Data,
    }
}

/// Run `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), SfStatus>) -> SfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            SfStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic".into());
            SfStatus::Internal
        }
    }
}

fn fail(e: Error) -> SfStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

fn null(what: &str) -> SfStatus {
    set_error(format!("{what} is null"));
    SfStatus::NullPointer
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, SfStatus> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn borrow_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, SfStatus> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, SfStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        SfStatus::InvalidArgument
    })
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), SfStatus> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn input_tensor(data: *const f32, n: usize, c: usize, h: usize, w: usize) -> Result<Tensor, SfStatus> {
    if data.is_null() {
        return Err(null("input"));
    }
    let len = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| fail(Error::InvalidArgument("input size overflows".into())))?;
    let values = std::slice::from_raw_parts(data, len).to_vec();
    Tensor::from_vec(n, c, h, w, values).map_err(fail)
}

fn binding(head: SfCore, joint: bool) -> Binding {
    Binding {
        head: head.into(),
        joint,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Reference VGA backbone.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn sf_spec_default(out: *mut *mut SfSpec) -> SfStatus {
    guard(|| put(out, SfSpec { spec: NetworkSpec::default_backbone() }))
}

/// Small 32x32 single-channel network with `classes` outputs.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn sf_spec_desk(classes: usize, out: *mut *mut SfSpec) -> SfStatus {
    guard(|| {
        if classes < 2 {
            return Err(fail(Error::InvalidArgument("at least 2 classes".into())));
        }
        put(out, SfSpec { spec: NetworkSpec::desk(classes) })
    })
}

/// Parse a JSON spec.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn sf_spec_from_json(json: *const c_char, out: *mut *mut SfSpec) -> SfStatus {
    guard(|| {
        let spec = NetworkSpec::from_json(text(json, "json")?).map_err(fail)?;
        build_graph(&spec).map_err(fail)?;
        put(out, SfSpec { spec })
    })
}

/// # Safety
/// `spec` must be null or a handle from an `sf_spec_*` constructor that has
/// not been freed.
#[no_mangle]
pub unsafe extern "C" fn sf_spec_free(spec: *mut SfSpec) {
    if !spec.is_null() {
        drop(Box::from_raw(spec));
    }
}

/// SHA-256 topology hash, written to `out[0..32]`.
///
/// # Safety
/// `spec` must be a live handle and `out` must point to 32 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sf_spec_topology_hash(spec: *const SfSpec, out: *mut u8) -> SfStatus {
    guard(|| {
        let spec = borrow(spec, "spec")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let hash = spec.spec.topology_hash();
        ptr::copy_nonoverlapping(hash.0.as_ptr(), out, 32);
        Ok(())
    })
}

/// Conv-weight freezing ratio when the frozen core is fully frozen and the
/// cores in `core_mask` (bit 0 frozen, bit 1 first trainable, bit 2 second)
/// are counted.
///
/// # Safety
/// `spec` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sf_spec_effective_ratio(spec: *const SfSpec, core_mask: u32, out: *mut f64) -> SfStatus {
    guard(|| {
        let spec = borrow(spec, "spec")?;
        let out = borrow_mut(out, "out")?;
        if core_mask == 0 || core_mask > 7 {
            return Err(fail(Error::InvalidArgument(format!("core mask {core_mask} out of range"))));
        }
        let cores: Vec<Core> = Core::ALL.into_iter().filter(|c| core_mask >> c.index() & 1 == 1).collect();
        let graph = build_graph(&spec.spec).map_err(fail)?;
        let plan = make_freeze_plan(&graph, FreezeScheme::CorePartition, 0).map_err(fail)?;
        *out = effective_ratio(&plan, &graph, CoreSet::of(&cores));
        Ok(())
    })
}

/// Frame rate at `width x height` with `repeats` tail passes, using the
/// default clock and reload bandwidth.
///
/// # Safety
/// `spec` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sf_spec_estimate_fps(
    spec: *const SfSpec,
    repeats: usize,
    width: usize,
    height: usize,
    out: *mut f64,
) -> SfStatus {
    guard(|| {
        let spec = borrow(spec, "spec")?;
        let out = borrow_mut(out, "out")?;
        *out = hardware::estimate_fps(&spec.spec, repeats, (width, height), &CostParams::default())
            .map_err(fail)?
            .fps;
        Ok(())
    })
}

/// Freshly initialized weights for `spec`, with nothing frozen.
///
/// # Safety
/// `spec` must be a live handle and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn sf_model_new(spec: *const SfSpec, seed: u64, out: *mut *mut SfModel) -> SfStatus {
    guard(|| {
        let spec = borrow(spec, "spec")?.spec.clone();
        let graph = build_graph(&spec).map_err(fail)?;
        let mut bundle = WeightBundle::new(spec);
        bundle.weights = Some(ModelState::init(&graph, seed));
        bundle.plan = Some(FreezePlan::none(&graph));
        put(out, SfModel { bundle, graph })
    })
}

/// Load a weight bundle. When `spec` is not null the bundle must have been
/// written for that spec.
///
/// # Safety
/// `path` must be a NUL-terminated string, `spec` null or a live handle and
/// `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn sf_model_load(path: *const c_char, spec: *const SfSpec, out: *mut *mut SfModel) -> SfStatus {
    guard(|| {
        let path = text(path, "path")?;
        let expected = spec.as_ref().map(|s| &s.spec);
        let mut bundle = load_bundle(path, expected).map_err(fail)?;
        let graph = build_graph(&bundle.spec).map_err(fail)?;
        let state = bundle.require_weights().map_err(fail)?;
        state.check(&graph).map_err(fail)?;
        if bundle.plan.is_none() {
            bundle.plan = Some(FreezePlan::none(&graph));
        }
        put(out, SfModel { bundle, graph })
    })
}

/// Write the model as a weight bundle.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sf_model_save(model: *const SfModel, path: *const c_char) -> SfStatus {
    guard(|| {
        let model = borrow(model, "model")?;
        save_bundle(text(path, "path")?, &model.bundle).map_err(fail)
    })
}

/// # Safety
/// `model` must be null or a live handle from `sf_model_new`/`sf_model_load`.
#[no_mangle]
pub unsafe extern "C" fn sf_model_free(model: *mut SfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Replace the freeze plan. `a` and `b` are the scheme's ratios.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sf_model_freeze(model: *mut SfModel, scheme: SfScheme, a: f64, b: f64, seed: u64) -> SfStatus {
    guard(|| {
        let model = borrow_mut(model, "model")?;
        let scheme = match scheme {
            SfScheme::Uniform => FreezeScheme::Uniform { rho: a },
            SfScheme::RampDown => FreezeScheme::RampDown { first: a, last: b },
            SfScheme::RampUp => FreezeScheme::RampUp { first: a, last: b },
            SfScheme::CorePartition => FreezeScheme::CorePartition,
        };
        model.bundle.plan = Some(make_freeze_plan(&model.graph, scheme, seed).map_err(fail)?);
        Ok(())
    })
}

/// Frozen fraction of all backbone conv weights under the current plan.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sf_model_effective_ratio(model: *const SfModel, out: *mut f64) -> SfStatus {
    guard(|| {
        let model = borrow(model, "model")?;
        let out = borrow_mut(out, "out")?;
        *out = model.bundle.plan.as_ref().map_or(0.0, |p| p.effective_ratio);
        Ok(())
    })
}

/// Number of class scores per image.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sf_model_num_outputs(model: *const SfModel) -> usize {
    model.as_ref().map_or(0, |m| {
        let s = m.graph.slot_shapes[m.graph.output];
        s.channels * s.height * s.width
    })
}

/// Float inference on `n` images of `c x h x w` (NCHW, row-major). Writes
/// `n * sf_model_num_outputs(model)` scores.
///
/// # Safety
/// `model` must be a live handle, `input` must hold `n*c*h*w` floats and
/// `out` must have room for `out_len` floats.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn sf_model_forward(
    model: *const SfModel,
    input: *const f32,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    head: SfCore,
    joint: bool,
    out: *mut f32,
    out_len: usize,
) -> SfStatus {
    guard(|| {
        let model = borrow(model, "model")?;
        let x = input_tensor(input, n, c, h, w)?;
        let state = model.bundle.require_weights().map_err(fail)?;
        let fwd = forward_pass(&model.graph, state, &x, ExecOptions::eval(binding(head, joint))).map_err(fail)?;
        let y = fwd.output(&model.graph);
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len < y.data.len() {
            return Err(fail(Error::InvalidArgument(format!(
                "output buffer holds {out_len} values, {} needed",
                y.data.len()
            ))));
        }
        ptr::copy_nonoverlapping(y.data.as_ptr(), out, y.data.len());
        Ok(())
    })
}

/// Quantize the model, calibrating activation ranges on `n` images.
///
/// # Safety
/// `model` must be a live handle, `calibration` must hold `n*c*h*w` floats
/// and `out` must be a valid handle slot.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn sf_model_quantize(
    model: *const SfModel,
    calibration: *const f32,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    head: SfCore,
    joint: bool,
    out: *mut *mut SfQGraph,
) -> SfStatus {
    guard(|| {
        let model = borrow(model, "model")?;
        let x = input_tensor(calibration, n, c, h, w)?;
        let state = model.bundle.require_weights().map_err(fail)?;
        let plan = model.bundle.require_plan().map_err(fail)?;
        let qgraph = semifreddo::quant::build_qgraph(&model.graph, state, plan, binding(head, joint), &[x]).map_err(fail)?;
        put(out, SfQGraph { qgraph })
    })
}

/// # Safety
/// `qgraph` must be null or a live handle from `sf_model_quantize`.
#[no_mangle]
pub unsafe extern "C" fn sf_qgraph_free(qgraph: *mut SfQGraph) {
    if !qgraph.is_null() {
        drop(Box::from_raw(qgraph));
    }
}

/// Exponent `e` of the int8 input: pixel values are `q * 2^e`.
///
/// # Safety
/// `qgraph` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sf_qgraph_input_exponent(qgraph: *const SfQGraph, out: *mut i32) -> SfStatus {
    guard(|| {
        let q = borrow(qgraph, "qgraph")?;
        *borrow_mut(out, "out")? = q.qgraph.input_params().exponent;
        Ok(())
    })
}

/// Integer inference on one int8 image of `c x h x w` at exponent
/// `exponent`. Writes the int8 scores and their exponent.
///
/// # Safety
/// `qgraph` must be a live handle, `input` must hold `c*h*w` bytes, `out`
/// must have room for `out_len` bytes and `out_exponent` must be valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn sf_qgraph_infer_int8(
    qgraph: *const SfQGraph,
    input: *const i8,
    c: usize,
    h: usize,
    w: usize,
    exponent: i32,
    out: *mut i8,
    out_len: usize,
    out_exponent: *mut i32,
) -> SfStatus {
    guard(|| {
        let q = borrow(qgraph, "qgraph")?;
        if input.is_null() {
            return Err(null("input"));
        }
        let len = c
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| fail(Error::InvalidArgument("input size overflows".into())))?;
        let x = QTensor {
            shape: semifreddo::topology::TensorShape::new(c, h, w),
            data: std::slice::from_raw_parts(input, len).to_vec(),
            params: QuantParams::new(exponent),
        };
        let y = quantized_forward(&q.qgraph, &x).map_err(fail)?;
        write_int8(&y, out, out_len, out_exponent)
    })
}

/// Quantize one float image with the graph's input exponent and run integer
/// inference. Writes dequantized scores.
///
/// # Safety
/// `qgraph` must be a live handle, `input` must hold `c*h*w` floats and
/// `out` must have room for `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn sf_qgraph_infer(
    qgraph: *const SfQGraph,
    input: *const f32,
    c: usize,
    h: usize,
    w: usize,
    out: *mut f32,
    out_len: usize,
) -> SfStatus {
    guard(|| {
        let q = borrow(qgraph, "qgraph")?;
        let x = input_tensor(input, 1, c, h, w)?;
        let y = quantized_forward(&q.qgraph, &quantize_input(&q.qgraph, &x, 0))
            .map_err(fail)?
            .dequantize();
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len < y.len() {
            return Err(fail(Error::InvalidArgument(format!("output buffer holds {out_len} values, {} needed", y.len()))));
        }
        ptr::copy_nonoverlapping(y.as_ptr(), out, y.len());
        Ok(())
    })
}

unsafe fn write_int8(y: &QTensor, out: *mut i8, out_len: usize, out_exponent: *mut i32) -> Result<(), SfStatus> {
    if out.is_null() {
        return Err(null("out"));
    }
    if out_len < y.data.len() {
        return Err(fail(Error::InvalidArgument(format!(
            "output buffer holds {out_len} values, {} needed",
            y.data.len()
        ))));
    }
    ptr::copy_nonoverlapping(y.data.as_ptr(), out, y.data.len());
    *borrow_mut(out_exponent, "out_exponent")? = y.params.exponent;
    Ok(())
}

/// Total silicon area in mm^2 with unit costs calibrated on the reference
/// backbone.
///
/// # Safety
/// `qgraph` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sf_qgraph_area_mm2(qgraph: *const SfQGraph, out: *mut f64) -> SfStatus {
    guard(|| {
        let q = borrow(qgraph, "qgraph")?;
        let out = borrow_mut(out, "out")?;
        let params = hardware::calibrated_default().map_err(fail)?;
        *out = hardware::estimate_area(&q.qgraph, &params).map_err(fail)?.total_mm2;
        Ok(())
    })
}
