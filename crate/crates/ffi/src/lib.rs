//! C ABI over the `densefocus` core.
//!
//! Every fallible function returns a [`DfStatus`]; on failure the message is
//! kept per thread and can be read with [`df_last_error_message`]. Objects are
//! exposed as opaque handles that the caller releases with the matching
//! `*_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use densefocus::anchors::{generate_anchors, AnchorConfig, AnchorSet};
use densefocus::geometry::{self, BBox, Detection, RegressionTarget};
use densefocus::loss::{self, BinaryLabel, LossConfig, LossKind};
use densefocus::model::{self, Architecture, DenseHead, FeatureMatrix};
use densefocus::Error;

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    InvalidConfig = 4,
    Io = 5,
    Diverged = 6,
    Panic = 7,
}

/// Loss family selector for [`DfLossConfig`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DfLossKind {
    Ce = 0,
    AlphaCe = 1,
    Focal = 2,
    FocalStar = 3,
    Hinge = 4,
}

/// `alpha` is used only when `has_alpha` is non-zero.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct DfLossConfig {
    pub kind: DfLossKind,
    pub gamma: f64,
    pub alpha: f64,
    pub has_alpha: u8,
    pub beta: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DfBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DfRegressionTarget {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DfDetection {
    pub bbox: DfBox,
    pub score: f64,
    pub class_id: u32,
}

/// Opaque anchor layout.
pub struct DfAnchorSet(AnchorSet);

/// Opaque dense head.
pub struct DfHead(DenseHead);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DfStatus {
    match e {
        Error::InvalidConfig(_) => DfStatus::InvalidConfig,
        Error::ShapeMismatch { .. } => DfStatus::ShapeMismatch,
        Error::Diverged { .. } => DfStatus::Diverged,
        Error::File { .. } | Error::Io(_) => DfStatus::Io,
        _ => DfStatus::InvalidArgument,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard<F: FnOnce() -> Result<(), DfStatusError>>(f: F) -> DfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DfStatus::Ok,
        Ok(Err(DfStatusError(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".to_string());
            DfStatus::Panic
        }
    }
}

struct DfStatusError(DfStatus, String);

impl From<Error> for DfStatusError {
    fn from(e: Error) -> Self {
        DfStatusError(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> DfStatusError {
    DfStatusError(DfStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> DfStatusError {
    DfStatusError(DfStatus::InvalidArgument, msg.into())
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, DfStatusError> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn in_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, DfStatusError> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn in_slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], DfStatusError> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(
    p: *mut T,
    len: usize,
    what: &str,
) -> Result<&'a mut [T], DfStatusError> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn to_loss(c: &DfLossConfig) -> LossConfig {
    let kind = match c.kind {
        DfLossKind::Ce => LossKind::Ce,
        DfLossKind::AlphaCe => LossKind::AlphaCe,
        DfLossKind::Focal => LossKind::Fl,
        DfLossKind::FocalStar => LossKind::FlStar,
        DfLossKind::Hinge => LossKind::Hinge,
    };
    LossConfig {
        kind,
        gamma: c.gamma,
        alpha: (c.has_alpha != 0).then_some(c.alpha),
        beta: c.beta,
    }
}

fn to_label(y: i32) -> Result<BinaryLabel, DfStatusError> {
    BinaryLabel::from_sign(y).map_err(DfStatusError::from)
}

fn to_bbox(b: &DfBox) -> BBox {
    BBox {
        x1: b.x1,
        y1: b.y1,
        x2: b.x2,
        y2: b.y2,
    }
}

fn from_bbox(b: &BBox) -> DfBox {
    DfBox {
        x1: b.x1,
        y1: b.y1,
        x2: b.x2,
        y2: b.y2,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn df_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// without the terminator, or 0 when there is no message.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn df_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// # Safety
/// `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn df_sigmoid(x: f64, out: *mut f64) -> DfStatus {
    guard(|| {
        *out_ref(out, "out")? = loss::stable_sigmoid(x)?;
        Ok(())
    })
}

/// Loss of logit `x` under label `y` (+1 or -1).
///
/// # Safety
/// `cfg` must be null or readable; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn df_loss_value(
    x: f64,
    y: i32,
    cfg: *const DfLossConfig,
    out: *mut f64,
) -> DfStatus {
    guard(|| {
        let cfg = to_loss(in_ref(cfg, "cfg")?);
        *out_ref(out, "out")? = loss::loss_value(x, to_label(y)?, &cfg)?;
        Ok(())
    })
}

/// Derivative of the loss with respect to the logit.
///
/// # Safety
/// As [`df_loss_value`].
#[no_mangle]
pub unsafe extern "C" fn df_loss_grad(
    x: f64,
    y: i32,
    cfg: *const DfLossConfig,
    out: *mut f64,
) -> DfStatus {
    guard(|| {
        let cfg = to_loss(in_ref(cfg, "cfg")?);
        *out_ref(out, "out")? = loss::loss_grad(x, to_label(y)?, &cfg)?;
        Ok(())
    })
}

/// # Safety
/// Pointers must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn df_iou(a: *const DfBox, b: *const DfBox, out: *mut f64) -> DfStatus {
    guard(|| {
        let (a, b) = (to_bbox(in_ref(a, "a")?), to_bbox(in_ref(b, "b")?));
        a.validate()?;
        b.validate()?;
        *out_ref(out, "out")? = geometry::iou(&a, &b);
        Ok(())
    })
}

/// # Safety
/// Pointers must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn df_encode(
    anchor: *const DfBox,
    gt: *const DfBox,
    out: *mut DfRegressionTarget,
) -> DfStatus {
    guard(|| {
        let t = geometry::encode(
            &to_bbox(in_ref(anchor, "anchor")?),
            &to_bbox(in_ref(gt, "gt")?),
        )?;
        *out_ref(out, "out")? = DfRegressionTarget {
            tx: t.tx,
            ty: t.ty,
            tw: t.tw,
            th: t.th,
        };
        Ok(())
    })
}

/// # Safety
/// Pointers must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn df_decode(
    anchor: *const DfBox,
    t: *const DfRegressionTarget,
    out: *mut DfBox,
) -> DfStatus {
    guard(|| {
        let t = in_ref(t, "t")?;
        let rt = RegressionTarget {
            tx: t.tx,
            ty: t.ty,
            tw: t.tw,
            th: t.th,
        };
        *out_ref(out, "out")? =
            from_bbox(&geometry::decode(&to_bbox(in_ref(anchor, "anchor")?), &rt)?);
        Ok(())
    })
}

/// Class-wise greedy NMS. Survivors are written to `out` (capacity
/// `out_cap`, at least `n` is always enough) sorted by descending score;
/// their count goes to `out_len`.
///
/// # Safety
/// `dets` must hold `n` readable entries; `out` must hold `out_cap` writable entries.
#[no_mangle]
pub unsafe extern "C" fn df_nms(
    dets: *const DfDetection,
    n: usize,
    iou_threshold: f64,
    out: *mut DfDetection,
    out_cap: usize,
    out_len: *mut usize,
) -> DfStatus {
    guard(|| {
        let dets: Vec<Detection> = in_slice(dets, n, "dets")?
            .iter()
            .map(|d| Detection {
                bbox: to_bbox(&d.bbox),
                score: d.score,
                class_id: d.class_id as usize,
            })
            .collect();
        let kept = geometry::nms(&dets, iou_threshold)?;
        let out_len = out_ref(out_len, "out_len")?;
        *out_len = kept.len();
        if kept.len() > out_cap {
            return Err(DfStatusError(
                DfStatus::ShapeMismatch,
                format!("output holds {out_cap}, need {}", kept.len()),
            ));
        }
        for (slot, d) in out_slice(out, kept.len(), "out")?.iter_mut().zip(&kept) {
            *slot = DfDetection {
                bbox: from_bbox(&d.bbox),
                score: d.score,
                class_id: d.class_id as u32,
            };
        }
        Ok(())
    })
}

/// Anchors of the default pyramid (levels 3-7, 3 ratios, 3 scales).
///
/// # Safety
/// `out` must be null or writable; on success it receives a handle to free
/// with [`df_anchor_set_free`].
#[no_mangle]
pub unsafe extern "C" fn df_anchor_set_new(
    width: u32,
    height: u32,
    out: *mut *mut DfAnchorSet,
) -> DfStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let set = generate_anchors(&AnchorConfig::default(), width, height)?;
        *out = Box::into_raw(Box::new(DfAnchorSet(set)));
        Ok(())
    })
}

/// Number of anchors, or 0 for a null handle.
///
/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn df_anchor_set_len(set: *const DfAnchorSet) -> usize {
    set.as_ref().map_or(0, |s| s.0.len())
}

/// # Safety
/// `set` must be null or a live handle; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn df_anchor_set_get(
    set: *const DfAnchorSet,
    index: usize,
    out: *mut DfBox,
) -> DfStatus {
    guard(|| {
        let set = &in_ref(set, "set")?.0;
        let b = set
            .boxes
            .get(index)
            .ok_or_else(|| invalid(format!("anchor {index} out of range for {}", set.len())))?;
        *out_ref(out, "out")? = from_bbox(b);
        Ok(())
    })
}

/// # Safety
/// `set` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn df_anchor_set_free(set: *mut DfAnchorSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Freshly initialised head; `hidden == 0` selects the linear architecture.
///
/// # Safety
/// `out` must be null or writable; free the handle with [`df_head_free`].
#[no_mangle]
pub unsafe extern "C" fn df_head_new(
    input_dim: usize,
    num_classes: usize,
    hidden: usize,
    pi: f64,
    seed: u64,
    out: *mut *mut DfHead,
) -> DfStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let arch = if hidden == 0 {
            Architecture::Linear
        } else {
            Architecture::OneHidden { hidden }
        };
        *out = Box::into_raw(Box::new(DfHead(model::init_head(
            input_dim,
            num_classes,
            arch,
            pi,
            seed,
        )?)));
        Ok(())
    })
}

/// Loads a head from its JSON document.
///
/// # Safety
/// `json` must be null or a NUL-terminated string; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn df_head_from_json(json: *const c_char, out: *mut *mut DfHead) -> DfStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        if json.is_null() {
            return Err(null("json"));
        }
        let s = CStr::from_ptr(json)
            .to_str()
            .map_err(|_| invalid("json is not UTF-8"))?;
        *out = Box::into_raw(Box::new(DfHead(DenseHead::from_json(s)?)));
        Ok(())
    })
}

/// Serialises a head; release the string with [`df_string_free`].
///
/// # Safety
/// `head` must be null or live; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn df_head_to_json(head: *const DfHead, out: *mut *mut c_char) -> DfStatus {
    guard(|| {
        let head = &in_ref(head, "head")?.0;
        let out = out_ref(out, "out")?;
        let s = CString::new(head.to_json()?).map_err(|_| invalid("json contains NUL"))?;
        *out = s.into_raw();
        Ok(())
    })
}

/// # Safety
/// `head` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn df_head_input_dim(head: *const DfHead) -> usize {
    head.as_ref().map_or(0, |h| h.0.input_dim)
}

/// # Safety
/// `head` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn df_head_num_classes(head: *const DfHead) -> usize {
    head.as_ref().map_or(0, |h| h.0.num_classes)
}

/// Forward pass over `rows` feature vectors of length `cols`.
///
/// Writes `rows * num_classes` logits and, when `boxes` is non-null,
/// `rows * 4` regression outputs.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn df_head_forward(
    head: *const DfHead,
    features: *const f64,
    rows: usize,
    cols: usize,
    logits: *mut f64,
    logits_len: usize,
    boxes: *mut f64,
    boxes_len: usize,
) -> DfStatus {
    guard(|| {
        let head = &in_ref(head, "head")?.0;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| invalid("rows * cols overflows"))?;
        let f = FeatureMatrix::new(rows, cols, in_slice(features, n, "features")?.to_vec())?;
        let out = model::forward(head, &f)?;
        if logits_len != out.logits.len() {
            return Err(DfStatusError(
                DfStatus::ShapeMismatch,
                format!(
                    "logits buffer holds {logits_len}, need {}",
                    out.logits.len()
                ),
            ));
        }
        out_slice(logits, logits_len, "logits")?.copy_from_slice(&out.logits);
        if !boxes.is_null() {
            if boxes_len != rows * 4 {
                return Err(DfStatusError(
                    DfStatus::ShapeMismatch,
                    format!("boxes buffer holds {boxes_len}, need {}", rows * 4),
                ));
            }
            let flat: Vec<f64> = out.boxes.iter().flatten().copied().collect();
            out_slice(boxes, boxes_len, "boxes")?.copy_from_slice(&flat);
        }
        Ok(())
    })
}

/// # Safety
/// `head` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn df_head_free(head: *mut DfHead) {
    if !head.is_null() {
        drop(Box::from_raw(head));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn df_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
