//! C interface to a trained jointtok tokenizer.
//!
//! Handles are opaque; every call returns a [`JtStatus`] and leaves a
//! message for [`jt_last_error`] on failure. Pixels are `float` values in
//! `[-1, 1]` laid out `[frames][height][width][3]`; token grids are
//! `uint32_t` laid out `[slots][rows][cols]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use jointtok::io::{read_checkpoint, CheckpointKind};
use jointtok::model::{Head, Model};
use jointtok::tensor::Tensor;
use jointtok::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Numeric = 6,
    Shape = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// A loaded VQ tokenizer.
pub struct JtTokenizer {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> JtStatus {
    match e {
        Error::Shape { .. } | Error::Indivisible { .. } => JtStatus::Shape,
        Error::NumericFault { .. } => JtStatus::Numeric,
        Error::Config(_) => JtStatus::Config,
        Error::Format(_) => JtStatus::Format,
        Error::Io(_) => JtStatus::Io,
        _ => JtStatus::InvalidArgument,
    }
}

fn fail(status: JtStatus, msg: impl Into<String>) -> JtStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (JtStatus, String)>) -> JtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => JtStatus::Ok,
        Ok(Err((s, m))) => fail(s, m),
        Err(_) => fail(JtStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: jointtok::Result<T>) -> Result<T, (JtStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn jt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn jt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a VQ tokenizer checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn jt_tokenizer_load(path: *const c_char, out: *mut *mut JtTokenizer) -> JtStatus {
    if path.is_null() || out.is_null() {
        return fail(JtStatus::NullPointer, "path and out must not be NULL");
    }
    let path = unsafe { CStr::from_ptr(path) };
    guard(|| {
        let p = path
            .to_str()
            .map_err(|_| (JtStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let ck = lift(read_checkpoint(Path::new(p)))?;
        if ck.kind != CheckpointKind::Tokenizer || ck.head != Head::Vq {
            return Err((JtStatus::InvalidArgument, "not a VQ tokenizer checkpoint".into()));
        }
        let model = lift(ck.to_model())?;
        unsafe { *out = Box::into_raw(Box::new(JtTokenizer { model })) };
        Ok(())
    })
}

/// Releases a tokenizer. NULL is ignored.
///
/// # Safety
/// `tok` must come from [`jt_tokenizer_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn jt_tokenizer_free(tok: *mut JtTokenizer) {
    if !tok.is_null() {
        drop(unsafe { Box::from_raw(tok) });
    }
}

/// Number of codebook entries, or 0 for NULL.
///
/// # Safety
/// `tok` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn jt_tokenizer_codebook_size(tok: *const JtTokenizer) -> u32 {
    unsafe { tok.as_ref() }.map_or(0, |t| t.model.codebook.size as u32)
}

/// Token grid `(slots, rows, cols)` for a clip of the given size.
///
/// # Safety
/// `tok` must be a live handle; `out_grid` must hold three `size_t`.
#[no_mangle]
pub unsafe extern "C" fn jt_tokenizer_grid(
    tok: *const JtTokenizer,
    frames: usize,
    height: usize,
    width: usize,
    out_grid: *mut usize,
) -> JtStatus {
    let (Some(t), false) = (unsafe { tok.as_ref() }, out_grid.is_null()) else {
        return fail(JtStatus::NullPointer, "tok and out_grid must not be NULL");
    };
    guard(|| {
        let (s, h, w) = lift(t.model.cfg.tokenizer.grid_for(frames, height, width))?;
        unsafe { ptr::copy_nonoverlapping([s, h, w].as_ptr(), out_grid, 3) };
        Ok(())
    })
}

/// Quantizes a clip into code indices.
///
/// `pixels` holds `frames·height·width·3` floats. Up to `capacity` indices
/// are written to `out_indices`; `*written` receives the token count.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn jt_tokenizer_encode(
    tok: *mut JtTokenizer,
    pixels: *const f32,
    frames: usize,
    height: usize,
    width: usize,
    out_indices: *mut u32,
    capacity: usize,
    written: *mut usize,
) -> JtStatus {
    let Some(t) = (unsafe { tok.as_mut() }) else {
        return fail(JtStatus::NullPointer, "tok must not be NULL");
    };
    if pixels.is_null() || out_indices.is_null() || written.is_null() {
        return fail(JtStatus::NullPointer, "pixels, out_indices and written must not be NULL");
    }
    guard(|| {
        let n = frames
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .and_then(|v| v.checked_mul(3))
            .ok_or((JtStatus::InvalidArgument, "clip size overflows".to_string()))?;
        let data = unsafe { std::slice::from_raw_parts(pixels, n) };
        let x = lift(Tensor::from_f32(&[1, frames, height, width, 3], data))?;
        let (idx, _) = lift(t.model.encode_indices(&x))?;
        unsafe { *written = idx.len() };
        if idx.len() > capacity {
            return Err((
                JtStatus::BufferTooSmall,
                format!("{} tokens do not fit a buffer of {capacity}", idx.len()),
            ));
        }
        let out = unsafe { std::slice::from_raw_parts_mut(out_indices, idx.len()) };
        for (o, &i) in out.iter_mut().zip(&idx) {
            *o = i as u32;
        }
        Ok(())
    })
}

/// Decodes a `slots × rows × cols` grid of indices to pixels.
///
/// Up to `capacity` floats are written to `out_pixels`; `*written` receives
/// the pixel value count `frames·height·width·3`.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn jt_tokenizer_decode(
    tok: *const JtTokenizer,
    indices: *const u32,
    slots: usize,
    rows: usize,
    cols: usize,
    out_pixels: *mut f32,
    capacity: usize,
    written: *mut usize,
) -> JtStatus {
    let Some(t) = (unsafe { tok.as_ref() }) else {
        return fail(JtStatus::NullPointer, "tok must not be NULL");
    };
    if indices.is_null() || out_pixels.is_null() || written.is_null() {
        return fail(JtStatus::NullPointer, "indices, out_pixels and written must not be NULL");
    }
    guard(|| {
        let n = slots
            .checked_mul(rows)
            .and_then(|v| v.checked_mul(cols))
            .ok_or((JtStatus::InvalidArgument, "grid size overflows".to_string()))?;
        let raw = unsafe { std::slice::from_raw_parts(indices, n) };
        let k = t.model.codebook.size;
        if let Some(&bad) = raw.iter().find(|&&i| i as usize >= k) {
            return Err((JtStatus::InvalidArgument, format!("index {bad} outside codebook of {k}")));
        }
        let idx: Vec<usize> = raw.iter().map(|&i| i as usize).collect();
        let x = lift(t.model.decode_indices(&idx, [1, slots, rows, cols]))?;
        unsafe { *written = x.numel() };
        if x.numel() > capacity {
            return Err((
                JtStatus::BufferTooSmall,
                format!("{} values do not fit a buffer of {capacity}", x.numel()),
            ));
        }
        let out = unsafe { std::slice::from_raw_parts_mut(out_pixels, x.numel()) };
        for (o, &v) in out.iter_mut().zip(x.data()) {
            *o = v as f32;
        }
        Ok(())
    })
}
