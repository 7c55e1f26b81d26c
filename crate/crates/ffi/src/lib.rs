//! C ABI over the density, weighting, loss and cache primitives.
//!
//! Every fallible function returns a [`HeedStatus`]; on failure a message is
//! kept per thread and read with [`heed_last_error_message`]. Arrays are
//! row-major `double` buffers whose lengths follow from the size arguments.
//! Output pointers documented as optional may be null.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ndarray::Array2;

use heed::cache::{decode_cache, encode_cache, CacheEntry, CacheError};
use heed::density::{
    normalize_density, patch_density, sequence_weights, DensityError, DensityMap, PatchGrid,
};
use heed::losses::{kd_loss, weighted_residual_loss, LossError, ResidualTrace};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeedStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Density = 3,
    Loss = 4,
    BadMagic = 5,
    UnsupportedVersion = 6,
    Truncated = 7,
    Misaligned = 8,
    Cache = 9,
    NotFound = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("nul bytes removed")));
}

struct Failure(HeedStatus, String);

impl From<DensityError> for Failure {
    fn from(e: DensityError) -> Self {
        Failure(HeedStatus::Density, e.to_string())
    }
}

impl From<LossError> for Failure {
    fn from(e: LossError) -> Self {
        Failure(HeedStatus::Loss, e.to_string())
    }
}

impl From<CacheError> for Failure {
    fn from(e: CacheError) -> Self {
        let status = match e {
            CacheError::BadMagic => HeedStatus::BadMagic,
            CacheError::UnsupportedVersion(_) => HeedStatus::UnsupportedVersion,
            CacheError::Truncated { .. } => HeedStatus::Truncated,
            CacheError::MisalignedOffset { .. } | CacheError::OverlappingOffset { .. } => {
                HeedStatus::Misaligned
            }
            _ => HeedStatus::Cache,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(HeedStatus::InvalidArgument, msg.into())
}

/// Runs `f`, records any failure or panic, and returns the status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HeedStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            HeedStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            HeedStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, n: usize, name: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(Failure(HeedStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(Failure(HeedStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(HeedStatus::NullPointer, format!("{name} is null")))
}

fn checked_len(parts: &[usize]) -> Result<usize, Failure> {
    parts
        .iter()
        .try_fold(1usize, |acc, &p| acc.checked_mul(p))
        .ok_or_else(|| invalid("size overflow"))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn heed_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn heed_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Raw densities `rho_out` and per-image normalized densities
/// `rho_tilde_out` (optional), `height * width` values each, from
/// `height * width * dim` patch features.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn heed_patch_density(
    features: *const f64,
    height: usize,
    width: usize,
    dim: usize,
    rho_out: *mut f64,
    rho_tilde_out: *mut f64,
) -> HeedStatus {
    guard(|| {
        let n = checked_len(&[height, width, dim])?;
        let f = slice(features, n, "features")?;
        let grid = PatchGrid::new(height, width, dim, f.to_vec())?;
        let map = normalize_density(patch_density(&grid)?);
        slice_mut(rho_out, height * width, "rho_out")?.copy_from_slice(&map.rho);
        if !rho_tilde_out.is_null() {
            slice_mut(rho_tilde_out, height * width, "rho_tilde_out")?
                .copy_from_slice(&map.rho_tilde);
        }
        Ok(())
    })
}

/// Alignment weights for `n_visual` raw densities followed by `n_text` text
/// positions; writes `n_visual + n_text` values summing to that count.
///
/// # Safety
/// `rho` must hold `n_visual` values and `weights_out` room for `n_visual + n_text`.
#[no_mangle]
pub unsafe extern "C" fn heed_sequence_weights(
    rho: *const f64,
    n_visual: usize,
    n_text: usize,
    tau: f64,
    beta: f64,
    weights_out: *mut f64,
) -> HeedStatus {
    guard(|| {
        let r = slice(rho, n_visual, "rho")?;
        let map = DensityMap::from_rho(r.to_vec())?;
        let w = sequence_weights(&map, n_text, tau, beta)?;
        slice_mut(weights_out, n_visual + n_text, "weights_out")?.copy_from_slice(&w.weights);
        Ok(())
    })
}

fn stack(data: &[f64], layers: usize, seq: usize, dim: usize) -> Vec<Array2<f64>> {
    data.chunks(seq * dim)
        .take(layers)
        .map(|c| Array2::from_shape_vec((seq, dim), c.to_vec()).expect("chunk length"))
        .collect()
}

/// Weighted residual alignment `1/(L*T) * sum_l sum_p w_p |s_lp - t_lp|^2`
/// over `layers * seq * dim` buffers. A null `weights` means uniform weights.
/// `grad_out` (optional) receives the gradient with respect to `student`.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn heed_residual_loss(
    student: *const f64,
    teacher: *const f64,
    layers: usize,
    seq: usize,
    dim: usize,
    weights: *const f64,
    value_out: *mut f64,
    grad_out: *mut f64,
) -> HeedStatus {
    guard(|| {
        if layers == 0 || seq == 0 || dim == 0 {
            return Err(invalid("layers, seq and dim must be positive"));
        }
        let n = checked_len(&[layers, seq, dim])?;
        let s = slice(student, n, "student")?;
        let t = slice(teacher, n, "teacher")?;
        let w = if weights.is_null() {
            vec![1.0; seq]
        } else {
            slice(weights, seq, "weights")?.to_vec()
        };
        let trace = |x: &[f64]| ResidualTrace {
            layers: (0..layers).collect(),
            residuals: stack(x, layers, seq, dim),
            logits: Array2::zeros((seq, 1)),
        };
        let lv = weighted_residual_loss(&trace(s), &trace(t), &w)?;
        *out(value_out, "value_out")? = lv.value;
        if !grad_out.is_null() {
            let g = slice_mut(grad_out, n, "grad_out")?;
            for (dst, src) in g.chunks_mut(seq * dim).zip(lv.grad.expect("gradient")) {
                dst.copy_from_slice(src.as_slice().expect("contiguous"));
            }
        }
        Ok(())
    })
}

/// `lambda_kl * KL(teacher || student) + lambda_ce * CE` over `seq x vocab`
/// logits, averaged over positions whose label is non-negative.
/// `grad_out` (optional) receives the gradient with respect to the student logits.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn heed_kd_loss(
    student_logits: *const f64,
    teacher_logits: *const f64,
    seq: usize,
    vocab: usize,
    labels: *const i64,
    lambda_kl: f64,
    lambda_ce: f64,
    value_out: *mut f64,
    grad_out: *mut f64,
) -> HeedStatus {
    guard(|| {
        if seq == 0 || vocab == 0 {
            return Err(invalid("seq and vocab must be positive"));
        }
        let n = checked_len(&[seq, vocab])?;
        let s = Array2::from_shape_vec(
            (seq, vocab),
            slice(student_logits, n, "student_logits")?.to_vec(),
        )
        .expect("length checked");
        let t = Array2::from_shape_vec(
            (seq, vocab),
            slice(teacher_logits, n, "teacher_logits")?.to_vec(),
        )
        .expect("length checked");
        if labels.is_null() {
            return Err(Failure(HeedStatus::NullPointer, "labels is null".into()));
        }
        let labels: Vec<Option<usize>> = std::slice::from_raw_parts(labels, seq)
            .iter()
            .map(|&l| usize::try_from(l).ok())
            .collect();
        let (lv, _) = kd_loss(&s, &t, &labels, lambda_kl, lambda_ce)?;
        *out(value_out, "value_out")? = lv.value;
        if !grad_out.is_null() {
            let g = lv.grad.expect("gradient");
            slice_mut(grad_out, n, "grad_out")?.copy_from_slice(g.as_slice().expect("contiguous"));
        }
        Ok(())
    })
}

/// Opaque set of density cache entries.
pub struct HeedCache {
    entries: Vec<CacheEntry>,
    by_id: HashMap<u64, usize>,
}

impl HeedCache {
    fn from_entries(entries: Vec<CacheEntry>) -> Self {
        let by_id = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.sample_id, i))
            .collect();
        Self { entries, by_id }
    }
}

/// A new empty cache; release with [`heed_cache_free`].
#[no_mangle]
pub extern "C" fn heed_cache_new() -> *mut HeedCache {
    Box::into_raw(Box::new(HeedCache::from_entries(Vec::new())))
}

/// # Safety
/// `cache` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn heed_cache_free(cache: *mut HeedCache) {
    if !cache.is_null() {
        drop(Box::from_raw(cache));
    }
}

/// Quantizes `n` normalized densities in `[0, 1]` and appends them under `sample_id`.
///
/// # Safety
/// `cache` must be a live handle and `rho_tilde` hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn heed_cache_push(
    cache: *mut HeedCache,
    sample_id: u64,
    rho_tilde: *const f64,
    n: usize,
) -> HeedStatus {
    guard(|| {
        let c = out(cache, "cache")?;
        let values = slice(rho_tilde, n, "rho_tilde")?;
        if c.by_id.contains_key(&sample_id) {
            return Err(CacheError::DuplicateSample(sample_id).into());
        }
        let entry = CacheEntry::from_rho_tilde(sample_id, values)?;
        c.by_id.insert(sample_id, c.entries.len());
        c.entries.push(entry);
        Ok(())
    })
}

/// Decodes a cache file image into a new handle written to `cache_out`.
///
/// # Safety
/// `bytes` must hold `len` bytes; `cache_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn heed_cache_decode(
    bytes: *const u8,
    len: usize,
    cache_out: *mut *mut HeedCache,
) -> HeedStatus {
    guard(|| {
        let target = out(cache_out, "cache_out")?;
        if bytes.is_null() {
            return Err(Failure(HeedStatus::NullPointer, "bytes is null".into()));
        }
        let entries = decode_cache(std::slice::from_raw_parts(bytes, len))?;
        *target = Box::into_raw(Box::new(HeedCache::from_entries(entries)));
        Ok(())
    })
}

/// Encodes the cache into `buf`. `written_out` receives the encoded size;
/// when `capacity` is too small nothing is copied and `BufferTooSmall` is
/// returned, so a first call with a null buffer and zero capacity sizes it.
///
/// # Safety
/// `cache` must be a live handle and `buf` hold `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn heed_cache_encode(
    cache: *const HeedCache,
    buf: *mut u8,
    capacity: usize,
    written_out: *mut usize,
) -> HeedStatus {
    guard(|| {
        let c = cache
            .as_ref()
            .ok_or_else(|| Failure(HeedStatus::NullPointer, "cache is null".into()))?;
        let written = out(written_out, "written_out")?;
        let bytes = encode_cache(&c.entries)?;
        *written = bytes.len();
        if capacity < bytes.len() {
            return Err(Failure(
                HeedStatus::BufferTooSmall,
                format!("need {} bytes, have {capacity}", bytes.len()),
            ));
        }
        slice_mut(buf, bytes.len(), "buf")?.copy_from_slice(&bytes);
        Ok(())
    })
}

/// Number of entries.
///
/// # Safety
/// `cache` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn heed_cache_len(
    cache: *const HeedCache,
    len_out: *mut usize,
) -> HeedStatus {
    guard(|| {
        let c = cache
            .as_ref()
            .ok_or_else(|| Failure(HeedStatus::NullPointer, "cache is null".into()))?;
        *out(len_out, "len_out")? = c.entries.len();
        Ok(())
    })
}

/// Sample id and position count of entry `index`, in file order.
///
/// # Safety
/// `cache` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn heed_cache_entry(
    cache: *const HeedCache,
    index: usize,
    sample_id_out: *mut u64,
    n_positions_out: *mut usize,
) -> HeedStatus {
    guard(|| {
        let c = cache
            .as_ref()
            .ok_or_else(|| Failure(HeedStatus::NullPointer, "cache is null".into()))?;
        let e = c
            .entries
            .get(index)
            .ok_or_else(|| Failure(HeedStatus::NotFound, format!("no entry at index {index}")))?;
        *out(sample_id_out, "sample_id_out")? = e.sample_id;
        *out(n_positions_out, "n_positions_out")? = e.n_positions() as usize;
        Ok(())
    })
}

/// Dequantized densities of `sample_id` into `rho_tilde_out`.
/// `n_out` receives the position count, also when `capacity` is too small.
///
/// # Safety
/// `cache` must be a live handle and `rho_tilde_out` hold `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn heed_cache_get(
    cache: *const HeedCache,
    sample_id: u64,
    rho_tilde_out: *mut f64,
    capacity: usize,
    n_out: *mut usize,
) -> HeedStatus {
    guard(|| {
        let c = cache
            .as_ref()
            .ok_or_else(|| Failure(HeedStatus::NullPointer, "cache is null".into()))?;
        let n = out(n_out, "n_out")?;
        let &i = c.by_id.get(&sample_id).ok_or_else(|| {
            Failure(
                HeedStatus::NotFound,
                format!("sample {sample_id} not in cache"),
            )
        })?;
        let values = c.entries[i].dequantized();
        *n = values.len();
        if capacity < values.len() {
            return Err(Failure(
                HeedStatus::BufferTooSmall,
                format!("need {} values, have {capacity}", values.len()),
            ));
        }
        slice_mut(rho_tilde_out, values.len(), "rho_tilde_out")?.copy_from_slice(&values);
        Ok(())
    })
}
