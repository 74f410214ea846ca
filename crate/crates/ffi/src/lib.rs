//! C ABI over `te-core`.
//!
//! Every fallible function returns a [`TeStatus`]; on failure a message for
//! the calling thread is available from [`te_last_error_message`]. Handles
//! are opaque and must be released with their `_free` function. Strings are
//! NUL-terminated UTF-8. Panics never cross the boundary.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use te_core::ingest::{load_replicate_set, ConceptId, IngestError};
use te_core::projection::{procrustes_align, Point2, ProjectionFrame};
use te_core::similarity::{pairwise_similarity, ReplicateVectors, SimilarityError};
use te_core::snapshot::{read_snapshot, Snapshot, SnapshotError};
use te_core::stability::{embedding_confidence, StabilityError};
use te_core::ReplicateSet;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    ConceptAbsent = 5,
    Snapshot = 6,
    Panic = 7,
}

/// All replicates of one corpus.
pub struct TeReplicateSet {
    inner: ReplicateSet,
}

/// A snapshot loaded from disk.
pub struct TeSnapshot {
    inner: Snapshot,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(TeStatus, String);

type Outcome = Result<(), Failure>;

fn fail(status: TeStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Outcome) -> TeStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TeStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TeStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(TeStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(TeStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn concept_arg(p: *const c_char, name: &str) -> Result<ConceptId, Failure> {
    let s = str_arg(p, name)?;
    ConceptId::new(s).map_err(|e| fail(TeStatus::InvalidArgument, e.to_string()))
}

unsafe fn out_ref<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(TeStatus::NullPointer, format!("{name} is null")))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(TeStatus::NullPointer, "handle is null"))
}

fn ingest_failure(e: IngestError) -> Failure {
    let status = match &e {
        IngestError::Io { .. } => TeStatus::Io,
        IngestError::InFile { source, .. } if matches!(**source, IngestError::Io { .. }) => TeStatus::Io,
        IngestError::TooFewReplicates { .. } | IngestError::InvalidCorpusId(_) => TeStatus::InvalidArgument,
        _ => TeStatus::Parse,
    };
    fail(status, e.to_string())
}

fn similarity_failure(e: SimilarityError) -> Failure {
    let status = match e {
        SimilarityError::ConceptAbsent(_) => TeStatus::ConceptAbsent,
        _ => TeStatus::InvalidArgument,
    };
    fail(status, e.to_string())
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn te_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn te_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads `n_paths` replicate files into a new handle stored in `*out`.
///
/// # Safety
/// `paths` must point to `n_paths` valid C strings; `corpus_id` and `label`
/// must be valid C strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn te_replicate_set_load(
    paths: *const *const c_char,
    n_paths: usize,
    corpus_id: *const c_char,
    label: *const c_char,
    order_index: i64,
    out: *mut *mut TeReplicateSet,
) -> TeStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        if paths.is_null() && n_paths > 0 {
            return Err(fail(TeStatus::NullPointer, "paths is null"));
        }
        let files = (0..n_paths)
            .map(|i| str_arg(*paths.add(i), "path").map(PathBuf::from))
            .collect::<Result<Vec<_>, _>>()?;
        let corpus_id = str_arg(corpus_id, "corpus_id")?;
        let label = str_arg(label, "label")?;
        let set = load_replicate_set(&files, corpus_id, label, order_index).map_err(ingest_failure)?;
        *out = Box::into_raw(Box::new(TeReplicateSet { inner: set }));
        Ok(())
    })
}

/// Releases a handle from [`te_replicate_set_load`]. Null is ignored.
///
/// # Safety
/// `set` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn te_replicate_set_free(set: *mut TeReplicateSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Replicate count, dimension and shared vocabulary size. Any output
/// pointer may be null.
///
/// # Safety
/// `set` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn te_replicate_set_info(
    set: *const TeReplicateSet,
    m: *mut usize,
    dim: *mut usize,
    shared: *mut usize,
) -> TeStatus {
    guard(|| {
        let s = &handle(set)?.inner;
        if let Some(m) = m.as_mut() {
            *m = s.m();
        }
        if let Some(d) = dim.as_mut() {
            *d = s.dim();
        }
        if let Some(v) = shared.as_mut() {
            *v = s.shared_vocabulary().len();
        }
        Ok(())
    })
}

/// EC@k of `concept`, in [0, 1].
///
/// # Safety
/// `set` must be a live handle; `concept` a valid C string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn te_embedding_confidence(
    set: *const TeReplicateSet,
    concept: *const c_char,
    k: usize,
    out: *mut f64,
) -> TeStatus {
    guard(|| {
        let s = &handle(set)?.inner;
        let c = concept_arg(concept, "concept")?;
        let out = out_ref(out, "out")?;
        *out = embedding_confidence(s, &c, k).map_err(|e| {
            let status = match e {
                StabilityError::ConceptAbsent(_) => TeStatus::ConceptAbsent,
                _ => TeStatus::InvalidArgument,
            };
            fail(status, e.to_string())
        })?;
        Ok(())
    })
}

/// Mean and population standard deviation over replicates of cos(a, b).
///
/// # Safety
/// `set` must be a live handle; `a`, `b` valid C strings; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn te_pairwise_similarity(
    set: *const TeReplicateSet,
    a: *const c_char,
    b: *const c_char,
    mean: *mut f64,
    std: *mut f64,
) -> TeStatus {
    guard(|| similarity_into(&handle(set)?.inner, a, b, mean, std))
}

unsafe fn similarity_into<V: ReplicateVectors + ?Sized>(
    v: &V,
    a: *const c_char,
    b: *const c_char,
    mean: *mut f64,
    std: *mut f64,
) -> Outcome {
    let a = concept_arg(a, "a")?;
    let b = concept_arg(b, "b")?;
    let mean = out_ref(mean, "mean")?;
    let std = out_ref(std, "std")?;
    let (m, s) = pairwise_similarity(v, &a, &b).map_err(similarity_failure)?;
    *mean = m;
    *std = s;
    Ok(())
}

/// Reads and verifies the snapshot at `root` into a new handle in `*out`.
///
/// # Safety
/// `root` must be a valid C string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn te_snapshot_open(root: *const c_char, out: *mut *mut TeSnapshot) -> TeStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let root = str_arg(root, "root")?;
        let snap = read_snapshot(root.as_ref()).map_err(|e| {
            let status = match e {
                SnapshotError::Io { .. } => TeStatus::Io,
                _ => TeStatus::Snapshot,
            };
            fail(status, e.to_string())
        })?;
        *out = Box::into_raw(Box::new(TeSnapshot { inner: snap }));
        Ok(())
    })
}

/// Releases a handle from [`te_snapshot_open`]. Null is ignored.
///
/// # Safety
/// `snap` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn te_snapshot_free(snap: *mut TeSnapshot) {
    if !snap.is_null() {
        drop(Box::from_raw(snap));
    }
}

/// Number of corpora in the snapshot.
///
/// # Safety
/// `snap` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn te_snapshot_corpus_count(snap: *const TeSnapshot, out: *mut usize) -> TeStatus {
    guard(|| {
        let s = &handle(snap)?.inner;
        *out_ref(out, "out")? = s.corpora.len();
        Ok(())
    })
}

/// Similarity of `a` and `b` in corpus `corpus_index` (in snapshot order),
/// from the stored replicate vectors.
///
/// # Safety
/// `snap` must be a live handle; `a`, `b` valid C strings; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn te_snapshot_similarity(
    snap: *const TeSnapshot,
    corpus_index: usize,
    a: *const c_char,
    b: *const c_char,
    mean: *mut f64,
    std: *mut f64,
) -> TeStatus {
    guard(|| {
        let s = &handle(snap)?.inner;
        let c = s.corpora.get(corpus_index).ok_or_else(|| {
            fail(
                TeStatus::InvalidArgument,
                format!("corpus index {corpus_index} out of range ({} corpora)", s.corpora.len()),
            )
        })?;
        similarity_into(&c.vectors, a, b, mean, std)
    })
}

/// Fits the similarity transform taking `source` onto `target`, where both
/// hold `n` interleaved (x, y) pairs matched by index, and writes the
/// transformed source to `out` (2n doubles). `rotation` receives the
/// row-major 2x2 matrix and `translation` two doubles. Fewer than three
/// points yields the identity. Any of the transform outputs may be null.
///
/// # Safety
/// `source`, `target` must hold 2n readable doubles and `out` 2n writable
/// doubles; non-null transform outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn te_procrustes_align(
    source: *const f64,
    target: *const f64,
    n: usize,
    out: *mut f64,
    rotation: *mut f64,
    scale: *mut f64,
    translation: *mut f64,
    disparity_before: *mut f64,
    disparity_after: *mut f64,
) -> TeStatus {
    guard(|| {
        if n > 0 && (source.is_null() || target.is_null() || out.is_null()) {
            return Err(fail(TeStatus::NullPointer, "point buffer is null"));
        }
        let frame = |name: &str, xy: *const f64| -> Result<ProjectionFrame, Failure> {
            let mut points = BTreeMap::new();
            for i in 0..n {
                let (x, y) = (*xy.add(2 * i), *xy.add(2 * i + 1));
                if !(x.is_finite() && y.is_finite()) {
                    return Err(fail(TeStatus::InvalidArgument, format!("{name} point {i} is not finite")));
                }
                points.insert(point_id(i), Point2 { x, y });
            }
            Ok(ProjectionFrame {
                corpus_id: name.to_string(),
                points,
                aligned: false,
                seed: 0,
                perplexity: 0.0,
                kl_final: 0.0,
            })
        };
        let src = frame("source", source)?;
        let tgt = frame("target", target)?;
        let a = procrustes_align(&src, &tgt);
        for i in 0..n {
            let p = a.frame.points[&point_id(i)];
            *out.add(2 * i) = p.x;
            *out.add(2 * i + 1) = p.y;
        }
        let t = &a.transform;
        if !rotation.is_null() {
            let r = [t.rotation[0][0], t.rotation[0][1], t.rotation[1][0], t.rotation[1][1]];
            ptr::copy_nonoverlapping(r.as_ptr(), rotation, 4);
        }
        if let Some(s) = scale.as_mut() {
            *s = t.scale;
        }
        if !translation.is_null() {
            ptr::copy_nonoverlapping(t.translation.as_ptr(), translation, 2);
        }
        if let Some(d) = disparity_before.as_mut() {
            *d = t.disparity_before;
        }
        if let Some(d) = disparity_after.as_mut() {
            *d = t.disparity_after;
        }
        Ok(())
    })
}

/// Zero-padded so id order matches index order.
fn point_id(i: usize) -> ConceptId {
    ConceptId::new(format!("p{i:020}")).expect("no whitespace")
}
