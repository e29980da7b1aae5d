//! C ABI bindings for the comparison layer of `newslab-core`: ranking
//! metrics, linear CKA, average-linkage clustering, and frozen embedding
//! stores.
//!
//! Conventions, mirrored in the generated `include/newslab.h`:
//!
//! * Every fallible function returns an `NlStatus`; `NL_STATUS_OK` means
//!   all out-parameters were written.
//! * After any non-OK return, `nl_last_error` yields a NUL-terminated,
//!   thread-local description, valid until the next failing call on the
//!   same thread.
//! * `NULL` pointers are rejected with `NL_STATUS_USAGE`; no pointer
//!   argument is ever freed by the library unless documented.
//! * `NlEmbeddings` handles come from `nl_embeddings_open` and must be
//!   released with `nl_embeddings_free` exactly once.
//! * Panics never unwind across the boundary; they surface as
//!   `NL_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use newslab_core::data::frozen::FrozenStore;
use newslab_core::metrics::{
    hierarchical_cluster, jaccard_at_k, linear_cka, ndcg_at_k, ComparisonMatrix, EmbeddingMatrix,
    MetricTag, RecommendationList,
};
use newslab_core::tensor::Tensor;
use newslab_core::Error;

/// Status code returned by every fallible function.
///
/// The numeric values of `CONFIG`, `DIVERGENCE`, `ARTIFACT`, and
/// `ALIGNMENT` match the `newslab` binary's exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlStatus {
    /// Success; out-parameters are valid.
    Ok = 0,
    /// API misuse: null pointer, bad length, duplicate ids, k = 0, …
    Usage = 1,
    /// Invalid configuration or input values.
    Config = 2,
    /// A computation produced non-finite values.
    Divergence = 3,
    /// A stored artifact is corrupt or inconsistent.
    Artifact = 4,
    /// Inputs that must align row-for-row do not.
    Alignment = 5,
    /// Structurally valid input that is degenerate for the computation.
    Degenerate = 6,
    /// Dataset content problem (unknown id, missing entry).
    Data = 7,
    /// Malformed file content.
    Format = 8,
    /// Underlying I/O failure.
    Io = 9,
    /// An internal panic was caught at the boundary.
    Panic = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(status: NlStatus, msg: &str) -> NlStatus {
    set_error(msg);
    status
}

fn fail_with(e: &Error) -> NlStatus {
    let status = match e {
        Error::Usage(_) | Error::ShapeMismatch { .. } => NlStatus::Usage,
        Error::Config(_) => NlStatus::Config,
        Error::Divergence(_) => NlStatus::Divergence,
        Error::ArtifactMismatch(_) => NlStatus::Artifact,
        Error::Alignment(_) => NlStatus::Alignment,
        Error::Degenerate(_) => NlStatus::Degenerate,
        Error::Data(_) => NlStatus::Data,
        Error::Format { .. } => NlStatus::Format,
        Error::Io(_) => NlStatus::Io,
    };
    fail(status, &e.to_string())
}

/// Run a body, translating panics into `NL_STATUS_PANIC`.
fn guarded(f: impl FnOnce() -> NlStatus) -> NlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(NlStatus::Panic, &format!("internal panic: {msg}"))
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Description of the most recent failure on this thread.
///
/// Empty until a call fails; the pointer stays valid until the next failing
/// call on the same thread.
#[no_mangle]
pub extern "C" fn nl_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Binary nDCG@k of a ranked slate.
///
/// `labels` holds `len` entries, one per ranked candidate in rank order;
/// non-zero means relevant. Slates with no relevant candidate are
/// `NL_STATUS_DEGENERATE` (the metric is undefined there).
///
/// # Safety
/// `labels` must point to `len` readable bytes and `out` to a writable
/// double.
#[no_mangle]
pub unsafe extern "C" fn nl_ndcg_at_k(
    labels: *const u8,
    len: usize,
    k: usize,
    out: *mut f64,
) -> NlStatus {
    guarded(|| {
        if labels.is_null() || out.is_null() {
            return fail(NlStatus::Usage, "nl_ndcg_at_k: null pointer");
        }
        let labels: Vec<bool> =
            unsafe { std::slice::from_raw_parts(labels, len) }.iter().map(|&b| b != 0).collect();
        match ndcg_at_k(&labels, k) {
            Ok(v) => {
                unsafe { *out = v };
                NlStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

fn ranked_list(ids: *const *const c_char, len: usize, name: &str) -> Result<RecommendationList, NlStatus> {
    if ids.is_null() {
        return Err(fail(NlStatus::Usage, &format!("{name}: null id array")));
    }
    let ptrs = unsafe { std::slice::from_raw_parts(ids, len) };
    let mut items = Vec::with_capacity(len);
    for (rank, &p) in ptrs.iter().enumerate() {
        if p.is_null() {
            return Err(fail(NlStatus::Usage, &format!("{name}: null id at rank {rank}")));
        }
        let id = match unsafe { CStr::from_ptr(p) }.to_str() {
            Ok(s) => s.to_string(),
            Err(_) => {
                return Err(fail(NlStatus::Usage, &format!("{name}: id at rank {rank} is not UTF-8")))
            }
        };
        items.push((id, (len - rank) as f64));
    }
    RecommendationList::new("ffi", items).map_err(|e| fail_with(&e))
}

/// Jaccard@k between two ranked id lists (NUL-terminated strings, best
/// first). Order within the top-k does not matter; duplicate ids within one
/// list are `NL_STATUS_USAGE`.
///
/// # Safety
/// `a` and `b` must each point to `a_len` / `b_len` valid NUL-terminated
/// strings, and `out` to a writable double.
#[no_mangle]
pub unsafe extern "C" fn nl_jaccard_at_k(
    a: *const *const c_char,
    a_len: usize,
    b: *const *const c_char,
    b_len: usize,
    k: usize,
    out: *mut f64,
) -> NlStatus {
    guarded(|| {
        if out.is_null() {
            return fail(NlStatus::Usage, "nl_jaccard_at_k: null out pointer");
        }
        let list_a = match ranked_list(a, a_len, "nl_jaccard_at_k") {
            Ok(l) => l,
            Err(s) => return s,
        };
        let list_b = match ranked_list(b, b_len, "nl_jaccard_at_k") {
            Ok(l) => l,
            Err(s) => return s,
        };
        match jaccard_at_k(&list_a, &list_b, k) {
            Ok(v) => {
                unsafe { *out = v };
                NlStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

fn embedding_from_raw(
    data: *const f64,
    rows: usize,
    cols: usize,
    name: &str,
) -> Result<EmbeddingMatrix, NlStatus> {
    if data.is_null() {
        return Err(fail(NlStatus::Usage, &format!("{name}: null matrix")));
    }
    if rows == 0 || cols == 0 {
        return Err(fail(NlStatus::Usage, &format!("{name}: empty matrix {rows}×{cols}")));
    }
    let values = unsafe { std::slice::from_raw_parts(data, rows * cols) }.to_vec();
    let ids = (0..rows).map(|i| format!("r{i}")).collect();
    let tensor = Tensor::new(vec![rows, cols], values).map_err(|e| fail_with(&e))?;
    EmbeddingMatrix::new(ids, tensor).map_err(|e| fail_with(&e))
}

/// Linear CKA between two row-major embedding matrices over the same
/// `rows` items (row i of `a` and row i of `b` describe the same item).
///
/// # Safety
/// `a` must point to `rows * a_cols` doubles, `b` to `rows * b_cols`
/// doubles, and `out` to a writable double.
#[no_mangle]
pub unsafe extern "C" fn nl_linear_cka(
    a: *const f64,
    rows: usize,
    a_cols: usize,
    b: *const f64,
    b_cols: usize,
    out: *mut f64,
) -> NlStatus {
    guarded(|| {
        if out.is_null() {
            return fail(NlStatus::Usage, "nl_linear_cka: null out pointer");
        }
        let ea = match embedding_from_raw(a, rows, a_cols, "nl_linear_cka") {
            Ok(e) => e,
            Err(s) => return s,
        };
        let eb = match embedding_from_raw(b, rows, b_cols, "nl_linear_cka") {
            Ok(e) => e,
            Err(s) => return s,
        };
        match linear_cka(&ea, &eb) {
            Ok(v) => {
                unsafe { *out = v };
                NlStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// One agglomeration step of average-linkage clustering.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlMerge {
    /// Smallest original index in the first merged cluster (`a < b`).
    pub a: usize,
    /// Smallest original index in the second merged cluster.
    pub b: usize,
    /// Merge height: average dissimilarity `1 − similarity`.
    pub height: f64,
    /// Total members in the merged cluster.
    pub size: usize,
}

/// Average-linkage hierarchical clustering of an `n × n` row-major
/// similarity matrix (symmetric, unit diagonal; violations are
/// `NL_STATUS_DEGENERATE`). Writes exactly `n − 1` merges.
///
/// # Safety
/// `similarity` must point to `n * n` doubles and `out_merges` to `n − 1`
/// writable `NlMerge` slots (`n >= 2`).
#[no_mangle]
pub unsafe extern "C" fn nl_average_linkage(
    similarity: *const f64,
    n: usize,
    out_merges: *mut NlMerge,
) -> NlStatus {
    guarded(|| {
        if similarity.is_null() || out_merges.is_null() {
            return fail(NlStatus::Usage, "nl_average_linkage: null pointer");
        }
        if n < 2 {
            return fail(NlStatus::Usage, "nl_average_linkage: need at least 2 items");
        }
        let values = unsafe { std::slice::from_raw_parts(similarity, n * n) }.to_vec();
        let tensor = match Tensor::new(vec![n, n], values) {
            Ok(t) => t,
            Err(e) => return fail_with(&e),
        };
        let labels = (0..n).map(|i| format!("m{i}")).collect();
        let matrix = match ComparisonMatrix::new(labels, tensor, MetricTag::Cka) {
            Ok(m) => m,
            Err(e) => return fail_with(&e),
        };
        match hierarchical_cluster(&matrix) {
            Ok(merges) => {
                let out = unsafe { std::slice::from_raw_parts_mut(out_merges, n - 1) };
                for (slot, m) in out.iter_mut().zip(&merges) {
                    *slot = NlMerge { a: m.a, b: m.b, height: m.height, size: m.size };
                }
                NlStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// An opened embedding store: ids and an id-sorted row-major matrix.
pub struct NlEmbeddings {
    matrix: EmbeddingMatrix,
    ids: Vec<CString>,
}

/// Open an embedding store written by `newslab dump-embeddings` (binary or
/// TSV; the format is sniffed). On success `*out` owns the handle.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a writable
/// pointer slot.
#[no_mangle]
pub unsafe extern "C" fn nl_embeddings_open(
    path: *const c_char,
    out: *mut *mut NlEmbeddings,
) -> NlStatus {
    guarded(|| {
        if path.is_null() || out.is_null() {
            return fail(NlStatus::Usage, "nl_embeddings_open: null pointer");
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => s,
            Err(_) => return fail(NlStatus::Usage, "nl_embeddings_open: path is not UTF-8"),
        };
        let store = match FrozenStore::load(Path::new(path)) {
            Ok(s) => s,
            Err(e) => return fail_with(&e),
        };
        let mut ids: Vec<&str> = store.ids().iter().map(String::as_str).collect();
        ids.sort_unstable();
        let dim = store.dim();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for id in &ids {
            data.extend(store.lookup(id).expect("listed id").iter().map(|&v| v as f64));
        }
        let tensor = match Tensor::new(vec![ids.len(), dim], data) {
            Ok(t) => t,
            Err(e) => return fail_with(&e),
        };
        let matrix =
            match EmbeddingMatrix::new(ids.iter().map(|s| s.to_string()).collect(), tensor) {
                Ok(m) => m,
                Err(e) => return fail_with(&e),
            };
        let c_ids = match ids
            .iter()
            .map(|s| CString::new(*s))
            .collect::<Result<Vec<_>, _>>()
        {
            Ok(v) => v,
            Err(_) => return fail(NlStatus::Format, "nl_embeddings_open: id contains NUL"),
        };
        let handle = Box::new(NlEmbeddings { matrix, ids: c_ids });
        unsafe { *out = Box::into_raw(handle) };
        NlStatus::Ok
    })
}

/// Number of rows in an opened store, or 0 for NULL.
///
/// # Safety
/// `handle` must be NULL or a live handle from `nl_embeddings_open`.
#[no_mangle]
pub unsafe extern "C" fn nl_embeddings_len(handle: *const NlEmbeddings) -> usize {
    if handle.is_null() {
        return 0;
    }
    unsafe { &*handle }.ids.len()
}

/// Embedding dimension of an opened store, or 0 for NULL.
///
/// # Safety
/// `handle` must be NULL or a live handle from `nl_embeddings_open`.
#[no_mangle]
pub unsafe extern "C" fn nl_embeddings_dim(handle: *const NlEmbeddings) -> usize {
    if handle.is_null() {
        return 0;
    }
    unsafe { &*handle }.matrix.matrix.shape()[1]
}

/// The id of row `index` (ids are sorted ascending). The pointer stays
/// valid while the handle lives.
///
/// # Safety
/// `handle` must be a live handle and `out` a writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn nl_embeddings_id(
    handle: *const NlEmbeddings,
    index: usize,
    out: *mut *const c_char,
) -> NlStatus {
    guarded(|| {
        if handle.is_null() || out.is_null() {
            return fail(NlStatus::Usage, "nl_embeddings_id: null pointer");
        }
        let h = unsafe { &*handle };
        match h.ids.get(index) {
            Some(id) => {
                unsafe { *out = id.as_ptr() };
                NlStatus::Ok
            }
            None => fail(
                NlStatus::Usage,
                &format!("nl_embeddings_id: index {index} out of range ({} rows)", h.ids.len()),
            ),
        }
    })
}

/// Linear CKA between two opened stores. Both must contain exactly the
/// same ids; a mismatch is `NL_STATUS_ALIGNMENT` naming the offending id.
///
/// # Safety
/// `a` and `b` must be live handles and `out` a writable double.
#[no_mangle]
pub unsafe extern "C" fn nl_embeddings_cka(
    a: *const NlEmbeddings,
    b: *const NlEmbeddings,
    out: *mut f64,
) -> NlStatus {
    guarded(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return fail(NlStatus::Usage, "nl_embeddings_cka: null pointer");
        }
        let (a, b) = unsafe { (&*a, &*b) };
        match linear_cka(&a.matrix, &b.matrix) {
            Ok(v) => {
                unsafe { *out = v };
                NlStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Release a handle. NULL is a no-op; double-free is undefined behaviour.
///
/// # Safety
/// `handle` must be NULL or an unreleased handle from
/// `nl_embeddings_open`.
#[no_mangle]
pub unsafe extern "C" fn nl_embeddings_free(handle: *mut NlEmbeddings) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        unsafe { CStr::from_ptr(nl_last_error()) }.to_string_lossy().into_owned()
    }

    #[test]
    fn version_is_nul_terminated_semver() {
        let v = unsafe { CStr::from_ptr(nl_version()) }.to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn ndcg_matches_core_and_reports_usage() {
        let labels = [1u8, 0, 1, 0];
        let mut out = 0.0;
        let status = unsafe { nl_ndcg_at_k(labels.as_ptr(), labels.len(), 4, &mut out) };
        assert_eq!(status, NlStatus::Ok);
        let want = ndcg_at_k(&[true, false, true, false], 4).unwrap();
        assert_eq!(out, want);

        let status = unsafe { nl_ndcg_at_k(std::ptr::null(), 0, 4, &mut out) };
        assert_eq!(status, NlStatus::Usage);
        assert!(last_error().contains("null"));

        let none = [0u8, 0];
        let status = unsafe { nl_ndcg_at_k(none.as_ptr(), none.len(), 2, &mut out) };
        assert_eq!(status, NlStatus::Degenerate);
    }

    #[test]
    fn jaccard_reproduces_the_shared_fraction() {
        let make = |ids: &[&str]| -> Vec<CString> {
            ids.iter().map(|s| CString::new(*s).unwrap()).collect()
        };
        let a = make(&["s0", "s1", "s2", "s3", "s4", "s5", "s6", "a7", "a8", "a9"]);
        let b = make(&["s0", "s1", "s2", "s3", "s4", "s5", "s6", "b7", "b8", "b9"]);
        let pa: Vec<*const c_char> = a.iter().map(|s| s.as_ptr()).collect();
        let pb: Vec<*const c_char> = b.iter().map(|s| s.as_ptr()).collect();
        let mut out = 0.0;
        let status =
            unsafe { nl_jaccard_at_k(pa.as_ptr(), pa.len(), pb.as_ptr(), pb.len(), 10, &mut out) };
        assert_eq!(status, NlStatus::Ok);
        assert_eq!(out, 7.0 / 13.0);

        // Duplicate ids in one list are rejected.
        let dup = make(&["x", "x"]);
        let pd: Vec<*const c_char> = dup.iter().map(|s| s.as_ptr()).collect();
        let status =
            unsafe { nl_jaccard_at_k(pd.as_ptr(), pd.len(), pb.as_ptr(), pb.len(), 2, &mut out) };
        assert_eq!(status, NlStatus::Usage);
    }

    #[test]
    fn cka_self_is_one() {
        let e: Vec<f64> = vec![0.3, -1.2, 0.8, 0.5, 2.0, -0.7, 1.1, 0.0, -0.4];
        let mut out = 0.0;
        let status = unsafe { nl_linear_cka(e.as_ptr(), 3, 3, e.as_ptr(), 3, &mut out) };
        assert_eq!(status, NlStatus::Ok);
        assert!((out - 1.0).abs() < 1e-12, "{out}");
    }

    #[test]
    fn average_linkage_two_items() {
        let sim = [1.0, 0.3, 0.3, 1.0];
        let mut merges = [NlMerge { a: 0, b: 0, height: 0.0, size: 0 }; 1];
        let status = unsafe { nl_average_linkage(sim.as_ptr(), 2, merges.as_mut_ptr()) };
        assert_eq!(status, NlStatus::Ok);
        assert_eq!(merges[0], NlMerge { a: 0, b: 1, height: 0.7, size: 2 });

        // An asymmetric matrix is rejected as degenerate.
        let bad = [1.0, 0.3, 0.4, 1.0];
        let status = unsafe { nl_average_linkage(bad.as_ptr(), 2, merges.as_mut_ptr()) };
        assert_eq!(status, NlStatus::Degenerate);
    }

    #[test]
    fn embeddings_round_trip_through_a_file() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("emb.bin");
        let mut store = FrozenStore::new(2).unwrap();
        store.insert("N2", &[1.0, 0.0]).unwrap();
        store.insert("N1", &[0.0, 1.0]).unwrap();
        store.save_binary(&path).unwrap();

        let c_path = CString::new(path.to_str().unwrap()).unwrap();
        let mut handle: *mut NlEmbeddings = std::ptr::null_mut();
        let status = unsafe { nl_embeddings_open(c_path.as_ptr(), &mut handle) };
        assert_eq!(status, NlStatus::Ok);
        assert_eq!(unsafe { nl_embeddings_len(handle) }, 2);
        assert_eq!(unsafe { nl_embeddings_dim(handle) }, 2);

        // Ids come back sorted.
        let mut id: *const c_char = std::ptr::null();
        assert_eq!(unsafe { nl_embeddings_id(handle, 0, &mut id) }, NlStatus::Ok);
        assert_eq!(unsafe { CStr::from_ptr(id) }.to_str().unwrap(), "N1");
        assert_eq!(unsafe { nl_embeddings_id(handle, 5, &mut id) }, NlStatus::Usage);

        let mut cka = 0.0;
        assert_eq!(unsafe { nl_embeddings_cka(handle, handle, &mut cka) }, NlStatus::Ok);
        assert!((cka - 1.0).abs() < 1e-12);

        // A store with different ids fails alignment, naming the id.
        let path2 = tmp.path().join("emb2.bin");
        let mut other = FrozenStore::new(2).unwrap();
        other.insert("N1", &[0.0, 1.0]).unwrap();
        other.insert("N9", &[1.0, 1.0]).unwrap();
        other.save_binary(&path2).unwrap();
        let c_path2 = CString::new(path2.to_str().unwrap()).unwrap();
        let mut handle2: *mut NlEmbeddings = std::ptr::null_mut();
        assert_eq!(unsafe { nl_embeddings_open(c_path2.as_ptr(), &mut handle2) }, NlStatus::Ok);
        assert_eq!(unsafe { nl_embeddings_cka(handle, handle2, &mut cka) }, NlStatus::Alignment);
        assert!(last_error().contains("N9") || last_error().contains("N2"), "{}", last_error());

        unsafe {
            nl_embeddings_free(handle);
            nl_embeddings_free(handle2);
            nl_embeddings_free(std::ptr::null_mut());
        }
    }

    #[test]
    fn missing_file_maps_to_io() {
        let c_path = CString::new("/definitely/not/here.bin").unwrap();
        let mut handle: *mut NlEmbeddings = std::ptr::null_mut();
        let status = unsafe { nl_embeddings_open(c_path.as_ptr(), &mut handle) };
        assert_eq!(status, NlStatus::Io);
        assert!(handle.is_null());
    }
}
