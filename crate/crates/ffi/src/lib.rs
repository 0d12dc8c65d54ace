//! C ABI over [`pim::Session`].
//!
//! Sessions are opaque handles created by `pim_session_new` or
//! `pim_session_open` and released with `pim_session_free`. Every fallible
//! call returns a [`PimStatus`]; the message of the last failure on the
//! calling thread is available from `pim_last_error`. Strings returned to the
//! caller are owned by the caller and released with `pim_string_free`.

use pim::session::{parse_op_input, Session, SessionError};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Bumped on incompatible changes to this interface.
pub const PIM_ABI_VERSION: u32 = 1;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PimStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// Input that does not parse as an operator or project.
    Malformed = 3,
    /// A referenced entity does not exist.
    NotFound = 4,
    /// The operator's preconditions do not hold; nothing changed.
    Rejected = 5,
    NothingToUndo = 6,
    Io = 7,
    /// A panic was caught at the boundary. The session should be discarded.
    Internal = 8,
}

/// Opaque session handle.
pub struct PimSession {
    inner: Session,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &SessionError) -> PimStatus {
    match e {
        SessionError::Malformed(_) => PimStatus::Malformed,
        SessionError::NothingToUndo => PimStatus::NothingToUndo,
        SessionError::Io(_) => PimStatus::Io,
        _ if e.kind() == "NotFound" => PimStatus::NotFound,
        _ => PimStatus::Rejected,
    }
}

fn fail(e: SessionError) -> PimStatus {
    set_error(format!("{}: {e}", e.kind()));
    status_of(&e)
}

/// Runs `f`, converting panics to [`PimStatus::Internal`].
fn guard(f: impl FnOnce() -> PimStatus) -> PimStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal error (panic)");
            PimStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, PimStatus> {
    if p.is_null() {
        set_error("null string argument");
        return Err(PimStatus::NullArgument);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("string argument is not UTF-8");
        PimStatus::InvalidUtf8
    })
}

unsafe fn session_mut<'a>(s: *mut PimSession) -> Result<&'a mut Session, PimStatus> {
    s.as_mut().map(|s| &mut s.inner).ok_or_else(|| {
        set_error("null session");
        PimStatus::NullArgument
    })
}

unsafe fn session_ref<'a>(s: *const PimSession) -> Result<&'a Session, PimStatus> {
    s.as_ref().map(|s| &s.inner).ok_or_else(|| {
        set_error("null session");
        PimStatus::NullArgument
    })
}

unsafe fn give_string(out: *mut *mut c_char, value: String) -> PimStatus {
    if out.is_null() {
        set_error("null output pointer");
        return PimStatus::NullArgument;
    }
    *out = CString::new(value).expect("JSON has no nul bytes").into_raw();
    PimStatus::Ok
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

#[no_mangle]
pub extern "C" fn pim_abi_version() -> u32 {
    PIM_ABI_VERSION
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn pim_status_name(status: PimStatus) -> *const c_char {
    let name: &'static CStr = match status {
        PimStatus::Ok => c"Ok",
        PimStatus::NullArgument => c"NullArgument",
        PimStatus::InvalidUtf8 => c"InvalidUtf8",
        PimStatus::Malformed => c"Malformed",
        PimStatus::NotFound => c"NotFound",
        PimStatus::Rejected => c"Rejected",
        PimStatus::NothingToUndo => c"NothingToUndo",
        PimStatus::Io => c"Io",
        PimStatus::Internal => c"Internal",
    };
    name.as_ptr()
}

/// Message of the most recent failure on this thread; empty before any.
/// Valid until the next failing call from the same thread.
#[no_mangle]
pub extern "C" fn pim_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// New empty in-memory session.
#[no_mangle]
pub extern "C" fn pim_session_new() -> *mut PimSession {
    Box::into_raw(Box::new(PimSession { inner: Session::new() }))
}

/// Opens a project directory into `*out`. Load warnings are not reported.
///
/// # Safety
/// `dir` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pim_session_open(dir: *const c_char, out: *mut *mut PimSession) -> PimStatus {
    guard(|| {
        let dir = tri!(str_arg(dir));
        if out.is_null() {
            set_error("null output pointer");
            return PimStatus::NullArgument;
        }
        match Session::load(Path::new(dir)) {
            Ok((inner, _)) => {
                *out = Box::into_raw(Box::new(PimSession { inner }));
                PimStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Releases a session. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pim_session_free(s: *mut PimSession) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Writes the project (state, journal, images) into `dir`.
///
/// # Safety
/// `s` must be a live session and `dir` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pim_session_save(s: *mut PimSession, dir: *const c_char) -> PimStatus {
    guard(|| {
        let s = tri!(session_mut(s));
        let dir = tri!(str_arg(dir));
        s.save(Path::new(dir)).map_or_else(fail, |_| PimStatus::Ok)
    })
}

/// Applies one operator given as JSON (a bare operator or a journal record).
/// On success `*out_seq`, when not null, receives the journal sequence number.
///
/// # Safety
/// `s` must be a live session, `op_json` a nul-terminated string and
/// `out_seq` null or valid.
#[no_mangle]
pub unsafe extern "C" fn pim_session_apply_json(s: *mut PimSession, op_json: *const c_char, out_seq: *mut u64) -> PimStatus {
    guard(|| {
        let s = tri!(session_mut(s));
        let json = tri!(str_arg(op_json));
        let (seq, op) = match parse_op_input(json.as_bytes()) {
            Ok(v) => v,
            Err(e) => return fail(e),
        };
        let next = s.journal().len() as u64;
        if let Some(seq) = seq.filter(|q| *q != next) {
            set_error(format!("record seq {seq}, expected {next}"));
            return PimStatus::Rejected;
        }
        match s.apply(op) {
            Ok(a) => {
                if !out_seq.is_null() {
                    *out_seq = a.seq;
                }
                PimStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Reverts the last journal record.
///
/// # Safety
/// `s` must be a live session.
#[no_mangle]
pub unsafe extern "C" fn pim_session_undo(s: *mut PimSession) -> PimStatus {
    guard(|| {
        let s = tri!(session_mut(s));
        s.undo().map_or_else(fail, |_| PimStatus::Ok)
    })
}

/// Number of journal records; 0 for a null session.
///
/// # Safety
/// `s` must be null or a live session.
#[no_mangle]
pub unsafe extern "C" fn pim_session_journal_len(s: *const PimSession) -> u64 {
    s.as_ref().map_or(0, |s| s.inner.journal().len() as u64)
}

/// Number of live vertices; 0 for a null session.
///
/// # Safety
/// `s` must be null or a live session.
#[no_mangle]
pub unsafe extern "C" fn pim_session_vertex_count(s: *const PimSession) -> u64 {
    s.as_ref().map_or(0, |s| s.inner.mesh().num_vertices() as u64)
}

/// Writes the position of vertex `id` into `out[0..3]`.
///
/// # Safety
/// `s` must be a live session and `out` point to three doubles.
#[no_mangle]
pub unsafe extern "C" fn pim_session_vertex_position(s: *const PimSession, id: u32, out: *mut f64) -> PimStatus {
    guard(|| {
        let s = tri!(session_ref(s));
        if out.is_null() {
            set_error("null output pointer");
            return PimStatus::NullArgument;
        }
        match s.mesh().position(pim::VertexId(id)) {
            Some(p) => {
                std::slice::from_raw_parts_mut(out, 3).copy_from_slice(p.coords.as_slice());
                PimStatus::Ok
            }
            None => {
                set_error(format!("vertex v{id} does not exist"));
                PimStatus::NotFound
            }
        }
    })
}

/// Full model and derived state as JSON; identical strings mean identical state.
///
/// # Safety
/// `s` must be a live session and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pim_session_state_json(s: *const PimSession, out: *mut *mut c_char) -> PimStatus {
    guard(|| give_string(out, tri!(session_ref(s)).state_json()))
}

/// Hex SHA-256 of the state JSON.
///
/// # Safety
/// `s` must be a live session and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pim_session_state_digest(s: *const PimSession, out: *mut *mut c_char) -> PimStatus {
    guard(|| give_string(out, tri!(session_ref(s)).state_digest()))
}

/// Solve report, calibration report and degrees-of-freedom diagnosis as JSON.
///
/// # Safety
/// `s` must be a live session and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pim_session_report_json(s: *const PimSession, out: *mut *mut c_char) -> PimStatus {
    guard(|| {
        let report = tri!(session_ref(s)).report();
        give_string(out, serde_json::to_string(&report).expect("serializable"))
    })
}

/// Replays the journal from scratch and sets `*out_identical` to whether
/// the result is bit-identical to the current state.
///
/// # Safety
/// `s` must be a live session and `out_identical` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pim_session_verify_replay(s: *const PimSession, out_identical: *mut bool) -> PimStatus {
    guard(|| {
        let s = tri!(session_ref(s));
        if out_identical.is_null() {
            set_error("null output pointer");
            return PimStatus::NullArgument;
        }
        match s.verify_replay() {
            Ok(same) => {
                *out_identical = same;
                PimStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Writes `mesh.obj` (and, when texturing succeeds, `mesh.mtl` and
/// `atlas.png`) into `dir`.
///
/// # Safety
/// `s` must be a live session and `dir` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pim_session_export_obj(s: *mut PimSession, dir: *const c_char) -> PimStatus {
    guard(|| {
        let s = tri!(session_mut(s));
        let dir = tri!(str_arg(dir));
        s.export_obj(Path::new(dir)).map_or_else(fail, |_| PimStatus::Ok)
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `p` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pim_string_free(p: *mut c_char) {
    if !p.is_null() {
        drop(CString::from_raw(p));
    }
}
