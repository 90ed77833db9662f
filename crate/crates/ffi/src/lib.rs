//! C ABI over `ipls-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_from_*`
//! functions and released with the matching `*_free`. Fallible calls return an
//! [`IplsError`]; the message of the last failure on the calling thread is
//! available from [`ipls_last_error_message`]. Strings returned to the caller
//! are owned by it and must be released with [`ipls_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ipls_core::harness::{self, HarnessError, RunOutput, ScenarioConfig};
use ipls_core::partition::PartitionTable;
use ipls_core::{AgentId, PartitionId};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IplsError {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Runtime = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Scenario configuration.
pub struct IplsScenario(ScenarioConfig);

/// Metrics of a finished run.
pub struct IplsRun(RunOutput);

/// Partition-to-holder registry.
pub struct IplsPartitionTable(PartitionTable);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(code: IplsError, msg: impl Into<String>) -> IplsError {
    set_error(msg);
    code
}

fn harness_code(e: &HarnessError) -> IplsError {
    match e.exit_code() {
        2 => IplsError::Io,
        _ => match e {
            HarnessError::Config(_) => IplsError::Config,
            _ => IplsError::Runtime,
        },
    }
}

fn guard<F: FnOnce() -> IplsError>(f: F) -> IplsError {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => fail(IplsError::Panic, "panic inside ipls"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, IplsError> {
    if p.is_null() {
        return Err(fail(IplsError::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(IplsError::InvalidArgument, format!("{what} is not UTF-8")))
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw)
}

/// Message of the last failed call on this thread, or null. Free with
/// [`ipls_string_free`].
#[no_mangle]
pub extern "C" fn ipls_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |m| m.clone().into_raw()))
}

/// # Safety
/// `s` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn ipls_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ipls_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ----- scenarios -------------------------------------------------------------

/// Variant `index` of a named preset.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ipls_scenario_from_preset(
    name: *const c_char,
    index: usize,
    out: *mut *mut IplsScenario,
) -> IplsError {
    guard(|| {
        if out.is_null() {
            return fail(IplsError::NullPointer, "out is null");
        }
        let name = match str_arg(name, "name") {
            Ok(n) => n,
            Err(code) => return code,
        };
        let Some(p) = harness::preset(name) else {
            return fail(IplsError::InvalidArgument, format!("unknown preset `{name}`"));
        };
        let Some(cfg) = p.variants.into_iter().nth(index) else {
            return fail(IplsError::InvalidArgument, format!("preset `{name}` has no variant {index}"));
        };
        *out = Box::into_raw(Box::new(IplsScenario(cfg)));
        IplsError::Ok
    })
}

/// Number of variants of a named preset, 0 when unknown.
///
/// # Safety
/// `name` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ipls_preset_variant_count(name: *const c_char) -> usize {
    match str_arg(name, "name") {
        Ok(n) => harness::preset(n).map_or(0, |p| p.variants.len()),
        Err(_) => 0,
    }
}

/// Parses `key = value` config text.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ipls_scenario_from_config(
    text: *const c_char,
    out: *mut *mut IplsScenario,
) -> IplsError {
    guard(|| {
        if out.is_null() {
            return fail(IplsError::NullPointer, "out is null");
        }
        let text = match str_arg(text, "text") {
            Ok(t) => t,
            Err(code) => return code,
        };
        match ScenarioConfig::parse(text) {
            Ok(cfg) => {
                *out = Box::into_raw(Box::new(IplsScenario(cfg)));
                IplsError::Ok
            }
            Err(e) => fail(IplsError::Config, e.to_string()),
        }
    })
}

/// Overrides one key.
///
/// # Safety
/// `scenario` must be a live handle; `key` and `value` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ipls_scenario_set(
    scenario: *mut IplsScenario,
    key: *const c_char,
    value: *const c_char,
) -> IplsError {
    guard(|| {
        let Some(s) = scenario.as_mut() else {
            return fail(IplsError::NullPointer, "scenario is null");
        };
        let (key, value) = match (str_arg(key, "key"), str_arg(value, "value")) {
            (Ok(k), Ok(v)) => (k, v),
            (Err(code), _) | (_, Err(code)) => return code,
        };
        match s.0.set(key, value) {
            Ok(()) => IplsError::Ok,
            Err(e) => fail(IplsError::Config, e.to_string()),
        }
    })
}

/// Canonical config text of the scenario.
///
/// # Safety
/// `scenario` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ipls_scenario_to_text(
    scenario: *const IplsScenario,
    out: *mut *mut c_char,
) -> IplsError {
    guard(|| {
        let Some(s) = scenario.as_ref() else {
            return fail(IplsError::NullPointer, "scenario is null");
        };
        if out.is_null() {
            return fail(IplsError::NullPointer, "out is null");
        }
        *out = to_c_string(s.0.to_text());
        IplsError::Ok
    })
}

/// # Safety
/// `scenario` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn ipls_scenario_free(scenario: *mut IplsScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

// ----- runs ------------------------------------------------------------------

/// Runs the decentralized simulation. Relative dataset paths resolve against
/// `IPLS_DATA_DIR`.
///
/// # Safety
/// `scenario` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ipls_scenario_run(scenario: *const IplsScenario, out: *mut *mut IplsRun) -> IplsError {
    guard(|| {
        let Some(s) = scenario.as_ref() else {
            return fail(IplsError::NullPointer, "scenario is null");
        };
        if out.is_null() {
            return fail(IplsError::NullPointer, "out is null");
        }
        let dir = harness::data_dir_from_env();
        match harness::run_scenario(&s.0, dir.as_deref()) {
            Ok(run) => {
                *out = Box::into_raw(Box::new(IplsRun(run)));
                IplsError::Ok
            }
            Err(e) => fail(harness_code(&e), e.to_string()),
        }
    })
}

/// Metrics CSV of the run.
///
/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ipls_run_csv(run: *const IplsRun, out: *mut *mut c_char) -> IplsError {
    guard(|| {
        let Some(r) = run.as_ref() else {
            return fail(IplsError::NullPointer, "run is null");
        };
        if out.is_null() {
            return fail(IplsError::NullPointer, "out is null");
        }
        *out = to_c_string(r.0.csv());
        IplsError::Ok
    })
}

/// Number of global rows, including round 0.
///
/// # Safety
/// `run` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ipls_run_round_count(run: *const IplsRun) -> u32 {
    run.as_ref().map_or(0, |r| r.0.global().count() as u32)
}

/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ipls_run_final_accuracy(run: *const IplsRun, out: *mut f64) -> IplsError {
    let Some(r) = run.as_ref() else {
        return fail(IplsError::NullPointer, "run is null");
    };
    if out.is_null() {
        return fail(IplsError::NullPointer, "out is null");
    }
    *out = r.0.final_accuracy();
    IplsError::Ok
}

/// # Safety
/// `run` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn ipls_run_free(run: *mut IplsRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

// ----- partition tables ------------------------------------------------------

/// Table in which `initiator` holds all `k` partitions.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ipls_table_bootstrap(
    k: u32,
    pi: u32,
    rho: u32,
    initiator: u32,
    out: *mut *mut IplsPartitionTable,
) -> IplsError {
    guard(|| {
        if out.is_null() {
            return fail(IplsError::NullPointer, "out is null");
        }
        match PartitionTable::bootstrap(k, pi, rho, AgentId(initiator)) {
            Ok(t) => {
                *out = Box::into_raw(Box::new(IplsPartitionTable(t)));
                IplsError::Ok
            }
            Err(e) => fail(IplsError::InvalidArgument, e.to_string()),
        }
    })
}

unsafe fn write_ids(ids: &[u32], buf: *mut u32, cap: usize, len: *mut usize) -> IplsError {
    if len.is_null() {
        return fail(IplsError::NullPointer, "len is null");
    }
    *len = ids.len();
    if ids.len() > cap {
        return fail(IplsError::BufferTooSmall, format!("need room for {} entries", ids.len()));
    }
    if !ids.is_empty() {
        if buf.is_null() {
            return fail(IplsError::NullPointer, "buffer is null");
        }
        ptr::copy_nonoverlapping(ids.as_ptr(), buf, ids.len());
    }
    IplsError::Ok
}

/// Admits `agent`; the partitions it obtained (ascending) go to `assigned`.
/// An empty result means the agent trains without holding anything.
///
/// # Safety
/// `table` must be a live handle; `assigned` must have room for `cap` values;
/// `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ipls_table_join(
    table: *mut IplsPartitionTable,
    agent: u32,
    assigned: *mut u32,
    cap: usize,
    len: *mut usize,
) -> IplsError {
    guard(|| {
        let Some(t) = table.as_mut() else {
            return fail(IplsError::NullPointer, "table is null");
        };
        // Check capacity first so a failed call leaves the table untouched.
        let mut trial = t.0.clone();
        let result = match trial.join(AgentId(agent)) {
            Ok(r) => r,
            Err(e) => return fail(IplsError::InvalidArgument, e.to_string()),
        };
        let ids: Vec<u32> = result.assigned.iter().map(|p| p.0).collect();
        let code = write_ids(&ids, assigned, cap, len);
        if code == IplsError::Ok {
            t.0 = trial;
        }
        code
    })
}

/// Holders of `partition`, ascending.
///
/// # Safety
/// `table` must be a live handle; `holders` must have room for `cap` values;
/// `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ipls_table_lookup(
    table: *const IplsPartitionTable,
    partition: u32,
    holders: *mut u32,
    cap: usize,
    len: *mut usize,
) -> IplsError {
    guard(|| {
        let Some(t) = table.as_ref() else {
            return fail(IplsError::NullPointer, "table is null");
        };
        match t.0.lookup(PartitionId(partition)) {
            Ok(h) => {
                let ids: Vec<u32> = h.iter().map(|a| a.0).collect();
                write_ids(&ids, holders, cap, len)
            }
            Err(e) => fail(IplsError::InvalidArgument, e.to_string()),
        }
    })
}

/// Canonical text form of the table.
///
/// # Safety
/// `table` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ipls_table_to_text(
    table: *const IplsPartitionTable,
    out: *mut *mut c_char,
) -> IplsError {
    guard(|| {
        let Some(t) = table.as_ref() else {
            return fail(IplsError::NullPointer, "table is null");
        };
        if out.is_null() {
            return fail(IplsError::NullPointer, "out is null");
        }
        *out = to_c_string(t.0.to_canonical_text());
        IplsError::Ok
    })
}

/// # Safety
/// `table` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn ipls_table_free(table: *mut IplsPartitionTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}
