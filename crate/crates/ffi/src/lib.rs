//! C ABI for lorasim.
//!
//! Every function returns an [`LsStatus`]; on failure the message is
//! available from [`ls_last_error`] on the same thread. Handles are opaque
//! and owned by the caller, who must release them with the matching `_free`
//! function. A handle must not be used from two threads at once.
//!
//! Panics never cross the boundary: they are reported as
//! [`LsStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lorasim::cli::{export_tables, parse_scenario, run_scenario, RunError, RunOutputs, ScenarioSpec};
use lorasim::phy::{airtime, RadioConfig};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Malformed or invalid scenario text.
    Parse = 3,
    Io = 4,
    /// The simulation failed or was aborted.
    Run = 5,
    /// A firmware module could not be loaded or faulted.
    Firmware = 6,
    /// Internal error; the call had no effect on its inputs.
    Panic = 7,
    /// A string argument was not valid UTF-8.
    Utf8 = 8,
    /// Index past the end of a table.
    OutOfRange = 9,
}

/// Parsed scenario.
pub struct LsScenario {
    spec: ScenarioSpec,
}

/// Outputs of a finished run.
pub struct LsRun {
    outputs: RunOutputs,
}

/// Per-radio summary. `pdr` and `mean_snr_db` are NaN when undefined.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsRadioSummary {
    pub sent: u64,
    pub delivered: u64,
    pub pdr: f64,
    pub mean_snr_db: f64,
    pub energy_j: f64,
}

/// LoRa modulation parameters for `ls_airtime`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsRadioConfig {
    pub frequency_hz: u32,
    pub sf: u8,
    pub bw_hz: u32,
    /// Coding rate 4/(4+cr), cr in 1..=4.
    pub cr: u8,
    pub preamble_symbols: u16,
    pub explicit_header: bool,
    pub crc_on: bool,
    pub ldro: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(LsStatus, String);

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        let status = match e {
            RunError::Scenario(_) => LsStatus::Parse,
            RunError::Firmware { .. } => LsStatus::Firmware,
            _ => LsStatus::Run,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal error: {msg}"));
            LsStatus::Panic
        }
    }
}

fn null() -> Failure {
    Failure(LsStatus::NullPointer, "null pointer argument".into())
}

/// # Safety
/// `p` must be null or point to a NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(LsStatus::Utf8, format!("string argument is not UTF-8: {e}")))
}

/// # Safety
/// `p` must be null or valid for reads of `T`.
unsafe fn deref<'a, T>(p: *const T) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(null)
}

/// Message of the last failed call on this thread, or "" if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ls_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ls_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses scenario text.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ls_scenario_parse(text: *const c_char, out: *mut *mut LsScenario) -> LsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let text = str_arg(text)?;
        let spec = parse_scenario(text).map_err(|e| Failure(LsStatus::Parse, e.to_string()))?;
        *out = Box::into_raw(Box::new(LsScenario { spec }));
        Ok(())
    })
}

/// Reads and parses a scenario file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ls_scenario_load(path: *const c_char, out: *mut *mut LsScenario) -> LsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let path = str_arg(path)?;
        let text = std::fs::read_to_string(path).map_err(|e| Failure(LsStatus::Io, format!("{path}: {e}")))?;
        let spec = parse_scenario(&text).map_err(|e| Failure(LsStatus::Parse, format!("{path}: {e}")))?;
        *out = Box::into_raw(Box::new(LsScenario { spec }));
        Ok(())
    })
}

/// # Safety
/// `scenario` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn ls_scenario_free(scenario: *mut LsScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// # Safety
/// `scenario` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ls_scenario_set_seed(scenario: *mut LsScenario, seed: u64) -> LsStatus {
    guard(|| {
        scenario.as_mut().ok_or_else(null)?.spec.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `scenario` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ls_scenario_set_length(scenario: *mut LsScenario, length_s: f64) -> LsStatus {
    guard(|| {
        if !(length_s.is_finite() && length_s >= 0.0) {
            return Err(Failure(LsStatus::InvalidArgument, format!("length must be >= 0, got {length_s}")));
        }
        scenario.as_mut().ok_or_else(null)?.spec.length_s = length_s;
        Ok(())
    })
}

/// Runs a scenario to completion.
///
/// # Safety
/// `scenario` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ls_run(scenario: *const LsScenario, out: *mut *mut LsRun) -> LsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let outputs = run_scenario(&deref(scenario)?.spec)?;
        *out = Box::into_raw(Box::new(LsRun { outputs }));
        Ok(())
    })
}

/// # Safety
/// `run` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn ls_run_free(run: *mut LsRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Writes phy_packets.csv, radio_receptions.csv and energy_events.csv.
///
/// # Safety
/// `run` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ls_run_export(run: *const LsRun, dir: *const c_char) -> LsStatus {
    guard(|| {
        let run = deref(run)?;
        let dir = str_arg(dir)?;
        export_tables(&run.outputs, Path::new(dir))
            .map(drop)
            .map_err(|e| Failure(LsStatus::Io, format!("{dir}: {e}")))
    })
}

/// Row counts of the three tables. Null pointers are skipped.
///
/// # Safety
/// `run` must be a live handle; the out pointers null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ls_run_table_sizes(
    run: *const LsRun,
    packets: *mut usize,
    receptions: *mut usize,
    energy_events: *mut usize,
) -> LsStatus {
    guard(|| {
        let o = &deref(run)?.outputs;
        for (p, n) in [(packets, o.packets.len()), (receptions, o.receptions.len()), (energy_events, o.energy.len())] {
            if let Some(p) = p.as_mut() {
                *p = n;
            }
        }
        Ok(())
    })
}

/// Number of radios in the summary.
///
/// # Safety
/// `run` must be a live handle and `count` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ls_run_radio_count(run: *const LsRun, count: *mut usize) -> LsStatus {
    guard(|| {
        let n = deref(run)?.outputs.summary.len();
        *count.as_mut().ok_or_else(null)? = n;
        Ok(())
    })
}

/// Summary of radio `index`.
///
/// # Safety
/// `run` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ls_run_radio_summary(run: *const LsRun, index: usize, out: *mut LsRadioSummary) -> LsStatus {
    guard(|| {
        let s = radio(run, index)?;
        *out.as_mut().ok_or_else(null)? = LsRadioSummary {
            sent: s.sent,
            delivered: s.delivered,
            pdr: s.pdr.unwrap_or(f64::NAN),
            mean_snr_db: s.mean_snr_db.unwrap_or(f64::NAN),
            energy_j: s.energy_j,
        };
        Ok(())
    })
}

/// Copies the id of radio `index` into `buf` (NUL-terminated, truncated to
/// `len`) and stores the full length without the NUL in `needed`. Pass a
/// null `buf` to query the length.
///
/// # Safety
/// `run` must be a live handle; `buf` null or valid for `len` bytes;
/// `needed` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ls_run_radio_id(
    run: *const LsRun,
    index: usize,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> LsStatus {
    guard(|| {
        let id = radio(run, index)?.radio_id.as_bytes();
        if let Some(n) = needed.as_mut() {
            *n = id.len();
        }
        if !buf.is_null() && len > 0 {
            let n = id.len().min(len - 1);
            ptr::copy_nonoverlapping(id.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        Ok(())
    })
}

unsafe fn radio<'a>(run: *const LsRun, index: usize) -> Result<&'a lorasim::cli::RadioSummary, Failure> {
    let summary = &deref(run)?.outputs.summary;
    summary.get(index).ok_or_else(|| {
        Failure(
            LsStatus::OutOfRange,
            format!("radio index {index} out of range ({} radios)", summary.len()),
        )
    })
}

/// Time on air in seconds of a `payload_len`-byte frame.
///
/// # Safety
/// `config` must be valid for reads and `seconds` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ls_airtime(config: *const LsRadioConfig, payload_len: usize, seconds: *mut f64) -> LsStatus {
    guard(|| {
        let c = deref(config)?;
        let mut cfg = RadioConfig::new(c.frequency_hz, c.sf, c.bw_hz);
        cfg.cr = c.cr;
        cfg.preamble_symbols = c.preamble_symbols;
        cfg.explicit_header = c.explicit_header;
        cfg.crc_on = c.crc_on;
        cfg.ldro = c.ldro;
        let t = airtime(&cfg, payload_len).map_err(|e| Failure(LsStatus::InvalidArgument, e.to_string()))?;
        *seconds.as_mut().ok_or_else(null)? = t.total;
        Ok(())
    })
}
