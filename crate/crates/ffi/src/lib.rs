#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! C interface to the planner. Scenarios and result tables are opaque
//! handles; every call returns a [`PlpStatus`], and [`plp_last_error`] gives
//! the message of the last failure on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use plpgrid::harness::{load_scenario, parse_scenario, HarnessError, LoadedScenario, ResultRow};
use plpgrid::plp::{annualize_cost, plan_switches, sweep_der_capacity, CostSpec};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Validation = 5,
    Infeasible = 6,
    NonConvergence = 7,
    OutOfRange = 8,
    Panic = 9,
}

/// A loaded scenario.
pub struct PlpScenario {
    loaded: LoadedScenario,
    digest: CString,
}

/// Rows of a switch plan or DER sweep, sorted by key.
pub struct PlpTable {
    rows: Vec<ResultRow>,
    locations: Vec<CString>,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PlpRow {
    /// Switch count, or added DER MW.
    pub key: f64,
    pub served: f64,
    /// $/MWh.
    pub price: f64,
    /// MWh/yr.
    pub energy: f64,
    /// $/yr.
    pub total_cost: f64,
    /// $/yr.
    pub welfare: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &HarnessError) -> PlpStatus {
    match e {
        HarnessError::Usage(_) => PlpStatus::InvalidArgument,
        HarnessError::Io(_) => PlpStatus::Io,
        HarnessError::Parse(_) => PlpStatus::Parse,
        HarnessError::Validation(_) => PlpStatus::Validation,
        HarnessError::Infeasible(_) => PlpStatus::Infeasible,
        HarnessError::NonConvergence(_) => PlpStatus::NonConvergence,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (PlpStatus, String)>) -> PlpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PlpStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PlpStatus::Panic
        }
    }
}

fn harness(e: HarnessError) -> (PlpStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (PlpStatus, String) {
    (PlpStatus::NullPointer, format!("`{what}` is null"))
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (PlpStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (PlpStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

fn make_table(rows: Vec<ResultRow>) -> Result<Box<PlpTable>, (PlpStatus, String)> {
    let locations = rows
        .iter()
        .map(|r| CString::new(r.locations.clone()).map_err(|_| (PlpStatus::InvalidArgument, "location label".into())))
        .collect::<Result<_, _>>()?;
    Ok(Box::new(PlpTable { rows, locations }))
}

fn new_scenario(loaded: LoadedScenario) -> Box<PlpScenario> {
    let digest = CString::new(loaded.digest.clone()).expect("hex digest");
    Box::new(PlpScenario { loaded, digest })
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn plp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a scenario TOML file.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn plp_scenario_load(path: *const c_char, out: *mut *mut PlpScenario) -> PlpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let loaded = load_scenario(Path::new(path)).map_err(harness)?;
        *out = Box::into_raw(new_scenario(loaded));
        Ok(())
    })
}

/// Parses a scenario from TOML text.
///
/// # Safety
/// `text` is a NUL-terminated string; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn plp_scenario_parse(text: *const c_char, out: *mut *mut PlpScenario) -> PlpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let loaded = parse_scenario(str_arg(text, "text")?).map_err(harness)?;
        *out = Box::into_raw(new_scenario(loaded));
        Ok(())
    })
}

/// # Safety
/// `scenario` is null or a handle from `plp_scenario_load`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn plp_scenario_free(scenario: *mut PlpScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Hex sha256 of the scenario, owned by the handle.
///
/// # Safety
/// `scenario` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn plp_scenario_digest(scenario: *const PlpScenario) -> *const c_char {
    scenario.as_ref().map_or(ptr::null(), |s| s.digest.as_ptr())
}

/// Annualized cost of an asset: capital recovered over `lifetime` years at
/// `discount_rate`, plus the yearly operating cost.
///
/// # Safety
/// `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn plp_annualize_cost(
    capital: f64,
    operating: f64,
    discount_rate: f64,
    lifetime: f64,
    out: *mut f64,
) -> PlpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = CostSpec { capital, operating, discount_rate, lifetime };
        *out = annualize_cost(&spec).map_err(|e| (PlpStatus::InvalidArgument, e.to_string()))?;
        Ok(())
    })
}

/// Best switch set for each count in `k_min..=k_max` over the scenario's
/// uninstalled candidates.
///
/// # Safety
/// `scenario` is a live handle; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn plp_plan_switches(
    scenario: *const PlpScenario,
    k_min: usize,
    k_max: usize,
    out: *mut *mut PlpTable,
) -> PlpStatus {
    guard(|| {
        let s = scenario.as_ref().ok_or_else(|| null("scenario"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let scn = &s.loaded.scenario;
        let results = plan_switches(scn, &scn.candidates(), k_min, k_max).map_err(|e| harness(e.into()))?;
        let rows = results.iter().map(|r| ResultRow::from_plan(r.plan.switches.len() as f64, r)).collect();
        *out = Box::into_raw(make_table(rows)?);
        Ok(())
    })
}

/// Unit price for `count` added capacities `start + i·step` MW at DER site
/// `site_id`.
///
/// # Safety
/// `scenario` is a live handle, `site_id` a NUL-terminated string and `out`
/// points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn plp_sweep_der(
    scenario: *const PlpScenario,
    site_id: *const c_char,
    start: f64,
    step: f64,
    count: usize,
    out: *mut *mut PlpTable,
) -> PlpStatus {
    guard(|| {
        let s = scenario.as_ref().ok_or_else(|| null("scenario"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let id = str_arg(site_id, "site_id")?;
        let site = s.loaded.der_site(id).ok_or_else(|| (PlpStatus::InvalidArgument, format!("unknown DER site `{id}`")))?;
        if count == 0 || !(step > 0.0) {
            return Err((PlpStatus::InvalidArgument, "count >= 1 and step > 0".into()));
        }
        let grid: Vec<f64> = (0..count).map(|i| start + i as f64 * step).collect();
        let results = sweep_der_capacity(&s.loaded.scenario, site, &grid).map_err(|e| harness(e.into()))?;
        let rows = grid.iter().zip(&results).map(|(k, r)| ResultRow::from_plan(*k, r)).collect();
        *out = Box::into_raw(make_table(rows)?);
        Ok(())
    })
}

/// Number of rows, or 0 for a null handle.
///
/// # Safety
/// `table` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn plp_table_len(table: *const PlpTable) -> usize {
    table.as_ref().map_or(0, |t| t.rows.len())
}

/// # Safety
/// `table` is a live handle; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn plp_table_row(table: *const PlpTable, index: usize, out: *mut PlpRow) -> PlpStatus {
    guard(|| {
        let t = table.as_ref().ok_or_else(|| null("table"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let r = t.rows.get(index).ok_or_else(|| (PlpStatus::OutOfRange, format!("row {index} of {}", t.rows.len())))?;
        *out = PlpRow {
            key: r.key,
            served: r.served,
            price: r.price,
            energy: r.energy,
            total_cost: r.total_cost,
            welfare: r.welfare,
        };
        Ok(())
    })
}

/// Location label of a row (switch ids or DER site id), owned by the table;
/// null when out of range.
///
/// # Safety
/// `table` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn plp_table_locations(table: *const PlpTable, index: usize) -> *const c_char {
    table.as_ref().and_then(|t| t.locations.get(index)).map_or(ptr::null(), |c| c.as_ptr())
}

/// # Safety
/// `table` is null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn plp_table_free(table: *mut PlpTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}
