//! C ABI over the bagwise core.
//!
//! Every object crosses the boundary as an opaque handle created by a
//! constructor such as `bw_formula_parse` and released with the matching
//! `bw_*_free`. Fallible calls return a [`BwStatus`]; on failure the message
//! is available from [`bw_last_error`] on the same thread until the next
//! failing call. Strings returned through `char **` are owned by the caller
//! and released with [`bw_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use bagwise::agents::{Agent, NoisyAgent, ScriptedAgent};
use bagwise::cnf::{parse_dimacs, CnfFormula, SatTaskFile};
use bagwise::csp::{cnf_to_csp, primal_graph, CspInstance, PrimalGraph};
use bagwise::orchestrator::{decompose_with, run_episode, transcript_of, EpisodeConfig, EpisodeResult, Mode, TaskBundle};
use bagwise::solver::{solve_backtracking, SolveStatus};
use bagwise::treedecomp::{Method, TreeDecomposition};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BwStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    InvalidArgument = 4,
    OutOfRange = 5,
    Episode = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BwMethod {
    /// Exact for small graphs, min-fill otherwise.
    Auto = 0,
    MinFill = 1,
    MinDegree = 2,
    Exact = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BwMode {
    Full = 0,
    Decomposed = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BwSolveResult {
    Sat = 0,
    Unsat = 1,
    Unknown = 2,
}

impl BwMethod {
    fn method(self) -> Option<Method> {
        match self {
            BwMethod::Auto => None,
            BwMethod::MinFill => Some(Method::MinFill),
            BwMethod::MinDegree => Some(Method::MinDegree),
            BwMethod::Exact => Some(Method::Exact),
        }
    }
}

/// A parsed CNF formula with its constraint instance and primal graph.
pub struct BwFormula {
    formula: CnfFormula,
    instance: CspInstance,
    graph: PrimalGraph,
}

pub struct BwDecomposition {
    td: TreeDecomposition,
    pace: String,
}

pub struct BwTask {
    task: TaskBundle,
}

pub struct BwEpisode {
    task: TaskBundle,
    result: EpisodeResult,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(text).expect("nul bytes removed")));
}

fn fail(status: BwStatus, message: impl Into<String>) -> BwStatus {
    set_error(message);
    status
}

/// Runs `f`, turning a panic into [`BwStatus::Panic`].
fn guard(f: impl FnOnce() -> BwStatus) -> BwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(BwStatus::Panic, msg)
        }
    }
}

/// # Safety
/// `s` must be null or a valid nul-terminated string.
unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, BwStatus> {
    if s.is_null() {
        return Err(fail(BwStatus::NullPointer, "string argument is null"));
    }
    CStr::from_ptr(s).to_str().map_err(|e| fail(BwStatus::InvalidUtf8, e.to_string()))
}

/// # Safety
/// `p` must be null or point to a live `T` created by this library.
unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, BwStatus> {
    p.as_ref().ok_or_else(|| fail(BwStatus::NullPointer, format!("{what} handle is null")))
}

/// # Safety
/// `out` must be null or valid for a write of `T`.
unsafe fn put<T>(out: *mut T, value: T) -> BwStatus {
    if out.is_null() {
        return fail(BwStatus::NullPointer, "output pointer is null");
    }
    out.write(value);
    BwStatus::Ok
}

fn string_out(out: *mut *mut c_char, text: &str) -> BwStatus {
    match CString::new(text) {
        // SAFETY: the caller passed a pointer valid for one write.
        Ok(c) => unsafe { put(out, c.into_raw()) },
        Err(_) => fail(BwStatus::InvalidArgument, "string contains a nul byte"),
    }
}

macro_rules! try_ffi {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

/// Message of the last failing call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bw_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn bw_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bw_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses DIMACS CNF text.
///
/// # Safety
/// `dimacs` must be a nul-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn bw_formula_parse(dimacs: *const c_char, out: *mut *mut BwFormula) -> BwStatus {
    guard(|| {
        let text = try_ffi!(read_str(dimacs));
        let formula = try_ffi!(parse_dimacs(text).map_err(|e| fail(BwStatus::Parse, e.to_string())));
        let instance = try_ffi!(cnf_to_csp(&formula).map_err(|e| fail(BwStatus::InvalidArgument, e.to_string())));
        let graph = primal_graph(&instance);
        put(out, Box::into_raw(Box::new(BwFormula { formula, instance, graph })))
    })
}

/// # Safety
/// `f` must be null or a handle from [`bw_formula_parse`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bw_formula_free(f: *mut BwFormula) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// # Safety
/// `f` must be a live formula handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn bw_formula_num_variables(f: *const BwFormula, out: *mut u32) -> BwStatus {
    guard(|| put(out, try_ffi!(get(f, "formula")).formula.num_variables()))
}

/// # Safety
/// `f` must be a live formula handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn bw_formula_num_clauses(f: *const BwFormula, out: *mut usize) -> BwStatus {
    guard(|| put(out, try_ffi!(get(f, "formula")).formula.num_clauses()))
}

/// Solves the formula. `values` receives one entry per variable, in
/// variable order: 1 true, 0 false, -1 when no model was found.
///
/// # Safety
/// `f` must be a live formula handle; `values` must be valid for `len`
/// writes; `result` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn bw_solve(
    f: *const BwFormula,
    node_budget: u64,
    values: *mut i8,
    len: usize,
    result: *mut BwSolveResult,
) -> BwStatus {
    guard(|| {
        let f = try_ffi!(get(f, "formula"));
        let n = f.formula.num_variables() as usize;
        if values.is_null() && n > 0 {
            return fail(BwStatus::NullPointer, "values buffer is null");
        }
        if len < n {
            return fail(BwStatus::BufferTooSmall, format!("values buffer holds {len}, formula has {n} variables"));
        }
        let r = solve_backtracking(&f.instance, node_budget);
        let slots = if n == 0 { &mut [][..] } else { std::slice::from_raw_parts_mut(values, n) };
        slots.fill(-1);
        if let Some(model) = &r.assignment {
            for (&v, &x) in model {
                slots[v as usize - 1] = x as i8;
            }
        }
        let status = match r.status {
            SolveStatus::Sat => BwSolveResult::Sat,
            SolveStatus::Unsat => BwSolveResult::Unsat,
            SolveStatus::BudgetExhausted => BwSolveResult::Unknown,
        };
        put(result, status)
    })
}

/// Tree decomposition of the formula's primal graph.
///
/// # Safety
/// `f` must be a live formula handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn bw_decompose(f: *const BwFormula, method: BwMethod, out: *mut *mut BwDecomposition) -> BwStatus {
    guard(|| {
        let f = try_ffi!(get(f, "formula"));
        let td = decompose_with(&f.instance, method.method());
        let pace = td.to_pace(&f.graph);
        put(out, Box::into_raw(Box::new(BwDecomposition { td, pace })))
    })
}

/// # Safety
/// `d` must be null or a handle from [`bw_decompose`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bw_decomposition_free(d: *mut BwDecomposition) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Width (largest bag size minus one; -1 when there are no bags).
///
/// # Safety
/// `d` must be a live decomposition handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn bw_decomposition_width(d: *const BwDecomposition, out: *mut i64) -> BwStatus {
    guard(|| put(out, try_ffi!(get(d, "decomposition")).td.width()))
}

/// # Safety
/// `d` must be a live decomposition handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn bw_decomposition_num_bags(d: *const BwDecomposition, out: *mut usize) -> BwStatus {
    guard(|| put(out, try_ffi!(get(d, "decomposition")).td.num_bags()))
}

/// Copies the variables of bag `bag` into `buf` in increasing order and
/// stores the bag size in `size`. With a null or short `buf`, only `size`
/// is written and [`BwStatus::BufferTooSmall`] is returned.
///
/// # Safety
/// `d` must be a live decomposition handle; `buf` must be null or valid for
/// `cap` writes; `size` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn bw_decomposition_bag(
    d: *const BwDecomposition,
    bag: usize,
    buf: *mut u32,
    cap: usize,
    size: *mut usize,
) -> BwStatus {
    guard(|| {
        let d = try_ffi!(get(d, "decomposition"));
        let Some(b) = d.td.bags().get(bag) else {
            return fail(BwStatus::OutOfRange, format!("bag {bag} of {}", d.td.num_bags()));
        };
        let status = put(size, b.vertices.len());
        if status != BwStatus::Ok {
            return status;
        }
        if buf.is_null() || cap < b.vertices.len() {
            return fail(BwStatus::BufferTooSmall, format!("bag {bag} has {} variables", b.vertices.len()));
        }
        for (i, &v) in b.vertices.iter().enumerate() {
            buf.add(i).write(v);
        }
        BwStatus::Ok
    })
}

/// PACE `.td` text of the decomposition; free with [`bw_string_free`].
///
/// # Safety
/// `d` must be a live decomposition handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn bw_decomposition_to_pace(d: *const BwDecomposition, out: *mut *mut c_char) -> BwStatus {
    guard(|| string_out(out, &try_ffi!(get(d, "decomposition")).pace))
}

/// Builds a task from a SAT task bundle in JSON (`id`, `cnf`, `story`,
/// `mapping`).
///
/// # Safety
/// `json` must be a nul-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn bw_task_from_json(json: *const c_char, method: BwMethod, out: *mut *mut BwTask) -> BwStatus {
    guard(|| {
        let text = try_ffi!(read_str(json));
        let file: SatTaskFile = try_ffi!(serde_json::from_str(text).map_err(|e| fail(BwStatus::Parse, e.to_string())));
        let task = try_ffi!(TaskBundle::from_sat_task(&file, "task", method.method()).map_err(|e| fail(BwStatus::InvalidArgument, e.to_string())));
        put(out, Box::into_raw(Box::new(BwTask { task })))
    })
}

/// # Safety
/// `t` must be null or a handle from [`bw_task_from_json`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bw_task_free(t: *mut BwTask) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Runs one episode with the scripted agent (`flip_probability` 0) or the
/// noisy agent seeded with `seed`. `max_rounds` 0 uses the default budget.
///
/// # Safety
/// `t` must be a live task handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn bw_run_episode(
    t: *const BwTask,
    mode: BwMode,
    flip_probability: f64,
    seed: u64,
    max_rounds: usize,
    out: *mut *mut BwEpisode,
) -> BwStatus {
    guard(|| {
        let t = try_ffi!(get(t, "task"));
        if !(0.0..=1.0).contains(&flip_probability) {
            return fail(BwStatus::InvalidArgument, format!("flip probability {flip_probability} is outside [0, 1]"));
        }
        let agent: Box<dyn Agent> = if flip_probability == 0.0 {
            Box::new(ScriptedAgent::default())
        } else {
            Box::new(NoisyAgent::new(flip_probability, seed))
        };
        let mut config = EpisodeConfig::new(match mode {
            BwMode::Full => Mode::Full,
            BwMode::Decomposed => Mode::Decomposed,
        });
        config.max_rounds = (max_rounds > 0).then_some(max_rounds);
        let result = try_ffi!(run_episode(&t.task, agent.as_ref(), &config).map_err(|e| fail(BwStatus::Episode, e.to_string())));
        put(out, Box::into_raw(Box::new(BwEpisode { task: t.task.clone(), result })))
    })
}

/// # Safety
/// `e` must be null or a handle from [`bw_run_episode`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bw_episode_free(e: *mut BwEpisode) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// # Safety
/// `e` must be a live episode handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn bw_episode_solved(e: *const BwEpisode, out: *mut bool) -> BwStatus {
    guard(|| put(out, try_ffi!(get(e, "episode")).result.solved()))
}

/// # Safety
/// `e` must be a live episode handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn bw_episode_rounds(e: *const BwEpisode, out: *mut usize) -> BwStatus {
    guard(|| put(out, try_ffi!(get(e, "episode")).result.rounds_used))
}

/// JSON-lines transcript of the episode; free with [`bw_string_free`].
///
/// # Safety
/// `e` must be a live episode handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn bw_episode_transcript(e: *const BwEpisode, out: *mut *mut c_char) -> BwStatus {
    guard(|| {
        let e = try_ffi!(get(e, "episode"));
        string_out(out, &transcript_of(&e.task, &e.result).to_jsonl())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        unsafe { CStr::from_ptr(bw_last_error()) }.to_string_lossy().into_owned()
    }

    fn parse(text: &str) -> *mut BwFormula {
        let c = CString::new(text).unwrap();
        let mut f = ptr::null_mut();
        assert_eq!(unsafe { bw_formula_parse(c.as_ptr(), &mut f) }, BwStatus::Ok);
        f
    }

    #[test]
    fn parse_errors_set_the_message() {
        let c = CString::new("p cnf 1 1\n5 0\n").unwrap();
        let mut f = ptr::null_mut();
        assert_eq!(unsafe { bw_formula_parse(c.as_ptr(), &mut f) }, BwStatus::Parse);
        assert!(f.is_null());
        assert!(!last_error().is_empty());
    }

    #[test]
    fn null_arguments_are_rejected() {
        let mut f = ptr::null_mut();
        assert_eq!(unsafe { bw_formula_parse(ptr::null(), &mut f) }, BwStatus::NullPointer);
        let mut n = 0u32;
        assert_eq!(unsafe { bw_formula_num_variables(ptr::null(), &mut n) }, BwStatus::NullPointer);
        assert!(last_error().contains("formula"));
        unsafe {
            bw_formula_free(ptr::null_mut());
            bw_string_free(ptr::null_mut());
        }
    }

    #[test]
    fn solve_fills_values() {
        let f = parse("p cnf 3 3\n1 2 0\n-1 0\n-2 3 0\n");
        let mut values = [9i8; 3];
        let mut result = BwSolveResult::Unknown;
        assert_eq!(unsafe { bw_solve(f, 1000, values.as_mut_ptr(), 3, &mut result) }, BwStatus::Ok);
        assert_eq!(result, BwSolveResult::Sat);
        assert_eq!(values, [0, 1, 1]);
        assert_eq!(unsafe { bw_solve(f, 1000, values.as_mut_ptr(), 2, &mut result) }, BwStatus::BufferTooSmall);
        unsafe { bw_formula_free(f) };
    }

    #[test]
    fn bag_query_reports_size_first() {
        let f = parse("p cnf 3 1\n1 2 3 0\n");
        let mut d = ptr::null_mut();
        assert_eq!(unsafe { bw_decompose(f, BwMethod::Exact, &mut d) }, BwStatus::Ok);
        let mut size = 0usize;
        assert_eq!(unsafe { bw_decomposition_bag(d, 0, ptr::null_mut(), 0, &mut size) }, BwStatus::BufferTooSmall);
        assert_eq!(size, 3);
        let mut buf = [0u32; 3];
        assert_eq!(unsafe { bw_decomposition_bag(d, 0, buf.as_mut_ptr(), 3, &mut size) }, BwStatus::Ok);
        assert_eq!(buf, [1, 2, 3]);
        assert_eq!(unsafe { bw_decomposition_bag(d, 7, buf.as_mut_ptr(), 3, &mut size) }, BwStatus::OutOfRange);
        unsafe {
            bw_decomposition_free(d);
            bw_formula_free(f);
        }
    }

    #[test]
    fn version_matches_the_crate() {
        assert_eq!(unsafe { CStr::from_ptr(bw_version()) }.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}
