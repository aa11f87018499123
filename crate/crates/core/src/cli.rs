//! Command-line dispatch. Exit codes: 0 success, 1 task failure, 2 usage.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::cnf::SatTaskFile;
use crate::csp::{cnf_to_csp, primal_graph, CspAssignment, PrimalGraph};
use crate::orchestrator::{decompose_with, replay, Mode};
use crate::report::{frontier_report, load_rows, report_paths, run_nl2sql, run_satbench, write_report, AgentSpec, ExperimentConfig, RunSummary};
use crate::schema::{build_schema_graph, load_spider_schemas, prune_to_connecting_subgraph, PLAN_EXACT_LIMIT};
use crate::solver::{solve_backtracking, solve_by_traversal, SolveStatus, DEFAULT_NODE_BUDGET};
use crate::treedecomp::{decompose_exact, decompose_greedy, Heuristic, Method, TreeDecomposition};

pub const EXIT_OK: i32 = 0;
pub const EXIT_TASK_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "bagwise", version, about = "Tree-decomposition guided agent workflows for SAT and NL2SQL tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Export a tree decomposition of a CNF primal graph or a schema join graph.
    Decompose(DecomposeArgs),
    /// Solve a CNF or task bundle with the exact solver.
    Solve(SolveArgs),
    /// Run agent episodes over a directory of SAT task bundles.
    RunSatbench(RunArgs),
    /// Run agent episodes over NL2SQL query tasks.
    RunNl2sql(Nl2SqlArgs),
    /// Build frontier CSVs and a gnuplot script from a run directory.
    Report(ReportArgs),
    /// Verify a recorded transcript.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TdFormat {
    Pace,
    Json,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// DIMACS CNF file or SAT task bundle (.json).
    #[arg(long, conflicts_with_all = ["schema", "db", "targets"], required_unless_present = "schema")]
    pub cnf: Option<PathBuf>,
    /// Schema file in the benchmark's tables.json shape.
    #[arg(long, requires = "db")]
    pub schema: Option<PathBuf>,
    /// Database id within the schema file.
    #[arg(long)]
    pub db: Option<String>,
    /// Prune the schema graph to the tables connecting these targets.
    #[arg(long, value_delimiter = ',')]
    pub targets: Vec<String>,
    /// min-fill, min-degree or exact; exact for small graphs when omitted.
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    #[arg(long, value_enum, default_value = "pace")]
    pub format: TdFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Strategy {
    /// Backtracking over the whole instance.
    Backtrack,
    /// Bag-by-bag search along a tree decomposition.
    Traversal,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long, conflicts_with = "task", required_unless_present = "task")]
    pub cnf: Option<PathBuf>,
    /// SAT task bundle (.json); the answer is also printed per entity.
    #[arg(long)]
    pub task: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "backtrack")]
    pub strategy: Strategy,
    #[arg(long, default_value_t = DEFAULT_NODE_BUDGET)]
    pub node_budget: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Full,
    Decomposed,
    Both,
}

impl ModeArg {
    fn modes(self) -> Vec<Mode> {
        match self {
            ModeArg::Full => vec![Mode::Full],
            ModeArg::Decomposed => vec![Mode::Decomposed],
            ModeArg::Both => vec![Mode::Full, Mode::Decomposed],
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Directory of task files.
    #[arg(long)]
    pub tasks: PathBuf,
    /// scripted, noisy[:P] or remote.
    #[arg(long, default_value = "scripted")]
    pub agent: AgentSpec,
    #[arg(long, value_enum, default_value = "both")]
    pub mode: ModeArg,
    /// Flip probability of the noisy agent; overrides `noisy:P`.
    #[arg(long)]
    pub flip_probability: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Round budget per episode; three per variable when omitted.
    #[arg(long)]
    pub max_rounds: Option<usize>,
    /// Independent trajectories per (task, mode); reports use best-of-k.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub trajectories: u64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    /// In decomposed mode, send only the focus bag's part of the current assignment.
    #[arg(long)]
    pub bag_only: bool,
    /// Phrase requests through the task story and entity names.
    #[arg(long)]
    pub story: bool,
}

#[derive(Debug, Args)]
pub struct Nl2SqlArgs {
    /// Directory holding queries.json (and tables.json unless --schema is given).
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// scripted or remote.
    #[arg(long, default_value = "scripted")]
    pub agent: AgentSpec,
    #[arg(long, value_enum, default_value = "both")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub trajectories: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory (or any directory of transcripts and results).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Rows CSV; cells, delta and gnuplot files are written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Transcript files or directories of them.
    #[arg(required = true)]
    pub transcripts: Vec<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(message) => {
            let _ = writeln!(err, "error: {message}");
            EXIT_TASK_FAILURE
        }
    }
}

type CmdResult = Result<i32, String>;

fn execute(command: Command, out: &mut dyn Write) -> CmdResult {
    match command {
        Command::Decompose(a) => decompose(&a, out),
        Command::Solve(a) => solve(&a, out),
        Command::RunSatbench(a) => run_sat(&a, out),
        Command::RunNl2sql(a) => run_sql(&a, out),
        Command::Report(a) => report(&a, out),
        Command::Replay(a) => replay_files(&a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), String> {
    out.write_all(text.as_bytes()).map_err(|e| e.to_string())
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

/// A DIMACS file, or a task bundle when the file is JSON.
fn read_task(path: &Path) -> Result<SatTaskFile, String> {
    let text = read(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    } else {
        Ok(SatTaskFile { id: None, cnf: text, story: String::new(), mapping: Vec::new() })
    }
}

fn decompose_graph(graph: &PrimalGraph, method: Option<Method>) -> TreeDecomposition {
    let exact = || decompose_exact(graph, None).unwrap_or_else(|_| decompose_greedy(graph, Heuristic::MinFill));
    match method {
        None if graph.num_vertices() <= PLAN_EXACT_LIMIT => exact(),
        None | Some(Method::MinFill) => decompose_greedy(graph, Heuristic::MinFill),
        Some(Method::MinDegree) => decompose_greedy(graph, Heuristic::MinDegree),
        Some(Method::Exact) => exact(),
    }
}

#[derive(Serialize)]
struct TdExport<'a> {
    /// Vertex names in PACE index order (1-based in PACE text).
    vertices: Vec<String>,
    treewidth: i64,
    decomposition: &'a TreeDecomposition,
}

fn decompose(a: &DecomposeArgs, out: &mut dyn Write) -> CmdResult {
    let (td, graph, names) = if let Some(path) = &a.cnf {
        let formula = read_task(path)?.formula().map_err(|e| format!("{}: {e}", path.display()))?;
        let instance = cnf_to_csp(&formula).map_err(|e| e.to_string())?;
        let graph = primal_graph(&instance);
        let td = decompose_with(&instance, a.method);
        let names = graph.vertices().iter().map(|v| format!("x{v}")).collect();
        (td, graph, names)
    } else {
        let path = a.schema.as_ref().expect("clap requires --cnf or --schema");
        let db = a.db.as_deref().expect("clap requires --db with --schema");
        let schemas = load_spider_schemas(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let schema = schemas.iter().find(|s| s.db_id == db).ok_or_else(|| format!("no database {db:?} in {}", path.display()))?;
        let mut graph = build_schema_graph(schema).map_err(|e| e.to_string())?;
        if !a.targets.is_empty() {
            graph = prune_to_connecting_subgraph(&graph, &a.targets).map_err(|e| e.to_string())?;
        }
        let primal = graph.primal();
        let td = decompose_graph(&primal, a.method);
        (td, primal, graph.tables.clone())
    };
    let text = match a.format {
        TdFormat::Pace => {
            let mut text = String::new();
            if a.schema.is_some() {
                for (i, name) in names.iter().enumerate() {
                    text.push_str(&format!("c vertex {} {name}\n", i + 1));
                }
            }
            text + &td.to_pace(&graph)
        }
        TdFormat::Json => {
            let export = TdExport { vertices: names, treewidth: td.width(), decomposition: &td };
            serde_json::to_string_pretty(&export).map_err(|e| e.to_string())? + "\n"
        }
    };
    emit(out, &text)?;
    Ok(EXIT_OK)
}

fn solve(a: &SolveArgs, out: &mut dyn Write) -> CmdResult {
    let path = a.cnf.as_ref().or(a.task.as_ref()).expect("clap requires --cnf or --task");
    let task = read_task(path)?;
    let formula = task.formula().map_err(|e| format!("{}: {e}", path.display()))?;
    let instance = cnf_to_csp(&formula).map_err(|e| e.to_string())?;
    let (status, assignment): (SolveStatus, Option<CspAssignment>) = match a.strategy {
        Strategy::Backtrack => {
            let r = solve_backtracking(&instance, a.node_budget);
            (r.status, r.assignment)
        }
        Strategy::Traversal => {
            let td = decompose_with(&instance, None);
            let (found, _) = solve_by_traversal(&instance, &td).map_err(|e| e.to_string())?;
            (if found.is_some() { SolveStatus::Sat } else { SolveStatus::Unsat }, found)
        }
    };
    let mut text = String::new();
    match (status, assignment) {
        (SolveStatus::Sat, Some(model)) => {
            text.push_str("s SATISFIABLE\nv");
            for (&v, &x) in &model {
                text.push_str(&format!(" {}", if x == 1 { v as i64 } else { -(v as i64) }));
            }
            text.push_str(" 0\n");
            for m in &task.mapping {
                let var = m.literal.unsigned_abs() as u32;
                if let Some(&x) = model.get(&var) {
                    text.push_str(&format!("c {} = {}\n", m.entity, (x == 1) == (m.literal > 0)));
                }
            }
        }
        (SolveStatus::Unsat, _) => text.push_str("s UNSATISFIABLE\n"),
        _ => {
            emit(out, "s UNKNOWN\n")?;
            return Err(format!("node budget of {} exhausted", a.node_budget));
        }
    }
    emit(out, &text)?;
    Ok(EXIT_OK)
}

fn print_summary(out: &mut dyn Write, summary: &RunSummary, dir: &Path) -> CmdResult {
    let mut text = String::new();
    for m in &summary.modes {
        text.push_str(&format!("{}: {}/{} solved\n", m.mode, m.solved, m.episodes));
    }
    for f in &summary.failures {
        text.push_str(&format!("failed: {f}\n"));
    }
    text.push_str(&format!("wrote {}\n", dir.display()));
    emit(out, &text)?;
    Ok(if summary.failures.is_empty() { EXIT_OK } else { EXIT_TASK_FAILURE })
}

fn run_sat(a: &RunArgs, out: &mut dyn Write) -> CmdResult {
    let mut config = ExperimentConfig::new(&a.tasks, &a.out);
    config.modes = a.mode.modes();
    config.agent = match (a.agent, a.flip_probability) {
        (AgentSpec::Noisy { .. }, Some(p)) if (0.0..=1.0).contains(&p) => AgentSpec::Noisy { flip_probability: p },
        (AgentSpec::Noisy { .. }, Some(p)) => return Err(format!("flip probability {p} is outside [0, 1]")),
        (_, Some(_)) => return Err("--flip-probability needs --agent noisy".into()),
        (agent, None) => agent,
    };
    config.seed = a.seed;
    config.max_rounds = a.max_rounds;
    config.trajectories = a.trajectories as usize;
    config.jobs = a.jobs;
    config.method = a.method;
    config.bag_only_visibility = a.bag_only;
    config.story_mode = a.story;
    let summary = run_satbench(&config).map_err(|e| e.to_string())?;
    print_summary(out, &summary, &a.out)
}

fn run_sql(a: &Nl2SqlArgs, out: &mut dyn Write) -> CmdResult {
    let mut config = ExperimentConfig::new(&a.tasks, &a.out);
    config.modes = a.mode.modes();
    config.agent = a.agent;
    config.seed = a.seed;
    config.trajectories = a.trajectories as usize;
    config.jobs = a.jobs;
    let summary = run_nl2sql(&config, a.schema.as_deref()).map_err(|e| e.to_string())?;
    print_summary(out, &summary, &a.out)
}

fn report(a: &ReportArgs, out: &mut dyn Write) -> CmdResult {
    let rows = load_rows(&a.input).map_err(|e| e.to_string())?;
    if rows.is_empty() {
        return Err(format!("no transcripts or results under {}", a.input.display()));
    }
    let report = frontier_report(&rows);
    write_report(&report, &a.out).map_err(|e| e.to_string())?;
    let (cells, delta, gp) = report_paths(&a.out);
    let mut text = String::new();
    for mode in [Mode::Full, Mode::Decomposed] {
        if let Some(rate) = report.solved_rate(mode) {
            text.push_str(&format!("{mode}: {rate:.4}\n"));
        }
    }
    text.push_str(&format!("cells where only decomposed solves: {}\n", report.decomposed_only_cells()));
    for p in [&a.out, &cells, &delta, &gp] {
        text.push_str(&format!("wrote {}\n", p.display()));
    }
    emit(out, &text)?;
    Ok(EXIT_OK)
}

fn transcript_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>, String> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| format!("{}: {e}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|e| e == "jsonl"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn replay_files(a: &ReplayArgs, out: &mut dyn Write) -> CmdResult {
    let files = transcript_files(&a.transcripts)?;
    if files.is_empty() {
        return Err("no transcripts found".into());
    }
    let mut failed = 0;
    let mut text = String::new();
    for f in &files {
        match replay(&read(f)?) {
            Ok(r) => {
                let verdict = if r.verified { "ok" } else { "MISMATCH" };
                text.push_str(&format!("{verdict} {} claimed={:?} solves={}\n", f.display(), r.claimed, r.solves));
                for m in &r.messages {
                    text.push_str(&format!("  {m}\n"));
                }
                failed += usize::from(!r.verified);
            }
            Err(e) => {
                text.push_str(&format!("MISMATCH {}: {e}\n", f.display()));
                failed += 1;
            }
        }
    }
    text.push_str(&format!("{} of {} transcripts verified\n", files.len() - failed, files.len()));
    emit(out, &text)?;
    Ok(if failed == 0 { EXIT_OK } else { EXIT_TASK_FAILURE })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("bagwise").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        let (code, _, err) = call(&["frobnicate"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("Usage"));
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(call(&["solve", "--cnf", "x.cnf", "--bogus"]).0, EXIT_USAGE);
        assert_eq!(call(&["decompose", "--cnf", "x.cnf", "--method", "magic"]).0, EXIT_USAGE);
    }

    #[test]
    fn help_exits_zero() {
        let (code, out, _) = call(&["--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("run-satbench"));
    }

    #[test]
    fn missing_file_is_task_failure() {
        let (code, _, err) = call(&["solve", "--cnf", "/nonexistent/f.cnf"]);
        assert_eq!(code, EXIT_TASK_FAILURE);
        assert!(err.contains("/nonexistent/f.cnf"));
    }

    #[test]
    fn flip_probability_needs_noisy_agent() {
        let (code, _, err) = call(&["run-satbench", "--tasks", ".", "--out", "x", "--flip-probability", "0.1"]);
        assert_eq!(code, EXIT_TASK_FAILURE);
        assert!(err.contains("noisy"));
    }
}
