//! Batch experiment runs and frontier-of-difficulty reports.
//!
//! A run directory holds one transcript per episode, a `summary.json` and a
//! `manifest.json` recording the configuration, its SHA-256 and the seed.
//! Nothing written depends on wall-clock time, thread count or output path,
//! so identical configurations produce identical bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{Agent, NoisyAgent, RemoteAgent, RemoteConfig, ScriptedAgent};
use crate::solver::DEFAULT_NODE_BUDGET;
use crate::cnf::SatTaskFile;
use crate::orchestrator::{run_episode, transcript_of, EpisodeConfig, EpisodeResult, Mode, TaskBundle, Transcript};
use crate::schema::{
    load_query_tasks, load_spider_schemas, plan_workflow, run_best_of, BestOf, Nl2SqlResult, QueryTask, RemoteSqlAgent,
    ScriptedSqlAgent, SqlAgent, DEFAULT_SQL_PROMPT_TEMPLATE,
};
use crate::treedecomp::Method;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Task { path: PathBuf, message: String },
    #[error("{0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> RunError + '_ {
    move |e| RunError::Io { path: path.to_path_buf(), message: e.to_string() }
}

/// Which agent answers the episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AgentSpec {
    Scripted,
    Noisy { flip_probability: f64 },
    /// Configured from `BAGWISE_*` environment variables.
    Remote,
}

impl fmt::Display for AgentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentSpec::Scripted => f.write_str("scripted"),
            AgentSpec::Noisy { flip_probability } => write!(f, "noisy:{flip_probability}"),
            AgentSpec::Remote => f.write_str("remote"),
        }
    }
}

impl FromStr for AgentSpec {
    type Err = String;

    /// `scripted`, `remote`, `noisy` (p = 0.15) or `noisy:P`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "scripted" => Ok(AgentSpec::Scripted),
            None if s == "remote" => Ok(AgentSpec::Remote),
            None if s == "noisy" => Ok(AgentSpec::Noisy { flip_probability: 0.15 }),
            Some(("noisy", p)) => {
                let p: f64 = p.parse().map_err(|_| format!("bad flip probability {p:?}"))?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(format!("flip probability {p} is outside [0, 1]"));
                }
                Ok(AgentSpec::Noisy { flip_probability: p })
            }
            _ => Err(format!("unknown agent {s:?} (expected scripted, noisy[:P] or remote)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Directory of task files.
    pub tasks: PathBuf,
    pub modes: Vec<Mode>,
    pub agent: AgentSpec,
    pub max_rounds: Option<usize>,
    pub node_budget: u64,
    pub trajectories: usize,
    pub seed: u64,
    /// Decomposition method; `None` picks exact for small instances.
    pub method: Option<Method>,
    pub bag_only_visibility: bool,
    pub story_mode: bool,
    /// Not part of the configuration hash.
    #[serde(skip)]
    pub out: PathBuf,
    #[serde(skip)]
    pub jobs: usize,
}

impl ExperimentConfig {
    pub fn new(tasks: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            tasks: tasks.into(),
            modes: vec![Mode::Full, Mode::Decomposed],
            agent: AgentSpec::Scripted,
            max_rounds: None,
            node_budget: DEFAULT_NODE_BUDGET,
            trajectories: 1,
            seed: 0,
            method: None,
            bag_only_visibility: false,
            story_mode: false,
            out: out.into(),
            jobs: 1,
        }
    }

    /// SHA-256 of the canonical JSON of the configuration, in hex.
    pub fn hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("configs serialize").as_bytes())
    }

    fn episode_config(&self, mode: Mode) -> EpisodeConfig {
        let mut c = EpisodeConfig::new(mode);
        c.max_rounds = self.max_rounds;
        c.bag_only_visibility = self.bag_only_visibility;
        c.story_mode = self.story_mode;
        c
    }

    /// Noise seed of one trajectory.
    pub fn trajectory_seed(&self, trajectory: usize) -> u64 {
        let digest = Sha256::new().chain_update(self.seed.to_le_bytes()).chain_update((trajectory as u64).to_le_bytes()).finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("eight bytes"))
    }

    fn pool(&self) -> Result<rayon::ThreadPool, RunError> {
        rayon::ThreadPoolBuilder::new().num_threads(self.jobs.max(1)).build().map_err(|e| RunError::Config(e.to_string()))
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub episodes: usize,
}

/// One line per episode, as written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub task_id: String,
    pub mode: Mode,
    pub agent: String,
    pub trajectory: usize,
    pub treewidth: i64,
    pub bag_count: usize,
    pub variable_count: usize,
    pub solved: bool,
    pub rounds: usize,
}

impl EpisodeRow {
    pub fn from_episode(result: &EpisodeResult, trajectory: usize) -> Self {
        EpisodeRow {
            task_id: result.task_id.clone(),
            mode: result.mode,
            agent: result.agent.clone(),
            trajectory,
            treewidth: result.complexity.treewidth,
            bag_count: result.complexity.bag_count,
            variable_count: result.complexity.variable_count,
            solved: result.solved(),
            rounds: result.rounds_used,
        }
    }

    pub fn from_transcript(t: &Transcript, trajectory: usize) -> Self {
        EpisodeRow {
            task_id: t.header.task_id.clone(),
            mode: t.header.mode,
            agent: t.header.agent.clone(),
            trajectory,
            treewidth: t.header.complexity.treewidth,
            bag_count: t.header.complexity.bag_count,
            variable_count: t.header.complexity.variable_count,
            solved: t.result.status == crate::orchestrator::EpisodeStatus::Solved,
            rounds: t.result.rounds_used,
        }
    }

    /// Solved means valid SQL that matches the reference plan exactly, or
    /// just valid SQL when the task has no reference. Tables play the part
    /// of variables.
    pub fn from_nl2sql(r: &Nl2SqlResult) -> Self {
        EpisodeRow {
            task_id: r.task_id.clone(),
            mode: r.mode,
            agent: r.agent.clone(),
            trajectory: r.trajectory,
            treewidth: r.complexity.treewidth,
            bag_count: r.complexity.bag_count,
            variable_count: r.complexity.pruned_tables,
            solved: r.ok() && r.score.as_ref().is_none_or(|s| s.exact()),
            rounds: r.rounds.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub treewidth: i64,
    pub bag_count: usize,
    pub mode: Mode,
    pub episodes: usize,
    pub solved: usize,
    pub rate: f64,
}

/// Success rates of both modes in one (treewidth, bag count) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaCell {
    pub treewidth: i64,
    pub bag_count: usize,
    pub full_rate: Option<f64>,
    pub decomposed_rate: Option<f64>,
    /// Decomposed minus full, when both modes ran.
    pub delta: Option<f64>,
    /// Decomposed solved something here and full solved nothing.
    pub decomposed_only: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrontierReport {
    /// One row per (task, mode), best of its trajectories.
    pub rows: Vec<EpisodeRow>,
    pub cells: Vec<Cell>,
    pub deltas: Vec<DeltaCell>,
}

impl FrontierReport {
    pub fn solved_rate(&self, mode: Mode) -> Option<f64> {
        let rows: Vec<&EpisodeRow> = self.rows.iter().filter(|r| r.mode == mode).collect();
        (!rows.is_empty()).then(|| rows.iter().filter(|r| r.solved).count() as f64 / rows.len() as f64)
    }

    pub fn decomposed_only_cells(&self) -> usize {
        self.deltas.iter().filter(|d| d.decomposed_only).count()
    }
}

/// Collapses trajectories best-of-k per (task, mode), then aggregates
/// success per (treewidth, bag count, mode) cell. A task counts as solved if
/// any trajectory solved it; its row is the first solving trajectory, or the
/// first trajectory when none did.
#[allow(clippy::type_complexity)]
pub fn frontier_report(episodes: &[EpisodeRow]) -> FrontierReport {
    let mut best: BTreeMap<(String, Mode), EpisodeRow> = BTreeMap::new();
    let mut sorted: Vec<&EpisodeRow> = episodes.iter().collect();
    sorted.sort_by(|a, b| (&a.task_id, a.mode, a.trajectory).cmp(&(&b.task_id, b.mode, b.trajectory)));
    for row in sorted {
        match best.get_mut(&(row.task_id.clone(), row.mode)) {
            None => {
                best.insert((row.task_id.clone(), row.mode), row.clone());
            }
            Some(kept) if row.solved && !kept.solved => *kept = row.clone(),
            Some(_) => {}
        }
    }
    let rows: Vec<EpisodeRow> = best.into_values().collect();
    let mut counts: BTreeMap<(i64, usize, Mode), (usize, usize)> = BTreeMap::new();
    for r in &rows {
        let c = counts.entry((r.treewidth, r.bag_count, r.mode)).or_default();
        c.0 += 1;
        c.1 += usize::from(r.solved);
    }
    let cells: Vec<Cell> = counts
        .iter()
        .map(|(&(treewidth, bag_count, mode), &(episodes, solved))| Cell {
            treewidth,
            bag_count,
            mode,
            episodes,
            solved,
            rate: solved as f64 / episodes as f64,
        })
        .collect();
    // per cell: (solved, rate) for full and decomposed
    let mut by_cell: BTreeMap<(i64, usize), [Option<(usize, f64)>; 2]> = BTreeMap::new();
    for c in &cells {
        let slot = if c.mode == Mode::Full { 0 } else { 1 };
        by_cell.entry((c.treewidth, c.bag_count)).or_default()[slot] = Some((c.solved, c.rate));
    }
    let deltas = by_cell
        .into_iter()
        .map(|((treewidth, bag_count), [full, dec])| DeltaCell {
            treewidth,
            bag_count,
            full_rate: full.map(|f| f.1),
            decomposed_rate: dec.map(|d| d.1),
            delta: full.zip(dec).map(|(f, d)| d.1 - f.1),
            decomposed_only: matches!((full, dec), (Some((0, _)), Some((s, _))) if s > 0),
        })
        .collect();
    FrontierReport { rows, cells, deltas }
}

fn rate(x: f64) -> String {
    format!("{x:.4}")
}

fn opt_rate(x: Option<f64>) -> String {
    x.map(rate).unwrap_or_default()
}

fn write_csv<R: AsRef<[u8]>>(header: &[&str], rows: impl IntoIterator<Item = Vec<R>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

/// One row per episode in the report.
pub fn rows_csv(report: &FrontierReport) -> String {
    write_csv(
        &["task_id", "mode", "agent", "trajectory", "treewidth", "bag_count", "variable_count", "solved", "rounds"],
        report.rows.iter().map(|r| {
            vec![
                r.task_id.clone(),
                r.mode.to_string(),
                r.agent.clone(),
                r.trajectory.to_string(),
                r.treewidth.to_string(),
                r.bag_count.to_string(),
                r.variable_count.to_string(),
                r.solved.to_string(),
                r.rounds.to_string(),
            ]
        }),
    )
}

pub fn cells_csv(report: &FrontierReport) -> String {
    write_csv(
        &["treewidth", "bag_count", "mode", "episodes", "solved", "unsolved", "rate"],
        report.cells.iter().map(|c| {
            vec![
                c.treewidth.to_string(),
                c.bag_count.to_string(),
                c.mode.to_string(),
                c.episodes.to_string(),
                c.solved.to_string(),
                (c.episodes - c.solved).to_string(),
                rate(c.rate),
            ]
        }),
    )
}

pub fn delta_csv(report: &FrontierReport) -> String {
    write_csv(
        &["treewidth", "bag_count", "full_rate", "decomposed_rate", "delta", "decomposed_only"],
        report.deltas.iter().map(|d| {
            vec![
                d.treewidth.to_string(),
                d.bag_count.to_string(),
                opt_rate(d.full_rate),
                opt_rate(d.decomposed_rate),
                d.delta.map(|x| format!("{x:+.4}")).unwrap_or_default(),
                d.decomposed_only.to_string(),
            ]
        }),
    )
}

/// A gnuplot script drawing each mode's cells in (bag count, treewidth)
/// space, point size by success rate.
pub fn gnuplot_script(cells_file: &str, output: &str) -> String {
    format!(
        "set datafile separator ','\n\
         set terminal pngcairo size 1200,500\n\
         set output '{output}'\n\
         set multiplot layout 1,2\n\
         set xlabel 'bag count'\n\
         set ylabel 'treewidth'\n\
         set key off\n\
         set cbrange [0:1]\n\
         set palette defined (0 'red', 1 'green')\n\
         set title 'full'\n\
         plot '{cells_file}' every ::1 using 2:(strcol(3) eq 'full' ? $1 : 1/0):(1+2*$7):7 with points pt 7 ps variable lc palette\n\
         set title 'decomposed'\n\
         plot '{cells_file}' every ::1 using 2:(strcol(3) eq 'decomposed' ? $1 : 1/0):(1+2*$7):7 with points pt 7 ps variable lc palette\n\
         unset multiplot\n"
    )
}

/// Files `report` writes next to the rows CSV at `out`.
pub fn report_paths(out: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let stem = out.file_stem().map_or("frontier".into(), |s| s.to_string_lossy().into_owned());
    let dir = out.parent().unwrap_or(Path::new(""));
    (dir.join(format!("{stem}_cells.csv")), dir.join(format!("{stem}_delta.csv")), dir.join(format!("{stem}.gp")))
}

pub fn write_report(report: &FrontierReport, out: &Path) -> Result<(), RunError> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let (cells, delta, gp) = report_paths(out);
    std::fs::write(out, rows_csv(report)).map_err(io_err(out))?;
    std::fs::write(&cells, cells_csv(report)).map_err(io_err(&cells))?;
    std::fs::write(&delta, delta_csv(report)).map_err(io_err(&delta))?;
    let cells_name = cells.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let png = out.with_extension("png").file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    std::fs::write(&gp, gnuplot_script(&cells_name, &png)).map_err(io_err(&gp))?;
    Ok(())
}

/// Files under `dir` (recursively), sorted by path.
fn files_under(dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(io_err(&d))? {
            let path = entry.map_err(io_err(&d))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Trajectory index from a `name.mode.tK.ext` file name.
fn trajectory_of(path: &Path) -> usize {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    stem.rsplit('.').next().and_then(|s| s.strip_prefix('t')).and_then(|k| k.parse().ok()).unwrap_or(0)
}

/// Episode rows from every SAT transcript (`*.jsonl`) and NL2SQL result
/// (`results/*.json`) under `dir`.
pub fn load_rows(dir: &Path) -> Result<Vec<EpisodeRow>, RunError> {
    let mut rows = Vec::new();
    for path in files_under(dir)? {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        let in_results = path.parent().and_then(|p| p.file_name()).is_some_and(|n| n == "results");
        if ext == "jsonl" {
            let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
            let t = Transcript::parse(&text).map_err(|e| RunError::Task { path: path.clone(), message: e.to_string() })?;
            rows.push(EpisodeRow::from_transcript(&t, trajectory_of(&path)));
        } else if ext == "json" && in_results {
            let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
            let best: BestOf =
                serde_json::from_str(&text).map_err(|e| RunError::Task { path: path.clone(), message: e.to_string() })?;
            rows.extend(best.trajectories.iter().map(EpisodeRow::from_nl2sql));
        }
    }
    Ok(rows)
}

/// SAT task files (`*.json` task bundles or bare `*.cnf`) in `dir`, sorted
/// by file name. Bare CNF files get an empty story and mapping.
pub fn load_sat_tasks(dir: &Path) -> Result<Vec<(String, SatTaskFile)>, RunError> {
    let mut out = Vec::new();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir).map_err(io_err(dir))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for path in paths {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let text = || std::fs::read_to_string(&path).map_err(io_err(&path));
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => {
                let file: SatTaskFile =
                    serde_json::from_str(&text()?).map_err(|e| RunError::Task { path: path.clone(), message: e.to_string() })?;
                out.push((stem, file));
            }
            Some("cnf") => out.push((stem, SatTaskFile { id: None, cnf: text()?, story: String::new(), mapping: Vec::new() })),
            _ => {}
        }
    }
    if out.is_empty() {
        return Err(RunError::Config(format!("no task files in {}", dir.display())));
    }
    Ok(out)
}

fn build_agent(config: &ExperimentConfig, trajectory: usize) -> Result<Box<dyn Agent>, RunError> {
    Ok(match config.agent {
        AgentSpec::Scripted => Box::new(ScriptedAgent { node_budget: config.node_budget }),
        AgentSpec::Noisy { flip_probability } => {
            let mut a = NoisyAgent::new(flip_probability, config.trajectory_seed(trajectory));
            a.node_budget = config.node_budget;
            Box::new(a)
        }
        AgentSpec::Remote => Box::new(RemoteAgent::new(RemoteConfig::from_env().map_err(|e| RunError::Config(e.to_string()))?)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub episodes: usize,
    pub solved: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub episodes: Vec<EpisodeRow>,
    /// Best-of-k per task.
    pub modes: Vec<ModeSummary>,
    /// Episodes that ended with an agent error or could not run.
    pub failures: Vec<String>,
}

fn summarize(config_hash: String, episodes: Vec<EpisodeRow>, failures: Vec<String>) -> RunSummary {
    let report = frontier_report(&episodes);
    let mut modes: BTreeMap<Mode, (usize, usize)> = BTreeMap::new();
    for r in &report.rows {
        let m = modes.entry(r.mode).or_default();
        m.0 += 1;
        m.1 += usize::from(r.solved);
    }
    let modes = modes
        .into_iter()
        .map(|(mode, (episodes, solved))| ModeSummary { mode, episodes, solved, rate: solved as f64 / episodes as f64 })
        .collect();
    RunSummary { config_hash, episodes, modes, failures }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let text = serde_json::to_string_pretty(value).expect("outputs serialize") + "\n";
    std::fs::write(path, text).map_err(io_err(path))
}

fn write_manifest(config: &ExperimentConfig, command: &str, episodes: usize) -> Result<(), RunError> {
    let manifest = Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        config_hash: config.hash(),
        seed: config.seed,
        episodes,
    };
    write_json(&config.out.join("manifest.json"), &manifest)
}

/// Runs every (task, mode, trajectory) episode over the SAT task directory
/// and writes `transcripts/<task>.<mode>.t<k>.jsonl`, `summary.json` and
/// `manifest.json` under `config.out`.
pub fn run_satbench(config: &ExperimentConfig) -> Result<RunSummary, RunError> {
    if config.modes.is_empty() || config.trajectories == 0 {
        return Err(RunError::Config("at least one mode and one trajectory are required".into()));
    }
    let files = load_sat_tasks(&config.tasks)?;
    let mut tasks = Vec::with_capacity(files.len());
    for (stem, file) in &files {
        let task = TaskBundle::from_sat_task(file, stem, config.method)
            .map_err(|e| RunError::Task { path: config.tasks.join(stem), message: e.to_string() })?;
        tasks.push(task);
    }
    let agents: Vec<Box<dyn Agent>> = (0..config.trajectories).map(|t| build_agent(config, t)).collect::<Result<_, _>>()?;
    let jobs: Vec<(usize, Mode, usize)> = (0..tasks.len())
        .flat_map(|i| config.modes.iter().flat_map(move |&m| (0..config.trajectories).map(move |t| (i, m, t))))
        .collect();
    let results: Vec<Result<EpisodeResult, String>> = config.pool()?.install(|| {
        jobs.par_iter()
            .map(|&(i, mode, t)| run_episode(&tasks[i], agents[t].as_ref(), &config.episode_config(mode)).map_err(|e| e.to_string()))
            .collect()
    });
    let dir = config.out.join("transcripts");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (&(i, mode, t), result) in jobs.iter().zip(results) {
        let task = &tasks[i];
        match result {
            Ok(result) => {
                let path = dir.join(format!("{}.{mode}.t{t}.jsonl", task.id));
                std::fs::write(&path, transcript_of(task, &result).to_jsonl()).map_err(io_err(&path))?;
                if let Some(e) = &result.error {
                    failures.push(format!("{} {mode} t{t}: {e}", task.id));
                }
                rows.push(EpisodeRow::from_episode(&result, t));
            }
            Err(e) => failures.push(format!("{} {mode} t{t}: {e}", task.id)),
        }
    }
    let summary = summarize(config.hash(), rows, failures);
    write_json(&config.out.join("summary.json"), &summary)?;
    write_manifest(config, "run-satbench", jobs.len())?;
    Ok(summary)
}

/// Query tasks from `dir/queries.json` against `dir/tables.json` (or the
/// given schema file).
pub fn load_nl2sql_tasks(dir: &Path, schemas: Option<&Path>) -> Result<Vec<QueryTask>, RunError> {
    let schema_path = schemas.map_or_else(|| dir.join("tables.json"), Path::to_path_buf);
    let bad = |path: PathBuf| move |e: crate::schema::SchemaError| RunError::Task { path, message: e.to_string() };
    let schemas = load_spider_schemas(&schema_path).map_err(bad(schema_path.clone()))?;
    let queries = dir.join("queries.json");
    load_query_tasks(&queries, &schemas).map_err(bad(queries.clone()))
}

fn build_sql_agent(config: &ExperimentConfig) -> Result<Box<dyn SqlAgent>, RunError> {
    match config.agent {
        AgentSpec::Scripted => Ok(Box::new(ScriptedSqlAgent)),
        AgentSpec::Remote => {
            let remote = RemoteAgent::new(RemoteConfig::from_env().map_err(|e| RunError::Config(e.to_string()))?);
            let template = match std::env::var("BAGWISE_SQL_PROMPT_TEMPLATE") {
                Ok(path) if !path.is_empty() => {
                    crate::agents::load_template(Path::new(&path)).map_err(|e| RunError::Config(e.to_string()))?
                }
                _ => DEFAULT_SQL_PROMPT_TEMPLATE.to_string(),
            };
            Ok(Box::new(RemoteSqlAgent::new(remote, template)))
        }
        AgentSpec::Noisy { .. } => Err(RunError::Config("the noisy agent only answers SAT tasks".into())),
    }
}

/// Runs best-of-k NL2SQL episodes and writes `results/<id>.<mode>.json`,
/// `sql/<id>.<mode>.sql` for the chosen trajectory, `plans/<id>.json`,
/// `summary.json` and `manifest.json` under `config.out`.
pub fn run_nl2sql(config: &ExperimentConfig, schemas: Option<&Path>) -> Result<RunSummary, RunError> {
    if config.modes.is_empty() || config.trajectories == 0 {
        return Err(RunError::Config("at least one mode and one trajectory are required".into()));
    }
    let tasks = load_nl2sql_tasks(&config.tasks, schemas)?;
    let agent = build_sql_agent(config)?;
    let jobs: Vec<(usize, Mode)> = (0..tasks.len()).flat_map(|i| config.modes.iter().map(move |&m| (i, m))).collect();
    let results: Vec<Result<BestOf, String>> = config.pool()?.install(|| {
        jobs.par_iter()
            .map(|&(i, mode)| run_best_of(&tasks[i], agent.as_ref(), mode, config.trajectories).map_err(|e| e.to_string()))
            .collect()
    });
    let dirs = ["results", "sql", "plans"].map(|d| config.out.join(d));
    for d in &dirs {
        std::fs::create_dir_all(d).map_err(io_err(d))?;
    }
    for task in &tasks {
        if let Ok(plan) = plan_workflow(task) {
            write_json(&dirs[2].join(format!("{}.json", task.id)), &plan)?;
        }
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (&(i, mode), result) in jobs.iter().zip(results) {
        let id = &tasks[i].id;
        match result {
            Ok(best) => {
                write_json(&dirs[0].join(format!("{id}.{mode}.json")), &best)?;
                if let Some(sql) = best.best().and_then(|b| b.sql.as_ref()) {
                    let path = dirs[1].join(format!("{id}.{mode}.sql"));
                    std::fs::write(&path, format!("{sql};\n")).map_err(io_err(&path))?;
                }
                for t in &best.trajectories {
                    if let Some(e) = t.error.as_ref().filter(|_| !t.ok()) {
                        failures.push(format!("{id} {mode} t{}: {e}", t.trajectory));
                    }
                }
                rows.extend(best.trajectories.iter().map(EpisodeRow::from_nl2sql));
            }
            Err(e) => failures.push(format!("{id} {mode}: {e}")),
        }
    }
    let summary = summarize(config.hash(), rows, failures);
    write_json(&config.out.join("summary.json"), &summary)?;
    write_manifest(config, "run-nl2sql", jobs.len() * config.trajectories)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(task: &str, mode: Mode, tw: i64, bags: usize, solved: bool) -> EpisodeRow {
        EpisodeRow {
            task_id: task.into(),
            mode,
            agent: "a".into(),
            trajectory: 0,
            treewidth: tw,
            bag_count: bags,
            variable_count: 4,
            solved,
            rounds: 1,
        }
    }

    #[test]
    fn empty_input_gives_empty_report() {
        assert_eq!(frontier_report(&[]), FrontierReport::default());
    }

    #[test]
    fn all_solved_rates_are_one() {
        let rows: Vec<_> = (0..6).map(|i| row(&format!("t{i}"), Mode::Full, i % 3, 2, true)).collect();
        let r = frontier_report(&rows);
        assert!(r.cells.iter().all(|c| c.rate == 1.0));
    }

    #[test]
    fn decomposition_only_successes_show_in_every_delta() {
        let mut rows = Vec::new();
        for i in 0..4 {
            rows.push(row(&format!("t{i}"), Mode::Full, i, 3, false));
            rows.push(row(&format!("t{i}"), Mode::Decomposed, i, 3, true));
        }
        let r = frontier_report(&rows);
        assert_eq!(r.deltas.len(), 4);
        assert!(r.deltas.iter().all(|d| d.delta == Some(1.0) && d.decomposed_only));
        assert_eq!(r.decomposed_only_cells(), 4);
    }

    #[test]
    fn mixed_cells_match_hand_counts() {
        // cell (2, 3): full 1/3, decomposed 2/3; cell (4, 5): full 1/2, decomposed 1/2
        let rows = vec![
            row("a", Mode::Full, 2, 3, true),
            row("b", Mode::Full, 2, 3, false),
            row("c", Mode::Full, 2, 3, false),
            row("a", Mode::Decomposed, 2, 3, true),
            row("b", Mode::Decomposed, 2, 3, true),
            row("c", Mode::Decomposed, 2, 3, false),
            row("d", Mode::Full, 4, 5, true),
            row("e", Mode::Full, 4, 5, false),
            row("d", Mode::Decomposed, 4, 5, false),
            row("e", Mode::Decomposed, 4, 5, true),
        ];
        let r = frontier_report(&rows);
        let rate = |tw, mode| r.cells.iter().find(|c| c.treewidth == tw && c.mode == mode).unwrap().rate;
        assert_eq!(rate(2, Mode::Full), 1.0 / 3.0);
        assert_eq!(rate(2, Mode::Decomposed), 2.0 / 3.0);
        assert_eq!(rate(4, Mode::Full), 0.5);
        assert_eq!(r.deltas[0].delta, Some(2.0 / 3.0 - 1.0 / 3.0));
        assert_eq!(r.deltas[1].delta, Some(0.0));
        assert_eq!(r.decomposed_only_cells(), 0);
        assert_eq!(r.cells.iter().map(|c| c.episodes).sum::<usize>(), rows.len());
    }

    #[test]
    fn best_of_k_keeps_a_solving_trajectory() {
        let mut a = row("t", Mode::Decomposed, 2, 2, false);
        let mut b = a.clone();
        b.trajectory = 1;
        b.solved = true;
        a.trajectory = 0;
        let r = frontier_report(&[b, a]);
        assert_eq!(r.rows.len(), 1);
        assert!(r.rows[0].solved);
        assert_eq!(r.rows[0].trajectory, 1);
    }

    #[test]
    fn csv_quotes_awkward_fields() {
        let r = frontier_report(&[row("a,b", Mode::Full, 1, 1, true)]);
        let text = rows_csv(&r);
        assert!(text.lines().nth(1).unwrap().starts_with("\"a,b\",full,"));
        assert_eq!(cells_csv(&r).lines().nth(1), Some("1,1,full,1,1,0,1.0000"));
    }

    #[test]
    fn agent_specs_parse() {
        assert_eq!("scripted".parse::<AgentSpec>(), Ok(AgentSpec::Scripted));
        assert_eq!("noisy".parse::<AgentSpec>(), Ok(AgentSpec::Noisy { flip_probability: 0.15 }));
        assert_eq!("noisy:0.3".parse::<AgentSpec>(), Ok(AgentSpec::Noisy { flip_probability: 0.3 }));
        assert!("noisy:2".parse::<AgentSpec>().is_err());
        assert!("oracle".parse::<AgentSpec>().is_err());
    }

    #[test]
    fn hash_ignores_output_location_and_jobs() {
        let a = ExperimentConfig::new("tasks", "out1");
        let mut b = ExperimentConfig::new("tasks", "out2");
        b.jobs = 8;
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn trajectory_from_file_name() {
        assert_eq!(trajectory_of(Path::new("x/rain.full.t3.jsonl")), 3);
        assert_eq!(trajectory_of(Path::new("x/rain.jsonl")), 0);
    }

    proptest::proptest! {
        #[test]
        fn cell_counts_conserve_rows(raw in proptest::collection::vec((0u8..6, 0u8..2, 0usize..3, proptest::bool::ANY), 0..60)) {
            let rows: Vec<EpisodeRow> = raw
                .iter()
                .map(|&(task, m, t, solved)| {
                    let mode = if m == 0 { Mode::Full } else { Mode::Decomposed };
                    // complexity is a property of the task, not the trajectory
                    let mut r = row(&format!("t{task}"), mode, i64::from(task) % 4, 1 + usize::from(task) % 3, solved);
                    r.trajectory = t;
                    r
                })
                .collect();
            let r = frontier_report(&rows);
            let tasks: std::collections::BTreeSet<_> = rows.iter().map(|x| (x.task_id.clone(), x.mode)).collect();
            proptest::prop_assert_eq!(r.rows.len(), tasks.len());
            proptest::prop_assert_eq!(r.cells.iter().map(|c| c.episodes).sum::<usize>(), tasks.len());
            for c in &r.cells {
                proptest::prop_assert!(c.solved <= c.episodes);
                proptest::prop_assert!((c.rate - c.solved as f64 / c.episodes as f64).abs() < 1e-12);
            }
            for (task, mode) in &tasks {
                let any = rows.iter().any(|x| &x.task_id == task && x.mode == *mode && x.solved);
                let kept = r.rows.iter().find(|x| &x.task_id == task && x.mode == *mode).unwrap();
                proptest::prop_assert_eq!(kept.solved, any);
            }
        }
    }
}
