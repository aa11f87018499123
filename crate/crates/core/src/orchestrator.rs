//! Round-based episodes: present observations to an agent, apply its
//! assignments, and stop once every constraint holds or the round budget
//! runs out. Transcripts are line-delimited JSON and can be replayed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{Agent, AgentError, AgentRequest, AgentResponse};
use crate::cnf::{evaluate, parse_dimacs, serialize_dimacs, Assignment, CnfFormula, MappingEntry, SatTaskFile};
use crate::csp::{check_solution, cnf_to_csp, primal_graph, ConstraintRelation, CspAssignment, CspInstance, Value, VarId};
use crate::treedecomp::{
    bag_for_scope, decompose_exact, decompose_greedy, traversal_order, validate, Heuristic, Method, TreeDecomposition,
};

pub type BoolAssignment = BTreeMap<VarId, bool>;

/// Instances up to this many variables get an exact decomposition under
/// [`decompose_auto`].
pub const AUTO_EXACT_LIMIT: usize = 20;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("decomposed mode needs a tree decomposition")]
    MissingDecomposition,
    #[error("decomposition does not fit the instance: {0}")]
    InvalidDecomposition(String),
    #[error("episodes need Boolean variables; variable {0} is not")]
    NonBoolean(VarId),
    #[error("cannot parse task: {0}")]
    Task(String),
    #[error("malformed transcript at line {line}: {message}")]
    Transcript { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    Decomposed,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Decomposed => "decomposed",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Mode::Full),
            "decomposed" => Ok(Mode::Decomposed),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Complexity {
    pub treewidth: i64,
    pub bag_count: usize,
    pub variable_count: usize,
}

/// Exact decomposition for small instances, min-fill otherwise.
pub fn decompose_auto(instance: &CspInstance) -> TreeDecomposition {
    let graph = primal_graph(instance);
    if graph.num_vertices() <= AUTO_EXACT_LIMIT {
        if let Ok(td) = decompose_exact(&graph, None) {
            return td;
        }
    }
    decompose_greedy(&graph, Heuristic::MinFill)
}

pub fn decompose_with(instance: &CspInstance, method: Option<Method>) -> TreeDecomposition {
    let graph = primal_graph(instance);
    match method {
        None => decompose_auto(instance),
        Some(Method::MinFill) => decompose_greedy(&graph, Heuristic::MinFill),
        Some(Method::MinDegree) => decompose_greedy(&graph, Heuristic::MinDegree),
        Some(Method::Exact) => {
            decompose_exact(&graph, None).unwrap_or_else(|_| decompose_greedy(&graph, Heuristic::MinFill))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskBundle {
    pub id: String,
    pub instance: CspInstance,
    pub formula: Option<CnfFormula>,
    pub story: String,
    pub mapping: Vec<MappingEntry>,
    pub decomposition: Option<TreeDecomposition>,
}

impl TaskBundle {
    pub fn new(
        id: impl Into<String>,
        instance: CspInstance,
        formula: Option<CnfFormula>,
        story: impl Into<String>,
        mapping: Vec<MappingEntry>,
        decomposition: Option<TreeDecomposition>,
    ) -> Result<Self, OrchestratorError> {
        if let Some(v) = instance.variables().iter().find(|v| v.domain != [0, 1]) {
            return Err(OrchestratorError::NonBoolean(v.id));
        }
        if let Some(td) = &decomposition {
            let violations = validate(&primal_graph(&instance), td);
            if !violations.is_empty() {
                return Err(OrchestratorError::InvalidDecomposition(format!("{violations:?}")));
            }
        }
        Ok(TaskBundle { id: id.into(), instance, formula, story: story.into(), mapping, decomposition })
    }

    /// Parses the task's CNF and attaches a decomposition (`None` = auto).
    pub fn from_sat_task(file: &SatTaskFile, fallback_id: &str, method: Option<Method>) -> Result<Self, OrchestratorError> {
        let formula = file.formula().map_err(|e| OrchestratorError::Task(e.to_string()))?;
        let instance = cnf_to_csp(&formula).map_err(|e| OrchestratorError::Task(e.to_string()))?;
        let td = decompose_with(&instance, method);
        let id = file.id.clone().unwrap_or_else(|| fallback_id.to_string());
        TaskBundle::new(id, instance, Some(formula), file.story.clone(), file.mapping.clone(), Some(td))
    }

    pub fn complexity(&self) -> Complexity {
        let owned;
        let td = match &self.decomposition {
            Some(td) => td,
            None => {
                owned = decompose_greedy(&primal_graph(&self.instance), Heuristic::MinFill);
                &owned
            }
        };
        Complexity { treewidth: td.width(), bag_count: td.num_bags(), variable_count: self.instance.num_variables() }
    }

    /// Variables by first appearance along the traversal, then the rest by id.
    pub fn variable_order(&self) -> Vec<VarId> {
        let mut seen = BTreeSet::new();
        let mut order = Vec::with_capacity(self.instance.num_variables());
        if let Some(td) = &self.decomposition {
            for bag in traversal_order(td, None).order() {
                for &v in &td.bags()[bag].vertices {
                    if seen.insert(v) {
                        order.push(v);
                    }
                }
            }
        }
        order.extend(self.instance.variable_ids().filter(|v| !seen.contains(v)));
        order
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationSummary {
    /// Constraints violated when unassigned variables read as false.
    pub violated: Vec<usize>,
    /// Constraints whose status the partial assignment leaves open.
    pub undetermined: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedConstraint {
    pub index: usize,
    pub text: String,
    /// Signed variable indices when the constraint is a clause.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub literals: Option<Vec<i64>>,
    pub scope: Vec<VarId>,
    pub allowed: Vec<Vec<Value>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub constraints: Vec<RenderedConstraint>,
    pub focus_bag: Option<usize>,
    /// Variables the agent is asked to decide this round.
    pub variables: Vec<VarId>,
    /// Variables rendered by raw index because the mapping names neither polarity.
    pub unmapped: Vec<VarId>,
    /// Focus-bag variables shared with neighboring bags.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub boundary: Vec<VarId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub mode: Mode,
    /// Defaults to three rounds per variable.
    pub max_rounds: Option<usize>,
    /// Send only the focus bag's values instead of the whole assignment.
    pub bag_only_visibility: bool,
    /// Render constraints over entity names rather than raw indices.
    pub story_mode: bool,
}

impl EpisodeConfig {
    pub fn new(mode: Mode) -> Self {
        EpisodeConfig { mode, max_rounds: None, bag_only_visibility: false, story_mode: true }
    }

    pub fn rounds_for(&self, task: &TaskBundle) -> usize {
        self.max_rounds.unwrap_or(3 * task.instance.num_variables()).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    Solved,
    BudgetExhausted,
    AgentError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentChange {
    pub variable: VarId,
    pub old: Option<bool>,
    pub new: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub request: AgentRequest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<AgentResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<AgentError>,
    pub delta: Vec<AssignmentChange>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task_id: String,
    pub mode: Mode,
    pub agent: String,
    pub status: EpisodeStatus,
    pub rounds_used: usize,
    pub max_rounds: usize,
    pub final_assignment: BoolAssignment,
    pub transcript: Vec<RoundRecord>,
    pub complexity: Complexity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EpisodeResult {
    pub fn solved(&self) -> bool {
        self.status == EpisodeStatus::Solved
    }
}

fn completion(instance: &CspInstance, current: &BoolAssignment) -> CspAssignment {
    instance
        .variable_ids()
        .map(|v| (v, Value::from(current.get(&v).copied().unwrap_or(false))))
        .collect()
}

fn as_csp(current: &BoolAssignment) -> CspAssignment {
    current.iter().map(|(&v, &b)| (v, Value::from(b))).collect()
}

pub fn violation_summary(instance: &CspInstance, current: &BoolAssignment) -> ViolationSummary {
    let defaulted = instance.constraint_status(&completion(instance, current));
    let partial = instance.constraint_status(&as_csp(current));
    ViolationSummary { violated: defaulted.violated, undetermined: partial.undetermined }
}

/// Every variable assigned, every constraint satisfied, and the CNF (when
/// present) evaluating with no violated or open clause.
pub fn is_solved(task: &TaskBundle, current: &BoolAssignment) -> bool {
    let full = as_csp(current);
    let Ok(check) = check_solution(&task.instance, &full) else { return false };
    if !check.satisfied {
        return false;
    }
    match &task.formula {
        Some(f) => {
            let a: Assignment = current.iter().map(|(&v, &b)| (v, b)).collect();
            evaluate(f, &a).is_ok_and(|r| r.violated.is_empty() && r.undetermined.is_empty())
        }
        None => true,
    }
}

/// Bag to work on next in decomposed mode.
///
/// The bag of the lowest-index violated constraint wins; otherwise the first
/// bag in traversal order that still has an unassigned variable.
pub fn select_focus(task: &TaskBundle, current: &BoolAssignment) -> Option<usize> {
    let td = task.decomposition.as_ref()?;
    let summary = violation_summary(&task.instance, current);
    if let Some(&ci) = summary.violated.first() {
        let scope: BTreeSet<VarId> = task.instance.constraints()[ci].scope().iter().copied().collect();
        return bag_for_scope(td, &scope).ok();
    }
    traversal_order(td, None)
        .order()
        .into_iter()
        .find(|&b| td.bags()[b].vertices.iter().any(|v| !current.contains_key(v)))
}

fn literal_name(var: VarId, positive: bool, mapping: &[MappingEntry], story_mode: bool) -> (String, bool) {
    let lit = i64::from(var);
    let signed = if positive { lit } else { -lit };
    if story_mode {
        if let Some(m) = mapping.iter().find(|m| m.literal == signed) {
            return (m.entity.clone(), true);
        }
        if let Some(m) = mapping.iter().find(|m| m.literal == -signed) {
            return (format!("NOT {}", m.entity), true);
        }
    }
    let raw = if positive { format!("x{var}") } else { format!("NOT x{var}") };
    (raw, !story_mode)
}

/// The clause a Boolean relation encodes: it must forbid exactly one tuple.
fn as_clause(rel: &ConstraintRelation) -> Option<Vec<i64>> {
    let k = rel.arity();
    if k >= 63 || rel.scope().contains(&0) || rel.allowed_tuples().len() + 1 != 1usize << k {
        return None;
    }
    let mut forbidden = None;
    for m in 0..1u64 << k {
        let tuple: Vec<Value> = (0..k).map(|i| (m >> (k - 1 - i) & 1) as Value).collect();
        if !rel.allows(&tuple) {
            forbidden = Some(tuple);
            break;
        }
    }
    let forbidden = forbidden?;
    Some(
        rel.scope()
            .iter()
            .zip(&forbidden)
            .map(|(&v, &x)| if x == 0 { i64::from(v) } else { -i64::from(v) })
            .collect(),
    )
}

/// Renders constraints `indices` of `instance` in ascending index order.
pub fn render_observation(
    instance: &CspInstance,
    indices: &[usize],
    mapping: &[MappingEntry],
    story_mode: bool,
) -> Observation {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut unmapped = BTreeSet::new();
    let mut constraints = Vec::with_capacity(sorted.len());
    for ci in sorted {
        let rel = &instance.constraints()[ci];
        let literals = as_clause(rel);
        let mut name = |v: VarId, positive: bool| {
            let (s, ok) = literal_name(v, positive, mapping, story_mode);
            if !ok {
                unmapped.insert(v);
            }
            s
        };
        let text = match &literals {
            Some(lits) if lits.is_empty() => "FALSE".to_string(),
            Some(lits) => lits
                .iter()
                .map(|&l| name(l.unsigned_abs() as VarId, l > 0))
                .collect::<Vec<_>>()
                .join(" OR "),
            None if rel.allowed_tuples().len() == 1usize.checked_shl(rel.arity() as u32).unwrap_or(0) => {
                "TRUE".to_string()
            }
            None => {
                let names: Vec<String> = rel.scope().iter().map(|&v| name(v, true)).collect();
                let tuples: Vec<String> = rel
                    .allowed_tuples()
                    .iter()
                    .map(|t| format!("({})", t.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")))
                    .collect();
                format!("({}) IN {{{}}}", names.join(", "), tuples.join(", "))
            }
        };
        constraints.push(RenderedConstraint {
            index: ci,
            text,
            literals,
            scope: rel.scope().to_vec(),
            allowed: rel.allowed_tuples().iter().cloned().collect(),
        });
    }
    Observation {
        constraints,
        focus_bag: None,
        variables: Vec::new(),
        unmapped: unmapped.into_iter().collect(),
        boundary: Vec::new(),
    }
}

/// The request an agent would receive in `config.mode` for the given state.
pub fn build_request(task: &TaskBundle, config: &EpisodeConfig, round: usize, current: &BoolAssignment) -> AgentRequest {
    let violations = violation_summary(&task.instance, current);
    let (observation, visible) = match config.mode {
        Mode::Full => {
            let all: Vec<usize> = (0..task.instance.constraints().len()).collect();
            let mut obs = render_observation(&task.instance, &all, &task.mapping, config.story_mode);
            obs.variables = task.instance.variable_ids().collect();
            (obs, None)
        }
        Mode::Decomposed => match (select_focus(task, current), &task.decomposition) {
            (Some(b), Some(td)) => {
                let bag = &td.bags()[b].vertices;
                let inside: Vec<usize> = task
                    .instance
                    .constraints()
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.scope().iter().all(|v| bag.contains(v)))
                    .map(|(i, _)| i)
                    .collect();
                let mut obs = render_observation(&task.instance, &inside, &task.mapping, config.story_mode);
                obs.focus_bag = Some(b);
                obs.variables = bag.iter().copied().collect();
                let shared: BTreeSet<VarId> =
                    td.neighbors(b).into_iter().flat_map(|n| td.bags()[n].vertices.iter().copied()).collect();
                obs.boundary = bag.intersection(&shared).copied().collect();
                (obs, Some(bag.clone()))
            }
            _ => (Observation::default(), Some(BTreeSet::new())),
        },
    };
    let assignment = match (config.bag_only_visibility, visible) {
        (true, Some(bag)) => current.iter().filter(|(v, _)| bag.contains(v)).map(|(&v, &b)| (v, b)).collect(),
        _ => current.clone(),
    };
    AgentRequest {
        round,
        story: task.story.clone(),
        mapping: task.mapping.clone(),
        violations,
        observation,
        assignment,
        variables: task.variable_order(),
    }
}

pub fn run_episode(task: &TaskBundle, agent: &dyn Agent, config: &EpisodeConfig) -> Result<EpisodeResult, OrchestratorError> {
    if config.mode == Mode::Decomposed && task.decomposition.is_none() {
        return Err(OrchestratorError::MissingDecomposition);
    }
    let max_rounds = config.rounds_for(task);
    let mut current = BoolAssignment::new();
    let mut transcript = Vec::new();
    let mut status = EpisodeStatus::BudgetExhausted;
    let mut error = None;
    for round in 1..=max_rounds {
        if is_solved(task, &current) {
            status = EpisodeStatus::Solved;
            break;
        }
        let request = build_request(task, config, round, &current);
        match agent.respond(&request) {
            Err(e) => {
                error = Some(e.to_string());
                transcript.push(RoundRecord { round, request, response: None, error: Some(e), delta: Vec::new() });
                status = EpisodeStatus::AgentError;
                break;
            }
            Ok(response) => {
                if let Some(&bad) = response.assignments.keys().find(|&&v| task.instance.position(v).is_none()) {
                    error = Some(format!("agent assigned unknown variable {bad}"));
                    transcript.push(RoundRecord { round, request, response: Some(response), error: None, delta: Vec::new() });
                    status = EpisodeStatus::AgentError;
                    break;
                }
                let mut delta = Vec::new();
                for (&v, &b) in &response.assignments {
                    let old = current.insert(v, b);
                    if old != Some(b) {
                        delta.push(AssignmentChange { variable: v, old, new: b });
                    }
                }
                transcript.push(RoundRecord { round, request, response: Some(response), error: None, delta });
            }
        }
    }
    if status == EpisodeStatus::BudgetExhausted && is_solved(task, &current) {
        status = EpisodeStatus::Solved;
    }
    Ok(EpisodeResult {
        task_id: task.id.clone(),
        mode: config.mode,
        agent: agent.name(),
        status,
        rounds_used: transcript.len(),
        max_rounds,
        final_assignment: current,
        transcript,
        complexity: task.complexity(),
        error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptHeader {
    pub task_id: String,
    pub mode: Mode,
    pub agent: String,
    pub complexity: Complexity,
    pub max_rounds: usize,
    pub story: String,
    pub mapping: Vec<MappingEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cnf: Option<String>,
    pub instance: CspInstance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decomposition: Option<TreeDecomposition>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptSummary {
    pub status: EpisodeStatus,
    pub rounds_used: usize,
    pub final_assignment: BoolAssignment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TranscriptLine {
    Header(Box<TranscriptHeader>),
    Round(Box<RoundRecord>),
    Result(TranscriptSummary),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub header: TranscriptHeader,
    pub rounds: Vec<RoundRecord>,
    pub result: TranscriptSummary,
}

impl Transcript {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |line: &TranscriptLine| {
            out.push_str(&serde_json::to_string(line).expect("transcripts serialize"));
            out.push('\n');
        };
        push(&TranscriptLine::Header(Box::new(self.header.clone())));
        for r in &self.rounds {
            push(&TranscriptLine::Round(Box::new(r.clone())));
        }
        push(&TranscriptLine::Result(self.result.clone()));
        out
    }

    pub fn parse(text: &str) -> Result<Self, OrchestratorError> {
        let mut header = None;
        let mut rounds = Vec::new();
        let mut result = None;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |message: String| OrchestratorError::Transcript { line: i + 1, message };
            if result.is_some() {
                return Err(bad("content after the result line".into()));
            }
            // integer map keys do not survive serde's tag buffering, so dispatch by hand
            #[derive(Deserialize)]
            struct Tag {
                r#type: String,
            }
            let tag: Tag = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            match tag.r#type.as_str() {
                "header" if header.is_none() && i == 0 => {
                    header = Some(serde_json::from_str(line).map_err(|e| bad(e.to_string()))?);
                }
                "header" => return Err(bad("unexpected header".into())),
                _ if header.is_none() => return Err(bad("missing header".into())),
                "round" => rounds.push(serde_json::from_str(line).map_err(|e| bad(e.to_string()))?),
                "result" => result = Some(serde_json::from_str(line).map_err(|e| bad(e.to_string()))?),
                other => return Err(bad(format!("unknown line type {other:?}"))),
            }
        }
        let end = text.lines().count();
        Ok(Transcript {
            header: header.ok_or(OrchestratorError::Transcript { line: 1, message: "missing header".into() })?,
            rounds,
            result: result.ok_or(OrchestratorError::Transcript { line: end, message: "missing result line".into() })?,
        })
    }
}

pub fn transcript_of(task: &TaskBundle, result: &EpisodeResult) -> Transcript {
    Transcript {
        header: TranscriptHeader {
            task_id: task.id.clone(),
            mode: result.mode,
            agent: result.agent.clone(),
            complexity: result.complexity,
            max_rounds: result.max_rounds,
            story: task.story.clone(),
            mapping: task.mapping.clone(),
            cnf: task.formula.as_ref().map(serialize_dimacs),
            instance: task.instance.clone(),
            decomposition: task.decomposition.clone(),
        },
        rounds: result.transcript.clone(),
        result: TranscriptSummary {
            status: result.status,
            rounds_used: result.rounds_used,
            final_assignment: result.final_assignment.clone(),
            error: result.error.clone(),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub task_id: String,
    pub claimed: EpisodeStatus,
    /// The recorded deltas compose to the recorded final assignment.
    pub deltas_consistent: bool,
    /// The final assignment solves the task.
    pub solves: bool,
    pub verified: bool,
    pub messages: Vec<String>,
}

/// Re-checks a transcript against the task embedded in its header.
pub fn replay(text: &str) -> Result<ReplayReport, OrchestratorError> {
    let t = Transcript::parse(text)?;
    let formula = match &t.header.cnf {
        Some(c) => Some(parse_dimacs(c).map_err(|e| OrchestratorError::Task(e.to_string()))?),
        None => None,
    };
    let task = TaskBundle::new(
        t.header.task_id.clone(),
        t.header.instance.clone(),
        formula,
        t.header.story.clone(),
        t.header.mapping.clone(),
        t.header.decomposition.clone(),
    )?;
    let mut messages = Vec::new();
    let mut state = BoolAssignment::new();
    let mut deltas_consistent = true;
    for r in &t.rounds {
        for ch in &r.delta {
            if state.get(&ch.variable).copied() != ch.old {
                deltas_consistent = false;
                messages.push(format!("round {}: variable {} recorded old value {:?}", r.round, ch.variable, ch.old));
            }
            state.insert(ch.variable, ch.new);
        }
    }
    if state != t.result.final_assignment {
        deltas_consistent = false;
        messages.push("deltas do not compose to the final assignment".into());
    }
    if t.result.rounds_used != t.rounds.len() {
        deltas_consistent = false;
        messages.push(format!("{} rounds recorded, {} claimed", t.rounds.len(), t.result.rounds_used));
    }
    let solves = is_solved(&task, &t.result.final_assignment);
    let status_ok = (t.result.status == EpisodeStatus::Solved) == solves;
    if !status_ok {
        messages.push(format!("claimed {:?} but the final assignment {} the task", t.result.status, if solves { "solves" } else { "does not solve" }));
    }
    Ok(ReplayReport {
        task_id: t.header.task_id,
        claimed: t.result.status,
        deltas_consistent,
        solves,
        verified: deltas_consistent && status_ok,
        messages,
    })
}

/// Paths at which two JSON values differ.
pub fn json_diff(a: &serde_json::Value, b: &serde_json::Value) -> Vec<String> {
    fn walk(a: &serde_json::Value, b: &serde_json::Value, path: &str, out: &mut Vec<String>) {
        use serde_json::Value::{Array, Object};
        match (a, b) {
            (Object(x), Object(y)) => {
                let keys: BTreeSet<&String> = x.keys().chain(y.keys()).collect();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    match (x.get(k), y.get(k)) {
                        (Some(u), Some(v)) => walk(u, v, &p, out),
                        _ => out.push(p),
                    }
                }
            }
            (Array(x), Array(y)) if x.len() == y.len() => {
                for (i, (u, v)) in x.iter().zip(y).enumerate() {
                    walk(u, v, &format!("{path}[{i}]"), out);
                }
            }
            _ if a != b => out.push(path.to_string()),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(a, b, "", &mut out);
    out
}

/// Differences outside the observation between what the two modes send.
///
/// Round-1 requests of both episodes are compared directly; every later
/// decomposed round is compared with the full-mode request rebuilt from the
/// same state. An empty result means the modes differ only in observations.
pub fn audit_mode_isolation(task: &TaskBundle, full: &EpisodeResult, decomposed: &EpisodeResult, config: &EpisodeConfig) -> Vec<String> {
    let mut findings = Vec::new();
    let outside = |paths: Vec<String>| -> Vec<String> {
        paths.into_iter().filter(|p| p != "observation" && !p.starts_with("observation.")).collect()
    };
    let value = |r: &AgentRequest| serde_json::to_value(r).expect("requests serialize");
    if let (Some(f), Some(d)) = (full.transcript.first(), decomposed.transcript.first()) {
        for p in outside(json_diff(&value(&f.request), &value(&d.request))) {
            findings.push(format!("round 1: {p}"));
        }
    }
    let full_cfg = EpisodeConfig { mode: Mode::Full, ..*config };
    let mut state = BoolAssignment::new();
    for r in &decomposed.transcript {
        let rebuilt = build_request(task, &full_cfg, r.round, &state);
        for p in outside(json_diff(&value(&rebuilt), &value(&r.request))) {
            findings.push(format!("round {}: {p}", r.round));
        }
        for ch in &r.delta {
            state.insert(ch.variable, ch.new);
        }
    }
    findings
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::ScriptedAgent;
    use crate::cnf::parse_dimacs;

    fn bundle(dimacs: &str) -> TaskBundle {
        let file = SatTaskFile { id: Some("t".into()), cnf: dimacs.into(), story: "story".into(), mapping: vec![] };
        TaskBundle::from_sat_task(&file, "t", None).unwrap()
    }

    struct Silent;
    impl Agent for Silent {
        fn name(&self) -> String {
            "silent".into()
        }
        fn respond(&self, _: &AgentRequest) -> Result<AgentResponse, AgentError> {
            Ok(AgentResponse::default())
        }
    }

    struct Liar;
    impl Agent for Liar {
        fn name(&self) -> String {
            "liar".into()
        }
        fn respond(&self, _: &AgentRequest) -> Result<AgentResponse, AgentError> {
            Ok(AgentResponse { assignments: BTreeMap::from([(99, true)]), ..Default::default() })
        }
    }

    struct Down;
    impl Agent for Down {
        fn name(&self) -> String {
            "down".into()
        }
        fn respond(&self, _: &AgentRequest) -> Result<AgentResponse, AgentError> {
            Err(AgentError::Timeout)
        }
    }

    const TEN: &str = "p cnf 10 9\n1 2 0\n-2 3 0\n-3 4 0\n4 5 -6 0\n6 7 0\n-7 -8 0\n8 9 0\n9 10 0\n-1 -10 0\n";

    #[test]
    fn full_mode_one_round() {
        let task = bundle(TEN);
        let r = run_episode(&task, &ScriptedAgent::default(), &EpisodeConfig::new(Mode::Full)).unwrap();
        assert_eq!(r.status, EpisodeStatus::Solved);
        assert_eq!(r.rounds_used, 1);
    }

    #[test]
    fn decomposed_mode_solves() {
        let task = bundle(TEN);
        let r = run_episode(&task, &ScriptedAgent::default(), &EpisodeConfig::new(Mode::Decomposed)).unwrap();
        assert_eq!(r.status, EpisodeStatus::Solved);
        assert!(r.rounds_used <= task.complexity().bag_count, "{} rounds", r.rounds_used);
        assert!(check_solution(&task.instance, &as_csp(&r.final_assignment)).unwrap().satisfied);
        for round in &r.transcript {
            let bag = &task.decomposition.as_ref().unwrap().bags()[round.request.observation.focus_bag.unwrap()].vertices;
            for c in &round.request.observation.constraints {
                assert!(c.scope.iter().all(|v| bag.contains(v)));
            }
        }
    }

    #[test]
    fn silent_agent_exhausts_budget() {
        let task = bundle(TEN);
        let cfg = EpisodeConfig { max_rounds: Some(4), ..EpisodeConfig::new(Mode::Full) };
        let r = run_episode(&task, &Silent, &cfg).unwrap();
        assert_eq!(r.status, EpisodeStatus::BudgetExhausted);
        assert_eq!(r.rounds_used, 4);
        assert_eq!(EpisodeConfig::new(Mode::Full).rounds_for(&task), 30);
    }

    #[test]
    fn unknown_variable_and_transport_errors() {
        let task = bundle(TEN);
        let r = run_episode(&task, &Liar, &EpisodeConfig::new(Mode::Full)).unwrap();
        assert_eq!(r.status, EpisodeStatus::AgentError);
        assert_eq!(r.transcript.len(), 1);
        let r = run_episode(&task, &Down, &EpisodeConfig::new(Mode::Decomposed)).unwrap();
        assert_eq!(r.status, EpisodeStatus::AgentError);
        assert_eq!(r.transcript[0].error, Some(AgentError::Timeout));
    }

    #[test]
    fn decomposed_needs_td() {
        let mut task = bundle(TEN);
        task.decomposition = None;
        assert!(matches!(
            run_episode(&task, &Silent, &EpisodeConfig::new(Mode::Decomposed)),
            Err(OrchestratorError::MissingDecomposition)
        ));
    }

    #[test]
    fn rendering_uses_mapping() {
        let f = parse_dimacs("p cnf 3 2\n1 -2 0\n3 0\n").unwrap();
        let inst = cnf_to_csp(&f).unwrap();
        let mapping = vec![
            MappingEntry { entity: "rain".into(), literal: 1 },
            MappingEntry { entity: "umbrella".into(), literal: 2 },
        ];
        let obs = render_observation(&inst, &[1, 0], &mapping, true);
        assert_eq!(obs.constraints[0].text, "rain OR NOT umbrella");
        assert_eq!(obs.constraints[0].literals, Some(vec![1, -2]));
        assert_eq!(obs.constraints[1].text, "x3");
        assert_eq!(obs.unmapped, vec![3]);
        assert!(render_observation(&inst, &[], &mapping, true).constraints.is_empty());
        let raw = render_observation(&inst, &[0], &mapping, false);
        assert_eq!(raw.constraints[0].text, "x1 OR NOT x2");
    }

    #[test]
    fn negative_mapping_entry() {
        let f = parse_dimacs("p cnf 1 1\n1 0\n").unwrap();
        let inst = cnf_to_csp(&f).unwrap();
        let mapping = vec![MappingEntry { entity: "dry".into(), literal: -1 }];
        assert_eq!(render_observation(&inst, &[0], &mapping, true).constraints[0].text, "NOT dry");
    }

    #[test]
    fn focus_rules() {
        let task = bundle("p cnf 4 2\n1 2 0\n3 4 0\n");
        let td = task.decomposition.clone().unwrap();
        let empty = BoolAssignment::new();
        let f = select_focus(&task, &empty).unwrap();
        assert!(td.bags()[f].vertices.is_superset(&BTreeSet::from([1, 2])));
        let partial = BoolAssignment::from([(1, true), (2, true), (3, true)]);
        let f = select_focus(&task, &partial).unwrap();
        assert!(td.bags()[f].vertices.contains(&4));
        let done = BoolAssignment::from([(1, true), (2, true), (3, true), (4, false)]);
        assert_eq!(select_focus(&task, &done), None);
    }

    #[test]
    fn transcript_round_trip_and_replay() {
        let task = bundle(TEN);
        let r = run_episode(&task, &ScriptedAgent::default(), &EpisodeConfig::new(Mode::Decomposed)).unwrap();
        let t = transcript_of(&task, &r);
        let text = t.to_jsonl();
        assert_eq!(Transcript::parse(&text).unwrap(), t);
        let rep = replay(&text).unwrap();
        assert!(rep.verified && rep.solves, "{rep:?}");

        let mut forged = t.clone();
        forged.result.final_assignment.insert(1, !forged.result.final_assignment[&1]);
        let rep = replay(&forged.to_jsonl()).unwrap();
        assert!(!rep.verified);
    }

    #[test]
    fn modes_differ_only_in_observation() {
        let task = bundle(TEN);
        let cfg = EpisodeConfig::new(Mode::Full);
        let full = run_episode(&task, &ScriptedAgent::default(), &cfg).unwrap();
        let dec = run_episode(&task, &ScriptedAgent::default(), &EpisodeConfig::new(Mode::Decomposed)).unwrap();
        assert!(audit_mode_isolation(&task, &full, &dec, &cfg).is_empty());
        let strict = EpisodeConfig { bag_only_visibility: true, ..EpisodeConfig::new(Mode::Decomposed) };
        let dec = run_episode(&task, &ScriptedAgent::default(), &strict).unwrap();
        assert!(!audit_mode_isolation(&task, &full, &dec, &cfg).is_empty());
    }
}
