//! Agents answer one round of an episode: given the story, the mapping, the
//! violation status and an observation, they propose variable values.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::OnceLock;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cnf::MappingEntry;
use crate::csp::{ConstraintRelation, CspInstance, CspVariable, VarId};
use crate::orchestrator::{BoolAssignment, Observation, ViolationSummary};
use crate::solver::{solve_backtracking, SolveStatus, DEFAULT_NODE_BUDGET};

pub const DEFAULT_PROMPT_TEMPLATE: &str = include_str!("../templates/satbench_prompt.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRequest {
    pub round: usize,
    pub story: String,
    pub mapping: Vec<MappingEntry>,
    pub violations: ViolationSummary,
    pub observation: Observation,
    pub assignment: BoolAssignment,
    /// Every variable id of the task.
    #[serde(default)]
    pub variables: Vec<VarId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentResponse {
    pub assignments: BoolAssignment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_reply: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AgentError {
    #[error("request timed out")]
    Timeout,
    #[error("authentication rejected with HTTP {status}")]
    Auth { status: u16, body: String },
    #[error("HTTP {status} from endpoint")]
    Http { status: u16, body: String },
    #[error("transport failure: {message}")]
    Transport { message: String },
    #[error("reply unparseable after {attempts} attempts")]
    Parse { attempts: u32, raw: String },
    #[error("agent misconfigured: {message}")]
    Config { message: String },
}

impl AgentError {
    /// The raw model reply, when the failure happened after one was received.
    pub fn raw_reply(&self) -> Option<&str> {
        match self {
            AgentError::Auth { body, .. } | AgentError::Http { body, .. } => Some(body),
            AgentError::Parse { raw, .. } => Some(raw),
            _ => None,
        }
    }
}

/// One round of decision making. Implementations must be usable from
/// several episodes at once.
pub trait Agent: Send + Sync {
    fn name(&self) -> String;
    fn respond(&self, request: &AgentRequest) -> Result<AgentResponse, AgentError>;
}

/// Exact stand-in: solves the observed constraints, keeping current values
/// where it can.
#[derive(Debug, Clone, Copy)]
pub struct ScriptedAgent {
    pub node_budget: u64,
}

impl Default for ScriptedAgent {
    fn default() -> Self {
        ScriptedAgent { node_budget: DEFAULT_NODE_BUDGET }
    }
}

impl Agent for ScriptedAgent {
    fn name(&self) -> String {
        "scripted".into()
    }

    fn respond(&self, request: &AgentRequest) -> Result<AgentResponse, AgentError> {
        Ok(scripted_agent(request, self.node_budget))
    }
}

/// Rounds after which the scripted agent stops releasing pins at random and
/// switches to [`lex_step`], as a multiple of the variable count.
pub const RELEASE_PHASE_FACTOR: usize = 2;

/// Builds a local CSP from the observation and solves it with the current
/// values as soft pins. Pins are dropped until the local problem becomes
/// satisfiable: bag-private values first, lowest id first, then boundary
/// values in an order drawn from a generator keyed on the request. Dropped
/// pins that turn out not to conflict are restored, except that boundary
/// values stay released half the time so that neighboring bags cannot hold
/// each other in a cycle. The answer covers every observed variable.
///
/// Once the round index passes [`RELEASE_PHASE_FACTOR`] times the variable
/// count the agent answers with [`lex_step`] instead, which cannot cycle.
pub fn scripted_agent(request: &AgentRequest, node_budget: u64) -> AgentResponse {
    let n = request.variables.len().max(request.observation.variables.len()).max(1);
    if request.round > RELEASE_PHASE_FACTOR * n {
        lex_step(request, node_budget)
    } else {
        release_pins(request, node_budget)
    }
}

fn local_problem(obs: &Observation) -> Result<(BTreeSet<VarId>, Vec<ConstraintRelation>), AgentResponse> {
    let mut scope: BTreeSet<VarId> = obs.variables.iter().copied().collect();
    let mut relations = Vec::with_capacity(obs.constraints.len());
    for c in &obs.constraints {
        scope.extend(c.scope.iter().copied());
        match ConstraintRelation::new(c.scope.clone(), c.allowed.iter().cloned().collect()) {
            Ok(r) => relations.push(r),
            Err(e) => {
                return Err(AgentResponse { rationale: Some(format!("malformed observation: {e}")), ..Default::default() });
            }
        }
    }
    Ok((scope, relations))
}

fn pinned_instance(scope: &BTreeSet<VarId>, relations: &[ConstraintRelation], pins: &[(VarId, bool)]) -> CspInstance {
    let variables: Vec<CspVariable> = scope.iter().map(|&v| CspVariable::boolean(v, format!("x{v}"))).collect();
    let mut constraints = relations.to_vec();
    for &(v, b) in pins {
        constraints.push(ConstraintRelation::new(vec![v], BTreeSet::from([vec![i64::from(b)]])).expect("unary pin"));
    }
    CspInstance::new(variables, constraints, None).expect("observation variables are Boolean")
}

fn release_pins(request: &AgentRequest, node_budget: u64) -> AgentResponse {
    let (scope, relations) = match local_problem(&request.observation) {
        Ok(p) => p,
        Err(response) => return response,
    };
    let boundary: BTreeSet<VarId> = request.observation.boundary.iter().copied().collect();
    let mut pins: Vec<(VarId, bool)> =
        request.assignment.iter().filter(|(v, _)| scope.contains(v)).map(|(&v, &b)| (v, b)).collect();
    pins.sort_by_key(|&(v, _)| (boundary.contains(&v), v));
    let first_boundary = pins.iter().position(|(v, _)| boundary.contains(v)).unwrap_or(pins.len());
    let mut rng = request_rng(request, b"release", 0);
    pins[first_boundary..].shuffle(&mut rng);
    let solve = |active: &[(VarId, bool)]| solve_backtracking(&pinned_instance(&scope, &relations, active), node_budget);

    // shortest prefix of pins whose release makes the bag satisfiable
    let mut found = None;
    for dropped in 0..=pins.len() {
        let result = solve(&pins[dropped..]);
        match result.status {
            SolveStatus::Sat => {
                found = Some((dropped, result));
                break;
            }
            SolveStatus::BudgetExhausted => {
                return AgentResponse { rationale: Some("search budget exhausted".into()), ..Default::default() };
            }
            SolveStatus::Unsat => {}
        }
    }
    let Some((dropped, mut result)) = found else {
        return AgentResponse { rationale: Some("locally unsatisfiable".into()), ..Default::default() };
    };
    let mut active: Vec<(VarId, bool)> = pins[dropped..].to_vec();
    let mut released = 0;
    if dropped > 0 {
        for (i, &pin) in pins[..dropped - 1].iter().enumerate().rev() {
            if i >= first_boundary && rng.random_bool(0.5) {
                released += 1;
                continue;
            }
            active.push(pin);
            let r = solve(&active);
            if r.status == SolveStatus::Sat {
                result = r;
            } else {
                active.pop();
                released += 1;
            }
        }
        released += 1;
    }
    let model = result.assignment.expect("sat carries a model");
    let assignments = model.into_iter().map(|(v, x)| (v, x == 1)).collect();
    let rationale = (released > 0).then(|| format!("released {released} pinned value(s)"));
    AgentResponse { assignments, rationale, raw_reply: None }
}

/// Moves to the lexicographically smallest assignment at or above the
/// current one that satisfies every observed constraint.
///
/// Assignments are read as numbers whose digits follow `request.variables`,
/// first entry most significant (variables missing from that list follow by
/// id); unassigned variables read as false. Current values act as pins that
/// are released least significant first. The first released position that
/// can go from false to true, with every more significant pin kept, gives the
/// answer: that variable is set, observed variables below it take the
/// smallest values the constraints allow, and unobserved true variables below
/// it are reset. Each move skips only assignments that break an observed
/// constraint, so repeated moves never pass over a solution. If no larger
/// assignment exists the search wraps around to the smallest one. The answer
/// covers every observed variable plus the unobserved ones it changes.
pub fn lex_step(request: &AgentRequest, node_budget: u64) -> AgentResponse {
    let (scope, relations) = match local_problem(&request.observation) {
        Ok(p) => p,
        Err(response) => return response,
    };
    let current = |v: VarId| request.assignment.get(&v).copied().unwrap_or(false);
    let exhausted = std::cell::Cell::new(false);
    let sat = |pins: &[(VarId, bool)]| -> bool {
        match solve_backtracking(&pinned_instance(&scope, &relations, pins), node_budget).status {
            SolveStatus::Sat => true,
            SolveStatus::Unsat => false,
            SolveStatus::BudgetExhausted => {
                exhausted.set(true);
                false
            }
        }
    };

    // most significant first
    let mut order: Vec<VarId> = Vec::new();
    let mut listed = BTreeSet::new();
    for &v in &request.variables {
        if listed.insert(v) {
            order.push(v);
        }
    }
    let mut rest: BTreeSet<VarId> = scope.iter().copied().collect();
    rest.extend(request.assignment.keys().copied());
    order.extend(rest.into_iter().filter(|v| !listed.contains(v)));
    let rank: BTreeMap<VarId, usize> = order.iter().enumerate().map(|(i, &v)| (v, i)).collect();

    // pins above `flip`, plus the flip itself when it is observed
    let pins_above = |flip: Option<VarId>| -> Vec<(VarId, bool)> {
        let cut = flip.map_or(usize::MAX, |f| rank[&f]);
        let mut pins: Vec<(VarId, bool)> =
            order.iter().filter(|&&v| scope.contains(&v) && rank[&v] < cut).map(|&v| (v, current(v))).collect();
        if let Some(f) = flip.filter(|f| scope.contains(f)) {
            pins.push((f, true));
        }
        pins
    };
    let keep_all = pins_above(None);
    let mut flip = None;
    let mut wrapped = false;
    if !sat(&keep_all) {
        flip = order.iter().rev().copied().filter(|&p| !current(p)).find(|&p| sat(&pins_above(Some(p))));
        if flip.is_none() {
            if exhausted.get() {
                return AgentResponse { rationale: Some("search budget exhausted".into()), ..Default::default() };
            }
            if !sat(&[]) {
                return AgentResponse { rationale: Some("locally unsatisfiable".into()), ..Default::default() };
            }
            wrapped = true;
        }
    }
    let mut pins = match (flip, wrapped) {
        (_, true) => Vec::new(),
        (Some(p), _) => pins_above(Some(p)),
        (None, _) => keep_all,
    };
    let released: Vec<VarId> =
        order.iter().copied().filter(|v| scope.contains(v) && !pins.iter().any(|&(w, _)| w == *v)).collect();
    for v in released {
        pins.push((v, false));
        if !sat(&pins) {
            pins.last_mut().expect("just pushed").1 = true;
        }
    }
    if exhausted.get() {
        return AgentResponse { rationale: Some("search budget exhausted".into()), ..Default::default() };
    }
    let mut target: BTreeMap<VarId, bool> = pins.into_iter().collect();
    if let Some(p) = flip.filter(|p| !scope.contains(p)) {
        target.insert(p, true);
    }
    let floor = if wrapped { 0 } else { flip.map_or(usize::MAX, |p| rank[&p] + 1) };
    for (&v, &b) in &request.assignment {
        if b && rank[&v] >= floor && !scope.contains(&v) {
            target.insert(v, false);
        }
    }
    let assignments = target;
    let rationale = if wrapped {
        Some("no larger local assignment; restarted from the smallest".into())
    } else {
        flip.map(|p| format!("advanced at x{p}"))
    };
    AgentResponse { assignments, rationale, raw_reply: None }
}

/// Scripted answers with every returned bit flipped independently.
#[derive(Debug, Clone, Copy)]
pub struct NoisyAgent {
    pub flip_probability: f64,
    pub seed: u64,
    pub node_budget: u64,
}

impl NoisyAgent {
    /// # Panics
    ///
    /// If `flip_probability` is outside `[0, 1]`.
    pub fn new(flip_probability: f64, seed: u64) -> Self {
        assert!((0.0..=1.0).contains(&flip_probability), "flip probability must lie in [0, 1]");
        NoisyAgent { flip_probability, seed, node_budget: DEFAULT_NODE_BUDGET }
    }
}

impl Agent for NoisyAgent {
    fn name(&self) -> String {
        format!("noisy(p={})", self.flip_probability)
    }

    fn respond(&self, request: &AgentRequest) -> Result<AgentResponse, AgentError> {
        Ok(noisy_agent(request, self.flip_probability, self.seed, self.node_budget))
    }
}

fn request_rng(request: &AgentRequest, purpose: &[u8], seed: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(purpose);
    hasher.update(seed.to_le_bytes());
    hasher.update(serde_json::to_vec(request).expect("requests serialize"));
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

/// The generator is keyed on the seed and a digest of the request, so the
/// answer is a pure function of both.
pub fn noisy_agent(request: &AgentRequest, flip_probability: f64, seed: u64, node_budget: u64) -> AgentResponse {
    let mut response = scripted_agent(request, node_budget);
    let mut rng = request_rng(request, b"noise", seed);
    for value in response.assignments.values_mut() {
        if rng.random_bool(flip_probability) {
            *value = !*value;
        }
    }
    response
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    /// Extra attempts after an unparseable reply.
    pub retries: u32,
    pub template: String,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            api_key: None,
            model: model.into(),
            timeout: Duration::from_secs(60),
            retries: 3,
            template: DEFAULT_PROMPT_TEMPLATE.to_string(),
        }
    }

    /// Reads `BAGWISE_ENDPOINT`, `BAGWISE_API_KEY`, `BAGWISE_MODEL`,
    /// `BAGWISE_TIMEOUT_SECS`, `BAGWISE_RETRIES` and `BAGWISE_PROMPT_TEMPLATE`.
    pub fn from_env() -> Result<Self, AgentError> {
        let var = |k: &str| std::env::var(k).ok().filter(|s| !s.is_empty());
        let bad = |message: String| AgentError::Config { message };
        let endpoint = var("BAGWISE_ENDPOINT").ok_or_else(|| bad("BAGWISE_ENDPOINT is not set".into()))?;
        let mut cfg = RemoteConfig::new(endpoint, var("BAGWISE_MODEL").unwrap_or_else(|| "default".into()));
        cfg.api_key = var("BAGWISE_API_KEY");
        if let Some(t) = var("BAGWISE_TIMEOUT_SECS") {
            let secs: f64 = t.parse().map_err(|_| bad(format!("BAGWISE_TIMEOUT_SECS={t} is not a number")))?;
            cfg.timeout = Duration::from_secs_f64(secs);
        }
        if let Some(r) = var("BAGWISE_RETRIES") {
            cfg.retries = r.parse().map_err(|_| bad(format!("BAGWISE_RETRIES={r} is not an integer")))?;
        }
        if let Some(path) = var("BAGWISE_PROMPT_TEMPLATE") {
            cfg.template = load_template(Path::new(&path))?;
        }
        Ok(cfg)
    }
}

pub fn load_template(path: &Path) -> Result<String, AgentError> {
    std::fs::read_to_string(path)
        .map_err(|e| AgentError::Config { message: format!("cannot read template {}: {e}", path.display()) })
}

/// Client for an OpenAI-compatible chat-completions endpoint.
pub struct RemoteAgent {
    config: RemoteConfig,
    http: ureq::Agent,
}

impl RemoteAgent {
    pub fn new(config: RemoteConfig) -> Self {
        let http = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteAgent { config, http }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    /// Sends one prompt and returns the completion text, if the body has one,
    /// together with the raw body.
    pub fn complete(&self, prompt: &str) -> Result<(Option<String>, String), AgentError> {
        let body = self.call(prompt)?;
        Ok((completion_content(&body), body))
    }

    fn call(&self, prompt: &str) -> Result<String, AgentError> {
        let body = serde_json::json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [{ "role": "user", "content": prompt }],
        });
        let mut req = self.http.post(&self.config.endpoint);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(transport_error)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(transport_error)?;
        match status {
            200..=299 => Ok(text),
            401 | 403 => Err(AgentError::Auth { status, body: text }),
            _ => Err(AgentError::Http { status, body: text }),
        }
    }
}

fn transport_error(e: ureq::Error) -> AgentError {
    match e {
        ureq::Error::Timeout(_) => AgentError::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => AgentError::Timeout,
        other => AgentError::Transport { message: other.to_string() },
    }
}

fn completion_content(body: &str) -> Option<String> {
    let v: serde_json::Value = serde_json::from_str(body).ok()?;
    v.pointer("/choices/0/message/content")?.as_str().map(str::to_owned)
}

impl Agent for RemoteAgent {
    fn name(&self) -> String {
        format!("remote({})", self.config.model)
    }

    fn respond(&self, request: &AgentRequest) -> Result<AgentResponse, AgentError> {
        let prompt = render_prompt(&self.config.template, request);
        let mut last_raw = String::new();
        for attempt in 0..=self.config.retries {
            let (content, body) = self.complete(&prompt)?;
            last_raw = content.clone().unwrap_or(body);
            if let Some(text) = content {
                if let Some(assignments) = parse_reply(&text, &request.mapping) {
                    return Ok(AgentResponse {
                        assignments,
                        rationale: (attempt > 0).then(|| format!("parsed on attempt {}", attempt + 1)),
                        raw_reply: Some(text),
                    });
                }
            }
        }
        Err(AgentError::Parse { attempts: self.config.retries + 1, raw: last_raw })
    }
}

/// Fills `{{story}}`, `{{mapping}}`, `{{violations}}`, `{{observations}}`,
/// `{{assignment}}`, `{{variables}}` and `{{round}}`.
pub fn render_prompt(template: &str, request: &AgentRequest) -> String {
    let mapping = request
        .mapping
        .iter()
        .map(|m| format!("- {} <-> {}", m.entity, m.literal))
        .collect::<Vec<_>>()
        .join("\n");
    let violations = if request.violations.violated.is_empty() {
        "No condition is currently violated.".to_string()
    } else {
        let list: Vec<String> = request.violations.violated.iter().map(|i| format!("#{i}")).collect();
        format!("Violated conditions: {}", list.join(", "))
    };
    let observations = request
        .observation
        .constraints
        .iter()
        .map(|c| format!("#{}: {}", c.index, c.text))
        .collect::<Vec<_>>()
        .join("\n");
    let assignment = if request.assignment.is_empty() {
        "(nothing assigned yet)".to_string()
    } else {
        request
            .assignment
            .iter()
            .map(|(v, b)| format!("{} = {b}", display_name(*v, &request.mapping)))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let variables = request
        .observation
        .variables
        .iter()
        .map(|&v| display_name(v, &request.mapping))
        .collect::<Vec<_>>()
        .join(", ");
    template
        .replace("{{story}}", &request.story)
        .replace("{{mapping}}", &mapping)
        .replace("{{violations}}", &violations)
        .replace("{{observations}}", &observations)
        .replace("{{assignment}}", &assignment)
        .replace("{{variables}}", &variables)
        .replace("{{round}}", &request.round.to_string())
}

fn display_name(v: VarId, mapping: &[MappingEntry]) -> String {
    mapping
        .iter()
        .find(|m| m.literal == i64::from(v))
        .map_or_else(|| format!("x{v}"), |m| m.entity.clone())
}

/// Extracts `<entity | index | xN> = <true | false>` lines. Lines that do
/// not match or name nothing known are skipped; a reply with no usable line
/// yields `None` unless it says `NO CHANGES`.
pub fn parse_reply(text: &str, mapping: &[MappingEntry]) -> Option<BoolAssignment> {
    static LINE: OnceLock<Regex> = OnceLock::new();
    let line = LINE.get_or_init(|| {
        Regex::new(r"(?i)^\s*(?:[-*•]\s*)?`?([^=:`]+?)`?\s*(?:=|:|->)\s*\**(true|false|1|0|yes|no)\**\s*[.,;]?\s*$")
            .expect("valid regex")
    });
    let index = |name: &str| -> Option<(VarId, bool)> {
        if let Some(m) = mapping.iter().find(|m| m.entity.eq_ignore_ascii_case(name)) {
            let v = VarId::try_from(m.literal.unsigned_abs()).ok()?;
            return Some((v, m.literal > 0));
        }
        let digits = name.strip_prefix(['x', 'X']).unwrap_or(name);
        digits.parse::<VarId>().ok().filter(|&v| v > 0).map(|v| (v, true))
    };
    let mut out = BTreeMap::new();
    let mut no_changes = false;
    for raw in text.lines() {
        if raw.trim().eq_ignore_ascii_case("no changes") {
            no_changes = true;
            continue;
        }
        let Some(caps) = line.captures(raw) else { continue };
        let Some((v, polarity)) = index(caps[1].trim()) else { continue };
        let said = matches!(caps[2].to_ascii_lowercase().as_str(), "true" | "1" | "yes");
        out.insert(v, said == polarity);
    }
    (!out.is_empty() || no_changes).then_some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::RenderedConstraint;

    fn clause_constraint(index: usize, scope: Vec<VarId>, forbidden: Vec<i64>) -> RenderedConstraint {
        let k = scope.len() as u32;
        let allowed = (0..1u32 << k)
            .map(|m| (0..k).map(|i| i64::from(m >> (k - 1 - i) & 1)).collect::<Vec<_>>())
            .filter(|t| *t != forbidden)
            .collect();
        RenderedConstraint { index, text: String::new(), literals: None, scope, allowed }
    }

    fn request(constraints: Vec<RenderedConstraint>, variables: Vec<VarId>, assignment: BoolAssignment) -> AgentRequest {
        AgentRequest {
            round: 1,
            story: String::new(),
            mapping: vec![],
            violations: ViolationSummary::default(),
            observation: Observation { constraints, variables: variables.clone(), ..Default::default() },
            assignment,
            variables,
        }
    }

    #[test]
    fn separator_pin_is_kept() {
        let eq = RenderedConstraint {
            index: 0,
            text: "b = c".into(),
            literals: None,
            scope: vec![2, 3],
            allowed: vec![vec![0, 0], vec![1, 1]],
        };
        let req = request(vec![eq], vec![2, 3], BTreeMap::from([(2, true)]));
        let r = scripted_agent(&req, DEFAULT_NODE_BUDGET);
        assert_eq!(r.assignments, BTreeMap::from([(2, true), (3, true)]));
    }

    #[test]
    fn contradictory_units() {
        let req = request(
            vec![clause_constraint(0, vec![1], vec![0]), clause_constraint(1, vec![1], vec![1])],
            vec![1],
            BTreeMap::new(),
        );
        let r = scripted_agent(&req, DEFAULT_NODE_BUDGET);
        assert!(r.assignments.is_empty());
        assert_eq!(r.rationale.as_deref(), Some("locally unsatisfiable"));
    }

    #[test]
    fn lex_step_carries_into_the_most_significant_digit() {
        // x1 = x2 = x3 with x1 most significant: only setting x1 leads upward
        let eq = |i, a, b| RenderedConstraint {
            index: i,
            text: String::new(),
            literals: None,
            scope: vec![a, b],
            allowed: vec![vec![0, 0], vec![1, 1]],
        };
        let req = request(
            vec![eq(0, 1, 2), eq(1, 2, 3)],
            vec![1, 2, 3],
            BTreeMap::from([(1, false), (2, false), (3, true)]),
        );
        let r = lex_step(&req, DEFAULT_NODE_BUDGET);
        assert_eq!(r.assignments, BTreeMap::from([(1, true), (2, true), (3, true)]));
    }

    #[test]
    fn noisy_extremes_and_determinism() {
        let req = request(vec![clause_constraint(0, vec![1, 2], vec![0, 0])], vec![1, 2, 3], BTreeMap::new());
        let base = scripted_agent(&req, DEFAULT_NODE_BUDGET);
        assert_eq!(noisy_agent(&req, 0.0, 9, DEFAULT_NODE_BUDGET), base);
        let flipped = noisy_agent(&req, 1.0, 9, DEFAULT_NODE_BUDGET);
        for (v, b) in &base.assignments {
            assert_eq!(flipped.assignments[v], !b);
        }
        let a = noisy_agent(&req, 0.5, 42, DEFAULT_NODE_BUDGET);
        let b = noisy_agent(&req, 0.5, 42, DEFAULT_NODE_BUDGET);
        assert_eq!(a, b);
    }

    #[test]
    fn reply_grammar() {
        let mapping = vec![
            MappingEntry { entity: "rain".into(), literal: 1 },
            MappingEntry { entity: "dry".into(), literal: -2 },
        ];
        let text = "Sure! Here is my answer.\n- rain = true\n* dry: false\nx3 = 0\n4 = yes\nweather = true\n";
        let got = parse_reply(text, &mapping).unwrap();
        assert_eq!(got, BTreeMap::from([(1, true), (2, true), (3, false), (4, true)]));
        assert_eq!(parse_reply("I cannot decide.", &mapping), None);
        assert_eq!(parse_reply("NO CHANGES", &mapping), Some(BTreeMap::new()));
    }

    #[test]
    fn prompt_placeholders_filled() {
        let mut req = request(vec![], vec![1], BTreeMap::from([(1, true)]));
        req.story = "It rains.".into();
        req.mapping = vec![MappingEntry { entity: "rain".into(), literal: 1 }];
        let p = render_prompt(DEFAULT_PROMPT_TEMPLATE, &req);
        assert!(p.contains("It rains."));
        assert!(p.contains("rain = true"));
        assert!(!p.contains("{{"));
    }
}
