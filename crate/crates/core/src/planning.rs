//! Planning as satisfiability: STRIPS-style problems, their time-indexed
//! Boolean CSP encoding, and a generator for meeting-scheduling instances.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnf::{Clause, Literal};
use crate::csp::{ConstraintRelation, CspAssignment, CspError, CspInstance, CspVariable, VarId, BOOLEAN_DOMAIN, DEFAULT_ARITY_CAP};

pub type FluentId = u32;
pub type ActionId = u32;

/// Horizon used for generated scheduling problems: every invitation is sent in one step.
pub const SCHEDULING_HORIZON: usize = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanningError {
    #[error("horizon must be at least 1")]
    HorizonZero,
    #[error("unknown fluent {0}")]
    UnknownFluent(FluentId),
    #[error("unknown action {0}")]
    UnknownAction(ActionId),
    #[error("fluent id {0} declared twice")]
    DuplicateFluent(FluentId),
    #[error("action id {0} declared twice")]
    DuplicateAction(ActionId),
    #[error("action {action} both adds and deletes fluent {fluent}")]
    AddDeleteOverlap { action: ActionId, fluent: FluentId },
    #[error("exactly-one over an empty term list")]
    EmptyExactlyOne,
    #[error("goal term {0:?} has no literals")]
    EmptyTerm(String),
    #[error("goal references undefined term {0}")]
    UnknownTerm(usize),
    #[error("person {0:?} has no availability entry")]
    UnknownPerson(String),
    #[error("availability of {person:?} lists ({time}, {location}) outside the time/location grid")]
    SlotOutsideGrid { person: String, time: String, location: String },
    #[error(transparent)]
    Csp(#[from] CspError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fluent {
    pub id: FluentId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSchema {
    pub id: ActionId,
    pub name: String,
    #[serde(default)]
    pub preconditions: BTreeSet<FluentId>,
    #[serde(default)]
    pub add_effects: BTreeSet<FluentId>,
    #[serde(default)]
    pub delete_effects: BTreeSet<FluentId>,
}

impl ActionSchema {
    /// True when either action deletes a precondition or an add effect of the other.
    pub fn interferes_with(&self, other: &ActionSchema) -> bool {
        let clobbers = |a: &ActionSchema, b: &ActionSchema| {
            a.delete_effects.iter().any(|f| b.preconditions.contains(f) || b.add_effects.contains(f))
        };
        clobbers(self, other) || clobbers(other, self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FluentLiteral {
    pub fluent: FluentId,
    pub positive: bool,
}

impl FluentLiteral {
    pub fn pos(fluent: FluentId) -> Self {
        FluentLiteral { fluent, positive: true }
    }

    pub fn neg(fluent: FluentId) -> Self {
        FluentLiteral { fluent, positive: false }
    }

    fn holds(self, state: &BTreeSet<FluentId>) -> bool {
        state.contains(&self.fluent) == self.positive
    }
}

/// A named conjunction of fluent literals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalTerm {
    pub name: String,
    pub literals: Vec<FluentLiteral>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GoalAtom {
    Fluent { fluent: FluentId, positive: bool },
    Term { term: usize, positive: bool },
}

/// Clauses over fluent and term literals plus exactly-one groups of terms.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalFormula {
    #[serde(default)]
    pub terms: Vec<GoalTerm>,
    #[serde(default)]
    pub clauses: Vec<Vec<GoalAtom>>,
    #[serde(default)]
    pub exactly_one: Vec<Vec<usize>>,
}

impl GoalFormula {
    /// Conjunction of positive fluents.
    pub fn all_of(fluents: impl IntoIterator<Item = FluentId>) -> Self {
        GoalFormula {
            clauses: fluents.into_iter().map(|f| vec![GoalAtom::Fluent { fluent: f, positive: true }]).collect(),
            ..GoalFormula::default()
        }
    }

    pub fn term_holds(&self, term: usize, state: &BTreeSet<FluentId>) -> bool {
        self.terms[term].literals.iter().all(|l| l.holds(state))
    }

    pub fn evaluate(&self, state: &BTreeSet<FluentId>) -> bool {
        let atom = |a: &GoalAtom| match *a {
            GoalAtom::Fluent { fluent, positive } => state.contains(&fluent) == positive,
            GoalAtom::Term { term, positive } => self.term_holds(term, state) == positive,
        };
        self.clauses.iter().all(|c| c.iter().any(atom))
            && self
                .exactly_one
                .iter()
                .all(|g| g.iter().filter(|&&t| self.term_holds(t, state)).count() == 1)
    }

    fn validate(&self, fluents: &BTreeSet<FluentId>) -> Result<(), PlanningError> {
        let known = |f: FluentId| if fluents.contains(&f) { Ok(()) } else { Err(PlanningError::UnknownFluent(f)) };
        for t in &self.terms {
            if t.literals.is_empty() {
                return Err(PlanningError::EmptyTerm(t.name.clone()));
            }
            for l in &t.literals {
                known(l.fluent)?;
            }
        }
        let term = |i: usize| if i < self.terms.len() { Ok(()) } else { Err(PlanningError::UnknownTerm(i)) };
        for c in &self.clauses {
            for a in c {
                match *a {
                    GoalAtom::Fluent { fluent, .. } => known(fluent)?,
                    GoalAtom::Term { term: i, .. } => term(i)?,
                }
            }
        }
        for g in &self.exactly_one {
            if g.is_empty() {
                return Err(PlanningError::EmptyExactlyOne);
            }
            for &i in g {
                term(i)?;
            }
        }
        Ok(())
    }
}

/// P = ⟨F, A, I, G⟩.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPlanningProblem", into = "RawPlanningProblem")]
pub struct PlanningProblem {
    fluents: Vec<Fluent>,
    actions: Vec<ActionSchema>,
    initial: BTreeSet<FluentId>,
    goal: GoalFormula,
}

#[derive(Serialize, Deserialize)]
struct RawPlanningProblem {
    fluents: Vec<Fluent>,
    actions: Vec<ActionSchema>,
    #[serde(default)]
    initial: BTreeSet<FluentId>,
    goal: GoalFormula,
}

impl TryFrom<RawPlanningProblem> for PlanningProblem {
    type Error = PlanningError;

    fn try_from(raw: RawPlanningProblem) -> Result<Self, Self::Error> {
        PlanningProblem::new(raw.fluents, raw.actions, raw.initial, raw.goal)
    }
}

impl From<PlanningProblem> for RawPlanningProblem {
    fn from(p: PlanningProblem) -> Self {
        RawPlanningProblem { fluents: p.fluents, actions: p.actions, initial: p.initial, goal: p.goal }
    }
}

impl PlanningProblem {
    pub fn new(
        fluents: Vec<Fluent>,
        actions: Vec<ActionSchema>,
        initial: BTreeSet<FluentId>,
        goal: GoalFormula,
    ) -> Result<Self, PlanningError> {
        let mut ids = BTreeSet::new();
        for f in &fluents {
            if !ids.insert(f.id) {
                return Err(PlanningError::DuplicateFluent(f.id));
            }
        }
        let known = |f: &FluentId| if ids.contains(f) { Ok(()) } else { Err(PlanningError::UnknownFluent(*f)) };
        let mut action_ids = BTreeSet::new();
        for a in &actions {
            if !action_ids.insert(a.id) {
                return Err(PlanningError::DuplicateAction(a.id));
            }
            for f in a.preconditions.iter().chain(&a.add_effects).chain(&a.delete_effects) {
                known(f)?;
            }
            if let Some(&f) = a.add_effects.intersection(&a.delete_effects).next() {
                return Err(PlanningError::AddDeleteOverlap { action: a.id, fluent: f });
            }
        }
        for f in &initial {
            known(f)?;
        }
        goal.validate(&ids)?;
        Ok(PlanningProblem { fluents, actions, initial, goal })
    }

    pub fn fluents(&self) -> &[Fluent] {
        &self.fluents
    }

    pub fn actions(&self) -> &[ActionSchema] {
        &self.actions
    }

    pub fn initial(&self) -> &BTreeSet<FluentId> {
        &self.initial
    }

    pub fn goal(&self) -> &GoalFormula {
        &self.goal
    }

    pub fn action(&self, id: ActionId) -> Option<&ActionSchema> {
        self.actions.iter().find(|a| a.id == id)
    }

    pub fn fluent(&self, id: FluentId) -> Option<&Fluent> {
        self.fluents.iter().find(|f| f.id == id)
    }
}

fn conjunction_clauses(indicator: u32, literals: &[Literal]) -> Vec<Clause> {
    let m = Literal::positive(indicator);
    let mut out: Vec<Clause> = literals.iter().map(|&l| Clause::new([m.negated(), l])).collect();
    out.push(Clause::new(std::iter::once(m).chain(literals.iter().map(|l| l.negated()))));
    out
}

/// Clauses forcing exactly one of `terms` (each a conjunction) to hold.
///
/// Terms with more than one literal get a fresh indicator variable taken from
/// `next_var`, tied to the conjunction by equivalence clauses.
pub fn exactly_one(terms: &[Vec<Literal>], next_var: &mut u32) -> Result<Vec<Clause>, PlanningError> {
    if terms.is_empty() {
        return Err(PlanningError::EmptyExactlyOne);
    }
    let mut clauses = Vec::new();
    let mut indicators = Vec::with_capacity(terms.len());
    for (i, t) in terms.iter().enumerate() {
        match t.as_slice() {
            [] => return Err(PlanningError::EmptyTerm(format!("term {i}"))),
            [l] => indicators.push(*l),
            lits => {
                let m = *next_var;
                *next_var += 1;
                clauses.extend(conjunction_clauses(m, lits));
                indicators.push(Literal::positive(m));
            }
        }
    }
    clauses.push(Clause::new(indicators.iter().copied()));
    for i in 0..indicators.len() {
        for j in i + 1..indicators.len() {
            clauses.push(Clause::new([indicators[i].negated(), indicators[j].negated()]));
        }
    }
    Ok(clauses)
}

struct Builder {
    variables: Vec<CspVariable>,
    constraints: Vec<ConstraintRelation>,
}

impl Builder {
    fn var(&mut self, name: String) -> VarId {
        let id = self.variables.len() as VarId + 1;
        self.variables.push(CspVariable::boolean(id, name));
        id
    }

    fn relation(&mut self, scope: Vec<VarId>, keep: impl FnMut(&[i64]) -> bool) -> Result<(), CspError> {
        let domains = vec![&BOOLEAN_DOMAIN[..]; scope.len()];
        self.constraints.push(ConstraintRelation::from_predicate(scope, &domains, DEFAULT_ARITY_CAP, keep)?);
        Ok(())
    }

    fn clause(&mut self, clause: &Clause) -> Result<(), CspError> {
        let scope = clause.variables();
        let lits = clause.literals().to_vec();
        let pos: HashMap<VarId, usize> = scope.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        self.relation(scope, |t| lits.iter().any(|l| (t[pos[&l.variable()]] == 1) == l.is_positive()))
    }
}

/// A planning problem unrolled to a fixed horizon, with the variable maps
/// needed to read plans back out of CSP solutions.
#[derive(Debug, Clone)]
pub struct PlanningEncoding {
    pub instance: CspInstance,
    horizon: usize,
    fluent_ids: Vec<FluentId>,
    action_ids: Vec<ActionId>,
    fluent_vars: Vec<Vec<VarId>>,
    action_vars: Vec<Vec<VarId>>,
    term_lits: Vec<Literal>,
}

impl PlanningEncoding {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Variable of fluent `f` at step `t` (0..=horizon).
    pub fn fluent_var(&self, f: FluentId, t: usize) -> Option<VarId> {
        let i = self.fluent_ids.iter().position(|&x| x == f)?;
        self.fluent_vars.get(t).map(|row| row[i])
    }

    /// Variable of action `a` at step `t` (1..=horizon).
    pub fn action_var(&self, a: ActionId, t: usize) -> Option<VarId> {
        let i = self.action_ids.iter().position(|&x| x == a)?;
        t.checked_sub(1).and_then(|s| self.action_vars.get(s)).map(|row| row[i])
    }

    /// Literal standing for goal term `i` at the horizon.
    pub fn term_literal(&self, i: usize) -> Option<Literal> {
        self.term_lits.get(i).copied()
    }

    pub fn term_value(&self, solution: &CspAssignment, i: usize) -> Option<bool> {
        let l = self.term_literal(i)?;
        solution.get(&l.variable()).map(|&v| (v == 1) == l.is_positive())
    }

    pub fn decode_plan(&self, solution: &CspAssignment) -> Vec<BTreeSet<ActionId>> {
        self.action_vars
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&self.action_ids)
                    .filter(|(v, _)| solution.get(v) == Some(&1))
                    .map(|(_, &a)| a)
                    .collect()
            })
            .collect()
    }

    pub fn decode_state(&self, solution: &CspAssignment, t: usize) -> BTreeSet<FluentId> {
        self.fluent_vars[t]
            .iter()
            .zip(&self.fluent_ids)
            .filter(|(v, _)| solution.get(v) == Some(&1))
            .map(|(_, &f)| f)
            .collect()
    }
}

/// Unrolls `problem` over `horizon` steps into a Boolean CSP.
///
/// Variables are numbered from 1 so that goal clauses share the DIMACS
/// numbering. Frame constraints are k-wise over `f@t-1`, `f@t` and every
/// action at `t` that adds or deletes `f`.
pub fn encode_planning_to_csp(problem: &PlanningProblem, horizon: usize) -> Result<PlanningEncoding, PlanningError> {
    if horizon == 0 {
        return Err(PlanningError::HorizonZero);
    }
    let mut b = Builder { variables: Vec::new(), constraints: Vec::new() };
    let fluent_vars: Vec<Vec<VarId>> = (0..=horizon)
        .map(|t| problem.fluents.iter().map(|f| b.var(format!("{}@{t}", f.name))).collect())
        .collect();
    let action_vars: Vec<Vec<VarId>> = (1..=horizon)
        .map(|t| problem.actions.iter().map(|a| b.var(format!("{}@{t}", a.name))).collect())
        .collect();
    let fpos: HashMap<FluentId, usize> = problem.fluents.iter().enumerate().map(|(i, f)| (f.id, i)).collect();
    let fv = |f: FluentId, t: usize| fluent_vars[t][fpos[&f]];

    for (i, f) in problem.fluents.iter().enumerate() {
        let v = fluent_vars[0][i];
        let want = i64::from(problem.initial.contains(&f.id));
        b.relation(vec![v], |t| t[0] == want)?;
    }

    for t in 1..=horizon {
        let acts = &action_vars[t - 1];
        for (a, &av) in problem.actions.iter().zip(acts) {
            for &p in &a.preconditions {
                b.clause(&Clause::new([Literal::negative(av), Literal::positive(fv(p, t - 1))]))?;
            }
            for &f in &a.add_effects {
                b.clause(&Clause::new([Literal::negative(av), Literal::positive(fv(f, t))]))?;
            }
            for &f in &a.delete_effects {
                b.clause(&Clause::new([Literal::negative(av), Literal::negative(fv(f, t))]))?;
            }
        }
        for i in 0..problem.actions.len() {
            for j in i + 1..problem.actions.len() {
                if problem.actions[i].interferes_with(&problem.actions[j]) {
                    b.clause(&Clause::new([Literal::negative(acts[i]), Literal::negative(acts[j])]))?;
                }
            }
        }
        for f in &problem.fluents {
            let adders: Vec<VarId> = problem
                .actions
                .iter()
                .zip(acts)
                .filter(|(a, _)| a.add_effects.contains(&f.id))
                .map(|(_, &v)| v)
                .collect();
            let deleters: Vec<VarId> = problem
                .actions
                .iter()
                .zip(acts)
                .filter(|(a, _)| a.delete_effects.contains(&f.id))
                .map(|(_, &v)| v)
                .collect();
            let mut scope = vec![fv(f.id, t - 1), fv(f.id, t)];
            scope.extend(&adders);
            scope.extend(&deleters);
            let na = adders.len();
            b.relation(scope, |tup| match (tup[0], tup[1]) {
                (0, 1) => tup[2..2 + na].contains(&1),
                (1, 0) => tup[2 + na..].contains(&1),
                _ => true,
            })?;
        }
    }

    let goal = &problem.goal;
    let mut next_var = b.variables.len() as u32 + 1;
    let mut term_lits = Vec::with_capacity(goal.terms.len());
    let mut goal_clauses = Vec::new();
    for term in &goal.terms {
        let lits: Vec<Literal> = term
            .literals
            .iter()
            .map(|l| Literal::new(fv(l.fluent, horizon), l.positive))
            .collect();
        if let [l] = lits.as_slice() {
            term_lits.push(*l);
        } else {
            let m = b.var(term.name.clone());
            debug_assert_eq!(m, next_var);
            next_var += 1;
            goal_clauses.extend(conjunction_clauses(m, &lits));
            term_lits.push(Literal::positive(m));
        }
    }
    for c in &goal.clauses {
        goal_clauses.push(Clause::new(c.iter().map(|a| match *a {
            GoalAtom::Fluent { fluent, positive } => Literal::new(fv(fluent, horizon), positive),
            GoalAtom::Term { term, positive } => {
                let l = term_lits[term];
                if positive {
                    l
                } else {
                    l.negated()
                }
            }
        })));
    }
    for g in &goal.exactly_one {
        let terms: Vec<Vec<Literal>> = g.iter().map(|&t| vec![term_lits[t]]).collect();
        goal_clauses.extend(exactly_one(&terms, &mut next_var)?);
    }
    for c in &goal_clauses {
        b.clause(c)?;
    }

    let instance = CspInstance::new(b.variables, b.constraints, None)?;
    Ok(PlanningEncoding {
        instance,
        horizon,
        fluent_ids: problem.fluents.iter().map(|f| f.id).collect(),
        action_ids: problem.actions.iter().map(|a| a.id).collect(),
        fluent_vars,
        action_vars,
        term_lits,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanCheck {
    pub valid: bool,
    pub failure: Option<String>,
}

impl PlanCheck {
    fn fail(msg: String) -> Self {
        PlanCheck { valid: false, failure: Some(msg) }
    }
}

/// Simulates `actions_by_step` forward from the initial state.
///
/// Steps are numbered from 1. Actions within a step run in parallel and must
/// not interfere.
pub fn validate_plan(problem: &PlanningProblem, actions_by_step: &[BTreeSet<ActionId>]) -> Result<PlanCheck, PlanningError> {
    let mut steps = Vec::with_capacity(actions_by_step.len());
    for step in actions_by_step {
        let acts = step
            .iter()
            .map(|&id| problem.action(id).ok_or(PlanningError::UnknownAction(id)))
            .collect::<Result<Vec<_>, _>>()?;
        steps.push(acts);
    }
    let name = |f: FluentId| problem.fluent(f).map_or_else(|| f.to_string(), |x| x.name.clone());
    let mut state = problem.initial.clone();
    for (i, acts) in steps.iter().enumerate() {
        let t = i + 1;
        for (x, a) in acts.iter().enumerate() {
            if let Some(b) = acts[x + 1..].iter().find(|b| a.interferes_with(b)) {
                return Ok(PlanCheck::fail(format!("actions {} and {} interfere at step {t}", a.name, b.name)));
            }
        }
        for a in acts {
            if let Some(&p) = a.preconditions.iter().find(|p| !state.contains(p)) {
                return Ok(PlanCheck::fail(format!("precondition {} unmet at step {t}", name(p))));
            }
        }
        for a in acts {
            for f in &a.delete_effects {
                state.remove(f);
            }
        }
        for a in acts {
            state.extend(a.add_effects.iter().copied());
        }
    }
    if problem.goal.evaluate(&state) {
        Ok(PlanCheck { valid: true, failure: None })
    } else {
        Ok(PlanCheck::fail(format!("goal unsatisfied after step {}", steps.len())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub time: String,
    pub location: String,
}

impl Slot {
    pub fn new(time: impl Into<String>, location: impl Into<String>) -> Self {
        Slot { time: time.into(), location: location.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvailabilitySpec {
    pub people: Vec<String>,
    pub times: Vec<String>,
    pub locations: Vec<String>,
    pub availability: BTreeMap<String, Vec<Slot>>,
    pub meeting_pairs: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulingOptions {
    /// Also forbid one person being invited to two locations at the same time.
    pub per_person_exclusive: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SchedulingWarning {
    /// The pair shares no slot; the goal gets an empty clause.
    EmptyFeasibleSet { first: String, second: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledProblem {
    pub problem: PlanningProblem,
    /// Slots some person is available in, in time-major grid order.
    pub usable_slots: Vec<Slot>,
    /// Pairwise feasible sets, one per meeting pair.
    pub feasible: Vec<Vec<Slot>>,
    pub warnings: Vec<SchedulingWarning>,
}

pub fn generate_scheduling_problem(spec: &AvailabilitySpec) -> Result<ScheduledProblem, PlanningError> {
    generate_scheduling_problem_with(spec, SchedulingOptions::default())
}

pub fn generate_scheduling_problem_with(
    spec: &AvailabilitySpec,
    options: SchedulingOptions,
) -> Result<ScheduledProblem, PlanningError> {
    for (person, slots) in &spec.availability {
        for s in slots {
            if !spec.times.contains(&s.time) || !spec.locations.contains(&s.location) {
                return Err(PlanningError::SlotOutsideGrid {
                    person: person.clone(),
                    time: s.time.clone(),
                    location: s.location.clone(),
                });
            }
        }
    }
    for (p, q) in &spec.meeting_pairs {
        for x in [p, q] {
            if !spec.availability.contains_key(x) {
                return Err(PlanningError::UnknownPerson(x.clone()));
            }
        }
    }
    let avail = |p: &str| -> BTreeSet<&Slot> { spec.availability.get(p).into_iter().flatten().collect() };
    let all_available: BTreeSet<&Slot> = spec.availability.values().flatten().collect();
    let usable: Vec<Slot> = spec
        .times
        .iter()
        .flat_map(|t| spec.locations.iter().map(move |l| Slot::new(t.clone(), l.clone())))
        .filter(|s| all_available.contains(s))
        .collect();
    let mut people: Vec<String> = spec.people.clone();
    for p in spec.availability.keys() {
        if !people.contains(p) {
            people.push(p.clone());
        }
    }

    let slot_tag = |s: &Slot| format!("[{},{}]", s.time, s.location);
    let mut fluents = Vec::new();
    let mut x: HashMap<(&str, &Slot), FluentId> = HashMap::new();
    for p in &people {
        for s in &usable {
            let id = fluents.len() as FluentId;
            fluents.push(Fluent { id, name: format!("x[{p}]{}", slot_tag(s)) });
            x.insert((p.as_str(), s), id);
        }
    }
    let mut actions = Vec::new();
    for p in &people {
        let mine = avail(p);
        for s in usable.iter().filter(|s| mine.contains(s)) {
            actions.push(ActionSchema {
                id: actions.len() as ActionId,
                name: format!("invite[{p}]{}", slot_tag(s)),
                preconditions: BTreeSet::new(),
                add_effects: BTreeSet::from([x[&(p.as_str(), s)]]),
                delete_effects: BTreeSet::new(),
            });
        }
    }

    let mut goal = GoalFormula::default();
    let mut warnings = Vec::new();
    let mut feasible = Vec::new();
    let mut slot_terms: BTreeMap<&Slot, Vec<usize>> = BTreeMap::new();
    for (p, q) in &spec.meeting_pairs {
        let (ap, aq) = (avail(p), avail(q));
        let shared: Vec<Slot> = usable.iter().filter(|s| ap.contains(s) && aq.contains(s)).cloned().collect();
        if shared.is_empty() {
            warnings.push(SchedulingWarning::EmptyFeasibleSet { first: p.clone(), second: q.clone() });
            goal.clauses.push(Vec::new());
        } else {
            let mut group = Vec::new();
            for s in &shared {
                let idx = goal.terms.len();
                goal.terms.push(GoalTerm {
                    name: format!("M[{p},{q}]{}", slot_tag(s)),
                    literals: vec![FluentLiteral::pos(x[&(p.as_str(), s)]), FluentLiteral::pos(x[&(q.as_str(), s)])],
                });
                group.push(idx);
                let key = usable.iter().find(|u| *u == s).expect("shared slots are usable");
                slot_terms.entry(key).or_default().push(idx);
            }
            goal.exactly_one.push(group);
        }
        feasible.push(shared);
    }
    for terms in slot_terms.values() {
        for i in 0..terms.len() {
            for j in i + 1..terms.len() {
                goal.clauses.push(vec![
                    GoalAtom::Term { term: terms[i], positive: false },
                    GoalAtom::Term { term: terms[j], positive: false },
                ]);
            }
        }
    }
    if options.per_person_exclusive {
        for p in &people {
            let mine = avail(p);
            let slots: Vec<&Slot> = usable.iter().filter(|s| mine.contains(s)).collect();
            for i in 0..slots.len() {
                for j in i + 1..slots.len() {
                    if slots[i].time == slots[j].time {
                        goal.clauses.push(vec![
                            GoalAtom::Fluent { fluent: x[&(p.as_str(), slots[i])], positive: false },
                            GoalAtom::Fluent { fluent: x[&(p.as_str(), slots[j])], positive: false },
                        ]);
                    }
                }
            }
        }
    }

    let problem = PlanningProblem::new(fluents, actions, BTreeSet::new(), goal)?;
    Ok(ScheduledProblem { problem, usable_slots: usable, feasible, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csp::check_solution;
    use crate::solver::{solve_backtracking, solve_exhaustive, DEFAULT_NODE_BUDGET};
    use proptest::prelude::*;

    fn meeting_spec() -> AvailabilitySpec {
        serde_json::from_str(include_str!("../fixtures/planning/meeting.json")).unwrap()
    }

    fn single_fluent(initial: bool) -> PlanningProblem {
        PlanningProblem::new(
            vec![Fluent { id: 0, name: "f".into() }],
            vec![],
            if initial { BTreeSet::from([0]) } else { BTreeSet::new() },
            GoalFormula::all_of([0]),
        )
        .unwrap()
    }

    #[test]
    fn exactly_one_shapes() {
        let mut next = 10;
        let one = exactly_one(&[vec![Literal::positive(1)]], &mut next).unwrap();
        assert_eq!(one, vec![Clause::from_dimacs(&[1]).unwrap()]);
        let two = exactly_one(&[vec![Literal::positive(1)], vec![Literal::positive(2)]], &mut next).unwrap();
        assert_eq!(two, vec![Clause::from_dimacs(&[1, 2]).unwrap(), Clause::from_dimacs(&[-1, -2]).unwrap()]);
        let three: Vec<Vec<Literal>> = (1..=3).map(|v| vec![Literal::positive(v)]).collect();
        let c = exactly_one(&three, &mut next).unwrap();
        assert_eq!(c.len(), 1 + 3);
        assert_eq!(next, 10);
        assert_eq!(exactly_one(&[], &mut next), Err(PlanningError::EmptyExactlyOne));
    }

    #[test]
    fn exactly_one_conjunctive_terms_get_indicators() {
        let mut next = 5;
        let terms = vec![vec![Literal::positive(1), Literal::positive(2)], vec![Literal::positive(3)]];
        let clauses = exactly_one(&terms, &mut next).unwrap();
        assert_eq!(next, 6);
        // brute force over x1..x3 and the indicator x5
        for bits in 0u32..16 {
            let val = |v: u32| match v {
                1..=3 => bits >> (v - 1) & 1 == 1,
                5 => bits >> 3 & 1 == 1,
                _ => unreachable!(),
            };
            let sat = clauses.iter().all(|c| c.literals().iter().any(|l| val(l.variable()) == l.is_positive()));
            let count = usize::from(val(1) && val(2)) + usize::from(val(3));
            let consistent = val(5) == (val(1) && val(2));
            assert_eq!(sat, count == 1 && consistent, "bits {bits:04b}");
        }
    }

    #[test]
    fn frame_carries_initial_truth() {
        let enc = encode_planning_to_csp(&single_fluent(true), 1).unwrap();
        let sols = solve_exhaustive(&enc.instance).unwrap();
        assert_eq!(sols.len(), 1);
        assert_eq!(sols[0][&enc.fluent_var(0, 1).unwrap()], 1);
    }

    #[test]
    fn no_spontaneous_change() {
        let enc = encode_planning_to_csp(&single_fluent(false), 3).unwrap();
        assert!(solve_exhaustive(&enc.instance).unwrap().is_empty());
        assert_eq!(encode_planning_to_csp(&single_fluent(false), 0).unwrap_err(), PlanningError::HorizonZero);
    }

    #[test]
    fn problem_validation() {
        let f = vec![Fluent { id: 0, name: "f".into() }];
        let bad = ActionSchema {
            id: 0,
            name: "a".into(),
            preconditions: BTreeSet::new(),
            add_effects: BTreeSet::from([0]),
            delete_effects: BTreeSet::from([0]),
        };
        assert_eq!(
            PlanningProblem::new(f.clone(), vec![bad], BTreeSet::new(), GoalFormula::default()),
            Err(PlanningError::AddDeleteOverlap { action: 0, fluent: 0 })
        );
        assert_eq!(
            PlanningProblem::new(f.clone(), vec![], BTreeSet::from([3]), GoalFormula::default()),
            Err(PlanningError::UnknownFluent(3))
        );
        let goal = GoalFormula { exactly_one: vec![vec![]], ..GoalFormula::default() };
        assert_eq!(PlanningProblem::new(f, vec![], BTreeSet::new(), goal), Err(PlanningError::EmptyExactlyOne));
    }

    #[test]
    fn validate_plan_reports_first_failure() {
        let p = PlanningProblem::new(
            vec![Fluent { id: 0, name: "f".into() }, Fluent { id: 1, name: "g".into() }],
            vec![ActionSchema {
                id: 7,
                name: "a".into(),
                preconditions: BTreeSet::from([0]),
                add_effects: BTreeSet::from([1]),
                delete_effects: BTreeSet::new(),
            }],
            BTreeSet::new(),
            GoalFormula::all_of([1]),
        )
        .unwrap();
        let check = validate_plan(&p, &[BTreeSet::from([7])]).unwrap();
        assert!(!check.valid);
        assert_eq!(check.failure.as_deref(), Some("precondition f unmet at step 1"));
        assert_eq!(validate_plan(&p, &[BTreeSet::from([9])]), Err(PlanningError::UnknownAction(9)));
        assert!(validate_plan(&single_fluent(true), &[]).unwrap().valid);
    }

    #[test]
    fn meeting_generation_matches_record() {
        let sched = generate_scheduling_problem(&meeting_spec()).unwrap();
        assert!(sched.warnings.is_empty());
        assert_eq!(sched.usable_slots, vec![Slot::new("morning", "r"), Slot::new("afternoon", "t")]);
        assert_eq!(sched.feasible[0], vec![Slot::new("afternoon", "t")]);
        assert_eq!(sched.feasible[1], vec![Slot::new("morning", "r"), Slot::new("afternoon", "t")]);
        assert_eq!(sched.problem.actions().len(), 5);
        assert!(sched.problem.initial().is_empty());
    }

    #[test]
    fn meeting_golden_fixture() {
        let golden: PlanningProblem =
            serde_json::from_str(include_str!("../fixtures/planning/meeting_problem.json")).unwrap();
        assert_eq!(generate_scheduling_problem(&meeting_spec()).unwrap().problem, golden);
    }

    #[test]
    fn meeting_outcome_is_forced() {
        let sched = generate_scheduling_problem(&meeting_spec()).unwrap();
        let p = &sched.problem;
        let enc = encode_planning_to_csp(p, SCHEDULING_HORIZON).unwrap();
        let sols = solve_exhaustive(&enc.instance).unwrap();
        assert!(!sols.is_empty());
        let term = |name: &str| p.goal().terms.iter().position(|t| t.name == name).unwrap();
        let (ab, ac_m, ac_a) = (term("M[A,B][afternoon,t]"), term("M[A,C][morning,r]"), term("M[A,C][afternoon,t]"));
        for s in &sols {
            let v = |i| enc.term_value(s, i).unwrap();
            assert_eq!((v(ab), v(ac_m), v(ac_a)), (true, true, false));
            assert!(validate_plan(p, &enc.decode_plan(s)).unwrap().valid);
        }
    }

    #[test]
    fn disjoint_pair_is_flagged_and_unsat() {
        let spec = AvailabilitySpec {
            people: vec!["A".into(), "B".into()],
            times: vec!["morning".into(), "afternoon".into()],
            locations: vec!["r".into()],
            availability: BTreeMap::from([
                ("A".into(), vec![Slot::new("morning", "r")]),
                ("B".into(), vec![Slot::new("afternoon", "r")]),
            ]),
            meeting_pairs: vec![("A".into(), "B".into())],
        };
        let sched = generate_scheduling_problem(&spec).unwrap();
        assert_eq!(sched.warnings.len(), 1);
        let enc = encode_planning_to_csp(&sched.problem, 1).unwrap();
        assert!(solve_exhaustive(&enc.instance).unwrap().is_empty());
        assert!(!solve_backtracking(&enc.instance, DEFAULT_NODE_BUDGET).is_sat());
    }

    #[test]
    fn single_common_slot_is_eo_of_one() {
        let spec = AvailabilitySpec {
            people: vec!["A".into(), "B".into()],
            times: vec!["noon".into()],
            locations: vec!["r".into()],
            availability: BTreeMap::from([
                ("A".into(), vec![Slot::new("noon", "r")]),
                ("B".into(), vec![Slot::new("noon", "r")]),
            ]),
            meeting_pairs: vec![("A".into(), "B".into())],
        };
        let g = generate_scheduling_problem(&spec).unwrap().problem.goal().clone();
        assert_eq!(g.exactly_one, vec![vec![0]]);
        assert!(g.clauses.is_empty());
    }

    #[test]
    fn unknown_person_and_off_grid_slot() {
        let mut spec = meeting_spec();
        spec.meeting_pairs.push(("A".into(), "D".into()));
        assert_eq!(generate_scheduling_problem(&spec).unwrap_err(), PlanningError::UnknownPerson("D".into()));
        let mut spec = meeting_spec();
        spec.availability.get_mut("B").unwrap().push(Slot::new("evening", "r"));
        assert!(matches!(generate_scheduling_problem(&spec), Err(PlanningError::SlotOutsideGrid { .. })));
    }

    #[test]
    fn per_person_exclusivity_flag() {
        let spec = AvailabilitySpec {
            people: vec!["A".into()],
            times: vec!["morning".into()],
            locations: vec!["r".into(), "t".into()],
            availability: BTreeMap::from([("A".into(), vec![Slot::new("morning", "r"), Slot::new("morning", "t")])]),
            meeting_pairs: vec![],
        };
        let loose = generate_scheduling_problem(&spec).unwrap();
        assert!(loose.problem.goal().clauses.is_empty());
        let strict = generate_scheduling_problem_with(&spec, SchedulingOptions { per_person_exclusive: true }).unwrap();
        assert_eq!(strict.problem.goal().clauses.len(), 1);
    }

    fn all_plans(n_actions: usize, horizon: usize) -> Vec<Vec<BTreeSet<ActionId>>> {
        let subsets: Vec<BTreeSet<ActionId>> = (0u32..1 << n_actions)
            .map(|m| (0..n_actions as u32).filter(|i| m >> i & 1 == 1).collect())
            .collect();
        let mut plans = vec![Vec::new()];
        for _ in 0..horizon {
            plans = plans
                .into_iter()
                .flat_map(|p| {
                    subsets.iter().map(move |s| {
                        let mut q = p.clone();
                        q.push(s.clone());
                        q
                    })
                })
                .collect();
        }
        plans
    }

    prop_compose! {
        fn small_problem()(nf in 1usize..=4, na in 0usize..=3)
            (fl in Just(nf),
             acts in proptest::collection::vec((0u8..16, 0u8..16, 0u8..16), na),
             init in 0u8..16,
             clauses in proptest::collection::vec(proptest::collection::vec((0u8..4, any::<bool>()), 1..3), 0..3),
             eo in proptest::option::of(proptest::collection::vec(proptest::collection::vec((0u8..4, any::<bool>()), 1..3), 1..3)))
            -> PlanningProblem
        {
            let mask = |m: u8| -> BTreeSet<FluentId> { (0..fl as u32).filter(|i| m >> i & 1 == 1).collect() };
            let lit = |(f, p): (u8, bool)| FluentLiteral { fluent: u32::from(f) % fl as u32, positive: p };
            let actions = acts.into_iter().enumerate().map(|(i, (pre, add, del))| {
                let add = mask(add);
                let del: BTreeSet<_> = mask(del).difference(&add).copied().collect();
                ActionSchema { id: i as u32, name: format!("a{i}"), preconditions: mask(pre), add_effects: add, delete_effects: del }
            }).collect();
            let mut goal = GoalFormula {
                clauses: clauses.into_iter().map(|c| c.into_iter().map(|l| {
                    let l = lit(l);
                    GoalAtom::Fluent { fluent: l.fluent, positive: l.positive }
                }).collect()).collect(),
                ..GoalFormula::default()
            };
            if let Some(terms) = eo {
                for (i, t) in terms.into_iter().enumerate() {
                    goal.terms.push(GoalTerm { name: format!("m{i}"), literals: t.into_iter().map(lit).collect() });
                }
                goal.exactly_one.push((0..goal.terms.len()).collect());
            }
            let fluents = (0..fl as u32).map(|i| Fluent { id: i, name: format!("f{i}") }).collect();
            PlanningProblem::new(fluents, actions, mask(init), goal).unwrap()
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn encoder_matches_simulator(p in small_problem(), horizon in 1usize..=3) {
            let enc = encode_planning_to_csp(&p, horizon).unwrap();
            let res = solve_backtracking(&enc.instance, DEFAULT_NODE_BUDGET);
            let brute = all_plans(p.actions().len(), horizon)
                .iter()
                .any(|plan| validate_plan(&p, plan).unwrap().valid);
            prop_assert_eq!(res.is_sat(), brute);
            if let Some(sol) = &res.assignment {
                prop_assert!(check_solution(&enc.instance, sol).unwrap().satisfied);
                prop_assert!(validate_plan(&p, &enc.decode_plan(sol)).unwrap().valid);
            }
        }

        #[test]
        fn solutions_respect_frame_and_eo(p in small_problem(), horizon in 1usize..=2) {
            let enc = encode_planning_to_csp(&p, horizon).unwrap();
            prop_assume!(enc.instance.num_variables() <= 20);
            for sol in solve_exhaustive(&enc.instance).unwrap() {
                for t in 1..=horizon {
                    let before = enc.decode_state(&sol, t - 1);
                    let after = enc.decode_state(&sol, t);
                    let fired = &enc.decode_plan(&sol)[t - 1];
                    for f in before.symmetric_difference(&after) {
                        let explained = fired.iter().any(|&a| {
                            let a = p.action(a).unwrap();
                            if after.contains(f) { a.add_effects.contains(f) } else { a.delete_effects.contains(f) }
                        });
                        prop_assert!(explained, "fluent {} changed at step {} without cause", f, t);
                    }
                }
                let last = enc.decode_state(&sol, horizon);
                for g in &p.goal().exactly_one {
                    let on = g.iter().filter(|&&i| enc.term_value(&sol, i).unwrap()).count();
                    prop_assert_eq!(on, 1);
                    prop_assert_eq!(g.iter().filter(|&&i| p.goal().term_holds(i, &last)).count(), 1);
                }
            }
        }
    }
}
