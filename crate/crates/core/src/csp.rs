//! Finite-domain CSPs with extensionally stored relations, and the primal
//! (constraint) graph they induce.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnf::{ClauseStatus, ClauseStatusReport, CnfFormula};

pub type VarId = u32;
pub type Value = i64;
pub type CspAssignment = BTreeMap<VarId, Value>;

/// Largest relation arity materialized by default.
pub const DEFAULT_ARITY_CAP: usize = 12;

pub const BOOLEAN_DOMAIN: [Value; 2] = [0, 1];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CspError {
    #[error("variable {0} has an empty domain")]
    EmptyDomain(VarId),
    #[error("variable {0} has repeated domain values")]
    DuplicateDomainValue(VarId),
    #[error("variable id {0} declared twice")]
    DuplicateVariable(VarId),
    #[error("unknown variable {0}")]
    UnknownVariable(VarId),
    #[error("constraint scope repeats variable {0}")]
    DuplicateScopeVariable(VarId),
    #[error("tuple of length {found} does not match scope of arity {expected}")]
    TupleArity { expected: usize, found: usize },
    #[error("value {value} is outside the domain of variable {variable}")]
    ValueOutsideDomain { variable: VarId, value: Value },
    #[error("relation arity {arity} exceeds the cap of {cap}")]
    ArityCap { arity: usize, cap: usize },
    #[error("assignment is missing variables {0:?}")]
    Incomplete(Vec<VarId>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CspVariable {
    pub id: VarId,
    pub name: String,
    pub domain: Vec<Value>,
}

impl CspVariable {
    pub fn boolean(id: VarId, name: impl Into<String>) -> Self {
        CspVariable { id, name: name.into(), domain: BOOLEAN_DOMAIN.to_vec() }
    }
}

/// A k-ary constraint: the set of value tuples allowed on `scope`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConstraintRelation {
    scope: Vec<VarId>,
    allowed_tuples: BTreeSet<Vec<Value>>,
}

impl ConstraintRelation {
    pub fn new(scope: Vec<VarId>, allowed_tuples: BTreeSet<Vec<Value>>) -> Result<Self, CspError> {
        let mut seen = BTreeSet::new();
        for &v in &scope {
            if !seen.insert(v) {
                return Err(CspError::DuplicateScopeVariable(v));
            }
        }
        if let Some(t) = allowed_tuples.iter().find(|t| t.len() != scope.len()) {
            return Err(CspError::TupleArity { expected: scope.len(), found: t.len() });
        }
        Ok(ConstraintRelation { scope, allowed_tuples })
    }

    /// Materializes every tuple of the domains' product accepted by `keep`.
    pub fn from_predicate(
        scope: Vec<VarId>,
        domains: &[&[Value]],
        cap: usize,
        mut keep: impl FnMut(&[Value]) -> bool,
    ) -> Result<Self, CspError> {
        assert_eq!(scope.len(), domains.len());
        if scope.len() > cap {
            return Err(CspError::ArityCap { arity: scope.len(), cap });
        }
        let mut allowed = BTreeSet::new();
        let mut digits = vec![0usize; scope.len()];
        let mut tuple: Vec<Value> = Vec::with_capacity(scope.len());
        if domains.iter().any(|d| d.is_empty()) {
            return ConstraintRelation::new(scope, allowed);
        }
        loop {
            tuple.clear();
            tuple.extend(digits.iter().zip(domains).map(|(&i, d)| d[i]));
            if keep(&tuple) {
                allowed.insert(tuple.clone());
            }
            // odometer, last position fastest
            let mut pos = digits.len();
            loop {
                if pos == 0 {
                    return ConstraintRelation::new(scope, allowed);
                }
                pos -= 1;
                digits[pos] += 1;
                if digits[pos] < domains[pos].len() {
                    break;
                }
                digits[pos] = 0;
            }
        }
    }

    pub fn scope(&self) -> &[VarId] {
        &self.scope
    }

    pub fn arity(&self) -> usize {
        self.scope.len()
    }

    pub fn allowed_tuples(&self) -> &BTreeSet<Vec<Value>> {
        &self.allowed_tuples
    }

    pub fn allows(&self, tuple: &[Value]) -> bool {
        self.allowed_tuples.contains(tuple)
    }

    /// Projection of `assignment` onto the scope, `None` if any scope
    /// variable is unassigned.
    pub fn project(&self, assignment: &CspAssignment) -> Option<Vec<Value>> {
        self.scope.iter().map(|v| assignment.get(v).copied()).collect()
    }

    pub fn is_satisfied_by(&self, assignment: &CspAssignment) -> Option<bool> {
        self.project(assignment).map(|t| self.allows(&t))
    }

    /// Allowed tuples agreeing with every assigned scope position.
    pub fn consistent_tuples<'a>(&'a self, assignment: &'a CspAssignment) -> impl Iterator<Item = &'a Vec<Value>> + 'a {
        self.allowed_tuples.iter().filter(move |t| {
            self.scope
                .iter()
                .zip(t.iter())
                .all(|(v, val)| assignment.get(v).is_none_or(|a| a == val))
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawCspInstance {
    variables: Vec<CspVariable>,
    constraints: Vec<ConstraintRelation>,
    #[serde(default)]
    initial_assignment: Option<CspAssignment>,
}

/// ⟨X, D, C⟩ with an optional initial (partial) assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawCspInstance", into = "RawCspInstance")]
pub struct CspInstance {
    variables: Vec<CspVariable>,
    constraints: Vec<ConstraintRelation>,
    initial_assignment: Option<CspAssignment>,
    index: HashMap<VarId, usize>,
}

impl PartialEq for CspInstance {
    fn eq(&self, other: &Self) -> bool {
        self.variables == other.variables
            && self.constraints == other.constraints
            && self.initial_assignment == other.initial_assignment
    }
}

impl TryFrom<RawCspInstance> for CspInstance {
    type Error = CspError;

    fn try_from(raw: RawCspInstance) -> Result<Self, Self::Error> {
        CspInstance::new(raw.variables, raw.constraints, raw.initial_assignment)
    }
}

impl From<CspInstance> for RawCspInstance {
    fn from(inst: CspInstance) -> Self {
        RawCspInstance {
            variables: inst.variables,
            constraints: inst.constraints,
            initial_assignment: inst.initial_assignment,
        }
    }
}

impl CspInstance {
    pub fn new(
        variables: Vec<CspVariable>,
        constraints: Vec<ConstraintRelation>,
        initial_assignment: Option<CspAssignment>,
    ) -> Result<Self, CspError> {
        let mut index = HashMap::with_capacity(variables.len());
        for (pos, var) in variables.iter().enumerate() {
            if var.domain.is_empty() {
                return Err(CspError::EmptyDomain(var.id));
            }
            let distinct: BTreeSet<_> = var.domain.iter().collect();
            if distinct.len() != var.domain.len() {
                return Err(CspError::DuplicateDomainValue(var.id));
            }
            if index.insert(var.id, pos).is_some() {
                return Err(CspError::DuplicateVariable(var.id));
            }
        }
        let inst = CspInstance { variables, constraints, initial_assignment, index };
        for c in &inst.constraints {
            for &v in c.scope() {
                inst.position(v).ok_or(CspError::UnknownVariable(v))?;
            }
            for tuple in c.allowed_tuples() {
                for (&v, value) in c.scope().iter().zip(tuple) {
                    inst.check_value(v, *value)?;
                }
            }
        }
        if let Some(init) = &inst.initial_assignment {
            for (&v, &value) in init {
                inst.check_value(v, value)?;
            }
        }
        Ok(inst)
    }

    pub fn empty() -> Self {
        CspInstance::new(Vec::new(), Vec::new(), None).expect("empty instance is valid")
    }

    pub fn variables(&self) -> &[CspVariable] {
        &self.variables
    }

    pub fn constraints(&self) -> &[ConstraintRelation] {
        &self.constraints
    }

    pub fn initial_assignment(&self) -> Option<&CspAssignment> {
        self.initial_assignment.as_ref()
    }

    pub fn num_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn position(&self, id: VarId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn variable(&self, id: VarId) -> Option<&CspVariable> {
        self.position(id).map(|p| &self.variables[p])
    }

    pub fn variable_ids(&self) -> impl Iterator<Item = VarId> + '_ {
        self.variables.iter().map(|v| v.id)
    }

    pub fn is_boolean(&self) -> bool {
        self.variables.iter().all(|v| v.domain == BOOLEAN_DOMAIN)
    }

    pub fn check_value(&self, id: VarId, value: Value) -> Result<(), CspError> {
        let var = self.variable(id).ok_or(CspError::UnknownVariable(id))?;
        if var.domain.contains(&value) {
            Ok(())
        } else {
            Err(CspError::ValueOutsideDomain { variable: id, value })
        }
    }

    /// Per-constraint status under a partial assignment: satisfied when every
    /// completion is allowed, violated when none is.
    pub fn constraint_status(&self, assignment: &CspAssignment) -> ClauseStatusReport {
        let mut report = ClauseStatusReport::default();
        for (index, c) in self.constraints.iter().enumerate() {
            report.push(index, self.status_of(c, assignment));
        }
        report
    }

    fn status_of(&self, c: &ConstraintRelation, assignment: &CspAssignment) -> ClauseStatus {
        if let Some(tuple) = c.project(assignment) {
            return if c.allows(&tuple) { ClauseStatus::Satisfied } else { ClauseStatus::Violated };
        }
        let completions: u128 = c
            .scope()
            .iter()
            .filter(|v| !assignment.contains_key(v))
            .map(|&v| self.variable(v).map_or(1, |var| var.domain.len() as u128))
            .product();
        let consistent = c.consistent_tuples(assignment).count() as u128;
        if consistent == 0 {
            ClauseStatus::Violated
        } else if consistent == completions {
            ClauseStatus::Satisfied
        } else {
            ClauseStatus::Undetermined
        }
    }
}

/// One Boolean variable per SAT variable (same 1-based id, initialized to 0)
/// and one relation per clause holding exactly its satisfying local tuples.
pub fn cnf_to_csp(formula: &CnfFormula) -> Result<CspInstance, CspError> {
    cnf_to_csp_with_cap(formula, DEFAULT_ARITY_CAP)
}

pub fn cnf_to_csp_with_cap(formula: &CnfFormula, cap: usize) -> Result<CspInstance, CspError> {
    let variables: Vec<CspVariable> = (1..=formula.num_variables())
        .map(|v| CspVariable::boolean(v, format!("x{v}")))
        .collect();
    let mut constraints = Vec::with_capacity(formula.num_clauses());
    for clause in formula.clauses() {
        let scope = clause.variables();
        let domains = vec![&BOOLEAN_DOMAIN[..]; scope.len()];
        let relation = ConstraintRelation::from_predicate(scope.clone(), &domains, cap, |tuple| {
            clause.literals().iter().any(|lit| {
                let pos = scope.iter().position(|&v| v == lit.variable()).expect("literal in scope");
                (tuple[pos] == 1) == lit.is_positive()
            })
        })?;
        constraints.push(relation);
    }
    let initial = variables.iter().map(|v| (v.id, 0)).collect();
    CspInstance::new(variables, constraints, Some(initial))
}

/// Simple undirected graph over variable ids. Edges are stored once as
/// sorted pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PrimalGraph {
    vertices: Vec<VarId>,
    edges: BTreeSet<(VarId, VarId)>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("self-loop on vertex {0}")]
    SelfLoop(VarId),
    #[error("edge endpoint {0} is not a vertex")]
    UnknownVertex(VarId),
}

impl PrimalGraph {
    pub fn new(vertices: impl IntoIterator<Item = VarId>, edges: impl IntoIterator<Item = (VarId, VarId)>) -> Result<Self, GraphError> {
        let vertices: BTreeSet<VarId> = vertices.into_iter().collect();
        let mut canon = BTreeSet::new();
        for (a, b) in edges {
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            for v in [a, b] {
                if !vertices.contains(&v) {
                    return Err(GraphError::UnknownVertex(v));
                }
            }
            canon.insert((a.min(b), a.max(b)));
        }
        Ok(PrimalGraph { vertices: vertices.into_iter().collect(), edges: canon })
    }

    pub fn vertices(&self) -> &[VarId] {
        &self.vertices
    }

    pub fn edges(&self) -> &BTreeSet<(VarId, VarId)> {
        &self.edges
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, a: VarId, b: VarId) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    /// Dense index of each vertex, in ascending id order.
    pub fn dense_index(&self) -> HashMap<VarId, usize> {
        self.vertices.iter().enumerate().map(|(i, &v)| (v, i)).collect()
    }

    /// Adjacency lists over dense indices.
    pub fn adjacency(&self) -> Vec<BTreeSet<usize>> {
        let idx = self.dense_index();
        let mut adj = vec![BTreeSet::new(); self.vertices.len()];
        for &(a, b) in &self.edges {
            let (ia, ib) = (idx[&a], idx[&b]);
            adj[ia].insert(ib);
            adj[ib].insert(ia);
        }
        adj
    }

    pub fn neighbors(&self, v: VarId) -> BTreeSet<VarId> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| if a == v { Some(b) } else if b == v { Some(a) } else { None })
            .collect()
    }
}

/// Vertices are all variables; every constraint scope becomes a clique.
pub fn primal_graph(instance: &CspInstance) -> PrimalGraph {
    let mut edges = BTreeSet::new();
    for c in instance.constraints() {
        let scope = c.scope();
        for (i, &a) in scope.iter().enumerate() {
            for &b in &scope[i + 1..] {
                edges.insert((a.min(b), a.max(b)));
            }
        }
    }
    PrimalGraph::new(instance.variable_ids(), edges).expect("scopes reference declared variables without repeats")
}

/// The sub-instance over `subset`: constraints whose scope lies in
/// `subset ∪ dom(boundary)` and touches `subset`, with boundary values
/// substituted out. Boundary variables are removed from the result.
pub fn restrict(instance: &CspInstance, subset: &BTreeSet<VarId>, boundary: &CspAssignment) -> Result<CspInstance, CspError> {
    for &v in subset {
        instance.position(v).ok_or(CspError::UnknownVariable(v))?;
    }
    for (&v, &value) in boundary {
        instance.check_value(v, value)?;
    }
    let variables: Vec<CspVariable> = instance
        .variables()
        .iter()
        .filter(|v| subset.contains(&v.id) && !boundary.contains_key(&v.id))
        .cloned()
        .collect();
    let mut constraints = Vec::new();
    for c in instance.constraints() {
        let inside = c.scope().iter().all(|v| subset.contains(v) || boundary.contains_key(v));
        let touches = c.scope().is_empty() || c.scope().iter().any(|v| subset.contains(v));
        if !(inside && touches) {
            continue;
        }
        let keep: Vec<usize> = (0..c.arity()).filter(|&i| !boundary.contains_key(&c.scope()[i])).collect();
        let scope: Vec<VarId> = keep.iter().map(|&i| c.scope()[i]).collect();
        let allowed = c
            .consistent_tuples(boundary)
            .map(|t| keep.iter().map(|&i| t[i]).collect())
            .collect();
        constraints.push(ConstraintRelation::new(scope, allowed)?);
    }
    let initial = instance.initial_assignment().map(|init| {
        init.iter()
            .filter(|(v, _)| subset.contains(v) && !boundary.contains_key(v))
            .map(|(&v, &x)| (v, x))
            .collect()
    });
    CspInstance::new(variables, constraints, initial)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolutionCheck {
    pub satisfied: bool,
    pub violated: Vec<usize>,
}

pub fn check_solution(instance: &CspInstance, assignment: &CspAssignment) -> Result<SolutionCheck, CspError> {
    let missing: Vec<VarId> = instance.variable_ids().filter(|v| !assignment.contains_key(v)).collect();
    if !missing.is_empty() {
        return Err(CspError::Incomplete(missing));
    }
    let violated: Vec<usize> = instance
        .constraints()
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.is_satisfied_by(assignment).expect("assignment is complete"))
        .map(|(i, _)| i)
        .collect();
    Ok(SolutionCheck { satisfied: violated.is_empty(), violated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnf::{parse_dimacs, Clause};

    fn tuples(ts: &[&[Value]]) -> BTreeSet<Vec<Value>> {
        ts.iter().map(|t| t.to_vec()).collect()
    }

    fn bools(ids: &[VarId]) -> Vec<CspVariable> {
        ids.iter().map(|&i| CspVariable::boolean(i, format!("v{i}"))).collect()
    }

    #[test]
    fn clause_relations() {
        let f = parse_dimacs("p cnf 3 3\n1 -2 0\n1 0\n1 2 3 0\n").unwrap();
        let csp = cnf_to_csp(&f).unwrap();
        let c0 = &csp.constraints()[0];
        assert_eq!(c0.scope(), &[1, 2]);
        assert_eq!(c0.allowed_tuples(), &tuples(&[&[0, 0], &[1, 0], &[1, 1]]));
        assert_eq!(csp.constraints()[1].allowed_tuples(), &tuples(&[&[1]]));
        assert_eq!(csp.constraints()[2].allowed_tuples().len(), 7);
        assert_eq!(csp.initial_assignment().unwrap().values().copied().collect::<Vec<_>>(), vec![0, 0, 0]);
        assert!(csp.is_boolean());
    }

    #[test]
    fn tautology_and_empty_clause_relations() {
        let f = CnfFormula::new(2, vec![Clause::from_dimacs(&[1, -1, 2]).unwrap(), Clause::new([])]).unwrap();
        let csp = cnf_to_csp(&f).unwrap();
        assert_eq!(csp.constraints()[0].allowed_tuples().len(), 4);
        assert_eq!(csp.constraints()[1].arity(), 0);
        assert!(csp.constraints()[1].allowed_tuples().is_empty());
    }

    #[test]
    fn arity_cap_fails_loudly() {
        let lits: Vec<i64> = (1..=13).collect();
        let f = CnfFormula::new(13, vec![Clause::from_dimacs(&lits).unwrap()]).unwrap();
        assert_eq!(cnf_to_csp(&f).unwrap_err(), CspError::ArityCap { arity: 13, cap: 12 });
        assert!(cnf_to_csp_with_cap(&f, 13).is_ok());
    }

    #[test]
    fn primal_graph_examples() {
        let rel = |scope: Vec<VarId>| ConstraintRelation::new(scope, BTreeSet::new()).unwrap();
        let inst = CspInstance::new(bools(&[0, 1, 2]), vec![rel(vec![0, 1, 2])], None).unwrap();
        let g = primal_graph(&inst);
        assert_eq!(g.edges().iter().copied().collect::<Vec<_>>(), vec![(0, 1), (0, 2), (1, 2)]);

        let inst = CspInstance::new(bools(&[0, 1, 2]), vec![rel(vec![1, 0]), rel(vec![1, 2])], None).unwrap();
        let g = primal_graph(&inst);
        assert_eq!(g.edges().iter().copied().collect::<Vec<_>>(), vec![(0, 1), (1, 2)]);
        assert!(!g.has_edge(0, 2));

        let inst = CspInstance::new(bools(&[7]), vec![rel(vec![7])], None).unwrap();
        let g = primal_graph(&inst);
        assert_eq!(g.vertices(), &[7]);
        assert_eq!(g.num_edges(), 0);
    }

    #[test]
    fn graph_rejects_self_loops() {
        assert_eq!(PrimalGraph::new([1, 2], [(1, 1)]), Err(GraphError::SelfLoop(1)));
        assert_eq!(PrimalGraph::new([1, 2], [(1, 3)]), Err(GraphError::UnknownVertex(3)));
        let g = PrimalGraph::new([1, 2], [(2, 1), (1, 2)]).unwrap();
        assert_eq!(g.num_edges(), 1);
    }

    #[test]
    fn restrict_examples() {
        let eq = tuples(&[&[0, 0], &[1, 1]]);
        let inst = CspInstance::new(
            bools(&[0, 1, 2]),
            vec![
                ConstraintRelation::new(vec![0, 1], eq.clone()).unwrap(),
                ConstraintRelation::new(vec![1, 2], eq.clone()).unwrap(),
            ],
            None,
        )
        .unwrap();
        let sub = restrict(&inst, &BTreeSet::from([0, 1]), &CspAssignment::new()).unwrap();
        assert_eq!(sub.constraints().len(), 1);
        assert_eq!(sub.constraints()[0].scope(), &[0, 1]);

        let boundary = CspAssignment::from([(0, 1)]);
        let sub = restrict(&inst, &BTreeSet::from([1]), &boundary).unwrap();
        assert_eq!(sub.constraints().len(), 1);
        assert_eq!(sub.constraints()[0].scope(), &[1]);
        assert_eq!(sub.constraints()[0].allowed_tuples(), &tuples(&[&[1]]));

        let bad = CspAssignment::from([(0, 2)]);
        assert_eq!(
            restrict(&inst, &BTreeSet::from([1]), &bad).unwrap_err(),
            CspError::ValueOutsideDomain { variable: 0, value: 2 }
        );
    }

    #[test]
    fn check_solution_examples() {
        let f = parse_dimacs("p cnf 1 1\n1 0\n").unwrap();
        let csp = cnf_to_csp(&f).unwrap();
        let check = check_solution(&csp, &CspAssignment::from([(1, 0)])).unwrap();
        assert!(!check.satisfied);
        assert_eq!(check.violated, vec![0]);
        assert!(check_solution(&CspInstance::empty(), &CspAssignment::new()).unwrap().satisfied);
        assert_eq!(check_solution(&csp, &CspAssignment::new()).unwrap_err(), CspError::Incomplete(vec![1]));
    }

    #[test]
    fn constraint_status_matches_clause_semantics() {
        let f = parse_dimacs("p cnf 3 3\n1 -2 0\n2 3 0\n-1 0\n").unwrap();
        let csp = cnf_to_csp(&f).unwrap();
        let a = CspAssignment::from([(1, 1)]);
        let report = csp.constraint_status(&a);
        assert_eq!(report.satisfied, vec![0]);
        assert_eq!(report.undetermined, vec![1]);
        assert_eq!(report.violated, vec![2]);
    }

    #[test]
    fn validation_errors() {
        let rel = ConstraintRelation::new(vec![0], tuples(&[&[5]])).unwrap();
        assert_eq!(
            CspInstance::new(bools(&[0]), vec![rel], None).unwrap_err(),
            CspError::ValueOutsideDomain { variable: 0, value: 5 }
        );
        assert_eq!(ConstraintRelation::new(vec![0, 0], BTreeSet::new()).unwrap_err(), CspError::DuplicateScopeVariable(0));
        assert!(matches!(ConstraintRelation::new(vec![0, 1], tuples(&[&[0]])), Err(CspError::TupleArity { .. })));
        let empty = CspVariable { id: 3, name: "e".into(), domain: vec![] };
        assert_eq!(CspInstance::new(vec![empty], vec![], None).unwrap_err(), CspError::EmptyDomain(3));
    }

    #[test]
    fn json_roundtrip() {
        let f = parse_dimacs("p cnf 2 1\n1 -2 0\n").unwrap();
        let csp = cnf_to_csp(&f).unwrap();
        let json = serde_json::to_string(&csp).unwrap();
        assert!(json.contains("\"allowed_tuples\":[[0,0],[1,0],[1,1]]"));
        let back: CspInstance = serde_json::from_str(&json).unwrap();
        assert_eq!(back, csp);
        assert_eq!(back.position(2), Some(1));
        let broken = json.replace("\"scope\":[1,2]", "\"scope\":[1,9]");
        assert!(serde_json::from_str::<CspInstance>(&broken).is_err());
    }
}
