//! Deterministic CSP solving: forward-checking backtracking, an exhaustive
//! enumerator used as an oracle, and bag-restricted solving over a tree
//! decomposition.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csp::{check_solution, restrict, CspAssignment, CspError, CspInstance, Value, VarId};
use crate::treedecomp::{traversal_order, Bag, TreeDecomposition};

pub const DEFAULT_NODE_BUDGET: u64 = 1_000_000;

/// Largest Cartesian product [`solve_exhaustive`] will enumerate.
pub const EXHAUSTIVE_CAP: u128 = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Sat,
    Unsat,
    BudgetExhausted,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveStats {
    pub nodes: u64,
    pub backtracks: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub assignment: Option<CspAssignment>,
    pub stats: SolveStats,
}

impl SolveResult {
    pub fn is_sat(&self) -> bool {
        self.status == SolveStatus::Sat
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SolverError {
    #[error("search space of {size} assignments exceeds the exhaustive cap of {cap}")]
    SearchSpaceCap { size: u128, cap: u128 },
    #[error("boundary variable {0} is not in the bag")]
    BoundaryOutsideBag(VarId),
    #[error(transparent)]
    Csp(#[from] CspError),
}

/// Instance compiled to dense indices: variables sorted by id, relation
/// tuples as value indices.
struct Compiled {
    ids: Vec<VarId>,
    domains: Vec<Vec<Value>>,
    scopes: Vec<Vec<usize>>,
    allowed: Vec<HashSet<Vec<usize>>>,
    by_var: Vec<Vec<usize>>,
}

impl Compiled {
    fn new(instance: &CspInstance) -> Self {
        let mut vars: Vec<_> = instance.variables().iter().collect();
        vars.sort_by_key(|v| v.id);
        let ids: Vec<VarId> = vars.iter().map(|v| v.id).collect();
        let domains: Vec<Vec<Value>> = vars.iter().map(|v| v.domain.clone()).collect();
        let pos = |id: VarId| ids.binary_search(&id).expect("scope ids are declared");
        let mut scopes = Vec::new();
        let mut allowed = Vec::new();
        let mut by_var = vec![Vec::new(); ids.len()];
        for (ci, c) in instance.constraints().iter().enumerate() {
            let scope: Vec<usize> = c.scope().iter().map(|&v| pos(v)).collect();
            for &p in &scope {
                by_var[p].push(ci);
            }
            let tuples = c
                .allowed_tuples()
                .iter()
                .map(|t| {
                    t.iter()
                        .zip(&scope)
                        .map(|(val, &p)| domains[p].iter().position(|d| d == val).expect("tuple values lie in domains"))
                        .collect()
                })
                .collect();
            scopes.push(scope);
            allowed.push(tuples);
        }
        Compiled { ids, domains, scopes, allowed, by_var }
    }

    fn to_assignment(&self, values: &[Option<usize>]) -> CspAssignment {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| (self.ids[i], self.domains[i][v.expect("complete")]))
            .collect()
    }
}

struct Backtracker<'a> {
    c: &'a Compiled,
    live: Vec<Vec<bool>>,
    values: Vec<Option<usize>>,
    trail: Vec<(usize, usize)>,
    stats: SolveStats,
    budget: u64,
}

enum Outcome {
    Found,
    Exhausted,
    Failed,
}

impl Backtracker<'_> {
    fn live_count(&self, v: usize) -> usize {
        self.live[v].iter().filter(|&&b| b).count()
    }

    fn pick(&self) -> Option<usize> {
        (0..self.values.len())
            .filter(|&v| self.values[v].is_none())
            .min_by_key(|&v| (self.live_count(v), v))
    }

    fn prune(&mut self, v: usize, value: usize) {
        if self.live[v][value] {
            self.live[v][value] = false;
            self.trail.push((v, value));
        }
    }

    fn undo(&mut self, mark: usize) {
        while self.trail.len() > mark {
            let (v, value) = self.trail.pop().expect("trail above mark");
            self.live[v][value] = true;
        }
    }

    /// Checks constraints on `var`; prunes the last free variable of any
    /// constraint left with exactly one.
    fn forward_check(&mut self, var: usize) -> bool {
        for &ci in &self.c.by_var[var] {
            let scope = &self.c.scopes[ci];
            let free: Vec<usize> = (0..scope.len()).filter(|&k| self.values[scope[k]].is_none()).collect();
            match free.len() {
                0 => {
                    let tuple: Vec<usize> = scope.iter().map(|&p| self.values[p].expect("assigned")).collect();
                    if !self.c.allowed[ci].contains(&tuple) {
                        return false;
                    }
                }
                1 => {
                    let k = free[0];
                    let target = scope[k];
                    let mut tuple: Vec<usize> = scope.iter().map(|&p| self.values[p].unwrap_or(0)).collect();
                    for value in 0..self.c.domains[target].len() {
                        if !self.live[target][value] {
                            continue;
                        }
                        tuple[k] = value;
                        if !self.c.allowed[ci].contains(&tuple) {
                            self.prune(target, value);
                        }
                    }
                    if self.live_count(target) == 0 {
                        return false;
                    }
                }
                _ => {}
            }
        }
        true
    }

    fn search(&mut self) -> Outcome {
        let Some(var) = self.pick() else {
            return Outcome::Found;
        };
        for value in 0..self.c.domains[var].len() {
            if !self.live[var][value] {
                continue;
            }
            if self.stats.nodes >= self.budget {
                return Outcome::Exhausted;
            }
            self.stats.nodes += 1;
            let mark = self.trail.len();
            self.values[var] = Some(value);
            if self.forward_check(var) {
                match self.search() {
                    Outcome::Failed => {}
                    other => return other,
                }
            }
            self.values[var] = None;
            self.undo(mark);
            self.stats.backtracks += 1;
        }
        Outcome::Failed
    }
}

/// Depth-first search with forward checking. Variable order is smallest
/// remaining domain first (lowest id on ties), values in domain order.
pub fn solve_backtracking(instance: &CspInstance, node_budget: u64) -> SolveResult {
    let c = Compiled::new(instance);
    let n = c.ids.len();
    let mut bt = Backtracker {
        c: &c,
        live: c.domains.iter().map(|d| vec![true; d.len()]).collect(),
        values: vec![None; n],
        trail: Vec::new(),
        stats: SolveStats::default(),
        budget: node_budget,
    };
    let unsat = |stats| SolveResult { status: SolveStatus::Unsat, assignment: None, stats };
    // nullary and unary constraints up front
    for (ci, scope) in c.scopes.iter().enumerate() {
        match scope.len() {
            0 if c.allowed[ci].is_empty() => return unsat(bt.stats),
            1 => {
                let v = scope[0];
                for value in 0..c.domains[v].len() {
                    if !c.allowed[ci].contains(&vec![value]) {
                        bt.live[v][value] = false;
                    }
                }
                if bt.live_count(v) == 0 {
                    return unsat(bt.stats);
                }
            }
            _ => {}
        }
    }
    match bt.search() {
        Outcome::Found => {
            let assignment = c.to_assignment(&bt.values);
            let check = check_solution(instance, &assignment).expect("assignment covers every variable");
            assert!(check.satisfied, "backtracking returned a non-solution: {:?}", check.violated);
            SolveResult { status: SolveStatus::Sat, assignment: Some(assignment), stats: bt.stats }
        }
        Outcome::Failed => unsat(bt.stats),
        Outcome::Exhausted => SolveResult { status: SolveStatus::BudgetExhausted, assignment: None, stats: bt.stats },
    }
}

/// All solutions in lexicographic order (variables by ascending id, values
/// in domain order). Constraints are tested as soon as their scope is
/// fully assigned, which prunes without skipping any solution.
pub fn solve_exhaustive(instance: &CspInstance) -> Result<Vec<CspAssignment>, SolverError> {
    let size = instance
        .variables()
        .iter()
        .try_fold(1u128, |acc, v| acc.checked_mul(v.domain.len() as u128))
        .unwrap_or(u128::MAX);
    if size > EXHAUSTIVE_CAP {
        return Err(SolverError::SearchSpaceCap { size, cap: EXHAUSTIVE_CAP });
    }
    let c = Compiled::new(instance);
    let n = c.ids.len();
    // constraints checked at the depth of their last scope variable
    let mut due: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
    for (ci, scope) in c.scopes.iter().enumerate() {
        let depth = scope.iter().map(|&p| p + 1).max().unwrap_or(0);
        due[depth].push(ci);
    }
    let mut solutions = Vec::new();
    let mut values: Vec<Option<usize>> = vec![None; n];
    if due[0].iter().all(|&ci| !c.allowed[ci].is_empty()) {
        enumerate(&c, &due, 0, &mut values, &mut solutions);
    }
    Ok(solutions)
}

fn enumerate(c: &Compiled, due: &[Vec<usize>], depth: usize, values: &mut Vec<Option<usize>>, out: &mut Vec<CspAssignment>) {
    if depth == values.len() {
        out.push(c.to_assignment(values));
        return;
    }
    for value in 0..c.domains[depth].len() {
        values[depth] = Some(value);
        let ok = due[depth + 1].iter().all(|&ci| {
            let tuple: Vec<usize> = c.scopes[ci].iter().map(|&p| values[p].expect("earlier")).collect();
            c.allowed[ci].contains(&tuple)
        });
        if ok {
            enumerate(c, due, depth + 1, values, out);
        }
    }
    values[depth] = None;
}

/// Solves the bag's sub-instance with `boundary` pinned. The returned
/// assignment covers exactly the bag's vertices.
pub fn solve_bag(instance: &CspInstance, bag: &Bag, boundary: &CspAssignment, node_budget: u64) -> Result<SolveResult, SolverError> {
    let sub = bag_instance(instance, bag, boundary)?;
    let mut result = solve_backtracking(&sub, node_budget);
    if let Some(a) = result.assignment.as_mut() {
        a.extend(boundary.iter().map(|(&k, &v)| (k, v)));
    }
    Ok(result)
}

/// Every solution of the bag's sub-instance under `boundary`, in
/// lexicographic order, each extended with the boundary values.
pub fn enumerate_bag_solutions(instance: &CspInstance, bag: &Bag, boundary: &CspAssignment) -> Result<Vec<CspAssignment>, SolverError> {
    let sub = bag_instance(instance, bag, boundary)?;
    let mut sols = solve_exhaustive(&sub)?;
    for s in &mut sols {
        s.extend(boundary.iter().map(|(&k, &v)| (k, v)));
    }
    Ok(sols)
}

fn bag_instance(instance: &CspInstance, bag: &Bag, boundary: &CspAssignment) -> Result<CspInstance, SolverError> {
    if let Some(&v) = boundary.keys().find(|v| !bag.vertices.contains(v)) {
        return Err(SolverError::BoundaryOutsideBag(v));
    }
    Ok(restrict(instance, &bag.vertices, boundary)?)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraversalStats {
    /// Bag-level solutions tried across the whole search.
    pub bag_solutions_tried: u64,
    /// Times a bag had no solution left and control returned to its predecessor.
    pub retreats: u64,
}

/// Solves bag by bag along the traversal order of `td`, pinning each bag's
/// separator to the values chosen upstream. When a bag runs out of
/// solutions the search resumes at the previous bag with its next
/// lexicographic solution.
///
/// Complete for valid decompositions: each constraint scope is a clique of
/// the primal graph and so lies inside some bag, where it gets checked.
pub fn solve_by_traversal(instance: &CspInstance, td: &TreeDecomposition) -> Result<(Option<CspAssignment>, TraversalStats), SolverError> {
    let order = traversal_order(td, None).steps;
    let mut stats = TraversalStats::default();
    let mut assignment = CspAssignment::new();
    // isolated variables that no bag mentions keep their first domain value
    let covered: BTreeSet<VarId> = td.bags().iter().flat_map(|b| b.vertices.iter().copied()).collect();
    for v in instance.variables() {
        if !covered.contains(&v.id) {
            assignment.insert(v.id, v.domain[0]);
        }
    }
    if instance.constraints().iter().any(|c| c.arity() == 0 && c.allowed_tuples().is_empty()) {
        return Ok((None, stats));
    }
    let mut candidates: Vec<Vec<CspAssignment>> = Vec::with_capacity(order.len());
    let mut cursor: Vec<usize> = Vec::with_capacity(order.len());
    let mut level = 0;
    loop {
        if level == order.len() {
            return Ok((Some(assignment), stats));
        }
        if candidates.len() == level {
            let step = &order[level];
            let bag = td.bag(step.bag).expect("traversal lists existing bags");
            let boundary: CspAssignment = step.separator.iter().map(|v| (*v, assignment[v])).collect();
            candidates.push(enumerate_bag_solutions(instance, bag, &boundary)?);
            cursor.push(0);
        } else {
            cursor[level] += 1;
        }
        if cursor[level] < candidates[level].len() {
            stats.bag_solutions_tried += 1;
            assignment.extend(candidates[level][cursor[level]].iter().map(|(&k, &v)| (k, v)));
            level += 1;
            continue;
        }
        // bag exhausted: drop it and advance its predecessor
        candidates.pop();
        cursor.pop();
        stats.retreats += 1;
        if level == 0 {
            return Ok((None, stats));
        }
        level -= 1;
    }
}
