//! Tree decompositions of primal graphs: greedy elimination heuristics, an
//! exact treewidth search for small graphs, validation, and the bag queries
//! the orchestrator relies on.
//!
//! All algorithms work on dense indices (vertices in ascending id order), so
//! "lowest id" tie-breaking is "lowest dense index".

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csp::{PrimalGraph, VarId};

/// Default vertex cap for [`decompose_exact`].
pub const DEFAULT_EXACT_CAP: usize = 25;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bag {
    pub id: usize,
    pub vertices: BTreeSet<VarId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MinFill,
    MinDegree,
    Exact,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::MinFill => "min-fill",
            Method::MinDegree => "min-degree",
            Method::Exact => "exact",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('_', "-").as_str() {
            "min-fill" => Ok(Method::MinFill),
            "min-degree" => Ok(Method::MinDegree),
            "exact" => Ok(Method::Exact),
            other => Err(format!("unknown decomposition method `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heuristic {
    MinFill,
    MinDegree,
}

impl From<Heuristic> for Method {
    fn from(h: Heuristic) -> Self {
        match h {
            Heuristic::MinFill => Method::MinFill,
            Heuristic::MinDegree => Method::MinDegree,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeDecomposition {
    bags: Vec<Bag>,
    tree_edges: BTreeSet<(usize, usize)>,
    width: i64,
    method: Method,
    /// Bag count before redundant bags were merged away.
    pre_merge_bag_count: usize,
}

impl TreeDecomposition {
    /// Builds a decomposition from explicit bags and tree edges. Bag ids are
    /// taken from positions; no validity check happens here, see [`validate`].
    pub fn from_parts(bags: Vec<BTreeSet<VarId>>, tree_edges: impl IntoIterator<Item = (usize, usize)>, method: Method) -> Self {
        let bags: Vec<Bag> = bags.into_iter().enumerate().map(|(id, vertices)| Bag { id, vertices }).collect();
        let tree_edges = tree_edges.into_iter().map(|(a, b)| (a.min(b), a.max(b))).collect();
        let width = bags.iter().map(|b| b.vertices.len() as i64).max().unwrap_or(0) - 1;
        let count = bags.len();
        TreeDecomposition { bags, tree_edges, width, method, pre_merge_bag_count: count }
    }

    pub fn bags(&self) -> &[Bag] {
        &self.bags
    }

    pub fn bag(&self, id: usize) -> Option<&Bag> {
        self.bags.get(id)
    }

    pub fn tree_edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.tree_edges
    }

    /// Largest bag size minus one; `-1` for the empty decomposition.
    pub fn width(&self) -> i64 {
        self.width
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn num_bags(&self) -> usize {
        self.bags.len()
    }

    pub fn pre_merge_bag_count(&self) -> usize {
        self.pre_merge_bag_count
    }

    pub fn neighbors(&self, bag: usize) -> BTreeSet<usize> {
        self.tree_edges
            .iter()
            .filter_map(|&(a, b)| if a == bag { Some(b) } else if b == bag { Some(a) } else { None })
            .collect()
    }

    /// PACE `.td` text. Vertices are written as their 1-based dense index in
    /// `graph`, which coincides with the variable number for CNF-derived graphs.
    pub fn to_pace(&self, graph: &PrimalGraph) -> String {
        let idx = graph.dense_index();
        let mut out = format!("s td {} {} {}\n", self.bags.len(), self.width + 1, graph.num_vertices());
        for bag in &self.bags {
            out.push_str(&format!("b {}", bag.id + 1));
            for v in &bag.vertices {
                out.push_str(&format!(" {}", idx.get(v).map_or(0, |i| i + 1)));
            }
            out.push('\n');
        }
        for &(a, b) in &self.tree_edges {
            out.push_str(&format!("{} {}\n", a + 1, b + 1));
        }
        out
    }

    /// Parses PACE `.td` text produced by this crate or an external solver,
    /// mapping vertex `i` back to the `i`-th vertex of `graph`.
    pub fn from_pace(text: &str, graph: &PrimalGraph) -> Result<Self, TdError> {
        let bad = |line: usize, msg: &str| TdError::Pace { line, message: msg.to_string() };
        let mut header: Option<usize> = None;
        let mut bags: Vec<Option<BTreeSet<VarId>>> = Vec::new();
        let mut edges = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('c') {
                continue;
            }
            let parts: Vec<&str> = t.split_whitespace().collect();
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(line, "expected a number"));
            match parts[0] {
                "s" => {
                    if parts.len() != 5 || parts[1] != "td" {
                        return Err(bad(line, "malformed solution line"));
                    }
                    let n = num(parts[2])?;
                    bags = vec![None; n];
                    header = Some(n);
                }
                "b" => {
                    if header.is_none() || parts.len() < 2 {
                        return Err(bad(line, "bag line before header"));
                    }
                    let id = num(parts[1])?;
                    if id == 0 || id > bags.len() {
                        return Err(bad(line, "bag id out of range"));
                    }
                    let mut verts = BTreeSet::new();
                    for p in &parts[2..] {
                        let v = num(p)?;
                        let vid = graph.vertices().get(v.wrapping_sub(1)).ok_or_else(|| bad(line, "vertex out of range"))?;
                        verts.insert(*vid);
                    }
                    bags[id - 1] = Some(verts);
                }
                _ => {
                    if parts.len() != 2 {
                        return Err(bad(line, "malformed edge line"));
                    }
                    let (a, b) = (num(parts[0])?, num(parts[1])?);
                    if a == 0 || b == 0 || a > bags.len() || b > bags.len() {
                        return Err(bad(line, "edge references unknown bag"));
                    }
                    edges.push((a - 1, b - 1));
                }
            }
        }
        if header.is_none() {
            return Err(bad(0, "missing `s td` line"));
        }
        let bags = bags.into_iter().map(Option::unwrap_or_default).collect();
        Ok(TreeDecomposition::from_parts(bags, edges, Method::Exact))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TdError {
    #[error("graph has {vertices} vertices, above the exact-solver cap of {cap}")]
    CapExceeded { vertices: usize, cap: usize },
    #[error("treewidth exceeds budget {budget}")]
    ExceedsBudget { budget: usize },
    #[error("scope not covered by any bag: {0:?}")]
    ScopeNotCovered(Vec<VarId>),
    #[error("PACE line {line}: {message}")]
    Pace { line: usize, message: String },
}

/// Greedy elimination: repeatedly eliminates the vertex adding the fewest
/// fill edges (or of minimum degree), lowest id on ties.
pub fn decompose_greedy(graph: &PrimalGraph, heuristic: Heuristic) -> TreeDecomposition {
    let adj = graph.adjacency();
    let order = greedy_order(&adj, heuristic);
    from_elimination_order(graph, &order, heuristic.into(), true)
}

/// The decomposition induced by eliminating vertices (dense indices) in
/// `order`. With `merge == false` the raw elimination cliques are kept.
pub fn from_elimination_order(graph: &PrimalGraph, order: &[usize], method: Method, merge: bool) -> TreeDecomposition {
    let n = graph.num_vertices();
    assert_eq!(order.len(), n, "order must be a permutation of the vertices");
    let mut adj = graph.adjacency();
    let mut position = vec![usize::MAX; n];
    for (i, &v) in order.iter().enumerate() {
        position[v] = i;
    }
    let mut bags: Vec<BTreeSet<usize>> = Vec::with_capacity(n);
    let mut parent: Vec<Option<usize>> = Vec::with_capacity(n);
    for (i, &v) in order.iter().enumerate() {
        let later: Vec<usize> = adj[v].iter().copied().filter(|&u| position[u] > i).collect();
        for (k, &a) in later.iter().enumerate() {
            for &b in &later[k + 1..] {
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
        let mut bag: BTreeSet<usize> = later.iter().copied().collect();
        bag.insert(v);
        parent.push(later.iter().map(|&u| position[u]).min());
        bags.push(bag);
    }
    // Stitch component roots into a chain so the result is one tree.
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut last_root: Option<usize> = None;
    for (i, p) in parent.iter().enumerate() {
        match p {
            Some(p) => edges.push((i, *p)),
            None => {
                if let Some(r) = last_root {
                    edges.push((r, i));
                }
                last_root = Some(i);
            }
        }
    }
    let pre_merge = bags.len();
    let (bags, edges) = if merge { merge_redundant(bags, edges) } else { (bags, edges) };
    let ids = graph.vertices();
    let bags = bags.into_iter().map(|b| b.into_iter().map(|i| ids[i]).collect()).collect();
    let mut td = TreeDecomposition::from_parts(bags, edges, method);
    td.pre_merge_bag_count = pre_merge;
    td
}

/// Contracts every tree edge whose one side's bag is a subset of the other.
fn merge_redundant(bags: Vec<BTreeSet<usize>>, edges: Vec<(usize, usize)>) -> (Vec<BTreeSet<usize>>, Vec<(usize, usize)>) {
    let n = bags.len();
    let mut alive = vec![true; n];
    let mut nbrs: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for &(a, b) in &edges {
        nbrs[a].insert(b);
        nbrs[b].insert(a);
    }
    let mut changed = true;
    while changed {
        changed = false;
        for x in 0..n {
            if !alive[x] {
                continue;
            }
            let target = nbrs[x].iter().copied().find(|&y| bags[x].is_subset(&bags[y]));
            if let Some(y) = target {
                alive[x] = false;
                let moved: Vec<usize> = nbrs[x].iter().copied().filter(|&z| z != y).collect();
                nbrs[x].clear();
                nbrs[y].remove(&x);
                for z in moved {
                    nbrs[z].remove(&x);
                    nbrs[z].insert(y);
                    nbrs[y].insert(z);
                }
                changed = true;
            }
        }
    }
    let mut renumber = vec![usize::MAX; n];
    let mut out_bags = Vec::new();
    for i in 0..n {
        if alive[i] {
            renumber[i] = out_bags.len();
            out_bags.push(bags[i].clone());
        }
    }
    let mut out_edges = Vec::new();
    for i in 0..n {
        for &j in &nbrs[i] {
            if alive[i] && alive[j] && i < j {
                out_edges.push((renumber[i], renumber[j]));
            }
        }
    }
    (out_bags, out_edges)
}

fn greedy_order(adj: &[BTreeSet<usize>], heuristic: Heuristic) -> Vec<usize> {
    let n = adj.len();
    let mut adj = adj.to_vec();
    let mut alive = vec![true; n];
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best: Option<(usize, usize)> = None;
        for v in (0..n).filter(|&v| alive[v]) {
            let score = match heuristic {
                Heuristic::MinDegree => adj[v].len(),
                Heuristic::MinFill => fill_in(&adj, v),
            };
            if best.is_none_or(|(s, _)| score < s) {
                best = Some((score, v));
            }
        }
        let (_, v) = best.expect("a live vertex remains");
        let nbrs: Vec<usize> = adj[v].iter().copied().collect();
        for (k, &a) in nbrs.iter().enumerate() {
            adj[a].remove(&v);
            for &b in &nbrs[k + 1..] {
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
        adj[v].clear();
        alive[v] = false;
        order.push(v);
    }
    order
}

fn fill_in(adj: &[BTreeSet<usize>], v: usize) -> usize {
    let nbrs: Vec<usize> = adj[v].iter().copied().collect();
    let mut missing = 0;
    for (k, &a) in nbrs.iter().enumerate() {
        for &b in &nbrs[k + 1..] {
            if !adj[a].contains(&b) {
                missing += 1;
            }
        }
    }
    missing
}

/// Minimum-width decomposition by iterative deepening on the target width.
///
/// Each round decides whether an elimination order of width `k` exists with a
/// memoized depth-first search over eliminated vertex sets. The elimination
/// graph after removing a set `S` does not depend on the order inside `S`,
/// which is what makes the failed-set memo sound.
pub fn decompose_exact(graph: &PrimalGraph, budget: Option<usize>) -> Result<TreeDecomposition, TdError> {
    decompose_exact_with_cap(graph, budget, DEFAULT_EXACT_CAP)
}

pub fn decompose_exact_with_cap(graph: &PrimalGraph, budget: Option<usize>, cap: usize) -> Result<TreeDecomposition, TdError> {
    let n = graph.num_vertices();
    if n > cap || n > 64 {
        return Err(TdError::CapExceeded { vertices: n, cap: cap.min(64) });
    }
    if n == 0 {
        return Ok(TreeDecomposition::from_parts(Vec::new(), Vec::new(), Method::Exact));
    }
    let adj: Vec<u64> = graph
        .adjacency()
        .iter()
        .map(|s| s.iter().fold(0u64, |m, &u| m | (1 << u)))
        .collect();
    let upper_order = greedy_order(&graph.adjacency(), Heuristic::MinFill);
    let upper = from_elimination_order(graph, &upper_order, Method::MinFill, true).width() as usize;
    let lower = minor_min_width(&adj);
    let limit = budget.map_or(upper, |b| b.min(upper));
    let mut search = ExactSearch { adj: &adj, n, failed: HashSet::new() };
    for k in lower..=limit {
        if k == upper {
            return Ok(from_elimination_order(graph, &upper_order, Method::Exact, true));
        }
        search.failed.clear();
        let mut order = Vec::with_capacity(n);
        if search.feasible(0, k, &mut order) {
            let mut seen = 0u64;
            for &v in &order {
                seen |= 1 << v;
            }
            order.extend((0..n).filter(|&v| seen & (1 << v) == 0));
            return Ok(from_elimination_order(graph, &order, Method::Exact, true));
        }
    }
    Err(TdError::ExceedsBudget { budget: budget.unwrap_or(upper) })
}

struct ExactSearch<'a> {
    adj: &'a [u64],
    n: usize,
    failed: HashSet<u64>,
}

impl ExactSearch<'_> {
    /// Neighborhoods in the elimination graph after eliminating `eliminated`.
    fn elimination_graph(&self, eliminated: u64) -> Vec<u64> {
        let mut out: Vec<u64> = self.adj.iter().map(|&a| a & !eliminated).collect();
        let mut unseen = eliminated;
        while unseen != 0 {
            let start = unseen.trailing_zeros() as usize;
            let mut comp = 1u64 << start;
            let mut frontier = comp;
            while frontier != 0 {
                let v = frontier.trailing_zeros() as usize;
                frontier &= frontier - 1;
                let next = self.adj[v] & eliminated & !comp;
                comp |= next;
                frontier |= next;
            }
            unseen &= !comp;
            let mut boundary = 0u64;
            let mut c = comp;
            while c != 0 {
                let v = c.trailing_zeros() as usize;
                c &= c - 1;
                boundary |= self.adj[v];
            }
            boundary &= !eliminated;
            let mut b = boundary;
            while b != 0 {
                let v = b.trailing_zeros() as usize;
                b &= b - 1;
                out[v] |= boundary & !(1 << v);
            }
        }
        out
    }

    fn feasible(&mut self, eliminated: u64, k: usize, order: &mut Vec<usize>) -> bool {
        let remaining = self.n - eliminated.count_ones() as usize;
        if remaining <= k + 1 {
            return true;
        }
        if self.failed.contains(&eliminated) {
            return false;
        }
        let g = self.elimination_graph(eliminated);
        let live = (0..self.n).filter(|&v| eliminated & (1 << v) == 0);
        let mut candidates = Vec::new();
        let mut forced: Option<usize> = None;
        for v in live {
            let deg = g[v].count_ones() as usize;
            let simplicial = is_clique(&g, g[v]);
            if simplicial && deg > k {
                // v with its neighbors is a clique of more than k + 1 vertices
                self.failed.insert(eliminated);
                return false;
            }
            if deg <= k {
                if simplicial || almost_simplicial(&g, g[v]) {
                    forced = Some(v);
                    break;
                }
                candidates.push(v);
            }
        }
        if let Some(v) = forced {
            candidates = vec![v];
        }
        for v in candidates {
            order.push(v);
            if self.feasible(eliminated | (1 << v), k, order) {
                return true;
            }
            order.pop();
        }
        self.failed.insert(eliminated);
        false
    }
}

fn is_clique(g: &[u64], set: u64) -> bool {
    let mut s = set;
    while s != 0 {
        let v = s.trailing_zeros() as usize;
        s &= s - 1;
        if (set & !(1 << v)) & !g[v] != 0 {
            return false;
        }
    }
    true
}

fn almost_simplicial(g: &[u64], nbrs: u64) -> bool {
    let mut s = nbrs;
    while s != 0 {
        let u = s.trailing_zeros() as usize;
        s &= s - 1;
        if is_clique(g, nbrs & !(1 << u)) {
            return true;
        }
    }
    false
}

/// Minor-min-width lower bound: contract a minimum-degree vertex into its
/// minimum-degree neighbor until no edges remain.
fn minor_min_width(adj: &[u64]) -> usize {
    let n = adj.len();
    let mut g = adj.to_vec();
    let mut alive: u64 = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    let mut lb = 0;
    while alive != 0 {
        let mut best: Option<(u32, usize)> = None;
        let mut a = alive;
        while a != 0 {
            let v = a.trailing_zeros() as usize;
            a &= a - 1;
            let d = g[v].count_ones();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, v));
            }
        }
        let (d, v) = best.expect("alive is nonempty");
        lb = lb.max(d as usize);
        if d == 0 {
            alive &= !(1 << v);
            continue;
        }
        let mut u_best: Option<(u32, usize)> = None;
        let mut nb = g[v];
        while nb != 0 {
            let u = nb.trailing_zeros() as usize;
            nb &= nb - 1;
            let du = g[u].count_ones();
            if u_best.is_none_or(|(bd, _)| du < bd) {
                u_best = Some((du, u));
            }
        }
        let (_, u) = u_best.expect("v has a neighbor");
        // contract v into u
        let merged = (g[v] | g[u]) & !(1 << u) & !(1 << v);
        let mut nb = g[v];
        while nb != 0 {
            let w = nb.trailing_zeros() as usize;
            nb &= nb - 1;
            g[w] &= !(1 << v);
        }
        g[u] = merged;
        let mut m = merged;
        while m != 0 {
            let w = m.trailing_zeros() as usize;
            m &= m - 1;
            g[w] |= 1 << u;
        }
        g[v] = 0;
        alive &= !(1 << v);
    }
    lb
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    VertexUncovered(VarId),
    EdgeUncovered(VarId, VarId),
    RunningIntersection(VarId),
    UnknownVertex { bag: usize, vertex: VarId },
    BadTreeEdge(usize, usize),
    NotATree,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::VertexUncovered(v) => write!(f, "vertex {v} uncovered"),
            Violation::EdgeUncovered(a, b) => write!(f, "edge ({a},{b}) uncovered"),
            Violation::RunningIntersection(v) => write!(f, "bags containing vertex {v} are not connected"),
            Violation::UnknownVertex { bag, vertex } => write!(f, "bag {bag} holds vertex {vertex} absent from the graph"),
            Violation::BadTreeEdge(a, b) => write!(f, "tree edge ({a},{b}) references a missing bag or loops"),
            Violation::NotATree => write!(f, "tree edges do not form a tree over the bags"),
        }
    }
}

/// Every way `td` fails to be a tree decomposition of `graph`; empty when valid.
pub fn validate(graph: &PrimalGraph, td: &TreeDecomposition) -> Vec<Violation> {
    let mut out = Vec::new();
    let nb = td.bags.len();
    let known: BTreeSet<VarId> = graph.vertices().iter().copied().collect();
    for bag in &td.bags {
        for &v in &bag.vertices {
            if !known.contains(&v) {
                out.push(Violation::UnknownVertex { bag: bag.id, vertex: v });
            }
        }
    }
    let mut tree_adj: Vec<Vec<usize>> = vec![Vec::new(); nb];
    for &(a, b) in &td.tree_edges {
        if a >= nb || b >= nb || a == b {
            out.push(Violation::BadTreeEdge(a, b));
            continue;
        }
        tree_adj[a].push(b);
        tree_adj[b].push(a);
    }
    let valid_edges = td.tree_edges.iter().filter(|&&(a, b)| a < nb && b < nb && a != b).count();
    if nb > 0 && (valid_edges != nb - 1 || reachable(&tree_adj, 0, &|_| true).len() != nb) {
        out.push(Violation::NotATree);
    }
    let mut holders: BTreeMap<VarId, Vec<usize>> = BTreeMap::new();
    for bag in &td.bags {
        for &v in &bag.vertices {
            holders.entry(v).or_default().push(bag.id);
        }
    }
    for &v in graph.vertices() {
        match holders.get(&v) {
            None => out.push(Violation::VertexUncovered(v)),
            Some(bags) => {
                let inside: BTreeSet<usize> = bags.iter().copied().collect();
                let seen = reachable(&tree_adj, bags[0], &|b| inside.contains(&b));
                if seen.len() != inside.len() {
                    out.push(Violation::RunningIntersection(v));
                }
            }
        }
    }
    for &(a, b) in graph.edges() {
        if !td.bags.iter().any(|bag| bag.vertices.contains(&a) && bag.vertices.contains(&b)) {
            out.push(Violation::EdgeUncovered(a, b));
        }
    }
    out
}

fn reachable(adj: &[Vec<usize>], start: usize, allowed: &dyn Fn(usize) -> bool) -> BTreeSet<usize> {
    let mut seen = BTreeSet::from([start]);
    let mut stack = vec![start];
    while let Some(x) = stack.pop() {
        for &y in &adj[x] {
            if allowed(y) && seen.insert(y) {
                stack.push(y);
            }
        }
    }
    seen
}

/// Smallest bag containing `scope` (lowest id on ties).
pub fn bag_for_scope(td: &TreeDecomposition, scope: &BTreeSet<VarId>) -> Result<usize, TdError> {
    td.bags
        .iter()
        .filter(|b| scope.is_subset(&b.vertices))
        .min_by_key(|b| (b.vertices.len(), b.id))
        .map(|b| b.id)
        .ok_or_else(|| TdError::ScopeNotCovered(scope.iter().copied().collect()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraversalStep {
    pub bag: usize,
    pub parent: Option<usize>,
    /// Intersection with the parent bag; empty for the root.
    pub separator: BTreeSet<VarId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traversal {
    pub steps: Vec<TraversalStep>,
}

impl Traversal {
    pub fn order(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.bag).collect()
    }

    /// Separators of the non-root bags, in traversal order.
    pub fn separators(&self) -> Vec<BTreeSet<VarId>> {
        self.steps.iter().filter(|s| s.parent.is_some()).map(|s| s.separator.clone()).collect()
    }
}

/// Depth-first preorder from the bag overlapping `root_hint` most (default:
/// the largest bag), children visited in ascending id order.
pub fn traversal_order(td: &TreeDecomposition, root_hint: Option<&BTreeSet<VarId>>) -> Traversal {
    let Some(root) = td.bags.iter().max_by_key(|b| {
        let score = match root_hint {
            Some(hint) => b.vertices.intersection(hint).count(),
            None => b.vertices.len(),
        };
        (score, std::cmp::Reverse(b.id))
    }) else {
        return Traversal { steps: Vec::new() };
    };
    traversal_from(td, root.id)
}

/// Depth-first preorder from `root`, children visited in ascending id order.
/// An out-of-range root yields an empty traversal.
pub fn traversal_from(td: &TreeDecomposition, root: usize) -> Traversal {
    if root >= td.bags.len() {
        return Traversal { steps: Vec::new() };
    }
    let mut steps = Vec::with_capacity(td.bags.len());
    let mut visited = vec![false; td.bags.len()];
    let mut stack = vec![(root, None::<usize>)];
    while let Some((bag, parent)) = stack.pop() {
        if visited[bag] {
            continue;
        }
        visited[bag] = true;
        let separator = parent
            .map(|p| td.bags[bag].vertices.intersection(&td.bags[p].vertices).copied().collect())
            .unwrap_or_default();
        steps.push(TraversalStep { bag, parent, separator });
        for child in td.neighbors(bag).into_iter().rev() {
            if !visited[child] {
                stack.push((child, Some(bag)));
            }
        }
    }
    Traversal { steps }
}
