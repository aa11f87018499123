//! Relational schemas as foreign-key graphs: pruning to the tables a query
//! needs, decomposing the pruned graph into bag-sized subtasks that each
//! produce one CTE, and assembling and scoring the resulting SQL.
//!
//! Tables are graph vertices and every foreign key adds an undirected edge;
//! several keys between the same pair of tables share one edge. Table and
//! column names compare case-insensitively, as SQL does.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentError, RemoteAgent};
use crate::csp::{PrimalGraph, VarId};
use crate::orchestrator::Mode;
use crate::treedecomp::{decompose_exact, decompose_greedy, traversal_from, Heuristic, TdError, TreeDecomposition};

pub const DEFAULT_SQL_PROMPT_TEMPLATE: &str = include_str!("../templates/nl2sql_prompt.txt");

/// Target sets up to this size are pruned with an exact Steiner search.
pub const STEINER_EXACT_TARGETS: usize = 4;

/// Candidate subsets examined by the exact Steiner search before it gives
/// up and keeps the shortest-path union.
pub const STEINER_SUBSET_BUDGET: u64 = 2_000_000;

/// Pruned graphs up to this many tables get an exact decomposition.
pub const PLAN_EXACT_LIMIT: usize = 20;

/// Suffixes tried when two fragments claim the same CTE name.
pub const RENAME_BUDGET: usize = 99;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchemaError {
    #[error("duplicate table {0}")]
    DuplicateTable(String),
    #[error("duplicate column {table}.{column}")]
    DuplicateColumn { table: String, column: String },
    #[error("foreign key {0} has an endpoint outside the schema")]
    DanglingForeignKey(String),
    #[error("unknown table {0}")]
    UnknownTable(String),
    #[error("no target tables")]
    NoTargets,
    #[error("target tables lie in different components: {0:?}")]
    DisconnectedTargets(Vec<Vec<String>>),
    #[error("malformed schema file: {0}")]
    Format(String),
    #[error("no schema named {0}")]
    UnknownDatabase(String),
    #[error("decomposition failed: {0}")]
    Decomposition(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(rename = "type")]
    pub type_tag: String,
    #[serde(default)]
    pub primary_key: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TableSchema {
    pub name: String,
    pub columns: Vec<Column>,
}

impl TableSchema {
    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name.eq_ignore_ascii_case(name))
    }

    /// Primary-key columns, or every column when the table declares none.
    pub fn key_columns(&self) -> Vec<&str> {
        let keys: Vec<&str> = self.columns.iter().filter(|c| c.primary_key).map(|c| c.name.as_str()).collect();
        if keys.is_empty() {
            self.columns.iter().map(|c| c.name.as_str()).collect()
        } else {
            keys
        }
    }
}

/// `from_table.from_column` references `to_table.to_column`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ForeignKey {
    pub from_table: String,
    pub from_column: String,
    pub to_table: String,
    pub to_column: String,
}

impl fmt::Display for ForeignKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{} -> {}.{}", self.from_table, self.from_column, self.to_table, self.to_column)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub db_id: String,
    pub tables: Vec<TableSchema>,
    pub foreign_keys: Vec<ForeignKey>,
}

impl Schema {
    pub fn new(db_id: impl Into<String>, tables: Vec<TableSchema>, foreign_keys: Vec<ForeignKey>) -> Result<Self, SchemaError> {
        let schema = Schema { db_id: db_id.into(), tables, foreign_keys };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        let mut names = BTreeSet::new();
        for t in &self.tables {
            if !names.insert(t.name.to_ascii_lowercase()) {
                return Err(SchemaError::DuplicateTable(t.name.clone()));
            }
            let mut cols = BTreeSet::new();
            for c in &t.columns {
                if !cols.insert(c.name.to_ascii_lowercase()) {
                    return Err(SchemaError::DuplicateColumn { table: t.name.clone(), column: c.name.clone() });
                }
            }
        }
        for fk in &self.foreign_keys {
            let ok = |t: &str, c: &str| self.table(t).is_some_and(|t| t.column(c).is_some());
            if !ok(&fk.from_table, &fk.from_column) || !ok(&fk.to_table, &fk.to_column) || fk.from_table.eq_ignore_ascii_case(&fk.to_table) {
                return Err(SchemaError::DanglingForeignKey(fk.to_string()));
            }
        }
        Ok(())
    }

    pub fn table(&self, name: &str) -> Option<&TableSchema> {
        self.tables.iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }

    /// The canonical spelling of a table name.
    pub fn canonical(&self, name: &str) -> Option<&str> {
        self.table(name).map(|t| t.name.as_str())
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SpiderKey {
    One(usize),
    Many(Vec<usize>),
}

#[derive(Deserialize)]
struct SpiderDb {
    db_id: String,
    table_names_original: Vec<String>,
    column_names_original: Vec<(i64, String)>,
    column_types: Vec<String>,
    #[serde(default)]
    primary_keys: Vec<SpiderKey>,
    #[serde(default)]
    foreign_keys: Vec<(usize, usize)>,
}

impl SpiderDb {
    fn into_schema(self) -> Result<Schema, SchemaError> {
        let bad = |m: String| SchemaError::Format(format!("{}: {m}", self.db_id));
        if self.column_types.len() != self.column_names_original.len() {
            return Err(bad("column_types and column_names_original differ in length".into()));
        }
        let pk: BTreeSet<usize> = self
            .primary_keys
            .iter()
            .flat_map(|k| match k {
                SpiderKey::One(i) => vec![*i],
                SpiderKey::Many(v) => v.clone(),
            })
            .collect();
        let mut tables: Vec<TableSchema> =
            self.table_names_original.iter().map(|n| TableSchema { name: n.clone(), columns: Vec::new() }).collect();
        for (i, ((t, name), ty)) in self.column_names_original.iter().zip(&self.column_types).enumerate() {
            if *t < 0 {
                continue;
            }
            let table = tables.get_mut(*t as usize).ok_or_else(|| bad(format!("column {name} names table {t}")))?;
            table.columns.push(Column { name: name.clone(), type_tag: ty.clone(), primary_key: pk.contains(&i) });
        }
        let column = |i: usize| -> Result<(String, String), SchemaError> {
            let (t, name) = self.column_names_original.get(i).ok_or_else(|| bad(format!("column index {i}")))?;
            let table = usize::try_from(*t).ok().and_then(|t| self.table_names_original.get(t));
            let table = table.ok_or_else(|| bad(format!("column index {i} has no table")))?;
            Ok((table.clone(), name.clone()))
        };
        let mut foreign_keys = Vec::new();
        for &(a, b) in &self.foreign_keys {
            let (from_table, from_column) = column(a)?;
            let (to_table, to_column) = column(b)?;
            foreign_keys.push(ForeignKey { from_table, from_column, to_table, to_column });
        }
        Schema::new(self.db_id.clone(), tables, foreign_keys)
    }
}

/// Reads schemas in the benchmark's `tables.json` shape: an array of
/// databases (a single object is accepted too).
pub fn schemas_from_spider_json(text: &str) -> Result<Vec<Schema>, SchemaError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| SchemaError::Format(e.to_string()))?;
    let items = match value {
        serde_json::Value::Array(items) => items,
        other => vec![other],
    };
    items
        .into_iter()
        .map(|v| serde_json::from_value::<SpiderDb>(v).map_err(|e| SchemaError::Format(e.to_string()))?.into_schema())
        .collect()
}

/// The `tables.json` entry for a schema.
pub fn schema_to_spider_json(schema: &Schema) -> serde_json::Value {
    let mut columns = vec![serde_json::json!([-1, "*"])];
    let mut types = vec!["text".to_string()];
    let mut index = BTreeMap::new();
    let mut pks = Vec::new();
    for (ti, t) in schema.tables.iter().enumerate() {
        for c in &t.columns {
            index.insert((t.name.to_ascii_lowercase(), c.name.to_ascii_lowercase()), columns.len());
            if c.primary_key {
                pks.push(columns.len());
            }
            columns.push(serde_json::json!([ti, c.name]));
            types.push(c.type_tag.clone());
        }
    }
    let at = |t: &str, c: &str| index[&(t.to_ascii_lowercase(), c.to_ascii_lowercase())];
    let fks: Vec<[usize; 2]> =
        schema.foreign_keys.iter().map(|fk| [at(&fk.from_table, &fk.from_column), at(&fk.to_table, &fk.to_column)]).collect();
    let names: Vec<&str> = schema.tables.iter().map(|t| t.name.as_str()).collect();
    serde_json::json!({
        "db_id": schema.db_id,
        "table_names_original": names,
        "table_names": names,
        "column_names_original": columns,
        "column_names": columns,
        "column_types": types,
        "primary_keys": pks,
        "foreign_keys": fks,
    })
}

pub fn load_spider_schemas(path: &Path) -> Result<Vec<Schema>, SchemaError> {
    let text = std::fs::read_to_string(path).map_err(|e| SchemaError::Format(format!("{}: {e}", path.display())))?;
    schemas_from_spider_json(&text)
}

/// One undirected edge; `columns` lists every foreign key between the pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinEdge {
    pub tables: (String, String),
    pub columns: Vec<ForeignKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaGraph {
    /// Table names in schema order.
    pub tables: Vec<String>,
    /// Sorted by table pair; each pair is stored in name order.
    pub edges: Vec<JoinEdge>,
}

fn pair(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl SchemaGraph {
    pub fn contains(&self, table: &str) -> bool {
        self.tables.iter().any(|t| t == table)
    }

    pub fn edge(&self, a: &str, b: &str) -> Option<&JoinEdge> {
        let key = pair(a, b);
        self.edges.iter().find(|e| e.tables == key)
    }

    pub fn neighbors(&self, table: &str) -> BTreeSet<&str> {
        self.edges
            .iter()
            .filter_map(|e| {
                if e.tables.0 == table {
                    Some(e.tables.1.as_str())
                } else if e.tables.1 == table {
                    Some(e.tables.0.as_str())
                } else {
                    None
                }
            })
            .collect()
    }

    /// Connected components, each sorted by name, ordered by first member.
    pub fn components(&self) -> Vec<BTreeSet<String>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        let mut names: Vec<&String> = self.tables.iter().collect();
        names.sort();
        for start in names {
            if seen.contains(start) {
                continue;
            }
            let comp = self.reachable(start, None);
            seen.extend(comp.iter().cloned());
            out.push(comp);
        }
        out
    }

    fn reachable(&self, start: &str, within: Option<&BTreeSet<String>>) -> BTreeSet<String> {
        let mut comp = BTreeSet::from([start.to_string()]);
        let mut queue = VecDeque::from([start.to_string()]);
        while let Some(t) = queue.pop_front() {
            for n in self.neighbors(&t) {
                if within.is_none_or(|w| w.contains(n)) && comp.insert(n.to_string()) {
                    queue.push_back(n.to_string());
                }
            }
        }
        comp
    }

    /// The subgraph induced by `tables`.
    pub fn induced(&self, tables: &BTreeSet<String>) -> SchemaGraph {
        SchemaGraph {
            tables: self.tables.iter().filter(|t| tables.contains(*t)).cloned().collect(),
            edges: self.edges.iter().filter(|e| tables.contains(&e.tables.0) && tables.contains(&e.tables.1)).cloned().collect(),
        }
    }

    /// Every (referencing, referenced) column pair on the graph's edges.
    pub fn join_pairs(&self) -> BTreeSet<JoinPair> {
        self.edges.iter().flat_map(|e| e.columns.iter().map(JoinPair::from_fk)).collect()
    }

    /// The primal graph with tables numbered by position.
    pub fn primal(&self) -> PrimalGraph {
        let id: BTreeMap<&str, VarId> = self.tables.iter().enumerate().map(|(i, t)| (t.as_str(), i as VarId)).collect();
        PrimalGraph::new(id.values().copied(), self.edges.iter().map(|e| (id[e.tables.0.as_str()], id[e.tables.1.as_str()])))
            .expect("schema graph edges join distinct tables")
    }
}

pub fn build_schema_graph(schema: &Schema) -> Result<SchemaGraph, SchemaError> {
    schema.validate()?;
    let mut edges: BTreeMap<(String, String), Vec<ForeignKey>> = BTreeMap::new();
    for fk in &schema.foreign_keys {
        let from = schema.canonical(&fk.from_table).expect("validated");
        let to = schema.canonical(&fk.to_table).expect("validated");
        edges.entry(pair(from, to)).or_default().push(fk.clone());
    }
    Ok(SchemaGraph {
        tables: schema.tables.iter().map(|t| t.name.clone()).collect(),
        edges: edges.into_iter().map(|(tables, columns)| JoinEdge { tables, columns }).collect(),
    })
}

/// Canonical target names, deduplicated in first-mention order.
fn resolve_targets(graph: &SchemaGraph, targets: &[String]) -> Result<Vec<String>, SchemaError> {
    let mut out: Vec<String> = Vec::new();
    for t in targets {
        let name = graph
            .tables
            .iter()
            .find(|x| x.eq_ignore_ascii_case(t))
            .ok_or_else(|| SchemaError::UnknownTable(t.clone()))?;
        if !out.contains(name) {
            out.push(name.clone());
        }
    }
    if out.is_empty() {
        return Err(SchemaError::NoTargets);
    }
    Ok(out)
}

/// Smallest set of tables that connects every target, kept as a tree.
///
/// Up to [`STEINER_EXACT_TARGETS`] targets the non-target tables of the
/// targets' component are tried as subsets of increasing size, in name
/// order, and the first subset that connects the targets wins. Larger target
/// sets (or a search past [`STEINER_SUBSET_BUDGET`]) take the union of
/// pairwise shortest paths, each the lexicographically smallest among equal
/// lengths. Edges keep every foreign key between their tables.
pub fn prune_to_connecting_subgraph(graph: &SchemaGraph, targets: &[String]) -> Result<SchemaGraph, SchemaError> {
    let targets = resolve_targets(graph, targets)?;
    let component = graph.reachable(&targets[0], None);
    if targets.iter().any(|t| !component.contains(t)) {
        let groups: Vec<Vec<String>> = graph
            .components()
            .into_iter()
            .map(|c| targets.iter().filter(|t| c.contains(*t)).cloned().collect::<Vec<_>>())
            .filter(|g| !g.is_empty())
            .collect();
        return Err(SchemaError::DisconnectedTargets(groups));
    }
    let target_set: BTreeSet<String> = targets.iter().cloned().collect();
    if target_set.len() == 1 {
        return Ok(graph.induced(&target_set));
    }
    let union = shortest_path_union(graph, &target_set);
    if target_set.len() <= STEINER_EXACT_TARGETS {
        if let Some(tables) = steiner_tables(graph, &target_set, &component, union.tables.len()) {
            return Ok(spanning_tree(graph, &tables, &targets[0]));
        }
    }
    Ok(union)
}

fn steiner_tables(
    graph: &SchemaGraph,
    targets: &BTreeSet<String>,
    component: &BTreeSet<String>,
    upper: usize,
) -> Option<BTreeSet<String>> {
    let candidates: Vec<&String> = component.iter().filter(|t| !targets.contains(*t)).collect();
    let start = targets.iter().next().expect("nonempty");
    let mut examined = 0u64;
    for extra in 0..=upper.saturating_sub(targets.len()).min(candidates.len()) {
        let mut idx: Vec<usize> = (0..extra).collect();
        loop {
            examined += 1;
            if examined > STEINER_SUBSET_BUDGET {
                return None;
            }
            let mut chosen = targets.clone();
            chosen.extend(idx.iter().map(|&i| candidates[i].clone()));
            if graph.reachable(start, Some(&chosen)).len() == chosen.len() {
                return Some(chosen);
            }
            if !next_combination(&mut idx, candidates.len()) {
                break;
            }
        }
    }
    None
}

fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    for i in (0..k).rev() {
        if idx[i] < n - k + i {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Breadth-first spanning tree of the induced subgraph, neighbors in name order.
fn spanning_tree(graph: &SchemaGraph, tables: &BTreeSet<String>, root: &str) -> SchemaGraph {
    let mut seen = BTreeSet::from([root.to_string()]);
    let mut queue = VecDeque::from([root.to_string()]);
    let mut keep = BTreeSet::new();
    while let Some(t) = queue.pop_front() {
        for n in graph.neighbors(&t) {
            if tables.contains(n) && seen.insert(n.to_string()) {
                keep.insert(pair(&t, n));
                queue.push_back(n.to_string());
            }
        }
    }
    SchemaGraph {
        tables: graph.tables.iter().filter(|t| tables.contains(*t)).cloned().collect(),
        edges: graph.edges.iter().filter(|e| keep.contains(&e.tables)).cloned().collect(),
    }
}

fn shortest_path_union(graph: &SchemaGraph, targets: &BTreeSet<String>) -> SchemaGraph {
    let mut tables = targets.clone();
    let mut keep = BTreeSet::new();
    let list: Vec<&String> = targets.iter().collect();
    for (i, a) in list.iter().enumerate() {
        for b in &list[i + 1..] {
            let path = smallest_shortest_path(graph, a, b);
            for w in path.windows(2) {
                keep.insert(pair(&w[0], &w[1]));
            }
            tables.extend(path);
        }
    }
    SchemaGraph {
        tables: graph.tables.iter().filter(|t| tables.contains(*t)).cloned().collect(),
        edges: graph.edges.iter().filter(|e| keep.contains(&e.tables)).cloned().collect(),
    }
}

/// Among shortest paths from `a` to `b`, the one whose table sequence is
/// lexicographically smallest.
fn smallest_shortest_path(graph: &SchemaGraph, a: &str, b: &str) -> Vec<String> {
    let mut dist: BTreeMap<String, usize> = BTreeMap::from([(b.to_string(), 0)]);
    let mut queue = VecDeque::from([b.to_string()]);
    while let Some(t) = queue.pop_front() {
        let d = dist[&t];
        for n in graph.neighbors(&t) {
            if !dist.contains_key(n) {
                dist.insert(n.to_string(), d + 1);
                queue.push_back(n.to_string());
            }
        }
    }
    let mut path = vec![a.to_string()];
    let mut cur = a.to_string();
    while cur != b {
        let d = dist[&cur];
        let next = graph.neighbors(&cur).into_iter().find(|n| dist.get(*n) == Some(&(d - 1))).expect("connected");
        cur = next.to_string();
        path.push(cur.clone());
    }
    path
}

/// An opaque filter attached to one table, carried to the subtask that
/// covers it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Filter {
    pub table: String,
    pub condition: String,
}

/// `table.column` in canonical spelling.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ColumnRef {
    pub table: String,
    pub column: String,
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.table, self.column)
    }
}

/// An equality join between two columns, stored in sorted order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JoinPair(pub ColumnRef, pub ColumnRef);

impl JoinPair {
    pub fn new(a: ColumnRef, b: ColumnRef) -> Self {
        if a <= b {
            JoinPair(a, b)
        } else {
            JoinPair(b, a)
        }
    }

    pub fn from_fk(fk: &ForeignKey) -> Self {
        JoinPair::new(
            ColumnRef { table: fk.from_table.clone(), column: fk.from_column.clone() },
            ColumnRef { table: fk.to_table.clone(), column: fk.to_column.clone() },
        )
    }
}

impl fmt::Display for JoinPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {}", self.0, self.1)
    }
}

/// The tables and join columns a correct query uses.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferencePlan {
    pub tables: BTreeSet<String>,
    pub joins: BTreeSet<JoinPair>,
}

impl ReferencePlan {
    pub fn from_graph(graph: &SchemaGraph) -> Self {
        ReferencePlan { tables: graph.tables.iter().cloned().collect(), joins: graph.join_pairs() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTask {
    pub id: String,
    pub nl_query: String,
    pub schema: Schema,
    pub target_tables: Vec<String>,
    #[serde(default)]
    pub filters: Vec<Filter>,
    #[serde(default)]
    pub reference: Option<ReferencePlan>,
}

impl QueryTask {
    pub fn validate(&self) -> Result<(), SchemaError> {
        self.schema.validate()?;
        if self.target_tables.is_empty() {
            return Err(SchemaError::NoTargets);
        }
        for t in self.target_tables.iter().chain(self.filters.iter().map(|f| &f.table)) {
            if self.schema.table(t).is_none() {
                return Err(SchemaError::UnknownTable(t.clone()));
            }
        }
        Ok(())
    }
}

/// On-disk query task; the schema is looked up by `db_id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTaskFile {
    pub id: String,
    pub db_id: String,
    pub nl_query: String,
    #[serde(default)]
    pub target_tables: Vec<String>,
    #[serde(default)]
    pub filters: Vec<Filter>,
    #[serde(default)]
    pub reference: Option<ReferenceFile>,
}

/// Reference plan with joins written as `"a.x = b.y"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceFile {
    pub tables: Vec<String>,
    #[serde(default)]
    pub joins: Vec<String>,
}

fn parse_column_ref(schema: &Schema, text: &str) -> Result<ColumnRef, SchemaError> {
    let (t, c) = text.trim().split_once('.').ok_or_else(|| SchemaError::Format(format!("expected table.column, got {text:?}")))?;
    let table = schema.table(t.trim()).ok_or_else(|| SchemaError::UnknownTable(t.trim().to_string()))?;
    let column = table.column(c.trim()).ok_or_else(|| SchemaError::Format(format!("unknown column {text:?}")))?;
    Ok(ColumnRef { table: table.name.clone(), column: column.name.clone() })
}

impl QueryTaskFile {
    /// Resolves the schema; an empty target list falls back to
    /// [`identify_targets`].
    pub fn resolve(&self, schemas: &[Schema]) -> Result<QueryTask, SchemaError> {
        let schema = schemas
            .iter()
            .find(|s| s.db_id == self.db_id)
            .cloned()
            .ok_or_else(|| SchemaError::UnknownDatabase(self.db_id.clone()))?;
        let target_tables =
            if self.target_tables.is_empty() { identify_targets(&self.nl_query, &schema) } else { self.target_tables.clone() };
        let reference = match &self.reference {
            None => None,
            Some(r) => {
                let mut tables = BTreeSet::new();
                for t in &r.tables {
                    tables.insert(schema.canonical(t).ok_or_else(|| SchemaError::UnknownTable(t.clone()))?.to_string());
                }
                let mut joins = BTreeSet::new();
                for j in &r.joins {
                    let (a, b) = j.split_once('=').ok_or_else(|| SchemaError::Format(format!("expected a.x = b.y, got {j:?}")))?;
                    joins.insert(JoinPair::new(parse_column_ref(&schema, a)?, parse_column_ref(&schema, b)?));
                }
                Some(ReferencePlan { tables, joins })
            }
        };
        let task = QueryTask {
            id: self.id.clone(),
            nl_query: self.nl_query.clone(),
            schema,
            target_tables,
            filters: self.filters.clone(),
            reference,
        };
        task.validate()?;
        Ok(task)
    }
}

/// Reads a JSON array of [`QueryTaskFile`]s and resolves each against
/// `schemas`.
pub fn load_query_tasks(path: &Path, schemas: &[Schema]) -> Result<Vec<QueryTask>, SchemaError> {
    let text = std::fs::read_to_string(path).map_err(|e| SchemaError::Format(format!("{}: {e}", path.display())))?;
    let files: Vec<QueryTaskFile> = serde_json::from_str(&text).map_err(|e| SchemaError::Format(format!("{}: {e}", path.display())))?;
    files.iter().map(|f| f.resolve(schemas)).collect()
}

/// Tables whose name, or name without a trailing `s`, appears among the
/// query's words (underscores read as spaces). Order follows the query.
pub fn identify_targets(nl_query: &str, schema: &Schema) -> Vec<String> {
    let words: Vec<String> = nl_query
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| {
            let w = w.to_lowercase();
            w.strip_suffix('s').filter(|s| s.len() > 2).map(str::to_string).unwrap_or(w)
        })
        .collect();
    let mut found: Vec<(usize, String)> = Vec::new();
    for t in &schema.tables {
        let parts: Vec<String> = t
            .name
            .to_lowercase()
            .split('_')
            .map(|p| p.strip_suffix('s').filter(|s| s.len() > 2).map(str::to_string).unwrap_or_else(|| p.to_string()))
            .collect();
        let hit = (0..words.len()).find(|&i| words[i..].starts_with(&parts));
        if let Some(i) = hit {
            found.push((i, t.name.clone()));
        }
    }
    found.sort();
    found.into_iter().map(|(_, t)| t).collect()
}

/// Full column lists of a set of tables plus the foreign keys among them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaSlice {
    pub tables: Vec<TableSchema>,
    pub foreign_keys: Vec<ForeignKey>,
}

impl SchemaSlice {
    pub fn whole(schema: &Schema) -> Self {
        SchemaSlice { tables: schema.tables.clone(), foreign_keys: schema.foreign_keys.clone() }
    }

    pub fn table_names(&self) -> Vec<&str> {
        self.tables.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for t in &self.tables {
            let cols: Vec<String> = t
                .columns
                .iter()
                .map(|c| format!("{} {}{}", c.name, c.type_tag, if c.primary_key { " primary key" } else { "" }))
                .collect();
            out.push_str(&format!("TABLE {} ({})\n", t.name, cols.join(", ")));
        }
        for fk in &self.foreign_keys {
            out.push_str(&format!("FOREIGN KEY {fk}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subtask {
    pub index: usize,
    pub bag: usize,
    pub tables: Vec<String>,
    pub visible: SchemaSlice,
    /// Tables shared with the parent subtask.
    pub separator_tables: Vec<String>,
    /// CTEs of ancestor subtasks that share a separator table.
    pub prior_ctes: Vec<String>,
    pub cte_name: String,
    pub filters: Vec<Filter>,
}

/// How the final statement joins the CTEs: each non-root CTE joins the
/// accumulated result on the key columns of its separator tables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeStep {
    pub ctes: Vec<String>,
    pub joins: Vec<CteJoin>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CteJoin {
    pub cte: String,
    pub using: Vec<String>,
}

impl MergeStep {
    pub fn final_select(&self) -> String {
        let Some(first) = self.ctes.first() else {
            return String::new();
        };
        let mut sql = format!("SELECT * FROM {first}");
        for j in &self.joins {
            if j.using.is_empty() {
                sql.push_str(&format!(" CROSS JOIN {}", j.cte));
            } else {
                sql.push_str(&format!(" JOIN {} USING ({})", j.cte, j.using.join(", ")));
            }
        }
        sql
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowPlan {
    pub task_id: String,
    pub pruned: SchemaGraph,
    pub decomposition: TreeDecomposition,
    pub subtasks: Vec<Subtask>,
    pub merge: MergeStep,
}

impl WorkflowPlan {
    pub fn width(&self) -> i64 {
        self.decomposition.width()
    }
}

pub fn plan_workflow(task: &QueryTask) -> Result<WorkflowPlan, SchemaError> {
    task.validate()?;
    let graph = build_schema_graph(&task.schema)?;
    let targets = resolve_targets(&graph, &task.target_tables)?;
    let pruned = prune_to_connecting_subgraph(&graph, &targets)?;
    let primal = pruned.primal();
    let td = if pruned.tables.len() <= PLAN_EXACT_LIMIT {
        decompose_exact(&primal, None).map_err(|e: TdError| SchemaError::Decomposition(e.to_string()))?
    } else {
        decompose_greedy(&primal, Heuristic::MinFill)
    };
    let name = |v: VarId| pruned.tables[v as usize].clone();
    let target_rank: BTreeMap<&str, usize> = targets.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let root = td
        .bags()
        .iter()
        .min_by_key(|b| {
            let ranks: Vec<usize> = b.vertices.iter().filter_map(|&v| target_rank.get(pruned.tables[v as usize].as_str()).copied()).collect();
            (std::cmp::Reverse(ranks.len()), ranks.iter().min().copied().unwrap_or(usize::MAX), b.id)
        })
        .map(|b| b.id)
        .unwrap_or(0);
    let traversal = traversal_from(&td, root);

    let cte_of: BTreeMap<usize, String> =
        traversal.steps.iter().enumerate().map(|(i, s)| (s.bag, format!("cte_{}", i + 1))).collect();
    let parent_of: BTreeMap<usize, Option<usize>> = traversal.steps.iter().map(|s| (s.bag, s.parent)).collect();
    let ordered = |set: &BTreeSet<VarId>| -> Vec<String> { set.iter().map(|&v| name(v)).collect() };
    let mut subtasks = Vec::with_capacity(traversal.steps.len());
    let mut joins = Vec::new();
    for (index, step) in traversal.steps.iter().enumerate() {
        let bag = &td.bags()[step.bag].vertices;
        let tables = ordered(bag);
        let separator_tables = ordered(&step.separator);
        let mut ancestors = Vec::new();
        let mut cur = step.parent;
        while let Some(p) = cur {
            if td.bags()[p].vertices.intersection(&step.separator).next().is_some() {
                ancestors.push(cte_of[&p].clone());
            }
            cur = parent_of[&p];
        }
        ancestors.reverse();
        let in_bag = |t: &str| tables.iter().any(|x| x.eq_ignore_ascii_case(t));
        let visible = SchemaSlice {
            tables: tables.iter().map(|t| task.schema.table(t).expect("pruned tables exist").clone()).collect(),
            foreign_keys: pruned
                .edges
                .iter()
                .filter(|e| in_bag(&e.tables.0) && in_bag(&e.tables.1))
                .flat_map(|e| e.columns.iter().cloned())
                .collect(),
        };
        let filters = task.filters.iter().filter(|f| in_bag(&f.table)).cloned().collect();
        if step.parent.is_some() {
            let using: BTreeSet<String> = separator_tables
                .iter()
                .flat_map(|t| task.schema.table(t).expect("exists").key_columns().into_iter().map(str::to_string))
                .collect();
            joins.push(CteJoin { cte: cte_of[&step.bag].clone(), using: using.into_iter().collect() });
        }
        subtasks.push(Subtask {
            index,
            bag: step.bag,
            tables,
            visible,
            separator_tables,
            prior_ctes: ancestors,
            cte_name: cte_of[&step.bag].clone(),
            filters,
        });
    }
    let merge = MergeStep { ctes: subtasks.iter().map(|s| s.cte_name.clone()).collect(), joins };
    Ok(WorkflowPlan { task_id: task.id.clone(), pruned, decomposition: td, subtasks, merge })
}

// ---------------------------------------------------------------------------
// SQL text

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident { text: String, quoted: bool },
    Str,
    Num,
    Sym(char),
    Op,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Token {
    tok: Tok,
    span: Range<usize>,
}

impl Token {
    fn word(&self) -> Option<&str> {
        match &self.tok {
            Tok::Ident { text, .. } => Some(text),
            _ => None,
        }
    }

    fn keyword(&self, kw: &str) -> bool {
        matches!(&self.tok, Tok::Ident { text, quoted: false } if text.eq_ignore_ascii_case(kw))
    }
}

const KEYWORDS: &[&str] = &[
    "select", "from", "where", "join", "inner", "left", "right", "full", "outer", "cross", "natural", "on", "using",
    "group", "order", "by", "having", "limit", "offset", "union", "intersect", "except", "as", "with", "recursive",
    "and", "or", "not", "in", "is", "null", "like", "between", "case", "when", "then", "else", "end", "distinct",
    "all", "asc", "desc", "exists",
];

fn is_keyword(t: &Token) -> bool {
    matches!(&t.tok, Tok::Ident { text, quoted: false } if KEYWORDS.contains(&text.to_ascii_lowercase().as_str()))
}

fn tokenize(sql: &str) -> Result<Vec<Token>, String> {
    let bytes = sql.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let start = i;
        if c.is_whitespace() {
            i += 1;
        } else if sql[i..].starts_with("--") {
            i = sql[i..].find('\n').map_or(bytes.len(), |j| i + j);
        } else if sql[i..].starts_with("/*") {
            i = sql[i + 2..].find("*/").map(|j| i + 2 + j + 2).ok_or("unterminated comment")?;
        } else if c == '\'' {
            i += 1;
            loop {
                match bytes.get(i) {
                    None => return Err("unterminated string literal".into()),
                    Some(b'\'') if bytes.get(i + 1) == Some(&b'\'') => i += 2,
                    Some(b'\'') => break,
                    Some(_) => i += 1,
                }
            }
            i += 1;
            out.push(Token { tok: Tok::Str, span: start..i });
        } else if c == '"' || c == '`' {
            let end = sql[i + 1..].find(c).ok_or("unterminated quoted identifier")?;
            let text = sql[i + 1..i + 1 + end].to_string();
            i += end + 2;
            out.push(Token { tok: Tok::Ident { text, quoted: true }, span: start..i });
        } else if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'$') {
                i += 1;
            }
            out.push(Token { tok: Tok::Ident { text: sql[start..i].to_string(), quoted: false }, span: start..i });
        } else if c.is_ascii_digit() {
            while i < bytes.len() && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'.') {
                i += 1;
            }
            out.push(Token { tok: Tok::Num, span: start..i });
        } else if ["<=", ">=", "<>", "!=", "||"].iter().any(|op| sql[i..].starts_with(op)) {
            i += 2;
            out.push(Token { tok: Tok::Op, span: start..i });
        } else if "(),.;*=<>+-/%".contains(c) {
            i += 1;
            out.push(Token { tok: Tok::Sym(c), span: start..i });
        } else if !c.is_ascii() {
            let len = sql[i..].chars().next().map_or(1, char::len_utf8);
            return Err(format!("unexpected character {:?}", &sql[i..i + len]));
        } else {
            return Err(format!("unexpected character {c:?}"));
        }
    }
    let mut depth = 0i64;
    for t in &out {
        match t.tok {
            Tok::Sym('(') => depth += 1,
            Tok::Sym(')') => {
                depth -= 1;
                if depth < 0 {
                    return Err("unbalanced parentheses".into());
                }
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err("unbalanced parentheses".into());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct TableRef {
    name: String,
    alias: Option<String>,
}

/// Relations named after FROM / JOIN, skipping subqueries.
fn table_refs(tokens: &[Token]) -> Vec<TableRef> {
    let mut refs = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let from = tokens[i].keyword("from");
        if from || tokens[i].keyword("join") {
            let mut j = i + 1;
            while let Some(word) = tokens.get(j).filter(|t| !is_keyword(t)).and_then(Token::word) {
                let mut name = word.to_string();
                j += 1;
                while tokens.get(j).is_some_and(|t| t.tok == Tok::Sym('.')) {
                    if let Some(w) = tokens.get(j + 1).and_then(Token::word) {
                        name = w.to_string();
                    }
                    j += 2;
                }
                let mut alias = None;
                if tokens.get(j).is_some_and(|t| t.keyword("as")) {
                    alias = tokens.get(j + 1).and_then(Token::word).map(str::to_string);
                    j += 2;
                } else if let Some(t) = tokens.get(j).filter(|t| !is_keyword(t)) {
                    if let Some(w) = t.word() {
                        alias = Some(w.to_string());
                        j += 1;
                    }
                }
                refs.push(TableRef { name, alias });
                if from && tokens.get(j).is_some_and(|t| t.tok == Tok::Sym(',')) {
                    j += 1;
                    continue;
                }
                break;
            }
            i = j.max(i + 1);
        } else {
            i += 1;
        }
    }
    refs
}

/// `a.x = b.y` comparisons, as (qualifier, column) pairs.
fn equalities(tokens: &[Token]) -> Vec<((String, String), (String, String))> {
    let qualified = |i: usize| -> Option<(String, String)> {
        let q = tokens.get(i)?.word()?;
        (tokens.get(i + 1)?.tok == Tok::Sym('.')).then_some(())?;
        let c = tokens.get(i + 2)?.word()?;
        Some((q.to_string(), c.to_string()))
    };
    let mut out = Vec::new();
    for i in 0..tokens.len() {
        if let (Some(a), Some(eq)) = (qualified(i), tokens.get(i + 3)) {
            if eq.tok == Tok::Sym('=') {
                if let Some(b) = qualified(i + 4) {
                    if i == 0 || tokens[i - 1].tok != Tok::Sym('.') {
                        out.push((a, b));
                    }
                }
            }
        }
    }
    out
}

/// A WITH list split into (name, body token range) plus the main statement.
type WithSplit = (Vec<(String, Range<usize>)>, Range<usize>);

fn split_with(tokens: &[Token]) -> Result<WithSplit, String> {
    if !tokens.first().is_some_and(|t| t.keyword("with")) {
        return Ok((Vec::new(), 0..tokens.len()));
    }
    let mut i = 1;
    if tokens.get(i).is_some_and(|t| t.keyword("recursive")) {
        i += 1;
    }
    let mut ctes = Vec::new();
    loop {
        let name = tokens.get(i).and_then(Token::word).ok_or("expected a CTE name")?.to_string();
        i += 1;
        if tokens.get(i).is_some_and(|t| t.tok == Tok::Sym('(')) {
            i = matching(tokens, i)? + 1;
        }
        if !tokens.get(i).is_some_and(|t| t.keyword("as")) {
            return Err(format!("expected AS after CTE {name}"));
        }
        i += 1;
        if !tokens.get(i).is_some_and(|t| t.tok == Tok::Sym('(')) {
            return Err(format!("expected ( after {name} AS"));
        }
        let close = matching(tokens, i)?;
        ctes.push((name, i + 1..close));
        i = close + 1;
        if tokens.get(i).is_some_and(|t| t.tok == Tok::Sym(',')) {
            i += 1;
        } else {
            break;
        }
    }
    Ok((ctes, i..tokens.len()))
}

fn matching(tokens: &[Token], open: usize) -> Result<usize, String> {
    let mut depth = 0;
    for (j, t) in tokens.iter().enumerate().skip(open) {
        match t.tok {
            Tok::Sym('(') => depth += 1,
            Tok::Sym(')') => {
                depth -= 1;
                if depth == 0 {
                    return Ok(j);
                }
            }
            _ => {}
        }
    }
    Err("unbalanced parentheses".into())
}

/// Base tables and foreign-key-style join columns of a statement.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlStructure {
    pub tables: BTreeSet<String>,
    pub joins: BTreeSet<JoinPair>,
    pub ctes: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SqlError {
    #[error("syntax: {message}")]
    Syntax { message: String },
    #[error("unknown table or CTE {name}")]
    UnknownIdentifier { name: String },
}

/// Extracts the base tables and the `a.x = b.y` joins between base tables
/// (through aliases) from a statement with an optional WITH list. Every
/// relation must be a schema table or one of the statement's CTEs.
pub fn analyze_sql(sql: &str, schema: &Schema) -> Result<SqlStructure, SqlError> {
    let tokens = tokenize(sql).map_err(|message| SqlError::Syntax { message })?;
    if !tokens.iter().any(|t| t.keyword("select")) {
        return Err(SqlError::Syntax { message: "no SELECT".into() });
    }
    let (ctes, main) = split_with(&tokens).map_err(|message| SqlError::Syntax { message })?;
    let cte_names: BTreeSet<String> = ctes.iter().map(|(n, _)| n.to_ascii_lowercase()).collect();
    let mut out = SqlStructure { ctes: ctes.iter().map(|(n, _)| n.clone()).collect(), ..Default::default() };
    let segments: Vec<Range<usize>> = ctes.iter().map(|(_, r)| r.clone()).chain(std::iter::once(main)).collect();
    for seg in segments {
        let toks = &tokens[seg];
        let mut alias: BTreeMap<String, Option<String>> = BTreeMap::new();
        for r in table_refs(toks) {
            let base = if cte_names.contains(&r.name.to_ascii_lowercase()) {
                None
            } else {
                let t = schema.canonical(&r.name).ok_or_else(|| SqlError::UnknownIdentifier { name: r.name.clone() })?;
                out.tables.insert(t.to_string());
                Some(t.to_string())
            };
            alias.insert(r.name.to_ascii_lowercase(), base.clone());
            if let Some(a) = r.alias {
                alias.insert(a.to_ascii_lowercase(), base);
            }
        }
        for ((qa, ca), (qb, cb)) in equalities(toks) {
            let resolve = |q: &str, c: &str| -> Option<ColumnRef> {
                let table = alias.get(&q.to_ascii_lowercase())?.as_ref()?;
                let col = schema.table(table)?.column(c).map_or(c.to_string(), |c| c.name.clone());
                Some(ColumnRef { table: table.clone(), column: col })
            };
            if let (Some(a), Some(b)) = (resolve(&qa, &ca), resolve(&qb, &cb)) {
                if a.table != b.table {
                    out.joins.insert(JoinPair::new(a, b));
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralScore {
    pub table_match: bool,
    pub join_match: bool,
    pub table_jaccard: f64,
    pub join_jaccard: f64,
    pub missing_tables: Vec<String>,
    pub extra_tables: Vec<String>,
    pub missing_joins: Vec<JoinPair>,
    pub extra_joins: Vec<JoinPair>,
}

impl StructuralScore {
    pub fn exact(&self) -> bool {
        self.table_match && self.join_match
    }

    fn rank(&self) -> (bool, f64) {
        (self.exact(), self.table_jaccard + self.join_jaccard)
    }
}

fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

pub fn structural_score(found: &SqlStructure, reference: &ReferencePlan) -> StructuralScore {
    StructuralScore {
        table_match: found.tables == reference.tables,
        join_match: found.joins == reference.joins,
        table_jaccard: jaccard(&found.tables, &reference.tables),
        join_jaccard: jaccard(&found.joins, &reference.joins),
        missing_tables: reference.tables.difference(&found.tables).cloned().collect(),
        extra_tables: found.tables.difference(&reference.tables).cloned().collect(),
        missing_joins: reference.joins.difference(&found.joins).cloned().collect(),
        extra_joins: found.joins.difference(&reference.joins).cloned().collect(),
    }
}

// ---------------------------------------------------------------------------
// Assembly

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CteFragment {
    pub name: String,
    pub sql: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AssemblyError {
    #[error("expected {expected} fragments, got {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("fragment {fragment:?}: {message}")]
    Syntax { fragment: Option<usize>, message: String },
    #[error("fragment {fragment:?} references unknown table or CTE {name}")]
    UnknownIdentifier { fragment: Option<usize>, name: String },
    #[error("fragment {fragment:?} references {name}, which it cannot see")]
    Visibility { fragment: Option<usize>, name: String },
    #[error("fragment {fragment} never uses its table {table}")]
    MissingTable { fragment: usize, table: String },
    #[error("circular CTE dependency among {0:?}")]
    Circular(Vec<String>),
    #[error("no free name for CTE {0}")]
    NameCollision(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembledSql {
    pub sql: String,
    /// CTE names in WITH order.
    pub order: Vec<String>,
    /// (original, new) for every renamed fragment.
    pub renamed: Vec<(String, String)>,
}

/// Rewrites bare identifiers through `names` (lowercase key to new name).
fn rewrite(sql: &str, tokens: &[Token], names: &BTreeMap<String, String>) -> String {
    let mut out = String::with_capacity(sql.len());
    let mut last = 0;
    for t in tokens {
        if let Tok::Ident { text, quoted: false } = &t.tok {
            if let Some(new) = names.get(&text.to_ascii_lowercase()) {
                if new != text {
                    out.push_str(&sql[last..t.span.start]);
                    out.push_str(new);
                    last = t.span.end;
                }
            }
        }
    }
    out.push_str(&sql[last..]);
    out
}

/// Merges one fragment per subtask into a single `WITH ... SELECT ...`.
///
/// Fragment names that repeat an earlier one get `_2`, `_3`, ... and later
/// references follow the newest definition. A reference resolves to the
/// latest definition before the fragment, or else to the first after it;
/// CTEs are ordered by dependency, subtask order breaking ties. Each
/// fragment may only use its subtask's tables and prior CTEs and must use
/// every table of its subtask (separator tables may come through a prior
/// CTE); the final select may use the pruned tables and the CTEs. Violations
/// are returned as errors.
pub fn assemble_sql(plan: &WorkflowPlan, fragments: &[CteFragment], final_select: &str) -> Result<AssembledSql, AssemblyError> {
    if fragments.len() != plan.subtasks.len() {
        return Err(AssemblyError::CountMismatch { expected: plan.subtasks.len(), found: fragments.len() });
    }
    let syntax = |fragment: Option<usize>| move |message: String| AssemblyError::Syntax { fragment, message };

    // final names
    let mut finals: Vec<String> = Vec::with_capacity(fragments.len());
    let mut renamed = Vec::new();
    for f in fragments {
        let base = f.name.trim();
        if base.is_empty() || !base.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') || base.starts_with(|c: char| c.is_ascii_digit()) {
            return Err(AssemblyError::Syntax { fragment: Some(finals.len()), message: format!("bad CTE name {base:?}") });
        }
        let taken = |n: &str| finals.iter().any(|x| x.eq_ignore_ascii_case(n)) || plan.pruned.tables.iter().any(|t| t.eq_ignore_ascii_case(n));
        let mut name = base.to_string();
        if taken(&name) {
            name = (2..=RENAME_BUDGET + 1)
                .map(|k| format!("{base}_{k}"))
                .find(|n| !taken(n))
                .ok_or_else(|| AssemblyError::NameCollision(base.to_string()))?;
            renamed.push((base.to_string(), name.clone()));
        }
        finals.push(name);
    }

    let resolve = |name: &str, at: usize| -> Option<usize> {
        let lower = name.to_ascii_lowercase();
        let matches: Vec<usize> = (0..fragments.len()).filter(|&j| fragments[j].name.trim().eq_ignore_ascii_case(&lower)).collect();
        matches.iter().rev().find(|&&j| j < at).or_else(|| matches.iter().find(|&&j| j >= at)).copied()
    };
    let bindings_at = |at: usize| -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        for f in fragments {
            if let Some(j) = resolve(&f.name, at) {
                map.insert(f.name.trim().to_ascii_lowercase(), finals[j].clone());
            }
        }
        map
    };

    let mut bodies = Vec::with_capacity(fragments.len());
    let mut deps: Vec<BTreeSet<usize>> = Vec::with_capacity(fragments.len());
    let mut uses: Vec<Vec<TableRef>> = Vec::with_capacity(fragments.len());
    for (k, f) in fragments.iter().enumerate() {
        let tokens = tokenize(&f.sql).map_err(syntax(Some(k)))?;
        if !tokens.iter().any(|t| t.keyword("select")) {
            return Err(AssemblyError::Syntax { fragment: Some(k), message: "no SELECT".into() });
        }
        let refs = table_refs(&tokens);
        let mut d = BTreeSet::new();
        for r in &refs {
            if let Some(j) = resolve(&r.name, k) {
                d.insert(j);
            }
        }
        bodies.push(rewrite(&f.sql, &tokens, &bindings_at(k)).trim().trim_end_matches(';').trim().to_string());
        deps.push(d);
        uses.push(refs);
    }

    // dependency order, lowest index first among ready fragments
    let mut order = Vec::with_capacity(fragments.len());
    let mut placed = vec![false; fragments.len()];
    while order.len() < fragments.len() {
        let ready = (0..fragments.len()).find(|&k| !placed[k] && deps[k].iter().all(|&j| placed[j] && j != k));
        match ready {
            Some(k) => {
                placed[k] = true;
                order.push(k);
            }
            None => {
                let stuck = (0..fragments.len()).filter(|&k| !placed[k]).map(|k| finals[k].clone()).collect();
                return Err(AssemblyError::Circular(stuck));
            }
        }
    }

    for (k, sub) in plan.subtasks.iter().enumerate() {
        let mut seen_tables = BTreeSet::new();
        let mut seen_ctes = BTreeSet::new();
        for r in &uses[k] {
            if let Some(j) = resolve(&r.name, k) {
                let cte = &plan.subtasks[j].cte_name;
                if !sub.prior_ctes.contains(cte) {
                    return Err(AssemblyError::Visibility { fragment: Some(k), name: r.name.clone() });
                }
                seen_ctes.insert(j);
            } else if let Some(t) = plan.pruned.tables.iter().find(|t| t.eq_ignore_ascii_case(&r.name)).or_else(|| {
                sub.tables.iter().find(|t| t.eq_ignore_ascii_case(&r.name))
            }) {
                if !sub.tables.contains(t) {
                    return Err(AssemblyError::Visibility { fragment: Some(k), name: r.name.clone() });
                }
                seen_tables.insert(t.clone());
            } else if fragments.iter().any(|f| f.name.trim().eq_ignore_ascii_case(&r.name)) {
                return Err(AssemblyError::Visibility { fragment: Some(k), name: r.name.clone() });
            } else {
                return Err(AssemblyError::UnknownIdentifier { fragment: Some(k), name: r.name.clone() });
            }
        }
        for t in &sub.tables {
            let via_cte = sub.separator_tables.contains(t)
                && seen_ctes.iter().any(|&j| plan.subtasks[j].tables.contains(t));
            if !seen_tables.contains(t) && !via_cte {
                return Err(AssemblyError::MissingTable { fragment: k, table: t.clone() });
            }
        }
    }

    let end = fragments.len();
    let tokens = tokenize(final_select).map_err(syntax(None))?;
    if !tokens.iter().any(|t| t.keyword("select")) {
        return Err(AssemblyError::Syntax { fragment: None, message: "no SELECT".into() });
    }
    for r in table_refs(&tokens) {
        let known_cte = resolve(&r.name, end).is_some();
        let pruned = plan.pruned.tables.iter().any(|t| t.eq_ignore_ascii_case(&r.name));
        if !known_cte && !pruned {
            return Err(AssemblyError::UnknownIdentifier { fragment: None, name: r.name.clone() });
        }
    }
    let main = rewrite(final_select, &tokens, &bindings_at(end)).trim().trim_end_matches(';').trim().to_string();

    let with: Vec<String> = order.iter().map(|&k| format!("{} AS (\n  {}\n)", finals[k], bodies[k])).collect();
    let sql = if with.is_empty() { main } else { format!("WITH {}\n{}", with.join(",\n"), main) };
    Ok(AssembledSql { sql, order: order.iter().map(|&k| finals[k].clone()).collect(), renamed })
}

// ---------------------------------------------------------------------------
// Agents and episodes

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlRequest {
    pub round: usize,
    pub trajectory: usize,
    pub nl_query: String,
    pub target_tables: Vec<String>,
    pub visible: SchemaSlice,
    /// Name to give the CTE; absent when the whole query is requested.
    pub cte_name: Option<String>,
    pub separator_tables: Vec<String>,
    pub prior_ctes: Vec<CteFragment>,
    pub filters: Vec<Filter>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlResponse {
    pub sql: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_reply: Option<String>,
}

pub trait SqlAgent: Send + Sync {
    fn name(&self) -> String;
    fn respond(&self, request: &SqlRequest) -> Result<SqlResponse, AgentError>;
}

/// Joins the visible tables along their foreign keys. For a whole-schema
/// request the schema is first pruned to the target tables.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedSqlAgent;

impl SqlAgent for ScriptedSqlAgent {
    fn name(&self) -> String {
        "scripted".into()
    }

    fn respond(&self, request: &SqlRequest) -> Result<SqlResponse, AgentError> {
        Ok(scripted_sql_agent(request))
    }
}

fn slice_graph(slice: &SchemaSlice) -> SchemaGraph {
    let mut edges: BTreeMap<(String, String), Vec<ForeignKey>> = BTreeMap::new();
    for fk in &slice.foreign_keys {
        edges.entry(pair(&fk.from_table, &fk.to_table)).or_default().push(fk.clone());
    }
    SchemaGraph {
        tables: slice.tables.iter().map(|t| t.name.clone()).collect(),
        edges: edges.into_iter().map(|(tables, columns)| JoinEdge { tables, columns }).collect(),
    }
}

/// `SELECT * FROM a JOIN b ON ... JOIN c ON ...`, visiting tables breadth
/// first from `start` and joining each on every foreign key to the tables
/// already joined; unreachable tables are cross joined.
pub fn join_query(graph: &SchemaGraph, start: &str) -> String {
    let mut order = vec![start.to_string()];
    let mut seen = BTreeSet::from([start.to_string()]);
    let mut queue = VecDeque::from([start.to_string()]);
    loop {
        while let Some(t) = queue.pop_front() {
            for n in graph.neighbors(&t) {
                if seen.insert(n.to_string()) {
                    order.push(n.to_string());
                    queue.push_back(n.to_string());
                }
            }
        }
        match graph.tables.iter().find(|t| !seen.contains(*t)) {
            Some(t) => {
                seen.insert(t.clone());
                order.push(t.clone());
                queue.push_back(t.clone());
            }
            None => break,
        }
    }
    let mut sql = format!("SELECT * FROM {}", order[0]);
    for (i, t) in order.iter().enumerate().skip(1) {
        let conds: Vec<String> = order[..i]
            .iter()
            .filter_map(|p| graph.edge(p, t))
            .flat_map(|e| e.columns.iter())
            .map(|fk| format!("{}.{} = {}.{}", fk.from_table, fk.from_column, fk.to_table, fk.to_column))
            .collect();
        if conds.is_empty() {
            sql.push_str(&format!(" CROSS JOIN {t}"));
        } else {
            sql.push_str(&format!(" JOIN {t} ON {}", conds.join(" AND ")));
        }
    }
    sql
}

pub fn scripted_sql_agent(request: &SqlRequest) -> SqlResponse {
    let graph = slice_graph(&request.visible);
    if graph.tables.is_empty() {
        return SqlResponse { rationale: Some("no visible tables".into()), ..Default::default() };
    }
    if request.cte_name.is_some() {
        let start = request.separator_tables.first().unwrap_or(&graph.tables[0]).clone();
        return SqlResponse { sql: join_query(&graph, &start), ..Default::default() };
    }
    match prune_to_connecting_subgraph(&graph, &request.target_tables) {
        Ok(pruned) => {
            let start = pruned.tables.iter().find(|t| t.eq_ignore_ascii_case(&request.target_tables[0])).cloned();
            let start = start.unwrap_or_else(|| pruned.tables[0].clone());
            SqlResponse { sql: join_query(&pruned, &start), ..Default::default() }
        }
        Err(e) => SqlResponse { rationale: Some(e.to_string()), ..Default::default() },
    }
}

/// Chat-completions client for SQL requests. Replies may wrap the query in
/// a fenced block or in `name AS ( ... )`.
pub struct RemoteSqlAgent {
    remote: RemoteAgent,
    template: String,
}

impl RemoteSqlAgent {
    pub fn new(remote: RemoteAgent, template: impl Into<String>) -> Self {
        RemoteSqlAgent { remote, template: template.into() }
    }
}

impl SqlAgent for RemoteSqlAgent {
    fn name(&self) -> String {
        format!("remote({})", self.remote.config().model)
    }

    fn respond(&self, request: &SqlRequest) -> Result<SqlResponse, AgentError> {
        let prompt = render_sql_prompt(&self.template, request);
        let retries = self.remote.config().retries;
        let mut last_raw = String::new();
        for attempt in 0..=retries {
            let (content, body) = self.remote.complete(&prompt)?;
            last_raw = content.clone().unwrap_or(body);
            if let Some(sql) = content.as_deref().and_then(|c| extract_sql(c, request.cte_name.as_deref())) {
                return Ok(SqlResponse {
                    sql,
                    rationale: (attempt > 0).then(|| format!("parsed on attempt {}", attempt + 1)),
                    raw_reply: content,
                });
            }
        }
        Err(AgentError::Parse { attempts: retries + 1, raw: last_raw })
    }
}

/// Fills `{{query}}`, `{{targets}}`, `{{schema}}`, `{{ctes}}`, `{{cte_name}}`
/// and `{{filters}}`.
pub fn render_sql_prompt(template: &str, request: &SqlRequest) -> String {
    let ctes = if request.prior_ctes.is_empty() {
        "(none)".to_string()
    } else {
        request.prior_ctes.iter().map(|c| format!("{} AS ({})", c.name, c.sql)).collect::<Vec<_>>().join("\n")
    };
    let filters = if request.filters.is_empty() {
        "(none)".to_string()
    } else {
        request.filters.iter().map(|f| format!("{}: {}", f.table, f.condition)).collect::<Vec<_>>().join("\n")
    };
    let task = match &request.cte_name {
        Some(name) => format!("Write the body of a common table expression named {name} over these tables only."),
        None => "Write one complete SQL query.".to_string(),
    };
    template
        .replace("{{query}}", &request.nl_query)
        .replace("{{targets}}", &request.target_tables.join(", "))
        .replace("{{schema}}", request.visible.render().trim_end())
        .replace("{{ctes}}", &ctes)
        .replace("{{cte_name}}", &task)
        .replace("{{filters}}", &filters)
}

/// The SQL in a model reply, or `None` when there is no SELECT.
pub fn extract_sql(reply: &str, cte_name: Option<&str>) -> Option<String> {
    let mut text = reply.trim();
    if let Some(start) = text.find("```") {
        let rest = &text[start + 3..];
        let rest = rest.strip_prefix("sql").or_else(|| rest.strip_prefix("SQL")).unwrap_or(rest);
        text = rest.split("```").next().unwrap_or(rest).trim();
    }
    let lower = text.to_ascii_lowercase();
    let at = ["with", "select"].iter().filter_map(|k| lower.find(k)).min()?;
    let mut sql = text[at..].trim().trim_end_matches(';').trim().to_string();
    if let Some(name) = cte_name {
        let prefix = format!("{} as (", name.to_ascii_lowercase());
        let lower = sql.to_ascii_lowercase();
        if lower.starts_with("with ") && lower[5..].trim_start().starts_with(&prefix) && sql.ends_with(')') {
            let open = sql.find('(').expect("prefix has one");
            sql = sql[open + 1..sql.len() - 1].trim().to_string();
        }
    }
    (!sql.is_empty() && sql.to_ascii_lowercase().contains("select")).then_some(sql)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SqlStatus {
    Ok,
    AgentError,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqlRound {
    pub round: usize,
    pub request: SqlRequest,
    pub response: Option<SqlResponse>,
    pub error: Option<AgentError>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryComplexity {
    pub schema_tables: usize,
    pub targets: usize,
    pub pruned_tables: usize,
    pub treewidth: i64,
    pub bag_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nl2SqlResult {
    pub task_id: String,
    pub mode: Mode,
    pub agent: String,
    pub trajectory: usize,
    pub status: SqlStatus,
    pub sql: Option<String>,
    pub rounds: Vec<SqlRound>,
    pub error: Option<String>,
    pub structure: Option<SqlStructure>,
    pub score: Option<StructuralScore>,
    pub complexity: QueryComplexity,
}

impl Nl2SqlResult {
    pub fn ok(&self) -> bool {
        self.status == SqlStatus::Ok
    }
}

/// Full mode asks once with the whole schema. Decomposed mode asks once per
/// subtask for a CTE, passing earlier fragments along, then assembles the
/// query. Valid SQL is scored against the task's reference plan when it has
/// one.
pub fn run_nl2sql_episode(task: &QueryTask, agent: &dyn SqlAgent, mode: Mode, trajectory: usize) -> Result<Nl2SqlResult, SchemaError> {
    let plan = plan_workflow(task)?;
    let complexity = QueryComplexity {
        schema_tables: task.schema.tables.len(),
        targets: task.target_tables.len(),
        pruned_tables: plan.pruned.tables.len(),
        treewidth: plan.width(),
        bag_count: plan.subtasks.len(),
    };
    let mut result = Nl2SqlResult {
        task_id: task.id.clone(),
        mode,
        agent: agent.name(),
        trajectory,
        status: SqlStatus::Ok,
        sql: None,
        rounds: Vec::new(),
        error: None,
        structure: None,
        score: None,
        complexity,
    };
    let base = SqlRequest {
        round: 1,
        trajectory,
        nl_query: task.nl_query.clone(),
        target_tables: task.target_tables.clone(),
        visible: SchemaSlice::whole(&task.schema),
        cte_name: None,
        separator_tables: Vec::new(),
        prior_ctes: Vec::new(),
        filters: task.filters.clone(),
    };
    let requests: Vec<SqlRequest> = match mode {
        Mode::Full => vec![base],
        Mode::Decomposed => plan
            .subtasks
            .iter()
            .map(|s| SqlRequest {
                round: s.index + 1,
                visible: s.visible.clone(),
                cte_name: Some(s.cte_name.clone()),
                separator_tables: s.separator_tables.clone(),
                filters: s.filters.clone(),
                ..base.clone()
            })
            .collect(),
    };
    let mut fragments: Vec<CteFragment> = Vec::new();
    for (k, mut request) in requests.into_iter().enumerate() {
        if mode == Mode::Decomposed {
            let prior = &plan.subtasks[k].prior_ctes;
            request.prior_ctes =
                plan.subtasks[..k].iter().zip(&fragments).filter(|(s, _)| prior.contains(&s.cte_name)).map(|(_, f)| f.clone()).collect();
        }
        match agent.respond(&request) {
            Ok(response) => {
                if let Some(name) = &request.cte_name {
                    fragments.push(CteFragment { name: name.clone(), sql: response.sql.clone() });
                }
                result.rounds.push(SqlRound { round: request.round, request, response: Some(response), error: None });
            }
            Err(e) => {
                result.status = SqlStatus::AgentError;
                result.error = Some(e.to_string());
                result.rounds.push(SqlRound { round: request.round, request, response: None, error: Some(e) });
                return Ok(result);
            }
        }
    }
    let sql = match mode {
        Mode::Full => Ok(result.rounds[0].response.as_ref().map(|r| r.sql.clone()).unwrap_or_default()),
        Mode::Decomposed => assemble_sql(&plan, &fragments, &plan.merge.final_select()).map(|a| a.sql).map_err(|e| e.to_string()),
    };
    let analyzed = sql.and_then(|s| analyze_sql(&s, &task.schema).map(|st| (s, st)).map_err(|e| e.to_string()));
    match analyzed {
        Ok((sql, structure)) => {
            result.score = task.reference.as_ref().map(|r| structural_score(&structure, r));
            result.sql = Some(sql);
            result.structure = Some(structure);
        }
        Err(e) => {
            result.status = SqlStatus::Invalid;
            result.error = Some(e);
        }
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    StructuralScore,
    FirstValid,
    NoneValid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestOf {
    pub trajectories: Vec<Nl2SqlResult>,
    pub chosen: Option<usize>,
    pub selection: Selection,
}

impl BestOf {
    pub fn best(&self) -> Option<&Nl2SqlResult> {
        self.chosen.map(|i| &self.trajectories[i])
    }
}

/// Picks the highest structural score (earliest on ties) when scores exist,
/// otherwise the first valid trajectory.
pub fn select_best(trajectories: &[Nl2SqlResult]) -> (Option<usize>, Selection) {
    let scored: Vec<(usize, (bool, f64))> =
        trajectories.iter().enumerate().filter(|(_, r)| r.ok()).filter_map(|(i, r)| r.score.as_ref().map(|s| (i, s.rank()))).collect();
    if let Some(&(first, _)) = scored.first() {
        let mut best = first;
        let mut rank = scored[0].1;
        for &(i, r) in &scored[1..] {
            if (r.0 && !rank.0) || (r.0 == rank.0 && r.1 > rank.1) {
                best = i;
                rank = r;
            }
        }
        return (Some(best), Selection::StructuralScore);
    }
    match trajectories.iter().position(Nl2SqlResult::ok) {
        Some(i) => (Some(i), Selection::FirstValid),
        None => (None, Selection::NoneValid),
    }
}

pub fn run_best_of(task: &QueryTask, agent: &dyn SqlAgent, mode: Mode, k: usize) -> Result<BestOf, SchemaError> {
    let trajectories = (0..k.max(1)).map(|t| run_nl2sql_episode(task, agent, mode, t)).collect::<Result<Vec<_>, _>>()?;
    let (chosen, selection) = select_best(&trajectories);
    Ok(BestOf { trajectories, chosen, selection })
}
