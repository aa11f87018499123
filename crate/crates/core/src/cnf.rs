//! CNF formulas over 1-based Boolean variables, DIMACS I/O and clause
//! evaluation under partial assignments.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A literal in DIMACS numbering: variable index `>= 1` plus a polarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Literal {
    variable: u32,
    positive: bool,
}

impl Literal {
    /// # Panics
    ///
    /// If `variable == 0`.
    pub fn new(variable: u32, positive: bool) -> Self {
        assert!(variable >= 1, "DIMACS variables are 1-based");
        Literal { variable, positive }
    }

    pub fn positive(variable: u32) -> Self {
        Self::new(variable, true)
    }

    pub fn negative(variable: u32) -> Self {
        Self::new(variable, false)
    }

    /// Signed DIMACS form; `0` and values beyond `u32` are rejected.
    pub fn from_dimacs(value: i64) -> Option<Self> {
        if value == 0 {
            return None;
        }
        let variable = u32::try_from(value.unsigned_abs()).ok()?;
        Some(Literal { variable, positive: value > 0 })
    }

    pub fn to_dimacs(self) -> i64 {
        if self.positive {
            i64::from(self.variable)
        } else {
            -i64::from(self.variable)
        }
    }

    pub fn variable(self) -> u32 {
        self.variable
    }

    pub fn is_positive(self) -> bool {
        self.positive
    }

    pub fn negated(self) -> Self {
        Literal { variable: self.variable, positive: !self.positive }
    }

    /// Truth value under `assignment`, `None` when the variable is unassigned.
    pub fn value(self, assignment: &Assignment) -> Option<bool> {
        assignment.get(self.variable).map(|v| v == self.positive)
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_dimacs())
    }
}

impl Serialize for Literal {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_i64(self.to_dimacs())
    }
}

impl<'de> Deserialize<'de> for Literal {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = i64::deserialize(deserializer)?;
        Literal::from_dimacs(raw).ok_or_else(|| serde::de::Error::custom("literal 0 is not allowed"))
    }
}

/// A disjunction of literals.
///
/// Repeated literals are collapsed on construction. A clause holding both
/// `v` and `¬v` is kept but marked tautological and always evaluates true.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Clause {
    literals: Vec<Literal>,
    tautological: bool,
}

impl Clause {
    pub fn new(literals: impl IntoIterator<Item = Literal>) -> Self {
        let mut out: Vec<Literal> = Vec::new();
        for lit in literals {
            if !out.contains(&lit) {
                out.push(lit);
            }
        }
        let tautological = out.iter().any(|l| out.contains(&l.negated()));
        Clause { literals: out, tautological }
    }

    pub fn from_dimacs(values: &[i64]) -> Option<Self> {
        values
            .iter()
            .map(|&v| Literal::from_dimacs(v))
            .collect::<Option<Vec<_>>>()
            .map(Clause::new)
    }

    pub fn literals(&self) -> &[Literal] {
        &self.literals
    }

    pub fn is_tautological(&self) -> bool {
        self.tautological
    }

    pub fn is_empty(&self) -> bool {
        self.literals.is_empty()
    }

    pub fn len(&self) -> usize {
        self.literals.len()
    }

    /// Distinct variables in order of first occurrence.
    pub fn variables(&self) -> Vec<u32> {
        let mut vars = Vec::with_capacity(self.literals.len());
        for lit in &self.literals {
            if !vars.contains(&lit.variable) {
                vars.push(lit.variable);
            }
        }
        vars
    }

    pub fn status(&self, assignment: &Assignment) -> ClauseStatus {
        if self.tautological {
            return ClauseStatus::Satisfied;
        }
        let mut undetermined = false;
        for lit in &self.literals {
            match lit.value(assignment) {
                Some(true) => return ClauseStatus::Satisfied,
                Some(false) => {}
                None => undetermined = true,
            }
        }
        if undetermined {
            ClauseStatus::Undetermined
        } else {
            ClauseStatus::Violated
        }
    }

    pub fn max_variable(&self) -> u32 {
        self.literals.iter().map(|l| l.variable).max().unwrap_or(0)
    }
}

impl Serialize for Clause {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.literals.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Clause {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Ok(Clause::new(Vec::<Literal>::deserialize(deserializer)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClauseStatus {
    Satisfied,
    Violated,
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnfFormula {
    num_variables: u32,
    clauses: Vec<Clause>,
}

impl CnfFormula {
    pub fn new(num_variables: u32, clauses: Vec<Clause>) -> Result<Self, CnfError> {
        for clause in &clauses {
            let max = clause.max_variable();
            if max > num_variables {
                return Err(CnfError::VariableOutOfRange { variable: max, num_variables });
            }
        }
        Ok(CnfFormula { num_variables, clauses })
    }

    pub fn empty() -> Self {
        CnfFormula { num_variables: 0, clauses: Vec::new() }
    }

    pub fn num_variables(&self) -> u32 {
        self.num_variables
    }

    pub fn clauses(&self) -> &[Clause] {
        &self.clauses
    }

    pub fn num_clauses(&self) -> usize {
        self.clauses.len()
    }

    /// True when every variable of the formula is assigned.
    pub fn is_complete(&self, assignment: &Assignment) -> bool {
        (1..=self.num_variables).all(|v| assignment.get(v).is_some())
    }
}

/// Partial truth assignment keyed by DIMACS variable index.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Assignment {
    values: BTreeMap<u32, bool>,
}

impl Assignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, variable: u32) -> Option<bool> {
        self.values.get(&variable).copied()
    }

    /// Returns the previous value, if any.
    pub fn set(&mut self, variable: u32, value: bool) -> Option<bool> {
        self.values.insert(variable, value)
    }

    pub fn unset(&mut self, variable: u32) -> Option<bool> {
        self.values.remove(&variable)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, bool)> + '_ {
        self.values.iter().map(|(&k, &v)| (k, v))
    }

    pub fn max_variable(&self) -> Option<u32> {
        self.values.keys().next_back().copied()
    }
}

impl FromIterator<(u32, bool)> for Assignment {
    fn from_iter<T: IntoIterator<Item = (u32, bool)>>(iter: T) -> Self {
        Assignment { values: iter.into_iter().collect() }
    }
}

/// Partition of clause indices by status under one assignment.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClauseStatusReport {
    pub satisfied: Vec<usize>,
    pub violated: Vec<usize>,
    pub undetermined: Vec<usize>,
}

impl ClauseStatusReport {
    pub fn is_satisfied(&self) -> bool {
        self.violated.is_empty() && self.undetermined.is_empty()
    }

    pub fn push(&mut self, index: usize, status: ClauseStatus) {
        match status {
            ClauseStatus::Satisfied => self.satisfied.push(index),
            ClauseStatus::Violated => self.violated.push(index),
            ClauseStatus::Undetermined => self.undetermined.push(index),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CnfError {
    #[error("variable {variable} exceeds declared {num_variables}")]
    VariableOutOfRange { variable: u32, num_variables: u32 },
}

pub fn evaluate(formula: &CnfFormula, assignment: &Assignment) -> Result<ClauseStatusReport, CnfError> {
    if let Some(max) = assignment.max_variable() {
        if max > formula.num_variables {
            return Err(CnfError::VariableOutOfRange { variable: max, num_variables: formula.num_variables });
        }
    }
    let mut report = ClauseStatusReport::default();
    for (index, clause) in formula.clauses.iter().enumerate() {
        report.push(index, clause.status(assignment));
    }
    Ok(report)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("line {line}: clause data before `p cnf` header")]
    MissingHeader { line: usize },
    #[error("line {line}: malformed header `{text}`")]
    MalformedHeader { line: usize, text: String },
    #[error("line {line}: duplicate header")]
    DuplicateHeader { line: usize },
    #[error("line {line}: invalid token `{token}`")]
    InvalidToken { line: usize, token: String },
    #[error("line {line}: variable {variable} exceeds declared {declared}")]
    VariableOutOfRange { line: usize, variable: u64, declared: u32 },
    #[error("line {line}: header declares {declared} clauses but {found} were read")]
    ClauseCountMismatch { line: usize, declared: usize, found: usize },
    #[error("line {line}: clause is missing its terminating 0")]
    MissingTerminator { line: usize },
    #[error("no `p cnf` header found")]
    NoHeader,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseWarning {
    EmptyClause { line: usize, clause_index: usize },
}

impl fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseWarning::EmptyClause { line, clause_index } => {
                write!(f, "line {line}: clause {clause_index} is empty and can never be satisfied")
            }
        }
    }
}

pub fn parse_dimacs(text: &str) -> Result<CnfFormula, ParseError> {
    parse_dimacs_with_warnings(text).map(|(formula, _)| formula)
}

pub fn parse_dimacs_with_warnings(text: &str) -> Result<(CnfFormula, Vec<ParseWarning>), ParseError> {
    let mut header: Option<(u32, usize)> = None;
    let mut clauses = Vec::new();
    let mut warnings = Vec::new();
    let mut pending: Vec<Literal> = Vec::new();
    let mut pending_line = 0;
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('c') {
            continue;
        }
        // SATLIB files end with a `%` marker followed by junk.
        if trimmed.starts_with('%') {
            break;
        }
        if trimmed.starts_with('p') {
            if header.is_some() {
                return Err(ParseError::DuplicateHeader { line });
            }
            header = Some(parse_header(trimmed, line)?);
            continue;
        }
        let Some((declared_vars, _)) = header else {
            return Err(ParseError::MissingHeader { line });
        };
        for token in trimmed.split_whitespace() {
            let value: i64 = token
                .parse()
                .map_err(|_| ParseError::InvalidToken { line, token: token.to_string() })?;
            if value == 0 {
                if pending.is_empty() {
                    warnings.push(ParseWarning::EmptyClause { line, clause_index: clauses.len() });
                }
                clauses.push(Clause::new(pending.drain(..)));
                continue;
            }
            if value.unsigned_abs() > u64::from(declared_vars) {
                return Err(ParseError::VariableOutOfRange {
                    line,
                    variable: value.unsigned_abs(),
                    declared: declared_vars,
                });
            }
            if pending.is_empty() {
                pending_line = line;
            }
            pending.push(Literal::from_dimacs(value).expect("nonzero and in range"));
        }
    }

    let (num_variables, declared_clauses) = header.ok_or(ParseError::NoHeader)?;
    if !pending.is_empty() {
        return Err(ParseError::MissingTerminator { line: pending_line });
    }
    if clauses.len() != declared_clauses {
        return Err(ParseError::ClauseCountMismatch {
            line: last_line.max(1),
            declared: declared_clauses,
            found: clauses.len(),
        });
    }
    Ok((CnfFormula { num_variables, clauses }, warnings))
}

fn parse_header(text: &str, line: usize) -> Result<(u32, usize), ParseError> {
    let malformed = || ParseError::MalformedHeader { line, text: text.to_string() };
    let parts: Vec<&str> = text.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "p" || parts[1] != "cnf" {
        return Err(malformed());
    }
    let vars = parts[2].parse::<u32>().map_err(|_| malformed())?;
    let count = parts[3].parse::<usize>().map_err(|_| malformed())?;
    Ok((vars, count))
}

pub fn serialize_dimacs(formula: &CnfFormula) -> String {
    let mut out = format!("p cnf {} {}\n", formula.num_variables, formula.clauses.len());
    for clause in &formula.clauses {
        for lit in &clause.literals {
            out.push_str(&lit.to_dimacs().to_string());
            out.push(' ');
        }
        out.push_str("0\n");
    }
    out
}

/// One story entity aligned to a signed DIMACS literal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub entity: String,
    pub literal: i64,
}

/// On-disk SAT task: the CNF, its natural-language story and the entity
/// alignment. The story is opaque text handed to agents verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SatTaskFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub cnf: String,
    #[serde(default)]
    pub story: String,
    #[serde(default)]
    pub mapping: Vec<MappingEntry>,
}

impl SatTaskFile {
    pub fn formula(&self) -> Result<CnfFormula, ParseError> {
        parse_dimacs(&self.cnf)
    }
}
