#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use bagwise::cnf::{serialize_dimacs, Clause, CnfFormula, Literal, MappingEntry, SatTaskFile};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture_dir(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

/// Task files of a directory, sorted by file name.
pub fn load_tasks(dir: &Path) -> Vec<(String, SatTaskFile)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
            (stem, serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap())
        })
        .collect()
}

/// Clause over `vars` whose signs make `planted` satisfy it.
fn planted_clause(vars: &[u32], planted: &[bool], rng: &mut ChaCha8Rng) -> Clause {
    let mut lits: Vec<Literal> = vars.iter().map(|&v| Literal::new(v, rng.random_bool(0.5))).collect();
    let sat = |l: &Literal| planted[l.variable() as usize - 1] == l.is_positive();
    if !lits.iter().any(sat) {
        let i = rng.random_range(0..lits.len());
        lits[i] = lits[i].negated();
    }
    Clause::new(lits)
}

fn task(id: &str, formula: &CnfFormula, story: &str) -> SatTaskFile {
    let n = formula.num_variables();
    SatTaskFile {
        id: Some(id.to_string()),
        cnf: serialize_dimacs(formula),
        story: story.to_string(),
        mapping: (1..=n).map(|v| MappingEntry { entity: format!("fact_{v}"), literal: v as i64 }).collect(),
    }
}

/// Random 3-CNF with a planted model.
pub fn planted_3cnf(id: &str, n: u32, m: usize, rng: &mut ChaCha8Rng) -> SatTaskFile {
    let planted: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let all: Vec<u32> = (1..=n).collect();
    let clauses = (0..m)
        .map(|_| {
            let vars: Vec<u32> = all.choose_multiple(rng, 3).copied().collect();
            planted_clause(&vars, &planted, rng)
        })
        .collect();
    let f = CnfFormula::new(n, clauses).unwrap();
    task(id, &f, &format!("There are {n} facts, each true or false, tied together by {m} conditions."))
}

/// Planted CNF whose primal graph is a random k-tree on `n` variables, so its
/// treewidth is exactly `k`. Every k-tree edge is covered by a clause of at
/// most three literals drawn from one clique; `extra` more clauses are drawn
/// from random cliques.
pub fn ktree_cnf(id: &str, n: u32, k: usize, extra: usize, rng: &mut ChaCha8Rng) -> SatTaskFile {
    assert!(n as usize > k);
    let planted: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let mut order: Vec<u32> = (1..=n).collect();
    order.shuffle(rng);
    let base: Vec<u32> = order[..=k].to_vec();
    let mut cliques: Vec<Vec<u32>> = vec![base.clone()];
    let mut pairs: Vec<(u32, u32)> = Vec::new();
    for i in 0..base.len() {
        for j in i + 1..base.len() {
            pairs.push((base[i], base[j]));
        }
    }
    for &v in &order[k + 1..] {
        let host = cliques.choose(rng).unwrap().clone();
        let mut sep = host.clone();
        sep.remove(rng.random_range(0..sep.len()));
        for &u in &sep {
            pairs.push((u, v));
        }
        let mut clique = sep;
        clique.push(v);
        cliques.push(clique);
    }
    let mut clauses = Vec::new();
    let mut covered: BTreeSet<(u32, u32)> = BTreeSet::new();
    let key = |a: u32, b: u32| (a.min(b), a.max(b));
    for &(a, b) in &pairs {
        if covered.contains(&key(a, b)) {
            continue;
        }
        let home = cliques.iter().find(|c| c.contains(&a) && c.contains(&b)).unwrap();
        let third: Vec<u32> = home.iter().copied().filter(|&x| x != a && x != b).collect();
        let mut vars = vec![a, b];
        if let Some(&c) = third.choose(rng) {
            vars.push(c);
        }
        for i in 0..vars.len() {
            for j in i + 1..vars.len() {
                covered.insert(key(vars[i], vars[j]));
            }
        }
        clauses.push(planted_clause(&vars, &planted, rng));
    }
    for _ in 0..extra {
        let c = cliques.choose(rng).unwrap();
        let vars: Vec<u32> = c.choose_multiple(rng, 3.min(c.len())).copied().collect();
        clauses.push(planted_clause(&vars, &planted, rng));
    }
    clauses.shuffle(rng);
    let f = CnfFormula::new(n, clauses).unwrap();
    let m = f.num_clauses();
    task(id, &f, &format!("There are {n} facts, each true or false, tied together by {m} conditions."))
}

/// Planted random 3-CNF, n from 6 to 16, 3.5 to 4.3 clauses per variable.
pub fn traversal_suite(seed: u64, count: usize) -> Vec<SatTaskFile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let n = rng.random_range(6..=16u32);
            let m = (n as f64 * rng.random_range(3.5..4.3)).round() as usize;
            planted_3cnf(&format!("rand3_{i:03}"), n, m, &mut rng)
        })
        .collect()
}

/// `per_width` k-tree instances for each treewidth 2..=6, n from 12 to 16.
pub fn treewidth_suite(seed: u64, per_width: usize) -> Vec<SatTaskFile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for k in 2..=6usize {
        for i in 0..per_width {
            let n = rng.random_range(12..=16u32);
            let extra = n as usize;
            out.push(ktree_cnf(&format!("tw{k}_{i:02}"), n, k, extra, &mut rng));
        }
    }
    out
}

pub const TRAVERSAL_SEED: u64 = 5;
pub const TRAVERSAL_COUNT: usize = 60;
pub const TREEWIDTH_SEED: u64 = 8;
pub const TREEWIDTH_PER_WIDTH: usize = 20;

pub fn write_suite(dir: &Path, tasks: &[SatTaskFile]) {
    std::fs::create_dir_all(dir).unwrap();
    for t in tasks {
        let path = dir.join(format!("{}.json", t.id.as_deref().unwrap()));
        std::fs::write(path, serde_json::to_string_pretty(t).unwrap() + "\n").unwrap();
    }
}
