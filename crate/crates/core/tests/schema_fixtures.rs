use std::collections::BTreeSet;
use std::path::PathBuf;

use bagwise::orchestrator::Mode;
use bagwise::schema::{
    build_schema_graph, load_query_tasks, load_spider_schemas, plan_workflow, prune_to_connecting_subgraph, run_nl2sql_episode,
    QueryTask, ReferencePlan, ScriptedSqlAgent, Schema, SchemaGraph,
};

fn fixtures() -> (Vec<Schema>, Vec<QueryTask>) {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/schemas");
    let schemas = load_spider_schemas(&dir.join("tables.json")).unwrap();
    let tasks = load_query_tasks(&dir.join("queries.json"), &schemas).unwrap();
    (schemas, tasks)
}

fn connected(g: &SchemaGraph, keep: &BTreeSet<&str>) -> bool {
    let Some(&start) = keep.iter().next() else { return true };
    let mut seen = BTreeSet::from([start]);
    let mut stack = vec![start];
    while let Some(t) = stack.pop() {
        for n in g.neighbors(t) {
            if keep.contains(n) && seen.insert(n) {
                stack.push(n);
            }
        }
    }
    seen.len() == keep.len()
}

fn brute_force_steiner(g: &SchemaGraph, targets: &BTreeSet<&str>) -> usize {
    let n = g.tables.len();
    (0u64..1 << n)
        .map(|mask| (0..n).filter(|i| mask >> i & 1 == 1).map(|i| g.tables[i].as_str()).collect::<BTreeSet<_>>())
        .filter(|s| targets.is_subset(s) && connected(g, s))
        .map(|s| s.len())
        .min()
        .unwrap()
}

#[test]
fn fixture_corpus_shape() {
    let (schemas, tasks) = fixtures();
    assert!(schemas.len() >= 20);
    let fig = schemas.iter().find(|s| s.db_id == "concert_singer").unwrap();
    let g = build_schema_graph(fig).unwrap();
    assert_eq!((g.tables.len(), g.edges.len()), (4, 3));
    let covered: BTreeSet<&str> = tasks.iter().map(|t| t.schema.db_id.as_str()).collect();
    assert_eq!(covered.len(), schemas.len());
}

#[test]
fn pruning_matches_brute_force_on_every_query() {
    let (_, tasks) = fixtures();
    for task in &tasks {
        let g = build_schema_graph(&task.schema).unwrap();
        let targets: BTreeSet<&str> = task.target_tables.iter().map(String::as_str).collect();
        let pruned = prune_to_connecting_subgraph(&g, &task.target_tables).unwrap();
        assert_eq!(pruned.tables.len(), brute_force_steiner(&g, &targets), "{}", task.id);
    }
}

#[test]
fn hand_written_references_agree_with_pruning() {
    let (_, tasks) = fixtures();
    for task in &tasks {
        let plan = plan_workflow(task).unwrap();
        assert_eq!(Some(&ReferencePlan::from_graph(&plan.pruned)), task.reference.as_ref(), "{}", task.id);
    }
}

#[test]
fn scripted_agent_reproduces_every_reference_in_both_modes() {
    let (_, tasks) = fixtures();
    for task in &tasks {
        let mut tables = Vec::new();
        for mode in [Mode::Full, Mode::Decomposed] {
            let result = run_nl2sql_episode(task, &ScriptedSqlAgent, mode, 0).unwrap();
            assert!(result.ok(), "{} {mode}: {:?}", task.id, result.error);
            let score = result.score.unwrap();
            assert!(score.exact(), "{} {mode}: {score:?}\n{}", task.id, result.sql.unwrap());
            tables.push(result.structure.unwrap().tables);
        }
        assert_eq!(tables[0], tables[1], "{}", task.id);
    }
}

#[test]
fn plans_cover_the_pruned_graph() {
    let (_, tasks) = fixtures();
    for task in &tasks {
        let plan = plan_workflow(task).unwrap();
        let covered: BTreeSet<&String> = plan.subtasks.iter().flat_map(|s| &s.tables).collect();
        assert_eq!(covered, plan.pruned.tables.iter().collect(), "{}", task.id);
        for (k, sub) in plan.subtasks.iter().enumerate() {
            for sep in &sub.separator_tables {
                assert!(plan.subtasks[..k].iter().any(|s| s.tables.contains(sep)), "{} subtask {k}", task.id);
            }
        }
        for t in &task.target_tables {
            assert!(plan.subtasks.iter().any(|s| s.tables.iter().any(|x| x.eq_ignore_ascii_case(t))));
        }
    }
}
