use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bagwise::cnf::parse_dimacs;
use bagwise::csp::{cnf_to_csp, primal_graph};
use bagwise::treedecomp::{validate, TreeDecomposition};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn bagwise(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bagwise")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn decompose_cnf_prints_a_valid_pace_decomposition() {
    let tmp = tempfile::tempdir().unwrap();
    let cnf = "p cnf 5 4\n1 2 0\n2 3 0\n3 4 0\n4 5 -1 0\n";
    let file = tmp.path().join("f.cnf");
    std::fs::write(&file, cnf).unwrap();
    let out = bagwise(&["decompose", "--cnf", path(&file), "--method", "min-fill"]);
    assert_eq!(out.status.code(), Some(0));
    let graph = primal_graph(&cnf_to_csp(&parse_dimacs(cnf).unwrap()).unwrap());
    let td = TreeDecomposition::from_pace(&String::from_utf8(out.stdout).unwrap(), &graph).unwrap();
    assert!(validate(&graph, &td).is_empty());
    assert_eq!(td.width(), 2);
}

#[test]
fn decompose_schema_as_json() {
    let tables = fixtures().join("schemas/tables.json");
    let out = bagwise(&["decompose", "--schema", path(&tables), "--db", "concert_singer", "--targets", "singer,stadium", "--format", "json"]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["treewidth"], 1);
    assert_eq!(v["vertices"].as_array().unwrap().len(), 4);
}

#[test]
fn solve_reports_sat_and_unsat() {
    let tmp = tempfile::tempdir().unwrap();
    let sat = tmp.path().join("sat.cnf");
    let unsat = tmp.path().join("unsat.cnf");
    std::fs::write(&sat, "p cnf 2 2\n1 2 0\n-1 0\n").unwrap();
    std::fs::write(&unsat, "p cnf 1 2\n1 0\n-1 0\n").unwrap();
    for strategy in ["backtrack", "traversal"] {
        let out = bagwise(&["solve", "--cnf", path(&sat), "--strategy", strategy]);
        assert_eq!(out.status.code(), Some(0));
        assert_eq!(String::from_utf8(out.stdout).unwrap(), "s SATISFIABLE\nv -1 2 0\n");
        let out = bagwise(&["solve", "--cnf", path(&unsat), "--strategy", strategy]);
        assert_eq!(String::from_utf8(out.stdout).unwrap(), "s UNSATISFIABLE\n");
    }
}

#[test]
fn malformed_cnf_is_a_task_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.cnf");
    std::fs::write(&bad, "p cnf x\n").unwrap();
    assert_eq!(bagwise(&["solve", "--cnf", path(&bad)]).status.code(), Some(1));
    assert_eq!(bagwise(&["decompose", "--cnf", path(&bad)]).status.code(), Some(1));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(bagwise(&[]).status.code(), Some(2));
    assert_eq!(bagwise(&["launch"]).status.code(), Some(2));
    assert_eq!(bagwise(&["run-satbench", "--tasks", "x"]).status.code(), Some(2));
    assert_eq!(bagwise(&["run-satbench", "--tasks", "x", "--out", "y", "--mode", "sideways"]).status.code(), Some(2));
}

#[test]
fn smoke_run_report_and_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let smoke = fixtures().join("satbench/smoke");
    let out = bagwise(&["run-satbench", "--agent", "scripted", "--mode", "both", "--tasks", path(&smoke), "--out", path(&run)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let transcripts: Vec<_> = read_tree(&run.join("transcripts"));
    assert_eq!(transcripts.len(), 10);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["episodes"].as_array().unwrap().len(), 10);
    assert!(summary["episodes"].as_array().unwrap().iter().all(|e| e["solved"] == true));

    let csv = tmp.path().join("frontier.csv");
    assert_eq!(bagwise(&["report", "--in", path(&run), "--out", path(&csv)]).status.code(), Some(0));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 11);
    assert!(text.starts_with("task_id,mode,agent,trajectory,treewidth,bag_count,variable_count,solved,rounds\n"));
    assert!(tmp.path().join("frontier_cells.csv").exists());
    assert!(tmp.path().join("frontier_delta.csv").exists());
    assert!(tmp.path().join("frontier.gp").exists());

    let out = bagwise(&["replay", path(&run.join("transcripts"))]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8(out.stdout).unwrap().ends_with("10 of 10 transcripts verified\n"));
}

#[test]
fn replay_flags_a_tampered_transcript() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let smoke = fixtures().join("satbench/smoke");
    bagwise(&["run-satbench", "--mode", "full", "--tasks", path(&smoke), "--out", path(&run)]);
    let file = run.join("transcripts/umbrella.full.t0.jsonl");
    let text = std::fs::read_to_string(&file).unwrap();
    std::fs::write(&file, text.replace("\"status\":\"solved\"", "\"status\":\"budget_exhausted\"")).unwrap();
    let out = bagwise(&["replay", path(&file)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("MISMATCH"));
}

#[test]
fn noisy_runs_are_byte_identical_across_jobs_and_output_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let smoke = fixtures().join("satbench/smoke");
    let mut trees = Vec::new();
    for (i, jobs) in ["1", "4"].iter().enumerate() {
        let run = tmp.path().join(format!("run{i}"));
        let csv = tmp.path().join(format!("rep{i}/f.csv"));
        let args = ["run-satbench", "--agent", "noisy", "--flip-probability", "0.3", "--seed", "11", "--trajectories", "2"];
        bagwise(&[&args[..], &["--tasks", path(&smoke), "--out", path(&run), "--jobs", jobs]].concat());
        bagwise(&["report", "--in", path(&run), "--out", path(&csv)]);
        trees.push((read_tree(&run), read_tree(csv.parent().unwrap())));
    }
    assert_eq!(trees[0], trees[1]);
}

#[test]
fn nl2sql_run_writes_results_sql_and_plans() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("sql");
    let tasks = fixtures().join("schemas");
    let out = bagwise(&["run-nl2sql", "--tasks", path(&tasks), "--out", path(&out_dir), "--trajectories", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let queries: Vec<serde_json::Value> = serde_json::from_slice(&std::fs::read(tasks.join("queries.json")).unwrap()).unwrap();
    assert_eq!(read_tree(&out_dir.join("results")).len(), 2 * queries.len());
    assert_eq!(read_tree(&out_dir.join("sql")).len(), 2 * queries.len());
    assert_eq!(read_tree(&out_dir.join("plans")).len(), queries.len());
    assert!(out_dir.join("manifest.json").exists());
}
