mod support;

use bagwise::cnf::SatTaskFile;
use support::*;

fn check(dir: &str, generated: Vec<SatTaskFile>) {
    let path = fixture_dir(dir);
    if std::env::var_os("BAGWISE_REGENERATE").is_some() {
        let _ = std::fs::remove_dir_all(&path);
        write_suite(&path, &generated);
    }
    let on_disk: Vec<SatTaskFile> = load_tasks(&path).into_iter().map(|(_, t)| t).collect();
    assert_eq!(on_disk, generated, "{dir} is stale; rerun with BAGWISE_REGENERATE=1");
}

#[test]
fn traversal_fixtures_match_their_generator() {
    check("satbench/traversal", traversal_suite(TRAVERSAL_SEED, TRAVERSAL_COUNT));
}

#[test]
fn treewidth_fixtures_match_their_generator() {
    check("satbench/treewidth", treewidth_suite(TREEWIDTH_SEED, TREEWIDTH_PER_WIDTH));
}
