use imexpeer::search::{run_search, SearchOutcome, SearchSpec};
use imexpeer::Execution;

fn small(seed: u64) -> SearchSpec {
    SearchSpec {
        multistart: 3,
        ..SearchSpec::preset("s2-seeded", seed).unwrap()
    }
}

fn fingerprint(o: &SearchOutcome) -> Vec<String> {
    o.candidates.iter().map(|c| c.tableau.to_text()).collect()
}

#[test]
fn same_seed_same_candidates() {
    let a = run_search(&small(11), Execution::Sequential).unwrap();
    let b = run_search(&small(11), Execution::Sequential).unwrap();
    assert_eq!(fingerprint(&a), fingerprint(&b));
    assert_eq!(a.evaluations, b.evaluations);
}

#[test]
fn parallel_matches_sequential() {
    let a = run_search(&small(5), Execution::Sequential).unwrap();
    let b = run_search(&small(5), Execution::Parallel).unwrap();
    assert_eq!(fingerprint(&a), fingerprint(&b));
    assert_eq!(a.evaluations, b.evaluations);
}

#[test]
fn candidates_are_certified_and_ranked() {
    let out = run_search(&small(3), Execution::Parallel).unwrap();
    assert!(!out.candidates.is_empty(), "{:?}", out.diagnostics);
    for c in &out.candidates {
        assert!(c.report.passed(), "{}", c.report);
        assert!(c.report.stage_order_ok() && c.report.superconvergent());
        assert!(c.start < 3);
    }
    assert_eq!(out.candidates.len() + out.diagnostics.len(), 3);
    for w in out.candidates.windows(2) {
        assert!(w[0].explicit_objective <= w[1].explicit_objective);
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = SearchSpec {
        multistart: 0,
        ..small(1)
    };
    assert!(run_search(&bad, Execution::Sequential).is_err());
    let bad = SearchSpec {
        stages: 5,
        ..small(1)
    };
    assert!(run_search(&bad, Execution::Sequential).is_err());
    assert!(SearchSpec::preset("s7", 1).is_err());
    assert!(SearchSpec::for_stages(1, 1).is_err());
}
