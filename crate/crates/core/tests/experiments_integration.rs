use imexpeer::experiments::{
    ar_mid_ladder, run_experiment, ArQuantity, ExperimentKind, ExperimentReport, ExperimentSpec,
};
use imexpeer::methods::{builtin, builtins};
use imexpeer::Execution;

fn pr_report() -> ExperimentReport {
    let spec = ExperimentSpec::new(ExperimentKind::ProtheroRobinson, builtins());
    run_experiment(&spec, Execution::Sequential).unwrap()
}

#[test]
fn prothero_robinson_errors_decrease_along_the_ladder() {
    for r in pr_report().results {
        let e: Vec<f64> = r.errors.iter().map(|e| e.unwrap()).collect();
        // the largest step may still be pre-asymptotic
        let violations: Vec<usize> = (0..e.len() - 1).filter(|&k| e[k + 1] >= e[k]).collect();
        assert!(
            violations.is_empty() || violations == [0],
            "{}: {:?}",
            r.method,
            e
        );
    }
}

#[test]
fn csv_rows_round_trip_all_digits() {
    let report = pr_report();
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(ExperimentReport::CSV_HEADER));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3 * 9);
    for (k, row) in rows.iter().enumerate() {
        let r = &report.results[k / 9];
        assert_eq!(row[0], r.method);
        assert_eq!(row[1].parse::<f64>().unwrap(), r.step_sizes[k % 9]);
        assert_eq!(row[2].parse::<f64>().unwrap(), r.errors[k % 9].unwrap());
        assert_eq!(row[3], "0");
        assert_eq!(row[4].parse::<f64>().unwrap(), r.fitted_order.unwrap());
    }
}

#[test]
fn parallel_and_sequential_reports_agree() {
    let spec = ExperimentSpec {
        step_sizes: vec![5.0 / 100.0, 5.0 / 160.0, 5.0 / 220.0],
        ..ExperimentSpec::new(ExperimentKind::ProtheroRobinson, builtins())
    };
    let a = run_experiment(&spec, Execution::Sequential).unwrap();
    let b = run_experiment(&spec, Execution::Parallel).unwrap();
    for (x, y) in a.results.iter().zip(&b.results) {
        assert_eq!(x.errors, y.errors);
        assert_eq!(x.fitted_order, y.fitted_order);
    }
}

fn ar_spec(quantity: ArQuantity) -> ExperimentSpec {
    ExperimentSpec {
        step_sizes: ar_mid_ladder(),
        ar_quantity: quantity,
        ..ExperimentSpec::new(
            ExperimentKind::AdvectionReaction { m: 48 },
            vec![builtin("imex-peer2s").unwrap()],
        )
    }
}

#[test]
fn desk_scale_advection_reaction_has_third_order() {
    for q in [ArQuantity::TotalConcentration, ArQuantity::FullState] {
        let report = run_experiment(&ar_spec(q), Execution::Parallel).unwrap();
        let order = report.results[0].fitted_order.unwrap();
        assert!((2.6..=3.3).contains(&order), "{q:?}: order {order}");
    }
}

#[test]
fn advection_reaction_reference_is_converged() {
    let coarse = ExperimentSpec {
        step_sizes: vec![2e-3, 1e-3],
        ..ar_spec(ArQuantity::TotalConcentration)
    };
    let fine = ExperimentSpec {
        reference_refinement: 2.0 * coarse.reference_refinement,
        ..coarse.clone()
    };
    let a = run_experiment(&coarse, Execution::Parallel).unwrap();
    let b = run_experiment(&fine, Execution::Parallel).unwrap();
    for (x, y) in a.results[0].errors.iter().zip(&b.results[0].errors) {
        let (x, y) = (x.unwrap(), y.unwrap());
        assert!((x - y).abs() < 0.01 * y, "{x:e} vs {y:e}");
    }
}

#[test]
fn unstable_runs_are_recorded_not_fatal() {
    // explicit mode with the reaction term is far outside the stability region
    let spec = ExperimentSpec {
        step_sizes: vec![2e-3, 1e-3],
        mode: imexpeer::integrator::Mode::Explicit,
        ..ar_spec(ArQuantity::TotalConcentration)
    };
    let report = run_experiment(&spec, Execution::Sequential).unwrap();
    let r = &report.results[0];
    assert!(r.errors.iter().all(|e| e.is_none()));
    assert!(r.failures.iter().all(|f| f.is_some()));
    assert!(r.fitted_order.is_none());
}

#[test]
fn unknown_experiment_is_rejected() {
    assert!(ExperimentKind::parse("gravity-waves", 48).is_err());
    assert!(imexpeer::experiments::advection_reaction(4).is_err());
}
