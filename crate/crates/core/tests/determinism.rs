use powerset_align::harness::{
    correlation_sweep, gradcheck, verify_bounds, GradcheckOptions, InstanceDistribution, SweepOptions, SyntheticSpec,
    VerifyOptions,
};

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

#[test]
fn verification_does_not_depend_on_thread_count() {
    let opts = VerifyOptions {
        trials: 40,
        seed: 17,
        ..VerifyOptions::default()
    };
    let one = in_pool(1, || verify_bounds(&opts).unwrap());
    let four = in_pool(4, || verify_bounds(&opts).unwrap());
    assert_eq!(one, four);
}

#[test]
fn sweep_does_not_depend_on_thread_count() {
    let spec = SyntheticSpec {
        masks: 6,
        ..SyntheticSpec::default()
    };
    let opts = SweepOptions {
        batches: 30,
        taus: vec![0.01],
        ..SweepOptions::default()
    };
    let strip = |mut r: powerset_align::harness::SweepResult| {
        for row in &mut r.rows {
            row.runtime_secs = 0.0;
        }
        r
    };
    let one = strip(in_pool(1, || correlation_sweep(&spec, &opts).unwrap()));
    let three = strip(in_pool(3, || correlation_sweep(&spec, &opts).unwrap()));
    assert_eq!(one, three);
}

#[test]
fn gradcheck_does_not_depend_on_thread_count() {
    let opts = GradcheckOptions {
        trials: 6,
        distribution: InstanceDistribution {
            masks: (1, 5),
            tokens: (1, 4),
            ..InstanceDistribution::default()
        },
        ..GradcheckOptions::default()
    };
    assert_eq!(in_pool(1, || gradcheck(&opts).unwrap()), in_pool(4, || gradcheck(&opts).unwrap()));
}

#[test]
fn verification_report_names_failing_seeds() {
    // A tolerance nobody can meet makes every trial fail the closeness check.
    let opts = VerifyOptions {
        trials: 5,
        seed: 100,
        alpha_grid_tolerance: -1.0,
        ..VerifyOptions::default()
    };
    let report = verify_bounds(&opts).unwrap();
    assert!(!report.passed());
    let seeds: std::collections::BTreeSet<u64> = report
        .violations
        .iter()
        .filter(|v| v.check == "alpha_grid_closeness")
        .map(|v| v.seed)
        .collect();
    assert_eq!(seeds, (100..105).collect());
}
