//! Acceptance suite. Runs every criterion, prints one line per criterion,
//! and exits nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use powerset_align::harness::{
    bench_scaling, correlation_sweep, gradcheck, random_tree, verify_bounds, BenchOptions, GradcheckOptions,
    SweepOptions, SyntheticSpec, VerifyOptions,
};
use powerset_align::loss::{phi_gamma, triplet_loss};
use powerset_align::oracle::{exponential_sum_bruteforce, exponential_sum_logcosh};
use powerset_align::tree::parse_bracketed;
use powerset_align::Error;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn bounds_report() -> powerset_align::harness::VerifyReport {
    verify_bounds(&VerifyOptions::default()).expect("verification run")
}

fn relu_exactness(report: &powerset_align::harness::VerifyReport) -> Outcome {
    let c = report.check("t1_relu_exact").unwrap();
    outcome(
        c.passed && c.evaluated == 1000,
        format!("{} instances, worst |T1_relu - t2r| = {:e}", c.evaluated, c.worst),
    )
}

fn softplus_bound(report: &powerset_align::harness::VerifyReport) -> Outcome {
    let c = report.check("t1_softplus_bound").unwrap();
    outcome(
        c.passed && c.evaluated == 1000,
        format!(
            "{} instances x 4 taus, {} failing, worst excess over bound {:e}",
            c.evaluated, c.failed_trials, c.worst
        ),
    )
}

fn powerset_sum() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let m = rng.random_range(1..=12);
        let q: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let tau = 10f64.powf(rng.random_range(-4.0..0.0));
        let brute = exponential_sum_bruteforce(&q, tau).unwrap();
        let closed = exponential_sum_logcosh(&q, tau);
        worst = worst.max((brute - closed).abs() / brute.abs().max(1.0));
    }
    outcome(worst <= 1e-8, format!("1000 (q, tau) draws, worst relative error {worst:e}"))
}

fn t2_bounds(report: &powerset_align::harness::VerifyReport) -> Outcome {
    let bracket = report.check("t2_bracketing").unwrap();
    let ends = report.check("t2_endpoint_bounds").unwrap();
    let grid = report.check("alpha_grid_closeness").unwrap();
    let crossing = report.check("alpha_crossing").unwrap();
    let share = 1.0 - grid.failed_trials as f64 / grid.evaluated as f64;
    outcome(
        bracket.passed && ends.passed && grid.passed,
        format!(
            "bracketing failures {}, endpoint failures {}, alpha-grid within 0.02 on {:.2}% (worst {:.4}); \
             bisected alpha within tau M log 2 on {} of {} instances",
            bracket.failed_trials,
            ends.failed_trials,
            100.0 * share,
            grid.worst,
            crossing.evaluated - crossing.failed_trials,
            crossing.evaluated
        ),
    )
}

fn pearson_study() -> Outcome {
    let start = Instant::now();
    let spec = SyntheticSpec {
        masks: 10,
        ..SyntheticSpec::default()
    };
    let opts = SweepOptions {
        taus: vec![0.001, 0.01],
        ..SweepOptions::default()
    };
    let result = correlation_sweep(&spec, &opts).expect("sweep");
    let elapsed = start.elapsed().as_secs_f64();
    let min_r = result.rows.iter().map(|r| r.pearson_r).fold(f64::INFINITY, f64::min);
    let at_operating_point = result
        .rows
        .iter()
        .find(|r| r.tau == 0.001 && r.alpha == 0.75)
        .unwrap()
        .pearson_r;
    let points: Vec<String> = result
        .rows
        .iter()
        .map(|r| {
            format!(
                "({}, {}) rows {:.4} cols {:.4} summed {:.4}",
                r.tau, r.alpha, r.pearson_rows, r.pearson_cols, r.pearson_total
            )
        })
        .collect();
    outcome(
        min_r > 0.98 && at_operating_point >= 0.99 && elapsed < 600.0,
        format!(
            "min r {min_r:.4}, r at (0.001, 0.75) {at_operating_point:.4}, {elapsed:.1}s; {}",
            points.join(", ")
        ),
    )
}

fn scaling() -> Outcome {
    let masks = [4, 6, 8, 10, 12, 14, 16];
    let rows = bench_scaling(&masks, true, &BenchOptions::default()).expect("bench");
    let base = rows[0].nla_secs / 4.0;
    let worst_ratio = rows
        .iter()
        .map(|r| r.nla_secs / (base * r.masks as f64))
        .fold(0.0, f64::max);
    let exact = |m: usize| rows.iter().find(|r| r.masks == m).unwrap().exact_secs.unwrap();
    let blowup = exact(16) / exact(8);
    let refused = bench_scaling(&[21], true, &BenchOptions::default()).expect("bench")[0].exact_refused;
    outcome(
        worst_ratio <= 2.0 && blowup >= 100.0 && refused,
        format!("NLA worst time / linear extrapolation {worst_ratio:.2}, exact t(16)/t(8) {blowup:.0}, M=21 refused {refused}"),
    )
}

fn gradients() -> Outcome {
    let report = gradcheck(&GradcheckOptions::default()).expect("gradcheck");
    outcome(
        report.max_rel_error < 1e-4 && report.trials == 100,
        format!(
            "{} entries over {} instances, max relative error {:e} at {:?}",
            report.entries, report.trials, report.max_rel_error, report.location
        ),
    )
}

fn parser() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let leaves = rng.random_range(1..=12);
        let rendered = random_tree(&mut rng, leaves, (1, usize::MAX)).unwrap().render();
        if parse_bracketed(&rendered).map(|t| t.render()).as_deref() != Ok(rendered.as_str()) {
            mismatches += 1;
        }
    }
    let corpus = ["(S (NP a dog", "(S a))", "(S )", "()", "", "   ", "(S (NP) b)", "S a", "(S a) (S b)", "((a))"];
    let positioned = corpus
        .iter()
        .filter(|text| matches!(parse_bracketed(text), Err(Error::Parse { offset, .. }) if offset <= text.len()))
        .count();
    outcome(
        mismatches == 0 && positioned == corpus.len(),
        format!(
            "1000 round trips, {mismatches} mismatches; {positioned}/{} malformed inputs gave positioned errors",
            corpus.len()
        ),
    )
}

fn loss_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures = Vec::new();
    // Entries and shifts on a dyadic grid, so every sum and difference is
    // exact and the properties can be checked bit for bit.
    let dyadic = |rng: &mut ChaCha8Rng| rng.random_range(-4096i32..=4096) as f64 / 1024.0;
    for trial in 0..1000 {
        let c = rng.random_range(2..=8);
        let x = Array2::from_shape_fn((c, c), |_| dyadic(&mut rng));
        let shift = dyadic(&mut rng);
        let sym = &x + &x.t();
        for gamma in [0.0, 0.2, 1.0] {
            let base = phi_gamma(&x.view(), gamma).unwrap();
            let shifted = phi_gamma(&(&x + shift).view(), gamma).unwrap();
            let doubled = triplet_loss(&sym.view(), gamma).unwrap();
            let half = phi_gamma(&sym.view(), gamma).unwrap();
            if base != shifted || base < 0.0 || doubled != 2.0 * half {
                failures.push(trial);
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!("1000 matrices x 3 margins, failing trials {failures:?}"),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let report = bounds_report();
    let verify_secs = start.elapsed().as_secs_f64();
    let mut results = vec![
        ("1 ReLU exactness", relu_exactness(&report)),
        ("2 softplus bound", softplus_bound(&report)),
        ("3 powerset-sum identity", powerset_sum()),
        ("4 T2 bracketing and bounds", t2_bounds(&report)),
        ("5 Pearson correlation study", pearson_study()),
        ("6 scaling", scaling()),
        ("7 gradient check", gradients()),
        ("8 parser round trip", parser()),
        ("9 loss properties", loss_properties()),
    ];
    results[0].1.passed &= verify_secs < 60.0;
    results[0].1.detail.push_str(&format!(" ({verify_secs:.1}s for the shared verification run)"));
    let mut failed = Vec::new();
    for (name, o) in &results {
        println!("criterion {name}: {} - {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        if !o.passed {
            failed.push(*name);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {failed:?}");
        ExitCode::FAILURE
    }
}
