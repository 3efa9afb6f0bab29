//! Synthetic data, verification suites, the correlation study, scaling
//! benchmarks and gradient checks.

pub mod bench;
pub mod gradcheck;
pub mod stats;
pub mod sweep;
pub mod synth;
pub mod verify;

pub use bench::{bench_scaling, BenchOptions, BenchRow};
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use stats::{linear_fit, pearson};
pub use sweep::{correlation_sweep, SweepOptions, SweepResult, SweepRow};
pub use synth::{gen_synthetic_batch, random_tree, InstanceDistribution, SyntheticSpec};
pub use verify::{verify_bounds, CheckSummary, VerifyOptions, VerifyReport, Violation};
