//! Test and measurement plumbing: truth-table oracles, the scenario runner
//! and the scaling benchmark.

pub mod bench;
pub mod oracle;
pub mod scenario;

pub use bench::{bench_encrypt, linear_fit, BenchmarkReport, LinearFit, Measurement};
pub use oracle::{brute_oracle, OracleRow};
pub use scenario::{parse_scenario, run_scenario, Network, ScenarioScript, Transcript};
