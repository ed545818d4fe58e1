//! Analysis harnesses: correlation statistics, head-correlation, method
//! ranking, layer-position sweeps and step-time benchmarks.

mod bench;
mod heads;
mod ranking;
mod stats;
mod sweep;

pub use bench::{bench_speedup, BenchConfig, BenchRow};
pub use heads::{head_correlation, head_correlation_from_trace, CorrelationMatrix};
pub use ranking::{rank_methods, RankTable};
pub use stats::{mean_ci95, pearson, ranks, spearman, MeanCi};
pub use sweep::{layer_sweep, SweepRow};
