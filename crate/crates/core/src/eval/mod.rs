//! Metrics, evaluation, and the latency/memory benchmarks.

pub mod ablation;
pub mod evaluate;
pub mod latency;
pub mod memory;
pub mod metrics;
pub mod report;

pub use ablation::{ablate_tap_layer, AblationRow, AblationTable};
pub use evaluate::{evaluate, EvalOptions, MetricsBundle};
pub use latency::{
    bench_scene, bench_scenes, latency_bench, BenchOptions, BenchTarget, Clock, FakeClock, LatencyReport,
    MonotonicClock, SequentialTarget, SingleShotTarget, DEFAULT_COUNTS,
};
pub use memory::{memory_report, HandTable, MemoryReport};
pub use metrics::{detection_map, intent_metrics, tally_intent, Confusion, IntentMetrics, MapResult};
pub use report::{write_latency_plot, write_loss_plot, Report};
