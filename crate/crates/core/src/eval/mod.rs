//! ROC/AUC evaluation, score distribution summaries and the scan scaling
//! benchmark.

mod bench;
mod roc;

pub use bench::{attention_reference, bench_scan, BenchRow, DoublingRatio, ScanBench};
pub use roc::{box_stats, evaluate, roc_auc, BoxStats, EvalReport, RocCurve};
