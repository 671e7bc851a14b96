//! Detection metrics and latency benchmarks.

mod bench;
mod metrics;

pub use bench::{
    bench_clip_stage, bench_decode_scaling, random_rois, time_it, BenchConfig, BenchRatio,
    BenchReport, BenchRow, TimingStat,
};
pub use metrics::{
    average_precision, evaluate, ground_truth_as_detections, gt_boxes, iou_xyxy, ClassAp,
    EvalReport, GtBox,
};
