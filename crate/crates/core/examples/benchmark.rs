//! Quick run of both latency benchmarks with a reduced iteration budget.
use ovdet::eval::{bench_clip_stage, bench_decode_scaling, BenchConfig};

fn main() -> ovdet::Result<()> {
    let cfg = BenchConfig {
        warmup: 1,
        iterations: 5,
        time_budget_s: 2.0,
        ..BenchConfig::default()
    };
    let mut report = bench_decode_scaling(&[10, 100], 100, &cfg)?;
    report.merge(bench_clip_stage(&[64], &[1.0, 0.2], &cfg)?);
    for r in &report.rows {
        println!(
            "{:>14} {:>14} k={:<4} rois={:<4} {:.3} ms",
            r.bench,
            r.mode,
            r.k,
            r.rois,
            r.timing.mean_s * 1e3
        );
    }
    for r in &report.ratios {
        println!("{} = {:.2}", r.name, r.value);
    }
    Ok(())
}
