//! Time linear, chunked and quadratic SSD evaluation over growing sequence
//! lengths and fit log-log slopes.
//!
//! ```bash
//! cargo run --release --example scan_benchmark
//! ```

use bevssm::bench::{bench_scan, write_scan_csv, ScanBenchConfig};

fn main() -> bevssm::Result<()> {
    let report = bench_scan(&ScanBenchConfig {
        lengths: vec![256, 512, 1024, 2048, 4096, 8192],
        ..Default::default()
    })?;
    println!("{:<10} {:>6} {:>12}", "mode", "T", "median ms");
    for t in &report.timings {
        match t.median_secs {
            Some(s) => println!("{:<10} {:>6} {:>12.3}", t.mode, t.len, 1e3 * s),
            None => println!("{:<10} {:>6} {:>12}", t.mode, t.len, "guard"),
        }
    }
    for (mode, s) in &report.slopes {
        println!("{mode}: slope {s:.2}");
    }
    write_scan_csv(&report, std::io::stdout())
}
