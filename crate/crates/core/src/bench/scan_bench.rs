//! Wall-clock scaling of the three SSD evaluation strategies.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::ShapedArray;
use crate::ssd::{scan, DiscreteSsm, ScanMode, QUADRATIC_MAX_LEN};

#[derive(Clone, Debug, PartialEq)]
pub struct ScanBenchConfig {
    pub lengths: Vec<usize>,
    pub state_dim: usize,
    pub headdim: usize,
    pub nheads: usize,
    pub chunk: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for ScanBenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![256, 512, 1024, 2048, 4096, 8192],
            state_dim: 16,
            headdim: 16,
            nheads: 1,
            chunk: 64,
            repeats: 3,
            warmup: 1,
            seed: 0,
        }
    }
}

/// Median time of one mode at one length, `None` past the quadratic guard.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanTiming {
    pub mode: String,
    pub len: usize,
    pub median_secs: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanReport {
    pub timings: Vec<ScanTiming>,
    /// Least-squares slope of log time against log length, per mode.
    pub slopes: Vec<(String, f64)>,
    /// Largest deviation of any mode from the linear scan.
    pub max_abs_diff: f64,
}

impl ScanReport {
    pub fn slope(&self, mode: &str) -> Option<f64> {
        self.slopes.iter().find(|(m, _)| m == mode).map(|&(_, s)| s)
    }

    pub fn time(&self, mode: &str, len: usize) -> Option<f64> {
        self.timings.iter().find(|t| t.mode == mode && t.len == len).and_then(|t| t.median_secs)
    }
}

pub fn mode_name(mode: ScanMode) -> String {
    match mode {
        ScanMode::Linear => "linear".into(),
        ScanMode::Quadratic => "quadratic".into(),
        ScanMode::Chunked(q) => format!("chunked{q}"),
    }
}

fn random_ssm(cfg: &ScanBenchConfig, t: usize, rng: &mut ChaCha8Rng) -> (DiscreteSsm<f64>, ShapedArray<f64>) {
    let th = t * cfg.nheads;
    let ssm = DiscreteSsm {
        nheads: cfg.nheads,
        headdim: cfg.headdim,
        state_dim: cfg.state_dim,
        decay: (0..th).map(|_| rng.random_range(0.5..0.999)).collect(),
        scale: (0..th).map(|_| rng.random_range(0.01..1.0)).collect(),
        b: ShapedArray::randn(&[t, cfg.state_dim], 0.5, rng),
        c: ShapedArray::randn(&[t, cfg.state_dim], 0.5, rng),
    };
    let x = ShapedArray::randn(&[t, cfg.nheads, cfg.headdim], 1.0, rng);
    (ssm, x)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `ln y` on `ln x`; `None` for fewer than two points.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// Time linear, chunked and quadratic evaluation at every length after
/// `warmup` untimed runs. Quadratic cells beyond the materialization guard
/// are skipped. Outputs of all modes are compared with the linear scan.
pub fn bench_scan(cfg: &ScanBenchConfig) -> Result<ScanReport> {
    if cfg.lengths.is_empty() || cfg.repeats == 0 || cfg.chunk == 0 {
        return Err(Error::Config("bench_scan: need lengths, repeats >= 1 and chunk >= 1".into()));
    }
    let modes = [ScanMode::Linear, ScanMode::Chunked(cfg.chunk), ScanMode::Quadratic];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut timings = Vec::new();
    let mut max_abs_diff = 0.0f64;
    for &t in &cfg.lengths {
        let (ssm, x) = random_ssm(cfg, t, &mut rng);
        let mut reference: Option<ShapedArray<f64>> = None;
        for mode in modes {
            if mode == ScanMode::Quadratic && t > QUADRATIC_MAX_LEN {
                timings.push(ScanTiming {
                    mode: mode_name(mode),
                    len: t,
                    median_secs: None,
                });
                continue;
            }
            let mut out = None;
            for _ in 0..cfg.warmup {
                out = Some(scan(&ssm, &x, mode)?);
            }
            let mut times = Vec::with_capacity(cfg.repeats);
            for _ in 0..cfg.repeats {
                let t0 = Instant::now();
                out = Some(std::hint::black_box(scan(&ssm, &x, mode)?));
                times.push(t0.elapsed().as_secs_f64());
            }
            let y = out.expect("repeats >= 1");
            match &reference {
                None => reference = Some(y),
                Some(r) => {
                    let d = r.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    max_abs_diff = max_abs_diff.max(d);
                }
            }
            timings.push(ScanTiming {
                mode: mode_name(mode),
                len: t,
                median_secs: Some(median(times)),
            });
        }
    }
    let slopes = modes
        .iter()
        .filter_map(|&m| {
            let name = mode_name(m);
            let pts: Vec<(f64, f64)> = timings
                .iter()
                .filter(|t| t.mode == name)
                .filter_map(|t| t.median_secs.map(|s| (t.len as f64, s.max(1e-9))))
                .collect();
            loglog_slope(&pts).map(|s| (name, s))
        })
        .collect();
    Ok(ScanReport {
        timings,
        slopes,
        max_abs_diff,
    })
}

/// CSV `record,mode,T,value`: `time` rows carry median seconds, `skipped`
/// rows mark cells past the quadratic guard, `slope` rows the fitted
/// exponent (T empty).
pub fn write_scan_csv<W: Write>(report: &ScanReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["record", "mode", "T", "value"]).map_err(err)?;
    for t in &report.timings {
        let len = t.len.to_string();
        match t.median_secs {
            Some(s) => w.write_record(["time", &t.mode, &len, &format!("{s:.6e}")]),
            None => w.write_record(["skipped", &t.mode, &len, "quadratic_guard"]),
        }
        .map_err(err)?;
    }
    for (m, s) in &report.slopes {
        w.write_record(["slope", m, "", &format!("{s:.4}")]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_laws() {
        let quad: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&x| (x, 3.0 * x * x)).collect();
        assert!((loglog_slope(&quad).unwrap() - 2.0).abs() < 1e-12);
        assert!((loglog_slope(&[(10.0, 5.0), (100.0, 50.0)]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(loglog_slope(&[(1.0, 1.0)]), None);
    }

    #[test]
    fn small_scan_and_guard_marker() {
        let cfg = ScanBenchConfig {
            lengths: vec![16, 32, QUADRATIC_MAX_LEN + 1],
            state_dim: 4,
            headdim: 2,
            chunk: 8,
            repeats: 1,
            ..Default::default()
        };
        let r = bench_scan(&cfg).unwrap();
        assert!(r.max_abs_diff < 1e-9);
        assert_eq!(r.timings.len(), 9);
        assert!(r.time("quadratic", QUADRATIC_MAX_LEN + 1).is_none());
        assert!(r.time("chunked8", QUADRATIC_MAX_LEN + 1).is_some());
        assert!(r.slope("quadratic").is_some() && r.slope("linear").is_some());
        let mut buf = Vec::new();
        write_scan_csv(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("record,mode,T,value\ntime,linear,16,"));
        assert!(text.contains(&format!("skipped,quadratic,{},quadratic_guard", QUADRATIC_MAX_LEN + 1)));
        assert!(text.contains("slope,chunked8,,"));
    }
}
