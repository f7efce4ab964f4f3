//! Fusion ablation grid: mixer kind × scan directions × seeds.

use std::io::Write;

use serde::Serialize;

use super::config::Config;
use super::metrics::MetricsReport;
use super::train::fit_synthetic;
use crate::error::{Error, Result};
use crate::fusion::FusionMode;

/// How current and historical grids are mixed before the directional sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixerKind {
    Conv,
    Concat,
}

impl MixerKind {
    pub fn name(self) -> &'static str {
        match self {
            MixerKind::Conv => "conv",
            MixerKind::Concat => "concat",
        }
    }

    fn mode(self) -> FusionMode {
        match self {
            MixerKind::Conv => FusionMode::TemporalMamba,
            MixerKind::Concat => FusionMode::ConcatBaseline,
        }
    }
}

/// Cartesian grid of ablation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub mixers: Vec<MixerKind>,
    pub directions: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            mixers: vec![MixerKind::Conv, MixerKind::Concat],
            directions: vec![1, 4],
            seeds: vec![0, 1, 2],
        }
    }
}

impl AblationGrid {
    /// Parse `mixer=conv,concat;directions=1,4;seeds=0,1,2`. Missing keys
    /// keep their defaults.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut g = Self::default();
        let bad = |m: String| Error::Config(format!("ablation grid: {m}"));
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, vals) = part.split_once('=').ok_or_else(|| bad(format!("expected key=values, got {part:?}")))?;
            let vals: Vec<&str> = vals.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
            if vals.is_empty() {
                return Err(bad(format!("no values for {key}")));
            }
            match key.trim() {
                "mixer" => {
                    g.mixers = vals
                        .iter()
                        .map(|v| match *v {
                            "conv" => Ok(MixerKind::Conv),
                            "concat" => Ok(MixerKind::Concat),
                            o => Err(bad(format!("unknown mixer {o:?}"))),
                        })
                        .collect::<Result<_>>()?;
                }
                "directions" => {
                    g.directions = vals
                        .iter()
                        .map(|v| match v.parse() {
                            Ok(d @ (1 | 4)) => Ok(d),
                            _ => Err(bad(format!("directions must be 1 or 4, got {v:?}"))),
                        })
                        .collect::<Result<_>>()?;
                }
                "seeds" => {
                    g.seeds = vals
                        .iter()
                        .map(|v| v.parse().map_err(|_| bad(format!("bad seed {v:?}"))))
                        .collect::<Result<_>>()?;
                }
                k => return Err(bad(format!("unknown key {k:?}"))),
            }
        }
        Ok(g)
    }

    /// Configurations in run order, each with scene and training seed set.
    pub fn configs(&self, base: &Config) -> Vec<(MixerKind, usize, u64, Config)> {
        let mut out = Vec::new();
        for &m in &self.mixers {
            for &d in &self.directions {
                for &s in &self.seeds {
                    let mut cfg = base.clone();
                    cfg.fusion.mode = m.mode();
                    cfg.fusion.directions = d;
                    cfg.scene.seed = s;
                    cfg.train.seed = s;
                    out.push((m, d, s, cfg));
                }
            }
        }
        out
    }
}

/// One trained and evaluated grid cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub mixer: &'static str,
    pub directions: usize,
    pub seed: String,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mATE")]
    pub mate: f64,
    #[serde(rename = "mASE")]
    pub mase: f64,
    #[serde(rename = "mAOE")]
    pub maoe: f64,
    #[serde(rename = "mAVE")]
    pub mave: f64,
    #[serde(rename = "NDS")]
    pub nds: f64,
    #[serde(rename = "NDS10_mAAE1")]
    pub nds10: f64,
}

impl AblationRow {
    fn from_report(mixer: MixerKind, directions: usize, seed: String, r: &MetricsReport) -> Self {
        Self {
            mixer: mixer.name(),
            directions,
            seed,
            map: r.map,
            mate: r.mate,
            mase: r.mase,
            maoe: r.maoe,
            mave: r.mave,
            nds: r.nds,
            nds10: r.nds10,
        }
    }
}

/// Train and evaluate every cell of `grid`, then append one `mean` row per
/// (mixer, directions) pair. `on_cell` sees each per-seed row when done.
pub fn run_ablation(base: &Config, grid: &AblationGrid, mut on_cell: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (m, d, s, cfg) in grid.configs(base) {
        let (_, report) = fit_synthetic(&cfg, |_| {})?;
        let row = AblationRow::from_report(m, d, s.to_string(), &report);
        on_cell(&row);
        rows.push(row);
    }
    let mut means = Vec::new();
    for &m in &grid.mixers {
        for &d in &grid.directions {
            let cell: Vec<&AblationRow> = rows.iter().filter(|r| r.mixer == m.name() && r.directions == d).collect();
            let k = cell.len() as f64;
            let avg = |f: fn(&AblationRow) -> f64| cell.iter().map(|r| f(r)).sum::<f64>() / k;
            means.push(AblationRow {
                mixer: m.name(),
                directions: d,
                seed: "mean".into(),
                map: avg(|r| r.map),
                mate: avg(|r| r.mate),
                mase: avg(|r| r.mase),
                maoe: avg(|r| r.maoe),
                mave: avg(|r| r.mave),
                nds: avg(|r| r.nds),
                nds10: avg(|r| r.nds10),
            });
        }
    }
    rows.extend(means);
    Ok(rows)
}

/// CSV with header `mixer,directions,seed,mAP,mATE,mASE,mAOE,mAVE,NDS,NDS10_mAAE1`.
pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        assert_eq!(AblationGrid::parse("").unwrap(), AblationGrid::default());
        let g = AblationGrid::parse("mixer=concat; directions=4; seeds=7,8").unwrap();
        assert_eq!(g.mixers, vec![MixerKind::Concat]);
        assert_eq!((g.directions, g.seeds), (vec![4], vec![7, 8]));
        for bad in ["mixer=sum", "directions=2", "seeds=x", "foo=1", "mixer", "seeds="] {
            assert!(matches!(AblationGrid::parse(bad), Err(Error::Config(_))), "{bad}");
        }
        let cfgs = AblationGrid::default().configs(&Config::default());
        assert_eq!(cfgs.len(), 12);
        assert_eq!(cfgs[3].3.fusion.directions, 4);
        assert_eq!(cfgs[6].3.fusion.mode, FusionMode::ConcatBaseline);
        assert_eq!((cfgs[5].3.scene.seed, cfgs[5].3.train.seed), (2, 2));
    }

    #[test]
    fn tiny_grid_runs_to_completion() {
        let mut base = Config::default();
        base.scene.grid = 8;
        base.scene.resolution = 2.0 * base.scene.range / 8.0;
        base.head.num_queries = 8;
        base.train.epochs = 1;
        base.train.train_sequences = 2;
        base.train.eval_sequences = 2;
        let grid = AblationGrid::parse("seeds=0").unwrap();
        let rows = run_ablation(&base, &grid, |_| {}).unwrap();
        assert_eq!(rows.len(), 8);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.nds)));
        let mut buf = Vec::new();
        write_ablation_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("mixer,directions,seed,mAP,mATE,mASE,mAOE,mAVE,NDS,NDS10_mAAE1\nconv,1,0,"));
        assert!(text.contains("concat,4,mean,"));
    }
}
