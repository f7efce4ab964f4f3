//! Run a reduced {conv, concat} x {1, 4 directions} fusion ablation and
//! write the comparison table as CSV.
//!
//! Sizes are cut for a quick run and the metrics stay near chance. Drop the
//! overrides to train on the default 500 sequences for 4 epochs.
//!
//! ```bash
//! cargo run --release --example fusion_ablation -- ablation.csv
//! ```

use std::fs::File;

use bevssm::bench::{run_ablation, write_ablation_csv, AblationGrid, Config};

fn main() -> bevssm::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "ablation.csv".into());
    let mut cfg = Config::default();
    cfg.train.epochs = 1;
    cfg.train.train_sequences = 40;
    cfg.train.eval_sequences = 20;
    let grid = AblationGrid::parse("mixer=conv,concat;directions=1,4;seeds=0")?;
    let rows = run_ablation(&cfg, &grid, |r| {
        println!("{:<6} dirs {}: NDS {:.4}, mAP {:.4}, mAVE {:.3}", r.mixer, r.directions, r.nds, r.map, r.mave)
    })?;
    let file = File::create(&path).map_err(|e| bevssm::Error::Io {
        path: path.clone().into(),
        source: e,
    })?;
    write_ablation_csv(&rows, file)?;
    println!("wrote {path}");
    Ok(())
}
