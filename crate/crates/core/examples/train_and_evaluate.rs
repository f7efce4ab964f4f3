//! Train a small detector on synthetic sequences with and without temporal
//! fusion, then compare nuScenes-style metrics.
//!
//! Sizes are cut for a quick run and the metrics stay near chance. Drop the
//! overrides to train on the default 500 sequences for 4 epochs.
//!
//! ```bash
//! cargo run --release --example train_and_evaluate
//! ```

use bevssm::bench::{fit_synthetic, Config};
use bevssm::fusion::FusionMode;

fn main() -> bevssm::Result<()> {
    for mode in [FusionMode::None, FusionMode::TemporalMamba] {
        let mut cfg = Config::default();
        cfg.fusion.mode = mode;
        cfg.train.epochs = 2;
        cfg.train.train_sequences = 100;
        cfg.train.eval_sequences = 40;
        let (trained, r) = fit_synthetic(&cfg, |rec| {
            if rec.step % 50 == 0 {
                println!("  {} step {:>3}: loss {:.3}", mode.name(), rec.step, rec.loss);
            }
        })?;
        let last = trained.losses.last().map_or(f64::NAN, |l| l.loss);
        println!(
            "{}: final loss {last:.3}, mAP {:.3}, mATE {:.3}, mAOE {:.3}, mAVE {:.3}, NDS {:.3}, occluded recall {:?}",
            mode.name(),
            r.map,
            r.mate,
            r.maoe,
            r.mave,
            r.nds,
            r.occluded_recall
        );
        for c in &r.classes {
            println!("  {:<5} AP@0.5/1/2/4 m = {:.3?}", c.name, c.ap);
        }
    }
    Ok(())
}
