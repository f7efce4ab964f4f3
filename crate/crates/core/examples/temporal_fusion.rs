//! Fuse a current BEV grid with an ego-aligned history in every fusion mode
//! and measure how much the history changes the output.
//!
//! ```bash
//! cargo run --release --example temporal_fusion
//! ```

use bevssm::bevseq::{BevGrid, EgoPose};
use bevssm::fusion::{FusionConfig, FusionMode, TemporalFusion};
use bevssm::numerics::layers::NormConfig;
use bevssm::numerics::{Mode, ParamStore, ShapedArray, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> bevssm::Result<()> {
    let (n, c) = (16, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cur = ShapedArray::<f32>::randn(&[n, n, c], 1.0, &mut rng);
    let hist = BevGrid::new(ShapedArray::randn(&[n, n, c], 1.0, &mut rng), 2.0, n as f64)?;
    let delta = EgoPose::new(2.0, 0.5, 0.05);
    for mode in [FusionMode::TemporalMamba, FusionMode::ConcatBaseline, FusionMode::DeformableTsaBaseline, FusionMode::None] {
        for directions in [1, 4] {
            let cfg = FusionConfig {
                mode,
                directions,
                zero_init_out: false,
                ..Default::default()
            };
            let mut ps = ParamStore::new();
            let fusion = TemporalFusion::new(&mut ps, "fusion", c, n, &cfg, &NormConfig::default(), &mut rng)?;
            let mut tape = Tape::inference(&ps);
            let x = tape.constant(cur.clone());
            let with_hist = fusion.forward(&mut tape, x, Some(&hist), &delta, Mode::Eval, 0)?;
            let cold = fusion.forward(&mut tape, x, None, &EgoPose::default(), Mode::Eval, 0)?;
            let diff = tape.value(with_hist).max_abs_diff(tape.value(cold));
            println!("{:<24} dirs {directions}: {:>6} params, history effect {diff:.2e}", mode.name(), ps.entries().iter().map(|e| e.value.len()).sum::<usize>());
            if !mode.uses_history() {
                break;
            }
        }
    }
    Ok(())
}
