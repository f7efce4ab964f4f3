//! Check tape gradients of a Mamba2 block against central differences
//! evaluated in double-double precision.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use bevssm::numerics::{finite_diff_check, FdOptions, Objective, ParamStore, Scalar, ShapedArray, Tape, Var};
use bevssm::ssd::{Mamba2Block, Mamba2Config, ScanMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Probe {
    block: Mamba2Block,
    x: ShapedArray<f64>,
    w: ShapedArray<f64>,
}

impl Objective for Probe {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>) -> bevssm::Result<Var> {
        let x = tape.constant(self.x.cast());
        let y = self.block.forward(tape, x)?;
        tape.dot_const(y, &self.w.cast())
    }
}

fn main() -> bevssm::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ps = ParamStore::new();
    let cfg = Mamba2Config {
        d_model: 8,
        nheads: 2,
        d_state: 4,
        scan_mode: ScanMode::Chunked(8),
        ..Default::default()
    };
    let block = Mamba2Block::new(&mut ps, "mamba", &cfg, &mut rng)?;
    let probe = Probe {
        block,
        x: ShapedArray::randn(&[32, 8], 1.0, &mut rng),
        w: ShapedArray::randn(&[32, 8], 1.0, &mut rng),
    };
    for extended in [false, true] {
        let r = finite_diff_check(&ps, 1e-5, &FdOptions { extended, ..Default::default() }, &probe)?;
        println!(
            "double-double differences {extended}: {} coordinates, max rel error {:.2e} at {:?}",
            r.checked, r.max_rel_error, r.worst
        );
    }
    Ok(())
}
