//! Evaluate one multi-head SSM three ways (recurrent scan, materialized
//! semiseparable matrix, chunked blocks) and compare outputs and time.
//!
//! ```bash
//! cargo run --release --example ssd_scan_modes
//! ```

use std::time::Instant;

use bevssm::numerics::ShapedArray;
use bevssm::ssd::{materialize, scan, Discretization, ScanMode, SsmParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> bevssm::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (t, h, p, n) = (1024, 2, 16, 16);
    let params = SsmParams {
        nheads: h,
        headdim: p,
        state_dim: n,
        a_log: vec![0.0, 0.5],
        dt_bias: vec![-2.0, -1.0],
        dt_raw: ShapedArray::randn(&[t, h], 1.0, &mut rng),
        b: ShapedArray::randn(&[t, n], 0.5, &mut rng),
        c: ShapedArray::randn(&[t, n], 0.5, &mut rng),
    };
    let x = ShapedArray::<f64>::randn(&[t, h, p], 1.0, &mut rng);
    let ssm = params.discretize(Discretization::ExactZoh)?;

    let reference = scan(&ssm, &x, ScanMode::Linear)?;
    for mode in [ScanMode::Linear, ScanMode::Chunked(64), ScanMode::Chunked(1), ScanMode::Quadratic] {
        let t0 = Instant::now();
        let y = scan(&ssm, &x, mode)?;
        println!("{mode:?}: {:>8.2} ms, max |y - y_linear| = {:.2e}", 1e3 * t0.elapsed().as_secs_f64(), y.max_abs_diff(&reference));
    }

    let m = materialize(&ssm, 0)?;
    println!("M[0] is {}x{}, M[3][5] = {} (strictly upper part is zero)", m.shape()[0], m.shape()[1], m.get(&[3, 5]));
    Ok(())
}
