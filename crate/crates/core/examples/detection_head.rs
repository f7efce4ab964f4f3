//! Decode a BEV grid with the query head, match predictions to ground truth
//! with the Hungarian algorithm, and take one gradient of the set loss.
//!
//! ```bash
//! cargo run --release --example detection_head
//! ```

use bevssm::head::{detection_loss, match_predictions, Detection, DetrHead, HeadConfig};
use bevssm::numerics::layers::NormConfig;
use bevssm::numerics::{ParamStore, ShapedArray, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> bevssm::Result<()> {
    let (n, c, range) = (20, 16, 20.48);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = HeadConfig {
        num_queries: 64,
        ..Default::default()
    };
    let mut ps = ParamStore::<f32>::new();
    let head = DetrHead::new(&mut ps, "head", c, &cfg, &NormConfig::default(), &mut rng)?;
    let gt = vec![
        Detection {
            cx: 5.0,
            cy: -3.0,
            l: 9.0,
            w: 3.0,
            yaw: 0.4,
            vx: 4.0,
            vy: 1.5,
            class: 1,
            score: 1.0,
        },
        Detection {
            cx: -8.0,
            cy: 10.0,
            l: 0.5,
            w: 0.5,
            yaw: 0.0,
            vx: 0.0,
            vy: 1.0,
            class: 0,
            score: 1.0,
        },
    ];

    let mut tape = Tape::new(&ps);
    let bev = tape.constant(ShapedArray::randn(&[n, n, c], 1.0, &mut rng));
    let out = head.forward(&mut tape, bev)?;
    let (probs, centers) = head.probs_and_centers(&tape, &out)?;
    let assignment = match_predictions(&probs, &centers, &gt, range, cfg.matching)?;
    for &(q, g) in &assignment.pairs {
        let (x, y) = (centers[q][0] * 2.0 * range - range, centers[q][1] * 2.0 * range - range);
        println!("gt {g} <- query {q} at ({x:.1}, {y:.1})");
    }
    let terms = detection_loss(&mut tape, &out, &gt, &assignment, range, &cfg.loss)?;
    println!(
        "loss {:.3} = cls {:.3} + center {:.3} + size {:.3} + yaw {:.3} + velocity {:.3}",
        tape.value(terms.total).data()[0],
        terms.cls,
        terms.center,
        terms.size,
        terms.yaw,
        terms.velocity
    );
    let grads = tape.backward(terms.total)?;
    let norm: f64 = ps.ids().map(|id| grads.param(id).data().iter().map(|&g| (g as f64).powi(2)).sum::<f64>()).sum::<f64>().sqrt();
    println!("gradient norm over {} tensors: {norm:.3}", ps.len());
    Ok(())
}
