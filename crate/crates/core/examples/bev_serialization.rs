//! Serialize a BEV grid into four scan orders, merge it back, and align a
//! historical grid to the current ego pose.
//!
//! ```bash
//! cargo run --example bev_serialization
//! ```

use bevssm::bevseq::{build_layout, ego_align, rearrange, remerge, AlignConfig, BevGrid, Direction, EgoPose};
use bevssm::numerics::ShapedArray;

fn main() -> bevssm::Result<()> {
    let (h, w, c) = (3, 4, 1);
    let z = ShapedArray::from_fn(&[h, w, c], |i| i as f64);
    let layout = build_layout(h, w)?;
    let seqs = rearrange(&z, &layout, 4)?;
    for (d, s) in Direction::ALL.iter().zip(&seqs) {
        println!("{d:?}: {:?}", s.data());
    }
    let back = remerge(&seqs, &layout)?;
    println!("round trip exact: {}", back == z);

    // a one-hot feature seen from an ego that has since moved one cell forward
    let mut hist = BevGrid::<f64>::zeros(5, 1, 1.0, 2.5)?;
    hist.data.set(&[2, 2, 0], 1.0);
    let delta = EgoPose::new(1.0, 0.0, 0.0);
    let aligned = ego_align(&hist, &delta, AlignConfig::default())?;
    for i in 0..5 {
        let row: Vec<f64> = (0..5).map(|j| aligned.data.get(&[i, j, 0])).collect();
        println!("{row:?}");
    }
    Ok(())
}
