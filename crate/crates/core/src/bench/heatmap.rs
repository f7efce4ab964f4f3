//! Grayscale heatmaps of BEV feature magnitude.

use std::path::Path;

use crate::bevseq::BevGrid;
use crate::error::Result;
use crate::numerics::container::write_file;
use crate::numerics::Scalar;

/// Per-cell L2 norm over channels, row-major `[H * W]`.
pub fn l2_norm_map<T: Scalar>(bev: &BevGrid<T>) -> Vec<f64> {
    let c = bev.c();
    bev.data
        .data()
        .chunks(c)
        .map(|cell| cell.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
        .collect()
}

/// Binary PGM (P5) bytes of the min-max normalized L2 norm map, row `i` of
/// the grid on image row `i`. A constant map is all black.
pub fn heatmap_pgm<T: Scalar>(bev: &BevGrid<T>) -> Vec<u8> {
    let norms = l2_norm_map(bev);
    let lo = norms.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{} {}\n255\n", bev.w(), bev.h()).into_bytes();
    out.extend(norms.iter().map(|&v| {
        if span > 0.0 {
            (255.0 * (v - lo) / span).round() as u8
        } else {
            0
        }
    }));
    out
}

/// Write [`heatmap_pgm`] to `path`, creating parent directories.
pub fn heatmap_export<T: Scalar>(bev: &BevGrid<T>, path: &Path) -> Result<()> {
    write_file(path, &heatmap_pgm(bev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::numerics::ShapedArray;

    fn grid(h: usize, c: usize, data: Vec<f64>) -> BevGrid<f64> {
        BevGrid::new(ShapedArray::new(vec![h, h, c], data).unwrap(), 1.0, h as f64 / 2.0).unwrap()
    }

    #[test]
    fn zero_grid_is_black() {
        let g = grid(4, 3, vec![0.0; 48]);
        let pgm = heatmap_pgm(&g);
        assert_eq!(&pgm[..11], b"P5\n4 4\n255\n");
        assert!(pgm[11..].iter().all(|&b| b == 0));
        assert_eq!(pgm.len(), 11 + 16);
    }

    #[test]
    fn one_hot_cell_is_single_white_pixel() {
        let mut d = vec![0.0; 4 * 4 * 2];
        d[(2 * 4 + 1) * 2 + 1] = -3.0;
        let pgm = heatmap_pgm(&grid(4, 2, d));
        let px = &pgm[11..];
        assert_eq!(px[2 * 4 + 1], 255);
        assert_eq!(px.iter().filter(|&&b| b != 0).count(), 1);
    }

    #[test]
    fn norm_is_over_channels() {
        let g = grid(2, 2, vec![3.0, 4.0, 0.0, 0.0, 0.0, 1.0, 6.0, 8.0]);
        assert_eq!(l2_norm_map(&g), vec![5.0, 0.0, 1.0, 10.0]);
        assert_eq!(&heatmap_pgm(&g)[11..], &[128, 0, 26, 255]);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        let g = grid(2, 1, vec![0.0; 4]);
        assert!(matches!(heatmap_export(&g, &blocker.join("a.pgm")), Err(Error::Io { .. })));
    }
}
