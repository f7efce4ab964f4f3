//! BEV grids, their four-direction serialization into sequences, the
//! averaging inverse, and ego-motion alignment of past grids.
//!
//! Grids are `[H, W, C]` row-major. Cell `(i, j)` has its center at
//! `x = (j + 0.5)·r − R`, `y = (i + 0.5)·r − R` meters, where `r` is the
//! resolution and `R` the half-range, so columns run along `x` and rows
//! along `y`.

use std::f64::consts::PI;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::bilinear_sample;
use crate::numerics::{Scalar, ShapedArray, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct BevGrid<T> {
    pub resolution: f64,
    pub range: f64,
    /// `[H, W, C]`
    pub data: ShapedArray<T>,
}

impl<T: Scalar> BevGrid<T> {
    pub fn new(data: ShapedArray<T>, resolution: f64, range: f64) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s[0] != s[1] || s[0] == 0 {
            return Err(Error::arg("BevGrid", format!("need a square [H, W, C] grid, got {s:?}")));
        }
        check_extent(s[0], resolution, range)?;
        Ok(Self {
            resolution,
            range,
            data,
        })
    }

    pub fn zeros(size: usize, channels: usize, resolution: f64, range: f64) -> Result<Self> {
        Self::new(ShapedArray::zeros(&[size, size, channels]), resolution, range)
    }

    pub fn cast<U: Scalar>(&self) -> BevGrid<U> {
        BevGrid {
            resolution: self.resolution,
            range: self.range,
            data: self.data.cast(),
        }
    }

    pub fn h(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn c(&self) -> usize {
        self.data.shape()[2]
    }

    /// Metric center of cell `(i, j)`.
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            (j as f64 + 0.5) * self.resolution - self.range,
            (i as f64 + 0.5) * self.resolution - self.range,
        )
    }

    /// Continuous `(row, col)` of a metric point; integers are cell centers.
    pub fn to_cell(&self, x: f64, y: f64) -> (f64, f64) {
        ((y + self.range) / self.resolution - 0.5, (x + self.range) / self.resolution - 0.5)
    }
}

/// `size · resolution` must equal `2 · range`.
pub fn check_extent(size: usize, resolution: f64, range: f64) -> Result<()> {
    let span = size as f64 * resolution;
    if !(resolution > 0.0) || (span - 2.0 * range).abs() > 1e-9 * span.max(1.0) {
        return Err(Error::Config(format!(
            "grid of {size} cells at {resolution} m/cell spans {span} m, but 2·range = {}",
            2.0 * range
        )));
    }
    Ok(())
}

/// Planar ego pose; `yaw` is kept in `(−π, π]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

impl EgoPose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw: wrap_angle(yaw) }
    }

    /// Pose of `self` expressed in the frame of `reference` (both given in
    /// a common world frame).
    pub fn relative_to(&self, reference: &EgoPose) -> EgoPose {
        let (s, c) = reference.yaw.sin_cos();
        let (dx, dy) = (self.x - reference.x, self.y - reference.y);
        EgoPose::new(c * dx + s * dy, -s * dx + c * dy, self.yaw - reference.yaw)
    }

    /// Map a point from this pose's frame to the parent frame.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (c * x - s * y + self.x, s * x + c * y + self.y)
    }

    /// Map a point from the parent frame into this pose's frame.
    pub fn apply_inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.x, y - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

/// Which parts of the relative pose [`ego_align`] uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub rotation: bool,
    pub translation: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            rotation: true,
            translation: true,
        }
    }
}

/// Resample `hist` into the current ego frame. `delta` is the current pose
/// expressed in the historical frame; each current cell center `p` is read
/// from the historical grid at `R(yaw)·p + t` by bilinear interpolation,
/// with zeros outside the grid.
pub fn ego_align<T: Scalar>(hist: &BevGrid<T>, delta: &EgoPose, cfg: AlignConfig) -> Result<BevGrid<T>> {
    let (h, w) = (hist.h(), hist.w());
    let yaw = if cfg.rotation { delta.yaw } else { 0.0 };
    let (tx, ty) = if cfg.translation { (delta.x, delta.y) } else { (0.0, 0.0) };
    let (s, c) = yaw.sin_cos();
    let (hw, hh) = (w as f64 / 2.0, h as f64 / 2.0);
    let (tc, tr) = (tx / hist.resolution, ty / hist.resolution);
    // cell units centred on the grid keep the identity pose lattice-exact
    let mut pts = Vec::with_capacity(h * w);
    for i in 0..h {
        let v = i as f64 + 0.5 - hh;
        for j in 0..w {
            let u = j as f64 + 0.5 - hw;
            let col = c * u - s * v + tc + hw - 0.5;
            let row = s * u + c * v + tr + hh - 0.5;
            pts.push([T::of(row), T::of(col)]);
        }
    }
    let out = bilinear_sample(&hist.data, &pts)?.into_shape(hist.data.shape())?;
    Ok(BevGrid {
        resolution: hist.resolution,
        range: hist.range,
        data: out,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Row-major, left to right, rows top to bottom.
    ForwardLeft,
    /// Column-major, top to bottom, columns left to right.
    ForwardUp,
    ReverseLeft,
    ReverseUp,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::ForwardLeft,
        Direction::ForwardUp,
        Direction::ReverseLeft,
        Direction::ReverseUp,
    ];
}

/// The four serialization orders of an `H x W` grid.
#[derive(Clone, Debug)]
pub struct DirectionalLayout {
    pub h: usize,
    pub w: usize,
    /// `perm[d][cell]` is the sequence position of `cell` under direction `d`.
    pub perm: [Rc<[usize]>; 4],
    /// `order[d][pos]` is the cell visited at position `pos`.
    pub order: [Rc<[usize]>; 4],
}

pub fn build_layout(h: usize, w: usize) -> Result<DirectionalLayout> {
    if h == 0 || w == 0 {
        return Err(Error::arg("build_layout", format!("grid {h}x{w} is empty")));
    }
    let fwd_l: Vec<usize> = (0..h * w).collect();
    let fwd_u: Vec<usize> = (0..w).flat_map(|j| (0..h).map(move |i| i * w + j)).collect();
    let rev_l: Vec<usize> = fwd_l.iter().rev().copied().collect();
    let rev_u: Vec<usize> = fwd_u.iter().rev().copied().collect();
    let order = [fwd_l, fwd_u, rev_l, rev_u];
    let perm = order.clone().map(|o| {
        let mut p = vec![0; o.len()];
        for (pos, &cell) in o.iter().enumerate() {
            p[cell] = pos;
        }
        Rc::from(p)
    });
    Ok(DirectionalLayout {
        h,
        w,
        perm,
        order: order.map(Rc::from),
    })
}

impl DirectionalLayout {
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scan orders of the first `directions` directions (1 or 4).
    pub fn orders(&self, directions: usize) -> Result<Vec<Rc<[usize]>>> {
        check_directions(directions)?;
        Ok(self.order[..directions].to_vec())
    }

    fn check_grid(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[0] != self.h || shape[1] != self.w {
            return Err(Error::dim("rearrange", shape, &[self.h, self.w]));
        }
        Ok(())
    }
}

fn check_directions(d: usize) -> Result<()> {
    if d != 1 && d != 4 {
        return Err(Error::Config(format!("directions must be 1 or 4, got {d}")));
    }
    Ok(())
}

fn gather<T: Scalar>(src: &[T], c: usize, idx: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(idx.len() * c);
    for &r in idx {
        out.extend_from_slice(&src[r * c..(r + 1) * c]);
    }
    out
}

/// Serialize `[H, W, C]` into `directions` sequences of shape `[H·W, C]`.
pub fn rearrange<T: Scalar>(z: &ShapedArray<T>, layout: &DirectionalLayout, directions: usize) -> Result<Vec<ShapedArray<T>>> {
    layout.check_grid(z.shape())?;
    check_directions(directions)?;
    let c = z.shape()[2];
    layout.order[..directions]
        .iter()
        .map(|o| ShapedArray::new(vec![layout.len(), c], gather(z.data(), c, o)))
        .collect()
}

/// Inverse of [`rearrange`]: restore grid order and average over directions
/// as `((s0 + s1) + (s2 + s3)) / 4`.
pub fn remerge<T: Scalar>(seqs: &[ShapedArray<T>], layout: &DirectionalLayout) -> Result<ShapedArray<T>> {
    check_directions(seqs.len())?;
    let shape = seqs[0].shape().to_vec();
    if shape.len() != 2 || shape[0] != layout.len() {
        return Err(Error::dim("remerge", &shape, &[layout.len()]));
    }
    if let Some(bad) = seqs.iter().find(|s| s.shape() != shape) {
        return Err(Error::dim("remerge", bad.shape(), &shape));
    }
    let c = shape[1];
    let grids: Vec<Vec<T>> = seqs.iter().zip(&layout.perm).map(|(s, p)| gather(s.data(), c, p)).collect();
    let data = if grids.len() == 1 {
        grids.into_iter().next().unwrap()
    } else {
        let q = T::of(0.25);
        (0..grids[0].len())
            .map(|k| ((grids[0][k] + grids[1][k]) + (grids[2][k] + grids[3][k])) * q)
            .collect()
    };
    ShapedArray::new(vec![layout.h, layout.w, c], data)
}

/// Differentiable [`remerge`] of `[H·W, C]` sequences on a tape, returning
/// `[H·W, C]` rows in grid order.
pub fn remerge_tape<T: Scalar>(tape: &mut Tape<T>, seqs: &[Var], layout: &DirectionalLayout) -> Result<Var> {
    check_directions(seqs.len())?;
    let mut parts = Vec::with_capacity(seqs.len());
    for (&s, p) in seqs.iter().zip(&layout.perm) {
        parts.push(tape.gather_rows(s, p.clone())?);
    }
    crate::ssd::mean_pairwise(tape, &parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_by_two_orders() {
        let l = build_layout(2, 2).unwrap();
        // a b / c d = 0 1 / 2 3
        assert_eq!(&*l.order[0], &[0, 1, 2, 3]);
        assert_eq!(&*l.order[1], &[0, 2, 1, 3]);
        assert_eq!(&*l.order[2], &[3, 2, 1, 0]);
        assert_eq!(&*l.order[3], &[3, 1, 2, 0]);
    }

    #[test]
    fn single_row_directions_coincide() {
        let l = build_layout(1, 5).unwrap();
        assert_eq!(l.order[0], l.order[1]);
        assert!(build_layout(0, 3).is_err());
    }

    #[test]
    fn permutations_are_bijections_on_tiny_grid() {
        let l = build_layout(50, 50).unwrap();
        for d in 0..4 {
            let mut count = vec![0u8; 2500];
            for &c in l.order[d].iter() {
                count[c] += 1;
            }
            assert!(count.iter().all(|&k| k == 1));
            for pos in 0..2500 {
                assert_eq!(l.perm[d][l.order[d][pos]], pos);
            }
        }
    }

    #[test]
    fn raster_adjacency_has_no_serpentine() {
        let (h, w) = (6, 7);
        let l = build_layout(h, w).unwrap();
        let dist = |a: usize, b: usize| (a / w).abs_diff(b / w) + (a % w).abs_diff(b % w);
        for pos in 1..h * w {
            let (a, b) = (l.order[0][pos - 1], l.order[0][pos]);
            if pos % w == 0 {
                assert_eq!(dist(a, b), w);
                assert_eq!(b % w, 0);
            } else {
                assert_eq!(dist(a, b), 1);
                assert_eq!(b, a + 1);
            }
            let (a, b) = (l.order[1][pos - 1], l.order[1][pos]);
            if pos % h == 0 {
                assert_eq!(a / w, h - 1);
                assert_eq!(b / w, 0);
            } else {
                assert_eq!(b, a + w);
            }
        }
    }

    #[test]
    fn remerge_linearity_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = build_layout(5, 5).unwrap();
        let z = ShapedArray::<f64>::randn(&[5, 5, 3], 1.0, &mut rng);
        let z2 = ShapedArray::<f64>::randn(&[5, 5, 3], 1.0, &mut rng);
        let mut s = rearrange(&z, &l, 4).unwrap();
        s[2] = ShapedArray::zeros(&[25, 3]);
        assert!(remerge(&s, &l).unwrap().max_abs_diff(&z.scale(0.75)) < 1e-15);
        let mut s = rearrange(&z, &l, 4).unwrap();
        s[1] = rearrange(&z2, &l, 4).unwrap()[1].clone();
        let want = z.scale(3.0).zip_map(&z2, "t", |a, b| (a + b) / 4.0).unwrap();
        assert!(remerge(&s, &l).unwrap().max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn size_mismatches_are_rejected() {
        let l = build_layout(3, 3).unwrap();
        assert!(rearrange(&ShapedArray::<f32>::zeros(&[3, 4, 2]), &l, 4).is_err());
        assert!(rearrange(&ShapedArray::<f32>::zeros(&[3, 3, 2]), &l, 2).is_err());
        let s = vec![ShapedArray::<f32>::zeros(&[9, 2]); 3];
        assert!(remerge(&s, &l).is_err());
    }

    #[test]
    fn tape_remerge_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = build_layout(4, 3).unwrap();
        let z = ShapedArray::<f64>::randn(&[4, 3, 2], 1.0, &mut rng);
        let seqs = rearrange(&z, &l, 4).unwrap();
        let ps = crate::numerics::ParamStore::new();
        let mut tape = Tape::inference(&ps);
        let vars: Vec<Var> = seqs.iter().map(|s| tape.constant(s.clone())).collect();
        let out = remerge_tape(&mut tape, &vars, &l).unwrap();
        assert_eq!(tape.value(out).data(), z.data());
    }

    fn grid(z: ShapedArray<f64>) -> BevGrid<f64> {
        let n = z.shape()[0];
        BevGrid::new(z, 2.048, n as f64 * 1.024).unwrap()
    }

    #[test]
    fn extent_constraint() {
        assert!(BevGrid::<f32>::zeros(50, 4, 2.048, 51.2).is_ok());
        assert!(matches!(BevGrid::<f32>::zeros(50, 4, 2.0, 51.2), Err(Error::Config(_))));
    }

    #[test]
    fn identity_alignment_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = grid(ShapedArray::randn(&[9, 9, 4], 1.0, &mut rng));
        let out = ego_align(&g, &EgoPose::default(), AlignConfig::default()).unwrap();
        assert_eq!(out.data, g.data);
    }

    #[test]
    fn translation_shifts_one_cell() {
        let mut z = ShapedArray::<f64>::zeros(&[7, 7, 1]);
        z.set(&[3, 3, 0], 1.0);
        let g = grid(z);
        let out = ego_align(&g, &EgoPose::new(2.048, 0.0, 0.0), AlignConfig::default()).unwrap();
        let mut want = ShapedArray::<f64>::zeros(&[7, 7, 1]);
        want.set(&[3, 2, 0], 1.0);
        assert_eq!(out.data, want);
        let off = AlignConfig {
            translation: false,
            ..Default::default()
        };
        assert_eq!(ego_align(&g, &EgoPose::new(2.048, 0.0, 0.0), off).unwrap().data, g.data);
    }

    #[test]
    fn rotation_round_trip_on_smooth_field() {
        let n = 50;
        let z = ShapedArray::from_fn(&[n, n, 2], |k| {
            let (i, j, c) = (k / (2 * n), (k / 2) % n, k % 2);
            let (x, y) = (i as f64 / 40.0, j as f64 / 40.0);
            1.5 + (2.0 * PI * x + c as f64).sin() * (2.0 * PI * y).cos()
        });
        let g = grid(z);
        let a = ego_align(&g, &EgoPose::new(0.0, 0.0, 0.3), AlignConfig::default()).unwrap();
        let b = ego_align(&a, &EgoPose::new(0.0, 0.0, -0.3), AlignConfig::default()).unwrap();
        let zmax = g.data.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let (x, y) = g.cell_center(i, j);
                // a circle that survives a rotation of the square grid
                if (x * x + y * y).sqrt() > g.range - 4.0 * g.resolution {
                    continue;
                }
                for c in 0..2 {
                    worst = worst.max((b.data.get(&[i, j, c]) - g.data.get(&[i, j, c])).abs());
                }
            }
        }
        assert!(worst / zmax <= 1e-2, "{worst}");
    }

    #[test]
    fn relative_pose() {
        let hist = EgoPose::new(10.0, 5.0, PI / 2.0);
        let cur = EgoPose::new(10.0, 7.0, PI / 2.0 + 0.1);
        let d = cur.relative_to(&hist);
        assert!((d.x - 2.0).abs() < 1e-12 && d.y.abs() < 1e-12 && (d.yaw - 0.1).abs() < 1e-12);
        let p = d.apply(1.0, 0.0);
        let back = d.apply_inverse(p.0, p.1);
        assert!((back.0 - 1.0).abs() < 1e-12 && back.1.abs() < 1e-12);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI + 0.5) - (-PI + 0.5)).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_is_bitwise(seed in any::<u64>(), size in prop::sample::select(vec![2usize, 7, 50]), dirs in prop::sample::select(vec![1usize, 4])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = build_layout(size, size).unwrap();
            let z = ShapedArray::<f32>::randn(&[size, size, 3], 1.0, &mut rng);
            let back = remerge(&rearrange(&z, &l, dirs).unwrap(), &l).unwrap();
            prop_assert_eq!(back, z);
        }

        #[test]
        fn alignment_is_linear(seed in any::<u64>(), x in -3.0f64..3.0, y in -3.0f64..3.0, yaw in -PI..PI, a in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z1 = ShapedArray::<f64>::randn(&[8, 8, 2], 1.0, &mut rng);
            let z2 = ShapedArray::<f64>::randn(&[8, 8, 2], 1.0, &mut rng);
            let d = EgoPose::new(x, y, yaw);
            let cfg = AlignConfig::default();
            let combo = z1.zip_map(&z2, "t", |p, q| a * p + q).unwrap();
            let lhs = ego_align(&grid(combo), &d, cfg).unwrap().data;
            let r1 = ego_align(&grid(z1), &d, cfg).unwrap().data;
            let r2 = ego_align(&grid(z2), &d, cfg).unwrap().data;
            let rhs = r1.zip_map(&r2, "t", |p, q| a * p + q).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-6);
        }
    }
}
