//! Forward kernels over [`ShapedArray`]. Every function here is pure: the same
//! inputs (including seeds) give bitwise identical outputs.
//!
//! Layout conventions: feature maps are `[H, W, C]` (channels last), batched
//! maps are `[N, H, W, C]`, sequences are `[L, C]`, linear weights are
//! `[in, out]` and convolution kernels are `[k, k, C_in, C_out]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::ShapedArray;
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Train/eval switch for dropout and batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

// ---------------------------------------------------------------------------
// raw slice helpers shared with the tape

/// `out[m,n] += a[m,k] * b[k,n]`
#[inline]
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += a[m,n] * b[k,n]^T`
#[inline]
pub(crate) fn gemm_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
#[inline]
pub(crate) fn gemm_tn_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[inline(always)]
/// Neumaier-compensated sum, accurate to about one rounding of the result.
pub fn compensated_sum<T: Scalar>(values: impl IntoIterator<Item = T>) -> T {
    let (mut s, mut c) = (T::zero(), T::zero());
    for v in values {
        let t = s + v;
        c += if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
        s = t;
    }
    s + c
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline(always)]
pub(crate) fn silu_scalar<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline(always)]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow
    if x > T::of(20.0) {
        x
    } else if x < T::of(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn reject_nan<T: Scalar>(op: &'static str, a: &ShapedArray<T>) -> Result<()> {
    match a.data().iter().position(|v| v.is_nan()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite {
            op,
            location: format!("NaN input at flat index {i} of shape {:?}", a.shape()),
        }),
    }
}

// ---------------------------------------------------------------------------
// linear kernels

/// `[m,k] x [k,n] -> [m,n]`
pub fn matmul<T: Scalar>(a: &ShapedArray<T>, b: &ShapedArray<T>) -> Result<ShapedArray<T>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    reject_nan("matmul", a)?;
    reject_nan("matmul", b)?;
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    gemm_acc(a.data(), b.data(), &mut out, m, k, n);
    ShapedArray::new(vec![m, n], out)
}

/// Affine map over the last axis: `x[..., in] . w[in, out] + b[out]`.
pub fn linear<T: Scalar>(
    x: &ShapedArray<T>,
    w: &ShapedArray<T>,
    b: Option<&ShapedArray<T>>,
) -> Result<ShapedArray<T>> {
    if w.ndim() != 2 || x.last_dim() != w.shape()[0] || x.ndim() == 0 {
        return Err(Error::dim("linear", x.shape(), w.shape()));
    }
    let (k, n) = (w.shape()[0], w.shape()[1]);
    if let Some(b) = b {
        if b.shape() != [n] {
            return Err(Error::dim("linear(bias)", w.shape(), b.shape()));
        }
    }
    reject_nan("linear", x)?;
    reject_nan("linear", w)?;
    let m = x.rows();
    let mut out = vec![T::zero(); m * n];
    if let Some(b) = b {
        for row in out.chunks_mut(n) {
            row.copy_from_slice(b.data());
        }
    }
    gemm_acc(x.data(), w.data(), &mut out, m, k, n);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    ShapedArray::new(shape, out)
}

/// Softmax over the last axis.
pub fn softmax_last<T: Scalar>(x: &ShapedArray<T>) -> Result<ShapedArray<T>> {
    x.check_finite("softmax")?;
    let c = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok(out)
}

/// `x * sigmoid(x)`
pub fn silu<T: Scalar>(x: &ShapedArray<T>) -> ShapedArray<T> {
    x.map(silu_scalar)
}

pub fn add<T: Scalar>(a: &ShapedArray<T>, b: &ShapedArray<T>) -> Result<ShapedArray<T>> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn mul<T: Scalar>(a: &ShapedArray<T>, b: &ShapedArray<T>) -> Result<ShapedArray<T>> {
    a.zip_map(b, "mul", |x, y| x * y)
}

/// Concatenate along the last axis. Leading shapes must agree.
pub fn concat_last<T: Scalar>(parts: &[&ShapedArray<T>]) -> Result<ShapedArray<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::arg("concat_last", "no inputs"))?;
    let lead = &first.shape()[..first.ndim() - 1];
    for p in parts {
        if p.ndim() != first.ndim() || &p.shape()[..p.ndim() - 1] != lead {
            return Err(Error::dim("concat_last", first.shape(), p.shape()));
        }
    }
    let widths: Vec<usize> = parts.iter().map(|p| p.last_dim()).collect();
    let total: usize = widths.iter().sum();
    let rows = first.rows();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            out.extend_from_slice(p.row(r));
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    ShapedArray::new(shape, out)
}

// ---------------------------------------------------------------------------
// convolution

/// Geometry of a square 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new<T: Scalar>(
        x: &ShapedArray<T>,
        kernel: &ShapedArray<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (xs, ks) = (x.shape(), kernel.shape());
        if xs.len() != 3 || ks.len() != 4 || ks[0] != ks[1] || ks[2] != xs[2] {
            return Err(Error::dim("conv2d", xs, ks));
        }
        let k = ks[0];
        if !matches!(k, 1 | 3 | 5) {
            return Err(Error::arg("conv2d", format!("kernel size {k} not in {{1,3,5}}")));
        }
        if stride == 0 {
            return Err(Error::arg("conv2d", "stride must be >= 1"));
        }
        let (h, w) = (xs[0], xs[1]);
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::dim("conv2d(kernel larger than padded input)", xs, ks));
        }
        Ok(Self {
            h,
            w,
            cin: xs[2],
            cout: ks[3],
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Input coordinate for output `o` and tap `t`, if inside the unpadded map.
    #[inline(always)]
    pub(crate) fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

/// Cross-correlation with zero padding: `[H,W,Cin] * [k,k,Cin,Cout] -> [H',W',Cout]`.
pub fn conv2d<T: Scalar>(
    x: &ShapedArray<T>,
    kernel: &ShapedArray<T>,
    stride: usize,
    pad: usize,
) -> Result<ShapedArray<T>> {
    let g = ConvGeom::new(x, kernel, stride, pad)?;
    let mut out = vec![T::zero(); g.ho * g.wo * g.cout];
    let (xd, kd) = (x.data(), kernel.data());
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let orow = &mut out[(oy * g.wo + ox) * g.cout..(oy * g.wo + ox + 1) * g.cout];
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xin = &xd[(iy * g.w + ix) * g.cin..(iy * g.w + ix + 1) * g.cin];
                    let kbase = (ky * g.k + kx) * g.cin * g.cout;
                    for (ci, &xv) in xin.iter().enumerate() {
                        let krow = &kd[kbase + ci * g.cout..kbase + (ci + 1) * g.cout];
                        for (o, &kv) in orow.iter_mut().zip(krow) {
                            *o += xv * kv;
                        }
                    }
                }
            }
        }
    }
    ShapedArray::new(vec![g.ho, g.wo, g.cout], out)
}

// ---------------------------------------------------------------------------
// normalization

/// Running statistics carried by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: ShapedArray<T>,
    pub var: ShapedArray<T>,
}

#[derive(Clone, Debug)]
pub struct BatchNormOutput<T> {
    pub y: ShapedArray<T>,
    /// Normalized pre-affine activations.
    pub xhat: ShapedArray<T>,
    /// Per-channel `1/sqrt(var + eps)` actually applied.
    pub invstd: Vec<T>,
    /// Updated running statistics (train mode only).
    pub running: Option<RunningStats<T>>,
}

/// Batch normalization over every axis but the last.
///
/// Train mode normalizes by biased batch statistics and returns running stats
/// updated with `momentum` (unbiased variance, as is conventional). Eval mode
/// normalizes by the supplied running statistics.
pub fn batchnorm2d<T: Scalar>(
    x: &ShapedArray<T>,
    gamma: &ShapedArray<T>,
    beta: &ShapedArray<T>,
    mode: Mode,
    eps: T,
    momentum: T,
    running: &RunningStats<T>,
) -> Result<BatchNormOutput<T>> {
    if eps <= T::zero() {
        return Err(Error::arg("batchnorm2d", "eps must be > 0"));
    }
    let c = x.last_dim();
    for p in [gamma, beta, &running.mean, &running.var] {
        if p.shape() != [c] {
            return Err(Error::dim("batchnorm2d", x.shape(), p.shape()));
        }
    }
    let n = x.rows();
    let (mean, var_b) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::arg(
                    "batchnorm2d",
                    format!("train mode needs >= 2 values per channel, got {n}"),
                ));
            }
            let mut mean = vec![T::zero(); c];
            for row in x.data().chunks(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            let nf = T::of(n as f64);
            mean.iter_mut().for_each(|m| *m /= nf);
            let mut var = vec![T::zero(); c];
            for row in x.data().chunks(c) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v - m;
                    *s += d * d;
                }
            }
            var.iter_mut().for_each(|s| *s /= nf);
            (mean, var)
        }
        Mode::Eval => (running.mean.data().to_vec(), running.var.data().to_vec()),
    };
    let invstd: Vec<T> = var_b.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for (xr, yr) in xhat.data_mut().chunks_mut(c).zip(y.data_mut().chunks_mut(c)) {
        for ch in 0..c {
            let h = (xr[ch] - mean[ch]) * invstd[ch];
            xr[ch] = h;
            yr[ch] = gamma.data()[ch] * h + beta.data()[ch];
        }
    }
    let running = match mode {
        Mode::Train => {
            let unbias = T::of(n as f64 / (n as f64 - 1.0));
            let one = T::one();
            let rm = ShapedArray::from_fn(&[c], |i| {
                (one - momentum) * running.mean.data()[i] + momentum * mean[i]
            });
            let rv = ShapedArray::from_fn(&[c], |i| {
                (one - momentum) * running.var.data()[i] + momentum * var_b[i] * unbias
            });
            Some(RunningStats { mean: rm, var: rv })
        }
        Mode::Eval => None,
    };
    Ok(BatchNormOutput {
        y,
        xhat,
        invstd,
        running,
    })
}

#[derive(Clone, Debug)]
pub struct LayerNormOutput<T> {
    pub y: ShapedArray<T>,
    pub xhat: ShapedArray<T>,
    /// One `1/sqrt(var + eps)` per row.
    pub invstd: Vec<T>,
}

pub(crate) fn layernorm_parts<T: Scalar>(
    x: &ShapedArray<T>,
    gamma: &ShapedArray<T>,
    beta: &ShapedArray<T>,
    eps: T,
) -> Result<LayerNormOutput<T>> {
    let c = x.last_dim();
    if c == 0 || x.ndim() == 0 {
        return Err(Error::arg("layernorm", "last axis must be non-empty"));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim("layernorm", x.shape(), gamma.shape()));
    }
    if eps <= T::zero() {
        return Err(Error::arg("layernorm", "eps must be > 0"));
    }
    let cf = T::of(c as f64);
    let mut xhat = x.clone();
    let mut y = x.clone();
    let mut invstd = Vec::with_capacity(x.rows());
    for (hr, yr) in xhat.data_mut().chunks_mut(c).zip(y.data_mut().chunks_mut(c)) {
        let mean = hr.iter().copied().sum::<T>() / cf;
        let var = hr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
        let is = T::one() / (var + eps).sqrt();
        invstd.push(is);
        for ch in 0..c {
            let h = (hr[ch] - mean) * is;
            hr[ch] = h;
            yr[ch] = gamma.data()[ch] * h + beta.data()[ch];
        }
    }
    Ok(LayerNormOutput { y, xhat, invstd })
}

/// Per-position normalization over the last axis, then affine.
pub fn layernorm<T: Scalar>(
    x: &ShapedArray<T>,
    gamma: &ShapedArray<T>,
    beta: &ShapedArray<T>,
    eps: T,
) -> Result<ShapedArray<T>> {
    Ok(layernorm_parts(x, gamma, beta, eps)?.y)
}

// ---------------------------------------------------------------------------
// dropout

/// Keep-mask for inverted dropout; `true` means kept.
pub fn dropout_mask(n: usize, p: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<f64>() >= p).collect()
}

/// Inverted dropout. Eval mode returns the input unchanged.
pub fn dropout<T: Scalar>(x: &ShapedArray<T>, p: f64, mode: Mode, seed: u64) -> Result<ShapedArray<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::arg("dropout", format!("p = {p} outside [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x.clone());
    }
    let scale = T::of(1.0 / (1.0 - p));
    let mask = dropout_mask(x.len(), p, seed);
    let mut y = x.clone();
    for (v, keep) in y.data_mut().iter_mut().zip(mask) {
        *v = if keep { *v * scale } else { T::zero() };
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// bilinear sampling

/// Up to four `(flat cell index, weight)` taps for a continuous `(row, col)`
/// location on an `h x w` lattice. Integer coordinates are cell centers;
/// taps outside the lattice or with zero weight are omitted.
#[inline]
pub(crate) fn bilinear_taps<T: Scalar>(row: T, col: T, h: usize, w: usize) -> ([(usize, T); 4], usize) {
    let mut taps = [(0usize, T::zero()); 4];
    let mut n = 0;
    if !row.is_finite() || !col.is_finite() {
        return (taps, 0);
    }
    let r0 = row.floor();
    let c0 = col.floor();
    let fr = row - r0;
    let fc = col - c0;
    let one = T::one();
    let (r0, c0) = (r0.as_f64() as i64, c0.as_f64() as i64);
    let cand = [
        (r0, c0, (one - fr) * (one - fc)),
        (r0, c0 + 1, (one - fr) * fc),
        (r0 + 1, c0, fr * (one - fc)),
        (r0 + 1, c0 + 1, fr * fc),
    ];
    for (r, c, wt) in cand {
        if wt != T::zero() && r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
            taps[n] = (r as usize * w + c as usize, wt);
            n += 1;
        }
    }
    (taps, n)
}

/// Bilinear interpolation of `map [H,W,C]` at `(row, col)` points; samples
/// outside the lattice read zeros.
pub fn bilinear_sample<T: Scalar>(map: &ShapedArray<T>, points: &[[T; 2]]) -> Result<ShapedArray<T>> {
    if map.ndim() != 3 {
        return Err(Error::dim("bilinear_sample", map.shape(), &[0, 0, 0]));
    }
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let mut out = vec![T::zero(); points.len() * c];
    for (p, orow) in points.iter().zip(out.chunks_mut(c.max(1))) {
        let (taps, n) = bilinear_taps(p[0], p[1], h, w);
        for &(cell, wt) in &taps[..n] {
            let src = &map.data()[cell * c..(cell + 1) * c];
            for (o, &v) in orow.iter_mut().zip(src) {
                *o += wt * v;
            }
        }
    }
    ShapedArray::new(vec![points.len(), c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn naive_matmul(a: &ShapedArray<f64>, b: &ShapedArray<f64>) -> ShapedArray<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = ShapedArray::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(&[i, p]) * b.get(&[p, j]);
                }
                out.set(&[i, j], s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_oracle() {
        let mut r = rng(1);
        let x = ShapedArray::<f64>::randn(&[3, 4], 1.0, &mut r);
        assert_eq!(matmul(&ShapedArray::eye(3), &x).unwrap(), x);
        let a = ShapedArray::<f64>::randn(&[4, 5], 1.0, &mut r);
        let b = ShapedArray::<f64>::randn(&[5, 3], 1.0, &mut r);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) <= 1e-6);
        let a32 = a.cast::<f32>();
        let b32 = b.cast::<f32>();
        let got = matmul(&a32, &b32).unwrap().cast::<f64>();
        assert!(got.max_abs_diff(&naive_matmul(&a32.cast(), &b32.cast())) <= 1e-5);
    }

    #[test]
    fn matmul_rejects_bad_shapes_and_nan() {
        let a = ShapedArray::<f32>::zeros(&[2, 3]);
        let b = ShapedArray::<f32>::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        let mut c = ShapedArray::<f32>::zeros(&[3, 2]);
        c.data_mut()[4] = f32::NAN;
        assert!(matches!(matmul(&a, &c), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn softmax_uniform_and_normalized() {
        let s = softmax_last(&ShapedArray::<f64>::zeros(&[1, 3])).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = ShapedArray::<f64>::randn(&[16, 9], 3.0, &mut rng(2));
        let s = softmax_last(&x).unwrap();
        for r in 0..16 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
        let mut bad = x.clone();
        bad.data_mut()[0] = f64::INFINITY;
        assert!(softmax_last(&bad).is_err());
    }

    #[test]
    fn silu_definition() {
        let x = ShapedArray::<f64>::new(vec![3], vec![-2.0, 0.0, 1.5]).unwrap();
        let y = silu(&x);
        for (&a, &b) in x.data().iter().zip(y.data()) {
            assert!((b - a / (1.0 + (-a).exp())).abs() < 1e-15);
        }
    }

    fn naive_conv(x: &ShapedArray<f64>, k: &ShapedArray<f64>, stride: usize, pad: usize) -> ShapedArray<f64> {
        let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (kk, cout) = (k.shape()[0], k.shape()[3]);
        let ho = (h + 2 * pad - kk) / stride + 1;
        let wo = (w + 2 * pad - kk) / stride + 1;
        let mut out = ShapedArray::zeros(&[ho, wo, cout]);
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut s = 0.0;
                    for ky in 0..kk {
                        for kx in 0..kk {
                            for ci in 0..cin {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += x.get(&[iy as usize, ix as usize, ci]) * k.get(&[ky, kx, ci, co]);
                            }
                        }
                    }
                    out.set(&[oy, ox, co], s);
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_constant_and_oracle() {
        let mut r = rng(3);
        let x = ShapedArray::<f64>::randn(&[5, 6, 4], 1.0, &mut r);
        let id = ShapedArray::eye(4).into_shape(&[1, 1, 4, 4]).unwrap();
        assert_eq!(conv2d(&x, &id, 1, 0).unwrap(), x);

        let c = 0.75;
        let xc = ShapedArray::<f64>::full(&[6, 6, 1], c);
        let ones = ShapedArray::<f64>::ones(&[3, 3, 1, 1]);
        let y = conv2d(&xc, &ones, 1, 1).unwrap();
        assert_eq!(y.shape(), &[6, 6, 1]);
        for i in 1..5 {
            for j in 1..5 {
                assert_eq!(y.get(&[i, j, 0]), 9.0 * c);
            }
        }

        let x = ShapedArray::<f64>::randn(&[8, 8, 4], 1.0, &mut r);
        let k = ShapedArray::<f64>::randn(&[3, 3, 4, 2], 1.0, &mut r);
        let want = naive_conv(&x, &k, 1, 1);
        let got = conv2d(&x.cast::<f32>(), &k.cast::<f32>(), 1, 1).unwrap().cast::<f64>();
        assert!(got.max_abs_diff(&want) <= 1e-5);
        assert!(conv2d(&x, &k, 1, 1).unwrap().max_abs_diff(&want) <= 1e-10);
        let k5 = ShapedArray::<f64>::randn(&[5, 5, 4, 3], 1.0, &mut r);
        assert!(conv2d(&x, &k5, 2, 2).unwrap().max_abs_diff(&naive_conv(&x, &k5, 2, 2)) <= 1e-10);
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = ShapedArray::<f32>::zeros(&[2, 2, 1]);
        let k = ShapedArray::<f32>::zeros(&[5, 5, 1, 1]);
        assert!(matches!(conv2d(&x, &k, 1, 0), Err(Error::Dimension { .. })));
    }

    fn stats(c: usize) -> RunningStats<f64> {
        RunningStats {
            mean: ShapedArray::zeros(&[c]),
            var: ShapedArray::ones(&[c]),
        }
    }

    #[test]
    fn batchnorm_cases() {
        let x = ShapedArray::<f64>::full(&[2, 3, 3, 2], 4.0);
        let g = ShapedArray::ones(&[2]);
        let b = ShapedArray::zeros(&[2]);
        let out = batchnorm2d(&x, &g, &b, Mode::Train, 1e-5, 0.1, &stats(2)).unwrap();
        assert!(out.y.data().iter().all(|&v| v == 0.0));
        let rs = out.running.unwrap();
        assert!((rs.mean.data()[0] - 0.4).abs() < 1e-12);

        let out = batchnorm2d(&x, &ShapedArray::zeros(&[2]), &ShapedArray::full(&[2], 5.0), Mode::Train, 1e-5, 0.1, &stats(2)).unwrap();
        assert!(out.y.data().iter().all(|&v| v == 5.0));

        let x = ShapedArray::<f64>::randn(&[2, 4, 4, 3], 2.0, &mut rng(4)).map(|v| v + 1.5);
        let out = batchnorm2d(&x, &ShapedArray::ones(&[3]), &ShapedArray::zeros(&[3]), Mode::Train, 1e-5, 0.1, &stats(3)).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = out.xhat.data().iter().skip(ch).step_by(3).copied().collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() <= 1e-5);
            assert!((var - 1.0).abs() <= 1e-3);
        }

        assert!(batchnorm2d(&x, &ShapedArray::ones(&[3]), &ShapedArray::zeros(&[3]), Mode::Train, 0.0, 0.1, &stats(3)).is_err());
        let single = ShapedArray::<f64>::zeros(&[1, 1, 1, 3]);
        assert!(batchnorm2d(&single, &ShapedArray::ones(&[3]), &ShapedArray::zeros(&[3]), Mode::Train, 1e-5, 0.1, &stats(3)).is_err());
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let x = ShapedArray::<f64>::new(vec![1, 1, 2, 1], vec![3.0, 5.0]).unwrap();
        let rs = RunningStats {
            mean: ShapedArray::full(&[1], 1.0),
            var: ShapedArray::full(&[1], 4.0 - 1e-5),
        };
        let out = batchnorm2d(&x, &ShapedArray::ones(&[1]), &ShapedArray::zeros(&[1]), Mode::Eval, 1e-5, 0.1, &rs).unwrap();
        assert!((out.y.data()[0] - 1.0).abs() < 1e-12);
        assert!((out.y.data()[1] - 2.0).abs() < 1e-12);
        assert!(out.running.is_none());
    }

    #[test]
    fn layernorm_cases() {
        let g = ShapedArray::<f64>::ones(&[4]);
        let b = ShapedArray::<f64>::zeros(&[4]);
        let y = layernorm(&ShapedArray::full(&[1, 4], 2.5), &g, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let x = ShapedArray::<f64>::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let y = layernorm(&x, &ShapedArray::ones(&[2]), &ShapedArray::zeros(&[2]), 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-9 && (y.data()[1] + 1.0).abs() < 1e-9);

        let mut r = rng(5);
        let x = ShapedArray::<f64>::randn(&[7, 256], 1.0, &mut r);
        let g = ShapedArray::<f64>::randn(&[256], 1.0, &mut r);
        let b = ShapedArray::<f64>::randn(&[256], 1.0, &mut r);
        let y = layernorm(&x, &g, &b, 1e-5).unwrap();
        for row in 0..7 {
            let v = x.row(row);
            let mean = v.iter().sum::<f64>() / 256.0;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 256.0;
            for c in 0..256 {
                let want = (v[c] - mean) / (var + 1e-5).sqrt() * g.data()[c] + b.data()[c];
                assert!((y.get(&[row, c]) - want).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn dropout_cases() {
        let x = ShapedArray::<f32>::randn(&[100], 1.0, &mut rng(6));
        let y = dropout(&x, 0.5, Mode::Eval, 1).unwrap();
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(dropout(&x, 0.0, Mode::Train, 1).unwrap(), x);
        assert!(dropout(&x, 1.0, Mode::Train, 1).is_err());

        let ones = ShapedArray::<f64>::ones(&[100_000]);
        let y = dropout(&ones, 0.9, Mode::Train, 7).unwrap();
        let mean = y.sum() / 1e5;
        assert!((mean - 1.0).abs() <= 0.02, "mean {mean}");
        assert_eq!(y, dropout(&ones, 0.9, Mode::Train, 7).unwrap());
    }

    #[test]
    fn bilinear_cases() {
        let map = ShapedArray::<f64>::randn(&[4, 5, 3], 1.0, &mut rng(8));
        let s = bilinear_sample(&map, &[[2.0, 3.0]]).unwrap();
        assert_eq!(s.row(0), &map.data()[(2 * 5 + 3) * 3..(2 * 5 + 4) * 3]);
        let s = bilinear_sample(&map, &[[1.0, 2.5]]).unwrap();
        for c in 0..3 {
            let want = 0.5 * (map.get(&[1, 2, c]) + map.get(&[1, 3, c]));
            assert!((s.get(&[0, c]) - want).abs() < 1e-15);
        }
        let s = bilinear_sample(&map, &[[-10.0, -10.0]]).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
        // half outside: only in-grid taps contribute
        let s = bilinear_sample(&map, &[[-0.5, 0.0]]).unwrap();
        for c in 0..3 {
            assert!((s.get(&[0, c]) - 0.5 * map.get(&[0, 0, c])).abs() < 1e-15);
        }
    }
}
