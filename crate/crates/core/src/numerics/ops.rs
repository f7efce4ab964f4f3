//! Differentiable primitives recorded on a [`Tape`].

use std::rc::Rc;

use super::array::ShapedArray;
use super::kernels::{self, bilinear_taps, gemm_nt_acc, gemm_tn_acc, sigmoid, ConvGeom, Mode, RunningStats};
use super::scalar::Scalar;
use super::tape::{ParamId, Tape, Var};
use crate::error::{Error, Result};

fn col_sums<T: Scalar>(g: &ShapedArray<T>) -> ShapedArray<T> {
    let c = g.last_dim();
    let mut s = vec![T::zero(); c];
    for row in g.data().chunks(c) {
        for (a, &b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    ShapedArray::new(vec![c], s).unwrap()
}

/// Bilinear taps including zero-weight in-range neighbours, with the weight
/// derivatives with respect to the row and column coordinates.
fn bilinear_grad_taps<T: Scalar>(row: T, col: T, h: usize, w: usize) -> ([(usize, T, T, T); 4], usize) {
    let mut out = [(0usize, T::zero(), T::zero(), T::zero()); 4];
    let mut n = 0;
    if !row.is_finite() || !col.is_finite() {
        return (out, 0);
    }
    let r0f = row.floor();
    let c0f = col.floor();
    let fr = row - r0f;
    let fc = col - c0f;
    let one = T::one();
    let (r0, c0) = (r0f.as_f64() as i64, c0f.as_f64() as i64);
    let cand = [
        (r0, c0, (one - fr) * (one - fc), -(one - fc), -(one - fr)),
        (r0, c0 + 1, (one - fr) * fc, -fc, one - fr),
        (r0 + 1, c0, fr * (one - fc), one - fc, -fr),
        (r0 + 1, c0 + 1, fr * fc, fc, fr),
    ];
    for (r, c, wt, dr, dc) in cand {
        if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
            out[n] = (r as usize * w + c as usize, wt, dr, dc);
            n += 1;
        }
    }
    (out, n)
}

impl<T: Scalar> Tape<'_, T> {
    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var {
        let y = self.value(a).map(f);
        self.push_op(y, &[a], move |ctx, g| {
            let x = ctx.value(a).data();
            let gx = g.data().iter().zip(x).map(|(&gv, &xv)| df(xv, gv)).collect();
            vec![(a, ShapedArray::new(g.shape().to_vec(), gx).unwrap())]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push_op(y, &[a, b], move |_, g| vec![(a, g.clone()), (b, g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push_op(y, &[a, b], move |_, g| vec![(a, g.clone()), (b, g.map(|v| -v))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::mul(self.value(a), self.value(b))?;
        Ok(self.push_op(y, &[a, b], move |ctx, g| {
            let mut out = Vec::with_capacity(2);
            if ctx.needs(a) {
                out.push((a, g.zip_map(ctx.value(b), "mul", |x, y| x * y).unwrap()));
            }
            if ctx.needs(b) {
                out.push((b, g.zip_map(ctx.value(a), "mul", |x, y| x * y).unwrap()));
            }
            out
        }))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let y = self.value(a).scale(s);
        self.push_op(y, &[a], move |_, g| vec![(a, g.scale(s))])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let y = self.value(a).map(|v| v + s);
        self.push_op(y, &[a], move |_, g| vec![(a, g.clone())])
    }

    /// `x[..., C] + b[C]`
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(b) != [c] {
            return Err(Error::dim("add_row", self.shape(x), self.shape(b)));
        }
        let mut y = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for row in y.data_mut().chunks_mut(c) {
            for (v, &bb) in row.iter_mut().zip(&bv) {
                *v += bb;
            }
        }
        Ok(self.push_op(y, &[x, b], move |_, g| vec![(x, g.clone()), (b, col_sums(g))]))
    }

    /// `x[..., C] * v[C]`
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(v) != [c] {
            return Err(Error::dim("mul_row", self.shape(x), self.shape(v)));
        }
        let mut y = self.value(x).clone();
        let vv = self.value(v).data().to_vec();
        for row in y.data_mut().chunks_mut(c) {
            for (a, &s) in row.iter_mut().zip(&vv) {
                *a *= s;
            }
        }
        Ok(self.push_op(y, &[x, v], move |ctx, g| {
            let mut out = Vec::with_capacity(2);
            let vv = ctx.value(v).data();
            if ctx.needs(x) {
                let mut gx = g.clone();
                for row in gx.data_mut().chunks_mut(c) {
                    for (a, &s) in row.iter_mut().zip(vv) {
                        *a *= s;
                    }
                }
                out.push((x, gx));
            }
            if ctx.needs(v) {
                let mut gv = vec![T::zero(); c];
                for (gr, xr) in g.data().chunks(c).zip(ctx.value(x).data().chunks(c)) {
                    for i in 0..c {
                        gv[i] += gr[i] * xr[i];
                    }
                }
                out.push((v, ShapedArray::new(vec![c], gv).unwrap()));
            }
            out
        }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::matmul(self.value(a), self.value(b))?;
        let (m, k, n) = (self.shape(a)[0], self.shape(a)[1], self.shape(b)[1]);
        Ok(self.push_op(y, &[a, b], move |ctx, g| {
            let mut out = Vec::with_capacity(2);
            if ctx.needs(a) {
                let mut ga = vec![T::zero(); m * k];
                gemm_nt_acc(g.data(), ctx.value(b).data(), &mut ga, m, n, k);
                out.push((a, ShapedArray::new(vec![m, k], ga).unwrap()));
            }
            if ctx.needs(b) {
                let mut gb = vec![T::zero(); k * n];
                gemm_tn_acc(ctx.value(a).data(), g.data(), &mut gb, m, k, n);
                out.push((b, ShapedArray::new(vec![k, n], gb).unwrap()));
            }
            out
        }))
    }

    /// `x[..., in] . w[in, out] (+ b[out])`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let (k, n) = (self.shape(w)[0], self.shape(w)[1]);
        let m = self.value(x).rows();
        let xshape = self.shape(x).to_vec();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(y, &inputs, move |ctx, g| {
            let mut out = Vec::with_capacity(3);
            if ctx.needs(x) {
                let mut gx = vec![T::zero(); m * k];
                gemm_nt_acc(g.data(), ctx.value(w).data(), &mut gx, m, n, k);
                out.push((x, ShapedArray::new(xshape.clone(), gx).unwrap()));
            }
            if ctx.needs(w) {
                let mut gw = vec![T::zero(); k * n];
                gemm_tn_acc(ctx.value(x).data(), g.data(), &mut gw, m, k, n);
                out.push((w, ShapedArray::new(vec![k, n], gw).unwrap()));
            }
            if let Some(b) = b {
                if ctx.needs(b) {
                    out.push((b, col_sums(g)));
                }
            }
            out
        }))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::silu_scalar, |x, g| {
            let s = sigmoid(x);
            g * (s + x * s * (T::one() - s))
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), |x, g| if x > T::zero() { g } else { T::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |x, g| {
            let s = sigmoid(x);
            g * s * (T::one() - s)
        })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, kernels::softplus, |x, g| g * sigmoid(x))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), |x, g| g * x.exp())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.abs(),
            |x, g| {
                if x > T::zero() {
                    g
                } else if x < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let y = kernels::softmax_last(self.value(a))?;
        let ys = Rc::new(y.clone());
        Ok(self.push_op(y, &[a], move |_, g| {
            let c = ys.last_dim();
            let mut gx = g.clone();
            for (gr, yr) in gx.data_mut().chunks_mut(c).zip(ys.data().chunks(c)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for (gv, &yv) in gr.iter_mut().zip(yr) {
                    *gv = yv * (*gv - dot);
                }
            }
            vec![(a, gx)]
        }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let shape = self.shape(a).to_vec();
        self.push_op(ShapedArray::scalar(s), &[a], move |_, g| {
            vec![(a, ShapedArray::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.value(a).len() as f64);
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// `sum(x * w)` against a constant weight array.
    pub fn dot_const(&mut self, a: Var, w: &ShapedArray<T>) -> Result<Var> {
        if self.shape(a) != w.shape() {
            return Err(Error::dim("dot_const", self.shape(a), w.shape()));
        }
        let s = kernels::compensated_sum(self.value(a).data().iter().zip(w.data()).map(|(&x, &y)| x * y));
        let w = w.clone();
        Ok(self.push_op(ShapedArray::scalar(s), &[a], move |_, g| vec![(a, w.scale(g.data()[0]))]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(a).reshape(shape)?;
        let orig = self.shape(a).to_vec();
        Ok(self.push_op(y, &[a], move |_, g| vec![(a, g.reshape(&orig).unwrap())]))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&ShapedArray<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = kernels::concat_last(&vals)?;
        let widths: Vec<usize> = vals.iter().map(|v| v.last_dim()).collect();
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        let parts = parts.to_vec();
        let inputs = parts.clone();
        Ok(self.push_op(y, &inputs, move |ctx, g| {
            let total: usize = widths.iter().sum();
            let rows = g.len() / total.max(1);
            let mut out = Vec::with_capacity(parts.len());
            let mut start = 0;
            for ((&p, &w), shape) in parts.iter().zip(&widths).zip(&shapes) {
                if ctx.needs(p) {
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g.data()[r * total + start..r * total + start + w]);
                    }
                    out.push((p, ShapedArray::new(shape.clone(), gp).unwrap()));
                }
                start += w;
            }
            out
        }))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let c = self.value(a).last_dim();
        if start + len > c {
            return Err(Error::dim("slice_last", self.shape(a), &[start, len]));
        }
        let rows = self.value(a).rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.value(a).row(r)[start..start + len]);
        }
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = len;
        let orig = self.shape(a).to_vec();
        Ok(self.push_op(ShapedArray::new(shape, data)?, &[a], move |_, g| {
            let mut ga = ShapedArray::zeros(&orig);
            for r in 0..rows {
                ga.row_mut(r)[start..start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            vec![(a, ga)]
        }))
    }

    /// `out[p] = x[idx[p]]` over the rows of a `[R, C]` view.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<[usize]>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.last_dim());
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::arg("gather_rows", format!("row {bad} out of {r}")));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(xv.row(i));
        }
        let orig = xv.shape().to_vec();
        let y = ShapedArray::new(vec![idx.len(), c], data)?;
        Ok(self.push_op(y, &[x], move |_, g| {
            let mut gx = ShapedArray::zeros(&orig);
            for (p, &i) in idx.iter().enumerate() {
                for (a, &b) in gx.row_mut(i).iter_mut().zip(g.row(p)) {
                    *a += b;
                }
            }
            vec![(x, gx)]
        }))
    }

    /// `out[.., p] = x[.., idx[p]]` along the last axis.
    pub fn gather_cols(&mut self, x: Var, idx: Rc<[usize]>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::arg("gather_cols", format!("column {bad} out of {c}")));
        }
        let mut data = Vec::with_capacity(xv.rows() * idx.len());
        for row in xv.data().chunks(c) {
            data.extend(idx.iter().map(|&i| row[i]));
        }
        let orig = xv.shape().to_vec();
        let mut shape = orig.clone();
        *shape.last_mut().unwrap() = idx.len();
        let y = ShapedArray::new(shape, data)?;
        Ok(self.push_op(y, &[x], move |_, g| {
            let mut gx = ShapedArray::zeros(&orig);
            for (grow, orow) in gx.data_mut().chunks_mut(c).zip(g.data().chunks(idx.len())) {
                for (&i, &gv) in idx.iter().zip(orow) {
                    grow[i] += gv;
                }
            }
            vec![(x, gx)]
        }))
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let parts = kernels::layernorm_parts(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let xhat = Rc::new(parts.xhat);
        let invstd = Rc::new(parts.invstd);
        Ok(self.push_op(parts.y, &[x, gamma, beta], move |ctx, g| {
            let c = g.last_dim();
            let gam = ctx.value(gamma).data();
            let mut out = Vec::with_capacity(3);
            if ctx.needs(gamma) || ctx.needs(beta) {
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for (gr, hr) in g.data().chunks(c).zip(xhat.data().chunks(c)) {
                    for i in 0..c {
                        gg[i] += gr[i] * hr[i];
                        gb[i] += gr[i];
                    }
                }
                out.push((gamma, ShapedArray::new(vec![c], gg).unwrap()));
                out.push((beta, ShapedArray::new(vec![c], gb).unwrap()));
            }
            if ctx.needs(x) {
                let cf = T::of(c as f64);
                let mut gx = g.clone();
                for ((gr, hr), &is) in gx.data_mut().chunks_mut(c).zip(xhat.data().chunks(c)).zip(invstd.iter()) {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for i in 0..c {
                        let d = gr[i] * gam[i];
                        m1 += d;
                        m2 += d * hr[i];
                    }
                    m1 /= cf;
                    m2 /= cf;
                    for i in 0..c {
                        gr[i] = is * (gr[i] * gam[i] - m1 - hr[i] * m2);
                    }
                }
                out.push((x, gx));
            }
            out
        }))
    }

    /// Batch normalization over all leading axes. In train mode the updated
    /// running statistics are queued via [`Tape::record_buffer_update`].
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: ParamId,
        running_var: ParamId,
        mode: Mode,
        eps: T,
        momentum: T,
    ) -> Result<Var> {
        let rs = RunningStats {
            mean: self.params().get(running_mean).clone(),
            var: self.params().get(running_var).clone(),
        };
        let out = kernels::batchnorm2d(self.value(x), self.value(gamma), self.value(beta), mode, eps, momentum, &rs)?;
        if let Some(r) = out.running {
            self.record_buffer_update(running_mean, r.mean);
            self.record_buffer_update(running_var, r.var);
        }
        let xhat = Rc::new(out.xhat);
        let invstd = Rc::new(out.invstd);
        Ok(self.push_op(out.y, &[x, gamma, beta], move |ctx, g| {
            let c = g.last_dim();
            let n = g.rows();
            let gam = ctx.value(gamma).data();
            let mut gg = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            for (gr, hr) in g.data().chunks(c).zip(xhat.data().chunks(c)) {
                for i in 0..c {
                    gg[i] += gr[i] * hr[i];
                    gb[i] += gr[i];
                }
            }
            let mut out = Vec::with_capacity(3);
            if ctx.needs(x) {
                let mut gx = g.clone();
                match mode {
                    Mode::Train => {
                        let nf = T::of(n as f64);
                        for (gr, hr) in gx.data_mut().chunks_mut(c).zip(xhat.data().chunks(c)) {
                            for i in 0..c {
                                // s1 = gamma*sum(g), s2 = gamma*sum(g*xhat)
                                let d = gr[i] * gam[i];
                                gr[i] = invstd[i] * (d - gam[i] * gb[i] / nf - hr[i] * gam[i] * gg[i] / nf);
                            }
                        }
                    }
                    Mode::Eval => {
                        for gr in gx.data_mut().chunks_mut(c) {
                            for i in 0..c {
                                gr[i] *= gam[i] * invstd[i];
                            }
                        }
                    }
                }
                out.push((x, gx));
            }
            out.push((gamma, ShapedArray::new(vec![c], gg).unwrap()));
            out.push((beta, ShapedArray::new(vec![c], gb).unwrap()));
            out
        }))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x), self.value(kernel), stride, pad)?;
        let y = kernels::conv2d(self.value(x), self.value(kernel), stride, pad)?;
        Ok(self.push_op(y, &[x, kernel], move |ctx, g| {
            let gd = geom;
            let xd = ctx.value(x).data();
            let kd = ctx.value(kernel).data();
            let want_x = ctx.needs(x);
            let want_k = ctx.needs(kernel);
            let mut gx = vec![T::zero(); if want_x { xd.len() } else { 0 }];
            let mut gk = vec![T::zero(); if want_k { kd.len() } else { 0 }];
            for oy in 0..gd.ho {
                for ox in 0..gd.wo {
                    let grow = &g.data()[(oy * gd.wo + ox) * gd.cout..(oy * gd.wo + ox + 1) * gd.cout];
                    for ky in 0..gd.k {
                        let Some(iy) = gd.src(oy, ky, gd.h) else { continue };
                        for kx in 0..gd.k {
                            let Some(ix) = gd.src(ox, kx, gd.w) else { continue };
                            let xo = (iy * gd.w + ix) * gd.cin;
                            let kbase = (ky * gd.k + kx) * gd.cin * gd.cout;
                            for ci in 0..gd.cin {
                                let krange = kbase + ci * gd.cout..kbase + (ci + 1) * gd.cout;
                                if want_x {
                                    let mut s = T::zero();
                                    for (&gv, &kv) in grow.iter().zip(&kd[krange.clone()]) {
                                        s += gv * kv;
                                    }
                                    gx[xo + ci] += s;
                                }
                                if want_k {
                                    let xv = xd[xo + ci];
                                    for (a, &gv) in gk[krange].iter_mut().zip(grow) {
                                        *a += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let mut out = Vec::with_capacity(2);
            if want_x {
                out.push((x, ShapedArray::new(ctx.value(x).shape().to_vec(), gx).unwrap()));
            }
            if want_k {
                out.push((kernel, ShapedArray::new(ctx.value(kernel).shape().to_vec(), gk).unwrap()));
            }
            out
        }))
    }

    /// Depthwise causal convolution over a `[L, D]` sequence with kernel
    /// `w[K, D]` and bias `b[D]`: `y[t] = b + sum_k w[k] * x[t + k - (K-1)]`.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || self.shape(b) != [xs[1]] {
            return Err(Error::dim("causal_conv1d", &xs, &ws));
        }
        let (l, d, k) = (xs[0], xs[1], ws[0]);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut y = Vec::with_capacity(l * d);
        for _ in 0..l {
            y.extend_from_slice(self.value(b).data());
        }
        for t in 0..l {
            let yrow = &mut y[t * d..(t + 1) * d];
            for kk in 0..k {
                let Some(s) = (t + kk).checked_sub(k - 1) else { continue };
                let xrow = &xd[s * d..(s + 1) * d];
                let wrow = &wd[kk * d..(kk + 1) * d];
                for ((o, &xv), &wv) in yrow.iter_mut().zip(xrow).zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        let y = ShapedArray::new(vec![l, d], y)?;
        Ok(self.push_op(y, &[x, w, b], move |ctx, g| {
            let xd = ctx.value(x).data();
            let wd = ctx.value(w).data();
            let gd = g.data();
            let mut gx = vec![T::zero(); l * d];
            let mut gw = vec![T::zero(); k * d];
            for t in 0..l {
                let grow = &gd[t * d..(t + 1) * d];
                for kk in 0..k {
                    let Some(s) = (t + kk).checked_sub(k - 1) else { continue };
                    for c in 0..d {
                        gx[s * d + c] += grow[c] * wd[kk * d + c];
                        gw[kk * d + c] += grow[c] * xd[s * d + c];
                    }
                }
            }
            vec![
                (x, ShapedArray::new(vec![l, d], gx).unwrap()),
                (w, ShapedArray::new(vec![k, d], gw).unwrap()),
                (b, col_sums(g)),
            ]
        }))
    }

    /// Differentiable bilinear sampling of `map [H,W,C]` at `points [M,2]`
    /// given as `(row, col)`.
    pub fn bilinear_sample(&mut self, map: Var, points: Var) -> Result<Var> {
        let ps = self.shape(points).to_vec();
        if ps.len() != 2 || ps[1] != 2 {
            return Err(Error::dim("bilinear_sample(points)", &ps, &[0, 2]));
        }
        let pts: Vec<[T; 2]> = self.value(points).data().chunks(2).map(|p| [p[0], p[1]]).collect();
        let y = kernels::bilinear_sample(self.value(map), &pts)?;
        Ok(self.push_op(y, &[map, points], move |ctx, g| {
            let mv = ctx.value(map);
            let (h, w, c) = (mv.shape()[0], mv.shape()[1], mv.shape()[2]);
            let pd = ctx.value(points).data();
            let mut gm = vec![T::zero(); if ctx.needs(map) { mv.len() } else { 0 }];
            let mut gp = vec![T::zero(); pd.len()];
            for (m, grow) in g.data().chunks(c).enumerate() {
                let (taps, n) = bilinear_grad_taps(pd[2 * m], pd[2 * m + 1], h, w);
                for &(cell, wt, dr, dc) in &taps[..n] {
                    let src = &mv.data()[cell * c..(cell + 1) * c];
                    let dot: T = src.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    gp[2 * m] += dr * dot;
                    gp[2 * m + 1] += dc * dot;
                    if !gm.is_empty() && wt != T::zero() {
                        for (a, &gv) in gm[cell * c..(cell + 1) * c].iter_mut().zip(grow) {
                            *a += wt * gv;
                        }
                    }
                }
            }
            let mut out = vec![(points, ShapedArray::new(vec![pd.len() / 2, 2], gp).unwrap())];
            if !gm.is_empty() {
                out.push((map, ShapedArray::new(mv.shape().to_vec(), gm).unwrap()));
            }
            out
        }))
    }

    /// Multi-head deformable sampling core.
    ///
    /// `value [H, W, M*Dh]`, `loc [Q, M*K*2]` holding `(row, col)` cell
    /// coordinates per head and point, `attn [Q, M*K]`. Returns `[Q, M*Dh]`
    /// where head `m` of query `q` is `sum_k attn[q,m,k] * sample(value_m, loc[q,m,k])`.
    pub fn deform_sample(&mut self, value: Var, loc: Var, attn: Var, heads: usize, points: usize) -> Result<Var> {
        let vs = self.shape(value).to_vec();
        let q = self.shape(loc)[0];
        if vs.len() != 3
            || vs[2] % heads != 0
            || self.shape(loc) != [q, heads * points * 2]
            || self.shape(attn) != [q, heads * points]
        {
            return Err(Error::dim("deform_sample", self.shape(loc), self.shape(attn)));
        }
        let (h, w, c) = (vs[0], vs[1], vs[2]);
        let dh = c / heads;
        let vd = self.value(value).data();
        let ld = self.value(loc).data();
        let ad = self.value(attn).data();
        let mut out = vec![T::zero(); q * c];
        for qi in 0..q {
            for m in 0..heads {
                let orow = &mut out[qi * c + m * dh..qi * c + (m + 1) * dh];
                for k in 0..points {
                    let li = (qi * heads + m) * points + k;
                    let a = ad[li];
                    let (taps, n) = bilinear_taps(ld[2 * li], ld[2 * li + 1], h, w);
                    for &(cell, wt) in &taps[..n] {
                        let f = a * wt;
                        let src = &vd[cell * c + m * dh..cell * c + (m + 1) * dh];
                        for (o, &v) in orow.iter_mut().zip(src) {
                            *o += f * v;
                        }
                    }
                }
            }
        }
        let y = ShapedArray::new(vec![q, c], out)?;
        Ok(self.push_op(y, &[value, loc, attn], move |ctx, g| {
            let vd = ctx.value(value).data();
            let ld = ctx.value(loc).data();
            let ad = ctx.value(attn).data();
            let want_v = ctx.needs(value);
            let mut gv = vec![T::zero(); if want_v { vd.len() } else { 0 }];
            let mut gl = vec![T::zero(); ld.len()];
            let mut ga = vec![T::zero(); ad.len()];
            for qi in 0..q {
                for m in 0..heads {
                    let grow = &g.data()[qi * c + m * dh..qi * c + (m + 1) * dh];
                    for k in 0..points {
                        let li = (qi * heads + m) * points + k;
                        let a = ad[li];
                        let (taps, n) = bilinear_grad_taps(ld[2 * li], ld[2 * li + 1], h, w);
                        for &(cell, wt, dr, dc) in &taps[..n] {
                            let src = &vd[cell * c + m * dh..cell * c + (m + 1) * dh];
                            let dot: T = src.iter().zip(grow).map(|(&x, &y)| x * y).sum();
                            ga[li] += wt * dot;
                            gl[2 * li] += a * dr * dot;
                            gl[2 * li + 1] += a * dc * dot;
                            if want_v && wt != T::zero() {
                                let f = a * wt;
                                for (o, &gg) in gv[cell * c + m * dh..cell * c + (m + 1) * dh].iter_mut().zip(grow) {
                                    *o += f * gg;
                                }
                            }
                        }
                    }
                }
            }
            let mut out = vec![
                (loc, ShapedArray::new(ctx.value(loc).shape().to_vec(), gl).unwrap()),
                (attn, ShapedArray::new(ctx.value(attn).shape().to_vec(), ga).unwrap()),
            ];
            if want_v {
                out.push((value, ShapedArray::new(ctx.value(value).shape().to_vec(), gv).unwrap()));
            }
            out
        }))
    }

    /// Inverted dropout; eval mode (or `p == 0`) returns `x` itself.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::arg("dropout", format!("p = {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let scale = T::of(1.0 / (1.0 - p));
        let mask: Rc<[bool]> = kernels::dropout_mask(self.value(x).len(), p, seed).into();
        let mut y = self.value(x).clone();
        for (v, &keep) in y.data_mut().iter_mut().zip(mask.iter()) {
            *v = if keep { *v * scale } else { T::zero() };
        }
        Ok(self.push_op(y, &[x], move |_, g| {
            let mut gx = g.clone();
            for (v, &keep) in gx.data_mut().iter_mut().zip(mask.iter()) {
                *v = if keep { *v * scale } else { T::zero() };
            }
            vec![(x, gx)]
        }))
    }

    /// Weighted mean cross-entropy of `logits [R, K]` against integer
    /// targets: `sum_r w[t_r] * -log softmax(logits_r)[t_r] / sum_r w[t_r]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], class_weight: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        let k = lv.last_dim();
        if lv.rows() != targets.len() || class_weight.len() != k {
            return Err(Error::dim("cross_entropy", lv.shape(), &[targets.len(), class_weight.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::arg("cross_entropy", format!("target {t} >= {k} classes")));
        }
        let probs = kernels::softmax_last(lv)?;
        let wsum: T = targets.iter().map(|&t| class_weight[t]).sum();
        if wsum <= T::zero() {
            return Err(Error::arg("cross_entropy", "total target weight must be positive"));
        }
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            loss += class_weight[t] * (lse - row[t]);
        }
        loss /= wsum;
        let targets: Rc<[usize]> = targets.into();
        let cw: Rc<[T]> = class_weight.into();
        Ok(self.push_op(ShapedArray::scalar(loss), &[logits], move |_, g| {
            let scale = g.data()[0] / wsum;
            let mut gl = probs.clone();
            for (r, &t) in targets.iter().enumerate() {
                let f = cw[t] * scale;
                let row = gl.row_mut(r);
                row[t] -= T::one();
                row.iter_mut().for_each(|v| *v *= f);
            }
            vec![(logits, gl)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{finite_diff_check, FdOptions, Objective};
    use crate::numerics::tape::ParamId;
    use crate::numerics::tape::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_gradient() {
        let ps = ParamStore::<f64>::new();
        let mut tape = Tape::new(&ps);
        let x = tape.leaf(ShapedArray::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.var(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn matmul_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::<f64>::new();
        let wid = ps.add("w", ShapedArray::randn(&[3, 4], 1.0, &mut rng));
        let xv = ShapedArray::<f64>::randn(&[4, 1], 1.0, &mut rng);
        let mut tape = Tape::new(&ps);
        let w = tape.param(wid);
        let x = tape.constant(xv.clone());
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap().param(wid);
        // d sum(Wx) / dW_ij = x_j
        for i in 0..3 {
            for j in 0..4 {
                assert!((g.get(&[i, j]) - xv.get(&[j, 0])).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn non_scalar_loss_and_foreign_var_are_rejected() {
        let ps = ParamStore::<f64>::new();
        let mut tape = Tape::new(&ps);
        let x = tape.leaf(ShapedArray::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Graph(_))));
        assert!(matches!(tape.backward(Var(99)), Err(Error::Graph(_))));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut ps = ParamStore::<f64>::new();
        let a = ps.add("a", ShapedArray::ones(&[2]));
        let b = ps.add("b", ShapedArray::ones(&[3]));
        let mut tape = Tape::new(&ps);
        let av = tape.param(a);
        let again = tape.param(a);
        assert_eq!(av, again);
        let loss = tape.sum(av);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(b), ShapedArray::zeros(&[3]));
        assert_eq!(g.param(a), ShapedArray::ones(&[2]));
    }

    struct Composite {
        ids: [ParamId; 11],
        rm: ParamId,
        rv: ParamId,
        proj: ShapedArray<f64>,
        targets: [usize; 4],
    }

    impl Objective for Composite {
        fn eval<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<Var> {
            let [x, k, gam, bet, w, b, cw, cb, pts, loc, att] = self.ids;
            let (rm, rv, proj, targets) = (self.rm, self.rv, &self.proj, &self.targets);
        let xv = tape.param(x);
        let kv = tape.param(k);
        let c = tape.conv2d(xv, kv, 1, 1)?;
        let (g, bb) = (tape.param(gam), tape.param(bet));
        let bn = tape.batchnorm(c, g, bb, rm, rv, Mode::Train, T::of(1e-5), T::of(0.1))?;
        let bn_e = tape.batchnorm(c, g, bb, rm, rv, Mode::Eval, T::of(1e-5), T::of(0.1))?;
        let bn = tape.add(bn, bn_e)?;
        let a = tape.silu(bn);
        let seq = tape.reshape(a, &[12, 3])?;
        let ln = tape.layernorm(seq, g, bb, T::of(1e-5))?;
        let (wv, bv) = (tape.param(w), tape.param(b));
        let lin = tape.linear(ln, wv, Some(bv))?;
        let sm = tape.softmax_last(lin)?;
        let sp = tape.softplus(lin);
        let prod = tape.mul(sm, sp)?;
        let sl = tape.slice_last(prod, 1, 3)?;
        let idx: Rc<[usize]> = vec![3, 1, 1, 11, 0].into();
        let gth = tape.gather_rows(sl, idx)?;
        let e = tape.exp(gth);
        let sg = tape.sigmoid(gth);
        let cat = tape.concat_last(&[e, sg])?;
        let conv_in = tape.slice_last(cat, 0, 5)?;
        let conv_in = tape.reshape(conv_in, &[5, 5])?;
        let (cwv, cbv) = (tape.param(cw), tape.param(cb));
        let cw4 = tape.slice_last(cwv, 0, 5)?;
        let cc = tape.causal_conv1d(conv_in, cw4, cbv)?;
        let map = a;
        let pv = tape.param(pts);
        let samp = tape.bilinear_sample(map, pv)?;
        let lv = tape.param(loc);
        let av = tape.param(att);
        let asm = tape.softmax_last(av)?;
        let map4 = tape.concat_last(&[map, map])?;
        let map4 = tape.slice_last(map4, 0, 4)?;
        let ds = tape.deform_sample(map4, lv, asm, 2, 2)?;
        let logits = tape.reshape(cc, &[5, 5])?;
        let logits = tape.slice_last(logits, 0, 5)?;
        let logits4 = tape.gather_rows(logits, vec![0, 1, 2, 3].into())?;
        let ce = tape.cross_entropy(logits4, targets, &[1.0, 0.5, 2.0, 1.0, 0.3].map(T::of))?;
        let s1 = tape.sum(samp);
        let s2 = tape.mean(ds);
        let ab = tape.abs(ds);
        let s3 = tape.sum(ab);
        let mr = tape.mul_row(gth, g)?;
        let ar = tape.add_row(mr, g)?;
        let ar = tape.gather_cols(ar, vec![2, 0, 0].into())?;
        let s4 = tape.dot_const(ar, &proj.cast())?;
        let mm = tape.matmul(cw4, conv_in)?;
        let s5 = tape.sum(mm);
        let t = tape.add(ce, s1)?;
        let t = tape.sub(t, s2)?;
        let t = tape.add(t, s3)?;
        let t = tape.add(t, s4)?;
        let t = tape.scale(t, T::of(0.5));
        let t = tape.add_scalar(t, T::of(1.0));
        tape.add(t, s5)
        }
    }

    /// Every primitive against central differences on a random scalar
    /// projection of its output.
    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamStore::<f64>::new();
        let x = ps.add("x", ShapedArray::randn(&[3, 4, 4], 1.0, &mut rng));
        let k = ps.add("k", ShapedArray::randn(&[3, 3, 4, 3], 0.5, &mut rng));
        let gam = ps.add("gam", ShapedArray::randn(&[3], 1.0, &mut rng));
        let bet = ps.add("bet", ShapedArray::randn(&[3], 1.0, &mut rng));
        let rm = ps.add_buffer("rm", ShapedArray::randn(&[3], 0.1, &mut rng));
        let rv = ps.add_buffer("rv", ShapedArray::full(&[3], 1.3));
        let w = ps.add("w", ShapedArray::randn(&[3, 5], 0.5, &mut rng));
        let b = ps.add("b", ShapedArray::randn(&[5], 0.5, &mut rng));
        let cw = ps.add("cw", ShapedArray::randn(&[4, 5], 0.5, &mut rng));
        let cb = ps.add("cb", ShapedArray::randn(&[5], 0.5, &mut rng));
        let pts = ps.add("pts", ShapedArray::uniform(&[6, 2], -0.7, 3.6, &mut rng));
        let loc = ps.add("loc", ShapedArray::uniform(&[2, 2 * 2 * 2], -0.5, 3.5, &mut rng));
        let att = ps.add("att", ShapedArray::randn(&[2, 4], 1.0, &mut rng));
        let proj = ShapedArray::<f64>::randn(&[5, 3], 1.0, &mut rng);
        let targets = [0usize, 3, 4, 1];

        let obj = Composite {
            ids: [x, k, gam, bet, w, b, cw, cb, pts, loc, att],
            rm,
            rv,
            proj,
            targets,
        };
        let report = finite_diff_check(&ps, 1e-5, &FdOptions::default(), &obj).unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
        assert!(report.checked > 100);
    }
}
