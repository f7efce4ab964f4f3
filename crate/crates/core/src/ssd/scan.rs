use super::{DiscreteSsm, ScanMode};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, ShapedArray};

/// Largest sequence for which [`quadratic_dual`] materializes the `T x T` map.
pub const QUADRATIC_MAX_LEN: usize = 4096;

pub fn scan<T: Scalar>(ssm: &DiscreteSsm<T>, x: &ShapedArray<T>, mode: ScanMode) -> Result<ShapedArray<T>> {
    match mode {
        ScanMode::Linear => scan_linear(ssm, x),
        ScanMode::Quadratic => quadratic_dual(ssm, x),
        ScanMode::Chunked(q) => scan_chunked(ssm, x, q),
    }
}

/// Sequential recurrence, `O(T·H·N·P)`, starting from a zero state.
pub fn scan_linear<T: Scalar>(ssm: &DiscreteSsm<T>, x: &ShapedArray<T>) -> Result<ShapedArray<T>> {
    ssm.validate(x)?;
    let (t, h, p, n) = (ssm.len(), ssm.nheads, ssm.headdim, ssm.state_dim);
    let xd = x.data();
    let mut state = vec![T::zero(); h * n * p];
    let mut y = vec![T::zero(); t * h * p];
    for s in 0..t {
        let (b, c) = (ssm.b.row(s), ssm.c.row(s));
        for head in 0..h {
            let d = ssm.decay[s * h + head];
            let sc = ssm.scale[s * h + head];
            let off = (s * h + head) * p;
            let xs = &xd[off..off + p];
            let yo = &mut y[off..off + p];
            let st = &mut state[head * n * p..(head + 1) * n * p];
            for k in 0..n {
                let bk = sc * b[k];
                let ck = c[k];
                let row = &mut st[k * p..(k + 1) * p];
                for j in 0..p {
                    row[j] = d * row[j] + bk * xs[j];
                    yo[j] += ck * row[j];
                }
            }
        }
        if let Some(j) = y[s * h * p..(s + 1) * h * p].iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "scan_linear",
                location: format!("step t = {s}, element {j}"),
            });
        }
    }
    ShapedArray::new(x.shape().to_vec(), y)
}

/// Add the within-block part of the semiseparable map for rows and columns
/// `start..end` to `y`.
fn block_quadratic<T: Scalar>(ssm: &DiscreteSsm<T>, xd: &[T], start: usize, end: usize, y: &mut [T]) {
    let (h, p, n) = (ssm.nheads, ssm.headdim, ssm.state_dim);
    let len = end - start;
    // C_j · B_i for i <= j inside the block
    let mut cb = vec![T::zero(); len * len];
    for j in 0..len {
        let c = ssm.c.row(start + j);
        for i in 0..=j {
            let b = ssm.b.row(start + i);
            let mut s = T::zero();
            for k in 0..n {
                s += c[k] * b[k];
            }
            cb[j * len + i] = s;
        }
    }
    for head in 0..h {
        for i in 0..len {
            let gi = start + i;
            let xo = (gi * h + head) * p;
            let sc = ssm.scale[gi * h + head];
            let mut run = T::one();
            for j in i..len {
                let gj = start + j;
                if j > i {
                    run *= ssm.decay[gj * h + head];
                }
                let coef = cb[j * len + i] * run * sc;
                let yo = (gj * h + head) * p;
                for q in 0..p {
                    y[yo + q] += coef * xd[xo + q];
                }
            }
        }
    }
}

/// The `T x T` lower-triangular map of one head:
/// `M[j,i] = C_j·B_i · prod_{k=i+1..=j} decay_k · scale_i` for `j >= i`.
pub fn materialize<T: Scalar>(ssm: &DiscreteSsm<T>, head: usize) -> Result<ShapedArray<T>> {
    let (t, h, n) = (ssm.len(), ssm.nheads, ssm.state_dim);
    if head >= h {
        return Err(Error::arg("materialize", format!("head {head} >= {h}")));
    }
    if t > QUADRATIC_MAX_LEN {
        return Err(Error::Capacity {
            op: "materialize",
            requested: t,
            limit: QUADRATIC_MAX_LEN,
        });
    }
    let mut m = ShapedArray::zeros(&[t, t]);
    for i in 0..t {
        let mut run = T::one();
        let sc = ssm.scale[i * h + head];
        for j in i..t {
            if j > i {
                run *= ssm.decay[j * h + head];
            }
            let cb: T = (0..n).map(|k| ssm.c.row(j)[k] * ssm.b.row(i)[k]).sum();
            m.set(&[j, i], cb * run * sc);
        }
    }
    Ok(m)
}

/// Attention-like dual form: multiply by the materialized semiseparable
/// matrix. `O(T²·(N + H·P))`; refused above [`QUADRATIC_MAX_LEN`].
pub fn quadratic_dual<T: Scalar>(ssm: &DiscreteSsm<T>, x: &ShapedArray<T>) -> Result<ShapedArray<T>> {
    ssm.validate(x)?;
    let t = ssm.len();
    if t > QUADRATIC_MAX_LEN {
        return Err(Error::Capacity {
            op: "quadratic_dual",
            requested: t,
            limit: QUADRATIC_MAX_LEN,
        });
    }
    let mut y = vec![T::zero(); x.len()];
    block_quadratic(ssm, x.data(), 0, t, &mut y);
    ShapedArray::new(x.shape().to_vec(), y)
}

/// Block decomposition with chunk length `q`: quadratic within each diagonal
/// block, chunk-final states carried across block boundaries.
pub fn scan_chunked<T: Scalar>(ssm: &DiscreteSsm<T>, x: &ShapedArray<T>, q: usize) -> Result<ShapedArray<T>> {
    scan_chunked_with::<T, T>(ssm, x, q)
}

/// [`scan_chunked`] with the carried state held in precision `A`.
pub fn scan_chunked_with<T: Scalar, A: Scalar>(ssm: &DiscreteSsm<T>, x: &ShapedArray<T>, q: usize) -> Result<ShapedArray<T>> {
    ssm.validate(x)?;
    if q < 1 {
        return Err(Error::arg("scan_chunked", "chunk length must be >= 1"));
    }
    let (t, h, p, n) = (ssm.len(), ssm.nheads, ssm.headdim, ssm.state_dim);
    let q = q.min(t);
    let xd = x.data();
    let mut y = vec![T::zero(); x.len()];
    let mut state = vec![A::zero(); h * n * p];
    let mut suffix = vec![A::one(); q];
    let mut start = 0;
    while start < t {
        let end = (start + q).min(t);
        block_quadratic(ssm, xd, start, end, &mut y);
        for head in 0..h {
            let st = &mut state[head * n * p..(head + 1) * n * p];
            if start > 0 {
                let mut run = A::one();
                for j in start..end {
                    run *= A::of(ssm.decay[j * h + head].as_f64());
                    let c = ssm.c.row(j);
                    let yo = (j * h + head) * p;
                    let mut acc = vec![A::zero(); p];
                    for k in 0..n {
                        let ck = A::of(c[k].as_f64());
                        let row = &st[k * p..(k + 1) * p];
                        for (a, &s) in acc.iter_mut().zip(row) {
                            *a += ck * s;
                        }
                    }
                    for (o, a) in y[yo..yo + p].iter_mut().zip(acc) {
                        *o += T::of((run * a).as_f64());
                    }
                }
            }
            // suffix[i] = prod_{k=i+1}^{end-1} decay_k
            let len = end - start;
            suffix[len - 1] = A::one();
            for i in (0..len - 1).rev() {
                suffix[i] = suffix[i + 1] * A::of(ssm.decay[(start + i + 1) * h + head].as_f64());
            }
            let carry = suffix[0] * A::of(ssm.decay[start * h + head].as_f64());
            st.iter_mut().for_each(|v| *v *= carry);
            for i in 0..len {
                let gi = start + i;
                let w = suffix[i] * A::of(ssm.scale[gi * h + head].as_f64());
                let b = ssm.b.row(gi);
                let xo = (gi * h + head) * p;
                for k in 0..n {
                    let bk = w * A::of(b[k].as_f64());
                    let row = &mut st[k * p..(k + 1) * p];
                    for (r, &xv) in row.iter_mut().zip(&xd[xo..xo + p]) {
                        *r += bk * A::of(xv.as_f64());
                    }
                }
            }
        }
        start = end;
    }
    ShapedArray::new(x.shape().to_vec(), y)
}
