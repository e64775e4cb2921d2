//! Layer kernels on flat row-major buffers. Sequence activations are laid
//! out `batch × channels × len`; flat activations are `batch × features`
//! (treated as `features × 1` where channels matter).

use super::Scalar;

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let pa = &a[c * 8..c * 8 + 8];
        let pb = &b[c * 8..c * 8 + 8];
        for k in 0..8 {
            acc[k] += pa[k] * pb[k];
        }
    }
    let mut tail = T::zero();
    for k in chunks * 8..n {
        tail += a[k] * b[k];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy<T: Scalar>(y: &mut [T], alpha: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[b, o] = bias[o] + Σ_i w[o, i] x[b, i]`
pub(crate) fn dense_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    n_in: usize,
    w: &[T],
    bias: &[T],
) -> Vec<T> {
    let n_out = bias.len();
    let mut out = vec![T::zero(); batch * n_out];
    for b in 0..batch {
        let xb = &x[b * n_in..(b + 1) * n_in];
        let ob = &mut out[b * n_out..(b + 1) * n_out];
        for (o, v) in ob.iter_mut().enumerate() {
            *v = bias[o] + dot(&w[o * n_in..(o + 1) * n_in], xb);
        }
    }
    out
}

pub(crate) fn dense_backward<T: Scalar>(
    x: &[T],
    g: &[T],
    batch: usize,
    n_in: usize,
    w: &[T],
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let n_out = db.len();
    let mut dx = vec![T::zero(); batch * n_in];
    for b in 0..batch {
        let xb = &x[b * n_in..(b + 1) * n_in];
        let gb = &g[b * n_out..(b + 1) * n_out];
        let dxb = &mut dx[b * n_in..(b + 1) * n_in];
        for (o, &go) in gb.iter().enumerate() {
            if go == T::zero() {
                continue;
            }
            db[o] += go;
            axpy(&mut dw[o * n_in..(o + 1) * n_in], go, xb);
            axpy(dxb, go, &w[o * n_in..(o + 1) * n_in]);
        }
    }
    dx
}

pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub l_in: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub l_out: usize,
}

impl ConvGeom {
    /// Valid kernel taps `[k0, k1)` for output position `o`.
    #[inline]
    fn taps(&self, o: usize) -> (usize, usize, isize) {
        let base = (o * self.stride) as isize - self.pad_left as isize;
        let k0 = (-base).max(0) as usize;
        let k1 = ((self.l_in as isize - base).max(0) as usize).min(self.kernel);
        (k0, k1.max(k0), base)
    }
}

pub(crate) fn conv_forward<T: Scalar>(x: &[T], geo: &ConvGeom, w: &[T], bias: &[T]) -> Vec<T> {
    let ConvGeom {
        batch,
        c_in,
        l_in,
        filters,
        kernel,
        l_out,
        ..
    } = *geo;
    let mut out = vec![T::zero(); batch * filters * l_out];
    for b in 0..batch {
        let xb = &x[b * c_in * l_in..(b + 1) * c_in * l_in];
        for f in 0..filters {
            let orow = &mut out[(b * filters + f) * l_out..(b * filters + f + 1) * l_out];
            for (o, v) in orow.iter_mut().enumerate() {
                let (k0, k1, base) = geo.taps(o);
                let mut acc = bias[f];
                for c in 0..c_in {
                    let wr = &w[(f * c_in + c) * kernel..(f * c_in + c + 1) * kernel];
                    let start = (base + k0 as isize) as usize;
                    acc += dot(
                        &wr[k0..k1],
                        &xb[c * l_in + start..c * l_in + start + (k1 - k0)],
                    );
                }
                *v = acc;
            }
        }
    }
    out
}

pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    g: &[T],
    geo: &ConvGeom,
    w: &[T],
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let ConvGeom {
        batch,
        c_in,
        l_in,
        filters,
        kernel,
        l_out,
        ..
    } = *geo;
    let mut dx = vec![T::zero(); x.len()];
    for b in 0..batch {
        let xb = &x[b * c_in * l_in..(b + 1) * c_in * l_in];
        let dxb = &mut dx[b * c_in * l_in..(b + 1) * c_in * l_in];
        for f in 0..filters {
            let grow = &g[(b * filters + f) * l_out..(b * filters + f + 1) * l_out];
            for (o, &go) in grow.iter().enumerate() {
                if go == T::zero() {
                    continue;
                }
                db[f] += go;
                let (k0, k1, base) = geo.taps(o);
                let start = (base + k0 as isize) as usize;
                for c in 0..c_in {
                    let wi = (f * c_in + c) * kernel;
                    axpy(
                        &mut dw[wi + k0..wi + k1],
                        go,
                        &xb[c * l_in + start..c * l_in + start + (k1 - k0)],
                    );
                    axpy(
                        &mut dxb[c * l_in + start..c * l_in + start + (k1 - k0)],
                        go,
                        &w[wi + k0..wi + k1],
                    );
                }
            }
        }
    }
    dx
}

/// Per-channel statistics over `(batch, len)`.
pub(crate) fn channel_moments<T: Scalar>(
    x: &[T],
    batch: usize,
    ch: usize,
    len: usize,
) -> (Vec<T>, Vec<T>) {
    let n = T::from_f64((batch * len) as f64);
    let mut mean = vec![T::zero(); ch];
    let mut var = vec![T::zero(); ch];
    for c in 0..ch {
        let mut s = T::zero();
        for b in 0..batch {
            s += x[(b * ch + c) * len..(b * ch + c + 1) * len]
                .iter()
                .copied()
                .sum::<T>();
        }
        let m = s / n;
        let mut v = T::zero();
        for b in 0..batch {
            for &xi in &x[(b * ch + c) * len..(b * ch + c + 1) * len] {
                v += (xi - m) * (xi - m);
            }
        }
        mean[c] = m;
        var[c] = v / n;
    }
    (mean, var)
}

/// `y = gamma * (x - mean) * inv_std + beta` per channel; returns `(y, xhat)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_apply<T: Scalar>(
    x: &[T],
    batch: usize,
    ch: usize,
    len: usize,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..ch {
            let r = (b * ch + c) * len..(b * ch + c + 1) * len;
            for i in r {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (y, xhat)
}

/// Backward of batch-statistics normalization.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_backward_train<T: Scalar>(
    g: &[T],
    xhat: &[T],
    batch: usize,
    ch: usize,
    len: usize,
    inv_std: &[T],
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let n = T::from_f64((batch * len) as f64);
    let mut dx = vec![T::zero(); g.len()];
    for c in 0..ch {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for b in 0..batch {
            for i in (b * ch + c) * len..(b * ch + c + 1) * len {
                sum_g += g[i];
                sum_gx += g[i] * xhat[i];
            }
        }
        dbeta[c] += sum_g;
        dgamma[c] += sum_gx;
        let k = gamma[c] * inv_std[c] / n;
        for b in 0..batch {
            for i in (b * ch + c) * len..(b * ch + c + 1) * len {
                dx[i] = k * (n * g[i] - sum_g - xhat[i] * sum_gx);
            }
        }
    }
    dx
}

/// Backward of normalization with fixed (running) statistics.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_backward_fixed<T: Scalar>(
    g: &[T],
    xhat: &[T],
    batch: usize,
    ch: usize,
    len: usize,
    inv_std: &[T],
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); g.len()];
    for b in 0..batch {
        for c in 0..ch {
            for i in (b * ch + c) * len..(b * ch + c + 1) * len {
                dbeta[c] += g[i];
                dgamma[c] += g[i] * xhat[i];
                dx[i] = g[i] * gamma[c] * inv_std[c];
            }
        }
    }
    dx
}

pub(crate) fn avgpool_forward<T: Scalar>(
    x: &[T],
    rows: usize,
    l_in: usize,
    width: usize,
) -> Vec<T> {
    let l_out = l_in / width;
    let inv = T::one() / T::from_f64(width as f64);
    let mut out = Vec::with_capacity(rows * l_out);
    for r in 0..rows {
        let row = &x[r * l_in..(r + 1) * l_in];
        for o in 0..l_out {
            out.push(row[o * width..(o + 1) * width].iter().copied().sum::<T>() * inv);
        }
    }
    out
}

pub(crate) fn avgpool_backward<T: Scalar>(
    g: &[T],
    rows: usize,
    l_in: usize,
    width: usize,
) -> Vec<T> {
    let l_out = l_in / width;
    let inv = T::one() / T::from_f64(width as f64);
    let mut dx = vec![T::zero(); rows * l_in];
    for r in 0..rows {
        for o in 0..l_out {
            let v = g[r * l_out + o] * inv;
            dx[r * l_in + o * width..r * l_in + (o + 1) * width]
                .iter_mut()
                .for_each(|d| *d = v);
        }
    }
    dx
}

/// Returns pooled values and the flat input index of each maximum (first
/// occurrence on ties).
pub(crate) fn maxpool_forward<T: Scalar>(
    x: &[T],
    rows: usize,
    l_in: usize,
    width: usize,
) -> (Vec<T>, Vec<usize>) {
    let l_out = l_in / width;
    let mut out = Vec::with_capacity(rows * l_out);
    let mut arg = Vec::with_capacity(rows * l_out);
    for r in 0..rows {
        for o in 0..l_out {
            let s = r * l_in + o * width;
            let mut best = s;
            for i in s + 1..s + width {
                if x[i] > x[best] {
                    best = i;
                }
            }
            out.push(x[best]);
            arg.push(best);
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..37).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b: Vec<f64> = (0..37).map(|i| (i as f64).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn conv_same_matches_naive_padding() {
        // 1 channel, kernel 4, pad_left 2 (left-biased), length 5
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let w = [1.0, 10.0, 100.0, 1000.0];
        let geo = ConvGeom {
            batch: 1,
            c_in: 1,
            l_in: 5,
            filters: 1,
            kernel: 4,
            stride: 1,
            pad_left: 2,
            l_out: 5,
        };
        let out = conv_forward(&x, &geo, &w, &[0.0]);
        let padded = [0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 0.0];
        let naive: Vec<f64> = (0..5)
            .map(|o| (0..4).map(|k| w[k] * padded[o + k]).sum())
            .collect();
        assert_eq!(out, naive);
    }

    #[test]
    fn maxpool_picks_first_max() {
        let (v, a) = maxpool_forward(&[1.0, 3.0, 3.0, 0.0, -1.0, -2.0], 1, 6, 2);
        assert_eq!(v, vec![3.0, 3.0, -1.0]);
        assert_eq!(a, vec![1, 2, 4]);
    }
}
