//! Raw forward/adjoint kernels on row-major slices.
//!
//! Batch elements are processed through `crate::par`; any reduction across
//! the batch is summed sequentially in index order so results are identical
//! with and without the thread pool.

use super::tensor::Scalar;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oi in 0..oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * ow..(oi + 1) * ow];
                    if ii < 0 || ii >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..][..g.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj >= g.w as isize {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oi in 0..oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + ii as usize) * g.w..][..g.w];
                    for oj in 0..ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            dst[jj as usize] = dst[jj as usize] + src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let in_len = g.c * g.h * g.w;
    let k = g.patch();
    let mut out = vec![T::zero(); g.n * g.o * plane];
    par::for_each_chunk_mut(&mut out, g.o * plane, |n, y| {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let owned;
        let cols: &[T] = if g.is_pointwise() {
            xn
        } else {
            let mut buf = vec![T::zero(); k * plane];
            im2col(g, xn, &mut buf);
            owned = buf;
            &owned
        };
        T::gemm(
            g.o,
            k,
            plane,
            T::one(),
            w,
            k as isize,
            1,
            cols,
            plane as isize,
            1,
            T::zero(),
            y,
            plane as isize,
            1,
        );
        if let Some(b) = bias {
            for (o, row) in y.chunks_mut(plane).enumerate() {
                row.iter_mut().for_each(|v| *v = *v + b[o]);
            }
        }
    });
    out
}

/// Adjoint of [`conv2d_forward`]. Returns `(dx, dw, db)`.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let plane = g.out_h() * g.out_w();
    let in_len = g.c * g.h * g.w;
    let out_len = g.o * plane;
    let k = g.patch();

    let dx = want_dx.then(|| {
        let mut dx = vec![T::zero(); g.n * in_len];
        par::for_each_chunk_mut(&mut dx, in_len, |n, dxn| {
            let dyn_ = &dy[n * out_len..(n + 1) * out_len];
            if g.is_pointwise() {
                // dx = w^T · dy
                T::gemm(
                    k, g.o, plane, T::one(), w, 1, k as isize, dyn_, plane as isize, 1,
                    T::zero(), dxn, plane as isize, 1,
                );
            } else {
                let mut dcols = vec![T::zero(); k * plane];
                T::gemm(
                    k, g.o, plane, T::one(), w, 1, k as isize, dyn_, plane as isize, 1,
                    T::zero(), &mut dcols, plane as isize, 1,
                );
                col2im(g, &dcols, dxn);
            }
        });
        dx
    });

    let dw = want_dw.then(|| {
        let partials = par::map_range(g.n, |n| {
            let xn = &x[n * in_len..(n + 1) * in_len];
            let dyn_ = &dy[n * out_len..(n + 1) * out_len];
            let owned;
            let cols: &[T] = if g.is_pointwise() {
                xn
            } else {
                let mut buf = vec![T::zero(); k * plane];
                im2col(g, xn, &mut buf);
                owned = buf;
                &owned
            };
            let mut part = vec![T::zero(); g.o * k];
            // dw_n = dy_n · cols^T
            T::gemm(
                g.o, plane, k, T::one(), dyn_, plane as isize, 1, cols, 1, plane as isize,
                T::zero(), &mut part, k as isize, 1,
            );
            part
        });
        let mut dw = vec![T::zero(); g.o * k];
        for part in &partials {
            for (a, b) in dw.iter_mut().zip(part) {
                *a = *a + *b;
            }
        }
        dw
    });

    let mut db = vec![T::zero(); g.o];
    for n in 0..g.n {
        for (o, acc) in db.iter_mut().enumerate() {
            let row = &dy[n * out_len + o * plane..][..plane];
            *acc = row.iter().fold(*acc, |s, &v| s + v);
        }
    }
    (dx, dw, db)
}

/// Per-channel statistics of an `[N,C,H,W]` batch (biased variance).
pub fn channel_stats<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize(n * hw).expect("count");
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s = x[(b * c + ch) * hw..][..hw].iter().fold(s, |a, &v| a + v);
        }
        let m = s / count;
        let mut q = T::zero();
        for b in 0..n {
            q = x[(b * c + ch) * hw..][..hw]
                .iter()
                .fold(q, |a, &v| a + (v - m) * (v - m));
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut y = vec![0.0; g.n * g.o * oh * ow];
        for n in 0..g.n {
            for o in 0..g.o {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut s = 0.0;
                        for c in 0..g.c {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                                    let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                                    if ii < 0 || jj < 0 || ii >= g.h as isize || jj >= g.w as isize {
                                        continue;
                                    }
                                    s += x[((n * g.c + c) * g.h + ii as usize) * g.w + jj as usize]
                                        * w[((o * g.c + c) * g.kh + ki) * g.kw + kj];
                                }
                            }
                        }
                        y[((n * g.o + o) * oh + oi) * ow + oj] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn matches_direct_loops() {
        for &(stride, pad, k) in &[(1, 0, 1), (1, 1, 3), (2, 1, 3), (2, 0, 2)] {
            let g = ConvGeom { n: 2, c: 3, h: 7, w: 6, o: 4, kh: k, kw: k, stride, pad };
            let x: Vec<f64> = (0..g.n * g.c * g.h * g.w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..g.o * g.c * k * k).map(|i| ((i * 13 % 7) as f64) * 0.5 - 1.0).collect();
            let fast = conv2d_forward(&g, &x, &w, None);
            let slow = naive_conv(&g, &x, &w);
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn stats_use_biased_variance() {
        let x = [1.0f64, 3.0];
        let (m, v) = channel_stats(&x, 1, 1, 2);
        assert_eq!(m, vec![2.0]);
        assert_eq!(v, vec![1.0]);
    }
}
