//! Raw numeric kernels shared by graph ops and their backward passes.
//!
//! Every kernel computes each output element by the same sequential
//! reduction regardless of thread count; parallelism only splits work across
//! independent output rows/planes, so results are bitwise reproducible.

use rayon::prelude::*;

use super::Element;
use crate::runtime;

/// C += A[m,k] * B[k,n], all row-major.
pub fn matmul_nn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, c: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |crow: &mut [E], i: usize| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if runtime::parallel() && m > 1 && m * k * n > 16_384 {
        runtime::install(|| {
            c.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, crow)| row(crow, i));
        });
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            row(crow, i);
        }
    }
}

/// C += A^T * B where A is [k,m] and B is [k,n]; C is [m,n].
pub fn matmul_tn<E: Element>(a: &[E], b: &[E], k: usize, m: usize, n: usize, c: &mut [E]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // Row i of C accumulates A[p,i] * B[p,:] over p, sequential in p.
    let row = |crow: &mut [E], i: usize| {
        for p in 0..k {
            let av = a[p * m + i];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if runtime::parallel() && m > 1 && m * k * n > 16_384 {
        runtime::install(|| {
            c.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, crow)| row(crow, i));
        });
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            row(crow, i);
        }
    }
}

/// Out-of-place transpose of a row-major [r,c] matrix into [c,r].
pub fn transpose2d<E: Element>(a: &[E], rows: usize, cols: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// im2col for one image: input [C,H,W] -> col [C*kh*kw, oh*ow], zero padding.
#[allow(clippy::too_many_arguments)]
pub fn im2col<E: Element>(
    input: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    col: &mut [E],
) {
    let oh = conv_out_len(h, kh, stride, padding);
    let ow = conv_out_len(w, kw, stride, padding);
    debug_assert_eq!(col.len(), c * kh * kw * oh * ow);
    let l = oh * ow;
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut col[((ci * kh + ki) * kw + kj) * l..][..l];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        for v in drow.iter_mut() {
                            *v = E::ZERO;
                        }
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            E::ZERO
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds col gradients back onto the image.
#[allow(clippy::too_many_arguments)]
pub fn col2im<E: Element>(
    col: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out: &mut [E],
) {
    let oh = conv_out_len(h, kh, stride, padding);
    let ow = conv_out_len(w, kw, stride, padding);
    debug_assert_eq!(col.len(), c * kh * kw * oh * ow);
    debug_assert_eq!(out.len(), c * h * w);
    let l = oh * ow;
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &col[((ci * kh + ki) * kw + kj) * l..][..l];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Source coordinate mapping for bilinear interpolation, align-corners=false.
/// Returns (low index, high index, weight of high).
fn bilerp_axis(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    if in_len == out_len {
        return (dst, dst, 0.0);
    }
    let scale = in_len as f64 / out_len as f64;
    let src = (dst as f64 + 0.5) * scale - 0.5;
    let src = src.max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let frac = (src - i0 as f64).clamp(0.0, 1.0);
    (i0, i1, frac)
}

/// Bilinear upsample of one [H,W] plane into [oh,ow].
pub fn bilinear_plane<E: Element>(input: &[E], h: usize, w: usize, oh: usize, ow: usize, out: &mut [E]) {
    debug_assert_eq!(input.len(), h * w);
    debug_assert_eq!(out.len(), oh * ow);
    for oy in 0..oh {
        let (y0, y1, fy) = bilerp_axis(oy, h, oh);
        let wy0 = E::from_f64(1.0 - fy);
        let wy1 = E::from_f64(fy);
        let r0 = &input[y0 * w..(y0 + 1) * w];
        let r1 = &input[y1 * w..(y1 + 1) * w];
        let orow = &mut out[oy * ow..(oy + 1) * ow];
        for (ox, v) in orow.iter_mut().enumerate() {
            let (x0, x1, fx) = bilerp_axis(ox, w, ow);
            let wx0 = E::from_f64(1.0 - fx);
            let wx1 = E::from_f64(fx);
            *v = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
        }
    }
}

/// Adjoint of [`bilinear_plane`]: scatter-adds output grads onto the input.
pub fn bilinear_plane_backward<E: Element>(
    grad_out: &[E],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    grad_in: &mut [E],
) {
    debug_assert_eq!(grad_out.len(), oh * ow);
    debug_assert_eq!(grad_in.len(), h * w);
    for oy in 0..oh {
        let (y0, y1, fy) = bilerp_axis(oy, h, oh);
        let wy0 = E::from_f64(1.0 - fy);
        let wy1 = E::from_f64(fy);
        for ox in 0..ow {
            let (x0, x1, fx) = bilerp_axis(ox, w, ow);
            let wx0 = E::from_f64(1.0 - fx);
            let wx1 = E::from_f64(fx);
            let g = grad_out[oy * ow + ox];
            grad_in[y0 * w + x0] += wy0 * wx0 * g;
            grad_in[y0 * w + x1] += wy0 * wx1 * g;
            grad_in[y1 * w + x0] += wy1 * wx0 * g;
            grad_in[y1 * w + x1] += wy1 * wx1 * g;
        }
    }
}

/// Numerically stable softmax over each contiguous row of length `n`.
pub fn softmax_rows_inplace<E: Element>(data: &mut [E], n: usize) {
    debug_assert_eq!(data.len() % n, 0);
    let apply = |row: &mut [E]| {
        let mut mx = row[0];
        for &v in row.iter() {
            mx = mx.max(v);
        }
        let mut sum = E::ZERO;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    };
    let rows = data.len() / n;
    if runtime::parallel() && rows > 8 && data.len() > 4096 {
        runtime::install(|| data.par_chunks_mut(n).for_each(apply));
    } else {
        for row in data.chunks_mut(n) {
            apply(row);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_nn_matches_per_slice_loop() {
        // 2x3 * 3x2 against the definition.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0f64];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0f64];
        let mut c = [0.0f64; 4];
        matmul_nn(&a, &b, 2, 3, 2, &mut c);
        let mut expect = [0.0f64; 4];
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..3 {
                    expect[i * 2 + j] += a[i * 3 + p] * b[p * 2 + j];
                }
            }
        }
        assert_eq!(c, expect);
    }

    #[test]
    fn matmul_tn_matches_transposed_nn() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0f64]; // [3,2] read as A
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 3.0f64]; // [3,2]
        let mut at = [0.0f64; 6];
        transpose2d(&a, 3, 2, &mut at);
        let mut via_nn = [0.0f64; 4];
        matmul_nn(&at, &b, 2, 3, 2, &mut via_nn);
        let mut direct = [0.0f64; 4];
        matmul_tn(&a, &b, 3, 2, 2, &mut direct);
        assert_eq!(via_nn, direct);
    }

    #[test]
    fn conv_out_len_formula() {
        assert_eq!(conv_out_len(5, 3, 2, 1), 3);
        assert_eq!(conv_out_len(3, 3, 1, 0), 1);
        assert_eq!(conv_out_len(64, 3, 2, 1), 32);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let (c, h, w, kh, kw, s, p) = (2usize, 5usize, 4usize, 3usize, 3usize, 2usize, 1usize);
        let oh = conv_out_len(h, kh, s, p);
        let ow = conv_out_len(w, kw, s, p);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..c * kh * kw * oh * ow)
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, c, h, w, kh, kw, s, p, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, kh, kw, s, p, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn bilinear_constant_plane_stays_constant() {
        let input = vec![3.25f64; 6];
        let mut out = vec![0.0; 35];
        bilinear_plane(&input, 2, 3, 5, 7, &mut out);
        for v in out {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_same_size_is_identity() {
        let input: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let mut out = vec![0.0; 12];
        bilinear_plane(&input, 3, 4, 3, 4, &mut out);
        assert_eq!(input, out);
    }

    #[test]
    fn bilinear_2x_matches_direct_oracle() {
        // Independent direct evaluation of align-corners=false interpolation.
        let input = vec![1.0f64, 2.0, 3.0, 4.0];
        let (h, w, oh, ow) = (2usize, 2usize, 4usize, 4usize);
        let mut out = vec![0.0; 16];
        bilinear_plane(&input, h, w, oh, ow, &mut out);
        for oy in 0..oh {
            for ox in 0..ow {
                let sy = ((oy as f64 + 0.5) * (h as f64 / oh as f64) - 0.5).max(0.0);
                let sx = ((ox as f64 + 0.5) * (w as f64 / ow as f64) - 0.5).max(0.0);
                let y0 = sy.floor().min((h - 1) as f64) as usize;
                let x0 = sx.floor().min((w - 1) as f64) as usize;
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let fy = sy - y0 as f64;
                let fx = sx - x0 as f64;
                let expect = (1.0 - fy) * ((1.0 - fx) * input[y0 * w + x0] + fx * input[y0 * w + x1])
                    + fy * ((1.0 - fx) * input[y1 * w + x0] + fx * input[y1 * w + x1]);
                assert!((out[oy * ow + ox] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        let (h, w, oh, ow) = (3usize, 3usize, 7usize, 5usize);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let g: Vec<f64> = (0..oh * ow).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut y = vec![0.0; oh * ow];
        bilinear_plane(&x, h, w, oh, ow, &mut y);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut gx = vec![0.0; h * w];
        bilinear_plane_backward(&g, h, w, oh, ow, &mut gx);
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut data = vec![1.0f64, 2.0, 3.0, -5.0, 0.0, 5.0];
        softmax_rows_inplace(&mut data, 3);
        for row in data.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
