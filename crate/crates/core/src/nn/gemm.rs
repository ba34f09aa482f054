//! Dense matrix kernels for the layer implementations.
//!
//! Every kernel computes each output row with a fixed, partition-independent
//! summation order, so results are bit-identical whether the row loop runs
//! serially or under rayon, and for any worker count.

use rayon::prelude::*;

use super::scalar::Scalar;

/// Below this many multiply-adds the parallel dispatch overhead dominates;
/// the serial path runs instead (identical arithmetic either way).
const PAR_WORK_THRESHOLD: usize = 1 << 15;

/// Dot product with eight fixed-position partial accumulators. The lane
/// split lets the compiler vectorize while keeping one deterministic
/// reduction order.
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::ZERO; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let ao = &a[c * 8..c * 8 + 8];
        let bo = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += ao[l] * bo[l];
        }
    }
    let mut tail = S::ZERO;
    for l in chunks * 8..a.len() {
        tail += a[l] * b[l];
    }
    (((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))) + tail
}

fn check_dims<S>(c: &[S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k, "lhs length");
    assert_eq!(b.len(), k * n, "rhs length");
    assert_eq!(c.len(), m * n, "output length");
}

/// C = A·B (or C += A·B when `accumulate`), A: [m,k], B: [k,n], C: [m,n].
pub fn gemm_nn<S: Scalar>(c: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize, accumulate: bool) {
    check_dims(c, a, b, m, k, n);
    let row = |i: usize, c_row: &mut [S]| {
        if !accumulate {
            c_row.fill(S::ZERO);
        }
        let a_row = &a[i * k..(i + 1) * k];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += a_il * bj;
            }
        }
    };
    if m > 1 && m * k * n >= PAR_WORK_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, c_row)| row(i, c_row));
    } else {
        for (i, c_row) in c.chunks_mut(n).enumerate() {
            row(i, c_row);
        }
    }
}

/// C = A·Bᵀ (or +=), A: [m,k], B: [n,k], C: [m,n].
pub fn gemm_nt<S: Scalar>(c: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize, accumulate: bool) {
    assert_eq!(a.len(), m * k, "lhs length");
    assert_eq!(b.len(), n * k, "rhs length");
    assert_eq!(c.len(), m * n, "output length");
    let row = |i: usize, c_row: &mut [S]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cj) in c_row.iter_mut().enumerate() {
            let d = dot(a_row, &b[j * k..(j + 1) * k]);
            if accumulate {
                *cj += d;
            } else {
                *cj = d;
            }
        }
    };
    if m > 1 && m * k * n >= PAR_WORK_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, c_row)| row(i, c_row));
    } else {
        for (i, c_row) in c.chunks_mut(n).enumerate() {
            row(i, c_row);
        }
    }
}

/// C = Aᵀ·B (or +=), A: [k,m], B: [k,n], C: [m,n].
pub fn gemm_tn<S: Scalar>(c: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize, accumulate: bool) {
    assert_eq!(a.len(), k * m, "lhs length");
    assert_eq!(b.len(), k * n, "rhs length");
    assert_eq!(c.len(), m * n, "output length");
    let row = |i: usize, c_row: &mut [S]| {
        if !accumulate {
            c_row.fill(S::ZERO);
        }
        for l in 0..k {
            let a_li = a[l * m + i];
            let b_row = &b[l * n..(l + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += a_li * bj;
            }
        }
    };
    if m > 1 && m * k * n >= PAR_WORK_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, c_row)| row(i, c_row));
    } else {
        for (i, c_row) in c.chunks_mut(n).enumerate() {
            row(i, c_row);
        }
    }
}

/// Unfolds one image [C,H,W] into patch columns [C·kh·kw, out_h·out_w] for
/// convolution-as-GEMM; zero padding `pad` on every side, stride `stride`.
#[allow(clippy::too_many_arguments)]
pub fn im2col<S: Scalar>(
    x: &[S],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [S],
) -> (usize, usize) {
    let out_h = (h + 2 * pad - kh) / stride + 1;
    let out_w = (w + 2 * pad - kw) / stride + 1;
    let out_px = out_h * out_w;
    assert_eq!(x.len(), channels * h * w);
    assert_eq!(cols.len(), channels * kh * kw * out_px);
    for ci in 0..channels {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * out_px;
                for oy in 0..out_h {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut cols[row + oy * out_w..row + (oy + 1) * out_w];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(S::ZERO);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { S::ZERO } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
    (out_h, out_w)
}

/// Adjoint of [`im2col`]: scatter-adds patch columns back into the image
/// gradient (accumulates into `dx`).
#[allow(clippy::too_many_arguments)]
pub fn col2im_add<S: Scalar>(
    cols: &[S],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dx: &mut [S],
) {
    let out_h = (h + 2 * pad - kh) / stride + 1;
    let out_w = (w + 2 * pad - kw) / stride + 1;
    let out_px = out_h * out_w;
    assert_eq!(dx.len(), channels * h * w);
    assert_eq!(cols.len(), channels * kh * kw * out_px);
    for ci in 0..channels {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * out_px;
                for oy in 0..out_h {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * out_w..row + (oy + 1) * out_w];
                    for (ox, &s) in src.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn rand_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn all_variants_match_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(m, k, n) in &[(1, 1, 1), (2, 3, 4), (5, 7, 3), (8, 8, 8), (3, 17, 2)] {
            let a = rand_vec(&mut rng, m * k);
            let b = rand_vec(&mut rng, k * n);
            let want = naive_nn(&a, &b, m, k, n);

            let mut c = vec![0.0; m * n];
            gemm_nn(&mut c, &a, &b, m, k, n, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }

            // A·Bᵀ with B stored transposed reproduces the same product.
            let mut bt = vec![0.0; n * k];
            for l in 0..k {
                for j in 0..n {
                    bt[j * k + l] = b[l * n + j];
                }
            }
            let mut c2 = vec![0.0; m * n];
            gemm_nt(&mut c2, &a, &bt, m, k, n, false);
            for (x, y) in c2.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }

            // Aᵀ·B with A stored transposed.
            let mut at = vec![0.0; k * m];
            for i in 0..m {
                for l in 0..k {
                    at[l * m + i] = a[i * k + l];
                }
            }
            let mut c3 = vec![0.0; m * n];
            gemm_tn(&mut c3, &at, &b, m, k, n, false);
            for (x, y) in c3.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn accumulate_adds_on_top() {
        let a = vec![1.0, 2.0];
        let b = vec![3.0, 4.0];
        let mut c = vec![10.0];
        gemm_nn(&mut c, &a, &b, 1, 2, 1, true);
        assert_eq!(c[0], 10.0 + 11.0);
        gemm_nn(&mut c, &a, &b, 1, 2, 1, false);
        assert_eq!(c[0], 11.0);
    }

    #[test]
    fn parallel_and_serial_paths_bitwise_equal() {
        // Shapes straddling the threshold must agree bit-for-bit because the
        // per-row arithmetic order is identical.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, k, n) = (64, 40, 48); // m*k*n >= threshold -> parallel path
        let a: Vec<f32> = (0..m * k).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let mut big = vec![0.0f32; m * n];
        gemm_nn(&mut big, &a, &b, m, k, n, false);
        // Recompute each row alone (serial path: m=1 stays below threshold).
        for i in 0..m {
            let mut row = vec![0.0f32; n];
            gemm_nn(&mut row, &a[i * k..(i + 1) * k], &b, 1, k, n, false);
            assert_eq!(&big[i * n..(i + 1) * n], &row[..]);
        }
    }

    #[test]
    fn im2col_known_values_and_shapes() {
        // 1 channel, 3x3 image, 2x2 kernel, stride 1, no padding.
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        let mut cols = vec![0.0; 4 * 4];
        let (oh, ow) = im2col(&x, 1, 3, 3, 2, 2, 1, 0, &mut cols);
        assert_eq!((oh, ow), (2, 2));
        // Row 0 = top-left kernel tap across output positions.
        assert_eq!(&cols[0..4], &[1.0, 2.0, 4.0, 5.0]);
        assert_eq!(&cols[12..16], &[5.0, 6.0, 8.0, 9.0]);

        // With pad 1 the corners see zeros.
        let mut cols_p = vec![0.0; 4 * 16];
        let (oh, ow) = im2col(&x, 1, 3, 3, 2, 2, 1, 1, &mut cols_p);
        assert_eq!((oh, ow), (4, 4));
        assert_eq!(cols_p[0], 0.0);
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y: the defining
        // property of an adjoint pair, and exactly what backward needs.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for &(c, h, w, kh, kw, stride, pad) in
            &[(1, 5, 5, 3, 3, 1, 1), (2, 6, 4, 2, 2, 2, 0), (3, 7, 7, 3, 3, 2, 1)]
        {
            let out_h = (h + 2 * pad - kh) / stride + 1;
            let out_w = (w + 2 * pad - kw) / stride + 1;
            let x = rand_vec(&mut rng, c * h * w);
            let y = rand_vec(&mut rng, c * kh * kw * out_h * out_w);
            let mut cols = vec![0.0; y.len()];
            im2col(&x, c, h, w, kh, kw, stride, pad, &mut cols);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let mut xt = vec![0.0; x.len()];
            col2im_add(&y, c, h, w, kh, kw, stride, pad, &mut xt);
            let rhs: f64 = x.iter().zip(&xt).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "adjoint mismatch: {lhs} vs {rhs}");
        }
    }
}
