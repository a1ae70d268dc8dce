//! Raw slice-level kernels behind the tensor ops.
//!
//! Every kernel fixes its summation order so results are bit-reproducible;
//! `conv2d` in particular accumulates in (c_in, kh, kw) order to match the
//! plain six-loop formulation exactly.

use super::scalar::Scalar;

/// C[m,n] += A[m,k] * B[k,n], accumulating over p in ascending order.
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += a_ip * bv;
            }
        }
    }
}

pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    matmul_acc(a, b, m, k, n, &mut out);
    out
}

/// C[m,n] += A[m,k] * B[n,k]^T.
pub fn matmul_bt_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = S::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            out[i * n + j] += s;
        }
    }
}

/// C[k,n] += A[m,k]^T * B[m,n].
pub fn matmul_ta_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let c_row = &mut out[p * n..(p + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += av * bv;
            }
        }
    }
}

/// Output spatial extent of a convolution/pooling window.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// im2col for one image: x is [C_in, H, W]; columns laid out so that
/// row index p = (ci * k + kh) * k + kw and column index = output position.
/// Out-of-bounds taps are zero.
pub fn im2col<S: Scalar>(
    x: &[S],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    col: &mut [S],
) {
    let oh = conv_out_extent(h, k, stride, pad);
    let ow = conv_out_extent(w, k, stride, pad);
    debug_assert_eq!(col.len(), c_in * k * k * oh * ow);
    let positions = oh * ow;
    for ci in 0..c_in {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = ((ci * k + kh) * k + kw) * positions;
                for oy in 0..oh {
                    let iy = (oy * stride + kh) as isize - pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kw) as isize - pad as isize;
                        let v = if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            plane[iy as usize * w + ix as usize]
                        } else {
                            S::zero()
                        };
                        col[row + oy * ow + ox] = v;
                    }
                }
            }
        }
    }
}

/// Scatter-add of column gradients back to the input image layout.
pub fn col2im_acc<S: Scalar>(
    col: &[S],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut [S],
) {
    let oh = conv_out_extent(h, k, stride, pad);
    let ow = conv_out_extent(w, k, stride, pad);
    let positions = oh * ow;
    for ci in 0..c_in {
        let plane_base = ci * h * w;
        for kh in 0..k {
            for kw in 0..k {
                let row = ((ci * k + kh) * k + kw) * positions;
                for oy in 0..oh {
                    let iy = (oy * stride + kh) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kw) as isize - pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        dx[plane_base + iy as usize * w + ix as usize] += col[row + oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Softmax one contiguous lane in place, with max-subtraction.
pub fn softmax_lane<S: Scalar>(lane: &mut [S]) {
    let mut max = lane[0];
    for &v in lane.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for v in lane.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in lane.iter_mut() {
        *v = *v / sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = vec![1.0f64, 0.0, 0.0, 1.0];
        let b = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(matmul(&eye, &b, 2, 2, 2), b);
    }

    #[test]
    fn matmul_projector_selects_rows() {
        let p = vec![1.0f64, 0.0, 0.0, 0.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&p, &b, 2, 2, 2), vec![5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_extent_matches_formula() {
        assert_eq!(conv_out_extent(64, 3, 2, 1), 32);
        assert_eq!(conv_out_extent(3, 3, 1, 0), 1);
    }

    #[test]
    fn softmax_lane_handles_large_magnitudes() {
        let mut lane = vec![0.0f32, 1000.0];
        softmax_lane(&mut lane);
        assert!(lane.iter().all(|v| v.is_finite()));
        assert!((lane.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}
