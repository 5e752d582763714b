//! Raw numeric kernels on flat row-major slices. Shapes are validated by callers.

use crate::scalar::Scalar;

/// `c += a · b` with `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`, `c: m×n`.
pub(crate) fn gemm_nt<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_tn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a[p * m + i];
            if a_pi == S::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_pi * b_pj;
            }
        }
    }
}

pub(crate) fn transpose<S: Scalar>(rows: usize, cols: usize, a: &[S]) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Unfolds one `C×H×W` image into a `(C·k·k) × (H'·W')` patch matrix.
pub(crate) fn im2col<S: Scalar>(g: &ConvGeometry, image: &[S], cols: &mut [S]) {
    let positions = g.positions();
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        dst[oy * g.out_width + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.height
                            && (ix as usize) < g.width
                        {
                            image[(c * g.height + iy as usize) * g.width + ix as usize]
                        } else {
                            S::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub(crate) fn col2im<S: Scalar>(g: &ConvGeometry, cols: &[S], image: &mut [S]) {
    let positions = g.positions();
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        image[(c * g.height + iy as usize) * g.width + ix as usize] +=
                            src[oy * g.out_width + ox];
                    }
                }
            }
        }
    }
}

/// Batched cross-correlation. `kernels` is `C_out × (C·k·k)` row-major.
pub(crate) fn conv2d_forward<S: Scalar>(
    g: &ConvGeometry,
    batch: usize,
    out_channels: usize,
    input: &[S],
    kernels: &[S],
) -> Vec<S> {
    let in_len = g.channels * g.height * g.width;
    let out_len = out_channels * g.positions();
    let mut cols = vec![S::zero(); g.patch_len() * g.positions()];
    let mut out = vec![S::zero(); batch * out_len];
    for n in 0..batch {
        im2col(g, &input[n * in_len..(n + 1) * in_len], &mut cols);
        gemm_nn(
            out_channels,
            g.patch_len(),
            g.positions(),
            kernels,
            &cols,
            &mut out[n * out_len..(n + 1) * out_len],
        );
    }
    out
}

/// Accumulates input and/or kernel gradients of [`conv2d_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<S: Scalar>(
    g: &ConvGeometry,
    batch: usize,
    out_channels: usize,
    input: &[S],
    kernels: &[S],
    grad_out: &[S],
    mut grad_input: Option<&mut [S]>,
    mut grad_kernels: Option<&mut [S]>,
) {
    let in_len = g.channels * g.height * g.width;
    let out_len = out_channels * g.positions();
    let mut cols = vec![S::zero(); g.patch_len() * g.positions()];
    for n in 0..batch {
        let go = &grad_out[n * out_len..(n + 1) * out_len];
        if let Some(gk) = grad_kernels.as_deref_mut() {
            im2col(g, &input[n * in_len..(n + 1) * in_len], &mut cols);
            gemm_nt(out_channels, g.positions(), g.patch_len(), go, &cols, gk);
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            cols.iter_mut().for_each(|v| *v = S::zero());
            gemm_tn(
                g.patch_len(),
                out_channels,
                g.positions(),
                kernels,
                go,
                &mut cols,
            );
            col2im(g, &cols, &mut gi[n * in_len..(n + 1) * in_len]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0; 4];
        gemm_nn(2, 3, 2, &a, &b, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        let bt = transpose(3, 2, &b);
        let mut c2 = [0.0; 4];
        gemm_nt(2, 3, 2, &a, &bt, &mut c2);
        assert_eq!(c, c2);

        let at = transpose(2, 3, &a);
        let mut c3 = [0.0; 4];
        gemm_tn(2, 3, 2, &at, &b, &mut c3);
        assert_eq!(c, c3);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry {
            channels: 2,
            height: 4,
            width: 5,
            kernel: 3,
            stride: 2,
            padding: 1,
            out_height: 2,
            out_width: 3,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.patch_len() * g.positions())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&g, &x, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&g, &y, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
