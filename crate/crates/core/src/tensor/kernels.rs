use super::Float;
use crate::error::{Error, Result};

/// Row-major matrix product `c (+)= op(a) * op(b)` where `op(a)` is `m x k`
/// and `op(b)` is `k x n`.
///
/// With `a_t` set, `a` is stored as `k x m`; with `b_t` set, `b` is stored as
/// `n x k`. When `accumulate` is false `c` is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    gemm_alpha(m, k, n, T::one(), a, a_t, b, b_t, c, accumulate)
}

/// [`gemm`] with the product scaled by `alpha`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_alpha<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    // SAFETY: the asserts above bound every strided access.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output extent of a strided convolution, `floor((n + 2p - k) / s) + 1`.
pub fn conv_output_extent(n: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be positive"));
    }
    let padded = n + 2 * padding;
    if padded < kernel {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kernel} larger than padded input {padded}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution, `(n - 1) s - 2p + k`.
pub fn conv_transpose_output_extent(
    n: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape("transposed_conv2d", "stride must be positive"));
    }
    let full = (n - 1) * stride + kernel;
    if full <= 2 * padding {
        return Err(Error::shape(
            "transposed_conv2d",
            format!("non-positive output extent for input {n}, kernel {kernel}, stride {stride}, padding {padding}"),
        ));
    }
    Ok(full - 2 * padding)
}

/// Geometry shared by the im2col/col2im pair.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output indices `lo..hi` whose tap at `offset` lands inside `0..extent`,
    /// and the input index of `lo`.
    #[inline]
    fn valid(&self, offset: usize, extent: usize, outs: usize) -> (usize, usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if offset >= p { 0 } else { (p - offset).div_ceil(s) };
        let hi = if extent + p <= offset { 0 } else { ((extent + p - offset - 1) / s + 1).min(outs) };
        let hi = hi.max(lo);
        (lo, hi, (lo * s + offset).saturating_sub(p))
    }

    /// Unfolds one `[C, H, W]` image into the column block starting at
    /// `col_offset` of a `[C*k*k, row_stride]` matrix.
    pub fn im2col<T: Float>(&self, image: &[T], cols: &mut [T], col_offset: usize, row_stride: usize) {
        let (k, s, w) = (self.kernel, self.stride, self.width);
        let hw = self.height * w;
        for c in 0..self.channels {
            let plane = &image[c * hw..(c + 1) * hw];
            for ki in 0..k {
                let (y_lo, y_hi, y0) = self.valid(ki, self.height, self.out_h);
                for kj in 0..k {
                    let (x_lo, x_hi, x0) = self.valid(kj, w, self.out_w);
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * row_stride + col_offset..][..self.positions()];
                    dst[..y_lo * self.out_w].fill(T::zero());
                    dst[y_hi * self.out_w..].fill(T::zero());
                    for (n, oy) in (y_lo..y_hi).enumerate() {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        line[..x_lo].fill(T::zero());
                        line[x_hi..].fill(T::zero());
                        let src = &plane[(y0 + n * s) * w..];
                        for (d, i) in line[x_lo..x_hi].iter_mut().zip((x0..).step_by(s)) {
                            *d = src[i];
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters a column block back onto an
    /// image, accumulating overlaps.
    pub fn col2im<T: Float>(&self, cols: &[T], col_offset: usize, row_stride: usize, image: &mut [T]) {
        let (k, s, w) = (self.kernel, self.stride, self.width);
        let hw = self.height * w;
        for c in 0..self.channels {
            let plane = &mut image[c * hw..(c + 1) * hw];
            for ki in 0..k {
                let (y_lo, y_hi, y0) = self.valid(ki, self.height, self.out_h);
                for kj in 0..k {
                    let (x_lo, x_hi, x0) = self.valid(kj, w, self.out_w);
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * row_stride + col_offset..][..self.positions()];
                    for (n, oy) in (y_lo..y_hi).enumerate() {
                        let line = &src[oy * self.out_w + x_lo..oy * self.out_w + x_hi];
                        let dst = &mut plane[(y0 + n * s) * w..];
                        for (v, i) in line.iter().zip((x0..).step_by(s)) {
                            dst[i] += *v;
                        }
                    }
                }
            }
        }
    }
}
