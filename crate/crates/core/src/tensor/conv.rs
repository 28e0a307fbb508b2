//! im2col convolution kernels over NHWC batches.

use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output size `ceil(in / stride)`, zero padding split evenly (extra on the far side).
    Same,
    /// No padding; output size `(in - kernel) / stride + 1`.
    Valid,
}

/// Output size along one spatial axis, or `None` when the kernel does not fit.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<usize> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    match padding {
        Padding::Same => Some(input.div_ceil(stride)),
        Padding::Valid => (input >= kernel).then(|| (input - kernel) / stride + 1),
    }
}

/// Leading (top/left) pad for one axis.
pub(crate) fn leading_pad(input: usize, kernel: usize, stride: usize, padding: Padding) -> usize {
    match padding {
        Padding::Valid => 0,
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            total / 2
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel: usize,
    pub filters: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    pub fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Unfolds every receptive field into one row of a `rows × (k·k·c)` matrix.
pub(crate) fn im2col<T: Real>(g: &ConvGeometry, input: &[T], cols: &mut [T]) {
    let patch = g.patch_len();
    let c = g.in_c;
    for n in 0..g.batch {
        let image = &input[n * g.in_h * g.in_w * c..(n + 1) * g.in_h * g.in_w * c];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((n * g.out_h + oy) * g.out_w + ox) * patch;
                let dst = &mut cols[row..row + patch];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        let off = (ky * g.kernel + kx) * c;
                        let cell = &mut dst[off..off + c];
                        if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                            cell.fill(T::zero());
                        } else {
                            let src = (iy as usize * g.in_w + ix as usize) * c;
                            cell.copy_from_slice(&image[src..src + c]);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub(crate) fn col2im<T: Real>(g: &ConvGeometry, cols: &[T], grad_input: &mut [T]) {
    let patch = g.patch_len();
    let c = g.in_c;
    for n in 0..g.batch {
        let image = &mut grad_input[n * g.in_h * g.in_w * c..(n + 1) * g.in_h * g.in_w * c];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((n * g.out_h + oy) * g.out_w + ox) * patch;
                let src = &cols[row..row + patch];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let off = (ky * g.kernel + kx) * c;
                        let dst = (iy as usize * g.in_w + ix as usize) * c;
                        for (d, &s) in image[dst..dst + c].iter_mut().zip(&src[off..off + c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution; returns the NHWC output and the unfolded input.
pub(crate) fn conv_forward<T: Real>(g: &ConvGeometry, input: &[T], filters: &[T]) -> (Vec<T>, Vec<T>) {
    let mut cols = vec![T::zero(); g.rows() * g.patch_len()];
    im2col(g, input, &mut cols);
    let mut out = vec![T::zero(); g.rows() * g.filters];
    T::gemm(
        g.rows(),
        g.patch_len(),
        g.filters,
        &cols,
        false,
        filters,
        false,
        &mut out,
        false,
    );
    (out, cols)
}

pub(crate) fn conv_grad_filters<T: Real>(g: &ConvGeometry, cols: &[T], grad_out: &[T]) -> Vec<T> {
    let mut grad = vec![T::zero(); g.patch_len() * g.filters];
    T::gemm(
        g.patch_len(),
        g.rows(),
        g.filters,
        cols,
        true,
        grad_out,
        false,
        &mut grad,
        false,
    );
    grad
}

pub(crate) fn conv_grad_input<T: Real>(g: &ConvGeometry, filters: &[T], grad_out: &[T]) -> Vec<T> {
    let mut grad_cols = vec![T::zero(); g.rows() * g.patch_len()];
    T::gemm(
        g.rows(),
        g.filters,
        g.patch_len(),
        grad_out,
        false,
        filters,
        true,
        &mut grad_cols,
        false,
    );
    let mut grad = vec![T::zero(); g.batch * g.in_h * g.in_w * g.in_c];
    col2im(g, &grad_cols, &mut grad);
    grad
}
