//! 2D convolution primitives: a direct path, an im2col/GEMM path with the
//! identical contract, and the matching backward pass.
//!
//! Index convention is cross-correlation (the kernel is not flipped):
//!
//! ```text
//! out[o, i, j] = sum over (c, kh, kw) of
//!     padded_input[c, i + dilation_h*kh, j + dilation_w*kw] * kernels[o, c, kh, kw]
//! ```
//!
//! with unit stride, explicit asymmetric zero padding, and
//! `H_out = H + pad.top + pad.bottom - dilation_h*(K_h - 1)` (width analogous).
//! Both paths accumulate each output element over (c, kh, kw) in ascending
//! order, so they agree bit-for-bit.

use super::{matmul, Result, Tensor, TensorError};

/// Asymmetric zero padding, in elements, per edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pad {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad {
    pub const NONE: Pad = Pad {
        top: 0,
        bottom: 0,
        left: 0,
        right: 0,
    };

    pub fn new(top: usize, bottom: usize, left: usize, right: usize) -> Self {
        Self {
            top,
            bottom,
            left,
            right,
        }
    }

    /// Same padding on both edges of each axis.
    pub fn symmetric(h: usize, w: usize) -> Self {
        Self {
            top: h,
            bottom: h,
            left: w,
            right: w,
        }
    }

    /// Left-only time padding; used by the causal convolution path.
    pub fn causal_time(top: usize, w: usize) -> Self {
        Self {
            top,
            bottom: 0,
            left: w,
            right: w,
        }
    }
}

struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k_h: usize,
    k_w: usize,
    h_out: usize,
    w_out: usize,
}

fn validate(
    input: &Tensor,
    kernels: &Tensor,
    dilation: (usize, usize),
    pad: Pad,
) -> Result<ConvDims> {
    if input.rank() != 3 {
        return Err(TensorError::RankMismatch {
            op: "conv2d",
            expected: 3,
            actual: input.rank(),
        });
    }
    if kernels.rank() != 4 {
        return Err(TensorError::RankMismatch {
            op: "conv2d",
            expected: 4,
            actual: kernels.rank(),
        });
    }
    if dilation.0 == 0 || dilation.1 == 0 {
        return Err(TensorError::ZeroDilation { op: "conv2d" });
    }
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, kc, k_h, k_w) = (
        kernels.shape()[0],
        kernels.shape()[1],
        kernels.shape()[2],
        kernels.shape()[3],
    );
    if kc != c_in {
        return Err(TensorError::DimMismatch {
            op: "conv2d",
            axis: "input channel",
            expected: c_in,
            actual: kc,
        });
    }
    let padded_h = h + pad.top + pad.bottom;
    let padded_w = w + pad.left + pad.right;
    let extent_h = dilation.0 * (k_h - 1) + 1;
    let extent_w = dilation.1 * (k_w - 1) + 1;
    if padded_h < extent_h {
        return Err(TensorError::KernelExceedsInput {
            op: "conv2d",
            axis: "height",
            padded: padded_h,
            extent: extent_h,
        });
    }
    if padded_w < extent_w {
        return Err(TensorError::KernelExceedsInput {
            op: "conv2d",
            axis: "width",
            padded: padded_w,
            extent: extent_w,
        });
    }
    Ok(ConvDims {
        c_in,
        h,
        w,
        c_out,
        k_h,
        k_w,
        h_out: padded_h - extent_h + 1,
        w_out: padded_w - extent_w + 1,
    })
}

/// Direct 2D cross-correlation. `input` is `[C_in, H, W]`, `kernels` is
/// `[C_out, C_in, K_h, K_w]`; returns `[C_out, H_out, W_out]`.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    dilation: (usize, usize),
    pad: Pad,
) -> Result<Tensor> {
    let d = validate(input, kernels, dilation, pad)?;
    let mut out = vec![0.0; d.c_out * d.h_out * d.w_out];
    let in_data = input.data();
    let k_data = kernels.data();

    for o in 0..d.c_out {
        let out_ch = &mut out[o * d.h_out * d.w_out..(o + 1) * d.h_out * d.w_out];
        for c in 0..d.c_in {
            let in_ch = &in_data[c * d.h * d.w..(c + 1) * d.h * d.w];
            for kh in 0..d.k_h {
                // Input row hit by tap kh at output row i: y = i + dilation_h*kh - pad.top.
                let y_off = (dilation.0 * kh) as isize - pad.top as isize;
                let i_lo = (-y_off).max(0) as usize;
                let i_hi = ((d.h as isize - y_off).min(d.h_out as isize)).max(0) as usize;
                for kw in 0..d.k_w {
                    let k_val = k_data[((o * d.c_in + c) * d.k_h + kh) * d.k_w + kw];
                    if k_val == 0.0 {
                        continue;
                    }
                    let x_off = (dilation.1 * kw) as isize - pad.left as isize;
                    let j_lo = (-x_off).max(0) as usize;
                    let j_hi = ((d.w as isize - x_off).min(d.w_out as isize)).max(0) as usize;
                    for i in i_lo..i_hi {
                        let y = (i as isize + y_off) as usize;
                        let in_row = &in_ch[y * d.w..(y + 1) * d.w];
                        let out_row = &mut out_ch[i * d.w_out..(i + 1) * d.w_out];
                        for j in j_lo..j_hi {
                            let x = (j as isize + x_off) as usize;
                            out_row[j] += k_val * in_row[x];
                        }
                    }
                }
            }
        }
    }
    let out = Tensor::from_parts(vec![d.c_out, d.h_out, d.w_out], out);
    out.check_finite("conv2d")?;
    Ok(out)
}

/// Same contract as [`conv2d`], routed through an im2col matrix and a GEMM.
/// Faster on large inputs; output is bitwise identical to the direct path.
pub fn conv2d_im2col(
    input: &Tensor,
    kernels: &Tensor,
    dilation: (usize, usize),
    pad: Pad,
) -> Result<Tensor> {
    let d = validate(input, kernels, dilation, pad)?;
    let rows = d.c_in * d.k_h * d.k_w;
    let cols = d.h_out * d.w_out;
    let mut col = vec![0.0; rows * cols];
    let in_data = input.data();

    for c in 0..d.c_in {
        let in_ch = &in_data[c * d.h * d.w..(c + 1) * d.h * d.w];
        for kh in 0..d.k_h {
            let y_off = (dilation.0 * kh) as isize - pad.top as isize;
            let i_lo = (-y_off).max(0) as usize;
            let i_hi = ((d.h as isize - y_off).min(d.h_out as isize)).max(0) as usize;
            for kw in 0..d.k_w {
                let r = (c * d.k_h + kh) * d.k_w + kw;
                let col_row = &mut col[r * cols..(r + 1) * cols];
                let x_off = (dilation.1 * kw) as isize - pad.left as isize;
                let j_lo = (-x_off).max(0) as usize;
                let j_hi = ((d.w as isize - x_off).min(d.w_out as isize)).max(0) as usize;
                for i in i_lo..i_hi {
                    let y = (i as isize + y_off) as usize;
                    let src = &in_ch[y * d.w..(y + 1) * d.w];
                    let dst = &mut col_row[i * d.w_out..(i + 1) * d.w_out];
                    for j in j_lo..j_hi {
                        dst[j] = src[(j as isize + x_off) as usize];
                    }
                }
            }
        }
    }

    // Kernel memory is already [C_out, C_in*K_h*K_w] row-major.
    let k_mat = Tensor::from_parts(vec![d.c_out, rows], kernels.data().to_vec());
    let col_mat = Tensor::from_parts(vec![rows, cols], col);
    let out = matmul(&k_mat, &col_mat)?;
    out.reshape(vec![d.c_out, d.h_out, d.w_out])
}

/// Backward pass of [`conv2d`]: given `d_out` (gradient at the output),
/// returns `(d_input, d_kernels)` for the same `(dilation, pad)` call.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    dilation: (usize, usize),
    pad: Pad,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let d = validate(input, kernels, dilation, pad)?;
    if d_out.shape() != [d.c_out, d.h_out, d.w_out] {
        return Err(TensorError::DimMismatch {
            op: "conv2d_backward",
            axis: "upstream gradient",
            expected: d.c_out * d.h_out * d.w_out,
            actual: d_out.len(),
        });
    }
    let mut d_in = vec![0.0; d.c_in * d.h * d.w];
    let mut d_k = vec![0.0; kernels.len()];
    let in_data = input.data();
    let k_data = kernels.data();
    let up = d_out.data();

    for o in 0..d.c_out {
        let up_ch = &up[o * d.h_out * d.w_out..(o + 1) * d.h_out * d.w_out];
        for c in 0..d.c_in {
            let in_ch = &in_data[c * d.h * d.w..(c + 1) * d.h * d.w];
            let din_ch = &mut d_in[c * d.h * d.w..(c + 1) * d.h * d.w];
            for kh in 0..d.k_h {
                let y_off = (dilation.0 * kh) as isize - pad.top as isize;
                let i_lo = (-y_off).max(0) as usize;
                let i_hi = ((d.h as isize - y_off).min(d.h_out as isize)).max(0) as usize;
                for kw in 0..d.k_w {
                    let ki = ((o * d.c_in + c) * d.k_h + kh) * d.k_w + kw;
                    let k_val = k_data[ki];
                    let x_off = (dilation.1 * kw) as isize - pad.left as isize;
                    let j_lo = (-x_off).max(0) as usize;
                    let j_hi = ((d.w as isize - x_off).min(d.w_out as isize)).max(0) as usize;
                    let mut k_grad = 0.0;
                    for i in i_lo..i_hi {
                        let y = (i as isize + y_off) as usize;
                        let in_row = &in_ch[y * d.w..(y + 1) * d.w];
                        let din_row = &mut din_ch[y * d.w..(y + 1) * d.w];
                        let up_row = &up_ch[i * d.w_out..(i + 1) * d.w_out];
                        for j in j_lo..j_hi {
                            let x = (j as isize + x_off) as usize;
                            let u = up_row[j];
                            k_grad += u * in_row[x];
                            din_row[x] += u * k_val;
                        }
                    }
                    d_k[ki] += k_grad;
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![d.c_in, d.h, d.w], d_in),
        Tensor::from_parts(kernels.shape().to_vec(), d_k),
    ))
}
