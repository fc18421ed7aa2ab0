//! Raw numerical kernels: GEMM, 2-D cross-correlation, max pooling and the
//! elementwise arithmetic used by the layers and the optimizer.
//!
//! Batched kernels fan out over samples with rayon. Each sample is computed
//! independently and cross-sample reductions run sequentially in sample
//! order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Row-major GEMM on plain slices: `c = op(a) * op(b)` (or `c += ...` when
/// `accumulate`). `a` is stored `m x k` (or `k x m` when `trans_a`), `b` is
/// stored `k x n` (or `n x k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer");
    assert_eq!(c.len(), m * n, "gemm: output buffer");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above pin every buffer to its logical extent, the
    // strides address exactly those extents, and `c` is a unique borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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

/// Matrix product of `[m, k]` and `[k, p]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.expect_rank(2, "matmul", "lhs")?;
    b.expect_rank(2, "matmul", "rhs")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, p) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("inner dimensions differ: lhs axis 1 is {k}, rhs axis 0 is {k2}"),
        ));
    }
    let mut out = vec![T::zero(); m * p];
    gemm(m, k, p, a.data(), false, b.data(), false, &mut out, false);
    Ok(Tensor::from_parts(vec![m, p], out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeometry {
    in_channels: usize,
    height: usize,
    width: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfold one `[C, H, W]` sample into a `[C*kh*kw, H'*W']` patch matrix.
    fn im2col<T: Scalar>(&self, image: &[T], col: &mut [T]) {
        let ow = self.out_w;
        let hw = self.out_len();
        for c in 0..self.in_channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let dst = &mut col[row * hw..(row + 1) * hw];
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + ki) as isize - self.padding as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if y < 0 || y >= self.height as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[y as usize * self.width..(y as usize + 1) * self.width];
                        for (ox, out) in line.iter_mut().enumerate() {
                            let x = (ox * self.stride + kj) as isize - self.padding as isize;
                            *out = if x < 0 || x >= self.width as isize {
                                T::zero()
                            } else {
                                src[x as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatter-add patch gradients back onto the
    /// sample.
    fn col2im<T: Scalar>(&self, col: &[T], image: &mut [T]) {
        let ow = self.out_w;
        let hw = self.out_len();
        for c in 0..self.in_channels {
            let plane =
                &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let src = &col[row * hw..(row + 1) * hw];
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + ki) as isize - self.padding as isize;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        let dst =
                            &mut plane[y as usize * self.width..(y as usize + 1) * self.width];
                        for ox in 0..ow {
                            let x = (ox * self.stride + kj) as isize - self.padding as isize;
                            if x >= 0 && x < self.width as isize {
                                dst[x as usize] = dst[x as usize] + src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    const OP: &str = "conv2d";
    input.expect_rank(4, OP, "input [N, Cin, H, W]")?;
    kernel.expect_rank(4, OP, "kernel [Cout, Cin, kh, kw]")?;
    if stride == 0 {
        return Err(Error::dim(OP, "stride must be positive"));
    }
    let &[_, cin, h, w] = input.shape() else {
        unreachable!()
    };
    let &[_, kcin, kh, kw] = kernel.shape() else {
        unreachable!()
    };
    if cin != kcin {
        return Err(Error::dim(
            OP,
            format!("channel axis (1): input has {cin} channels, kernel expects {kcin}"),
        ));
    }
    if kh > h + 2 * padding {
        return Err(Error::dim(
            OP,
            format!(
                "height axis (2): kernel height {kh} exceeds padded input height {}",
                h + 2 * padding
            ),
        ));
    }
    if kw > w + 2 * padding {
        return Err(Error::dim(
            OP,
            format!(
                "width axis (3): kernel width {kw} exceeds padded input width {}",
                w + 2 * padding
            ),
        ));
    }
    Ok(ConvGeometry {
        in_channels: cin,
        height: h,
        width: w,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        padding,
        out_h: (h + 2 * padding - kh) / stride + 1,
        out_w: (w + 2 * padding - kw) / stride + 1,
    })
}

/// 2-D cross-correlation with zero padding: `[N, Cin, H, W]` with kernel
/// `[Cout, Cin, kh, kw]` and bias `[Cout]` gives `[N, Cout, H', W']`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let geo = conv_geometry(input, kernel, stride, padding)?;
    let n = input.shape()[0];
    let cout = kernel.shape()[0];
    if bias.shape() != [cout] {
        return Err(Error::dim(
            "conv2d",
            format!("bias must have shape [{cout}], got {:?}", bias.shape()),
        ));
    }
    let in_len = geo.in_channels * geo.height * geo.width;
    let out_len = cout * geo.out_len();
    let mut out = vec![T::zero(); n * out_len];
    out.par_chunks_mut(out_len)
        .zip(input.data().par_chunks(in_len))
        .for_each(|(dst, sample)| {
            let mut col = vec![T::zero(); geo.patch_len() * geo.out_len()];
            geo.im2col(sample, &mut col);
            for (row, &b) in dst.chunks_mut(geo.out_len()).zip(bias.data()) {
                row.fill(b);
            }
            gemm(
                cout,
                geo.patch_len(),
                geo.out_len(),
                kernel.data(),
                false,
                &col,
                false,
                dst,
                true,
            );
        });
    Ok(Tensor::from_parts(vec![n, cout, geo.out_h, geo.out_w], out))
}

/// Gradients of [`conv2d`] with respect to its input, kernel and bias.
pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_output: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Conv2dGrads<T>> {
    let geo = conv_geometry(input, kernel, stride, padding)?;
    let cout = kernel.shape()[0];
    let n = input.shape()[0];
    let expected = [n, cout, geo.out_h, geo.out_w];
    if grad_output.shape() != expected {
        return Err(Error::dim(
            "conv2d_backward",
            format!(
                "upstream gradient has shape {:?}, forward output was {expected:?}",
                grad_output.shape()
            ),
        ));
    }
    let in_len = geo.in_channels * geo.height * geo.width;
    let out_len = cout * geo.out_len();
    let k_len = kernel.len();

    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = input
        .data()
        .par_chunks(in_len)
        .zip(grad_output.data().par_chunks(out_len))
        .map(|(sample, dy)| {
            let mut col = vec![T::zero(); geo.patch_len() * geo.out_len()];
            geo.im2col(sample, &mut col);
            let mut dk = vec![T::zero(); k_len];
            gemm(
                cout,
                geo.out_len(),
                geo.patch_len(),
                dy,
                false,
                &col,
                true,
                &mut dk,
                false,
            );
            let db: Vec<T> = dy
                .chunks(geo.out_len())
                .map(|r| r.iter().copied().sum())
                .collect();
            // reuse the patch buffer for the patch-space gradient
            gemm(
                geo.patch_len(),
                cout,
                geo.out_len(),
                kernel.data(),
                true,
                dy,
                false,
                &mut col,
                false,
            );
            let mut dx = vec![T::zero(); in_len];
            geo.col2im(&col, &mut dx);
            (dx, dk, db)
        })
        .collect();

    let mut grad_input = Vec::with_capacity(n * in_len);
    let mut grad_kernel = vec![T::zero(); k_len];
    let mut grad_bias = vec![T::zero(); cout];
    for (dx, dk, db) in per_sample {
        grad_input.extend_from_slice(&dx);
        for (acc, g) in grad_kernel.iter_mut().zip(dk) {
            *acc = *acc + g;
        }
        for (acc, g) in grad_bias.iter_mut().zip(db) {
            *acc = *acc + g;
        }
    }
    Ok(Conv2dGrads {
        input: Tensor::from_parts(input.shape().to_vec(), grad_input),
        kernel: Tensor::from_parts(kernel.shape().to_vec(), grad_kernel),
        bias: Tensor::from_parts(vec![cout], grad_bias),
    })
}

/// Max pooling over `window x window` patches. Also returns, per output
/// element, the flat index into `input` of the winning element. Ties go to
/// the first element in row-major window order.
pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    const OP: &str = "maxpool2d";
    input.expect_rank(4, OP, "input [N, C, H, W]")?;
    if window == 0 || stride == 0 {
        return Err(Error::dim(OP, "window and stride must be positive"));
    }
    let &[n, c, h, w] = input.shape() else {
        unreachable!()
    };
    if window > h {
        return Err(Error::dim(
            OP,
            format!("height axis (2): window {window} exceeds input height {h}"),
        ));
    }
    if window > w {
        return Err(Error::dim(
            OP,
            format!("width axis (3): window {window} exceeds input width {w}"),
        ));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let data = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * stride * w + ox * stride;
                let mut best = data[best_idx];
                for i in 0..window {
                    let row = base + (oy * stride + i) * w + ox * stride;
                    for (j, &v) in data[row..row + window].iter().enumerate() {
                        if v > best {
                            best = v;
                            best_idx = row + j;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), argmax))
}

/// Route each upstream gradient to its cached argmax position; every other
/// input position receives zero.
pub fn maxpool2d_backward<T: Scalar>(
    grad_output: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if grad_output.len() != argmax.len() {
        return Err(Error::dim(
            "maxpool2d_backward",
            format!(
                "upstream gradient has {} elements but {} argmax indices were cached",
                grad_output.len(),
                argmax.len()
            ),
        ));
    }
    let mut grad = Tensor::zeros(input_shape)?;
    let buf = grad.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_output.data()) {
        if idx >= buf.len() {
            return Err(Error::dim(
                "maxpool2d_backward",
                format!("argmax index {idx} outside input of {} elements", buf.len()),
            ));
        }
        buf[idx] = buf[idx] + g;
    }
    Ok(grad)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Pass `upstream` where the forward input was positive, zero elsewhere.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    input.zip_map(upstream, "relu_backward", |x, g| {
        if x > T::zero() {
            g
        } else {
            T::zero()
        }
    })
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, factor: T) -> Tensor<T> {
    a.map(|x| x * factor)
}

pub fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "hadamard", |x, y| x * y)
}

pub fn sqrt<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if let Some(pos) = a.data().iter().position(|&x| x < T::zero() || x.is_nan()) {
        return Err(Error::domain(
            "sqrt",
            format!("element {pos} is {} (must be nonnegative)", a.data()[pos]),
        ));
    }
    Ok(a.map(|x| x.sqrt()))
}
