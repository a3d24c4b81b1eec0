use super::ops::{gemm_nn, gemm_nt, gemm_tn};
use super::{expect_rank, Scalar, Tensor};
use crate::error::{Error, Result};

/// Output extent of a convolution along one axis (floor semantics).
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::InvalidArgument("stride and kernel must be positive".into()));
    }
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kernel} larger than padded input {padded}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Unfolds `input` (Cin×H×W) into a (Cin·k·k)×(H'·W') column matrix.
pub fn im2col<T: Scalar>(input: &Tensor<T>, k: usize, stride: usize, padding: usize) -> Result<Tensor<T>> {
    expect_rank(input, 3, "im2col")?;
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let oh = conv_output_size(h, k, stride, padding)?;
    let ow = conv_output_size(w, k, stride, padding)?;
    let src = input.data();
    let mut cols = vec![T::zero(); c * k * k * oh * ow];
    let l = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &src[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![c * k * k, l], cols))
}

/// Adjoint of [`im2col`]: scatters columns back onto a Cin×H×W grid, summing overlaps.
pub fn col2im<T: Scalar>(
    cols: &Tensor<T>,
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let oh = conv_output_size(h, k, stride, padding)?;
    let ow = conv_output_size(w, k, stride, padding)?;
    if cols.shape() != [channels * k * k, oh * ow] {
        return Err(Error::shape(
            "col2im",
            format!(
                "cols {:?} vs expected [{}, {}]",
                cols.shape(),
                channels * k * k,
                oh * ow
            ),
        ));
    }
    let l = oh * ow;
    let src = cols.data();
    let mut out = vec![T::zero(); channels * h * w];
    for ci in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let col = &src[row * l..(row + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] += col[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![channels, h, w], out))
}

fn check_kernel<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>) -> Result<(usize, usize)> {
    expect_rank(input, 3, "conv2d")?;
    expect_rank(kernel, 4, "conv2d")?;
    let (cout, cin, kh, kw) = (kernel.dim(0), kernel.dim(1), kernel.dim(2), kernel.dim(3));
    if kh != kw {
        return Err(Error::shape("conv2d", format!("non-square kernel {kh}x{kw}")));
    }
    if cin != input.dim(0) {
        return Err(Error::shape(
            "conv2d",
            format!("kernel expects {cin} input channels, input has {}", input.dim(0)),
        ));
    }
    Ok((cout, kh))
}

fn is_pointwise(k: usize, stride: usize, padding: usize) -> bool {
    k == 1 && stride == 1 && padding == 0
}

/// Cross-correlation of a Cin×H×W input with a Cout×Cin×k×k kernel. No bias.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let (cout, k) = check_kernel(input, kernel)?;
    let (h, w) = (input.dim(1), input.dim(2));
    let oh = conv_output_size(h, k, stride, padding)?;
    let ow = conv_output_size(w, k, stride, padding)?;
    let ckk = kernel.numel() / cout;
    let l = oh * ow;
    let mut out = vec![T::zero(); cout * l];
    if is_pointwise(k, stride, padding) {
        gemm_nn(cout, ckk, l, kernel.data(), input.data(), &mut out);
    } else {
        let cols = im2col(input, k, stride, padding)?;
        gemm_nn(cout, ckk, l, kernel.data(), cols.data(), &mut out);
    }
    Tensor::from_parts(vec![cout, oh, ow], out).check_finite("conv2d")
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input<T: Scalar>(
    grad_out: &Tensor<T>,
    kernel: &Tensor<T>,
    input_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (cout, cin, k) = (kernel.dim(0), kernel.dim(1), kernel.dim(2));
    let (h, w) = (input_shape[1], input_shape[2]);
    let l = grad_out.dim(1) * grad_out.dim(2);
    let ckk = cin * k * k;
    let mut dcols = vec![T::zero(); ckk * l];
    gemm_tn(ckk, cout, l, kernel.data(), grad_out.data(), &mut dcols);
    if is_pointwise(k, stride, padding) {
        return Ok(Tensor::from_parts(vec![cin, h, w], dcols));
    }
    col2im(&Tensor::from_parts(vec![ckk, l], dcols), cin, h, w, k, stride, padding)
}

/// Gradient of [`conv2d`] with respect to its kernel.
pub fn conv2d_grad_kernel<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (cout, k) = (kernel_shape[0], kernel_shape[2]);
    let ckk = kernel_shape[1] * k * k;
    let l = grad_out.dim(1) * grad_out.dim(2);
    let mut dk = vec![T::zero(); cout * ckk];
    if is_pointwise(k, stride, padding) {
        gemm_nt(cout, l, ckk, grad_out.data(), input.data(), &mut dk);
    } else {
        let cols = im2col(input, k, stride, padding)?;
        gemm_nt(cout, l, ckk, grad_out.data(), cols.data(), &mut dk);
    }
    Ok(Tensor::from_parts(kernel_shape.to_vec(), dk))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
        let (cin, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let (cout, ks) = (k.dim(0), k.dim(2));
        let oh = (h + 2 * pad - ks) / stride + 1;
        let ow = (w + 2 * pad - ks) / stride + 1;
        let mut out = Tensor::zeros([cout, oh, ow]);
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ci in 0..cin {
                        for ky in 0..ks {
                            for kx in 0..ks {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.at(&[ci, iy as usize, ix as usize]) * k.at(&[co, ci, ky, kx]);
                                }
                            }
                        }
                    }
                    out.set(&[co, oy, ox], acc);
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::<f32>::new([1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let k = Tensor::<f32>::new([1, 1, 1, 1], vec![1.]).unwrap();
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn sign_symmetric_kernel() {
        let x = Tensor::<f32>::new([1, 1, 1], vec![5.]).unwrap();
        let k = Tensor::<f32>::new([2, 1, 1, 1], vec![1., -1.]).unwrap();
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap().data(), &[5., -5.]);
    }

    #[test]
    fn strided_padded_matches_loops() {
        let x = Tensor::<f64>::from_fn([2, 7, 6], |i| ((i * 37) % 11) as f64 - 5.0);
        let k = Tensor::<f64>::from_fn([3, 2, 3, 3], |i| ((i * 13) % 7) as f64 * 0.25 - 0.7);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let got = conv2d(&x, &k, stride, pad).unwrap();
            let want = naive(&x, &k, stride, pad);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros([2, 4, 4]);
        let k = Tensor::<f32>::zeros([1, 3, 3, 3]);
        assert!(conv2d(&x, &k, 1, 1).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let x = Tensor::<f64>::from_fn([2, 5, 5], |i| (i as f64 * 0.37).sin());
        let cols = im2col(&x, 3, 2, 1).unwrap();
        let c = Tensor::<f64>::from_fn(cols.shape().to_vec(), |i| (i as f64 * 0.11).cos());
        let lhs: f64 = cols.data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
        let back = col2im(&c, 2, 5, 5, 3, 2, 1).unwrap();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
