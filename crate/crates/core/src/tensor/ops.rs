use super::{expect_rank, s, Scalar, Tensor};
use crate::error::{Error, Result};

/// Default floor on row norms in [`l2_normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `c += a · b` for row-major a (m×k), b (k×n), c (m×n).
pub(crate) fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` for a (m×k), b (n×k), c (m×n).
pub(crate) fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c += aᵀ · b` for a (k×m), b (k×n), c (m×n).
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for kk in 0..k {
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = a[kk * m + i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(a, 2, "matmul")?;
    expect_rank(b, 2, "matmul")?;
    let (m, k, p) = (a.dim(0), a.dim(1), b.dim(1));
    if b.dim(0) != k {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![T::zero(); m * p];
    gemm_nn(m, k, p, a.data(), b.data(), &mut out);
    Tensor::from_parts(vec![m, p], out).check_finite("matmul")
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(a, 2, "matmul_nt")?;
    expect_rank(b, 2, "matmul_nt")?;
    let (m, k, p) = (a.dim(0), a.dim(1), b.dim(0));
    if b.dim(1) != k {
        return Err(Error::shape("matmul_nt", format!("{:?} x {:?}ᵀ", a.shape(), b.shape())));
    }
    let mut out = vec![T::zero(); m * p];
    gemm_nt(m, k, p, a.data(), b.data(), &mut out);
    Tensor::from_parts(vec![m, p], out).check_finite("matmul_nt")
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(a, 2, "matmul_tn")?;
    expect_rank(b, 2, "matmul_tn")?;
    let (k, m, p) = (a.dim(0), a.dim(1), b.dim(1));
    if b.dim(0) != k {
        return Err(Error::shape("matmul_tn", format!("{:?}ᵀ x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![T::zero(); m * p];
    gemm_tn(m, k, p, a.data(), b.data(), &mut out);
    Tensor::from_parts(vec![m, p], out).check_finite("matmul_tn")
}

pub fn transpose2d<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(a, 2, "transpose")?;
    let (r, c) = (a.dim(0), a.dim(1));
    let src = a.data();
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_with<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    same_shape(a, b, op)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data).check_finite(op)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with(a, b, "add", |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with(a, b, "sub", |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with(a, b, "mul", |x, y| x * y)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, factor: T) -> Result<Tensor<T>> {
    a.map(|v| v * factor).check_finite("scale")
}

/// Adds `bias[c]` to every spatial cell of channel `c` of a C×H×W tensor.
pub fn add_channel_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(x, 3, "add_channel_bias")?;
    let c = x.dim(0);
    if bias.numel() != c {
        return Err(Error::shape(
            "add_channel_bias",
            format!("bias {:?} for {c} channels", bias.shape()),
        ));
    }
    let hw = x.dim(1) * x.dim(2);
    let mut out = x.data().to_vec();
    for (ch, &b) in bias.data().iter().enumerate() {
        for v in &mut out[ch * hw..(ch + 1) * hw] {
            *v += b;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out).check_finite("add_channel_bias")
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// `t · sigmoid(t)` elementwise.
pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid_scalar(v))
}

/// `(silu(x·Wg) ⊙ (x·Wu)) · Wd`.
pub fn swiglu_ffn<T: Scalar>(
    x: &Tensor<T>,
    w_gate: &Tensor<T>,
    w_up: &Tensor<T>,
    w_down: &Tensor<T>,
) -> Result<Tensor<T>> {
    if w_gate.shape() != w_up.shape() || w_down.rank() != 2 || w_gate.rank() != 2 || w_down.dim(0) != w_gate.dim(1) {
        return Err(Error::shape(
            "swiglu_ffn",
            format!(
                "Wg {:?}, Wu {:?}, Wd {:?}",
                w_gate.shape(),
                w_up.shape(),
                w_down.shape()
            ),
        ));
    }
    let gate = silu(&matmul(x, w_gate)?);
    let up = matmul(x, w_up)?;
    matmul(&mul(&gate, &up)?, w_down)
}

/// Divides each row of a C×D matrix by `max(‖row‖₂, eps)`.
pub fn l2_normalize_rows<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    expect_rank(x, 2, "l2_normalize_rows")?;
    let d = x.dim(1);
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(d) {
        let norm = dot(row, row).sqrt().max(eps);
        for v in row {
            *v = *v / norm;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out).check_finite("l2_normalize_rows")
}

/// Per-channel softmax over the cells where `region > 0.5`; exact zeros elsewhere.
pub fn masked_softmax<T: Scalar>(logits: &Tensor<T>, region: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(logits, 3, "masked_softmax")?;
    expect_rank(region, 2, "masked_softmax")?;
    if region.shape() != &logits.shape()[1..] {
        return Err(Error::shape(
            "masked_softmax",
            format!("logits {:?}, region {:?}", logits.shape(), region.shape()),
        ));
    }
    let cells: Vec<usize> = region
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > s(0.5))
        .map(|(i, _)| i)
        .collect();
    if cells.is_empty() {
        return Err(Error::EmptyRegion("masked_softmax"));
    }
    let hw = region.numel();
    let mut out = vec![T::zero(); logits.numel()];
    for (src, dst) in logits.data().chunks_exact(hw).zip(out.chunks_exact_mut(hw)) {
        let max = cells.iter().map(|&p| src[p]).fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for &p in &cells {
            let e = (src[p] - max).exp();
            dst[p] = e;
            total += e;
        }
        for &p in &cells {
            dst[p] = dst[p] / total;
        }
    }
    Tensor::from_parts(logits.shape().to_vec(), out).check_finite("masked_softmax")
}

/// Nearest-neighbour upsampling of a C×H×W tensor by an integer factor.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    expect_rank(x, 3, "upsample_nearest")?;
    if factor == 0 {
        return Err(Error::InvalidArgument("upsample factor must be positive".into()));
    }
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let (oh, ow) = (h * factor, w * factor);
    let src = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            let row = &src[(ch * h + oy / factor) * w..(ch * h + oy / factor + 1) * w];
            for ox in 0..ow {
                out.push(row[ox / factor]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(tensors: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::shape("concat", format!("axis {axis} for rank {rank}")));
    }
    for t in tensors {
        let ok = t.rank() == rank
            && t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?} along axis {axis}", t.shape(), first.shape()),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total_axis: usize = tensors.iter().map(|t| t.dim(axis)).sum();
    let mut out = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for t in tensors {
            let chunk = t.dim(axis) * inner;
            out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;
    Ok(Tensor::from_parts(shape, out))
}

/// Splits `x` along `axis` into pieces with the given extents (inverse of [`concat`]).
pub fn split<T: Scalar>(x: &Tensor<T>, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    if axis >= x.rank() || sizes.iter().sum::<usize>() != x.dim(axis) {
        return Err(Error::shape(
            "split",
            format!("{:?} into {sizes:?} along {axis}", x.shape()),
        ));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let full = x.dim(axis) * inner;
    let mut start = 0;
    let mut parts = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mut data = Vec::with_capacity(outer * size * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&x.data()[base..base + size * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = size;
        parts.push(Tensor::from_parts(shape, data));
        start += size;
    }
    Ok(parts)
}

/// Non-overlapping `factor`×`factor` block means of an H×W map.
pub fn avg_downsample<T: Scalar>(mask: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    expect_rank(mask, 2, "avg_downsample")?;
    let (h, w) = (mask.dim(0), mask.dim(1));
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "avg_downsample",
            format!("{h}x{w} not divisible by {factor}"),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = T::one() / T::from_usize(factor * factor).unwrap();
    let src = mask.data();
    let mut out = vec![T::zero(); oh * ow];
    for y in 0..h {
        for x in 0..w {
            out[(y / factor) * ow + x / factor] += src[y * w + x];
        }
    }
    for v in &mut out {
        *v *= inv;
    }
    Ok(Tensor::from_parts(vec![oh, ow], out))
}
