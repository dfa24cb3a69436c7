//! Dense f64 tensors and the kernels the rest of the crate is built on.
//!
//! Every public operation checks its output for NaN/Inf and reports
//! [`Error::NonFinite`] instead of returning a poisoned tensor.

use crate::par;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    /// Builds a tensor, validating shape, length and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero-sized axis in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        check_finite("Tensor::new", &data)?;
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    fn checked(op: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_finite(op, &data)?;
        Ok(Self::from_parts(shape, data))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    /// n×n identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Size of the first axis.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of elements per index of the first axis.
    pub fn row_len(&self) -> usize {
        self.len() / self.rows()
    }

    /// Gathers entries of the first axis, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::dim("select_rows with no indices"));
        }
        let rl = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * rl);
        for &i in idx {
            if i >= self.rows() {
                return Err(Error::dim(format!("row {i} out of range {}", self.rows())));
            }
            data.extend_from_slice(&self.data[i * rl..(i + 1) * rl]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Ok(Self::from_parts(shape, data))
    }

    pub fn map(&self, op: &'static str, f: impl Fn(f64) -> f64 + Sync + Send) -> Result<Self> {
        Self::checked(op, self.shape.clone(), par::map_slice(&self.data, f))
    }

    pub fn zip(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64 + Sync + Send,
    ) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Self::checked(op, self.shape.clone(), par::zip_slice(&self.data, &other.data, f))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Result<Self> {
        self.map("scale", move |a| a * k)
    }

    pub fn square(&self) -> Result<Self> {
        self.map("square", |a| a * a)
    }

    pub fn sqrt(&self) -> Result<Self> {
        if self.data.iter().any(|&v| v < 0.0) {
            return Err(Error::contract("sqrt of negative value"));
        }
        self.map("sqrt", f64::sqrt)
    }

    pub fn exp(&self) -> Result<Self> {
        self.map("exp", f64::exp)
    }

    pub fn ln(&self) -> Result<Self> {
        self.map("ln", f64::ln)
    }

    pub fn sigmoid(&self) -> Result<Self> {
        self.map("sigmoid", sigmoid)
    }

    pub fn relu(&self) -> Result<Self> {
        self.map("relu", |a| a.max(0.0))
    }

    /// Sum of all elements, accumulated in index order.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    /// Adds `bias` (shape `[n]`) along the last axis of `self`.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Self> {
        let n = *self.shape.last().unwrap();
        if bias.shape != [n] {
            return Err(Error::dim(format!(
                "bias {:?} does not match last axis {n}",
                bias.shape
            )));
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Self::checked("add_bias", self.shape.clone(), out)
    }

    /// Sums over all leading axes, leaving the last one.
    pub fn sum_leading(&self) -> Self {
        let n = *self.shape.last().unwrap();
        let mut out = vec![0.0; n];
        for row in self.data.chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Self::from_parts(vec![n], out)
    }

    /// Adds `bias` (shape `[c]`) to channel axis 1 of a `[B, C, ...]` tensor.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Self> {
        if self.shape.len() < 2 || bias.shape != [self.shape[1]] {
            return Err(Error::dim(format!(
                "channel bias {:?} does not fit {:?}",
                bias.shape, self.shape
            )));
        }
        let plane: usize = self.shape[2..].iter().product();
        let mut out = self.data.clone();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let b = bias.data[i % self.shape[1]];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Self::checked("add_channel_bias", self.shape.clone(), out)
    }

    /// Sums a `[B, C, ...]` tensor down to `[C]`.
    pub fn sum_channels(&self) -> Self {
        let c = self.shape[1];
        let plane: usize = self.shape[2..].iter().product();
        let mut out = vec![0.0; c];
        for (i, chunk) in self.data.chunks(plane).enumerate() {
            out[i % c] += chunk.iter().sum::<f64>();
        }
        Self::from_parts(vec![c], out)
    }

    /// Row-wise argmax of a `[B, K]` matrix.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.data
            .chunks(self.row_len())
            .map(|row| {
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matrix_dims(t: &Tensor, name: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(format!("{name} must be a matrix, got {s:?}"))),
    }
}

/// Output rows handed to one dgemm call.
const GEMM_ROW_BLOCK: usize = 64;

/// Row-major `C[m×n] = A·B` where A and B are addressed by explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 {
        return c;
    }
    par::for_each_chunk_mut(&mut c, GEMM_ROW_BLOCK * n, |ci, block| {
        let r0 = ci * GEMM_ROW_BLOCK;
        let rows = block.len() / n;
        // SAFETY: the strides address a[r0..r0+rows, 0..k] and b[0..k, 0..n],
        // which lie inside the slices by construction of the callers; the
        // destination block is exclusively borrowed.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().offset(r0 as isize * rsa),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                0.0,
                block.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
    c
}

/// `a[M×K] · b[K×N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a, "matmul lhs")?;
    let (k2, n) = matrix_dims(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::dim(format!("matmul inner dims {k} vs {k2}")));
    }
    let c = gemm(m, k, n, &a.data, k as isize, 1, &b.data, n as isize, 1);
    Tensor::checked("matmul", vec![m, n], c)
}

/// `aᵀ · b` for `a[K×M]`, `b[K×N]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = matrix_dims(a, "matmul_tn lhs")?;
    let (k2, n) = matrix_dims(b, "matmul_tn rhs")?;
    if k != k2 {
        return Err(Error::dim(format!("matmul_tn inner dims {k} vs {k2}")));
    }
    let c = gemm(m, k, n, &a.data, 1, m as isize, &b.data, n as isize, 1);
    Tensor::checked("matmul_tn", vec![m, n], c)
}

/// `a · bᵀ` for `a[M×K]`, `b[N×K]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a, "matmul_nt lhs")?;
    let (n, k2) = matrix_dims(b, "matmul_nt rhs")?;
    if k != k2 {
        return Err(Error::dim(format!("matmul_nt inner dims {k} vs {k2}")));
    }
    let c = gemm(m, k, n, &a.data, k as isize, 1, &b.data, 1, k as isize);
    Tensor::checked("matmul_nt", vec![m, n], c)
}

/// Geometry of a zero-padded 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[b, c, h, w], &[f, kc, kh, kw]) = (input, kernel) else {
            return Err(Error::dim(format!(
                "conv2d wants 4-d input and kernel, got {input:?} and {kernel:?}"
            )));
        };
        if c != kc {
            return Err(Error::dim(format!("conv2d channels {c} vs kernel {kc}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be >= 1"));
        }
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if kh > ph || kw > pw {
            return Err(Error::dim(format!(
                "kernel {kh}x{kw} larger than padded input {ph}x{pw}"
            )));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::dim(format!(
                "non-integral conv output size for input {ph}x{pw}, kernel {kh}x{kw}, stride {stride}"
            )));
        }
        Ok(Self {
            batch: b,
            in_channels: c,
            height: h,
            width: w,
            filters: f,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.filters, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Source pixel for patch row `r` at output position `p`, if inside the image.
    #[inline]
    fn source(&self, r: usize, p: usize) -> Option<usize> {
        let c = r / (self.kernel_h * self.kernel_w);
        let i = (r / self.kernel_w) % self.kernel_h;
        let j = r % self.kernel_w;
        let (oy, ox) = (p / self.out_w, p % self.out_w);
        let y = (oy * self.stride + i).checked_sub(self.padding)?;
        let x = (ox * self.stride + j).checked_sub(self.padding)?;
        (y < self.height && x < self.width).then(|| (c * self.height + y) * self.width + x)
    }

    /// `[C·kH·kW, H'·W']` patch matrix of one image.
    fn im2col(&self, image: &[f64]) -> Vec<f64> {
        let (rows, cols) = (self.patch_len(), self.positions());
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for p in 0..cols {
                if let Some(s) = self.source(r, p) {
                    out[r * cols + p] = image[s];
                }
            }
        }
        out
    }

    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let (rows, np) = (self.patch_len(), self.positions());
        for r in 0..rows {
            for p in 0..np {
                if let Some(s) = self.source(r, p) {
                    image[s] += cols[r * np + p];
                }
            }
        }
    }
}

/// Cross-correlation of `input[B×C×H×W]` with `kernel[F×C×kH×kW]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let (kk, np) = (g.patch_len(), g.positions());
    let per_image = par::map_range(g.batch, |b| {
        let img = &input.data[b * g.image_len()..(b + 1) * g.image_len()];
        let cols = g.im2col(img);
        gemm(g.filters, kk, np, &kernel.data, kk as isize, 1, &cols, np as isize, 1)
    });
    Tensor::checked("conv2d", g.output_shape().to_vec(), per_image.concat())
}

/// Gradient of a conv2d output with respect to its input.
pub fn conv2d_grad_input(
    grad_out: &Tensor,
    kernel: &Tensor,
    input_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input_shape, kernel.shape(), stride, padding)?;
    if grad_out.shape() != g.output_shape() {
        return Err(Error::dim("conv2d_grad_input: gradient shape mismatch"));
    }
    let (kk, np, f) = (g.patch_len(), g.positions(), g.filters);
    let per_image = par::map_range(g.batch, |b| {
        let go = &grad_out.data[b * f * np..(b + 1) * f * np];
        // kernelᵀ[kk×F] · go[F×np]
        let dcols = gemm(kk, f, np, &kernel.data, 1, kk as isize, go, np as isize, 1);
        let mut img = vec![0.0; g.image_len()];
        g.col2im(&dcols, &mut img);
        img
    });
    Tensor::checked("conv2d_grad_input", input_shape.to_vec(), per_image.concat())
}

/// Gradient of a conv2d output with respect to its kernel.
pub fn conv2d_grad_kernel(
    grad_out: &Tensor,
    input: &Tensor,
    kernel_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernel_shape, stride, padding)?;
    if grad_out.shape() != g.output_shape() {
        return Err(Error::dim("conv2d_grad_kernel: gradient shape mismatch"));
    }
    let (kk, np, f) = (g.patch_len(), g.positions(), g.filters);
    let per_image = par::map_range(g.batch, |b| {
        let img = &input.data[b * g.image_len()..(b + 1) * g.image_len()];
        let cols = g.im2col(img);
        let go = &grad_out.data[b * f * np..(b + 1) * f * np];
        // go[F×np] · colsᵀ[np×kk]
        gemm(f, np, kk, go, np as isize, 1, &cols, 1, np as isize)
    });
    let mut acc = vec![0.0; f * kk];
    for part in &per_image {
        for (a, v) in acc.iter_mut().zip(part) {
            *a += v;
        }
    }
    Tensor::checked("conv2d_grad_kernel", kernel_shape.to_vec(), acc)
}

/// Mean softmax cross-entropy of `logits[B×K]` against integer labels,
/// together with the row-wise softmax probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, k) = matrix_dims(logits, "logits")?;
    if labels.len() != b {
        return Err(Error::dim(format!("{} labels for {b} rows", labels.len())));
    }
    let mut probs = vec![0.0; b * k];
    let mut total = 0.0;
    for (i, (row, &y)) in logits.data.chunks(k).zip(labels).enumerate() {
        if y >= k {
            return Err(Error::contract(format!("label {y} out of range {k}")));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        total += lse - row[y];
        for (p, v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
            *p = (v - lse).exp();
        }
    }
    let mean = total / b as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite {
            op: "softmax_cross_entropy",
        });
    }
    Ok((mean, Tensor::from_parts(vec![b, k], probs)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{sample_standard_normal, RngState};

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a.data()[i * k + l] * b.data()[l * n + j];
                }
            }
        }
        c
    }

    fn transpose(t: &Tensor) -> Tensor {
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut d = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = t.data()[i * c + j];
            }
        }
        Tensor::new(vec![c, r], d).unwrap()
    }

    #[test]
    fn new_rejects_bad_length_and_nan() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(matmul(&a, &Tensor::eye(2)).unwrap(), a);
        let b = sample_standard_normal(&mut RngState::new(1), &[3, 4]);
        assert_eq!(matmul(&Tensor::eye(3), &b).unwrap(), b);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn transposed_variants_match_explicit_transpose() {
        let mut r = RngState::new(2);
        let a = sample_standard_normal(&mut r, &[6, 4]);
        let b = sample_standard_normal(&mut r, &[6, 5]);
        let c = sample_standard_normal(&mut r, &[5, 4]);
        let tn = matmul_tn(&a, &b).unwrap();
        let want = naive_matmul(&transpose(&a), &b);
        for (x, y) in tn.data().iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        let nt = matmul_nt(&a, &c).unwrap();
        let want = naive_matmul(&a, &transpose(&c));
        for (x, y) in nt.data().iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn big_matmul_is_thread_count_invariant() {
        let mut r = RngState::new(9);
        let a = sample_standard_normal(&mut r, &[300, 200]);
        let b = sample_standard_normal(&mut r, &[200, 70]);
        let par_out = matmul(&a, &b).unwrap();
        let seq_out = par::sequential(|| matmul(&a, &b).unwrap());
        assert_eq!(par_out.data(), seq_out.data());
    }

    #[test]
    fn conv_identity_and_sum_kernels() {
        let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let one = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &one, 1, 0).unwrap().data(), x.data());

        let ones = Tensor::full(&[1, 1, 3, 3], 1.0);
        let out = conv2d(&ones, &ones, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(conv2d(&x, &k, 2, 0).is_err());
        assert!(conv2d(&x, &k, 1, 0).is_ok());
        let big = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(conv2d(&x, &big, 1, 0).is_err());
        assert!(conv2d(&x, &big, 1, 1).is_ok());
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let logits = Tensor::zeros(&[2, 4]);
        let (loss, p) = softmax_cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(softmax_cross_entropy(&logits, &[0, 4]).is_err());
    }

    #[test]
    fn exp_overflow_is_an_error() {
        let t = Tensor::scalar(1000.0);
        assert!(matches!(t.exp(), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn broadcast_helpers() {
        let x = Tensor::new(vec![2, 3], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let b = Tensor::new(vec![3], vec![10., 20., 30.]).unwrap();
        assert_eq!(x.add_bias(&b).unwrap().data(), &[10., 21., 32., 13., 24., 35.]);
        assert_eq!(x.sum_leading().data(), &[3., 5., 7.]);
        let img = Tensor::full(&[2, 3, 2, 2], 1.0);
        let cb = img.add_channel_bias(&b).unwrap();
        assert_eq!(cb.data()[4], 21.0);
        assert_eq!(img.sum_channels().data(), &[8., 8., 8.]);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-16);
    }
}
