//! Dense row-major tensors over f32/f64 plus the raw compute kernels
//! (GEMM dispatch, im2col/col2im) that the autodiff graph builds on.

use std::fmt;
use std::sync::Arc;

use crate::error::TensorError;

/// Element type for tensors. Training paths use `f32`; oracle and test
/// paths use `f64`.
pub trait Scalar:
    num_traits::Float + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// C = alpha * op(A) * op(B) + beta * C with row-major slices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::sgemm(
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
                rsc,
                csc,
            );
        }
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(
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
                rsc,
                csc,
            );
        }
    }
}

/// Dense n-dimensional array, row-major, cheaply cloneable via `Arc`.
#[derive(Clone)]
pub struct Tensor<E: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Scalar> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(shape={:?}, len={})", self.shape, self.data.len())
    }
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self, TensorError> {
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                count,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let count: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![E::zero(); count]),
        }
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let count: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; count]),
        }
    }

    pub fn scalar(value: E) -> Self {
        Self {
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Self {
        Self::new(shape.to_vec(), data).expect("from_vec: shape/data length mismatch")
    }

    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> Self {
        Self::from_vec(shape, data.iter().map(|&x| E::from_f64(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// True when both tensors share the same backing buffer.
    pub fn ptr_eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [E] {
        if Arc::strong_count(&self.data) != 1 {
            self.data = Arc::new(self.data.as_ref().clone());
        }
        Arc::get_mut(&mut self.data).expect("unshared after copy-on-write")
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    /// Same buffer, new shape; element count must be preserved.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        let count: usize = shape.iter().product();
        if count != self.data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E) -> Result<Self, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Max |a - b| over all elements, in f64.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Permute axes, materializing a new row-major buffer.
    pub fn permute(&self, perm: &[usize]) -> Result<Self, TensorError> {
        let nd = self.shape.len();
        if perm.len() != nd {
            return Err(TensorError::InvalidArgument(format!(
                "permute {:?} on rank-{} tensor",
                perm, nd
            )));
        }
        let mut seen = vec![false; nd];
        for &p in perm {
            if p >= nd || seen[p] {
                return Err(TensorError::InvalidArgument(format!(
                    "permute {:?} is not a permutation",
                    perm
                )));
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = row_major_strides(&self.shape);
        let out_strides = row_major_strides(&out_shape);
        let mut out = vec![E::zero(); self.data.len()];
        // Walk the output in order, compute the source index.
        let mut idx = vec![0usize; nd];
        for (o, slot) in out.iter_mut().enumerate() {
            let mut rem = o;
            for d in 0..nd {
                idx[d] = rem / out_strides[d];
                rem %= out_strides[d];
            }
            let mut src = 0;
            for d in 0..nd {
                src += idx[d] * in_strides[perm[d]];
            }
            *slot = self.data[src];
        }
        Ok(Self {
            shape: out_shape,
            data: Arc::new(out),
        })
    }
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// C[m,n] = A[m,k] x B[k,n], row-major, optional transposes and accumulate.
#[allow(clippy::too_many_arguments)]
pub fn matmul_into<E: Scalar>(
    a: &[E],
    b: &[E],
    c: &mut [E],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    beta: E,
) {
    // Row-major A[m,k] has row stride k; a transposed operand is stored
    // [k,m], so its logical row stride is 1 and column stride m.
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    E::gemm(m, k, n, E::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

/// Convolution geometry for one spatial axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold a [Cin, D, H, W] volume into columns of shape
/// [Do*Ho*Wo, Cin*kd*kh*kw] for GEMM-based 3-D convolution. 2-D convolution
/// uses the same routine with D = kd = sd = 1, pd = 0.
#[allow(clippy::too_many_arguments)]
pub fn im2col3d<E: Scalar>(
    input: &[E],
    cin: usize,
    d: usize,
    h: usize,
    w: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    sd: usize,
    sh: usize,
    sw: usize,
    pd: usize,
    ph: usize,
    pw: usize,
    out: &mut [E],
) {
    let do_ = conv_out_dim(d, kd, sd, pd);
    let ho = conv_out_dim(h, kh, sh, ph);
    let wo = conv_out_dim(w, kw, sw, pw);
    let cols = cin * kd * kh * kw;
    debug_assert_eq!(out.len(), do_ * ho * wo * cols);
    let mut row = 0usize;
    for od in 0..do_ {
        let d0 = (od * sd) as isize - pd as isize;
        for oh in 0..ho {
            let h0 = (oh * sh) as isize - ph as isize;
            for ow in 0..wo {
                let w0 = (ow * sw) as isize - pw as isize;
                let base = row * cols;
                let mut col = 0usize;
                for c in 0..cin {
                    let cbase = c * d * h * w;
                    for dk in 0..kd {
                        let di = d0 + dk as isize;
                        let d_ok = di >= 0 && (di as usize) < d;
                        for hk in 0..kh {
                            let hi = h0 + hk as isize;
                            let h_ok = hi >= 0 && (hi as usize) < h;
                            if d_ok && h_ok {
                                let rowbase = cbase + (di as usize) * h * w + (hi as usize) * w;
                                for wk in 0..kw {
                                    let wi = w0 + wk as isize;
                                    out[base + col] = if wi >= 0 && (wi as usize) < w {
                                        input[rowbase + wi as usize]
                                    } else {
                                        E::zero()
                                    };
                                    col += 1;
                                }
                            } else {
                                for _ in 0..kw {
                                    out[base + col] = E::zero();
                                    col += 1;
                                }
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add columns back into a [Cin, D, H, W] volume; adjoint of
/// `im2col3d` and the core of the convolution input gradient.
#[allow(clippy::too_many_arguments)]
pub fn col2im3d<E: Scalar>(
    cols_mat: &[E],
    cin: usize,
    d: usize,
    h: usize,
    w: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    sd: usize,
    sh: usize,
    sw: usize,
    pd: usize,
    ph: usize,
    pw: usize,
    out: &mut [E],
) {
    let do_ = conv_out_dim(d, kd, sd, pd);
    let ho = conv_out_dim(h, kh, sh, ph);
    let wo = conv_out_dim(w, kw, sw, pw);
    let cols = cin * kd * kh * kw;
    debug_assert_eq!(cols_mat.len(), do_ * ho * wo * cols);
    debug_assert_eq!(out.len(), cin * d * h * w);
    let mut row = 0usize;
    for od in 0..do_ {
        let d0 = (od * sd) as isize - pd as isize;
        for oh in 0..ho {
            let h0 = (oh * sh) as isize - ph as isize;
            for ow in 0..wo {
                let w0 = (ow * sw) as isize - pw as isize;
                let base = row * cols;
                let mut col = 0usize;
                for c in 0..cin {
                    let cbase = c * d * h * w;
                    for dk in 0..kd {
                        let di = d0 + dk as isize;
                        let d_ok = di >= 0 && (di as usize) < d;
                        for hk in 0..kh {
                            let hi = h0 + hk as isize;
                            let h_ok = hi >= 0 && (hi as usize) < h;
                            if d_ok && h_ok {
                                let rowbase = cbase + (di as usize) * h * w + (hi as usize) * w;
                                for wk in 0..kw {
                                    let wi = w0 + wk as isize;
                                    if wi >= 0 && (wi as usize) < w {
                                        out[rowbase + wi as usize] =
                                            out[rowbase + wi as usize] + cols_mat[base + col];
                                    }
                                    col += 1;
                                }
                            } else {
                                col += kw;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}
