//! Small trainable building blocks shared by the encoder stacks: linear
//! and convolution layers with bias, pre-norm transformer blocks, and the
//! fixed 2-D sin-cos positional table.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, NodeId, Param};
use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

pub fn init_matrix<E: Scalar>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    rng: &mut impl Rng,
) -> Tensor<E> {
    let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
    Tensor::from_f64_slice(
        &[rows, cols],
        &(0..rows * cols).map(|_| normal.sample(rng)).collect::<Vec<_>>(),
    )
}

/// y = x W + b over flattened rows; x is [..., Din].
#[derive(Debug, Clone)]
pub struct Linear<E: Scalar> {
    pub w: Param<E>,
    pub b: Param<E>,
    pub din: usize,
    pub dout: usize,
}

impl<E: Scalar> Linear<E> {
    pub fn init(prefix: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: Param::new(format!("{prefix}.w"), init_matrix(din, dout, din, rng)),
            b: Param::new(format!("{prefix}.b"), Tensor::zeros(&[dout])),
            din,
            dout,
        }
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn forward(&self, g: &Graph<E>, x: NodeId) -> Result<NodeId, TensorError> {
        let shape = g.shape(x);
        let din = *shape.last().ok_or_else(|| {
            TensorError::ShapeMismatch("linear on rank-0 input".into())
        })?;
        if din != self.din {
            return Err(TensorError::ShapeMismatch(format!(
                "linear wants last dim {}, got {:?}",
                self.din, shape
            )));
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = g.reshape(x, &[rows, din])?;
        let y = g.matmul(flat, g.param(&self.w), false, false)?;
        let y = g.add_bcast(y, g.reshape(g.param(&self.b), &[1, self.dout])?)?;
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = self.dout;
        g.reshape(y, &out_shape)
    }
}

/// Layer-norm affine pair.
#[derive(Debug, Clone)]
pub struct LayerNorm<E: Scalar> {
    pub gamma: Param<E>,
    pub beta: Param<E>,
}

impl<E: Scalar> LayerNorm<E> {
    pub fn init(prefix: &str, dim: usize) -> Self {
        Self {
            gamma: Param::new(format!("{prefix}.gamma"), Tensor::full(&[dim], E::one())),
            beta: Param::new(format!("{prefix}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn forward(&self, g: &Graph<E>, x: NodeId) -> Result<NodeId, TensorError> {
        g.layer_norm(x, g.param(&self.gamma), g.param(&self.beta), 1e-5)
    }
}

/// 3-D convolution layer with bias along the channel axis.
#[derive(Debug, Clone)]
pub struct Conv3dLayer<E: Scalar> {
    pub w: Param<E>,
    pub b: Param<E>,
    pub stride: (usize, usize, usize),
    pub pad: (usize, usize, usize),
}

impl<E: Scalar> Conv3dLayer<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        prefix: &str,
        cout: usize,
        cin: usize,
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel.0 * kernel.1 * kernel.2;
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
        let w = Tensor::from_f64_slice(
            &[cout, cin, kernel.0, kernel.1, kernel.2],
            &(0..cout * fan_in).map(|_| normal.sample(rng)).collect::<Vec<_>>(),
        );
        Self {
            w: Param::new(format!("{prefix}.w"), w),
            b: Param::new(format!("{prefix}.b"), Tensor::zeros(&[cout])),
            stride,
            pad,
        }
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        vec![&mut self.w, &mut self.b]
    }

    /// x [N,Cin,D,H,W] -> [N,Cout,D',H',W'].
    pub fn forward(&self, g: &Graph<E>, x: NodeId) -> Result<NodeId, TensorError> {
        let y = g.conv3d(x, g.param(&self.w), self.stride, self.pad)?;
        let cout = g.shape(y)[1];
        let bias = g.reshape(g.param(&self.b), &[1, cout, 1, 1, 1])?;
        g.add_bcast(y, bias)
    }
}

/// 2-D convolution layer with bias along the channel axis.
#[derive(Debug, Clone)]
pub struct Conv2dLayer<E: Scalar> {
    pub w: Param<E>,
    pub b: Param<E>,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl<E: Scalar> Conv2dLayer<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        prefix: &str,
        cout: usize,
        cin: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel.0 * kernel.1;
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
        let w = Tensor::from_f64_slice(
            &[cout, cin, kernel.0, kernel.1],
            &(0..cout * fan_in).map(|_| normal.sample(rng)).collect::<Vec<_>>(),
        );
        Self {
            w: Param::new(format!("{prefix}.w"), w),
            b: Param::new(format!("{prefix}.b"), Tensor::zeros(&[cout])),
            stride,
            pad,
        }
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        vec![&mut self.w, &mut self.b]
    }

    /// x [N,Cin,H,W] -> [N,Cout,H',W'].
    pub fn forward(&self, g: &Graph<E>, x: NodeId) -> Result<NodeId, TensorError> {
        let y = g.conv2d(x, g.param(&self.w), self.stride, self.pad)?;
        let cout = g.shape(y)[1];
        let bias = g.reshape(g.param(&self.b), &[1, cout, 1, 1])?;
        g.add_bcast(y, bias)
    }
}

/// Multi-head self-attention over [B, T, D].
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<E: Scalar> {
    pub dim: usize,
    pub heads: usize,
    pub qkv: Linear<E>,
    pub out: Linear<E>,
}

impl<E: Scalar> MultiHeadAttention<E> {
    pub fn init(prefix: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(dim % heads == 0, "attention dim must divide into heads");
        Self {
            dim,
            heads,
            qkv: Linear::init(&format!("{prefix}.qkv"), dim, 3 * dim, rng),
            out: Linear::init(&format!("{prefix}.out"), dim, dim, rng),
        }
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        let mut p = self.qkv.params();
        p.extend(self.out.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut p = self.qkv.params_mut();
        p.extend(self.out.params_mut());
        p
    }

    pub fn forward(&self, g: &Graph<E>, x: NodeId) -> Result<NodeId, TensorError> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(TensorError::ShapeMismatch(format!(
                "attention wants [B,T,{}], got {:?}",
                self.dim, shape
            )));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let dh = d / self.heads;
        let qkv = self.qkv.forward(g, x)?; // [B,T,3D]
        let split = |g: &Graph<E>, offset: usize| -> Result<NodeId, TensorError> {
            let part = g.narrow(qkv, 2, offset * d, d)?;
            // [B,T,D] -> [B,H,T,dh] -> [B*H,T,dh]
            let part = g.reshape(part, &[b, t, self.heads, dh])?;
            let part = g.permute(part, &[0, 2, 1, 3])?;
            g.reshape(part, &[b * self.heads, t, dh])
        };
        let q = split(g, 0)?;
        let k = split(g, 1)?;
        let v = split(g, 2)?;
        let scores = g.bmm(q, k, false, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let probs = g.softmax_last(scores)?;
        let ctx = g.bmm(probs, v, false, false)?; // [B*H,T,dh]
        let ctx = g.reshape(ctx, &[b, self.heads, t, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, t, d])?;
        self.out.forward(g, ctx)
    }
}

/// Pre-norm transformer block: x + MHSA(LN(x)), then x + MLP(LN(x)).
#[derive(Debug, Clone)]
pub struct TransformerBlock<E: Scalar> {
    pub ln1: LayerNorm<E>,
    pub attn: MultiHeadAttention<E>,
    pub ln2: LayerNorm<E>,
    pub fc1: Linear<E>,
    pub fc2: Linear<E>,
}

impl<E: Scalar> TransformerBlock<E> {
    pub fn init(
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            ln1: LayerNorm::init(&format!("{prefix}.ln1"), dim),
            attn: MultiHeadAttention::init(&format!("{prefix}.attn"), dim, heads, rng),
            ln2: LayerNorm::init(&format!("{prefix}.ln2"), dim),
            fc1: Linear::init(&format!("{prefix}.fc1"), dim, dim * mlp_ratio, rng),
            fc2: Linear::init(&format!("{prefix}.fc2"), dim * mlp_ratio, dim, rng),
        }
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        let mut p = self.ln1.params();
        p.extend(self.attn.params());
        p.extend(self.ln2.params());
        p.extend(self.fc1.params());
        p.extend(self.fc2.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut p = self.ln1.params_mut();
        p.extend(self.attn.params_mut());
        p.extend(self.ln2.params_mut());
        p.extend(self.fc1.params_mut());
        p.extend(self.fc2.params_mut());
        p
    }

    pub fn forward(&self, g: &Graph<E>, x: NodeId) -> Result<NodeId, TensorError> {
        let a = self.attn.forward(g, self.ln1.forward(g, x)?)?;
        let x = g.add(x, a)?;
        let h = self.fc1.forward(g, self.ln2.forward(g, x)?)?;
        let h = g.gelu(h)?;
        let m = self.fc2.forward(g, h)?;
        g.add(x, m)
    }
}

/// Fixed 2-D sin-cos positional table for a (gh x gw) grid, dimension d
/// (d must be divisible by 4: half for rows, half for columns, each with
/// interleaved sin/cos).
pub fn sincos_2d<E: Scalar>(gh: usize, gw: usize, d: usize) -> Tensor<E> {
    assert!(d % 4 == 0, "positional dimension must divide by 4");
    let half = d / 2;
    let freq = half / 2;
    let mut out = vec![0.0f64; gh * gw * d];
    for r in 0..gh {
        for c in 0..gw {
            let base = (r * gw + c) * d;
            for i in 0..freq {
                let omega = 1.0 / 10000f64.powf(i as f64 / freq as f64);
                out[base + 2 * i] = (r as f64 * omega).sin();
                out[base + 2 * i + 1] = (r as f64 * omega).cos();
                out[base + half + 2 * i] = (c as f64 * omega).sin();
                out[base + half + 2 * i + 1] = (c as f64 * omega).cos();
            }
        }
    }
    Tensor::from_f64_slice(&[gh * gw, d], &out)
}
