//! Differentiable operations recorded on a [`Graph`].
//!
//! Forward kernels live here together with their backward closures; the
//! naive-loop oracles they are tested against live in the test suites and
//! stay independent of these implementations.

use super::{Graph, NodeId};
use crate::error::TensorError;
use crate::tensor::{col2im3d, conv_out_dim, im2col3d, matmul_into, row_major_strides, Scalar, Tensor};

fn same_shape<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>, what: &str) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Walk `x` linearly, yielding the matching offset into a broadcast `w`
/// whose shape agrees with `x` except on axes where it is 1.
fn bcast_walk(x_shape: &[usize], w_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let nd = x_shape.len();
    let ws = row_major_strides(w_shape);
    let w_strides: Vec<usize> = (0..nd).map(|d| if w_shape[d] == 1 { 0 } else { ws[d] }).collect();
    let x_len: usize = x_shape.iter().product();
    let mut idx = vec![0usize; nd];
    let mut woff = 0usize;
    for xoff in 0..x_len {
        f(xoff, woff);
        for d in (0..nd).rev() {
            idx[d] += 1;
            woff += w_strides[d];
            if idx[d] < x_shape[d] {
                break;
            }
            idx[d] = 0;
            woff -= w_strides[d] * x_shape[d];
        }
    }
}

fn bcast_check(x_shape: &[usize], w_shape: &[usize]) -> Result<(), TensorError> {
    if x_shape.len() != w_shape.len()
        || x_shape
            .iter()
            .zip(w_shape)
            .any(|(&x, &w)| w != x && w != 1)
    {
        return Err(TensorError::ShapeMismatch(format!(
            "broadcast {:?} against {:?}",
            w_shape, x_shape
        )));
    }
    Ok(())
}

/// Split a shape at `axis` into (outer, mid, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    d: usize,
    h: usize,
    w: usize,
    cout: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    sd: usize,
    sh: usize,
    sw: usize,
    pd: usize,
    ph: usize,
    pw: usize,
    dout: usize,
    hout: usize,
    wout: usize,
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.cin * self.kd * self.kh * self.kw
    }
    fn rows(&self) -> usize {
        self.dout * self.hout * self.wout
    }
}

impl<E: Scalar> Graph<E> {
    // ---- elementwise ----

    pub fn add(&self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(&va, &vb, "add")?;
        let out = va.zip_map(&vb, |x, y| x + y)?;
        Ok(self.push_op(
            out,
            vec![a, b],
            Box::new(|g, _, _| vec![g.clone(), g.clone()]),
        ))
    }

    pub fn sub(&self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(&va, &vb, "sub")?;
        let out = va.zip_map(&vb, |x, y| x - y)?;
        Ok(self.push_op(
            out,
            vec![a, b],
            Box::new(|g, _, _| vec![g.clone(), g.map(|x| -x)]),
        ))
    }

    pub fn mul(&self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(&va, &vb, "mul")?;
        let out = va.zip_map(&vb, |x, y| x * y)?;
        Ok(self.push_op(
            out,
            vec![a, b],
            Box::new(|g, _, p| {
                vec![
                    g.zip_map(&p[1], |gi, bi| gi * bi).unwrap(),
                    g.zip_map(&p[0], |gi, ai| gi * ai).unwrap(),
                ]
            }),
        ))
    }

    pub fn neg(&self, a: NodeId) -> Result<NodeId, TensorError> {
        let out = self.value(a).map(|x| -x);
        Ok(self.push_op(out, vec![a], Box::new(|g, _, _| vec![g.map(|x| -x)])))
    }

    pub fn scale(&self, a: NodeId, c: f64) -> Result<NodeId, TensorError> {
        let ce = E::from_f64(c);
        let out = self.value(a).map(|x| x * ce);
        Ok(self.push_op(
            out,
            vec![a],
            Box::new(move |g, _, _| vec![g.map(|x| x * ce)]),
        ))
    }

    pub fn add_scalar(&self, a: NodeId, c: f64) -> Result<NodeId, TensorError> {
        let ce = E::from_f64(c);
        let out = self.value(a).map(|x| x + ce);
        Ok(self.push_op(out, vec![a], Box::new(|g, _, _| vec![g.clone()])))
    }

    pub fn exp(&self, a: NodeId) -> Result<NodeId, TensorError> {
        let out = self.value(a).map(|x| x.exp());
        Ok(self.push_op(
            out,
            vec![a],
            Box::new(|g, y, _| vec![g.zip_map(y, |gi, yi| gi * yi).unwrap()]),
        ))
    }

    pub fn recip(&self, a: NodeId) -> Result<NodeId, TensorError> {
        let out = self.value(a).map(|x| x.recip());
        Ok(self.push_op(
            out,
            vec![a],
            Box::new(|g, y, _| vec![g.zip_map(y, |gi, yi| -gi * yi * yi).unwrap()]),
        ))
    }

    pub fn sin(&self, a: NodeId) -> Result<NodeId, TensorError> {
        let out = self.value(a).map(|x| x.sin());
        Ok(self.push_op(
            out,
            vec![a],
            Box::new(|g, _, p| vec![g.zip_map(&p[0], |gi, xi| gi * xi.cos()).unwrap()]),
        ))
    }

    pub fn cos(&self, a: NodeId) -> Result<NodeId, TensorError> {
        let out = self.value(a).map(|x| x.cos());
        Ok(self.push_op(
            out,
            vec![a],
            Box::new(|g, _, p| vec![g.zip_map(&p[0], |gi, xi| -gi * xi.sin()).unwrap()]),
        ))
    }

    pub fn sigmoid(&self, a: NodeId) -> Result<NodeId, TensorError> {
        let one = E::one();
        let out = self.value(a).map(|x| one / (one + (-x).exp()));
        Ok(self.push_op(
            out,
            vec![a],
            Box::new(move |g, y, _| {
                vec![g.zip_map(y, |gi, yi| gi * yi * (one - yi)).unwrap()]
            }),
        ))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&self, a: NodeId) -> Result<NodeId, TensorError> {
        let c0 = E::from_f64(0.7978845608028654); // sqrt(2/pi)
        let c1 = E::from_f64(0.044715);
        let half = E::from_f64(0.5);
        let one = E::one();
        let three = E::from_f64(3.0);
        let out = self
            .value(a)
            .map(|x| half * x * (one + (c0 * (x + c1 * x * x * x)).tanh()));
        Ok(self.push_op(
            out,
            vec![a],
            Box::new(move |g, _, p| {
                vec![g
                    .zip_map(&p[0], |gi, x| {
                        let t = (c0 * (x + c1 * x * x * x)).tanh();
                        let dt = (one - t * t) * c0 * (one + three * c1 * x * x);
                        gi * (half * (one + t) + half * x * dt)
                    })
                    .unwrap()]
            }),
        ))
    }

    /// ln(max(x, floor)); the gradient is zero on the clamped region.
    pub fn ln_clamped(&self, a: NodeId, floor: f64) -> Result<NodeId, TensorError> {
        let fl = E::from_f64(floor);
        let out = self.value(a).map(|x| if x > fl { x.ln() } else { fl.ln() });
        Ok(self.push_op(
            out,
            vec![a],
            Box::new(move |g, _, p| {
                vec![g
                    .zip_map(&p[0], |gi, x| if x > fl { gi / x } else { E::zero() })
                    .unwrap()]
            }),
        ))
    }

    // ---- broadcast binary ----

    /// x + w with `w` broadcast along every axis where its extent is 1.
    pub fn add_bcast(&self, x: NodeId, w: NodeId) -> Result<NodeId, TensorError> {
        let (vx, vw) = (self.value(x), self.value(w));
        bcast_check(vx.shape(), vw.shape())?;
        let mut out = vec![E::zero(); vx.len()];
        bcast_walk(vx.shape(), vw.shape(), |xo, wo| {
            out[xo] = vx.data()[xo] + vw.data()[wo];
        });
        let out = Tensor::from_vec(vx.shape(), out);
        Ok(self.push_op(
            out,
            vec![x, w],
            Box::new(|g, _, p| {
                let mut gw = vec![E::zero(); p[1].len()];
                bcast_walk(p[0].shape(), p[1].shape(), |xo, wo| {
                    gw[wo] = gw[wo] + g.data()[xo];
                });
                vec![g.clone(), Tensor::from_vec(p[1].shape(), gw)]
            }),
        ))
    }

    /// x * w with `w` broadcast along every axis where its extent is 1.
    pub fn mul_bcast(&self, x: NodeId, w: NodeId) -> Result<NodeId, TensorError> {
        let (vx, vw) = (self.value(x), self.value(w));
        bcast_check(vx.shape(), vw.shape())?;
        let mut out = vec![E::zero(); vx.len()];
        bcast_walk(vx.shape(), vw.shape(), |xo, wo| {
            out[xo] = vx.data()[xo] * vw.data()[wo];
        });
        let out = Tensor::from_vec(vx.shape(), out);
        Ok(self.push_op(
            out,
            vec![x, w],
            Box::new(|g, _, p| {
                let mut gx = vec![E::zero(); p[0].len()];
                let mut gw = vec![E::zero(); p[1].len()];
                bcast_walk(p[0].shape(), p[1].shape(), |xo, wo| {
                    gx[xo] = g.data()[xo] * p[1].data()[wo];
                    gw[wo] = gw[wo] + g.data()[xo] * p[0].data()[xo];
                });
                vec![
                    Tensor::from_vec(p[0].shape(), gx),
                    Tensor::from_vec(p[1].shape(), gw),
                ]
            }),
        ))
    }

    // ---- linear algebra ----

    /// 2-D matrix product with optional transposes on stored operands.
    pub fn matmul(&self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul wants 2-D operands, got {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (m, ka) = if ta {
            (va.shape()[1], va.shape()[0])
        } else {
            (va.shape()[0], va.shape()[1])
        };
        let (kb, n) = if tb {
            (vb.shape()[1], vb.shape()[0])
        } else {
            (vb.shape()[0], vb.shape()[1])
        };
        if ka != kb {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul inner dims {} vs {}",
                ka, kb
            )));
        }
        let k = ka;
        let mut out = vec![E::zero(); m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n, ta, tb, E::zero());
        let out = Tensor::from_vec(&[m, n], out);
        Ok(self.push_op(
            out,
            vec![a, b],
            Box::new(move |g, _, p| {
                let mut ga = vec![E::zero(); p[0].len()];
                let mut gb = vec![E::zero(); p[1].len()];
                if !ta {
                    // grad_a = g . op(b)^T : [m,k]
                    matmul_into(g.data(), p[1].data(), &mut ga, m, n, k, false, !tb, E::zero());
                } else {
                    // a stored [k,m]; grad_a = op(b) . g^T : [k,m]
                    matmul_into(p[1].data(), g.data(), &mut ga, k, n, m, tb, true, E::zero());
                }
                if !tb {
                    // grad_b = op(a)^T . g : [k,n]
                    matmul_into(p[0].data(), g.data(), &mut gb, k, m, n, !ta, false, E::zero());
                } else {
                    // b stored [n,k]; grad_b = g^T . op(a) : [n,k]
                    matmul_into(g.data(), p[0].data(), &mut gb, n, m, k, true, ta, E::zero());
                }
                vec![
                    Tensor::from_vec(p[0].shape(), ga),
                    Tensor::from_vec(p[1].shape(), gb),
                ]
            }),
        ))
    }

    /// Batched matrix product: a [B,m,k] x b [B,k,n] -> [B,m,n], with
    /// optional per-batch transposes.
    pub fn bmm(&self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 3 || vb.shape().len() != 3 || va.shape()[0] != vb.shape()[0] {
            return Err(TensorError::ShapeMismatch(format!(
                "bmm wants [B,m,k] x [B,k,n], got {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let bsz = va.shape()[0];
        let (m, ka) = if ta {
            (va.shape()[2], va.shape()[1])
        } else {
            (va.shape()[1], va.shape()[2])
        };
        let (kb, n) = if tb {
            (vb.shape()[2], vb.shape()[1])
        } else {
            (vb.shape()[1], vb.shape()[2])
        };
        if ka != kb {
            return Err(TensorError::ShapeMismatch(format!(
                "bmm inner dims {} vs {}",
                ka, kb
            )));
        }
        let k = ka;
        let (sa, sb, so) = (m * k, k * n, m * n);
        let mut out = vec![E::zero(); bsz * so];
        for i in 0..bsz {
            matmul_into(
                &va.data()[i * sa..(i + 1) * sa],
                &vb.data()[i * sb..(i + 1) * sb],
                &mut out[i * so..(i + 1) * so],
                m,
                k,
                n,
                ta,
                tb,
                E::zero(),
            );
        }
        let out = Tensor::from_vec(&[bsz, m, n], out);
        Ok(self.push_op(
            out,
            vec![a, b],
            Box::new(move |g, _, p| {
                let mut ga = vec![E::zero(); p[0].len()];
                let mut gb = vec![E::zero(); p[1].len()];
                for i in 0..bsz {
                    let gi = &g.data()[i * so..(i + 1) * so];
                    let ai = &p[0].data()[i * sa..(i + 1) * sa];
                    let bi = &p[1].data()[i * sb..(i + 1) * sb];
                    let gao = &mut ga[i * sa..(i + 1) * sa];
                    let gbo = &mut gb[i * sb..(i + 1) * sb];
                    if !ta {
                        matmul_into(gi, bi, gao, m, n, k, false, !tb, E::zero());
                    } else {
                        matmul_into(bi, gi, gao, k, n, m, tb, true, E::zero());
                    }
                    if !tb {
                        matmul_into(ai, gi, gbo, k, m, n, !ta, false, E::zero());
                    } else {
                        matmul_into(gi, ai, gbo, n, m, k, true, ta, E::zero());
                    }
                }
                vec![
                    Tensor::from_vec(p[0].shape(), ga),
                    Tensor::from_vec(p[1].shape(), gb),
                ]
            }),
        ))
    }

    // ---- convolutions ----

    /// 3-D convolution: input [N,Cin,D,H,W], kernel [Cout,Cin,kd,kh,kw],
    /// zero padding, direct-summation semantics.
    pub fn conv3d(
        &self,
        input: NodeId,
        weight: NodeId,
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> Result<NodeId, TensorError> {
        let (vi, vw) = (self.value(input), self.value(weight));
        let is = vi.shape().to_vec();
        let ws = vw.shape().to_vec();
        if is.len() != 5 || ws.len() != 5 {
            return Err(TensorError::ShapeMismatch(format!(
                "conv3d wants 5-D input/kernel, got {:?} and {:?}",
                is, ws
            )));
        }
        if is[1] != ws[1] {
            return Err(TensorError::ShapeMismatch(format!(
                "conv3d channels: input Cin={} vs kernel Cin={}",
                is[1], ws[1]
            )));
        }
        let geom = ConvGeom {
            n: is[0],
            cin: is[1],
            d: is[2],
            h: is[3],
            w: is[4],
            cout: ws[0],
            kd: ws[2],
            kh: ws[3],
            kw: ws[4],
            sd: stride.0,
            sh: stride.1,
            sw: stride.2,
            pd: pad.0,
            ph: pad.1,
            pw: pad.2,
            dout: 0,
            hout: 0,
            wout: 0,
        };
        if geom.sd == 0 || geom.sh == 0 || geom.sw == 0 {
            return Err(TensorError::InvalidArgument("conv3d stride must be >= 1".into()));
        }
        if geom.kd > geom.d + 2 * geom.pd
            || geom.kh > geom.h + 2 * geom.ph
            || geom.kw > geom.w + 2 * geom.pw
        {
            return Err(TensorError::ShapeMismatch(format!(
                "conv3d kernel ({},{},{}) exceeds padded input ({},{},{})",
                geom.kd,
                geom.kh,
                geom.kw,
                geom.d + 2 * geom.pd,
                geom.h + 2 * geom.ph,
                geom.w + 2 * geom.pw
            )));
        }
        let geom = ConvGeom {
            dout: conv_out_dim(geom.d, geom.kd, geom.sd, geom.pd),
            hout: conv_out_dim(geom.h, geom.kh, geom.sh, geom.ph),
            wout: conv_out_dim(geom.w, geom.kw, geom.sw, geom.pw),
            ..geom
        };
        let out = conv3d_forward(&vi, &vw, geom);
        Ok(self.push_op(
            out,
            vec![input, weight],
            Box::new(move |g, _, p| conv3d_backward(g, &p[0], &p[1], geom)),
        ))
    }

    /// 2-D convolution: input [N,Cin,H,W], kernel [Cout,Cin,kh,kw]. Lifted
    /// onto the 3-D kernel with a unit depth axis.
    pub fn conv2d(
        &self,
        input: NodeId,
        weight: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<NodeId, TensorError> {
        let (vi, vw) = (self.value(input), self.value(weight));
        let is = vi.shape().to_vec();
        let ws = vw.shape().to_vec();
        if is.len() != 4 || ws.len() != 4 {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d wants 4-D input/kernel, got {:?} and {:?}",
                is, ws
            )));
        }
        let i5 = self.reshape(input, &[is[0], is[1], 1, is[2], is[3]])?;
        let w5 = self.reshape(weight, &[ws[0], ws[1], 1, ws[2], ws[3]])?;
        let out = self.conv3d(i5, w5, (1, stride.0, stride.1), (0, pad.0, pad.1))?;
        let os = self.shape(out);
        self.reshape(out, &[os[0], os[1], os[3], os[4]])
    }

    // ---- normalization / activations over rows ----

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let vx = self.value(x);
        let vg = self.value(gamma);
        let vb = self.value(beta);
        let d = *vx.shape().last().ok_or_else(|| {
            TensorError::ShapeMismatch("layer_norm on rank-0 tensor".into())
        })?;
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(TensorError::ShapeMismatch(format!(
                "layer_norm affine params want [{}], got {:?} and {:?}",
                d,
                vg.shape(),
                vb.shape()
            )));
        }
        let rows = vx.len() / d;
        let epse = E::from_f64(eps);
        let inv_d = E::one() / E::from_f64(d as f64);
        let mut xhat = vec![E::zero(); vx.len()];
        let mut istd = vec![E::zero(); rows];
        let mut out = vec![E::zero(); vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mut mean = E::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_d;
            let mut var = E::zero();
            for &v in row {
                let c = v - mean;
                var = var + c * c;
            }
            var = var * inv_d;
            let is = (var + epse).sqrt().recip();
            istd[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = vg.data()[j] * xh + vb.data()[j];
            }
        }
        let xhat = Tensor::from_vec(vx.shape(), xhat);
        let out = Tensor::from_vec(vx.shape(), out);
        Ok(self.push_op(
            out,
            vec![x, gamma, beta],
            Box::new(move |g, _, p| {
                let gamma = &p[1];
                let mut gx = vec![E::zero(); p[0].len()];
                let mut gg = vec![E::zero(); d];
                let mut gb = vec![E::zero(); d];
                for r in 0..rows {
                    let go = &g.data()[r * d..(r + 1) * d];
                    let xh = &xhat.data()[r * d..(r + 1) * d];
                    let mut m1 = E::zero();
                    let mut m2 = E::zero();
                    for j in 0..d {
                        let gxh = go[j] * gamma.data()[j];
                        m1 = m1 + gxh;
                        m2 = m2 + gxh * xh[j];
                        gg[j] = gg[j] + go[j] * xh[j];
                        gb[j] = gb[j] + go[j];
                    }
                    m1 = m1 * inv_d;
                    m2 = m2 * inv_d;
                    for j in 0..d {
                        let gxh = go[j] * gamma.data()[j];
                        gx[r * d + j] = istd[r] * (gxh - m1 - xh[j] * m2);
                    }
                }
                vec![
                    Tensor::from_vec(p[0].shape(), gx),
                    Tensor::from_vec(&[d], gg),
                    Tensor::from_vec(&[d], gb),
                ]
            }),
        ))
    }

    /// Row-wise softmax over the last axis (max-shifted for stability).
    pub fn softmax_last(&self, x: NodeId) -> Result<NodeId, TensorError> {
        let vx = self.value(x);
        let d = *vx.shape().last().ok_or_else(|| {
            TensorError::ShapeMismatch("softmax on rank-0 tensor".into())
        })?;
        let rows = vx.len() / d;
        let mut out = vec![E::zero(); vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mut mx = row[0];
            for &v in row.iter().skip(1) {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = E::zero();
            for j in 0..d {
                let e = (row[j] - mx).exp();
                out[r * d + j] = e;
                sum = sum + e;
            }
            let inv = sum.recip();
            for j in 0..d {
                out[r * d + j] = out[r * d + j] * inv;
            }
        }
        let out = Tensor::from_vec(vx.shape(), out);
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(move |g, y, _| {
                let mut gx = vec![E::zero(); y.len()];
                for r in 0..rows {
                    let yo = &y.data()[r * d..(r + 1) * d];
                    let go = &g.data()[r * d..(r + 1) * d];
                    let mut dot = E::zero();
                    for j in 0..d {
                        dot = dot + yo[j] * go[j];
                    }
                    for j in 0..d {
                        gx[r * d + j] = yo[j] * (go[j] - dot);
                    }
                }
                vec![Tensor::from_vec(y.shape(), gx)]
            }),
        ))
    }

    // ---- reductions ----

    pub fn sum_all(&self, x: NodeId) -> Result<NodeId, TensorError> {
        let vx = self.value(x);
        let mut acc = E::zero();
        for &v in vx.data() {
            acc = acc + v;
        }
        Ok(self.push_op(
            Tensor::scalar(acc),
            vec![x],
            Box::new(|g, _, p| {
                let gv = g.data()[0];
                vec![Tensor::full(p[0].shape(), gv)]
            }),
        ))
    }

    pub fn mean_all(&self, x: NodeId) -> Result<NodeId, TensorError> {
        let n = self.value(x).len();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean along one axis, removing it from the shape.
    pub fn mean_axis(&self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument(format!(
                "mean_axis {} on rank-{} tensor",
                axis,
                shape.len()
            )));
        }
        let (outer, mid, inner) = axis_split(&shape, axis);
        let inv = E::one() / E::from_f64(mid as f64);
        let mut out = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + vx.data()[base + i];
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::from_vec(&out_shape, out);
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(move |g, _, p| {
                let mut gx = vec![E::zero(); p[0].len()];
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        for i in 0..inner {
                            gx[base + i] = g.data()[o * inner + i] * inv;
                        }
                    }
                }
                vec![Tensor::from_vec(p[0].shape(), gx)]
            }),
        ))
    }

    /// Adaptive mean pooling along axis 1 of [B,T,D] down to `target`
    /// rows; segment i covers [floor(i*T/L), floor((i+1)*T/L)). Identity
    /// when T == target.
    pub fn adaptive_pool_seq(&self, x: NodeId, target: usize) -> Result<NodeId, TensorError> {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        if shape.len() != 3 {
            return Err(TensorError::ShapeMismatch(format!(
                "adaptive_pool_seq wants [B,T,D], got {:?}",
                shape
            )));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        if target == 0 || target > t {
            return Err(TensorError::InvalidArgument(format!(
                "adaptive_pool_seq target {target} for length {t}"
            )));
        }
        let bounds: Vec<(usize, usize)> = (0..target)
            .map(|i| (i * t / target, (i + 1) * t / target))
            .collect();
        let mut out = vec![E::zero(); b * target * d];
        for bi in 0..b {
            for (i, &(s, e)) in bounds.iter().enumerate() {
                let inv = E::one() / E::from_f64((e - s) as f64);
                for j in 0..d {
                    let mut acc = E::zero();
                    for r in s..e {
                        acc = acc + vx.data()[(bi * t + r) * d + j];
                    }
                    out[(bi * target + i) * d + j] = acc * inv;
                }
            }
        }
        let out = Tensor::from_vec(&[b, target, d], out);
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(move |g, _, p| {
                let mut gx = vec![E::zero(); p[0].len()];
                for bi in 0..b {
                    for (i, &(s, e)) in bounds.iter().enumerate() {
                        let inv = E::one() / E::from_f64((e - s) as f64);
                        for j in 0..d {
                            let gv = g.data()[(bi * target + i) * d + j] * inv;
                            for r in s..e {
                                gx[(bi * t + r) * d + j] = gx[(bi * t + r) * d + j] + gv;
                            }
                        }
                    }
                }
                vec![Tensor::from_vec(p[0].shape(), gx)]
            }),
        ))
    }

    /// Mean over the last two axes, keeping them as size-1 dims.
    pub fn global_avg_pool_hw(&self, x: NodeId) -> Result<NodeId, TensorError> {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        if shape.len() < 2 {
            return Err(TensorError::ShapeMismatch(
                "global_avg_pool_hw wants rank >= 2".into(),
            ));
        }
        let hw = shape[shape.len() - 2] * shape[shape.len() - 1];
        let outer = vx.len() / hw;
        let inv = E::one() / E::from_f64(hw as f64);
        let mut out = vec![E::zero(); outer];
        for o in 0..outer {
            let mut acc = E::zero();
            for &v in &vx.data()[o * hw..(o + 1) * hw] {
                acc = acc + v;
            }
            out[o] = acc * inv;
        }
        let mut out_shape = shape.clone();
        let nd = out_shape.len();
        out_shape[nd - 2] = 1;
        out_shape[nd - 1] = 1;
        let out = Tensor::from_vec(&out_shape, out);
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(move |g, _, p| {
                let mut gx = vec![E::zero(); p[0].len()];
                for o in 0..outer {
                    let gv = g.data()[o] * inv;
                    for slot in &mut gx[o * hw..(o + 1) * hw] {
                        *slot = gv;
                    }
                }
                vec![Tensor::from_vec(p[0].shape(), gx)]
            }),
        ))
    }

    // ---- shape ops ----

    pub fn reshape(&self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let out = self.value(x).reshape(shape)?;
        let in_shape = self.shape(x);
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(move |g, _, _| vec![g.reshape(&in_shape).unwrap()]),
        ))
    }

    pub fn permute(&self, x: NodeId, perm: &[usize]) -> Result<NodeId, TensorError> {
        let out = self.value(x).permute(perm)?;
        let mut inverse = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(move |g, _, _| vec![g.permute(&inverse).unwrap()]),
        ))
    }

    /// Concatenate along `axis`; shapes must agree elsewhere.
    pub fn concat(&self, xs: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::InvalidArgument("concat of zero tensors".into()));
        }
        let values: Vec<Tensor<E>> = xs.iter().map(|&x| self.value(x)).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument(format!(
                "concat axis {} on rank-{}",
                axis,
                base.len()
            )));
        }
        let mut mids = Vec::with_capacity(values.len());
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat shapes {:?} vs {:?}",
                    s, base
                )));
            }
            mids.push(s[axis]);
        }
        let total_mid: usize = mids.iter().sum();
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total_mid;
        let mut out = vec![E::zero(); outer * total_mid * inner];
        for o in 0..outer {
            let mut off = 0usize;
            for (v, &mid) in values.iter().zip(&mids) {
                let src = &v.data()[o * mid * inner..(o + 1) * mid * inner];
                out[(o * total_mid + off) * inner..(o * total_mid + off + mid) * inner]
                    .copy_from_slice(src);
                off += mid;
            }
        }
        let out = Tensor::from_vec(&out_shape, out);
        Ok(self.push_op(
            out,
            xs.to_vec(),
            Box::new(move |g, _, p| {
                let mut grads = Vec::with_capacity(p.len());
                for (i, v) in p.iter().enumerate() {
                    let mid = mids[i];
                    let off: usize = mids[..i].iter().sum();
                    let mut gv = vec![E::zero(); v.len()];
                    for o in 0..outer {
                        let src = &g.data()
                            [(o * total_mid + off) * inner..(o * total_mid + off + mid) * inner];
                        gv[o * mid * inner..(o + 1) * mid * inner].copy_from_slice(src);
                    }
                    grads.push(Tensor::from_vec(v.shape(), gv));
                }
                grads
            }),
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(
        &self,
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::InvalidArgument(format!(
                "narrow axis {} [{},{}) of {:?}",
                axis,
                start,
                start + len,
                shape
            )));
        }
        let (outer, mid, inner) = axis_split(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = vec![E::zero(); outer * len * inner];
        for o in 0..outer {
            let src = &vx.data()[(o * mid + start) * inner..(o * mid + start + len) * inner];
            out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let out = Tensor::from_vec(&out_shape, out);
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(move |g, _, p| {
                let mut gx = vec![E::zero(); p[0].len()];
                for o in 0..outer {
                    let dst =
                        &mut gx[(o * mid + start) * inner..(o * mid + start + len) * inner];
                    dst.copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Tensor::from_vec(p[0].shape(), gx)]
            }),
        ))
    }

    /// Select rows of x [B,T,D] by per-batch index lists -> [B,K,D].
    /// All lists must have equal length; backward scatter-adds.
    pub fn gather_rows(&self, x: NodeId, idx: &[Vec<usize>]) -> Result<NodeId, TensorError> {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        if shape.len() != 3 {
            return Err(TensorError::ShapeMismatch(format!(
                "gather_rows wants [B,T,D], got {:?}",
                shape
            )));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        if idx.len() != b {
            return Err(TensorError::InvalidArgument(format!(
                "gather_rows: {} index lists for batch {}",
                idx.len(),
                b
            )));
        }
        let k = idx.first().map(|v| v.len()).unwrap_or(0);
        for list in idx {
            if list.len() != k {
                return Err(TensorError::InvalidArgument(
                    "gather_rows: ragged index lists".into(),
                ));
            }
            if list.iter().any(|&i| i >= t) {
                return Err(TensorError::InvalidArgument(
                    "gather_rows: index out of range".into(),
                ));
            }
        }
        let idx_owned: Vec<Vec<usize>> = idx.to_vec();
        let mut out = vec![E::zero(); b * k * d];
        for (bi, list) in idx_owned.iter().enumerate() {
            for (ki, &ti) in list.iter().enumerate() {
                out[(bi * k + ki) * d..(bi * k + ki + 1) * d]
                    .copy_from_slice(&vx.data()[(bi * t + ti) * d..(bi * t + ti + 1) * d]);
            }
        }
        let out = Tensor::from_vec(&[b, k, d], out);
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(move |g, _, p| {
                let mut gx = vec![E::zero(); p[0].len()];
                for (bi, list) in idx_owned.iter().enumerate() {
                    for (ki, &ti) in list.iter().enumerate() {
                        let src = &g.data()[(bi * k + ki) * d..(bi * k + ki + 1) * d];
                        let dst = &mut gx[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                        for (a, s) in dst.iter_mut().zip(src) {
                            *a = *a + *s;
                        }
                    }
                }
                vec![Tensor::from_vec(p[0].shape(), gx)]
            }),
        ))
    }

    /// Tile a vector [D] into [rows, D]; backward sums over rows.
    pub fn repeat_rows(&self, v: NodeId, rows: usize) -> Result<NodeId, TensorError> {
        let vv = self.value(v);
        if vv.shape().len() != 1 {
            return Err(TensorError::ShapeMismatch(format!(
                "repeat_rows wants a vector, got {:?}",
                vv.shape()
            )));
        }
        let d = vv.shape()[0];
        let mut out = vec![E::zero(); rows * d];
        for r in 0..rows {
            out[r * d..(r + 1) * d].copy_from_slice(vv.data());
        }
        let out = Tensor::from_vec(&[rows, d], out);
        Ok(self.push_op(
            out,
            vec![v],
            Box::new(move |g, _, _| {
                let mut gv = vec![E::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        gv[j] = gv[j] + g.data()[r * d + j];
                    }
                }
                vec![Tensor::from_vec(&[d], gv)]
            }),
        ))
    }

    /// Pack (a, b) into an interleaved last axis of extent 2.
    pub fn interleave2(&self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(&va, &vb, "interleave2")?;
        let mut shape = va.shape().to_vec();
        shape.push(2);
        let mut out = vec![E::zero(); va.len() * 2];
        for i in 0..va.len() {
            out[2 * i] = va.data()[i];
            out[2 * i + 1] = vb.data()[i];
        }
        let out = Tensor::from_vec(&shape, out);
        Ok(self.push_op(
            out,
            vec![a, b],
            Box::new(|g, _, p| {
                let n = p[0].len();
                let mut ga = vec![E::zero(); n];
                let mut gb = vec![E::zero(); n];
                for i in 0..n {
                    ga[i] = g.data()[2 * i];
                    gb[i] = g.data()[2 * i + 1];
                }
                vec![
                    Tensor::from_vec(p[0].shape(), ga),
                    Tensor::from_vec(p[1].shape(), gb),
                ]
            }),
        ))
    }
}

fn conv3d_forward<E: Scalar>(input: &Tensor<E>, weight: &Tensor<E>, g: ConvGeom) -> Tensor<E> {
    let rows = g.rows();
    let cols = g.cols();
    let in_sz = g.cin * g.d * g.h * g.w;
    let out_sz = g.cout * rows;
    let mut cols_buf = vec![E::zero(); rows * cols];
    let mut out = vec![E::zero(); g.n * out_sz];
    for n in 0..g.n {
        im2col3d(
            &input.data()[n * in_sz..(n + 1) * in_sz],
            g.cin,
            g.d,
            g.h,
            g.w,
            g.kd,
            g.kh,
            g.kw,
            g.sd,
            g.sh,
            g.sw,
            g.pd,
            g.ph,
            g.pw,
            &mut cols_buf,
        );
        // out_n [Cout, rows] = W [Cout, cols] . cols^T
        matmul_into(
            weight.data(),
            &cols_buf,
            &mut out[n * out_sz..(n + 1) * out_sz],
            g.cout,
            cols,
            rows,
            false,
            true,
            E::zero(),
        );
    }
    Tensor::from_vec(&[g.n, g.cout, g.dout, g.hout, g.wout], out)
}

fn conv3d_backward<E: Scalar>(
    grad: &Tensor<E>,
    input: &Tensor<E>,
    weight: &Tensor<E>,
    g: ConvGeom,
) -> Vec<Tensor<E>> {
    let rows = g.rows();
    let cols = g.cols();
    let in_sz = g.cin * g.d * g.h * g.w;
    let out_sz = g.cout * rows;
    let mut cols_buf = vec![E::zero(); rows * cols];
    let mut gcols = vec![E::zero(); rows * cols];
    let mut gw = vec![E::zero(); weight.len()];
    let mut gi = vec![E::zero(); input.len()];
    for n in 0..g.n {
        let gn = &grad.data()[n * out_sz..(n + 1) * out_sz];
        im2col3d(
            &input.data()[n * in_sz..(n + 1) * in_sz],
            g.cin,
            g.d,
            g.h,
            g.w,
            g.kd,
            g.kh,
            g.kw,
            g.sd,
            g.sh,
            g.sw,
            g.pd,
            g.ph,
            g.pw,
            &mut cols_buf,
        );
        // grad_w += g_n [Cout, rows] . cols [rows, cols]
        matmul_into(gn, &cols_buf, &mut gw, g.cout, rows, cols, false, false, E::one());
        // grad_cols [rows, cols] = g_n^T . W
        matmul_into(gn, weight.data(), &mut gcols, rows, g.cout, cols, true, false, E::zero());
        col2im3d(
            &gcols,
            g.cin,
            g.d,
            g.h,
            g.w,
            g.kd,
            g.kh,
            g.kw,
            g.sd,
            g.sh,
            g.sw,
            g.pd,
            g.ph,
            g.pw,
            &mut gi[n * in_sz..(n + 1) * in_sz],
        );
    }
    vec![
        Tensor::from_vec(input.shape(), gi),
        Tensor::from_vec(weight.shape(), gw),
    ]
}
