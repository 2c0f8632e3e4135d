//! S5 state-space layer: HiPPO-N initialization, zero-order-hold
//! discretization, the parallel-scan recurrence, and the residual block
//! used by every sequence-processing module in the model.
//!
//! A single time-invariant MIMO state space drives every sequence here:
//! linear time-invariant dynamics suit continuous image-derived signals,
//! and the multi-input/multi-output form models inter-channel structure
//! directly while staying cheap through the associative scan.
//! Time-varying (selective) variants and convolution-kernel evaluation
//! are deliberately out of scope.

pub mod scan;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, NodeId, Param};
use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

/// Guard below which the ZOH input-matrix formula switches to its Taylor
/// limit (the singularity at lambda = 0 is removable).
pub const ZOH_LIMIT_GUARD: f64 = 1e-12;

// ---------------------------------------------------------------------------
// HiPPO-N initialization
// ---------------------------------------------------------------------------

/// Eigendecomposition of the normal HiPPO matrix A = -I/2 + S with
/// S_nk = sqrt(n+1/2) sqrt(k+1/2) sign(k-n) for n != k (0-indexed).
///
/// Returns the eigenvalues (all with real part exactly -1/2) sorted by
/// ascending imaginary part, and the matching unitary eigenvector matrix
/// (row-major P x P, columns are eigenvectors).
pub fn hippo_n_init(p: usize) -> Result<(Vec<Complex64>, Vec<Complex64>), TensorError> {
    if p == 0 {
        return Err(TensorError::InvalidArgument(
            "hippo_n_init: state size must be >= 1".into(),
        ));
    }
    // H = -i S is Hermitian; S = i H shares eigenvectors and its
    // eigenvalues are i * mu, so lambda = -1/2 + i * mu.
    let mut h = vec![Complex64::new(0.0, 0.0); p * p];
    for n in 0..p {
        for k in 0..p {
            if n == k {
                continue;
            }
            let s = ((n as f64 + 0.5).sqrt()) * ((k as f64 + 0.5).sqrt())
                * if k > n { 1.0 } else { -1.0 };
            h[n * p + k] = Complex64::new(0.0, -s);
        }
    }
    let (mu, v) = hermitian_eigen(&mut h, p);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| mu[a].partial_cmp(&mu[b]).unwrap().then(a.cmp(&b)));
    let lambda: Vec<Complex64> = order
        .iter()
        .map(|&j| Complex64::new(-0.5, mu[j]))
        .collect();
    let mut v_sorted = vec![Complex64::new(0.0, 0.0); p * p];
    for (col_new, &col_old) in order.iter().enumerate() {
        for row in 0..p {
            v_sorted[row * p + col_new] = v[row * p + col_old];
        }
    }
    Ok((lambda, v_sorted))
}

/// Cyclic Jacobi eigensolver for a Hermitian matrix (row-major, mutated in
/// place). Returns real eigenvalues and the unitary eigenvector matrix.
fn hermitian_eigen(h: &mut [Complex64], p: usize) -> (Vec<f64>, Vec<Complex64>) {
    let mut v = vec![Complex64::new(0.0, 0.0); p * p];
    for i in 0..p {
        v[i * p + i] = Complex64::new(1.0, 0.0);
    }
    let norm: f64 = h.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let tol = (norm * 1e-15).max(1e-300);
    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for pi in 0..p {
            for qi in (pi + 1)..p {
                off += h[pi * p + qi].norm_sqr();
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for pi in 0..p {
            for qi in (pi + 1)..p {
                let b = h[pi * p + qi];
                let r = b.norm();
                if r <= tol * 1e-2 {
                    continue;
                }
                let u = b / r; // phase of the pivot
                let app = h[pi * p + pi].re;
                let aqq = h[qi * p + qi].re;
                let tau = (aqq - app) / (2.0 * r);
                // smaller root of t^2 + 2 tau t - 1 = 0
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = u * (t * c);
                // Column update: (col_p, col_q) <- (c col_p - s̄ col_q, s col_p + c col_q)
                for row in 0..p {
                    let hp = h[row * p + pi];
                    let hq = h[row * p + qi];
                    h[row * p + pi] = hp * c - hq * s.conj();
                    h[row * p + qi] = hp * s + hq * c;
                    let vp = v[row * p + pi];
                    let vq = v[row * p + qi];
                    v[row * p + pi] = vp * c - vq * s.conj();
                    v[row * p + qi] = vp * s + vq * c;
                }
                // Row update: (row_p, row_q) <- (c row_p - s row_q, s̄ row_p + c row_q)
                for col in 0..p {
                    let hp = h[pi * p + col];
                    let hq = h[qi * p + col];
                    h[pi * p + col] = hp * c - hq * s;
                    h[qi * p + col] = hp * s.conj() + hq * c;
                }
                // Clean the pivot to keep Hermitian structure exact.
                h[pi * p + qi] = Complex64::new(0.0, 0.0);
                h[qi * p + pi] = Complex64::new(0.0, 0.0);
                h[pi * p + pi] = Complex64::new(h[pi * p + pi].re, 0.0);
                h[qi * p + qi] = Complex64::new(h[qi * p + qi].re, 0.0);
            }
        }
    }
    let eig: Vec<f64> = (0..p).map(|i| h[i * p + i].re).collect();
    (eig, v)
}

// ---------------------------------------------------------------------------
// Value-level parameters (fp64 reference path)
// ---------------------------------------------------------------------------

/// The learned S5 parameter bundle at the value level: diagonal state
/// matrix eigenvalues, input/output maps, diagonal feedthrough, and
/// per-state timescales.
#[derive(Debug, Clone)]
pub struct SsmParams {
    pub lambda: Vec<Complex64>,  // P
    pub b_tilde: Vec<Complex64>, // P x Din, row-major
    pub c_tilde: Vec<Complex64>, // Dout x P, row-major
    pub d_diag: Vec<f64>,        // Dout
    pub delta: Vec<f64>,         // P
    pub din: usize,
    pub dout: usize,
}

impl SsmParams {
    pub fn validate(&self) -> Result<(), TensorError> {
        let p = self.lambda.len();
        if self.delta.len() != p || self.b_tilde.len() != p * self.din {
            return Err(TensorError::ShapeMismatch(
                "SsmParams: lambda/delta/b_tilde sizes disagree".into(),
            ));
        }
        if self.c_tilde.len() != self.dout * p || self.d_diag.len() != self.dout {
            return Err(TensorError::ShapeMismatch(
                "SsmParams: c_tilde/d_diag sizes disagree".into(),
            ));
        }
        if self.lambda.iter().any(|l| l.re >= 0.0) {
            return Err(TensorError::InvalidArgument(
                "SsmParams: stability wants Re(lambda) < 0".into(),
            ));
        }
        if self.delta.iter().any(|&d| d <= 0.0) {
            return Err(TensorError::InvalidArgument(
                "SsmParams: delta must be positive".into(),
            ));
        }
        // The diagonal feedthrough y += d ⊙ u is only typed for Din == Dout.
        if self.din != self.dout && self.d_diag.iter().any(|&d| d != 0.0) {
            return Err(TensorError::InvalidArgument(
                "SsmParams: non-zero feedthrough wants Din == Dout".into(),
            ));
        }
        Ok(())
    }
}

/// ZOH-discretized system.
#[derive(Debug, Clone)]
pub struct DiscreteSsm {
    pub lambda_bar: Vec<Complex64>, // P
    pub b_bar: Vec<Complex64>,      // P x Din
}

/// Zero-order-hold discretization:
/// lambda_bar = exp(delta * lambda), b_bar = (lambda_bar - 1)/lambda * b_tilde,
/// with the Taylor limit b_bar = delta * b_tilde near lambda = 0.
pub fn zoh_discretize(p: &SsmParams) -> Result<DiscreteSsm, TensorError> {
    p.validate()?;
    let np = p.lambda.len();
    let mut lambda_bar = Vec::with_capacity(np);
    let mut b_bar = vec![Complex64::new(0.0, 0.0); np * p.din];
    for j in 0..np {
        let l = p.lambda[j];
        let dl = l * p.delta[j];
        if l.norm() < ZOH_LIMIT_GUARD {
            lambda_bar.push(Complex64::new(1.0, 0.0));
            for k in 0..p.din {
                b_bar[j * p.din + k] = p.b_tilde[j * p.din + k] * p.delta[j];
            }
        } else {
            let lb = dl.exp();
            lambda_bar.push(lb);
            let ratio = (lb - 1.0) / l;
            for k in 0..p.din {
                b_bar[j * p.din + k] = p.b_tilde[j * p.din + k] * ratio;
            }
        }
    }
    Ok(DiscreteSsm { lambda_bar, b_bar })
}

/// Apply a discretized system to a real input sequence u [T, Din] with a
/// zero initial state, producing real y [T, Dout]:
/// y_t = Re(c_tilde . x_t) + d ⊙ u_t. Uses the parallel scan.
pub fn apply_discrete(
    disc: &DiscreteSsm,
    c_tilde: &[Complex64],
    d_diag: &[f64],
    u: &Tensor<f64>,
    din: usize,
    dout: usize,
) -> Result<Tensor<f64>, TensorError> {
    if u.shape().len() != 2 || u.shape()[1] != din {
        return Err(TensorError::ShapeMismatch(format!(
            "ssm input wants [T,{}], got {:?}",
            din,
            u.shape()
        )));
    }
    let t = u.shape()[0];
    let p = disc.lambda_bar.len();
    // U_t = b_bar . u_t
    let mut drive = vec![Complex64::new(0.0, 0.0); t * p];
    for ti in 0..t {
        for pi in 0..p {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in 0..din {
                acc += disc.b_bar[pi * din + k] * u.data()[ti * din + k];
            }
            drive[ti * p + pi] = acc;
        }
    }
    let tiled: Vec<Complex64> = (0..t).flat_map(|_| disc.lambda_bar.clone()).collect();
    let states = scan::parallel_scan(&tiled, &drive, t);
    let mut y = vec![0.0f64; t * dout];
    for ti in 0..t {
        for o in 0..dout {
            let mut acc = 0.0;
            for pi in 0..p {
                acc += (c_tilde[o * p + pi] * states[ti * p + pi]).re;
            }
            if din == dout {
                acc += d_diag[o] * u.data()[ti * din + o];
            }
            y[ti * dout + o] = acc;
        }
    }
    Ok(Tensor::from_vec(&[t, dout], y))
}

/// Discretize and apply, the value-level reference for the layer below.
pub fn ssm_apply(p: &SsmParams, u: &Tensor<f64>) -> Result<Tensor<f64>, TensorError> {
    let disc = zoh_discretize(p)?;
    apply_discrete(&disc, &p.c_tilde, &p.d_diag, u, p.din, p.dout)
}

// ---------------------------------------------------------------------------
// Trainable layer and block
// ---------------------------------------------------------------------------

/// Trainable S5 layer with Din == Dout == dim. The real part of lambda is
/// stored in log space so stability (Re < 0) survives training; delta is
/// stored in log space so it stays positive.
#[derive(Debug, Clone)]
pub struct SsmLayer<E: Scalar> {
    pub p_state: usize,
    pub dim: usize,
    pub log_neg_lambda_re: Param<E>,
    pub lambda_im: Param<E>,
    pub b_re: Param<E>,
    pub b_im: Param<E>,
    pub c_re: Param<E>,
    pub c_im: Param<E>,
    pub d: Param<E>,
    pub log_delta: Param<E>,
}

impl<E: Scalar> SsmLayer<E> {
    /// HiPPO-N initialized layer. B and C are drawn as real Gaussians and
    /// rotated into the eigenbasis; delta is log-uniform in [1e-3, 1e-1].
    pub fn init(prefix: &str, p_state: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let (lambda, v) = hippo_n_init(p_state).expect("state size >= 1");
        let b_std = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).unwrap();
        let c_std = Normal::new(0.0, 1.0 / (p_state as f64).sqrt()).unwrap();
        // b_tilde = V^H B
        let b: Vec<f64> = (0..p_state * dim).map(|_| b_std.sample(rng)).collect();
        let mut b_re = vec![0.0f64; p_state * dim];
        let mut b_im = vec![0.0f64; p_state * dim];
        for j in 0..p_state {
            for col in 0..dim {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..p_state {
                    acc += v[k * p_state + j].conj() * b[k * dim + col];
                }
                b_re[j * dim + col] = acc.re;
                b_im[j * dim + col] = acc.im;
            }
        }
        // c_tilde = C V
        let c: Vec<f64> = (0..dim * p_state).map(|_| c_std.sample(rng)).collect();
        let mut c_re = vec![0.0f64; dim * p_state];
        let mut c_im = vec![0.0f64; dim * p_state];
        for row in 0..dim {
            for j in 0..p_state {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..p_state {
                    acc += c[row * p_state + k] * v[k * p_state + j];
                }
                c_re[row * p_state + j] = acc.re;
                c_im[row * p_state + j] = acc.im;
            }
        }
        let d: Vec<f64> = {
            let n = Normal::new(0.0, 1.0).unwrap();
            (0..dim).map(|_| n.sample(rng)).collect()
        };
        let log_delta: Vec<f64> = (0..p_state)
            .map(|_| rng.gen_range((1e-3f64).ln()..(1e-1f64).ln()))
            .collect();
        let name = |s: &str| format!("{prefix}.{s}");
        Self {
            p_state,
            dim,
            log_neg_lambda_re: Param::new(
                name("log_neg_lambda_re"),
                Tensor::from_f64_slice(
                    &[p_state],
                    &lambda.iter().map(|l| (-l.re).ln()).collect::<Vec<_>>(),
                ),
            ),
            lambda_im: Param::new(
                name("lambda_im"),
                Tensor::from_f64_slice(
                    &[p_state],
                    &lambda.iter().map(|l| l.im).collect::<Vec<_>>(),
                ),
            ),
            b_re: Param::new(name("b_re"), Tensor::from_f64_slice(&[p_state, dim], &b_re)),
            b_im: Param::new(name("b_im"), Tensor::from_f64_slice(&[p_state, dim], &b_im)),
            c_re: Param::new(name("c_re"), Tensor::from_f64_slice(&[dim, p_state], &c_re)),
            c_im: Param::new(name("c_im"), Tensor::from_f64_slice(&[dim, p_state], &c_im)),
            d: Param::new(name("d"), Tensor::from_f64_slice(&[dim], &d)),
            log_delta: Param::new(
                name("log_delta"),
                Tensor::from_f64_slice(&[p_state], &log_delta),
            ),
        }
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        vec![
            &self.log_neg_lambda_re,
            &self.lambda_im,
            &self.b_re,
            &self.b_im,
            &self.c_re,
            &self.c_im,
            &self.d,
            &self.log_delta,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        vec![
            &mut self.log_neg_lambda_re,
            &mut self.lambda_im,
            &mut self.b_re,
            &mut self.b_im,
            &mut self.c_re,
            &mut self.c_im,
            &mut self.d,
            &mut self.log_delta,
        ]
    }

    /// Forward over u [B, T, dim] -> [B, T, dim]: ZOH discretization on
    /// the tape, drive projection, parallel scan, output projection plus
    /// diagonal feedthrough.
    pub fn forward(&self, g: &Graph<E>, u: NodeId) -> Result<NodeId, TensorError> {
        let us = g.shape(u);
        if us.len() != 3 || us[2] != self.dim {
            return Err(TensorError::ShapeMismatch(format!(
                "SsmLayer wants [B,T,{}], got {:?}",
                self.dim, us
            )));
        }
        let (bsz, t, dim) = (us[0], us[1], us[2]);
        let p = self.p_state;

        let theta = g.param(&self.log_neg_lambda_re);
        let lam_im = g.param(&self.lambda_im);
        let lam_re = g.neg(g.exp(theta)?)?;
        let delta = g.exp(g.param(&self.log_delta))?;
        let dl_re = g.mul(delta, lam_re)?;
        let dl_im = g.mul(delta, lam_im)?;
        let ebar = g.exp(dl_re)?;
        let lb_re = g.mul(ebar, g.cos(dl_im)?)?;
        let lb_im = g.mul(ebar, g.sin(dl_im)?)?;
        // ratio = (lambda_bar - 1) / lambda; |lambda| > 0 by parameterization.
        let num_re = g.add_scalar(lb_re, -1.0)?;
        let num_im = lb_im;
        let den = g.add(g.mul(lam_re, lam_re)?, g.mul(lam_im, lam_im)?)?;
        let inv = g.recip(den)?;
        let r_re = g.mul(g.add(g.mul(num_re, lam_re)?, g.mul(num_im, lam_im)?)?, inv)?;
        let r_im = g.mul(g.sub(g.mul(num_im, lam_re)?, g.mul(num_re, lam_im)?)?, inv)?;
        let r_re_col = g.reshape(r_re, &[p, 1])?;
        let r_im_col = g.reshape(r_im, &[p, 1])?;
        let b_re = g.param(&self.b_re);
        let b_im = g.param(&self.b_im);
        let bb_re = g.sub(g.mul_bcast(b_re, r_re_col)?, g.mul_bcast(b_im, r_im_col)?)?;
        let bb_im = g.add(g.mul_bcast(b_im, r_re_col)?, g.mul_bcast(b_re, r_im_col)?)?;

        let u2 = g.reshape(u, &[bsz * t, dim])?;
        let drive_re = g.matmul(u2, bb_re, false, true)?;
        let drive_im = g.matmul(u2, bb_im, false, true)?;
        let drive = g.reshape(g.interleave2(drive_re, drive_im)?, &[bsz, t, p, 2])?;
        let coeff = g.interleave2(lb_re, lb_im)?;
        let states = g.linear_scan(coeff, drive)?;
        let x_re = g.reshape(g.narrow(states, 3, 0, 1)?, &[bsz * t, p])?;
        let x_im = g.reshape(g.narrow(states, 3, 1, 1)?, &[bsz * t, p])?;
        let c_re = g.param(&self.c_re);
        let c_im = g.param(&self.c_im);
        let y = g.sub(
            g.matmul(x_re, c_re, false, true)?,
            g.matmul(x_im, c_im, false, true)?,
        )?;
        let d_row = g.reshape(g.param(&self.d), &[1, dim])?;
        let feed = g.mul_bcast(u2, d_row)?;
        let y = g.add(y, feed)?;
        g.reshape(y, &[bsz, t, dim])
    }
}

/// Residual block: z' = SSM(LN(z)) + z; out = MLP(LN(z')) + z'.
#[derive(Debug, Clone)]
pub struct SsmBlock<E: Scalar> {
    pub dim: usize,
    pub hidden: usize,
    pub ln1_gamma: Param<E>,
    pub ln1_beta: Param<E>,
    pub ssm: SsmLayer<E>,
    pub ln2_gamma: Param<E>,
    pub ln2_beta: Param<E>,
    pub w1: Param<E>,
    pub b1: Param<E>,
    pub w2: Param<E>,
    pub b2: Param<E>,
}

impl<E: Scalar> SsmBlock<E> {
    pub fn init(
        prefix: &str,
        p_state: usize,
        dim: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = dim * mlp_ratio;
        let name = |s: &str| format!("{prefix}.{s}");
        let w_std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let init_mat = |rows: usize, cols: usize, rng: &mut dyn rand::RngCore| {
            let std = w_std(rows);
            Tensor::from_f64_slice(
                &[rows, cols],
                &(0..rows * cols)
                    .map(|_| normal.sample(rng) * std)
                    .collect::<Vec<_>>(),
            )
        };
        Self {
            dim,
            hidden,
            ln1_gamma: Param::new(name("ln1_gamma"), Tensor::full(&[dim], E::one())),
            ln1_beta: Param::new(name("ln1_beta"), Tensor::zeros(&[dim])),
            ssm: SsmLayer::init(&name("ssm"), p_state, dim, rng),
            ln2_gamma: Param::new(name("ln2_gamma"), Tensor::full(&[dim], E::one())),
            ln2_beta: Param::new(name("ln2_beta"), Tensor::zeros(&[dim])),
            w1: Param::new(name("mlp_w1"), init_mat(dim, hidden, rng)),
            b1: Param::new(name("mlp_b1"), Tensor::zeros(&[hidden])),
            w2: Param::new(name("mlp_w2"), init_mat(hidden, dim, rng)),
            b2: Param::new(name("mlp_b2"), Tensor::zeros(&[dim])),
        }
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        let mut out = vec![&self.ln1_gamma, &self.ln1_beta];
        out.extend(self.ssm.params());
        out.extend([&self.ln2_gamma, &self.ln2_beta, &self.w1, &self.b1, &self.w2, &self.b2]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut out = vec![&mut self.ln1_gamma, &mut self.ln1_beta];
        out.extend(self.ssm.params_mut());
        out.extend([
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]);
        out
    }

    /// z [B, T, dim] -> [B, T, dim], shape preserved.
    pub fn forward(&self, g: &Graph<E>, z: NodeId) -> Result<NodeId, TensorError> {
        let shape = g.shape(z);
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(TensorError::ShapeMismatch(format!(
                "SsmBlock wants [B,T,{}], got {:?}",
                self.dim, shape
            )));
        }
        let (bsz, t, dim) = (shape[0], shape[1], shape[2]);
        let ln1 = g.layer_norm(z, g.param(&self.ln1_gamma), g.param(&self.ln1_beta), 1e-5)?;
        let z1 = g.add(self.ssm.forward(g, ln1)?, z)?;
        let ln2 = g.layer_norm(z1, g.param(&self.ln2_gamma), g.param(&self.ln2_beta), 1e-5)?;
        let flat = g.reshape(ln2, &[bsz * t, dim])?;
        let h = g.matmul(flat, g.param(&self.w1), false, false)?;
        let h = g.add_bcast(h, g.reshape(g.param(&self.b1), &[1, self.hidden])?)?;
        let h = g.gelu(h)?;
        let out = g.matmul(h, g.param(&self.w2), false, false)?;
        let out = g.add_bcast(out, g.reshape(g.param(&self.b2), &[1, dim])?)?;
        let out = g.reshape(out, &[bsz, t, dim])?;
        g.add(out, z1)
    }

    /// Zero the SSM output path (c, d) and the MLP output layer, turning
    /// the block into an exact identity. Used by tests.
    pub fn zero_output_paths(&mut self) {
        for p in [&mut self.ssm.c_re, &mut self.ssm.c_im, &mut self.ssm.d, &mut self.w2, &mut self.b2]
        {
            let shape = p.value.shape().to_vec();
            p.value = Tensor::zeros(&shape);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hippo_p1_is_minus_half() {
        let (lambda, v) = hippo_n_init(1).unwrap();
        assert!((lambda[0].re + 0.5).abs() < 1e-15);
        assert!(lambda[0].im.abs() < 1e-15);
        assert!((v[0].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hippo_rejects_zero_size() {
        assert!(hippo_n_init(0).is_err());
    }

    #[test]
    fn hippo_real_parts_and_unitarity() {
        for &p in &[2usize, 8, 32] {
            let (lambda, v) = hippo_n_init(p).unwrap();
            for l in &lambda {
                assert!((l.re + 0.5).abs() < 1e-9, "P={p}: Re {}", l.re);
            }
            // ||V V^H - I||_max
            let mut worst = 0.0f64;
            for i in 0..p {
                for j in 0..p {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for k in 0..p {
                        acc += v[i * p + k] * v[j * p + k].conj();
                    }
                    let expect = if i == j { 1.0 } else { 0.0 };
                    worst = worst.max((acc - expect).norm());
                }
            }
            assert!(worst < 1e-8, "P={p}: unitarity {worst}");
        }
    }

    #[test]
    fn hippo_reconstructs_the_matrix() {
        // V diag(lambda) V^H must equal -I/2 + S.
        let p = 6;
        let (lambda, v) = hippo_n_init(p).unwrap();
        for n in 0..p {
            for k in 0..p {
                let mut acc = Complex64::new(0.0, 0.0);
                for j in 0..p {
                    acc += v[n * p + j] * lambda[j] * v[k * p + j].conj();
                }
                let expect = if n == k {
                    Complex64::new(-0.5, 0.0)
                } else {
                    let s = ((n as f64 + 0.5).sqrt()) * ((k as f64 + 0.5).sqrt())
                        * if k > n { 1.0 } else { -1.0 };
                    Complex64::new(s, 0.0)
                };
                assert!((acc - expect).norm() < 1e-9, "A[{n}][{k}]");
            }
        }
    }

    fn params_1d(lambda: Complex64, delta: f64, b: f64) -> SsmParams {
        SsmParams {
            lambda: vec![lambda],
            b_tilde: vec![Complex64::new(b, 0.0)],
            c_tilde: vec![Complex64::new(1.0, 0.0)],
            d_diag: vec![0.0],
            delta: vec![delta],
            din: 1,
            dout: 1,
        }
    }

    #[test]
    fn zoh_hand_examples() {
        // lambda = -1, delta = ln 2, b = 1 -> lambda_bar = 0.5, b_bar = 0.5
        let d = zoh_discretize(&params_1d(Complex64::new(-1.0, 0.0), (2.0f64).ln(), 1.0)).unwrap();
        assert!((d.lambda_bar[0].re - 0.5).abs() < 1e-12);
        assert!(d.lambda_bar[0].im.abs() < 1e-15);
        assert!((d.b_bar[0].re - 0.5).abs() < 1e-12);
        // lambda = -0.5, delta = 2 -> lambda_bar = e^{-1}
        let d = zoh_discretize(&params_1d(Complex64::new(-0.5, 0.0), 2.0, 1.0)).unwrap();
        assert!((d.lambda_bar[0].re - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn zoh_limit_guard_near_zero() {
        // |lambda| below the guard: lambda_bar = 1 and b_bar = delta * b.
        let mut p = params_1d(Complex64::new(-1e-13, 0.0), 0.25, 3.0);
        p.d_diag = vec![0.0];
        let d = zoh_discretize(&p).unwrap();
        assert_eq!(d.lambda_bar[0], Complex64::new(1.0, 0.0));
        assert!((d.b_bar[0].re - 0.75).abs() < 1e-15);
    }

    #[test]
    fn zoh_rejects_invalid_params() {
        let mut p = params_1d(Complex64::new(0.5, 0.0), 1.0, 1.0);
        assert!(zoh_discretize(&p).is_err()); // Re >= 0
        p = params_1d(Complex64::new(-1.0, 0.0), -1.0, 1.0);
        assert!(zoh_discretize(&p).is_err()); // delta <= 0
    }

    #[test]
    fn memoryless_system_has_no_state_carry() {
        // lambda_bar = 0 -> y_t = Re(c b_bar u_t) + d ⊙ u_t for every t.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, din) = (5usize, 2usize);
        let disc = DiscreteSsm {
            lambda_bar: vec![Complex64::new(0.0, 0.0); 3],
            b_bar: (0..3 * din)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
        };
        let c: Vec<Complex64> = (0..din * 3)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let d: Vec<f64> = vec![0.3, -0.7];
        let u = Tensor::from_vec(
            &[t, din],
            (0..t * din).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let y = apply_discrete(&disc, &c, &d, &u, din, din).unwrap();
        for ti in 0..t {
            for o in 0..din {
                let mut expect = d[o] * u.data()[ti * din + o];
                for pi in 0..3 {
                    let mut drive = Complex64::new(0.0, 0.0);
                    for k in 0..din {
                        drive += disc.b_bar[pi * din + k] * u.data()[ti * din + k];
                    }
                    expect += (c[o * 3 + pi] * drive).re;
                }
                assert!((y.data()[ti * din + o] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stability_over_long_horizons() {
        // Re(lambda) < 0 keeps the state bounded for bounded inputs, T = 1e4.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = 8;
        let lambda: Vec<Complex64> = (0..p)
            .map(|_| Complex64::new(-rng.gen_range(0.01..1.0), rng.gen_range(-3.0..3.0)))
            .collect();
        let delta = vec![0.05f64; p];
        let lambda_bar: Vec<Complex64> =
            lambda.iter().zip(&delta).map(|(l, d)| (l * *d).exp()).collect();
        let t = 10_000usize;
        let drive: Vec<Complex64> = (0..t * p)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let tiled: Vec<Complex64> = (0..t).flat_map(|_| lambda_bar.clone()).collect();
        let states = scan::parallel_scan(&tiled, &drive, t);
        let bound: f64 = lambda_bar
            .iter()
            .map(|lb| 1.0_f64.max((2.0f64).sqrt() / (1.0 - lb.norm())))
            .fold(0.0, f64::max);
        for s in &states {
            assert!(s.norm() <= bound + 1e-9, "state {} exceeds bound {bound}", s.norm());
        }
    }

    #[test]
    fn ssm_layer_matches_value_level_reference() {
        // The tape forward and the Complex64 reference path agree.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (p, dim, t) = (4usize, 3usize, 7usize);
        let layer: SsmLayer<f64> = SsmLayer::init("ssm", p, dim, &mut rng);
        let u = Tensor::from_vec(
            &[1, t, dim],
            (0..t * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let g: Graph<f64> = Graph::no_grad();
        let un = g.constant(u.clone());
        let y = layer.forward(&g, un).unwrap();

        let to_c = |re: &Param<f64>, im: &Param<f64>| -> Vec<Complex64> {
            re.value
                .data()
                .iter()
                .zip(im.value.data())
                .map(|(&r, &i)| Complex64::new(r, i))
                .collect()
        };
        let params = SsmParams {
            lambda: layer
                .log_neg_lambda_re
                .value
                .data()
                .iter()
                .zip(layer.lambda_im.value.data())
                .map(|(&lr, &li)| Complex64::new(-lr.exp(), li))
                .collect(),
            b_tilde: to_c(&layer.b_re, &layer.b_im),
            c_tilde: to_c(&layer.c_re, &layer.c_im),
            d_diag: layer.d.value.data().to_vec(),
            delta: layer.log_delta.value.data().iter().map(|x| x.exp()).collect(),
            din: dim,
            dout: dim,
        };
        let expect = ssm_apply(&params, &u.reshape(&[t, dim]).unwrap()).unwrap();
        let got = g.value(y).reshape(&[t, dim]).unwrap();
        assert!(got.max_abs_diff(&expect) < 1e-10);
    }

    #[test]
    fn block_identity_when_output_paths_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut block: SsmBlock<f64> = SsmBlock::init("blk", 4, 6, 2, &mut rng);
        block.zero_output_paths();
        let z = Tensor::from_vec(
            &[2, 5, 6],
            (0..60).map(|i| (i as f64 * 0.37).sin()).collect(),
        );
        let g: Graph<f64> = Graph::no_grad();
        let zn = g.constant(z.clone());
        let out = block.forward(&g, zn).unwrap();
        assert!(g.value(out).max_abs_diff(&z) < 1e-14);
    }

    #[test]
    fn block_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let block: SsmBlock<f64> = SsmBlock::init("blk", 4, 64, 4, &mut rng);
        let g: Graph<f64> = Graph::no_grad();
        let z = g.constant(Tensor::zeros(&[1, 16, 64]));
        let out = block.forward(&g, z).unwrap();
        assert_eq!(g.shape(out), vec![1, 16, 64]);
        assert!(g.value(out).all_finite());
    }
}
