//! Associative scans for the diagonal linear recurrence
//! x_t = a ⊙ x_{t-1} + u_t over complex state vectors.
//!
//! The production path is the parallel (recursive-doubling) scan; the
//! sequential recurrence is kept as the independent oracle and for
//! benchmarking. Both operate on interleaved (re, im) pairs or on
//! `Complex64` slices at the value level.

use num_complex::Complex64;

use crate::autodiff::{Graph, NodeId};
use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

/// The scan combiner (a1,b1) • (a2,b2) = (a2 ⊙ a1, a2 ⊙ b1 + b2).
pub fn combine(
    a1: &[Complex64],
    b1: &[Complex64],
    a2: &[Complex64],
    b2: &[Complex64],
) -> (Vec<Complex64>, Vec<Complex64>) {
    let a: Vec<Complex64> = a2.iter().zip(a1).map(|(x, y)| x * y).collect();
    let b: Vec<Complex64> = a2
        .iter()
        .zip(b1)
        .zip(b2)
        .map(|((x, y), z)| x * y + z)
        .collect();
    (a, b)
}

/// Sequential recurrence oracle: x_t = coeff ⊙ x_{t-1} + u_t with x_{-1}=0.
/// `coeff` has length P, `u` is T*P row-major; returns all T states.
pub fn sequential_scan(coeff: &[Complex64], u: &[Complex64]) -> Vec<Complex64> {
    let p = coeff.len();
    assert!(p > 0 && u.len() % p == 0, "sequential_scan shape");
    let t = u.len() / p;
    let mut out = vec![Complex64::new(0.0, 0.0); u.len()];
    let mut state = vec![Complex64::new(0.0, 0.0); p];
    for ti in 0..t {
        for pi in 0..p {
            state[pi] = coeff[pi] * state[pi] + u[ti * p + pi];
            out[ti * p + pi] = state[pi];
        }
    }
    out
}

/// Parallel inclusive scan over (coeff_t, u_t) pairs with the combiner
/// above. `coeff` is T*P (per-step coefficients), `u` is T*P; returns all
/// T states. Recursive doubling with a schedule fixed by T, so the result
/// is independent of any worker configuration.
pub fn parallel_scan(coeff: &[Complex64], u: &[Complex64], t: usize) -> Vec<Complex64> {
    assert_eq!(coeff.len(), u.len(), "parallel_scan shape");
    assert!(t > 0 && u.len() % t == 0, "parallel_scan length");
    let p = u.len() / t;
    let mut a = coeff.to_vec();
    let mut b = u.to_vec();
    let mut k = 1usize;
    while k < t {
        for ti in (k..t).rev() {
            for pi in 0..p {
                let cur = ti * p + pi;
                let prev = (ti - k) * p + pi;
                b[cur] = a[cur] * b[prev] + b[cur];
                let ap = a[prev];
                a[cur] *= ap;
            }
        }
        k <<= 1;
    }
    b
}

/// In-place recursive-doubling scan on interleaved (re,im) buffers.
/// `coef` and `acc` are [T, P, 2] flattened; `pw` = P * 2.
fn hs_scan_inplace<E: Scalar>(coef: &mut [E], acc: &mut [E], t: usize, pw: usize) {
    let mut k = 1usize;
    while k < t {
        for ti in (k..t).rev() {
            let cur = ti * pw;
            let prev = (ti - k) * pw;
            let mut j = 0;
            while j < pw {
                let ar = coef[cur + j];
                let ai = coef[cur + j + 1];
                let br = acc[prev + j];
                let bi = acc[prev + j + 1];
                acc[cur + j] = acc[cur + j] + ar * br - ai * bi;
                acc[cur + j + 1] = acc[cur + j + 1] + ar * bi + ai * br;
                let cr = coef[prev + j];
                let ci = coef[prev + j + 1];
                coef[cur + j] = ar * cr - ai * ci;
                coef[cur + j + 1] = ar * ci + ai * cr;
                j += 2;
            }
        }
        k <<= 1;
    }
}

/// Run the parallel scan with a time-constant coefficient on an
/// interleaved buffer. `a` is [P,2], `u` is [B,T,P,2] flattened.
fn scan_const_coeff<E: Scalar>(a: &[E], u: &[E], bsz: usize, t: usize, pw: usize) -> Vec<E> {
    let block = t * pw;
    let mut out = u.to_vec();
    let mut coef = vec![E::zero(); block];
    for bi in 0..bsz {
        for ti in 0..t {
            coef[ti * pw..(ti + 1) * pw].copy_from_slice(a);
        }
        hs_scan_inplace(&mut coef, &mut out[bi * block..(bi + 1) * block], t, pw);
    }
    out
}

impl<E: Scalar> Graph<E> {
    /// Differentiable linear recurrence x_t = a ⊙ x_{t-1} + u_t over an
    /// interleaved complex state. `a` is [P,2] and `u` is [B,T,P,2]; the
    /// output holds every state x_t.
    ///
    /// Forward runs the parallel scan; backward solves the reverse-time
    /// adjoint recurrence s_t = g_t + conj(a) ⊙ s_{t+1} with the same
    /// parallel scan and accumulates grad_a = Σ s_t ⊙ conj(x_{t-1}).
    pub fn linear_scan(&self, a: NodeId, u: NodeId) -> Result<NodeId, TensorError> {
        let va = self.value(a);
        let vu = self.value(u);
        let ashape = va.shape().to_vec();
        let ushape = vu.shape().to_vec();
        if ashape.len() != 2 || ashape[1] != 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "linear_scan coefficient wants [P,2], got {:?}",
                ashape
            )));
        }
        if ushape.len() != 4 || ushape[3] != 2 || ushape[2] != ashape[0] {
            return Err(TensorError::ShapeMismatch(format!(
                "linear_scan input wants [B,T,{},2], got {:?}",
                ashape[0], ushape
            )));
        }
        let (bsz, t, p) = (ushape[0], ushape[1], ushape[2]);
        let pw = p * 2;
        let out = Tensor::from_vec(
            &ushape,
            scan_const_coeff(va.data(), vu.data(), bsz, t, pw),
        );
        Ok(self.push_op(
            out,
            vec![a, u],
            Box::new(move |g, y, pv| {
                let av = &pv[0];
                // conj(a) drives the reverse-time adjoint recurrence.
                let mut aconj = av.data().to_vec();
                let mut j = 1;
                while j < aconj.len() {
                    aconj[j] = -aconj[j];
                    j += 2;
                }
                // Reverse g along time, scan, reverse back: s_t.
                let block = t * pw;
                let mut grev = vec![E::zero(); g.len()];
                for bi in 0..bsz {
                    for ti in 0..t {
                        let src = bi * block + ti * pw;
                        let dst = bi * block + (t - 1 - ti) * pw;
                        grev[dst..dst + pw].copy_from_slice(&g.data()[src..src + pw]);
                    }
                }
                let srev = scan_const_coeff(&aconj, &grev, bsz, t, pw);
                let mut s = vec![E::zero(); g.len()];
                for bi in 0..bsz {
                    for ti in 0..t {
                        let src = bi * block + (t - 1 - ti) * pw;
                        let dst = bi * block + ti * pw;
                        s[dst..dst + pw].copy_from_slice(&srev[src..src + pw]);
                    }
                }
                // grad_a[p] = sum over b, t>=1 of s_t ⊙ conj(x_{t-1}).
                let mut ga = vec![E::zero(); pw];
                for bi in 0..bsz {
                    for ti in 1..t {
                        let so = bi * block + ti * pw;
                        let xo = bi * block + (ti - 1) * pw;
                        let mut j = 0;
                        while j < pw {
                            let sr = s[so + j];
                            let si = s[so + j + 1];
                            let xr = y.data()[xo + j];
                            let xi = y.data()[xo + j + 1];
                            ga[j] = ga[j] + sr * xr + si * xi;
                            ga[j + 1] = ga[j + 1] + si * xr - sr * xi;
                            j += 2;
                        }
                    }
                }
                vec![
                    Tensor::from_vec(&[p, 2], ga),
                    Tensor::from_vec(g.shape(), s),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_complex(n: usize, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
        (0..n)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn combiner_is_associative() {
        // Random triples compose equally both ways within 1e-12.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let p = rng.gen_range(1..6);
            let (a1, b1) = (rand_complex(p, &mut rng), rand_complex(p, &mut rng));
            let (a2, b2) = (rand_complex(p, &mut rng), rand_complex(p, &mut rng));
            let (a3, b3) = (rand_complex(p, &mut rng), rand_complex(p, &mut rng));
            let (a12, b12) = combine(&a1, &b1, &a2, &b2);
            let (left_a, left_b) = combine(&a12, &b12, &a3, &b3);
            let (a23, b23) = combine(&a2, &b2, &a3, &b3);
            let (right_a, right_b) = combine(&a1, &b1, &a23, &b23);
            for i in 0..p {
                assert!((left_a[i] - right_a[i]).norm() < 1e-12);
                assert!((left_b[i] - right_b[i]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn parallel_equals_sequential_t1() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let coeff = rand_complex(4, &mut rng);
        let u = rand_complex(4, &mut rng);
        let seq = sequential_scan(&coeff, &u);
        let par = parallel_scan(&coeff, &u, 1);
        for i in 0..4 {
            assert!((seq[i] - par[i]).norm() < 1e-15);
        }
    }

    #[test]
    fn parallel_equals_sequential_long() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = 32;
        let t = 512;
        // Stable coefficients: magnitude < 1.
        let coeff: Vec<Complex64> = (0..p)
            .map(|_| {
                Complex64::from_polar(rng.gen_range(0.0..0.999), rng.gen_range(0.0..6.28))
            })
            .collect();
        let tiled: Vec<Complex64> = (0..t).flat_map(|_| coeff.clone()).collect();
        let u = rand_complex(t * p, &mut rng);
        let seq = sequential_scan(&coeff, &u);
        let par = parallel_scan(&tiled, &u, t);
        let mut worst = 0.0f64;
        for i in 0..t * p {
            worst = worst.max((seq[i] - par[i]).norm());
        }
        assert!(worst < 1e-10, "max diff {worst}");
    }

    #[test]
    fn tape_scan_matches_oracle_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (bsz, t, p) = (2usize, 6usize, 3usize);
        let coeff = rand_complex(p, &mut rng)
            .iter()
            .map(|c| c * 0.8)
            .collect::<Vec<_>>();
        let u = rand_complex(bsz * t * p, &mut rng);
        let a_t = Tensor::<f64>::from_vec(
            &[p, 2],
            coeff.iter().flat_map(|c| [c.re, c.im]).collect(),
        );
        let u_t = Tensor::<f64>::from_vec(
            &[bsz, t, p, 2],
            u.iter().flat_map(|c| [c.re, c.im]).collect(),
        );
        let g: Graph<f64> = Graph::new();
        let an = g.var(a_t.clone());
        let un = g.var(u_t.clone());
        let x = g.linear_scan(an, un).unwrap();
        // Forward agrees with the sequential oracle per batch element.
        let got = g.value(x);
        for bi in 0..bsz {
            let seq = sequential_scan(&coeff, &u[bi * t * p..(bi + 1) * t * p]);
            for (i, c) in seq.iter().enumerate() {
                let off = bi * t * p * 2 + i * 2;
                assert!((got.data()[off] - c.re).abs() < 1e-12);
                assert!((got.data()[off + 1] - c.im).abs() < 1e-12);
            }
        }
        // Gradient contract against central differences.
        let wt = Tensor::<f64>::from_vec(
            &[bsz, t, p, 2],
            (0..bsz * t * p * 2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let wn = g.constant(wt.clone());
        let loss = g.sum_all(g.mul(x, wn).unwrap()).unwrap();
        let grads = g.backward(loss).unwrap();
        let eval = |av: &Tensor<f64>, uv: &Tensor<f64>| {
            let g: Graph<f64> = Graph::no_grad();
            let an = g.var(av.clone());
            let un = g.var(uv.clone());
            let x = g.linear_scan(an, un).unwrap();
            let wn = g.constant(wt.clone());
            g.value(g.sum_all(g.mul(x, wn).unwrap()).unwrap()).data()[0]
        };
        let fd_a = crate::autodiff::gradcheck::fd_grad(|av| eval(av, &u_t), &a_t, 1e-6);
        let an_grad = grads.node(an).unwrap();
        for i in 0..fd_a.len() {
            assert!(
                (fd_a.data()[i] - an_grad.data()[i]).abs() < 1e-6,
                "grad_a[{i}]: fd {} analytic {}",
                fd_a.data()[i],
                an_grad.data()[i]
            );
        }
        let fd_u = crate::autodiff::gradcheck::fd_grad(|uv| eval(&a_t, uv), &u_t, 1e-6);
        let un_grad = grads.node(un).unwrap();
        for i in 0..fd_u.len() {
            assert!((fd_u.data()[i] - un_grad.data()[i]).abs() < 1e-6);
        }
    }
}
