//! Composite training loss: cross-entropy plus scoring-matrix-weighted
//! GMGS loss plus the Brier-style BSS loss, combined as
//! L = λ_CE·L_CE + λ_GMGS·L_GMGS + λ_BSS·L_BSS.
//!
//! All three terms are built from tape primitives so the gradient
//! contract of the substrate carries over. The scoring matrix is treated
//! as a constant: no gradient flows through it.

use crate::autodiff::{Graph, NodeId};
use crate::error::TensorError;
use crate::metrics::{argmax_tie_low, ScoringMatrix};
use crate::tensor::{Scalar, Tensor};

/// Loss weights and smoothing. Defaults follow the training setup tables:
/// λ_CE = 1, λ_BSS = 2, λ_GMGS = 1.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub lambda_ce: f64,
    pub lambda_bss: f64,
    pub lambda_gmgs: f64,
    /// Label smoothing ε applied inside the GMGS loss only.
    pub label_smoothing: f64,
    /// Probabilities are clamped to this floor before the log.
    pub log_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_ce: 1.0,
            lambda_bss: 2.0,
            lambda_gmgs: 1.0,
            label_smoothing: 0.1,
            log_clamp: 1e-12,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.lambda_ce < 0.0 || self.lambda_bss < 0.0 || self.lambda_gmgs < 0.0 {
            return Err(TensorError::InvalidArgument(
                "loss weights must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(TensorError::InvalidArgument(
                "label smoothing must lie in [0,1)".into(),
            ));
        }
        Ok(())
    }
}

fn check_probs_shape<E: Scalar>(
    g: &Graph<E>,
    probs: NodeId,
    labels: &[usize],
) -> Result<(usize, usize), TensorError> {
    let shape = g.shape(probs);
    if shape.len() != 2 {
        return Err(TensorError::ShapeMismatch(format!(
            "loss wants probabilities [N,I], got {:?}",
            shape
        )));
    }
    let (n, i) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(TensorError::ShapeMismatch(format!(
            "{} labels for batch of {}",
            labels.len(),
            n
        )));
    }
    if labels.iter().any(|&l| l >= i) {
        return Err(TensorError::InvalidArgument("label index out of range".into()));
    }
    Ok((n, i))
}

fn one_hot<E: Scalar>(labels: &[usize], n_classes: usize) -> Tensor<E> {
    let mut data = vec![E::zero(); labels.len() * n_classes];
    for (row, &l) in labels.iter().enumerate() {
        data[row * n_classes + l] = E::one();
    }
    Tensor::from_vec(&[labels.len(), n_classes], data)
}

/// L_BSS = (1/N) Σ_n Σ_i (p_ni − y_ni)².
pub fn bss_loss<E: Scalar>(
    g: &Graph<E>,
    probs: NodeId,
    labels: &[usize],
) -> Result<NodeId, TensorError> {
    let (n, i) = check_probs_shape(g, probs, labels)?;
    let y = g.constant(one_hot(labels, i));
    let diff = g.sub(probs, y)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum_all(sq)?;
    g.scale(total, 1.0 / n as f64)
}

/// L_GMGS = −(1/N) Σ_n s_{i*j*} Σ_i y′_ni log p_ni with y′ the
/// label-smoothed target, i* the observed class, and j* the predicted
/// argmax (ties to the lowest index). The s_{i*j*} weights are constants.
pub fn gmgs_loss<E: Scalar>(
    g: &Graph<E>,
    probs: NodeId,
    labels: &[usize],
    s: &ScoringMatrix,
    cfg: &LossConfig,
) -> Result<NodeId, TensorError> {
    cfg.validate()?;
    let (n, i) = check_probs_shape(g, probs, labels)?;
    if s.n_classes != i {
        return Err(TensorError::ShapeMismatch(format!(
            "scoring matrix is {}x{} but batch has {} classes",
            s.n_classes, s.n_classes, i
        )));
    }
    let pv = g.value(probs);
    let eps = cfg.label_smoothing;
    // Constant weight tensor: w_n · y′_ni.
    let mut weights = vec![E::zero(); n * i];
    for row in 0..n {
        let j_star = argmax_tie_low(
            &pv.data()[row * i..(row + 1) * i]
                .iter()
                .map(|v| v.as_f64())
                .collect::<Vec<_>>(),
        );
        let s_val = s.get(labels[row], j_star);
        for col in 0..i {
            let y = if col == labels[row] { 1.0 } else { 0.0 };
            let smoothed = (1.0 - eps) * y + eps / i as f64;
            weights[row * i + col] = E::from_f64(s_val * smoothed);
        }
    }
    let w = g.constant(Tensor::from_vec(&[n, i], weights));
    let logp = g.ln_clamped(probs, cfg.log_clamp)?;
    let weighted = g.mul(logp, w)?;
    let total = g.sum_all(weighted)?;
    g.scale(total, -1.0 / n as f64)
}

/// Standard mean cross-entropy on one-hot targets.
pub fn ce_loss<E: Scalar>(
    g: &Graph<E>,
    probs: NodeId,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<NodeId, TensorError> {
    let (n, i) = check_probs_shape(g, probs, labels)?;
    let y = g.constant(one_hot::<E>(labels, i));
    let logp = g.ln_clamped(probs, cfg.log_clamp)?;
    let picked = g.mul(logp, y)?;
    let total = g.sum_all(picked)?;
    g.scale(total, -1.0 / n as f64)
}

/// L = λ_CE·L_CE + λ_GMGS·L_GMGS + λ_BSS·L_BSS.
pub fn total_loss<E: Scalar>(
    g: &Graph<E>,
    probs: NodeId,
    labels: &[usize],
    s: &ScoringMatrix,
    cfg: &LossConfig,
) -> Result<NodeId, TensorError> {
    cfg.validate()?;
    let ce = ce_loss(g, probs, labels, cfg)?;
    let gm = gmgs_loss(g, probs, labels, s, cfg)?;
    let bs = bss_loss(g, probs, labels)?;
    let ce_w = g.scale(ce, cfg.lambda_ce)?;
    let gm_w = g.scale(gm, cfg.lambda_gmgs)?;
    let bs_w = g.scale(bs, cfg.lambda_bss)?;
    g.add(g.add(ce_w, gm_w)?, bs_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::scoring_matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eval_scalar(f: impl Fn(&Graph<f64>) -> NodeId) -> f64 {
        let g: Graph<f64> = Graph::no_grad();
        let node = f(&g);
        g.value(node).data()[0]
    }

    fn probs_node(g: &Graph<f64>, rows: &[&[f64]]) -> NodeId {
        let n = rows.len();
        let i = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        g.constant(Tensor::from_vec(&[n, i], data))
    }

    #[test]
    fn bss_hand_values() {
        // p = y exactly -> 0.
        let v = eval_scalar(|g| {
            let p = probs_node(g, &[&[1.0, 0.0]]);
            bss_loss(g, p, &[0]).unwrap()
        });
        assert!(v.abs() < 1e-15);
        // N=1, I=2, p=(0.5,0.5), y=(1,0) -> 0.5.
        let v = eval_scalar(|g| {
            let p = probs_node(g, &[&[0.5, 0.5]]);
            bss_loss(g, p, &[0]).unwrap()
        });
        assert!((v - 0.5).abs() < 1e-15);
        // Uniform p over I=4, one-hot y -> 0.75^2 + 3*0.25^2 = 0.75.
        let v = eval_scalar(|g| {
            let p = probs_node(g, &[&[0.25, 0.25, 0.25, 0.25]]);
            bss_loss(g, p, &[2]).unwrap()
        });
        assert!((v - 0.75).abs() < 1e-15);
    }

    #[test]
    fn bss_zero_iff_exact() {
        let v = eval_scalar(|g| {
            let p = probs_node(g, &[&[0.9, 0.1]]);
            bss_loss(g, p, &[0]).unwrap()
        });
        assert!(v > 0.0);
    }

    #[test]
    fn gmgs_loss_hand_values() {
        let s = scoring_matrix(&[0.8, 0.2]).unwrap();
        let cfg = LossConfig {
            label_smoothing: 0.0,
            ..LossConfig::default()
        };
        // One-hot correct prediction: -s_ii * log(1) = 0.
        let v = eval_scalar(|g| {
            let p = probs_node(g, &[&[1.0, 0.0]]);
            gmgs_loss(g, p, &[0], &s, &cfg).unwrap()
        });
        assert!(v.abs() < 1e-12);
        // Negative s_{i*j*} flips the sign relative to plain CE:
        // y = class 1 (rare), prediction favors class 0 -> s_{10} = -1.
        let p_row = [0.9, 0.1];
        let gm = eval_scalar(|g| {
            let p = probs_node(g, &[&p_row]);
            gmgs_loss(g, p, &[1], &s, &cfg).unwrap()
        });
        let ce = eval_scalar(|g| {
            let p = probs_node(g, &[&p_row]);
            ce_loss(g, p, &[1], &cfg).unwrap()
        });
        assert!(ce > 0.0);
        assert!((gm + ce).abs() < 1e-12, "gm {gm} should equal -ce {ce}");
        // Uniform p over I=4: loss = -s_{i* j*} log(0.25), j* tie-broken to 0.
        let s4 = scoring_matrix(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let gm = eval_scalar(|g| {
            let p = probs_node(g, &[&[0.25, 0.25, 0.25, 0.25]]);
            gmgs_loss(g, p, &[2], &s4, &cfg).unwrap()
        });
        let expect = -s4.get(2, 0) * 0.25f64.ln();
        assert!((gm - expect).abs() < 1e-12);
    }

    #[test]
    fn total_loss_reduces_to_ce() {
        let s = scoring_matrix(&[0.5, 0.5]).unwrap();
        let cfg = LossConfig {
            lambda_ce: 1.0,
            lambda_bss: 0.0,
            lambda_gmgs: 0.0,
            ..LossConfig::default()
        };
        let total = eval_scalar(|g| {
            let p = probs_node(g, &[&[0.7, 0.3], &[0.2, 0.8]]);
            total_loss(g, p, &[0, 1], &s, &cfg).unwrap()
        });
        let ce = eval_scalar(|g| {
            let p = probs_node(g, &[&[0.7, 0.3], &[0.2, 0.8]]);
            ce_loss(g, p, &[0, 1], &cfg).unwrap()
        });
        assert!((total - ce).abs() < 1e-15);
        let expect = -(0.7f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((ce - expect).abs() < 1e-12);
    }

    #[test]
    fn total_loss_zero_on_perfect_one_hot() {
        let s = scoring_matrix(&[0.5, 0.5]).unwrap();
        let cfg = LossConfig {
            label_smoothing: 0.0,
            ..LossConfig::default()
        };
        let total = eval_scalar(|g| {
            let p = probs_node(g, &[&[1.0, 0.0], &[0.0, 1.0]]);
            total_loss(g, p, &[0, 1], &s, &cfg).unwrap()
        });
        assert!(total.abs() < 1e-10);
    }

    #[test]
    fn total_matches_independent_three_term_sum() {
        // Recomposition oracle: plain-loop CE/GMGS/BSS summed independently.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 16;
        let i = 4;
        let s = scoring_matrix(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let cfg = LossConfig::default();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let raw: Vec<f64> = (0..i).map(|_| rng.gen_range(0.01..1.0)).collect();
            let t: f64 = raw.iter().sum();
            rows.push(raw.iter().map(|x| x / t).collect());
            labels.push(rng.gen_range(0..i));
        }
        let total = eval_scalar(|g| {
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let p = probs_node(g, &refs);
            total_loss(g, p, &labels, &s, &cfg).unwrap()
        });
        // Independent accumulation.
        let mut ce = 0.0;
        let mut gm = 0.0;
        let mut bs = 0.0;
        for (row, &label) in rows.iter().zip(&labels) {
            ce -= row[label].max(1e-12).ln();
            let j_star = argmax_tie_low(row);
            let sval = s.get(label, j_star);
            let mut inner = 0.0;
            for (col, &p) in row.iter().enumerate() {
                let y = if col == label { 1.0 } else { 0.0 };
                let smoothed = (1.0 - cfg.label_smoothing) * y + cfg.label_smoothing / i as f64;
                inner += smoothed * p.max(1e-12).ln();
                let diff = p - y;
                bs += diff * diff;
            }
            gm -= sval * inner;
        }
        let expect = cfg.lambda_ce * ce / n as f64
            + cfg.lambda_gmgs * gm / n as f64
            + cfg.lambda_bss * bs / n as f64;
        assert!((total - expect).abs() < 1e-12, "total {total} vs oracle {expect}");
    }

    #[test]
    fn total_loss_batch_permutation_invariant() {
        let s = scoring_matrix(&[0.25, 0.25, 0.25, 0.25]).unwrap();
        let cfg = LossConfig::default();
        let rows: Vec<Vec<f64>> = vec![
            vec![0.7, 0.1, 0.1, 0.1],
            vec![0.1, 0.6, 0.2, 0.1],
            vec![0.25, 0.25, 0.3, 0.2],
        ];
        let labels = [0usize, 1, 3];
        let value = |order: &[usize]| {
            eval_scalar(|g| {
                let ordered: Vec<&[f64]> = order.iter().map(|&k| rows[k].as_slice()).collect();
                let l: Vec<usize> = order.iter().map(|&k| labels[k]).collect();
                let p = probs_node(g, &ordered);
                total_loss(g, p, &l, &s, &cfg).unwrap()
            })
        };
        let a = value(&[0, 1, 2]);
        let b = value(&[2, 0, 1]);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences_through_softmax() {
        // Gradient w.r.t. logits of the full composite loss.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let s = scoring_matrix(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let cfg = LossConfig::default();
        let logits = Tensor::from_vec(&[6, 4], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..4)).collect();
        let g: Graph<f64> = Graph::new();
        let x = g.var(logits.clone());
        let p = g.softmax_last(x).unwrap();
        let loss = total_loss(&g, p, &labels, &s, &cfg).unwrap();
        let analytic = g.backward(loss).unwrap().node(x).unwrap().clone();
        let fd = crate::autodiff::gradcheck::fd_grad(
            |t| {
                let g: Graph<f64> = Graph::no_grad();
                let x = g.var(t.clone());
                let p = g.softmax_last(x).unwrap();
                let loss = total_loss(&g, p, &labels, &s, &cfg).unwrap();
                g.value(loss).data()[0]
            },
            &logits,
            1e-5,
        );
        for k in 0..logits.len() {
            let (a, f) = (analytic.data()[k], fd.data()[k]);
            assert!(
                (a - f).abs() / a.abs().max(f.abs()).max(1e-6) < 1e-4,
                "logit {k}: analytic {a} vs fd {f}"
            );
        }
    }
}
