//! Long-range temporal branch and the fusion head: SSM blocks over the
//! pretrained per-timestep features, strided 1-D convolutions matching
//! the [L, D] geometry of the spatial branch, and the concatenate ->
//! SSM block -> FFN -> softmax classifier.

use rand::Rng;

use crate::autodiff::{Graph, NodeId, Param};
use crate::classes::NUM_CLASSES;
use crate::error::TensorError;
use crate::nn::{Conv2dLayer, Linear};
use crate::s5::SsmBlock;
use crate::tensor::Scalar;

/// Geometry for the temporal branch. The two 1-D strides are derived
/// from m and L and recorded here; kernel sizes are odd so "same"
/// padding keeps ceil(len/stride) lengths.
#[derive(Debug, Clone)]
pub struct HeadConfig {
    /// Number of SSM blocks before the convolutions (L_LT).
    pub l_lt: usize,
    /// Pretraining history length m.
    pub history: usize,
    pub d_pre: usize,
    /// Target sequence length L shared with the spatial branch.
    pub seq_len: usize,
    /// Target feature dimension D shared with the spatial branch.
    pub feature_dim: usize,
    pub p_state: usize,
    pub mlp_ratio: usize,
    /// Kernel extent of both 1-D convolutions (odd).
    pub conv_kernel: usize,
}

impl HeadConfig {
    /// Factor floor(m/L) into the two convolution strides (near-equal,
    /// s1 >= s2). The convolutions never undershoot L; an adaptive mean
    /// pool finishes the exact m -> L adjustment when they overshoot.
    pub fn strides(&self) -> Result<(usize, usize), TensorError> {
        if self.seq_len == 0 || self.history == 0 {
            return Err(TensorError::InvalidArgument(
                "head config wants positive m and L".into(),
            ));
        }
        if self.history < self.seq_len {
            return Err(TensorError::InvalidArgument(format!(
                "history m={} shorter than sequence length L={}",
                self.history, self.seq_len
            )));
        }
        let q = (self.history / self.seq_len).max(1);
        let mut s2 = (q as f64).sqrt().floor() as usize;
        while s2 > 1 && q % s2 != 0 {
            s2 -= 1;
        }
        let s2 = s2.max(1);
        Ok((q / s2, s2))
    }

    /// Sequence length after both convolutions (>= L by construction).
    pub fn conv_out_len(&self) -> Result<usize, TensorError> {
        let (s1, s2) = self.strides()?;
        let after1 = (self.history + s1 - 1) / s1;
        Ok((after1 + s2 - 1) / s2)
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.conv_kernel % 2 == 0 {
            return Err(TensorError::InvalidArgument("conv kernel must be odd".into()));
        }
        let out = self.conv_out_len()?;
        if out < self.seq_len {
            return Err(TensorError::InvalidArgument(format!(
                "conv stack maps m={} below L={}",
                self.history, self.seq_len
            )));
        }
        Ok(())
    }
}

/// LT-SSM: L_LT chained SSM blocks over [B, m, D_pre], then two strided
/// 1-D convolutions adjusting m -> L and D_pre -> D.
#[derive(Clone)]
pub struct LtSsm<E: Scalar> {
    pub cfg: HeadConfig,
    pub blocks: Vec<SsmBlock<E>>,
    conv1: Conv2dLayer<E>,
    conv2: Conv2dLayer<E>,
}

impl<E: Scalar> LtSsm<E> {
    pub fn init(cfg: &HeadConfig, rng: &mut impl Rng) -> Result<Self, TensorError> {
        cfg.validate()?;
        let (s1, s2) = cfg.strides()?;
        let k = cfg.conv_kernel;
        let blocks = (0..cfg.l_lt)
            .map(|i| {
                SsmBlock::init(
                    &format!("lt_ssm.block{i}"),
                    cfg.p_state,
                    cfg.d_pre,
                    cfg.mlp_ratio,
                    rng,
                )
            })
            .collect();
        // 1-D convolutions realized as 2-D with a unit height.
        let conv1 = Conv2dLayer::init(
            "lt_ssm.conv1",
            cfg.feature_dim,
            cfg.d_pre,
            (1, k),
            (1, s1),
            (0, k / 2),
            rng,
        );
        let conv2 = Conv2dLayer::init(
            "lt_ssm.conv2",
            cfg.feature_dim,
            cfg.feature_dim,
            (1, k),
            (1, s2),
            (0, k / 2),
            rng,
        );
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            conv1,
            conv2,
        })
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        let mut p = Vec::new();
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.conv1.params());
        p.extend(self.conv2.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut p = Vec::new();
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p.extend(self.conv1.params_mut());
        p.extend(self.conv2.params_mut());
        p
    }

    /// h_pre [B, m, D_pre] -> h_lt [B, L, D].
    pub fn forward(&self, g: &Graph<E>, h_pre: NodeId) -> Result<NodeId, TensorError> {
        let cfg = &self.cfg;
        let shape = g.shape(h_pre);
        if shape.len() != 3 || shape[1] != cfg.history || shape[2] != cfg.d_pre {
            return Err(TensorError::ShapeMismatch(format!(
                "lt_ssm wants [B,{},{}], got {:?}",
                cfg.history, cfg.d_pre, shape
            )));
        }
        let b = shape[0];
        let mut x = h_pre;
        for blk in &self.blocks {
            x = blk.forward(g, x)?;
        }
        // [B, m, D_pre] -> [B, D_pre, 1, m]
        let x = g.permute(x, &[0, 2, 1])?;
        let x = g.reshape(x, &[b, cfg.d_pre, 1, cfg.history])?;
        let x = g.gelu(self.conv1.forward(g, x)?)?;
        let x = self.conv2.forward(g, x)?;
        let s = g.shape(x); // [B, D, 1, conv_out_len]
        let x = g.reshape(x, &[b, cfg.feature_dim, s[3]])?;
        let x = g.permute(x, &[0, 2, 1])?;
        if s[3] == cfg.seq_len {
            Ok(x)
        } else {
            g.adaptive_pool_seq(x, cfg.seq_len)
        }
    }
}

/// Fusion head: concatenate the two [L, D] branches along the sequence
/// axis, run an SSM block, mean-pool, and classify through a two-layer
/// FFN with softmax over the four classes.
#[derive(Clone)]
pub struct FusionHead<E: Scalar> {
    pub seq_len: usize,
    pub feature_dim: usize,
    pub block: SsmBlock<E>,
    pub fc1: Linear<E>,
    pub fc2: Linear<E>,
}

impl<E: Scalar> FusionHead<E> {
    pub fn init(
        seq_len: usize,
        feature_dim: usize,
        p_state: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            seq_len,
            feature_dim,
            block: SsmBlock::init("fusion.block", p_state, feature_dim, mlp_ratio, rng),
            fc1: Linear::init("fusion.fc1", feature_dim, feature_dim, rng),
            fc2: Linear::init("fusion.fc2", feature_dim, NUM_CLASSES, rng),
        }
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        let mut p = self.block.params();
        p.extend(self.fc1.params());
        p.extend(self.fc2.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut p = self.block.params_mut();
        p.extend(self.fc1.params_mut());
        p.extend(self.fc2.params_mut());
        p
    }

    /// (h_sse [B,L,D], h_lt [B,L,D]) -> class probabilities [B,4].
    /// Concatenation order is [h_sse; h_lt].
    pub fn fuse_predict(
        &self,
        g: &Graph<E>,
        h_sse: NodeId,
        h_lt: NodeId,
    ) -> Result<NodeId, TensorError> {
        let (sa, sb) = (g.shape(h_sse), g.shape(h_lt));
        let want_tail = [self.seq_len, self.feature_dim];
        if sa.len() != 3 || sb.len() != 3 || sa != sb || sa[1..] != want_tail {
            return Err(TensorError::ShapeMismatch(format!(
                "fuse_predict wants matching [B,{},{}], got {:?} and {:?}",
                self.seq_len, self.feature_dim, sa, sb
            )));
        }
        let z = g.concat(&[h_sse, h_lt], 1)?; // [B, 2L, D]
        let z = self.block.forward(g, z)?;
        let pooled = g.mean_axis(z, 1)?; // [B, D]
        let h = g.gelu(self.fc1.forward(g, pooled)?)?;
        let logits = self.fc2.forward(g, h)?;
        g.softmax_last(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn head_cfg() -> HeadConfig {
        HeadConfig {
            l_lt: 1,
            history: 64,
            d_pre: 16,
            seq_len: 4,
            feature_dim: 8,
            p_state: 4,
            mlp_ratio: 2,
            conv_kernel: 5,
        }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn stride_factorization() {
        let cfg = head_cfg();
        assert_eq!(cfg.strides().unwrap(), (4, 4));
        assert_eq!(cfg.conv_out_len().unwrap(), 4);
        let cfg2 = HeadConfig {
            history: 8,
            seq_len: 2,
            ..head_cfg()
        };
        assert_eq!(cfg2.strides().unwrap(), (2, 2));
        // Non-divisible m/L overshoots the convs and pools down exactly.
        let uneven = HeadConfig {
            history: 10,
            seq_len: 4,
            ..head_cfg()
        };
        assert_eq!(uneven.strides().unwrap(), (2, 1));
        assert_eq!(uneven.conv_out_len().unwrap(), 5);
        uneven.validate().unwrap();
        // Reference-scale geometry: m = 672 onto L = 160.
        let paper = HeadConfig {
            history: 672,
            seq_len: 160,
            ..head_cfg()
        };
        assert_eq!(paper.strides().unwrap(), (2, 2));
        assert_eq!(paper.conv_out_len().unwrap(), 168);
        paper.validate().unwrap();
        // m shorter than L is rejected.
        assert!(HeadConfig { history: 2, seq_len: 4, ..head_cfg() }.validate().is_err());
    }

    #[test]
    fn lt_ssm_pools_uneven_lengths_exactly() {
        let cfg = HeadConfig {
            history: 10,
            seq_len: 4,
            ..head_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let lt: LtSsm<f64> = LtSsm::init(&cfg, &mut rng).unwrap();
        let g: Graph<f64> = Graph::no_grad();
        let h = g.constant(rand_tensor(&[2, 10, 16], 21));
        let out = lt.forward(&g, h).unwrap();
        assert_eq!(g.shape(out), vec![2, 4, 8]);
    }

    #[test]
    fn lt_ssm_shape_contract() {
        let cfg = head_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lt: LtSsm<f64> = LtSsm::init(&cfg, &mut rng).unwrap();
        let g: Graph<f64> = Graph::no_grad();
        let h = g.constant(rand_tensor(&[2, 64, 16], 2));
        let out = lt.forward(&g, h).unwrap();
        assert_eq!(g.shape(out), vec![2, 4, 8]);
        assert!(g.value(out).all_finite());
    }

    #[test]
    fn lt_ssm_zero_blocks_still_maps_shapes() {
        let cfg = HeadConfig {
            l_lt: 0,
            ..head_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lt: LtSsm<f64> = LtSsm::init(&cfg, &mut rng).unwrap();
        let g: Graph<f64> = Graph::no_grad();
        let h = g.constant(rand_tensor(&[1, 64, 16], 4));
        let out = lt.forward(&g, h).unwrap();
        assert_eq!(g.shape(out), vec![1, 4, 8]);
    }

    #[test]
    fn fusion_outputs_valid_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head: FusionHead<f64> = FusionHead::init(4, 8, 4, 2, &mut rng);
        // Distribution validity over many random inputs.
        for trial in 0..1000 {
            let g: Graph<f64> = Graph::no_grad();
            let a = g.constant(rand_tensor(&[1, 4, 8], 100 + trial));
            let b = g.constant(rand_tensor(&[1, 4, 8], 5000 + trial));
            let p = head.fuse_predict(&g, a, b).unwrap();
            let v = g.value(p);
            let sum: f64 = v.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(v.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn fusion_uniform_when_final_layer_zeroed() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut head: FusionHead<f64> = FusionHead::init(4, 8, 4, 2, &mut rng);
        head.fc2.w.value = Tensor::zeros(&[8, 4]);
        head.fc2.b.value = Tensor::zeros(&[4]);
        let g: Graph<f64> = Graph::no_grad();
        let a = g.constant(rand_tensor(&[3, 4, 8], 7));
        let b = g.constant(rand_tensor(&[3, 4, 8], 8));
        let p = g.value(head.fuse_predict(&g, a, b).unwrap());
        for &v in p.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_is_order_sensitive() {
        // Swapping the two branches generically changes the output.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head: FusionHead<f64> = FusionHead::init(4, 8, 4, 2, &mut rng);
        let ta = rand_tensor(&[1, 4, 8], 10);
        let tb = rand_tensor(&[1, 4, 8], 11);
        let g: Graph<f64> = Graph::no_grad();
        let (a, b) = (g.constant(ta.clone()), g.constant(tb.clone()));
        let p1 = g.value(head.fuse_predict(&g, a, b).unwrap());
        let g2: Graph<f64> = Graph::no_grad();
        let (a2, b2) = (g2.constant(ta), g2.constant(tb));
        let p2 = g2.value(head.fuse_predict(&g2, b2, a2).unwrap());
        assert!(p1.max_abs_diff(&p2) > 1e-9);
    }

    #[test]
    fn fusion_rejects_mismatched_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let head: FusionHead<f64> = FusionHead::init(4, 8, 4, 2, &mut rng);
        let g: Graph<f64> = Graph::no_grad();
        let a = g.constant(Tensor::zeros(&[1, 4, 8]));
        let b = g.constant(Tensor::zeros(&[1, 5, 8]));
        assert!(head.fuse_predict(&g, a, b).is_err());
    }
}
