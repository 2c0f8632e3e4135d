//! The full forecasting model: spatial encoder, long-range temporal
//! branch over pretrained features, and the fusion head, with one
//! configuration struct deriving every sub-module geometry.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{check_unique_names, Graph, NodeId, Param};
use crate::error::TensorError;
use crate::head::{FusionHead, HeadConfig, LtSsm};
use crate::mae::MaeConfig;
use crate::sse::{SolarSpatialEncoder, SseConfig};
use crate::tensor::Scalar;

/// Every dimension the model needs, in one place. `desk` is the default
/// CPU-scale profile; `paper` documents the reference scale; `tiny` is
/// the gradient-check profile.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub channels: usize,
    pub history: usize, // k
    pub height: usize,
    pub width: usize,
    pub pre_history: usize, // m
    pub feature_dim: usize, // D
    pub d_pre: usize,
    pub p_state: usize,
    pub l_sse: usize,
    pub l_lt: usize,
    pub l_enc: usize,
    pub l_dec: usize,
    pub patch: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dcsm_reduction: usize,
    pub mae_alpha: f64,
    pub mae_r_l: f64,
    pub mae_r_h: f64,
    pub mae_r_f: f64,
    pub mae_uniform_ratio: Option<f64>,
}

impl ModelConfig {
    /// CPU desk profile: 32x32 inputs, 4 channels, k=4, m=64.
    pub fn desk() -> Self {
        Self {
            channels: 4,
            history: 4,
            height: 32,
            width: 32,
            pre_history: 64,
            feature_dim: 32,
            d_pre: 64,
            p_state: 16,
            l_sse: 3,
            l_lt: 1,
            l_enc: 2,
            l_dec: 2,
            patch: 8,
            heads: 4,
            mlp_ratio: 2,
            dcsm_reduction: 4,
            mae_alpha: 20.0,
            mae_r_l: 0.3,
            mae_r_h: 0.5,
            mae_r_f: 0.5,
            mae_uniform_ratio: None,
        }
    }

    /// Reference scale from the experimental setup tables (256x256,
    /// 10 channels, m=672, D=64, D_pre=128, L_enc=8, L_dec=12).
    pub fn paper() -> Self {
        Self {
            channels: 10,
            history: 4,
            height: 256,
            width: 256,
            pre_history: 672,
            feature_dim: 64,
            d_pre: 128,
            p_state: 16,
            l_sse: 3,
            l_lt: 1,
            l_enc: 8,
            l_dec: 12,
            patch: 16,
            heads: 4,
            mlp_ratio: 4,
            dcsm_reduction: 4,
            mae_alpha: 20.0,
            mae_r_l: 0.3,
            mae_r_h: 0.5,
            mae_r_f: 0.5,
            mae_uniform_ratio: None,
        }
    }

    /// Gradient-check profile: 16x16 inputs, every module width minimal.
    pub fn tiny() -> Self {
        Self {
            channels: 2,
            history: 2,
            height: 16,
            width: 16,
            pre_history: 8,
            feature_dim: 8,
            d_pre: 16,
            p_state: 4,
            l_sse: 3,
            l_lt: 1,
            l_enc: 1,
            l_dec: 1,
            patch: 8,
            heads: 2,
            mlp_ratio: 2,
            dcsm_reduction: 2,
            mae_alpha: 20.0,
            mae_r_l: 0.3,
            mae_r_h: 0.5,
            mae_r_f: 0.5,
            mae_uniform_ratio: None,
        }
    }

    pub fn sse_config(&self) -> SseConfig {
        SseConfig {
            stages: self.l_sse,
            feature_dim: self.feature_dim,
            channels: self.channels,
            history: self.history,
            height: self.height,
            width: self.width,
            p_state: self.p_state,
            mlp_ratio: self.mlp_ratio,
            channel_kernel: 3,
            final_convs: 2,
            dcsm_reduction: self.dcsm_reduction,
        }
    }

    pub fn head_config(&self) -> Result<HeadConfig, TensorError> {
        Ok(HeadConfig {
            l_lt: self.l_lt,
            history: self.pre_history,
            d_pre: self.d_pre,
            seq_len: self.sse_config().seq_len()?,
            feature_dim: self.feature_dim,
            p_state: self.p_state,
            mlp_ratio: self.mlp_ratio,
            conv_kernel: 5,
        })
    }

    pub fn mae_config(&self) -> MaeConfig {
        MaeConfig {
            image_hw: self.height,
            channels: self.channels,
            patch: self.patch,
            alpha: self.mae_alpha,
            r_l: self.mae_r_l,
            r_h: self.mae_r_h,
            r_f: self.mae_r_f,
            d_model: self.d_pre,
            l_enc: self.l_enc,
            l_dec: self.l_dec,
            decoder_dim: self.d_pre,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            history: self.pre_history,
            uniform_ratio: self.mae_uniform_ratio,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.height != self.width {
            return Err(TensorError::InvalidArgument(
                "model wants square inputs".into(),
            ));
        }
        self.sse_config().validate()?;
        self.head_config()?.validate()?;
        self.mae_config().validate()?;
        Ok(())
    }

    /// Flattened sequence length L shared by both branches.
    pub fn seq_len(&self) -> Result<usize, TensorError> {
        self.sse_config().seq_len()
    }
}

/// Spatial encoder + temporal branch + fusion head. The MAE encoder that
/// produces h_pre lives separately (it is pretrained and usually frozen);
/// the model consumes its features as an input node.
#[derive(Clone)]
pub struct FlareModel<E: Scalar> {
    pub sse: SolarSpatialEncoder<E>,
    pub lt: LtSsm<E>,
    pub fusion: FusionHead<E>,
}

impl<E: Scalar> FlareModel<E> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, TensorError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sse = SolarSpatialEncoder::init(&cfg.sse_config(), &mut rng)?;
        let lt = LtSsm::init(&cfg.head_config()?, &mut rng)?;
        let fusion = FusionHead::init(
            cfg.seq_len()?,
            cfg.feature_dim,
            cfg.p_state,
            cfg.mlp_ratio,
            &mut rng,
        );
        let model = Self { sse, lt, fusion };
        check_unique_names(&model.params())?;
        Ok(model)
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        let mut p = self.sse.params();
        p.extend(self.lt.params());
        p.extend(self.fusion.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut p = self.sse.params_mut();
        p.extend(self.lt.params_mut());
        p.extend(self.fusion.params_mut());
        p
    }

    /// Parameters retrained in the second (classifier re-training) stage:
    /// the fusion block and the classifier FFN; the backbone stays frozen.
    pub fn head_params_mut(&mut self) -> Vec<&mut Param<E>> {
        self.fusion.params_mut()
    }

    /// x [B,k,C,H,W] and h_pre [B,m,D_pre] -> class probabilities [B,4].
    pub fn forward(
        &self,
        g: &Graph<E>,
        x: NodeId,
        h_pre: NodeId,
    ) -> Result<NodeId, TensorError> {
        let h_sse = self.sse.forward(g, x)?;
        let h_lt = self.lt.forward(g, h_pre)?;
        self.fusion.fuse_predict(g, h_sse, h_lt)
    }

    /// The two branch outputs, for feature caching during stage 2.
    pub fn branch_features(
        &self,
        g: &Graph<E>,
        x: NodeId,
        h_pre: NodeId,
    ) -> Result<(NodeId, NodeId), TensorError> {
        Ok((self.sse.forward(g, x)?, self.lt.forward(g, h_pre)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn profiles_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        ModelConfig::paper().validate().unwrap();
        assert_eq!(ModelConfig::desk().seq_len().unwrap(), 4);
        assert_eq!(ModelConfig::tiny().seq_len().unwrap(), 2);
        assert_eq!(ModelConfig::paper().seq_len().unwrap(), 160);
    }

    #[test]
    fn forward_produces_distributions() {
        let cfg = ModelConfig::tiny();
        let model: FlareModel<f64> = FlareModel::init(&cfg, 7).unwrap();
        let g: Graph<f64> = Graph::no_grad();
        let x = g.constant(rand_tensor(&[2, 2, 2, 16, 16], 1));
        let h_pre = g.constant(rand_tensor(&[2, 8, 16], 2));
        let p = model.forward(&g, x, h_pre).unwrap();
        assert_eq!(g.shape(p), vec![2, 4]);
        let v = g.value(p);
        for b in 0..2 {
            let s: f64 = v.data()[b * 4..(b + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn parameter_names_are_unique_and_grouped() {
        let cfg = ModelConfig::tiny();
        let model: FlareModel<f64> = FlareModel::init(&cfg, 8).unwrap();
        let params = model.params();
        check_unique_names(&params).unwrap();
        let groups = ["sse.", "lt_ssm.", "fusion."];
        for g in groups {
            assert!(
                params.iter().any(|p| p.name.starts_with(g)),
                "missing group {g}"
            );
        }
        // Stage-wise groups exist too.
        for sub in ["dcsm", "st_ssm", "down"] {
            assert!(params.iter().any(|p| p.name.contains(sub)));
        }
    }
}
