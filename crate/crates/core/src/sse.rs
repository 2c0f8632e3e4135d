//! Solar spatial encoder: an initial 3-D convolution folds the time axis
//! into the feature dimension, then each stage halves the spatial
//! resolution, reweights channels (DCSM) and mixes features along the
//! flattened channel-spatial sequence (ST-SSM). A final 2-D stack
//! flattens everything to the [L, D] sequence consumed by the fusion
//! head.
//!
//! Public tensors use the [B, D, C, H, W] layout (batch, feature,
//! channel, height, width); channel-mixing convolutions run with C as
//! the convolution channel axis internally.

use rand::Rng;

use crate::autodiff::{Graph, NodeId, Param};
use crate::error::TensorError;
use crate::nn::{Conv2dLayer, Conv3dLayer};
use crate::s5::SsmBlock;
use crate::tensor::Scalar;
#[cfg(test)]
use crate::tensor::Tensor;

/// Encoder geometry and widths.
#[derive(Debug, Clone)]
pub struct SseConfig {
    /// Number of downsample/DCSM/ST-SSM stages (L_SSE).
    pub stages: usize,
    /// Feature dimension D created by the initial convolution.
    pub feature_dim: usize,
    pub channels: usize,
    /// History length k absorbed by the initial convolution.
    pub history: usize,
    pub height: usize,
    pub width: usize,
    /// SSM state size for the ST-SSM blocks.
    pub p_state: usize,
    pub mlp_ratio: usize,
    /// Depth of the channel-axis kernel in stage convolutions.
    pub channel_kernel: usize,
    /// Number of trailing 2-D convolutions before flattening.
    pub final_convs: usize,
    /// Channel reduction in the DCSM weighting stack.
    pub dcsm_reduction: usize,
}

impl Default for SseConfig {
    fn default() -> Self {
        Self {
            stages: 3,
            feature_dim: 64,
            channels: 10,
            history: 4,
            height: 256,
            width: 256,
            p_state: 16,
            mlp_ratio: 4,
            channel_kernel: 3,
            final_convs: 2,
            dcsm_reduction: 4,
        }
    }
}

impl SseConfig {
    /// Spatial dims after the initial convolution and after each stage.
    /// Errors when any halving would hit an odd or sub-1 extent.
    pub fn stage_dims(&self) -> Result<Vec<(usize, usize)>, TensorError> {
        let mut dims = Vec::with_capacity(self.stages + 1);
        let (mut h, mut w) = (self.height, self.width);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "input dims {h}x{w} must be even for the initial downsampling"
            )));
        }
        h /= 2;
        w /= 2;
        dims.push((h, w));
        for stage in 0..self.stages {
            if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
                return Err(TensorError::InvalidArgument(format!(
                    "stage {stage} cannot halve odd or unit dims {h}x{w}"
                )));
            }
            h /= 2;
            w /= 2;
            dims.push((h, w));
        }
        Ok(dims)
    }

    /// Spatial dims after the trailing 2-D stack (stride 2 per layer
    /// while the extent allows it).
    pub fn final_dims(&self) -> Result<(usize, usize), TensorError> {
        let (mut h, mut w) = *self.stage_dims()?.last().unwrap();
        for _ in 0..self.final_convs {
            let sh = if h >= 2 { 2 } else { 1 };
            let sw = if w >= 2 { 2 } else { 1 };
            h = (h + 2 - 3) / sh + 1;
            w = (w + 2 - 3) / sw + 1;
        }
        Ok((h, w))
    }

    /// Flattened sequence length L = C * H_final * W_final.
    pub fn seq_len(&self) -> Result<usize, TensorError> {
        let (h, w) = self.final_dims()?;
        Ok(self.channels * h * w)
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.stages == 0 || self.feature_dim == 0 || self.channels == 0 || self.history == 0 {
            return Err(TensorError::InvalidArgument(
                "sse config wants positive stages/dims".into(),
            ));
        }
        if self.channel_kernel % 2 == 0 {
            return Err(TensorError::InvalidArgument(
                "channel kernel must be odd to preserve extents".into(),
            ));
        }
        self.stage_dims()?;
        Ok(())
    }
}

/// Channel-selective module. All convolutions treat the solar channel
/// axis C as the convolution channel axis, so their weights are
/// channel-indexed and the module is exactly equivariant to channel
/// permutations applied jointly to inputs and parameters.
#[derive(Debug, Clone)]
pub struct Dcsm<E: Scalar> {
    pub fuse3d: Conv3dLayer<E>,
    pub fuse2d: Conv2dLayer<E>,
    pub weight_reduce: Conv3dLayer<E>,
    pub weight_expand: Conv3dLayer<E>,
    pub proj: Conv3dLayer<E>,
}

impl<E: Scalar> Dcsm<E> {
    pub fn init(prefix: &str, channels: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        let reduced = (channels / reduction).max(1);
        Self {
            fuse3d: Conv3dLayer::init(
                &format!("{prefix}.fuse3d"),
                channels,
                channels,
                (3, 3, 3),
                (1, 1, 1),
                (1, 1, 1),
                rng,
            ),
            fuse2d: Conv2dLayer::init(
                &format!("{prefix}.fuse2d"),
                channels,
                channels,
                (3, 3),
                (1, 1),
                (1, 1),
                rng,
            ),
            weight_reduce: Conv3dLayer::init(
                &format!("{prefix}.weight_reduce"),
                reduced,
                channels,
                (1, 1, 1),
                (1, 1, 1),
                (0, 0, 0),
                rng,
            ),
            weight_expand: Conv3dLayer::init(
                &format!("{prefix}.weight_expand"),
                channels,
                reduced,
                (1, 1, 1),
                (1, 1, 1),
                (0, 0, 0),
                rng,
            ),
            proj: Conv3dLayer::init(
                &format!("{prefix}.proj"),
                channels,
                channels,
                (1, 1, 1),
                (1, 1, 1),
                (0, 0, 0),
                rng,
            ),
        }
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        let mut p = self.fuse3d.params();
        p.extend(self.fuse2d.params());
        p.extend(self.weight_reduce.params());
        p.extend(self.weight_expand.params());
        p.extend(self.proj.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut p = self.fuse3d.params_mut();
        p.extend(self.fuse2d.params_mut());
        p.extend(self.weight_reduce.params_mut());
        p.extend(self.weight_expand.params_mut());
        p.extend(self.proj.params_mut());
        p
    }

    /// h [B,D,C,H,W] -> (output, channel weights [B,C,D,1,1]).
    ///
    /// F_fused = Conv3D(h) + per-frame Conv2D(h); the descriptor is the
    /// spatial average of F_fused; weights = sigmoid of the two-layer
    /// 1x1x1 stack; output = Conv1x1(F_fused ⊙ W) + h.
    pub fn forward_with_weights(
        &self,
        g: &Graph<E>,
        h: NodeId,
    ) -> Result<(NodeId, NodeId), TensorError> {
        let shape = g.shape(h);
        if shape.len() != 5 {
            return Err(TensorError::ShapeMismatch(format!(
                "dcsm wants [B,D,C,H,W], got {:?}",
                shape
            )));
        }
        let (b, d, c, hh, ww) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
        // Channel-as-conv-channel layout.
        let x = g.permute(h, &[0, 2, 1, 3, 4])?; // [B,C,D,H,W]
        let f3 = self.fuse3d.forward(g, x)?;
        // Per-feature-frame 2-D convolution.
        let frames = g.reshape(g.permute(x, &[0, 2, 1, 3, 4])?, &[b * d, c, hh, ww])?;
        let f2 = self.fuse2d.forward(g, frames)?;
        let f2 = g.permute(g.reshape(f2, &[b, d, c, hh, ww])?, &[0, 2, 1, 3, 4])?;
        let fused = g.add(f3, f2)?; // [B,C,D,H,W]
        // Channel descriptor and weights.
        let descriptor = g.global_avg_pool_hw(fused)?; // [B,C,D,1,1]
        let mid = self.weight_reduce.forward(g, descriptor)?;
        let mid = g.gelu(mid)?;
        let weights = g.sigmoid(self.weight_expand.forward(g, mid)?)?; // [B,C,D,1,1]
        let reweighted = g.mul_bcast(fused, weights)?;
        let projected = self.proj.forward(g, reweighted)?;
        let out = g.add(g.permute(projected, &[0, 2, 1, 3, 4])?, h)?;
        Ok((out, weights))
    }

    pub fn forward(&self, g: &Graph<E>, h: NodeId) -> Result<NodeId, TensorError> {
        Ok(self.forward_with_weights(g, h)?.0)
    }
}

/// Spatio-temporal SSM: flatten (C,H,W) into a sequence of D-dimensional
/// features, run an SSM block, restore the layout.
#[derive(Debug, Clone)]
pub struct StSsm<E: Scalar> {
    pub block: SsmBlock<E>,
}

impl<E: Scalar> StSsm<E> {
    pub fn init(
        prefix: &str,
        p_state: usize,
        feature_dim: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            block: SsmBlock::init(&format!("{prefix}.block"), p_state, feature_dim, mlp_ratio, rng),
        }
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        self.block.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        self.block.params_mut()
    }

    /// h [B,D,C,H,W] -> same shape. The sequence order is row-major over
    /// (c, h, w).
    pub fn forward(&self, g: &Graph<E>, h: NodeId) -> Result<NodeId, TensorError> {
        let shape = g.shape(h);
        if shape.len() != 5 {
            return Err(TensorError::ShapeMismatch(format!(
                "st_ssm wants [B,D,C,H,W], got {:?}",
                shape
            )));
        }
        let (b, d, c, hh, ww) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
        let seq = g.reshape(g.permute(h, &[0, 2, 3, 4, 1])?, &[b, c * hh * ww, d])?;
        let out = self.block.forward(g, seq)?;
        let out = g.reshape(out, &[b, c, hh, ww, d])?;
        g.permute(out, &[0, 4, 1, 2, 3])
    }
}

#[derive(Clone)]
struct SseStage<E: Scalar> {
    down: Conv3dLayer<E>,
    dcsm: Dcsm<E>,
    st_ssm: StSsm<E>,
}

/// The full encoder.
#[derive(Clone)]
pub struct SolarSpatialEncoder<E: Scalar> {
    pub cfg: SseConfig,
    init_conv: Conv3dLayer<E>,
    stages: Vec<SseStage<E>>,
    final_convs: Vec<Conv2dLayer<E>>,
}

impl<E: Scalar> SolarSpatialEncoder<E> {
    pub fn init(cfg: &SseConfig, rng: &mut impl Rng) -> Result<Self, TensorError> {
        cfg.validate()?;
        let ck = cfg.channel_kernel;
        let init_conv = Conv3dLayer::init(
            "sse.init_conv",
            cfg.feature_dim,
            1,
            (cfg.history, 3, 3),
            (1, 2, 2),
            (0, 1, 1),
            rng,
        );
        let mut stages = Vec::with_capacity(cfg.stages);
        for i in 0..cfg.stages {
            stages.push(SseStage {
                down: Conv3dLayer::init(
                    &format!("sse.stage{i}.down"),
                    cfg.channels,
                    cfg.channels,
                    (ck, 3, 3),
                    (1, 2, 2),
                    (ck / 2, 1, 1),
                    rng,
                ),
                dcsm: Dcsm::init(
                    &format!("sse.stage{i}.dcsm"),
                    cfg.channels,
                    cfg.dcsm_reduction,
                    rng,
                ),
                st_ssm: StSsm::init(
                    &format!("sse.stage{i}.st_ssm"),
                    cfg.p_state,
                    cfg.feature_dim,
                    cfg.mlp_ratio,
                    rng,
                ),
            });
        }
        // Trailing 2-D stack strides are fixed by the shape algebra.
        let (mut h, mut w) = *cfg.stage_dims()?.last().unwrap();
        let mut final_convs = Vec::with_capacity(cfg.final_convs);
        for i in 0..cfg.final_convs {
            let sh = if h >= 2 { 2 } else { 1 };
            let sw = if w >= 2 { 2 } else { 1 };
            final_convs.push(Conv2dLayer::init(
                &format!("sse.final{i}"),
                cfg.feature_dim,
                cfg.feature_dim,
                (3, 3),
                (sh, sw),
                (1, 1),
                rng,
            ));
            h = (h + 2 - 3) / sh + 1;
            w = (w + 2 - 3) / sw + 1;
        }
        Ok(Self {
            cfg: cfg.clone(),
            init_conv,
            stages,
            final_convs,
        })
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        let mut p = self.init_conv.params();
        for s in &self.stages {
            p.extend(s.down.params());
            p.extend(s.dcsm.params());
            p.extend(s.st_ssm.params());
        }
        for c in &self.final_convs {
            p.extend(c.params());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut p = self.init_conv.params_mut();
        for s in &mut self.stages {
            p.extend(s.down.params_mut());
            p.extend(s.dcsm.params_mut());
            p.extend(s.st_ssm.params_mut());
        }
        for c in &mut self.final_convs {
            p.extend(c.params_mut());
        }
        p
    }

    pub fn stage(&self, i: usize) -> (&Conv3dLayer<E>, &Dcsm<E>, &StSsm<E>) {
        let s = &self.stages[i];
        (&s.down, &s.dcsm, &s.st_ssm)
    }

    /// Halve the spatial dims of one stage input [B,D,C,H,W].
    pub fn downsample_stage(
        &self,
        g: &Graph<E>,
        stage: usize,
        h: NodeId,
    ) -> Result<NodeId, TensorError> {
        let shape = g.shape(h);
        if shape.len() != 5 {
            return Err(TensorError::ShapeMismatch(format!(
                "downsample wants [B,D,C,H,W], got {:?}",
                shape
            )));
        }
        if shape[3] % 2 != 0 || shape[4] % 2 != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "downsample wants even spatial dims, got {}x{}",
                shape[3], shape[4]
            )));
        }
        let x = g.permute(h, &[0, 2, 1, 3, 4])?;
        let y = self.stages[stage].down.forward(g, x)?;
        let y = g.gelu(y)?;
        g.permute(y, &[0, 2, 1, 3, 4])
    }

    /// Fold the history axis: x [B,k,C,H,W] -> [B,D,C,H/2,W/2]. Every
    /// channel runs through the same single-channel 3-D kernel whose
    /// depth spans the full history.
    pub fn initial_embed(&self, g: &Graph<E>, x: NodeId) -> Result<NodeId, TensorError> {
        let cfg = &self.cfg;
        let shape = g.shape(x);
        if shape.len() != 5
            || shape[1] != cfg.history
            || shape[2] != cfg.channels
            || shape[3] != cfg.height
            || shape[4] != cfg.width
        {
            return Err(TensorError::ShapeMismatch(format!(
                "sse input wants [B,{},{},{},{}], got {:?}",
                cfg.history, cfg.channels, cfg.height, cfg.width, shape
            )));
        }
        let b = shape[0];
        // [B,k,C,H,W] -> [B*C, 1, k, H, W]
        let x = g.permute(x, &[0, 2, 1, 3, 4])?;
        let x = g.reshape(x, &[b * cfg.channels, 1, cfg.history, cfg.height, cfg.width])?;
        let y = self.init_conv.forward(g, x)?; // [B*C, D, 1, H/2, W/2]
        let y = g.gelu(y)?;
        let (h0, w0) = self.cfg.stage_dims()?[0];
        let y = g.reshape(y, &[b, cfg.channels, cfg.feature_dim, h0, w0])?;
        g.permute(y, &[0, 2, 1, 3, 4])
    }

    /// Full forward: x [B,k,C,H,W] -> h_sse [B, L, D].
    pub fn forward(&self, g: &Graph<E>, x: NodeId) -> Result<NodeId, TensorError> {
        let cfg = &self.cfg;
        let mut h = self.initial_embed(g, x)?;
        for i in 0..self.stages.len() {
            h = self.downsample_stage(g, i, h)?;
            h = self.stages[i].dcsm.forward(g, h)?;
            h = self.stages[i].st_ssm.forward(g, h)?;
        }
        // Trailing 2-D stack over each channel frame, then flatten.
        let shape = g.shape(h);
        let (b, d, c) = (shape[0], shape[1], shape[2]);
        let (mut hh, mut ww) = (shape[3], shape[4]);
        let mut y = g.reshape(g.permute(h, &[0, 2, 1, 3, 4])?, &[b * c, d, hh, ww])?;
        for conv in &self.final_convs {
            y = conv.forward(g, y)?;
            y = g.gelu(y)?;
            let s = g.shape(y);
            hh = s[2];
            ww = s[3];
        }
        // [B*C, D, h, w] -> [B, C*h*w, D]
        let y = g.reshape(y, &[b, c, d, hh, ww])?;
        let y = g.permute(y, &[0, 1, 3, 4, 2])?;
        let l = cfg.seq_len()?;
        debug_assert_eq!(l, c * hh * ww);
        g.reshape(y, &[b, l, d])
    }
}
