//! Sparse masked-autoencoder pretraining: variance-aware spatial masking
//! plus feature-level masking, a ViT encoder/decoder pair, the
//! masked-pixel reconstruction loss, and per-timestep feature extraction
//! for the long-range temporal branch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Param};
use crate::error::TensorError;
use crate::nn::{sincos_2d, LayerNorm, Linear, TransformerBlock};
use crate::tensor::{Scalar, Tensor};

/// Sparse MAE configuration. Reference-scale defaults follow the
/// pretraining setup table (alpha 20, r_l 0.3, r_h 0.5, r_f 0.5,
/// L_enc 8, L_dec 12, D_pre 128, history m 672).
#[derive(Debug, Clone)]
pub struct MaeConfig {
    pub image_hw: usize,
    pub channels: usize,
    pub patch: usize,
    /// Top percentage of patches treated as high-variance.
    pub alpha: f64,
    /// Mask ratio on high-variance patches.
    pub r_l: f64,
    /// Mask ratio on the remaining patches; must exceed r_l.
    pub r_h: f64,
    /// Feature-level mask ratio over visible tokens.
    pub r_f: f64,
    pub d_model: usize,
    pub l_enc: usize,
    pub l_dec: usize,
    pub decoder_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Pretraining history length m (used by the pipeline).
    pub history: usize,
    /// Ablation switch: a plain uniform mask ratio replacing the
    /// variance-aware two-ratio rule (feature masking still applies).
    pub uniform_ratio: Option<f64>,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            image_hw: 256,
            channels: 10,
            patch: 16,
            alpha: 20.0,
            r_l: 0.3,
            r_h: 0.5,
            r_f: 0.5,
            d_model: 128,
            l_enc: 8,
            l_dec: 12,
            decoder_dim: 128,
            heads: 4,
            mlp_ratio: 4,
            history: 672,
            uniform_ratio: None,
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.image_hw % self.patch != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "image size {} not divisible by patch {}",
                self.image_hw, self.patch
            )));
        }
        if !(0.0..=1.0).contains(&self.r_l)
            || !(0.0..=1.0).contains(&self.r_h)
            || !(0.0..=1.0).contains(&self.r_f)
            || self.r_l > self.r_h
        {
            return Err(TensorError::InvalidArgument(
                "mask ratios want 0 <= r_l <= r_h <= 1 and 0 <= r_f <= 1".into(),
            ));
        }
        if !(0.0..=100.0).contains(&self.alpha) {
            return Err(TensorError::InvalidArgument("alpha is a percentage".into()));
        }
        if self.d_model % self.heads != 0 || self.decoder_dim % self.heads != 0 {
            return Err(TensorError::InvalidArgument(
                "model dims must divide into heads".into(),
            ));
        }
        if self.d_model % 4 != 0 || self.decoder_dim % 4 != 0 {
            return Err(TensorError::InvalidArgument(
                "model dims must divide by 4 for the positional table".into(),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_hw / self.patch
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Pixels per patch row in patch space (patch * patch * C).
    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Round half away from zero, the rounding rule for every mask count.
pub fn round_half_away(x: f64) -> usize {
    x.round().max(0.0) as usize
}

/// Per-image masking record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub patch_grid: (usize, usize),
    /// Patch ids in the top alpha% by std, in rank order.
    pub high_var_ids: Vec<usize>,
    /// Spatially masked patch ids, sorted ascending.
    pub spatial_masked_ids: Vec<usize>,
    /// Indices into the visible-token sequence masked at feature level,
    /// sorted ascending.
    pub feature_masked_ids: Vec<usize>,
}

impl MaskPlan {
    pub fn n_patches(&self) -> usize {
        self.patch_grid.0 * self.patch_grid.1
    }

    /// Patch ids not masked spatially, ascending.
    pub fn visible_ids(&self) -> Vec<usize> {
        let masked: std::collections::BTreeSet<usize> =
            self.spatial_masked_ids.iter().copied().collect();
        (0..self.n_patches()).filter(|i| !masked.contains(i)).collect()
    }
}

/// Per-patch standard deviation over all pixels and channels of the
/// patch, returned in descending order with ties broken by ascending
/// patch index.
pub fn rank_patches_by_std(
    v: &Tensor<f64>,
    patch: usize,
) -> Result<Vec<(usize, f64)>, TensorError> {
    let shape = v.shape();
    if shape.len() != 3 {
        return Err(TensorError::ShapeMismatch(format!(
            "rank_patches_by_std wants [C,H,W], got {:?}",
            shape
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h % patch != 0 || w % patch != 0 {
        return Err(TensorError::InvalidArgument(format!(
            "dims {h}x{w} not divisible by patch {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(gh * gw);
    let n = (c * patch * patch) as f64;
    for pr in 0..gh {
        for pc in 0..gw {
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for ci in 0..c {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let val =
                            v.data()[(ci * h + pr * patch + dy) * w + pc * patch + dx];
                        sum += val;
                        sumsq += val * val;
                    }
                }
            }
            let mean = sum / n;
            let var = (sumsq / n - mean * mean).max(0.0);
            out.push((pr * gw + pc, var.sqrt()));
        }
    }
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(out)
}

fn sample_subset(candidates: &[usize], count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let picked = rand::seq::index::sample(rng, candidates.len(), count.min(candidates.len()));
    let mut ids: Vec<usize> = picked.iter().map(|i| candidates[i]).collect();
    ids.sort_unstable();
    ids
}

/// Two-phase masking: high-variance patches (top alpha%) masked at the
/// lower ratio r_l, the rest at r_h; then round(r_f * visible) token
/// positions are masked at feature level. All counts use
/// round-half-away-from-zero. Deterministic per seed.
pub fn two_phase_mask(
    v: &Tensor<f64>,
    cfg: &MaeConfig,
    seed: u64,
) -> Result<MaskPlan, TensorError> {
    cfg.validate()?;
    let ranking = rank_patches_by_std(v, cfg.patch)?;
    let grid = cfg.grid();
    let total = ranking.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (high_var_ids, spatial_masked_ids) = if let Some(rho) = cfg.uniform_ratio {
        let all: Vec<usize> = (0..total).collect();
        let n_mask = round_half_away(rho * total as f64);
        (Vec::new(), sample_subset(&all, n_mask, &mut rng))
    } else {
        let k_high = round_half_away(cfg.alpha / 100.0 * total as f64);
        let high: Vec<usize> = ranking[..k_high].iter().map(|(i, _)| *i).collect();
        let low: Vec<usize> = ranking[k_high..].iter().map(|(i, _)| *i).collect();
        let n_high = round_half_away(cfg.r_l * k_high as f64);
        let n_low = round_half_away(cfg.r_h * low.len() as f64);
        let mut masked = sample_subset(&high, n_high, &mut rng);
        masked.extend(sample_subset(&low, n_low, &mut rng));
        masked.sort_unstable();
        (high, masked)
    };
    let n_visible = total - spatial_masked_ids.len();
    let n_feat = round_half_away(cfg.r_f * n_visible as f64);
    let visible_positions: Vec<usize> = (0..n_visible).collect();
    let feature_masked_ids = sample_subset(&visible_positions, n_feat, &mut rng);
    Ok(MaskPlan {
        patch_grid: (grid, grid),
        high_var_ids,
        spatial_masked_ids,
        feature_masked_ids,
    })
}

/// Split [C,H,W] pixels into rows of patch pixels:
/// row p = flattened (c, dy, dx) of patch p in row-major grid order.
pub fn patchify<E: Scalar>(v: &Tensor<E>, patch: usize) -> Tensor<E> {
    let shape = v.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (gh, gw) = (h / patch, w / patch);
    let plen = c * patch * patch;
    let mut out = vec![E::zero(); gh * gw * plen];
    for pr in 0..gh {
        for pc in 0..gw {
            let row = pr * gw + pc;
            let mut k = 0usize;
            for ci in 0..c {
                for dy in 0..patch {
                    for dx in 0..patch {
                        out[row * plen + k] =
                            v.data()[(ci * h + pr * patch + dy) * w + pc * patch + dx];
                        k += 1;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[gh * gw, plen], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<E: Scalar>(patches: &Tensor<E>, patch: usize, c: usize, hw: usize) -> Tensor<E> {
    let gw = hw / patch;
    let plen = c * patch * patch;
    let mut out = vec![E::zero(); c * hw * hw];
    for row in 0..patches.shape()[0] {
        let (pr, pc) = (row / gw, row % gw);
        let mut k = 0usize;
        for ci in 0..c {
            for dy in 0..patch {
                for dx in 0..patch {
                    out[(ci * hw + pr * patch + dy) * hw + pc * patch + dx] =
                        patches.data()[row * plen + k];
                    k += 1;
                }
            }
        }
    }
    Tensor::from_vec(&[c, hw, hw], out)
}

/// Mean squared error over the pixels of spatially masked patches only;
/// the independent value-level form used by evaluation and tests.
pub fn masked_mse_value<E: Scalar>(
    target_patches: &Tensor<E>,
    recon_patches: &Tensor<E>,
    masked_ids: &[usize],
) -> f64 {
    let plen = target_patches.shape()[1];
    let mut acc = 0.0f64;
    for &row in masked_ids {
        for k in 0..plen {
            let d = target_patches.data()[row * plen + k].as_f64()
                - recon_patches.data()[row * plen + k].as_f64();
            acc += d * d;
        }
    }
    acc / (masked_ids.len() * plen) as f64
}

/// The Sparse MAE model: asymmetric ViT encoder/decoder with a learned
/// feature-mask embedding (phase 2) and a learned decoder mask token.
#[derive(Debug, Clone)]
pub struct SparseMae<E: Scalar> {
    pub cfg: MaeConfig,
    pub patch_embed: Linear<E>,
    pos_enc: Tensor<E>,
    pub enc_blocks: Vec<TransformerBlock<E>>,
    pub enc_ln: LayerNorm<E>,
    pub feature_mask_token: Param<E>,
    pub dec_proj: Linear<E>,
    pub mask_token: Param<E>,
    pos_dec: Tensor<E>,
    pub dec_blocks: Vec<TransformerBlock<E>>,
    pub dec_ln: LayerNorm<E>,
    pub head: Linear<E>,
}

impl<E: Scalar> SparseMae<E> {
    pub fn init(cfg: &MaeConfig, rng: &mut impl rand::Rng) -> Result<Self, TensorError> {
        cfg.validate()?;
        let grid = cfg.grid();
        let plen = cfg.patch_len();
        let enc_blocks = (0..cfg.l_enc)
            .map(|i| {
                TransformerBlock::init(
                    &format!("mae.encoder.block{i}"),
                    cfg.d_model,
                    cfg.heads,
                    cfg.mlp_ratio,
                    rng,
                )
            })
            .collect();
        let dec_blocks = (0..cfg.l_dec)
            .map(|i| {
                TransformerBlock::init(
                    &format!("mae.decoder.block{i}"),
                    cfg.decoder_dim,
                    cfg.heads,
                    cfg.mlp_ratio,
                    rng,
                )
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed: Linear::init("mae.encoder.patch_embed", plen, cfg.d_model, rng),
            pos_enc: sincos_2d(grid, grid, cfg.d_model),
            enc_blocks,
            enc_ln: LayerNorm::init("mae.encoder.ln", cfg.d_model),
            feature_mask_token: Param::new(
                "mae.encoder.feature_mask_token",
                Tensor::zeros(&[cfg.d_model]),
            ),
            dec_proj: Linear::init("mae.decoder.proj", cfg.d_model, cfg.decoder_dim, rng),
            mask_token: Param::new("mae.decoder.mask_token", Tensor::zeros(&[cfg.decoder_dim])),
            pos_dec: sincos_2d(grid, grid, cfg.decoder_dim),
            dec_blocks,
            dec_ln: LayerNorm::init("mae.decoder.ln", cfg.decoder_dim),
            head: Linear::init("mae.decoder.head", cfg.decoder_dim, plen, rng),
        })
    }

    pub fn encoder_params(&self) -> Vec<&Param<E>> {
        let mut p = self.patch_embed.params();
        for b in &self.enc_blocks {
            p.extend(b.params());
        }
        p.extend(self.enc_ln.params());
        p.push(&self.feature_mask_token);
        p
    }

    pub fn encoder_params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut p = self.patch_embed.params_mut();
        for b in &mut self.enc_blocks {
            p.extend(b.params_mut());
        }
        p.extend(self.enc_ln.params_mut());
        p.push(&mut self.feature_mask_token);
        p
    }

    pub fn decoder_params(&self) -> Vec<&Param<E>> {
        let mut p = self.dec_proj.params();
        p.push(&self.mask_token);
        for b in &self.dec_blocks {
            p.extend(b.params());
        }
        p.extend(self.dec_ln.params());
        p.extend(self.head.params());
        p
    }

    pub fn decoder_params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut p = self.dec_proj.params_mut();
        p.push(&mut self.mask_token);
        for b in &mut self.dec_blocks {
            p.extend(b.params_mut());
        }
        p.extend(self.dec_ln.params_mut());
        p.extend(self.head.params_mut());
        p
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        let mut p = self.encoder_params();
        p.extend(self.decoder_params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut p = self.patch_embed.params_mut();
        for b in &mut self.enc_blocks {
            p.extend(b.params_mut());
        }
        p.extend(self.enc_ln.params_mut());
        p.push(&mut self.feature_mask_token);
        p.extend(self.dec_proj.params_mut());
        p.push(&mut self.mask_token);
        for b in &mut self.dec_blocks {
            p.extend(b.params_mut());
        }
        p.extend(self.dec_ln.params_mut());
        p.extend(self.head.params_mut());
        p
    }

    fn run_encoder(&self, g: &Graph<E>, tokens: NodeId) -> Result<NodeId, TensorError> {
        let mut x = tokens;
        for b in &self.enc_blocks {
            x = b.forward(g, x)?;
        }
        self.enc_ln.forward(g, x)
    }

    /// One masked reconstruction step over a batch of images, each with
    /// its own mask plan (all plans share the same counts by
    /// construction). Returns (reconstructed patches [B,P,plen],
    /// masked-pixel MSE) as graph nodes.
    pub fn mae_step(
        &self,
        g: &Graph<E>,
        images: &[Tensor<E>],
        plans: &[MaskPlan],
    ) -> Result<(NodeId, NodeId), TensorError> {
        if images.is_empty() || images.len() != plans.len() {
            return Err(TensorError::InvalidArgument(
                "mae_step wants one plan per image".into(),
            ));
        }
        let cfg = &self.cfg;
        let b = images.len();
        let total = cfg.n_patches();
        let plen = cfg.patch_len();
        let n_masked = plans[0].spatial_masked_ids.len();
        let n_vis = total - n_masked;
        for plan in plans {
            if plan.spatial_masked_ids.len() != n_masked
                || plan.n_patches() != total
                || plan.feature_masked_ids.len() != plans[0].feature_masked_ids.len()
            {
                return Err(TensorError::InvalidArgument(
                    "mask plans disagree on counts".into(),
                ));
            }
        }
        // Patchify at the value level; images are constants on the tape.
        let mut target = vec![E::zero(); b * total * plen];
        let mut visible = vec![E::zero(); b * n_vis * plen];
        let mut pos_vis = vec![E::zero(); b * n_vis * cfg.d_model];
        let mut feat_keep = vec![E::one(); b * n_vis];
        let mut dec_perm: Vec<Vec<usize>> = Vec::with_capacity(b);
        let mut pos_dec_rows = vec![E::zero(); b * total * cfg.decoder_dim];
        for (bi, (img, plan)) in images.iter().zip(plans).enumerate() {
            if img.shape() != [cfg.channels, cfg.image_hw, cfg.image_hw] {
                return Err(TensorError::ShapeMismatch(format!(
                    "mae_step image wants [{},{},{}], got {:?}",
                    cfg.channels,
                    cfg.image_hw,
                    cfg.image_hw,
                    img.shape()
                )));
            }
            let patches = patchify(img, cfg.patch);
            target[bi * total * plen..(bi + 1) * total * plen].copy_from_slice(patches.data());
            let vis_ids = plan.visible_ids();
            for (vi, &pid) in vis_ids.iter().enumerate() {
                visible[(bi * n_vis + vi) * plen..(bi * n_vis + vi + 1) * plen]
                    .copy_from_slice(&patches.data()[pid * plen..(pid + 1) * plen]);
                pos_vis[(bi * n_vis + vi) * cfg.d_model..(bi * n_vis + vi + 1) * cfg.d_model]
                    .copy_from_slice(
                        &self.pos_enc.data()[pid * cfg.d_model..(pid + 1) * cfg.d_model],
                    );
            }
            for &fi in &plan.feature_masked_ids {
                feat_keep[bi * n_vis + fi] = E::zero();
            }
            // Position of each patch in [visible..., masked...] order.
            let mut perm = vec![0usize; total];
            for (vi, &pid) in vis_ids.iter().enumerate() {
                perm[pid] = vi;
            }
            for (mi, &pid) in plan.spatial_masked_ids.iter().enumerate() {
                perm[pid] = n_vis + mi;
            }
            dec_perm.push(perm);
            pos_dec_rows[bi * total * cfg.decoder_dim..(bi + 1) * total * cfg.decoder_dim]
                .copy_from_slice(self.pos_dec.data());
        }
        let target = Tensor::from_vec(&[b, total, plen], target);
        let visible = g.constant(Tensor::from_vec(&[b, n_vis, plen], visible));
        let pos_vis = g.constant(Tensor::from_vec(&[b, n_vis, cfg.d_model], pos_vis));

        // Encoder over visible tokens only.
        let emb = self.patch_embed.forward(g, visible)?;
        let emb = g.add(emb, pos_vis)?;
        let latent = self.run_encoder(g, emb)?;

        // Phase-2 feature masking: replace selected visible latents with
        // the learned feature-mask embedding.
        let keep = g.constant(Tensor::from_vec(&[b, n_vis, 1], feat_keep.clone()));
        let drop = g.constant(Tensor::from_vec(
            &[b, n_vis, 1],
            feat_keep.iter().map(|&k| E::one() - k).collect(),
        ));
        let token = g.param(&self.feature_mask_token);
        let token_rows = g.reshape(
            g.repeat_rows(token, b * n_vis)?,
            &[b, n_vis, cfg.d_model],
        )?;
        let latent = g.add(
            g.mul_bcast(latent, keep)?,
            g.mul_bcast(token_rows, drop)?,
        )?;

        // Decoder: project, append mask tokens, restore patch order.
        let dec_vis = self.dec_proj.forward(g, latent)?;
        let mask_tok = g.param(&self.mask_token);
        let mask_rows = g.reshape(
            g.repeat_rows(mask_tok, b * n_masked)?,
            &[b, n_masked, cfg.decoder_dim],
        )?;
        let stacked = g.concat(&[dec_vis, mask_rows], 1)?;
        let ordered = g.gather_rows(stacked, &dec_perm)?;
        let pos_dec = g.constant(Tensor::from_vec(
            &[b, total, cfg.decoder_dim],
            pos_dec_rows,
        ));
        let mut x = g.add(ordered, pos_dec)?;
        for blk in &self.dec_blocks {
            x = blk.forward(g, x)?;
        }
        let x = self.dec_ln.forward(g, x)?;
        let recon = self.head.forward(g, x)?; // [B, total, plen]

        // Masked-pixel MSE: only spatially masked patches contribute.
        let masked_ids: Vec<Vec<usize>> = plans
            .iter()
            .map(|p| p.spatial_masked_ids.clone())
            .collect();
        let recon_masked = g.gather_rows(recon, &masked_ids)?;
        let target_node = g.constant(target);
        let target_masked = g.gather_rows(target_node, &masked_ids)?;
        let diff = g.sub(recon_masked, target_masked)?;
        let sq = g.mul(diff, diff)?;
        let loss = g.scale(g.sum_all(sq)?, 1.0 / (b * n_masked * plen) as f64)?;
        Ok((recon, loss))
    }

    /// Encode frames [F,C,H,W] with the full (unmasked) token grid and
    /// mean-pool tokens into one feature vector per frame -> [F, D_pre].
    /// Frames are independent batch elements, so there is no
    /// cross-timestep mixing.
    pub fn encode_frames(&self, g: &Graph<E>, frames: &Tensor<E>) -> Result<NodeId, TensorError> {
        let cfg = &self.cfg;
        let shape = frames.shape();
        if shape.len() != 4 || shape[1] != cfg.channels || shape[2] != cfg.image_hw || shape[3] != cfg.image_hw
        {
            return Err(TensorError::ShapeMismatch(format!(
                "encode_frames wants [F,{},{},{}], got {:?}",
                cfg.channels, cfg.image_hw, cfg.image_hw, shape
            )));
        }
        let f = shape[0];
        let total = cfg.n_patches();
        let plen = cfg.patch_len();
        let mut patches = vec![E::zero(); f * total * plen];
        for fi in 0..f {
            let img = Tensor::from_vec(
                &[cfg.channels, cfg.image_hw, cfg.image_hw],
                frames.data()[fi * cfg.channels * cfg.image_hw * cfg.image_hw
                    ..(fi + 1) * cfg.channels * cfg.image_hw * cfg.image_hw]
                    .to_vec(),
            );
            patches[fi * total * plen..(fi + 1) * total * plen]
                .copy_from_slice(patchify(&img, cfg.patch).data());
        }
        let tokens = g.constant(Tensor::from_vec(&[f, total, plen], patches));
        let emb = self.patch_embed.forward(g, tokens)?;
        let pos = g.constant(
            self.pos_enc
                .reshape(&[1, total, cfg.d_model])
                .expect("pos table shape"),
        );
        let emb = g.add_bcast(emb, pos)?;
        let latent = self.run_encoder(g, emb)?;
        g.mean_axis(latent, 1)
    }

    /// Per-timestep features for a pretraining window [m,C,H,W] -> [m,D_pre],
    /// computed forward-only.
    pub fn encode_sequence(&self, x_pre: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        let g: Graph<E> = Graph::no_grad();
        let out = self.encode_frames(&g, x_pre)?;
        Ok(g.value(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::derive_seed;
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> MaeConfig {
        MaeConfig {
            image_hw: 32,
            channels: 2,
            patch: 8,
            d_model: 16,
            l_enc: 1,
            l_dec: 1,
            decoder_dim: 16,
            heads: 2,
            mlp_ratio: 2,
            history: 8,
            ..MaeConfig::default()
        }
    }

    fn rand_image(c: usize, hw: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            &[c, hw, hw],
            (0..c * hw * hw).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn ranking_constant_image_is_index_order() {
        let v = Tensor::full(&[1, 16, 16], 0.7);
        let ranked = rank_patches_by_std(&v, 8).unwrap();
        let ids: Vec<usize> = ranked.iter().map(|(i, _)| *i).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
        assert!(ranked.iter().all(|(_, s)| *s == 0.0));
    }

    #[test]
    fn ranking_bright_blob_comes_first() {
        let mut v = Tensor::<f64>::zeros(&[1, 24, 24]);
        // Blob inside patch 5 of the 3x3 grid (row 1, col 2).
        for dy in 0..4 {
            for dx in 0..4 {
                v.data_mut()[(8 + 2 + dy) * 24 + 16 + 2 + dx] = 5.0;
            }
        }
        let ranked = rank_patches_by_std(&v, 8).unwrap();
        assert_eq!(ranked[0].0, 5);
        assert!(ranked[0].1 > 0.0);
    }

    #[test]
    fn ranking_matches_independent_std_oracle() {
        let v = rand_image(3, 16, 42);
        let ranked = rank_patches_by_std(&v, 8).unwrap();
        // Independent per-patch std.
        for &(pid, std) in &ranked {
            let (pr, pc) = (pid / 2, pid % 2);
            let mut vals = Vec::new();
            for c in 0..3 {
                for dy in 0..8 {
                    for dx in 0..8 {
                        vals.push(v.data()[(c * 16 + pr * 8 + dy) * 16 + pc * 8 + dx]);
                    }
                }
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 =
                vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / vals.len() as f64;
            assert!((std - var.sqrt()).abs() < 1e-12);
        }
        // Ordering is descending.
        for w in ranked.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
    }

    #[test]
    fn mask_counts_match_worked_example() {
        // 64x64 image, patch 8 -> 64 patches; alpha 20 -> 13 high-var;
        // r_l 0.3 -> 4 masked high; r_h 0.5 -> 26 of the other 51; total 30.
        let cfg = MaeConfig {
            image_hw: 64,
            channels: 1,
            patch: 8,
            d_model: 16,
            decoder_dim: 16,
            heads: 2,
            l_enc: 1,
            l_dec: 1,
            ..MaeConfig::default()
        };
        let v = rand_image(1, 64, 3);
        let plan = two_phase_mask(&v, &cfg, 0).unwrap();
        assert_eq!(plan.high_var_ids.len(), 13);
        let high: std::collections::BTreeSet<usize> =
            plan.high_var_ids.iter().copied().collect();
        let masked_high = plan
            .spatial_masked_ids
            .iter()
            .filter(|i| high.contains(i))
            .count();
        assert_eq!(masked_high, 4);
        assert_eq!(plan.spatial_masked_ids.len() - masked_high, 26);
        assert_eq!(plan.spatial_masked_ids.len(), 30);
        // Feature phase: round(0.5 * 34) = 17.
        assert_eq!(plan.feature_masked_ids.len(), 17);
        // Duplicate-free by construction.
        let unique: std::collections::BTreeSet<usize> =
            plan.spatial_masked_ids.iter().copied().collect();
        assert_eq!(unique.len(), plan.spatial_masked_ids.len());
    }

    #[test]
    fn zero_ratios_mask_nothing() {
        let cfg = MaeConfig {
            r_l: 0.0,
            r_h: 0.0,
            r_f: 0.0,
            ..small_cfg()
        };
        let v = rand_image(2, 32, 4);
        let plan = two_phase_mask(&v, &cfg, 9).unwrap();
        assert!(plan.spatial_masked_ids.is_empty());
        assert!(plan.feature_masked_ids.is_empty());
    }

    #[test]
    fn masking_is_deterministic_per_seed() {
        let cfg = small_cfg();
        let v = rand_image(2, 32, 5);
        let a = two_phase_mask(&v, &cfg, 11).unwrap();
        let b = two_phase_mask(&v, &cfg, 11).unwrap();
        assert_eq!(a, b);
        let c = two_phase_mask(&v, &cfg, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn high_variance_patches_masked_at_lower_empirical_rate() {
        // Over many seeds the empirical mask rates approach r_l and r_h.
        let cfg = MaeConfig {
            image_hw: 64,
            channels: 1,
            patch: 8,
            d_model: 16,
            decoder_dim: 16,
            heads: 2,
            l_enc: 1,
            l_dec: 1,
            ..MaeConfig::default()
        };
        let v = rand_image(1, 64, 6);
        let high: std::collections::BTreeSet<usize> = two_phase_mask(&v, &cfg, 0)
            .unwrap()
            .high_var_ids
            .iter()
            .copied()
            .collect();
        let trials = 10_000;
        let mut high_masked = 0usize;
        let mut low_masked = 0usize;
        for s in 0..trials {
            let plan = two_phase_mask(&v, &cfg, derive_seed(99, "rate", s)).unwrap();
            high_masked += plan
                .spatial_masked_ids
                .iter()
                .filter(|i| high.contains(i))
                .count();
            low_masked += plan.spatial_masked_ids.len()
                - plan.spatial_masked_ids.iter().filter(|i| high.contains(i)).count();
        }
        let high_rate = high_masked as f64 / (trials * 13) as f64;
        let low_rate = low_masked as f64 / (trials * 51) as f64;
        assert!(high_rate < low_rate);
        assert!((high_rate - cfg.r_l).abs() < 0.02, "high rate {high_rate}");
        assert!((low_rate - cfg.r_h).abs() < 0.02, "low rate {low_rate}");
    }

    #[test]
    fn patchify_roundtrip() {
        let v = rand_image(2, 32, 7);
        let p = patchify(&v, 8);
        assert_eq!(p.shape(), &[16, 128]);
        let back = unpatchify(&p, 8, 2, 32);
        assert!(back.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn masked_loss_support() {
        // Exact target at masked rows -> 0; perturbing unmasked rows
        // leaves the loss unchanged.
        let cfg = small_cfg();
        let v = rand_image(2, 32, 8);
        let plan = two_phase_mask(&v, &cfg, 13).unwrap();
        let target = patchify(&v, cfg.patch);
        let mut recon = target.clone();
        assert_eq!(masked_mse_value(&target, &recon, &plan.spatial_masked_ids), 0.0);
        let visible = plan.visible_ids();
        let plen = cfg.patch_len();
        for &vid in &visible {
            recon.data_mut()[vid * plen] += 123.0;
        }
        assert_eq!(masked_mse_value(&target, &recon, &plan.spatial_masked_ids), 0.0);
        recon.data_mut()[plan.spatial_masked_ids[0] * plen] += 1.0;
        let bumped = masked_mse_value(&target, &recon, &plan.spatial_masked_ids);
        assert!((bumped - 1.0 / (plan.spatial_masked_ids.len() * plen) as f64).abs() < 1e-12);
    }

    #[test]
    fn mae_step_loss_matches_value_oracle_and_grad_support() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model: SparseMae<f64> = SparseMae::init(&cfg, &mut rng).unwrap();
        let images = vec![rand_image(2, 32, 31), rand_image(2, 32, 32)];
        let plans: Vec<MaskPlan> = images
            .iter()
            .enumerate()
            .map(|(i, v)| two_phase_mask(v, &cfg, 100 + i as u64).unwrap())
            .collect();
        let g: Graph<f64> = Graph::new();
        let (recon, loss) = model.mae_step(&g, &images, &plans).unwrap();
        // Loss equals the independent per-pixel accumulation over both images.
        let rv = g.value(recon);
        let total = cfg.n_patches();
        let plen = cfg.patch_len();
        let mut oracle = 0.0;
        for (bi, (img, plan)) in images.iter().zip(&plans).enumerate() {
            let target = patchify(img, cfg.patch);
            let r = Tensor::from_vec(
                &[total, plen],
                rv.data()[bi * total * plen..(bi + 1) * total * plen].to_vec(),
            );
            oracle += masked_mse_value(&target, &r, &plan.spatial_masked_ids);
        }
        oracle /= images.len() as f64;
        assert!((g.value(loss).data()[0] - oracle).abs() < 1e-12);
        // Gradient w.r.t. the reconstruction is zero at unmasked patches:
        // the decoder head bias gradient only sees masked rows. Check via
        // the recon-node gradient directly.
        let grads = g.backward_retaining(loss).unwrap();
        let grecon = grads.node(recon).expect("recon gradient");
        for (bi, plan) in plans.iter().enumerate() {
            for vid in plan.visible_ids() {
                for k in 0..plen {
                    assert_eq!(grecon.data()[(bi * total + vid) * plen + k], 0.0);
                }
            }
            for &mid in &plan.spatial_masked_ids {
                let row = &grecon.data()[(bi * total + mid) * plen..(bi * total + mid + 1) * plen];
                assert!(row.iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn encoder_sees_only_unmasked_tokens() {
        // Changing pixels inside masked patches must not change the loss
        // through the encoder input (only through the target), so the
        // reconstruction itself must be identical.
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let model: SparseMae<f64> = SparseMae::init(&cfg, &mut rng).unwrap();
        let base = rand_image(2, 32, 41);
        let plan = two_phase_mask(&base, &cfg, 7).unwrap();
        let mut altered = base.clone();
        let plen = cfg.patch_len();
        let hw = cfg.image_hw;
        // Rewrite every pixel of the first masked patch.
        let pid = plan.spatial_masked_ids[0];
        let (pr, pc) = (pid / cfg.grid(), pid % cfg.grid());
        for c in 0..cfg.channels {
            for dy in 0..cfg.patch {
                for dx in 0..cfg.patch {
                    altered.data_mut()[(c * hw + pr * cfg.patch + dy) * hw + pc * cfg.patch + dx] =
                        9.0;
                }
            }
        }
        let g: Graph<f64> = Graph::no_grad();
        let (r1, _) = model.mae_step(&g, &[base], &[plan.clone()]).unwrap();
        let (r2, _) = model.mae_step(&g, &[altered], &[plan]).unwrap();
        assert!(g.value(r1).max_abs_diff(&g.value(r2)) < 1e-12);
        let _ = plen;
    }

    #[test]
    fn encode_sequence_shape_and_independence() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let model: SparseMae<f64> = SparseMae::init(&cfg, &mut rng).unwrap();
        let m = 4;
        let mut frames = Tensor::<f64>::zeros(&[m, 2, 32, 32]);
        let frame_len = 2 * 32 * 32;
        for fi in 0..m {
            let img = rand_image(2, 32, 60 + fi as u64);
            frames.data_mut()[fi * frame_len..(fi + 1) * frame_len].copy_from_slice(img.data());
        }
        // Duplicate frame 1 into frame 3.
        let src = frames.data()[frame_len..2 * frame_len].to_vec();
        frames.data_mut()[3 * frame_len..4 * frame_len].copy_from_slice(&src);
        let h = model.encode_sequence(&frames).unwrap();
        assert_eq!(h.shape(), &[m, cfg.d_model]);
        for j in 0..cfg.d_model {
            assert_eq!(h.data()[cfg.d_model + j], h.data()[3 * cfg.d_model + j]);
        }
    }

    #[test]
    fn encoder_features_survive_checkpoint_roundtrip() {
        use crate::checkpoint::{load_params, save_params, MAGIC_SMAE};
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let model: SparseMae<f32> = SparseMae::init(&cfg, &mut rng).unwrap();
        let mut frames = Tensor::<f32>::zeros(&[2, 2, 32, 32]);
        let img = rand_image(2, 32, 71);
        let n = 2 * 32 * 32;
        for fi in 0..2 {
            for k in 0..n {
                frames.data_mut()[fi * n + k] = img.data()[k] as f32;
            }
        }
        let before = model.encode_sequence(&frames).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.smae");
        save_params(&path, MAGIC_SMAE, &model.params()).unwrap();
        let mut reloaded: SparseMae<f32> =
            SparseMae::init(&cfg, &mut ChaCha8Rng::seed_from_u64(999)).unwrap();
        load_params(&path, MAGIC_SMAE, &mut reloaded.params_mut()).unwrap();
        let after = reloaded.encode_sequence(&frames).unwrap();
        assert_eq!(before.data(), after.data());
    }
}
