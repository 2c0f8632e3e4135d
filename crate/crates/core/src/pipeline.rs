//! End-to-end commands: dataset generation, sparse-MAE pretraining,
//! two-stage training with per-epoch validation GMGS selection, and
//! evaluation with the full verification report. Everything is driven by
//! a [`RunConfig`] plus a seed and runs single-threaded and
//! deterministically.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::autodiff::{Graph, Param};
use crate::checkpoint::{load_params, save_params, MAGIC_MODEL, MAGIC_SMAE};
use crate::classes::{FlareClass, NUM_CLASSES};
use crate::config::RunConfig;
use crate::data::{
    augment, generate_dataset, split_folds, standardize_sample, write_samples, Dataset,
    FoldStats, Manifest, SolarSample,
};
use crate::data::shard::FoldWindows;
use crate::data::splits::crt_resample;
use crate::error::{DataError, MetricsError, TrainError};
use crate::events::EventLog;
use crate::mae::{two_phase_mask, MaskPlan, SparseMae};
use crate::metrics::{
    argmax_tie_low, evaluate_predictions, scoring_matrix, write_prediction_file, ContingencyTable,
    MetricsReport, PredictionRecord, ScoringMatrix,
};
use crate::model::FlareModel;
use crate::objectives::total_loss;
use crate::optim::AdamW;
use crate::seeding::derive_seed;
use crate::tensor::Tensor;

/// Training element type.
type Ef = f32;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const LATENT_FILE: &str = "latent.json";

fn fold_dir(out_dir: &Path, fold: usize) -> PathBuf {
    out_dir.join(format!("fold{fold}"))
}

fn smae_path(out_dir: &Path, fold: usize) -> PathBuf {
    fold_dir(out_dir, fold).join("smae.ckpt")
}

fn model_path(out_dir: &Path, fold: usize) -> PathBuf {
    fold_dir(out_dir, fold).join("model.ckpt")
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct GenerateReport {
    pub n_samples: usize,
    pub dropped_missing: usize,
    pub class_counts: [u64; 4],
    pub dir: PathBuf,
}

/// Build the dataset directory: shards, frames, latent log, fold
/// definitions, per-fold standardization statistics, manifest, and the
/// resolved config.
pub fn cmd_generate(cfg: &RunConfig, log: &mut EventLog) -> Result<GenerateReport, TrainError> {
    let gen_cfg = cfg.generator();
    let dir = PathBuf::from(&cfg.data_dir);
    std::fs::create_dir_all(&dir)?;
    let ds = generate_dataset(&gen_cfg)?;
    let timestamps: Vec<i64> = ds.samples.iter().map(|s| s.timestamp).collect();
    let folds = split_folds(&timestamps, gen_cfg.year_steps)?;

    // Per-fold, per-channel statistics over non-missing train-window frames.
    let mut standardization = Vec::new();
    for fold in &folds {
        let mut sums = vec![0.0f64; gen_cfg.channels];
        let mut sq = vec![0.0f64; gen_cfg.channels];
        let mut counts = vec![0u64; gen_cfg.channels];
        for (t, frame) in ds.frames.iter().enumerate() {
            let ts = t as i64;
            if !fold.train_window.contains(ts) {
                continue;
            }
            let px = gen_cfg.out_hw * gen_cfg.out_hw;
            for c in 0..gen_cfg.channels {
                if ds.frame_missing[t][c] {
                    continue;
                }
                for &v in &frame.data()[c * px..(c + 1) * px] {
                    sums[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
                counts[c] += px as u64;
            }
        }
        let mean: Vec<f64> = (0..gen_cfg.channels)
            .map(|c| sums[c] / counts[c].max(1) as f64)
            .collect();
        let std: Vec<f64> = (0..gen_cfg.channels)
            .map(|c| {
                let var = sq[c] / counts[c].max(1) as f64 - mean[c] * mean[c];
                var.max(1e-24).sqrt()
            })
            .collect();
        standardization.push(FoldStats {
            fold: fold.fold,
            mean,
            std,
        });
    }

    // Frames as single-step records (role "frames").
    let frame_records: Vec<SolarSample> = ds
        .frames
        .iter()
        .enumerate()
        .map(|(t, frame)| SolarSample {
            images: frame
                .reshape(&[1, gen_cfg.channels, gen_cfg.out_hw, gen_cfg.out_hw])
                .expect("frame shape"),
            // Frames before the first sample carry its label as a filler;
            // frame labels are never read downstream.
            label: FlareClass::O,
            timestamp: t as i64,
            missing: ds.frame_missing[t].clone(),
        })
        .collect();
    let mut shards = write_samples(&dir, "samples", &ds.samples)?;
    shards.extend(write_samples(&dir, "frames", &frame_records)?);

    let latent_file = std::fs::File::create(dir.join(LATENT_FILE))?;
    serde_json::to_writer(std::io::BufWriter::new(latent_file), &ds.latent)
        .map_err(|e| DataError::Manifest(format!("latent log: {e}")))?;

    let mut class_counts = [0u64; 4];
    for s in &ds.samples {
        class_counts[s.label.index()] += 1;
    }
    let manifest = Manifest {
        version: 1,
        code_version: CODE_VERSION.to_string(),
        seed: cfg.seed,
        n_samples: ds.samples.len(),
        dropped_missing: ds.dropped.len(),
        history: gen_cfg.history,
        pre_history: gen_cfg.pre_history,
        horizon: gen_cfg.horizon,
        channels: gen_cfg.channels,
        image_hw: gen_cfg.out_hw,
        year_steps: gen_cfg.year_steps,
        class_counts,
        shards,
        folds: folds
            .iter()
            .map(|f| FoldWindows {
                fold: f.fold,
                train: f.train_window,
                val: f.val_window,
                test: f.test_window,
            })
            .collect(),
        standardization,
        latent_path: LATENT_FILE.to_string(),
    };
    manifest.save(&dir)?;
    cfg.save(&dir.join("resolved.cfg"))
        .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    for p in &ds.dropped {
        log.emit(
            "sample_dropped",
            &[("timestamp", json!(p)), ("reason", json!("missing_over_25pct"))],
        );
    }
    log.emit(
        "generate_done",
        &[
            ("n_samples", json!(ds.samples.len())),
            ("dropped", json!(ds.dropped.len())),
            ("class_counts", json!(class_counts)),
        ],
    );
    Ok(GenerateReport {
        n_samples: ds.samples.len(),
        dropped_missing: ds.dropped.len(),
        class_counts,
        dir,
    })
}

// ---------------------------------------------------------------------------
// shared fold loading
// ---------------------------------------------------------------------------

/// Everything one fold needs in memory, standardized with its train
/// statistics.
pub struct FoldData {
    pub windows: FoldWindows,
    pub stats: FoldStats,
    pub train: Vec<SolarSample>,
    pub val: Vec<SolarSample>,
    pub test: Vec<SolarSample>,
    /// Standardized frame pixels indexed by stream position.
    pub frames: Vec<Tensor<f32>>, // each [C,H,W]
}

pub fn load_fold(ds: &Dataset, fold: usize) -> Result<FoldData, TrainError> {
    let windows = ds.manifest.fold(fold)?.clone();
    let stats = ds.manifest.stats(fold)?.clone();
    let samples = ds.load_samples()?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for mut s in samples {
        standardize_sample(&mut s, &stats.mean, &stats.std);
        if windows.train.contains(s.timestamp) {
            train.push(s);
        } else if windows.val.contains(s.timestamp) {
            val.push(s);
        } else if windows.test.contains(s.timestamp) {
            test.push(s);
        }
    }
    let mut frames = Vec::new();
    for mut f in ds.load_frames()? {
        if f.timestamp as usize != frames.len() {
            return Err(TrainError::Data(DataError::Manifest(format!(
                "frame stream has a gap at position {}",
                frames.len()
            ))));
        }
        standardize_sample(&mut f, &stats.mean, &stats.std);
        let s = f.images.shape().to_vec();
        frames.push(f.images.reshape(&[s[1], s[2], s[3]]).expect("frame rank"));
    }
    Ok(FoldData {
        windows,
        stats,
        train,
        val,
        test,
        frames,
    })
}

fn batch_tensor(samples: &[&SolarSample]) -> Tensor<Ef> {
    let (k, c, h, w) = samples[0].dims();
    let mut data = Vec::with_capacity(samples.len() * k * c * h * w);
    for s in samples {
        data.extend_from_slice(s.images.data());
    }
    Tensor::from_vec(&[samples.len(), k, c, h, w], data)
}

/// Stack frames t-m+1..=t into one pretraining window [m,C,H,W].
fn frame_window(frames: &[Tensor<f32>], t: usize, m: usize) -> Tensor<Ef> {
    let shape = frames[0].shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut data = Vec::with_capacity(m * c * h * w);
    for pos in (t + 1 - m)..=t {
        data.extend_from_slice(frames[pos].data());
    }
    Tensor::from_vec(&[m, c, h, w], data)
}

/// Per-timestep feature cache [positions, D_pre] from a frozen encoder.
fn encode_frame_cache(
    mae: &SparseMae<Ef>,
    frames: &[Tensor<f32>],
    batch: usize,
) -> Result<Vec<Vec<f32>>, TrainError> {
    let d = mae.cfg.d_model;
    let mut out = Vec::with_capacity(frames.len());
    let shape = frames[0].shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    for chunk in frames.chunks(batch) {
        let mut data = Vec::with_capacity(chunk.len() * c * h * w);
        for f in chunk {
            data.extend_from_slice(f.data());
        }
        let stacked = Tensor::from_vec(&[chunk.len(), c, h, w], data);
        let feats = mae.encode_sequence(&stacked)?;
        for i in 0..chunk.len() {
            out.push(feats.data()[i * d..(i + 1) * d].to_vec());
        }
    }
    Ok(out)
}

fn h_pre_batch(cache: &[Vec<f32>], samples: &[&SolarSample], m: usize) -> Tensor<Ef> {
    let d = cache[0].len();
    let mut data = Vec::with_capacity(samples.len() * m * d);
    for s in samples {
        let t = s.timestamp as usize;
        for pos in (t + 1 - m)..=t {
            data.extend_from_slice(&cache[pos]);
        }
    }
    Tensor::from_vec(&[samples.len(), m, d], data)
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PretrainReport {
    pub epochs: Vec<PretrainEpoch>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub ckpt: PathBuf,
}

/// Train the sparse MAE on the fold's training+validation frames; select
/// the checkpoint by validation masked MSE under fixed masks.
pub fn cmd_pretrain(
    cfg: &RunConfig,
    out_dir: &Path,
    log: &mut EventLog,
) -> Result<PretrainReport, TrainError> {
    let ds = Dataset::open(Path::new(&cfg.data_dir))?;
    let fold = load_fold(&ds, cfg.fold)?;
    let mae_cfg = cfg.model.mae_config();
    let dir = fold_dir(out_dir, cfg.fold);
    std::fs::create_dir_all(&dir)?;
    cfg.save(&dir.join("resolved.cfg"))
        .map_err(|e| TrainError::Checkpoint(e.to_string()))?;

    // Pretraining pool: frames strictly before the fold's test window
    // (training + validation periods and the history that feeds them).
    let pool: Vec<usize> = (0..fold.frames.len())
        .filter(|&t| (t as i64) < fold.windows.test.start && (t as i64) < fold.windows.train.end)
        .collect();
    let val_positions: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|&t| fold.windows.val.contains(t as i64))
        .collect();
    if pool.is_empty() || val_positions.is_empty() {
        return Err(TrainError::Data(DataError::Constraint(
            "pretraining pool or validation frames empty".into(),
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "mae_init", cfg.fold as u64));
    let mut mae: SparseMae<Ef> = SparseMae::init(&mae_cfg, &mut rng)?;
    let mut opt: AdamW<Ef> = AdamW::new(cfg.mae_optimizer());

    // Log the closed-form mask counts once, from a representative plan.
    {
        let img64 = frame_as_f64(&fold.frames[pool[0]]);
        let plan = two_phase_mask(&img64, &mae_cfg, derive_seed(cfg.seed, "mask_stats", 0))?;
        log.emit(
            "mask_stats",
            &[
                ("n_patches", json!(plan.n_patches())),
                ("high_var", json!(plan.high_var_ids.len())),
                ("spatial_masked", json!(plan.spatial_masked_ids.len())),
                ("feature_masked", json!(plan.feature_masked_ids.len())),
            ],
        );
    }

    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut epochs = Vec::new();
    let mut best_params: Option<Vec<Tensor<Ef>>> = None;
    for epoch in 1..=cfg.mae_epochs {
        let mut order = pool.clone();
        let mut erng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "mae_epoch", epoch as u64));
        order.shuffle(&mut erng);
        let mut train_mse = 0.0f64;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.mae_batch) {
            let images: Vec<Tensor<Ef>> = chunk.iter().map(|&t| fold.frames[t].clone()).collect();
            let plans = make_plans(&images, &mae_cfg, cfg.seed, epoch as u64, chunk)?;
            let g: Graph<Ef> = Graph::new();
            let (_, loss) = mae.mae_step(&g, &images, &plans)?;
            let loss_val = g.value(loss).data()[0] as f64;
            if !loss_val.is_finite() {
                return Err(TrainError::Numerical(format!(
                    "non-finite pretraining loss at epoch {epoch}"
                )));
            }
            let grads = g.backward(loss)?;
            opt.step(&mut mae.params_mut(), &grads);
            train_mse += loss_val;
            steps += 1;
        }
        train_mse /= steps.max(1) as f64;
        // Validation masked MSE under masks fixed across epochs.
        let mut val_mse = 0.0f64;
        let mut vsteps = 0usize;
        for chunk in val_positions.chunks(cfg.mae_batch) {
            let images: Vec<Tensor<Ef>> = chunk.iter().map(|&t| fold.frames[t].clone()).collect();
            let plans = make_plans(&images, &mae_cfg, cfg.seed, u64::MAX, chunk)?;
            let g: Graph<Ef> = Graph::no_grad();
            let (_, loss) = mae.mae_step(&g, &images, &plans)?;
            val_mse += g.value(loss).data()[0] as f64;
            vsteps += 1;
        }
        val_mse /= vsteps.max(1) as f64;
        log.emit(
            "pretrain_epoch",
            &[
                ("epoch", json!(epoch)),
                ("train_mse", json!(train_mse)),
                ("val_mse", json!(val_mse)),
            ],
        );
        epochs.push(PretrainEpoch {
            epoch,
            train_mse,
            val_mse,
        });
        if val_mse < best_val {
            best_val = val_mse;
            best_epoch = epoch;
            best_params = Some(mae.params().iter().map(|p| p.value.clone()).collect());
        }
    }
    if let Some(best) = best_params {
        for (p, v) in mae.params_mut().into_iter().zip(best) {
            p.value = v;
        }
    }
    let ckpt = smae_path(out_dir, cfg.fold);
    save_params(&ckpt, MAGIC_SMAE, &mae.params())?;
    log.emit(
        "pretrain_done",
        &[
            ("best_epoch", json!(best_epoch)),
            ("best_val_mse", json!(best_val)),
            ("ckpt", json!(ckpt.display().to_string())),
        ],
    );
    Ok(PretrainReport {
        epochs,
        best_epoch,
        best_val_mse: best_val,
        ckpt,
    })
}

fn frame_as_f64(frame: &Tensor<f32>) -> Tensor<f64> {
    Tensor::from_vec(
        frame.shape(),
        frame.data().iter().map(|&v| v as f64).collect(),
    )
}

fn make_plans(
    images: &[Tensor<Ef>],
    mae_cfg: &crate::mae::MaeConfig,
    seed: u64,
    epoch: u64,
    positions: &[usize],
) -> Result<Vec<MaskPlan>, TrainError> {
    let mut plans = Vec::with_capacity(images.len());
    for (img, &t) in images.iter().zip(positions) {
        let img64 = Tensor::from_vec(
            img.shape(),
            img.data().iter().map(|&v| v as f64).collect(),
        );
        let mask_seed = derive_seed(seed, "mask", epoch.wrapping_mul(1_000_003) ^ t as u64);
        plans.push(two_phase_mask(&img64, mae_cfg, mask_seed)?);
    }
    Ok(plans)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainEpoch {
    pub stage: usize,
    pub epoch: usize,
    pub loss: f64,
    pub val_gmgs: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainReport {
    pub epochs: Vec<TrainEpoch>,
    pub best_val_gmgs: f64,
    pub best_stage: usize,
    pub best_epoch: usize,
    pub ckpt: PathBuf,
}

struct Snapshot {
    values: Vec<Tensor<Ef>>,
}

fn snapshot(model: &FlareModel<Ef>, mae: &SparseMae<Ef>) -> Snapshot {
    Snapshot {
        values: model
            .params()
            .iter()
            .chain(mae.params().iter())
            .map(|p| p.value.clone())
            .collect(),
    }
}

fn restore(model: &mut FlareModel<Ef>, mae: &mut SparseMae<Ef>, snap: &Snapshot) {
    let mut params = model.params_mut();
    params.extend(mae.params_mut());
    for (p, v) in params.into_iter().zip(&snap.values) {
        p.value = v.clone();
    }
}

/// Epoch-stream scoring matrix from observed label marginals.
fn epoch_scoring_matrix(labels: &[FlareClass]) -> Result<ScoringMatrix, MetricsError> {
    let mut counts = [0f64; NUM_CLASSES];
    for l in labels {
        counts[l.index()] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    let marginals: Vec<f64> = counts.iter().map(|c| c / total).collect();
    scoring_matrix(&marginals)
}

/// Validation GMGS of the current model over cached branch features or a
/// full forward pass.
fn validation_gmgs(
    model: &FlareModel<Ef>,
    samples: &[SolarSample],
    cache: &[Vec<f32>],
    m: usize,
    batch: usize,
) -> Result<f64, TrainError> {
    let mut observed = Vec::with_capacity(samples.len());
    let mut predicted = Vec::with_capacity(samples.len());
    let refs: Vec<&SolarSample> = samples.iter().collect();
    for chunk in refs.chunks(batch) {
        let g: Graph<Ef> = Graph::no_grad();
        let x = g.constant(batch_tensor(chunk));
        let h = g.constant(h_pre_batch(cache, chunk, m));
        let probs = model.forward(&g, x, h)?;
        let pv = g.value(probs);
        for (i, s) in chunk.iter().enumerate() {
            let row: Vec<f64> = pv.data()[i * NUM_CLASSES..(i + 1) * NUM_CLASSES]
                .iter()
                .map(|&v| v as f64)
                .collect();
            observed.push(s.label.index());
            predicted.push(argmax_tie_low(&row));
        }
    }
    let table = ContingencyTable::from_pairs(&observed, &predicted, NUM_CLASSES)?;
    Ok(crate::metrics::gmgs_score(&table)?)
}

/// Two-stage training. Stage 1 fits the whole model on the natural
/// label distribution; stage 2 re-trains the fusion head on
/// class-balanced epochs with the backbone frozen. The checkpoint with
/// the best validation GMGS across both stages is kept.
pub fn cmd_train(
    cfg: &RunConfig,
    out_dir: &Path,
    log: &mut EventLog,
) -> Result<TrainReport, TrainError> {
    let ds = Dataset::open(Path::new(&cfg.data_dir))?;
    let fold = load_fold(&ds, cfg.fold)?;
    if fold.train.is_empty() || fold.val.is_empty() {
        return Err(TrainError::Data(DataError::Constraint(
            "fold has empty train or validation split".into(),
        )));
    }
    let dir = fold_dir(out_dir, cfg.fold);
    std::fs::create_dir_all(&dir)?;
    cfg.save(&dir.join("resolved.cfg"))
        .map_err(|e| TrainError::Checkpoint(e.to_string()))?;

    let mae_cfg = cfg.model.mae_config();
    let mut mae: SparseMae<Ef> = SparseMae::init(
        &mae_cfg,
        &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "mae_init", cfg.fold as u64)),
    )?;
    let smae = smae_path(out_dir, cfg.fold);
    if smae.exists() {
        load_params(&smae, MAGIC_SMAE, &mut mae.params_mut())?;
    } else if !cfg.allow_random_encoder {
        return Err(TrainError::Checkpoint(format!(
            "pretraining checkpoint {} not found (set train.allow_random_encoder \
             to proceed from random weights)",
            smae.display()
        )));
    }
    // The encoder is frozen unless fine-tuning is requested.
    if !cfg.finetune_encoder {
        for p in mae.params_mut() {
            p.trainable = false;
        }
    }

    let mut model: FlareModel<Ef> =
        FlareModel::init(&cfg.model, derive_seed(cfg.seed, "model_init", cfg.fold as u64))?;
    let m = cfg.model.pre_history;
    {
        let head = cfg.model.head_config()?;
        let (s1, s2) = head.strides()?;
        log.emit(
            "model_geometry",
            &[
                ("seq_len", json!(cfg.model.seq_len()?)),
                ("feature_dim", json!(cfg.model.feature_dim)),
                ("lt_conv_strides", json!([s1, s2])),
                ("lt_conv_out_len", json!(head.conv_out_len()?)),
            ],
        );
    }

    // Frozen-encoder path: one feature per stream position.
    let cache = encode_frame_cache(&mae, &fold.frames, cfg.batch.max(8))?;

    let mut epochs = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut best = (0usize, 0usize);
    let mut best_snap: Option<Snapshot> = None;
    let mut recent_losses: Vec<f64> = Vec::new();

    // ---- stage 1: natural distribution, full model ----
    {
        let mut opt: AdamW<Ef> = AdamW::new(cfg.stage1_optimizer());
        let train_labels: Vec<FlareClass> = fold.train.iter().map(|s| s.label).collect();
        let smat = epoch_scoring_matrix(&train_labels)?;
        for epoch in 1..=cfg.epochs_stage1 {
            let mut order: Vec<usize> = (0..fold.train.len()).collect();
            let mut erng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                "stage1_epoch",
                epoch as u64,
            ));
            order.shuffle(&mut erng);
            let mut loss_sum = 0.0f64;
            let mut steps = 0usize;
            for chunk in order.chunks(cfg.batch) {
                let augmented: Vec<SolarSample> = chunk
                    .iter()
                    .map(|&i| {
                        if cfg.augment_enabled {
                            augment(
                                &fold.train[i],
                                &cfg.augment,
                                derive_seed(cfg.seed, "augment", (epoch * 1_000_003 + i) as u64),
                            )
                        } else {
                            fold.train[i].clone()
                        }
                    })
                    .collect();
                let refs: Vec<&SolarSample> = augmented.iter().collect();
                let labels: Vec<usize> = refs.iter().map(|s| s.label.index()).collect();
                let g: Graph<Ef> = Graph::new();
                let x = g.constant(batch_tensor(&refs));
                let h = if cfg.finetune_encoder {
                    let window_refs: Vec<&SolarSample> =
                        chunk.iter().map(|&i| &fold.train[i]).collect();
                    tape_h_pre(&g, &mae, &fold.frames, &window_refs, m)?
                } else {
                    g.constant(h_pre_batch(&cache, &refs, m))
                };
                let probs = model.forward(&g, x, h)?;
                let loss = total_loss(&g, probs, &labels, &smat, &cfg.loss)?;
                let loss_val = g.value(loss).data()[0] as f64;
                if !loss_val.is_finite() {
                    return abort_nan(&dir, 1, epoch, &recent_losses, log);
                }
                recent_losses.push(loss_val);
                if recent_losses.len() > 16 {
                    recent_losses.remove(0);
                }
                let grads = g.backward(loss)?;
                let mut params = model.params_mut();
                if cfg.finetune_encoder {
                    params.extend(mae.params_mut());
                }
                opt.step(&mut params, &grads);
                loss_sum += loss_val;
                steps += 1;
            }
            let val_gmgs = validation_gmgs(&model, &fold.val, &cache, m, cfg.batch)?;
            let mean_loss = loss_sum / steps.max(1) as f64;
            log.emit(
                "train_epoch",
                &[
                    ("stage", json!(1)),
                    ("epoch", json!(epoch)),
                    ("loss", json!(mean_loss)),
                    ("val_gmgs", json!(val_gmgs)),
                ],
            );
            epochs.push(TrainEpoch {
                stage: 1,
                epoch,
                loss: mean_loss,
                val_gmgs,
            });
            if val_gmgs > best_val {
                best_val = val_gmgs;
                best = (1, epoch);
                best_snap = Some(snapshot(&model, &mae));
            }
        }
    }

    // ---- stage 2: classifier re-training on balanced epochs ----
    if cfg.epochs_stage2 > 0 {
        // Backbone frozen: cache both branch features once.
        let train_refs: Vec<&SolarSample> = fold.train.iter().collect();
        let val_refs: Vec<&SolarSample> = fold.val.iter().collect();
        let feat = |refs: &[&SolarSample]| -> Result<(Tensor<Ef>, Tensor<Ef>), TrainError> {
            let mut sse_rows: Vec<Ef> = Vec::new();
            let mut lt_rows: Vec<Ef> = Vec::new();
            let mut l = 0usize;
            let mut d = 0usize;
            for chunk in refs.chunks(cfg.batch) {
                let g: Graph<Ef> = Graph::no_grad();
                let x = g.constant(batch_tensor(chunk));
                let h = g.constant(h_pre_batch(&cache, chunk, m));
                let (hs, hl) = model.branch_features(&g, x, h)?;
                let shape = g.shape(hs);
                l = shape[1];
                d = shape[2];
                sse_rows.extend_from_slice(g.value(hs).data());
                lt_rows.extend_from_slice(g.value(hl).data());
            }
            Ok((
                Tensor::from_vec(&[refs.len(), l, d], sse_rows),
                Tensor::from_vec(&[refs.len(), l, d], lt_rows),
            ))
        };
        let (train_sse, train_lt) = feat(&train_refs)?;
        let (val_sse, val_lt) = feat(&val_refs)?;
        let train_labels: Vec<FlareClass> = fold.train.iter().map(|s| s.label).collect();
        let all_indices: Vec<usize> = (0..fold.train.len()).collect();
        let mut opt: AdamW<Ef> = AdamW::new(cfg.stage2_optimizer());
        let seq_len = cfg.model.seq_len()?;
        let dim = cfg.model.feature_dim;
        let slice_rows = |t: &Tensor<Ef>, idx: &[usize]| -> Tensor<Ef> {
            let row = seq_len * dim;
            let mut data = Vec::with_capacity(idx.len() * row);
            for &i in idx {
                data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
            }
            Tensor::from_vec(&[idx.len(), seq_len, dim], data)
        };
        for epoch in 1..=cfg.epochs_stage2 {
            let stream = crt_resample(
                &train_labels,
                &all_indices,
                None,
                derive_seed(cfg.seed, "crt", epoch as u64),
            )?;
            let stream_labels: Vec<FlareClass> =
                stream.iter().map(|&i| train_labels[i]).collect();
            let smat = epoch_scoring_matrix(&stream_labels)?;
            let mut loss_sum = 0.0f64;
            let mut steps = 0usize;
            for chunk in stream.chunks(cfg.batch) {
                let labels: Vec<usize> =
                    chunk.iter().map(|&i| train_labels[i].index()).collect();
                let g: Graph<Ef> = Graph::new();
                let hs = g.constant(slice_rows(&train_sse, chunk));
                let hl = g.constant(slice_rows(&train_lt, chunk));
                let probs = model.fusion.fuse_predict(&g, hs, hl)?;
                let loss = total_loss(&g, probs, &labels, &smat, &cfg.loss)?;
                let loss_val = g.value(loss).data()[0] as f64;
                if !loss_val.is_finite() {
                    return abort_nan(&dir, 2, epoch, &recent_losses, log);
                }
                let grads = g.backward(loss)?;
                opt.step(&mut model.head_params_mut(), &grads);
                loss_sum += loss_val;
                steps += 1;
            }
            // Validation through the cached branch features.
            let mut observed = Vec::new();
            let mut predicted = Vec::new();
            let val_idx: Vec<usize> = (0..fold.val.len()).collect();
            for chunk in val_idx.chunks(cfg.batch) {
                let g: Graph<Ef> = Graph::no_grad();
                let hs = g.constant(slice_rows(&val_sse, chunk));
                let hl = g.constant(slice_rows(&val_lt, chunk));
                let probs = model.fusion.fuse_predict(&g, hs, hl)?;
                let pv = g.value(probs);
                for (i, &si) in chunk.iter().enumerate() {
                    let row: Vec<f64> = pv.data()[i * NUM_CLASSES..(i + 1) * NUM_CLASSES]
                        .iter()
                        .map(|&v| v as f64)
                        .collect();
                    observed.push(fold.val[si].label.index());
                    predicted.push(argmax_tie_low(&row));
                }
            }
            let table = ContingencyTable::from_pairs(&observed, &predicted, NUM_CLASSES)?;
            let val_gmgs = crate::metrics::gmgs_score(&table)?;
            let mean_loss = loss_sum / steps.max(1) as f64;
            log.emit(
                "train_epoch",
                &[
                    ("stage", json!(2)),
                    ("epoch", json!(epoch)),
                    ("loss", json!(mean_loss)),
                    ("val_gmgs", json!(val_gmgs)),
                ],
            );
            epochs.push(TrainEpoch {
                stage: 2,
                epoch,
                loss: mean_loss,
                val_gmgs,
            });
            if val_gmgs > best_val {
                best_val = val_gmgs;
                best = (2, epoch);
                best_snap = Some(snapshot(&model, &mae));
            }
        }
    }

    if let Some(snap) = &best_snap {
        restore(&mut model, &mut mae, snap);
    }
    let ckpt = model_path(out_dir, cfg.fold);
    let mut all_params: Vec<&Param<Ef>> = model.params();
    all_params.extend(mae.params());
    save_params(&ckpt, MAGIC_MODEL, &all_params)?;
    log.emit(
        "train_done",
        &[
            ("best_val_gmgs", json!(best_val)),
            ("best_stage", json!(best.0)),
            ("best_epoch", json!(best.1)),
            ("ckpt", json!(ckpt.display().to_string())),
        ],
    );
    Ok(TrainReport {
        epochs,
        best_val_gmgs: best_val,
        best_stage: best.0,
        best_epoch: best.1,
        ckpt,
    })
}

/// Build h_pre on the tape so encoder gradients flow (fine-tuning path).
fn tape_h_pre(
    g: &Graph<Ef>,
    mae: &SparseMae<Ef>,
    frames: &[Tensor<f32>],
    samples: &[&SolarSample],
    m: usize,
) -> Result<crate::autodiff::NodeId, TrainError> {
    let d = mae.cfg.d_model;
    let mut per_sample = Vec::with_capacity(samples.len());
    for s in samples {
        let window = frame_window(frames, s.timestamp as usize, m);
        let feats = mae.encode_frames(g, &window)?; // [m, D]
        per_sample.push(g.reshape(feats, &[1, m, d])?);
    }
    Ok(g.concat(&per_sample, 0)?)
}

fn abort_nan(
    dir: &Path,
    stage: usize,
    epoch: usize,
    recent: &[f64],
    log: &mut EventLog,
) -> Result<TrainReport, TrainError> {
    let dump = json!({
        "stage": stage,
        "epoch": epoch,
        "recent_losses": recent,
    });
    let _ = std::fs::write(dir.join("diagnostics.json"), dump.to_string());
    log.emit(
        "abort",
        &[("reason", json!("nan_loss")), ("stage", json!(stage)), ("epoch", json!(epoch))],
    );
    Err(TrainError::Numerical(format!(
        "NaN loss in stage {stage} epoch {epoch}; diagnostics dumped"
    )))
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalReport {
    pub fold: usize,
    pub split: String,
    pub metrics: MetricsReport,
    pub predictions: PathBuf,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub per_fold: Vec<f64>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CrossFoldReport {
    pub folds: Vec<EvalReport>,
    pub gmgs: MetricSummary,
    pub bss_geq_m: MetricSummary,
    pub tss_geq_m: MetricSummary,
}

/// Evaluate one fold's checkpoint on a split, writing the prediction file
/// and the JSON report.
pub fn cmd_eval(
    cfg: &RunConfig,
    out_dir: &Path,
    fold_id: usize,
    split: &str,
    log: &mut EventLog,
) -> Result<EvalReport, TrainError> {
    let ds = Dataset::open(Path::new(&cfg.data_dir))?;
    let mut run_cfg = cfg.clone();
    run_cfg.fold = fold_id;
    let fold = load_fold(&ds, fold_id)?;
    let samples: &[SolarSample] = match split {
        "train" => &fold.train,
        "val" => &fold.val,
        "test" => &fold.test,
        other => {
            return Err(TrainError::Data(DataError::Constraint(format!(
                "unknown split `{other}`"
            ))))
        }
    };
    if samples.is_empty() {
        return Err(TrainError::Data(DataError::Constraint(format!(
            "split `{split}` of fold {fold_id} is empty"
        ))));
    }
    let (model, mae) = load_model(&run_cfg, out_dir, fold_id)?;
    let m = run_cfg.model.pre_history;
    let cache = encode_frame_cache(&mae, &fold.frames, run_cfg.batch.max(8))?;
    let refs: Vec<&SolarSample> = samples.iter().collect();
    let mut records = Vec::with_capacity(refs.len());
    for chunk in refs.chunks(run_cfg.batch) {
        let g: Graph<Ef> = Graph::no_grad();
        let x = g.constant(batch_tensor(chunk));
        let h = g.constant(h_pre_batch(&cache, chunk, m));
        let probs = model.forward(&g, x, h)?;
        let pv = g.value(probs);
        for (i, s) in chunk.iter().enumerate() {
            let mut row = [0.0f64; NUM_CLASSES];
            for (j, r) in row.iter_mut().enumerate() {
                *r = pv.data()[i * NUM_CLASSES + j] as f64;
            }
            records.push(PredictionRecord {
                timestamp: s.timestamp,
                probs: row,
                label: s.label,
            });
        }
    }
    let dir = fold_dir(out_dir, fold_id);
    std::fs::create_dir_all(&dir)?;
    let pred_path = dir.join(format!("predictions_{split}.csv"));
    write_prediction_file(&pred_path, &records)?;
    let metrics = evaluate_predictions(&records)?;
    let report = EvalReport {
        fold: fold_id,
        split: split.to_string(),
        metrics,
        predictions: pred_path,
    };
    let report_path = dir.join(format!("report_{split}.json"));
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    log.emit(
        "eval_done",
        &[
            ("fold", json!(fold_id)),
            ("split", json!(split)),
            ("gmgs", json!(report.metrics.gmgs)),
            ("bss_geq_m", json!(report.metrics.bss_geq_m)),
            ("tss_geq_m", json!(report.metrics.tss_geq_m)),
        ],
    );
    Ok(report)
}

/// Evaluate all three folds and summarize mean ± std (sample standard
/// deviation across folds).
pub fn cmd_eval_all_folds(
    cfg: &RunConfig,
    out_dir: &Path,
    split: &str,
    log: &mut EventLog,
) -> Result<CrossFoldReport, TrainError> {
    let mut folds = Vec::new();
    for fold_id in 1..=3 {
        folds.push(cmd_eval(cfg, out_dir, fold_id, split, log)?);
    }
    let summary = |pick: fn(&MetricsReport) -> f64| -> MetricSummary {
        let per_fold: Vec<f64> = folds.iter().map(|f| pick(&f.metrics)).collect();
        let mean = per_fold.iter().sum::<f64>() / per_fold.len() as f64;
        let var = per_fold.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
            / (per_fold.len() - 1) as f64;
        MetricSummary {
            mean,
            std: var.sqrt(),
            per_fold,
        }
    };
    let report = CrossFoldReport {
        gmgs: summary(|m| m.gmgs),
        bss_geq_m: summary(|m| m.bss_geq_m),
        tss_geq_m: summary(|m| m.tss_geq_m),
        folds,
    };
    std::fs::write(
        out_dir.join(format!("report_{split}_all_folds.json")),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    log.emit(
        "eval_all_done",
        &[
            ("split", json!(split)),
            ("gmgs_mean", json!(report.gmgs.mean)),
            ("gmgs_std", json!(report.gmgs.std)),
        ],
    );
    Ok(report)
}

fn load_model(
    cfg: &RunConfig,
    out_dir: &Path,
    fold_id: usize,
) -> Result<(FlareModel<Ef>, SparseMae<Ef>), TrainError> {
    let path = model_path(out_dir, fold_id);
    if !path.exists() {
        return Err(TrainError::Checkpoint(format!(
            "model checkpoint {} not found",
            path.display()
        )));
    }
    let mut model: FlareModel<Ef> = FlareModel::init(&cfg.model, 0)?;
    let mut mae: SparseMae<Ef> =
        SparseMae::init(&cfg.model.mae_config(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut params = model.params_mut();
    params.extend(mae.params_mut());
    load_params(&path, MAGIC_MODEL, &mut params)?;
    Ok((model, mae))
}

/// Standalone metric recomputation from a prediction file.
pub fn cmd_metrics(pred_path: &Path) -> Result<MetricsReport, TrainError> {
    let records = crate::metrics::read_prediction_file(pred_path)?;
    Ok(evaluate_predictions(&records)?)
}
