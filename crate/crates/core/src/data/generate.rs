//! Latent flux process, label derivation, and blob rendering.
//!
//! The hourly latent series is an AR(1) activity process modulated by a
//! slow cycle envelope. A monotone piecewise-linear map, calibrated on
//! the empirical quantiles of the 24-hour-max series, converts latent
//! values into physical peak-flux values so the labeled class mix hits
//! the target proportions by construction. Image content at time t is a
//! set of drifting Gaussian blobs whose total energy increases
//! monotonically with the instantaneous flux.
//!
//! Every stochastic draw is keyed by (seed, stream position), so any
//! chunking of the work reproduces the same canonical stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{GeneratorConfig, SolarSample};
use crate::classes::{label_from_flux, FlareClass};
use crate::error::DataError;
use crate::seeding::derive_seed;
use crate::tensor::Tensor;

/// Ground-truth record of the latent process: per-position flux plus the
/// derived sample labels.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LatentLog {
    /// Peak flux (W/m^2) at every stream position.
    pub flux: Vec<f64>,
    /// Latent (pre-map) activity values.
    pub latent: Vec<f64>,
    /// Stream position of each sample.
    pub sample_positions: Vec<usize>,
    /// Label of each sample: class of max flux over (t, t+horizon].
    pub labels: Vec<u8>,
    pub horizon: usize,
}

impl LatentLog {
    pub fn label(&self, i: usize) -> FlareClass {
        FlareClass::from_index(self.labels[i] as usize).expect("stored label index")
    }

    /// Brute-force recomputation of one sample label from the flux log.
    pub fn recompute_label(&self, i: usize) -> Result<FlareClass, DataError> {
        let p = self.sample_positions[i];
        let window = &self.flux[p + 1..=p + self.horizon];
        let peak = window.iter().cloned().fold(0.0f64, f64::max);
        label_from_flux(peak)
    }
}

/// Generate the latent series, calibrate the flux map, and label every
/// sample. Images are not touched here.
pub fn generate_latent(cfg: &GeneratorConfig) -> Result<LatentLog, DataError> {
    cfg.validate()?;
    let len = cfg.stream_len();
    // AR(1) with unit stationary variance, driven by a dedicated stream.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "latent", 0));
    let normal = Normal::new(0.0, 1.0).unwrap();
    let sigma = (1.0 - cfg.ar_phi * cfg.ar_phi).sqrt();
    let cycle_steps = cfg.cycle_years * cfg.year_steps as f64;
    let mut latent = Vec::with_capacity(len);
    let mut a = 0.0f64;
    for t in 0..len {
        a = cfg.ar_phi * a + sigma * normal.sample(&mut rng);
        // Cycle starts at its maximum so the initial (validation) period
        // contains the rare strong classes.
        let envelope = cfg.envelope_amp
            * (2.0 * std::f64::consts::PI * t as f64 / cycle_steps
                + std::f64::consts::FRAC_PI_2)
                .sin();
        latent.push(a + envelope + spike_height(cfg, t));
    }
    // 24h forward maxima at the sample positions.
    let positions: Vec<usize> = (0..cfg.n_samples).map(|i| cfg.sample_position(i)).collect();
    let maxima: Vec<f64> = positions
        .iter()
        .map(|&p| {
            latent[p + 1..=p + cfg.horizon]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let flux: Vec<f64> = if cfg.quiet_sun {
        vec![1e-8; len]
    } else {
        let map = FluxMap::calibrate(&maxima, &cfg.target_proportions)?;
        latent.iter().map(|&z| map.apply(z)).collect()
    };
    let mut labels = Vec::with_capacity(cfg.n_samples);
    for &p in &positions {
        let peak = flux[p + 1..=p + cfg.horizon]
            .iter()
            .cloned()
            .fold(0.0f64, f64::max);
        labels.push(label_from_flux(peak)?.index() as u8);
    }
    Ok(LatentLog {
        flux,
        latent,
        sample_positions: positions,
        labels,
        horizon: cfg.horizon,
    })
}

/// Monotone piecewise-linear map from latent units to log10 flux,
/// anchored so the class thresholds land at the target quantiles of the
/// 24-hour-max distribution.
struct FluxMap {
    anchors_z: [f64; 3],
    anchors_log: [f64; 3],
}

impl FluxMap {
    fn calibrate(maxima: &[f64], proportions: &[f64; 4]) -> Result<Self, DataError> {
        if maxima.len() < 8 {
            return Err(DataError::Constraint(
                "too few samples to calibrate the flux map".into(),
            ));
        }
        let mut sorted = maxima.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Cumulative fractions below each threshold, weakest class first:
        // P(O) -> log10 I = -6, P(O)+P(C) -> -5, P(O)+P(C)+P(M) -> -4.
        let q = |frac: f64| -> f64 {
            let idx = ((frac * sorted.len() as f64) as usize).min(sorted.len() - 1);
            sorted[idx]
        };
        let c_o = proportions[3];
        let c_c = proportions[3] + proportions[2];
        let c_m = proportions[3] + proportions[2] + proportions[1];
        let anchors_z = [q(c_o), q(c_c), q(c_m)];
        if anchors_z[0] >= anchors_z[1] || anchors_z[1] >= anchors_z[2] {
            return Err(DataError::Constraint(format!(
                "infeasible proportions: flux-map anchors not increasing ({:?})",
                anchors_z
            )));
        }
        Ok(Self {
            anchors_z,
            anchors_log: [-6.0, -5.0, -4.0],
        })
    }

    fn apply(&self, z: f64) -> f64 {
        let (az, al) = (&self.anchors_z, &self.anchors_log);
        let log10 = if z <= az[0] {
            let slope = (al[1] - al[0]) / (az[1] - az[0]);
            al[0] + slope * (z - az[0])
        } else if z <= az[1] {
            al[0] + (al[1] - al[0]) * (z - az[0]) / (az[1] - az[0])
        } else if z <= az[2] {
            al[1] + (al[2] - al[1]) * (z - az[1]) / (az[2] - az[1])
        } else {
            let slope = (al[2] - al[1]) / (az[2] - az[1]);
            al[2] + slope * (z - az[2])
        };
        10f64.powf(log10)
    }
}

/// Maximum spike episode duration in steps.
const SPIKE_MAX_DUR: usize = 8;
/// Strongest-episode duration in steps.
const MEGA_DUR: usize = 6;

/// Ordinary spike episode starting exactly at `onset`, if any:
/// (amplitude, duration). Episodes are keyed by their onset step, so
/// values are independent of evaluation order.
fn spike_at(cfg: &GeneratorConfig, onset: usize) -> Option<(f64, usize)> {
    if cfg.spike_prob <= 0.0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "spike", onset as u64));
    if rng.gen_range(0.0..1.0) >= cfg.spike_prob {
        return None;
    }
    // amp = spike_amp * (1 + Exp(1))
    let u: f64 = rng.gen_range(1e-12..1.0);
    let amp = cfg.spike_amp * (1.0 - u.ln());
    let dur = rng.gen_range(3..=SPIKE_MAX_DUR);
    Some((amp, dur))
}

/// Quasi-periodic strongest episode j: (onset step, amplitude). Onsets
/// land near (j + 1/2) * mega_period with seeded jitter.
fn mega_episode(cfg: &GeneratorConfig, j: i64) -> Option<(i64, f64)> {
    if cfg.mega_period == 0 || j < 0 {
        return None;
    }
    let period = cfg.mega_period as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "mega", j as u64));
    let jitter: f64 = rng.gen_range(-0.15..0.15);
    let onset = ((j as f64 + 0.5 + jitter) * period).round() as i64;
    let amp = cfg.mega_amp * rng.gen_range(0.95..1.1);
    Some((onset, amp))
}

/// Impulsive flare component at step t: the strongest active episode
/// (ordinary spikes and quasi-periodic strong episodes), linear decay.
fn spike_height(cfg: &GeneratorConfig, t: usize) -> f64 {
    let mut h = 0.0f64;
    for back in 0..SPIKE_MAX_DUR {
        if t < back {
            break;
        }
        if let Some((amp, dur)) = spike_at(cfg, t - back) {
            if back < dur {
                h = h.max(amp * (1.0 - back as f64 / dur as f64));
            }
        }
    }
    if cfg.mega_period > 0 {
        let j_mid = (t / cfg.mega_period) as i64;
        for j in (j_mid - 2)..=(j_mid + 1) {
            if let Some((onset, amp)) = mega_episode(cfg, j) {
                let back = t as i64 - onset;
                if back >= 0 && (back as usize) < MEGA_DUR {
                    h = h.max(amp * (1.0 - back as f64 / MEGA_DUR as f64));
                }
            }
        }
    }
    h
}

/// Pre-flare buildup visible in imagery: episodes ramp up linearly over
/// `buildup_horizon` steps before their onset, scaled by amplitude. This
/// is what makes the forecasting task learnable from images.
pub fn spike_buildup(cfg: &GeneratorConfig, t: usize) -> f64 {
    let h_steps = cfg.buildup_horizon;
    if h_steps == 0 {
        return 0.0;
    }
    let mut b = 0.0f64;
    for ahead in 1..=h_steps {
        let onset = t + ahead;
        let ramp = 1.0 - (ahead - 1) as f64 / h_steps as f64;
        if let Some((amp, _)) = spike_at(cfg, onset) {
            b = b.max(amp * ramp);
        }
    }
    if cfg.mega_period > 0 {
        let j_lo = (t / cfg.mega_period) as i64 - 1;
        let j_hi = ((t + h_steps) / cfg.mega_period) as i64 + 1;
        for j in j_lo..=j_hi {
            if let Some((onset, amp)) = mega_episode(cfg, j) {
                let ahead = onset - t as i64;
                if ahead >= 1 && (ahead as usize) <= h_steps {
                    let ramp = 1.0 - (ahead - 1) as f64 / h_steps as f64;
                    b = b.max(amp * ramp);
                }
            }
        }
    }
    b
}

/// Per-blob orbit and shape parameters, fixed for the whole stream.
struct BlobParams {
    weight: f64,
    sigma: f64,
    orbit_cx: f64,
    orbit_cy: f64,
    orbit_r: f64,
    period: f64,
    phase: f64,
    dipole_offset: f64,
}

fn blob_params(cfg: &GeneratorConfig) -> Vec<BlobParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "blobs", 0));
    let raw: Vec<f64> = (0..cfg.blob_count).map(|_| rng.gen_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    (0..cfg.blob_count)
        .map(|j| BlobParams {
            weight: raw[j] / total,
            sigma: rng.gen_range(0.05..0.10),
            orbit_cx: rng.gen_range(0.35..0.65),
            orbit_cy: rng.gen_range(0.35..0.65),
            orbit_r: rng.gen_range(0.10..0.25),
            period: rng.gen_range(200.0..600.0),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            dipole_offset: rng.gen_range(0.02..0.05),
        })
        .collect()
}

/// Per-channel sensitivities: .0 scales the instantaneous-flux energy,
/// .1 the pre-flare buildup. Distinct mixes per channel give the channel
/// selection mechanism something real to exploit.
fn channel_gains(cfg: &GeneratorConfig) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "gains", 0));
    (0..cfg.channels)
        .map(|c| {
            if c == 0 {
                // Magnetogram: strong buildup signature.
                (1.0, 1.0)
            } else {
                (rng.gen_range(0.3..1.2), rng.gen_range(0.1..1.0))
            }
        })
        .collect()
}

/// Missing flags for one stream position: independent per-channel dropouts
/// plus occasional all-channel bursts.
pub fn missing_flags(cfg: &GeneratorConfig, t: usize) -> Vec<bool> {
    let mut flags = vec![false; cfg.channels];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "missing", t as u64));
    for f in flags.iter_mut() {
        if rng.gen_range(0.0..1.0) < cfg.missing_prob {
            *f = true;
        }
    }
    // A burst at position t0 wipes all channels of t0..t0+burst_len.
    for back in 0..cfg.burst_len {
        if t < back {
            break;
        }
        let t0 = t - back;
        let mut brng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "burst", t0 as u64));
        if brng.gen_range(0.0..1.0) < cfg.burst_prob {
            flags.iter_mut().for_each(|f| *f = true);
        }
    }
    flags
}

/// Render the multi-channel frame at stream position t (at gen_hw
/// resolution, before the preprocessing resize). Deterministic per
/// (seed, t). Missing channels still render; zero padding happens at
/// load time after standardization.
pub fn render_frame(cfg: &GeneratorConfig, latent: &LatentLog, t: usize) -> Tensor<f32> {
    let hw = cfg.gen_hw;
    let blobs = blob_params(cfg);
    let gains = channel_gains(cfg);
    // Instantaneous blob energy rises monotonically with the flux;
    // the buildup term reveals upcoming episodes.
    let (flux_energy, buildup_energy) = if cfg.quiet_sun {
        (0.0, 0.0)
    } else {
        (
            (latent.flux[t].log10() + 8.0).max(0.0).min(10.0),
            cfg.buildup_gain * spike_buildup(cfg, t),
        )
    };
    // Unit-energy fields shared by all channels.
    let mut intensity = vec![0.0f64; hw * hw];
    let mut dipole = vec![0.0f64; hw * hw];
    for b in &blobs {
        let angle = std::f64::consts::TAU * t as f64 / b.period + b.phase;
        let cx = b.orbit_cx + b.orbit_r * angle.cos();
        let cy = b.orbit_cy + b.orbit_r * angle.sin();
        let inv2s2 = 1.0 / (2.0 * b.sigma * b.sigma);
        // Dipole poles sit along the orbit tangent.
        let (dx, dy) = (-angle.sin() * b.dipole_offset, angle.cos() * b.dipole_offset);
        for py in 0..hw {
            let y = (py as f64 + 0.5) / hw as f64;
            for px in 0..hw {
                let x = (px as f64 + 0.5) / hw as f64;
                let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                intensity[py * hw + px] += b.weight * (-d2 * inv2s2).exp();
                let dp = (x - cx - dx) * (x - cx - dx) + (y - cy - dy) * (y - cy - dy);
                let dm = (x - cx + dx) * (x - cx + dx) + (y - cy + dy) * (y - cy + dy);
                dipole[py * hw + px] +=
                    b.weight * ((-dp * inv2s2).exp() - (-dm * inv2s2).exp());
            }
        }
    }
    let mut data = vec![0.0f32; cfg.channels * hw * hw];
    for c in 0..cfg.channels {
        let mut nrng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "noise", (t * cfg.channels + c) as u64));
        let noise = Normal::new(0.0, cfg.pixel_noise.max(1e-12)).unwrap();
        let field = if c == 0 { &dipole } else { &intensity };
        let energy = gains[c].0 * flux_energy + gains[c].1 * buildup_energy;
        for i in 0..hw * hw {
            let n = if cfg.pixel_noise > 0.0 {
                noise.sample(&mut nrng)
            } else {
                0.0
            };
            data[c * hw * hw + i] = (energy * field[i] + n) as f32;
        }
    }
    Tensor::from_vec(&[cfg.channels, hw, hw], data)
}

/// Fully materialized dataset: unique frames at working resolution plus
/// the per-sample records assembled from them.
pub struct GeneratedDataset {
    pub latent: LatentLog,
    /// One frame per stream position, resized to out_hw: [C, out, out].
    pub frames: Vec<Tensor<f32>>,
    /// Missing flags per stream position.
    pub frame_missing: Vec<Vec<bool>>,
    /// Kept samples (missing fraction within threshold).
    pub samples: Vec<SolarSample>,
    /// Stream positions of samples dropped by the missing-fraction rule.
    pub dropped: Vec<usize>,
}

/// Generate everything in memory. The deterministic per-position seeding
/// makes the output identical for any chunking of the render work.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<GeneratedDataset, DataError> {
    let latent = generate_latent(cfg)?;
    let len = cfg.stream_len();
    let mut frames = Vec::with_capacity(len);
    let mut frame_missing = Vec::with_capacity(len);
    for t in 0..len {
        let raw = render_frame(cfg, &latent, t);
        frames.push(super::resize_bilinear(&raw, cfg.out_hw));
        frame_missing.push(missing_flags(cfg, t));
    }
    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut dropped = Vec::new();
    let (c, hw) = (cfg.channels, cfg.out_hw);
    for i in 0..cfg.n_samples {
        let p = cfg.sample_position(i);
        let mut images = vec![0.0f32; cfg.history * c * hw * hw];
        let mut missing = vec![false; cfg.history * c];
        for step in 0..cfg.history {
            let pos = p + 1 + step - cfg.history; // window (p-k, p]
            images[step * c * hw * hw..(step + 1) * c * hw * hw]
                .copy_from_slice(frames[pos].data());
            missing[step * c..(step + 1) * c].copy_from_slice(&frame_missing[pos]);
        }
        let sample = SolarSample {
            images: Tensor::from_vec(&[cfg.history, c, hw, hw], images),
            label: latent.label(i),
            timestamp: p as i64,
            missing,
        };
        if sample.exceeds_missing_threshold() {
            dropped.push(p);
        } else {
            samples.push(sample);
        }
    }
    Ok(GeneratedDataset {
        latent,
        frames,
        frame_missing,
        samples,
        dropped,
    })
}
