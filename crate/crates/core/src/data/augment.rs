//! Training-time augmentation: random rotation, scaling, brightness and
//! contrast jitter, Gaussian blur, and channel-specific noise. Labels and
//! missing flags are untouched; missing slots stay zero. Deterministic
//! per seed; zero strengths give the exact identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::SolarSample;

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    /// Max absolute rotation in degrees.
    pub rotate_deg: f64,
    /// Scale drawn from [1 - jitter, 1 + jitter].
    pub scale_jitter: f64,
    /// Additive brightness range (standardized units).
    pub brightness: f64,
    /// Multiplicative contrast jitter.
    pub contrast: f64,
    /// Max Gaussian blur sigma in pixels.
    pub blur_sigma: f64,
    /// Channel-specific additive noise scale.
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate_deg: 10.0,
            scale_jitter: 0.05,
            brightness: 0.05,
            contrast: 0.05,
            blur_sigma: 0.6,
            noise_std: 0.02,
        }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        Self {
            rotate_deg: 0.0,
            scale_jitter: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            blur_sigma: 0.0,
            noise_std: 0.0,
        }
    }
}

/// Rotate and scale a single frame around its center (inverse-mapped
/// bilinear sampling, zero fill outside).
fn warp_frame(src: &[f32], dst: &mut [f32], h: usize, w: usize, angle: f64, scale: f64) {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let inv = 1.0 / scale;
    for oy in 0..h {
        for ox in 0..w {
            // Inverse transform of the output pixel.
            let dy = oy as f64 - cy;
            let dx = ox as f64 - cx;
            let sy = cy + inv * (sin * dx + cos * dy);
            let sx = cx + inv * (cos * dx - sin * dy);
            let v = if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f64 || sx > (w - 1) as f64 {
                0.0
            } else {
                let y0 = sy.floor() as usize;
                let x0 = sx.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let wy = sy - y0 as f64;
                let wx = sx - x0 as f64;
                let p00 = src[y0 * w + x0] as f64;
                let p01 = src[y0 * w + x1] as f64;
                let p10 = src[y1 * w + x0] as f64;
                let p11 = src[y1 * w + x1] as f64;
                p00 * (1.0 - wy) * (1.0 - wx)
                    + p01 * (1.0 - wy) * wx
                    + p10 * wy * (1.0 - wx)
                    + p11 * wy * wx
            };
            dst[oy * w + ox] = v as f32;
        }
    }
}

fn blur_frame(frame: &mut [f32], h: usize, w: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    if radius < 1 {
        return;
    }
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut total = 0.0f64;
    for i in -radius..=radius {
        let v = (-(i * i) as f64 / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        total += v;
    }
    for k in kernel.iter_mut() {
        *k /= total;
    }
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += kv * frame[y * w + sx] as f64;
            }
            tmp[y * w + x] = acc as f32;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[sy * w + x] as f64;
            }
            frame[y * w + x] = acc as f32;
        }
    }
}

/// Apply the augmentation pipeline to a (typically training) sample.
pub fn augment(sample: &SolarSample, cfg: &AugmentConfig, seed: u64) -> SolarSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, c, h, w) = sample.dims();
    let angle = if cfg.rotate_deg > 0.0 {
        rng.gen_range(-cfg.rotate_deg..cfg.rotate_deg).to_radians()
    } else {
        0.0
    };
    let scale = if cfg.scale_jitter > 0.0 {
        rng.gen_range(1.0 - cfg.scale_jitter..1.0 + cfg.scale_jitter)
    } else {
        1.0
    };
    let brightness = if cfg.brightness > 0.0 {
        rng.gen_range(-cfg.brightness..cfg.brightness)
    } else {
        0.0
    };
    let contrast = if cfg.contrast > 0.0 {
        rng.gen_range(1.0 - cfg.contrast..1.0 + cfg.contrast)
    } else {
        1.0
    };
    let sigma = if cfg.blur_sigma > 0.0 {
        rng.gen_range(0.0..cfg.blur_sigma)
    } else {
        0.0
    };
    let channel_noise: Vec<f64> = (0..c)
        .map(|_| {
            if cfg.noise_std > 0.0 {
                rng.gen_range(0.5..1.5) * cfg.noise_std
            } else {
                0.0
            }
        })
        .collect();

    let mut out = sample.clone();
    let geo = angle.abs() > 1e-12 || (scale - 1.0).abs() > 1e-12;
    let photometric = brightness != 0.0 || contrast != 1.0;
    let data = out.images.data_mut();
    let frame_px = h * w;
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut scratch = vec![0.0f32; frame_px];
    for step in 0..k {
        for ci in 0..c {
            if sample.missing[step * c + ci] {
                continue; // missing slots stay zero-filled
            }
            let base = (step * c + ci) * frame_px;
            if geo {
                scratch.copy_from_slice(&data[base..base + frame_px]);
                warp_frame(&scratch, &mut data[base..base + frame_px], h, w, angle, scale);
            }
            if sigma > 0.3 {
                blur_frame(&mut data[base..base + frame_px], h, w, sigma);
            }
            if photometric {
                for v in &mut data[base..base + frame_px] {
                    *v = (*v as f64 * contrast + brightness) as f32;
                }
            }
            if channel_noise[ci] > 0.0 {
                for v in &mut data[base..base + frame_px] {
                    *v += (noise.sample(&mut rng) * channel_noise[ci]) as f32;
                }
            }
        }
    }
    out
}
