//! Central finite-difference oracles for the gradient contract.
//!
//! These helpers evaluate a loss function with perturbed inputs and never
//! look at the tape, so they stay independent of the backward
//! implementations they validate.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Param;
use crate::tensor::Tensor;

/// Full finite-difference gradient of `eval` w.r.t. every element of `x`.
/// Intended for small tensors in op-level tests.
pub fn fd_grad(mut eval: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, step: f64) -> Tensor<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        out[i] = (eval(&plus) - eval(&minus)) / (2.0 * step);
    }
    Tensor::from_vec(x.shape(), out)
}

/// Settings for parameter-level gradient checks.
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error where the analytic value is above
    /// `abs_floor`.
    pub rel_tol: f64,
    /// Elements with |analytic| <= abs_floor are excluded from the relative
    /// check; the finite difference must still be small there.
    pub abs_floor: f64,
    /// Resolution of the central-difference oracle itself: round-off on a
    /// loss of magnitude ~1 is about eps/step = 2e-11, so differences
    /// below this bound cannot be measured and pass.
    pub fd_resolution: f64,
    /// Elements sampled per tensor (0 checks every element).
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
            fd_resolution: 1e-10,
            samples_per_tensor: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare analytic parameter gradients against central finite differences
/// of `eval`, which must recompute the loss from the given parameter set.
pub fn check_param_grads(
    params: &[Param<f64>],
    mut eval: impl FnMut(&[Param<f64>]) -> f64,
    analytic: impl Fn(&str) -> Option<Tensor<f64>>,
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Param<f64>> = params.to_vec();
    for pi in 0..params.len() {
        if !params[pi].trainable {
            continue;
        }
        let name = params[pi].name.clone();
        // A parameter without an analytic gradient must not influence the
        // loss: its finite differences have to vanish.
        let an = analytic(&name);
        let n = params[pi].value.len();
        let mut indices: Vec<usize> = (0..n).collect();
        if cfg.samples_per_tensor > 0 && cfg.samples_per_tensor < n {
            indices.shuffle(&mut rng);
            indices.truncate(cfg.samples_per_tensor);
            indices.sort_unstable();
        }
        for &i in &indices {
            let orig = work[pi].value.data()[i];
            work[pi].value.data_mut()[i] = orig + cfg.step;
            let plus = eval(&work);
            work[pi].value.data_mut()[i] = orig - cfg.step;
            let minus = eval(&work);
            work[pi].value.data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * cfg.step);
            let a = match &an {
                Some(t) => t.data()[i],
                None => {
                    report.skipped += 1;
                    if fd.abs() > cfg.fd_resolution.max(1e-7) {
                        report.failures.push(format!(
                            "{name}[{i}]: no analytic gradient but fd {fd:.6e}"
                        ));
                    }
                    continue;
                }
            };
            if a.abs() > cfg.abs_floor {
                let rel = (fd - a).abs() / a.abs();
                report.checked += 1;
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                }
                if rel > cfg.rel_tol && (fd - a).abs() > cfg.fd_resolution {
                    report.failures.push(format!(
                        "{name}[{i}]: analytic {a:.6e} vs fd {fd:.6e} (rel {rel:.3e})"
                    ));
                }
            } else {
                report.skipped += 1;
                // Dead-gradient guard: tiny analytic values must not hide a
                // real finite-difference signal.
                if fd.abs() > 1e-5 {
                    report.failures.push(format!(
                        "{name}[{i}]: analytic ~0 but fd {fd:.6e}"
                    ));
                }
            }
        }
    }
    report
}
