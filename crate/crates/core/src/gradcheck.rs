//! Finite-difference verification of tape gradients over named parameter groups.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ModtError, Result};
use crate::model::{window_gradients, window_loss, ModelConfig, ModelParams};
use crate::numerics::{finite_difference_at, gradient_error, Tensor};
use crate::params::ParamSet;
use crate::scans::{synth_scene, window_triplets, SceneConfig};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Elements whose analytic gradient is below this are compared absolutely.
    pub abs_floor: f64,
    /// Coordinates checked per tensor; `None` checks all of them.
    pub samples_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            samples_per_tensor: Some(12),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_error: f64,
    pub worst: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.failures += other.failures;
        if other.max_error > self.max_error {
            self.max_error = other.max_error;
            self.worst = other.worst;
        }
    }
}

/// Compares `analytic` (one tensor per parameter, in visiting order) with
/// central differences of `loss`.
pub fn check_param_gradients<P, F>(
    params: &P,
    analytic: &[Tensor],
    loss: F,
    opts: &GradCheckOptions,
    rng: &mut impl Rng,
) -> Result<GradCheckReport>
where
    P: ParamSet,
    F: Fn(&P) -> Result<f64>,
{
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    params.visit(&mut |n, t| tensors.push((n.to_string(), t.clone())));
    if tensors.len() != analytic.len() {
        return Err(ModtError::invalid(format!(
            "{} analytic gradients for {} parameters",
            analytic.len(),
            tensors.len()
        )));
    }
    let mut report = GradCheckReport::default();
    for (ti, ((name, value), grad)) in tensors.iter().zip(analytic).enumerate() {
        if value.shape() != grad.shape() {
            return Err(ModtError::invalid(format!("gradient shape mismatch for {name}")));
        }
        let idx: Vec<usize> = match opts.samples_per_tensor {
            Some(k) if k < value.len() => {
                let mut v = sample(rng, value.len(), k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..value.len()).collect(),
        };
        let numeric = finite_difference_at(
            |x| {
                let mut p = params.clone();
                let mut i = 0;
                p.visit_mut(&mut |_, t| {
                    if i == ti {
                        *t = x.clone();
                    }
                    i += 1;
                });
                loss(&p)
            },
            value,
            opts.step,
            &idx,
        )?;
        for (&i, &n) in idx.iter().zip(&numeric) {
            let a = grad.data()[i];
            let err = gradient_error(a, n, opts.abs_floor);
            report.checked += 1;
            if !(err < opts.tolerance) {
                report.failures += 1;
            }
            if err > report.max_error || err.is_nan() {
                report.max_error = err;
                report.worst = Some(format!("{name}[{i}] analytic {a:e} numeric {n:e}"));
            }
        }
    }
    Ok(report)
}

/// Scene and model sizes for the end-to-end check.
#[derive(Clone, Debug)]
pub struct ModelCheckSetup {
    pub tokens: usize,
    pub objects: usize,
    pub points_per_object: usize,
    pub clutter_points: usize,
}

impl Default for ModelCheckSetup {
    /// Three objects of eight points plus eight clutter points: 32 per scan.
    fn default() -> Self {
        Self {
            tokens: 8,
            objects: 3,
            points_per_object: 8,
            clutter_points: 8,
        }
    }
}

/// Checks the total window loss against central differences for every
/// parameter tensor of a freshly initialized model, on the first window of
/// a synthetic scene drawn from `seed`.
pub fn check_model(base: &ModelConfig, setup: &ModelCheckSetup, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut cfg = base.clone();
    cfg.encoder.tokens = setup.tokens;
    let scene = SceneConfig {
        num_objects: setup.objects,
        num_frames: 3,
        points_per_object: setup.points_per_object,
        clutter_points: setup.clutter_points,
        ..SceneConfig::default()
    };
    let seq = synth_scene(&scene, seed)?;
    let windows = window_triplets(&seq.frames)?;
    let window = &windows[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(&mut rng, &cfg);
    let Some((_, grads)) = window_gradients(&params, window, &cfg)? else {
        return Err(ModtError::Runtime("gradient check window has an empty scan".into()));
    };
    let analytic = grads.leaves().into_iter().cloned().collect::<Vec<_>>();
    check_param_gradients(
        &params,
        &analytic,
        |p| Ok(window_loss(p, window, &cfg)?.map_or(0.0, |l| l.total)),
        opts,
        &mut rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_model_passes() {
        let mut cfg = ModelConfig::default();
        cfg.affinity.conv_channels = 4;
        let setup = ModelCheckSetup { tokens: 4, objects: 2, points_per_object: 5, clutter_points: 2 };
        let opts = GradCheckOptions { samples_per_tensor: Some(3), ..Default::default() };
        let report = check_model(&cfg, &setup, 1, &opts).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_reported() {
        use crate::affinity::AttentionWeights;
        let mut params = AttentionWeights::zeros(2, 1);
        params.q_in = Tensor::scalar(0.5);
        let loss = |p: &AttentionWeights| Ok(p.q_in.item().powi(2) + 3.0 * p.v_proj.data()[1]);
        let mut analytic: Vec<Tensor> = params.leaves().into_iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        analytic[0] = Tensor::scalar(1.0);
        analytic[8].data_mut()[1] = 3.0;
        let opts = GradCheckOptions { samples_per_tensor: None, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let good = check_param_gradients(&params, &analytic, loss, &opts, &mut rng).unwrap();
        assert!(good.passed(), "{good:?}");
        analytic[8].data_mut()[1] = 2.0;
        let bad = check_param_gradients(&params, &analytic, loss, &opts, &mut rng).unwrap();
        assert_eq!(bad.failures, 1);
        assert!(bad.worst.unwrap().contains("v_proj[1]"));
    }
}
