//! Adam training over three-scan windows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ModtError, Result};
use crate::model::{window_gradients, LossBreakdown, ModelConfig, ModelParams};
use crate::params::ParamSet;
use crate::scans::FrameTriplet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Total iterations; a resumed run continues up to this count.
    pub iterations: usize,
    pub learning_rate: f64,
    /// Multiplier applied every `decay_every` iterations (0 disables decay).
    pub lr_decay: f64,
    pub decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            learning_rate: 1e-3,
            lr_decay: 0.5,
            decay_every: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.lr_decay > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(ModtError::Config("train: invalid optimizer settings".into()))
        }
    }

    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        if self.decay_every == 0 {
            self.learning_rate
        } else {
            self.learning_rate * self.lr_decay.powi((iteration / self.decay_every) as i32)
        }
    }
}

/// Adam moment estimates; `step` counts applied updates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: usize,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

fn zip3(
    p: &mut ModelParams,
    m: &mut ModelParams,
    v: &mut ModelParams,
    g: &ModelParams,
    mut f: impl FnMut(&mut [f64], &mut [f64], &mut [f64], &[f64]),
) {
    let leaves = p.leaves_mut().into_iter().zip(m.leaves_mut()).zip(v.leaves_mut()).zip(g.leaves());
    for (((p, m), v), g) in leaves {
        f(p.data_mut(), m.data_mut(), v.data_mut(), g.data());
    }
}

pub fn adam_update(params: &mut ModelParams, state: &mut AdamState, grads: &ModelParams, lr: f64, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.epsilon);
    zip3(params, &mut state.m, &mut state.v, grads, |p, m, v, g| {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    });
}

fn accumulate(acc: &mut ModelParams, g: &ModelParams, k: f64) {
    for (t, g) in acc.leaves_mut().into_iter().zip(g.leaves()) {
        for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
            *a += k * b;
        }
    }
}

/// Mean loss and gradient over all windows. Windows are evaluated in
/// parallel and reduced in window order, so results do not depend on the
/// thread count.
pub fn batch_gradients(
    params: &ModelParams,
    windows: &[FrameTriplet<'_>],
    cfg: &ModelConfig,
) -> Result<Option<(LossBreakdown, ModelParams)>> {
    let results: Vec<Option<(LossBreakdown, ModelParams)>> = windows
        .par_iter()
        .map(|w| window_gradients(params, w, cfg))
        .collect::<Result<_>>()?;
    let used: Vec<&(LossBreakdown, ModelParams)> = results.iter().flatten().collect();
    if used.is_empty() {
        return Ok(None);
    }
    let k = 1.0 / used.len() as f64;
    let mut loss = LossBreakdown::default();
    let mut grad = params.zeros_like();
    for (l, g) in used {
        loss.add_scaled(l, k);
        accumulate(&mut grad, g, k);
    }
    Ok(Some((loss, grad)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub learning_rate: f64,
    pub loss: LossBreakdown,
}

/// Runs iterations `state.step..cfg.iterations`, logging the loss measured
/// before each update.
pub fn train(
    params: &mut ModelParams,
    state: &mut AdamState,
    windows: &[FrameTriplet<'_>],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_iteration: impl FnMut(&IterationLog),
) -> Result<Vec<IterationLog>> {
    let mut log = Vec::new();
    while state.step < cfg.iterations {
        let it = state.step;
        let Some((loss, grads)) = batch_gradients(params, windows, model_cfg)? else {
            return Err(ModtError::Runtime("no trainable windows: every window has an empty scan".into()));
        };
        if !loss.total.is_finite() || !grads.is_finite() {
            return Err(ModtError::Runtime(format!(
                "non-finite loss at iteration {it}: total {} association {} center {} size {} objectness {}",
                loss.total, loss.association, loss.center, loss.size, loss.objectness
            )));
        }
        let lr = cfg.learning_rate_at(it);
        adam_update(params, state, &grads, lr, cfg);
        let entry = IterationLog {
            iteration: it,
            learning_rate: lr,
            loss,
        };
        on_iteration(&entry);
        log.push(entry);
    }
    Ok(log)
}

pub fn format_log_csv(log: &[IterationLog]) -> String {
    let mut s = String::from("iteration,learning_rate,total,association,center,size,objectness,yaw\n");
    for e in log {
        let l = &e.loss;
        s.push_str(&format!(
            "{},{:e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}\n",
            e.iteration, e.learning_rate, l.total, l.association, l.center, l.size, l.objectness, l.yaw
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::scans::{synth_scene, window_triplets, SceneConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelConfig, Vec<crate::scans::Frame>) {
        let mut cfg = ModelConfig::default();
        cfg.encoder.tokens = 8;
        cfg.affinity.conv_channels = 4;
        let scene = SceneConfig { num_frames: 4, points_per_object: 8, clutter_points: 2, ..Default::default() };
        (cfg, synth_scene(&scene, 3).unwrap().frames)
    }

    #[test]
    fn step_decay_schedule() {
        let cfg = TrainConfig { learning_rate: 0.1, lr_decay: 0.5, decay_every: 10, ..Default::default() };
        assert_eq!(cfg.learning_rate_at(0), 0.1);
        assert_eq!(cfg.learning_rate_at(9), 0.1);
        assert_eq!(cfg.learning_rate_at(10), 0.05);
        assert_eq!(cfg.learning_rate_at(25), 0.025);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let (cfg, _) = setup();
        let mut p = ModelParams::init(&mut ChaCha8Rng::seed_from_u64(0), &cfg);
        let before = p.clone();
        let mut g = p.zeros_like();
        g.heads.conf_b = Tensor::scalar(3.0);
        let mut st = AdamState::new(&p);
        adam_update(&mut p, &mut st, &g, 0.01, &TrainConfig::default());
        assert!((p.heads.conf_b.item() - before.heads.conf_b.item() + 0.01).abs() < 1e-9);
        assert_eq!(p.heads.size_w, before.heads.size_w);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_iterations_leave_params() {
        let (cfg, frames) = setup();
        let windows = window_triplets(&frames).unwrap();
        let mut p = ModelParams::init(&mut ChaCha8Rng::seed_from_u64(0), &cfg);
        let init = p.clone();
        let mut st = AdamState::new(&p);
        let tc = TrainConfig { iterations: 0, ..Default::default() };
        let log = train(&mut p, &mut st, &windows, &cfg, &tc, |_| {}).unwrap();
        assert!(log.is_empty());
        assert_eq!(p, init);
    }

    #[test]
    fn resume_continues_the_same_curve() {
        let (cfg, frames) = setup();
        let windows = window_triplets(&frames).unwrap();
        let init = ModelParams::init(&mut ChaCha8Rng::seed_from_u64(0), &cfg);
        let full_cfg = TrainConfig { iterations: 6, learning_rate: 0.01, ..Default::default() };
        let mut p = init.clone();
        let mut st = AdamState::new(&p);
        let full = train(&mut p, &mut st, &windows, &cfg, &full_cfg, |_| {}).unwrap();

        let mut q = init.clone();
        let mut st2 = AdamState::new(&q);
        let first = train(&mut q, &mut st2, &windows, &cfg, &TrainConfig { iterations: 3, ..full_cfg.clone() }, |_| {}).unwrap();
        let rest = train(&mut q, &mut st2, &windows, &cfg, &full_cfg, |_| {}).unwrap();
        let joined: Vec<_> = first.into_iter().chain(rest).collect();
        assert_eq!(joined, full);
        assert_eq!(p, q);
    }

    #[test]
    fn thread_count_does_not_change_gradients() {
        let (cfg, frames) = setup();
        let windows = window_triplets(&frames).unwrap();
        let p = ModelParams::init(&mut ChaCha8Rng::seed_from_u64(0), &cfg);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let a = one.install(|| batch_gradients(&p, &windows, &cfg)).unwrap().unwrap();
        let b = batch_gradients(&p, &windows, &cfg).unwrap().unwrap();
        assert_eq!(a, b);
    }
}
