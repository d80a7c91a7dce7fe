//! Adam training loop over prepared samples.
//!
//! Samples carry their densified/denoised coarse depth so the classical
//! fill runs once, not per step. Each step builds a fresh tape, computes
//! `l_t = l_r + lambda * l_d`, backpropagates, averages gradients over the
//! batch in sample order, and applies Adam. All randomness (shuffling,
//! augmentation) draws from one stream whose state is checkpointed, so an
//! interrupted run resumed from a checkpoint replays the remaining steps
//! bit-for-bit.

use std::path::Path;

use crate::data::{DepthMap, RGBImage, SparseDepthMap, ValidPixelSet};
use crate::error::{Result, SignetError};
use crate::metrics::{loss_degradation, loss_reconstruction_var, loss_degradation_var, LossReport};
use crate::model::{save_checkpoint, NetworkConfig, SigNet, TrainState};
use crate::nn::ParamStore;
use crate::par;
use crate::rng::Rng;
use crate::synth::{sparsify, DensitySpec, SyntheticScene};
use crate::tensor::Tensor;

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Sparsification density of the training inputs.
    pub density: f64,
    pub crop_size: usize,
    /// Random crop + horizontal flip (depth normalization is always on).
    pub augment: bool,
    /// Optional hard step cutoff across all epochs.
    pub max_steps: Option<usize>,
    /// Stop gradients from the bridge loss into the prediction.
    pub ld_detach_prediction: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            learning_rate: 1e-4,
            weight_decay: 1e-6,
            lambda: 0.1,
            batch_size: 2,
            seed: 0,
            density: 0.05,
            crop_size: 96,
            augment: true,
            max_steps: None,
            ld_detach_prediction: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(SignetError::Config("learning_rate must be > 0".into()));
        }
        if self.epochs < 1 {
            return Err(SignetError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(SignetError::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(SignetError::Config("betas must lie in [0, 1)".into()));
        }
        if self.lambda < 0.0 {
            return Err(SignetError::Config("lambda must be >= 0".into()));
        }
        Ok(())
    }
}

/// One prepared training sample with its cached classical fill.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub gt: DepthMap,
    pub rgb: RGBImage,
    pub sparse: SparseDepthMap,
    pub coarse: DepthMap,
    pub denoised: DepthMap,
}

/// Sparsifies and densifies every scene once, up front.
pub fn prepare_samples(
    net: &SigNet,
    scenes: &[SyntheticScene],
    density: f64,
    seed: u64,
) -> Result<Vec<TrainSample>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, scene)| prepare_sample(net, scene, density, seed.wrapping_add(i as u64)))
        .collect()
}

pub fn prepare_sample(
    net: &SigNet,
    scene: &SyntheticScene,
    density: f64,
    seed: u64,
) -> Result<TrainSample> {
    let sparse = sparsify(&scene.depth_gt, &DensitySpec::uniform(density), seed)?;
    let coarse = net.densify(&sparse, Some(&scene.rgb))?;
    let denoised = net.denoise_coarse(&coarse);
    Ok(TrainSample {
        gt: scene.depth_gt.clone(),
        rgb: scene.rgb.clone(),
        sparse,
        coarse,
        denoised,
    })
}

/// Loss components logged per optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_r: f64,
    pub l_d: f64,
    pub l_t: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,l_r_mm,l_d_mm,l_t_mm\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.step, s.epoch, s.l_r, s.l_d, s.l_t
            ));
        }
        out
    }
}

/// Adam with decoupled-from-nothing classic L2 weight decay (gradient
/// augmentation), matching the documented optimizer settings.
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            m: store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            v: store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            t: 0,
        }
    }

    pub fn from_state(m: Vec<Tensor>, v: Vec<Tensor>, t: u64) -> Self {
        Adam { m, v, t }
    }

    pub fn state(&self) -> (&[Tensor], &[Tensor], u64) {
        (&self.m, &self.v, self.t)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (idx, id) in ids.into_iter().enumerate() {
            let param = store.get_mut(id);
            let g = &grads[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..param.len() {
                let grad = g.data()[i] + cfg.weight_decay * param.data()[i];
                let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * grad;
                let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * grad * grad;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + 1e-8);
                param.data_mut()[i] -= cfg.learning_rate * update;
            }
        }
    }
}

struct SampleView {
    gt: DepthMap,
    rgb: RGBImage,
    coarse: DepthMap,
    denoised: DepthMap,
    sparse_values: DepthMap,
}

/// Crop/flip all cached fields together. The coarse fill was computed on
/// the full frame, so crops keep its border context; that is an
/// augmentation choice, not part of any densifier contract.
fn augmented_view(sample: &TrainSample, cfg: &TrainConfig, rng: &mut Rng) -> SampleView {
    let (h, w) = (sample.gt.height(), sample.gt.width());
    let crop = cfg.crop_size.min(h).min(w);
    let (do_crop, do_flip, oy, ox) = if cfg.augment {
        let oy = if h > crop { rng.below(h - crop + 1) } else { 0 };
        let ox = if w > crop { rng.below(w - crop + 1) } else { 0 };
        (crop < h || crop < w, rng.uniform() < 0.5, oy, ox)
    } else {
        (false, false, 0, 0)
    };
    let take = |d: &[f64], src_w: usize| -> Vec<f64> {
        let (ch, cw) = if do_crop { (crop, crop) } else { (h, w) };
        let mut out = Vec::with_capacity(ch * cw);
        for y in 0..ch {
            for x in 0..cw {
                let sx = if do_flip { cw - 1 - x } else { x };
                out.push(d[(oy + y) * src_w + ox + sx]);
            }
        }
        out
    };
    let (ch, cw) = if do_crop { (crop, crop) } else { (h, w) };
    let depth = |d: &DepthMap| DepthMap::new(ch, cw, take(d.values(), w)).expect("crop");
    let rgb = {
        let n = h * w;
        let mut planes = Vec::with_capacity(3 * ch * cw);
        for c in 0..3 {
            planes.extend(take(&sample.rgb.channels()[c * n..(c + 1) * n], w));
        }
        RGBImage::new(ch, cw, planes).expect("crop")
    };
    SampleView {
        gt: depth(&sample.gt),
        rgb,
        coarse: depth(&sample.coarse),
        denoised: depth(&sample.denoised),
        sparse_values: DepthMap::new(ch, cw, take(sample.sparse.values(), w)).expect("crop"),
    }
}

fn step_losses(
    net: &SigNet,
    store: &ParamStore,
    view: &SampleView,
    cfg: &TrainConfig,
) -> (LossReport, Vec<Tensor>) {
    let mut tape = crate::autodiff::Tape::new();
    let bound = store.bind(&mut tape);
    // without densification the network sees the raw sparse values
    let depth_input = if net.config().densify_enabled {
        &view.denoised
    } else {
        &view.sparse_values
    };
    let out = net.forward_on_tape(&mut tape, &bound, depth_input, &view.rgb);
    let valid = ValidPixelSet::all(view.gt.height(), view.gt.width());
    let l_r = loss_reconstruction_var(&mut tape, out.y_mm, &view.gt, &valid);

    let bridge_active = cfg.lambda > 0.0 && out.kernel.is_some();
    let total = if bridge_active {
        let kernel = out.kernel.unwrap();
        let y_for_bridge = if cfg.ld_detach_prediction {
            let detached = tape.value(out.y_mm).clone();
            tape.constant(detached)
        } else {
            out.y_mm
        };
        let l_d = loss_degradation_var(&mut tape, y_for_bridge, kernel, &view.coarse);
        let scaled = tape.scale(l_d, cfg.lambda);
        let t = tape.add(l_r, scaled);
        (t, Some(l_d))
    } else {
        (l_r, None)
    };
    let (l_t_var, l_d_var) = total;

    let l_r_val = tape.value(l_r).item();
    let l_t_val = tape.value(l_t_var).item();
    // when lambda = 0 the bridge term is excluded from the graph and only
    // reported for the log
    let l_d_val = match l_d_var {
        Some(v) => tape.value(v).item(),
        None => match (&out.kernel, cfg.lambda == 0.0) {
            (Some(kv), true) => {
                let kernel = crate::degradation::DegradationKernel::new(
                    net.config().kernel_k,
                    tape.value(*kv).data().to_vec(),
                )
                .expect("softmax kernel is on the simplex");
                let pred = DepthMap::from_tensor(&tape.value(out.y_mm).map(|v| v.max(0.0)))
                    .expect("finite prediction");
                loss_degradation(&pred, &view.coarse, &kernel).unwrap_or(0.0)
            }
            _ => 0.0,
        },
    };

    let grads = tape.backward(l_t_var);
    let grad_tensors: Vec<Tensor> = store
        .ids()
        .enumerate()
        .map(|(i, id)| grads.get_or_zeros(bound.vars()[i], store.get(id).shape()))
        .collect();
    let report = LossReport {
        l_r: l_r_val,
        l_d: l_d_val,
        l_t: l_t_val,
        lambda: cfg.lambda,
    };
    (report, grad_tensors)
}

/// Outcome of [`train`]: the log plus the final optimizer state.
pub struct TrainOutcome {
    pub log: TrainLog,
    pub final_step: usize,
    pub final_epoch: usize,
}

/// Runs the training loop, mutating `store` in place. When `ckpt_dir` is
/// set, a checkpoint with full train state lands there after every epoch.
/// `resume` restores optimizer state, step counter, and the rng stream.
/// `on_step` observes every step and may stop the run early by returning
/// false (the epoch checkpoint still lands first).
#[allow(clippy::too_many_arguments)]
pub fn train(
    net: &SigNet,
    store: &mut ParamStore,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    net_cfg: &NetworkConfig,
    ckpt_dir: Option<&Path>,
    resume: Option<TrainState>,
    mut on_step: impl FnMut(&StepRecord, &ParamStore) -> bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(SignetError::EmptyInput {
            context: "training needs at least one sample".into(),
        });
    }
    let mut log = TrainLog::default();
    let (mut adam, mut rng, start_epoch, mut step) = match resume {
        Some(state) => (
            Adam::from_state(state.adam_m, state.adam_v, state.step),
            Rng::restore(state.rng_state),
            state.epoch as usize,
            state.step as usize,
        ),
        None => (
            Adam::new(store),
            Rng::stream(cfg.seed, "train"),
            0,
            0,
        ),
    };

    let mut stop_requested = false;
    'epochs: for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            if let Some(limit) = cfg.max_steps {
                if step >= limit {
                    break 'epochs;
                }
            }
            // augmentation draws happen in deterministic sample order
            let views: Vec<SampleView> = batch
                .iter()
                .map(|&i| augmented_view(&samples[i], cfg, &mut rng))
                .collect();
            // per-sample graphs are independent; results are reduced in
            // batch order, so parallelism cannot change the sums
            let results = par::map_indexed(views.len(), |i| step_losses(net, store, &views[i], cfg));

            let scale = 1.0 / results.len() as f64;
            let mut mean_grads: Vec<Tensor> =
                store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
            let (mut l_r, mut l_d, mut l_t) = (0.0, 0.0, 0.0);
            for (report, grads) in &results {
                l_r += report.l_r * scale;
                l_d += report.l_d * scale;
                l_t += report.l_t * scale;
                for (acc, g) in mean_grads.iter_mut().zip(grads.iter()) {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b * scale;
                    }
                }
            }
            if !(l_t.is_finite() && l_r.is_finite() && l_d.is_finite()) {
                return Err(SignetError::Diverged {
                    step,
                    detail: format!("non-finite loss (l_r {l_r}, l_d {l_d}, l_t {l_t})"),
                });
            }
            adam.step(store, &mean_grads, cfg);
            step += 1;
            let record = StepRecord {
                step,
                epoch,
                l_r,
                l_d,
                l_t,
            };
            let keep_going = on_step(&record, store);
            log.steps.push(record);
            if !keep_going {
                stop_requested = true;
                break;
            }
        }
        let last_epoch = stop_requested;
        if let Some(dir) = ckpt_dir {
            std::fs::create_dir_all(dir).map_err(|e| SignetError::io(dir, e))?;
            let (m, v, t) = adam.state();
            let state = TrainState {
                step: t,
                epoch: (epoch + 1) as u64,
                rng_state: rng.state(),
                adam_m: m.to_vec(),
                adam_v: v.to_vec(),
            };
            let path = dir.join(format!("epoch_{:04}.ckpt", epoch + 1));
            save_checkpoint(&path, store, net_cfg.config_hash(), Some(&state))?;
        }
        if last_epoch {
            break;
        }
    }
    Ok(TrainOutcome {
        final_step: step,
        final_epoch: cfg.epochs,
        log,
    })
}
