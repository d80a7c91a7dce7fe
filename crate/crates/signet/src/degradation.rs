//! Latent degradation estimation and the coarse-from-target bridge.
//!
//! The degradation network maps denoised coarse depth to a latent
//! per-pixel field D; a pooled dense head turns D into a small
//! simplex-normalized convolution kernel K (softmax keeps it positive with
//! sum 1, which rules out the degenerate all-zero kernel). Applying K with
//! reflect padding plus optional additive noise realizes the bridge
//! `coarse = K ⊗ target + n` that the self-supervised loss trains against.

use crate::autodiff::{Tape, Var};
use crate::data::{DepthMap, FeatureMap};
use crate::error::{Result, SignetError};
use crate::nn::{Bound, Conv2d, Dense, ParamReg, ParamStore, ResidualGroup};
use crate::par;
use crate::rng::Rng;
#[cfg(test)]
use crate::tensor::Tensor;

/// Millimeter depth is scaled by this before entering any network and the
/// decoder output is scaled back by the same factor. The full indoor range
/// maps to [0, 1], keeping depth features on the same footing as RGB.
pub const DEPTH_SCALE_MM: f64 = 10_000.0;

/// Simplex-normalized k x k convolution kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationKernel {
    weights: Vec<f64>,
    k: usize,
}

impl DegradationKernel {
    pub fn new(k: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != k * k {
            return Err(SignetError::shape(
                "DegradationKernel::new",
                format!("{k}x{k}"),
                format!("{} weights", weights.len()),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || weights.iter().any(|w| *w < 0.0) {
            return Err(SignetError::Parameter {
                name: "DegradationKernel".into(),
                reason: format!("weights must be nonnegative and sum to 1 (sum = {sum})"),
            });
        }
        Ok(DegradationKernel { weights, k })
    }

    /// Identity kernel: 1 at the center, 0 elsewhere.
    pub fn delta(k: usize) -> Self {
        assert!(k % 2 == 1, "delta kernel needs odd k");
        let mut weights = vec![0.0; k * k];
        weights[(k / 2) * k + k / 2] = 1.0;
        DegradationKernel { weights, k }
    }

    /// Uniform averaging kernel.
    pub fn uniform(k: usize) -> Self {
        DegradationKernel {
            weights: vec![1.0 / (k * k) as f64; k * k],
            k,
        }
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn at(&self, ky: usize, kx: usize) -> f64 {
        self.weights[ky * self.k + kx]
    }
}

/// Additive noise model of the bridge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseModel {
    None,
    Gaussian { sigma_mm: f64 },
}

impl NoiseModel {
    pub fn gaussian(sigma_mm: f64) -> Self {
        assert!(sigma_mm >= 0.0);
        NoiseModel::Gaussian { sigma_mm }
    }
}

// ---------------------------------------------------------------------------
// Degradation network
// ---------------------------------------------------------------------------

/// Conv stem + two residual groups + 1x1 head, all at the latent width.
#[derive(Clone, Debug)]
pub struct DegradationNet {
    stem: Conv2d,
    groups: Vec<ResidualGroup>,
    pub(crate) head: Conv2d,
    channels: usize,
}

impl DegradationNet {
    pub fn new(reg: &mut ParamReg, name: &str, channels: usize, k: usize, reduction: usize) -> Self {
        DegradationNet {
            stem: Conv2d::new(reg, &format!("{name}.stem"), 1, channels, k),
            groups: (0..2)
                .map(|g| {
                    ResidualGroup::new(reg, &format!("{name}.group{g}"), channels, 2, k, reduction)
                })
                .collect(),
            head: Conv2d::with_gain(reg, &format!("{name}.head"), channels, channels, 1, crate::nn::TAIL_GAIN),
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Tape forward from normalized depth (1, H, W) to the latent field.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, z_norm: Var) -> Var {
        let mut h = self.stem.forward(tape, bound, z_norm);
        for group in &self.groups {
            h = group.forward(tape, bound, h);
        }
        self.head.forward(tape, bound, h)
    }
}

/// Pooled dense head producing kernel logits from the latent field.
#[derive(Clone, Debug)]
pub struct KernelHead {
    pub(crate) dense: Dense,
    k: usize,
}

impl KernelHead {
    /// Zero-initialized so the initial kernel is exactly uniform.
    pub fn new(reg: &mut ParamReg, name: &str, channels: usize, k: usize) -> Self {
        KernelHead {
            dense: Dense::new_zeroed(reg, name, channels, k * k, true),
            k,
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.k
    }

    /// (C_d, H, W) latent -> (1, 1, k, k) simplex kernel.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, d: Var) -> Var {
        let (c, _, _) = tape.value(d).dims3();
        let pooled = tape.gap(d);
        let row = tape.reshape(pooled, &[1, c]);
        let logits = self.dense.forward(tape, bound, row);
        let probs = tape.softmax_flat(logits);
        tape.reshape(probs, &[1, 1, self.k, self.k])
    }
}

// ---------------------------------------------------------------------------
// Spec-facing operations
// ---------------------------------------------------------------------------

/// Runs the degradation network on a dense depth map (inference path).
pub fn estimate_degradation(
    z_hat: &DepthMap,
    net: &DegradationNet,
    store: &ParamStore,
) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let scaled = z_hat.to_tensor().map(|v| v / DEPTH_SCALE_MM);
    let input = tape.constant(scaled);
    let d = net.forward(&mut tape, &bound, input);
    FeatureMap::new(tape.value(d).clone())
}

/// Pools a latent field through the kernel head (inference path).
pub fn kernel_from_degradation(
    d: &FeatureMap,
    head: &KernelHead,
    store: &ParamStore,
) -> Result<DegradationKernel> {
    let (c, _, _) = d.dims();
    if store.get(head.dense.w).shape()[0] != c {
        return Err(SignetError::Config(format!(
            "kernel head expects {} channels, field has {c}",
            store.get(head.dense.w).shape()[0]
        )));
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let input = tape.constant(d.tensor().clone());
    let kv = head.forward(&mut tape, &bound, input);
    DegradationKernel::new(head.k, tape.value(kv).data().to_vec())
}

/// Applies `coarse = K ⊗ depth + noise` with reflect padding at the input
/// resolution; negative noisy results clamp to 0 mm to stay in the depth
/// domain. Deterministic per seed.
pub fn apply_degradation(
    y: &DepthMap,
    kernel: &DegradationKernel,
    noise: &NoiseModel,
    seed: u64,
) -> DepthMap {
    let (h, w) = (y.height(), y.width());
    let k = kernel.size();
    let r = (k / 2) as isize;
    let src = y.values();
    let mut out = vec![0.0; h * w];
    par::for_each_chunk_mut(&mut out, w, |row, chunk| {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..k {
                let sy = crate::densify::reflect_index(row as isize + ky as isize - r, h);
                for kx in 0..k {
                    let sx = crate::densify::reflect_index(x as isize + kx as isize - r, w);
                    acc += kernel.at(ky, kx) * src[sy * w + sx];
                }
            }
            chunk[x] = acc;
        }
    });
    if let NoiseModel::Gaussian { sigma_mm } = noise {
        if *sigma_mm > 0.0 {
            let mut rng = Rng::stream(seed, "degradation-noise");
            for v in out.iter_mut() {
                *v = (*v + sigma_mm * rng.normal()).max(0.0);
            }
        }
    }
    DepthMap::new(h, w, out).expect("kernel is a convex combination of finite depths")
}

/// Fixture generator: returns `(target, degraded)` for bridge experiments.
pub fn simulate_degraded_pair(
    y: &DepthMap,
    kernel: &DegradationKernel,
    noise: &NoiseModel,
    seed: u64,
) -> (DepthMap, DepthMap) {
    let z = apply_degradation(y, kernel, noise, seed);
    (y.clone(), z)
}
