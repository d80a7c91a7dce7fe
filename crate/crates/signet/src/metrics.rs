//! Training objectives and evaluation metrics.
//!
//! Losses are means over pixels in millimeters: the reconstruction term is
//! an L1 over the valid set, the degradation term compares the kernel-
//! degraded prediction against the coarse depth over all pixels, and the
//! total is `l_r + lambda * l_d`. Metrics follow the usual depth-completion
//! definitions; REL divides by the ground truth and the delta accuracies
//! use thresholds 1.25^i.
//!
//! Each objective exists twice: a pure f64 version for logging/evaluation
//! and a tape version for training. Both are checked against scalar-loop
//! oracles in the tests.

use crate::autodiff::{Tape, Var};
use crate::data::{DepthMap, ValidPixelSet};
use crate::degradation::DegradationKernel;
use crate::error::{Result, SignetError};
use crate::tensor::Tensor;

/// Loss components of one step, in millimeters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_r: f64,
    pub l_d: f64,
    pub l_t: f64,
    pub lambda: f64,
}

impl LossReport {
    pub fn new(l_r: f64, l_d: f64, lambda: f64) -> Result<Self> {
        let l_t = loss_total(l_r, l_d, lambda)?;
        Ok(LossReport {
            l_r,
            l_d,
            l_t,
            lambda,
        })
    }
}

/// Evaluation metrics; rmse in mm, rel dimensionless, delta in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub rmse: f64,
    pub rel: f64,
    pub delta: [f64; 3],
}

// ---------------------------------------------------------------------------
// Pure losses
// ---------------------------------------------------------------------------

/// Mean absolute error over the valid pixel set, in mm.
pub fn loss_reconstruction(y: &DepthMap, y_gt: &DepthMap, valid: &ValidPixelSet) -> Result<f64> {
    check_dims(y, y_gt, valid)?;
    let count = valid.count();
    if count == 0 {
        return Err(SignetError::MetricDomain(
            "empty valid pixel set".into(),
        ));
    }
    let mut acc = 0.0;
    for ((p, g), &ok) in y.values().iter().zip(y_gt.values()).zip(valid.mask()) {
        if ok {
            acc += (p - g).abs();
        }
    }
    Ok(acc / count as f64)
}

/// Mean absolute difference between the degraded prediction and the coarse
/// depth, over all pixels.
pub fn loss_degradation(y: &DepthMap, z: &DepthMap, kernel: &DegradationKernel) -> Result<f64> {
    if y.height() != z.height() || y.width() != z.width() {
        return Err(SignetError::shape(
            "loss_degradation",
            format!("{}x{}", y.height(), y.width()),
            format!("{}x{}", z.height(), z.width()),
        ));
    }
    let degraded =
        crate::degradation::apply_degradation(y, kernel, &crate::degradation::NoiseModel::None, 0);
    let n = (y.height() * y.width()) as f64;
    Ok(degraded
        .values()
        .iter()
        .zip(z.values())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// `l_r + lambda * l_d`; rejects negative components.
pub fn loss_total(l_r: f64, l_d: f64, lambda: f64) -> Result<f64> {
    if l_r < 0.0 || l_d < 0.0 {
        return Err(SignetError::Parameter {
            name: "loss_total".into(),
            reason: format!("components must be nonnegative ({l_r}, {l_d})"),
        });
    }
    Ok(l_r + lambda * l_d)
}

// ---------------------------------------------------------------------------
// Tape losses (training path)
// ---------------------------------------------------------------------------

/// L1 reconstruction loss as a tape scalar; `y_mm` is a (1, H, W) variable.
pub fn loss_reconstruction_var(
    tape: &mut Tape,
    y_mm: Var,
    y_gt: &DepthMap,
    valid: &ValidPixelSet,
) -> Var {
    let (_, h, w) = tape.value(y_mm).dims3();
    assert_eq!((h, w), (y_gt.height(), y_gt.width()));
    let count = valid.count();
    assert!(count > 0, "empty valid set");
    let gt = tape.constant(y_gt.to_tensor());
    let diff = tape.sub(y_mm, gt);
    let absdiff = tape.abs(diff);
    let mask = Tensor::from_vec(
        &[1, h, w],
        valid.mask().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    );
    let masked = tape.mul_const(absdiff, mask);
    let total = tape.sum_all(masked);
    tape.scale(total, 1.0 / count as f64)
}

/// Degradation bridge loss as a tape scalar. `kernel` is a (1, 1, k, k)
/// variable; gradients flow into both the prediction and the kernel.
pub fn loss_degradation_var(tape: &mut Tape, y_mm: Var, kernel: Var, z: &DepthMap) -> Var {
    let (_, h, w) = tape.value(y_mm).dims3();
    assert_eq!((h, w), (z.height(), z.width()));
    let k = tape.value(kernel).shape()[3];
    let padded = tape.pad_reflect(y_mm, k / 2);
    let degraded = tape.conv2d_valid(padded, kernel);
    let zt = tape.constant(z.to_tensor());
    let diff = tape.sub(degraded, zt);
    let absdiff = tape.abs(diff);
    tape.mean_all(absdiff)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// RMSE / REL / delta accuracies over exactly the valid set. Ratio metrics
/// require strictly positive prediction and ground truth inside the set.
pub fn compute_metrics(y: &DepthMap, y_gt: &DepthMap, valid: &ValidPixelSet) -> Result<MetricReport> {
    check_dims(y, y_gt, valid)?;
    let count = valid.count();
    if count == 0 {
        return Err(SignetError::MetricDomain("empty valid pixel set".into()));
    }
    let mut sq = 0.0;
    let mut rel = 0.0;
    let mut hits = [0usize; 3];
    let thresholds = [1.25, 1.25f64.powi(2), 1.25f64.powi(3)];
    for ((&p, &g), &ok) in y.values().iter().zip(y_gt.values()).zip(valid.mask()) {
        if !ok {
            continue;
        }
        if p <= 0.0 || g <= 0.0 {
            return Err(SignetError::MetricDomain(format!(
                "ratio metrics need positive depths inside the valid set (pred {p}, gt {g})"
            )));
        }
        let d = g - p;
        sq += d * d;
        rel += d.abs() / g;
        let ratio = (g / p).max(p / g);
        for (i, t) in thresholds.iter().enumerate() {
            if ratio < *t {
                hits[i] += 1;
            }
        }
    }
    let n = count as f64;
    Ok(MetricReport {
        rmse: (sq / n).sqrt(),
        rel: rel / n,
        delta: [
            100.0 * hits[0] as f64 / n,
            100.0 * hits[1] as f64 / n,
            100.0 * hits[2] as f64 / n,
        ],
    })
}

fn check_dims(y: &DepthMap, y_gt: &DepthMap, valid: &ValidPixelSet) -> Result<()> {
    if y.height() != y_gt.height()
        || y.width() != y_gt.width()
        || valid.height() != y.height()
        || valid.width() != y.width()
    {
        return Err(SignetError::shape(
            "metrics",
            format!("{}x{}", y_gt.height(), y_gt.width()),
            format!("{}x{}", y.height(), y.width()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn depth(h: usize, w: usize, seed: u64, lo: f64, hi: f64) -> DepthMap {
        let mut rng = Rng::new(seed);
        DepthMap::new(h, w, (0..h * w).map(|_| rng.range(lo, hi)).collect()).unwrap()
    }

    #[test]
    fn reconstruction_identity_and_offset() {
        let gt = depth(6, 6, 1, 500.0, 5000.0);
        let valid = ValidPixelSet::all(6, 6);
        assert_eq!(loss_reconstruction(&gt, &gt, &valid).unwrap(), 0.0);
        let shifted =
            DepthMap::new(6, 6, gt.values().iter().map(|v| v + 1.0).collect()).unwrap();
        let l = loss_reconstruction(&shifted, &gt, &valid).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_matches_scalar_loop() {
        let mut rng = Rng::new(2);
        for trial in 0..20 {
            let (h, w) = (5, 7);
            let a = depth(h, w, 10 + trial, 100.0, 8000.0);
            let b = depth(h, w, 40 + trial, 100.0, 8000.0);
            let mask: Vec<bool> = (0..h * w).map(|_| rng.uniform() < 0.7).collect();
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let valid = ValidPixelSet::new(h, w, mask.clone()).unwrap();
            let fast = loss_reconstruction(&a, &b, &valid).unwrap();
            let mut acc = 0.0;
            let mut n = 0.0;
            for i in 0..h * w {
                if mask[i] {
                    acc += (a.values()[i] - b.values()[i]).abs();
                    n += 1.0;
                }
            }
            assert!((fast - acc / n).abs() < 1e-9);
        }
    }

    #[test]
    fn degradation_loss_delta_kernel_cases() {
        let gt = depth(8, 8, 3, 500.0, 4000.0);
        let delta = DegradationKernel::delta(3);
        assert_eq!(loss_degradation(&gt, &gt, &delta).unwrap(), 0.0);
        let shifted =
            DepthMap::new(8, 8, gt.values().iter().map(|v| v + 5.0).collect()).unwrap();
        let l = loss_degradation(&shifted, &gt, &delta).unwrap();
        assert!((l - 5.0).abs() < 1e-9);
    }

    #[test]
    fn degradation_loss_matches_naive_oracle() {
        let y = depth(6, 5, 4, 300.0, 6000.0);
        let z = depth(6, 5, 5, 300.0, 6000.0);
        let kernel = DegradationKernel::uniform(3);
        let fast = loss_degradation(&y, &z, &kernel).unwrap();
        // naive reflect conv + mean abs
        let reflect = crate::densify::reflect_index;
        let mut acc = 0.0;
        for yy in 0..6isize {
            for xx in 0..5isize {
                let mut conv = 0.0;
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        conv += y.at(reflect(yy + dy, 6), reflect(xx + dx, 5)) / 9.0;
                    }
                }
                acc += (conv - z.at(yy as usize, xx as usize)).abs();
            }
        }
        assert!((fast - acc / 30.0).abs() < 1e-9);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert!((loss_total(1.0, 2.0, 0.1).unwrap() - 1.2).abs() < 1e-12);
        assert_eq!(loss_total(3.5, 0.0, 0.7).unwrap(), 3.5);
        assert!((loss_total(0.0, 4.0, 0.1).unwrap() - 0.4).abs() < 1e-12);
        assert!(loss_total(-1.0, 0.0, 0.1).is_err());
        let report = LossReport::new(2.0, 3.0, 0.1).unwrap();
        assert!((report.l_t - (report.l_r + 0.1 * report.l_d)).abs() < 1e-9);
    }

    #[test]
    fn metric_identity_case() {
        let gt = depth(5, 5, 6, 400.0, 9000.0);
        let m = compute_metrics(&gt, &gt, &ValidPixelSet::all(5, 5)).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.rel, 0.0);
        assert_eq!(m.delta, [100.0, 100.0, 100.0]);
    }

    #[test]
    fn metric_uniform_ratio_cases() {
        let gt = depth(4, 4, 7, 1000.0, 5000.0);
        // prediction = 1.3 * gt: ratio 1.3 fails delta1, passes delta2/3; rel = 0.3
        let scaled =
            DepthMap::new(4, 4, gt.values().iter().map(|v| v * 1.3).collect()).unwrap();
        let m = compute_metrics(&scaled, &gt, &ValidPixelSet::all(4, 4)).unwrap();
        assert_eq!(m.delta[0], 0.0);
        assert_eq!(m.delta[1], 100.0);
        assert_eq!(m.delta[2], 100.0);
        assert!((m.rel - 0.3).abs() < 1e-9);

        // prediction = 2 * gt: rel = |gt - 2gt| / gt = 1
        let doubled =
            DepthMap::new(4, 4, gt.values().iter().map(|v| v * 2.0).collect()).unwrap();
        let m2 = compute_metrics(&doubled, &gt, &ValidPixelSet::all(4, 4)).unwrap();
        assert!((m2.rel - 1.0).abs() < 1e-9);
    }

    #[test]
    fn metrics_match_scalar_loop_oracle() {
        let mut rng = Rng::new(8);
        for trial in 0..100 {
            let (h, w) = (6, 6);
            let gt = depth(h, w, 100 + trial, 200.0, 9000.0);
            let pred = depth(h, w, 300 + trial, 200.0, 9000.0);
            let mask: Vec<bool> = (0..h * w).map(|_| rng.uniform() < 0.8).collect();
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let valid = ValidPixelSet::new(h, w, mask.clone()).unwrap();
            let m = compute_metrics(&pred, &gt, &valid).unwrap();

            let (mut sq, mut rel, mut n) = (0.0, 0.0, 0.0);
            let mut d = [0.0; 3];
            for i in 0..h * w {
                if !mask[i] {
                    continue;
                }
                let (p, g) = (pred.values()[i], gt.values()[i]);
                sq += (g - p) * (g - p);
                rel += (g - p).abs() / g;
                let ratio = (g / p).max(p / g);
                for (j, t) in [1.25, 1.5625, 1.953125].iter().enumerate() {
                    if ratio < *t {
                        d[j] += 1.0;
                    }
                }
                n += 1.0;
            }
            assert!((m.rmse - (sq / n).sqrt()).abs() < 1e-9);
            assert!((m.rel - rel / n).abs() < 1e-9);
            for j in 0..3 {
                assert!((m.delta[j] - 100.0 * d[j] / n).abs() < 1e-9);
            }
            // nested thresholds
            assert!(m.delta[0] <= m.delta[1] && m.delta[1] <= m.delta[2]);
        }
    }

    #[test]
    fn pointwise_error_shrink_never_increases_rmse_or_rel() {
        let mut rng = Rng::new(9);
        for trial in 0..20 {
            let gt = depth(5, 5, 500 + trial, 500.0, 5000.0);
            let pred = depth(5, 5, 600 + trial, 500.0, 5000.0);
            // contract each error toward zero by a random factor <= 1
            let contracted = DepthMap::new(
                5,
                5,
                pred.values()
                    .iter()
                    .zip(gt.values())
                    .map(|(&p, &g)| g + (p - g) * rng.uniform())
                    .collect(),
            )
            .unwrap();
            let valid = ValidPixelSet::all(5, 5);
            let before = compute_metrics(&pred, &gt, &valid).unwrap();
            let after = compute_metrics(&contracted, &gt, &valid).unwrap();
            assert!(after.rmse <= before.rmse + 1e-12);
            assert!(after.rel <= before.rel + 1e-12);
        }
    }

    #[test]
    fn nonpositive_values_are_domain_errors() {
        let gt = depth(3, 3, 10, 400.0, 900.0);
        let mut bad = gt.values().to_vec();
        bad[4] = 0.0;
        let pred = DepthMap::new(3, 3, bad).unwrap();
        assert!(matches!(
            compute_metrics(&pred, &gt, &ValidPixelSet::all(3, 3)),
            Err(SignetError::MetricDomain(_))
        ));
        // but fine when the zero pixel is outside the valid set
        let mut mask = vec![true; 9];
        mask[4] = false;
        let valid = ValidPixelSet::new(3, 3, mask).unwrap();
        assert!(compute_metrics(&pred, &gt, &valid).is_ok());
    }

    #[test]
    fn tape_losses_match_pure_losses() {
        let gt = depth(7, 6, 11, 300.0, 7000.0);
        let pred = depth(7, 6, 12, 300.0, 7000.0);
        let coarse = depth(7, 6, 13, 300.0, 7000.0);
        let valid = ValidPixelSet::all(7, 6);
        let kernel = DegradationKernel::uniform(3);

        let mut tape = Tape::new();
        let y = tape.leaf(pred.to_tensor());
        let kv = tape.leaf(Tensor::from_vec(&[1, 1, 3, 3], kernel.weights().to_vec()));
        let lr = loss_reconstruction_var(&mut tape, y, &gt, &valid);
        let ld = loss_degradation_var(&mut tape, y, kv, &coarse);

        let lr_pure = loss_reconstruction(&pred, &gt, &valid).unwrap();
        let ld_pure = loss_degradation(&pred, &coarse, &kernel).unwrap();
        assert!((tape.value(lr).item() - lr_pure).abs() < 1e-9);
        assert!((tape.value(ld).item() - ld_pure).abs() < 1e-9);

        // gradients flow to both prediction and kernel
        let scaled = tape.scale(ld, 0.1);
        let total = tape.add(lr, scaled);
        let grads = tape.backward(total);
        assert!(grads.get(y).unwrap().max_abs() > 0.0);
        assert!(grads.get(kv).unwrap().max_abs() > 0.0);
    }

}
