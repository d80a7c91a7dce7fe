//! Degradation-aware decomposition and fusion.
//!
//! Three stages, all driven by the latent degradation field:
//! 1. [`SpectrumGate`]: a sigmoid mask over DCT coefficients selects the
//!    image-feature content worth keeping (high-frequency detail near
//!    degraded edges), applied as `f̂_img = idct2(m ⊙ dct2(f_ac(Σ D_i))) ⊙ f_img`.
//! 2. [`BandConditioner`]: a gated recurrent convolution cell folds the
//!    band components D_i into the fused feature one band at a time.
//! 3. [`ConditionalScan`]: the conditioned feature generates the B, C, Δ
//!    parameters of a selective state-space recurrence that mixes the
//!    flattened RGB-D sequence globally.
//!
//! The fusion block concatenates gated image features with depth features,
//! runs the scan, and adds the pre-scan feature back as a residual.

use crate::autodiff::{Tape, Var};
use crate::data::FeatureMap;
use crate::dct::{band_mask, decompose_bands};
use crate::error::{Result, SignetError};
use crate::nn::{Bound, Conv2d, Dense, ParamId, ParamReg, ParamStore};
use crate::tensor::Tensor;

/// Shape/width configuration shared by the fusion stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionDims {
    /// Feature channels C.
    pub channels: usize,
    /// Degradation latent channels C_d.
    pub degradation_channels: usize,
    /// SSM state dimension N.
    pub state_dim: usize,
    /// Number of DCT bands n.
    pub bands: usize,
}

/// Splits a degradation field variable into `n` band-limited components on
/// the tape (dct -> fixed 0/1 coefficient mask per band -> idct); the masks
/// partition the grid, so the components sum back to the field.
pub fn decompose_bands_var(tape: &mut Tape, d: Var, n: usize) -> Vec<Var> {
    let (c, h, w) = tape.value(d).dims3();
    let coeffs = tape.dct2(d);
    (0..n)
        .map(|i| {
            let mask = band_mask(h, w, n, i);
            let full = Tensor::from_fn(&[c, h, w], |idx| mask.data()[idx % (h * w)]);
            let masked = tape.mul_const(coeffs, full);
            tape.idct2(masked)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Spectrum gate
// ---------------------------------------------------------------------------

/// Mask-based selection of image features in the DCT coefficient domain.
#[derive(Clone, Debug)]
pub struct SpectrumGate {
    reduce_img: Conv2d,
    reduce_d: Conv2d,
    mask1: Conv2d,
    mask2: Conv2d,
    combine1: Conv2d,
    combine2: Conv2d,
}

impl SpectrumGate {
    pub fn new(reg: &mut ParamReg, name: &str, dims: FusionDims, k: usize) -> Self {
        let c = dims.channels;
        let cd = dims.degradation_channels;
        SpectrumGate {
            reduce_img: Conv2d::new(reg, &format!("{name}.reduce_img"), c, c, 1),
            reduce_d: Conv2d::new(reg, &format!("{name}.reduce_d"), cd, c, 1),
            mask1: Conv2d::new(reg, &format!("{name}.mask1"), 2 * c, c, k),
            mask2: Conv2d::new(reg, &format!("{name}.mask2"), c, c, k),
            combine1: Conv2d::new(reg, &format!("{name}.combine1"), cd, c, k),
            combine2: Conv2d::with_gain(reg, &format!("{name}.combine2"), c, c, k, crate::nn::TAIL_GAIN),
        }
    }

    /// Returns `(mask, gated image feature)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        f_img: Var,
        d: Var,
        bands: &[Var],
    ) -> (Var, Var) {
        // m = sigmoid(convs(concat(dct2(reduce(f_img)), reduce(d))))
        let r_img = self.reduce_img.forward(tape, bound, f_img);
        let r_img_coeffs = tape.dct2(r_img);
        let r_d = self.reduce_d.forward(tape, bound, d);
        let cat = tape.concat_ch(&[r_img_coeffs, r_d]);
        let m1 = self.mask1.forward(tape, bound, cat);
        let m1 = tape.relu(m1);
        let m2 = self.mask2.forward(tape, bound, m1);
        let mask = tape.sigmoid(m2);

        // f_ac: add the band components, then convolutions
        let mut band_sum = bands[0];
        for &b in &bands[1..] {
            band_sum = tape.add(band_sum, b);
        }
        let ac = self.combine1.forward(tape, bound, band_sum);
        let ac = tape.relu(ac);
        let ac = self.combine2.forward(tape, bound, ac);

        // m̂ = idct2(m ⊙ dct2(f_ac)); gate the image feature spatially
        let ac_coeffs = tape.dct2(ac);
        let gated_coeffs = tape.mul(mask, ac_coeffs);
        let m_hat = tape.idct2(gated_coeffs);
        let selected = tape.mul(m_hat, f_img);
        (mask, selected)
    }
}

// ---------------------------------------------------------------------------
// Band-conditioned recurrence (gated recurrent convolution unit)
// ---------------------------------------------------------------------------

/// One shared gate/candidate conv pair applied over the band sequence:
/// `h_i = (1 - u_i) ⊙ h_{i-1} + u_i ⊙ tanh(conv(concat(h_{i-1}, D_i)))`
/// with `u_i = sigmoid(conv(concat(h_{i-1}, D_i)))` and `h_0` the input.
#[derive(Clone, Debug)]
pub struct BandConditioner {
    update: Conv2d,
    candidate: Conv2d,
}

impl BandConditioner {
    pub fn new(reg: &mut ParamReg, name: &str, dims: FusionDims, k: usize) -> Self {
        let cin = dims.channels + dims.degradation_channels;
        BandConditioner {
            update: Conv2d::new(reg, &format!("{name}.update"), cin, dims.channels, k),
            candidate: Conv2d::new(reg, &format!("{name}.candidate"), cin, dims.channels, k),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, f: Var, bands: &[Var]) -> Var {
        let mut h = f;
        for &band in bands {
            let cat = tape.concat_ch(&[h, band]);
            let u = self.update.forward(tape, bound, cat);
            let u = tape.sigmoid(u);
            let cand = self.candidate.forward(tape, bound, cat);
            let cand = tape.tanh(cand);
            // h = (1 - u) h + u cand
            let uh = tape.mul(u, h);
            let uc = tape.mul(u, cand);
            let keep = tape.sub(h, uh);
            h = tape.add(keep, uc);
        }
        h
    }
}

// ---------------------------------------------------------------------------
// Conditional selective scan
// ---------------------------------------------------------------------------

/// Scan traversal orders. Extra directions rerun the same recurrence on a
/// permuted sequence and average the results.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanDirections {
    /// Row-major forward (default).
    One,
    /// Row-major forward + reverse.
    Two,
    /// Row-major and column-major, both directions.
    Four,
}

impl ScanDirections {
    pub fn count(&self) -> usize {
        match self {
            ScanDirections::One => 1,
            ScanDirections::Two => 2,
            ScanDirections::Four => 4,
        }
    }
}

/// Selective-scan stage whose state parameters are generated from the
/// band-conditioned feature.
#[derive(Clone, Debug)]
pub struct ConditionalScan {
    conditioner: BandConditioner,
    head_b: Dense,
    head_c: Dense,
    head_delta: Dense,
    /// Per-channel Δ bias added before the softplus.
    delta_bias: ParamId,
    /// State matrix (C, N), initialized to -(1..N) per channel.
    state_a: ParamId,
    directions: ScanDirections,
}

impl ConditionalScan {
    pub fn new(
        reg: &mut ParamReg,
        name: &str,
        dims: FusionDims,
        k: usize,
        directions: ScanDirections,
    ) -> Self {
        let c = dims.channels;
        let n = dims.state_dim;
        let conditioner = BandConditioner::new(reg, &format!("{name}.gru"), dims, k);
        let head_b = Dense::new(reg, &format!("{name}.head_b"), c, n, true);
        // C starts at zero so the scan opens as a residual identity and its
        // output scale grows with training instead of compounding across
        // fusion iterations; Δ weights start at zero so the initial step
        // size is exactly softplus(bias) ~ 0.1
        let head_c = Dense::new_zeroed(reg, &format!("{name}.head_c"), c, n, true);
        let head_delta = Dense::new_zeroed(reg, &format!("{name}.head_delta"), c, c, false);
        let delta_bias = reg.constant(
            &format!("{name}.delta_bias"),
            &[c],
            (0.1f64.exp() - 1.0).ln(),
        );
        let state_a = {
            let t = Tensor::from_fn(&[c, n], |i| -(((i % n) + 1) as f64));
            reg.store.add(&format!("{name}.state_a"), t)
        };
        ConditionalScan {
            conditioner,
            head_b,
            head_c,
            head_delta,
            delta_bias,
            state_a,
            directions,
        }
    }

    /// (C, H, W) fused feature -> (C, H, W) scanned feature.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, f_rgbd: Var, bands: &[Var]) -> Var {
        let (_, h, w) = tape.value(f_rgbd).dims3();
        let conditioned = self.conditioner.forward(tape, bound, f_rgbd, bands);
        let cond_seq = tape.chw_to_seq(conditioned);
        let b = self.head_b.forward(tape, bound, cond_seq);
        let c_out = self.head_c.forward(tape, bound, cond_seq);
        let delta_pre = self.head_delta.forward(tape, bound, cond_seq);
        let delta_biased = tape.add_bias_rows(delta_pre, bound.var(self.delta_bias));
        let delta = tape.softplus(delta_biased);
        let x_seq = tape.chw_to_seq(f_rgbd);
        let a = bound.var(self.state_a);

        let mut acc: Option<Var> = None;
        for dir in 0..self.directions.count() {
            let perm = direction_permutation(dir, h, w);
            let y = match perm {
                None => tape.scan(x_seq, delta, a, b, c_out),
                Some(p) => {
                    let xp = tape.permute_rows(x_seq, p.clone());
                    let dp = tape.permute_rows(delta, p.clone());
                    let bp = tape.permute_rows(b, p.clone());
                    let cp = tape.permute_rows(c_out, p.clone());
                    let yp = tape.scan(xp, dp, a, bp, cp);
                    let inv = invert_permutation(&p);
                    tape.permute_rows(yp, inv)
                }
            };
            acc = Some(match acc {
                None => y,
                Some(prev) => tape.add(prev, y),
            });
        }
        let summed = acc.expect("at least one direction");
        let averaged = if self.directions.count() > 1 {
            tape.scale(summed, 1.0 / self.directions.count() as f64)
        } else {
            summed
        };
        tape.seq_to_chw(averaged, h, w)
    }
}

/// Sequence ordering for scan direction `dir`; `None` is the identity
/// (row-major forward).
fn direction_permutation(dir: usize, h: usize, w: usize) -> Option<Vec<usize>> {
    let len = h * w;
    match dir {
        0 => None,
        1 => Some((0..len).rev().collect()),
        2 => Some({
            // column-major forward
            let mut p = Vec::with_capacity(len);
            for x in 0..w {
                for y in 0..h {
                    p.push(y * w + x);
                }
            }
            p
        }),
        3 => Some({
            let mut p = Vec::with_capacity(len);
            for x in (0..w).rev() {
                for y in (0..h).rev() {
                    p.push(y * w + x);
                }
            }
            p
        }),
        _ => unreachable!("at most four scan directions"),
    }
}

fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &pi) in p.iter().enumerate() {
        inv[pi] = i;
    }
    inv
}

// ---------------------------------------------------------------------------
// Fusion block
// ---------------------------------------------------------------------------

/// Full degradation-aware fusion: spectrum gate, concat-conv merge,
/// conditional scan, residual add.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    gate: SpectrumGate,
    merge1: Conv2d,
    merge2: Conv2d,
    scan: ConditionalScan,
    dims: FusionDims,
}

impl FusionBlock {
    pub fn new(
        reg: &mut ParamReg,
        name: &str,
        dims: FusionDims,
        k: usize,
        directions: ScanDirections,
    ) -> Self {
        let c = dims.channels;
        FusionBlock {
            gate: SpectrumGate::new(reg, &format!("{name}.gate"), dims, k),
            merge1: Conv2d::new(reg, &format!("{name}.merge1"), 2 * c, c, k),
            merge2: Conv2d::with_gain(reg, &format!("{name}.merge2"), c, c, k, crate::nn::TAIL_GAIN),
            scan: ConditionalScan::new(reg, &format!("{name}.scan"), dims, k, directions),
            dims,
        }
    }

    pub fn dims(&self) -> FusionDims {
        self.dims
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        f_img: Var,
        f_dep: Var,
        d: Var,
        bands: &[Var],
    ) -> Var {
        let (_, selected) = self.gate.forward(tape, bound, f_img, d, bands);
        let cat = tape.concat_ch(&[selected, f_dep]);
        let merged = self.merge1.forward(tape, bound, cat);
        let merged = tape.relu(merged);
        let f_rgbd = self.merge2.forward(tape, bound, merged);
        let scanned = self.scan.forward(tape, bound, f_rgbd, bands);
        tape.add(f_rgbd, scanned)
    }
}

// ---------------------------------------------------------------------------
// Spec-facing inference wrappers
// ---------------------------------------------------------------------------

fn check_spatial(a: (usize, usize, usize), b: (usize, usize, usize), context: &str) -> Result<()> {
    if a.1 != b.1 || a.2 != b.2 {
        return Err(SignetError::shape(
            context,
            format!("{}x{}", a.1, a.2),
            format!("{}x{}", b.1, b.2),
        ));
    }
    Ok(())
}

/// Gated selection of image features (inference path).
pub fn spectrum_select(
    f_img: &FeatureMap,
    d: &FeatureMap,
    gate: &SpectrumGate,
    store: &ParamStore,
    bands_n: usize,
) -> Result<FeatureMap> {
    check_spatial(f_img.dims(), d.dims(), "spectrum_select")?;
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let img = tape.constant(f_img.tensor().clone());
    let dv = tape.constant(d.tensor().clone());
    let bands = decompose_bands_var(&mut tape, dv, bands_n);
    let (_, selected) = gate.forward(&mut tape, &bound, img, dv, &bands);
    FeatureMap::new(tape.value(selected).clone())
}

/// Band-conditioned recurrence over spatial components (inference path).
pub fn gru_condition(
    f_rgbd: &FeatureMap,
    bands: &[FeatureMap],
    conditioner: &BandConditioner,
    store: &ParamStore,
) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let f = tape.constant(f_rgbd.tensor().clone());
    let band_vars: Vec<Var> = bands
        .iter()
        .map(|b| tape.constant(b.tensor().clone()))
        .collect();
    let h = conditioner.forward(&mut tape, &bound, f, &band_vars);
    FeatureMap::new(tape.value(h).clone())
}

/// Conditioned selective scan over the flattened feature (inference path);
/// returns the (HW, C) sequence.
pub fn conditional_ssm(
    f_rgbd: &FeatureMap,
    d: &FeatureMap,
    scan: &ConditionalScan,
    store: &ParamStore,
    bands_n: usize,
) -> Result<Tensor> {
    check_spatial(f_rgbd.dims(), d.dims(), "conditional_ssm")?;
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let f = tape.constant(f_rgbd.tensor().clone());
    let dv = tape.constant(d.tensor().clone());
    let bands = decompose_bands_var(&mut tape, dv, bands_n);
    let out = scan.forward(&mut tape, &bound, f, &bands);
    let seq = tape.chw_to_seq(out);
    Ok(tape.value(seq).clone())
}

/// Complete fusion block forward (inference path).
pub fn dadf_forward(
    f_img: &FeatureMap,
    f_dep: &FeatureMap,
    d: &FeatureMap,
    block: &FusionBlock,
    store: &ParamStore,
) -> Result<FeatureMap> {
    check_spatial(f_img.dims(), f_dep.dims(), "dadf_forward")?;
    check_spatial(f_img.dims(), d.dims(), "dadf_forward")?;
    // reuse the pure band split to validate n against the spatial extent
    let _ = decompose_bands(d.tensor(), block.dims.bands)?;
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let img = tape.constant(f_img.tensor().clone());
    let dep = tape.constant(f_dep.tensor().clone());
    let dv = tape.constant(d.tensor().clone());
    let bands = decompose_bands_var(&mut tape, dv, block.dims.bands);
    let out = block.forward(&mut tape, &bound, img, dep, dv, &bands);
    FeatureMap::new(tape.value(out).clone())
}
