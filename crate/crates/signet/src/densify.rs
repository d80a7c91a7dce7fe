//! Non-learned sparse-to-dense depth fill and Gaussian denoising.
//!
//! Two densifiers are provided. The morphological path dilates valid pixels
//! with a diamond kernel (taking the minimum competing depth, a
//! foreground-preserving convention), repeats for a fixed number of passes,
//! and resolves stragglers with a nearest-valid or median fill. The
//! colorization path treats invalid pixels as unknowns of a linear system
//! whose weights follow image-intensity affinities over the 4-neighborhood,
//! with measured pixels held as hard constraints.
//!
//! Both fills never overwrite a measured pixel.

use crate::data::{DepthMap, RGBImage, SparseDepthMap};
use crate::error::{Result, SignetError};
use crate::par;

/// Parameters of the morphological fill.
#[derive(Clone, Debug, PartialEq)]
pub struct MorphParams {
    /// Diamond (L1 ball) radius used by each dilation pass.
    pub fill_kernel_radius: usize,
    pub num_dilation_passes: usize,
    pub final_fill: FinalFill,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinalFill {
    /// Copy the nearest valid pixel (squared Euclidean distance, ties to the
    /// smaller depth, then row-major order).
    NearestValid,
    /// Median of all valid input pixels.
    MedianOfValid,
}

impl Default for MorphParams {
    fn default() -> Self {
        MorphParams {
            fill_kernel_radius: 2,
            num_dilation_passes: 3,
            final_fill: FinalFill::NearestValid,
        }
    }
}

/// Parameters of the colorization-style fill.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorizationParams {
    /// Intensity scale of the affinity weights.
    pub affinity_sigma: f64,
    /// Relative residual ||Mz - b|| / ||b|| the solver must reach.
    pub solver_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for ColorizationParams {
    fn default() -> Self {
        ColorizationParams {
            affinity_sigma: 0.1,
            solver_tolerance: 1e-6,
            max_iterations: 10_000,
        }
    }
}

/// Gaussian denoise parameters. `kernel_radius` defaults to 2*ceil(sigma).
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseParams {
    pub gaussian_sigma: f64,
    pub kernel_radius: Option<usize>,
}

impl Default for DenoiseParams {
    fn default() -> Self {
        DenoiseParams {
            gaussian_sigma: 1.0,
            kernel_radius: None,
        }
    }
}

impl DenoiseParams {
    pub fn with_sigma(sigma: f64) -> Self {
        DenoiseParams {
            gaussian_sigma: sigma,
            kernel_radius: None,
        }
    }

    fn radius(&self) -> usize {
        self.kernel_radius
            .unwrap_or_else(|| 2 * self.gaussian_sigma.ceil() as usize)
    }
}

// ---------------------------------------------------------------------------
// Morphological densification
// ---------------------------------------------------------------------------

/// Fills a sparse depth map by repeated min-dilation plus a final fill.
/// Measured pixels are copied through untouched.
pub fn densify_morphological(s: &SparseDepthMap, p: &MorphParams) -> Result<DepthMap> {
    if p.fill_kernel_radius < 1 || p.num_dilation_passes < 1 {
        return Err(SignetError::Parameter {
            name: "MorphParams".into(),
            reason: "radius and passes must be >= 1".into(),
        });
    }
    if s.valid_count() == 0 {
        return Err(SignetError::EmptyInput {
            context: "densify_morphological needs at least one valid pixel".into(),
        });
    }
    let (h, w) = (s.height(), s.width());
    let mut values = s.values().to_vec();
    let mut valid = s.valid_mask().to_vec();

    let r = p.fill_kernel_radius as isize;
    for _ in 0..p.num_dilation_passes {
        let mut next_values = values.clone();
        let mut next_valid = valid.clone();
        let mut changed = false;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let idx = (y as usize) * w + x as usize;
                if valid[idx] {
                    continue;
                }
                // min over valid pixels within the diamond |dy|+|dx| <= r
                let mut best = f64::INFINITY;
                for dy in -r..=r {
                    let rem = r - dy.abs();
                    for dx in -rem..=rem {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let nidx = (ny as usize) * w + nx as usize;
                        if valid[nidx] && values[nidx] < best {
                            best = values[nidx];
                        }
                    }
                }
                if best.is_finite() {
                    next_values[idx] = best;
                    next_valid[idx] = true;
                    changed = true;
                }
            }
        }
        values = next_values;
        valid = next_valid;
        if !changed {
            break;
        }
    }

    if valid.iter().any(|&v| !v) {
        match p.final_fill {
            FinalFill::NearestValid => {
                let anchors: Vec<(isize, isize, f64)> = (0..h * w)
                    .filter(|&i| valid[i])
                    .map(|i| ((i / w) as isize, (i % w) as isize, values[i]))
                    .collect();
                let holes: Vec<usize> = (0..h * w).filter(|&i| !valid[i]).collect();
                let filled = par::map_indexed(holes.len(), |k| {
                    let idx = holes[k];
                    let (y, x) = ((idx / w) as isize, (idx % w) as isize);
                    let mut best_d = i64::MAX;
                    let mut best_v = f64::INFINITY;
                    for &(ay, ax, av) in &anchors {
                        let d = (ay - y) * (ay - y) + (ax - x) * (ax - x);
                        let d = d as i64;
                        if d < best_d || (d == best_d && av < best_v) {
                            best_d = d;
                            best_v = av;
                        }
                    }
                    best_v
                });
                for (k, &idx) in holes.iter().enumerate() {
                    values[idx] = filled[k];
                }
            }
            FinalFill::MedianOfValid => {
                let mut pool: Vec<f64> = (0..h * w).filter(|&i| valid[i]).map(|i| values[i]).collect();
                pool.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let median = pool[pool.len() / 2];
                for i in 0..h * w {
                    if !valid[i] {
                        values[i] = median;
                    }
                }
            }
        }
    }

    DepthMap::new(h, w, values)
}

// ---------------------------------------------------------------------------
// Colorization-style densification
// ---------------------------------------------------------------------------

struct AffinitySystem {
    /// Unknown index per pixel, usize::MAX for constrained pixels.
    unknown_of: Vec<usize>,
    /// Flat pixel index of each unknown.
    pixel_of: Vec<usize>,
    /// Per unknown: (neighbor pixel, weight) over the 4-neighborhood.
    rows: Vec<Vec<(usize, f64)>>,
    rhs: Vec<f64>,
}

fn build_system(s: &SparseDepthMap, img: &RGBImage, sigma: f64) -> AffinitySystem {
    let (h, w) = (s.height(), s.width());
    let mut unknown_of = vec![usize::MAX; h * w];
    let mut pixel_of = Vec::new();
    for i in 0..h * w {
        if !s.valid_mask()[i] {
            unknown_of[i] = pixel_of.len();
            pixel_of.push(i);
        }
    }
    let inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
    let mut rows = Vec::with_capacity(pixel_of.len());
    let mut rhs = vec![0.0; pixel_of.len()];
    for (u, &idx) in pixel_of.iter().enumerate() {
        let (y, x) = (idx / w, idx % w);
        let ir = img.intensity(y, x);
        let mut nbrs: Vec<(usize, f64)> = Vec::with_capacity(4);
        let mut total = 0.0;
        let push = |ny: usize, nx: usize, nbrs: &mut Vec<(usize, f64)>, total: &mut f64| {
            let iq = img.intensity(ny, nx);
            let d = ir - iq;
            let e = (-d * d * inv_two_sigma2).exp();
            nbrs.push((ny * w + nx, e));
            *total += e;
        };
        if y > 0 {
            push(y - 1, x, &mut nbrs, &mut total);
        }
        if y + 1 < h {
            push(y + 1, x, &mut nbrs, &mut total);
        }
        if x > 0 {
            push(y, x - 1, &mut nbrs, &mut total);
        }
        if x + 1 < w {
            push(y, x + 1, &mut nbrs, &mut total);
        }
        // normalize to sum 1, move constrained neighbors to the rhs
        let mut row = Vec::with_capacity(nbrs.len());
        for (nidx, e) in nbrs {
            let wgt = e / total;
            if unknown_of[nidx] == usize::MAX {
                rhs[u] += wgt * s.values()[nidx];
            } else {
                row.push((nidx, wgt));
            }
        }
        rows.push(row);
    }
    AffinitySystem {
        unknown_of,
        pixel_of,
        rows,
        rhs,
    }
}

impl AffinitySystem {
    /// y = M z where M = I - W restricted to unknowns.
    fn apply(&self, z: &[f64], out: &mut [f64]) {
        for (u, row) in self.rows.iter().enumerate() {
            let mut acc = z[u];
            for &(nidx, wgt) in row {
                acc -= wgt * z[self.unknown_of[nidx]];
            }
            out[u] = acc;
        }
    }

    /// y = M^T z.
    fn apply_t(&self, z: &[f64], out: &mut [f64]) {
        out.copy_from_slice(z);
        for (u, row) in self.rows.iter().enumerate() {
            for &(nidx, wgt) in row {
                out[self.unknown_of[nidx]] -= wgt * z[u];
            }
        }
    }
}

/// Fills invalid pixels by minimizing the affinity-weighted quadratic with
/// measured pixels as hard constraints; the solve runs CG on the normal
/// equations until the relative residual of the constraint system meets the
/// tolerance.
pub fn densify_colorization(
    s: &SparseDepthMap,
    img: &RGBImage,
    p: &ColorizationParams,
) -> Result<DepthMap> {
    if p.affinity_sigma <= 0.0 || !(0.0..1.0).contains(&p.solver_tolerance) || p.solver_tolerance <= 0.0 {
        return Err(SignetError::Parameter {
            name: "ColorizationParams".into(),
            reason: "sigma must be > 0 and tolerance in (0, 1)".into(),
        });
    }
    if s.valid_count() == 0 {
        return Err(SignetError::EmptyInput {
            context: "densify_colorization needs at least one valid pixel".into(),
        });
    }
    if img.height() != s.height() || img.width() != s.width() {
        return Err(SignetError::shape(
            "densify_colorization",
            format!("{}x{}", s.height(), s.width()),
            format!("{}x{}", img.height(), img.width()),
        ));
    }

    let sys = build_system(s, img, p.affinity_sigma);
    let n = sys.pixel_of.len();
    let mut values = s.values().to_vec();
    if n == 0 {
        return DepthMap::new(s.height(), s.width(), values);
    }

    let b_norm = sys.rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut z = vec![0.0; n];
    if b_norm == 0.0 {
        // all constraints are zero depth; the zero field solves the system
        return DepthMap::new(s.height(), s.width(), values);
    }

    // CGNR: CG on M^T M z = M^T b, converging on ||M z - b|| / ||b||.
    let mut residual = vec![0.0; n]; // r = b - M z
    residual.copy_from_slice(&sys.rhs);
    let mut rt = vec![0.0; n]; // M^T r
    sys.apply_t(&residual, &mut rt);
    let mut dir = rt.clone();
    let mut rt_norm2: f64 = rt.iter().map(|v| v * v).sum();
    let mut tmp = vec![0.0; n];

    let mut rel = 1.0;
    let mut converged = false;
    for _ in 0..p.max_iterations {
        sys.apply(&dir, &mut tmp); // tmp = M d
        let denom: f64 = tmp.iter().map(|v| v * v).sum();
        if denom == 0.0 {
            break;
        }
        let alpha = rt_norm2 / denom;
        for i in 0..n {
            z[i] += alpha * dir[i];
            residual[i] -= alpha * tmp[i];
        }
        rel = residual.iter().map(|v| v * v).sum::<f64>().sqrt() / b_norm;
        if rel <= p.solver_tolerance {
            converged = true;
            break;
        }
        sys.apply_t(&residual, &mut rt);
        let new_rt_norm2: f64 = rt.iter().map(|v| v * v).sum();
        let beta = new_rt_norm2 / rt_norm2;
        rt_norm2 = new_rt_norm2;
        for i in 0..n {
            dir[i] = rt[i] + beta * dir[i];
        }
    }
    if !converged {
        return Err(SignetError::Convergence {
            iterations: p.max_iterations,
            residual: rel,
            tolerance: p.solver_tolerance,
        });
    }

    for (u, &idx) in sys.pixel_of.iter().enumerate() {
        // harmonic-style interpolation can undershoot 0 by rounding only
        values[idx] = z[u].max(0.0);
    }
    DepthMap::new(s.height(), s.width(), values)
}

// ---------------------------------------------------------------------------
// Denoise
// ---------------------------------------------------------------------------

/// Gaussian smoothing with a sum-1 kernel and reflect padding. Sigma 0 is
/// the identity.
pub fn denoise(z: &DepthMap, p: &DenoiseParams) -> DepthMap {
    if p.gaussian_sigma == 0.0 {
        return z.clone();
    }
    let r = p.radius();
    if r == 0 {
        return z.clone();
    }
    let k = 2 * r + 1;
    let mut kernel = vec![0.0; k * k];
    let inv = 1.0 / (2.0 * p.gaussian_sigma * p.gaussian_sigma);
    let mut total = 0.0;
    for dy in 0..k {
        for dx in 0..k {
            let fy = dy as f64 - r as f64;
            let fx = dx as f64 - r as f64;
            let v = (-(fy * fy + fx * fx) * inv).exp();
            kernel[dy * k + dx] = v;
            total += v;
        }
    }
    for v in kernel.iter_mut() {
        *v /= total;
    }

    let (h, w) = (z.height(), z.width());
    let src = z.values();
    let mut out = vec![0.0; h * w];
    par::for_each_chunk_mut(&mut out, w, |y, row| {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in 0..k {
                let sy = reflect_index(y as isize + dy as isize - r as isize, h);
                for dx in 0..k {
                    let sx = reflect_index(x as isize + dx as isize - r as isize, w);
                    acc += kernel[dy * k + dx] * src[sy * w + sx];
                }
            }
            row[x] = acc;
        }
    });
    DepthMap::new(h, w, out).expect("convex combination of finite depths")
}

/// Mirror reflection without edge repetition (-1 -> 1), clamped for tiny axes.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}
