//! Seeded synthetic RGB-D scenes and sparsification.
//!
//! A scene is a piecewise-smooth depth field (tilted base plane, raised or
//! recessed rectangular slabs, smooth ellipsoidal bumps) rendered to RGB as
//! region albedo times Lambertian-style shading from the depth normals.
//! Slab borders change both depth and albedo, and bump slopes change both
//! depth and shading, so RGB gradients line up with depth discontinuities
//! by construction. Everything is deterministic per seed.

use crate::data::{DepthMap, RGBImage, SparseDepthMap};
use crate::error::{Result, SignetError};
use crate::par;
use crate::rng::Rng;

pub const DEPTH_MIN_MM: f64 = 300.0;
pub const DEPTH_MAX_MM: f64 = 10_000.0;

/// One synthetic RGB-D sample.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub depth_gt: DepthMap,
    pub rgb: RGBImage,
    pub scene_seed: u64,
}

/// How sparse measurements are drawn from the ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensitySpec {
    /// Fraction of pixels kept, in (0, 1].
    pub fraction: f64,
    pub sampling: Sampling,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    UniformRandom,
    Grid,
}

impl DensitySpec {
    pub fn uniform(fraction: f64) -> Self {
        DensitySpec {
            fraction,
            sampling: Sampling::UniformRandom,
        }
    }

    /// The density ladder used by evaluation sweeps.
    pub const SWEEP: [f64; 5] = [0.01, 0.05, 0.35, 0.65, 0.95];
}

/// Generates a scene of the given size; same seed, same scene.
pub fn generate_scene(seed: u64, height: usize, width: usize) -> SyntheticScene {
    let mut rng = Rng::stream(seed, "scene");
    let (h, w) = (height, width);
    let hf = h as f64;
    let wf = w as f64;

    // tilted base plane
    let z0 = rng.range(2000.0, 7000.0);
    let gx = rng.range(-8.0, 8.0);
    let gy = rng.range(-8.0, 8.0);

    // rectangular slabs: step discontinuities in depth and albedo
    let n_rects = 2 + rng.below(3);
    struct Rect {
        y0: usize,
        y1: usize,
        x0: usize,
        x1: usize,
        dz: f64,
        color: [f64; 3],
    }
    let mut rects = Vec::with_capacity(n_rects);
    for _ in 0..n_rects {
        let ry = rng.below(h);
        let rx = rng.below(w);
        let rh = (h / 4 + rng.below((h / 2).max(1))).max(2);
        let rw = (w / 4 + rng.below((w / 2).max(1))).max(2);
        let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        rects.push(Rect {
            y0: ry.min(h - 1),
            y1: (ry + rh).min(h),
            x0: rx.min(w - 1),
            x1: (rx + rw).min(w),
            dz: sign * rng.range(600.0, 2500.0),
            color: [rng.range(0.15, 0.95), rng.range(0.15, 0.95), rng.range(0.15, 0.95)],
        });
    }

    // smooth ellipsoidal bumps
    let n_bumps = 2 + rng.below(3);
    struct Bump {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        amp: f64,
    }
    let mut bumps = Vec::with_capacity(n_bumps);
    for _ in 0..n_bumps {
        let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        // gentle slopes: sharp depth edges come from the slab borders,
        // which also switch albedo
        bumps.push(Bump {
            cy: rng.range(0.0, hf),
            cx: rng.range(0.0, wf),
            ry: rng.range(4.0, (hf / 3.0).max(5.0)),
            rx: rng.range(4.0, (wf / 3.0).max(5.0)),
            amp: sign * rng.range(200.0, 900.0),
        });
    }

    let base_color = [rng.range(0.25, 0.85), rng.range(0.25, 0.85), rng.range(0.25, 0.85)];

    let mut depth = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut z = z0 + gx * x as f64 + gy * y as f64;
            for r in &rects {
                if y >= r.y0 && y < r.y1 && x >= r.x0 && x < r.x1 {
                    z += r.dz;
                }
            }
            for b in &bumps {
                let dy = (y as f64 - b.cy) / b.ry;
                let dx = (x as f64 - b.cx) / b.rx;
                z += b.amp * (-(dy * dy + dx * dx)).exp();
            }
            depth[y * w + x] = z.clamp(DEPTH_MIN_MM, DEPTH_MAX_MM);
        }
    }

    // albedo by region membership
    let mut albedo = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let mut color = base_color;
            for r in &rects {
                if y >= r.y0 && y < r.y1 && x >= r.x0 && x < r.x1 {
                    color = r.color;
                }
            }
            for c in 0..3 {
                albedo[c * h * w + y * w + x] = color[c];
            }
        }
    }

    // shading from central-difference normals; gradients in mm/px
    let grad = |d: &[f64], y: usize, x: usize| -> (f64, f64) {
        let yp = if y + 1 < h { y + 1 } else { y };
        let ym = y.saturating_sub(1);
        let xp = if x + 1 < w { x + 1 } else { x };
        let xm = x.saturating_sub(1);
        let dzdy = (d[yp * w + x] - d[ym * w + x]) / (yp - ym).max(1) as f64;
        let dzdx = (d[y * w + xp] - d[y * w + xm]) / (xp - xm).max(1) as f64;
        (dzdy, dzdx)
    };
    let light = {
        let (lx, ly, lz) = (0.45, 0.6, 0.9);
        let n = (lx * lx + ly * ly + lz * lz as f64).sqrt();
        (lx / n, ly / n, lz / n)
    };
    let mut rgb = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (dzdy, dzdx) = grad(&depth, y, x);
            // normal of z(x, y) scaled so typical depth slopes shade visibly
            let (nx, ny, nz) = (-dzdx * 0.02, -dzdy * 0.02, 1.0);
            let norm = (nx * nx + ny * ny + nz * nz).sqrt();
            let lambert = ((nx * light.0 + ny * light.1 + nz * light.2) / norm).max(0.0);
            let shade = 0.35 + 0.65 * lambert;
            // fine depth-linked texture: slopes carry an RGB change even
            // where shading is locally flat
            let z = depth[y * w + x];
            let texture = 0.85 + 0.15 * (z / 180.0).sin();
            for c in 0..3 {
                rgb[c * h * w + y * w + x] =
                    (albedo[c * h * w + y * w + x] * shade * texture).clamp(0.0, 1.0);
            }
        }
    }

    SyntheticScene {
        depth_gt: DepthMap::new(h, w, depth).expect("synthetic depth in range"),
        rgb: RGBImage::new(h, w, rgb).expect("synthetic rgb in range"),
        scene_seed: seed,
    }
}

/// Generates `n` scenes (parallelizable per seed, deterministic order).
pub fn generate_scenes(base_seed: u64, n: usize, height: usize, width: usize) -> Vec<SyntheticScene> {
    par::map_indexed(n, |i| generate_scene(base_seed.wrapping_add(i as u64), height, width))
}

/// Keeps exactly `floor(p * H * W)` pixels of the ground truth.
pub fn sparsify(gt: &DepthMap, spec: &DensitySpec, seed: u64) -> Result<SparseDepthMap> {
    if spec.fraction <= 0.0 || spec.fraction > 1.0 {
        return Err(SignetError::Parameter {
            name: "DensitySpec.fraction".into(),
            reason: format!("{} not in (0, 1]", spec.fraction),
        });
    }
    let (h, w) = (gt.height(), gt.width());
    let total = h * w;
    let keep = ((spec.fraction * total as f64).floor() as usize).min(total);
    if keep == 0 {
        return Err(SignetError::Parameter {
            name: "DensitySpec.fraction".into(),
            reason: "fraction keeps zero pixels".into(),
        });
    }
    let mut mask = vec![false; total];
    match spec.sampling {
        Sampling::UniformRandom => {
            let mut rng = Rng::stream(seed, "sparsify");
            for idx in rng.choose_indices(total, keep) {
                mask[idx] = true;
            }
        }
        Sampling::Grid => {
            // evenly spaced in row-major order: exactly `keep` pixels
            for i in 0..keep {
                let idx = (i as f64 * total as f64 / keep as f64) as usize;
                mask[idx.min(total - 1)] = true;
            }
        }
    }
    SparseDepthMap::from_depth(gt, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(42, 48, 48);
        let b = generate_scene(42, 48, 48);
        assert_eq!(a.depth_gt.values(), b.depth_gt.values());
        assert_eq!(a.rgb.channels(), b.rgb.channels());
        let c = generate_scene(43, 48, 48);
        assert_ne!(a.depth_gt.values(), c.depth_gt.values());
    }

    #[test]
    fn depth_range_holds_over_100_seeds() {
        for seed in 0..100 {
            let scene = generate_scene(seed, 24, 24);
            let (lo, hi) = scene.depth_gt.min_max();
            assert!(lo >= DEPTH_MIN_MM && hi <= DEPTH_MAX_MM, "seed {seed}");
        }
    }

    #[test]
    fn depth_edges_coincide_with_rgb_gradients() {
        // over 100 seeds, pooled: at least 70% of strong depth edges must
        // carry an RGB gradient above that scene's 80th percentile
        let (h, w) = (48, 48);
        let mut edge_pixels = 0usize;
        let mut edge_hits = 0usize;
        for seed in 0..100 {
            let scene = generate_scene(seed, h, w);
            let d = scene.depth_gt.values();
            let rgb = scene.rgb.channels();
            let mut rgb_grad = vec![0.0; h * w];
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let mut g: f64 = 0.0;
                    for c in 0..3 {
                        let plane = &rgb[c * h * w..(c + 1) * h * w];
                        let gy = plane[(y + 1) * w + x] - plane[(y - 1) * w + x];
                        let gx = plane[y * w + x + 1] - plane[y * w + x - 1];
                        g = g.max((gx * gx + gy * gy).sqrt());
                    }
                    rgb_grad[y * w + x] = g;
                }
            }
            let mut sorted: Vec<f64> = rgb_grad.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let p80 = sorted[(sorted.len() as f64 * 0.8) as usize];
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let gy = (d[(y + 1) * w + x] - d[(y - 1) * w + x]) / 2.0;
                    let gx = (d[y * w + x + 1] - d[y * w + x - 1]) / 2.0;
                    if (gx * gx + gy * gy).sqrt() > 100.0 {
                        edge_pixels += 1;
                        if rgb_grad[y * w + x] > p80 {
                            edge_hits += 1;
                        }
                    }
                }
            }
        }
        assert!(edge_pixels > 0);
        let rate = edge_hits as f64 / edge_pixels as f64;
        assert!(rate >= 0.70, "co-location rate {rate:.3}");
    }

    #[test]
    fn sparsify_full_density_is_identity() {
        let scene = generate_scene(1, 16, 16);
        let s = sparsify(&scene.depth_gt, &DensitySpec::uniform(1.0), 0).unwrap();
        assert_eq!(s.valid_count(), 256);
        assert_eq!(s.values(), scene.depth_gt.values());
    }

    #[test]
    fn sparsify_exact_count() {
        let scene = generate_scene(2, 100, 100);
        let s = sparsify(&scene.depth_gt, &DensitySpec::uniform(0.01), 5).unwrap();
        assert_eq!(s.valid_count(), 100);
        let grid = sparsify(
            &scene.depth_gt,
            &DensitySpec {
                fraction: 0.0137,
                sampling: Sampling::Grid,
            },
            5,
        )
        .unwrap();
        assert_eq!(grid.valid_count(), 137);
    }

    #[test]
    fn sparsify_seeds_differ_but_counts_match() {
        let scene = generate_scene(3, 32, 32);
        let a = sparsify(&scene.depth_gt, &DensitySpec::uniform(0.05), 1).unwrap();
        let b = sparsify(&scene.depth_gt, &DensitySpec::uniform(0.05), 2).unwrap();
        assert_eq!(a.valid_count(), b.valid_count());
        assert_ne!(a.valid_mask(), b.valid_mask());
        // values always copied from the ground truth at valid pixels
        for i in 0..a.values().len() {
            if a.valid_mask()[i] {
                assert_eq!(a.values()[i], scene.depth_gt.values()[i]);
            }
        }
    }

    #[test]
    fn sparsify_rejects_bad_fraction() {
        let scene = generate_scene(4, 8, 8);
        assert!(sparsify(&scene.depth_gt, &DensitySpec::uniform(0.0), 0).is_err());
        assert!(sparsify(&scene.depth_gt, &DensitySpec::uniform(1.5), 0).is_err());
    }
}
