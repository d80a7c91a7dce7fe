//! Orthonormal 2-D DCT-II, its inverse, and radial frequency bands.
//!
//! The transform is separable: rows then columns, each through a
//! precomputed orthonormal basis matrix, so `idct2` is the exact transpose
//! (= inverse) of `dct2` and Parseval holds to rounding error. Band
//! decomposition partitions the coefficient grid into `n` radial annuli of
//! equal span in normalized frequency; every coefficient belongs to exactly
//! one band, so the band-limited components sum back to the original field.

use crate::error::{Result, SignetError};
use crate::par;
use crate::tensor::Tensor;

/// Orthonormal DCT-II basis for length `n`: `basis[k*n + x] = a(k) cos(pi (2x+1) k / (2n))`.
fn basis(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    let a0 = (1.0 / n as f64).sqrt();
    let ak = (2.0 / n as f64).sqrt();
    for k in 0..n {
        let scale = if k == 0 { a0 } else { ak };
        for x in 0..n {
            m[k * n + x] =
                scale * (std::f64::consts::PI * (2.0 * x as f64 + 1.0) * k as f64 / (2.0 * n as f64)).cos();
        }
    }
    m
}

/// y = M * x for an n x n matrix applied to each column of an (n x w) block.
fn transform_rows(m: &[f64], src: &[f64], dst: &mut [f64], n: usize, w: usize) {
    // dst[k, j] = sum_x m[k, x] * src[x, j]
    for k in 0..n {
        let row = &m[k * n..(k + 1) * n];
        let out = &mut dst[k * w..(k + 1) * w];
        out.iter_mut().for_each(|v| *v = 0.0);
        for (x, &mv) in row.iter().enumerate() {
            let s = &src[x * w..(x + 1) * w];
            for j in 0..w {
                out[j] += mv * s[j];
            }
        }
    }
}

/// Same contraction with the transposed matrix (inverse transform).
fn transform_rows_t(m: &[f64], src: &[f64], dst: &mut [f64], n: usize, w: usize) {
    // dst[x, j] = sum_k m[k, x] * src[k, j]
    for chunk in dst.chunks_mut(w) {
        chunk.iter_mut().for_each(|v| *v = 0.0);
    }
    for k in 0..n {
        let row = &m[k * n..(k + 1) * n];
        let s = &src[k * w..(k + 1) * w];
        for (x, &mv) in row.iter().enumerate() {
            let out = &mut dst[x * w..(x + 1) * w];
            for j in 0..w {
                out[j] += mv * s[j];
            }
        }
    }
}

fn plane_dct2(plane: &[f64], out: &mut [f64], h: usize, w: usize, mh: &[f64], mw: &[f64], inverse: bool) {
    let mut tmp = vec![0.0; h * w];
    if inverse {
        transform_rows_t(mh, plane, &mut tmp, h, w);
    } else {
        transform_rows(mh, plane, &mut tmp, h, w);
    }
    // transpose, transform along the other axis, transpose back
    let mut t = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            t[x * h + y] = tmp[y * w + x];
        }
    }
    let mut t2 = vec![0.0; h * w];
    if inverse {
        transform_rows_t(mw, &t, &mut t2, w, h);
    } else {
        transform_rows(mw, &t, &mut t2, w, h);
    }
    for x in 0..w {
        for y in 0..h {
            out[y * w + x] = t2[x * h + y];
        }
    }
}

fn transform_chw(x: &Tensor, inverse: bool) -> Tensor {
    let (c, h, w) = x.dims3();
    let mh = basis(h);
    let mw = basis(w);
    let mut out = Tensor::zeros(&[c, h, w]);
    let src = x.data();
    par::for_each_chunk_mut(out.data_mut(), h * w, |ci, plane| {
        plane_dct2(&src[ci * h * w..(ci + 1) * h * w], plane, h, w, &mh, &mw, inverse);
    });
    out
}

/// Orthonormal 2-D DCT-II applied per channel of a (C, H, W) tensor.
pub fn dct2(x: &Tensor) -> Tensor {
    transform_chw(x, false)
}

/// Exact inverse of [`dct2`].
pub fn idct2(x: &Tensor) -> Tensor {
    transform_chw(x, true)
}

/// Normalized radial frequency of coefficient (u, v) on an H x W grid,
/// in [0, 1] with the DC term at 0.
fn radius(u: usize, v: usize, h: usize, w: usize) -> f64 {
    let ru = if h > 1 { u as f64 / (h - 1) as f64 } else { 0.0 };
    let rv = if w > 1 { v as f64 / (w - 1) as f64 } else { 0.0 };
    ((ru * ru + rv * rv) / 2.0).sqrt()
}

/// Index of the band (0-based) that coefficient (u, v) falls into when the
/// radius range [0, 1] is split into `n` equal annuli; radius 1 joins the
/// last band.
pub fn band_index(u: usize, v: usize, h: usize, w: usize, n: usize) -> usize {
    let r = radius(u, v, h, w);
    ((r * n as f64) as usize).min(n - 1)
}

/// 0/1 coefficient mask for band `i` of `n`, shaped (1, H, W).
pub fn band_mask(h: usize, w: usize, n: usize, i: usize) -> Tensor {
    Tensor::from_fn(&[1, h, w], |idx| {
        let u = idx / w;
        let v = idx % w;
        if band_index(u, v, h, w, n) == i {
            1.0
        } else {
            0.0
        }
    })
}

/// Splits a (C, H, W) field into `n` spatial band-limited components whose
/// sum reconstructs the input. Errors when `n` exceeds min(H, W), where
/// annuli would go unpopulated.
pub fn decompose_bands(d: &Tensor, n: usize) -> Result<Vec<Tensor>> {
    let (c, h, w) = d.dims3();
    if n < 1 {
        return Err(SignetError::Parameter {
            name: "bands".into(),
            reason: "need at least one band".into(),
        });
    }
    if n > h.min(w) {
        return Err(SignetError::Parameter {
            name: "bands".into(),
            reason: format!("{} bands exceed min(H, W) = {}", n, h.min(w)),
        });
    }
    let coeffs = dct2(d);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mask = band_mask(h, w, n, i);
        let masked = Tensor::from_fn(&[c, h, w], |idx| {
            let pix = idx % (h * w);
            coeffs.data()[idx] * mask.data()[pix]
        });
        out.push(idct2(&masked));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_field(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(&[c, h, w], |_| rng.range(-2.0, 2.0))
    }

    /// Direct O(N^4) double-sum DCT used as the independent oracle.
    fn dct2_naive(x: &Tensor) -> Tensor {
        let (c, h, w) = x.dims3();
        let a = |k: usize, n: usize| {
            if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            }
        };
        Tensor::from_fn(&[c, h, w], |idx| {
            let ci = idx / (h * w);
            let u = (idx / w) % h;
            let v = idx % w;
            let mut acc = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    let cy = (std::f64::consts::PI * (2.0 * y as f64 + 1.0) * u as f64
                        / (2.0 * h as f64))
                        .cos();
                    let cx = (std::f64::consts::PI * (2.0 * xx as f64 + 1.0) * v as f64
                        / (2.0 * w as f64))
                        .cos();
                    acc += x.at3(ci, y, xx) * cy * cx;
                }
            }
            a(u, h) * a(v, w) * acc
        })
    }

    #[test]
    fn single_pixel_is_identity() {
        let x = Tensor::from_vec(&[1, 1, 1], vec![3.25]);
        assert_eq!(dct2(&x).data(), &[3.25]);
        assert_eq!(idct2(&x).data(), &[3.25]);
    }

    #[test]
    fn round_trip_random() {
        for &(h, w) in &[(4, 4), (7, 5), (16, 16), (13, 21)] {
            let x = random_field(2, h, w, 17 + h as u64);
            let back = idct2(&dct2(&x));
            for (a, b) in x.data().iter().zip(back.data()) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn constant_field_concentrates_at_dc() {
        let c = 1.75;
        let x = Tensor::full(&[1, 4, 4], c);
        let coeffs = dct2(&x);
        assert!((coeffs.at3(0, 0, 0) - 4.0 * c).abs() < 1e-9);
        for idx in 1..16 {
            assert!(coeffs.data()[idx].abs() < 1e-9);
        }
    }

    #[test]
    fn matches_direct_summation_oracle() {
        let x = random_field(1, 6, 9, 99);
        let fast = dct2(&x);
        let slow = dct2_naive(&x);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn parseval_energy_preserved() {
        let x = random_field(3, 12, 10, 4);
        let y = dct2(&x);
        assert!((x.norm() - y.norm()).abs() < 1e-6 * x.norm().max(1.0));
    }

    #[test]
    fn single_band_is_identity() {
        let x = random_field(2, 8, 8, 21);
        let bands = decompose_bands(&x, 1).unwrap();
        assert_eq!(bands.len(), 1);
        for (a, b) in x.data().iter().zip(bands[0].data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_field_lives_in_lowest_band() {
        let x = Tensor::full(&[1, 8, 8], 5.0);
        let bands = decompose_bands(&x, 3).unwrap();
        for (a, b) in x.data().iter().zip(bands[0].data()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(bands[1].max_abs() < 1e-9);
        assert!(bands[2].max_abs() < 1e-9);
    }

    #[test]
    fn bands_partition_reconstructs() {
        for &n in &[1usize, 3, 5, 7, 9, 11] {
            let x = random_field(2, 16, 12, 7 + n as u64);
            let bands = decompose_bands(&x, n).unwrap();
            assert_eq!(bands.len(), n);
            let mut sum = Tensor::zeros(&[2, 16, 12]);
            for b in &bands {
                sum.add_assign(b);
            }
            let scale = x.max_abs().max(1.0);
            for (a, b) in x.data().iter().zip(sum.data()) {
                assert!((a - b).abs() < 1e-6 * scale, "{a} vs {b} at n={n}");
            }
        }
    }

    #[test]
    fn every_coefficient_in_exactly_one_band() {
        let (h, w, n) = (10, 14, 5);
        for u in 0..h {
            for v in 0..w {
                let mut hits = 0;
                for i in 0..n {
                    if band_mask(h, w, n, i).at3(0, u, v) > 0.5 {
                        hits += 1;
                    }
                }
                assert_eq!(hits, 1, "coefficient ({u},{v})");
            }
        }
    }

    #[test]
    fn too_many_bands_is_parameter_error() {
        let x = random_field(1, 4, 4, 3);
        assert!(decompose_bands(&x, 5).is_err());
    }
}
