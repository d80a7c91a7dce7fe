//! Core data types and file I/O for depth maps, RGB images, and features.
//!
//! Depth is stored in millimeters. On disk a depth map is a single-channel
//! 16-bit PNG where the pixel value is the depth in mm and 0 marks an
//! invalid (unmeasured) pixel; in memory the validity mask is the single
//! source of truth and invalid pixels hold a literal 0. RGB images are
//! 8-bit 3-channel PNGs scaled to [0, 1].

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Result, SignetError};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// Dense depth field in millimeters. All values are finite and >= 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    values: Vec<f64>,
    height: usize,
    width: usize,
}

/// Sparse depth measurements plus a validity mask. Invalid pixels hold
/// exactly 0 so the ambiguity the mask resolves is representable.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepthMap {
    values: Vec<f64>,
    valid: Vec<bool>,
    height: usize,
    width: usize,
}

/// Three-channel image with values in [0, 1], stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RGBImage {
    channels: Vec<f64>, // 3 * h * w
    height: usize,
    width: usize,
}

/// C x H x W activation tensor with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

/// Boolean mask selecting the pixels a metric is evaluated over.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidPixelSet {
    mask: Vec<bool>,
    height: usize,
    width: usize,
}

// ---------------------------------------------------------------------------
// DepthMap
// ---------------------------------------------------------------------------

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(SignetError::shape(
                "DepthMap::new",
                format!("{}x{} = {} values", height, width, height * width),
                format!("{} values", values.len()),
            ));
        }
        if !values.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(SignetError::NonFinite {
                context: "DepthMap values must be finite and >= 0".into(),
            });
        }
        Ok(DepthMap {
            values,
            height,
            width,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        DepthMap::new(height, width, vec![value; height * width]).expect("constant depth")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// View as a rank-3 tensor (1, H, W).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, self.height, self.width], self.values.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3();
        if c != 1 {
            return Err(SignetError::shape("DepthMap::from_tensor", "1 channel", format!("{c}")));
        }
        DepthMap::new(h, w, t.data().to_vec())
    }
}

// ---------------------------------------------------------------------------
// SparseDepthMap
// ---------------------------------------------------------------------------

impl SparseDepthMap {
    /// Builds a sparse map, zeroing values wherever the mask is false so the
    /// `value * (1 - mask) == 0` invariant holds by construction.
    pub fn new(height: usize, width: usize, mut values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != height * width || valid.len() != height * width {
            return Err(SignetError::shape(
                "SparseDepthMap::new",
                format!("{} values/mask entries", height * width),
                format!("{} values, {} mask", values.len(), valid.len()),
            ));
        }
        if !values.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(SignetError::NonFinite {
                context: "SparseDepthMap values must be finite and >= 0".into(),
            });
        }
        for (v, &ok) in values.iter_mut().zip(valid.iter()) {
            if !ok {
                *v = 0.0;
            }
        }
        Ok(SparseDepthMap {
            values,
            valid,
            height,
            width,
        })
    }

    pub fn from_depth(depth: &DepthMap, valid: Vec<bool>) -> Result<Self> {
        SparseDepthMap::new(depth.height, depth.width, depth.values.clone(), valid)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }
}

// ---------------------------------------------------------------------------
// RGBImage
// ---------------------------------------------------------------------------

impl RGBImage {
    /// `channels` is channel-major: 3 planes of h*w values in [0, 1].
    pub fn new(height: usize, width: usize, channels: Vec<f64>) -> Result<Self> {
        if channels.len() != 3 * height * width {
            return Err(SignetError::shape(
                "RGBImage::new",
                format!("3x{}x{} = {} values", height, width, 3 * height * width),
                format!("{} values", channels.len()),
            ));
        }
        if !channels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(SignetError::NonFinite {
                context: "RGBImage values must lie in [0, 1]".into(),
            });
        }
        Ok(RGBImage {
            channels,
            height,
            width,
        })
    }

    pub fn constant(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut channels = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            channels.extend(std::iter::repeat(rgb[c]).take(height * width));
        }
        RGBImage::new(height, width, channels).expect("constant rgb")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> &[f64] {
        &self.channels
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.channels[(c * self.height + y) * self.width + x]
    }

    /// Channel-mean grayscale intensity at a pixel.
    pub fn intensity(&self, y: usize, x: usize) -> f64 {
        (self.at(0, y, x) + self.at(1, y, x) + self.at(2, y, x)) / 3.0
    }

    /// View as a rank-3 tensor (3, H, W).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[3, self.height, self.width], self.channels.clone())
    }
}

// ---------------------------------------------------------------------------
// FeatureMap
// ---------------------------------------------------------------------------

impl FeatureMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let _ = tensor.dims3();
        if !tensor.all_finite() {
            return Err(SignetError::NonFinite {
                context: "FeatureMap entries must be finite".into(),
            });
        }
        Ok(FeatureMap(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.0.dims3()
    }
}

// ---------------------------------------------------------------------------
// ValidPixelSet
// ---------------------------------------------------------------------------

impl ValidPixelSet {
    pub fn new(height: usize, width: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != height * width {
            return Err(SignetError::shape(
                "ValidPixelSet::new",
                format!("{} entries", height * width),
                format!("{}", mask.len()),
            ));
        }
        Ok(ValidPixelSet {
            mask,
            height,
            width,
        })
    }

    pub fn all(height: usize, width: usize) -> Self {
        ValidPixelSet {
            mask: vec![true; height * width],
            height,
            width,
        }
    }

    /// Pixels where the ground truth is measured (> 0).
    pub fn from_positive(depth: &DepthMap) -> Self {
        ValidPixelSet {
            mask: depth.values().iter().map(|&v| v > 0.0).collect(),
            height: depth.height(),
            width: depth.width(),
        }
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

// ---------------------------------------------------------------------------
// PNG I/O
// ---------------------------------------------------------------------------

/// Reads a single-channel 16-bit PNG as sparse depth; pixel value is depth
/// in mm and 0 marks invalid.
pub fn read_depth_png(path: impl AsRef<Path>) -> Result<SparseDepthMap> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| SignetError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let gray16: ImageBuffer<Luma<u16>, Vec<u16>> = match img {
        DynamicImage::ImageLuma16(buf) => buf,
        other => {
            return Err(SignetError::Format {
                path: path.to_path_buf(),
                reason: format!(
                    "expected single-channel 16-bit depth PNG, got {:?}",
                    other.color()
                ),
            })
        }
    };
    let (w, h) = gray16.dimensions();
    let mut values = Vec::with_capacity((w * h) as usize);
    let mut valid = Vec::with_capacity((w * h) as usize);
    for px in gray16.pixels() {
        let v = px.0[0];
        values.push(v as f64);
        valid.push(v > 0);
    }
    SparseDepthMap::new(h as usize, w as usize, values, valid)
}

/// Writes a dense depth map as a 16-bit PNG, rounding to the nearest mm
/// (half-up). Values that round outside [0, 65535] are an error, never
/// silently clipped.
pub fn write_depth_png(depth: &DepthMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut pixels = Vec::with_capacity(depth.values.len());
    for &v in &depth.values {
        let rounded = (v + 0.5).floor();
        if rounded > 65535.0 {
            return Err(SignetError::DepthRange { value: v });
        }
        pixels.push(rounded as u16);
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_vec(depth.width as u32, depth.height as u32, pixels)
            .expect("pixel count matches dimensions");
    buf.save(path).map_err(|e| SignetError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Reads an 8-bit 3-channel PNG, scaling to [0, 1] by division by 255.
pub fn read_rgb_png(path: impl AsRef<Path>) -> Result<RGBImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| SignetError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb8: ImageBuffer<Rgb<u8>, Vec<u8>> = match img {
        DynamicImage::ImageRgb8(buf) => buf,
        other => {
            return Err(SignetError::Format {
                path: path.to_path_buf(),
                reason: format!("expected 8-bit 3-channel RGB PNG, got {:?}", other.color()),
            })
        }
    };
    let (w, h) = rgb8.dimensions();
    let n = (w * h) as usize;
    let mut channels = vec![0.0; 3 * n];
    for (i, px) in rgb8.pixels().enumerate() {
        for c in 0..3 {
            channels[c * n + i] = px.0[c] as f64 / 255.0;
        }
    }
    RGBImage::new(h as usize, w as usize, channels)
}

/// Writes an RGB image as an 8-bit PNG, rounding each channel to the
/// nearest of 256 levels.
pub fn write_rgb_png(img: &RGBImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let n = img.height * img.width;
    let mut pixels = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            pixels.push((img.channels[c * n + i] * 255.0).round() as u8);
        }
    }
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_vec(img.width as u32, img.height as u32, pixels)
            .expect("pixel count matches dimensions");
    buf.save(path).map_err(|e| SignetError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
