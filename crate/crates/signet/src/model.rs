//! Feature extraction backbones, the full network assembly, and
//! checkpointing.
//!
//! The pipeline per sample: densify the sparse depth (non-learned), denoise
//! it, extract depth and image features through residual groups with
//! channel attention, estimate the latent degradation and its kernel, run
//! the degradation-aware fusion for a fixed number of iterations
//! (non-shared weights), and decode a residual that is added back onto the
//! denoised coarse depth. Depth enters the network in meters
//! (mm / [`DEPTH_SCALE_MM`]) and the decoder output is scaled back to mm.

use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::data::{DepthMap, FeatureMap, RGBImage, SparseDepthMap};
use crate::degradation::{DegradationKernel, DegradationNet, KernelHead, DEPTH_SCALE_MM};
use crate::densify::{
    denoise, densify_colorization, densify_morphological, ColorizationParams, DenoiseParams,
    MorphParams,
};
use crate::error::{Result, SignetError};
use crate::fusion::{decompose_bands_var, FusionBlock, FusionDims, ScanDirections, SpectrumGate};
use crate::nn::{Bound, Conv2d, ParamReg, ParamStore, ResidualGroup};
use crate::rng::{fnv1a, Rng};
use crate::tensor::Tensor;

/// The decoder emits the residual in meter-scale units; the prediction adds
/// it back in mm. A smaller multiplier than the input normalization keeps
/// the documented learning rate stable along the decoder directions.
pub const OUTPUT_SCALE_MM: f64 = 1000.0;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// How RGB and depth features are combined (the ablation ladder).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Elementwise addition, no degradation involvement.
    Add,
    /// Concatenation of image, depth, and degradation features + convs.
    Concat,
    /// Sigmoid attention from the degradation field gates the image feature.
    Attention,
    /// DCT spectrum-mask selection, concat-conv encoding (no scan).
    Decomp,
    /// Full fusion with the conditional selective scan.
    Full,
}

impl FusionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::Add => "add",
            FusionMode::Concat => "concat",
            FusionMode::Attention => "attention",
            FusionMode::Decomp => "decomp",
            FusionMode::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => FusionMode::Add,
            "concat" => FusionMode::Concat,
            "attention" => FusionMode::Attention,
            "decomp" => FusionMode::Decomp,
            "full" => FusionMode::Full,
            other => {
                return Err(SignetError::Config(format!("unknown fusion mode {other}")))
            }
        })
    }
}

/// Which classical densifier feeds the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DensifierKind {
    /// Colorization when RGB is available, morphological otherwise.
    Auto,
    Morphological,
    Colorization,
}

impl DensifierKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DensifierKind::Auto => "auto",
            DensifierKind::Morphological => "morph",
            DensifierKind::Colorization => "colorize",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "auto" => DensifierKind::Auto,
            "morph" => DensifierKind::Morphological,
            "colorize" => DensifierKind::Colorization,
            other => return Err(SignetError::Config(format!("unknown densifier {other}"))),
        })
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub num_residual_groups: usize,
    pub blocks_per_group: usize,
    pub dadf_iterations: usize,
    pub bands_n: usize,
    pub ssm_state_dim: usize,
    pub kernel_k: usize,
    pub degradation_channels: usize,
    pub ca_reduction: usize,
    pub fusion_mode: FusionMode,
    pub densify_enabled: bool,
    pub denoise_enabled: bool,
    pub bridge_enabled: bool,
    pub denoise_sigma: f64,
    pub densifier: DensifierKind,
    pub scan_directions: ScanDirections,
}

impl NetworkConfig {
    /// Small configuration used by tests and the overfit experiment.
    pub fn toy() -> Self {
        NetworkConfig {
            base_channels: 16,
            num_residual_groups: 2,
            blocks_per_group: 2,
            dadf_iterations: 5,
            bands_n: 3,
            ssm_state_dim: 4,
            kernel_k: 3,
            degradation_channels: 16,
            ca_reduction: 4,
            fusion_mode: FusionMode::Full,
            densify_enabled: true,
            denoise_enabled: true,
            bridge_enabled: true,
            denoise_sigma: 1.0,
            densifier: DensifierKind::Auto,
            scan_directions: ScanDirections::One,
        }
    }

    /// Full-size configuration, built only to check the parameter budget.
    pub fn paper_scale() -> Self {
        NetworkConfig {
            base_channels: 48,
            num_residual_groups: 4,
            blocks_per_group: 4,
            ssm_state_dim: 16,
            degradation_channels: 32,
            ..NetworkConfig::toy()
        }
    }

    /// Tiny configuration for shape/finiteness sweeps.
    pub fn mini() -> Self {
        NetworkConfig {
            base_channels: 8,
            num_residual_groups: 1,
            blocks_per_group: 1,
            dadf_iterations: 1,
            bands_n: 2,
            ssm_state_dim: 2,
            degradation_channels: 4,
            ..NetworkConfig::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_channels", self.base_channels),
            ("num_residual_groups", self.num_residual_groups),
            ("blocks_per_group", self.blocks_per_group),
            ("dadf_iterations", self.dadf_iterations),
            ("bands_n", self.bands_n),
            ("ssm_state_dim", self.ssm_state_dim),
            ("kernel_k", self.kernel_k),
            ("degradation_channels", self.degradation_channels),
            ("ca_reduction", self.ca_reduction),
        ];
        for (name, v) in positive {
            if v < 1 {
                return Err(SignetError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.kernel_k % 2 == 0 {
            return Err(SignetError::Config("kernel_k must be odd".into()));
        }
        Ok(())
    }

    /// Canonical key=value listing (sorted); the hash of this string ties
    /// checkpoints to the architecture that produced them.
    pub fn canonical_string(&self) -> String {
        let scan = match self.scan_directions {
            ScanDirections::One => "1",
            ScanDirections::Two => "2",
            ScanDirections::Four => "4",
        };
        let mut lines = vec![
            format!("bands_n = {}", self.bands_n),
            format!("base_channels = {}", self.base_channels),
            format!("blocks_per_group = {}", self.blocks_per_group),
            format!("bridge_enabled = {}", self.bridge_enabled),
            format!("ca_reduction = {}", self.ca_reduction),
            format!("dadf_iterations = {}", self.dadf_iterations),
            format!("degradation_channels = {}", self.degradation_channels),
            format!("denoise_enabled = {}", self.denoise_enabled),
            format!("denoise_sigma = {}", self.denoise_sigma),
            format!("densifier = {}", self.densifier.as_str()),
            format!("densify_enabled = {}", self.densify_enabled),
            format!("fusion_mode = {}", self.fusion_mode.as_str()),
            format!("kernel_k = {}", self.kernel_k),
            format!("num_residual_groups = {}", self.num_residual_groups),
            format!("scan_directions = {scan}"),
            format!("ssm_state_dim = {}", self.ssm_state_dim),
        ];
        lines.sort();
        lines.join("\n")
    }

    pub fn config_hash(&self) -> u64 {
        fnv1a(self.canonical_string().as_bytes())
    }

    fn fusion_dims(&self) -> FusionDims {
        FusionDims {
            channels: self.base_channels,
            degradation_channels: self.degradation_channels,
            state_dim: self.ssm_state_dim,
            bands: self.bands_n,
        }
    }
}

// ---------------------------------------------------------------------------
// Feature extractor
// ---------------------------------------------------------------------------

/// Conv stem + residual groups with channel attention + body conv with a
/// long skip from the stem.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub(crate) stem: Conv2d,
    groups: Vec<ResidualGroup>,
    body: Conv2d,
}

impl FeatureExtractor {
    pub fn new(reg: &mut ParamReg, name: &str, in_channels: usize, cfg: &NetworkConfig) -> Self {
        let c = cfg.base_channels;
        FeatureExtractor {
            stem: Conv2d::new(reg, &format!("{name}.stem"), in_channels, c, cfg.kernel_k),
            groups: (0..cfg.num_residual_groups)
                .map(|g| {
                    ResidualGroup::new(
                        reg,
                        &format!("{name}.group{g}"),
                        c,
                        cfg.blocks_per_group,
                        cfg.kernel_k,
                        cfg.ca_reduction,
                    )
                })
                .collect(),
            body: Conv2d::new(reg, &format!("{name}.body"), c, c, cfg.kernel_k),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let stem = self.stem.forward(tape, bound, x);
        let mut h = stem;
        for group in &self.groups {
            h = group.forward(tape, bound, h);
        }
        let h = self.body.forward(tape, bound, h);
        tape.add(stem, h)
    }
}

/// Input to the feature extractor selecting the matching stem.
pub enum ExtractorInput<'a> {
    Depth(&'a DepthMap),
    Rgb(&'a RGBImage),
}

// ---------------------------------------------------------------------------
// Fusion stages per mode
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
enum FusionStage {
    Add,
    Concat {
        merge1: Conv2d,
        merge2: Conv2d,
    },
    Attention {
        gate: Conv2d,
        merge1: Conv2d,
        merge2: Conv2d,
    },
    Decomp {
        blocks: Vec<DecompBlock>,
    },
    Full {
        blocks: Vec<FusionBlock>,
    },
}

#[derive(Clone, Debug)]
struct DecompBlock {
    gate: SpectrumGate,
    merge1: Conv2d,
    merge2: Conv2d,
}

// ---------------------------------------------------------------------------
// SigNet
// ---------------------------------------------------------------------------

/// Decoder: two hidden convs plus a zero-initialized projection so the
/// initial prediction equals the coarse input exactly.
#[derive(Clone, Debug)]
struct Decoder {
    conv1: Conv2d,
    conv2: Conv2d,
    head: Conv2d,
}

impl Decoder {
    fn new(reg: &mut ParamReg, name: &str, cfg: &NetworkConfig) -> Self {
        let c = cfg.base_channels;
        Decoder {
            conv1: Conv2d::new(reg, &format!("{name}.conv1"), c, c, cfg.kernel_k),
            conv2: Conv2d::new(reg, &format!("{name}.conv2"), c, c, cfg.kernel_k),
            head: Conv2d::new_zeroed(reg, &format!("{name}.head"), c, 1, cfg.kernel_k),
        }
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let h = self.conv1.forward(tape, bound, x);
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, bound, h);
        let h = tape.relu(h);
        self.head.forward(tape, bound, h)
    }
}

/// The assembled network.
#[derive(Clone, Debug)]
pub struct SigNet {
    config: NetworkConfig,
    img_extractor: FeatureExtractor,
    dep_extractor: FeatureExtractor,
    degradation: Option<DegradationNet>,
    kernel_head: Option<KernelHead>,
    stage: FusionStage,
    decoder: Decoder,
}

/// Tape-level outputs of one forward pass.
pub struct ForwardVars {
    /// Prediction in millimeters, shape (1, H, W).
    pub y_mm: Var,
    /// Simplex kernel (1, 1, k, k) when the bridge is enabled.
    pub kernel: Option<Var>,
    /// Latent degradation field when the bridge is enabled.
    pub degradation: Option<Var>,
}

/// Dense outputs of the inference path.
pub struct SignetOutput {
    pub prediction: DepthMap,
    pub kernel: DegradationKernel,
    pub coarse: DepthMap,
    pub denoised: DepthMap,
}

impl SigNet {
    /// Registers all parameters (deterministic order/seed) and returns the
    /// network plus its store.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<(SigNet, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::stream(seed, "weight-init");
        let mut reg = ParamReg::new(&mut store, &mut rng);
        let c = config.base_channels;
        let cd = config.degradation_channels;
        let k = config.kernel_k;

        let img_extractor = FeatureExtractor::new(&mut reg, "img_extractor", 3, &config);
        let dep_extractor = FeatureExtractor::new(&mut reg, "dep_extractor", 1, &config);

        let (degradation, kernel_head) = if config.bridge_enabled {
            let net = DegradationNet::new(&mut reg, "degradation", cd, k, config.ca_reduction);
            let head = KernelHead::new(&mut reg, "kernel_head", cd, k);
            (Some(net), Some(head))
        } else {
            (None, None)
        };

        let dims = config.fusion_dims();
        let stage = match config.fusion_mode {
            FusionMode::Add => FusionStage::Add,
            FusionMode::Concat => {
                let cin = if config.bridge_enabled { 2 * c + cd } else { 2 * c };
                FusionStage::Concat {
                    merge1: Conv2d::new(&mut reg, "fusion.merge1", cin, c, k),
                    merge2: Conv2d::with_gain(&mut reg, "fusion.merge2", c, c, k, crate::nn::TAIL_GAIN),
                }
            }
            FusionMode::Attention => FusionStage::Attention {
                gate: Conv2d::new(&mut reg, "fusion.gate", cd, c, k),
                merge1: Conv2d::new(&mut reg, "fusion.merge1", 2 * c, c, k),
                merge2: Conv2d::with_gain(&mut reg, "fusion.merge2", c, c, k, crate::nn::TAIL_GAIN),
            },
            FusionMode::Decomp => FusionStage::Decomp {
                blocks: (0..config.dadf_iterations)
                    .map(|i| DecompBlock {
                        gate: SpectrumGate::new(&mut reg, &format!("fusion.iter{i}.gate"), dims, k),
                        merge1: Conv2d::new(&mut reg, &format!("fusion.iter{i}.merge1"), 2 * c, c, k),
                        merge2: Conv2d::with_gain(&mut reg, &format!("fusion.iter{i}.merge2"), c, c, k, crate::nn::TAIL_GAIN),
                    })
                    .collect(),
            },
            FusionMode::Full => FusionStage::Full {
                blocks: (0..config.dadf_iterations)
                    .map(|i| {
                        FusionBlock::new(
                            &mut reg,
                            &format!("fusion.iter{i}"),
                            dims,
                            k,
                            config.scan_directions,
                        )
                    })
                    .collect(),
            },
        };
        if matches!(
            config.fusion_mode,
            FusionMode::Decomp | FusionMode::Full
        ) && !config.bridge_enabled
        {
            return Err(SignetError::Config(
                "decomposition fusion needs the degradation bridge".into(),
            ));
        }

        let decoder = Decoder::new(&mut reg, "decoder", &config);
        Ok((
            SigNet {
                config,
                img_extractor,
                dep_extractor,
                degradation,
                kernel_head,
                stage,
                decoder,
            },
            store,
        ))
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Classical densification per the configured choice.
    pub fn densify(&self, s: &SparseDepthMap, img: Option<&RGBImage>) -> Result<DepthMap> {
        if !self.config.densify_enabled {
            return DepthMap::new(s.height(), s.width(), s.values().to_vec());
        }
        let use_colorization = match self.config.densifier {
            DensifierKind::Auto => img.is_some(),
            DensifierKind::Colorization => true,
            DensifierKind::Morphological => false,
        };
        if use_colorization {
            let img = img.ok_or_else(|| {
                SignetError::Config("colorization densifier needs an RGB image".into())
            })?;
            densify_colorization(s, img, &ColorizationParams::default())
        } else {
            densify_morphological(s, &MorphParams::default())
        }
    }

    pub fn denoise_coarse(&self, z: &DepthMap) -> DepthMap {
        if self.config.denoise_enabled {
            denoise(z, &DenoiseParams::with_sigma(self.config.denoise_sigma))
        } else {
            z.clone()
        }
    }

    /// Builds the forward graph from the (already densified and denoised)
    /// depth, in mm, and the RGB image.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z_hat_mm: &DepthMap,
        img: &RGBImage,
    ) -> ForwardVars {
        let depth_norm = z_hat_mm.to_tensor().map(|v| v / DEPTH_SCALE_MM);
        let depth_in = tape.constant(depth_norm);
        let img_in = tape.constant(img.to_tensor());

        let f_img = self.img_extractor.forward(tape, bound, img_in);
        let f_dep = self.dep_extractor.forward(tape, bound, depth_in);

        let (d_var, kernel, bands) = match (&self.degradation, &self.kernel_head) {
            (Some(net), Some(head)) => {
                let d = net.forward(tape, bound, depth_in);
                let kvar = head.forward(tape, bound, d);
                let bands = if matches!(
                    self.stage,
                    FusionStage::Decomp { .. } | FusionStage::Full { .. }
                ) {
                    decompose_bands_var(tape, d, self.config.bands_n)
                } else {
                    Vec::new()
                };
                (Some(d), Some(kvar), bands)
            }
            _ => (None, None, Vec::new()),
        };

        let fused = match &self.stage {
            FusionStage::Add => tape.add(f_img, f_dep),
            FusionStage::Concat { merge1, merge2 } => {
                let cat = match d_var {
                    Some(d) => tape.concat_ch(&[f_img, f_dep, d]),
                    None => tape.concat_ch(&[f_img, f_dep]),
                };
                let h = merge1.forward(tape, bound, cat);
                let h = tape.relu(h);
                merge2.forward(tape, bound, h)
            }
            FusionStage::Attention { gate, merge1, merge2 } => {
                let d = d_var.expect("attention fusion requires the bridge");
                let g = gate.forward(tape, bound, d);
                let g = tape.sigmoid(g);
                let selected = tape.mul(g, f_img);
                let cat = tape.concat_ch(&[selected, f_dep]);
                let h = merge1.forward(tape, bound, cat);
                let h = tape.relu(h);
                merge2.forward(tape, bound, h)
            }
            FusionStage::Decomp { blocks } => {
                let d = d_var.expect("decomposition fusion requires the bridge");
                let mut h = f_dep;
                for block in blocks {
                    let (_, selected) = block.gate.forward(tape, bound, f_img, d, &bands);
                    let cat = tape.concat_ch(&[selected, h]);
                    let m = block.merge1.forward(tape, bound, cat);
                    let m = tape.relu(m);
                    h = block.merge2.forward(tape, bound, m);
                }
                h
            }
            FusionStage::Full { blocks } => {
                let d = d_var.expect("full fusion requires the bridge");
                let mut h = f_dep;
                for block in blocks {
                    h = block.forward(tape, bound, f_img, h, d, &bands);
                }
                h
            }
        };

        let residual_m = self.decoder.forward(tape, bound, fused);
        let residual_mm = tape.scale(residual_m, OUTPUT_SCALE_MM);
        let y_mm = if self.config.densify_enabled {
            let base = tape.constant(z_hat_mm.to_tensor());
            tape.add(base, residual_mm)
        } else {
            residual_mm
        };
        ForwardVars {
            y_mm,
            kernel,
            degradation: d_var,
        }
    }

    /// Full inference: densify, denoise, enhance. Returns the prediction
    /// (clamped to >= 0 mm), the learned kernel, and the coarse depth.
    pub fn forward(
        &self,
        store: &ParamStore,
        s: &SparseDepthMap,
        img: &RGBImage,
    ) -> Result<SignetOutput> {
        if s.height() != img.height() || s.width() != img.width() {
            return Err(SignetError::shape(
                "signet_forward",
                format!("{}x{}", s.height(), s.width()),
                format!("{}x{}", img.height(), img.width()),
            ));
        }
        let coarse = self.densify(s, Some(img))?;
        let denoised = self.denoise_coarse(&coarse);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let out = self.forward_on_tape(&mut tape, &bound, &denoised, img);
        let y = tape.value(out.y_mm).map(|v| v.max(0.0));
        let prediction = DepthMap::from_tensor(&y)?;
        let kernel = match out.kernel {
            Some(kv) => DegradationKernel::new(
                self.config.kernel_k,
                tape.value(kv).data().to_vec(),
            )?,
            None => DegradationKernel::delta(self.config.kernel_k),
        };
        Ok(SignetOutput {
            prediction,
            kernel,
            coarse,
            denoised,
        })
    }

    /// Feature extraction through the stem matching the input kind.
    pub fn extract_features(&self, store: &ParamStore, input: ExtractorInput) -> Result<FeatureMap> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let var = match input {
            ExtractorInput::Depth(z) => {
                let t = z.to_tensor().map(|v| v / DEPTH_SCALE_MM);
                let x = tape.constant(t);
                self.dep_extractor.forward(&mut tape, &bound, x)
            }
            ExtractorInput::Rgb(img) => {
                let x = tape.constant(img.to_tensor());
                self.img_extractor.forward(&mut tape, &bound, x)
            }
        };
        FeatureMap::new(tape.value(var).clone())
    }
}

/// Sum of scalar parameter counts.
pub fn count_parameters(store: &ParamStore) -> usize {
    store.count_scalars()
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"SGNTCKPT";
const CKPT_VERSION: u32 = 1;

/// Optimizer/progress state embedded in training checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    pub rng_state: u64,
    /// First /second moment estimates, aligned with store order.
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
}

fn write_tensor(buf: &mut Vec<u8>, group: u8, name: &str, t: &Tensor) {
    buf.push(group);
    let name_bytes = name.as_bytes();
    buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(name_bytes);
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the parameter store (and optional train state) bit-exactly.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    store: &ParamStore,
    config_hash: u64,
    train_state: Option<&TrainState>,
) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&config_hash.to_le_bytes());
    match train_state {
        Some(ts) => {
            buf.push(1);
            buf.extend_from_slice(&ts.step.to_le_bytes());
            buf.extend_from_slice(&ts.epoch.to_le_bytes());
            buf.extend_from_slice(&ts.rng_state.to_le_bytes());
        }
        None => buf.push(0),
    }
    let tensor_count = store.len()
        + train_state.map_or(0, |ts| ts.adam_m.len() + ts.adam_v.len());
    buf.extend_from_slice(&(tensor_count as u32).to_le_bytes());
    for (name, t) in store.iter() {
        write_tensor(&mut buf, 0, name, t);
    }
    if let Some(ts) = train_state {
        assert_eq!(ts.adam_m.len(), store.len(), "adam state misaligned");
        assert_eq!(ts.adam_v.len(), store.len(), "adam state misaligned");
        for ((name, _), m) in store.iter().zip(ts.adam_m.iter()) {
            write_tensor(&mut buf, 1, name, m);
        }
        for ((name, _), v) in store.iter().zip(ts.adam_v.iter()) {
            write_tensor(&mut buf, 2, name, v);
        }
    }
    std::fs::write(path, buf).map_err(|e| SignetError::io(path, e))
}

struct CkptReader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> CkptReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(SignetError::Checkpoint {
                path: self.path.to_path_buf(),
                reason: "truncated file".into(),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads a checkpoint: the parameter store in file order, the config hash,
/// and the embedded train state if present.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(ParamStore, u64, Option<TrainState>)> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| SignetError::io(path, e))?;
    let mut r = CkptReader {
        data: &data,
        pos: 0,
        path,
    };
    if r.take(8)? != CKPT_MAGIC {
        return Err(SignetError::Checkpoint {
            path: path.to_path_buf(),
            reason: "not a checkpoint file".into(),
        });
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(SignetError::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("format version {version} needs migration (expected {CKPT_VERSION})"),
        });
    }
    let config_hash = r.u64()?;
    let has_state = r.u8()? == 1;
    let (step, epoch, rng_state) = if has_state {
        (r.u64()?, r.u64()?, r.u64()?)
    } else {
        (0, 0, 0)
    };
    let tensor_count = r.u32()? as usize;

    let mut store = ParamStore::new();
    let mut adam_m = Vec::new();
    let mut adam_v = Vec::new();
    for _ in 0..tensor_count {
        let group = r.u8()?;
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| {
            SignetError::Checkpoint {
                path: path.to_path_buf(),
                reason: "invalid tensor name".into(),
            }
        })?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let bytes = r.take(len * 8)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::from_vec(&shape, data);
        match group {
            0 => {
                store.add(&name, tensor);
            }
            1 => adam_m.push(tensor),
            2 => adam_v.push(tensor),
            g => {
                return Err(SignetError::Checkpoint {
                    path: path.to_path_buf(),
                    reason: format!("unknown tensor group {g}"),
                })
            }
        }
    }
    let train_state = has_state.then(|| TrainState {
        step,
        epoch,
        rng_state,
        adam_m,
        adam_v,
    });
    Ok((store, config_hash, train_state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ValidPixelSet;
    use crate::nn::ParamReg;

    fn toy_scene(h: usize, w: usize, seed: u64) -> (SparseDepthMap, RGBImage) {
        let mut rng = Rng::new(seed);
        let gt = DepthMap::new(h, w, (0..h * w).map(|_| rng.range(500.0, 6000.0)).collect())
            .unwrap();
        let mask: Vec<bool> = (0..h * w).map(|_| rng.uniform() < 0.2).collect();
        let mut mask = mask;
        mask[0] = true; // at least one valid pixel
        let s = SparseDepthMap::from_depth(&gt, mask).unwrap();
        let img = RGBImage::new(h, w, (0..3 * h * w).map(|_| rng.uniform()).collect()).unwrap();
        (s, img)
    }

    #[test]
    fn toy_forward_shapes_and_kernel_simplex() {
        let (net, store) = SigNet::build(NetworkConfig::toy(), 7).unwrap();
        let (s, img) = toy_scene(32, 32, 1);
        let out = net.forward(&store, &s, &img).unwrap();
        assert_eq!((out.prediction.height(), out.prediction.width()), (32, 32));
        assert_eq!(out.kernel.size(), 3);
        let sum: f64 = out.kernel.weights().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_decoder_head_means_prediction_equals_denoised() {
        let (net, store) = SigNet::build(NetworkConfig::toy(), 8).unwrap();
        // decoder head is zero-initialized by construction
        let (s, img) = toy_scene(24, 24, 2);
        let out = net.forward(&store, &s, &img).unwrap();
        assert_eq!(out.prediction.values(), out.denoised.values());
        // and therefore identical metrics against any ground truth
        let gt = DepthMap::constant(24, 24, 2000.0);
        let valid = ValidPixelSet::all(24, 24);
        let a = crate::metrics::compute_metrics(&out.prediction, &gt, &valid).unwrap();
        let b = crate::metrics::compute_metrics(&out.denoised, &gt, &valid).unwrap();
        assert_eq!(a.rmse, b.rmse);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let (net, store) = SigNet::build(NetworkConfig::toy(), 9).unwrap();
        let (s, img) = toy_scene(16, 16, 3);
        let o1 = net.forward(&store, &s, &img).unwrap();
        let o2 = net.forward(&store, &s, &img).unwrap();
        let bits = |d: &DepthMap| -> Vec<u64> { d.values().iter().map(|v| v.to_bits()).collect() };
        assert_eq!(bits(&o1.prediction), bits(&o2.prediction));
        assert_eq!(o1.kernel.weights(), o2.kernel.weights());
    }

    #[test]
    fn extractor_shapes_and_stem_linearity() {
        let cfg = NetworkConfig::toy();
        let (net, store) = SigNet::build(cfg, 10).unwrap();
        let z = DepthMap::constant(32, 32, 1500.0);
        let f = net
            .extract_features(&store, ExtractorInput::Depth(&z))
            .unwrap();
        assert_eq!(f.dims(), (16, 32, 32));

        // stem with zero bias is linear: doubling the input doubles the
        // pre-residual stem response
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x1 = tape.constant(Tensor::from_fn(&[1, 8, 8], |i| (i as f64 * 0.11).sin()));
        let x2 = tape.constant(Tensor::from_fn(&[1, 8, 8], |i| 2.0 * (i as f64 * 0.11).sin()));
        let s1 = net.dep_extractor.stem.forward(&mut tape, &bound, x1);
        let s2 = net.dep_extractor.stem.forward(&mut tape, &bound, x2);
        for (a, b) in tape.value(s1).data().iter().zip(tape.value(s2).data()) {
            assert!((2.0 * a - b).abs() < 1e-9);
        }

        // zero input with zero bias gives zero stem output
        let zero = tape.constant(Tensor::zeros(&[1, 8, 8]));
        let s0 = net.dep_extractor.stem.forward(&mut tape, &bound, zero);
        assert_eq!(tape.value(s0).max_abs(), 0.0);
    }

    #[test]
    fn conv_parameter_count_arithmetic() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(4);
        let mut reg = ParamReg::new(&mut store, &mut rng);
        let _ = Conv2d::new(&mut reg, "c", 16, 16, 3);
        assert_eq!(count_parameters(&store), 2320); // 2304 weights + 16 bias
    }

    #[test]
    fn count_matches_reflection_walk() {
        let (_, store) = SigNet::build(NetworkConfig::mini(), 5).unwrap();
        let direct = count_parameters(&store);
        let walked: usize = store.iter().map(|(_, t)| t.shape().iter().product::<usize>()).sum();
        assert_eq!(direct, walked);
    }

    #[test]
    fn paper_scale_parameter_budget() {
        let (_, store) = SigNet::build(NetworkConfig::paper_scale(), 1).unwrap();
        let count = count_parameters(&store);
        assert!(
            (2_800_000..=3_800_000).contains(&count),
            "paper-scale parameter count {count} outside [2.8M, 3.8M]"
        );
    }

    #[test]
    fn finite_outputs_for_many_random_inputs() {
        let (net, store) = SigNet::build(NetworkConfig::mini(), 11).unwrap();
        let mut rng = Rng::new(77);
        for _ in 0..1000 {
            let h = 8;
            let w = 8;
            let denoised = DepthMap::new(
                h,
                w,
                (0..h * w).map(|_| rng.range(300.0, 10_000.0)).collect(),
            )
            .unwrap();
            let img =
                RGBImage::new(h, w, (0..3 * h * w).map(|_| rng.uniform()).collect()).unwrap();
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let out = net.forward_on_tape(&mut tape, &bound, &denoised, &img);
            assert!(tape.value(out.y_mm).all_finite());
        }
    }

    #[test]
    fn ablation_modes_build_and_run() {
        for (mode, densify, denoise, bridge) in [
            (FusionMode::Add, false, false, false),
            (FusionMode::Concat, true, false, true),
            (FusionMode::Concat, true, true, true),
            (FusionMode::Attention, true, true, true),
            (FusionMode::Decomp, true, true, true),
            (FusionMode::Full, true, true, true),
        ] {
            let cfg = NetworkConfig {
                fusion_mode: mode,
                densify_enabled: densify,
                denoise_enabled: denoise,
                bridge_enabled: bridge,
                ..NetworkConfig::mini()
            };
            let (net, store) = SigNet::build(cfg, 21).unwrap();
            let (s, img) = toy_scene(12, 12, 5);
            let out = net.forward(&store, &s, &img).unwrap();
            assert_eq!(out.prediction.height(), 12);
            assert!(out.prediction.values().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let (_, store) = SigNet::build(NetworkConfig::mini(), 31).unwrap();
        let dir = std::env::temp_dir().join("signet-model-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ckpt");
        let hash = NetworkConfig::mini().config_hash();
        let state = TrainState {
            step: 123,
            epoch: 4,
            rng_state: 0xDEADBEEF,
            adam_m: store.iter().map(|(_, t)| Tensor::full(t.shape(), 0.25)).collect(),
            adam_v: store.iter().map(|(_, t)| Tensor::full(t.shape(), 0.5)).collect(),
        };
        save_checkpoint(&path, &store, hash, Some(&state)).unwrap();
        let (loaded, loaded_hash, loaded_state) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_hash, hash);
        assert_eq!(loaded.len(), store.len());
        for ((n1, t1), (n2, t2)) in store.iter().zip(loaded.iter()) {
            assert_eq!(n1, n2);
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        let ls = loaded_state.unwrap();
        assert_eq!(ls.step, 123);
        assert_eq!(ls.epoch, 4);
        assert_eq!(ls.rng_state, 0xDEADBEEF);
        assert_eq!(ls.adam_m.len(), store.len());
    }

    #[test]
    fn checkpoint_version_guard() {
        let dir = std::env::temp_dir().join("signet-model-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("badversion.ckpt");
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&99u32.to_le_bytes());
        buf.extend_from_slice(&0u64.to_le_bytes());
        buf.push(0);
        buf.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, buf).unwrap();
        match load_checkpoint(&path) {
            Err(SignetError::Checkpoint { reason, .. }) => {
                assert!(reason.contains("migration"), "{reason}")
            }
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn config_hash_tracks_every_field() {
        let base = NetworkConfig::toy();
        let mut altered = base.clone();
        altered.bands_n = 5;
        assert_ne!(base.config_hash(), altered.config_hash());
        let mut altered2 = base.clone();
        altered2.fusion_mode = FusionMode::Concat;
        assert_ne!(base.config_hash(), altered2.config_hash());
        assert_eq!(base.config_hash(), NetworkConfig::toy().config_hash());
    }
}
