//! The ablation ladder: six architecture variants differing only in
//! documented configuration switches.
//!
//! - i: raw sparse input, no degradation branch, additive RGB-D fusion
//! - ii: classical densification + degradation branch, concat fusion
//! - iii: ii plus Gaussian denoising of the coarse depth
//! - iv: sigmoid attention from the degradation field selects RGB features
//! - v: iv upgraded to full DCT spectrum-mask selection
//! - vi: the complete model with conditional selective-scan fusion

use crate::error::{Result, SignetError};
use crate::eval::{evaluate, EvalRow};
use crate::metrics::MetricReport;
use crate::model::{FusionMode, NetworkConfig, SigNet};
use crate::synth::SyntheticScene;
use crate::train::{prepare_samples, train, TrainConfig, TrainLog};

/// Table rows i..vi.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationVariant {
    I,
    II,
    III,
    IV,
    V,
    VI,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::I,
        AblationVariant::II,
        AblationVariant::III,
        AblationVariant::IV,
        AblationVariant::V,
        AblationVariant::VI,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "i" | "1" => AblationVariant::I,
            "ii" | "2" => AblationVariant::II,
            "iii" | "3" => AblationVariant::III,
            "iv" | "4" => AblationVariant::IV,
            "v" | "5" => AblationVariant::V,
            "vi" | "6" => AblationVariant::VI,
            other => {
                return Err(SignetError::Parameter {
                    name: "variant".into(),
                    reason: format!("expected i..vi, got {other}"),
                })
            }
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AblationVariant::I => "i",
            AblationVariant::II => "ii",
            AblationVariant::III => "iii",
            AblationVariant::IV => "iv",
            AblationVariant::V => "v",
            AblationVariant::VI => "vi",
        }
    }

    /// The variant's switches applied to a base (full-model) configuration.
    pub fn network_config(&self, base: &NetworkConfig) -> NetworkConfig {
        let mut cfg = base.clone();
        match self {
            AblationVariant::I => {
                cfg.densify_enabled = false;
                cfg.denoise_enabled = false;
                cfg.bridge_enabled = false;
                cfg.fusion_mode = FusionMode::Add;
            }
            AblationVariant::II => {
                cfg.denoise_enabled = false;
                cfg.fusion_mode = FusionMode::Concat;
            }
            AblationVariant::III => {
                cfg.fusion_mode = FusionMode::Concat;
            }
            AblationVariant::IV => {
                cfg.fusion_mode = FusionMode::Attention;
            }
            AblationVariant::V => {
                cfg.fusion_mode = FusionMode::Decomp;
            }
            AblationVariant::VI => {}
        }
        cfg
    }

    /// Variant i has no degradation branch, so the bridge loss is off.
    pub fn lambda(&self, base_lambda: f64) -> f64 {
        match self {
            AblationVariant::I => 0.0,
            _ => base_lambda,
        }
    }
}

/// Keys whose values differ between two configurations (from the canonical
/// key=value listing).
pub fn config_diff(a: &NetworkConfig, b: &NetworkConfig) -> Vec<String> {
    let parse = |s: String| -> Vec<(String, String)> {
        s.lines()
            .map(|l| {
                let (k, v) = l.split_once(" = ").expect("canonical line");
                (k.to_string(), v.to_string())
            })
            .collect()
    };
    let la = parse(a.canonical_string());
    let lb = parse(b.canonical_string());
    la.iter()
        .zip(lb.iter())
        .filter(|((ka, va), (kb, vb))| {
            assert_eq!(ka, kb);
            va != vb
        })
        .map(|((k, _), _)| k.clone())
        .collect()
}

/// Result of training one variant and scoring it on held-out scenes.
pub struct AblationOutcome {
    pub variant: AblationVariant,
    pub heldout: MetricReport,
    pub rows: Vec<EvalRow>,
    pub log: TrainLog,
}

/// Trains the variant on `train_scenes` under the given budget and reports
/// held-out metrics at the training density.
pub fn run_ablation(
    variant: AblationVariant,
    base_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
    train_scenes: &[SyntheticScene],
    heldout_scenes: &[SyntheticScene],
) -> Result<AblationOutcome> {
    let net_cfg = variant.network_config(base_cfg);
    let cfg = TrainConfig {
        lambda: variant.lambda(train_cfg.lambda),
        ..train_cfg.clone()
    };
    let (net, mut store) = SigNet::build(net_cfg.clone(), cfg.seed)?;
    let samples = prepare_samples(&net, train_scenes, cfg.density, cfg.seed)?;
    let outcome = train(&net, &mut store, &samples, &cfg, &net_cfg, None, None, |_, _| true)?;
    let rows = evaluate(&net, &store, heldout_scenes, &[cfg.density], cfg.seed)?;
    let heldout = rows
        .iter()
        .find(|r| r.sample_id == "aggregate")
        .expect("aggregate row")
        .report;
    Ok(AblationOutcome {
        variant,
        heldout,
        rows,
        log: outcome.log,
    })
}
