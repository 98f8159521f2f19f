//! Run configuration: one JSON document drives training, inference, and the
//! bench harness. Unknown keys are rejected so manifests stay trustworthy.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::err::{Error, Result};

/// Step counts, batch sizes, and learning rates for every training stage.
///
/// The codec and denoiser pretraining stages exist because this build trains
/// its own small latent codec and noise predictor instead of mounting
/// large pretrained ones; the numbered stages mirror the three-stage
/// protocol (rescaler, enhancement, joint fine-tune).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagesConfig {
    pub codec_steps: usize,
    pub codec_batch: usize,
    pub codec_crop: usize,
    pub codec_lr: f64,
    pub denoiser_steps: usize,
    pub denoiser_batch: usize,
    pub denoiser_lr: f64,
    pub stage1_steps: usize,
    pub stage1_batch: usize,
    pub stage1_crop: usize,
    pub stage1_lr: f64,
    pub stage2_steps: usize,
    pub stage2_batch: usize,
    pub stage2_crop: usize,
    pub stage2_lr: f64,
    pub stage3_steps: usize,
    pub stage3_batch: usize,
    pub stage3_crop: usize,
    pub stage3_lr: f64,
}

impl Default for StagesConfig {
    fn default() -> Self {
        Self {
            codec_steps: 1400,
            codec_batch: 6,
            codec_crop: 64,
            codec_lr: 2e-3,
            denoiser_steps: 700,
            denoiser_batch: 8,
            denoiser_lr: 1e-3,
            stage1_steps: 1200,
            stage1_batch: 8,
            stage1_crop: 128,
            stage1_lr: 1e-4,
            stage2_steps: 500,
            stage2_batch: 4,
            stage2_crop: 64,
            stage2_lr: 5e-5,
            stage3_steps: 250,
            stage3_batch: 4,
            stage3_crop: 64,
            stage3_lr: 5e-6,
        }
    }
}

/// Synthetic training corpus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub images: usize,
    pub size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { images: 64, size: 256 }
    }
}

/// Everything a run needs. Serializes to the manifest JSON verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Pixel-space rescaling factor per axis.
    pub factor: usize,
    /// Patch edge in latent cells for tiled enhancement.
    pub patch_size: usize,
    /// Patch stride in latent cells.
    pub stride: usize,
    /// Anchor time-step of the fixed scheduler term.
    pub t0: usize,
    /// Number of diffusion steps in the schedule.
    pub t_max: usize,
    pub seed: u64,
    pub lambda_rec: f64,
    pub lambda_gui: f64,
    pub lambda_pec: f64,
    pub lambda_kl: f64,
    /// Route the compact code through the invertible converter.
    pub use_inn: bool,
    /// Inject bicubic pixel guidance into the downscale encoder.
    pub use_guidance: bool,
    /// When set, bypass the predictor and scheduler: every patch uses this
    /// time-step with the plain fixed reversal (the fixed-timestep ablation).
    pub fixed_timestep: Option<f64>,
    pub stages: StagesConfig,
    pub corpus: CorpusConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            factor: 16,
            patch_size: 96,
            stride: 64,
            t0: 999,
            t_max: 1000,
            seed: 7,
            lambda_rec: 1.0,
            lambda_gui: 1.0,
            lambda_pec: 1.0,
            lambda_kl: 1e-4,
            use_inn: true,
            use_guidance: true,
            fixed_timestep: None,
            stages: StagesConfig::default(),
            corpus: CorpusConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if ![8, 16, 32].contains(&self.factor) {
            return Err(Error::config(format!(
                "factor must be 8, 16, or 32, got {}",
                self.factor
            )));
        }
        if self.stride == 0 || self.patch_size < self.stride {
            return Err(Error::config(format!(
                "need patch_size >= stride >= 1, got patch {} stride {}",
                self.patch_size, self.stride
            )));
        }
        if self.t_max < 2 || self.t0 >= self.t_max {
            return Err(Error::config(format!(
                "need t0 < t_max and t_max >= 2, got t0 {} t_max {}",
                self.t0, self.t_max
            )));
        }
        for (name, v) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_gui", self.lambda_gui),
            ("lambda_pec", self.lambda_pec),
            ("lambda_kl", self.lambda_kl),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if let Some(t) = self.fixed_timestep {
            if !t.is_finite() || t < 0.0 || t > (self.t_max - 1) as f64 {
                return Err(Error::config(format!(
                    "fixed_timestep {t} outside [0, {}]",
                    self.t_max - 1
                )));
            }
        }
        if self.corpus.images == 0 {
            return Err(Error::config("corpus.images must be positive"));
        }
        if self.corpus.size == 0 || self.corpus.size % self.factor != 0 {
            return Err(Error::config(format!(
                "corpus.size {} must be a positive multiple of the factor {}",
                self.corpus.size, self.factor
            )));
        }
        let s = &self.stages;
        for (name, v) in [
            ("codec_lr", s.codec_lr),
            ("denoiser_lr", s.denoiser_lr),
            ("stage1_lr", s.stage1_lr),
            ("stage2_lr", s.stage2_lr),
            ("stage3_lr", s.stage3_lr),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::config(format!("stages.{name} must be finite and positive, got {v}")));
            }
        }
        for (name, v) in [
            ("codec_batch", s.codec_batch),
            ("denoiser_batch", s.denoiser_batch),
            ("stage1_batch", s.stage1_batch),
            ("stage2_batch", s.stage2_batch),
            ("stage3_batch", s.stage3_batch),
        ] {
            if v == 0 {
                return Err(Error::config(format!("stages.{name} must be positive")));
            }
        }
        for (name, crop) in [
            ("codec_crop", s.codec_crop),
            ("stage1_crop", s.stage1_crop),
            ("stage2_crop", s.stage2_crop),
            ("stage3_crop", s.stage3_crop),
        ] {
            if crop == 0 || crop % 8 != 0 {
                return Err(Error::config(format!(
                    "stages.{name} must be a positive multiple of 8, got {crop}"
                )));
            }
            if crop > self.corpus.size {
                return Err(Error::config(format!(
                    "stages.{name} {crop} exceeds corpus.size {}",
                    self.corpus.size
                )));
            }
        }
        for (name, crop) in [("stage1_crop", s.stage1_crop), ("stage3_crop", s.stage3_crop)] {
            if crop % self.factor != 0 {
                return Err(Error::config(format!(
                    "stages.{name} {crop} must be a multiple of the factor {}",
                    self.factor
                )));
            }
        }
        Ok(())
    }

    /// Stable short hash of the serialized config, for manifests and
    /// checkpoint compatibility checks.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex_prefix(&digest, 12)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

pub(crate) fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut out = String::with_capacity(chars);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
        if out.len() >= chars {
            break;
        }
    }
    out.truncate(chars);
    out
}

/// Reads and validates a config file, starting from defaults so a partial
/// document is enough.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Applies `key=value` overrides with dotted paths (`stages.stage1_lr=2e-4`).
/// Values parse as JSON first, falling back to a bare string.
pub fn apply_overrides(cfg: &RunConfig, pairs: &[(String, String)]) -> Result<RunConfig> {
    let mut doc = serde_json::to_value(cfg).expect("config serializes");
    for (key, raw) in pairs {
        let parsed: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.clone()));
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::config(format!("unknown config key '{key}'")))?;
        }
        *slot = parsed;
    }
    let cfg: RunConfig =
        serde_json::from_value(doc).map_err(|e| Error::config(format!("override: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Every config key with its default value, dotted, for help output.
pub fn default_keys() -> Vec<(String, String)> {
    let doc = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let mut out = Vec::new();
    flatten("", &doc, &mut out);
    out
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}
