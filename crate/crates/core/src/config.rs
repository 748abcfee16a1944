//! Global configuration shared by every subcommand.
//!
//! One structured file (TOML) holds all tunables; CLI flags override fields
//! and the merged effective config is written next to outputs. The
//! architecture-relevant subset is hashed into a fingerprint that checkpoints
//! and basis files carry, so stale artifacts are refused on load.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::error::{Error, Result};

/// Generator/encoder pair selection and shape.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GeneratorConfig {
    /// "toy" or "stylegan" (weight-loading adapter stub).
    pub kind: String,
    /// Number of style layers L of the latent space.
    pub layers: usize,
    /// Per-layer channel width C.
    pub channels: usize,
    /// Output image side (square images, 3 channels).
    pub image_size: usize,
    /// Seed for the toy pair's fixed weights.
    pub seed: u64,
    /// Scale of the toy generator's linear map.
    pub gain: f64,
    /// Path to external weights for the adapter stub.
    pub weights: Option<String>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            kind: "toy".to_string(),
            layers: 4,
            channels: 32,
            image_size: 32,
            seed: 7,
            gain: 2.0,
            weights: None,
        }
    }
}

/// MFCC front-end parameters. Defaults reproduce a (12, 28) segment from
/// 0.2 s of 16 kHz audio: 25 ms analysis window, 6.25 ms hop, 26 mel
/// filters, 13 DCT coefficients with c0 dropped.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub fps: u32,
    /// Analysis window length in samples.
    pub window: usize,
    /// Hop between analysis frames in samples.
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    /// DCT coefficients computed (starting at c0).
    pub n_coeffs: usize,
    /// Drop c0 (log-energy) from segment features.
    pub drop_c0: bool,
    pub pre_emphasis: f64,
    /// Segment length in seconds (five frame periods at 25 fps).
    pub segment_duration: f64,
    /// Time steps a segment is center-cropped to.
    pub segment_steps: usize,
    /// Emit segments as (steps, coeffs) instead of (coeffs, steps).
    pub mfcc_transposed: bool,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            fps: 25,
            window: 400,
            hop: 100,
            n_fft: 512,
            n_mels: 26,
            n_coeffs: 13,
            drop_c0: true,
            pre_emphasis: 0.97,
            segment_duration: 0.2,
            segment_steps: 28,
            mfcc_transposed: false,
        }
    }
}

impl AudioConfig {
    /// Samples per output video frame.
    pub fn samples_per_frame(&self) -> usize {
        (self.sample_rate / self.fps) as usize
    }

    /// Segment window length in samples.
    pub fn segment_samples(&self) -> usize {
        (self.segment_duration * self.sample_rate as f64).round() as usize
    }

    /// Rows of one MFCC segment.
    pub fn segment_rows(&self) -> usize {
        self.n_coeffs - usize::from(self.drop_c0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PcaConfig {
    /// Number of principal directions; 0 means min(512, samples - 1, D).
    pub k: usize,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self { k: 0 }
    }
}

/// Audio encoder / latent decoder architecture.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// Channel widths of the three stride-2 conv blocks over each segment.
    pub conv_channels: Vec<usize>,
    /// Hidden size of the 3-layer LSTM; also the audio embedding size d_e.
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    /// Width of the decoder MLP's hidden layers.
    pub mlp_width: usize,
    pub mlp_hidden_layers: usize,
    pub leaky_slope: f64,
    /// Initialization seed for trainable parameters.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![32, 64, 128],
            lstm_hidden: 256,
            lstm_layers: 3,
            mlp_width: 512,
            mlp_hidden_layers: 3,
            leaky_slope: 0.2,
            init_seed: 11,
        }
    }
}

/// Fixed random-weight conv pyramid used for perceptual distances and FID
/// features. Absolute FID values are NOT comparable to published numbers
/// computed with Inception features.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PerceptualConfig {
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 24, 32],
            seed: 99,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Stage1Config {
    pub lambda_latent: f64,
    pub lambda_lpips: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Training window length T (consecutive frames).
    pub seq_len: usize,
    /// Windows per optimization step.
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Use squared L2 norms in Eq.-style losses instead of plain norms.
    pub squared_l2: bool,
    pub disable_latent_loss: bool,
    pub disable_lpips_loss: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            lambda_latent: 250.0,
            lambda_lpips: 1.0,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            seq_len: 8,
            batch_size: 4,
            max_steps: 500,
            seed: 1,
            squared_l2: false,
            disable_latent_loss: false,
            disable_lpips_loss: false,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_latent < 0.0 || self.lambda_lpips < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.disable_latent_loss && self.disable_lpips_loss {
            return Err(Error::Config(
                "both stage-one losses disabled; at least one must remain".into(),
            ));
        }
        if self.seq_len == 0 || self.batch_size == 0 {
            return Err(Error::Config("seq_len and batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Stage2Config {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub squared_l2: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            max_steps: 200,
            seed: 2,
            squared_l2: false,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("stage-two learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DataConfig {
    /// Speakers held out of training for testing.
    pub holdout_speakers: usize,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            holdout_speakers: 10,
            split_seed: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MetricsConfig {
    /// Peak value for PSNR on [0, 1] float frames.
    pub psnr_max: f64,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    pub ssim_sigma: f64,
    pub ssim_window: usize,
    /// Dynamic range of the [0, 1] evaluation domain.
    pub dynamic_range: f64,
    /// Mouth landmark count M.
    pub mouth_points: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            psnr_max: 1.0,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
            ssim_sigma: 1.5,
            ssim_window: 11,
            dynamic_range: 1.0,
            mouth_points: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct InferenceConfig {
    /// The recurrent state resets every this many frames so inference sees
    /// the same context lengths as training windows; 0 means "use the
    /// stage-one window length". Set very large for whole-utterance state.
    pub chunk_frames: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { chunk_frames: 0 }
    }
}

/// The whole configuration tree.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Config {
    pub generator: GeneratorConfig,
    pub audio: AudioConfig,
    pub pca: PcaConfig,
    pub model: ModelConfig,
    pub perceptual: PerceptualConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub data: DataConfig,
    pub metrics: MetricsConfig,
    pub inference: InferenceConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Config =
            toml::from_str(&text).map_err(|e| Error::Config(format!("parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize error: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.generator.layers == 0 || self.generator.channels == 0 {
            return Err(Error::Config("generator latent shape must be nonzero".into()));
        }
        let pixels = self.generator.image_size * self.generator.image_size * 3;
        if self.latent_dim() > pixels {
            return Err(Error::Config(format!(
                "latent dim {} exceeds pixel count {pixels}; the toy generator needs D <= H*W*3",
                self.latent_dim()
            )));
        }
        if self.audio.window == 0 || self.audio.hop == 0 || self.audio.n_fft < self.audio.window {
            return Err(Error::Config("invalid MFCC framing parameters".into()));
        }
        if self.audio.n_coeffs > self.audio.n_mels {
            return Err(Error::Config("n_coeffs cannot exceed n_mels".into()));
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        Ok(())
    }

    /// Flattened latent dimension D = L * C.
    pub fn latent_dim(&self) -> usize {
        self.generator.layers * self.generator.channels
    }

    /// Hash of the architecture-relevant subset. Checkpoints and basis files
    /// carry it; loads refuse a mismatch unless forced. Optimizer schedules
    /// and data paths are deliberately excluded.
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct ArchView<'a> {
            generator: &'a GeneratorConfig,
            audio: &'a AudioConfig,
            model: &'a ModelConfig,
            perceptual: &'a PerceptualConfig,
        }
        let view = ArchView {
            generator: &self.generator,
            audio: &self.audio,
            model: &self.model,
            perceptual: &self.perceptual,
        };
        let json = serde_json::to_string(&view).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_string(&hasher.finalize()[..16])
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
