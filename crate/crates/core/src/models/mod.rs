//! The four networks: audio encoder, latent decoder, image generator and
//! image encoder, with the generator/encoder behind pluggable traits.
//!
//! The built-in toy pair is analytically invertible so the whole pipeline is
//! testable without external weights; real pretrained generators/encoders
//! plug in through weight-loading adapters (stubs here, out of scope).

mod audio_encoder;
mod decoder;
mod frame;
mod perceptual;
mod toy;

pub use audio_encoder::{AudioEmbedding, AudioEncoder, AudioEncoderCache};
pub use decoder::{DecoderCache, LatentDecoder};
pub use frame::{Frame, VideoClip};
pub use perceptual::{perceptual_distance, PerceptualExtractor, PhiCache};
pub use toy::{build_toy_pair, ToyEncoder, ToyGenerator};

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::path::Path;

use crate::archive::TensorArchive;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::latent::LatentCode;
use crate::nn::{load_params, param_count, save_params, ParamSet};

/// A fixed, deterministic, differentiable synthesis network.
pub trait ImageGenerator: Send + Sync {
    /// (L, C)
    fn latent_shape(&self) -> (usize, usize);
    /// (H, W); images always have 3 channels.
    fn image_shape(&self) -> (usize, usize);
    fn synthesize(&self, w: &LatentCode) -> Result<Frame>;
    /// Vector-Jacobian product: gradient w.r.t. the latent given the
    /// gradient w.r.t. the output image.
    fn latent_vjp(&self, w: &LatentCode, frame_grad: &Array3<f64>) -> Result<LatentCode>;
    fn parameter_count(&self) -> usize;
}

/// A fixed, deterministic inversion network mapping images to latents.
pub trait ImageEncoder: Send + Sync {
    fn latent_shape(&self) -> (usize, usize);
    fn image_shape(&self) -> (usize, usize);
    fn invert(&self, frame: &Frame) -> Result<LatentCode>;
    /// Pixels clamped during inversion so far (toy encoder only).
    fn clamp_warnings(&self) -> u64 {
        0
    }
}

/// Weight-loading adapter for external pretrained generators/encoders.
///
/// Loading validates the archive and declared shapes; synthesis/inversion
/// require the external architecture and are not implemented here.
pub struct ExternalAdapter {
    latent: (usize, usize),
    image: (usize, usize),
    tensor_count: usize,
}

impl ExternalAdapter {
    pub fn load(path: &Path, cfg: &Config) -> Result<Self> {
        let arc = TensorArchive::read(path)?;
        Ok(Self {
            latent: (cfg.generator.layers, cfg.generator.channels),
            image: (cfg.generator.image_size, cfg.generator.image_size),
            tensor_count: arc.len(),
        })
    }

    pub fn tensor_count(&self) -> usize {
        self.tensor_count
    }
}

impl ImageGenerator for ExternalAdapter {
    fn latent_shape(&self) -> (usize, usize) {
        self.latent
    }

    fn image_shape(&self) -> (usize, usize) {
        self.image
    }

    fn synthesize(&self, _w: &LatentCode) -> Result<Frame> {
        Err(Error::Unsupported(
            "external generator weights are loaded but synthesis requires the external \
             architecture; use the toy generator"
                .into(),
        ))
    }

    fn latent_vjp(&self, _w: &LatentCode, _g: &Array3<f64>) -> Result<LatentCode> {
        Err(Error::Unsupported("external generator has no gradient path here".into()))
    }

    fn parameter_count(&self) -> usize {
        0
    }
}

impl ImageEncoder for ExternalAdapter {
    fn latent_shape(&self) -> (usize, usize) {
        self.latent
    }

    fn image_shape(&self) -> (usize, usize) {
        self.image
    }

    fn invert(&self, _frame: &Frame) -> Result<LatentCode> {
        Err(Error::Unsupported(
            "external encoder weights are loaded but inversion requires the external \
             architecture; use the toy encoder"
                .into(),
        ))
    }
}

/// Build the configured generator/encoder pair.
pub fn build_pair(cfg: &Config) -> Result<(Box<dyn ImageGenerator>, Box<dyn ImageEncoder>)> {
    match cfg.generator.kind.as_str() {
        "toy" => {
            let (g, e) = build_toy_pair(&cfg.generator);
            Ok((Box::new(g), Box::new(e)))
        }
        "stylegan" => {
            let path = cfg.generator.weights.as_ref().ok_or_else(|| {
                Error::Config("generator.kind = \"stylegan\" requires generator.weights".into())
            })?;
            let g = ExternalAdapter::load(Path::new(path), cfg)?;
            let e = ExternalAdapter::load(Path::new(path), cfg)?;
            Ok((Box::new(g), Box::new(e)))
        }
        other => Err(Error::Config(format!("unknown generator kind {other:?}"))),
    }
}

/// The trainable stage-one networks (audio encoder + latent decoder).
#[derive(Debug, Clone)]
pub struct TrajectoryModel {
    pub audio_encoder: AudioEncoder,
    pub decoder: LatentDecoder,
}

impl TrajectoryModel {
    /// Fresh initialization from the config's init seed; `k` is the PCA
    /// subspace dimension the decoder reads and writes.
    pub fn new(cfg: &Config, k: usize) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.model.init_seed);
        let audio_encoder = AudioEncoder::new(&mut rng, &cfg.audio, &cfg.model);
        let embed = audio_encoder.embedding_dim();
        let decoder = LatentDecoder::new(&mut rng, k, embed, &cfg.model);
        Self {
            audio_encoder,
            decoder,
        }
    }

    pub fn parameter_count(&self) -> usize {
        param_count(self)
    }
}

impl ParamSet for TrajectoryModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.audio_encoder.visit(&format!("{prefix}audio_encoder"), f);
        self.decoder.visit(&format!("{prefix}decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.audio_encoder
            .visit_mut(&format!("{prefix}audio_encoder"), f);
        self.decoder.visit_mut(&format!("{prefix}decoder"), f);
    }
}

/// Header fields every checkpoint carries.
#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub kind: String,
    pub fingerprint: String,
    pub seed: u64,
    pub step: usize,
    pub version: String,
    pub k: usize,
}

fn meta_from_archive(arc: &TensorArchive) -> Result<CheckpointMeta> {
    Ok(CheckpointMeta {
        kind: arc.meta_get("kind")?.to_string(),
        fingerprint: arc.meta_get("fingerprint")?.to_string(),
        seed: arc
            .meta_get("seed")?
            .parse()
            .map_err(|_| Error::Data("bad seed in checkpoint".into()))?,
        step: arc
            .meta_get("step")?
            .parse()
            .map_err(|_| Error::Data("bad step in checkpoint".into()))?,
        version: arc.meta_get("version")?.to_string(),
        k: arc
            .meta_get("k")?
            .parse()
            .map_err(|_| Error::Data("bad k in checkpoint".into()))?,
    })
}

fn check_fingerprint(stored: &str, cfg: &Config, force: bool) -> Result<()> {
    let current = cfg.fingerprint();
    if stored != current && !force {
        return Err(Error::Config(format!(
            "checkpoint fingerprint {stored} does not match config fingerprint {current}; \
             pass --force to load anyway"
        )));
    }
    Ok(())
}

/// Serialize stage-one networks plus the perceptual extractor.
pub fn save_stage1_checkpoint(
    path: &Path,
    model: &TrajectoryModel,
    phi: &PerceptualExtractor,
    cfg: &Config,
    seed: u64,
    step: usize,
) -> Result<()> {
    let mut arc = TensorArchive::new();
    arc.meta.insert("kind".into(), "stage1".into());
    arc.meta.insert("fingerprint".into(), cfg.fingerprint());
    arc.meta.insert("seed".into(), seed.to_string());
    arc.meta.insert("step".into(), step.to_string());
    arc.meta
        .insert("version".into(), env!("CARGO_PKG_VERSION").into());
    arc.meta.insert("k".into(), model.decoder.k().to_string());
    save_params(model, "", &mut arc);
    save_params(phi, "perceptual", &mut arc);
    arc.write(path)
}

/// Load stage-one networks; refuses a fingerprint mismatch unless `force`.
pub fn load_stage1_checkpoint(
    path: &Path,
    cfg: &Config,
    force: bool,
) -> Result<(TrajectoryModel, PerceptualExtractor, CheckpointMeta)> {
    let arc = TensorArchive::read(path)?;
    let meta = meta_from_archive(&arc)?;
    if meta.kind != "stage1" {
        return Err(Error::Data(format!(
            "{} is a {:?} checkpoint, expected stage1",
            path.display(),
            meta.kind
        )));
    }
    check_fingerprint(&meta.fingerprint, cfg, force)?;
    let mut model = TrajectoryModel::new(cfg, meta.k);
    load_params(&mut model, "", &arc)?;
    let mut phi = PerceptualExtractor::new(&cfg.perceptual);
    load_params(&mut phi, "perceptual", &arc)?;
    Ok((model, phi, meta))
}

/// Serialize a (stage-two tuned) toy generator for a subject.
pub fn save_generator_checkpoint(
    path: &Path,
    generator: &ToyGenerator,
    cfg: &Config,
    subject: &str,
    step: usize,
) -> Result<()> {
    let mut arc = TensorArchive::new();
    arc.meta.insert("kind".into(), "generator".into());
    arc.meta.insert("fingerprint".into(), cfg.fingerprint());
    arc.meta.insert("seed".into(), cfg.generator.seed.to_string());
    arc.meta.insert("step".into(), step.to_string());
    arc.meta
        .insert("version".into(), env!("CARGO_PKG_VERSION").into());
    arc.meta.insert("k".into(), "0".into());
    arc.meta.insert("subject".into(), subject.into());
    save_params(generator, "generator", &mut arc);
    arc.write(path)
}

/// Load a tuned toy generator.
pub fn load_generator_checkpoint(
    path: &Path,
    cfg: &Config,
    force: bool,
) -> Result<(ToyGenerator, CheckpointMeta)> {
    let arc = TensorArchive::read(path)?;
    let meta = meta_from_archive(&arc)?;
    if meta.kind != "generator" {
        return Err(Error::Data(format!(
            "{} is a {:?} checkpoint, expected generator",
            path.display(),
            meta.kind
        )));
    }
    check_fingerprint(&meta.fingerprint, cfg, force)?;
    let (mut generator, _) = build_toy_pair(&cfg.generator);
    load_params(&mut generator, "generator", &arc)?;
    Ok((generator, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param_hash;

    fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.generator.layers = 2;
        cfg.generator.channels = 8;
        cfg.generator.image_size = 8;
        cfg.model.conv_channels = vec![2, 3];
        cfg.model.lstm_hidden = 8;
        cfg.model.mlp_width = 16;
        cfg
    }

    // Parameter accounting: the reported total equals the sum over named
    // tensors, which we recompute here from the architecture by hand.
    #[test]
    fn parameter_count_matches_hand_formula() {
        let cfg = tiny_config();
        let model = TrajectoryModel::new(&cfg, 4);

        // Conv stack over 12x28: conv0 1->2, conv1 2->3.
        let conv0 = 2 * 1 * 9 + 2;
        let conv1 = 3 * 2 * 9 + 3;
        // Spatial: 12x28 -> 6x14 -> 3x7; flatten = 3*3*7 = 63.
        let flat = 3 * 3 * 7;
        // LSTM: 3 layers, hidden 8 => 4H = 32.
        let l0 = 32 * flat + 32 * 8 + 32;
        let l12 = 2 * (32 * 8 + 32 * 8 + 32);
        // Decoder MLP: in = 4 + 8 = 12, width 16, 3 hidden, out 4.
        let mlp = (16 * 12 + 16) + 2 * (16 * 16 + 16) + (4 * 16 + 4);

        let expected = conv0 + conv1 + l0 + l12 + mlp;
        assert_eq!(model.parameter_count(), expected);
    }

    #[test]
    fn stage1_checkpoint_round_trip_preserves_every_bit() {
        let cfg = tiny_config();
        let model = TrajectoryModel::new(&cfg, 4);
        let phi = PerceptualExtractor::new(&cfg.perceptual);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_stage1_checkpoint(&path, &model, &phi, &cfg, 42, 17).unwrap();

        let (loaded, phi2, meta) = load_stage1_checkpoint(&path, &cfg, false).unwrap();
        assert_eq!(param_hash(&model), param_hash(&loaded));
        assert_eq!(param_hash(&phi), param_hash(&phi2));
        assert_eq!(meta.seed, 42);
        assert_eq!(meta.step, 17);
        assert_eq!(meta.k, 4);
    }

    #[test]
    fn fingerprint_mismatch_is_refused_unless_forced() {
        let cfg = tiny_config();
        let model = TrajectoryModel::new(&cfg, 4);
        let phi = PerceptualExtractor::new(&cfg.perceptual);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_stage1_checkpoint(&path, &model, &phi, &cfg, 1, 0).unwrap();

        let mut other = cfg.clone();
        other.model.lstm_hidden = 8; // same, still matches
        assert!(load_stage1_checkpoint(&path, &other, false).is_ok());

        other.audio.n_mels = 20;
        assert!(matches!(
            load_stage1_checkpoint(&path, &other, false),
            Err(Error::Config(_))
        ));
        // Forcing bypasses the check (shapes here are unaffected by n_mels).
        assert!(load_stage1_checkpoint(&path, &other, true).is_ok());
    }

    #[test]
    fn generator_checkpoint_round_trip() {
        let cfg = tiny_config();
        let (mut gen, _) = build_toy_pair(&cfg.generator);
        gen.b[0] += 0.25; // pretend it was tuned
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.bin");
        save_generator_checkpoint(&path, &gen, &cfg, "spk0", 200).unwrap();

        let (loaded, meta) = load_generator_checkpoint(&path, &cfg, false).unwrap();
        assert_eq!(param_hash(&gen), param_hash(&loaded));
        assert_eq!(meta.step, 200);
    }

    #[test]
    fn external_adapter_loads_but_refuses_synthesis() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let weights = dir.path().join("weights.bin");
        let mut arc = TensorArchive::new();
        arc.insert("anything", ndarray::array![1.0].into_dyn());
        arc.write(&weights).unwrap();

        let mut sg = cfg.clone();
        sg.generator.kind = "stylegan".into();
        sg.generator.weights = Some(weights.to_string_lossy().into_owned());
        let (g, e) = build_pair(&sg).unwrap();
        assert_eq!(g.latent_shape(), (2, 8));
        let w = LatentCode::zeros(2, 8);
        assert!(matches!(g.synthesize(&w), Err(Error::Unsupported(_))));
        assert!(matches!(
            e.invert(&Frame::zeros(8, 8)),
            Err(Error::Unsupported(_))
        ));

        // Missing weights path is a config error.
        let mut missing = cfg;
        missing.generator.kind = "stylegan".into();
        assert!(matches!(build_pair(&missing), Err(Error::Config(_))));
    }
}
