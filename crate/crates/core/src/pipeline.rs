//! End-to-end inference: identity image -> latent anchor -> audio-driven
//! displacement trajectory -> frames.
//!
//! Displacements come out of the decoder in PCA coordinates and are lifted
//! into the latent space, so every generated code differs from the identity
//! anchor only within the span of the basis. A streaming session carries the
//! recurrent state and is bit-identical to whole-sequence generation.

use std::time::Instant;

use crate::audio::{segment_audio, AudioSegment, Waveform};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::latent::{compose, project, LatentCode, PcaBasis, SubspaceCoords};
use crate::models::{
    load_stage1_checkpoint, Frame, ImageEncoder, ImageGenerator, PerceptualExtractor,
    TrajectoryModel, VideoClip,
};
use crate::nn::LstmState;

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct StageTimings {
    pub segment_seconds: f64,
    pub audio_encode_seconds: f64,
    pub decode_seconds: f64,
    pub synthesis_seconds: f64,
}

#[derive(Debug)]
pub struct GenerateOutput {
    pub clip: VideoClip,
    pub trajectory: Vec<LatentCode>,
    pub timings: StageTimings,
}

pub struct Pipeline {
    cfg: Config,
    model: TrajectoryModel,
    phi: PerceptualExtractor,
    basis: PcaBasis,
    base_generator: Box<dyn ImageGenerator>,
    tuned_generator: Option<Box<dyn ImageGenerator>>,
    encoder: Box<dyn ImageEncoder>,
}

impl Pipeline {
    pub fn new(
        cfg: Config,
        model: TrajectoryModel,
        phi: PerceptualExtractor,
        basis: PcaBasis,
        generator: Box<dyn ImageGenerator>,
        encoder: Box<dyn ImageEncoder>,
    ) -> Result<Self> {
        let latent = generator.latent_shape();
        if (basis.layers, basis.channels) != latent {
            return Err(Error::Config(format!(
                "basis latent shape ({}, {}) does not match generator {:?}",
                basis.layers, basis.channels, latent
            )));
        }
        if model.decoder.k() != basis.k() {
            return Err(Error::Config(format!(
                "checkpoint decoder k = {} does not match basis k = {}",
                model.decoder.k(),
                basis.k()
            )));
        }
        if encoder.latent_shape() != latent {
            return Err(Error::Config(
                "encoder and generator latent shapes disagree".into(),
            ));
        }
        Ok(Self {
            cfg,
            model,
            phi,
            basis,
            base_generator: generator,
            tuned_generator: None,
            encoder,
        })
    }

    /// Assemble from a stage-one checkpoint and a basis file, refusing
    /// fingerprint mismatches unless forced.
    pub fn from_files(
        cfg: &Config,
        checkpoint: &std::path::Path,
        basis_path: &std::path::Path,
        force: bool,
    ) -> Result<Self> {
        let (model, phi, _meta) = load_stage1_checkpoint(checkpoint, cfg, force)?;
        let basis = PcaBasis::load(basis_path)?;
        if !force {
            let stored = PcaBasis::stored_fingerprint(basis_path)?;
            let current = cfg.fingerprint();
            if stored != current {
                return Err(Error::Config(format!(
                    "basis fingerprint {stored} does not match config fingerprint {current}; \
                     pass --force to load anyway"
                )));
            }
        }
        let (generator, encoder) = crate::models::build_pair(cfg)?;
        Self::new(cfg.clone(), model, phi, basis, generator, encoder)
    }

    /// Install a per-subject tuned generator; `generate` will use it while
    /// `generate_stage1_only` keeps the base generator.
    pub fn set_tuned_generator(&mut self, generator: Box<dyn ImageGenerator>) {
        self.tuned_generator = Some(generator);
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn basis(&self) -> &PcaBasis {
        &self.basis
    }

    pub fn perceptual(&self) -> &PerceptualExtractor {
        &self.phi
    }

    pub fn encoder(&self) -> &dyn ImageEncoder {
        self.encoder.as_ref()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.model.parameter_count()
    }

    pub fn generator_parameter_count(&self) -> usize {
        self.active_generator().parameter_count()
    }

    fn active_generator(&self) -> &dyn ImageGenerator {
        self.tuned_generator
            .as_deref()
            .unwrap_or(self.base_generator.as_ref())
    }

    /// Frames per recurrent-state chunk: inference matches the training
    /// window length unless configured otherwise.
    pub fn chunk_frames(&self) -> usize {
        let configured = self.cfg.inference.chunk_frames;
        let chunk = if configured == 0 {
            self.cfg.stage1.seq_len
        } else {
            configured
        };
        chunk.max(1)
    }

    /// Number of output frames for an audio clip: floor(duration * fps).
    pub fn frame_count(&self, audio: &Waveform) -> usize {
        (audio.duration() * self.cfg.audio.fps as f64).floor() as usize
    }

    /// Full inference with the tuned generator when one is installed.
    pub fn generate(&self, identity: &Frame, audio: &Waveform) -> Result<GenerateOutput> {
        self.run(identity, audio, self.active_generator())
    }

    /// Inference with the untuned base generator (the stage-one ablation).
    pub fn generate_stage1_only(&self, identity: &Frame, audio: &Waveform) -> Result<GenerateOutput> {
        self.run(identity, audio, self.base_generator.as_ref())
    }

    /// As `generate`, with per-stage wall-clock timings filled in.
    pub fn generate_timed(&self, identity: &Frame, audio: &Waveform) -> Result<GenerateOutput> {
        self.run(identity, audio, self.active_generator())
    }

    fn run(
        &self,
        identity: &Frame,
        audio: &Waveform,
        generator: &dyn ImageGenerator,
    ) -> Result<GenerateOutput> {
        let n_frames = self.frame_count(audio);
        if n_frames == 0 {
            return Err(Error::Input(format!(
                "audio of {:.3} s is too short for one frame at {} fps",
                audio.duration(),
                self.cfg.audio.fps
            )));
        }
        let mut timings = StageTimings::default();

        let t0 = Instant::now();
        let segments = segment_audio(audio, n_frames, &self.cfg.audio)?;
        timings.segment_seconds = t0.elapsed().as_secs_f64();

        let w_identity = self.encoder.invert(identity)?;
        let h_identity = project(&w_identity, &self.basis)?;

        let t1 = Instant::now();
        let chunk = self.chunk_frames();
        let mut embeddings = Vec::with_capacity(n_frames);
        for slice in segments.segments.chunks(chunk) {
            embeddings.extend(self.model.audio_encoder.embeddings(slice)?);
        }
        timings.audio_encode_seconds = t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        let mut trajectory = Vec::with_capacity(n_frames);
        for emb in &embeddings {
            let h_t = self.model.decoder.decode(&h_identity, &emb.e)?;
            trajectory.push(compose(&w_identity, &h_t, &self.basis)?);
        }
        timings.decode_seconds = t2.elapsed().as_secs_f64();

        let t3 = Instant::now();
        let mut frames = Vec::with_capacity(n_frames);
        for w in &trajectory {
            frames.push(generator.synthesize(w)?);
        }
        timings.synthesis_seconds = t3.elapsed().as_secs_f64();

        Ok(GenerateOutput {
            clip: VideoClip::new(frames, self.cfg.audio.fps),
            trajectory,
            timings,
        })
    }

    /// Frame-by-frame generation with carried recurrent state.
    pub fn streaming(&self, identity: &Frame) -> Result<StreamingSession<'_>> {
        let w_identity = self.encoder.invert(identity)?;
        let h_identity = project(&w_identity, &self.basis)?;
        Ok(StreamingSession {
            pipeline: self,
            state: self.model.audio_encoder.zero_state(),
            w_identity,
            h_identity,
            next_frame: 0,
        })
    }
}

/// Carried-state generation; each step consumes the next audio segment.
pub struct StreamingSession<'a> {
    pipeline: &'a Pipeline,
    state: LstmState,
    w_identity: LatentCode,
    h_identity: SubspaceCoords,
    next_frame: usize,
}

impl StreamingSession<'_> {
    pub fn frames_emitted(&self) -> usize {
        self.next_frame
    }

    pub fn step(&mut self, segment: &AudioSegment) -> Result<(Frame, LatentCode)> {
        let p = self.pipeline;
        // Same chunking rule as batch generation: reset the carried state at
        // chunk boundaries so the two paths stay bit-identical.
        if self.next_frame % p.chunk_frames() == 0 {
            self.state = p.model.audio_encoder.zero_state();
        }
        let e = p.model.audio_encoder.step(segment, &mut self.state)?;
        let h_t = p.model.decoder.decode(&self.h_identity, &e)?;
        let w_bar = compose(&self.w_identity, &h_t, &p.basis)?;
        let frame = p.active_generator().synthesize(&w_bar)?;
        self.next_frame += 1;
        Ok((frame, w_bar))
    }
}

/// Persist a generated trajectory as a sidecar tensor archive.
pub fn write_trajectory(path: &std::path::Path, trajectory: &[LatentCode]) -> Result<()> {
    if trajectory.is_empty() {
        return Err(Error::Input("empty trajectory".into()));
    }
    let (l, c) = trajectory[0].shape();
    let mut data = Vec::with_capacity(trajectory.len() * l * c);
    for w in trajectory {
        data.extend(w.data.iter().copied());
    }
    let mut arc = crate::archive::TensorArchive::new();
    arc.insert(
        "trajectory",
        ndarray::ArrayD::from_shape_vec(vec![trajectory.len(), l, c], data).expect("sized"),
    );
    arc.write(path)
}
