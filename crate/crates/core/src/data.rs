//! Dataset archive, speaker splits, training windows, the synthetic dataset
//! generator, and real-data ingestion.
//!
//! Archive layout per clip: `clips/<clip_id>/frames/%06d.png`, `audio.wav`,
//! `landmarks.txt`, `latents.bin`, with a JSON manifest at the root. Clip
//! writes go to a temp directory and are renamed into place. Synthetic clips
//! also carry `gt_latents.bin` (the exact generating trajectory plus the
//! driving signal) as an oracle for end-to-end tests; `latents.bin` always
//! holds the encoder's inversion of the frames as they read back from disk.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::archive::TensorArchive;
use crate::audio::{segment_audio, AudioSegment, Waveform};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::latent::LatentCode;
use crate::metrics::{read_landmarks, write_landmarks, MouthLandmarks};
use crate::models::{Frame, ImageEncoder, ImageGenerator};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub speaker_id: String,
    pub n_frames: usize,
    pub fps: u32,
    pub has_landmarks: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub fps: u32,
    pub sample_rate: u32,
    pub clips: Vec<ClipRecord>,
}

/// An on-disk dataset archive.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest_path = root.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", manifest_path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("manifest parse error: {e}")))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn clip_dir(&self, clip_id: &str) -> PathBuf {
        self.root.join("clips").join(clip_id)
    }

    pub fn record(&self, clip_id: &str) -> Result<&ClipRecord> {
        self.manifest
            .clips
            .iter()
            .find(|c| c.clip_id == clip_id)
            .ok_or_else(|| Error::Data(format!("no clip {clip_id:?} in manifest")))
    }

    pub fn load_frames(&self, record: &ClipRecord) -> Result<Vec<Frame>> {
        let dir = self.clip_dir(&record.clip_id).join("frames");
        (0..record.n_frames)
            .map(|i| Frame::load_png(&dir.join(format!("{i:06}.png"))))
            .collect()
    }

    pub fn load_audio(&self, record: &ClipRecord) -> Result<Waveform> {
        Waveform::read_wav(&self.clip_dir(&record.clip_id).join("audio.wav"))
    }

    pub fn load_landmarks(&self, record: &ClipRecord) -> Result<Vec<MouthLandmarks>> {
        read_landmarks(&self.clip_dir(&record.clip_id).join("landmarks.txt"))
    }

    pub fn load_latents(&self, record: &ClipRecord) -> Result<Vec<LatentCode>> {
        read_latent_track(
            &self.clip_dir(&record.clip_id).join("latents.bin"),
            "latents",
        )
    }

    /// Exact generating trajectory (synthetic clips only).
    pub fn load_gt_trajectory(&self, record: &ClipRecord) -> Result<Vec<LatentCode>> {
        read_latent_track(
            &self.clip_dir(&record.clip_id).join("gt_latents.bin"),
            "gt_latents",
        )
    }

    /// Driving signal of a synthetic clip.
    pub fn load_driver(&self, record: &ClipRecord) -> Result<Vec<f64>> {
        let arc = TensorArchive::read(&self.clip_dir(&record.clip_id).join("gt_latents.bin"))?;
        Ok(arc.require("driver")?.iter().copied().collect())
    }

    /// Exact identity latent of a synthetic clip's speaker.
    pub fn load_gt_identity(&self, record: &ClipRecord) -> Result<LatentCode> {
        let arc = TensorArchive::read(&self.clip_dir(&record.clip_id).join("gt_latents.bin"))?;
        let t = arc.require("identity")?;
        let shape = t.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Data("identity tensor must be (L, C)".into()));
        }
        Ok(LatentCode::new(
            Array2::from_shape_vec((shape[0], shape[1]), t.iter().copied().collect())
                .expect("shape checked"),
        ))
    }
}

fn read_latent_track(path: &Path, name: &str) -> Result<Vec<LatentCode>> {
    let arc = TensorArchive::read(path)?;
    let t = arc.require(name)?;
    let shape = t.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Data(format!("{name} tensor must be (T, L, C)")));
    }
    let (frames, l, c) = (shape[0], shape[1], shape[2]);
    let flat: Vec<f64> = t.iter().copied().collect();
    Ok((0..frames)
        .map(|i| {
            let start = i * l * c;
            LatentCode::new(
                Array2::from_shape_vec((l, c), flat[start..start + l * c].to_vec())
                    .expect("shape checked"),
            )
        })
        .collect())
}

fn write_latent_track(
    path: &Path,
    name: &str,
    codes: &[LatentCode],
    ground_truth: Option<&SynthGroundTruth>,
) -> Result<()> {
    let (l, c) = codes[0].shape();
    let mut data = Vec::with_capacity(codes.len() * l * c);
    for code in codes {
        data.extend(code.data.iter().copied());
    }
    let mut arc = TensorArchive::new();
    arc.insert(
        name,
        ndarray::ArrayD::from_shape_vec(vec![codes.len(), l, c], data).expect("sized"),
    );
    if let Some(gt) = ground_truth {
        arc.insert(
            "driver",
            ndarray::ArrayD::from_shape_vec(vec![gt.driver.len()], gt.driver.clone())
                .expect("sized"),
        );
        arc.insert("identity", gt.identity.data.clone().into_dyn());
    }
    arc.write(path)
}

/// Oracle data a synthetic clip carries alongside its exact trajectory.
#[derive(Debug, Clone)]
pub struct SynthGroundTruth {
    pub driver: Vec<f64>,
    pub identity: LatentCode,
}

/// Speaker-disjoint split: `n_holdout` speakers go to the test side.
pub fn split_speakers(
    records: &[ClipRecord],
    n_holdout: usize,
    seed: u64,
) -> Result<(Vec<ClipRecord>, Vec<ClipRecord>)> {
    let speakers: BTreeSet<&str> = records.iter().map(|r| r.speaker_id.as_str()).collect();
    if speakers.len() < n_holdout + 1 {
        return Err(Error::Data(format!(
            "need at least {} distinct speakers to hold out {n_holdout}, have {}",
            n_holdout + 1,
            speakers.len()
        )));
    }
    let mut ordered: Vec<&str> = speakers.into_iter().collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    ordered.shuffle(&mut rng);
    let holdout: BTreeSet<&str> = ordered.into_iter().take(n_holdout).collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for r in records {
        if holdout.contains(r.speaker_id.as_str()) {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((train, test))
}

/// A clip loaded for training: per-frame segments and cached target latents.
#[derive(Debug, Clone)]
pub struct LoadedClip {
    pub record: ClipRecord,
    pub segments: Vec<AudioSegment>,
    pub latents: Vec<LatentCode>,
}

/// Load audio segments and cached latents for each record.
pub fn load_for_training(
    dataset: &Dataset,
    records: &[ClipRecord],
    cfg: &Config,
) -> Result<Vec<LoadedClip>> {
    records
        .iter()
        .map(|record| {
            let audio = dataset.load_audio(record)?;
            let segments = segment_audio(&audio, record.n_frames, &cfg.audio)?.segments;
            let latents = dataset.load_latents(record)?;
            if latents.len() != record.n_frames {
                return Err(Error::Data(format!(
                    "clip {}: {} cached latents for {} frames",
                    record.clip_id,
                    latents.len(),
                    record.n_frames
                )));
            }
            Ok(LoadedClip {
                record: record.clone(),
                segments,
                latents,
            })
        })
        .collect()
}

/// A window of T consecutive frames within one clip; the identity frame is a
/// seeded random choice within the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingWindow {
    pub clip: usize,
    pub start: usize,
    pub len: usize,
    pub identity_offset: usize,
}

impl TrainingWindow {
    pub fn identity_frame(&self) -> usize {
        self.start + self.identity_offset
    }
}

/// Sliding windows with stride 1; windows never cross clip boundaries.
pub fn build_windows(
    n_frames: usize,
    clip_index: usize,
    t: usize,
    rng: &mut ChaCha20Rng,
) -> Vec<TrainingWindow> {
    if n_frames < t {
        return Vec::new();
    }
    (0..=n_frames - t)
        .map(|start| TrainingWindow {
            clip: clip_index,
            start,
            len: t,
            identity_offset: rng.gen_range(0..t),
        })
        .collect()
}

/// What the synthetic generator wrote, for oracle-style assertions.
#[derive(Debug, Clone, Serialize)]
pub struct SynthReport {
    pub n_speakers: usize,
    pub clips_per_speaker: usize,
    pub frames_per_clip: usize,
    pub seed: u64,
}

/// Frequency of the synthetic tone as a function of the driving signal.
fn driver_to_freq(s: f64) -> f64 {
    200.0 * 7f64.powf(s)
}

/// Displacement scales along the two driven directions.
const DRIVE_PRIMARY: f64 = 1.2;
const DRIVE_SECONDARY: f64 = 0.8;

/// Generate a synthetic talking-head dataset.
///
/// Audio is a tone whose frequency follows a slow per-clip driving signal;
/// the same signal drives a fixed linear map onto two latent directions (the
/// mouth-open analog) and an analytic mouth-landmark track. Frames render
/// the exact trajectory through the toy generator. Identities are
/// orthogonalized against the driven directions so the audio-conditioned
/// mapping is realizable from (projected identity, audio) inputs.
pub fn make_synthetic_dataset(
    out_root: &Path,
    n_speakers: usize,
    clips_per_speaker: usize,
    frames_per_clip: usize,
    seed: u64,
    cfg: &Config,
) -> Result<SynthReport> {
    if n_speakers == 0 || clips_per_speaker == 0 || frames_per_clip == 0 {
        return Err(Error::Input("synthetic dataset sizes must be positive".into()));
    }
    if cfg.generator.kind != "toy" {
        return Err(Error::Config(
            "synthetic datasets require the toy generator".into(),
        ));
    }
    let (generator, encoder) = crate::models::build_toy_pair(&cfg.generator);
    let (l, c) = generator.latent_shape();
    let d = l * c;
    let fps = cfg.audio.fps;
    let sr = cfg.audio.sample_rate;
    let spf = cfg.audio.samples_per_frame();

    std::fs::create_dir_all(out_root.join("clips"))?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    // Two orthonormal driven directions, shared by all speakers.
    let mut u1 = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0f64));
    u1 /= u1.dot(&u1).sqrt();
    let mut u2 = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0f64));
    let proj = u1.dot(&u2);
    u2 = &u2 - &(&u1 * proj);
    u2 /= u2.dot(&u2).sqrt();

    // Identities live on a circle in a fixed 2-plane orthogonal to the
    // driven directions: speakers share one identity subspace (as real faces
    // share a manifold), so a held-out identity interpolates rather than
    // extrapolates.
    let mut v1 = Array1::from_shape_fn(d, |_| gaussian(&mut rng));
    for u in [&u1, &u2] {
        let p = v1.dot(u);
        v1 = &v1 - &(u * p);
    }
    v1 /= v1.dot(&v1).sqrt();
    let mut v2 = Array1::from_shape_fn(d, |_| gaussian(&mut rng));
    for u in [&u1, &u2, &v1] {
        let p = v2.dot(u);
        v2 = &v2 - &(u * p);
    }
    v2 /= v2.dot(&v2).sqrt();
    let identity_radius = 1.0;

    let mut clips = Vec::new();
    for speaker in 0..n_speakers {
        let speaker_id = format!("spk{speaker:03}");
        let theta = std::f64::consts::TAU * speaker as f64 / n_speakers as f64
            + rng.gen_range(-0.2..0.2);
        let w_i = &(&v1 * (identity_radius * theta.cos()))
            + &(&v2 * (identity_radius * theta.sin()));
        let identity = LatentCode::from_flat(&w_i, l, c)?;

        for clip in 0..clips_per_speaker {
            let clip_id = format!("{speaker_id}_c{clip:02}");
            // Slow driving signal: sum of two low-frequency sines.
            let f1 = rng.gen_range(0.3..0.9);
            let f2 = rng.gen_range(0.1..0.4);
            let p1 = rng.gen_range(0.0..std::f64::consts::TAU);
            let p2 = rng.gen_range(0.0..std::f64::consts::TAU);
            let driver: Vec<f64> = (0..frames_per_clip)
                .map(|t| {
                    let ts = (t as f64 + 0.5) / fps as f64;
                    0.5 + 0.3 * (std::f64::consts::TAU * f1 * ts + p1).sin()
                        + 0.15 * (std::f64::consts::TAU * f2 * ts + p2).sin()
                })
                .collect();

            // Phase-continuous tone whose frequency tracks the driver.
            let n_samples = frames_per_clip * spf;
            let mut samples = Vec::with_capacity(n_samples);
            let mut phase = 0.0f64;
            for i in 0..n_samples {
                let tf = i as f64 / spf as f64 - 0.5;
                let s = interp_driver(&driver, tf);
                phase += std::f64::consts::TAU * driver_to_freq(s) / sr as f64;
                samples.push(0.4 * phase.sin());
            }
            let audio = Waveform::new(samples, sr);

            // Ground-truth trajectory and rendered frames.
            let mut gt = Vec::with_capacity(frames_per_clip);
            let mut frames = Vec::with_capacity(frames_per_clip);
            let mut cached = Vec::with_capacity(frames_per_clip);
            for &s in &driver {
                let a = DRIVE_PRIMARY * (s - 0.5);
                let b = DRIVE_SECONDARY * (s - 0.5) * (s - 0.5);
                let flat = &w_i + &(&u1 * a) + &(&u2 * b);
                let w_t = LatentCode::from_flat(&flat, l, c)?;
                let frame = generator.synthesize(&w_t)?;
                // Cache the inversion of the frame as it will read back.
                let readable = frame.quantized();
                cached.push(encoder.invert(&readable)?);
                gt.push(w_t);
                frames.push(frame);
            }

            // Analytic mouth landmarks driven by the same signal.
            let size = cfg.generator.image_size as f64;
            let landmarks: Vec<MouthLandmarks> = driver
                .iter()
                .map(|&s| {
                    let m = cfg.metrics.mouth_points;
                    let cx = size / 2.0;
                    let cy = size * 0.7;
                    let rx = size * 0.25;
                    let ry = size * (0.03 + 0.12 * s);
                    let pts = Array2::from_shape_fn((m, 2), |(p, coord)| {
                        let theta = std::f64::consts::TAU * p as f64 / m as f64;
                        if coord == 0 {
                            cx + rx * theta.cos()
                        } else {
                            cy + ry * theta.sin()
                        }
                    });
                    MouthLandmarks::new(pts).expect("finite")
                })
                .collect();

            let record = ClipRecord {
                clip_id: clip_id.clone(),
                speaker_id: speaker_id.clone(),
                n_frames: frames_per_clip,
                fps,
                has_landmarks: true,
            };
            let oracle = SynthGroundTruth {
                driver: driver.clone(),
                identity: identity.clone(),
            };
            write_clip(
                out_root,
                &record,
                &frames,
                &audio,
                Some(&landmarks),
                &cached,
                Some((&gt, &oracle)),
            )?;
            clips.push(record);
        }
    }

    let manifest = Manifest {
        fps,
        sample_rate: sr,
        clips,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(out_root.join("manifest.json"), text)?;
    Ok(SynthReport {
        n_speakers,
        clips_per_speaker,
        frames_per_clip,
        seed,
    })
}

fn gaussian(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Piecewise-linear interpolation of the per-frame driver at fractional
/// frame positions.
fn interp_driver(driver: &[f64], t: f64) -> f64 {
    if driver.is_empty() {
        return 0.5;
    }
    let last = driver.len() - 1;
    let t = t.clamp(0.0, last as f64);
    let lo = t.floor() as usize;
    let hi = (lo + 1).min(last);
    let frac = t - lo as f64;
    driver[lo] * (1.0 - frac) + driver[hi] * frac
}

/// Write one clip into the archive layout, temp-then-rename.
#[allow(clippy::too_many_arguments)]
pub fn write_clip(
    root: &Path,
    record: &ClipRecord,
    frames: &[Frame],
    audio: &Waveform,
    landmarks: Option<&[MouthLandmarks]>,
    cached_latents: &[LatentCode],
    ground_truth: Option<(&[LatentCode], &SynthGroundTruth)>,
) -> Result<()> {
    let clips_dir = root.join("clips");
    std::fs::create_dir_all(&clips_dir)?;
    let tmp = clips_dir.join(format!(".tmp-{}", record.clip_id));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(tmp.join("frames"))?;

    for (i, frame) in frames.iter().enumerate() {
        frame.save_png(&tmp.join("frames").join(format!("{i:06}.png")))?;
    }
    audio.write_wav(&tmp.join("audio.wav"))?;
    if let Some(lm) = landmarks {
        write_landmarks(&tmp.join("landmarks.txt"), lm)?;
    }
    write_latent_track(&tmp.join("latents.bin"), "latents", cached_latents, None)?;
    if let Some((gt, extra)) = ground_truth {
        write_latent_track(&tmp.join("gt_latents.bin"), "gt_latents", gt, Some(extra))?;
    }

    let final_dir = clips_dir.join(&record.clip_id);
    if final_dir.exists() {
        std::fs::remove_dir_all(&final_dir)?;
    }
    std::fs::rename(&tmp, &final_dir)?;
    Ok(())
}

/// Per-clip description required in an ingestion source tree.
#[derive(Debug, Clone, Deserialize)]
pub struct ClipMeta {
    pub speaker: String,
    pub fps: f64,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct IngestReport {
    pub ingested: Vec<String>,
    pub skipped: Vec<(String, String)>,
}

/// Ingest a tree of already-aligned clips into the archive layout.
///
/// Source layout: `<root>/<clip_id>/` containing `meta.toml` (speaker, fps),
/// a `frames/` directory of images, `audio.wav`, and optionally
/// `landmarks.txt`. Video is resampled to the configured fps by
/// nearest-frame selection; audio is linearly resampled. Clips that cannot
/// be read are skipped and reported.
pub fn ingest_real_dataset(
    src_root: &Path,
    out_root: &Path,
    cfg: &Config,
    encoder: &dyn ImageEncoder,
) -> Result<(Manifest, IngestReport)> {
    let mut report = IngestReport::default();
    let mut clips = Vec::new();

    let mut entries: Vec<PathBuf> = std::fs::read_dir(src_root)
        .map_err(|e| Error::Data(format!("cannot list {}: {e}", src_root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();

    for clip_dir in entries {
        let clip_id = clip_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        match ingest_one(&clip_dir, out_root, &clip_id, cfg, encoder) {
            Ok(record) => {
                report.ingested.push(clip_id);
                clips.push(record);
            }
            Err(err) => report.skipped.push((clip_id, err.to_string())),
        }
    }

    let manifest = Manifest {
        fps: cfg.audio.fps,
        sample_rate: cfg.audio.sample_rate,
        clips,
    };
    std::fs::create_dir_all(out_root)?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(out_root.join("manifest.json"), text)?;
    Ok((manifest, report))
}

fn ingest_one(
    clip_dir: &Path,
    out_root: &Path,
    clip_id: &str,
    cfg: &Config,
    encoder: &dyn ImageEncoder,
) -> Result<ClipRecord> {
    let meta_path = clip_dir.join("meta.toml");
    let meta_text = std::fs::read_to_string(&meta_path)
        .map_err(|_| Error::Data("missing meta.toml (speaker, fps)".into()))?;
    let meta: ClipMeta =
        toml::from_str(&meta_text).map_err(|e| Error::Data(format!("meta.toml: {e}")))?;
    if !(meta.fps.is_finite() && meta.fps > 0.0) {
        return Err(Error::Data("fps metadata invalid".into()));
    }

    let frames_dir = clip_dir.join("frames");
    let mut frame_paths: Vec<PathBuf> = std::fs::read_dir(&frames_dir)
        .map_err(|_| Error::Data("missing frames directory".into()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    frame_paths.sort();
    if frame_paths.is_empty() {
        return Err(Error::Data("no frames found".into()));
    }

    let audio_path = clip_dir.join("audio.wav");
    if !audio_path.exists() {
        return Err(Error::Data("missing audio.wav".into()));
    }
    let audio = Waveform::read_wav(&audio_path)?.resample(cfg.audio.sample_rate);

    // Resample video to the target fps by nearest-frame selection.
    let src_n = frame_paths.len();
    let target_fps = cfg.audio.fps as f64;
    let n_out = ((src_n as f64) * target_fps / meta.fps).round().max(1.0) as usize;
    let size = cfg.generator.image_size;
    let mut frames = Vec::with_capacity(n_out);
    for j in 0..n_out {
        let src = ((j as f64) * meta.fps / target_fps).round() as usize;
        let frame = Frame::load_png(&frame_paths[src.min(src_n - 1)])?;
        if frame.shape() != (size, size) {
            return Err(Error::Data(format!(
                "frame size {:?} does not match configured {size}x{size} (inputs must be \
                 pre-aligned crops)",
                frame.shape()
            )));
        }
        frames.push(frame);
    }

    // Audio/video agreement within one frame period.
    let spf = cfg.audio.samples_per_frame() as f64;
    let audio_frames = audio.samples.len() as f64 / spf;
    if (audio_frames - n_out as f64).abs() > 1.0 {
        return Err(Error::Alignment {
            audio_frames,
            video_frames: n_out,
        });
    }

    // Latent targets are cached from the frames exactly as they will read
    // back after PNG quantization.
    let cached: Vec<LatentCode> = frames
        .iter()
        .map(|f| encoder.invert(&f.quantized()))
        .collect::<Result<_>>()?;

    let landmarks = {
        let lm_path = clip_dir.join("landmarks.txt");
        if lm_path.exists() {
            Some(read_landmarks(&lm_path)?)
        } else {
            None
        }
    };

    let record = ClipRecord {
        clip_id: clip_id.to_string(),
        speaker_id: meta.speaker,
        n_frames: n_out,
        fps: cfg.audio.fps,
        has_landmarks: landmarks.is_some(),
    };
    write_clip(
        out_root,
        &record,
        &frames,
        &audio,
        landmarks.as_deref(),
        &cached,
        None,
    )?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_config() -> Config {
        let mut cfg = Config::default();
        cfg.generator.layers = 2;
        cfg.generator.channels = 8;
        cfg.generator.image_size = 16;
        cfg
    }

    fn records_for(speakers: usize, clips_each: usize) -> Vec<ClipRecord> {
        let mut out = Vec::new();
        for s in 0..speakers {
            for c in 0..clips_each {
                out.push(ClipRecord {
                    clip_id: format!("s{s}c{c}"),
                    speaker_id: format!("spk{s}"),
                    n_frames: 25,
                    fps: 25,
                    has_landmarks: false,
                });
            }
        }
        out
    }

    #[test]
    fn split_is_speaker_disjoint_and_sized() {
        let records = records_for(33, 2);
        let (train, test) = split_speakers(&records, 10, 7).unwrap();
        let train_speakers: BTreeSet<_> = train.iter().map(|r| r.speaker_id.clone()).collect();
        let test_speakers: BTreeSet<_> = test.iter().map(|r| r.speaker_id.clone()).collect();
        assert_eq!(train_speakers.len(), 23);
        assert_eq!(test_speakers.len(), 10);
        assert!(train_speakers.is_disjoint(&test_speakers));
    }

    #[test]
    fn split_zero_holdout_and_determinism() {
        let records = records_for(5, 1);
        let (train, test) = split_speakers(&records, 0, 1).unwrap();
        assert_eq!(train.len(), 5);
        assert!(test.is_empty());

        let (a_train, a_test) = split_speakers(&records, 2, 42).unwrap();
        let (b_train, b_test) = split_speakers(&records, 2, 42).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);

        assert!(split_speakers(&records, 5, 1).is_err());
    }

    #[test]
    fn windows_have_stride_one_and_stay_in_bounds() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let windows = build_windows(25, 0, 8, &mut rng);
        assert_eq!(windows.len(), 18);
        for w in &windows {
            assert!(w.start + w.len <= 25);
            assert!(w.identity_offset < w.len);
        }
        // Too-short clips yield no windows rather than crossing boundaries.
        assert!(build_windows(5, 0, 8, &mut rng).is_empty());
    }

    #[test]
    fn synthetic_dataset_round_trips_through_the_archive() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_config();
        make_synthetic_dataset(dir.path(), 2, 2, 30, 11, &cfg).unwrap();

        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest.clips.len(), 4);

        let record = ds.record("spk000_c00").unwrap().clone();
        let frames = ds.load_frames(&record).unwrap();
        let audio = ds.load_audio(&record).unwrap();
        let latents = ds.load_latents(&record).unwrap();
        let gt = ds.load_gt_trajectory(&record).unwrap();
        let driver = ds.load_driver(&record).unwrap();
        let landmarks = ds.load_landmarks(&record).unwrap();

        assert_eq!(frames.len(), 30);
        assert_eq!(latents.len(), 30);
        assert_eq!(gt.len(), 30);
        assert_eq!(driver.len(), 30);
        assert_eq!(landmarks.len(), 30);
        assert_eq!(audio.samples.len(), 30 * 640);

        // One-to-one correspondence segments <-> frames.
        let segs = segment_audio(&audio, record.n_frames, &cfg.audio).unwrap();
        assert_eq!(segs.len(), frames.len());
    }

    // Cached latents must equal fresh inversions of the frames as loaded
    // from disk, bit-exactly.
    #[test]
    fn cached_latents_equal_fresh_inversions_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_config();
        make_synthetic_dataset(dir.path(), 1, 1, 10, 5, &cfg).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let record = ds.manifest.clips[0].clone();
        let (_, encoder) = crate::models::build_toy_pair(&cfg.generator);

        let cached = ds.load_latents(&record).unwrap();
        let frames = ds.load_frames(&record).unwrap();
        for (frame, cache) in frames.iter().zip(cached.iter()) {
            let fresh = encoder.invert(frame).unwrap();
            assert_eq!(&fresh, cache);
        }
    }

    // Toy round trip: inverted latents track the exact generating
    // trajectory up to 16-bit quantization noise (below 1e-5 per-dimension
    // RMS), and distinct seeds give distinct identities.
    #[test]
    fn inverted_latents_match_ground_truth_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_config();
        make_synthetic_dataset(dir.path(), 1, 1, 12, 9, &cfg).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let record = ds.manifest.clips[0].clone();
        let cached = ds.load_latents(&record).unwrap();
        let gt = ds.load_gt_trajectory(&record).unwrap();
        let d = (cfg.generator.layers * cfg.generator.channels) as f64;
        for (a, b) in cached.iter().zip(gt.iter()) {
            let rms = ((a - b).norm().powi(2) / d).sqrt();
            assert!(rms < 1e-5, "per-dim RMS {rms}");
        }

        let dir2 = tempfile::tempdir().unwrap();
        make_synthetic_dataset(dir2.path(), 1, 1, 12, 10, &cfg).unwrap();
        let ds2 = Dataset::open(dir2.path()).unwrap();
        let gt2 = ds2
            .load_gt_trajectory(&ds2.manifest.clips[0].clone())
            .unwrap();
        assert!((&gt[0] - &gt2[0]).norm() > 0.1, "identities should differ across seeds");
    }

    #[test]
    fn self_lmd_of_synthetic_landmarks_is_zero() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_config();
        make_synthetic_dataset(dir.path(), 1, 1, 8, 2, &cfg).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let lm = ds.load_landmarks(&ds.manifest.clips[0].clone()).unwrap();
        assert_eq!(crate::metrics::lmd(&lm, &lm).unwrap(), 0.0);
    }

    #[test]
    fn ingestion_resamples_and_reports_skips() {
        let cfg = desk_config();
        let (generator, encoder) = crate::models::build_toy_pair(&cfg.generator);
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();

        // Good clip at 50 fps: 20 source frames -> 10 at 25 fps.
        let good = src.path().join("clip_a");
        std::fs::create_dir_all(good.join("frames")).unwrap();
        std::fs::write(good.join("meta.toml"), "speaker = \"s1\"\nfps = 50.0\n").unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for i in 0..20 {
            let w = LatentCode::new(Array2::from_shape_fn((2, 8), |_| rng.gen_range(-0.5..0.5)));
            generator
                .synthesize(&w)
                .unwrap()
                .save_png(&good.join("frames").join(format!("{i:06}.png")))
                .unwrap();
        }
        // 10 frames at 25 fps = 0.4 s of 16 kHz audio.
        let samples: Vec<f64> = (0..6400)
            .map(|i| 0.3 * (std::f64::consts::TAU * 350.0 * i as f64 / 16000.0).sin())
            .collect();
        Waveform::new(samples, 16000)
            .write_wav(&good.join("audio.wav"))
            .unwrap();

        // Bad clip: no meta.toml.
        let bad = src.path().join("clip_b");
        std::fs::create_dir_all(bad.join("frames")).unwrap();

        let (manifest, report) =
            ingest_real_dataset(src.path(), out.path(), &cfg, &encoder).unwrap();
        assert_eq!(report.ingested, vec!["clip_a".to_string()]);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.skipped[0].0, "clip_b");
        assert_eq!(manifest.clips.len(), 1);
        assert_eq!(manifest.clips[0].n_frames, 10);

        // The ingested archive is loadable and self-consistent.
        let ds = Dataset::open(out.path()).unwrap();
        let rec = ds.manifest.clips[0].clone();
        let frames = ds.load_frames(&rec).unwrap();
        let latents = ds.load_latents(&rec).unwrap();
        assert_eq!(frames.len(), 10);
        for (f, w) in frames.iter().zip(latents.iter()) {
            assert_eq!(&encoder.invert(f).unwrap(), w);
        }
    }
}
