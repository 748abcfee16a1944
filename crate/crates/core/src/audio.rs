//! Audio front-end: waveforms to per-frame MFCC segments.
//!
//! Every output video frame gets one 0.2 s MFCC window centered on the
//! frame's period, so segments and frames correspond one-to-one. The MFCC
//! chain is the standard one: pre-emphasis, Hamming-windowed FFT power
//! spectrum, mel filterbank, log, DCT-II.

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use std::path::Path;

use crate::config::AudioConfig;
use crate::error::{Error, Result};

/// Floor applied before the log so silence stays finite.
const LOG_FLOOR: f64 = 1e-10;

/// A mono speech waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Read a PCM WAV file (16-bit int or 32-bit float; stereo is averaged).
    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
        let spec = reader.spec();
        let channels = spec.channels as usize;
        if channels == 0 {
            return Err(Error::Data("wav has zero channels".into()));
        }
        let raw: Vec<f64> = match spec.sample_format {
            hound::SampleFormat::Int => {
                let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f64 / scale))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Data(format!("wav decode: {e}")))?
            }
            hound::SampleFormat::Float => reader
                .samples::<f32>()
                .map(|s| s.map(|v| v as f64))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Data(format!("wav decode: {e}")))?,
        };
        let mut samples = Vec::with_capacity(raw.len() / channels);
        for frame in raw.chunks_exact(channels) {
            let avg = frame.iter().sum::<f64>() / channels as f64;
            samples.push(avg.clamp(-1.0, 1.0));
        }
        Ok(Self {
            samples,
            sample_rate: spec.sample_rate,
        })
    }

    /// Write as 16-bit PCM mono.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)
            .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer
                .write_sample(v)
                .map_err(|e| Error::Data(format!("wav write: {e}")))?;
        }
        writer
            .finalize()
            .map_err(|e| Error::Data(format!("wav finalize: {e}")))?;
        Ok(())
    }

    /// Linear resampling to a target rate (used at ingestion).
    pub fn resample(&self, target_rate: u32) -> Self {
        if target_rate == self.sample_rate || self.samples.is_empty() {
            return Self {
                samples: self.samples.clone(),
                sample_rate: target_rate,
            };
        }
        let ratio = self.sample_rate as f64 / target_rate as f64;
        let out_len = (self.samples.len() as f64 / ratio).round() as usize;
        let n = self.samples.len();
        let samples = (0..out_len)
            .map(|i| {
                let pos = i as f64 * ratio;
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                let frac = pos - lo as f64;
                self.samples[lo.min(n - 1)] * (1.0 - frac) + self.samples[hi] * frac
            })
            .collect();
        Self {
            samples,
            sample_rate: target_rate,
        }
    }
}

/// One MFCC window aligned to one output frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSegment {
    pub mfcc: Array2<f64>,
    pub frame_index: usize,
}

/// Ordered per-frame segments; index t corresponds to output frame t.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSequence {
    pub segments: Vec<AudioSegment>,
    pub fps: u32,
}

impl SegmentSequence {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Number of analysis steps produced by framing a signal of `len` samples.
pub fn n_steps(len: usize, window: usize, hop: usize) -> usize {
    if len < window {
        0
    } else {
        1 + (len - window) / hop
    }
}

/// Standard MFCC chain. Returns an (n_coeffs, n_steps) matrix whose row 0 is
/// the c0 (log-energy) coefficient; columns are time steps.
pub fn extract_mfcc(w: &Waveform, cfg: &AudioConfig) -> Result<Array2<f64>> {
    if w.samples.len() < cfg.window {
        return Err(Error::Input(format!(
            "waveform of {} samples is shorter than one {}-sample analysis window",
            w.samples.len(),
            cfg.window
        )));
    }
    let steps = n_steps(w.samples.len(), cfg.window, cfg.hop);

    // Pre-emphasis.
    let mut emphasized = Vec::with_capacity(w.samples.len());
    emphasized.push(w.samples[0]);
    for i in 1..w.samples.len() {
        emphasized.push(w.samples[i] - cfg.pre_emphasis * w.samples[i - 1]);
    }

    let hamming: Vec<f64> = (0..cfg.window)
        .map(|n| {
            0.54 - 0.46
                * (2.0 * std::f64::consts::PI * n as f64 / (cfg.window as f64 - 1.0)).cos()
        })
        .collect();
    let filterbank = mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate);
    let n_bins = cfg.n_fft / 2 + 1;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);

    let mut out = Array2::<f64>::zeros((cfg.n_coeffs, steps));
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    for s in 0..steps {
        let start = s * cfg.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            let v = if i < cfg.window {
                emphasized[start + i] * hamming[i]
            } else {
                0.0
            };
            *slot = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);

        let mut log_mel = vec![0.0; cfg.n_mels];
        for (m, row) in filterbank.iter().enumerate() {
            let mut energy = 0.0;
            for b in 0..n_bins {
                let p = (buf[b].re * buf[b].re + buf[b].im * buf[b].im) / cfg.n_fft as f64;
                energy += p * row[b];
            }
            log_mel[m] = energy.max(LOG_FLOOR).ln();
        }

        // Orthonormal DCT-II over the mel axis.
        let n = cfg.n_mels as f64;
        for i in 0..cfg.n_coeffs {
            let norm = if i == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            let mut acc = 0.0;
            for (j, &lm) in log_mel.iter().enumerate() {
                acc += lm * (std::f64::consts::PI * i as f64 * (j as f64 + 0.5) / n).cos();
            }
            out[[i, s]] = norm * acc;
        }
    }
    Ok(out)
}

/// Triangular mel filterbank over FFT bins 0..=n_fft/2.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let f_max = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(f_max);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();

    let mut bank = vec![vec![0.0; n_bins]; n_mels];
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for (b, slot) in bank[m].iter_mut().enumerate() {
            let f = b as f64 * sample_rate as f64 / n_fft as f64;
            if f > lo && f < center {
                *slot = (f - lo) / (center - lo);
            } else if f >= center && f < hi {
                *slot = (hi - f) / (hi - center);
            }
        }
    }
    bank
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// First sample index of frame t's segment window (can be negative; the
/// gather edge-replicates). The window is centered on the frame period's
/// midpoint (t + 0.5) / fps.
pub fn window_start(t: usize, cfg: &AudioConfig) -> i64 {
    let center = ((t as f64 + 0.5) * cfg.samples_per_frame() as f64).round() as i64;
    center - cfg.segment_samples() as i64 / 2
}

fn gather_window(samples: &[f64], start: i64, len: usize) -> Vec<f64> {
    let last = samples.len() as i64 - 1;
    (0..len as i64)
        .map(|i| {
            let idx = (start + i).clamp(0, last);
            samples[idx as usize]
        })
        .collect()
}

/// Slice audio into exactly `n_frames` MFCC segments, one per output frame.
///
/// Each frame's 0.2 s window is centered on that frame (the frame is the
/// middle of a five-frame span at 25 fps); boundary windows edge-replicate.
/// The audio must cover n_frames / fps seconds within one frame period.
pub fn segment_audio(w: &Waveform, n_frames: usize, cfg: &AudioConfig) -> Result<SegmentSequence> {
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::Input(format!(
            "waveform sample rate {} does not match configured {}",
            w.sample_rate, cfg.sample_rate
        )));
    }
    if n_frames == 0 {
        return Err(Error::Input("requested zero frames".into()));
    }
    let spf = cfg.samples_per_frame() as f64;
    let audio_frames = w.samples.len() as f64 / spf;
    if (audio_frames - n_frames as f64).abs() > 1.0 {
        return Err(Error::Alignment {
            audio_frames,
            video_frames: n_frames,
        });
    }

    let seg_len = cfg.segment_samples();
    let rows = cfg.segment_rows();
    let mut segments = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let start = window_start(t, cfg);
        let window = gather_window(&w.samples, start, seg_len);
        let full = extract_mfcc(&Waveform::new(window, cfg.sample_rate), cfg)?;
        let steps = full.ncols();
        if steps < cfg.segment_steps {
            return Err(Error::Input(format!(
                "segment yields {steps} analysis steps, need {}; check window/hop",
                cfg.segment_steps
            )));
        }
        // Center-crop to the configured step count.
        let col0 = (steps - cfg.segment_steps) / 2;
        let row0 = usize::from(cfg.drop_c0);
        let mut mfcc = Array2::<f64>::zeros((rows, cfg.segment_steps));
        for r in 0..rows {
            for c in 0..cfg.segment_steps {
                mfcc[[r, c]] = full[[row0 + r, col0 + c]];
            }
        }
        if cfg.mfcc_transposed {
            mfcc = mfcc.t().to_owned();
        }
        segments.push(AudioSegment {
            mfcc,
            frame_index: t,
        });
    }
    Ok(SegmentSequence {
        segments,
        fps: cfg.fps,
    })
}
