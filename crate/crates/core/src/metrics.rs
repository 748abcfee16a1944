//! Evaluation metrics: PSNR, SSIM, mouth-landmark distance, FID, and the
//! inference throughput benchmark.
//!
//! All metrics are pure functions. FID uses the repo's seeded random-conv
//! feature extractor, so absolute FID values are not comparable to published
//! Inception-based numbers; relative comparisons under one extractor are.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use std::path::Path;
use std::time::Instant;

use crate::audio::Waveform;
use crate::config::MetricsConfig;
use crate::error::{Error, Result};
use crate::models::{Frame, PerceptualExtractor, VideoClip};
use crate::pipeline::Pipeline;

/// BT.601 luma weights.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Peak signal-to-noise ratio in dB; identical frames return +infinity.
pub fn psnr(x: &Frame, y: &Frame, max_val: f64) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::dimension(format!(
            "psnr shapes {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    if max_val <= 0.0 {
        return Err(Error::Input("psnr max_val must be positive".into()));
    }
    let n = x.data.len() as f64;
    let mse = x
        .data
        .iter()
        .zip(y.data.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

fn luma_plane(frame: &Frame) -> Array2<f64> {
    let (h, w) = frame.shape();
    Array2::from_shape_fn((h, w), |(y, x)| {
        LUMA[0] * frame.data[[y, x, 0]]
            + LUMA[1] * frame.data[[y, x, 1]]
            + LUMA[2] * frame.data[[y, x, 2]]
    })
}

/// Mean structural similarity over an 11x11 Gaussian window (sigma 1.5),
/// evaluated on luma, filters applied only where the window fits entirely.
pub fn ssim(x: &Frame, y: &Frame, cfg: &MetricsConfig) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::dimension(format!(
            "ssim shapes {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let (h, w) = x.shape();
    let win = cfg.ssim_window;
    if h < win || w < win {
        return Err(Error::dimension(format!(
            "image {h}x{w} is smaller than the {win}x{win} SSIM window"
        )));
    }
    let r = win / 2;
    let sigma = cfg.ssim_sigma;
    let mut kernel = Array2::<f64>::zeros((win, win));
    let mut total = 0.0;
    for dy in 0..win {
        for dx in 0..win {
            let fy = dy as f64 - r as f64;
            let fx = dx as f64 - r as f64;
            let v = (-(fy * fy + fx * fx) / (2.0 * sigma * sigma)).exp();
            kernel[[dy, dx]] = v;
            total += v;
        }
    }
    kernel /= total;

    let lx = luma_plane(x);
    let ly = luma_plane(y);
    let c1 = (cfg.ssim_k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.ssim_k2 * cfg.dynamic_range).powi(2);

    let mut sum = 0.0;
    let mut count = 0usize;
    for cy in r..h - r {
        for cx in r..w - r {
            let mut ux = 0.0;
            let mut uy = 0.0;
            let mut uxx = 0.0;
            let mut uyy = 0.0;
            let mut uxy = 0.0;
            for dy in 0..win {
                for dx in 0..win {
                    let k = kernel[[dy, dx]];
                    let a = lx[[cy + dy - r, cx + dx - r]];
                    let b = ly[[cy + dy - r, cx + dx - r]];
                    ux += k * a;
                    uy += k * b;
                    uxx += k * a * a;
                    uyy += k * b * b;
                    uxy += k * a * b;
                }
            }
            let vx = uxx - ux * ux;
            let vy = uyy - uy * uy;
            let vxy = uxy - ux * uy;
            let s = ((2.0 * ux * uy + c1) * (2.0 * vxy + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            sum += s;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Mouth landmarks for one frame, pixel coordinates, shape (M, 2).
#[derive(Debug, Clone, PartialEq)]
pub struct MouthLandmarks {
    pub points: Array2<f64>,
}

impl MouthLandmarks {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.ncols() != 2 {
            return Err(Error::dimension("landmarks must be (M, 2)"));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite landmark".into()));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }
}

/// Landmark distance: mean Euclidean distance over frames and points.
pub fn lmd(gt: &[MouthLandmarks], gen: &[MouthLandmarks]) -> Result<f64> {
    if gt.len() != gen.len() {
        return Err(Error::dimension(format!(
            "landmark sequences differ in length: {} vs {}",
            gt.len(),
            gen.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::Input("empty landmark sequences".into()));
    }
    let m = gt[0].len();
    let mut sum = 0.0;
    for (a, b) in gt.iter().zip(gen) {
        if a.len() != m || b.len() != m {
            return Err(Error::dimension("landmark point counts differ"));
        }
        for p in 0..m {
            let dx = a.points[[p, 0]] - b.points[[p, 0]];
            let dy = a.points[[p, 1]] - b.points[[p, 1]];
            sum += (dx * dx + dy * dy).sqrt();
        }
    }
    Ok(sum / (gt.len() * m) as f64)
}

/// Per-clip landmark table: one row per frame, `frame_index x0 y0 x1 y1 ...`.
pub fn read_landmarks(path: &Path) -> Result<Vec<MouthLandmarks>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Data(format!("landmark parse error at line {}", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        if fields.len() < 3 || (fields.len() - 1) % 2 != 0 {
            return Err(Error::Data(format!(
                "landmark row {} has {} fields; expected frame_index plus x,y pairs",
                lineno + 1,
                fields.len()
            )));
        }
        let m = (fields.len() - 1) / 2;
        let pts = Array2::from_shape_fn((m, 2), |(p, c)| fields[1 + 2 * p + c]);
        rows.push(MouthLandmarks::new(pts)?);
    }
    Ok(rows)
}

pub fn write_landmarks(path: &Path, frames: &[MouthLandmarks]) -> Result<()> {
    let mut out = String::new();
    for (i, lm) in frames.iter().enumerate() {
        out.push_str(&i.to_string());
        for p in 0..lm.len() {
            out.push_str(&format!(" {:.6} {:.6}", lm.points[[p, 0]], lm.points[[p, 1]]));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Gaussian fit of a feature distribution: mean and (population) covariance.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mu: Array1<f64>,
    pub sigma: Array2<f64>,
}

impl GaussianStats {
    pub fn new(mu: Array1<f64>, sigma: Array2<f64>) -> Result<Self> {
        let d = mu.len();
        if sigma.dim() != (d, d) {
            return Err(Error::dimension("sigma shape must match mu"));
        }
        for i in 0..d {
            for j in i + 1..d {
                if (sigma[[i, j]] - sigma[[j, i]]).abs() > 1e-8 {
                    return Err(Error::Numerical(format!(
                        "sigma not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let stats = Self { mu, sigma };
        let eigs = stats.sym_eigenvalues();
        if let Some(min) = eigs.iter().cloned().reduce(f64::min) {
            if min < -1e-8 {
                return Err(Error::Numerical(format!(
                    "sigma has negative eigenvalue {min}"
                )));
            }
        }
        Ok(stats)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    fn sym_eigenvalues(&self) -> Vec<f64> {
        let d = self.dim();
        let m = DMatrix::from_fn(d, d, |i, j| self.sigma[[i, j]]);
        m.symmetric_eigen().eigenvalues.iter().cloned().collect()
    }
}

/// Symmetric matrix square root with the spec's clamping rule: eigenvalues
/// in (-tol, 0) are clamped to zero; anything below -tol is an error.
fn sym_sqrt(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    let mut worst = 0.0f64;
    for v in vals.iter_mut() {
        if *v < 0.0 {
            worst = worst.min(*v);
            if *v >= -tol {
                *v = 0.0;
            }
        }
    }
    if worst < -tol {
        return Err(Error::Numerical(format!(
            "matrix is not PSD: max negative eigenvalue {worst}"
        )));
    }
    let d = m.nrows();
    let sqrt_vals = DVector::from_fn(d, |i, _| vals[i].sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussians:
/// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)).
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dimension(format!(
            "feature dims differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let d = a.dim();
    let sa = DMatrix::from_fn(d, d, |i, j| a.sigma[[i, j]]);
    let sb = DMatrix::from_fn(d, d, |i, j| b.sigma[[i, j]]);

    let tol = 1e-6;
    let root_a = sym_sqrt(&sa, tol)?;
    // (Sa Sb)^(1/2) has the trace of (Sa^(1/2) Sb Sa^(1/2))^(1/2), which is
    // symmetric; symmetrize against rounding before decomposing.
    let prod = &root_a * &sb * &root_a;
    let sym = (&prod + prod.transpose()) * 0.5;
    let root = sym_sqrt(&sym, tol)?;

    let mean_term: f64 = a
        .mu
        .iter()
        .zip(b.mu.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let trace = sa.trace() + sb.trace() - 2.0 * root.trace();
    Ok((mean_term + trace).max(0.0))
}

/// Empirical mean and population covariance of pooled extractor features.
/// A single frame yields a rank warning and a 1e-6 I regularizer.
pub fn compute_feature_stats(
    clip: &VideoClip,
    extractor: &PerceptualExtractor,
) -> Result<(GaussianStats, Option<String>)> {
    if clip.is_empty() {
        return Err(Error::Input("cannot fit feature statistics to zero frames".into()));
    }
    let feats: Vec<Array1<f64>> = clip.frames.iter().map(|f| extractor.pooled(f)).collect();
    let n = feats.len();
    let d = feats[0].len();

    let mut mu = Array1::<f64>::zeros(d);
    for f in &feats {
        mu += f;
    }
    mu /= n as f64;

    let mut sigma = Array2::<f64>::zeros((d, d));
    for f in &feats {
        let c = f - &mu;
        for i in 0..d {
            if c[i] == 0.0 {
                continue;
            }
            for j in 0..d {
                sigma[[i, j]] += c[i] * c[j];
            }
        }
    }
    sigma /= n as f64;

    let warning = if n == 1 {
        for i in 0..d {
            sigma[[i, i]] += 1e-6;
        }
        Some("single frame: covariance is rank deficient, regularized by 1e-6 I".into())
    } else {
        None
    };
    Ok((GaussianStats::new(mu, sigma)?, warning))
}

/// Wall-clock throughput of end-to-end generation, with per-stage breakdown.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchReport {
    pub n_frames: usize,
    pub fps: f64,
    pub total_seconds: f64,
    pub segment_seconds: f64,
    pub audio_encode_seconds: f64,
    pub decode_seconds: f64,
    pub synthesis_seconds: f64,
    pub trainable_parameters: usize,
    pub generator_parameters: usize,
    pub image_size: usize,
}

/// Measure end-to-end FPS over `n_frames` of generation on a warm pipeline.
pub fn bench_inference(pipeline: &Pipeline, identity: &Frame, n_frames: usize) -> Result<BenchReport> {
    let audio_cfg = &pipeline.config().audio;
    let sr = audio_cfg.sample_rate;
    let samples = n_frames * audio_cfg.samples_per_frame();
    let sweep: Vec<f64> = (0..samples)
        .map(|i| {
            let t = i as f64 / sr as f64;
            0.4 * (2.0 * std::f64::consts::PI * (300.0 + 200.0 * (0.7 * t).sin()) * t).sin()
        })
        .collect();
    let audio = Waveform::new(sweep, sr);

    // Warm start: one short run primes caches and page tables.
    let warm_frames = 2.min(n_frames);
    let warm_samples = warm_frames * audio_cfg.samples_per_frame();
    let warm = Waveform::new(audio.samples[..warm_samples].to_vec(), sr);
    pipeline.generate(identity, &warm)?;

    let start = Instant::now();
    let timed = pipeline.generate_timed(identity, &audio)?;
    let total = start.elapsed().as_secs_f64();

    Ok(BenchReport {
        n_frames,
        fps: n_frames as f64 / total,
        total_seconds: total,
        segment_seconds: timed.timings.segment_seconds,
        audio_encode_seconds: timed.timings.audio_encode_seconds,
        decode_seconds: timed.timings.decode_seconds,
        synthesis_seconds: timed.timings.synthesis_seconds,
        trainable_parameters: pipeline.trainable_parameter_count(),
        generator_parameters: pipeline.generator_parameter_count(),
        image_size: pipeline.config().generator.image_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    /// 64-bit LCG shared with the Python reference that froze the SSIM
    /// oracle values below.
    struct Lcg(u64);
    impl Lcg {
        fn next_f64(&mut self) -> f64 {
            self.0 = self
                .0
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (self.0 >> 11) as f64 / (1u64 << 53) as f64
        }
    }

    fn lcg_gray_frame(seed: u64, h: usize, w: usize) -> Frame {
        let mut lcg = Lcg(seed);
        let mut plane = Array2::<f64>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                plane[[y, x]] = lcg.next_f64();
            }
        }
        Frame::new(Array3::from_shape_fn((h, w, 3), |(y, x, _)| plane[[y, x]]))
    }

    fn map_frame(f: &Frame, g: impl Fn(f64) -> f64) -> Frame {
        Frame::new(f.data.mapv(g))
    }

    #[test]
    fn psnr_identical_frames_is_infinite() {
        let x = lcg_gray_frame(5, 16, 16);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
    }

    // Closed form: 8-bit range, uniform offset 16 => MSE 256,
    // PSNR = 10 log10(255^2 / 256) = 24.0487...
    #[test]
    fn psnr_matches_offset_closed_form() {
        let x = map_frame(&lcg_gray_frame(6, 12, 12), |v| v * 100.0);
        let y = map_frame(&x, |v| v + 16.0);
        let got = psnr(&x, &y, 255.0).unwrap();
        let expected = 10.0 * (255.0f64 * 255.0 / 256.0).log10();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 24.0487).abs() < 0.01);
    }

    #[test]
    fn psnr_is_symmetric() {
        let x = lcg_gray_frame(7, 10, 14);
        let y = lcg_gray_frame(8, 10, 14);
        assert_eq!(psnr(&x, &y, 1.0).unwrap(), psnr(&y, &x, 1.0).unwrap());
    }

    #[test]
    fn ssim_of_identical_frames_is_one() {
        let x = lcg_gray_frame(9, 24, 24);
        let s = ssim(&x, &x, &MetricsConfig::default()).unwrap();
        assert_eq!(s, 1.0);
    }

    // Frozen oracle values from scikit-image structural_similarity
    // (gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
    // data_range=1.0) on the same LCG-generated 24x32 images.
    #[test]
    fn ssim_matches_reference_implementation() {
        let x = lcg_gray_frame(1, 24, 32);

        let neg = map_frame(&x, |v| 1.0 - v);
        let got_neg = ssim(&x, &neg, &MetricsConfig::default()).unwrap();
        assert!((got_neg - (-0.9709055518980624)).abs() < 1e-9, "{got_neg}");
        assert!(got_neg < 0.1);

        // y = 0.8 x + 0.1 u2, and the same pair shifted by +0.05.
        let u2 = lcg_gray_frame(2, 24, 32);
        let y = Frame::new(&x.data * 0.8 + &(&u2.data * 0.1));
        let got_xy = ssim(&x, &y, &MetricsConfig::default()).unwrap();
        assert!((got_xy - 0.964270552896303).abs() < 1e-9, "{got_xy}");

        let xs = map_frame(&x, |v| v + 0.05);
        let ys = map_frame(&y, |v| v + 0.05);
        let got_shift = ssim(&xs, &ys, &MetricsConfig::default()).unwrap();
        assert!((got_shift - 0.9652053218988752).abs() < 1e-9, "{got_shift}");

        // Shifting both images changes SSIM only marginally (the contrast
        // and structure terms are exactly shift-invariant; the luminance
        // term is only approximately so).
        assert!((got_shift - got_xy).abs() < 5e-3);
    }

    #[test]
    fn ssim_rejects_images_smaller_than_the_window() {
        let x = lcg_gray_frame(3, 8, 8);
        assert!(matches!(
            ssim(&x, &x, &MetricsConfig::default()),
            Err(Error::Dimension(_))
        ));
    }

    fn landmarks_from(points: &[(f64, f64)]) -> MouthLandmarks {
        MouthLandmarks::new(Array2::from_shape_fn((points.len(), 2), |(p, c)| {
            if c == 0 {
                points[p].0
            } else {
                points[p].1
            }
        }))
        .unwrap()
    }

    #[test]
    fn lmd_zero_for_identical_sequences_and_exact_for_offsets() {
        let a = vec![
            landmarks_from(&[(1.0, 2.0), (3.0, 4.0)]),
            landmarks_from(&[(5.0, 6.0), (7.0, 8.0)]),
        ];
        assert_eq!(lmd(&a, &a).unwrap(), 0.0);

        // Every point offset by (3, 4): each distance is exactly 5.
        let b: Vec<MouthLandmarks> = a
            .iter()
            .map(|lm| MouthLandmarks::new(&lm.points + &array![[3.0, 4.0], [3.0, 4.0]]).unwrap())
            .collect();
        assert_eq!(lmd(&a, &b).unwrap(), 5.0);
    }

    #[test]
    fn lmd_is_invariant_to_consistent_frame_permutations() {
        let a = vec![
            landmarks_from(&[(0.0, 0.0)]),
            landmarks_from(&[(2.0, 0.0)]),
            landmarks_from(&[(0.0, 7.0)]),
        ];
        let b = vec![
            landmarks_from(&[(1.0, 0.0)]),
            landmarks_from(&[(2.0, 2.0)]),
            landmarks_from(&[(4.0, 7.0)]),
        ];
        let base = lmd(&a, &b).unwrap();
        let perm = [2usize, 0, 1];
        let ap: Vec<_> = perm.iter().map(|&i| a[i].clone()).collect();
        let bp: Vec<_> = perm.iter().map(|&i| b[i].clone()).collect();
        assert!((lmd(&ap, &bp).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn lmd_translation_respects_triangle_bounds() {
        let mut lcg = Lcg(77);
        let a: Vec<MouthLandmarks> = (0..4)
            .map(|_| {
                MouthLandmarks::new(Array2::from_shape_fn((5, 2), |_| lcg.next_f64() * 10.0))
                    .unwrap()
            })
            .collect();
        let b: Vec<MouthLandmarks> = (0..4)
            .map(|_| {
                MouthLandmarks::new(Array2::from_shape_fn((5, 2), |_| lcg.next_f64() * 10.0))
                    .unwrap()
            })
            .collect();
        let base = lmd(&a, &b).unwrap();
        let v = (3.0, -4.0); // norm 5
        let vnorm = 5.0;
        let shifted: Vec<MouthLandmarks> = b
            .iter()
            .map(|lm| {
                let mut p = lm.points.clone();
                for r in 0..p.nrows() {
                    p[[r, 0]] += v.0;
                    p[[r, 1]] += v.1;
                }
                MouthLandmarks::new(p).unwrap()
            })
            .collect();
        let moved = lmd(&a, &shifted).unwrap();
        assert!(moved <= base + vnorm + 1e-9);
        assert!(moved >= (base - vnorm).abs() - 1e-9);
    }

    #[test]
    fn landmark_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.txt");
        let rows = vec![
            landmarks_from(&[(1.5, 2.25), (3.0, 4.0)]),
            landmarks_from(&[(5.0, 6.5), (7.125, 8.0)]),
        ];
        write_landmarks(&path, &rows).unwrap();
        let back = read_landmarks(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(rows.iter()) {
            for (x, y) in a.points.iter().zip(b.points.iter()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fid_of_identical_stats_is_zero() {
        let mut lcg = Lcg(11);
        let d = 4;
        // Build a PSD sigma = M Mᵀ.
        let m = Array2::from_shape_fn((d, d), |_| lcg.next_f64() - 0.5);
        let sigma = m.dot(&m.t());
        let mu = Array1::from_shape_fn(d, |_| lcg.next_f64());
        let s = GaussianStats::new(mu, sigma).unwrap();
        let v = fid(&s, &s).unwrap();
        assert!(v.abs() < 1e-6, "{v}");
    }

    // Commuting (diagonal) covariances admit closed forms.
    #[test]
    fn fid_matches_diagonal_closed_forms() {
        let eye = Array2::eye(2);
        let a = GaussianStats::new(array![0.0, 0.0], eye.clone()).unwrap();
        let b = GaussianStats::new(array![1.0, 0.0], eye.clone()).unwrap();
        let got = fid(&a, &b).unwrap();
        assert!((got - 1.0).abs() < 1e-4, "{got}");

        // Sigma_a = 4I, Sigma_b = I, equal means:
        // Tr(4I + I - 2*2I) = Tr(I) = 2 in d_f = 2.
        let c = GaussianStats::new(array![0.5, -0.5], &eye * 4.0).unwrap();
        let d = GaussianStats::new(array![0.5, -0.5], eye).unwrap();
        let got = fid(&c, &d).unwrap();
        assert!((got - 2.0).abs() < 1e-4, "{got}");
    }

    #[test]
    fn fid_is_symmetric() {
        let mut lcg = Lcg(13);
        let d = 3;
        let make = |lcg: &mut Lcg| {
            let m = Array2::from_shape_fn((d, d), |_| lcg.next_f64() - 0.5);
            let sigma = m.dot(&m.t());
            let mu = Array1::from_shape_fn(d, |_| lcg.next_f64());
            GaussianStats::new(mu, sigma).unwrap()
        };
        let a = make(&mut lcg);
        let b = make(&mut lcg);
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-6);
    }

    #[test]
    fn non_psd_sigma_is_rejected_with_the_eigenvalue() {
        let bad = GaussianStats::new(array![0.0, 0.0], array![[1.0, 0.0], [0.0, -0.5]]);
        match bad {
            Err(Error::Numerical(msg)) => assert!(msg.contains("-0.5")),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn feature_stats_behave_under_duplication_and_pooling() {
        let phi = PerceptualExtractor::new(&crate::config::PerceptualConfig {
            channels: vec![2, 3],
            seed: 4,
        });
        let mut lcg = Lcg(21);
        let frames: Vec<Frame> = (0..5)
            .map(|_| {
                Frame::new(Array3::from_shape_fn((8, 8, 3), |_| lcg.next_f64() * 1.6 - 0.8))
            })
            .collect();
        let clip = VideoClip::new(frames.clone(), 25);
        let (stats, warn) = compute_feature_stats(&clip, &phi).unwrap();
        assert!(warn.is_none());

        // Duplication leaves population moments unchanged.
        let mut doubled = frames.clone();
        doubled.extend(frames.iter().cloned());
        let (stats2, _) = compute_feature_stats(&VideoClip::new(doubled, 25), &phi).unwrap();
        for (a, b) in stats.mu.iter().zip(stats2.mu.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in stats.sigma.iter().zip(stats2.sigma.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        // Constant frames give zero covariance.
        let constant = VideoClip::new(vec![frames[0].clone(); 3], 25);
        let (cstats, _) = compute_feature_stats(&constant, &phi).unwrap();
        assert!(cstats.sigma.iter().all(|v| v.abs() < 1e-15));

        // Concatenated disjoint sets equal weighted pooled moments.
        let more: Vec<Frame> = (0..3)
            .map(|_| {
                Frame::new(Array3::from_shape_fn((8, 8, 3), |_| lcg.next_f64() * 1.6 - 0.8))
            })
            .collect();
        let (s_b, _) = compute_feature_stats(&VideoClip::new(more.clone(), 25), &phi).unwrap();
        let mut all = frames.clone();
        all.extend(more);
        let (s_all, _) = compute_feature_stats(&VideoClip::new(all, 25), &phi).unwrap();

        let (na, nb) = (5.0, 3.0);
        let n = na + nb;
        let mu_pool = (&stats.mu * na + &s_b.mu * nb) / n;
        for (a, b) in s_all.mu.iter().zip(mu_pool.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let d = stats.mu.len();
        for i in 0..d {
            for j in 0..d {
                let second_a = stats.sigma[[i, j]] + stats.mu[i] * stats.mu[j];
                let second_b = s_b.sigma[[i, j]] + s_b.mu[i] * s_b.mu[j];
                let pooled = (na * second_a + nb * second_b) / n - mu_pool[i] * mu_pool[j];
                assert!((s_all.sigma[[i, j]] - pooled).abs() < 1e-12);
            }
        }

        // Single frame regularizes and warns.
        let single = VideoClip::new(vec![frames[0].clone()], 25);
        let (sstats, warn) = compute_feature_stats(&single, &phi).unwrap();
        assert!(warn.is_some());
        assert!((sstats.sigma[[0, 0]] - 1e-6).abs() < 1e-18);
    }

    // PSNR and SSIM improve monotonically as additive noise shrinks
    // (statistical over 10 noise levels).
    #[test]
    fn psnr_and_ssim_improve_as_noise_decreases() {
        let x = lcg_gray_frame(31, 24, 24);
        let mut lcg = Lcg(32);
        let noise = Array3::from_shape_fn((24, 24, 3), |_| lcg.next_f64() - 0.5);
        let cfg = MetricsConfig::default();
        let mut prev_psnr = f64::NEG_INFINITY;
        let mut prev_ssim = f64::NEG_INFINITY;
        for level in (1..=10).rev() {
            let amp = level as f64 * 0.03;
            let y = Frame::new(&x.data + &(&noise * amp));
            let p = psnr(&x, &y, 1.0).unwrap();
            let s = ssim(&x, &y, &cfg).unwrap();
            assert!(p > prev_psnr, "psnr not monotone at level {level}");
            assert!(s > prev_ssim, "ssim not monotone at level {level}");
            prev_psnr = p;
            prev_ssim = s;
        }
    }
}
