//! Built-in analytically invertible generator/encoder pair.
//!
//! The generator is a fixed full-rank linear map into pixel space followed
//! by tanh: x = tanh(A w + b). Its columns are orthogonal by construction
//! (A = gain * Q with QᵀQ = I), so the paired encoder's pseudo-inverse is
//! exactly Qᵀ / gain and inversion on the image manifold is the identity.
//! Off-manifold images project orthogonally in pre-activation space.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;
use std::sync::atomic::{AtomicU64, Ordering};

use super::frame::Frame;
use super::{ImageEncoder, ImageGenerator};
use crate::config::GeneratorConfig;
use crate::error::{Error, Result};
use crate::latent::LatentCode;
use crate::nn::{Gradients, ParamSet};

/// Margin kept away from +-1 before atanh.
const CLAMP_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ToyGenerator {
    /// (P, D) with P = H*W*3, D = L*C.
    pub a: Array2<f64>,
    /// (P)
    pub b: Array1<f64>,
    layers: usize,
    channels: usize,
    image: usize,
}

#[derive(Debug)]
pub struct ToyEncoder {
    /// (D, P): exact pseudo-inverse of the generator's linear map.
    pinv: Array2<f64>,
    b: Array1<f64>,
    layers: usize,
    channels: usize,
    image: usize,
    warnings: AtomicU64,
}

/// Build the paired generator and encoder from the config seed.
pub fn build_toy_pair(cfg: &GeneratorConfig) -> (ToyGenerator, ToyEncoder) {
    let d = cfg.layers * cfg.channels;
    let p = cfg.image_size * cfg.image_size * 3;
    assert!(d <= p, "latent dim must not exceed pixel count");

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let raw = DMatrix::<f64>::from_fn(p, d, |_, _| {
        // Box-Muller keeps the draw count per entry fixed.
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    });
    let q = raw.qr().q();

    let mut a = Array2::<f64>::zeros((p, d));
    for i in 0..p {
        for j in 0..d {
            a[[i, j]] = cfg.gain * q[(i, j)];
        }
    }
    let mut pinv = Array2::<f64>::zeros((d, p));
    for i in 0..p {
        for j in 0..d {
            pinv[[j, i]] = q[(i, j)] / cfg.gain;
        }
    }
    let b = Array1::from_shape_fn(p, |_| 0.1 * {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    });

    let generator = ToyGenerator {
        a,
        b: b.clone(),
        layers: cfg.layers,
        channels: cfg.channels,
        image: cfg.image_size,
    };
    let encoder = ToyEncoder {
        pinv,
        b,
        layers: cfg.layers,
        channels: cfg.channels,
        image: cfg.image_size,
        warnings: AtomicU64::new(0),
    };
    (generator, encoder)
}

impl ToyGenerator {
    pub fn pixel_count(&self) -> usize {
        self.image * self.image * 3
    }

    fn check_latent(&self, w: &LatentCode) -> Result<()> {
        if w.shape() != (self.layers, self.channels) {
            return Err(Error::dimension(format!(
                "latent shape {:?} does not match generator ({}, {})",
                w.shape(),
                self.layers,
                self.channels
            )));
        }
        Ok(())
    }

    /// Pre-tanh pixel vector A w + b.
    pub fn pre_activation(&self, w: &LatentCode) -> Result<Array1<f64>> {
        self.check_latent(w)?;
        Ok(self.a.dot(&w.flatten()) + &self.b)
    }

    fn frame_from_pre(&self, pre: &Array1<f64>) -> Frame {
        let data = Array3::from_shape_vec(
            (self.image, self.image, 3),
            pre.iter().map(|v| v.tanh()).collect(),
        )
        .expect("pixel count matches");
        Frame::new(data)
    }

    /// Accumulate dL/dA and dL/db given dL/dframe, under `prefix`.
    pub fn param_vjp(
        &self,
        w: &LatentCode,
        frame_grad: &Array3<f64>,
        grads: &mut Gradients,
        prefix: &str,
    ) -> Result<()> {
        let pre = self.pre_activation(w)?;
        let flat = w.flatten();
        let d = flat.len();
        let dpre: Vec<f64> = pre
            .iter()
            .zip(frame_grad.iter())
            .map(|(p, g)| {
                let t = p.tanh();
                g * (1.0 - t * t)
            })
            .collect();
        let mut da = vec![0.0; self.a.len()];
        for (i, &dp) in dpre.iter().enumerate() {
            if dp == 0.0 {
                continue;
            }
            for j in 0..d {
                da[i * d + j] = dp * flat[j];
            }
        }
        grads.add(&format!("{prefix}.a"), &da);
        grads.add(&format!("{prefix}.b"), &dpre);
        Ok(())
    }
}

impl ImageGenerator for ToyGenerator {
    fn latent_shape(&self) -> (usize, usize) {
        (self.layers, self.channels)
    }

    fn image_shape(&self) -> (usize, usize) {
        (self.image, self.image)
    }

    fn synthesize(&self, w: &LatentCode) -> Result<Frame> {
        let pre = self.pre_activation(w)?;
        Ok(self.frame_from_pre(&pre))
    }

    fn latent_vjp(&self, w: &LatentCode, frame_grad: &Array3<f64>) -> Result<LatentCode> {
        let pre = self.pre_activation(w)?;
        let dpre = Array1::from_iter(pre.iter().zip(frame_grad.iter()).map(|(p, g)| {
            let t = p.tanh();
            g * (1.0 - t * t)
        }));
        let flat = self.a.t().dot(&dpre);
        LatentCode::from_flat(&flat, self.layers, self.channels)
    }

    fn parameter_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

impl ParamSet for ToyGenerator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(
            &format!("{prefix}.a"),
            &[self.a.nrows(), self.a.ncols()],
            self.a.as_slice().expect("contiguous"),
        );
        f(
            &format!("{prefix}.b"),
            &[self.b.len()],
            self.b.as_slice().expect("contiguous"),
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(
            &format!("{prefix}.a"),
            self.a.as_slice_mut().expect("contiguous"),
        );
        f(
            &format!("{prefix}.b"),
            self.b.as_slice_mut().expect("contiguous"),
        );
    }
}

impl ToyEncoder {
    /// Count of pixels clamped away from +-1 before atanh so far.
    pub fn warnings(&self) -> u64 {
        self.warnings.load(Ordering::Relaxed)
    }
}

impl ImageEncoder for ToyEncoder {
    fn latent_shape(&self) -> (usize, usize) {
        (self.layers, self.channels)
    }

    fn image_shape(&self) -> (usize, usize) {
        (self.image, self.image)
    }

    fn invert(&self, frame: &Frame) -> Result<LatentCode> {
        let (h, w) = frame.shape();
        if (h, w) != (self.image, self.image) {
            return Err(Error::dimension(format!(
                "frame shape ({h}, {w}) does not match encoder image size {}",
                self.image
            )));
        }
        let mut clamped = 0u64;
        let limit = 1.0 - CLAMP_EPS;
        let y = Array1::from_iter(frame.data.iter().map(|&v| {
            let v = if v.abs() >= limit {
                clamped += 1;
                limit.copysign(v)
            } else {
                v
            };
            v.atanh()
        }));
        if clamped > 0 {
            self.warnings.fetch_add(clamped, Ordering::Relaxed);
        }
        let flat = self.pinv.dot(&(&y - &self.b));
        LatentCode::from_flat(&flat, self.layers, self.channels)
    }

    fn clamp_warnings(&self) -> u64 {
        self.warnings()
    }
}
