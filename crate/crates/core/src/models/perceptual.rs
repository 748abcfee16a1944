//! Fixed random-weight conv pyramid used as the perceptual feature
//! extractor and as the FID feature network.
//!
//! The weights are seeded and serialized with checkpoints; they are never
//! trained. Distances computed with it exercise the loss structure, but
//! absolute values are not comparable to VGG/Inception-based numbers.

use ndarray::{Array1, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::frame::Frame;
use crate::config::PerceptualConfig;
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, leaky_relu_grad, Conv2d, ParamSet};

#[derive(Debug, Clone)]
pub struct PerceptualExtractor {
    convs: Vec<Conv2d>,
    slope: f64,
}

pub struct PhiCache {
    inputs: Vec<Array3<f64>>,
    preacts: Vec<Array3<f64>>,
}

/// (H, W, 3) -> (3, H, W)
fn to_chw(frame: &Frame) -> Array3<f64> {
    let (h, w) = frame.shape();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| frame.data[[y, x, c]])
}

/// (3, H, W) -> (H, W, 3)
fn to_hwc(map: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = map.dim();
    debug_assert_eq!(c, 3);
    Array3::from_shape_fn((h, w, 3), |(y, x, ch)| map[[ch, y, x]])
}

impl PerceptualExtractor {
    pub fn new(cfg: &PerceptualConfig) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let mut convs = Vec::with_capacity(cfg.channels.len());
        let mut in_ch = 3usize;
        for &out_ch in &cfg.channels {
            convs.push(Conv2d::new(&mut rng, in_ch, out_ch, 3, 2, 1));
            in_ch = out_ch;
        }
        Self { convs, slope: 0.2 }
    }

    /// Per-layer channel widths.
    pub fn layer_dims(&self) -> Vec<usize> {
        self.convs.iter().map(|c| c.w.dim().0).collect()
    }

    /// Dimension of the pooled feature vector (sum of channel widths).
    pub fn pooled_dim(&self) -> usize {
        self.layer_dims().iter().sum()
    }

    fn forward_maps(&self, frame: &Frame) -> (Vec<Array3<f64>>, PhiCache) {
        let mut x = to_chw(frame);
        let mut activations = Vec::with_capacity(self.convs.len());
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut preacts = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            inputs.push(x.clone());
            let pre = conv.forward(&x);
            preacts.push(pre.clone());
            x = pre.mapv(|v| leaky_relu(v, self.slope));
            activations.push(x.clone());
        }
        (activations, PhiCache { inputs, preacts })
    }

    /// Stacked features: all layers' activations flattened and concatenated.
    pub fn features(&self, frame: &Frame) -> Array1<f64> {
        self.features_cached(frame).0
    }

    pub fn features_cached(&self, frame: &Frame) -> (Array1<f64>, PhiCache) {
        let (acts, cache) = self.forward_maps(frame);
        let total: usize = acts.iter().map(|a| a.len()).sum();
        let mut out = Vec::with_capacity(total);
        for a in &acts {
            out.extend(a.iter().copied());
        }
        (Array1::from_vec(out), cache)
    }

    /// Gradient of a scalar loss w.r.t. the input frame, given the gradient
    /// w.r.t. the stacked feature vector.
    pub fn input_vjp(&self, cache: &PhiCache, d_features: &Array1<f64>) -> Array3<f64> {
        // Split the flat gradient back into per-layer maps.
        let mut offset = 0usize;
        let mut d_acts: Vec<Array3<f64>> = Vec::with_capacity(self.convs.len());
        for pre in &cache.preacts {
            let len = pre.len();
            let slice = d_features.slice(ndarray::s![offset..offset + len]).to_vec();
            d_acts.push(Array3::from_shape_vec(pre.dim(), slice).expect("length matches"));
            offset += len;
        }
        debug_assert_eq!(offset, d_features.len());

        let mut scratch = crate::nn::Gradients::new();
        let mut dy: Option<Array3<f64>> = None;
        for (l, conv) in self.convs.iter().enumerate().rev() {
            let mut g = d_acts[l].clone();
            if let Some(from_above) = dy {
                g += &from_above;
            }
            ndarray::Zip::from(&mut g)
                .and(&cache.preacts[l])
                .for_each(|gv, &p| *gv *= leaky_relu_grad(p, self.slope));
            dy = Some(conv.backward(&cache.inputs[l], &g, &mut scratch, &format!("phi{l}")));
        }
        to_hwc(&dy.expect("at least one layer"))
    }

    /// Spatially pooled features (per-channel means), used for FID stats.
    pub fn pooled(&self, frame: &Frame) -> Array1<f64> {
        let (acts, _) = self.forward_maps(frame);
        let mut out = Vec::with_capacity(self.pooled_dim());
        for a in &acts {
            let (c, h, w) = a.dim();
            for ch in 0..c {
                let mut sum = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        sum += a[[ch, y, x]];
                    }
                }
                out.push(sum / (h * w) as f64);
            }
        }
        Array1::from_vec(out)
    }
}

impl ParamSet for PerceptualExtractor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (l, conv) in self.convs.iter().enumerate() {
            conv.visit(&format!("{prefix}.conv{l}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (l, conv) in self.convs.iter_mut().enumerate() {
            conv.visit_mut(&format!("{prefix}.conv{l}"), f);
        }
    }
}

/// L2 distance between stacked extractor features.
pub fn perceptual_distance(
    x: &Frame,
    y: &Frame,
    extractor: &PerceptualExtractor,
) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::dimension(format!(
            "frame shapes {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let fx = extractor.features(x);
    let fy = extractor.features(y);
    Ok((&fx - &fy).iter().map(|v| v * v).sum::<f64>().sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_frame(rng: &mut ChaCha20Rng, size: usize) -> Frame {
        Frame::new(Array3::from_shape_fn((size, size, 3), |_| {
            rng.gen_range(-0.9..0.9)
        }))
    }

    #[test]
    fn identical_frames_have_zero_distance() {
        let phi = PerceptualExtractor::new(&PerceptualConfig::default());
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x = random_frame(&mut rng, 16);
        assert_eq!(perceptual_distance(&x, &x, &phi).unwrap(), 0.0);
    }

    #[test]
    fn distance_is_symmetric_and_satisfies_triangle_inequality() {
        let phi = PerceptualExtractor::new(&PerceptualConfig::default());
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..5 {
            let a = random_frame(&mut rng, 16);
            let b = random_frame(&mut rng, 16);
            let c = random_frame(&mut rng, 16);
            let dab = perceptual_distance(&a, &b, &phi).unwrap();
            let dba = perceptual_distance(&b, &a, &phi).unwrap();
            assert!((dab - dba).abs() < 1e-12);
            let dac = perceptual_distance(&a, &c, &phi).unwrap();
            let dcb = perceptual_distance(&c, &b, &phi).unwrap();
            assert!(dab <= dac + dcb + 1e-12);
        }
    }

    #[test]
    fn same_seed_gives_identical_extractors() {
        let a = PerceptualExtractor::new(&PerceptualConfig::default());
        let b = PerceptualExtractor::new(&PerceptualConfig::default());
        assert_eq!(crate::nn::param_hash(&a), crate::nn::param_hash(&b));
    }

    #[test]
    fn input_vjp_matches_finite_differences() {
        let phi = PerceptualExtractor::new(&PerceptualConfig {
            channels: vec![2, 3],
            seed: 9,
        });
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = random_frame(&mut rng, 8);
        let target = phi.features(&random_frame(&mut rng, 8));

        // Loss = || phi(x) - target ||^2 (squared to keep FD smooth).
        let loss = |f: &Frame| {
            let d = phi.features(f) - &target;
            d.iter().map(|v| v * v).sum::<f64>()
        };
        let (fx, cache) = phi.features_cached(&x);
        let d_feat = (&fx - &target) * 2.0;
        let dx = phi.input_vjp(&cache, &d_feat);

        for idx in [(0usize, 0usize, 0usize), (3, 4, 1), (7, 7, 2), (2, 6, 0)] {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.data[idx] += 1e-6;
            minus.data[idx] -= 1e-6;
            let fd = (loss(&plus) - loss(&minus)) / 2e-6;
            assert!((dx[idx] - fd).abs() < 1e-6, "{:?}: {} vs {}", idx, dx[idx], fd);
        }
    }

    #[test]
    fn pooled_dimension_matches_channel_sum() {
        let phi = PerceptualExtractor::new(&PerceptualConfig::default());
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x = random_frame(&mut rng, 32);
        assert_eq!(phi.pooled(&x).len(), 8 + 16 + 24 + 32);
    }
}
