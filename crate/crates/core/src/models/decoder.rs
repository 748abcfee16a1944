//! Latent decoder: maps (projected identity latent, audio embedding) to
//! subspace displacement coordinates.

use ndarray::Array1;
use rand_chacha::ChaCha20Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::latent::SubspaceCoords;
use crate::nn::{leaky_relu, leaky_relu_grad, Gradients, Linear, ParamSet};

/// MLP with leaky-ReLU hidden layers and a zero-initialized output layer, so
/// displacements start at zero and the initial trajectory is the identity.
#[derive(Debug, Clone)]
pub struct LatentDecoder {
    hidden: Vec<Linear>,
    out: Linear,
    k: usize,
    embed_dim: usize,
    slope: f64,
}

pub struct DecoderCache {
    /// Layer inputs (first is the concatenated input) and pre-activations.
    inputs: Vec<Array1<f64>>,
    preacts: Vec<Array1<f64>>,
}

impl LatentDecoder {
    pub fn new(rng: &mut ChaCha20Rng, k: usize, embed_dim: usize, cfg: &ModelConfig) -> Self {
        let mut hidden = Vec::with_capacity(cfg.mlp_hidden_layers);
        let mut in_dim = k + embed_dim;
        for _ in 0..cfg.mlp_hidden_layers {
            hidden.push(Linear::new(rng, in_dim, cfg.mlp_width));
            in_dim = cfg.mlp_width;
        }
        let out = Linear::zeroed(in_dim, k);
        Self {
            hidden,
            out,
            k,
            embed_dim,
            slope: cfg.leaky_slope,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn check(&self, h_i: &Array1<f64>, e: &Array1<f64>) -> Result<()> {
        if h_i.len() != self.k || e.len() != self.embed_dim {
            return Err(Error::dimension(format!(
                "decoder expects ({}, {}) inputs, got ({}, {})",
                self.k,
                self.embed_dim,
                h_i.len(),
                e.len()
            )));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        h_i: &Array1<f64>,
        e: &Array1<f64>,
    ) -> Result<(Array1<f64>, DecoderCache)> {
        self.check(h_i, e)?;
        let mut x = Array1::from_iter(h_i.iter().chain(e.iter()).copied());
        let mut inputs = Vec::with_capacity(self.hidden.len() + 1);
        let mut preacts = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            inputs.push(x.clone());
            let pre = layer.forward(&x);
            preacts.push(pre.clone());
            x = pre.mapv(|v| leaky_relu(v, self.slope));
        }
        inputs.push(x.clone());
        let y = self.out.forward(&x);
        Ok((y, DecoderCache { inputs, preacts }))
    }

    /// Convenience inference entry point.
    pub fn decode(
        &self,
        h_i: &SubspaceCoords,
        e: &Array1<f64>,
    ) -> Result<SubspaceCoords> {
        let (y, _) = self.forward(&h_i.h, e)?;
        Ok(SubspaceCoords::new(y))
    }

    /// Backprop; returns (d_h_i, d_e).
    pub fn backward(
        &self,
        cache: &DecoderCache,
        d_out: &Array1<f64>,
        grads: &mut Gradients,
        prefix: &str,
    ) -> (Array1<f64>, Array1<f64>) {
        let mut dy = self.out.backward(
            cache.inputs.last().expect("cached"),
            d_out,
            grads,
            &format!("{prefix}.out"),
        );
        for (l, layer) in self.hidden.iter().enumerate().rev() {
            let pre = &cache.preacts[l];
            let mut d_pre = dy.clone();
            for (g, &p) in d_pre.iter_mut().zip(pre.iter()) {
                *g *= leaky_relu_grad(p, self.slope);
            }
            dy = layer.backward(&cache.inputs[l], &d_pre, grads, &format!("{prefix}.hidden{l}"));
        }
        let d_hi = dy.slice(ndarray::s![..self.k]).to_owned();
        let d_e = dy.slice(ndarray::s![self.k..]).to_owned();
        (d_hi, d_e)
    }
}

impl ParamSet for LatentDecoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (l, layer) in self.hidden.iter().enumerate() {
            layer.visit(&format!("{prefix}.hidden{l}"), f);
        }
        self.out.visit(&format!("{prefix}.out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (l, layer) in self.hidden.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}.hidden{l}"), f);
        }
        self.out.visit_mut(&format!("{prefix}.out"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::{fd_param_grads, max_relative_error};
    use rand::{Rng, SeedableRng};

    fn tiny() -> ModelConfig {
        ModelConfig {
            mlp_width: 16,
            mlp_hidden_layers: 3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_initialized_output_layer_gives_zero_displacement() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let dec = LatentDecoder::new(&mut rng, 4, 8, &tiny());
        let h_i = Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0));
        let e = Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0));
        let (y, _) = dec.forward(&h_i, &e).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let dec = LatentDecoder::new(&mut rng, 4, 8, &tiny());
        let h_i = Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0));
        let e = Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0));
        let (a, _) = dec.forward(&h_i, &e).unwrap();
        let (b, _) = dec.forward(&h_i, &e).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let dec = LatentDecoder::new(&mut rng, 4, 8, &tiny());
        let bad = dec.forward(&Array1::zeros(5), &Array1::zeros(8));
        assert!(matches!(bad, Err(Error::Dimension(_))));
    }

    // The spec's 8-dim toy config: gradients of a scalar readout match
    // central finite differences at 1e-4 relative.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut dec = LatentDecoder::new(&mut rng, 4, 8, &tiny());
        // Randomize the output layer too so its gradient path is exercised.
        dec.out = Linear::new(&mut rng, 16, 4);

        let h_i = Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0));
        let e = Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0));
        let probe = Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0));

        let loss = |d: &LatentDecoder| d.forward(&h_i, &e).unwrap().0.dot(&probe);

        let (_, cache) = dec.forward(&h_i, &e).unwrap();
        let mut grads = Gradients::new();
        let (d_hi, d_e) = dec.backward(&cache, &probe, &mut grads, "");

        for (name, fd) in fd_param_grads(&dec, 1e-6, loss) {
            let got = grads.get(&name).unwrap();
            assert!(
                max_relative_error(got, &fd, 1e-6) < 1e-4,
                "{name} disagrees with finite differences"
            );
        }

        // Input gradients.
        for i in 0..4 {
            let mut plus = h_i.clone();
            let mut minus = h_i.clone();
            plus[i] += 1e-6;
            minus[i] -= 1e-6;
            let fd = (dec.forward(&plus, &e).unwrap().0.dot(&probe)
                - dec.forward(&minus, &e).unwrap().0.dot(&probe))
                / 2e-6;
            assert!((d_hi[i] - fd).abs() < 1e-7);
        }
        for i in 0..8 {
            let mut plus = e.clone();
            let mut minus = e.clone();
            plus[i] += 1e-6;
            minus[i] -= 1e-6;
            let fd = (dec.forward(&h_i, &plus).unwrap().0.dot(&probe)
                - dec.forward(&h_i, &minus).unwrap().0.dot(&probe))
                / 2e-6;
            assert!((d_e[i] - fd).abs() < 1e-7);
        }
    }
}
