//! Fully connected layer.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::{Gradients, ParamSet};

/// y = W x + b with W of shape (out, in).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) init.
    pub fn new(rng: &mut ChaCha20Rng, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            w: Array2::from_shape_fn((out_dim, in_dim), |_| rng.gen_range(-bound..bound)),
            b: Array1::from_shape_fn(out_dim, |_| rng.gen_range(-bound..bound)),
        }
    }

    /// All-zero parameters (used for the decoder's output layer so initial
    /// displacements vanish).
    pub fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: Array2::zeros((out_dim, in_dim)),
            b: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.w.dot(x) + &self.b
    }

    /// Returns dL/dx and accumulates dL/dW, dL/db under `prefix`.
    pub fn backward(
        &self,
        x: &Array1<f64>,
        dy: &Array1<f64>,
        grads: &mut Gradients,
        prefix: &str,
    ) -> Array1<f64> {
        let mut dw = vec![0.0; self.w.len()];
        let in_dim = self.in_dim();
        for (o, &g) in dy.iter().enumerate() {
            for (i, &xi) in x.iter().enumerate() {
                dw[o * in_dim + i] = g * xi;
            }
        }
        grads.add(&format!("{prefix}.w"), &dw);
        grads.add(&format!("{prefix}.b"), dy.as_slice().expect("contiguous"));
        self.w.t().dot(dy)
    }
}

impl ParamSet for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(
            &format!("{prefix}.w"),
            &[self.w.nrows(), self.w.ncols()],
            self.w.as_slice().expect("contiguous"),
        );
        f(
            &format!("{prefix}.b"),
            &[self.b.len()],
            self.b.as_slice().expect("contiguous"),
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(
            &format!("{prefix}.w"),
            self.w.as_slice_mut().expect("contiguous"),
        );
        f(
            &format!("{prefix}.b"),
            self.b.as_slice_mut().expect("contiguous"),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::fd_param_grads;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn forward_matches_hand_computation() {
        let lin = Linear {
            w: array![[1.0, 2.0], [0.0, -1.0], [3.0, 0.5]],
            b: array![0.1, 0.2, 0.3],
        };
        let y = lin.forward(&array![2.0, -1.0]);
        assert_eq!(y, array![0.1, 1.2, 5.8]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let lin = Linear::new(&mut rng, 4, 3);
        let x = Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0));
        let probe = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));

        // Scalar loss: fixed projection of the output.
        let mut grads = Gradients::new();
        let dy = probe.clone();
        let dx = lin.backward(&x, &dy, &mut grads, "");

        let fd = fd_param_grads(&lin, 1e-6, |l| l.forward(&x).dot(&probe));
        for (name, vals) in &fd {
            let got = grads.get(name).unwrap();
            for (a, b) in got.iter().zip(vals) {
                assert!((a - b).abs() < 1e-7, "{name}: {a} vs {b}");
            }
        }

        // Input gradient via FD on x.
        for i in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let fd_dx = (lin.forward(&xp).dot(&probe) - lin.forward(&xm).dot(&probe)) / 2e-6;
            assert!((dx[i] - fd_dx).abs() < 1e-7);
        }
    }
}
