//! Stacked unidirectional LSTM with explicit backprop through time.

use ndarray::Array1;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::{sigmoid, Gradients, ParamSet};

/// One LSTM layer. Gate order in the stacked weight rows is (i, f, g, o).
#[derive(Debug, Clone)]
pub struct LstmLayer {
    /// (4H, in)
    pub w_ih: ndarray::Array2<f64>,
    /// (4H, H)
    pub w_hh: ndarray::Array2<f64>,
    /// (4H)
    pub b: Array1<f64>,
    pub hidden: usize,
}

/// Per-step saved activations for the backward pass.
#[derive(Debug, Clone)]
pub struct LstmCache {
    x: Array1<f64>,
    h_prev: Array1<f64>,
    c_prev: Array1<f64>,
    i: Array1<f64>,
    f: Array1<f64>,
    g: Array1<f64>,
    o: Array1<f64>,
    c: Array1<f64>,
}

/// Carried recurrent state (h, c) per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<Array1<f64>>,
    pub c: Vec<Array1<f64>>,
}

impl LstmLayer {
    pub fn new(rng: &mut ChaCha20Rng, in_dim: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: ndarray::Array2::from_shape_fn((4 * hidden, in_dim), |_| {
                rng.gen_range(-bound..bound)
            }),
            w_hh: ndarray::Array2::from_shape_fn((4 * hidden, hidden), |_| {
                rng.gen_range(-bound..bound)
            }),
            b: Array1::from_shape_fn(4 * hidden, |_| rng.gen_range(-bound..bound)),
            hidden,
        }
    }

    fn step(
        &self,
        x: &Array1<f64>,
        h_prev: &Array1<f64>,
        c_prev: &Array1<f64>,
    ) -> (Array1<f64>, Array1<f64>, LstmCache) {
        let h_n = self.hidden;
        let z = self.w_ih.dot(x) + self.w_hh.dot(h_prev) + &self.b;
        let mut i = Array1::zeros(h_n);
        let mut f = Array1::zeros(h_n);
        let mut g = Array1::zeros(h_n);
        let mut o = Array1::zeros(h_n);
        for j in 0..h_n {
            i[j] = sigmoid(z[j]);
            f[j] = sigmoid(z[h_n + j]);
            g[j] = z[2 * h_n + j].tanh();
            o[j] = sigmoid(z[3 * h_n + j]);
        }
        let c: Array1<f64> = &f * c_prev + &i * &g;
        let h: Array1<f64> = &o * &c.mapv(f64::tanh);
        let cache = LstmCache {
            x: x.clone(),
            h_prev: h_prev.clone(),
            c_prev: c_prev.clone(),
            i,
            f,
            g,
            o,
            c: c.clone(),
        };
        (h, c, cache)
    }

    /// Backward through one step. `dh`/`dc` are gradients flowing into this
    /// step's outputs; returns (dx, dh_prev, dc_prev).
    fn step_backward(
        &self,
        cache: &LstmCache,
        dh: &Array1<f64>,
        dc_in: &Array1<f64>,
        grads: &mut Gradients,
        prefix: &str,
    ) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
        let h_n = self.hidden;
        let tanh_c = cache.c.mapv(f64::tanh);
        let d_o: Array1<f64> = dh * &tanh_c;
        let dc: Array1<f64> = dc_in + &(dh * &cache.o * &tanh_c.mapv(|t| 1.0 - t * t));
        let d_i: Array1<f64> = &dc * &cache.g;
        let d_g: Array1<f64> = &dc * &cache.i;
        let d_f: Array1<f64> = &dc * &cache.c_prev;
        let dc_prev: Array1<f64> = &dc * &cache.f;

        let mut dz = Array1::<f64>::zeros(4 * h_n);
        for j in 0..h_n {
            dz[j] = d_i[j] * cache.i[j] * (1.0 - cache.i[j]);
            dz[h_n + j] = d_f[j] * cache.f[j] * (1.0 - cache.f[j]);
            dz[2 * h_n + j] = d_g[j] * (1.0 - cache.g[j] * cache.g[j]);
            dz[3 * h_n + j] = d_o[j] * cache.o[j] * (1.0 - cache.o[j]);
        }

        let in_dim = self.w_ih.ncols();
        let mut dw_ih = vec![0.0; 4 * h_n * in_dim];
        for (r, &gz) in dz.iter().enumerate() {
            for (cidx, &xv) in cache.x.iter().enumerate() {
                dw_ih[r * in_dim + cidx] = gz * xv;
            }
        }
        let mut dw_hh = vec![0.0; 4 * h_n * h_n];
        for (r, &gz) in dz.iter().enumerate() {
            for (cidx, &hv) in cache.h_prev.iter().enumerate() {
                dw_hh[r * h_n + cidx] = gz * hv;
            }
        }
        grads.add(&format!("{prefix}.w_ih"), &dw_ih);
        grads.add(&format!("{prefix}.w_hh"), &dw_hh);
        grads.add(&format!("{prefix}.b"), dz.as_slice().expect("contiguous"));

        let dx = self.w_ih.t().dot(&dz);
        let dh_prev = self.w_hh.t().dot(&dz);
        (dx, dh_prev, dc_prev)
    }
}

impl ParamSet for LstmLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(
            &format!("{prefix}.w_ih"),
            &[self.w_ih.nrows(), self.w_ih.ncols()],
            self.w_ih.as_slice().expect("contiguous"),
        );
        f(
            &format!("{prefix}.w_hh"),
            &[self.w_hh.nrows(), self.w_hh.ncols()],
            self.w_hh.as_slice().expect("contiguous"),
        );
        f(
            &format!("{prefix}.b"),
            &[self.b.len()],
            self.b.as_slice().expect("contiguous"),
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(
            &format!("{prefix}.w_ih"),
            self.w_ih.as_slice_mut().expect("contiguous"),
        );
        f(
            &format!("{prefix}.w_hh"),
            self.w_hh.as_slice_mut().expect("contiguous"),
        );
        f(
            &format!("{prefix}.b"),
            self.b.as_slice_mut().expect("contiguous"),
        );
    }
}

/// Stack of LSTM layers processed bottom-up per time step.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub layers: Vec<LstmLayer>,
}

impl Lstm {
    pub fn new(rng: &mut ChaCha20Rng, in_dim: usize, hidden: usize, n_layers: usize) -> Self {
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let d = if l == 0 { in_dim } else { hidden };
            layers.push(LstmLayer::new(rng, d, hidden));
        }
        Self { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden)
    }

    pub fn zero_state(&self) -> LstmState {
        LstmState {
            h: self.layers.iter().map(|l| Array1::zeros(l.hidden)).collect(),
            c: self.layers.iter().map(|l| Array1::zeros(l.hidden)).collect(),
        }
    }

    /// Advance one time step, mutating the carried state. Returns the top
    /// layer's hidden output.
    pub fn step_state(&self, x: &Array1<f64>, state: &mut LstmState) -> Array1<f64> {
        let mut input = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let (h, c, _) = layer.step(&input, &state.h[l], &state.c[l]);
            state.h[l] = h.clone();
            state.c[l] = c;
            input = h;
        }
        input
    }

    /// Whole-sequence forward returning top hidden states per step plus the
    /// caches needed for backprop through time.
    pub fn forward_sequence(
        &self,
        xs: &[Array1<f64>],
    ) -> (Vec<Array1<f64>>, Vec<Vec<LstmCache>>) {
        let mut state = self.zero_state();
        let mut tops = Vec::with_capacity(xs.len());
        let mut caches: Vec<Vec<LstmCache>> = vec![Vec::with_capacity(xs.len()); self.layers.len()];
        for x in xs {
            let mut input = x.clone();
            for (l, layer) in self.layers.iter().enumerate() {
                let (h, c, cache) = layer.step(&input, &state.h[l], &state.c[l]);
                caches[l].push(cache);
                state.h[l] = h.clone();
                state.c[l] = c;
                input = h;
            }
            tops.push(input);
        }
        (tops, caches)
    }

    /// Backprop through time given gradients on the top hidden states.
    /// Returns gradients on the inputs.
    pub fn backward_sequence(
        &self,
        caches: &[Vec<LstmCache>],
        d_tops: &[Array1<f64>],
        grads: &mut Gradients,
        prefix: &str,
    ) -> Vec<Array1<f64>> {
        let steps = d_tops.len();
        let n_layers = self.layers.len();
        // Gradient flowing into each layer's hidden output per step; start
        // with the top layer's external gradient.
        let mut d_hidden: Vec<Vec<Array1<f64>>> = vec![Vec::new(); n_layers];
        d_hidden[n_layers - 1] = d_tops.to_vec();

        let mut d_inputs: Vec<Array1<f64>> = Vec::new();
        for l in (0..n_layers).rev() {
            let layer = &self.layers[l];
            let name = format!("{prefix}.layer{l}");
            let mut dh_carry = Array1::<f64>::zeros(layer.hidden);
            let mut dc_carry = Array1::<f64>::zeros(layer.hidden);
            let mut dx_per_step = vec![Array1::<f64>::zeros(0); steps];
            for t in (0..steps).rev() {
                let mut dh = dh_carry.clone();
                if let Some(ext) = d_hidden[l].get(t) {
                    dh += ext;
                }
                let (dx, dh_prev, dc_prev) =
                    layer.step_backward(&caches[l][t], &dh, &dc_carry, grads, &name);
                dx_per_step[t] = dx;
                dh_carry = dh_prev;
                dc_carry = dc_prev;
            }
            if l == 0 {
                d_inputs = dx_per_step;
            } else {
                // Layer below receives these as gradients on its hidden
                // outputs.
                d_hidden[l - 1] = dx_per_step;
            }
        }
        d_inputs
    }
}

impl ParamSet for Lstm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}.layer{l}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}.layer{l}"), f);
        }
    }
}
