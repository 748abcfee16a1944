//! 2D convolution over (channels, height, width) maps.

use ndarray::{Array1, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::{Gradients, ParamSet};

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// (out_channels, in_channels, kh, kw)
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha20Rng,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: Array4::from_shape_fn((out_channels, in_channels, kernel, kernel), |_| {
                rng.gen_range(-bound..bound)
            }),
            b: Array1::from_shape_fn(out_channels, |_| rng.gen_range(-bound..bound)),
            stride,
            pad,
        }
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        let kh = self.w.dim().2;
        let kw = self.w.dim().3;
        (
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (oc, ic, kh, kw) = self.w.dim();
        let (xc, xh, xw) = x.dim();
        assert_eq!(ic, xc, "conv input channels mismatch");
        let (oh, ow) = self.out_spatial(xh, xw);
        let mut y = Array3::<f64>::zeros((oc, oh, ow));
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = self.b[o];
                    let base_y = (oy * self.stride) as isize - self.pad as isize;
                    let base_x = (ox * self.stride) as isize - self.pad as isize;
                    for c in 0..ic {
                        for ky in 0..kh {
                            let iy = base_y + ky as isize;
                            if iy < 0 || iy >= xh as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = base_x + kx as isize;
                                if ix < 0 || ix >= xw as isize {
                                    continue;
                                }
                                acc += self.w[[o, c, ky, kx]] * x[[c, iy as usize, ix as usize]];
                            }
                        }
                    }
                    y[[o, oy, ox]] = acc;
                }
            }
        }
        y
    }

    /// Returns dL/dx and accumulates dL/dW, dL/db under `prefix`.
    pub fn backward(
        &self,
        x: &Array3<f64>,
        dy: &Array3<f64>,
        grads: &mut Gradients,
        prefix: &str,
    ) -> Array3<f64> {
        let (oc, ic, kh, kw) = self.w.dim();
        let (_, xh, xw) = x.dim();
        let dy_dim = dy.dim();
        debug_assert_eq!(dy_dim.0, oc);

        let mut dw = Array4::<f64>::zeros((oc, ic, kh, kw));
        let mut db = vec![0.0; oc];
        let mut dx = Array3::<f64>::zeros(x.dim());

        for o in 0..oc {
            for oy in 0..dy_dim.1 {
                for ox in 0..dy_dim.2 {
                    let g = dy[[o, oy, ox]];
                    if g == 0.0 {
                        continue;
                    }
                    db[o] += g;
                    let base_y = (oy * self.stride) as isize - self.pad as isize;
                    let base_x = (ox * self.stride) as isize - self.pad as isize;
                    for c in 0..ic {
                        for ky in 0..kh {
                            let iy = base_y + ky as isize;
                            if iy < 0 || iy >= xh as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = base_x + kx as isize;
                                if ix < 0 || ix >= xw as isize {
                                    continue;
                                }
                                let (iy, ix) = (iy as usize, ix as usize);
                                dw[[o, c, ky, kx]] += g * x[[c, iy, ix]];
                                dx[[c, iy, ix]] += g * self.w[[o, c, ky, kx]];
                            }
                        }
                    }
                }
            }
        }
        grads.add(
            &format!("{prefix}.w"),
            dw.as_slice().expect("contiguous"),
        );
        grads.add(&format!("{prefix}.b"), &db);
        dx
    }
}

impl ParamSet for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let d = self.w.dim();
        f(
            &format!("{prefix}.w"),
            &[d.0, d.1, d.2, d.3],
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
