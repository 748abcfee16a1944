//! Minimal neural-network machinery: layers with explicit forward/backward
//! passes, named-parameter visiting, and Adam.
//!
//! Everything is f64 and single-threaded on purpose: training must be
//! bit-reproducible under a fixed seed, and analytic gradients are verified
//! against central finite differences (see [`check`]).

mod adam;
pub mod check;
mod conv;
mod linear;
mod lstm;

pub use adam::Adam;
pub use conv::Conv2d;
pub use linear::Linear;
pub use lstm::{Lstm, LstmCache, LstmLayer, LstmState};

use ndarray::ArrayD;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

use crate::archive::TensorArchive;
use crate::error::{Error, Result};

/// Anything holding named trainable tensors.
///
/// Visit order is construction order and must be deterministic; parameter
/// names are dot-separated paths rooted at the caller's prefix.
pub trait ParamSet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));
}

/// Total number of scalar parameters.
pub fn param_count(params: &dyn ParamSet) -> usize {
    let mut n = 0;
    params.visit("", &mut |_, _, data| n += data.len());
    n
}

/// SHA-256 over names, shapes and little-endian payloads, in visit order.
/// Two parameter sets hash equal iff they are bit-identical.
pub fn param_hash(params: &dyn ParamSet) -> String {
    let mut hasher = Sha256::new();
    params.visit("", &mut |name, shape, data| {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        for &s in shape {
            hasher.update((s as u64).to_le_bytes());
        }
        for &v in data {
            hasher.update(v.to_le_bytes());
        }
    });
    crate::config::hex_string(&hasher.finalize())
}

/// Copy all parameters into an archive under their visit names.
pub fn save_params(params: &dyn ParamSet, prefix: &str, archive: &mut TensorArchive) {
    params.visit(prefix, &mut |name, shape, data| {
        let arr = ArrayD::from_shape_vec(shape.to_vec(), data.to_vec()).expect("shape matches");
        archive.insert(name, arr);
    });
}

/// Load parameters from an archive, failing on any missing name or shape
/// mismatch.
pub fn load_params(
    params: &mut dyn ParamSet,
    prefix: &str,
    archive: &TensorArchive,
) -> Result<()> {
    // Collect expected shapes first so errors name the offender.
    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    params.visit(prefix, &mut |name, shape, _| {
        expected.push((name.to_string(), shape.to_vec()));
    });
    for (name, shape) in &expected {
        let tensor = archive.require(name)?;
        if tensor.shape() != shape.as_slice() {
            return Err(Error::dimension(format!(
                "checkpoint tensor {name} has shape {:?}, expected {:?}",
                tensor.shape(),
                shape
            )));
        }
    }
    params.visit_mut(prefix, &mut |name, data| {
        let tensor = archive.get(name).expect("presence checked above");
        let src = tensor.as_slice().expect("archive tensors are contiguous");
        data.copy_from_slice(src);
    });
    Ok(())
}

/// Gradient accumulator keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a contribution (resizing on first touch).
    pub fn add(&mut self, name: &str, values: &[f64]) {
        let slot = self
            .map
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; values.len()]);
        debug_assert_eq!(slot.len(), values.len());
        for (a, b) in slot.iter_mut().zip(values) {
            *a += b;
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.map.get(name).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Scale every stored gradient (used for loss weighting).
    pub fn scale(&mut self, factor: f64) {
        for v in self.map.values_mut() {
            for x in v.iter_mut() {
                *x *= factor;
            }
        }
    }

    /// Merge another accumulator, weighted.
    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) {
        for (name, values) in &other.map {
            let slot = self
                .map
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; values.len()]);
            for (a, b) in slot.iter_mut().zip(values) {
                *a += factor * b;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.map
            .values()
            .flat_map(|v| v.iter())
            .fold(0.0f64, |acc, x| acc.max(x.abs()))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        slope
    }
}
