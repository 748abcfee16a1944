//! Latent codes, the PCA subspace of inverted codes, and displacement
//! composition.
//!
//! A latent code is a point in the generator's extended latent space: one
//! style vector per synthesis layer, shape (L, C). Displacements are latent
//! codes used additively. The PCA basis spans the top principal directions
//! of a corpus of inverted codes; per-frame displacements live in that span,
//! so a generated trajectory never leaves it.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use std::path::Path;

use crate::archive::TensorArchive;
use crate::error::{Error, Result};

/// Numerical rank cutoff relative to the largest singular value.
const RANK_TOL: f64 = 1e-10;

/// A point in the extended latent space, shape (L, C).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub data: Array2<f64>,
}

impl LatentCode {
    pub fn new(data: Array2<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(layers: usize, channels: usize) -> Self {
        Self {
            data: Array2::zeros((layers, channels)),
        }
    }

    /// (L, C)
    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    /// Row-major flattening to a D = L*C vector.
    pub fn flatten(&self) -> Array1<f64> {
        Array1::from_iter(self.data.iter().copied())
    }

    pub fn from_flat(flat: &Array1<f64>, layers: usize, channels: usize) -> Result<Self> {
        if flat.len() != layers * channels {
            return Err(Error::dimension(format!(
                "flat length {} does not match {layers}x{channels}",
                flat.len()
            )));
        }
        let data = Array2::from_shape_vec((layers, channels), flat.to_vec())
            .expect("length checked above");
        Ok(Self { data })
    }

    pub fn validate_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numerical("latent code contains non-finite entries".into()))
        }
    }

    /// Euclidean norm of the flattened code.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl std::ops::Add<&LatentCode> for &LatentCode {
    type Output = LatentCode;
    fn add(self, rhs: &LatentCode) -> LatentCode {
        LatentCode::new(&self.data + &rhs.data)
    }
}

impl std::ops::Sub<&LatentCode> for &LatentCode {
    type Output = LatentCode;
    fn sub(self, rhs: &LatentCode) -> LatentCode {
        LatentCode::new(&self.data - &rhs.data)
    }
}

/// Coordinates in the PCA subspace, length k.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceCoords {
    pub h: Array1<f64>,
}

impl SubspaceCoords {
    pub fn new(h: Array1<f64>) -> Self {
        Self { h }
    }

    pub fn zeros(k: usize) -> Self {
        Self { h: Array1::zeros(k) }
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }
}

/// Orthonormal basis of the top-k principal directions of inverted codes.
///
/// `components` rows are the directions (k, D); `mean` is the corpus mean
/// (D); `eigenvalues` are the explained variances, nonincreasing. Flattening
/// is row-major over (L, C) and recorded in the basis file header.
#[derive(Debug, Clone)]
pub struct PcaBasis {
    pub components: Array2<f64>,
    pub mean: Array1<f64>,
    pub eigenvalues: Array1<f64>,
    pub layers: usize,
    pub channels: usize,
}

impl PcaBasis {
    pub fn k(&self) -> usize {
        self.components.nrows()
    }

    pub fn dim(&self) -> usize {
        self.components.ncols()
    }

    fn check_code(&self, w: &LatentCode) -> Result<()> {
        if w.shape() != (self.layers, self.channels) {
            return Err(Error::dimension(format!(
                "latent shape {:?} does not match basis shape ({}, {})",
                w.shape(),
                self.layers,
                self.channels
            )));
        }
        Ok(())
    }

    /// Validates orthonormality and eigenvalue ordering.
    pub fn validate(&self) -> Result<()> {
        if self.dim() != self.layers * self.channels {
            return Err(Error::dimension(format!(
                "basis dim {} does not match {}x{}",
                self.dim(),
                self.layers,
                self.channels
            )));
        }
        let k = self.k();
        for i in 0..k {
            for j in i..k {
                let dot = self.components.row(i).dot(&self.components.row(j));
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-6 {
                    return Err(Error::Numerical(format!(
                        "basis rows {i},{j} not orthonormal: dot = {dot}"
                    )));
                }
            }
        }
        for i in 1..k {
            if self.eigenvalues[i] > self.eigenvalues[i - 1] + 1e-12 {
                return Err(Error::Numerical("eigenvalues not nonincreasing".into()));
            }
        }
        if self.eigenvalues.iter().any(|&e| e < -1e-12) {
            return Err(Error::Numerical("negative eigenvalue".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, fingerprint: &str) -> Result<()> {
        let mut arc = TensorArchive::new();
        arc.meta.insert("k".into(), self.k().to_string());
        arc.meta.insert("layers".into(), self.layers.to_string());
        arc.meta.insert("channels".into(), self.channels.to_string());
        arc.meta.insert("flatten_order".into(), "row_major".into());
        arc.meta
            .insert("tool_version".into(), env!("CARGO_PKG_VERSION").into());
        arc.meta.insert("fingerprint".into(), fingerprint.into());
        arc.insert("components", self.components.clone().into_dyn());
        arc.insert("mean", self.mean.clone().into_dyn());
        arc.insert("eigenvalues", self.eigenvalues.clone().into_dyn());
        arc.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let arc = TensorArchive::read(path)?;
        let layers: usize = arc
            .meta_get("layers")?
            .parse()
            .map_err(|_| Error::Data("bad layers field in basis header".into()))?;
        let channels: usize = arc
            .meta_get("channels")?
            .parse()
            .map_err(|_| Error::Data("bad channels field in basis header".into()))?;
        if arc.meta_get("flatten_order")? != "row_major" {
            return Err(Error::Data("unsupported flatten order in basis file".into()));
        }
        let components = arc
            .require("components")?
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| Error::Data(format!("components: {e}")))?;
        let mean = arc
            .require("mean")?
            .clone()
            .into_dimensionality::<ndarray::Ix1>()
            .map_err(|e| Error::Data(format!("mean: {e}")))?;
        let eigenvalues = arc
            .require("eigenvalues")?
            .clone()
            .into_dimensionality::<ndarray::Ix1>()
            .map_err(|e| Error::Data(format!("eigenvalues: {e}")))?;
        let basis = Self {
            components,
            mean,
            eigenvalues,
            layers,
            channels,
        };
        basis.validate()?;
        Ok(basis)
    }

    /// Fingerprint recorded at save time, if any.
    pub fn stored_fingerprint(path: &Path) -> Result<String> {
        let arc = TensorArchive::read(path)?;
        Ok(arc.meta_get("fingerprint")?.to_string())
    }
}

/// Fit the top-k principal directions of a set of latent codes.
///
/// Exact dense SVD of the mean-centered data matrix; explained variance of
/// component i equals eigenvalue i (sample covariance, denominator n-1).
/// Each component's entry of largest magnitude is made positive so bases
/// serialize reproducibly.
pub fn fit_pca(codes: &[LatentCode], k: usize) -> Result<PcaBasis> {
    if codes.is_empty() {
        return Err(Error::Input("fit_pca needs at least one code".into()));
    }
    let (layers, channels) = codes[0].shape();
    let dim = layers * channels;
    for c in codes {
        if c.shape() != (layers, channels) {
            return Err(Error::dimension(format!(
                "mixed latent shapes: {:?} vs ({layers}, {channels})",
                c.shape()
            )));
        }
    }
    let n = codes.len();
    if k == 0 || k > n.min(dim) {
        return Err(Error::dimension(format!(
            "k = {k} outside valid range 1..=min(samples = {n}, dim = {dim})"
        )));
    }

    let mut mean = Array1::<f64>::zeros(dim);
    for c in codes {
        mean += &c.flatten();
    }
    mean /= n as f64;

    let mut centered = DMatrix::<f64>::zeros(n, dim);
    for (i, c) in codes.iter().enumerate() {
        let flat = c.flatten();
        for j in 0..dim {
            centered[(i, j)] = flat[j] - mean[j];
        }
    }

    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let singular = &svd.singular_values;

    // Defensive descending sort; ties keep original order.
    let mut order: Vec<usize> = (0..singular.len()).collect();
    order.sort_by(|&a, &b| singular[b].partial_cmp(&singular[a]).unwrap());

    let s_max = singular[order[0]];
    let achievable = if s_max <= 0.0 {
        0
    } else {
        order.iter().filter(|&&i| singular[i] > s_max * RANK_TOL).count()
    };
    if k > achievable {
        return Err(Error::Rank {
            requested: k,
            achievable,
        });
    }

    let mut components = Array2::<f64>::zeros((k, dim));
    let mut eigenvalues = Array1::<f64>::zeros(k);
    for (row, &idx) in order.iter().take(k).enumerate() {
        let s = singular[idx];
        eigenvalues[row] = s * s / (n as f64 - 1.0).max(1.0);
        for j in 0..dim {
            components[[row, j]] = v_t[(idx, j)];
        }
        // Sign convention: largest-magnitude entry positive.
        let mut best = 0usize;
        for j in 1..dim {
            if components[[row, j]].abs() > components[[row, best]].abs() {
                best = j;
            }
        }
        if components[[row, best]] < 0.0 {
            for j in 0..dim {
                components[[row, j]] = -components[[row, j]];
            }
        }
    }

    let basis = PcaBasis {
        components,
        mean,
        eigenvalues,
        layers,
        channels,
    };
    basis.validate()?;
    Ok(basis)
}

/// Seeded standard-normal latent codes (scaled), as a stand-in corpus when
/// no inverted data is available (e.g. self-contained benchmarks).
pub fn sample_gaussian_codes(
    layers: usize,
    channels: usize,
    count: usize,
    scale: f64,
    seed: u64,
) -> Vec<LatentCode> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            LatentCode::new(Array2::from_shape_fn((layers, channels), |_| {
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                scale * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            }))
        })
        .collect()
}

/// Project a latent code into the subspace: h = V (flatten(w) - mean).
pub fn project(w: &LatentCode, basis: &PcaBasis) -> Result<SubspaceCoords> {
    basis.check_code(w)?;
    let centered = w.flatten() - &basis.mean;
    Ok(SubspaceCoords::new(basis.components.dot(&centered)))
}

/// Map subspace coordinates to a latent-space displacement: d = h V.
///
/// The mean is deliberately not added: the result is a displacement in the
/// span of the components, not an absolute code.
pub fn lift(h: &SubspaceCoords, basis: &PcaBasis) -> Result<LatentCode> {
    if h.len() != basis.k() {
        return Err(Error::dimension(format!(
            "coords length {} does not match basis k = {}",
            h.len(),
            basis.k()
        )));
    }
    let flat = basis.components.t().dot(&h.h);
    LatentCode::from_flat(&flat, basis.layers, basis.channels)
}

/// Displaced code of Eq. form w̄ = w_I + h·V.
pub fn compose(w_i: &LatentCode, h: &SubspaceCoords, basis: &PcaBasis) -> Result<LatentCode> {
    basis.check_code(w_i)?;
    let d = lift(h, basis)?;
    Ok(w_i + &d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn code_1x2(x: f64, y: f64) -> LatentCode {
        LatentCode::new(array![[x, y]])
    }

    fn random_codes(rng: &mut StdRng, n: usize, l: usize, c: usize) -> Vec<LatentCode> {
        (0..n)
            .map(|_| {
                let data = Array2::from_shape_fn((l, c), |_| rng.gen_range(-1.0..1.0));
                LatentCode::new(data)
            })
            .collect()
    }

    // Closed-form oracle: covariance of {(1,0),(-1,0),(2,0),(-2,0)} is
    // diag(10/3, 0) with ddof 1, so the top component is (1,0) with
    // eigenvalue 10/3 and the mean is (0,0).
    #[test]
    fn fit_pca_matches_closed_form_eigendecomposition() {
        let codes = vec![
            code_1x2(1.0, 0.0),
            code_1x2(-1.0, 0.0),
            code_1x2(2.0, 0.0),
            code_1x2(-2.0, 0.0),
        ];
        let basis = fit_pca(&codes, 1).unwrap();
        assert!((basis.mean[0]).abs() < 1e-12);
        assert!((basis.mean[1]).abs() < 1e-12);
        assert!((basis.components[[0, 0]] - 1.0).abs() < 1e-12);
        assert!(basis.components[[0, 1]].abs() < 1e-12);
        assert!((basis.eigenvalues[0] - 10.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn full_rank_round_trip_reproduces_centered_codes() {
        let mut rng = StdRng::seed_from_u64(5);
        let codes = random_codes(&mut rng, 20, 3, 4);
        let basis = fit_pca(&codes, 12).unwrap();
        for c in &codes {
            let h = project(c, &basis).unwrap();
            let lifted = lift(&h, &basis).unwrap();
            let centered = c.flatten() - &basis.mean;
            for (a, b) in lifted.flatten().iter().zip(centered.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_codes_give_rank_error_naming_achievable_rank() {
        let codes = vec![code_1x2(0.5, 0.5); 3];
        match fit_pca(&codes, 1) {
            Err(Error::Rank {
                requested,
                achievable,
            }) => {
                assert_eq!(requested, 1);
                assert_eq!(achievable, 0);
            }
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    #[test]
    fn k_beyond_sample_count_is_a_dimension_error() {
        let codes = vec![code_1x2(1.0, 0.0), code_1x2(0.0, 1.0)];
        assert!(matches!(fit_pca(&codes, 3), Err(Error::Dimension(_))));
        assert!(matches!(fit_pca(&codes, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn project_centers_and_reads_coordinates() {
        let mut rng = StdRng::seed_from_u64(9);
        let codes = random_codes(&mut rng, 16, 2, 3);
        let basis = fit_pca(&codes, 3).unwrap();

        // Mean projects to zero.
        let mean_code = LatentCode::from_flat(&basis.mean, 2, 3).unwrap();
        let h0 = project(&mean_code, &basis).unwrap();
        assert!(h0.h.iter().all(|v| v.abs() < 1e-10));

        // mean + 3*component_0 reads back (3, 0, 0).
        let shifted = &basis.mean + &(basis.components.row(0).to_owned() * 3.0);
        let w = LatentCode::from_flat(&shifted.to_owned(), 2, 3).unwrap();
        let h = project(&w, &basis).unwrap();
        assert!((h.h[0] - 3.0).abs() < 1e-10);
        assert!(h.h[1].abs() < 1e-10);
        assert!(h.h[2].abs() < 1e-10);
    }

    #[test]
    fn lift_basic_cases() {
        let mut rng = StdRng::seed_from_u64(12);
        let codes = random_codes(&mut rng, 10, 2, 2);
        let basis = fit_pca(&codes, 2).unwrap();

        let zero = lift(&SubspaceCoords::zeros(2), &basis).unwrap();
        assert!(zero.flatten().iter().all(|v| *v == 0.0));

        let e0 = SubspaceCoords::new(array![1.0, 0.0]);
        let lifted = lift(&e0, &basis).unwrap();
        for (a, b) in lifted.flatten().iter().zip(basis.components.row(0).iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        let bad = SubspaceCoords::zeros(5);
        assert!(matches!(lift(&bad, &basis), Err(Error::Dimension(_))));
    }

    #[test]
    fn compose_identity_and_linearity() {
        let mut rng = StdRng::seed_from_u64(3);
        let codes = random_codes(&mut rng, 12, 2, 4);
        let basis = fit_pca(&codes, 4).unwrap();
        let w_i = codes[0].clone();

        let same = compose(&w_i, &SubspaceCoords::zeros(4), &basis).unwrap();
        assert_eq!(same, w_i);

        let h = SubspaceCoords::new(array![0.3, -0.7, 0.1, 2.0]);
        let neg = SubspaceCoords::new(-h.h.clone());
        let a = compose(&w_i, &h, &basis).unwrap();
        let b = compose(&w_i, &neg, &basis).unwrap();
        let avg = LatentCode::new((&a.data + &b.data) / 2.0);
        for (x, y) in avg.flatten().iter().zip(w_i.flatten().iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // Orthonormal rows recover the coordinates from the displacement.
        let disp = (&a - &w_i).flatten();
        let recovered = basis.components.dot(&disp);
        for (x, y) in recovered.iter().zip(h.h.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn reconstruction_beats_random_orthonormal_directions() {
        let mut rng = StdRng::seed_from_u64(77);
        let k = 3;
        let codes = random_codes(&mut rng, 40, 2, 5);
        let basis = fit_pca(&codes, k).unwrap();

        let err_with = |dirs: &Array2<f64>| -> f64 {
            let mut total = 0.0;
            for c in &codes {
                let centered = c.flatten() - &basis.mean;
                let coords = dirs.dot(&centered);
                let recon = dirs.t().dot(&coords);
                total += (&centered - &recon).iter().map(|v| v * v).sum::<f64>();
            }
            total
        };
        let pca_err = err_with(&basis.components);

        for _ in 0..20 {
            // Random k orthonormal directions via Gram-Schmidt.
            let mut dirs = Array2::<f64>::zeros((k, 10));
            for i in 0..k {
                let mut v = Array1::from_shape_fn(10, |_| rng.gen_range(-1.0..1.0));
                for j in 0..i {
                    let proj = dirs.row(j).dot(&v);
                    v = &v - &(dirs.row(j).to_owned() * proj);
                }
                let norm = v.dot(&v).sqrt();
                v /= norm;
                dirs.row_mut(i).assign(&v);
            }
            assert!(pca_err <= err_with(&dirs) + 1e-9);
        }
    }

    #[test]
    fn lift_project_adjoint_for_zero_mean() {
        let mut rng = StdRng::seed_from_u64(21);
        let codes = random_codes(&mut rng, 15, 2, 4);
        let mut basis = fit_pca(&codes, 4).unwrap();
        basis.mean.fill(0.0);

        for _ in 0..10 {
            let h = SubspaceCoords::new(Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0)));
            let x = LatentCode::new(Array2::from_shape_fn((2, 4), |_| rng.gen_range(-1.0..1.0)));
            let lhs = lift(&h, &basis).unwrap().flatten().dot(&x.flatten());
            let rhs = h.h.dot(&project(&x, &basis).unwrap().h);
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn basis_file_round_trip() {
        let mut rng = StdRng::seed_from_u64(8);
        let codes = random_codes(&mut rng, 10, 2, 3);
        let basis = fit_pca(&codes, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("basis.bin");
        basis.save(&path, "fp-test").unwrap();

        let back = PcaBasis::load(&path).unwrap();
        assert_eq!(back.layers, 2);
        assert_eq!(back.channels, 3);
        assert_eq!(back.components, basis.components);
        assert_eq!(back.mean, basis.mean);
        assert_eq!(back.eigenvalues, basis.eigenvalues);
        assert_eq!(PcaBasis::stored_fingerprint(&path).unwrap(), "fp-test");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn components_stay_orthonormal(seed in 0u64..1000) {
            let mut rng = StdRng::seed_from_u64(seed);
            let codes = random_codes(&mut rng, 12, 2, 4);
            if let Ok(basis) = fit_pca(&codes, 4) {
                basis.validate().unwrap();
            }
        }

        #[test]
        fn projection_is_non_expansive(seed in 0u64..1000) {
            let mut rng = StdRng::seed_from_u64(seed);
            let codes = random_codes(&mut rng, 12, 2, 4);
            let basis = fit_pca(&codes, 3).unwrap();
            let w = LatentCode::new(Array2::from_shape_fn((2, 4), |_| rng.gen_range(-2.0..2.0)));
            let h = project(&w, &basis).unwrap();
            let centered_norm = (w.flatten() - &basis.mean).dot(&(w.flatten() - &basis.mean)).sqrt();
            let h_norm = h.h.dot(&h.h).sqrt();
            prop_assert!(h_norm <= centered_norm + 1e-9);
        }
    }
}
