//! Random weights, random features and additive feature noise.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{dot, dot4};
use crate::rng::{stream_from_key, Stream};
use crate::spectrum::{CovariateSet, Spectrum};

/// Where a weight matrix came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub master_seed: u64,
    pub labels: Vec<u64>,
}

/// `p x s` matrix of i.i.d. standard normal weights, one column per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    entries: DMatrix<f64>,
    lineage: Option<Lineage>,
}

/// Draw a `p x s` weight matrix. Entries are generated column by column, so
/// the first `s'` columns of a wider draw from the same stream coincide with a
/// draw of width `s'`.
pub fn sample_weights<R: Rng + ?Sized>(p: usize, s: usize, rng: &mut R) -> Result<WeightMatrix> {
    if p == 0 || s == 0 {
        return Err(invalid("p, s", format!("weight matrix needs positive dimensions, got {p} x {s}")));
    }
    let mut entries = DMatrix::zeros(p, s);
    for v in entries.as_mut_slice() {
        *v = rng.sample(StandardNormal);
    }
    Ok(WeightMatrix { entries, lineage: None })
}

impl WeightMatrix {
    pub fn from_matrix(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(invalid("weights", "empty matrix"));
        }
        Ok(Self { entries, lineage: None })
    }

    pub fn with_lineage(mut self, master_seed: u64, labels: &[u64]) -> Self {
        self.lineage = Some(Lineage { master_seed, labels: labels.to_vec() });
        self
    }

    pub fn lineage(&self) -> Option<&Lineage> {
        self.lineage.as_ref()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn p(&self) -> usize {
        self.entries.nrows()
    }

    pub fn s(&self) -> usize {
        self.entries.ncols()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        let p = self.p();
        &self.entries.as_slice()[j * p..(j + 1) * p]
    }
}

/// Feature scale `1/sqrt(s)`.
pub fn feature_scale(s: usize) -> f64 {
    1.0 / (s as f64).sqrt()
}

/// Clean feature vector `z_x = W^T phi(x) / sqrt(s)`.
pub fn feature_row(w: &WeightMatrix, phi: &[f64]) -> Result<DVector<f64>> {
    if phi.len() != w.p() {
        return Err(Error::DimensionMismatch { context: "feature row", expected: w.p(), got: phi.len() });
    }
    let scale = feature_scale(w.s());
    Ok(DVector::from_fn(w.s(), |j, _| dot(phi, w.column(j)) * scale))
}

/// `n x s` clean feature matrix from eigenfeatures given as `p x n` columns.
/// Row `i` is bit-identical to [`feature_row`] on column `i`.
pub fn feature_matrix_from_phi(w: &WeightMatrix, phi_cols: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (p, n) = phi_cols.shape();
    if p != w.p() {
        return Err(Error::DimensionMismatch { context: "feature matrix", expected: w.p(), got: p });
    }
    let s = w.s();
    let scale = feature_scale(s);
    let phis = phi_cols.as_slice();
    let col = |i: usize| &phis[i * p..(i + 1) * p];
    let mut z = DMatrix::zeros(n, s);
    for j in 0..s {
        let wj = w.column(j);
        let mut i = 0;
        while i + 4 <= n {
            let v = dot4([col(i), col(i + 1), col(i + 2), col(i + 3)], wj);
            for r in 0..4 {
                z[(i + r, j)] = v[r] * scale;
            }
            i += 4;
        }
        while i < n {
            z[(i, j)] = dot(col(i), wj) * scale;
            i += 1;
        }
    }
    Ok(z)
}

/// `n x s` clean feature matrix for a covariate sample.
pub fn feature_matrix(w: &WeightMatrix, covariates: &CovariateSet, spectrum: &Spectrum) -> Result<DMatrix<f64>> {
    feature_matrix_from_phi(w, &covariates.phi_columns(spectrum)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseFamily {
    #[default]
    Gaussian,
    Rademacher,
    /// Centered uniform scaled to unit variance.
    Uniform,
}

impl NoiseFamily {
    /// Draw from the unit-variance base law.
    #[inline]
    pub fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            NoiseFamily::Gaussian => rng.sample(StandardNormal),
            NoiseFamily::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            NoiseFamily::Uniform => (2.0 * rng.random::<f64>() - 1.0) * 3f64.sqrt(),
        }
    }

    /// Subgaussian proxy of the unit-variance base law.
    pub fn proxy_variance(self) -> f64 {
        1.0
    }
}

/// Law of the additive feature noise: entries are `sigma0 / sqrt(s)` times a
/// unit-variance draw, with `sigma0^2 = s^{-alpha}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    /// `None` when the level was set directly.
    pub alpha: Option<f64>,
    pub s: usize,
    pub sigma0_sq: f64,
}

pub fn make_noise_spec(family: NoiseFamily, alpha: f64, s: usize) -> Result<NoiseSpec> {
    if !(alpha >= 0.0) {
        return Err(invalid("alpha", format!("noise exponent must satisfy alpha >= 0, got {alpha}")));
    }
    if s == 0 {
        return Err(invalid("s", "need at least one feature"));
    }
    Ok(NoiseSpec { family, alpha: Some(alpha), s, sigma0_sq: (s as f64).powf(-alpha) })
}

impl NoiseSpec {
    /// Noise at an explicit level `sigma0_sq >= 0`; zero gives noiseless features.
    pub fn with_level(family: NoiseFamily, sigma0_sq: f64, s: usize) -> Result<Self> {
        if !(sigma0_sq >= 0.0 && sigma0_sq.is_finite()) {
            return Err(invalid("sigma0_sq", format!("must be finite and non-negative, got {sigma0_sq}")));
        }
        if s == 0 {
            return Err(invalid("s", "need at least one feature"));
        }
        Ok(Self { family, alpha: None, s, sigma0_sq })
    }

    pub fn none(s: usize) -> Self {
        Self { family: NoiseFamily::Gaussian, alpha: None, s, sigma0_sq: 0.0 }
    }

    pub fn entry_variance(&self) -> f64 {
        self.sigma0_sq / self.s as f64
    }

    pub fn entry_std(&self) -> f64 {
        self.entry_variance().sqrt()
    }

    pub fn is_silent(&self) -> bool {
        self.sigma0_sq == 0.0
    }

    #[inline]
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.family.draw(rng) * self.entry_std()
    }
}

/// Add i.i.d. noise to a feature matrix. Entries are drawn column by column.
pub fn inject_noise<R: Rng + ?Sized>(
    z: &DMatrix<f64>,
    spec: &NoiseSpec,
    rng: &mut R,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if spec.s != z.ncols() {
        return Err(Error::DimensionMismatch { context: "noise spec width", expected: z.ncols(), got: spec.s });
    }
    let mut xi = DMatrix::zeros(z.nrows(), z.ncols());
    if !spec.is_silent() {
        for v in xi.as_mut_slice() {
            *v = spec.draw(rng);
        }
    }
    let noisy = z + &xi;
    Ok((xi, noisy))
}

/// A noisy feature vector `z_x + xi` with a fresh noise draw.
pub fn noisy_test_feature<R: Rng + ?Sized>(
    w: &WeightMatrix,
    phi: &[f64],
    spec: &NoiseSpec,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if spec.s != w.s() {
        return Err(Error::DimensionMismatch { context: "noise spec width", expected: w.s(), got: spec.s });
    }
    let mut z = feature_row(w, phi)?;
    if !spec.is_silent() {
        for v in z.iter_mut() {
            *v += spec.draw(rng);
        }
    }
    Ok(z)
}

/// Weights, eigenfeatures and (optionally noisy) training design.
#[derive(Debug, Clone)]
pub struct FeatureEnsemble {
    pub weights: WeightMatrix,
    /// `p x n`, column `i` is `phi(x_i)`
    pub phi: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub noise: Option<NoiseSpec>,
    pub xi: Option<DMatrix<f64>>,
    pub z_noisy: Option<DMatrix<f64>>,
}

impl FeatureEnsemble {
    /// Noiseless ensemble.
    pub fn clean(weights: WeightMatrix, phi: DMatrix<f64>) -> Result<Self> {
        let z = feature_matrix_from_phi(&weights, &phi)?;
        Ok(Self { weights, phi, z, noise: None, xi: None, z_noisy: None })
    }

    /// Ensemble with noise drawn from `rng`.
    pub fn noisy<R: Rng + ?Sized>(weights: WeightMatrix, phi: DMatrix<f64>, spec: NoiseSpec, rng: &mut R) -> Result<Self> {
        let mut e = Self::clean(weights, phi)?;
        let (xi, zn) = inject_noise(&e.z, &spec, rng)?;
        e.noise = Some(spec);
        e.xi = Some(xi);
        e.z_noisy = Some(zn);
        Ok(e)
    }

    /// Ensemble with a given noise realization.
    pub fn with_noise_matrix(weights: WeightMatrix, phi: DMatrix<f64>, spec: NoiseSpec, xi: DMatrix<f64>) -> Result<Self> {
        let mut e = Self::clean(weights, phi)?;
        if xi.shape() != e.z.shape() {
            return Err(Error::DimensionMismatch { context: "noise matrix", expected: e.z.len(), got: xi.len() });
        }
        e.z_noisy = Some(&e.z + &xi);
        e.noise = Some(spec);
        e.xi = Some(xi);
        Ok(e)
    }

    /// The design the estimator is fitted on: noisy if noise is present.
    pub fn design(&self) -> &DMatrix<f64> {
        self.z_noisy.as_ref().unwrap_or(&self.z)
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn s(&self) -> usize {
        self.z.ncols()
    }

    pub fn p(&self) -> usize {
        self.phi.nrows()
    }

    pub fn sigma0_sq(&self) -> f64 {
        self.noise.map_or(0.0, |n| n.sigma0_sq)
    }
}

/// Whether test-time features are noisy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestNoise {
    /// Fresh noise per test point, independent of the training noise.
    #[default]
    Fresh,
    /// Clean test features.
    Clean,
}

const NOISE_BLOCK: usize = 256;

/// Test-point features for a fixed weight matrix, kept in factored form.
///
/// Test noise is regenerated on demand from a stream key, one test point at a
/// time (all `s` entries of point 0, then point 1, ...), so the full `m x s`
/// noise matrix never needs to be stored.
#[derive(Debug, Clone)]
pub struct TestFeatures<'a> {
    /// `m x p`, row `t` is `phi(x_t)`
    pub phi: &'a DMatrix<f64>,
    pub weights: &'a WeightMatrix,
    pub noise: Option<(NoiseSpec, u64)>,
}

impl<'a> TestFeatures<'a> {
    pub fn new(phi: &'a DMatrix<f64>, weights: &'a WeightMatrix, noise: Option<(NoiseSpec, u64)>) -> Result<Self> {
        if phi.ncols() != weights.p() {
            return Err(Error::DimensionMismatch { context: "test eigenfeatures", expected: weights.p(), got: phi.ncols() });
        }
        if let Some((spec, _)) = &noise {
            if spec.s != weights.s() {
                return Err(Error::DimensionMismatch { context: "test noise width", expected: weights.s(), got: spec.s });
            }
        }
        Ok(Self { phi, weights, noise: noise.filter(|(spec, _)| !spec.is_silent()) })
    }

    pub fn m(&self) -> usize {
        self.phi.nrows()
    }

    pub fn s(&self) -> usize {
        self.weights.s()
    }

    /// Clean part `Z_test M`.
    pub fn project_clean(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_width(m)?;
        let wm = self.weights.matrix() * m;
        Ok((self.phi * wm) * feature_scale(self.s()))
    }

    /// Noise part `Xi_test M` for the noise realization keyed by `key`.
    pub fn project_noise_with(&self, spec: &NoiseSpec, key: u64, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_width(m)?;
        let (s, k, rows) = (self.s(), m.ncols(), self.m());
        let mt = m.transpose();
        let mut rng: Stream = stream_from_key(key);
        let mut out = DMatrix::zeros(rows, k);
        let mut start = 0;
        while start < rows {
            let len = NOISE_BLOCK.min(rows - start);
            // s x len, column t holds the noise of test point start + t
            let mut block = DMatrix::zeros(s, len);
            for v in block.as_mut_slice() {
                *v = spec.draw(&mut rng);
            }
            let part = &mt * block;
            out.rows_mut(start, len).copy_from(&part.transpose());
            start += len;
        }
        Ok(out)
    }

    /// `(Z_test M, Xi_test M)`; the noise part is absent for clean test features.
    pub fn project(&self, m: &DMatrix<f64>) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
        let clean = self.project_clean(m)?;
        let noise = match &self.noise {
            Some((spec, key)) => Some(self.project_noise_with(spec, *key, m)?),
            None => None,
        };
        Ok((clean, noise))
    }

    /// `Z_test M` including noise.
    pub fn project_total(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (c, n) = self.project(m)?;
        Ok(match n {
            Some(n) => c + n,
            None => c,
        })
    }

    /// The full `m x s` test feature matrix.
    pub fn materialize(&self) -> Result<DMatrix<f64>> {
        self.project_total(&DMatrix::identity(self.s(), self.s()))
    }

    fn check_width(&self, m: &DMatrix<f64>) -> Result<()> {
        if m.nrows() != self.s() {
            return Err(Error::DimensionMismatch { context: "projection matrix", expected: self.s(), got: m.nrows() });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_seed, seed_stream};
    use crate::spectrum::{
        kernel_eval, make_spectrum, sample_covariates, Covariate, DecayKind, DecayParams, FeatureMode,
    };

    #[test]
    fn weights_deterministic_and_nested() {
        let a = sample_weights(2, 3, &mut seed_stream(42, &[])).unwrap();
        let b = sample_weights(2, 3, &mut seed_stream(42, &[])).unwrap();
        assert_eq!(a, b);
        let wide = sample_weights(2, 5, &mut seed_stream(42, &[])).unwrap();
        assert_eq!(wide.matrix().columns(0, 3), a.matrix().columns(0, 3));
        assert!(sample_weights(0, 3, &mut seed_stream(1, &[])).is_err());
    }

    #[test]
    fn weight_moments() {
        let w = sample_weights(200, 200, &mut seed_stream(5, &[1])).unwrap();
        let n = 40_000.0;
        let mean = w.matrix().sum() / n;
        let var = w.matrix().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 4.0 / n.sqrt());
        assert!((0.96..=1.04).contains(&var), "{var}");
    }

    #[test]
    fn weight_column_covariance() {
        let (p, s) = (5, 10_000);
        let w = sample_weights(p, s, &mut seed_stream(6, &[1])).unwrap();
        let c = (w.matrix() * w.matrix().transpose()) / s as f64;
        let tol = 4.0 / (s as f64).sqrt();
        for i in 0..p {
            for j in 0..p {
                let target = if i == j { 1.0 } else { 0.0 };
                // diagonal entries have variance 2/s, off-diagonal 1/s
                let scale = if i == j { 2f64.sqrt() } else { 1.0 };
                assert!((c[(i, j)] - target).abs() <= tol * scale, "({i},{j}) {}", c[(i, j)]);
            }
        }
    }

    #[test]
    fn feature_rows_bit_exact() {
        let spec = make_spectrum(DecayKind::Polynomial, 37, DecayParams::polynomial(2.0)).unwrap();
        let xs = sample_covariates(FeatureMode::Eigencoordinate, 11, 37, &mut seed_stream(1, &[2])).unwrap();
        let w = sample_weights(37, 9, &mut seed_stream(1, &[3])).unwrap();
        let z = feature_matrix(&w, &xs, &spec).unwrap();
        let phi = xs.phi_columns(&spec).unwrap();
        for i in 0..11 {
            let row = feature_row(&w, phi.column(i).as_slice()).unwrap();
            for j in 0..9 {
                assert_eq!(row[j].to_bits(), z[(i, j)].to_bits());
            }
        }
        let direct = (w.matrix().transpose() * &phi).transpose() / 3.0;
        assert!((direct - &z).amax() < 1e-12);
        let w_bad = sample_weights(36, 9, &mut seed_stream(1, &[3])).unwrap();
        assert!(feature_matrix(&w_bad, &xs, &spec).is_err());
    }

    #[test]
    fn single_feature_reduces_to_dot() {
        let w = WeightMatrix::from_matrix(DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0])).unwrap();
        let phi = DMatrix::from_column_slice(3, 2, &[2.0, 5.0, 1.0, -1.0, 0.0, 0.0]);
        let z = feature_matrix_from_phi(&w, &phi).unwrap();
        assert_eq!(z.as_slice(), &[2.0, -1.0]);
    }

    /// Monte Carlo mean of z_x^T z_y over weight draws.
    fn kernel_mc(s: usize, draws: usize) -> (f64, f64, f64) {
        let spec = make_spectrum(DecayKind::Polynomial, 8, DecayParams::polynomial(2.0)).unwrap();
        let xs = sample_covariates(FeatureMode::Fourier, 2, 0, &mut seed_stream(3, &[])).unwrap();
        let phi = xs.phi_columns(&spec).unwrap();
        let mut sum = 0.0;
        let mut sq = 0.0;
        for d in 0..draws {
            let w = sample_weights(8, s, &mut seed_stream(4, &[s as u64, d as u64])).unwrap();
            let z = feature_matrix_from_phi(&w, &phi).unwrap();
            let v = z.row(0).dot(&z.row(1));
            sum += v;
            sq += v * v;
        }
        let mean = sum / draws as f64;
        let se = ((sq / draws as f64 - mean * mean) / draws as f64).sqrt();
        let k = kernel_eval(&spec, xs.get(0), xs.get(1)).unwrap();
        (mean, se, k)
    }

    #[test]
    fn gram_expectation_is_kernel() {
        let (m50, se50, k) = kernel_mc(50, 2000);
        assert!((m50 - k).abs() <= 3.0 * se50, "{m50} vs {k}");
        let (m100, se100, _) = kernel_mc(100, 2000);
        assert!((m100 - k).abs() <= 3.0 * se100);
        assert!((m50 - m100).abs() <= 3.0 * (se50 * se50 + se100 * se100).sqrt());
        let _ = Covariate::Point(0.0);
    }

    #[test]
    fn noise_spec_examples() {
        let a = make_noise_spec(NoiseFamily::Gaussian, 0.0, 100).unwrap();
        assert_eq!(a.sigma0_sq, 1.0);
        assert!((a.entry_variance() - 0.01).abs() < 1e-18);
        let b = make_noise_spec(NoiseFamily::Gaussian, 1.0, 100).unwrap();
        assert!((b.sigma0_sq - 0.01).abs() < 1e-18);
        assert!((b.entry_variance() - 1e-4).abs() < 1e-18);
        let c = make_noise_spec(NoiseFamily::Rademacher, 0.5, 4).unwrap();
        assert!((c.sigma0_sq - 0.5).abs() < 1e-15);
        let mut rng = seed_stream(9, &[]);
        let target = (0.5f64 / 4.0).sqrt();
        for _ in 0..100 {
            assert!((c.draw(&mut rng).abs() - target).abs() < 1e-15);
        }
        assert!(make_noise_spec(NoiseFamily::Gaussian, -1.0, 4).is_err());
        assert!(make_noise_spec(NoiseFamily::Gaussian, f64::NAN, 4).is_err());
    }

    #[test]
    fn zero_noise_leaves_design() {
        let z = DMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64);
        let (xi, zn) = inject_noise(&z, &NoiseSpec::none(3), &mut seed_stream(1, &[])).unwrap();
        assert_eq!(xi, DMatrix::zeros(4, 3));
        assert_eq!(zn, z);
        assert!(inject_noise(&z, &NoiseSpec::none(4), &mut seed_stream(1, &[])).is_err());
    }

    fn entry_variance(family: NoiseFamily, seed: u64) -> (f64, f64, f64) {
        let (n, s) = (200, 500);
        let spec = make_noise_spec(family, 0.5, s).unwrap();
        let z = DMatrix::zeros(n, s);
        let (xi, zn) = inject_noise(&z, &spec, &mut seed_stream(seed, &[])).unwrap();
        assert_eq!(zn - &xi, z);
        let k = (n * s) as f64;
        let mean = xi.sum() / k;
        let m2 = xi.iter().map(|v| v * v).sum::<f64>() / k;
        let m4 = xi.iter().map(|v| v.powi(4)).sum::<f64>() / k;
        (mean, m2, ((m4 - m2 * m2) / k).sqrt())
    }

    #[test]
    fn noise_normalization_all_families() {
        let target = 500f64.powf(-0.5) / 500.0;
        let mut vars = Vec::new();
        for (i, fam) in [NoiseFamily::Gaussian, NoiseFamily::Rademacher, NoiseFamily::Uniform].into_iter().enumerate() {
            let (mean, var, se) = entry_variance(fam, 20 + i as u64);
            assert!((var - target).abs() <= 0.1 * target, "{fam:?} {var}");
            // unscaled: mean zero, unit variance
            let unit = var / target;
            assert!((unit - 1.0).abs() <= 5.0 * se / target + 1e-12, "{fam:?} {unit}");
            assert!(mean.abs() <= 5.0 * (target / 1e5).sqrt());
            vars.push((var, se));
        }
        let (g, r) = (vars[0], vars[1]);
        assert!((g.0 - r.0).abs() <= 3.0 * (g.1 * g.1 + r.1 * r.1).sqrt());
    }

    #[test]
    fn test_feature_noise_is_fresh_and_centered() {
        let w = sample_weights(4, 6, &mut seed_stream(2, &[])).unwrap();
        let phi = [0.5, -1.0, 0.25, 2.0];
        let spec = NoiseSpec::with_level(NoiseFamily::Gaussian, 1.0, 6).unwrap();
        let clean = feature_row(&w, &phi).unwrap();
        let silent = noisy_test_feature(&w, &phi, &NoiseSpec::none(6), &mut seed_stream(1, &[])).unwrap();
        assert_eq!(silent, clean);
        let mut rng = seed_stream(3, &[]);
        let a = noisy_test_feature(&w, &phi, &spec, &mut rng).unwrap();
        let b = noisy_test_feature(&w, &phi, &spec, &mut rng).unwrap();
        assert_ne!(a, b);
        let draws = 5000;
        let mut sum = DVector::zeros(6);
        for _ in 0..draws {
            sum += noisy_test_feature(&w, &phi, &spec, &mut rng).unwrap();
        }
        let mean = sum / draws as f64;
        let se = (spec.entry_variance() / draws as f64).sqrt();
        for j in 0..6 {
            assert!((mean[j] - clean[j]).abs() <= 3.5 * se, "{j}");
        }
    }

    #[test]
    fn projection_matches_materialized_features() {
        let (p, s, m) = (12, 7, 300);
        let w = sample_weights(p, s, &mut seed_stream(8, &[])).unwrap();
        let phi = DMatrix::from_fn(m, p, |i, j| ((i * 31 + j * 17) % 13) as f64 / 13.0 - 0.5);
        let spec = NoiseSpec::with_level(NoiseFamily::Gaussian, 0.7, s).unwrap();
        let key = derive_seed(8, &[1]);
        let tf = TestFeatures::new(&phi, &w, Some((spec, key))).unwrap();
        let full = tf.materialize().unwrap();
        let mm = DMatrix::from_fn(s, 3, |i, j| (i as f64 - j as f64) * 0.3);
        let proj = tf.project_total(&mm).unwrap();
        assert!((&full * &mm - proj).amax() < 1e-12);
        // noise rows are generated point by point from the keyed stream
        let mut rng = stream_from_key(key);
        let first: Vec<f64> = (0..s).map(|_| spec.draw(&mut rng)).collect();
        let clean_first = feature_row(&w, phi.row(0).transpose().as_slice()).unwrap();
        for j in 0..s {
            assert!((full[(0, j)] - clean_first[j] - first[j]).abs() < 1e-12);
        }
        let tf_clean = TestFeatures::new(&phi, &w, None).unwrap();
        assert!(tf_clean.project(&mm).unwrap().1.is_none());
    }
}
