//! Circular-harmonic atomic filters with Gaussian radial profiles.
//!
//! An atomic filter is `psi_jk(u) = tau_j(|u|) * exp(i k arg u)` sampled on a
//! centered `K x K` integer grid, where `tau_j` is a Gaussian ring of radius
//! `j`. Rotating such a filter by `theta` multiplies it by `exp(-i k theta)`,
//! so any real combination `Re(sum w_jk psi_jk)` can be rotated exactly by
//! adjusting the phases of its coefficients.
//!
//! Grid convention: pixel `(x, y)` (column, row, rows growing downward) maps to
//! the complex coordinate `u = (x - c) + i (c - y)` with `c = (K - 1) / 2`, so
//! positive angles rotate counter-clockwise on screen.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use num_complex::Complex64;

use crate::error::{invalid_arg, Result};
use crate::pgm;

/// Per-ring angular frequency cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RingSpec {
    pub ring: usize,
    pub max_frequency: usize,
}

/// Ordered list of rings with their frequency caps `k <= A_j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencySpec {
    rings: Vec<RingSpec>,
}

impl FrequencySpec {
    /// Rings must be listed as `0, 1, 2, ...` in order.
    pub fn new(entries: &[(usize, usize)]) -> Result<Self> {
        if entries.is_empty() {
            return Err(invalid_arg!("frequency spec needs at least one ring"));
        }
        for (expected, &(ring, _)) in entries.iter().enumerate() {
            if ring != expected {
                return Err(invalid_arg!(
                    "ring indices must be 0,1,2,... in order; found {ring} at position {expected}"
                ));
            }
        }
        if entries[0].1 > 0 {
            log::warn!(
                "ring 0 carries frequencies up to {}; the phase of those filters is undefined at the center",
                entries[0].1
            );
        }
        Ok(Self {
            rings: entries
                .iter()
                .map(|&(ring, max_frequency)| RingSpec { ring, max_frequency })
                .collect(),
        })
    }

    /// Caps `k = 0, 2, 3, 2` on rings `j = 0..=3`, used for 7x7 filters.
    pub fn default_7x7() -> Self {
        Self::new(&[(0, 0), (1, 2), (2, 3), (3, 2)]).expect("static spec is valid")
    }

    /// Caps `k = 0, 2, 2` on rings `j = 0..=2`, used for 5x5 filters.
    pub fn default_5x5() -> Self {
        Self::new(&[(0, 0), (1, 2), (2, 2)]).expect("static spec is valid")
    }

    /// Default spec for a given odd filter size.
    pub fn default_for_size(size: usize) -> Result<Self> {
        match size {
            7 => Ok(Self::default_7x7()),
            5 => Ok(Self::default_5x5()),
            3 => Self::new(&[(0, 0), (1, 1)]),
            _ => Err(invalid_arg!("no default frequency spec for size {size}")),
        }
    }

    pub fn rings(&self) -> &[RingSpec] {
        &self.rings
    }

    pub fn max_ring(&self) -> usize {
        self.rings.last().map(|r| r.ring).unwrap_or(0)
    }

    /// All `(j, k)` pairs with `0 <= k <= A_j`, ring-major.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.rings
            .iter()
            .flat_map(|r| (0..=r.max_frequency).map(move |k| (r.ring, k)))
            .collect()
    }

    pub fn num_pairs(&self) -> usize {
        self.rings.iter().map(|r| r.max_frequency + 1).sum()
    }

    /// Real degrees of freedom for one planar filter: one for each `k = 0`
    /// coefficient, two for every other.
    pub fn real_params(&self) -> usize {
        self.rings.iter().map(|r| 1 + 2 * r.max_frequency).sum()
    }

    /// Parses `"0:0,1:2,2:3,3:2"`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (j, k) = item
                .split_once(':')
                .ok_or_else(|| invalid_arg!("expected ring:max_frequency, got {item:?}"))?;
            let j = j.trim().parse().map_err(|_| invalid_arg!("bad ring index {j:?}"))?;
            let k = k.trim().parse().map_err(|_| invalid_arg!("bad frequency {k:?}"))?;
            entries.push((j, k));
        }
        Self::new(&entries)
    }
}

impl std::fmt::Display for FrequencySpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self
            .rings
            .iter()
            .map(|r| format!("{}:{}", r.ring, r.max_frequency))
            .collect();
        f.write_str(&parts.join(","))
    }
}

/// Gaussian ring profile `exp(-(r - j)^2 / (2 sigma^2))`.
pub fn radial_profile(ring: usize, sigma: f64, r: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(invalid_arg!("sigma must be positive, got {sigma}"));
    }
    if !(r >= 0.0) {
        return Err(invalid_arg!("radius must be non-negative, got {r}"));
    }
    let d = r - ring as f64;
    Ok((-d * d / (2.0 * sigma * sigma)).exp())
}

/// One sampled circular harmonic `psi_jk`.
#[derive(Debug, Clone)]
pub struct AtomicFilter {
    pub ring: usize,
    pub frequency: usize,
    pub size: usize,
    /// Row-major `size x size` samples.
    pub samples: Vec<Complex64>,
    /// L2 norm of the raw samples before normalization.
    pub norm: f64,
}

/// The full set of atomic filters for one filter size.
#[derive(Debug, Clone)]
pub struct SteerableBasis {
    filters: Vec<AtomicFilter>,
    size: usize,
    sigma: f64,
    spec: FrequencySpec,
}

/// Complex coordinate of grid cell `(x, y)`.
pub fn grid_coordinate(size: usize, x: usize, y: usize) -> Complex64 {
    let c = (size as f64 - 1.0) / 2.0;
    Complex64::new(x as f64 - c, c - y as f64)
}

fn sample_atomic(ring: usize, frequency: usize, size: usize, sigma: f64) -> Vec<Complex64> {
    let mut samples = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = grid_coordinate(size, x, y);
            let r = u.norm();
            let tau = radial_profile(ring, sigma, r).expect("sigma validated by caller");
            if r == 0.0 {
                // The angular factor has no limit at the origin for k >= 1;
                // its mean over all directions is 0.
                let center = if frequency == 0 { tau } else { 0.0 };
                samples.push(Complex64::new(center, 0.0));
                continue;
            }
            let phase = u.im.atan2(u.re);
            samples.push(Complex64::from_polar(tau, frequency as f64 * phase));
        }
    }
    samples
}

/// Samples every `(j, k)` atomic filter of `spec` on a `size x size` grid.
pub fn build_basis(
    spec: &FrequencySpec,
    size: usize,
    sigma: f64,
    normalize: bool,
) -> Result<SteerableBasis> {
    if size < 3 || size % 2 == 0 {
        return Err(invalid_arg!("filter size must be odd and at least 3, got {size}"));
    }
    if !(sigma > 0.0) {
        return Err(invalid_arg!("sigma must be positive, got {sigma}"));
    }
    if 2 * spec.max_ring() + 1 > size {
        return Err(invalid_arg!(
            "ring {} does not fit a {size}x{size} grid",
            spec.max_ring()
        ));
    }
    let filters = spec
        .pairs()
        .into_iter()
        .map(|(ring, frequency)| {
            let mut samples = sample_atomic(ring, frequency, size, sigma);
            let norm = samples.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if normalize {
                samples.iter_mut().for_each(|z| *z /= norm);
            }
            AtomicFilter { ring, frequency, size, samples, norm }
        })
        .collect();
    Ok(SteerableBasis { filters, size, sigma, spec: spec.clone() })
}

impl SteerableBasis {
    pub fn filters(&self) -> &[AtomicFilter] {
        &self.filters
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn spec(&self) -> &FrequencySpec {
        &self.spec
    }

    pub fn frequencies(&self) -> Vec<usize> {
        self.filters.iter().map(|f| f.frequency).collect()
    }

    /// Real planes `[Re psi_0, Im psi_0, Re psi_1, ...]` as a row-major
    /// `(2 * len) x (size * size)` matrix.
    pub fn real_planes(&self) -> Vec<f64> {
        let area = self.size * self.size;
        let mut out = Vec::with_capacity(2 * self.len() * area);
        for f in &self.filters {
            out.extend(f.samples.iter().map(|z| z.re));
            out.extend(f.samples.iter().map(|z| z.im));
        }
        out
    }

    /// Writes `basis_j{j}_k{k}_{re|im}.pgm` for every atomic filter.
    pub fn export_pgm(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for f in &self.filters {
            for (part, values) in [
                ("re", f.samples.iter().map(|z| z.re).collect::<Vec<_>>()),
                ("im", f.samples.iter().map(|z| z.im).collect::<Vec<_>>()),
            ] {
                let path = dir.join(format!("basis_j{}_k{}_{part}.pgm", f.ring, f.frequency));
                pgm::write_scaled(&path, self.size, self.size, &values)?;
                written.push(path);
            }
        }
        Ok(written)
    }
}

/// Exact rotation of an atomic filter: `exp(-i k theta) * psi_jk`.
pub fn rotate_atomic(filter: &AtomicFilter, theta: f64) -> Vec<Complex64> {
    let phase = Complex64::from_polar(1.0, -(filter.frequency as f64) * theta);
    filter.samples.iter().map(|&z| phase * z).collect()
}

/// Complex coefficients `w_jk` (or `w_jk lambda`) for one
/// (output-channel, input-channel) pair.
///
/// Coefficients are stored orientation-major: `coefficients[lambda * P + p]`
/// where `P` is the number of `(j, k)` pairs. Input layers use a single
/// orientation slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SteerableWeights {
    frequencies: Vec<usize>,
    orientations: usize,
    coefficients: Vec<Complex64>,
}

impl SteerableWeights {
    /// Zero-frequency coefficients have their imaginary part cleared.
    pub fn new(spec: &FrequencySpec, orientations: usize, mut coefficients: Vec<Complex64>) -> Result<Self> {
        let frequencies: Vec<usize> = spec.pairs().into_iter().map(|(_, k)| k).collect();
        if orientations == 0 {
            return Err(invalid_arg!("orientation count must be positive"));
        }
        if coefficients.len() != frequencies.len() * orientations {
            return Err(invalid_arg!(
                "expected {} coefficients, got {}",
                frequencies.len() * orientations,
                coefficients.len()
            ));
        }
        for (i, w) in coefficients.iter_mut().enumerate() {
            if frequencies[i % frequencies.len()] == 0 {
                w.im = 0.0;
            }
        }
        Ok(Self { frequencies, orientations, coefficients })
    }

    pub fn zeros(spec: &FrequencySpec, orientations: usize) -> Self {
        let n = spec.num_pairs() * orientations;
        Self::new(spec, orientations, vec![Complex64::new(0.0, 0.0); n]).expect("sizes agree")
    }

    pub fn orientations(&self) -> usize {
        self.orientations
    }

    pub fn coefficients(&self) -> &[Complex64] {
        &self.coefficients
    }

    /// Coefficients of orientation slot `lambda`.
    pub fn slice(&self, lambda: usize) -> &[Complex64] {
        let p = self.frequencies.len();
        &self.coefficients[lambda * p..(lambda + 1) * p]
    }

    pub fn set(&mut self, lambda: usize, pair: usize, value: Complex64) {
        let p = self.frequencies.len();
        let mut v = value;
        if self.frequencies[pair] == 0 {
            v.im = 0.0;
        }
        self.coefficients[lambda * p + pair] = v;
    }

    /// Real trainable parameters held by these coefficients.
    pub fn real_param_count(&self) -> usize {
        let per: usize = self.frequencies.iter().map(|&k| if k == 0 { 1 } else { 2 }).sum();
        per * self.orientations
    }
}

/// `Re(sum_jk w_jk exp(-i k theta) psi_jk)` on the basis grid.
pub fn synthesize_filter(weights: &[Complex64], basis: &SteerableBasis, theta: f64) -> Result<Vec<f64>> {
    if weights.len() != basis.len() {
        return Err(invalid_arg!(
            "{} coefficients supplied for a basis of {} filters",
            weights.len(),
            basis.len()
        ));
    }
    let area = basis.size * basis.size;
    let mut out = vec![0.0; area];
    for (w, f) in weights.iter().zip(&basis.filters) {
        let c = w * Complex64::from_polar(1.0, -(f.frequency as f64) * theta);
        for (o, z) in out.iter_mut().zip(&f.samples) {
            *o += c.re * z.re - c.im * z.im;
        }
    }
    Ok(out)
}

/// Real parameters per (out, in) filter pair; hidden layers carry one
/// planar filter per orientation slot.
pub fn param_count(spec: &FrequencySpec, n: usize, hidden: bool) -> usize {
    spec.real_params() * if hidden { n } else { 1 }
}

/// Angles `2 pi s / n`.
pub fn group_angles(n: usize) -> Vec<f64> {
    (0..n).map(|s| 2.0 * PI * s as f64 / n as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_basis(normalize: bool) -> SteerableBasis {
        build_basis(&FrequencySpec::default_7x7(), 7, 0.6, normalize).unwrap()
    }

    #[test]
    fn radial_profile_values() {
        assert_eq!(radial_profile(0, 0.6, 0.0).unwrap(), 1.0);
        assert_eq!(radial_profile(1, 0.6, 1.0).unwrap(), 1.0);
        let v = radial_profile(2, 0.6, 0.0).unwrap();
        assert!((v - (-4.0f64 / 0.72).exp()).abs() < 1e-15);
        assert!((v - 3.86e-3).abs() < 1e-5);
        assert!(radial_profile(0, 0.0, 1.0).is_err());
        assert!(radial_profile(0, -1.0, 1.0).is_err());
    }

    #[test]
    fn default_basis_has_one_filter_per_pair() {
        // Caps 0,2,3,2 give 1 + 3 + 4 + 3 = 11 atomic filters.
        let b = default_basis(true);
        assert_eq!(b.len(), 11);
        let pairs: Vec<_> = b.filters().iter().map(|f| (f.ring, f.frequency)).collect();
        assert_eq!(
            pairs,
            vec![(0, 0), (1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (2, 2), (2, 3), (3, 0), (3, 1), (3, 2)]
        );
        for f in b.filters() {
            let n: f64 = f.samples.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
            assert!(f.norm > 0.0);
        }
    }

    #[test]
    fn single_ring_basis_is_a_real_bump() {
        let spec = FrequencySpec::new(&[(0, 0)]).unwrap();
        let b = build_basis(&spec, 3, 0.6, true).unwrap();
        assert_eq!(b.len(), 1);
        let f = &b.filters()[0];
        assert!(f.samples.iter().all(|z| z.im == 0.0));
        // Peak at the center, symmetric corners.
        assert!(f.samples[4].re > f.samples[1].re);
        assert_eq!(f.samples[0].re, f.samples[8].re);
    }

    #[test]
    fn nonzero_frequencies_sum_to_zero() {
        let b = default_basis(false);
        for f in b.filters().iter().filter(|f| f.frequency >= 1) {
            let s: Complex64 = f.samples.iter().sum();
            assert!(s.norm() < 1e-10, "j={} k={} sum={s}", f.ring, f.frequency);
        }
    }

    #[test]
    fn sample_formula_matches_definition() {
        let b = default_basis(false);
        let f = &b.filters()[7]; // (2, 3)
        assert_eq!((f.ring, f.frequency), (2, 3));
        // Cell (x=5, y=1): u = 2 + 2i, |u| = 2 sqrt 2, arg = pi/4.
        let r = 8f64.sqrt();
        let expected = Complex64::from_polar((-(r - 2.0).powi(2) / 0.72).exp(), 3.0 * PI / 4.0);
        assert!((f.samples[7 + 5] - expected).norm() < 1e-15);
    }

    #[test]
    fn rings_must_fit_the_grid() {
        let spec = FrequencySpec::default_7x7();
        assert!(build_basis(&spec, 5, 0.6, true).is_err());
        assert!(build_basis(&spec, 6, 0.6, true).is_err());
        assert!(build_basis(&FrequencySpec::default_5x5(), 5, 0.6, true).is_ok());
    }

    #[test]
    fn spec_validation() {
        assert!(FrequencySpec::new(&[]).is_err());
        assert!(FrequencySpec::new(&[(1, 0)]).is_err());
        assert!(FrequencySpec::new(&[(0, 0), (2, 1)]).is_err());
        let s = FrequencySpec::parse("0:0, 1:2,2:3,3:2").unwrap();
        assert_eq!(s, FrequencySpec::default_7x7());
        assert_eq!(s.to_string(), "0:0,1:2,2:3,3:2");
    }

    #[test]
    fn rotation_special_cases() {
        let b = default_basis(true);
        let k0 = &b.filters()[0];
        assert_eq!(rotate_atomic(k0, PI / 3.0), k0.samples);
        for f in b.filters() {
            let r = rotate_atomic(f, 2.0 * PI);
            for (a, z) in r.iter().zip(&f.samples) {
                assert!((a - z).norm() < 1e-14);
            }
        }
        let k2 = b.filters().iter().find(|f| f.ring == 1 && f.frequency == 2).unwrap();
        let r = rotate_atomic(k2, PI / 2.0);
        for (a, z) in r.iter().zip(&k2.samples) {
            assert!((a + z).norm() < 1e-15);
        }
    }

    #[test]
    fn rotation_of_samples_matches_grid_rotation() {
        // Rotating by 90 degrees as a phase equals permuting the grid.
        let b = default_basis(true);
        let k = b.size();
        for f in b.filters() {
            let rotated = rotate_atomic(f, PI / 2.0);
            for y in 0..k {
                for x in 0..k {
                    // Counter-clockwise: new[y][x] = old[x][k-1-y].
                    let permuted = f.samples[x * k + (k - 1 - y)];
                    assert!((rotated[y * k + x] - permuted).norm() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn synthesis_cases() {
        let b = default_basis(true);
        let spec = FrequencySpec::default_7x7();
        let mut w = SteerableWeights::zeros(&spec, 1);
        assert!(synthesize_filter(w.slice(0), &b, 0.3).unwrap().iter().all(|&v| v == 0.0));

        w.set(0, 0, Complex64::new(1.0, 0.0));
        let a = synthesize_filter(w.slice(0), &b, 0.0).unwrap();
        let c = synthesize_filter(w.slice(0), &b, 1.234).unwrap();
        assert_eq!(a, c);
        let bump: Vec<f64> = b.filters()[0].samples.iter().map(|z| z.re).collect();
        assert_eq!(a, bump);

        let mut w = SteerableWeights::zeros(&spec, 1);
        let idx = spec.pairs().iter().position(|&p| p == (1, 1)).unwrap();
        w.set(0, idx, Complex64::new(1.0, 0.0));
        let a = synthesize_filter(w.slice(0), &b, 0.0).unwrap();
        let c = synthesize_filter(w.slice(0), &b, PI).unwrap();
        for (x, y) in a.iter().zip(&c) {
            assert!((x + y).abs() < 1e-15);
        }

        assert!(synthesize_filter(&w.slice(0)[..3], &b, 0.0).is_err());
    }

    #[test]
    fn zero_frequency_imaginary_parts_are_cleared() {
        let spec = FrequencySpec::default_7x7();
        let coeffs = vec![Complex64::new(1.0, 2.0); spec.num_pairs()];
        let w = SteerableWeights::new(&spec, 1, coeffs).unwrap();
        assert_eq!(w.slice(0)[0], Complex64::new(1.0, 0.0));
        assert_eq!(w.slice(0)[2], Complex64::new(1.0, 2.0));
        assert_eq!(w.real_param_count(), 18);
    }

    #[test]
    fn parameter_counts() {
        let spec = FrequencySpec::default_7x7();
        assert_eq!(param_count(&spec, 1, false), 18);
        assert_eq!(param_count(&spec, 8, false), 18);
        assert_eq!(param_count(&FrequencySpec::new(&[(0, 0)]).unwrap(), 8, true), 8);
        assert_eq!(param_count(&spec, 8, true), 144);
        assert!(param_count(&spec, 1, false) < 49);
        assert_eq!(param_count(&FrequencySpec::default_5x5(), 1, false), 11);
    }

    #[test]
    fn pgm_export_names_and_flat_imaginary() {
        let dir = tempfile::tempdir().unwrap();
        let b = default_basis(true);
        let files = b.export_pgm(dir.path()).unwrap();
        assert_eq!(files.len(), 22);
        let im = dir.path().join("basis_j0_k0_im.pgm");
        let (w, h, px) = pgm::read(&im).unwrap();
        assert_eq!((w, h), (7, 7));
        assert!(px.iter().all(|&p| p == 128));
        let (_, _, px) = pgm::read(&dir.path().join("basis_j2_k3_re.pgm")).unwrap();
        assert_eq!(*px.iter().min().unwrap(), 0);
        assert_eq!(*px.iter().max().unwrap(), 255);
    }
}
