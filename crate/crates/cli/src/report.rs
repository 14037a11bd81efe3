//! Rotation-variance diagnostics.
//!
//! An input is rotated by each multiple of 45 degrees, pushed through the
//! network, and the captured features are rotated back (spatially, and
//! cyclically along the orientation axis). For an equivariant network the
//! aligned copies agree, so their per-pixel variance measures how far the
//! network is from equivariance.

use std::f64::consts::FRAC_PI_4;
use std::fmt::Write as _;
use std::path::Path;

use dsf_core::gconv::{gshift_rot, BnMode, GFeatureMap};
use dsf_core::model::{Model, ModelConfig};
use dsf_core::pgm;
use dsf_core::tensor::{rot90, rotate_interp, Tensor4};
use dsf_core::{Error, Result};

pub const STEPS: usize = 8;
pub const PROBES: [&str; 3] = ["feature_map_a", "feature_map_b", "output"];

/// Rotates `t` counter-clockwise by `m` eighth turns: exact for even `m`,
/// bilinear otherwise.
pub fn rotate_steps(t: &Tensor4, m: i64) -> Tensor4 {
    if m % 2 == 0 {
        rot90(t, m / 2)
    } else {
        rotate_interp(t, m as f64 * FRAC_PI_4)
    }
}

/// Undoes the effect of an `m`-eighth-turn input rotation on a G-feature
/// map. Needs `n` to contain that rotation unless `n == 1`.
pub fn unrotate(f: &GFeatureMap, m: i64) -> Result<GFeatureMap> {
    if f.orientations() == 1 {
        return GFeatureMap::new(rotate_steps(f.tensor(), -m), 1);
    }
    let turns = m * f.orientations() as i64;
    if turns % STEPS as i64 != 0 {
        return Err(Error::InvalidArgument(format!("C{} does not contain a rotation by {m} x 45 degrees", f.orientations())));
    }
    Ok(gshift_rot(f, -turns / STEPS as i64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceStats {
    pub mean: f64,
    pub max: f64,
}

/// Per-pixel variance across aligned copies, averaged over planes.
pub fn variance_map(copies: &[Tensor4]) -> Vec<f64> {
    let [_, c, h, w] = copies[0].shape();
    let k = copies.len() as f64;
    let area = h * w;
    let mut map = vec![0.0; area];
    for p in 0..c {
        for (i, slot) in map.iter_mut().enumerate() {
            let mean = copies.iter().map(|t| t.plane(0, p)[i]).sum::<f64>() / k;
            let var = copies.iter().map(|t| (t.plane(0, p)[i] - mean).powi(2)).sum::<f64>() / k;
            *slot += var / c as f64;
        }
    }
    map
}

/// Statistics over the pixels inside the inscribed disk when `disk` is set
/// (corners are clipped by non-grid rotations), otherwise over all pixels.
pub fn stats(map: &[f64], h: usize, w: usize, disk: bool) -> VarianceStats {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let radius = cy.min(cx);
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut max = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let inside = !disk || ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt() <= radius + 1e-9;
            if inside {
                let v = map[y * w + x];
                sum += v;
                max = max.max(v);
                count += 1;
            }
        }
    }
    VarianceStats { mean: sum / count.max(1) as f64, max }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub name: &'static str,
    pub height: usize,
    pub width: usize,
    /// Quarter turns only; alignment is exact.
    pub exact: VarianceStats,
    /// All eight eighth turns; inscribed disk only.
    pub full: VarianceStats,
    pub full_map: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelReport {
    pub label: String,
    pub n: usize,
    pub probes: Vec<ProbeReport>,
}

impl ModelReport {
    pub fn probe(&self, name: &str) -> Option<&ProbeReport> {
        self.probes.iter().find(|p| p.name == name)
    }

    /// Largest exact-subset mean over the two feature probes.
    pub fn exact_feature_mean(&self) -> f64 {
        self.probes[..2].iter().map(|p| p.exact.mean).fold(0.0, f64::max)
    }

    /// Mean of the full-protocol means of the two feature probes.
    pub fn full_feature_mean(&self) -> f64 {
        self.probes[..2].iter().map(|p| p.full.mean).sum::<f64>() / 2.0
    }
}

/// Runs the rotation protocol on one `(1, C, H, W)` image.
pub fn analyse(model: &Model, image: &Tensor4, label: &str) -> Result<ModelReport> {
    let n = model.config().n;
    if n != 1 && n % STEPS != 0 {
        return Err(Error::Config(format!("the eight-step protocol needs n divisible by 8 (or n = 1), got {n}")));
    }
    let mut aligned: [Vec<Tensor4>; 3] = Default::default();
    for m in 0..STEPS as i64 {
        let (out, a, b) = model.inspect(&rotate_steps(image, m), BnMode::Eval)?;
        aligned[0].push(unrotate(&a, m)?.into_tensor());
        aligned[1].push(unrotate(&b, m)?.into_tensor());
        aligned[2].push(unrotate(&GFeatureMap::new(out, 1)?, m)?.into_tensor());
    }
    let probes = PROBES
        .iter()
        .zip(aligned)
        .map(|(&name, copies)| {
            let (h, w) = (copies[0].height(), copies[0].width());
            let quarter: Vec<Tensor4> = copies.iter().step_by(2).cloned().collect();
            let full_map = variance_map(&copies);
            ProbeReport {
                name,
                height: h,
                width: w,
                exact: stats(&variance_map(&quarter), h, w, false),
                full: stats(&full_map, h, w, true),
                full_map,
            }
        })
        .collect();
    Ok(ModelReport { label: label.to_string(), n, probes })
}

/// A plain CNN (`n = 1`) with widths scaled by `sqrt(n)` so its parameter
/// count stays close to that of `config`.
pub fn baseline_config(config: &ModelConfig) -> ModelConfig {
    ModelConfig { n: 1, widths: config.widths.scaled((config.n as f64).sqrt()), ..config.clone() }
}

/// Writes `report.txt` and one variance PGM per probe and model.
pub fn write_report(dir: &Path, image_index: usize, reports: &[&ModelReport]) -> Result<String> {
    std::fs::create_dir_all(dir)?;
    let mut text = String::new();
    writeln!(text, "image_index: {image_index}").expect("write to string");
    for r in reports {
        writeln!(text, "[{}] n = {}", r.label, r.n).expect("write to string");
        for p in &r.probes {
            writeln!(
                text,
                "  {}: {}x{} exact_mean {:.3e} exact_max {:.3e} full_mean {:.3e} full_max {:.3e}",
                p.name, p.height, p.width, p.exact.mean, p.exact.max, p.full.mean, p.full.max
            )
            .expect("write to string");
            pgm::write_scaled(&dir.join(format!("{}_{}_variance.pgm", r.label, p.name)), p.width, p.height, &p.full_map)?;
        }
    }
    if let [model, baseline] = reports {
        let ratio = baseline.full_feature_mean() / model.full_feature_mean();
        writeln!(text, "baseline_to_model_variance_ratio: {ratio:.3e}").expect("write to string");
    }
    std::fs::write(dir.join("report.txt"), &text)?;
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_of_identical_copies_is_zero() {
        let t = Tensor4::from_fn([1, 2, 3, 3], |_, c, y, x| (c + y * x) as f64);
        let map = variance_map(&[t.clone(), t.clone(), t]);
        assert!(map.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn variance_and_disk_stats() {
        let a = Tensor4::filled([1, 1, 3, 3], 1.0);
        let b = Tensor4::filled([1, 1, 3, 3], 3.0);
        let map = variance_map(&[a, b]);
        assert!(map.iter().all(|&v| v == 1.0));
        let mut m = map.clone();
        m[0] = 10.0;
        assert_eq!(stats(&m, 3, 3, true).max, 1.0);
        assert_eq!(stats(&m, 3, 3, false).max, 10.0);
    }

    #[test]
    fn unrotate_inverts_quarter_turns() {
        let t = Tensor4::from_fn([1, 8, 5, 5], |_, p, y, x| (p * 31 + y * 7 + x) as f64);
        let f = GFeatureMap::new(t, 8).unwrap();
        for m in [0, 2, 4, 6] {
            let back = unrotate(&gshift_rot(&f, m * 8 / 8), m).unwrap();
            assert_eq!(back.max_abs_diff(&f), 0.0);
        }
        let plain = GFeatureMap::new(Tensor4::from_fn([1, 1, 4, 4], |_, _, y, x| (y * 4 + x) as f64), 1).unwrap();
        let rotated = GFeatureMap::new(rot90(plain.tensor(), 1), 1).unwrap();
        assert_eq!(unrotate(&rotated, 2).unwrap(), plain);
        assert!(unrotate(&GFeatureMap::new(Tensor4::zeros([1, 4, 2, 2]), 4).unwrap(), 1).is_err());
    }
}
