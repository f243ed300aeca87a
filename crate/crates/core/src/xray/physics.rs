//! Polychromatic Beer–Lambert forward model, Poisson noise and flat/dark
//! field correction.

use std::io::Read;

use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BASE, FOREIGN};
use crate::rng::{self, Domain};

/// Source spectrum as seen by the detector with no object in the beam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// Bin centres, keV, ascending.
    pub energies: Vec<f64>,
    /// Relative photon counts per bin.
    pub weights: Vec<f64>,
    /// Photons per pixel per second summed over all bins.
    pub total_flux: f64,
}

/// Flux giving ≈500 flatfield counts per pixel at the default exposure.
pub const DEFAULT_TOTAL_FLUX: f64 = 2.5e5;
/// Exposure per radiograph, seconds.
pub const DEFAULT_EXPOSURE_S: f64 = 0.002;

impl Spectrum {
    /// Flat spectrum over `[lo, hi]` keV in bins of `step` keV.
    pub fn uniform(lo: f64, hi: f64, step: f64, total_flux: f64) -> Self {
        let n = ((hi - lo) / step).round() as usize + 1;
        Self {
            energies: (0..n).map(|i| lo + i as f64 * step).collect(),
            weights: vec![1.0; n],
            total_flux,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.energies.is_empty() || self.energies.len() != self.weights.len() {
            return Err(Error::Config("spectrum energies and weights must be non-empty and aligned".into()));
        }
        if self.energies.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("spectrum energies must be ascending".into()));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) || self.weights.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("spectrum weights must be non-negative and not all zero".into()));
        }
        if !(self.total_flux > 0.0) {
            return Err(Error::Config("spectrum flux must be positive".into()));
        }
        Ok(())
    }

    /// Photons per pixel per second in each bin.
    pub fn intensities(&self) -> Vec<f64> {
        let sum: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| self.total_flux * w / sum).collect()
    }

    /// Reads `energy_keV,weight` rows (an optional header row is skipped).
    pub fn from_csv<R: Read>(reader: R, total_flux: f64) -> Result<Self> {
        let rows = read_two_column_csv(reader)?;
        let s = Self {
            energies: rows.iter().map(|r| r.0).collect(),
            weights: rows.iter().map(|r| r.1).collect(),
            total_flux,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn hash(&self) -> String {
        crate::io::hash_json(self)
    }
}

impl Default for Spectrum {
    /// Uniform weights over 1 keV bins from 15 to 90 keV.
    fn default() -> Self {
        Self::uniform(15.0, 90.0, 1.0, DEFAULT_TOTAL_FLUX)
    }
}

fn read_two_column_csv<R: Read>(reader: R) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::Data(format!("csv row {} has fewer than two columns", line + 1)));
        }
        match (rec[0].parse::<f64>(), rec[1].parse::<f64>()) {
            (Ok(a), Ok(b)) => rows.push((a, b)),
            _ if line == 0 => continue,
            _ => return Err(Error::Data(format!("csv row {} is not numeric", line + 1))),
        }
    }
    Ok(rows)
}

/// Linear attenuation coefficient table for one material label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialAttenuation {
    pub material_id: u8,
    /// `(energy keV, μ 1/cm)`, ascending in energy.
    pub table: Vec<(f64, f64)>,
}

/// Mass attenuation coefficients (cm²/g) at 10, 15, 20, 30, 40, 50, 60, 80
/// and 100 keV, after the NIST tables for ICRU-44 soft tissue and cortical
/// bone.
const TABLE_KEV: [f64; 9] = [10.0, 15.0, 20.0, 30.0, 40.0, 50.0, 60.0, 80.0, 100.0];
const SOFT_TISSUE_MASS: [f64; 9] = [5.379, 1.694, 0.8204, 0.3780, 0.2684, 0.2264, 0.2048, 0.1822, 0.1693];
const SOFT_TISSUE_DENSITY: f64 = 1.06;
const CORTICAL_BONE_MASS: [f64; 9] = [28.51, 9.032, 4.001, 1.331, 0.6655, 0.4242, 0.3148, 0.2229, 0.1855];
const CORTICAL_BONE_DENSITY: f64 = 1.92;

impl MaterialAttenuation {
    pub fn new(material_id: u8, table: Vec<(f64, f64)>) -> Result<Self> {
        let m = Self { material_id, table };
        m.validate()?;
        Ok(m)
    }

    fn from_mass(material_id: u8, mass: &[f64; 9], density: f64) -> Self {
        Self {
            material_id,
            table: TABLE_KEV.iter().zip(mass).map(|(&e, &m)| (e, m * density)).collect(),
        }
    }

    /// Soft tissue, used for the base object.
    pub fn tissue() -> Self {
        Self::from_mass(BASE, &SOFT_TISSUE_MASS, SOFT_TISSUE_DENSITY)
    }

    /// Cortical bone, used for foreign objects.
    pub fn bone() -> Self {
        Self::from_mass(FOREIGN, &CORTICAL_BONE_MASS, CORTICAL_BONE_DENSITY)
    }

    pub fn from_csv<R: Read>(material_id: u8, reader: R) -> Result<Self> {
        Self::new(material_id, read_two_column_csv(reader)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.table.is_empty() {
            return Err(Error::Config(format!("material {} has an empty table", self.material_id)));
        }
        if self.table.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Config(format!("material {} energies not ascending", self.material_id)));
        }
        if self.table.iter().any(|&(_, mu)| !(mu >= 0.0)) {
            return Err(Error::Config(format!("material {} has negative μ", self.material_id)));
        }
        Ok(())
    }

    pub fn covers(&self, lo: f64, hi: f64) -> bool {
        match (self.table.first(), self.table.last()) {
            (Some(a), Some(b)) => a.0 <= lo && b.0 >= hi,
            _ => false,
        }
    }

    /// μ at `energy` keV, interpolated linearly in log-log space (linearly
    /// where an endpoint is zero). `None` outside the table.
    pub fn mu_at(&self, energy: f64) -> Option<f64> {
        let t = &self.table;
        if energy < t.first()?.0 || energy > t.last()?.0 {
            return None;
        }
        let hi = t.partition_point(|&(e, _)| e < energy);
        if t[hi].0 == energy {
            return Some(t[hi].1);
        }
        let ((e0, m0), (e1, m1)) = (t[hi - 1], t[hi]);
        if m0 > 0.0 && m1 > 0.0 {
            let f = (energy / e0).ln() / (e1 / e0).ln();
            Some((m0.ln() + f * (m1 / m0).ln()).exp())
        } else {
            let f = (energy - e0) / (e1 - e0);
            Some(m0 + f * (m1 - m0))
        }
    }
}

pub fn default_materials() -> Vec<MaterialAttenuation> {
    vec![MaterialAttenuation::tissue(), MaterialAttenuation::bone()]
}

/// Expected photon counts per pixel,
/// `I(p) = t · Σ_e I0(e) · exp(-Σ_m μ_m(e) · L_m(p))`.
///
/// `paths` pairs a material id with its path-length image (cm).
pub fn expected_counts(
    paths: &[(u8, &[f64])],
    spectrum: &Spectrum,
    materials: &[MaterialAttenuation],
    exposure_s: f64,
) -> Result<Vec<f64>> {
    spectrum.validate()?;
    if !(exposure_s > 0.0) {
        return Err(Error::Param("exposure must be positive".into()));
    }
    let n = paths.first().map(|p| p.1.len()).unwrap_or(0);
    if paths.iter().any(|p| p.1.len() != n) {
        return Err(Error::Config("path-length images differ in size".into()));
    }
    let lo = spectrum.energies[0];
    let hi = *spectrum.energies.last().unwrap();
    // mu[m][e] for every path image.
    let mut mu = Vec::with_capacity(paths.len());
    for &(id, img) in paths {
        let Some(mat) = materials.iter().find(|m| m.material_id == id) else {
            if img.iter().any(|&l| l != 0.0) {
                return Err(Error::Config(format!("no attenuation table for material {id}")));
            }
            continue;
        };
        if !mat.covers(lo, hi) {
            return Err(Error::Config(format!(
                "material {id} table does not span {lo}–{hi} keV"
            )));
        }
        let row: Vec<f64> = spectrum.energies.iter().map(|&e| mat.mu_at(e).unwrap()).collect();
        mu.push((img, row));
    }
    let i0: Vec<f64> = spectrum.intensities().iter().map(|&i| i * exposure_s).collect();
    let mut out = vec![0.0; n];
    for (p, o) in out.iter_mut().enumerate() {
        let mut total = 0.0;
        for (e, &flux) in i0.iter().enumerate() {
            let mut att = 0.0;
            for (img, row) in &mu {
                att += row[e] * img[p];
            }
            total += flux * (-att).exp();
        }
        *o = total;
    }
    Ok(out)
}

/// Replaces every pixel by a Poisson draw of its expected value. Pixel `p`
/// uses the stream keyed by `(master_seed, domain, key..., p)`.
pub fn poisson_noise(counts: &[f64], master_seed: u64, domain: Domain, key: &[u64]) -> Result<Vec<f64>> {
    if let Some(bad) = counts.iter().find(|&&c| !(c >= 0.0) || !c.is_finite()) {
        return Err(Error::Param(format!("expected count {bad} is not a finite non-negative value")));
    }
    let mut path = key.to_vec();
    path.push(0);
    let last = path.len() - 1;
    Ok(counts
        .iter()
        .enumerate()
        .map(|(p, &lambda)| {
            if lambda == 0.0 {
                return 0.0;
            }
            path[last] = p as u64;
            let mut rng = rng::pixel_stream(master_seed, domain, &path);
            Poisson::new(lambda).expect("positive finite rate").sample(&mut rng)
        })
        .collect())
}

/// Measurement noise for radiograph `angle` of `object`.
pub fn add_poisson(counts: &[f64], master_seed: u64, object: u32, angle: usize) -> Result<Vec<f64>> {
    poisson_noise(counts, master_seed, Domain::Noise, &[object as u64, angle as u64])
}

/// Photon floor applied before the logarithm.
pub const LOG_FLOOR: f64 = 1.0;

/// `-ln(max(noisy - dark, 1) / (flat - dark))`. Negative absorbance caused
/// by noise is kept.
pub fn correct_and_log(noisy: &[f64], flat: &[f64], dark: &[f64]) -> Result<Vec<f64>> {
    if noisy.len() != flat.len() || flat.len() != dark.len() {
        return Err(Error::Data("noisy, flat and dark images differ in size".into()));
    }
    if let Some(p) = flat.iter().zip(dark).position(|(f, d)| !(f > d)) {
        return Err(Error::Data(format!("flatfield does not exceed darkfield at pixel {p}")));
    }
    Ok(noisy
        .iter()
        .zip(flat.iter().zip(dark))
        .map(|(&n, (&f, &d))| -((n - d).max(LOG_FLOOR) / (f - d)).ln())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mono(mu: f64) -> (Spectrum, Vec<MaterialAttenuation>) {
        let s = Spectrum {
            energies: vec![50.0],
            weights: vec![1.0],
            total_flux: 1000.0,
        };
        let m = MaterialAttenuation::new(1, vec![(40.0, mu), (60.0, mu)]).unwrap();
        (s, vec![m])
    }

    #[test]
    fn zero_paths_give_flatfield_level() {
        let s = Spectrum::default();
        let mats = default_materials();
        let zero = vec![0.0; 16];
        let out = expected_counts(&[(1, &zero), (2, &zero)], &s, &mats, 0.002).unwrap();
        for v in out {
            assert!((v - 500.0).abs() < 1e-9);
        }
    }

    #[test]
    fn monochromatic_beer_lambert() {
        let (s, m) = mono(0.5);
        let out = expected_counts(&[(1, &[1.0])], &s, &m, 0.1).unwrap();
        assert!((out[0] - 100.0 * (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn two_energy_sum() {
        let s = Spectrum {
            energies: vec![20.0, 60.0],
            weights: vec![1.0, 1.0],
            total_flux: 1e4,
        };
        let m = MaterialAttenuation::new(1, vec![(20.0, 2.0), (60.0, 0.2)]).unwrap();
        let t = 0.002;
        let out = expected_counts(&[(1, &[1.0])], &s, &[m], t).unwrap();
        let want = t * ((-2f64).exp() + (-0.2f64).exp()) * 1e4 / 2.0;
        assert!((out[0] - want).abs() < 1e-12);
    }

    #[test]
    fn energy_range_mismatch_is_config_error() {
        let s = Spectrum::default();
        let m = MaterialAttenuation::new(1, vec![(20.0, 1.0), (80.0, 0.2)]).unwrap();
        let r = expected_counts(&[(1, &[1.0])], &s, &[m], 0.002);
        assert!(matches!(r, Err(Error::Config(_))));
        let r = expected_counts(&[(3, &[1.0])], &s, &default_materials(), 0.002);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn increasing_mu_decreases_counts() {
        let s = Spectrum::default();
        let paths = [0.0, 0.5, 1.2, 3.0];
        let base = expected_counts(&[(1, &paths)], &s, &[MaterialAttenuation::tissue()], 0.002).unwrap();
        let mut denser = MaterialAttenuation::tissue();
        denser.table.iter_mut().for_each(|e| e.1 *= 1.1);
        let more = expected_counts(&[(1, &paths)], &s, &[denser], 0.002).unwrap();
        assert_eq!(base[0], more[0]);
        for p in 1..4 {
            assert!(more[p] < base[p]);
        }
    }

    #[test]
    fn log_log_interpolation() {
        let m = MaterialAttenuation::new(1, vec![(10.0, 4.0), (40.0, 0.25)]).unwrap();
        // μ ∝ E^-2 between the points.
        assert!((m.mu_at(20.0).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(m.mu_at(40.0), Some(0.25));
        assert_eq!(m.mu_at(41.0), None);
        let bone = MaterialAttenuation::bone();
        let tissue = MaterialAttenuation::tissue();
        for e in [15.0, 33.0, 62.5, 90.0] {
            assert!(bone.mu_at(e).unwrap() > tissue.mu_at(e).unwrap());
        }
    }

    #[test]
    fn csv_tables() {
        let text = "energy_keV,mu_per_cm\n10, 2.0\n20,1.0\n";
        let m = MaterialAttenuation::from_csv(1, text.as_bytes()).unwrap();
        assert_eq!(m.table, vec![(10.0, 2.0), (20.0, 1.0)]);
        let s = Spectrum::from_csv("15,1\n16,2\n".as_bytes(), 10.0).unwrap();
        assert_eq!(s.intensities(), vec![10.0 / 3.0, 20.0 / 3.0]);
        assert!(Spectrum::from_csv("15,1\n14,2\n".as_bytes(), 10.0).is_err());
    }

    #[test]
    fn poisson_zero_and_negative() {
        let out = add_poisson(&[0.0, 0.0], 1, 0, 0).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
        assert!(matches!(add_poisson(&[-1.0], 1, 0, 0), Err(Error::Param(_))));
    }

    #[test]
    fn poisson_mean_and_dispersion() {
        let lambda = 1e4;
        let out = add_poisson(&vec![lambda; 10_000], 42, 3, 7).unwrap();
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        let se = (lambda / out.len() as f64).sqrt();
        assert!((mean - lambda).abs() < 3.0 * se, "mean {mean}");

        let lambda = 1e3;
        let out = add_poisson(&vec![lambda; 100_000], 43, 0, 0).unwrap();
        let n = out.len() as f64;
        let mean = out.iter().sum::<f64>() / n;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let ratio = var / mean;
        assert!((0.9..=1.1).contains(&ratio), "dispersion {ratio}");
    }

    #[test]
    fn poisson_is_keyed_per_pixel() {
        let counts = vec![300.0; 64];
        let a = add_poisson(&counts, 5, 1, 2).unwrap();
        assert_eq!(a, add_poisson(&counts, 5, 1, 2).unwrap());
        assert_ne!(a, add_poisson(&counts, 5, 1, 3).unwrap());
        // A pixel's draw does not depend on its neighbours.
        let mut other = counts.clone();
        other[10] = 5.0;
        let b = add_poisson(&other, 5, 1, 2).unwrap();
        assert_eq!(a[11], b[11]);
    }

    #[test]
    fn correction_cases() {
        let flat = vec![500.0; 4];
        let dark = vec![0.0; 4];
        assert!(correct_and_log(&flat, &flat, &dark).unwrap().iter().all(|&v| v == 0.0));
        let noisy: Vec<f64> = flat.iter().map(|f| f * (-1f64).exp()).collect();
        for v in correct_and_log(&noisy, &flat, &dark).unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let dark = vec![20.0; 4];
        let out = correct_and_log(&dark, &flat, &dark).unwrap();
        for v in out {
            assert!(v.is_finite());
            assert!((v - 480f64.ln()).abs() < 1e-12);
        }
        assert!(matches!(correct_and_log(&flat, &dark, &flat), Err(Error::Data(_))));
    }
}
