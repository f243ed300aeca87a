//! Simulated acquisition: per-material projection, polychromatic
//! attenuation, Poisson noise and flat/dark correction for every angle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LabeledVolume;
use crate::rng::Domain;

use super::physics::{self, MaterialAttenuation, Spectrum};
use super::projector::Projector;

/// One corrected projection image.
#[derive(Debug, Clone, PartialEq)]
pub struct Radiograph {
    pub rows: usize,
    pub cols: usize,
    pub angle_index: usize,
    pub object_id: u32,
    /// Absorbance, row-major.
    pub values: Vec<f64>,
}

/// All radiographs of one object, angle-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RadiographStack {
    pub object_id: u32,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RadiographStack {
    pub fn n_angles(&self) -> usize {
        self.data.len().checked_div(self.rows * self.cols).unwrap_or(0)
    }

    pub fn angle(&self, a: usize) -> &[f64] {
        let ppa = self.rows * self.cols;
        &self.data[a * ppa..(a + 1) * ppa]
    }

    pub fn radiograph(&self, a: usize) -> Radiograph {
        Radiograph {
            rows: self.rows,
            cols: self.cols,
            angle_index: a,
            object_id: self.object_id,
            values: self.angle(a).to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSettings {
    pub spectrum: Spectrum,
    pub materials: Vec<MaterialAttenuation>,
    pub exposure_s: f64,
    /// Noisy flatfields averaged into the reference image.
    pub flat_realizations: usize,
    /// Disable to obtain expected-value (noise-free) radiographs.
    pub noise: bool,
    pub master_seed: u64,
}

impl Default for ScanSettings {
    fn default() -> Self {
        Self {
            spectrum: Spectrum::default(),
            materials: physics::default_materials(),
            exposure_s: physics::DEFAULT_EXPOSURE_S,
            flat_realizations: 10,
            noise: true,
            master_seed: 0,
        }
    }
}

/// Flatfield of `object`'s scan: the open-beam count averaged over
/// `flat_realizations` noisy exposures (or the expected value when noise is
/// off). The darkfield is identically zero.
pub fn simulate_flatfield(pixels: usize, settings: &ScanSettings, object: u32) -> Result<Vec<f64>> {
    let open = physics::expected_counts(&[], &settings.spectrum, &settings.materials, settings.exposure_s)?;
    let level = open.first().copied().unwrap_or({
        settings.spectrum.total_flux * settings.exposure_s
    });
    let expected = vec![level; pixels];
    if !settings.noise {
        return Ok(expected);
    }
    let n = settings.flat_realizations.max(1);
    let mut sum = vec![0.0; pixels];
    for r in 0..n {
        let draw = physics::poisson_noise(
            &expected,
            settings.master_seed,
            Domain::Flatfield,
            &[object as u64, r as u64],
        )?;
        sum.iter_mut().zip(&draw).for_each(|(s, d)| *s += d);
    }
    Ok(sum.into_iter().map(|s| s / n as f64).collect())
}

/// Simulates the complete scan of one phantom.
pub fn simulate_scan(
    projector: &Projector,
    phantom: &LabeledVolume,
    object_id: u32,
    settings: &ScanSettings,
) -> Result<RadiographStack> {
    settings.spectrum.validate()?;
    let ppa = projector.pixels_per_angle();
    let flat = simulate_flatfield(ppa, settings, object_id)?;
    let dark = vec![0.0; ppa];
    let n_labels = settings
        .materials
        .iter()
        .map(|m| m.material_id as usize + 1)
        .max()
        .unwrap_or(1)
        .max(crate::grid::FOREIGN as usize + 1);
    let mut data = vec![0.0; projector.n_rays()];
    data.par_chunks_mut(ppa)
        .enumerate()
        .try_for_each(|(a, out)| -> Result<()> {
            let lengths = projector.path_lengths_by_label(phantom, a, n_labels)?;
            let paths: Vec<(u8, &[f64])> = lengths
                .iter()
                .enumerate()
                .skip(1)
                .map(|(m, img)| (m as u8, img.as_slice()))
                .collect();
            let expected = physics::expected_counts(&paths, &settings.spectrum, &settings.materials, settings.exposure_s)?;
            let counts = if settings.noise {
                physics::add_poisson(&expected, settings.master_seed, object_id, a)?
            } else {
                expected
            };
            let corrected = physics::correct_and_log(&counts, &flat, &dark)?;
            out.copy_from_slice(&corrected);
            Ok(())
        })
        .map_err(|e| e.for_object(object_id))?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("object {object_id}: non-finite radiograph value")));
    }
    Ok(RadiographStack {
        object_id,
        rows: projector.geom.detector_rows,
        cols: projector.geom.detector_cols,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{BinaryVolume, Dims3};
    use crate::xray::geometry::{ConeBeamGeometry, VolumeGrid};

    fn setup() -> (Projector, LabeledVolume) {
        let grid = VolumeGrid::new(Dims3::cubic(16), 0.1);
        let p = Projector::new(ConeBeamGeometry::lab(12, 12, 6, 1.6), grid).unwrap();
        let cube = BinaryVolume::from_fn(grid.dims, |i, j, k| {
            [i, j, k].iter().all(|&c| (4..12).contains(&c))
        });
        let mut vol = LabeledVolume::from_binary(&cube, 0.1);
        vol.labels[grid.dims.index(8, 8, 8)] = crate::grid::FOREIGN;
        (p, vol)
    }

    #[test]
    fn noiseless_scan_of_empty_volume_is_zero() {
        let (p, _) = setup();
        let empty = LabeledVolume::from_binary(&BinaryVolume::empty(p.grid.dims), 0.1);
        let settings = ScanSettings {
            noise: false,
            ..ScanSettings::default()
        };
        let stack = simulate_scan(&p, &empty, 0, &settings).unwrap();
        assert_eq!(stack.n_angles(), 6);
        assert!(stack.data.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn scan_is_deterministic_and_seed_dependent() {
        let (p, vol) = setup();
        let s = ScanSettings {
            master_seed: 9,
            ..ScanSettings::default()
        };
        let a = simulate_scan(&p, &vol, 3, &s).unwrap();
        let b = simulate_scan(&p, &vol, 3, &s).unwrap();
        assert_eq!(a, b);
        let c = simulate_scan(&p, &vol, 4, &s).unwrap();
        assert_ne!(a, c);
        // The object attenuates: central pixels absorb more than the border.
        let img = a.angle(0);
        assert!(img[6 * 12 + 6] > 0.3);
    }

    #[test]
    fn flatfield_averages_to_open_beam_level() {
        let s = ScanSettings::default();
        let flat = simulate_flatfield(4096, &s, 0).unwrap();
        let mean = flat.iter().sum::<f64>() / flat.len() as f64;
        assert!((mean - 500.0).abs() < 1.0, "{mean}");
    }
}
