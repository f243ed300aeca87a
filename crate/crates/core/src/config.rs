//! Pipeline configuration (TOML or JSON).
//!
//! Every section has defaults; the defaults describe the desk-scale setup
//! (20 phantoms of 64³ voxels, 96×96 detector, 360 angles).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::Strategy;
use crate::error::{Error, Result};
use crate::evalmetrics::{min_component_px_for, DetectionParams};
use crate::labeling::Connectivity;
use crate::phantom::PhantomParams;
use crate::recon::SirtConfig;
use crate::xray::geometry::{LAB_SOURCE_DETECTOR_CM, LAB_SOURCE_ORIGIN_CM};
use crate::xray::physics::{self, MaterialAttenuation, Spectrum};
use crate::xray::{ConeBeamGeometry, ScanSettings, VolumeGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub count: usize,
    pub volume_dim: usize,
    pub cube_dim: usize,
    pub ellipsoid_radius_min: f64,
    pub ellipsoid_radius_max: f64,
    pub foreign_count_distribution: Vec<(u32, f64)>,
    pub voxel_size_cm: f64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        let p = PhantomParams::desk();
        Self {
            count: 20,
            volume_dim: p.volume_dim,
            cube_dim: p.cube_dim,
            ellipsoid_radius_min: p.ellipsoid_radius_min,
            ellipsoid_radius_max: p.ellipsoid_radius_max,
            foreign_count_distribution: p.foreign_count_distribution,
            voxel_size_cm: p.voxel_size_cm,
        }
    }
}

impl PhantomSection {
    pub fn params(&self, seed: u64) -> PhantomParams {
        PhantomParams {
            volume_dim: self.volume_dim,
            cube_dim: self.cube_dim,
            ellipsoid_radius_min: self.ellipsoid_radius_min,
            ellipsoid_radius_max: self.ellipsoid_radius_max,
            foreign_count_distribution: self.foreign_count_distribution.clone(),
            seed,
            voxel_size_cm: self.voxel_size_cm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySection {
    pub detector_rows: usize,
    pub detector_cols: usize,
    pub n_angles: usize,
    pub source_origin_cm: f64,
    pub source_detector_cm: f64,
    /// Defaults to the pitch whose footprint at the axis spans the volume.
    pub pixel_size_cm: Option<f64>,
    pub supersampling: usize,
}

impl Default for GeometrySection {
    fn default() -> Self {
        Self {
            detector_rows: 96,
            detector_cols: 96,
            n_angles: 360,
            source_origin_cm: LAB_SOURCE_ORIGIN_CM,
            source_detector_cm: LAB_SOURCE_DETECTOR_CM,
            pixel_size_cm: None,
            supersampling: 1,
        }
    }
}

impl GeometrySection {
    pub fn build(&self, volume_width_cm: f64) -> ConeBeamGeometry {
        let dso = self.source_origin_cm;
        let dod = self.source_detector_cm - self.source_origin_cm;
        let pixel = self
            .pixel_size_cm
            .unwrap_or(volume_width_cm * self.source_detector_cm / dso / self.detector_cols as f64);
        ConeBeamGeometry {
            source_origin_dist: dso,
            origin_detector_dist: dod,
            detector_rows: self.detector_rows,
            detector_cols: self.detector_cols,
            pixel_size: pixel,
            angles: ConeBeamGeometry::full_turn_angles(self.n_angles),
            supersampling: self.supersampling,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumSection {
    /// Two-column CSV `energy_kev,weight`; overrides the uniform range.
    pub csv: Option<PathBuf>,
    pub min_kev: f64,
    pub max_kev: f64,
    pub step_kev: f64,
    pub total_flux: f64,
    /// Two-column CSV `energy_kev,mu_per_cm` tables for labels 1 and 2.
    pub base_material_csv: Option<PathBuf>,
    pub foreign_material_csv: Option<PathBuf>,
}

impl Default for SpectrumSection {
    fn default() -> Self {
        Self {
            csv: None,
            min_kev: 15.0,
            max_kev: 90.0,
            step_kev: 1.0,
            total_flux: physics::DEFAULT_TOTAL_FLUX,
            base_material_csv: None,
            foreign_material_csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExposureSection {
    pub seconds: f64,
    pub flat_realizations: usize,
    pub noise: bool,
}

impl Default for ExposureSection {
    fn default() -> Self {
        Self {
            seconds: physics::DEFAULT_EXPOSURE_S,
            flat_realizations: 10,
            noise: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentMethod {
    /// Otsu over the object voxels (air split off first).
    Otsu,
    /// Otsu over the whole volume histogram.
    OtsuGlobal,
    /// The configured `theta`.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationSection {
    pub method: SegmentMethod,
    /// Threshold in 1/cm for `fixed`.
    pub theta: Option<f64>,
    /// Extra thresholds segmented alongside the main one (1/cm).
    pub sweep: Vec<f64>,
    /// Drop 3D components smaller than this many voxels.
    pub min_component_voxels: Option<usize>,
}

impl Default for SegmentationSection {
    fn default() -> Self {
        Self {
            method: SegmentMethod::Otsu,
            theta: None,
            sweep: Vec::new(),
            min_component_voxels: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GtMode {
    Workflow,
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundTruthSection {
    /// Masks used as training targets.
    pub mode: GtMode,
    /// Also project the phantoms' own labels for comparison.
    pub absolute_reference: bool,
    /// Resize exported pairs to `[rows, cols]` (downscaling only).
    pub resize: Option<[usize; 2]>,
}

impl Default for GroundTruthSection {
    fn default() -> Self {
        Self {
            mode: GtMode::Workflow,
            absolute_reference: true,
            resize: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub strategy: Strategy,
    /// Objects `0..train_objects` form the training pool; the rest are test objects.
    pub train_objects: usize,
    /// Objects included in the training set.
    pub included: usize,
    pub total: usize,
    /// Fraction drawn from the first pool in `mixed` mode.
    pub ratio: f64,
    /// Training-pool objects `0..mixed_split` form the first pool in `mixed` mode.
    pub mixed_split: Option<usize>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            strategy: Strategy::Workflow,
            train_objects: 10,
            included: 10,
            total: 360,
            ratio: 0.5,
            mixed_split: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub enabled: bool,
    pub eta: f64,
    pub delta: f64,
    /// Defaults to 0.05 % of the image.
    pub min_size: Option<usize>,
    pub connectivity: Connectivity,
    /// Externally produced masks to score; defaults to the workflow masks.
    pub predictions: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            enabled: true,
            eta: 0.3,
            delta: 0.3,
            min_size: None,
            connectivity: Connectivity::Four,
            predictions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub master_seed: u64,
    pub phantom: PhantomSection,
    pub geometry: GeometrySection,
    pub spectrum: SpectrumSection,
    pub exposure: ExposureSection,
    pub sirt: SirtConfig,
    pub segmentation: SegmentationSection,
    pub ground_truth: GroundTruthSection,
    pub dataset: DatasetSection,
    pub eval: EvalSection,
}

impl PipelineConfig {
    /// Reads TOML, or JSON when the extension is `.json`. Relative paths in
    /// the file resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = if path.extension().and_then(|e| e.to_str()) == Some("json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text)?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.spectrum.csv,
            &mut cfg.spectrum.base_material_csv,
            &mut cfg.spectrum.foreign_material_csv,
            &mut cfg.eval.predictions,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        crate::io::hash_json(self)
    }

    pub fn phantom_params(&self) -> PhantomParams {
        self.phantom.params(self.master_seed)
    }

    pub fn volume_grid(&self) -> VolumeGrid {
        let p = self.phantom_params();
        VolumeGrid::new(p.dims(), p.voxel_size_cm)
    }

    pub fn geometry(&self) -> ConeBeamGeometry {
        let p = &self.phantom;
        self.geometry.build(p.volume_dim as f64 * p.voxel_size_cm)
    }

    pub fn scan_settings(&self) -> Result<ScanSettings> {
        let s = &self.spectrum;
        let spectrum = match &s.csv {
            Some(path) => {
                let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
                Spectrum::from_csv(f, s.total_flux)?
            }
            None => Spectrum::uniform(s.min_kev, s.max_kev, s.step_kev, s.total_flux),
        };
        let load = |id: u8, path: &Option<PathBuf>, fallback: fn() -> MaterialAttenuation| -> Result<MaterialAttenuation> {
            match path {
                Some(p) => {
                    let f = std::fs::File::open(p).map_err(|e| Error::io(p, e))?;
                    MaterialAttenuation::from_csv(id, f)
                }
                None => Ok(fallback()),
            }
        };
        Ok(ScanSettings {
            spectrum,
            materials: vec![
                load(crate::grid::BASE, &s.base_material_csv, MaterialAttenuation::tissue)?,
                load(crate::grid::FOREIGN, &s.foreign_material_csv, MaterialAttenuation::bone)?,
            ],
            exposure_s: self.exposure.seconds,
            flat_realizations: self.exposure.flat_realizations,
            noise: self.exposure.noise,
            master_seed: self.master_seed,
        })
    }

    /// Image size the exported pairs and the evaluation work at.
    pub fn export_shape(&self) -> (usize, usize) {
        self.ground_truth
            .resize
            .map(|[r, c]| (r, c))
            .unwrap_or((self.geometry.detector_rows, self.geometry.detector_cols))
    }

    pub fn detection_params(&self) -> DetectionParams {
        let (r, c) = self.export_shape();
        DetectionParams {
            eta: self.eval.eta,
            delta: self.eval.delta,
            min_component_px: self.eval.min_size.unwrap_or_else(|| min_component_px_for(r, c)),
            connectivity: self.eval.connectivity,
        }
    }

    /// Cross-section checks run before any stage.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Param(m) => Error::Config(m),
            e => e,
        };
        if self.phantom.count == 0 {
            return Err(Error::Config("phantom.count must be at least 1".into()));
        }
        self.phantom_params().validate().map_err(cfg)?;
        let g = self.geometry();
        g.validate()?;
        if self.geometry.source_detector_cm <= self.geometry.source_origin_cm {
            return Err(Error::Config("the detector must lie beyond the rotation axis".into()));
        }
        crate::xray::Projector::new(g, self.volume_grid()).map_err(cfg)?;
        let settings = self.scan_settings()?;
        settings.spectrum.validate()?;
        let (lo, hi) = (settings.spectrum.energies[0], *settings.spectrum.energies.last().unwrap());
        for m in &settings.materials {
            if !m.covers(lo, hi) {
                return Err(Error::Config(format!(
                    "material {} table does not cover {lo}–{hi} keV",
                    m.material_id
                )));
            }
        }
        if !(self.exposure.seconds > 0.0) || self.exposure.flat_realizations == 0 {
            return Err(Error::Config("exposure must be positive with at least one flatfield".into()));
        }
        self.sirt.validate().map_err(cfg)?;
        let seg = &self.segmentation;
        if seg.method == SegmentMethod::Fixed && seg.theta.is_none() {
            return Err(Error::Config("segmentation.method = fixed needs segmentation.theta".into()));
        }
        for t in seg.theta.iter().chain(&seg.sweep) {
            // Thresholds are attenuation in 1/cm; values far below any tissue
            // value usually mean a per-voxel threshold was entered.
            if !t.is_finite() || *t <= 0.0 {
                return Err(Error::Config(format!("threshold {t} must be a positive value in 1/cm")));
            }
        }
        if let Some([r, c]) = self.ground_truth.resize {
            if r == 0 || c == 0 || r > self.geometry.detector_rows || c > self.geometry.detector_cols {
                return Err(Error::Config(format!(
                    "resize target {r}×{c} must not exceed the {}×{} detector",
                    self.geometry.detector_rows, self.geometry.detector_cols
                )));
            }
        }
        if self.ground_truth.mode == GtMode::Absolute && !self.ground_truth.absolute_reference {
            return Err(Error::Config("absolute ground truth needs absolute_reference = true".into()));
        }
        let d = &self.dataset;
        if d.train_objects == 0 || d.train_objects > self.phantom.count {
            return Err(Error::Config(format!(
                "dataset.train_objects = {} must lie in 1..={}",
                d.train_objects, self.phantom.count
            )));
        }
        if d.included == 0 || d.included > d.train_objects {
            return Err(Error::Config(format!(
                "dataset.included = {} must lie in 1..={}",
                d.included, d.train_objects
            )));
        }
        match d.strategy {
            Strategy::Workflow | Strategy::Mixed => {
                if d.total < d.included || d.total > d.included * self.geometry.n_angles {
                    return Err(Error::Config(format!(
                        "dataset.total = {} cannot be drawn from {} objects of {} angles",
                        d.total, d.included, self.geometry.n_angles
                    )));
                }
            }
            Strategy::Manual if d.included < 2 => {
                return Err(Error::Config("manual sampling needs dataset.included ≥ 2".into()));
            }
            Strategy::Test => return Err(Error::Config("`test` is not a training strategy".into())),
            Strategy::Manual => {}
        }
        if d.strategy == Strategy::Mixed {
            let split = d.mixed_split.unwrap_or(d.train_objects / 2);
            if split == 0 || split >= d.train_objects {
                return Err(Error::Config("dataset.mixed_split must leave both pools non-empty".into()));
            }
        }
        self.detection_params().validate().map_err(cfg)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let back: PipelineConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.detection_params().min_component_px, 5);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "master_seed = 9\n[sirt]\niterations = 5\n").unwrap();
        let c = PipelineConfig::load(&p).unwrap();
        assert_eq!(c.master_seed, 9);
        assert_eq!(c.sirt.iterations, 5);
        assert_eq!(c.phantom, PhantomSection::default());
        let j = dir.path().join("c.json");
        std::fs::write(&j, r#"{"master_seed": 4, "geometry": {"n_angles": 90}}"#).unwrap();
        assert_eq!(PipelineConfig::load(&j).unwrap().geometry.n_angles, 90);
        std::fs::write(&p, "bogus = 1\n").unwrap();
        assert!(PipelineConfig::load(&p).is_err());
    }

    #[test]
    fn cross_section_checks() {
        let mut c = PipelineConfig::default();
        c.ground_truth.resize = Some([128, 128]);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = PipelineConfig::default();
        c.segmentation.method = SegmentMethod::Fixed;
        assert!(c.validate().is_err());
        c.segmentation.theta = Some(0.4);
        c.validate().unwrap();
        let mut c = PipelineConfig::default();
        c.dataset.train_objects = 30;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.phantom.cube_dim = 200;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = PipelineConfig::default();
        c.spectrum.max_kev = 500.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
