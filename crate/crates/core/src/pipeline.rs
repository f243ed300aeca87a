//! Stage orchestration with on-disk, content-hashed caching.
//!
//! Layout under the output directory:
//!
//! ```text
//! phantoms/obj00000.u8      label grid (x fastest) + obj00000.json sidecar
//! scans/obj00000.f32        corrected radiographs, angle-major, row-major
//! recons/obj00000.f32       SIRT volume (x fastest)
//! segs/obj00000.u8          3D foreign-object mask (0/1)
//! gt/workflow/obj00000.u8   per-angle 2D masks from the segmentation
//! gt/absolute/obj00000.u8   per-angle 2D masks from the phantom labels
//! dataset/                  train/val pairs + manifest.json, test/ + test_manifest.json
//! eval/                     report.json / report.csv
//! summary.json
//! ```
//!
//! Every sidecar records the key its artifact was computed from (a hash of
//! the relevant config section and the upstream content hashes) and the
//! full config hash. A stage whose key matches the sidecar is skipped.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{GtMode, PipelineConfig, SegmentMethod};
use crate::dataset::{self, DatasetManifest, ObjectInfo, Record, Strategy};
use crate::error::{Error, Result};
use crate::evalmetrics::{self, MetricsReport};
use crate::grid::{BinaryVolume, LabeledVolume, ReconVolume};
use crate::gtproject::{self, BinaryMask, Provenance};
use crate::io::{self, object_stem};
use crate::phantom::generate_phantom;
use crate::recon::Sirt;
use crate::volseg;
use crate::xray::{simulate_scan, Projector, RadiographStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Phantom,
    Scan,
    Recon,
    Segment,
    Gt,
    Dataset,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Phantom,
        Stage::Scan,
        Stage::Recon,
        Stage::Segment,
        Stage::Gt,
        Stage::Dataset,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Phantom => "phantom",
            Stage::Scan => "scan",
            Stage::Recon => "recon",
            Stage::Segment => "segment",
            Stage::Gt => "gt",
            Stage::Dataset => "dataset",
            Stage::Eval => "eval",
        }
    }

    pub fn dir(self) -> &'static str {
        match self {
            Stage::Phantom => "phantoms",
            Stage::Scan => "scans",
            Stage::Recon => "recons",
            Stage::Segment => "segs",
            Stage::Gt => "gt",
            Stage::Dataset => "dataset",
            Stage::Eval => "eval",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Sidecar written next to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub stage: Stage,
    pub object_id: Option<u32>,
    /// Hash of everything the artifact was computed from.
    pub key: String,
    /// SHA-256 of the artifact bytes.
    pub content_hash: String,
    pub config_hash: String,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Option<Stage>,
    pub computed: usize,
    pub cached: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSummary {
    pub object_id: u32,
    pub foreign_voxels: usize,
    pub theta: Option<f64>,
    /// Mean over angles of the workflow vs absolute mask Jaccard index.
    pub jaccard: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub stages: Vec<StageReport>,
    pub objects: Vec<ObjectSummary>,
    pub mean_jaccard: Option<f64>,
    pub eval: Option<EvalSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_accuracy: f64,
    pub detection_rate: f64,
    pub false_positive_rate: f64,
    pub mean_jaccard: f64,
    pub n_images: usize,
}

impl RunSummary {
    pub fn computed(&self) -> usize {
        self.stages.iter().map(|s| s.computed).sum()
    }
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub out: PathBuf,
    config_hash: String,
    projector: Projector,
    engine: std::sync::OnceLock<Sirt>,
    pub quiet: bool,
}

fn meta_path(data: &Path) -> PathBuf {
    io::sidecar_path(data)
}

impl Pipeline {
    pub fn new(config: PipelineConfig, out: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let projector = Projector::new(config.geometry(), config.volume_grid())?;
        Ok(Self {
            config_hash: config.hash(),
            config,
            out: out.into(),
            projector,
            engine: std::sync::OnceLock::new(),
            quiet: true,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn object_ids(&self) -> Vec<u32> {
        (0..self.config.phantom.count as u32).collect()
    }

    pub fn path(&self, stage: Stage, object: u32) -> PathBuf {
        let stem = object_stem(object);
        let dir = self.out.join(stage.dir());
        match stage {
            Stage::Phantom | Stage::Segment => dir.join(format!("{stem}.u8")),
            Stage::Scan | Stage::Recon => dir.join(format!("{stem}.f32")),
            Stage::Gt => dir.join("workflow").join(format!("{stem}.u8")),
            Stage::Dataset => dir.join("manifest.json"),
            Stage::Eval => dir.join("report.json"),
        }
    }

    pub fn absolute_gt_path(&self, object: u32) -> PathBuf {
        self.out.join("gt").join("absolute").join(format!("{}.u8", object_stem(object)))
    }

    fn read_meta(&self, data: &Path) -> Result<ArtifactMeta> {
        io::read_json(&meta_path(data))
    }

    /// The sidecar, if the artifact exists and was built from `key`.
    fn up_to_date(&self, data: &Path, key: &str) -> Option<ArtifactMeta> {
        let meta: ArtifactMeta = io::read_json(&meta_path(data)).ok()?;
        (meta.key == key && data.is_file()).then_some(meta)
    }

    fn store(&self, stage: Stage, object: Option<u32>, data: &Path, bytes: &[u8], key: &str, extra: serde_json::Value) -> Result<ArtifactMeta> {
        io::write_bytes(data, bytes)?;
        let meta = ArtifactMeta {
            stage,
            object_id: object,
            key: key.to_owned(),
            content_hash: io::hash_bytes(bytes),
            config_hash: self.config_hash.clone(),
            extra,
        };
        io::write_json(&meta_path(data), &meta)?;
        Ok(meta)
    }

    /// Sidecar of `stage`'s artifact for `object`, or a precondition error
    /// naming the stage.
    fn require(&self, stage: Stage, object: u32) -> Result<ArtifactMeta> {
        let data = self.path(stage, object);
        if !data.is_file() || !meta_path(&data).is_file() {
            return Err(Error::MissingStage {
                stage: stage.name().into(),
                path: data,
            });
        }
        self.read_meta(&data)
    }

    fn engine(&self) -> Result<&Sirt> {
        if let Some(e) = self.engine.get() {
            return Ok(e);
        }
        let e = Sirt::new(self.projector.clone(), self.config.sirt)?;
        Ok(self.engine.get_or_init(|| e))
    }

    // ---- stages -------------------------------------------------------

    fn phantom_key(&self, object: u32) -> String {
        io::hash_parts(&[
            "phantom".into(),
            io::hash_json(&self.config.phantom_params()),
            object.to_string(),
        ])
    }

    fn run_phantoms(&self) -> Result<StageReport> {
        let ids = self.object_ids();
        let params = self.config.phantom_params();
        let flags: Vec<bool> = ids
            .par_iter()
            .map(|&id| -> Result<bool> {
                let path = self.path(Stage::Phantom, id);
                let key = self.phantom_key(id);
                if self.up_to_date(&path, &key).is_some() {
                    return Ok(false);
                }
                let ph = generate_phantom(&params, id).map_err(|e| e.for_object(id))?;
                let v = &ph.volume;
                let extra = serde_json::json!({
                    "dims": v.dims.as_array(),
                    "voxel_size_cm": v.voxel_size,
                    "seed": params.seed,
                    "params": params,
                    "foreign_objects": ph.inclusions.len(),
                    "foreign_voxels": v.count_of(crate::grid::FOREIGN),
                });
                self.store(Stage::Phantom, Some(id), &path, &v.labels, &key, extra)?;
                Ok(true)
            })
            .collect::<Result<_>>()?;
        Ok(tally(Stage::Phantom, &flags))
    }

    fn load_phantom(&self, id: u32) -> Result<LabeledVolume> {
        let path = self.path(Stage::Phantom, id);
        LabeledVolume::from_bytes(self.projector.grid.dims, self.projector.grid.voxel_size, io::read_bytes(&path)?)
    }

    fn scan_key(&self, phantom: &ArtifactMeta) -> Result<String> {
        let s = self.config.scan_settings()?;
        Ok(io::hash_parts(&[
            "scan".into(),
            phantom.content_hash.clone(),
            self.projector.geom.hash(),
            io::hash_json(&s.spectrum),
            io::hash_json(&s.materials),
            io::hash_json(&(s.exposure_s, s.flat_realizations, s.noise, s.master_seed)),
        ]))
    }

    fn run_scans(&self) -> Result<StageReport> {
        let settings = self.config.scan_settings()?;
        let mut flags = Vec::new();
        for id in self.object_ids() {
            let ph_meta = self.require(Stage::Phantom, id)?;
            let path = self.path(Stage::Scan, id);
            let key = self.scan_key(&ph_meta)?;
            if self.up_to_date(&path, &key).is_some() {
                flags.push(false);
                continue;
            }
            self.log(format!("scan {}", object_stem(id)));
            let phantom = self.load_phantom(id)?;
            let stack = simulate_scan(&self.projector, &phantom, id, &settings).map_err(|e| e.for_object(id))?;
            let g = &self.projector.geom;
            let extra = serde_json::json!({
                "rows": g.detector_rows,
                "cols": g.detector_cols,
                "n_angles": g.angles.len(),
                "geometry_hash": g.hash(),
                "geometry": g,
            });
            let bytes = io::f32_bytes(stack.data.iter().map(|&v| v as f32));
            self.store(Stage::Scan, Some(id), &path, &bytes, &key, extra)?;
            flags.push(true);
        }
        Ok(tally(Stage::Scan, &flags))
    }

    pub fn load_scan(&self, id: u32) -> Result<RadiographStack> {
        let meta = self.require(Stage::Scan, id)?;
        let geometry_hash = meta.extra["geometry_hash"].as_str().unwrap_or_default();
        gtproject::ensure_same_geometry(&self.projector, geometry_hash)?;
        let g = &self.projector.geom;
        let data = io::read_f32(&self.path(Stage::Scan, id))?;
        Ok(RadiographStack {
            object_id: id,
            rows: g.detector_rows,
            cols: g.detector_cols,
            data: data.into_iter().map(f64::from).collect(),
        })
    }

    fn run_recons(&self) -> Result<StageReport> {
        let mut flags = Vec::new();
        for id in self.object_ids() {
            let scan = self.require(Stage::Scan, id)?;
            let path = self.path(Stage::Recon, id);
            let key = io::hash_parts(&[
                "recon".into(),
                scan.content_hash.clone(),
                io::hash_json(&self.config.sirt),
                self.projector.geom.hash(),
            ]);
            if self.up_to_date(&path, &key).is_some() {
                flags.push(false);
                continue;
            }
            self.log(format!("recon {}", object_stem(id)));
            let stack = self.load_scan(id)?;
            let rec = self.engine()?.reconstruct(&stack).map_err(|e| e.for_object(id))?;
            let extra = serde_json::json!({
                "dims": rec.dims.as_array(),
                "voxel_size_cm": rec.voxel_size,
                "iterations": self.config.sirt.iterations,
            });
            self.store(Stage::Recon, Some(id), &path, &io::f32_bytes(rec.values.iter().copied()), &key, extra)?;
            flags.push(true);
        }
        Ok(tally(Stage::Recon, &flags))
    }

    pub fn load_recon(&self, id: u32) -> Result<ReconVolume> {
        self.require(Stage::Recon, id)?;
        Ok(ReconVolume {
            dims: self.projector.grid.dims,
            voxel_size: self.projector.grid.voxel_size,
            values: io::read_f32(&self.path(Stage::Recon, id))?,
        })
    }

    fn run_segments(&self) -> Result<StageReport> {
        let seg_cfg = &self.config.segmentation;
        let mut flags = Vec::new();
        for id in self.object_ids() {
            let rec_meta = self.require(Stage::Recon, id)?;
            let path = self.path(Stage::Segment, id);
            let key = io::hash_parts(&["segment".into(), rec_meta.content_hash.clone(), io::hash_json(seg_cfg)]);
            if self.up_to_date(&path, &key).is_some() {
                flags.push(false);
                continue;
            }
            let rec = self.load_recon(id)?;
            let (theta, mask) = segment(&rec, seg_cfg.method, seg_cfg.theta, seg_cfg.min_component_voxels)
                .map_err(|e| e.for_object(id))?;
            let extra = serde_json::json!({
                "theta": theta,
                "method": seg_cfg.method,
                "recon_hash": rec_meta.content_hash,
                "dims": rec.dims.as_array(),
            });
            self.store(Stage::Segment, Some(id), &path, &mask.to_bytes(), &key, extra)?;
            for &t in &seg_cfg.sweep {
                let mut m = volseg::threshold(&rec, t);
                if let Some(min) = seg_cfg.min_component_voxels {
                    m = volseg::remove_small_components(&m, min);
                }
                let p = self
                    .out
                    .join(Stage::Segment.dir())
                    .join(format!("theta_{t}"))
                    .join(format!("{}.u8", object_stem(id)));
                let extra = serde_json::json!({ "theta": t, "method": "fixed", "recon_hash": rec_meta.content_hash });
                self.store(Stage::Segment, Some(id), &p, &m.to_bytes(), &key, extra)?;
            }
            flags.push(true);
        }
        Ok(tally(Stage::Segment, &flags))
    }

    pub fn load_segmentation(&self, id: u32) -> Result<BinaryVolume> {
        self.require(Stage::Segment, id)?;
        BinaryVolume::from_bytes(self.projector.grid.dims, &io::read_bytes(&self.path(Stage::Segment, id))?)
    }

    fn run_gt(&self) -> Result<StageReport> {
        let mut flags = Vec::new();
        let eps = gtproject::default_eps_len(self.projector.grid.voxel_size);
        let geom_hash = self.projector.geom.hash();
        for id in self.object_ids() {
            let seg_meta = self.require(Stage::Segment, id)?;
            if self.config.ground_truth.absolute_reference {
                let ph_meta = self.require(Stage::Phantom, id)?;
                let path = self.absolute_gt_path(id);
                let key = io::hash_parts(&["gt-absolute".into(), ph_meta.content_hash.clone(), geom_hash.clone()]);
                if self.up_to_date(&path, &key).is_none() {
                    let ph = self.load_phantom(id)?;
                    let masks = gtproject::absolute_ground_truth_all(&self.projector, &ph, id)?;
                    self.store(Stage::Gt, Some(id), &path, &pack_masks(&masks), &key, serde_json::json!({
                        "provenance": Provenance::Absolute,
                        "geometry_hash": geom_hash,
                    }))?;
                    flags.push(true);
                } else {
                    flags.push(false);
                }
            }
            let path = self.path(Stage::Gt, id);
            let abs_hash = if self.config.ground_truth.absolute_reference {
                Some(self.read_meta(&self.absolute_gt_path(id))?.content_hash)
            } else {
                None
            };
            let key = io::hash_parts(&[
                "gt-workflow".into(),
                seg_meta.content_hash.clone(),
                geom_hash.clone(),
                abs_hash.clone().unwrap_or_default(),
            ]);
            if self.up_to_date(&path, &key).is_some() {
                flags.push(false);
                continue;
            }
            let seg = self.load_segmentation(id)?;
            let masks = gtproject::virtual_project_all(&self.projector, &seg, eps, id, Provenance::Workflow)?;
            let jaccard = match abs_hash {
                Some(_) => {
                    let abs = self.load_gt(id, Provenance::Absolute)?;
                    Some(mean_jaccard(&masks, &abs)?)
                }
                None => None,
            };
            self.store(Stage::Gt, Some(id), &path, &pack_masks(&masks), &key, serde_json::json!({
                "provenance": Provenance::Workflow,
                "geometry_hash": geom_hash,
                "jaccard_vs_absolute": jaccard,
            }))?;
            flags.push(true);
        }
        Ok(tally(Stage::Gt, &flags))
    }

    /// All per-angle masks of one object.
    pub fn load_gt(&self, id: u32, provenance: Provenance) -> Result<Vec<BinaryMask>> {
        let path = match provenance {
            Provenance::Workflow => self.path(Stage::Gt, id),
            Provenance::Absolute => self.absolute_gt_path(id),
        };
        if !path.is_file() {
            return Err(Error::MissingStage {
                stage: Stage::Gt.name().into(),
                path,
            });
        }
        let g = &self.projector.geom;
        unpack_masks(&io::read_bytes(&path)?, g.detector_rows, g.detector_cols, id, provenance)
    }

    fn object_infos(&self, ids: &[u32]) -> Vec<ObjectInfo> {
        ids.iter()
            .map(|&id| ObjectInfo {
                id,
                n_angles: self.projector.n_angles(),
            })
            .collect()
    }

    /// Training (or validation) and test manifests for the configured strategy.
    pub fn manifests(&self) -> Result<(DatasetManifest, DatasetManifest)> {
        let d = &self.config.dataset;
        let seed = self.config.master_seed;
        let train_ids: Vec<u32> = (0..d.train_objects as u32).collect();
        let test_ids: Vec<u32> = (d.train_objects as u32..self.config.phantom.count as u32).collect();
        let infos = self.object_infos(&train_ids);
        let mut train = match d.strategy {
            Strategy::Workflow => dataset::sample_workflow(&infos, d.included, d.total, seed)?,
            Strategy::Manual => dataset::sample_manual(&infos, d.included, seed)?,
            Strategy::Mixed => {
                let split = d.mixed_split.unwrap_or(d.train_objects / 2);
                dataset::compose_mixed(&infos[..split], &infos[split..], d.ratio, d.included, d.total, seed)?
            }
            Strategy::Test => return Err(Error::Config("`test` is not a training strategy".into())),
        };
        let mut test = dataset::make_testset(&test_ids, &train_ids, &self.projector.geom.angles, seed)?;
        for m in [&mut train, &mut test] {
            m.geometry_hash = self.projector.geom.hash();
            m.theta_method = Some(
                serde_json::to_value(self.config.segmentation.method)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default(),
            );
            m.theta = self.config.segmentation.theta.filter(|_| self.config.segmentation.method == SegmentMethod::Fixed);
        }
        Ok((train, test))
    }

    fn export_pair(&self, dir: &Path, rec: &Record, stack: &RadiographStack, masks: &[BinaryMask]) -> Result<()> {
        let rad = stack.radiograph(rec.angle_index);
        let mask = &masks[rec.angle_index];
        let (rows, cols) = self.config.export_shape();
        let (rad, mask) = if (rows, cols) != (rad.rows, rad.cols) {
            gtproject::resize_pair(&rad, mask, (rows, cols))?
        } else {
            (rad, mask.clone())
        };
        let rpath = dir.join(&rec.radiograph);
        io::write_f32(&rpath, rad.values.iter().map(|&v| v as f32))?;
        io::write_json(
            &io::sidecar_path(&rpath),
            &serde_json::json!({
                "rows": rad.rows,
                "cols": rad.cols,
                "object_id": rad.object_id,
                "angle_index": rad.angle_index,
                "geometry_hash": self.projector.geom.hash(),
                "config_hash": self.config_hash,
            }),
        )?;
        gtproject::write_mask_raw(&mask, &dir.join(&rec.mask), Some(&self.config_hash))
    }

    fn run_dataset(&self) -> Result<StageReport> {
        let (train, test) = self.manifests()?;
        let mode = self.config.ground_truth.mode;
        let train_prov = match mode {
            GtMode::Workflow => Provenance::Workflow,
            GtMode::Absolute => Provenance::Absolute,
        };
        let test_prov = if self.config.ground_truth.absolute_reference {
            Provenance::Absolute
        } else {
            Provenance::Workflow
        };
        // Key over everything the exported files depend on.
        let mut parts = vec![
            "dataset".to_string(),
            io::hash_json(&self.config.dataset),
            io::hash_json(&self.config.ground_truth),
            io::hash_json(&(&train, &test)),
        ];
        let ids: std::collections::BTreeSet<u32> = train.records.iter().chain(&test.records).map(|r| r.object_id).collect();
        for &id in &ids {
            parts.push(self.require(Stage::Scan, id)?.content_hash);
            parts.push(self.require(Stage::Gt, id)?.content_hash);
            if self.config.ground_truth.absolute_reference {
                parts.push(self.read_meta(&self.absolute_gt_path(id))?.content_hash);
            }
        }
        let key = io::hash_parts(&parts);
        let manifest_path = self.path(Stage::Dataset, 0);
        let cache = self.out.join(Stage::Dataset.dir()).join("cache.json");
        if self.up_to_date_marker(&cache, &key) && manifest_path.is_file() {
            return Ok(tally(Stage::Dataset, &[false]));
        }
        let root = self.out.join(Stage::Dataset.dir());
        for &id in &ids {
            let stack = self.load_scan(id)?;
            let train_masks = self.load_gt(id, train_prov)?;
            let test_masks = if test_prov == train_prov { None } else { Some(self.load_gt(id, test_prov)?) };
            let workflow_masks = if self.config.ground_truth.absolute_reference && train_prov != Provenance::Workflow {
                Some(self.load_gt(id, Provenance::Workflow)?)
            } else {
                None
            };
            for r in train.records.iter().filter(|r| r.object_id == id) {
                self.export_pair(&root, r, &stack, &train_masks)?;
            }
            for r in test.records.iter().filter(|r| r.object_id == id) {
                let masks = test_masks.as_deref().unwrap_or(&train_masks);
                self.export_pair(&root.join("test"), r, &stack, masks)?;
                // Workflow masks of the test views, scored by the eval stage.
                if self.config.ground_truth.absolute_reference {
                    let wf = workflow_masks.as_deref().unwrap_or(&train_masks);
                    let target = self.config.export_shape();
                    let m = &wf[r.angle_index];
                    let m = if target != (m.rows, m.cols) {
                        gtproject::resize_pair(&stack.radiograph(r.angle_index), m, target)?.1
                    } else {
                        m.clone()
                    };
                    gtproject::write_mask_raw(&m, &root.join("test_workflow").join(&r.mask), Some(&self.config_hash))?;
                }
            }
        }
        train.check_disjoint()?;
        test.check_disjoint()?;
        train.check_files(&root)?;
        test.check_files(&root.join("test"))?;
        io::write_json(&manifest_path, &train)?;
        io::write_json(&root.join("test_manifest.json"), &test)?;
        io::write_json(&cache, &serde_json::json!({ "key": key, "config_hash": self.config_hash }))?;
        Ok(tally(Stage::Dataset, &[true]))
    }

    fn up_to_date_marker(&self, cache: &Path, key: &str) -> bool {
        io::read_json::<serde_json::Value>(cache)
            .ok()
            .and_then(|v| v.get("key").and_then(|k| k.as_str()).map(|k| k == key))
            .unwrap_or(false)
    }

    fn run_eval(&self) -> Result<StageReport> {
        let root = self.out.join(Stage::Dataset.dir());
        let target = root.join("test");
        let manifest = self.path(Stage::Dataset, 0);
        if !manifest.is_file() || !target.is_dir() {
            return Err(Error::MissingStage {
                stage: Stage::Dataset.name().into(),
                path: manifest,
            });
        }
        let pred = match &self.config.eval.predictions {
            Some(p) => p.clone(),
            None => root.join("test_workflow"),
        };
        if !pred.is_dir() {
            return Err(Error::Config(format!(
                "no predictions to evaluate at {} (set eval.predictions or enable ground_truth.absolute_reference)",
                pred.display()
            )));
        }
        let cache = self.out.join(Stage::Eval.dir()).join("cache.json");
        let dataset_key = io::read_json::<serde_json::Value>(&root.join("cache.json"))?;
        let key = io::hash_parts(&[
            "eval".to_string(),
            io::hash_json(&self.config.eval),
            dataset_key["key"].as_str().unwrap_or_default().to_owned(),
            self.config
                .eval
                .predictions
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        ]);
        let report_path = self.path(Stage::Eval, 0);
        // External predictions may change without the key noticing, so they
        // are always rescored.
        if self.config.eval.predictions.is_none() && self.up_to_date_marker(&cache, &key) && report_path.is_file() {
            return Ok(tally(Stage::Eval, &[false]));
        }
        let report = evalmetrics::evaluate_testset(&pred, &target, &self.config.detection_params())?;
        report.write_json(&report_path)?;
        report.write_csv(&report_path.with_extension("csv"))?;
        io::write_json(&cache, &serde_json::json!({ "key": key, "config_hash": self.config_hash }))?;
        Ok(tally(Stage::Eval, &[true]))
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageReport> {
        self.log(format!("stage {}", stage.name()));
        match stage {
            Stage::Phantom => self.run_phantoms(),
            Stage::Scan => self.run_scans(),
            Stage::Recon => self.run_recons(),
            Stage::Segment => self.run_segments(),
            Stage::Gt => self.run_gt(),
            Stage::Dataset => self.run_dataset(),
            Stage::Eval => self.run_eval(),
        }
    }

    /// Runs all stages in order (`eval` only if enabled), or just `only`.
    pub fn run(&self, only: Option<Stage>) -> Result<RunSummary> {
        io::ensure_dir(&self.out)?;
        io::write_bytes(&self.out.join("config.toml"), self.config.to_toml().as_bytes())?;
        let stages: Vec<Stage> = match only {
            Some(s) => vec![s],
            None => Stage::ALL
                .into_iter()
                .filter(|&s| s != Stage::Eval || self.config.eval.enabled)
                .collect(),
        };
        let mut reports = Vec::new();
        for s in stages {
            reports.push(self.run_stage(s)?);
        }
        let summary = self.summary(reports)?;
        io::write_json(&self.out.join("summary.json"), &summary)?;
        Ok(summary)
    }

    fn summary(&self, stages: Vec<StageReport>) -> Result<RunSummary> {
        let mut objects = Vec::new();
        for id in self.object_ids() {
            let read = |stage: Stage| self.read_meta(&self.path(stage, id)).ok();
            let ph = read(Stage::Phantom);
            let seg = read(Stage::Segment);
            let gt = read(Stage::Gt);
            objects.push(ObjectSummary {
                object_id: id,
                foreign_voxels: ph
                    .and_then(|m| m.extra["foreign_voxels"].as_u64())
                    .unwrap_or(0) as usize,
                theta: seg.and_then(|m| m.extra["theta"].as_f64()),
                jaccard: gt.and_then(|m| m.extra["jaccard_vs_absolute"].as_f64()),
            });
        }
        let js: Vec<f64> = objects.iter().filter_map(|o| o.jaccard).collect();
        let mean_jaccard = (js.len() == objects.len() && !js.is_empty()).then(|| js.iter().sum::<f64>() / js.len() as f64);
        let eval = io::read_json::<MetricsReport>(&self.path(Stage::Eval, 0)).ok().map(|r| EvalSummary {
            mean_accuracy: r.mean_accuracy,
            detection_rate: r.detection_rate,
            false_positive_rate: r.false_positive_rate,
            mean_jaccard: r.mean_jaccard,
            n_images: r.n_images,
        });
        Ok(RunSummary {
            config_hash: self.config_hash.clone(),
            stages,
            objects,
            mean_jaccard,
            eval,
        })
    }
}

fn tally(stage: Stage, flags: &[bool]) -> StageReport {
    let computed = flags.iter().filter(|&&f| f).count();
    StageReport {
        stage: Some(stage),
        computed,
        cached: flags.len() - computed,
    }
}

/// Threshold and 3D mask of one reconstruction.
pub fn segment(
    rec: &ReconVolume,
    method: SegmentMethod,
    theta: Option<f64>,
    min_component_voxels: Option<usize>,
) -> Result<(f64, BinaryVolume)> {
    let t = match method {
        SegmentMethod::Otsu => volseg::otsu_object_threshold(rec)?,
        SegmentMethod::OtsuGlobal => volseg::otsu_threshold(rec)?,
        SegmentMethod::Fixed => theta.ok_or_else(|| Error::Config("fixed threshold needs theta".into()))?,
    };
    let mut mask = volseg::threshold(rec, t);
    if let Some(min) = min_component_voxels {
        mask = volseg::remove_small_components(&mask, min);
    }
    Ok((t, mask))
}

/// Masks of consecutive angles as one byte per pixel.
pub fn pack_masks(masks: &[BinaryMask]) -> Vec<u8> {
    masks.iter().flat_map(|m| m.to_bytes()).collect()
}

pub fn unpack_masks(bytes: &[u8], rows: usize, cols: usize, object_id: u32, provenance: Provenance) -> Result<Vec<BinaryMask>> {
    let n = rows * cols;
    if n == 0 || !bytes.len().is_multiple_of(n) {
        return Err(Error::Data(format!("{} mask bytes do not split into {rows}×{cols} images", bytes.len())));
    }
    Ok(bytes
        .chunks(n)
        .enumerate()
        .map(|(a, chunk)| BinaryMask {
            rows,
            cols,
            angle_index: a,
            object_id,
            provenance,
            pixels: chunk.iter().map(|&b| b != 0).collect(),
        })
        .collect())
}

/// Mean per-angle Jaccard index of two mask sets.
pub fn mean_jaccard(a: &[BinaryMask], b: &[BinaryMask]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Data("mask sets differ in length".into()));
    }
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| evalmetrics::jaccard(x, y))
        .collect::<Result<Vec<_>>>()?
        .iter()
        .sum();
    Ok(total / a.len() as f64)
}
