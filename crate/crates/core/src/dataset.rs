//! Training/validation/test set assembly and manifests.
//!
//! Object order, angle choices and shuffles come from streams keyed by the
//! master seed and the object id, so a manifest is fully determined by
//! `(seed, strategy, i)` and growing `i` never changes earlier choices.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::object_stem;
use crate::rng::{self, Domain};

/// Every `VALIDATION_STRIDE`-th workflow example is held out for validation.
pub const VALIDATION_STRIDE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Workflow,
    Manual,
    Mixed,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// An object available for sampling and its number of scanned angles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectInfo {
    pub id: u32,
    pub n_angles: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub object_id: u32,
    pub angle_index: usize,
    pub radiograph: String,
    pub mask: String,
    pub split: Split,
}

impl Record {
    pub fn new(object_id: u32, angle_index: usize, split: Split) -> Self {
        let stem = object_stem(object_id);
        Self {
            object_id,
            angle_index,
            radiograph: format!("{stem}/rad_{angle_index:04}.f32"),
            mask: format!("{stem}/mask_{angle_index:04}.u8"),
            split,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub strategy: Strategy,
    /// Seeded permutation of the candidate objects.
    pub object_order: Vec<u32>,
    /// Objects taken from the front of `object_order` (or composed pools).
    pub included_objects: Vec<u32>,
    pub records: Vec<Record>,
    /// Segmentation threshold and how it was chosen, e.g. `otsu` or `fixed`.
    pub theta: Option<f64>,
    pub theta_method: Option<String>,
    pub geometry_hash: String,
    pub master_seed: u64,
    /// How validation examples were selected.
    pub validation_rule: String,
}

impl DatasetManifest {
    fn new(strategy: Strategy, seed: u64, rule: &str) -> Self {
        Self {
            strategy,
            object_order: Vec::new(),
            included_objects: Vec::new(),
            records: Vec::new(),
            theta: None,
            theta_method: None,
            geometry_hash: String::new(),
            master_seed: seed,
            validation_rule: rule.to_owned(),
        }
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    /// Fails if an (object, angle) pair appears twice.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert((r.object_id, r.angle_index)) {
                return Err(Error::Data(format!(
                    "object {} angle {} appears twice in the manifest",
                    r.object_id, r.angle_index
                )));
            }
        }
        Ok(())
    }

    /// Fails if a referenced file is missing under `root`.
    pub fn check_files(&self, root: &Path) -> Result<()> {
        for r in &self.records {
            for f in [&r.radiograph, &r.mask] {
                if !root.join(f).is_file() {
                    return Err(Error::Data(format!("manifest references missing file {f}")));
                }
            }
        }
        Ok(())
    }
}

/// Seeded permutation of object ids (independent of their input order).
pub fn object_order(objects: &[u32], seed: u64) -> Vec<u32> {
    let mut ids = objects.to_vec();
    ids.sort_unstable();
    ids.shuffle(&mut rng::stream(seed, Domain::ObjectOrder, &[]));
    ids
}

fn lookup(objects: &[ObjectInfo], id: u32) -> ObjectInfo {
    *objects.iter().find(|o| o.id == id).expect("object id from the same list")
}

/// `count` angles out of `n`, one drawn uniformly from each of `count`
/// equal strata; all angles when `count == n`.
fn stratified_angles<R: Rng>(n: usize, count: usize, rng: &mut R) -> Vec<usize> {
    (0..count)
        .map(|j| {
            let lo = j * n / count;
            let hi = (j + 1) * n / count;
            rng.random_range(lo..hi)
        })
        .collect()
}

fn workflow_records(objects: &[ObjectInfo], chosen: &[u32], total: usize, seed: u64) -> Result<Vec<Record>> {
    let i = chosen.len();
    let mut records = Vec::with_capacity(total);
    for (k, &id) in chosen.iter().enumerate() {
        let info = lookup(objects, id);
        let count = total / i + usize::from(k < total % i);
        if count > info.n_angles {
            return Err(Error::Data(format!(
                "object {id} has {} angles, {count} requested",
                info.n_angles
            )));
        }
        let mut rng = rng::stream(seed, Domain::AngleChoice, &[id as u64, 0]);
        for a in stratified_angles(info.n_angles, count, &mut rng) {
            records.push(Record::new(id, a, Split::Train));
        }
    }
    records.shuffle(&mut rng::stream(seed, Domain::Shuffle, &[i as u64, total as u64]));
    for r in records.iter_mut().skip(VALIDATION_STRIDE - 1).step_by(VALIDATION_STRIDE) {
        r.split = Split::Val;
    }
    Ok(records)
}

const WORKFLOW_RULE: &str = "every 10th example after a seeded shuffle";

/// Workflow sampling: `total` examples spread evenly over the first `i`
/// objects of the seeded order.
pub fn sample_workflow(objects: &[ObjectInfo], i: usize, total: usize, seed: u64) -> Result<DatasetManifest> {
    if i == 0 || i > objects.len() {
        return Err(Error::Param(format!("cannot include {i} of {} objects", objects.len())));
    }
    if total < i {
        return Err(Error::Param(format!("{total} examples cannot cover {i} objects")));
    }
    let order = object_order(&objects.iter().map(|o| o.id).collect::<Vec<_>>(), seed);
    let chosen = order[..i].to_vec();
    let mut m = DatasetManifest::new(Strategy::Workflow, seed, WORKFLOW_RULE);
    m.records = workflow_records(objects, &chosen, total, seed)?;
    m.object_order = order;
    m.included_objects = chosen;
    Ok(m)
}

/// Manual-annotation sampling: one random radiograph per object for the
/// first `i` objects; the first ⌊8i/9⌋ train, the remaining ⌈i/9⌉ validate.
pub fn sample_manual(objects: &[ObjectInfo], i: usize, seed: u64) -> Result<DatasetManifest> {
    if i < 2 {
        return Err(Error::Param(format!("manual sampling needs at least 2 objects, got {i}")));
    }
    if i > objects.len() {
        return Err(Error::Param(format!("cannot include {i} of {} objects", objects.len())));
    }
    let order = object_order(&objects.iter().map(|o| o.id).collect::<Vec<_>>(), seed);
    let chosen = order[..i].to_vec();
    let n_train = 8 * i / 9;
    let mut m = DatasetManifest::new(Strategy::Manual, seed, "last ⌈i/9⌉ objects in order");
    m.records = chosen
        .iter()
        .enumerate()
        .map(|(k, &id)| {
            let n = lookup(objects, id).n_angles;
            if n == 0 {
                return Err(Error::Data(format!("object {id} has no angles")));
            }
            let a = rng::stream(seed, Domain::AngleChoice, &[id as u64, 1]).random_range(0..n);
            Ok(Record::new(id, a, if k < n_train { Split::Train } else { Split::Val }))
        })
        .collect::<Result<_>>()?;
    m.object_order = order;
    m.included_objects = chosen;
    Ok(m)
}

/// Index of the angle in `angles` closest to `target` on the circle; ties
/// go to the lower index.
pub fn nearest_angle(angles: &[f64], target: f64) -> usize {
    let tau = std::f64::consts::TAU;
    let dist = |a: f64| {
        let d = (a - target).rem_euclid(tau);
        d.min(tau - d)
    };
    let mut best = 0;
    for (k, &a) in angles.iter().enumerate() {
        if dist(a) < dist(angles[best]) {
            best = k;
        }
    }
    best
}

/// Two radiographs per test object: a uniformly random angle and the angle
/// closest to 90° away from it.
pub fn make_testset(objects: &[u32], training: &[u32], angles: &[f64], seed: u64) -> Result<DatasetManifest> {
    if let Some(id) = objects.iter().find(|id| training.contains(id)) {
        return Err(Error::Config(format!("object {id} is both a test and a training object")));
    }
    if angles.len() < 2 {
        return Err(Error::Data("test views need at least two angles".into()));
    }
    let mut m = DatasetManifest::new(Strategy::Test, seed, "none");
    for &id in objects {
        let a = rng::stream(seed, Domain::TestAngles, &[id as u64]).random_range(0..angles.len());
        let b = nearest_angle(angles, angles[a] + std::f64::consts::FRAC_PI_2);
        m.records.push(Record::new(id, a, Split::Test));
        m.records.push(Record::new(id, b, Split::Test));
    }
    m.object_order = objects.to_vec();
    m.included_objects = objects.to_vec();
    Ok(m)
}

/// Workflow sampling over `i` objects drawn from two pools, a fraction
/// `ratio` of them from `few` and the rest from `many`, interleaved.
pub fn compose_mixed(
    few: &[ObjectInfo],
    many: &[ObjectInfo],
    ratio: f64,
    i: usize,
    total: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Param(format!("mix ratio {ratio} outside [0, 1]")));
    }
    if few.is_empty() || many.is_empty() {
        return Err(Error::Param("both object pools must be non-empty".into()));
    }
    if few.iter().any(|a| many.iter().any(|b| a.id == b.id)) {
        return Err(Error::Param("object pools overlap".into()));
    }
    if i == 0 || total < i {
        return Err(Error::Param(format!("cannot draw {total} examples from {i} objects")));
    }
    let order_few = object_order(&few.iter().map(|o| o.id).collect::<Vec<_>>(), seed);
    let order_many = object_order(&many.iter().map(|o| o.id).collect::<Vec<_>>(), seed ^ 0x6d69_7865_6421);
    let (mut a, mut b) = (0usize, 0usize);
    let mut chosen = Vec::with_capacity(i);
    for k in 0..i {
        // Pool one has supplied round(k·ratio) of the first k objects.
        let want_few = ((k + 1) as f64 * ratio).round() as usize;
        if want_few > a {
            let id = *order_few
                .get(a)
                .ok_or_else(|| Error::Data(format!("pool one exhausted after {a} objects")))?;
            chosen.push(id);
            a += 1;
        } else {
            let id = *order_many
                .get(b)
                .ok_or_else(|| Error::Data(format!("pool two exhausted after {b} objects")))?;
            chosen.push(id);
            b += 1;
        }
    }
    let all: Vec<ObjectInfo> = few.iter().chain(many).copied().collect();
    let mut m = DatasetManifest::new(Strategy::Mixed, seed, WORKFLOW_RULE);
    m.records = workflow_records(&all, &chosen, total, seed)?;
    m.object_order = chosen.clone();
    m.included_objects = chosen;
    Ok(m)
}
