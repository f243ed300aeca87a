//! Segmentation quality measures: average class accuracy, object-based
//! detection and false-positive rates, and the Jaccard index, plus test-set
//! aggregation into a report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gtproject::{read_mask, BinaryMask};
use crate::labeling::{label_components, Components, Connectivity};

/// Fraction of the image a component must cover to count as an object.
pub const MIN_COMPONENT_FRACTION: f64 = 0.0005;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionParams {
    /// A target component is detected if its recall exceeds `eta`.
    pub eta: f64,
    /// A segmented component is a false positive if its recall is below `delta`.
    pub delta: f64,
    pub min_component_px: usize,
    #[serde(default = "default_connectivity")]
    pub connectivity: Connectivity,
}

fn default_connectivity() -> Connectivity {
    Connectivity::Four
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self {
            eta: 0.3,
            delta: 0.3,
            min_component_px: 8,
            connectivity: Connectivity::Four,
        }
    }
}

impl DetectionParams {
    /// Defaults with the minimum component size scaled to a `rows × cols`
    /// image (8 px at 128²).
    pub fn for_image(rows: usize, cols: usize) -> Self {
        Self {
            min_component_px: min_component_px_for(rows, cols),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eta", self.eta), ("delta", self.delta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Param(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        if self.min_component_px == 0 {
            return Err(Error::Param("minimum component size must be at least 1 px".into()));
        }
        if self.connectivity == Connectivity::Six {
            return Err(Error::Param("2D components need connectivity 4 or 8".into()));
        }
        Ok(())
    }
}

pub fn min_component_px_for(rows: usize, cols: usize) -> usize {
    ((MIN_COMPONENT_FRACTION * (rows * cols) as f64).round() as usize).max(1)
}

fn check_pair(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::Data(format!(
            "mask sizes differ: {}×{} vs {}×{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(())
}

/// Mean of the foreign-object and background recalls. A class absent from
/// the target contributes recall 1.
pub fn average_class_accuracy(seg: &BinaryMask, target: &BinaryMask) -> Result<f64> {
    check_pair(seg, target)?;
    let (mut tp_fo, mut n_fo, mut tp_bg, mut n_bg) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &t) in seg.pixels.iter().zip(&target.pixels) {
        if t {
            n_fo += 1;
            tp_fo += s as usize;
        } else {
            n_bg += 1;
            tp_bg += !s as usize;
        }
    }
    let recall = |tp: usize, n: usize| if n == 0 { 1.0 } else { tp as f64 / n as f64 };
    Ok(0.5 * (recall(tp_fo, n_fo) + recall(tp_bg, n_bg)))
}

pub fn components2d(mask: &BinaryMask, connectivity: Connectivity) -> Components {
    label_components(&mask.pixels, [mask.cols, mask.rows, 1], connectivity)
}

/// Per-component recall of `comps` against `other`, for components of at
/// least `min_px` pixels.
fn component_recalls(comps: &Components, other: &[bool], min_px: usize) -> Vec<f64> {
    let mut hits = vec![0usize; comps.count()];
    for (&l, &o) in comps.labels.iter().zip(other) {
        if l != 0 && o {
            hits[l as usize - 1] += 1;
        }
    }
    comps
        .sizes
        .iter()
        .zip(&hits)
        .filter(|(&size, _)| size >= min_px)
        .map(|(&size, &h)| h as f64 / size as f64)
        .collect()
}

/// Object counts of one image pair feeding the detection and false-positive
/// rates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectCounts {
    pub target_objects: usize,
    pub detected: usize,
    pub segmented_objects: usize,
    pub false_positives: usize,
}

pub fn object_counts(seg: &BinaryMask, target: &BinaryMask, params: &DetectionParams) -> Result<ObjectCounts> {
    check_pair(seg, target)?;
    let t = component_recalls(&components2d(target, params.connectivity), &seg.pixels, params.min_component_px);
    let s = component_recalls(&components2d(seg, params.connectivity), &target.pixels, params.min_component_px);
    Ok(ObjectCounts {
        target_objects: t.len(),
        detected: t.iter().filter(|&&r| r > params.eta).count(),
        segmented_objects: s.len(),
        false_positives: s.iter().filter(|&&r| r < params.delta).count(),
    })
}

fn percentage(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

fn pooled_counts(segs: &[BinaryMask], targets: &[BinaryMask], params: &DetectionParams) -> Result<ObjectCounts> {
    if segs.len() != targets.len() {
        return Err(Error::Data(format!(
            "{} segmentations but {} targets",
            segs.len(),
            targets.len()
        )));
    }
    let per: Vec<ObjectCounts> = segs
        .par_iter()
        .zip(targets)
        .map(|(s, t)| object_counts(s, t, params))
        .collect::<Result<_>>()?;
    Ok(per.iter().fold(ObjectCounts::default(), |a, c| a + *c))
}

impl std::ops::Add for ObjectCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            target_objects: self.target_objects + o.target_objects,
            detected: self.detected + o.detected,
            segmented_objects: self.segmented_objects + o.segmented_objects,
            false_positives: self.false_positives + o.false_positives,
        }
    }
}

/// Percentage of qualifying target components whose recall exceeds `eta`.
pub fn detection_rate(segs: &[BinaryMask], targets: &[BinaryMask], params: &DetectionParams) -> Result<f64> {
    let c = pooled_counts(segs, targets, params)?;
    Ok(percentage(c.detected, c.target_objects))
}

/// Percentage of qualifying segmented components whose recall against the
/// target is below `delta`.
pub fn false_positive_rate(segs: &[BinaryMask], targets: &[BinaryMask], params: &DetectionParams) -> Result<f64> {
    let c = pooled_counts(segs, targets, params)?;
    Ok(percentage(c.false_positives, c.segmented_objects))
}

/// `|a ∩ b| / |a ∪ b|`, 1 when both are empty.
pub fn jaccard(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_pair(a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.pixels.iter().zip(&b.pixels) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub accuracy: f64,
    pub jaccard: f64,
    #[serde(flatten)]
    pub counts: ObjectCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_accuracy: f64,
    pub detection_rate: f64,
    pub false_positive_rate: f64,
    pub mean_jaccard: f64,
    pub n_images: usize,
    pub params: DetectionParams,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricsReport {
    /// Aggregates per-image values: accuracy and Jaccard are averaged, the
    /// object counts are pooled before forming the rates.
    pub fn from_images(per_image: Vec<ImageMetrics>, params: DetectionParams) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Data("no images to evaluate".into()));
        }
        let n = per_image.len() as f64;
        let counts = per_image.iter().fold(ObjectCounts::default(), |a, m| a + m.counts);
        Ok(Self {
            mean_accuracy: per_image.iter().map(|m| m.accuracy).sum::<f64>() / n,
            detection_rate: percentage(counts.detected, counts.target_objects),
            false_positive_rate: percentage(counts.false_positives, counts.segmented_objects),
            mean_jaccard: per_image.iter().map(|m| m.jaccard).sum::<f64>() / n,
            n_images: per_image.len(),
            params,
            per_image,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    /// One row per image.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            crate::io::ensure_dir(dir)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "name",
            "accuracy",
            "jaccard",
            "target_objects",
            "detected",
            "segmented_objects",
            "false_positives",
        ])?;
        for m in &self.per_image {
            let c = m.counts;
            w.write_record([
                m.name.clone(),
                m.accuracy.to_string(),
                m.jaccard.to_string(),
                c.target_objects.to_string(),
                c.detected.to_string(),
                c.segmented_objects.to_string(),
                c.false_positives.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Scores named `(prediction, target)` pairs.
pub fn evaluate_pairs(pairs: &[(String, BinaryMask, BinaryMask)], params: &DetectionParams) -> Result<MetricsReport> {
    params.validate()?;
    let per_image = pairs
        .par_iter()
        .map(|(name, seg, target)| {
            Ok(ImageMetrics {
                name: name.clone(),
                accuracy: average_class_accuracy(seg, target)?,
                jaccard: jaccard(seg, target)?,
                counts: object_counts(seg, target, params)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_images(per_image, *params)
}

/// Mask files under `dir`, keyed by their path relative to `dir` without
/// extension (e.g. `obj00003/mask_0042`).
fn mask_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let is_mask = path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("mask_"));
            let ext = path.extension().and_then(|e| e.to_str());
            if is_mask && matches!(ext, Some("u8") | Some("png")) {
                let rel = path.strip_prefix(dir).unwrap().with_extension("");
                let key = rel.to_string_lossy().replace('\\', "/");
                if let Some(prev) = out.insert(key.clone(), path.clone()) {
                    return Err(Error::Data(format!(
                        "two masks for {key}: {} and {}",
                        prev.display(),
                        path.display()
                    )));
                }
            }
        }
    }
    Ok(out)
}

/// Shape of the first target mask under `dir`, if there is one.
pub fn first_mask_shape(dir: &Path) -> Result<Option<(usize, usize)>> {
    match mask_files(dir)?.values().next() {
        Some(path) => {
            let m = read_mask(path, None)?;
            Ok(Some((m.rows, m.cols)))
        }
        None => Ok(None),
    }
}

/// Pairs every `mask_*.u8|png` under `target_dir` with the file of the same
/// relative name under `pred_dir` and scores them. Unpaired files on either
/// side are reported together as a data error.
pub fn evaluate_testset(pred_dir: &Path, target_dir: &Path, params: &DetectionParams) -> Result<MetricsReport> {
    let preds = mask_files(pred_dir)?;
    let targets = mask_files(target_dir)?;
    let mut missing: Vec<String> = targets
        .keys()
        .filter(|k| !preds.contains_key(*k))
        .map(|k| format!("no prediction for {k}"))
        .collect();
    missing.extend(
        preds
            .keys()
            .filter(|k| !targets.contains_key(*k))
            .map(|k| format!("no target for {k}")),
    );
    if !missing.is_empty() {
        return Err(Error::Data(format!("unpaired masks: {}", missing.join("; "))));
    }
    let pairs = targets
        .iter()
        .map(|(key, tpath)| {
            let target = read_mask(tpath, None)?;
            let pred = read_mask(&preds[key], Some((target.rows, target.cols)))?;
            Ok((key.clone(), pred, target))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_pairs(&pairs, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: usize, cols: usize, on: &[(usize, usize)]) -> BinaryMask {
        let mut p = vec![false; rows * cols];
        for &(r, c) in on {
            p[r * cols + c] = true;
        }
        BinaryMask::new(rows, cols, p)
    }

    fn line(n: usize) -> Vec<(usize, usize)> {
        (0..n).map(|c| (0, c)).collect()
    }

    #[test]
    fn accuracy_cases() {
        let t = mask(2, 2, &[(0, 0), (1, 1)]);
        assert_eq!(average_class_accuracy(&t, &t).unwrap(), 1.0);
        let empty = mask(2, 2, &[]);
        assert_eq!(average_class_accuracy(&empty, &t).unwrap(), 0.5);
        // TP_FO=2, FN_FO=2, TP_BG=10, FN_BG=2.
        let target = mask(4, 4, &[(0, 0), (0, 1), (0, 2), (0, 3)]);
        let seg = mask(4, 4, &[(0, 0), (0, 1), (3, 2), (3, 3)]);
        let acc = average_class_accuracy(&seg, &target).unwrap();
        assert!((acc - 0.5 * (2.0 / 4.0 + 10.0 / 12.0)).abs() < 1e-15);
        // Absent foreign class counts as perfect recall.
        assert_eq!(average_class_accuracy(&empty, &empty).unwrap(), 1.0);
        assert!(matches!(average_class_accuracy(&empty, &mask(1, 4, &[])), Err(Error::Data(_))));
    }

    #[test]
    fn accuracy_is_not_symmetric() {
        let a = mask(3, 3, &[(0, 0)]);
        let b = mask(3, 3, &[(0, 0), (0, 1)]);
        assert_ne!(average_class_accuracy(&a, &b).unwrap(), average_class_accuracy(&b, &a).unwrap());
    }

    #[test]
    fn component_basics() {
        let diag = mask(2, 2, &[(0, 0), (1, 1)]);
        assert_eq!(components2d(&diag, Connectivity::Four).count(), 2);
        assert_eq!(components2d(&diag, Connectivity::Eight).count(), 1);
        let full = BinaryMask::new(3, 5, vec![true; 15]);
        assert_eq!(components2d(&full, Connectivity::Four).sizes, vec![15]);
    }

    #[test]
    fn detection_boundaries() {
        let p = DetectionParams::default();
        let target = mask(1, 12, &line(10));
        assert_eq!(detection_rate(std::slice::from_ref(&target), std::slice::from_ref(&target), &p).unwrap(), 100.0);
        // Recall exactly 0.3 is not a detection.
        let seg = mask(1, 12, &line(3));
        assert_eq!(detection_rate(&[seg], std::slice::from_ref(&target), &p).unwrap(), 0.0);
        let seg = mask(1, 12, &line(4));
        assert_eq!(detection_rate(&[seg], &[target], &p).unwrap(), 100.0);
        // A 7 px object is ignored; with nothing qualifying the rate is 0.
        let small = mask(1, 12, &line(7));
        let c = object_counts(&mask(1, 12, &[]), &small, &p).unwrap();
        assert_eq!(c.target_objects, 0);
        assert_eq!(detection_rate(&[mask(1, 12, &[])], &[small], &p).unwrap(), 0.0);
        assert!(detection_rate(&[], &[mask(1, 2, &[])], &p).is_err());
    }

    #[test]
    fn false_positive_boundaries() {
        let p = DetectionParams::default();
        let blob = mask(1, 12, &line(10));
        assert_eq!(false_positive_rate(std::slice::from_ref(&blob), std::slice::from_ref(&blob), &p).unwrap(), 0.0);
        assert_eq!(false_positive_rate(std::slice::from_ref(&blob), &[mask(1, 12, &[])], &p).unwrap(), 100.0);
        // Recall exactly 0.3 against the target is not a false positive.
        assert_eq!(false_positive_rate(std::slice::from_ref(&blob), &[mask(1, 12, &line(3))], &p).unwrap(), 0.0);
        assert_eq!(false_positive_rate(&[blob], &[mask(1, 12, &line(2))], &p).unwrap(), 100.0);
    }

    #[test]
    fn jaccard_cases() {
        let a = mask(1, 6, &[(0, 0), (0, 1), (0, 2), (0, 3)]);
        let b = mask(1, 6, &[(0, 1), (0, 2), (0, 3), (0, 4)]);
        assert!((jaccard(&a, &b).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&mask(1, 6, &[(0, 0)]), &mask(1, 6, &[(0, 5)])).unwrap(), 0.0);
        assert_eq!(jaccard(&mask(1, 6, &[]), &mask(1, 6, &[])).unwrap(), 1.0);
    }

    #[test]
    fn params_validation_and_scaling() {
        assert!(DetectionParams::default().validate().is_ok());
        for bad in [0.0, 1.0, -0.2, f64::NAN] {
            assert!(DetectionParams { eta: bad, ..Default::default() }.validate().is_err());
            assert!(DetectionParams { delta: bad, ..Default::default() }.validate().is_err());
        }
        assert!(DetectionParams { min_component_px: 0, ..Default::default() }.validate().is_err());
        assert_eq!(DetectionParams::for_image(128, 128).min_component_px, 8);
        assert_eq!(DetectionParams::for_image(96, 96).min_component_px, 5);
    }
}
