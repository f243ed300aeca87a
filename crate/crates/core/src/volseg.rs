//! Segmentation of reconstructed volumes: histograms, Otsu's threshold,
//! global thresholding, threshold sweeps and 3D connected components.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryVolume, ReconVolume};
use crate::labeling::{self, Components, Connectivity};

/// Default bin count for Otsu's method.
pub const OTSU_BINS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Ascending, `counts.len() + 1` entries.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Counts of the elements flagged by a label mask (e.g. foreign object),
    /// when one was supplied. The remainder is `counts - foreign_counts`.
    pub foreign_counts: Option<Vec<u64>>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        0.5 * (self.bin_edges[i] + self.bin_edges[i + 1])
    }

    /// Counts not flagged by the label mask.
    pub fn other_counts(&self) -> Option<Vec<u64>> {
        self.foreign_counts
            .as_ref()
            .map(|f| self.counts.iter().zip(f).map(|(c, f)| c - f).collect())
    }
}

/// Fixed-width histogram over `[lo, hi)`; values outside the range go to the
/// end bins. `label_mask`, if given, splits the counts into a second series.
pub fn histogram<T: Copy + Into<f64>>(
    values: &[T],
    n_bins: usize,
    range: (f64, f64),
    label_mask: Option<&[bool]>,
) -> Result<Histogram> {
    let (lo, hi) = range;
    if n_bins == 0 {
        return Err(Error::Param("histogram needs at least one bin".into()));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Param(format!("invalid histogram range [{lo}, {hi})")));
    }
    if let Some(m) = label_mask {
        if m.len() != values.len() {
            return Err(Error::Param("label mask and values differ in length".into()));
        }
    }
    let width = (hi - lo) / n_bins as f64;
    let bin_edges = (0..=n_bins).map(|i| lo + i as f64 * width).collect();
    let mut counts = vec![0u64; n_bins];
    let mut foreign = label_mask.map(|_| vec![0u64; n_bins]);
    for (i, &v) in values.iter().enumerate() {
        let v: f64 = v.into();
        let b = (((v - lo) / (hi - lo)) * n_bins as f64).floor();
        let b = if b.is_nan() { 0 } else { b.clamp(0.0, (n_bins - 1) as f64) as usize };
        counts[b] += 1;
        if let (Some(f), Some(m)) = (foreign.as_mut(), label_mask) {
            if m[i] {
                f[b] += 1;
            }
        }
    }
    Ok(Histogram {
        bin_edges,
        counts,
        foreign_counts: foreign,
    })
}

/// Histogram over the data's own `[min, max]` (widened when constant).
pub fn histogram_auto<T: Copy + Into<f64>>(values: &[T], n_bins: usize, label_mask: Option<&[bool]>) -> Result<Histogram> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values {
        let v: f64 = v.into();
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    } else if lo == hi {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    histogram(values, n_bins, (lo, hi), label_mask)
}

/// Otsu's threshold: the bin edge maximizing the between-class variance
/// `ω₀ω₁(μ₀ − μ₁)²`, where class 0 holds the bins below the edge. Ties go to
/// the lower edge.
///
/// Class means are taken over bin indices rather than bin centres. Centres
/// are an affine function of the index, which scales every candidate's
/// variance by the same factor and so leaves the argmax unchanged, while the
/// integer sums stay exact.
pub fn otsu(hist: &Histogram) -> Result<f64> {
    let nonzero = hist.counts.iter().filter(|&&c| c > 0).count();
    if nonzero < 2 {
        return Err(Error::DegenerateHistogram(format!(
            "Otsu needs at least two non-empty bins, found {nonzero}"
        )));
    }
    let total = hist.total() as f64;
    let total_sum: f64 = hist
        .counts
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let (mut n0, mut s0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 1usize);
    for k in 1..hist.n_bins() {
        let c = hist.counts[k - 1] as f64;
        n0 += c;
        s0 += (k - 1) as f64 * c;
        let n1 = total - n0;
        if n0 == 0.0 || n1 == 0.0 {
            continue;
        }
        let (w0, w1) = (n0 / total, n1 / total);
        let d = s0 / n0 - (total_sum - s0) / n1;
        let var = w0 * w1 * d * d;
        if var > best.0 {
            best = (var, k);
        }
    }
    Ok(hist.bin_edges[best.1])
}

/// Otsu threshold of a volume with [`OTSU_BINS`] bins over its range.
pub fn otsu_threshold(vol: &ReconVolume) -> Result<f64> {
    otsu(&histogram_auto(&vol.values, OTSU_BINS, None)?)
}

/// Otsu threshold between the two brightest classes. A first pass separates
/// air from the object; the second runs over the voxels at or above that
/// threshold, so it splits the object into base and foreign material.
pub fn otsu_object_threshold(vol: &ReconVolume) -> Result<f64> {
    let outer = otsu_threshold(vol)?;
    let t = outer as f32;
    let inside: Vec<f32> = vol.values.iter().copied().filter(|&v| v >= t).collect();
    otsu(&histogram_auto(&inside, OTSU_BINS, None)?)
}

/// Global threshold: a voxel is foreground iff its value is `>= theta`.
pub fn threshold(vol: &ReconVolume, theta: f64) -> BinaryVolume {
    // Compared at storage precision so a voxel stored as `theta` is included.
    let t = theta as f32;
    BinaryVolume {
        dims: vol.dims,
        voxels: vol.values.iter().map(|&v| v >= t).collect(),
    }
}

/// One segmentation per threshold, in the given order.
pub fn threshold_sweep(vol: &ReconVolume, thetas: &[f64]) -> Result<Vec<(f64, BinaryVolume)>> {
    if thetas.is_empty() {
        return Err(Error::Param("threshold sweep needs at least one value".into()));
    }
    if let Some(t) = thetas.iter().find(|t| !t.is_finite()) {
        return Err(Error::Param(format!("threshold {t} is not finite")));
    }
    Ok(thetas.iter().map(|&t| (t, threshold(vol, t))).collect())
}

/// Face-connected (6-neighbour) components.
pub fn components3d(vol: &BinaryVolume) -> Components {
    labeling::label_components(&vol.voxels, vol.dims.as_array(), Connectivity::Six)
}

/// Drops components smaller than `min_size` voxels.
pub fn remove_small_components(vol: &BinaryVolume, min_size: usize) -> BinaryVolume {
    let comps = components3d(vol);
    BinaryVolume {
        dims: vol.dims,
        voxels: comps
            .labels
            .iter()
            .map(|&l| l != 0 && comps.sizes[l as usize - 1] >= min_size)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Dims3;
    use proptest::prelude::*;

    fn recon(values: Vec<f32>, n: usize) -> ReconVolume {
        ReconVolume {
            dims: Dims3::new(values.len() / (n * n), n, n),
            voxel_size: 0.1,
            values,
        }
    }

    #[test]
    fn constant_volume_fills_one_bin() {
        for bins in [1, 7, 256] {
            let h = histogram_auto(&[0.3f32; 50], bins, None).unwrap();
            assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
            assert_eq!(h.total(), 50);
        }
    }

    #[test]
    fn simple_binning_and_clipping() {
        let h = histogram(&[0.0, 1.0, 2.0, 3.0], 2, (0.0, 4.0), None).unwrap();
        assert_eq!(h.counts, vec![2, 2]);
        assert_eq!(h.bin_edges, vec![0.0, 2.0, 4.0]);
        let h = histogram(&[-5.0, 9.0, 4.0], 2, (0.0, 4.0), None).unwrap();
        assert_eq!(h.counts, vec![1, 2]);
        let h = histogram::<f64>(&[], 3, (0.0, 1.0), None).unwrap();
        assert_eq!(h.counts, vec![0, 0, 0]);
        assert!(histogram(&[1.0], 0, (0.0, 1.0), None).is_err());
        assert!(histogram(&[1.0], 2, (1.0, 1.0), None).is_err());
    }

    #[test]
    fn label_mask_splits_series() {
        let h = histogram(&[0.1, 0.2, 0.9, 0.8], 2, (0.0, 1.0), Some(&[false, false, true, false])).unwrap();
        assert_eq!(h.foreign_counts, Some(vec![0, 1]));
        assert_eq!(h.other_counts(), Some(vec![2, 1]));
    }

    #[test]
    fn otsu_separates_two_peaks() {
        let mut counts = vec![0u64; 100];
        counts[10] = 500;
        counts[90] = 300;
        let h = Histogram {
            bin_edges: (0..=100).map(|i| i as f64).collect(),
            counts,
            foreign_counts: None,
        };
        let t = otsu(&h).unwrap();
        assert!(t > 10.0 && t <= 90.0);
        // Ties break low: the first edge above the lower peak.
        assert_eq!(t, 11.0);
    }

    #[test]
    fn otsu_rejects_degenerate() {
        let h = histogram(&[1.0; 10], 4, (0.0, 2.0), None).unwrap();
        assert!(matches!(otsu(&h), Err(Error::DegenerateHistogram(_))));
    }

    #[test]
    fn object_otsu_splits_the_two_bright_modes() {
        // Air (most voxels), base and a small bright inclusion.
        let mut values = vec![0.0f32; 1600];
        values.extend(std::iter::repeat_n(0.3f32, 300));
        values.extend(std::iter::repeat_n(0.8f32, 100));
        let mut v = recon(values, 10);
        v.values[3] = 0.01;
        v.values[1700] = 0.31;
        let global = otsu_threshold(&v).unwrap();
        assert!(global > 0.01 && global <= 0.3);
        let t = otsu_object_threshold(&v).unwrap();
        assert!(t > 0.31 && t <= 0.8, "{t}");
        assert_eq!(threshold(&v, t).count(), 100);
    }

    #[test]
    fn threshold_semantics() {
        let v = recon(vec![0.0, 0.04, 0.05, -1.0, 0.039, 1.0, 0.2, 0.3], 2);
        let all = threshold(&v, -2.0);
        assert_eq!(all.count(), 8);
        let m = threshold(&v, 0.04);
        assert!(m.voxels[1], "boundary value belongs to the foreground");
        assert!(!m.voxels[4]);
        let sweep = threshold_sweep(&v, &[0.04]).unwrap();
        assert_eq!(sweep[0].1, m);
        assert!(threshold_sweep(&v, &[]).is_err());
    }

    #[test]
    fn components3d_basic() {
        let e = BinaryVolume::empty(Dims3::cubic(4));
        assert_eq!(components3d(&e).count(), 0);
        let mut v = BinaryVolume::empty(Dims3::cubic(4));
        v.set(0, 0, 0, true);
        v.set(2, 2, 2, true);
        let c = components3d(&v);
        assert_eq!(c.sizes, vec![1, 1]);
        let mut big = v.clone();
        big.set(2, 2, 3, true);
        let f = remove_small_components(&big, 2);
        assert_eq!(f.count(), 2);
        assert!(!f.get(0, 0, 0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn nested_masks(values in proptest::collection::vec(-1.0f32..1.0, 27), a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let v = recon(values, 3);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(threshold(&v, hi).is_subset_of(&threshold(&v, lo)));
        }

        #[test]
        fn otsu_ignores_count_scaling(counts in proptest::collection::vec(0u64..1000, 16), k in 1u64..50) {
            prop_assume!(counts.iter().filter(|&&c| c > 0).count() >= 2);
            let h = Histogram { bin_edges: (0..=16).map(|i| i as f64 * 0.1).collect(), counts: counts.clone(), foreign_counts: None };
            let scaled = Histogram { counts: counts.iter().map(|c| c * k).collect(), ..h.clone() };
            prop_assert_eq!(otsu(&h).unwrap(), otsu(&scaled).unwrap());
        }

        #[test]
        fn histogram_total_matches_len(values in proptest::collection::vec(-10.0f64..10.0, 0..200), bins in 1usize..40) {
            let h = histogram(&values, bins, (-3.0, 3.0), None).unwrap();
            prop_assert_eq!(h.total() as usize, values.len());
        }
    }
}
