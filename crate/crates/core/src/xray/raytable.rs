//! Precomputed ray/voxel intersection lists for iterative reconstruction.
//!
//! A circular orbit with evenly spaced angles is invariant under quarter
//! turns about the rotation axis (when `nx == ny` and the angle count is a
//! multiple of four), and every geometry is mirror-symmetric in z. Rays are
//! therefore stored only for a canonical subset (first quarter of the angles,
//! lower half of the detector rows). Any other ray is a canonical ray applied
//! to a permuted copy of the volume. When the table would exceed the memory
//! budget, rays are traced on demand instead.

use rayon::prelude::*;

use crate::error::Result;

use super::projector::{Projector, ACCUMULATION_CHUNKS};

/// Default cap on the size of a cached ray table.
pub const DEFAULT_TABLE_BUDGET_BYTES: usize = 1536 << 20;

/// One symmetry image of the canonical ray set.
#[derive(Debug, Clone)]
struct Variant {
    quarter_turns: usize,
    mirrored: bool,
    /// `x_variant[i] = x[perm[i]]`; `None` for the identity.
    perm: Option<Vec<u32>>,
}

#[derive(Debug, Clone)]
struct Table {
    offsets: Vec<usize>,
    entries: Vec<(u32, f32)>,
}

#[derive(Debug, Clone)]
pub struct RayPlan {
    projector: Projector,
    canonical_angles: usize,
    canonical_rows: usize,
    angle_stride: usize,
    variants: Vec<Variant>,
    table: Option<Table>,
}

fn rotational_symmetry(p: &Projector) -> bool {
    let n = p.n_angles();
    let d = p.grid.dims;
    if d.nx != d.ny || !n.is_multiple_of(4) {
        return false;
    }
    let q = n / 4;
    (0..n - q).all(|a| (p.geom.angles[a + q] - p.geom.angles[a] - std::f64::consts::FRAC_PI_2).abs() < 1e-9)
}

/// Permutation taking voxel `i` to the voxel containing `R^q · M · centre(i)`.
fn variant_permutation(p: &Projector, quarter_turns: usize, mirrored: bool) -> Vec<u32> {
    let d = p.grid.dims;
    (0..d.len())
        .map(|idx| {
            let (mut i, mut j, mut k) = d.coords(idx);
            if mirrored {
                k = d.nz - 1 - k;
            }
            // Rz(90°): (x, y) → (−y, x), i.e. (i, j) → (nx−1−j, i).
            for _ in 0..quarter_turns {
                let (ni, nj) = (d.nx - 1 - j, i);
                i = ni;
                j = nj;
            }
            d.index(i, j, k) as u32
        })
        .collect()
}

impl RayPlan {
    pub fn new(projector: Projector, budget_bytes: usize) -> Result<Self> {
        let rows = projector.geom.detector_rows;
        let cols = projector.geom.detector_cols;
        let n = projector.n_angles();
        let rot = rotational_symmetry(&projector);
        let canonical_angles = if rot { n / 4 } else { n };
        let canonical_rows = rows.div_ceil(2);
        let mut variants = Vec::new();
        for q in 0..if rot { 4 } else { 1 } {
            for mirrored in [false, true] {
                let perm = (q > 0 || mirrored).then(|| variant_permutation(&projector, q, mirrored));
                variants.push(Variant {
                    quarter_turns: q,
                    mirrored,
                    perm,
                });
            }
        }
        let d = projector.grid.dims;
        let ss = projector.geom.supersampling;
        let rays = canonical_angles * canonical_rows * cols;
        let worst_case = rays * (d.nx + d.ny + d.nz) * ss * ss * std::mem::size_of::<(u32, f32)>();
        let mut plan = Self {
            projector,
            canonical_angles,
            canonical_rows,
            angle_stride: if rot { n / 4 } else { n },
            variants,
            table: None,
        };
        if worst_case <= budget_bytes && d.len() <= u32::MAX as usize {
            plan.table = Some(plan.build_table());
        }
        Ok(plan)
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    pub fn is_cached(&self) -> bool {
        self.table.is_some()
    }

    fn trace_canonical(&self, a: usize, r: usize, c: usize, out: &mut Vec<(u32, f32)>) {
        out.clear();
        let p = &self.projector;
        let src = p.geom.source(a);
        p.trace_pixel_pub(a, r, c, src, |idx, len| out.push((idx as u32, len as f32)));
    }

    fn build_table(&self) -> Table {
        let cols = self.projector.geom.detector_cols;
        let per_angle: Vec<(Vec<usize>, Vec<(u32, f32)>)> = (0..self.canonical_angles)
            .into_par_iter()
            .map(|a| {
                let mut lens = Vec::with_capacity(self.canonical_rows * cols);
                let mut entries = Vec::new();
                let mut scratch = Vec::new();
                for r in 0..self.canonical_rows {
                    for c in 0..cols {
                        self.trace_canonical(a, r, c, &mut scratch);
                        lens.push(scratch.len());
                        entries.extend_from_slice(&scratch);
                    }
                }
                (lens, entries)
            })
            .collect();
        let total: usize = per_angle.iter().map(|p| p.1.len()).sum();
        let mut offsets = Vec::with_capacity(self.canonical_angles * self.canonical_rows * cols + 1);
        let mut entries = Vec::with_capacity(total);
        offsets.push(0);
        for (lens, e) in per_angle {
            for l in lens {
                offsets.push(offsets.last().unwrap() + l);
            }
            entries.extend(e);
        }
        Table { offsets, entries }
    }

    fn canonical_ray<'a>(&'a self, a: usize, r: usize, c: usize, scratch: &'a mut Vec<(u32, f32)>) -> &'a [(u32, f32)] {
        match &self.table {
            Some(t) => {
                let cols = self.projector.geom.detector_cols;
                let ray = (a * self.canonical_rows + r) * cols + c;
                &t.entries[t.offsets[ray]..t.offsets[ray + 1]]
            }
            None => {
                self.trace_canonical(a, r, c, scratch);
                scratch
            }
        }
    }

    fn actual_ray(&self, v: &Variant, a: usize, r: usize, c: usize) -> Option<usize> {
        let g = &self.projector.geom;
        let rows = g.detector_rows;
        let row = if v.mirrored {
            if rows - 1 - r == r {
                return None;
            }
            rows - 1 - r
        } else {
            r
        };
        let angle = a + v.quarter_turns * self.angle_stride;
        Some((angle * rows + row) * g.detector_cols + c)
    }

    /// Core fused loop. For every ray, `ray_fn(ray_index, forward_value)`
    /// returns the weight to backproject along that ray (or `None`) and a
    /// scalar that is summed over all rays. Work is split into fixed angle
    /// chunks and reduced in chunk order, so results do not depend on the
    /// thread count.
    fn sweep<F>(&self, x: Option<&[f64]>, ray_fn: F) -> (Vec<f64>, f64)
    where
        F: Fn(usize, f64) -> (Option<f64>, f64) + Sync,
    {
        let nv = self.projector.n_voxels();
        let cols = self.projector.geom.detector_cols;
        let views: Vec<Option<Vec<f64>>> = self
            .variants
            .iter()
            .map(|v| match (x, &v.perm) {
                (Some(x), Some(perm)) => Some(perm.iter().map(|&i| x[i as usize]).collect()),
                _ => None,
            })
            .collect();
        let chunks = ACCUMULATION_CHUNKS.min(self.canonical_angles).max(1);
        let ranges: Vec<_> = (0..chunks)
            .map(|c| (c * self.canonical_angles / chunks)..((c + 1) * self.canonical_angles / chunks))
            .collect();
        let partials: Vec<(Vec<f64>, f64)> = ranges
            .par_iter()
            .map(|range| {
                let mut acc = vec![0.0; nv];
                let mut local = vec![0.0; nv];
                let mut scratch = Vec::new();
                let mut scalar = 0.0;
                for (vi, v) in self.variants.iter().enumerate() {
                    let xv: Option<&[f64]> = match (&views[vi], x) {
                        (Some(view), _) => Some(view),
                        (None, Some(x)) => Some(x),
                        (None, None) => None,
                    };
                    let target: &mut [f64] = if v.perm.is_some() { &mut local } else { &mut acc };
                    for a in range.clone() {
                        for r in 0..self.canonical_rows {
                            for c in 0..cols {
                                let Some(ray) = self.actual_ray(v, a, r, c) else { continue };
                                let list = self.canonical_ray(a, r, c, &mut scratch);
                                let fwd = match xv {
                                    Some(xv) => list.iter().map(|&(i, l)| l as f64 * xv[i as usize]).sum(),
                                    None => list.iter().map(|&(_, l)| l as f64).sum(),
                                };
                                let (w, s) = ray_fn(ray, fwd);
                                scalar += s;
                                if let Some(w) = w {
                                    if w != 0.0 {
                                        for &(i, l) in list {
                                            target[i as usize] += l as f64 * w;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if let Some(perm) = &v.perm {
                        for (i, &p) in perm.iter().enumerate() {
                            acc[p as usize] += local[i];
                            local[i] = 0.0;
                        }
                    }
                }
                (acc, scalar)
            })
            .collect();
        let mut total = vec![0.0; nv];
        let mut scalar = 0.0;
        for (part, s) in &partials {
            total.iter_mut().zip(part).for_each(|(t, p)| *t += p);
            scalar += s;
        }
        (total, scalar)
    }

    fn collect_forward(&self, x: Option<&[f64]>) -> Vec<f64> {
        use std::sync::atomic::{AtomicU64, Ordering};
        let out: Vec<AtomicU64> = (0..self.projector.n_rays()).map(|_| AtomicU64::new(0)).collect();
        self.sweep(x, |ray, fwd| {
            out[ray].store(fwd.to_bits(), Ordering::Relaxed);
            (None, 0.0)
        });
        out.into_iter().map(|a| f64::from_bits(a.into_inner())).collect()
    }

    /// `A·x`, angle-major.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.collect_forward(Some(x))
    }

    /// Row sums `A·1`.
    pub fn row_sums(&self) -> Vec<f64> {
        self.collect_forward(None)
    }

    /// `Aᵀ·y`.
    pub fn backproject(&self, y: &[f64]) -> Vec<f64> {
        self.sweep(None, |ray, _| (Some(y[ray]), 0.0)).0
    }

    /// Fused pass: for each ray `g(ray, (A·x)_ray)` yields the value to
    /// backproject and a scalar to sum. Returns `(Aᵀ·w, Σ scalar)`.
    pub fn forward_then_backproject<F>(&self, x: &[f64], g: F) -> (Vec<f64>, f64)
    where
        F: Fn(usize, f64) -> (f64, f64) + Sync,
    {
        self.sweep(Some(x), |ray, fwd| {
            let (w, s) = g(ray, fwd);
            (Some(w), s)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Dims3;
    use crate::xray::{ConeBeamGeometry, VolumeGrid};
    use rand::Rng;

    fn check_against_projector(p: Projector, budget: usize) {
        let plan = RayPlan::new(p.clone(), budget).unwrap();
        let mut rng = crate::rng::stream(3, crate::rng::Domain::Noise, &[0]);
        let x: Vec<f64> = (0..p.n_voxels()).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..p.n_rays()).map(|_| rng.random()).collect();
        let a = plan.forward(&x);
        let b = p.forward(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() <= 1e-5 * (1.0 + v.abs()), "{u} vs {v}");
        }
        let bt = plan.backproject(&y);
        let bp = p.backproject(&y).unwrap();
        for (u, v) in bt.iter().zip(&bp) {
            assert!((u - v).abs() <= 1e-5 * (1.0 + v.abs()));
        }
        // Exact adjoint pair on its own.
        let lhs: f64 = a.iter().zip(&y).map(|(u, v)| u * v).sum();
        let rhs: f64 = x.iter().zip(&bt).map(|(u, v)| u * v).sum();
        assert!((lhs - rhs).abs() / lhs.abs() < 1e-12);
    }

    #[test]
    fn symmetric_cached_plan_matches_direct_projector() {
        let grid = VolumeGrid::new(Dims3::new(10, 10, 7), 0.1);
        let p = Projector::new(ConeBeamGeometry::lab(9, 12, 8, 1.0), grid).unwrap();
        let plan = RayPlan::new(p.clone(), usize::MAX).unwrap();
        assert!(plan.is_cached());
        assert_eq!(plan.variants.len(), 8);
        check_against_projector(p, usize::MAX);
    }

    #[test]
    fn asymmetric_and_uncached_plans_match() {
        let grid = VolumeGrid::new(Dims3::new(9, 8, 6), 0.1);
        let p = Projector::new(ConeBeamGeometry::lab(8, 10, 6, 1.0), grid).unwrap();
        check_against_projector(p.clone(), usize::MAX);
        let plan = RayPlan::new(p.clone(), 0).unwrap();
        assert!(!plan.is_cached());
        check_against_projector(p, 0);
    }
}
