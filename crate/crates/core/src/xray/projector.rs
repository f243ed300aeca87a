//! Ray-driven cone-beam projector.
//!
//! Each detector pixel is sampled by one (or `supersampling²`) straight rays
//! from the source through the pixel. Rays are clipped to the voxel grid and
//! walked voxel by voxel (Amanatides–Woo incremental traversal), yielding the
//! exact intersection length with every voxel crossed. Forward projection and
//! backprojection share the same traversal, so they are exact adjoints.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::LabeledVolume;
use crate::math::{self, Vec3};

use super::geometry::{ConeBeamGeometry, VolumeGrid};

/// Backprojection accumulates into this many partial volumes, one per angle
/// chunk, then sums them in chunk order. The count is independent of the
/// thread pool so results are bit-identical for any thread count.
pub const ACCUMULATION_CHUNKS: usize = 16;

/// Walks the ray `origin + t·dir` (world cm, `dir` unit length) through the
/// grid and calls `visit(voxel_index, length_cm)` for every voxel it crosses.
#[inline]
pub fn trace_ray(grid: &VolumeGrid, origin: Vec3, dir: Vec3, mut visit: impl FnMut(usize, f64)) {
    let v = grid.voxel_size;
    let lo = grid.origin();
    let n = [grid.dims.nx, grid.dims.ny, grid.dims.nz];
    // Position in voxel units.
    let p0 = [(origin[0] - lo[0]) / v, (origin[1] - lo[1]) / v, (origin[2] - lo[2]) / v];

    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for a in 0..3 {
        if dir[a] == 0.0 {
            if p0[a] < 0.0 || p0[a] > n[a] as f64 {
                return;
            }
            continue;
        }
        let inv = v / dir[a];
        let t0 = (0.0 - p0[a]) * inv;
        let t1 = (n[a] as f64 - p0[a]) * inv;
        let (a0, a1) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
        t_enter = t_enter.max(a0);
        t_exit = t_exit.min(a1);
    }
    let t_enter = t_enter.max(0.0);
    if !(t_exit > t_enter) {
        return;
    }

    let mut idx = [0isize; 3];
    let mut step = [0isize; 3];
    let mut t_next = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let p = p0[a] + t_enter * dir[a] / v;
        let i = (p.floor() as isize).clamp(0, n[a] as isize - 1);
        idx[a] = i;
        if dir[a] > 0.0 {
            step[a] = 1;
            t_delta[a] = v / dir[a];
            t_next[a] = t_enter + ((i + 1) as f64 - p) * t_delta[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            t_delta[a] = -v / dir[a];
            t_next[a] = t_enter + (p - i as f64) * t_delta[a];
        }
    }
    let stride = [1isize, n[0] as isize, (n[0] * n[1]) as isize];
    let mut flat = idx[0] + idx[1] * stride[1] + idx[2] * stride[2];
    let mut t = t_enter;
    loop {
        let a = if t_next[0] < t_next[1] {
            if t_next[0] < t_next[2] { 0 } else { 2 }
        } else if t_next[1] < t_next[2] {
            1
        } else {
            2
        };
        let tn = t_next[a];
        if tn >= t_exit {
            let len = t_exit - t;
            if len > 0.0 {
                visit(flat as usize, len);
            }
            return;
        }
        let len = tn - t;
        if len > 0.0 {
            visit(flat as usize, len);
        }
        t = tn;
        idx[a] += step[a];
        if idx[a] < 0 || idx[a] >= n[a] as isize {
            return;
        }
        flat += step[a] * stride[a];
        t_next[a] += t_delta[a];
    }
}

/// Linear projection operator `A` for one geometry and voxel grid.
#[derive(Debug, Clone)]
pub struct Projector {
    pub geom: ConeBeamGeometry,
    pub grid: VolumeGrid,
}

impl Projector {
    pub fn new(geom: ConeBeamGeometry, grid: VolumeGrid) -> Result<Self> {
        geom.validate()?;
        if grid.dims.is_empty() || !(grid.voxel_size > 0.0) {
            return Err(Error::Config("volume grid must be non-empty with positive voxel size".into()));
        }
        let e = grid.extent();
        let radius = 0.5 * (e[0] * e[0] + e[1] * e[1]).sqrt();
        if radius >= geom.source_origin_dist {
            return Err(Error::Config(format!(
                "volume radius {radius} cm reaches the source orbit at {} cm",
                geom.source_origin_dist
            )));
        }
        Ok(Self { geom, grid })
    }

    pub fn n_angles(&self) -> usize {
        self.geom.angles.len()
    }

    pub fn pixels_per_angle(&self) -> usize {
        self.geom.pixels_per_angle()
    }

    pub fn n_rays(&self) -> usize {
        self.n_angles() * self.pixels_per_angle()
    }

    pub fn n_voxels(&self) -> usize {
        self.grid.dims.len()
    }

    fn check_angle(&self, angle: usize) -> Result<()> {
        if angle >= self.n_angles() {
            return Err(Error::Config(format!(
                "angle index {angle} out of range ({} angles)",
                self.n_angles()
            )));
        }
        Ok(())
    }

    /// Visits every (voxel, weight) in row `r` pixel `c` of angle `a`.
    #[inline]
    pub fn trace_pixel_pub(&self, a: usize, r: usize, c: usize, source: Vec3, visit: impl FnMut(usize, f64)) {
        self.trace_pixel(a, r, c, source, visit)
    }

    #[inline]
    fn trace_pixel(&self, a: usize, r: usize, c: usize, source: Vec3, mut visit: impl FnMut(usize, f64)) {
        let ss = self.geom.supersampling;
        let w = 1.0 / (ss * ss) as f64;
        for sv in 0..ss {
            for su in 0..ss {
                let u = c as f64 + (su as f64 + 0.5) / ss as f64;
                let v = r as f64 + (sv as f64 + 0.5) / ss as f64;
                let target = self.geom.detector_point(a, u, v);
                let d = math::sub(target, source);
                let dir = math::scale(d, 1.0 / math::norm(d));
                trace_ray(&self.grid, source, dir, |idx, len| visit(idx, len * w));
            }
        }
    }

    /// `(A x)` for a single angle into `out` (rows × cols, row-major).
    pub fn forward_angle_into(&self, x: &[f64], a: usize, out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_voxels());
        let cols = self.geom.detector_cols;
        let source = self.geom.source(a);
        for (p, o) in out.iter_mut().enumerate() {
            let (r, c) = (p / cols, p % cols);
            let mut acc = 0.0;
            self.trace_pixel(a, r, c, source, |idx, len| acc += len * x[idx]);
            *o = acc;
        }
    }

    pub fn forward_angle(&self, x: &[f64], a: usize) -> Result<Vec<f64>> {
        self.check_len(x.len(), self.n_voxels(), "volume")?;
        self.check_angle(a)?;
        let mut out = vec![0.0; self.pixels_per_angle()];
        self.forward_angle_into(x, a, &mut out);
        Ok(out)
    }

    /// Full projection stack, angle-major.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x.len(), self.n_voxels(), "volume")?;
        let ppa = self.pixels_per_angle();
        let mut out = vec![0.0; self.n_rays()];
        out.par_chunks_mut(ppa)
            .enumerate()
            .for_each(|(a, img)| self.forward_angle_into(x, a, img));
        Ok(out)
    }

    /// Adds `Aᵀ y` for a single angle into `acc`.
    pub fn backproject_angle_into(&self, y: &[f64], a: usize, acc: &mut [f64]) {
        let cols = self.geom.detector_cols;
        let source = self.geom.source(a);
        for (p, &w) in y.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let (r, c) = (p / cols, p % cols);
            self.trace_pixel(a, r, c, source, |idx, len| acc[idx] += len * w);
        }
    }

    pub fn backproject_angle(&self, y: &[f64], a: usize) -> Result<Vec<f64>> {
        self.check_len(y.len(), self.pixels_per_angle(), "image")?;
        self.check_angle(a)?;
        let mut acc = vec![0.0; self.n_voxels()];
        self.backproject_angle_into(y, a, &mut acc);
        Ok(acc)
    }

    /// `Aᵀ y` for a full angle-major stack.
    pub fn backproject(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_len(y.len(), self.n_rays(), "projection stack")?;
        let ppa = self.pixels_per_angle();
        Ok(self.accumulate_over_angles(|a, acc| {
            self.backproject_angle_into(&y[a * ppa..(a + 1) * ppa], a, acc)
        }))
    }

    /// Runs `f(angle, partial)` for every angle, accumulating into per-chunk
    /// partial volumes that are summed in a fixed order.
    pub fn accumulate_over_angles<F>(&self, f: F) -> Vec<f64>
    where
        F: Fn(usize, &mut [f64]) + Sync,
    {
        let na = self.n_angles();
        let nv = self.n_voxels();
        let chunks = angle_chunks(na);
        let partials: Vec<Vec<f64>> = chunks
            .par_iter()
            .map(|range| {
                let mut acc = vec![0.0; nv];
                for a in range.clone() {
                    f(a, &mut acc);
                }
                acc
            })
            .collect();
        let mut total = vec![0.0; nv];
        for part in &partials {
            for (t, p) in total.iter_mut().zip(part) {
                *t += p;
            }
        }
        total
    }

    /// Per-material path lengths for one angle: element `m` of the result is
    /// the image of ray lengths through voxels labelled `m`.
    pub fn path_lengths_by_label(&self, vol: &LabeledVolume, a: usize, n_labels: usize) -> Result<Vec<Vec<f64>>> {
        self.check_volume(vol)?;
        self.check_angle(a)?;
        let ppa = self.pixels_per_angle();
        let cols = self.geom.detector_cols;
        let source = self.geom.source(a);
        let mut out = vec![vec![0.0; ppa]; n_labels];
        let mut lens = vec![0.0; n_labels];
        for p in 0..ppa {
            lens.iter_mut().for_each(|l| *l = 0.0);
            self.trace_pixel(a, p / cols, p % cols, source, |idx, len| {
                let l = vol.labels[idx] as usize;
                if l < n_labels {
                    lens[l] += len;
                }
            });
            for (m, l) in lens.iter().enumerate() {
                out[m][p] = *l;
            }
        }
        Ok(out)
    }

    /// Path lengths through voxels of `material` only.
    pub fn trace_path_lengths(&self, vol: &LabeledVolume, a: usize, material: u8) -> Result<Vec<f64>> {
        let mut all = self.path_lengths_by_label(vol, a, material as usize + 1)?;
        Ok(all.swap_remove(material as usize))
    }

    fn check_volume(&self, vol: &LabeledVolume) -> Result<()> {
        if vol.dims != self.grid.dims || (vol.voxel_size - self.grid.voxel_size).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "volume {:?} @ {} cm does not match projector grid {:?} @ {} cm",
                vol.dims, vol.voxel_size, self.grid.dims, self.grid.voxel_size
            )));
        }
        Ok(())
    }

    fn check_len(&self, got: usize, want: usize, what: &str) -> Result<()> {
        if got != want {
            return Err(Error::Config(format!("{what} has {got} elements, expected {want}")));
        }
        Ok(())
    }
}

/// Contiguous angle ranges used for deterministic accumulation.
pub fn angle_chunks(n_angles: usize) -> Vec<std::ops::Range<usize>> {
    let chunks = ACCUMULATION_CHUNKS.min(n_angles).max(1);
    (0..chunks)
        .map(|c| (c * n_angles / chunks)..((c + 1) * n_angles / chunks))
        .collect()
}
