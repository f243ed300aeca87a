use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Dims3;
use crate::math::Vec3;

/// Circular-orbit cone-beam geometry.
///
/// The rotation axis is the world z axis through the origin. At angle `θ`
/// the source sits at `Rz(θ)·(0, -d_so, 0)` and the detector centre at
/// `Rz(θ)·(0, d_od, 0)`; detector columns run along `Rz(θ)·x̂` and rows
/// along `ẑ`. Pixel `(r, c)` has its centre at offsets
/// `(c + ½ - cols/2, r + ½ - rows/2)` pixels from the detector centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeBeamGeometry {
    /// Source to rotation axis, cm.
    pub source_origin_dist: f64,
    /// Rotation axis to detector, cm.
    pub origin_detector_dist: f64,
    pub detector_rows: usize,
    pub detector_cols: usize,
    /// Detector pixel pitch, cm.
    pub pixel_size: f64,
    /// Projection angles, radians, strictly increasing in `[0, 2π)`.
    pub angles: Vec<f64>,
    /// Rays per pixel along each detector axis.
    #[serde(default = "one")]
    pub supersampling: usize,
}

fn one() -> usize {
    1
}

pub const LAB_SOURCE_ORIGIN_CM: f64 = 44.14;
pub const LAB_SOURCE_DETECTOR_CM: f64 = 69.80;

impl ConeBeamGeometry {
    /// Evenly spaced angles over a full turn.
    pub fn full_turn_angles(n: usize) -> Vec<f64> {
        (0..n)
            .map(|k| std::f64::consts::TAU * k as f64 / n as f64)
            .collect()
    }

    /// Lab distances with a detector whose footprint at the rotation axis
    /// matches the width of `volume` (`volume_width_cm`).
    pub fn lab(rows: usize, cols: usize, n_angles: usize, volume_width_cm: f64) -> Self {
        let dso = LAB_SOURCE_ORIGIN_CM;
        let dod = LAB_SOURCE_DETECTOR_CM - LAB_SOURCE_ORIGIN_CM;
        let magnification = (dso + dod) / dso;
        Self {
            source_origin_dist: dso,
            origin_detector_dist: dod,
            detector_rows: rows,
            detector_cols: cols,
            pixel_size: volume_width_cm * magnification / cols as f64,
            angles: Self::full_turn_angles(n_angles),
            supersampling: 1,
        }
    }

    pub fn magnification(&self) -> f64 {
        (self.source_origin_dist + self.origin_detector_dist) / self.source_origin_dist
    }

    pub fn pixels_per_angle(&self) -> usize {
        self.detector_rows * self.detector_cols
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.source_origin_dist > 0.0 && self.origin_detector_dist > 0.0) {
            return Err(Error::Config("geometry distances must be positive".into()));
        }
        if self.detector_rows == 0 || self.detector_cols == 0 {
            return Err(Error::Config("detector must have at least one pixel".into()));
        }
        if !(self.pixel_size > 0.0) {
            return Err(Error::Config("pixel size must be positive".into()));
        }
        if self.supersampling == 0 {
            return Err(Error::Config("supersampling must be at least 1".into()));
        }
        if self.angles.is_empty() {
            return Err(Error::Config("geometry has no angles".into()));
        }
        let tau = std::f64::consts::TAU;
        if self.angles.iter().any(|&a| !(0.0..tau).contains(&a)) {
            return Err(Error::Config("angles must lie in [0, 2π)".into()));
        }
        if self.angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("angles must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Source position at angle index `a`.
    pub fn source(&self, a: usize) -> Vec3 {
        let (s, c) = self.angles[a].sin_cos();
        let d = self.source_origin_dist;
        [d * s, -d * c, 0.0]
    }

    /// World position of detector coordinate `(u, v)` in pixel units
    /// (pixel centre of `(r, c)` is `u = c + ½`, `v = r + ½`).
    pub fn detector_point(&self, a: usize, u: f64, v: f64) -> Vec3 {
        let (s, c) = self.angles[a].sin_cos();
        let du = (u - self.detector_cols as f64 / 2.0) * self.pixel_size;
        let dv = (v - self.detector_rows as f64 / 2.0) * self.pixel_size;
        let d = self.origin_detector_dist;
        // centre Rz·(0, d, 0) = (-d s, d c, 0); u axis Rz·x̂ = (c, s, 0).
        [-d * s + du * c, d * c + du * s, dv]
    }

    /// Angle index closest to `angle` (radians, wrapped).
    pub fn nearest_angle_index(&self, angle: f64) -> usize {
        let tau = std::f64::consts::TAU;
        let target = angle.rem_euclid(tau);
        let mut best = (f64::INFINITY, 0);
        for (i, &a) in self.angles.iter().enumerate() {
            let d = (a - target).rem_euclid(tau);
            let d = d.min(tau - d);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    pub fn hash(&self) -> String {
        crate::io::hash_json(self)
    }
}

/// Placement of the voxel grid: centred on the rotation axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeGrid {
    pub dims: Dims3,
    /// cm.
    pub voxel_size: f64,
}

impl VolumeGrid {
    pub fn new(dims: Dims3, voxel_size: f64) -> Self {
        Self { dims, voxel_size }
    }

    pub fn extent(&self) -> Vec3 {
        [
            self.dims.nx as f64 * self.voxel_size,
            self.dims.ny as f64 * self.voxel_size,
            self.dims.nz as f64 * self.voxel_size,
        ]
    }

    /// Lower corner of the grid in world coordinates.
    pub fn origin(&self) -> Vec3 {
        let e = self.extent();
        [-e[0] / 2.0, -e[1] / 2.0, -e[2] / 2.0]
    }

    /// World position of the centre of voxel `(i, j, k)`.
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let o = self.origin();
        let v = self.voxel_size;
        [
            o[0] + (i as f64 + 0.5) * v,
            o[1] + (j as f64 + 0.5) * v,
            o[2] + (k as f64 + 0.5) * v,
        ]
    }
}
