//! Voxel containers shared by the phantom, reconstruction and segmentation
//! stages. All grids are stored x-fastest: `i + nx * (j + ny * k)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Material labels used in phantoms.
pub const BACKGROUND: u8 = 0;
pub const BASE: u8 = 1;
pub const FOREIGN: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims3 {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims3 {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub const fn cubic(n: usize) -> Self {
        Self::new(n, n, n)
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_cubic(&self) -> bool {
        self.nx == self.ny && self.ny == self.nz
    }

    #[inline]
    pub const fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nx * (j + self.ny * k)
    }

    #[inline]
    pub const fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let i = idx % self.nx;
        let j = (idx / self.nx) % self.ny;
        let k = idx / (self.nx * self.ny);
        (i, j, k)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }
}

/// Boolean voxel grid (segmentations, cut cubes, foreign-object masks).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryVolume {
    pub dims: Dims3,
    pub voxels: Vec<bool>,
}

impl BinaryVolume {
    pub fn empty(dims: Dims3) -> Self {
        Self {
            dims,
            voxels: vec![false; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims3, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut voxels = Vec::with_capacity(dims.len());
        for k in 0..dims.nz {
            for j in 0..dims.ny {
                for i in 0..dims.nx {
                    voxels.push(f(i, j, k));
                }
            }
        }
        Self { dims, voxels }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.voxels[self.dims.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: bool) {
        let idx = self.dims.index(i, j, k);
        self.voxels[idx] = v;
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    pub fn is_subset_of(&self, other: &BinaryVolume) -> bool {
        self.dims == other.dims
            && self
                .voxels
                .iter()
                .zip(&other.voxels)
                .all(|(&a, &b)| !a || b)
    }

    /// Density view (1.0 inside, 0.0 outside) for projection.
    pub fn to_density(&self) -> Vec<f64> {
        self.voxels
            .iter()
            .map(|&v| if v { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.voxels.iter().map(|&v| v as u8).collect()
    }

    pub fn from_bytes(dims: Dims3, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != dims.len() {
            return Err(Error::Data(format!(
                "binary volume has {} bytes, expected {}",
                bytes.len(),
                dims.len()
            )));
        }
        Ok(Self {
            dims,
            voxels: bytes.iter().map(|&b| b != 0).collect(),
        })
    }

    /// 3D Jaccard index; 1 when both are empty.
    pub fn jaccard(&self, other: &BinaryVolume) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.voxels.iter().zip(&other.voxels) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Phantom material map.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVolume {
    pub dims: Dims3,
    /// Edge length of one voxel, cm.
    pub voxel_size: f64,
    pub labels: Vec<u8>,
}

impl LabeledVolume {
    pub fn from_binary(base: &BinaryVolume, voxel_size: f64) -> Self {
        Self {
            dims: base.dims,
            voxel_size,
            labels: base.voxels.iter().map(|&v| if v { BASE } else { BACKGROUND }).collect(),
        }
    }

    pub fn mask_of(&self, label: u8) -> BinaryVolume {
        BinaryVolume {
            dims: self.dims,
            voxels: self.labels.iter().map(|&l| l == label).collect(),
        }
    }

    pub fn count_of(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn from_bytes(dims: Dims3, voxel_size: f64, bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() != dims.len() {
            return Err(Error::Data(format!(
                "label volume has {} bytes, expected {}",
                bytes.len(),
                dims.len()
            )));
        }
        if let Some(bad) = bytes.iter().find(|&&b| b > FOREIGN) {
            return Err(Error::Data(format!("unknown material label {bad}")));
        }
        Ok(Self {
            dims,
            voxel_size,
            labels: bytes,
        })
    }
}

/// Reconstructed attenuation volume, 1/cm.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconVolume {
    pub dims: Dims3,
    pub voxel_size: f64,
    pub values: Vec<f32>,
}

impl ReconVolume {
    pub fn zeros(dims: Dims3, voxel_size: f64) -> Self {
        Self {
            dims,
            voxel_size,
            values: vec![0.0; dims.len()],
        }
    }

    pub fn min_max(&self) -> Option<(f32, f32)> {
        self.values.iter().fold(None, |acc, &v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
    }
}
