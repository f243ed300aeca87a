//! Virtual projection of 3D foreign-object segmentations into per-angle 2D
//! ground-truth masks, and resizing of radiograph/mask training pairs.

use std::path::Path;

use image::{ImageBuffer, Luma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryVolume, LabeledVolume, FOREIGN};
use crate::xray::{Projector, Radiograph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// Projected from a reconstructed and segmented volume.
    Workflow,
    /// Projected straight from the phantom's foreign-object labels.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub rows: usize,
    pub cols: usize,
    pub angle_index: usize,
    pub object_id: u32,
    pub provenance: Provenance,
    /// Row-major.
    pub pixels: Vec<bool>,
}

impl BinaryMask {
    pub fn new(rows: usize, cols: usize, pixels: Vec<bool>) -> Self {
        assert_eq!(pixels.len(), rows * cols);
        Self {
            rows,
            cols,
            angle_index: 0,
            object_id: 0,
            provenance: Provenance::Workflow,
            pixels,
        }
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| p as u8).collect()
    }
}

/// Path-length threshold for a "non-zero" detector pixel: a millionth of a
/// voxel edge.
pub fn default_eps_len(voxel_size: f64) -> f64 {
    1e-6 * voxel_size
}

/// Fails unless `geometry_hash` (from the object's scan sidecar) matches the
/// projector's geometry.
pub fn ensure_same_geometry(projector: &Projector, geometry_hash: &str) -> Result<()> {
    let own = projector.geom.hash();
    if own != geometry_hash {
        return Err(Error::Config(format!(
            "ground-truth geometry {own} differs from the scan geometry {geometry_hash}"
        )));
    }
    Ok(())
}

fn check_mask_grid(projector: &Projector, mask3d: &BinaryVolume) -> Result<()> {
    if mask3d.dims != projector.grid.dims {
        return Err(Error::Config(format!(
            "segmentation {:?} does not match the projector grid {:?}",
            mask3d.dims, projector.grid.dims
        )));
    }
    Ok(())
}

/// Forward-projects `mask3d` as a unit-density volume; a detector pixel is
/// true iff its ray length through the mask exceeds `eps_len` (cm).
pub fn virtual_project(
    projector: &Projector,
    mask3d: &BinaryVolume,
    angle: usize,
    eps_len: f64,
    object_id: u32,
    provenance: Provenance,
) -> Result<BinaryMask> {
    check_mask_grid(projector, mask3d)?;
    let density = mask3d.to_density();
    let img = projector.forward_angle(&density, angle)?;
    Ok(BinaryMask {
        rows: projector.geom.detector_rows,
        cols: projector.geom.detector_cols,
        angle_index: angle,
        object_id,
        provenance,
        pixels: img.iter().map(|&l| l > eps_len).collect(),
    })
}

/// [`virtual_project`] for every angle of the geometry.
pub fn virtual_project_all(
    projector: &Projector,
    mask3d: &BinaryVolume,
    eps_len: f64,
    object_id: u32,
    provenance: Provenance,
) -> Result<Vec<BinaryMask>> {
    check_mask_grid(projector, mask3d)?;
    let density = mask3d.to_density();
    let (rows, cols) = (projector.geom.detector_rows, projector.geom.detector_cols);
    Ok((0..projector.n_angles())
        .into_par_iter()
        .map(|a| {
            let mut img = vec![0.0; rows * cols];
            projector.forward_angle_into(&density, a, &mut img);
            BinaryMask {
                rows,
                cols,
                angle_index: a,
                object_id,
                provenance,
                pixels: img.iter().map(|&l| l > eps_len).collect(),
            }
        })
        .collect())
}

/// Ground truth projected straight from the phantom's label-2 voxels.
pub fn absolute_ground_truth(projector: &Projector, phantom: &LabeledVolume, angle: usize, object_id: u32) -> Result<BinaryMask> {
    virtual_project(
        projector,
        &phantom.mask_of(FOREIGN),
        angle,
        default_eps_len(phantom.voxel_size),
        object_id,
        Provenance::Absolute,
    )
}

pub fn absolute_ground_truth_all(projector: &Projector, phantom: &LabeledVolume, object_id: u32) -> Result<Vec<BinaryMask>> {
    virtual_project_all(
        projector,
        &phantom.mask_of(FOREIGN),
        default_eps_len(phantom.voxel_size),
        object_id,
        Provenance::Absolute,
    )
}

/// Catmull–Rom cubic convolution kernel (`a = -0.5`):
///
/// ```text
/// W(x) = (a+2)|x|³ − (a+3)|x|² + 1         for |x| ≤ 1
///        a|x|³ − 5a|x|² + 8a|x| − 4a       for 1 < |x| < 2
///        0                                 otherwise
/// ```
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Source coordinate sampled by output index `dst` when resampling `n_in`
/// samples to `n_out` (pixel centres aligned).
pub fn source_coordinate(dst: usize, n_in: usize, n_out: usize) -> f64 {
    (dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5
}

/// Four `(index, weight)` taps for sampling at `x`; indices clamp to the edge.
fn taps(x: f64, n: usize) -> [(usize, f64); 4] {
    let base = x.floor();
    let frac = x - base;
    std::array::from_fn(|t| {
        let i = (base as isize + t as isize - 1).clamp(0, n as isize - 1) as usize;
        (i, cubic_kernel(frac - (t as f64 - 1.0)))
    })
}

/// Separable bicubic resize of a row-major `rows × cols` image.
pub fn resize_bicubic(data: &[f64], rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Vec<f64> {
    assert_eq!(data.len(), rows * cols);
    let col_taps: Vec<_> = (0..out_cols).map(|c| taps(source_coordinate(c, cols, out_cols), cols)).collect();
    let row_taps: Vec<_> = (0..out_rows).map(|r| taps(source_coordinate(r, rows, out_rows), rows)).collect();
    // Horizontal pass.
    let mut tmp = vec![0.0; rows * out_cols];
    for r in 0..rows {
        let src = &data[r * cols..(r + 1) * cols];
        for (c, tp) in col_taps.iter().enumerate() {
            tmp[r * out_cols + c] = tp.iter().map(|&(i, w)| w * src[i]).sum();
        }
    }
    // Vertical pass.
    let mut out = vec![0.0; out_rows * out_cols];
    for (r, tp) in row_taps.iter().enumerate() {
        for c in 0..out_cols {
            out[r * out_cols + c] = tp.iter().map(|&(i, w)| w * tmp[i * out_cols + c]).sum();
        }
    }
    out
}

/// Mask re-binarization level after interpolation.
pub const MASK_REBINARIZE: f64 = 0.5;

/// Bicubic resize of a training pair; the mask's {0,1} field is
/// interpolated and thresholded at 0.5 again.
pub fn resize_pair(radiograph: &Radiograph, mask: &BinaryMask, target: (usize, usize)) -> Result<(Radiograph, BinaryMask)> {
    let (tr, tc) = target;
    if radiograph.rows != mask.rows || radiograph.cols != mask.cols {
        return Err(Error::Data("radiograph and mask differ in size".into()));
    }
    if radiograph.angle_index != mask.angle_index || radiograph.object_id != mask.object_id {
        return Err(Error::Data("radiograph and mask belong to different views".into()));
    }
    if tr == 0 || tc == 0 || tr > radiograph.rows || tc > radiograph.cols {
        return Err(Error::Param(format!(
            "resize target {tr}×{tc} must be positive and not exceed {}×{}",
            radiograph.rows, radiograph.cols
        )));
    }
    let values = resize_bicubic(&radiograph.values, radiograph.rows, radiograph.cols, tr, tc);
    let field: Vec<f64> = mask.pixels.iter().map(|&p| p as u8 as f64).collect();
    let field = resize_bicubic(&field, mask.rows, mask.cols, tr, tc);
    Ok((
        Radiograph {
            rows: tr,
            cols: tc,
            values,
            ..radiograph.clone()
        },
        BinaryMask {
            rows: tr,
            cols: tc,
            pixels: field.iter().map(|&v| v >= MASK_REBINARIZE).collect(),
            ..mask.clone()
        },
    ))
}

/// 16-bit greyscale PNG scaled from the image's min to max.
pub fn save_radiograph_png(values: &[f64], rows: usize, cols: usize, path: &Path) -> Result<()> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let buf: Vec<u16> = values
        .iter()
        .map(|&v| (((v - lo) / span) * 65535.0).round() as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(cols as u32, rows as u32, buf).ok_or_else(|| Error::Data("image size".into()))?;
    if let Some(dir) = path.parent() {
        crate::io::ensure_dir(dir)?;
    }
    img.save(path)?;
    Ok(())
}

/// 8-bit PNG, 255 for true pixels.
pub fn save_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let buf: Vec<u8> = mask.pixels.iter().map(|&p| if p { 255 } else { 0 }).collect();
    let img: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(mask.cols as u32, mask.rows as u32, buf)
        .ok_or_else(|| Error::Data("image size".into()))?;
    if let Some(dir) = path.parent() {
        crate::io::ensure_dir(dir)?;
    }
    img.save(path)?;
    Ok(())
}

/// Sidecar of a raw `.u8` mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskMeta {
    pub rows: usize,
    pub cols: usize,
    pub object_id: u32,
    pub angle_index: usize,
    pub provenance: Provenance,
    /// Hash of the configuration that produced the mask, when known.
    #[serde(default)]
    pub config_hash: Option<String>,
}

/// Writes `mask` as one byte per pixel (0/1, row-major) plus a JSON sidecar.
pub fn write_mask_raw(mask: &BinaryMask, path: &Path, config_hash: Option<&str>) -> Result<()> {
    crate::io::write_bytes(path, &mask.to_bytes())?;
    crate::io::write_json(
        &crate::io::sidecar_path(path),
        &MaskMeta {
            rows: mask.rows,
            cols: mask.cols,
            object_id: mask.object_id,
            angle_index: mask.angle_index,
            provenance: mask.provenance,
            config_hash: config_hash.map(str::to_owned),
        },
    )
}

/// Reads a `.u8` or `.png` mask. A raw mask without a sidecar takes its
/// shape from `shape_hint`.
pub fn read_mask(path: &Path, shape_hint: Option<(usize, usize)>) -> Result<BinaryMask> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let (rows, cols, pixels, meta) = match ext {
        "png" => {
            let (r, c, p) = load_mask_png(path)?;
            (r, c, p, None)
        }
        "u8" => {
            let bytes = crate::io::read_bytes(path)?;
            let side = crate::io::sidecar_path(path);
            let meta: Option<MaskMeta> = if side.exists() { Some(crate::io::read_json(&side)?) } else { None };
            let (r, c) = meta
                .as_ref()
                .map(|m| (m.rows, m.cols))
                .or(shape_hint)
                .ok_or_else(|| Error::Data(format!("{}: raw mask without shape", path.display())))?;
            if bytes.len() != r * c {
                return Err(Error::Data(format!(
                    "{}: {} bytes, expected {r}×{c}",
                    path.display(),
                    bytes.len()
                )));
            }
            (r, c, bytes.into_iter().map(|b| b != 0).collect(), meta)
        }
        _ => return Err(Error::Data(format!("{}: unsupported mask format", path.display()))),
    };
    let mut mask = BinaryMask::new(rows, cols, pixels);
    if let Some(m) = meta {
        mask.object_id = m.object_id;
        mask.angle_index = m.angle_index;
        mask.provenance = m.provenance;
    }
    Ok(mask)
}

/// Reads a PNG mask; any non-zero pixel is true.
pub fn load_mask_png(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw().into_iter().map(|v| v != 0).collect()))
}
