//! Procedural phantoms: a centred cube with its eight corners cut off by
//! random planes, rotated at random, with ellipsoidal foreign objects
//! embedded in it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryVolume, Dims3, LabeledVolume, FOREIGN};
use crate::math::{self, Mat3, Vec3};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    /// Voxels per axis of the (cubic) object space.
    pub volume_dim: usize,
    /// Voxels per axis of the uncut cube.
    pub cube_dim: usize,
    pub ellipsoid_radius_min: f64,
    pub ellipsoid_radius_max: f64,
    /// `(count, probability)` pairs for the number of foreign objects.
    pub foreign_count_distribution: Vec<(u32, f64)>,
    pub seed: u64,
    #[serde(default = "default_voxel_size")]
    pub voxel_size_cm: f64,
}

fn default_voxel_size() -> f64 {
    0.1
}

impl Default for PhantomParams {
    /// Full-scale settings: 128³ object space, 64³ cube, radii 3 to 7 voxels,
    /// one or two foreign objects with equal probability.
    fn default() -> Self {
        Self {
            volume_dim: 128,
            cube_dim: 64,
            ellipsoid_radius_min: 3.0,
            ellipsoid_radius_max: 7.0,
            foreign_count_distribution: vec![(1, 0.5), (2, 0.5)],
            seed: 0,
            voxel_size_cm: default_voxel_size(),
        }
    }
}

impl PhantomParams {
    /// Half-size variant used for quick runs (64³ space, 32³ cube).
    pub fn desk() -> Self {
        Self {
            volume_dim: 64,
            cube_dim: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.volume_dim == 0 || self.cube_dim == 0 {
            return Err(Error::Param("volume and cube dims must be positive".into()));
        }
        if self.cube_dim > self.volume_dim {
            return Err(Error::Param(format!(
                "cube_dim {} exceeds volume_dim {}",
                self.cube_dim, self.volume_dim
            )));
        }
        let (lo, hi) = (self.ellipsoid_radius_min, self.ellipsoid_radius_max);
        if !(lo > 0.0 && lo <= hi && hi < self.cube_dim as f64 / 2.0) {
            return Err(Error::Param(format!(
                "ellipsoid radii must satisfy 0 < {lo} <= {hi} < cube_dim/2"
            )));
        }
        if self.foreign_count_distribution.is_empty() {
            return Err(Error::Param("foreign count distribution is empty".into()));
        }
        if self.foreign_count_distribution.iter().any(|&(_, p)| !(p >= 0.0)) {
            return Err(Error::Param("negative foreign count probability".into()));
        }
        let total: f64 = self.foreign_count_distribution.iter().map(|&(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Param(format!(
                "foreign count probabilities sum to {total}, not 1"
            )));
        }
        if !(self.voxel_size_cm > 0.0) {
            return Err(Error::Param("voxel size must be positive".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims3 {
        Dims3::cubic(self.volume_dim)
    }

    fn draw_count<R: Rng>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for &(count, p) in &self.foreign_count_distribution {
            acc += p;
            if u < acc {
                return count;
            }
        }
        self.foreign_count_distribution.last().map(|&(c, _)| c).unwrap_or(0)
    }
}

/// A cutting plane; voxels with `normal · (x - anchor) > 0` are removed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutPlane {
    pub anchor: Vec3,
    /// Unit normal pointing away from the cube centre.
    pub normal: Vec3,
}

/// Per-corner positions of the three cut points along the outgoing edges,
/// as fractions of the edge length in `[0, 0.5]`.
pub type CutFractions = [[f64; 3]; 8];

pub fn random_cut_fractions<R: Rng>(rng: &mut R) -> CutFractions {
    let mut f = [[0.0; 3]; 8];
    for corner in f.iter_mut() {
        for t in corner.iter_mut() {
            *t = rng.random_range(0.0..=0.5);
        }
    }
    f
}

fn cube_bounds(params: &PhantomParams) -> (f64, f64) {
    let lo = (params.volume_dim - params.cube_dim) as f64 / 2.0;
    (lo, lo + params.cube_dim as f64)
}

/// Planes through the three cut points of every corner. Corners whose cut
/// points coincide (zero-area triangle) yield no plane.
pub fn corner_planes(params: &PhantomParams, fractions: &CutFractions) -> Vec<CutPlane> {
    let (lo, hi) = cube_bounds(params);
    let edge = params.cube_dim as f64;
    let mid = (lo + hi) / 2.0;
    let center = [mid; 3];
    let mut planes = Vec::with_capacity(8);
    for (c, f) in fractions.iter().enumerate() {
        let side = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
        let corner: Vec3 = std::array::from_fn(|a| if side[a] == 0 { lo } else { hi });
        let pts: [Vec3; 3] = std::array::from_fn(|a| {
            let mut p = corner;
            let dir = if side[a] == 0 { 1.0 } else { -1.0 };
            p[a] += dir * f[a] * edge;
            p
        });
        let mut n = math::cross(math::sub(pts[1], pts[0]), math::sub(pts[2], pts[0]));
        let len = math::norm(n);
        if len <= 1e-12 * edge * edge {
            continue;
        }
        n = math::scale(n, 1.0 / len);
        if math::dot(n, math::sub(center, pts[0])) > 0.0 {
            n = math::scale(n, -1.0);
        }
        planes.push(CutPlane {
            anchor: pts[0],
            normal: n,
        });
    }
    planes
}

/// Rasterizes the centred cube minus everything strictly beyond the corner
/// planes given by `fractions`.
pub fn cut_cube_with_fractions(params: &PhantomParams, fractions: &CutFractions) -> Result<BinaryVolume> {
    params.validate()?;
    let (lo, hi) = cube_bounds(params);
    let planes = corner_planes(params, fractions);
    Ok(BinaryVolume::from_fn(params.dims(), |i, j, k| {
        let p = [i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5];
        if p.iter().any(|&c| c < lo || c > hi) {
            return false;
        }
        planes
            .iter()
            .all(|pl| math::dot(pl.normal, math::sub(p, pl.anchor)) <= 0.0)
    }))
}

pub fn make_cut_cube<R: Rng>(params: &PhantomParams, rng: &mut R) -> Result<BinaryVolume> {
    params.validate()?;
    let fractions = random_cut_fractions(rng);
    cut_cube_with_fractions(params, &fractions)
}

pub fn random_euler_angles<R: Rng>(rng: &mut R) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU))
}

/// `Rz(γ)·Ry(β)·Rx(α)` for angles `[α, β, γ]`.
pub fn euler_matrix(angles: [f64; 3]) -> Mat3 {
    Mat3::rot_z(angles[2])
        .mul(&Mat3::rot_y(angles[1]))
        .mul(&Mat3::rot_x(angles[0]))
}

/// Rotates a cubic volume about its centre with nearest-neighbour
/// resampling. Samples falling outside the grid are dropped.
pub fn rotate_volume(vol: &BinaryVolume, angles: [f64; 3]) -> Result<BinaryVolume> {
    if !vol.dims.is_cubic() {
        return Err(Error::Param(format!("rotation needs a cubic volume, got {:?}", vol.dims)));
    }
    let n = vol.dims.nx;
    let half = n as f64 / 2.0;
    let inv = euler_matrix(angles).transpose();
    Ok(BinaryVolume::from_fn(vol.dims, |i, j, k| {
        let q = [i as f64 + 0.5 - half, j as f64 + 0.5 - half, k as f64 + 0.5 - half];
        let p = inv.apply(q);
        let src: [f64; 3] = std::array::from_fn(|a| (p[a] + half).floor());
        if src.iter().any(|&s| s < 0.0 || s >= n as f64) {
            return false;
        }
        vol.get(src[0] as usize, src[1] as usize, src[2] as usize)
    }))
}

/// Uniformly distributed rotation (Shoemake's quaternion construction).
pub fn uniform_rotation<R: Rng>(rng: &mut R) -> Mat3 {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    Mat3::from_quaternion([
        a * (tau * u2).sin(),
        a * (tau * u2).cos(),
        b * (tau * u3).sin(),
        b * (tau * u3).cos(),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    /// Centre in voxel coordinates (voxel `i` spans `[i, i+1)`).
    pub center: Vec3,
    pub semi_axes: Vec3,
    /// Columns are the ellipsoid's principal axes.
    pub rotation: [[f64; 3]; 3],
}

impl Ellipsoid {
    #[inline]
    pub fn contains(&self, p: Vec3) -> bool {
        let d = math::sub(p, self.center);
        let local = Mat3(self.rotation).transpose().apply(d);
        (0..3)
            .map(|a| (local[a] / self.semi_axes[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    /// Labels every voxel whose centre lies inside with `label`.
    pub fn rasterize(&self, vol: &mut LabeledVolume, label: u8) {
        let reach = self.semi_axes.iter().cloned().fold(0.0, f64::max).ceil() + 1.0;
        let dims = vol.dims.as_array();
        let range = |a: usize| {
            let lo = (self.center[a] - reach).floor().max(0.0) as usize;
            let hi = ((self.center[a] + reach).ceil().max(0.0) as usize).min(dims[a]);
            lo..hi
        };
        for k in range(2) {
            for j in range(1) {
                for i in range(0) {
                    if self.contains([i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5]) {
                        let idx = vol.dims.index(i, j, k);
                        vol.labels[idx] = label;
                    }
                }
            }
        }
    }
}

/// Embeds a random number of random ellipsoids into `base`. Centres are
/// drawn uniformly over base voxels; ellipsoids may protrude past the base
/// surface and may overlap each other.
pub fn place_foreign_objects<R: Rng>(
    base: &BinaryVolume,
    params: &PhantomParams,
    rng: &mut R,
) -> Result<(LabeledVolume, Vec<Ellipsoid>)> {
    let candidates: Vec<usize> = base
        .voxels
        .iter()
        .enumerate()
        .filter_map(|(i, &v)| v.then_some(i))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Placement("base object has no voxels".into()));
    }
    let mut labeled = LabeledVolume::from_binary(base, params.voxel_size_cm);
    let count = params.draw_count(rng);
    let mut placed = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let semi_axes: Vec3 = std::array::from_fn(|_| {
            rng.random_range(params.ellipsoid_radius_min..=params.ellipsoid_radius_max)
        });
        let rotation = uniform_rotation(rng).0;
        let (i, j, k) = base.dims.coords(candidates[rng.random_range(0..candidates.len())]);
        let e = Ellipsoid {
            center: [i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5],
            semi_axes,
            rotation,
        };
        e.rasterize(&mut labeled, FOREIGN);
        placed.push(e);
    }
    Ok((labeled, placed))
}

/// A generated phantom together with the random choices that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub index: u32,
    pub volume: LabeledVolume,
    pub inclusions: Vec<Ellipsoid>,
    pub cut_fractions: CutFractions,
    pub euler_angles: [f64; 3],
}

/// Generates phantom number `index` from the stream keyed by
/// `(params.seed, index)`.
pub fn generate_phantom(params: &PhantomParams, index: u32) -> Result<Phantom> {
    params.validate()?;
    let mut rng = rng::stream(params.seed, Domain::Phantom, &[index as u64]);
    let cut_fractions = random_cut_fractions(&mut rng);
    let cube = cut_cube_with_fractions(params, &cut_fractions)?;
    let euler_angles = random_euler_angles(&mut rng);
    let base = rotate_volume(&cube, euler_angles)?;
    let (volume, inclusions) = place_foreign_objects(&base, params, &mut rng)?;
    debug_assert!(volume.labels.iter().all(|&l| l <= FOREIGN));
    Ok(Phantom {
        index,
        volume,
        inclusions,
        cut_fractions,
        euler_angles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{BACKGROUND, BASE};
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn small_params() -> PhantomParams {
        PhantomParams {
            volume_dim: 24,
            cube_dim: 16,
            ellipsoid_radius_min: 2.0,
            ellipsoid_radius_max: 4.0,
            ..PhantomParams::default()
        }
    }

    #[test]
    fn rejects_invalid_params() {
        let mut p = small_params();
        p.cube_dim = 30;
        assert!(matches!(p.validate(), Err(Error::Param(_))));
        let mut p = small_params();
        p.ellipsoid_radius_max = 8.0;
        assert!(p.validate().is_err());
        let mut p = small_params();
        p.foreign_count_distribution = vec![(1, 0.5), (2, 0.4)];
        assert!(p.validate().is_err());
        let mut p = small_params();
        p.ellipsoid_radius_min = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn zero_fraction_cut_keeps_full_cube() {
        let p = PhantomParams {
            volume_dim: 40,
            cube_dim: 32,
            ..PhantomParams::default()
        };
        let vol = cut_cube_with_fractions(&p, &[[0.0; 3]; 8]).unwrap();
        let full = 32 * 32 * 32;
        // The degenerate plane removes at most the corner voxel layer.
        assert!(vol.count() <= full && vol.count() >= full - 8 * 3 * 32);
        assert_eq!(vol.count(), full);
    }

    #[test]
    fn midpoint_cut_matches_enumeration_oracle() {
        let p = PhantomParams {
            volume_dim: 64,
            cube_dim: 64,
            ..PhantomParams::default()
        };
        let vol = cut_cube_with_fractions(&p, &[[0.5; 3]; 8]).unwrap();
        // Oracle: a voxel survives iff, for every corner, its axis distances
        // to that corner sum to at least half the edge.
        let mut expected = 0;
        for k in 0..64 {
            for j in 0..64 {
                for i in 0..64 {
                    let c = [i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5];
                    let keep = (0..8).all(|corner| {
                        let s: f64 = (0..3)
                            .map(|a| {
                                let at = if (corner >> a) & 1 == 0 { 0.0 } else { 64.0 };
                                (c[a] - at).abs()
                            })
                            .sum();
                        s >= 32.0
                    });
                    expected += keep as usize;
                }
            }
        }
        assert_eq!(vol.count(), expected);
        // Sanity: roughly 64³ minus eight tetrahedra of leg 32.
        let analytic = 64f64.powi(3) - 8.0 * 32f64.powi(3) / 6.0;
        assert!((vol.count() as f64 - analytic).abs() / analytic < 0.02);
    }

    #[test]
    fn corner_planes_have_unit_outward_normals() {
        let p = small_params();
        let mut rng = rng::stream(5, Domain::Phantom, &[0]);
        let f = random_cut_fractions(&mut rng);
        let planes = corner_planes(&p, &f);
        assert_eq!(planes.len(), 8);
        for pl in planes {
            assert!((math::norm(pl.normal) - 1.0).abs() < 1e-9);
            let c = [12.0; 3];
            assert!(math::dot(pl.normal, math::sub(c, pl.anchor)) < 0.0);
        }
    }

    #[test]
    fn distinct_seeds_give_distinct_cubes() {
        let p = PhantomParams::desk();
        let a = make_cut_cube(&p, &mut rng::stream(1, Domain::Phantom, &[0])).unwrap();
        let b = make_cut_cube(&p, &mut rng::stream(2, Domain::Phantom, &[0])).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn identity_rotation_is_exact() {
        let p = small_params();
        let vol = make_cut_cube(&p, &mut rng::stream(9, Domain::Phantom, &[0])).unwrap();
        assert_eq!(rotate_volume(&vol, [0.0; 3]).unwrap(), vol);
    }

    #[test]
    fn quarter_turn_about_x_is_index_permutation() {
        let n = 12;
        let dims = Dims3::cubic(n);
        // Asymmetric L-shape.
        let vol = BinaryVolume::from_fn(dims, |i, j, k| {
            (2..9).contains(&i) && (3..5).contains(&j) && (2..10).contains(&k)
                || (2..9).contains(&i) && (3..9).contains(&j) && (2..4).contains(&k)
        });
        let rotated = rotate_volume(&vol, [FRAC_PI_2, 0.0, 0.0]).unwrap();
        let oracle = BinaryVolume::from_fn(dims, |i, j, k| vol.get(i, k, n - 1 - j));
        assert_eq!(rotated, oracle);
        assert_ne!(rotated, vol);
    }

    #[test]
    fn rotation_roughly_preserves_volume() {
        let dims = Dims3::cubic(64);
        let cube = BinaryVolume::from_fn(dims, |i, j, k| {
            [i, j, k].iter().all(|&c| (16..48).contains(&c))
        });
        for angles in [[0.3, 0.7, 1.1], [2.0, 0.1, 4.0], [1.0, 1.0, 1.0]] {
            let r = rotate_volume(&cube, angles).unwrap();
            let ratio = r.count() as f64 / cube.count() as f64;
            assert!((0.95..=1.05).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn rotation_rejects_non_cubic() {
        let vol = BinaryVolume::empty(Dims3::new(4, 4, 5));
        assert!(rotate_volume(&vol, [0.0; 3]).is_err());
    }

    #[test]
    fn zero_count_places_nothing() {
        let mut p = small_params();
        p.foreign_count_distribution = vec![(0, 1.0)];
        let base = make_cut_cube(&p, &mut rng::stream(1, Domain::Phantom, &[0])).unwrap();
        let (vol, inc) = place_foreign_objects(&base, &p, &mut rng::stream(1, Domain::Phantom, &[1])).unwrap();
        assert!(inc.is_empty());
        assert_eq!(vol.count_of(FOREIGN), 0);
    }

    #[test]
    fn empty_base_is_a_placement_error() {
        let p = small_params();
        let base = BinaryVolume::empty(p.dims());
        let err = place_foreign_objects(&base, &p, &mut rng::stream(1, Domain::Phantom, &[0]));
        assert!(matches!(err, Err(Error::Placement(_))));
    }

    #[test]
    fn sphere_rasterization_volume() {
        let dims = Dims3::cubic(40);
        let mut rng = rng::stream(11, Domain::Phantom, &[0]);
        for _ in 0..5 {
            let mut vol = LabeledVolume::from_binary(&BinaryVolume::empty(dims), 0.1);
            let e = Ellipsoid {
                center: [20.5, 19.5, 20.5],
                semi_axes: [7.0; 3],
                rotation: uniform_rotation(&mut rng).0,
            };
            e.rasterize(&mut vol, FOREIGN);
            let analytic = 4.0 / 3.0 * std::f64::consts::PI * 343.0;
            let got = vol.count_of(FOREIGN) as f64;
            assert!((got - analytic).abs() / analytic < 0.15, "{got} vs {analytic}");
        }
    }

    #[test]
    fn uniform_rotation_is_proper() {
        let mut rng = rng::stream(3, Domain::Phantom, &[0]);
        for _ in 0..50 {
            let r = uniform_rotation(&mut rng);
            assert!((r.det() - 1.0).abs() < 1e-12);
            let i = r.mul(&r.transpose());
            for a in 0..3 {
                for b in 0..3 {
                    let e = if a == b { 1.0 } else { 0.0 };
                    assert!((i.0[a][b] - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn two_object_fraction_is_half() {
        let p = PhantomParams {
            volume_dim: 20,
            cube_dim: 12,
            ellipsoid_radius_min: 1.5,
            ellipsoid_radius_max: 2.5,
            ..PhantomParams::default()
        };
        let twos = (0..1000u64)
            .filter(|&seed| {
                let p = PhantomParams { seed, ..p.clone() };
                generate_phantom(&p, 0).unwrap().inclusions.len() == 2
            })
            .count();
        let frac = twos as f64 / 1000.0;
        assert!((0.45..=0.55).contains(&frac), "fraction {frac}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn phantom_invariants(seed in any::<u64>(), index in 0u32..1000) {
            let p = PhantomParams { seed, ..small_params() };
            let a = generate_phantom(&p, index).unwrap();
            let b = generate_phantom(&p, index).unwrap();
            prop_assert_eq!(&a, &b);

            // Cut monotonicity.
            let cube = cut_cube_with_fractions(&p, &a.cut_fractions).unwrap();
            let uncut = cut_cube_with_fractions(&p, &[[0.0; 3]; 8]).unwrap();
            prop_assert!(cube.is_subset_of(&uncut));

            // Containment: centres sit on base voxels of the rotated cube.
            let base = rotate_volume(&cube, a.euler_angles).unwrap();
            for e in &a.inclusions {
                let c = e.center.map(|v| v.floor() as usize);
                prop_assert!(base.get(c[0], c[1], c[2]));
            }
            prop_assert!(a.inclusions.is_empty() || a.volume.count_of(FOREIGN) > 0);

            // Label partition.
            let counts = a.volume.count_of(BACKGROUND) + a.volume.count_of(BASE) + a.volume.count_of(FOREIGN);
            prop_assert_eq!(counts, a.volume.dims.len());
        }
    }
}
