//! SIRT reconstruction.
//!
//! Iterates `x ← x + C·Aᵀ·R·(b − A·x)` from `x₀ = 0`, where `R` and `C` are
//! the inverse row and column sums of the projection matrix (clamped below by
//! `epsilon`). Each ray's residual is backprojected as soon as it is formed,
//! so a full stack of `A·x` is never held in memory.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ReconVolume;
use crate::xray::projector::Projector;
use crate::xray::raytable::{RayPlan, DEFAULT_TABLE_BUDGET_BYTES};
use crate::xray::RadiographStack;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SirtConfig {
    pub iterations: usize,
    /// Clamp the estimate to non-negative values after every iteration.
    pub nonneg_clamp: bool,
    pub epsilon: f64,
}

impl Default for SirtConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            nonneg_clamp: false,
            epsilon: 1e-10,
        }
    }
}

impl SirtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Param("SIRT needs at least one iteration".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Param("SIRT epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Inverse row and column sums of `A`, computed once per geometry.
#[derive(Debug, Clone)]
pub struct SirtWeights {
    /// `1 / max(Σ_j A_ij, ε)` per ray, angle-major.
    pub inv_row: Vec<f64>,
    /// `1 / max(Σ_i A_ij, ε)` per voxel.
    pub inv_col: Vec<f64>,
}

impl SirtWeights {
    pub fn compute(plan: &RayPlan, epsilon: f64) -> Self {
        let rows = plan.row_sums();
        let cols = plan.backproject(&vec![1.0; plan.projector().n_rays()]);
        Self {
            inv_row: rows.into_iter().map(|s| 1.0 / s.max(epsilon)).collect(),
            inv_col: cols.into_iter().map(|s| 1.0 / s.max(epsilon)).collect(),
        }
    }
}

/// Reconstruction engine bound to one geometry; reusable across objects.
#[derive(Debug, Clone)]
pub struct Sirt {
    pub projector: Projector,
    pub config: SirtConfig,
    pub weights: SirtWeights,
    plan: RayPlan,
}

impl Sirt {
    pub fn new(projector: Projector, config: SirtConfig) -> Result<Self> {
        Self::with_table_budget(projector, config, DEFAULT_TABLE_BUDGET_BYTES)
    }

    /// As [`Sirt::new`], caching ray intersections only if they fit in
    /// `budget_bytes`.
    pub fn with_table_budget(projector: Projector, config: SirtConfig, budget_bytes: usize) -> Result<Self> {
        config.validate()?;
        let plan = RayPlan::new(projector.clone(), budget_bytes)?;
        let weights = SirtWeights::compute(&plan, config.epsilon);
        Ok(Self {
            projector,
            config,
            weights,
            plan,
        })
    }

    fn check_stack(&self, b: &[f64]) -> Result<()> {
        let want = self.projector.n_rays();
        if b.len() != want {
            return Err(Error::Data(format!(
                "projection stack has {} values, geometry needs {want} ({} angles)",
                b.len(),
                self.projector.n_angles()
            )));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("projection stack contains non-finite values".into()));
        }
        Ok(())
    }

    /// One update `x ← x + C·Aᵀ·R·(b − A·x)`. Returns the weighted residual
    /// norm `‖R^½ (b − A·x)‖₂` of the estimate *before* the update.
    pub fn step(&self, b: &[f64], x: &mut [f64]) -> f64 {
        let inv_row = &self.weights.inv_row;
        let (update, norm2) = self.plan.forward_then_backproject(x, |ray, ax| {
            let r = b[ray] - ax;
            let w = inv_row[ray];
            (w * r, w * r * r)
        });
        for ((xi, u), c) in x.iter_mut().zip(&update).zip(&self.weights.inv_col) {
            *xi += c * u;
            if self.config.nonneg_clamp && *xi < 0.0 {
                *xi = 0.0;
            }
        }
        norm2.sqrt()
    }

    /// Weighted residual `‖R^½ (b − A·x)‖₂`.
    pub fn weighted_residual(&self, b: &[f64], x: &[f64]) -> Result<f64> {
        self.check_stack(b)?;
        let ax = self.plan.forward(x);
        Ok(ax
            .iter()
            .zip(b)
            .zip(&self.weights.inv_row)
            .map(|((a, b), w)| w * (b - a) * (b - a))
            .sum::<f64>()
            .sqrt())
    }

    /// Runs the configured number of iterations; also returns the weighted
    /// residual before each iteration.
    pub fn run_with_history(&self, b: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_stack(b)?;
        let mut x = vec![0.0; self.projector.n_voxels()];
        let mut history = Vec::with_capacity(self.config.iterations);
        for _ in 0..self.config.iterations {
            history.push(self.step(b, &mut x));
        }
        Ok((x, history))
    }

    pub fn reconstruct(&self, stack: &RadiographStack) -> Result<ReconVolume> {
        let g = &self.projector.geom;
        if stack.rows != g.detector_rows || stack.cols != g.detector_cols {
            return Err(Error::Data(format!(
                "object {}: radiographs are {}×{}, geometry is {}×{}",
                stack.object_id, stack.rows, stack.cols, g.detector_rows, g.detector_cols
            )));
        }
        if stack.n_angles() != g.angles.len() {
            return Err(Error::Data(format!(
                "object {}: stack has {} angles, geometry has {}",
                stack.object_id,
                stack.n_angles(),
                g.angles.len()
            )));
        }
        let (x, _) = self.run_with_history(&stack.data)?;
        Ok(ReconVolume {
            dims: self.projector.grid.dims,
            voxel_size: self.projector.grid.voxel_size,
            values: x.into_iter().map(|v| v as f32).collect(),
        })
    }
}

/// Reconstructs one object with a freshly built engine.
pub fn sirt(stack: &RadiographStack, projector: &Projector, config: SirtConfig) -> Result<ReconVolume> {
    Sirt::new(projector.clone(), config)?.reconstruct(stack)
}

/// Outcome of one object in a batch.
#[derive(Debug)]
pub struct BatchItem {
    pub object_id: u32,
    pub result: Result<ReconVolume>,
}

/// Independent reconstructions of several objects with up to `parallelism`
/// objects in flight. Output order follows input order and is bit-identical
/// to serial execution.
pub fn reconstruct_batch(engine: &Sirt, stacks: &[RadiographStack], parallelism: usize) -> Vec<BatchItem> {
    let run = |s: &RadiographStack| BatchItem {
        object_id: s.object_id,
        result: engine
            .reconstruct(s)
            .map_err(|e| match e {
                e @ Error::Object { .. } => e,
                e => e.for_object(s.object_id),
            }),
    };
    if parallelism <= 1 {
        return stacks.iter().map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .expect("thread pool");
    pool.install(|| stacks.par_iter().map(run).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Dims3;
    use crate::xray::{ConeBeamGeometry, VolumeGrid};
    use rand::Rng;

    fn small_projector() -> Projector {
        let grid = VolumeGrid::new(Dims3::cubic(12), 0.1);
        Projector::new(ConeBeamGeometry::lab(16, 16, 24, 1.2), grid).unwrap()
    }

    fn cube_density(dims: Dims3, lo: usize, hi: usize, mu: f64) -> Vec<f64> {
        (0..dims.len())
            .map(|i| {
                let (a, b, c) = dims.coords(i);
                if [a, b, c].iter().all(|v| (lo..hi).contains(v)) {
                    mu
                } else {
                    0.0
                }
            })
            .collect()
    }

    #[test]
    fn zero_data_stays_zero() {
        let p = small_projector();
        let engine = Sirt::new(p.clone(), SirtConfig { iterations: 5, ..Default::default() }).unwrap();
        let (x, _) = engine.run_with_history(&vec![0.0; p.n_rays()]).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_is_monotone_and_scale_equivariant() {
        let p = small_projector();
        let truth = cube_density(p.grid.dims, 3, 9, 0.2);
        let b = p.forward(&truth).unwrap();
        let engine = Sirt::new(p.clone(), SirtConfig { iterations: 30, ..Default::default() }).unwrap();
        let (x, hist) = engine.run_with_history(&b).unwrap();
        for w in hist.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{} > {}", w[1], w[0]);
        }
        let b3: Vec<f64> = b.iter().map(|v| v * 3.0).collect();
        let (x3, _) = engine.run_with_history(&b3).unwrap();
        for (a, c) in x.iter().zip(&x3) {
            assert!((3.0 * a - c).abs() <= 1e-9 * (1.0 + c.abs()));
        }
    }

    #[test]
    fn nonneg_clamp_keeps_estimate_non_negative() {
        let p = small_projector();
        let mut rng = crate::rng::stream(2, crate::rng::Domain::Noise, &[0]);
        let b: Vec<f64> = (0..p.n_rays()).map(|_| rng.random_range(-0.5..1.0)).collect();
        let engine = Sirt::new(p, SirtConfig { iterations: 4, nonneg_clamp: true, ..Default::default() }).unwrap();
        let (x, _) = engine.run_with_history(&b).unwrap();
        assert!(x.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn rejects_incomplete_or_non_finite_stacks() {
        let p = small_projector();
        let engine = Sirt::new(p.clone(), SirtConfig { iterations: 1, ..Default::default() }).unwrap();
        let short = RadiographStack { object_id: 1, rows: 16, cols: 16, data: vec![0.0; 16 * 16 * 23] };
        assert!(matches!(engine.reconstruct(&short), Err(Error::Data(_))));
        let mut data = vec![0.0; p.n_rays()];
        data[5] = f64::NAN;
        let bad = RadiographStack { object_id: 1, rows: 16, cols: 16, data };
        assert!(matches!(engine.reconstruct(&bad), Err(Error::Data(_))));
        assert!(SirtConfig { iterations: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn batch_matches_serial_and_isolates_failures() {
        let p = small_projector();
        let engine = Sirt::new(p.clone(), SirtConfig { iterations: 3, ..Default::default() }).unwrap();
        let truth = cube_density(p.grid.dims, 4, 8, 0.3);
        let b = p.forward(&truth).unwrap();
        let good = |id| RadiographStack { object_id: id, rows: 16, cols: 16, data: b.clone() };
        let single = engine.reconstruct(&good(0)).unwrap();
        let one = reconstruct_batch(&engine, &[good(0)], 1);
        assert_eq!(one[0].result.as_ref().unwrap(), &single);

        let mut corrupt = good(1);
        corrupt.data.truncate(100);
        let stacks = vec![good(0), corrupt, good(2)];
        let serial = reconstruct_batch(&engine, &stacks, 1);
        let parallel = reconstruct_batch(&engine, &stacks, 3);
        assert!(serial[1].result.is_err());
        assert!(matches!(parallel[1].result, Err(Error::Object { object: 1, .. })));
        for i in [0, 2] {
            assert_eq!(serial[i].result.as_ref().unwrap(), parallel[i].result.as_ref().unwrap());
        }
    }
}
