//! X-ray acquisition model: geometry, projector, physics and scan simulation.

pub mod geometry;
pub mod physics;
pub mod projector;
pub mod raytable;
pub mod scan;

pub use geometry::{ConeBeamGeometry, VolumeGrid};
pub use physics::{MaterialAttenuation, Spectrum};
pub use projector::Projector;
pub use scan::{simulate_scan, Radiograph, RadiographStack, ScanSettings};
