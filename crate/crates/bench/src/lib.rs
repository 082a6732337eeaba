//! Shared fixtures for the criterion benchmarks.

use spooflab_core::geometry::Box3D;
use spooflab_core::kitti::PointCloud;
use spooflab_core::lidar::BeamTable;
use spooflab_core::synthetic::{render_scene, SceneSpec};

pub const AZ_RES: f64 = 0.2 * std::f64::consts::PI / 180.0;

/// A car 20 m ahead with its rendered scene.
pub fn fixture_scene() -> (PointCloud, Box3D) {
    let spec = SceneSpec::car_at(20.0, 0.0, 0.0);
    let cloud = render_scene(&spec, &BeamTable::hdl64e(), AZ_RES);
    (cloud, spec.car)
}
