//! Synthetic scene rendering for desk-scale fixtures.
//!
//! Scenes are ray-cast on the sensor's own beam/azimuth grid so every scene
//! point lies on a real ray, the way captured clouds do: a car-shaped box on
//! a ground plane, sampled within an azimuth sector around the car. The same
//! scenes can be written out as KITTI-layout frames for end-to-end runs.

use crate::geometry::{
    normalize_angle, range_direction, ray_box_intersection, Box3D, CartesianPoint, SphericalCoord,
};
use crate::kitti::{
    labels_to_text, lidar_box_to_label, write_point_cloud, CalibrationSet, KittiError, LidarPoint,
    PointCloud,
};
use crate::lidar::{azimuth_cell_count, canonical_azimuth_index, BeamTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::Path;

/// Sensor height above the ground plane, meters (ground at z = -1.73).
pub const GROUND_Z: f64 = -1.73;
/// Default car dimensions, meters.
pub const CAR_DIMS: [f64; 3] = [3.9, 1.6, 1.56];

/// One synthetic scene: a single car on flat ground.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub car: Box3D,
    pub ground_z: f64,
    /// Azimuth padding around the car footprint, radians.
    pub sector_margin: f64,
    pub max_range: f64,
    pub car_intensity: f64,
    pub ground_intensity: f64,
}

impl SceneSpec {
    /// A car resting on the ground at the given planar distance and azimuth.
    pub fn car_at(distance: f64, azimuth: f64, yaw: f64) -> Self {
        let car = Box3D::new(
            distance * azimuth.cos(),
            distance * azimuth.sin(),
            GROUND_Z + CAR_DIMS[2] / 2.0,
            CAR_DIMS[0],
            CAR_DIMS[1],
            CAR_DIMS[2],
            yaw,
        );
        Self {
            car,
            ground_z: GROUND_Z,
            sector_margin: 8.0_f64.to_radians(),
            max_range: 80.0,
            car_intensity: 0.5,
            ground_intensity: 0.2,
        }
    }
}

/// Ray-casts the scene on the sensor grid: each ray in the sector records
/// its nearest hit (car surface or ground), mimicking strongest-return
/// capture with natural occlusion.
pub fn render_scene(spec: &SceneSpec, beams: &BeamTable, azimuth_resolution: f64) -> PointCloud {
    let n_cells = azimuth_cell_count(azimuth_resolution);
    let origin = CartesianPoint::new(0.0, 0.0, 0.0);

    let center_az = spec.car.cy.atan2(spec.car.cx);
    let mut spread: f64 = 0.0;
    for [cx, cy] in spec.car.bev_corners() {
        spread = spread.max(normalize_angle(cy.atan2(cx) - center_az).abs());
    }
    let half_cells =
        (((spread + spec.sector_margin) / azimuth_resolution).ceil() as i64).min(n_cells / 2);
    let center_idx = (center_az / azimuth_resolution).round() as i64;

    let mut points = Vec::new();
    for beam in 0..beams.len() {
        let elevation = beams.elevation_rad(beam);
        for rel in -half_cells..=half_cells {
            let azimuth_index = canonical_azimuth_index(center_idx + rel, n_cells);
            let azimuth = azimuth_index as f64 * azimuth_resolution;
            let dir = range_direction(SphericalCoord {
                range: 1.0,
                azimuth,
                elevation,
            });

            let mut hit: Option<(f64, f64)> = None; // (range, intensity)
            if let Some((t0, _)) = ray_box_intersection(origin, dir, &spec.car) {
                if t0 > 0.0 && t0 <= spec.max_range {
                    hit = Some((t0, spec.car_intensity));
                }
            }
            if dir.z < 0.0 {
                let t = spec.ground_z / dir.z;
                if t > 0.0 && t <= spec.max_range && hit.is_none_or(|(r, _)| t < r) {
                    hit = Some((t, spec.ground_intensity));
                }
            }
            if let Some((t, intensity)) = hit {
                points.push(LidarPoint {
                    x: t * dir.x,
                    y: t * dir.y,
                    z: t * dir.z,
                    intensity,
                });
            }
        }
    }
    PointCloud::new(points)
}

/// A deterministic suite of single-car scenes with varied distance, bearing,
/// and yaw. Distances stay within the band where the placement region offers
/// at least 200 feasible rays inside a 10 degree window.
pub fn synthetic_suite(n_scenes: usize, seed: u64) -> Vec<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_scenes)
        .map(|_| {
            let distance = rng.gen_range(15.0..=26.0);
            let azimuth = rng.gen_range(-25.0_f64..=25.0).to_radians();
            let base_yaw = if rng.gen_bool(0.5) { 0.0 } else { FRAC_PI_2 };
            let yaw = base_yaw + rng.gen_range(-0.1..=0.1);
            SceneSpec::car_at(distance, azimuth, yaw)
        })
        .collect()
}

/// Writes a rendered scene as a complete KITTI-layout frame
/// (velodyne/calib/label_2/image_2).
pub fn write_kitti_frame(
    root: impl AsRef<Path>,
    frame_id: &str,
    cloud: &PointCloud,
    cars: &[Box3D],
) -> Result<(), KittiError> {
    let root = root.as_ref();
    let calib = CalibrationSet::kitti_like();
    for sub in ["velodyne", "calib", "label_2", "image_2"] {
        fs::create_dir_all(root.join(sub)).map_err(|e| KittiError::Io {
            path: root.join(sub),
            source: e,
        })?;
    }
    write_point_cloud(cloud, root.join("velodyne").join(format!("{frame_id}.bin")))?;
    let calib_path = root.join("calib").join(format!("{frame_id}.txt"));
    fs::write(&calib_path, calib.to_kitti_text()).map_err(|e| KittiError::Io {
        path: calib_path,
        source: e,
    })?;
    let labels: Vec<_> = cars
        .iter()
        .map(|c| lidar_box_to_label(c, &calib, "Car"))
        .collect();
    let label_path = root.join("label_2").join(format!("{frame_id}.txt"));
    fs::write(&label_path, labels_to_text(&labels)).map_err(|e| KittiError::Io {
        path: label_path,
        source: e,
    })?;
    // Opaque image reference; never decoded by this pipeline.
    let image_path = root.join("image_2").join(format!("{frame_id}.png"));
    fs::write(&image_path, b"\x89PNG\r\n\x1a\n").map_err(|e| KittiError::Io {
        path: image_path,
        source: e,
    })?;
    Ok(())
}
