//! Discrete beam geometry of the modeled 64-beam LiDAR, the placement region
//! above a target, feasible-ray computation, physical-constraint validation,
//! and strongest-return merging.
//!
//! Adversarial points are physically injectable only if they sit on the
//! sensor's discrete ray grid: one point per ray, elevations drawn from the
//! beam table, azimuths on the firing grid within a narrow horizontal window.

use crate::geometry::{
    normalize_angle, range_direction, ray_box_intersection, sph_to_cart, Box3D, CartesianPoint,
    SphericalCoord,
};
use crate::kitti::{LidarPoint, PointCloud};
use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::PI;
use thiserror::Error;

/// Tolerance for exact-grid checks (radians).
pub const GRID_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LidarError {
    #[error("infeasible budget: requested {requested} points but only {achievable} feasible rays fit the window")]
    InfeasibleBudget { requested: usize, achievable: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// The 64 beam elevations, ordered topmost first.
///
/// Degrees are the construction values; radians are derived once so both
/// views stay consistent.
#[derive(Debug, Clone)]
pub struct BeamTable {
    deg: Vec<f64>,
    rad: Vec<f64>,
}

impl BeamTable {
    /// The 64-beam table: +2.0° down to −24.8°, upper block of 32 beams at
    /// 1/3° spacing, lower block of 32 beams at 1/2° spacing.
    pub fn hdl64e() -> Self {
        let mut deg = Vec::with_capacity(64);
        for k in 0..32 {
            deg.push(2.0 - k as f64 / 3.0);
        }
        for k in 32..64 {
            // Anchored at the bottom so the -24.8° endpoint is exact.
            deg.push(-24.8 + (63 - k) as f64 * 0.5);
        }
        let rad = deg.iter().map(|d| d.to_radians()).collect();
        Self { deg, rad }
    }

    pub fn len(&self) -> usize {
        self.rad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rad.is_empty()
    }

    pub fn elevation_rad(&self, beam: usize) -> f64 {
        self.rad[beam]
    }

    pub fn elevation_deg(&self, beam: usize) -> f64 {
        self.deg[beam]
    }

    pub fn elevations_rad(&self) -> &[f64] {
        &self.rad
    }

    /// Index of the beam closest in elevation, with the absolute error.
    pub fn nearest_beam(&self, elevation: f64) -> (usize, f64) {
        let mut best = 0;
        let mut best_err = f64::INFINITY;
        // partition_point over the decreasing table, then check neighbors.
        let idx = self.rad.partition_point(|&e| e > elevation);
        for k in idx.saturating_sub(1)..=(idx.min(self.rad.len() - 1)) {
            let err = (self.rad[k] - elevation).abs();
            if err < best_err {
                best = k;
                best_err = err;
            }
        }
        (best, best_err)
    }

    /// Half the gap to the nearest adjacent beam; the elevation binning
    /// tolerance for scene points.
    pub fn half_gap(&self, beam: usize) -> f64 {
        let above = if beam > 0 {
            self.rad[beam - 1] - self.rad[beam]
        } else {
            f64::INFINITY
        };
        let below = if beam + 1 < self.rad.len() {
            self.rad[beam] - self.rad[beam + 1]
        } else {
            f64::INFINITY
        };
        above.min(below) / 2.0
    }

    /// CSV dump, one row per beam.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("beam_index,elevation_deg\n");
        for (k, d) in self.deg.iter().enumerate() {
            out.push_str(&format!("{k},{d}\n"));
        }
        out
    }
}

/// Convenience constructor matching the sensor model name.
pub fn hdl64e_beam_table() -> BeamTable {
    BeamTable::hdl64e()
}

/// A firing direction: beam index plus the azimuth cell on the firing grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RayId {
    pub beam: usize,
    pub azimuth_index: i64,
}

/// Number of azimuth cells for a resolution; the resolution is expected to
/// divide the full circle.
pub fn azimuth_cell_count(resolution: f64) -> i64 {
    (2.0 * PI / resolution).round() as i64
}

/// Wraps an azimuth index into the canonical range (−n/2, n/2].
pub fn canonical_azimuth_index(idx: i64, n_cells: i64) -> i64 {
    let c = idx.rem_euclid(n_cells);
    if c > n_cells / 2 {
        c - n_cells
    } else {
        c
    }
}

/// The axis-aligned volume above the target where adversarial points may lie.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementRegion {
    pub center_x: f64,
    pub center_y: f64,
    pub half_x: f64,
    pub half_y: f64,
    pub z_lo: f64,
    pub z_hi: f64,
}

/// Default footprint side of the placement region (meters).
pub const REGION_SIDE: f64 = 3.6;
/// Default height of the placement region (meters).
pub const REGION_HEIGHT: f64 = 1.0;

impl PlacementRegion {
    /// The region directly above a target box: footprint centered on the
    /// target, bottom at the target's top face.
    pub fn for_target(target: &Box3D) -> Self {
        Self::for_target_with(target, REGION_SIDE, REGION_HEIGHT)
    }

    pub fn for_target_with(target: &Box3D, side: f64, height: f64) -> Self {
        let z_lo = target.cz + target.dz / 2.0;
        Self {
            center_x: target.cx,
            center_y: target.cy,
            half_x: side / 2.0,
            half_y: side / 2.0,
            z_lo,
            z_hi: z_lo + height,
        }
    }

    pub fn as_box3d(&self) -> Box3D {
        Box3D::new(
            self.center_x,
            self.center_y,
            (self.z_lo + self.z_hi) / 2.0,
            self.half_x * 2.0,
            self.half_y * 2.0,
            self.z_hi - self.z_lo,
            0.0,
        )
    }

    pub fn contains(&self, p: CartesianPoint, tol: f64) -> bool {
        (p.x - self.center_x).abs() <= self.half_x + tol
            && (p.y - self.center_y).abs() <= self.half_y + tol
            && p.z >= self.z_lo - tol
            && p.z <= self.z_hi + tol
    }

    /// Azimuth of the footprint center as seen from the sensor.
    pub fn center_azimuth(&self) -> f64 {
        self.center_y.atan2(self.center_x)
    }
}

/// Convenience constructor matching the operation name.
pub fn placement_region_for(target: &Box3D) -> PlacementRegion {
    PlacementRegion::for_target(target)
}

/// A ray that crosses the placement region, with the admissible range span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibleRay {
    pub ray: RayId,
    pub elevation: f64,
    pub azimuth: f64,
    pub r_min: f64,
    pub r_max: f64,
}

/// Enumerates every (beam, azimuth cell) ray that intersects the region,
/// with the exact range interval of the intersection.
pub fn feasible_rays(
    region: &PlacementRegion,
    beams: &BeamTable,
    azimuth_resolution: f64,
) -> Vec<FeasibleRay> {
    assert!(
        azimuth_resolution > 0.0,
        "azimuth resolution must be positive"
    );
    let n_cells = azimuth_cell_count(azimuth_resolution);
    let region_box = region.as_box3d();
    let origin = CartesianPoint::new(0.0, 0.0, 0.0);

    // Conservative azimuth prefilter. The angular extent of a convex
    // footprint not containing the origin is attained at its corners.
    let candidates: Vec<i64> =
        if region.center_x.abs() <= region.half_x && region.center_y.abs() <= region.half_y {
            (0..n_cells)
                .map(|i| canonical_azimuth_index(i - n_cells / 2, n_cells))
                .collect()
        } else {
            let center_az = region.center_azimuth();
            let mut spread: f64 = 0.0;
            for sx in [-1.0, 1.0] {
                for sy in [-1.0, 1.0] {
                    let cx = region.center_x + sx * region.half_x;
                    let cy = region.center_y + sy * region.half_y;
                    let az = cy.atan2(cx);
                    spread = spread.max(normalize_angle(az - center_az).abs());
                }
            }
            let center_idx = (center_az / azimuth_resolution).round() as i64;
            let k = (((spread / azimuth_resolution).ceil() as i64) + 1).min(n_cells / 2);
            (-k..=k)
                .map(|rel| canonical_azimuth_index(center_idx + rel, n_cells))
                .collect()
        };
    let mut sorted = candidates;
    sorted.sort_unstable();
    sorted.dedup();

    let mut out = Vec::new();
    for beam in 0..beams.len() {
        let elevation = beams.elevation_rad(beam);
        for &azimuth_index in &sorted {
            let azimuth = azimuth_index as f64 * azimuth_resolution;
            let dir = range_direction(SphericalCoord {
                range: 1.0,
                azimuth,
                elevation,
            });
            if let Some((t0, t1)) = ray_box_intersection(origin, dir, &region_box) {
                let r_min = t0.max(GRID_TOL);
                if r_min <= t1 {
                    out.push(FeasibleRay {
                        ray: RayId {
                            beam,
                            azimuth_index,
                        },
                        elevation,
                        azimuth,
                        r_min,
                        r_max: t1,
                    });
                }
            }
        }
    }
    out
}

/// One adversarial point: a fixed ray plus a mutable range bounded by the
/// region crossing. Angles never change during optimization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvPoint {
    pub ray: RayId,
    pub elevation: f64,
    pub azimuth: f64,
    pub range: f64,
    pub r_min: f64,
    pub r_max: f64,
}

impl AdvPoint {
    pub fn spherical(&self) -> SphericalCoord {
        SphericalCoord {
            range: self.range,
            azimuth: self.azimuth,
            elevation: self.elevation,
        }
    }

    pub fn cartesian(&self) -> CartesianPoint {
        sph_to_cart(self.spherical())
    }
}

/// The optimization variable: adversarial points in spherical form.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdvPointSet {
    pub points: Vec<AdvPoint>,
}

impl AdvPointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_cartesian(&self) -> Vec<CartesianPoint> {
        self.points.iter().map(AdvPoint::cartesian).collect()
    }

    pub fn ranges(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.range).collect()
    }
}

/// Draws `n` distinct rays inside the admissible azimuth window and assigns
/// each a uniform random range within its feasible interval.
///
/// The window is centered on the feasible set's central azimuth (which for a
/// region-derived set is the region-center azimuth). Deterministic per seed.
pub fn sample_initial_points(
    feasible: &[FeasibleRay],
    n: usize,
    window: f64,
    seed: u64,
) -> Result<AdvPointSet, LidarError> {
    if n == 0 {
        return Err(LidarError::InvalidArgument(
            "point count must be >= 1".into(),
        ));
    }
    if feasible.is_empty() {
        return Err(LidarError::InfeasibleBudget {
            requested: n,
            achievable: 0,
        });
    }

    let base = feasible[0].azimuth;
    let rels: Vec<f64> = feasible
        .iter()
        .map(|f| normalize_angle(f.azimuth - base))
        .collect();
    let lo = rels.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = rels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let center_rel = (lo + hi) / 2.0;

    let admissible: Vec<usize> = (0..feasible.len())
        .filter(|&i| (rels[i] - center_rel).abs() <= window / 2.0 + GRID_TOL)
        .collect();
    if admissible.len() < n {
        return Err(LidarError::InfeasibleBudget {
            requested: n,
            achievable: admissible.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = index_sample(&mut rng, admissible.len(), n)
        .into_iter()
        .map(|i| admissible[i])
        .collect();
    chosen.sort_unstable();

    let points = chosen
        .into_iter()
        .map(|i| {
            let f = feasible[i];
            let range = if f.r_max > f.r_min {
                rng.gen_range(f.r_min..=f.r_max)
            } else {
                f.r_min
            };
            AdvPoint {
                ray: f.ray,
                elevation: f.elevation,
                azimuth: f.azimuth,
                range,
                r_min: f.r_min,
                r_max: f.r_max,
            }
        })
        .collect();
    Ok(AdvPointSet { points })
}

/// Pass/fail for one physical constraint plus the offending point indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintCheck {
    pub passed: bool,
    pub offending: Vec<usize>,
}

impl ConstraintCheck {
    fn from_offending(offending: Vec<usize>) -> Self {
        Self {
            passed: offending.is_empty(),
            offending,
        }
    }
}

/// Result of checking the three injectability constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Each ray records at most one point.
    pub ray_uniqueness: ConstraintCheck,
    /// Elevations sit on the beam table; azimuths on the firing grid.
    pub grid_alignment: ConstraintCheck,
    /// Azimuth extent fits the transmitter window.
    pub azimuth_window: ConstraintCheck,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.ray_uniqueness.passed && self.grid_alignment.passed && self.azimuth_window.passed
    }
}

/// Checks the three physical constraints on an adversarial point set.
///
/// `angle_tol` of [`GRID_TOL`] suits exact in-memory sets; clouds recovered
/// from f32 files need a looser tolerance.
pub fn validate_physical(
    points: &AdvPointSet,
    beams: &BeamTable,
    azimuth_resolution: f64,
    window: f64,
) -> ValidationReport {
    validate_physical_with_tol(points, beams, azimuth_resolution, window, GRID_TOL)
}

pub fn validate_physical_with_tol(
    points: &AdvPointSet,
    beams: &BeamTable,
    azimuth_resolution: f64,
    window: f64,
    angle_tol: f64,
) -> ValidationReport {
    let mut seen: HashMap<RayId, usize> = HashMap::new();
    let mut duplicates = Vec::new();
    for (i, p) in points.points.iter().enumerate() {
        if seen.insert(p.ray, i).is_some() {
            duplicates.push(i);
        }
    }

    let mut misaligned = Vec::new();
    for (i, p) in points.points.iter().enumerate() {
        let (_, elev_err) = beams.nearest_beam(p.elevation);
        let az_cells = p.azimuth / azimuth_resolution;
        let az_err = (az_cells - az_cells.round()).abs() * azimuth_resolution;
        if elev_err > angle_tol || az_err > angle_tol {
            misaligned.push(i);
        }
    }

    let mut outside = Vec::new();
    if points.len() > 1 {
        let base = points.points[0].azimuth;
        let rels: Vec<f64> = points
            .points
            .iter()
            .map(|p| normalize_angle(p.azimuth - base))
            .collect();
        let lo = rels.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = rels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo > window + angle_tol {
            let center = (lo + hi) / 2.0;
            for (i, r) in rels.iter().enumerate() {
                if (r - center).abs() > window / 2.0 + angle_tol {
                    outside.push(i);
                }
            }
        }
    }

    ValidationReport {
        ray_uniqueness: ConstraintCheck::from_offending(duplicates),
        grid_alignment: ConstraintCheck::from_offending(misaligned),
        azimuth_window: ConstraintCheck::from_offending(outside),
    }
}

/// A merged cloud plus the position of every adversarial point in it.
/// `None` marks an adversarial point that lost its intensity contest.
#[derive(Debug, Clone)]
pub struct MergedCloud {
    pub cloud: PointCloud,
    pub adv_positions: Vec<Option<usize>>,
    pub displaced_scene: usize,
}

/// Strongest-return merge of adversarial points into a scene.
///
/// Scene points are binned to the ray grid by nearest beam elevation (within
/// half the local beam gap) and nearest azimuth cell. On a contested ray only
/// the higher-intensity point survives; ties keep the scene point.
pub fn strongest_return_merge(
    scene: &PointCloud,
    adv: &AdvPointSet,
    adv_intensity: f64,
    beams: &BeamTable,
    azimuth_resolution: f64,
) -> PointCloud {
    strongest_return_merge_detailed(scene, adv, adv_intensity, beams, azimuth_resolution).cloud
}

pub fn strongest_return_merge_detailed(
    scene: &PointCloud,
    adv: &AdvPointSet,
    adv_intensity: f64,
    beams: &BeamTable,
    azimuth_resolution: f64,
) -> MergedCloud {
    let n_cells = azimuth_cell_count(azimuth_resolution);
    let adv_rays: HashMap<RayId, usize> = adv
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| (p.ray, i))
        .collect();

    // Ray of a scene point, if it lies on the grid.
    let scene_ray = |p: &LidarPoint| -> Option<RayId> {
        let s = crate::geometry::cart_to_sph(CartesianPoint::new(p.x, p.y, p.z)).ok()?;
        let (beam, err) = beams.nearest_beam(s.elevation);
        if err > beams.half_gap(beam) {
            return None;
        }
        let idx = (s.azimuth / azimuth_resolution).round() as i64;
        Some(RayId {
            beam,
            azimuth_index: canonical_azimuth_index(idx, n_cells),
        })
    };

    // Strongest scene return per contested ray.
    let mut strongest: HashMap<RayId, f64> = HashMap::new();
    let scene_rays: Vec<Option<RayId>> = scene
        .iter()
        .map(|p| {
            let ray = scene_ray(p);
            if let Some(r) = ray {
                if adv_rays.contains_key(&r) {
                    let e = strongest.entry(r).or_insert(f64::NEG_INFINITY);
                    *e = e.max(p.intensity);
                }
            }
            ray
        })
        .collect();

    let adv_wins = |ray: &RayId| -> bool {
        match strongest.get(ray) {
            Some(&scene_best) => adv_intensity > scene_best,
            None => true,
        }
    };

    let mut cloud = Vec::with_capacity(scene.len() + adv.len());
    let mut displaced = 0usize;
    for (p, ray) in scene.iter().zip(&scene_rays) {
        let drop = matches!(ray, Some(r) if adv_rays.contains_key(r) && adv_wins(r));
        if drop {
            displaced += 1;
        } else {
            cloud.push(*p);
        }
    }

    let mut adv_positions = Vec::with_capacity(adv.len());
    for ap in &adv.points {
        if adv_wins(&ap.ray) {
            let c = ap.cartesian();
            adv_positions.push(Some(cloud.len()));
            cloud.push(LidarPoint {
                x: c.x,
                y: c.y,
                z: c.z,
                intensity: adv_intensity,
            });
        } else {
            adv_positions.push(None);
        }
    }

    MergedCloud {
        cloud: PointCloud::new(cloud),
        adv_positions,
        displaced_scene: displaced,
    }
}
