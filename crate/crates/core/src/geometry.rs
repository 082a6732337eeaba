//! Coordinate systems and oriented-box geometry.
//!
//! The LiDAR frame is right-handed with x forward, y left, z up. Spherical
//! coordinates are (range, azimuth, elevation) where azimuth is measured in
//! the x-y plane from +x toward +y and elevation via `arcsin(z / R)`, matching
//! the beam-angle convention of the sensor model.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Below this area (m²) a polygon intersection is treated as empty to avoid
/// sign noise from nearly tangent boxes.
const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GeometryError {
    /// The origin has no defined direction; spherical conversion rejects it.
    #[error("degenerate point: cannot convert the origin to spherical coordinates")]
    DegeneratePoint,
}

/// A point in the LiDAR Cartesian frame (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartesianPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl CartesianPoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

/// Spherical coordinates of a LiDAR return.
///
/// `range` is strictly positive, `azimuth` lies in (−π, π] and `elevation`
/// in [−π/2, π/2].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalCoord {
    pub range: f64,
    pub azimuth: f64,
    pub elevation: f64,
}

/// An oriented 3D box: center, dimensions, and yaw about the z axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub yaw: f64,
}

impl Box3D {
    /// Builds a box with the yaw normalized to (−π, π].
    ///
    /// Panics if any dimension is not strictly positive.
    pub fn new(cx: f64, cy: f64, cz: f64, dx: f64, dy: f64, dz: f64, yaw: f64) -> Self {
        assert!(
            dx > 0.0 && dy > 0.0 && dz > 0.0,
            "box dimensions must be strictly positive"
        );
        Self {
            cx,
            cy,
            cz,
            dx,
            dy,
            dz,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn center(&self) -> CartesianPoint {
        CartesianPoint::new(self.cx, self.cy, self.cz)
    }

    pub fn volume(&self) -> f64 {
        self.dx * self.dy * self.dz
    }

    pub fn z_min(&self) -> f64 {
        self.cz - self.dz / 2.0
    }

    pub fn z_max(&self) -> f64 {
        self.cz + self.dz / 2.0
    }

    /// Maps a world point into the box frame (translate, then rotate by −yaw).
    pub fn to_local(&self, p: CartesianPoint) -> CartesianPoint {
        let (s, c) = self.yaw.sin_cos();
        let tx = p.x - self.cx;
        let ty = p.y - self.cy;
        CartesianPoint::new(c * tx + s * ty, -s * tx + c * ty, p.z - self.cz)
    }

    /// Footprint corners in the x-y plane, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hx = self.dx / 2.0;
        let hy = self.dy / 2.0;
        let local = [[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]];
        local.map(|[lx, ly]| [self.cx + c * lx - s * ly, self.cy + s * lx + c * ly])
    }
}

/// Wraps an angle to (−π, π].
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Converts a Cartesian point to spherical coordinates.
///
/// At the pole (x = y = 0) the azimuth is 0 by convention. The origin itself
/// is rejected as degenerate.
pub fn cart_to_sph(p: CartesianPoint) -> Result<SphericalCoord, GeometryError> {
    let range = p.norm();
    if range == 0.0 {
        return Err(GeometryError::DegeneratePoint);
    }
    let azimuth = if p.x == 0.0 && p.y == 0.0 {
        0.0
    } else {
        p.y.atan2(p.x)
    };
    Ok(SphericalCoord {
        range,
        azimuth,
        elevation: (p.z / range).clamp(-1.0, 1.0).asin(),
    })
}

/// Converts spherical coordinates back to a Cartesian point.
pub fn sph_to_cart(s: SphericalCoord) -> CartesianPoint {
    let d = range_direction(s);
    CartesianPoint::new(s.range * d.x, s.range * d.y, s.range * d.z)
}

/// Unit direction of a ray: the derivative of `sph_to_cart` with respect to
/// the range coordinate.
pub fn range_direction(s: SphericalCoord) -> CartesianPoint {
    let (sin_e, cos_e) = s.elevation.sin_cos();
    let (sin_a, cos_a) = s.azimuth.sin_cos();
    CartesianPoint::new(cos_e * cos_a, cos_e * sin_a, sin_e)
}

/// Area of intersection of two yaw-rotated box footprints in the x-y plane.
///
/// Computed by Sutherland-Hodgman clipping of one convex footprint against
/// the other; near-zero areas below 1e-12 m² report exactly 0.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let mut poly: Vec<[f64; 2]> = a.bev_corners().to_vec();
    let clip = b.bev_corners();
    for i in 0..4 {
        if poly.is_empty() {
            return 0.0;
        }
        poly = clip_halfplane(&poly, clip[i], clip[(i + 1) % 4]);
    }
    let area = polygon_area(&poly);
    if area < DEGENERATE_AREA {
        0.0
    } else {
        area
    }
}

/// Keeps the part of `poly` on the left of the directed edge a→b.
fn clip_halfplane(poly: &[[f64; 2]], a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let cur = poly[i];
        let next = poly[(i + 1) % poly.len()];
        let s_cur = side(cur);
        let s_next = side(next);
        if s_cur >= 0.0 {
            out.push(cur);
        }
        if (s_cur > 0.0 && s_next < 0.0) || (s_cur < 0.0 && s_next > 0.0) {
            let t = s_cur / (s_cur - s_next);
            out.push([
                cur[0] + t * (next[0] - cur[0]),
                cur[1] + t * (next[1] - cur[1]),
            ]);
        }
    }
    out
}

/// Shoelace area; positive for counter-clockwise polygons.
fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % poly.len()];
        acc += x0 * y1 - x1 * y0;
    }
    acc.abs() / 2.0
}

/// Volume IoU of two oriented boxes, in [0, 1].
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    if a == b {
        // Self-intersection is exact; clipping would round.
        return 1.0;
    }
    let bev = bev_intersection_area(a, b);
    if bev == 0.0 {
        return 0.0;
    }
    let z_overlap = (a.z_max().min(b.z_max()) - a.z_min().max(b.z_min())).max(0.0);
    let inter = bev * z_overlap;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Intersects the ray `origin + t * dir` (t > 0) with an oriented box.
///
/// Returns the `(t_enter, t_exit)` parameter interval, boundary inclusive,
/// or `None` when the ray misses. `dir` need not be unit length; the returned
/// parameters are in units of `|dir|`.
pub fn ray_box_intersection(
    origin: CartesianPoint,
    dir: CartesianPoint,
    b: &Box3D,
) -> Option<(f64, f64)> {
    let o = b.to_local(origin);
    // Rotate the direction only (no translation).
    let (s, c) = b.yaw.sin_cos();
    let d = CartesianPoint::new(c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z);

    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for (oc, dc, half) in [
        (o.x, d.x, b.dx / 2.0),
        (o.y, d.y, b.dy / 2.0),
        (o.z, d.z, b.dz / 2.0),
    ] {
        if dc == 0.0 {
            if oc < -half || oc > half {
                return None;
            }
            continue;
        }
        let t0 = (-half - oc) / dc;
        let t1 = (half - oc) / dc;
        let (lo, hi) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
        t_enter = t_enter.max(lo);
        t_exit = t_exit.min(hi);
        if t_enter > t_exit {
            return None;
        }
    }
    if t_exit <= 0.0 {
        return None;
    }
    Some((t_enter.max(0.0), t_exit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cart_to_sph_axis_cases() {
        let s = cart_to_sph(CartesianPoint::new(10.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(s.range, 10.0);
        assert_eq!(s.azimuth, 0.0);
        assert_eq!(s.elevation, 0.0);

        let pole = cart_to_sph(CartesianPoint::new(0.0, 0.0, 5.0)).unwrap();
        assert_relative_eq!(pole.range, 5.0);
        assert_eq!(pole.azimuth, 0.0, "pole convention");
        assert_relative_eq!(pole.elevation, PI / 2.0);
    }

    #[test]
    fn cart_to_sph_hand_case() {
        let s = cart_to_sph(CartesianPoint::new(3.0, 4.0, 0.0)).unwrap();
        assert_relative_eq!(s.range, 5.0);
        assert_relative_eq!(s.azimuth, 4.0_f64.atan2(3.0), epsilon = 1e-12);
        assert_relative_eq!(s.azimuth, 0.92730, epsilon = 1e-5);
        assert_eq!(s.elevation, 0.0);
    }

    #[test]
    fn cart_to_sph_rejects_origin() {
        assert!(matches!(
            cart_to_sph(CartesianPoint::new(0.0, 0.0, 0.0)),
            Err(GeometryError::DegeneratePoint)
        ));
    }

    #[test]
    fn sph_to_cart_axis_cases() {
        let p = sph_to_cart(SphericalCoord {
            range: 10.0,
            azimuth: 0.0,
            elevation: 0.0,
        });
        assert_relative_eq!(p.x, 10.0);
        assert_relative_eq!(p.y, 0.0);
        assert_relative_eq!(p.z, 0.0);

        let p = sph_to_cart(SphericalCoord {
            range: 5.0,
            azimuth: PI / 2.0,
            elevation: 0.0,
        });
        assert_relative_eq!(p.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.y, 5.0);

        let p = sph_to_cart(SphericalCoord {
            range: 2.0,
            azimuth: PI / 4.0,
            elevation: PI / 4.0,
        });
        assert_relative_eq!(p.x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(p.y, 1.0, epsilon = 1e-12);
        assert_relative_eq!(p.z, 2.0_f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn range_direction_is_unit() {
        let axis = range_direction(SphericalCoord {
            range: 1.0,
            azimuth: 0.0,
            elevation: 0.0,
        });
        assert_eq!((axis.x, axis.y, axis.z), (1.0, 0.0, 0.0));

        let up = range_direction(SphericalCoord {
            range: 1.0,
            azimuth: 0.3,
            elevation: PI / 2.0,
        });
        assert_relative_eq!(up.z, 1.0);
        assert!(up.x.abs() < 1e-15 && up.y.abs() < 1e-15);

        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..1000 {
            let s = SphericalCoord {
                range: 1.0 + 119.0 * next(),
                azimuth: -PI + 2.0 * PI * next(),
                elevation: -PI / 2.0 + PI * next(),
            };
            let d = range_direction(s);
            assert_relative_eq!(d.norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn range_direction_matches_finite_difference() {
        // Central difference of sph_to_cart w.r.t. R, h = 1e-6.
        let mut state = 42u64;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let h = 1e-6;
        for _ in 0..1000 {
            let s = SphericalCoord {
                range: 1.0 + 119.0 * next(),
                azimuth: -PI + 2.0 * PI * next(),
                elevation: -PI / 2.0 + PI * next(),
            };
            let plus = sph_to_cart(SphericalCoord {
                range: s.range + h,
                ..s
            });
            let minus = sph_to_cart(SphericalCoord {
                range: s.range - h,
                ..s
            });
            let d = range_direction(s);
            assert_relative_eq!(d.x, (plus.x - minus.x) / (2.0 * h), epsilon = 1e-6);
            assert_relative_eq!(d.y, (plus.y - minus.y) / (2.0 * h), epsilon = 1e-6);
            assert_relative_eq!(d.z, (plus.z - minus.z) / (2.0 * h), epsilon = 1e-6);
        }
    }

    #[test]
    fn bev_intersection_known_cases() {
        let sq = Box3D::new(0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0);
        assert_relative_eq!(bev_intersection_area(&sq, &sq), 4.0, epsilon = 1e-12);

        let a = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let b = Box3D::new(0.5, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        assert_relative_eq!(bev_intersection_area(&a, &b), 0.5, epsilon = 1e-12);

        let far = Box3D::new(100.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        assert_eq!(bev_intersection_area(&a, &far), 0.0);
    }

    #[test]
    fn bev_intersection_is_symmetric() {
        let a = Box3D::new(0.3, -0.2, 0.0, 3.9, 1.6, 1.5, 0.4);
        let b = Box3D::new(1.1, 0.5, 0.0, 2.5, 2.0, 1.5, -1.1);
        let ab = bev_intersection_area(&a, &b);
        let ba = bev_intersection_area(&b, &a);
        assert_relative_eq!(ab, ba, epsilon = 1e-12);
        assert!(ab > 0.0);
    }

    #[test]
    fn iou3d_known_cases() {
        let a = Box3D::new(0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0);
        assert_relative_eq!(iou3d(&a, &a), 1.0);

        let disjoint = Box3D::new(100.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0);
        assert_eq!(iou3d(&a, &disjoint), 0.0);

        let b = Box3D::new(1.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0);
        assert_relative_eq!(iou3d(&a, &b), 4.0 / 12.0, epsilon = 1e-12);
    }

    #[test]
    fn iou3d_rigid_transform_invariant() {
        let a = Box3D::new(0.3, -0.2, 0.1, 3.9, 1.6, 1.5, 0.4);
        let b = Box3D::new(1.1, 0.5, 0.3, 2.5, 2.0, 1.2, -1.1);
        let base = iou3d(&a, &b);

        let rot = 0.7_f64;
        let (s, c) = rot.sin_cos();
        let shift = |bx: &Box3D| {
            Box3D::new(
                c * bx.cx - s * bx.cy + 5.0,
                s * bx.cx + c * bx.cy - 3.0,
                bx.cz + 1.5,
                bx.dx,
                bx.dy,
                bx.dz,
                bx.yaw + rot,
            )
        };
        assert_relative_eq!(iou3d(&shift(&a), &shift(&b)), base, epsilon = 1e-9);
    }

    #[test]
    fn ray_box_boundary_inclusive() {
        // Ray along z = 0 grazing the bottom face of a box with z in [0, 1].
        let b = Box3D::new(20.0, 0.0, 0.5, 3.6, 3.6, 1.0, 0.0);
        let hit = ray_box_intersection(
            CartesianPoint::new(0.0, 0.0, 0.0),
            CartesianPoint::new(1.0, 0.0, 0.0),
            &b,
        );
        let (t0, t1) = hit.expect("grazing ray intersects");
        assert_relative_eq!(t0, 18.2, epsilon = 1e-12);
        assert_relative_eq!(t1, 21.8, epsilon = 1e-12);

        let miss = ray_box_intersection(
            CartesianPoint::new(0.0, 0.0, 0.0),
            CartesianPoint::new(-1.0, 0.0, 0.0),
            &b,
        );
        assert!(miss.is_none(), "box behind the ray");
    }
}
