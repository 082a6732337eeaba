//! KITTI object-detection dataset ingestion and point-cloud persistence.
//!
//! Point clouds use the velodyne `.bin` wire format: packed little-endian
//! `f32` quadruples (x, y, z, intensity). Values are widened to `f64` in
//! memory; writing narrows back to `f32`, so a read-write round trip is
//! byte identical.

use crate::geometry::{normalize_angle, Box3D};
use nalgebra::{Matrix3, Vector3};
use std::collections::HashMap;
use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KittiError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed point cloud: {reason}")]
    MalformedPointCloud { path: PathBuf, reason: String },
    #[error("{path}: missing calibration key {key}")]
    MissingCalibrationKey { path: PathBuf, key: String },
    #[error("{path}: malformed calibration: {reason}")]
    MalformedCalibration { path: PathBuf, reason: String },
    #[error("{path}: malformed label line {line}: {reason}")]
    MalformedLabel {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("calibration rotation is not invertible")]
    NonInvertibleCalibration,
    #[error("frame {frame_id} incomplete: missing {}", missing.join(", "))]
    FrameIncomplete {
        frame_id: String,
        missing: Vec<String>,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> KittiError {
    KittiError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One LiDAR return. Coordinates in meters, intensity in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

/// A scene point cloud in the LiDAR frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
}

impl PointCloud {
    pub fn new(points: Vec<LidarPoint>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LidarPoint> {
        self.points.iter()
    }
}

/// Reads a velodyne `.bin` point cloud.
///
/// The file size must be a multiple of 16 bytes and every value finite.
/// Intensities outside [0, 1] are clamped with a warning; some real captures
/// exceed the nominal range.
pub fn read_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud, KittiError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(KittiError::MalformedPointCloud {
            path: path.to_path_buf(),
            reason: format!("size {} is not a multiple of 16 bytes", bytes.len()),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut clamped = 0usize;
    for quad in bytes.chunks_exact(16) {
        let v: Vec<f32> = quad
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if v.iter().any(|f| !f.is_finite()) {
            return Err(KittiError::MalformedPointCloud {
                path: path.to_path_buf(),
                reason: format!("non-finite value in point {}", points.len()),
            });
        }
        let mut intensity = v[3] as f64;
        if !(0.0..=1.0).contains(&intensity) {
            intensity = intensity.clamp(0.0, 1.0);
            clamped += 1;
        }
        points.push(LidarPoint {
            x: v[0] as f64,
            y: v[1] as f64,
            z: v[2] as f64,
            intensity,
        });
    }
    if clamped > 0 {
        log::warn!(
            "{}: clamped {} intensity values to [0, 1]",
            path.display(),
            clamped
        );
    }
    Ok(PointCloud::new(points))
}

/// Writes a point cloud in the velodyne `.bin` format (little-endian f32).
pub fn write_point_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<(), KittiError> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(cloud.len() * 16);
    for p in cloud.iter() {
        for v in [p.x, p.y, p.z, p.intensity] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&buf).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Projection and rigid-transform blocks of a KITTI calibration file.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    /// Camera 2 projection matrix, row major.
    pub p2: [[f64; 4]; 3],
    /// Rectification rotation.
    pub r0_rect: Matrix3<f64>,
    /// Rotation block of the velodyne-to-camera transform.
    pub tr_rot: Matrix3<f64>,
    /// Translation of the velodyne-to-camera transform.
    pub tr_t: Vector3<f64>,
}

impl CalibrationSet {
    /// Identity rectification and axis-permuting velodyne-to-camera transform
    /// matching the usual KITTI sensor arrangement:
    /// x_cam = -y_velo, y_cam = -z_velo, z_cam = x_velo.
    pub fn kitti_like() -> Self {
        Self {
            p2: [
                [721.5377, 0.0, 609.5593, 44.85728],
                [0.0, 721.5377, 172.854, 0.2163791],
                [0.0, 0.0, 1.0, 0.002745884],
            ],
            r0_rect: Matrix3::identity(),
            tr_rot: Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0),
            tr_t: Vector3::zeros(),
        }
    }

    /// Fully identity calibration; camera frame coincides with the LiDAR frame.
    pub fn identity() -> Self {
        Self {
            p2: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
            r0_rect: Matrix3::identity(),
            tr_rot: Matrix3::identity(),
            tr_t: Vector3::zeros(),
        }
    }

    fn combined_rotation(&self) -> Matrix3<f64> {
        self.r0_rect * self.tr_rot
    }

    /// LiDAR frame to rectified camera frame.
    pub fn velo_to_cam(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.r0_rect * (self.tr_rot * p + self.tr_t)
    }

    /// Rectified camera frame back to the LiDAR frame.
    pub fn cam_to_velo(&self, p: Vector3<f64>) -> Result<Vector3<f64>, KittiError> {
        let inv = self
            .combined_rotation()
            .try_inverse()
            .ok_or(KittiError::NonInvertibleCalibration)?;
        Ok(inv * p
            - self
                .tr_rot
                .try_inverse()
                .ok_or(KittiError::NonInvertibleCalibration)?
                * self.tr_t)
    }

    /// Serializes in the KITTI calib text layout.
    pub fn to_kitti_text(&self) -> String {
        let fmt_row = |vals: &[f64]| {
            vals.iter()
                .map(|v| format!("{v:e}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let p2: Vec<f64> = self.p2.iter().flatten().copied().collect();
        let r0: Vec<f64> = self.r0_rect.transpose().iter().copied().collect();
        let mut tr = Vec::new();
        for r in 0..3 {
            for c in 0..3 {
                tr.push(self.tr_rot[(r, c)]);
            }
            tr.push(self.tr_t[r]);
        }
        format!(
            "P2: {}\nR0_rect: {}\nTr_velo_to_cam: {}\n",
            fmt_row(&p2),
            fmt_row(&r0),
            fmt_row(&tr)
        )
    }
}

const ORTHONORMAL_TOL: f64 = 1e-3;

fn check_orthonormal(m: &Matrix3<f64>, what: &str, path: &Path) -> Result<(), KittiError> {
    let err = (m * m.transpose() - Matrix3::identity()).norm();
    if err > ORTHONORMAL_TOL {
        return Err(KittiError::MalformedCalibration {
            path: path.to_path_buf(),
            reason: format!("{what} is not orthonormal (deviation {err:.2e})"),
        });
    }
    Ok(())
}

/// Parses a KITTI calibration file (`KEY: v1 v2 ...` lines).
pub fn read_calibration(path: impl AsRef<Path>) -> Result<CalibrationSet, KittiError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut table: HashMap<&str, Vec<f64>> = HashMap::new();
    for line in text.lines() {
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        let vals: Result<Vec<f64>, _> = rest.split_whitespace().map(str::parse::<f64>).collect();
        match vals {
            Ok(v) => {
                table.insert(key.trim(), v);
            }
            Err(e) => {
                return Err(KittiError::MalformedCalibration {
                    path: path.to_path_buf(),
                    reason: format!("key {}: {e}", key.trim()),
                })
            }
        }
    }

    let want = |key: &str, n: usize| -> Result<Vec<f64>, KittiError> {
        let v = table
            .get(key)
            .ok_or_else(|| KittiError::MissingCalibrationKey {
                path: path.to_path_buf(),
                key: key.to_string(),
            })?;
        if v.len() != n {
            return Err(KittiError::MalformedCalibration {
                path: path.to_path_buf(),
                reason: format!("key {key}: expected {n} values, found {}", v.len()),
            });
        }
        Ok(v.clone())
    };

    let p2v = want("P2", 12)?;
    let r0v = want("R0_rect", 9)?;
    let trv = want("Tr_velo_to_cam", 12)?;

    let mut p2 = [[0.0; 4]; 3];
    for r in 0..3 {
        for c in 0..4 {
            p2[r][c] = p2v[r * 4 + c];
        }
    }
    let r0_rect = Matrix3::from_row_slice(&r0v);
    let tr_rot = Matrix3::new(
        trv[0], trv[1], trv[2], trv[4], trv[5], trv[6], trv[8], trv[9], trv[10],
    );
    let tr_t = Vector3::new(trv[3], trv[7], trv[11]);

    check_orthonormal(&r0_rect, "R0_rect", path)?;
    check_orthonormal(&tr_rot, "Tr_velo_to_cam rotation", path)?;

    Ok(CalibrationSet {
        p2,
        r0_rect,
        tr_rot,
        tr_t,
    })
}

/// One line of a KITTI object label file.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub class: String,
    pub truncation: f64,
    pub occlusion: f64,
    pub alpha: f64,
    /// 2D image box (left, top, right, bottom), pixels.
    pub bbox: [f64; 4],
    /// Height, width, length in meters.
    pub dims_hwl: [f64; 3],
    /// Bottom-center of the box in the rectified camera frame.
    pub location: [f64; 3],
    pub rotation_y: f64,
}

/// Parses a KITTI label file into records, unfiltered.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<LabelRecord>, KittiError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 15 {
            return Err(KittiError::MalformedLabel {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("expected 15 fields, found {}", fields.len()),
            });
        }
        let num = |idx: usize| -> Result<f64, KittiError> {
            fields[idx]
                .parse::<f64>()
                .map_err(|e| KittiError::MalformedLabel {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: format!("field {idx}: {e}"),
                })
        };
        out.push(LabelRecord {
            class: fields[0].to_string(),
            truncation: num(1)?,
            occlusion: num(2)?,
            alpha: num(3)?,
            bbox: [num(4)?, num(5)?, num(6)?, num(7)?],
            dims_hwl: [num(8)?, num(9)?, num(10)?],
            location: [num(11)?, num(12)?, num(13)?],
            rotation_y: num(14)?,
        });
    }
    Ok(out)
}

/// Converts a label to an oriented box in the LiDAR frame.
///
/// The camera-frame bottom-center location is lifted by h/2 to the box
/// center, mapped through the inverse calibration, and the dims reordered
/// (l, w, h) -> (dx, dy, dz). Yaw becomes `-rotation_y - pi/2`.
pub fn label_to_lidar_box(
    label: &LabelRecord,
    calib: &CalibrationSet,
) -> Result<Box3D, KittiError> {
    let [h, w, l] = label.dims_hwl;
    let center_cam = Vector3::new(
        label.location[0],
        label.location[1] - h / 2.0,
        label.location[2],
    );
    let center = calib.cam_to_velo(center_cam)?;
    Ok(Box3D::new(
        center[0],
        center[1],
        center[2],
        l,
        w,
        h,
        normalize_angle(-label.rotation_y - FRAC_PI_2),
    ))
}

/// Inverse of [`label_to_lidar_box`]; used to synthesize label files.
pub fn lidar_box_to_label(b: &Box3D, calib: &CalibrationSet, class: &str) -> LabelRecord {
    let center_cam = calib.velo_to_cam(Vector3::new(b.cx, b.cy, b.cz));
    let location = [center_cam[0], center_cam[1] + b.dz / 2.0, center_cam[2]];
    let rotation_y = normalize_angle(-b.yaw - FRAC_PI_2);
    let alpha = normalize_angle(rotation_y - center_cam[0].atan2(center_cam[2]));
    LabelRecord {
        class: class.to_string(),
        truncation: 0.0,
        occlusion: 0.0,
        alpha,
        bbox: [0.0, 0.0, 50.0, 50.0],
        dims_hwl: [b.dz, b.dy, b.dx],
        location,
        rotation_y,
    }
}

/// Formats label records in the KITTI label file layout.
pub fn labels_to_text(labels: &[LabelRecord]) -> String {
    let mut out = String::new();
    for l in labels {
        out.push_str(&format!(
            "{} {:.2} {} {:.6} {:.2} {:.2} {:.2} {:.2} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            l.class,
            l.truncation,
            l.occlusion as i64,
            l.alpha,
            l.bbox[0],
            l.bbox[1],
            l.bbox[2],
            l.bbox[3],
            l.dims_hwl[0],
            l.dims_hwl[1],
            l.dims_hwl[2],
            l.location[0],
            l.location[1],
            l.location[2],
            l.rotation_y
        ));
    }
    out
}

/// All members of one dataset frame. The image is carried as an opaque path
/// and never decoded; the attack leaves the image channel untouched.
#[derive(Debug, Clone)]
pub struct Frame {
    pub frame_id: String,
    pub cloud: PointCloud,
    pub calib: CalibrationSet,
    pub labels: Vec<LabelRecord>,
    pub image_path: PathBuf,
}

impl Frame {
    /// LiDAR-frame boxes for every retained label.
    pub fn lidar_boxes(&self) -> Result<Vec<Box3D>, KittiError> {
        self.labels
            .iter()
            .map(|l| label_to_lidar_box(l, &self.calib))
            .collect()
    }
}

/// Classes retained by default when loading frames.
pub const DEFAULT_CLASSES: &[&str] = &["Car"];

/// Zero-pads numeric frame ids to the 6-digit KITTI file stem.
pub fn normalize_frame_id(frame_id: &str) -> String {
    match frame_id.parse::<u64>() {
        Ok(n) => format!("{n:06}"),
        Err(_) => frame_id.to_string(),
    }
}

/// Loads one frame from a standard KITTI object layout
/// (`velodyne/`, `calib/`, `label_2/`, `image_2/`), keeping only labels of
/// the given classes.
pub fn load_frame_with_classes(
    dataset_root: impl AsRef<Path>,
    frame_id: &str,
    classes: &[&str],
) -> Result<Frame, KittiError> {
    let root = dataset_root.as_ref();
    let id = normalize_frame_id(frame_id);
    let cloud_path = root.join("velodyne").join(format!("{id}.bin"));
    let calib_path = root.join("calib").join(format!("{id}.txt"));
    let label_path = root.join("label_2").join(format!("{id}.txt"));
    let image_path = root.join("image_2").join(format!("{id}.png"));

    let missing: Vec<String> = [&cloud_path, &calib_path, &label_path, &image_path]
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(KittiError::FrameIncomplete {
            frame_id: id,
            missing,
        });
    }

    let cloud = read_point_cloud(&cloud_path)?;
    let calib = read_calibration(&calib_path)?;
    let labels = read_labels(&label_path)?
        .into_iter()
        .filter(|l| classes.contains(&l.class.as_str()))
        .collect();

    Ok(Frame {
        frame_id: id,
        cloud,
        calib,
        labels,
        image_path,
    })
}

/// [`load_frame_with_classes`] with the default Car filter.
pub fn load_frame(dataset_root: impl AsRef<Path>, frame_id: &str) -> Result<Frame, KittiError> {
    load_frame_with_classes(dataset_root, frame_id, DEFAULT_CLASSES)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn temp_dir() -> tempfile::TempDir {
        tempfile::tempdir().expect("tempdir")
    }

    #[test]
    fn point_cloud_round_trip_is_bit_exact() {
        let dir = temp_dir();
        let path = dir.path().join("two.bin");
        let mut bytes = Vec::new();
        for v in [1.5f32, -2.25, 0.125, 0.5, 20.0, 0.0, -1.0, 1.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, &bytes).unwrap();

        let cloud = read_point_cloud(&path).unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.points[0].x, 1.5);
        assert_eq!(cloud.points[0].intensity, 0.5);
        assert_eq!(cloud.points[1].x, 20.0);

        let out = dir.path().join("copy.bin");
        write_point_cloud(&cloud, &out).unwrap();
        assert_eq!(fs::read(&out).unwrap(), bytes);
    }

    #[test]
    fn point_cloud_rejects_bad_sizes_and_values() {
        let dir = temp_dir();
        let path = dir.path().join("short.bin");
        fs::write(&path, vec![0u8; 17]).unwrap();
        assert!(matches!(
            read_point_cloud(&path),
            Err(KittiError::MalformedPointCloud { .. })
        ));

        let nan = dir.path().join("nan.bin");
        let mut bytes = Vec::new();
        for v in [f32::NAN, 0.0, 0.0, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&nan, &bytes).unwrap();
        assert!(matches!(
            read_point_cloud(&nan),
            Err(KittiError::MalformedPointCloud { .. })
        ));
    }

    #[test]
    fn empty_and_single_point_writes() {
        let dir = temp_dir();
        let empty = dir.path().join("empty.bin");
        write_point_cloud(&PointCloud::default(), &empty).unwrap();
        assert_eq!(fs::read(&empty).unwrap().len(), 0);

        let one = dir.path().join("one.bin");
        let cloud = PointCloud::new(vec![LidarPoint {
            x: 1.0,
            y: 2.0,
            z: 3.0,
            intensity: 0.25,
        }]);
        write_point_cloud(&cloud, &one).unwrap();
        assert_eq!(fs::read(&one).unwrap().len(), 16);
    }

    #[test]
    fn calibration_parses_identity_fixture() {
        let dir = temp_dir();
        let path = dir.path().join("calib.txt");
        fs::write(&path, CalibrationSet::identity().to_kitti_text()).unwrap();
        let calib = read_calibration(&path).unwrap();
        assert_eq!(calib.r0_rect, Matrix3::identity());
        assert_eq!(calib.tr_rot, Matrix3::identity());
        assert_eq!(calib.tr_t, Vector3::zeros());
    }

    #[test]
    fn calibration_missing_key_is_named() {
        let dir = temp_dir();
        let path = dir.path().join("calib.txt");
        fs::write(
            &path,
            "P2: 1 0 0 0 0 1 0 0 0 0 1 0\nR0_rect: 1 0 0 0 1 0 0 0 1\n",
        )
        .unwrap();
        match read_calibration(&path) {
            Err(KittiError::MissingCalibrationKey { key, .. }) => {
                assert_eq!(key, "Tr_velo_to_cam")
            }
            other => panic!("expected missing-key error, got {other:?}"),
        }
    }

    #[test]
    fn calibration_real_format_fixture_matches_hand_parse() {
        // Shortened from a real calib file; expected values read off by hand.
        let text = "P2: 7.215377e+02 0.000000e+00 6.095593e+02 4.485728e+01 0.000000e+00 7.215377e+02 1.728540e+02 2.163791e-01 0.000000e+00 0.000000e+00 1.000000e+00 2.745884e-03\n\
                    R0_rect: 9.999239e-01 9.837760e-03 -7.445048e-03 -9.869795e-03 9.999421e-01 -4.278459e-03 7.402527e-03 4.351614e-03 9.999631e-01\n\
                    Tr_velo_to_cam: 7.533745e-03 -9.999714e-01 -6.166020e-04 -4.069766e-03 1.480249e-02 7.280733e-04 -9.998902e-01 -7.631618e-02 9.998621e-01 7.523790e-03 1.480755e-02 -2.717806e-01\n";
        let dir = temp_dir();
        let path = dir.path().join("calib.txt");
        fs::write(&path, text).unwrap();
        let calib = read_calibration(&path).unwrap();
        assert_relative_eq!(calib.p2[0][0], 721.5377, epsilon = 1e-9);
        assert_relative_eq!(calib.p2[1][3], 0.2163791, epsilon = 1e-9);
        assert_relative_eq!(calib.r0_rect[(0, 1)], 9.83776e-3, epsilon = 1e-12);
        assert_relative_eq!(calib.tr_rot[(2, 0)], 9.998621e-1, epsilon = 1e-12);
        assert_relative_eq!(calib.tr_t[2], -2.717806e-1, epsilon = 1e-12);
    }

    #[test]
    fn label_box_conversion_identity_calibration() {
        // Identity calibration: the "camera" frame equals the LiDAR frame, so
        // the box center is the bottom-center location lifted by h/2 in y.
        let calib = CalibrationSet::identity();
        let label = LabelRecord {
            class: "Car".into(),
            truncation: 0.0,
            occlusion: 0.0,
            alpha: 0.0,
            bbox: [0.0; 4],
            dims_hwl: [1.0, 1.6, 3.9],
            location: [0.0, 1.0, 10.0],
            rotation_y: -FRAC_PI_2,
        };
        let b = label_to_lidar_box(&label, &calib).unwrap();
        assert_relative_eq!(b.cx, 0.0);
        assert_relative_eq!(b.cy, 0.5, epsilon = 1e-12);
        assert_relative_eq!(b.cz, 10.0);
        assert_eq!((b.dx, b.dy, b.dz), (3.9, 1.6, 1.0));
        assert_relative_eq!(b.yaw, 0.0, epsilon = 1e-12, max_relative = 1.0);
    }

    #[test]
    fn label_box_round_trip_kitti_like() {
        let calib = CalibrationSet::kitti_like();
        let b = Box3D::new(18.0, -3.5, -0.9, 3.9, 1.6, 1.56, 0.35);
        let label = lidar_box_to_label(&b, &calib, "Car");
        let back = label_to_lidar_box(&label, &calib).unwrap();
        assert_relative_eq!(back.cx, b.cx, epsilon = 1e-9);
        assert_relative_eq!(back.cy, b.cy, epsilon = 1e-9);
        assert_relative_eq!(back.cz, b.cz, epsilon = 1e-9);
        assert_relative_eq!(back.yaw, b.yaw, epsilon = 1e-9);
        assert_eq!(back.dx, b.dx);
    }

    #[test]
    fn frame_id_normalization() {
        assert_eq!(normalize_frame_id("123"), "000123");
        assert_eq!(normalize_frame_id("000042"), "000042");
        assert_eq!(normalize_frame_id("not-numeric"), "not-numeric");
    }

    #[test]
    fn load_frame_reports_missing_members() {
        let dir = temp_dir();
        let root = dir.path();
        fs::create_dir_all(root.join("velodyne")).unwrap();
        fs::create_dir_all(root.join("calib")).unwrap();
        write_point_cloud(&PointCloud::default(), root.join("velodyne/000007.bin")).unwrap();
        fs::write(
            root.join("calib/000007.txt"),
            CalibrationSet::kitti_like().to_kitti_text(),
        )
        .unwrap();
        match load_frame(root, "7") {
            Err(KittiError::FrameIncomplete { missing, .. }) => {
                assert_eq!(missing.len(), 2, "label and image are missing: {missing:?}")
            }
            other => panic!("expected frame-incomplete, got {other:?}"),
        }
    }

    #[test]
    fn load_frame_filters_classes() {
        let dir = temp_dir();
        let root = dir.path();
        for sub in ["velodyne", "calib", "label_2", "image_2"] {
            fs::create_dir_all(root.join(sub)).unwrap();
        }
        write_point_cloud(&PointCloud::default(), root.join("velodyne/000001.bin")).unwrap();
        let calib = CalibrationSet::kitti_like();
        fs::write(root.join("calib/000001.txt"), calib.to_kitti_text()).unwrap();
        let car = lidar_box_to_label(
            &Box3D::new(20.0, 0.0, -0.9, 3.9, 1.6, 1.56, 0.0),
            &calib,
            "Car",
        );
        let ped = lidar_box_to_label(
            &Box3D::new(8.0, 2.0, -1.0, 0.8, 0.8, 1.8, 0.0),
            &calib,
            "Pedestrian",
        );
        fs::write(root.join("label_2/000001.txt"), labels_to_text(&[car, ped])).unwrap();
        fs::write(root.join("image_2/000001.png"), b"\x89PNG\r\n\x1a\n").unwrap();

        let frame = load_frame(root, "000001").unwrap();
        assert_eq!(frame.labels.len(), 1);
        assert_eq!(frame.labels[0].class, "Car");
        let boxes = frame.lidar_boxes().unwrap();
        assert_relative_eq!(boxes[0].cx, 20.0, epsilon = 1e-6);
    }

    #[test]
    fn yaw_formula_hand_case() {
        // rotation_y = -pi/2 maps to LiDAR yaw 0.
        let yaw = normalize_angle(-(-FRAC_PI_2) - FRAC_PI_2);
        assert_eq!(yaw, 0.0);
        // And the round trip stays in (-pi, pi].
        let back = normalize_angle(-0.0 - FRAC_PI_2);
        assert!(back > -PI && back <= PI);
    }
}
