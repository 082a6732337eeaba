//! Generation, validation, and evaluation of physically injectable
//! adversarial LiDAR points that hide a target car from a 3D object
//! detector.
//!
//! The pipeline models a 64-beam spinning LiDAR operating in strongest-return
//! mode. Adversarial points live on the sensor's discrete ray grid inside a
//! fixed placement region above the target car, and only their ranges are
//! optimized, so every intermediate point set stays injectable by a real
//! laser transmitter. Detection is abstracted behind [`detector::Detector`]:
//! a differentiable analytic surrogate ships with the crate for desk-scale
//! verification, and real fusion models attach over a line-delimited JSON
//! wire protocol.

pub mod attack;
pub mod detector;
pub mod eval;
pub mod geometry;
pub mod kitti;
pub mod lidar;
pub mod synthetic;

pub use attack::{AttackConfig, AttackReport, AttackResult, GradientMode};
pub use detector::{Detector, DetectorInput, Proposal, SurrogateDetector, SurrogateParams};
pub use eval::{EvalReport, SweepReport, TargetDescriptor};
pub use geometry::{Box3D, CartesianPoint, SphericalCoord};
pub use kitti::{Frame, LidarPoint, PointCloud};
pub use lidar::{AdvPoint, AdvPointSet, BeamTable, FeasibleRay, PlacementRegion, RayId};
