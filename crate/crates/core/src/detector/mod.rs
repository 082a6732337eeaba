//! Detector abstraction consumed by the attack.
//!
//! Two implementations ship with the crate: [`SurrogateDetector`], an analytic
//! differentiable stand-in used for desk-scale verification, and
//! [`ExternalDetector`], a client for real fusion models speaking the
//! line-delimited JSON wire protocol. The surrogate provides analytic point
//! gradients; external detectors are gradient-free and rely on the attack's
//! finite-difference mode.

mod external;
mod protocol;
mod surrogate;

pub use external::{external_detect, Endpoint, ExternalConfig, ExternalDetector};
pub use protocol::{
    encode_request, encode_response, parse_request, parse_response, WireProposal, WireRequest,
    WireResponse, PROTOCOL_VERSION,
};
pub use surrogate::{
    calibrate_surrogate, params_to_kv, soft_membership, soft_membership_grad, surrogate_detect,
    CalibFixture, Roi, SurrogateDetector, SurrogateParams,
};

use crate::geometry::Box3D;
use crate::kitti::PointCloud;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("detector does not provide analytic gradients")]
    GradientsUnsupported,
    #[error("connection to {endpoint} failed: {reason}")]
    Connection { endpoint: String, reason: String },
    #[error("{endpoint}: no response within {timeout_ms} ms")]
    Timeout { endpoint: String, timeout_ms: u64 },
    #[error("malformed response: {reason}")]
    MalformedResponse { reason: String },
    #[error("protocol version mismatch: expected {expected}, got {got}")]
    ProtocolVersion { expected: u32, got: u32 },
    #[error("calibration failed: {reason} (best found: bias {bias}, inside {inside}, above {above}, clean {clean:.3}, attacked {attacked:.3})")]
    CalibrationFailure {
        reason: String,
        bias: f64,
        inside: f64,
        above: f64,
        clean: f64,
        attacked: f64,
    },
    #[error(transparent)]
    Lidar(#[from] crate::lidar::LidarError),
}

/// A candidate detection: an oriented box plus class confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub box3d: Box3D,
    pub confidence: f64,
}

/// What a detector sees for one frame. The image is an opaque reference
/// forwarded to external detectors; the surrogate ignores it.
#[derive(Debug, Clone, Copy)]
pub struct DetectorInput<'a> {
    pub cloud: &'a PointCloud,
    pub frame_id: &'a str,
    pub image: Option<&'a Path>,
}

impl<'a> DetectorInput<'a> {
    pub fn cloud_only(cloud: &'a PointCloud) -> Self {
        Self {
            cloud,
            frame_id: "",
            image: None,
        }
    }
}

/// Per-point confidence gradients, sparse over the proposals a point
/// influences. Rows are parallel to the queried point indices.
#[derive(Debug, Clone, Default)]
pub struct PointGradient {
    pub rows: Vec<Vec<ProposalInfluence>>,
}

/// Gradient of one proposal's confidence with respect to one point.
#[derive(Debug, Clone, Copy)]
pub struct ProposalInfluence {
    pub proposal: usize,
    pub d_confidence: [f64; 3],
}

/// The detection interface consumed by the attack and evaluation drivers.
pub trait Detector {
    fn detect(&mut self, input: &DetectorInput<'_>) -> Result<Vec<Proposal>, DetectorError>;

    /// Analytic d(confidence)/d(x, y, z) for the given cloud points, where
    /// supported. Proposal indices refer to the output of [`Self::detect`]
    /// on the same input.
    fn point_gradients(
        &mut self,
        _input: &DetectorInput<'_>,
        _point_indices: &[usize],
    ) -> Result<PointGradient, DetectorError> {
        Err(DetectorError::GradientsUnsupported)
    }

    fn supports_analytic_gradients(&self) -> bool {
        false
    }

    /// Score above which this detector considers a proposal a detection.
    fn operating_threshold(&self) -> f64;
}
