//! Line-delimited JSON wire protocol for external detectors.
//!
//! One request per line, responses in request order:
//!
//! ```text
//! -> {"v":1,"frame":"000123","image":"/path/or/null","points":[[x,y,z,i],...]}
//! <- {"v":1,"proposals":[{"x":..,"y":..,"z":..,"dx":..,"dy":..,"dz":..,"yaw":..,"score":..}]}
//! ```

use super::{DetectorError, DetectorInput, Proposal};
use crate::geometry::Box3D;
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireRequest {
    pub v: u32,
    pub frame: String,
    pub image: Option<String>,
    pub points: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WireProposal {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub yaw: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireResponse {
    pub v: u32,
    pub proposals: Vec<WireProposal>,
}

impl From<&Proposal> for WireProposal {
    fn from(p: &Proposal) -> Self {
        Self {
            x: p.box3d.cx,
            y: p.box3d.cy,
            z: p.box3d.cz,
            dx: p.box3d.dx,
            dy: p.box3d.dy,
            dz: p.box3d.dz,
            yaw: p.box3d.yaw,
            score: p.confidence,
        }
    }
}

/// Serializes one request line (newline terminated).
pub fn encode_request(input: &DetectorInput<'_>) -> String {
    let req = WireRequest {
        v: PROTOCOL_VERSION,
        frame: input.frame_id.to_string(),
        image: input.image.map(|p| p.display().to_string()),
        points: input
            .cloud
            .iter()
            .map(|p| [p.x, p.y, p.z, p.intensity])
            .collect(),
    };
    let mut line = serde_json::to_string(&req).expect("request serialization cannot fail");
    line.push('\n');
    line
}

/// Parses a request line; used by stub detectors and protocol tests.
pub fn parse_request(line: &str) -> Result<WireRequest, DetectorError> {
    let req: WireRequest =
        serde_json::from_str(line.trim()).map_err(|e| DetectorError::MalformedResponse {
            reason: format!("request: {e}"),
        })?;
    if req.v != PROTOCOL_VERSION {
        return Err(DetectorError::ProtocolVersion {
            expected: PROTOCOL_VERSION,
            got: req.v,
        });
    }
    Ok(req)
}

/// Parses and validates one response line into proposals.
pub fn parse_response(line: &str) -> Result<Vec<Proposal>, DetectorError> {
    let resp: WireResponse =
        serde_json::from_str(line.trim()).map_err(|e| DetectorError::MalformedResponse {
            reason: e.to_string(),
        })?;
    if resp.v != PROTOCOL_VERSION {
        return Err(DetectorError::ProtocolVersion {
            expected: PROTOCOL_VERSION,
            got: resp.v,
        });
    }
    resp.proposals
        .iter()
        .map(|w| {
            let finite = [w.x, w.y, w.z, w.dx, w.dy, w.dz, w.yaw, w.score]
                .iter()
                .all(|v| v.is_finite());
            if !finite {
                return Err(DetectorError::MalformedResponse {
                    reason: "non-finite proposal field".into(),
                });
            }
            if w.dx <= 0.0 || w.dy <= 0.0 || w.dz <= 0.0 {
                return Err(DetectorError::MalformedResponse {
                    reason: format!("non-positive dims ({}, {}, {})", w.dx, w.dy, w.dz),
                });
            }
            if !(-1e-9..=1.0 + 1e-9).contains(&w.score) {
                return Err(DetectorError::MalformedResponse {
                    reason: format!("score {} outside [0, 1]", w.score),
                });
            }
            Ok(Proposal {
                box3d: Box3D::new(w.x, w.y, w.z, w.dx, w.dy, w.dz, w.yaw),
                confidence: w.score.clamp(0.0, 1.0),
            })
        })
        .collect()
}

/// Serializes a response line (newline terminated).
pub fn encode_response(proposals: &[Proposal]) -> String {
    let resp = WireResponse {
        v: PROTOCOL_VERSION,
        proposals: proposals.iter().map(WireProposal::from).collect(),
    };
    let mut line = serde_json::to_string(&resp).expect("response serialization cannot fail");
    line.push('\n');
    line
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kitti::{LidarPoint, PointCloud};

    #[test]
    fn round_trip_is_identity_on_fixture_proposals() {
        let fixture = vec![
            Proposal {
                box3d: Box3D::new(18.5, -2.0, -0.9, 3.9, 1.6, 1.56, 0.25),
                confidence: 0.87,
            },
            Proposal {
                box3d: Box3D::new(7.0, 4.0, -1.0, 4.2, 1.8, 1.4, -1.2),
                confidence: 0.31,
            },
        ];
        let parsed = parse_response(&encode_response(&fixture)).unwrap();
        assert_eq!(parsed, fixture);
    }

    #[test]
    fn missing_score_is_malformed() {
        let line = r#"{"v":1,"proposals":[{"x":1,"y":2,"z":0,"dx":1,"dy":1,"dz":1,"yaw":0}]}"#;
        assert!(matches!(
            parse_response(line),
            Err(DetectorError::MalformedResponse { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let line = r#"{"v":2,"proposals":[]}"#;
        assert!(matches!(
            parse_response(line),
            Err(DetectorError::ProtocolVersion {
                expected: 1,
                got: 2
            })
        ));
    }

    #[test]
    fn request_carries_cloud_and_image() {
        let cloud = PointCloud::new(vec![LidarPoint {
            x: 1.0,
            y: 2.0,
            z: 3.0,
            intensity: 0.5,
        }]);
        let input = DetectorInput {
            cloud: &cloud,
            frame_id: "000123",
            image: Some(std::path::Path::new("/data/image_2/000123.png")),
        };
        let req = parse_request(&encode_request(&input)).unwrap();
        assert_eq!(req.frame, "000123");
        assert_eq!(req.points, vec![[1.0, 2.0, 3.0, 0.5]]);
        assert_eq!(req.image.as_deref(), Some("/data/image_2/000123.png"));
    }
}
