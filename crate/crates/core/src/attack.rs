//! The hiding attack: suppress every proposal relevant to a target box by
//! descending the adversarial loss
//!
//! ```text
//! L = sum over relevant proposals of IoU(gt, p) * ln(c)
//! ```
//!
//! with respect to the adversarial point ranges only. Angles are pinned to
//! the ray grid at initialization, so every iterate remains physically
//! injectable; ranges are projected back into each ray's feasible interval
//! after every step. Restarts re-draw the rays to escape bad initializations.

use crate::detector::{Detector, DetectorError, DetectorInput, Proposal};
use crate::geometry::{iou3d, range_direction, Box3D};
use crate::kitti::PointCloud;
use crate::lidar::{
    feasible_rays, placement_region_for, sample_initial_points, strongest_return_merge_detailed,
    validate_physical, AdvPointSet, BeamTable, LidarError,
};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::{Duration, Instant};
use thiserror::Error;

/// Confidence floor applied before taking logarithms.
const CONFIDENCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Lidar(#[from] LidarError),
    #[error("detector failed at restart {restart}, iteration {iteration}: {source}")]
    Detector {
        restart: usize,
        iteration: usize,
        #[source]
        source: DetectorError,
    },
    #[error("finite-difference budget exceeded: {limit} detector calls")]
    BudgetExceeded { limit: usize },
    #[error("analytic gradients requested but the detector provides none")]
    AnalyticUnsupported,
}

/// How the range gradient is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Backpropagation through the surrogate's confidence function.
    Analytic,
    /// Central differences on each range; works with any detector.
    FiniteDifference,
}

/// Attack hyperparameters. Defaults follow the modeled attacker: 200 points
/// within a 10 degree horizontal window, five restarts of 500 iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Number of adversarial points (n).
    pub points: usize,
    /// Number of restarts (n_init).
    pub restarts: usize,
    /// Iterations per restart (n_iter).
    pub iterations: usize,
    /// Relevance threshold on IoU against the target box.
    pub epsilon_iou: f64,
    /// Relevance threshold on proposal confidence.
    pub epsilon_score: f64,
    /// Gradient step size in meters of range.
    pub step_size: f64,
    /// A proposal at or above this IoU and the score threshold counts as
    /// still detecting the target.
    pub success_iou: f64,
    /// Score half of the success test; `None` uses the detector's operating
    /// threshold.
    pub success_score: Option<f64>,
    pub gradient_mode: GradientMode,
    /// Range step for finite differences, meters.
    pub fd_step: f64,
    /// Detector-call budget for finite-difference mode.
    pub max_detector_calls: Option<usize>,
    /// Horizontal window available to the transmitter, radians.
    pub window: f64,
    /// Azimuth grid resolution, radians.
    pub azimuth_resolution: f64,
    /// Intensity of injected returns.
    pub adv_intensity: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            points: 200,
            restarts: 5,
            iterations: 500,
            epsilon_iou: 0.1,
            epsilon_score: 0.1,
            step_size: 0.05,
            success_iou: 0.5,
            success_score: None,
            gradient_mode: GradientMode::Analytic,
            fd_step: 0.01,
            max_detector_calls: None,
            window: 10.0_f64.to_radians(),
            azimuth_resolution: 0.2_f64.to_radians(),
            adv_intensity: 0.9,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |msg: &str| Err(AttackError::InvalidConfig(msg.to_string()));
        if self.points == 0 {
            return bad("points must be >= 1");
        }
        if self.restarts == 0 || self.iterations == 0 {
            return bad("restarts and iterations must be >= 1");
        }
        if self.step_size.is_nan()
            || self.step_size <= 0.0
            || self.fd_step.is_nan()
            || self.fd_step <= 0.0
        {
            return bad("step sizes must be positive");
        }
        for (name, v) in [
            ("epsilon_iou", self.epsilon_iou),
            ("epsilon_score", self.epsilon_score),
            ("success_iou", self.success_iou),
            ("adv_intensity", self.adv_intensity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(AttackError::InvalidConfig(format!(
                    "{name} must be in [0, 1]"
                )));
            }
        }
        if let Some(s) = self.success_score {
            if !(0.0..=1.0).contains(&s) {
                return bad("success_score must be in [0, 1]");
            }
        }
        if self.window.is_nan()
            || self.window <= 0.0
            || self.azimuth_resolution.is_nan()
            || self.azimuth_resolution <= 0.0
        {
            return bad("window and azimuth resolution must be positive");
        }
        Ok(())
    }
}

/// Proposals the loss suppresses: IoU with the target above `epsilon_iou`
/// and confidence above `epsilon_score`. Returns (proposal index, IoU).
pub fn relevant_proposals(
    proposals: &[Proposal],
    gt: &Box3D,
    epsilon_iou: f64,
    epsilon_score: f64,
) -> Vec<(usize, f64)> {
    proposals
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            if p.confidence <= epsilon_score {
                return None;
            }
            let iou = iou3d(gt, &p.box3d);
            (iou > epsilon_iou).then_some((i, iou))
        })
        .collect()
}

/// The adversarial loss over (IoU, confidence) pairs: sum of IoU * ln(c),
/// with confidences floored at 1e-12. Zero for an empty set; never positive.
pub fn adversarial_loss(relevant: &[(f64, f64)]) -> f64 {
    relevant
        .iter()
        .map(|&(iou, c)| iou * c.clamp(CONFIDENCE_FLOOR, 1.0).ln())
        .sum()
}

/// One term of the adversarial loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub proposal: usize,
    pub iou: f64,
    pub confidence: f64,
    pub term: f64,
}

/// The loss with its per-proposal decomposition.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

pub fn loss_breakdown(
    proposals: &[Proposal],
    gt: &Box3D,
    epsilon_iou: f64,
    epsilon_score: f64,
) -> LossBreakdown {
    let terms: Vec<LossTerm> = relevant_proposals(proposals, gt, epsilon_iou, epsilon_score)
        .into_iter()
        .map(|(i, iou)| {
            let confidence = proposals[i].confidence;
            LossTerm {
                proposal: i,
                iou,
                confidence,
                term: iou * confidence.clamp(CONFIDENCE_FLOOR, 1.0).ln(),
            }
        })
        .collect();
    let total = terms.iter().map(|t| t.term).sum();
    LossBreakdown { terms, total }
}

/// True when no proposal both overlaps the target at `iou_thresh` and scores
/// at least `score_thresh`: the target is hidden.
pub fn is_hidden(proposals: &[Proposal], gt: &Box3D, iou_thresh: f64, score_thresh: f64) -> bool {
    !proposals
        .iter()
        .any(|p| p.confidence >= score_thresh && iou3d(gt, &p.box3d) >= iou_thresh)
}

/// Projected descent step on the ranges: `R <- clamp(R - eta * g)`.
/// Angles are untouched.
pub fn gradient_step(adv: &AdvPointSet, grad: &[f64], eta: f64) -> AdvPointSet {
    assert_eq!(adv.len(), grad.len());
    let points = adv
        .points
        .iter()
        .zip(grad)
        .map(|(p, g)| {
            let mut q = *p;
            q.range = (p.range - eta * g).clamp(p.r_min, p.r_max);
            q
        })
        .collect();
    AdvPointSet { points }
}

struct LossGradientEngine<'a> {
    scene: &'a PointCloud,
    gt: &'a Box3D,
    beams: &'a BeamTable,
    config: &'a AttackConfig,
    frame_id: &'a str,
    image: Option<&'a Path>,
    detector_calls: usize,
}

impl<'a> LossGradientEngine<'a> {
    // The call budget applies to finite-difference mode only; `detect` just
    // keeps the count, `loss_with_budget` enforces it.
    fn detect(
        &mut self,
        detector: &mut dyn Detector,
        cloud: &PointCloud,
    ) -> Result<Vec<Proposal>, DetectorError> {
        self.detector_calls += 1;
        detector.detect(&DetectorInput {
            cloud,
            frame_id: self.frame_id,
            image: self.image,
        })
    }

    fn merged(&self, adv: &AdvPointSet) -> crate::lidar::MergedCloud {
        strongest_return_merge_detailed(
            self.scene,
            adv,
            self.config.adv_intensity,
            self.beams,
            self.config.azimuth_resolution,
        )
    }

    fn loss_of(
        &mut self,
        detector: &mut dyn Detector,
        adv: &AdvPointSet,
    ) -> Result<f64, DetectorError> {
        let merged = self.merged(adv);
        let proposals = self.detect(detector, &merged.cloud)?;
        Ok(loss_breakdown(
            &proposals,
            self.gt,
            self.config.epsilon_iou,
            self.config.epsilon_score,
        )
        .total)
    }

    /// dL/dR per adversarial point, given the already-detected state.
    fn analytic_gradient(
        &mut self,
        detector: &mut dyn Detector,
        adv: &AdvPointSet,
        merged: &crate::lidar::MergedCloud,
        proposals: &[Proposal],
    ) -> Result<Vec<f64>, DetectorError> {
        let relevant = relevant_proposals(
            proposals,
            self.gt,
            self.config.epsilon_iou,
            self.config.epsilon_score,
        );
        let mut grad = vec![0.0; adv.len()];
        if relevant.is_empty() {
            return Ok(grad);
        }
        // Only points that survived the merge exist in the cloud.
        let queried: Vec<(usize, usize)> = merged
            .adv_positions
            .iter()
            .enumerate()
            .filter_map(|(j, pos)| pos.map(|p| (j, p)))
            .collect();
        let indices: Vec<usize> = queried.iter().map(|&(_, p)| p).collect();
        let point_grads = detector.point_gradients(
            &DetectorInput {
                cloud: &merged.cloud,
                frame_id: self.frame_id,
                image: self.image,
            },
            &indices,
        )?;

        let weight: std::collections::HashMap<usize, f64> = relevant.into_iter().collect();
        for (row, &(j, _)) in point_grads.rows.iter().zip(&queried) {
            let dir = range_direction(adv.points[j].spherical());
            let mut acc = 0.0;
            for infl in row {
                let Some(&iou) = weight.get(&infl.proposal) else {
                    continue;
                };
                let c = proposals[infl.proposal].confidence.max(CONFIDENCE_FLOOR);
                // d/dR of IoU * ln(c): IoU is a constant weight per anchor.
                let dc_dr = infl.d_confidence[0] * dir.x
                    + infl.d_confidence[1] * dir.y
                    + infl.d_confidence[2] * dir.z;
                acc += iou / c * dc_dr;
            }
            grad[j] = acc;
        }
        Ok(grad)
    }

    fn fd_gradient(
        &mut self,
        detector: &mut dyn Detector,
        adv: &AdvPointSet,
    ) -> Result<Vec<f64>, AttackError> {
        let h = self.config.fd_step;
        let mut grad = vec![0.0; adv.len()];
        let mut probe = adv.clone();
        for (j, g) in grad.iter_mut().enumerate() {
            let base = adv.points[j].range;
            probe.points[j].range = base + h;
            let plus = self.loss_with_budget(detector, &probe)?;
            probe.points[j].range = base - h;
            let minus = self.loss_with_budget(detector, &probe)?;
            probe.points[j].range = base;
            *g = (plus - minus) / (2.0 * h);
        }
        Ok(grad)
    }

    fn loss_with_budget(
        &mut self,
        detector: &mut dyn Detector,
        adv: &AdvPointSet,
    ) -> Result<f64, AttackError> {
        if let Some(limit) = self.config.max_detector_calls {
            if self.detector_calls >= limit {
                return Err(AttackError::BudgetExceeded { limit });
            }
        }
        self.loss_of(detector, adv)
            .map_err(|source| AttackError::Detector {
                restart: 0,
                iteration: 0,
                source,
            })
    }
}

/// dL/dR for each adversarial point against the merged scene.
///
/// Analytic mode backpropagates through the detector (surrogate only);
/// finite-difference mode re-evaluates the loss at R +- fd_step and honors
/// the detector-call budget.
pub fn loss_range_gradient(
    adv: &AdvPointSet,
    scene: &PointCloud,
    detector: &mut dyn Detector,
    gt: &Box3D,
    beams: &BeamTable,
    config: &AttackConfig,
) -> Result<Vec<f64>, AttackError> {
    let mut engine = LossGradientEngine {
        scene,
        gt,
        beams,
        config,
        frame_id: "",
        image: None,
        detector_calls: 0,
    };
    match config.gradient_mode {
        GradientMode::Analytic => {
            if !detector.supports_analytic_gradients() {
                return Err(AttackError::AnalyticUnsupported);
            }
            let merged = engine.merged(adv);
            let proposals =
                engine
                    .detect(detector, &merged.cloud)
                    .map_err(|source| AttackError::Detector {
                        restart: 0,
                        iteration: 0,
                        source,
                    })?;
            engine
                .analytic_gradient(detector, adv, &merged, &proposals)
                .map_err(|source| AttackError::Detector {
                    restart: 0,
                    iteration: 0,
                    source,
                })
        }
        GradientMode::FiniteDifference => engine.fd_gradient(detector, adv),
    }
}

/// Loss values recorded over one restart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartTrace {
    pub seed: u64,
    pub losses: Vec<f64>,
}

/// Outcome of a hiding attack run.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub success: bool,
    pub restarts_used: usize,
    /// Iterations executed in the final restart (counting the iteration that
    /// observed the hide).
    pub iterations_used: usize,
    pub final_cloud: PointCloud,
    pub final_points: AdvPointSet,
    pub trajectory: Vec<RestartTrace>,
    pub wall_time: Duration,
}

/// Algorithm: per restart, sample points on feasible rays, then loop
/// detect -> early exit if hidden -> gradient -> projected step. The hide
/// test runs before the update, and once more after the loop for the final
/// step's effect.
pub fn run_hiding_attack(
    scene: &PointCloud,
    frame_id: &str,
    image: Option<&Path>,
    gt: &Box3D,
    detector: &mut dyn Detector,
    beams: &BeamTable,
    config: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    config.validate()?;
    if config.gradient_mode == GradientMode::Analytic && !detector.supports_analytic_gradients() {
        return Err(AttackError::AnalyticUnsupported);
    }
    let start = Instant::now();
    let success_score = config
        .success_score
        .unwrap_or_else(|| detector.operating_threshold());

    let region = placement_region_for(gt);
    let feasible = feasible_rays(&region, beams, config.azimuth_resolution);

    let mut engine = LossGradientEngine {
        scene,
        gt,
        beams,
        config,
        frame_id,
        image,
        detector_calls: 0,
    };

    let mut trajectory = Vec::new();
    let mut last_state: Option<(AdvPointSet, PointCloud)> = None;

    for restart in 0..config.restarts {
        let restart_seed = config.seed.wrapping_add(restart as u64);
        let mut adv = sample_initial_points(&feasible, config.points, config.window, restart_seed)?;
        let mut losses = Vec::new();

        let detect_ctx = |engine: &mut LossGradientEngine,
                          det: &mut dyn Detector,
                          cloud: &PointCloud,
                          iteration: usize|
         -> Result<Vec<Proposal>, AttackError> {
            engine
                .detect(det, cloud)
                .map_err(|source| AttackError::Detector {
                    restart,
                    iteration,
                    source,
                })
        };

        for iteration in 0..config.iterations {
            let merged = engine.merged(&adv);
            let proposals = detect_ctx(&mut engine, detector, &merged.cloud, iteration)?;
            let loss =
                loss_breakdown(&proposals, gt, config.epsilon_iou, config.epsilon_score).total;
            losses.push(loss);

            if is_hidden(&proposals, gt, config.success_iou, success_score) {
                trajectory.push(RestartTrace {
                    seed: restart_seed,
                    losses,
                });
                return Ok(finish(
                    true,
                    restart + 1,
                    iteration + 1,
                    merged.cloud,
                    adv,
                    trajectory,
                    beams,
                    config,
                    start,
                ));
            }

            let grad = match config.gradient_mode {
                GradientMode::Analytic => engine
                    .analytic_gradient(detector, &adv, &merged, &proposals)
                    .map_err(|source| AttackError::Detector {
                        restart,
                        iteration,
                        source,
                    })?,
                GradientMode::FiniteDifference => engine.fd_gradient(detector, &adv)?,
            };
            adv = gradient_step(&adv, &grad, config.step_size);
            debug_assert!(
                validate_physical(&adv, beams, config.azimuth_resolution, config.window).passed(),
                "physical constraints must hold after every step"
            );
        }

        // The last update has not been detection-checked yet.
        let merged = engine.merged(&adv);
        let proposals = detect_ctx(&mut engine, detector, &merged.cloud, config.iterations)?;
        losses.push(loss_breakdown(&proposals, gt, config.epsilon_iou, config.epsilon_score).total);
        let hidden = is_hidden(&proposals, gt, config.success_iou, success_score);
        trajectory.push(RestartTrace {
            seed: restart_seed,
            losses,
        });
        if hidden {
            return Ok(finish(
                true,
                restart + 1,
                config.iterations,
                merged.cloud,
                adv,
                trajectory,
                beams,
                config,
                start,
            ));
        }
        last_state = Some((adv, merged.cloud));
    }

    let (adv, cloud) = last_state.expect("at least one restart ran");
    Ok(finish(
        false,
        config.restarts,
        config.iterations,
        cloud,
        adv,
        trajectory,
        beams,
        config,
        start,
    ))
}

#[allow(clippy::too_many_arguments)]
fn finish(
    success: bool,
    restarts_used: usize,
    iterations_used: usize,
    final_cloud: PointCloud,
    final_points: AdvPointSet,
    trajectory: Vec<RestartTrace>,
    beams: &BeamTable,
    config: &AttackConfig,
    start: Instant,
) -> AttackResult {
    let report = validate_physical(
        &final_points,
        beams,
        config.azimuth_resolution,
        config.window,
    );
    assert!(
        report.passed(),
        "emitted adversarial set violates physical constraints: {report:?}"
    );
    AttackResult {
        success,
        restarts_used,
        iterations_used,
        final_cloud,
        final_points,
        trajectory,
        wall_time: start.elapsed(),
    }
}

/// One adversarial point as serialized into reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvPointReport {
    pub beam: usize,
    pub azimuth_index: i64,
    pub elevation_rad: f64,
    pub azimuth_rad: f64,
    pub range_m: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// JSON-facing attack report: everything about the run except the merged
/// cloud, which ships separately in the point-cloud wire format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub success: bool,
    pub restarts_used: usize,
    pub iterations_used: usize,
    pub config: AttackConfig,
    pub trajectory: Vec<RestartTrace>,
    pub final_points: Vec<AdvPointReport>,
    pub wall_time_ms: u64,
}

impl AttackResult {
    pub fn to_report(&self, config: &AttackConfig) -> AttackReport {
        AttackReport {
            success: self.success,
            restarts_used: self.restarts_used,
            iterations_used: self.iterations_used,
            config: config.clone(),
            trajectory: self.trajectory.clone(),
            final_points: self
                .final_points
                .points
                .iter()
                .map(|p| {
                    let c = p.cartesian();
                    AdvPointReport {
                        beam: p.ray.beam,
                        azimuth_index: p.ray.azimuth_index,
                        elevation_rad: p.elevation,
                        azimuth_rad: p.azimuth,
                        range_m: p.range,
                        x: c.x,
                        y: c.y,
                        z: c.z,
                    }
                })
                .collect(),
            wall_time_ms: self.wall_time.as_millis() as u64,
        }
    }
}
