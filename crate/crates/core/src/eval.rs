//! Attack evaluation: success rates, recall-vs-IoU curves, point-count
//! sweeps, and distance/angle binning.
//!
//! Metrics are pure functions over detection results; the drivers run
//! attacks across targets with per-task seeds (`seed + task index`) so
//! parallel execution yields the same report as a sequential run.

use crate::attack::{run_hiding_attack, AttackConfig, AttackError, AttackResult};
use crate::detector::{Detector, DetectorInput, Proposal};
use crate::geometry::{iou3d, Box3D};
use crate::kitti::PointCloud;
use crate::lidar::BeamTable;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("attack with {points} points failed: {source}")]
    Attack {
        points: usize,
        #[source]
        source: AttackError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("report serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// A car selected for hiding, with the axes the experiments bin over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDescriptor {
    pub frame_id: String,
    pub gt: Box3D,
    /// Planar distance of the box center from the sensor, meters.
    pub distance: f64,
    /// Bearing of the box center, degrees; 0 is straight ahead.
    pub angle_deg: f64,
}

impl TargetDescriptor {
    pub fn new(frame_id: impl Into<String>, gt: Box3D) -> Self {
        Self {
            frame_id: frame_id.into(),
            distance: (gt.cx * gt.cx + gt.cy * gt.cy).sqrt(),
            angle_deg: gt.cy.atan2(gt.cx).to_degrees(),
            gt,
        }
    }
}

/// Fraction of successful attacks.
pub fn attack_success_rate(results: &[AttackResult]) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::UndefinedMetric("no attack results".into()));
    }
    let successes = results.iter().filter(|r| r.success).count();
    Ok(successes as f64 / results.len() as f64)
}

/// Detections of one scene against its ground-truth boxes.
#[derive(Debug, Clone)]
pub struct SceneDetections {
    pub gt: Vec<Box3D>,
    pub proposals: Vec<Proposal>,
}

/// One point of a recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallPoint {
    pub iou: f64,
    pub recall: f64,
}

/// Recall of the ground-truth boxes at each IoU threshold, using greedy
/// one-to-one matching in descending confidence order among proposals at or
/// above the score threshold.
pub fn recall_at_iou(
    scenes: &[SceneDetections],
    thresholds: &[f64],
    score_threshold: f64,
) -> Result<Vec<RecallPoint>, EvalError> {
    assert!(
        thresholds.windows(2).all(|w| w[0] <= w[1]),
        "thresholds must be sorted ascending"
    );
    let total_gt: usize = scenes.iter().map(|s| s.gt.len()).sum();
    if total_gt == 0 {
        return Err(EvalError::UndefinedMetric("no ground-truth boxes".into()));
    }

    let mut curve = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut matched = 0usize;
        for scene in scenes {
            let mut order: Vec<usize> = (0..scene.proposals.len())
                .filter(|&i| scene.proposals[i].confidence >= score_threshold)
                .collect();
            order.sort_by(|&a, &b| {
                scene.proposals[b]
                    .confidence
                    .total_cmp(&scene.proposals[a].confidence)
            });
            let mut taken = vec![false; scene.gt.len()];
            for i in order {
                let mut best: Option<(usize, f64)> = None;
                for (g, gt) in scene.gt.iter().enumerate() {
                    if taken[g] {
                        continue;
                    }
                    let iou = iou3d(gt, &scene.proposals[i].box3d);
                    if iou >= t && best.is_none_or(|(_, b)| iou > b) {
                        best = Some((g, iou));
                    }
                }
                if let Some((g, _)) = best {
                    taken[g] = true;
                    matched += 1;
                }
            }
        }
        curve.push(RecallPoint {
            iou: t,
            recall: matched as f64 / total_gt as f64,
        });
    }
    Ok(curve)
}

/// Detection-then-recall driver over (cloud, ground truth) scenes.
pub fn recall_over_scenes(
    scenes: &[(PointCloud, Vec<Box3D>)],
    detector: &mut dyn Detector,
    thresholds: &[f64],
    score_threshold: f64,
) -> Result<Vec<RecallPoint>, EvalError> {
    let mut detections = Vec::with_capacity(scenes.len());
    for (cloud, gt) in scenes {
        let proposals = detector
            .detect(&DetectorInput::cloud_only(cloud))
            .map_err(|e| EvalError::UndefinedMetric(format!("detector failed: {e}")))?;
        detections.push(SceneDetections {
            gt: gt.clone(),
            proposals,
        });
    }
    recall_at_iou(&detections, thresholds, score_threshold)
}

/// Binning axis for target statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinAxis {
    Distance,
    Angle,
}

/// One half-open bin `[lo, hi)` with the member target indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub indices: Vec<usize>,
}

/// Targets split into half-open bins plus an overflow bin for everything
/// outside the configured edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedTargets {
    pub axis: BinAxis,
    pub bins: Vec<Bin>,
    pub overflow: Vec<usize>,
}

/// Distance bin edges, meters.
pub const DISTANCE_EDGES: [f64; 5] = [5.0, 15.0, 25.0, 35.0, 45.0];
/// Angle bin edges, degrees.
pub const ANGLE_EDGES: [f64; 7] = [-30.0, -20.0, -10.0, 0.0, 10.0, 20.0, 30.0];

pub fn bin_targets(targets: &[TargetDescriptor], axis: BinAxis) -> BinnedTargets {
    let edges: &[f64] = match axis {
        BinAxis::Distance => &DISTANCE_EDGES,
        BinAxis::Angle => &ANGLE_EDGES,
    };
    let mut bins: Vec<Bin> = edges
        .windows(2)
        .map(|w| Bin {
            lo: w[0],
            hi: w[1],
            indices: Vec::new(),
        })
        .collect();
    let mut overflow = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        let v = match axis {
            BinAxis::Distance => t.distance,
            BinAxis::Angle => t.angle_deg,
        };
        match bins.iter_mut().find(|b| v >= b.lo && v < b.hi) {
            Some(bin) => bin.indices.push(i),
            None => overflow.push(i),
        }
    }
    BinnedTargets {
        axis,
        bins,
        overflow,
    }
}

/// A scene with its attack target.
#[derive(Debug, Clone)]
pub struct EvalTarget {
    pub cloud: PointCloud,
    pub descriptor: TargetDescriptor,
}

/// Builds a detector for one target; the anchor grid is usually recentered
/// on the target. Must be cheap: one detector per attack task.
pub type DetectorFactory<'a> = dyn Fn(&TargetDescriptor) -> Box<dyn Detector + Send> + Sync + 'a;

fn run_tasks(
    targets: &[EvalTarget],
    counts: &[usize],
    base: &AttackConfig,
    beams: &BeamTable,
    make_detector: &DetectorFactory<'_>,
    parallelism: usize,
) -> Result<Vec<(usize, usize, AttackResult)>, EvalError> {
    // Task list in deterministic order; seed = base seed + task index.
    let tasks: Vec<(usize, usize)> = counts
        .iter()
        .enumerate()
        .flat_map(|(ci, _)| (0..targets.len()).map(move |ti| (ci, ti)))
        .collect();

    let run = |(task_idx, &(ci, ti)): (usize, &(usize, usize))| {
        let target = &targets[ti];
        let config = AttackConfig {
            points: counts[ci],
            seed: base.seed.wrapping_add(task_idx as u64),
            ..base.clone()
        };
        let mut detector = make_detector(&target.descriptor);
        run_hiding_attack(
            &target.cloud,
            &target.descriptor.frame_id,
            None,
            &target.descriptor.gt,
            detector.as_mut(),
            beams,
            &config,
        )
        .map(|r| (ci, ti, r))
        .map_err(|source| EvalError::Attack {
            points: counts[ci],
            source,
        })
    };

    if parallelism <= 1 {
        tasks.iter().enumerate().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .expect("thread pool");
        pool.install(|| tasks.par_iter().enumerate().map(run).collect())
    }
}

/// One row of a point-count sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub points: usize,
    pub successes: usize,
    pub total: usize,
    pub asr: f64,
}

/// ASR as a function of the adversarial point budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

/// Default point counts for the sweep.
pub const DEFAULT_SWEEP_COUNTS: [usize; 10] = [20, 40, 60, 80, 100, 120, 140, 160, 180, 200];

/// Runs the hiding attack for every (target, count) pair and reports ASR
/// per count.
pub fn sweep_point_counts(
    targets: &[EvalTarget],
    counts: &[usize],
    base: &AttackConfig,
    beams: &BeamTable,
    make_detector: &DetectorFactory<'_>,
    parallelism: usize,
) -> Result<SweepReport, EvalError> {
    if counts.is_empty() {
        return Err(EvalError::UndefinedMetric("empty count list".into()));
    }
    if targets.is_empty() {
        return Err(EvalError::UndefinedMetric("no targets".into()));
    }
    let outcomes = run_tasks(targets, counts, base, beams, make_detector, parallelism)?;
    let rows = counts
        .iter()
        .enumerate()
        .map(|(ci, &points)| {
            let successes = outcomes
                .iter()
                .filter(|(c, _, r)| *c == ci && r.success)
                .count();
            SweepRow {
                points,
                successes,
                total: targets.len(),
                asr: successes as f64 / targets.len() as f64,
            }
        })
        .collect();
    Ok(SweepReport {
        seed: base.seed,
        rows,
    })
}

/// One recall-curve row comparing clean and attacked clouds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub iou: f64,
    pub recall_clean: f64,
    pub recall_attacked: f64,
}

/// Population and success statistics of one bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub label: String,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub population: usize,
    pub successes: usize,
    pub asr: Option<f64>,
}

/// Full evaluation of one configuration across a target set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total_targets: usize,
    pub successes: usize,
    pub asr: f64,
    pub recall: Vec<RecallRow>,
    pub distance_bins: Vec<BinReport>,
    pub angle_bins: Vec<BinReport>,
    pub attack_config: AttackConfig,
}

/// Default IoU thresholds of the recall curves.
pub const DEFAULT_RECALL_THRESHOLDS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

fn bin_reports(binned: &BinnedTargets, success: &[bool]) -> Vec<BinReport> {
    let mut out: Vec<BinReport> = binned
        .bins
        .iter()
        .map(|b| {
            let successes = b.indices.iter().filter(|&&i| success[i]).count();
            BinReport {
                label: format!("{}..{}", b.lo, b.hi),
                lo: Some(b.lo),
                hi: Some(b.hi),
                population: b.indices.len(),
                successes,
                asr: (!b.indices.is_empty()).then(|| successes as f64 / b.indices.len() as f64),
            }
        })
        .collect();
    let ov_succ = binned.overflow.iter().filter(|&&i| success[i]).count();
    out.push(BinReport {
        label: "overflow".into(),
        lo: None,
        hi: None,
        population: binned.overflow.len(),
        successes: ov_succ,
        asr: (!binned.overflow.is_empty()).then(|| ov_succ as f64 / binned.overflow.len() as f64),
    });
    out
}

/// Attacks every target once at the base config, then reports overall ASR,
/// clean/attacked recall curves, and distance/angle bins.
pub fn evaluate_hiding(
    targets: &[EvalTarget],
    base: &AttackConfig,
    beams: &BeamTable,
    make_detector: &DetectorFactory<'_>,
    thresholds: &[f64],
    parallelism: usize,
) -> Result<(EvalReport, Vec<AttackResult>), EvalError> {
    if targets.is_empty() {
        return Err(EvalError::UndefinedMetric("no targets".into()));
    }
    let outcomes = run_tasks(
        targets,
        &[base.points],
        base,
        beams,
        make_detector,
        parallelism,
    )?;
    let mut results: Vec<Option<AttackResult>> = vec![None; targets.len()];
    for (_, ti, r) in outcomes {
        results[ti] = Some(r);
    }
    let results: Vec<AttackResult> = results.into_iter().map(|r| r.expect("all ran")).collect();
    let success: Vec<bool> = results.iter().map(|r| r.success).collect();
    let successes = success.iter().filter(|&&s| s).count();

    // Clean vs attacked detections per target, one detector per task.
    let mut clean = Vec::with_capacity(targets.len());
    let mut attacked = Vec::with_capacity(targets.len());
    let mut score_threshold = base.success_score.unwrap_or(0.0);
    for (t, r) in targets.iter().zip(&results) {
        let mut det = make_detector(&t.descriptor);
        if base.success_score.is_none() {
            score_threshold = det.operating_threshold();
        }
        let gt = vec![t.descriptor.gt];
        let cp = det
            .detect(&DetectorInput::cloud_only(&t.cloud))
            .map_err(|e| EvalError::UndefinedMetric(format!("detector failed: {e}")))?;
        let ap = det
            .detect(&DetectorInput::cloud_only(&r.final_cloud))
            .map_err(|e| EvalError::UndefinedMetric(format!("detector failed: {e}")))?;
        clean.push(SceneDetections {
            gt: gt.clone(),
            proposals: cp,
        });
        attacked.push(SceneDetections { gt, proposals: ap });
    }
    let recall_clean = recall_at_iou(&clean, thresholds, score_threshold)?;
    let recall_attacked = recall_at_iou(&attacked, thresholds, score_threshold)?;
    let recall: Vec<RecallRow> = recall_clean
        .iter()
        .zip(&recall_attacked)
        .map(|(c, a)| RecallRow {
            iou: c.iou,
            recall_clean: c.recall,
            recall_attacked: a.recall,
        })
        .collect();

    let descriptors: Vec<TargetDescriptor> = targets.iter().map(|t| t.descriptor.clone()).collect();
    let report = EvalReport {
        total_targets: targets.len(),
        successes,
        asr: successes as f64 / targets.len() as f64,
        recall,
        distance_bins: bin_reports(&bin_targets(&descriptors, BinAxis::Distance), &success),
        angle_bins: bin_reports(&bin_targets(&descriptors, BinAxis::Angle), &success),
        attack_config: base.clone(),
    };
    Ok((report, results))
}

/// Any emittable report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Report {
    Eval(EvalReport),
    Sweep(SweepReport),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

fn check_recall_invariants(rows: &[RecallRow]) {
    for w in rows.windows(2) {
        assert!(
            w[1].recall_clean <= w[0].recall_clean + 1e-12
                && w[1].recall_attacked <= w[0].recall_attacked + 1e-12,
            "recall curves must be non-increasing in the IoU threshold"
        );
    }
}

fn bin_csv(bins: &[BinReport]) -> String {
    let mut out = String::from("bin,lo,hi,population,asr\n");
    for b in bins {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            b.label,
            b.lo.map_or(String::new(), |v| v.to_string()),
            b.hi.map_or(String::new(), |v| v.to_string()),
            b.population,
            b.asr.map_or(String::new(), |v| v.to_string()),
        ));
    }
    out
}

/// Writes a report. JSON keeps full fidelity in one file; CSV produces
/// plot-ready tables (the eval report also writes `*_distance_bins.csv` and
/// `*_angle_bins.csv` next to the recall curve).
pub fn emit_report(
    report: &Report,
    format: ReportFormat,
    path: impl AsRef<Path>,
) -> Result<(), EvalError> {
    let path = path.as_ref();
    let io_err = |p: &Path, e: std::io::Error| EvalError::Io {
        path: p.to_path_buf(),
        source: e,
    };
    if let Report::Eval(e) = report {
        check_recall_invariants(&e.recall);
    }
    match format {
        ReportFormat::Json => {
            let text = serde_json::to_string_pretty(report)?;
            std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))?;
        }
        ReportFormat::Csv => match report {
            Report::Sweep(s) => {
                let mut out = String::from("points,asr\n");
                for row in &s.rows {
                    out.push_str(&format!("{},{}\n", row.points, row.asr));
                }
                std::fs::write(path, out).map_err(|e| io_err(path, e))?;
            }
            Report::Eval(e) => {
                let mut out = String::from("iou,recall_clean,recall_attacked\n");
                for r in &e.recall {
                    out.push_str(&format!(
                        "{},{},{}\n",
                        r.iou, r.recall_clean, r.recall_attacked
                    ));
                }
                std::fs::write(path, out).map_err(|e| io_err(path, e))?;
                let stem = path.with_extension("");
                let stem = stem.to_string_lossy();
                for (suffix, bins) in [
                    ("distance_bins", &e.distance_bins),
                    ("angle_bins", &e.angle_bins),
                ] {
                    let p = PathBuf::from(format!("{stem}_{suffix}.csv"));
                    std::fs::write(&p, bin_csv(bins)).map_err(|e| io_err(&p, e))?;
                }
            }
        },
    }
    Ok(())
}
