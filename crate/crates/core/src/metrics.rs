//! TAP-Vid style evaluation: position accuracy, occlusion accuracy and
//! average Jaccard over the thresholds {1, 2, 4, 8, 16} px measured at
//! 256×256.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::correlation::QueryPoint;
use crate::error::{Error, Result};
use crate::numerics::sigmoid;
use crate::track_init::{OcclusionTrack, Track};

pub const PCK_THRESHOLDS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];
/// Errors are measured after rescaling to this square resolution.
pub const EVAL_RESOLUTION: f64 = 256.0;
pub const QUERY_STRIDE: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTrack {
    pub positions: Vec<[f32; 2]>,
    pub visible: Vec<bool>,
}

impl GroundTruthTrack {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self.visible.len() != self.positions.len() {
            return Err(Error::InvalidArgument(format!(
                "ground truth has {} positions but {} visibility flags",
                self.positions.len(),
                self.visible.len()
            )));
        }
        Ok(())
    }
}

/// Pixel extent of the frames the tracks live in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSize {
    pub width: usize,
    pub height: usize,
}

impl FrameSize {
    pub const EVAL: FrameSize = FrameSize {
        width: 256,
        height: 256,
    };

    fn scaled_error(&self, a: [f32; 2], b: [f32; 2]) -> f64 {
        let sx = EVAL_RESOLUTION / self.width as f64;
        let sy = EVAL_RESOLUTION / self.height as f64;
        let dx = (a[0] as f64 - b[0] as f64) * sx;
        let dy = (a[1] as f64 - b[1] as f64) * sy;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Visible iff the visibility probability `1 − σ(logit)` exceeds 0.5.
pub fn predicted_visible(logit: f32) -> bool {
    1.0 - sigmoid(logit) > 0.5
}

fn check_lengths(n: usize, gt: &GroundTruthTrack) -> Result<()> {
    gt.check()?;
    if n != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction has {n} frames, ground truth {}",
            gt.len()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pck {
    pub avg: f64,
    pub per_threshold: [f64; 5],
}

/// Fraction of visible frames within each threshold. `None` when the
/// ground truth has no visible frame.
pub fn pck(pred: &Track, gt: &GroundTruthTrack, frame: FrameSize) -> Result<Option<Pck>> {
    check_lengths(pred.len(), gt)?;
    let errors: Vec<f64> = (0..gt.len())
        .filter(|&t| gt.visible[t])
        .map(|t| frame.scaled_error(pred.positions[t], gt.positions[t]))
        .collect();
    if errors.is_empty() {
        return Ok(None);
    }
    let mut per_threshold = [0.0; 5];
    for (p, &d) in per_threshold.iter_mut().zip(&PCK_THRESHOLDS) {
        *p = errors.iter().filter(|&&e| e < d).count() as f64 / errors.len() as f64;
    }
    Ok(Some(Pck {
        avg: per_threshold.iter().sum::<f64>() / 5.0,
        per_threshold,
    }))
}

pub fn occlusion_accuracy(pred: &OcclusionTrack, gt: &GroundTruthTrack) -> Result<f64> {
    check_lengths(pred.len(), gt)?;
    if gt.is_empty() {
        return Err(Error::InvalidArgument("empty track".into()));
    }
    let correct = pred
        .logits
        .iter()
        .zip(&gt.visible)
        .filter(|(&l, &v)| predicted_visible(l) == v)
        .count();
    Ok(correct as f64 / gt.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Jaccard {
    pub aj: f64,
    pub per_threshold: [f64; 5],
    /// Thresholds with no TP, FP or FN frame (scored 1.0).
    pub vacuous: usize,
}

/// Average Jaccard. A frame is a true positive when both prediction and
/// ground truth say visible and the error is below the threshold; every
/// other frame that either side marks visible is a miss (FP, FN or both)
/// and is counted once in the denominator.
pub fn average_jaccard(pred: &Track, occl: &OcclusionTrack, gt: &GroundTruthTrack, frame: FrameSize) -> Result<Jaccard> {
    check_lengths(pred.len(), gt)?;
    check_lengths(occl.len(), gt)?;
    let mut per_threshold = [0.0; 5];
    let mut vacuous = 0;
    for (j, &d) in per_threshold.iter_mut().zip(&PCK_THRESHOLDS) {
        let (mut tp, mut miss) = (0usize, 0usize);
        for t in 0..gt.len() {
            let pv = predicted_visible(occl.logits[t]);
            let gv = gt.visible[t];
            if pv && gv && frame.scaled_error(pred.positions[t], gt.positions[t]) < d {
                tp += 1;
            } else if pv || gv {
                miss += 1;
            }
        }
        *j = if tp + miss == 0 {
            vacuous += 1;
            1.0
        } else {
            tp as f64 / (tp + miss) as f64
        };
    }
    Ok(Jaccard {
        aj: per_threshold.iter().sum::<f64>() / 5.0,
        per_threshold,
        vacuous,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    Strided,
    First,
}

impl FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strided" => Ok(QueryMode::Strided),
            "first" => Ok(QueryMode::First),
            _ => Err(Error::InvalidArgument(format!("unknown query mode `{s}` (strided|first)"))),
        }
    }
}

impl fmt::Display for QueryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryMode::Strided => "strided",
            QueryMode::First => "first",
        })
    }
}

/// Query points along a ground-truth track. Strided mode keeps every
/// multiple-of-5 frame that is visible (occluded stride points are
/// skipped); first mode keeps the first visible frame.
pub fn sample_queries(gt: &GroundTruthTrack, mode: QueryMode) -> Vec<QueryPoint> {
    let visible = (0..gt.len()).filter(|&t| gt.visible.get(t).copied().unwrap_or(false));
    let at = |t: usize| QueryPoint::new(gt.positions[t][0], gt.positions[t][1], t);
    match mode {
        QueryMode::Strided => visible.filter(|t| t % QUERY_STRIDE == 0).map(at).collect(),
        QueryMode::First => visible.take(1).map(at).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub aj: f64,
    pub pck_avg: f64,
    pub pck_per_threshold: [f64; 5],
    pub oa: f64,
    pub n_points: usize,
    /// Points whose ground truth has no visible frame (left out of PCK).
    pub n_no_visible: usize,
    /// Threshold evaluations that were vacuous (no TP/FP/FN).
    pub n_vacuous: usize,
}

/// One evaluated prediction: the query's predicted track against its
/// ground truth.
pub struct Sample<'a> {
    pub track: &'a Track,
    pub occlusion: &'a OcclusionTrack,
    pub gt: &'a GroundTruthTrack,
}

/// Mean of per-point metrics.
pub fn evaluate(samples: &[Sample<'_>], frame: FrameSize) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let (mut aj, mut oa) = (0.0, 0.0);
    let mut pck_sum = [0.0; 5];
    let (mut n_pck, mut n_vacuous) = (0usize, 0usize);
    for s in samples {
        let j = average_jaccard(s.track, s.occlusion, s.gt, frame)?;
        aj += j.aj;
        n_vacuous += j.vacuous;
        oa += occlusion_accuracy(s.occlusion, s.gt)?;
        if let Some(p) = pck(s.track, s.gt, frame)? {
            pck_sum.iter_mut().zip(p.per_threshold).for_each(|(a, v)| *a += v);
            n_pck += 1;
        }
    }
    let n = samples.len() as f64;
    let pck_per_threshold = if n_pck == 0 {
        [0.0; 5]
    } else {
        pck_sum.map(|v| v / n_pck as f64)
    };
    Ok(MetricsReport {
        aj: aj / n,
        pck_avg: pck_per_threshold.iter().sum::<f64>() / 5.0,
        pck_per_threshold,
        oa: oa / n,
        n_points: samples.len(),
        n_no_visible: samples.len() - n_pck,
        n_vacuous,
    })
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>8}", "metric", "value")?;
        writeln!(f, "{:<12} {:>8.4}", "AJ", self.aj)?;
        writeln!(f, "{:<12} {:>8.4}", "<d_avg", self.pck_avg)?;
        for (d, v) in PCK_THRESHOLDS.iter().zip(&self.pck_per_threshold) {
            writeln!(f, "{:<12} {:>8.4}", format!("  <{d}px"), v)?;
        }
        writeln!(f, "{:<12} {:>8.4}", "OA", self.oa)?;
        write!(f, "{:<12} {:>8}", "points", self.n_points)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt_line(n: usize) -> GroundTruthTrack {
        GroundTruthTrack {
            positions: (0..n).map(|t| [10.0 + t as f32, 20.0]).collect(),
            visible: vec![true; n],
        }
    }

    fn offset(gt: &GroundTruthTrack, dx: &[f32]) -> Track {
        Track {
            positions: gt.positions.iter().zip(dx).map(|(p, d)| [p[0] + d, p[1]]).collect(),
        }
    }

    const VISIBLE: f32 = -10.0;
    const OCCLUDED: f32 = 10.0;

    #[test]
    fn perfect_prediction() {
        let gt = gt_line(7);
        let track = Track { positions: gt.positions.clone() };
        let occ = OcclusionTrack { logits: vec![VISIBLE; 7] };
        assert_eq!(pck(&track, &gt, FrameSize::EVAL).unwrap().unwrap().per_threshold, [1.0; 5]);
        assert_eq!(occlusion_accuracy(&occ, &gt).unwrap(), 1.0);
        assert_eq!(average_jaccard(&track, &occ, &gt, FrameSize::EVAL).unwrap().aj, 1.0);
    }

    #[test]
    fn constant_three_pixel_error() {
        let gt = gt_line(6);
        let p = pck(&offset(&gt, &[3.0; 6]), &gt, FrameSize::EVAL).unwrap().unwrap();
        assert_eq!(p.per_threshold, [0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!((p.avg - 0.6).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_jaccard() {
        let gt = gt_line(4);
        let track = offset(&gt, &[0.5, 3.0, 3.0, 20.0]);
        let occ = OcclusionTrack { logits: vec![VISIBLE; 4] };
        let j = average_jaccard(&track, &occ, &gt, FrameSize::EVAL).unwrap();
        assert_eq!(j.per_threshold, [0.25, 0.25, 0.75, 0.75, 0.75]);
        assert_eq!(j.aj, 0.55);
    }

    #[test]
    fn all_occluded_prediction_scores_zero() {
        let gt = gt_line(5);
        let track = Track { positions: gt.positions.clone() };
        let occ = OcclusionTrack { logits: vec![OCCLUDED; 5] };
        assert_eq!(average_jaccard(&track, &occ, &gt, FrameSize::EVAL).unwrap().aj, 0.0);
        assert_eq!(occlusion_accuracy(&occ, &gt).unwrap(), 0.0);
    }

    #[test]
    fn tie_logit_counts_as_occluded() {
        let gt = gt_line(4);
        let occ = OcclusionTrack { logits: vec![0.0; 4] };
        assert_eq!(occlusion_accuracy(&occ, &gt).unwrap(), 0.0);
        assert!(!predicted_visible(0.0));
    }

    #[test]
    fn vacuous_thresholds_flagged() {
        let gt = GroundTruthTrack { positions: vec![[0.0, 0.0]; 3], visible: vec![false; 3] };
        let track = Track { positions: vec![[50.0, 50.0]; 3] };
        let occ = OcclusionTrack { logits: vec![OCCLUDED; 3] };
        let j = average_jaccard(&track, &occ, &gt, FrameSize::EVAL).unwrap();
        assert_eq!((j.aj, j.vacuous), (1.0, 5));
        assert!(pck(&track, &gt, FrameSize::EVAL).unwrap().is_none());
    }

    #[test]
    fn thresholds_are_resolution_independent() {
        // 3 px at 512 wide is 1.5 px at 256.
        let gt = gt_line(4);
        let p = pck(&offset(&gt, &[3.0; 4]), &gt, FrameSize { width: 512, height: 512 }).unwrap().unwrap();
        assert_eq!(p.per_threshold, [0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn query_sampling_modes() {
        let gt = gt_line(20);
        let frames: Vec<usize> = sample_queries(&gt, QueryMode::Strided).iter().map(|q| q.t).collect();
        assert_eq!(frames, vec![0, 5, 10, 15]);
        let mut late = gt_line(20);
        late.visible[..3].iter_mut().for_each(|v| *v = false);
        let frames: Vec<usize> = sample_queries(&late, QueryMode::Strided).iter().map(|q| q.t).collect();
        assert_eq!(frames, vec![5, 10, 15]);
        let first = sample_queries(&late, QueryMode::First);
        assert_eq!(first.len(), 1);
        assert_eq!(first[0].t, 3);
        assert_eq!((first[0].x, first[0].y), (13.0, 20.0));
        let none = GroundTruthTrack { positions: vec![[0.0; 2]; 4], visible: vec![false; 4] };
        assert!(sample_queries(&none, QueryMode::First).is_empty());
    }

    #[test]
    fn length_mismatch_rejected() {
        let gt = gt_line(4);
        let track = Track { positions: vec![[0.0; 2]; 3] };
        assert!(pck(&track, &gt, FrameSize::EVAL).is_err());
    }
}
