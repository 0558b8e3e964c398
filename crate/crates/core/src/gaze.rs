//! Gaze estimation against a canonical feature space.
//!
//! Each frame keypoint is expressed relative to its frame center (`t_src`);
//! its matched space entry sits at `t_space`. The displacement
//! `t_space - t_src` locates the frame center in canonical coordinates, and
//! the score-weighted mean over retained matches, divided by the calibration's
//! pixels per degree, is the gaze.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canonical::CanonicalFeatureSpace;
use crate::error::Result;
use crate::features::{self, csv_err, EnhanceConfig, FeatureSet, Keypoint};
use crate::matching::{self, ConsensusParams, Correspondence, ScoredCorrespondence};
use crate::phantom::{Calibration, Frame, GazeAngle};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeEstimate {
    pub yaw: f64,
    pub pitch: f64,
    pub n_matches: usize,
    pub total_score: f64,
    pub valid: bool,
}

impl GazeEstimate {
    pub fn invalid(n_matches: usize, total_score: f64) -> Self {
        Self {
            yaw: 0.0,
            pitch: 0.0,
            n_matches,
            total_score,
            valid: false,
        }
    }

    pub fn angle(&self) -> GazeAngle {
        GazeAngle::new(self.yaw, self.pitch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub cal: Calibration,
    pub consensus: ConsensusParams,
    pub use_enhancement: bool,
    pub enhance: EnhanceConfig,
    pub steering_enabled: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            cal: Calibration::default(),
            consensus: ConsensusParams::default(),
            use_enhancement: true,
            enhance: EnhanceConfig::default(),
            steering_enabled: false,
        }
    }
}

/// Mutual nearest neighbors between a frame and the space, scored by
/// displacement consensus. `src` holds frame-centered keypoint coordinates and
/// `tgt` canonical coordinates.
pub fn match_to_space(
    frame_features: &FeatureSet,
    space: &CanonicalFeatureSpace,
    cp: &ConsensusParams,
) -> Vec<ScoredCorrespondence> {
    let cands = space_candidates(frame_features, space);
    matching::score_matches(&cands, cp)
}

/// Unscored mutual nearest-neighbor candidates against the space.
pub fn space_candidates(frame_features: &FeatureSet, space: &CanonicalFeatureSpace) -> Vec<Correspondence> {
    let (cx, cy) = frame_features.center();
    matching::mutual_nn_descriptors(&frame_features.descriptors, &space.entries)
        .into_iter()
        .map(|(i, j, d)| {
            let k = frame_features.keypoints[i];
            let e = &space.entries[j];
            Correspondence {
                src_index: i,
                tgt_index: j,
                src: Keypoint::new(k.x - cx, k.y - cy, k.response),
                tgt: Keypoint::new(e.x, e.y, 1.0),
                desc_dist: d,
            }
        })
        .collect()
}

/// Score-weighted displacement over retained matches converted to degrees.
/// Steering, when enabled, adds the calibrated offset.
pub fn estimate_gaze(scored: &[ScoredCorrespondence], cfg: &TrackerConfig) -> GazeEstimate {
    let cp = &cfg.consensus;
    match matching::estimate_translation(scored, cp) {
        Ok((t, total)) => {
            let g = GazeAngle::from_pixels(t.dx, t.dy, &cfg.cal);
            let (oy, op) = if cfg.steering_enabled {
                cfg.cal.steering_offset
            } else {
                (0.0, 0.0)
            };
            GazeEstimate {
                yaw: g.yaw + oy,
                pitch: g.pitch + op,
                n_matches: matching::inliers(scored, cp).count(),
                total_score: total,
                valid: true,
            }
        }
        Err(_) => {
            let kept: Vec<_> = matching::inliers(scored, cp).collect();
            GazeEstimate::invalid(kept.len(), kept.iter().map(|s| s.score).sum())
        }
    }
}

pub fn track_frame(frame: &Frame, space: &CanonicalFeatureSpace, cfg: &TrackerConfig) -> Result<GazeEstimate> {
    let fs = features::extract(frame, cfg.use_enhancement, &cfg.enhance)?;
    let scored = match_to_space(&fs, space, &cfg.consensus);
    Ok(estimate_gaze(&scored, cfg))
}

/// Tracks frames independently; output order follows input order.
pub fn track_sequence(frames: &[Frame], space: &CanonicalFeatureSpace, cfg: &TrackerConfig) -> Result<Vec<GazeEstimate>> {
    frames.par_iter().map(|f| track_frame(f, space, cfg)).collect()
}

/// One row of a track result file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub frame_id: u64,
    pub yaw_est: f64,
    pub pitch_est: f64,
    pub yaw_true: f64,
    pub pitch_true: f64,
    pub n_matches: usize,
    pub total_score: f64,
    pub valid: bool,
}

impl TrackRecord {
    pub fn new(frame_id: u64, est: &GazeEstimate, truth: GazeAngle) -> Self {
        Self {
            frame_id,
            yaw_est: est.yaw,
            pitch_est: est.pitch,
            yaw_true: truth.yaw,
            pitch_true: truth.pitch,
            n_matches: est.n_matches,
            total_score: est.total_score,
            valid: est.valid,
        }
    }

    pub fn estimate(&self) -> GazeEstimate {
        GazeEstimate {
            yaw: self.yaw_est,
            pitch: self.pitch_est,
            n_matches: self.n_matches,
            total_score: self.total_score,
            valid: self.valid,
        }
    }

    pub fn truth(&self) -> GazeAngle {
        GazeAngle::new(self.yaw_true, self.pitch_true)
    }
}

pub fn write_track_csv(records: &[TrackRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_track_csv(path: &Path) -> Result<Vec<TrackRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scored(dx: f64, dy: f64, score: f64) -> ScoredCorrespondence {
        ScoredCorrespondence {
            base: Correspondence {
                src_index: 0,
                tgt_index: 0,
                src: Keypoint::new(0.0, 0.0, 1.0),
                tgt: Keypoint::new(dx, dy, 1.0),
                desc_dist: 0.0,
            },
            score,
        }
    }

    fn single_match_cfg() -> TrackerConfig {
        TrackerConfig {
            consensus: ConsensusParams {
                min_matches: 1,
                ..ConsensusParams::default()
            },
            ..TrackerConfig::default()
        }
    }

    #[test]
    fn one_degree_of_yaw() {
        let e = estimate_gaze(&[scored(40.18, 0.0, 1.0)], &single_match_cfg());
        assert!(e.valid);
        assert!((e.yaw - 1.0).abs() < 1e-12);
        assert_eq!(e.pitch, 0.0);
    }

    #[test]
    fn zero_displacement_is_straight_ahead() {
        let e = estimate_gaze(&[scored(0.0, 0.0, 1.0)], &single_match_cfg());
        assert_eq!((e.yaw, e.pitch), (0.0, 0.0));
    }

    #[test]
    fn two_matches_average_then_convert() {
        let e = estimate_gaze(&[scored(40.18, 0.0, 1.0), scored(44.18, 0.0, 1.0)], &single_match_cfg());
        assert!((e.yaw - 42.18 / 40.18).abs() < 1e-12);
        assert!((e.yaw - 1.0498).abs() < 1e-4);
        assert_eq!(e.n_matches, 2);
    }

    #[test]
    fn too_few_inliers_is_invalid() {
        let cfg = TrackerConfig::default();
        let e = estimate_gaze(&[scored(1.0, 0.0, 1.0), scored(1.0, 0.0, 0.2)], &cfg);
        assert!(!e.valid);
        assert_eq!((e.yaw, e.pitch, e.n_matches), (0.0, 0.0, 1));
    }

    #[test]
    fn steering_is_additive() {
        let mut cfg = single_match_cfg();
        cfg.cal.steering_offset = (0.3, -0.2);
        let m = [scored(20.0, -8.0, 0.9)];
        let off = estimate_gaze(&m, &cfg);
        cfg.steering_enabled = true;
        let on = estimate_gaze(&m, &cfg);
        assert!((on.yaw - off.yaw - 0.3).abs() < 1e-12);
        assert!((on.pitch - off.pitch + 0.2).abs() < 1e-12);
    }

    #[test]
    fn pitch_sign_follows_image_axis() {
        // Content that sits lower in the frame than in the space means the eye
        // looks up.
        let e = estimate_gaze(&[scored(0.0, -40.17, 1.0)], &single_match_cfg());
        assert!((e.pitch - 1.0).abs() < 1e-12);
    }

    #[test]
    fn track_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let est = GazeEstimate {
            yaw: 0.1 + 0.2,
            pitch: -1.0 / 3.0,
            n_matches: 12,
            total_score: 9.75,
            valid: true,
        };
        let rows = vec![
            TrackRecord::new(3, &est, GazeAngle::new(0.3, -0.3)),
            TrackRecord::new(4, &GazeEstimate::invalid(1, 0.5), GazeAngle::new(2.0, 1.0)),
        ];
        write_track_csv(&rows, &path).unwrap();
        assert_eq!(read_track_csv(&path).unwrap(), rows);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("frame_id,yaw_est,pitch_est,yaw_true,pitch_true,n_matches,total_score,valid\n"));
    }
}
