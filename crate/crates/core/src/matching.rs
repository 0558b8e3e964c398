//! Mutual nearest-neighbor matching, translation-consensus confidence scoring
//! and score-weighted translation estimates.
//!
//! A correspondence's displacement is `tgt - src`: the position of the source
//! view relative to the target view, in the target's coordinate frame.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{squared_distance_below, FeatureSet, Keypoint};
use crate::imgmath;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Translation2D {
    pub dx: f64,
    pub dy: f64,
}

impl Translation2D {
    pub const fn new(dx: f64, dy: f64) -> Self {
        Self { dx, dy }
    }

    pub fn norm(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub src_index: usize,
    pub tgt_index: usize,
    pub src: Keypoint,
    pub tgt: Keypoint,
    pub desc_dist: f64,
}

impl Correspondence {
    pub fn displacement(&self) -> Translation2D {
        Translation2D::new(self.tgt.x - self.src.x, self.tgt.y - self.src.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredCorrespondence {
    pub base: Correspondence,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusParams {
    /// Width of the Gaussian score kernel, pixels.
    pub tau: f64,
    pub min_matches: usize,
    /// Scores at or above this count as inliers.
    pub inlier_cut: f64,
}

impl Default for ConsensusParams {
    fn default() -> Self {
        Self {
            tau: 3.0,
            min_matches: 4,
            inlier_cut: 0.5,
        }
    }
}

impl ConsensusParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Parameter(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.inlier_cut) {
            return Err(Error::Parameter(format!("inlier_cut must lie in [0,1], got {}", self.inlier_cut)));
        }
        Ok(())
    }

    /// Cutoff of the Tukey biweight used to locate the consensus mode.
    fn tukey_c(&self) -> f64 {
        3.0 * self.tau
    }
}

const NN_BLOCK: usize = 256;

/// Reciprocal nearest neighbors between two descriptor lists as
/// `(index_a, index_b, distance)`, ordered by `index_a`. Ties go to the lower
/// index on both sides.
///
/// Each row of `a` is searched over `b` with early abandoning; only the
/// nearest neighbors found that way are then searched back over `a`. The
/// result equals a full distance-matrix search.
pub fn mutual_nn_descriptors<A, B>(a: &[A], b: &[B]) -> Vec<(usize, usize, f64)>
where
    A: AsRef<[f32]>,
    B: AsRef<[f32]>,
{
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    // A later copy of a bit-identical descriptor can never be the strict
    // nearest neighbor, so only first occurrences in `b` are searched.
    let mut seen: HashSet<Vec<u32>> = HashSet::with_capacity(b.len());
    let distinct: Vec<usize> = (0..b.len())
        .filter(|&j| {
            let key: Vec<u32> = b[j].as_ref().iter().map(|v| v.to_bits()).collect();
            seen.insert(key)
        })
        .collect();
    let cols: Vec<&[f32]> = distinct.iter().map(|&j| b[j].as_ref()).collect();
    let forward: Vec<(f32, usize)> = forward_nearest(a, &cols)
        .into_iter()
        .map(|(d, k)| (d, distinct[k]))
        .collect();
    let mut back: HashMap<usize, usize> = HashMap::new();
    forward
        .iter()
        .enumerate()
        .filter_map(|(i, &(d, j))| {
            let reverse = *back.entry(j).or_insert_with(|| nearest(b[j].as_ref(), a).1);
            (reverse == i).then(|| (i, j, (d as f64).sqrt()))
        })
        .collect()
}

/// Nearest neighbor in `b` of every row of `a`. Blocks of `b` are visited in
/// order and stay cache resident while every row of `a` passes over them.
fn forward_nearest<A, B>(a: &[A], b: &[B]) -> Vec<(f32, usize)>
where
    A: AsRef<[f32]>,
    B: AsRef<[f32]>,
{
    let mut forward = vec![(f32::INFINITY, 0usize); a.len()];
    for (block, chunk) in b.chunks(NN_BLOCK).enumerate() {
        let offset = block * NN_BLOCK;
        for (da, best) in a.iter().zip(forward.iter_mut()) {
            let q = da.as_ref();
            for (k, db) in chunk.iter().enumerate() {
                if let Some(v) = squared_distance_below(q, db.as_ref(), best.0) {
                    *best = (v, offset + k);
                }
            }
        }
    }
    forward
}

/// Lowest-index nearest neighbor of `q` in `set` with its squared distance.
fn nearest<S: AsRef<[f32]>>(q: &[f32], set: &[S]) -> (f32, usize) {
    let mut best = (f32::INFINITY, 0);
    for (j, d) in set.iter().enumerate() {
        if let Some(v) = squared_distance_below(q, d.as_ref(), best.0) {
            best = (v, j);
        }
    }
    best
}

/// Mutual nearest neighbors with `a` as source and `b` as target.
pub fn mutual_nn(a: &FeatureSet, b: &FeatureSet) -> Vec<Correspondence> {
    mutual_nn_descriptors(&a.descriptors, &b.descriptors)
        .into_iter()
        .map(|(i, j, d)| Correspondence {
            src_index: i,
            tgt_index: j,
            src: a.keypoints[i],
            tgt: b.keypoints[j],
            desc_dist: d,
        })
        .collect()
}

fn tukey_rho(r2: f64, c: f64) -> f64 {
    let c2 = c * c;
    if r2 >= c2 {
        c2 / 6.0
    } else {
        let t = 1.0 - r2 / c2;
        c2 / 6.0 * (1.0 - t * t * t)
    }
}

/// Displacement minimizing the summed Tukey loss over all candidate
/// displacements, evaluated exhaustively at every candidate. Ties resolve to
/// the lexicographically smallest displacement so the result does not depend
/// on input order.
pub fn consensus_mode(displacements: &[Translation2D], cp: &ConsensusParams) -> Option<Translation2D> {
    let c = cp.tukey_c();
    // Summing in sorted order makes near-tied costs round the same way for
    // every permutation of the input.
    let mut sorted = displacements.to_vec();
    sorted.sort_by(|a, b| a.dx.total_cmp(&b.dx).then(a.dy.total_cmp(&b.dy)));
    let mut best: Option<(f64, Translation2D)> = None;
    for center in &sorted {
        let cost: f64 = sorted
            .iter()
            .map(|d| tukey_rho((d.dx - center.dx).powi(2) + (d.dy - center.dy).powi(2), c))
            .sum();
        let better = match best {
            None => true,
            Some((bc, bd)) => cost < bc || (cost == bc && (center.dx, center.dy) < (bd.dx, bd.dy)),
        };
        if better {
            best = Some((cost, *center));
        }
    }
    best.map(|b| b.1)
}

/// Confidence per candidate: `exp(-|d_i - mode|^2 / (2 tau^2))` around the
/// consensus mode, or zero for all when there are fewer than `min_matches`.
pub fn score_matches(cands: &[Correspondence], cp: &ConsensusParams) -> Vec<ScoredCorrespondence> {
    if cands.len() < cp.min_matches || cands.is_empty() {
        return cands
            .iter()
            .map(|&base| ScoredCorrespondence { base, score: 0.0 })
            .collect();
    }
    let disps: Vec<Translation2D> = cands.iter().map(Correspondence::displacement).collect();
    let mode = consensus_mode(&disps, cp).expect("non-empty");
    let two_tau2 = 2.0 * cp.tau * cp.tau;
    cands
        .iter()
        .zip(&disps)
        .map(|(&base, d)| {
            let r2 = (d.dx - mode.dx).powi(2) + (d.dy - mode.dy).powi(2);
            ScoredCorrespondence {
                base,
                score: (-r2 / two_tau2).exp(),
            }
        })
        .collect()
}

/// Ground-truth inlier labels for candidates under translation `m_gt`.
pub fn label_matches(cands: &[Correspondence], m_gt: Translation2D, epsilon: f64) -> Vec<u8> {
    cands
        .iter()
        .map(|c| imgmath::inlier_label([c.src.x, c.src.y], [c.tgt.x, c.tgt.y], [m_gt.dx, m_gt.dy], epsilon))
        .collect()
}

/// Entries whose score reaches the inlier cut.
pub fn inliers<'a>(scored: &'a [ScoredCorrespondence], cp: &'a ConsensusParams) -> impl Iterator<Item = &'a ScoredCorrespondence> + 'a {
    scored.iter().filter(move |s| s.score >= cp.inlier_cut)
}

/// Score-weighted mean displacement over inliers, with the summed inlier score.
pub fn estimate_translation(scored: &[ScoredCorrespondence], cp: &ConsensusParams) -> Result<(Translation2D, f64)> {
    let (mut sx, mut sy, mut sw, mut n) = (0.0, 0.0, 0.0, 0usize);
    for s in inliers(scored, cp) {
        let d = s.base.displacement();
        sx += s.score * d.dx;
        sy += s.score * d.dy;
        sw += s.score;
        n += 1;
    }
    if n < cp.min_matches || !(sw > 0.0) {
        return Err(Error::RegistrationFailure {
            inliers: n,
            required: cp.min_matches,
        });
    }
    Ok((Translation2D::new(sx / sw, sy / sw), sw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Descriptor, DESCRIPTOR_DIM};

    fn desc(seed: usize) -> Descriptor {
        Descriptor::from_values((0..DESCRIPTOR_DIM).map(|k| ((seed * 31 + k * 7) % 13) as f32 + 0.5).collect()).unwrap()
    }

    fn corr(sx: f64, sy: f64, tx: f64, ty: f64) -> Correspondence {
        Correspondence {
            src_index: 0,
            tgt_index: 0,
            src: Keypoint::new(sx, sy, 1.0),
            tgt: Keypoint::new(tx, ty, 1.0),
            desc_dist: 0.0,
        }
    }

    fn set(descs: Vec<Descriptor>) -> FeatureSet {
        FeatureSet {
            keypoints: (0..descs.len()).map(|i| Keypoint::new(i as f64, 0.0, 1.0)).collect(),
            descriptors: descs,
            width: 10,
            height: 10,
            frame_id: 0,
        }
    }

    #[test]
    fn identical_sets_pair_identically() {
        let s = set((0..6).map(desc).collect());
        let m = mutual_nn(&s, &s);
        assert_eq!(m.len(), 6);
        assert!(m.iter().all(|c| c.src_index == c.tgt_index && c.desc_dist == 0.0));
        assert!(mutual_nn(&s, &set(vec![])).is_empty());
        assert!(mutual_nn(&set(vec![]), &s).is_empty());
    }

    #[test]
    fn non_reciprocal_pair_excluded() {
        // 1-D picture along one axis: b0 sits closer to a1 than to a0, and a0's
        // only neighbour is b0.
        let unit = |v: [f32; 2]| {
            let mut x = vec![0.0f32; DESCRIPTOR_DIM];
            x[0] = v[0];
            x[1] = v[1];
            Descriptor::from_values(x).unwrap()
        };
        let a = vec![unit([1.0, 0.0]), unit([0.8, 0.6]), unit([-1.0, 0.0])];
        let b = vec![unit([0.7, 0.71]), unit([-0.6, -0.8])];
        // exhaustive NN table
        let nn = |x: &Descriptor, ys: &[Descriptor]| {
            let mut best = (f64::INFINITY, 0);
            for (j, y) in ys.iter().enumerate() {
                let d = x.distance(y);
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        };
        assert_eq!(nn(&a[0], &b), 0);
        assert_eq!(nn(&b[0], &a), 1);
        let pairs = mutual_nn_descriptors(&a, &b);
        assert!(!pairs.iter().any(|p| p.0 == 0));
        assert!(pairs.iter().any(|p| p.0 == 1 && p.1 == 0));
        assert!(pairs.iter().any(|p| p.0 == 2 && p.1 == 1));
    }

    #[test]
    fn identical_displacements_score_one() {
        let c: Vec<_> = (0..5).map(|i| corr(i as f64, 2.0, i as f64 + 7.0, -1.0)).collect();
        let s = score_matches(&c, &ConsensusParams::default());
        assert!(s.iter().all(|s| s.score == 1.0));
    }

    #[test]
    fn outlier_far_from_cluster_scores_near_zero() {
        let cp = ConsensusParams::default();
        let mut c: Vec<_> = (0..9)
            .map(|i| {
                let j = (i as f64 - 4.0) * 0.1;
                corr(0.0, 0.0, 20.0 + j, 5.0 - j)
            })
            .collect();
        c.push(corr(0.0, 0.0, 20.0 + 10.0 * cp.tau, 5.0));
        let s = score_matches(&c, &cp);
        assert!(s[9].score < 1e-20);
        assert!(s[..9].iter().all(|s| s.score > 0.9));
    }

    #[test]
    fn too_few_candidates_all_zero() {
        let c: Vec<_> = (0..3).map(|i| corr(0.0, 0.0, i as f64, 0.0)).collect();
        let s = score_matches(&c, &ConsensusParams::default());
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|s| s.score == 0.0));
    }

    #[test]
    fn labels_follow_strict_radius() {
        let m = Translation2D::new(5.0, 0.0);
        let c = vec![corr(1.0, 1.0, 6.0, 1.0), corr(1.0, 1.0, 16.0, 1.0), corr(1.0, 1.0, 15.99, 1.0)];
        assert_eq!(label_matches(&c, m, 10.0), vec![1, 0, 1]);
        assert!(label_matches(&[], m, 10.0).is_empty());
    }

    #[test]
    fn translation_examples() {
        let cp = ConsensusParams::default();
        let s: Vec<_> = (0..5)
            .map(|i| ScoredCorrespondence {
                base: corr(i as f64, 0.0, i as f64 + 10.0, 0.0),
                score: 1.0,
            })
            .collect();
        let (t, w) = estimate_translation(&s, &cp).unwrap();
        assert_eq!((t.dx, t.dy, w), (10.0, 0.0, 5.0));

        let cp2 = ConsensusParams {
            min_matches: 2,
            inlier_cut: 0.2,
            ..cp
        };
        let s2 = vec![
            ScoredCorrespondence {
                base: corr(0.0, 0.0, 10.0, 0.0),
                score: 0.75,
            },
            ScoredCorrespondence {
                base: corr(0.0, 0.0, 14.0, 0.0),
                score: 0.25,
            },
        ];
        let (t, w) = estimate_translation(&s2, &cp2).unwrap();
        assert!((t.dx - 11.0).abs() < 1e-12 && t.dy == 0.0);
        assert_eq!(w, 1.0);

        let r = estimate_translation(&s[..2], &cp);
        assert!(matches!(r, Err(Error::RegistrationFailure { inliers: 2, required: 4 })));
    }
}
