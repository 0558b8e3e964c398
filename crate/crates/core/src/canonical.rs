//! Canonical feature space: pairwise registration over the scan grid,
//! confidence-weighted bundle adjustment, and assembly of the matched
//! keypoints into one coordinate system.
//!
//! Node positions and canonical coordinates use image axes (x right, y down)
//! in pixels, with the origin at the center pixel of the central frame.
//! Bundle adjustment minimizes `|W^1/2 (C n - mu)|^2` per axis, where `C` is
//! the oriented incidence matrix (one row per measurement, -1 at the `from`
//! node, +1 at the `to` node) and `W` holds the summed confidence of each
//! edge's retained matches.

use std::collections::VecDeque;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{self, Descriptor, EnhanceConfig, FeatureSet};
use crate::matching::{self, ConsensusParams, ScoredCorrespondence, Translation2D};
use crate::phantom::{Calibration, Frame, GridScan};

pub const SPACE_FILE_VERSION: u32 = 1;

/// Node position in pixels, image axes.
pub type NodePosition = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridGraph {
    pub node_count: usize,
    pub edges: Vec<(usize, usize)>,
    pub central_node: usize,
}

impl GridGraph {
    pub fn new(node_count: usize, edges: Vec<(usize, usize)>, central_node: usize) -> Result<Self> {
        if central_node >= node_count {
            return Err(Error::Parameter(format!(
                "central node {central_node} out of range for {node_count} nodes"
            )));
        }
        if let Some(&(a, b)) = edges.iter().find(|&&(a, b)| a >= node_count || b >= node_count || a == b) {
            return Err(Error::Parameter(format!("invalid edge ({a}, {b}) for {node_count} nodes")));
        }
        Ok(Self {
            node_count,
            edges,
            central_node,
        })
    }

    pub fn from_scan(scan: &GridScan) -> Self {
        Self {
            node_count: scan.frames.len(),
            edges: scan.edges.clone(),
            central_node: scan.central_node,
        }
    }

    /// Nodes not reachable from the central node through `edges`.
    pub fn unreachable_via(&self, edges: impl IntoIterator<Item = (usize, usize)>) -> Vec<usize> {
        unreachable_nodes(self.node_count, self.central_node, edges)
    }

    pub fn is_connected(&self) -> bool {
        self.unreachable_via(self.edges.iter().copied()).is_empty()
    }
}

fn unreachable_nodes(n: usize, anchor: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Vec<usize> {
    let mut adj = vec![Vec::new(); n];
    for (a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([anchor]);
    seen[anchor] = true;
    while let Some(v) = queue.pop_front() {
        for &u in &adj[v] {
            if !seen[u] {
                seen[u] = true;
                queue.push_back(u);
            }
        }
    }
    (0..n).filter(|&i| !seen[i]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeMeasurement {
    /// Index into the graph's edge list.
    pub edge: usize,
    pub from: usize,
    pub to: usize,
    /// Position of `to` relative to `from`.
    pub mu: Translation2D,
    /// Sum of retained correspondence scores.
    pub weight: f64,
    /// Retained correspondences; `src` indexes the `to` frame's features and
    /// `tgt` the `from` frame's.
    pub correspondences: Vec<ScoredCorrespondence>,
}

impl EdgeMeasurement {
    /// A bare measurement without correspondences, for simulations.
    pub fn synthetic(edge: usize, from: usize, to: usize, mu: Translation2D, weight: f64) -> Self {
        Self {
            edge,
            from,
            to,
            mu,
            weight,
            correspondences: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BundleProblem {
    pub graph: GridGraph,
    pub measurements: Vec<EdgeMeasurement>,
}

impl BundleProblem {
    pub fn new(graph: GridGraph, measurements: Vec<EdgeMeasurement>) -> Result<Self> {
        for m in &measurements {
            if m.from >= graph.node_count || m.to >= graph.node_count || m.from == m.to {
                return Err(Error::Parameter(format!(
                    "measurement ({}, {}) invalid for {} nodes",
                    m.from, m.to, graph.node_count
                )));
            }
            if !(m.weight >= 0.0) || !m.mu.dx.is_finite() || !m.mu.dy.is_finite() {
                return Err(Error::Parameter(format!(
                    "measurement on edge {} has weight {} and mu ({}, {})",
                    m.edge, m.weight, m.mu.dx, m.mu.dy
                )));
            }
        }
        Ok(Self { graph, measurements })
    }

    /// Oriented incidence matrix, one row per measurement.
    pub fn incidence(&self) -> Vec<Vec<f64>> {
        self.measurements
            .iter()
            .map(|m| {
                let mut row = vec![0.0; self.graph.node_count];
                row[m.from] = -1.0;
                row[m.to] = 1.0;
                row
            })
            .collect()
    }

    /// Diagonal of the weight matrix.
    pub fn weights(&self) -> Vec<f64> {
        self.measurements.iter().map(|m| m.weight).collect()
    }

    /// `|W^1/2 (C n - mu)|^2` summed over both axes.
    pub fn objective(&self, positions: &[NodePosition]) -> f64 {
        self.measurements
            .iter()
            .map(|m| {
                let rx = positions[m.to][0] - positions[m.from][0] - m.mu.dx;
                let ry = positions[m.to][1] - positions[m.from][1] - m.mu.dy;
                m.weight * (rx * rx + ry * ry)
            })
            .sum()
    }

    /// `C^T W (C n - mu)` per node and axis (half the objective gradient).
    pub fn gradient(&self, positions: &[NodePosition]) -> Vec<NodePosition> {
        let mut g = vec![[0.0; 2]; self.graph.node_count];
        for m in &self.measurements {
            let rx = m.weight * (positions[m.to][0] - positions[m.from][0] - m.mu.dx);
            let ry = m.weight * (positions[m.to][1] - positions[m.from][1] - m.mu.dy);
            g[m.to][0] += rx;
            g[m.to][1] += ry;
            g[m.from][0] -= rx;
            g[m.from][1] -= ry;
        }
        g
    }
}

/// Bound on the objective gradient at the solution, relative to the size of
/// the right-hand side `C^T W mu`.
const OPTIMALITY_TOL: f64 = 1e-9;

/// Weighted least-squares node positions with the central node fixed at the
/// origin. Solves the reduced normal equations `C^T W C n = C^T W mu` by
/// Cholesky factorization plus one refinement step. Weight-zero measurements
/// do not count toward connectivity.
pub fn bundle_adjust(problem: &BundleProblem) -> Result<Vec<NodePosition>> {
    let graph = &problem.graph;
    let n = graph.node_count;
    let anchor = graph.central_node;
    if n == 1 {
        return Ok(vec![[0.0, 0.0]]);
    }
    if problem.measurements.is_empty() {
        return Err(Error::EmptyInput("bundle adjustment needs at least one measurement".into()));
    }
    let unreachable = unreachable_nodes(
        n,
        anchor,
        problem
            .measurements
            .iter()
            .filter(|m| m.weight > 0.0)
            .map(|m| (m.from, m.to)),
    );
    if !unreachable.is_empty() {
        return Err(Error::Disconnected { anchor, unreachable });
    }

    // Column map that skips the anchored node.
    let col = |i: usize| -> Option<usize> {
        match i.cmp(&anchor) {
            std::cmp::Ordering::Less => Some(i),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(i - 1),
        }
    };
    let k = n - 1;
    let mut normal = vec![0.0; k * k];
    let mut rhs = vec![[0.0; 2]; k];
    for m in &problem.measurements {
        let w = m.weight;
        let (a, b) = (col(m.from), col(m.to));
        if let Some(a) = a {
            normal[a * k + a] += w;
            rhs[a][0] -= w * m.mu.dx;
            rhs[a][1] -= w * m.mu.dy;
        }
        if let Some(b) = b {
            normal[b * k + b] += w;
            rhs[b][0] += w * m.mu.dx;
            rhs[b][1] += w * m.mu.dy;
        }
        if let (Some(a), Some(b)) = (a, b) {
            normal[a * k + b] -= w;
            normal[b * k + a] -= w;
        }
    }

    let chol = Cholesky::factor(&normal, k)?;
    let mut reduced: Vec<[f64; 2]> = vec![[0.0; 2]; k];
    for axis in 0..2 {
        let b: Vec<f64> = rhs.iter().map(|r| r[axis]).collect();
        let mut x = chol.solve(&b);
        // one step of iterative refinement
        let resid: Vec<f64> = (0..k)
            .map(|i| b[i] - (0..k).map(|j| normal[i * k + j] * x[j]).sum::<f64>())
            .collect();
        let dx = chol.solve(&resid);
        for (xi, d) in x.iter_mut().zip(dx) {
            *xi += d;
        }
        for (r, v) in reduced.iter_mut().zip(x) {
            r[axis] = v;
        }
    }

    let positions: Vec<NodePosition> = (0..n).map(|i| col(i).map_or([0.0, 0.0], |c| reduced[c])).collect();

    let scale = rhs
        .iter()
        .flat_map(|r| r.iter())
        .fold(1.0f64, |acc, v| acc.max(v.abs()));
    let grad = problem.gradient(&positions);
    let worst = (0..n)
        .filter(|&i| i != anchor)
        .flat_map(|i| grad[i])
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    if worst > OPTIMALITY_TOL * scale {
        return Err(Error::Singular(format!(
            "objective gradient {worst:e} exceeds {:e} at the solution",
            OPTIMALITY_TOL * scale
        )));
    }
    Ok(positions)
}

/// Dense lower-triangular Cholesky factor of a symmetric positive definite
/// matrix.
struct Cholesky {
    l: Vec<f64>,
    n: usize,
}

impl Cholesky {
    fn factor(a: &[f64], n: usize) -> Result<Self> {
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a[j * n + j];
            for p in 0..j {
                d -= l[j * n + p] * l[j * n + p];
            }
            if !(d > 0.0) {
                return Err(Error::Singular(format!("normal matrix not positive definite at column {j}")));
            }
            let d = d.sqrt();
            l[j * n + j] = d;
            for i in j + 1..n {
                let mut s = a[i * n + j];
                for p in 0..j {
                    s -= l[i * n + p] * l[j * n + p];
                }
                l[i * n + j] = s / d;
            }
        }
        Ok(Self { l, n })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (l, n) = (&self.l, self.n);
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for p in 0..i {
                s -= l[i * n + p] * y[p];
            }
            y[i] = s / l[i * n + i];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for p in i + 1..n {
                s -= l[p * n + i] * x[p];
            }
            x[i] = s / l[i * n + i];
        }
        x
    }
}

/// Registers one directed edge: `to` frame features as source, `from` frame
/// features as target, so the estimated translation is `n_to - n_from`.
pub fn register_edge(
    edge: usize,
    from: usize,
    to: usize,
    features: &[FeatureSet],
    cp: &ConsensusParams,
) -> Result<EdgeMeasurement> {
    let cands = matching::mutual_nn(&features[to], &features[from]);
    let scored = matching::score_matches(&cands, cp);
    let (mu, weight) = matching::estimate_translation(&scored, cp)?;
    Ok(EdgeMeasurement {
        edge,
        from,
        to,
        mu,
        weight,
        correspondences: matching::inliers(&scored, cp).copied().collect(),
    })
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub measurements: Vec<EdgeMeasurement>,
    /// `(edge index, reason)` for edges that did not register.
    pub failed: Vec<(usize, String)>,
}

/// Registers every graph edge. Failed edges are dropped; the call fails only
/// if the surviving edges leave some node unreachable from the center.
pub fn register_all_edges(graph: &GridGraph, features: &[FeatureSet], cp: &ConsensusParams) -> Result<Registration> {
    if features.len() != graph.node_count {
        return Err(Error::Shape(format!(
            "{} feature sets for {} nodes",
            features.len(),
            graph.node_count
        )));
    }
    let results: Vec<Result<EdgeMeasurement>> = graph
        .edges
        .par_iter()
        .enumerate()
        .map(|(e, &(a, b))| register_edge(e, a, b, features, cp))
        .collect();
    let mut measurements = Vec::new();
    let mut failed = Vec::new();
    for (e, r) in results.into_iter().enumerate() {
        match r {
            Ok(m) => measurements.push(m),
            Err(err) => failed.push((e, err.to_string())),
        }
    }
    let unreachable = graph.unreachable_via(measurements.iter().map(|m| (m.from, m.to)));
    if !unreachable.is_empty() {
        return Err(Error::SpaceConstruction {
            failed_edges: failed.iter().map(|f| f.0).collect(),
            unreachable,
        });
    }
    Ok(Registration { measurements, failed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceEntry {
    pub x: f64,
    pub y: f64,
    #[serde(rename = "desc")]
    pub descriptor: Descriptor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalFeatureSpace {
    pub version: u32,
    pub ppd_x: f64,
    pub ppd_y: f64,
    pub central_node: usize,
    pub node_positions: Vec<NodePosition>,
    pub entries: Vec<SpaceEntry>,
}

impl AsRef<[f32]> for SpaceEntry {
    fn as_ref(&self) -> &[f32] {
        self.descriptor.as_slice()
    }
}

impl CanonicalFeatureSpace {
    pub fn empty(cal: &Calibration) -> Self {
        Self {
            version: SPACE_FILE_VERSION,
            ppd_x: cal.ppd_x,
            ppd_y: cal.ppd_y,
            central_node: 0,
            node_positions: Vec::new(),
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn descriptors(&self) -> Vec<Descriptor> {
        self.entries.iter().map(|e| e.descriptor.clone()).collect()
    }
}

fn push_entry(space: &mut CanonicalFeatureSpace, fs: &FeatureSet, idx: usize, node: NodePosition) {
    let (cx, cy) = fs.center();
    let k = fs.keypoints[idx];
    space.entries.push(SpaceEntry {
        x: k.x - cx + node[0],
        y: k.y - cy + node[1],
        descriptor: fs.descriptors[idx].clone(),
    });
}

/// Places every keypoint of every retained correspondence at its canonical
/// position: offset from its frame center plus its frame's node position.
/// Both endpoints of each correspondence are kept. A single-node scan
/// contributes all of its keypoints.
pub fn assemble_space(
    features: &[FeatureSet],
    measurements: &[EdgeMeasurement],
    positions: &[NodePosition],
    central_node: usize,
    cal: &Calibration,
) -> CanonicalFeatureSpace {
    let mut space = CanonicalFeatureSpace::empty(cal);
    space.central_node = central_node;
    space.node_positions = positions.to_vec();
    if features.len() == 1 {
        for i in 0..features[0].len() {
            push_entry(&mut space, &features[0], i, positions[0]);
        }
        return space;
    }
    for m in measurements {
        for c in &m.correspondences {
            push_entry(&mut space, &features[m.to], c.base.src_index, positions[m.to]);
            push_entry(&mut space, &features[m.from], c.base.tgt_index, positions[m.from]);
        }
    }
    space
}

pub fn save_space(space: &CanonicalFeatureSpace, path: &Path) -> Result<()> {
    let json = serde_json::to_vec(space).map_err(|e| Error::Malformed(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_space(path: &Path) -> Result<CanonicalFeatureSpace> {
    let bytes = std::fs::read(path)?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Malformed(format!("{}: missing version", path.display())))?;
    if version != SPACE_FILE_VERSION as u64 {
        return Err(Error::Version {
            found: version as u32,
            expected: SPACE_FILE_VERSION,
        });
    }
    let space: CanonicalFeatureSpace =
        serde_json::from_value(value).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
    if space.central_node >= space.node_positions.len().max(1) {
        return Err(Error::Malformed(format!(
            "{}: central node {} without a position",
            path.display(),
            space.central_node
        )));
    }
    Ok(space)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceBuildConfig {
    pub cal: Calibration,
    pub consensus: ConsensusParams,
    pub use_enhancement: bool,
    pub enhance: EnhanceConfig,
}

impl Default for SpaceBuildConfig {
    fn default() -> Self {
        Self {
            cal: Calibration::default(),
            consensus: ConsensusParams::default(),
            use_enhancement: true,
            enhance: EnhanceConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpaceBuild {
    pub space: CanonicalFeatureSpace,
    pub features: Vec<FeatureSet>,
    pub registration: Registration,
    pub positions: Vec<NodePosition>,
}

/// Feature extraction, pairwise registration, bundle adjustment and assembly.
pub fn build_space(frames: &[Frame], graph: &GridGraph, cfg: &SpaceBuildConfig) -> Result<SpaceBuild> {
    cfg.cal.validate()?;
    cfg.consensus.validate()?;
    if frames.len() != graph.node_count {
        return Err(Error::Shape(format!("{} frames for {} nodes", frames.len(), graph.node_count)));
    }
    let features = frames
        .par_iter()
        .map(|f| features::extract(f, cfg.use_enhancement, &cfg.enhance))
        .collect::<Result<Vec<_>>>()?;
    let registration = register_all_edges(graph, &features, &cfg.consensus)?;
    let problem = BundleProblem::new(graph.clone(), registration.measurements.clone())?;
    let positions = bundle_adjust(&problem)?;
    let space = assemble_space(&features, &registration.measurements, &positions, graph.central_node, &cfg.cal);
    Ok(SpaceBuild {
        space,
        features,
        registration,
        positions,
    })
}
