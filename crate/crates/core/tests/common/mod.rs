#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retina_track::canonical::{BundleProblem, EdgeMeasurement, GridGraph, NodePosition};
use retina_track::image::Image;
use retina_track::imgmath::{self, EnhanceParams, LossParams, StopGrad};
use retina_track::matching::Translation2D;

pub const FD_STEP: f64 = 1e-6;

/// Every edge set over `n` labeled nodes that connects them, as undirected
/// pairs `(i, j)` with `i < j`.
pub fn connected_graphs(n: usize) -> Vec<Vec<(usize, usize)>> {
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let mut out = Vec::new();
    for mask in 0u32..(1 << pairs.len()) {
        let edges: Vec<(usize, usize)> = pairs
            .iter()
            .enumerate()
            .filter(|(k, _)| mask & (1 << k) != 0)
            .map(|(_, &p)| p)
            .collect();
        if is_connected(n, &edges) {
            out.push(edges);
        }
    }
    out
}

fn is_connected(n: usize, edges: &[(usize, usize)]) -> bool {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra] = rb;
    }
    let root = find(&mut parent, 0);
    (0..n).all(|i| find(&mut parent, i) == root)
}

/// Random node layout with `anchor` at the origin.
pub fn random_layout(n: usize, anchor: usize, rng: &mut impl Rng) -> Vec<NodePosition> {
    (0..n)
        .map(|i| {
            if i == anchor {
                [0.0, 0.0]
            } else {
                [rng.random_range(-200.0..200.0), rng.random_range(-200.0..200.0)]
            }
        })
        .collect()
}

/// Measurements over `edges` with random orientation and weight. With
/// `noise` zero they agree exactly with `layout`.
pub fn measurements(
    edges: &[(usize, usize)],
    layout: &[NodePosition],
    noise: f64,
    rng: &mut impl Rng,
) -> (Vec<(usize, usize)>, Vec<EdgeMeasurement>) {
    let mut directed = Vec::new();
    let mut ms = Vec::new();
    for (k, &(a, b)) in edges.iter().enumerate() {
        let (from, to) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
        let mut dx = layout[to][0] - layout[from][0];
        let mut dy = layout[to][1] - layout[from][1];
        if noise > 0.0 {
            dx += rng.random_range(-noise..noise);
            dy += rng.random_range(-noise..noise);
        }
        let w = rng.random_range(0.5..3.0);
        directed.push((from, to));
        ms.push(EdgeMeasurement::synthetic(k, from, to, Translation2D::new(dx, dy), w));
    }
    (directed, ms)
}

pub fn problem(n: usize, anchor: usize, directed: Vec<(usize, usize)>, ms: Vec<EdgeMeasurement>) -> BundleProblem {
    BundleProblem::new(GridGraph::new(n, directed, anchor).unwrap(), ms).unwrap()
}

/// Weighted least squares with the anchor column removed, solved by SVD on
/// the rows `sqrt(w) C` directly rather than through the normal equations,
/// plus one refinement step.
pub fn lstsq_oracle(p: &BundleProblem) -> Vec<NodePosition> {
    let n = p.graph.node_count;
    let anchor = p.graph.central_node;
    let cols: Vec<usize> = (0..n).filter(|&i| i != anchor).collect();
    let m = p.measurements.len();
    let mut a = DMatrix::<f64>::zeros(m, cols.len());
    let mut bx = DVector::<f64>::zeros(m);
    let mut by = DVector::<f64>::zeros(m);
    for (r, meas) in p.measurements.iter().enumerate() {
        let s = meas.weight.sqrt();
        for (c, &node) in cols.iter().enumerate() {
            if node == meas.to {
                a[(r, c)] += s;
            }
            if node == meas.from {
                a[(r, c)] -= s;
            }
        }
        bx[r] = s * meas.mu.dx;
        by[r] = s * meas.mu.dy;
    }
    let svd = a.clone().svd(true, true);
    let solve = |b: &DVector<f64>| {
        let x = svd.solve(b, 1e-12).unwrap();
        // one refinement step on the least-squares residual
        let r = b - &a * &x;
        x + svd.solve(&r, 1e-12).unwrap()
    };
    let (x, y) = (solve(&bx), solve(&by));
    let mut out = vec![[0.0; 2]; n];
    for (c, &node) in cols.iter().enumerate() {
        out[node] = [x[c], y[c]];
    }
    out
}

pub fn max_abs_diff(a: &[NodePosition], b: &[NodePosition]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(p, q)| [(p[0] - q[0]).abs(), (p[1] - q[1]).abs()])
        .fold(0.0, f64::max)
}

/// Outcome of the bundle-adjustment oracle sweep.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleSweep {
    pub graphs: usize,
    /// Worst deviation from the generating layout on exact measurements.
    pub worst_exact: f64,
    /// Worst deviation from the least-squares oracle, exact and noisy.
    pub worst_oracle: f64,
}

/// Every connected graph on 1 to 5 nodes, every choice of anchor, once with
/// exact and once with noisy measurements.
pub fn bundle_oracle_sweep(seed: u64) -> OracleSweep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = OracleSweep::default();
    for n in 1..=5 {
        for edges in connected_graphs(n) {
            out.graphs += 1;
            for anchor in 0..n {
                let layout = random_layout(n, anchor, &mut rng);
                for noise in [0.0, 3.0] {
                    let (directed, ms) = measurements(&edges, &layout, noise, &mut rng);
                    let p = problem(n, anchor, directed, ms);
                    let got = retina_track::canonical::bundle_adjust(&p).unwrap();
                    assert_eq!(got[anchor], [0.0, 0.0]);
                    if n > 1 {
                        out.worst_oracle = out.worst_oracle.max(max_abs_diff(&got, &lstsq_oracle(&p)));
                    }
                    if noise == 0.0 {
                        out.worst_exact = out.worst_exact.max(max_abs_diff(&got, &layout));
                    }
                }
            }
        }
    }
    out
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

pub fn worst_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

fn field(w: usize, h: usize, v: Vec<f64>) -> Image {
    Image::from_vec(w, h, v).unwrap()
}

fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let v = uniform(rng, dim, -1.0, 1.0);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Worst relative disagreement between analytic and central-difference
/// gradients for each formula at one random point.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradientReport {
    pub enhance_input: f64,
    pub enhance_alpha: f64,
    pub triplet_anchor: f64,
    pub keypoint_enhanced: f64,
    /// Largest finite-difference derivative with respect to the raw map.
    pub keypoint_raw: f64,
    pub bce_scores: f64,
}

impl GradientReport {
    pub fn worst(&self) -> f64 {
        [
            self.enhance_input,
            self.enhance_alpha,
            self.triplet_anchor,
            self.keypoint_enhanced,
            self.bce_scores,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

pub fn gradient_report(seed: u64) -> GradientReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (6, 5);
    let len = w * h;

    let input = uniform(&mut rng, len, 0.05, 0.95);
    let alpha = uniform(&mut rng, len, -0.95, 0.95);
    let params = EnhanceParams::new(field(w, h, alpha.clone()));
    let sum_enhanced = |i: &[f64]| imgmath::enhance(&field(w, h, i.to_vec()), &params).unwrap().data().iter().sum();
    let fd = imgmath::finite_diff_grad(sum_enhanced, &input, FD_STEP).unwrap();
    let an = imgmath::enhance_grad_input(&field(w, h, input.clone()), &params).unwrap();
    let enhance_input = worst_rel(&fd, an.data());

    let img = field(w, h, input.clone());
    let sum_by_alpha = |a: &[f64]| {
        let p = EnhanceParams::new(field(w, h, a.to_vec()));
        imgmath::enhance(&img, &p).unwrap().data().iter().sum()
    };
    let fd = imgmath::finite_diff_grad(sum_by_alpha, &alpha, FD_STEP).unwrap();
    let an = imgmath::enhance_grad_alpha(&img, &params).unwrap();
    let enhance_alpha = worst_rel(&fd, an.data());

    let (k, dim) = (5, 8);
    let anchor: Vec<Vec<f64>> = (0..k).map(|_| unit(&mut rng, dim)).collect();
    let pos: Vec<Vec<f64>> = (0..k).map(|_| unit(&mut rng, dim)).collect();
    let nr: Vec<Vec<f64>> = (0..k).map(|_| unit(&mut rng, dim)).collect();
    let nh: Vec<Vec<f64>> = (0..k).map(|_| unit(&mut rng, dim)).collect();
    let margin = 2.5;
    let flat: Vec<f64> = anchor.iter().flatten().copied().collect();
    let loss = |x: &[f64]| {
        let a: Vec<Vec<f64>> = x.chunks(dim).map(<[f64]>::to_vec).collect();
        imgmath::triplet_descriptor_loss(&a, &pos, &nr, &nh, margin).unwrap()
    };
    let fd = imgmath::finite_diff_grad(loss, &flat, FD_STEP).unwrap();
    let an: Vec<f64> = imgmath::triplet_descriptor_grad_anchor(&anchor, &pos, &nr, &nh, margin)
        .unwrap()
        .into_iter()
        .flatten()
        .collect();
    let triplet_anchor = worst_rel(&fd, &an);

    let lp = LossParams::default();
    let enh = uniform(&mut rng, len, 0.0, 1.0);
    let raw = uniform(&mut rng, len, 0.0, 1.0);
    let raw_map = field(w, h, raw.clone());
    let loss = |e: &[f64]| imgmath::keypoint_preserve_loss(&field(w, h, e.to_vec()), &raw_map, &lp).unwrap();
    let fd = imgmath::finite_diff_grad(loss, &enh, FD_STEP).unwrap();
    let grad = imgmath::keypoint_preserve_grad(&field(w, h, enh.clone()), &raw_map, &lp).unwrap();
    let keypoint_enhanced = worst_rel(&fd, grad.enhanced.data());

    let enh_map = field(w, h, enh.clone());
    let raw_count = StopGrad::new(imgmath::soft_keypoint_count(&raw_map, lp.gamma, lp.temperature));
    let by_raw = |_r: &[f64]| imgmath::keypoint_preserve_loss_detached(&enh_map, raw_count, &lp);
    let fd = imgmath::finite_diff_grad(by_raw, &raw, FD_STEP).unwrap();
    let keypoint_raw = fd
        .iter()
        .chain(grad.raw.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));

    let scores = uniform(&mut rng, 12, 0.05, 0.95);
    let labels: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
    let loss = |x: &[f64]| imgmath::bce_loss(x, &labels).unwrap();
    let fd = imgmath::finite_diff_grad(loss, &scores, FD_STEP).unwrap();
    let an = imgmath::bce_grad(&scores, &labels).unwrap();
    let bce_scores = worst_rel(&fd, &an);

    GradientReport {
        enhance_input,
        enhance_alpha,
        triplet_anchor,
        keypoint_enhanced,
        keypoint_raw,
        bce_scores,
    }
}

use std::sync::OnceLock;

use retina_track::canonical::{build_space, SpaceBuild, SpaceBuildConfig};
use retina_track::phantom::{self, AppearanceModel, Calibration, GridSpec, PhantomConfig, RetinaPhantom};

pub const PHANTOM_SEED: u64 = 7;

/// Default phantom, generated once per test binary.
pub fn default_phantom() -> &'static RetinaPhantom {
    static PH: OnceLock<RetinaPhantom> = OnceLock::new();
    PH.get_or_init(|| {
        let cal = Calibration::default();
        phantom::generate_phantom(&PhantomConfig::new(PHANTOM_SEED, 0.5, 1200, 1100), &cal).unwrap()
    })
}

/// Canonical space built from a nominal-appearance scan of the default phantom.
pub fn default_space() -> &'static SpaceBuild {
    static SPACE: OnceLock<SpaceBuild> = OnceLock::new();
    SPACE.get_or_init(|| {
        let cal = Calibration::default();
        let scan = phantom::grid_scan(default_phantom(), &cal, &AppearanceModel::nominal(11), GridSpec::default()).unwrap();
        let graph = GridGraph::from_scan(&scan);
        build_space(&scan.frames, &graph, &SpaceBuildConfig::default()).unwrap()
    })
}

/// Coefficient of determination of the least-squares line through `pts`.
pub fn r_squared(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x / n, b + y / n));
    let sxy: f64 = pts.iter().map(|&(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|&(x, _)| (x - mx) * (x - mx)).sum();
    let syy: f64 = pts.iter().map(|&(_, y)| (y - my) * (y - my)).sum();
    sxy * sxy / (sxx * syy)
}

use retina_track::canonical::register_edge;
use retina_track::features::{self, EnhanceConfig};
use retina_track::matching::{self, ConsensusParams};
use retina_track::phantom::GazeAngle;

/// Registration of rendered frame pairs with known offsets.
#[derive(Debug, Clone, Default)]
pub struct PairStudy {
    /// Per-axis `estimate - truth` in pixels; `None` when registration failed.
    pub errors: Vec<Option<[f64; 2]>>,
    /// Candidates scoring at or above 0.5.
    pub confident: usize,
    /// Of those, how many carry a positive ground-truth label.
    pub confident_true: usize,
}

/// `count` pairs: a random gaze within +-4 degrees and a second gaze up to a
/// grid spacing away, each frame with its own draw from `model`.
pub fn pair_study(count: usize, seed: u64, model: &AppearanceModel) -> PairStudy {
    let cal = Calibration::default();
    let ph = default_phantom();
    let cp = ConsensusParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = PairStudy::default();
    for k in 0..count as u64 {
        let g0 = GazeAngle::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
        let g1 = GazeAngle::new(
            (g0.yaw + rng.random_range(-2.5..2.5)).clamp(-5.0, 5.0),
            (g0.pitch + rng.random_range(-2.5..2.5)).clamp(-5.0, 5.0),
        );
        let f0 = phantom::render_frame(ph, g0, &cal, &model.sample(2 * k)).unwrap();
        let f1 = phantom::render_frame(ph, g1, &cal, &model.sample(2 * k + 1)).unwrap();
        let fs: Vec<_> = [f0, f1]
            .iter()
            .map(|f| features::extract(f, true, &EnhanceConfig::default()).unwrap())
            .collect();
        // node 1 relative to node 0, image rows pointing down
        let truth = [(g1.yaw - g0.yaw) * cal.ppd_x, -(g1.pitch - g0.pitch) * cal.ppd_y];
        out.errors.push(
            register_edge(0, 0, 1, &fs, &cp)
                .ok()
                .map(|m| [m.mu.dx - truth[0], m.mu.dy - truth[1]]),
        );
        let cands = matching::mutual_nn(&fs[1], &fs[0]);
        let scored = matching::score_matches(&cands, &cp);
        let labels = matching::label_matches(&cands, Translation2D::new(truth[0], truth[1]), 10.0);
        for (s, l) in scored.iter().zip(labels) {
            if s.score >= 0.5 {
                out.confident += 1;
                out.confident_true += usize::from(l);
            }
        }
    }
    out
}
