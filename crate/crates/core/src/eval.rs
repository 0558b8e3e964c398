//! Error statistics, coverage curves, bundle-adjustment robustness studies,
//! the blended-map baseline and per-stage timing.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canonical::{
    bundle_adjust, BundleProblem, CanonicalFeatureSpace, EdgeMeasurement, GridGraph, NodePosition, SpaceEntry,
};
use crate::error::{Error, Result};
use crate::features::{self, csv_err, DescriptorField, EnhanceConfig, FeatureSet, DETECTION_THRESHOLD, NMS_WINDOW};
use crate::gaze::{self, GazeEstimate, TrackerConfig};
use crate::image::Image;
use crate::matching::{self, Translation2D};
use crate::phantom::{Calibration, Frame, GazeAngle, GridSpec};
use crate::seed;

/// Euclidean norm of the per-axis error in degrees, or `None` for an invalid
/// estimate.
pub fn angular_error(est: &GazeEstimate, truth: GazeAngle) -> Option<f64> {
    est.valid
        .then(|| (est.yaw - truth.yaw).hypot(est.pitch - truth.pitch))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub std: f64,
    pub e50: f64,
    pub e75: f64,
    pub e95: f64,
    pub count: usize,
}

/// Linear interpolation between order statistics at rank `p/100 * (n-1)`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let f = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * f
}

/// Mean, population standard deviation and the 50/75/95th percentiles.
pub fn percentile_stats(errors: &[f64]) -> Result<ErrorStats> {
    if errors.is_empty() {
        return Err(Error::EmptyInput("no errors to summarize".into()));
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::Parameter("errors must be finite".into()));
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(ErrorStats {
        mean,
        std: var.sqrt(),
        e50: percentile(&sorted, 50.0),
        e75: percentile(&sorted, 75.0),
        e95: percentile(&sorted, 95.0),
        count: errors.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub threshold: f64,
    pub mean_coverage: f64,
    pub e95_coverage: f64,
}

/// Fraction of trials whose mean error, and separately whose E95, is at or
/// below each threshold.
pub fn coverage_curve(per_trial: &[ErrorStats], thresholds: &[f64]) -> Result<Vec<CoverageRow>> {
    if per_trial.is_empty() {
        return Err(Error::EmptyInput("no trials for coverage curve".into()));
    }
    let n = per_trial.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| CoverageRow {
            threshold: t,
            mean_coverage: per_trial.iter().filter(|s| s.mean <= t).count() as f64 / n,
            e95_coverage: per_trial.iter().filter(|s| s.e95 <= t).count() as f64 / n,
        })
        .collect())
}

/// Noise-free measurements for every grid edge: `mu = n_to - n_from` from the
/// ideal node layout, unit weight.
pub fn exact_grid_measurements(spec: &GridSpec, cal: &Calibration) -> Vec<EdgeMeasurement> {
    spec.edges()
        .iter()
        .enumerate()
        .map(|(e, &(from, to))| {
            let a = spec.node_gaze(from).to_pixels(cal);
            let b = spec.node_gaze(to).to_pixels(cal);
            EdgeMeasurement::synthetic(e, from, to, Translation2D::new(b.0 - a.0, b.1 - a.1), 1.0)
        })
        .collect()
}

/// Exact measurements with i.i.d. Gaussian noise of `std` px added to each
/// axis of every edge.
pub fn noisy_grid_measurements(spec: &GridSpec, cal: &Calibration, std: f64, rng: &mut impl Rng) -> Result<Vec<EdgeMeasurement>> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::Parameter(format!("noise std: {e}")))?;
    Ok(exact_grid_measurements(spec, cal)
        .into_iter()
        .map(|mut m| {
            m.mu.dx += normal.sample(rng);
            m.mu.dy += normal.sample(rng);
            m
        })
        .collect())
}

pub fn grid_graph(spec: &GridSpec) -> Result<GridGraph> {
    GridGraph::new(spec.node_count(), spec.edges(), spec.central_node())
}

/// Largest distance between two layouts, per node, in degrees.
pub fn max_node_error_deg(a: &[NodePosition], b: &[NodePosition], cal: &Calibration) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| ((p[0] - q[0]) / cal.ppd_x).hypot((p[1] - q[1]) / cal.ppd_y))
        .fold(0.0, f64::max)
}

fn ideal_layout(spec: &GridSpec, cal: &Calibration) -> Vec<NodePosition> {
    (0..spec.node_count())
        .map(|i| {
            let (x, y) = spec.node_gaze(i).to_pixels(cal);
            [x, y]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub noise_std: f64,
    pub max_node_error_mean: f64,
    pub max_node_error_std: f64,
    pub trials: usize,
}

/// Adds noise to every edge measurement of the grid at once, re-solves with
/// unit weights and records the worst node error against the ideal layout.
pub fn robustness_noise_sim(
    spec: &GridSpec,
    cal: &Calibration,
    noise_stds: &[f64],
    trials: usize,
    base_seed: u64,
) -> Result<Vec<RobustnessRow>> {
    if trials < 30 {
        return Err(Error::Parameter(format!("at least 30 trials required, got {trials}")));
    }
    cal.validate()?;
    let graph = grid_graph(spec)?;
    let truth = ideal_layout(spec, cal);
    noise_stds
        .iter()
        .enumerate()
        .map(|(level, &std)| {
            if !(std >= 0.0) {
                return Err(Error::Parameter(format!("noise std must be nonnegative, got {std}")));
            }
            let level_seed = seed::derive_seed(base_seed, level as u64);
            let errors = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let mut rng = seed::rng(level_seed, t as u64);
                    let ms = noisy_grid_measurements(spec, cal, std, &mut rng)?;
                    let n = bundle_adjust(&BundleProblem::new(graph.clone(), ms)?)?;
                    Ok(max_node_error_deg(&n, &truth, cal))
                })
                .collect::<Result<Vec<f64>>>()?;
            let s = percentile_stats(&errors)?;
            Ok(RobustnessRow {
                noise_std: std,
                max_node_error_mean: s.mean,
                max_node_error_std: s.std,
                trials,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeRemovalRow {
    pub edge: usize,
    pub from: usize,
    pub to: usize,
    pub connected: bool,
    /// Worst node shift in degrees; NaN when the removal disconnects the graph.
    pub max_shift_deg: f64,
}

/// Removes each graph edge in turn, re-solves and reports the worst node
/// shift relative to the full solution.
pub fn edge_removal_sim(graph: &GridGraph, measurements: &[EdgeMeasurement], cal: &Calibration) -> Result<Vec<EdgeRemovalRow>> {
    let full = bundle_adjust(&BundleProblem::new(graph.clone(), measurements.to_vec())?)?;
    graph
        .edges
        .par_iter()
        .enumerate()
        .map(|(e, &(from, to))| {
            let kept: Vec<EdgeMeasurement> = measurements.iter().filter(|m| m.edge != e).cloned().collect();
            let connected = graph
                .unreachable_via(kept.iter().filter(|m| m.weight > 0.0).map(|m| (m.from, m.to)))
                .is_empty();
            let max_shift_deg = if connected {
                let n = bundle_adjust(&BundleProblem::new(graph.clone(), kept)?)?;
                max_node_error_deg(&n, &full, cal)
            } else {
                f64::NAN
            };
            Ok(EdgeRemovalRow {
                edge: e,
                from,
                to,
                connected,
                max_shift_deg,
            })
        })
        .collect()
}

/// An explicit reference image fused from the scan frames. Pixel `(u, v)`
/// sits at canonical coordinate `(u + origin.0, v + origin.1)`; the origin
/// need not be integral.
#[derive(Debug, Clone)]
pub struct BlendedMap {
    pub image: Image,
    pub origin: (f64, f64),
}

/// Feathered average of the frames placed at their node positions. Each
/// frame pixel is weighted by one plus its distance to the nearest frame
/// border.
pub fn blend_frames(frames: &[Frame], positions: &[NodePosition]) -> Result<BlendedMap> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("no frames to blend".into()));
    }
    if frames.len() != positions.len() {
        return Err(Error::Shape(format!("{} frames for {} positions", frames.len(), positions.len())));
    }
    let centers: Vec<(f64, f64)> = frames.iter().map(|f| f.geometry().center()).collect();
    let lo = |k: usize| (positions[k][0] - centers[k].0, positions[k][1] - centers[k].1);
    let hi = |k: usize| {
        let (x, y) = lo(k);
        (x + frames[k].width() as f64 - 1.0, y + frames[k].height() as f64 - 1.0)
    };
    let ox = (0..frames.len()).map(|k| lo(k).0).fold(f64::INFINITY, f64::min);
    let oy = (0..frames.len()).map(|k| lo(k).1).fold(f64::INFINITY, f64::min);
    let mx = (0..frames.len()).map(|k| hi(k).0).fold(f64::NEG_INFINITY, f64::max);
    let my = (0..frames.len()).map(|k| hi(k).1).fold(f64::NEG_INFINITY, f64::max);
    let (w, h) = ((mx - ox).ceil() as usize + 1, (my - oy).ceil() as usize + 1);
    let mut acc = vec![0.0f64; w * h];
    let mut wsum = vec![0.0f64; w * h];
    for (k, f) in frames.iter().enumerate() {
        let (fx, fy) = lo(k);
        let (fw, fh) = (f.width() as f64, f.height() as f64);
        let u0 = (fx - ox).ceil().max(0.0) as usize;
        let v0 = (fy - oy).ceil().max(0.0) as usize;
        let u1 = ((fx + fw - 1.0 - ox).floor() as usize).min(w - 1);
        let v1 = ((fy + fh - 1.0 - oy).floor() as usize).min(h - 1);
        for v in v0..=v1 {
            let sy = v as f64 + oy - fy;
            for u in u0..=u1 {
                let sx = u as f64 + ox - fx;
                let border = sx.min(fw - 1.0 - sx).min(sy).min(fh - 1.0 - sy);
                if border < 0.0 {
                    continue;
                }
                let wt = border + 1.0;
                acc[v * w + u] += wt * f.image.sample_bilinear(sx, sy);
                wsum[v * w + u] += wt;
            }
        }
    }
    let data = acc
        .iter()
        .zip(&wsum)
        .map(|(a, s)| if *s > 0.0 { a / s } else { 0.0 })
        .collect();
    Ok(BlendedMap {
        image: Image::from_vec(w, h, data)?,
        origin: (ox, oy),
    })
}

impl BlendedMap {
    /// Features of the whole map placed in canonical coordinates, in the
    /// same form as a canonical space so the regular tracker can use it.
    pub fn feature_space(&self, cal: &Calibration, use_enhancement: bool, enhance: &EnhanceConfig) -> Result<CanonicalFeatureSpace> {
        let fs = features::extract(&Frame::new(0, self.image.clone()), use_enhancement, enhance)?;
        let mut space = CanonicalFeatureSpace::empty(cal);
        space.entries = fs
            .keypoints
            .iter()
            .zip(fs.descriptors)
            .map(|(k, d)| SpaceEntry {
                x: k.x + self.origin.0,
                y: k.y + self.origin.1,
                descriptor: d,
            })
            .collect();
        Ok(space)
    }
}

/// Ablation baseline: an explicit blended map tracked as one large frame.
pub fn blended_map_baseline(
    scan_frames: &[Frame],
    positions: &[NodePosition],
    cfg: &TrackerConfig,
) -> Result<CanonicalFeatureSpace> {
    blend_frames(scan_frames, positions)?.feature_space(&cfg.cal, cfg.use_enhancement, &cfg.enhance)
}

/// Tracks `frames` and summarizes the errors of valid estimates. Returns the
/// statistics and the number of invalid estimates.
pub fn tracking_errors(frames: &[Frame], space: &CanonicalFeatureSpace, cfg: &TrackerConfig) -> Result<(ErrorStats, usize)> {
    let est = gaze::track_sequence(frames, space, cfg)?;
    let mut errors = Vec::with_capacity(frames.len());
    let mut invalid = 0;
    for (f, e) in frames.iter().zip(&est) {
        let truth = f
            .true_gaze
            .ok_or_else(|| Error::Parameter(format!("frame {} has no ground truth", f.id)))?;
        match angular_error(e, truth) {
            Some(err) => errors.push(err),
            None => invalid += 1,
        }
    }
    Ok((percentile_stats(&errors)?, invalid))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub mean_ms: f64,
}

pub const STAGES: [&str; 6] = [
    "enhancement",
    "detection_description",
    "nms_sampling",
    "matching",
    "scoring",
    "gaze",
];

/// Mean wall-clock time per stage over `frames` after one warm-up frame,
/// followed by a `total` row measured around each whole frame.
pub fn bench_stages(frames: &[Frame], space: &CanonicalFeatureSpace, cfg: &TrackerConfig) -> Result<Vec<StageTiming>> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("no frames to benchmark".into()));
    }
    let run = |f: &Frame, sums: &mut [f64; 7]| -> Result<()> {
        let start = Instant::now();
        let mut mark = start;
        let mut lap = |slot: usize, sums: &mut [f64; 7]| {
            let now = Instant::now();
            sums[slot] += (now - mark).as_secs_f64() * 1e3;
            mark = now;
        };
        let image = if cfg.use_enhancement {
            cfg.enhance.apply(&f.image)?
        } else {
            f.image.clone()
        };
        lap(0, sums);
        let map = features::response_map(&image);
        let field = DescriptorField::new(&image);
        lap(1, sums);
        let kps = features::nms_detect(&map, NMS_WINDOW, DETECTION_THRESHOLD)?;
        let fs: FeatureSet = field.describe(f.id, &kps);
        lap(2, sums);
        let cands = gaze::space_candidates(&fs, space);
        lap(3, sums);
        let scored = matching::score_matches(&cands, &cfg.consensus);
        lap(4, sums);
        std::hint::black_box(gaze::estimate_gaze(&scored, cfg));
        lap(5, sums);
        sums[6] += start.elapsed().as_secs_f64() * 1e3;
        Ok(())
    };
    run(&frames[0], &mut [0.0; 7])?;
    let mut sums = [0.0f64; 7];
    for f in frames {
        run(f, &mut sums)?;
    }
    let n = frames.len() as f64;
    Ok(STAGES
        .iter()
        .chain(std::iter::once(&"total"))
        .zip(sums)
        .map(|(s, v)| StageTiming {
            stage: s.to_string(),
            mean_ms: v / n,
        })
        .collect())
}

/// Writes serializable rows with a header derived from the field names.
pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// Minimal SVG line plot with axes, tick labels and a legend.
pub fn write_line_plot(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const L: f64 = 70.0;
    const R: f64 = 20.0;
    const T: f64 = 40.0;
    const B: f64 = 60.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let pts = || series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1) = pts().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (mut y0, mut y1) = pts().fold((0.0f64, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    if !x0.is_finite() || !x1.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if !y1.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let sy = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);

    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#)?;
    writeln!(f, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    writeln!(f, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, xml(title))?;
    writeln!(
        f,
        r#"<path d="M{L},{T} L{L},{} L{},{}" fill="none" stroke="black"/>"#,
        H - B,
        W - R,
        H - B
    )?;
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        writeln!(f, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, sx(fx), H - B + 18.0, tick(fx))?;
        writeln!(f, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, L - 6.0, sy(fy) + 4.0, tick(fy))?;
    }
    writeln!(f, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (L + W - R) / 2.0, H - 15.0, xml(x_label))?;
    writeln!(
        f,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>"#,
        (T + H - B) / 2.0,
        xml(y_label)
    )?;
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let d: Vec<String> = s
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| format!("{}{:.2},{:.2}", if i == 0 { 'M' } else { 'L' }, sx(p.0), sy(p.1)))
            .collect();
        writeln!(f, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, d.join(" "))?;
        let ly = T + 16.0 * k as f64 + 8.0;
        writeln!(
            f,
            r#"<line x1="{0}" y1="{ly}" x2="{1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{2}" y="{3}">{4}</text>"#,
            W - R - 150.0,
            W - R - 130.0,
            W - R - 125.0,
            ly + 4.0,
            xml(s.name)
        )?;
    }
    writeln!(f, "</svg>")?;
    f.flush()?;
    Ok(())
}

fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(yaw: f64, pitch: f64) -> GazeEstimate {
        GazeEstimate {
            yaw,
            pitch,
            n_matches: 10,
            total_score: 10.0,
            valid: true,
        }
    }

    #[test]
    fn angular_error_examples() {
        assert_eq!(angular_error(&est(0.4, -0.2), GazeAngle::new(0.4, -0.2)), Some(0.0));
        assert_eq!(angular_error(&est(1.0, 0.0), GazeAngle::default()), Some(1.0));
        let e = angular_error(&est(1.0, 1.0), GazeAngle::default()).unwrap();
        assert!((e - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(angular_error(&GazeEstimate::invalid(0, 0.0), GazeAngle::default()), None);
    }

    #[test]
    fn stats_of_constant_list() {
        let s = percentile_stats(&[0.2; 10]).unwrap();
        for v in [s.mean, s.e50, s.e75, s.e95] {
            assert!((v - 0.2).abs() < 1e-15);
        }
        assert!(s.std < 1e-15);
        assert_eq!(s.count, 10);
    }

    #[test]
    fn median_interpolates() {
        let s = percentile_stats(&[0.4, 0.1, 0.3, 0.2]).unwrap();
        assert!((s.e50 - 0.25).abs() < 1e-15);
        assert!((s.e75 - 0.325).abs() < 1e-15);
        assert!((s.e95 - 0.385).abs() < 1e-15);
    }

    #[test]
    fn empty_stats_rejected() {
        assert!(matches!(percentile_stats(&[]), Err(Error::EmptyInput(_))));
        assert!(matches!(coverage_curve(&[], &[0.1]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn coverage_examples() {
        let one = percentile_stats(&[0.1, 0.2, 0.3]).unwrap();
        let c = coverage_curve(&[one], &[0.0, 1.0]).unwrap();
        assert_eq!((c[0].mean_coverage, c[0].e95_coverage), (0.0, 0.0));
        assert_eq!((c[1].mean_coverage, c[1].e95_coverage), (1.0, 1.0));
        let a = percentile_stats(&[0.1]).unwrap();
        let b = percentile_stats(&[0.3]).unwrap();
        let c = coverage_curve(&[a, b], &[0.2]).unwrap();
        assert_eq!(c[0].mean_coverage, 0.5);
    }

    #[test]
    fn zero_noise_gives_zero_error() {
        let rows = robustness_noise_sim(&GridSpec::default(), &Calibration::default(), &[0.0], 30, 1).unwrap();
        assert!(rows[0].max_node_error_mean < 1e-9);
        assert!(robustness_noise_sim(&GridSpec::default(), &Calibration::default(), &[1.0], 29, 1).is_err());
    }

    #[test]
    fn noise_free_edge_removal_is_exact() {
        let spec = GridSpec::default();
        let cal = Calibration::default();
        let rows = edge_removal_sim(&grid_graph(&spec).unwrap(), &exact_grid_measurements(&spec, &cal), &cal).unwrap();
        assert_eq!(rows.len(), 40);
        assert!(rows.iter().all(|r| r.connected && r.max_shift_deg < 1e-9));
    }

    #[test]
    fn chain_removal_disconnects() {
        let g = GridGraph::new(3, vec![(0, 1), (1, 2)], 0).unwrap();
        let ms = vec![
            EdgeMeasurement::synthetic(0, 0, 1, Translation2D::new(1.0, 0.0), 1.0),
            EdgeMeasurement::synthetic(1, 1, 2, Translation2D::new(1.0, 0.0), 1.0),
        ];
        let rows = edge_removal_sim(&g, &ms, &Calibration::default()).unwrap();
        assert!(rows.iter().all(|r| !r.connected && r.max_shift_deg.is_nan()));
    }

    #[test]
    fn single_frame_blend_is_the_frame() {
        let img = Image::from_fn(40, 30, |x, y| ((x * 7 + y * 3) % 11) as f64 / 10.0);
        let map = blend_frames(&[Frame::new(0, img.clone())], &[[0.0, 0.0]]).unwrap();
        assert!(map.image.same_shape(&img));
        assert!(map.image.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(map.origin, (-19.5, -14.5));
    }

    #[test]
    fn overlapping_constants_blend_to_constant() {
        let f = Frame::new(0, Image::filled(21, 21, 0.4));
        let map = blend_frames(&[f.clone(), f], &[[0.0, 0.0], [7.25, 3.5]]).unwrap();
        let (w, h) = (map.image.width(), map.image.height());
        for y in 0..h {
            for x in 0..w {
                let v = map.image.get(x, y);
                assert!(v == 0.0 || (v - 0.4).abs() < 1e-12, "({x},{y}) = {v}");
            }
        }
    }

    #[test]
    fn plot_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.svg");
        write_line_plot(
            &p,
            "a < b",
            "x",
            "y",
            &[Series {
                name: "s",
                points: vec![(0.0, 0.0), (1.0, 2.0)],
            }],
        )
        .unwrap();
        let s = std::fs::read_to_string(&p).unwrap();
        assert!(s.starts_with("<svg") && s.contains("a &lt; b"));
    }
}
