//! Deterministic keypoint detection and description.
//!
//! Detection: multi-scale difference-of-Gaussians magnitude normalized per
//! frame, 7x7 non-maximum suppression at threshold 0.15, and a 3x3 quadratic
//! fit for sub-pixel position. Description: 4x4 cells x 8 orientation bins of
//! gradient histograms over a 16x16 patch centered on the sub-pixel keypoint.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::imgmath::{self, EnhanceParams, KeypointProbMap};
use crate::phantom::Frame;

pub const DESCRIPTOR_DIM: usize = 128;
pub const NMS_WINDOW: usize = 7;
pub const DETECTION_THRESHOLD: f64 = 0.15;

/// Blur scales of the difference-of-Gaussians stack.
const DOG_SIGMAS: [f64; 4] = [1.0, 1.6, 2.56, 4.1];
const PATCH_SIZE: usize = 16;
const CELLS: usize = 4;
const ORIENTATIONS: usize = 8;
/// Keypoints closer than this to the border cannot be described.
pub const PATCH_MARGIN: f64 = 9.0;
const DESCRIPTOR_CLIP: f32 = 0.2;
/// Storage slot of each cell (row-major): the four central cells first, then
/// the edge cells, then the corners. Heavily weighted components lead, which
/// lets distance searches abandon early.
const CELL_SLOT: [usize; CELLS * CELLS] = [12, 4, 5, 13, 6, 0, 1, 7, 8, 2, 3, 9, 14, 10, 11, 15];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub response: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, response: f64) -> Self {
        Self { x, y, response }
    }
}

/// Unit-norm descriptor of [`DESCRIPTOR_DIM`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Descriptor(Vec<f32>);

impl Descriptor {
    /// Normalizes `values` to unit length. Fails on a zero vector or a
    /// wrong dimension.
    pub fn from_values(mut values: Vec<f32>) -> Result<Self> {
        if values.len() != DESCRIPTOR_DIM {
            return Err(Error::Shape(format!(
                "descriptor has {} values, expected {DESCRIPTOR_DIM}",
                values.len()
            )));
        }
        let norm = l2(&values);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Parameter("descriptor has zero or non-finite norm".into()));
        }
        for v in &mut values {
            *v /= norm;
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &Descriptor) -> f64 {
        (squared_distance(&self.0, &other.0) as f64).sqrt()
    }
}

impl AsRef<[f32]> for Descriptor {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

impl TryFrom<Vec<f32>> for Descriptor {
    type Error = Error;

    /// Accepts stored descriptors as-is after checking dimension and norm.
    fn try_from(values: Vec<f32>) -> Result<Self> {
        if values.len() != DESCRIPTOR_DIM {
            return Err(Error::Malformed(format!(
                "descriptor has {} values, expected {DESCRIPTOR_DIM}",
                values.len()
            )));
        }
        let n = l2(&values);
        if (n - 1.0).abs() > 1e-3 {
            return Err(Error::Malformed(format!("descriptor norm {n} is not 1")));
        }
        Ok(Self(values))
    }
}

impl From<Descriptor> for Vec<f32> {
    fn from(d: Descriptor) -> Self {
        d.0
    }
}

fn l2(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>().sqrt()
}

/// Squared Euclidean distance, accumulated in eight lanes so the loop
/// vectorizes. Symmetric in its arguments bit for bit.
#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    squared_distance_below(a, b, f32::INFINITY).unwrap_or(f32::INFINITY)
}

/// [`squared_distance`] if it is strictly below `bound`, else `None`. The
/// partial sum is checked every 32 components and the search abandoned once
/// it reaches `bound`; partial sums never exceed the full sum, so the outcome
/// matches a full evaluation.
#[inline]
pub fn squared_distance_below(a: &[f32], b: &[f32], bound: f32) -> Option<f32> {
    const LANES: usize = 8;
    const CHECK: usize = 32;
    let n = a.len().min(b.len());
    let full = n / LANES * LANES;
    let mut acc = [0.0f32; LANES];
    let mut k = 0;
    while k < full {
        let stop = (k + CHECK).min(full);
        while k < stop {
            let ca: &[f32; LANES] = a[k..k + LANES].try_into().unwrap();
            let cb: &[f32; LANES] = b[k..k + LANES].try_into().unwrap();
            for l in 0..LANES {
                let d = ca[l] - cb[l];
                acc[l] += d * d;
            }
            k += LANES;
        }
        if k < full && lane_sum(&acc) >= bound {
            return None;
        }
    }
    let mut tail = 0.0;
    for (x, y) in a[full..n].iter().zip(&b[full..n]) {
        tail += (x - y) * (x - y);
    }
    let d = lane_sum(&acc) + tail;
    (d < bound).then_some(d)
}

#[inline]
fn lane_sum(acc: &[f32; 8]) -> f32 {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

#[derive(Debug, Clone, Default)]
pub struct FeatureSet {
    pub frame_id: u64,
    pub width: usize,
    pub height: usize,
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    /// Image center, the origin of frame-centered coordinates.
    pub fn center(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }

    /// Writes `x,y,response,d0..d127` rows.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["x".to_string(), "y".into(), "response".into()];
        header.extend((0..DESCRIPTOR_DIM).map(|i| format!("d{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for (k, d) in self.keypoints.iter().zip(&self.descriptors) {
            let mut row = vec![k.x.to_string(), k.y.to_string(), k.response.to_string()];
            row.extend(d.as_slice().iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Malformed(format!("{other:?}")),
    }
}

/// Multi-scale DoG magnitude scaled so its maximum is 1. Constant images give
/// an all-zero map.
pub fn response_map(image: &Image) -> KeypointProbMap {
    let (w, h) = (image.width(), image.height());
    if image.is_empty() {
        return Image::new(w, h);
    }
    let blurred: Vec<Image> = DOG_SIGMAS.iter().map(|&s| image.gaussian_blur(s)).collect();
    let mut resp = vec![0.0f64; w * h];
    for pair in blurred.windows(2) {
        for ((r, a), b) in resp.iter_mut().zip(pair[0].data()).zip(pair[1].data()) {
            *r = r.max((b - a).abs());
        }
    }
    let max = resp.iter().cloned().fold(0.0, f64::max);
    // Below this the map is rounding noise from a flat image.
    if max < 1e-9 {
        return Image::new(w, h);
    }
    for r in &mut resp {
        *r /= max;
    }
    Image::from_vec(w, h, resp).expect("shape preserved")
}

/// Integer local maxima of `map` at or above `threshold`. A pixel survives if
/// every other pixel of its `window x window` neighborhood is smaller, or
/// equal and later in (y, x) order. Pixels on the outermost ring are skipped.
pub fn local_maxima(map: &KeypointProbMap, window: usize, threshold: f64) -> Result<Vec<(usize, usize)>> {
    if window.is_multiple_of(2) {
        return Err(Error::Parameter(format!("NMS window must be odd, got {window}")));
    }
    let r = (window / 2) as isize;
    let (w, h) = (map.width() as isize, map.height() as isize);
    let mut out = Vec::new();
    for y in 1..h - 1 {
        'px: for x in 1..w - 1 {
            let v = map.get(x as usize, y as usize);
            if v < threshold {
                continue;
            }
            for yy in (y - r).max(0)..=(y + r).min(h - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w - 1) {
                    if yy == y && xx == x {
                        continue;
                    }
                    let q = map.get(xx as usize, yy as usize);
                    if q > v || (q == v && (yy, xx) < (y, x)) {
                        continue 'px;
                    }
                }
            }
            out.push((x as usize, y as usize));
        }
    }
    Ok(out)
}

/// Sub-pixel offset of a maximum from its 3x3 neighborhood: Newton step on the
/// quadratic through the neighborhood, falling back to independent 1-D
/// parabolas when the 2-D fit is not a proper maximum. Offsets are clamped to
/// half a pixel.
pub fn refine_peak(map: &KeypointProbMap, x: usize, y: usize) -> (f64, f64) {
    let v = |dx: isize, dy: isize| map.get((x as isize + dx) as usize, (y as isize + dy) as usize);
    let c = v(0, 0);
    let gx = 0.5 * (v(1, 0) - v(-1, 0));
    let gy = 0.5 * (v(0, 1) - v(0, -1));
    let hxx = v(1, 0) - 2.0 * c + v(-1, 0);
    let hyy = v(0, 1) - 2.0 * c + v(0, -1);
    let hxy = 0.25 * (v(1, 1) - v(1, -1) - v(-1, 1) + v(-1, -1));
    let det = hxx * hyy - hxy * hxy;
    let (mut ox, mut oy) = if hxx < 0.0 && det > 0.0 {
        (-(hyy * gx - hxy * gy) / det, -(hxx * gy - hxy * gx) / det)
    } else {
        (f64::NAN, f64::NAN)
    };
    if !(ox.abs() <= 1.0 && oy.abs() <= 1.0) {
        ox = if hxx < 0.0 { -gx / hxx } else { 0.0 };
        oy = if hyy < 0.0 { -gy / hyy } else { 0.0 };
    }
    (ox.clamp(-0.5, 0.5), oy.clamp(-0.5, 0.5))
}

/// Non-maximum suppression plus sub-pixel refinement.
pub fn nms_detect(map: &KeypointProbMap, window: usize, threshold: f64) -> Result<Vec<Keypoint>> {
    Ok(local_maxima(map, window, threshold)?
        .into_iter()
        .map(|(x, y)| {
            let (ox, oy) = refine_peak(map, x, y);
            Keypoint::new(x as f64 + ox, y as f64 + oy, map.get(x, y))
        })
        .collect())
}

/// Dense gradients of one image, sampled per keypoint by [`DescriptorField::describe`].
#[derive(Debug, Clone)]
pub struct DescriptorField {
    gx: Image,
    gy: Image,
}

impl DescriptorField {
    pub fn new(image: &Image) -> Self {
        let (w, h) = (image.width(), image.height());
        let gx = Image::from_fn(w, h, |x, y| {
            let (x, y) = (x as isize, y as isize);
            0.5 * (image.get_clamped(x + 1, y) - image.get_clamped(x - 1, y))
        });
        let gy = Image::from_fn(w, h, |x, y| {
            let (x, y) = (x as isize, y as isize);
            0.5 * (image.get_clamped(x, y + 1) - image.get_clamped(x, y - 1))
        });
        Self { gx, gy }
    }

    pub fn width(&self) -> usize {
        self.gx.width()
    }

    pub fn height(&self) -> usize {
        self.gx.height()
    }

    /// Descriptor for a keypoint, or `None` when it is too close to the
    /// border or its patch is flat.
    pub fn descriptor_at(&self, kp: &Keypoint) -> Option<Descriptor> {
        let (w, h) = (self.width() as f64, self.height() as f64);
        if kp.x < PATCH_MARGIN || kp.y < PATCH_MARGIN || kp.x > w - 1.0 - PATCH_MARGIN || kp.y > h - 1.0 - PATCH_MARGIN {
            return None;
        }
        let mut hist = [0.0f64; DESCRIPTOR_DIM];
        let half = PATCH_SIZE as f64 / 2.0;
        let cell = (PATCH_SIZE / CELLS) as f64;
        let win_sigma2 = 2.0 * half * half;
        let bin_scale = ORIENTATIONS as f64 / std::f64::consts::TAU;
        for v in 0..PATCH_SIZE {
            let dv = v as f64 + 0.5 - half;
            for u in 0..PATCH_SIZE {
                let du = u as f64 + 0.5 - half;
                let (sx, sy) = (kp.x + du, kp.y + dv);
                let gx = self.gx.sample_bilinear(sx, sy);
                let gy = self.gy.sample_bilinear(sx, sy);
                let mag = gx.hypot(gy);
                if mag == 0.0 {
                    continue;
                }
                let weight = mag * (-(du * du + dv * dv) / win_sigma2).exp();
                let theta = gy.atan2(gx).rem_euclid(std::f64::consts::TAU);
                let ob = theta * bin_scale;
                let o0 = ob.floor();
                let fo = ob - o0;
                let o0 = o0 as usize % ORIENTATIONS;
                let o1 = (o0 + 1) % ORIENTATIONS;

                // soft spatial binning between neighboring cell centers
                let cu = (u as f64 + 0.5) / cell - 0.5;
                let cv = (v as f64 + 0.5) / cell - 0.5;
                let (cu0, cv0) = (cu.floor(), cv.floor());
                let (fu, fv) = (cu - cu0, cv - cv0);
                for (ci, wu) in [(cu0 as isize, 1.0 - fu), (cu0 as isize + 1, fu)] {
                    if !(0..CELLS as isize).contains(&ci) || wu == 0.0 {
                        continue;
                    }
                    for (cj, wv) in [(cv0 as isize, 1.0 - fv), (cv0 as isize + 1, fv)] {
                        if !(0..CELLS as isize).contains(&cj) || wv == 0.0 {
                            continue;
                        }
                        let base = CELL_SLOT[cj as usize * CELLS + ci as usize] * ORIENTATIONS;
                        let wc = weight * wu * wv;
                        hist[base + o0] += wc * (1.0 - fo);
                        hist[base + o1] += wc * fo;
                    }
                }
            }
        }
        let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-12) {
            return None;
        }
        let mut values: Vec<f32> = hist
            .iter()
            .map(|&v| ((v / norm) as f32).min(DESCRIPTOR_CLIP))
            .collect();
        let n2 = l2(&values);
        for v in &mut values {
            *v /= n2;
        }
        Some(Descriptor(values))
    }

    /// Describes every keypoint that admits a descriptor; others are dropped.
    pub fn describe(&self, frame_id: u64, keypoints: &[Keypoint]) -> FeatureSet {
        let mut set = FeatureSet {
            frame_id,
            width: self.width(),
            height: self.height(),
            ..Default::default()
        };
        for kp in keypoints {
            if let Some(d) = self.descriptor_at(kp) {
                set.keypoints.push(*kp);
                set.descriptors.push(d);
            }
        }
        set
    }
}

pub fn describe(frame: &Frame, keypoints: &[Keypoint]) -> FeatureSet {
    DescriptorField::new(&frame.image).describe(frame.id, keypoints)
}

/// Inference-time enhancement: per-pixel `alpha = clamp(kappa * (0.5 -
/// local_mean), -1, 1)` applied through the quadratic curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceConfig {
    pub kappa: f64,
    /// Radius of the box window for the local mean.
    pub window_radius: usize,
    pub iterations: usize,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            kappa: 2.0,
            window_radius: 8,
            iterations: 2,
        }
    }
}

impl EnhanceConfig {
    /// `kappa = 0`, i.e. alpha is zero everywhere.
    pub fn neutral() -> Self {
        Self {
            kappa: 0.0,
            ..Self::default()
        }
    }

    pub fn alpha_for(&self, image: &Image) -> Image {
        let k = self.kappa;
        image
            .box_mean(self.window_radius)
            .map(|m| (k * (0.5 - m)).clamp(-1.0, 1.0))
    }

    pub fn apply(&self, image: &Image) -> Result<Image> {
        let params = EnhanceParams {
            alpha: self.alpha_for(image),
            iterations: self.iterations,
        };
        imgmath::enhance(image, &params)
    }
}

/// Optional enhancement, then detection, NMS and description.
pub fn extract(frame: &Frame, use_enhancement: bool, enhance: &EnhanceConfig) -> Result<FeatureSet> {
    let enhanced;
    let image = if use_enhancement {
        enhanced = enhance.apply(&frame.image)?;
        &enhanced
    } else {
        &frame.image
    };
    let map = response_map(image);
    let kps = nms_detect(&map, NMS_WINDOW, DETECTION_THRESHOLD)?;
    Ok(DescriptorField::new(image).describe(frame.id, &kps))
}
