//! Synthetic wide-field retina and small field-of-view frame rendering.
//!
//! The phantom is a fixed intensity map. A gaze direction selects the frame
//! window by the small-angle linear model: the frame center samples the
//! phantom at `(cx + yaw * ppd_x, cy - pitch * ppd_y)`, where `(cx, cy)` is the
//! phantom location imaged at gaze (0, 0). Positive pitch therefore moves the
//! sampled region up on the phantom and the retinal content down in the frame.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;

/// Vessel count at `vessel_density == 1`.
pub const MAX_VESSELS: usize = 24;

/// Value-noise octaves as `(cell size in px, amplitude)`.
const TEXTURE_OCTAVES: [(f64, f64); 3] = [(12.0, 0.5), (6.0, 0.3), (3.0, 0.2)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Calibration {
    pub ppd_x: f64,
    pub ppd_y: f64,
    /// Gaze offset in degrees `(yaw, pitch)` applied when pupil steering is on.
    pub steering_offset: (f64, f64),
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            ppd_x: 40.18,
            ppd_y: 40.17,
            steering_offset: (0.0, 0.0),
        }
    }
}

impl Calibration {
    pub fn validate(&self) -> Result<()> {
        if !(self.ppd_x > 0.0 && self.ppd_y > 0.0) {
            return Err(Error::Parameter(format!(
                "pixels per degree must be positive, got ({}, {})",
                self.ppd_x, self.ppd_y
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GazeAngle {
    pub yaw: f64,
    pub pitch: f64,
}

impl GazeAngle {
    pub const fn new(yaw: f64, pitch: f64) -> Self {
        Self { yaw, pitch }
    }

    /// Image-axis pixel offset of the frame center for this gaze.
    pub fn to_pixels(self, cal: &Calibration) -> (f64, f64) {
        (self.yaw * cal.ppd_x, -self.pitch * cal.ppd_y)
    }

    pub fn from_pixels(dx: f64, dy: f64, cal: &Calibration) -> Self {
        Self {
            yaw: dx / cal.ppd_x,
            pitch: -dy / cal.ppd_y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameGeometry {
    pub width: usize,
    pub height: usize,
}

impl Default for FrameGeometry {
    fn default() -> Self {
        Self {
            width: 253,
            height: 207,
        }
    }
}

impl FrameGeometry {
    /// Center pixel in image coordinates.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub seed: u64,
    pub vessel_density: f64,
    pub width: usize,
    pub height: usize,
    pub frame: FrameGeometry,
    /// Half-width of the supported gaze range in degrees.
    pub gaze_range_deg: f64,
}

impl PhantomConfig {
    pub fn new(seed: u64, vessel_density: f64, width: usize, height: usize) -> Self {
        Self {
            seed,
            vessel_density,
            width,
            height,
            frame: FrameGeometry::default(),
            gaze_range_deg: 5.0,
        }
    }

    /// Checks density and that the size covers the gaze range.
    pub fn validate(&self, cal: &Calibration) -> Result<()> {
        cal.validate()?;
        if !(0.0..=1.0).contains(&self.vessel_density) {
            return Err(Error::Parameter(format!(
                "vessel_density must lie in [0,1], got {}",
                self.vessel_density
            )));
        }
        if !(self.gaze_range_deg >= 0.0) {
            return Err(Error::Parameter(format!("gaze range must be >= 0, got {}", self.gaze_range_deg)));
        }
        let (min_w, min_h) = self.min_size(cal);
        if self.width < min_w || self.height < min_h {
            return Err(Error::Coverage(format!(
                "phantom {}x{} is smaller than the {min_w}x{min_h} needed for +/-{} deg with a {}x{} frame",
                self.width, self.height, self.gaze_range_deg, self.frame.width, self.frame.height
            )));
        }
        Ok(())
    }

    /// Smallest phantom size that covers the gaze range plus one frame.
    pub fn min_size(&self, cal: &Calibration) -> (usize, usize) {
        (
            (self.frame.width as f64 + 2.0 * self.gaze_range_deg * cal.ppd_x).ceil() as usize,
            (self.frame.height as f64 + 2.0 * self.gaze_range_deg * cal.ppd_y).ceil() as usize,
        )
    }
}

#[derive(Debug, Clone)]
pub struct RetinaPhantom {
    pub intensity: Image,
    pub texture_seed: u64,
    pub vessel_density: f64,
    pub vessel_count: usize,
    pub frame: FrameGeometry,
    pub gaze_range_deg: f64,
}

impl RetinaPhantom {
    pub fn width(&self) -> usize {
        self.intensity.width()
    }

    pub fn height(&self) -> usize {
        self.intensity.height()
    }

    /// Phantom location imaged at the frame center for gaze (0, 0).
    pub fn center(&self) -> (f64, f64) {
        let (fcx, fcy) = self.frame.center();
        (
            fcx + ((self.width() - self.frame.width) / 2) as f64,
            fcy + ((self.height() - self.frame.height) / 2) as f64,
        )
    }

    /// Top-left phantom coordinate of the frame window for `gaze`, or a
    /// coverage error when the window leaves the phantom.
    pub fn window_origin(&self, gaze: GazeAngle, cal: &Calibration) -> Result<(f64, f64)> {
        let (cx, cy) = self.center();
        let (fcx, fcy) = self.frame.center();
        let (dx, dy) = gaze.to_pixels(cal);
        let x0 = cx + dx - fcx;
        let y0 = cy + dy - fcy;
        let x1 = x0 + self.frame.width as f64 - 1.0;
        let y1 = y0 + self.frame.height as f64 - 1.0;
        let max_x = self.width() as f64 - 1.0;
        let max_y = self.height() as f64 - 1.0;
        if !(x0 >= 0.0 && y0 >= 0.0 && x1 <= max_x && y1 <= max_y) {
            return Err(Error::Coverage(format!(
                "gaze ({:.3}, {:.3}) deg needs phantom window x [{x0:.1}, {x1:.1}] y [{y0:.1}, {y1:.1}], phantom is {}x{}",
                gaze.yaw,
                gaze.pitch,
                self.width(),
                self.height()
            )));
        }
        Ok((x0, y0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AppearanceParams {
    pub gamma: f64,
    pub noise_std: f64,
    pub blur_sigma: f64,
    pub vignette_strength: f64,
    pub noise_seed: u64,
}

impl AppearanceParams {
    pub fn neutral() -> Self {
        Self {
            gamma: 1.0,
            noise_std: 0.0,
            blur_sigma: 0.0,
            vignette_strength: 0.0,
            noise_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::Parameter(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Parameter(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !(self.blur_sigma >= 0.0) {
            return Err(Error::Parameter(format!("blur_sigma must be >= 0, got {}", self.blur_sigma)));
        }
        if !(0.0..=1.0).contains(&self.vignette_strength) {
            return Err(Error::Parameter(format!(
                "vignette_strength must lie in [0,1], got {}",
                self.vignette_strength
            )));
        }
        Ok(())
    }
}

impl Default for AppearanceParams {
    fn default() -> Self {
        Self::neutral()
    }
}

/// Draws per-frame appearance parameters. Frame `index` always receives the
/// same parameters for a given model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AppearanceModel {
    /// Relative gamma jitter: gamma is uniform in `[1 - j, 1 + j]`.
    pub gamma_jitter: f64,
    pub noise_std: f64,
    /// Blur sigma is uniform in `[0, blur_max]`.
    pub blur_max: f64,
    pub vignette_strength: f64,
    pub seed: u64,
}

impl AppearanceModel {
    pub fn neutral() -> Self {
        Self {
            gamma_jitter: 0.0,
            noise_std: 0.0,
            blur_max: 0.0,
            vignette_strength: 0.0,
            seed: 0,
        }
    }

    /// Gamma jitter 10%, noise 0.02, blur up to 0.5 px, mild vignette.
    pub fn nominal(seed: u64) -> Self {
        Self {
            gamma_jitter: 0.1,
            noise_std: 0.02,
            blur_max: 0.5,
            vignette_strength: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma_jitter) {
            return Err(Error::Parameter(format!("gamma_jitter must lie in [0,1), got {}", self.gamma_jitter)));
        }
        if !(self.blur_max >= 0.0) {
            return Err(Error::Parameter(format!("blur_max must be >= 0, got {}", self.blur_max)));
        }
        AppearanceParams {
            gamma: 1.0,
            noise_std: self.noise_std,
            blur_sigma: self.blur_max,
            vignette_strength: self.vignette_strength,
            noise_seed: 0,
        }
        .validate()
    }

    pub fn sample(&self, index: u64) -> AppearanceParams {
        let mut rng = seed::rng(self.seed, index);
        let gamma = if self.gamma_jitter > 0.0 {
            1.0 + rng.random_range(-self.gamma_jitter..=self.gamma_jitter)
        } else {
            1.0
        };
        let blur_sigma = if self.blur_max > 0.0 {
            rng.random_range(0.0..=self.blur_max)
        } else {
            0.0
        };
        AppearanceParams {
            gamma,
            noise_std: self.noise_std,
            blur_sigma,
            vignette_strength: self.vignette_strength,
            noise_seed: rng.random(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub id: u64,
    pub image: Image,
    pub true_gaze: Option<GazeAngle>,
}

impl Frame {
    pub fn new(id: u64, image: Image) -> Self {
        Self {
            id,
            image,
            true_gaze: None,
        }
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn geometry(&self) -> FrameGeometry {
        FrameGeometry {
            width: self.width(),
            height: self.height(),
        }
    }
}

pub fn generate_phantom(cfg: &PhantomConfig, cal: &Calibration) -> Result<RetinaPhantom> {
    cfg.validate(cal)?;
    let texture = texture_layer(cfg.seed, cfg.width, cfg.height);
    let (attenuation, vessel_count) = vessel_layer(cfg.seed, cfg.vessel_density, cfg.width, cfg.height);
    let mut intensity = texture;
    for (v, a) in intensity.data_mut().iter_mut().zip(attenuation.data()) {
        *v *= 1.0 - a;
    }
    intensity.clamp01();

    Ok(RetinaPhantom {
        intensity,
        texture_seed: cfg.seed,
        vessel_density: cfg.vessel_density,
        vessel_count,
        frame: cfg.frame,
        gaze_range_deg: cfg.gaze_range_deg,
    })
}

/// Band-limited texture: octaves of value noise rescaled to roughly [0.2, 0.8].
pub(crate) fn texture_layer(seed: u64, width: usize, height: usize) -> Image {
    let mut acc = Image::new(width, height);
    for (octave, &(cell, amp)) in TEXTURE_OCTAVES.iter().enumerate() {
        let layer = value_noise(seed::derive_seed(seed, octave as u64), width, height, cell);
        for (a, v) in acc.data_mut().iter_mut().zip(layer.data()) {
            *a += amp * v;
        }
    }
    let total: f64 = TEXTURE_OCTAVES.iter().map(|o| o.1).sum();
    // Sum of independent uniforms concentrates around the middle; stretch by 1.6
    // so the bulk of the texture spans ~[0.2, 0.8].
    acc.map(|v| (0.5 + 1.6 * (v / total - 0.5)).clamp(0.0, 1.0))
}

fn value_noise(seed: u64, width: usize, height: usize, cell: f64) -> Image {
    let lw = (width as f64 / cell).ceil() as usize + 2;
    let lh = (height as f64 / cell).ceil() as usize + 2;
    let mut rng = seed::rng(seed, 0);
    let lattice: Vec<f64> = (0..lw * lh).map(|_| rng.random::<f64>()).collect();
    let smooth = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
    Image::from_fn(width, height, |x, y| {
        let gx = x as f64 / cell;
        let gy = y as f64 / cell;
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let (tx, ty) = (smooth(gx - ix as f64), smooth(gy - iy as f64));
        let l = |i: usize, j: usize| lattice[j * lw + i];
        let top = l(ix, iy) + tx * (l(ix + 1, iy) - l(ix, iy));
        let bottom = l(ix, iy + 1) + tx * (l(ix + 1, iy + 1) - l(ix, iy + 1));
        top + ty * (bottom - top)
    })
}

/// Vessel attenuation in [0,1) and the number of vessels drawn. Each vessel is
/// a quadratic Bezier arc with a Gaussian cross-profile.
pub(crate) fn vessel_layer(seed: u64, density: f64, width: usize, height: usize) -> (Image, usize) {
    let count = (density * MAX_VESSELS as f64).round() as usize;
    let mut transmit = Image::filled(width, height, 1.0);
    let mut rng = seed::rng(seed, 1000);
    let (w, h) = (width as f64, height as f64);

    for _ in 0..count {
        let p0 = (rng.random_range(0.0..w), rng.random_range(0.0..h));
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let length = rng.random_range(0.25..0.7) * w.max(h);
        let p2 = (p0.0 + length * angle.cos(), p0.1 + length * angle.sin());
        let bend = rng.random_range(-0.3..0.3) * length;
        let mid = ((p0.0 + p2.0) / 2.0, (p0.1 + p2.1) / 2.0);
        let p1 = (mid.0 - bend * angle.sin(), mid.1 + bend * angle.cos());
        let sigma: f64 = rng.random_range(1.5..4.0);
        let darkness: f64 = rng.random_range(0.25..0.5);

        let reach = (3.0 * sigma).ceil() as isize;
        let steps = (length * 2.0).ceil() as usize;
        // Minimum squared distance from each pixel to this arc, inside the band.
        let mut dist2 = vec![f64::INFINITY; width * height];
        let mut touched = Vec::new();
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let u = 1.0 - t;
            let px = u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0;
            let py = u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1;
            let (ix, iy) = (px.round() as isize, py.round() as isize);
            for yy in (iy - reach).max(0)..=(iy + reach).min(height as isize - 1) {
                for xx in (ix - reach).max(0)..=(ix + reach).min(width as isize - 1) {
                    let d2 = (xx as f64 - px).powi(2) + (yy as f64 - py).powi(2);
                    let k = yy as usize * width + xx as usize;
                    if d2 < dist2[k] {
                        if dist2[k].is_infinite() {
                            touched.push(k);
                        }
                        dist2[k] = d2;
                    }
                }
            }
        }
        let t = transmit.data_mut();
        for k in touched {
            t[k] *= 1.0 - darkness * (-dist2[k] / (2.0 * sigma * sigma)).exp();
        }
    }
    (transmit.map(|v| 1.0 - v), count)
}

/// Samples the phantom window for `gaze` and applies `ap`.
pub fn render_frame(
    phantom: &RetinaPhantom,
    gaze: GazeAngle,
    cal: &Calibration,
    ap: &AppearanceParams,
) -> Result<Frame> {
    ap.validate()?;
    let (x0, y0) = phantom.window_origin(gaze, cal)?;
    let src = &phantom.intensity;
    let fg = phantom.frame;
    let image = Image::from_fn(fg.width, fg.height, |x, y| {
        src.sample_bilinear(x0 + x as f64, y0 + y as f64)
    });
    let mut frame = Frame::new(0, image);
    frame.true_gaze = Some(gaze);
    perturb_appearance(&frame, ap)
}

/// Applies gamma, blur, vignette and additive noise, in that order, clamping
/// to [0,1] after each stage.
pub fn perturb_appearance(frame: &Frame, ap: &AppearanceParams) -> Result<Frame> {
    ap.validate()?;
    let mut img = frame.image.clone();
    if ap.gamma != 1.0 {
        img = img.map(|v| v.clamp(0.0, 1.0).powf(ap.gamma));
    }
    if ap.blur_sigma > 0.0 {
        img = img.gaussian_blur(ap.blur_sigma);
        img.clamp01();
    }
    if ap.vignette_strength > 0.0 {
        let (cx, cy) = frame.geometry().center();
        let r2max = cx * cx + cy * cy;
        let s = ap.vignette_strength;
        let (w, h) = (img.width(), img.height());
        for y in 0..h {
            for x in 0..w {
                let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let v = img.get(x, y) * (1.0 - s * r2 / r2max.max(f64::MIN_POSITIVE));
                img.set(x, y, v.clamp(0.0, 1.0));
            }
        }
    }
    if ap.noise_std > 0.0 {
        let normal = Normal::new(0.0, ap.noise_std)
            .map_err(|e| Error::Parameter(format!("noise_std: {e}")))?;
        let mut rng = seed::rng(ap.noise_seed, 0x6e6f697365);
        for v in img.data_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(Frame {
        id: frame.id,
        image: img,
        true_gaze: frame.true_gaze,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub spacing_deg: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            rows: 5,
            cols: 5,
            spacing_deg: 2.5,
        }
    }
}

impl GridSpec {
    pub fn node_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn central_node(&self) -> usize {
        (self.rows / 2) * self.cols + self.cols / 2
    }

    /// Gaze of node `index` (row-major, row 0 at the top). The central node
    /// looks straight ahead.
    pub fn node_gaze(&self, index: usize) -> GazeAngle {
        let (r, c) = (index / self.cols, index % self.cols);
        GazeAngle {
            yaw: (c as f64 - (self.cols / 2) as f64) * self.spacing_deg,
            pitch: ((self.rows / 2) as f64 - r as f64) * self.spacing_deg,
        }
    }

    /// Adjacency edges, each directed from the lower to the higher index:
    /// horizontal then vertical neighbor per node in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(2 * self.node_count());
        for r in 0..self.rows {
            for c in 0..self.cols {
                let i = r * self.cols + c;
                if c + 1 < self.cols {
                    edges.push((i, i + 1));
                }
                if r + 1 < self.rows {
                    edges.push((i, i + self.cols));
                }
            }
        }
        edges
    }
}

#[derive(Debug, Clone)]
pub struct GridScan {
    pub spec: GridSpec,
    pub frames: Vec<Frame>,
    pub edges: Vec<(usize, usize)>,
    pub central_node: usize,
}

/// Renders a rectangular scan. Frame `i` gets appearance `model.sample(i)` and
/// id `i`.
pub fn grid_scan(
    phantom: &RetinaPhantom,
    cal: &Calibration,
    model: &AppearanceModel,
    spec: GridSpec,
) -> Result<GridScan> {
    if spec.rows == 0 || spec.cols == 0 {
        return Err(Error::Parameter("grid needs at least one row and column".into()));
    }
    let frames = (0..spec.node_count())
        .map(|i| {
            let mut f = render_frame(phantom, spec.node_gaze(i), cal, &model.sample(i as u64))?;
            f.id = i as u64;
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GridScan {
        spec,
        edges: spec.edges(),
        central_node: spec.central_node(),
        frames,
    })
}
