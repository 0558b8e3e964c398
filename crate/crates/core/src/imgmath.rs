//! Image enhancement curve, training losses and inlier labeling as plain
//! numerical functions, each paired with an analytic gradient that the tests
//! check against [`finite_diff_grad`].

use crate::error::{Error, Result};
use crate::image::Image;

/// Keypoint probability map: same layout as an image, values in [0,1].
pub type KeypointProbMap = Image;

/// Probability floor applied to scores inside [`bce_loss`].
pub const BCE_FLOOR: f64 = 1e-7;

/// Keypoint headroom used by the training configuration (the loss definition
/// itself uses 1000, see [`LossParams::default`]).
pub const TRAINING_HEADROOM: f64 = 2000.0;

#[derive(Debug, Clone)]
pub struct EnhanceParams {
    pub alpha: Image,
    pub iterations: usize,
}

impl EnhanceParams {
    pub fn new(alpha: Image) -> Self {
        Self { alpha, iterations: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    /// Triplet margin.
    pub margin: f64,
    /// Keypoint threshold inside the soft count.
    pub gamma: f64,
    pub temperature: f64,
    /// Number of additional keypoints the enhanced map should gain.
    pub headroom: f64,
    /// Inlier radius in pixels.
    pub epsilon: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            margin: 1.0,
            gamma: 0.1,
            temperature: 0.1,
            headroom: 1000.0,
            epsilon: 10.0,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Parameter(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Parameter(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.headroom >= 0.0) {
            return Err(Error::Parameter(format!("headroom must be >= 0, got {}", self.headroom)));
        }
        Ok(())
    }
}

fn check_same_shape(a: &Image, b: &Image, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

fn check_alpha(alpha: &Image) -> Result<()> {
    if let Some(a) = alpha.data().iter().find(|a| !(a.abs() <= 1.0)) {
        return Err(Error::Parameter(format!("curve parameter {a} outside [-1, 1]")));
    }
    Ok(())
}

/// One application of the quadratic curve `I + alpha * I * (1 - I)`.
pub fn enhance_step(input: &Image, alpha: &Image) -> Result<Image> {
    check_same_shape(input, alpha, "enhance_step")?;
    check_alpha(alpha)?;
    let data = input
        .data()
        .iter()
        .zip(alpha.data())
        .map(|(&i, &a)| i + a * i * (1.0 - i))
        .collect();
    Image::from_vec(input.width(), input.height(), data)
}

/// `params.iterations` compositions of [`enhance_step`] with a shared alpha.
pub fn enhance(input: &Image, params: &EnhanceParams) -> Result<Image> {
    if params.iterations == 0 {
        return Err(Error::Parameter("enhancement needs at least one iteration".into()));
    }
    let mut out = enhance_step(input, &params.alpha)?;
    for _ in 1..params.iterations {
        out = enhance_step(&out, &params.alpha)?;
    }
    Ok(out)
}

/// Elementwise derivative of [`enhance`] with respect to the input image.
pub fn enhance_grad_input(input: &Image, params: &EnhanceParams) -> Result<Image> {
    check_same_shape(input, &params.alpha, "enhance_grad_input")?;
    check_alpha(&params.alpha)?;
    let data = input
        .data()
        .iter()
        .zip(params.alpha.data())
        .map(|(&i0, &a)| {
            let (mut i, mut g) = (i0, 1.0);
            for _ in 0..params.iterations {
                g *= 1.0 + a * (1.0 - 2.0 * i);
                i += a * i * (1.0 - i);
            }
            g
        })
        .collect();
    Image::from_vec(input.width(), input.height(), data)
}

/// Elementwise derivative of [`enhance`] with respect to alpha.
pub fn enhance_grad_alpha(input: &Image, params: &EnhanceParams) -> Result<Image> {
    check_same_shape(input, &params.alpha, "enhance_grad_alpha")?;
    check_alpha(&params.alpha)?;
    let data = input
        .data()
        .iter()
        .zip(params.alpha.data())
        .map(|(&i0, &a)| {
            // d(i_{k+1})/da = (1 + a(1 - 2 i_k)) d(i_k)/da + i_k (1 - i_k)
            let (mut i, mut g) = (i0, 0.0);
            for _ in 0..params.iterations {
                g = (1.0 + a * (1.0 - 2.0 * i)) * g + i * (1.0 - i);
                i += a * i * (1.0 - i);
            }
            g
        })
        .collect();
    Image::from_vec(input.width(), input.height(), data)
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Sum over pixels of `sigmoid((D - gamma) / t)`.
pub fn soft_keypoint_count(map: &KeypointProbMap, gamma: f64, temperature: f64) -> f64 {
    map.data()
        .iter()
        .map(|&d| sigmoid((d - gamma) / temperature))
        .sum()
}

pub fn soft_keypoint_count_grad(map: &KeypointProbMap, gamma: f64, temperature: f64) -> Image {
    map.map(|d| {
        let s = sigmoid((d - gamma) / temperature);
        s * (1.0 - s) / temperature
    })
}

/// A value that differentiation treats as a constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopGrad(f64);

impl StopGrad {
    pub fn new(value: f64) -> Self {
        Self(value)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Hinge on the soft keypoint gain with the raw-branch count detached.
pub fn keypoint_preserve_loss_detached(enhanced: &KeypointProbMap, raw_count: StopGrad, lp: &LossParams) -> f64 {
    let gain = soft_keypoint_count(enhanced, lp.gamma, lp.temperature) - raw_count.value();
    (lp.headroom - gain).max(0.0)
}

/// `max(0, h - [count(D_enh) - stopgrad(count(D_raw))])`.
pub fn keypoint_preserve_loss(enhanced: &KeypointProbMap, raw: &KeypointProbMap, lp: &LossParams) -> Result<f64> {
    check_same_shape(enhanced, raw, "keypoint_preserve_loss")?;
    lp.validate()?;
    let raw_count = StopGrad::new(soft_keypoint_count(raw, lp.gamma, lp.temperature));
    Ok(keypoint_preserve_loss_detached(enhanced, raw_count, lp))
}

#[derive(Debug, Clone)]
pub struct KeypointPreserveGrad {
    pub enhanced: Image,
    /// Always zero: the raw branch is detached.
    pub raw: Image,
}

pub fn keypoint_preserve_grad(
    enhanced: &KeypointProbMap,
    raw: &KeypointProbMap,
    lp: &LossParams,
) -> Result<KeypointPreserveGrad> {
    let loss = keypoint_preserve_loss(enhanced, raw, lp)?;
    let zeros = Image::new(raw.width(), raw.height());
    let enhanced_grad = if loss > 0.0 {
        soft_keypoint_count_grad(enhanced, lp.gamma, lp.temperature).map(|g| -g)
    } else {
        zeros.clone()
    };
    Ok(KeypointPreserveGrad {
        enhanced: enhanced_grad,
        raw: zeros,
    })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_triplet_lengths(anchor: &[Vec<f64>], pos: &[Vec<f64>], neg_rand: &[Vec<f64>], neg_hard: &[Vec<f64>]) -> Result<()> {
    let n = anchor.len();
    if pos.len() != n || neg_rand.len() != n || neg_hard.len() != n {
        return Err(Error::Shape(format!(
            "triplet lists have lengths {n}, {}, {}, {}",
            pos.len(),
            neg_rand.len(),
            neg_hard.len()
        )));
    }
    for (i, a) in anchor.iter().enumerate() {
        let d = a.len();
        if pos[i].len() != d || neg_rand[i].len() != d || neg_hard[i].len() != d {
            return Err(Error::Shape(format!("descriptor dimensions differ at keypoint {i}")));
        }
    }
    Ok(())
}

/// Per-keypoint hinge from already-computed descriptor distances.
#[inline]
pub fn triplet_term(margin: f64, d_pos: f64, d_neg_rand: f64, d_neg_hard: f64) -> f64 {
    (margin + d_pos - 0.5 * (d_neg_rand + d_neg_hard)).max(0.0)
}

/// Sum over keypoints of `max(0, m + d_pos - (d_neg_rand + d_neg_hard) / 2)`
/// with Euclidean descriptor distances from the anchor.
pub fn triplet_descriptor_loss(
    anchor: &[Vec<f64>],
    pos: &[Vec<f64>],
    neg_rand: &[Vec<f64>],
    neg_hard: &[Vec<f64>],
    margin: f64,
) -> Result<f64> {
    check_triplet_lengths(anchor, pos, neg_rand, neg_hard)?;
    Ok((0..anchor.len())
        .map(|i| {
            triplet_term(
                margin,
                euclidean(&anchor[i], &pos[i]),
                euclidean(&anchor[i], &neg_rand[i]),
                euclidean(&anchor[i], &neg_hard[i]),
            )
        })
        .sum())
}

/// Gradient of [`triplet_descriptor_loss`] with respect to every anchor
/// descriptor. Coincident descriptors contribute a zero subgradient.
pub fn triplet_descriptor_grad_anchor(
    anchor: &[Vec<f64>],
    pos: &[Vec<f64>],
    neg_rand: &[Vec<f64>],
    neg_hard: &[Vec<f64>],
    margin: f64,
) -> Result<Vec<Vec<f64>>> {
    check_triplet_lengths(anchor, pos, neg_rand, neg_hard)?;
    let unit = |a: &[f64], b: &[f64]| -> Vec<f64> {
        let d = euclidean(a, b);
        if d == 0.0 {
            vec![0.0; a.len()]
        } else {
            a.iter().zip(b).map(|(x, y)| (x - y) / d).collect()
        }
    };
    Ok((0..anchor.len())
        .map(|i| {
            let a = &anchor[i];
            let active = triplet_term(
                margin,
                euclidean(a, &pos[i]),
                euclidean(a, &neg_rand[i]),
                euclidean(a, &neg_hard[i]),
            ) > 0.0;
            if !active {
                return vec![0.0; a.len()];
            }
            let (up, ur, uh) = (unit(a, &pos[i]), unit(a, &neg_rand[i]), unit(a, &neg_hard[i]));
            (0..a.len()).map(|k| up[k] - 0.5 * (ur[k] + uh[k])).collect()
        })
        .collect())
}

fn check_bce(scores: &[f64], labels: &[f64]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput("bce_loss needs at least one score".into()));
    }
    Ok(())
}

/// Mean binary cross-entropy, scores clamped to `[BCE_FLOOR, 1 - BCE_FLOOR]`.
pub fn bce_loss(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_bce(scores, labels)?;
    let n = scores.len() as f64;
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&x, &y)| {
            let x = x.clamp(BCE_FLOOR, 1.0 - BCE_FLOOR);
            y * x.ln() + (1.0 - y) * (1.0 - x).ln()
        })
        .sum();
    Ok(-total / n)
}

pub fn bce_grad(scores: &[f64], labels: &[f64]) -> Result<Vec<f64>> {
    check_bce(scores, labels)?;
    let n = scores.len() as f64;
    Ok(scores
        .iter()
        .zip(labels)
        .map(|(&x, &y)| {
            if !(BCE_FLOOR..=1.0 - BCE_FLOOR).contains(&x) {
                return 0.0;
            }
            -(y / x - (1.0 - y) / (1.0 - x)) / n
        })
        .collect())
}

/// 1 iff the source point moved by `m_gt` lands strictly within `epsilon` of
/// the target point.
pub fn inlier_label(k_src: [f64; 2], k_tgt: [f64; 2], m_gt: [f64; 2], epsilon: f64) -> u8 {
    let dx = k_src[0] + m_gt[0] - k_tgt[0];
    let dy = k_src[1] + m_gt[1] - k_tgt[1];
    u8::from(dx.hypot(dy) < epsilon)
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut probe = x.to_vec();
    Ok((0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect())
}
