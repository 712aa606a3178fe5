//! Adversarial shadow mining.
//!
//! The attack maximises a landmark detector's loss over the shadow mask `M`,
//! the ambient attenuation `alpha` and a 2x3 affine warp `theta` applied to the
//! mask before compositing. Each iteration takes a signed step on every
//! variable and projects back into an L-infinity ball around its
//! initialisation (plus the validity ranges `alpha in [0, 0.999]`, `M in [0, 1]`).
//! The iterate with the highest loss is returned.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{FieldRole, Image, ScalarField};
use crate::metrics::{Landmarks, LANDMARK_COUNT};
use crate::rng::{rng_from_seed, BenchRng};
use crate::shadow_synth::{clamp_alpha, BetaMap, MatteConfig, ShadowForward, ALPHA_MAX};

/// Row-major 2x3 affine matrix `[a11, a12, tx, a21, a22, ty]` acting on
/// normalised coordinates in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AffineParams(pub [f64; 6]);

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn linf_distance(&self, other: &AffineParams) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Norm used for the constraint balls. Only L-infinity is supported.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackNorm {
    #[default]
    Linf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub step_alpha: f64,
    pub step_theta: f64,
    pub step_mask: f64,
    pub iterations: usize,
    pub eps_alpha: f64,
    pub eps_theta: f64,
    pub eps_mask: f64,
    pub alpha_init: f64,
    pub norm: AttackNorm,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            step_alpha: 0.01,
            step_theta: 0.02,
            step_mask: 0.0012,
            iterations: 40,
            eps_alpha: 0.4,
            eps_theta: 0.8,
            eps_mask: 0.048,
            alpha_init: 0.8,
            norm: AttackNorm::Linf,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let steps = [self.step_alpha, self.step_theta, self.step_mask];
        let eps = [self.eps_alpha, self.eps_theta, self.eps_mask];
        if steps.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "attack steps must be > 0, got {steps:?}"
            )));
        }
        if eps.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "attack radii must be >= 0, got {eps:?}"
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("attack needs at least one iteration".into()));
        }
        Ok(())
    }
}

/// Current attack variables and their initialisation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackState {
    pub mask: ScalarField,
    pub alpha: f64,
    pub theta: AffineParams,
    pub mask_init: ScalarField,
    pub alpha_init: f64,
    pub theta_init: AffineParams,
    pub iteration: usize,
}

impl AttackState {
    pub fn new(mask_init: ScalarField, alpha_init: f64) -> Self {
        let alpha_init = clamp_alpha(alpha_init);
        Self {
            mask: mask_init.clone(),
            alpha: alpha_init,
            theta: AffineParams::IDENTITY,
            mask_init,
            alpha_init,
            theta_init: AffineParams::IDENTITY,
            iteration: 0,
        }
    }

    pub fn mask_linf(&self) -> f64 {
        self.mask
            .data()
            .iter()
            .zip(self.mask_init.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Whether all ball constraints and validity ranges hold (with a small
    /// floating-point allowance).
    pub fn satisfies(&self, cfg: &AttackConfig) -> bool {
        const SLACK: f64 = 1e-12;
        (self.alpha - self.alpha_init).abs() <= cfg.eps_alpha + SLACK
            && (0.0..=ALPHA_MAX).contains(&self.alpha)
            && self.theta.linf_distance(&self.theta_init) <= cfg.eps_theta + SLACK
            && self.mask_linf() <= cfg.eps_mask + SLACK
            && self.mask.data().iter().all(|v| (0.0..=1.0).contains(v))
    }

    fn project(&mut self, cfg: &AttackConfig) {
        let lo = (self.alpha_init - cfg.eps_alpha).max(0.0);
        let hi = (self.alpha_init + cfg.eps_alpha).min(ALPHA_MAX);
        self.alpha = self.alpha.clamp(lo, hi);
        for (t, t0) in self.theta.0.iter_mut().zip(self.theta_init.0) {
            *t = t.clamp(t0 - cfg.eps_theta, t0 + cfg.eps_theta);
        }
        let (h, w) = self.mask.dims();
        let data = self
            .mask
            .data()
            .iter()
            .zip(self.mask_init.data())
            .map(|(m, m0)| m.clamp(m0 - cfg.eps_mask, m0 + cfg.eps_mask).clamp(0.0, 1.0))
            .collect();
        self.mask = ScalarField::new(h, w, FieldRole::Mask, data).expect("projected mask in range");
    }
}

/// Detector response for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    pub landmarks: Option<Landmarks>,
    pub loss: f64,
    /// `dJ/dI`, interleaved RGB, same length as the image samples.
    pub gradient: Vec<f64>,
}

/// A landmark detector seen through its loss against ground truth.
pub trait DetectorOracle {
    fn evaluate(&self, image: &Image, truth: &Landmarks) -> std::result::Result<OracleOutput, String>;

    /// Whether one instance may serve several workers concurrently. Oracles
    /// returning false must be instantiated per worker.
    fn is_share_safe(&self) -> bool {
        true
    }
}

/// Loss-only view of a detector, used with [`FdOracleAdapter`].
pub trait BlackBoxLoss {
    fn loss(&self, image: &Image, truth: &Landmarks) -> std::result::Result<BlackBoxOutput, String>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlackBoxOutput {
    pub loss: f64,
    pub landmarks: Option<Landmarks>,
}

/// Plain closures `image -> loss` are black boxes without landmarks.
impl<F> BlackBoxLoss for F
where
    F: Fn(&Image) -> std::result::Result<f64, String>,
{
    fn loss(&self, image: &Image, _truth: &Landmarks) -> std::result::Result<BlackBoxOutput, String> {
        self(image).map(|loss| BlackBoxOutput { loss, landmarks: None })
    }
}

/// Which pixels the finite-difference adapter probes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Subsample {
    /// All pixels up to 64x64, a seeded 25% beyond.
    Auto {
        seed: u64,
    },
    All,
    /// A seeded fraction of pixels.
    Fraction {
        fraction: f64,
        seed: u64,
    },
}

/// Turns a loss-only detector into a [`DetectorOracle`] by central differences.
pub struct FdOracleAdapter<B> {
    black_box: B,
    step: f64,
    subsample: Subsample,
}

impl<B: BlackBoxLoss> FdOracleAdapter<B> {
    pub fn new(black_box: B, step: f64) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "finite-difference step must be > 0, got {step}"
            )));
        }
        Ok(Self {
            black_box,
            step,
            subsample: Subsample::Auto { seed: 0 },
        })
    }

    pub fn with_subsample(mut self, subsample: Subsample) -> Self {
        self.subsample = subsample;
        self
    }

    fn probed_pixels(&self, n: usize) -> Vec<usize> {
        let pick = |fraction: f64, seed: u64| {
            let mut rng = rng_from_seed(seed ^ n as u64);
            (0..n).filter(|_| rng.random_bool(fraction.clamp(0.0, 1.0))).collect()
        };
        match self.subsample {
            Subsample::All => (0..n).collect(),
            Subsample::Auto { .. } if n <= 64 * 64 => (0..n).collect(),
            Subsample::Auto { seed } => pick(0.25, seed),
            Subsample::Fraction { fraction, seed } => pick(fraction, seed),
        }
    }
}

impl<B: BlackBoxLoss> DetectorOracle for FdOracleAdapter<B> {
    fn evaluate(&self, image: &Image, truth: &Landmarks) -> std::result::Result<OracleOutput, String> {
        let base = self.black_box.loss(image, truth)?;
        let (h, w) = image.dims();
        let mut gradient = vec![0.0; image.data().len()];
        let mut probe = image.data().to_vec();
        for p in self.probed_pixels(h * w) {
            for c in 0..3 {
                let i = p * 3 + c;
                let x = image.data()[i];
                let (plus, minus) = ((x + self.step).min(1.0), (x - self.step).max(0.0));
                probe[i] = plus;
                let up = self
                    .black_box
                    .loss(&Image::new(h, w, probe.clone()).map_err(|e| e.to_string())?, truth)?;
                probe[i] = minus;
                let down = self
                    .black_box
                    .loss(&Image::new(h, w, probe.clone()).map_err(|e| e.to_string())?, truth)?;
                probe[i] = x;
                gradient[i] = (up.loss - down.loss) / (plus - minus);
            }
        }
        Ok(OracleOutput {
            landmarks: base.landmarks,
            loss: base.loss,
            gradient,
        })
    }

    fn is_share_safe(&self) -> bool {
        false
    }
}

const POOL_GRID: usize = 16;
const FEATURES: usize = 3 * POOL_GRID * POOL_GRID;
const OUTPUTS: usize = 2 * LANDMARK_COUNT;

fn pool_bounds(i: usize, len: usize) -> (usize, usize) {
    let start = i * len / POOL_GRID;
    let end = ((i + 1) * len).div_ceil(POOL_GRID);
    (start, end.max(start + 1).min(len))
}

/// Mean 68-point face in normalised `[0, 1]` coordinates, iBUG ordering.
pub fn mean_face_template() -> Vec<[f64; 2]> {
    use std::f64::consts::PI;
    let mut pts = Vec::with_capacity(LANDMARK_COUNT);
    // Jaw 0..17: from the left temple, under the chin, to the right temple.
    for i in 0..17 {
        let t = PI * i as f64 / 16.0;
        pts.push([0.5 - 0.36 * t.cos(), 0.40 + 0.45 * t.sin()]);
    }
    // Brows 17..27.
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            let u = i as f64 / 4.0;
            let x = if side < 0.0 { 0.22 + 0.2 * u } else { 0.58 + 0.2 * u };
            let arch = 0.03 * (PI * u).sin();
            pts.push([x, 0.33 - arch]);
        }
    }
    // Nose bridge 27..31 and base 31..36.
    for i in 0..4 {
        pts.push([0.5, 0.40 + 0.05 * i as f64]);
    }
    for i in 0..5 {
        pts.push([0.44 + 0.03 * i as f64, 0.6 + 0.01 * (2.0 - (i as f64 - 2.0).abs())]);
    }
    // Eyes 36..48: six points each, starting at the outer corner.
    for (cx, outer_left) in [(0.33, true), (0.67, false)] {
        for i in 0..6 {
            let t = PI * i as f64 / 3.0;
            let dir = if outer_left { -1.0 } else { 1.0 };
            pts.push([cx + dir * 0.07 * t.cos(), 0.42 - 0.025 * t.sin()]);
        }
    }
    // Outer lip 48..60, inner lip 60..68.
    for i in 0..12 {
        let t = PI - 2.0 * PI * i as f64 / 12.0;
        pts.push([0.5 + 0.13 * t.cos(), 0.74 - 0.05 * t.sin()]);
    }
    for i in 0..8 {
        let t = PI - 2.0 * PI * i as f64 / 8.0;
        pts.push([0.5 + 0.09 * t.cos(), 0.74 - 0.02 * t.sin()]);
    }
    debug_assert_eq!(pts.len(), LANDMARK_COUNT);
    pts
}

/// Deterministic linear landmark regressor: 16x16 adaptive average pooling per
/// channel, a fixed random linear map, coordinates scaled to the image size.
/// The loss is the mean squared coordinate error in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDetector {
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ToyDetector {
    pub fn new(weights_seed: u64) -> Self {
        let mut rng: BenchRng = rng_from_seed(weights_seed);
        let amp = 0.005 * 3f64.sqrt();
        let weights = (0..OUTPUTS * FEATURES).map(|_| rng.random_range(-amp..amp)).collect();
        let bias = mean_face_template().into_iter().flatten().collect();
        Self { weights, bias }
    }

    fn features(image: &Image) -> Vec<f64> {
        let (h, w) = image.dims();
        let mut f = vec![0.0; FEATURES];
        for c in 0..3 {
            for gy in 0..POOL_GRID {
                let (y0, y1) = pool_bounds(gy, h);
                for gx in 0..POOL_GRID {
                    let (x0, x1) = pool_bounds(gx, w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            acc += image.data()[(y * w + x) * 3 + c];
                        }
                    }
                    f[(c * POOL_GRID + gy) * POOL_GRID + gx] = acc / ((y1 - y0) * (x1 - x0)) as f64 - 0.5;
                }
            }
        }
        f
    }

    fn predict_flat(&self, image: &Image) -> Vec<f64> {
        let f = Self::features(image);
        let (h, w) = image.dims();
        (0..OUTPUTS)
            .map(|k| {
                let row = &self.weights[k * FEATURES..(k + 1) * FEATURES];
                let norm = self.bias[k] + row.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>();
                norm * if k % 2 == 0 { w as f64 } else { h as f64 }
            })
            .collect()
    }

    pub fn predict(&self, image: &Image) -> Landmarks {
        Landmarks::from_flat(&self.predict_flat(image)).expect("68 finite points")
    }

    pub fn loss(&self, image: &Image, truth: &Landmarks) -> f64 {
        let pred = self.predict_flat(image);
        pred.iter().zip(truth.flat()).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / OUTPUTS as f64
    }
}

impl DetectorOracle for ToyDetector {
    fn evaluate(&self, image: &Image, truth: &Landmarks) -> std::result::Result<OracleOutput, String> {
        let (h, w) = image.dims();
        let pred = self.predict_flat(image);
        let truth_flat = truth.flat();
        let loss = pred.iter().zip(&truth_flat).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / OUTPUTS as f64;
        let mut d_feat = vec![0.0; FEATURES];
        for k in 0..OUTPUTS {
            let scale = if k % 2 == 0 { w as f64 } else { h as f64 };
            let d_norm = 2.0 * (pred[k] - truth_flat[k]) / OUTPUTS as f64 * scale;
            let row = &self.weights[k * FEATURES..(k + 1) * FEATURES];
            for (d, wk) in d_feat.iter_mut().zip(row) {
                *d += d_norm * wk;
            }
        }
        let mut gradient = vec![0.0; image.data().len()];
        for c in 0..3 {
            for gy in 0..POOL_GRID {
                let (y0, y1) = pool_bounds(gy, h);
                for gx in 0..POOL_GRID {
                    let (x0, x1) = pool_bounds(gx, w);
                    let g = d_feat[(c * POOL_GRID + gy) * POOL_GRID + gx] / ((y1 - y0) * (x1 - x0)) as f64;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            gradient[(y * w + x) * 3 + c] += g;
                        }
                    }
                }
            }
        }
        Ok(OracleOutput {
            landmarks: Some(Landmarks::from_flat(&pred).map_err(|e| e.to_string())?),
            loss,
            gradient,
        })
    }
}

/// Convenience constructor mirroring the other oracle factories.
pub fn toy_detector(weights_seed: u64) -> ToyDetector {
    ToyDetector::new(weights_seed)
}

/// Wraps a loss-only detector with central-difference gradients.
pub fn fd_oracle_adapter<B: BlackBoxLoss>(black_box: B, step: f64) -> Result<FdOracleAdapter<B>> {
    FdOracleAdapter::new(black_box, step)
}

struct SampleGeometry {
    cx: f64,
    cy: f64,
    /// Pixel-space coefficients `d src / d theta`.
    x_coef: [f64; 3],
    y_coef: [f64; 3],
}

impl SampleGeometry {
    fn new(h: usize, w: usize) -> Self {
        let (hf, wf) = (h as f64, w as f64);
        Self {
            cx: (wf - 1.0) / 2.0,
            cy: (hf - 1.0) / 2.0,
            x_coef: [1.0, wf / hf, wf / 2.0],
            y_coef: [hf / wf, 1.0, hf / 2.0],
        }
    }

    /// Source pixel coordinates sampled by output pixel `(x, y)`.
    fn source(&self, theta: &AffineParams, x: usize, y: usize) -> (f64, f64, [f64; 3], [f64; 3]) {
        let t = theta.0;
        let (dx, dy) = (x as f64 - self.cx, y as f64 - self.cy);
        let xb = [dx * self.x_coef[0], dy * self.x_coef[1], self.x_coef[2]];
        let yb = [dx * self.y_coef[0], dy * self.y_coef[1], self.y_coef[2]];
        let sx = self.cx + t[0] * xb[0] + t[1] * xb[1] + t[2] * xb[2];
        let sy = self.cy + t[3] * yb[0] + t[4] * yb[1] + t[5] * yb[2];
        (sx, sy, xb, yb)
    }
}

struct Corners {
    idx: [Option<usize>; 4],
    wt: [f64; 4],
    fx: f64,
    fy: f64,
}

fn corners(sx: f64, sy: f64, h: usize, w: usize) -> Corners {
    let (x0f, y0f) = (sx.floor(), sy.floor());
    let (fx, fy) = (sx - x0f, sy - y0f);
    let (x0, y0) = (x0f as isize, y0f as isize);
    let at = |x: isize, y: isize| {
        (x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h).then(|| y as usize * w + x as usize)
    };
    Corners {
        idx: [at(x0, y0), at(x0 + 1, y0), at(x0, y0 + 1), at(x0 + 1, y0 + 1)],
        wt: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        fx,
        fy,
    }
}

/// Resamples `mask` through `theta` (normalised coordinates, pixel centres,
/// bilinear, zero outside).
pub fn affine_warp(mask: &ScalarField, theta: &AffineParams) -> ScalarField {
    let (h, w) = mask.dims();
    let geo = SampleGeometry::new(h, w);
    let src = mask.data();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy, _, _) = geo.source(theta, x, y);
            let c = corners(sx, sy, h, w);
            let v: f64 = (0..4).map(|k| c.idx[k].map_or(0.0, |i| src[i] * c.wt[k])).sum();
            out.push(v);
        }
    }
    ScalarField::from_clamped(h, w, FieldRole::Mask, out).expect("valid dims")
}

/// Gradients of `sum(upstream * affine_warp(mask, theta))` with respect to
/// `theta` and `mask`.
pub fn warp_gradients(mask: &ScalarField, theta: &AffineParams, upstream: &[f64]) -> Result<([f64; 6], Vec<f64>)> {
    let (h, w) = mask.dims();
    if upstream.len() != h * w {
        return Err(Error::Shape(format!(
            "upstream has {} samples, expected {}",
            upstream.len(),
            h * w
        )));
    }
    let geo = SampleGeometry::new(h, w);
    let src = mask.data();
    let mut d_theta = [0.0; 6];
    let mut d_mask = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let u = upstream[y * w + x];
            if u == 0.0 {
                continue;
            }
            let (sx, sy, xb, yb) = geo.source(theta, x, y);
            let c = corners(sx, sy, h, w);
            let v = c.idx.map(|i| i.map_or(0.0, |i| src[i]));
            for k in 0..4 {
                if let Some(i) = c.idx[k] {
                    d_mask[i] += u * c.wt[k];
                }
            }
            let d_sx = (1.0 - c.fy) * (v[1] - v[0]) + c.fy * (v[3] - v[2]);
            let d_sy = (1.0 - c.fx) * (v[2] - v[0]) + c.fx * (v[3] - v[1]);
            for j in 0..3 {
                d_theta[j] += u * d_sx * xb[j];
                d_theta[3 + j] += u * d_sy * yb[j];
            }
        }
    }
    Ok((d_theta, d_mask))
}

/// Everything the synthesis needs apart from the attacked variables.
#[derive(Debug, Clone, Copy)]
pub struct SceneRef<'a> {
    pub clean: &'a Image,
    pub depth: &'a ScalarField,
    pub truth: &'a Landmarks,
    pub beta: BetaMap,
    pub matte: MatteConfig,
}

/// Loss and gradients of one attack state.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub image: Image,
    pub loss: f64,
    pub landmarks: Option<Landmarks>,
    pub d_alpha: f64,
    pub d_theta: [f64; 6],
    pub d_mask: Vec<f64>,
}

/// Renders the state and back-propagates the oracle gradient to `(alpha, theta, M)`.
pub fn evaluate_state(
    scene: &SceneRef<'_>,
    state: &AttackState,
    oracle: &dyn DetectorOracle,
) -> std::result::Result<Evaluation, String> {
    let warped = affine_warp(&state.mask, &state.theta);
    let forward = ShadowForward::run(
        scene.clean,
        &warped,
        scene.depth,
        state.alpha,
        &scene.beta,
        &scene.matte,
    )
    .map_err(|e| e.to_string())?;
    let out = oracle.evaluate(forward.image(), scene.truth)?;
    if out.gradient.len() != forward.image().data().len() {
        return Err(format!(
            "oracle gradient has {} samples, expected {}",
            out.gradient.len(),
            forward.image().data().len()
        ));
    }
    if out.loss.is_nan() || out.loss < 0.0 {
        return Err(format!("oracle returned invalid loss {}", out.loss));
    }
    let (d_alpha, d_warped) = forward.vjp(&out.gradient).map_err(|e| e.to_string())?;
    let (d_theta, d_mask) = warp_gradients(&state.mask, &state.theta, &d_warped).map_err(|e| e.to_string())?;
    Ok(Evaluation {
        image: forward.into_image(),
        loss: out.loss,
        landmarks: out.landmarks,
        d_alpha,
        d_theta,
        d_mask,
    })
}

/// One line of the loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub loss: f64,
    pub alpha: f64,
    pub theta: [f64; 6],
    pub mask_linf: f64,
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    /// Image of the best iterate.
    pub image: Image,
    /// State of the best iterate.
    pub state: AttackState,
    pub landmarks: Option<Landmarks>,
    pub trace: Vec<TraceEntry>,
    pub best_iteration: usize,
    pub initial_image: Image,
    pub initial_landmarks: Option<Landmarks>,
}

impl AttackResult {
    pub fn best_loss(&self) -> f64 {
        self.trace[self.best_iteration].loss
    }

    pub fn initial_loss(&self) -> f64 {
        self.trace[0].loss
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Runs the sign-gradient attack from `mask_init` and `cfg.alpha_init`.
///
/// The trace holds the initial evaluation (iteration 0) followed by one entry
/// per update. `on_iterate` sees every state after projection.
pub fn attack_with_observer(
    scene: &SceneRef<'_>,
    oracle: &dyn DetectorOracle,
    cfg: &AttackConfig,
    mask_init: &ScalarField,
    mut on_iterate: impl FnMut(&AttackState),
) -> Result<AttackResult> {
    cfg.validate()?;
    mask_init.ensure_dims(scene.clean.dims())?;
    scene.depth.ensure_dims(scene.clean.dims())?;
    let oracle_err = |iteration: usize| move |message: String| Error::Oracle { iteration, message };

    let mut state = AttackState::new(mask_init.clone(), cfg.alpha_init);
    state.project(cfg);
    on_iterate(&state);
    let mut eval = evaluate_state(scene, &state, oracle).map_err(oracle_err(0))?;
    let entry = |state: &AttackState, loss: f64| TraceEntry {
        iter: state.iteration,
        loss,
        alpha: state.alpha,
        theta: state.theta.0,
        mask_linf: state.mask_linf(),
    };
    let mut trace = vec![entry(&state, eval.loss)];
    let initial_image = eval.image.clone();
    let initial_landmarks = eval.landmarks.clone();
    let mut best = (
        0usize,
        eval.loss,
        eval.image.clone(),
        state.clone(),
        eval.landmarks.clone(),
    );

    for it in 1..=cfg.iterations {
        state.alpha += cfg.step_alpha * sign(eval.d_alpha);
        for (t, g) in state.theta.0.iter_mut().zip(eval.d_theta) {
            *t += cfg.step_theta * sign(g);
        }
        let (h, w) = state.mask.dims();
        let stepped: Vec<f64> = state
            .mask
            .data()
            .iter()
            .zip(&eval.d_mask)
            .map(|(m, g)| m + cfg.step_mask * sign(*g))
            .collect();
        state.mask = ScalarField::from_clamped(h, w, FieldRole::Mask, stepped)?;
        state.iteration = it;
        state.project(cfg);
        on_iterate(&state);

        eval = evaluate_state(scene, &state, oracle).map_err(oracle_err(it))?;
        trace.push(entry(&state, eval.loss));
        if eval.loss > best.1 {
            best = (it, eval.loss, eval.image.clone(), state.clone(), eval.landmarks.clone());
        }
    }

    let (best_iteration, _, image, state, landmarks) = best;
    Ok(AttackResult {
        image,
        state,
        landmarks,
        trace,
        best_iteration,
        initial_image,
        initial_landmarks,
    })
}

pub fn attack(
    scene: &SceneRef<'_>,
    oracle: &dyn DetectorOracle,
    cfg: &AttackConfig,
    mask_init: &ScalarField,
) -> Result<AttackResult> {
    attack_with_observer(scene, oracle, cfg, mask_init, |_| {})
}

/// A uniformly random state inside the constraint balls (and validity ranges).
pub fn random_in_ball_state(mask_init: &ScalarField, cfg: &AttackConfig, rng: &mut impl Rng) -> AttackState {
    let mut state = AttackState::new(mask_init.clone(), cfg.alpha_init);
    let uniform = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let lo = (state.alpha_init - cfg.eps_alpha).max(0.0);
    let hi = (state.alpha_init + cfg.eps_alpha).min(ALPHA_MAX);
    state.alpha = uniform(rng, lo, hi);
    for (t, t0) in state.theta.0.iter_mut().zip(state.theta_init.0) {
        *t = uniform(rng, t0 - cfg.eps_theta, t0 + cfg.eps_theta);
    }
    let (h, w) = mask_init.dims();
    let data = mask_init
        .data()
        .iter()
        .map(|m0| uniform(rng, (m0 - cfg.eps_mask).max(0.0), (m0 + cfg.eps_mask).min(1.0)))
        .collect();
    state.mask = ScalarField::new(h, w, FieldRole::Mask, data).expect("in range");
    state
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot_mask(h: usize, w: usize, cy: usize, cx: usize) -> ScalarField {
        ScalarField::from_fn(h, w, FieldRole::Mask, |y, x| f64::from(u8::from(y == cy && x == cx))).unwrap()
    }

    #[test]
    fn identity_warp_is_exact() {
        let mut rng = rng_from_seed(4);
        for (h, w) in [(7, 9), (8, 8), (5, 12)] {
            let m = ScalarField::from_fn(h, w, FieldRole::Mask, |_, _| rng.random()).unwrap();
            assert_eq!(affine_warp(&m, &AffineParams::IDENTITY), m);
        }
    }

    #[test]
    fn translation_moves_content_against_the_offset() {
        let m = dot_mask(16, 16, 8, 8);
        let out = affine_warp(&m, &AffineParams([1.0, 0.0, 0.5, 0.0, 1.0, 0.0]));
        // Sample point shifts by +0.25 W = 4 px, so the dot appears 4 px to the left.
        assert!((out.get(8, 4) - 1.0).abs() < 1e-12);
        assert!((out.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scaling_by_two_shrinks_about_centre() {
        // 15x15 so the centre is a pixel; output x reads source 7 + 2 (x - 7).
        let m = ScalarField::from_fn(15, 15, FieldRole::Mask, |_, x| {
            f64::from(u8::from((2..=12).contains(&x)))
        })
        .unwrap();
        let out = affine_warp(&m, &AffineParams([2.0, 0.0, 0.0, 0.0, 2.0, 0.0]));
        let row: Vec<f64> = (0..15).map(|x| out.get(7, x)).collect();
        let expected: Vec<f64> = (0..15).map(|x| f64::from(u8::from((5..=9).contains(&x)))).collect();
        assert_eq!(row, expected);
        let half = affine_warp(&m, &AffineParams([0.5, 0.0, 0.0, 0.0, 0.5, 0.0]));
        // Source 7 + (x - 7) / 2 lands between pixels for even offsets.
        assert_eq!(half.get(7, 0), 1.0);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = ScalarField::filled(6, 6, FieldRole::Mask, 0.7).unwrap();
        let (dt, dm) = warp_gradients(&m, &AffineParams([1.1, 0.1, 0.05, -0.1, 0.9, 0.02]), &[0.0; 36]).unwrap();
        assert_eq!(dt, [0.0; 6]);
        assert!(dm.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_mask_has_no_translation_gradient_in_interior() {
        let m = ScalarField::filled(12, 12, FieldRole::Mask, 0.6).unwrap();
        let mut up = vec![0.0; 144];
        for y in 4..8 {
            for x in 4..8 {
                up[y * 12 + x] = 1.0 + (x + y) as f64;
            }
        }
        let (dt, _) = warp_gradients(&m, &AffineParams([1.0, 0.0, 0.03, 0.0, 1.0, -0.02]), &up).unwrap();
        assert!(dt[2].abs() < 1e-12 && dt[5].abs() < 1e-12);
    }

    #[test]
    fn toy_detector_is_deterministic_and_self_consistent() {
        let img = Image::from_fn(32, 32, |y, x| [(x as f64) / 32.0, (y as f64) / 32.0, 0.5]).unwrap();
        let det = toy_detector(7);
        assert_eq!(det.predict(&img), toy_detector(7).predict(&img));
        let truth = det.predict(&img);
        let out = det.evaluate(&img, &truth).unwrap();
        assert!(out.loss.abs() < 1e-20);
        assert!(out.gradient.iter().all(|g| g.abs() < 1e-9));
    }

    #[test]
    fn template_has_distinct_eye_corners() {
        let t = mean_face_template();
        assert_eq!(t.len(), 68);
        assert!((t[36][0] - t[45][0]).abs() > 0.3);
    }

    #[test]
    fn fd_adapter_linear_and_quadratic() {
        let truth = Landmarks::new(mean_face_template()).unwrap();
        let img = Image::filled(4, 4, [0.5; 3]).unwrap();
        let sum = |i: &Image| -> std::result::Result<f64, String> { Ok(i.data().iter().sum()) };
        let out = fd_oracle_adapter(sum, 1e-3).unwrap().evaluate(&img, &truth).unwrap();
        assert!(out.gradient.iter().all(|g| (g - 1.0).abs() < 1e-6));
        let sq = |i: &Image| -> std::result::Result<f64, String> { Ok(i.data().iter().map(|v| v * v).sum()) };
        let out = fd_oracle_adapter(sq, 1e-3).unwrap().evaluate(&img, &truth).unwrap();
        assert!(out.gradient.iter().all(|g| (g - 1.0).abs() < 1e-4));
        assert!(fd_oracle_adapter(sum, 0.0).is_err());
    }

    #[test]
    fn fd_adapter_propagates_black_box_failure() {
        let truth = Landmarks::new(mean_face_template()).unwrap();
        let img = Image::filled(2, 2, [0.5; 3]).unwrap();
        let fail = |_: &Image| -> std::result::Result<f64, String> { Err("boom".into()) };
        assert_eq!(
            fd_oracle_adapter(fail, 1e-3)
                .unwrap()
                .evaluate(&img, &truth)
                .unwrap_err(),
            "boom"
        );
    }

    #[test]
    fn auto_subsample_probes_quarter_of_large_images() {
        let sum = |i: &Image| -> std::result::Result<f64, String> { Ok(i.data().iter().sum()) };
        let adapter = fd_oracle_adapter(sum, 1e-3).unwrap();
        assert_eq!(adapter.probed_pixels(64 * 64).len(), 64 * 64);
        let n = adapter.probed_pixels(100 * 100).len();
        assert!((2200..2800).contains(&n), "{n}");
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::default().validate().is_ok());
        assert!(AttackConfig {
            step_alpha: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AttackConfig {
            eps_mask: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AttackConfig {
            iterations: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn random_state_respects_balls() {
        let m = ScalarField::from_fn(8, 8, FieldRole::Mask, |y, _| if y < 4 { 1.0 } else { 0.0 }).unwrap();
        let cfg = AttackConfig::default();
        let mut rng = rng_from_seed(1);
        for _ in 0..50 {
            assert!(random_in_ball_state(&m, &cfg, &mut rng).satisfies(&cfg));
        }
    }
}
