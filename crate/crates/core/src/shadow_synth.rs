//! Depth-aware shadow matte rendering and shadow compositing.
//!
//! A shadow is composited per channel `c` and pixel `p` as
//!
//! ```text
//! I[p,c] = (1 - (1 - alpha) * rho[p,c]) * clean[p,c] + alpha * beta[c] * rho[p,c]
//! ```
//!
//! where `rho` is the matte rendered from the occluder mask and the face depth,
//! `alpha` is the ambient attenuation and `beta[c] = slope[c] * alpha + intercept[c]`.
//!
//! The matte multiplies the mask by a depth falloff, then applies a separable
//! Gaussian blur whose per-pixel sigma grows with the distance to the mask
//! boundary. Colour channels blur with individual spread multipliers to mimic
//! sub-surface scattering. For a fixed sigma field the blur is linear, and its
//! adjoint is used to push image gradients back onto the mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{FieldRole, Image, ScalarField};

/// Largest admissible ambient attenuation.
pub const ALPHA_MAX: f64 = 0.999;

const SIGMA_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatteConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Blur multipliers for (r, g, b).
    pub scatter_spread: [f64; 3],
    pub depth_gain: f64,
}

impl Default for MatteConfig {
    fn default() -> Self {
        Self {
            sigma_min: 1.0,
            sigma_max: 3.0,
            scatter_spread: [1.3, 1.15, 1.0],
            depth_gain: 0.5,
        }
    }
}

impl MatteConfig {
    pub fn validate(&self) -> Result<()> {
        let [r, g, b] = self.scatter_spread;
        if !(self.sigma_min >= 0.0 && self.sigma_min <= self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "matte sigmas must satisfy 0 <= sigma_min <= sigma_max, got {} / {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(b >= 1.0 && g >= b && r >= g && r.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "scatter spread must satisfy r >= g >= b >= 1, got {:?}",
                self.scatter_spread
            )));
        }
        if !(self.depth_gain >= 0.0 && self.depth_gain.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "depth_gain must be >= 0, got {}",
                self.depth_gain
            )));
        }
        Ok(())
    }

    /// The same configuration with all channels blurred identically.
    pub fn achromatic(&self) -> Self {
        Self {
            scatter_spread: [1.0; 3],
            ..*self
        }
    }
}

/// Per-channel linear map `beta[c] = slope[c] * alpha + intercept[c]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BetaMap {
    pub slope: [f64; 3],
    pub intercept: [f64; 3],
}

impl BetaMap {
    pub fn beta(&self, alpha: f64) -> [f64; 3] {
        [0, 1, 2].map(|c| self.slope[c] * alpha + self.intercept[c])
    }
}

/// Everything needed to render one shadow onto a clean face.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowParams {
    pub alpha: f64,
    pub beta: BetaMap,
    pub mask: ScalarField,
    pub depth: ScalarField,
    pub matte: MatteConfig,
}

impl ShadowParams {
    pub fn new(alpha: f64, mask: ScalarField, depth: ScalarField) -> Result<Self> {
        if mask.dims() != depth.dims() {
            return Err(Error::dims(mask.dims(), depth.dims()));
        }
        Ok(Self {
            alpha: clamp_alpha(alpha),
            beta: BetaMap::default(),
            mask,
            depth,
            matte: MatteConfig::default(),
        })
    }
}

pub fn clamp_alpha(alpha: f64) -> f64 {
    if alpha.is_nan() {
        0.0
    } else {
        alpha.clamp(0.0, ALPHA_MAX)
    }
}

const EDT_FAR: f64 = 1e20;

/// 1D exact squared Euclidean distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        let mut s;
        loop {
            let p = v[k];
            s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                break;
            }
        }
        if s <= z[k] {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
        } else {
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Euclidean distance from every pixel to the nearest pixel where `seeds` is
/// true. Infinite when there are no seeds.
pub fn euclidean_distance_transform(seeds: &[bool], height: usize, width: usize) -> Vec<f64> {
    let n = height.max(width);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut col_in = vec![0.0; height];
    let mut col_out = vec![0.0; height];
    let mut grid: Vec<f64> = seeds.iter().map(|s| if *s { 0.0 } else { EDT_FAR }).collect();
    for x in 0..width {
        for y in 0..height {
            col_in[y] = grid[y * width + x];
        }
        edt_1d(&col_in, &mut col_out, &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; width];
    for y in 0..height {
        let row = &grid[y * width..(y + 1) * width];
        edt_1d(row, &mut row_out, &mut v, &mut z);
        grid[y * width..(y + 1) * width].copy_from_slice(&row_out);
    }
    grid.iter()
        .map(|d| if *d >= EDT_FAR / 2.0 { f64::INFINITY } else { d.sqrt() })
        .collect()
}

/// Distance from each pixel to the nearest pixel of the opposite class of the
/// 0.5-thresholded mask.
pub fn boundary_distance(mask: &ScalarField) -> Vec<f64> {
    let (h, w) = mask.dims();
    let inside: Vec<bool> = mask.data().iter().map(|v| *v >= 0.5).collect();
    let outside: Vec<bool> = inside.iter().map(|b| !b).collect();
    let to_outside = euclidean_distance_transform(&outside, h, w);
    let to_inside = euclidean_distance_transform(&inside, h, w);
    inside
        .iter()
        .enumerate()
        .map(|(i, inn)| if *inn { to_outside[i] } else { to_inside[i] })
        .collect()
}

/// Per-pixel blur sigma from the boundary distance.
pub fn sigma_field(mask: &ScalarField, cfg: &MatteConfig) -> Vec<f64> {
    let span = cfg.sigma_max - cfg.sigma_min;
    if cfg.sigma_max <= 0.0 {
        return vec![0.0; mask.data().len()];
    }
    boundary_distance(mask)
        .into_iter()
        .map(|d| cfg.sigma_min + span * (d / cfg.sigma_max).min(1.0))
        .collect()
}

fn gaussian_taps(sigma: f64, taps: &mut Vec<f64>) -> isize {
    taps.clear();
    if sigma < SIGMA_EPS {
        taps.push(1.0);
        return 0;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for k in -radius..=radius {
        taps.push((-((k * k) as f64) * inv).exp());
    }
    radius
}

#[derive(Clone, Copy)]
enum Axis {
    Horizontal,
    Vertical,
}

/// One separable pass. `transpose = false` gathers `out[p] = sum_k w_p(k) in[p+k]`
/// with weights normalised over in-bounds taps; `transpose = true` applies the
/// adjoint (scatter) of the same operator.
fn blur_pass(
    input: &[f64],
    sigma: &[f64],
    scale: f64,
    height: usize,
    width: usize,
    axis: Axis,
    transpose: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    let mut taps = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let radius = gaussian_taps(sigma[p] * scale, &mut taps);
            let (pos, len) = match axis {
                Axis::Horizontal => (x as isize, width as isize),
                Axis::Vertical => (y as isize, height as isize),
            };
            let lo = (-radius).max(-pos);
            let hi = radius.min(len - 1 - pos);
            let norm: f64 = (lo..=hi).map(|k| taps[(k + radius) as usize]).sum();
            let index = |k: isize| match axis {
                Axis::Horizontal => (p as isize + k) as usize,
                Axis::Vertical => (p as isize + k * width as isize) as usize,
            };
            if transpose {
                let g = input[p] / norm;
                for k in lo..=hi {
                    out[index(k)] += taps[(k + radius) as usize] * g;
                }
            } else {
                let mut acc = 0.0;
                for k in lo..=hi {
                    acc += taps[(k + radius) as usize] * input[index(k)];
                }
                out[p] = acc / norm;
            }
        }
    }
    out
}

/// Spatially varying separable Gaussian blur with per-pixel sigma `sigma[p] * scale`.
pub fn varying_blur(input: &[f64], sigma: &[f64], scale: f64, height: usize, width: usize) -> Vec<f64> {
    let tmp = blur_pass(input, sigma, scale, height, width, Axis::Horizontal, false);
    blur_pass(&tmp, sigma, scale, height, width, Axis::Vertical, false)
}

/// Adjoint of [`varying_blur`] for the same sigma field.
pub fn varying_blur_adjoint(upstream: &[f64], sigma: &[f64], scale: f64, height: usize, width: usize) -> Vec<f64> {
    let tmp = blur_pass(upstream, sigma, scale, height, width, Axis::Vertical, true);
    blur_pass(&tmp, sigma, scale, height, width, Axis::Horizontal, true)
}

/// Intermediate products of matte rendering, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MatteRender {
    height: usize,
    width: usize,
    /// `1 - depth_gain * (1 - D)` per pixel.
    depth_factor: Vec<f64>,
    /// Whether `M * depth_factor` was inside `[0, 1]` before clamping.
    product_live: Vec<bool>,
    sigma: Vec<f64>,
    spread: [f64; 3],
    channels: [Vec<f64>; 3],
}

impl MatteRender {
    pub fn new(mask: &ScalarField, depth: &ScalarField, cfg: &MatteConfig) -> Result<Self> {
        if mask.dims() != depth.dims() {
            return Err(Error::dims(mask.dims(), depth.dims()));
        }
        cfg.validate()?;
        let (height, width) = mask.dims();
        let depth_factor: Vec<f64> = depth.data().iter().map(|d| 1.0 - cfg.depth_gain * (1.0 - d)).collect();
        let raw: Vec<f64> = mask.data().iter().zip(&depth_factor).map(|(m, f)| m * f).collect();
        let product_live = raw.iter().map(|v| (0.0..=1.0).contains(v)).collect();
        let product: Vec<f64> = raw.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let sigma = sigma_field(mask, cfg);
        let channels = cfg.scatter_spread.map(|s| {
            varying_blur(&product, &sigma, s, height, width)
                .into_iter()
                .map(|v| v.clamp(0.0, 1.0))
                .collect()
        });
        Ok(Self {
            height,
            width,
            depth_factor,
            product_live,
            sigma,
            spread: cfg.scatter_spread,
            channels,
        })
    }

    /// Matte of channel `c` (0 = r, 1 = g, 2 = b).
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Pulls per-channel matte gradients back onto the (pre-depth) mask.
    pub fn mask_vjp(&self, d_rho: &[[f64; 3]]) -> Vec<f64> {
        let n = self.height * self.width;
        let mut d_product = vec![0.0; n];
        for c in 0..3 {
            let up: Vec<f64> = d_rho.iter().map(|g| g[c]).collect();
            let back = varying_blur_adjoint(&up, &self.sigma, self.spread[c], self.height, self.width);
            for (acc, v) in d_product.iter_mut().zip(back) {
                *acc += v;
            }
        }
        d_product
            .iter()
            .zip(&self.depth_factor)
            .zip(&self.product_live)
            .map(|((g, f), live)| if *live { g * f } else { 0.0 })
            .collect()
    }
}

/// Renders the achromatic matte: depth modulation followed by the boundary
/// distance driven blur.
pub fn render_matte(mask: &ScalarField, depth: &ScalarField, cfg: &MatteConfig) -> Result<ScalarField> {
    let render = MatteRender::new(mask, depth, &cfg.achromatic())?;
    let (h, w) = mask.dims();
    ScalarField::new(h, w, FieldRole::Matte, render.channels[2].clone())
}

/// Renders the three per-channel mattes using the configured scatter spreads.
pub fn render_matte_rgb(mask: &ScalarField, depth: &ScalarField, cfg: &MatteConfig) -> Result<[ScalarField; 3]> {
    let render = MatteRender::new(mask, depth, cfg)?;
    let (h, w) = mask.dims();
    let [r, g, b] = render.channels;
    Ok([
        ScalarField::new(h, w, FieldRole::Matte, r)?,
        ScalarField::new(h, w, FieldRole::Matte, g)?,
        ScalarField::new(h, w, FieldRole::Matte, b)?,
    ])
}

/// Forward composite with everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ShadowForward {
    image: Image,
    clean: Vec<f64>,
    matte: MatteRender,
    alpha: f64,
    beta: [f64; 3],
    beta_slope: [f64; 3],
    /// Whether the composite was inside `[0, 1]` before clamping, per sample.
    live: Vec<bool>,
}

impl ShadowForward {
    pub fn run(
        clean: &Image,
        mask: &ScalarField,
        depth: &ScalarField,
        alpha: f64,
        beta: &BetaMap,
        cfg: &MatteConfig,
    ) -> Result<Self> {
        mask.ensure_dims(clean.dims())?;
        depth.ensure_dims(clean.dims())?;
        let alpha = clamp_alpha(alpha);
        let matte = MatteRender::new(mask, depth, cfg)?;
        let b = beta.beta(alpha);
        let mut out = Vec::with_capacity(clean.data().len());
        let mut live = Vec::with_capacity(clean.data().len());
        for (p, px) in clean.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                let rho = matte.channels[c][p];
                let v = (1.0 - (1.0 - alpha) * rho) * px[c] + alpha * b[c] * rho;
                live.push((0.0..=1.0).contains(&v));
                out.push(v.clamp(0.0, 1.0));
            }
        }
        Ok(Self {
            image: Image::new(clean.height(), clean.width(), out)?,
            clean: clean.data().to_vec(),
            matte,
            alpha,
            beta: b,
            beta_slope: beta.slope,
            live,
        })
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn into_image(self) -> Image {
        self.image
    }

    pub fn matte(&self) -> &MatteRender {
        &self.matte
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `dI/dalpha` per sample (interleaved RGB); zero where the output clamped.
    pub fn d_alpha(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.clean.len());
        for (i, clean) in self.clean.iter().enumerate() {
            let (p, c) = (i / 3, i % 3);
            let rho = self.matte.channels[c][p];
            let g = rho * (clean + self.beta[c]) + self.alpha * self.beta_slope[c] * rho;
            out.push(if self.live[i] { g } else { 0.0 });
        }
        out
    }

    /// `dI/drho` per sample (interleaved RGB); zero where the output clamped.
    pub fn d_rho(&self) -> Vec<f64> {
        self.clean
            .iter()
            .enumerate()
            .map(|(i, clean)| {
                if self.live[i] {
                    -(1.0 - self.alpha) * clean + self.alpha * self.beta[i % 3]
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Vector-Jacobian product: given `dJ/dI` (interleaved RGB) returns
    /// `(dJ/dalpha, dJ/dM)` with the sigma field held fixed.
    pub fn vjp(&self, upstream: &[f64]) -> Result<(f64, Vec<f64>)> {
        if upstream.len() != self.clean.len() {
            return Err(Error::Shape(format!(
                "upstream gradient has {} samples, expected {}",
                upstream.len(),
                self.clean.len()
            )));
        }
        let d_alpha: f64 = self.d_alpha().iter().zip(upstream).map(|(a, u)| a * u).sum();
        let d_rho = self.d_rho();
        let per_pixel: Vec<[f64; 3]> = upstream
            .chunks_exact(3)
            .zip(d_rho.chunks_exact(3))
            .map(|(u, r)| [u[0] * r[0], u[1] * r[1], u[2] * r[2]])
            .collect();
        Ok((d_alpha, self.matte.mask_vjp(&per_pixel)))
    }
}

/// Composites a shadow onto `clean`.
pub fn compose_shadow(clean: &Image, params: &ShadowParams) -> Result<Image> {
    ShadowForward::run(
        clean,
        &params.mask,
        &params.depth,
        params.alpha,
        &params.beta,
        &params.matte,
    )
    .map(ShadowForward::into_image)
}

/// Analytic partial derivatives of the composite.
#[derive(Debug, Clone)]
pub struct SynthGradients {
    forward: ShadowForward,
}

impl SynthGradients {
    /// `dI/dalpha`, interleaved RGB.
    pub fn d_alpha(&self) -> Vec<f64> {
        self.forward.d_alpha()
    }

    /// `dI/drho`, interleaved RGB.
    pub fn d_rho(&self) -> Vec<f64> {
        self.forward.d_rho()
    }

    /// Adjoint of `dI/dM`: maps an upstream `dJ/dI` to `dJ/dM`.
    pub fn mask_adjoint(&self, upstream: &[f64]) -> Result<Vec<f64>> {
        self.forward.vjp(upstream).map(|(_, m)| m)
    }

    pub fn forward(&self) -> &ShadowForward {
        &self.forward
    }
}

pub fn synth_gradients(clean: &Image, params: &ShadowParams) -> Result<SynthGradients> {
    Ok(SynthGradients {
        forward: ShadowForward::run(
            clean,
            &params.mask,
            &params.depth,
            params.alpha,
            &params.beta,
            &params.matte,
        )?,
    })
}

/// Ellipsoidal face-depth proxy at continuous pixel coordinates.
pub fn face_depth_at(x: f64, y: f64, height: usize, width: usize) -> f64 {
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let (rx, ry) = (0.38 * width as f64, 0.48 * height as f64);
    let u = (x - cx) / rx;
    let v = (y - cy) / ry;
    (1.0 - u * u - v * v).max(0.0).sqrt().clamp(0.0, 1.0)
}

/// Synthetic dome-shaped depth map standing in for a predicted face depth.
pub fn synthetic_face_depth(height: usize, width: usize) -> Result<ScalarField> {
    if height < 8 || width < 8 {
        return Err(Error::InvalidArgument(format!(
            "synthetic depth needs at least 8x8, got {height}x{width}"
        )));
    }
    ScalarField::from_fn(height, width, FieldRole::Depth, |y, x| {
        face_depth_at(x as f64, y as f64, height, width)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn field(h: usize, w: usize, v: f64) -> ScalarField {
        ScalarField::filled(h, w, FieldRole::Mask, v).unwrap()
    }

    fn brute_edt(seeds: &[bool], h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![f64::INFINITY; h * w];
        for y in 0..h {
            for x in 0..w {
                for sy in 0..h {
                    for sx in 0..w {
                        if seeds[sy * w + sx] {
                            let d = ((y as f64 - sy as f64).powi(2) + (x as f64 - sx as f64).powi(2)).sqrt();
                            out[y * w + x] = out[y * w + x].min(d);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn edt_matches_brute_force() {
        let mut rng = crate::rng::rng_from_seed(3);
        for _ in 0..30 {
            let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
            let seeds: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.15)).collect();
            let fast = euclidean_distance_transform(&seeds, h, w);
            let slow = brute_edt(&seeds, h, w);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a == b) || (a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn empty_mask_gives_zero_matte() {
        let m = render_matte(&field(10, 12, 0.0), &field(10, 12, 0.7), &MatteConfig::default()).unwrap();
        assert!(m.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn full_mask_without_blur_is_one() {
        let cfg = MatteConfig {
            sigma_min: 0.0,
            sigma_max: 0.0,
            depth_gain: 3.7,
            ..MatteConfig::default()
        };
        let m = render_matte(&field(6, 6, 1.0), &field(6, 6, 1.0), &cfg).unwrap();
        assert!(m.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn single_pixel_gives_gaussian_stamp() {
        let (h, w) = (15, 15);
        let mut data = vec![0.0; h * w];
        data[7 * w + 7] = 1.0;
        let mask = ScalarField::new(h, w, FieldRole::Mask, data).unwrap();
        let cfg = MatteConfig {
            sigma_min: 1.0,
            sigma_max: 1.0,
            ..MatteConfig::default()
        };
        let m = render_matte(&mask, &field(h, w, 1.0), &cfg).unwrap();
        // Oracle: 2D discretised Gaussian, radius 3, normalised over its support.
        let mut kernel = vec![0.0; 49];
        let mut total = 0.0;
        for dy in -3i32..=3 {
            for dx in -3i32..=3 {
                let v = (-((dx * dx + dy * dy) as f64) / 2.0).exp();
                kernel[((dy + 3) * 7 + dx + 3) as usize] = v;
                total += v;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as i32 - 7, x as i32 - 7);
                let want = if dy.abs() <= 3 && dx.abs() <= 3 {
                    kernel[((dy + 3) * 7 + dx + 3) as usize] / total
                } else {
                    0.0
                };
                assert!((m.get(y, x) - want).abs() < 1e-12);
            }
        }
        assert!(m.get(7, 7) < 1.0);
    }

    #[test]
    fn blur_adjoint_satisfies_inner_product_identity() {
        let mut rng = crate::rng::rng_from_seed(9);
        let (h, w) = (9, 13);
        let sigma: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..2.5)).collect();
        let x: Vec<f64> = (0..h * w).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..h * w).map(|_| rng.random()).collect();
        let ax = varying_blur(&x, &sigma, 1.3, h, w);
        let aty = varying_blur_adjoint(&y, &sigma, 1.3, h, w);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn compose_closed_form() {
        let clean = Image::filled(1, 1, [0.5; 3]).unwrap();
        let cfg = MatteConfig {
            sigma_min: 0.0,
            sigma_max: 0.0,
            depth_gain: 0.0,
            ..MatteConfig::default()
        };
        let mut params = ShadowParams::new(0.4, field(1, 1, 1.0), field(1, 1, 1.0)).unwrap();
        params.matte = cfg;
        let out = compose_shadow(&clean, &params).unwrap();
        for v in out.data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
        params.alpha = 0.0;
        assert!(compose_shadow(&clean, &params)
            .unwrap()
            .data()
            .iter()
            .all(|v| *v == 0.0));

        params.alpha = 0.4;
        let g = synth_gradients(&clean, &params).unwrap();
        for v in g.d_alpha() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_mask_is_identity_with_zero_alpha_gradient() {
        let mut rng = crate::rng::rng_from_seed(5);
        let clean = Image::from_fn(9, 7, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap();
        let mut params = ShadowParams::new(0.3, field(9, 7, 0.0), field(9, 7, 0.6)).unwrap();
        params.beta = BetaMap {
            slope: [0.1, 0.2, 0.3],
            intercept: [0.05, 0.0, 0.02],
        };
        assert_eq!(compose_shadow(&clean, &params).unwrap(), clean);
        assert!(synth_gradients(&clean, &params)
            .unwrap()
            .d_alpha()
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let clean = Image::filled(4, 4, [0.5; 3]).unwrap();
        let params = ShadowParams {
            alpha: 0.5,
            beta: BetaMap::default(),
            mask: field(4, 5, 0.0),
            depth: field(4, 5, 0.0),
            matte: MatteConfig::default(),
        };
        assert!(matches!(
            compose_shadow(&clean, &params),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(ShadowParams::new(0.5, field(4, 4, 0.0), field(5, 4, 0.0)).is_err());
        assert!(render_matte(&field(4, 4, 0.0), &field(3, 4, 0.0), &MatteConfig::default()).is_err());
    }

    #[test]
    fn alpha_is_clamped() {
        let p = ShadowParams::new(1.5, field(2, 2, 0.0), field(2, 2, 0.0)).unwrap();
        assert_eq!(p.alpha, ALPHA_MAX);
        assert_eq!(clamp_alpha(-0.2), 0.0);
    }

    #[test]
    fn matte_config_validation() {
        let bad = MatteConfig {
            sigma_min: 2.0,
            sigma_max: 1.0,
            ..MatteConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = MatteConfig {
            scatter_spread: [1.0, 1.2, 1.0],
            ..MatteConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(MatteConfig::default().validate().is_ok());
    }

    #[test]
    fn synthetic_depth_shape() {
        let d = synthetic_face_depth(100, 100).unwrap();
        assert_eq!(d.get(50, 50), 1.0);
        assert_eq!(d.get(0, 0), 0.0);
        assert_eq!(d.get(50, 88), 0.0);
        assert_eq!(face_depth_at(50.0 + 38.0, 50.0, 100, 100), 0.0);
        assert!(synthetic_face_depth(7, 20).is_err());
    }
}
