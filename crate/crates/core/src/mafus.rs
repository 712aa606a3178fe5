//! Forward reference of the mutual attention fusion block, the feature
//! recovery network and the detection-aware training losses.
//!
//! Tensors are NCHW with `f64` entries. Nothing here is trained; weights come
//! from callers, seeded initialisers or the binary container at the bottom.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl FeatureTensor {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("tensor dimensions must be >= 1, got {shape:?}")));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "tensor {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("tensor entries must be finite".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Result<Self> {
        Self::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Result<Self> {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cs, h, w] = self.shape;
        self.data[((n * cs + c) * h + y) * w + x]
    }

    fn positions(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    /// Batch element `n` as a `HW x C` matrix (rows are positions).
    fn position_matrix(&self, n: usize) -> Matrix {
        let [_, c, _, _] = self.shape;
        let hw = self.positions();
        let base = n * c * hw;
        Matrix::from_fn(hw, c, |p, ch| self.data[base + ch * hw + p])
    }

    fn from_position_matrices(mats: &[Matrix], h: usize, w: usize) -> Result<Self> {
        let c = mats[0].cols;
        let mut data = Vec::with_capacity(mats.len() * c * h * w);
        for m in mats {
            for ch in 0..c {
                data.extend((0..h * w).map(|p| m.get(p, ch)));
            }
        }
        Self::new([mats.len(), c, h, w], data)
    }

    /// Concatenates along channels.
    pub fn concat_channels(parts: &[&FeatureTensor]) -> Result<Self> {
        let [n, _, h, w] = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?
            .shape;
        if parts
            .iter()
            .any(|p| p.shape[0] != n || p.shape[2] != h || p.shape[3] != w)
        {
            return Err(Error::Shape("concatenated tensors must share N, H and W".into()));
        }
        let c: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for p in parts {
                let len = p.shape[1] * h * w;
                data.extend_from_slice(&p.data[b * len..(b + 1) * len]);
            }
        }
        Self::new([n, c, h, w], data)
    }

    fn same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{what}: {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| f64::from(u8::from(i == j)))
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..rhs.cols {
                    out.data[i * rhs.cols + j] += a * rhs.get(k, j);
                }
            }
        }
        Ok(out)
    }

    fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    fn random(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
    }
}

/// Projections of one stream: `theta`, `phi`, `g` are `C x C'`, `z` maps back
/// with shape `C' x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamWeights {
    pub theta: Matrix,
    pub phi: Matrix,
    pub g: Matrix,
    pub z: Matrix,
}

impl StreamWeights {
    fn check(&self, channels: usize, inner: usize, stream: &str) -> Result<()> {
        let ok = [&self.theta, &self.phi, &self.g]
            .iter()
            .all(|m| m.rows == channels && m.cols == inner)
            && self.z.rows == inner
            && self.z.cols == channels;
        if !ok {
            return Err(Error::Shape(format!(
                "{stream} stream projections must be {channels}x{inner} (z: {inner}x{channels})"
            )));
        }
        Ok(())
    }

    fn random(channels: usize, inner: usize, rng: &mut impl Rng) -> Self {
        let s = 1.0 / (channels as f64).sqrt();
        Self {
            theta: Matrix::random(channels, inner, s, rng),
            phi: Matrix::random(channels, inner, s, rng),
            g: Matrix::random(channels, inner, s, rng),
            z: Matrix::random(inner, channels, 1.0 / (inner as f64).sqrt(), rng),
        }
    }
}

/// 1x1 convolution over `[F, T]` producing `(gamma_f, gamma_t)`, followed by
/// inference-mode batch normalisation and rectification.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaPredictor {
    /// `2 x (C_f + C_t)`.
    pub weight: Matrix,
    pub bias: [f64; 2],
    pub bn_scale: [f64; 2],
    pub bn_shift: [f64; 2],
    pub bn_mean: [f64; 2],
    pub bn_var: [f64; 2],
    pub bn_eps: f64,
}

impl GammaPredictor {
    /// Predictor with all-zero output (pure self-attention in both streams).
    pub fn zeros(in_channels: usize) -> Self {
        Self {
            weight: Matrix::zeros(2, in_channels),
            bias: [0.0; 2],
            bn_scale: [1.0; 2],
            bn_shift: [0.0; 2],
            bn_mean: [0.0; 2],
            bn_var: [1.0; 2],
            bn_eps: 1e-5,
        }
    }

    /// `gamma[k][p]` for batch element `n`, `k = 0` for the f stream.
    fn predict(&self, f: &Matrix, t: &Matrix) -> [Vec<f64>; 2] {
        let cf = f.cols;
        std::array::from_fn(|k| {
            (0..f.rows)
                .map(|p| {
                    let lin = self.bias[k]
                        + f.row(p)
                            .iter()
                            .enumerate()
                            .map(|(c, v)| self.weight.get(k, c) * v)
                            .sum::<f64>()
                        + t.row(p)
                            .iter()
                            .enumerate()
                            .map(|(c, v)| self.weight.get(k, cf + c) * v)
                            .sum::<f64>();
                    let bn = (lin - self.bn_mean[k]) / (self.bn_var[k] + self.bn_eps).sqrt() * self.bn_scale[k]
                        + self.bn_shift[k];
                    bn.max(0.0)
                })
                .collect()
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MAFusWeights {
    pub f: StreamWeights,
    pub t: StreamWeights,
    pub gamma: GammaPredictor,
}

impl MAFusWeights {
    pub fn random(f_channels: usize, t_channels: usize, inner: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let f = StreamWeights::random(f_channels, inner, &mut rng);
        let t = StreamWeights::random(t_channels, inner, &mut rng);
        let mut gamma = GammaPredictor::zeros(f_channels + t_channels);
        gamma.weight = Matrix::random(2, f_channels + t_channels, 0.5, &mut rng);
        gamma.bias = [rng.random_range(0.0..0.5), rng.random_range(0.0..0.5)];
        Self { f, t, gamma }
    }

    fn validate(&self, f_channels: usize, t_channels: usize) -> Result<()> {
        let inner = self.f.theta.cols;
        self.f.check(f_channels, inner, "f")?;
        self.t.check(t_channels, inner, "t")?;
        if self.gamma.weight.rows != 2 || self.gamma.weight.cols != f_channels + t_channels {
            return Err(Error::Shape(format!(
                "gamma predictor must be 2x{}",
                f_channels + t_channels
            )));
        }
        Ok(())
    }
}

/// Similarity logits `(X W_theta)(X W_phi)^T`, one `HW x HW` matrix per batch element.
pub fn nonlocal_similarity(x: &FeatureTensor, w_theta: &Matrix, w_phi: &Matrix) -> Result<Vec<Matrix>> {
    let c = x.shape[1];
    if w_theta.rows != c || w_phi.rows != c || w_theta.cols != w_phi.cols {
        return Err(Error::Shape(format!(
            "projections {}x{} / {}x{} do not fit {c} channels",
            w_theta.rows, w_theta.cols, w_phi.rows, w_phi.cols
        )));
    }
    (0..x.shape[0])
        .map(|n| {
            let xm = x.position_matrix(n);
            xm.matmul(w_theta)?.matmul(&xm.matmul(w_phi)?.transpose())
        })
        .collect()
}

fn softmax_rows(m: &mut Matrix) {
    for i in 0..m.rows {
        let row = &mut m.data[i * m.cols..(i + 1) * m.cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// `A_f = softmax(L_f + gamma_t * L_t)`, `A_t = softmax(L_t + gamma_f * L_f)`,
/// with each gamma scaling the logit row of its query position.
pub fn mutual_attention(
    logits_f: &[Matrix],
    logits_t: &[Matrix],
    gamma_f: &[Vec<f64>],
    gamma_t: &[Vec<f64>],
) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let n = logits_f.len();
    if logits_t.len() != n || gamma_f.len() != n || gamma_t.len() != n {
        return Err(Error::Shape("batch sizes of logits and gamma fields differ".into()));
    }
    let mut out_f = Vec::with_capacity(n);
    let mut out_t = Vec::with_capacity(n);
    for b in 0..n {
        let (lf, lt) = (&logits_f[b], &logits_t[b]);
        if lf.rows != lf.cols || lf.rows != lt.rows || lf.cols != lt.cols {
            return Err(Error::Shape("logit matrices must be equal and square".into()));
        }
        if gamma_f[b].len() != lf.rows || gamma_t[b].len() != lf.rows {
            return Err(Error::Shape("gamma fields must have one value per position".into()));
        }
        let mix = |own: &Matrix, other: &Matrix, gamma: &[f64]| {
            let mut m = Matrix::from_fn(own.rows, own.cols, |i, j| own.get(i, j) + gamma[i] * other.get(i, j));
            softmax_rows(&mut m);
            m
        };
        out_f.push(mix(lf, lt, &gamma_t[b]));
        out_t.push(mix(lt, lf, &gamma_f[b]));
    }
    Ok((out_f, out_t))
}

/// Fused `[Z_f, Z_t]` with `Z = A (X W_g) W_z + X` per stream.
pub fn mafus_forward(f: &FeatureTensor, t: &FeatureTensor, weights: &MAFusWeights) -> Result<FeatureTensor> {
    let [n, cf, h, w] = f.shape;
    let [nt, ct, ht, wt] = t.shape;
    if (n, h, w) != (nt, ht, wt) {
        return Err(Error::Shape(format!(
            "F {:?} and T {:?} must share N, H, W",
            f.shape, t.shape
        )));
    }
    weights.validate(cf, ct)?;
    let logits_f = nonlocal_similarity(f, &weights.f.theta, &weights.f.phi)?;
    let logits_t = nonlocal_similarity(t, &weights.t.theta, &weights.t.phi)?;
    let (mut gamma_f, mut gamma_t) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for b in 0..n {
        let [gf, gt] = weights.gamma.predict(&f.position_matrix(b), &t.position_matrix(b));
        gamma_f.push(gf);
        gamma_t.push(gt);
    }
    let (att_f, att_t) = mutual_attention(&logits_f, &logits_t, &gamma_f, &gamma_t)?;
    let stream = |x: &FeatureTensor, att: &[Matrix], sw: &StreamWeights| -> Result<Vec<Matrix>> {
        (0..n)
            .map(|b| {
                let xm = x.position_matrix(b);
                let mut z = att[b].matmul(&xm.matmul(&sw.g)?)?.matmul(&sw.z)?;
                for (zv, xv) in z.data.iter_mut().zip(&xm.data) {
                    *zv += xv;
                }
                Ok(z)
            })
            .collect()
    };
    let zf = FeatureTensor::from_position_matrices(&stream(f, &att_f, &weights.f)?, h, w)?;
    let zt = FeatureTensor::from_position_matrices(&stream(t, &att_t, &weights.t)?, h, w)?;
    FeatureTensor::concat_channels(&[&zf, &zt])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `out x in x k x k`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    fn random(in_channels: usize, out_channels: usize, kernel: usize, padding: usize, rng: &mut impl Rng) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel, 1, padding);
        let s = (3.0 / (in_channels * kernel * kernel) as f64).sqrt();
        conv.weight.iter_mut().for_each(|v| *v = rng.random_range(-s..s));
        conv.bias.iter_mut().for_each(|v| *v = rng.random_range(-0.05..0.05));
        conv
    }

    fn check(&self, name: &str) -> Result<()> {
        let k2 = self.kernel * self.kernel;
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Shape(format!("{name}: kernel and stride must be >= 1")));
        }
        if self.weight.len() != self.out_channels * self.in_channels * k2 || self.bias.len() != self.out_channels {
            return Err(Error::Shape(format!(
                "{name}: weight/bias sizes do not match {}->{} k{}",
                self.in_channels, self.out_channels, self.kernel
            )));
        }
        Ok(())
    }

    /// Direct convolution followed by `max(0, .)`.
    pub fn forward_relu(&self, x: &FeatureTensor) -> Result<FeatureTensor> {
        let [n, c, h, w] = x.shape;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        if h + 2 * p < k || w + 2 * p < k {
            return Err(Error::Shape(format!("kernel {k} larger than padded input {h}x{w}")));
        }
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        let mut out = vec![0.0; n * self.out_channels * oh * ow];
        for b in 0..n {
            for o in 0..self.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = self.bias[o];
                        for i in 0..c {
                            for ky in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if ix < 0 || ix as usize >= w {
                                        continue;
                                    }
                                    acc += self.weight[((o * c + i) * k + ky) * k + kx]
                                        * x.get(b, i, iy as usize, ix as usize);
                                }
                            }
                        }
                        out[((b * self.out_channels + o) * oh + oy) * ow + ox] = acc.max(0.0);
                    }
                }
            }
        }
        FeatureTensor::new([n, self.out_channels, oh, ow], out)
    }
}

pub const RECOVERY_LAYERS: [&str; 7] = [
    "conv1_1",
    "conv1_2",
    "conv2_1",
    "conv2_2",
    "conv3_1",
    "conv3_2",
    "conv_fuse",
];

/// Three conv pairs with a multi-level 1x1 fusion, stored in
/// [`RECOVERY_LAYERS`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryNetWeights {
    pub layers: [Conv2d; 7],
}

impl RecoveryNetWeights {
    /// Widths `(c1, c2, c3)` for the three branches on a `c_in` input, all zero.
    pub fn zeros_with_widths(c_in: usize, widths: [usize; 3]) -> Self {
        let [c1, c2, c3] = widths;
        Self {
            layers: [
                Conv2d::zeros(c_in, c1, 3, 1, 1),
                Conv2d::zeros(c1, c1, 3, 1, 1),
                Conv2d::zeros(c1, c2, 3, 1, 1),
                Conv2d::zeros(c2, c2, 3, 1, 1),
                Conv2d::zeros(c2, c3, 3, 1, 1),
                Conv2d::zeros(c3, c3, 3, 1, 1),
                Conv2d::zeros(c1 + c2 + c3, c_in, 1, 1, 0),
            ],
        }
    }

    /// Standard 256 / 128 / 64 layout, all zero.
    pub fn zeros() -> Self {
        Self::zeros_with_widths(256, [256, 128, 64])
    }

    pub fn random_with_widths(c_in: usize, widths: [usize; 3], seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let zero = Self::zeros_with_widths(c_in, widths);
        Self {
            layers: zero
                .layers
                .map(|l| Conv2d::random(l.in_channels, l.out_channels, l.kernel, l.padding, &mut rng)),
        }
    }

    pub fn random(seed: u64) -> Self {
        Self::random_with_widths(256, [256, 128, 64], seed)
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    /// Checks per-layer sizes, the conv chain and that the fusion layer takes
    /// exactly the concatenated branch outputs.
    pub fn validate(&self) -> Result<()> {
        for (layer, name) in self.layers.iter().zip(RECOVERY_LAYERS) {
            layer.check(name)?;
        }
        let l = &self.layers;
        for i in 0..5 {
            if l[i].out_channels != l[i + 1].in_channels {
                return Err(Error::Shape(format!(
                    "{} outputs {} channels but {} expects {}",
                    RECOVERY_LAYERS[i],
                    l[i].out_channels,
                    RECOVERY_LAYERS[i + 1],
                    l[i + 1].in_channels
                )));
            }
        }
        let branches = l[1].out_channels + l[3].out_channels + l[5].out_channels;
        if l[6].in_channels != branches {
            return Err(Error::Shape(format!(
                "conv_fuse expects {} channels but branches concatenate to {} = {} + {} + {}",
                l[6].in_channels, branches, l[1].out_channels, l[3].out_channels, l[5].out_channels
            )));
        }
        Ok(())
    }
}

pub fn recovery_forward(f: &FeatureTensor, weights: &RecoveryNetWeights) -> Result<FeatureTensor> {
    weights.validate()?;
    if f.shape[1] != weights.input_channels() {
        return Err(Error::Shape(format!(
            "recovery network expects {} channels, got {}",
            weights.input_channels(),
            f.shape[1]
        )));
    }
    let l = &weights.layers;
    let a1 = l[0].forward_relu(f)?;
    let b1 = l[1].forward_relu(&a1)?;
    let a2 = l[2].forward_relu(&b1)?;
    let b2 = l[3].forward_relu(&a2)?;
    let a3 = l[4].forward_relu(&b2)?;
    let b3 = l[5].forward_relu(&a3)?;
    let fused = FeatureTensor::concat_channels(&[&b1, &b2, &b3])?;
    l[6].forward_relu(&fused)
}

/// How restoration features and detector features are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `[F, phi(I)]`.
    Concat,
    /// `[F, tau(phi(I))]`.
    RecoveryConcat,
    /// `MAFus(F, tau(phi(I)))`.
    Mafus,
}

pub fn fuse(
    mode: FusionMode,
    f: &FeatureTensor,
    detector_features: &FeatureTensor,
    recovery: &RecoveryNetWeights,
    mafus: &MAFusWeights,
) -> Result<FeatureTensor> {
    match mode {
        FusionMode::Concat => FeatureTensor::concat_channels(&[f, detector_features]),
        FusionMode::RecoveryConcat => {
            FeatureTensor::concat_channels(&[f, &recovery_forward(detector_features, recovery)?])
        }
        FusionMode::Mafus => mafus_forward(f, &recovery_forward(detector_features, recovery)?, mafus),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_det: f64,
    pub lambda_pep: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_det: 0.1,
            lambda_pep: 10.0,
        }
    }
}

impl LossWeights {
    pub fn total(&self, pix: f64, det: f64, cons: f64, pep: f64) -> f64 {
        pix + self.lambda_det * det + cons + self.lambda_pep * pep
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub pix: f64,
    pub det: f64,
    pub pep: f64,
    pub cons: f64,
    pub total: f64,
}

fn mean_abs(a: &FeatureTensor, b: &FeatureTensor, what: &str) -> Result<f64> {
    a.same_shape(b, what)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64)
}

fn mse(a: &FeatureTensor, b: &FeatureTensor, what: &str) -> Result<f64> {
    a.same_shape(b, what)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64)
}

/// Pixel L1, heatmap MSE, perceptual MSE `(f*, f_hat)` and consistency MSE
/// `(f*, T)`, all mean-reduced.
#[allow(clippy::too_many_arguments)]
pub fn losses(
    restored: &FeatureTensor,
    clean: &FeatureTensor,
    heatmap_pred: &FeatureTensor,
    heatmap_gt: &FeatureTensor,
    feat_pred: &FeatureTensor,
    feat_clean: &FeatureTensor,
    recovered: &FeatureTensor,
    weights: &LossWeights,
) -> Result<Losses> {
    let pix = mean_abs(clean, restored, "pixel loss")?;
    let det = mse(heatmap_pred, heatmap_gt, "heatmap loss")?;
    let pep = mse(feat_clean, feat_pred, "perceptual loss")?;
    let cons = mse(feat_clean, recovered, "consistency loss")?;
    Ok(Losses {
        pix,
        det,
        pep,
        cons,
        total: weights.total(pix, det, cons, pep),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoreHeader {
    tensors: Vec<TensorEntry>,
}

const DTYPE: &str = "f32le";

/// Named tensors in the binary weight container: `u64` LE header length, a
/// JSON header, then little-endian `f32` data.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl TensorStore {
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, values: &[f64]) {
        self.tensors
            .insert(name.into(), (shape, values.iter().map(|v| *v as f32).collect()));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], Vec<f64>)> {
        let (shape, values) = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("weight container has no tensor '{name}'")))?;
        Ok((shape, values.iter().map(|v| f64::from(*v)).collect()))
    }

    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, (shape, values))| {
                let entry = TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    dtype: DTYPE.into(),
                    offset,
                    length: values.len(),
                };
                offset += values.len() * 4;
                entry
            })
            .collect();
        let header = serde_json::to_vec(&StoreHeader { tensors }).map_err(std::io::Error::other)?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        for (_, values) in self.tensors.values() {
            for v in values {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let fmt = |m: String| Error::Format(m);
        let mut len = [0u8; 8];
        input
            .read_exact(&mut len)
            .map_err(|e| fmt(format!("weight header: {e}")))?;
        let len = usize::try_from(u64::from_le_bytes(len)).map_err(|e| fmt(e.to_string()))?;
        if len > 1 << 26 {
            return Err(fmt(format!("implausible header length {len}")));
        }
        let mut header = vec![0u8; len];
        input
            .read_exact(&mut header)
            .map_err(|e| fmt(format!("weight header: {e}")))?;
        let header: StoreHeader = serde_json::from_slice(&header).map_err(|e| fmt(format!("weight header: {e}")))?;
        let mut body = Vec::new();
        input
            .read_to_end(&mut body)
            .map_err(|e| fmt(format!("weight data: {e}")))?;
        let mut tensors = BTreeMap::new();
        for t in header.tensors {
            if t.dtype != DTYPE {
                return Err(fmt(format!("tensor '{}' has unsupported dtype {}", t.name, t.dtype)));
            }
            if t.shape.iter().product::<usize>() != t.length {
                return Err(fmt(format!(
                    "tensor '{}' shape {:?} disagrees with length {}",
                    t.name, t.shape, t.length
                )));
            }
            let bytes = body
                .get(t.offset..t.offset + t.length * 4)
                .ok_or_else(|| fmt(format!("tensor '{}' runs past the end of the file", t.name)))?;
            let values = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.insert(t.name, (t.shape, values));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }

    fn matrix(&self, name: &str) -> Result<Matrix> {
        let (shape, values) = self.get(name)?;
        match shape {
            [r, c] => Matrix::new(*r, *c, values),
            _ => Err(Error::Format(format!("tensor '{name}' must be 2-D, got {shape:?}"))),
        }
    }

    fn pair(&self, name: &str) -> Result<[f64; 2]> {
        let (_, v) = self.get(name)?;
        v.try_into()
            .map_err(|_| Error::Format(format!("tensor '{name}' must hold 2 values")))
    }
}

impl MAFusWeights {
    pub fn to_store(&self) -> TensorStore {
        let mut s = TensorStore::default();
        for (prefix, sw) in [("f", &self.f), ("t", &self.t)] {
            for (name, m) in [("theta", &sw.theta), ("phi", &sw.phi), ("g", &sw.g), ("z", &sw.z)] {
                s.insert(format!("{prefix}.{name}"), vec![m.rows, m.cols], &m.data);
            }
        }
        let g = &self.gamma;
        s.insert("gamma.weight", vec![g.weight.rows, g.weight.cols], &g.weight.data);
        for (name, v) in [
            ("bias", g.bias),
            ("bn_scale", g.bn_scale),
            ("bn_shift", g.bn_shift),
            ("bn_mean", g.bn_mean),
            ("bn_var", g.bn_var),
        ] {
            s.insert(format!("gamma.{name}"), vec![2], &v);
        }
        s.insert("gamma.bn_eps", vec![1], &[g.bn_eps]);
        s
    }

    pub fn from_store(s: &TensorStore) -> Result<Self> {
        let stream = |p: &str| -> Result<StreamWeights> {
            Ok(StreamWeights {
                theta: s.matrix(&format!("{p}.theta"))?,
                phi: s.matrix(&format!("{p}.phi"))?,
                g: s.matrix(&format!("{p}.g"))?,
                z: s.matrix(&format!("{p}.z"))?,
            })
        };
        let weights = Self {
            f: stream("f")?,
            t: stream("t")?,
            gamma: GammaPredictor {
                weight: s.matrix("gamma.weight")?,
                bias: s.pair("gamma.bias")?,
                bn_scale: s.pair("gamma.bn_scale")?,
                bn_shift: s.pair("gamma.bn_shift")?,
                bn_mean: s.pair("gamma.bn_mean")?,
                bn_var: s.pair("gamma.bn_var")?,
                bn_eps: s.get("gamma.bn_eps")?.1.first().copied().unwrap_or(1e-5),
            },
        };
        weights.validate(weights.f.theta.rows, weights.t.theta.rows)?;
        Ok(weights)
    }
}

impl RecoveryNetWeights {
    pub fn to_store(&self) -> TensorStore {
        let mut s = TensorStore::default();
        for (l, name) in self.layers.iter().zip(RECOVERY_LAYERS) {
            s.insert(
                format!("{name}.weight"),
                vec![l.out_channels, l.in_channels, l.kernel, l.kernel],
                &l.weight,
            );
            s.insert(format!("{name}.bias"), vec![l.out_channels], &l.bias);
            s.insert(
                format!("{name}.geometry"),
                vec![2],
                &[l.stride as f64, l.padding as f64],
            );
        }
        s
    }

    pub fn from_store(s: &TensorStore) -> Result<Self> {
        let layer = |name: &str| -> Result<Conv2d> {
            let (shape, weight) = s.get(&format!("{name}.weight"))?;
            let [o, i, k, k2] = shape else {
                return Err(Error::Format(format!("{name}.weight must be 4-D")));
            };
            if k != k2 {
                return Err(Error::Format(format!("{name}: only square kernels are supported")));
            }
            let (o, i, k) = (*o, *i, *k);
            let [stride, padding] = s.pair(&format!("{name}.geometry"))?;
            Ok(Conv2d {
                in_channels: i,
                out_channels: o,
                kernel: k,
                stride: stride as usize,
                padding: padding as usize,
                weight,
                bias: s.get(&format!("{name}.bias"))?.1,
            })
        };
        let layers = [
            layer(RECOVERY_LAYERS[0])?,
            layer(RECOVERY_LAYERS[1])?,
            layer(RECOVERY_LAYERS[2])?,
            layer(RECOVERY_LAYERS[3])?,
            layer(RECOVERY_LAYERS[4])?,
            layer(RECOVERY_LAYERS[5])?,
            layer(RECOVERY_LAYERS[6])?,
        ];
        let weights = Self { layers };
        weights.validate()?;
        Ok(weights)
    }
}
