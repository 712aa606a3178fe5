#![allow(dead_code)]

pub mod gradcheck;

use rand::Rng;
use shadowbench::imaging::FieldRole;
use shadowbench::rng::BenchRng;
use shadowbench::{Image, ScalarField};

/// Relative error with a floor so vanishing derivatives compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn random_image(h: usize, w: usize, rng: &mut BenchRng) -> Image {
    Image::from_fn(h, w, |_, _| {
        [
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
        ]
    })
    .unwrap()
}

/// Soft mask with no value near the 0.5 threshold, so small perturbations do
/// not move the shadow boundary.
pub fn soft_mask(h: usize, w: usize, rng: &mut BenchRng) -> ScalarField {
    let cy = rng.random_range(0.3..0.7) * h as f64;
    let cx = rng.random_range(0.3..0.7) * w as f64;
    let r = rng.random_range(0.2..0.4) * h.min(w) as f64;
    ScalarField::from_fn(h, w, FieldRole::Mask, |y, x| {
        let inside = (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy) < r;
        if inside {
            rng.random_range(0.65..0.95)
        } else {
            rng.random_range(0.05..0.35)
        }
    })
    .unwrap()
}

pub fn random_field(h: usize, w: usize, role: FieldRole, rng: &mut BenchRng) -> ScalarField {
    ScalarField::from_fn(h, w, role, |_, _| rng.random()).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn random_vec(n: usize, rng: &mut BenchRng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}
