//! Procedural faces for exercising the attack without real photographs.

use rand::Rng;

use crate::adv_attack::mean_face_template;
use crate::error::Result;
use crate::factor_bench::{fit_area, starter_silhouettes};
use crate::imaging::{Image, ScalarField};
use crate::metrics::Landmarks;
use crate::rng::{rng_from_seed, sub_seed};
use crate::shadow_synth::face_depth_at;

/// One synthetic face with its geometric landmarks, depth map and an initial
/// shadow mask.
#[derive(Debug, Clone)]
pub struct FaceFixture {
    pub image: Image,
    pub depth: ScalarField,
    pub landmarks: Landmarks,
    pub mask: ScalarField,
    pub mask_id: String,
}

fn ellipse(px: f64, py: f64, c: [f64; 2], r: [f64; 2]) -> f64 {
    ((px - c[0]) / r[0]).powi(2) + ((py - c[1]) / r[1]).powi(2)
}

fn mean_of(pts: &[[f64; 2]]) -> [f64; 2] {
    let n = pts.len() as f64;
    let (x, y) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    [x / n, y / n]
}

/// Face `index` of the fixture family identified by `seed`, rendered at
/// `size x size`. The initial mask covers 20-35% of the canvas near the centre.
pub fn synthetic_face(seed: u64, index: u64, size: usize) -> Result<FaceFixture> {
    let mut rng = rng_from_seed(sub_seed(seed, index));
    let s = size as f64;
    let scale = rng.random_range(0.9..1.05);
    let shift = [rng.random_range(-0.04..0.04), rng.random_range(-0.04..0.04)];
    let skin = {
        let tone: f64 = rng.random_range(0.35..0.9);
        [
            tone,
            tone * rng.random_range(0.72..0.85),
            tone * rng.random_range(0.55..0.72),
        ]
    };
    let background: [f64; 3] = [rng.random(), rng.random(), rng.random()];

    let to_px = |p: [f64; 2]| {
        [
            (0.5 + (p[0] - 0.5) * scale + shift[0]) * s,
            (0.5 + (p[1] - 0.5) * scale + shift[1]) * s,
        ]
    };
    let template: Vec<[f64; 2]> = mean_face_template().into_iter().map(to_px).collect();
    let centre = to_px([0.5, 0.5]);
    let radii = [0.36 * s * scale, 0.46 * s * scale];
    let eyes = [mean_of(&template[36..42]), mean_of(&template[42..48])];
    let mouth = mean_of(&template[48..60]);
    let eye_r = [0.06 * s * scale, 0.03 * s * scale];
    let mouth_r = [0.13 * s * scale, 0.045 * s * scale];

    let image = Image::from_fn(size, size, |y, x| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        if ellipse(px, py, centre, radii) > 1.0 {
            return background;
        }
        let shade = 0.75 + 0.25 * face_depth_at(px, py, size, size);
        let mut rgb = skin.map(|c| c * shade);
        if eyes.iter().any(|e| ellipse(px, py, *e, eye_r) <= 1.0) {
            rgb = [0.12, 0.1, 0.1];
        } else if ellipse(px, py, mouth, mouth_r) <= 1.0 {
            rgb = [0.6 * shade, 0.2 * shade, 0.22 * shade];
        } else if template[17..27]
            .iter()
            .any(|b| ellipse(px, py, *b, [0.03 * s, 0.015 * s]) <= 1.0)
        {
            rgb = [0.2, 0.15, 0.1];
        }
        rgb
    })?;
    let depth = ScalarField::from_fn(size, size, crate::imaging::FieldRole::Depth, |y, x| {
        face_depth_at(x as f64 + 0.5, y as f64 + 0.5, size, size)
    })?;

    let shapes = starter_silhouettes();
    let (mask_id, shape) = &shapes[index as usize % shapes.len()];
    let anchor = (s * rng.random_range(0.35..0.65), s * rng.random_range(0.35..0.65));
    let placed = fit_area(shape, rng.random_range(0.2..0.35), anchor, (size, size))?;

    Ok(FaceFixture {
        image,
        depth,
        landmarks: Landmarks::new(template)?,
        mask: placed.mask,
        mask_id: mask_id.clone(),
    })
}
