//! Finite-difference checks of every analytic derivative. Each returns the
//! number of instances verified or a description of the first mismatch.

use super::*;
use shadowbench::adv_attack::{
    affine_warp, evaluate_state, warp_gradients, AffineParams, AttackState, DetectorOracle, SceneRef, ToyDetector,
};
use shadowbench::metrics::Landmarks;
use shadowbench::rng::rng_from_seed;
use shadowbench::shadow_synth::{synthetic_face_depth, BetaMap, MatteConfig, ShadowForward};

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

pub type Checked = Result<usize, String>;

pub fn perturbed_field(base: &ScalarField, dir: &[f64], h: f64) -> ScalarField {
    let (rows, cols) = base.dims();
    let data = base.data().iter().zip(dir).map(|(v, d)| v + h * d).collect();
    ScalarField::new(rows, cols, base.role(), data).unwrap()
}

fn dims(rng: &mut BenchRng) -> (usize, usize) {
    (rng.random_range(8..=16), rng.random_range(8..=16))
}

pub fn alpha_derivative(seed: u64, count: usize) -> Checked {
    let mut rng = rng_from_seed(seed);
    let step = 1e-4;
    for _ in 0..count {
        let (h, w) = dims(&mut rng);
        let clean = random_image(h, w, &mut rng);
        let mask = soft_mask(h, w, &mut rng);
        let depth = synthetic_face_depth(h, w).unwrap();
        let alpha = rng.random_range(0.1..0.9);
        let beta = BetaMap {
            slope: [0.05, 0.02, 0.0],
            intercept: [0.01, 0.0, 0.02],
        };
        let cfg = MatteConfig::default();
        let run = |a: f64| ShadowForward::run(&clean, &mask, &depth, a, &beta, &cfg).unwrap();
        let (fwd, up, down) = (run(alpha), run(alpha + step), run(alpha - step));
        for (i, a) in fwd.d_alpha().iter().enumerate() {
            let v = fwd.image().data()[i];
            if v <= 0.0 || v >= 1.0 {
                continue;
            }
            let fd = (up.image().data()[i] - down.image().data()[i]) / (2.0 * step);
            ensure!(
                rel_err(*a, fd) < 1e-4 || (a - fd).abs() < 1e-10,
                "dI/dalpha {a} vs {fd}"
            );
        }
    }
    Ok(count)
}

/// Directional check of the mask VJP, which runs through the blur adjoint.
pub fn mask_vjp(seed: u64, count: usize) -> Checked {
    let mut rng = rng_from_seed(seed);
    let step = 1e-6;
    for _ in 0..count {
        let (h, w) = dims(&mut rng);
        let clean = random_image(h, w, &mut rng);
        let mask = soft_mask(h, w, &mut rng);
        let depth = synthetic_face_depth(h, w).unwrap();
        let alpha = rng.random_range(0.0..0.9);
        let (cfg, beta) = (MatteConfig::default(), BetaMap::default());
        let upstream = random_vec(h * w * 3, &mut rng);
        let dir = random_vec(h * w, &mut rng);
        let fwd = ShadowForward::run(&clean, &mask, &depth, alpha, &beta, &cfg).unwrap();
        let (d_alpha, d_mask) = fwd.vjp(&upstream).unwrap();
        let j = |m: &ScalarField, a: f64| {
            dot(
                ShadowForward::run(&clean, m, &depth, a, &beta, &cfg)
                    .unwrap()
                    .image()
                    .data(),
                &upstream,
            )
        };
        let fd = (j(&perturbed_field(&mask, &dir, step), alpha) - j(&perturbed_field(&mask, &dir, -step), alpha))
            / (2.0 * step);
        ensure!(
            rel_err(dot(&d_mask, &dir), fd) < 1e-4,
            "dI/dM {} vs {fd}",
            dot(&d_mask, &dir)
        );
        let fd = (j(&mask, alpha + 1e-4) - j(&mask, alpha - 1e-4)) / 2e-4;
        ensure!(rel_err(d_alpha, fd) < 1e-4, "alpha VJP {d_alpha} vs {fd}");
    }
    Ok(count)
}

/// With no blur and no depth modulation the matte is the mask, which exposes dI/drho.
pub fn rho_derivative(seed: u64, count: usize) -> Checked {
    let mut rng = rng_from_seed(seed);
    let cfg = MatteConfig {
        sigma_min: 0.0,
        sigma_max: 0.0,
        scatter_spread: [1.0; 3],
        depth_gain: 0.0,
    };
    let step = 1e-4;
    for _ in 0..count {
        let (h, w) = dims(&mut rng);
        let clean = random_image(h, w, &mut rng);
        let mask = soft_mask(h, w, &mut rng);
        let depth = ScalarField::filled(h, w, FieldRole::Depth, 1.0).unwrap();
        let alpha = rng.random_range(0.0..0.9);
        let beta = BetaMap {
            slope: [0.1, 0.0, 0.05],
            intercept: [0.0, 0.03, 0.0],
        };
        let run = |m: &ScalarField| ShadowForward::run(&clean, m, &depth, alpha, &beta, &cfg).unwrap();
        let d_rho = run(&mask).d_rho();
        let p = rng.random_range(0..h * w);
        let mut e = vec![0.0; h * w];
        e[p] = 1.0;
        let (up, dn) = (
            run(&perturbed_field(&mask, &e, step)),
            run(&perturbed_field(&mask, &e, -step)),
        );
        for c in 0..3 {
            let i = p * 3 + c;
            let fd = (up.image().data()[i] - dn.image().data()[i]) / (2.0 * step);
            ensure!(rel_err(d_rho[i], fd) < 1e-4, "dI/drho {} vs {fd}", d_rho[i]);
        }
    }
    Ok(count)
}

/// Whether any bilinear sample could cross a grid line when theta moves by `step`.
pub fn near_kink(mask: &ScalarField, theta: &AffineParams, step: f64) -> bool {
    let (h, w) = mask.dims();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (wf, hf) = (w as f64, h as f64);
    let t = theta.0;
    let reach_x = step * (cx.max(1.0) * (1.0 + wf / hf) + wf / 2.0) * 1.01;
    let reach_y = step * (cy.max(1.0) * (1.0 + hf / wf) + hf / 2.0) * 1.01;
    (0..h).any(|y| {
        (0..w).any(|x| {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = cx + t[0] * dx + t[1] * (wf / hf) * dy + t[2] * wf / 2.0;
            let sy = cy + t[3] * (hf / wf) * dx + t[4] * dy + t[5] * hf / 2.0;
            let gap = |s: f64| (s - s.round()).abs();
            gap(sx) < reach_x || gap(sy) < reach_y
        })
    })
}

pub fn random_theta(rng: &mut BenchRng) -> AffineParams {
    let mut t = AffineParams::IDENTITY;
    for v in t.0.iter_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    t
}

/// Bilinear warp derivatives in theta and in the mask. Instances where the
/// FD step would straddle a bilinear kink are redrawn.
pub fn warp(seed: u64, count: usize) -> Checked {
    let mut rng = rng_from_seed(seed);
    let step = 1e-6;
    let mut checked = 0;
    while checked < count {
        let (h, w) = dims(&mut rng);
        let mask = random_field(h, w, FieldRole::Mask, &mut rng);
        let theta = random_theta(&mut rng);
        if near_kink(&mask, &theta, step) {
            continue;
        }
        let upstream = random_vec(h * w, &mut rng);
        let (d_theta, d_mask) = warp_gradients(&mask, &theta, &upstream).unwrap();
        let j = |m: &ScalarField, t: &AffineParams| dot(affine_warp(m, t).data(), &upstream);
        for (k, dk) in d_theta.iter().enumerate() {
            let (mut tp, mut tm) = (theta, theta);
            tp.0[k] += step;
            tm.0[k] -= step;
            let fd = (j(&mask, &tp) - j(&mask, &tm)) / (2.0 * step);
            ensure!(rel_err(*dk, fd) < 1e-4, "dW/dtheta[{k}] {dk} vs {fd}");
        }
        let dir = random_vec(h * w, &mut rng);
        let mid = ScalarField::from_fn(h, w, FieldRole::Mask, |y, x| 0.25 + 0.5 * mask.get(y, x)).unwrap();
        let fd =
            (j(&perturbed_field(&mid, &dir, 1e-3), &theta) - j(&perturbed_field(&mid, &dir, -1e-3), &theta)) / 2e-3;
        ensure!(
            rel_err(dot(&d_mask, &dir), fd) < 1e-4,
            "dW/dM {} vs {fd}",
            dot(&d_mask, &dir)
        );
        checked += 1;
    }
    Ok(checked)
}

pub fn random_landmarks(rng: &mut BenchRng, h: usize, w: usize) -> Landmarks {
    Landmarks::new(
        (0..68)
            .map(|_| [rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)])
            .collect(),
    )
    .unwrap()
}

pub fn toy_gradient(seed: u64, count: usize) -> Checked {
    let mut rng = rng_from_seed(seed);
    let det = ToyDetector::new(seed);
    for _ in 0..count {
        let (h, w) = dims(&mut rng);
        let img = random_image(h, w, &mut rng);
        let truth = random_landmarks(&mut rng, h, w);
        let out = det.evaluate(&img, &truth).unwrap();
        let dir = random_vec(h * w * 3, &mut rng);
        let shifted = |s: f64| Image::new(h, w, img.data().iter().zip(&dir).map(|(v, d)| v + s * d).collect()).unwrap();
        let fd = (det.loss(&shifted(1e-3), &truth) - det.loss(&shifted(-1e-3), &truth)) / 2e-3;
        ensure!(
            rel_err(dot(&out.gradient, &dir), fd) < 1e-5,
            "toy gradient {} vs {fd}",
            dot(&out.gradient, &dir)
        );
    }
    Ok(count)
}

/// Gradient of the toy-detector loss with respect to alpha, theta and the mask,
/// through warp, matte, composite and detector. With `margin_check` instances
/// whose warped mask sits on the 0.5 threshold (where the blur width jumps)
/// are redrawn.
pub fn chain_rule(cfg: MatteConfig, seed: u64, count: usize, margin_check: bool) -> Checked {
    let mut rng = rng_from_seed(seed);
    let det = ToyDetector::new(seed);
    let step = 1e-6;
    let (mut checked, mut tries) = (0, 0);
    while checked < count && tries < 40 * count {
        tries += 1;
        let (h, w) = (16, 16);
        let clean = random_image(h, w, &mut rng);
        let depth = synthetic_face_depth(h, w).unwrap();
        let mask = soft_mask(h, w, &mut rng);
        let truth = random_landmarks(&mut rng, h, w);
        let mut state = AttackState::new(mask.clone(), rng.random_range(0.2..0.8));
        state.theta = random_theta(&mut rng);
        if near_kink(&mask, &state.theta, step) {
            continue;
        }
        if margin_check
            && affine_warp(&state.mask, &state.theta)
                .data()
                .iter()
                .any(|v| (v - 0.5).abs() < 1e-3)
        {
            continue;
        }
        let scene = SceneRef {
            clean: &clean,
            depth: &depth,
            truth: &truth,
            beta: BetaMap::default(),
            matte: cfg,
        };
        let eval = evaluate_state(&scene, &state, &det).unwrap();
        let loss = |s: &AttackState| evaluate_state(&scene, s, &det).unwrap().loss;

        let (mut up, mut dn) = (state.clone(), state.clone());
        up.alpha += 1e-5;
        dn.alpha -= 1e-5;
        let fd = (loss(&up) - loss(&dn)) / 2e-5;
        ensure!(rel_err(eval.d_alpha, fd) < 1e-3, "dJ/dalpha {} vs {fd}", eval.d_alpha);
        for k in 0..6 {
            let (mut up, mut dn) = (state.clone(), state.clone());
            up.theta.0[k] += step;
            dn.theta.0[k] -= step;
            let fd = (loss(&up) - loss(&dn)) / (2.0 * step);
            ensure!(
                rel_err(eval.d_theta[k], fd) < 1e-3,
                "dJ/dtheta[{k}] {} vs {fd}",
                eval.d_theta[k]
            );
        }
        let dir = random_vec(h * w, &mut rng);
        let (mut up, mut dn) = (state.clone(), state.clone());
        up.mask = perturbed_field(&state.mask, &dir, step);
        dn.mask = perturbed_field(&state.mask, &dir, -step);
        let fd = (loss(&up) - loss(&dn)) / (2.0 * step);
        ensure!(
            rel_err(dot(&eval.d_mask, &dir), fd) < 1e-3,
            "dJ/dM {} vs {fd}",
            dot(&eval.d_mask, &dir)
        );
        checked += 1;
    }
    ensure!(checked == count, "only {checked} of {count} chain-rule instances drawn");
    Ok(checked)
}
