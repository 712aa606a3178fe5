//! Invariants of the shadow composite and its matte.

mod common;

use common::*;
use proptest::prelude::*;
use shadowbench::factor_bench::starter_silhouettes;
use shadowbench::imaging::FieldRole;
use shadowbench::rng::rng_from_seed;
use shadowbench::shadow_synth::*;
use shadowbench::{Image, ScalarField};

fn run(clean: &Image, mask: &ScalarField, depth: &ScalarField, alpha: f64, beta: &BetaMap) -> Image {
    ShadowForward::run(clean, mask, depth, alpha, beta, &MatteConfig::default())
        .unwrap()
        .into_image()
}

#[test]
fn full_mask_flat_depth_closed_form() {
    let mut rng = rng_from_seed(40);
    let clean = random_image(12, 10, &mut rng);
    let mask = ScalarField::filled(12, 10, FieldRole::Mask, 1.0).unwrap();
    let beta = BetaMap {
        slope: [0.1, 0.2, 0.3],
        intercept: [0.05, 0.0, 0.02],
    };
    for (alpha, d) in [(0.3, 1.0), (0.7, 0.4), (0.0, 0.0), (0.999, 0.8)] {
        let depth = ScalarField::filled(12, 10, FieldRole::Depth, d).unwrap();
        let out = run(&clean, &mask, &depth, alpha, &beta);
        let rho = 1.0 - 0.5 * (1.0 - d);
        let b = beta.beta(alpha);
        for (p, px) in clean.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                let expect = ((1.0 - (1.0 - alpha) * rho) * px[c] + alpha * b[c] * rho).clamp(0.0, 1.0);
                assert!((out.data()[p * 3 + c] - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn single_pixel_hand_values() {
    // Full 1x1 mask, depth 1: the matte is exactly 1 and I = alpha * I_clean + alpha * beta.
    let clean = Image::filled(1, 1, [0.5, 0.25, 1.0]).unwrap();
    let one = |role| ScalarField::filled(1, 1, role, 1.0).unwrap();
    let out = run(
        &clean,
        &one(FieldRole::Mask),
        &one(FieldRole::Depth),
        0.4,
        &BetaMap::default(),
    );
    assert_eq!(out.pixel(0, 0).map(|v| (v * 1e12).round() / 1e12), [0.2, 0.1, 0.4]);
    let beta = BetaMap {
        slope: [0.0; 3],
        intercept: [0.5; 3],
    };
    let out = run(&clean, &one(FieldRole::Mask), &one(FieldRole::Depth), 0.4, &beta);
    assert!((out.pixel(0, 0)[0] - 0.4).abs() < 1e-12);
    assert!((out.pixel(0, 0)[2] - 0.6).abs() < 1e-12);
}

#[test]
fn matte_is_bounded_and_smooth_on_the_silhouette_corpus() {
    let cfg = MatteConfig::default();
    let bound = 1.0 / (cfg.sigma_min * (2.0 * std::f64::consts::PI).sqrt());
    let depth = synthetic_face_depth(64, 64).unwrap();
    let flat = ScalarField::filled(64, 64, FieldRole::Depth, 1.0).unwrap();
    let mut worst: f64 = 0.0;
    for (id, shape) in starter_silhouettes() {
        let placed = shadowbench::factor_bench::fit_area(&shape, 0.3, (32.0, 32.0), (64, 64)).unwrap();
        for d in [&depth, &flat] {
            for matte in render_matte_rgb(&placed.mask, d, &cfg).unwrap() {
                assert!(matte.data().iter().all(|v| (0.0..=1.0).contains(v)), "{id}");
                for y in 0..64 {
                    for x in 0..64 {
                        let v = matte.get(y, x);
                        if x + 1 < 64 {
                            worst = worst.max((v - matte.get(y, x + 1)).abs());
                        }
                        if y + 1 < 64 {
                            worst = worst.max((v - matte.get(y + 1, x)).abs());
                        }
                    }
                }
            }
        }
    }
    assert!(worst <= bound, "largest neighbour step {worst} exceeds {bound}");
    assert!(worst > 0.05, "matte unexpectedly flat: {worst}");
}

#[test]
fn sigma_grows_away_from_the_boundary() {
    let mask = ScalarField::from_fn(9, 9, FieldRole::Mask, |y, x| {
        if (2..7).contains(&y) && (2..7).contains(&x) {
            1.0
        } else {
            0.0
        }
    })
    .unwrap();
    let cfg = MatteConfig::default();
    let s = sigma_field(&mask, &cfg);
    assert!(s.iter().all(|v| (cfg.sigma_min..=cfg.sigma_max).contains(v)));
    assert!(s[4 * 9 + 4] > s[2 * 9 + 4]);
    assert!(s[0] > s[9 + 1]);
    let none = sigma_field(&ScalarField::filled(5, 5, FieldRole::Mask, 0.0).unwrap(), &cfg);
    assert!(none.iter().all(|v| *v == cfg.sigma_max));
}

#[test]
fn invalid_matte_configs_are_rejected() {
    let bad = [
        MatteConfig {
            sigma_min: 2.0,
            sigma_max: 1.0,
            ..MatteConfig::default()
        },
        MatteConfig {
            scatter_spread: [1.0, 1.1, 1.2],
            ..MatteConfig::default()
        },
        MatteConfig {
            depth_gain: -0.1,
            ..MatteConfig::default()
        },
    ];
    let one = ScalarField::filled(2, 2, FieldRole::Mask, 1.0).unwrap();
    for cfg in bad {
        assert!(cfg.validate().is_err());
        assert!(render_matte_rgb(&one, &one, &cfg).is_err());
    }
}

fn instance(seed: u64) -> (Image, ScalarField, ScalarField) {
    let mut rng = rng_from_seed(seed);
    let (h, w) = (10, 12);
    (
        random_image(h, w, &mut rng),
        random_field(h, w, FieldRole::Mask, &mut rng),
        random_field(h, w, FieldRole::Depth, &mut rng),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn empty_mask_is_exact_identity(seed in any::<u64>(), alpha in 0.0f64..1.0, slope in 0.0f64..1.0) {
        let (clean, _, depth) = instance(seed);
        let empty = ScalarField::filled(10, 12, FieldRole::Mask, 0.0).unwrap();
        let beta = BetaMap { slope: [slope; 3], intercept: [0.1; 3] };
        prop_assert_eq!(run(&clean, &empty, &depth, alpha, &beta), clean);
    }

    #[test]
    fn brighter_with_alpha(seed in any::<u64>(), a in 0.0f64..0.999, b in 0.0f64..0.999) {
        let (clean, mask, depth) = instance(seed);
        let (lo, hi) = (a.min(b), a.max(b));
        let dark = run(&clean, &mask, &depth, lo, &BetaMap::default());
        let light = run(&clean, &mask, &depth, hi, &BetaMap::default());
        for ((d, l), c) in dark.data().iter().zip(light.data()).zip(clean.data()) {
            prop_assert!(d <= l);
            prop_assert!(*l <= *c + 1e-15);
        }
    }

    #[test]
    fn linear_in_the_clean_image(seed in any::<u64>(), alpha in 0.0f64..0.999, k in 0.0f64..1.0) {
        let (clean, mask, depth) = instance(seed);
        let scaled = Image::new(10, 12, clean.data().iter().map(|v| v * k).collect()).unwrap();
        let a = run(&clean, &mask, &depth, alpha, &BetaMap::default());
        let b = run(&scaled, &mask, &depth, alpha, &BetaMap::default());
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x * k - y).abs() < 1e-12);
        }
    }

    #[test]
    fn output_stays_in_range(seed in any::<u64>(), alpha in -1.0f64..2.0, slope in -3.0f64..3.0, intercept in -1.0f64..2.0) {
        let (clean, mask, depth) = instance(seed);
        let beta = BetaMap { slope: [slope; 3], intercept: [intercept; 3] };
        let out = run(&clean, &mask, &depth, alpha, &beta);
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn blur_adjoint_identity(seed in any::<u64>(), scale in 0.5f64..2.0) {
        let mut rng = rng_from_seed(seed);
        let mask = random_field(9, 11, FieldRole::Mask, &mut rng);
        let sigma = sigma_field(&mask, &MatteConfig::default());
        let (x, y) = (random_vec(99, &mut rng), random_vec(99, &mut rng));
        let lhs = dot(&varying_blur(&x, &sigma, scale, 9, 11), &y);
        let rhs = dot(&x, &varying_blur_adjoint(&y, &sigma, scale, 9, 11));
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn alpha_is_clamped_into_its_domain(alpha in proptest::num::f64::ANY) {
        let a = clamp_alpha(alpha);
        prop_assert!((0.0..=ALPHA_MAX).contains(&a));
    }
}
