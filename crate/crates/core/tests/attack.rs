//! Projection and bookkeeping of the attack loop under arbitrary budgets.

use std::cell::Cell;

use proptest::prelude::*;
use rand::Rng;
use shadowbench::adv_attack::{attack, attack_with_observer, AttackConfig, DetectorOracle, OracleOutput, SceneRef};
use shadowbench::fixtures::synthetic_face;
use shadowbench::metrics::{nme, Landmarks};
use shadowbench::rng::{rng_from_seed, BenchRng};
use shadowbench::shadow_synth::{BetaMap, MatteConfig};
use shadowbench::{Error, Image};
use std::sync::Mutex;

/// Returns large random gradients and a random loss on every call.
struct Noise(Mutex<BenchRng>);

impl DetectorOracle for Noise {
    fn evaluate(&self, image: &Image, _: &Landmarks) -> Result<OracleOutput, String> {
        let mut rng = self.0.lock().unwrap();
        let gradient = (0..image.data().len()).map(|_| rng.random_range(-1e3..1e3)).collect();
        Ok(OracleOutput {
            landmarks: None,
            loss: rng.random_range(0.0..10.0),
            gradient,
        })
    }
}

/// Fails on its n-th call.
struct Flaky(Cell<usize>);

impl DetectorOracle for Flaky {
    fn evaluate(&self, image: &Image, _: &Landmarks) -> Result<OracleOutput, String> {
        let n = self.0.get();
        self.0.set(n + 1);
        if n == 3 {
            return Err("detector crashed".into());
        }
        Ok(OracleOutput {
            landmarks: None,
            loss: 1.0,
            gradient: vec![1.0; image.data().len()],
        })
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_iterate_respects_the_budget(
        seed in any::<u64>(),
        eps_alpha in 0.0f64..1.0,
        eps_theta in 0.0f64..1.0,
        eps_mask in 0.0f64..0.5,
        alpha_init in 0.0f64..0.999,
        steps in (0.0f64..0.5, 0.0f64..0.5, 0.0f64..0.5),
    ) {
        let face = synthetic_face(seed, 0, 16).unwrap();
        let cfg = AttackConfig {
            step_alpha: steps.0, step_theta: steps.1, step_mask: steps.2,
            eps_alpha, eps_theta, eps_mask, alpha_init, iterations: 6,
            ..AttackConfig::default()
        };
        let scene = SceneRef { clean: &face.image, depth: &face.depth, truth: &face.landmarks, beta: BetaMap::default(), matte: MatteConfig::default() };
        let oracle = Noise(Mutex::new(rng_from_seed(seed)));
        let mut seen = 0;
        let mut ok = true;
        let res = attack_with_observer(&scene, &oracle, &cfg, &face.mask, |s| { seen += 1; ok &= s.satisfies(&cfg); }).unwrap();
        prop_assert!(ok);
        prop_assert_eq!(seen, 7);
        prop_assert_eq!(res.trace.len(), 7);
        let best = res.trace.iter().map(|t| t.loss).fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(res.best_loss(), best);
        prop_assert_eq!(res.trace.iter().position(|t| t.loss == best), Some(res.best_iteration));
        prop_assert!(res.state.satisfies(&cfg));
    }
}

#[test]
fn oracle_failures_carry_the_iteration() {
    let face = synthetic_face(1, 0, 16).unwrap();
    let scene = SceneRef {
        clean: &face.image,
        depth: &face.depth,
        truth: &face.landmarks,
        beta: BetaMap::default(),
        matte: MatteConfig::default(),
    };
    match attack(&scene, &Flaky(Cell::new(0)), &AttackConfig::default(), &face.mask) {
        Err(Error::Oracle { iteration, message }) => {
            assert_eq!(iteration, 3);
            assert!(message.contains("crashed"));
        }
        other => panic!("expected oracle error, got {:?}", other.map(|r| r.best_iteration)),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let face = synthetic_face(1, 0, 16).unwrap();
    let scene = SceneRef {
        clean: &face.image,
        depth: &face.depth,
        truth: &face.landmarks,
        beta: BetaMap::default(),
        matte: MatteConfig::default(),
    };
    for cfg in [
        AttackConfig {
            eps_mask: -0.1,
            ..AttackConfig::default()
        },
        AttackConfig {
            step_theta: f64::NAN,
            ..AttackConfig::default()
        },
    ] {
        assert!(cfg.validate().is_err());
        assert!(attack(&scene, &Flaky(Cell::new(100)), &cfg, &face.mask).is_err());
    }
}

#[test]
fn nme_is_translation_invariant() {
    let gt = synthetic_face(2, 1, 64).unwrap().landmarks;
    let pred = gt.map(|[x, y]| [x + 1.5, y - 0.5]);
    let moved = |l: &Landmarks| l.map(|[x, y]| [x - 20.0, y + 7.0]);
    assert!((nme(&pred, &gt).unwrap() - nme(&moved(&pred), &moved(&gt)).unwrap()).abs() < 1e-12);
}
