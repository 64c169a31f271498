// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::OnceLock;

use proptest::prelude::*;

use steerlab::game::{self, Factor, Level};
use steerlab::model::{
    build_model, CapturePosition, InjectionSpec, LanguageModel, ModelConfig, PositionScope,
    ToyTransformer,
};
use steerlab::runner::{run_baseline, run_trials, RunStore};
use steerlab::stats::{fit_logistic, log_likelihood, score, DesignMatrix, INTERCEPT};
use steerlab::steering::{extract_default_iv, extract_iv_vector, partial_vector};
use steerlab::vecspace::{self, Vector};

fn small_model() -> &'static ToyTransformer {
    static M: OnceLock<ToyTransformer> = OnceLock::new();
    M.get_or_init(|| {
        build_model(ModelConfig {
            num_layers: 3,
            hidden_dim: 16,
            ..ModelConfig::default()
        })
        .unwrap()
    })
}

fn small_baseline() -> &'static RunStore {
    static S: OnceLock<RunStore> = OnceLock::new();
    S.get_or_init(|| run_baseline(small_model(), 400, 3, CapturePosition::LastPromptToken).unwrap())
}

fn vector(dim: usize) -> impl Strategy<Value = Vector> {
    prop::collection::vec(-10.0f64..10.0, dim).prop_map(|v| Vector::new(v).unwrap())
}

fn target_and_conditioners() -> impl Strategy<Value = (Vector, Vec<Vector>)> {
    (2usize..24).prop_flat_map(|dim| (vector(dim), prop::collection::vec(vector(dim), 1..dim.min(6))))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn partial_is_orthogonal_to_every_conditioner((t, cs) in target_and_conditioners()) {
        let o = vecspace::orthogonalize(&t, &cs).unwrap();
        for c in &cs {
            let rel = vecspace::dot(&o.vector, c).unwrap().abs() / (t.norm().max(1e-300) * c.norm().max(1e-300));
            prop_assert!(rel <= 1e-10 || c.norm() == 0.0, "relative dot {rel}");
        }
    }

    #[test]
    fn orthogonalizing_twice_changes_nothing((t, cs) in target_and_conditioners()) {
        let once = vecspace::orthogonalize(&t, &cs).unwrap();
        let twice = vecspace::orthogonalize(&once.vector, &cs).unwrap();
        let diff = twice.vector.sub(&once.vector).unwrap().norm();
        prop_assert!(diff <= 1e-9 * t.norm().max(1.0));
    }

    #[test]
    fn target_in_span_is_degenerate((a, b) in (vector(8), vector(8)), x in -3.0f64..3.0, y in -3.0f64..3.0) {
        prop_assume!(vecspace::cosine(&a, &b).map(|c| c.abs() < 0.99).unwrap_or(false));
        let t = a.scale(x).add_scaled(y, &b).unwrap();
        prop_assume!(t.norm() > 1e-3);
        let o = vecspace::orthogonalize(&t, &[a, b]).unwrap();
        prop_assert!(o.degenerate);
        prop_assert!(o.vector.is_zero());
    }

    #[test]
    fn projection_is_idempotent(a in vector(10), b in vector(10)) {
        prop_assume!(b.norm() > 1e-3);
        let p = vecspace::project(&a, &b).unwrap();
        let pp = vecspace::project(&p, &b).unwrap();
        prop_assert!(pp.sub(&p).unwrap().norm() <= 1e-9 * a.norm().max(1.0));
        let rest = a.sub(&p).unwrap();
        prop_assert!(vecspace::dot(&rest, &b).unwrap().abs() <= 1e-9 * a.norm().max(1.0) * b.norm());
    }

    #[test]
    fn score_matches_finite_differences(
        rows in prop::collection::vec((0.0f64..1.0, -2.0f64..2.0, any::<bool>()), 30..60),
        beta in prop::collection::vec(-1.5f64..1.5, 3),
    ) {
        let x: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.0, r.1, 1.0]).collect();
        let y: Vec<f64> = rows.iter().map(|r| f64::from(u8::from(r.2))).collect();
        let d = DesignMatrix::new(vec!["a".into(), "b".into(), INTERCEPT.into()], &x, y).unwrap();
        let g = score(&d.x, &d.y, &beta);
        let h = 1e-6;
        for j in 0..3 {
            let (mut up, mut down) = (beta.clone(), beta.clone());
            up[j] += h;
            down[j] -= h;
            let fd = (log_likelihood(&d.x, &d.y, &up) - log_likelihood(&d.x, &d.y, &down)) / (2.0 * h);
            prop_assert!((fd - g[j]).abs() <= 1e-4 * (1.0 + g[j].abs()), "{fd} vs {}", g[j]);
        }
    }

    #[test]
    fn fit_ignores_row_order(
        rows in prop::collection::vec((-2.0f64..2.0, any::<bool>()), 40..80),
        shift in 1usize..39,
    ) {
        let make = |rs: &[(f64, bool)]| {
            let x: Vec<Vec<f64>> = rs.iter().map(|r| vec![r.0, 1.0]).collect();
            let y: Vec<f64> = rs.iter().map(|r| f64::from(u8::from(r.1))).collect();
            DesignMatrix::new(vec!["x".into(), INTERCEPT.into()], &x, y).unwrap()
        };
        let mut rotated = rows.clone();
        rotated.rotate_left(shift);
        rotated.reverse();
        let a = fit_logistic(&make(&rows));
        let b = fit_logistic(&make(&rotated));
        match (a, b) {
            (Ok(a), Ok(b)) => {
                for (x, y) in a.estimates().iter().zip(b.estimates()) {
                    prop_assert!((x - y).abs() <= 1e-7 * (1.0 + x.abs()));
                }
                prop_assert_eq!(a.separation, b.separation);
            }
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "{a:?} vs {b:?}"),
        }
    }
}

#[test]
fn steering_vectors_are_antisymmetric() {
    let recs = &small_baseline().records;
    for f in Factor::ALL {
        let (a, b) = f.default_contrast();
        for layer in 1..=3 {
            let fwd = extract_iv_vector(recs, f, a, b, layer, 5).unwrap();
            let rev = extract_iv_vector(recs, f, b, a, layer, 5).unwrap();
            assert!(fwd.vector.add(&rev.vector).unwrap().norm() == 0.0, "{f} at {layer}");
            assert_eq!((fwd.n_from, fwd.n_to), (rev.n_to, rev.n_from));
        }
    }
    let other_age = extract_iv_vector(recs, Factor::Age, Level::Age(30), Level::Age(50), 1, 3);
    assert!(other_age.is_ok());
}

#[test]
fn partial_is_fixed_point_when_already_orthogonal() {
    let recs = &small_baseline().records;
    let ivs: Vec<_> = Factor::ALL
        .iter()
        .map(|&f| extract_default_iv(recs, f, 1, 5).unwrap())
        .collect();
    let p = partial_vector(&ivs[2], &[ivs[0].clone(), ivs[1].clone()]).unwrap();
    let mut again = ivs[2].clone();
    again.vector = p.vector.clone();
    let q = partial_vector(&again, &[ivs[0].clone(), ivs[1].clone()]).unwrap();
    assert!(q.vector.sub(&p.vector).unwrap().norm() <= 1e-12 * p.vector.norm());
}

fn prompt(index: u64) -> (Vec<u32>, u64) {
    let c = game::sample_config(11, index);
    (
        small_model().tokenizer().encode(&game::build_prompt(&c)).unwrap(),
        c.trial_seed,
    )
}

fn random_direction(seed: u64) -> Vector {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Vector::new((0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn zero_alpha_is_no_injection() {
    let m = small_model();
    for i in 0..5 {
        let (p, seed) = prompt(i);
        let spec = InjectionSpec::new(1, 0.0, random_direction(i), PositionScope::AllPositions, 3, 30.0).unwrap();
        for cap in [CapturePosition::LastPromptToken, CapturePosition::MeanPrompt, CapturePosition::FirstGenerated] {
            let a = m.generate_with_capture(&p, None, cap, seed).unwrap();
            let b = m.generate_with_capture(&p, Some(&spec), cap, seed).unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn injection_adds_alpha_p_at_the_injected_layer() {
    let m = small_model();
    for (i, alpha) in [(0u64, -7.5), (1, 2.0), (2, 30.0)] {
        let (p, seed) = prompt(i);
        let dir = random_direction(100 + i);
        for layer in 1..3 {
            let spec = InjectionSpec::new(layer, alpha, dir.clone(), PositionScope::AllPositions, 3, 30.0).unwrap();
            let a = m.generate_with_capture(&p, None, CapturePosition::LastPromptToken, seed).unwrap();
            let b = m.generate_with_capture(&p, Some(&spec), CapturePosition::LastPromptToken, seed).unwrap();
            for l in 1..layer {
                assert_eq!(a.captures.at(l), b.captures.at(l), "layer {l} before injection");
            }
            let diff = b.captures.at(layer).unwrap().sub(a.captures.at(layer).unwrap()).unwrap();
            let err = diff.sub(&dir.scale(alpha)).unwrap().norm();
            assert!(err <= 1e-9, "layer {layer}: {err}");
        }
    }
}

#[test]
fn alpha_bound_and_final_layer_are_enforced() {
    let d = random_direction(1);
    assert!(InjectionSpec::new(3, 1.0, d.clone(), PositionScope::AllPositions, 3, 30.0).is_err());
    assert!(InjectionSpec::new(0, 1.0, d.clone(), PositionScope::AllPositions, 3, 30.0).is_err());
    assert!(InjectionSpec::new(1, 30.5, d.clone(), PositionScope::AllPositions, 3, 30.0).is_err());
    assert!(InjectionSpec::new(1, f64::NAN, d, PositionScope::AllPositions, 3, 30.0).is_err());
}

#[test]
fn parallel_trials_match_serial() {
    let m = small_model();
    let serial = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| run_trials(m, 5, 40, None, CapturePosition::LastPromptToken, true));
    let parallel = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap()
        .install(|| run_trials(m, 5, 40, None, CapturePosition::LastPromptToken, true));
    assert!(serial.1.is_none() && parallel.1.is_none());
    assert_eq!(serial.0, parallel.0);
}

#[test]
fn store_survives_a_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_baseline();
    s.save(dir.path()).unwrap();
    let back = RunStore::load(dir.path()).unwrap();
    assert_eq!(&back, s);
}
