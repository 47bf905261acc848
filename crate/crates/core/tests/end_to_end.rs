use nalgebra::DMatrix;
use proptest::prelude::*;
use pwtest::pipeline::{multi_split_test, run_single_split_test, split_sample, TestConfig};
use pwtest::simbench::{gen_model, Model, ModelSpec};
use pwtest::statistic::{CandidateSpec, TestReport, Variant};
use pwtest::stiefel::{manpg_fit_projection, ManPGOptions};
use pwtest::transport::{empirical_projected_w1, empirical_w1};
use pwtest::witness::{train_witness, NetworkArchitecture, TrainOptions, WitnessNetwork};

fn quick(variant: Variant, candidates: Vec<CandidateSpec>, seed: u64) -> TestConfig {
    TestConfig {
        variant,
        candidates: Some(candidates),
        n_splits: 2,
        seed,
        training: TrainOptions {
            epochs: 40,
            ..TrainOptions::default()
        },
        ..TestConfig::default()
    }
}

fn data(model: Model, beta: f64, d: usize, n: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    gen_model(&ModelSpec {
        model,
        beta,
        d,
        n_x: n,
        n_y: n,
        seed,
    })
    .unwrap()
}

#[test]
fn strong_mean_shift_is_rejected() {
    let (x, y) = data(Model::A, 4.0, 5, 120, 1);
    let cfg = quick(
        Variant::L1,
        vec![CandidateSpec::l1(1, 0.01), CandidateSpec::l1(2, 0.1)],
        3,
    );
    let report = multi_split_test(&x, &y, &cfg).unwrap();
    assert!(report.reject, "p = {}", report.p);
    assert!(report.p < 1e-3);
}

#[test]
fn l0_variant_runs_end_to_end() {
    let (x, y) = data(Model::B, 1.0, 6, 100, 2);
    let cfg = quick(
        Variant::L0,
        vec![CandidateSpec::l0(1, 1), CandidateSpec::l0(2, 3)],
        5,
    );
    let report = multi_split_test(&x, &y, &cfg).unwrap();
    assert_eq!(report.variant, Variant::L0);
    assert_eq!(report.m_requested, 2);
    assert!((0.0..=1.0).contains(&report.p));
}

#[test]
fn identical_samples_do_not_reject() {
    let (x, _) = data(Model::A, 0.0, 4, 100, 3);
    let cfg = quick(
        Variant::Plain,
        vec![CandidateSpec::plain(1), CandidateSpec::plain(2)],
        1,
    );
    let report = multi_split_test(&x, &x, &cfg).unwrap();
    assert!(!report.reject, "p = {}", report.p);
}

#[test]
fn report_file_round_trip() {
    let (x, y) = data(Model::C, 1.0, 5, 80, 4);
    let cfg = quick(Variant::L1, vec![CandidateSpec::l1(1, 0.1)], 2);
    let report = multi_split_test(&x, &y, &cfg).unwrap();
    let back = TestReport::from_json(&report.to_json().unwrap()).unwrap();
    assert_eq!(back, report);
}

#[test]
fn projection_pipeline_is_consistent() {
    let (x, y) = data(Model::A, 2.0, 4, 60, 5);
    let fit = manpg_fit_projection(&x, &y, 2, 0.0, &ManPGOptions::default()).unwrap();
    assert!(fit.u.orthogonality_error() < 1e-10);
    let pw = empirical_projected_w1(&x, &y, &fit.u).unwrap();
    assert!(pw <= empirical_w1(&x, &y).unwrap() + 1e-9);

    let px = &x * fit.u.as_matrix();
    let py = &y * fit.u.as_matrix();
    let arch = NetworkArchitecture::for_projection(2, 5.0).unwrap();
    let w = train_witness(
        &x,
        &y,
        &fit.u,
        &arch,
        &TrainOptions {
            epochs: 60,
            ..TrainOptions::default()
        },
    )
    .unwrap();
    // A 1-Lipschitz witness cannot beat the projected transport cost.
    assert!(w.objective <= pw + 1e-6, "{} vs {pw}", w.objective);

    let path = std::env::temp_dir().join(format!("pwtest-net-{}.json", std::process::id()));
    w.net.save(&path).unwrap();
    let back = WitnessNetwork::load(&path).unwrap();
    std::fs::remove_file(&path).unwrap();
    assert_eq!(
        back.forward_rows(&px).unwrap(),
        w.net.forward_rows(&px).unwrap()
    );
    assert_eq!(
        back.forward_rows(&py).unwrap(),
        w.net.forward_rows(&py).unwrap()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn single_split_report_invariants(seed in 0u64..1000, beta in 0.0f64..1.5) {
        let (x, y) = data(Model::A, beta, 3, 40, seed);
        let cfg = quick(Variant::L1, vec![CandidateSpec::l1(1, 0.01), CandidateSpec::l1(2, 1.0)], seed);
        let split = split_sample(40, 40, 0.5, seed).unwrap();
        let r = run_single_split_test(&x, &y, &cfg, &split).unwrap();
        prop_assert!(r.t >= 0.0);
        prop_assert!((0.0..=1.0).contains(&r.p));
        prop_assert_eq!(r.reject, r.t > r.q);
        prop_assert!(r.m_effective <= r.m_requested);
        prop_assert_eq!(r.m_effective + r.eliminated.len(), r.candidates.iter().filter(|c| c.error.is_none()).count());
    }
}
