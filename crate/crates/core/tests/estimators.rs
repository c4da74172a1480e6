use genbound::bounds;
use genbound::data::{self, Example};
use genbound::estimators::{self, DispersionMode, SeedSnapshot};
use genbound::models::{LinearNet, Model, TwoLayerReLU};
use genbound::{ParamVector, SeededStream};

fn examples(n: usize, d: usize, seed: u64) -> Vec<Example> {
    let mut s = SeededStream::new(seed);
    (0..n)
        .map(|_| Example::regression((0..d).map(|_| s.next_gaussian()).collect(), s.next_gaussian()))
        .collect()
}

#[test]
fn psi_on_a_linear_model_matches_its_closed_form() {
    // For ℓ = ½(wᵀx − y)² the mean gradient is affine in w with Hessian
    // H = (1/n) Σ x xᵀ, so Ψ = cum_var · ‖H‖_F².
    let d = 5;
    let ex = examples(30, d, 1);
    let refs: Vec<&Example> = ex.iter().collect();
    let mut h = vec![0.0; d * d];
    for z in &ex {
        for i in 0..d {
            for j in 0..d {
                h[i * d + j] += z.x[i] * z.x[j] / ex.len() as f64;
            }
        }
    }
    let frob: f64 = h.iter().map(|v| v * v).sum();
    let model = Model::Linear(LinearNet::new(d).unwrap());
    let w = ParamVector::new(vec![0.3; d]).unwrap();
    let cum_var = 0.04;
    let est = estimators::sensitivity_psi(&model, &w, cum_var, 4000, &refs, &mut SeededStream::new(2)).unwrap();
    let expected = cum_var * frob;
    assert!(
        (est.value - expected).abs() <= 4.0 * est.stderr,
        "{} ± {} vs {expected}",
        est.value,
        est.stderr
    );
}

#[test]
fn psi_is_zero_without_noise() {
    let ex = examples(10, 3, 3);
    let refs: Vec<&Example> = ex.iter().collect();
    let model = Model::Relu(TwoLayerReLU::new(3, 4, 5).unwrap());
    let w = ParamVector::new(vec![0.1; 12]).unwrap();
    let est = estimators::sensitivity_psi(&model, &w, 0.0, 7, &refs, &mut SeededStream::new(4)).unwrap();
    assert_eq!(est.value, 0.0);
}

#[test]
fn empirical_flatness_vanishes_when_heldout_is_the_training_set() {
    let (train, _) = data::gen_teacher_student_split(4, 6, 40, 10, 9).unwrap();
    let model = Model::Relu(TwoLayerReLU::new(4, 6, 1).unwrap());
    let mut s = SeededStream::new(5);
    let w = model.init_weights(&mut s, None).unwrap();
    let v = bounds::flatness_term_empirical(&model, &w, &train, &train, 0.01, 50, &mut s).unwrap();
    assert_eq!(v, 0.0);
}

#[test]
fn empirical_flatness_is_positive_between_different_sets() {
    let (train, test) = data::gen_teacher_student_split(4, 6, 40, 40, 9).unwrap();
    let model = Model::Relu(TwoLayerReLU::new(4, 6, 1).unwrap());
    let mut s = SeededStream::new(6);
    let w = model.init_weights(&mut s, None).unwrap();
    let v = bounds::flatness_term_empirical(&model, &w, &train, &test, 0.05, 50, &mut s).unwrap();
    assert!(v.is_finite() && v > 0.0);
}

#[test]
fn multi_seed_dispersion_of_identical_replicates_equals_single_run() {
    let ex = examples(12, 3, 7);
    let refs: Vec<&Example> = ex.iter().collect();
    let model = Model::Relu(TwoLayerReLU::new(3, 5, 2).unwrap());
    let w = ParamVector::new((0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let batch = vec![0, 4, 9];
    let snap = SeedSnapshot { step: 3, weights: w.clone(), batch: batch.clone() };
    let multi = estimators::dispersion_multi_seed(&model, &[snap.clone(), snap.clone(), snap], &refs).unwrap();
    let reference = estimators::reference_mean_gradient(&model, &w, &refs).unwrap();
    let b: Vec<&Example> = batch.iter().map(|&i| refs[i]).collect();
    let single = estimators::dispersion(&model, &w, &b, &reference).unwrap();
    assert_eq!(multi.mode, DispersionMode::MultiSeed);
    assert!((multi.value - single.value).abs() <= 1e-12 * single.value.max(1.0));
}

#[test]
fn multi_seed_dispersion_averages_distances_to_the_ensemble_reference() {
    let ex = examples(8, 2, 8);
    let refs: Vec<&Example> = ex.iter().collect();
    let model = Model::Linear(LinearNet::new(2).unwrap());
    let snaps: Vec<SeedSnapshot> = (0..3)
        .map(|k| SeedSnapshot {
            step: 1,
            weights: ParamVector::new(vec![k as f64 * 0.5, -0.2]).unwrap(),
            batch: vec![k, k + 3],
        })
        .collect();
    // Oracle written out by hand.
    let mean_grad = |w: &ParamVector, idx: &[usize]| -> Vec<f64> {
        let mut g = vec![0.0; 2];
        for &i in idx {
            let r = w[0] * ex[i].x[0] + w[1] * ex[i].x[1] - ex[i].y.value().unwrap();
            g[0] += r * ex[i].x[0] / idx.len() as f64;
            g[1] += r * ex[i].x[1] / idx.len() as f64;
        }
        g
    };
    let all: Vec<usize> = (0..8).collect();
    let mut reference = [0.0; 2];
    for s in &snaps {
        let g = mean_grad(&s.weights, &all);
        reference[0] += g[0] / 3.0;
        reference[1] += g[1] / 3.0;
    }
    let expected = snaps
        .iter()
        .map(|s| {
            let g = mean_grad(&s.weights, &s.batch);
            (g[0] - reference[0]).powi(2) + (g[1] - reference[1]).powi(2)
        })
        .sum::<f64>()
        / 3.0;
    let got = estimators::dispersion_multi_seed(&model, &snaps, &refs).unwrap();
    assert!((got.value - expected).abs() <= 1e-12 * expected.max(1.0), "{} vs {expected}", got.value);
}

#[test]
fn misaligned_replicates_are_rejected() {
    let ex = examples(4, 2, 9);
    let refs: Vec<&Example> = ex.iter().collect();
    let model = Model::Linear(LinearNet::new(2).unwrap());
    let w = ParamVector::zeros(2);
    let a = SeedSnapshot { step: 1, weights: w.clone(), batch: vec![0] };
    let b = SeedSnapshot { step: 2, weights: w, batch: vec![1] };
    let err = estimators::dispersion_multi_seed(&model, &[a, b], &refs).unwrap_err();
    assert!(matches!(err, genbound::Error::InsufficientTrace(_)));
}
