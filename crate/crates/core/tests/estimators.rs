use std::path::PathBuf;

use iterboot::bindings::LogisticBinding;
use iterboot::estimators::{glmm_ghq, EstimatorKind, EstimatorSpec, FitResult};
use iterboot::ib::{ib_run, IbConfig};
use iterboot::inference::numerical_jacobian_b;
use iterboot::oracle;
use iterboot::rng::SeedSet;
use iterboot::sim::{logistic, simulate_glmm, Dataset, GlmmDesign, LogisticDesign, VarianceScale};
use nalgebra::DVector;

fn fixture(name: &str) -> Dataset {
    Dataset::read_csv(&oracle::fixture_dir().join(name)).unwrap()
}

fn logistic_fixture(name: &str) -> (LogisticDesign, DVector<f64>) {
    let d = fixture(name);
    (LogisticDesign::new(d.x).unwrap(), d.y)
}

fn separation_corpus() -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(oracle::fixture_dir().join("separation"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    v.sort();
    assert!(v.len() >= 3);
    v
}

fn spec(kind: EstimatorKind) -> EstimatorSpec {
    EstimatorSpec::new(kind)
}

fn score_sup(design: &LogisticDesign, y: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    let eta = design.x() * beta;
    let r = DVector::from_iterator(y.len(), y.iter().zip(eta.iter()).map(|(yi, e)| yi - logistic(*e)));
    (design.x().tr_mul(&r) / y.len() as f64).amax()
}

#[test]
fn engine_agrees_with_fixture_oracles() {
    for c in oracle::check_fixtures(&oracle::fixture_dir()).unwrap() {
        assert!(c.pass, "{} off by {} (tolerance {})", c.name, c.max_abs_error, c.tolerance);
    }
}

#[test]
fn converged_mle_solves_its_score_equation() {
    for name in ["logistic_n8.csv", "robust_n20_clean.csv", "robust_n20_flipped.csv", "intercept_balanced.csv"] {
        let (d, y) = logistic_fixture(name);
        for delta in [0.0, 0.01, 0.2] {
            let s = spec(EstimatorKind::LogisticMle).with_delta(delta);
            let fit = s.fit_logistic(&d, &y).unwrap();
            assert!(fit.converged);
            assert!(fit.final_grad_norm <= s.irls.tol);
            let ytil = iterboot::estimators::pseudo_values(&y, delta).unwrap();
            assert!(score_sup(&d, &ytil, &fit.theta_hat) <= s.irls.tol, "{name} delta={delta}");
        }
    }
}

#[test]
fn intercept_only_closed_forms() {
    let d = LogisticDesign::new(nalgebra::DMatrix::from_element(4, 1, 1.0)).unwrap();
    let three_to_one = DVector::from_vec(vec![1.0, 1.0, 1.0, 0.0]);
    let fit = spec(EstimatorKind::LogisticMle).fit_logistic(&d, &three_to_one).unwrap();
    assert!((fit.theta_hat[0] - 3f64.ln()).abs() < 1e-10);

    let (bal, yb) = logistic_fixture("intercept_balanced.csv");
    for kind in [EstimatorKind::LogisticMle, EstimatorKind::LogisticFirth, EstimatorKind::LogisticRobust] {
        let fit = spec(kind).fit_logistic(&bal, &yb).unwrap();
        assert!(fit.converged && fit.theta_hat[0].abs() < 1e-12, "{kind:?}: {}", fit.theta_hat);
    }
}

#[test]
fn pseudo_values_shrink_intercept_monotonically() {
    let d = LogisticDesign::new(nalgebra::DMatrix::from_element(10, 1, 1.0)).unwrap();
    let y = DVector::from_vec(vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    let mut last = f64::INFINITY;
    for delta in [0.0, 0.01, 0.05, 0.1, 0.3] {
        let b = spec(EstimatorKind::LogisticMle).with_delta(delta).fit_logistic(&d, &y).unwrap().theta_hat[0];
        assert!(b > 0.0 && b < last, "delta={delta}: {b}");
        last = b;
    }
}

#[test]
fn robust_fit_resists_one_flipped_response() {
    let (d, clean) = logistic_fixture("robust_n20_clean.csv");
    let (_, flipped) = logistic_fixture("robust_n20_flipped.csv");
    assert_eq!((&clean - &flipped).abs().sum(), 1.0);
    let fit = |kind, y: &DVector<f64>| -> FitResult {
        let f = spec(kind).fit_logistic(&d, y).unwrap();
        assert!(f.converged);
        f
    };
    let mle_shift = (fit(EstimatorKind::LogisticMle, &clean).theta_hat - fit(EstimatorKind::LogisticMle, &flipped).theta_hat).norm();
    let rob_clean = fit(EstimatorKind::LogisticRobust, &clean).theta_hat;
    let rob_flip = fit(EstimatorKind::LogisticRobust, &flipped).theta_hat;
    assert!((&rob_flip - &rob_clean).norm() < mle_shift, "{} vs {mle_shift}", (&rob_flip - &rob_clean).norm());
    // also closer to the clean MLE than the contaminated MLE is
    let mle_clean = fit(EstimatorKind::LogisticMle, &clean).theta_hat;
    assert!((&rob_flip - &mle_clean).norm() < mle_shift);
}

/// Root of the leverage-weighted score `sum_i w_i (y_i - mu_i) x_i` by
/// plain Newton.
fn weighted_mle(d: &LogisticDesign, w: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    let x = d.x();
    let mut beta = DVector::zeros(d.q());
    for _ in 0..100 {
        let mu = (x * &beta).map(logistic);
        let r = DVector::from_iterator(y.len(), (0..y.len()).map(|i| w[i] * (y[i] - mu[i])));
        let mut info = nalgebra::DMatrix::zeros(d.q(), d.q());
        for i in 0..y.len() {
            let xi = x.row(i).transpose();
            info += &xi * xi.transpose() * (w[i] * mu[i] * (1.0 - mu[i]));
        }
        let step = info.lu().solve(&x.tr_mul(&r)).unwrap();
        beta += &step;
        if step.amax() < 1e-14 {
            break;
        }
    }
    beta
}

#[test]
fn robust_estimator_degenerates_to_weighted_mle() {
    // with an unbounded psi the correction vanishes and only the Mallows
    // weights remain
    for name in ["logistic_n8.csv", "robust_n20_clean.csv", "robust_n20_flipped.csv"] {
        let (d, y) = logistic_fixture(name);
        let w = iterboot::estimators::leverage_weights(&d).unwrap();
        let rob = spec(EstimatorKind::LogisticRobust).with_huber_c(1e8).fit_logistic(&d, &y).unwrap();
        assert!(rob.converged);
        assert!((&rob.theta_hat - weighted_mle(&d, &w, &y)).amax() < 1e-6, "{name}");
    }
    // equal leverages: the plain MLE
    let (d, y) = logistic_fixture("intercept_balanced.csv");
    let mle = spec(EstimatorKind::LogisticMle).fit_logistic(&d, &y).unwrap();
    let rob = spec(EstimatorKind::LogisticRobust).with_huber_c(1e8).fit_logistic(&d, &y).unwrap();
    assert!((&rob.theta_hat - &mle.theta_hat).amax() < 1e-6);
}

#[test]
fn separation_corpus_behaviour() {
    for path in separation_corpus() {
        let data = Dataset::read_csv(&path).unwrap();
        let d = LogisticDesign::new(data.x.clone()).unwrap();
        let raw = spec(EstimatorKind::LogisticMle).fit_logistic(&d, &data.y).unwrap();
        assert!(!raw.converged, "{}: raw MLE should not exist", path.display());
        for s in [spec(EstimatorKind::LogisticMle).with_delta(0.01), spec(EstimatorKind::LogisticFirth)] {
            let fit = s.fit_logistic(&d, &data.y).unwrap();
            assert!(fit.is_usable(), "{} {:?}", path.display(), s.kind);
            assert!(fit.theta_hat.amax() < 20.0);
        }
    }
}

#[test]
fn ib_wrappers_finite_under_separation() {
    for path in separation_corpus() {
        let data = Dataset::read_csv(&path).unwrap();
        let design = LogisticDesign::new(data.x.clone()).unwrap();
        for kind in [EstimatorKind::LogisticMle, EstimatorKind::LogisticRobust] {
            let b = LogisticBinding::new(design.clone(), spec(kind).with_delta(0.01)).unwrap();
            let pi = b.estimate(&data.y).unwrap();
            assert!(pi.is_usable());
            let out = ib_run(&pi.theta_hat, &b, &IbConfig::monte_carlo(50, 3)).unwrap();
            assert!(out.trace.converged && out.theta.iter().all(|v| v.is_finite()), "{} {kind:?}", path.display());
        }
    }
}

fn m50_q29_design() -> (GlmmDesign, DVector<f64>) {
    let data = fixture("glmm_m50_q29.csv");
    (GlmmDesign::new(data.x, data.cluster.unwrap()).unwrap(), data.y)
}

#[test]
fn pirls_is_reliable_on_m50_q29_design() {
    let (d, _) = m50_q29_design();
    let setting = iterboot::harness::SimSetting::full_glmm_2();
    let truth = setting.truth();
    let s = spec(EstimatorKind::GlmmPirls).with_delta(0.01);
    let ok = (0..100u64)
        .filter(|&seed| {
            let y = simulate_glmm(&d, &truth, VarianceScale::Variance, &mut SeedSet::new(seed, 1).observed()).unwrap();
            s.fit_glmm(&d, &y).is_ok_and(|f| f.is_usable())
        })
        .count();
    assert!(ok >= 95, "{ok} of 100");
}

#[test]
fn ghq_node_count_stability() {
    // same cluster layout as the q = 29 fixture with six covariates; with
    // all 29 the raw likelihood has no interior maximum on this draw
    let data = fixture("glmm_m50_q6.csv");
    let (d, y) = (GlmmDesign::new(data.x, data.cluster.unwrap()).unwrap(), data.y);
    let mut s = spec(EstimatorKind::GlmmGhq);
    let a = glmm_ghq(&d, &y, &s).unwrap();
    s.ghq_nodes = 25;
    let b = glmm_ghq(&d, &y, &s).unwrap();
    assert!(a.converged && b.converged && !a.boundary);
    assert!((&a.theta_hat - &b.theta_hat).amax() < 1e-4, "{}", (&a.theta_hat - &b.theta_hat).amax());
}

/// The seed-frozen simulated mean of a binary-response estimator is a
/// staircase in theta, so central differences at a small step are dominated
/// by individual response flips and do not settle under step halving.
#[test]
#[ignore = "binary responses make the frozen-seed map piecewise constant"]
fn jacobian_step_halving_on_logistic_fixture() {
    let (d, y) = logistic_fixture("logistic_n8.csv");
    let b = LogisticBinding::new(d, spec(EstimatorKind::LogisticMle).with_delta(0.01)).unwrap();
    let theta = b.estimate(&y).unwrap().theta_hat;
    let cfg = IbConfig::monte_carlo(1000, 11);
    let full = numerical_jacobian_b(&theta, &b, &cfg, 1e-3).unwrap();
    let half = numerical_jacobian_b(&theta, &b, &cfg, 5e-4).unwrap();
    assert!((&full - &half).norm() < 1e-3 * full.norm(), "{full} vs {half}");
}
