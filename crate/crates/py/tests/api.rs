use iterboot_py::api::{self, ApiError};

fn balanced() -> (Vec<Vec<f64>>, Vec<f64>) {
    let x = (0..10).map(|_| vec![1.0]).collect();
    let y = (0..10).map(|i| f64::from(i % 2 == 0)).collect();
    (x, y)
}

#[test]
fn fit_matches_closed_form() {
    let x = vec![vec![1.0]; 4];
    let fit = api::fit_logistic(&x, &[1.0, 1.0, 1.0, 0.0], "logistic_mle", 0.0).unwrap();
    assert!(fit.converged);
    assert!((fit.theta_hat[0] - 3f64.ln()).abs() < 1e-10);
}

#[test]
fn bad_arguments_are_usage_errors() {
    let (x, y) = balanced();
    assert!(matches!(api::fit_logistic(&x, &y, "ols", 0.0), Err(ApiError::Usage(_))));
    assert!(matches!(api::fit_logistic(&x, &y, "glmm_pirls", 0.0), Err(ApiError::Usage(_))));
    assert!(matches!(api::fit_logistic(&[vec![1.0], vec![1.0, 2.0]], &[0.0, 1.0], "logistic_mle", 0.0), Err(ApiError::Usage(_))));
    assert!(matches!(api::fit_logistic(&x, &y[..3], "logistic_mle", 0.0), Err(ApiError::Usage(_))));
    assert!(matches!(api::study_csv("nope", Some(0), 1, None), Err(ApiError::Usage(_))));
}

#[test]
fn ib_on_balanced_intercept_stays_at_zero() {
    let (x, y) = balanced();
    let out = api::ib_logistic(&x, &y, "logistic_mle", 0.01, 20, 3).unwrap();
    assert!(out.trace.converged);
    assert!(out.theta[0].abs() < 0.5);
}

#[test]
fn variance_toy_exact_limit() {
    let out = api::ib_variance_toy(0.9, 10, None, 0).unwrap();
    assert!((out.theta[0] - 1.0).abs() < 1e-6);
}

#[test]
fn dry_run_csv_is_header_only() {
    let csv = api::study_csv("glmm-scaled", Some(0), 1, Some(1)).unwrap();
    assert_eq!(csv, "estimator,coordinate,truth,mean,bias,rmse,mc_se,n_fail\n");
}

#[test]
fn oracle_checks_pass() {
    let checks = api::oracle_check(None).unwrap();
    assert_eq!(checks.len(), 4);
    assert!(checks.iter().all(|c| c.pass));
}
