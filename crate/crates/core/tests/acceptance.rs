//! One line per acceptance criterion on stderr. Criteria that miss their
//! target are reported as FAIL without failing the test run; set
//! `ACCEPTANCE_STRICT=1` to turn any FAIL into a test failure and
//! `ACCEPTANCE_ONLY=3,8` to run a subset.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use iterboot::bindings::LogisticBinding;
use iterboot::estimators::{EstimatorKind, EstimatorSpec};
use iterboot::harness::{run_setting, MCReport, SimSetting};
use iterboot::ib::{convergence_rate_fit, ib_run, ib_run_from, IbConfig};
use iterboot::inference::{estimate_variance, normal_ci, VarianceOptions};
use iterboot::oracle;
use iterboot::rng::derive_seed;
use iterboot::sim::{Dataset, LogisticDesign};
use iterboot::toy::{toy_fixed_point_closed_form, toy_simulate, LinearBiasToy, Toy, VarianceToy};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

const MASTER: u64 = 1;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn fixed_point_exactness() -> Verdict {
    let t0 = Instant::now();
    let base = DMatrix::from_row_slice(2, 2, &[0.3, -0.2, 0.1, 0.25]);
    let m = &base * (0.5 / base.norm());
    let toy = Toy::LinearBias(LinearBiasToy::affine(m, DVector::from_vec(vec![0.4, -0.7])).unwrap());
    let pi = DVector::from_vec(vec![1.2, -0.3]);
    let closed = toy_fixed_point_closed_form(&toy, &pi).unwrap();
    let cfg = IbConfig { tol: Some(1e-13), max_iter: 500, ..IbConfig::exact() };
    let mut rng = derive_seed(MASTER, 901, 0);
    let mut worst = 0.0f64;
    let mut all_converged = true;
    for _ in 0..20 {
        let start = DVector::from_fn(2, |_, _| rng.random_range(-50.0..50.0));
        let out = ib_run_from(&start, &pi, &toy, &cfg).unwrap();
        all_converged &= out.trace.converged;
        worst = worst.max((&out.theta - &closed).amax());
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(all_converged && worst <= 1e-8 && secs < 1.0, format!("max error {worst:.2e}, {secs:.3}s"))
}

fn exponential_rate() -> Verdict {
    let t0 = Instant::now();
    let cfg = IbConfig { tol: Some(1e-11), ..IbConfig::exact() };
    let var = Toy::Variance(VarianceToy::new(10).unwrap());
    let a = convergence_rate_fit(&ib_run(&DVector::from_element(1, 1.7), &var, &cfg).unwrap().trace).unwrap();
    let scalar = Toy::LinearBias(LinearBiasToy::affine(DMatrix::from_element(1, 1, 0.5), DVector::from_element(1, 0.2)).unwrap());
    let b = convergence_rate_fit(&ib_run(&DVector::from_element(1, 3.0), &scalar, &cfg).unwrap().trace).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let pass = (0.095..=0.105).contains(&a.epsilon) && a.r2 > 0.999 && (0.47..=0.53).contains(&b.epsilon) && secs < 1.0;
    verdict(pass, format!("variance toy {:.4} (R2 {:.6}), scalar {:.4}, {secs:.3}s", a.epsilon, a.r2, b.epsilon))
}

fn pt_unbiasedness() -> Verdict {
    let t0 = Instant::now();
    let theta = DVector::from_element(1, 2.0);
    let reps = 10_000usize;
    let mut pass = true;
    let mut parts = Vec::new();
    for n in [5usize, 10, 50] {
        let toy = Toy::Variance(VarianceToy::new(n).unwrap());
        let mut raw = Vec::with_capacity(reps);
        let mut ib = Vec::with_capacity(reps);
        for r in 0..reps {
            let pi = toy_simulate(&toy, &theta, &mut derive_seed(MASTER, 903, (n * reps + r) as u64));
            let cfg = IbConfig::monte_carlo(500, (n * reps + r) as u64);
            let out = ib_run(&pi, &toy, &cfg).unwrap();
            pass &= out.trace.converged;
            raw.push(pi[0]);
            ib.push(out.theta[0]);
        }
        let (m_ib, sd_ib) = mean_sd(&ib);
        let (m_raw, sd_raw) = mean_sd(&raw);
        let z_ib = (m_ib - 2.0) / (sd_ib / (reps as f64).sqrt());
        let z_raw = (m_raw - 2.0) / (sd_raw / (reps as f64).sqrt());
        pass &= z_ib.abs() <= 3.0;
        if n == 5 {
            pass &= z_raw.abs() >= 10.0;
        }
        parts.push(format!("n={n} IB bias {:+.4} ({z_ib:+.1} SE), raw {:+.4} ({z_raw:+.1} SE)", m_ib - 2.0, m_raw - 2.0));
    }
    let secs = t0.elapsed().as_secs_f64();
    pass &= secs < 120.0;
    verdict(pass, format!("{}; {secs:.1}s", parts.join("; ")))
}

fn bootstrap_identity() -> Verdict {
    // first iterate against 2 pi - mean over 100 random toys and seeds
    let mut rng = derive_seed(MASTER, 904, 0);
    let mut mismatches = 0;
    for c in 0..100u64 {
        let p = rng.random_range(1..=4usize);
        let m = DMatrix::from_fn(p, p, |_, _| rng.random_range(-0.3..0.3));
        let s = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
        let toy = Toy::LinearBias(LinearBiasToy::from_scales(m, s, 1.0, 1.0, rng.random_range(0.1..2.0), rng.random_range(10..500)).unwrap());
        let pi = DVector::from_fn(p, |_, _| rng.random_range(-3.0..3.0));
        let h = rng.random_range(1..60usize);
        if common::first_iterate(&toy, &pi, h, c) != common::efron_bias_corrected(&toy, &pi, h, c) {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("{mismatches} of 100 configs differ bitwise"))
}

fn bias_z(report: &MCReport, label: &str, j: usize) -> f64 {
    report.row(label, j).map_or(f64::NAN, |r| r.bias / r.mc_se)
}

fn fmt_z(report: &MCReport, label: &str, coords: &[usize]) -> String {
    let zs: Vec<String> = coords.iter().map(|&j| format!("{:+.1}", bias_z(report, label, j))).collect();
    format!("{label} [{}]", zs.join(" "))
}

fn within(z: f64) -> bool {
    z.abs() <= 3.0
}

fn scaled_setting_clean() -> Verdict {
    let s = SimSetting::scaled_setting_1();
    let rep = run_setting(&s, MASTER, None).unwrap();
    let lead = [0, 1, 2, 3];
    let nulls: Vec<usize> = (4..s.dim()).collect();
    let all: Vec<usize> = (0..s.dim()).collect();
    let a = lead.iter().all(|&j| bias_z(&rep, "MLE", j).abs() > 3.0);
    let b = ["IB-MLE", "IB-ROB"].iter().all(|l| all.iter().all(|&j| within(bias_z(&rep, l, j))));
    let bad_nulls: Vec<String> = s
        .estimators
        .iter()
        .flat_map(|e| nulls.iter().filter(|&&j| !within(bias_z(&rep, &e.label, j))).map(move |j| format!("{}:{}", e.label, j + 1)))
        .collect();
    let c = bad_nulls.is_empty();
    let detail = format!(
        "(a) {} {}; (b) {} {}; {}, (c) {} off-null [{}]; failures {:?}; {:.0}s",
        if a { "ok" } else { "miss" },
        fmt_z(&rep, "MLE", &lead),
        if b { "ok" } else { "miss" },
        fmt_z(&rep, "IB-MLE", &lead),
        fmt_z(&rep, "IB-ROB", &lead),
        if c { "ok" } else { "miss" },
        bad_nulls.join(" "),
        rep.failures,
        rep.wall_time_s
    );
    verdict(a && b && c, detail)
}

fn scaled_setting_contaminated() -> Verdict {
    let s = SimSetting::scaled_setting_1_contaminated();
    let rep = run_setting(&s, MASTER, None).unwrap();
    let lead = [0, 1, 2, 3];
    let rob = lead.iter().all(|&j| within(bias_z(&rep, "IB-ROB", j)));
    let mle_biased = lead.iter().filter(|&&j| bias_z(&rep, "IB-MLE", j).abs() > 3.0).count();
    let detail = format!(
        "{}, {}; failures {:?}; {:.0}s",
        fmt_z(&rep, "IB-ROB", &lead),
        fmt_z(&rep, "IB-MLE", &lead),
        rep.failures,
        rep.wall_time_s
    );
    verdict(rob && mle_biased >= 2, detail)
}

fn scaled_glmm() -> Verdict {
    let s = SimSetting::scaled_glmm();
    let rep = run_setting(&s, MASTER, None).unwrap();
    let j = s.dim() - 1;
    let ib = rep.row("IB", j).unwrap();
    let pirls = rep.row("PIRLS", j).unwrap();
    let pass = ib.bias.abs() < pirls.bias.abs() / 2.0 && within(ib.bias / ib.mc_se);
    let detail = format!(
        "sigma2 bias IB {:+.3} ({:+.1} SE), PIRLS {:+.3}; failures {:?}; {:.0}s",
        ib.bias,
        ib.bias / ib.mc_se,
        pirls.bias,
        rep.failures,
        rep.wall_time_s
    );
    verdict(pass, detail)
}

fn variance_calibration() -> Verdict {
    let t0 = Instant::now();
    let n = 50;
    let toy = Toy::Variance(VarianceToy::new(n).unwrap());
    let theta = DVector::from_element(1, 2.0);
    let reps = 2000u64;
    let mut covered = 0u64;
    let mut errors = 0u64;
    for r in 0..reps {
        let pi = toy_simulate(&toy, &theta, &mut derive_seed(MASTER, 908, r));
        let cfg = IbConfig::monte_carlo(500, 800_000 + r);
        let Ok(out) = ib_run(&pi, &toy, &cfg) else {
            errors += 1;
            continue;
        };
        let est = estimate_variance(&out.theta, &toy, &cfg, &VarianceOptions::default(), Some(&out.last_fits));
        match est.and_then(|v| normal_ci(&out.theta, &v.var_theta, 0.95)) {
            Ok(ci) if out.trace.converged => covered += u64::from(ci[0].lo <= 2.0 && 2.0 <= ci[0].hi),
            _ => errors += 1,
        }
    }
    let coverage = covered as f64 / reps as f64;
    let secs = t0.elapsed().as_secs_f64();
    let pass = errors == 0 && (0.925..=0.975).contains(&coverage) && secs <= 300.0;
    verdict(pass, format!("coverage {:.2}% over {reps}, {errors} errors, {secs:.1}s", 100.0 * coverage))
}

fn csv_bytes(setting: &SimSetting, workers: usize) -> Vec<u8> {
    let mut buf = Vec::new();
    run_setting(setting, MASTER, Some(workers)).unwrap().write_csv(&mut buf).unwrap();
    buf
}

fn determinism() -> Verdict {
    let mut settings: Vec<SimSetting> = SimSetting::PRESETS
        .iter()
        .map(|name| SimSetting { replicates: 0, ..SimSetting::preset(name).unwrap() })
        .collect();
    settings.push(SimSetting { replicates: 8, h: 10, ..SimSetting::scaled_setting_1_contaminated() });
    settings.push(SimSetting { replicates: 4, h: 10, ..SimSetting::scaled_glmm() });
    let mut differing = Vec::new();
    for s in &settings {
        let one = csv_bytes(s, 1);
        if [4, 8].iter().any(|&w| csv_bytes(s, w) != one) {
            differing.push(s.name.clone());
        }
    }
    verdict(differing.is_empty(), format!("{} studies compared at 1, 4 and 8 workers; differing [{}]", settings.len(), differing.join(" ")))
}

fn separation_robustness() -> Verdict {
    let mut paths: Vec<_> = std::fs::read_dir(oracle::fixture_dir().join("separation")).unwrap().map(|e| e.unwrap().path()).collect();
    paths.sort();
    let mut problems = Vec::new();
    for path in &paths {
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        let data = Dataset::read_csv(path).unwrap();
        let design = LogisticDesign::new(data.x.clone()).unwrap();
        let raw = EstimatorSpec::new(EstimatorKind::LogisticMle).fit_logistic(&design, &data.y).unwrap();
        if raw.converged {
            problems.push(format!("{name}: raw MLE converged"));
        }
        for s in [EstimatorSpec::new(EstimatorKind::LogisticMle).with_delta(0.01), EstimatorSpec::new(EstimatorKind::LogisticFirth)] {
            if !s.fit_logistic(&design, &data.y).is_ok_and(|f| f.is_usable()) {
                problems.push(format!("{name}: {:?}", s.kind));
            }
        }
        for kind in [EstimatorKind::LogisticMle, EstimatorKind::LogisticRobust] {
            let b = LogisticBinding::new(design.clone(), EstimatorSpec::new(kind).with_delta(0.01)).unwrap();
            let ok = b.estimate(&data.y).ok().filter(|f| f.is_usable()).and_then(|f| ib_run(&f.theta_hat, &b, &IbConfig::monte_carlo(100, 5)).ok());
            if !ok.is_some_and(|o| o.trace.converged && o.theta.iter().all(|v| v.is_finite())) {
                problems.push(format!("{name}: IB {kind:?}"));
            }
        }
    }
    verdict(problems.is_empty() && !paths.is_empty(), format!("{} fixtures; problems [{}]", paths.len(), problems.join(", ")))
}

type Criterion = (&'static str, fn() -> Verdict);

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        ("fixed-point exactness", fixed_point_exactness),
        ("exponential rate", exponential_rate),
        ("PT-unbiasedness surrogate", pt_unbiasedness),
        ("bootstrap bias-correction identity", bootstrap_identity),
        ("scaled logistic study, clean", scaled_setting_clean),
        ("scaled logistic study, contaminated", scaled_setting_contaminated),
        ("scaled random-intercept study", scaled_glmm),
        ("variance calibration", variance_calibration),
        ("determinism", determinism),
        ("separation robustness", separation_robustness),
    ];
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    // written past the test harness capture so the lines always show
    let mut err = std::io::stderr();
    let mut failed = Vec::new();
    for (i, (title, run)) in criteria.iter().enumerate() {
        let k = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&k)) {
            continue;
        }
        let v = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            verdict(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        writeln!(err, "criterion {k:2} {}: {title}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail).unwrap();
        if !v.pass {
            failed.push(k);
        }
    }
    writeln!(err, "acceptance: {} failing {:?}", if failed.is_empty() { "all pass" } else { "some" }, failed).unwrap();
    if strict {
        assert!(failed.is_empty(), "failing criteria {failed:?}");
    }
}
