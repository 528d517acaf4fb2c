//! Regenerate the two 50-cluster random-intercept fixtures. Run from the
//! crate root: `cargo run --example write_glmm_fixtures`.

use iterboot::harness::SimSetting;
use iterboot::rng::SeedSet;
use iterboot::sim::{draw_covariates, simulate_glmm, Dataset, GlmmDesign, VarianceScale};

fn main() {
    let fixtures = [
        ("glmm_m50_q29.csv", SimSetting::full_glmm_2(), 2024),
        // q = 6 keeps the raw likelihood maximum interior
        ("glmm_m50_q6.csv", SimSetting::glmm("m50", 6, 50, 5, 50, 1), 2030),
    ];
    for (file, s, seed) in fixtures {
        let seeds = SeedSet::new(seed, 1);
        let x = draw_covariates(s.n, s.q, s.covariate_mean, s.covariate_variance(), &mut seeds.design());
        let d = GlmmDesign::balanced(x.clone(), 50, 5).unwrap();
        let y = simulate_glmm(&d, &s.truth(), VarianceScale::Variance, &mut seeds.observed()).unwrap();
        let ds = Dataset { x, y, cluster: Some(d.cluster().to_vec()) };
        ds.write_csv(std::fs::File::create(format!("tests/fixtures/{file}")).unwrap()).unwrap();
    }
}
