#![allow(dead_code)]

use iterboot::ib::{Binding, IbConfig};
use iterboot::linalg::pairwise_mean;
use iterboot::rng::SeedSet;
use nalgebra::DVector;

/// Bootstrap bias correction written out by hand:
/// `2 pi_obs - (1/H) sum_h pi*_h(pi_obs)` over the IB seed batch.
pub fn efron_bias_corrected<B: Binding>(binding: &B, pi_obs: &DVector<f64>, h: usize, seed: u64) -> DVector<f64> {
    let seeds = SeedSet::new(seed, h);
    let fits: Vec<DVector<f64>> = (1..=h)
        .map(|i| binding.simulate_estimate(pi_obs, &mut seeds.simulation(i, 0)).expect("fit"))
        .collect();
    pi_obs * 2.0 - pairwise_mean(&fits)
}

pub fn first_iterate<B: Binding>(binding: &B, pi_obs: &DVector<f64>, h: usize, seed: u64) -> DVector<f64> {
    let cfg = IbConfig { max_iter: 1, ..IbConfig::monte_carlo(h, seed) };
    let out = iterboot::ib::ib_run(pi_obs, binding, &cfg).expect("ib run");
    out.trace.iterates[1].clone()
}
