#![allow(dead_code)]

use conveyor_marl::neural::Mlp;
use rand::Rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero entries from
/// turning rounding noise into large ratios.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between `analytic` and central differences of `f`.
pub fn fd_max_rel_err<F: Fn(&Mlp) -> f64>(net: &Mlp, analytic: &[f64], f: F) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for i in 0..net.params().len() {
        let orig = net.params()[i];
        probe.params_mut()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.params_mut()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

/// Layer-by-layer forward pass over the documented flat layout: for each
/// layer a row-major `[out][in]` weight block followed by `out` biases.
pub fn forward_oracle(sizes: &[usize], params: &[f64], x: &[f64]) -> Vec<f64> {
    let mut off = 0;
    let mut h = x.to_vec();
    for l in 0..sizes.len() - 1 {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let w: Vec<Vec<f64>> = (0..n_out).map(|o| params[off + o * n_in..off + (o + 1) * n_in].to_vec()).collect();
        let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
        let mut z = vec![0.0; n_out];
        for o in 0..n_out {
            let mut acc = b[o];
            for i in 0..n_in {
                acc += w[o][i] * h[i];
            }
            z[o] = if l + 2 < sizes.len() { acc.max(0.0) } else { acc };
        }
        h = z;
        off += n_in * n_out + n_out;
    }
    h
}

pub fn random_sizes<R: Rng>(rng: &mut R, out: usize) -> Vec<usize> {
    let depth = rng.random_range(1..=3);
    let mut s = vec![rng.random_range(2..=6)];
    for _ in 1..depth {
        s.push(rng.random_range(2..=6));
    }
    s.push(out);
    s
}

pub fn random_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

use std::sync::Arc;

use conveyor_marl::env::{ConveyorEnv, EnvConfig};
use conveyor_marl::marl::TrainConfig;
use conveyor_marl::sim::DemandModel;
use conveyor_marl::topology::build_default_preset;

pub fn env(steps: u64) -> ConveyorEnv {
    let t = Arc::new(build_default_preset());
    let d = DemandModel::default_for(&t);
    ConveyorEnv::new(t, d, EnvConfig { episode_steps: steps, ..EnvConfig::default() }).unwrap()
}

/// A training run small enough for unit-speed tests.
pub fn tiny_train(episodes: usize) -> TrainConfig {
    TrainConfig { episodes, eval_every: 2, eval_episodes: 1, hidden: vec![16, 16], ..TrainConfig::default() }
}
