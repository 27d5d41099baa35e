#![allow(dead_code)]

use molekit::data::{generate_dataset, GenConfig, TaskOracle};
use molekit::systems::{AtomicSystem, Vec3};
use molekit::ModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config(experts: usize) -> ModelConfig {
    ModelConfig { channels: 8, blocks: 2, experts, n_rbf: 6, ffn_hidden: 12, router_hidden: 8, ..Default::default() }
}

/// Labeled random clusters of the given task with sizes in `lo..=hi`.
pub fn clusters(task: &str, n: usize, lo: usize, hi: usize, seed: u64) -> Vec<AtomicSystem> {
    let oracle = TaskOracle::bundled(task).unwrap();
    let cfg = GenConfig { n_systems: n, min_atoms: lo, max_atoms: hi, seed, ..Default::default() };
    generate_dataset(&oracle, &cfg).unwrap()
}

pub fn cluster(task: &str, n_atoms: usize, seed: u64) -> AtomicSystem {
    clusters(task, 1, n_atoms, n_atoms, seed).remove(0)
}

/// Uniform random rotation from a normalized Gaussian quaternion.
pub fn random_rotation(seed: u64) -> [[f64; 3]; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: [f64; 4] = [0.0; 4];
    for x in &mut q {
        *x = rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn rotate(r: &[[f64; 3]; 3], v: &Vec3) -> Vec3 {
    [0, 1, 2].map(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2])
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

use molekit::scaling::{Ansatz, RunRecord};

/// Compute-optimal size implied by an ansatz with `E = 0` at budget `c`.
pub fn ansatz_optimum(t: &Ansatz, c: f64, kappa: f64) -> f64 {
    let s = t.alpha_hat + t.beta_hat;
    (t.alpha_hat * t.a / (t.beta_hat * t.b)).powf(1.0 / s) * (c / kappa).powf(t.beta_hat / s)
}

/// Iso-FLOP sweep: `budgets` half-decade budgets from `c0`, seven sizes per
/// budget spaced 0.3 decades around the optimum, losses with lognormal
/// noise of relative scale `noise`.
pub fn ansatz_records(t: &Ansatz, c0: f64, budgets: usize, kappa: f64, noise: f64, seed: u64) -> Vec<RunRecord> {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut out = Vec::new();
    for ci in 0..budgets {
        let c = c0 * 10f64.powf(0.5 * ci as f64);
        let centre = ansatz_optimum(t, c, kappa).log10();
        for ni in 0..7 {
            let n = 10f64.powf(centre + 0.3 * (ni as f64 - 3.0));
            let d = c / (kappa * n);
            let loss = t.loss(n, d) * (noise * normal.sample(&mut rng)).exp();
            out.push(RunRecord { n, d, c, loss, tag: format!("c{ci}") });
        }
    }
    out
}
