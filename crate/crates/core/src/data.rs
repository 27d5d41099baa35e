//! Analytic oracle tasks, dataset generation, sampling plans and max-atom
//! batch packing.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph, DEFAULT_CUTOFF};
use crate::systems::{AtomicSystem, Labels, Vec3};
use crate::tape::{envelope, envelope_deriv};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PairPotential {
    LennardJones { epsilon: f64, sigma: f64 },
    Morse { depth: f64, a: f64, r_e: f64 },
}

impl PairPotential {
    /// `(V(r), dV/dr)` without the envelope.
    pub fn eval(&self, r: f64) -> (f64, f64) {
        match *self {
            PairPotential::LennardJones { epsilon, sigma } => {
                let s6 = (sigma / r).powi(6);
                let s12 = s6 * s6;
                (4.0 * epsilon * (s12 - s6), 4.0 * epsilon * (-12.0 * s12 + 6.0 * s6) / r)
            }
            PairPotential::Morse { depth, a, r_e } => {
                let x = (-a * (r - r_e)).exp();
                (depth * ((1.0 - x) * (1.0 - x) - 1.0), 2.0 * depth * a * x * (1.0 - x))
            }
        }
    }

    /// Characteristic length: σ for Lennard-Jones, r_e for Morse.
    pub fn length(&self) -> f64 {
        match *self {
            PairPotential::LennardJones { sigma, .. } => sigma,
            PairPotential::Morse { r_e, .. } => r_e,
        }
    }
}

/// One synthetic "DFT setting": a pair potential plus per-species offsets
/// and linear charge/spin terms, all under the model's envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOracle {
    pub task: String,
    pub pair: PairPotential,
    pub species_offsets: BTreeMap<u8, f64>,
    pub charge_coef: f64,
    pub spin_coef: f64,
    pub cutoff: f64,
    /// Species drawn when generating systems for this task.
    pub species_pool: Vec<u8>,
}

pub const BUNDLED_TASKS: [&str; 3] = ["lj-a", "lj-b", "morse"];

impl TaskOracle {
    pub fn bundled(task: &str) -> Result<Self> {
        let offsets = |f: fn(f64) -> f64| (1..=crate::systems::MAX_SPECIES).map(|z| (z, f(z as f64))).collect();
        let oracle = match task {
            "lj-a" => Self {
                task: task.into(),
                pair: PairPotential::LennardJones { epsilon: 1.0, sigma: 1.0 },
                species_offsets: offsets(|s| -0.5 * s - 1.0),
                charge_coef: 0.0,
                spin_coef: 0.0,
                cutoff: DEFAULT_CUTOFF,
                species_pool: vec![1, 2, 3, 6],
            },
            "lj-b" => Self {
                task: task.into(),
                pair: PairPotential::LennardJones { epsilon: 0.5, sigma: 1.2 },
                species_offsets: offsets(|s| -0.8 * s + 0.3 * (s % 3.0) - 0.1),
                charge_coef: 0.3,
                spin_coef: -0.2,
                cutoff: DEFAULT_CUTOFF,
                species_pool: vec![1, 2, 4, 6],
            },
            "morse" => Self {
                task: task.into(),
                pair: PairPotential::Morse { depth: 1.0, a: 1.5, r_e: 1.1 },
                species_offsets: offsets(|s| -0.3 * s - 2.0),
                charge_coef: 0.0,
                spin_coef: 0.0,
                cutoff: DEFAULT_CUTOFF,
                species_pool: vec![1, 3, 5, 6],
            },
            other => return Err(Error::UnknownTask(other.to_string())),
        };
        Ok(oracle)
    }

    /// `Σ offsets + c_q q + c_s s + ½ Σ_edges V(r) env(r)` and its exact
    /// negative gradient.
    pub fn energy_forces(&self, system: &AtomicSystem) -> Result<(f64, Vec<Vec3>)> {
        let mut energy = self.charge_coef * system.charge as f64 + self.spin_coef * system.spin as f64;
        for &z in &system.species {
            energy += self.species_offsets.get(&z).ok_or(Error::UnknownSpecies(z))?;
        }
        let graph = build_graph(system, self.cutoff, None)?;
        let mut forces = vec![[0.0; 3]; system.len()];
        for (edge, v) in graph.edges.iter().zip(&graph.edge_vectors) {
            let r = crate::graph::norm(v);
            let (p, dp) = self.pair.eval(r);
            let (e, de) = (envelope(r, self.cutoff), envelope_deriv(r, self.cutoff));
            energy += 0.5 * p * e;
            // v points src → dst; dE/dv = ½ (V e)' v/r
            let g = 0.5 * (dp * e + p * de) / r;
            for k in 0..3 {
                forces[edge.dst][k] -= g * v[k];
                forces[edge.src][k] += g * v[k];
            }
        }
        Ok((energy, forces))
    }

    pub fn label(&self, system: &mut AtomicSystem) -> Result<()> {
        let (energy, forces) = self.energy_forces(system)?;
        system.labels = Some(Labels { energy, forces });
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_systems: usize,
    pub min_atoms: usize,
    pub max_atoms: usize,
    /// Atoms per unit volume, in units of the oracle length cubed.
    pub density: f64,
    /// Minimum pair distance, in units of the oracle length.
    pub min_separation: f64,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { n_systems: 100, min_atoms: 4, max_atoms: 16, density: 0.3, min_separation: 0.7, max_attempts: 2000, seed: 0 }
    }
}

/// Random non-periodic clusters labeled by `oracle`.
pub fn generate_dataset(oracle: &TaskOracle, cfg: &GenConfig) -> Result<Vec<AtomicSystem>> {
    if cfg.min_atoms < 2 || cfg.max_atoms > 64 || cfg.min_atoms > cfg.max_atoms {
        return Err(Error::Config(format!("size range {}..={} must lie within [2, 64]", cfg.min_atoms, cfg.max_atoms)));
    }
    if !(cfg.density > 0.0) || !(cfg.min_separation > 0.0) {
        return Err(Error::Config("density and min_separation must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let length = oracle.pair.length();
    let min_sep = cfg.min_separation * length;
    let charged = oracle.charge_coef != 0.0 || oracle.spin_coef != 0.0;
    let mut out = Vec::with_capacity(cfg.n_systems);
    for _ in 0..cfg.n_systems {
        let n = rng.random_range(cfg.min_atoms..=cfg.max_atoms);
        let side = (n as f64 / cfg.density).cbrt() * length;
        let mut positions: Vec<Vec3> = Vec::with_capacity(n);
        let mut attempts = 0;
        while positions.len() < n {
            attempts += 1;
            if attempts > cfg.max_attempts * n {
                return Err(Error::Placement { attempts: attempts - 1, n_atoms: n });
            }
            let p = [rng.random_range(0.0..side), rng.random_range(0.0..side), rng.random_range(0.0..side)];
            let clear = positions.iter().all(|q| {
                let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                crate::graph::norm(&d) >= min_sep
            });
            if clear {
                positions.push(p);
            }
        }
        let species = (0..n).map(|_| oracle.species_pool[rng.random_range(0..oracle.species_pool.len())]).collect();
        let mut sys = AtomicSystem::molecule(positions, species, &oracle.task);
        if charged {
            sys.charge = rng.random_range(-2..=2);
            sys.spin = rng.random_range(0..=2);
        }
        oracle.label(&mut sys)?;
        out.push(sys);
    }
    Ok(out)
}

/// Indices into a system list whose atom total is bounded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBatch {
    pub indices: Vec<usize>,
    pub n_atoms: usize,
}

/// First-fit-decreasing over a shuffled order (ties broken by the shuffle).
pub fn pack_batches(sizes: &[usize], max_atoms: usize, seed: u64) -> Result<Vec<PackedBatch>> {
    if let Some((index, &n_atoms)) = sizes.iter().enumerate().find(|(_, &n)| n > max_atoms) {
        return Err(Error::SystemTooLarge { index, n_atoms, max_atoms });
    }
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by(|a, b| sizes[*b].cmp(&sizes[*a]));
    let mut batches: Vec<PackedBatch> = Vec::new();
    for i in order {
        match batches.iter_mut().find(|b| b.n_atoms + sizes[i] <= max_atoms) {
            Some(b) => {
                b.indices.push(i);
                b.n_atoms += sizes[i];
            }
            None => batches.push(PackedBatch { indices: vec![i], n_atoms: sizes[i] }),
        }
    }
    Ok(batches)
}

/// Positive integer sampling ratio per task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub ratios: BTreeMap<String, u32>,
}

impl SamplingPlan {
    pub fn new(ratios: BTreeMap<String, u32>) -> Result<Self> {
        if ratios.is_empty() {
            return Err(Error::Plan("empty plan".into()));
        }
        if let Some((t, _)) = ratios.iter().find(|(_, &r)| r == 0) {
            return Err(Error::Plan(format!("ratio for `{t}` must be at least 1")));
        }
        Ok(Self { ratios })
    }

    pub fn uniform<S: AsRef<str>>(tasks: &[S]) -> Self {
        Self { ratios: tasks.iter().map(|t| (t.as_ref().to_string(), 1)).collect() }
    }

    pub fn total(&self) -> u32 {
        self.ratios.values().sum()
    }
}

impl FromStr for SamplingPlan {
    type Err = Error;

    /// `task=ratio,task=ratio`
    fn from_str(s: &str) -> Result<Self> {
        let mut ratios = BTreeMap::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (task, ratio) = part.split_once('=').ok_or_else(|| Error::Plan(format!("`{part}` is not task=ratio")))?;
            let task = task.trim();
            if task.is_empty() {
                return Err(Error::Plan(format!("empty task name in `{part}`")));
            }
            let ratio: u32 = ratio.trim().parse().map_err(|_| Error::Plan(format!("bad ratio in `{part}`")))?;
            if ratios.insert(task.to_string(), ratio).is_some() {
                return Err(Error::Plan(format!("task `{task}` listed twice")));
            }
        }
        Self::new(ratios)
    }
}

impl fmt::Display for SamplingPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.ratios.iter().map(|(t, r)| format!("{t}={r}")).collect();
        f.write_str(&parts.join(","))
    }
}

/// `len` draws of `(task, index)`. Tasks follow smooth weighted round-robin
/// on the plan ratios; within a task, indices cycle through fresh shuffles.
pub fn interleave_tasks(
    dataset_sizes: &BTreeMap<String, usize>,
    plan: &SamplingPlan,
    len: usize,
    seed: u64,
) -> Result<Vec<(String, usize)>> {
    for task in plan.ratios.keys() {
        match dataset_sizes.get(task) {
            None | Some(0) => return Err(Error::Plan(format!("no systems for planned task `{task}`"))),
            _ => {}
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tasks: Vec<(&String, i64)> = plan.ratios.iter().map(|(t, r)| (t, *r as i64)).collect();
    let total: i64 = tasks.iter().map(|t| t.1).sum();
    let mut current = vec![0i64; tasks.len()];
    let mut orders: Vec<Vec<usize>> = vec![Vec::new(); tasks.len()];
    let mut cursor = vec![0usize; tasks.len()];
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        for (c, t) in current.iter_mut().zip(&tasks) {
            *c += t.1;
        }
        let pick = (0..tasks.len()).max_by_key(|&i| (current[i], std::cmp::Reverse(i))).expect("non-empty plan");
        current[pick] -= total;
        if cursor[pick] == orders[pick].len() {
            let mut order: Vec<usize> = (0..dataset_sizes[tasks[pick].0]).collect();
            order.shuffle(&mut rng);
            orders[pick] = order;
            cursor[pick] = 0;
        }
        out.push((tasks[pick].0.clone(), orders[pick][cursor[pick]]));
        cursor[pick] += 1;
    }
    Ok(out)
}
