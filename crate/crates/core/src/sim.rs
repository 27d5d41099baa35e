//! NVE molecular dynamics, FIRE relaxation and inference benchmarking.
//!
//! Toy units throughout: unit masses, `k_B = 1`.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph, NeighborGraph};
use crate::mole::merge_model;
use crate::potential::{EnergyModel, PotentialModel};
use crate::reference::ReferenceScheme;
use crate::systems::{AtomicSystem, Vec3};

pub use crate::mole::{expert_usage, ExpertUsage};

/// Closest approach tolerated before a trajectory is declared blown up.
pub const BLOW_UP_DISTANCE: f64 = 0.1;

/// Maps a model trained on normalized targets back to physical units.
#[derive(Debug, Clone, Copy)]
pub struct Physical<'a, M: ?Sized> {
    pub model: &'a M,
    pub scheme: &'a ReferenceScheme,
}

impl<M: EnergyModel + ?Sized> EnergyModel for Physical<'_, M> {
    fn cutoff(&self) -> f64 {
        self.model.cutoff()
    }

    fn energy_forces(&self, system: &AtomicSystem, graph: &NeighborGraph) -> Result<(f64, Vec<Vec3>)> {
        let (e, f) = self.model.energy_forces(system, graph)?;
        let energy = self.scheme.energy_from_target(system, e / system.len() as f64)?;
        Ok((energy, self.scheme.force_from_target(&f)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdConfig {
    pub dt: f64,
    pub n_steps: usize,
    /// Initial Maxwell-Boltzmann temperature.
    pub temperature: f64,
    pub seed: u64,
    pub rebuild_graph_every: usize,
    /// Energy scale in the drift denominator `n_atoms · k_ref`.
    pub k_ref: f64,
    pub drift_threshold: f64,
    /// Record a frame every this many steps (0: none).
    pub frame_every: usize,
}

impl Default for MdConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            n_steps: 1000,
            temperature: 0.05,
            seed: 0,
            rebuild_graph_every: 1,
            k_ref: 1.0,
            drift_threshold: 1e-4,
            frame_every: 0,
        }
    }
}

impl MdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.n_steps == 0 || self.rebuild_graph_every == 0 || !(self.k_ref > 0.0) || !(self.temperature >= 0.0) {
            return Err(Error::Config("md needs dt > 0, n_steps >= 1, rebuild_graph_every >= 1, k_ref > 0, temperature >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergySample {
    pub step: usize,
    pub potential: f64,
    pub kinetic: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConservationReport {
    /// `max_t |E(t) − E(0)| / (n_atoms · k_ref)`
    pub drift: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub energies: Vec<EnergySample>,
    pub frames: Vec<AtomicSystem>,
    pub report: ConservationReport,
}

fn kinetic(v: &[Vec3]) -> f64 {
    0.5 * v.iter().map(|x| x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sum::<f64>()
}

/// Maxwell-Boltzmann velocities at `temperature` with zero net momentum.
pub fn initial_velocities(n: usize, temperature: f64, seed: u64) -> Vec<Vec3> {
    if temperature == 0.0 || n == 0 {
        return vec![[0.0; 3]; n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, temperature.sqrt()).expect("finite temperature");
    let mut v: Vec<Vec3> = (0..n).map(|_| [dist.sample(&mut rng), dist.sample(&mut rng), dist.sample(&mut rng)]).collect();
    let mut mean = [0.0; 3];
    for x in &v {
        for k in 0..3 {
            mean[k] += x[k] / n as f64;
        }
    }
    for x in &mut v {
        for k in 0..3 {
            x[k] -= mean[k];
        }
    }
    v
}

fn check_blow_up(graph: &NeighborGraph, step: usize) -> Result<()> {
    for (e, v) in graph.edges.iter().zip(&graph.edge_vectors) {
        let d = crate::graph::norm(v);
        if d < BLOW_UP_DISTANCE {
            return Err(Error::BlowUp { step, i: e.src, j: e.dst, distance: d });
        }
    }
    Ok(())
}

fn refresh(graph: &mut NeighborGraph, system: &AtomicSystem, cutoff: f64, step: usize, every: usize) -> Result<()> {
    if step.is_multiple_of(every) {
        *graph = build_graph(system, cutoff, None)?;
    } else {
        graph.update_vectors(system);
    }
    Ok(())
}

/// Velocity-Verlet NVE run.
pub fn run_nve<M: EnergyModel + ?Sized>(model: &M, system: &AtomicSystem, cfg: &MdConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let mut sys = system.clone();
    sys.labels = None;
    let n = sys.len();
    let cutoff = model.cutoff();
    let mut graph = build_graph(&sys, cutoff, None)?;
    check_blow_up(&graph, 0)?;
    let mut vel = initial_velocities(n, cfg.temperature, cfg.seed);
    let (mut pot, mut forces) = model.energy_forces(&sys, &graph)?;
    let mut energies = vec![EnergySample { step: 0, potential: pot, kinetic: kinetic(&vel), total: pot + kinetic(&vel) }];
    let mut frames = Vec::new();
    if cfg.frame_every > 0 {
        frames.push(sys.clone());
    }
    let dt = cfg.dt;
    for step in 1..=cfg.n_steps {
        for i in 0..n {
            for k in 0..3 {
                vel[i][k] += 0.5 * dt * forces[i][k];
                sys.positions[i][k] += dt * vel[i][k];
            }
        }
        refresh(&mut graph, &sys, cutoff, step, cfg.rebuild_graph_every)?;
        check_blow_up(&graph, step)?;
        (pot, forces) = model.energy_forces(&sys, &graph)?;
        for i in 0..n {
            for k in 0..3 {
                vel[i][k] += 0.5 * dt * forces[i][k];
            }
        }
        let ke = kinetic(&vel);
        energies.push(EnergySample { step, potential: pot, kinetic: ke, total: pot + ke });
        if cfg.frame_every > 0 && step % cfg.frame_every == 0 {
            frames.push(sys.clone());
        }
    }
    let e0 = energies[0].total;
    let worst = energies.iter().map(|e| (e.total - e0).abs()).fold(0.0, f64::max);
    let drift = worst / (n as f64 * cfg.k_ref);
    let report = ConservationReport { drift, threshold: cfg.drift_threshold, pass: drift <= cfg.drift_threshold };
    Ok(Trajectory { energies, frames, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FireConfig {
    pub dt_start: f64,
    pub dt_max: f64,
    pub n_min: usize,
    pub f_inc: f64,
    pub f_dec: f64,
    pub alpha_start: f64,
    pub f_alpha: f64,
    /// Largest displacement of any atom per step.
    pub max_move: f64,
    pub max_rejections: usize,
}

impl Default for FireConfig {
    fn default() -> Self {
        Self {
            dt_start: 0.01,
            dt_max: 0.1,
            n_min: 5,
            f_inc: 1.1,
            f_dec: 0.5,
            alpha_start: 0.1,
            f_alpha: 0.99,
            max_move: 0.1,
            max_rejections: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxResult {
    pub system: AtomicSystem,
    /// Accepted steps.
    pub steps: usize,
    /// Energy after each accepted step, starting with the input.
    pub energies: Vec<f64>,
    pub fmax: f64,
    pub converged: bool,
}

fn max_force(f: &[Vec3]) -> f64 {
    f.iter().map(crate::graph::norm).fold(0.0, f64::max)
}

/// FIRE descent. Proposals that raise the energy are undone, the velocity
/// is zeroed and the step halved; `max_rejections` in a row abort.
pub fn relax<M: EnergyModel + ?Sized>(model: &M, system: &AtomicSystem, max_steps: usize, fmax: f64, cfg: &FireConfig) -> Result<RelaxResult> {
    let mut sys = system.clone();
    sys.labels = None;
    let n = sys.len();
    let cutoff = model.cutoff();
    let (mut energy, mut forces) = model.evaluate(&sys)?;
    let mut energies = vec![energy];
    let mut vel = vec![[0.0; 3]; n];
    let (mut dt, mut alpha, mut since_neg, mut rejected, mut steps) = (cfg.dt_start, cfg.alpha_start, 0usize, 0usize, 0usize);
    while max_force(&forces) > fmax && steps < max_steps {
        let p: f64 = vel.iter().zip(&forces).map(|(v, f)| v[0] * f[0] + v[1] * f[1] + v[2] * f[2]).sum();
        if p > 0.0 {
            let vn = vel.iter().map(|v| v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sum::<f64>().sqrt();
            let fnorm = forces.iter().map(|f| f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sum::<f64>().sqrt();
            for (v, f) in vel.iter_mut().zip(&forces) {
                for k in 0..3 {
                    v[k] = (1.0 - alpha) * v[k] + alpha * f[k] * vn / fnorm.max(f64::MIN_POSITIVE);
                }
            }
            since_neg += 1;
            if since_neg > cfg.n_min {
                dt = (dt * cfg.f_inc).min(cfg.dt_max);
                alpha *= cfg.f_alpha;
            }
        } else {
            vel.iter_mut().for_each(|v| *v = [0.0; 3]);
            since_neg = 0;
            dt *= cfg.f_dec;
            alpha = cfg.alpha_start;
        }
        // Euler step on the mixed velocity, capped per atom.
        let mut proposal = sys.clone();
        for i in 0..n {
            for k in 0..3 {
                vel[i][k] += dt * forces[i][k];
            }
            let step: Vec3 = [dt * vel[i][0], dt * vel[i][1], dt * vel[i][2]];
            let len = crate::graph::norm(&step);
            let s = if len > cfg.max_move { cfg.max_move / len } else { 1.0 };
            for k in 0..3 {
                proposal.positions[i][k] += s * step[k];
            }
        }
        let graph = build_graph(&proposal, cutoff, None)?;
        let (e_new, f_new) = model.energy_forces(&proposal, &graph)?;
        if e_new > energy {
            rejected += 1;
            if rejected >= cfg.max_rejections {
                return Err(Error::RelaxDiverged(rejected));
            }
            vel.iter_mut().for_each(|v| *v = [0.0; 3]);
            dt *= cfg.f_dec;
            alpha = cfg.alpha_start;
            since_neg = 0;
            continue;
        }
        rejected = 0;
        sys = proposal;
        energy = e_new;
        forces = f_new;
        energies.push(energy);
        steps += 1;
    }
    let fm = max_force(&forces);
    Ok(RelaxResult { system: sys, steps, energies, fmax: fm, converged: fm <= fmax })
}

/// A model entry in a benchmark.
#[derive(Debug, Clone, Copy)]
pub struct BenchModel<'a> {
    pub name: &'a str,
    pub model: &'a PotentialModel,
    /// Merge experts for each benchmark system before timing.
    pub merge: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum BenchCell {
    /// Median energy+force calls per second.
    Rate(f64),
    /// Estimated working set above the memory limit; not run.
    Oom,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchTable {
    pub sizes: Vec<usize>,
    pub models: Vec<String>,
    /// `cells[model][size]`
    pub cells: Vec<Vec<BenchCell>>,
}

impl BenchTable {
    pub fn rate(&self, model: &str, size_index: usize) -> Option<f64> {
        let m = self.models.iter().position(|x| x == model)?;
        match self.cells[m][size_index] {
            BenchCell::Rate(r) => Some(r),
            BenchCell::Oom => None,
        }
    }

    /// `rate(a) / rate(b)` per size.
    pub fn ratio(&self, a: &str, b: &str) -> Vec<Option<f64>> {
        (0..self.sizes.len()).map(|i| Some(self.rate(a, i)? / self.rate(b, i)?)).collect()
    }

    pub fn to_table(&self) -> String {
        let w = self.models.iter().map(String::len).max().unwrap_or(5).max(5);
        let mut out = format!("{:<w$}", "model");
        for s in &self.sizes {
            out.push_str(&format!(" {:>12}", format!("n={s}")));
        }
        out.push('\n');
        for (name, row) in self.models.iter().zip(&self.cells) {
            out.push_str(&format!("{name:<w$}"));
            for c in row {
                match c {
                    BenchCell::Rate(r) => out.push_str(&format!(" {:>12.2}", r)),
                    BenchCell::Oom => out.push_str(&format!(" {:>12}", "OOM")),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub repeats: usize,
    /// Minimum wall time per timed sample; calls are batched to reach it.
    pub min_sample_secs: f64,
    pub density: f64,
    pub seed: u64,
    pub memory_limit_bytes: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { sizes: vec![16, 32, 64], repeats: 10, min_sample_secs: 0.02, density: 0.3, seed: 0, memory_limit_bytes: 4e9 }
    }
}

/// Rough tape footprint of one energy+force call.
pub fn estimate_memory(model: &PotentialModel, n_atoms: usize, n_edges: usize) -> f64 {
    let c = model.config.channels as f64;
    let per_block = 12.0 * n_edges as f64 * c + 12.0 * n_atoms as f64 * (c + model.config.ffn_hidden as f64);
    // Values and adjoints, eight bytes each, plus a full parameter copy.
    2.0 * 8.0 * (per_block * model.config.blocks as f64 + model.params.total() as f64)
}

/// Random cluster of `n` atoms for benchmarking (species 1, task of the
/// model's first tag).
pub fn bench_system(model: &PotentialModel, n: usize, density: f64, seed: u64) -> Result<AtomicSystem> {
    let mut oracle = crate::data::TaskOracle::bundled("lj-a")?;
    oracle.task = model.config.tasks[0].clone();
    oracle.species_pool = vec![1];
    let cfg = crate::data::GenConfig { n_systems: 1, min_atoms: n, max_atoms: n, density, seed, ..Default::default() };
    let mut sys = crate::data::generate_dataset(&oracle, &cfg)?.remove(0);
    sys.labels = None;
    Ok(sys)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Energy+force throughput per model and size. Samples of different models
/// are interleaved so that machine noise affects all of them alike.
pub fn bench_inference(models: &[BenchModel], cfg: &BenchConfig) -> Result<BenchTable> {
    if models.is_empty() || cfg.repeats == 0 {
        return Err(Error::Config("bench needs at least one model and one repeat".into()));
    }
    let cutoff = models[0].model.config.cutoff;
    if models.iter().any(|m| m.model.config.cutoff != cutoff) {
        return Err(Error::Config("benchmarked models must share a cutoff".into()));
    }
    let mut cells = vec![Vec::with_capacity(cfg.sizes.len()); models.len()];
    for (si, &n) in cfg.sizes.iter().enumerate() {
        let sys = bench_system(models[0].model, n, cfg.density, cfg.seed.wrapping_add(si as u64))?;
        let graph = build_graph(&sys, cutoff, None)?;
        let mut runnable: Vec<Option<PotentialModel>> = Vec::with_capacity(models.len());
        for m in models {
            if estimate_memory(m.model, n, graph.n_edges()) > cfg.memory_limit_bytes {
                runnable.push(None);
            } else if m.merge {
                runnable.push(Some(merge_model(m.model, &sys.header())?.into_model()));
            } else {
                runnable.push(Some(m.model.clone()));
            }
        }
        // Calls per sample, from one warm-up call of the first runnable model.
        let mut calls = 1usize;
        if let Some(m) = runnable.iter().flatten().next() {
            let t = Instant::now();
            m.energy_and_forces(&sys, &graph)?;
            let one = t.elapsed().as_secs_f64().max(1e-7);
            calls = ((cfg.min_sample_secs / one).ceil() as usize).max(1);
        }
        let mut samples = vec![Vec::with_capacity(cfg.repeats); models.len()];
        for _ in 0..cfg.repeats {
            for (mi, m) in runnable.iter().enumerate() {
                let Some(m) = m else { continue };
                let t = Instant::now();
                for _ in 0..calls {
                    m.energy_and_forces(&sys, &graph)?;
                }
                samples[mi].push(calls as f64 / t.elapsed().as_secs_f64());
            }
        }
        for (mi, s) in samples.into_iter().enumerate() {
            cells[mi].push(if runnable[mi].is_none() { BenchCell::Oom } else { BenchCell::Rate(median(s)) });
        }
    }
    Ok(BenchTable { sizes: cfg.sizes.clone(), models: models.iter().map(|m| m.name.to_string()).collect(), cells })
}
