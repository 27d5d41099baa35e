//! Two-stage training.
//!
//! Stage `direct` fits energies and a separate force head. Stage
//! `conservative` drops that head and fits `−∇E` instead; the parameter
//! gradient of a force loss then needs a Hessian-vector product, which is
//! taken by central differences of the parameter gradient along the force
//! residual direction.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{interleave_tasks, pack_batches, SamplingPlan};
use crate::error::{Error, Result};
use crate::graph::NeighborGraph;
use crate::potential::{ForwardOptions, ModelConfig, PotentialModel};
use crate::reference::{force_rms, ReferenceScheme};
use crate::systems::{AtomicSystem, Vec3};
use crate::tape::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Direct,
    Conservative,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Direct => "direct",
            Stage::Conservative => "conservative",
        })
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Stage::Direct),
            "conservative" => Ok(Stage::Conservative),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Absolute per-atom energy error and L2 norm of per-atom force error.
    #[default]
    Mae,
    /// Squared versions of both.
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub energy_coef: f64,
    pub force_coef: f64,
    /// Stress is not modeled; only 0 is accepted.
    pub stress_coef: f64,
    /// Per-task replacement for `energy_coef`.
    pub task_energy_coef: BTreeMap<String, f64>,
    pub loss: LossKind,
    pub max_lr: f64,
    pub warmup_fraction: f64,
    pub warmup_factor: f64,
    pub cosine: bool,
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub weight_decay: f64,
    pub max_atoms: usize,
    /// Neighbor cap; `None` keeps every neighbor.
    pub max_neighbors: Option<usize>,
    /// `task=ratio,...`; empty means ratio 1 for every task present.
    pub plan: String,
    pub seed: u64,
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let base = Self::default();
        match stage {
            Stage::Direct => base,
            Stage::Conservative => Self {
                stage,
                energy_coef: 20.0,
                force_coef: 2.0,
                max_neighbors: None,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, c) in [("energy_coef", self.energy_coef), ("force_coef", self.force_coef)] {
            if !(c >= 0.0) {
                return bad(format!("{name} must be non-negative"));
            }
        }
        if self.stress_coef != 0.0 {
            return bad("stress is not modeled; stress_coef must be 0".into());
        }
        if let Some((t, _)) = self.task_energy_coef.iter().find(|(_, &c)| !(c >= 0.0)) {
            return bad(format!("energy coefficient for `{t}` must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1)".into());
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("ema_decay must lie in (0, 1)".into());
        }
        if !(self.max_lr > 0.0) || !(self.clip_norm > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("max_lr and clip_norm must be positive, weight_decay non-negative".into());
        }
        if self.max_atoms == 0 {
            return bad("max_atoms must be positive".into());
        }
        self.model.validate()
    }

    fn energy_coef_for(&self, task: &str) -> f64 {
        *self.task_energy_coef.get(task).unwrap_or(&self.energy_coef)
    }

    pub fn sampling_plan(&self, tasks: &[String]) -> Result<SamplingPlan> {
        if self.plan.trim().is_empty() {
            Ok(SamplingPlan::uniform(tasks))
        } else {
            self.plan.parse()
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Direct,
            steps: 2000,
            energy_coef: 10.0,
            force_coef: 30.0,
            stress_coef: 0.0,
            task_energy_coef: BTreeMap::new(),
            loss: LossKind::Mae,
            max_lr: 4e-4,
            warmup_fraction: 0.01,
            warmup_factor: 0.2,
            cosine: true,
            clip_norm: 100.0,
            ema_decay: 0.999,
            weight_decay: 1e-3,
            max_atoms: 64,
            max_neighbors: Some(30),
            plan: String::new(),
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

/// Linear warmup from `factor·max` to `max`, then cosine to zero.
pub fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    let total = cfg.steps.max(1) as f64;
    let warmup = (cfg.warmup_fraction * total).ceil();
    let t = step as f64;
    if t < warmup {
        return cfg.max_lr * (cfg.warmup_factor + (1.0 - cfg.warmup_factor) * t / warmup);
    }
    if !cfg.cosine {
        return cfg.max_lr;
    }
    let progress = ((t - warmup) / (total - warmup).max(1.0)).min(1.0);
    0.5 * cfg.max_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Parameters, AdamW moments and EMA shadow.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: PotentialModel,
    pub stage: Stage,
    pub ema: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
    pub seed: u64,
    pub reference: Option<ReferenceScheme>,
}

impl TrainState {
    pub fn new(model: PotentialModel, stage: Stage, seed: u64) -> Self {
        let n = model.params.total();
        Self {
            ema: model.params.data.clone(),
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            stage,
            seed,
            model,
            reference: None,
        }
    }

    /// Starts stage 2 from a stage-1 state: the force head is removed and
    /// the optimizer restarts.
    pub fn begin_conservative(&self) -> Result<Self> {
        let model = self.model.without_direct_head()?;
        let mut next = Self::new(model, Stage::Conservative, self.seed);
        next.reference = self.reference.clone();
        Ok(next)
    }

    /// The model with EMA parameters in place of the raw ones.
    pub fn ema_model(&self) -> PotentialModel {
        let mut m = self.model.clone();
        m.params.data.clone_from(&self.ema);
        m
    }
}

/// One step of AdamW with decoupled weight decay, then the EMA update.
pub fn adamw_step(state: &mut TrainState, grad: &[f64], lr: f64, cfg: &TrainConfig) {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - B1.powi(t), 1.0 - B2.powi(t));
    let params = &mut state.model.params.data;
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = B1 * state.m[i] + (1.0 - B1) * g;
        state.v[i] = B2 * state.v[i] + (1.0 - B2) * g * g;
        let update = (state.m[i] / c1) / ((state.v[i] / c2).sqrt() + EPS);
        params[i] -= lr * (update + cfg.weight_decay * params[i]);
    }
    let d = cfg.ema_decay;
    for (e, p) in state.ema.iter_mut().zip(params.iter()) {
        *e = d * *e + (1.0 - d) * p;
    }
}

/// Scales `grad` in place to global norm at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// A model prediction and its normalized target for one system.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub task: String,
    pub n_atoms: usize,
    pub energy: f64,
    pub energy_target: f64,
    pub forces: Vec<Vec3>,
    pub force_target: Vec<Vec3>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub energy: f64,
    pub force: f64,
}

fn force_error(kind: LossKind, pred: &Vec3, target: &Vec3) -> f64 {
    let d2: f64 = (0..3).map(|k| (pred[k] - target[k]).powi(2)).sum();
    match kind {
        LossKind::Mae => d2.sqrt(),
        LossKind::Mse => d2,
    }
}

fn energy_error(kind: LossKind, pred: f64, target: f64, n: usize) -> f64 {
    let d = (pred - target) / n as f64;
    match kind {
        LossKind::Mae => d.abs(),
        LossKind::Mse => d * d,
    }
}

/// `Σ_s c_E(task)·err_E(s) / n_systems + c_F · Σ_i err_F(i) / n_atoms`.
///
/// Energies are totals in normalized units; the error is taken per atom.
pub fn assemble_loss(preds: &[Prediction], cfg: &TrainConfig) -> Result<LossBreakdown> {
    if preds.is_empty() {
        return Ok(LossBreakdown::default());
    }
    let n_atoms: usize = preds.iter().map(|p| p.n_atoms).sum();
    let mut energy = 0.0;
    let mut force = 0.0;
    for p in preds {
        energy += cfg.energy_coef_for(&p.task) * energy_error(cfg.loss, p.energy, p.energy_target, p.n_atoms);
        for (f, t) in p.forces.iter().zip(&p.force_target) {
            force += force_error(cfg.loss, f, t);
        }
    }
    let energy = energy / preds.len() as f64;
    let force = cfg.force_coef * force / n_atoms.max(1) as f64;
    if !energy.is_finite() {
        return Err(Error::NonFiniteLoss { term: "energy" });
    }
    if !force.is_finite() {
        return Err(Error::NonFiniteLoss { term: "force" });
    }
    Ok(LossBreakdown { total: energy + force, energy, force })
}

/// Everything a system needs during training, precomputed once.
#[derive(Debug, Clone)]
pub struct Sample<'a> {
    pub system: &'a AtomicSystem,
    pub graph: NeighborGraph,
    pub energy_target: f64,
    pub force_target: Vec<Vec3>,
}

pub fn prepare_samples<'a>(
    systems: &'a [AtomicSystem],
    scheme: &ReferenceScheme,
    model: &PotentialModel,
    max_neighbors: Option<usize>,
) -> Result<Vec<Sample<'a>>> {
    systems
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let labels = s.labels.as_ref().ok_or_else(|| Error::MissingLabels(format!("system {i} has no labels")))?;
            Ok(Sample {
                system: s,
                graph: model.graph(s, max_neighbors)?,
                energy_target: scheme.energy_target(s, labels.energy)? * s.len() as f64,
                force_target: scheme.force_target(&labels.forces),
            })
        })
        .collect()
}

fn flatten_grads(grads: Vec<Tensor>, out: &mut [f64], scale: f64) {
    let mut off = 0;
    for g in grads {
        for (o, v) in out[off..off + g.len()].iter_mut().zip(&g.data) {
            *o += scale * v;
        }
        off += g.len();
    }
}

fn position_leaf_grad(tape: &Tape, energy: Var, positions: Var, params: &[Var]) -> Result<(Vec<Vec3>, Vec<Tensor>)> {
    let mut wrt = Vec::with_capacity(params.len() + 1);
    wrt.push(positions);
    wrt.extend_from_slice(params);
    let mut grads = tape.gradient(energy, &wrt)?;
    let dx = grads.remove(0);
    Ok((dx.data.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(), grads))
}

/// Derivative of one force error term with respect to the prediction.
fn force_error_grad(kind: LossKind, pred: &Vec3, target: &Vec3) -> Vec3 {
    let d = [pred[0] - target[0], pred[1] - target[1], pred[2] - target[2]];
    match kind {
        LossKind::Mae => {
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if n > 0.0 {
                [d[0] / n, d[1] / n, d[2] / n]
            } else {
                [0.0; 3]
            }
        }
        LossKind::Mse => [2.0 * d[0], 2.0 * d[1], 2.0 * d[2]],
    }
}

fn energy_error_grad(kind: LossKind, pred: f64, target: f64, n: usize) -> f64 {
    let nf = n as f64;
    let d = (pred - target) / nf;
    match kind {
        LossKind::Mae => d.signum() * (d != 0.0) as i32 as f64 / nf,
        LossKind::Mse => 2.0 * d / nf,
    }
}

/// Relative displacement used for the Hessian-vector product.
const HVP_STEP: f64 = 1e-4;

/// Loss over a batch and, when `grad` is given, its parameter gradient
/// accumulated into it.
pub fn batch_loss(
    model: &PotentialModel,
    batch: &[&Sample],
    cfg: &TrainConfig,
    mut grad: Option<&mut [f64]>,
) -> Result<(LossBreakdown, Vec<Prediction>)> {
    let n_atoms: usize = batch.iter().map(|s| s.system.len()).sum();
    let n_sys = batch.len() as f64;
    let wf = cfg.force_coef / n_atoms.max(1) as f64;
    let mut preds = Vec::with_capacity(batch.len());
    for s in batch {
        let n = s.system.len();
        let we = cfg.energy_coef_for(&s.system.task) / n_sys;
        let mut tape = Tape::new();
        let (energy, forces) = match cfg.stage {
            Stage::Direct => {
                let opts = ForwardOptions { direct_forces: true, ..Default::default() };
                let fw = model.forward(&mut tape, s.system, &s.graph, opts)?;
                let fv = fw.direct_forces.ok_or(Error::NoForceHead)?;
                let energy = tape.scalar_value(fw.energy);
                let forces = crate::potential::to_vec3s(tape.value(fv), 1.0);
                if let Some(g) = grad.as_deref_mut() {
                    // dL/dF contracted onto the taped direct forces.
                    let dl_df: Vec<f64> = forces
                        .iter()
                        .zip(&s.force_target)
                        .flat_map(|(f, t)| force_error_grad(cfg.loss, f, t))
                        .map(|v| wf * v)
                        .collect();
                    let w = tape.leaf(Tensor::new(n, 3, dl_df));
                    let fl = tape.mul(fv, w)?;
                    let fl = tape.sum(fl);
                    let de = we * energy_error_grad(cfg.loss, energy, s.energy_target, n);
                    let el = tape.scale(fw.energy, de);
                    let obj = tape.add(fl, el)?;
                    flatten_grads(tape.gradient(obj, &fw.params)?, g, 1.0);
                }
                (energy, forces)
            }
            Stage::Conservative => {
                let fw = model.forward(&mut tape, s.system, &s.graph, ForwardOptions::default())?;
                let energy = tape.scalar_value(fw.energy);
                let (dx, dtheta) = position_leaf_grad(&tape, fw.energy, fw.positions, &fw.params)?;
                let forces: Vec<Vec3> = dx.iter().map(|d| [-d[0], -d[1], -d[2]]).collect();
                if let Some(g) = grad.as_deref_mut() {
                    let de = we * energy_error_grad(cfg.loss, energy, s.energy_target, n);
                    flatten_grads(dtheta, g, de);
                    let dl_df: Vec<Vec3> = forces
                        .iter()
                        .zip(&s.force_target)
                        .map(|(f, t)| force_error_grad(cfg.loss, f, t))
                        .map(|v| [wf * v[0], wf * v[1], wf * v[2]])
                        .collect();
                    hvp_force_grad(model, s, &dl_df, g)?;
                }
                (energy, forces)
            }
        };
        preds.push(Prediction {
            task: s.system.task.clone(),
            n_atoms: n,
            energy,
            energy_target: s.energy_target,
            forces,
            force_target: s.force_target.clone(),
        });
    }
    Ok((assemble_loss(&preds, cfg)?, preds))
}

/// Adds `∂/∂θ Σ_i u_i·F_i = −∂/∂θ (u·∇_x E)` to `grad`, by central
/// differences of `∇_θ E` at `x ± h u`.
fn hvp_force_grad(model: &PotentialModel, s: &Sample, u: &[Vec3], grad: &mut [f64]) -> Result<()> {
    let umax = u.iter().flat_map(|v| v.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
    if umax == 0.0 {
        return Ok(());
    }
    let h = HVP_STEP / umax;
    let side = |sign: f64| -> Result<Vec<Tensor>> {
        let mut sys = s.system.clone();
        for (p, d) in sys.positions.iter_mut().zip(u) {
            for k in 0..3 {
                p[k] += sign * h * d[k];
            }
        }
        // Same edge set as the unshifted graph; only vectors move.
        let mut graph = s.graph.clone();
        graph.update_vectors(&sys);
        let mut tape = Tape::new();
        let fw = model.forward(&mut tape, &sys, &graph, ForwardOptions::default())?;
        tape.gradient(fw.energy, &fw.params)
    };
    let plus = side(1.0)?;
    let minus = side(-1.0)?;
    let c = -1.0 / (2.0 * h);
    flatten_grads(plus, grad, c);
    flatten_grads(minus, grad, -c);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub energy: f64,
    pub force: f64,
}

pub fn write_trace(trace: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for row in trace {
        w.serialize(row).map_err(|e| Error::Config(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const DIVERGENCE_FACTOR: f64 = 1e3;
const DIVERGENCE_PATIENCE: usize = 100;

/// Batches for one pass over the data, drawn per the sampling plan and
/// packed under the atom bound.
fn epoch_batches(samples: &[Sample], plan: &SamplingPlan, max_atoms: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut by_task: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_task.entry(s.system.task.clone()).or_default().push(i);
    }
    let sizes = by_task.iter().map(|(t, v)| (t.clone(), v.len())).collect();
    let draws = interleave_tasks(&sizes, plan, samples.len(), seed)?;
    let order: Vec<usize> = draws.iter().map(|(t, i)| by_task[t][*i]).collect();
    let atom_counts: Vec<usize> = order.iter().map(|&i| samples[i].system.len()).collect();
    let packed = pack_batches(&atom_counts, max_atoms, seed)?;
    Ok(packed.into_iter().map(|b| b.indices.into_iter().map(|j| order[j]).collect()).collect())
}

/// Runs `cfg.steps` optimizer steps from `state`. Rows are appended to
/// `trace` as they are produced, so a diverged run keeps its history.
pub fn train_stage(
    state: &mut TrainState,
    systems: &[AtomicSystem],
    scheme: &ReferenceScheme,
    cfg: &TrainConfig,
    trace: &mut Vec<TraceRow>,
) -> Result<()> {
    cfg.validate()?;
    if cfg.stage != state.stage {
        return Err(Error::Config(format!("state is in stage {} but config asks for {}", state.stage, cfg.stage)));
    }
    if cfg.stage == Stage::Direct && !state.model.has_direct_head() {
        return Err(Error::NoForceHead);
    }
    let samples = prepare_samples(systems, scheme, &state.model, cfg.max_neighbors)?;
    let tasks: Vec<String> = samples.iter().map(|s| s.system.task.clone()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let plan = cfg.sampling_plan(&tasks)?;
    let mut epoch = 0u64;
    let mut batches = epoch_batches(&samples, &plan, cfg.max_atoms, cfg.seed)?;
    let mut cursor = 0;
    let mut initial: Option<f64> = None;
    let mut over = 0usize;
    let mut grad = vec![0.0; state.model.params.total()];
    for step in 0..cfg.steps {
        if cursor == batches.len() {
            epoch += 1;
            batches = epoch_batches(&samples, &plan, cfg.max_atoms, cfg.seed.wrapping_add(epoch.wrapping_mul(0x9e37_79b9)))?;
            cursor = 0;
        }
        let batch: Vec<&Sample> = batches[cursor].iter().map(|&i| &samples[i]).collect();
        cursor += 1;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let (loss, _) = batch_loss(&state.model, &batch, cfg, Some(&mut grad))?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { term: "gradient" });
        }
        clip_grad_norm(&mut grad, cfg.clip_norm);
        let lr = learning_rate(cfg, step);
        adamw_step(state, &grad, lr, cfg);
        trace.push(TraceRow { step, lr, total: loss.total, energy: loss.energy, force: loss.force });

        let first = *initial.get_or_insert(loss.total);
        if loss.total > DIVERGENCE_FACTOR * first {
            over += 1;
            if over >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged { step, loss: loss.total });
            }
        } else {
            over = 0;
        }
    }
    Ok(())
}

/// Physical-unit validation metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    /// Mean absolute per-atom energy error.
    pub energy_mae: f64,
    /// Mean absolute force error per Cartesian component.
    pub force_mae: f64,
    /// RMS of the labeled force components.
    pub force_rms: f64,
    pub n_systems: usize,
}

/// Evaluates physical energies and forces; direct forces when
/// `direct` is set, otherwise `−∇E`.
pub fn evaluate(model: &PotentialModel, systems: &[AtomicSystem], scheme: &ReferenceScheme, direct: bool) -> Result<BTreeMap<String, Metrics>> {
    let mut acc: BTreeMap<String, (f64, f64, usize, usize, Vec<Vec3>)> = BTreeMap::new();
    for (i, s) in systems.iter().enumerate() {
        let labels = s.labels.as_ref().ok_or_else(|| Error::MissingLabels(format!("system {i} has no labels")))?;
        let graph = model.graph(s, None)?;
        let (e, f) = if direct { model.energy_and_direct_forces(s, &graph)? } else { model.energy_and_forces(s, &graph)? };
        let n = s.len();
        let energy = scheme.energy_from_target(s, e / n as f64)?;
        let forces = scheme.force_from_target(&f);
        let entry = acc.entry(s.task.clone()).or_insert((0.0, 0.0, 0, 0, Vec::new()));
        entry.0 += ((energy - labels.energy) / n as f64).abs();
        for (p, t) in forces.iter().zip(&labels.forces) {
            for k in 0..3 {
                entry.1 += (p[k] - t[k]).abs();
            }
        }
        entry.2 += 1;
        entry.3 += 3 * n;
        entry.4.extend_from_slice(&labels.forces);
    }
    Ok(acc
        .into_iter()
        .map(|(task, (e, f, ns, nc, forces))| {
            let m = Metrics {
                energy_mae: e / ns as f64,
                force_mae: f / nc as f64,
                force_rms: force_rms(forces.iter()),
                n_systems: ns,
            };
            (task, m)
        })
        .collect())
}

/// Per-task validation losses of several trained variants.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantResult {
    pub name: String,
    pub active_params: usize,
    /// task → loss
    pub losses: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultitaskReport {
    pub tasks: Vec<String>,
    /// Variant name and per-task loss divided by the single-task baseline.
    pub rows: Vec<(String, Vec<f64>)>,
}

impl MultitaskReport {
    pub fn get(&self, variant: &str, task: &str) -> Option<f64> {
        let t = self.tasks.iter().position(|x| x == task)?;
        self.rows.iter().find(|r| r.0 == variant).map(|r| r.1[t])
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.0.len()).max().unwrap_or(7).max(7);
        let mut out = format!("{:<width$}", "variant");
        for t in &self.tasks {
            out.push_str(&format!(" {t:>10}"));
        }
        out.push('\n');
        for (name, vals) in &self.rows {
            out.push_str(&format!("{name:<width$}"));
            for v in vals {
                out.push_str(&format!(" {v:>10.4}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_table().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Divides every variant's per-task loss by the matching single-task
/// baseline. Baselines need a loss only on their own task and appear as one
/// `single-task` row of ones. All models must share one active-parameter
/// count.
pub fn compare_multitask(baselines: &BTreeMap<String, VariantResult>, variants: &[VariantResult]) -> Result<MultitaskReport> {
    let sizes: Vec<(&str, usize)> = baselines
        .values()
        .chain(variants)
        .map(|v| (v.name.as_str(), v.active_params))
        .collect();
    if let Some(first) = sizes.first() {
        if let Some(bad) = sizes.iter().find(|s| s.1 != first.1) {
            return Err(Error::ActiveSizeMismatch(format!("{} has {}, {} has {}", first.0, first.1, bad.0, bad.1)));
        }
    }
    let tasks: Vec<String> = baselines.keys().cloned().collect();
    let mut rows = vec![("single-task".to_string(), vec![1.0; tasks.len()])];
    for (t, b) in baselines {
        b.losses.get(t).ok_or_else(|| Error::Config(format!("baseline for `{t}` has no loss on it")))?;
    }
    for v in variants {
        let mut vals = Vec::with_capacity(tasks.len());
        for t in &tasks {
            let base = baselines[t].losses.get(t).ok_or_else(|| Error::Config(format!("baseline for `{t}` has no loss on it")))?;
            let own = v.losses.get(t).ok_or_else(|| Error::Config(format!("variant `{}` has no loss for `{t}`", v.name)))?;
            vals.push(own / base);
        }
        rows.push((v.name.clone(), vals));
    }
    Ok(MultitaskReport { tasks, rows })
}
