//! The energy network.
//!
//! Invariant-feature message passing: per-atom species embeddings receive a
//! global (composition, charge, spin, task) injection at every block; each
//! block sends messages `W_msg (h_src ⊙ f(r))` along edges, where the radial
//! filter `f(r)` is a linear map of Gaussian radial features times a smooth
//! polynomial envelope. Both edge maps are mixtures of linear experts. After
//! the blocks a single node-wise head predicts per-atom energies, summed to
//! the total. An optional direct-force head predicts per-atom vectors as
//! scalar-weighted sums of edge unit vectors.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph, NeighborGraph};
use crate::params::{ParamStore, Reuse};
use crate::systems::{AtomicSystem, SystemHeader, Vec3, MAX_SPECIES};
use crate::tape::{Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-6;
const MAX_WIDTH: usize = 1 << 14;
const MAX_BLOCKS: usize = 64;
const MAX_EXPERTS: usize = 1024;
const MAX_STATE: i32 = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width; also the width of each global embedding part.
    pub channels: usize,
    /// Message-passing blocks.
    pub blocks: usize,
    /// Experts per MoLE layer; 1 is a dense model without a router.
    pub experts: usize,
    pub cutoff: f64,
    pub n_rbf: usize,
    pub ffn_hidden: usize,
    pub router_hidden: usize,
    /// Aggregated messages are divided by this constant.
    pub neighbor_norm: f64,
    pub direct_head: bool,
    pub tasks: Vec<String>,
    /// Charges in `-max_abs_charge..=max_abs_charge` have embeddings.
    pub max_abs_charge: i32,
    pub max_spin: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            blocks: 3,
            experts: 8,
            cutoff: crate::graph::DEFAULT_CUTOFF,
            n_rbf: 16,
            ffn_hidden: 128,
            router_hidden: 64,
            neighbor_norm: 10.0,
            direct_head: true,
            tasks: crate::systems::TaskRegistry::default().tags().to_vec(),
            max_abs_charge: 8,
            max_spin: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.channels == 0 || self.n_rbf == 0 || self.ffn_hidden == 0 || self.router_hidden == 0 {
            return bad("widths must be positive");
        }
        if self.experts == 0 {
            return bad("experts must be at least 1");
        }
        if self.channels.max(self.n_rbf).max(self.ffn_hidden).max(self.router_hidden) > MAX_WIDTH
            || self.blocks > MAX_BLOCKS
            || self.experts > MAX_EXPERTS
        {
            return bad("model size exceeds supported limits");
        }
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            return bad("cutoff must be positive");
        }
        if !(self.neighbor_norm > 0.0) {
            return bad("neighbor_norm must be positive");
        }
        if self.tasks.is_empty() {
            return bad("at least one task is required");
        }
        if !(0..=MAX_STATE).contains(&self.max_abs_charge) || self.max_spin > MAX_STATE as u32 {
            return bad("max_abs_charge and max_spin must lie in 0..=1024");
        }
        Ok(())
    }

    pub fn registry(&self) -> crate::systems::TaskRegistry {
        crate::systems::TaskRegistry::new(self.tasks.clone())
    }

    fn rbf_centers(&self) -> Arc<[f64]> {
        let step = self.cutoff / self.n_rbf as f64;
        (0..self.n_rbf).map(|k| step * (k + 1) as f64).collect()
    }

    fn rbf_gamma(&self) -> f64 {
        let step = self.cutoff / self.n_rbf as f64;
        1.0 / (2.0 * step * step)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BlockLayout {
    rad: usize,
    rad_b: usize,
    msg: usize,
    ff1: usize,
    ff1_b: usize,
    ff2: usize,
    ff2_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct ForceLayout {
    rad: usize,
    w1: usize,
    b1: usize,
    w2: usize,
}

/// Indices of every named tensor in the store.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    species_embed: usize,
    species_bias: usize,
    comp_embed: usize,
    charge_embed: usize,
    spin_embed: usize,
    task_embed: usize,
    global_w: usize,
    global_b: usize,
    router: Option<Vec<(usize, usize)>>,
    blocks: Vec<BlockLayout>,
    head_w1: usize,
    head_b1: usize,
    head_w2: usize,
    head_b2: usize,
    force: Option<ForceLayout>,
}

const ROUTER_LAYERS: usize = 4;

/// Expected `(rows, cols)` of every tensor for a config, in declared order.
fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let (c, k, s) = (cfg.channels, cfg.experts, MAX_SPECIES as usize + 1);
    let mut v = vec![
        ("species_embed".to_string(), s, c),
        ("species_bias".to_string(), s, 1),
        ("comp_embed".to_string(), s, c),
        ("charge_embed".to_string(), 2 * cfg.max_abs_charge as usize + 1, c),
        ("spin_embed".to_string(), cfg.max_spin as usize + 1, c),
        ("task_embed".to_string(), cfg.tasks.len(), c),
        ("global_w".to_string(), c, 4 * c),
        ("global_b".to_string(), 1, c),
    ];
    if k > 1 {
        let h = cfg.router_hidden;
        let dims = [(h, 4 * c), (h, h), (h, h), (k, h)];
        for (l, (o, i)) in dims.iter().enumerate() {
            v.push((format!("router.{l}.w"), *o, *i));
            v.push((format!("router.{l}.b"), 1, *o));
        }
    }
    for b in 0..cfg.blocks {
        v.push((format!("block{b}.rad"), k, c * cfg.n_rbf));
        v.push((format!("block{b}.rad_b"), 1, c));
        v.push((format!("block{b}.msg"), k, c * c));
        v.push((format!("block{b}.ff1"), cfg.ffn_hidden, c));
        v.push((format!("block{b}.ff1_b"), 1, cfg.ffn_hidden));
        v.push((format!("block{b}.ff2"), c, cfg.ffn_hidden));
        v.push((format!("block{b}.ff2_b"), 1, c));
    }
    v.extend([
        ("head.w1".to_string(), c, c),
        ("head.b1".to_string(), 1, c),
        ("head.w2".to_string(), 1, c),
        ("head.b2".to_string(), 1, 1),
    ]);
    if cfg.direct_head {
        v.extend([
            ("force.rad".to_string(), c, cfg.n_rbf),
            ("force.w1".to_string(), c, c),
            ("force.b1".to_string(), 1, c),
            ("force.w2".to_string(), 1, c),
        ]);
    }
    v
}

impl Layout {
    fn resolve(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let expected = expected_shapes(cfg);
        if expected.len() != store.specs.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this config, found {}",
                expected.len(),
                store.specs.len()
            )));
        }
        for ((name, r, c), spec) in expected.iter().zip(&store.specs) {
            if &spec.name != name || spec.rows != *r || spec.cols != *c {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {}x{} does not match expected `{}` {}x{}",
                    spec.name, spec.rows, spec.cols, name, r, c
                )));
            }
        }
        let ix = |n: &str| store.index(n).expect("validated above");
        let router = (cfg.experts > 1).then(|| {
            (0..ROUTER_LAYERS).map(|l| (ix(&format!("router.{l}.w")), ix(&format!("router.{l}.b")))).collect()
        });
        let blocks = (0..cfg.blocks)
            .map(|b| BlockLayout {
                rad: ix(&format!("block{b}.rad")),
                rad_b: ix(&format!("block{b}.rad_b")),
                msg: ix(&format!("block{b}.msg")),
                ff1: ix(&format!("block{b}.ff1")),
                ff1_b: ix(&format!("block{b}.ff1_b")),
                ff2: ix(&format!("block{b}.ff2")),
                ff2_b: ix(&format!("block{b}.ff2_b")),
            })
            .collect();
        let force = cfg.direct_head.then(|| ForceLayout {
            rad: ix("force.rad"),
            w1: ix("force.w1"),
            b1: ix("force.b1"),
            w2: ix("force.w2"),
        });
        Ok(Self {
            species_embed: ix("species_embed"),
            species_bias: ix("species_bias"),
            comp_embed: ix("comp_embed"),
            charge_embed: ix("charge_embed"),
            spin_embed: ix("spin_embed"),
            task_embed: ix("task_embed"),
            global_w: ix("global_w"),
            global_b: ix("global_b"),
            router,
            blocks,
            head_w1: ix("head.w1"),
            head_b1: ix("head.b1"),
            head_w2: ix("head.w2"),
            head_b2: ix("head.b2"),
            force,
        })
    }
}

/// How MoLE layers are evaluated on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MixMode {
    /// Form `Σ_k α_k W_k` once, then apply it.
    #[default]
    Premix,
    /// `Σ_k α_k (W_k x)`: every expert applied separately. Evaluation only;
    /// parameter gradients are not routed through this path.
    ExpertSum,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub mix: MixMode,
    pub direct_forces: bool,
}

/// Handles into a taped forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub energy: Var,
    pub per_atom: Var,
    pub positions: Var,
    /// One leaf per parameter tensor, in store order.
    pub params: Vec<Var>,
    pub alpha: Option<Var>,
    pub direct_forces: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyOutput {
    pub energy: f64,
    pub per_atom: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCensus {
    pub total_params: usize,
    pub active_params: usize,
    /// `(name, total, active)` per tensor.
    pub per_layer: Vec<(String, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopReport {
    pub flops_per_call: u64,
    pub n_atoms: usize,
    pub n_edges: usize,
    pub active_params: usize,
    /// Instrumented FLOPs per active parameter per atom.
    pub kappa: f64,
    /// The same ratio from the closed-form count of linear-layer work.
    pub kappa_analytic: f64,
}

/// Large-scale reference: FLOPs/parameter/atom of an equivariant
/// architecture at l_max=4, m_max=2, 30 neighbors (per training step). The
/// invariant stand-in here does not reproduce it.
pub const REFERENCE_KAPPA_EQUIVARIANT: f64 = 270.0;

/// Lazily creates one leaf per parameter tensor.
struct Leaves<'m> {
    store: &'m ParamStore,
    dense_experts: bool,
    vars: Vec<Option<Var>>,
}

impl<'m> Leaves<'m> {
    fn new(store: &'m ParamStore, dense_experts: bool) -> Self {
        Self { store, dense_experts, vars: vec![None; store.specs.len()] }
    }

    fn get(&mut self, tape: &mut Tape, idx: usize) -> Var {
        if let Some(v) = self.vars[idx] {
            return v;
        }
        let spec = &self.store.specs[idx];
        let data = self.store.slice(idx).to_vec();
        let t = match spec.experts {
            // Without a router the single expert is used as a plain matrix.
            Some((o, i)) if self.dense_experts => Tensor::new(o, i, data),
            _ => Tensor::new(spec.rows, spec.cols, data),
        };
        let v = tape.leaf(t);
        self.vars[idx] = Some(v);
        v
    }

    fn all(mut self, tape: &mut Tape) -> Vec<Var> {
        (0..self.vars.len()).map(|i| self.get(tape, i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

impl PotentialModel {
    /// Randomly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = &config;
        let (c, k) = (cfg.channels, cfg.experts);
        let s = MAX_SPECIES as usize + 1;
        let mat = |rng: &mut ChaCha8Rng, o: usize, i: usize| normal_vec(rng, o * i, (1.0 / i as f64).sqrt());

        store.push("species_embed", s, c, Reuse::Lookup, normal_vec(&mut rng, s * c, 1.0));
        store.push("species_bias", s, 1, Reuse::Lookup, vec![0.0; s]);
        store.push("comp_embed", s, c, Reuse::Lookup, normal_vec(&mut rng, s * c, 1.0));
        let nq = 2 * cfg.max_abs_charge as usize + 1;
        store.push("charge_embed", nq, c, Reuse::Lookup, normal_vec(&mut rng, nq * c, 1.0));
        let ns = cfg.max_spin as usize + 1;
        store.push("spin_embed", ns, c, Reuse::Lookup, normal_vec(&mut rng, ns * c, 1.0));
        let nt = cfg.tasks.len();
        store.push("task_embed", nt, c, Reuse::Lookup, normal_vec(&mut rng, nt * c, 1.0));
        store.push("global_w", c, 4 * c, Reuse::System, mat(&mut rng, c, 4 * c));
        store.push_bias("global_b", c, Reuse::System);
        if k > 1 {
            let h = cfg.router_hidden;
            let dims = [(h, 4 * c), (h, h), (h, h), (k, h)];
            for (l, (o, i)) in dims.iter().enumerate() {
                store.push(&format!("router.{l}.w"), *o, *i, Reuse::Router, mat(&mut rng, *o, *i));
                store.push_spec(&format!("router.{l}.b"), 1, *o, Reuse::Router, None, true, vec![0.0; *o]);
            }
        }
        for b in 0..cfg.blocks {
            let rad = (0..k).flat_map(|_| mat(&mut rng, c, cfg.n_rbf)).collect();
            store.push_experts(&format!("block{b}.rad"), k, c, cfg.n_rbf, Reuse::Edge, rad);
            store.push_bias(&format!("block{b}.rad_b"), c, Reuse::Edge);
            let msg = (0..k).flat_map(|_| mat(&mut rng, c, c)).collect();
            store.push_experts(&format!("block{b}.msg"), k, c, c, Reuse::Edge, msg);
            store.push(&format!("block{b}.ff1"), cfg.ffn_hidden, c, Reuse::Node, mat(&mut rng, cfg.ffn_hidden, c));
            store.push_bias(&format!("block{b}.ff1_b"), cfg.ffn_hidden, Reuse::Node);
            store.push(&format!("block{b}.ff2"), c, cfg.ffn_hidden, Reuse::Node, mat(&mut rng, c, cfg.ffn_hidden));
            store.push_bias(&format!("block{b}.ff2_b"), c, Reuse::Node);
        }
        store.push("head.w1", c, c, Reuse::Node, mat(&mut rng, c, c));
        store.push_bias("head.b1", c, Reuse::Node);
        store.push("head.w2", 1, c, Reuse::Node, mat(&mut rng, 1, c));
        store.push_bias("head.b2", 1, Reuse::Node);
        if cfg.direct_head {
            store.push("force.rad", c, cfg.n_rbf, Reuse::Edge, mat(&mut rng, c, cfg.n_rbf));
            store.push("force.w1", c, c, Reuse::Edge, mat(&mut rng, c, c));
            store.push_bias("force.b1", c, Reuse::Edge);
            store.push("force.w2", 1, c, Reuse::Edge, mat(&mut rng, 1, c));
        }
        Self::from_params(config, store)
    }

    /// Rebuilds a model around an existing parameter store (e.g. a
    /// checkpoint), checking names and shapes against the config.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&params, &config)?;
        Ok(Self { config, params, layout })
    }

    pub fn has_router(&self) -> bool {
        self.layout.router.is_some()
    }

    pub fn has_direct_head(&self) -> bool {
        self.layout.force.is_some()
    }

    /// Copy without the direct-force head (stage transition).
    pub fn without_direct_head(&self) -> Result<Self> {
        if !self.has_direct_head() {
            return Ok(self.clone());
        }
        let mut config = self.config.clone();
        config.direct_head = false;
        let mut store = ParamStore::new();
        for (i, spec) in self.params.specs.iter().enumerate() {
            if spec.name.starts_with("force.") {
                continue;
            }
            store.push_spec(&spec.name, spec.rows, spec.cols, spec.reuse, spec.experts, spec.bias, self.params.slice(i).to_vec());
        }
        Self::from_params(config, store)
    }

    /// Zeroes the router output layer so every expert gets weight 1/K.
    pub fn zero_router(&mut self) {
        if let Some(router) = self.layout.router.clone() {
            for (w, b) in router {
                self.params.slice_mut(w).iter_mut().for_each(|x| *x = 0.0);
                self.params.slice_mut(b).iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    pub fn graph(&self, system: &AtomicSystem, max_neighbors: Option<usize>) -> Result<NeighborGraph> {
        build_graph(system, self.config.cutoff, max_neighbors)
    }

    fn check_system(&self, system: &AtomicSystem, graph: &NeighborGraph) -> Result<()> {
        if graph.n_atoms != system.len() {
            return Err(Error::shape("forward", format!("graph has {} atoms, system {}", graph.n_atoms, system.len())));
        }
        if (graph.cutoff - self.config.cutoff).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "graph cutoff {} differs from model cutoff {}",
                graph.cutoff, self.config.cutoff
            )));
        }
        if let Some(&z) = system.species.iter().find(|&&z| z == 0 || z > MAX_SPECIES) {
            return Err(Error::UnknownSpecies(z));
        }
        Ok(())
    }

    /// Global features: the injection vector `g` (1×C), the concatenated
    /// embedding (1×4C), and the router output when the model has experts.
    fn global(&self, tape: &mut Tape, leaves: &mut Leaves, header: &SystemHeader) -> Result<(Var, Var, Option<Var>)> {
        let cfg = &self.config;
        let l = &self.layout;
        if let Some(&z) = header.species.iter().find(|&&z| z == 0 || z > MAX_SPECIES) {
            return Err(Error::UnknownSpecies(z));
        }
        if header.charge.abs() > cfg.max_abs_charge {
            return Err(Error::OutOfRange { field: "charge", value: header.charge as i64 });
        }
        if header.spin > cfg.max_spin {
            return Err(Error::OutOfRange { field: "spin", value: header.spin as i64 });
        }
        let task = cfg.tasks.iter().position(|t| *t == header.task).ok_or_else(|| Error::UnknownTask(header.task.clone()))?;

        let species: Arc<[usize]> = header.species.iter().map(|&z| z as usize).collect();
        let comp_table = leaves.get(tape, l.comp_embed);
        let comp = tape.gather(comp_table, species)?;
        let comp = tape.mean_rows(comp)?;
        let charge_table = leaves.get(tape, l.charge_embed);
        let charge = tape.gather(charge_table, Arc::from([(header.charge + cfg.max_abs_charge) as usize]))?;
        let spin_table = leaves.get(tape, l.spin_embed);
        let spin = tape.gather(spin_table, Arc::from([header.spin as usize]))?;
        let task_table = leaves.get(tape, l.task_embed);
        let task = tape.gather(task_table, Arc::from([task]))?;
        let cat = tape.concat_cols(&[comp, charge, spin, task])?;

        let gw = leaves.get(tape, l.global_w);
        let gb = leaves.get(tape, l.global_b);
        let g = tape.matmul(cat, gw)?;
        let g = tape.add_row(g, gb)?;
        let g = tape.silu(g);

        let alpha = self.router(tape, leaves, cat)?;
        Ok((g, cat, alpha))
    }

    /// Router MLP on a 1×4C embedding: three SiLU hidden layers, softmax.
    fn router(&self, tape: &mut Tape, leaves: &mut Leaves, cat: Var) -> Result<Option<Var>> {
        let Some(layers) = &self.layout.router else {
            return Ok(None);
        };
        let mut h = cat;
        for (i, (w, b)) in layers.iter().enumerate() {
            let (wv, bv) = (leaves.get(tape, *w), leaves.get(tape, *b));
            h = tape.matmul(h, wv)?;
            h = tape.add_row(h, bv)?;
            if i + 1 < layers.len() {
                h = tape.silu(h);
            }
        }
        Ok(Some(tape.softmax(h)))
    }

    /// Router coefficients for a precomputed global embedding.
    pub fn route_embedding(&self, embedding: &crate::mole::GlobalEmbedding) -> Result<crate::mole::RouterOutput> {
        let width = 4 * self.config.channels;
        if embedding.0.len() != width {
            return Err(Error::shape("route", format!("embedding width {} != {width}", embedding.0.len())));
        }
        let mut tape = Tape::new();
        let mut leaves = Leaves::new(&self.params, !self.has_router());
        let cat = tape.leaf(Tensor::row(embedding.0.clone()));
        let alpha = match self.router(&mut tape, &mut leaves, cat)? {
            Some(a) => tape.value(a).data.clone(),
            None => vec![1.0],
        };
        crate::mole::RouterOutput::new(alpha)
    }

    /// Router coefficients for a header; `[1.0]` for dense models.
    pub fn route(&self, header: &SystemHeader) -> Result<crate::mole::RouterOutput> {
        let mut tape = Tape::new();
        let mut leaves = Leaves::new(&self.params, !self.has_router());
        let (_, _, alpha) = self.global(&mut tape, &mut leaves, header)?;
        let alpha = match alpha {
            Some(a) => tape.value(a).data.clone(),
            None => vec![1.0],
        };
        crate::mole::RouterOutput::new(alpha)
    }

    /// Concatenated global embedding (composition, charge, spin, task).
    pub fn global_embedding(&self, header: &SystemHeader) -> Result<crate::mole::GlobalEmbedding> {
        let mut tape = Tape::new();
        let mut leaves = Leaves::new(&self.params, !self.has_router());
        let (_, cat, _) = self.global(&mut tape, &mut leaves, header)?;
        Ok(crate::mole::GlobalEmbedding(tape.value(cat).data.clone()))
    }

    /// `x · W(α)ᵀ` for a MoLE tensor.
    fn mole_apply(
        &self,
        tape: &mut Tape,
        leaves: &mut Leaves,
        x: Var,
        idx: usize,
        alpha: Option<Var>,
        mode: MixMode,
    ) -> Result<Var> {
        let (out, inp) = self.params.specs[idx].experts.expect("MoLE tensor");
        let Some(alpha) = alpha else {
            let w = leaves.get(tape, idx);
            return tape.matmul(x, w);
        };
        match mode {
            MixMode::Premix => {
                let e = leaves.get(tape, idx);
                let w = tape.mix_experts(e, alpha, out, inp)?;
                tape.matmul(x, w)
            }
            MixMode::ExpertSum => {
                let data = self.params.slice(idx);
                let mut acc: Option<Var> = None;
                for k in 0..self.config.experts {
                    let wk = tape.leaf(Tensor::new(out, inp, data[k * out * inp..(k + 1) * out * inp].to_vec()));
                    let yk = tape.matmul(x, wk)?;
                    let yk = tape.scale_by(yk, alpha, k)?;
                    acc = Some(match acc {
                        None => yk,
                        Some(a) => tape.add(a, yk)?,
                    });
                }
                Ok(acc.expect("at least one expert"))
            }
        }
    }

    fn dense(&self, tape: &mut Tape, leaves: &mut Leaves, x: Var, w: usize, b: Option<usize>) -> Result<Var> {
        let wv = leaves.get(tape, w);
        let y = tape.matmul(x, wv)?;
        match b {
            Some(b) => {
                let bv = leaves.get(tape, b);
                tape.add_row(y, bv)
            }
            None => Ok(y),
        }
    }

    /// Records the full forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape, system: &AtomicSystem, graph: &NeighborGraph, opts: ForwardOptions) -> Result<Forward> {
        self.check_system(system, graph)?;
        if opts.direct_forces && self.layout.force.is_none() {
            return Err(Error::NoForceHead);
        }
        let cfg = &self.config;
        let l = &self.layout;
        let n = system.len();
        let mut leaves = Leaves::new(&self.params, !self.has_router());

        let pos_data = system.positions.iter().flat_map(|p| p.iter().copied()).collect();
        let positions = tape.leaf(Tensor::new(n, 3, pos_data));
        let (g, _, alpha) = self.global(tape, &mut leaves, &system.header())?;

        let src: Arc<[usize]> = graph.edges.iter().map(|e| e.src).collect();
        let dst: Arc<[usize]> = graph.edges.iter().map(|e| e.dst).collect();
        let n_edges = graph.n_edges();
        let offsets = graph.shift_offsets(system.cell.as_ref());
        let offsets = tape.leaf(Tensor::new(n_edges, 3, offsets.iter().flat_map(|o| o.iter().copied()).collect()));
        let ps = tape.gather(positions, src.clone())?;
        let pd = tape.gather(positions, dst.clone())?;
        let ev = tape.sub(pd, ps)?;
        let ev = tape.add(ev, offsets)?;
        let r = tape.row_norm(ev);
        let env = tape.envelope(r, cfg.cutoff);
        let rbf = tape.rbf(r, cfg.rbf_centers(), cfg.rbf_gamma())?;

        let species: Arc<[usize]> = system.species.iter().map(|&z| z as usize).collect();
        let table = leaves.get(tape, l.species_embed);
        let mut h = tape.gather(table, species.clone())?;
        for b in &l.blocks {
            h = tape.add_row(h, g)?;
            let f = self.mole_apply(tape, &mut leaves, rbf, b.rad, alpha, opts.mix)?;
            let rb = leaves.get(tape, b.rad_b);
            let f = tape.add_row(f, rb)?;
            let f = tape.mul_col(f, env)?;
            let hs = tape.gather(h, src.clone())?;
            let x = tape.mul(hs, f)?;
            let m = self.mole_apply(tape, &mut leaves, x, b.msg, alpha, opts.mix)?;
            let agg = tape.scatter_add(m, dst.clone(), n)?;
            let agg = tape.scale(agg, 1.0 / cfg.neighbor_norm);
            let s = tape.add(h, agg)?;
            h = tape.rms_norm(s, NORM_EPS);
            let t = self.dense(tape, &mut leaves, h, b.ff1, Some(b.ff1_b))?;
            let t = tape.silu(t);
            let t = self.dense(tape, &mut leaves, t, b.ff2, Some(b.ff2_b))?;
            let s = tape.add(h, t)?;
            h = tape.rms_norm(s, NORM_EPS);
        }

        let e = self.dense(tape, &mut leaves, h, l.head_w1, Some(l.head_b1))?;
        let e = tape.silu(e);
        let e = self.dense(tape, &mut leaves, e, l.head_w2, Some(l.head_b2))?;
        let bias_table = leaves.get(tape, l.species_bias);
        let bias = tape.gather(bias_table, species)?;
        let per_atom = tape.add(e, bias)?;
        let energy = tape.sum(per_atom);

        let direct_forces = match (&l.force, opts.direct_forces) {
            (Some(fl), true) => {
                let fr = self.dense(tape, &mut leaves, rbf, fl.rad, None)?;
                let fr = tape.mul_col(fr, env)?;
                let hs = tape.gather(h, src)?;
                let x = tape.mul(hs, fr)?;
                let t = self.dense(tape, &mut leaves, x, fl.w1, Some(fl.b1))?;
                let t = tape.silu(t);
                let q = self.dense(tape, &mut leaves, t, fl.w2, None)?;
                let q = tape.mul_col(q, env)?;
                let inv_r = tape.recip(r);
                let unit = tape.mul_col(ev, inv_r)?;
                let fv = tape.mul_col(unit, q)?;
                Some(tape.scatter_add(fv, dst, n)?)
            }
            _ => None,
        };

        let params = leaves.all(tape);
        Ok(Forward { energy, per_atom, positions, params, alpha, direct_forces })
    }

    pub fn forward_energy(&self, system: &AtomicSystem, graph: &NeighborGraph) -> Result<EnergyOutput> {
        let mut tape = Tape::new();
        let fw = self.forward(&mut tape, system, graph, ForwardOptions::default())?;
        Ok(EnergyOutput { energy: tape.scalar_value(fw.energy), per_atom: tape.value(fw.per_atom).data.clone() })
    }

    /// Energy through the explicit per-expert mixture path.
    pub fn forward_energy_expert_sum(&self, system: &AtomicSystem, graph: &NeighborGraph) -> Result<f64> {
        let mut tape = Tape::new();
        let opts = ForwardOptions { mix: MixMode::ExpertSum, direct_forces: false };
        let fw = self.forward(&mut tape, system, graph, opts)?;
        Ok(tape.scalar_value(fw.energy))
    }

    /// Energy and `F = −∂E/∂positions`.
    pub fn energy_and_forces(&self, system: &AtomicSystem, graph: &NeighborGraph) -> Result<(f64, Vec<Vec3>)> {
        let mut tape = Tape::new();
        let fw = self.forward(&mut tape, system, graph, ForwardOptions::default())?;
        let grad = tape.gradient(fw.energy, &[fw.positions])?.remove(0);
        Ok((tape.scalar_value(fw.energy), to_vec3s(&grad, -1.0)))
    }

    pub fn forces_conservative(&self, system: &AtomicSystem, graph: &NeighborGraph) -> Result<Vec<Vec3>> {
        Ok(self.energy_and_forces(system, graph)?.1)
    }

    pub fn forces_direct(&self, system: &AtomicSystem, graph: &NeighborGraph) -> Result<Vec<Vec3>> {
        Ok(self.energy_and_direct_forces(system, graph)?.1)
    }

    pub fn energy_and_direct_forces(&self, system: &AtomicSystem, graph: &NeighborGraph) -> Result<(f64, Vec<Vec3>)> {
        let mut tape = Tape::new();
        let opts = ForwardOptions { mix: MixMode::Premix, direct_forces: true };
        let fw = self.forward(&mut tape, system, graph, opts)?;
        let f = fw.direct_forces.ok_or(Error::NoForceHead)?;
        Ok((tape.scalar_value(fw.energy), to_vec3s(tape.value(f), 1.0)))
    }

    pub fn census(&self) -> ParamCensus {
        let per_layer: Vec<(String, usize, usize)> = self
            .params
            .specs
            .iter()
            .map(|s| {
                let active = if s.reuse == Reuse::Router { 0 } else { s.merged_len() };
                (s.name.clone(), s.len(), active)
            })
            .collect();
        ParamCensus {
            total_params: per_layer.iter().map(|p| p.1).sum(),
            active_params: per_layer.iter().map(|p| p.2).sum(),
            per_layer,
        }
    }

    /// Closed-form FLOPs of all linear work for one energy call: `2·P` per
    /// use of every weight matrix and `P` per use of every bias. The direct
    /// force head is not on the energy path.
    pub fn analytic_flops(&self, n_atoms: usize, n_edges: usize) -> f64 {
        self.params
            .specs
            .iter()
            .filter(|s| !s.name.starts_with("force."))
            .map(|s| {
                let uses = match s.reuse {
                    Reuse::Edge => n_edges,
                    Reuse::Node => n_atoms,
                    Reuse::System => 1,
                    Reuse::Lookup | Reuse::Router => 0,
                } as f64;
                let per_use = if s.bias { 1.0 } else { 2.0 };
                uses * per_use * s.merged_len() as f64
            })
            .sum()
    }

    /// Instrumented FLOPs of one energy call on the inference path (experts
    /// merged for this system's header) and the derived `κ`.
    pub fn count_flops(&self, system: &AtomicSystem, graph: &NeighborGraph) -> Result<FlopReport> {
        let merged = crate::mole::merge_model(self, &system.header())?;
        let model = merged.model();
        let mut tape = Tape::new();
        model.forward(&mut tape, system, graph, ForwardOptions::default())?;
        let flops = tape.flops();
        let active = self.census().active_params;
        let denom = active as f64 * system.len() as f64;
        Ok(FlopReport {
            flops_per_call: flops,
            n_atoms: system.len(),
            n_edges: graph.n_edges(),
            active_params: active,
            kappa: flops as f64 / denom,
            kappa_analytic: self.analytic_flops(system.len(), graph.n_edges()) / denom,
        })
    }
}

pub(crate) fn to_vec3s(t: &Tensor, scale: f64) -> Vec<Vec3> {
    t.data.chunks(3).map(|c| [scale * c[0], scale * c[1], scale * c[2]]).collect()
}

/// Anything that maps a system (and its graph) to energy and forces.
pub trait EnergyModel: Sync {
    fn cutoff(&self) -> f64;

    fn energy_forces(&self, system: &AtomicSystem, graph: &NeighborGraph) -> Result<(f64, Vec<Vec3>)>;

    fn evaluate(&self, system: &AtomicSystem) -> Result<(f64, Vec<Vec3>)> {
        let graph = build_graph(system, self.cutoff(), None)?;
        self.energy_forces(system, &graph)
    }
}

impl EnergyModel for PotentialModel {
    fn cutoff(&self) -> f64 {
        self.config.cutoff
    }

    fn energy_forces(&self, system: &AtomicSystem, graph: &NeighborGraph) -> Result<(f64, Vec<Vec3>)> {
        self.energy_and_forces(system, graph)
    }
}

/// Uses the direct-force head instead of the energy gradient.
#[derive(Debug, Clone, Copy)]
pub struct DirectForces<'a>(pub &'a PotentialModel);

impl EnergyModel for DirectForces<'_> {
    fn cutoff(&self) -> f64 {
        self.0.config.cutoff
    }

    fn energy_forces(&self, system: &AtomicSystem, graph: &NeighborGraph) -> Result<(f64, Vec<Vec3>)> {
        self.0.energy_and_direct_forces(system, graph)
    }
}
