//! Mixture of linear experts: `y = Σ_k α_k W_k x + b`, the global router
//! that produces `α`, and the merge `W* = Σ_k α_k W_k` used at inference.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::NeighborGraph;
use crate::params::{ParamStore, Reuse};
use crate::potential::{EnergyModel, PotentialModel};
use crate::systems::{AtomicSystem, SystemHeader, Vec3};

const SIMPLEX_TOL: f64 = 1e-12;

/// Mixture coefficients, one per expert, on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterOutput {
    alpha: Vec<f64>,
}

impl RouterOutput {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::shape("router", "no experts"));
        }
        if alpha.iter().any(|a| !(-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(a)) {
            return Err(Error::shape("router", format!("coefficient outside [0, 1]: {alpha:?}")));
        }
        let sum: f64 = alpha.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::shape("router", format!("coefficients sum to {sum}")));
        }
        Ok(Self { alpha })
    }

    pub fn uniform(k: usize) -> Self {
        Self { alpha: vec![1.0 / k as f64; k] }
    }

    pub fn one_hot(k: usize, j: usize) -> Self {
        let mut alpha = vec![0.0; k];
        alpha[j] = 1.0;
        Self { alpha }
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }
}

/// Concatenated composition, charge, spin and task embeddings. Built from a
/// [`SystemHeader`] only, so it cannot see positions.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalEmbedding(pub Vec<f64>);

/// A single linear map `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLinear {
    pub out: usize,
    pub inp: usize,
    /// Row-major `out × in`.
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl DenseLinear {
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.inp {
            return Err(Error::shape("linear", format!("input {} != {}", x.len(), self.inp)));
        }
        Ok((0..self.out)
            .map(|o| {
                let row = &self.weight[o * self.inp..(o + 1) * self.inp];
                let y: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
                y + self.bias.as_ref().map_or(0.0, |b| b[o])
            })
            .collect())
    }
}

/// `K` weight matrices of one shape with a shared bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MoleLayer {
    out: usize,
    inp: usize,
    experts: Vec<Vec<f64>>,
    bias: Option<Vec<f64>>,
}

impl MoleLayer {
    pub fn new(out: usize, inp: usize, experts: Vec<Vec<f64>>, bias: Option<Vec<f64>>) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::shape("mole", "K must be at least 1"));
        }
        if let Some(w) = experts.iter().find(|w| w.len() != out * inp) {
            return Err(Error::shape("mole", format!("expert has {} entries, expected {}x{}", w.len(), out, inp)));
        }
        if bias.as_ref().is_some_and(|b| b.len() != out) {
            return Err(Error::shape("mole", "bias length differs from out_dim"));
        }
        Ok(Self { out, inp, experts, bias })
    }

    pub fn k(&self) -> usize {
        self.experts.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.out, self.inp)
    }

    pub fn expert(&self, k: usize) -> &[f64] {
        &self.experts[k]
    }

    fn check_alpha(&self, alpha: &RouterOutput) -> Result<()> {
        if alpha.k() != self.k() {
            return Err(Error::shape("mole", format!("{} coefficients for {} experts", alpha.k(), self.k())));
        }
        Ok(())
    }

    /// `Σ_k α_k (W_k x) + b`, every expert applied separately.
    pub fn apply_mixture(&self, alpha: &RouterOutput, x: &[f64]) -> Result<Vec<f64>> {
        self.check_alpha(alpha)?;
        if x.len() != self.inp {
            return Err(Error::shape("mole", format!("input {} != {}", x.len(), self.inp)));
        }
        let mut y = self.bias.clone().unwrap_or_else(|| vec![0.0; self.out]);
        for (w, a) in self.experts.iter().zip(alpha.alpha()) {
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &w[o * self.inp..(o + 1) * self.inp];
                *yo += a * row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            }
        }
        Ok(y)
    }

    /// `W* = Σ_k α_k W_k` with the shared bias carried over.
    pub fn merge(&self, alpha: &RouterOutput) -> Result<DenseLinear> {
        self.check_alpha(alpha)?;
        let mut weight = vec![0.0; self.out * self.inp];
        for (w, a) in self.experts.iter().zip(alpha.alpha()) {
            for (m, v) in weight.iter_mut().zip(w) {
                *m += a * v;
            }
        }
        Ok(DenseLinear { out: self.out, inp: self.inp, weight, bias: self.bias.clone() })
    }
}

/// A model with every MoLE layer collapsed for one system header. It has no
/// router and one expert per layer, and refuses systems with other headers.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedModel {
    model: PotentialModel,
    header: SystemHeader,
    alpha: RouterOutput,
}

impl MergedModel {
    pub fn model(&self) -> &PotentialModel {
        &self.model
    }

    pub fn header(&self) -> &SystemHeader {
        &self.header
    }

    pub fn alpha(&self) -> &RouterOutput {
        &self.alpha
    }

    pub fn into_model(self) -> PotentialModel {
        self.model
    }

    pub fn check_header(&self, system: &AtomicSystem) -> Result<()> {
        let h = system.header();
        if h != self.header {
            return Err(Error::HeaderMismatch(format!("expected {:?}, got {:?}", self.header, h)));
        }
        Ok(())
    }

    /// Reassembles a merged model (e.g. from a checkpoint).
    pub fn from_parts(model: PotentialModel, header: SystemHeader, alpha: RouterOutput) -> Result<Self> {
        if model.has_router() {
            return Err(Error::Checkpoint("merged model must not contain a router".into()));
        }
        Ok(Self { model, header, alpha })
    }
}

impl EnergyModel for MergedModel {
    fn cutoff(&self) -> f64 {
        self.model.config.cutoff
    }

    fn energy_forces(&self, system: &AtomicSystem, graph: &NeighborGraph) -> Result<(f64, Vec<Vec3>)> {
        self.check_header(system)?;
        self.model.energy_and_forces(system, graph)
    }
}

/// Collapses every expert stack with the router's coefficients for `header`
/// and drops the router.
pub fn merge_model(model: &PotentialModel, header: &SystemHeader) -> Result<MergedModel> {
    let alpha = model.route(header)?;
    if !model.has_router() {
        return Ok(MergedModel { model: model.clone(), header: header.clone(), alpha });
    }
    let mut store = ParamStore::new();
    for (i, spec) in model.params.specs.iter().enumerate() {
        if spec.reuse == Reuse::Router {
            continue;
        }
        let values = model.params.slice(i);
        match spec.experts {
            Some((out, inp)) => {
                let experts = values.chunks(out * inp).map(<[f64]>::to_vec).collect();
                let merged = MoleLayer::new(out, inp, experts, None)?.merge(&alpha)?;
                store.push_experts(&spec.name, 1, out, inp, spec.reuse, merged.weight);
            }
            None => {
                store.push_spec(&spec.name, spec.rows, spec.cols, spec.reuse, None, spec.bias, values.to_vec());
            }
        }
    }
    let mut config = model.config.clone();
    config.experts = 1;
    let merged = PotentialModel::from_params(config, store)?;
    Ok(MergedModel { model: merged, header: header.clone(), alpha })
}

/// Mean router coefficient per (species, expert) over the systems that
/// contain that species.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertUsage {
    pub k: usize,
    /// species → (summed α per expert, number of systems)
    pub rows: BTreeMap<u8, (Vec<f64>, usize)>,
}

impl ExpertUsage {
    pub fn mean(&self, species: u8) -> Option<Vec<f64>> {
        self.rows.get(&species).map(|(s, n)| s.iter().map(|v| v / *n as f64).collect())
    }

    /// Tab-separated `species expert mean_alpha systems`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("species\texpert\tmean_alpha\tsystems\n");
        for (z, (sum, n)) in &self.rows {
            for (k, s) in sum.iter().enumerate() {
                out.push_str(&format!("{z}\t{k}\t{:.6}\t{n}\n", s / *n as f64));
            }
        }
        out
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_tsv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn expert_usage(model: &PotentialModel, systems: &[AtomicSystem]) -> Result<ExpertUsage> {
    let k = model.config.experts;
    let mut rows: BTreeMap<u8, (Vec<f64>, usize)> = BTreeMap::new();
    for sys in systems {
        let header = sys.header();
        let alpha = model.route(&header)?;
        let mut species = header.species.clone();
        species.dedup();
        for z in species {
            let entry = rows.entry(z).or_insert_with(|| (vec![0.0; alpha.k()], 0));
            for (s, a) in entry.0.iter_mut().zip(alpha.alpha()) {
                *s += a;
            }
            entry.1 += 1;
        }
    }
    Ok(ExpertUsage { k, rows })
}
