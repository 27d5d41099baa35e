//! Energy referencing and target normalization.
//!
//! Raw energies are first shifted by per-element isolated-atom energies and
//! heats of formation, then by a least-squares linear composition model;
//! what remains is divided by the atom count and by a force-RMS scale.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::systems::{AtomicSystem, ElementTable, Vec3};

/// Ridge term on the normal equations.
pub const TIKHONOV: f64 = 1e-10;
/// Smallest accepted ratio of extreme singular values.
const RANK_TOL: f64 = 1e-8;

/// `E − Σ_i (E_i,task − ΔH_f,i)` over the system's atoms.
pub fn hof_reference(energy: f64, system: &AtomicSystem, table: &ElementTable) -> Result<f64> {
    let (isolated, hof) = hof_sums(system, table)?;
    // Subtracting the isolated energies first makes the one-atom case exact.
    Ok(energy - isolated + hof)
}

/// Inverse of [`hof_reference`].
pub fn hof_unreference(referenced: f64, system: &AtomicSystem, table: &ElementTable) -> Result<f64> {
    let (isolated, hof) = hof_sums(system, table)?;
    Ok(referenced - hof + isolated)
}

fn hof_sums(system: &AtomicSystem, table: &ElementTable) -> Result<(f64, f64)> {
    let (mut isolated, mut hof) = (0.0, 0.0);
    for &z in &system.species {
        let (e, h) = table.lookup(z, &system.task)?;
        isolated += e;
        hof += h;
    }
    Ok((isolated, hof))
}

/// Per-species counts.
pub fn composition(species: &[u8]) -> BTreeMap<u8, usize> {
    let mut c = BTreeMap::new();
    for &z in species {
        *c.entry(z).or_insert(0) += 1;
    }
    c
}

/// Fits `E/n ≈ Σ_s (n_s/n) c_s` by damped normal equations.
///
/// The regression is per atom, so a single-species dataset yields
/// `c = mean(E/n)`. `task` only labels the rank-deficiency error.
pub fn fit_linear_reference(samples: &[(&[u8], f64)], task: &str) -> Result<BTreeMap<u8, f64>> {
    let species: Vec<u8> = samples.iter().flat_map(|(s, _)| s.iter().copied()).collect::<BTreeSet<_>>().into_iter().collect();
    let deficient = || Error::RankDeficient { task: task.to_string() };
    if species.is_empty() || samples.len() < species.len() {
        return Err(deficient());
    }
    let col: BTreeMap<u8, usize> = species.iter().enumerate().map(|(i, &z)| (z, i)).collect();
    let mut a = DMatrix::<f64>::zeros(samples.len(), species.len());
    let mut b = DVector::<f64>::zeros(samples.len());
    for (r, (s, e)) in samples.iter().enumerate() {
        let n = s.len() as f64;
        for (z, count) in composition(s) {
            a[(r, col[&z])] = count as f64 / n;
        }
        b[r] = e / n;
    }
    let sv = a.singular_values();
    let (max, min) = sv.iter().fold((0.0f64, f64::INFINITY), |(hi, lo), &v| (hi.max(v), lo.min(v)));
    if !(min > RANK_TOL * max) {
        return Err(deficient());
    }
    let mut ata = a.transpose() * &a;
    for i in 0..species.len() {
        ata[(i, i)] += TIKHONOV;
    }
    let atb = a.transpose() * b;
    let c = ata.cholesky().ok_or_else(deficient)?.solve(&atb);
    Ok(species.iter().enumerate().map(|(i, &z)| (z, c[i])).collect())
}

/// RMS over every force component.
pub fn force_rms<'a>(forces: impl IntoIterator<Item = &'a Vec3>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for f in forces {
        for x in f {
            sum += x * x;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// `Σ w σ / Σ w`.
pub fn combine_sigmas(parts: &[(f64, f64)]) -> f64 {
    let w: f64 = parts.iter().map(|p| p.1).sum();
    parts.iter().map(|(s, w)| s * w).sum::<f64>() / w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// task → (σ, system count)
    pub per_task: BTreeMap<String, (f64, usize)>,
    pub combined: f64,
}

/// Force-RMS scale per task and the system-count-weighted combination.
pub fn normalize_targets(systems: &[AtomicSystem]) -> Result<Normalization> {
    let mut groups: BTreeMap<String, (Vec<&Vec3>, usize)> = BTreeMap::new();
    for (i, s) in systems.iter().enumerate() {
        let labels = s.labels.as_ref().ok_or_else(|| Error::MissingLabels(format!("system {i} has no labels")))?;
        let g = groups.entry(s.task.clone()).or_default();
        g.0.extend(labels.forces.iter());
        g.1 += 1;
    }
    if groups.is_empty() {
        return Err(Error::MissingLabels("no systems".into()));
    }
    let mut per_task = BTreeMap::new();
    for (task, (forces, count)) in groups {
        let sigma = force_rms(forces);
        if !(sigma > 0.0) {
            return Err(Error::ZeroForceScale);
        }
        per_task.insert(task, (sigma, count));
    }
    let parts: Vec<(f64, f64)> = per_task.values().map(|(s, n)| (*s, *n as f64)).collect();
    Ok(Normalization { combined: combine_sigmas(&parts), per_task })
}

/// Everything needed to map raw labels to model targets and back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScheme {
    /// task → species → `E_i,task − ΔH_f,i`
    pub hof_offsets: BTreeMap<String, BTreeMap<u8, f64>>,
    /// task → species → linear coefficient (per atom)
    pub linear: BTreeMap<String, BTreeMap<u8, f64>>,
    pub normalization: Normalization,
}

impl ReferenceScheme {
    /// Fits the linear reference per task on HOF-referenced energies and the
    /// force scale on all labeled systems.
    pub fn fit(systems: &[AtomicSystem], table: &ElementTable) -> Result<Self> {
        let mut hof_offsets: BTreeMap<String, BTreeMap<u8, f64>> = BTreeMap::new();
        let mut by_task: BTreeMap<String, Vec<(&[u8], f64)>> = BTreeMap::new();
        for (i, s) in systems.iter().enumerate() {
            let labels = s.labels.as_ref().ok_or_else(|| Error::MissingLabels(format!("system {i} has no labels")))?;
            let offsets = hof_offsets.entry(s.task.clone()).or_default();
            for &z in &s.species {
                let (e, h) = table.lookup(z, &s.task)?;
                offsets.insert(z, e - h);
            }
            by_task.entry(s.task.clone()).or_default().push((&s.species, hof_reference(labels.energy, s, table)?));
        }
        let mut linear = BTreeMap::new();
        for (task, samples) in by_task {
            linear.insert(task.clone(), fit_linear_reference(&samples, &task)?);
        }
        Ok(Self { hof_offsets, linear, normalization: normalize_targets(systems)? })
    }

    pub fn sigma(&self) -> f64 {
        self.normalization.combined
    }

    /// `Σ_i (E_i − ΔH_i) + Σ_s n_s c_s`: everything the model does not learn.
    pub fn baseline(&self, system: &AtomicSystem) -> Result<f64> {
        let missing = |z: u8| Error::MissingElement { species: z, task: system.task.clone() };
        let hof = self.hof_offsets.get(&system.task);
        let lin = self.linear.get(&system.task);
        let mut total = 0.0;
        for &z in &system.species {
            total += hof.and_then(|m| m.get(&z)).ok_or_else(|| missing(z))?;
            total += lin.and_then(|m| m.get(&z)).ok_or_else(|| missing(z))?;
        }
        Ok(total)
    }

    /// Normalized per-atom energy target.
    pub fn energy_target(&self, system: &AtomicSystem, energy: f64) -> Result<f64> {
        Ok((energy - self.baseline(system)?) / system.len() as f64 / self.sigma())
    }

    /// Physical total energy from the model's per-atom output.
    pub fn energy_from_target(&self, system: &AtomicSystem, target: f64) -> Result<f64> {
        Ok(target * self.sigma() * system.len() as f64 + self.baseline(system)?)
    }

    pub fn force_target(&self, forces: &[Vec3]) -> Vec<Vec3> {
        let s = 1.0 / self.sigma();
        forces.iter().map(|f| [f[0] * s, f[1] * s, f[2] * s]).collect()
    }

    pub fn force_from_target(&self, forces: &[Vec3]) -> Vec<Vec3> {
        let s = self.sigma();
        forces.iter().map(|f| [f[0] * s, f[1] * s, f[2] * s]).collect()
    }
}
