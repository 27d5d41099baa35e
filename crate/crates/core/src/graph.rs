//! Radius-cutoff neighbor graphs with periodic images and an optional
//! per-atom incoming-edge cap.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::systems::{det3, AtomicSystem, Cell, Vec3};

/// Default cutoff in toy length units.
pub const DEFAULT_CUTOFF: f64 = 3.0;

/// Most periodic images searched along one lattice direction.
pub const MAX_IMAGES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub shift: [i32; 3],
}

/// Directed edges: every pair within the cutoff appears once per direction.
/// `edge_vectors[e] = pos[dst] + shift·cell − pos[src]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    pub n_atoms: usize,
    pub edges: Vec<Edge>,
    pub edge_vectors: Vec<Vec3>,
    pub cutoff: f64,
}

impl NeighborGraph {
    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn distances(&self) -> Vec<f64> {
        self.edge_vectors.iter().map(norm).collect()
    }

    /// Incoming-edge count per atom.
    pub fn in_degree(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_atoms];
        for e in &self.edges {
            deg[e.dst] += 1;
        }
        deg
    }

    /// Recomputes edge vectors for moved atoms, keeping the edge set.
    pub fn update_vectors(&mut self, system: &AtomicSystem) {
        let cell = system.cell.as_ref();
        for (e, v) in self.edges.iter().zip(self.edge_vectors.iter_mut()) {
            *v = edge_vector(system, cell, e);
        }
    }

    /// Cartesian offset `shift·cell` for every edge.
    pub fn shift_offsets(&self, cell: Option<&Cell>) -> Vec<Vec3> {
        self.edges
            .iter()
            .map(|e| match cell {
                Some(c) => lattice_offset(c, e.shift),
                None => [0.0; 3],
            })
            .collect()
    }
}

pub(crate) fn norm(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn lattice_offset(cell: &Cell, shift: [i32; 3]) -> Vec3 {
    let mut out = [0.0; 3];
    for (k, row) in cell.iter().enumerate() {
        let s = shift[k] as f64;
        for d in 0..3 {
            out[d] += s * row[d];
        }
    }
    out
}

/// Fractional coordinates of `p` (row vector) in `cell`.
fn fractional(cell: &Cell, det: f64, p: &Vec3) -> Vec3 {
    // Reciprocal rows: (b×c, c×a, a×b)/det, f_k = recip_k · p.
    let recip = [cross(&cell[1], &cell[2]), cross(&cell[2], &cell[0]), cross(&cell[0], &cell[1])];
    let mut f = [0.0; 3];
    for k in 0..3 {
        f[k] = (recip[k][0] * p[0] + recip[k][1] * p[1] + recip[k][2] * p[2]) / det;
    }
    f
}

/// Images needed per lattice direction so that every pair within `cutoff`
/// is found; zero along non-periodic axes.
fn image_counts(system: &AtomicSystem, cutoff: f64) -> Result<([i32; 3], Option<(Cell, f64)>)> {
    if !system.is_periodic() {
        return Ok(([0; 3], None));
    }
    let cell = system.cell.ok_or_else(|| Error::InvalidSystem("periodic system without a cell".into()))?;
    let det = det3(&cell);
    if !(det > 0.0) {
        return Err(Error::DegenerateCell { det });
    }
    let mut counts = [0i32; 3];
    for a in 0..3 {
        if !system.pbc[a] {
            continue;
        }
        let width = det / norm(&cross(&cell[(a + 1) % 3], &cell[(a + 2) % 3]));
        let n = (cutoff / width).ceil() as usize;
        if n > MAX_IMAGES {
            return Err(Error::ImageSearch { cutoff, images: n, limit: MAX_IMAGES });
        }
        counts[a] = n as i32;
    }
    Ok((counts, Some((cell, det))))
}

fn check_cutoff(cutoff: f64) -> Result<()> {
    if !(cutoff > 0.0 && cutoff.is_finite()) {
        return Err(Error::Config(format!("cutoff must be positive and finite, got {cutoff}")));
    }
    Ok(())
}

/// Builds the neighbor graph with a binned (cell-list) search.
///
/// With `max_neighbors = Some(m)` each atom keeps its `m` nearest incoming
/// edges, ties broken by `(distance, src, shift)`.
pub fn build_graph(system: &AtomicSystem, cutoff: f64, max_neighbors: Option<usize>) -> Result<NeighborGraph> {
    check_cutoff(cutoff)?;
    let n = system.len();
    let (counts, lattice) = image_counts(system, cutoff)?;

    // Wrap atoms into the home cell along periodic axes.
    let mut wraps = vec![[0i32; 3]; n];
    let mut home = system.positions.clone();
    if let Some((cell, det)) = &lattice {
        for i in 0..n {
            let f = fractional(cell, *det, &system.positions[i]);
            for a in 0..3 {
                if system.pbc[a] {
                    wraps[i][a] = f[a].floor() as i32;
                }
            }
            let off = lattice_offset(cell, wraps[i]);
            for d in 0..3 {
                home[i][d] -= off[d];
            }
        }
    }

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &home {
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }

    // Image atoms (atom, image shift in the wrapped frame, position).
    let mut images: Vec<(usize, [i32; 3], Vec3)> = Vec::new();
    for j in 0..n {
        for sa in -counts[0]..=counts[0] {
            for sb in -counts[1]..=counts[1] {
                for sc in -counts[2]..=counts[2] {
                    let s = [sa, sb, sc];
                    let mut p = home[j];
                    if let Some((cell, _)) = &lattice {
                        let off = lattice_offset(cell, s);
                        for d in 0..3 {
                            p[d] += off[d];
                        }
                    }
                    if (0..3).all(|d| p[d] >= lo[d] - cutoff && p[d] <= hi[d] + cutoff) {
                        images.push((j, s, p));
                    }
                }
            }
        }
    }

    let bin_of = |p: &Vec3| -> [i64; 3] {
        [
            ((p[0] - lo[0]) / cutoff).floor() as i64,
            ((p[1] - lo[1]) / cutoff).floor() as i64,
            ((p[2] - lo[2]) / cutoff).floor() as i64,
        ]
    };
    let mut bins: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (k, (_, _, p)) in images.iter().enumerate() {
        bins.entry(bin_of(p)).or_default().push(k);
    }

    let cutoff2 = cutoff * cutoff;
    let mut found: Vec<(Edge, Vec3, f64)> = Vec::new();
    for i in 0..n {
        let b = bin_of(&home[i]);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(members) = bins.get(&[b[0] + dx, b[1] + dy, b[2] + dz]) else { continue };
                    for &k in members {
                        let (j, s, p) = &images[k];
                        let v = [p[0] - home[i][0], p[1] - home[i][1], p[2] - home[i][2]];
                        let d2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                        if d2 > cutoff2 {
                            continue;
                        }
                        let shift = [
                            s[0] - wraps[*j][0] + wraps[i][0],
                            s[1] - wraps[*j][1] + wraps[i][1],
                            s[2] - wraps[*j][2] + wraps[i][2],
                        ];
                        if *j == i && shift == [0; 3] {
                            continue;
                        }
                        if d2 == 0.0 {
                            let (a, b) = if i <= *j { (i, *j) } else { (*j, i) };
                            return Err(Error::OverlappingAtoms { i: a, j: b, shift });
                        }
                        found.push((Edge { src: i, dst: *j, shift }, v, d2.sqrt()));
                    }
                }
            }
        }
    }

    Ok(finish(n, cutoff, found, max_neighbors, system, lattice.as_ref().map(|l| &l.0)))
}

/// Applies the cap, recomputes vectors from the unwrapped positions, and
/// orders edges by `(dst, src, shift)`.
fn finish(
    n: usize,
    cutoff: f64,
    mut found: Vec<(Edge, Vec3, f64)>,
    max_neighbors: Option<usize>,
    system: &AtomicSystem,
    cell: Option<&Cell>,
) -> NeighborGraph {
    if let Some(cap) = max_neighbors {
        found.sort_by(|a, b| {
            a.0.dst
                .cmp(&b.0.dst)
                .then(a.2.total_cmp(&b.2))
                .then(a.0.src.cmp(&b.0.src))
                .then(a.0.shift.cmp(&b.0.shift))
        });
        let mut kept = Vec::with_capacity(found.len());
        let mut current = usize::MAX;
        let mut count = 0;
        for item in found {
            if item.0.dst != current {
                current = item.0.dst;
                count = 0;
            }
            if count < cap {
                kept.push(item);
                count += 1;
            }
        }
        found = kept;
    }
    found.sort_by_key(|a| (a.0.dst, a.0.src, a.0.shift));
    let edges: Vec<Edge> = found.iter().map(|f| f.0).collect();
    let edge_vectors = edges.iter().map(|e| edge_vector(system, cell, e)).collect();
    NeighborGraph { n_atoms: n, edges, edge_vectors, cutoff }
}

fn edge_vector(system: &AtomicSystem, cell: Option<&Cell>, e: &Edge) -> Vec3 {
    let off = cell.map(|c| lattice_offset(c, e.shift)).unwrap_or([0.0; 3]);
    let (pd, ps) = (&system.positions[e.dst], &system.positions[e.src]);
    [pd[0] + off[0] - ps[0], pd[1] + off[1] - ps[1], pd[2] + off[2] - ps[2]]
}

/// All-pairs-with-images reference construction; quadratic, used to check
/// [`build_graph`].
pub fn brute_force_graph(system: &AtomicSystem, cutoff: f64, max_neighbors: Option<usize>) -> Result<NeighborGraph> {
    check_cutoff(cutoff)?;
    let n = system.len();
    let (counts, lattice) = image_counts(system, cutoff)?;
    let mut found = Vec::new();
    for src in 0..n {
        for dst in 0..n {
            // Center the shift window on the nearest image of dst.
            let mut center = [0i32; 3];
            if let Some((cell, det)) = &lattice {
                let fs = fractional(cell, *det, &system.positions[src]);
                let fd = fractional(cell, *det, &system.positions[dst]);
                for a in 0..3 {
                    if system.pbc[a] {
                        center[a] = -((fd[a] - fs[a]).round() as i32);
                    }
                }
            }
            let reach = |a: usize| if counts[a] > 0 { counts[a] + 1 } else { 0 };
            for sa in center[0] - reach(0)..=center[0] + reach(0) {
                for sb in center[1] - reach(1)..=center[1] + reach(1) {
                    for sc in center[2] - reach(2)..=center[2] + reach(2) {
                        let shift = [sa, sb, sc];
                        if src == dst && shift == [0; 3] {
                            continue;
                        }
                        let e = Edge { src, dst, shift };
                        let v = edge_vector(system, lattice.as_ref().map(|l| &l.0), &e);
                        let d = norm(&v);
                        if d == 0.0 {
                            let (i, j) = if src <= dst { (src, dst) } else { (dst, src) };
                            return Err(Error::OverlappingAtoms { i, j, shift });
                        }
                        if d <= cutoff {
                            found.push((e, v, d));
                        }
                    }
                }
            }
        }
    }
    Ok(finish(n, cutoff, found, max_neighbors, system, lattice.as_ref().map(|l| &l.0)))
}
