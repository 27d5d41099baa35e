//! Atomic systems, the task registry, the bundled element table, and the
//! line-delimited systems file format.
//!
//! One system per line, as a JSON object with the keys `positions`,
//! `species`, `cell`, `pbc`, `charge`, `spin`, `task`, `energy`, `forces`.
//! Optional keys (`cell`, `energy`, `forces`) are omitted when absent. Floats
//! are written in exponent form with 17 significant digits so every `f64`
//! survives a write/read cycle bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Cell = [[f64; 3]; 3];

/// Largest atomic number the toy element table and embeddings cover.
pub const MAX_SPECIES: u8 = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub energy: f64,
    pub forces: Vec<Vec3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtomicSystem {
    pub positions: Vec<Vec3>,
    pub species: Vec<u8>,
    /// Lattice vectors as rows.
    pub cell: Option<Cell>,
    pub pbc: [bool; 3],
    pub charge: i32,
    pub spin: u32,
    pub task: String,
    pub labels: Option<Labels>,
}

impl AtomicSystem {
    /// An unlabeled, non-periodic, neutral system.
    pub fn molecule(positions: Vec<Vec3>, species: Vec<u8>, task: &str) -> Self {
        Self {
            positions,
            species,
            cell: None,
            pbc: [false; 3],
            charge: 0,
            spin: 0,
            task: task.to_string(),
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_periodic(&self) -> bool {
        self.pbc.iter().any(|&p| p)
    }

    /// The routing-relevant header: everything except positions and cell.
    pub fn header(&self) -> SystemHeader {
        SystemHeader::new(&self.species, self.charge, self.spin, &self.task)
    }

    /// Checks the structural invariants against `registry`.
    pub fn validate(&self, registry: &TaskRegistry) -> Result<()> {
        let n = self.positions.len();
        if n == 0 {
            return Err(Error::InvalidSystem("system has no atoms".into()));
        }
        if self.species.len() != n {
            return Err(Error::InvalidSystem(format!(
                "{} positions but {} species",
                n,
                self.species.len()
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.forces.len() != n {
                return Err(Error::InvalidSystem(format!(
                    "{} positions but {} force labels",
                    n,
                    labels.forces.len()
                )));
            }
        }
        if self.is_periodic() {
            match &self.cell {
                None => return Err(Error::InvalidSystem("periodic system without a cell".into())),
                Some(cell) => {
                    let det = det3(cell);
                    if !(det > 0.0) {
                        return Err(Error::DegenerateCell { det });
                    }
                }
            }
        }
        if !registry.contains(&self.task) {
            return Err(Error::UnknownTask(self.task.clone()));
        }
        Ok(())
    }
}

/// Global information the router sees: species multiset, charge, spin, task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemHeader {
    /// Species sorted ascending, so the header is a multiset.
    pub species: Vec<u8>,
    pub charge: i32,
    pub spin: u32,
    pub task: String,
}

impl SystemHeader {
    pub fn new(species: &[u8], charge: i32, spin: u32, task: &str) -> Self {
        let mut species = species.to_vec();
        species.sort_unstable();
        Self { species, charge, spin, task: task.to_string() }
    }
}

pub fn det3(m: &Cell) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// The set of task tags the current model/data understand.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRegistry {
    tags: Vec<String>,
}

impl TaskRegistry {
    pub fn new<S: Into<String>>(tags: impl IntoIterator<Item = S>) -> Self {
        Self { tags: tags.into_iter().map(Into::into).collect() }
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t == tag)
    }

    pub fn index(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

impl Default for TaskRegistry {
    /// The three bundled oracle tasks.
    fn default() -> Self {
        Self::new(["lj-a", "lj-b", "morse"])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementEntry {
    /// Isolated-atom energy per task tag.
    pub isolated: BTreeMap<String, f64>,
    /// Heat of formation.
    pub hof: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ElementTable {
    pub entries: BTreeMap<u8, ElementEntry>,
}

#[derive(Deserialize)]
struct ElementFile {
    element: Vec<ElementRow>,
}

#[derive(Deserialize)]
struct ElementRow {
    species: u8,
    hof: f64,
    isolated: BTreeMap<String, f64>,
}

impl ElementTable {
    /// The fabricated table shipped with the crate.
    pub fn bundled() -> Self {
        Self::from_toml(include_str!("../data/elements.toml")).expect("bundled element table parses")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: ElementFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let entries = file
            .element
            .into_iter()
            .map(|r| (r.species, ElementEntry { isolated: r.isolated, hof: r.hof }))
            .collect();
        Ok(Self { entries })
    }

    /// `(E_isolated, ΔH_f)` for one species under one task.
    pub fn lookup(&self, species: u8, task: &str) -> Result<(f64, f64)> {
        let missing = || Error::MissingElement { species, task: task.to_string() };
        let entry = self.entries.get(&species).ok_or_else(missing)?;
        let e = entry.isolated.get(task).ok_or_else(missing)?;
        Ok((*e, entry.hof))
    }
}

// ---------------------------------------------------------------------------
// Serialization

fn push_f64(out: &mut String, x: f64) {
    // 17 significant digits in exponent form; always valid JSON.
    write!(out, "{:.16e}", x).unwrap();
}

fn push_vec3s(out: &mut String, v: &[Vec3]) {
    out.push('[');
    for (i, p) in v.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push('[');
        for (k, x) in p.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            push_f64(out, *x);
        }
        out.push(']');
    }
    out.push(']');
}

/// Encodes one system as a single line (no trailing newline).
pub fn encode_system(sys: &AtomicSystem) -> String {
    let mut out = String::with_capacity(64 + 80 * sys.len());
    out.push_str("{\"positions\":");
    push_vec3s(&mut out, &sys.positions);
    out.push_str(",\"species\":[");
    for (i, z) in sys.species.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{z}").unwrap();
    }
    out.push(']');
    if let Some(cell) = &sys.cell {
        out.push_str(",\"cell\":");
        push_vec3s(&mut out, cell);
    }
    write!(
        out,
        ",\"pbc\":[{},{},{}],\"charge\":{},\"spin\":{},\"task\":{}",
        sys.pbc[0],
        sys.pbc[1],
        sys.pbc[2],
        sys.charge,
        sys.spin,
        serde_json::to_string(&sys.task).unwrap()
    )
    .unwrap();
    if let Some(labels) = &sys.labels {
        out.push_str(",\"energy\":");
        push_f64(&mut out, labels.energy);
        out.push_str(",\"forces\":");
        push_vec3s(&mut out, &labels.forces);
    }
    out.push('}');
    out
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    positions: Vec<Vec3>,
    species: Vec<u8>,
    #[serde(default)]
    cell: Option<Cell>,
    pbc: [bool; 3],
    charge: i32,
    spin: u32,
    task: String,
    #[serde(default)]
    energy: Option<f64>,
    #[serde(default)]
    forces: Option<Vec<Vec3>>,
}

/// Decodes one record without registry validation. `line` is used for error
/// messages only.
pub fn decode_system(text: &str, line: usize) -> Result<AtomicSystem> {
    let raw: RawSystem =
        serde_json::from_str(text).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
    if raw.species.contains(&0) {
        return Err(Error::Parse { line, msg: "species must be positive".into() });
    }
    let labels = match (raw.energy, raw.forces) {
        (Some(energy), Some(forces)) => Some(Labels { energy, forces }),
        (None, None) => None,
        _ => {
            return Err(Error::Parse { line, msg: "`energy` and `forces` must appear together".into() })
        }
    };
    Ok(AtomicSystem {
        positions: raw.positions,
        species: raw.species,
        cell: raw.cell,
        pbc: raw.pbc,
        charge: raw.charge,
        spin: raw.spin,
        task: raw.task,
        labels,
    })
}

/// Parses a whole systems document held in memory.
pub fn parse_systems(text: &str, registry: &TaskRegistry) -> Result<Vec<AtomicSystem>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sys = decode_system(line, i + 1)?;
        sys.validate(registry)
            .map_err(|e| Error::Validation { line: i + 1, msg: e.to_string() })?;
        out.push(sys);
    }
    Ok(out)
}

pub fn read_systems(path: impl AsRef<Path>, registry: &TaskRegistry) -> Result<Vec<AtomicSystem>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sys = decode_system(&line, i + 1)?;
        sys.validate(registry)
            .map_err(|e| Error::Validation { line: i + 1, msg: e.to_string() })?;
        out.push(sys);
    }
    Ok(out)
}

pub fn write_systems(systems: &[AtomicSystem], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for sys in systems {
        writeln!(w, "{}", encode_system(sys)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
