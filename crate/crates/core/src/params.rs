//! Flat parameter storage with named, shaped views.

use serde::{Deserialize, Serialize};

/// How often a parameter is applied per model call; drives the FLOP model
/// and the active-parameter census.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reuse {
    /// Once per edge.
    Edge,
    /// Once per atom.
    Node,
    /// Once per system (global embedding mixer).
    System,
    /// Table lookup; no arithmetic.
    Lookup,
    /// Router MLP; discarded when experts are merged.
    Router,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub reuse: Reuse,
    /// `(out, in)` when this tensor stacks `rows` mixture experts, one
    /// flattened `out×in` matrix per row.
    pub experts: Option<(usize, usize)>,
    /// Additive bias (1 FLOP per entry per use) rather than a matrix.
    pub bias: bool,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entries that survive expert merging.
    pub fn merged_len(&self) -> usize {
        match self.experts {
            Some((o, i)) => o * i,
            None => self.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub specs: Vec<ParamSpec>,
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, rows: usize, cols: usize, reuse: Reuse, values: Vec<f64>) -> usize {
        self.push_spec(name, rows, cols, reuse, None, false, values)
    }

    pub fn push_bias(&mut self, name: &str, cols: usize, reuse: Reuse) -> usize {
        self.push_spec(name, 1, cols, reuse, None, true, vec![0.0; cols])
    }

    pub fn push_experts(&mut self, name: &str, k: usize, out: usize, inp: usize, reuse: Reuse, values: Vec<f64>) -> usize {
        self.push_spec(name, k, out * inp, reuse, Some((out, inp)), false, values)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn push_spec(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        reuse: Reuse,
        experts: Option<(usize, usize)>,
        bias: bool,
        values: Vec<f64>,
    ) -> usize {
        assert_eq!(values.len(), rows * cols, "parameter `{name}` size");
        let offset = self.data.len();
        self.data.extend(values);
        self.specs.push(ParamSpec { name: name.to_string(), rows, cols, offset, reuse, experts, bias });
        self.specs.len() - 1
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn slice(&self, idx: usize) -> &[f64] {
        let s = &self.specs[idx];
        &self.data[s.offset..s.offset + s.len()]
    }

    pub fn slice_mut(&mut self, idx: usize) -> &mut [f64] {
        let s = &self.specs[idx];
        let (a, b) = (s.offset, s.offset + s.len());
        &mut self.data[a..b]
    }

    pub fn total(&self) -> usize {
        self.data.len()
    }

    /// Same layout, all zeros.
    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }
}
