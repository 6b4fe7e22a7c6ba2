//! Index map from named variables and parameters into the global state vector.

use std::collections::HashSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarKind {
    State,
    Parameter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarSpec {
    pub name: String,
    pub kind: VarKind,
    pub length: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
}

impl VarSpec {
    pub fn state(name: impl Into<String>, length: usize) -> Self {
        VarSpec {
            name: name.into(),
            kind: VarKind::State,
            length,
            grid: None,
        }
    }

    pub fn parameter(name: impl Into<String>, length: usize) -> Self {
        VarSpec {
            name: name.into(),
            kind: VarKind::Parameter,
            length,
            grid: None,
        }
    }

    pub fn with_grid(mut self, grid: GridSpec) -> Self {
        self.grid = Some(grid);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateLayout {
    entries: Vec<VarSpec>,
    offsets: Vec<usize>,
}

/// Builds a layout with prefix-sum offsets.
///
/// Names must be unique, lengths positive, grids (when given) must have
/// exactly `length` nodes, and all parameter entries must trail the state
/// entries.
pub fn build_state_layout(specs: impl IntoIterator<Item = VarSpec>) -> Result<StateLayout> {
    let entries: Vec<VarSpec> = specs.into_iter().collect();
    if entries.is_empty() {
        return Err(Error::Layout("layout needs at least one variable".into()));
    }
    let mut seen = HashSet::new();
    let mut in_params = false;
    let mut offsets = Vec::with_capacity(entries.len() + 1);
    let mut total = 0usize;
    for e in &entries {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::DuplicateName(e.name.clone()));
        }
        if e.length == 0 {
            return Err(Error::Layout(format!("variable `{}` has zero length", e.name)));
        }
        if let Some(g) = &e.grid {
            g.validate()?;
            if g.len() != e.length {
                return Err(Error::Layout(format!(
                    "variable `{}` has length {} but its grid has {} nodes",
                    e.name,
                    e.length,
                    g.len()
                )));
            }
        }
        match e.kind {
            VarKind::Parameter => in_params = true,
            VarKind::State if in_params => {
                return Err(Error::Layout(format!(
                    "state variable `{}` follows a parameter; parameters must form a trailing block",
                    e.name
                )))
            }
            VarKind::State => {}
        }
        offsets.push(total);
        total += e.length;
    }
    offsets.push(total);
    Ok(StateLayout { entries, offsets })
}

impl StateLayout {
    /// Single unnamed state block of length `n`; handy for tests and oracles.
    pub fn flat(n: usize) -> Result<Self> {
        build_state_layout([VarSpec::state("x", n)])
    }

    pub fn entries(&self) -> &[VarSpec] {
        &self.entries
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets[..self.entries.len()]
    }

    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn entry(&self, name: &str) -> Result<&VarSpec> {
        self.index_of(name)
            .map(|i| &self.entries[i])
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn range(&self, name: &str) -> Result<Range<usize>> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))?;
        Ok(self.range_at(i))
    }

    pub fn range_at(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Variable name and local offset for a global row index.
    pub fn locate(&self, row: usize) -> Option<(&str, usize)> {
        if row >= self.len() {
            return None;
        }
        let i = self.offsets[1..].partition_point(|&end| end <= row);
        Some((self.entries[i].name.as_str(), row - self.offsets[i]))
    }

    /// Rows holding physical state (everything before the parameter block).
    pub fn state_rows(&self) -> Range<usize> {
        0..self.param_rows().start
    }

    pub fn param_rows(&self) -> Range<usize> {
        let start = self
            .entries
            .iter()
            .position(|e| e.kind == VarKind::Parameter)
            .map(|i| self.offsets[i])
            .unwrap_or(self.len());
        start..self.len()
    }

    pub fn has_parameters(&self) -> bool {
        !self.param_rows().is_empty()
    }

    pub fn parameter_entries(&self) -> impl Iterator<Item = (usize, &VarSpec)> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == VarKind::Parameter)
    }

    /// Concatenates two layouts (state block first, parameters after).
    pub fn stacked(&self, other: &StateLayout) -> Result<StateLayout> {
        build_state_layout(self.entries.iter().chain(other.entries.iter()).cloned())
    }

    /// Per-row boolean mask selecting the rows of the named variables.
    pub fn row_mask(&self, names: &[&str]) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.len()];
        for name in names {
            for r in self.range(name)? {
                mask[r] = true;
            }
        }
        Ok(mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_variable() {
        let l = build_state_layout([VarSpec::state("h", 5)]).unwrap();
        assert_eq!(l.offsets(), &[0]);
        assert_eq!(l.len(), 5);
        assert_eq!(l.param_rows(), 5..5);
    }

    #[test]
    fn offsets_are_prefix_sums() {
        let l = build_state_layout([
            VarSpec::state("h", 10),
            VarSpec::state("u", 10),
            VarSpec::parameter("smb", 1),
        ])
        .unwrap();
        // Independent prefix-sum oracle.
        let lens = [10usize, 10, 1];
        let mut acc = 0;
        let oracle: Vec<usize> = lens
            .iter()
            .map(|l| {
                let o = acc;
                acc += l;
                o
            })
            .collect();
        assert_eq!(l.offsets(), oracle.as_slice());
        assert_eq!(l.len(), 21);
        assert_eq!(l.range("u").unwrap(), 10..20);
        assert_eq!(l.state_rows(), 0..20);
        assert_eq!(l.param_rows(), 20..21);
        for row in 0..21 {
            let (name, local) = l.locate(row).unwrap();
            assert_eq!(l.range(name).unwrap().start + local, row);
        }
        assert!(l.locate(21).is_none());
    }

    #[test]
    fn rejects_bad_layouts() {
        assert!(matches!(
            build_state_layout(Vec::<VarSpec>::new()),
            Err(Error::Layout(_))
        ));
        assert!(matches!(
            build_state_layout([VarSpec::state("a", 1), VarSpec::state("a", 2)]),
            Err(Error::DuplicateName(_))
        ));
        assert!(build_state_layout([VarSpec::parameter("p", 1), VarSpec::state("a", 2)]).is_err());
        assert!(build_state_layout([VarSpec::state("a", 0)]).is_err());
        let g = GridSpec::new(1.0, 1.0, 2, 2).unwrap();
        assert!(build_state_layout([VarSpec::state("a", 3).with_grid(g)]).is_err());
    }
}
