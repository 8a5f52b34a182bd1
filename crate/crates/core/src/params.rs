//! Ordered, named collections of parameter tensors.

use crate::error::{Error, Result};
use crate::grid::{Grid, Real};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Grid<T>)>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    /// Appends a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, grid: Grid<T>) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::contract("param_set", format!("duplicate tensor {name}")));
        }
        self.entries.push((name, grid));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Result<&Grid<T>> {
        self.index_of(name)
            .map(|i| &self.entries[i].1)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Grid<T>> {
        match self.index_of(name) {
            Some(i) => Ok(&mut self.entries[i].1),
            None => Err(Error::Checkpoint(format!("missing tensor {name}"))),
        }
    }

    /// Looks up `name` and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Grid<T>> {
        let g = self.get(name)?;
        if g.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                g.shape()
            )));
        }
        Ok(g)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Grid<T>)> {
        self.entries.iter().map(|(n, g)| (n.as_str(), g))
    }

    pub fn grids(&self) -> impl Iterator<Item = &Grid<T>> {
        self.entries.iter().map(|(_, g)| g)
    }

    pub fn grids_mut(&mut self) -> impl Iterator<Item = &mut Grid<T>> {
        self.entries.iter_mut().map(|(_, g)| g)
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self.entries.iter().map(|(n, g)| (n.clone(), g.cast())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grids().all(Grid::all_finite)
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter().find(|(_, g)| !g.all_finite()).map(|(n, _)| n)
    }

    pub fn scalar_count(&self) -> usize {
        self.grids().map(Grid::len).sum()
    }
}
