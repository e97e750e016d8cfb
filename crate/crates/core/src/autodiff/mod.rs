//! Dense f64 tensors, a reverse-mode tape, named parameter collections,
//! AdamW, and flat binary checkpoints.

mod checkpoint;
mod graph;
mod optim;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use graph::{Gradients, Graph, OpKind, Var, PROB_EPS};
pub use optim::AdamW;
pub use tensor::Tensor;

use std::collections::HashMap;

/// Ordered, named parameter collection. Order is insertion order and is
/// the canonical order for optimizer state and checkpoints, so identical
/// construction paths give byte-identical artifacts.
#[derive(Debug, Clone, Default)]
pub struct ParamMap {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamMap {
    pub fn new() -> Self {
        ParamMap::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        tensor.set_requires_grad(true);
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let ix = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.tensors[ix]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let ix = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.tensors[ix]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter_mut())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    /// Bitwise equality, used by freeze checks.
    pub fn bitwise_eq(&self, other: &ParamMap) -> bool {
        if self.names != other.names {
            return false;
        }
        self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
            a.shape() == b.shape()
                && a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        })
    }
}

/// Graph handles for a bound `ParamMap`: every parameter inserted as a
/// differentiable leaf, addressable by name.
pub struct BoundParams {
    entries: Vec<(String, Var)>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn bind(g: &mut Graph, params: &ParamMap) -> Self {
        let mut entries = Vec::with_capacity(params.len());
        let mut index = HashMap::with_capacity(params.len());
        for (name, tensor) in params.iter() {
            let var = g.leaf(tensor.clone());
            index.insert(name.to_string(), entries.len());
            entries.push((name.to_string(), var));
        }
        BoundParams { entries, index }
    }

    pub fn var(&self, name: &str) -> Var {
        let ix = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"));
        self.entries[ix].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Accumulated gradients keyed by parameter name. Parameters that never
/// received a contribution are simply absent and read as zero.
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    map: HashMap<String, Tensor>,
}

impl GradStore {
    pub fn new() -> Self {
        GradStore::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn accumulate(&mut self, name: &str, grad: &Tensor) {
        match self.map.get_mut(name) {
            Some(acc) => {
                assert_eq!(acc.shape(), grad.shape(), "gradient shape drift for {name}");
                for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            None => {
                self.map.insert(name.to_string(), grad.clone());
            }
        }
    }

    /// Pull gradients for every bound parameter out of a backward pass and
    /// add them here.
    pub fn absorb(&mut self, bound: &BoundParams, grads: &Gradients) {
        for (name, var) in bound.iter() {
            if let Some(g) = grads.get(var) {
                self.accumulate(name, g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.map.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    /// Check all stored gradients are finite; returns the first offending
    /// parameter name otherwise.
    pub fn first_non_finite(&self) -> Option<&str> {
        let mut names: Vec<&String> = self.map.keys().collect();
        names.sort();
        for name in names {
            if !self.map[name].all_finite() {
                return Some(name);
            }
        }
        None
    }
}

/// Gradient of a scalar root with respect to one named parameter set.
pub fn grads_for(bound: &BoundParams, grads: &Gradients) -> GradStore {
    let mut store = GradStore::new();
    store.absorb(bound, grads);
    store
}

/// Central finite differences of a scalar-valued function with respect to
/// one coordinate of one named parameter. Lives here so both unit and
/// integration tests can use it; deliberately knows nothing about graphs.
pub fn fd_param_grad<F>(params: &ParamMap, name: &str, coord: usize, h: f64, mut f: F) -> f64
where
    F: FnMut(&ParamMap) -> f64,
{
    let mut plus = params.clone();
    plus.get_mut(name).data_mut()[coord] += h;
    let mut minus = params.clone();
    minus.get_mut(name).data_mut()[coord] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Relative error with an absolute floor of 1, matching the gradient
/// fidelity tolerance used throughout the tests.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

impl std::fmt::Debug for BoundParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BoundParams")
            .field("len", &self.entries.len())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_map_preserves_insertion_order() {
        let mut p = ParamMap::new();
        p.insert("b", Tensor::scalar(1.0));
        p.insert("a", Tensor::scalar(2.0));
        let names: Vec<&str> = p.names().collect();
        assert_eq!(names, ["b", "a"]);
        assert_eq!(p.numel(), 2);
    }

    #[test]
    fn bound_params_route_gradients_by_name() {
        let mut p = ParamMap::new();
        p.insert("w", Tensor::from_vec(vec![2.0, 3.0]));
        let mut g = Graph::new();
        let b = BoundParams::bind(&mut g, &p);
        let w = b.var("w");
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        let store = grads_for(&b, &grads);
        assert_eq!(store.get("w").unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn grad_store_accumulates_and_detects_non_finite() {
        let mut s = GradStore::new();
        s.accumulate("w", &Tensor::from_vec(vec![1.0, 2.0]));
        s.accumulate("w", &Tensor::from_vec(vec![0.5, 0.5]));
        assert_eq!(s.get("w").unwrap().data(), &[1.5, 2.5]);
        assert!(s.first_non_finite().is_none());
        s.accumulate("v", &Tensor::from_vec(vec![f64::NAN]));
        assert_eq!(s.first_non_finite(), Some("v"));
    }
}
