//! Named parameter storage and per-step graph sessions.

use std::collections::HashMap;

use rand_distr::{Distribution, Uniform};

use crate::autograd::{Graph, Var};
use crate::error::{KudaError, Result};
use crate::rng::Rng;
use crate::snapshot::Snapshot;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named model parameters with per-parameter freeze flags.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    frozen: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names are unique; registering twice is a bug.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.frozen.push(false);
        ParamId(self.names.len() - 1)
    }

    /// Xavier-uniform `[d_in, d_out]` weight.
    pub fn xavier(
        &mut self,
        name: impl Into<String>,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> ParamId {
        let a = (6.0 / (d_in + d_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
        let data = (0..d_in * d_out).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::new(&[d_in, d_out], data).expect("valid"))
    }

    /// Gaussian-initialized tensor with standard deviation `std`.
    pub fn normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rand_distr::StandardNormal.sample(rng);
                z * std
            })
            .collect();
        self.insert(name, Tensor::new(shape, data).expect("valid"))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    /// Freezes (or thaws) every parameter whose name satisfies `pred`; returns the count.
    pub fn set_frozen_where(&mut self, frozen: bool, pred: impl Fn(&str) -> bool) -> usize {
        let mut n = 0;
        for i in 0..self.names.len() {
            if pred(&self.names[i]) {
                self.frozen[i] = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn snapshot_where(&self, pred: impl Fn(&str) -> bool) -> Snapshot {
        Snapshot {
            entries: self
                .names
                .iter()
                .zip(&self.values)
                .filter(|(n, _)| pred(n))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        self.snapshot_where(|_| true)
    }

    /// Copies every snapshot entry into the parameter of the same name.
    ///
    /// Unknown names and shape disagreements are errors; parameters absent
    /// from the snapshot are left untouched. Returns the number loaded.
    pub fn load(&mut self, snap: &Snapshot) -> Result<usize> {
        for (name, t) in &snap.entries {
            let id = self
                .id(name)
                .ok_or_else(|| KudaError::Snapshot(format!("unknown parameter {name}")))?;
            if self.values[id.0].shape() != t.shape() {
                return Err(KudaError::Snapshot(format!(
                    "{name}: checkpoint shape {:?} does not match model shape {:?}",
                    t.shape(),
                    self.values[id.0].shape()
                )));
            }
        }
        for (name, t) in &snap.entries {
            let id = self.index[name];
            self.values[id] = t.clone();
        }
        Ok(snap.entries.len())
    }
}

/// A graph for one forward/backward pass with parameters bound lazily.
///
/// Frozen parameters (and all parameters in an inference session) enter the
/// graph as constants, so no gradient can reach them.
pub struct Session<'a> {
    pub graph: Graph,
    params: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Session<'a> {
    pub fn train(params: &'a ParamStore) -> Self {
        Self::with_mode(params, true)
    }

    pub fn inference(params: &'a ParamStore) -> Self {
        Self::with_mode(params, false)
    }

    fn with_mode(params: &'a ParamStore, trainable: bool) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: vec![None; params.len()],
            trainable,
        }
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let requires_grad = self.trainable && !self.params.is_frozen(id);
        let v = self.graph.leaf(self.params.get(id).clone(), requires_grad);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Gradients of every bound, trainable parameter after backward.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let g = self.graph.grad(v)?;
                Some((ParamId(i), g.to_vec()))
            })
            .collect()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn frozen_params_are_constants() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(1, "t");
        let a = store.xavier("a", 2, 2, &mut rng);
        let b = store.xavier("b", 2, 2, &mut rng);
        store.set_frozen(b, true);
        let mut s = Session::train(&store);
        let va = s.param(a);
        let vb = s.param(b);
        let p = s.graph.matmul(va, vb).unwrap();
        let l = s.graph.sum(p);
        s.graph.backward(l).unwrap();
        let grads = s.param_grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, a);
        assert!(s.graph.grad(vb).is_none());
    }

    #[test]
    fn load_checks_names_and_shapes() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[2]));
        let bad_shape = Snapshot {
            entries: vec![("w".into(), Tensor::zeros(&[3]))],
        };
        assert!(store.load(&bad_shape).is_err());
        let unknown = Snapshot {
            entries: vec![("v".into(), Tensor::zeros(&[2]))],
        };
        assert!(store.load(&unknown).is_err());
        let ok = Snapshot {
            entries: vec![("w".into(), Tensor::full(&[2], 3.0))],
        };
        assert_eq!(store.load(&ok).unwrap(), 1);
        assert_eq!(store.get(store.id("w").unwrap()).data(), &[3.0, 3.0]);
    }
}
