//! Named parameter storage and per-forward graph binding.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{MimError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Insertion-ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        self.add(name, Tensor::randn(shape, std, rng))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| MimError::Contract(format!("unknown parameter {name}")))?;
        let slot = &mut self.tensors[id.0];
        if slot.shape() != value.shape() {
            return Err(MimError::Contract(format!(
                "parameter {name} has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }
}

/// A graph plus the lazily-bound parameters it reads.
///
/// Parameters enter the graph only when a forward pass first touches them, so
/// any parameter a forward never reads ends with an untouched gradient slot.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            track: true,
        }
    }

    /// A session whose parameters are bound as constants.
    pub fn inference(store: &'a ParamStore) -> Self {
        Session {
            track: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.store.get(id).clone(), self.track);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn is_bound(&self, id: ParamId) -> bool {
        self.bound[id.0].is_some()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)
    }

    /// Gradients of every bound parameter after [`Session::backward`].
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let g = self.graph.grad((*v)?)?;
                Some((ParamId(i), g.to_vec()))
            })
            .collect()
    }
}

impl ParamStore {
    pub fn accumulate_grads(&mut self, grads: Vec<(ParamId, Vec<f64>)>) {
        for (id, g) in grads {
            self.tensors[id.0].accumulate_grad(&g);
        }
    }
}

/// Affine map `x W + b` over the last axis of a rank-2 input.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Weights drawn from `N(0, 1/fan_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self::with_std(store, name, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng)
    }

    pub fn with_std<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Linear {
            weight: store.normal(format!("{name}.weight"), &[fan_in, fan_out], std, rng),
            bias: store.zeros(format!("{name}.bias"), &[fan_out]),
        }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: store.zeros(format!("{name}.weight"), &[fan_in, fan_out]),
            bias: store.zeros(format!("{name}.bias"), &[fan_out]),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.weight), s.p(self.bias));
        let y = s.graph.matmul(x, w)?;
        s.graph.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.zeros(format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gain), s.p(self.bias));
        s.graph.layernorm(x, g, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unread_parameters_get_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_vec(vec![2.0]));
        let b = store.add("b", Tensor::from_vec(vec![3.0]));
        let grads = {
            let mut s = Session::new(&store);
            let av = s.p(a);
            let y = s.graph.mul(av, av).unwrap();
            let loss = s.graph.sum(y);
            s.backward(loss).unwrap();
            assert!(!s.is_bound(b));
            s.param_grads()
        };
        store.accumulate_grads(grads);
        assert_eq!(store.get(a).grad().unwrap(), &[4.0]);
        assert!(store.get(b).grad().is_none());
    }

    #[test]
    fn inference_session_tracks_nothing() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_vec(vec![2.0]));
        let mut s = Session::inference(&store);
        let av = s.p(a);
        let loss = s.graph.sum(av);
        s.backward(loss).unwrap();
        assert!(s.param_grads().is_empty());
    }

    #[test]
    fn assign_checks_shape() {
        let mut store = ParamStore::new();
        store.zeros("w", &[2, 2]);
        assert!(store.assign("w", Tensor::zeros(&[4])).is_err());
        assert!(store.assign("nope", Tensor::zeros(&[4])).is_err());
        store.assign("w", Tensor::eye(2)).unwrap();
        assert_eq!(store.get(store.find("w").unwrap()), &Tensor::eye(2));
    }
}
