//! Named parameter storage and per-graph binding.

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    /// Buffers such as running statistics are stored but not optimized.
    pub trainable: bool,
}

/// Ordered, uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Same parameters in another precision.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), trainable: p.trainable })
                .collect(),
        }
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        for p in &self.params {
            a.push(p.name.clone(), p.value.cast()).expect("store names are unique");
        }
        a
    }

    /// Overwrites every stored tensor from the archive entry of the same name.
    pub fn load_archive(&mut self, archive: &TensorArchive) -> Result<()> {
        for p in &mut self.params {
            let t =
                archive.get(&p.name).ok_or_else(|| Error::Format(format!("archive lacks parameter {:?}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter {:?} has shape {:?} in archive, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
        }
        Ok(())
    }
}

/// Lazily places store entries on a graph so that every use of a parameter
/// shares one leaf and its gradient accumulates across uses.
pub struct Binding {
    vars: Vec<Option<Var>>,
    track: bool,
}

impl Binding {
    pub fn new<F: Scalar>(store: &ParamStore<F>, track: bool) -> Self {
        Self { vars: vec![None; store.len()], track }
    }

    pub fn var<F: Scalar>(&mut self, g: &mut Graph<F>, store: &ParamStore<F>, id: ParamId) -> Var {
        *self.vars[id.0].get_or_insert_with(|| {
            let p = &store.params[id.0];
            g.leaf(p.value.clone(), self.track && p.trainable)
        })
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    /// Gradients of trainable parameters after a backward pass; unused ones are zero.
    pub fn grads<F: Scalar>(&self, g: &Graph<F>, store: &ParamStore<F>) -> Vec<(ParamId, Tensor<F>)> {
        store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| {
                let grad =
                    self.vars[id.0].and_then(|v| g.grad(v).cloned()).unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                (id, grad)
            })
            .collect()
    }
}
