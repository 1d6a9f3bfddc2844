//! Equivariant building blocks and the parameter registry they live in.
//!
//! Layers own no tensors directly. Each holds [`ParamId`]s into a
//! [`ParamStore`]; a forward pass binds the store to an autodiff graph
//! through a [`Ctx`].

mod attention;
mod conv;
mod norm;
mod rearrange;

pub use attention::{NaiveChannelAttention, REChannelAttention};
pub use conv::{Block, ConvKind, ConvModule, DownsampleBlock, DownsampleMode, EquivConv};
pub use norm::{EquivBatchNorm, NormKind, NormLayout};
pub use rearrange::{
    merge_groups, merge_orientations, merge_permutation, orientation_pool, rearrange_by_orientation,
    rearrange_groups, rearrange_permutation,
};

pub use crate::autodiff::PoolKind;
pub use crate::tensor::ConvSpec;

use std::cell::RefCell;

use crate::autodiff::check::GradErrors;
use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

/// Output extent of a convolution, `floor((S_in + 2p - (k-1) - 1) / s) + 1`.
pub fn out_size(spec: ConvSpec, s_in: usize) -> Result<usize> {
    spec.out_size(s_in)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable, weight decay applies.
    Weight,
    /// Trainable, exempt from weight decay (biases, norm affine terms).
    NoDecay,
    /// Not trainable (running statistics).
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Float> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Ordered registry of named tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T: Float = f32> {
    params: Vec<Param<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.params.push(Param { name, value, kind });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Normal initialisation with standard deviation `sqrt(2 / fan_in)`.
    pub fn add_kaiming(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let value = Tensor::from_fn(shape, |_| T::from_f64(std * rng.normal()));
        self.add(name, value, ParamKind::Weight)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {}: shape {:?}, got {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.kind.trainable())
            .map(|(id, _)| id)
            .collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.numel())
            .sum()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn trainable_count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable() && p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    kind: p.kind,
                })
                .collect(),
        }
    }

    /// Write buffer updates produced by a training forward pass.
    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) -> Result<()> {
        for (id, value) in updates {
            self.set(id, value)?;
        }
        Ok(())
    }
}

/// Forward-pass context: a graph, the parameters bound onto it and the
/// train/eval switch.
pub struct Ctx<'g, 's, T: Float = f32> {
    graph: &'g Graph<T>,
    store: &'s ParamStore<T>,
    vars: RefCell<Vec<Option<Var<'g, T>>>>,
    train: bool,
    updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

/// Running-statistics momentum for batch normalisation.
pub const BN_MOMENTUM: f64 = 0.1;

impl<'g, 's, T: Float> Ctx<'g, 's, T> {
    pub fn new(graph: &'g Graph<T>, store: &'s ParamStore<T>, train: bool) -> Self {
        Ctx {
            graph,
            store,
            vars: RefCell::new(vec![None; store.len()]),
            train,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// The graph value of a parameter; trainable parameters become leaves
    /// the first time they are requested.
    pub fn param(&self, id: ParamId) -> Var<'g, T> {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let p = self.store.param(id);
        let v = if p.kind.trainable() {
            self.graph.leaf(p.value.clone())
        } else {
            self.graph.constant(p.value.clone())
        };
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Use `var` as the graph value of parameter `id` for this pass.
    pub fn bind(&self, id: ParamId, var: Var<'g, T>) -> Result<()> {
        if var.shape() != self.store.get(id).shape() {
            return Err(Error::shape(format!(
                "binding {:?} to parameter {} of shape {:?}",
                var.shape(),
                self.store.param(id).name,
                self.store.get(id).shape()
            )));
        }
        self.vars.borrow_mut()[id.0] = Some(var);
        Ok(())
    }

    pub(crate) fn push_update(&self, id: ParamId, value: Tensor<T>) {
        self.updates.borrow_mut().push((id, value));
    }

    pub fn take_updates(&self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.updates.borrow_mut())
    }

    /// Gradients for every trainable parameter, in store order. Parameters
    /// not used by the forward pass get zeros.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        let vars = self.vars.borrow();
        self.store
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let g = match vars[id.0] {
                    Some(v) => grads.take_id(v.id()),
                    None => Tensor::zeros(self.store.get(id).shape()),
                };
                (id, g)
            })
            .collect()
    }
}

/// Finite-difference check of a layer forward with respect to its input and
/// every trainable parameter in `store`; returns the maximum relative error.
pub fn gradcheck_layer<F>(store: &ParamStore<f64>, x: &Tensor<f64>, train: bool, forward: F) -> Result<f64>
where
    F: for<'g> Fn(&Ctx<'g, '_, f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    Ok(gradcheck_layer_report(store, x, train, 1e-3, forward)?.elementwise)
}

/// [`gradcheck_layer`] with an explicit step, returning both error measures.
pub fn gradcheck_layer_report<F>(store: &ParamStore<f64>, x: &Tensor<f64>, train: bool, step: f64, forward: F) -> Result<GradErrors>
where
    F: for<'g> Fn(&Ctx<'g, '_, f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    let ids = store.trainable_ids();
    let mut inputs = vec![x.clone()];
    inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
    crate::autodiff::check::finite_diff_report(
        |graph, vars| {
            let ctx = Ctx::new(graph, store, train);
            for (&id, &v) in ids.iter().zip(&vars[1..]) {
                ctx.bind(id, v)?;
            }
            forward(&ctx, vars[0])
        },
        &inputs,
        step,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(&[1]), ParamKind::Weight).unwrap();
        assert!(s.add("a", Tensor::zeros(&[1]), ParamKind::Weight).is_err());
    }

    #[test]
    fn set_checks_shape() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add("a", Tensor::zeros(&[2]), ParamKind::Weight).unwrap();
        assert!(s.set(id, Tensor::zeros(&[3])).is_err());
        s.set(id, Tensor::ones(&[2])).unwrap();
        assert_eq!(s.get(id), &Tensor::ones(&[2]));
    }

    #[test]
    fn counts_skip_buffers() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::zeros(&[3, 2]), ParamKind::Weight).unwrap();
        s.add("b", Tensor::zeros(&[3]), ParamKind::NoDecay).unwrap();
        s.add("m", Tensor::zeros(&[3]), ParamKind::Buffer).unwrap();
        assert_eq!(s.trainable_count(), 9);
        assert_eq!(s.trainable_ids().len(), 2);
    }

    #[test]
    fn ctx_binds_each_param_once() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::ones(&[2]), ParamKind::Weight).unwrap();
        let unused = s.add("u", Tensor::ones(&[4]), ParamKind::Weight).unwrap();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &s, true);
        let a = ctx.param(id);
        let b = ctx.param(id);
        assert_eq!(a.id(), b.id());
        let loss = a.mul(b).unwrap().sum().unwrap();
        let mut grads = g.backward(loss).unwrap();
        let pg = ctx.param_grads(&mut grads);
        assert_eq!(pg[0].1, Tensor::full(&[2], 2.0));
        assert_eq!(pg[1], (unused, Tensor::zeros(&[4])));
    }
}
