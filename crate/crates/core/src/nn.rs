//! Parameter registry shared by every network module.
//!
//! Parameters live outside any graph as plain tensors. Each training step
//! binds the whole store into a fresh graph once, so a parameter used by
//! several forward paths (the shared backbone runs once per modality) is a
//! single leaf whose gradients accumulate.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Element, Graph, NodeId, TResult, Tensor, TensorError};

/// Handle to one named parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<E: Element> {
    pub name: String,
    pub tensor: Tensor<E>,
    /// Whether weight decay applies (conv/linear weights yes, biases and
    /// scale/shift terms no).
    pub decay: bool,
}

/// Ordered, named parameter set. Registration order is the canonical order
/// for checkpoints and optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<E: Element> {
    entries: Vec<ParamEntry<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<E>, decay: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor,
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<E>] {
        &self.entries
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<E>> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn set_by_name(&mut self, name: &str, tensor: Tensor<E>) -> TResult<()> {
        let entry = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| TensorError::contract("param_store", format!("unknown parameter `{name}`")))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(TensorError::dim(
                "param_store",
                format!(
                    "parameter `{name}` has shape {:?}, incoming {:?}",
                    entry.tensor.shape(),
                    tensor.shape()
                ),
            ));
        }
        entry.tensor = tensor;
        Ok(())
    }

    /// Total scalar count, optionally restricted to a name prefix.
    pub fn param_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Insert every parameter into `graph` as a requires_grad leaf.
    pub fn bind(&self, graph: &mut Graph<E>) -> Binding {
        Binding {
            node_ids: self
                .entries
                .iter()
                .map(|e| graph.leaf(e.tensor.clone(), true))
                .collect(),
        }
    }

    /// Bind parameters as gradient-free leaves (inference).
    pub fn bind_const(&self, graph: &mut Graph<E>) -> Binding {
        Binding {
            node_ids: self
                .entries
                .iter()
                .map(|e| graph.constant(e.tensor.clone()))
                .collect(),
        }
    }

    /// Same-structure store converted to another element type.
    pub fn cast<T: Element>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    decay: e.decay,
                })
                .collect(),
        }
    }
}

/// Per-graph mapping from [`ParamId`] to the leaf holding that parameter.
#[derive(Debug, Clone)]
pub struct Binding {
    node_ids: Vec<NodeId>,
}

impl Binding {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.node_ids[id.0]
    }

    pub fn node_ids(&self) -> &[NodeId] {
        &self.node_ids
    }
}

/// Kaiming fan-in normal initialization: std = sqrt(2 / fan_in).
pub fn kaiming<E: Element>(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<E> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    Tensor::from_fn(shape, |_| E::from_f64(dist.sample(rng)))
}

/// Conv layer parameters (weight + bias) registered under `name`.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    #[allow(clippy::too_many_arguments)]
    pub fn register<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = store.register(
            format!("{name}.w"),
            kaiming(vec![c_out, c_in, kernel, kernel], fan_in, rng),
            true,
        );
        let bias = store.register(format!("{name}.b"), Tensor::zeros(vec![c_out]), false);
        ConvParams {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn apply<E: Element>(
        &self,
        g: &mut Graph<E>,
        binding: &Binding,
        x: NodeId,
    ) -> TResult<NodeId> {
        g.conv2d(x, binding.node(self.weight), binding.node(self.bias), self.stride, self.padding)
    }
}

/// Fully connected layer parameters.
#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    pub fn register<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        decay: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.register(
            format!("{name}.w"),
            kaiming(vec![in_dim, out_dim], in_dim, rng),
            decay,
        );
        let bias = store.register(format!("{name}.b"), Tensor::zeros(vec![out_dim]), false);
        LinearParams { weight, bias }
    }

    pub fn apply<E: Element>(
        &self,
        g: &mut Graph<E>,
        binding: &Binding,
        x: NodeId,
    ) -> TResult<NodeId> {
        g.linear(x, binding.node(self.weight), binding.node(self.bias))
    }
}
