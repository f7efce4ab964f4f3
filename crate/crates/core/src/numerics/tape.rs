//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive evaluated on it as a node holding its
//! output value and, when gradients are enabled, a closure that maps the
//! node's output gradient to gradients of its inputs. Nodes are appended in
//! evaluation order, so walking the node list backwards is a reverse
//! topological order.

use super::array::ShapedArray;
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of an entry in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: ShapedArray<T>,
    /// Buffers such as batch-norm running statistics are not trainable.
    pub trainable: bool,
}

/// Named parameter and buffer registry shared by a model and its tapes.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ShapedArray<T>) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: ShapedArray<T>) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: ShapedArray<T>, trainable: bool) -> ParamId {
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ShapedArray<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ShapedArray<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}

pub(crate) type BackFn<T> = Box<dyn Fn(&BackCtx<'_, T>, &ShapedArray<T>) -> Vec<(Var, ShapedArray<T>)>>;

struct Node<T> {
    value: ShapedArray<T>,
    back: Option<BackFn<T>>,
    requires_grad: bool,
}

/// Read access to recorded values while running backward closures.
pub struct BackCtx<'a, T> {
    nodes: &'a [Node<T>],
}

impl<T: Scalar> BackCtx<'_, T> {
    pub fn value(&self, v: Var) -> &ShapedArray<T> {
        &self.nodes[v.0].value
    }

    /// Whether a gradient for `v` is wanted at all.
    pub fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<T>>,
    params: &'p ParamStore<T>,
    param_vars: Vec<Option<Var>>,
    buffer_updates: Vec<(ParamId, ShapedArray<T>)>,
    grad_enabled: bool,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            nodes: Vec::new(),
            params,
            param_vars: vec![None; params.len()],
            buffer_updates: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; `backward` on it yields no gradients.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ShapedArray<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: ShapedArray<T>) -> Var {
        self.nodes.push(Node {
            value,
            back: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, value: ShapedArray<T>) -> Var {
        self.nodes.push(Node {
            value,
            back: None,
            requires_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// The node for parameter `id`; repeated calls return the same node so
    /// each parameter has a single gradient accumulator.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let entry = self.params.entry(id);
        self.nodes.push(Node {
            value: entry.value.clone(),
            back: None,
            requires_grad: self.grad_enabled && entry.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Record a new buffer value (e.g. batch-norm running statistics) to be
    /// applied by the caller once the step completes.
    pub fn record_buffer_update(&mut self, id: ParamId, value: ShapedArray<T>) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, ShapedArray<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("variable {} is not recorded on this tape", v.0)));
        }
        Ok(())
    }

    /// Append the result of a primitive. `back` is stored only when gradients
    /// are enabled and at least one input requires them.
    pub fn push_op<F>(&mut self, value: ShapedArray<T>, inputs: &[Var], back: F) -> Var
    where
        F: Fn(&BackCtx<'_, T>, &ShapedArray<T>) -> Vec<(Var, ShapedArray<T>)> + 'static,
    {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            back: if requires_grad { Some(Box::new(back)) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every leaf
    /// and parameter recorded on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<ShapedArray<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(ShapedArray::ones(lv.shape()));
        }
        let ctx = BackCtx { nodes: &self.nodes };
        for i in (0..=loss.0).rev() {
            let Some(back) = &self.nodes[i].back else { continue };
            let Some(g) = grads[i].take() else { continue };
            for (v, gv) in back(&ctx, &g) {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(gv.shape(), self.nodes[v.0].value.shape());
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(gv.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gv),
                }
            }
        }
        let param_shapes = self.params.entries().iter().map(|e| e.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
            param_shapes,
        })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<ShapedArray<T>>>,
    param_vars: Vec<Option<Var>>,
    param_shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, `None` if it did not influence the loss.
    pub fn var(&self, v: Var) -> Option<&ShapedArray<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter; zeros when it did not influence the loss.
    pub fn param(&self, id: ParamId) -> ShapedArray<T> {
        self.param_vars[id.0]
            .and_then(|v| self.grads[v.0].clone())
            .unwrap_or_else(|| ShapedArray::zeros(&self.param_shapes[id.0]))
    }

    /// One gradient per store entry, aligned with [`ParamStore::ids`].
    pub fn params(&self) -> Vec<ShapedArray<T>> {
        (0..self.param_shapes.len()).map(|i| self.param(ParamId(i))).collect()
    }
}
