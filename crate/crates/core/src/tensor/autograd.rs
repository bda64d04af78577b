use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

/// Backward rule: receives the output gradient and, per input, whether that
/// input needs a gradient. Returns one optional gradient per input.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync>;

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any tape nodes on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

struct OpRecord<T> {
    name: &'static str,
    inputs: Vec<Option<Arc<Node<T>>>>,
    backward: BackwardFn<T>,
}

pub(crate) struct Node<T> {
    id: u64,
    shape: Vec<usize>,
    op: Option<OpRecord<T>>,
    grad: Mutex<Option<Vec<T>>>,
}

impl<T: Element> Node<T> {
    pub(crate) fn leaf(shape: Vec<usize>) -> Self {
        Node {
            id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            op: None,
            grad: Mutex::new(None),
        }
    }

    pub(crate) fn op(
        name: &'static str,
        shape: Vec<usize>,
        inputs: Vec<Option<Arc<Node<T>>>>,
        backward: BackwardFn<T>,
    ) -> Self {
        Node {
            id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            op: Some(OpRecord {
                name,
                inputs,
                backward,
            }),
            grad: Mutex::new(None),
        }
    }

    pub(crate) fn is_leaf(&self) -> bool {
        self.op.is_none()
    }

    pub(crate) fn leaf_grad(&self) -> Option<Vec<T>> {
        self.grad.lock().expect("grad lock").clone()
    }

    pub(crate) fn clear_grad(&self) {
        *self.grad.lock().expect("grad lock") = None;
    }

    fn accumulate_leaf(&self, g: &[T]) {
        let mut slot = self.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }
}

impl<T> Drop for Node<T> {
    // Long chains would otherwise drop recursively through `inputs`.
    fn drop(&mut self) {
        let mut pending: Vec<Arc<Node<T>>> = Vec::new();
        if let Some(op) = self.op.as_mut() {
            pending.extend(op.inputs.drain(..).flatten());
        }
        while let Some(node) = pending.pop() {
            if let Ok(mut inner) = Arc::try_unwrap(node) {
                if let Some(op) = inner.op.as_mut() {
                    pending.extend(op.inputs.drain(..).flatten());
                }
            }
        }
    }
}

/// Operations reachable from a root, in recording order.
pub struct Tape<T: Element> {
    ops: Vec<Arc<Node<T>>>,
}

impl<T: Element> Tape<T> {
    /// Collects the recorded operations that produced `root`.
    pub fn of(root: &Tensor<T>) -> Self {
        let mut ops = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<Arc<Node<T>>> = root.node().cloned().into_iter().collect();
        while let Some(node) = stack.pop() {
            if !seen.insert(node.id) {
                continue;
            }
            if let Some(op) = &node.op {
                stack.extend(op.inputs.iter().flatten().cloned());
                ops.push(node);
            }
        }
        ops.sort_by_key(|n| n.id);
        Tape { ops }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Operation names in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.ops
            .iter()
            .map(|n| n.op.as_ref().map_or("leaf", |o| o.name))
            .collect()
    }

    fn run_backward(&self, root: &Arc<Node<T>>) {
        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        let seed = vec![T::one(); numel(&root.shape)];
        if root.is_leaf() {
            root.accumulate_leaf(&seed);
            return;
        }
        grads.insert(root.id, seed);
        for node in self.ops.iter().rev() {
            let Some(g) = grads.remove(&node.id) else {
                continue;
            };
            let op = node.op.as_ref().expect("tape holds op nodes only");
            let needs: Vec<bool> = op.inputs.iter().map(Option::is_some).collect();
            let input_grads = (op.backward)(&g, &needs);
            debug_assert_eq!(input_grads.len(), op.inputs.len(), "{}: grad arity", op.name);
            for (input, ig) in op.inputs.iter().zip(input_grads) {
                let (Some(input), Some(ig)) = (input, ig) else {
                    continue;
                };
                debug_assert_eq!(ig.len(), numel(&input.shape), "{}: grad size", op.name);
                if input.is_leaf() {
                    input.accumulate_leaf(&ig);
                } else {
                    match grads.get_mut(&input.id) {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                        None => {
                            grads.insert(input.id, ig);
                        }
                    }
                }
            }
        }
    }
}

impl<T: Element> Tensor<T> {
    /// Back-propagates from this scalar, accumulating into every reachable
    /// leaf's gradient slot.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        let root = self.node().ok_or(Error::DetachedTensor)?;
        Tape::of(self).run_backward(root);
        Ok(())
    }
}
