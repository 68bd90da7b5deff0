use super::{Real, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of one recorded operation.
///
/// Receives the gradient of the loss with respect to the operation's output,
/// the input values, the output value, and which inputs need a gradient. It
/// returns one optional gradient per input; `None` is allowed only where the
/// corresponding `needs` entry is false.
pub type BackwardFn<T> =
    Box<dyn Fn(&[T], &[&Tensor<T>], &Tensor<T>, &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    /// Accumulated gradient; kept for leaves only.
    grad: Option<Vec<T>>,
}

/// Append-only record of a forward pass.
///
/// A tape is confined to one thread while it is alive. Leaves created with
/// `requires_grad` accumulate gradients across [`Tape::backward`] calls until
/// [`Tape::zero_grad`] is called.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    /// Records an operation whose value was computed by the caller.
    ///
    /// This is the extension point for operations defined outside the tensor
    /// module. The value is checked for non-finite entries.
    pub fn record(
        &mut self,
        op: &'static str,
        inputs: &[Var],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            inputs: inputs.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Back-propagates from a scalar `loss`, adding into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.backward {
                None => {
                    if node.requires_grad {
                        let node = &mut self.nodes[i];
                        match &mut node.grad {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                            None => node.grad = Some(g),
                        }
                    }
                }
                Some(f) => {
                    let inputs: Vec<&Tensor<T>> =
                        node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let needs: Vec<bool> =
                        node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                    let grads = f(&g, &inputs, &node.value, &needs);
                    debug_assert_eq!(grads.len(), node.inputs.len(), "{}", node.op);
                    let op = node.op;
                    for ((inp, gi), need) in node.inputs.iter().zip(grads).zip(needs) {
                        if !need {
                            continue;
                        }
                        let gi = gi.unwrap_or_else(|| panic!("{op}: missing input gradient"));
                        debug_assert_eq!(gi.len(), self.nodes[inp.0].value.len(), "{op}");
                        if gi.iter().any(|v| !v.is_finite()) {
                            return Err(TensorError::NonFinite { op });
                        }
                        match &mut adj[inp.0] {
                            Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += *b),
                            slot @ None => *slot = Some(gi),
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient_and_accumulation() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
        tape.zero_grad();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::ones(&[3]), false);
        let b = tape.leaf(Tensor::ones(&[3]), true);
        let c = tape.mul(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(a).is_none());
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn shared_subexpression_visited_once() {
        // z = (x + x) * x, dz/dx = 4x
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let s = tape.add(x, x).unwrap();
        let z = tape.mul(s, x).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[8.0]);
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(f64::MAX), true);
        let r = tape.mul(x, x);
        assert!(matches!(r, Err(TensorError::NonFinite { .. })));
    }
}
