//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Tape`] in execution order; [`Tape::backward`]
//! walks the record once in reverse and returns gradients for every leaf that
//! requires them. Binary elementwise operations broadcast NumPy-style:
//! shapes are aligned on the right and each dimension must either match or
//! be 1 on one side.

mod ops;
mod params;
mod tensor;
#[cfg(test)]
mod tests;

use std::cell::RefCell;
use std::rc::Rc;

pub use params::{BoundParams, ParamId, ParamStore};
pub use tensor::{broadcast_shape, Tensor};

use crate::error::{invalid, Result};

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Record of executed operations. Confined to one thread; independent tapes
/// may be used concurrently.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push(Rc::new(t), vec![], None, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(Rc::new(t), vec![], None, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Rc<Tensor>, parents: Vec<usize>, backward: Option<BackwardFn>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents, backward, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records the result of an operation. The backward closure is kept only
    /// when some parent requires a gradient.
    pub(crate) fn record(&self, value: Tensor, parents: &[Var<'_>], backward: BackwardFn) -> Var<'_> {
        let rg = parents.iter().any(|p| self.requires_grad(p.id));
        let ids = parents.iter().map(|p| p.id).collect();
        self.push(Rc::new(value), ids, if rg { Some(backward) } else { None }, rg)
    }

    /// Back-propagates from a scalar `loss` and clears the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let lv = &nodes[loss.id].value;
        if lv.len() != 1 {
            return invalid(format!("backward needs a scalar loss, got shape {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(f) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let pg = f(&g);
            debug_assert_eq!(pg.len(), node.parents.len());
            for (p, pgrad) in node.parents.iter().zip(pg) {
                let Some(pgrad) = pgrad else { continue };
                if !nodes[*p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pgrad.shape(), nodes[*p].value.shape(), "gradient shape mismatch");
                match &mut grads[*p] {
                    Some(acc) => acc.add_assign(&pgrad),
                    slot => *slot = Some(pgrad),
                }
            }
        }
        let mut out = Gradients { grads: vec![None; nodes.len()] };
        for (id, node) in nodes.iter().enumerate() {
            if node.requires_grad && node.parents.is_empty() {
                out.grads[id] = grads[id].take();
            }
        }
        Ok(out)
    }
}

/// Gradients of the loss with respect to leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`; `None` when `v` did not influence the loss.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of its shape.
    pub fn get_or_zeros(&self, v: Var<'_>, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub(crate) fn take_by_id(&mut self, id: usize) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }
}

/// Max relative error between reverse-mode and central-difference gradients
/// of a scalar function, `|a − fd| / max(1, |a|)` over all coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, vs| f(tape, vs[0]), std::slice::from_ref(x), h)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(xs)
        .map(|(v, x)| grads.get_or_zeros(*v, x.shape()))
        .collect();
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let t = Tape::new();
        let vs: Vec<_> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        Ok(f(&t, &vs)?.item())
    };
    let mut worst = 0.0f64;
    let mut work = xs.to_vec();
    for k in 0..xs.len() {
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic[k].data()[i];
            worst = worst.max((a - fd).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
