//! A small tape-based reverse-mode differentiation engine.
//!
//! Every operation executed on a [`Graph`] appends a node holding its output
//! value and enough saved state to run its backward rule. Nodes are only ever
//! appended, so the node order is a topological order and [`Graph::backward`]
//! is a single reverse sweep. A graph is meant to live for exactly one
//! optimization step: parameters are copied in as leaves, gradients are read
//! back out, and the graph is dropped.

mod conv;
mod elementwise;
mod norm;
mod reduce;

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub use conv::Padding;

/// Floating point element type of a graph. Implemented for `f32` and `f64`.
pub trait Real:
    Float + FromPrimitive + Debug + Display + Default + Send + Sync + std::iter::Sum + 'static
{
    const NAME: &'static str;

    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts")
    }

    /// `c = alpha * a * b + beta * c` on strided matrices, `a` is `m x k`, `b` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Real for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
            ) {
                let last = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows as isize - 1) * rs + (cols as isize - 1) * cs
                    }
                };
                assert!(last(m, k, a_strides) < a.len() as isize);
                assert!(last(k, n, b_strides) < b.len() as isize);
                assert!(c.len() >= m * n);
                // SAFETY: the asserts above keep every strided access in bounds
                // and `c` is a dense row-major `m x n` block we hold mutably.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

/// A dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(
                "tensor",
                format!("dimensions must be positive, got {shape:?}"),
            ));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {len} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        cols: Vec<T>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    /// Max pooling and channel min/max: each output element copies one input element.
    Select { input: Var, source: Vec<usize> },
    Upsample2(Var),
}

/// Record of one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Adds a leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last backward sweep, zeros if the node was unreachable.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor {
                shape: node.value.shape.clone(),
                data: g.clone(),
            },
            None => Tensor::zeros(&node.value.shape),
        }
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    /// Populates gradients of every node reachable from `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleGraph);
        }
        let root_shape = &self.nodes[root.0].value.shape;
        if root_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot(root_shape.clone()));
        }
        self.consumed = true;
        self.nodes[root.0].grad = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &mut tail[0];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = node.grad.take() else {
                continue;
            };
            backprop(head, node, &grad);
            node.grad = Some(grad);
        }
        Ok(())
    }
}

/// Gradient buffer of an input node, allocated on first use. `None` for constants.
fn grad_slot<T: Real>(head: &mut [Node<T>], v: Var) -> Option<&mut [T]> {
    let node = &mut head[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.shape.iter().product();
    Some(node.grad.get_or_insert_with(|| vec![T::zero(); len]))
}

fn backprop<T: Real>(head: &mut [Node<T>], node: &Node<T>, grad: &[T]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => elementwise::backward_add(head, *a, *b, out, grad, T::one()),
        Op::Sub(a, b) => elementwise::backward_add(head, *a, *b, out, grad, -T::one()),
        Op::Mul(a, b) => elementwise::backward_mul(head, *a, *b, out, grad),
        Op::Div(a, b) => elementwise::backward_div(head, *a, *b, out, grad),
        Op::AddScalar(a) => unary(head, *a, grad, |_, g| g),
        Op::MulScalar(a, c) => {
            let c = *c;
            unary(head, *a, grad, |_, g| g * c)
        }
        Op::Exp(a) => unary_out(head, *a, out, grad, |y, g| g * y),
        Op::Log(a) => unary(head, *a, grad, |x, g| g / x),
        Op::Square(a) => unary(head, *a, grad, |x, g| g * (x + x)),
        Op::Sqrt(a) => unary_out(head, *a, out, grad, |y, g| g / (y + y)),
        Op::Relu(a) => unary(head, *a, grad, |x, g| if x >= T::zero() { g } else { T::zero() }),
        Op::LeakyRelu(a, slope) => {
            let slope = *slope;
            unary(head, *a, grad, |x, g| if x >= T::zero() { g } else { g * slope })
        }
        Op::Sigmoid(a) => unary_out(head, *a, out, grad, |y, g| g * y * (T::one() - y)),
        Op::Sum(a) => unary(head, *a, grad, |_, _| grad[0]),
        Op::Mean(a) => {
            let n = T::of(head[a.0].value.data.len() as f64);
            let g = grad[0] / n;
            unary(head, *a, grad, |_, _| g)
        }
        Op::SumAxis(a, axis) => reduce::backward_sum_axis(head, *a, *axis, grad),
        Op::Reshape(a) => unary(head, *a, grad, |_, g| g),
        Op::Conv2d {
            input,
            kernel,
            bias,
            cols,
            geom,
        } => conv::backward_conv2d(head, *input, *kernel, *bias, cols, geom, grad),
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
        } => norm::backward_batch_norm(head, *input, *gamma, *beta, xhat, inv_std, grad),
        Op::Select { input, source } => {
            if let Some(slot) = grad_slot(head, *input) {
                for (&src, &g) in source.iter().zip(grad) {
                    slot[src] = slot[src] + g;
                }
            }
        }
        Op::Upsample2(a) => conv::backward_upsample2(head, *a, out, grad),
    }
}

/// Elementwise backward where the local derivative depends on the input value.
fn unary<T: Real>(head: &mut [Node<T>], a: Var, grad: &[T], f: impl Fn(T, T) -> T) {
    if !head[a.0].requires_grad {
        return;
    }
    let x = std::mem::take(&mut head[a.0].value.data);
    if let Some(slot) = grad_slot(head, a) {
        if grad.len() == slot.len() {
            for ((s, &xv), &g) in slot.iter_mut().zip(&x).zip(grad) {
                *s = *s + f(xv, g);
            }
        } else {
            // scalar upstream gradient broadcast over the input (sum/mean)
            for (s, &xv) in slot.iter_mut().zip(&x) {
                *s = *s + f(xv, grad[0]);
            }
        }
    }
    head[a.0].value.data = x;
}

/// Elementwise backward where the local derivative is a function of the output.
fn unary_out<T: Real>(
    head: &mut [Node<T>],
    a: Var,
    out: &Tensor<T>,
    grad: &[T],
    f: impl Fn(T, T) -> T,
) {
    if let Some(slot) = grad_slot(head, a) {
        for ((s, &y), &g) in slot.iter_mut().zip(&out.data).zip(grad) {
            *s = *s + f(y, g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let xx = g.mul(x, x).unwrap();
        let root = g.sum(xx);
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn mean_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![4], vec![1.0, -2.0, 5.0, 0.5]).unwrap());
        let root = g.mean(x);
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).data(), &[0.25; 4]);
    }

    #[test]
    fn backward_twice_is_stale() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.square(x);
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::StaleGraph)));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let c = g.constant(Tensor::scalar(4.0));
        let y = g.mul(x, c).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).data(), &[4.0]);
        assert!(!g.requires_grad(c));
        assert_eq!(g.grad(c).data(), &[0.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = x * x + 3x at x = 2 -> dy/dx = 2x + 3 = 7
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(2.0));
        let sq = g.mul(x, x).unwrap();
        let lin = g.mul_scalar(x, 3.0);
        let y = g.add(sq, lin).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).data(), &[7.0]);
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
