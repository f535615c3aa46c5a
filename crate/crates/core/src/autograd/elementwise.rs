use super::{grad_slot, Graph, Node, Op, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Index mapping for numpy-style broadcasting of two operands.
struct Broadcast {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

fn contiguous_strides(shape: &[usize], rank: usize, out: &[usize]) -> Vec<usize> {
    let offset = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        if d < offset {
            continue;
        }
        let size = shape[d - offset];
        strides[d] = if size == 1 && out[d] != 1 { 0 } else { acc };
        acc *= size;
    }
    strides
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Option<Self> {
        let rank = a.len().max(b.len());
        let dim = |s: &[usize], d: usize| {
            let off = rank - s.len();
            if d < off {
                1
            } else {
                s[d - off]
            }
        };
        let mut out_shape = Vec::with_capacity(rank);
        for d in 0..rank {
            let (x, y) = (dim(a, d), dim(b, d));
            out_shape.push(match (x, y) {
                _ if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return None,
            });
        }
        let a_strides = contiguous_strides(a, rank, &out_shape);
        let b_strides = contiguous_strides(b, rank, &out_shape);
        Some(Broadcast {
            out_shape,
            a_strides,
            b_strides,
        })
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out_shape.len();
        let total: usize = self.out_shape.iter().product();
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for o in 0..total {
            f(o, ia, ib);
            let mut d = rank;
            while d > 0 {
                d -= 1;
                idx[d] += 1;
                ia += self.a_strides[d];
                ib += self.b_strides[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                ia -= self.a_strides[d] * self.out_shape[d];
                ib -= self.b_strides[d] * self.out_shape[d];
                idx[d] = 0;
            }
        }
    }
}

impl<T: Real> Graph<T> {
    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let value = if sa == sb {
            let data = self
                .value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor {
                shape: sa.to_vec(),
                data,
            }
        } else {
            let bc = Broadcast::new(sa, sb).ok_or_else(|| Error::shape(op_name, sa, sb))?;
            let (xa, xb) = (&self.value(a).data, &self.value(b).data);
            let mut data = vec![T::zero(); bc.out_shape.iter().product()];
            bc.for_each(|o, ia, ib| data[o] = f(xa[ia], xb[ib]));
            Tensor {
                shape: bc.out_shape,
                data,
            }
        };
        Ok(self.push(value, op, &[a, b]))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise quotient. Fails if the divisor holds an exact zero; callers
    /// guard denominators with an epsilon.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data.iter().any(|v| v.is_zero()) {
            return Err(Error::DivisionByZero);
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| f(x)).collect(),
        };
        self.push(value, op, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x * c, Op::MulScalar(a, c))
    }

    /// `c - a`, elementwise.
    pub fn rsub_scalar(&mut self, c: T, a: Var) -> Var {
        let neg = self.mul_scalar(a, -T::one());
        self.add_scalar(neg, c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data.iter().any(|&x| x <= T::zero()) {
            return Err(Error::invalid("log", "input must be strictly positive"));
        }
        Ok(self.map(a, |x| x.ln(), Op::Log(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data.iter().any(|&x| x <= T::zero()) {
            return Err(Error::invalid("sqrt", "input must be strictly positive"));
        }
        Ok(self.map(a, |x| x.sqrt(), Op::Sqrt(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        if !(slope >= T::zero() && slope < T::one()) {
            return Err(Error::invalid("leaky_relu", format!("slope {slope} not in [0, 1)")));
        }
        Ok(self.map(
            a,
            |x| if x >= T::zero() { x } else { x * slope },
            Op::LeakyRelu(a, slope),
        ))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }
}

/// Logistic function that never evaluates `exp` of a large positive argument.
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Accumulates per-operand contributions, reducing over broadcast dimensions.
fn accumulate_pair<T: Real>(
    head: &mut [Node<T>],
    a: Var,
    b: Var,
    out: &Tensor<T>,
    da: impl Fn(usize, usize, usize) -> T,
    db: impl Fn(usize, usize, usize) -> T,
) {
    let need_a = head[a.0].requires_grad;
    let need_b = head[b.0].requires_grad;
    let sa = head[a.0].value.shape.clone();
    let sb = head[b.0].value.shape.clone();
    let mut ga = vec![T::zero(); if need_a { head[a.0].value.data.len() } else { 0 }];
    let mut gb = vec![T::zero(); if need_b { head[b.0].value.data.len() } else { 0 }];
    if sa == sb {
        for o in 0..out.data.len() {
            if need_a {
                ga[o] = da(o, o, o);
            }
            if need_b {
                gb[o] = db(o, o, o);
            }
        }
    } else {
        let bc = Broadcast::new(&sa, &sb).expect("shapes validated in forward");
        bc.for_each(|o, ia, ib| {
            if need_a {
                ga[ia] = ga[ia] + da(o, ia, ib);
            }
            if need_b {
                gb[ib] = gb[ib] + db(o, ia, ib);
            }
        });
    }
    if let Some(slot) = grad_slot(head, a) {
        slot.iter_mut().zip(&ga).for_each(|(s, &g)| *s = *s + g);
    }
    if let Some(slot) = grad_slot(head, b) {
        slot.iter_mut().zip(&gb).for_each(|(s, &g)| *s = *s + g);
    }
}

pub(super) fn backward_add<T: Real>(
    head: &mut [Node<T>],
    a: Var,
    b: Var,
    out: &Tensor<T>,
    grad: &[T],
    sign: T,
) {
    accumulate_pair(head, a, b, out, |o, _, _| grad[o], |o, _, _| sign * grad[o]);
}

pub(super) fn backward_mul<T: Real>(
    head: &mut [Node<T>],
    a: Var,
    b: Var,
    out: &Tensor<T>,
    grad: &[T],
) {
    let xa = head[a.0].value.data.clone();
    let xb = head[b.0].value.data.clone();
    accumulate_pair(
        head,
        a,
        b,
        out,
        |o, _, ib| grad[o] * xb[ib],
        |o, ia, _| grad[o] * xa[ia],
    );
}

pub(super) fn backward_div<T: Real>(
    head: &mut [Node<T>],
    a: Var,
    b: Var,
    out: &Tensor<T>,
    grad: &[T],
) {
    let xb = head[b.0].value.data.clone();
    let y = &out.data;
    accumulate_pair(
        head,
        a,
        b,
        out,
        |o, _, ib| grad[o] / xb[ib],
        |o, _, ib| -grad[o] * y[o] / xb[ib],
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![2], vec![-1.0, 3.0]).unwrap());
        let y = g.leaky_relu(x, 0.2).unwrap();
        assert_eq!(g.value(y).data(), &[-0.2, 3.0]);
        let y = g.leaky_relu(x, 0.7).unwrap();
        assert_eq!(g.value(y).data()[1], 3.0);
        assert!(g.leaky_relu(x, 1.0).is_err());
        assert!(g.leaky_relu(x, -0.1).is_err());
    }

    #[test]
    fn sigmoid_is_overflow_safe() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![3], vec![0.0, 40.0, -200.0]).unwrap());
        let y = g.sigmoid(x);
        let v = g.value(y).data();
        assert_eq!(v[0], 0.5);
        assert!((v[1] - 1.0).abs() <= f32::EPSILON);
        assert!(v[2].is_finite() && v[2] >= 0.0);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1], vec![40.0]).unwrap());
        let y = g.sigmoid(x);
        assert!((g.value(y).data()[0] - 1.0).abs() <= f64::EPSILON);
    }

    #[test]
    fn broadcast_channel_plane() {
        let mut g = Graph::<f64>::new();
        let img = g.param(Tensor::new(vec![1, 3, 1, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let t = g.param(Tensor::new(vec![1, 1, 1, 2], vec![10., 100.]).unwrap());
        let y = g.mul(img, t).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 1, 2]);
        assert_eq!(g.value(y).data(), &[10., 200., 30., 400., 50., 600.]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(t).data(), &[1. + 3. + 5., 2. + 4. + 6.]);
        assert_eq!(g.grad(img).data(), &[10., 100., 10., 100., 10., 100.]);
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn division_by_zero_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(&[2], 1.0));
        let b = g.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(g.div(a, b), Err(Error::DivisionByZero)));
    }

    #[test]
    fn rank_padding_broadcast() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
        let s = g.constant(Tensor::scalar(1.0));
        let y = g.sub(a, s).unwrap();
        assert_eq!(g.value(y).data(), &[0., 1., 2., 3.]);
    }
}
