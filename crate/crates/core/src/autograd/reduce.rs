use super::{grad_slot, Graph, Node, Op, Real, Tensor, Var};
use crate::error::{Error, Result};

impl<T: Real> Graph<T> {
    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let src = &self.value(a).data;
        let s: T = src.iter().copied().sum();
        let m = s / T::of(src.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Sum along one axis, keeping it with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.value(a).data;
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut data[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::SumAxis(a, axis),
            &[a],
        ))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::invalid("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.mul_scalar(s, T::one() / T::of(len as f64)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if shape.iter().product::<usize>() != src.data.len() {
            return Err(Error::shape("reshape", &src.shape, shape));
        }
        let value = Tensor::new(shape.to_vec(), src.data.clone())?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Per-pixel maximum across the channel axis of an `[N, C, H, W]` array.
    /// Ties pick the lowest channel index.
    pub fn channel_max(&mut self, a: Var) -> Result<Var> {
        self.channel_select(a, "channel_max", |cand, best| cand > best)
    }

    /// Per-pixel minimum across the channel axis. Ties pick the lowest channel index.
    pub fn channel_min(&mut self, a: Var) -> Result<Var> {
        self.channel_select(a, "channel_min", |cand, best| cand < best)
    }

    fn channel_select(
        &mut self,
        a: Var,
        op: &'static str,
        better: impl Fn(T, T) -> bool,
    ) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(Error::invalid(op, format!("expected [N, C, H, W], got {shape:?}")));
        };
        let plane = h * w;
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(n * plane);
        let mut source = Vec::with_capacity(n * plane);
        for b in 0..n {
            for p in 0..plane {
                let mut best = b * c * plane + p;
                for ch in 1..c {
                    let i = (b * c + ch) * plane + p;
                    if better(src[i], src[best]) {
                        best = i;
                    }
                }
                data.push(src[best]);
                source.push(best);
            }
        }
        let value = Tensor {
            shape: vec![n, 1, h, w],
            data,
        };
        Ok(self.push(value, Op::Select { input: a, source }, &[a]))
    }
}

pub(super) fn backward_sum_axis<T: Real>(head: &mut [Node<T>], a: Var, axis: usize, grad: &[T]) {
    let shape = head[a.0].value.shape.clone();
    let Some(slot) = grad_slot(head, a) else {
        return;
    };
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    for o in 0..outer {
        let g = &grad[o * inner..(o + 1) * inner];
        for l in 0..len {
            let dst = &mut slot[(o * len + l) * inner..(o * len + l + 1) * inner];
            dst.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
        }
    }
}
