use super::{grad_slot, Graph, Node, Op, Real, Tensor, Var};
use crate::error::{Error, Result};

impl<T: Real> Graph<T> {
    /// Per-channel normalization over `(N, H, W)` using the statistics of the
    /// current pass, followed by the affine map `gamma * x_hat + beta`.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(Error::invalid("batch_norm", "eps must be positive"));
        }
        let shape = self.shape(input).to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(Error::invalid("batch_norm", format!("expected [N, C, H, W], got {shape:?}")));
        };
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("batch_norm", &shape, self.shape(p)));
            }
        }
        let plane = h * w;
        let m = T::of((n * plane) as f64);
        let x = &self.value(input).data;
        let gv = &self.value(gamma).data;
        let bv = &self.value(beta).data;
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut out = vec![T::zero(); x.len()];
        for ch in 0..c {
            let idx = |b: usize| (b * c + ch) * plane;
            let mut sum = T::zero();
            for b in 0..n {
                sum = sum + x[idx(b)..idx(b) + plane].iter().copied().sum::<T>();
            }
            let mean = sum / m;
            let mut var = T::zero();
            for b in 0..n {
                for &v in &x[idx(b)..idx(b) + plane] {
                    var = var + (v - mean) * (v - mean);
                }
            }
            var = var / m;
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for b in 0..n {
                for i in idx(b)..idx(b) + plane {
                    let xh = (x[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let value = Tensor { shape, data: out };
        let op = Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(value, op, &[input, gamma, beta]))
    }
}

pub(super) fn backward_batch_norm<T: Real>(
    head: &mut [Node<T>],
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    grad: &[T],
) {
    let shape = head[input.0].value.shape.clone();
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = T::of((n * plane) as f64);
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                sum_g[ch] = sum_g[ch] + grad[i];
                sum_gx[ch] = sum_gx[ch] + grad[i] * xhat[i];
            }
        }
    }
    if let Some(slot) = grad_slot(head, beta) {
        slot.iter_mut().zip(&sum_g).for_each(|(s, &v)| *s = *s + v);
    }
    if let Some(slot) = grad_slot(head, gamma) {
        slot.iter_mut().zip(&sum_gx).for_each(|(s, &v)| *s = *s + v);
    }
    if head[input.0].requires_grad {
        let gv = head[gamma.0].value.data.clone();
        let slot = grad_slot(head, input).expect("input requires grad");
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let scale = gv[ch] * inv_std[ch] / m;
                for i in base..base + plane {
                    let d = m * grad[i] - sum_g[ch] - xhat[i] * sum_gx[ch];
                    slot[i] = slot[i] + scale * d;
                }
            }
        }
    }
}
