use super::{grad_slot, ConvGeom, Graph, Node, Op, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Zero padding applied on every border of a convolution input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `k / 2`; with stride 1 the output keeps the input's spatial size.
    Same,
    Valid,
    Zeros(usize),
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.hout * g.wout;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wout..(oy + 1) * g.wout];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.hout * g.wout;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.wout..(oy + 1) * g.wout];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    /// 2-D cross-correlation of `[N, Cin, H, W]` with `[Cout, Cin, k, k]`, plus bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(kernel).to_vec();
        let (&[n, cin, h, w], &[cout, kcin, k, k2]) = (&xs[..], &ws[..]) else {
            return Err(Error::shape("conv2d", &xs, &ws));
        };
        if cin != kcin || k != k2 {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let pad = match padding {
            Padding::Same => {
                if k % 2 == 0 || stride != 1 {
                    return Err(Error::invalid(
                        "conv2d",
                        "same padding needs an odd kernel and stride 1",
                    ));
                }
                k / 2
            }
            Padding::Valid => 0,
            Padding::Zeros(p) => p,
        };
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[cout]));
            }
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            hout: (h + 2 * pad - k) / stride + 1,
            wout: (w + 2 * pad - k) / stride + 1,
        };
        let kk = cin * k * k;
        let p = geom.hout * geom.wout;
        let mut cols = vec![T::zero(); n * kk * p];
        let mut out = vec![T::zero(); n * cout * p];
        {
            let x = &self.value(input).data;
            let wt = &self.value(kernel).data;
            for b in 0..n {
                let col = &mut cols[b * kk * p..(b + 1) * kk * p];
                im2col(&x[b * cin * h * w..(b + 1) * cin * h * w], &geom, col);
                let dst = &mut out[b * cout * p..(b + 1) * cout * p];
                T::gemm(cout, kk, p, wt, (kk as isize, 1), col, (p as isize, 1), T::zero(), dst);
            }
            if let Some(b) = bias {
                let bv = &self.value(b).data;
                for img in out.chunks_mut(cout * p) {
                    for (co, plane) in img.chunks_mut(p).enumerate() {
                        plane.iter_mut().for_each(|v| *v = *v + bv[co]);
                    }
                }
            }
        }
        let value = Tensor {
            shape: vec![n, cout, geom.hout, geom.wout],
            data: out,
        };
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        let op = Op::Conv2d {
            input,
            kernel,
            bias,
            cols,
            geom,
        };
        Ok(self.push(value, op, &inputs))
    }

    /// 2x2 max pooling with stride 2. Ties route to the lowest index in the window.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(Error::invalid("max_pool2", format!("expected [N, C, H, W], got {shape:?}")));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(
                "max_pool2",
                format!("spatial dims must be even, got {h}x{w}"),
            ));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = &self.value(input).data;
        let mut data = Vec::with_capacity(n * c * ho * wo);
        let mut source = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let top = base + 2 * oy * w + 2 * ox;
                    let mut best = top;
                    for cand in [top + 1, top + w, top + w + 1] {
                        if x[cand] > x[best] {
                            best = cand;
                        }
                    }
                    data.push(x[best]);
                    source.push(best);
                }
            }
        }
        let value = Tensor {
            shape: vec![n, c, ho, wo],
            data,
        };
        Ok(self.push(value, Op::Select { input, source }, &[input]))
    }

    /// Nearest-neighbour upsampling by a factor of two.
    pub fn upsample_nearest2(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(Error::invalid(
                "upsample_nearest2",
                format!("expected [N, C, H, W], got {shape:?}"),
            ));
        };
        let x = &self.value(input).data;
        let mut data = Vec::with_capacity(n * c * h * w * 4);
        for plane in x.chunks(h * w) {
            for row in plane.chunks(w) {
                for _ in 0..2 {
                    for &v in row {
                        data.push(v);
                        data.push(v);
                    }
                }
            }
        }
        let value = Tensor {
            shape: vec![n, c, 2 * h, 2 * w],
            data,
        };
        Ok(self.push(value, Op::Upsample2(input), &[input]))
    }
}

pub(super) fn backward_conv2d<T: Real>(
    head: &mut [Node<T>],
    input: Var,
    kernel: Var,
    bias: Option<Var>,
    cols: &[T],
    g: &ConvGeom,
    grad: &[T],
) {
    let kk = g.cin * g.k * g.k;
    let p = g.hout * g.wout;
    if let Some(b) = bias {
        if let Some(slot) = grad_slot(head, b) {
            for img in grad.chunks(g.cout * p) {
                for (co, plane) in img.chunks(p).enumerate() {
                    slot[co] = slot[co] + plane.iter().copied().sum();
                }
            }
        }
    }
    if let Some(slot) = grad_slot(head, kernel) {
        for b in 0..g.n {
            let dy = &grad[b * g.cout * p..(b + 1) * g.cout * p];
            let col = &cols[b * kk * p..(b + 1) * kk * p];
            // dW[cout, kk] += dY[cout, p] * cols^T[p, kk]
            T::gemm(g.cout, p, kk, dy, (p as isize, 1), col, (1, p as isize), T::one(), slot);
        }
    }
    if head[input.0].requires_grad {
        let wt = std::mem::take(&mut head[kernel.0].value.data);
        let mut dcols = vec![T::zero(); kk * p];
        let slot = grad_slot(head, input).expect("input requires grad");
        for b in 0..g.n {
            let dy = &grad[b * g.cout * p..(b + 1) * g.cout * p];
            // dcols[kk, p] = W^T[kk, cout] * dY[cout, p]
            T::gemm(kk, g.cout, p, &wt, (1, kk as isize), dy, (p as isize, 1), T::zero(), &mut dcols);
            col2im(&dcols, g, &mut slot[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w]);
        }
        head[kernel.0].value.data = wt;
    }
}

pub(super) fn backward_upsample2<T: Real>(head: &mut [Node<T>], a: Var, out: &Tensor<T>, grad: &[T]) {
    let w2 = out.shape[3];
    let w = w2 / 2;
    let Some(slot) = grad_slot(head, a) else {
        return;
    };
    for (i, &g) in grad.iter().enumerate() {
        let row = i / w2;
        let col = i % w2;
        let plane_row = row / 2;
        let src = plane_row * w + col / 2;
        slot[src] = slot[src] + g;
    }
}
