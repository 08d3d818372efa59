use std::sync::Arc;

use crate::autodiff::{BackwardFn, OpKind, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, MatView, NdArray};

use super::{Ctx, Init, ParamId, ParamKind, ParamRegistry};

/// `floor((input + 2*pad - kernel) / stride) + 1`, rejecting empty outputs.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return Err(Error::shape(
            "conv2d",
            format!("degenerate output: input {input}, kernel {kernel}, stride {stride}, pad {pad}"),
        ));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_len(&self) -> usize {
        self.ho * self.wo
    }

    /// Source pixel of (kernel offset, output position), or `None` inside padding.
    #[inline]
    fn source(&self, ki: usize, kj: usize, oi: usize, oj: usize) -> Option<(usize, usize)> {
        let i = (oi * self.stride + ki).checked_sub(self.pad)?;
        let j = (oj * self.stride + kj).checked_sub(self.pad)?;
        (i < self.h && j < self.w).then_some((i, j))
    }
}

fn im2col<T: Element>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let l = g.col_len();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * l;
                for oi in 0..g.ho {
                    for oj in 0..g.wo {
                        cols[row + oi * g.wo + oj] = match g.source(ki, kj, oi, oj) {
                            Some((i, j)) => x[(c * g.h + i) * g.w + j],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let l = g.col_len();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * l;
                for oi in 0..g.ho {
                    for oj in 0..g.wo {
                        if let Some((i, j)) = g.source(ki, kj, oi, oj) {
                            x[(c * g.h + i) * g.w + j] += cols[row + oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of `x` (N, Cin, H, W) with `weight` (Cout, Cin, kH, kW).
pub fn conv2d<T: Element>(
    x: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    stride: usize,
    pad: usize,
) -> Result<Var<T>> {
    let mut inputs = vec![x, weight];
    if let Some(b) = bias {
        inputs.push(b);
    }
    x.tape().record(OpKind::Conv2d, &inputs, |xs, needs| {
        let (x, w) = (Arc::clone(&xs[0]), Arc::clone(&xs[1]));
        let b = xs.get(2).cloned();
        if x.ndim() != 4 || w.ndim() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expects 4-D input and weight, got {:?} and {:?}", x.shape(), w.shape()),
            ));
        }
        let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, wcin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if cin != wcin {
            return Err(Error::shape(
                "conv2d",
                format!("channel mismatch: input has {cin}, weight expects {wcin}"),
            ));
        }
        if let Some(b) = &b {
            if b.shape() != [cout] {
                return Err(Error::shape("conv2d", format!("bias {:?}", b.shape())));
            }
        }
        let g = Geometry {
            c: cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: conv_out_size(h, kh, stride, pad)?,
            wo: conv_out_size(wd, kw, stride, pad)?,
        };
        let (k, l) = (g.col_rows(), g.col_len());
        let in_len = cin * h * wd;
        let wv = MatView::row_major(cout, k);
        let mut out = vec![T::zero(); n * cout * l];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * l] };
        for s in 0..n {
            let xs_n = &x.data()[s * in_len..(s + 1) * in_len];
            let src: &[T] = if g.is_pointwise() {
                xs_n
            } else {
                im2col(xs_n, &g, &mut cols);
                &cols
            };
            let dst = &mut out[s * cout * l..(s + 1) * cout * l];
            gemm(T::one(), w.data(), wv, src, MatView::row_major(k, l), T::zero(), dst, MatView::row_major(cout, l));
            if let Some(b) = &b {
                for (row, &bb) in dst.chunks_mut(l).zip(b.data()) {
                    row.iter_mut().for_each(|v| *v += bb);
                }
            }
        }
        let out = NdArray::new(&[n, cout, g.ho, g.wo], out)?;
        let has_bias = b.is_some();
        let bw: Option<BackwardFn<T>> = needs.then(|| {
            Box::new(move |grad: &NdArray<T>| {
                let mut gw = vec![T::zero(); cout * k];
                let mut gx = vec![T::zero(); n * in_len];
                let mut gcols = vec![T::zero(); k * l];
                let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * l] };
                for s in 0..n {
                    let gs = &grad.data()[s * cout * l..(s + 1) * cout * l];
                    let xs_n = &x.data()[s * in_len..(s + 1) * in_len];
                    let src: &[T] = if g.is_pointwise() {
                        xs_n
                    } else {
                        im2col(xs_n, &g, &mut cols);
                        &cols
                    };
                    // dW += dY * cols^T
                    gemm(
                        T::one(),
                        gs,
                        MatView::row_major(cout, l),
                        src,
                        MatView::row_major(k, l).t(),
                        T::one(),
                        &mut gw,
                        MatView::row_major(cout, k),
                    );
                    let gx_n = &mut gx[s * in_len..(s + 1) * in_len];
                    if g.is_pointwise() {
                        gemm(T::one(), w.data(), wv.t(), gs, MatView::row_major(cout, l), T::zero(), gx_n, MatView::row_major(k, l));
                    } else {
                        gemm(T::one(), w.data(), wv.t(), gs, MatView::row_major(cout, l), T::zero(), &mut gcols, MatView::row_major(k, l));
                        col2im(&gcols, &g, gx_n);
                    }
                }
                let mut grads = vec![
                    Some(NdArray::new(x.shape(), gx)?),
                    Some(NdArray::new(w.shape(), gw)?),
                ];
                if has_bias {
                    let mut gb = vec![T::zero(); cout];
                    for s in 0..n {
                        for (o, acc) in gb.iter_mut().enumerate() {
                            let base = (s * cout + o) * l;
                            *acc += grad.data()[base..base + l].iter().copied().sum::<T>();
                        }
                    }
                    grads.push(Some(NdArray::new(&[cout], gb)?));
                }
                Ok(grads)
            }) as BackwardFn<T>
        });
        Ok((out, bw))
    })
}

/// Max pooling over (N, C, H, W) with implicit negative-infinity padding.
pub fn max_pool2d<T: Element>(x: &Var<T>, kernel: usize, stride: usize, pad: usize) -> Result<Var<T>> {
    x.tape().record(OpKind::MaxPool2d, &[x], |xs, needs| {
        let x = &xs[0];
        if x.ndim() != 4 {
            return Err(Error::shape("max_pool2d", format!("expects 4-D input, got {:?}", x.shape())));
        }
        let shape = x.shape().to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let g = Geometry {
            c: 1,
            h,
            w,
            kh: kernel,
            kw: kernel,
            stride,
            pad,
            ho: conv_out_size(h, kernel, stride, pad)?,
            wo: conv_out_size(w, kernel, stride, pad)?,
        };
        let mut out = Vec::with_capacity(n * c * g.ho * g.wo);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..n * c {
            let base = plane * h * w;
            for oi in 0..g.ho {
                for oj in 0..g.wo {
                    let mut best = T::neg_infinity();
                    let mut best_at = usize::MAX;
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            if let Some((i, j)) = g.source(ki, kj, oi, oj) {
                                let v = x.data()[base + i * w + j];
                                if best_at == usize::MAX || v > best {
                                    best = v;
                                    best_at = base + i * w + j;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_at);
                }
            }
        }
        let out = NdArray::new(&[n, c, g.ho, g.wo], out)?;
        let bw: Option<BackwardFn<T>> = needs.then(|| {
            Box::new(move |grad: &NdArray<T>| {
                let mut gx = NdArray::zeros(&shape);
                let d = gx.data_mut();
                for (&src, &gv) in argmax.iter().zip(grad.data()) {
                    d[src] += gv;
                }
                Ok(vec![Some(gx)])
            }) as BackwardFn<T>
        });
        Ok((out, bw))
    })
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Registers `<path>.weight` (and `<path>.bias`). Weights default to Kaiming fan-out.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &mut ParamRegistry,
        path: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let weight = reg.register(
            format!("{path}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            ParamKind::Weight,
            Init::KaimingFanOut {
                fan_out: out_ch * kernel * kernel,
            },
        );
        let bias = bias.then(|| reg.register(format!("{path}.bias"), &[out_ch], ParamKind::Bias, Init::Zeros));
        Conv2d {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|id| ctx.param(id));
        conv2d(x, &w, b.as_ref(), self.stride, self.pad)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            conv_out_size(h, self.kernel, self.stride, self.pad)?,
            conv_out_size(w, self.kernel, self.stride, self.pad)?,
        ))
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + self.bias.map_or(0, |_| self.out_ch)
    }

    /// Multiply-accumulates for one sample at the given output size.
    pub fn macs(&self, h_out: usize, w_out: usize) -> u64 {
        (self.out_ch * self.in_ch * self.kernel * self.kernel * h_out * w_out) as u64
    }
}
