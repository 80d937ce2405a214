//! 2-D convolution lowered to im2col plus a batched matmul.
//!
//! candle's CPU convolution backward goes through a direct transposed
//! convolution which is an order of magnitude slower than the equivalent
//! matmul, so the unfold step is a custom op with a col2im backward.

use candle_core::{CpuStorage, CustomOp1, Layout, Module, Shape, Tensor, WithDType};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvCfg {
    pub padding: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl Default for ConvCfg {
    fn default() -> Self {
        Self {
            padding: 0,
            stride: 1,
            dilation: 1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    cfg: ConvCfg,
}

impl Geometry {
    fn out_dims(&self) -> (usize, usize) {
        let span = self.cfg.dilation * (self.kernel - 1) + 1;
        let f = |n: usize| (n + 2 * self.cfg.padding - span) / self.cfg.stride + 1;
        (f(self.height), f(self.width))
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Calls `f(input_start, column_start, count)` for every in-bounds run of
    /// taps; consecutive taps are `stride` apart in the input and adjacent in
    /// the column buffer.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = self.out_dims();
        let (k, s, d) = (self.kernel, self.cfg.stride, self.cfg.dilation);
        let pad = self.cfg.padding;
        let plane = self.height * self.width;
        let cols = oh * ow;
        // Output positions o with 0 <= o*s + off - pad < n.
        let valid = |off: usize, n: usize, out: usize| {
            let lo = pad.saturating_sub(off).div_ceil(s);
            let hi = if n + pad > off { (n + pad - off).div_ceil(s).min(out) } else { 0 };
            (lo, hi.max(lo))
        };
        for b in 0..self.batch {
            for c in 0..self.channels {
                let src = (b * self.channels + c) * plane;
                for ki in 0..k {
                    let (y0, y1) = valid(ki * d, self.height, oh);
                    for kj in 0..k {
                        let (x0, x1) = valid(kj * d, self.width, ow);
                        if x0 == x1 {
                            continue;
                        }
                        let row = (c * k + ki) * k + kj;
                        let dst = (b * self.rows() + row) * cols;
                        for oy in y0..y1 {
                            let y = oy * s + ki * d - pad;
                            let x = x0 * s + kj * d - pad;
                            f(src + y * self.width + x, dst + oy * ow + x0, x1 - x0);
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T: WithDType>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col expects a contiguous tensor"),
    }
}

struct Im2Col(Geometry);

impl Im2Col {
    fn run<T: WithDType>(&self, input: &[T]) -> Vec<T> {
        let g = &self.0;
        let (oh, ow) = g.out_dims();
        let mut out = vec![T::zero(); g.batch * g.rows() * oh * ow];
        let s = g.cfg.stride;
        g.for_each_run(|i, o, n| {
            if s == 1 {
                out[o..o + n].copy_from_slice(&input[i..i + n]);
            } else {
                for (t, v) in out[o..o + n].iter_mut().enumerate() {
                    *v = input[i + t * s];
                }
            }
        });
        out
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let (oh, ow) = g.out_dims();
        let shape = Shape::from((g.batch, g.rows(), oh * ow));
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(self.run(contiguous(d, layout)?)),
            CpuStorage::F64(d) => CpuStorage::F64(self.run(contiguous(d, layout)?)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let grad = grad.contiguous()?;
        Ok(Some(grad.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

struct Col2Im(Geometry);

impl Col2Im {
    fn run<T: WithDType>(&self, cols: &[T]) -> Vec<T> {
        let g = &self.0;
        let mut out = vec![T::zero(); g.batch * g.channels * g.height * g.width];
        let s = g.cfg.stride;
        g.for_each_run(|i, o, n| {
            for (t, &v) in cols[o..o + n].iter().enumerate() {
                out[i + t * s] += v;
            }
        });
        out
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.batch, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(self.run(contiguous(d, layout)?)),
            CpuStorage::F64(d) => CpuStorage::F64(self.run(contiguous(d, layout)?)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, shape))
    }
}

/// Convolution with a `[out, in, k, k]` weight and optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    cfg: ConvCfg,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Option<Tensor>, cfg: ConvCfg) -> Self {
        Self { weight, bias, cfg }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn config(&self) -> &ConvCfg {
        &self.cfg
    }

    /// Same layer with gradients cut off from the parameters.
    pub fn detached(&self) -> Self {
        Self {
            weight: self.weight.detach(),
            bias: self.bias.as_ref().map(Tensor::detach),
            cfg: self.cfg,
        }
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (batch, channels, height, width) = x.dims4()?;
        let (cout, cin, k, k2) = self.weight.dims4()?;
        if cin != channels || k != k2 {
            candle_core::bail!(
                "conv weight {:?} does not fit input {:?}",
                self.weight.dims(),
                x.dims()
            );
        }
        let g = Geometry {
            batch,
            channels,
            height,
            width,
            kernel: k,
            cfg: self.cfg,
        };
        let span = self.cfg.dilation * (k - 1) + 1;
        if height + 2 * self.cfg.padding < span || width + 2 * self.cfg.padding < span {
            candle_core::bail!("input {height}x{width} smaller than kernel span {span}");
        }
        let (oh, ow) = g.out_dims();
        let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
        let w = self.weight.reshape((cout, g.rows()))?;
        let y = w.broadcast_matmul(&cols)?.reshape((batch, cout, oh, ow))?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, cout, 1, 1))?),
            None => Ok(y),
        }
    }
}
