use super::{
    expect_dims, wrong_cache, Axis, Backward, DiffOp, ForwardSecond, OpCache, ParamGrads, Phase,
};
use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{Dims, Scalar, Tensor4};

/// One bias per output channel (tied) or per output cell and channel (untied).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BiasMode {
    Tied,
    Untied,
}

/// Learnable tensors of a conv or dense layer.
///
/// `weights` has dims `window_w × window_h × in_channels × filters`; `bias` is
/// `1 × 1 × 1 × filters` when tied and `1 × out_w × out_h × filters` when untied.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weights: Tensor4<T>,
    pub bias: Tensor4<T>,
}

/// Cross-correlation layer (no activation).
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub in_channels: usize,
    pub filters: usize,
    pub x: Axis,
    pub y: Axis,
    pub bias: BiasMode,
}

impl Conv {
    /// `input` is the per-image input extent (its `n` is ignored).
    pub fn new(
        input: Dims,
        filters: usize,
        window: (usize, usize),
        stride: usize,
        declared_out: Option<(usize, usize)>,
        bias: BiasMode,
    ) -> Result<Self> {
        if filters == 0 {
            return Err(arg_err!("conv needs at least one filter"));
        }
        Ok(Conv {
            in_channels: input.c,
            filters,
            x: Axis::infer(input.w, window.0, stride, declared_out.map(|d| d.0))?,
            y: Axis::infer(input.h, window.1, stride, declared_out.map(|d| d.1))?,
            bias,
        })
    }

    pub fn weight_dims(&self) -> Dims {
        Dims::new(self.x.window, self.y.window, self.in_channels, self.filters)
    }

    pub fn bias_dims(&self) -> Dims {
        match self.bias {
            BiasMode::Tied => Dims::new(1, 1, 1, self.filters),
            BiasMode::Untied => Dims::new(1, self.x.output, self.y.output, self.filters),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.x.window * self.y.window * self.in_channels
    }

    fn input_dims(&self, n: usize) -> Dims {
        Dims::new(n, self.x.input, self.y.input, self.in_channels)
    }

    fn output_dims(&self, n: usize) -> Dims {
        Dims::new(n, self.x.output, self.y.output, self.filters)
    }

    fn check_params<T: Scalar>(&self, params: Option<&ConvParams<T>>) -> Result<()> {
        let p = params.ok_or_else(|| arg_err!("conv layer called without parameters"))?;
        expect_dims("conv weights", p.weights.dims(), self.weight_dims())?;
        expect_dims("conv bias", p.bias.dims(), self.bias_dims())
    }

    /// `out[n,x,y,c] = Σ_{u,v,d} Ω[u,v,d,c]·input[n, s·x+u−pad, s·y+v−pad, d] (+ b)`.
    fn correlate<T: Scalar>(&self, input: &Tensor4<T>, weights: &[T], bias: Option<&[T]>) -> Tensor4<T> {
        let n_img = input.dims().n;
        let idims = input.dims();
        let odims = self.output_dims(n_img);
        let (cin, cout) = (self.in_channels, self.filters);
        let kh = self.y.window;
        let mut out = Tensor4::zeros(odims);
        let src = input.data();
        let dst = out.data_mut();
        for n in 0..n_img {
            for ox in 0..self.x.output {
                for oy in 0..self.y.output {
                    let o0 = odims.index(n, ox, oy, 0);
                    let acc = &mut dst[o0..o0 + cout];
                    if let Some(b) = bias {
                        match self.bias {
                            BiasMode::Tied => acc.copy_from_slice(b),
                            BiasMode::Untied => {
                                let b0 = (ox * self.y.output + oy) * cout;
                                acc.copy_from_slice(&b[b0..b0 + cout]);
                            }
                        }
                    }
                    for u in 0..self.x.window {
                        let Some(ix) = self.x.source(ox, u) else { continue };
                        for v in 0..kh {
                            let Some(iy) = self.y.source(oy, v) else { continue };
                            let i0 = idims.index(n, ix, iy, 0);
                            let px = &src[i0..i0 + cin];
                            let w0 = (u * kh + v) * cin * cout;
                            for (d, &a) in px.iter().enumerate() {
                                let wrow = &weights[w0 + d * cout..w0 + (d + 1) * cout];
                                for (o, &w) in acc.iter_mut().zip(wrow) {
                                    *o = *o + a * w;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Shared kernel of the backward weight gradient and the forward-second
    /// weight gradient: `G[u,v,d,c] = Σ_{n,x,y} top[n,x,y,c]·data[n, s·x+u−pad, s·y+v−pad, d]`.
    /// When `input_grad` is set, also returns the transposed correlation of
    /// `weights` with `top` (the true convolution of the input gradient).
    fn weight_gradient<T: Scalar>(
        &self,
        top: &Tensor4<T>,
        data: &Tensor4<T>,
        weights: Option<&[T]>,
    ) -> (Tensor4<T>, Option<Tensor4<T>>) {
        let n_img = data.dims().n;
        let idims = data.dims();
        let odims = top.dims();
        let (cin, cout) = (self.in_channels, self.filters);
        let kh = self.y.window;
        let mut gw = Tensor4::zeros(self.weight_dims());
        let mut gin = weights.map(|_| Tensor4::zeros(idims));
        let g = top.data();
        let src = data.data();
        let gwd = gw.data_mut();
        for n in 0..n_img {
            for ox in 0..self.x.output {
                for oy in 0..self.y.output {
                    let o0 = odims.index(n, ox, oy, 0);
                    let gt = &g[o0..o0 + cout];
                    for u in 0..self.x.window {
                        let Some(ix) = self.x.source(ox, u) else { continue };
                        for v in 0..kh {
                            let Some(iy) = self.y.source(oy, v) else { continue };
                            let i0 = idims.index(n, ix, iy, 0);
                            let w0 = (u * kh + v) * cin * cout;
                            for d in 0..cin {
                                let a = src[i0 + d];
                                let row = &mut gwd[w0 + d * cout..w0 + (d + 1) * cout];
                                for (r, &t) in row.iter_mut().zip(gt) {
                                    *r = *r + a * t;
                                }
                            }
                            if let (Some(w), Some(gi)) = (weights, gin.as_mut()) {
                                let gid = gi.data_mut();
                                for d in 0..cin {
                                    let wrow = &w[w0 + d * cout..w0 + (d + 1) * cout];
                                    let s: T = wrow.iter().zip(gt).map(|(&a, &b)| a * b).sum();
                                    gid[i0 + d] = gid[i0 + d] + s;
                                }
                            }
                        }
                    }
                }
            }
        }
        (gw, gin)
    }

    fn bias_gradient<T: Scalar>(&self, top: &Tensor4<T>) -> Tensor4<T> {
        let mut gb = Tensor4::zeros(self.bias_dims());
        let cout = self.filters;
        let per = self.x.output * self.y.output * cout;
        let b = gb.data_mut();
        for img in top.data().chunks_exact(per) {
            match self.bias {
                BiasMode::Untied => {
                    for (o, &t) in b.iter_mut().zip(img) {
                        *o = *o + t;
                    }
                }
                BiasMode::Tied => {
                    for cell in img.chunks_exact(cout) {
                        for (o, &t) in b.iter_mut().zip(cell) {
                            *o = *o + t;
                        }
                    }
                }
            }
        }
        gb
    }
}

impl<T: Scalar> DiffOp<T> for Conv {
    fn name(&self) -> String {
        format!(
            "conv{}x{}/s{}x{}{}",
            self.x.window,
            self.y.window,
            self.x.stride,
            self.filters,
            if self.bias == BiasMode::Untied { "u" } else { "" }
        )
    }

    fn out_dims(&self, input: Dims) -> Result<Dims> {
        expect_dims("conv input", input, self.input_dims(input.n))?;
        Ok(self.output_dims(input.n))
    }

    fn forward(
        &self,
        input: &Tensor4<T>,
        params: Option<&ConvParams<T>>,
        _phase: &mut Phase<'_>,
    ) -> Result<(Tensor4<T>, OpCache<T>)> {
        DiffOp::<T>::out_dims(self, input.dims())?;
        self.check_params(params)?;
        let p = params.expect("checked");
        let out = self.correlate(input, p.weights.data(), Some(p.bias.data()));
        Ok((out, OpCache::Input(input.clone())))
    }

    fn backward(
        &self,
        upstream: &Tensor4<T>,
        cache: &OpCache<T>,
        params: Option<&ConvParams<T>>,
    ) -> Result<Backward<T>> {
        let OpCache::Input(input) = cache else { return Err(wrong_cache("conv backward")) };
        self.check_params(params)?;
        let p = params.expect("checked");
        expect_dims("conv upstream", upstream.dims(), self.output_dims(input.dims().n))?;
        let (gw, gin) = self.weight_gradient(upstream, input, Some(p.weights.data()));
        Ok(Backward {
            input: gin.expect("requested"),
            params: Some(ParamGrads { weights: gw, bias: self.bias_gradient(upstream) }),
        })
    }

    fn forward_second(
        &self,
        signal: &Tensor4<T>,
        cache: &OpCache<T>,
        upstream: &Tensor4<T>,
        params: Option<&ConvParams<T>>,
    ) -> Result<ForwardSecond<T>> {
        let OpCache::Input(input) = cache else {
            return Err(wrong_cache("conv forward-second"));
        };
        self.check_params(params)?;
        let p = params.expect("checked");
        expect_dims("conv forward-second signal", signal.dims(), input.dims())?;
        expect_dims("conv cached upstream", upstream.dims(), self.output_dims(input.dims().n))?;
        let out = self.correlate(signal, p.weights.data(), None);
        let (gw, _) = self.weight_gradient(upstream, signal, None);
        Ok(ForwardSecond {
            signal: out,
            params: Some(ParamGrads { weights: gw, bias: Tensor4::zeros(self.bias_dims()) }),
        })
    }
}

/// Fully-connected layer: a cross-correlation whose window is the whole input map.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub conv: Conv,
}

impl Dense {
    pub fn new(input: Dims, units: usize) -> Result<Self> {
        if units == 0 {
            return Err(shape_err!("dense layer needs at least one unit"));
        }
        Ok(Dense { conv: Conv::new(input, units, (input.w, input.h), 1, None, BiasMode::Tied)? })
    }

    pub fn units(&self) -> usize {
        self.conv.filters
    }
}

impl<T: Scalar> DiffOp<T> for Dense {
    fn name(&self) -> String {
        format!("dense{}", self.conv.filters)
    }

    fn out_dims(&self, input: Dims) -> Result<Dims> {
        DiffOp::<T>::out_dims(&self.conv, input)
    }

    fn forward(
        &self,
        input: &Tensor4<T>,
        params: Option<&ConvParams<T>>,
        phase: &mut Phase<'_>,
    ) -> Result<(Tensor4<T>, OpCache<T>)> {
        self.conv.forward(input, params, phase)
    }

    fn backward(
        &self,
        upstream: &Tensor4<T>,
        cache: &OpCache<T>,
        params: Option<&ConvParams<T>>,
    ) -> Result<Backward<T>> {
        self.conv.backward(upstream, cache, params)
    }

    fn forward_second(
        &self,
        signal: &Tensor4<T>,
        cache: &OpCache<T>,
        upstream: &Tensor4<T>,
        params: Option<&ConvParams<T>>,
    ) -> Result<ForwardSecond<T>> {
        self.conv.forward_second(signal, cache, upstream, params)
    }
}
