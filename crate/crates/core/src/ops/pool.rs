use super::{
    expect_dims, route_backward, route_forward, wrong_cache, Axis, Backward, ConvParams, DiffOp,
    ForwardSecond, OpCache, Phase,
};
use crate::error::{shape_err, Result};
use crate::tensor::{Dims, Scalar, Tensor4};

/// Guard against division by zero in the RMS pooling derivative.
pub const RMS_EPSILON: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Mean,
    Rms,
}

/// Windowed pooling, channel count unchanged.
///
/// Padding cells are skipped by max pooling and count as zeros for the mean
/// and RMS variants, whose divisor is always the full window area.
#[derive(Clone, Debug, PartialEq)]
pub struct Pool {
    pub kind: PoolKind,
    pub channels: usize,
    pub x: Axis,
    pub y: Axis,
}

impl Pool {
    pub fn new(
        kind: PoolKind,
        input: Dims,
        window: (usize, usize),
        stride: usize,
        declared_out: Option<(usize, usize)>,
    ) -> Result<Self> {
        Ok(Pool {
            kind,
            channels: input.c,
            x: Axis::infer(input.w, window.0, stride, declared_out.map(|d| d.0))?,
            y: Axis::infer(input.h, window.1, stride, declared_out.map(|d| d.1))?,
        })
    }

    fn input_dims(&self, n: usize) -> Dims {
        Dims::new(n, self.x.input, self.y.input, self.channels)
    }

    fn output_dims(&self, n: usize) -> Dims {
        Dims::new(n, self.x.output, self.y.output, self.channels)
    }

    fn area(&self) -> usize {
        self.x.window * self.y.window
    }

    /// Calls `f(output index, input index)` for every window member, in
    /// increasing input index order within each window.
    fn for_each_tap(&self, n_img: usize, mut f: impl FnMut(usize, usize)) {
        let (id, od) = (self.input_dims(n_img), self.output_dims(n_img));
        for n in 0..n_img {
            for ox in 0..self.x.output {
                for oy in 0..self.y.output {
                    for u in 0..self.x.window {
                        let Some(ix) = self.x.source(ox, u) else { continue };
                        for v in 0..self.y.window {
                            let Some(iy) = self.y.source(oy, v) else { continue };
                            for c in 0..self.channels {
                                f(od.index(n, ox, oy, c), id.index(n, ix, iy, c));
                            }
                        }
                    }
                }
            }
        }
    }

    /// Window mean with divisor `w·h`.
    pub fn mean_pool<T: Scalar>(&self, input: &Tensor4<T>) -> Tensor4<T> {
        let n = input.dims().n;
        let mut out = Tensor4::zeros(self.output_dims(n));
        let (src, dst) = (input.data(), out.data_mut());
        self.for_each_tap(n, |o, i| dst[o] = dst[o] + src[i]);
        let k = T::of(self.area() as f64);
        for v in dst.iter_mut() {
            *v = *v / k;
        }
        out
    }

    fn max_pool<T: Scalar>(&self, input: &Tensor4<T>) -> (Tensor4<T>, Vec<usize>) {
        let n = input.dims().n;
        let od = self.output_dims(n);
        let src = input.data();
        let mut winners = vec![usize::MAX; od.len()];
        self.for_each_tap(n, |o, i| {
            // strict comparison keeps the lowest linear index on ties
            if winners[o] == usize::MAX || src[i] > src[winners[o]] {
                winners[o] = i;
            }
        });
        let out = Tensor4::from_vec(od, winners.iter().map(|&w| src[w]).collect())
            .expect("winner per output cell");
        (out, winners)
    }

    /// Local derivative `∂y_o/∂x_i = x_i / (w·h·max(y_o, ε))` applied as
    /// `f(o, i, coefficient)`.
    fn rms_taps<T: Scalar>(&self, input: &Tensor4<T>, output: &Tensor4<T>, mut f: impl FnMut(usize, usize, T)) {
        let (x, y) = (input.data(), output.data());
        let area = T::of(self.area() as f64);
        let eps = T::of(RMS_EPSILON);
        self.for_each_tap(input.dims().n, |o, i| f(o, i, x[i] / (area * y[o].max(eps))));
    }
}

impl<T: Scalar> DiffOp<T> for Pool {
    fn name(&self) -> String {
        let k = match self.kind {
            PoolKind::Max => "maxpool",
            PoolKind::Mean => "meanpool",
            PoolKind::Rms => "rmspool",
        };
        format!("{k}{}x{}/s{}", self.x.window, self.y.window, self.x.stride)
    }

    fn out_dims(&self, input: Dims) -> Result<Dims> {
        expect_dims("pool input", input, self.input_dims(input.n))?;
        Ok(self.output_dims(input.n))
    }

    fn forward(
        &self,
        input: &Tensor4<T>,
        _params: Option<&ConvParams<T>>,
        _phase: &mut Phase<'_>,
    ) -> Result<(Tensor4<T>, OpCache<T>)> {
        let id = input.dims();
        DiffOp::<T>::out_dims(self, id)?;
        Ok(match self.kind {
            PoolKind::Max => {
                let (out, winners) = self.max_pool(input);
                (out, OpCache::Winners { input: id, winners })
            }
            PoolKind::Mean => (self.mean_pool(input), OpCache::Mean { input: id }),
            PoolKind::Rms => {
                let sq = input.map(|v| v * v);
                let out = self.mean_pool(&sq).map(|v| v.sqrt());
                (out.clone(), OpCache::Rms { input: input.clone(), output: out })
            }
        })
    }

    fn backward(
        &self,
        upstream: &Tensor4<T>,
        cache: &OpCache<T>,
        _params: Option<&ConvParams<T>>,
    ) -> Result<Backward<T>> {
        let input = match (self.kind, cache) {
            (PoolKind::Max, OpCache::Winners { input, winners }) => {
                expect_dims("maxpool upstream", upstream.dims(), self.output_dims(input.n))?;
                route_backward(upstream, *input, winners)?
            }
            (PoolKind::Mean, OpCache::Mean { input }) => {
                expect_dims("meanpool upstream", upstream.dims(), self.output_dims(input.n))?;
                let mut gin = Tensor4::zeros(*input);
                let k = T::of(self.area() as f64);
                let (g, dst) = (upstream.data(), gin.data_mut());
                self.for_each_tap(input.n, |o, i| dst[i] = dst[i] + g[o] / k);
                gin
            }
            (PoolKind::Rms, OpCache::Rms { input, output }) => {
                expect_dims("rmspool upstream", upstream.dims(), output.dims())?;
                let mut gin = Tensor4::zeros(input.dims());
                let g = upstream.data();
                let dst = gin.data_mut();
                self.rms_taps(input, output, |o, i, k| dst[i] = dst[i] + g[o] * k);
                gin
            }
            _ => return Err(wrong_cache("pool backward")),
        };
        Ok(Backward { input, params: None })
    }

    fn forward_second(
        &self,
        signal: &Tensor4<T>,
        cache: &OpCache<T>,
        _upstream: &Tensor4<T>,
        _params: Option<&ConvParams<T>>,
    ) -> Result<ForwardSecond<T>> {
        let out = match (self.kind, cache) {
            (PoolKind::Max, OpCache::Winners { input, winners }) => {
                route_forward(signal, *input, self.output_dims(input.n), winners)?
            }
            (PoolKind::Mean, OpCache::Mean { input }) => {
                expect_dims("meanpool forward-second signal", signal.dims(), *input)?;
                self.mean_pool(signal)
            }
            (PoolKind::Rms, OpCache::Rms { input, output }) => {
                expect_dims("rmspool forward-second signal", signal.dims(), input.dims())?;
                let mut out = Tensor4::zeros(output.dims());
                let s = signal.data();
                let dst = out.data_mut();
                self.rms_taps(input, output, |o, i, k| dst[o] = dst[o] + k * s[i]);
                out
            }
            _ => return Err(wrong_cache("pool forward-second")),
        };
        if out.dims().is_empty() {
            return Err(shape_err!("empty pooling output"));
        }
        Ok(ForwardSecond { signal: out, params: None })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(vals: [f64; 4]) -> Tensor4<f64> {
        // [[1,3],[5,7]] laid out as x-major: (x0,y0)=1 (x0,y1)=3 (x1,y0)=5 (x1,y1)=7
        Tensor4::from_vec(Dims::new(1, 2, 2, 1), vals.to_vec()).unwrap()
    }

    fn pool(kind: PoolKind) -> Pool {
        Pool::new(kind, Dims::new(1, 2, 2, 1), (2, 2), 2, None).unwrap()
    }

    #[test]
    fn maxpool_three_passes_share_winner() {
        let p = pool(PoolKind::Max);
        let x = window([1.0, 3.0, 5.0, 7.0]);
        let (y, cache) = p.forward(&x, None, &mut Phase::Inference).unwrap();
        assert_eq!(y.data(), &[7.0]);
        let g = Tensor4::filled(y.dims(), 2.5);
        let b = p.backward(&g, &cache, None).unwrap().input;
        assert_eq!(b.data(), &[0.0, 0.0, 0.0, 2.5]);
        let s = window([10.0, 20.0, 30.0, 40.0]);
        let f = p.forward_second(&s, &cache, &g, None).unwrap().signal;
        assert_eq!(f.data(), &[40.0]);
    }

    #[test]
    fn maxpool_ties_pick_lowest_index() {
        let p = pool(PoolKind::Max);
        let x = window([2.0; 4]);
        let (_, cache) = p.forward(&x, None, &mut Phase::Inference).unwrap();
        let g = Tensor4::filled(Dims::new(1, 1, 1, 1), 1.0);
        assert_eq!(p.backward(&g, &cache, None).unwrap().input.data(), &[1.0, 0.0, 0.0, 0.0]);
        let s = window([9.0, 8.0, 7.0, 6.0]);
        assert_eq!(p.forward_second(&s, &cache, &g, None).unwrap().signal.data(), &[9.0]);
    }

    #[test]
    fn overlapping_max_windows_accumulate() {
        let p = Pool::new(PoolKind::Max, Dims::new(1, 3, 1, 1), (2, 1), 1, None).unwrap();
        let x = Tensor4::from_vec(Dims::new(1, 3, 1, 1), vec![0.0, 5.0, 1.0]).unwrap();
        let (y, cache) = p.forward(&x, None, &mut Phase::Inference).unwrap();
        assert_eq!(y.data(), &[5.0, 5.0]);
        let g = Tensor4::from_vec(y.dims(), vec![1.0, 2.0]).unwrap();
        assert_eq!(p.backward(&g, &cache, None).unwrap().input.data(), &[0.0, 3.0, 0.0]);
    }

    #[test]
    fn meanpool_values_and_self_derivative() {
        let p = pool(PoolKind::Mean);
        let x = window([1.0, 3.0, 5.0, 7.0]);
        let (y, cache) = p.forward(&x, None, &mut Phase::Inference).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = Tensor4::filled(y.dims(), 1.0);
        assert_eq!(p.backward(&g, &cache, None).unwrap().input.data(), &[0.25; 4]);
        let s = window([0.3, -1.7, 2.2, 0.9]);
        let f = p.forward_second(&s, &cache, &g, None).unwrap().signal;
        let (fwd, _) = p.forward(&s, None, &mut Phase::Inference).unwrap();
        assert_eq!(f, fwd);
    }

    #[test]
    fn rmspool_values() {
        let p = pool(PoolKind::Rms);
        let (y, _) = p.forward(&window([2.0; 4]), None, &mut Phase::Inference).unwrap();
        assert_eq!(y.data(), &[2.0]);
        let (y, _) = p.forward(&window([3.0, 4.0, 0.0, 0.0]), None, &mut Phase::Inference).unwrap();
        assert_eq!(y.data(), &[2.5]);
    }

    #[test]
    fn rmspool_zero_window_is_finite() {
        let p = pool(PoolKind::Rms);
        let (y, cache) = p.forward(&window([0.0; 4]), None, &mut Phase::Inference).unwrap();
        let g = Tensor4::filled(y.dims(), 1.0);
        let b = p.backward(&g, &cache, None).unwrap().input;
        assert!(b.data().iter().all(|v| v.is_finite() && *v == 0.0));
    }

    #[test]
    fn window_larger_than_input_is_rejected() {
        assert!(Pool::new(PoolKind::Max, Dims::new(1, 2, 2, 1), (3, 3), 1, None).is_err());
    }
}
