//! Network operators.
//!
//! Each operator provides three functions sharing one [`OpCache`]:
//!
//! * `forward`: the data pass, recording whatever the derivative passes need;
//! * `backward`: the first-order derivative, mapping `∂L/∂out` to `∂L/∂in`
//!   (plus parameter gradients for conv/dense);
//! * `forward_second`: the linearised operator applied to a signal living in
//!   the input space, mapping `∂L₀/∂in` to `∂L₀/∂out` (plus `∂L₀/∂Ω`).
//!
//! Every branch decision (rectifier side, pooling winner, dropped channel) is
//! taken once, in `forward`, from the operator's input, and both derivative
//! passes read it back from the cache. As a consequence `forward_second` is the
//! exact transpose of the input part of `backward`.

mod activation;
mod conv;
mod pool;
mod thinning;

pub use activation::LeakyRelu;
pub use conv::{BiasMode, Conv, ConvParams, Dense};
pub use pool::{Pool, PoolKind};
pub use thinning::{Dropout, Maxout};

use crate::error::{shape_err, state_err, Result};
use crate::rng::Rng;
use crate::tensor::{Dims, Scalar, Tensor4};

/// Whether a forward pass is part of training (dropout active) or inference.
pub enum Phase<'a> {
    Train(&'a mut Rng),
    Inference,
}

impl Phase<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Phase::Train(_))
    }
}

/// State recorded by `forward` and consumed by both derivative passes.
#[derive(Clone, Debug)]
pub enum OpCache<T> {
    /// Forward input of a cross-correlation.
    Input(Tensor4<T>),
    /// Leaky rectifier: `true` where the forward input was negative.
    Negative(Vec<bool>),
    /// Max-based operators: linear input index of the winner of every output cell.
    Winners { input: Dims, winners: Vec<usize> },
    /// Mean pooling only needs the input extent.
    Mean { input: Dims },
    /// RMS pooling: forward input and output.
    Rms { input: Tensor4<T>, output: Tensor4<T> },
    /// Dropout: multiplier per `(image, channel)`, zero for dropped channels.
    Thinning { scale: Vec<T> },
}

impl<T: Scalar> OpCache<T> {
    /// Whether two caches record the same branch decisions (rectifier sides,
    /// pooling winners, dropout mask).
    pub fn same_branches(&self, other: &Self) -> bool {
        match (self, other) {
            (OpCache::Negative(a), OpCache::Negative(b)) => a == b,
            (OpCache::Winners { winners: a, .. }, OpCache::Winners { winners: b, .. }) => a == b,
            (OpCache::Thinning { scale: a }, OpCache::Thinning { scale: b }) => a == b,
            (OpCache::Input(_), OpCache::Input(_))
            | (OpCache::Mean { .. }, OpCache::Mean { .. })
            | (OpCache::Rms { .. }, OpCache::Rms { .. }) => true,
            _ => false,
        }
    }
}

/// Gradients of a parameterised operator.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T> {
    pub weights: Tensor4<T>,
    pub bias: Tensor4<T>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(p: &ConvParams<T>) -> Self {
        ParamGrads {
            weights: Tensor4::zeros(p.weights.dims()),
            bias: Tensor4::zeros(p.bias.dims()),
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.weights.add_assign(&other.weights)?;
        self.bias.add_assign(&other.bias)
    }

    pub fn scale(&self, k: T) -> Self {
        ParamGrads { weights: self.weights.scale(k), bias: self.bias.scale(k) }
    }
}

/// Output of a backward call.
#[derive(Clone, Debug)]
pub struct Backward<T> {
    pub input: Tensor4<T>,
    pub params: Option<ParamGrads<T>>,
}

/// Output of a forward-second call.
#[derive(Clone, Debug)]
pub struct ForwardSecond<T> {
    pub signal: Tensor4<T>,
    pub params: Option<ParamGrads<T>>,
}

/// An operator with its forward function and both derivative functions.
pub trait DiffOp<T: Scalar> {
    fn name(&self) -> String;

    /// Output extent for a given input extent, or a shape error.
    fn out_dims(&self, input: Dims) -> Result<Dims>;

    fn forward(
        &self,
        input: &Tensor4<T>,
        params: Option<&ConvParams<T>>,
        phase: &mut Phase<'_>,
    ) -> Result<(Tensor4<T>, OpCache<T>)>;

    fn backward(
        &self,
        upstream: &Tensor4<T>,
        cache: &OpCache<T>,
        params: Option<&ConvParams<T>>,
    ) -> Result<Backward<T>>;

    /// `upstream` is `∂L_L/∂out` recorded by the backward pass of the same step.
    fn forward_second(
        &self,
        signal: &Tensor4<T>,
        cache: &OpCache<T>,
        upstream: &Tensor4<T>,
        params: Option<&ConvParams<T>>,
    ) -> Result<ForwardSecond<T>>;
}

/// Sliding-window geometry along one spatial axis.
///
/// Window `o` covers input positions `o·stride + k − pad` for `k < window`;
/// positions outside `[0, input)` are padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Axis {
    pub input: usize,
    pub window: usize,
    pub stride: usize,
    pub pad: usize,
    pub output: usize,
}

impl Axis {
    /// Resolve the padding for an axis.
    ///
    /// Without a declared output the window slides over the unpadded input,
    /// giving `ceil((input − window + 1) / stride)` positions. With a declared
    /// output the total padding `(output − 1)·stride + window − input` is split
    /// evenly, the odd element going to the far (bottom/right) side; a
    /// negative total means trailing input rows that no window reaches, which
    /// is accepted as long as it is shorter than one stride.
    pub fn infer(input: usize, window: usize, stride: usize, declared: Option<usize>) -> Result<Axis> {
        if window == 0 || stride == 0 || input == 0 {
            return Err(shape_err!("window {window}, stride {stride}, input {input} must be >= 1"));
        }
        let output = match declared {
            Some(o) => o,
            None => {
                if input < window {
                    return Err(shape_err!("window {window} exceeds input extent {input}"));
                }
                (input - window) / stride + 1
            }
        };
        if output == 0 {
            return Err(shape_err!("declared output extent is zero"));
        }
        let total = ((output - 1) * stride + window) as isize - input as isize;
        if total <= -(stride as isize) {
            return Err(shape_err!(
                "declared output {output} too small for input {input} (window {window}, stride {stride})"
            ));
        }
        let pad = total.max(0) as usize / 2;
        let after = total - pad as isize;
        if pad >= window || after >= window as isize {
            return Err(shape_err!(
                "declared output {output} needs padding {total} on input {input}, beyond window {window}"
            ));
        }
        Ok(Axis { input, window, stride, pad, output })
    }

    /// Input position read by tap `k` of window `o`, if not padding.
    #[inline(always)]
    pub fn source(&self, o: usize, k: usize) -> Option<usize> {
        let p = (o * self.stride + k).wrapping_sub(self.pad);
        (p < self.input).then_some(p)
    }
}

/// Any supported layer.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv),
    Dense(Dense),
    LeakyRelu(LeakyRelu),
    Pool(Pool),
    Dropout(Dropout),
    Maxout(Maxout),
}

impl Layer {
    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Conv(_) | Layer::Dense(_))
    }

    fn op<T: Scalar>(&self) -> &dyn DiffOp<T> {
        match self {
            Layer::Conv(l) => l,
            Layer::Dense(l) => l,
            Layer::LeakyRelu(l) => l,
            Layer::Pool(l) => l,
            Layer::Dropout(l) => l,
            Layer::Maxout(l) => l,
        }
    }
}

impl<T: Scalar> DiffOp<T> for Layer {
    fn name(&self) -> String {
        DiffOp::<T>::name(self.op::<T>())
    }

    fn out_dims(&self, input: Dims) -> Result<Dims> {
        self.op::<T>().out_dims(input)
    }

    fn forward(
        &self,
        input: &Tensor4<T>,
        params: Option<&ConvParams<T>>,
        phase: &mut Phase<'_>,
    ) -> Result<(Tensor4<T>, OpCache<T>)> {
        self.op().forward(input, params, phase)
    }

    fn backward(
        &self,
        upstream: &Tensor4<T>,
        cache: &OpCache<T>,
        params: Option<&ConvParams<T>>,
    ) -> Result<Backward<T>> {
        self.op().backward(upstream, cache, params)
    }

    fn forward_second(
        &self,
        signal: &Tensor4<T>,
        cache: &OpCache<T>,
        upstream: &Tensor4<T>,
        params: Option<&ConvParams<T>>,
    ) -> Result<ForwardSecond<T>> {
        self.op().forward_second(signal, cache, upstream, params)
    }
}

pub(crate) fn expect_dims(what: &str, got: Dims, want: Dims) -> Result<()> {
    if got != want {
        return Err(shape_err!("{what}: expected {want}, got {got}"));
    }
    Ok(())
}

pub(crate) fn wrong_cache(op: &str) -> crate::error::Error {
    state_err!("{op}: cache missing or produced by a different operator")
}

/// Scatter `upstream[i]` into `winners[i]` of an input-shaped tensor, summing collisions.
pub(crate) fn route_backward<T: Scalar>(
    upstream: &Tensor4<T>,
    input: Dims,
    winners: &[usize],
) -> Result<Tensor4<T>> {
    if upstream.data().len() != winners.len() {
        return Err(shape_err!("upstream has {} cells, cache has {}", upstream.data().len(), winners.len()));
    }
    let mut out = Tensor4::zeros(input);
    let g = out.data_mut();
    for (&w, &u) in winners.iter().zip(upstream.data()) {
        g[w] = g[w] + u;
    }
    Ok(out)
}

/// Gather `signal[winners[i]]` into an output-shaped tensor.
pub(crate) fn route_forward<T: Scalar>(
    signal: &Tensor4<T>,
    input: Dims,
    output: Dims,
    winners: &[usize],
) -> Result<Tensor4<T>> {
    expect_dims("forward-second signal", signal.dims(), input)?;
    let s = signal.data();
    Tensor4::from_vec(output, winners.iter().map(|&w| s[w]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_valid_default() {
        let a = Axis::infer(5, 3, 2, None).unwrap();
        assert_eq!((a.output, a.pad), (2, 0));
        assert!(Axis::infer(2, 3, 1, None).is_err());
    }

    #[test]
    fn axis_declared_padding_net_b() {
        // (input, window, stride, declared, expected pad-before)
        let rows = [
            (448, 4, 2, 224, 1),
            (224, 4, 1, 225, 2),
            (225, 3, 2, 112, 0),
            (112, 4, 2, 56, 1),
            (56, 4, 1, 57, 2),
            (57, 4, 1, 56, 1),
            (56, 3, 2, 27, 0),
            (6, 4, 1, 5, 1),
            (5, 3, 2, 2, 0),
        ];
        for (i, w, s, o, pad) in rows {
            let a = Axis::infer(i, w, s, Some(o)).unwrap();
            assert_eq!(a.pad, pad, "{i} -> {o}");
        }
    }

    #[test]
    fn axis_rejects_impossible_declarations() {
        assert!(Axis::infer(448, 4, 2, Some(230)).is_err());
        assert!(Axis::infer(448, 4, 2, Some(200)).is_err());
    }

    #[test]
    fn axis_source_skips_padding() {
        let a = Axis::infer(4, 3, 1, Some(4)).unwrap();
        assert_eq!(a.pad, 1);
        assert_eq!(a.source(0, 0), None);
        assert_eq!(a.source(0, 1), Some(0));
        assert_eq!(a.source(3, 2), None);
    }
}
