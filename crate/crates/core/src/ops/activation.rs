use super::{expect_dims, wrong_cache, Backward, ConvParams, DiffOp, ForwardSecond, OpCache, Phase};
use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{Dims, Scalar, Tensor4};

/// `r_α(x) = max(αx, x)`.
///
/// Both derivative passes multiply by `α` where the forward input was
/// negative and by 1 elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct LeakyRelu {
    alpha: f64,
}

impl LeakyRelu {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(arg_err!("leaky rectifier slope must lie in [0, 1), got {alpha}"));
        }
        Ok(LeakyRelu { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    fn apply_mask<T: Scalar>(&self, t: &Tensor4<T>, negative: &[bool]) -> Result<Tensor4<T>> {
        if negative.len() != t.data().len() {
            return Err(shape_err!("leaky rectifier: {} values for a mask of {}", t.data().len(), negative.len()));
        }
        let a = T::of(self.alpha);
        let data = t.data().iter().zip(negative).map(|(&v, &neg)| if neg { a * v } else { v }).collect();
        Tensor4::from_vec(t.dims(), data)
    }
}

impl<T: Scalar> DiffOp<T> for LeakyRelu {
    fn name(&self) -> String {
        format!("leaky_relu({})", self.alpha)
    }

    fn out_dims(&self, input: Dims) -> Result<Dims> {
        Ok(input)
    }

    fn forward(
        &self,
        input: &Tensor4<T>,
        _params: Option<&ConvParams<T>>,
        _phase: &mut Phase<'_>,
    ) -> Result<(Tensor4<T>, OpCache<T>)> {
        let negative: Vec<bool> = input.data().iter().map(|&v| v < T::zero()).collect();
        let out = self.apply_mask(input, &negative)?;
        Ok((out, OpCache::Negative(negative)))
    }

    fn backward(
        &self,
        upstream: &Tensor4<T>,
        cache: &OpCache<T>,
        _params: Option<&ConvParams<T>>,
    ) -> Result<Backward<T>> {
        let OpCache::Negative(neg) = cache else { return Err(wrong_cache("leaky backward")) };
        Ok(Backward { input: self.apply_mask(upstream, neg)?, params: None })
    }

    fn forward_second(
        &self,
        signal: &Tensor4<T>,
        cache: &OpCache<T>,
        upstream: &Tensor4<T>,
        _params: Option<&ConvParams<T>>,
    ) -> Result<ForwardSecond<T>> {
        let OpCache::Negative(neg) = cache else { return Err(wrong_cache("leaky forward-second")) };
        expect_dims("leaky forward-second signal", signal.dims(), upstream.dims())?;
        Ok(ForwardSecond { signal: self.apply_mask(signal, neg)?, params: None })
    }
}
