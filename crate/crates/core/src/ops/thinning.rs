use super::{
    expect_dims, route_backward, route_forward, wrong_cache, Backward, ConvParams, DiffOp,
    ForwardSecond, OpCache, Phase,
};
use crate::error::{arg_err, shape_err, Result};
use crate::rng::Rng;
use crate::tensor::{Dims, Scalar, Tensor4};

/// Drops one channel in `p` per image during training.
///
/// Kept channels are multiplied by `p/(p−1)` so inference is a plain
/// pass-through. The mask drawn in `forward` thins the network for both
/// derivative passes of the same step.
#[derive(Clone, Debug, PartialEq)]
pub struct Dropout {
    p: u32,
}

impl Dropout {
    pub fn new(p: u32) -> Result<Self> {
        if p < 2 {
            return Err(arg_err!("dropout drops one channel in p, p must be >= 2 (got {p})"));
        }
        Ok(Dropout { p })
    }

    pub fn p(&self) -> u32 {
        self.p
    }

    pub fn drop_rate(&self) -> f64 {
        1.0 / self.p as f64
    }

    /// Per `(image, channel)` keep flags drawn from `rng`.
    pub fn draw_mask(&self, images: usize, channels: usize, rng: &mut Rng) -> Vec<bool> {
        let rate = self.drop_rate();
        (0..images * channels).map(|_| !rng.bernoulli(rate)).collect()
    }

    /// Forward pass with an explicit keep mask.
    pub fn forward_with_mask<T: Scalar>(&self, input: &Tensor4<T>, keep: &[bool]) -> Result<(Tensor4<T>, OpCache<T>)> {
        let d = input.dims();
        if keep.len() != d.n * d.c {
            return Err(shape_err!("dropout mask has {} entries, expected {}", keep.len(), d.n * d.c));
        }
        let k = T::of(self.p as f64 / (self.p - 1) as f64);
        let scale: Vec<T> = keep.iter().map(|&kp| if kp { k } else { T::zero() }).collect();
        let out = apply_scale(input, &scale)?;
        Ok((out, OpCache::Thinning { scale }))
    }
}

fn apply_scale<T: Scalar>(t: &Tensor4<T>, scale: &[T]) -> Result<Tensor4<T>> {
    let d = t.dims();
    if scale.len() != d.n * d.c {
        return Err(shape_err!("thinning mask of {} entries for {d}", scale.len()));
    }
    let per = d.w * d.h * d.c;
    let mut out = t.clone();
    for (n, img) in out.data_mut().chunks_exact_mut(per).enumerate() {
        let s = &scale[n * d.c..(n + 1) * d.c];
        for px in img.chunks_exact_mut(d.c) {
            for (v, &k) in px.iter_mut().zip(s) {
                *v = *v * k;
            }
        }
    }
    Ok(out)
}

impl<T: Scalar> DiffOp<T> for Dropout {
    fn name(&self) -> String {
        format!("dropout(1/{})", self.p)
    }

    fn out_dims(&self, input: Dims) -> Result<Dims> {
        Ok(input)
    }

    fn forward(
        &self,
        input: &Tensor4<T>,
        _params: Option<&ConvParams<T>>,
        phase: &mut Phase<'_>,
    ) -> Result<(Tensor4<T>, OpCache<T>)> {
        let d = input.dims();
        match phase {
            Phase::Train(rng) => {
                let keep = self.draw_mask(d.n, d.c, rng);
                self.forward_with_mask(input, &keep)
            }
            Phase::Inference => Ok((input.clone(), OpCache::Thinning { scale: vec![T::one(); d.n * d.c] })),
        }
    }

    fn backward(
        &self,
        upstream: &Tensor4<T>,
        cache: &OpCache<T>,
        _params: Option<&ConvParams<T>>,
    ) -> Result<Backward<T>> {
        let OpCache::Thinning { scale } = cache else { return Err(wrong_cache("dropout backward")) };
        Ok(Backward { input: apply_scale(upstream, scale)?, params: None })
    }

    fn forward_second(
        &self,
        signal: &Tensor4<T>,
        cache: &OpCache<T>,
        _upstream: &Tensor4<T>,
        _params: Option<&ConvParams<T>>,
    ) -> Result<ForwardSecond<T>> {
        let OpCache::Thinning { scale } = cache else {
            return Err(wrong_cache("dropout forward-second"));
        };
        Ok(ForwardSecond { signal: apply_scale(signal, scale)?, params: None })
    }
}

/// Channelwise maximum over consecutive groups of `p` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Maxout {
    p: usize,
}

impl Maxout {
    pub fn new(p: usize) -> Result<Self> {
        if p == 0 {
            return Err(arg_err!("maxout group size must be >= 1"));
        }
        Ok(Maxout { p })
    }

    pub fn p(&self) -> usize {
        self.p
    }
}

impl<T: Scalar> DiffOp<T> for Maxout {
    fn name(&self) -> String {
        format!("maxout({})", self.p)
    }

    fn out_dims(&self, input: Dims) -> Result<Dims> {
        if input.c % self.p != 0 {
            return Err(shape_err!("maxout: {} channels not divisible by group size {}", input.c, self.p));
        }
        Ok(input.with_c(input.c / self.p))
    }

    fn forward(
        &self,
        input: &Tensor4<T>,
        _params: Option<&ConvParams<T>>,
        _phase: &mut Phase<'_>,
    ) -> Result<(Tensor4<T>, OpCache<T>)> {
        let id = input.dims();
        let od = DiffOp::<T>::out_dims(self, id)?;
        let src = input.data();
        let mut winners = Vec::with_capacity(od.len());
        for base in (0..id.len()).step_by(self.p) {
            let mut best = base;
            for i in base + 1..base + self.p {
                if src[i] > src[best] {
                    best = i;
                }
            }
            winners.push(best);
        }
        let out = Tensor4::from_vec(od, winners.iter().map(|&w| src[w]).collect())?;
        Ok((out, OpCache::Winners { input: id, winners }))
    }

    fn backward(
        &self,
        upstream: &Tensor4<T>,
        cache: &OpCache<T>,
        _params: Option<&ConvParams<T>>,
    ) -> Result<Backward<T>> {
        let OpCache::Winners { input, winners } = cache else { return Err(wrong_cache("maxout backward")) };
        expect_dims("maxout upstream", upstream.dims(), DiffOp::<T>::out_dims(self, *input)?)?;
        Ok(Backward { input: route_backward(upstream, *input, winners)?, params: None })
    }

    fn forward_second(
        &self,
        signal: &Tensor4<T>,
        cache: &OpCache<T>,
        _upstream: &Tensor4<T>,
        _params: Option<&ConvParams<T>>,
    ) -> Result<ForwardSecond<T>> {
        let OpCache::Winners { input, winners } = cache else {
            return Err(wrong_cache("maxout forward-second"));
        };
        let od = DiffOp::<T>::out_dims(self, *input)?;
        Ok(ForwardSecond { signal: route_forward(signal, *input, od, winners)?, params: None })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand(d: Dims, rng: &mut Rng) -> Tensor4<f64> {
        Tensor4::from_fn(d, |_, _, _, _| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn keep_all_is_identity_in_all_passes() {
        let op = Dropout::new(2).unwrap();
        let mut rng = Rng::new(1);
        let x = rand(Dims::new(2, 2, 2, 3), &mut rng);
        // all-keep with p/(p-1) scaling undone: inference phase is the all-keep identity
        let (y, cache) = op.forward(&x, None, &mut Phase::Inference).unwrap();
        assert_eq!(y, x);
        assert_eq!(op.backward(&x, &cache, None).unwrap().input, x);
        assert_eq!(op.forward_second(&x, &cache, &x, None).unwrap().signal, x);
    }

    #[test]
    fn dropped_channel_is_zero_everywhere() {
        let op = Dropout::new(4).unwrap();
        let mut rng = Rng::new(2);
        let x = rand(Dims::new(1, 2, 2, 3), &mut rng);
        let keep = [true, false, true];
        let (y, cache) = op.forward_with_mask(&x, &keep).unwrap();
        let g = rand(x.dims(), &mut rng);
        let b = op.backward(&g, &cache, None).unwrap().input;
        let f = op.forward_second(&g, &cache, &g, None).unwrap().signal;
        for i in 0..x.data().len() {
            let c = i % 3;
            if c == 1 {
                assert_eq!((y.data()[i], b.data()[i], f.data()[i]), (0.0, 0.0, 0.0));
            } else {
                let k = 4.0 / 3.0;
                assert_eq!(y.data()[i], x.data()[i] * k);
                assert_eq!(b.data()[i], g.data()[i] * k);
                assert_eq!(f.data()[i], g.data()[i] * k);
            }
        }
    }

    #[test]
    fn empirical_drop_rate() {
        for p in [2u32, 3, 5] {
            let op = Dropout::new(p).unwrap();
            let mut rng = Rng::new(100 + p as u64);
            let keep = op.draw_mask(1, 100_000, &mut rng);
            let rate = keep.iter().filter(|k| !**k).count() as f64 / keep.len() as f64;
            assert!((rate - 1.0 / p as f64).abs() < 0.01, "p={p}: {rate}");
        }
        assert!(Dropout::new(1).is_err());
    }

    #[test]
    fn maxout_identity_and_routing() {
        let mut rng = Rng::new(3);
        let x = rand(Dims::new(2, 2, 2, 4), &mut rng);
        let id = Maxout::new(1).unwrap();
        let (y, cache) = id.forward(&x, None, &mut Phase::Inference).unwrap();
        assert_eq!(y, x);
        assert_eq!(id.backward(&x, &cache, None).unwrap().input, x);
        assert_eq!(id.forward_second(&x, &cache, &x, None).unwrap().signal, x);

        let op = Maxout::new(2).unwrap();
        let x = Tensor4::from_vec(Dims::new(1, 1, 1, 2), vec![2.0, 5.0]).unwrap();
        let (y, cache) = op.forward(&x, None, &mut Phase::Inference).unwrap();
        assert_eq!(y.data(), &[5.0]);
        let g = Tensor4::filled(y.dims(), 3.0);
        assert_eq!(op.backward(&g, &cache, None).unwrap().input.data(), &[0.0, 3.0]);
        let s = Tensor4::from_vec(x.dims(), vec![7.0, 11.0]).unwrap();
        assert_eq!(op.forward_second(&s, &cache, &g, None).unwrap().signal.data(), &[11.0]);
    }

    #[test]
    fn maxout_rejects_indivisible_channels() {
        let op = Maxout::new(3).unwrap();
        let x = Tensor4::<f64>::zeros(Dims::new(1, 1, 1, 4));
        assert!(op.forward(&x, None, &mut Phase::Inference).is_err());
    }
}
