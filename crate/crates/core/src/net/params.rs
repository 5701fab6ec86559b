use std::sync::atomic::{AtomicU64, Ordering};

use super::Network;
use crate::error::{state_err, Result};
use crate::ops::{ConvParams, Layer};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor4};

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Parameters of one conv/dense layer with their Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<T> {
    pub params: ConvParams<T>,
    pub m: ConvParams<T>,
    pub v: ConvParams<T>,
}

impl<T: Scalar> LayerState<T> {
    fn new(params: ConvParams<T>) -> Self {
        let zeros = ConvParams {
            weights: Tensor4::zeros(params.weights.dims()),
            bias: Tensor4::zeros(params.bias.dims()),
        };
        LayerState { m: zeros.clone(), v: zeros, params }
    }
}

/// All learnable parameters of a network plus optimizer state.
///
/// Every mutation gets a new version number so traces recorded against
/// older parameters are detected as stale.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    kinds: Vec<u8>,
    layers: Vec<Option<LayerState<T>>>,
    step: u64,
    version: u64,
}

impl<T: Scalar> PartialEq for ParamStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.kinds == other.kinds && self.layers == other.layers && self.step == other.step
    }
}

impl<T: Scalar> ParamStore<T> {
    pub(crate) fn from_parts(kinds: Vec<u8>, layers: Vec<Option<LayerState<T>>>, step: u64) -> Self {
        ParamStore { kinds, layers, step, version: fresh_version() }
    }

    /// All parameters zero.
    pub fn zeros(net: &Network) -> Self {
        Self::with_init(net, |_, d| Tensor4::zeros(d))
    }

    /// He-style uniform weights scaled by fan-in and the slope of the
    /// following rectifier (linear gain when none follows); zero biases.
    pub fn init(net: &Network, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let layers = net.layers();
        Self::with_init(net, |l, d| {
            let fan_in = match &layers[l] {
                Layer::Conv(c) => c.fan_in(),
                Layer::Dense(dl) => dl.conv.fan_in(),
                _ => unreachable!("only parameterised layers are initialised"),
            };
            let alpha = match layers.get(l + 1) {
                Some(Layer::LeakyRelu(r)) => r.alpha(),
                _ => 1.0,
            };
            let bound = (6.0 / ((1.0 + alpha * alpha) * fan_in as f64)).sqrt();
            Tensor4::from_fn(d, |_, _, _, _| T::of(rng.uniform(-bound, bound)))
        })
    }

    fn with_init(net: &Network, mut weights: impl FnMut(usize, crate::tensor::Dims) -> Tensor4<T>) -> Self {
        let kinds = net.spec().layers.iter().map(|l| l.kind_tag()).collect();
        let layers = net
            .layers()
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let conv = match layer {
                    Layer::Conv(c) => c,
                    Layer::Dense(d) => &d.conv,
                    _ => return None,
                };
                let params = ConvParams { weights: weights(l, conv.weight_dims()), bias: Tensor4::zeros(conv.bias_dims()) };
                Some(LayerState::new(params))
            })
            .collect();
        Self::from_parts(kinds, layers, 0)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn kinds(&self) -> &[u8] {
        &self.kinds
    }

    pub fn layer(&self, l: usize) -> Option<&ConvParams<T>> {
        self.layers[l].as_ref().map(|s| &s.params)
    }

    /// Mutable parameter access; invalidates existing traces.
    pub fn layer_mut(&mut self, l: usize) -> Option<&mut ConvParams<T>> {
        self.version = fresh_version();
        self.layers[l].as_mut().map(|s| &mut s.params)
    }

    pub fn state(&self, l: usize) -> Option<&LayerState<T>> {
        self.layers[l].as_ref()
    }

    pub(crate) fn states_mut(&mut self) -> impl Iterator<Item = &mut Option<LayerState<T>>> {
        self.version = fresh_version();
        self.layers.iter_mut()
    }

    pub(crate) fn states(&self) -> &[Option<LayerState<T>>] {
        &self.layers
    }

    /// Number of optimizer steps taken.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Total number of scalar parameters (weights and biases).
    pub fn count(&self) -> usize {
        self.layers.iter().flatten().map(|s| s.params.weights.data().len() + s.params.bias.data().len()).sum()
    }

    /// Weights then bias of every layer, in order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.count());
        for s in self.layers.iter().flatten() {
            out.extend_from_slice(s.params.weights.data());
            out.extend_from_slice(s.params.bias.data());
        }
        out
    }

    /// Overwrite the parameter at flat index `i` (order of [`ParamStore::flatten`]).
    pub fn set_flat(&mut self, mut i: usize, v: T) {
        self.version = fresh_version();
        for s in self.layers.iter_mut().flatten() {
            for t in [&mut s.params.weights, &mut s.params.bias] {
                let len = t.data().len();
                if i < len {
                    t.data_mut()[i] = v;
                    return;
                }
                i -= len;
            }
        }
        panic!("flat parameter index out of range");
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let c = |p: &ConvParams<T>| ConvParams { weights: p.weights.cast(), bias: p.bias.cast() };
        let layers = self
            .layers
            .iter()
            .map(|s| s.as_ref().map(|s| LayerState { params: c(&s.params), m: c(&s.m), v: c(&s.v) }))
            .collect();
        ParamStore::from_parts(self.kinds.clone(), layers, self.step)
    }

    /// Checks that parameter dims agree with `net`.
    pub fn check_network(&self, net: &Network) -> Result<()> {
        if self.layers.len() != net.layers().len() {
            return Err(state_err!("parameter store has {} layers, network {}", self.layers.len(), net.layers().len()));
        }
        for (l, (layer, state)) in net.layers().iter().zip(&self.layers).enumerate() {
            let conv = match layer {
                Layer::Conv(c) => Some(c),
                Layer::Dense(d) => Some(&d.conv),
                _ => None,
            };
            let ok = match (conv, state) {
                (Some(c), Some(s)) => {
                    s.params.weights.dims() == c.weight_dims() && s.params.bias.dims() == c.bias_dims()
                }
                (None, None) => true,
                _ => false,
            };
            if !ok || self.kinds[l] != net.spec().layers[l].kind_tag() {
                return Err(state_err!("parameters of layer {} do not match the network", l + 1));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{presets, Network};

    #[test]
    fn init_is_seeded_and_bounded() {
        let net = Network::build(&presets::toy(0.33)).unwrap();
        let a = ParamStore::<f64>::init(&net, 7);
        let b = ParamStore::<f64>::init(&net, 7);
        let c = ParamStore::<f64>::init(&net, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a.version(), b.version());
        // first conv: 4×4×3 fan-in followed by a 0.33 rectifier
        let bound = (6.0 / ((1.0 + 0.33f64 * 0.33) * 48.0)).sqrt();
        let w = a.layer(0).unwrap();
        assert!(w.weights.data().iter().all(|v| v.abs() <= bound));
        assert!(w.weights.data().iter().any(|v| v.abs() > 0.9 * bound));
        assert!(w.bias.data().iter().all(|&v| v == 0.0));
        let st = a.state(0).unwrap();
        assert!(st.m.weights.data().iter().chain(st.v.bias.data()).all(|&v| v == 0.0));
        assert!(a.layer(1).is_none());
    }

    #[test]
    fn flat_indexing_round_trip() {
        let net = Network::build(&presets::toy(0.33)).unwrap();
        let mut p = ParamStore::<f64>::init(&net, 1);
        let n = p.count();
        assert_eq!(p.flatten().len(), n);
        p.set_flat(n - 1, 42.0);
        assert_eq!(p.flatten()[n - 1], 42.0);
        assert_eq!(p.layer(net.layers().len() - 1).unwrap().bias.data()[0], 42.0);
    }
}
