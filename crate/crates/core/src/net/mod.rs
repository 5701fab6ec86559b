//! Network assembly and the three propagation passes.
//!
//! A training step runs, in order:
//!
//! 1. [`Network::forward_pass`]: data from `D⁽⁰⁾` to the scalar outputs `D⁽ᴸ⁾`;
//! 2. [`Network::backward_pass`]: `∂L_L/∂D⁽ᴸ⁾` back to the input, giving the
//!    parameter gradients and the heatmap `∂L_L/∂D⁽⁰⁾` (or `∂L_L/∂m`);
//! 3. [`Network::forward_second_pass`]: the L1 seed of that heatmap forward
//!    through the linearised network, giving `∂L₀/∂Ω` at every conv/dense layer.
//!
//! The third pass treats `∂L_L/∂D⁽ᴸ⁾` as a constant of the step: it does not
//! differentiate through the dependence of the top gradient on the weights.

mod checkpoint;
mod loss;
mod params;
pub mod spec;
mod train;

pub use checkpoint::{checkpoint_len, decode, encode, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use loss::{l0_loss_and_seed, mse_loss};
pub use params::{LayerState, ParamStore};
pub use spec::{presets, HeatmapMode, LayerSpec, NetworkSpec, Precision};
pub use train::{adam_update, step_gradients, train_step, train_step_two_pass, StepReport, TrainConfig};

use crate::error::{arg_err, shape_err, state_err, Error, Result};
use crate::ops::{
    Conv, Dense, DiffOp, Dropout, Layer, LeakyRelu, Maxout, OpCache, ParamGrads, Phase, Pool, PoolKind,
};
use crate::tensor::{entrywise_mul_broadcast, Dims, Scalar, Tensor4};

/// A validated network: resolved operators and per-layer extents.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    /// Per-image extents; `shapes[0]` is the input, `shapes[l]` the output of layer `l`.
    shapes: Vec<Dims>,
}

impl Network {
    /// Resolve every layer's geometry; declared output sizes must match.
    pub fn build(spec: &NetworkSpec) -> Result<Network> {
        let (w, h, c) = spec.input;
        let input = Dims::new(1, w, h, c);
        input.validate().map_err(|e| Error::Build { layer: 0, msg: e.to_string() })?;
        let mut shapes = vec![input];
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, ls) in spec.layers.iter().enumerate() {
            let cur = *shapes.last().expect("input shape");
            let build_err = |e: Error| Error::Build { layer: i + 1, msg: format!("{ls}: {e}") };
            let layer = match *ls {
                LayerSpec::Conv { filters, window, stride, out, bias } => {
                    Layer::Conv(Conv::new(cur, filters, window, stride, out, bias).map_err(build_err)?)
                }
                LayerSpec::Dense { units } => Layer::Dense(Dense::new(cur, units).map_err(build_err)?),
                LayerSpec::LeakyRelu { alpha } => Layer::LeakyRelu(LeakyRelu::new(alpha).map_err(build_err)?),
                LayerSpec::MaxPool { window, stride, out } => {
                    Layer::Pool(Pool::new(PoolKind::Max, cur, window, stride, out).map_err(build_err)?)
                }
                LayerSpec::MeanPool { window, stride, out } => {
                    Layer::Pool(Pool::new(PoolKind::Mean, cur, window, stride, out).map_err(build_err)?)
                }
                LayerSpec::RmsPool { window, stride, out } => {
                    Layer::Pool(Pool::new(PoolKind::Rms, cur, window, stride, out).map_err(build_err)?)
                }
                LayerSpec::Dropout { p } => Layer::Dropout(Dropout::new(p).map_err(build_err)?),
                LayerSpec::Maxout { p } => Layer::Maxout(Maxout::new(p).map_err(build_err)?),
            };
            let next = DiffOp::<f64>::out_dims(&layer, cur).map_err(build_err)?;
            shapes.push(next);
            layers.push(layer);
        }
        let last = *shapes.last().expect("shape");
        let single_unit = matches!(spec.layers.last(), Some(LayerSpec::Dense { units: 1 }));
        if !single_unit || last != Dims::new(1, 1, 1, 1) {
            return Err(Error::Build {
                layer: spec.layers.len(),
                msg: "the network must end with a single-unit dense layer".into(),
            });
        }
        Ok(Network { spec: spec.clone(), layers, shapes })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Per-image extent after layer `l` (`l = 0` is the input).
    pub fn shape(&self, l: usize) -> Dims {
        self.shapes[l]
    }

    pub fn shapes(&self) -> &[Dims] {
        &self.shapes
    }

    pub fn input_dims(&self, n: usize) -> Dims {
        self.shapes[0].with_n(n)
    }

    pub fn heatmap_mode(&self) -> HeatmapMode {
        self.spec.heatmap
    }

    /// Dims of the heatmap input for a batch of `n`: one channel in hue mode.
    pub fn heat_dims(&self, n: usize) -> Dims {
        match self.spec.heatmap {
            HeatmapMode::Hue => self.input_dims(n).with_c(1),
            HeatmapMode::Plain => self.input_dims(n),
        }
    }

    /// Step 1: propagate `batch` to the per-image scalar predictions.
    pub fn forward_pass<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        batch: &Tensor4<T>,
        phase: &mut Phase<'_>,
    ) -> Result<(Vec<T>, Trace<T>)> {
        params.check_network(self)?;
        let n = batch.dims().n;
        if batch.dims() != self.input_dims(n) {
            return Err(shape_err!("batch is {}, network expects {}", batch.dims(), self.input_dims(n)));
        }
        let mut x = match self.spec.heatmap {
            HeatmapMode::Hue => entrywise_mul_broadcast(&Tensor4::ones(self.heat_dims(n)), batch)?,
            HeatmapMode::Plain => batch.clone(),
        };
        let mut caches = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (y, cache) = layer.forward(&x, params.layer(l), phase)?;
            caches.push(cache);
            x = y;
        }
        let predictions = x.data().to_vec();
        Ok((
            predictions,
            Trace { input: batch.clone(), caches, param_version: params.version(), upstreams: None },
        ))
    }

    /// Step 2: backpropagate `top_grad` (one value per image).
    ///
    /// Records `∂L_L/∂D⁽ˡ⁾` for every layer in the trace, for step 3.
    pub fn backward_pass<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        top_grad: &[T],
        trace: &mut Trace<T>,
    ) -> Result<BackwardResult<T>> {
        if trace.param_version != params.version() || trace.caches.len() != self.layers.len() {
            return Err(state_err!("forward caches are stale: parameters changed since the forward pass"));
        }
        let n = trace.input.dims().n;
        if top_grad.len() != n {
            return Err(shape_err!("{} top gradients for a batch of {n}", top_grad.len()));
        }
        let mut g = Tensor4::from_vec(Dims::new(n, 1, 1, 1), top_grad.to_vec())?;
        let mut grads = Grads::empty(self.layers.len());
        let mut upstreams = vec![Tensor4::zeros(Dims::new(1, 1, 1, 1)); self.layers.len()];
        for l in (0..self.layers.len()).rev() {
            let b = self.layers[l].backward(&g, &trace.caches[l], params.layer(l))?;
            grads.0[l] = b.params;
            upstreams[l] = std::mem::replace(&mut g, b.input);
        }
        trace.upstreams = Some(upstreams);
        let mask = match self.spec.heatmap {
            HeatmapMode::Hue => Some(mask_gradient(&g, &trace.input)?),
            HeatmapMode::Plain => None,
        };
        Ok(BackwardResult { params: grads, input: InputGrads { image: g, mask } })
    }

    /// Step 3: propagate the L₀ seed (shaped like [`Network::heat_dims`])
    /// forward through the first-order derivative of the network.
    pub fn forward_second_pass<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        seed: &Tensor4<T>,
        trace: &Trace<T>,
    ) -> Result<Grads<T>> {
        let upstreams = trace
            .upstreams
            .as_ref()
            .ok_or_else(|| state_err!("forward-second pass requires the backward pass of the same step"))?;
        if trace.param_version != params.version() {
            return Err(state_err!("forward caches are stale: parameters changed since the forward pass"));
        }
        let n = trace.input.dims().n;
        if seed.dims() != self.heat_dims(n) {
            return Err(shape_err!("seed is {}, expected {}", seed.dims(), self.heat_dims(n)));
        }
        let mut s = match self.spec.heatmap {
            HeatmapMode::Hue => entrywise_mul_broadcast(seed, &trace.input)?,
            HeatmapMode::Plain => seed.clone(),
        };
        let mut grads = Grads::empty(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let f = layer.forward_second(&s, &trace.caches[l], &upstreams[l], params.layer(l))?;
            grads.0[l] = f.params;
            s = f.signal;
        }
        Ok(grads)
    }

    /// Scalar outputs only, inference mode.
    pub fn predict<T: Scalar>(&self, params: &ParamStore<T>, batch: &Tensor4<T>) -> Result<Vec<T>> {
        Ok(self.forward_pass(params, batch, &mut Phase::Inference)?.0)
    }
}

/// `∂/∂m = Σ_c g_c · X_c` with `m = 1`.
fn mask_gradient<T: Scalar>(image_grad: &Tensor4<T>, image: &Tensor4<T>) -> Result<Tensor4<T>> {
    let d = image.dims();
    let prod = image_grad.zip_map(image, |a, b| a * b)?;
    Tensor4::from_vec(d.with_c(1), prod.data().chunks_exact(d.c).map(|px| px.iter().copied().sum()).collect())
}

/// Cached state of one step, shared by the three passes.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    input: Tensor4<T>,
    caches: Vec<OpCache<T>>,
    param_version: u64,
    upstreams: Option<Vec<Tensor4<T>>>,
}

impl<T: Scalar> Trace<T> {
    pub fn input(&self) -> &Tensor4<T> {
        &self.input
    }

    pub fn caches(&self) -> &[OpCache<T>] {
        &self.caches
    }

    /// `∂L_L/∂D⁽ˡ⁾` for each layer output, once the backward pass has run.
    pub fn upstreams(&self) -> Option<&[Tensor4<T>]> {
        self.upstreams.as_deref()
    }
}

/// Input-side gradients of a backward pass.
#[derive(Clone, Debug)]
pub struct InputGrads<T> {
    /// `∂/∂D⁽⁰⁾`, shaped like the batch.
    pub image: Tensor4<T>,
    /// `∂/∂m`, one channel, present in hue mode.
    pub mask: Option<Tensor4<T>>,
}

impl<T: Scalar> InputGrads<T> {
    /// The gradient the heatmap and the L₀ penalty are defined on.
    pub fn heat(&self) -> &Tensor4<T> {
        self.mask.as_ref().unwrap_or(&self.image)
    }
}

#[derive(Clone, Debug)]
pub struct BackwardResult<T> {
    pub params: Grads<T>,
    pub input: InputGrads<T>,
}

/// Per-layer parameter gradients (`None` for parameter-free layers).
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T>(pub Vec<Option<ParamGrads<T>>>);

impl<T: Scalar> Grads<T> {
    pub fn empty(layers: usize) -> Self {
        Grads(vec![None; layers])
    }

    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        Grads((0..params.len()).map(|l| params.layer(l).map(ParamGrads::zeros_like)).collect())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.0.len() != other.0.len() {
            return Err(arg_err!("gradient sets of different depth"));
        }
        let mut out = self.clone();
        for (a, b) in out.0.iter_mut().zip(&other.0) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b)?,
                (None, None) => {}
                (None, Some(b)) => *a = Some(b.clone()),
                (Some(_), None) => {}
            }
        }
        Ok(out)
    }

    pub fn scale(&self, k: T) -> Self {
        Grads(self.0.iter().map(|g| g.as_ref().map(|g| g.scale(k))).collect())
    }

    /// All entries flattened in layer order: weights then bias.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for g in self.0.iter().flatten() {
            out.extend_from_slice(g.weights.data());
            out.extend_from_slice(g.bias.data());
        }
        out
    }
}
