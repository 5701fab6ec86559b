use super::{l0_loss_and_seed, mse_loss, Grads, Network, ParamStore};
use crate::error::{arg_err, Result};
use crate::ops::Phase;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor4};

/// Optimisation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the L1 heatmap penalty.
    pub nu: f64,
    pub lr: f64,
    /// `(from_iteration, lr)` pairs overriding `lr`, sorted by iteration.
    pub lr_schedule: Vec<(u64, f64)>,
    /// L2 factor λ; adds `2λρ` to weight gradients.
    pub l2: f64,
    pub batch: usize,
    pub alpha: f64,
    pub dropout_p: u32,
    pub seed: u64,
    pub iterations: u64,
    pub checkpoint_every: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            nu: 0.0,
            lr: 1e-4,
            lr_schedule: Vec::new(),
            l2: 0.0005,
            batch: 36,
            alpha: 0.33,
            dropout_p: 2,
            seed: 0,
            iterations: 1000,
            checkpoint_every: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu >= 0.0) {
            return Err(arg_err!("nu must be >= 0, got {}", self.nu));
        }
        if !(self.lr > 0.0) || self.lr_schedule.iter().any(|&(_, lr)| !(lr > 0.0)) {
            return Err(arg_err!("learning rates must be > 0"));
        }
        if self.lr_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(arg_err!("learning-rate schedule must be strictly increasing in iteration"));
        }
        if !(self.l2 >= 0.0) || self.batch == 0 || self.dropout_p < 2 {
            return Err(arg_err!("need l2 >= 0, batch >= 1, dropout p >= 2"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(arg_err!("invalid Adam constants"));
        }
        Ok(())
    }

    /// Learning rate in effect at `iteration`.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        self.lr_schedule.iter().rev().find(|&&(from, _)| from <= iteration).map_or(self.lr, |&(_, lr)| lr)
    }
}

/// Losses of one training step, measured before the update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub l0: f64,
    /// `Σ|∂L_L/∂input|` over the batch (heatmap L1 mass, unscaled by ν).
    pub heat_l1: f64,
    pub predictions: Vec<f64>,
}

/// One Adam step on `∂L_L/∂ρ + ∂L₀/∂ρ + 2λρ` (L2 on weights only).
///
/// Fails without touching `store` if gradient shapes disagree.
pub fn adam_update<T: Scalar>(
    store: &mut ParamStore<T>,
    grads_l: &Grads<T>,
    grads_0: Option<&Grads<T>>,
    cfg: &TrainConfig,
) -> Result<()> {
    let shapes_ok = |g: &Grads<T>| {
        g.0.len() == store.len()
            && g.0.iter().enumerate().all(|(l, gl)| match (gl, store.layer(l)) {
                (Some(gl), Some(p)) => gl.weights.dims() == p.weights.dims() && gl.bias.dims() == p.bias.dims(),
                (None, None) => true,
                _ => false,
            })
    };
    if !shapes_ok(grads_l) || grads_0.is_some_and(|g| !shapes_ok(g)) {
        return Err(arg_err!("gradients do not match the parameter store"));
    }
    let t = store.step() + 1;
    let lr = T::of(cfg.lr_at(store.step()));
    let (b1, b2, eps) = (T::of(cfg.beta1), T::of(cfg.beta2), T::of(cfg.eps));
    let c1 = T::one() - T::of(cfg.beta1.powi(t.min(i32::MAX as u64) as i32));
    let c2 = T::one() - T::of(cfg.beta2.powi(t.min(i32::MAX as u64) as i32));
    let decay = T::of(2.0 * cfg.l2);
    for (l, state) in store.states_mut().enumerate() {
        let Some(s) = state else { continue };
        let gl = grads_l.0[l].as_ref().expect("shape-checked");
        let g0 = grads_0.and_then(|g| g.0[l].as_ref());
        let parts = [
            (&mut s.params.weights, &mut s.m.weights, &mut s.v.weights, &gl.weights, g0.map(|g| &g.weights), true),
            (&mut s.params.bias, &mut s.m.bias, &mut s.v.bias, &gl.bias, g0.map(|g| &g.bias), false),
        ];
        for (p, m, v, gl, g0, decayed) in parts {
            adam_tensor(p, m, v, gl, g0, if decayed { decay } else { T::zero() }, (lr, b1, b2, eps, c1, c2));
        }
    }
    store.set_step(t);
    Ok(())
}

fn adam_tensor<T: Scalar>(
    p: &mut Tensor4<T>,
    m: &mut Tensor4<T>,
    v: &mut Tensor4<T>,
    gl: &Tensor4<T>,
    g0: Option<&Tensor4<T>>,
    decay: T,
    (lr, b1, b2, eps, c1, c2): (T, T, T, T, T, T),
) {
    let one = T::one();
    let g0 = g0.map(|g| g.data());
    let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
    for i in 0..p.len() {
        let mut g = gl.data()[i];
        // exact zeros are skipped so a vanishing penalty leaves the step bitwise unchanged
        if let Some(g0) = g0 {
            if g0[i] != T::zero() {
                g = g + g0[i];
            }
        }
        if decay != T::zero() {
            g = g + decay * p[i];
        }
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        p[i] = p[i] - lr * mh / (vh.sqrt() + eps);
    }
}

fn to_report<T: Scalar>(loss: T, l0: T, heat: &Tensor4<T>, pred: &[T]) -> StepReport {
    StepReport {
        loss: Scalar::to_f64(loss),
        l0: Scalar::to_f64(l0),
        heat_l1: Scalar::to_f64(heat.abs_sum()),
        predictions: pred.iter().map(|&p| Scalar::to_f64(p)).collect(),
    }
}

/// Gradients of one backward-forward step without the update.
///
/// Returns `(∂L_L/∂ρ, ∂L₀/∂ρ, report)`; dropout masks are drawn from `rng`.
pub fn step_gradients<T: Scalar>(
    net: &Network,
    store: &ParamStore<T>,
    batch: &Tensor4<T>,
    labels: &[T],
    nu: f64,
    rng: &mut Rng,
) -> Result<(Grads<T>, Grads<T>, StepReport)> {
    let (pred, mut trace) = net.forward_pass(store, batch, &mut Phase::Train(rng))?;
    let (loss, top) = mse_loss(&pred, labels)?;
    let back = net.backward_pass(store, &top, &mut trace)?;
    let (l0, seed) = l0_loss_and_seed(back.input.heat(), nu)?;
    let g0 = net.forward_second_pass(store, &seed, &trace)?;
    let report = to_report(loss, l0, back.input.heat(), &pred);
    Ok((back.params, g0, report))
}

/// Forward, backward, forward-second, then Adam. On error `store` is untouched.
pub fn train_step<T: Scalar>(
    net: &Network,
    store: &mut ParamStore<T>,
    batch: &Tensor4<T>,
    labels: &[T],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<StepReport> {
    cfg.validate()?;
    let (gl, g0, report) = step_gradients(net, store, batch, labels, cfg.nu, rng)?;
    adam_update(store, &gl, Some(&g0), cfg)?;
    Ok(report)
}

/// Plain forward, backward, Adam step (no sparsity term).
pub fn train_step_two_pass<T: Scalar>(
    net: &Network,
    store: &mut ParamStore<T>,
    batch: &Tensor4<T>,
    labels: &[T],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<StepReport> {
    cfg.validate()?;
    let (pred, mut trace) = net.forward_pass(store, batch, &mut Phase::Train(rng))?;
    let (loss, top) = mse_loss(&pred, labels)?;
    let back = net.backward_pass(store, &top, &mut trace)?;
    let report = to_report(loss, T::zero(), back.input.heat(), &pred);
    adam_update(store, &back.params, None, cfg)?;
    Ok(report)
}
