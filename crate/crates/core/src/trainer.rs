//! The training loop: seeded batches, optional augmentation, and a callback
//! after every step.
//!
//! Everything an iteration draws (batch membership, augmentation parameters,
//! dropout masks) is a pure function of `(seed, iteration)`, so a run resumed
//! from a checkpoint continues exactly as the uninterrupted run would.

use rayon::prelude::*;

use crate::error::{arg_err, Result};
use crate::net::{train_step, train_step_two_pass, Network, ParamStore, StepReport, TrainConfig};
use crate::pipeline::{apply_augment, AugmentRanges};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor4};

const PERMUTATION: u64 = 1 << 40;
const AUGMENT: u64 = 2 << 40;
const DROPOUT: u64 = 3 << 40;

/// Preprocessed inputs (`n×w×h×c`) with one regression target each.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingData {
    pub inputs: Tensor4<f64>,
    pub labels: Vec<f64>,
}

impl TrainingData {
    pub fn new(inputs: Tensor4<f64>, labels: Vec<f64>) -> Result<Self> {
        if inputs.dims().n != labels.len() {
            return Err(arg_err!("{} inputs but {} labels", inputs.dims().n, labels.len()));
        }
        Ok(TrainingData { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOptions {
    pub augment: Option<AugmentRanges>,
    /// Skip the forward-second pass (plain backpropagation).
    pub two_pass: bool,
}

/// Sample positions `iteration·batch ..` of an endless sequence of seeded
/// epoch permutations.
pub fn batch_indices(seed: u64, iteration: u64, batch: usize, count: usize) -> Vec<usize> {
    let mut perm_epoch = u64::MAX;
    let mut perm: Vec<usize> = Vec::new();
    (0..batch as u64)
        .map(|k| {
            let pos = iteration * batch as u64 + k;
            let epoch = pos / count as u64;
            if epoch != perm_epoch {
                perm = (0..count).collect();
                Rng::derive(seed, PERMUTATION | epoch).shuffle(&mut perm);
                perm_epoch = epoch;
            }
            perm[(pos % count as u64) as usize]
        })
        .collect()
}

/// The batch of `iteration`, augmented if requested.
pub fn make_batch<T: Scalar>(
    data: &TrainingData,
    cfg: &TrainConfig,
    opts: &TrainOptions,
    iteration: u64,
) -> Result<(Tensor4<T>, Vec<T>)> {
    let idx = batch_indices(cfg.seed, iteration, cfg.batch, data.len());
    let images: Vec<Tensor4<f64>> = idx
        .par_iter()
        .enumerate()
        .map(|(k, &i)| {
            let img = data.inputs.image(i);
            match &opts.augment {
                Some(r) => {
                    let mut rng = Rng::derive(cfg.seed, AUGMENT | (iteration * cfg.batch as u64 + k as u64));
                    apply_augment(&img, &r.draw(&mut rng))
                }
                None => img,
            }
        })
        .collect();
    let labels = idx.iter().map(|&i| T::of(data.labels[i])).collect();
    Ok((Tensor4::stack(&images)?.cast(), labels))
}

/// Run iterations `store.step() .. until`, calling `after_step(iteration,
/// report, store)` with the 1-based count of completed iterations.
pub fn train<T: Scalar>(
    net: &Network,
    store: &mut ParamStore<T>,
    data: &TrainingData,
    cfg: &TrainConfig,
    opts: &TrainOptions,
    until: u64,
    mut after_step: impl FnMut(u64, &StepReport, &ParamStore<T>) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(arg_err!("no training data"));
    }
    if data.inputs.dims().with_n(1) != net.input_dims(1) {
        return Err(arg_err!("training inputs are {}, network expects {}", data.inputs.dims(), net.input_dims(1)));
    }
    for it in store.step()..until {
        let (batch, labels) = make_batch::<T>(data, cfg, opts, it)?;
        let mut rng = Rng::derive(cfg.seed, DROPOUT | it);
        let report = if opts.two_pass {
            train_step_two_pass(net, store, &batch, &labels, cfg, &mut rng)?
        } else {
            train_step(net, store, &batch, &labels, cfg, &mut rng)?
        };
        after_step(it + 1, &report, store)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{presets, Precision};
    use crate::tensor::Dims;

    #[test]
    fn batches_cover_each_epoch_once() {
        let count = 10;
        let mut seen: Vec<usize> = (0..5).flat_map(|it| batch_indices(3, it, 4, count)).collect();
        // 20 positions = two full epochs
        seen.sort_unstable();
        let want: Vec<usize> = (0..count).flat_map(|i| [i, i]).collect();
        assert_eq!(seen, want);
        assert_eq!(batch_indices(3, 2, 4, count), batch_indices(3, 2, 4, count));
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let mut spec = presets::toy(0.33);
        spec.precision = Precision::F64;
        let net = Network::build(&spec).unwrap();
        let mut rng = Rng::new(1);
        let inputs = Tensor4::from_fn(Dims::new(6, 64, 64, 3), |_, _, _, _| rng.uniform(-1.0, 1.0));
        let data = TrainingData::new(inputs, vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let cfg = TrainConfig { nu: 1e-3, batch: 4, seed: 5, ..TrainConfig::default() };
        let opts = TrainOptions { augment: Some(AugmentRanges::for_crop(64)), two_pass: false };
        let mut a = ParamStore::<f64>::init(&net, 2);
        train(&net, &mut a, &data, &cfg, &opts, 4, |_, _, _| Ok(())).unwrap();
        let mut b = ParamStore::<f64>::init(&net, 2);
        train(&net, &mut b, &data, &cfg, &opts, 2, |_, _, _| Ok(())).unwrap();
        let mut b = crate::net::decode::<f64>(&crate::net::encode(&b)).unwrap();
        let mut iters = Vec::new();
        train(&net, &mut b, &data, &cfg, &opts, 4, |i, _, _| {
            iters.push(i);
            Ok(())
        })
        .unwrap();
        assert_eq!(iters, vec![3, 4]);
        assert_eq!(crate::net::encode(&a), crate::net::encode(&b));
    }
}
