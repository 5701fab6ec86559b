use crate::error::{arg_err, Result};
use crate::tensor::{Scalar, Tensor4};

/// Mean squared error over a batch and its gradient with respect to each prediction.
pub fn mse_loss<T: Scalar>(predictions: &[T], labels: &[T]) -> Result<(T, Vec<T>)> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(arg_err!("{} predictions for {} labels", predictions.len(), labels.len()));
    }
    let n = T::of(predictions.len() as f64);
    let two = T::of(2.0);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(predictions.len());
    for (&p, &y) in predictions.iter().zip(labels) {
        let d = p - y;
        loss = loss + d * d;
        grad.push(two * d / n);
    }
    Ok((loss / n, grad))
}

/// `L₀ = ν·Σ|g|` and its subgradient `ν·sign(g)`, with `sign(0) = 0`.
pub fn l0_loss_and_seed<T: Scalar>(input_grad: &Tensor4<T>, nu: f64) -> Result<(T, Tensor4<T>)> {
    if !(nu >= 0.0) {
        return Err(arg_err!("sparsity factor must be >= 0, got {nu}"));
    }
    let k = T::of(nu);
    let seed = input_grad.map(|g| {
        if g > T::zero() {
            k
        } else if g < T::zero() {
            -k
        } else {
            T::zero()
        }
    });
    Ok((k * input_grad.abs_sum(), seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Dims;

    #[test]
    fn mse_cases() {
        let (l, g) = mse_loss(&[0.3, -1.0], &[0.3, -1.0]).unwrap();
        assert_eq!((l, g), (0.0, vec![0.0, 0.0]));
        let (l, g) = mse_loss(&[0.6f64], &[1.0]).unwrap();
        assert!((l - 0.16).abs() < 1e-15);
        assert!((g[0] + 0.8).abs() < 1e-15);
        assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mse_loop_oracle() {
        let mut rng = Rng::new(5);
        let p: Vec<f64> = (0..17).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..17).map(|_| rng.normal()).collect();
        let (l, g) = mse_loss(&p, &y).unwrap();
        let mut want = 0.0;
        for i in 0..17 {
            want += (p[i] - y[i]).powi(2) / 17.0;
            let gi = 2.0 * (p[i] - y[i]) / 17.0;
            assert!((g[i] - gi).abs() <= 1e-12 * gi.abs());
        }
        assert!((l - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn l0_cases() {
        let z = Tensor4::<f64>::zeros(Dims::new(1, 2, 2, 1));
        let (l, s) = l0_loss_and_seed(&z, 0.5).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(s, z);

        let g = Tensor4::<f64>::from_vec(Dims::new(1, 2, 1, 1), vec![0.5, -2.0]).unwrap();
        let (l, s) = l0_loss_and_seed(&g, 0.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(s.data().iter().all(|&v| v == 0.0));

        let (l, s) = l0_loss_and_seed(&g, 1e-3).unwrap();
        assert!((l - 2.5e-3).abs() < 1e-15);
        assert_eq!(s.data(), &[1e-3, -1e-3]);
        assert!(l0_loss_and_seed(&g, -1.0).is_err());
    }
}
