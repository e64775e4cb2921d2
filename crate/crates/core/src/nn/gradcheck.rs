use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Gradients, Model, NnError, Scalar, Tensor};

/// Absolute floor of the relative-error denominator; gradients below it are
/// compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Finite-difference derivative of the loss with respect to one parameter
/// entry, using the fourth-order central stencil
/// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.
fn numeric_derivative<T: Scalar>(
    model: &mut Model<T>,
    batch: &Tensor<T>,
    labels: &[u8],
    param: usize,
    coord: usize,
    eps: f64,
) -> Result<f64, NnError> {
    let orig = model.params()[param].data()[coord];
    let mut at = |delta: f64| -> Result<f64, NnError> {
        model.params_mut()[param].data_mut()[coord] = T::from_f64(orig.as_f64() + delta);
        Ok(model.loss(batch, labels)?.as_f64())
    };
    let d = (-at(2.0 * eps)? + 8.0 * at(eps)? - 8.0 * at(-eps)? + at(-2.0 * eps)?) / (12.0 * eps);
    model.params_mut()[param].data_mut()[coord] = orig;
    Ok(d)
}

/// Largest relative error between `analytic` and central finite
/// differences at up to `coords` random entries of every parameter tensor.
pub fn grad_check_against<T: Scalar>(
    model: &Model<T>,
    batch: &Tensor<T>,
    labels: &[u8],
    analytic: &Gradients<T>,
    eps: f64,
    coords: usize,
    seed: u64,
) -> Result<f64, NnError> {
    let mut probe = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for p in 0..model.params().len() {
        let len = model.params()[p].len();
        let picks: Vec<usize> = if len <= coords {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, coords).into_vec()
        };
        for c in picks {
            let fd = numeric_derivative(&mut probe, batch, labels, p, c, eps)?;
            let a = analytic.tensors[p].data()[c].as_f64();
            let denom = a.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max((a - fd).abs() / denom);
        }
    }
    Ok(worst)
}

/// Compares [`Model::backward`] against finite differences. Intended for
/// `f64` models; the loss is evaluated in the model's current mode.
pub fn grad_check<T: Scalar>(
    model: &Model<T>,
    batch: &Tensor<T>,
    labels: &[u8],
    eps: f64,
    coords: usize,
    seed: u64,
) -> Result<f64, NnError> {
    let analytic = model.backward(batch, labels)?;
    grad_check_against(model, batch, labels, &analytic, eps, coords, seed)
}

/// Finite-difference check of [`Model::input_gradient`] at `coords` random
/// input entries; returns the largest relative error.
pub fn input_grad_check<T: Scalar>(
    model: &Model<T>,
    batch: &Tensor<T>,
    labels: &[u8],
    eps: f64,
    coords: usize,
    seed: u64,
) -> Result<f64, NnError> {
    let analytic = model.input_gradient(batch, labels, model.mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let idx = rng.random_range(0..batch.len());
        let at = |delta: f64| -> Result<f64, NnError> {
            let mut b = batch.clone();
            let v = b.data()[idx].as_f64();
            b.data_mut()[idx] = T::from_f64(v + delta);
            Ok(model.loss(&b, labels)?.as_f64())
        };
        let fd =
            (-at(2.0 * eps)? + 8.0 * at(eps)? - 8.0 * at(-eps)? + at(-2.0 * eps)?) / (12.0 * eps);
        let a = analytic.data()[idx].as_f64();
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR));
    }
    Ok(worst)
}
