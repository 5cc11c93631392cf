//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;

use super::{Mlp, ParamSet, WeightedBatch};
use crate::error::{Error, Result};
use crate::lineage::Rng;

pub const MIN_CHECKED_PARAMS: usize = 200;

/// Flat indices to check: all of them for small sets, otherwise a random
/// subsample of `MIN_CHECKED_PARAMS`.
pub fn sample_indices(n_params: usize, rng: &mut Rng) -> Vec<usize> {
    if n_params <= MIN_CHECKED_PARAMS {
        return (0..n_params).collect();
    }
    let mut idx = sample(rng, n_params, MIN_CHECKED_PARAMS).into_vec();
    idx.sort_unstable();
    idx
}

/// Largest relative error between `analytic` and central differences of
/// `loss` at the given flat indices. The denominator is
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn check_gradient<F>(
    params: &ParamSet,
    analytic: &ParamSet,
    mut loss: F,
    h: f64,
    indices: &[usize],
) -> Result<f64>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "step {h} outside (0, 1e-2]"
        )));
    }
    if !params.same_shape(analytic) {
        return Err(Error::Shape("gradient does not match parameters".into()));
    }
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for &i in indices {
        let x = params.flat_get(i);
        probe.flat_set(i, x + h);
        let up = loss(&probe)?;
        probe.flat_set(i, x - h);
        let down = loss(&probe)?;
        probe.flat_set(i, x);
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.flat_get(i);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Checks [`Mlp::backward`] on `batch` against central differences.
pub fn finite_diff_gradcheck(
    net: &Mlp,
    batch: &WeightedBatch,
    h: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let (_, analytic) = net.backward(batch)?;
    let indices = sample_indices(analytic.len(), rng);
    let arch = net.arch().clone();
    check_gradient(
        net.params(),
        &analytic,
        |p| Mlp::new(arch.clone(), p.clone())?.loss(batch),
        h,
        &indices,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lineage::rng_from_seed;
    use crate::tensornet::{Activation, MlpArch};
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn batch(rng: &mut Rng, n: usize, din: usize, dout: usize) -> WeightedBatch {
        let v = |rng: &mut Rng, d: usize| {
            (0..d)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        WeightedBatch {
            inputs: (0..n).map(|_| v(rng, din)).collect(),
            targets: (0..n).map(|_| v(rng, dout)).collect(),
            weights: (0..n).map(|_| rng.random_range(0.2..1.0)).collect(),
        }
    }

    #[test]
    fn one_hidden_linear_like_net_is_exact() {
        // With relu on positive pre-activations and a quadratic loss the
        // central difference is exact up to rounding.
        let arch = MlpArch::new(vec![3, 4, 2], Activation::Relu).unwrap();
        let mut net = Mlp::init(arch, &mut rng_from_seed(1)).unwrap();
        for t in net.params_mut().tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = v.abs() + 0.1);
        }
        let mut rng = rng_from_seed(2);
        let mut b = batch(&mut rng, 4, 3, 2);
        b.inputs.iter_mut().flatten().for_each(|v| *v = v.abs());
        let err = finite_diff_gradcheck(&net, &b, 1e-4, &mut rng).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn two_hidden_tanh_net() {
        let arch = MlpArch::new(vec![6, 16, 16, 4], Activation::Tanh).unwrap();
        let net = Mlp::init(arch, &mut rng_from_seed(3)).unwrap();
        let mut rng = rng_from_seed(4);
        let b = batch(&mut rng, 5, 6, 4);
        let err = finite_diff_gradcheck(&net, &b, 1e-5, &mut rng).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let arch = MlpArch::new(vec![3, 5, 2], Activation::Tanh).unwrap();
        let net = Mlp::init(arch, &mut rng_from_seed(5)).unwrap();
        let mut rng = rng_from_seed(6);
        let b = batch(&mut rng, 3, 3, 2);
        let (_, mut g) = net.backward(&b).unwrap();
        // corrupt the entry with the largest magnitude
        let (idx, _) = g
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        g.flat_set(idx, 2.0 * g.flat_get(idx));
        let indices = sample_indices(g.len(), &mut rng);
        let arch = net.arch().clone();
        let err = check_gradient(
            net.params(),
            &g,
            |p| Mlp::new(arch.clone(), p.clone())?.loss(&b),
            1e-5,
            &indices,
        )
        .unwrap();
        assert!(err > 0.3, "{err}");
    }

    #[test]
    fn step_range_enforced() {
        let arch = MlpArch::new(vec![2, 2, 1], Activation::Tanh).unwrap();
        let net = Mlp::init(arch, &mut rng_from_seed(0)).unwrap();
        let mut rng = rng_from_seed(0);
        let b = batch(&mut rng, 1, 2, 1);
        assert!(finite_diff_gradcheck(&net, &b, 0.0, &mut rng).is_err());
        assert!(finite_diff_gradcheck(&net, &b, 0.1, &mut rng).is_err());
    }

    #[test]
    fn large_nets_are_subsampled() {
        let mut rng = rng_from_seed(0);
        let idx = sample_indices(10_000, &mut rng);
        assert_eq!(idx.len(), MIN_CHECKED_PARAMS);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_indices(13, &mut rng), (0..13).collect::<Vec<_>>());
    }
}
