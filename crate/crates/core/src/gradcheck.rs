//! Central finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::{seeded_rng, ParamSet};

/// Compare analytic gradients against central differences on up to
/// `max_coords` randomly sampled parameter coordinates.
///
/// `loss_fn` must be deterministic: it is evaluated repeatedly with perturbed
/// parameters and must populate `params` gradients exactly once per call via
/// the returned loss graph. Returns the max relative error with denominator
/// max(|analytic|, |numeric|, 1e-8).
pub fn finite_diff_check<F>(
    loss_fn: F,
    params: &mut ParamSet,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::Config(format!("eps {eps} outside [1e-5, 1e-2]")));
    }
    let f0 = loss_fn(params)?;
    let f0b = loss_fn(params)?;
    if f0 != f0b {
        return Err(Error::NonDeterministic((f0 - f0b).abs()));
    }

    // collect all coordinates, then sample
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (pi, e) in params.entries().iter().enumerate() {
        for ci in 0..e.tensor.len() {
            coords.push((pi, ci));
        }
    }
    let mut rng = seeded_rng(seed);
    coords.shuffle(&mut rng);
    coords.truncate(max_coords);

    let mut max_rel = 0.0f64;
    for (pi, ci) in coords {
        let orig = params.entries()[pi].tensor.data()[ci];
        let analytic = params.entries()[pi].grad.data()[ci];

        params.entries_mut()[pi].tensor.data_mut()[ci] = orig + eps;
        let fplus = loss_fn(params)?;
        params.entries_mut()[pi].tensor.data_mut()[ci] = orig - eps;
        let fminus = loss_fn(params)?;
        params.entries_mut()[pi].tensor.data_mut()[ci] = orig;

        let numeric = (fplus - fminus) / (2.0 * eps);
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_gradient_matches() {
        // f(x) = x^2 at x = 3: analytic 6
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(3.0));
        p.entries_mut()[0].grad = Tensor::scalar(6.0);
        let err = finite_diff_check(
            |ps| {
                let x = ps.get("x").item();
                Ok(x * x)
            },
            &mut p,
            1e-3,
            10,
            1,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn constant_loss_gives_zero_error() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(1.0));
        // grads already zero
        let err = finite_diff_check(|_| Ok(42.0), &mut p, 1e-3, 10, 1).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn nondeterministic_loss_detected() {
        use std::cell::Cell;
        let counter = Cell::new(0.0f64);
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(1.0));
        let r = finite_diff_check(
            move |_| {
                counter.set(counter.get() + 1.0);
                Ok(counter.get())
            },
            &mut p,
            1e-3,
            10,
            1,
        );
        assert!(matches!(r, Err(Error::NonDeterministic(_))));
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(1.0));
        assert!(finite_diff_check(|_| Ok(0.0), &mut p, 1.0, 10, 1).is_err());
    }
}
