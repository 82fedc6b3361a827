use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences at every coordinate of every input.
///
/// Returns `max |analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, inputs, h, usize::MAX, 0)
}

/// Like [`grad_check`], but probes at most `max_coords` seeded coordinates
/// per input tensor. Useful for whole networks.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor], record_grad: bool| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(record_grad)))
            .collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out).item()?;
        if !record_grad {
            return Ok((value, vec![]));
        }
        tape.backward(out)?;
        let grads = vars.iter().map(|v| tape.grad(*v).map(<[f64]>::to_vec)).collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut picked = sample(&mut rng, n, max_coords).into_vec();
            picked.sort_unstable();
            picked
        };
        for i in coords {
            let base = input.data()[i];
            probe[which].data_mut()[i] = base + h;
            let (plus, _) = eval(&probe, false)?;
            probe[which].data_mut()[i] = base - h;
            let (minus, _) = eval(&probe, false)?;
            probe[which].data_mut()[i] = base;
            let numeric = (plus - minus) / (2.0 * h);
            let exact = analytic[which].as_ref().map_or(0.0, |g| g[i]);
            let err = (exact - numeric).abs() / exact.abs().max(1.0);
            if !err.is_finite() {
                return Err(Error::NonFinite { op: "grad_check" });
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        // Dyadic inputs and step keep every perturbed sum exactly representable.
        let x = Tensor::from_fn(&[3, 2], |i| i as f64 * 0.75 - 1.0);
        let err = grad_check(|t, v| t.sum(v[0]), &[x], 1.0 / 65536.0).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sum_of_squares_is_within_central_difference_error() {
        let x = Tensor::from_fn(&[5], |i| i as f64 * 0.3 - 0.6);
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }
}
