//! Central-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::ParamSet;

/// Compare analytic parameter gradients of the scalar loss built by `build`
/// against central finite differences at `samples` randomly chosen
/// parameter elements. Returns the maximum relative error
/// `|analytic - fd| / max(|analytic|, |fd|, 1e-12)`.
///
/// Runs in 64-bit; `build` must be a pure function of the parameters.
pub fn gradient_check<B>(
    params: &mut ParamSet<f64>,
    mut build: B,
    samples: usize,
    step: f64,
    seed: u64,
) -> Result<f64>
where
    B: FnMut(&mut Tape<f64>, &ParamSet<f64>) -> Result<NodeId>,
{
    let total = params.total_elements();
    if total == 0 {
        return Err(Error::Argument("no parameters to check".into()));
    }

    params.zero_grads();
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    let grads = tape.backward(loss)?;
    tape.accumulate_param_grads(&grads, params)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad.iter().copied().collect())
        .collect();
    params.zero_grads();

    let mut eval = |params: &ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, params)?;
        Ok(tape.scalar(loss))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let mut pi = 0;
        while flat >= params.get(pi).value.len() {
            flat -= params.get(pi).value.len();
            pi += 1;
        }

        let original = params.get(pi).value.as_slice().expect("standard layout")[flat];
        set_element(params, pi, flat, original + step);
        let up = eval(params)?;
        set_element(params, pi, flat, original - step);
        let down = eval(params)?;
        set_element(params, pi, flat, original);

        let fd = (up - down) / (2.0 * step);
        let a = analytic[pi][flat];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn set_element(params: &mut ParamSet<f64>, pi: usize, flat: usize, value: f64) {
    params
        .get_mut(pi)
        .value
        .as_slice_mut()
        .expect("standard layout")[flat] = value;
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn linear_map_with_abs_loss_checks_cleanly() {
        // loss = sum |w * x - t|: piecewise linear, exact away from kinks
        let mut params = ParamSet::<f64>::new();
        let w = params.add("w", ArrayD::from_elem(IxDyn(&[4]), 0.7));
        let x = ArrayD::from_shape_vec(IxDyn(&[4]), vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let t = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.2, 0.4, -0.1, 2.0]).unwrap();
        let err = gradient_check(
            &mut params,
            |tape, params| {
                let wn = tape.param(params, w);
                let xn = tape.constant(x.clone());
                let tn = tape.constant(t.clone());
                let prod = tape.mul(wn, xn)?;
                let diff = tape.sub(prod, tn)?;
                let a = tape.abs(diff);
                Ok(tape.sum_all(a))
            },
            8,
            1e-6,
            0,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }
}
