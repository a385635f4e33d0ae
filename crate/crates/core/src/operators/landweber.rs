//! Landweber iteration: gradient descent on the data discrepancy, converging
//! to the projection of its initializer onto the solution set of `A x = y`.

use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::{LinearMap, OpKind};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LandweberConfig {
    /// Iteration count J.
    pub steps: usize,
    /// Constant stepsize lambda.
    pub stepsize: f64,
    /// Suppress the stability warning for stepsizes above 2/||A||^2.
    #[serde(default)]
    pub allow_unstable: bool,
}

impl LandweberConfig {
    pub fn new(steps: usize, stepsize: f64) -> Self {
        LandweberConfig {
            steps,
            stepsize,
            allow_unstable: false,
        }
    }

    /// Study defaults: 15 iterations; stepsize 1 for the unitary-row Fourier
    /// operator, 0.003 for the Radon study, 1/||A||^2 otherwise.
    pub fn default_for(op: &LinearMap) -> Self {
        let stepsize = match op.kind() {
            OpKind::MaskedFourier(_) => 1.0,
            OpKind::LimitedAngleRadon(_) => 0.003,
            OpKind::Dense(_) => 1.0 / op.opnorm_est().powi(2),
        };
        LandweberConfig::new(15, stepsize)
    }
}

/// Runs `x_{j+1} = x_j - lambda A*(A x_j - y)` from `x0`.
///
/// Consistent data and enough iterations yield the nearest point to `x0`
/// in the solution set. Residual growth past 10x the initial residual is
/// reported as divergence.
pub fn landweber_project(
    op: &LinearMap,
    x0: &Array3<f64>,
    y: &Array1<f64>,
    cfg: &LandweberConfig,
) -> Result<Array3<f64>> {
    op.check_domain(x0)?;
    op.check_range(y)?;

    let bound = 2.0 / op.opnorm_est().powi(2);
    if cfg.stepsize > bound && !cfg.allow_unstable {
        log::warn!(
            "landweber stepsize {} exceeds stability bound 2/||A||^2 = {:.3e}",
            cfg.stepsize,
            bound
        );
    }

    let mut x = x0.clone();
    let mut initial = None;
    for _ in 0..cfg.steps {
        let residual = &op.apply(&x)? - y;
        let rnorm = norm(&residual);
        let r0 = *initial.get_or_insert(rnorm);
        if rnorm > 10.0 * r0 && rnorm > 1e-12 {
            return Err(Error::Divergence {
                stepsize: cfg.stepsize,
                initial: r0,
                current: rnorm,
            });
        }
        let grad = op.adjoint(&residual)?;
        x.zip_mut_with(&grad, |xi, &gi| *xi -= cfg.stepsize * gi);
    }
    Ok(x)
}

/// Power iteration estimate of ||A|| on A*A. Deterministic in `seed`.
pub fn estimate_opnorm(op: &LinearMap, iters: usize, seed: u64) -> Result<f64> {
    if iters < 10 {
        return Err(Error::Argument(format!(
            "power iteration needs at least 10 iterations, got {iters}"
        )));
    }
    let shape = op.domain_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Array3::from_shape_fn(shape.tuple(), |_| rng.random::<f64>() - 0.5);
    let n0 = norm3(&v);
    if n0 == 0.0 {
        return Ok(0.0);
    }
    v.mapv_inplace(|e| e / n0);

    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = op.adjoint(&op.apply(&v)?)?;
        lambda = norm3(&w);
        if lambda == 0.0 {
            return Ok(0.0);
        }
        v = w / lambda;
    }
    Ok(lambda.sqrt())
}

fn norm(v: &Array1<f64>) -> f64 {
    v.iter().map(|e| e * e).sum::<f64>().sqrt()
}

fn norm3(v: &Array3<f64>) -> f64 {
    v.iter().map(|e| e * e).sum::<f64>().sqrt()
}
