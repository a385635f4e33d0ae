//! Training losses and evaluation metrics.
//!
//! The mean-absolute-error risk is the Laplace maximum-likelihood objective
//! with a fixed scale; the uncertainty-aware loss frees the scale per pixel,
//! `|r| exp(-rho) + log 2 + rho` with `rho = log sigma`, and reduces to the
//! plain risk plus a constant when `rho = 0`.

pub mod metrics;
pub mod report;

use ndarray::Array4;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{NodeId, Real, Tape};

pub use metrics::{mae, psnr, ssim, ssim_with, SsimConfig};
pub use report::{pearson, uncertainty_error_report, CorrelationGroup, CorrelationReport, UncSample};

pub const LOG_SCALE_CLAMP: f64 = 10.0;

/// Scalar loss plus the per-pixel residual map for diagnostics.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub residuals: Array4<f64>,
}

/// Empirical risk `(1/N) sum_i ||x_rec_i - x_i||_1`.
pub fn mae_risk(x_rec: &Array4<f64>, x_true: &Array4<f64>) -> Result<LossValue> {
    check_batch(x_rec, x_true)?;
    let residuals = x_rec - x_true;
    let inv_n = 1.0 / x_rec.shape()[0] as f64;
    let total: f64 = residuals.iter().map(|r| r.abs()).sum();
    let value = total * inv_n;
    if !value.is_finite() {
        return Err(Error::Fault("non-finite mae risk".into()));
    }
    Ok(LossValue { value, residuals })
}

/// Uncertainty-aware risk
/// `(1/N) sum_{i,p} |r_{i,p}| exp(-rho_{i,p}) + (1/N) sum_{i,p} (log 2 + rho_{i,p})`.
pub fn uncertainty_loss(
    x_rec: &Array4<f64>,
    rho: &Array4<f64>,
    x_true: &Array4<f64>,
) -> Result<LossValue> {
    check_batch(x_rec, x_true)?;
    if rho.raw_dim() != x_rec.raw_dim() {
        return Err(Error::dimension(
            format!("log-scale map shaped {:?}", x_rec.shape()),
            format!("{:?}", rho.shape()),
        ));
    }
    if !rho.iter().all(|v| v.is_finite()) {
        return Err(Error::Fault("non-finite log-scale map".into()));
    }
    let shape = x_rec.shape();
    let (n, pixels) = (shape[0], shape[1] * shape[2] * shape[3]);
    let residuals = x_rec - x_true;

    let mut data_term = 0.0f64;
    for (r, rh) in residuals.iter().zip(rho.iter()) {
        data_term += r.abs() * (-rh).exp();
    }
    let rho_term: f64 = rho.iter().sum();
    let inv_n = 1.0 / n as f64;
    let value = (data_term + rho_term) * inv_n + pixels as f64 * std::f64::consts::LN_2;
    if !value.is_finite() {
        return Err(Error::Fault("non-finite uncertainty loss".into()));
    }
    Ok(LossValue { value, residuals })
}

/// Analytic lower bound of the uncertainty loss at the per-pixel optimal
/// scale `sigma_p = |r_p|`; zero-residual pixels contribute their clamped
/// minimum `log 2 - LOG_SCALE_CLAMP`.
pub fn uncertainty_loss_lower_bound(residuals: &Array4<f64>) -> f64 {
    let n = residuals.shape()[0] as f64;
    let total: f64 = residuals
        .iter()
        .map(|&r| {
            if r != 0.0 {
                1.0 + (2.0 * r.abs()).ln()
            } else {
                std::f64::consts::LN_2 - LOG_SCALE_CLAMP
            }
        })
        .sum();
    total / n
}

fn check_batch(x_rec: &Array4<f64>, x_true: &Array4<f64>) -> Result<()> {
    if x_rec.shape()[0] == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    if x_rec.raw_dim() != x_true.raw_dim() {
        return Err(Error::dimension(
            format!("{:?}", x_rec.shape()),
            format!("{:?}", x_true.shape()),
        ));
    }
    Ok(())
}

/// Aggregate quality metrics for one reconstruction.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_uncertainty: Option<f64>,
}

/// Differentiable loss graphs mirroring [`mae_risk`] / [`uncertainty_loss`]
/// term by term (same summation order, same reciprocal batch scaling).
pub mod graph {
    use super::*;

    /// `(1/N) sum |pred - target|` on the tape.
    pub fn mae_loss<F: Real>(
        tape: &mut Tape<F>,
        pred: NodeId,
        target: NodeId,
    ) -> Result<NodeId> {
        let batch = batch_of(tape, pred)?;
        let diff = tape.sub(pred, target)?;
        let a = tape.abs(diff);
        let total = tape.sum_all(a);
        Ok(tape.scale(total, F::one() / F::from_f64(batch as f64)))
    }

    /// Eq.-15-style loss on the tape; `rho` is the raw log-scale output
    /// (callers clamp it beforehand if desired).
    pub fn uncertainty_loss<F: Real>(
        tape: &mut Tape<F>,
        pred: NodeId,
        rho: NodeId,
        target: NodeId,
    ) -> Result<NodeId> {
        let shape = tape.value(pred).shape().to_vec();
        let batch = batch_of(tape, pred)?;
        let pixels: usize = shape[1..].iter().product();

        let diff = tape.sub(pred, target)?;
        let r = tape.abs(diff);
        let neg_rho = tape.scale(rho, -F::one());
        let inv_sigma = tape.exp(neg_rho);
        let weighted = tape.mul(r, inv_sigma)?;
        let data_term = tape.sum_all(weighted);
        let rho_term = tape.sum_all(rho);
        let total = tape.add(data_term, rho_term)?;
        let scaled = tape.scale(total, F::one() / F::from_f64(batch as f64));
        Ok(tape.add_scalar(
            scaled,
            F::from_f64(pixels as f64 * std::f64::consts::LN_2),
        ))
    }

    fn batch_of<F: Real>(tape: &Tape<F>, node: NodeId) -> Result<usize> {
        let shape = tape.value(node).shape().to_vec();
        if shape.len() != 4 || shape[0] == 0 {
            return Err(Error::Argument(
                "loss expects a nonempty (b, c, h, w) batch".into(),
            ));
        }
        Ok(shape[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn batch(vals: &[f64], shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_vec(shape, vals.to_vec()).unwrap()
    }

    #[test]
    fn mae_zero_for_identical_batches() {
        let a = batch(&[0.3, 0.7, 0.1, 0.9], (1, 1, 2, 2));
        let loss = mae_risk(&a, &a.clone()).unwrap();
        assert_eq!(loss.value, 0.0);
    }

    #[test]
    fn mae_hand_sum_single_image() {
        // residuals (1, -1, 2, 0), N = 1 -> 4
        let rec = batch(&[1.0, 0.0, 3.0, 0.5], (1, 1, 2, 2));
        let truth = batch(&[0.0, 1.0, 1.0, 0.5], (1, 1, 2, 2));
        let loss = mae_risk(&rec, &truth).unwrap();
        assert_eq!(loss.value, 4.0);
    }

    #[test]
    fn mae_rejects_empty_batch() {
        let a = Array4::<f64>::zeros((0, 1, 2, 2));
        assert!(matches!(mae_risk(&a, &a.clone()), Err(Error::Argument(_))));
    }

    #[test]
    fn unc_loss_with_zero_rho_reduces_to_mae_plus_constant() {
        let rec = batch(&[1.0, 0.2, -0.3, 0.8, 0.0, 2.0], (2, 1, 1, 3));
        let truth = batch(&[0.5, 0.3, 0.0, 1.0, -1.0, 2.5], (2, 1, 1, 3));
        let rho = Array4::zeros((2, 1, 1, 3));
        let unc = uncertainty_loss(&rec, &rho, &truth).unwrap();
        let mae = mae_risk(&rec, &truth).unwrap();
        let constant = 3.0 * std::f64::consts::LN_2;
        assert!((unc.value - (mae.value + constant)).abs() < 1e-12);
    }

    #[test]
    fn unc_loss_single_pixel_analytic_minimum() {
        // r = 2 fixed: minimizing |r| e^{-rho} + log 2 + rho over rho gives
        // rho* = log 2 and value 1 + log 4
        let rec = batch(&[2.0], (1, 1, 1, 1));
        let truth = batch(&[0.0], (1, 1, 1, 1));
        let opt = batch(&[2.0f64.ln()], (1, 1, 1, 1));
        let at_opt = uncertainty_loss(&rec, &opt, &truth).unwrap().value;
        assert!((at_opt - (1.0 + 4.0f64.ln())).abs() < 1e-12);
        // nearby rho values are worse
        for d in [-0.3, -0.05, 0.05, 0.3] {
            let nearby = batch(&[2.0f64.ln() + d], (1, 1, 1, 1));
            let v = uncertainty_loss(&rec, &nearby, &truth).unwrap().value;
            assert!(v > at_opt);
        }
    }

    #[test]
    fn unc_loss_rejects_non_finite_rho() {
        let rec = batch(&[1.0], (1, 1, 1, 1));
        let truth = batch(&[0.0], (1, 1, 1, 1));
        let rho = batch(&[f64::INFINITY], (1, 1, 1, 1));
        assert!(matches!(
            uncertainty_loss(&rec, &rho, &truth),
            Err(Error::Fault(_))
        ));
    }

    #[test]
    fn unc_loss_respects_analytic_lower_bound() {
        let rec = batch(&[1.0, 0.2, -0.3, 0.8, 0.0, 2.0], (2, 1, 1, 3));
        let truth = batch(&[0.5, 0.3, 0.0, 1.0, 0.0, 2.5], (2, 1, 1, 3));
        for rho_val in [-0.5, 0.0, 0.7] {
            let rho = Array4::from_elem((2, 1, 1, 3), rho_val);
            let loss = uncertainty_loss(&rec, &rho, &truth).unwrap();
            let bound = uncertainty_loss_lower_bound(&loss.residuals);
            assert!(
                loss.value >= bound - 1e-12,
                "value {} under bound {}",
                loss.value,
                bound
            );
        }
    }

    #[test]
    fn graph_losses_match_plain_evaluation() {
        let rec = batch(&[1.0, 0.2, -0.3, 0.8], (2, 1, 1, 2));
        let truth = batch(&[0.5, 0.3, 0.0, 1.0], (2, 1, 1, 2));
        let rho = batch(&[0.2, -0.4, 0.0, 1.0], (2, 1, 1, 2));

        let mut tape = Tape::<f64>::new();
        let p = tape.constant(rec.clone().into_dyn());
        let t = tape.constant(truth.clone().into_dyn());
        let r = tape.constant(rho.clone().into_dyn());
        let mae_node = graph::mae_loss(&mut tape, p, t).unwrap();
        let unc_node = graph::uncertainty_loss(&mut tape, p, r, t).unwrap();

        assert_eq!(tape.scalar(mae_node), mae_risk(&rec, &truth).unwrap().value);
        assert_eq!(
            tape.scalar(unc_node),
            uncertainty_loss(&rec, &rho, &truth).unwrap().value
        );
    }

    #[test]
    fn unc_loss_gradient_wrt_rho_matches_finite_differences() {
        // d/drho (|r| e^{-rho} + log2 + rho) = -|r| e^{-rho} + 1
        let rec = batch(&[1.0, -0.5, 0.25, 2.0], (1, 1, 2, 2));
        let truth = batch(&[0.2, 0.1, 0.5, 1.0], (1, 1, 2, 2));
        let rho0 = batch(&[0.3, -0.2, 0.0, 0.8], (1, 1, 2, 2));

        let mut tape = Tape::<f64>::new();
        let p = tape.constant(rec.clone().into_dyn());
        let t = tape.constant(truth.clone().into_dyn());
        let r = tape.variable(rho0.clone().into_dyn());
        let loss = graph::uncertainty_loss(&mut tape, p, r, t).unwrap();
        let grads = tape.backward(loss).unwrap();
        let grad_rho = grads.get(r).unwrap().clone();

        let h = 1e-7;
        for idx in 0..4 {
            let mut up = rho0.clone();
            up.as_slice_mut().unwrap()[idx] += h;
            let mut dn = rho0.clone();
            dn.as_slice_mut().unwrap()[idx] -= h;
            let fd = (uncertainty_loss(&rec, &up, &truth).unwrap().value
                - uncertainty_loss(&rec, &dn, &truth).unwrap().value)
                / (2.0 * h);
            let analytic = grad_rho[IxDyn(&[0, 0, idx / 2, idx % 2])];
            assert!(
                (analytic - fd).abs() <= 1e-6 * analytic.abs().max(fd.abs()).max(1.0),
                "idx {idx}: {analytic} vs {fd}"
            );
            // closed form
            let r_abs = (rec.as_slice().unwrap()[idx] - truth.as_slice().unwrap()[idx]).abs();
            let expected = -r_abs * (-rho0.as_slice().unwrap()[idx]).exp() + 1.0;
            assert!((analytic - expected).abs() < 1e-12);
        }
    }
}
