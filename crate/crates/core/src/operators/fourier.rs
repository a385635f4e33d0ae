//! Subsampled Fourier forward model `A = S F` with unitary 2-D DFT.
//!
//! The binary mask keeps whole k-space lines (rows). Because the retained
//! rows of the unitary transform are orthonormal, `A A* = Id` on the
//! retained coefficients and the Moore-Penrose inverse is exactly `A*`.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub struct MaskedFourierOp {
    n: usize,
    /// Sorted retained k-space line (spectrum row) indices.
    lines: Vec<usize>,
    line_mask: Vec<bool>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MaskedFourierOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MaskedFourierOp")
            .field("n", &self.n)
            .field("kept_lines", &self.lines.len())
            .finish()
    }
}

impl MaskedFourierOp {
    pub fn new(n: usize, mut lines: Vec<usize>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Argument("grid must be nonzero".into()));
        }
        lines.sort_unstable();
        lines.dedup();
        if lines.is_empty() || *lines.last().unwrap() >= n {
            return Err(Error::Argument(format!(
                "mask lines must be a nonempty subset of 0..{n}"
            )));
        }
        let mut line_mask = vec![false; n];
        for &l in &lines {
            line_mask[l] = true;
        }
        let mut planner = FftPlanner::new();
        Ok(MaskedFourierOp {
            n,
            lines,
            line_mask,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        })
    }

    /// Full sampling; the operator becomes unitary.
    pub fn full(n: usize) -> Result<Self> {
        Self::new(n, (0..n).collect())
    }

    /// Random line mask: the `center_fraction` lowest-frequency lines are
    /// always kept, the rest are drawn uniformly until `kept_fraction` of
    /// all lines is reached. Deterministic in `seed`.
    pub fn sampled(n: usize, kept_fraction: f64, center_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&kept_fraction) || kept_fraction <= 0.0 {
            return Err(Error::Argument(format!(
                "kept_fraction must be in (0, 1], got {kept_fraction}"
            )));
        }
        let total = ((kept_fraction * n as f64).round() as usize).clamp(1, n);
        let center = ((center_fraction * n as f64).round() as usize).min(total).max(1);

        // Wrapped distance to the zero-frequency line.
        let mut by_freq: Vec<usize> = (0..n).collect();
        by_freq.sort_by_key(|&i| (i.min(n - i), i));
        let mut keep: Vec<usize> = by_freq[..center].to_vec();

        let mut rest: Vec<usize> = by_freq[center..].to_vec();
        rest.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rest.shuffle(&mut rng);
        keep.extend(rest.into_iter().take(total - center));
        Self::new(n, keep)
    }

    pub fn grid(&self) -> usize {
        self.n
    }

    pub fn lines(&self) -> &[usize] {
        &self.lines
    }

    pub fn kept_fraction(&self) -> f64 {
        self.lines.len() as f64 / self.n as f64
    }

    pub fn range_len(&self) -> usize {
        2 * self.lines.len() * self.n
    }

    fn to_complex(&self, x: &Array3<f64>) -> Array2<Complex64> {
        let n = self.n;
        Array2::from_shape_fn((n, n), |(r, c)| Complex64::new(x[[0, r, c]], x[[1, r, c]]))
    }

    fn to_channels(&self, z: &Array2<Complex64>) -> Array3<f64> {
        let n = self.n;
        let mut out = Array3::zeros((2, n, n));
        for r in 0..n {
            for c in 0..n {
                out[[0, r, c]] = z[[r, c]].re;
                out[[1, r, c]] = z[[r, c]].im;
            }
        }
        out
    }

    /// In-place unitary 2-D DFT (forward when `inverse` is false).
    fn fft2(&self, z: &mut Array2<Complex64>, inverse: bool) {
        let n = self.n;
        let plan = if inverse { &self.inv } else { &self.fwd };
        for mut row in z.rows_mut() {
            plan.process(row.as_slice_mut().expect("row-major grid"));
        }
        let mut col = vec![Complex64::default(); n];
        for c in 0..n {
            for r in 0..n {
                col[r] = z[[r, c]];
            }
            plan.process(&mut col);
            for r in 0..n {
                z[[r, c]] = col[r];
            }
        }
        let scale = 1.0 / n as f64;
        z.mapv_inplace(|v| v * scale);
    }

    pub fn apply(&self, x: &Array3<f64>) -> Array1<f64> {
        let mut z = self.to_complex(x);
        self.fft2(&mut z, false);
        let n = self.n;
        let mut y = Array1::zeros(self.range_len());
        for (li, &l) in self.lines.iter().enumerate() {
            for c in 0..n {
                let v = z[[l, c]];
                y[2 * (li * n + c)] = v.re;
                y[2 * (li * n + c) + 1] = v.im;
            }
        }
        y
    }

    pub fn adjoint(&self, y: &Array1<f64>) -> Array3<f64> {
        let n = self.n;
        let mut z = Array2::from_elem((n, n), Complex64::default());
        for (li, &l) in self.lines.iter().enumerate() {
            for c in 0..n {
                z[[l, c]] = Complex64::new(y[2 * (li * n + c)], y[2 * (li * n + c) + 1]);
            }
        }
        self.fft2(&mut z, true);
        self.to_channels(&z)
    }

    /// `P0 x = F* (Id - S) F x`, exact up to the unitary transform pair.
    pub fn null_space_project(&self, x: &Array3<f64>) -> Array3<f64> {
        let mut z = self.to_complex(x);
        self.fft2(&mut z, false);
        for (r, keep) in self.line_mask.iter().enumerate() {
            if *keep {
                for c in 0..self.n {
                    z[[r, c]] = Complex64::default();
                }
            }
        }
        self.fft2(&mut z, true);
        self.to_channels(&z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(n: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((2, n, n), |_| rng.random::<f64>() - 0.5)
    }

    #[test]
    fn full_mask_roundtrip_is_identity() {
        let op = MaskedFourierOp::full(16).unwrap();
        let x = random_image(16, 3);
        let back = op.adjoint(&op.apply(&x));
        let rel = (&back - &x).mapv(f64::abs).sum() / x.mapv(f64::abs).sum();
        assert!(rel < 1e-12, "rel {rel}");
    }

    #[test]
    fn rows_are_orthonormal() {
        // A A* = Id on retained coefficients
        let op = MaskedFourierOp::sampled(16, 0.25, 0.08, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y = Array1::from_shape_fn(op.range_len(), |_| rng.random::<f64>() - 0.5);
        let back = op.apply(&op.adjoint(&y));
        let rel = (&back - &y).mapv(f64::abs).sum() / y.mapv(f64::abs).sum();
        assert!(rel < 1e-12, "rel {rel}");
    }

    #[test]
    fn sampled_mask_keeps_center_and_is_deterministic() {
        let op1 = MaskedFourierOp::sampled(64, 0.25, 0.08, 7).unwrap();
        let op2 = MaskedFourierOp::sampled(64, 0.25, 0.08, 7).unwrap();
        assert_eq!(op1.lines(), op2.lines());
        assert_eq!(op1.lines().len(), 16);
        // the 5 lowest-frequency lines (8% of 64) must be present
        for l in [0usize, 1, 63, 2, 62] {
            assert!(op1.lines().contains(&l), "central line {l} missing");
        }
        let other = MaskedFourierOp::sampled(64, 0.25, 0.08, 8).unwrap();
        assert_ne!(op1.lines(), other.lines());
    }

    #[test]
    fn full_mask_null_space_is_trivial() {
        let op = MaskedFourierOp::full(8).unwrap();
        let x = random_image(8, 5);
        let p = op.null_space_project(&x);
        assert!(p.mapv(f64::abs).sum() < 1e-12);
    }
}
