//! 3x3 same-padding convolution kernels (stride 1 and 2) with the exact
//! backward passes. Inner loops run on contiguous rows so they vectorize.

use ndarray::{ArrayD, IxDyn};

use crate::nn::tensor::Real;

pub const KERNEL: usize = 3;
const PAD: usize = 1;

pub fn output_hw(h: usize, w: usize, stride: usize) -> (usize, usize) {
    (
        (h + 2 * PAD - KERNEL) / stride + 1,
        (w + 2 * PAD - KERNEL) / stride + 1,
    )
}

/// `x (b, ci, h, w) * weight (co, ci, 3, 3) [+ bias (co)] -> (b, co, oh, ow)`
pub fn forward<F: Real>(
    x: &ArrayD<F>,
    weight: &ArrayD<F>,
    bias: Option<&ArrayD<F>>,
    stride: usize,
) -> ArrayD<F> {
    let (b, ci, h, w) = dims4(x);
    let (co, wci, kh, kw) = dims4(weight);
    assert_eq!((wci, kh, kw), (ci, KERNEL, KERNEL), "weight layout");
    let (oh, ow) = output_hw(h, w, stride);

    let mut out = ArrayD::<F>::zeros(IxDyn(&[b, co, oh, ow]));
    let xs = x.as_slice().expect("standard layout");
    let ws = weight.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("standard layout");

    for bi in 0..b {
        let x_base = bi * ci * h * w;
        for oc in 0..co {
            let out_plane = &mut os[(bi * co + oc) * oh * ow..][..oh * ow];
            if let Some(bias) = bias {
                let bv = bias[[oc]];
                out_plane.iter_mut().for_each(|o| *o = bv);
            }
            for ic in 0..ci {
                let in_plane = &xs[x_base + ic * h * w..][..h * w];
                let w_base = ((oc * ci + ic) * KERNEL) * KERNEL;
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let wv = ws[w_base + ky * KERNEL + kx];
                        if wv == F::zero() {
                            continue;
                        }
                        if stride == 1 {
                            accum_rows_s1(out_plane, in_plane, wv, h, w, ky, kx);
                        } else {
                            accum_rows_strided(out_plane, in_plane, wv, h, w, oh, ow, ky, kx, stride);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the convolution input.
pub fn backward_input<F: Real>(
    dout: &ArrayD<F>,
    weight: &ArrayD<F>,
    input_shape: (usize, usize, usize, usize),
    stride: usize,
) -> ArrayD<F> {
    let (b, ci, h, w) = input_shape;
    let (co, _, _, _) = dims4(weight);
    let (_, _, oh, ow) = dims4(dout);

    let mut din = ArrayD::<F>::zeros(IxDyn(&[b, ci, h, w]));
    let ds = dout.as_slice().expect("standard layout");
    let ws = weight.as_slice().expect("standard layout");
    let is = din.as_slice_mut().expect("standard layout");

    for bi in 0..b {
        for ic in 0..ci {
            let din_plane = &mut is[(bi * ci + ic) * h * w..][..h * w];
            for oc in 0..co {
                let dout_plane = &ds[(bi * co + oc) * oh * ow..][..oh * ow];
                let w_base = ((oc * ci + ic) * KERNEL) * KERNEL;
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let wv = ws[w_base + ky * KERNEL + kx];
                        if wv == F::zero() {
                            continue;
                        }
                        if stride == 1 {
                            scatter_rows_s1(din_plane, dout_plane, wv, h, w, ky, kx);
                        } else {
                            scatter_rows_strided(din_plane, dout_plane, wv, h, w, oh, ow, ky, kx, stride);
                        }
                    }
                }
            }
        }
    }
    din
}

/// Gradient w.r.t. the convolution weight.
pub fn backward_weight<F: Real>(
    dout: &ArrayD<F>,
    x: &ArrayD<F>,
    weight_shape: (usize, usize, usize, usize),
    stride: usize,
) -> ArrayD<F> {
    let (co, ci, _, _) = weight_shape;
    let (b, _, h, w) = dims4(x);
    let (_, _, oh, ow) = dims4(dout);

    let mut dw = ArrayD::<F>::zeros(IxDyn(&[co, ci, KERNEL, KERNEL]));
    let ds = dout.as_slice().expect("standard layout");
    let xs = x.as_slice().expect("standard layout");
    let dws = dw.as_slice_mut().expect("standard layout");

    for bi in 0..b {
        for oc in 0..co {
            let dout_plane = &ds[(bi * co + oc) * oh * ow..][..oh * ow];
            for ic in 0..ci {
                let in_plane = &xs[(bi * ci + ic) * h * w..][..h * w];
                let w_base = ((oc * ci + ic) * KERNEL) * KERNEL;
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let acc = if stride == 1 {
                            correlate_rows_s1(dout_plane, in_plane, h, w, ky, kx)
                        } else {
                            correlate_rows_strided(dout_plane, in_plane, h, w, oh, ow, ky, kx, stride)
                        };
                        let slot = &mut dws[w_base + ky * KERNEL + kx];
                        *slot = *slot + acc;
                    }
                }
            }
        }
    }
    dw
}

/// Gradient w.r.t. the bias: per-channel sum of `dout`.
pub fn backward_bias<F: Real>(dout: &ArrayD<F>) -> ArrayD<F> {
    let (b, co, oh, ow) = dims4(dout);
    let ds = dout.as_slice().expect("standard layout");
    let mut db = ArrayD::<F>::zeros(IxDyn(&[co]));
    for bi in 0..b {
        for oc in 0..co {
            let plane = &ds[(bi * co + oc) * oh * ow..][..oh * ow];
            let sum: F = plane.iter().copied().sum();
            db[[oc]] = db[[oc]] + sum;
        }
    }
    db
}

pub fn dims4<F>(a: &ArrayD<F>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected 4-d tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

// valid output-row range for a kernel row offset at stride 1
fn oy_range(h: usize, ky: usize) -> (usize, usize) {
    let lo = PAD.saturating_sub(ky);
    let hi = (h + PAD - ky).min(h);
    (lo, hi)
}

fn ox_range(w: usize, kx: usize) -> (usize, usize) {
    let lo = PAD.saturating_sub(kx);
    let hi = (w + PAD - kx).min(w);
    (lo, hi)
}

fn accum_rows_s1<F: Real>(out: &mut [F], inp: &[F], wv: F, h: usize, w: usize, ky: usize, kx: usize) {
    let (oy0, oy1) = oy_range(h, ky);
    let (ox0, ox1) = ox_range(w, kx);
    if ox0 >= ox1 {
        return;
    }
    let len = ox1 - ox0;
    for oy in oy0..oy1 {
        let iy = oy + ky - PAD;
        let orow = &mut out[oy * w + ox0..oy * w + ox1];
        let irow = &inp[iy * w + ox0 + kx - PAD..][..len];
        for (o, &x) in orow.iter_mut().zip(irow) {
            *o = x.mul_add(wv, *o);
        }
    }
}

fn scatter_rows_s1<F: Real>(din: &mut [F], dout: &[F], wv: F, h: usize, w: usize, ky: usize, kx: usize) {
    let (oy0, oy1) = oy_range(h, ky);
    let (ox0, ox1) = ox_range(w, kx);
    if ox0 >= ox1 {
        return;
    }
    let len = ox1 - ox0;
    for oy in oy0..oy1 {
        let iy = oy + ky - PAD;
        let drow = &dout[oy * w + ox0..oy * w + ox1];
        let irow = &mut din[iy * w + ox0 + kx - PAD..][..len];
        for (i, &d) in irow.iter_mut().zip(drow) {
            *i = d.mul_add(wv, *i);
        }
    }
}

fn correlate_rows_s1<F: Real>(dout: &[F], inp: &[F], h: usize, w: usize, ky: usize, kx: usize) -> F {
    let (oy0, oy1) = oy_range(h, ky);
    let (ox0, ox1) = ox_range(w, kx);
    if ox0 >= ox1 {
        return F::zero();
    }
    let len = ox1 - ox0;
    let mut acc = F::zero();
    for oy in oy0..oy1 {
        let iy = oy + ky - PAD;
        let drow = &dout[oy * w + ox0..oy * w + ox1];
        let irow = &inp[iy * w + ox0 + kx - PAD..][..len];
        let mut row_acc = F::zero();
        for (&d, &x) in drow.iter().zip(irow) {
            row_acc = d.mul_add(x, row_acc);
        }
        acc = acc + row_acc;
    }
    acc
}

// strided variants: iy = stride*oy + ky - 1, ix = stride*ox + kx - 1

fn strided_ranges(n: usize, on: usize, k: usize, stride: usize) -> (usize, usize) {
    let lo = if k < PAD { PAD - k } else { 0 }; // stride >= 1 makes index 0 reachable only for k >= 1
    let lo = lo.min(on);
    let hi = if n + PAD > k {
        (((n + PAD - k - 1) / stride) + 1).min(on)
    } else {
        0
    };
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
fn accum_rows_strided<F: Real>(
    out: &mut [F],
    inp: &[F],
    wv: F,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    ky: usize,
    kx: usize,
    stride: usize,
) {
    let (oy0, oy1) = strided_ranges(h, oh, ky, stride);
    let (ox0, ox1) = strided_ranges(w, ow, kx, stride);
    for oy in oy0..oy1 {
        let iy = stride * oy + ky - PAD;
        let orow = &mut out[oy * ow..(oy + 1) * ow];
        let ibase = iy * w;
        for ox in ox0..ox1 {
            let ix = stride * ox + kx - PAD;
            orow[ox] = inp[ibase + ix].mul_add(wv, orow[ox]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn scatter_rows_strided<F: Real>(
    din: &mut [F],
    dout: &[F],
    wv: F,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    ky: usize,
    kx: usize,
    stride: usize,
) {
    let (oy0, oy1) = strided_ranges(h, oh, ky, stride);
    let (ox0, ox1) = strided_ranges(w, ow, kx, stride);
    for oy in oy0..oy1 {
        let iy = stride * oy + ky - PAD;
        let drow = &dout[oy * ow..(oy + 1) * ow];
        let ibase = iy * w;
        for ox in ox0..ox1 {
            let ix = stride * ox + kx - PAD;
            din[ibase + ix] = drow[ox].mul_add(wv, din[ibase + ix]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn correlate_rows_strided<F: Real>(
    dout: &[F],
    inp: &[F],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    ky: usize,
    kx: usize,
    stride: usize,
) -> F {
    let (oy0, oy1) = strided_ranges(h, oh, ky, stride);
    let (ox0, ox1) = strided_ranges(w, ow, kx, stride);
    let mut acc = F::zero();
    for oy in oy0..oy1 {
        let iy = stride * oy + ky - PAD;
        let drow = &dout[oy * ow..(oy + 1) * ow];
        let ibase = iy * w;
        for ox in ox0..ox1 {
            let ix = stride * ox + kx - PAD;
            acc = drow[ox].mul_add(inp[ibase + ix], acc);
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    /// Reference convolution written as plain index arithmetic.
    fn conv_naive(
        x: &ArrayD<f64>,
        weight: &ArrayD<f64>,
        bias: Option<&ArrayD<f64>>,
        stride: usize,
    ) -> ArrayD<f64> {
        let (b, ci, h, w) = dims4(x);
        let (co, _, _, _) = dims4(weight);
        let (oh, ow) = output_hw(h, w, stride);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[b, co, oh, ow]));
        for bi in 0..b {
            for oc in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.map(|bv| bv[[oc]]).unwrap_or(0.0);
                        for ic in 0..ci {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (stride * oy + ky) as isize - 1;
                                    let ix = (stride * ox + kx) as isize - 1;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                                    {
                                        acc += x[[bi, ic, iy as usize, ix as usize]]
                                            * weight[[oc, ic, ky, kx]];
                                    }
                                }
                            }
                        }
                        out[[bi, oc, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    fn arb(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut s = seed;
        ArrayD::from_shape_fn(IxDyn(shape), |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64) / (u32::MAX as f64) - 0.5
        })
    }

    #[test]
    fn forward_matches_naive_reference() {
        for stride in [1usize, 2] {
            for (h, w) in [(6, 6), (7, 5)] {
                let x = arb(&[2, 3, h, w], 1);
                let wt = arb(&[4, 3, 3, 3], 2);
                let bias = arb(&[4], 3);
                let fast = forward(&x, &wt, Some(&bias), stride);
                let slow = conv_naive(&x, &wt, Some(&bias), stride);
                let diff = (&fast - &slow).mapv(f64::abs).sum();
                assert!(diff < 1e-12, "stride {stride} ({h},{w}): diff {diff}");
            }
        }
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = arb(&[1, 1, 8, 8], 9);
        let mut wt = ArrayD::<f64>::zeros(IxDyn(&[1, 1, 3, 3]));
        wt[[0, 0, 1, 1]] = 1.0;
        let y = forward(&x, &wt, None, 1);
        assert_eq!(y, x);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let stride = 2;
        let x = arb(&[1, 2, 5, 5], 4);
        let wt = arb(&[3, 2, 3, 3], 5);
        let dout_shape = {
            let (oh, ow) = output_hw(5, 5, stride);
            [1, 3, oh, ow]
        };
        let dout = arb(&dout_shape, 6);

        let din = backward_input(&dout, &wt, (1, 2, 5, 5), stride);
        let dw = backward_weight(&dout, &x, (3, 2, 3, 3), stride);

        let loss = |x: &ArrayD<f64>, wt: &ArrayD<f64>| -> f64 {
            let y = forward(x, wt, None, stride);
            (&y * &dout).sum()
        };
        let h = 1e-6;
        for (idx, analytic) in [(vec![0usize, 1, 2, 3], din[[0, 1, 2, 3]])] {
            let mut xp = x.clone();
            xp[IxDyn(&idx)] += h;
            let mut xm = x.clone();
            xm[IxDyn(&idx)] -= h;
            let fd = (loss(&xp, &wt) - loss(&xm, &wt)) / (2.0 * h);
            assert!((analytic - fd).abs() < 1e-6, "din {analytic} vs {fd}");
        }
        for (idx, analytic) in [(vec![2usize, 1, 0, 2], dw[[2, 1, 0, 2]])] {
            let mut wp = wt.clone();
            wp[IxDyn(&idx)] += h;
            let mut wm = wt.clone();
            wm[IxDyn(&idx)] -= h;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
            assert!((analytic - fd).abs() < 1e-6, "dw {analytic} vs {fd}");
        }
    }
}
