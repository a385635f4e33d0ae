//! Wengert-list reverse-mode differentiation over dense tensors.
//!
//! A forward pass appends nodes to the tape; `backward` walks it in reverse
//! and accumulates gradients for every reachable parameter leaf. Tensors are
//! `(batch, channels, h, w)` activations, conv weights, biases or scalars.

use std::sync::Arc;

use ndarray::{ArrayD, ArrayView4, Axis, IxDyn, Slice};

use crate::error::{Error, Result};
use crate::nn::conv;
use crate::nn::tensor::{ParamSet, Real};

pub type NodeId = usize;

/// Self-adjoint, idempotent linear image map applied per batch item in
/// double precision (the null-space projector in practice).
pub trait BatchProjector: Send + Sync {
    /// Domain `(channels, h, w)` the projector acts on.
    fn domain(&self) -> (usize, usize, usize);
    fn project_batch(&self, x: ArrayView4<'_, f64>) -> ndarray::Array4<f64>;
}

enum Op<F> {
    Constant,
    Param(usize),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
    },
    LeakyRelu {
        input: NodeId,
        slope: F,
    },
    Upsample2x {
        input: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Abs {
        input: NodeId,
    },
    Exp {
        input: NodeId,
    },
    Scale {
        input: NodeId,
        factor: F,
    },
    AddScalar {
        input: NodeId,
        #[allow(dead_code)]
        value: F,
    },
    Clamp {
        input: NodeId,
        lo: F,
        hi: F,
    },
    SumAll {
        input: NodeId,
    },
    Project {
        input: NodeId,
        projector: Arc<dyn BatchProjector>,
    },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Upsample2x { .. } => "upsample2x",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Abs { .. } => "abs",
            Op::Exp { .. } => "exp",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Clamp { .. } => "clamp",
            Op::SumAll { .. } => "sum_all",
            Op::Project { .. } => "project",
        }
    }
}

struct Node<F> {
    value: ArrayD<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recorded forward computation.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads<F> {
    inner: Vec<Option<ArrayD<F>>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<F>> {
        self.inner.get(id).and_then(|g| g.as_ref())
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<F> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> F {
        let v = &self.nodes[id].value;
        assert!(v.ndim() == 0, "node {} is not a scalar", id);
        *v.first().expect("scalar node")
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn constant(&mut self, value: ArrayD<F>) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    /// Gradient-tracked leaf that is not tied to a parameter; its gradient
    /// is read back from [`Grads::get`].
    pub fn variable(&mut self, value: ArrayD<F>) -> NodeId {
        self.push(value, Op::Constant, true)
    }

    /// Leaf tracking gradients for `params[idx]`.
    pub fn param(&mut self, params: &ParamSet<F>, idx: usize) -> NodeId {
        self.push(params.get(idx).value.clone(), Op::Param(idx), true)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        if x.ndim() != 4 || w.ndim() != 4 {
            return Err(Error::dimension("4-d input and weight", "other rank"));
        }
        let (_, ci, _, _) = conv::dims4(x);
        let (co, wci, kh, kw) = conv::dims4(w);
        if wci != ci || kh != conv::KERNEL || kw != conv::KERNEL {
            return Err(Error::dimension(
                format!("weight ({co}, {ci}, 3, 3)"),
                format!("{:?}", w.shape()),
            ));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::Argument(format!("unsupported stride {stride}")));
        }
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.ndim() != 1 || bv.len() != co {
                return Err(Error::dimension(format!("bias ({co})"), format!("{:?}", bv.shape())));
            }
        }
        let out = conv::forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
        );
        let req = self.requires(input)
            || self.requires(weight)
            || bias.map(|b| self.requires(b)).unwrap_or(false);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            },
            req,
        ))
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: F) -> NodeId {
        let out = self
            .value(input)
            .mapv(|v| if v > F::zero() { v } else { v * slope });
        let req = self.requires(input);
        self.push(out, Op::LeakyRelu { input, slope }, req)
    }

    pub fn upsample2x(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        if x.ndim() != 4 {
            return Err(Error::dimension("4-d input", "other rank"));
        }
        let (b, c, h, w) = conv::dims4(x);
        let mut out = ArrayD::<F>::zeros(IxDyn(&[b, c, 2 * h, 2 * w]));
        {
            let xs = x.as_slice().expect("standard layout");
            let os = out.as_slice_mut().expect("standard layout");
            let (oh, ow) = (2 * h, 2 * w);
            for plane in 0..b * c {
                let ip = &xs[plane * h * w..][..h * w];
                let op_ = &mut os[plane * oh * ow..][..oh * ow];
                for y in 0..h {
                    for x_ in 0..w {
                        let v = ip[y * w + x_];
                        let base = 2 * y * ow + 2 * x_;
                        op_[base] = v;
                        op_[base + 1] = v;
                        op_[base + ow] = v;
                        op_[base + ow + 1] = v;
                    }
                }
            }
        }
        let req = self.requires(input);
        Ok(self.push(out, Op::Upsample2x { input }, req))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 4 || vb.ndim() != 4 {
            return Err(Error::dimension("4-d inputs", "other rank"));
        }
        let da = conv::dims4(va);
        let db = conv::dims4(vb);
        if (da.0, da.2, da.3) != (db.0, db.2, db.3) {
            return Err(Error::dimension(
                format!("matching batch/spatial dims {da:?}"),
                format!("{db:?}"),
            ));
        }
        let out = ndarray::concatenate(Axis(1), &[va.view(), vb.view()])
            .expect("checked dims")
            .as_standard_layout()
            .to_owned();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::ConcatChannels { a, b }, req))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, which: &str) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.raw_dim() != vb.raw_dim() {
            return Err(Error::dimension(
                format!("{which} operands of equal shape {:?}", va.shape()),
                format!("{:?}", vb.shape()),
            ));
        }
        let mut out = va.clone();
        match which {
            "add" => out.zip_mut_with(vb, |o, &r| *o = *o + r),
            "sub" => out.zip_mut_with(vb, |o, &r| *o = *o - r),
            "mul" => out.zip_mut_with(vb, |o, &r| *o = *o * r),
            _ => unreachable!(),
        }
        let op = match which {
            "add" => Op::Add { a, b },
            "sub" => Op::Sub { a, b },
            "mul" => Op::Mul { a, b },
            _ => unreachable!(),
        };
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, op, req))
    }

    /// |x| with subgradient 0 at exactly-zero entries.
    pub fn abs(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).mapv(|v| v.abs());
        let req = self.requires(input);
        self.push(out, Op::Abs { input }, req)
    }

    pub fn exp(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).mapv(|v| v.exp());
        let req = self.requires(input);
        self.push(out, Op::Exp { input }, req)
    }

    pub fn scale(&mut self, input: NodeId, factor: F) -> NodeId {
        let out = self.value(input).mapv(|v| v * factor);
        let req = self.requires(input);
        self.push(out, Op::Scale { input, factor }, req)
    }

    pub fn add_scalar(&mut self, input: NodeId, value: F) -> NodeId {
        let out = self.value(input).mapv(|v| v + value);
        let req = self.requires(input);
        self.push(out, Op::AddScalar { input, value }, req)
    }

    /// Clamp with zero gradient outside the open interval.
    pub fn clamp(&mut self, input: NodeId, lo: F, hi: F) -> NodeId {
        let out = self
            .value(input)
            .mapv(|v| if v < lo { lo } else if v > hi { hi } else { v });
        let req = self.requires(input);
        self.push(out, Op::Clamp { input, lo, hi }, req)
    }

    /// Sum over every element, producing a scalar node.
    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let total: F = self.value(input).iter().copied().sum();
        let out = ArrayD::from_elem(IxDyn(&[]), total);
        let req = self.requires(input);
        self.push(out, Op::SumAll { input }, req)
    }

    /// Apply a self-adjoint projector per batch item (computed in f64).
    pub fn project(&mut self, input: NodeId, projector: Arc<dyn BatchProjector>) -> Result<NodeId> {
        let x = self.value(input);
        if x.ndim() != 4 {
            return Err(Error::dimension("4-d input", "other rank"));
        }
        let dims = conv::dims4(x);
        let want = projector.domain();
        if (dims.1, dims.2, dims.3) != want {
            return Err(Error::dimension(
                format!("projector domain {want:?}"),
                format!("{:?}", (dims.1, dims.2, dims.3)),
            ));
        }
        let out = apply_projector(projector.as_ref(), x);
        let req = self.requires(input);
        Ok(self.push(out, Op::Project { input, projector }, req))
    }

    /// Error when any recorded value is non-finite.
    pub fn assert_finite(&self) -> Result<()> {
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.value.iter().all(|v| v.is_finite()) {
                return Err(Error::Fault(format!(
                    "non-finite value in node {id} ({})",
                    node.op.name()
                )));
            }
        }
        Ok(())
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Grads<F>> {
        if self.nodes[loss].value.ndim() != 0 {
            return Err(Error::State(
                "backward requires a scalar loss node".into(),
            ));
        }
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(ArrayD::from_elem(IxDyn(&[]), F::one()));

        for id in (0..=loss).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                grads[id] = Some(gout);
                continue;
            }
            match &self.nodes[id].op {
                Op::Constant | Op::Param(_) => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                } => {
                    if self.requires(*input) {
                        let shape = conv::dims4(self.value(*input));
                        let din = conv::backward_input(&gout, self.value(*weight), shape, *stride);
                        accumulate(&mut grads[*input], din);
                    }
                    if self.requires(*weight) {
                        let wshape = conv::dims4(self.value(*weight));
                        let dw =
                            conv::backward_weight(&gout, self.value(*input), wshape, *stride);
                        accumulate(&mut grads[*weight], dw);
                    }
                    if let Some(b) = bias {
                        if self.requires(*b) {
                            accumulate(&mut grads[*b], conv::backward_bias(&gout));
                        }
                    }
                }
                Op::LeakyRelu { input, slope } => {
                    if self.requires(*input) {
                        let mut g = gout.clone();
                        g.zip_mut_with(self.value(*input), |gv, &xv| {
                            if xv <= F::zero() {
                                *gv = *gv * *slope;
                            }
                        });
                        accumulate(&mut grads[*input], g);
                    }
                }
                Op::Upsample2x { input } => {
                    if self.requires(*input) {
                        let (b, c, h, w) = conv::dims4(self.value(*input));
                        let mut din = ArrayD::<F>::zeros(IxDyn(&[b, c, h, w]));
                        let gs = gout.as_slice().expect("standard layout");
                        let ds = din.as_slice_mut().expect("standard layout");
                        let (oh, ow) = (2 * h, 2 * w);
                        for plane in 0..b * c {
                            let gp = &gs[plane * oh * ow..][..oh * ow];
                            let dp = &mut ds[plane * h * w..][..h * w];
                            for y in 0..h {
                                for x_ in 0..w {
                                    let base = 2 * y * ow + 2 * x_;
                                    dp[y * w + x_] = gp[base]
                                        + gp[base + 1]
                                        + gp[base + ow]
                                        + gp[base + ow + 1];
                                }
                            }
                        }
                        accumulate(&mut grads[*input], din);
                    }
                }
                Op::ConcatChannels { a, b } => {
                    let ca = conv::dims4(self.value(*a)).1 as isize;
                    if self.requires(*a) {
                        let ga = gout
                            .slice_axis(Axis(1), Slice::from(..ca))
                            .to_owned()
                            .as_standard_layout()
                            .to_owned();
                        accumulate(&mut grads[*a], ga);
                    }
                    if self.requires(*b) {
                        let gb = gout
                            .slice_axis(Axis(1), Slice::from(ca..))
                            .to_owned()
                            .as_standard_layout()
                            .to_owned();
                        accumulate(&mut grads[*b], gb);
                    }
                }
                Op::Add { a, b } => {
                    if self.requires(*a) {
                        accumulate(&mut grads[*a], gout.clone());
                    }
                    if self.requires(*b) {
                        accumulate(&mut grads[*b], gout.clone());
                    }
                }
                Op::Sub { a, b } => {
                    if self.requires(*a) {
                        accumulate(&mut grads[*a], gout.clone());
                    }
                    if self.requires(*b) {
                        accumulate(&mut grads[*b], gout.mapv(|v| -v));
                    }
                }
                Op::Mul { a, b } => {
                    if self.requires(*a) {
                        let mut g = gout.clone();
                        g.zip_mut_with(self.value(*b), |gv, &o| *gv = *gv * o);
                        accumulate(&mut grads[*a], g);
                    }
                    if self.requires(*b) {
                        let mut g = gout.clone();
                        g.zip_mut_with(self.value(*a), |gv, &o| *gv = *gv * o);
                        accumulate(&mut grads[*b], g);
                    }
                }
                Op::Abs { input } => {
                    if self.requires(*input) {
                        let mut g = gout.clone();
                        g.zip_mut_with(self.value(*input), |gv, &xv| {
                            *gv = if xv > F::zero() {
                                *gv
                            } else if xv < F::zero() {
                                -*gv
                            } else {
                                F::zero()
                            };
                        });
                        accumulate(&mut grads[*input], g);
                    }
                }
                Op::Exp { input } => {
                    if self.requires(*input) {
                        let mut g = gout.clone();
                        g.zip_mut_with(self.value(id), |gv, &ev| *gv = *gv * ev);
                        accumulate(&mut grads[*input], g);
                    }
                }
                Op::Scale { input, factor } => {
                    if self.requires(*input) {
                        accumulate(&mut grads[*input], gout.mapv(|v| v * *factor));
                    }
                }
                Op::AddScalar { input, .. } => {
                    if self.requires(*input) {
                        accumulate(&mut grads[*input], gout.clone());
                    }
                }
                Op::Clamp { input, lo, hi } => {
                    if self.requires(*input) {
                        let mut g = gout.clone();
                        g.zip_mut_with(self.value(*input), |gv, &xv| {
                            if xv <= *lo || xv >= *hi {
                                *gv = F::zero();
                            }
                        });
                        accumulate(&mut grads[*input], g);
                    }
                }
                Op::SumAll { input } => {
                    if self.requires(*input) {
                        let g = *gout.first().expect("scalar");
                        let shape = self.value(*input).raw_dim();
                        accumulate(&mut grads[*input], ArrayD::from_elem(shape, g));
                    }
                }
                Op::Project { input, projector } => {
                    if self.requires(*input) {
                        // self-adjoint: the backward map equals the forward map
                        let g = apply_projector(projector.as_ref(), &gout);
                        accumulate(&mut grads[*input], g);
                    }
                }
            }
            grads[id] = Some(gout);
        }
        Ok(Grads { inner: grads })
    }

    /// Add the gradients of every parameter leaf into `params`.
    pub fn accumulate_param_grads(&self, grads: &Grads<F>, params: &mut ParamSet<F>) -> Result<()> {
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(idx) = node.op {
                if let Some(g) = grads.get(id) {
                    params.accumulate_grad(idx, g)?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate<F: Real>(slot: &mut Option<ArrayD<F>>, g: ArrayD<F>) {
    match slot {
        Some(acc) => acc.zip_mut_with(&g, |a, &b| *a = *a + b),
        None => *slot = Some(g),
    }
}

fn apply_projector<F: Real>(projector: &dyn BatchProjector, x: &ArrayD<F>) -> ArrayD<F> {
    let x64 = x
        .mapv(|v| v.to_f64())
        .into_dimensionality::<ndarray::Ix4>()
        .expect("4-d tensor");
    let projected = projector.project_batch(x64.view());
    projected.mapv(|v| F::from_f64(v)).into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn backward_without_scalar_loss_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(ArrayD::zeros(IxDyn(&[1, 1, 2, 2])));
        assert!(matches!(tape.backward(x), Err(Error::State(_))));
    }

    #[test]
    fn sum_of_weighted_input_has_input_sum_gradient() {
        // loss = sum(w * x) => dloss/dw = sum-free elementwise x
        let mut params = ParamSet::<f64>::new();
        let w = params.add("w", ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 0.5));
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let wn = tape.param(&params, w);
        let prod = tape.mul(wn, x).unwrap();
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&grads, &mut params).unwrap();
        let g = &params.get(w).grad;
        assert_eq!(
            g.clone().into_raw_vec_and_offset().0,
            vec![1.0, 2.0, 3.0, 4.0]
        );
    }

    #[test]
    fn disconnected_branch_gets_no_gradient() {
        let mut params = ParamSet::<f64>::new();
        let wa = params.add("a", ArrayD::from_elem(IxDyn(&[1]), 1.0));
        let wb = params.add("b", ArrayD::from_elem(IxDyn(&[1]), 1.0));
        let mut tape = Tape::<f64>::new();
        let na = tape.param(&params, wa);
        let _nb = tape.param(&params, wb);
        let loss = tape.sum_all(na);
        let grads = tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&grads, &mut params).unwrap();
        assert_eq!(params.get(wa).grad[[0]], 1.0);
        assert_eq!(params.get(wb).grad[[0]], 0.0);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut params = ParamSet::<f64>::new();
        let w = params.add(
            "w",
            ArrayD::from_shape_vec(IxDyn(&[3]), vec![-2.0, 0.0, 3.0]).unwrap(),
        );
        let mut tape = Tape::<f64>::new();
        let n = tape.param(&params, w);
        let a = tape.abs(n);
        let loss = tape.sum_all(a);
        let grads = tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&grads, &mut params).unwrap();
        let g = &params.get(w).grad;
        assert_eq!(g.clone().into_raw_vec_and_offset().0, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn assert_finite_flags_nan() {
        let mut tape = Tape::<f64>::new();
        let _ = tape.constant(ArrayD::from_elem(IxDyn(&[2]), f64::NAN));
        assert!(matches!(tape.assert_finite(), Err(Error::Fault(_))));
    }
}
