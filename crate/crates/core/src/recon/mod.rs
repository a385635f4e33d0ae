//! The learned reconstruction pipelines: residual correctors, their
//! solution-set projections, and null-space networks whose correction is
//! filtered through `P0` and therefore cannot change the measured data.

use std::sync::Arc;

use ndarray::{Array1, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchProjector, NodeId, ParamSet, Real, SmallUNet, Tape, UNetConfig};
use crate::objectives::LOG_SCALE_CLAMP;
use crate::operators::{landweber_project, LandweberConfig, LinearMap, OpKind};

/// The reconstruction method catalog, in presentation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodTag {
    Pseudoinverse,
    Residual1,
    ProjResidual1,
    Residual2,
    ProjResidual2,
    NullSpace1,
    NullSpace1Unc,
    NullSpace2,
    NullSpace2Unc,
}

impl MethodTag {
    pub const ALL: [MethodTag; 9] = [
        MethodTag::Pseudoinverse,
        MethodTag::Residual1,
        MethodTag::ProjResidual1,
        MethodTag::Residual2,
        MethodTag::ProjResidual2,
        MethodTag::NullSpace1,
        MethodTag::NullSpace1Unc,
        MethodTag::NullSpace2,
        MethodTag::NullSpace2Unc,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MethodTag::Pseudoinverse => "pseudoinverse",
            MethodTag::Residual1 => "residual1",
            MethodTag::ProjResidual1 => "proj-residual1",
            MethodTag::Residual2 => "residual2",
            MethodTag::ProjResidual2 => "proj-residual2",
            MethodTag::NullSpace1 => "nullspace1",
            MethodTag::NullSpace1Unc => "nullspace1-unc",
            MethodTag::NullSpace2 => "nullspace2",
            MethodTag::NullSpace2Unc => "nullspace2-unc",
        }
    }

    pub fn parse(s: &str) -> Result<MethodTag> {
        MethodTag::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| {
                Error::Argument(format!(
                    "unknown method {s}; expected one of {}",
                    MethodTag::ALL.map(|t| t.as_str()).join(", ")
                ))
            })
    }

    /// Number of corrector blocks (cascade length).
    pub fn blocks(&self) -> usize {
        match self {
            MethodTag::Pseudoinverse => 0,
            MethodTag::Residual1
            | MethodTag::ProjResidual1
            | MethodTag::NullSpace1
            | MethodTag::NullSpace1Unc => 1,
            MethodTag::Residual2
            | MethodTag::ProjResidual2
            | MethodTag::NullSpace2
            | MethodTag::NullSpace2Unc => 2,
        }
    }

    /// Whether corrections pass through the null-space projector.
    pub fn null_space(&self) -> bool {
        matches!(
            self,
            MethodTag::NullSpace1
                | MethodTag::NullSpace2
                | MethodTag::NullSpace1Unc
                | MethodTag::NullSpace2Unc
        )
    }

    /// Whether a log-scale branch is present (uncertainty-aware variants).
    pub fn uncertainty(&self) -> bool {
        matches!(self, MethodTag::NullSpace1Unc | MethodTag::NullSpace2Unc)
    }

    /// Whether inference ends with a Landweber projection.
    pub fn projected(&self) -> bool {
        matches!(self, MethodTag::ProjResidual1 | MethodTag::ProjResidual2)
    }

    /// The method whose training produces this method's weights.
    /// Projected residual methods reuse the residual training.
    pub fn trained_as(&self) -> MethodTag {
        match self {
            MethodTag::ProjResidual1 => MethodTag::Residual1,
            MethodTag::ProjResidual2 => MethodTag::Residual2,
            other => *other,
        }
    }

    pub fn needs_training(&self) -> bool {
        !matches!(self, MethodTag::Pseudoinverse)
    }
}

impl std::fmt::Display for MethodTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Method descriptor written next to checkpoints and evaluation outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodDescriptor {
    pub tag: MethodTag,
    pub operator_hash: String,
    pub checkpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub landweber: Option<LandweberConfig>,
}

pub struct ReconOutput {
    pub image: Array3<f64>,
    /// Log-scale map for uncertainty-aware methods.
    pub log_scale: Option<Array3<f64>>,
}

/// Recorded nodes of one method forward pass.
pub struct MethodGraph {
    pub recon: NodeId,
    pub rho: Option<NodeId>,
}

/// Build the nets (and their shared parameter set) for a method.
pub fn method_nets<F: Real>(
    tag: MethodTag,
    channels: usize,
    base_channels: usize,
    levels: usize,
    seed: u64,
) -> Result<(Vec<SmallUNet>, ParamSet<F>)> {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nets = Vec::new();
    for block in 0..tag.blocks() {
        let two_branch = tag.uncertainty() && block == tag.blocks() - 1;
        let cfg = UNetConfig {
            in_channels: channels,
            out_channels: channels,
            base_channels,
            levels,
            leaky_slope: 0.1,
            two_branch,
        };
        nets.push(SmallUNet::new(
            cfg,
            &format!("block{}", block + 1),
            &mut params,
            &mut rng,
        )?);
    }
    Ok((nets, params))
}

/// Record the method's forward pass on a tape. `input` is the batched
/// pseudoinverse reconstruction; the projector must be present for
/// null-space variants.
pub fn build_method_graph<F: Real>(
    tape: &mut Tape<F>,
    tag: MethodTag,
    nets: &[SmallUNet],
    params: &ParamSet<F>,
    projector: Option<&Arc<dyn BatchProjector>>,
    input: NodeId,
) -> Result<MethodGraph> {
    if nets.len() != tag.blocks() {
        return Err(Error::State(format!(
            "method {tag} expects {} blocks, got {}",
            tag.blocks(),
            nets.len()
        )));
    }
    if tag.null_space() && projector.is_none() {
        return Err(Error::State(format!(
            "method {tag} requires a null-space projector"
        )));
    }

    let mut cur = input;
    let mut rho = None;
    for net in nets {
        let out = net.forward(tape, params, cur)?;
        let correction = if tag.null_space() {
            let p = projector.expect("checked above");
            tape.project(out.main, Arc::clone(p))?
        } else {
            out.main
        };
        cur = tape.add(cur, correction)?;
        if let Some(sigma) = out.sigma {
            let lim = F::from_f64(LOG_SCALE_CLAMP);
            rho = Some(tape.clamp(sigma, -lim, lim));
        }
    }
    Ok(MethodGraph { recon: cur, rho })
}

/// A reconstruction pipeline with a frozen parameter snapshot. Inference
/// runs in 64-bit regardless of the training precision.
pub struct ReconMethod {
    tag: MethodTag,
    op: Arc<LinearMap>,
    nets: Vec<SmallUNet>,
    params: ParamSet<f64>,
    landweber: LandweberConfig,
    projector: Option<Arc<dyn BatchProjector>>,
}

impl ReconMethod {
    /// Assemble from parts (checkpoint loading, training snapshots).
    pub fn new(
        tag: MethodTag,
        op: Arc<LinearMap>,
        nets: Vec<SmallUNet>,
        params: ParamSet<f64>,
        landweber: Option<LandweberConfig>,
    ) -> Result<Self> {
        let projector = if tag.null_space() {
            Some(make_projector(&op)?)
        } else {
            None
        };
        let landweber = landweber.unwrap_or_else(|| LandweberConfig::default_for(&op));
        Ok(ReconMethod {
            tag,
            op,
            nets,
            params,
            landweber,
            projector,
        })
    }

    /// Freshly initialized parameters (zero heads: the method reproduces
    /// the pseudoinverse exactly).
    pub fn with_random_params(
        tag: MethodTag,
        op: Arc<LinearMap>,
        base_channels: usize,
        levels: usize,
        seed: u64,
    ) -> Result<Self> {
        let channels = op.domain_shape().channels;
        let (nets, params) = method_nets::<f64>(tag, channels, base_channels, levels, seed)?;
        Self::new(tag, op, nets, params, None)
    }

    pub fn tag(&self) -> MethodTag {
        self.tag
    }

    pub fn operator(&self) -> &Arc<LinearMap> {
        &self.op
    }

    pub fn params(&self) -> &ParamSet<f64> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f64> {
        &mut self.params
    }

    pub fn nets(&self) -> &[SmallUNet] {
        &self.nets
    }

    pub fn landweber(&self) -> &LandweberConfig {
        &self.landweber
    }

    pub fn descriptor(&self, checkpoint: Option<String>) -> MethodDescriptor {
        MethodDescriptor {
            tag: self.tag,
            operator_hash: self.op.content_hash(),
            checkpoint,
            landweber: self.tag.projected().then_some(self.landweber),
        }
    }

    /// Reconstruct a batch of measurements (one shared tape).
    pub fn reconstruct_batch(&self, ys: &[Array1<f64>]) -> Result<Vec<ReconOutput>> {
        if ys.is_empty() {
            return Ok(Vec::new());
        }
        let shape = self.op.domain_shape();
        let (c, h, w) = shape.tuple();
        let mut pinvs = Vec::with_capacity(ys.len());
        for y in ys {
            pinvs.push(self.op.pseudoinverse(y)?);
        }

        if self.tag == MethodTag::Pseudoinverse {
            return Ok(pinvs
                .into_iter()
                .map(|image| ReconOutput {
                    image,
                    log_scale: None,
                })
                .collect());
        }

        let mut input = Array4::zeros((ys.len(), c, h, w));
        for (b, img) in pinvs.iter().enumerate() {
            input.index_axis_mut(Axis(0), b).assign(img);
        }
        let mut tape = Tape::<f64>::new();
        let input_id = tape.constant(input.into_dyn());
        let graph = build_method_graph(
            &mut tape,
            self.tag,
            &self.nets,
            &self.params,
            self.projector.as_ref(),
            input_id,
        )?;

        let recon = tape.value(graph.recon).clone();
        let rho = graph.rho.map(|id| tape.value(id).clone());
        let mut outputs = Vec::with_capacity(ys.len());
        for b in 0..ys.len() {
            let mut image = take_batch_item(&recon, b, (c, h, w));
            if self.tag.projected() {
                let target = match self.op.kind() {
                    // raw data is exactly representable for orthonormal rows
                    OpKind::MaskedFourier(_) => ys[b].clone(),
                    // stabilized variant: project toward A x_pinv
                    _ => self.op.apply(&pinvs[b])?,
                };
                image = landweber_project(&self.op, &image, &target, &self.landweber)?;
            }
            outputs.push(ReconOutput {
                image,
                log_scale: rho.as_ref().map(|r| take_batch_item(r, b, (c, h, w))),
            });
        }
        Ok(outputs)
    }

    pub fn reconstruct(&self, y: &Array1<f64>) -> Result<ReconOutput> {
        Ok(self
            .reconstruct_batch(std::slice::from_ref(y))?
            .pop()
            .expect("one output per measurement"))
    }

    /// `||A x_rec - y|| / max(||y||, eps)`.
    pub fn data_consistency_gap(&self, y: &Array1<f64>) -> Result<f64> {
        let rec = self.reconstruct(y)?;
        let ax = self.op.apply(&rec.image)?;
        let num = l2(&(&ax - y));
        Ok(num / l2(y).max(f64::EPSILON))
    }

    /// Data-consistency gap measured on the operator's retained range;
    /// equals the plain gap for masked Fourier and discounts singular
    /// components below the SVD truncation otherwise.
    pub fn retained_data_consistency_gap(&self, y: &Array1<f64>) -> Result<f64> {
        let rec = self.reconstruct(y)?;
        let ax = self.op.apply(&rec.image)?;
        let num = l2(&self.op.range_project(&(&ax - y))?);
        let den = l2(&self.op.range_project(y)?).max(f64::EPSILON);
        Ok(num / den)
    }
}

pub fn make_projector(op: &Arc<LinearMap>) -> Result<Arc<dyn BatchProjector>> {
    Ok(Arc::new(op.null_projector()?))
}

fn take_batch_item(batch: &ArrayD<f64>, b: usize, (c, h, w): (usize, usize, usize)) -> Array3<f64> {
    batch
        .index_axis(Axis(0), b)
        .to_owned()
        .into_shape_with_order(IxDyn(&[c, h, w]))
        .expect("batch item matches grid")
        .into_dimensionality()
        .expect("3-d image")
}

fn l2(v: &Array1<f64>) -> f64 {
    v.iter().map(|e| e * e).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tag_roundtrip_and_order() {
        for tag in MethodTag::ALL {
            assert_eq!(MethodTag::parse(tag.as_str()).unwrap(), tag);
        }
        assert!(MethodTag::parse("nullspace3").is_err());
        assert_eq!(MethodTag::ALL[0], MethodTag::Pseudoinverse);
    }

    #[test]
    fn trained_as_maps_projected_to_residual() {
        assert_eq!(
            MethodTag::ProjResidual1.trained_as(),
            MethodTag::Residual1
        );
        assert_eq!(
            MethodTag::ProjResidual2.trained_as(),
            MethodTag::Residual2
        );
        assert_eq!(MethodTag::NullSpace1.trained_as(), MethodTag::NullSpace1);
    }
}
