//! Matrix-free linear forward models with adjoints, pseudoinverses and the
//! projectors derived from them.

mod dense;
mod fourier;
pub mod landweber;
mod radon;
pub mod sparse;
pub mod svd;

use std::path::Path;
use std::sync::{Arc, OnceLock};

use ndarray::{Array1, Array3, Array4, ArrayView4, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::BatchProjector;

pub use dense::DenseOp;
pub use fourier::MaskedFourierOp;
pub use landweber::{estimate_opnorm, landweber_project, LandweberConfig};
pub use radon::{default_detector_bins, detector_offsets, LimitedAngleRadonOp};
pub use svd::TruncatedSvd;

/// Image grid layout `(channels, h, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
}

impl GridShape {
    pub fn new(channels: usize, h: usize, w: usize) -> Self {
        GridShape { channels, h, w }
    }

    pub fn len(&self) -> usize {
        self.channels * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tuple(&self) -> (usize, usize, usize) {
        (self.channels, self.h, self.w)
    }

    pub fn reshape(&self, flat: Array1<f64>) -> Array3<f64> {
        Array3::from_shape_vec(self.tuple(), flat.into_raw_vec_and_offset().0)
            .expect("flat vector matches grid")
    }
}

impl std::fmt::Display for GridShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.channels, self.h, self.w)
    }
}

/// Concrete operator family.
#[derive(Debug)]
pub enum OpKind {
    MaskedFourier(MaskedFourierOp),
    LimitedAngleRadon(LimitedAngleRadonOp),
    Dense(DenseOp),
}

/// A linear forward model `A` together with everything derived from it:
/// the adjoint `A*`, a (possibly regularized) pseudoinverse, the null-space
/// projector `P0 = Id - pinv(A) A` and the power-iteration operator norm.
#[derive(Debug)]
pub struct LinearMap {
    kind: OpKind,
    opnorm: OnceLock<f64>,
}

impl LinearMap {
    pub fn masked_fourier(op: MaskedFourierOp) -> Self {
        LinearMap {
            kind: OpKind::MaskedFourier(op),
            opnorm: OnceLock::new(),
        }
    }

    pub fn limited_angle_radon(op: LimitedAngleRadonOp) -> Self {
        LinearMap {
            kind: OpKind::LimitedAngleRadon(op),
            opnorm: OnceLock::new(),
        }
    }

    pub fn dense(op: DenseOp) -> Self {
        LinearMap {
            kind: OpKind::Dense(op),
            opnorm: OnceLock::new(),
        }
    }

    pub fn kind(&self) -> &OpKind {
        &self.kind
    }

    pub fn domain_shape(&self) -> GridShape {
        match &self.kind {
            OpKind::MaskedFourier(op) => GridShape::new(2, op.grid(), op.grid()),
            OpKind::LimitedAngleRadon(op) => GridShape::new(1, op.grid(), op.grid()),
            OpKind::Dense(op) => op.domain(),
        }
    }

    pub fn range_len(&self) -> usize {
        match &self.kind {
            OpKind::MaskedFourier(op) => op.range_len(),
            OpKind::LimitedAngleRadon(op) => op.range_len(),
            OpKind::Dense(op) => op.range_len(),
        }
    }

    pub fn check_domain(&self, x: &Array3<f64>) -> Result<()> {
        let want = self.domain_shape();
        if x.dim() != want.tuple() {
            return Err(Error::dimension(want, format!("{:?}", x.dim())));
        }
        Ok(())
    }

    pub fn check_range(&self, y: &Array1<f64>) -> Result<()> {
        if y.len() != self.range_len() {
            return Err(Error::dimension(
                format!("measurement of length {}", self.range_len()),
                y.len(),
            ));
        }
        Ok(())
    }

    /// `A x`.
    pub fn apply(&self, x: &Array3<f64>) -> Result<Array1<f64>> {
        self.check_domain(x)?;
        Ok(match &self.kind {
            OpKind::MaskedFourier(op) => op.apply(x),
            OpKind::LimitedAngleRadon(op) => op.apply(x),
            OpKind::Dense(op) => op.apply(x),
        })
    }

    /// `A* y`, the exact transpose of [`Self::apply`].
    pub fn adjoint(&self, y: &Array1<f64>) -> Result<Array3<f64>> {
        self.check_range(y)?;
        Ok(match &self.kind {
            OpKind::MaskedFourier(op) => op.adjoint(y),
            OpKind::LimitedAngleRadon(op) => op.adjoint(y),
            OpKind::Dense(op) => op.adjoint(y),
        })
    }

    /// One-time preparation of the pseudoinverse (dense SVD for the Radon
    /// and dense kinds, nothing for masked Fourier).
    pub fn factorize(&self) -> Result<()> {
        match &self.kind {
            OpKind::MaskedFourier(_) => Ok(()),
            OpKind::LimitedAngleRadon(op) => op.factorize().map(|_| ()),
            OpKind::Dense(op) => op.factorize().map(|_| ()),
        }
    }

    pub fn truncated_svd(&self) -> Result<&TruncatedSvd> {
        match &self.kind {
            OpKind::MaskedFourier(_) => Err(Error::State(
                "masked fourier operator has no svd factors (pinv is the adjoint)".into(),
            )),
            OpKind::LimitedAngleRadon(op) => op.svd(),
            OpKind::Dense(op) => op.svd(),
        }
    }

    /// Minimum-norm reconstruction: `A* y` for masked Fourier (zero-filled
    /// inverse transform), truncated-SVD pseudoinverse otherwise.
    pub fn pseudoinverse(&self, y: &Array1<f64>) -> Result<Array3<f64>> {
        self.check_range(y)?;
        match &self.kind {
            OpKind::MaskedFourier(op) => Ok(op.adjoint(y)),
            OpKind::LimitedAngleRadon(op) => Ok(self.domain_shape().reshape(op.svd()?.pinv_apply(y))),
            OpKind::Dense(op) => Ok(op.domain().reshape(op.svd()?.pinv_apply(y))),
        }
    }

    /// `P0 x = x - pinv(A) (A x)`.
    pub fn null_space_project(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_domain(x)?;
        match &self.kind {
            OpKind::MaskedFourier(op) => Ok(op.null_space_project(x)),
            OpKind::LimitedAngleRadon(op) => {
                let flat = Array1::from_iter(x.iter().copied());
                Ok(self.domain_shape().reshape(op.svd()?.null_project(&flat)))
            }
            OpKind::Dense(op) => {
                let flat = Array1::from_iter(x.iter().copied());
                Ok(op.domain().reshape(op.svd()?.null_project(&flat)))
            }
        }
    }

    /// Projection of a measurement onto the retained range of the operator.
    /// Identity for masked Fourier (orthonormal rows), `U_r U_r^T` for the
    /// truncated-SVD kinds.
    pub fn range_project(&self, y: &Array1<f64>) -> Result<Array1<f64>> {
        self.check_range(y)?;
        match &self.kind {
            OpKind::MaskedFourier(_) => Ok(y.clone()),
            OpKind::LimitedAngleRadon(op) => Ok(op.svd()?.range_project(y)),
            OpKind::Dense(op) => Ok(op.svd()?.range_project(y)),
        }
    }

    /// Cached power-iteration estimate of `||A||` (exact 1 for masked
    /// Fourier, largest retained singular value once factorized).
    pub fn opnorm_est(&self) -> f64 {
        *self.opnorm.get_or_init(|| match &self.kind {
            OpKind::MaskedFourier(_) => 1.0,
            OpKind::LimitedAngleRadon(op) => {
                if let Ok(svd) = op.svd() {
                    return svd.max_singular_value();
                }
                landweber::estimate_opnorm(self, 100, 0).unwrap_or(0.0)
            }
            OpKind::Dense(op) => {
                if let Ok(svd) = op.svd() {
                    return svd.max_singular_value();
                }
                landweber::estimate_opnorm(self, 100, 0).unwrap_or(0.0)
            }
        })
    }

    pub fn descriptor(&self) -> OperatorDescriptor {
        match &self.kind {
            OpKind::MaskedFourier(op) => OperatorDescriptor {
                kind: "masked_fourier".into(),
                grid: op.grid(),
                mask_lines: Some(op.lines().to_vec()),
                angles_deg: None,
                detector_bins: None,
                tau: None,
            },
            OpKind::LimitedAngleRadon(op) => OperatorDescriptor {
                kind: "limited_angle_radon".into(),
                grid: op.grid(),
                mask_lines: None,
                angles_deg: Some(op.angles_deg().to_vec()),
                detector_bins: Some(op.detector_bins()),
                tau: Some(op.tau()),
            },
            OpKind::Dense(op) => OperatorDescriptor {
                kind: "dense".into(),
                grid: op.domain().w,
                mask_lines: None,
                angles_deg: None,
                detector_bins: Some(op.range_len()),
                tau: Some(op.tau()),
            },
        }
    }

    /// Hex digest identifying the operator geometry.
    pub fn content_hash(&self) -> String {
        self.descriptor().content_hash()
    }

    /// Projector handle usable inside autodiff graphs. Requires the
    /// factorization for the truncated-SVD kinds.
    pub fn null_projector(self: &Arc<Self>) -> Result<NullSpaceProjector> {
        if !matches!(self.kind, OpKind::MaskedFourier(_)) {
            self.truncated_svd()?;
        }
        Ok(NullSpaceProjector { op: Arc::clone(self) })
    }
}

/// Geometry descriptor serialized as JSON; its hash keys on-disk caches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OperatorDescriptor {
    pub kind: String,
    pub grid: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_lines: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub angles_deg: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detector_bins: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

impl OperatorDescriptor {
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("descriptor serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_digest(&hasher.finalize())
    }

    /// Rebuild the operator this descriptor came from. Dense operators carry
    /// their matrix out of band and cannot be rebuilt.
    pub fn build(&self, cache_dir: Option<&Path>) -> Result<LinearMap> {
        match self.kind.as_str() {
            "masked_fourier" => {
                let lines = self
                    .mask_lines
                    .clone()
                    .ok_or_else(|| Error::Config("masked_fourier descriptor without mask".into()))?;
                Ok(LinearMap::masked_fourier(MaskedFourierOp::new(self.grid, lines)?))
            }
            "limited_angle_radon" => {
                let angles = self
                    .angles_deg
                    .clone()
                    .ok_or_else(|| Error::Config("radon descriptor without angles".into()))?;
                let tau = self.tau.unwrap_or(1e-3);
                build_radon_cached(self.grid, angles, tau, cache_dir)
            }
            other => Err(Error::Config(format!(
                "operator kind {other} cannot be rebuilt from a descriptor"
            ))),
        }
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Build a Radon operator, going through the binary matrix cache in
/// `cache_dir` when possible.
pub fn build_radon_cached(
    n: usize,
    angles_deg: Vec<f64>,
    tau: f64,
    cache_dir: Option<&Path>,
) -> Result<LinearMap> {
    let desc = OperatorDescriptor {
        kind: "limited_angle_radon".into(),
        grid: n,
        mask_lines: None,
        angles_deg: Some(angles_deg.clone()),
        detector_bins: Some(default_detector_bins(n)),
        tau: Some(tau),
    };
    let hash = desc.content_hash();
    if let Some(dir) = cache_dir {
        let path = dir.join(format!("{hash}.radon"));
        if path.is_file() {
            if let Ok(matrix) = LimitedAngleRadonOp::read_matrix_cache(&path) {
                if let Ok(op) = LimitedAngleRadonOp::from_parts(n, angles_deg.clone(), tau, matrix)
                {
                    return Ok(LinearMap::limited_angle_radon(op));
                }
            }
            log::warn!("ignoring unreadable radon cache {}", path.display());
        }
    }
    let op = LimitedAngleRadonOp::build(n, angles_deg, tau)?;
    if let Some(dir) = cache_dir {
        std::fs::create_dir_all(dir)?;
        op.write_matrix_cache(&dir.join(format!("{hash}.radon")))?;
    }
    Ok(LinearMap::limited_angle_radon(op))
}

/// Run [`LinearMap::factorize`], loading/storing SVD factors in `cache_dir`.
pub fn factorize_cached(op: &LinearMap, cache_dir: Option<&Path>) -> Result<()> {
    let radon = match op.kind() {
        OpKind::LimitedAngleRadon(r) => r,
        _ => return op.factorize(),
    };
    let hash = op.content_hash();
    if let Some(dir) = cache_dir {
        let path = dir.join(format!("{hash}.svd"));
        if path.is_file() {
            match TruncatedSvd::read_cache(&path) {
                Ok(svd) => return radon.set_factors(svd),
                Err(e) => log::warn!("ignoring unreadable svd cache {}: {e}", path.display()),
            }
        }
        let svd = radon.factorize()?;
        std::fs::create_dir_all(dir)?;
        svd.write_cache(&path)?;
        return Ok(());
    }
    radon.factorize().map(|_| ())
}

/// Null-space projector `P0` as a batched, self-adjoint image map.
pub struct NullSpaceProjector {
    op: Arc<LinearMap>,
}

impl BatchProjector for NullSpaceProjector {
    fn domain(&self) -> (usize, usize, usize) {
        self.op.domain_shape().tuple()
    }

    fn project_batch(&self, x: ArrayView4<'_, f64>) -> Array4<f64> {
        match self.op.kind() {
            OpKind::MaskedFourier(op) => {
                let mut out = Array4::zeros(x.raw_dim());
                for (b, item) in x.axis_iter(Axis(0)).enumerate() {
                    let projected = op.null_space_project(&item.to_owned());
                    out.index_axis_mut(Axis(0), b).assign(&projected);
                }
                out
            }
            OpKind::LimitedAngleRadon(op) => {
                let svd = op.svd().expect("projector created after factorization");
                project_rows(svd, x)
            }
            OpKind::Dense(op) => {
                let svd = op.svd().expect("projector created after factorization");
                project_rows(svd, x)
            }
        }
    }
}

fn project_rows(svd: &TruncatedSvd, x: ArrayView4<'_, f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let flat = x
        .to_shape((b, c * h * w))
        .expect("contiguous batch")
        .to_owned();
    let projected = svd.null_project_rows(&flat);
    projected
        .into_shape_with_order((b, c, h, w))
        .expect("projected batch matches input shape")
}

/// Maximum relative adjoint defect
/// `|<Ax, y> - <x, A*y>| / (|x||A*y| + |Ax||y|)` over random pairs.
pub fn dot_test_defect(op: &LinearMap, trials: usize, seed: u64) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let shape = op.domain_shape();
    let m = op.range_len();
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x = Array3::from_shape_fn(shape.tuple(), |_| rng.random::<f64>() - 0.5);
        let y = Array1::from_shape_fn(m, |_| rng.random::<f64>() - 0.5);
        let ax = op.apply(&x)?;
        let aty = op.adjoint(&y)?;
        let lhs: f64 = ax.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(aty.iter()).map(|(a, b)| a * b).sum();
        let scale = l2(x.iter()) * l2(aty.iter()) + l2(ax.iter()) * l2(y.iter());
        if scale > 0.0 {
            worst = worst.max((lhs - rhs).abs() / scale);
        }
    }
    Ok(worst)
}

fn l2<'a>(it: impl Iterator<Item = &'a f64>) -> f64 {
    it.map(|v| v * v).sum::<f64>().sqrt()
}
