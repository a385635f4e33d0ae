//! Truncated singular value decomposition used as a stable pseudoinverse.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use ndarray_linalg::{JobSvd, SVDDC};

use crate::error::{Error, Result};

const CACHE_MAGIC: &[u8; 8] = b"NRSVD01\n";

/// Economy SVD factors with singular values below `tau * s_max` dropped.
///
/// `pinv_apply` realizes the regularized pseudoinverse; the retained right
/// singular vectors span the complement of the (numerical) null space, which
/// gives the null-space and range projectors for free.
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    /// Retained singular values, descending.
    s: Array1<f64>,
    /// m x r left singular vectors.
    u: Array2<f64>,
    /// r x n right singular vectors (transposed).
    vt: Array2<f64>,
    /// Relative cutoff that was applied.
    tau: f64,
}

impl TruncatedSvd {
    pub fn factor(a: &Array2<f64>, tau: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&tau) {
            return Err(Error::Argument(format!(
                "svd truncation tau must be in [0, 1), got {tau}"
            )));
        }
        let (u, s, vt) = a
            .svddc(JobSvd::Some)
            .map_err(|e| Error::State(format!("svd factorization failed: {e}")))?;
        let u = u.ok_or_else(|| Error::State("svd returned no left vectors".into()))?;
        let vt = vt.ok_or_else(|| Error::State("svd returned no right vectors".into()))?;

        let smax = s.first().copied().unwrap_or(0.0);
        let cutoff = tau * smax;
        let rank = s.iter().take_while(|&&sv| sv > cutoff && sv > 0.0).count();
        if rank == 0 {
            return Err(Error::State("svd retained no singular values".into()));
        }

        Ok(TruncatedSvd {
            s: s.slice(ndarray::s![..rank]).to_owned(),
            u: u.slice(ndarray::s![.., ..rank]).to_owned(),
            vt: vt.slice(ndarray::s![..rank, ..]).to_owned(),
            tau,
        })
    }

    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn singular_values(&self) -> &Array1<f64> {
        &self.s
    }

    pub fn max_singular_value(&self) -> f64 {
        self.s[0]
    }

    /// Domain dimension n.
    pub fn ncols(&self) -> usize {
        self.vt.ncols()
    }

    /// Range dimension m.
    pub fn nrows(&self) -> usize {
        self.u.nrows()
    }

    /// `V S^{-1} U^T y`: minimum-norm least-squares solution on the retained
    /// subspace.
    pub fn pinv_apply(&self, y: &Array1<f64>) -> Array1<f64> {
        let mut c = self.u.t().dot(y);
        c.zip_mut_with(&self.s, |ci, &si| *ci /= si);
        c.dot(&self.vt)
    }

    /// `x - V (V^T x)`: projection onto the orthogonal complement of the
    /// retained right singular subspace.
    pub fn null_project(&self, x: &Array1<f64>) -> Array1<f64> {
        let c = self.vt.dot(x);
        x - &c.dot(&self.vt)
    }

    /// Batched [`Self::null_project`] over row vectors.
    pub fn null_project_rows(&self, x: &Array2<f64>) -> Array2<f64> {
        let c = x.dot(&self.vt.t());
        x - &c.dot(&self.vt)
    }

    /// `U (U^T y)`: projection of a measurement onto the retained range.
    pub fn range_project(&self, y: &Array1<f64>) -> Array1<f64> {
        let c = self.u.t().dot(y);
        self.u.dot(&c)
    }

    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            f.write_all(CACHE_MAGIC)?;
            for dim in [self.u.nrows(), self.vt.ncols(), self.rank()] {
                f.write_all(&(dim as u64).to_le_bytes())?;
            }
            f.write_all(&self.tau.to_le_bytes())?;
            write_f64s(&mut f, self.s.as_slice().unwrap())?;
            write_f64s(&mut f, self.u.as_standard_layout().as_slice().unwrap())?;
            write_f64s(&mut f, self.vt.as_standard_layout().as_slice().unwrap())?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Corrupt(format!(
                "{} is not an svd cache file",
                path.display()
            )));
        }
        let m = read_u64(&mut f)? as usize;
        let n = read_u64(&mut f)? as usize;
        let r = read_u64(&mut f)? as usize;
        let tau = read_f64(&mut f)?;
        let s = Array1::from_vec(read_f64s(&mut f, r)?);
        let u = Array2::from_shape_vec((m, r), read_f64s(&mut f, m * r)?)
            .map_err(|e| Error::Corrupt(e.to_string()))?;
        let vt = Array2::from_shape_vec((r, n), read_f64s(&mut f, r * n)?)
            .map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(TruncatedSvd { s, u, vt, tau })
    }
}

fn write_f64s<W: Write>(w: &mut W, vals: &[f64]) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0f64; count];
    let mut buf = [0u8; 8];
    for slot in out.iter_mut() {
        r.read_exact(&mut buf)?;
        *slot = f64::from_le_bytes(buf);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn full_rank_square_pinv_is_inverse() {
        let a = array![[2.0, 1.0], [1.0, 3.0]];
        let svd = TruncatedSvd::factor(&a, 0.0).unwrap();
        let y = array![1.0, -2.0];
        let x = svd.pinv_apply(&y);
        // A x should reproduce y
        let ax = a.dot(&x);
        for (got, want) in ax.iter().zip(y.iter()) {
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn retained_values_respect_cutoff() {
        let a = array![[1.0, 0.0, 0.0], [0.0, 1e-2, 0.0], [0.0, 0.0, 1e-8]];
        let svd = TruncatedSvd::factor(&a, 1e-3).unwrap();
        assert_eq!(svd.rank(), 2);
        for &sv in svd.singular_values() {
            assert!(sv >= 1e-3 * svd.max_singular_value());
        }
    }

    #[test]
    fn pinv_is_its_own_pseudo_identity() {
        // pinv(A) A pinv(A) = pinv(A) on the retained subspace
        let a = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let svd = TruncatedSvd::factor(&a, 1e-12).unwrap();
        let y = array![0.3, -1.1, 2.2];
        let x1 = svd.pinv_apply(&y);
        let x2 = svd.pinv_apply(&a.dot(&x1));
        let rel = (&x1 - &x2).mapv(f64::abs).sum() / x1.mapv(f64::abs).sum();
        assert!(rel < 1e-8, "rel {rel}");
    }

    #[test]
    fn cache_roundtrip() {
        let a = array![[1.0, 2.0, 0.5], [3.0, 4.0, -1.0]];
        let svd = TruncatedSvd::factor(&a, 1e-10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.svd");
        svd.write_cache(&path).unwrap();
        let back = TruncatedSvd::read_cache(&path).unwrap();
        assert_eq!(back.rank(), svd.rank());
        let y = array![1.0, 1.0];
        let d = (&svd.pinv_apply(&y) - &back.pinv_apply(&y))
            .mapv(f64::abs)
            .sum();
        assert_eq!(d, 0.0);
    }
}
