//! The bonafide reference distribution: a full-covariance Gaussian over
//! backbone embeddings, scored by Mahalanobis distance.
//!
//! Fitting uses the unbiased sample covariance and a shrinkage term
//! `ε = 1e-3 · trace(Σ) / D` (unless overridden) so the precision matrix
//! exists even when segments are fewer than dimensions. The stats file
//! (`DING`) stores everything in f64: magic, version u32, D u32, ε f64, then
//! μ (D), Σ (D×D row-major), precision (D×D row-major).

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{DinError, Result};
use crate::io::{atomic_write, Cursor, PutLe};
use crate::linalg::{cholesky, matmul_tn, spd_inverse};

pub const GAUSSIAN_MAGIC: &[u8; 4] = b"DING";
pub const GAUSSIAN_VERSION: u32 = 1;

/// Fitted bonafide statistics. `precision` is the inverse of `sigma + εI`.
#[derive(Debug, Clone)]
pub struct BonafideGaussian {
    pub mu: Array1<f64>,
    pub sigma: Array2<f64>,
    pub precision: Array2<f64>,
    pub epsilon: f64,
    /// Segments used by the fit. Zero when loaded from disk: the `DING`
    /// format does not persist the count.
    pub n_samples: usize,
}

/// Fit on rows of `embeddings` (one backbone embedding per segment).
/// `epsilon = None` selects the trace-scaled default.
pub fn fit_gaussian(embeddings: ArrayView2<f64>, epsilon: Option<f64>) -> Result<BonafideGaussian> {
    let (n, d) = embeddings.dim();
    if d == 0 {
        return Err(DinError::shape("embeddings have zero dimension"));
    }
    if n < 2 {
        return Err(DinError::data(format!(
            "need at least 2 segments for an unbiased covariance, got {n}"
        )));
    }
    if embeddings.iter().any(|v| !v.is_finite()) {
        return Err(DinError::numerical("non-finite embedding passed to Gaussian fit"));
    }
    if n < d + 1 {
        eprintln!(
            "warning: fitting a {d}-dimensional Gaussian on only {n} segments \
             (fewer than D+1 = {}); covariance is rank-deficient and the fit \
             leans on shrinkage",
            d + 1
        );
    }

    let mu = embeddings.mean_axis(ndarray::Axis(0)).expect("n >= 2");
    let centered = &embeddings - &mu;
    let mut sigma = matmul_tn(&centered.view(), &centered.view());
    sigma.mapv_inplace(|v| v / (n - 1) as f64);
    // Exact symmetry: the Cholesky below reads only the lower triangle, and
    // the invariant promises a symmetric Σ on disk.
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (sigma[[i, j]] + sigma[[j, i]]);
            sigma[[i, j]] = v;
            sigma[[j, i]] = v;
        }
    }

    let epsilon = match epsilon {
        Some(e) => {
            if !e.is_finite() || e < 0.0 {
                return Err(DinError::config(format!("epsilon must be finite and >= 0, got {e}")));
            }
            e
        }
        None => 1e-3 * trace(&sigma) / d as f64,
    };

    let precision = precision_of(&sigma, epsilon)?;
    let g = BonafideGaussian { mu, sigma, precision, epsilon, n_samples: n };
    g.validate()?;
    Ok(g)
}

fn trace(a: &Array2<f64>) -> f64 {
    a.diag().sum()
}

fn precision_of(sigma: &Array2<f64>, epsilon: f64) -> Result<Array2<f64>> {
    let d = sigma.nrows();
    let mut shrunk = sigma.clone();
    for i in 0..d {
        shrunk[[i, i]] += epsilon;
    }
    let l = cholesky(&shrunk).map_err(|e| {
        DinError::numerical(format!(
            "covariance is not invertible even after shrinkage (ε = {epsilon:.3e}): {e}; \
             try a larger epsilon"
        ))
    })?;
    Ok(spd_inverse(&l))
}

impl BonafideGaussian {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// True when the fit had fewer segments than D+1.
    pub fn is_underdetermined(&self) -> bool {
        self.n_samples > 0 && self.n_samples < self.dim() + 1
    }

    /// Check the structural invariants: square shapes, Σ symmetric within
    /// 1e-8, Σ + εI positive definite, precision·(Σ + εI) = I within 1e-6.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.sigma.dim() != (d, d) || self.precision.dim() != (d, d) {
            return Err(DinError::shape(format!(
                "Gaussian shape mismatch: mu {d}, sigma {:?}, precision {:?}",
                self.sigma.dim(),
                self.precision.dim()
            )));
        }
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(DinError::numerical(format!("bad shrinkage epsilon {}", self.epsilon)));
        }
        for i in 0..d {
            for j in 0..i {
                if (self.sigma[[i, j]] - self.sigma[[j, i]]).abs() > 1e-8 {
                    return Err(DinError::numerical(format!(
                        "sigma asymmetric at ({i},{j}): {} vs {}",
                        self.sigma[[i, j]],
                        self.sigma[[j, i]]
                    )));
                }
            }
        }
        let mut shrunk = self.sigma.clone();
        for i in 0..d {
            shrunk[[i, i]] += self.epsilon;
        }
        cholesky(&shrunk)?;
        let product = crate::linalg::matmul(&self.precision.view(), &shrunk.view());
        for i in 0..d {
            for j in 0..d {
                let want = if i == j { 1.0 } else { 0.0 };
                if (product[[i, j]] - want).abs() > 1e-6 {
                    return Err(DinError::numerical(format!(
                        "precision is not the inverse of (sigma + εI): residual {:.3e} at ({i},{j})",
                        (product[[i, j]] - want).abs()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Mahalanobis distance of one embedding:
    /// `sqrt((x − μ)ᵀ · precision · (x − μ))`.
    pub fn mahalanobis(&self, x: ArrayView1<f64>) -> Result<f64> {
        let d = self.dim();
        if x.len() != d {
            return Err(DinError::shape(format!(
                "embedding has dimension {}, Gaussian expects {d}",
                x.len()
            )));
        }
        let v = &x - &self.mu;
        let pv = self.precision.dot(&v);
        let q = v.dot(&pv);
        if !q.is_finite() {
            return Err(DinError::numerical("non-finite Mahalanobis quadratic form"));
        }
        // The quadratic form is PSD up to rounding; clip stray negatives.
        Ok(q.max(0.0).sqrt())
    }

    /// Mahalanobis distance for each row of `xs`.
    pub fn mahalanobis_rows(&self, xs: ArrayView2<f64>) -> Result<Vec<f64>> {
        xs.rows().into_iter().map(|row| self.mahalanobis(row)).collect()
    }

    /// Write the `DING` stats file.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let d = self.dim();
        let d32 = u32::try_from(d).map_err(|_| DinError::data("dimension exceeds u32"))?;
        let mut buf = Vec::with_capacity(16 + 8 * (1 + d + 2 * d * d));
        buf.extend_from_slice(GAUSSIAN_MAGIC);
        buf.put_u32(GAUSSIAN_VERSION);
        buf.put_u32(d32);
        buf.put_f64(self.epsilon);
        for &v in self.mu.iter() {
            buf.put_f64(v);
        }
        for &v in self.sigma.iter() {
            buf.put_f64(v);
        }
        for &v in self.precision.iter() {
            buf.put_f64(v);
        }
        atomic_write(path, &buf)
    }

    /// Read a `DING` stats file and re-check the invariants.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| DinError::io(path, e))?;
        let mut c = Cursor::new(&bytes, path);
        c.magic(GAUSSIAN_MAGIC, "DING")?;
        let version = c.u32_le("version")?;
        if version != GAUSSIAN_VERSION {
            return Err(DinError::format(
                path,
                format!("unsupported DING version {version}, expected {GAUSSIAN_VERSION}"),
            ));
        }
        let d = c.u32_le("dimension")? as usize;
        if d == 0 {
            return Err(DinError::format(path, "zero-dimensional Gaussian"));
        }
        let epsilon = c.f64_le("epsilon")?;
        let mut read_block = |n: usize, what: &str| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                out.push(c.f64_le(what)?);
            }
            Ok(out)
        };
        let mu = Array1::from_vec(read_block(d, "mu")?);
        let sigma = Array2::from_shape_vec((d, d), read_block(d * d, "sigma")?)
            .expect("length checked");
        let precision = Array2::from_shape_vec((d, d), read_block(d * d, "precision")?)
            .expect("length checked");
        if c.remaining() != 0 {
            return Err(DinError::format(
                path,
                format!("{} trailing bytes after precision matrix", c.remaining()),
            ));
        }
        let g = BonafideGaussian { mu, sigma, precision, epsilon, n_samples: 0 };
        if g.mu.iter().chain(g.sigma.iter()).chain(g.precision.iter()).any(|v| !v.is_finite()) {
            return Err(DinError::format(path, "non-finite value in Gaussian stats"));
        }
        g.validate().map_err(|e| DinError::format(path, format!("invalid Gaussian stats: {e}")))?;
        Ok(g)
    }
}
