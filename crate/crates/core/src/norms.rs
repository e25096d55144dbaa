//! Norm objects and the core tensors: F, the fundamental tensor g_y, the
//! Cartan torsion C_y, its mean, and the angular metric K_y. All derivatives
//! come from degree-3 jets, so the tensors carry no finite-difference error.

use nalgebra::{DMatrix, DVector};

use crate::deform::DeformationSpec;
use crate::error::{Error, Result};
use crate::jets::Jet;
use crate::tensors::{SymTensor2, SymTensor3};

/// A 1-form on R^n given by its coefficients in the working basis.
#[derive(Clone, Debug, PartialEq)]
pub struct OneForm(pub DVector<f64>);

impl OneForm {
    pub fn from_slice(coeffs: &[f64]) -> Self {
        OneForm(DVector::from_row_slice(coeffs))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn apply(&self, y: &DVector<f64>) -> f64 {
        self.0.dot(y)
    }
}

/// Anything that evaluates like a Minkowski norm (possibly on a conic
/// domain) and supports jet evaluation along directions.
pub trait Minkowski: Sync {
    fn dim(&self) -> usize;

    /// Jet of `t -> F(y + sum_i t_i dirs[i])` at `t = 0`.
    fn eval_jet(&self, y: &DVector<f64>, dirs: &[DVector<f64>]) -> Result<Jet>;

    fn eval(&self, y: &DVector<f64>) -> Result<f64> {
        if y.norm() == 0.0 {
            return Err(Error::ZeroVector);
        }
        Ok(self.eval_jet(y, &[])?.const_term())
    }

    /// Jet of F^2 along the standard basis directions.
    fn squared_basis_jet(&self, y: &DVector<f64>) -> Result<Jet> {
        let n = self.dim();
        let dirs: Vec<DVector<f64>> = (0..n)
            .map(|i| DVector::from_fn(n, |r, _| if r == i { 1.0 } else { 0.0 }))
            .collect();
        let f = self.eval_jet(y, &dirs)?;
        Ok(&f * &f)
    }

    /// g_y(e_i, e_j) = 1/2 d^2/ds dt F^2(y + s e_i + t e_j).
    fn fundamental_tensor(&self, y: &DVector<f64>) -> Result<SymTensor2> {
        let n = self.dim();
        let f2 = self.squared_basis_jet(y)?;
        let mut idx = vec![0u8; n];
        Ok(SymTensor2::from_fn(n, |i, j| {
            idx[i] += 1;
            idx[j] += 1;
            let v = 0.5 * f2.extract_partial(&idx);
            idx[i] -= 1;
            idx[j] -= 1;
            v
        }))
    }

    /// C_y(e_i, e_j, e_k) = 1/4 d^3/dr ds dt F^2(y + r e_i + s e_j + t e_k).
    fn cartan_torsion(&self, y: &DVector<f64>) -> Result<SymTensor3> {
        let n = self.dim();
        let f2 = self.squared_basis_jet(y)?;
        let mut idx = vec![0u8; n];
        Ok(SymTensor3::from_fn(n, |i, j, k| {
            idx[i] += 1;
            idx[j] += 1;
            idx[k] += 1;
            let v = 0.25 * f2.extract_partial(&idx);
            idx[i] -= 1;
            idx[j] -= 1;
            idx[k] -= 1;
            v
        }))
    }

    /// Mean Cartan torsion C_k = C_{ijk} g^{ij}.
    fn mean_cartan(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let g = self.fundamental_tensor(y)?;
        let c = self.cartan_torsion(y)?;
        let ginv = invert_spd(&g)?;
        let n = self.dim();
        Ok(DVector::from_fn(n, |k, _| {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    acc += ginv[(i, j)] * c.get(i, j, k);
                }
            }
            acc
        }))
    }

    /// K_y(u,v) = g_y(u,v) - g_y(y,u) g_y(y,v) / F^2(y).
    fn angular_metric(&self, y: &DVector<f64>) -> Result<SymTensor2> {
        let g = self.fundamental_tensor(y)?;
        let gy = g.contract(y);
        let f2 = g.bilinear(y, y); // = F^2(y)
        Ok(SymTensor2::from_fn(self.dim(), |i, j| {
            g.get(i, j) - gy[i] * gy[j] / f2
        }))
    }

    /// Radius of the indicatrix in direction `u`: r with F(r u) = 1.
    fn indicatrix_radius(&self, u: &DVector<f64>) -> Result<f64> {
        let f = self.eval(u)?;
        if f <= 1e-12 {
            return Err(Error::outside_domain(u));
        }
        Ok(1.0 / f)
    }
}

/// Inverse of a symmetric tensor, rejecting condition numbers above 1e12.
pub fn invert_spd(g: &SymTensor2) -> Result<DMatrix<f64>> {
    let m = g.to_matrix();
    let eig = m.symmetric_eigenvalues();
    let max = eig.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let min = eig.iter().fold(f64::INFINITY, |a, &b| a.min(b.abs()));
    if !(min > 0.0) || max / min > 1e12 {
        return Err(Error::SingularMetric);
    }
    m.try_inverse().ok_or(Error::SingularMetric)
}

/// Closed recursive norm object.
#[derive(Clone, Debug)]
pub enum Norm {
    /// F(y) = sqrt(y^T A y) for symmetric positive-definite A.
    Euclidean { a: DMatrix<f64> },
    /// m-root norm ((y^1)^m + ... + (y^n)^m)^(1/m), even m.
    MRoot { m: u32, dim: usize },
    /// F phi(beta_1/F, ..., beta_p/F).
    Deformed {
        base: Box<Norm>,
        spec: DeformationSpec,
    },
}

impl Norm {
    pub fn euclidean(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() || a.nrows() < 2 {
            return Err(Error::InvalidParam(
                "euclidean: matrix must be square, n >= 2".into(),
            ));
        }
        if (&a - a.transpose()).abs().max() > 1e-12 {
            return Err(Error::InvalidParam("euclidean: matrix not symmetric".into()));
        }
        if a.clone().cholesky().is_none() {
            return Err(Error::InvalidParam(
                "euclidean: matrix not positive definite".into(),
            ));
        }
        Ok(Norm::Euclidean { a })
    }

    pub fn euclidean_unit(dim: usize) -> Self {
        Norm::Euclidean {
            a: DMatrix::identity(dim, dim),
        }
    }

    pub fn m_root(m: u32, dim: usize) -> Result<Self> {
        if m < 2 || m % 2 != 0 {
            return Err(Error::InvalidParam(format!(
                "m_root: m = {m} must be even and >= 2"
            )));
        }
        if dim < 2 {
            return Err(Error::InvalidParam("m_root: dim must be >= 2".into()));
        }
        Ok(Norm::MRoot { m, dim })
    }

    pub fn deformed(base: Norm, spec: DeformationSpec) -> Result<Self> {
        if spec.dim() != base.dim() {
            return Err(Error::InvalidParam(
                "deformation dimension != base norm dimension".into(),
            ));
        }
        Ok(Norm::Deformed {
            base: Box::new(base),
            spec,
        })
    }

    /// Dual norm of a 1-form: sup of beta(u) over the indicatrix. Closed
    /// form for Euclidean bases, a sampled supremum otherwise.
    pub fn dual_norm(&self, beta: &OneForm) -> Result<f64> {
        match self {
            Norm::Euclidean { a } => {
                let x = a
                    .clone()
                    .cholesky()
                    .ok_or(Error::SingularBase)?
                    .solve(&beta.0);
                Ok(beta.0.dot(&x).sqrt())
            }
            _ => {
                let dirs = crate::sampling::directions(self.dim(), 16384, 0x5eed);
                let mut sup = 0.0f64;
                for u in &dirs {
                    if let Ok(f) = self.eval(u) {
                        if f > 1e-12 {
                            sup = sup.max(beta.apply(u).abs() / f);
                        }
                    }
                }
                if sup == 0.0 {
                    return Err(Error::EmptySample);
                }
                Ok(sup)
            }
        }
    }
}

impl Minkowski for Norm {
    fn dim(&self) -> usize {
        match self {
            Norm::Euclidean { a } => a.nrows(),
            Norm::MRoot { dim, .. } => *dim,
            Norm::Deformed { base, .. } => base.dim(),
        }
    }

    fn eval_jet(&self, y: &DVector<f64>, dirs: &[DVector<f64>]) -> Result<Jet> {
        let k = dirs.len();
        match self {
            Norm::Euclidean { a } => {
                let n = a.nrows();
                let coord = |i: usize| -> Jet {
                    let lin: Vec<f64> = dirs.iter().map(|d| d[i]).collect();
                    Jet::affine(y[i], &lin)
                };
                let mut q = Jet::constant(k, 0.0);
                for i in 0..n {
                    let ci = coord(i);
                    for j in 0..n {
                        if a[(i, j)] != 0.0 {
                            q = &q + &(&ci * &coord(j)).scale(a[(i, j)]);
                        }
                    }
                }
                q.sqrt()
            }
            Norm::MRoot { m, dim } => {
                let mut sum = Jet::constant(k, 0.0);
                for i in 0..*dim {
                    let lin: Vec<f64> = dirs.iter().map(|d| d[i]).collect();
                    sum = &sum + &Jet::affine(y[i], &lin).powi(*m as i32)?;
                }
                sum.powf(1.0 / f64::from(*m))
            }
            Norm::Deformed { base, spec } => {
                let fb = base.eval_jet(y, dirs)?;
                let s: Vec<Jet> = spec
                    .betas()
                    .iter()
                    .map(|b| {
                        let lin: Vec<f64> = dirs.iter().map(|d| b.apply(d)).collect();
                        Jet::affine(b.apply(y), &lin).div(&fb)
                    })
                    .collect::<Result<_>>()?;
                let ph = spec.phi().eval(&s)?;
                Ok(&fb * &ph)
            }
        }
    }
}
