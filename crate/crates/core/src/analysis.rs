//! Determinant and volume identities, torsion-based classification of
//! norms, and symmetry detection on the indicatrix.

use nalgebra::{DMatrix, DVector};

use crate::deform::{rho_functions, DeformationSpec};
use crate::error::{Error, Result};
use crate::norms::{invert_spd, Minkowski, Norm};
use crate::phi::PhiExpr;
use crate::sampling;

/// det(a + c1 b1 b1^T + c2 b2 b2^T) through the rank-two determinant
/// update: det(a) [(1 + c1 |b1|^2)(1 + c2 |b2|^2) - c1 c2 <b1, b2>^2],
/// with norms and inner products taken in the a^-1 metric.
pub fn det_update(
    a: &DMatrix<f64>,
    c1: f64,
    b1: &DVector<f64>,
    c2: f64,
    b2: &DVector<f64>,
) -> Result<f64> {
    let inv = a.clone().try_inverse().ok_or(Error::SingularBase)?;
    let det = a.clone().lu().determinant();
    if det == 0.0 || !det.is_finite() {
        return Err(Error::SingularBase);
    }
    let n11 = (&inv * b1).dot(b1);
    let n22 = (&inv * b2).dot(b2);
    let n12 = (&inv * b1).dot(b2);
    Ok(det * ((1.0 + c1 * n11) * (1.0 + c2 * n22) - c1 * c2 * n12 * n12))
}

/// Both closed forms of the p = 1 determinant ratio det gbar / det g:
/// the rho-polynomial and its factorization
/// phi^(n+1) (phi - s dphi)^(n-2) [phi - s dphi + (b^2 - s^2) ddphi].
pub fn volume_ratio_p1(phi: &PhiExpr, s: f64, b: f64, n: usize) -> Result<(f64, f64)> {
    assert_eq!(phi.arity(), 1);
    let r = rho_functions(phi, &[s])?;
    let (rho, rho0, rho1) = (r.rho, r.rho0[(0, 0)], r.rho1[0]);
    let first = rho.powi(n as i32 - 2)
        * (rho0 * rho1 * s.powi(3)
            + rho1 * rho1 * s * s
            + (rho - rho0 * b * b) * rho1 * s
            + (rho * rho0 - rho1 * rho1) * b * b
            + rho * rho);
    let d = phi.derivs(&[s])?;
    let core = d.value - s * d.d1[0];
    let second = d.value.powi(n as i32 + 1)
        * core.powi(n as i32 - 2)
        * (core + (b * b - s * s) * d.d2.get(0, 0));
    Ok((first, second))
}

/// The long p = 2 volume-ratio expression evaluated verbatim next to the
/// direct determinant ratio. The two are reported side by side; the
/// determinant ratio is the authoritative value.
#[derive(Clone, Debug)]
pub struct VolumeRatioP2 {
    pub closed_form: f64,
    pub det_ratio: f64,
    pub discrepancy: f64,
}

pub fn volume_ratio_p2_report(
    f: &Norm,
    spec: &DeformationSpec,
    y: &DVector<f64>,
) -> Result<VolumeRatioP2> {
    if spec.p() != 2 {
        return Err(Error::InvalidParam("volume ratio report needs p = 2".into()));
    }
    let n = f.dim();
    let fy = f.eval(y)?;
    let s = spec.s_values(y, fy);
    let r = rho_functions(spec.phi(), &s)?;
    let eps = s[0] * r.rho1[0] + s[1] * r.rho1[1];
    if eps.abs() <= 1e-10 {
        return Err(Error::EpsilonNearZero);
    }
    let m = DMatrix::from_fn(2, 2, |i, j| r.rho0[(i, j)] + r.rho1[i] * r.rho1[j] / eps);
    let eig = m.symmetric_eigen();
    if eig.eigenvalues.iter().any(|l| !l.is_finite()) {
        return Err(Error::IllConditionedEigen);
    }
    let lam = [eig.eigenvalues[0], eig.eigenvalues[1]];
    let g = f.fundamental_tensor(y)?;
    let ginv = invert_spd(&g)?;
    // beta_tilde_k = q_k^1 beta_1 + q_k^2 beta_2, raised with g^-1
    let sharp = |k: usize| -> DVector<f64> {
        let form = spec.betas()[0].0.scale(eig.eigenvectors[(0, k)])
            + spec.betas()[1].0.scale(eig.eigenvectors[(1, k)]);
        &ginv * form
    };
    let bt = [sharp(0), sharp(1)];
    let mut y_tilde = y.scale(-1.0 / fy);
    for i in 0..2 {
        y_tilde += (&ginv * &spec.betas()[i].0).scale(r.rho1[i] / eps);
    }
    let b11 = g.bilinear(&bt[0], &bt[0]);
    let b22 = g.bilinear(&bt[1], &bt[1]);
    let b12 = g.bilinear(&bt[0], &bt[1]);
    let gyy = g.bilinear(&y_tilde, &y_tilde);
    let g1y = g.bilinear(&bt[0], &y_tilde);
    let g2y = g.bilinear(&bt[1], &y_tilde);
    let rho = r.rho;
    let closed_form = rho.powi(n as i32 - 1)
        * (rho * rho + rho * (lam[0] * b11 + lam[1] * b22) - rho * eps * gyy
            + lam[0] * lam[1] * (b11 * b22 - b12 * b12)
            - eps * gyy * (lam[0] * b11 + lam[1] * b22)
            + lam[0] * eps * g1y
            + lam[1] * eps * g2y
            + lam[0] * lam[1] * eps / rho
                * (b11 * g2y * g2y + b22 * g1y * g1y + b12 * gyy * gyy
                    - b11 * b22 * gyy
                    - 2.0 * b12 * g1y * g2y));
    let bar = Norm::deformed(f.clone(), spec.clone())?;
    let det_g = g.to_matrix().lu().determinant();
    let det_gbar = bar.fundamental_tensor(y)?.to_matrix().lu().determinant();
    let det_ratio = det_gbar / det_g;
    Ok(VolumeRatioP2 {
        closed_form,
        det_ratio,
        discrepancy: (closed_form - det_ratio).abs() / det_ratio.abs(),
    })
}

/// Least-squares decomposition of the Cartan torsion into its angular and
/// mean-torsion parts: C = A sym(K (x) I) + B I (x) I (x) I.
#[derive(Clone, Debug)]
pub struct SemiCFit {
    pub p_fit: f64,
    pub a: f64,
    pub b: f64,
    pub residual_rel: f64,
}

pub fn semi_c_reducible_fit(f: &Norm, y: &DVector<f64>) -> Result<SemiCFit> {
    let n = f.dim();
    let c = f.cartan_torsion(y)?;
    let k = f.angular_metric(y)?;
    let i = f.mean_cartan(y)?;
    if i.norm() <= 1e-8 {
        return Err(Error::VanishingMeanCartan);
    }
    // 2x2 normal equations over all n^3 components
    let mut m = [[0.0f64; 2]; 2];
    let mut rhs = [0.0f64; 2];
    let mut c_norm2 = 0.0f64;
    for a in 0..n {
        for b in 0..n {
            for d in 0..n {
                let s1 = k.get(a, b) * i[d] + k.get(b, d) * i[a] + k.get(d, a) * i[b];
                let s2 = i[a] * i[b] * i[d];
                let t = c.get(a, b, d);
                m[0][0] += s1 * s1;
                m[0][1] += s1 * s2;
                m[1][1] += s2 * s2;
                rhs[0] += s1 * t;
                rhs[1] += s2 * t;
                c_norm2 += t * t;
            }
        }
    }
    m[1][0] = m[0][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() <= 1e-10 * m[0][0].max(m[1][1]).max(1e-300) {
        return Err(Error::IllConditionedEigen);
    }
    let coef_a = (rhs[0] * m[1][1] - rhs[1] * m[0][1]) / det;
    let coef_b = (m[0][0] * rhs[1] - m[1][0] * rhs[0]) / det;
    let mut res2 = 0.0f64;
    for a in 0..n {
        for b in 0..n {
            for d in 0..n {
                let s1 = k.get(a, b) * i[d] + k.get(b, d) * i[a] + k.get(d, a) * i[b];
                let s2 = i[a] * i[b] * i[d];
                let r = c.get(a, b, d) - coef_a * s1 - coef_b * s2;
                res2 += r * r;
            }
        }
    }
    Ok(SemiCFit {
        p_fit: (n as f64 + 1.0) * coef_a,
        a: coef_a,
        b: coef_b,
        residual_rel: (res2 / c_norm2.max(1e-300)).sqrt(),
    })
}

/// Relative deviation of C from (1/(n+1)) sym(K (x) I); zero_torsion marks
/// the guarded C = 0 case.
#[derive(Clone, Copy, Debug)]
pub struct CReducibleResidual {
    pub residual_rel: f64,
    pub zero_torsion: bool,
}

pub fn c_reducible_residual(f: &Norm, y: &DVector<f64>) -> Result<CReducibleResidual> {
    let n = f.dim();
    assert!(n >= 3, "C-reducibility needs n >= 3");
    let c = f.cartan_torsion(y)?;
    let c_norm = c.frobenius_norm();
    if c_norm < 1e-12 {
        return Ok(CReducibleResidual {
            residual_rel: 0.0,
            zero_torsion: true,
        });
    }
    let k = f.angular_metric(y)?;
    let i = f.mean_cartan(y)?;
    let scale = 1.0 / (n as f64 + 1.0);
    let mut res2 = 0.0f64;
    for a in 0..n {
        for b in 0..n {
            for d in 0..n {
                let s = k.get(a, b) * i[d] + k.get(b, d) * i[a] + k.get(d, a) * i[b];
                let r = c.get(a, b, d) - scale * s;
                res2 += r * r;
            }
        }
    }
    Ok(CReducibleResidual {
        residual_rel: res2.sqrt() / c_norm,
        zero_torsion: false,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Thresholds {
    /// max mean-Cartan norm below which the norm counts as Euclidean
    pub euclidean: f64,
    /// max C-reducibility residual (n >= 3)
    pub c_reducible: f64,
    /// singular values below this are treated as zero in quadratic fits
    pub fit_rank: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            euclidean: 1e-9,
            c_reducible: 1e-7,
            fit_rank: 1e-10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Euclidean,
    CReducible,
    SemiCReducible,
    General,
}

/// Quadratic relation a Fbar^2 + 2 beta(y) Fbar + y^T A y = 0 recovered by
/// a homogeneous least-squares fit over indicatrix samples.
#[derive(Clone, Debug)]
pub struct RandersFit {
    pub a: f64,
    pub beta: DVector<f64>,
    pub quad: DMatrix<f64>,
    pub residual: f64,
    /// a ~ 0: the relation is of Kropina type (non-compact indicatrix)
    pub kropina: bool,
}

#[derive(Clone, Debug)]
pub struct ClassificationResult {
    pub kind: NormKind,
    pub p_fit: f64,
    pub residual_rel: f64,
    pub mean_cartan_max: f64,
    pub c_residual_max: Option<f64>,
    pub randers_fit: Option<RandersFit>,
}

pub fn classify_norm(f: &Norm, samples: usize, seed: u64) -> Result<ClassificationResult> {
    classify_norm_with(f, samples, seed, &Thresholds::default())
}

pub fn classify_norm_with(
    f: &Norm,
    samples: usize,
    seed: u64,
    thr: &Thresholds,
) -> Result<ClassificationResult> {
    let n = f.dim();
    let needed = n * (n + 3) / 2 + 1;
    if samples < needed {
        return Err(Error::InsufficientSamples {
            needed,
            got: samples,
        });
    }
    let dirs = sampling::directions(n, samples, seed);
    let mut points = Vec::new();
    let mut mean_cartan_max = 0.0f64;
    for u in &dirs {
        let fy = match f.eval(u) {
            Ok(v) if v > 1e-12 => v,
            _ => continue,
        };
        let y = u.scale(1.0 / fy);
        if let Ok(i) = f.mean_cartan(&y) {
            mean_cartan_max = mean_cartan_max.max(i.norm());
        }
        points.push(y);
    }
    if points.len() < needed {
        return Err(Error::InsufficientSamples {
            needed,
            got: points.len(),
        });
    }
    if mean_cartan_max < thr.euclidean {
        return Ok(ClassificationResult {
            kind: NormKind::Euclidean,
            p_fit: 0.0,
            residual_rel: 0.0,
            mean_cartan_max,
            c_residual_max: None,
            randers_fit: None,
        });
    }
    let mut c_residual_max = None;
    if n >= 3 {
        let mut worst = 0.0f64;
        for y in &points {
            if let Ok(r) = c_reducible_residual(f, y) {
                worst = worst.max(r.residual_rel);
            }
        }
        c_residual_max = Some(worst);
    }
    let mut p_sum = 0.0f64;
    let mut p_count = 0usize;
    let mut semi_res_max = 0.0f64;
    for y in &points {
        match semi_c_reducible_fit(f, y) {
            Ok(fit) => {
                p_sum += fit.p_fit;
                p_count += 1;
                semi_res_max = semi_res_max.max(fit.residual_rel);
            }
            Err(_) => semi_res_max = f64::INFINITY,
        }
    }
    let p_fit = if p_count > 0 { p_sum / p_count as f64 } else { 0.0 };
    let c_reducible = c_residual_max.map_or(false, |r| r < thr.c_reducible);
    let randers_fit = if c_reducible {
        Some(fit_quadratic_relation(f, &points, thr.fit_rank)?)
    } else {
        None
    };
    let kind = if c_reducible {
        NormKind::CReducible
    } else if semi_res_max < thr.c_reducible {
        NormKind::SemiCReducible
    } else {
        NormKind::General
    };
    Ok(ClassificationResult {
        kind,
        p_fit,
        residual_rel: semi_res_max,
        mean_cartan_max,
        c_residual_max,
        randers_fit,
    })
}

fn fit_quadratic_relation(f: &Norm, points: &[DVector<f64>], rank_tol: f64) -> Result<RandersFit> {
    let n = points[0].len();
    let cols = 1 + n + n * (n + 1) / 2;
    let mut m = DMatrix::zeros(points.len(), cols);
    for (row, y) in points.iter().enumerate() {
        let fy = f.eval(y).map_err(|_| Error::EmptySample)?;
        m[(row, 0)] = fy * fy;
        for i in 0..n {
            m[(row, 1 + i)] = 2.0 * y[i] * fy;
        }
        let mut c = 1 + n;
        for i in 0..n {
            for j in i..n {
                m[(row, c)] = if i == j { y[i] * y[j] } else { 2.0 * y[i] * y[j] };
                c += 1;
            }
        }
    }
    let svd = m.svd(true, true);
    let vt = svd.v_t.as_ref().ok_or(Error::IllConditionedEigen)?;
    let sv = &svd.singular_values;
    let (mut min_idx, mut min_val) = (0usize, f64::INFINITY);
    for (i, s) in sv.iter().enumerate() {
        if *s < min_val {
            min_val = *s;
            min_idx = i;
        }
    }
    let mut v: DVector<f64> = vt.row(min_idx).transpose();
    if v[0] < 0.0 {
        v = -v;
    }
    let a = v[0];
    let beta = DVector::from_fn(n, |i, _| v[1 + i]);
    let mut quad = DMatrix::zeros(n, n);
    let mut c = 1 + n;
    for i in 0..n {
        for j in i..n {
            quad[(i, j)] = v[c];
            quad[(j, i)] = v[c];
            c += 1;
        }
    }
    let kropina = a.abs() < rank_tol.sqrt() || a.abs() < 1e-6 * beta.norm().max(quad.norm());
    Ok(RandersFit {
        a,
        beta,
        quad,
        residual: min_val / sv.iter().fold(0.0f64, |acc, s| acc.max(*s)).max(1e-300),
        kropina,
    })
}

/// Checks invariance of F under random orthogonal maps that fix the span
/// of `axis_basis` pointwise and rotate its orthogonal complement.
pub fn symmetry_check(
    f: &Norm,
    axis_basis: &[DVector<f64>],
    trials: usize,
    seed: u64,
) -> Result<(bool, f64)> {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    let n = f.dim();
    let p = axis_basis.len();
    assert!(p < n, "axis must leave room for a rotation");
    let mut basis = DMatrix::zeros(n, p);
    for (j, v) in axis_basis.iter().enumerate() {
        basis.set_column(j, v);
    }
    let qr = basis.qr();
    let q_axis = qr.q();
    if qr.r().lu().determinant().abs() < 1e-12 {
        return Err(Error::InvalidParam("axis vectors must be independent".into()));
    }
    // orthonormal basis of the complement: full QR of [axis | random]
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = n - p;
    let mut full = DMatrix::zeros(n, n);
    for j in 0..p {
        full.set_column(j, &q_axis.column(j).into_owned());
    }
    for j in p..n {
        let mut col = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        for k in 0..j {
            let prev = full.column(k).into_owned();
            let proj = prev.dot(&col);
            col -= prev.scale(proj);
        }
        full.set_column(j, &col.scale(1.0 / col.norm()));
    }
    let comp = full.columns(p, m).into_owned();
    let proj_axis = &q_axis * q_axis.transpose();
    let mut max_violation = 0.0f64;
    for _ in 0..trials {
        let gauss = DMatrix::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let rot = gauss.qr().q();
        let map = &proj_axis + &comp * rot * comp.transpose();
        for _ in 0..8 {
            let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let (Ok(fy), Ok(fay)) = (f.eval(&y), f.eval(&(&map * &y))) else {
                continue;
            };
            if fy > 1e-12 {
                max_violation = max_violation.max((fay - fy).abs() / fy);
            }
        }
    }
    Ok((max_violation < 1e-10, max_violation))
}
