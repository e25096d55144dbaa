//! The deformation engine: F maps to F * phi(beta_1/F, ..., beta_p/F).
//! Transformed-tensor formulas, rho-functions, validity checking,
//! composition, inversion, iteration and the difference norm.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::jets::Jet;
use crate::norms::{invert_spd, Minkowski, Norm, OneForm};
use crate::phi::{Expr, PhiExpr};
use crate::sampling;
use crate::tensors::SymTensor2;

/// A sequence of linearly independent 1-forms plus a profile of matching
/// arity.
#[derive(Clone, Debug)]
pub struct DeformationSpec {
    betas: Vec<OneForm>,
    phi: PhiExpr,
}

impl DeformationSpec {
    pub fn new(betas: Vec<OneForm>, phi: PhiExpr) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::RankDeficientBetas);
        }
        let n = betas[0].dim();
        if betas.iter().any(|b| b.dim() != n) {
            return Err(Error::InvalidParam("1-forms of mixed dimension".into()));
        }
        if phi.arity() != betas.len() {
            return Err(Error::InvalidParam(format!(
                "phi arity {} != number of 1-forms {}",
                phi.arity(),
                betas.len()
            )));
        }
        if betas.len() > n {
            return Err(Error::InvalidParam("more 1-forms than dimensions".into()));
        }
        let m = DMatrix::from_fn(betas.len(), n, |i, j| betas[i].0[j]);
        if m.rank(1e-10) < betas.len() {
            return Err(Error::RankDeficientBetas);
        }
        Ok(DeformationSpec { betas, phi })
    }

    pub fn p(&self) -> usize {
        self.betas.len()
    }

    pub fn dim(&self) -> usize {
        self.betas[0].dim()
    }

    pub fn betas(&self) -> &[OneForm] {
        &self.betas
    }

    pub fn phi(&self) -> &PhiExpr {
        &self.phi
    }

    /// s_i = beta_i(y) / F(y).
    pub fn s_values(&self, y: &DVector<f64>, f: f64) -> Vec<f64> {
        self.betas.iter().map(|b| b.apply(y) / f).collect()
    }
}

/// Apply a deformation, producing the lazy deformed norm.
pub fn apply(f: Norm, spec: DeformationSpec) -> Result<Norm> {
    Norm::deformed(f, spec)
}

/// The derivative combinations of phi that govern the transformed tensors.
#[derive(Clone, Debug)]
pub struct RhoValues {
    pub rho: f64,
    pub rho1: Vec<f64>,
    pub rho0: DMatrix<f64>,
}

pub fn rho_functions(phi: &PhiExpr, s: &[f64]) -> Result<RhoValues> {
    let d = phi.derivs(s)?;
    Ok(rho_from_derivs(&d, s))
}

fn rho_from_derivs(d: &crate::phi::PhiDerivs, s: &[f64]) -> RhoValues {
    let p = d.arity;
    let phi = d.value;
    let s_dot: f64 = (0..p).map(|i| s[i] * d.d1[i]).sum();
    let rho = phi * (phi - s_dot);
    let rho0 = DMatrix::from_fn(p, p, |i, j| phi * d.d2.get(i, j) + d.d1[i] * d.d1[j]);
    let rho1: Vec<f64> = (0..p)
        .map(|i| phi * d.d1[i] - (0..p).map(|j| s[j] * rho0[(i, j)]).sum::<f64>())
        .collect();
    RhoValues { rho, rho1, rho0 }
}

struct TensorContext {
    fy: f64,
    s: Vec<f64>,
    beta_y: Vec<f64>,
    rho: RhoValues,
    derivs: crate::phi::PhiDerivs,
    g: SymTensor2,
    gy: DVector<f64>,
    /// g_y-duals beta_i^sharp.
    sharps: Vec<DVector<f64>>,
}

fn tensor_context(f: &Norm, spec: &DeformationSpec, y: &DVector<f64>) -> Result<TensorContext> {
    let fy = f.eval(y)?;
    if fy <= 0.0 {
        return Err(Error::outside_domain(y));
    }
    let s = spec.s_values(y, fy);
    let derivs = spec.phi().derivs(&s)?;
    let rho = rho_from_derivs(&derivs, &s);
    let g = f.fundamental_tensor(y)?;
    let gy = g.contract(y);
    let ginv = invert_spd(&g)?;
    let sharps = spec.betas().iter().map(|b| &ginv * &b.0).collect();
    let beta_y = spec.betas().iter().map(|b| b.apply(y)).collect();
    Ok(TensorContext {
        fy,
        s,
        beta_y,
        rho,
        derivs,
        g,
        gy,
        sharps,
    })
}

/// Closed-form fundamental tensor of the deformed norm, contracted with
/// (u, v); g_y and the rho-functions come from the base norm.
pub fn gbar_formula(
    f: &Norm,
    spec: &DeformationSpec,
    y: &DVector<f64>,
    u: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<f64> {
    let ctx = tensor_context(f, spec, y)?;
    let p = spec.p();
    let bu: Vec<f64> = spec.betas().iter().map(|b| b.apply(u)).collect();
    let bv: Vec<f64> = spec.betas().iter().map(|b| b.apply(v)).collect();
    let gyu = ctx.gy.dot(u);
    let gyv = ctx.gy.dot(v);
    let mut acc = ctx.rho.rho * ctx.g.bilinear(u, v);
    for i in 0..p {
        for j in 0..p {
            acc += ctx.rho.rho0[(i, j)] * bu[i] * bv[j];
        }
        acc += ctx.rho.rho1[i] * (bu[i] * gyv + bv[i] * gyu) / ctx.fy;
        acc -= ctx.rho.rho1[i] * ctx.beta_y[i] * gyu * gyv / ctx.fy.powi(3);
    }
    Ok(acc)
}

/// Rank-one form of the transformed fundamental tensor; requires
/// epsilon = sum_j s_j rho1^j bounded away from zero.
pub fn gbar_rank_form(
    f: &Norm,
    spec: &DeformationSpec,
    y: &DVector<f64>,
    u: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<f64> {
    let ctx = tensor_context(f, spec, y)?;
    let p = spec.p();
    let eps: f64 = (0..p).map(|j| ctx.s[j] * ctx.rho.rho1[j]).sum();
    if eps.abs() <= 1e-10 {
        return Err(Error::EpsilonNearZero);
    }
    let bu: Vec<f64> = spec.betas().iter().map(|b| b.apply(u)).collect();
    let bv: Vec<f64> = spec.betas().iter().map(|b| b.apply(v)).collect();
    let mut y_tilde = y.scale(-1.0 / ctx.fy);
    for i in 0..p {
        y_tilde += ctx.sharps[i].scale(ctx.rho.rho1[i] / eps);
    }
    let g_yt_u = ctx.g.bilinear(&y_tilde, u);
    let g_yt_v = ctx.g.bilinear(&y_tilde, v);
    let mut acc = ctx.rho.rho * ctx.g.bilinear(u, v) - eps * g_yt_u * g_yt_v;
    for i in 0..p {
        for j in 0..p {
            acc += (ctx.rho.rho0[(i, j)] + ctx.rho.rho1[i] * ctx.rho.rho1[j] / eps)
                * bu[i]
                * bv[j];
        }
    }
    Ok(acc)
}

/// Closed-form Cartan torsion of the deformed norm, contracted with
/// (u, v, w).
pub fn cartan_bar_formula(
    f: &Norm,
    spec: &DeformationSpec,
    y: &DVector<f64>,
    u: &DVector<f64>,
    v: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<f64> {
    let ctx = tensor_context(f, spec, y)?;
    let p = spec.p();
    let c = f.cartan_torsion(y)?;
    let k = f.angular_metric(y)?;
    // p_{yi} = beta_i^sharp - s_i y / F
    let pyi: Vec<DVector<f64>> = (0..p)
        .map(|i| &ctx.sharps[i] - y.scale(ctx.s[i] / ctx.fy))
        .collect();
    let mut p_tilde = DVector::zeros(f.dim());
    for i in 0..p {
        p_tilde += pyi[i].scale(ctx.rho.rho1[i]);
    }
    let g = &ctx.g;
    let mut acc = 2.0 * ctx.rho.rho * c.trilinear(u, v, w);
    acc += (k.bilinear(u, v) * g.bilinear(&p_tilde, w)
        + k.bilinear(v, w) * g.bilinear(&p_tilde, u)
        + k.bilinear(w, u) * g.bilinear(&p_tilde, v))
        / ctx.fy;
    let gpu: Vec<f64> = (0..p).map(|i| g.bilinear(&pyi[i], u)).collect();
    let gpv: Vec<f64> = (0..p).map(|i| g.bilinear(&pyi[i], v)).collect();
    let gpw: Vec<f64> = (0..p).map(|i| g.bilinear(&pyi[i], w)).collect();
    let d = &ctx.derivs;
    for i in 0..p {
        for j in 0..p {
            for l in 0..p {
                let coef = d.d1[i] * d.d2.get(j, l)
                    + d.d1[j] * d.d2.get(i, l)
                    + d.d1[l] * d.d2.get(i, j)
                    + d.value * d.d3.get(i, j, l);
                acc += coef * gpu[i] * gpv[j] * gpw[l] / ctx.fy;
            }
        }
    }
    Ok(acc / 2.0)
}

/// Partial derivatives of Fbar^2/2 with respect to (F, beta_1, ..., beta_p),
/// in closed form, together with the residual of the Euler 0-homogeneity
/// identity checked on an exact jet of the same function.
#[derive(Clone, Debug)]
pub struct HalfF2Partials {
    pub d_f: f64,
    pub d_beta: Vec<f64>,
    pub d_ff: f64,
    pub d_f_beta: Vec<f64>,
    pub d_beta_beta: DMatrix<f64>,
    /// max |closed form - jet value| over the first and second partials
    pub closed_vs_jet: f64,
    /// max over (mu, nu) of |h_{F mu nu} F + sum_k h_{beta_k mu nu} beta_k|
    pub euler_residual: f64,
}

pub fn half_f2_partials(
    f: &Norm,
    spec: &DeformationSpec,
    y: &DVector<f64>,
) -> Result<HalfF2Partials> {
    let fy = f.eval(y)?;
    if fy <= 0.0 {
        return Err(Error::outside_domain(y));
    }
    let p = spec.p();
    let s = spec.s_values(y, fy);
    let d = spec.phi().derivs(&s)?;
    let rho = rho_from_derivs(&d, &s);
    let d_f = fy * rho.rho;
    let d_beta: Vec<f64> = (0..p).map(|i| fy * d.value * d.d1[i]).collect();
    // 1-homogeneity of [Fbar^2/2]_F gives F h_FF + sum_k beta_k h_{F beta_k} = F rho
    let d_ff = rho.rho - (0..p).map(|i| s[i] * rho.rho1[i]).sum::<f64>();
    let d_f_beta = rho.rho1.clone();
    let d_beta_beta = rho.rho0.clone();

    // jet of h(z0, z) = z0^2 phi(z/z0)^2 / 2 in the p+1 variables (F, beta)
    let nv = p + 1;
    let z0 = Jet::variable(nv, 0, fy);
    let args: Vec<Jet> = (0..p)
        .map(|i| Jet::variable(nv, i + 1, spec.betas()[i].apply(y)).div(&z0))
        .collect::<Result<_>>()?;
    let ph = spec.phi().eval(&args)?;
    let h = (&(&z0 * &z0) * &(&ph * &ph)).scale(0.5);
    let part = |idx: &[usize]| -> f64 {
        let mut mi = vec![0u8; nv];
        for &i in idx {
            mi[i] += 1;
        }
        h.extract_partial(&mi)
    };
    let mut closed_vs_jet = (d_f - part(&[0])).abs().max((d_ff - part(&[0, 0])).abs());
    for i in 0..p {
        closed_vs_jet = closed_vs_jet
            .max((d_beta[i] - part(&[i + 1])).abs())
            .max((d_f_beta[i] - part(&[0, i + 1])).abs());
        for j in 0..p {
            closed_vs_jet = closed_vs_jet.max((d_beta_beta[(i, j)] - part(&[i + 1, j + 1])).abs());
        }
    }
    let beta_vals: Vec<f64> = spec.betas().iter().map(|b| b.apply(y)).collect();
    let mut euler_residual = 0.0f64;
    for mu in 0..nv {
        for nu in mu..nv {
            let mut r = part(&[0, mu, nu]) * fy;
            for k in 0..p {
                r += part(&[k + 1, mu, nu]) * beta_vals[k];
            }
            euler_residual = euler_residual.max(r.abs());
        }
    }
    Ok(HalfF2Partials {
        d_f,
        d_beta,
        d_ff,
        d_f_beta,
        d_beta_beta,
        closed_vs_jet,
        euler_residual,
    })
}

/// Structured record of the positivity/regularity criteria over indicatrix
/// samples.
#[derive(Clone, Debug)]
pub struct ValidityReport {
    pub p: usize,
    /// phi - sum_i s_i dphi_i > 0 at all usable samples
    pub cond_p1: bool,
    /// phi > 0 at all usable samples
    pub phi_positive: bool,
    /// p = 1: phi - s dphi > 0
    pub yava1: Option<bool>,
    /// p = 1: phi - s dphi + (b^2 - s^2) ddphi > 0, pointwise b^2
    pub yava2: Option<bool>,
    /// p > 1: det Psi > 0 and the second-derivative block of psi = phi^2 PSD
    pub hess_psi_pd: Option<bool>,
    /// smallest eigenvalue of gbar_y positive at every usable sample
    pub gbar_pd: bool,
    pub min_eigen: f64,
    pub worst_sample: DVector<f64>,
    pub samples_used: usize,
    /// samples where evaluation left the domain (conic norms)
    pub domain_failures: usize,
}

impl ValidityReport {
    pub fn all_passed(&self) -> bool {
        self.cond_p1
            && self.phi_positive
            && self.yava1.unwrap_or(true)
            && self.yava2.unwrap_or(true)
            && self.hess_psi_pd.unwrap_or(true)
            && self.gbar_pd
            && self.domain_failures == 0
            && self.samples_used > 0
    }
}

pub fn validity_check(
    f: &Norm,
    spec: &DeformationSpec,
    n_samples: usize,
    seed: u64,
) -> Result<ValidityReport> {
    if n_samples == 0 {
        return Err(Error::InvalidParam("n_samples must be >= 1".into()));
    }
    let n = f.dim();
    let p = spec.p();
    let deformed = Norm::deformed(f.clone(), spec.clone())?;
    let dirs = sampling::directions(n, n_samples, seed);
    let mut report = ValidityReport {
        p,
        cond_p1: true,
        phi_positive: true,
        yava1: if p == 1 { Some(true) } else { None },
        yava2: if p == 1 { Some(true) } else { None },
        hess_psi_pd: if p > 1 { Some(true) } else { None },
        gbar_pd: true,
        min_eigen: f64::INFINITY,
        worst_sample: DVector::zeros(n),
        samples_used: 0,
        domain_failures: 0,
    };
    for u in &dirs {
        let fy = match f.eval(u) {
            Ok(v) if v > 1e-12 => v,
            _ => {
                report.domain_failures += 1;
                continue;
            }
        };
        let y = u.scale(1.0 / fy); // F(y) = 1
        let s = spec.s_values(&y, 1.0);
        let d = match spec.phi().derivs(&s) {
            Ok(d) => d,
            Err(_) => {
                report.domain_failures += 1;
                continue;
            }
        };
        report.samples_used += 1;
        if d.value <= 0.0 {
            report.phi_positive = false;
        }
        let s_dot: f64 = (0..p).map(|i| s[i] * d.d1[i]).sum();
        if d.value - s_dot <= 0.0 {
            report.cond_p1 = false;
        }
        if p == 1 {
            if d.value - s[0] * d.d1[0] <= 0.0 {
                report.yava1 = Some(false);
            }
            // pointwise b^2 = g_y(beta^sharp, beta^sharp)
            let b2 = match f
                .fundamental_tensor(&y)
                .and_then(|g| Ok((invert_spd(&g)? * &spec.betas()[0].0).dot(&spec.betas()[0].0)))
            {
                Ok(v) => v,
                Err(_) => {
                    report.domain_failures += 1;
                    continue;
                }
            };
            if d.value - s[0] * d.d1[0] + (b2 - s[0] * s[0]) * d.d2.get(0, 0) <= 0.0 {
                report.yava2 = Some(false);
            }
        } else {
            // psi = phi^2
            let psi = d.value * d.value;
            let dpsi: Vec<f64> = (0..p).map(|i| 2.0 * d.value * d.d1[i]).collect();
            let ddpsi = DMatrix::from_fn(p, p, |i, j| {
                2.0 * (d.d1[i] * d.d1[j] + d.value * d.d2.get(i, j))
            });
            let mut big = DMatrix::zeros(p + 1, p + 1);
            big[(0, 0)] = 2.0 * psi;
            for i in 0..p {
                big[(0, i + 1)] = dpsi[i];
                big[(i + 1, 0)] = dpsi[i];
                for j in 0..p {
                    big[(i + 1, j + 1)] = ddpsi[(i, j)];
                }
            }
            let det = big.determinant();
            let block_ok = ddpsi.symmetric_eigenvalues().min() >= -1e-10;
            if det <= 0.0 || !block_ok {
                report.hess_psi_pd = Some(false);
            }
        }
        match deformed.fundamental_tensor(&y) {
            Ok(g) => {
                let lam = g.min_eigenvalue();
                if lam < report.min_eigen {
                    report.min_eigen = lam;
                    report.worst_sample = y.clone();
                }
            }
            Err(_) => {
                report.domain_failures += 1;
            }
        }
    }
    if !report.min_eigen.is_finite() || report.min_eigen <= 0.0 {
        report.gbar_pd = false;
    }
    Ok(report)
}

/// Composition profile of two deformations with the same 1-forms:
/// phi(s) = phi1(s) * phi2(s / phi1(s)).
pub fn compose(phi1: &PhiExpr, phi2: &PhiExpr) -> Result<PhiExpr> {
    if phi1.arity() != phi2.arity() {
        return Err(Error::InvalidParam(
            "composed profiles must share their arity".into(),
        ));
    }
    let p = phi1.arity();
    let inner = phi2.substitute(p, |i| {
        Expr::Div(Box::new(Expr::Var(i)), Box::new(phi1.ast().clone()))
    });
    Ok(PhiExpr::from_ast(
        Expr::Mul(Box::new(phi1.ast().clone()), Box::new(inner.ast().clone())),
        p,
    ))
}

const INVERT_RESIDUAL_TOL: f64 = 1e-12;

/// Value of the inverse profile psi at `t`: the ray map Phi(s) = s/phi(s)
/// is inverted by a bracketed bisection with a Newton polish, and
/// psi(t) = 1 / phi(Phi^-1(t)).
pub fn invert(spec: &DeformationSpec, t: &[f64]) -> Result<f64> {
    invert_phi(spec.phi(), t)
}

pub fn invert_phi(phi: &PhiExpr, t: &[f64]) -> Result<f64> {
    assert_eq!(t.len(), phi.arity());
    let tau = t.iter().map(|v| v * v).sum::<f64>().sqrt();
    if tau == 0.0 {
        let v = phi.eval_scalar(&vec![0.0; t.len()])?;
        if v <= 0.0 {
            return Err(Error::DomainError {
                func: "invert",
                value: v,
            });
        }
        return Ok(1.0 / v);
    }
    let hat: Vec<f64> = t.iter().map(|v| v / tau).collect();
    let ray = |lambda: f64| -> Result<f64> {
        let s: Vec<f64> = hat.iter().map(|h| h * lambda).collect();
        let v = phi.eval_scalar(&s)?;
        if v <= 0.0 {
            return Err(Error::DomainError {
                func: "invert",
                value: v,
            });
        }
        Ok(lambda / v)
    };
    // bracket [lo, hi] with ray(lo) < tau <= ray(hi); lo = 0 is the known
    // limit even when phi itself is singular there (conic profiles)
    let mut lo = 0.0f64;
    let mut hi = tau;
    let mut hi_val = None;
    for _ in 0..200 {
        match ray(hi) {
            Ok(v) if v >= tau => {
                hi_val = Some(v);
                break;
            }
            Ok(_) => {
                lo = hi;
                hi *= 2.0;
            }
            Err(_) => {
                // out of phi's domain: pull back toward the bracket
                hi = 0.5 * (lo + hi);
                if hi - lo < 1e-300 {
                    return Err(Error::NoBracket);
                }
            }
        }
    }
    if hi_val.is_none() {
        return Err(Error::NoBracket);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        match ray(mid) {
            Ok(v) if v < tau => lo = mid,
            Ok(_) => hi = mid,
            Err(_) => lo = mid,
        }
        if hi - lo < 1e-15 * (1.0 + hi.abs()) {
            break;
        }
    }
    let mut lambda = 0.5 * (lo + hi);
    for _ in 0..8 {
        let s: Vec<f64> = hat.iter().map(|h| h * lambda).collect();
        let d = phi.derivs(&s)?;
        if d.value <= 0.0 {
            return Err(Error::DomainError {
                func: "invert",
                value: d.value,
            });
        }
        let s_dot: f64 = (0..s.len()).map(|i| s[i] * d.d1[i]).sum();
        let num = d.value - s_dot;
        if num <= 0.0 {
            return Err(Error::MonotonicityViolation);
        }
        let residual = lambda / d.value - tau;
        if residual.abs() <= INVERT_RESIDUAL_TOL {
            break;
        }
        lambda -= residual * d.value * d.value / num;
        lambda = lambda.clamp(lo, hi);
    }
    let s: Vec<f64> = hat.iter().map(|h| h * lambda).collect();
    let v = phi.eval_scalar(&s)?;
    Ok(1.0 / v)
}

/// Callable inverse profile.
pub fn invert_spec(spec: &DeformationSpec) -> impl Fn(&[f64]) -> Result<f64> {
    let phi = spec.phi().clone();
    move |t: &[f64]| invert_phi(&phi, t)
}

/// Evaluate the inverse deformation of a deformed norm at `y`:
/// returns Fbar(y) * psi(beta(y)/Fbar(y)), which recovers the base norm.
pub fn invert_eval(deformed: &Norm, y: &DVector<f64>) -> Result<f64> {
    let Norm::Deformed { spec, .. } = deformed else {
        return Err(Error::InvalidParam("invert_eval needs a deformed norm".into()));
    };
    let fbar = deformed.eval(y)?;
    if fbar <= 0.0 {
        return Err(Error::outside_domain(y));
    }
    let t = spec.s_values(y, fbar);
    Ok(fbar * invert_phi(spec.phi(), &t)?)
}

#[derive(Clone, Debug)]
pub struct IterationStep {
    pub norm: Norm,
    pub report: ValidityReport,
}

#[derive(Clone, Debug)]
pub struct IterationResult {
    pub steps: Vec<IterationStep>,
    /// 1-based index of the first step whose validity check fails.
    pub first_invalid: Option<usize>,
}

/// Iterate a p = 1 deformation: F_k = T_{beta,phi}(F_{k-1}).
pub fn iterate(
    f: &Norm,
    beta: &OneForm,
    phi: &PhiExpr,
    k: usize,
    samples: usize,
    seed: u64,
) -> Result<IterationResult> {
    let spec = DeformationSpec::new(vec![beta.clone()], phi.clone())?;
    let mut steps = Vec::with_capacity(k);
    let mut first_invalid = None;
    let mut current = f.clone();
    for step in 1..=k {
        let report = validity_check(&current, &spec, samples, seed).map_err(|e| {
            Error::IterationDomain {
                step,
                source: Box::new(e),
            }
        })?;
        let next = Norm::deformed(current, spec.clone())?;
        if first_invalid.is_none() && !report.all_passed() {
            first_invalid = Some(step);
        }
        steps.push(IterationStep {
            norm: next.clone(),
            report,
        });
        current = next;
    }
    Ok(IterationResult {
        steps,
        first_invalid,
    })
}

/// psi_k values at a scalar s for the iteration recurrence
/// psi_{k+1}(s) = psi_k(s) phi(s / psi_k(s)); psi_k is the profile of the
/// (k+1)-st iterate.
pub fn psi_sequence(phi: &PhiExpr, k: usize, s: f64) -> Result<Vec<f64>> {
    assert_eq!(phi.arity(), 1, "psi_sequence is a p = 1 construction");
    let mut cur = phi.eval_scalar(&[s]).map_err(|e| Error::IterationDomain {
        step: 0,
        source: Box::new(e),
    })?;
    let mut out = Vec::with_capacity(k);
    for step in 1..=k {
        let v = phi
            .eval_scalar(&[s / cur])
            .map_err(|e| Error::IterationDomain {
                step,
                source: Box::new(e),
            })?;
        cur *= v;
        out.push(cur);
    }
    Ok(out)
}

/// The difference norm Ftilde = |Fbar^2 - F^2|^(1/2) with its sufficient
/// positivity flags.
#[derive(Clone, Debug)]
pub struct DifferenceNorm {
    base: Norm,
    deformed: Norm,
    sign: f64,
    /// (phi - 1)(phi(phi - sum s_i dphi_i) - 1) > 0 held at all samples
    pub cond2_ok: bool,
    /// det PsiTilde > 0 and -psi convex at all samples (psi = phi^2)
    pub psi_tilde_ok: bool,
}

pub fn difference_norm(
    f: &Norm,
    spec: &DeformationSpec,
    samples: usize,
    seed: u64,
) -> Result<DifferenceNorm> {
    let p = spec.p();
    let deformed = Norm::deformed(f.clone(), spec.clone())?;
    let dirs = sampling::directions(f.dim(), samples, seed);
    let mut has_pos = false;
    let mut has_neg = false;
    let mut degenerate = false;
    let mut cond2_ok = true;
    let mut psi_tilde_ok = true;
    let mut used = 0usize;
    for u in &dirs {
        let fy = match f.eval(u) {
            Ok(v) if v > 1e-12 => v,
            _ => continue,
        };
        let y = u.scale(1.0 / fy);
        let s = spec.s_values(&y, 1.0);
        let d = match spec.phi().derivs(&s) {
            Ok(d) => d,
            Err(_) => continue,
        };
        used += 1;
        let diff = d.value - 1.0;
        if diff > 1e-9 {
            has_pos = true;
        } else if diff < -1e-9 {
            has_neg = true;
        }
        if (d.value * d.value - 1.0).abs() < 1e-12 {
            degenerate = true;
        }
        let s_dot: f64 = (0..p).map(|i| s[i] * d.d1[i]).sum();
        let rho = d.value * (d.value - s_dot);
        if diff * (rho - 1.0) <= 0.0 {
            cond2_ok = false;
        }
        // PsiTilde for psi = phi^2
        let psi = d.value * d.value;
        let dpsi: Vec<f64> = (0..p).map(|i| 2.0 * d.value * d.d1[i]).collect();
        let ddpsi = DMatrix::from_fn(p, p, |i, j| {
            2.0 * (d.d1[i] * d.d1[j] + d.value * d.d2.get(i, j))
        });
        let mut big = DMatrix::zeros(p + 1, p + 1);
        big[(0, 0)] = 2.0 * (1.0 - psi);
        for i in 0..p {
            big[(0, i + 1)] = -dpsi[i];
            big[(i + 1, 0)] = -dpsi[i];
            for j in 0..p {
                big[(i + 1, j + 1)] = -ddpsi[(i, j)];
            }
        }
        if big.determinant() <= 0.0 || ddpsi.symmetric_eigenvalues().max() > 1e-10 {
            psi_tilde_ok = false;
        }
    }
    if used == 0 {
        return Err(Error::EmptySample);
    }
    if has_pos && has_neg {
        return Err(Error::SignChange);
    }
    if degenerate {
        return Err(Error::DegenerateDifference);
    }
    let sign = if has_neg { -1.0 } else { 1.0 };
    Ok(DifferenceNorm {
        base: f.clone(),
        deformed,
        sign,
        cond2_ok,
        psi_tilde_ok,
    })
}

impl Minkowski for DifferenceNorm {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn eval_jet(&self, y: &DVector<f64>, dirs: &[DVector<f64>]) -> Result<Jet> {
        let fb = self.base.eval_jet(y, dirs)?;
        let fd = self.deformed.eval_jet(y, dirs)?;
        let diff = (&(&fd * &fd) - &(&fb * &fb)).scale(self.sign);
        if diff.const_term() <= 0.0 {
            return Err(Error::outside_domain(y));
        }
        diff.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phi::{builtin, parse};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn v(s: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(s)
    }

    fn spec1(phi: PhiExpr, beta: &[f64]) -> DeformationSpec {
        DeformationSpec::new(vec![OneForm::from_slice(beta)], phi).unwrap()
    }

    #[test]
    fn rank_deficient_betas_rejected() {
        let phi = builtin("shifted_kropina", &[]).unwrap();
        let betas = vec![
            OneForm::from_slice(&[1.0, 0.0]),
            OneForm::from_slice(&[2.0, 0.0]),
        ];
        assert!(matches!(
            DeformationSpec::new(betas, phi),
            Err(Error::RankDeficientBetas)
        ));
    }

    #[test]
    fn rho_closed_forms() {
        // hand-derived values for the classic profiles
        let kropina = builtin("kropina", &[1.0]).unwrap();
        let r = rho_functions(&kropina, &[1.0]).unwrap();
        assert_relative_eq!(r.rho, 2.0, max_relative = 1e-13);
        assert_relative_eq!(r.rho0[(0, 0)], 3.0, max_relative = 1e-13);
        assert_relative_eq!(r.rho1[0], -4.0, max_relative = 1e-13);

        let quadratic = builtin("quadratic", &[]).unwrap();
        let r = rho_functions(&quadratic, &[0.0]).unwrap();
        assert_relative_eq!(r.rho, 1.0, max_relative = 1e-13);
        assert_relative_eq!(r.rho0[(0, 0)], 6.0, max_relative = 1e-13);
        assert_relative_eq!(r.rho1[0], 2.0, max_relative = 1e-13);
    }

    #[test]
    fn rho_shifted_kropina_point() {
        let phi = builtin("shifted_kropina", &[]).unwrap();
        let r = rho_functions(&phi, &[1.0, 1.0]).unwrap();
        assert_relative_eq!(r.rho, 9.0, max_relative = 1e-12);
        assert_relative_eq!(r.rho1[0], -9.0, max_relative = 1e-12);
        assert_relative_eq!(r.rho1[1], 3.0, max_relative = 1e-12);
        assert_relative_eq!(r.rho0[(0, 0)], 7.0, max_relative = 1e-12);
        assert_relative_eq!(r.rho0[(0, 1)], -1.0, max_relative = 1e-12);
        assert_relative_eq!(r.rho0[(1, 1)], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn identity_profile_leaves_tensors() {
        let phi = parse("1", 1).unwrap();
        let spec = spec1(phi, &[0.3, 0.0]);
        let f = Norm::euclidean_unit(2);
        let y = v(&[1.0, 0.4]);
        let u = v(&[0.2, -0.9]);
        let w = v(&[1.1, 0.3]);
        let g = f.fundamental_tensor(&y).unwrap();
        assert_relative_eq!(
            gbar_formula(&f, &spec, &y, &u, &w).unwrap(),
            g.bilinear(&u, &w),
            max_relative = 1e-12
        );
        let c = f.cartan_torsion(&y).unwrap();
        assert_relative_eq!(
            cartan_bar_formula(&f, &spec, &y, &u, &w, &y).unwrap(),
            c.trilinear(&u, &w, &y),
            epsilon = 1e-12
        );
        // rank form is unusable: rho1 = 0 so eps = 0
        assert!(matches!(
            gbar_rank_form(&f, &spec, &y, &u, &w),
            Err(Error::EpsilonNearZero)
        ));
    }

    #[test]
    fn gbar_formula_matches_jet_tensor() {
        let spec = spec1(builtin("randers", &[]).unwrap(), &[0.3, 0.1]);
        let f = Norm::euclidean_unit(2);
        let bar = Norm::deformed(f.clone(), spec.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let y = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0f64)) + v(&[1.5, 0.0]);
            let u = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            let w = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            let gbar = bar.fundamental_tensor(&y).unwrap();
            assert_relative_eq!(
                gbar_formula(&f, &spec, &y, &u, &w).unwrap(),
                gbar.bilinear(&u, &w),
                max_relative = 1e-9,
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn gbar_contracts_to_deformed_f_squared() {
        let spec = spec1(builtin("quadratic", &[]).unwrap(), &[0.2, 0.0, 0.1]);
        let f = Norm::m_root(4, 3).unwrap();
        let bar = Norm::deformed(f.clone(), spec.clone()).unwrap();
        let y = v(&[1.0, 0.6, -0.3]);
        let fbar = bar.eval(&y).unwrap();
        assert_relative_eq!(
            gbar_formula(&f, &spec, &y, &y, &y).unwrap(),
            fbar * fbar,
            max_relative = 1e-10
        );
    }

    #[test]
    fn rank_form_agrees_with_direct_formula() {
        let spec = spec1(builtin("randers", &[]).unwrap(), &[0.3, 0.0]);
        let f = Norm::euclidean_unit(2);
        let y = v(&[1.0, 0.5]);
        let fy = f.eval(&y).unwrap();
        let s = spec.s_values(&y, fy);
        // Randers: eps = s * rho1 with rho1 = 1
        let rho = rho_functions(spec.phi(), &s).unwrap();
        assert_relative_eq!(s[0] * rho.rho1[0], s[0], max_relative = 1e-13);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let u = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            let w = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            assert_relative_eq!(
                gbar_rank_form(&f, &spec, &y, &u, &w).unwrap(),
                gbar_formula(&f, &spec, &y, &u, &w).unwrap(),
                max_relative = 1e-9,
                epsilon = 1e-11
            );
        }
    }

    #[test]
    fn cartan_formula_matches_jet_tensor() {
        let spec = spec1(builtin("slope", &[]).unwrap(), &[0.2, 0.0, 0.05]);
        let f = Norm::euclidean_unit(3);
        let bar = Norm::deformed(f.clone(), spec.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let y = DVector::from_fn(3, |_, _| rng.gen_range(-0.5..0.5f64)) + v(&[2.0, 0.0, 0.0]);
            let u = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let w = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let x = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let cbar = bar.cartan_torsion(&y).unwrap();
            assert_relative_eq!(
                cartan_bar_formula(&f, &spec, &y, &u, &w, &x).unwrap(),
                cbar.trilinear(&u, &w, &x),
                max_relative = 1e-8,
                epsilon = 1e-10
            );
            // C(.,.,y) = 0 carries over to the deformed norm
            assert!(cartan_bar_formula(&f, &spec, &y, &u, &w, &y)
                .unwrap()
                .abs()
                < 1e-10);
        }
    }

    #[test]
    fn half_f2_closed_forms() {
        let spec = spec1(builtin("quadratic", &[]).unwrap(), &[0.25, 0.0]);
        let f = Norm::euclidean_unit(2);
        let y = v(&[1.0, 0.7]);
        let fy = f.eval(&y).unwrap();
        let s = spec.s_values(&y, fy);
        let rho = rho_functions(spec.phi(), &s).unwrap();
        let h = half_f2_partials(&f, &spec, &y).unwrap();
        assert_relative_eq!(h.d_f_beta[0], rho.rho1[0], max_relative = 1e-12);
        assert_relative_eq!(h.d_beta_beta[(0, 0)], rho.rho0[(0, 0)], max_relative = 1e-12);
        assert!(h.closed_vs_jet < 1e-11, "closed vs jet {}", h.closed_vs_jet);
        assert!(h.euler_residual < 1e-10, "euler {}", h.euler_residual);
    }

    #[test]
    fn validity_randers_small_beta_passes() {
        let spec = spec1(builtin("randers", &[]).unwrap(), &[0.5, 0.0]);
        let f = Norm::euclidean_unit(2);
        let r = validity_check(&f, &spec, 512, 1).unwrap();
        assert!(r.all_passed(), "{r:?}");
        assert!(r.min_eigen > 0.0);
    }

    #[test]
    fn validity_randers_large_beta_fails_gbar() {
        let spec = spec1(builtin("randers", &[]).unwrap(), &[1.2, 0.0]);
        let f = Norm::euclidean_unit(2);
        let r = validity_check(&f, &spec, 512, 1).unwrap();
        assert!(!r.gbar_pd, "{r:?}");
        assert!(!r.all_passed());
    }

    #[test]
    fn validity_kropina_reports_domain_failures() {
        let spec = spec1(builtin("kropina", &[1.0]).unwrap(), &[1.0, 0.0]);
        let f = Norm::euclidean_unit(2);
        let r = validity_check(&f, &spec, 512, 1).unwrap();
        assert!(r.domain_failures > 0, "{r:?}");
        assert!(!r.all_passed());
    }

    #[test]
    fn compose_randers_twice_is_double_shift() {
        let randers = builtin("randers", &[]).unwrap();
        let composed = compose(&randers, &randers).unwrap();
        for s in [-0.4, -0.1, 0.0, 0.2, 0.45] {
            assert_relative_eq!(
                composed.eval_scalar(&[s]).unwrap(),
                1.0 + 2.0 * s,
                max_relative = 1e-13,
                epsilon = 1e-13
            );
        }
    }

    #[test]
    fn compose_with_identity() {
        let one = parse("1", 1).unwrap();
        let slope = builtin("slope", &[]).unwrap();
        let composed = compose(&one, &slope).unwrap();
        for s in [-0.3, 0.0, 0.4] {
            assert_relative_eq!(
                composed.eval_scalar(&[s]).unwrap(),
                slope.eval_scalar(&[s]).unwrap(),
                max_relative = 1e-13
            );
        }
    }

    #[test]
    fn compose_is_associative_pointwise() {
        let a = builtin("randers", &[]).unwrap();
        let b = builtin("quadratic", &[]).unwrap();
        let c = builtin("slope", &[]).unwrap();
        let left = compose(&compose(&a, &b).unwrap(), &c).unwrap();
        let right = compose(&a, &compose(&b, &c).unwrap()).unwrap();
        for s in [-0.2, 0.0, 0.1, 0.3] {
            assert_relative_eq!(
                left.eval_scalar(&[s]).unwrap(),
                right.eval_scalar(&[s]).unwrap(),
                max_relative = 1e-11
            );
        }
    }

    #[test]
    fn two_step_apply_equals_composed_apply() {
        let beta = OneForm::from_slice(&[0.2, 0.1]);
        let p1 = builtin("randers", &[]).unwrap();
        let p2 = builtin("quadratic", &[]).unwrap();
        let f = Norm::euclidean_unit(2);
        let step1 = Norm::deformed(f.clone(), spec1(p1.clone(), &[0.2, 0.1])).unwrap();
        let two_step = Norm::deformed(step1, spec1(p2.clone(), &[0.2, 0.1])).unwrap();
        let composed = Norm::deformed(
            f,
            DeformationSpec::new(vec![beta], compose(&p1, &p2).unwrap()).unwrap(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let y = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0f64));
            if y.norm() < 0.1 {
                continue;
            }
            assert_relative_eq!(
                two_step.eval(&y).unwrap(),
                composed.eval(&y).unwrap(),
                max_relative = 1e-11
            );
        }
    }

    #[test]
    fn invert_randers_is_one_minus_t() {
        let spec = spec1(builtin("randers", &[]).unwrap(), &[0.3, 0.0]);
        for t in [0.0, 0.1, 0.25, 0.4, 0.6] {
            assert_relative_eq!(
                invert(&spec, &[t]).unwrap(),
                1.0 - t,
                max_relative = 1e-12,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn invert_identity_profile() {
        let spec = spec1(parse("1", 1).unwrap(), &[0.3, 0.0]);
        assert_relative_eq!(invert(&spec, &[0.37]).unwrap(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn invert_round_trip_quadratic() {
        let spec = spec1(builtin("quadratic", &[]).unwrap(), &[0.2, 0.0]);
        let f = Norm::euclidean_unit(2);
        let bar = Norm::deformed(f.clone(), spec).unwrap();
        for u in sampling::directions(2, 100, 0) {
            let recovered = invert_eval(&bar, &u).unwrap();
            assert_relative_eq!(recovered, f.eval(&u).unwrap(), max_relative = 1e-9);
        }
    }

    #[test]
    fn invert_out_of_range_target() {
        // circle profile: Phi(s) = s / sqrt(1 - s^2) covers all of R, but
        // a profile bounded below like 1/(1-s) on s < 1 has bounded image
        // for negative targets; use quadratic on the negative side:
        // Phi(s) = s/(1+s)^2 has minimum -... targets below are unreachable
        let spec = spec1(builtin("quadratic", &[]).unwrap(), &[0.2, 0.0]);
        // Phi(s) = s/(1+s)^2 on s > -1 attains its minimum -1/... at s -> -1
        // large negative targets cannot be bracketed
        assert!(matches!(
            invert(&spec, &[-50.0]),
            Err(Error::NoBracket | Error::MonotonicityViolation)
        ));
    }

    #[test]
    fn iterate_randers_flags_invalid_step() {
        let f = Norm::euclidean_unit(2);
        let beta = OneForm::from_slice(&[0.3, 0.0]);
        let phi = builtin("randers", &[]).unwrap();
        let result = iterate(&f, &beta, &phi, 5, 256, 1).unwrap();
        // F_k = F + k beta is a norm while k * 0.3 < 1
        assert_eq!(result.first_invalid, Some(4));
        let y = v(&[1.0, 0.0]);
        for (k, step) in result.steps.iter().enumerate() {
            assert_relative_eq!(
                step.norm.eval(&y).unwrap(),
                1.0 + 0.3 * (k as f64 + 1.0),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn iterate_identity_profile_is_stationary() {
        let f = Norm::euclidean_unit(2);
        let beta = OneForm::from_slice(&[0.3, 0.0]);
        let phi = parse("1", 1).unwrap();
        let result = iterate(&f, &beta, &phi, 3, 128, 1).unwrap();
        assert_eq!(result.first_invalid, None);
        let y = v(&[0.6, -0.8]);
        for step in &result.steps {
            assert_relative_eq!(step.norm.eval(&y).unwrap(), 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn kropina_psi_sequence_exponents() {
        let phi = builtin("kropina", &[1.0]).unwrap();
        for s in [0.5, 1.0, 2.0] {
            let psis = psi_sequence(&phi, 4, s).unwrap();
            for (k, psi) in psis.iter().enumerate() {
                let expo = 1.0 - 2f64.powi(k as i32 + 2);
                assert_relative_eq!(*psi, s.powf(expo), max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn difference_norm_cases() {
        let f = Norm::euclidean_unit(2);
        // phi == 2: Ftilde = sqrt(3) F
        let spec = spec1(parse("2", 1).unwrap(), &[0.3, 0.0]);
        let dn = difference_norm(&f, &spec, 256, 1).unwrap();
        let y = v(&[0.6, -0.8]);
        assert_relative_eq!(
            dn.eval(&y).unwrap(),
            3f64.sqrt(),
            max_relative = 1e-12
        );
        assert!(dn.cond2_ok);

        // randers on the full circle: phi - 1 = s changes sign
        let spec = spec1(builtin("randers", &[]).unwrap(), &[0.3, 0.0]);
        assert!(matches!(
            difference_norm(&f, &spec, 256, 1),
            Err(Error::SignChange)
        ));

        // circle profile: Fbar^2 - F^2 = -beta^2 vanishes on a hyperplane
        let spec = spec1(builtin("circle", &[]).unwrap(), &[0.5, 0.0]);
        assert!(matches!(
            difference_norm(&f, &spec, 256, 1),
            Err(Error::DegenerateDifference)
        ));
    }
}
