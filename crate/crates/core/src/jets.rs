//! Truncated multivariate Taylor polynomials of total degree <= 3.
//!
//! A [`Jet`] carries the value and all mixed partial derivatives of a smooth
//! function up to third order, propagated exactly through ring operations and
//! elementary functions. Third order is the deepest derivative the Cartan
//! torsion needs, so the degree is fixed.

use std::collections::HashMap;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};

/// Fixed truncation degree.
pub const DEGREE: usize = 3;

/// Constant terms below this magnitude make Taylor inversion meaningless.
pub const NEAR_ZERO: f64 = 1e-14;

type MultiIndex = Vec<u8>;

/// Dense coefficient layout for a given number of variables: the multi-index
/// list in graded-lex order, positions, and the truncated product table.
struct IndexTable {
    indices: Vec<MultiIndex>,
    pos: HashMap<MultiIndex, usize>,
    /// prod[i * len + j] = position of indices[i] + indices[j], or usize::MAX
    /// when the sum exceeds the truncation degree.
    prod: Vec<usize>,
}

impl IndexTable {
    fn build(num_vars: usize) -> Self {
        let mut indices = Vec::new();
        for degree in 0..=DEGREE {
            let mut idx = vec![0u8; num_vars];
            gen_indices(&mut indices, &mut idx, 0, degree as u8);
        }
        let pos: HashMap<_, _> = indices
            .iter()
            .enumerate()
            .map(|(k, v)| (v.clone(), k))
            .collect();
        let len = indices.len();
        let mut prod = vec![usize::MAX; len * len];
        for i in 0..len {
            for j in 0..len {
                let total: u8 = indices[i].iter().zip(&indices[j]).map(|(a, b)| a + b).sum();
                if usize::from(total) <= DEGREE {
                    let sum: MultiIndex = indices[i]
                        .iter()
                        .zip(&indices[j])
                        .map(|(a, b)| a + b)
                        .collect();
                    prod[i * len + j] = pos[&sum];
                }
            }
        }
        IndexTable { indices, pos, prod }
    }
}

fn gen_indices(out: &mut Vec<MultiIndex>, idx: &mut MultiIndex, var: usize, remaining: u8) {
    if var == idx.len() {
        if remaining == 0 {
            out.push(idx.clone());
        }
        return;
    }
    if var + 1 == idx.len() {
        idx[var] = remaining;
        out.push(idx.clone());
        idx[var] = 0;
        return;
    }
    for d in (0..=remaining).rev() {
        idx[var] = d;
        gen_indices(out, idx, var + 1, remaining - d);
        idx[var] = 0;
    }
}

fn table(num_vars: usize) -> Arc<IndexTable> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<IndexTable>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    guard
        .entry(num_vars)
        .or_insert_with(|| Arc::new(IndexTable::build(num_vars)))
        .clone()
}

/// Truncated Taylor polynomial in `num_vars` variables, total degree <= 3.
#[derive(Clone)]
pub struct Jet {
    num_vars: usize,
    coeffs: Vec<f64>,
    table: Arc<IndexTable>,
}

impl std::fmt::Debug for Jet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Jet")
            .field("num_vars", &self.num_vars)
            .field("coeffs", &self.coeffs)
            .finish()
    }
}

impl PartialEq for Jet {
    fn eq(&self, other: &Self) -> bool {
        self.num_vars == other.num_vars && self.coeffs == other.coeffs
    }
}

impl Jet {
    pub fn constant(num_vars: usize, value: f64) -> Self {
        let table = table(num_vars);
        let mut coeffs = vec![0.0; table.indices.len()];
        coeffs[0] = value;
        Jet {
            num_vars,
            coeffs,
            table,
        }
    }

    /// Jet of `value + sum_i linear[i] * t_i`.
    pub fn affine(value: f64, linear: &[f64]) -> Self {
        let num_vars = linear.len();
        let mut jet = Jet::constant(num_vars, value);
        for (i, &l) in linear.iter().enumerate() {
            let mut idx = vec![0u8; num_vars];
            idx[i] = 1;
            let p = jet.table.pos[&idx];
            jet.coeffs[p] = l;
        }
        jet
    }

    /// The i-th variable as a jet: `value + t_i`.
    pub fn variable(num_vars: usize, i: usize, value: f64) -> Self {
        let mut linear = vec![0.0; num_vars];
        linear[i] = 1.0;
        Jet::affine(value, &linear)
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn const_term(&self) -> f64 {
        self.coeffs[0]
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeff(&self, idx: &[u8]) -> f64 {
        assert_eq!(idx.len(), self.num_vars);
        self.coeffs[self.table.pos[idx]]
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }

    /// Multi-indices paired with coefficients, graded-lex order.
    pub fn terms(&self) -> impl Iterator<Item = (&[u8], f64)> {
        self.table
            .indices
            .iter()
            .map(|i| i.as_slice())
            .zip(self.coeffs.iter().copied())
    }

    /// Mixed partial derivative `idx! * coeff[idx]`.
    pub fn extract_partial(&self, idx: &[u8]) -> f64 {
        let fact: f64 = idx
            .iter()
            .map(|&d| match d {
                0 | 1 => 1.0,
                2 => 2.0,
                _ => 6.0,
            })
            .product();
        self.coeff(idx) * fact
    }

    pub fn scale(&self, s: f64) -> Jet {
        let mut out = self.clone();
        for c in &mut out.coeffs {
            *c *= s;
        }
        out
    }

    fn mul_impl(&self, other: &Jet) -> Jet {
        assert_eq!(self.num_vars, other.num_vars, "jet variable count mismatch");
        let len = self.coeffs.len();
        let mut out = vec![0.0; len];
        let prod = &self.table.prod;
        for (i, &a) in self.coeffs.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let row = &prod[i * len..(i + 1) * len];
            for (j, &b) in other.coeffs.iter().enumerate() {
                if b == 0.0 {
                    continue;
                }
                let k = row[j];
                if k != usize::MAX {
                    out[k] += a * b;
                }
            }
        }
        Jet {
            num_vars: self.num_vars,
            coeffs: out,
            table: self.table.clone(),
        }
    }

    pub fn div(&self, other: &Jet) -> Result<Jet> {
        Ok(self.mul_impl(&other.recip()?))
    }

    /// Compose with a univariate function given by value and first three
    /// derivatives at the jet's constant term.
    fn compose1(&self, f: [f64; 4]) -> Jet {
        let mut h = self.clone();
        h.coeffs[0] = 0.0;
        // Horner in h: f0 + h*(f1 + h*(f2/2 + h*f3/6))
        let mut acc = Jet::constant(self.num_vars, f[3] / 6.0);
        acc = acc.mul_impl(&h);
        acc.coeffs[0] += f[2] / 2.0;
        acc = acc.mul_impl(&h);
        acc.coeffs[0] += f[1];
        acc = acc.mul_impl(&h);
        acc.coeffs[0] += f[0];
        acc
    }

    pub fn recip(&self) -> Result<Jet> {
        let c = self.const_term();
        if c.abs() < NEAR_ZERO {
            return Err(Error::DivisionByNearZero);
        }
        let c2 = c * c;
        Ok(self.compose1([1.0 / c, -1.0 / c2, 2.0 / (c2 * c), -6.0 / (c2 * c2)]))
    }

    pub fn sqrt(&self) -> Result<Jet> {
        let c = self.const_term();
        if c <= 0.0 {
            return Err(Error::DomainError {
                func: "sqrt",
                value: c,
            });
        }
        let r = c.sqrt();
        Ok(self.compose1([
            r,
            0.5 / r,
            -0.25 / (r * c),
            0.375 / (r * c * c),
        ]))
    }

    pub fn exp(&self) -> Jet {
        let e = self.const_term().exp();
        self.compose1([e, e, e, e])
    }

    pub fn ln(&self) -> Result<Jet> {
        let c = self.const_term();
        if c <= 0.0 {
            return Err(Error::DomainError {
                func: "log",
                value: c,
            });
        }
        Ok(self.compose1([c.ln(), 1.0 / c, -1.0 / (c * c), 2.0 / (c * c * c)]))
    }

    /// Integer power by repeated squaring; negative exponents go through
    /// Taylor inversion.
    pub fn powi(&self, n: i32) -> Result<Jet> {
        if n < 0 {
            return self.recip()?.powi(-n);
        }
        let mut result = Jet::constant(self.num_vars, 1.0);
        let mut base = self.clone();
        let mut e = n as u32;
        while e > 0 {
            if e & 1 == 1 {
                result = result.mul_impl(&base);
            }
            e >>= 1;
            if e > 0 {
                base = base.mul_impl(&base);
            }
        }
        Ok(result)
    }

    /// Real power: integer exponents use repeated multiplication, anything
    /// else requires a positive base and goes through exp/log.
    pub fn powf(&self, r: f64) -> Result<Jet> {
        if r.fract() == 0.0 && r.abs() <= i32::MAX as f64 {
            return self.powi(r as i32);
        }
        let c = self.const_term();
        if c <= 0.0 {
            return Err(Error::DomainError {
                func: "pow",
                value: c,
            });
        }
        Ok(self.ln()?.scale(r).exp())
    }
}

impl Add for &Jet {
    type Output = Jet;
    fn add(self, other: &Jet) -> Jet {
        assert_eq!(self.num_vars, other.num_vars, "jet variable count mismatch");
        let mut out = self.clone();
        for (c, o) in out.coeffs.iter_mut().zip(&other.coeffs) {
            *c += o;
        }
        out
    }
}

impl Sub for &Jet {
    type Output = Jet;
    fn sub(self, other: &Jet) -> Jet {
        assert_eq!(self.num_vars, other.num_vars, "jet variable count mismatch");
        let mut out = self.clone();
        for (c, o) in out.coeffs.iter_mut().zip(&other.coeffs) {
            *c -= o;
        }
        out
    }
}

impl Mul for &Jet {
    type Output = Jet;
    fn mul(self, other: &Jet) -> Jet {
        self.mul_impl(other)
    }
}

impl Neg for &Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}
