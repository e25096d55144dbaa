//! Expressions for the deformation profile phi(s1, ..., sp): a small
//! recursive-descent parser, jet evaluation, and the catalog of built-in
//! profiles.
//!
//! Grammar (whitespace ignored, byte offsets reported on error):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' ['-'] number)?
//! atom   := number | 's' digits | 'sqrt' '(' expr ')' | '(' expr ')'
//! ```
//!
//! `^` binds tighter than unary minus and its exponent is a real literal;
//! `*`, `/`, `+`, `-` are left associative.

use std::fmt;

use crate::error::{Error, Result};
use crate::jets::Jet;
use crate::tensors::SymTensor3;

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Zero-based variable index (`s1` parses to `Var(0)`).
    Var(usize),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Pow(Box<Expr>, f64),
    Sqrt(Box<Expr>),
}

/// A parsed phi expression together with its declared arity.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiExpr {
    ast: Expr,
    arity: usize,
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
#[error("{kind} at byte {offset}")]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ParseErrorKind {
    #[error("unexpected character '{0}'")]
    UnexpectedChar(char),
    #[error("unexpected end of input")]
    UnexpectedEnd,
    #[error("empty expression")]
    Empty,
    #[error("unknown function '{0}'")]
    UnknownFunction(String),
    #[error("variable s{index} exceeds arity {arity}")]
    UnknownVariable { index: usize, arity: usize },
    #[error("malformed number literal")]
    BadNumber,
    #[error("trailing input")]
    TrailingInput,
    #[error("expected a numeric exponent after '^'")]
    ExpectedExponent,
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    arity: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, kind: ParseErrorKind) -> ParseError {
        ParseError {
            offset: self.pos,
            kind,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn expect(&mut self, b: u8) -> std::result::Result<(), ParseError> {
        match self.peek() {
            Some(c) if c == b => {
                self.pos += 1;
                Ok(())
            }
            Some(c) => Err(self.err(ParseErrorKind::UnexpectedChar(c as char))),
            None => Err(self.err(ParseErrorKind::UnexpectedEnd)),
        }
    }

    fn expr(&mut self) -> std::result::Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(b'-') => {
                    self.pos += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> std::result::Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(b'/') => {
                    self.pos += 1;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> std::result::Result<Expr, ParseError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            // fold a negated literal into the constant so that printing a
            // negative constant re-parses to the same tree
            let inner = self.unary()?;
            return Ok(match inner {
                Expr::Const(c) => Expr::Const(-c),
                other => Expr::Neg(Box::new(other)),
            });
        }
        self.power()
    }

    fn power(&mut self) -> std::result::Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let mut sign = 1.0;
            if self.peek() == Some(b'-') {
                self.pos += 1;
                sign = -1.0;
            }
            match self.peek() {
                Some(c) if c.is_ascii_digit() || c == b'.' => {
                    let e = self.number()?;
                    Ok(Expr::Pow(Box::new(base), sign * e))
                }
                _ => Err(self.err(ParseErrorKind::ExpectedExponent)),
            }
        } else {
            Ok(base)
        }
    }

    fn number(&mut self) -> std::result::Result<f64, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| b.is_ascii_digit() || *b == b'.')
        {
            self.pos += 1;
        }
        if self
            .bytes
            .get(self.pos)
            .is_some_and(|b| *b == b'e' || *b == b'E')
        {
            self.pos += 1;
            if self
                .bytes
                .get(self.pos)
                .is_some_and(|b| *b == b'+' || *b == b'-')
            {
                self.pos += 1;
            }
            while self.bytes.get(self.pos).is_some_and(|b| b.is_ascii_digit()) {
                self.pos += 1;
            }
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        text.parse::<f64>().map_err(|_| ParseError {
            offset: start,
            kind: ParseErrorKind::BadNumber,
        })
    }

    fn atom(&mut self) -> std::result::Result<Expr, ParseError> {
        match self.peek() {
            None => Err(self.err(ParseErrorKind::UnexpectedEnd)),
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect(b')')?;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => Ok(Expr::Const(self.number()?)),
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                while self
                    .bytes
                    .get(self.pos)
                    .is_some_and(|b| b.is_ascii_alphanumeric())
                {
                    self.pos += 1;
                }
                let word = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
                if let Some(digits) = word.strip_prefix('s') {
                    if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
                        let index: usize = digits.parse().map_err(|_| ParseError {
                            offset: start,
                            kind: ParseErrorKind::BadNumber,
                        })?;
                        if index == 0 || index > self.arity {
                            return Err(ParseError {
                                offset: start,
                                kind: ParseErrorKind::UnknownVariable {
                                    index,
                                    arity: self.arity,
                                },
                            });
                        }
                        return Ok(Expr::Var(index - 1));
                    }
                }
                if word == "sqrt" {
                    self.expect(b'(')?;
                    let inner = self.expr()?;
                    self.expect(b')')?;
                    return Ok(Expr::Sqrt(Box::new(inner)));
                }
                Err(ParseError {
                    offset: start,
                    kind: ParseErrorKind::UnknownFunction(word.to_string()),
                })
            }
            Some(c) => Err(self.err(ParseErrorKind::UnexpectedChar(c as char))),
        }
    }
}

/// Parse `text` as a phi expression in variables `s1..s<arity>`.
pub fn parse(text: &str, arity: usize) -> std::result::Result<PhiExpr, ParseError> {
    let mut p = Parser {
        bytes: text.as_bytes(),
        pos: 0,
        arity,
    };
    if p.peek().is_none() {
        return Err(p.err(ParseErrorKind::Empty));
    }
    let ast = p.expr()?;
    if p.peek().is_some() {
        return Err(p.err(ParseErrorKind::TrailingInput));
    }
    Ok(PhiExpr { ast, arity })
}

// Precedence levels used for both parsing structure and printing.
fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Add(..) | Expr::Sub(..) => 1,
        Expr::Mul(..) | Expr::Div(..) => 2,
        // a negative literal prints with a leading minus, so it binds like
        // a unary negation
        Expr::Neg(..) => 3,
        Expr::Const(c) if *c < 0.0 => 3,
        Expr::Pow(..) => 4,
        _ => 5,
    }
}

fn fmt_expr(e: &Expr, min_prec: u8, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    let me = prec(e);
    if me < min_prec {
        write!(f, "(")?;
        fmt_expr(e, 0, f)?;
        return write!(f, ")");
    }
    match e {
        Expr::Const(c) => {
            if *c < 0.0 || c.is_sign_negative() {
                // keep "-c" printable without a separate Neg node
                write!(f, "-{}", -c)
            } else {
                write!(f, "{c}")
            }
        }
        Expr::Var(i) => write!(f, "s{}", i + 1),
        Expr::Add(a, b) => {
            fmt_expr(a, 1, f)?;
            write!(f, "+")?;
            fmt_expr(b, 2, f)
        }
        Expr::Sub(a, b) => {
            fmt_expr(a, 1, f)?;
            write!(f, "-")?;
            fmt_expr(b, 2, f)
        }
        Expr::Mul(a, b) => {
            fmt_expr(a, 2, f)?;
            write!(f, "*")?;
            fmt_expr(b, 3, f)
        }
        Expr::Div(a, b) => {
            fmt_expr(a, 2, f)?;
            write!(f, "/")?;
            fmt_expr(b, 3, f)
        }
        Expr::Neg(a) => {
            write!(f, "-")?;
            fmt_expr(a, 3, f)
        }
        Expr::Pow(a, r) => {
            fmt_expr(a, 5, f)?;
            if *r < 0.0 {
                write!(f, "^-{}", -r)
            } else {
                write!(f, "^{r}")
            }
        }
        Expr::Sqrt(a) => {
            write!(f, "sqrt(")?;
            fmt_expr(a, 0, f)?;
            write!(f, ")")
        }
    }
}

impl fmt::Display for PhiExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_expr(&self.ast, 0, f)
    }
}

fn eval_expr(e: &Expr, args: &[Jet]) -> Result<Jet> {
    let nv = args.first().map_or(0, Jet::num_vars);
    Ok(match e {
        Expr::Const(c) => Jet::constant(nv, *c),
        Expr::Var(i) => args[*i].clone(),
        Expr::Add(a, b) => &eval_expr(a, args)? + &eval_expr(b, args)?,
        Expr::Sub(a, b) => &eval_expr(a, args)? - &eval_expr(b, args)?,
        Expr::Mul(a, b) => &eval_expr(a, args)? * &eval_expr(b, args)?,
        Expr::Div(a, b) => eval_expr(a, args)?.div(&eval_expr(b, args)?)?,
        Expr::Neg(a) => -&eval_expr(a, args)?,
        Expr::Pow(a, r) => eval_expr(a, args)?.powf(*r)?,
        Expr::Sqrt(a) => eval_expr(a, args)?.sqrt()?,
    })
}

/// Value and partial derivatives of phi up to third order at a point `s`.
#[derive(Clone, Debug)]
pub struct PhiDerivs {
    pub arity: usize,
    pub value: f64,
    pub d1: Vec<f64>,
    pub d2: crate::tensors::SymTensor2,
    pub d3: SymTensor3,
}

impl PhiExpr {
    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn ast(&self) -> &Expr {
        &self.ast
    }

    pub fn from_ast(ast: Expr, arity: usize) -> Self {
        PhiExpr { ast, arity }
    }

    /// Evaluate over jets; `args` must share their variable count.
    pub fn eval(&self, args: &[Jet]) -> Result<Jet> {
        assert_eq!(args.len(), self.arity, "argument count != arity");
        eval_expr(&self.ast, args)
    }

    pub fn eval_scalar(&self, s: &[f64]) -> Result<f64> {
        let args: Vec<Jet> = s.iter().map(|&v| Jet::constant(0, v)).collect();
        Ok(self.eval(&args)?.const_term())
    }

    /// All partials up to third order from a single jet evaluation.
    pub fn derivs(&self, s: &[f64]) -> Result<PhiDerivs> {
        assert_eq!(s.len(), self.arity);
        let p = self.arity;
        let args: Vec<Jet> = (0..p).map(|i| Jet::variable(p, i, s[i])).collect();
        let jet = self.eval(&args)?;
        let mut idx = vec![0u8; p];
        let value = jet.const_term();
        let mut d1 = vec![0.0; p];
        for (i, d) in d1.iter_mut().enumerate() {
            idx[i] = 1;
            *d = jet.extract_partial(&idx);
            idx[i] = 0;
        }
        let d2 = crate::tensors::SymTensor2::from_fn(p, |i, j| {
            idx[i] += 1;
            idx[j] += 1;
            let v = jet.extract_partial(&idx);
            idx[i] -= 1;
            idx[j] -= 1;
            v
        });
        let mut idx = vec![0u8; p];
        let d3 = SymTensor3::from_fn(p, |i, j, k| {
            idx[i] += 1;
            idx[j] += 1;
            idx[k] += 1;
            let v = jet.extract_partial(&idx);
            idx[i] -= 1;
            idx[j] -= 1;
            idx[k] -= 1;
            v
        });
        Ok(PhiDerivs {
            arity: p,
            value,
            d1,
            d2,
            d3,
        })
    }

    /// Replace each variable by the expression returned from `map`.
    pub fn substitute(&self, arity: usize, map: impl Fn(usize) -> Expr) -> PhiExpr {
        fn go(e: &Expr, map: &dyn Fn(usize) -> Expr) -> Expr {
            match e {
                Expr::Const(c) => Expr::Const(*c),
                Expr::Var(i) => map(*i),
                Expr::Add(a, b) => Expr::Add(Box::new(go(a, map)), Box::new(go(b, map))),
                Expr::Sub(a, b) => Expr::Sub(Box::new(go(a, map)), Box::new(go(b, map))),
                Expr::Mul(a, b) => Expr::Mul(Box::new(go(a, map)), Box::new(go(b, map))),
                Expr::Div(a, b) => Expr::Div(Box::new(go(a, map)), Box::new(go(b, map))),
                Expr::Neg(a) => Expr::Neg(Box::new(go(a, map))),
                Expr::Pow(a, r) => Expr::Pow(Box::new(go(a, map)), *r),
                Expr::Sqrt(a) => Expr::Sqrt(Box::new(go(a, map))),
            }
        }
        PhiExpr {
            ast: go(&self.ast, &map),
            arity,
        }
    }
}

fn check_d(name: &str, d: f64) -> Result<()> {
    if !(d.abs() < 1.0) {
        return Err(Error::InvalidParam(format!(
            "{name}: parameter d = {d} must satisfy |d| < 1"
        )));
    }
    Ok(())
}

/// Built-in deformation profiles.
///
/// Available names (p = arity):
/// - `randers` (p=1): `1+s1`
/// - `kropina` (p=1, param l > 0): `1/s1^l`
/// - `slope` (p=1): `1/(1-s1)`
/// - `quadratic` (p=1): `(1+s1)^2`
/// - `circle` (p=1): `sqrt(1-s1^2)`
/// - `shifted_sphere` (p=1, param |d| < 1): `1/(s1+sqrt(s1^2+1-d^2))`
/// - `ellipsoid_step` (p=1, param d in (0,1]): `sqrt(1-s1^2)`, expecting
///   `beta = sqrt(1-d^2) dy_i` from the caller
/// - `multi_ellipsoid` (p=n, params d1..dn in (0,1]): `sqrt(1-s1^2-...-sn^2)`
/// - `shifted_kropina` (p=2): `1/s1+1+s2`
/// - `shifted_slope` (p=2): `1/(1-s1)+s2`
/// - `shifted_quadratic` (p=2): `(1+s1)^2+s2`
pub fn builtin(name: &str, params: &[f64]) -> Result<PhiExpr> {
    let need = |n: usize| -> Result<()> {
        if params.len() != n {
            return Err(Error::InvalidParam(format!(
                "{name}: expected {n} parameter(s), got {}",
                params.len()
            )));
        }
        Ok(())
    };
    let text: String = match name {
        "randers" => {
            need(0)?;
            "1+s1".into()
        }
        "kropina" => {
            let l = if params.is_empty() { 1.0 } else { params[0] };
            if params.len() > 1 {
                return Err(Error::InvalidParam("kropina: at most one parameter".into()));
            }
            if l <= 0.0 {
                return Err(Error::InvalidParam(format!("kropina: l = {l} must be > 0")));
            }
            if l == 1.0 {
                "1/s1".into()
            } else {
                format!("1/s1^{l}")
            }
        }
        "slope" => {
            need(0)?;
            "1/(1-s1)".into()
        }
        "quadratic" => {
            need(0)?;
            "(1+s1)^2".into()
        }
        "circle" => {
            need(0)?;
            "sqrt(1-s1^2)".into()
        }
        "shifted_sphere" => {
            need(1)?;
            check_d(name, params[0])?;
            format!("1/(s1+sqrt(s1^2+{}))", 1.0 - params[0] * params[0])
        }
        "ellipsoid_step" => {
            need(1)?;
            let d = params[0];
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::InvalidParam(format!(
                    "ellipsoid_step: d = {d} must lie in (0, 1]"
                )));
            }
            "sqrt(1-s1^2)".into()
        }
        "multi_ellipsoid" => {
            if params.is_empty() {
                return Err(Error::InvalidParam(
                    "multi_ellipsoid: needs at least one axis parameter".into(),
                ));
            }
            for &d in params {
                if !(d > 0.0 && d <= 1.0) {
                    return Err(Error::InvalidParam(format!(
                        "multi_ellipsoid: d = {d} must lie in (0, 1]"
                    )));
                }
            }
            let mut t = String::from("sqrt(1");
            for i in 1..=params.len() {
                t.push_str(&format!("-s{i}^2"));
            }
            t.push(')');
            t
        }
        "shifted_kropina" => {
            need(0)?;
            return Ok(parse("1/s1+1+s2", 2).expect("builtin parses"));
        }
        "shifted_slope" => {
            need(0)?;
            return Ok(parse("1/(1-s1)+s2", 2).expect("builtin parses"));
        }
        "shifted_quadratic" => {
            need(0)?;
            return Ok(parse("(1+s1)^2+s2", 2).expect("builtin parses"));
        }
        other => return Err(Error::UnknownBuiltin(other.to_string())),
    };
    let arity = if name == "multi_ellipsoid" {
        params.len()
    } else {
        1
    };
    Ok(parse(&text, arity).expect("builtin parses"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn parse_simple_sum() {
        let e = parse("1+s1", 1).unwrap();
        assert_eq!(
            *e.ast(),
            Expr::Add(Box::new(Expr::Const(1.0)), Box::new(Expr::Var(0)))
        );
    }

    #[test]
    fn parse_quadratic() {
        let e = parse("(1+s1)^2", 1).unwrap();
        assert_eq!(
            *e.ast(),
            Expr::Pow(
                Box::new(Expr::Add(Box::new(Expr::Const(1.0)), Box::new(Expr::Var(0)))),
                2.0
            )
        );
    }

    #[test]
    fn parse_shifted_indicatrix_profile() {
        // phi for the shifted-sphere example with d = 0.5
        let e = parse("1/(s1+sqrt(s1^2+0.75))", 1).unwrap();
        let v = e.eval_scalar(&[0.0]).unwrap();
        assert_relative_eq!(v, 1.0 / 0.75f64.sqrt(), max_relative = 1e-14);
    }

    #[test]
    fn parse_errors_carry_offsets() {
        let err = parse("1+*2", 1).unwrap_err();
        assert_eq!(err.offset, 2);
        let err = parse("s3", 2).unwrap_err();
        assert!(matches!(
            err.kind,
            ParseErrorKind::UnknownVariable { index: 3, arity: 2 }
        ));
        let err = parse("foo(s1)", 1).unwrap_err();
        assert!(matches!(err.kind, ParseErrorKind::UnknownFunction(_)));
        let err = parse("1+s1)", 1).unwrap_err();
        assert!(matches!(err.kind, ParseErrorKind::TrailingInput));
    }

    #[test]
    fn eval_randers_jet() {
        let e = parse("1+s1", 1).unwrap();
        let s = Jet::variable(1, 0, 0.2);
        let j = e.eval(&[s]).unwrap();
        assert_relative_eq!(j.const_term(), 1.2);
        assert_relative_eq!(j.extract_partial(&[1]), 1.0);
        assert_eq!(j.extract_partial(&[2]), 0.0);
        assert_eq!(j.extract_partial(&[3]), 0.0);
    }

    #[test]
    fn eval_reciprocal_derivatives() {
        let e = parse("1/s1", 1).unwrap();
        let j = e.eval(&[Jet::variable(1, 0, 1.0)]).unwrap();
        assert_relative_eq!(j.const_term(), 1.0);
        assert_relative_eq!(j.extract_partial(&[1]), -1.0);
        assert_relative_eq!(j.extract_partial(&[2]), 2.0);
        assert_relative_eq!(j.extract_partial(&[3]), -6.0);
    }

    #[test]
    fn constant_expression() {
        let e = parse("3", 1).unwrap();
        let j = e.eval(&[Jet::variable(1, 0, 0.7)]).unwrap();
        assert_eq!(j.const_term(), 3.0);
        assert!(j.terms().skip(1).all(|(_, c)| c == 0.0));
    }

    #[test]
    fn builtin_catalog() {
        assert_eq!(builtin("slope", &[]).unwrap().to_string(), "1/(1-s1)");
        assert_eq!(builtin("kropina", &[1.0]).unwrap().to_string(), "1/s1");
        assert_eq!(
            builtin("multi_ellipsoid", &[0.5, 0.8]).unwrap().to_string(),
            "sqrt(1-s1^2-s2^2)"
        );
        assert!(matches!(
            builtin("nope", &[]),
            Err(Error::UnknownBuiltin(_))
        ));
        assert!(matches!(
            builtin("shifted_sphere", &[1.5]),
            Err(Error::InvalidParam(_))
        ));
    }

    #[test]
    fn builtin_partials_match_finite_differences() {
        let cases: Vec<(PhiExpr, Vec<f64>)> = vec![
            (builtin("randers", &[]).unwrap(), vec![0.2]),
            (builtin("kropina", &[1.0]).unwrap(), vec![0.5]),
            (builtin("slope", &[]).unwrap(), vec![0.2]),
            (builtin("quadratic", &[]).unwrap(), vec![0.1]),
            (builtin("circle", &[]).unwrap(), vec![0.3]),
            (builtin("shifted_sphere", &[0.5]).unwrap(), vec![0.2]),
            (builtin("shifted_kropina", &[]).unwrap(), vec![0.5, 0.2]),
            (builtin("shifted_slope", &[]).unwrap(), vec![0.2, 0.1]),
        ];
        let h = 1e-4;
        for (e, s) in cases {
            let d = e.derivs(&s).unwrap();
            for i in 0..s.len() {
                let mut sp = s.clone();
                let mut sm = s.clone();
                sp[i] += h;
                sm[i] -= h;
                let fd =
                    (e.eval_scalar(&sp).unwrap() - e.eval_scalar(&sm).unwrap()) / (2.0 * h);
                assert!(
                    (d.d1[i] - fd).abs() < 1e-5,
                    "{e}: d1[{i}] jet {} vs fd {fd}",
                    d.d1[i]
                );
                for j in 0..s.len() {
                    let mut spp = sp.clone();
                    let mut spm = sp.clone();
                    let mut smp = sm.clone();
                    let mut smm = sm.clone();
                    spp[j] += h;
                    spm[j] -= h;
                    smp[j] += h;
                    smm[j] -= h;
                    let fd2 = (e.eval_scalar(&spp).unwrap() - e.eval_scalar(&spm).unwrap()
                        - e.eval_scalar(&smp).unwrap()
                        + e.eval_scalar(&smm).unwrap())
                        / (4.0 * h * h);
                    assert!(
                        (d.d2.get(i, j) - fd2).abs() < 1e-4,
                        "{e}: d2[{i}{j}] jet {} vs fd {fd2}",
                        d.d2.get(i, j)
                    );
                }
            }
        }
    }

    mod roundtrip {
        use super::*;
        use proptest::prelude::*;

        fn arb_expr(arity: usize) -> impl Strategy<Value = Expr> {
            let leaf = prop_oneof![
                (0.0..10.0f64).prop_map(Expr::Const),
                (0..arity).prop_map(Expr::Var),
            ];
            leaf.prop_recursive(6, 64, 2, move |inner| {
                prop_oneof![
                    (inner.clone(), inner.clone())
                        .prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
                    (inner.clone(), inner.clone())
                        .prop_map(|(a, b)| Expr::Sub(Box::new(a), Box::new(b))),
                    (inner.clone(), inner.clone())
                        .prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
                    (inner.clone(), inner.clone())
                        .prop_map(|(a, b)| Expr::Div(Box::new(a), Box::new(b))),
                    inner.clone().prop_map(|a| match a {
                        // the parser folds a negated literal into the constant
                        Expr::Const(c) => Expr::Const(-c),
                        other => Expr::Neg(Box::new(other)),
                    }),
                    (inner.clone(), -4.0..4.0f64)
                        .prop_map(|(a, r)| Expr::Pow(Box::new(a), r)),
                    inner.prop_map(|a| Expr::Sqrt(Box::new(a))),
                ]
            })
        }

        proptest! {
            #[test]
            fn serialize_then_parse_is_identity(ast in arb_expr(3)) {
                let e = PhiExpr::from_ast(ast, 3);
                let text = e.to_string();
                let back = parse(&text, 3).unwrap();
                prop_assert_eq!(back, e);
            }
        }
    }
}
