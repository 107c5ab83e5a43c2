//! A small arithmetic expression language over the variables `x`, `z`, `u`.
//!
//! The grammar is deliberately closed: literals, the constant `pi`, the
//! binary operators `+ - * /`, integer powers via `^`, unary minus, and the
//! functions `sin cos exp log abs sqrt min max`. Gradients are computed by
//! forward-mode differentiation; expressions containing `abs`, `min`, `max`
//! or `sqrt` are flagged non-smooth and rejected by every suite that needs
//! a gradient.
//!
//! Precedence: `^` binds tightest, then unary minus, then `* /`, then
//! `+ -`. Binary `+ - * /` are left-associative. The exponent of `^` must
//! be an integer literal (optionally negated); general powers are written
//! via `exp`/`log` explicitly.

use crate::error::{Error, Result};
use std::fmt;

/// Variables an expression may reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X,
    Z,
    U,
}

impl Var {
    fn name(self) -> &'static str {
        match self {
            Var::X => "x",
            Var::Z => "z",
            Var::U => "u",
        }
    }
}

/// Built-in functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Abs,
    Sqrt,
    Min,
    Max,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Abs => "abs",
            Func::Sqrt => "sqrt",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }
}

/// Abstract syntax tree of an expression.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Pi,
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Call(Func, Vec<Expr>),
}

/// Variable bindings for evaluation. Unbound variables referenced by the
/// expression produce an error rather than a silent NaN.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bindings {
    pub x: Option<f64>,
    pub z: Option<f64>,
    pub u: Option<f64>,
}

impl Bindings {
    pub fn xz(x: f64, z: f64) -> Self {
        Bindings { x: Some(x), z: Some(z), u: None }
    }

    pub fn xzu(x: f64, z: f64, u: f64) -> Self {
        Bindings { x: Some(x), z: Some(z), u: Some(u) }
    }

    pub fn x_only(x: f64) -> Self {
        Bindings { x: Some(x), z: None, u: None }
    }

    fn get(&self, var: Var) -> Result<f64> {
        match var {
            Var::X => self.x,
            Var::Z => self.z,
            Var::U => self.u,
        }
        .ok_or_else(|| Error::UnboundVariable(var.name().to_string()))
    }
}

/// Gradient with respect to `(x, z, u)` carried through forward mode.
#[derive(Debug, Clone, Copy)]
struct Dual {
    v: f64,
    d: [f64; 3],
}

impl Dual {
    fn constant(v: f64) -> Self {
        Dual { v, d: [0.0; 3] }
    }
}

impl Expr {
    /// Parse an expression from text. See the module docs for the grammar.
    pub fn parse(text: &str) -> Result<Expr> {
        Parser::new(text).parse()
    }

    /// Free variables of the expression.
    pub fn free_vars(&self) -> Vec<Var> {
        let mut seen = [false; 3];
        self.walk_vars(&mut seen);
        let mut out = Vec::new();
        for (i, var) in [Var::X, Var::Z, Var::U].iter().enumerate() {
            if seen[i] {
                out.push(*var);
            }
        }
        out
    }

    fn walk_vars(&self, seen: &mut [bool; 3]) {
        match self {
            Expr::Var(v) => seen[*v as usize] = true,
            Expr::Neg(e) => e.walk_vars(seen),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.walk_vars(seen);
                b.walk_vars(seen);
            }
            Expr::Pow(a, _) => a.walk_vars(seen),
            Expr::Call(_, args) => {
                for a in args {
                    a.walk_vars(seen);
                }
            }
            _ => {}
        }
    }

    pub fn uses(&self, var: Var) -> bool {
        let mut seen = [false; 3];
        self.walk_vars(&mut seen);
        seen[var as usize]
    }

    /// True when the expression contains one of the potentially non-smooth
    /// nodes (`abs`, `min`, `max`, `sqrt`). Such expressions are rejected by
    /// gradient-requiring suites.
    pub fn has_nonsmooth_ops(&self) -> bool {
        match self {
            Expr::Call(f, args) => {
                matches!(f, Func::Abs | Func::Min | Func::Max | Func::Sqrt)
                    || args.iter().any(Expr::has_nonsmooth_ops)
            }
            Expr::Neg(e) => e.has_nonsmooth_ops(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.has_nonsmooth_ops() || b.has_nonsmooth_ops()
            }
            Expr::Pow(a, _) => a.has_nonsmooth_ops(),
            _ => false,
        }
    }

    /// IEEE double evaluation; domain errors are reported with the
    /// offending subexpression.
    pub fn eval(&self, b: &Bindings) -> Result<f64> {
        match self {
            Expr::Num(v) => Ok(*v),
            Expr::Pi => Ok(std::f64::consts::PI),
            Expr::Var(var) => b.get(*var),
            Expr::Neg(e) => Ok(-e.eval(b)?),
            Expr::Add(l, r) => Ok(l.eval(b)? + r.eval(b)?),
            Expr::Sub(l, r) => Ok(l.eval(b)? - r.eval(b)?),
            Expr::Mul(l, r) => Ok(l.eval(b)? * r.eval(b)?),
            Expr::Div(l, r) => {
                let num = l.eval(b)?;
                let den = r.eval(b)?;
                if den == 0.0 {
                    return Err(Error::Domain {
                        subexpr: self.to_string(),
                        reason: "division by zero".into(),
                    });
                }
                Ok(num / den)
            }
            Expr::Pow(base, n) => {
                let v = base.eval(b)?;
                if v == 0.0 && *n < 0 {
                    return Err(Error::Domain {
                        subexpr: self.to_string(),
                        reason: "zero raised to a negative power".into(),
                    });
                }
                Ok(v.powi(*n))
            }
            Expr::Call(f, args) => {
                let a0 = args[0].eval(b)?;
                match f {
                    Func::Sin => Ok(a0.sin()),
                    Func::Cos => Ok(a0.cos()),
                    Func::Exp => Ok(a0.exp()),
                    Func::Log => {
                        if a0 <= 0.0 {
                            Err(Error::Domain {
                                subexpr: self.to_string(),
                                reason: format!("log of non-positive value {a0}"),
                            })
                        } else {
                            Ok(a0.ln())
                        }
                    }
                    Func::Abs => Ok(a0.abs()),
                    Func::Sqrt => {
                        if a0 < 0.0 {
                            Err(Error::Domain {
                                subexpr: self.to_string(),
                                reason: format!("sqrt of negative value {a0}"),
                            })
                        } else {
                            Ok(a0.sqrt())
                        }
                    }
                    Func::Min => Ok(a0.min(args[1].eval(b)?)),
                    Func::Max => Ok(a0.max(args[1].eval(b)?)),
                }
            }
        }
    }

    /// Forward-mode gradient `(∂x, ∂z, ∂u)` at the given point.
    ///
    /// Errors with `NonDifferentiable` when an `abs`/`min`/`max`/`sqrt`
    /// node is hit exactly at its kink.
    pub fn grad(&self, b: &Bindings) -> Result<(f64, [f64; 3])> {
        let d = self.grad_dual(b)?;
        Ok((d.v, d.d))
    }

    fn grad_dual(&self, b: &Bindings) -> Result<Dual> {
        match self {
            Expr::Num(v) => Ok(Dual::constant(*v)),
            Expr::Pi => Ok(Dual::constant(std::f64::consts::PI)),
            Expr::Var(var) => {
                let mut d = [0.0; 3];
                d[*var as usize] = 1.0;
                Ok(Dual { v: b.get(*var)?, d })
            }
            Expr::Neg(e) => {
                let a = e.grad_dual(b)?;
                Ok(Dual { v: -a.v, d: [-a.d[0], -a.d[1], -a.d[2]] })
            }
            Expr::Add(l, r) => {
                let (a, c) = (l.grad_dual(b)?, r.grad_dual(b)?);
                Ok(Dual { v: a.v + c.v, d: [a.d[0] + c.d[0], a.d[1] + c.d[1], a.d[2] + c.d[2]] })
            }
            Expr::Sub(l, r) => {
                let (a, c) = (l.grad_dual(b)?, r.grad_dual(b)?);
                Ok(Dual { v: a.v - c.v, d: [a.d[0] - c.d[0], a.d[1] - c.d[1], a.d[2] - c.d[2]] })
            }
            Expr::Mul(l, r) => {
                let (a, c) = (l.grad_dual(b)?, r.grad_dual(b)?);
                Ok(Dual {
                    v: a.v * c.v,
                    d: [
                        a.d[0] * c.v + a.v * c.d[0],
                        a.d[1] * c.v + a.v * c.d[1],
                        a.d[2] * c.v + a.v * c.d[2],
                    ],
                })
            }
            Expr::Div(l, r) => {
                let (a, c) = (l.grad_dual(b)?, r.grad_dual(b)?);
                if c.v == 0.0 {
                    return Err(Error::Domain {
                        subexpr: self.to_string(),
                        reason: "division by zero".into(),
                    });
                }
                let inv = 1.0 / c.v;
                let v = a.v * inv;
                Ok(Dual {
                    v,
                    d: [
                        (a.d[0] - v * c.d[0]) * inv,
                        (a.d[1] - v * c.d[1]) * inv,
                        (a.d[2] - v * c.d[2]) * inv,
                    ],
                })
            }
            Expr::Pow(base, n) => {
                let a = base.grad_dual(b)?;
                if a.v == 0.0 && *n < 0 {
                    return Err(Error::Domain {
                        subexpr: self.to_string(),
                        reason: "zero raised to a negative power".into(),
                    });
                }
                let v = a.v.powi(*n);
                let factor = *n as f64 * a.v.powi(*n - 1);
                Ok(Dual { v, d: [factor * a.d[0], factor * a.d[1], factor * a.d[2]] })
            }
            Expr::Call(f, args) => {
                let a = args[0].grad_dual(b)?;
                let chain = |v: f64, dv: f64, d: [f64; 3]| Dual {
                    v,
                    d: [dv * d[0], dv * d[1], dv * d[2]],
                };
                match f {
                    Func::Sin => Ok(chain(a.v.sin(), a.v.cos(), a.d)),
                    Func::Cos => Ok(chain(a.v.cos(), -a.v.sin(), a.d)),
                    Func::Exp => {
                        let e = a.v.exp();
                        Ok(chain(e, e, a.d))
                    }
                    Func::Log => {
                        if a.v <= 0.0 {
                            Err(Error::Domain {
                                subexpr: self.to_string(),
                                reason: format!("log of non-positive value {}", a.v),
                            })
                        } else {
                            Ok(chain(a.v.ln(), 1.0 / a.v, a.d))
                        }
                    }
                    Func::Abs => {
                        if a.v == 0.0 {
                            Err(Error::NonDifferentiable(self.to_string()))
                        } else {
                            Ok(chain(a.v.abs(), a.v.signum(), a.d))
                        }
                    }
                    Func::Sqrt => {
                        if a.v < 0.0 {
                            Err(Error::Domain {
                                subexpr: self.to_string(),
                                reason: format!("sqrt of negative value {}", a.v),
                            })
                        } else if a.v == 0.0 {
                            Err(Error::NonDifferentiable(self.to_string()))
                        } else {
                            let s = a.v.sqrt();
                            Ok(chain(s, 0.5 / s, a.d))
                        }
                    }
                    Func::Min | Func::Max => {
                        let c = args[1].grad_dual(b)?;
                        if a.v == c.v {
                            return Err(Error::NonDifferentiable(self.to_string()));
                        }
                        let take_first = match f {
                            Func::Min => a.v < c.v,
                            _ => a.v > c.v,
                        };
                        Ok(if take_first { a } else { c })
                    }
                }
            }
        }
    }

    /// Value, first and second derivative with respect to `var`, by a
    /// second-order forward pass. Used for branch formulas of custom maps,
    /// where the Jacobian derivative needs `F''`.
    pub fn taylor2(&self, var: Var, b: &Bindings) -> Result<(f64, f64, f64)> {
        let t = self.taylor2_inner(var, b)?;
        Ok((t.0, t.1, t.2))
    }

    fn taylor2_inner(&self, var: Var, b: &Bindings) -> Result<(f64, f64, f64)> {
        match self {
            Expr::Num(v) => Ok((*v, 0.0, 0.0)),
            Expr::Pi => Ok((std::f64::consts::PI, 0.0, 0.0)),
            Expr::Var(v) => {
                let seed = if *v == var { 1.0 } else { 0.0 };
                Ok((b.get(*v)?, seed, 0.0))
            }
            Expr::Neg(e) => {
                let (v, d, dd) = e.taylor2_inner(var, b)?;
                Ok((-v, -d, -dd))
            }
            Expr::Add(l, r) => {
                let (a, ad, add) = l.taylor2_inner(var, b)?;
                let (c, cd, cdd) = r.taylor2_inner(var, b)?;
                Ok((a + c, ad + cd, add + cdd))
            }
            Expr::Sub(l, r) => {
                let (a, ad, add) = l.taylor2_inner(var, b)?;
                let (c, cd, cdd) = r.taylor2_inner(var, b)?;
                Ok((a - c, ad - cd, add - cdd))
            }
            Expr::Mul(l, r) => {
                let (a, ad, add) = l.taylor2_inner(var, b)?;
                let (c, cd, cdd) = r.taylor2_inner(var, b)?;
                Ok((a * c, ad * c + a * cd, add * c + 2.0 * ad * cd + a * cdd))
            }
            Expr::Div(l, r) => {
                let (a, ad, add) = l.taylor2_inner(var, b)?;
                let (c, cd, cdd) = r.taylor2_inner(var, b)?;
                if c == 0.0 {
                    return Err(Error::Domain {
                        subexpr: self.to_string(),
                        reason: "division by zero".into(),
                    });
                }
                let q = a / c;
                let qd = (ad - q * cd) / c;
                let qdd = (add - 2.0 * qd * cd - q * cdd) / c;
                Ok((q, qd, qdd))
            }
            Expr::Pow(base, n) => {
                let (a, ad, add) = base.taylor2_inner(var, b)?;
                if a == 0.0 && *n < 0 {
                    return Err(Error::Domain {
                        subexpr: self.to_string(),
                        reason: "zero raised to a negative power".into(),
                    });
                }
                let nf = *n as f64;
                let v = a.powi(*n);
                let d = nf * a.powi(*n - 1) * ad;
                let dd = nf * (nf - 1.0) * a.powi(*n - 2) * ad * ad + nf * a.powi(*n - 1) * add;
                Ok((v, d, dd))
            }
            Expr::Call(f, args) => {
                let (a, ad, add) = args[0].taylor2_inner(var, b)?;
                let chain = |v: f64, d1: f64, d2: f64| (v, d1 * ad, d2 * ad * ad + d1 * add);
                match f {
                    Func::Sin => Ok(chain(a.sin(), a.cos(), -a.sin())),
                    Func::Cos => Ok(chain(a.cos(), -a.sin(), -a.cos())),
                    Func::Exp => {
                        let e = a.exp();
                        Ok(chain(e, e, e))
                    }
                    Func::Log => {
                        if a <= 0.0 {
                            Err(Error::Domain {
                                subexpr: self.to_string(),
                                reason: format!("log of non-positive value {a}"),
                            })
                        } else {
                            Ok(chain(a.ln(), 1.0 / a, -1.0 / (a * a)))
                        }
                    }
                    Func::Abs => {
                        if a == 0.0 {
                            Err(Error::NonDifferentiable(self.to_string()))
                        } else {
                            Ok(chain(a.abs(), a.signum(), 0.0))
                        }
                    }
                    Func::Sqrt => {
                        if a <= 0.0 {
                            Err(Error::NonDifferentiable(self.to_string()))
                        } else {
                            let s = a.sqrt();
                            Ok(chain(s, 0.5 / s, -0.25 / (s * a)))
                        }
                    }
                    Func::Min | Func::Max => {
                        let (c, cd, cdd) = args[1].taylor2_inner(var, b)?;
                        if a == c {
                            return Err(Error::NonDifferentiable(self.to_string()));
                        }
                        let take_first = match f {
                            Func::Min => a < c,
                            _ => a > c,
                        };
                        Ok(if take_first { (a, ad, add) } else { (c, cd, cdd) })
                    }
                }
            }
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(..) => 3,
            Expr::Pow(..) => 4,
            _ => 5,
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
        let prec = self.precedence();
        if prec < min_prec {
            write!(f, "(")?;
        }
        match self {
            Expr::Num(v) => write!(f, "{v}")?,
            Expr::Pi => write!(f, "pi")?,
            Expr::Var(v) => write!(f, "{}", v.name())?,
            Expr::Neg(e) => {
                write!(f, "-")?;
                e.fmt_prec(f, 3)?;
            }
            Expr::Add(a, b) => {
                a.fmt_prec(f, 1)?;
                write!(f, " + ")?;
                b.fmt_prec(f, 2)?;
            }
            Expr::Sub(a, b) => {
                a.fmt_prec(f, 1)?;
                write!(f, " - ")?;
                b.fmt_prec(f, 2)?;
            }
            Expr::Mul(a, b) => {
                a.fmt_prec(f, 2)?;
                write!(f, "*")?;
                b.fmt_prec(f, 3)?;
            }
            Expr::Div(a, b) => {
                a.fmt_prec(f, 2)?;
                write!(f, "/")?;
                b.fmt_prec(f, 3)?;
            }
            Expr::Pow(a, n) => {
                a.fmt_prec(f, 5)?;
                write!(f, "^{n}")?;
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    a.fmt_prec(f, 0)?;
                }
                write!(f, ")")?;
            }
        }
        if prec < min_prec {
            write!(f, ")")?;
        }
        Ok(())
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

struct Parser<'a> {
    chars: Vec<char>,
    pos: usize,
    text: &'a str,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Parser { chars: text.chars().collect(), pos: 0, text }
    }

    fn parse(mut self) -> Result<Expr> {
        let e = self.expr()?;
        self.skip_ws();
        if self.pos < self.chars.len() {
            return Err(self.err("end of input or an operator"));
        }
        let _ = self.text;
        Ok(e)
    }

    // 1-based character position for error messages.
    fn here(&self) -> usize {
        self.pos + 1
    }

    fn err(&self, expected: &str) -> Error {
        Error::Parse { position: self.here(), expected: expected.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).copied()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some('+') => {
                    self.pos += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some('-') => {
                    self.pos += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some('*') => {
                    self.pos += 1;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some('/') => {
                    self.pos += 1;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat('-') {
            Ok(Expr::Neg(Box::new(self.unary()?)))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.eat('^') {
            let n = self.int_exponent()?;
            Ok(Expr::Pow(Box::new(base), n))
        } else {
            Ok(base)
        }
    }

    fn int_exponent(&mut self) -> Result<i32> {
        self.skip_ws();
        let negative = self.eat('-');
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("an integer exponent"));
        }
        // An exponent with a decimal point is rejected: only integer powers
        // keep differentiation total on the smooth fragment.
        if self.chars.get(self.pos) == Some(&'.') {
            return Err(self.err("an integer exponent (general powers go via exp/log)"));
        }
        let digits: String = self.chars[start..self.pos].iter().collect();
        let value: i32 = digits
            .parse()
            .map_err(|_| self.err("an integer exponent within i32 range"))?;
        Ok(if negative { -value } else { value })
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.peek() {
            Some('(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(')') {
                    return Err(self.err("`)`"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.identifier(),
            _ => Err(self.err("a number, variable, `pi`, a function call, `(`, or `-`")),
        }
    }

    fn number(&mut self) -> Result<Expr> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.chars.get(self.pos) == Some(&'.') {
            self.pos += 1;
            while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
        }
        // Exponent part like `1.5e-3`.
        if matches!(self.chars.get(self.pos), Some('e') | Some('E')) {
            let mark = self.pos;
            self.pos += 1;
            if matches!(self.chars.get(self.pos), Some('+') | Some('-')) {
                self.pos += 1;
            }
            let digits_start = self.pos;
            while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if self.pos == digits_start {
                // Not an exponent after all (e.g. `2*exp(x)` tokenizes `2`
                // then `*`); back off and let the identifier path handle it.
                self.pos = mark;
            }
        }
        let s: String = self.chars[start..self.pos].iter().collect();
        if s.is_empty() || s == "." {
            return Err(Error::Parse { position: start + 1, expected: "a number".into() });
        }
        s.parse::<f64>()
            .map(Expr::Num)
            .map_err(|_| Error::Parse { position: start + 1, expected: "a valid number".into() })
    }

    fn identifier(&mut self) -> Result<Expr> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.chars.len()
            && (self.chars[self.pos].is_ascii_alphanumeric() || self.chars[self.pos] == '_')
        {
            self.pos += 1;
        }
        let name: String = self.chars[start..self.pos].iter().collect();
        match name.as_str() {
            "pi" => Ok(Expr::Pi),
            "x" => Ok(Expr::Var(Var::X)),
            "z" => Ok(Expr::Var(Var::Z)),
            "u" => Ok(Expr::Var(Var::U)),
            _ => {
                if let Some(func) = Func::from_name(&name) {
                    if !self.eat('(') {
                        return Err(self.err("`(` after function name"));
                    }
                    let mut args = vec![self.expr()?];
                    while self.eat(',') {
                        args.push(self.expr()?);
                    }
                    if !self.eat(')') {
                        return Err(self.err("`)` or `,`"));
                    }
                    if args.len() != func.arity() {
                        return Err(Error::ArityMismatch {
                            name: name.clone(),
                            position: start + 1,
                            expected: func.arity(),
                            got: args.len(),
                        });
                    }
                    Ok(Expr::Call(func, args))
                } else {
                    Err(Error::UnknownIdentifier { name, position: start + 1 })
                }
            }
        }
    }
}

/// Convenience: parse, then evaluate at `(x, z, u)`.
pub fn eval_str(text: &str, x: f64, z: f64, u: f64) -> Result<f64> {
    Expr::parse(text)?.eval(&Bindings { x: Some(x), z: Some(z), u: Some(u) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(t: &str) -> Expr {
        Expr::parse(t).unwrap()
    }

    #[test]
    fn parses_power_node() {
        assert_eq!(p("z^2"), Expr::Pow(Box::new(Expr::Var(Var::Z)), 2));
    }

    #[test]
    fn parses_product_with_cos() {
        let e = p("z*cos(2*pi*x)");
        match e {
            Expr::Mul(l, r) => {
                assert_eq!(*l, Expr::Var(Var::Z));
                assert!(matches!(*r, Expr::Call(Func::Cos, _)));
            }
            other => panic!("unexpected tree: {other:?}"),
        }
    }

    #[test]
    fn syntax_error_carries_position() {
        match Expr::parse("1 + * 2") {
            Err(Error::Parse { position, .. }) => assert_eq!(position, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_identifier_rejected() {
        assert!(matches!(
            Expr::parse("foo(x)"),
            Err(Error::UnknownIdentifier { .. })
        ));
    }

    #[test]
    fn arity_mismatch_rejected() {
        assert!(matches!(Expr::parse("min(x)"), Err(Error::ArityMismatch { .. })));
        assert!(matches!(Expr::parse("sin(x, z)"), Err(Error::ArityMismatch { .. })));
    }

    #[test]
    fn eval_basics() {
        assert_eq!(eval_str("1", 0.0, 0.0, 0.0).unwrap(), 1.0);
        let v = eval_str("z*cos(2*pi*x)", 0.25, 0.5, 0.0).unwrap();
        assert!(v.abs() < 1e-16, "got {v}");
        let v = eval_str("(z+cos(2*pi*x))/3", 0.0, 0.0, 0.0).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-16);
    }

    #[test]
    fn domain_errors_are_reported() {
        assert!(matches!(eval_str("log(x)", 0.0, 0.0, 0.0), Err(Error::Domain { .. })));
        assert!(matches!(eval_str("1/x", 0.0, 0.0, 0.0), Err(Error::Domain { .. })));
        assert!(matches!(eval_str("sqrt(x - 1)", 0.0, 0.0, 0.0), Err(Error::Domain { .. })));
    }

    #[test]
    fn unbound_variable_is_an_error() {
        let e = p("z + 1");
        assert!(matches!(
            e.eval(&Bindings::x_only(0.5)),
            Err(Error::UnboundVariable(_))
        ));
    }

    #[test]
    fn gradient_hand_checks() {
        let (_, g) = p("z^2").grad(&Bindings::xz(0.0, 0.3)).unwrap();
        assert!((g[1] - 0.6).abs() < 1e-15);

        let (_, g) = p("z*cos(2*pi*x)").grad(&Bindings::xz(0.25, 0.5)).unwrap();
        // d/dx = 0.5 * (-2*pi*sin(pi/2)) = -pi
        assert!((g[0] + std::f64::consts::PI).abs() < 1e-12, "got {}", g[0]);
    }

    #[test]
    fn abs_at_zero_is_non_differentiable() {
        assert!(matches!(
            p("abs(z)").grad(&Bindings::xz(0.0, 0.0)),
            Err(Error::NonDifferentiable(_))
        ));
    }

    #[test]
    fn nonsmooth_flagging() {
        assert!(p("abs(z) + x").has_nonsmooth_ops());
        assert!(p("sqrt(x)").has_nonsmooth_ops());
        assert!(!p("z*cos(2*pi*x) + x^3").has_nonsmooth_ops());
    }

    #[test]
    fn precedence_and_associativity() {
        // ^ above unary minus: -x^2 = -(x^2)
        let v = eval_str("-x^2", 3.0, 0.0, 0.0).unwrap();
        assert_eq!(v, -9.0);
        // Left associativity of -
        let v = eval_str("8 - 3 - 2", 0.0, 0.0, 0.0).unwrap();
        assert_eq!(v, 3.0);
        let v = eval_str("8 / 2 / 2", 0.0, 0.0, 0.0).unwrap();
        assert_eq!(v, 2.0);
        // Negative integer exponent
        let v = eval_str("x^-2", 2.0, 0.0, 0.0).unwrap();
        assert_eq!(v, 0.25);
    }

    #[test]
    fn print_reparses_to_identical_tree() {
        for text in [
            "z^2",
            "z*cos(2*pi*x)",
            "-x^2 + 3*z - 1/(x + 2)",
            "min(x, z) + max(z, u)",
            "abs(z - 0.5)",
            "exp(log(x + 1))*sqrt(u + 2)",
            "-(x + z)",
            "(x + z)^3",
            "x^-2",
            "1.5e-3*x",
        ] {
            let tree = p(text);
            let printed = tree.to_string();
            let reparsed = Expr::parse(&printed).unwrap_or_else(|e| {
                panic!("reparse of `{printed}` failed: {e}");
            });
            assert_eq!(tree, reparsed, "round-trip failed for `{text}` -> `{printed}`");
        }
    }

    #[test]
    fn whitespace_insensitive() {
        assert_eq!(p(" z ^ 2 "), p("z^2"));
        assert_eq!(p("z *cos( 2*pi* x )"), p("z*cos(2*pi*x)"));
    }
}
