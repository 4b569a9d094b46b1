//! Mean-function mini-language.
//!
//! Grammar (standard precedence, `^` binds tightest and is right associative):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?
//! primary := number | x<i> | b<j> | func '(' expr ')' | '(' expr ')'
//! func    := exp | log | sqrt
//! ```
//!
//! Covariates are `x1 … xm` (columns of the mean design, one based) and
//! parameters are `b<j>`. The parameter vector holds the distinct `b`
//! indices in increasing order, so `exp(b1 - b2/(x1 + b3))` has three
//! parameters ordered `(b1, b2, b3)`.

use crate::dual::Dual;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Sqrt,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    /// Covariate `x<index>` (one based).
    Covariate(usize),
    /// Parameter `b<index>`; `slot` is its position in the parameter vector.
    Param {
        index: usize,
        slot: usize,
    },
    Neg(Box<Expr>),
    Binary {
        op: BinOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
    },
    Call {
        func: Func,
        arg: Box<Expr>,
    },
}

impl Expr {
    fn eval<T: Scalar>(&self, x: &[T], beta: &[Dual<T>]) -> Dual<T> {
        match self {
            Expr::Num(v) => Dual::constant(T::lit(*v)),
            Expr::Covariate(i) => Dual::constant(x[*i - 1]),
            Expr::Param { slot, .. } => beta[*slot],
            Expr::Neg(e) => -e.eval(x, beta),
            Expr::Binary { op, lhs, rhs } => {
                let (a, b) = (lhs.eval(x, beta), rhs.eval(x, beta));
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                    BinOp::Pow => a.pow(b),
                }
            }
            Expr::Call { func, arg } => {
                let a = arg.eval(x, beta);
                match func {
                    Func::Exp => a.exp(),
                    Func::Log => a.ln(),
                    Func::Sqrt => a.sqrt(),
                }
            }
        }
    }

    fn visit(&self, f: &mut impl FnMut(&Expr)) {
        f(self);
        match self {
            Expr::Neg(e) => e.visit(f),
            Expr::Binary { lhs, rhs, .. } => {
                lhs.visit(f);
                rhs.visit(f);
            }
            Expr::Call { arg, .. } => arg.visit(f),
            _ => {}
        }
    }

    fn assign_slots(&mut self, params: &[usize]) {
        match self {
            Expr::Param { index, slot } => *slot = params.binary_search(index).expect("collected"),
            Expr::Neg(e) => e.assign_slots(params),
            Expr::Binary { lhs, rhs, .. } => {
                lhs.assign_slots(params);
                rhs.assign_slots(params);
            }
            Expr::Call { arg, .. } => arg.assign_slots(params),
            _ => {}
        }
    }
}

impl fmt::Display for Expr {
    /// Fully parenthesised rendering; re-parsing it yields the same tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Covariate(i) => write!(f, "x{i}"),
            Expr::Param { index, .. } => write!(f, "b{index}"),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Binary { op, lhs, rhs } => write!(f, "({lhs} {} {rhs})", op.symbol()),
            Expr::Call { func, arg } => write!(f, "{}({arg})", func.name()),
        }
    }
}

/// A parsed mean function `f(x; β)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFormula {
    expr: Expr,
    params: Vec<usize>,
    covariates: usize,
}

impl MeanFormula {
    pub fn parse(text: &str) -> Result<Self> {
        let tokens = lex(text)?;
        let mut p = Parser { tokens, pos: 0, end: text.chars().count() + 1 };
        let expr = p.expr()?;
        if let Some(tok) = p.peek() {
            return Err(Error::Syntax { pos: tok.pos, msg: format!("unexpected `{}`", tok.kind) });
        }
        Ok(Self::from_expr(expr))
    }

    /// Builds a formula from a tree, numbering parameters by sorted index.
    pub fn from_expr(mut expr: Expr) -> Self {
        let mut params = Vec::new();
        let mut covariates = 0;
        expr.visit(&mut |e| match e {
            Expr::Param { index, .. } => params.push(*index),
            Expr::Covariate(i) => covariates = covariates.max(*i),
            _ => {}
        });
        params.sort_unstable();
        params.dedup();
        expr.assign_slots(&params);
        Self { expr, params, covariates }
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    /// Number of parameters `p`.
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Number of covariates `m` (highest `x` index used).
    pub fn covariate_count(&self) -> usize {
        self.covariates
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|i| format!("b{i}")).collect()
    }

    fn check_dims(&self, m: usize, p: usize) -> Result<()> {
        if m < self.covariates {
            return Err(Error::DimensionMismatch(format!("formula uses {} covariates, row has {m}", self.covariates)));
        }
        if p != self.params.len() {
            return Err(Error::DimensionMismatch(format!("formula has {} parameters, got {p}", self.params.len())));
        }
        Ok(())
    }

    /// `f(x; β)` for one covariate row.
    pub fn eval_mean<T: Scalar>(&self, x: &[T], beta: &[T]) -> Result<T> {
        self.check_dims(x.len(), beta.len())?;
        let b: Vec<Dual<T>> = beta.iter().map(|&v| Dual::constant(v)).collect();
        let v = self.expr.eval(x, &b).val;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Domain(format!("mean function is not finite at x = {x:?}")))
        }
    }

    /// Fitted means only, without derivative passes.
    pub fn means<T: Scalar>(&self, x: ArrayView2<T>, beta: ArrayView1<T>) -> Result<Array1<T>> {
        let (n, m) = x.dim();
        self.check_dims(m, beta.len())?;
        let b: Vec<Dual<T>> = beta.iter().map(|&v| Dual::constant(v)).collect();
        let mut row = vec![T::zero(); m];
        let mut mu = Array1::<T>::zeros(n);
        for l in 0..n {
            for (j, r) in row.iter_mut().enumerate() {
                *r = x[[l, j]];
            }
            let v = self.expr.eval(&row, &b).val;
            if !v.is_finite() {
                return Err(Error::Domain(format!("mean function is not finite at row {}", l + 1)));
            }
            mu[l] = v;
        }
        Ok(mu)
    }

    /// Fitted means and the Jacobian `∂μ/∂β` (n × p) by forward-mode duals.
    pub fn mean_jacobian<T: Scalar>(&self, x: ArrayView2<T>, beta: ArrayView1<T>) -> Result<(Array1<T>, Array2<T>)> {
        let (n, m) = x.dim();
        let p = beta.len();
        self.check_dims(m, p)?;
        let mut mu = Array1::<T>::zeros(n);
        let mut jac = Array2::<T>::zeros((n, p));
        let mut seeds: Vec<Dual<T>> = beta.iter().map(|&v| Dual::constant(v)).collect();
        let mut row = vec![T::zero(); m];
        for l in 0..n {
            for (j, r) in row.iter_mut().enumerate() {
                *r = x[[l, j]];
            }
            if p == 0 {
                mu[l] = self.expr.eval(&row, &seeds).val;
            }
            for j in 0..p {
                seeds[j].dot = T::one();
                let d = self.expr.eval(&row, &seeds);
                seeds[j].dot = T::zero();
                if !d.is_finite() {
                    return Err(Error::Domain(format!(
                        "mean function or its derivative is not finite at row {}",
                        l + 1
                    )));
                }
                mu[l] = d.val;
                jac[[l, j]] = d.dot;
            }
            if !mu[l].is_finite() {
                return Err(Error::Domain(format!("mean function is not finite at row {}", l + 1)));
            }
        }
        Ok((mu, jac))
    }
}

impl fmt::Display for MeanFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.expr.fmt(f)
    }
}

impl FromStr for MeanFormula {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

pub fn parse_formula(text: &str) -> Result<MeanFormula> {
    MeanFormula::parse(text)
}

#[derive(Debug, Clone, PartialEq)]
enum TokKind {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

impl fmt::Display for TokKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokKind::Num(v) => write!(f, "{v}"),
            TokKind::Ident(s) => write!(f, "{s}"),
            TokKind::Op(c) => write!(f, "{c}"),
            TokKind::LParen => write!(f, "("),
            TokKind::RParen => write!(f, ")"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokKind,
    /// One-based character position.
    pos: usize,
}

fn lex(text: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let pos = i + 1;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let s: String = chars[start..i].iter().collect();
            let v = s.parse::<f64>().map_err(|_| Error::Syntax { pos, msg: format!("malformed number `{s}`") })?;
            out.push(Token { kind: TokKind::Num(v), pos });
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token { kind: TokKind::Ident(chars[start..i].iter().collect()), pos });
        } else {
            let kind = match c {
                '+' | '-' | '*' | '/' | '^' => TokKind::Op(c),
                '(' => TokKind::LParen,
                ')' => TokKind::RParen,
                _ => return Err(Error::Syntax { pos, msg: format!("unexpected character `{c}`") }),
            };
            out.push(Token { kind, pos });
            i += 1;
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn peek_op(&self) -> Option<char> {
        match self.peek() {
            Some(Token { kind: TokKind::Op(c), .. }) => Some(*c),
            _ => None,
        }
    }

    fn here(&self) -> usize {
        self.peek().map_or(self.end, |t| t.pos)
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(c @ ('+' | '-')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.term()?;
            let op = if c == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Expr::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs) };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(c @ ('*' | '/')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.unary()?;
            let op = if c == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Expr::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs) };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.peek_op() == Some('-') {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.primary()?;
        if self.peek_op() == Some('^') {
            self.pos += 1;
            let exponent = self.unary()?;
            return Ok(Expr::Binary { op: BinOp::Pow, lhs: Box::new(base), rhs: Box::new(exponent) });
        }
        Ok(base)
    }

    fn expect_rparen(&mut self) -> Result<()> {
        match self.peek() {
            Some(Token { kind: TokKind::RParen, .. }) => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(Error::Syntax { pos: self.here(), msg: "expected `)`".into() }),
        }
    }

    fn primary(&mut self) -> Result<Expr> {
        let Some(tok) = self.peek().cloned() else {
            return Err(Error::Syntax { pos: self.end, msg: "unexpected end of input".into() });
        };
        self.pos += 1;
        match tok.kind {
            TokKind::Num(v) => Ok(Expr::Num(v)),
            TokKind::LParen => {
                let e = self.expr()?;
                self.expect_rparen()?;
                Ok(e)
            }
            TokKind::Ident(name) => {
                let is_call = matches!(self.peek(), Some(Token { kind: TokKind::LParen, .. }));
                if is_call {
                    let func = match name.as_str() {
                        "exp" => Func::Exp,
                        "log" => Func::Log,
                        "sqrt" => Func::Sqrt,
                        _ => return Err(Error::UnknownSymbol { name, pos: tok.pos }),
                    };
                    self.pos += 1;
                    let arg = self.expr()?;
                    self.expect_rparen()?;
                    return Ok(Expr::Call { func, arg: Box::new(arg) });
                }
                symbol(&name, tok.pos)
            }
            other => Err(Error::Syntax { pos: tok.pos, msg: format!("unexpected `{other}`") }),
        }
    }
}

fn symbol(name: &str, pos: usize) -> Result<Expr> {
    let unknown = || Error::UnknownSymbol { name: name.to_string(), pos };
    let (head, digits) = name.split_at(1);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(unknown());
    }
    let index: usize = digits.parse().map_err(|_| unknown())?;
    match head {
        "x" if index >= 1 => Ok(Expr::Covariate(index)),
        "b" => Ok(Expr::Param { index, slot: 0 }),
        _ => Err(unknown()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn simulation_mean_function() {
        let f = parse_formula("b0 + exp(b1*x1) + b2*x2").unwrap();
        assert_eq!((f.param_count(), f.covariate_count()), (3, 2));
    }

    #[test]
    fn lens_weight_mean_function() {
        let f = parse_formula("exp(b1 - b2/(x1 + b3))").unwrap();
        assert_eq!((f.param_count(), f.covariate_count()), (3, 1));
        assert_eq!(f.param_names(), ["b1", "b2", "b3"]);
    }

    #[test]
    fn incomplete_expression_reports_position() {
        assert_eq!(parse_formula("b0 +").unwrap_err(), Error::Syntax { pos: 5, msg: "unexpected end of input".into() });
        assert!(matches!(parse_formula("b0 + (x1"), Err(Error::Syntax { pos: 9, .. })));
        assert!(matches!(parse_formula("b0 x1"), Err(Error::Syntax { pos: 4, .. })));
    }

    #[test]
    fn unknown_symbols_rejected() {
        assert_eq!(parse_formula("b0 + y1").unwrap_err(), Error::UnknownSymbol { name: "y1".into(), pos: 6 });
        assert!(matches!(parse_formula("sin(x1)"), Err(Error::UnknownSymbol { .. })));
        assert!(matches!(parse_formula("x0 * b0"), Err(Error::UnknownSymbol { .. })));
        assert!(matches!(parse_formula("bb"), Err(Error::UnknownSymbol { .. })));
    }

    #[test]
    fn precedence_and_associativity() {
        let f = parse_formula("-x1^2").unwrap();
        assert_eq!(f.eval_mean(&[3.0], &[]).unwrap(), -9.0);
        let f = parse_formula("2^3^2").unwrap();
        assert_eq!(f.eval_mean::<f64>(&[], &[]).unwrap(), 512.0);
        let f = parse_formula("8 / 4 / 2 - 1 - 1").unwrap();
        assert_eq!(f.eval_mean::<f64>(&[], &[]).unwrap(), -1.0);
        let f = parse_formula("2^-1 * 1e1").unwrap();
        assert_eq!(f.eval_mean::<f64>(&[], &[]).unwrap(), 5.0);
    }

    #[test]
    fn evaluates_examples() {
        let f = parse_formula("b0+b1*x1").unwrap();
        assert_eq!(f.eval_mean(&[2.0], &[1.0, 3.0]).unwrap(), 7.0);
        let f = parse_formula("exp(b1*x1)").unwrap();
        assert_eq!(f.eval_mean(&[0.0], &[-4.2]).unwrap(), 1.0);
        let f = parse_formula("exp(b1 - b2/(x1+b3))").unwrap();
        let want = (5.0f64 - 100.0 / 46.0).exp();
        assert!((f.eval_mean(&[10.0], &[5.0, 100.0, 36.0]).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn domain_and_dimension_errors() {
        let f = parse_formula("log(x1)").unwrap();
        assert!(matches!(f.eval_mean(&[-1.0], &[]), Err(Error::Domain(_))));
        let f = parse_formula("b0 * x2").unwrap();
        assert!(matches!(f.eval_mean(&[1.0], &[1.0]), Err(Error::DimensionMismatch(_))));
        assert!(matches!(f.eval_mean(&[1.0, 1.0], &[]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn linear_jacobian_is_design() {
        let f = parse_formula("b0+b1*x1").unwrap();
        let x = array![[0.5], [2.0], [-1.0]];
        let (_, j) = f.mean_jacobian(x.view(), array![0.3, -7.0].view()).unwrap();
        assert_eq!(j, array![[1.0, 0.5], [1.0, 2.0], [1.0, -1.0]]);
    }

    #[test]
    fn exponential_jacobian_chain_rule() {
        let f = parse_formula("exp(b1*x1)").unwrap();
        let x = array![[0.4f64], [1.5]];
        let (mu, j) = f.mean_jacobian(x.view(), array![0.8].view()).unwrap();
        for l in 0..2 {
            let xv = x[[l, 0]];
            assert!((mu[l] - (0.8 * xv).exp()).abs() < 1e-15);
            assert!((j[[l, 0]] - xv * (0.8 * xv).exp()).abs() < 1e-14);
        }
    }

    #[test]
    fn display_round_trips() {
        for s in ["b0 + exp(b1*x1) + b2*x2", "exp(b1 - b2/(x1 + b3))", "-x1^-2^b0 / sqrt(log(3.25e-3 + b4))"] {
            let f = parse_formula(s).unwrap();
            let g = parse_formula(&f.to_string()).unwrap();
            assert_eq!(f, g);
        }
    }
}
