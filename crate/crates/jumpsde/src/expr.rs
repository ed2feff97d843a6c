//! Closed-form drift/diffusion expressions in one variable `x`.
//!
//! A small fixed function set (sin, cos, exp, tanh, abs, integer powers)
//! with exact symbolic differentiation, enough to host every coefficient
//! used in the experiments without pulling in a CAS.

use std::fmt;
use std::sync::Arc;

use crate::Coefficient;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryFn {
    Neg,
    Sin,
    Cos,
    Exp,
    Tanh,
    Abs,
    /// Not part of the surface language; produced by differentiating `abs`.
    /// Takes the value 0 at the origin.
    Sign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprAst {
    Const(f64),
    Var,
    Unary(UnaryFn, Box<ExprAst>),
    Bin(BinOp, Box<ExprAst>, Box<ExprAst>),
    /// Integer power of a subexpression; exponent kept integral so the
    /// symbolic derivative stays closed-form.
    Pow(Box<ExprAst>, i32),
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ParseError {
    #[error("syntax error at byte {0}: {1}")]
    Syntax(usize, String),
    #[error("unknown identifier `{1}` at byte {0}")]
    UnknownIdent(usize, String),
    #[error("non-integer exponent at byte {0}")]
    NonIntegerExponent(usize),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                out.push((i, Tok::Plus));
                i += 1;
            }
            '-' | '\u{2212}' => {
                // accept ASCII minus; the unicode minus arm never triggers on
                // single bytes but keeps the match explicit
                out.push((i, Tok::Minus));
                i += 1;
            }
            '*' => {
                out.push((i, Tok::Star));
                i += 1;
            }
            '/' => {
                out.push((i, Tok::Slash));
                i += 1;
            }
            '^' => {
                out.push((i, Tok::Caret));
                i += 1;
            }
            '(' => {
                out.push((i, Tok::LParen));
                i += 1;
            }
            ')' => {
                out.push((i, Tok::RParen));
                i += 1;
            }
            ',' => {
                out.push((i, Tok::Comma));
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_digit()
                        || bytes[i] == b'.'
                        || bytes[i] == b'e'
                        || bytes[i] == b'E'
                        || ((bytes[i] == b'+' || bytes[i] == b'-')
                            && i > start
                            && (bytes[i - 1] == b'e' || bytes[i - 1] == b'E')))
                {
                    i += 1;
                }
                let text = &src[start..i];
                let v: f64 = text
                    .parse()
                    .map_err(|_| ParseError::Syntax(start, format!("bad number `{text}`")))?;
                out.push((start, Tok::Num(v)));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((start, Tok::Ident(src[start..i].to_string())));
            }
            other => {
                return Err(ParseError::Syntax(i, format!("unexpected character `{other}`")));
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: &'a [(usize, Tok)],
    pos: usize,
    end: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map(|(o, _)| *o).unwrap_or(self.end)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(_, t)| t.clone());
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: Tok) -> Result<(), ParseError> {
        let off = self.offset();
        match self.bump() {
            Some(ref t) if *t == want => Ok(()),
            other => Err(ParseError::Syntax(
                off,
                format!("expected {want:?}, found {other:?}"),
            )),
        }
    }

    // expr := term (('+'|'-') term)*
    fn expr(&mut self) -> Result<ExprAst, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.bump();
                    let rhs = self.term()?;
                    lhs = ExprAst::Bin(BinOp::Add, Box::new(lhs), Box::new(rhs));
                }
                Some(Tok::Minus) => {
                    self.bump();
                    let rhs = self.term()?;
                    lhs = ExprAst::Bin(BinOp::Sub, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    // term := unary (('*'|'/') unary)*
    fn term(&mut self) -> Result<ExprAst, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.bump();
                    let rhs = self.unary()?;
                    lhs = ExprAst::Bin(BinOp::Mul, Box::new(lhs), Box::new(rhs));
                }
                Some(Tok::Slash) => {
                    self.bump();
                    let rhs = self.unary()?;
                    lhs = ExprAst::Bin(BinOp::Div, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    // unary := '-' unary | power
    fn unary(&mut self) -> Result<ExprAst, ParseError> {
        if let Some(Tok::Minus) = self.peek() {
            self.bump();
            let inner = self.unary()?;
            return Ok(ExprAst::Unary(UnaryFn::Neg, Box::new(inner)));
        }
        self.power()
    }

    // power := atom ('^' exponent)?   -- binds tighter than unary minus
    fn power(&mut self) -> Result<ExprAst, ParseError> {
        let base = self.atom()?;
        if let Some(Tok::Caret) = self.peek() {
            self.bump();
            let off = self.offset();
            let neg = if let Some(Tok::Minus) = self.peek() {
                self.bump();
                true
            } else {
                false
            };
            match self.bump() {
                Some(Tok::Num(v)) => {
                    if v.fract() != 0.0 || v.abs() > i32::MAX as f64 {
                        return Err(ParseError::NonIntegerExponent(off));
                    }
                    let mut n = v as i32;
                    if neg {
                        n = -n;
                    }
                    return Ok(ExprAst::Pow(Box::new(base), n));
                }
                _ => return Err(ParseError::NonIntegerExponent(off)),
            }
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<ExprAst, ParseError> {
        let off = self.offset();
        match self.bump() {
            Some(Tok::Num(v)) => Ok(ExprAst::Const(v)),
            Some(Tok::Ident(name)) => match name.as_str() {
                "x" => Ok(ExprAst::Var),
                "pi" => Ok(ExprAst::Const(std::f64::consts::PI)),
                "sin" | "cos" | "exp" | "tanh" | "abs" | "sign" => {
                    self.expect(Tok::LParen)?;
                    let arg = self.expr()?;
                    self.expect(Tok::RParen)?;
                    let f = match name.as_str() {
                        "sin" => UnaryFn::Sin,
                        "cos" => UnaryFn::Cos,
                        "exp" => UnaryFn::Exp,
                        "tanh" => UnaryFn::Tanh,
                        "abs" => UnaryFn::Abs,
                        _ => UnaryFn::Sign,
                    };
                    Ok(ExprAst::Unary(f, Box::new(arg)))
                }
                _ => Err(ParseError::UnknownIdent(off, name)),
            },
            Some(Tok::LParen) => {
                let inner = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(inner)
            }
            other => Err(ParseError::Syntax(off, format!("unexpected token {other:?}"))),
        }
    }
}

/// Parse an infix expression in the single free variable `x`.
pub fn parse(src: &str) -> Result<ExprAst, ParseError> {
    let toks = lex(src)?;
    let mut p = Parser {
        toks: &toks,
        pos: 0,
        end: src.len(),
    };
    let ast = p.expr()?;
    if p.pos != toks.len() {
        return Err(ParseError::Syntax(p.offset(), "trailing input".into()));
    }
    Ok(ast)
}

impl ExprAst {
    /// IEEE evaluation; domain errors surface as NaN/inf for the caller.
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            ExprAst::Const(c) => *c,
            ExprAst::Var => x,
            ExprAst::Unary(f, a) => {
                let v = a.eval(x);
                match f {
                    UnaryFn::Neg => -v,
                    UnaryFn::Sin => v.sin(),
                    UnaryFn::Cos => v.cos(),
                    UnaryFn::Exp => v.exp(),
                    UnaryFn::Tanh => v.tanh(),
                    UnaryFn::Abs => v.abs(),
                    UnaryFn::Sign => {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }
                }
            }
            ExprAst::Bin(op, a, b) => {
                let (va, vb) = (a.eval(x), b.eval(x));
                match op {
                    BinOp::Add => va + vb,
                    BinOp::Sub => va - vb,
                    BinOp::Mul => va * vb,
                    BinOp::Div => va / vb,
                }
            }
            ExprAst::Pow(a, n) => a.eval(x).powi(*n),
        }
    }

    /// Exact symbolic derivative. `abs` uses subgradient 0 at the origin.
    pub fn derivative(&self) -> ExprAst {
        use ExprAst::*;
        match self {
            Const(_) => Const(0.0),
            Var => Const(1.0),
            Unary(f, a) => {
                let da = a.derivative();
                match f {
                    UnaryFn::Neg => Unary(UnaryFn::Neg, Box::new(da)),
                    UnaryFn::Sin => mul(Unary(UnaryFn::Cos, a.clone()), da),
                    UnaryFn::Cos => Unary(
                        UnaryFn::Neg,
                        Box::new(mul(Unary(UnaryFn::Sin, a.clone()), da)),
                    ),
                    UnaryFn::Exp => mul(Unary(UnaryFn::Exp, a.clone()), da),
                    // d tanh = 1 - tanh^2
                    UnaryFn::Tanh => mul(
                        Bin(
                            BinOp::Sub,
                            Box::new(Const(1.0)),
                            Box::new(Pow(Box::new(Unary(UnaryFn::Tanh, a.clone())), 2)),
                        ),
                        da,
                    ),
                    // sign(a) * da, with sign(0) = 0
                    UnaryFn::Abs => mul(Unary(UnaryFn::Sign, a.clone()), da),
                    UnaryFn::Sign => Const(0.0),
                }
            }
            Bin(op, a, b) => {
                let (da, db) = (a.derivative(), b.derivative());
                match op {
                    BinOp::Add => Bin(BinOp::Add, Box::new(da), Box::new(db)),
                    BinOp::Sub => Bin(BinOp::Sub, Box::new(da), Box::new(db)),
                    BinOp::Mul => Bin(
                        BinOp::Add,
                        Box::new(mul((**a).clone(), db)),
                        Box::new(mul((**b).clone(), da)),
                    ),
                    BinOp::Div => Bin(
                        BinOp::Div,
                        Box::new(Bin(
                            BinOp::Sub,
                            Box::new(mul((**b).clone(), da)),
                            Box::new(mul((**a).clone(), db)),
                        )),
                        Box::new(Pow(b.clone(), 2)),
                    ),
                }
            }
            Pow(a, n) => {
                if *n == 0 {
                    return Const(0.0);
                }
                let da = a.derivative();
                mul(
                    mul(Const(*n as f64), Pow(a.clone(), n - 1)),
                    da,
                )
            }
        }
    }
}

fn mul(a: ExprAst, b: ExprAst) -> ExprAst {
    ExprAst::Bin(BinOp::Mul, Box::new(a), Box::new(b))
}

impl fmt::Display for ExprAst {
    fn fmt(&self, out: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExprAst::Const(c) if *c < 0.0 => write!(out, "({c})"),
            ExprAst::Const(c) => write!(out, "{c}"),
            ExprAst::Var => write!(out, "x"),
            ExprAst::Unary(f, a) => match f {
                UnaryFn::Neg => write!(out, "(-({a}))"),
                UnaryFn::Sin => write!(out, "sin({a})"),
                UnaryFn::Cos => write!(out, "cos({a})"),
                UnaryFn::Exp => write!(out, "exp({a})"),
                UnaryFn::Tanh => write!(out, "tanh({a})"),
                UnaryFn::Abs => write!(out, "abs({a})"),
                UnaryFn::Sign => write!(out, "sign({a})"),
            },
            ExprAst::Bin(op, a, b) => {
                let sym = match op {
                    BinOp::Add => "+",
                    BinOp::Sub => "-",
                    BinOp::Mul => "*",
                    BinOp::Div => "/",
                };
                write!(out, "({a}{sym}{b})")
            }
            ExprAst::Pow(a, n) => {
                if *n < 0 {
                    write!(out, "({a}^(-{}))", -(*n as i64))
                } else {
                    write!(out, "({a}^{n})")
                }
            }
        }
    }
}

/// Expression-backed coefficient with its exact symbolic derivative.
pub struct ExprCoefficient {
    pub ast: ExprAst,
    pub deriv: ExprAst,
    pub source: String,
}

impl ExprCoefficient {
    pub fn new(src: &str) -> Result<Self, ParseError> {
        let ast = parse(src)?;
        let deriv = ast.derivative();
        Ok(Self {
            ast,
            deriv,
            source: src.to_string(),
        })
    }

    pub fn shared(src: &str) -> Result<Arc<Self>, ParseError> {
        Ok(Arc::new(Self::new(src)?))
    }
}

impl Coefficient for ExprCoefficient {
    fn value(&self, x: f64) -> f64 {
        self.ast.eval(x)
    }
    fn slope(&self, x: f64) -> f64 {
        self.deriv.eval(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(src: &str, x: f64) -> f64 {
        parse(src).unwrap().eval(x)
    }

    #[test]
    fn table_coefficients() {
        assert_eq!(ev("-0.25*x^3", 2.0), -2.0);
        assert_eq!(ev("x", 1.5), 1.5);
        assert!((ev("0.76*(1+cos(x))", 0.0) - 1.52).abs() < 1e-15);
        assert_eq!(ev("1-x", 1.0), 0.0);
        assert!((ev("0.35*x+0.2", 1.5) - 0.725).abs() < 1e-15);
        assert!((ev("sin(x)", std::f64::consts::FRAC_PI_2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("2+3*4", 0.0), 14.0);
        assert_eq!(ev("2-3-4", 0.0), -5.0);
        assert_eq!(ev("12/3/2", 0.0), 2.0);
        // ^ binds tighter than unary minus
        assert_eq!(ev("-2^2", 0.0), -4.0);
        assert_eq!(ev("2*x^2", 3.0), 18.0);
    }

    #[test]
    fn derivative_examples() {
        let d = parse("0.57*x").unwrap().derivative();
        assert_eq!(d.eval(3.7), 0.57);
        let d = parse("4.25").unwrap().derivative();
        assert_eq!(d.eval(1.0), 0.0);
        let d = parse("0.32*sin(x)").unwrap().derivative();
        assert!((d.eval(0.0) - 0.32).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        match parse("0.3*y") {
            Err(ParseError::UnknownIdent(off, name)) => {
                assert_eq!(off, 4);
                assert_eq!(name, "y");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse("x^1.5"), Err(ParseError::NonIntegerExponent(_))));
        assert!(matches!(parse("1+"), Err(ParseError::Syntax(_, _))));
        assert!(matches!(parse("(1+x"), Err(ParseError::Syntax(_, _))));
    }

    #[test]
    fn negative_exponent() {
        assert_eq!(ev("x^-2", 2.0), 0.25);
        let d = parse("x^-2").unwrap().derivative();
        assert!((d.eval(2.0) - (-2.0 / 8.0)).abs() < 1e-15);
    }

    #[test]
    fn abs_subgradient_zero_at_origin() {
        let d = parse("abs(x)").unwrap().derivative();
        assert_eq!(d.eval(0.0), 0.0);
        assert_eq!(d.eval(2.0), 1.0);
        assert_eq!(d.eval(-2.0), -1.0);
    }

    #[test]
    fn division_by_zero_propagates_nonfinite() {
        let v = ev("1/x", 0.0);
        assert!(!v.is_finite());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;
        use proptest::string::string_regex;

        fn arb_ast() -> impl Strategy<Value = ExprAst> {
            let leaf = prop_oneof![
                (-3.0..3.0f64).prop_map(ExprAst::Const),
                Just(ExprAst::Var),
            ];
            leaf.prop_recursive(4, 32, 2, |inner| {
                prop_oneof![
                    (inner.clone(), inner.clone(), prop_oneof![
                        Just(BinOp::Add), Just(BinOp::Sub), Just(BinOp::Mul)
                    ])
                        .prop_map(|(a, b, op)| ExprAst::Bin(op, Box::new(a), Box::new(b))),
                    (inner.clone(), prop_oneof![
                        Just(UnaryFn::Sin), Just(UnaryFn::Cos), Just(UnaryFn::Tanh), Just(UnaryFn::Neg)
                    ])
                        .prop_map(|(a, f)| ExprAst::Unary(f, Box::new(a))),
                    (inner, 1..4i32).prop_map(|(a, n)| ExprAst::Pow(Box::new(a), n)),
                ]
            })
        }

        proptest! {
            #[test]
            fn derivative_matches_central_difference(ast in arb_ast(), x in -2.0..2.0f64) {
                let d = ast.derivative();
                let h = 1e-5;
                let fd = (ast.eval(x + h) - ast.eval(x - h)) / (2.0 * h);
                let sym = d.eval(x);
                if fd.is_finite() && sym.is_finite() {
                    // central difference truncation on smooth composites
                    prop_assert!((sym - fd).abs() <= 1e-6 * (1.0 + sym.abs().max(fd.abs())),
                        "sym={sym} fd={fd}");
                }
            }

            #[test]
            fn print_parse_round_trip(ast in arb_ast(), x in -2.0..2.0f64) {
                let printed = ast.to_string();
                let reparsed = parse(&printed).unwrap();
                let (a, b) = (ast.eval(x), reparsed.eval(x));
                if a.is_finite() {
                    prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
                }
            }

            #[test]
            fn lexer_never_panics(src in string_regex("[-+*/^().x0-9 a-z]{0,24}").unwrap()) {
                let _ = parse(&src);
            }
        }
    }
}
