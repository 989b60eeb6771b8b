//! Parametric waveform expressions.
//!
//! Grammar:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := NUMBER | IDENT | call | '(' expr ')' | '-' factor
//! call   := IDENT '(' [IDENT '=' expr (',' IDENT '=' expr)*] ')'
//! ```
//!
//! The identifier `t` is the time variable; every other bare identifier is a
//! named parameter resolved from [`Bindings`] at sampling time. Scaling by a
//! scalar is an ordinary product with a constant.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;

use thiserror::Error;

use super::{generate, WaveError, WaveKind, WaveParams, Waveform};

/// Parameter values used when sampling an expression.
pub type Bindings = HashMap<String, f64>;

const MAX_DEPTH: usize = 200;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at column {column}: {message}")]
    Syntax { column: usize, message: String },
    #[error("unknown primitive `{name}` at column {column}")]
    UnknownPrimitive { name: String, column: usize },
    #[error("duplicate argument `{name}` at column {column}")]
    DuplicateArgument { name: String, column: usize },
    #[error("parameter `{0}` is not bound")]
    UnboundParameter(String),
    #[error("argument `{arg}` of {primitive} depends on time")]
    TimeDependentArgument { primitive: WaveKind, arg: String },
    #[error("no symbolic derivative for `{0}`")]
    Unsupported(String),
    #[error(transparent)]
    Wave(#[from] WaveError),
}

impl ExprError {
    /// 1-based column for parse errors.
    pub fn column(&self) -> Option<usize> {
        match self {
            ExprError::Syntax { column, .. }
            | ExprError::UnknownPrimitive { column, .. }
            | ExprError::DuplicateArgument { column, .. } => Some(*column),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WaveExpr {
    Const(f64),
    /// The time variable `t`.
    Time,
    Param(String),
    Add(Box<WaveExpr>, Box<WaveExpr>),
    Sub(Box<WaveExpr>, Box<WaveExpr>),
    Mul(Box<WaveExpr>, Box<WaveExpr>),
    Div(Box<WaveExpr>, Box<WaveExpr>),
    Neg(Box<WaveExpr>),
    Call {
        kind: WaveKind,
        args: Vec<(String, WaveExpr)>,
    },
}

impl WaveExpr {
    pub fn call<S: Into<String>>(
        kind: WaveKind,
        args: impl IntoIterator<Item = (S, WaveExpr)>,
    ) -> Self {
        WaveExpr::Call {
            kind,
            args: args.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    pub fn param(name: impl Into<String>) -> Self {
        WaveExpr::Param(name.into())
    }

    /// True if the subtree varies with time (mentions `t` or a primitive call).
    pub fn is_time_dependent(&self) -> bool {
        match self {
            WaveExpr::Const(_) | WaveExpr::Param(_) => false,
            WaveExpr::Time | WaveExpr::Call { .. } => true,
            WaveExpr::Add(a, b)
            | WaveExpr::Sub(a, b)
            | WaveExpr::Mul(a, b)
            | WaveExpr::Div(a, b) => a.is_time_dependent() || b.is_time_dependent(),
            WaveExpr::Neg(a) => a.is_time_dependent(),
        }
    }

    /// Free parameter names, in first-occurrence order.
    pub fn free_parameters(&self) -> Vec<String> {
        fn walk(e: &WaveExpr, out: &mut Vec<String>) {
            match e {
                WaveExpr::Const(_) | WaveExpr::Time => {}
                WaveExpr::Param(p) => {
                    if !out.contains(p) {
                        out.push(p.clone());
                    }
                }
                WaveExpr::Add(a, b)
                | WaveExpr::Sub(a, b)
                | WaveExpr::Mul(a, b)
                | WaveExpr::Div(a, b) => {
                    walk(a, out);
                    walk(b, out);
                }
                WaveExpr::Neg(a) => walk(a, out),
                WaveExpr::Call { args, .. } => args.iter().for_each(|(_, v)| walk(v, out)),
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out
    }

    fn arg(&self, name: &str) -> Option<&WaveExpr> {
        match self {
            WaveExpr::Call { args, .. } => args.iter().find(|(k, _)| k == name).map(|(_, v)| v),
            _ => None,
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            WaveExpr::Add(..) | WaveExpr::Sub(..) => 1,
            WaveExpr::Mul(..) | WaveExpr::Div(..) => 2,
            WaveExpr::Neg(_) => 3,
            _ => 4,
        }
    }

    fn write_prec(&self, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        let prec = self.precedence();
        if prec < min {
            f.write_str("(")?;
        }
        match self {
            WaveExpr::Const(v) => write!(f, "{v:?}")?,
            WaveExpr::Time => f.write_str("t")?,
            WaveExpr::Param(p) => f.write_str(p)?,
            WaveExpr::Add(a, b)
            | WaveExpr::Sub(a, b)
            | WaveExpr::Mul(a, b)
            | WaveExpr::Div(a, b) => {
                let op = match self {
                    WaveExpr::Add(..) => " + ",
                    WaveExpr::Sub(..) => " - ",
                    WaveExpr::Mul(..) => "*",
                    _ => "/",
                };
                a.write_prec(f, prec)?;
                f.write_str(op)?;
                b.write_prec(f, prec + 1)?;
            }
            WaveExpr::Neg(a) => {
                f.write_str("-")?;
                a.write_prec(f, 3)?;
            }
            WaveExpr::Call { kind, args } => {
                write!(f, "{}(", kind.primitive_name())?;
                for (i, (name, value)) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{name}=")?;
                    value.write_prec(f, 0)?;
                }
                f.write_str(")")?;
            }
        }
        if prec < min {
            f.write_str(")")?;
        }
        Ok(())
    }
}

impl fmt::Display for WaveExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write_prec(f, 0)
    }
}

impl std::str::FromStr for WaveExpr {
    type Err = ExprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_expr(s)
    }
}

// ---------------------------------------------------------------------------
// Lexer / parser

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    LParen,
    RParen,
    Comma,
    Eq,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Slash => "`/`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Eq => "`=`".into(),
            Tok::End => "end of input".into(),
        }
    }
}

fn syntax(column: usize, message: impl Into<String>) -> ExprError {
    ExprError::Syntax {
        column,
        message: message.into(),
    }
}

fn lex(text: &str) -> Result<Vec<(Tok, usize)>, ExprError> {
    let bytes = text.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let col = i + 1;
        match c {
            b' ' | b'\t' | b'\r' | b'\n' => {
                i += 1;
                continue;
            }
            b'+' => toks.push((Tok::Plus, col)),
            b'-' => toks.push((Tok::Minus, col)),
            b'*' => toks.push((Tok::Star, col)),
            b'/' => toks.push((Tok::Slash, col)),
            b'(' => toks.push((Tok::LParen, col)),
            b')' => toks.push((Tok::RParen, col)),
            b',' => toks.push((Tok::Comma, col)),
            b'=' => toks.push((Tok::Eq, col)),
            b'0'..=b'9' | b'.' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    i += 1;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    } else {
                        return Err(syntax(j + 1, "malformed exponent"));
                    }
                }
                let lit = &text[start..i];
                let value: f64 = lit
                    .parse()
                    .map_err(|_| syntax(col, format!("malformed number `{lit}`")))?;
                toks.push((Tok::Num(value), col));
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                toks.push((Tok::Ident(text[start..i].to_string()), col));
                continue;
            }
            _ => {
                let ch = text[i..].chars().next().unwrap_or('?');
                return Err(syntax(col, format!("unexpected character `{ch}`")));
            }
        }
        i += 1;
    }
    toks.push((Tok::End, text.len() + 1));
    Ok(toks)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    depth: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn col(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> (Tok, usize) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), ExprError> {
        if *self.peek() == want {
            self.bump();
            Ok(())
        } else {
            Err(syntax(
                self.col(),
                format!("expected {what}, found {}", self.peek().describe()),
            ))
        }
    }

    fn enter(&mut self) -> Result<(), ExprError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            Err(syntax(self.col(), "expression nested too deeply"))
        } else {
            Ok(())
        }
    }

    fn expr(&mut self) -> Result<WaveExpr, ExprError> {
        self.enter()?;
        let mut lhs = self.term()?;
        loop {
            let ctor: fn(Box<WaveExpr>, Box<WaveExpr>) -> WaveExpr = match self.peek() {
                Tok::Plus => WaveExpr::Add,
                Tok::Minus => WaveExpr::Sub,
                _ => break,
            };
            self.bump();
            let rhs = self.term()?;
            lhs = ctor(Box::new(lhs), Box::new(rhs));
        }
        self.depth -= 1;
        Ok(lhs)
    }

    fn term(&mut self) -> Result<WaveExpr, ExprError> {
        let mut lhs = self.factor()?;
        loop {
            let ctor: fn(Box<WaveExpr>, Box<WaveExpr>) -> WaveExpr = match self.peek() {
                Tok::Star => WaveExpr::Mul,
                Tok::Slash => WaveExpr::Div,
                _ => break,
            };
            self.bump();
            let rhs = self.factor()?;
            lhs = ctor(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<WaveExpr, ExprError> {
        self.enter()?;
        let (tok, col) = self.bump();
        let out = match tok {
            Tok::Num(v) => WaveExpr::Const(v),
            Tok::Minus => WaveExpr::Neg(Box::new(self.factor()?)),
            Tok::LParen => {
                let inner = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                inner
            }
            Tok::Ident(name) => {
                if *self.peek() == Tok::LParen {
                    self.bump();
                    self.call(name, col)?
                } else if name == "t" {
                    WaveExpr::Time
                } else {
                    WaveExpr::Param(name)
                }
            }
            other => {
                return Err(syntax(
                    col,
                    format!("expected a value, found {}", other.describe()),
                ))
            }
        };
        self.depth -= 1;
        Ok(out)
    }

    fn call(&mut self, name: String, col: usize) -> Result<WaveExpr, ExprError> {
        let kind = WaveKind::from_primitive_name(&name)
            .ok_or(ExprError::UnknownPrimitive { name, column: col })?;
        let mut args: Vec<(String, WaveExpr)> = Vec::new();
        if *self.peek() == Tok::RParen {
            self.bump();
            return Ok(WaveExpr::Call { kind, args });
        }
        loop {
            let (tok, arg_col) = self.bump();
            let Tok::Ident(arg) = tok else {
                return Err(syntax(
                    arg_col,
                    format!("expected argument name, found {}", tok.describe()),
                ));
            };
            if args.iter().any(|(k, _)| *k == arg) {
                return Err(ExprError::DuplicateArgument {
                    name: arg,
                    column: arg_col,
                });
            }
            self.expect(Tok::Eq, "`=`")?;
            let value = self.expr()?;
            args.push((arg, value));
            match self.peek() {
                Tok::Comma => {
                    self.bump();
                }
                Tok::RParen => {
                    self.bump();
                    return Ok(WaveExpr::Call { kind, args });
                }
                other => {
                    return Err(syntax(
                        self.col(),
                        format!("expected `,` or `)`, found {}", other.describe()),
                    ))
                }
            }
        }
    }
}

/// Parses an expression. Errors carry a 1-based column.
pub fn parse_expr(text: &str) -> Result<WaveExpr, ExprError> {
    let toks = lex(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        depth: 0,
    };
    let e = p.expr()?;
    if *p.peek() != Tok::End {
        return Err(syntax(
            p.col(),
            format!("unexpected {}", p.peek().describe()),
        ));
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// Sampling

fn eval_scalar(e: &WaveExpr, bindings: &Bindings) -> Result<f64, ExprError> {
    Ok(match e {
        WaveExpr::Const(v) => *v,
        WaveExpr::Param(p) => *bindings
            .get(p)
            .ok_or_else(|| ExprError::UnboundParameter(p.clone()))?,
        WaveExpr::Add(a, b) => eval_scalar(a, bindings)? + eval_scalar(b, bindings)?,
        WaveExpr::Sub(a, b) => eval_scalar(a, bindings)? - eval_scalar(b, bindings)?,
        WaveExpr::Mul(a, b) => eval_scalar(a, bindings)? * eval_scalar(b, bindings)?,
        WaveExpr::Div(a, b) => eval_scalar(a, bindings)? / eval_scalar(b, bindings)?,
        WaveExpr::Neg(a) => -eval_scalar(a, bindings)?,
        WaveExpr::Time | WaveExpr::Call { .. } => unreachable!("checked by caller"),
    })
}

fn call_params(
    kind: WaveKind,
    args: &[(String, WaveExpr)],
    bindings: &Bindings,
) -> Result<WaveParams, ExprError> {
    args.iter()
        .map(|(name, value)| {
            if value.is_time_dependent() {
                return Err(ExprError::TimeDependentArgument {
                    primitive: kind,
                    arg: name.clone(),
                });
            }
            Ok((name.clone(), eval_scalar(value, bindings)?))
        })
        .collect()
}

fn eval_vec(
    e: &WaveExpr,
    bindings: &Bindings,
    length: usize,
    fs: f64,
) -> Result<Vec<f64>, ExprError> {
    let zip =
        |a: &WaveExpr, b: &WaveExpr, op: fn(f64, f64) -> f64| -> Result<Vec<f64>, ExprError> {
            let mut x = eval_vec(a, bindings, length, fs)?;
            let y = eval_vec(b, bindings, length, fs)?;
            x.iter_mut().zip(&y).for_each(|(l, r)| *l = op(*l, *r));
            Ok(x)
        };
    Ok(match e {
        WaveExpr::Time => (0..length).map(|n| n as f64 / fs).collect(),
        WaveExpr::Call { kind, args } => {
            let params = call_params(*kind, args, bindings)?;
            generate(*kind, &params, length, fs)?.into_samples()
        }
        WaveExpr::Add(a, b) => zip(a, b, |l, r| l + r)?,
        WaveExpr::Sub(a, b) => zip(a, b, |l, r| l - r)?,
        WaveExpr::Mul(a, b) => zip(a, b, |l, r| l * r)?,
        WaveExpr::Div(a, b) => zip(a, b, |l, r| l / r)?,
        WaveExpr::Neg(a) => {
            let mut x = eval_vec(a, bindings, length, fs)?;
            x.iter_mut().for_each(|v| *v = -*v);
            x
        }
        WaveExpr::Const(_) | WaveExpr::Param(_) => vec![eval_scalar(e, bindings)?; length],
    })
}

/// Evaluates `e` at `t = n / sample_rate`. Primitive calls delegate to
/// [`generate`], so a sum of calls is bit-identical to a pointwise add of the
/// generated waveforms.
pub fn sample_expr(
    e: &WaveExpr,
    bindings: &Bindings,
    length: usize,
    sample_rate: f64,
) -> Result<Waveform, ExprError> {
    if length == 0 {
        return Err(WaveError::EmptyWaveform.into());
    }
    if !(sample_rate > 0.0 && sample_rate.is_finite()) {
        return Err(WaveError::BadSampleRate(sample_rate).into());
    }
    let samples = eval_vec(e, bindings, length, sample_rate)?;
    Ok(Waveform::new(samples, sample_rate)?)
}

// ---------------------------------------------------------------------------
// Symbolic derivative

fn konst(v: f64) -> WaveExpr {
    WaveExpr::Const(v)
}

fn is_const(e: &WaveExpr, v: f64) -> bool {
    matches!(e, WaveExpr::Const(c) if *c == v)
}

fn add(a: WaveExpr, b: WaveExpr) -> WaveExpr {
    match (a, b) {
        (WaveExpr::Const(x), WaveExpr::Const(y)) => konst(x + y),
        (a, b) if is_const(&a, 0.0) => b,
        (a, b) if is_const(&b, 0.0) => a,
        (a, b) => WaveExpr::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: WaveExpr, b: WaveExpr) -> WaveExpr {
    match (a, b) {
        (WaveExpr::Const(x), WaveExpr::Const(y)) => konst(x - y),
        (a, b) if is_const(&b, 0.0) => a,
        (a, b) if is_const(&a, 0.0) => neg(b),
        (a, b) => WaveExpr::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: WaveExpr, b: WaveExpr) -> WaveExpr {
    match (a, b) {
        (WaveExpr::Const(x), WaveExpr::Const(y)) => konst(x * y),
        (a, b) if is_const(&a, 0.0) || is_const(&b, 0.0) => konst(0.0),
        (a, b) if is_const(&a, 1.0) => b,
        (a, b) if is_const(&b, 1.0) => a,
        (a, b) => WaveExpr::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: WaveExpr, b: WaveExpr) -> WaveExpr {
    match (a, b) {
        (a, _) if is_const(&a, 0.0) => konst(0.0),
        (a, b) if is_const(&b, 1.0) => a,
        (a, b) => WaveExpr::Div(Box::new(a), Box::new(b)),
    }
}

fn neg(a: WaveExpr) -> WaveExpr {
    match a {
        WaveExpr::Const(x) => konst(-x),
        WaveExpr::Neg(inner) => *inner,
        a => WaveExpr::Neg(Box::new(a)),
    }
}

/// d/dt of `e`. Primitive arguments must not depend on time. Rectangle,
/// trapezoid and triangle have no symbolic rule; callers fall back to
/// [`super::differentiate_numeric`].
pub fn differentiate_expr(e: &WaveExpr) -> Result<WaveExpr, ExprError> {
    Ok(match e {
        WaveExpr::Const(_) | WaveExpr::Param(_) => konst(0.0),
        WaveExpr::Time => konst(1.0),
        WaveExpr::Add(a, b) => add(differentiate_expr(a)?, differentiate_expr(b)?),
        WaveExpr::Sub(a, b) => sub(differentiate_expr(a)?, differentiate_expr(b)?),
        WaveExpr::Mul(a, b) => {
            let (da, db) = (differentiate_expr(a)?, differentiate_expr(b)?);
            add(mul(da, (**b).clone()), mul((**a).clone(), db))
        }
        WaveExpr::Div(a, b) => {
            let (da, db) = (differentiate_expr(a)?, differentiate_expr(b)?);
            let num = sub(mul(da, (**b).clone()), mul((**a).clone(), db));
            div(num, mul((**b).clone(), (**b).clone()))
        }
        WaveExpr::Neg(a) => neg(differentiate_expr(a)?),
        WaveExpr::Call { kind, args } => differentiate_call(e, *kind, args)?,
    })
}

fn differentiate_call(
    e: &WaveExpr,
    kind: WaveKind,
    args: &[(String, WaveExpr)],
) -> Result<WaveExpr, ExprError> {
    if let Some((name, _)) = args.iter().find(|(_, v)| v.is_time_dependent()) {
        return Err(ExprError::TimeDependentArgument {
            primitive: kind,
            arg: name.clone(),
        });
    }
    let get = |name: &str, default: Option<f64>| -> Result<WaveExpr, ExprError> {
        match (e.arg(name), default) {
            (Some(v), _) => Ok(v.clone()),
            (None, Some(d)) => Ok(konst(d)),
            (None, None) => Err(WaveError::MissingParameter {
                kind,
                name: kind
                    .parameters()
                    .iter()
                    .copied()
                    .find(|p| *p == name)
                    .unwrap_or("?"),
            }
            .into()),
        }
    };
    let a = || get("a", Some(1.0));
    Ok(match kind {
        WaveKind::Dc => konst(0.0),
        WaveKind::Sine => {
            // a sin(2 pi f t + phi) -> a 2 pi f sin(2 pi f t + phi + pi/2)
            let f = get("f", None)?;
            let amp = mul(mul(a()?, konst(2.0 * PI)), f.clone());
            let phi = add(get("phi", Some(0.0))?, konst(FRAC_PI_2));
            WaveExpr::call(WaveKind::Sine, [("a", amp), ("f", f), ("phi", phi)])
        }
        WaveKind::Gaussian => {
            let mu = get("mu", None)?;
            let sigma = get("sigma", None)?;
            let slope = neg(div(sub(WaveExpr::Time, mu), mul(sigma.clone(), sigma)));
            mul(slope, e.clone())
        }
        WaveKind::Slope => {
            // ramp of height a over width -> box of height a/width on [t0, t0 + width)
            let t0 = get("t0", None)?;
            let width = get("width", None)?;
            WaveExpr::call(
                WaveKind::Rectangle,
                [
                    ("a", div(a()?, width.clone())),
                    ("t1", t0.clone()),
                    ("t2", add(t0, width)),
                ],
            )
        }
        WaveKind::Flattop => {
            // a/2 [erf((t-t1)/(sqrt2 s)) - erf((t-t2)/(sqrt2 s))] -> a [N(t-t1) - N(t-t2)]
            let sigma = get("sigma", None)?;
            let peak = div(a()?, mul(sigma.clone(), konst((2.0 * PI).sqrt())));
            let edge = |mu: WaveExpr| {
                WaveExpr::call(
                    WaveKind::Gaussian,
                    [("a", peak.clone()), ("mu", mu), ("sigma", sigma.clone())],
                )
            };
            sub(edge(get("t1", None)?), edge(get("t2", None)?))
        }
        WaveKind::Rectangle | WaveKind::IsoscelesTrapezoid | WaveKind::Triangle => {
            return Err(ExprError::Unsupported(kind.primitive_name().to_string()))
        }
    })
}
