//! Scalar-field expression language for drift and coupling entries.
//!
//! Grammar, loosest binding first:
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?          right-associative
//! primary := number | x<k> | name | func '(' expr ')' | '(' expr ')'
//! ```
//!
//! State variables are `x1`..`xn`; any other identifier not followed by `(`
//! is a named parameter. Functions: `sin cos exp log tanh sqrt abs`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Named parameter values. Ordered so printed output is deterministic.
pub type Params = BTreeMap<String, f64>;

static NO_PARAMS: Params = BTreeMap::new();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Tanh,
    Sqrt,
    Abs,
}

impl Func {
    pub const ALL: [Func; 7] = [
        Func::Sin,
        Func::Cos,
        Func::Exp,
        Func::Log,
        Func::Tanh,
        Func::Sqrt,
        Func::Abs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Tanh => "tanh",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        Func::ALL.iter().copied().find(|f| f.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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

/// Expression tree. Variable indices are 1-based (`Var(1)` is `x1`).
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(usize),
    Param(String),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("empty expression")]
    Empty,
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown function `{name}` at byte {offset}")]
    UnknownFunction { offset: usize, name: String },
    #[error("unbalanced parenthesis at byte {offset}")]
    Unbalanced { offset: usize },
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Empty => 0,
            ParseError::Syntax { offset, .. }
            | ParseError::UnknownFunction { offset, .. }
            | ParseError::Unbalanced { offset } => *offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("variable x{index} is unbound (state has {len} entries)")]
    UnboundVariable { index: usize, len: usize },
    #[error("parameter `{name}` is unbound")]
    UnboundParameter { name: String },
    #[error("{reason} in `{subexpr}`")]
    Domain { reason: &'static str, subexpr: String },
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

fn lex(text: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'.' {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            // exponent only when a digit follows (optionally after a sign)
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
                }
            }
            let lit = &text[start..i];
            let value: f64 = lit.parse().map_err(|_| ParseError::Syntax {
                offset: start,
                message: format!("malformed number `{lit}`"),
            })?;
            if !value.is_finite() {
                return Err(ParseError::Syntax {
                    offset: start,
                    message: format!("number `{lit}` is out of range"),
                });
            }
            out.push((Tok::Num(value), start));
        } else if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((Tok::Ident(text[start..i].to_string()), start));
        } else {
            let tok = match c {
                b'+' | b'-' | b'*' | b'/' | b'^' => Tok::Op(c as char),
                b'(' => Tok::LParen,
                b')' => Tok::RParen,
                _ => {
                    let ch = text[start..].chars().next().unwrap_or('?');
                    return Err(ParseError::Syntax {
                        offset: start,
                        message: format!("unexpected character `{ch}`"),
                    });
                }
            };
            out.push((tok, start));
            i += 1;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(_, o)| *o)
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek() {
            let op = if *c == '+' { BinOp::Add } else { BinOp::Sub };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(c @ ('*' | '/'))) = self.peek() {
            let op = if *c == '*' { BinOp::Mul } else { BinOp::Div };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if let Some(Tok::Op('-')) = self.peek() {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            let exponent = self.unary()?;
            return Ok(Expr::Binary(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let offset = self.offset();
        let Some((tok, _)) = self.toks.get(self.pos).cloned() else {
            return Err(ParseError::Syntax {
                offset,
                message: "unexpected end of expression".into(),
            });
        };
        self.pos += 1;
        match tok {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::LParen => {
                let inner = self.expr()?;
                self.close_paren(offset)?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                if let Some(Tok::LParen) = self.peek() {
                    let Some(func) = Func::from_name(&name) else {
                        return Err(ParseError::UnknownFunction { offset, name });
                    };
                    let open = self.offset();
                    self.pos += 1;
                    let arg = self.expr()?;
                    self.close_paren(open)?;
                    return Ok(Expr::Call(func, Box::new(arg)));
                }
                if Func::from_name(&name).is_some() {
                    return Err(ParseError::Syntax {
                        offset,
                        message: format!("function `{name}` requires a parenthesized argument"),
                    });
                }
                if let Some(index) = variable_index(&name) {
                    if index == 0 {
                        return Err(ParseError::Syntax {
                            offset,
                            message: "state variables are numbered from x1".into(),
                        });
                    }
                    return Ok(Expr::Var(index));
                }
                Ok(Expr::Param(name))
            }
            Tok::RParen => Err(ParseError::Unbalanced { offset }),
            Tok::Op(c) => Err(ParseError::Syntax {
                offset,
                message: format!("unexpected operator `{c}`"),
            }),
        }
    }

    fn close_paren(&mut self, open: usize) -> Result<(), ParseError> {
        match self.peek() {
            Some(Tok::RParen) => {
                self.pos += 1;
                Ok(())
            }
            None => Err(ParseError::Unbalanced { offset: open }),
            Some(_) => Err(ParseError::Syntax {
                offset: self.offset(),
                message: "expected `)`".into(),
            }),
        }
    }
}

fn variable_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix('x')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    // absurdly long indices are still variables, just unusable ones
    Some(digits.parse().unwrap_or(usize::MAX))
}

/// Parses an expression string.
pub fn parse(text: &str) -> Result<Expr, ParseError> {
    let toks = lex(text)?;
    if toks.is_empty() {
        return Err(ParseError::Empty);
    }
    let mut p = Parser {
        toks,
        pos: 0,
        end: text.len(),
    };
    let expr = p.expr()?;
    match p.toks.get(p.pos) {
        None => Ok(expr),
        Some((Tok::RParen, offset)) => Err(ParseError::Unbalanced { offset: *offset }),
        Some((_, offset)) => Err(ParseError::Syntax {
            offset: *offset,
            message: "expected an operator".into(),
        }),
    }
}

// ---------------------------------------------------------------------------
// Evaluation

impl Expr {
    /// Evaluates the expression at `state` (`x1` is `state[0]`).
    pub fn eval(&self, state: &[f64], params: &Params) -> Result<f64, EvalError> {
        match self {
            Expr::Num(v) => Ok(*v),
            Expr::Var(k) => state.get(k.wrapping_sub(1)).copied().ok_or(EvalError::UnboundVariable {
                index: *k,
                len: state.len(),
            }),
            Expr::Param(name) => params
                .get(name)
                .copied()
                .ok_or_else(|| EvalError::UnboundParameter { name: name.clone() }),
            Expr::Neg(e) => Ok(-e.eval(state, params)?),
            Expr::Binary(op, l, r) => {
                let a = l.eval(state, params)?;
                let b = r.eval(state, params)?;
                self.apply_binary(*op, a, b)
            }
            Expr::Call(f, arg) => {
                let v = arg.eval(state, params)?;
                self.apply_func(*f, v)
            }
        }
    }

    /// Evaluates an expression that has no free parameters (see [`Expr::bind`]).
    #[inline]
    pub fn eval_bound(&self, state: &[f64]) -> Result<f64, EvalError> {
        self.eval(state, &NO_PARAMS)
    }

    fn apply_binary(&self, op: BinOp, a: f64, b: f64) -> Result<f64, EvalError> {
        match op {
            BinOp::Add => Ok(a + b),
            BinOp::Sub => Ok(a - b),
            BinOp::Mul => Ok(a * b),
            BinOp::Div => {
                if b == 0.0 {
                    Err(self.domain("division by zero"))
                } else {
                    Ok(a / b)
                }
            }
            BinOp::Pow => {
                if a < 0.0 && b.fract() != 0.0 {
                    Err(self.domain("negative base with non-integer exponent"))
                } else if a == 0.0 && b < 0.0 {
                    Err(self.domain("zero raised to a negative power"))
                } else {
                    Ok(a.powf(b))
                }
            }
        }
    }

    fn apply_func(&self, f: Func, v: f64) -> Result<f64, EvalError> {
        Ok(match f {
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Exp => v.exp(),
            Func::Log => {
                if v <= 0.0 {
                    return Err(self.domain("logarithm of a non-positive value"));
                }
                v.ln()
            }
            Func::Tanh => v.tanh(),
            Func::Sqrt => {
                if v < 0.0 {
                    return Err(self.domain("square root of a negative value"));
                }
                v.sqrt()
            }
            Func::Abs => v.abs(),
        })
    }

    fn domain(&self, reason: &'static str) -> EvalError {
        EvalError::Domain {
            reason,
            subexpr: self.to_string(),
        }
    }

    /// Largest referenced variable index (0 when the expression is state-free).
    pub fn max_var_index(&self) -> usize {
        match self {
            Expr::Num(_) | Expr::Param(_) => 0,
            Expr::Var(k) => *k,
            Expr::Neg(e) | Expr::Call(_, e) => e.max_var_index(),
            Expr::Binary(_, l, r) => l.max_var_index().max(r.max_var_index()),
        }
    }

    /// Names of all referenced parameters, sorted and deduplicated.
    pub fn param_names(&self) -> Vec<String> {
        fn walk(e: &Expr, out: &mut Vec<String>) {
            match e {
                Expr::Param(name) => out.push(name.clone()),
                Expr::Num(_) | Expr::Var(_) => {}
                Expr::Neg(e) | Expr::Call(_, e) => walk(e, out),
                Expr::Binary(_, l, r) => {
                    walk(l, out);
                    walk(r, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out.sort();
        out.dedup();
        out
    }

    /// Replaces every occurrence of parameter `name` by `with`.
    pub fn substitute(&self, name: &str, with: &Expr) -> Expr {
        match self {
            Expr::Param(p) if p == name => with.clone(),
            Expr::Num(_) | Expr::Var(_) | Expr::Param(_) => self.clone(),
            Expr::Neg(e) => Expr::Neg(Box::new(e.substitute(name, with))),
            Expr::Call(f, e) => Expr::Call(*f, Box::new(e.substitute(name, with))),
            Expr::Binary(op, l, r) => Expr::Binary(
                *op,
                Box::new(l.substitute(name, with)),
                Box::new(r.substitute(name, with)),
            ),
        }
    }

    /// Substitutes parameter values and folds state-free subtrees.
    ///
    /// Folding performs the same floating-point operations evaluation would,
    /// so a bound expression evaluates bit-identically to the original.
    pub fn bind(&self, params: &Params) -> Result<Expr, EvalError> {
        Ok(match self {
            Expr::Num(_) | Expr::Var(_) => self.clone(),
            Expr::Param(name) => Expr::Num(
                params
                    .get(name)
                    .copied()
                    .ok_or_else(|| EvalError::UnboundParameter { name: name.clone() })?,
            ),
            Expr::Neg(e) => match e.bind(params)? {
                Expr::Num(v) => Expr::Num(-v),
                b => Expr::Neg(Box::new(b)),
            },
            Expr::Call(f, e) => {
                let inner = e.bind(params)?;
                let node = Expr::Call(*f, Box::new(inner));
                fold(node)
            }
            Expr::Binary(op, l, r) => {
                let node = Expr::Binary(*op, Box::new(l.bind(params)?), Box::new(r.bind(params)?));
                fold(node)
            }
        })
    }

    /// Symbolic partial derivative with respect to `x{var}`. Parameters are
    /// constants. `abs` differentiates to `e/abs(e)`, undefined at zero.
    pub fn derivative(&self, var: usize) -> Expr {
        use BinOp::*;
        let d = |e: &Expr| e.derivative(var);
        match self {
            Expr::Num(_) | Expr::Param(_) => Expr::Num(0.0),
            Expr::Var(k) => Expr::Num(if *k == var { 1.0 } else { 0.0 }),
            Expr::Neg(e) => neg(d(e)),
            Expr::Binary(Add, l, r) => add(d(l), d(r)),
            Expr::Binary(Sub, l, r) => sub(d(l), d(r)),
            Expr::Binary(Mul, l, r) => add(mul(d(l), (**r).clone()), mul((**l).clone(), d(r))),
            Expr::Binary(Div, l, r) if !r.depends_on(var) => div(d(l), (**r).clone()),
            Expr::Binary(Div, l, r) => div(
                sub(mul(d(l), (**r).clone()), mul((**l).clone(), d(r))),
                pow((**r).clone(), Expr::Num(2.0)),
            ),
            Expr::Binary(Pow, base, exp) if !exp.depends_on(var) => {
                let lowered = sub((**exp).clone(), Expr::Num(1.0));
                mul(mul((**exp).clone(), pow((**base).clone(), lowered)), d(base))
            }
            Expr::Binary(Pow, base, exp) => {
                // f^g (g' ln f + g f'/f)
                let inner = add(
                    mul(d(exp), call(Func::Log, (**base).clone())),
                    div(mul((**exp).clone(), d(base)), (**base).clone()),
                );
                mul(self.clone(), inner)
            }
            Expr::Call(f, e) => {
                let arg = (**e).clone();
                let outer = match f {
                    Func::Sin => call(Func::Cos, arg),
                    Func::Cos => neg(call(Func::Sin, arg)),
                    Func::Exp => self.clone(),
                    Func::Log => div(Expr::Num(1.0), arg),
                    Func::Tanh => sub(Expr::Num(1.0), pow(self.clone(), Expr::Num(2.0))),
                    Func::Sqrt => div(Expr::Num(0.5), self.clone()),
                    Func::Abs => div(arg, self.clone()),
                };
                mul(outer, d(e))
            }
        }
    }

    fn depends_on(&self, var: usize) -> bool {
        match self {
            Expr::Var(k) => *k == var,
            Expr::Num(_) | Expr::Param(_) => false,
            Expr::Neg(e) | Expr::Call(_, e) => e.depends_on(var),
            Expr::Binary(_, l, r) => l.depends_on(var) || r.depends_on(var),
        }
    }
}

// constructors for `derivative` that drop trivial zeros and ones

fn is_num(e: &Expr, v: f64) -> bool {
    matches!(e, Expr::Num(x) if *x == v)
}

fn neg(e: Expr) -> Expr {
    match e {
        Expr::Num(v) => Expr::Num(-v),
        e => Expr::Neg(Box::new(e)),
    }
}

fn add(l: Expr, r: Expr) -> Expr {
    if is_num(&l, 0.0) {
        r
    } else if is_num(&r, 0.0) {
        l
    } else {
        Expr::Binary(BinOp::Add, Box::new(l), Box::new(r))
    }
}

fn sub(l: Expr, r: Expr) -> Expr {
    if let (Expr::Num(a), Expr::Num(b)) = (&l, &r) {
        Expr::Num(a - b)
    } else if is_num(&r, 0.0) {
        l
    } else if is_num(&l, 0.0) {
        neg(r)
    } else {
        Expr::Binary(BinOp::Sub, Box::new(l), Box::new(r))
    }
}

fn mul(l: Expr, r: Expr) -> Expr {
    if is_num(&l, 0.0) || is_num(&r, 0.0) {
        Expr::Num(0.0)
    } else if is_num(&l, 1.0) {
        r
    } else if is_num(&r, 1.0) {
        l
    } else {
        Expr::Binary(BinOp::Mul, Box::new(l), Box::new(r))
    }
}

fn div(l: Expr, r: Expr) -> Expr {
    if is_num(&l, 0.0) {
        Expr::Num(0.0)
    } else {
        Expr::Binary(BinOp::Div, Box::new(l), Box::new(r))
    }
}

fn pow(base: Expr, exp: Expr) -> Expr {
    if is_num(&exp, 1.0) {
        base
    } else {
        Expr::Binary(BinOp::Pow, Box::new(base), Box::new(exp))
    }
}

fn call(f: Func, e: Expr) -> Expr {
    Expr::Call(f, Box::new(e))
}

fn fold(node: Expr) -> Expr {
    let constant = match &node {
        Expr::Call(_, e) => matches!(**e, Expr::Num(_)),
        Expr::Binary(_, l, r) => matches!(**l, Expr::Num(_)) && matches!(**r, Expr::Num(_)),
        _ => false,
    };
    if constant {
        // domain errors stay in the tree and surface at evaluation time
        if let Ok(v) = node.eval_bound(&[]) {
            if v.is_finite() {
                return Expr::Num(v);
            }
        }
    }
    node
}

// ---------------------------------------------------------------------------
// Compiled form

type Node = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Closure-compiled form of a parameter-free expression.
///
/// Evaluation performs the same floating-point operations as [`Expr::eval`],
/// so results are bit-identical. Domain violations turn into NaN and
/// [`Program::eval`] reports any NaN result as `None`; callers fall back to
/// the tree for the error, which also covers legitimate NaN results.
#[derive(Clone)]
pub struct Program {
    root: Node,
}

impl fmt::Debug for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Program")
    }
}

impl Program {
    /// `None` when the expression has free parameters.
    pub fn compile(e: &Expr) -> Option<Program> {
        Some(Program { root: node(e)? })
    }

    #[inline]
    pub fn eval(&self, state: &[f64]) -> Option<f64> {
        let v = (self.root)(state);
        (!v.is_nan()).then_some(v)
    }
}

fn node(e: &Expr) -> Option<Node> {
    Some(match e {
        Expr::Num(v) => {
            let v = *v;
            Arc::new(move |_| v)
        }
        Expr::Var(k) => {
            let k = k.checked_sub(1)?;
            Arc::new(move |s: &[f64]| s.get(k).copied().unwrap_or(f64::NAN))
        }
        Expr::Param(_) => return None,
        Expr::Neg(e) => {
            let e = node(e)?;
            Arc::new(move |s| -e(s))
        }
        Expr::Call(f, e) => {
            let e = node(e)?;
            match f {
                Func::Sin => Arc::new(move |s| e(s).sin()),
                Func::Cos => Arc::new(move |s| e(s).cos()),
                Func::Exp => Arc::new(move |s| e(s).exp()),
                Func::Log => Arc::new(move |s| {
                    let v = e(s);
                    if v > 0.0 {
                        v.ln()
                    } else {
                        f64::NAN
                    }
                }),
                Func::Tanh => Arc::new(move |s| e(s).tanh()),
                Func::Sqrt => Arc::new(move |s| {
                    let v = e(s);
                    if v >= 0.0 {
                        v.sqrt()
                    } else {
                        f64::NAN
                    }
                }),
                Func::Abs => Arc::new(move |s| e(s).abs()),
            }
        }
        Expr::Binary(op, l, r) => {
            let (l, r) = (node(l)?, node(r)?);
            match op {
                BinOp::Add => Arc::new(move |s| l(s) + r(s)),
                BinOp::Sub => Arc::new(move |s| l(s) - r(s)),
                BinOp::Mul => Arc::new(move |s| l(s) * r(s)),
                BinOp::Div => Arc::new(move |s| {
                    let (a, b) = (l(s), r(s));
                    if b != 0.0 {
                        a / b
                    } else {
                        f64::NAN
                    }
                }),
                BinOp::Pow => Arc::new(move |s| {
                    let (a, b) = (l(s), r(s));
                    if (a < 0.0 && b.fract() != 0.0) || (a == 0.0 && b < 0.0) {
                        f64::NAN
                    } else {
                        a.powf(b)
                    }
                }),
            }
        }
    })
}

// ---------------------------------------------------------------------------
// Printing

const PREC_ADD: u8 = 1;
const PREC_MUL: u8 = 2;
const PREC_NEG: u8 = 3;
const PREC_POW: u8 = 4;
const PREC_ATOM: u8 = 5;

fn precedence(e: &Expr) -> u8 {
    match e {
        Expr::Binary(BinOp::Add | BinOp::Sub, ..) => PREC_ADD,
        Expr::Binary(BinOp::Mul | BinOp::Div, ..) => PREC_MUL,
        Expr::Neg(_) => PREC_NEG,
        Expr::Binary(BinOp::Pow, ..) => PREC_POW,
        Expr::Num(v) if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) => PREC_NEG,
        _ => PREC_ATOM,
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, e: &Expr, parens: bool) -> fmt::Result {
    if parens {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

/// Prints with the minimal parentheses needed to re-parse into the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Var(k) => write!(f, "x{k}"),
            Expr::Param(name) => f.write_str(name),
            Expr::Neg(e) => {
                f.write_str("-")?;
                write_child(f, e, precedence(e) < PREC_NEG)
            }
            Expr::Call(func, e) => write!(f, "{}({e})", func.name()),
            Expr::Binary(BinOp::Pow, l, r) => {
                write_child(f, l, precedence(l) <= PREC_POW)?;
                f.write_str("^")?;
                write_child(f, r, precedence(r) < PREC_NEG)
            }
            Expr::Binary(op, l, r) => {
                let p = precedence(self);
                write_child(f, l, precedence(l) < p)?;
                write!(f, " {} ", op.symbol())?;
                write_child(f, r, precedence(r) <= p)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn num(v: f64) -> Box<Expr> {
        Box::new(Expr::Num(v))
    }
    fn var(k: usize) -> Box<Expr> {
        Box::new(Expr::Var(k))
    }

    #[test]
    fn precedence_examples() {
        assert_eq!(
            parse("2*x1 + 3").unwrap(),
            Expr::Binary(
                BinOp::Add,
                Box::new(Expr::Binary(BinOp::Mul, num(2.0), var(1))),
                num(3.0)
            )
        );
        assert_eq!(
            parse("2 + tanh(x1)").unwrap(),
            Expr::Binary(BinOp::Add, num(2.0), Box::new(Expr::Call(Func::Tanh, var(1))))
        );
        assert_eq!(
            parse("-x1^2").unwrap(),
            Expr::Neg(Box::new(Expr::Binary(BinOp::Pow, var(1), num(2.0))))
        );
    }

    #[test]
    fn power_is_right_associative_and_accepts_signed_exponent() {
        assert_eq!(
            parse("2^3^2").unwrap(),
            Expr::Binary(
                BinOp::Pow,
                num(2.0),
                Box::new(Expr::Binary(BinOp::Pow, num(3.0), num(2.0)))
            )
        );
        assert_eq!(parse("2^-1").unwrap().eval_bound(&[]).unwrap(), 0.5);
        assert_eq!(parse("1 - 2 - 3").unwrap().eval_bound(&[]).unwrap(), -4.0);
        assert_eq!(parse("8 / 4 / 2").unwrap().eval_bound(&[]).unwrap(), 1.0);
    }

    #[test]
    fn literals() {
        assert_eq!(parse("1.5e-3").unwrap(), Expr::Num(1.5e-3));
        assert_eq!(parse(".25").unwrap(), Expr::Num(0.25));
        assert_eq!(parse("3.").unwrap(), Expr::Num(3.0));
        assert!(parse("0x10").is_err());
        assert!(parse("1_000").is_err());
        assert!(parse("1e400").is_err());
    }

    #[test]
    fn eval_examples() {
        let p = Params::new();
        assert_eq!(parse("2*x1 + 3").unwrap().eval(&[1.0], &p).unwrap(), 5.0);
        assert_eq!(parse("2 + tanh(x1)").unwrap().eval(&[0.0], &p).unwrap(), 2.0);
        let err = parse("x1/x2").unwrap().eval(&[1.0, 0.0], &p).unwrap_err();
        assert_eq!(
            err,
            EvalError::Domain {
                reason: "division by zero",
                subexpr: "x1 / x2".into()
            }
        );
    }

    #[test]
    fn domain_errors_name_the_subexpression() {
        let p = Params::new();
        let e = parse("1 + log(x1 - 2)").unwrap();
        match e.eval(&[1.0], &p).unwrap_err() {
            EvalError::Domain { subexpr, .. } => assert_eq!(subexpr, "log(x1 - 2)"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse("sqrt(x1)").unwrap().eval(&[-1.0], &p).is_err());
        assert!(parse("x1^0.5").unwrap().eval(&[-4.0], &p).is_err());
        assert_eq!(parse("x1^3").unwrap().eval(&[-2.0], &p).unwrap(), -8.0);
        assert!(parse("x1^-1").unwrap().eval(&[0.0], &p).is_err());
    }

    #[test]
    fn unbound_names() {
        let p = Params::new();
        assert_eq!(
            parse("x3").unwrap().eval(&[1.0, 2.0], &p).unwrap_err(),
            EvalError::UnboundVariable { index: 3, len: 2 }
        );
        assert_eq!(
            parse("k*x1").unwrap().eval(&[1.0], &p).unwrap_err(),
            EvalError::UnboundParameter { name: "k".into() }
        );
        let mut p = Params::new();
        p.insert("k".into(), 4.0);
        assert_eq!(parse("k*x1").unwrap().eval(&[0.5], &p).unwrap(), 2.0);
    }

    #[test]
    fn syntax_errors_carry_offsets() {
        assert_eq!(parse("").unwrap_err(), ParseError::Empty);
        assert_eq!(parse("   ").unwrap_err(), ParseError::Empty);
        let e = parse("2x1").unwrap_err();
        assert!(matches!(e, ParseError::Syntax { offset: 1, .. }), "{e:?}");
        assert_eq!(parse("(x1 + 2").unwrap_err(), ParseError::Unbalanced { offset: 0 });
        assert_eq!(parse("x1 + 2)").unwrap_err(), ParseError::Unbalanced { offset: 6 });
        assert_eq!(parse("tanh(x1").unwrap_err(), ParseError::Unbalanced { offset: 4 });
        assert_eq!(
            parse("1 + foo(x1)").unwrap_err(),
            ParseError::UnknownFunction {
                offset: 4,
                name: "foo".into()
            }
        );
        assert!(matches!(parse("x0").unwrap_err(), ParseError::Syntax { offset: 0, .. }));
        assert!(matches!(
            parse("1 + * 2").unwrap_err(),
            ParseError::Syntax { offset: 4, .. }
        ));
        assert!(matches!(
            parse("1 +").unwrap_err(),
            ParseError::Syntax { offset: 3, .. }
        ));
        assert!(matches!(
            parse("exp + 1").unwrap_err(),
            ParseError::Syntax { offset: 0, .. }
        ));
        assert!(matches!(
            parse("+x1").unwrap_err(),
            ParseError::Syntax { offset: 0, .. }
        ));
        assert!(matches!(
            parse("x1 $ 2").unwrap_err(),
            ParseError::Syntax { offset: 3, .. }
        ));
    }

    #[test]
    fn print_is_minimal_and_reparses() {
        for src in [
            "-x1^2",
            "(-x1)^2",
            "(x1 - x2) - (x3 - 1)",
            "x1 - (x2 - 3)",
            "x1 / (x2 * x3)",
            "2^3^2",
            "(2^3)^2",
            "--x1",
            "sigma * (2 + tanh(x1))",
            "2^-x1",
            "-(x1 + 1) * 3",
        ] {
            let e = parse(src).unwrap();
            let printed = e.to_string();
            assert_eq!(parse(&printed).unwrap(), e, "{src} -> {printed}");
        }
        assert_eq!(parse("(x1*2)+(3)").unwrap().to_string(), "x1 * 2 + 3");
    }

    #[test]
    fn bind_substitutes_and_folds() {
        let mut p = Params::new();
        p.insert("sigma".into(), 2.0);
        p.insert("k".into(), 3.0);
        let e = parse("-k*x1 + sigma*sigma").unwrap();
        let b = e.bind(&p).unwrap();
        assert_eq!(b.to_string(), "-3 * x1 + 4");
        for x in [-1.3, 0.0, 2.7] {
            assert_eq!(
                b.eval_bound(&[x]).unwrap().to_bits(),
                e.eval(&[x], &p).unwrap().to_bits()
            );
        }
        assert!(parse("q*x1").unwrap().bind(&p).is_err());
        // a domain error in a constant subtree is kept for evaluation time
        let bad = parse("x1 + log(0)").unwrap().bind(&p).unwrap();
        assert!(bad.eval_bound(&[1.0]).is_err());
    }

    #[test]
    fn substitute_and_queries() {
        let e = parse("-gamma*x2 - dU").unwrap();
        let e = e
            .substitute("gamma", &parse("1 + 0.1*tanh(x1*x2)").unwrap())
            .substitute("dU", &parse("x1").unwrap());
        assert_eq!(e.param_names(), Vec::<String>::new());
        assert_eq!(e.max_var_index(), 2);
        let v = e.eval_bound(&[1.0, 2.0]).unwrap();
        let expect = -(1.0 + 0.1 * (2.0f64).tanh()) * 2.0 - 1.0;
        assert!((v - expect).abs() < 1e-15);
        assert_eq!(parse("a + b*a + x4").unwrap().param_names(), vec!["a", "b"]);
    }

    #[test]
    fn derivative_matches_central_differences() {
        let p: Params = [("c".to_string(), 1.5)].into();
        for src in [
            "x1^2/2",
            "c*x1^3 - sin(x1*x2)",
            "exp(-x1)*tanh(x2) + log(x1)",
            "sqrt(x1)/(1 + x2^2)",
            "x1^x2 + abs(x1 - 3)",
            "cos(x2) - x1",
        ] {
            let e = parse(src).unwrap();
            for var in 1..=2 {
                let de = e.derivative(var);
                let x = [1.3, 0.7];
                let h = 1e-6;
                let (mut xp, mut xm) = (x, x);
                xp[var - 1] += h;
                xm[var - 1] -= h;
                let fd = (e.eval(&xp, &p).unwrap() - e.eval(&xm, &p).unwrap()) / (2.0 * h);
                let exact = de.eval(&x, &p).unwrap();
                assert!((fd - exact).abs() < 1e-8 * (1.0 + exact.abs()), "{src} d/dx{var}: {de}");
            }
        }
        assert_eq!(parse("x1^2/2").unwrap().derivative(1).to_string(), "2 * x1 / 2");
        assert_eq!(parse("x2*c").unwrap().derivative(1), Expr::Num(0.0));
    }

    #[test]
    fn compiled_programs_match_tree_evaluation() {
        let x = [0.3, -1.7, 2.5];
        for src in [
            "2 + tanh(x1)",
            "-x1^2^0.5 / (x2 - 3)",
            "exp(-x3)*sin(x1*x2) - abs(x2)",
            "sqrt(x3)/log(x3)",
        ] {
            let e = parse(src).unwrap();
            let p = Program::compile(&e).unwrap();
            assert_eq!(
                p.eval(&x).unwrap().to_bits(),
                e.eval_bound(&x).unwrap().to_bits(),
                "{src}"
            );
        }
        let p = Program::compile(&parse("log(x1 - 1)").unwrap()).unwrap();
        assert_eq!(p.eval(&[0.5]), None);
        assert_eq!(p.eval(&[]), None);
        assert!(Program::compile(&parse("k*x1").unwrap()).is_none());
    }
}
