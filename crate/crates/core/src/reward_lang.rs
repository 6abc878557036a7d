//! Arithmetic expression language for per-timestep rewards.
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | primary
//! primary := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Functions: `abs`, `min`, `max`, `exp`, `tanh`, `sqrt`, `clamp(x, lo, hi)`.
//! Evaluation fails on any non-finite intermediate value, which covers
//! division by zero and the square root of a negative number.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }

    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Abs,
    Min,
    Max,
    Exp,
    Tanh,
    Sqrt,
    Clamp,
}

impl Func {
    pub const ALL: [Func; 7] = [
        Func::Abs,
        Func::Min,
        Func::Max,
        Func::Exp,
        Func::Tanh,
        Func::Sqrt,
        Func::Clamp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
            Func::Exp => "exp",
            Func::Tanh => "tanh",
            Func::Sqrt => "sqrt",
            Func::Clamp => "clamp",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Abs | Func::Exp | Func::Tanh | Func::Sqrt => 1,
            Func::Min | Func::Max => 2,
            Func::Clamp => 3,
        }
    }

    pub fn lookup(name: &str) -> Option<Func> {
        Func::ALL.into_iter().find(|f| f.name() == name)
    }

    /// Applies the function; `args.len()` must equal the arity.
    pub fn apply(self, args: &[f64]) -> f64 {
        match self {
            Func::Abs => libm::fabs(args[0]),
            Func::Min => libm::fmin(args[0], args[1]),
            Func::Max => libm::fmax(args[0], args[1]),
            Func::Exp => libm::exp(args[0]),
            Func::Tanh => libm::tanh(args[0]),
            Func::Sqrt => libm::sqrt(args[0]),
            Func::Clamp => libm::fmin(libm::fmax(args[0], args[1]), args[2]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(String),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("syntax error at {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown function `{name}` at {pos}")]
    UnknownFunction { name: String, pos: usize },
    #[error("`{name}` takes {expected} argument(s), got {found}")]
    Arity {
        name: String,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("unbound variable `{0}`")]
    UnboundVariable(String),
    #[error("non-finite value during evaluation")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let b = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let c = b[i];
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || (c == b'.' && b.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            let start = i;
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
            if i < b.len() && b[i] == b'.' {
                i += 1;
                while i < b.len() && b[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
                let mut j = i + 1;
                if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
                    j += 1;
                }
                if j < b.len() && b[j].is_ascii_digit() {
                    while j < b.len() && b[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text = &src[start..i];
            let v: f64 = text.parse().map_err(|_| ParseError::Syntax {
                pos: start,
                msg: format!("bad number `{text}`"),
            })?;
            if !v.is_finite() {
                return Err(ParseError::Syntax {
                    pos: start,
                    msg: format!("number `{text}` out of range"),
                });
            }
            out.push((start, Tok::Num(v)));
        } else if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'_') {
                i += 1;
            }
            out.push((start, Tok::Ident(src[start..i].to_string())));
        } else if b"+-*/(),".contains(&c) {
            out.push((i, Tok::Sym(c as char)));
            i += 1;
        } else {
            let ch = src[i..].chars().next().unwrap_or('?');
            return Err(ParseError::Syntax {
                pos: i,
                msg: format!("unexpected character `{ch}`"),
            });
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|(_, t)| t)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.at).map_or(self.end, |(p, _)| *p)
    }

    fn eat(&mut self, sym: char) -> bool {
        if self.peek() == Some(&Tok::Sym(sym)) {
            self.at += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, sym: char) -> Result<(), ParseError> {
        if self.eat(sym) {
            Ok(())
        } else {
            Err(self.error(format!("expected `{sym}`")))
        }
    }

    fn error(&self, msg: String) -> ParseError {
        let found = match self.peek() {
            None => String::from("end of input"),
            Some(Tok::Num(v)) => format!("number {v}"),
            Some(Tok::Ident(s)) => format!("`{s}`"),
            Some(Tok::Sym(c)) => format!("`{c}`"),
        };
        ParseError::Syntax {
            pos: self.pos(),
            msg: format!("{msg}, found {found}"),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat('+') {
                BinOp::Add
            } else if self.eat('-') {
                BinOp::Sub
            } else {
                return Ok(lhs);
            };
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat('*') {
                BinOp::Mul
            } else if self.eat('/') {
                BinOp::Div
            } else {
                return Ok(lhs);
            };
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat('-') {
            Ok(Expr::Neg(Box::new(self.unary()?)))
        } else {
            self.primary()
        }
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let pos = self.pos();
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.at += 1;
                Ok(Expr::Num(v))
            }
            Some(Tok::Ident(name)) => {
                self.at += 1;
                if !self.eat('(') {
                    return Ok(Expr::Var(name));
                }
                let func = Func::lookup(&name).ok_or_else(|| ParseError::UnknownFunction {
                    name: name.clone(),
                    pos,
                })?;
                let mut args = Vec::new();
                if !self.eat(')') {
                    loop {
                        args.push(self.expr()?);
                        if self.eat(')') {
                            break;
                        }
                        self.expect(',')?;
                    }
                }
                if args.len() != func.arity() {
                    return Err(ParseError::Arity {
                        name,
                        expected: func.arity(),
                        found: args.len(),
                    });
                }
                Ok(Expr::Call(func, args))
            }
            Some(Tok::Sym('(')) => {
                self.at += 1;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            _ => Err(self.error(String::from("expected an expression"))),
        }
    }
}

/// Parses reward source text. Trailing input is an error.
pub fn parse(source: &str) -> Result<Expr, ParseError> {
    let toks = lex(source)?;
    let mut p = Parser {
        toks,
        at: 0,
        end: source.len(),
    };
    let e = p.expr()?;
    if p.at != p.toks.len() {
        return Err(p.error(String::from("unexpected trailing input")));
    }
    Ok(e)
}

impl Expr {
    /// Exact set of variable names referenced.
    pub fn free_vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(v) => {
                out.insert(v.clone());
            }
            Expr::Neg(e) => e.collect_vars(out),
            Expr::Bin(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.collect_vars(out)),
        }
    }

    /// Evaluates against named variables.
    pub fn eval(&self, env: &BTreeMap<String, f64>) -> Result<f64, EvalError> {
        let v = match self {
            Expr::Num(v) => *v,
            Expr::Var(name) => *env.get(name).ok_or_else(|| EvalError::UnboundVariable(name.clone()))?,
            Expr::Neg(e) => -e.eval(env)?,
            Expr::Bin(op, a, b) => op.apply(a.eval(env)?, b.eval(env)?),
            Expr::Call(f, args) => {
                let mut vals = [0.0; 3];
                for (slot, a) in vals.iter_mut().zip(args) {
                    *slot = a.eval(env)?;
                }
                f.apply(&vals[..args.len()])
            }
        };
        finite(v)
    }

    /// Resolves variables to positions in `vars` for repeated evaluation.
    pub fn bind(&self, vars: &[&str]) -> Result<Bound, EvalError> {
        let mut code = Vec::new();
        self.compile(vars, &mut code)?;
        Ok(Bound { code })
    }

    fn compile(&self, vars: &[&str], code: &mut Vec<Op>) -> Result<(), EvalError> {
        match self {
            Expr::Num(v) => code.push(Op::Const(*v)),
            Expr::Var(name) => {
                let slot = vars
                    .iter()
                    .position(|v| v == name)
                    .ok_or_else(|| EvalError::UnboundVariable(name.clone()))?;
                code.push(Op::Load(slot));
            }
            Expr::Neg(e) => {
                e.compile(vars, code)?;
                code.push(Op::Neg);
            }
            Expr::Bin(op, a, b) => {
                a.compile(vars, code)?;
                b.compile(vars, code)?;
                code.push(Op::Bin(*op));
            }
            Expr::Call(f, args) => {
                for a in args {
                    a.compile(vars, code)?;
                }
                code.push(Op::Call(*f));
            }
        }
        Ok(())
    }
}

fn finite(v: f64) -> Result<f64, EvalError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError::NonFinite)
    }
}

/// Evaluates `ast` in `env`. Any non-finite input value is an error.
pub fn eval(ast: &Expr, env: &BTreeMap<String, f64>) -> Result<f64, EvalError> {
    if env.values().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    ast.eval(env)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Const(f64),
    Load(usize),
    Neg,
    Bin(BinOp),
    Call(Func),
}

/// An expression compiled to postfix form over positional variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Bound {
    code: Vec<Op>,
}

impl Bound {
    /// Evaluates with `values[i]` bound to the i-th variable given to [`Expr::bind`].
    pub fn eval(&self, values: &[f64], stack: &mut Vec<f64>) -> Result<f64, EvalError> {
        stack.clear();
        for op in &self.code {
            let v = match *op {
                Op::Const(c) => c,
                Op::Load(i) => values[i],
                Op::Neg => -stack.pop().unwrap_or_default(),
                Op::Bin(b) => {
                    let rhs = stack.pop().unwrap_or_default();
                    let lhs = stack.pop().unwrap_or_default();
                    b.apply(lhs, rhs)
                }
                Op::Call(f) => {
                    let n = f.arity();
                    let at = stack.len() - n;
                    let r = f.apply(&stack[at..]);
                    stack.truncate(at);
                    r
                }
            };
            stack.push(finite(v)?);
        }
        Ok(stack.pop().unwrap_or_default())
    }
}

/// Canonical printer: binary operations fully parenthesized.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var(name) => f.write_str(name),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}
