//! A small expression language for closed-form solutions.
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?          exponent must be constant
//! atom  := number | const | var | func '(' expr ')' | '(' expr ')'
//! func  := sin | cos | exp | tanh
//! const := pi | e
//! ```
//!
//! Variables are bound to input axes when parsing, so the same expression is
//! evaluated on [`Jet3`]s by the differentiation engine used for networks.

use std::fmt;

use crate::jets::Jet3;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Const(f64),
    Var(usize),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, f64),
    Func(Func, Box<Node>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func {
    Sin,
    Cos,
    Exp,
    Tanh,
}

/// A parsed expression with variables resolved to input axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
    dim: usize,
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl Expr {
    /// Parses `source`; `vars[k]` names input axis `k`.
    pub fn parse(source: &str, vars: &[&str]) -> Result<Self> {
        let mut p = Parser {
            src: source.as_bytes(),
            pos: 0,
            vars,
        };
        let root = p.expr()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(Expr {
            source: source.to_string(),
            root,
            dim: vars.len(),
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Value and derivatives up to third order at `x`.
    pub fn jet(&self, x: &[f64]) -> Result<Jet3> {
        self.check_point(x)?;
        Ok(eval_jet(&self.root, x))
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        Ok(eval_value(&self.root, x))
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "expression input",
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }
}

fn eval_jet(node: &Node, x: &[f64]) -> Jet3 {
    let dim = x.len();
    match node {
        Node::Const(c) => Jet3::constant(dim, *c),
        Node::Var(k) => Jet3::variable(dim, *k, x[*k]),
        Node::Neg(a) => eval_jet(a, x).scale(-1.0),
        Node::Add(a, b) => eval_jet(a, x).add(&eval_jet(b, x)),
        Node::Sub(a, b) => eval_jet(a, x).sub(&eval_jet(b, x)),
        Node::Mul(a, b) => eval_jet(a, x).mul(&eval_jet(b, x)),
        Node::Div(a, b) => eval_jet(a, x).div(&eval_jet(b, x)),
        Node::Pow(a, p) => eval_jet(a, x).powf(*p),
        Node::Func(f, a) => {
            let u = eval_jet(a, x);
            match f {
                Func::Sin => u.sin(),
                Func::Cos => u.cos(),
                Func::Exp => u.exp(),
                Func::Tanh => u.tanh(),
            }
        }
    }
}

fn eval_value(node: &Node, x: &[f64]) -> f64 {
    match node {
        Node::Const(c) => *c,
        Node::Var(k) => x[*k],
        Node::Neg(a) => -eval_value(a, x),
        Node::Add(a, b) => eval_value(a, x) + eval_value(b, x),
        Node::Sub(a, b) => eval_value(a, x) - eval_value(b, x),
        Node::Mul(a, b) => eval_value(a, x) * eval_value(b, x),
        Node::Div(a, b) => eval_value(a, x) / eval_value(b, x),
        Node::Pow(a, p) => {
            let u = eval_value(a, x);
            if p.fract() == 0.0 && p.abs() < i32::MAX as f64 {
                u.powi(*p as i32)
            } else {
                u.powf(*p)
            }
        }
        Node::Func(f, a) => {
            let u = eval_value(a, x);
            match f {
                Func::Sin => u.sin(),
                Func::Cos => u.cos(),
                Func::Exp => u.exp(),
                Func::Tanh => u.tanh(),
            }
        }
    }
}

fn is_constant(node: &Node) -> Option<f64> {
    match node {
        Node::Var(_) => None,
        Node::Const(c) => Some(*c),
        Node::Neg(a) => is_constant(a).map(|v| -v),
        Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
            is_constant(a)?;
            is_constant(b)?;
            Some(eval_value(node, &[]))
        }
        Node::Pow(a, _) | Node::Func(_, a) => {
            is_constant(a)?;
            Some(eval_value(node, &[]))
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    vars: &'a [&'a str],
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> Error {
        Error::Parse {
            pos: self.pos,
            msg: msg.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat(b'-') {
                lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = Node::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat(b'/') {
                lhs = Node::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.eat(b'-') {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let at = self.pos;
            let exponent = self.unary()?;
            let p = is_constant(&exponent).ok_or(Error::Parse {
                pos: at,
                msg: "exponent must be a constant".into(),
            })?;
            return Ok(Node::Pow(Box::new(base), p));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.error("expected ')'"));
                }
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            Some(_) => Err(self.error("unexpected character")),
            None => Err(self.error("unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<Node> {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_digit() || self.src[self.pos] == b'.')
        {
            self.pos += 1;
        }
        if self.pos < self.src.len() && matches!(self.src[self.pos], b'e' | b'E') {
            let mut look = self.pos + 1;
            if look < self.src.len() && matches!(self.src[look], b'+' | b'-') {
                look += 1;
            }
            if look < self.src.len() && self.src[look].is_ascii_digit() {
                self.pos = look;
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        text.parse::<f64>().map(Node::Const).map_err(|_| Error::Parse {
            pos: start,
            msg: format!("invalid number '{text}'"),
        })
    }

    fn ident(&mut self) -> Result<Node> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        let func = match name {
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "exp" => Some(Func::Exp),
            "tanh" => Some(Func::Tanh),
            _ => None,
        };
        if let Some(func) = func {
            if !self.eat(b'(') {
                return Err(self.error("expected '(' after function name"));
            }
            let arg = self.expr()?;
            if !self.eat(b')') {
                return Err(self.error("expected ')'"));
            }
            return Ok(Node::Func(func, Box::new(arg)));
        }
        match name {
            "pi" => Ok(Node::Const(std::f64::consts::PI)),
            "e" => Ok(Node::Const(std::f64::consts::E)),
            _ => match self.vars.iter().position(|v| *v == name) {
                Some(k) => Ok(Node::Var(k)),
                None => Err(Error::Parse {
                    pos: start,
                    msg: format!("unknown identifier '{name}'"),
                }),
            },
        }
    }
}
