//! Tiny arithmetic-expression evaluator for runtime-defined density fields.
//!
//! Grammar: `+ - * / ^`, unary minus, parentheses, numeric literals, the
//! identifiers `x`, `y`, `z` (node coordinates) and `h` (grid spacing), the
//! constants `pi` and `e`, and the functions `sin`, `cos`, `exp`, `abs`,
//! `sqrt`, `log`, `tanh`, `min`, `max`. Expressions are parsed once and
//! evaluated per node, so densities can be swapped without recompiling.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Token {
    Num(f64),
    Ident(usize), // index into the interned name table
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func {
    Sin,
    Cos,
    Exp,
    Abs,
    Sqrt,
    Log,
    Tanh,
    Min,
    Max,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        match name {
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "exp" => Some(Func::Exp),
            "abs" => Some(Func::Abs),
            "sqrt" => Some(Func::Sqrt),
            "log" => Some(Func::Log),
            "tanh" => Some(Func::Tanh),
            "min" => Some(Func::Min),
            "max" => Some(Func::Max),
            _ => None,
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }

    fn apply(self, args: &[f64]) -> f64 {
        match self {
            Func::Sin => args[0].sin(),
            Func::Cos => args[0].cos(),
            Func::Exp => args[0].exp(),
            Func::Abs => args[0].abs(),
            Func::Sqrt => args[0].sqrt(),
            Func::Log => args[0].ln(),
            Func::Tanh => args[0].tanh(),
            Func::Min => args[0].min(args[1]),
            Func::Max => args[0].max(args[1]),
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Num(f64),
    Var(u8), // 0=x 1=y 2=z 3=h
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

/// A parsed scalar expression in the variables x, y, z and the grid spacing h.
#[derive(Debug, Clone)]
pub struct Expr {
    root: Node,
    source: String,
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr> {
        let mut names = Vec::new();
        let tokens = tokenize(src, &mut names)?;
        let mut p = Parser { tokens: &tokens, names: &names, pos: 0, src };
        let root = p.expression()?;
        if p.pos != p.tokens.len() {
            return Err(Error::Expr(format!(
                "unexpected trailing input at token {} in '{src}'",
                p.pos
            )));
        }
        Ok(Expr { root, source: src.to_string() })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn eval(&self, x: f64, y: f64, z: f64, h: f64) -> f64 {
        eval_node(&self.root, [x, y, z, h])
    }
}

fn eval_node(n: &Node, v: [f64; 4]) -> f64 {
    match n {
        Node::Num(c) => *c,
        Node::Var(i) => v[*i as usize],
        Node::Neg(a) => -eval_node(a, v),
        Node::Add(a, b) => eval_node(a, v) + eval_node(b, v),
        Node::Sub(a, b) => eval_node(a, v) - eval_node(b, v),
        Node::Mul(a, b) => eval_node(a, v) * eval_node(b, v),
        Node::Div(a, b) => eval_node(a, v) / eval_node(b, v),
        Node::Pow(a, b) => eval_node(a, v).powf(eval_node(b, v)),
        Node::Call(f, args) => {
            let mut buf = [0.0; 2];
            for (i, a) in args.iter().enumerate() {
                buf[i] = eval_node(a, v);
            }
            f.apply(&buf[..args.len()])
        }
    }
}

fn tokenize(src: &str, names: &mut Vec<String>) -> Result<Vec<Token>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => { out.push(Token::Plus); i += 1 }
            '-' => { out.push(Token::Minus); i += 1 }
            '*' => { out.push(Token::Star); i += 1 }
            '/' => { out.push(Token::Slash); i += 1 }
            '^' => { out.push(Token::Caret); i += 1 }
            '(' => { out.push(Token::LParen); i += 1 }
            ')' => { out.push(Token::RParen); i += 1 }
            ',' => { out.push(Token::Comma); i += 1 }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() {
                    let d = bytes[i] as char;
                    if d.is_ascii_digit() || d == '.' {
                        i += 1;
                    } else if (d == 'e' || d == 'E')
                        && i + 1 < bytes.len()
                        && ((bytes[i + 1] as char).is_ascii_digit()
                            || bytes[i + 1] == b'+'
                            || bytes[i + 1] == b'-')
                    {
                        i += 2;
                    } else {
                        break;
                    }
                }
                let text = &src[start..i];
                let v: f64 = text
                    .parse()
                    .map_err(|_| Error::Expr(format!("bad numeric literal '{text}'")))?;
                out.push(Token::Num(v));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < bytes.len()
                    && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                names.push(src[start..i].to_string());
                out.push(Token::Ident(names.len() - 1));
            }
            other => return Err(Error::Expr(format!("unexpected character '{other}' in '{src}'"))),
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: &'a [Token],
    names: &'a [String],
    pos: usize,
    src: &'a str,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<Token> {
        self.tokens.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<Token> {
        let t = self.peek();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, t: Token) -> Result<()> {
        match self.bump() {
            Some(got) if got == t => Ok(()),
            other => Err(Error::Expr(format!(
                "expected {t:?}, found {other:?} in '{}'",
                self.src
            ))),
        }
    }

    fn expression(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        while let Some(op) = self.peek() {
            match op {
                Token::Plus => {
                    self.bump();
                    lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Token::Minus => {
                    self.bump();
                    lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.peek() {
            match op {
                Token::Star => {
                    self.bump();
                    lhs = Node::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Token::Slash => {
                    self.bump();
                    lhs = Node::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node> {
        if self.peek() == Some(Token::Minus) {
            self.bump();
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.peek() == Some(Token::Caret) {
            self.bump();
            // right-associative; exponent may carry a unary minus
            let exp = self.unary()?;
            return Ok(Node::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        match self.bump() {
            Some(Token::Num(v)) => Ok(Node::Num(v)),
            Some(Token::LParen) => {
                let inner = self.expression()?;
                self.expect(Token::RParen)?;
                Ok(inner)
            }
            Some(Token::Ident(id)) => {
                let name = self.names[id].as_str();
                if self.peek() == Some(Token::LParen) {
                    let f = Func::from_name(name).ok_or_else(|| {
                        Error::Expr(format!("unknown function '{name}' in '{}'", self.src))
                    })?;
                    self.bump();
                    let mut args = vec![self.expression()?];
                    while self.peek() == Some(Token::Comma) {
                        self.bump();
                        args.push(self.expression()?);
                    }
                    self.expect(Token::RParen)?;
                    if args.len() != f.arity() {
                        return Err(Error::Expr(format!(
                            "function '{name}' takes {} argument(s), got {}",
                            f.arity(),
                            args.len()
                        )));
                    }
                    Ok(Node::Call(f, args))
                } else {
                    match name {
                        "x" => Ok(Node::Var(0)),
                        "y" => Ok(Node::Var(1)),
                        "z" => Ok(Node::Var(2)),
                        "h" => Ok(Node::Var(3)),
                        "pi" => Ok(Node::Num(std::f64::consts::PI)),
                        "e" => Ok(Node::Num(std::f64::consts::E)),
                        other => Err(Error::Expr(format!(
                            "unknown identifier '{other}' in '{}'",
                            self.src
                        ))),
                    }
                }
            }
            other => Err(Error::Expr(format!(
                "unexpected token {other:?} in '{}'",
                self.src
            ))),
        }
    }
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    /// Random expression tree paired with a direct evaluator.
    #[derive(Debug, Clone)]
    enum Tree {
        Num(f64),
        Var(u8),
        Add(Box<Tree>, Box<Tree>),
        Sub(Box<Tree>, Box<Tree>),
        Mul(Box<Tree>, Box<Tree>),
        Sin(Box<Tree>),
        Abs(Box<Tree>),
    }

    impl Tree {
        fn render(&self) -> String {
            match self {
                Tree::Num(v) => format!("{v:?}"),
                Tree::Var(0) => "x".into(),
                Tree::Var(1) => "y".into(),
                Tree::Var(_) => "z".into(),
                Tree::Add(a, b) => format!("({} + {})", a.render(), b.render()),
                Tree::Sub(a, b) => format!("({} - {})", a.render(), b.render()),
                Tree::Mul(a, b) => format!("({} * {})", a.render(), b.render()),
                Tree::Sin(a) => format!("sin({})", a.render()),
                Tree::Abs(a) => format!("abs({})", a.render()),
            }
        }

        fn eval(&self, x: f64, y: f64, z: f64) -> f64 {
            match self {
                Tree::Num(v) => *v,
                Tree::Var(0) => x,
                Tree::Var(1) => y,
                Tree::Var(_) => z,
                Tree::Add(a, b) => a.eval(x, y, z) + b.eval(x, y, z),
                Tree::Sub(a, b) => a.eval(x, y, z) - b.eval(x, y, z),
                Tree::Mul(a, b) => a.eval(x, y, z) * b.eval(x, y, z),
                Tree::Sin(a) => a.eval(x, y, z).sin(),
                Tree::Abs(a) => a.eval(x, y, z).abs(),
            }
        }
    }

    fn tree_strategy() -> impl Strategy<Value = Tree> {
        let leaf = prop_oneof![
            (-4.0..4.0f64).prop_map(Tree::Num),
            (0u8..3).prop_map(Tree::Var),
        ];
        leaf.prop_recursive(4, 24, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| Tree::Add(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| Tree::Sub(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| Tree::Mul(Box::new(a), Box::new(b))),
                inner.clone().prop_map(|a| Tree::Sin(Box::new(a))),
                inner.prop_map(|a| Tree::Abs(Box::new(a))),
            ]
        })
    }

    proptest! {
        #[test]
        fn parser_matches_direct_evaluation(
            tree in tree_strategy(),
            x in -2.0..2.0f64,
            y in -2.0..2.0f64,
            z in -2.0..2.0f64,
        ) {
            let expr = Expr::parse(&tree.render()).unwrap();
            let got = expr.eval(x, y, z, 0.01);
            let want = tree.eval(x, y, z);
            prop_assert!(
                (got - want).abs() <= 1e-9 * (1.0 + want.abs()),
                "{} -> {got} vs {want}", tree.render()
            );
        }
    }
}
